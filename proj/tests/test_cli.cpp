#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "hamkit/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CmdResult {
    int code = -1;
    std::string out;  // stdout + stderr interleaved
};

CmdResult run_cli(const std::string& args) {
    const std::string cmd = std::string(HAMKIT_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CmdResult res;
    char buf[4096];
    std::size_t got;
    while ((got = fread(buf, 1, sizeof(buf), pipe)) > 0) res.out.append(buf, got);
    const int rc = pclose(pipe);
    res.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    return res;
}

std::string read_file(const fs::path& p) { return hamkit::read_text_file(p.string()); }

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "hamkit_cli_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Minimal structural validator for the shipped JSON schemas: required
// fields must exist, and any property present must match the declared
// type / const / enum. Nested objects and array items recurse.
bool type_matches(const json& instance, const std::string& type) {
    if (type == "object") return instance.is_object();
    if (type == "array") return instance.is_array();
    if (type == "string") return instance.is_string();
    if (type == "boolean") return instance.is_boolean();
    if (type == "integer") return instance.is_number_integer() || instance.is_number_unsigned();
    if (type == "number") return instance.is_number();
    if (type == "null") return instance.is_null();
    return false;
}

void validate_against(const json& instance, const json& schema, const std::string& where) {
    INFO("at " << where);
    if (schema.contains("const")) REQUIRE(instance == schema.at("const"));
    if (schema.contains("enum")) {
        bool hit = false;
        for (const auto& v : schema.at("enum")) hit = hit || instance == v;
        REQUIRE(hit);
    }
    if (schema.contains("type")) {
        const json& t = schema.at("type");
        bool ok = false;
        if (t.is_string()) {
            ok = type_matches(instance, t.get<std::string>());
        } else {
            for (const auto& alt : t) ok = ok || type_matches(instance, alt.get<std::string>());
        }
        REQUIRE(ok);
    }
    if (instance.is_object()) {
        if (schema.contains("required"))
            for (const auto& name : schema.at("required")) {
                INFO("required field " << name.get<std::string>());
                REQUIRE(instance.contains(name.get<std::string>()));
            }
        if (schema.contains("properties"))
            for (const auto& [name, sub] : schema.at("properties").items())
                if (instance.contains(name))
                    validate_against(instance.at(name), sub, where + "." + name);
        if (schema.contains("additionalProperties") && schema.at("additionalProperties").is_object())
            for (const auto& [name, value] : instance.items())
                if (!schema.contains("properties") || !schema.at("properties").contains(name))
                    validate_against(value, schema.at("additionalProperties"), where + "." + name);
    }
    if (instance.is_array() && schema.contains("items")) {
        if (schema.contains("minItems"))
            REQUIRE(instance.size() >= schema.at("minItems").get<std::size_t>());
        for (std::size_t i = 0; i < instance.size(); ++i)
            validate_against(instance[i], schema.at("items"), where + "[" + std::to_string(i) + "]");
    }
}

void validate_schema_file(const json& instance, const std::string& schema_name) {
    const fs::path path = fs::path(HAMKIT_REPO_DIR) / "schemas" / schema_name;
    json schema = json::parse(read_file(path));
    validate_against(instance, schema, schema_name);
}

const char* kTinyTask =
    "--height 8 --width 8 --c-in 6 --classes 2 --r-true 3 --library 4 "
    "--train-count 24 --val-count 8 --test-count 8 --seed 7 --noise-sigma 0.1";

std::string tiny_experiment_json(const std::string& out_dir) {
    json j{
        {"task",
         {{"height", 8}, {"width", 8}, {"c_in", 6}, {"classes", 2}, {"r_true", 3},
          {"noise_sigma", 0.1}, {"texture_library", 4},
          {"train_count", 24}, {"val_count", 8}, {"test_count", 8}, {"seed", 7}}},
        {"model",
         {{"c_in", 6}, {"d_z", 8}, {"classes", 2}, {"context", "hamburger"},
          {"ham",
           {{"d_z", 8}, {"d", 8}, {"r", 2}, {"k", 2}, {"model", "vq"},
            {"temperature", 0.05}, {"beta", 0.01}, {"grad_mode", "one-step"},
            {"use_relu_pre_ham", true}, {"include_lower_bread", true},
            {"include_upper_bread", true}, {"use_bn", true}}}}},
        {"train",
         {{"lr0", 0.009}, {"momentum", 0.9}, {"weight_decay", 1e-4}, {"poly_power", 0.9},
          {"batch", 4}, {"iters_max", 20}, {"eval_interval", 10}, {"seed", 0}}},
        {"seeds", {1, 2}},
    };
    j["out_dir"] = out_dir;
    return j.dump(2);
}

bool dirs_byte_identical(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> rel;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a));
    for (const auto& r : rel) {
        if (!fs::exists(b / r)) return false;
        if (read_file(a / r) != read_file(b / r)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("gen-data writes deterministic datasets and guards its output") {
    const fs::path root = fresh_dir("gen");
    const std::string a = (root / "a").string(), b = (root / "b").string();

    REQUIRE(run_cli("gen-data --out " + a + " " + kTinyTask).code == 0);
    REQUIRE(run_cli("gen-data --out " + b + " " + kTinyTask).code == 0);
    CHECK(dirs_byte_identical(a, b));
    CHECK(fs::exists(fs::path(a) / "task.json"));
    CHECK(fs::exists(fs::path(a) / "train_0.bin"));
    CHECK(fs::exists(fs::path(a) / "val_labels.csv"));

    SECTION("refuses to overwrite without --force") {
        CmdResult res = run_cli("gen-data --out " + a + " " + kTinyTask);
        CHECK(res.code == 1);
        CHECK(res.out.find("--force") != std::string::npos);
        CHECK(run_cli("gen-data --out " + a + " --force " + kTinyTask).code == 0);
    }
    SECTION("missing parent directory is an I/O error naming the path") {
        const std::string bad = (root / "no" / "such" / "parent").string();
        CmdResult res = run_cli("gen-data --out " + bad + " " + kTinyTask);
        CHECK(res.code == 3);
        CHECK(res.out.find("no/such") != std::string::npos);
    }
    SECTION("parameter errors fire before any file is written") {
        const std::string bad = (root / "badspec").string();
        CmdResult res = run_cli("gen-data --out " + bad + " --classes 9 --library 4");
        CHECK(res.code == 1);
        CHECK_FALSE(fs::exists(bad));
    }
}

TEST_CASE("train emits the summary line, metrics, and a schema-valid report") {
    const fs::path root = fresh_dir("train");
    const std::string data = (root / "data").string();
    const std::string out = (root / "run").string();
    REQUIRE(run_cli("gen-data --out " + data + " " + kTinyTask).code == 0);

    const std::string cfg_path = (root / "exp.json").string();
    hamkit::write_text_file(cfg_path, tiny_experiment_json(out));

    CmdResult res = run_cli("train --config " + cfg_path + " --data " + data);
    REQUIRE(res.code == 0);
    CHECK(res.out.find("best(mean)") != std::string::npos);

    CHECK(fs::exists(fs::path(out) / "config.snapshot"));
    for (int seed : {1, 2}) {
        const fs::path sd = fs::path(out) / ("seed-" + std::to_string(seed));
        CHECK(fs::exists(sd / "metrics.csv"));
        CHECK(fs::exists(sd / "checkpoints" / "session.json"));
        CHECK(read_file(sd / "metrics.csv").rfind("iter,loss,acc,miou\n", 0) == 0);
    }
    json report = json::parse(read_file(fs::path(out) / "report.json"));
    validate_schema_file(report, "train_report.schema.json");
    CHECK(report.at("per_seed").size() == 2);
    CHECK(report.at("any_nan") == false);

    SECTION("a saved config snapshot re-runs bit-identically") {
        const std::string out2 = (root / "run2").string();
        json snap = json::parse(read_file(fs::path(out) / "config.snapshot"));
        snap["out_dir"] = out2;
        const std::string snap_path = (root / "snap.json").string();
        hamkit::write_text_file(snap_path, snap.dump(2));
        REQUIRE(run_cli("train --config " + snap_path + " --data " + data).code == 0);
        CHECK(read_file(fs::path(out) / "report.json") ==
              read_file(fs::path(out2) / "report.json"));
        CHECK(read_file(fs::path(out) / "seed-1" / "metrics.csv") ==
              read_file(fs::path(out2) / "seed-1" / "metrics.csv"));
    }
    SECTION("--jobs across seeds changes nothing but wall time") {
        const std::string out3 = (root / "run3").string();
        REQUIRE(run_cli("train --config " + cfg_path + " --data " + data + " --out " + out3 +
                        " --jobs 2").code == 0);
        CHECK(read_file(fs::path(out) / "report.json") ==
              read_file(fs::path(out3) / "report.json"));
    }
    SECTION("invalid grad mode is a usage error listing the choices") {
        CmdResult bad = run_cli("train --config " + cfg_path + " --data " + data +
                                " --grad-mode newton");
        CHECK(bad.code == 1);
        CHECK(bad.out.find("bptt") != std::string::npos);
        CHECK(bad.out.find("one-step") != std::string::npos);
        CHECK(bad.out.find("implicit") != std::string::npos);
    }
}

TEST_CASE("interrupted training resumes to the uninterrupted trace") {
    const fs::path root = fresh_dir("resume");
    const std::string data = (root / "data").string();
    REQUIRE(run_cli("gen-data --out " + data + " " + kTinyTask).code == 0);

    const std::string full = (root / "full").string();
    const std::string split = (root / "split").string();
    const std::string cfg_full = (root / "full.json").string();
    const std::string cfg_split = (root / "split.json").string();
    hamkit::write_text_file(cfg_full, tiny_experiment_json(full));
    hamkit::write_text_file(cfg_split, tiny_experiment_json(split));

    REQUIRE(run_cli("train --config " + cfg_full + " --data " + data).code == 0);
    REQUIRE(run_cli("train --config " + cfg_split + " --data " + data + " --stop-after 7").code == 0);
    REQUIRE(run_cli("train --config " + cfg_split + " --data " + data + " --resume").code == 0);

    for (int seed : {1, 2}) {
        const std::string rel = "seed-" + std::to_string(seed) + "/metrics.csv";
        CHECK(read_file(fs::path(full) / rel) == read_file(fs::path(split) / rel));
    }
    CHECK(read_file(fs::path(full) / "report.json") == read_file(fs::path(split) / "report.json"));
}

TEST_CASE("grad-check against oracles and designed failures") {
    const fs::path root = fresh_dir("gradcheck");

    SECTION("bptt on the default tiny problem beats the oracle tolerance") {
        for (const char* ham : {"vq", "cd", "nmf"}) {
            CmdResult res = run_cli("grad-check --ham " + std::string(ham) + " --mode bptt");
            REQUIRE(res.code == 0);
            json j = json::parse(res.out);
            validate_schema_file(j, "grad_report.schema.json");
            CHECK(j.at("oracle_max_rel_error").get<double>() < 1e-4);
        }
    }
    SECTION("one-step equals bptt at K=1") {
        for (const char* ham : {"vq", "cd", "nmf"}) {
            CmdResult res = run_cli("grad-check --ham " + std::string(ham) +
                                    " --mode one-step --k 1");
            REQUIRE(res.code == 0);
            CHECK(json::parse(res.out).at("delta_vs_bptt").get<double>() < 1e-12);
        }
    }
    SECTION("implicit gradient works where the solver is contractive") {
        CmdResult res = run_cli("grad-check --ham vq --mode implicit --k 400 --temperature 0.2");
        REQUIRE(res.code == 0);
        validate_schema_file(json::parse(res.out), "grad_report.schema.json");

        CmdResult probe = run_cli("grad-check --mode implicit --probe contractive");
        REQUIRE(probe.code == 0);
        CHECK(json::parse(probe.out).at("delta_vs_bptt_200").get<double>() < 1e-5);
    }
    SECTION("implicit on a non-contractive probe exits 2 with a diagnostic") {
        CmdResult res = run_cli("grad-check --mode implicit --probe expanding");
        CHECK(res.code == 2);
        CHECK(res.out.find("diverged") != std::string::npos);
    }
    SECTION("reports are byte-identical across re-runs") {
        const std::string f1 = (root / "a.json").string(), f2 = (root / "b.json").string();
        REQUIRE(run_cli("grad-check --ham nmf --mode bptt --out " + f1).code == 0);
        REQUIRE(run_cli("grad-check --ham nmf --mode bptt --out " + f2).code == 0);
        CHECK(read_file(f1) == read_file(f2));
    }
    SECTION("unknown ham is a usage error") {
        CHECK(run_cli("grad-check --ham pca --mode bptt").code == 1);
    }
}

TEST_CASE("probe-props covers the three propositions") {
    for (int prop : {1, 2, 3}) {
        CmdResult res = run_cli("probe-props --prop " + std::to_string(prop));
        REQUIRE(res.code == 0);
        json j = json::parse(res.out);
        validate_schema_file(j, "probe_report.schema.json");
        if (prop == 1) CHECK(j.at("slope_error").get<double>() < 0.05);
        if (prop == 2) CHECK(j.at("max_delta").get<double>() < 1e-5);
        if (prop == 3) CHECK(j.at("bound_holds") == true);
    }
    CHECK(run_cli("probe-props --prop 4").code == 1);
}

TEST_CASE("spectrum on a trained checkpoint saturates at the factorization rank") {
    const fs::path root = fresh_dir("spectrum");
    const std::string data = (root / "data").string();
    const std::string out = (root / "run").string();
    REQUIRE(run_cli("gen-data --out " + data + " " + kTinyTask).code == 0);
    const std::string cfg = (root / "exp.json").string();
    hamkit::write_text_file(cfg, tiny_experiment_json(out));
    REQUIRE(run_cli("train --config " + cfg + " --data " + data + " --seeds 1").code == 0);

    const std::string ckpt = (fs::path(out) / "seed-1" / "checkpoints").string();
    CmdResult res = run_cli("spectrum --checkpoint " + ckpt + " --data " + data +
                            " --split val --sample 0");
    REQUIRE(res.code == 0);
    REQUIRE(res.out.rfind("index,sigma_before,sigma_after,ratio_before,ratio_after\n", 0) == 0);

    // Row r (rank of the trained factorization) must report ratio_after = 1.
    std::istringstream lines(res.out);
    std::string line;
    std::getline(lines, line);  // header
    double ratio_at_r = 0.0;
    for (std::size_t row = 1; std::getline(lines, line); ++row) {
        if (row == 2) {  // the tiny config trains with r = 2
            const std::size_t last_comma = line.rfind(',');
            ratio_at_r = std::stod(line.substr(last_comma + 1));
        }
    }
    CHECK(ratio_at_r == Catch::Approx(1.0).margin(1e-9));

    CHECK(run_cli("spectrum --checkpoint " + ckpt + " --data " + data + " --sample 99").code == 1);
    CHECK(run_cli("spectrum --checkpoint " + (root / "nowhere").string() + " --data " + data)
              .code == 3);
}

TEST_CASE("cost reproduces the reference table through the CLI") {
    CmdResult sa = run_cli("cost --block sa --shape 512x128x128");
    REQUIRE(sa.code == 0);
    json jsa = json::parse(sa.out);
    validate_schema_file(jsa, "cost_report.schema.json");
    CHECK(std::abs(jsa.at("macs").get<double>() / 2.92e11 - 1.0) < 0.10);
    CHECK(std::abs(jsa.at("params").get<double>() / 1.0e6 - 1.0) < 0.05);

    CmdResult ham = run_cli("cost --block ham-nmf --shape 512x128x128 --r 64 --K 6");
    REQUIRE(ham.code == 0);
    json jham = json::parse(ham.out);
    validate_schema_file(jham, "cost_report.schema.json");
    CHECK(std::abs(jham.at("params").get<double>() / 5.2e5 - 1.0) < 0.05);
    CHECK(std::abs(jham.at("macs").get<double>() / 17.6e9 - 1.0) < 0.15);

    CmdResult rerun = run_cli("cost --block ham-nmf --shape 512x128x128 --r 64 --K 6");
    CHECK(rerun.out == ham.out);

    CHECK(run_cli("cost --block conv --shape 8x4x4").code == 1);
}

TEST_CASE("bench emits a schema-valid timing report") {
    CmdResult res = run_cli("bench --block hamburger --c 8 --n 64 --repeats 5 --r 2 --K 2");
    REQUIRE(res.code == 0);
    json j = json::parse(res.out);
    validate_schema_file(j, "bench_result.schema.json");
    CHECK(j.at("samples_ms").size() == 5);
    CHECK(run_cli("bench --block conv --n 64").code == 1);
}

TEST_CASE("environment and usage guards") {
    CHECK(run_cli("nonsense-subcommand").code == 1);
    CHECK(run_cli("--help").code == 0);

    // HAMKIT_THREADS must be a positive integer when set.
    const std::string base = "cost --block sa --shape 4x2x2";
    CmdResult bad = run_cli("cost --block sa --shape 4x2x2");
    CHECK(bad.code == 0);
    {
        const std::string cmd = "HAMKIT_THREADS=abc " + std::string(HAMKIT_CLI_PATH) + " " + base +
                                " >/dev/null 2>&1";
        CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 1);
    }
    {
        const std::string cmd = "HAMKIT_THREADS=2 " + std::string(HAMKIT_CLI_PATH) + " " + base +
                                " >/dev/null 2>&1";
        CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    }
}
