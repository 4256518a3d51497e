// hamkit: one executable for data generation, training, gradient checks,
// contraction probes, spectrum/cost reports, and micro-benchmarks.
//
// Exit codes (stable contract): 0 success, 1 usage/config error,
// 2 numeric failure, 3 I/O error.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hamkit/analyzer.hpp"
#include "hamkit/burger.hpp"
#include "hamkit/graddiff.hpp"
#include "hamkit/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hamkit;

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
    std::string text = read_text_file(path);  // io_error on missing file
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw usage_error("config file " + path + " is not valid JSON: " + e.what());
    }
}

void write_output(const std::string& out_path, const std::string& content) {
    if (out_path.empty()) {
        std::cout << content;
        if (!content.empty() && content.back() != '\n') std::cout << '\n';
    } else {
        write_text_file(out_path, content);
    }
}

GradMode parse_grad_mode(const std::string& s) {
    if (s == "bptt") return GradMode::BPTT;
    if (s == "one-step") return GradMode::OneStep;
    if (s == "implicit") return GradMode::Implicit;
    throw usage_error("unknown grad_mode '" + s + "'; expected one of {bptt, one-step, implicit}");
}

MdKind parse_md_kind(const std::string& s) {
    if (s == "vq") return MdKind::VQ;
    if (s == "cd") return MdKind::CD;
    if (s == "nmf") return MdKind::NMF;
    throw usage_error("unknown ham '" + s + "'; expected one of {vq, cd, nmf}");
}

std::vector<std::size_t> parse_x_separated(const std::string& s, std::size_t expect,
                                           const char* what) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, 'x')) {
        try {
            out.push_back(static_cast<std::size_t>(std::stoull(tok)));
        } catch (const std::exception&) {
            throw usage_error(std::string(what) + ": cannot parse '" + s + "'");
        }
    }
    if (out.size() != expect)
        throw usage_error(std::string(what) + ": expected " + std::to_string(expect) +
                          " x-separated integers, got '" + s + "'");
    return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stoull(tok));
        } catch (const std::exception&) {
            throw usage_error("--seeds: cannot parse '" + s + "'");
        }
    }
    if (out.empty()) throw usage_error("--seeds: empty list");
    return out;
}

std::size_t thread_cap() {
    const char* env = std::getenv("HAMKIT_THREADS");
    if (!env) return std::thread::hardware_concurrency() ? std::thread::hardware_concurrency() : 1;
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) throw usage_error("HAMKIT_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string config_path, out_dir;
    bool force = false;
    // flag overrides; -1 sentinel means "not set"
    long long height = -1, width = -1, c_in = -1, classes = -1, r_true = -1, library = -1;
    long long train_count = -1, val_count = -1, test_count = -1, seed = -1;
    double noise_sigma = -1.0;
};

int run_gen_data(const GenDataArgs& a) {
    SyntheticTaskSpec spec;
    if (!a.config_path.empty()) {
        json j = read_json_file(a.config_path);
        spec = task_spec_from_json(j.contains("task") ? j.at("task") : j);
    }
    auto ovr = [](long long v, std::size_t& field) {
        if (v >= 0) field = static_cast<std::size_t>(v);
    };
    ovr(a.height, spec.height);
    ovr(a.width, spec.width);
    ovr(a.c_in, spec.c_in);
    ovr(a.classes, spec.classes);
    ovr(a.r_true, spec.r_true);
    ovr(a.library, spec.texture_library);
    ovr(a.train_count, spec.train_count);
    ovr(a.val_count, spec.val_count);
    ovr(a.test_count, spec.test_count);
    if (a.seed >= 0) spec.seed = static_cast<std::uint64_t>(a.seed);
    if (a.noise_sigma >= 0.0) spec.noise_sigma = a.noise_sigma;

    // Parameter validation happens before any file is touched.
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw usage_error(e.what());
    }

    const fs::path out(a.out_dir);
    const fs::path parent = out.parent_path();
    if (!parent.empty() && !fs::exists(parent))
        throw io_error("gen-data: parent directory does not exist: " + parent.string());
    if (fs::exists(out) && !fs::is_empty(out) && !a.force)
        throw usage_error("gen-data: output directory " + out.string() +
                          " is not empty; pass --force to overwrite");

    Dataset data = make_synthetic_task(spec);
    save_dataset(data, out.string());
    write_text_file((out / "task.json").string(), task_spec_json(spec).dump(2) + "\n");
    std::cout << "wrote " << data.train.size() << "/" << data.val.size() << "/"
              << data.test.size() << " train/val/test samples to " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    SyntheticTaskSpec task;
    ModelConfig model;
    TrainConfig train_cfg;
    std::string out_dir;
    std::string data_dir;  // optional: load the dataset instead of generating
    std::vector<std::uint64_t> seeds{0};
};

json experiment_config_json(const ExperimentConfig& c) {
    return json{{"task", task_spec_json(c.task)},
                {"model", model_config_json(c.model)},
                {"train", train_config_json(c.train_cfg)},
                {"out_dir", c.out_dir},
                {"data_dir", c.data_dir},
                {"seeds", c.seeds}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    if (j.contains("task")) c.task = task_spec_from_json(j.at("task"));
    if (j.contains("model")) {
        try {
            c.model = model_config_from_json(j.at("model"));
        } catch (const io_error& e) {
            throw usage_error(e.what());
        }
    }
    if (j.contains("train")) c.train_cfg = train_config_from_json(j.at("train"));
    c.out_dir = j.value("out_dir", "");
    c.data_dir = j.value("data_dir", "");
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    return c;
}

struct TrainArgs {
    std::string config_path, data_dir, out_dir, seeds, context, grad_mode, ham_model;
    long long iters = -1, stop_after = -1, batch = -1, eval_interval = -1;
    double lr0 = -1.0;
    bool resume = false;
    std::size_t jobs = 1;
};

struct SeedOutcome {
    std::uint64_t seed = 0;
    double accuracy = 0.0, miou = 0.0, final_loss = 0.0;
    bool nan_flag = false;
    std::size_t iters_run = 0;
};

SeedOutcome run_one_seed(const ExperimentConfig& config, const Dataset& data,
                         std::uint64_t seed, bool resume, std::size_t stop_after) {
    const fs::path seed_dir = fs::path(config.out_dir) / ("seed-" + std::to_string(seed));
    const fs::path ckpt_dir = seed_dir / "checkpoints";

    TrainSession session;
    if (resume) {
        session = load_train_session(ckpt_dir.string());
    } else {
        TrainConfig cfg = config.train_cfg;
        cfg.seed = seed;
        ModelConfig mc = config.model;
        session = make_train_session(mc, cfg);
    }
    const std::size_t target =
        stop_after > 0 ? std::min<std::size_t>(stop_after, session.cfg.iters_max)
                       : session.cfg.iters_max;
    train_steps(session, data, target);
    save_train_session(session, ckpt_dir.string());
    write_text_file((seed_dir / "metrics.csv").string(), session.trace.to_csv());

    SeedOutcome out;
    out.seed = seed;
    out.nan_flag = session.trace.nan_flag;
    out.iters_run = session.next_iter;
    out.final_loss = session.trace.loss.empty() ? 0.0 : session.trace.loss.back();
    if (!session.trace.nan_flag) {
        EvalResult ev = evaluate(session.model, data.val, session.cfg.seed);
        out.accuracy = ev.accuracy;
        out.miou = ev.miou;
    }
    return out;
}

int run_train(const TrainArgs& a) {
    ExperimentConfig config;
    if (!a.config_path.empty()) config = experiment_config_from_json(read_json_file(a.config_path));

    // Flags win over the config file.
    if (!a.data_dir.empty()) config.data_dir = a.data_dir;
    if (!a.out_dir.empty()) config.out_dir = a.out_dir;
    if (!a.seeds.empty()) config.seeds = parse_seed_list(a.seeds);
    if (!a.context.empty()) {
        if (a.context == "none")
            config.model.context = ContextKind::None;
        else if (a.context == "hamburger")
            config.model.context = ContextKind::Hamburger;
        else if (a.context == "attention")
            config.model.context = ContextKind::Attention;
        else
            throw usage_error("unknown context '" + a.context +
                              "'; expected one of {none, hamburger, attention}");
    }
    if (!a.grad_mode.empty()) config.model.ham.grad_mode = parse_grad_mode(a.grad_mode);
    if (!a.ham_model.empty())
        config.model.ham.model =
            MdModel(parse_md_kind(a.ham_model), config.model.ham.model.temperature,
                    config.model.ham.model.beta);
    if (a.iters >= 0) config.train_cfg.iters_max = static_cast<std::size_t>(a.iters);
    if (a.batch >= 0) config.train_cfg.batch = static_cast<std::size_t>(a.batch);
    if (a.eval_interval >= 0)
        config.train_cfg.eval_interval = static_cast<std::size_t>(a.eval_interval);
    if (a.lr0 >= 0.0) config.train_cfg.lr0 = a.lr0;
    if (config.out_dir.empty()) throw usage_error("train: --out (or out_dir in the config) is required");
    try {
        config.model.validate();
    } catch (const std::invalid_argument& e) {
        throw usage_error(e.what());
    }

    fs::create_directories(config.out_dir);
    write_text_file((fs::path(config.out_dir) / "config.snapshot").string(),
                    experiment_config_json(config).dump(2) + "\n");

    Dataset data;
    if (!config.data_dir.empty()) {
        data.spec = task_spec_from_json(read_json_file(config.data_dir + "/task.json"));
        data.train = load_split(config.data_dir, "train");
        data.val = load_split(config.data_dir, "val");
        data.test = load_split(config.data_dir, "test");
    } else {
        data = make_synthetic_task(config.task);
    }

    const std::size_t stop_after = a.stop_after > 0 ? static_cast<std::size_t>(a.stop_after) : 0;
    std::vector<SeedOutcome> outcomes(config.seeds.size());
    std::vector<std::string> errors(config.seeds.size());
    const std::size_t jobs = std::max<std::size_t>(1, std::min(a.jobs, thread_cap()));

    // --jobs parallelizes across independent seeds only; each worker owns
    // its model, session, and output directory.
    std::size_t next = 0;
    std::vector<std::thread> pool;
    std::mutex mu;
    auto worker = [&]() {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= config.seeds.size()) return;
                i = next++;
            }
            try {
                outcomes[i] = run_one_seed(config, data, config.seeds[i], a.resume, stop_after);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < errors.size(); ++i)
        if (!errors[i].empty())
            throw io_error("train: seed " + std::to_string(config.seeds[i]) + " failed: " + errors[i]);

    double mean_acc = 0.0, mean_miou = 0.0, best_acc = 0.0, best_miou = 0.0;
    bool any_nan = false;
    json per_seed = json::array();
    for (const SeedOutcome& o : outcomes) {
        mean_acc += o.accuracy / static_cast<double>(outcomes.size());
        mean_miou += o.miou / static_cast<double>(outcomes.size());
        best_acc = std::max(best_acc, o.accuracy);
        best_miou = std::max(best_miou, o.miou);
        any_nan = any_nan || o.nan_flag;
        per_seed.push_back(json{{"seed", o.seed},
                                {"accuracy", o.accuracy},
                                {"miou", o.miou},
                                // a NaN loss has no JSON representation; emit null
                                {"final_loss", std::isfinite(o.final_loss) ? json(o.final_loss) : json()},
                                {"nan_flag", o.nan_flag},
                                {"iters_run", o.iters_run}});
    }
    json report{{"command", "train"},
                {"context", context_kind_name(config.model.context)},
                {"grad_mode", grad_mode_name(config.model.ham.grad_mode)},
                {"seeds", config.seeds},
                {"per_seed", per_seed},
                {"best_accuracy", best_acc},
                {"mean_accuracy", mean_acc},
                {"best_miou", best_miou},
                {"mean_miou", mean_miou},
                {"any_nan", any_nan}};
    write_text_file((fs::path(config.out_dir) / "report.json").string(), report.dump(2) + "\n");

    char line[256];
    std::snprintf(line, sizeof(line),
                  "best(mean) acc %.4f(%.4f) miou %.4f(%.4f) over %zu seeds\n", best_acc,
                  mean_acc, best_miou, mean_miou, outcomes.size());
    std::cout << line;
    if (any_nan) std::cout << "warning: at least one run hit a non-finite loss\n";
    return 0;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

// Forward replay from a frozen init, used as the finite-difference oracle.
// The init is a constant of the block in every gradient mode, so the
// oracle must not re-derive it from the perturbed input.
Matrix replay_reconstruction(const Matrix& x, const MdModel& model, std::size_t k,
                             const Matrix& d0, const Matrix& c0) {
    Matrix d = d0, c = c0;
    for (std::size_t it = 0; it < k; ++it) {
        switch (model.kind) {
            case MdKind::VQ: {
                auto [cn, dn] = vq_step(d, x, model.temperature);
                c = std::move(cn);
                d = std::move(dn);
                break;
            }
            case MdKind::CD: {
                auto [cn, dn] = cd_step(d, x, model.temperature);
                c = std::move(cn);
                d = std::move(dn);
                break;
            }
            case MdKind::NMF: {
                auto [dn, cn] = nmf_mu_step(d, c, x);
                d = std::move(dn);
                c = std::move(cn);
                break;
            }
        }
    }
    if (model.kind == MdKind::CD) c = cd_codes_closed_form(d, x, model.beta);
    return matmul(d, c);
}

struct GradCheckArgs {
    std::string ham = "nmf", mode = "bptt", sizes = "6x8x2", probe, out_path;
    std::size_t k = 0;  // 0 = mode default
    std::uint64_t seed = 0;
    double temperature = 0.05;
};

int run_grad_check(const GradCheckArgs& a) {
    const GradMode mode = parse_grad_mode(a.mode);

    if (!a.probe.empty()) {
        // Designed iterative maps exercising the implicit-gradient contract.
        if (mode != GradMode::Implicit)
            throw usage_error("--probe is only meaningful with --mode implicit");
        RngState rng(a.seed);
        Matrix x = random_normal(4, 1, rng);
        Matrix h0 = random_normal(4, 1, rng);
        Matrix grad_y = random_normal(4, 1, rng);
        IterativeMap map;
        if (a.probe == "contractive") {
            map = affine_probe(scale(Matrix::identity(4), 0.5), Matrix::identity(4));
        } else if (a.probe == "expanding") {
            map = affine_probe(scale(Matrix::identity(4), 1.6), Matrix::identity(4));
        } else {
            throw usage_error("unknown probe '" + a.probe +
                              "'; expected one of {contractive, expanding}");
        }
        // A non-contractive map makes the adjoint iteration diverge; the
        // numeric_error carries the diagnostic and maps to exit code 2.
        Matrix g_imp = probe_implicit_grad_x(map, x, h0, grad_y);
        Matrix g_bptt = probe_bptt_grad_x(map, x, h0, 200, grad_y);
        const double delta = frobenius_norm(sub(g_imp, g_bptt)) /
                             std::max(frobenius_norm(g_bptt), 1e-300);
        json j{{"command", "grad-check"},
               {"mode", a.mode},
               {"probe", a.probe},
               {"lip_h", map.lip_h},
               {"delta_vs_bptt_200", delta},
               {"grad_norm", frobenius_norm(g_imp)}};
        write_output(a.out_path, j.dump(2) + "\n");
        if (delta >= 1e-5)
            throw numeric_error("grad-check: implicit gradient disagrees with the long unroll");
        return 0;
    }

    const MdKind kind = parse_md_kind(a.ham);
    const std::vector<std::size_t> dims = parse_x_separated(a.sizes, 3, "--sizes");
    const std::size_t d = dims[0], n = dims[1], r = dims[2];
    const std::size_t k = a.k > 0 ? a.k : (mode == GradMode::Implicit ? 400 : 3);
    MdModel model(kind, a.temperature);

    RngState data_rng(a.seed);
    Matrix x = kind == MdKind::NMF ? random_uniform(d, n, data_rng, 0.05, 1.0)
                                   : random_normal(d, n, data_rng);

    // Capture the frozen init by replaying the same derived stream.
    InitStrategy init_probe = InitStrategy::random();
    RngState init_rng(a.seed + 1);
    RngState init_rng_copy = init_rng;
    auto [d0, c0] = init_factorization(x, model, init_probe, r, init_rng_copy);

    InitStrategy strategy = InitStrategy::random();
    SolverTape tape;
    Factorization f = solve_with_tape(x, model, k, strategy, r, init_rng, mode, tape);
    const Matrix grad_y = f.reconstruction;  // d/dX̄ of 0.5 ||X̄||²

    GradReport rep;
    double delta_vs_bptt = -1.0;
    switch (mode) {
        case GradMode::BPTT:
            rep = backward_bptt(tape, f, grad_y);
            break;
        case GradMode::OneStep: {
            rep = backward_one_step(tape, f, grad_y);
            InitStrategy s2 = InitStrategy::random();
            RngState rng2(a.seed + 1);
            SolverTape full_tape;
            Factorization f2 = solve_with_tape(x, model, k, s2, r, rng2, GradMode::BPTT, full_tape);
            GradReport bptt = backward_bptt(full_tape, f2, f2.reconstruction);
            delta_vs_bptt = frobenius_norm(sub(rep.grads.at("x"), bptt.grads.at("x")));
            break;
        }
        case GradMode::Implicit:
            rep = backward_implicit(tape, f, grad_y);
            break;
    }
    rep.check_finite_all();

    // Finite-difference oracle against the frozen-init replay. The
    // one-step and implicit estimates are approximations, so the oracle
    // comparison is reported but only gates the exact (BPTT) mode.
    auto loss = [&](const Matrix& xp) {
        Matrix rec = replay_reconstruction(xp, model, k, d0, c0);
        return 0.5 * dot_flat(rec, rec);
    };
    Matrix fd = finite_difference_grad(loss, x, 1e-5);
    rep.oracle_max_rel_error = gradient_rel_error(rep.grads.at("x"), fd);
    rep.oracle_cosine = gradient_cosine(rep.grads.at("x"), fd);

    json j = json::parse(grad_report_json(rep));
    j["command"] = "grad-check";
    j["ham"] = a.ham;
    j["sizes"] = a.sizes;
    j["k"] = k;
    if (delta_vs_bptt >= 0.0) j["delta_vs_bptt"] = delta_vs_bptt;
    write_output(a.out_path, j.dump(2) + "\n");

    if (mode == GradMode::BPTT && rep.oracle_max_rel_error >= 1e-4)
        throw numeric_error("grad-check: BPTT gradient misses the finite-difference oracle (" +
                            std::to_string(rep.oracle_max_rel_error) + ")");
    if (mode == GradMode::OneStep && k == 1 && delta_vs_bptt >= 1e-12)
        throw numeric_error("grad-check: one-step gradient must equal BPTT at K=1");
    return 0;
}

// ---------------------------------------------------------------------------
// probe-props
// ---------------------------------------------------------------------------

struct ProbePropsArgs {
    int prop = 1;
    std::size_t t_max = 0;  // 0 = prop default
    std::uint64_t seed = 0;
    std::string out_path;
};

int run_probe_props(const ProbePropsArgs& a) {
    RngState rng(a.seed);
    Matrix x = random_normal(4, 1, rng);
    Matrix h0 = random_normal(4, 1, rng);
    IterativeMap map = affine_probe(scale(Matrix::identity(4), 0.5), Matrix::identity(4));

    if (a.prop == 1) {
        const std::size_t t_max = a.t_max ? a.t_max : 40;
        ContractionProbe probe = probe_contraction(map, x, h0, t_max);
        const double expected = std::log(map.lip_h);
        json j{{"command", "probe-props"},
               {"prop", 1},
               {"lip_h", probe.lip_h},
               {"convergence_slope", probe.convergence_slope},
               {"expected_slope", expected},
               {"slope_error", std::abs(probe.convergence_slope - expected)}};
        write_output(a.out_path, j.dump(2) + "\n");
        if (std::abs(probe.convergence_slope - expected) >= 0.05)
            throw numeric_error("probe-props: convergence slope misses ln(L_h)");
        return 0;
    }
    if (a.prop == 2) {
        Matrix grad_y = random_normal(4, 1, rng);
        double worst = 0.0;
        json details = json::array();
        IterativeMap tanh_map = tanh_probe(0.6, 0.8);
        for (const IterativeMap* m : {&map, &tanh_map}) {
            Matrix g_imp = probe_implicit_grad_x(*m, x, h0, grad_y);
            Matrix g_bptt = probe_bptt_grad_x(*m, x, h0, 200, grad_y);
            const double delta = frobenius_norm(sub(g_imp, g_bptt)) /
                                 std::max(frobenius_norm(g_bptt), 1e-300);
            worst = std::max(worst, delta);
            details.push_back(json{{"map", m->name}, {"delta_vs_bptt_200", delta}});
        }
        json j{{"command", "probe-props"}, {"prop", 2}, {"maps", details}, {"max_delta", worst}};
        write_output(a.out_path, j.dump(2) + "\n");
        if (worst >= 1e-5)
            throw numeric_error("probe-props: implicit gradient disagrees with the long unroll");
        return 0;
    }
    if (a.prop == 3) {
        const std::size_t t_max = a.t_max ? a.t_max : 100;
        ContractionProbe probe = probe_contraction(map, x, h0, t_max);
        json j{{"command", "probe-props"},
               {"prop", 3},
               {"lip_h", probe.lip_h},
               {"lip_x", probe.lip_x},
               {"lip_g", probe.lip_g},
               {"t_max", t_max},
               {"grad_h0_norms", probe.grad_h0_norms},
               {"grad_x_norm", probe.grad_x_norm},
               {"bound_limit", probe.lip_g * probe.lip_x / (1.0 - probe.lip_h)},
               {"bound_holds", probe.prop3_bound_holds}};
        write_output(a.out_path, j.dump(2) + "\n");
        if (!probe.prop3_bound_holds)
            throw numeric_error("probe-props: gradient-norm bound violated");
        return 0;
    }
    throw usage_error("--prop must be 1, 2, or 3");
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

struct SpectrumArgs {
    std::string checkpoint, data_dir, split = "val", out_path;
    std::size_t sample = 0;
};

int run_spectrum(const SpectrumArgs& a) {
    TrainSession session = load_train_session(a.checkpoint);
    if (session.model_config.context != ContextKind::Hamburger)
        throw usage_error("spectrum: checkpoint has no matrix-decomposition context block");
    std::vector<Sample> split = load_split(a.data_dir, a.split);
    if (a.sample >= split.size())
        throw usage_error("spectrum: sample index " + std::to_string(a.sample) +
                          " out of range (split has " + std::to_string(split.size()) + ")");

    session.model.ham.bn.mode = BnMode::Eval;
    RngState solver_rng =
        RngState(session.cfg.seed).derive("spectrum-sample-" + std::to_string(a.sample));
    ForwardCache cache;
    model_forward(session.model, split[a.sample].x, solver_rng, &cache);

    // Compare the solver's input with its low-rank reconstruction: the
    // accumulative ratio saturates exactly at the factorization rank.
    SpectrumReport rep = spectrum_report(cache.ham.x, cache.ham.x_bar);
    write_output(a.out_path, rep.to_csv());
    return 0;
}

// ---------------------------------------------------------------------------
// cost / bench
// ---------------------------------------------------------------------------

struct CostArgs {
    std::string block = "sa", shape = "512x128x128", out_path;
    std::size_t r = 64, k = 6, d = 0;  // d = 0 -> match channel count
};

HamburgerConfig ham_config_for_block(const std::string& block, std::size_t c, std::size_t d,
                                     std::size_t r, std::size_t k, std::string& canonical) {
    HamburgerConfig config;
    config.d_z = c;
    config.d = d ? d : c;
    config.r = r;
    config.k = k;
    if (block == "ham-nmf")
        config.model = MdModel(MdKind::NMF);
    else if (block == "ham-vq")
        config.model = MdModel(MdKind::VQ);
    else if (block == "ham-cd")
        config.model = MdModel(MdKind::CD);
    else
        throw usage_error("unknown block '" + block +
                          "'; expected one of {sa, ham-vq, ham-cd, ham-nmf}");
    canonical = "hamburger";
    return config;
}

int run_cost(const CostArgs& a) {
    const std::vector<std::size_t> dims = parse_x_separated(a.shape, 3, "--shape");
    const std::size_t c = dims[0], h = dims[1], w = dims[2];
    CostReport rep;
    if (a.block == "sa") {
        rep = cost_report("self_attention", c, h, w);
    } else {
        std::string canonical;
        HamburgerConfig config = ham_config_for_block(a.block, c, a.d, a.r, a.k, canonical);
        rep = cost_report(canonical, c, h, w, config);
    }
    json j = rep.to_json();
    j["command"] = "cost";
    j["block"] = a.block;
    j["shape"] = a.shape;
    write_output(a.out_path, j.dump(2) + "\n");
    return 0;
}

struct BenchArgs {
    std::string block = "hamburger", ham_model = "nmf", out_path;
    std::size_t c = 32, n = 2048, repeats = 20, d = 0, r = 8, k = 6;
    std::uint64_t seed = 0;
};

int run_bench(const BenchArgs& a) {
    BenchResult res;
    if (a.block == "sa" || a.block == "self_attention") {
        res = bench_forward("self_attention", a.c, a.n, a.repeats, HamburgerConfig{}, a.seed);
    } else if (a.block == "hamburger" || a.block.rfind("ham-", 0) == 0) {
        HamburgerConfig config;
        config.d_z = a.c;
        config.d = a.d ? a.d : a.c;
        config.r = a.r;
        config.k = a.k;
        config.model = MdModel(parse_md_kind(a.ham_model));
        res = bench_forward("hamburger", a.c, a.n, a.repeats, config, a.seed);
    } else {
        throw usage_error("unknown block '" + a.block + "'; expected one of {sa, hamburger}");
    }
    json j = res.to_json();
    j["command"] = "bench";
    j["c"] = a.c;
    j["repeats"] = a.repeats;
    write_output(a.out_path, j.dump(2) + "\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hamkit: matrix-decomposition context blocks — data, training, and analysis"};
    app.require_subcommand(1);

    GenDataArgs gd;
    CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic segmentation dataset");
    gen->add_option("--config", gd.config_path, "Task spec JSON (or experiment config with a 'task' key)");
    gen->add_option("--out", gd.out_dir, "Output directory")->required();
    gen->add_flag("--force", gd.force, "Overwrite a non-empty output directory");
    gen->add_option("--height", gd.height);
    gen->add_option("--width", gd.width);
    gen->add_option("--c-in", gd.c_in);
    gen->add_option("--classes", gd.classes);
    gen->add_option("--r-true", gd.r_true);
    gen->add_option("--library", gd.library, "Texture library size");
    gen->add_option("--train-count", gd.train_count);
    gen->add_option("--val-count", gd.val_count);
    gen->add_option("--test-count", gd.test_count);
    gen->add_option("--seed", gd.seed);
    gen->add_option("--noise-sigma", gd.noise_sigma);

    TrainArgs ta;
    CLI::App* tr = app.add_subcommand("train", "Train the per-pixel model over declared seeds");
    tr->add_option("--config", ta.config_path, "Experiment config JSON");
    tr->add_option("--data", ta.data_dir, "Dataset directory from gen-data (default: generate in-memory)");
    tr->add_option("--out", ta.out_dir, "Output directory");
    tr->add_option("--seeds", ta.seeds, "Comma-separated seed list, e.g. 1,2,3,4,5");
    tr->add_option("--context", ta.context, "none | hamburger | attention");
    tr->add_option("--grad-mode", ta.grad_mode, "bptt | one-step | implicit");
    tr->add_option("--ham-model", ta.ham_model, "vq | cd | nmf");
    tr->add_option("--iters", ta.iters, "Training iteration budget");
    tr->add_option("--batch", ta.batch);
    tr->add_option("--eval-interval", ta.eval_interval);
    tr->add_option("--lr0", ta.lr0);
    tr->add_option("--stop-after", ta.stop_after, "Stop (checkpointing) after N iterations");
    tr->add_flag("--resume", ta.resume, "Resume each seed from its saved session");
    tr->add_option("--jobs", ta.jobs, "Parallel workers across seeds (capped by HAMKIT_THREADS)");

    GradCheckArgs ga;
    CLI::App* gc = app.add_subcommand("grad-check", "Check a solver gradient against oracles");
    gc->add_option("--ham", ga.ham, "vq | cd | nmf");
    gc->add_option("--mode", ga.mode, "bptt | one-step | implicit");
    gc->add_option("--sizes", ga.sizes, "dxnxr, e.g. 6x8x2");
    gc->add_option("--k", ga.k, "Solver steps (default 3; 400 for implicit)");
    gc->add_option("--seed", ga.seed);
    gc->add_option("--temperature", ga.temperature);
    gc->add_option("--probe", ga.probe, "contractive | expanding (implicit mode only)");
    gc->add_option("--out", ga.out_path, "Write the JSON report here instead of stdout");

    ProbePropsArgs pa;
    CLI::App* pp = app.add_subcommand("probe-props", "Evaluate the contraction propositions");
    pp->add_option("--prop", pa.prop, "1 (convergence), 2 (implicit), or 3 (gradient bound)")->required();
    pp->add_option("--t-max", pa.t_max);
    pp->add_option("--seed", pa.seed);
    pp->add_option("--out", pa.out_path);

    SpectrumArgs sa;
    CLI::App* sp = app.add_subcommand("spectrum", "Spectrum report for a trained checkpoint");
    sp->add_option("--checkpoint", sa.checkpoint, "Seed checkpoint directory (train output)")->required();
    sp->add_option("--data", sa.data_dir, "Dataset directory")->required();
    sp->add_option("--split", sa.split, "train | val | test");
    sp->add_option("--sample", sa.sample, "Sample index within the split");
    sp->add_option("--out", sa.out_path, "Write the CSV here instead of stdout");

    CostArgs ca;
    CLI::App* co = app.add_subcommand("cost", "Analytic MAC/parameter report");
    co->add_option("--block", ca.block, "sa | ham-vq | ham-cd | ham-nmf")->required();
    co->add_option("--shape", ca.shape, "CxHxW, e.g. 512x128x128")->required();
    co->add_option("--r", ca.r, "Factorization rank");
    co->add_option("--K", ca.k, "Solver steps");
    co->add_option("--d", ca.d, "Inner width (default: channel count)");
    co->add_option("--out", ca.out_path);

    BenchArgs ba;
    CLI::App* be = app.add_subcommand("bench", "Forward-pass wall-clock micro-benchmark");
    be->add_option("--block", ba.block, "sa | hamburger")->required();
    be->add_option("--c", ba.c, "Channels");
    be->add_option("--n", ba.n, "Token count")->required();
    be->add_option("--repeats", ba.repeats);
    be->add_option("--d", ba.d);
    be->add_option("--r", ba.r);
    be->add_option("--K", ba.k);
    be->add_option("--ham-model", ba.ham_model);
    be->add_option("--seed", ba.seed);
    be->add_option("--out", ba.out_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        thread_cap();  // surface a malformed HAMKIT_THREADS early
        if (gen->parsed()) return run_gen_data(gd);
        if (tr->parsed()) return run_train(ta);
        if (gc->parsed()) return run_grad_check(ga);
        if (pp->parsed()) return run_probe_props(pa);
        if (sp->parsed()) return run_spectrum(sa);
        if (co->parsed()) return run_cost(ca);
        if (be->parsed()) return run_bench(ba);
        return 1;
    } catch (const usage_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 2;
    } catch (const io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::domain_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
