#ifndef HAMKIT_ANALYZER_HPP
#define HAMKIT_ANALYZER_HPP

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "burger.hpp"
#include "io.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace hamkit {

// ---------------------------------------------------------------------------
// Spectrum concentration: accumulative ratio of the squared largest r
// singular values over the total squared singular values, before and
// after a context block.
// ---------------------------------------------------------------------------

inline std::vector<double> accumulative_ratio(const std::vector<double>& sigma) {
    std::vector<double> ratio(sigma.size());
    double total = 0.0;
    for (double s : sigma) total += s * s;
    double acc = 0.0;
    for (std::size_t i = 0; i < sigma.size(); ++i) {
        acc += sigma[i] * sigma[i];
        ratio[i] = total > 0.0 ? acc / total : 1.0;
    }
    return ratio;
}

struct SpectrumReport {
    std::vector<double> sigma_before, sigma_after;
    std::vector<double> ratio_before, ratio_after;  // entry i = ratio at rank i+1

    std::string to_csv() const {
        std::string s = "index,sigma_before,sigma_after,ratio_before,ratio_after\n";
        const std::size_t n = std::max(sigma_before.size(), sigma_after.size());
        for (std::size_t i = 0; i < n; ++i) {
            s += std::to_string(i + 1) + ",";
            s += i < sigma_before.size() ? format_double(sigma_before[i]) : std::string("");
            s += ",";
            s += i < sigma_after.size() ? format_double(sigma_after[i]) : std::string("");
            s += ",";
            s += i < ratio_before.size() ? format_double(ratio_before[i]) : std::string("");
            s += ",";
            s += i < ratio_after.size() ? format_double(ratio_after[i]) : std::string("");
            s += "\n";
        }
        return s;
    }
};

inline SpectrumReport spectrum_report(const Matrix& before, const Matrix& after) {
    if (!before.same_shape(after))
        throw shape_error("spectrum_report: matrices must share a shape");
    SpectrumReport rep;
    rep.sigma_before = singular_values(before);
    rep.sigma_after = singular_values(after);
    rep.ratio_before = accumulative_ratio(rep.sigma_before);
    rep.ratio_after = accumulative_ratio(rep.sigma_after);
    return rep;
}

// ---------------------------------------------------------------------------
// Analytic cost model. Counting convention: one multiply-accumulate per
// scalar multiply in a matmul chain; softmax, normalization, and other
// elementwise work are excluded (dominant-term convention). `params`
// follows the same convention (weights only); `params_with_bn` adds the
// BN affine terms and equals the constructed block's parameter count.
// ---------------------------------------------------------------------------

struct CostReport {
    std::string module;
    double params = 0.0;
    double params_with_bn = 0.0;
    double macs = 0.0;
    std::vector<std::pair<std::string, double>> breakdown;  // MAC terms

    double breakdown_entry(const std::string& name) const {
        for (const auto& [k, v] : breakdown)
            if (k == name) return v;
        throw std::invalid_argument("CostReport: no breakdown entry named " + name);
    }

    nlohmann::json to_json() const {
        nlohmann::json b = nlohmann::json::object();
        for (const auto& [k, v] : breakdown) b[k] = v;
        return nlohmann::json{{"module", module},
                              {"params", params},
                              {"params_with_bn", params_with_bn},
                              {"macs", macs},
                              {"breakdown", b}};
    }
};

// Feature tensor (c, h, w) is unfolded to a c x n matrix, n = h*w.
inline CostReport cost_report(const std::string& block, std::size_t c, std::size_t h,
                              std::size_t w, const HamburgerConfig& config = HamburgerConfig{}) {
    const double n = static_cast<double>(h) * static_cast<double>(w);
    const double dc = static_cast<double>(c);
    CostReport rep;
    if (block == "self_attention") {
        rep.module = block;
        rep.params = 4.0 * dc * dc;
        rep.params_with_bn = rep.params;
        rep.breakdown = {
            {"qkv_o_projections", 4.0 * n * dc * dc},  // four d x d maps over n tokens
            {"scores", n * n * dc},                     // Q'K
            {"weighted_sum", n * n * dc},               // V P
        };
    } else if (block == "hamburger") {
        const double d = static_cast<double>(config.d);
        const double r = static_cast<double>(config.r);
        const double k = static_cast<double>(config.k);
        rep.module = block;
        rep.params = 2.0 * dc * d;
        rep.params_with_bn = rep.params + 2.0 * dc;
        rep.breakdown = {
            {"bread_lower", n * dc * d},
            {"bread_upper", n * dc * d},
            {"iter_ndr", k * 2.0 * n * d * r},   // D'X and XC' class of products
            {"iter_nr2", k * 2.0 * n * r * r},   // code-side Gram products
            {"iter_dr2", k * 2.0 * d * r * r},   // dictionary-side Gram products
            {"readout_dc", n * d * r},           // final D C
        };
        if (config.model.kind == MdKind::CD)
            rep.breakdown.push_back({"cd_readout", n * d * r + n * r * r + r * r * r});
    } else {
        throw std::invalid_argument("cost_report: unknown block '" + block + "'");
    }
    for (const auto& [name, v] : rep.breakdown) rep.macs += v;
    return rep;
}

// ---------------------------------------------------------------------------
// Wall-clock micro-benchmark (this machine's numbers; never a replication
// target). Deterministic workload, warm-up runs excluded.
// ---------------------------------------------------------------------------

struct BenchResult {
    std::string module;
    std::size_t n = 0;
    std::vector<double> samples_ms;
    double median_ms = 0.0;
    double iqr_ms = 0.0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"module", module},
                              {"n", n},
                              {"samples_ms", samples_ms},
                              {"median_ms", median_ms},
                              {"iqr_ms", iqr_ms}};
    }
};

namespace detail {

inline double percentile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace detail

inline BenchResult bench_forward(const std::string& block, std::size_t c, std::size_t n,
                                 std::size_t repeats, HamburgerConfig config = HamburgerConfig{},
                                 std::uint64_t seed = 0) {
    if (repeats < 5) throw std::invalid_argument("bench_forward: repeats must be >= 5");
    RngState rng(seed);
    Matrix z = random_normal(c, n, rng);

    BenchResult res;
    res.module = block;
    res.n = n;

    if (block == "hamburger") {
        config.d_z = c;
        config.validate();
        HamburgerParams params = make_hamburger_params(config, rng);
        params.bn.mode = BnMode::Train;
        auto once = [&](std::uint64_t run) {
            RngState solver(seed ^ (0x9e3779b97f4a7c15ull + run));
            HamburgerParams p = params;  // BN stats untouched across runs
            return hamburger_forward(z, p, config, solver);
        };
        for (int warm = 0; warm < 2; ++warm) once(1000 + static_cast<std::uint64_t>(warm));
        for (std::size_t i = 0; i < repeats; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            Matrix y = once(i);
            const auto t1 = std::chrono::steady_clock::now();
            if (!std::isfinite(y.data[0])) throw numeric_error("bench_forward: bad output");
            res.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
    } else if (block == "self_attention") {
        AttentionParams params = make_attention_params(c, rng);
        for (int warm = 0; warm < 2; ++warm) attention_forward(z, params);
        for (std::size_t i = 0; i < repeats; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            Matrix y = attention_forward(z, params);
            const auto t1 = std::chrono::steady_clock::now();
            if (!std::isfinite(y.data[0])) throw numeric_error("bench_forward: bad output");
            res.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
    } else {
        throw std::invalid_argument("bench_forward: unknown block '" + block + "'");
    }

    std::vector<double> sorted = res.samples_ms;
    std::sort(sorted.begin(), sorted.end());
    res.median_ms = detail::percentile_sorted(sorted, 0.5);
    res.iqr_ms = detail::percentile_sorted(sorted, 0.75) - detail::percentile_sorted(sorted, 0.25);
    return res;
}

}  // namespace hamkit

#endif
