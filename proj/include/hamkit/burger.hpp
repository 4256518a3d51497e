#ifndef HAMKIT_BURGER_HPP
#define HAMKIT_BURGER_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "batchnorm.hpp"
#include "graddiff.hpp"
#include "io.hpp"
#include "matrix.hpp"
#include "mdsolve.hpp"
#include "rng.hpp"

namespace hamkit {

// Test hooks that swap the factorization branch for an identity or zero
// map, isolating the skip/bread/BN plumbing.
enum class HamOverride { None, Identity, Zero };

struct HamburgerConfig {
    std::size_t d_z = 64;
    std::size_t d = 64;
    std::size_t r = 8;
    std::size_t k = 6;
    MdModel model = MdModel(MdKind::NMF);
    GradMode grad_mode = GradMode::OneStep;
    InitStrategy init = InitStrategy::random();
    bool use_relu_pre_ham = true;
    bool include_lower_bread = true;
    bool include_upper_bread = true;
    bool use_bn = true;
    HamOverride ham_override = HamOverride::None;

    // The multiplicative-update factorization needs a nonnegative input,
    // so the pre-factorization ReLU is not optional there.
    void validate() {
        if (model.kind == MdKind::NMF) use_relu_pre_ham = true;
        if ((!include_lower_bread || !include_upper_bread) && d != d_z)
            throw shape_error("HamburgerConfig: disabling a bread requires d == d_z");
        if (r < 1 || k < 1 || d < 1 || d_z < 1)
            throw std::invalid_argument("HamburgerConfig: dimensions must be >= 1");
    }
};

struct HamburgerParams {
    Matrix w_l;          // d x d_z, lower bread
    Matrix w_u;          // d_z x d, upper bread
    BatchNormState bn;   // over d_z channels

    std::size_t parameter_count() const {
        return w_l.size() + w_u.size() + 2 * bn.channels();
    }
};

// Bias-free 1x1 linear breads, Uniform(-s, s) with s = 1/sqrt(fan_in).
inline HamburgerParams make_hamburger_params(const HamburgerConfig& config, RngState& rng) {
    HamburgerParams p;
    const double sl = 1.0 / std::sqrt(static_cast<double>(config.d_z));
    const double su = 1.0 / std::sqrt(static_cast<double>(config.d));
    p.w_l = random_uniform(config.d, config.d_z, rng, -sl, sl);
    p.w_u = random_uniform(config.d_z, config.d, rng, -su, su);
    p.bn = BatchNormState(config.d_z);
    return p;
}

struct HamburgerCache {
    Matrix z;
    Matrix x_in;   // bread output, pre-activation
    Matrix x;      // factorization input (post-ReLU when enabled)
    SolverTape tape;
    Factorization fact;
    Matrix x_bar;  // low-rank branch output
    Matrix h_pre;  // upper-bread output, pre-BN
    BatchNormCache bn_cache;
    bool used_relu = false;
    bool used_bn = false;
    HamOverride override_used = HamOverride::None;
    GradMode grad_mode = GradMode::BPTT;
    MdKind ham_kind = MdKind::NMF;
};

// Y = Z + BN(W_u M(W_l Z)); the factorization initialization is drawn
// from `rng` on every call (fresh draws during training act as the inner
// augmentation; evaluation pins the seed at the call site).
inline Matrix hamburger_forward(const Matrix& z, HamburgerParams& params,
                                HamburgerConfig& config, RngState& rng,
                                HamburgerCache* cache = nullptr) {
    config.validate();
    if (z.rows != config.d_z)
        throw shape_error("hamburger_forward: z has " + std::to_string(z.rows) +
                          " rows, config expects d_z = " + std::to_string(config.d_z));

    Matrix x_in = config.include_lower_bread ? matmul(params.w_l, z) : z;
    Matrix x = config.use_relu_pre_ham ? relu(x_in) : x_in;

    HamburgerCache local;
    HamburgerCache& c = cache ? *cache : local;
    c.z = z;
    c.x_in = x_in;
    c.x = x;
    c.used_relu = config.use_relu_pre_ham;
    c.used_bn = config.use_bn;
    c.override_used = config.ham_override;
    c.grad_mode = config.grad_mode;
    c.ham_kind = config.model.kind;

    switch (config.ham_override) {
        case HamOverride::None:
            c.fact = solve_with_tape(x, config.model, config.k, config.init, config.r, rng,
                                     config.grad_mode, c.tape);
            c.x_bar = c.fact.reconstruction;
            break;
        case HamOverride::Identity:
            c.x_bar = x;
            break;
        case HamOverride::Zero:
            c.x_bar = Matrix(x.rows, x.cols);
            break;
    }

    c.h_pre = config.include_upper_bread ? matmul(params.w_u, c.x_bar) : c.x_bar;
    Matrix branch = config.use_bn ? batchnorm_forward(c.h_pre, params.bn, &c.bn_cache)
                                  : c.h_pre;
    Matrix y = add(z, branch);
    check_finite(y, "hamburger_forward");
    return y;
}

struct HamburgerGrads {
    Matrix grad_z;
    Matrix grad_w_l;
    Matrix grad_w_u;
    std::vector<double> grad_gamma;
    std::vector<double> grad_beta;
};

inline HamburgerGrads hamburger_backward(const Matrix& grad_y, const HamburgerCache& cache,
                                         const HamburgerConfig& config,
                                         const HamburgerParams& params) {
    if (cache.grad_mode != config.grad_mode || cache.ham_kind != config.model.kind)
        throw std::logic_error("hamburger_backward: cache was recorded under a different config");
    if (!grad_y.same_shape(cache.z))
        throw shape_error("hamburger_backward: grad shape disagrees with cache");

    HamburgerGrads g;
    g.grad_z = grad_y;  // skip path, exact

    // Through BN.
    Matrix g_hpre;
    if (cache.used_bn) {
        BatchNormGrads bg = batchnorm_backward(grad_y, cache.bn_cache);
        g_hpre = std::move(bg.grad_in);
        g.grad_gamma = std::move(bg.grad_gamma);
        g.grad_beta = std::move(bg.grad_beta);
    } else {
        g_hpre = grad_y;
        g.grad_gamma.assign(params.bn.channels(), 0.0);
        g.grad_beta.assign(params.bn.channels(), 0.0);
    }

    // Through the upper bread.
    Matrix g_xbar;
    if (config.include_upper_bread) {
        g.grad_w_u = matmul(g_hpre, transpose(cache.x_bar));
        g_xbar = matmul(transpose(params.w_u), g_hpre);
    } else {
        g.grad_w_u = Matrix(params.w_u.rows, params.w_u.cols);
        g_xbar = g_hpre;
    }

    // Through the factorization, per gradient mode.
    Matrix g_x;
    switch (cache.override_used) {
        case HamOverride::Identity:
            g_x = g_xbar;
            break;
        case HamOverride::Zero:
            g_x = Matrix(cache.x.rows, cache.x.cols);
            break;
        case HamOverride::None: {
            GradReport rep;
            switch (cache.grad_mode) {
                case GradMode::BPTT:
                    rep = backward_bptt(cache.tape, cache.fact, g_xbar);
                    break;
                case GradMode::OneStep:
                    rep = backward_one_step(cache.tape, cache.fact, g_xbar);
                    break;
                case GradMode::Implicit:
                    rep = backward_implicit(cache.tape, cache.fact, g_xbar);
                    break;
            }
            g_x = std::move(rep.grads.at("x"));
            break;
        }
    }

    // ReLU subgradient (0 at 0).
    if (cache.used_relu)
        for (std::size_t i = 0; i < g_x.size(); ++i)
            if (!(cache.x_in.data[i] > 0.0)) g_x.data[i] = 0.0;

    // Through the lower bread into Z.
    if (config.include_lower_bread) {
        g.grad_w_l = matmul(g_x, transpose(cache.z));
        g.grad_z = add(g.grad_z, matmul(transpose(params.w_l), g_x));
    } else {
        g.grad_w_l = Matrix(params.w_l.rows, params.w_l.cols);
        g.grad_z = add(g.grad_z, g_x);
    }
    check_finite(g.grad_z, "hamburger_backward");
    return g;
}

// ---------------------------------------------------------------------------
// Dot-product self-attention baseline. Tokens are columns of z (d x n);
// the context operator is softmax(Q'K / sqrt(d)) applied to V, projected
// by W_o and added to the skip path.
// ---------------------------------------------------------------------------

struct AttentionParams {
    Matrix w_q, w_k, w_v, w_o;  // all d x d

    std::size_t parameter_count() const {
        return w_q.size() + w_k.size() + w_v.size() + w_o.size();
    }
};

inline AttentionParams make_attention_params(std::size_t d, RngState& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    AttentionParams p;
    p.w_q = random_uniform(d, d, rng, -s, s);
    p.w_k = random_uniform(d, d, rng, -s, s);
    p.w_v = random_uniform(d, d, rng, -s, s);
    p.w_o = random_uniform(d, d, rng, -s, s);
    return p;
}

struct AttentionCache {
    Matrix z, q, k, v;
    Matrix p;  // n x n, column j = attention distribution of query token j
    Matrix o;  // context values V P
};

// Row-stochastic attention matrix: row i = weights token i places on the
// other tokens.
inline Matrix attention_rows(const AttentionCache& cache) { return transpose(cache.p); }

inline Matrix attention_forward(const Matrix& z, const AttentionParams& params,
                                AttentionCache* cache = nullptr) {
    const std::size_t d = params.w_q.rows;
    if (z.rows != d) throw shape_error("attention_forward: z row count disagrees with params");
    AttentionCache local;
    AttentionCache& c = cache ? *cache : local;
    c.z = z;
    c.q = matmul(params.w_q, z);
    c.k = matmul(params.w_k, z);
    c.v = matmul(params.w_v, z);
    // softmax over keys with temperature sqrt(d) implements the 1/sqrt(d)
    // scaled scores.
    c.p = column_softmax(matmul(transpose(c.k), c.q), std::sqrt(static_cast<double>(d)));
    c.o = matmul(c.v, c.p);
    Matrix y = add(z, matmul(params.w_o, c.o));
    check_finite(y, "attention_forward");
    return y;
}

struct AttentionGrads {
    Matrix grad_z, grad_w_q, grad_w_k, grad_w_v, grad_w_o;
};

inline AttentionGrads attention_backward(const Matrix& grad_y, const AttentionCache& cache,
                                         const AttentionParams& params) {
    if (!grad_y.same_shape(cache.z))
        throw shape_error("attention_backward: grad shape disagrees with cache");
    const double d = static_cast<double>(params.w_q.rows);
    AttentionGrads g;
    g.grad_z = grad_y;  // skip path

    g.grad_w_o = matmul(grad_y, transpose(cache.o));
    Matrix g_o = matmul(transpose(params.w_o), grad_y);

    Matrix g_v = matmul(g_o, transpose(cache.p));
    Matrix g_p = matmul(transpose(cache.v), g_o);
    Matrix g_s = softmax_columns_vjp(cache.p, g_p, std::sqrt(d));  // s = K'Q
    Matrix g_k = matmul(cache.q, transpose(g_s));
    Matrix g_q = matmul(cache.k, g_s);

    g.grad_w_q = matmul(g_q, transpose(cache.z));
    g.grad_w_k = matmul(g_k, transpose(cache.z));
    g.grad_w_v = matmul(g_v, transpose(cache.z));
    g.grad_z = add(g.grad_z, matmul(transpose(params.w_q), g_q));
    g.grad_z = add(g.grad_z, matmul(transpose(params.w_k), g_k));
    g.grad_z = add(g.grad_z, matmul(transpose(params.w_v), g_v));
    check_finite(g.grad_z, "attention_backward");
    return g;
}

// ---------------------------------------------------------------------------
// Checkpointing: a directory of named binary matrices plus a JSON manifest
// {config, parameter names, shapes, seed}.
// ---------------------------------------------------------------------------

namespace detail {

inline const char* md_kind_name(MdKind k) {
    switch (k) {
        case MdKind::VQ: return "vq";
        case MdKind::CD: return "cd";
        case MdKind::NMF: return "nmf";
    }
    return "?";
}

inline MdKind md_kind_from_name(const std::string& s) {
    if (s == "vq") return MdKind::VQ;
    if (s == "cd") return MdKind::CD;
    if (s == "nmf") return MdKind::NMF;
    throw io_error("unknown factorization kind: " + s);
}

inline GradMode grad_mode_from_name(const std::string& s) {
    if (s == "bptt") return GradMode::BPTT;
    if (s == "one-step") return GradMode::OneStep;
    if (s == "implicit") return GradMode::Implicit;
    throw io_error("unknown gradient mode: " + s);
}

inline Matrix vector_as_row(const std::vector<double>& v) {
    return Matrix(1, v.size(), v);
}

}  // namespace detail

inline nlohmann::json hamburger_config_json(const HamburgerConfig& c) {
    return nlohmann::json{{"d_z", c.d_z},
                          {"d", c.d},
                          {"r", c.r},
                          {"k", c.k},
                          {"model", detail::md_kind_name(c.model.kind)},
                          {"temperature", c.model.temperature},
                          {"beta", c.model.beta},
                          {"grad_mode", grad_mode_name(c.grad_mode)},
                          {"use_relu_pre_ham", c.use_relu_pre_ham},
                          {"include_lower_bread", c.include_lower_bread},
                          {"include_upper_bread", c.include_upper_bread},
                          {"use_bn", c.use_bn}};
}

inline HamburgerConfig hamburger_config_from_json(const nlohmann::json& j) {
    HamburgerConfig c;
    c.d_z = j.at("d_z").get<std::size_t>();
    c.d = j.at("d").get<std::size_t>();
    c.r = j.at("r").get<std::size_t>();
    c.k = j.at("k").get<std::size_t>();
    c.model = MdModel(detail::md_kind_from_name(j.at("model").get<std::string>()),
                      j.at("temperature").get<double>(), j.at("beta").get<double>());
    c.grad_mode = detail::grad_mode_from_name(j.at("grad_mode").get<std::string>());
    c.use_relu_pre_ham = j.at("use_relu_pre_ham").get<bool>();
    c.include_lower_bread = j.at("include_lower_bread").get<bool>();
    c.include_upper_bread = j.at("include_upper_bread").get<bool>();
    c.use_bn = j.at("use_bn").get<bool>();
    c.validate();
    return c;
}

inline void save_checkpoint(const std::string& dir, const HamburgerParams& params,
                            const HamburgerConfig& config, std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::vector<std::pair<std::string, Matrix>> mats = {
        {"w_l", params.w_l},
        {"w_u", params.w_u},
        {"bn_gamma", detail::vector_as_row(params.bn.gamma)},
        {"bn_beta", detail::vector_as_row(params.bn.beta)},
        {"bn_running_mean", detail::vector_as_row(params.bn.running_mean)},
        {"bn_running_var", detail::vector_as_row(params.bn.running_var)},
    };
    nlohmann::json names = nlohmann::json::array();
    nlohmann::json shapes = nlohmann::json::object();
    for (const auto& [name, m] : mats) {
        write_matrix_binary(m, (fs::path(dir) / (name + ".bin")).string());
        names.push_back(name);
        shapes[name] = {m.rows, m.cols};
    }
    nlohmann::json manifest{{"config", hamburger_config_json(config)},
                            {"parameters", names},
                            {"shapes", shapes},
                            {"seed", seed}};
    write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

inline HamburgerParams load_checkpoint(const std::string& dir, HamburgerConfig& config,
                                       std::uint64_t* seed = nullptr) {
    namespace fs = std::filesystem;
    nlohmann::json manifest =
        nlohmann::json::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
    config = hamburger_config_from_json(manifest.at("config"));
    if (seed) *seed = manifest.at("seed").get<std::uint64_t>();

    auto load = [&](const std::string& name) {
        Matrix m = read_matrix_binary((fs::path(dir) / (name + ".bin")).string());
        const auto& shape = manifest.at("shapes").at(name);
        if (m.rows != shape.at(0).get<std::size_t>() || m.cols != shape.at(1).get<std::size_t>())
            throw io_error("checkpoint shape mismatch for " + name);
        return m;
    };
    HamburgerParams p;
    p.w_l = load("w_l");
    p.w_u = load("w_u");
    p.bn = BatchNormState(config.d_z);
    p.bn.gamma = load("bn_gamma").data;
    p.bn.beta = load("bn_beta").data;
    p.bn.running_mean = load("bn_running_mean").data;
    p.bn.running_var = load("bn_running_var").data;
    return p;
}

}  // namespace hamkit

#endif
