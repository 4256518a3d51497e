#ifndef HAMKIT_TRAINER_HPP
#define HAMKIT_TRAINER_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "burger.hpp"
#include "io.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace hamkit {

// ---------------------------------------------------------------------------
// Synthetic low-rank segmentation task. An image is a grid of quadrant
// regions; each region shows one texture from a shared library, every
// texture is a rank-r_true mixture of global atoms, and pixels are the
// texture mean plus Gaussian noise. The label of a pixel is the class of
// its region's texture, so with overlapping noise a single pixel is
// ambiguous and only pooled (global) evidence resolves it.
// ---------------------------------------------------------------------------

struct SyntheticTaskSpec {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t c_in = 16;
    std::size_t classes = 4;
    std::size_t r_true = 4;
    double noise_sigma = 0.1;
    std::size_t texture_library = 8;
    std::size_t train_count = 512;
    std::size_t val_count = 128;
    std::size_t test_count = 128;
    std::uint64_t seed = 0;

    void validate() const {
        if (r_true > c_in)
            throw std::invalid_argument("SyntheticTaskSpec: r_true must be <= c_in");
        if (classes > texture_library)
            throw std::invalid_argument("SyntheticTaskSpec: classes must be <= texture library");
        if (classes < 1 || height < 2 || width < 2 || c_in < 1)
            throw std::invalid_argument("SyntheticTaskSpec: degenerate dimensions");
        if (noise_sigma < 0.0)
            throw std::invalid_argument("SyntheticTaskSpec: noise_sigma must be >= 0");
    }
};

struct Sample {
    Matrix x;                 // c_in x (H*W), pixels as columns
    std::vector<int> labels;  // per pixel, in [0, classes)
};

struct Dataset {
    SyntheticTaskSpec spec;
    std::vector<Sample> train, val, test;
};

namespace detail {

// Texture means: unit-normalized rank-r_true mixtures, scaled so the
// pairwise separation is comparable to the noise norm at the default
// sigma (per-pixel classification stays genuinely ambiguous).
inline constexpr double kTextureScale = 0.25;

inline std::vector<Matrix> make_texture_library(const SyntheticTaskSpec& spec, RngState& rng) {
    RngState atom_rng = rng.derive("atoms");
    Matrix atoms = random_normal(spec.c_in, spec.r_true, atom_rng);
    RngState mix_rng = rng.derive("mixtures");
    std::vector<Matrix> textures;
    textures.reserve(spec.texture_library);
    for (std::size_t t = 0; t < spec.texture_library; ++t) {
        Matrix w = random_normal(spec.r_true, 1, mix_rng);
        Matrix mean = l2_normalize_columns(matmul(atoms, w));
        textures.push_back(scale(mean, kTextureScale));
    }
    return textures;
}

inline std::vector<Sample> make_split(const SyntheticTaskSpec& spec,
                                      const std::vector<Matrix>& textures, std::size_t count,
                                      RngState split_rng) {
    std::vector<Sample> out;
    out.reserve(count);
    const std::size_t h = spec.height, w = spec.width, n = h * w;
    const std::size_t h_half = h / 2, w_half = w / 2;
    for (std::size_t s = 0; s < count; ++s) {
        Sample sample;
        sample.x = Matrix(spec.c_in, n);
        sample.labels.resize(n);
        std::size_t region_texture[4];
        for (std::size_t q = 0; q < 4; ++q)
            region_texture[q] =
                static_cast<std::size_t>(split_rng.uniform() * static_cast<double>(spec.texture_library)) %
                spec.texture_library;
        for (std::size_t row = 0; row < h; ++row) {
            for (std::size_t col = 0; col < w; ++col) {
                const std::size_t q = (row >= h_half ? 2u : 0u) + (col >= w_half ? 1u : 0u);
                const std::size_t tex = region_texture[q];
                const std::size_t j = row * w + col;
                sample.labels[j] = static_cast<int>(tex % spec.classes);
                const Matrix& mean = textures[tex];
                for (std::size_t i = 0; i < spec.c_in; ++i)
                    sample.x(i, j) = mean(i, 0) + spec.noise_sigma * split_rng.normal();
            }
        }
        out.push_back(std::move(sample));
    }
    return out;
}

}  // namespace detail

inline Dataset make_synthetic_task(const SyntheticTaskSpec& spec) {
    spec.validate();
    Dataset data;
    data.spec = spec;
    RngState rng(spec.seed);
    std::vector<Matrix> textures = detail::make_texture_library(spec, rng);
    data.train = detail::make_split(spec, textures, spec.train_count, rng.derive("train"));
    data.val = detail::make_split(spec, textures, spec.val_count, rng.derive("val"));
    data.test = detail::make_split(spec, textures, spec.test_count, rng.derive("test"));
    return data;
}

// Dataset on disk: <dir>/<split>_<idx>.bin per sample, <split>_labels.csv
// with one row per sample.
inline void save_dataset(const Dataset& data, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto dump_split = [&](const std::vector<Sample>& split, const std::string& name) {
        std::string labels_csv;
        for (std::size_t i = 0; i < split.size(); ++i) {
            write_matrix_binary(split[i].x,
                                (fs::path(dir) / (name + "_" + std::to_string(i) + ".bin")).string());
            for (std::size_t j = 0; j < split[i].labels.size(); ++j) {
                if (j) labels_csv += ',';
                labels_csv += std::to_string(split[i].labels[j]);
            }
            labels_csv += '\n';
        }
        write_text_file((fs::path(dir) / (name + "_labels.csv")).string(), labels_csv);
    };
    dump_split(data.train, "train");
    dump_split(data.val, "val");
    dump_split(data.test, "test");
}

inline std::vector<Sample> load_split(const std::string& dir, const std::string& name) {
    namespace fs = std::filesystem;
    Matrix labels = read_matrix_csv((fs::path(dir) / (name + "_labels.csv")).string());
    std::vector<Sample> out;
    out.reserve(labels.rows);
    for (std::size_t i = 0; i < labels.rows; ++i) {
        Sample s;
        s.x = read_matrix_binary((fs::path(dir) / (name + "_" + std::to_string(i) + ".bin")).string());
        s.labels.resize(labels.cols);
        for (std::size_t j = 0; j < labels.cols; ++j)
            s.labels[j] = static_cast<int>(labels(i, j));
        out.push_back(std::move(s));
    }
    return out;
}

inline nlohmann::json task_spec_json(const SyntheticTaskSpec& spec) {
    return nlohmann::json{{"height", spec.height},
                          {"width", spec.width},
                          {"c_in", spec.c_in},
                          {"classes", spec.classes},
                          {"r_true", spec.r_true},
                          {"noise_sigma", spec.noise_sigma},
                          {"texture_library", spec.texture_library},
                          {"train_count", spec.train_count},
                          {"val_count", spec.val_count},
                          {"test_count", spec.test_count},
                          {"seed", spec.seed}};
}

inline SyntheticTaskSpec task_spec_from_json(const nlohmann::json& j) {
    SyntheticTaskSpec spec;
    spec.height = j.value("height", spec.height);
    spec.width = j.value("width", spec.width);
    spec.c_in = j.value("c_in", spec.c_in);
    spec.classes = j.value("classes", spec.classes);
    spec.r_true = j.value("r_true", spec.r_true);
    spec.noise_sigma = j.value("noise_sigma", spec.noise_sigma);
    spec.texture_library = j.value("texture_library", spec.texture_library);
    spec.train_count = j.value("train_count", spec.train_count);
    spec.val_count = j.value("val_count", spec.val_count);
    spec.test_count = j.value("test_count", spec.test_count);
    spec.seed = j.value("seed", spec.seed);
    return spec;
}

// ---------------------------------------------------------------------------
// Model: per-pixel encoder -> ReLU -> optional context block -> per-pixel
// classifier. No convolution, so the context block is the only cross-pixel
// pathway.
// ---------------------------------------------------------------------------

enum class ContextKind { None, Hamburger, Attention };

inline const char* context_kind_name(ContextKind k) {
    switch (k) {
        case ContextKind::None: return "none";
        case ContextKind::Hamburger: return "hamburger";
        case ContextKind::Attention: return "attention";
    }
    return "?";
}

struct ModelConfig {
    std::size_t c_in = 16;
    std::size_t d_z = 16;
    std::size_t classes = 4;
    ContextKind context = ContextKind::Hamburger;
    HamburgerConfig ham;  // used when context == Hamburger

    void validate() {
        if (context == ContextKind::Hamburger) {
            ham.d_z = d_z;
            ham.validate();
        }
    }
};

struct PixelModel {
    ModelConfig config;
    Matrix w_enc, b_enc;  // d_z x c_in, d_z x 1
    Matrix w_cls, b_cls;  // classes x d_z, classes x 1
    HamburgerParams ham;
    AttentionParams attn;
};

inline PixelModel make_pixel_model(ModelConfig config, RngState& rng) {
    config.validate();
    PixelModel m;
    m.config = config;
    const double se = 1.0 / std::sqrt(static_cast<double>(config.c_in));
    const double sc = 1.0 / std::sqrt(static_cast<double>(config.d_z));
    m.w_enc = random_uniform(config.d_z, config.c_in, rng, -se, se);
    m.b_enc = Matrix(config.d_z, 1);
    m.w_cls = random_uniform(config.classes, config.d_z, rng, -sc, sc);
    m.b_cls = Matrix(config.classes, 1);
    if (config.context == ContextKind::Hamburger)
        m.ham = make_hamburger_params(config.ham, rng);
    else if (config.context == ContextKind::Attention)
        m.attn = make_attention_params(config.d_z, rng);
    return m;
}

struct ModelGrads {
    Matrix w_enc, b_enc, w_cls, b_cls;
    HamburgerGrads ham;
    AttentionGrads attn;
};

struct ForwardCache {
    Matrix z_pre, z;  // encoder pre-activation and post-ReLU features
    Matrix y;         // context output
    Matrix probs;     // classes x n
    HamburgerCache ham;
    AttentionCache attn;
};

// Per-sample forward. `solver_rng` seeds the factorization init (fresh
// draws during training; a pinned stream at evaluation).
inline Matrix model_forward(PixelModel& model, const Matrix& x, RngState& solver_rng,
                            ForwardCache* cache = nullptr) {
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.z_pre = matmul(model.w_enc, x);
    for (std::size_t i = 0; i < c.z_pre.rows; ++i)
        for (std::size_t j = 0; j < c.z_pre.cols; ++j) c.z_pre(i, j) += model.b_enc(i, 0);
    c.z = relu(c.z_pre);
    switch (model.config.context) {
        case ContextKind::None:
            c.y = c.z;
            break;
        case ContextKind::Hamburger:
            c.y = hamburger_forward(c.z, model.ham, model.config.ham, solver_rng, &c.ham);
            break;
        case ContextKind::Attention:
            c.y = attention_forward(c.z, model.attn, &c.attn);
            break;
    }
    Matrix logits = matmul(model.w_cls, c.y);
    for (std::size_t i = 0; i < logits.rows; ++i)
        for (std::size_t j = 0; j < logits.cols; ++j) logits(i, j) += model.b_cls(i, 0);
    c.probs = column_softmax(logits, 1.0);
    return logits;
}

// Mean per-pixel cross-entropy from cached probabilities.
inline double cross_entropy(const ForwardCache& cache, const std::vector<int>& labels) {
    const std::size_t n = labels.size();
    double loss = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        loss -= std::log(std::max(cache.probs(static_cast<std::size_t>(labels[j]), j), 1e-300));
    return loss / static_cast<double>(n);
}

// Backward for one sample; gradients are accumulated into `grads`
// (call with zero-initialized grads at the start of a batch).
inline void model_backward(const PixelModel& model, const Matrix& x,
                           const std::vector<int>& labels, const ForwardCache& cache,
                           ModelGrads& grads, double weight = 1.0) {
    const std::size_t n = labels.size();
    Matrix g_logits = cache.probs;
    for (std::size_t j = 0; j < n; ++j) g_logits(static_cast<std::size_t>(labels[j]), j) -= 1.0;
    g_logits = scale(g_logits, weight / static_cast<double>(n));

    grads.w_cls = add(grads.w_cls, matmul(g_logits, transpose(cache.y)));
    for (std::size_t i = 0; i < g_logits.rows; ++i)
        for (std::size_t j = 0; j < n; ++j) grads.b_cls(i, 0) += g_logits(i, j);
    Matrix g_y = matmul(transpose(model.w_cls), g_logits);

    Matrix g_z;
    switch (model.config.context) {
        case ContextKind::None:
            g_z = g_y;
            break;
        case ContextKind::Hamburger: {
            HamburgerGrads hg = hamburger_backward(g_y, cache.ham, model.config.ham, model.ham);
            g_z = std::move(hg.grad_z);
            grads.ham.grad_w_l = add(grads.ham.grad_w_l, hg.grad_w_l);
            grads.ham.grad_w_u = add(grads.ham.grad_w_u, hg.grad_w_u);
            for (std::size_t i = 0; i < hg.grad_gamma.size(); ++i) {
                grads.ham.grad_gamma[i] += hg.grad_gamma[i];
                grads.ham.grad_beta[i] += hg.grad_beta[i];
            }
            break;
        }
        case ContextKind::Attention: {
            AttentionGrads ag = attention_backward(g_y, cache.attn, model.attn);
            g_z = std::move(ag.grad_z);
            grads.attn.grad_w_q = add(grads.attn.grad_w_q, ag.grad_w_q);
            grads.attn.grad_w_k = add(grads.attn.grad_w_k, ag.grad_w_k);
            grads.attn.grad_w_v = add(grads.attn.grad_w_v, ag.grad_w_v);
            grads.attn.grad_w_o = add(grads.attn.grad_w_o, ag.grad_w_o);
            break;
        }
    }
    for (std::size_t i = 0; i < g_z.size(); ++i)
        if (!(cache.z_pre.data[i] > 0.0)) g_z.data[i] = 0.0;
    grads.w_enc = add(grads.w_enc, matmul(g_z, transpose(x)));
    for (std::size_t i = 0; i < g_z.rows; ++i)
        for (std::size_t j = 0; j < g_z.cols; ++j) grads.b_enc(i, 0) += g_z(i, j);
}

inline ModelGrads make_zero_grads(const PixelModel& m) {
    ModelGrads g;
    g.w_enc = Matrix(m.w_enc.rows, m.w_enc.cols);
    g.b_enc = Matrix(m.b_enc.rows, m.b_enc.cols);
    g.w_cls = Matrix(m.w_cls.rows, m.w_cls.cols);
    g.b_cls = Matrix(m.b_cls.rows, m.b_cls.cols);
    if (m.config.context == ContextKind::Hamburger) {
        g.ham.grad_w_l = Matrix(m.ham.w_l.rows, m.ham.w_l.cols);
        g.ham.grad_w_u = Matrix(m.ham.w_u.rows, m.ham.w_u.cols);
        g.ham.grad_gamma.assign(m.ham.bn.channels(), 0.0);
        g.ham.grad_beta.assign(m.ham.bn.channels(), 0.0);
    } else if (m.config.context == ContextKind::Attention) {
        const std::size_t d = m.attn.w_q.rows;
        g.attn.grad_w_q = Matrix(d, d);
        g.attn.grad_w_k = Matrix(d, d);
        g.attn.grad_w_v = Matrix(d, d);
        g.attn.grad_w_o = Matrix(d, d);
    }
    return g;
}

// ---------------------------------------------------------------------------
// SGD with momentum, weight decay, and the poly learning-rate schedule.
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr0 = 0.009;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double poly_power = 0.9;
    std::size_t batch = 8;
    std::size_t iters_max = 300;
    std::size_t eval_interval = 50;
    std::uint64_t seed = 0;
};

inline double poly_lr(const TrainConfig& cfg, std::size_t iter) {
    const double frac =
        1.0 - static_cast<double>(iter) / static_cast<double>(cfg.iters_max);
    return cfg.lr0 * std::pow(frac, cfg.poly_power);
}

// v <- momentum v + grad + wd param; param <- param - lr(iter) v.
inline void sgd_poly_step(Matrix& param, const Matrix& grad, Matrix& velocity,
                          std::size_t iter, const TrainConfig& cfg) {
    if (iter >= cfg.iters_max)
        throw std::invalid_argument("sgd_poly_step: iter must be < iters_max");
    if (velocity.size() == 0) velocity = Matrix(param.rows, param.cols);
    const double lr = poly_lr(cfg, iter);
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity.data[i] = cfg.momentum * velocity.data[i] + grad.data[i] +
                           cfg.weight_decay * param.data[i];
        param.data[i] -= lr * velocity.data[i];
    }
}

inline void sgd_poly_step(std::vector<double>& param, const std::vector<double>& grad,
                          std::vector<double>& velocity, std::size_t iter,
                          const TrainConfig& cfg) {
    if (iter >= cfg.iters_max)
        throw std::invalid_argument("sgd_poly_step: iter must be < iters_max");
    if (velocity.empty()) velocity.assign(param.size(), 0.0);
    const double lr = poly_lr(cfg, iter);
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] + grad[i] + cfg.weight_decay * param[i];
        param[i] -= lr * velocity[i];
    }
}

struct SgdState {
    std::map<std::string, Matrix> vel;
    std::map<std::string, std::vector<double>> vel_vec;
};

inline void apply_sgd(PixelModel& model, const ModelGrads& grads, SgdState& state,
                      std::size_t iter, const TrainConfig& cfg) {
    sgd_poly_step(model.w_enc, grads.w_enc, state.vel["w_enc"], iter, cfg);
    sgd_poly_step(model.b_enc, grads.b_enc, state.vel["b_enc"], iter, cfg);
    sgd_poly_step(model.w_cls, grads.w_cls, state.vel["w_cls"], iter, cfg);
    sgd_poly_step(model.b_cls, grads.b_cls, state.vel["b_cls"], iter, cfg);
    if (model.config.context == ContextKind::Hamburger) {
        sgd_poly_step(model.ham.w_l, grads.ham.grad_w_l, state.vel["ham_w_l"], iter, cfg);
        sgd_poly_step(model.ham.w_u, grads.ham.grad_w_u, state.vel["ham_w_u"], iter, cfg);
        sgd_poly_step(model.ham.bn.gamma, grads.ham.grad_gamma, state.vel_vec["bn_gamma"], iter, cfg);
        sgd_poly_step(model.ham.bn.beta, grads.ham.grad_beta, state.vel_vec["bn_beta"], iter, cfg);
    } else if (model.config.context == ContextKind::Attention) {
        sgd_poly_step(model.attn.w_q, grads.attn.grad_w_q, state.vel["attn_w_q"], iter, cfg);
        sgd_poly_step(model.attn.w_k, grads.attn.grad_w_k, state.vel["attn_w_k"], iter, cfg);
        sgd_poly_step(model.attn.w_v, grads.attn.grad_w_v, state.vel["attn_w_v"], iter, cfg);
        sgd_poly_step(model.attn.w_o, grads.attn.grad_w_o, state.vel["attn_w_o"], iter, cfg);
    }
}

// ---------------------------------------------------------------------------
// Metrics, evaluation, and the training loop.
// ---------------------------------------------------------------------------

struct MetricsTrace {
    std::vector<double> loss;            // per iteration
    std::vector<std::size_t> eval_iters;
    std::vector<double> acc, miou;       // per eval point
    bool nan_flag = false;

    std::string to_csv() const {
        std::string s = "iter,loss,acc,miou\n";
        std::size_t e = 0;
        for (std::size_t i = 0; i < loss.size(); ++i) {
            while (e + 1 < eval_iters.size() && eval_iters[e + 1] <= i) ++e;
            const bool has_eval = !eval_iters.empty() && eval_iters[e] <= i;
            s += std::to_string(i) + "," + format_double(loss[i]) + ",";
            s += has_eval ? format_double(acc[e]) : std::string("");
            s += ",";
            s += has_eval ? format_double(miou[e]) : std::string("");
            s += "\n";
        }
        return s;
    }
};

struct EvalResult {
    double accuracy = 0.0;
    double miou = 0.0;
    std::vector<double> per_class_iou;  // -1 marks classes skipped as empty
};

// Mean IoU with the empty-class convention: classes missing from both
// prediction and ground truth are excluded from the mean.
inline EvalResult evaluate_predictions(const std::vector<std::vector<int>>& pred,
                                       const std::vector<std::vector<int>>& truth,
                                       std::size_t classes) {
    if (pred.size() != truth.size())
        throw shape_error("evaluate_predictions: sample counts disagree");
    std::vector<double> tp(classes, 0.0), fp(classes, 0.0), fn(classes, 0.0);
    double correct = 0.0, total = 0.0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
        if (pred[s].size() != truth[s].size())
            throw shape_error("evaluate_predictions: pixel counts disagree");
        for (std::size_t j = 0; j < pred[s].size(); ++j) {
            const int p = pred[s][j], t = truth[s][j];
            total += 1.0;
            if (p == t) {
                correct += 1.0;
                tp[static_cast<std::size_t>(t)] += 1.0;
            } else {
                fp[static_cast<std::size_t>(p)] += 1.0;
                fn[static_cast<std::size_t>(t)] += 1.0;
            }
        }
    }
    EvalResult r;
    r.accuracy = total > 0.0 ? correct / total : 0.0;
    double iou_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        const double denom = tp[c] + fp[c] + fn[c];
        if (denom == 0.0) {
            r.per_class_iou.push_back(-1.0);
            continue;
        }
        const double iou = tp[c] / denom;
        r.per_class_iou.push_back(iou);
        iou_sum += iou;
        ++counted;
    }
    r.miou = counted > 0 ? iou_sum / static_cast<double>(counted) : 0.0;
    return r;
}

// Deterministic evaluation: BN running statistics, factorization init
// pinned to a per-sample stream derived from `eval_seed`.
inline EvalResult evaluate(PixelModel& model, const std::vector<Sample>& split,
                           std::uint64_t eval_seed = 0) {
    const BnMode saved = model.ham.bn.mode;
    model.ham.bn.mode = BnMode::Eval;
    std::vector<std::vector<int>> pred, truth;
    RngState base(eval_seed);
    for (std::size_t s = 0; s < split.size(); ++s) {
        if (split[s].x.rows != model.config.c_in)
            throw shape_error("evaluate: sample channel count disagrees with model");
        RngState solver_rng = base.derive("eval-sample-" + std::to_string(s));
        ForwardCache cache;
        model_forward(model, split[s].x, solver_rng, &cache);
        std::vector<int> p(split[s].labels.size());
        for (std::size_t j = 0; j < p.size(); ++j) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < cache.probs.rows; ++c)
                if (cache.probs(c, j) > cache.probs(best, j)) best = c;
            p[j] = static_cast<int>(best);
        }
        pred.push_back(std::move(p));
        truth.push_back(split[s].labels);
    }
    model.ham.bn.mode = saved;
    return evaluate_predictions(pred, truth, model.config.classes);
}

struct TrainResult {
    PixelModel model;
    MetricsTrace trace;
};

// Resumable training state: everything the loop touches, including the
// exact RNG stream positions, so an interrupted run continues bit-for-bit.
struct TrainSession {
    ModelConfig model_config;
    TrainConfig cfg;
    PixelModel model;
    SgdState sgd;
    RngState batch_rng{0}, solver_rng{0};
    std::size_t next_iter = 0;
    MetricsTrace trace;
};

inline TrainSession make_train_session(const ModelConfig& model_config, const TrainConfig& cfg) {
    TrainSession s;
    s.model_config = model_config;
    s.cfg = cfg;
    RngState rng(cfg.seed);
    RngState init_rng = rng.derive("model-init");
    s.model = make_pixel_model(model_config, init_rng);
    s.model.ham.bn.mode = BnMode::Train;
    s.batch_rng = rng.derive("batches");
    s.solver_rng = rng.derive("solver-init");
    return s;
}

// Runs iterations [next_iter, min(upto, iters_max)). A non-finite loss
// flags the trace and stops the run; it is never thrown.
inline void train_steps(TrainSession& session, const Dataset& data, std::size_t upto) {
    PixelModel& model = session.model;
    SgdState& sgd = session.sgd;
    RngState& batch_rng = session.batch_rng;
    RngState& solver_rng = session.solver_rng;
    const TrainConfig& cfg = session.cfg;
    MetricsTrace& trace = session.trace;

    const std::size_t stop = std::min(upto, cfg.iters_max);
    for (std::size_t iter = session.next_iter; iter < stop && !trace.nan_flag; ++iter) {
        session.next_iter = iter + 1;
        ModelGrads grads = make_zero_grads(model);
        double batch_loss = 0.0;
        const double weight = 1.0 / static_cast<double>(cfg.batch);
        bool blew_up = false;
        for (std::size_t b = 0; b < cfg.batch && !blew_up; ++b) {
            const std::size_t idx =
                static_cast<std::size_t>(batch_rng.uniform() *
                                         static_cast<double>(data.train.size())) %
                data.train.size();
            const Sample& sample = data.train[idx];
            try {
                ForwardCache cache;
                model_forward(model, sample.x, solver_rng, &cache);
                batch_loss += weight * cross_entropy(cache, sample.labels);
                model_backward(model, sample.x, sample.labels, cache, grads, weight);
            } catch (const numeric_error&) {
                // Overflow inside a step is the same failure as a NaN loss:
                // record it on the trace and stop; the run itself is data.
                blew_up = true;
            }
        }
        if (blew_up || !std::isfinite(batch_loss)) {
            trace.loss.push_back(std::numeric_limits<double>::quiet_NaN());
            trace.nan_flag = true;
            break;
        }
        trace.loss.push_back(batch_loss);
        apply_sgd(model, grads, sgd, iter, cfg);
        if ((iter + 1) % cfg.eval_interval == 0 || iter + 1 == cfg.iters_max) {
            EvalResult ev = evaluate(model, data.val, cfg.seed);
            trace.eval_iters.push_back(iter);
            trace.acc.push_back(ev.accuracy);
            trace.miou.push_back(ev.miou);
        }
    }
}

// Single-threaded, fully seeded training loop over the whole budget.
inline TrainResult train(const ModelConfig& model_config, const Dataset& data,
                         const TrainConfig& cfg) {
    TrainSession session = make_train_session(model_config, cfg);
    train_steps(session, data, cfg.iters_max);
    return TrainResult{std::move(session.model), std::move(session.trace)};
}

// ---------------------------------------------------------------------------
// Session persistence. Matrices and velocity buffers go to named binary
// files; scalars, RNG positions, and the metrics trace to session.json.
// ---------------------------------------------------------------------------

inline nlohmann::json model_config_json(const ModelConfig& mc) {
    return nlohmann::json{{"c_in", mc.c_in},
                          {"d_z", mc.d_z},
                          {"classes", mc.classes},
                          {"context", context_kind_name(mc.context)},
                          {"ham", hamburger_config_json(mc.ham)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig mc;
    mc.c_in = j.at("c_in").get<std::size_t>();
    mc.d_z = j.at("d_z").get<std::size_t>();
    mc.classes = j.at("classes").get<std::size_t>();
    const std::string ctx = j.at("context").get<std::string>();
    if (ctx == "none")
        mc.context = ContextKind::None;
    else if (ctx == "hamburger")
        mc.context = ContextKind::Hamburger;
    else if (ctx == "attention")
        mc.context = ContextKind::Attention;
    else
        throw io_error("model_config_from_json: unknown context '" + ctx + "'");
    mc.ham = hamburger_config_from_json(j.at("ham"));
    mc.validate();
    return mc;
}

inline nlohmann::json train_config_json(const TrainConfig& cfg) {
    return nlohmann::json{{"lr0", cfg.lr0},
                          {"momentum", cfg.momentum},
                          {"weight_decay", cfg.weight_decay},
                          {"poly_power", cfg.poly_power},
                          {"batch", cfg.batch},
                          {"iters_max", cfg.iters_max},
                          {"eval_interval", cfg.eval_interval},
                          {"seed", cfg.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.lr0 = j.at("lr0").get<double>();
    cfg.momentum = j.at("momentum").get<double>();
    cfg.weight_decay = j.at("weight_decay").get<double>();
    cfg.poly_power = j.at("poly_power").get<double>();
    cfg.batch = j.at("batch").get<std::size_t>();
    cfg.iters_max = j.at("iters_max").get<std::size_t>();
    cfg.eval_interval = j.at("eval_interval").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

namespace detail {

inline Matrix vec_to_matrix(const std::vector<double>& v) {
    Matrix m(1, v.size());
    m.data = v;
    return m;
}

inline std::vector<double> matrix_to_vec(const Matrix& m) { return m.data; }

inline std::string session_slug(const std::string& name) {
    return name + ".bin";
}

}  // namespace detail

inline void save_train_session(const TrainSession& session, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw io_error("save_train_session: cannot create directory " + dir);

    auto put = [&](const std::string& name, const Matrix& m) {
        write_matrix_binary(m, dir + "/" + detail::session_slug(name));
    };
    const PixelModel& model = session.model;
    put("w_enc", model.w_enc);
    put("b_enc", model.b_enc);
    put("w_cls", model.w_cls);
    put("b_cls", model.b_cls);
    if (model.config.context == ContextKind::Hamburger) {
        put("ham_w_l", model.ham.w_l);
        put("ham_w_u", model.ham.w_u);
        put("bn_gamma", detail::vec_to_matrix(model.ham.bn.gamma));
        put("bn_beta", detail::vec_to_matrix(model.ham.bn.beta));
        put("bn_running_mean", detail::vec_to_matrix(model.ham.bn.running_mean));
        put("bn_running_var", detail::vec_to_matrix(model.ham.bn.running_var));
    } else if (model.config.context == ContextKind::Attention) {
        put("attn_w_q", model.attn.w_q);
        put("attn_w_k", model.attn.w_k);
        put("attn_w_v", model.attn.w_v);
        put("attn_w_o", model.attn.w_o);
    }

    nlohmann::json vel_names = nlohmann::json::array();
    for (const auto& [name, m] : session.sgd.vel) {
        put("vel_" + name, m);
        vel_names.push_back(name);
    }
    nlohmann::json vel_vec_names = nlohmann::json::array();
    for (const auto& [name, v] : session.sgd.vel_vec) {
        put("velv_" + name, detail::vec_to_matrix(v));
        vel_vec_names.push_back(name);
    }

    nlohmann::json j{
        {"format", "hamkit-train-session-v1"},
        {"model_config", model_config_json(session.model_config)},
        {"train_config", train_config_json(session.cfg)},
        {"batch_rng", {{"seed", session.batch_rng.seed}, {"counter", session.batch_rng.counter}}},
        {"solver_rng", {{"seed", session.solver_rng.seed}, {"counter", session.solver_rng.counter}}},
        {"next_iter", session.next_iter},
        {"bn_mode", session.model.ham.bn.mode == BnMode::Train ? "train" : "eval"},
        {"velocities", vel_names},
        {"vector_velocities", vel_vec_names},
        {"trace",
         {{"loss", session.trace.loss},
          {"eval_iters", session.trace.eval_iters},
          {"acc", session.trace.acc},
          {"miou", session.trace.miou},
          {"nan_flag", session.trace.nan_flag}}},
    };
    write_text_file(dir + "/session.json", j.dump(2) + "\n");
}

inline TrainSession load_train_session(const std::string& dir) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(dir + "/session.json"));
    } catch (const nlohmann::json::exception& e) {
        throw io_error("load_train_session: bad session.json: " + std::string(e.what()));
    }
    if (j.value("format", "") != "hamkit-train-session-v1")
        throw io_error("load_train_session: unrecognized session format");

    TrainSession s;
    s.model_config = model_config_from_json(j.at("model_config"));
    s.cfg = train_config_from_json(j.at("train_config"));
    s.batch_rng.seed = j.at("batch_rng").at("seed").get<std::uint64_t>();
    s.batch_rng.counter = j.at("batch_rng").at("counter").get<std::uint64_t>();
    s.solver_rng.seed = j.at("solver_rng").at("seed").get<std::uint64_t>();
    s.solver_rng.counter = j.at("solver_rng").at("counter").get<std::uint64_t>();
    s.next_iter = j.at("next_iter").get<std::size_t>();
    s.trace.loss = j.at("trace").at("loss").get<std::vector<double>>();
    s.trace.eval_iters = j.at("trace").at("eval_iters").get<std::vector<std::size_t>>();
    s.trace.acc = j.at("trace").at("acc").get<std::vector<double>>();
    s.trace.miou = j.at("trace").at("miou").get<std::vector<double>>();
    s.trace.nan_flag = j.at("trace").at("nan_flag").get<bool>();

    auto get = [&](const std::string& name) {
        return read_matrix_binary(dir + "/" + detail::session_slug(name));
    };
    RngState dummy(0);
    s.model = make_pixel_model(s.model_config, dummy);
    s.model.w_enc = get("w_enc");
    s.model.b_enc = get("b_enc");
    s.model.w_cls = get("w_cls");
    s.model.b_cls = get("b_cls");
    if (s.model_config.context == ContextKind::Hamburger) {
        s.model.ham.w_l = get("ham_w_l");
        s.model.ham.w_u = get("ham_w_u");
        s.model.ham.bn.gamma = detail::matrix_to_vec(get("bn_gamma"));
        s.model.ham.bn.beta = detail::matrix_to_vec(get("bn_beta"));
        s.model.ham.bn.running_mean = detail::matrix_to_vec(get("bn_running_mean"));
        s.model.ham.bn.running_var = detail::matrix_to_vec(get("bn_running_var"));
    } else if (s.model_config.context == ContextKind::Attention) {
        s.model.attn.w_q = get("attn_w_q");
        s.model.attn.w_k = get("attn_w_k");
        s.model.attn.w_v = get("attn_w_v");
        s.model.attn.w_o = get("attn_w_o");
    }
    s.model.ham.bn.mode = j.value("bn_mode", "train") == "eval" ? BnMode::Eval : BnMode::Train;

    for (const auto& name : j.at("velocities"))
        s.sgd.vel[name.get<std::string>()] = get("vel_" + name.get<std::string>());
    for (const auto& name : j.at("vector_velocities"))
        s.sgd.vel_vec[name.get<std::string>()] =
            detail::matrix_to_vec(get("velv_" + name.get<std::string>()));
    return s;
}

}  // namespace hamkit

#endif
