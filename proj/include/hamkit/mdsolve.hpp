#ifndef HAMKIT_MDSOLVE_HPP
#define HAMKIT_MDSOLVE_HPP

#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "io.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace hamkit {

enum class MdKind { VQ, CD, NMF };

inline const char* md_kind_name(MdKind k) {
    switch (k) {
        case MdKind::VQ: return "vq";
        case MdKind::CD: return "cd";
        case MdKind::NMF: return "nmf";
    }
    return "?";
}

struct MdModel {
    MdKind kind = MdKind::NMF;
    double temperature = 0.01;  // softmax temperature for VQ/CD assignment
    double beta = 0.01;         // ridge weight for CD's closed-form codes

    MdModel() = default;
    MdModel(MdKind k, double t = 0.01, double b = 0.01) : kind(k), temperature(t), beta(b) {
        if (!(temperature > 0.0)) throw std::invalid_argument("MdModel: temperature must be > 0");
        if (beta < 0.0) throw std::invalid_argument("MdModel: beta must be >= 0");
    }
};

enum class InitKind { Random, Fixed, WarmOnline };

// Dictionary initialization strategy. Fixed keeps one lazily created
// dictionary bit-identical across calls; WarmOnline is updated only
// between solves (single-writer contract).
struct InitStrategy {
    InitKind kind = InitKind::Random;
    double warm_momentum = 0.9;
    Matrix stored;  // Fixed: frozen dictionary; WarmOnline: running store

    static InitStrategy random() { return InitStrategy{InitKind::Random, 0.9, {}}; }
    static InitStrategy fixed() { return InitStrategy{InitKind::Fixed, 0.9, {}}; }
    static InitStrategy warm_online(double momentum = 0.9) {
        return InitStrategy{InitKind::WarmOnline, momentum, {}};
    }

    // Called between training solves only, never inside one.
    void warm_update(const Matrix& solved_dictionary) {
        if (kind != InitKind::WarmOnline) return;
        if (stored.size() == 0) {
            stored = solved_dictionary;
            return;
        }
        for (std::size_t i = 0; i < stored.size(); ++i)
            stored.data[i] = warm_momentum * stored.data[i] +
                             (1.0 - warm_momentum) * solved_dictionary.data[i];
    }
};

struct Factorization {
    Matrix dictionary;      // d x r
    Matrix codes;           // r x n
    Matrix reconstruction;  // d x n, dictionary * codes
    std::vector<double> objective_trace;
    std::size_t iterations_run = 0;
};

inline double objective(const Matrix& x, const Matrix& d, const Matrix& c, const MdModel& model) {
    Matrix res = sub(x, matmul(d, c));
    if (model.kind == MdKind::CD) {
        double f = frobenius_norm(res);
        double cn = frobenius_norm(c);
        return f * f + model.beta * cn * cn;
    }
    return frobenius_norm(res);
}

// Initial (D, C) per strategy. Random dictionaries are Uniform(0,1);
// NMF codes start from one spherical-K-means-like assignment at T = 1
// (entries stay well away from zero for the MU rule), VQ/CD codes start
// uniform at 1/r. CD dictionaries are column-normalized.
inline std::pair<Matrix, Matrix> init_factorization(const Matrix& x, const MdModel& model,
                                                    InitStrategy& strategy, std::size_t r,
                                                    RngState& rng) {
    if (r < 1) throw std::invalid_argument("init_factorization: r must be >= 1");
    const std::size_t d = x.rows, n = x.cols;
    if (r > std::min(d, n))
        std::fprintf(stderr, "hamkit: warning: r=%zu exceeds min(d,n)=%zu\n", r, std::min(d, n));

    Matrix dict;
    switch (strategy.kind) {
        case InitKind::Random:
            dict = random_uniform(d, r, rng);
            break;
        case InitKind::Fixed:
            if (strategy.stored.rows != d || strategy.stored.cols != r)
                strategy.stored = random_uniform(d, r, rng);
            dict = strategy.stored;
            break;
        case InitKind::WarmOnline:
            if (strategy.stored.rows != d || strategy.stored.cols != r)
                strategy.stored = random_uniform(d, r, rng);
            dict = strategy.stored;
            break;
    }
    if (model.kind == MdKind::CD) dict = l2_normalize_columns(dict);

    Matrix codes;
    if (model.kind == MdKind::NMF) {
        codes = column_softmax(cosine_similarity(dict, x), 1.0);
    } else {
        codes = Matrix(r, n, 1.0 / static_cast<double>(r));
    }
    return {std::move(dict), std::move(codes)};
}

// Alg: C <- softmax(cosine(D,X)/T); D <- X C' diag(C' 1_n)^-1, guarded.
inline std::pair<Matrix, Matrix> vq_step(const Matrix& d, const Matrix& x, double t) {
    if (!(t > 0.0)) throw std::invalid_argument("vq_step: temperature must be > 0");
    Matrix c = column_softmax(cosine_similarity(d, x), t);
    Matrix xct = matmul(x, transpose(c));  // d x r
    Matrix dn(xct.rows, xct.cols);
    for (std::size_t j = 0; j < c.rows; ++j) {
        double mass = 0.0;
        for (std::size_t k = 0; k < c.cols; ++k) mass += c(j, k);
        const double inv = 1.0 / (mass + kDenomEps);
        for (std::size_t i = 0; i < xct.rows; ++i) dn(i, j) = xct(i, j) * inv;
    }
    return {std::move(c), std::move(dn)};
}

// Alg: C <- softmax(cosine(D,X)/T); D <- normalize(X C').
inline std::pair<Matrix, Matrix> cd_step(const Matrix& d, const Matrix& x, double t) {
    if (!(t > 0.0)) throw std::invalid_argument("cd_step: temperature must be > 0");
    Matrix c = column_softmax(cosine_similarity(d, x), t);
    Matrix dn = l2_normalize_columns(matmul(x, transpose(c)));
    return {std::move(c), std::move(dn)};
}

// Ridge least squares: C = (D'D + beta I)^-1 D'X via SPD solve.
inline Matrix cd_codes_closed_form(const Matrix& d, const Matrix& x, double beta) {
    if (beta < 0.0) throw std::invalid_argument("cd_codes_closed_form: beta must be >= 0");
    Matrix gram = matmul(transpose(d), d);
    for (std::size_t i = 0; i < gram.rows; ++i) gram(i, i) += beta;
    return spd_solve(gram, matmul(transpose(d), x));
}

// MU rules, C first with the old D, then D with the new C. Denominators
// carry the epsilon guard; nonnegativity is closed under the update.
inline std::pair<Matrix, Matrix> nmf_mu_step(const Matrix& d, const Matrix& c, const Matrix& x) {
    for (double v : x.data)
        if (v < 0.0) throw std::domain_error("nmf_mu_step: X has negative entries (apply relu first)");
    for (double v : d.data)
        if (v < 0.0) throw std::domain_error("nmf_mu_step: D has negative entries");
    for (double v : c.data)
        if (v < 0.0) throw std::domain_error("nmf_mu_step: C has negative entries");

    Matrix dtx = matmul(transpose(d), x);
    Matrix dtdc = matmul(matmul(transpose(d), d), c);
    Matrix cn = c;
    for (std::size_t i = 0; i < cn.size(); ++i)
        cn.data[i] *= dtx.data[i] / (dtdc.data[i] + kDenomEps);

    Matrix xct = matmul(x, transpose(cn));
    Matrix dcct = matmul(d, matmul(cn, transpose(cn)));
    Matrix dn = d;
    for (std::size_t i = 0; i < dn.size(); ++i)
        dn.data[i] *= xct.data[i] / (dcct.data[i] + kDenomEps);

    return {std::move(dn), std::move(cn)};
}

inline Factorization solve_r(const Matrix& x, const MdModel& model, std::size_t k,
                             InitStrategy& strategy, std::size_t r, RngState& rng);

// K unrolled steps of the model's update (CD: K spherical steps then one
// closed-form code solve). The trace holds the objective at init and
// after every step.
inline Factorization solve(const Matrix& x, const MdModel& model, std::size_t k,
                           InitStrategy& strategy, RngState& rng) {
    if (k < 1) throw std::invalid_argument("solve: K must be >= 1");
    if (model.kind == MdKind::NMF) {
        for (double v : x.data)
            if (v < 0.0) throw std::domain_error("solve: NMF requires nonnegative input");
    }
    // Default atom count r = 64 capped to the instance; callers that care
    // pass r explicitly through solve_r.
    std::size_t r = std::min<std::size_t>(64, std::min(x.rows, x.cols));
    return solve_r(x, model, k, strategy, r, rng);
}

inline Factorization solve_r(const Matrix& x, const MdModel& model, std::size_t k,
                             InitStrategy& strategy, std::size_t r, RngState& rng) {
    if (k < 1) throw std::invalid_argument("solve: K must be >= 1");
    auto [d, c] = init_factorization(x, model, strategy, r, rng);
    Factorization f;
    f.objective_trace.push_back(objective(x, d, c, model));
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
        f.objective_trace.push_back(objective(x, d, c, model));
    }
    if (model.kind == MdKind::CD) {
        c = cd_codes_closed_form(d, x, model.beta);
        f.objective_trace.push_back(objective(x, d, c, model));
    }
    f.dictionary = std::move(d);
    f.codes = std::move(c);
    f.reconstruction = matmul(f.dictionary, f.codes);
    f.iterations_run = k;
    return f;
}

inline void dump_factorization(const Factorization& f, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_matrix_csv(f.dictionary, dir + "/D.csv");
    write_matrix_csv(f.codes, dir + "/C.csv");
    std::string trace = "iteration,objective\n";
    for (std::size_t i = 0; i < f.objective_trace.size(); ++i)
        trace += std::to_string(i) + "," + format_double(f.objective_trace[i]) + "\n";
    write_text_file(dir + "/trace.csv", trace);
}

}  // namespace hamkit

#endif
