#ifndef HAMKIT_GRADDIFF_HPP
#define HAMKIT_GRADDIFF_HPP

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "matrix.hpp"
#include "mdsolve.hpp"
#include "rng.hpp"

namespace hamkit {

enum class GradMode { BPTT, OneStep, Implicit };

inline const char* grad_mode_name(GradMode m) {
    switch (m) {
        case GradMode::BPTT: return "bptt";
        case GradMode::OneStep: return "one-step";
        case GradMode::Implicit: return "implicit";
    }
    return "?";
}

struct GradReport {
    GradMode mode = GradMode::BPTT;
    std::map<std::string, Matrix> grads;
    double oracle_max_rel_error = -1.0;  // unset until compared
    double oracle_cosine = 0.0;

    void check_finite_all() const {
        for (const auto& [name, g] : grads) check_finite(g, name.c_str());
    }
};

// ---------------------------------------------------------------------------
// Finite differences (the oracle side of every gradient check).
// ---------------------------------------------------------------------------

// Central-difference Jacobian of a black-box vector map. Row i holds
// d f_i / d x_j over j.
inline Matrix finite_difference_jacobian(
    const std::function<std::vector<double>(const std::vector<double>&)>& f,
    std::vector<double> x, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_difference_jacobian: step must be > 0");
    const std::size_t n = x.size();
    std::vector<double> f0 = f(x);
    const std::size_t m = f0.size();
    Matrix jac(m, n);
    for (std::size_t j = 0; j < n; ++j) {
        const double saved = x[j];
        x[j] = saved + step;
        std::vector<double> fp = f(x);
        x[j] = saved - step;
        std::vector<double> fm = f(x);
        x[j] = saved;
        for (std::size_t i = 0; i < m; ++i) {
            const double v = (fp[i] - fm[i]) / (2.0 * step);
            if (!std::isfinite(v))
                throw numeric_error("finite_difference_jacobian: non-finite output");
            jac(i, j) = v;
        }
    }
    return jac;
}

// Gradient of a scalar loss over one matrix argument by central differences.
inline Matrix finite_difference_grad(const std::function<double(const Matrix&)>& loss,
                                     Matrix x, double step = 1e-5) {
    Matrix g(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x.data[i];
        x.data[i] = saved + step;
        const double fp = loss(x);
        x.data[i] = saved - step;
        const double fm = loss(x);
        x.data[i] = saved;
        g.data[i] = (fp - fm) / (2.0 * step);
        if (!std::isfinite(g.data[i]))
            throw numeric_error("finite_difference_grad: non-finite output");
    }
    return g;
}

inline double gradient_rel_error(const Matrix& a, const Matrix& b) {
    const double denom = std::max({max_abs(a), max_abs(b), 1e-8});
    return max_abs(sub(a, b)) / denom;
}

inline double gradient_cosine(const Matrix& a, const Matrix& b) {
    const double na = frobenius_norm(a), nb = frobenius_norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot_flat(a, b) / (na * nb);
}

// ---------------------------------------------------------------------------
// Elementary vector-Jacobian products shared by the solver backward passes.
// ---------------------------------------------------------------------------

// s = column_softmax(z / T); given s and ds, returns dz.
inline Matrix softmax_columns_vjp(const Matrix& s, const Matrix& ds, double temperature) {
    Matrix dz(s.rows, s.cols);
    for (std::size_t j = 0; j < s.cols; ++j) {
        double inner = 0.0;
        for (std::size_t i = 0; i < s.rows; ++i) inner += ds(i, j) * s(i, j);
        for (std::size_t i = 0; i < s.rows; ++i)
            dz(i, j) = s(i, j) * (ds(i, j) - inner) / temperature;
    }
    return dz;
}

// cos = cosine_similarity(d, x); accumulates dD and dX given dCos.
inline void cosine_similarity_vjp(const Matrix& d, const Matrix& x, const Matrix& cos_dx,
                                  const Matrix& dcos, Matrix& dd_acc, Matrix& dx_acc) {
    const std::size_t r = d.cols, n = x.cols, dim = d.rows;
    std::vector<double> pd(r), px(n);
    std::vector<bool> d_live(r), x_live(n);  // norm above the guard threshold
    for (std::size_t i = 0; i < r; ++i) {
        const double nm = column_norm(d, i);
        d_live[i] = nm > kDenomEps;
        pd[i] = guarded_norm(nm);
    }
    for (std::size_t j = 0; j < n; ++j) {
        const double nm = column_norm(x, j);
        x_live[j] = nm > kDenomEps;
        px[j] = guarded_norm(nm);
    }
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double g = dcos(i, j);
            if (g == 0.0) continue;
            const double c = cos_dx(i, j);
            const double a = g / (pd[i] * px[j]);
            const double bd = d_live[i] ? g * c / (pd[i] * pd[i]) : 0.0;
            const double bx = x_live[j] ? g * c / (px[j] * px[j]) : 0.0;
            for (std::size_t t = 0; t < dim; ++t) {
                dd_acc(t, i) += a * x(t, j) - bd * d(t, i);
                dx_acc(t, j) += a * d(t, i) - bx * x(t, j);
            }
        }
    }
}

// u = l2_normalize_columns(v); given v and du, returns dv.
inline Matrix l2_normalize_columns_vjp(const Matrix& v, const Matrix& du) {
    Matrix dv(v.rows, v.cols);
    for (std::size_t j = 0; j < v.cols; ++j) {
        const double nm = column_norm(v, j);
        const double s = guarded_norm(nm);
        double inner = 0.0;
        for (std::size_t i = 0; i < v.rows; ++i) inner += v(i, j) * du(i, j);
        const double k = nm > kDenomEps ? inner / (s * s * s) : 0.0;
        for (std::size_t i = 0; i < v.rows; ++i) dv(i, j) = du(i, j) / s - v(i, j) * k;
    }
    return dv;
}

// ---------------------------------------------------------------------------
// Solver tape and per-step backward passes.
//
// The differentiated computation is: given the initial (D0, C0) as
// constants, run K steps of the model update, then read out
// Y = D_K C_K (CD additionally replaces the codes by the closed-form
// ridge solve before the product). Gradients are taken w.r.t. the
// solver input X. The initialization is held fixed, matching the
// stop-gradient placement the one-step contract assumes; oracles must
// freeze it too.
// ---------------------------------------------------------------------------

struct SolverState {
    Matrix d;
    Matrix c;
};

struct SolverTape {
    MdModel model;
    Matrix x;
    std::vector<SolverState> states;  // oldest first; full BPTT keeps K+1
    std::size_t total_steps = 0;      // K
    bool truncated = false;           // true when only the last step is retained

    std::size_t retained_states() const { return states.size(); }
};

// Runs the unrolled solver while recording what the gradient mode needs.
// BPTT keeps every iterate; OneStep and Implicit keep the last two states
// only, independent of K.
inline Factorization solve_with_tape(const Matrix& x, const MdModel& model, std::size_t k,
                                     InitStrategy& strategy, std::size_t r, RngState& rng,
                                     GradMode mode, SolverTape& tape) {
    if (k < 1) throw std::invalid_argument("solve_with_tape: K must be >= 1");
    if (model.kind == MdKind::NMF) {
        for (double v : x.data)
            if (v < 0.0) throw std::domain_error("solve_with_tape: NMF requires nonnegative input");
    }
    auto [d, c] = init_factorization(x, model, strategy, r, rng);
    tape.model = model;
    tape.x = x;
    tape.states.clear();
    tape.total_steps = k;
    tape.truncated = (mode != GradMode::BPTT);

    Factorization f;
    f.objective_trace.push_back(objective(x, d, c, model));
    tape.states.push_back({d, c});
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
        tape.states.push_back({d, c});
        if (tape.truncated && tape.states.size() > 2)
            tape.states.erase(tape.states.begin());
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

namespace detail {

// One VQ step backward. Inputs are the pre-step dictionary and X;
// grads come in for the step outputs (C', D') and flow to (D, X).
inline void vq_step_vjp(const Matrix& d_prev, const Matrix& x, double t,
                        const Matrix& g_dnew, const Matrix& g_cext,
                        Matrix& g_dprev, Matrix& g_x) {
    Matrix cos_dx = cosine_similarity(d_prev, x);
    Matrix c = column_softmax(cos_dx, t);
    Matrix xct = matmul(x, transpose(c));  // pre-mass columns
    const std::size_t r = c.rows;

    Matrix g_c = g_cext;
    if (max_abs(g_dnew) > 0.0) {
        // D'_col_j = u_j * w_j with u_j = (X C')_col_j, w_j = 1/(mass_j + eps)
        Matrix g_u(xct.rows, xct.cols);
        for (std::size_t j = 0; j < r; ++j) {
            double mass = 0.0;
            for (std::size_t kk = 0; kk < c.cols; ++kk) mass += c(j, kk);
            const double w = 1.0 / (mass + kDenomEps);
            double g_mass = 0.0;
            for (std::size_t i = 0; i < xct.rows; ++i) {
                g_u(i, j) = g_dnew(i, j) * w;
                g_mass -= g_dnew(i, j) * xct(i, j) * w * w;
            }
            for (std::size_t kk = 0; kk < c.cols; ++kk) g_c(j, kk) += g_mass;
        }
        g_x = add(g_x, matmul(g_u, c));
        g_c = add(g_c, matmul(transpose(g_u), x));
    }
    Matrix g_cos = softmax_columns_vjp(c, g_c, t);
    cosine_similarity_vjp(d_prev, x, cos_dx, g_cos, g_dprev, g_x);
}

inline void cd_step_vjp(const Matrix& d_prev, const Matrix& x, double t,
                        const Matrix& g_dnew, const Matrix& g_cext,
                        Matrix& g_dprev, Matrix& g_x) {
    Matrix cos_dx = cosine_similarity(d_prev, x);
    Matrix c = column_softmax(cos_dx, t);
    Matrix v = matmul(x, transpose(c));  // pre-normalization dictionary

    Matrix g_c = g_cext;
    if (max_abs(g_dnew) > 0.0) {
        Matrix g_v = l2_normalize_columns_vjp(v, g_dnew);
        g_x = add(g_x, matmul(g_v, c));
        g_c = add(g_c, matmul(transpose(g_v), x));
    }
    Matrix g_cos = softmax_columns_vjp(c, g_c, t);
    cosine_similarity_vjp(d_prev, x, cos_dx, g_cos, g_dprev, g_x);
}

inline void nmf_step_vjp(const Matrix& d_prev, const Matrix& c_prev, const Matrix& x,
                         const Matrix& g_dnew, const Matrix& g_cext,
                         Matrix& g_dprev, Matrix& g_cprev, Matrix& g_x) {
    // Recompute the step's intermediates.
    Matrix num_c = matmul(transpose(d_prev), x);
    Matrix gram = matmul(transpose(d_prev), d_prev);
    Matrix den_c = matmul(gram, c_prev);
    Matrix c_new = c_prev;
    for (std::size_t i = 0; i < c_new.size(); ++i)
        c_new.data[i] *= num_c.data[i] / (den_c.data[i] + kDenomEps);

    Matrix num_d = matmul(x, transpose(c_new));
    Matrix s = matmul(c_new, transpose(c_new));
    Matrix den_d = matmul(d_prev, s);
    Matrix d_new = d_prev;
    for (std::size_t i = 0; i < d_new.size(); ++i)
        d_new.data[i] *= num_d.data[i] / (den_d.data[i] + kDenomEps);

    // Backward through the D update.
    Matrix g_cnew = g_cext;
    if (max_abs(g_dnew) > 0.0) {
        Matrix g_numd(num_d.rows, num_d.cols);
        Matrix g_dend(den_d.rows, den_d.cols);
        for (std::size_t i = 0; i < d_new.size(); ++i) {
            const double inv = 1.0 / (den_d.data[i] + kDenomEps);
            g_dprev.data[i] += g_dnew.data[i] * num_d.data[i] * inv;
            g_numd.data[i] = g_dnew.data[i] * d_prev.data[i] * inv;
            g_dend.data[i] = -g_dnew.data[i] * d_new.data[i] * inv;
        }
        g_x = add(g_x, matmul(g_numd, c_new));
        g_cnew = add(g_cnew, matmul(transpose(g_numd), x));
        g_dprev = add(g_dprev, matmul(g_dend, s));  // s symmetric
        Matrix g_s = matmul(transpose(d_prev), g_dend);
        g_cnew = add(g_cnew, matmul(add(g_s, transpose(g_s)), c_new));
    }

    // Backward through the C update.
    Matrix g_num(num_c.rows, num_c.cols);
    Matrix g_den(den_c.rows, den_c.cols);
    for (std::size_t i = 0; i < c_new.size(); ++i) {
        const double inv = 1.0 / (den_c.data[i] + kDenomEps);
        g_cprev.data[i] += g_cnew.data[i] * num_c.data[i] * inv;
        g_num.data[i] = g_cnew.data[i] * c_prev.data[i] * inv;
        g_den.data[i] = -g_cnew.data[i] * c_new.data[i] * inv;
    }
    g_x = add(g_x, matmul(d_prev, g_num));
    g_dprev = add(g_dprev, matmul(x, transpose(g_num)));
    g_cprev = add(g_cprev, matmul(gram, g_den));  // gram symmetric
    Matrix g_gram = matmul(g_den, transpose(c_prev));
    g_dprev = add(g_dprev, matmul(d_prev, add(g_gram, transpose(g_gram))));
}

// Backward through the CD readout C* = (D'D + bI)^-1 D'X, Y = D C*.
// Accumulates into g_d and g_x given the incoming g_y.
inline void cd_readout_vjp(const Matrix& d, const Matrix& x, double beta, const Matrix& c_star,
                           const Matrix& g_y, Matrix& g_d, Matrix& g_x) {
    g_d = add(g_d, matmul(g_y, transpose(c_star)));
    Matrix g_c = matmul(transpose(d), g_y);
    Matrix gram = matmul(transpose(d), d);
    for (std::size_t i = 0; i < gram.rows; ++i) gram(i, i) += beta;
    Matrix mg = spd_solve(gram, g_c);  // A^-1 g_c, A symmetric
    g_x = add(g_x, matmul(d, mg));
    g_d = add(g_d, matmul(x, transpose(mg)));
    Matrix g_a = scale(matmul(mg, transpose(c_star)), -1.0);
    g_d = add(g_d, matmul(d, add(g_a, transpose(g_a))));
}

// Reverse sweep over the last `window` recorded steps; earlier iterates
// are treated as constants (stop-gradient).
inline Matrix sweep_backward(const SolverTape& tape, const Factorization& f,
                             const Matrix& grad_y, std::size_t window) {
    const MdModel& model = tape.model;
    const Matrix& x = tape.x;
    Matrix g_x(x.rows, x.cols);

    // Readout.
    Matrix g_d(f.dictionary.rows, f.dictionary.cols);
    Matrix g_c(f.codes.rows, f.codes.cols);
    if (model.kind == MdKind::CD) {
        cd_readout_vjp(f.dictionary, x, model.beta, f.codes, grad_y, g_d, g_x);
        g_c = Matrix(tape.states.back().c.rows, tape.states.back().c.cols);
    } else {
        g_d = matmul(grad_y, transpose(f.codes));
        g_c = matmul(transpose(f.dictionary), grad_y);
    }

    const std::size_t available = tape.states.size() - 1;  // steps on tape
    const std::size_t steps = std::min(window, available);
    for (std::size_t s = 0; s < steps; ++s) {
        const SolverState& prev = tape.states[tape.states.size() - 2 - s];
        Matrix g_dprev(prev.d.rows, prev.d.cols);
        Matrix g_cprev(prev.c.rows, prev.c.cols);
        switch (model.kind) {
            case MdKind::VQ:
                vq_step_vjp(prev.d, x, model.temperature, g_d, g_c, g_dprev, g_x);
                break;
            case MdKind::CD:
                cd_step_vjp(prev.d, x, model.temperature, g_d, g_c, g_dprev, g_x);
                break;
            case MdKind::NMF:
                nmf_step_vjp(prev.d, prev.c, x, g_d, g_c, g_dprev, g_cprev, g_x);
                break;
        }
        g_d = std::move(g_dprev);
        g_c = std::move(g_cprev);
    }
    check_finite(g_x, "sweep_backward");
    return g_x;
}

}  // namespace detail

// Full chain-rule gradient over every recorded step.
inline GradReport backward_bptt(const SolverTape& tape, const Factorization& f,
                                const Matrix& grad_y) {
    if (tape.truncated && tape.total_steps > 1)
        throw std::logic_error("backward_bptt: tape was recorded truncated; re-solve with BPTT mode");
    GradReport rep;
    rep.mode = GradMode::BPTT;
    rep.grads["x"] = detail::sweep_backward(tape, f, grad_y, tape.total_steps);
    return rep;
}

// Keeps only the final step's Jacobian term; the incoming iterate is a
// constant. term_count > 1 replays that many trailing steps (the
// "adding more terms" ablation) and requires a BPTT-recorded tape.
inline GradReport backward_one_step(const SolverTape& tape, const Factorization& f,
                                    const Matrix& grad_y, std::size_t term_count = 1) {
    if (term_count < 1) throw std::invalid_argument("backward_one_step: term_count must be >= 1");
    if (term_count > 1 && tape.truncated)
        throw std::logic_error("backward_one_step: term_count > 1 needs a full tape");
    GradReport rep;
    rep.mode = GradMode::OneStep;
    rep.grads["x"] = detail::sweep_backward(tape, f, grad_y, term_count);
    return rep;
}

// Fixed-point (implicit) gradient: solves the adjoint system
// v' (I - dF/dh*) = dY/dh*' by fixed-point iteration, then applies dF/dx.
// Requires a near-converged solve; divergence is reported, not hidden.
inline GradReport backward_implicit(const SolverTape& tape, const Factorization& f,
                                    const Matrix& grad_y, double linear_solver_tol = 1e-10,
                                    std::size_t max_adjoint_iters = 500) {
    const MdModel& model = tape.model;
    const Matrix& x = tape.x;
    if (tape.states.size() < 2)
        throw std::logic_error("backward_implicit: tape holds no step");
    const SolverState& last = tape.states.back();
    const SolverState& prev = tape.states[tape.states.size() - 2];
    {
        const double num = frobenius_norm(sub(last.d, prev.d)) + frobenius_norm(sub(last.c, prev.c));
        const double den = frobenius_norm(last.d) + frobenius_norm(last.c) + 1e-300;
        if (num / den > 1e-6)
            throw numeric_error("backward_implicit: solver not near a fixed point (residual " +
                                std::to_string(num / den) + ")");
    }

    // Seed: dY/dh* at the fixed point.
    Matrix g_x(x.rows, x.cols);
    Matrix seed_d(last.d.rows, last.d.cols);
    Matrix seed_c(last.c.rows, last.c.cols);
    if (model.kind == MdKind::CD) {
        detail::cd_readout_vjp(f.dictionary, x, model.beta, f.codes, grad_y, seed_d, g_x);
    } else {
        seed_d = matmul(grad_y, transpose(f.codes));
        seed_c = matmul(transpose(f.dictionary), grad_y);
    }

    // Adjoint iteration v <- seed + J_F(h*)^T v. The x-contribution of the
    // step VJP is discarded here and applied once at the end.
    Matrix v_d = seed_d, v_c = seed_c;
    const double seed_norm = frobenius_norm(seed_d) + frobenius_norm(seed_c) + 1e-300;
    bool converged = false;
    for (std::size_t it = 0; it < max_adjoint_iters; ++it) {
        Matrix jd(v_d.rows, v_d.cols), jc(v_c.rows, v_c.cols);
        Matrix dummy_x(x.rows, x.cols);
        switch (model.kind) {
            case MdKind::VQ:
                detail::vq_step_vjp(last.d, x, model.temperature, v_d, v_c, jd, dummy_x);
                break;
            case MdKind::CD:
                detail::cd_step_vjp(last.d, x, model.temperature, v_d, v_c, jd, dummy_x);
                break;
            case MdKind::NMF:
                detail::nmf_step_vjp(last.d, last.c, x, v_d, v_c, jd, jc, dummy_x);
                break;
        }
        Matrix next_d = add(seed_d, jd);
        Matrix next_c = add(seed_c, jc);
        const double delta =
            frobenius_norm(sub(next_d, v_d)) + frobenius_norm(sub(next_c, v_c));
        const double scale_v = frobenius_norm(next_d) + frobenius_norm(next_c);
        v_d = std::move(next_d);
        v_c = std::move(next_c);
        if (scale_v > 1e12 * seed_norm)
            throw numeric_error("backward_implicit: adjoint iteration diverged at iteration " +
                                std::to_string(it) + " (non-contractive Jacobian)");
        if (delta <= linear_solver_tol * (scale_v + 1e-300)) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw numeric_error("backward_implicit: adjoint iteration did not converge within " +
                            std::to_string(max_adjoint_iters) + " iterations");

    // Apply dF/dx once with the adjoint vector.
    Matrix jd(v_d.rows, v_d.cols), jc(v_c.rows, v_c.cols);
    switch (model.kind) {
        case MdKind::VQ:
            detail::vq_step_vjp(last.d, x, model.temperature, v_d, v_c, jd, g_x);
            break;
        case MdKind::CD:
            detail::cd_step_vjp(last.d, x, model.temperature, v_d, v_c, jd, g_x);
            break;
        case MdKind::NMF:
            detail::nmf_step_vjp(last.d, last.c, x, v_d, v_c, jd, jc, g_x);
            break;
    }
    GradReport rep;
    rep.mode = GradMode::Implicit;
    rep.grads["x"] = std::move(g_x);
    rep.check_finite_all();
    return rep;
}

// ---------------------------------------------------------------------------
// Abstract iterate probes (the h^{i+1} = F(h^i, x), y = G(h^t) model).
// ---------------------------------------------------------------------------

// A designed iterative map with hand-coded VJPs and known Lipschitz
// constants, used to exercise the convergence and gradient-bound claims.
struct IterativeMap {
    std::function<Matrix(const Matrix&, const Matrix&)> apply;          // F(h, x)
    std::function<Matrix(const Matrix&, const Matrix&, const Matrix&)> vjp_h;  // J_h^T g
    std::function<Matrix(const Matrix&, const Matrix&, const Matrix&)> vjp_x;  // J_x^T g
    double lip_h = 0.0;
    double lip_x = 0.0;
    double lip_g = 1.0;  // readout is identity for all probes
    std::string name;
};

// F(h, x) = A h + B x.
inline IterativeMap affine_probe(const Matrix& a, const Matrix& b) {
    IterativeMap m;
    m.apply = [a, b](const Matrix& h, const Matrix& x) { return add(matmul(a, h), matmul(b, x)); };
    m.vjp_h = [a](const Matrix&, const Matrix&, const Matrix& g) { return matmul(transpose(a), g); };
    m.vjp_x = [b](const Matrix&, const Matrix&, const Matrix& g) { return matmul(transpose(b), g); };
    auto sva = singular_values(a);
    auto svb = singular_values(b);
    m.lip_h = sva.empty() ? 0.0 : sva.front();
    m.lip_x = svb.empty() ? 0.0 : svb.front();
    m.name = "affine";
    return m;
}

// F(h, x) = a tanh(h) + b x, elementwise; L_h = |a|, L_x = |b|.
inline IterativeMap tanh_probe(double a, double b) {
    IterativeMap m;
    m.apply = [a, b](const Matrix& h, const Matrix& x) {
        Matrix out = h;
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] = a * std::tanh(h.data[i]) + b * x.data[i];
        return out;
    };
    m.vjp_h = [a](const Matrix& h, const Matrix&, const Matrix& g) {
        Matrix out = g;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double th = std::tanh(h.data[i]);
            out.data[i] *= a * (1.0 - th * th);
        }
        return out;
    };
    m.vjp_x = [b](const Matrix&, const Matrix&, const Matrix& g) { return scale(g, b); };
    m.lip_h = std::abs(a);
    m.lip_x = std::abs(b);
    m.name = "tanh";
    return m;
}

struct ContractionProbe {
    double lip_h = 0.0, lip_x = 0.0, lip_g = 1.0;
    double convergence_slope = 0.0;            // fitted slope of log ||h^t - h*||
    std::vector<double> grad_h0_norms;         // ||dy/dh0|| per t (operator norm)
    std::vector<double> grad_x_norms;          // ||dy/dx|| per t
    double grad_x_norm = 0.0;                  // at t_max
    bool prop3_bound_holds = true;
};

namespace detail {

// Operator norm of the linear map g -> vjp(g) over unit basis seeds;
// probes are small so the full matrix is affordable.
inline Matrix materialize_vjp_product(
    const std::vector<Matrix>& iterates, const IterativeMap& map, const Matrix& x,
    std::size_t upto_t, bool wrt_x) {
    // Builds the full Jacobian (dy/dh0 or dy/dx) at step upto_t by
    // back-propagating each output basis vector.
    const Matrix& h_last = iterates[upto_t];
    const std::size_t dim = h_last.size();
    const std::size_t in_dim = wrt_x ? x.size() : iterates[0].size();
    Matrix jac(dim, in_dim);
    for (std::size_t out = 0; out < dim; ++out) {
        Matrix g(h_last.rows, h_last.cols);
        g.data[out] = 1.0;
        Matrix gx(x.rows, x.cols);
        for (std::size_t s = upto_t; s-- > 0;) {
            if (wrt_x) gx = add(gx, map.vjp_x(iterates[s], x, g));
            g = map.vjp_h(iterates[s], x, g);
        }
        const Matrix& row = wrt_x ? gx : g;
        for (std::size_t j = 0; j < in_dim; ++j) jac(out, j) = row.data[j];
    }
    return jac;
}

inline double operator_norm(const Matrix& m) {
    auto sv = singular_values(m);
    return sv.empty() ? 0.0 : sv.front();
}

}  // namespace detail

// Runs the iteration, fits the convergence slope, and evaluates the
// gradient-norm sequences the propositions bound.
inline ContractionProbe probe_contraction(const IterativeMap& map, const Matrix& x,
                                          const Matrix& h0, std::size_t t_max) {
    ContractionProbe probe;
    probe.lip_h = map.lip_h;
    probe.lip_x = map.lip_x;
    probe.lip_g = map.lip_g;

    std::vector<Matrix> iterates;
    iterates.push_back(h0);
    for (std::size_t t = 0; t < t_max; ++t) {
        Matrix next = map.apply(iterates.back(), x);
        if (frobenius_norm(next) > 1e12)
            throw numeric_error("probe_contraction: iteration diverged at t=" + std::to_string(t));
        iterates.push_back(std::move(next));
    }
    // Fixed point from a long run.
    Matrix h_star = iterates.back();
    for (std::size_t t = 0; t < 4000; ++t) {
        Matrix next = map.apply(h_star, x);
        if (frobenius_norm(sub(next, h_star)) < 1e-15) {
            h_star = std::move(next);
            break;
        }
        h_star = std::move(next);
    }

    // Least-squares slope of log ||h^t - h*|| over t, dropping points at
    // round-off level.
    std::vector<double> ts, logs;
    for (std::size_t t = 0; t <= t_max; ++t) {
        const double e = frobenius_norm(sub(iterates[t], h_star));
        if (e > 1e-12) {
            ts.push_back(static_cast<double>(t));
            logs.push_back(std::log(e));
        }
    }
    if (ts.size() >= 2) {
        double mt = 0.0, ml = 0.0;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            mt += ts[i];
            ml += logs[i];
        }
        mt /= ts.size();
        ml /= ts.size();
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            num += (ts[i] - mt) * (logs[i] - ml);
            den += (ts[i] - mt) * (ts[i] - mt);
        }
        probe.convergence_slope = num / den;
    }

    const double bound_limit = map.lip_g * map.lip_x / (1.0 - map.lip_h);
    for (std::size_t t = 1; t <= t_max; ++t) {
        Matrix j_h0 = detail::materialize_vjp_product(iterates, map, x, t, false);
        Matrix j_x = detail::materialize_vjp_product(iterates, map, x, t, true);
        const double nh = detail::operator_norm(j_h0);
        const double nx = detail::operator_norm(j_x);
        probe.grad_h0_norms.push_back(nh);
        probe.grad_x_norms.push_back(nx);
        const double bound_h0 = map.lip_g * std::pow(map.lip_h, static_cast<double>(t));
        const double bound_x = map.lip_g * map.lip_x *
                               (1.0 - std::pow(map.lip_h, static_cast<double>(t))) /
                               (1.0 - map.lip_h);
        if (nh > bound_h0 * (1.0 + 1e-9) + 1e-12) probe.prop3_bound_holds = false;
        if (nx > bound_x * (1.0 + 1e-9) + 1e-12) probe.prop3_bound_holds = false;
        if (nx > bound_limit * 1.05) probe.prop3_bound_holds = false;
    }
    probe.grad_x_norm = probe.grad_x_norms.empty() ? 0.0 : probe.grad_x_norms.back();
    return probe;
}

// BPTT gradient dy/dx for a probe after t steps, seeded with grad_y.
inline Matrix probe_bptt_grad_x(const IterativeMap& map, const Matrix& x, const Matrix& h0,
                                std::size_t t, const Matrix& grad_y) {
    std::vector<Matrix> iterates;
    iterates.push_back(h0);
    for (std::size_t s = 0; s < t; ++s) iterates.push_back(map.apply(iterates.back(), x));
    Matrix g = grad_y;
    Matrix gx(x.rows, x.cols);
    for (std::size_t s = t; s-- > 0;) {
        gx = add(gx, map.vjp_x(iterates[s], x, g));
        g = map.vjp_h(iterates[s], x, g);
    }
    return gx;
}

// Implicit gradient for a probe: run to the fixed point, solve the adjoint
// system by iteration, apply dF/dx.
inline Matrix probe_implicit_grad_x(const IterativeMap& map, const Matrix& x, const Matrix& h0,
                                    const Matrix& grad_y, double tol = 1e-12,
                                    std::size_t max_iters = 500) {
    Matrix h = h0;
    for (std::size_t t = 0; t < 10000; ++t) {
        Matrix next = map.apply(h, x);
        if (frobenius_norm(next) > 1e12)
            throw numeric_error("probe_implicit_grad_x: forward iteration diverged");
        const double delta = frobenius_norm(sub(next, h));
        h = std::move(next);
        if (delta < 1e-14 * (frobenius_norm(h) + 1.0)) break;
    }
    Matrix v = grad_y;
    const double seed_norm = frobenius_norm(grad_y) + 1e-300;
    bool converged = false;
    for (std::size_t it = 0; it < max_iters; ++it) {
        Matrix next = add(grad_y, map.vjp_h(h, x, v));
        const double delta = frobenius_norm(sub(next, v));
        v = std::move(next);
        if (frobenius_norm(v) > 1e12 * seed_norm)
            throw numeric_error("probe_implicit_grad_x: adjoint iteration diverged at iteration " +
                                std::to_string(it));
        if (delta <= tol * (frobenius_norm(v) + 1e-300)) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw numeric_error("probe_implicit_grad_x: adjoint iteration did not converge");
    return map.vjp_x(h, x, v);
}

// JSON form of a GradReport: mode, per-parameter norms, oracle metrics.
inline std::string grad_report_json(const GradReport& rep) {
    std::string s = "{\n  \"mode\": \"" + std::string(grad_mode_name(rep.mode)) + "\",\n";
    s += "  \"grad_norms\": {";
    bool first = true;
    for (const auto& [name, g] : rep.grads) {
        if (!first) s += ", ";
        first = false;
        s += "\"" + name + "\": " + format_double(frobenius_norm(g));
    }
    s += "},\n";
    s += "  \"oracle_max_rel_error\": " + format_double(rep.oracle_max_rel_error) + ",\n";
    s += "  \"oracle_cosine\": " + format_double(rep.oracle_cosine) + "\n}\n";
    return s;
}

}  // namespace hamkit

#endif
