#ifndef HAMKIT_MATRIX_HPP
#define HAMKIT_MATRIX_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace hamkit {

// Epsilon added to every guarded denominator (cosine norms, diag inverse,
// MU rules). Small enough not to perturb fixed points visibly.
inline constexpr double kDenomEps = 1e-8;

class shape_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class numeric_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dense real matrix, row-major, 64-bit entries.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> d)
        : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != rows * cols)
            throw shape_error("Matrix: data length != rows*cols");
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::size_t size() const { return data.size(); }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline void check_finite(const Matrix& m, const char* where) {
    for (double v : m.data)
        if (!std::isfinite(v))
            throw numeric_error(std::string("non-finite entry in ") + where);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw shape_error("matmul: inner dimensions disagree (" +
                          std::to_string(a.cols) + " vs " + std::to_string(b.rows) + ")");
    Matrix c(a.rows, b.cols);
    // i-k-j order keeps the inner loop contiguous in both b and c.
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = &a.data[i * a.cols];
        double* crow = &c.data[i * c.cols];
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = &b.data[k * b.cols];
            for (std::size_t j = 0; j < b.cols; ++j)
                crow[j] += aik * brow[j];
        }
    }
    check_finite(c, "matmul");
    return c;
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j)
            t(j, i) = m(i, j);
    return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw shape_error("add: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw shape_error("sub: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix c = a;
    for (double& v : c.data) v *= s;
    return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw shape_error("hadamard: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] *= b.data[i];
    return c;
}

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return std::sqrt(s);
}

inline double dot_flat(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw shape_error("dot_flat: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double max_abs(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s = std::max(s, std::abs(v));
    return s;
}

inline Matrix relu(const Matrix& m) {
    Matrix c = m;
    for (double& v : c.data) v = v > 0.0 ? v : 0.0;
    return c;
}

// Column-wise softmax of m / temperature, max-subtracted for stability.
inline Matrix column_softmax(const Matrix& m, double temperature) {
    if (!(temperature > 0.0))
        throw std::invalid_argument("column_softmax: temperature must be > 0");
    Matrix out(m.rows, m.cols);
    for (std::size_t j = 0; j < m.cols; ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < m.rows; ++i)
            mx = std::max(mx, m(i, j) / temperature);
        double sum = 0.0;
        for (std::size_t i = 0; i < m.rows; ++i) {
            double e = std::exp(m(i, j) / temperature - mx);
            out(i, j) = e;
            sum += e;
        }
        for (std::size_t i = 0; i < m.rows; ++i) out(i, j) /= sum;
    }
    check_finite(out, "column_softmax");
    return out;
}

inline double column_norm(const Matrix& m, std::size_t j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) s += m(i, j) * m(i, j);
    return std::sqrt(s);
}

// Norm guard: exact for columns with norm above epsilon, total at zero.
inline double guarded_norm(double norm) { return norm > kDenomEps ? norm : kDenomEps; }

// cos(d_i, x_j) = d_i'x_j / (guard(|d_i|) guard(|x_j|)); r x n result.
inline Matrix cosine_similarity(const Matrix& d, const Matrix& x) {
    if (d.rows != x.rows) throw shape_error("cosine_similarity: row counts disagree");
    const std::size_t r = d.cols, n = x.cols;
    std::vector<double> dn(r), xn(n);
    for (std::size_t i = 0; i < r; ++i) dn[i] = guarded_norm(column_norm(d, i));
    for (std::size_t j = 0; j < n; ++j) xn[j] = guarded_norm(column_norm(x, j));
    Matrix g = matmul(transpose(d), x);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j)
            g(i, j) /= dn[i] * xn[j];
    return g;
}

inline Matrix l2_normalize_columns(const Matrix& m) {
    Matrix out = m;
    for (std::size_t j = 0; j < m.cols; ++j) {
        double s = guarded_norm(column_norm(m, j));
        for (std::size_t i = 0; i < m.rows; ++i) out(i, j) /= s;
    }
    return out;
}

// Singular values by one-sided Jacobi on the columns of the wide/tall copy.
// Max 100 sweeps, off-diagonal tolerance 1e-10 relative.
inline std::vector<double> singular_values(const Matrix& m) {
    if (m.rows == 0 || m.cols == 0) return {};
    // Work on a copy with rows >= cols.
    Matrix a = (m.rows >= m.cols) ? m : transpose(m);
    const std::size_t n = a.cols;
    const double scale = frobenius_norm(a);
    if (scale == 0.0) return std::vector<double>(n, 0.0);
    const double tol = 1e-10;
    const int max_sweeps = 100;
    bool converged = false;
    int sweep = 0;
    for (; sweep < max_sweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < a.rows; ++i) {
                    const double vp = a(i, p), vq = a(i, q);
                    app += vp * vp;
                    aqq += vq * vq;
                    apq += vp * vq;
                }
                if (std::abs(apq) <= tol * scale * scale) continue;
                converged = false;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0)
                                     ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                                     : -1.0 / (-tau + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < a.rows; ++i) {
                    const double vp = a(i, p), vq = a(i, q);
                    a(i, p) = c * vp - s * vq;
                    a(i, q) = s * vp + c * vq;
                }
            }
        }
    }
    if (!converged)
        throw numeric_error("singular_values: Jacobi sweep limit reached after " +
                            std::to_string(sweep) + " sweeps");
    std::vector<double> sv(n);
    for (std::size_t j = 0; j < n; ++j) sv[j] = column_norm(a, j);
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    return sv;
}

// Solves A X = B for symmetric positive definite A via Cholesky.
// Throws numeric_error with a condition estimate when A is not SPD.
inline Matrix spd_solve(const Matrix& a, const Matrix& b) {
    if (a.rows != a.cols) throw shape_error("spd_solve: A not square");
    if (a.rows != b.rows) throw shape_error("spd_solve: B row count disagrees");
    const std::size_t n = a.rows;
    Matrix l(n, n);
    double max_diag = 0.0, min_pivot = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)));
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (d <= max_diag * 1e-14) {
            throw numeric_error(
                "spd_solve: matrix not positive definite (pivot " + std::to_string(d) +
                ", condition estimate >= " + std::to_string(max_diag / std::max(d, 1e-300)) + ")");
        }
        min_pivot = std::min(min_pivot, d);
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    // Forward then backward substitution per column of B.
    Matrix x = b;
    for (std::size_t col = 0; col < b.cols; ++col) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, col);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, col);
            x(i, col) = s / l(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = x(ii, col);
            for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, col);
            x(ii, col) = s / l(ii, ii);
        }
    }
    check_finite(x, "spd_solve");
    return x;
}

}  // namespace hamkit

#endif
