#ifndef HAMKIT_BATCHNORM_HPP
#define HAMKIT_BATCHNORM_HPP

#include <cmath>
#include <stdexcept>
#include <vector>

#include "matrix.hpp"

namespace hamkit {

enum class BnMode { Train, Eval };

// Per-channel batch normalization over a channels x positions matrix.
// running <- momentum * running + (1 - momentum) * batch_stat.
struct BatchNormState {
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.9;
    double epsilon = 1e-5;
    BnMode mode = BnMode::Train;

    BatchNormState() = default;
    explicit BatchNormState(std::size_t channels, double momentum_ = 0.9, double eps = 1e-5)
        : gamma(channels, 1.0),
          beta(channels, 0.0),
          running_mean(channels, 0.0),
          running_var(channels, 1.0),
          momentum(momentum_),
          epsilon(eps) {
        if (!(momentum > 0.0 && momentum < 1.0))
            throw std::invalid_argument("BatchNormState: momentum must be in (0,1)");
        if (!(eps > 0.0)) throw std::invalid_argument("BatchNormState: epsilon must be > 0");
    }

    std::size_t channels() const { return gamma.size(); }
};

struct BatchNormCache {
    Matrix x_hat;                 // standardized input
    std::vector<double> inv_std;  // 1/sqrt(var + eps) per channel
    std::vector<double> gamma;
    bool train_mode = false;
};

inline Matrix batchnorm_forward(const Matrix& x, BatchNormState& state, BatchNormCache* cache = nullptr) {
    const std::size_t r = x.rows, n = x.cols;
    if (r != state.channels())
        throw shape_error("batchnorm_forward: channel count disagrees with state");
    Matrix y(r, n);
    Matrix x_hat(r, n);
    std::vector<double> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mean, var;
        if (state.mode == BnMode::Train) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += x(i, j);
            mean = s / static_cast<double>(n);
            double v = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                double d = x(i, j) - mean;
                v += d * d;
            }
            var = v / static_cast<double>(n);
            state.running_mean[i] = state.momentum * state.running_mean[i] + (1.0 - state.momentum) * mean;
            state.running_var[i] = state.momentum * state.running_var[i] + (1.0 - state.momentum) * var;
        } else {
            mean = state.running_mean[i];
            var = state.running_var[i];
        }
        const double is = 1.0 / std::sqrt(var + state.epsilon);
        inv_std[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (x(i, j) - mean) * is;
            x_hat(i, j) = xh;
            y(i, j) = state.gamma[i] * xh + state.beta[i];
        }
    }
    if (cache) {
        cache->x_hat = std::move(x_hat);
        cache->inv_std = std::move(inv_std);
        cache->gamma = state.gamma;
        cache->train_mode = (state.mode == BnMode::Train);
    }
    check_finite(y, "batchnorm_forward");
    return y;
}

struct BatchNormGrads {
    Matrix grad_in;
    std::vector<double> grad_gamma;
    std::vector<double> grad_beta;
};

inline BatchNormGrads batchnorm_backward(const Matrix& grad_out, const BatchNormCache& cache) {
    if (!cache.train_mode)
        throw std::logic_error("batchnorm_backward: cache was recorded in eval mode");
    const std::size_t r = grad_out.rows, n = grad_out.cols;
    if (r != cache.x_hat.rows || n != cache.x_hat.cols)
        throw shape_error("batchnorm_backward: grad shape disagrees with cache");
    BatchNormGrads g;
    g.grad_in = Matrix(r, n);
    g.grad_gamma.assign(r, 0.0);
    g.grad_beta.assign(r, 0.0);
    const double nn = static_cast<double>(n);
    for (std::size_t i = 0; i < r; ++i) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            sum_dy += grad_out(i, j);
            sum_dy_xhat += grad_out(i, j) * cache.x_hat(i, j);
        }
        g.grad_beta[i] = sum_dy;
        g.grad_gamma[i] = sum_dy_xhat;
        const double k = cache.gamma[i] * cache.inv_std[i] / nn;
        for (std::size_t j = 0; j < n; ++j) {
            g.grad_in(i, j) =
                k * (nn * grad_out(i, j) - sum_dy - cache.x_hat(i, j) * sum_dy_xhat);
        }
    }
    return g;
}

}  // namespace hamkit

#endif
