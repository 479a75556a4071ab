#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "deepace/common.hpp"
#include "deepace/model.hpp"
#include "deepace/rng.hpp"

namespace deepace {

struct TsneConfig {
    double perplexity = 30.0;
    int iterations = 1000;
    double learning_rate = 200.0;
    double early_exaggeration = 12.0;
    int exaggeration_iters = 250;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    int momentum_switch_iter = 250;
    std::uint64_t seed = 0;
};

struct Embedding2D {
    std::vector<std::array<double, 2>> points;  // aligned with the input order
    std::vector<int> labels;
    double kl_post_exaggeration = 0.0;
    double kl_final = 0.0;
    std::vector<double> kl_history;  // KL at the start of each iteration
};

namespace detail {

// Gaussian bandwidth search for one point: binary search on the precision
// beta until the conditional distribution's entropy matches ln(perplexity).
// Energies are shifted by their minimum so large betas cannot underflow
// every term; the entropy is shift-invariant.
inline void conditional_row(const Eigen::VectorXd& sq_dists, double target_entropy,
                            Eigen::VectorXd& row) {
    const Eigen::Index m = sq_dists.size();
    const double shift = sq_dists.minCoeff();
    double beta = 1.0;
    double beta_min = -std::numeric_limits<double>::infinity();
    double beta_max = std::numeric_limits<double>::infinity();
    for (int step = 0; step < 50; ++step) {
        double sum_p = 0.0, sum_ep = 0.0;
        for (Eigen::Index j = 0; j < m; ++j) {
            const double e = sq_dists[j] - shift;
            const double p = std::exp(-beta * e);
            row[j] = p;
            sum_p += p;
            sum_ep += e * p;
        }
        const double entropy = std::log(sum_p) + beta * sum_ep / sum_p;
        const double diff = entropy - target_entropy;
        if (std::abs(diff) <= 1e-5) break;
        if (diff > 0.0) {
            beta_min = beta;
            beta = std::isinf(beta_max) ? beta * 2.0 : 0.5 * (beta + beta_max);
        } else {
            beta_max = beta;
            beta = std::isinf(beta_min) ? beta * 0.5 : 0.5 * (beta + beta_min);
        }
    }
    row /= row.sum();
}

inline std::vector<std::size_t> tsne_canonical_order(
    const std::vector<std::vector<double>>& points, const std::vector<int>& labels) {
    std::vector<std::size_t> order(points.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (points[a] != points[b]) return points[a] < points[b];
        return labels[a] < labels[b];
    });
    return order;
}

}  // namespace detail

// Exact t-SNE: symmetrized Gaussian affinities in the input space, Student-t
// kernel in the plane, gradient descent with early exaggeration, a momentum
// switch, and per-coordinate adaptive gains. Internally samples are visited
// in a canonical sorted order, so the result is equivariant to input order.
inline Embedding2D tsne_embed(const std::vector<std::vector<double>>& points,
                              const std::vector<int>& labels, const TsneConfig& cfg) {
    const std::size_t n = points.size();
    if (labels.size() != n) throw std::invalid_argument("tsne_embed: label count mismatch");
    if (cfg.perplexity <= 0.0) throw std::invalid_argument("tsne_embed: bad perplexity");
    if (cfg.iterations < 250) throw std::invalid_argument("tsne_embed: need >= 250 iterations");
    if (static_cast<double>(n) < 3.0 * cfg.perplexity + 1.0)
        throw std::invalid_argument("tsne_embed: too few points for the perplexity");
    const std::size_t dim = points[0].size();
    for (const auto& p : points) {
        if (p.size() != dim) throw std::invalid_argument("tsne_embed: ragged input");
        for (const double v : p)
            if (!std::isfinite(v)) throw DataError("tsne_embed: non-finite feature value");
    }

    const auto order = detail::tsne_canonical_order(points, labels);
    const Eigen::Index ni = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd X(ni, static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < dim; ++d)
            X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = points[order[i]][d];

    // Pairwise squared distances in the input space.
    const Eigen::VectorXd xnorm = X.rowwise().squaredNorm();
    Eigen::MatrixXd D = (-2.0 * X * X.transpose()).eval();
    D.colwise() += xnorm;
    D.rowwise() += xnorm.transpose();
    D = D.cwiseMax(0.0);

    // Conditional affinities, then the symmetrized joint distribution.
    const double target_entropy = std::log(cfg.perplexity);
    Eigen::MatrixXd Pc = Eigen::MatrixXd::Zero(ni, ni);
    Eigen::VectorXd sq(ni - 1), row(ni - 1);
    for (Eigen::Index i = 0; i < ni; ++i) {
        Eigen::Index k = 0;
        for (Eigen::Index j = 0; j < ni; ++j)
            if (j != i) sq[k++] = D(i, j);
        detail::conditional_row(sq, target_entropy, row);
        k = 0;
        for (Eigen::Index j = 0; j < ni; ++j)
            if (j != i) Pc(i, j) = row[k++];
    }
    Eigen::MatrixXd P = (Pc + Pc.transpose()) / (2.0 * static_cast<double>(n));
    P = P.cwiseMax(1e-12);
    P.diagonal().setZero();
    double sum_p_ln_p = 0.0;
    for (Eigen::Index i = 0; i < ni; ++i)
        for (Eigen::Index j = 0; j < ni; ++j)
            if (j != i) sum_p_ln_p += P(i, j) * std::log(P(i, j));
    const double total_p = P.sum();

    Rng rng(derive_seed(cfg.seed, "tsne"));
    Eigen::MatrixXd Y(ni, 2);
    for (Eigen::Index i = 0; i < ni; ++i)
        for (Eigen::Index d = 0; d < 2; ++d) Y(i, d) = 1e-4 * rng.normal();
    Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(ni, 2);
    Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(ni, 2);

    Embedding2D result;
    result.kl_history.reserve(static_cast<std::size_t>(cfg.iterations) + 1);

    Eigen::MatrixXd Dy(ni, ni), num(ni, ni), W(ni, ni), grad(ni, 2);
    auto evaluate = [&](bool with_gradient, double exaggeration) {
        const Eigen::VectorXd ynorm = Y.rowwise().squaredNorm();
        Dy = (-2.0 * Y * Y.transpose()).eval();
        Dy.colwise() += ynorm;
        Dy.rowwise() += ynorm.transpose();
        Dy = Dy.cwiseMax(0.0);
        num = (1.0 + Dy.array()).inverse().matrix();
        num.diagonal().setZero();
        const double z = num.sum();
        const double kl = sum_p_ln_p + std::log(z) * total_p +
                          (P.array() * (1.0 + Dy.array()).log()).sum();
        if (with_gradient) {
            W = (exaggeration * P - num / z).cwiseProduct(num);
            grad = 4.0 * (W.rowwise().sum().asDiagonal() * Y - W * Y);
        }
        return kl;
    };

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const double exaggeration = iter < cfg.exaggeration_iters ? cfg.early_exaggeration : 1.0;
        const double momentum =
            iter < cfg.momentum_switch_iter ? cfg.initial_momentum : cfg.final_momentum;
        const double kl = evaluate(true, exaggeration);
        if (!std::isfinite(kl)) throw NumericError("tsne_embed: non-finite KL divergence");
        result.kl_history.push_back(kl);
        if (iter == cfg.exaggeration_iters) result.kl_post_exaggeration = kl;
        for (Eigen::Index i = 0; i < ni; ++i)
            for (Eigen::Index d = 0; d < 2; ++d) {
                const bool same_sign = (grad(i, d) > 0.0) == (velocity(i, d) > 0.0);
                gains(i, d) = same_sign ? gains(i, d) * 0.8 : gains(i, d) + 0.2;
                gains(i, d) = std::max(gains(i, d), 0.01);
                velocity(i, d) =
                    momentum * velocity(i, d) - cfg.learning_rate * gains(i, d) * grad(i, d);
            }
        Y += velocity;
        Y.rowwise() -= Y.colwise().mean();
    }
    result.kl_final = evaluate(false, 1.0);
    result.kl_history.push_back(result.kl_final);
    if (cfg.exaggeration_iters >= cfg.iterations) result.kl_post_exaggeration = result.kl_final;

    result.points.resize(n);
    result.labels = labels;
    for (std::size_t i = 0; i < n; ++i)
        result.points[order[i]] = {Y(static_cast<Eigen::Index>(i), 0),
                                   Y(static_cast<Eigen::Index>(i), 1)};
    return result;
}

inline Embedding2D tsne_embed(const std::vector<FeatureVector>& features,
                              const TsneConfig& cfg) {
    std::vector<std::vector<double>> points;
    std::vector<int> labels;
    points.reserve(features.size());
    labels.reserve(features.size());
    for (const auto& f : features) {
        points.push_back(f.values);
        labels.push_back(f.label == SiteLabel::Positive ? 1 : 0);
    }
    return tsne_embed(points, labels, cfg);
}

}  // namespace deepace
