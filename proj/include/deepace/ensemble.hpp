#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepace/common.hpp"
#include "deepace/model.hpp"
#include "deepace/rng.hpp"

namespace deepace {

// ---------------------------------------------------------------------------
// Kinds and configuration

enum class EnsembleKind { RandomForest, ExtraTrees, AdaBoost, GradientBoosting, Xgboost };

inline constexpr std::array<EnsembleKind, 5> kAllEnsembleKinds = {
    EnsembleKind::RandomForest, EnsembleKind::ExtraTrees, EnsembleKind::AdaBoost,
    EnsembleKind::GradientBoosting, EnsembleKind::Xgboost};

inline std::string_view ensemble_kind_token(EnsembleKind kind) {
    switch (kind) {
        case EnsembleKind::RandomForest: return "RF";
        case EnsembleKind::ExtraTrees: return "ERT";
        case EnsembleKind::AdaBoost: return "AB";
        case EnsembleKind::GradientBoosting: return "GB";
        case EnsembleKind::Xgboost: return "XGB";
    }
    throw std::invalid_argument("ensemble_kind_token: bad kind");
}

inline std::optional<EnsembleKind> parse_ensemble_kind(std::string_view token) {
    for (const EnsembleKind kind : kAllEnsembleKinds)
        if (token == ensemble_kind_token(kind)) return kind;
    return std::nullopt;
}

struct EnsembleConfig {
    EnsembleKind kind = EnsembleKind::RandomForest;
    int n_trees = 100;
    int max_depth = -1;         // -1 unlimited, 0 forces a single leaf
    double learning_rate = 0.1; // boosters only
    int feature_subsample = 0;  // candidate features per split, 0 means all
    int min_samples_split = 2;
    double lambda = 1.0;  // L2 leaf penalty, XGB only
    double gamma = 0.0;   // minimum split gain, XGB only
    std::uint64_t seed = 0;
};

inline EnsembleConfig default_config(EnsembleKind kind) {
    EnsembleConfig cfg;
    cfg.kind = kind;
    if (kind == EnsembleKind::RandomForest || kind == EnsembleKind::ExtraTrees) {
        cfg.feature_subsample = 8;  // sqrt of the 64-dim feature space
        cfg.max_depth = -1;
    } else {
        cfg.max_depth = 3;
    }
    return cfg;
}

inline void validate_config(const EnsembleConfig& cfg) {
    if (cfg.n_trees < 1) throw std::invalid_argument("ensemble config: n_trees must be >= 1");
    if (cfg.max_depth < -1) throw std::invalid_argument("ensemble config: bad max_depth");
    if (cfg.learning_rate <= 0.0 || cfg.learning_rate > 1.0)
        throw std::invalid_argument("ensemble config: learning_rate must lie in (0,1]");
    if (cfg.min_samples_split < 2)
        throw std::invalid_argument("ensemble config: min_samples_split must be >= 2");
    if (cfg.feature_subsample < 0)
        throw std::invalid_argument("ensemble config: bad feature_subsample");
    if (cfg.lambda < 0.0 || cfg.gamma < 0.0)
        throw std::invalid_argument("ensemble config: lambda and gamma must be >= 0");
}

// ---------------------------------------------------------------------------
// Trees

// Flat node pool in preorder; feature < 0 marks a leaf. Internal nodes route
// x[feature] < threshold to the left child.
struct TreeNode {
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
};

struct Tree {
    std::vector<TreeNode> nodes;
    double weight = 1.0;  // AdaBoost round weight, 1 elsewhere

    double predict(const std::vector<double>& x) const {
        int i = 0;
        while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
            const TreeNode& node = nodes[static_cast<std::size_t>(i)];
            i = x[static_cast<std::size_t>(node.feature)] < node.threshold ? node.left
                                                                           : node.right;
        }
        return nodes[static_cast<std::size_t>(i)].value;
    }
};

struct OobEstimate {
    double error = 0.0;
    long evaluated = 0;  // samples that were out of bag at least once
};

struct EnsembleModel {
    EnsembleConfig config;
    std::vector<Tree> trees;
    double base_score = 0.0;  // boosters' initial log-odds
    int n_features = 0;
    std::optional<OobEstimate> oob;
};

// ---------------------------------------------------------------------------
// Split search

namespace detail {

struct SplitChoice {
    bool found = false;
    int feature = -1;
    double threshold = 0.0;
    double score = 0.0;
};

inline bool better_split(const SplitChoice& cand, const SplitChoice& best) {
    // Strictly greater score wins; scanning features and thresholds in
    // ascending order therefore resolves exact ties to the lowest pair.
    return !best.found || cand.score > best.score;
}

// Candidate feature set for one node, ascending. A zero or full subsample
// means every feature; otherwise a seeded draw without replacement.
inline std::vector<int> candidate_features(int n_features, int subsample, Rng& rng) {
    if (subsample <= 0 || subsample >= n_features) {
        std::vector<int> all(static_cast<std::size_t>(n_features));
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    const auto picked = rng.sample_without_replacement(static_cast<std::size_t>(n_features),
                                                       static_cast<std::size_t>(subsample));
    return std::vector<int>(picked.begin(), picked.end());
}

struct ValueRef {
    double value;
    int index;
};

inline void sort_by_feature(const std::vector<std::vector<double>>& x,
                            const std::vector<int>& idx, int feature,
                            std::vector<ValueRef>& out) {
    out.clear();
    out.reserve(idx.size());
    for (const int i : idx)
        out.push_back({x[static_cast<std::size_t>(i)][static_cast<std::size_t>(feature)], i});
    std::sort(out.begin(), out.end(),
              [](const ValueRef& a, const ValueRef& b) { return a.value < b.value; });
}

inline double gini(double w_pos, double w_total) {
    if (w_total <= 0.0) return 0.0;
    const double p = w_pos / w_total;
    return 2.0 * p * (1.0 - p);
}

// Shared state for the recursive builders.
struct BuildContext {
    const std::vector<std::vector<double>>& x;
    const EnsembleConfig& cfg;
    Rng& rng;
    std::vector<TreeNode>& nodes;
    std::vector<ValueRef> scratch;

    bool depth_allows_split(int depth) const {
        return cfg.max_depth < 0 || depth < cfg.max_depth;
    }
};

inline int emit_leaf(std::vector<TreeNode>& nodes, double value) {
    TreeNode leaf;
    leaf.value = value;
    nodes.push_back(leaf);
    return static_cast<int>(nodes.size()) - 1;
}

inline void partition_indices(const std::vector<std::vector<double>>& x,
                              const std::vector<int>& idx, int feature, double threshold,
                              std::vector<int>& left, std::vector<int>& right) {
    for (const int i : idx) {
        if (x[static_cast<std::size_t>(i)][static_cast<std::size_t>(feature)] < threshold)
            left.push_back(i);
        else
            right.push_back(i);
    }
}

// Weighted Gini tree over {0,1} labels. Trees for the forest variants keep
// the positive-class fraction in each leaf; AdaBoost hardens it to a 0/1
// vote. Extra-trees mode replaces the midpoint scan with one uniform random
// threshold per candidate feature.
inline int build_classification_node(BuildContext& ctx, const std::vector<int>& y,
                                     const std::vector<double>& w, const std::vector<int>& idx,
                                     int depth, bool random_thresholds, bool hard_leaves) {
    double w_pos = 0.0, w_total = 0.0;
    for (const int i : idx) {
        const double wi = w[static_cast<std::size_t>(i)];
        w_total += wi;
        if (y[static_cast<std::size_t>(i)] != 0) w_pos += wi;
    }
    const double fraction = w_total > 0.0 ? w_pos / w_total : 0.0;
    auto leaf_value = [&] { return hard_leaves ? (fraction >= 0.5 ? 1.0 : 0.0) : fraction; };
    const bool pure = w_pos <= 0.0 || w_pos >= w_total;
    if (pure || !ctx.depth_allows_split(depth) ||
        static_cast<int>(idx.size()) < ctx.cfg.min_samples_split)
        return emit_leaf(ctx.nodes, leaf_value());

    const int n_features = static_cast<int>(ctx.x[0].size());
    const auto features = candidate_features(n_features, ctx.cfg.feature_subsample, ctx.rng);
    const double parent = gini(w_pos, w_total);
    SplitChoice best;
    for (const int f : features) {
        sort_by_feature(ctx.x, idx, f, ctx.scratch);
        const auto& sorted = ctx.scratch;
        if (random_thresholds) {
            const double lo = sorted.front().value;
            const double hi = sorted.back().value;
            if (!(lo < hi)) continue;
            const double thr = ctx.rng.uniform(lo, hi);
            if (!(thr > lo)) continue;  // an empty left side is no split
            double wl = 0.0, wl_pos = 0.0;
            for (const auto& s : sorted) {
                if (!(s.value < thr)) break;
                const double wi = w[static_cast<std::size_t>(s.index)];
                wl += wi;
                if (y[static_cast<std::size_t>(s.index)] != 0) wl_pos += wi;
            }
            const double wr = w_total - wl;
            if (wl <= 0.0 || wr <= 0.0) continue;
            const double score = parent - (wl / w_total) * gini(wl_pos, wl) -
                                 (wr / w_total) * gini(w_pos - wl_pos, wr);
            const SplitChoice cand{true, f, thr, score};
            if (better_split(cand, best)) best = cand;
        } else {
            double wl = 0.0, wl_pos = 0.0;
            for (std::size_t s = 0; s + 1 < sorted.size(); ++s) {
                const double wi = w[static_cast<std::size_t>(sorted[s].index)];
                wl += wi;
                if (y[static_cast<std::size_t>(sorted[s].index)] != 0) wl_pos += wi;
                if (!(sorted[s].value < sorted[s + 1].value)) continue;
                const double wr = w_total - wl;
                if (wl <= 0.0 || wr <= 0.0) continue;
                const double thr = 0.5 * (sorted[s].value + sorted[s + 1].value);
                const double score = parent - (wl / w_total) * gini(wl_pos, wl) -
                                     (wr / w_total) * gini(w_pos - wl_pos, wr);
                const SplitChoice cand{true, f, thr, score};
                if (better_split(cand, best)) best = cand;
            }
        }
    }
    if (!best.found || !(best.score > 0.0)) return emit_leaf(ctx.nodes, leaf_value());

    const int self = static_cast<int>(ctx.nodes.size());
    ctx.nodes.emplace_back();
    ctx.nodes[static_cast<std::size_t>(self)].feature = best.feature;
    ctx.nodes[static_cast<std::size_t>(self)].threshold = best.threshold;
    std::vector<int> left_idx, right_idx;
    partition_indices(ctx.x, idx, best.feature, best.threshold, left_idx, right_idx);
    const int left = build_classification_node(ctx, y, w, left_idx, depth + 1,
                                               random_thresholds, hard_leaves);
    const int right = build_classification_node(ctx, y, w, right_idx, depth + 1,
                                                random_thresholds, hard_leaves);
    ctx.nodes[static_cast<std::size_t>(self)].left = left;
    ctx.nodes[static_cast<std::size_t>(self)].right = right;
    return self;
}

// Regression tree with a least-squares structure search over the residuals
// and one Newton step per leaf (sum of residuals over sum of hessians). Used
// by the logistic-loss gradient booster; leaves are stored already shrunk.
inline int build_gb_node(BuildContext& ctx, const std::vector<double>& residual,
                         const std::vector<double>& hessian, const std::vector<int>& idx,
                         int depth) {
    double sum_r = 0.0, sum_r2 = 0.0, sum_h = 0.0;
    for (const int i : idx) {
        const double r = residual[static_cast<std::size_t>(i)];
        sum_r += r;
        sum_r2 += r * r;
        sum_h += hessian[static_cast<std::size_t>(i)];
    }
    const double n_node = static_cast<double>(idx.size());
    auto leaf_value = [&] {
        return ctx.cfg.learning_rate * sum_r / std::max(sum_h, 1e-12);
    };
    if (!ctx.depth_allows_split(depth) ||
        static_cast<int>(idx.size()) < ctx.cfg.min_samples_split)
        return emit_leaf(ctx.nodes, leaf_value());

    const double parent_sse = sum_r2 - sum_r * sum_r / n_node;
    const int n_features = static_cast<int>(ctx.x[0].size());
    const auto features = candidate_features(n_features, ctx.cfg.feature_subsample, ctx.rng);
    SplitChoice best;
    for (const int f : features) {
        sort_by_feature(ctx.x, idx, f, ctx.scratch);
        const auto& sorted = ctx.scratch;
        double nl = 0.0, rl = 0.0, rl2 = 0.0;
        for (std::size_t s = 0; s + 1 < sorted.size(); ++s) {
            const double r = residual[static_cast<std::size_t>(sorted[s].index)];
            nl += 1.0;
            rl += r;
            rl2 += r * r;
            if (!(sorted[s].value < sorted[s + 1].value)) continue;
            const double nr = n_node - nl;
            const double sse_l = rl2 - rl * rl / nl;
            const double rr = sum_r - rl;
            const double sse_r = (sum_r2 - rl2) - rr * rr / nr;
            const SplitChoice cand{true, f, 0.5 * (sorted[s].value + sorted[s + 1].value),
                                   parent_sse - sse_l - sse_r};
            if (better_split(cand, best)) best = cand;
        }
    }
    if (!best.found || !(best.score > 0.0)) return emit_leaf(ctx.nodes, leaf_value());

    const int self = static_cast<int>(ctx.nodes.size());
    ctx.nodes.emplace_back();
    ctx.nodes[static_cast<std::size_t>(self)].feature = best.feature;
    ctx.nodes[static_cast<std::size_t>(self)].threshold = best.threshold;
    std::vector<int> left_idx, right_idx;
    partition_indices(ctx.x, idx, best.feature, best.threshold, left_idx, right_idx);
    const int left = build_gb_node(ctx, residual, hessian, left_idx, depth + 1);
    const int right = build_gb_node(ctx, residual, hessian, right_idx, depth + 1);
    ctx.nodes[static_cast<std::size_t>(self)].left = left;
    ctx.nodes[static_cast<std::size_t>(self)].right = right;
    return self;
}

// Second-order booster tree. Split quality is half the similarity surplus of
// the children over the parent minus gamma, with similarity (sum g)^2 over
// (sum h + lambda); leaf weight is -G/(H + lambda), stored shrunk.
inline int build_xgb_node(BuildContext& ctx, const std::vector<double>& grad,
                          const std::vector<double>& hess, const std::vector<int>& idx,
                          int depth) {
    double sum_g = 0.0, sum_h = 0.0;
    for (const int i : idx) {
        sum_g += grad[static_cast<std::size_t>(i)];
        sum_h += hess[static_cast<std::size_t>(i)];
    }
    auto similarity = [&](double g, double h) { return g * g / (h + ctx.cfg.lambda); };
    auto leaf_value = [&] {
        return ctx.cfg.learning_rate * (-sum_g / (sum_h + ctx.cfg.lambda));
    };
    if (!ctx.depth_allows_split(depth) ||
        static_cast<int>(idx.size()) < ctx.cfg.min_samples_split)
        return emit_leaf(ctx.nodes, leaf_value());

    const double parent_sim = similarity(sum_g, sum_h);
    const int n_features = static_cast<int>(ctx.x[0].size());
    const auto features = candidate_features(n_features, ctx.cfg.feature_subsample, ctx.rng);
    SplitChoice best;
    for (const int f : features) {
        sort_by_feature(ctx.x, idx, f, ctx.scratch);
        const auto& sorted = ctx.scratch;
        double gl = 0.0, hl = 0.0;
        for (std::size_t s = 0; s + 1 < sorted.size(); ++s) {
            gl += grad[static_cast<std::size_t>(sorted[s].index)];
            hl += hess[static_cast<std::size_t>(sorted[s].index)];
            if (!(sorted[s].value < sorted[s + 1].value)) continue;
            const double gain = 0.5 * (similarity(gl, hl) + similarity(sum_g - gl, sum_h - hl) -
                                       parent_sim) -
                                ctx.cfg.gamma;
            const SplitChoice cand{true, f, 0.5 * (sorted[s].value + sorted[s + 1].value),
                                   gain};
            if (better_split(cand, best)) best = cand;
        }
    }
    if (!best.found || !(best.score > 0.0)) return emit_leaf(ctx.nodes, leaf_value());

    const int self = static_cast<int>(ctx.nodes.size());
    ctx.nodes.emplace_back();
    ctx.nodes[static_cast<std::size_t>(self)].feature = best.feature;
    ctx.nodes[static_cast<std::size_t>(self)].threshold = best.threshold;
    std::vector<int> left_idx, right_idx;
    partition_indices(ctx.x, idx, best.feature, best.threshold, left_idx, right_idx);
    const int left = build_xgb_node(ctx, grad, hess, left_idx, depth + 1);
    const int right = build_xgb_node(ctx, grad, hess, right_idx, depth + 1);
    ctx.nodes[static_cast<std::size_t>(self)].left = left;
    ctx.nodes[static_cast<std::size_t>(self)].right = right;
    return self;
}

// Canonical training order: samples sorted by feature vector, then label.
// Per-tree randomness is keyed to the tree index, so fits are invariant to
// the order the caller presents the samples in.
inline std::vector<std::size_t> canonical_order(const std::vector<std::vector<double>>& x,
                                                const std::vector<int>& y) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (x[a] != x[b]) return x[a] < x[b];
        return y[a] < y[b];
    });
    return order;
}

inline double log_odds(double p) {
    const double clipped = std::min(1.0 - 1e-12, std::max(1e-12, p));
    return std::log(clipped / (1.0 - clipped));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fitting

inline EnsembleModel fit_ensemble(const std::vector<std::vector<double>>& features,
                                  const std::vector<int>& labels, const EnsembleConfig& cfg) {
    validate_config(cfg);
    if (features.empty()) throw DataError("fit_ensemble: empty features");
    if (features.size() != labels.size())
        throw std::invalid_argument("fit_ensemble: feature/label size mismatch");
    const std::size_t n_features = features[0].size();
    if (n_features == 0) throw DataError("fit_ensemble: zero-width features");
    for (const auto& row : features)
        if (row.size() != n_features)
            throw std::invalid_argument("fit_ensemble: ragged feature rows");
    long n_pos = 0;
    for (const int label : labels)
        if (label != 0) ++n_pos;
    if (n_pos == 0 || n_pos == static_cast<long>(labels.size()))
        throw DataError("fit_ensemble: training data contains a single class");

    const auto order = detail::canonical_order(features, labels);
    const std::size_t n = features.size();
    std::vector<std::vector<double>> x(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = features[order[i]];
        y[i] = labels[order[i]] != 0 ? 1 : 0;
    }

    EnsembleModel model;
    model.config = cfg;
    model.n_features = static_cast<int>(n_features);

    std::vector<int> all_idx(n);
    std::iota(all_idx.begin(), all_idx.end(), 0);

    switch (cfg.kind) {
        case EnsembleKind::RandomForest: {
            const std::vector<double> unit(n, 1.0);
            std::vector<std::vector<bool>> in_bag;
            in_bag.reserve(static_cast<std::size_t>(cfg.n_trees));
            for (int t = 0; t < cfg.n_trees; ++t) {
                Rng rng(derive_seed(cfg.seed, "bootstrap", static_cast<std::uint64_t>(t)));
                std::vector<int> bag(n);
                std::vector<bool> mask(n, false);
                for (std::size_t i = 0; i < n; ++i) {
                    const auto pick = rng.below(n);
                    bag[i] = static_cast<int>(pick);
                    mask[pick] = true;
                }
                Tree tree;
                detail::BuildContext ctx{x, cfg, rng, tree.nodes, {}};
                detail::build_classification_node(ctx, y, unit, bag, 0, false, false);
                model.trees.push_back(std::move(tree));
                in_bag.push_back(std::move(mask));
            }
            long evaluated = 0, wrong = 0;
            for (std::size_t i = 0; i < n; ++i) {
                long votes = 0, positive = 0;
                for (int t = 0; t < cfg.n_trees; ++t) {
                    if (in_bag[static_cast<std::size_t>(t)][i]) continue;
                    ++votes;
                    if (model.trees[static_cast<std::size_t>(t)].predict(x[i]) >= 0.5)
                        ++positive;
                }
                if (votes == 0) continue;
                ++evaluated;
                const int pred = 2 * positive >= votes ? 1 : 0;
                if (pred != y[i]) ++wrong;
            }
            OobEstimate oob;
            oob.evaluated = evaluated;
            oob.error = evaluated > 0
                            ? static_cast<double>(wrong) / static_cast<double>(evaluated)
                            : 0.0;
            model.oob = oob;
            break;
        }
        case EnsembleKind::ExtraTrees: {
            const std::vector<double> unit(n, 1.0);
            for (int t = 0; t < cfg.n_trees; ++t) {
                Rng rng(derive_seed(cfg.seed, "bootstrap", static_cast<std::uint64_t>(t)));
                Tree tree;
                detail::BuildContext ctx{x, cfg, rng, tree.nodes, {}};
                detail::build_classification_node(ctx, y, unit, all_idx, 0, true, false);
                model.trees.push_back(std::move(tree));
            }
            break;
        }
        case EnsembleKind::AdaBoost: {
            std::vector<double> w(n, 1.0 / static_cast<double>(n));
            for (int t = 0; t < cfg.n_trees; ++t) {
                Rng rng(derive_seed(cfg.seed, "bootstrap", static_cast<std::uint64_t>(t)));
                Tree tree;
                detail::BuildContext ctx{x, cfg, rng, tree.nodes, {}};
                detail::build_classification_node(ctx, y, w, all_idx, 0, false, true);
                double err = 0.0;
                std::vector<int> pred(n);
                for (std::size_t i = 0; i < n; ++i) {
                    pred[i] = tree.predict(x[i]) >= 0.5 ? 1 : 0;
                    if (pred[i] != y[i]) err += w[i];
                }
                if (err >= 0.5) break;  // weak learner no better than chance
                const double floor = 1e-12;
                tree.weight = 0.5 * std::log((1.0 - std::max(err, floor)) /
                                             std::max(err, floor));
                model.trees.push_back(std::move(tree));
                if (err <= 0.0) break;  // perfect fit, later rounds add nothing
                double total = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    w[i] *= std::exp(pred[i] != y[i] ? tree.weight : -tree.weight);
                    total += w[i];
                }
                for (auto& wi : w) wi /= total;
            }
            break;
        }
        case EnsembleKind::GradientBoosting: {
            model.base_score =
                detail::log_odds(static_cast<double>(n_pos) / static_cast<double>(n));
            std::vector<double> score(n, model.base_score);
            std::vector<double> residual(n), hessian(n);
            for (int t = 0; t < cfg.n_trees; ++t) {
                Rng rng(derive_seed(cfg.seed, "bootstrap", static_cast<std::uint64_t>(t)));
                for (std::size_t i = 0; i < n; ++i) {
                    const double p = sigmoid(score[i]);
                    residual[i] = static_cast<double>(y[i]) - p;
                    hessian[i] = p * (1.0 - p);
                }
                Tree tree;
                detail::BuildContext ctx{x, cfg, rng, tree.nodes, {}};
                detail::build_gb_node(ctx, residual, hessian, all_idx, 0);
                for (std::size_t i = 0; i < n; ++i) score[i] += tree.predict(x[i]);
                model.trees.push_back(std::move(tree));
            }
            break;
        }
        case EnsembleKind::Xgboost: {
            model.base_score =
                detail::log_odds(static_cast<double>(n_pos) / static_cast<double>(n));
            std::vector<double> score(n, model.base_score);
            std::vector<double> grad(n), hess(n);
            for (int t = 0; t < cfg.n_trees; ++t) {
                Rng rng(derive_seed(cfg.seed, "bootstrap", static_cast<std::uint64_t>(t)));
                for (std::size_t i = 0; i < n; ++i) {
                    const double p = sigmoid(score[i]);
                    grad[i] = p - static_cast<double>(y[i]);
                    hess[i] = p * (1.0 - p);
                }
                Tree tree;
                detail::BuildContext ctx{x, cfg, rng, tree.nodes, {}};
                detail::build_xgb_node(ctx, grad, hess, all_idx, 0);
                for (std::size_t i = 0; i < n; ++i) score[i] += tree.predict(x[i]);
                model.trees.push_back(std::move(tree));
            }
            break;
        }
    }
    return model;
}

inline std::vector<std::vector<double>> feature_matrix(
    const std::vector<FeatureVector>& features) {
    std::vector<std::vector<double>> x;
    x.reserve(features.size());
    for (const auto& f : features) x.push_back(f.values);
    return x;
}

inline std::vector<int> feature_labels(const std::vector<FeatureVector>& features) {
    std::vector<int> y;
    y.reserve(features.size());
    for (const auto& f : features) y.push_back(f.label == SiteLabel::Positive ? 1 : 0);
    return y;
}

inline EnsembleModel fit_ensemble(const std::vector<FeatureVector>& features,
                                  const EnsembleConfig& cfg) {
    return fit_ensemble(feature_matrix(features), feature_labels(features), cfg);
}

// ---------------------------------------------------------------------------
// Prediction

inline double predict_one(const EnsembleModel& model, const std::vector<double>& x) {
    if (model.n_features == 0) throw std::invalid_argument("predict: unfitted model");
    if (static_cast<int>(x.size()) != model.n_features)
        throw std::invalid_argument("predict: feature dimension mismatch");
    switch (model.config.kind) {
        case EnsembleKind::RandomForest:
        case EnsembleKind::ExtraTrees: {
            double sum = 0.0;
            for (const auto& tree : model.trees) sum += tree.predict(x);
            return sum / static_cast<double>(model.trees.size());
        }
        case EnsembleKind::AdaBoost: {
            double margin = 0.0;
            for (const auto& tree : model.trees)
                margin += tree.weight * (2.0 * tree.predict(x) - 1.0);
            return sigmoid(2.0 * margin);
        }
        case EnsembleKind::GradientBoosting:
        case EnsembleKind::Xgboost: {
            double score = model.base_score;
            for (const auto& tree : model.trees) score += tree.predict(x);
            return sigmoid(score);
        }
    }
    throw std::invalid_argument("predict: bad kind");
}

inline std::vector<double> predict_proba(const EnsembleModel& model,
                                         const std::vector<std::vector<double>>& features) {
    std::vector<double> probs;
    probs.reserve(features.size());
    for (const auto& row : features) probs.push_back(predict_one(model, row));
    return probs;
}

inline std::vector<double> predict_proba(const EnsembleModel& model,
                                         const std::vector<FeatureVector>& features) {
    return predict_proba(model, feature_matrix(features));
}

inline OobEstimate oob_error(const EnsembleModel& model) {
    if (model.config.kind != EnsembleKind::RandomForest || !model.oob.has_value())
        throw std::invalid_argument("oob_error: only random forests carry an OOB estimate");
    return *model.oob;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr std::string_view kEnsembleFormatTag = "deepace-ensemble 1";

namespace detail {

inline void write_subtree(const Tree& tree, int node_index, std::string& out) {
    const TreeNode& node = tree.nodes[static_cast<std::size_t>(node_index)];
    if (node.feature < 0) {
        out += " L ";
        out += format_double(node.value);
        return;
    }
    out += " I ";
    out += std::to_string(node.feature);
    out += ' ';
    out += format_double(node.threshold);
    write_subtree(tree, node.left, out);
    write_subtree(tree, node.right, out);
}

inline int read_subtree(const std::vector<std::string_view>& tokens, std::size_t& pos,
                        std::vector<TreeNode>& nodes) {
    if (pos >= tokens.size()) throw DataError("ensemble file: truncated tree encoding");
    const std::string_view tag = tokens[pos++];
    if (tag == "L") {
        if (pos >= tokens.size()) throw DataError("ensemble file: truncated leaf");
        TreeNode leaf;
        leaf.value = parse_double(tokens[pos++], "leaf value");
        nodes.push_back(leaf);
        return static_cast<int>(nodes.size()) - 1;
    }
    if (tag != "I") throw DataError("ensemble file: bad node tag");
    if (pos + 1 >= tokens.size()) throw DataError("ensemble file: truncated internal node");
    const int self = static_cast<int>(nodes.size());
    nodes.emplace_back();
    nodes[static_cast<std::size_t>(self)].feature =
        static_cast<int>(parse_int(tokens[pos++], "node feature"));
    nodes[static_cast<std::size_t>(self)].threshold = parse_double(tokens[pos++], "threshold");
    const int left = read_subtree(tokens, pos, nodes);
    const int right = read_subtree(tokens, pos, nodes);
    nodes[static_cast<std::size_t>(self)].left = left;
    nodes[static_cast<std::size_t>(self)].right = right;
    return self;
}

}  // namespace detail

inline std::string serialize_ensemble(const EnsembleModel& model) {
    std::string out;
    out += kEnsembleFormatTag;
    out += '\n';
    auto kv = [&out](std::string_view key, const std::string& value) {
        out += key;
        out += ' ';
        out += value;
        out += '\n';
    };
    kv("kind", std::string(ensemble_kind_token(model.config.kind)));
    kv("n_trees", std::to_string(model.config.n_trees));
    kv("max_depth", std::to_string(model.config.max_depth));
    kv("learning_rate", format_double(model.config.learning_rate));
    kv("feature_subsample", std::to_string(model.config.feature_subsample));
    kv("min_samples_split", std::to_string(model.config.min_samples_split));
    kv("lambda", format_double(model.config.lambda));
    kv("gamma", format_double(model.config.gamma));
    kv("seed", std::to_string(model.config.seed));
    kv("n_features", std::to_string(model.n_features));
    kv("base_score", format_double(model.base_score));
    if (model.oob.has_value())
        kv("oob", format_double(model.oob->error) + " " + std::to_string(model.oob->evaluated));
    kv("trees", std::to_string(model.trees.size()));
    for (const auto& tree : model.trees) {
        out += "tree ";
        out += format_double(tree.weight);
        detail::write_subtree(tree, 0, out);
        out += '\n';
    }
    out += "end\n";
    return out;
}

inline EnsembleModel load_ensemble(std::string_view text) {
    const auto lines = split_lines(text);
    if (lines.empty() || trim(lines[0]) != kEnsembleFormatTag)
        throw DataError("ensemble file: unsupported format version");
    EnsembleModel model;
    std::size_t ln = 1;
    std::map<std::string, std::string, std::less<>> kv;
    for (; ln < lines.size(); ++ln) {
        const std::string_view line = trim(lines[ln]);
        if (line.rfind("tree ", 0) == 0 || line == "end") break;
        const auto sp = line.find(' ');
        if (sp == std::string_view::npos)
            throw DataError("ensemble file: malformed line '" + std::string(line) + "'");
        kv[std::string(line.substr(0, sp))] = std::string(trim(line.substr(sp + 1)));
    }
    auto need = [&kv](const std::string& key) -> const std::string& {
        const auto it = kv.find(key);
        if (it == kv.end()) throw DataError("ensemble file: missing key '" + key + "'");
        return it->second;
    };
    const auto kind = parse_ensemble_kind(need("kind"));
    if (!kind.has_value()) throw DataError("ensemble file: unknown kind '" + need("kind") + "'");
    model.config.kind = *kind;
    model.config.n_trees = static_cast<int>(parse_int(need("n_trees"), "n_trees"));
    model.config.max_depth = static_cast<int>(parse_int(need("max_depth"), "max_depth"));
    model.config.learning_rate = parse_double(need("learning_rate"), "learning_rate");
    model.config.feature_subsample =
        static_cast<int>(parse_int(need("feature_subsample"), "feature_subsample"));
    model.config.min_samples_split =
        static_cast<int>(parse_int(need("min_samples_split"), "min_samples_split"));
    model.config.lambda = parse_double(need("lambda"), "lambda");
    model.config.gamma = parse_double(need("gamma"), "gamma");
    model.config.seed = parse_uint64(need("seed"), "seed");
    model.n_features = static_cast<int>(parse_int(need("n_features"), "n_features"));
    model.base_score = parse_double(need("base_score"), "base_score");
    if (const auto it = kv.find("oob"); it != kv.end()) {
        const auto parts = split(it->second, ' ');
        if (parts.size() != 2) throw DataError("ensemble file: malformed oob line");
        OobEstimate oob;
        oob.error = parse_double(parts[0], "oob error");
        oob.evaluated = parse_int(parts[1], "oob evaluated");
        model.oob = oob;
    }
    const auto tree_count = parse_int(need("trees"), "trees");
    bool saw_end = false;
    for (; ln < lines.size(); ++ln) {
        const std::string_view line = trim(lines[ln]);
        if (line.empty()) continue;
        if (line == "end") {
            saw_end = true;
            break;
        }
        auto tokens = split(line, ' ');
        if (tokens.size() < 2 || tokens[0] != "tree")
            throw DataError("ensemble file: expected tree line");
        Tree tree;
        tree.weight = parse_double(tokens[1], "tree weight");
        std::size_t pos = 2;
        detail::read_subtree(tokens, pos, tree.nodes);
        if (pos != tokens.size()) throw DataError("ensemble file: trailing tree tokens");
        model.trees.push_back(std::move(tree));
    }
    if (!saw_end) throw DataError("ensemble file: missing end marker");
    if (static_cast<long long>(model.trees.size()) != tree_count)
        throw DataError("ensemble file: tree count mismatch");
    return model;
}

}  // namespace deepace
