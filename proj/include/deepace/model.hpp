#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepace/common.hpp"
#include "deepace/corpus.hpp"
#include "deepace/rng.hpp"

namespace deepace {

// ---------------------------------------------------------------------------
// Tokenization

// The 20 amino acids map alphabetically to 1..20; pad and unknown letters to 0.
struct Vocabulary {
    static constexpr int kSize = 21;

    int index_of(char c) const {
        const auto pos = kAminoAcids.find(c);
        return pos == std::string_view::npos ? 0 : static_cast<int>(pos) + 1;
    }
    char token_of(int index) const {
        return index <= 0 || index > 20 ? kPadToken
                                        : kAminoAcids[static_cast<std::size_t>(index - 1)];
    }
};

inline std::vector<int> encode_window(const PeptideWindow& window, const Vocabulary& vocab) {
    std::vector<int> tokens;
    tokens.reserve(window.residues.size());
    for (const char c : window.residues) tokens.push_back(vocab.index_of(c));
    return tokens;
}

// ---------------------------------------------------------------------------
// Configuration and parameters

struct ModelConfig {
    int window_len = kWindowLength;
    int embed_dim = 128;
    int hidden_dim = 64;
    double dropout_rate = 0.2;
    int batch_size = 128;
    int patience = 3;
    int max_epochs = 100;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double validation_frac = 0.1;
    bool use_gate_bias = false;  // the gate equations carry no bias; opt-in only
    std::uint64_t seed = 0;
};

enum Gate { kGateCandidate = 0, kGateInput = 1, kGateForget = 2, kGateOutput = 3 };
inline constexpr std::array<std::string_view, 4> kGateNames = {"candidate", "input",
                                                               "forget", "output"};

struct LstmParameters {
    Eigen::MatrixXd embedding;                 // vocab x embed
    std::array<Eigen::MatrixXd, 4> w_in;       // hidden x embed, per gate
    std::array<Eigen::MatrixXd, 4> u_rec;      // hidden x hidden, per gate
    std::array<Eigen::VectorXd, 4> gate_bias;  // hidden, empty unless enabled
    Eigen::VectorXd head_w;                    // hidden
    double head_b = 0.0;

    // Flat views over every tensor, in a fixed order. Shared by the Adam
    // update, serialization, and the finite-difference harness.
    std::vector<std::pair<double*, std::size_t>> tensor_views() {
        std::vector<std::pair<double*, std::size_t>> views;
        views.emplace_back(embedding.data(), static_cast<std::size_t>(embedding.size()));
        for (auto& m : w_in) views.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
        for (auto& m : u_rec) views.emplace_back(m.data(), static_cast<std::size_t>(m.size()));
        for (auto& v : gate_bias)
            if (v.size() > 0) views.emplace_back(v.data(), static_cast<std::size_t>(v.size()));
        views.emplace_back(head_w.data(), static_cast<std::size_t>(head_w.size()));
        views.emplace_back(&head_b, 1);
        return views;
    }

    void set_zero() {
        for (auto& [ptr, n] : tensor_views())
            for (std::size_t i = 0; i < n; ++i) ptr[i] = 0.0;
    }
};

inline LstmParameters zero_parameters(const ModelConfig& cfg) {
    LstmParameters p;
    p.embedding = Eigen::MatrixXd::Zero(Vocabulary::kSize, cfg.embed_dim);
    for (auto& m : p.w_in) m = Eigen::MatrixXd::Zero(cfg.hidden_dim, cfg.embed_dim);
    for (auto& m : p.u_rec) m = Eigen::MatrixXd::Zero(cfg.hidden_dim, cfg.hidden_dim);
    if (cfg.use_gate_bias)
        for (auto& v : p.gate_bias) v = Eigen::VectorXd::Zero(cfg.hidden_dim);
    p.head_w = Eigen::VectorXd::Zero(cfg.hidden_dim);
    p.head_b = 0.0;
    return p;
}

// Weights uniform in (-0.05, 0.05); biases start at zero.
inline LstmParameters init_parameters(const ModelConfig& cfg, Rng& rng) {
    LstmParameters p = zero_parameters(cfg);
    auto fill = [&rng](Eigen::MatrixXd& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-0.05, 0.05);
    };
    fill(p.embedding);
    for (auto& m : p.w_in) fill(m);
    for (auto& m : p.u_rec) fill(m);
    for (Eigen::Index i = 0; i < p.head_w.size(); ++i) p.head_w[i] = rng.uniform(-0.05, 0.05);
    return p;
}

// ---------------------------------------------------------------------------
// Cell step

struct LstmState {
    Eigen::VectorXd h;
    Eigen::VectorXd c;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace detail {

struct CellActivations {
    Eigen::VectorXd ctilde, gi, gf, go, c, h;
};

inline Eigen::VectorXd gate_preactivation(const LstmParameters& p, int gate,
                                          const Eigen::VectorXd& x,
                                          const Eigen::VectorXd& h_prev) {
    Eigen::VectorXd a = p.w_in[static_cast<std::size_t>(gate)] * x +
                        p.u_rec[static_cast<std::size_t>(gate)] * h_prev;
    if (p.gate_bias[static_cast<std::size_t>(gate)].size() > 0)
        a += p.gate_bias[static_cast<std::size_t>(gate)];
    return a;
}

inline CellActivations cell_forward(const Eigen::VectorXd& x, const LstmState& prev,
                                    const LstmParameters& params) {
    CellActivations act;
    act.ctilde = gate_preactivation(params, kGateCandidate, x, prev.h).array().tanh().matrix();
    act.gi = gate_preactivation(params, kGateInput, x, prev.h)
                 .unaryExpr([](double v) { return sigmoid(v); });
    act.gf = gate_preactivation(params, kGateForget, x, prev.h)
                 .unaryExpr([](double v) { return sigmoid(v); });
    act.go = gate_preactivation(params, kGateOutput, x, prev.h)
                 .unaryExpr([](double v) { return sigmoid(v); });
    act.c = act.gi.cwiseProduct(act.ctilde) + act.gf.cwiseProduct(prev.c);
    act.h = act.go.cwiseProduct(act.c.array().tanh().matrix());
    return act;
}

}  // namespace detail

// One step of the gated recurrence: candidate through tanh, the three gates
// through the logistic function, memory mixed by input and forget gates,
// output gate applied to tanh of the new memory. No bias terms by default.
inline LstmState lstm_cell_step(const Eigen::VectorXd& x, const LstmState& prev,
                                const LstmParameters& params) {
    if (x.size() != params.w_in[0].cols() || prev.h.size() != params.u_rec[0].cols() ||
        prev.c.size() != prev.h.size())
        throw std::invalid_argument("lstm_cell_step: shape mismatch");
    auto act = detail::cell_forward(x, prev, params);
    return {std::move(act.h), std::move(act.c)};
}

// ---------------------------------------------------------------------------
// Forward pass

// Inverted-dropout scale factors: each entry is 0 or 1/(1-rate), so inference
// needs no rescaling. Inactive masks mean the identity.
struct DropoutMasks {
    Eigen::MatrixXd embed;    // embed_dim x window_len
    Eigen::VectorXd feature;  // hidden_dim
    bool active = false;
};

inline DropoutMasks sample_dropout_masks(const ModelConfig& cfg, Rng& rng) {
    DropoutMasks masks;
    if (cfg.dropout_rate <= 0.0) return masks;
    const double keep = 1.0 - cfg.dropout_rate;
    const double scale = 1.0 / keep;
    masks.embed = Eigen::MatrixXd(cfg.embed_dim, cfg.window_len);
    for (int t = 0; t < cfg.window_len; ++t)
        for (int e = 0; e < cfg.embed_dim; ++e)
            masks.embed(e, t) = rng.uniform() < keep ? scale : 0.0;
    masks.feature = Eigen::VectorXd(cfg.hidden_dim);
    for (int j = 0; j < cfg.hidden_dim; ++j)
        masks.feature[j] = rng.uniform() < keep ? scale : 0.0;
    masks.active = true;
    return masks;
}

// Per-step intermediates kept for backpropagation through time. Matrices hold
// one column per step.
struct ForwardCache {
    std::vector<int> tokens;
    Eigen::MatrixXd x;                        // embed_dim x T, post-dropout inputs
    Eigen::MatrixXd ctilde, gi, gf, go, c, h;  // hidden_dim x T
    Eigen::VectorXd feature;                  // post-dropout final hidden state
    double logit = 0.0;
    double prob = 0.0;
    const DropoutMasks* masks = nullptr;
};

// Embeds the token sequence, runs the recurrence from a zero state, and maps
// the final hidden state through the sigmoid head. Passing masks gives the
// training-mode pass; nullptr gives the deterministic inference pass whose
// pre-head vector is the extracted deep representation.
inline void forward_sequence(const std::vector<int>& tokens, const LstmParameters& params,
                             const ModelConfig& cfg, const DropoutMasks* masks,
                             ForwardCache& cache) {
    const int T = cfg.window_len;
    if (static_cast<int>(tokens.size()) != T)
        throw std::invalid_argument("forward_sequence: expected " + std::to_string(T) +
                                    " tokens, got " + std::to_string(tokens.size()));
    const int H = cfg.hidden_dim;
    const int E = cfg.embed_dim;
    const bool dropped = masks != nullptr && masks->active;
    cache.tokens = tokens;
    cache.masks = dropped ? masks : nullptr;
    cache.x.resize(E, T);
    cache.ctilde.resize(H, T);
    cache.gi.resize(H, T);
    cache.gf.resize(H, T);
    cache.go.resize(H, T);
    cache.c.resize(H, T);
    cache.h.resize(H, T);
    LstmState state{Eigen::VectorXd::Zero(H), Eigen::VectorXd::Zero(H)};
    for (int t = 0; t < T; ++t) {
        Eigen::VectorXd x = params.embedding.row(tokens[static_cast<std::size_t>(t)]).transpose();
        if (dropped) x = x.cwiseProduct(masks->embed.col(t));
        cache.x.col(t) = x;
        auto act = detail::cell_forward(x, state, params);
        cache.ctilde.col(t) = act.ctilde;
        cache.gi.col(t) = act.gi;
        cache.gf.col(t) = act.gf;
        cache.go.col(t) = act.go;
        cache.c.col(t) = act.c;
        cache.h.col(t) = act.h;
        state.h = std::move(act.h);
        state.c = std::move(act.c);
    }
    cache.feature = dropped ? state.h.cwiseProduct(masks->feature).eval() : state.h;
    cache.logit = params.head_w.dot(cache.feature) + params.head_b;
    cache.prob = sigmoid(cache.logit);
}

inline double infer_probability(const std::vector<int>& tokens, const LstmParameters& params,
                                const ModelConfig& cfg) {
    ForwardCache cache;
    forward_sequence(tokens, params, cfg, nullptr, cache);
    return cache.prob;
}

// ---------------------------------------------------------------------------
// Loss and gradients

inline constexpr double kProbabilityClip = 1e-7;

// Mean binary cross-entropy with probabilities clipped away from 0 and 1.
inline double bce_loss(const std::vector<double>& probabilities,
                       const std::vector<int>& labels) {
    if (probabilities.size() != labels.size() || probabilities.empty())
        throw std::invalid_argument("bce_loss: bad input sizes");
    double total = 0.0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        const double p =
            std::min(1.0 - kProbabilityClip, std::max(kProbabilityClip, probabilities[i]));
        total += labels[i] != 0 ? -std::log(p) : -std::log1p(-p);
    }
    return total / static_cast<double>(probabilities.size());
}

// Accumulates the gradient of this sample's (unaveraged) cross-entropy into
// `grad`, covering the head, both dropout masks, all four gates, the
// recurrent memory chain, and the embedding rows the sample touched.
inline void backward_gradients(const ForwardCache& cache, int label,
                               const LstmParameters& params, const ModelConfig& cfg,
                               LstmParameters& grad) {
    const int T = cfg.window_len;
    if (static_cast<int>(cache.tokens.size()) != T)
        throw std::invalid_argument("backward_gradients: cache/config mismatch");
    const double dlogit = cache.prob - (label != 0 ? 1.0 : 0.0);
    grad.head_b += dlogit;
    grad.head_w += dlogit * cache.feature;
    Eigen::VectorXd dfeature = dlogit * params.head_w;
    Eigen::VectorXd dh = cache.masks != nullptr
                             ? dfeature.cwiseProduct(cache.masks->feature).eval()
                             : std::move(dfeature);
    Eigen::VectorXd dc = Eigen::VectorXd::Zero(cfg.hidden_dim);
    for (int t = T - 1; t >= 0; --t) {
        const auto ct = cache.c.col(t);
        const auto it = cache.gi.col(t);
        const auto ft = cache.gf.col(t);
        const auto ot = cache.go.col(t);
        const auto cand = cache.ctilde.col(t);
        const Eigen::VectorXd u = ct.array().tanh().matrix();
        dc += dh.cwiseProduct(ot).cwiseProduct(
            (1.0 - u.array().square()).matrix());
        const Eigen::VectorXd da_o =
            dh.cwiseProduct(u).cwiseProduct(ot).cwiseProduct((1.0 - ot.array()).matrix());
        const Eigen::VectorXd da_c =
            dc.cwiseProduct(it).cwiseProduct((1.0 - cand.array().square()).matrix());
        const Eigen::VectorXd da_i =
            dc.cwiseProduct(cand).cwiseProduct(it).cwiseProduct((1.0 - it.array()).matrix());
        Eigen::VectorXd da_f;
        if (t > 0)
            da_f = dc.cwiseProduct(cache.c.col(t - 1))
                       .cwiseProduct(ft)
                       .cwiseProduct((1.0 - ft.array()).matrix());
        else
            da_f = Eigen::VectorXd::Zero(cfg.hidden_dim);
        const std::array<const Eigen::VectorXd*, 4> das = {&da_c, &da_i, &da_f, &da_o};
        const auto xt = cache.x.col(t);
        Eigen::VectorXd dx = Eigen::VectorXd::Zero(cfg.embed_dim);
        Eigen::VectorXd dh_prev = Eigen::VectorXd::Zero(cfg.hidden_dim);
        for (int g = 0; g < 4; ++g) {
            const auto gi = static_cast<std::size_t>(g);
            grad.w_in[gi].noalias() += *das[gi] * xt.transpose();
            if (t > 0) grad.u_rec[gi].noalias() += *das[gi] * cache.h.col(t - 1).transpose();
            if (grad.gate_bias[gi].size() > 0) grad.gate_bias[gi] += *das[gi];
            dx.noalias() += params.w_in[gi].transpose() * *das[gi];
            dh_prev.noalias() += params.u_rec[gi].transpose() * *das[gi];
        }
        dc = dc.cwiseProduct(ft);
        dh = std::move(dh_prev);
        if (cache.masks != nullptr) dx = dx.cwiseProduct(cache.masks->embed.col(t));
        grad.embedding.row(cache.tokens[static_cast<std::size_t>(t)]) += dx.transpose();
    }
}

// ---------------------------------------------------------------------------
// Optimizer and training loop

struct TrainingState {
    LstmParameters m, v;  // Adam moment accumulators
    long step = 0;
    double best_validation_loss = std::numeric_limits<double>::infinity();
    int epochs_without_improvement = 0;
    int best_epoch = -1;
    std::vector<double> train_loss_history;
    std::vector<double> validation_loss_history;
};

// Bias-corrected Adam step.
inline void adam_update(LstmParameters& params, LstmParameters& grads, TrainingState& state,
                        const ModelConfig& cfg) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    auto pv = params.tensor_views();
    auto gv = grads.tensor_views();
    auto mv = state.m.tensor_views();
    auto vv = state.v.tensor_views();
    if (pv.size() != gv.size() || pv.size() != mv.size() || pv.size() != vv.size())
        throw std::invalid_argument("adam_update: tensor layout mismatch");
    for (std::size_t k = 0; k < pv.size(); ++k) {
        if (pv[k].second != gv[k].second)
            throw std::invalid_argument("adam_update: tensor shape mismatch");
        double* p = pv[k].first;
        const double* g = gv[k].first;
        double* m = mv[k].first;
        double* v = vv[k].first;
        for (std::size_t i = 0; i < pv[k].second; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            p[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.epsilon);
        }
    }
}

struct TrainResult {
    LstmParameters params;  // from the best-validation epoch
    TrainingState state;
};

inline double validation_loss(const std::vector<std::vector<int>>& tokens,
                              const std::vector<int>& labels, const LstmParameters& params,
                              const ModelConfig& cfg) {
    std::vector<double> probs;
    probs.reserve(tokens.size());
    ForwardCache cache;
    for (const auto& t : tokens) {
        forward_sequence(t, params, cfg, nullptr, cache);
        probs.push_back(cache.prob);
    }
    return bce_loss(probs, labels);
}

// Mini-batch Adam training with per-epoch shuffling and early stopping: when
// validation loss fails to improve for `patience` consecutive epochs the loop
// stops and the best-validation parameters are returned.
inline TrainResult train_model(const std::vector<PeptideWindow>& train,
                               const std::vector<PeptideWindow>& validation,
                               const ModelConfig& cfg) {
    if (train.empty() || validation.empty())
        throw DataError("train_model: empty training or validation split");
    const Vocabulary vocab;
    auto encode_all = [&vocab](const std::vector<PeptideWindow>& windows) {
        std::pair<std::vector<std::vector<int>>, std::vector<int>> out;
        for (const auto& w : windows) {
            out.first.push_back(encode_window(w, vocab));
            out.second.push_back(w.label == SiteLabel::Positive ? 1 : 0);
        }
        return out;
    };
    const auto [train_tokens, train_labels] = encode_all(train);
    const auto [val_tokens, val_labels] = encode_all(validation);

    Rng rng_init(derive_seed(cfg.seed, "init"));
    Rng rng_shuffle(derive_seed(cfg.seed, "shuffle"));
    Rng rng_dropout(derive_seed(cfg.seed, "dropout"));

    TrainResult result;
    LstmParameters params = init_parameters(cfg, rng_init);
    TrainingState& state = result.state;
    state.m = zero_parameters(cfg);
    state.v = zero_parameters(cfg);
    LstmParameters best_params = params;

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    LstmParameters grads = zero_parameters(cfg);
    ForwardCache cache;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        rng_shuffle.shuffle(order);
        double epoch_loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            grads.set_zero();
            std::vector<double> batch_probs;
            std::vector<int> batch_labels;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                DropoutMasks masks = sample_dropout_masks(cfg, rng_dropout);
                forward_sequence(train_tokens[i], params, cfg, masks.active ? &masks : nullptr,
                                 cache);
                backward_gradients(cache, train_labels[i], params, cfg, grads);
                batch_probs.push_back(cache.prob);
                batch_labels.push_back(train_labels[i]);
            }
            const double scale = 1.0 / static_cast<double>(end - start);
            for (auto& [ptr, n] : grads.tensor_views())
                for (std::size_t i = 0; i < n; ++i) ptr[i] *= scale;
            const double batch_loss = bce_loss(batch_probs, batch_labels);
            if (!std::isfinite(batch_loss))
                throw NumericError("train_model: non-finite training loss at epoch " +
                                   std::to_string(epoch));
            epoch_loss_sum += batch_loss * static_cast<double>(end - start);
            adam_update(params, grads, state, cfg);
        }
        state.train_loss_history.push_back(epoch_loss_sum /
                                           static_cast<double>(train.size()));
        const double val_loss = validation_loss(val_tokens, val_labels, params, cfg);
        if (!std::isfinite(val_loss))
            throw NumericError("train_model: non-finite validation loss at epoch " +
                               std::to_string(epoch));
        state.validation_loss_history.push_back(val_loss);
        if (val_loss < state.best_validation_loss) {
            state.best_validation_loss = val_loss;
            state.best_epoch = epoch;
            state.epochs_without_improvement = 0;
            best_params = params;
        } else {
            state.epochs_without_improvement += 1;
        }
        if (state.epochs_without_improvement >= cfg.patience) break;
    }
    result.params = std::move(best_params);
    return result;
}

// ---------------------------------------------------------------------------
// Deep features

struct FeatureVector {
    std::vector<double> values;  // final hidden state, hidden_dim entries
    WindowOrigin origin;
    SiteLabel label = SiteLabel::Negative;
};

// Inference-mode forward per window; the post-dropout layer is the identity
// at inference, so the representation equals the final hidden state.
inline std::vector<FeatureVector> extract_features(const LstmParameters& params,
                                                   const ModelConfig& cfg,
                                                   const std::vector<PeptideWindow>& windows) {
    const Vocabulary vocab;
    std::vector<FeatureVector> features;
    features.reserve(windows.size());
    ForwardCache cache;
    for (const auto& w : windows) {
        forward_sequence(encode_window(w, vocab), params, cfg, nullptr, cache);
        FeatureVector f;
        f.values.assign(cache.feature.data(), cache.feature.data() + cache.feature.size());
        f.origin = w.origin;
        f.label = w.label;
        features.push_back(std::move(f));
    }
    return features;
}

// Sigmoid-head probability straight from a stored feature vector; lets the
// network itself be scored from serialized features alone.
inline double head_probability(const LstmParameters& params, const std::vector<double>& values) {
    if (static_cast<Eigen::Index>(values.size()) != params.head_w.size())
        throw std::invalid_argument("head_probability: dimension mismatch");
    double logit = params.head_b;
    for (std::size_t i = 0; i < values.size(); ++i)
        logit += params.head_w[static_cast<Eigen::Index>(i)] * values[i];
    return sigmoid(logit);
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr std::string_view kModelFormatTag = "deepace-model 1";

inline std::string serialize_model(const ModelConfig& cfg, const LstmParameters& params) {
    std::string out;
    out += kModelFormatTag;
    out += '\n';
    auto kv = [&out](std::string_view key, const std::string& value) {
        out += key;
        out += ' ';
        out += value;
        out += '\n';
    };
    kv("window_len", std::to_string(cfg.window_len));
    kv("embed_dim", std::to_string(cfg.embed_dim));
    kv("hidden_dim", std::to_string(cfg.hidden_dim));
    kv("dropout_rate", format_double(cfg.dropout_rate));
    kv("batch_size", std::to_string(cfg.batch_size));
    kv("patience", std::to_string(cfg.patience));
    kv("max_epochs", std::to_string(cfg.max_epochs));
    kv("learning_rate", format_double(cfg.learning_rate));
    kv("beta1", format_double(cfg.beta1));
    kv("beta2", format_double(cfg.beta2));
    kv("epsilon", format_double(cfg.epsilon));
    kv("validation_frac", format_double(cfg.validation_frac));
    kv("use_gate_bias", cfg.use_gate_bias ? "1" : "0");
    kv("seed", std::to_string(cfg.seed));
    kv("vocabulary", std::string(kAminoAcids));
    auto tensor = [&out](std::string_view name, const Eigen::MatrixXd& m) {
        out += "tensor ";
        out += name;
        out += ' ';
        out += std::to_string(m.rows());
        out += ' ';
        out += std::to_string(m.cols());
        out += '\n';
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                if (c > 0) out += ' ';
                out += format_double(m(r, c));
            }
            out += '\n';
        }
    };
    tensor("embedding", params.embedding);
    for (int g = 0; g < 4; ++g)
        tensor("w_" + std::string(kGateNames[static_cast<std::size_t>(g)]),
               params.w_in[static_cast<std::size_t>(g)]);
    for (int g = 0; g < 4; ++g)
        tensor("u_" + std::string(kGateNames[static_cast<std::size_t>(g)]),
               params.u_rec[static_cast<std::size_t>(g)]);
    if (cfg.use_gate_bias)
        for (int g = 0; g < 4; ++g)
            tensor("bias_" + std::string(kGateNames[static_cast<std::size_t>(g)]),
                   params.gate_bias[static_cast<std::size_t>(g)]);
    tensor("head_w", params.head_w.transpose());
    Eigen::MatrixXd b(1, 1);
    b(0, 0) = params.head_b;
    tensor("head_b", b);
    out += "end\n";
    return out;
}

inline std::pair<ModelConfig, LstmParameters> load_model(std::string_view text) {
    const auto lines = split_lines(text);
    if (lines.empty() || trim(lines[0]) != kModelFormatTag)
        throw DataError("model file: unsupported format version");
    ModelConfig cfg;
    std::size_t ln = 1;
    std::map<std::string, std::string, std::less<>> kv;
    for (; ln < lines.size(); ++ln) {
        const std::string_view line = trim(lines[ln]);
        if (line.rfind("tensor ", 0) == 0) break;
        const auto sp = line.find(' ');
        if (sp == std::string_view::npos)
            throw DataError("model file: malformed line '" + std::string(line) + "'");
        kv[std::string(line.substr(0, sp))] = std::string(trim(line.substr(sp + 1)));
    }
    auto need = [&kv](const std::string& key) -> const std::string& {
        const auto it = kv.find(key);
        if (it == kv.end()) throw DataError("model file: missing key '" + key + "'");
        return it->second;
    };
    cfg.window_len = static_cast<int>(parse_int(need("window_len"), "window_len"));
    cfg.embed_dim = static_cast<int>(parse_int(need("embed_dim"), "embed_dim"));
    cfg.hidden_dim = static_cast<int>(parse_int(need("hidden_dim"), "hidden_dim"));
    cfg.dropout_rate = parse_double(need("dropout_rate"), "dropout_rate");
    cfg.batch_size = static_cast<int>(parse_int(need("batch_size"), "batch_size"));
    cfg.patience = static_cast<int>(parse_int(need("patience"), "patience"));
    cfg.max_epochs = static_cast<int>(parse_int(need("max_epochs"), "max_epochs"));
    cfg.learning_rate = parse_double(need("learning_rate"), "learning_rate");
    cfg.beta1 = parse_double(need("beta1"), "beta1");
    cfg.beta2 = parse_double(need("beta2"), "beta2");
    cfg.epsilon = parse_double(need("epsilon"), "epsilon");
    cfg.validation_frac = parse_double(need("validation_frac"), "validation_frac");
    cfg.use_gate_bias = parse_int(need("use_gate_bias"), "use_gate_bias") != 0;
    cfg.seed = parse_uint64(need("seed"), "seed");
    if (need("vocabulary") != kAminoAcids)
        throw DataError("model file: unexpected vocabulary");
    LstmParameters params = zero_parameters(cfg);
    std::map<std::string, Eigen::MatrixXd*, std::less<>> slots;
    slots["embedding"] = &params.embedding;
    for (int g = 0; g < 4; ++g) {
        slots["w_" + std::string(kGateNames[static_cast<std::size_t>(g)])] =
            &params.w_in[static_cast<std::size_t>(g)];
        slots["u_" + std::string(kGateNames[static_cast<std::size_t>(g)])] =
            &params.u_rec[static_cast<std::size_t>(g)];
    }
    Eigen::MatrixXd head_w_row(1, cfg.hidden_dim), head_b(1, 1);
    slots["head_w"] = &head_w_row;
    slots["head_b"] = &head_b;
    std::array<Eigen::MatrixXd, 4> bias_cols;
    if (cfg.use_gate_bias)
        for (int g = 0; g < 4; ++g) {
            bias_cols[static_cast<std::size_t>(g)] = Eigen::MatrixXd(cfg.hidden_dim, 1);
            slots["bias_" + std::string(kGateNames[static_cast<std::size_t>(g)])] =
                &bias_cols[static_cast<std::size_t>(g)];
        }
    bool saw_end = false;
    while (ln < lines.size()) {
        const std::string_view line = trim(lines[ln]);
        if (line == "end") {
            saw_end = true;
            break;
        }
        if (line.rfind("tensor ", 0) != 0)
            throw DataError("model file: expected tensor header, got '" + std::string(line) + "'");
        const auto fields = split(line, ' ');
        if (fields.size() != 4) throw DataError("model file: malformed tensor header");
        const std::string name(fields[1]);
        const auto rows = parse_int(fields[2], "tensor rows");
        const auto cols = parse_int(fields[3], "tensor cols");
        const auto slot = slots.find(name);
        if (slot == slots.end()) throw DataError("model file: unknown tensor '" + name + "'");
        Eigen::MatrixXd& m = *slot->second;
        if (m.rows() != rows || m.cols() != cols)
            throw DataError("model file: tensor '" + name + "' has unexpected shape");
        ++ln;
        for (Eigen::Index r = 0; r < m.rows(); ++r, ++ln) {
            if (ln >= lines.size()) throw DataError("model file: truncated tensor '" + name + "'");
            const auto values = split(trim(lines[ln]), ' ');
            if (static_cast<Eigen::Index>(values.size()) != m.cols())
                throw DataError("model file: row width mismatch in tensor '" + name + "'");
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                m(r, c) = parse_double(values[static_cast<std::size_t>(c)], "tensor value");
        }
    }
    if (!saw_end) throw DataError("model file: missing end marker");
    params.head_w = head_w_row.row(0).transpose();
    params.head_b = head_b(0, 0);
    if (cfg.use_gate_bias)
        for (int g = 0; g < 4; ++g)
            params.gate_bias[static_cast<std::size_t>(g)] =
                bias_cols[static_cast<std::size_t>(g)].col(0);
    return {cfg, std::move(params)};
}

// Feature TSV: `origin \t label \t v1 .. vN`, no header.
inline std::string feature_tsv(const std::vector<FeatureVector>& features) {
    std::string out;
    for (const auto& f : features) {
        out += f.origin.str();
        out += '\t';
        out += f.label == SiteLabel::Positive ? '1' : '0';
        for (const double v : f.values) {
            out += '\t';
            out += format_double(v);
        }
        out += '\n';
    }
    return out;
}

inline std::vector<FeatureVector> parse_feature_tsv(std::string_view text) {
    std::vector<FeatureVector> features;
    for (const std::string_view line : split_lines(text)) {
        if (trim(line).empty()) continue;
        const auto fields = split(line, '\t');
        if (fields.size() < 3) throw DataError("feature tsv: too few columns");
        FeatureVector f;
        const auto colon = fields[0].rfind(':');
        if (colon == std::string_view::npos)
            throw DataError("feature tsv: malformed origin '" + std::string(fields[0]) + "'");
        f.origin.protein_id = std::string(fields[0].substr(0, colon));
        f.origin.position =
            static_cast<int>(parse_int(fields[0].substr(colon + 1), "origin position"));
        const long long lab = parse_int(fields[1], "feature label");
        if (lab != 0 && lab != 1) throw DataError("feature tsv: label must be 0 or 1");
        f.label = lab == 1 ? SiteLabel::Positive : SiteLabel::Negative;
        for (std::size_t i = 2; i < fields.size(); ++i)
            f.values.push_back(parse_double(fields[i], "feature value"));
        features.push_back(std::move(f));
    }
    return features;
}

}  // namespace deepace
