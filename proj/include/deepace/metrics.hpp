#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepace/common.hpp"

namespace deepace {

struct ConfusionCounts {
    long tp = 0, tn = 0, fp = 0, fn = 0;

    long positives() const { return tp + fn; }
    long negatives() const { return tn + fp; }
    long total() const { return tp + tn + fp + fn; }
};

struct MetricReport {
    double ca = 0, sn = 0, sp = 0, precision = 0, f1 = 0, mcc = 0, auc = 0;
    bool auc_set = false;
    bool degenerate = false;  // some metric hit a zero denominator (reported as 0)
    ConfusionCounts counts;
    // context
    std::string species, classifier, protocol;
    int fold = -1;
};

// Predict positive iff score >= threshold.
inline ConfusionCounts confusion_counts(const std::vector<double>& scores,
                                        const std::vector<int>& labels,
                                        double threshold = 0.5) {
    if (scores.empty()) throw std::invalid_argument("confusion_counts: empty input");
    if (scores.size() != labels.size())
        throw std::invalid_argument("confusion_counts: size mismatch");
    ConfusionCounts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        const bool actual = labels[i] != 0;
        if (predicted && actual) ++c.tp;
        else if (predicted && !actual) ++c.fp;
        else if (!predicted && actual) ++c.fn;
        else ++c.tn;
    }
    return c;
}

// CA, Sn, Sp, Precision, F1, MCC from confusion counts. AUC is left unset.
// Any zero denominator yields 0 for that metric and sets the degenerate flag.
inline MetricReport compute_metrics(const ConfusionCounts& counts) {
    if (counts.total() == 0) throw std::invalid_argument("compute_metrics: all-zero counts");
    if (counts.tp < 0 || counts.tn < 0 || counts.fp < 0 || counts.fn < 0)
        throw std::invalid_argument("compute_metrics: negative counts");
    MetricReport r;
    r.counts = counts;
    const double tp = static_cast<double>(counts.tp);
    const double tn = static_cast<double>(counts.tn);
    const double fp = static_cast<double>(counts.fp);
    const double fn = static_cast<double>(counts.fn);
    auto ratio = [&r](double num, double den) {
        if (den == 0.0) {
            r.degenerate = true;
            return 0.0;
        }
        return num / den;
    };
    r.ca = ratio(tp + tn, tp + tn + fp + fn);
    r.sn = ratio(tp, tp + fn);
    r.sp = ratio(tn, fp + tn);
    r.precision = ratio(tp, tp + fp);
    r.f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn);
    const double mcc_den_sq = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    r.mcc = ratio(tp * tn - fp * fn, std::sqrt(mcc_den_sq));
    return r;
}

struct RocPoint {
    double fpr = 0, tpr = 0, threshold = 0;
};

// ROC by sweeping the distinct scores in descending order; tied scores are
// grouped, so the curve (and its trapezoidal area) matches the rank-based
// formulation with ties counted half.
inline std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                       const std::vector<int>& labels) {
    if (scores.empty() || scores.size() != labels.size())
        throw std::invalid_argument("roc_curve: bad input sizes");
    long p = 0, n = 0;
    for (const int y : labels) (y != 0 ? p : n)++;
    if (p == 0 || n == 0)
        throw std::invalid_argument("roc_curve: both classes must be present");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<RocPoint> curve;
    curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    long tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] != 0 ? tp : fp)++;
            ++i;
        }
        curve.push_back({static_cast<double>(fp) / static_cast<double>(n),
                         static_cast<double>(tp) / static_cast<double>(p), s});
    }
    return curve;
}

inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    const auto curve = roc_curve(scores, labels);
    double auc = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i)
        auc += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) * 0.5;
    return auc;
}

}  // namespace deepace
