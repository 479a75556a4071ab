#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "deepace/corpus.hpp"
#include "deepace/metrics.hpp"
#include "deepace/rng.hpp"

namespace deepace {

struct FoldPlan {
    int k = 0;
    std::vector<int> assignment;  // sample index -> fold id
    std::uint64_t seed = 0;
};

// Seeded shuffle then round-robin assignment; fold sizes differ by at most 1.
inline FoldPlan make_fold_plan(std::size_t n, int k, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("make_fold_plan: k must be >= 2");
    if (n < static_cast<std::size_t>(k))
        throw std::invalid_argument("make_fold_plan: need at least k samples");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, "folds", static_cast<std::uint64_t>(k)));
    rng.shuffle(order);
    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.assignment.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        plan.assignment[order[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    return plan;
}

// A scorer maps windows to positive-class probabilities; a recipe trains the
// full pipeline on a fold's training data and returns one scorer per
// classifier name.
using Scorer = std::function<std::vector<double>(const std::vector<PeptideWindow>&)>;
using NamedScorers = std::vector<std::pair<std::string, Scorer>>;
using ModelRecipe = std::function<NamedScorers(const std::vector<PeptideWindow>&)>;

struct CrossValidationResult {
    std::vector<MetricReport> fold_reports;  // one per (classifier, fold)
    std::vector<MetricReport> averaged;      // one per classifier
    std::map<std::string, std::vector<double>> pooled_scores;  // classifier -> fold-order scores
    std::vector<int> pooled_labels;  // aligned with every pooled score vector
};

inline MetricReport score_report(const std::vector<double>& scores,
                                 const std::vector<int>& labels) {
    MetricReport report = compute_metrics(confusion_counts(scores, labels));
    long positives = 0;
    for (const int y : labels) positives += y != 0 ? 1 : 0;
    if (positives == 0 || positives == static_cast<long>(labels.size())) {
        report.degenerate = true;  // AUC undefined on a single-class batch
        report.auc = 0.0;
    } else {
        report.auc = roc_auc(scores, labels);
    }
    report.auc_set = true;
    return report;
}

// Unweighted mean of every metric; counts are summed, the degenerate flag
// propagates if any member was flagged.
inline MetricReport average_reports(const std::vector<MetricReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("average_reports: empty input");
    MetricReport avg;
    const double n = static_cast<double>(reports.size());
    for (const auto& r : reports) {
        avg.ca += r.ca / n;
        avg.sn += r.sn / n;
        avg.sp += r.sp / n;
        avg.precision += r.precision / n;
        avg.f1 += r.f1 / n;
        avg.mcc += r.mcc / n;
        avg.auc += r.auc / n;
        avg.counts.tp += r.counts.tp;
        avg.counts.tn += r.counts.tn;
        avg.counts.fp += r.counts.fp;
        avg.counts.fn += r.counts.fn;
        avg.degenerate = avg.degenerate || r.degenerate;
        avg.auc_set = avg.auc_set || r.auc_set;
    }
    avg.species = reports.front().species;
    avg.classifier = reports.front().classifier;
    avg.protocol = reports.front().protocol;
    return avg;
}

// For each fold: train the recipe on the other folds, evaluate on the held
// fold. A held fold lacking one class yields a flagged report with metric
// defaults; the run continues.
inline CrossValidationResult cross_validate(const std::vector<PeptideWindow>& windows,
                                            const ModelRecipe& recipe,
                                            const FoldPlan& plan) {
    if (plan.assignment.size() != windows.size())
        throw std::invalid_argument("cross_validate: plan does not cover the dataset");
    CrossValidationResult result;
    std::map<std::string, std::vector<MetricReport>> by_classifier;
    std::vector<std::string> classifier_order;
    for (int fold = 0; fold < plan.k; ++fold) {
        std::vector<PeptideWindow> train, test;
        for (std::size_t i = 0; i < windows.size(); ++i)
            (plan.assignment[i] == fold ? test : train).push_back(windows[i]);
        const NamedScorers scorers = recipe(train);
        std::vector<int> labels;
        labels.reserve(test.size());
        for (const auto& w : test) labels.push_back(w.label == SiteLabel::Positive ? 1 : 0);
        result.pooled_labels.insert(result.pooled_labels.end(), labels.begin(), labels.end());
        for (const auto& [name, scorer] : scorers) {
            const std::vector<double> scores = scorer(test);
            MetricReport report = score_report(scores, labels);
            report.classifier = name;
            report.fold = fold;
            if (fold == 0) classifier_order.push_back(name);
            auto& pooled = result.pooled_scores[name];
            pooled.insert(pooled.end(), scores.begin(), scores.end());
            by_classifier[name].push_back(report);
            result.fold_reports.push_back(std::move(report));
        }
    }
    for (const auto& name : classifier_order) {
        MetricReport avg = average_reports(by_classifier[name]);
        avg.classifier = name;
        result.averaged.push_back(std::move(avg));
    }
    return result;
}

enum class GroupBy { Species, Classifier, Protocol };

// Unweighted mean of each metric within each group. Members are averaged in
// a canonical sort order, so regrouping a permuted input gives identical
// results.
inline std::vector<MetricReport> aggregate_reports(std::vector<MetricReport> reports,
                                                   GroupBy group_by) {
    if (reports.empty()) throw std::invalid_argument("aggregate_reports: empty input");
    std::sort(reports.begin(), reports.end(), [](const MetricReport& a, const MetricReport& b) {
        return std::tie(a.species, a.classifier, a.protocol, a.fold) <
               std::tie(b.species, b.classifier, b.protocol, b.fold);
    });
    auto key_of = [group_by](const MetricReport& r) -> const std::string& {
        switch (group_by) {
            case GroupBy::Species: return r.species;
            case GroupBy::Classifier: return r.classifier;
            default: return r.protocol;
        }
    };
    std::map<std::string, std::vector<MetricReport>> groups;
    std::vector<std::string> group_order;
    for (auto& r : reports) {
        const std::string& key = key_of(r);
        if (!groups.contains(key)) group_order.push_back(key);
        groups[key].push_back(std::move(r));
    }
    std::vector<MetricReport> out;
    for (const auto& key : group_order) {
        MetricReport avg = average_reports(groups[key]);
        avg.species = avg.classifier = avg.protocol = "";
        switch (group_by) {
            case GroupBy::Species: avg.species = key; break;
            case GroupBy::Classifier: avg.classifier = key; break;
            default: avg.protocol = key; break;
        }
        out.push_back(std::move(avg));
    }
    return out;
}

}  // namespace deepace
