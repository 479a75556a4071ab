#include "deepace/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "deepace/evaluation.hpp"
#include "testutil.hpp"

using namespace deepace;

TEST(Confusion, ThresholdIsInclusive) {
    const auto c = confusion_counts({0.5, 0.49, 0.51, 0.5}, {1, 0, 0, 0});
    EXPECT_EQ(c.tp, 1);  // the 0.5 positive counts as predicted positive
    EXPECT_EQ(c.tn, 1);
    EXPECT_EQ(c.fp, 2);
    EXPECT_EQ(c.fn, 0);
}

TEST(Confusion, MatchesIndependentTally) {
    std::mt19937_64 gen(13);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> scores;
        std::vector<int> labels;
        const std::size_t n = 1 + gen() % 200;
        for (std::size_t i = 0; i < n; ++i) {
            scores.push_back(uniform(gen));
            labels.push_back(static_cast<int>(gen() % 2));
        }
        const auto c = confusion_counts(scores, labels);
        long tp = 0, tn = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (labels[i] == 1)
                (scores[i] >= 0.5 ? tp : fn)++;
            else
                (scores[i] >= 0.5 ? fp : tn)++;
        }
        EXPECT_EQ(c.tp, tp);
        EXPECT_EQ(c.tn, tn);
        EXPECT_EQ(c.fp, fp);
        EXPECT_EQ(c.fn, fn);
        EXPECT_EQ(c.total(), static_cast<long>(n));
    }
    EXPECT_THROW(confusion_counts({}, {}), std::invalid_argument);
    EXPECT_THROW(confusion_counts({0.5}, {1, 0}), std::invalid_argument);
}

TEST(Metrics, HandComputedReferenceCase) {
    const MetricReport r = compute_metrics({3, 2, 4, 1});  // tp, tn, fp, fn
    EXPECT_DOUBLE_EQ(r.ca, 0.5);
    EXPECT_DOUBLE_EQ(r.sn, 0.75);
    EXPECT_DOUBLE_EQ(r.sp, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.precision, 3.0 / 7.0);
    EXPECT_DOUBLE_EQ(r.f1, 6.0 / 11.0);
    EXPECT_DOUBLE_EQ(r.mcc, 2.0 / std::sqrt(504.0));
    EXPECT_FALSE(r.degenerate);
    EXPECT_FALSE(r.auc_set);
}

// The family tp=2t, tn=t, fp=2t, fn=t has a chance-level accuracy of exactly
// 0.5 while the MCC numerator cancels to zero, for every positive t.
TEST(Metrics, ChanceLevelFamily) {
    for (long t = 1; t <= 64; t *= 2) {
        const MetricReport r = compute_metrics({2 * t, t, 2 * t, t});
        EXPECT_DOUBLE_EQ(r.ca, 0.5);
        EXPECT_DOUBLE_EQ(r.mcc, 0.0);
        EXPECT_FALSE(r.degenerate);
    }
}

TEST(Metrics, ZeroDenominatorsFlagInsteadOfThrowing) {
    const MetricReport r = compute_metrics({0, 5, 0, 0});  // negatives only, all correct
    EXPECT_TRUE(r.degenerate);
    EXPECT_DOUBLE_EQ(r.ca, 1.0);
    EXPECT_DOUBLE_EQ(r.sp, 1.0);
    EXPECT_DOUBLE_EQ(r.sn, 0.0);
    EXPECT_DOUBLE_EQ(r.precision, 0.0);
    EXPECT_DOUBLE_EQ(r.f1, 0.0);
    EXPECT_DOUBLE_EQ(r.mcc, 0.0);
    EXPECT_THROW(compute_metrics({0, 0, 0, 0}), std::invalid_argument);
    EXPECT_THROW(compute_metrics({-1, 1, 1, 1}), std::invalid_argument);
}

TEST(Metrics, LabelSwapExchangesSensitivityAndSpecificity) {
    std::mt19937_64 gen(5);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 300; ++i) {
        double s = static_cast<double>(gen() % 1000) / 1000.0;
        if (s == 0.5) s = 0.51;  // keep the threshold comparison unambiguous
        scores.push_back(s);
        labels.push_back(static_cast<int>(gen() % 2));
    }
    std::vector<double> flipped_scores;
    std::vector<int> flipped_labels;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        flipped_scores.push_back(1.0 - scores[i]);
        flipped_labels.push_back(1 - labels[i]);
    }
    const MetricReport a = compute_metrics(confusion_counts(scores, labels));
    const MetricReport b = compute_metrics(confusion_counts(flipped_scores, flipped_labels));
    EXPECT_DOUBLE_EQ(a.sn, b.sp);
    EXPECT_DOUBLE_EQ(a.sp, b.sn);
    EXPECT_DOUBLE_EQ(a.ca, b.ca);
    EXPECT_DOUBLE_EQ(a.mcc, b.mcc);
}

TEST(Roc, TrivialOrderings) {
    EXPECT_DOUBLE_EQ(roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}), 1.0);
    EXPECT_DOUBLE_EQ(roc_auc({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0}), 0.0);
    EXPECT_DOUBLE_EQ(roc_auc({0.4, 0.4, 0.4, 0.4}, {1, 1, 0, 0}), 0.5);
    EXPECT_THROW(roc_curve({0.4, 0.5}, {1, 1}), std::invalid_argument);
    EXPECT_THROW(roc_curve({}, {}), std::invalid_argument);
}

TEST(Roc, CurveStructure) {
    const auto curve = roc_curve({0.9, 0.7, 0.7, 0.3}, {1, 0, 1, 0});
    ASSERT_EQ(curve.size(), 4u);  // one point per distinct score, plus the origin
    EXPECT_DOUBLE_EQ(curve.front().fpr, 0.0);
    EXPECT_DOUBLE_EQ(curve.front().tpr, 0.0);
    EXPECT_TRUE(std::isinf(curve.front().threshold));
    EXPECT_DOUBLE_EQ(curve.back().fpr, 1.0);
    EXPECT_DOUBLE_EQ(curve.back().tpr, 1.0);
    for (std::size_t i = 1; i < curve.size(); ++i) {
        EXPECT_GE(curve[i].fpr, curve[i - 1].fpr);
        EXPECT_GE(curve[i].tpr, curve[i - 1].tpr);
        EXPECT_LT(curve[i].threshold, curve[i - 1].threshold);
    }
}

TEST(Roc, MatchesRankSumWithTies) {
    std::mt19937_64 gen(99);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<double> scores;
        std::vector<int> labels;
        const std::size_t n = 10 + gen() % 120;
        for (std::size_t i = 0; i < n; ++i) {
            scores.push_back(static_cast<double>(gen() % 8) / 8.0);  // coarse grid forces ties
            labels.push_back(static_cast<int>(gen() % 2));
        }
        labels[0] = 1;  // guarantee both classes
        labels[1] = 0;
        EXPECT_NEAR(roc_auc(scores, labels), testutil::mann_whitney_auc(scores, labels), 1e-12);
    }
}

TEST(Roc, InvariantUnderMonotoneTransforms) {
    std::mt19937_64 gen(7);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
        scores.push_back(static_cast<double>(gen() % 64) / 64.0);
        labels.push_back(static_cast<int>(gen() % 2));
    }
    labels[0] = 1;
    labels[1] = 0;
    std::vector<double> transformed;
    for (const double s : scores) transformed.push_back(std::tanh(3.0 * s - 1.0));
    EXPECT_DOUBLE_EQ(roc_auc(scores, labels), roc_auc(transformed, labels));
}

TEST(Folds, SizesDifferByAtMostOne) {
    const FoldPlan plan = make_fold_plan(103, 10, 42);
    std::vector<int> sizes(10, 0);
    for (const int f : plan.assignment) {
        ASSERT_GE(f, 0);
        ASSERT_LT(f, 10);
        ++sizes[static_cast<std::size_t>(f)];
    }
    int elevens = 0, tens = 0;
    for (const int s : sizes) {
        if (s == 11) ++elevens;
        else if (s == 10) ++tens;
    }
    EXPECT_EQ(elevens, 3);
    EXPECT_EQ(tens, 7);

    const FoldPlan even = make_fold_plan(1000, 10, 1);
    std::vector<int> even_sizes(10, 0);
    for (const int f : even.assignment) ++even_sizes[static_cast<std::size_t>(f)];
    for (const int s : even_sizes) EXPECT_EQ(s, 100);

    EXPECT_THROW(make_fold_plan(10, 1, 0), std::invalid_argument);
    EXPECT_THROW(make_fold_plan(4, 5, 0), std::invalid_argument);
}

TEST(Folds, DeterministicPerSeed) {
    const FoldPlan a = make_fold_plan(200, 5, 7);
    const FoldPlan b = make_fold_plan(200, 5, 7);
    const FoldPlan c = make_fold_plan(200, 5, 8);
    EXPECT_EQ(a.assignment, b.assignment);
    EXPECT_NE(a.assignment, c.assignment);
}

TEST(CrossValidation, PerfectAndConstantScorers) {
    const auto corpus = testutil::make_motif_corpus(20, 20, Species::EColi, 3);
    const FoldPlan plan = make_fold_plan(corpus.windows.size(), 5, 17);
    const ModelRecipe recipe = [](const std::vector<PeptideWindow>&) {
        NamedScorers scorers;
        scorers.emplace_back("oracle", [](const std::vector<PeptideWindow>& test) {
            std::vector<double> out;
            for (const auto& w : test)
                out.push_back(w.label == SiteLabel::Positive ? 0.9 : 0.1);
            return out;
        });
        scorers.emplace_back("coin", [](const std::vector<PeptideWindow>& test) {
            return std::vector<double>(test.size(), 0.25);
        });
        return scorers;
    };
    const CrossValidationResult cv = cross_validate(corpus.windows, recipe, plan);
    ASSERT_EQ(cv.fold_reports.size(), 10u);
    ASSERT_EQ(cv.averaged.size(), 2u);
    EXPECT_EQ(cv.averaged[0].classifier, "oracle");
    EXPECT_DOUBLE_EQ(cv.averaged[0].ca, 1.0);
    EXPECT_DOUBLE_EQ(cv.averaged[0].auc, 1.0);
    EXPECT_EQ(cv.averaged[1].classifier, "coin");
    EXPECT_DOUBLE_EQ(cv.averaged[1].sn, 0.0);
    EXPECT_DOUBLE_EQ(cv.averaged[1].sp, 1.0);
    ASSERT_EQ(cv.pooled_labels.size(), corpus.windows.size());
    ASSERT_EQ(cv.pooled_scores.at("oracle").size(), corpus.windows.size());
    long pooled_pos = 0;
    for (const int y : cv.pooled_labels) pooled_pos += y;
    EXPECT_EQ(pooled_pos, 20);
}

TEST(CrossValidation, SingleClassFoldIsFlaggedNotFatal) {
    auto corpus = testutil::make_motif_corpus(2, 2, Species::EColi, 1);
    FoldPlan plan;
    plan.k = 2;
    plan.assignment = {0, 0, 1, 1};  // fold 0 holds both positives
    const ModelRecipe recipe = [](const std::vector<PeptideWindow>&) {
        NamedScorers scorers;
        scorers.emplace_back("c", [](const std::vector<PeptideWindow>& test) {
            return std::vector<double>(test.size(), 0.8);
        });
        return scorers;
    };
    const CrossValidationResult cv = cross_validate(corpus.windows, recipe, plan);
    ASSERT_EQ(cv.fold_reports.size(), 2u);
    EXPECT_TRUE(cv.fold_reports[0].degenerate);
    EXPECT_TRUE(cv.averaged[0].degenerate);

    plan.assignment = {0, 0, 1};
    EXPECT_THROW(cross_validate(corpus.windows, recipe, plan), std::invalid_argument);
}

TEST(Aggregation, GroupMeansAreOrderIndependent) {
    std::vector<MetricReport> reports;
    for (int i = 0; i < 4; ++i) {
        MetricReport r;
        r.species = i < 2 ? "E.coli" : "B.subtilis";
        r.classifier = i % 2 == 0 ? "RF" : "XGB";
        r.protocol = "independent";
        r.ca = 0.1 * (i + 1);
        r.auc = 0.2 * (i + 1);
        reports.push_back(r);
    }
    const auto by_classifier = aggregate_reports(reports, GroupBy::Classifier);
    ASSERT_EQ(by_classifier.size(), 2u);
    // Groups appear in canonical (species, classifier) sort order.
    EXPECT_EQ(by_classifier[0].classifier, "RF");
    EXPECT_DOUBLE_EQ(by_classifier[0].ca, 0.5 * (0.3 + 0.1));
    EXPECT_EQ(by_classifier[1].classifier, "XGB");
    EXPECT_DOUBLE_EQ(by_classifier[1].ca, 0.5 * (0.4 + 0.2));

    std::vector<MetricReport> shuffled = {reports[2], reports[0], reports[3], reports[1]};
    const auto again = aggregate_reports(shuffled, GroupBy::Classifier);
    ASSERT_EQ(again.size(), by_classifier.size());
    for (std::size_t i = 0; i < again.size(); ++i) {
        EXPECT_EQ(again[i].classifier, by_classifier[i].classifier);
        EXPECT_DOUBLE_EQ(again[i].ca, by_classifier[i].ca);
        EXPECT_DOUBLE_EQ(again[i].auc, by_classifier[i].auc);
    }
    EXPECT_THROW(aggregate_reports({}, GroupBy::Species), std::invalid_argument);
}
