#include "deepace/pipeline.hpp"

#include <sys/wait.h>

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "testutil.hpp"

using namespace deepace;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::size_t line_count(const std::string& text) {
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DEEPACE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (status == -1 || !WIFEXITED(status)) return -1;
    return WEXITSTATUS(status);
}

}  // namespace

TEST(RunConfigText, RoundTripPreservesEveryField) {
    RunConfig cfg;
    cfg.fasta_path = "data/in.fasta";
    cfg.annotations_path = "data/in.tsv";
    cfg.out_dir = "scratch/run1";
    cfg.species = {Species::EColi, Species::BSubtilis};
    cfg.seed = 77;
    cfg.protocols = {Protocol::Train, Protocol::Cv10};
    cfg.per_species = false;
    cfg.tsne_split = "all";
    cfg.cv_reuse_extractor = true;
    cfg.redundancy_threshold = 0.4;
    cfg.train_fraction = 0.75;
    cfg.model.window_len = 21;
    cfg.model.embed_dim = 16;
    cfg.model.hidden_dim = 12;
    cfg.model.dropout_rate = 0.35;
    cfg.model.batch_size = 64;
    cfg.model.patience = 5;
    cfg.model.max_epochs = 40;
    cfg.model.learning_rate = 0.002;
    cfg.model.use_gate_bias = true;
    cfg.ensembles[0].n_trees = 33;
    cfg.ensembles[4].lambda = 2.5;
    cfg.tsne.perplexity = 12.5;
    cfg.tsne.iterations = 600;

    const std::string text = serialize_run_config(cfg);
    const RunConfig parsed = parse_run_config(text);
    EXPECT_EQ(serialize_run_config(parsed), text);
    EXPECT_EQ(parsed.species, cfg.species);
    EXPECT_EQ(parsed.protocols, cfg.protocols);
    EXPECT_EQ(parsed.seed, 77u);
    EXPECT_FALSE(parsed.per_species);
    EXPECT_TRUE(parsed.cv_reuse_extractor);
    EXPECT_EQ(parsed.model.hidden_dim, 12);
    EXPECT_TRUE(parsed.model.use_gate_bias);
    EXPECT_EQ(parsed.ensembles[0].n_trees, 33);
    EXPECT_DOUBLE_EQ(parsed.ensembles[4].lambda, 2.5);
    EXPECT_DOUBLE_EQ(parsed.tsne.perplexity, 12.5);
}

TEST(RunConfigText, EmptyTextGivesDefaults) {
    const RunConfig cfg = parse_run_config("# nothing but a comment\n\n");
    const RunConfig defaults;
    EXPECT_EQ(serialize_run_config(cfg), serialize_run_config(defaults));
    EXPECT_EQ(cfg.seed, 42u);
    EXPECT_TRUE(cfg.species.empty());
    EXPECT_EQ(cfg.protocols.size(), 4u);
}

TEST(RunConfigText, EnsembleSectionsTargetKinds) {
    const RunConfig cfg = parse_run_config(
        "[ensemble]\nn_trees 7\n\n[ensemble.xgb]\nlambda 3.5\n");
    for (const auto& e : cfg.ensembles) EXPECT_EQ(e.n_trees, 7);
    EXPECT_DOUBLE_EQ(cfg.ensembles[4].lambda, 3.5);
    EXPECT_DOUBLE_EQ(cfg.ensembles[0].lambda,
                     default_config(EnsembleKind::RandomForest).lambda);
}

TEST(RunConfigText, RejectsUnknownAndMalformedInput) {
    EXPECT_THROW(parse_run_config("[run]\nbogus 1\n"), DataError);
    EXPECT_THROW(parse_run_config("[nope]\nx 1\n"), DataError);
    EXPECT_THROW(parse_run_config("orphan 1\n"), DataError);
    EXPECT_THROW(parse_run_config("[run\nseed 1\n"), DataError);
    EXPECT_THROW(parse_run_config("[run]\nspecies Martian\n"), DataError);
    EXPECT_THROW(parse_run_config("[run]\nprotocols cv7\n"), DataError);
    EXPECT_THROW(parse_run_config("[run]\ntsne_split everything\n"), DataError);
    EXPECT_THROW(parse_run_config("[run]\nprotocols ,\n"), DataError);
    EXPECT_THROW(parse_run_config("[model]\nwindow_len abc\n"), DataError);
    EXPECT_THROW(parse_run_config("[ensemble.volcano]\nn_trees 3\n"), DataError);
}

TEST(Manifest, ChecksumOracleAndRoundTrip) {
    // Standard CRC-32 check value for the digits 1 through 9.
    EXPECT_EQ(crc32_of("123456789"), 0xCBF43926u);
    EXPECT_EQ(crc32_of(""), 0u);

    RunManifest manifest;
    manifest.config_crc = 0xdeadbeef;
    manifest.stage_seconds["prepare"] = 1.5;
    manifest.stage_seconds["train"] = 0.25;
    manifest.files["windows/a.tsv"] = {crc32_of("hello"), 5};
    manifest.files["reports/with space.tsv"] = {123, 77};
    const std::string text = serialize_manifest(manifest);
    const RunManifest parsed = parse_manifest(text);
    EXPECT_EQ(parsed.config_crc, manifest.config_crc);
    EXPECT_EQ(parsed.stage_seconds, manifest.stage_seconds);
    ASSERT_EQ(parsed.files.size(), 2u);
    EXPECT_EQ(parsed.files.at("windows/a.tsv").crc, crc32_of("hello"));
    EXPECT_EQ(parsed.files.at("windows/a.tsv").bytes, 5u);
    EXPECT_EQ(parsed.files.at("reports/with space.tsv").bytes, 77u);
    EXPECT_EQ(serialize_manifest(parsed), text);

    EXPECT_THROW(parse_manifest("bogus-tag\n"), DataError);
    EXPECT_THROW(parse_manifest("deepace-manifest 1\nwhatisthis\nend\n"), DataError);
}

TEST(Pipeline, EndToEndArtifactsManifestAndRestart) {
    const fs::path base = fresh_dir("deepace_e2e_test");
    const auto corpus = testutil::make_motif_corpus(60, 140, Species::STyphimurium, 11);
    write_text_file(base / "proteins.fasta", corpus.fasta);
    write_text_file(base / "sites.tsv", corpus.annotations);

    RunConfig cfg;
    cfg.fasta_path = (base / "proteins.fasta").string();
    cfg.annotations_path = (base / "sites.tsv").string();
    cfg.out_dir = (base / "out").string();
    cfg.seed = 3;
    cfg.protocols = {Protocol::Train, Protocol::Independent, Protocol::Cv5};
    cfg.cv_reuse_extractor = true;
    cfg.redundancy_threshold = 1.0;  // random 41-mers, keep all of them
    cfg.model.window_len = 21;
    cfg.model.embed_dim = 8;
    cfg.model.hidden_dim = 8;
    cfg.model.batch_size = 32;
    cfg.model.max_epochs = 3;
    cfg.model.dropout_rate = 0.0;
    for (auto& e : cfg.ensembles) e.n_trees = 25;
    cfg.tsne.iterations = 250;
    cfg.tsne.perplexity = 8.0;
    cfg.tsne_split = "independent";
    const fs::path out = cfg.out_dir;

    // prepare: stratified 80/20 split of 60 positive and 140 negative windows.
    run_prepare(cfg);
    const std::string summary = read_text_file(out / "summary.tsv");
    EXPECT_NE(summary.find("S.typhimurium\t48\t112\t12\t28"), std::string::npos) << summary;
    const std::string train_tsv = read_text_file(out / "windows/S.typhimurium.train.tsv");
    const std::string ind_tsv = read_text_file(out / "windows/S.typhimurium.independent.tsv");
    EXPECT_EQ(line_count(train_tsv), 160u);
    EXPECT_EQ(line_count(ind_tsv), 40u);
    const auto train_windows = parse_window_tsv(train_tsv);
    std::size_t train_pos = 0;
    for (const auto& w : train_windows)
        if (w.label == SiteLabel::Positive) ++train_pos;
    EXPECT_EQ(train_pos, 48u);
    for (const auto& w : train_windows) EXPECT_EQ(w.residues.size(), 21u);

    // train: one model per species with its loss history.
    run_train(cfg);
    const auto [mcfg, params] = load_model(read_text_file(out / "models/S.typhimurium.model.txt"));
    EXPECT_EQ(mcfg.hidden_dim, 8);
    EXPECT_EQ(params.embedding.rows(), 21);
    EXPECT_GE(line_count(read_text_file(out / "models/S.typhimurium.history.tsv")), 3u);

    // extract: one feature row per window, two id columns plus hidden_dim values.
    run_extract(cfg);
    const std::string feat_tsv = read_text_file(out / "features/S.typhimurium.train.tsv");
    EXPECT_EQ(line_count(feat_tsv), 160u);
    for (const auto line : split_lines(feat_tsv)) {
        if (trim(line).empty()) continue;
        EXPECT_EQ(split(line, '\t').size(), 10u);
    }
    EXPECT_EQ(parse_feature_tsv(feat_tsv).size(), 160u);

    // evaluate: per-protocol tables, fold tables, ROC curves, ensemble dumps.
    run_evaluate(cfg);
    const std::string train_report = read_text_file(out / "reports/train.tsv");
    EXPECT_EQ(line_count(train_report), 13u);  // header, 6 classifiers, 6 averages
    EXPECT_NE(train_report.find("species\tclassifier\tacc\tsn\tsp\tmcc\tauc\tf1\tflags"),
              std::string::npos);
    EXPECT_NE(train_report.find("Average\tLSTM"), std::string::npos);
    EXPECT_EQ(line_count(read_text_file(out / "reports/independent.tsv")), 13u);
    EXPECT_EQ(line_count(read_text_file(out / "reports/cv5.tsv")), 13u);
    EXPECT_EQ(line_count(read_text_file(out / "reports/cv5.folds.tsv")), 31u);
    std::size_t roc_files = 0;
    for (const auto& entry : fs::directory_iterator(out / "roc")) {
        ++roc_files;
        const std::string roc = read_text_file(entry.path());
        EXPECT_NE(roc.find("fpr,tpr,threshold"), std::string::npos);
    }
    EXPECT_EQ(roc_files, 18u);  // 6 classifiers x 3 protocols
    for (const std::string kind : {"RF", "ERT", "AB", "GB", "XGB"}) {
        const EnsembleModel model = load_ensemble(
            read_text_file(out / ("models/S.typhimurium." + kind + ".ensemble.txt")));
        if (kind == "AB") {
            // Boosting may stop early once the weighted error leaves (0, 0.5).
            EXPECT_GE(model.trees.size(), 1u);
            EXPECT_LE(model.trees.size(), 25u);
        } else {
            EXPECT_EQ(model.trees.size(), 25u);
        }
    }

    // visualize: annotated CSV over the independent split.
    run_visualize(cfg);
    const std::string tsne_csv = read_text_file(out / "tsne/S.typhimurium.csv");
    EXPECT_EQ(tsne_csv.rfind("# deepace-tsne 1 ", 0), 0u);
    EXPECT_NE(tsne_csv.find("origin,label,x,y"), std::string::npos);
    EXPECT_EQ(line_count(tsne_csv), 42u);  // metadata, header, 40 points

    // The manifest must cover exactly the artifact files, with true checksums.
    const RunManifest manifest = parse_manifest(read_text_file(out / "manifest.txt"));
    EXPECT_EQ(manifest.config_crc, crc32_of(serialize_run_config(cfg)));
    for (const std::string stage : {"prepare", "train", "extract", "evaluate", "visualize"})
        EXPECT_TRUE(manifest.stage_seconds.contains(stage)) << stage;
    std::size_t disk_files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(out)) {
        if (!entry.is_regular_file()) continue;
        const std::string rel = fs::relative(entry.path(), out).generic_string();
        if (rel == "manifest.txt") continue;
        ++disk_files;
        ASSERT_TRUE(manifest.files.contains(rel)) << rel;
        const std::string content = read_text_file(entry.path());
        EXPECT_EQ(manifest.files.at(rel).crc, crc32_of(content)) << rel;
        EXPECT_EQ(manifest.files.at(rel).bytes, content.size()) << rel;
    }
    EXPECT_EQ(disk_files, manifest.files.size());

    // Stages are restartable: wiping one directory and rerunning that stage
    // reproduces the bytes.
    const std::string ind_features_before =
        read_text_file(out / "features/S.typhimurium.independent.tsv");
    fs::remove_all(out / "features");
    run_extract(cfg);
    EXPECT_EQ(read_text_file(out / "features/S.typhimurium.independent.tsv"),
              ind_features_before);
    EXPECT_EQ(read_text_file(out / "features/S.typhimurium.train.tsv"), feat_tsv);

    // prepare itself is deterministic given the seed.
    RunConfig again = cfg;
    again.out_dir = (base / "out2").string();
    run_prepare(again);
    EXPECT_EQ(read_text_file(base / "out2/windows/S.typhimurium.train.tsv"), train_tsv);
}

TEST(Pipeline, VisualizeNeedsEnoughPoints) {
    const fs::path base = fresh_dir("deepace_tiny_viz_test");
    std::vector<FeatureVector> few;
    for (int i = 0; i < 5; ++i) {
        FeatureVector f;
        f.values = {0.1 * i, -0.2 * i};
        f.origin = {"P" + std::to_string(i), 21};
        f.label = i % 2 ? SiteLabel::Positive : SiteLabel::Negative;
        few.push_back(std::move(f));
    }
    write_text_file(base / "out/features/E.coli.train.tsv", feature_tsv(few));
    RunConfig cfg;
    cfg.out_dir = (base / "out").string();
    cfg.tsne_split = "train";
    EXPECT_THROW(run_visualize(cfg), DataError);
}

TEST(Cli, ExitCodesFollowErrorKinds) {
    const fs::path base = fresh_dir("deepace_cli_test");
    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli(""), 1);          // missing subcommand
    EXPECT_EQ(run_cli("teleport"), 1);  // unknown subcommand
    EXPECT_EQ(run_cli("prepare --species Martian"), 1);
    EXPECT_EQ(run_cli("prepare --config " + (base / "missing.ini").string()), 2);
    write_text_file(base / "bad.ini", "[run]\nbogus 1\n");
    EXPECT_EQ(run_cli("prepare --config " + (base / "bad.ini").string()), 2);
}

TEST(Cli, DefaultsPrintsTheEffectiveConfig) {
    const fs::path base = fresh_dir("deepace_cli_defaults_test");
    const fs::path dump = base / "defaults.ini";
    const std::string cmd = std::string(DEEPACE_CLI_PATH) + " defaults --seed 9 > " +
                            dump.string() + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    ASSERT_TRUE(status != -1 && WIFEXITED(status) && WEXITSTATUS(status) == 0);
    const std::string text = read_text_file(dump);
    RunConfig expected;
    expected.seed = 9;
    EXPECT_EQ(text, serialize_run_config(expected));
    const RunConfig parsed = parse_run_config(text);
    EXPECT_EQ(parsed.seed, 9u);
}
