#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepace/common.hpp"
#include "deepace/corpus.hpp"
#include "deepace/ensemble.hpp"
#include "deepace/evaluation.hpp"
#include "deepace/metrics.hpp"
#include "deepace/model.hpp"
#include "deepace/rng.hpp"
#include "deepace/species.hpp"
#include "deepace/tsne.hpp"

namespace deepace {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Protocols

enum class Protocol { Train, Independent, Cv5, Cv10 };

inline std::string_view protocol_token(Protocol p) {
    switch (p) {
        case Protocol::Train: return "train";
        case Protocol::Independent: return "independent";
        case Protocol::Cv5: return "cv5";
        case Protocol::Cv10: return "cv10";
    }
    throw std::invalid_argument("protocol_token: bad protocol");
}

inline std::optional<Protocol> parse_protocol(std::string_view token) {
    for (const Protocol p : {Protocol::Train, Protocol::Independent, Protocol::Cv5,
                             Protocol::Cv10})
        if (token == protocol_token(p)) return p;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
    std::string fasta_path = "data/proteins.fasta";
    std::string annotations_path = "data/sites.tsv";
    std::string out_dir = "out";
    std::vector<Species> species;  // empty means every species found in the data
    std::uint64_t seed = 42;
    std::vector<Protocol> protocols = {Protocol::Train, Protocol::Independent, Protocol::Cv5,
                                       Protocol::Cv10};
    bool per_species = true;  // otherwise one pooled feature extractor
    std::string tsne_split = "independent";  // train | independent | all
    bool cv_reuse_extractor = false;
    double redundancy_threshold = 0.30;
    double train_fraction = 0.8;
    ModelConfig model;
    std::array<EnsembleConfig, 5> ensembles = {
        default_config(EnsembleKind::RandomForest), default_config(EnsembleKind::ExtraTrees),
        default_config(EnsembleKind::AdaBoost), default_config(EnsembleKind::GradientBoosting),
        default_config(EnsembleKind::Xgboost)};
    TsneConfig tsne;
};

namespace detail {

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (const auto& t : tokens) {
        if (!out.empty()) out += ',';
        out += t;
    }
    return out;
}

inline std::vector<std::string_view> split_csv(std::string_view value) {
    std::vector<std::string_view> out;
    for (const auto part : split(value, ','))
        if (!trim(part).empty()) out.push_back(trim(part));
    return out;
}

inline std::string format_fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

}  // namespace detail

inline std::string serialize_run_config(const RunConfig& cfg) {
    std::string out = "# deepace run configuration\n\n";
    auto kv = [&out](std::string_view key, const std::string& value) {
        out += key;
        out += ' ';
        out += value;
        out += '\n';
    };
    out += "[paths]\n";
    kv("fasta", cfg.fasta_path);
    kv("annotations", cfg.annotations_path);
    kv("out", cfg.out_dir);

    out += "\n[run]\n";
    if (cfg.species.empty()) {
        kv("species", "all");
    } else {
        std::vector<std::string> tokens;
        for (const Species sp : cfg.species) tokens.emplace_back(species_token(sp));
        kv("species", detail::join_tokens(tokens));
    }
    kv("seed", std::to_string(cfg.seed));
    {
        std::vector<std::string> tokens;
        for (const Protocol p : cfg.protocols) tokens.emplace_back(protocol_token(p));
        kv("protocols", detail::join_tokens(tokens));
    }
    kv("per_species", cfg.per_species ? "1" : "0");
    kv("tsne_split", cfg.tsne_split);
    kv("cv_reuse_extractor", cfg.cv_reuse_extractor ? "1" : "0");
    kv("redundancy_threshold", format_double(cfg.redundancy_threshold));
    kv("train_fraction", format_double(cfg.train_fraction));

    out += "\n[model]\n";
    kv("window_len", std::to_string(cfg.model.window_len));
    kv("embed_dim", std::to_string(cfg.model.embed_dim));
    kv("hidden_dim", std::to_string(cfg.model.hidden_dim));
    kv("dropout_rate", format_double(cfg.model.dropout_rate));
    kv("batch_size", std::to_string(cfg.model.batch_size));
    kv("patience", std::to_string(cfg.model.patience));
    kv("max_epochs", std::to_string(cfg.model.max_epochs));
    kv("learning_rate", format_double(cfg.model.learning_rate));
    kv("beta1", format_double(cfg.model.beta1));
    kv("beta2", format_double(cfg.model.beta2));
    kv("epsilon", format_double(cfg.model.epsilon));
    kv("validation_frac", format_double(cfg.model.validation_frac));
    kv("use_gate_bias", cfg.model.use_gate_bias ? "1" : "0");

    for (std::size_t i = 0; i < cfg.ensembles.size(); ++i) {
        const EnsembleConfig& e = cfg.ensembles[i];
        std::string token(ensemble_kind_token(e.kind));
        for (auto& c : token) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        out += "\n[ensemble." + token + "]\n";
        kv("n_trees", std::to_string(e.n_trees));
        kv("max_depth", std::to_string(e.max_depth));
        kv("learning_rate", format_double(e.learning_rate));
        kv("feature_subsample", std::to_string(e.feature_subsample));
        kv("min_samples_split", std::to_string(e.min_samples_split));
        kv("lambda", format_double(e.lambda));
        kv("gamma", format_double(e.gamma));
    }

    out += "\n[tsne]\n";
    kv("perplexity", format_double(cfg.tsne.perplexity));
    kv("iterations", std::to_string(cfg.tsne.iterations));
    kv("learning_rate", format_double(cfg.tsne.learning_rate));
    kv("early_exaggeration", format_double(cfg.tsne.early_exaggeration));
    kv("exaggeration_iters", std::to_string(cfg.tsne.exaggeration_iters));
    kv("initial_momentum", format_double(cfg.tsne.initial_momentum));
    kv("final_momentum", format_double(cfg.tsne.final_momentum));
    kv("momentum_switch_iter", std::to_string(cfg.tsne.momentum_switch_iter));
    return out;
}

// Flat `key value` lines under [section] headers; full-line # comments only.
inline RunConfig parse_run_config(std::string_view text) {
    RunConfig cfg;
    std::string section;
    auto bad = [](const std::string& what) { return DataError("run config: " + what); };
    auto apply_ensemble = [&bad](EnsembleConfig& e, std::string_view key,
                                 std::string_view value) {
        const std::string v(value);
        if (key == "n_trees")
            e.n_trees = static_cast<int>(parse_int(v, "n_trees"));
        else if (key == "max_depth")
            e.max_depth = static_cast<int>(parse_int(v, "max_depth"));
        else if (key == "learning_rate")
            e.learning_rate = parse_double(v, "learning_rate");
        else if (key == "feature_subsample")
            e.feature_subsample = static_cast<int>(parse_int(v, "feature_subsample"));
        else if (key == "min_samples_split")
            e.min_samples_split = static_cast<int>(parse_int(v, "min_samples_split"));
        else if (key == "lambda")
            e.lambda = parse_double(v, "lambda");
        else if (key == "gamma")
            e.gamma = parse_double(v, "gamma");
        else
            throw bad("unknown ensemble key '" + std::string(key) + "'");
    };
    for (const std::string_view raw : split_lines(text)) {
        const std::string_view line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw bad("malformed section '" + std::string(line) + "'");
            section = std::string(line.substr(1, line.size() - 2));
            continue;
        }
        const auto sp = line.find(' ');
        const std::string_view key = sp == std::string_view::npos ? line : line.substr(0, sp);
        const std::string_view value =
            sp == std::string_view::npos ? std::string_view{} : trim(line.substr(sp + 1));
        const std::string v(value);
        if (section == "paths") {
            if (key == "fasta")
                cfg.fasta_path = v;
            else if (key == "annotations")
                cfg.annotations_path = v;
            else if (key == "out")
                cfg.out_dir = v;
            else
                throw bad("unknown paths key '" + std::string(key) + "'");
        } else if (section == "run") {
            if (key == "species") {
                cfg.species.clear();
                if (value != "all" && !value.empty()) {
                    for (const auto token : detail::split_csv(value)) {
                        const auto parsed = parse_species(token);
                        if (!parsed)
                            throw bad("unknown species '" + std::string(token) + "'");
                        cfg.species.push_back(*parsed);
                    }
                }
            } else if (key == "seed") {
                cfg.seed = parse_uint64(v, "seed");
            } else if (key == "protocols") {
                cfg.protocols.clear();
                for (const auto token : detail::split_csv(value)) {
                    const auto parsed = parse_protocol(token);
                    if (!parsed) throw bad("unknown protocol '" + std::string(token) + "'");
                    cfg.protocols.push_back(*parsed);
                }
                if (cfg.protocols.empty()) throw bad("protocol set must be non-empty");
            } else if (key == "per_species") {
                cfg.per_species = parse_int(v, "per_species") != 0;
            } else if (key == "tsne_split") {
                if (v != "train" && v != "independent" && v != "all")
                    throw bad("tsne_split must be train, independent, or all");
                cfg.tsne_split = v;
            } else if (key == "cv_reuse_extractor") {
                cfg.cv_reuse_extractor = parse_int(v, "cv_reuse_extractor") != 0;
            } else if (key == "redundancy_threshold") {
                cfg.redundancy_threshold = parse_double(v, "redundancy_threshold");
            } else if (key == "train_fraction") {
                cfg.train_fraction = parse_double(v, "train_fraction");
            } else {
                throw bad("unknown run key '" + std::string(key) + "'");
            }
        } else if (section == "model") {
            if (key == "window_len")
                cfg.model.window_len = static_cast<int>(parse_int(v, "window_len"));
            else if (key == "embed_dim")
                cfg.model.embed_dim = static_cast<int>(parse_int(v, "embed_dim"));
            else if (key == "hidden_dim")
                cfg.model.hidden_dim = static_cast<int>(parse_int(v, "hidden_dim"));
            else if (key == "dropout_rate")
                cfg.model.dropout_rate = parse_double(v, "dropout_rate");
            else if (key == "batch_size")
                cfg.model.batch_size = static_cast<int>(parse_int(v, "batch_size"));
            else if (key == "patience")
                cfg.model.patience = static_cast<int>(parse_int(v, "patience"));
            else if (key == "max_epochs")
                cfg.model.max_epochs = static_cast<int>(parse_int(v, "max_epochs"));
            else if (key == "learning_rate")
                cfg.model.learning_rate = parse_double(v, "learning_rate");
            else if (key == "beta1")
                cfg.model.beta1 = parse_double(v, "beta1");
            else if (key == "beta2")
                cfg.model.beta2 = parse_double(v, "beta2");
            else if (key == "epsilon")
                cfg.model.epsilon = parse_double(v, "epsilon");
            else if (key == "validation_frac")
                cfg.model.validation_frac = parse_double(v, "validation_frac");
            else if (key == "use_gate_bias")
                cfg.model.use_gate_bias = parse_int(v, "use_gate_bias") != 0;
            else
                throw bad("unknown model key '" + std::string(key) + "'");
        } else if (section == "ensemble") {
            for (auto& e : cfg.ensembles) apply_ensemble(e, key, value);
        } else if (section.rfind("ensemble.", 0) == 0) {
            std::string token = section.substr(9);
            for (auto& c : token)
                c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            const auto kind = parse_ensemble_kind(token);
            if (!kind) throw bad("unknown ensemble section '" + section + "'");
            for (auto& e : cfg.ensembles)
                if (e.kind == *kind) apply_ensemble(e, key, value);
        } else if (section == "tsne") {
            if (key == "perplexity")
                cfg.tsne.perplexity = parse_double(v, "perplexity");
            else if (key == "iterations")
                cfg.tsne.iterations = static_cast<int>(parse_int(v, "iterations"));
            else if (key == "learning_rate")
                cfg.tsne.learning_rate = parse_double(v, "learning_rate");
            else if (key == "early_exaggeration")
                cfg.tsne.early_exaggeration = parse_double(v, "early_exaggeration");
            else if (key == "exaggeration_iters")
                cfg.tsne.exaggeration_iters = static_cast<int>(parse_int(v, "exaggeration_iters"));
            else if (key == "initial_momentum")
                cfg.tsne.initial_momentum = parse_double(v, "initial_momentum");
            else if (key == "final_momentum")
                cfg.tsne.final_momentum = parse_double(v, "final_momentum");
            else if (key == "momentum_switch_iter")
                cfg.tsne.momentum_switch_iter =
                    static_cast<int>(parse_int(v, "momentum_switch_iter"));
            else
                throw bad("unknown tsne key '" + std::string(key) + "'");
        } else {
            throw bad(section.empty() ? "key before any section"
                                      : "unknown section '" + section + "'");
        }
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Files and the run manifest

inline std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

inline void write_text_file(const fs::path& path, std::string_view content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write file: " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError("write failed: " + path.string());
}

inline std::uint32_t crc32_of(std::string_view content) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(content.data()),
                static_cast<uInt>(content.size()));
    return static_cast<std::uint32_t>(crc);
}

struct ManifestEntry {
    std::uint32_t crc = 0;
    std::uint64_t bytes = 0;
};

// Cumulative record of a run directory: config checksum, format versions,
// per-stage wall times, and a checksum per emitted file. Each command merges
// its writes into the existing manifest, so the file always describes the
// whole directory. Timings differ between runs, which is why determinism
// comparisons skip this one file.
struct RunManifest {
    std::uint32_t config_crc = 0;
    std::map<std::string, double> stage_seconds;
    std::map<std::string, ManifestEntry> files;
};

inline constexpr std::string_view kManifestFormatTag = "deepace-manifest 1";

inline std::string serialize_manifest(const RunManifest& manifest) {
    std::string out;
    out += kManifestFormatTag;
    out += '\n';
    char crc_buf[16];
    std::snprintf(crc_buf, sizeof(crc_buf), "%08x", manifest.config_crc);
    out += "config_crc ";
    out += crc_buf;
    out += '\n';
    out += "format model 1\nformat ensemble 1\nformat tsne 1\n";
    for (const auto& [stage, seconds] : manifest.stage_seconds)
        out += "stage " + stage + " " + format_double(seconds) + "\n";
    for (const auto& [path, entry] : manifest.files) {
        std::snprintf(crc_buf, sizeof(crc_buf), "%08x", entry.crc);
        out += "file ";
        out += crc_buf;
        out += ' ';
        out += std::to_string(entry.bytes);
        out += ' ';
        out += path;
        out += '\n';
    }
    out += "end\n";
    return out;
}

inline RunManifest parse_manifest(std::string_view text) {
    const auto lines = split_lines(text);
    if (lines.empty() || trim(lines[0]) != kManifestFormatTag)
        throw DataError("manifest: unsupported format version");
    RunManifest manifest;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::string_view line = trim(lines[i]);
        if (line.empty() || line == "end") continue;
        const auto fields = split(line, ' ');
        if (fields[0] == "config_crc" && fields.size() == 2) {
            manifest.config_crc =
                static_cast<std::uint32_t>(std::stoul(std::string(fields[1]), nullptr, 16));
        } else if (fields[0] == "format") {
            continue;
        } else if (fields[0] == "stage" && fields.size() == 3) {
            manifest.stage_seconds[std::string(fields[1])] =
                parse_double(fields[2], "stage seconds");
        } else if (fields[0] == "file" && fields.size() >= 4) {
            ManifestEntry entry;
            entry.crc = static_cast<std::uint32_t>(std::stoul(std::string(fields[1]), nullptr, 16));
            entry.bytes = parse_uint64(fields[2], "file bytes");
            std::string path(fields[3]);
            for (std::size_t f = 4; f < fields.size(); ++f) path += " " + std::string(fields[f]);
            manifest.files[path] = entry;
        } else {
            throw DataError("manifest: malformed line '" + std::string(line) + "'");
        }
    }
    return manifest;
}

namespace detail {

inline RunManifest load_or_new_manifest(const fs::path& out_dir) {
    const fs::path path = out_dir / "manifest.txt";
    if (!fs::exists(path)) return {};
    return parse_manifest(read_text_file(path));
}

// Writes one artifact under the run directory and records it in the manifest.
inline void write_artifact(const fs::path& out_dir, const std::string& rel,
                           std::string_view content, RunManifest& manifest) {
    write_text_file(out_dir / rel, content);
    manifest.files[rel] = {crc32_of(content), content.size()};
}

inline void finish_stage(const fs::path& out_dir, const std::string& stage, double seconds,
                         const RunConfig& cfg, RunManifest& manifest) {
    manifest.stage_seconds[stage] = seconds;
    manifest.config_crc = crc32_of(serialize_run_config(cfg));
    write_text_file(out_dir / "manifest.txt", serialize_manifest(manifest));
}

class StageTimer {
  public:
    StageTimer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_;
};

inline std::string species_file(Species sp, const std::string& suffix) {
    return std::string(species_token(sp)) + suffix;
}

// Species for a stage: the configured filter, or every species that already
// has the required per-species artifact from the previous stage.
inline std::vector<Species> resolve_species(const RunConfig& cfg, const fs::path& out_dir,
                                            const std::string& subdir,
                                            const std::string& suffix) {
    std::vector<Species> found;
    for (const Species sp : all_species())
        if (fs::exists(out_dir / subdir / species_file(sp, suffix))) found.push_back(sp);
    if (cfg.species.empty()) {
        if (found.empty())
            throw DataError("no per-species files under " + (out_dir / subdir).string() +
                            "; run the earlier stages first");
        return found;
    }
    for (const Species sp : cfg.species)
        if (std::find(found.begin(), found.end(), sp) == found.end())
            throw DataError("species " + std::string(species_token(sp)) + " has no file under " +
                            (out_dir / subdir).string());
    return cfg.species;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// prepare

inline void run_prepare(const RunConfig& cfg) {
    const fs::path out_dir = cfg.out_dir;
    RunManifest manifest = detail::load_or_new_manifest(out_dir);
    detail::StageTimer timer;

    const auto proteins = parse_fasta(read_text_file(cfg.fasta_path));
    auto annotations = parse_annotations(read_text_file(cfg.annotations_path));

    std::set<std::string> known_ids;
    for (const auto& p : proteins) known_ids.insert(p.id);
    for (const auto& site : annotations)
        if (!known_ids.contains(site.protein_id))
            throw DataError("annotation references unknown protein '" + site.protein_id + "'");

    // Without explicit negative rows, every unannotated lysine becomes one.
    const bool has_negatives = std::any_of(
        annotations.begin(), annotations.end(),
        [](const SiteAnnotation& s) { return s.label == SiteLabel::Negative; });
    if (!has_negatives) {
        std::vector<SiteAnnotation> derived;
        for (const auto& p : proteins) {
            const auto negatives = derive_negative_sites(p, annotations);
            derived.insert(derived.end(), negatives.begin(), negatives.end());
        }
        annotations.insert(annotations.end(), derived.begin(), derived.end());
    }

    std::map<Species, std::vector<ProteinRecord>> by_species;
    for (const auto& p : proteins) {
        if (!p.species)
            throw DataError("protein '" + p.id + "' carries no species= tag");
        by_species[*p.species].push_back(p);
    }
    std::vector<Species> selected;
    if (cfg.species.empty()) {
        for (const Species sp : all_species())
            if (by_species.contains(sp)) selected.push_back(sp);
    } else {
        for (const Species sp : cfg.species) {
            if (!by_species.contains(sp))
                throw DataError("no proteins for requested species " +
                                std::string(species_token(sp)));
            selected.push_back(sp);
        }
    }
    if (selected.empty()) throw DataError("prepare: no species with data");

    std::map<std::string, std::vector<SiteAnnotation>> sites_by_protein;
    for (const auto& site : annotations) sites_by_protein[site.protein_id].push_back(site);

    std::string summary =
        "species\ttrain_positive\ttrain_negative\tindependent_positive\tindependent_negative\n";
    for (const Species sp : selected) {
        const auto representatives =
            reduce_redundancy(by_species.at(sp), cfg.redundancy_threshold);
        std::vector<PeptideWindow> windows;
        for (const auto& protein : representatives) {
            const auto it = sites_by_protein.find(protein.id);
            if (it == sites_by_protein.end()) continue;
            const auto extracted = extract_windows(protein, it->second, cfg.model.window_len);
            windows.insert(windows.end(), extracted.begin(), extracted.end());
        }
        if (windows.empty())
            throw DataError("prepare: zero windows for species " +
                            std::string(species_token(sp)));
        auto [train, independent] =
            split_train_independent(windows, cfg.train_fraction, cfg.seed);
        detail::write_artifact(out_dir, "windows/" + detail::species_file(sp, ".train.tsv"),
                               window_tsv(train), manifest);
        detail::write_artifact(out_dir,
                               "windows/" + detail::species_file(sp, ".independent.tsv"),
                               window_tsv(independent), manifest);
        const SplitCounts counts = count_split(train, independent);
        summary += std::string(species_token(sp)) + "\t" +
                   std::to_string(counts.train_positive) + "\t" +
                   std::to_string(counts.train_negative) + "\t" +
                   std::to_string(counts.independent_positive) + "\t" +
                   std::to_string(counts.independent_negative) + "\n";
    }
    detail::write_artifact(out_dir, "summary.tsv", summary, manifest);
    detail::finish_stage(out_dir, "prepare", timer.seconds(), cfg, manifest);
}

// ---------------------------------------------------------------------------
// train

namespace detail {

// Stratified validation carve for early stopping: a seeded slice of each
// label class, keeping at least one window of a class on each side whenever
// the class has two or more members.
inline std::pair<std::vector<PeptideWindow>, std::vector<PeptideWindow>> carve_validation(
    const std::vector<PeptideWindow>& windows, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("carve_validation: fraction must be in (0,1)");
    std::array<std::vector<std::size_t>, 2> strata;
    for (std::size_t i = 0; i < windows.size(); ++i)
        strata[windows[i].label == SiteLabel::Positive ? 1 : 0].push_back(i);
    std::vector<PeptideWindow> train, validation;
    for (int label = 0; label < 2; ++label) {
        auto& members = strata[static_cast<std::size_t>(label)];
        if (members.empty()) continue;
        Rng rng(derive_seed(seed, "val", static_cast<std::uint64_t>(label)));
        rng.shuffle(members);
        std::size_t n_val = static_cast<std::size_t>(
            std::lround(fraction * static_cast<double>(members.size())));
        if (members.size() >= 2)
            n_val = std::clamp<std::size_t>(n_val, 1, members.size() - 1);
        else
            n_val = 0;
        for (std::size_t i = 0; i < members.size(); ++i)
            (i < n_val ? validation : train).push_back(windows[members[i]]);
    }
    return {std::move(train), std::move(validation)};
}

inline std::string history_tsv(const TrainingState& state) {
    std::string out = "epoch\ttrain_loss\tvalidation_loss\n";
    for (std::size_t e = 0; e < state.train_loss_history.size(); ++e)
        out += std::to_string(e) + "\t" + format_double(state.train_loss_history[e]) + "\t" +
               format_double(state.validation_loss_history[e]) + "\n";
    out += "# best_epoch " + std::to_string(state.best_epoch) + " best_validation_loss " +
           format_double(state.best_validation_loss) + "\n";
    return out;
}

}  // namespace detail

inline void run_train(const RunConfig& cfg) {
    const fs::path out_dir = cfg.out_dir;
    RunManifest manifest = detail::load_or_new_manifest(out_dir);
    detail::StageTimer timer;
    const auto species = detail::resolve_species(cfg, out_dir, "windows", ".train.tsv");

    auto train_one = [&](const std::vector<PeptideWindow>& windows, const std::string& stem,
                         std::uint64_t model_seed) {
        ModelConfig mcfg = cfg.model;
        mcfg.seed = model_seed;
        auto [train_part, val_part] =
            detail::carve_validation(windows, mcfg.validation_frac, model_seed);
        const TrainResult result = train_model(train_part, val_part, mcfg);
        detail::write_artifact(out_dir, "models/" + stem + ".model.txt",
                               serialize_model(mcfg, result.params), manifest);
        detail::write_artifact(out_dir, "models/" + stem + ".history.tsv",
                               detail::history_tsv(result.state), manifest);
    };

    if (cfg.per_species) {
        for (const Species sp : species) {
            const auto windows = parse_window_tsv(
                read_text_file(out_dir / "windows" / detail::species_file(sp, ".train.tsv")));
            train_one(windows, std::string(species_token(sp)),
                      derive_seed(cfg.seed, "model", static_cast<std::uint64_t>(sp)));
        }
    } else {
        std::vector<PeptideWindow> pooled;
        for (const Species sp : species) {
            const auto windows = parse_window_tsv(
                read_text_file(out_dir / "windows" / detail::species_file(sp, ".train.tsv")));
            pooled.insert(pooled.end(), windows.begin(), windows.end());
        }
        train_one(pooled, "pooled", derive_seed(cfg.seed, "model-pooled"));
    }
    detail::finish_stage(out_dir, "train", timer.seconds(), cfg, manifest);
}

// ---------------------------------------------------------------------------
// extract

inline void run_extract(const RunConfig& cfg) {
    const fs::path out_dir = cfg.out_dir;
    RunManifest manifest = detail::load_or_new_manifest(out_dir);
    detail::StageTimer timer;
    const auto species = detail::resolve_species(cfg, out_dir, "windows", ".train.tsv");

    for (const Species sp : species) {
        const std::string model_rel =
            cfg.per_species ? "models/" + detail::species_file(sp, ".model.txt")
                            : "models/pooled.model.txt";
        const auto [mcfg, params] = load_model(read_text_file(out_dir / model_rel));
        for (const std::string_view split : {"train", "independent"}) {
            const std::string stem = std::string(species_token(sp)) + "." + std::string(split);
            const auto windows =
                parse_window_tsv(read_text_file(out_dir / "windows" / (stem + ".tsv")));
            const auto features = extract_features(params, mcfg, windows);
            detail::write_artifact(out_dir, "features/" + stem + ".tsv", feature_tsv(features),
                                   manifest);
        }
    }
    detail::finish_stage(out_dir, "extract", timer.seconds(), cfg, manifest);
}

// ---------------------------------------------------------------------------
// evaluate

namespace detail {

inline std::string roc_csv(const std::vector<RocPoint>& points) {
    std::string out = "fpr,tpr,threshold\n";
    for (const auto& p : points)
        out += format_double(p.fpr) + "," + format_double(p.tpr) + "," +
               format_double(p.threshold) + "\n";
    return out;
}

inline bool both_classes(const std::vector<int>& labels) {
    bool pos = false, neg = false;
    for (const int y : labels) (y != 0 ? pos : neg) = true;
    return pos && neg;
}

inline std::string report_row(const MetricReport& r) {
    std::string row = r.species + "\t" + r.classifier + "\t" + format_fixed(r.ca) + "\t" +
                      format_fixed(r.sn) + "\t" + format_fixed(r.sp) + "\t" +
                      format_fixed(r.mcc) + "\t" + format_fixed(r.auc) + "\t" +
                      format_fixed(r.f1) + "\t" + (r.degenerate ? "degenerate" : "-") + "\n";
    return row;
}

inline constexpr std::string_view kReportHeader =
    "species\tclassifier\tacc\tsn\tsp\tmcc\tauc\tf1\tflags\n";

// Rows in species order with an Average-of-all-species block per classifier,
// mirroring the comparison-table layout.
inline std::string report_table(const std::vector<MetricReport>& rows) {
    std::string out{kReportHeader};
    for (const auto& r : rows) out += report_row(r);
    if (!rows.empty()) {
        auto averages = aggregate_reports(rows, GroupBy::Classifier);
        for (auto& avg : averages) {
            avg.species = "Average";
            out += report_row(avg);
        }
    }
    return out;
}

inline std::string fold_table(const std::vector<MetricReport>& rows) {
    std::string out = "species\tclassifier\tfold\tacc\tsn\tsp\tmcc\tauc\tf1\tflags\n";
    for (const auto& r : rows)
        out += r.species + "\t" + r.classifier + "\t" + std::to_string(r.fold) + "\t" +
               format_fixed(r.ca) + "\t" + format_fixed(r.sn) + "\t" + format_fixed(r.sp) +
               "\t" + format_fixed(r.mcc) + "\t" + format_fixed(r.auc) + "\t" +
               format_fixed(r.f1) + "\t" + (r.degenerate ? "degenerate" : "-") + "\n";
    return out;
}

inline std::vector<FeatureVector> lookup_features(
    const std::map<std::string, const FeatureVector*>& by_origin,
    const std::vector<PeptideWindow>& windows) {
    std::vector<FeatureVector> out;
    out.reserve(windows.size());
    for (const auto& w : windows) {
        const auto it = by_origin.find(w.origin.str());
        if (it == by_origin.end())
            throw DataError("no extracted features for window " + w.origin.str());
        out.push_back(*it->second);
    }
    return out;
}

}  // namespace detail

inline void run_evaluate(const RunConfig& cfg) {
    const fs::path out_dir = cfg.out_dir;
    RunManifest manifest = detail::load_or_new_manifest(out_dir);
    detail::StageTimer timer;
    const auto species = detail::resolve_species(cfg, out_dir, "features", ".train.tsv");

    std::map<Protocol, std::vector<MetricReport>> tables;
    std::map<Protocol, std::vector<MetricReport>> fold_tables;

    for (const Species sp : species) {
        const std::string sp_token(species_token(sp));
        const auto sp_index = static_cast<std::uint64_t>(sp);
        const auto f_train = parse_feature_tsv(
            read_text_file(out_dir / "features" / detail::species_file(sp, ".train.tsv")));
        const auto f_ind = parse_feature_tsv(read_text_file(
            out_dir / "features" / detail::species_file(sp, ".independent.tsv")));
        const std::string model_rel =
            cfg.per_species ? "models/" + detail::species_file(sp, ".model.txt")
                            : "models/pooled.model.txt";
        const auto loaded = load_model(read_text_file(out_dir / model_rel));
        const LstmParameters& params = loaded.second;

        // The five ensembles, fitted once on the training-split features and
        // serialized alongside the network.
        std::vector<EnsembleModel> fitted;
        for (std::size_t i = 0; i < cfg.ensembles.size(); ++i) {
            EnsembleConfig ecfg = cfg.ensembles[i];
            ecfg.seed = derive_seed(cfg.seed, "ensemble", sp_index, i);
            EnsembleModel model = fit_ensemble(f_train, ecfg);
            detail::write_artifact(
                out_dir,
                "models/" + sp_token + "." +
                    std::string(ensemble_kind_token(ecfg.kind)) + ".ensemble.txt",
                serialize_ensemble(model), manifest);
            fitted.push_back(std::move(model));
        }

        auto batch_scores = [&](const std::vector<FeatureVector>& batch) {
            std::vector<std::pair<std::string, std::vector<double>>> scored;
            std::vector<double> lstm;
            lstm.reserve(batch.size());
            for (const auto& f : batch) lstm.push_back(head_probability(params, f.values));
            scored.emplace_back("LSTM", std::move(lstm));
            for (const auto& model : fitted)
                scored.emplace_back(std::string(ensemble_kind_token(model.config.kind)),
                                    predict_proba(model, batch));
            return scored;
        };

        for (const Protocol protocol : cfg.protocols) {
            const std::string proto_token(protocol_token(protocol));
            if (protocol == Protocol::Train || protocol == Protocol::Independent) {
                const auto& batch = protocol == Protocol::Train ? f_train : f_ind;
                std::vector<int> labels;
                labels.reserve(batch.size());
                for (const auto& f : batch)
                    labels.push_back(f.label == SiteLabel::Positive ? 1 : 0);
                for (auto& [name, scores] : batch_scores(batch)) {
                    MetricReport report = score_report(scores, labels);
                    report.species = sp_token;
                    report.classifier = name;
                    report.protocol = proto_token;
                    tables[protocol].push_back(report);
                    if (detail::both_classes(labels))
                        detail::write_artifact(
                            out_dir, "roc/" + sp_token + "." + proto_token + "." + name + ".csv",
                            detail::roc_csv(roc_curve(scores, labels)), manifest);
                }
                continue;
            }

            const int k = protocol == Protocol::Cv5 ? 5 : 10;
            auto windows = parse_window_tsv(read_text_file(
                out_dir / "windows" / detail::species_file(sp, ".train.tsv")));
            {
                const auto independent = parse_window_tsv(read_text_file(
                    out_dir / "windows" / detail::species_file(sp, ".independent.tsv")));
                windows.insert(windows.end(), independent.begin(), independent.end());
            }
            const std::uint64_t cv_seed =
                derive_seed(cfg.seed, "cv", sp_index, static_cast<std::uint64_t>(k));
            const FoldPlan plan = make_fold_plan(windows.size(), k, cv_seed);

            int fold_counter = 0;
            ModelRecipe recipe;
            if (cfg.cv_reuse_extractor) {
                // Cheaper variant: one shared extractor; only the ensembles
                // are refit per fold.
                auto by_origin = std::make_shared<std::map<std::string, const FeatureVector*>>();
                auto storage = std::make_shared<std::vector<FeatureVector>>();
                storage->insert(storage->end(), f_train.begin(), f_train.end());
                storage->insert(storage->end(), f_ind.begin(), f_ind.end());
                for (const auto& f : *storage) (*by_origin)[f.origin.str()] = &f;
                recipe = [&, by_origin, storage](const std::vector<PeptideWindow>& fold_train)
                    -> NamedScorers {
                    const int fold = fold_counter++;
                    const std::uint64_t fold_seed =
                        derive_seed(cv_seed, "fold", static_cast<std::uint64_t>(fold));
                    const auto train_feats = detail::lookup_features(*by_origin, fold_train);
                    NamedScorers scorers;
                    scorers.emplace_back(
                        "LSTM", [&, by_origin](const std::vector<PeptideWindow>& test) {
                            std::vector<double> out;
                            for (const auto& f : detail::lookup_features(*by_origin, test))
                                out.push_back(head_probability(params, f.values));
                            return out;
                        });
                    for (std::size_t i = 0; i < cfg.ensembles.size(); ++i) {
                        EnsembleConfig ecfg = cfg.ensembles[i];
                        ecfg.seed = derive_seed(fold_seed, "ensemble", i);
                        auto model =
                            std::make_shared<EnsembleModel>(fit_ensemble(train_feats, ecfg));
                        scorers.emplace_back(
                            std::string(ensemble_kind_token(ecfg.kind)),
                            [&, by_origin, model](const std::vector<PeptideWindow>& test) {
                                return predict_proba(*model,
                                                     detail::lookup_features(*by_origin, test));
                            });
                    }
                    return scorers;
                };
            } else {
                // Conservative variant: the whole pipeline, network included,
                // is retrained inside every fold.
                recipe = [&](const std::vector<PeptideWindow>& fold_train) -> NamedScorers {
                    const int fold = fold_counter++;
                    const std::uint64_t fold_seed =
                        derive_seed(cv_seed, "fold", static_cast<std::uint64_t>(fold));
                    ModelConfig fold_cfg = cfg.model;
                    fold_cfg.seed = derive_seed(fold_seed, "model");
                    auto [train_part, val_part] = detail::carve_validation(
                        fold_train, fold_cfg.validation_frac, fold_cfg.seed);
                    auto fold_params = std::make_shared<LstmParameters>(
                        train_model(train_part, val_part, fold_cfg).params);
                    const auto train_feats =
                        extract_features(*fold_params, fold_cfg, fold_train);
                    NamedScorers scorers;
                    scorers.emplace_back(
                        "LSTM", [fold_params, fold_cfg](const std::vector<PeptideWindow>& test) {
                            std::vector<double> out;
                            const Vocabulary vocab;
                            for (const auto& w : test)
                                out.push_back(infer_probability(encode_window(w, vocab),
                                                                *fold_params, fold_cfg));
                            return out;
                        });
                    for (std::size_t i = 0; i < cfg.ensembles.size(); ++i) {
                        EnsembleConfig ecfg = cfg.ensembles[i];
                        ecfg.seed = derive_seed(fold_seed, "ensemble", i);
                        auto model =
                            std::make_shared<EnsembleModel>(fit_ensemble(train_feats, ecfg));
                        scorers.emplace_back(
                            std::string(ensemble_kind_token(ecfg.kind)),
                            [fold_params, fold_cfg,
                             model](const std::vector<PeptideWindow>& test) {
                                return predict_proba(
                                    *model, extract_features(*fold_params, fold_cfg, test));
                            });
                    }
                    return scorers;
                };
            }

            CrossValidationResult cv = cross_validate(windows, recipe, plan);
            for (auto& report : cv.averaged) {
                report.species = sp_token;
                report.protocol = proto_token;
                tables[protocol].push_back(report);
            }
            for (auto& report : cv.fold_reports) {
                report.species = sp_token;
                report.protocol = proto_token;
                fold_tables[protocol].push_back(report);
            }
            if (detail::both_classes(cv.pooled_labels))
                for (const auto& [name, scores] : cv.pooled_scores)
                    detail::write_artifact(
                        out_dir, "roc/" + sp_token + "." + proto_token + "." + name + ".csv",
                        detail::roc_csv(roc_curve(scores, cv.pooled_labels)), manifest);
        }
    }

    for (const Protocol protocol : cfg.protocols) {
        const std::string proto_token(protocol_token(protocol));
        detail::write_artifact(out_dir, "reports/" + proto_token + ".tsv",
                               detail::report_table(tables[protocol]), manifest);
        if (protocol == Protocol::Cv5 || protocol == Protocol::Cv10)
            detail::write_artifact(out_dir, "reports/" + proto_token + ".folds.tsv",
                                   detail::fold_table(fold_tables[protocol]), manifest);
    }
    detail::finish_stage(out_dir, "evaluate", timer.seconds(), cfg, manifest);
}

// ---------------------------------------------------------------------------
// visualize

inline void run_visualize(const RunConfig& cfg) {
    const fs::path out_dir = cfg.out_dir;
    RunManifest manifest = detail::load_or_new_manifest(out_dir);
    detail::StageTimer timer;
    const auto species = detail::resolve_species(cfg, out_dir, "features", ".train.tsv");

    for (const Species sp : species) {
        const std::string sp_token(species_token(sp));
        std::vector<FeatureVector> features;
        auto append_split = [&](const std::string& split) {
            const auto part = parse_feature_tsv(read_text_file(
                out_dir / "features" / (sp_token + "." + split + ".tsv")));
            features.insert(features.end(), part.begin(), part.end());
        };
        if (cfg.tsne_split == "all") {
            append_split("train");
            append_split("independent");
        } else {
            append_split(cfg.tsne_split);
        }
        const auto n = features.size();
        if (n < 10)
            throw DataError("visualize: only " + std::to_string(n) + " points for " + sp_token);
        TsneConfig tcfg = cfg.tsne;
        tcfg.seed = derive_seed(cfg.seed, "tsne", static_cast<std::uint64_t>(sp));
        const double max_perplexity = (static_cast<double>(n) - 1.0) / 3.0;
        if (tcfg.perplexity > max_perplexity) {
            tcfg.perplexity = max_perplexity;
            std::cerr << "visualize: lowering perplexity to " << format_double(tcfg.perplexity)
                      << " for " << sp_token << " (" << n << " points)\n";
        }
        const Embedding2D embedding = tsne_embed(features, tcfg);
        std::string csv = "# deepace-tsne 1 species=" + sp_token + " split=" + cfg.tsne_split +
                          " n=" + std::to_string(n) +
                          " perplexity=" + format_double(tcfg.perplexity) +
                          " iterations=" + std::to_string(tcfg.iterations) +
                          " seed=" + std::to_string(cfg.seed) + " kl_post_exaggeration=" +
                          format_double(embedding.kl_post_exaggeration) +
                          " kl_final=" + format_double(embedding.kl_final) + "\n";
        csv += "origin,label,x,y\n";
        for (std::size_t i = 0; i < n; ++i)
            csv += features[i].origin.str() + "," +
                   (features[i].label == SiteLabel::Positive ? "1" : "0") + "," +
                   format_double(embedding.points[i][0]) + "," +
                   format_double(embedding.points[i][1]) + "\n";
        detail::write_artifact(out_dir, "tsne/" + sp_token + ".csv", csv, manifest);
    }
    detail::finish_stage(out_dir, "visualize", timer.seconds(), cfg, manifest);
}

}  // namespace deepace
