#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deepace/common.hpp"
#include "deepace/rng.hpp"
#include "deepace/species.hpp"

namespace deepace {

inline constexpr std::string_view kAminoAcids = "ACDEFGHIKLMNPQRSTVWY";
inline constexpr char kPadToken = 'X';
inline constexpr int kWindowLength = 41;

inline bool is_standard_residue(char c) {
    return kAminoAcids.find(c) != std::string_view::npos;
}

struct ProteinRecord {
    std::string id;
    std::optional<Species> species;  // from a `species=` header tag, if present
    std::string residues;
    bool has_nonstandard = false;  // letters outside the 20-AA alphabet
};

enum class SiteLabel { Negative = 0, Positive = 1 };

struct SiteAnnotation {
    std::string protein_id;
    int position = 0;  // 1-based residue index, must point at a lysine
    SiteLabel label = SiteLabel::Negative;
};

struct WindowOrigin {
    std::string protein_id;
    int position = 0;

    std::string str() const { return protein_id + ":" + std::to_string(position); }
    bool operator==(const WindowOrigin&) const = default;
    auto operator<=>(const WindowOrigin&) const = default;
};

struct PeptideWindow {
    std::string residues;  // fixed length, pad token only at the flanks
    SiteLabel label = SiteLabel::Negative;
    Species species = Species::EColi;
    WindowOrigin origin;
};

struct SplitCounts {
    long train_positive = 0, train_negative = 0;
    long independent_positive = 0, independent_negative = 0;
};

struct SpeciesDataset {
    Species species = Species::EColi;
    std::vector<PeptideWindow> train;
    std::vector<PeptideWindow> independent;
    SplitCounts counts;
};

// ---------------------------------------------------------------------------
// FASTA

// Header grammar: `>id [key=value ...]`. The only recognized key is
// `species=`. Sequence lines are concatenated and uppercased; letters outside
// the 20-AA alphabet are kept and flagged on the record.
inline std::vector<ProteinRecord> parse_fasta(std::string_view text) {
    std::vector<ProteinRecord> records;
    std::set<std::string> seen_ids;
    bool any_header = false;
    for (const std::string_view raw : split_lines(text)) {
        const std::string_view line = trim(raw);
        if (line.empty()) continue;
        if (line.front() == '>') {
            any_header = true;
            ProteinRecord rec;
            const auto fields = split(trim(line.substr(1)), ' ');
            if (fields.empty() || trim(fields.front()).empty())
                throw DataError("fasta: header with empty id");
            rec.id = std::string(trim(fields.front()));
            for (std::size_t i = 1; i < fields.size(); ++i) {
                const std::string_view f = trim(fields[i]);
                if (f.rfind("species=", 0) == 0) {
                    const std::string_view tok = f.substr(8);
                    const auto sp = parse_species(tok);
                    if (!sp)
                        throw DataError("fasta: unknown species '" + std::string(tok) +
                                        "' in header for " + rec.id);
                    rec.species = *sp;
                }
            }
            if (!seen_ids.insert(rec.id).second)
                throw DataError("fasta: duplicate id '" + rec.id + "'");
            records.push_back(std::move(rec));
        } else {
            if (!any_header) throw DataError("fasta: sequence data before any header");
            auto& rec = records.back();
            for (char c : line) {
                if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
                if (!is_standard_residue(c)) rec.has_nonstandard = true;
                rec.residues.push_back(c);
            }
        }
    }
    if (records.empty()) throw DataError("fasta: no records found");
    for (const auto& rec : records)
        if (rec.residues.empty())
            throw DataError("fasta: record '" + rec.id + "' has no sequence");
    return records;
}

inline std::string serialize_fasta(const std::vector<ProteinRecord>& records) {
    std::string out;
    for (const auto& rec : records) {
        out += '>';
        out += rec.id;
        if (rec.species) {
            out += " species=";
            out += species_token(*rec.species);
        }
        out += '\n';
        for (std::size_t i = 0; i < rec.residues.size(); i += 60) {
            out += rec.residues.substr(i, 60);
            out += '\n';
        }
    }
    return out;
}

// Tab-separated `protein_id \t position \t label`, label in {0,1}.
inline std::vector<SiteAnnotation> parse_annotations(std::string_view text) {
    std::vector<SiteAnnotation> sites;
    std::set<std::pair<std::string, int>> seen;
    for (const std::string_view raw : split_lines(text)) {
        const std::string_view line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        const auto fields = split(line, '\t');
        if (fields.size() != 3)
            throw DataError("annotations: expected 3 tab-separated fields, got '" +
                            std::string(line) + "'");
        SiteAnnotation site;
        site.protein_id = std::string(trim(fields[0]));
        site.position = static_cast<int>(parse_int(fields[1], "annotation position"));
        const long long lab = parse_int(fields[2], "annotation label");
        if (lab != 0 && lab != 1)
            throw DataError("annotations: label must be 0 or 1");
        site.label = lab == 1 ? SiteLabel::Positive : SiteLabel::Negative;
        if (site.position < 1)
            throw DataError("annotations: position must be >= 1 for " + site.protein_id);
        if (!seen.insert({site.protein_id, site.position}).second)
            throw DataError("annotations: duplicate site " + site.protein_id + ":" +
                            std::to_string(site.position));
        sites.push_back(std::move(site));
    }
    return sites;
}

// Every lysine not covered by `annotated` becomes a negative site. Used when
// an annotation file supplies positives only.
inline std::vector<SiteAnnotation> derive_negative_sites(
    const ProteinRecord& protein, const std::vector<SiteAnnotation>& annotated) {
    std::set<int> covered;
    for (const auto& site : annotated)
        if (site.protein_id == protein.id) covered.insert(site.position);
    std::vector<SiteAnnotation> negatives;
    for (std::size_t i = 0; i < protein.residues.size(); ++i) {
        const int pos = static_cast<int>(i) + 1;
        if (protein.residues[i] == 'K' && !covered.contains(pos))
            negatives.push_back({protein.id, pos, SiteLabel::Negative});
    }
    return negatives;
}

// ---------------------------------------------------------------------------
// Windows

inline std::vector<PeptideWindow> extract_windows(
    const ProteinRecord& protein, const std::vector<SiteAnnotation>& sites,
    int window_len = kWindowLength) {
    if (window_len < 1 || window_len % 2 == 0)
        throw std::invalid_argument("extract_windows: window length must be odd");
    if (!protein.species)
        throw DataError("extract_windows: protein '" + protein.id + "' has no species tag");
    const int half = (window_len - 1) / 2;
    const int len = static_cast<int>(protein.residues.size());
    std::vector<PeptideWindow> windows;
    windows.reserve(sites.size());
    for (const auto& site : sites) {
        if (site.protein_id != protein.id)
            throw DataError("extract_windows: site for '" + site.protein_id +
                            "' applied to protein '" + protein.id + "'");
        if (site.position < 1 || site.position > len)
            throw DataError("extract_windows: position " + std::to_string(site.position) +
                            " out of range for " + protein.id);
        if (protein.residues[static_cast<std::size_t>(site.position - 1)] != 'K')
            throw DataError("extract_windows: residue at " + protein.id + ":" +
                            std::to_string(site.position) + " is not K");
        PeptideWindow w;
        w.residues.reserve(static_cast<std::size_t>(window_len));
        for (int p = site.position - half; p <= site.position + half; ++p)
            w.residues.push_back(p >= 1 && p <= len
                                     ? protein.residues[static_cast<std::size_t>(p - 1)]
                                     : kPadToken);
        w.label = site.label;
        w.species = *protein.species;
        w.origin = {protein.id, site.position};
        windows.push_back(std::move(w));
    }
    return windows;
}

// ---------------------------------------------------------------------------
// Redundancy reduction

// Fraction of matching residues in the best ungapped sliding alignment,
// normalized by the shorter length.
inline double sequence_identity(std::string_view a, std::string_view b) {
    const int la = static_cast<int>(a.size());
    const int lb = static_cast<int>(b.size());
    if (la == 0 || lb == 0) return 0.0;
    int best = 0;
    for (int offset = -(lb - 1); offset <= la - 1; ++offset) {
        const int lo = std::max(0, offset);
        const int hi = std::min(la, lb + offset);
        int matches = 0;
        for (int i = lo; i < hi; ++i)
            if (a[static_cast<std::size_t>(i)] == b[static_cast<std::size_t>(i - offset)])
                ++matches;
        best = std::max(best, matches);
    }
    return static_cast<double>(best) / static_cast<double>(std::min(la, lb));
}

// Greedy incremental clustering in descending length order, an approximation
// of CD-HIT: a sequence joins the first cluster whose representative it
// matches at or above the identity threshold, otherwise founds a new cluster.
// Returns the representatives (longest member of each cluster).
inline std::vector<ProteinRecord> reduce_redundancy(
    const std::vector<ProteinRecord>& proteins, double identity_threshold = 0.30) {
    if (proteins.empty()) throw DataError("reduce_redundancy: empty input");
    if (!(identity_threshold > 0.0 && identity_threshold <= 1.0))
        throw std::invalid_argument("reduce_redundancy: threshold must be in (0,1]");
    std::vector<std::size_t> order(proteins.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        if (proteins[x].residues.size() != proteins[y].residues.size())
            return proteins[x].residues.size() > proteins[y].residues.size();
        return proteins[x].id < proteins[y].id;
    });
    std::vector<ProteinRecord> representatives;
    for (const std::size_t idx : order) {
        const auto& candidate = proteins[idx];
        bool joined = false;
        for (const auto& rep : representatives) {
            if (sequence_identity(candidate.residues, rep.residues) >= identity_threshold) {
                joined = true;
                break;
            }
        }
        if (!joined) representatives.push_back(candidate);
    }
    return representatives;
}

// ---------------------------------------------------------------------------
// Train/independent split

// Stratified by label within species; each stratum is shuffled with its own
// seed substream and the first round(frac * size) windows go to train.
inline std::pair<std::vector<PeptideWindow>, std::vector<PeptideWindow>>
split_train_independent(const std::vector<PeptideWindow>& windows,
                        double train_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0))
        throw std::invalid_argument("split: train fraction must be in (0,1)");
    std::map<std::pair<int, int>, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < windows.size(); ++i)
        strata[{static_cast<int>(windows[i].species),
                static_cast<int>(windows[i].label)}].push_back(i);
    // Both classes must be present for every species in the corpus.
    for (const auto& [key, members] : strata) {
        const auto other = std::make_pair(key.first, 1 - key.second);
        if (!strata.contains(other))
            throw DataError(std::string("split: species ") +
                            std::string(species_token(static_cast<Species>(key.first))) +
                            " has only one class");
        (void)members;
    }
    std::vector<PeptideWindow> train, independent;
    for (auto& [key, members] : strata) {
        Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(key.first),
                            static_cast<std::uint64_t>(key.second)));
        rng.shuffle(members);
        const auto n_train = static_cast<std::size_t>(
            std::lround(train_frac * static_cast<double>(members.size())));
        for (std::size_t i = 0; i < members.size(); ++i)
            (i < n_train ? train : independent).push_back(windows[members[i]]);
    }
    return {std::move(train), std::move(independent)};
}

inline SplitCounts count_split(const std::vector<PeptideWindow>& train,
                               const std::vector<PeptideWindow>& independent) {
    SplitCounts c;
    for (const auto& w : train)
        (w.label == SiteLabel::Positive ? c.train_positive : c.train_negative)++;
    for (const auto& w : independent)
        (w.label == SiteLabel::Positive ? c.independent_positive : c.independent_negative)++;
    return c;
}

// ---------------------------------------------------------------------------
// Window TSV: `species \t origin \t sequence \t label`, no header, LF endings.

inline std::string window_tsv(const std::vector<PeptideWindow>& windows) {
    std::string out;
    for (const auto& w : windows) {
        out += species_token(w.species);
        out += '\t';
        out += w.origin.str();
        out += '\t';
        out += w.residues;
        out += '\t';
        out += w.label == SiteLabel::Positive ? '1' : '0';
        out += '\n';
    }
    return out;
}

inline std::vector<PeptideWindow> parse_window_tsv(std::string_view text) {
    std::vector<PeptideWindow> windows;
    for (const std::string_view line : split_lines(text)) {
        if (trim(line).empty()) continue;
        const auto fields = split(line, '\t');
        if (fields.size() != 4)
            throw DataError("window tsv: expected 4 fields, got '" + std::string(line) + "'");
        PeptideWindow w;
        const auto sp = parse_species(fields[0]);
        if (!sp) throw DataError("window tsv: unknown species '" + std::string(fields[0]) + "'");
        w.species = *sp;
        const auto colon = fields[1].rfind(':');
        if (colon == std::string_view::npos)
            throw DataError("window tsv: malformed origin '" + std::string(fields[1]) + "'");
        w.origin.protein_id = std::string(fields[1].substr(0, colon));
        w.origin.position =
            static_cast<int>(parse_int(fields[1].substr(colon + 1), "origin position"));
        w.residues = std::string(fields[2]);
        if (w.residues.size() % 2 == 0 || w.residues.empty())
            throw DataError("window tsv: window length must be odd");
        if (w.residues[w.residues.size() / 2] != 'K')
            throw DataError("window tsv: center residue is not K in " + w.origin.str());
        const long long lab = parse_int(fields[3], "window label");
        if (lab != 0 && lab != 1) throw DataError("window tsv: label must be 0 or 1");
        w.label = lab == 1 ? SiteLabel::Positive : SiteLabel::Negative;
        windows.push_back(std::move(w));
    }
    return windows;
}

}  // namespace deepace
