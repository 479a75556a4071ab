#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace deepace {

// The eight prokaryotic species the predictor covers.
enum class Species {
    EColi = 0,
    CGlutamicum,
    MTuberculosis,
    BSubtilis,
    STyphimurium,
    GKaustophilus,
    BVelezensis,
    SEriocheiris,
};

inline constexpr int kSpeciesCount = 8;

inline constexpr std::array<Species, kSpeciesCount> all_species() {
    return {Species::EColi,        Species::CGlutamicum, Species::MTuberculosis,
            Species::BSubtilis,    Species::STyphimurium, Species::GKaustophilus,
            Species::BVelezensis,  Species::SEriocheiris};
}

// Canonical tokens, usable in file names and TSV columns.
inline constexpr std::string_view species_token(Species s) {
    switch (s) {
        case Species::EColi: return "E.coli";
        case Species::CGlutamicum: return "C.glutamicum";
        case Species::MTuberculosis: return "M.tuberculosis";
        case Species::BSubtilis: return "B.subtilis";
        case Species::STyphimurium: return "S.typhimurium";
        case Species::GKaustophilus: return "G.kaustophilus";
        case Species::BVelezensis: return "B.velezensis";
        case Species::SEriocheiris: return "S.eriocheiris";
    }
    return "?";
}

inline std::optional<Species> parse_species(std::string_view token) {
    for (const Species s : all_species())
        if (species_token(s) == token) return s;
    return std::nullopt;
}

}  // namespace deepace
