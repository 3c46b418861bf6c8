#pragma once

#include <iosfwd>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "qfat/gmm.hpp"
#include "qfat/modes.hpp"

namespace qfat::cli {

/// Runs one subcommand. argv[0] is the program name. Returns 0 on success,
/// 1 on invalid input and 2 on numerical failure; diagnostics go to `err`.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& argv);

/// {"weights": [...], "means": [[...]], "stddevs": [[...]]}
GmmParams gmm_from_json(const nlohmann::json& j);
nlohmann::json gmm_to_json(const GmmParams& gmm);

ModeFinderConfig mode_config_from_json(const nlohmann::json& j);
nlohmann::json mode_set_to_json(const ModeSet& modes);

}  // namespace qfat::cli
