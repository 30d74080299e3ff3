#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmdir/prior.hpp"

namespace lmdir::cli {

inline constexpr int kOk = 0;
inline constexpr int kDomainError = 1;
inline constexpr int kUsageError = 2;

// args excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Provider endpoints and limits from JSON; absent keys keep their defaults.
prior::ProviderConfig provider_config_from_json(const nlohmann::json& j);

}  // namespace lmdir::cli
