#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace periloom::cli {

/// Exit codes of the `periloom` tool.
enum ExitCode : int { kOk = 0, kConfigOrData = 1, kUsage = 2, kInternal = 3 };

/// Built-in defaults for every config field.
nlohmann::ordered_json default_config();

/// Config after layering default < PERILOOM_SEED < file < flags, with the
/// layer each leaf came from. Section seeds left at their default are
/// derived from the global seed.
struct ResolvedConfig {
    nlohmann::ordered_json value;
    std::vector<std::pair<std::string, std::string>> sources;  // JSON pointer -> layer, in document order

    /// FNV-1a of the canonical config, excluding output_dir.
    std::string hash() const;
    /// One "pointer = value  (layer)" line per leaf.
    std::string explain() const;
    const std::string& source_of(const std::string& pointer) const;
};

ResolvedConfig resolve_config(const nlohmann::json& file, const nlohmann::json& flags,
                              std::optional<std::uint64_t> env_seed);

/// Reads PERILOOM_SEED; ValidationError when set but not an unsigned integer.
std::optional<std::uint64_t> env_seed();

/// Runs one invocation (args exclude the program name). Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace periloom::cli
