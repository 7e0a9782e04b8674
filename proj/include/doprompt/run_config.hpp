#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "doprompt/pipeline.hpp"

namespace doprompt {

/// Everything a CLI run needs: the training configuration plus the sweep
/// axes used by `ablate` and `sweep-length`.
struct RunConfig {
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::vector<int> targets;  // empty = every domain
  std::vector<std::size_t> lengths{2, 4, 8, 16, 32};
  std::string data;  // dataset path; empty = generate from num_domains/per_domain
  std::uint64_t data_seed = 0;

  /// Applies one `key=value` assignment. Throws ConfigError naming the key.
  void set(std::string_view key, std::string_view value);
  /// Applies `key=value`; throws ConfigError if there is no '='.
  void apply(std::string_view assignment);
  void validate() const;

  /// Canonical key=value text, one per line, in a fixed order.
  std::string to_text() const;
  static const std::vector<std::string>& keys();
};

/// Reads a config file of `key = value` lines ('#' starts a comment).
/// Throws ConfigError naming the path if it cannot be opened, or the
/// offending key and line.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(std::string_view text, std::string_view origin = "<text>");

}  // namespace doprompt
