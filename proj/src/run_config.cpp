#include "doprompt/run_config.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "doprompt/errors.hpp"

namespace doprompt {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw ConfigError(fmt::format("config key '{}': expected {}, got '{}'", key, want, value));
}

template <typename T>
T parse_number(std::string_view key, std::string_view value, std::string_view want) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty()) bad_value(key, value, want);
  return out;
}

std::size_t parse_size(std::string_view key, std::string_view value) {
  return parse_number<std::size_t>(key, value, "a non-negative integer");
}

template <typename T>
std::vector<T> parse_list(std::string_view key, std::string_view value, std::string_view want) {
  std::vector<T> out;
  if (trim(value).empty()) return out;
  std::size_t start = 0;
  while (start <= value.size()) {
    const auto comma = value.find(',', start);
    const auto item = trim(value.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                                : comma - start));
    out.push_back(parse_number<T>(key, item, want));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  return fmt::format("{}", fmt::join(v, ","));
}

struct KeyHandler {
  std::string name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define DP_SIZE_KEY(key, field)                                                     \
  KeyHandler{key, [](RunConfig& c, std::string_view v) { c.field = parse_size(key, v); }, \
             [](const RunConfig& c) { return std::to_string(c.field); }}
#define DP_REAL_KEY(key, field)                                                                  \
  KeyHandler{key,                                                                                \
             [](RunConfig& c, std::string_view v) { c.field = parse_number<double>(key, v, "a number"); }, \
             [](const RunConfig& c) { return fmt::format("{}", c.field); }}

const std::vector<KeyHandler>& handlers() {
  static const std::vector<KeyHandler> table{
      KeyHandler{"variant", [](RunConfig& c, std::string_view v) { c.train.variant = parse_variant(v); },
                 [](const RunConfig& c) { return std::string(variant_name(c.train.variant)); }},
      KeyHandler{"target_domain",
                 [](RunConfig& c, std::string_view v) {
                   c.train.target_domain = parse_number<int>("target_domain", v, "an integer");
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.target_domain); }},
      DP_SIZE_KEY("steps", train.steps),
      DP_SIZE_KEY("batch_per_domain", train.batch_per_domain),
      DP_REAL_KEY("lr", train.lr),
      DP_REAL_KEY("weight_decay", train.weight_decay),
      DP_REAL_KEY("lambda", train.lambda),
      DP_SIZE_KEY("prompt_length", train.prompt_length),
      KeyHandler{"seed",
                 [](RunConfig& c, std::string_view v) {
                   c.train.seed = parse_number<std::uint64_t>("seed", v, "a non-negative integer");
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      DP_SIZE_KEY("eval_interval", train.eval_interval),
      DP_SIZE_KEY("log_interval", train.log_interval),
      DP_REAL_KEY("val_fraction", train.val_fraction),
      DP_SIZE_KEY("image_size", train.model.image_size),
      DP_SIZE_KEY("patch_size", train.model.patch_size),
      DP_SIZE_KEY("channels", train.model.channels),
      DP_SIZE_KEY("embed_dim", train.model.embed_dim),
      DP_SIZE_KEY("depth", train.model.depth),
      DP_SIZE_KEY("num_heads", train.model.num_heads),
      DP_SIZE_KEY("mlp_ratio", train.model.mlp_ratio),
      DP_REAL_KEY("dropout", train.model.dropout),
      DP_SIZE_KEY("num_classes", train.model.num_classes),
      DP_SIZE_KEY("num_domains", train.num_domains),
      DP_SIZE_KEY("per_domain", train.per_domain),
      KeyHandler{"data_seed",
                 [](RunConfig& c, std::string_view v) {
                   c.data_seed = parse_number<std::uint64_t>("data_seed", v, "a non-negative integer");
                 },
                 [](const RunConfig& c) { return std::to_string(c.data_seed); }},
      KeyHandler{"data", [](RunConfig& c, std::string_view v) { c.data = std::string(v); },
                 [](const RunConfig& c) { return c.data; }},
      KeyHandler{"seeds",
                 [](RunConfig& c, std::string_view v) {
                   c.seeds = parse_list<std::uint64_t>("seeds", v, "comma-separated integers");
                 },
                 [](const RunConfig& c) { return join(c.seeds); }},
      KeyHandler{"targets",
                 [](RunConfig& c, std::string_view v) {
                   c.targets = parse_list<int>("targets", v, "comma-separated integers");
                 },
                 [](const RunConfig& c) { return join(c.targets); }},
      KeyHandler{"lengths",
                 [](RunConfig& c, std::string_view v) {
                   c.lengths = parse_list<std::size_t>("lengths", v, "comma-separated integers");
                 },
                 [](const RunConfig& c) { return join(c.lengths); }},
  };
  return table;
}

#undef DP_SIZE_KEY
#undef DP_REAL_KEY

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  for (const KeyHandler& h : handlers()) {
    if (h.name == key) {
      try {
        h.set(*this, value);
      } catch (const ConfigError& e) {
        const std::string msg = e.what();
        if (msg.find(std::string(key)) != std::string::npos) throw;
        throw ConfigError(fmt::format("config key '{}': {}", key, msg));
      }
      return;
    }
  }
  throw ConfigError(fmt::format("unknown config key '{}'", key));
}

void RunConfig::apply(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError(fmt::format("expected key=value, got '{}'", assignment));
  }
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

void RunConfig::validate() const {
  train.validate();
  if (seeds.empty()) throw ConfigError("config key 'seeds': at least one seed required");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= train.num_domains) {
      throw ConfigError(fmt::format("config key 'targets': domain {} outside [0, {})", t, train.num_domains));
    }
  }
  if (lengths.empty()) throw ConfigError("config key 'lengths': at least one length required");
  if (std::find(lengths.begin(), lengths.end(), 0u) != lengths.end()) {
    throw ConfigError("config key 'lengths': prompt lengths must be positive");
  }
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const KeyHandler& h : handlers()) out += h.name + " = " + h.get(*this) + "\n";
  return out;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const KeyHandler& h : handlers()) n.push_back(h.name);
    return n;
  }();
  return names;
}

RunConfig parse_run_config(std::string_view text, std::string_view origin) {
  RunConfig config;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::string_view view = line;
    if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    try {
      config.apply(view);
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("{}:{}: {}", origin, number, e.what()));
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config file '{}'", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str(), path.string());
}

}  // namespace doprompt
