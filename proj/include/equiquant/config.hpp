#pragma once

// Flat `key = value` configuration files. `#` starts a comment; blank lines are
// ignored. Keys are the field names of TrainConfig and ModelConfig plus a few
// run-level settings (data path, split fractions, initial checkpoint).

#include <array>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "equiquant/data.hpp"
#include "equiquant/model.hpp"
#include "equiquant/training.hpp"

namespace equiquant {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using KeyValues = std::map<std::string, std::string>;

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::size_t line_no = 0;
  for (std::size_t pos = 0; pos <= text.size();) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (const std::size_t hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (kv.count(key)) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key " + key);
    kv[key] = value;
  }
  return kv;
}

/// Everything `train` needs, resolved from a config file.
struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  std::string data;                            // extended-XYZ path
  std::array<double, 3> split{0.8, 0.1, 0.1};  // train, val, test
  std::uint64_t split_seed = 0;
  std::string init;  // optional float checkpoint to fine-tune from
  std::uint64_t init_seed = 0;
};

namespace detail {

template <class T>
T parse_value(const std::string& key, const std::string& v) {
  T out{};
  const char* b = v.data();
  const char* e = b + v.size();
  auto res = std::from_chars(b, e, out);
  if (res.ec != std::errc() || res.ptr != e) throw ConfigError("config key " + key + ": cannot parse '" + v + "'");
  return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> items;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) items.emplace_back(trim(item));
  return items;
}

}  // namespace detail

inline RunConfig resolve_config(const KeyValues& kv) {
  RunConfig rc;
  TrainConfig& t = rc.train;
  ModelConfig& m = rc.model;
  for (const auto& [k, v] : kv) {
    using detail::parse_value;
    if (k == "epochs") t.epochs = parse_value<std::size_t>(k, v);
    else if (k == "warmup_epochs") t.warmup_epochs = parse_value<std::size_t>(k, v);
    else if (k == "lr") t.lr = parse_value<double>(k, v);
    else if (k == "lambda_energy") t.lambda_energy = parse_value<double>(k, v);
    else if (k == "lambda_force") t.lambda_force = parse_value<double>(k, v);
    else if (k == "lambda_lee") t.lambda_lee = parse_value<double>(k, v);
    else if (k == "n_lee_rotations") t.n_lee_rotations = parse_value<std::size_t>(k, v);
    else if (k == "batch_size") t.batch_size = parse_value<std::size_t>(k, v);
    else if (k == "seed") t.seed = parse_value<std::uint64_t>(k, v);
    else if (k == "scheme") t.scheme = parse_scheme(v);
    else if (k == "calibration_molecules") t.calibration_molecules = parse_value<std::size_t>(k, v);
    else if (k == "val_lee_rotations") t.val_lee_rotations = parse_value<std::size_t>(k, v);
    else if (k == "F0") m.F0 = parse_value<std::size_t>(k, v);
    else if (k == "F1") m.F1 = parse_value<std::size_t>(k, v);
    else if (k == "n_layers") m.n_layers = parse_value<std::size_t>(k, v);
    else if (k == "n_rbf") m.n_rbf = parse_value<std::size_t>(k, v);
    else if (k == "d_attn") m.d_attn = parse_value<std::size_t>(k, v);
    else if (k == "cutoff") m.cutoff = parse_value<double>(k, v);
    else if (k == "species") {
      m.species.clear();
      for (const auto& s : detail::split_list(v)) {
        const int z = atomic_number(s);
        m.species.push_back(z ? z : parse_value<int>(k, s));
      }
    } else if (k == "data") rc.data = v;
    else if (k == "split") {
      const auto items = detail::split_list(v);
      if (items.size() != 3) throw ConfigError("config key split: expected three fractions");
      for (std::size_t i = 0; i < 3; ++i) rc.split[i] = parse_value<double>(k, items[i]);
    } else if (k == "split_seed") rc.split_seed = parse_value<std::uint64_t>(k, v);
    else if (k == "init") rc.init = v;
    else if (k == "init_seed") rc.init_seed = parse_value<std::uint64_t>(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  }
  m.validate();
  t.validate();
  return rc;
}

/// EQUIQUANT_SEED, when set, replaces the configured training seed.
inline std::optional<std::uint64_t> seed_from_env() {
  const char* s = std::getenv("EQUIQUANT_SEED");
  if (!s || !*s) return std::nullopt;
  return detail::parse_value<std::uint64_t>("EQUIQUANT_SEED", s);
}

inline KeyValues describe(const RunConfig& rc) {
  const TrainConfig& t = rc.train;
  const ModelConfig& m = rc.model;
  KeyValues kv{
      {"epochs", std::to_string(t.epochs)},
      {"warmup_epochs", std::to_string(t.warmup_epochs)},
      {"lr", format_double(t.lr)},
      {"lambda_energy", format_double(t.lambda_energy)},
      {"lambda_force", format_double(t.lambda_force)},
      {"lambda_lee", format_double(t.lambda_lee)},
      {"n_lee_rotations", std::to_string(t.n_lee_rotations)},
      {"batch_size", std::to_string(t.batch_size)},
      {"seed", std::to_string(t.seed)},
      {"scheme", scheme_name(t.scheme)},
      {"calibration_molecules", std::to_string(t.calibration_molecules)},
      {"val_lee_rotations", std::to_string(t.val_lee_rotations)},
      {"F0", std::to_string(m.F0)},
      {"F1", std::to_string(m.F1)},
      {"n_layers", std::to_string(m.n_layers)},
      {"n_rbf", std::to_string(m.n_rbf)},
      {"d_attn", std::to_string(m.d_attn)},
      {"cutoff", format_double(m.cutoff)},
      {"data", rc.data},
      {"split", format_double(rc.split[0]) + "," + format_double(rc.split[1]) + "," + format_double(rc.split[2])},
      {"split_seed", std::to_string(rc.split_seed)},
      {"init_seed", std::to_string(rc.init_seed)},
  };
  std::string species;
  for (std::size_t i = 0; i < m.species.size(); ++i) species += (i ? "," : "") + std::to_string(m.species[i]);
  kv["species"] = species;
  if (!rc.init.empty()) kv["init"] = rc.init;
  return kv;
}

inline std::string to_config_text(const KeyValues& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

}  // namespace equiquant
