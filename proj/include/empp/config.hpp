#pragma once

// Flat key=value run configuration: parsing, validation, canonical
// serialization (the form embedded in checkpoints and hashed into reports).

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "empp/model.hpp"

namespace empp {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Config {
  int grid_n_theta = 100;
  int grid_n_phi = 100;
  std::string grid_kind = "gauss_legendre";
  double head_tau = 0.1;
  double label_sigma = 0.5;
  int radius_bins = 128;
  double radius_min = 0.9;
  double radius_max = 5.0;
  double cutoff = 5.0;
  int mask_n = 1;
  double loss_weight = 1.0;
  int backbone_layers = 3;
  double train_lr = 5e-4;
  int train_epochs = 10;
  int train_batch = 8;
  std::uint64_t seed = 0;

  bool operator==(const Config&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": '" + v + "'");
  }
  if (used != v.size())
    throw ConfigError("config: trailing characters after " + key + ": '" + v + "'");
  return x;
}

inline int parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
  }
  if (used != v.size())
    throw ConfigError("config: trailing characters after " + key + ": '" + v + "'");
  if (x < -2147483648LL || x > 2147483647LL)
    throw ConfigError("config: integer out of range for " + key);
  return static_cast<int>(x);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config: bad seed for " + key + ": '" + v + "'");
  }
  if (used != v.size())
    throw ConfigError("config: trailing characters after " + key + ": '" + v + "'");
  return static_cast<std::uint64_t>(x);
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void validate_config(const Config& c) {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (c.grid_n_theta < 1) fail("grid.n_theta must be positive");
  if (c.grid_n_phi < 1) fail("grid.n_phi must be positive");
  if (c.grid_kind != "gauss_legendre" && c.grid_kind != "equiangular")
    fail("grid.kind must be gauss_legendre or equiangular");
  if (!(c.head_tau > 0.0)) fail("head.tau must be positive");
  if (!(c.label_sigma > 0.0)) fail("label.sigma must be positive");
  if (c.radius_bins < 1) fail("radius.bins must be positive");
  if (!(c.radius_min > 0.0)) fail("radius.min must be positive");
  if (!(c.radius_max > c.radius_min)) fail("radius.max must exceed radius.min");
  if (!(c.cutoff > 0.0)) fail("cutoff must be positive");
  if (c.mask_n < 1) fail("mask.n must be at least 1");
  if (!(c.loss_weight >= 0.0)) fail("loss.weight must be non-negative");
  if (c.backbone_layers < 1) fail("backbone.layers must be at least 1");
  if (!(c.train_lr > 0.0)) fail("train.lr must be positive");
  if (c.train_epochs < 0) fail("train.epochs must be non-negative");
  if (c.train_batch < 1) fail("train.batch must be at least 1");
}

// Parses key=value lines. '#' starts a comment; blank lines are skipped; a
// repeated key takes its last value; unknown keys are rejected.
inline Config parse_config(const std::string& text) {
  Config c;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(line_no) +
                        " is not key=value: '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(line_no));

    if (key == "grid.n_theta") c.grid_n_theta = detail::parse_int(key, val);
    else if (key == "grid.n_phi") c.grid_n_phi = detail::parse_int(key, val);
    else if (key == "grid.kind") c.grid_kind = val;
    else if (key == "head.tau") c.head_tau = detail::parse_double(key, val);
    else if (key == "label.sigma") c.label_sigma = detail::parse_double(key, val);
    else if (key == "radius.bins") c.radius_bins = detail::parse_int(key, val);
    else if (key == "radius.min") c.radius_min = detail::parse_double(key, val);
    else if (key == "radius.max") c.radius_max = detail::parse_double(key, val);
    else if (key == "cutoff") c.cutoff = detail::parse_double(key, val);
    else if (key == "mask.n") c.mask_n = detail::parse_int(key, val);
    else if (key == "loss.weight") c.loss_weight = detail::parse_double(key, val);
    else if (key == "backbone.layers") c.backbone_layers = detail::parse_int(key, val);
    else if (key == "train.lr") c.train_lr = detail::parse_double(key, val);
    else if (key == "train.epochs") c.train_epochs = detail::parse_int(key, val);
    else if (key == "train.batch") c.train_batch = detail::parse_int(key, val);
    else if (key == "seed") c.seed = detail::parse_u64(key, val);
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  validate_config(c);
  return c;
}

// Canonical form: fixed key order, %.17g doubles. parse(serialize(c)) == c.
inline std::string serialize_config(const Config& c) {
  std::string s;
  auto put = [&s](const std::string& k, const std::string& v) {
    s += k;
    s += '=';
    s += v;
    s += '\n';
  };
  put("grid.n_theta", std::to_string(c.grid_n_theta));
  put("grid.n_phi", std::to_string(c.grid_n_phi));
  put("grid.kind", c.grid_kind);
  put("head.tau", detail::fmt_double(c.head_tau));
  put("label.sigma", detail::fmt_double(c.label_sigma));
  put("radius.bins", std::to_string(c.radius_bins));
  put("radius.min", detail::fmt_double(c.radius_min));
  put("radius.max", detail::fmt_double(c.radius_max));
  put("cutoff", detail::fmt_double(c.cutoff));
  put("mask.n", std::to_string(c.mask_n));
  put("loss.weight", detail::fmt_double(c.loss_weight));
  put("backbone.layers", std::to_string(c.backbone_layers));
  put("train.lr", detail::fmt_double(c.train_lr));
  put("train.epochs", std::to_string(c.train_epochs));
  put("train.batch", std::to_string(c.train_batch));
  put("seed", std::to_string(c.seed));
  return s;
}

// FNV-1a over the canonical serialization; reports carry it so a run can be
// matched to the exact effective configuration.
inline std::uint64_t config_hash(const Config& c) {
  const std::string s = serialize_config(c);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline GridKind grid_kind_of(const std::string& name) {
  if (name == "gauss_legendre") return GridKind::gauss_legendre_theta;
  if (name == "equiangular") return GridKind::equiangular;
  throw ConfigError("config: unknown grid kind '" + name + "'");
}

inline ModelConfig to_model_config(const Config& c) {
  validate_config(c);
  ModelConfig mc;
  mc.layers = c.backbone_layers;
  mc.cutoff = c.cutoff;
  mc.tau = c.head_tau;
  mc.label_sigma = c.label_sigma;
  mc.binning.bins = c.radius_bins;
  mc.binning.r_min = c.radius_min;
  mc.binning.r_max = c.radius_max;
  mc.grid_n_theta = c.grid_n_theta;
  mc.grid_n_phi = c.grid_n_phi;
  mc.grid_kind = grid_kind_of(c.grid_kind);
  return mc;
}

}  // namespace empp
