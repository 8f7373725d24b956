#pragma once

// Model checkpoints in the array-container format: one record per parameter
// plus text records holding the effective configuration and training mode.
// Loading rebuilds the model from the embedded configuration, then overwrites
// every parameter; record sets must match the model exactly in both
// directions.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "empp/config.hpp"
#include "empp/container.hpp"
#include "empp/model.hpp"

namespace empp {

namespace detail {

inline ArrayRecord text_record(const std::string& name, const std::string& text) {
  ArrayRecord r;
  r.name = name;
  r.dims = {static_cast<std::uint64_t>(text.size())};
  r.data.reserve(text.size());
  for (unsigned char c : text) r.data.push_back(static_cast<double>(c));
  return r;
}

inline std::string decode_text(const ArrayRecord& r) {
  std::string s;
  s.reserve(r.data.size());
  for (double d : r.data) {
    const double v = std::round(d);
    if (!(v >= 0.0 && v < 256.0) || v != d)
      throw std::runtime_error("checkpoint: corrupt text record " + r.name);
    s.push_back(static_cast<char>(static_cast<int>(v)));
  }
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Model& m,
                            const Config& config, const std::string& mode) {
  std::vector<ArrayRecord> records;
  records.push_back(detail::text_record("__config__", serialize_config(config)));
  records.push_back(detail::text_record("__mode__", mode));
  for (std::size_t i = 0; i < m.params.count(); ++i) {
    const Parameter& p = m.params.at(i);
    ArrayRecord r;
    r.name = p.name;
    for (std::size_t d : p.shape) r.dims.push_back(static_cast<std::uint64_t>(d));
    r.data = p.values;
    records.push_back(std::move(r));
  }
  write_array_file(path, records);
}

struct LoadedCheckpoint {
  Config config;
  std::string mode;
  Model model;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  const ArrayFile f = read_array_file(path);
  const ArrayRecord* cfg_rec = f.find("__config__");
  if (!cfg_rec) throw std::runtime_error("checkpoint: missing __config__ record");
  const ArrayRecord* mode_rec = f.find("__mode__");
  if (!mode_rec) throw std::runtime_error("checkpoint: missing __mode__ record");

  const Config cfg = parse_config(detail::decode_text(*cfg_rec));
  LoadedCheckpoint out{cfg, detail::decode_text(*mode_rec),
                       Model(to_model_config(cfg), cfg.seed)};

  if (f.records.size() != out.model.params.count() + 2)
    throw std::runtime_error("checkpoint: record count does not match the model");
  for (std::size_t i = 0; i < out.model.params.count(); ++i) {
    Parameter& p = out.model.params.at(i);
    const ArrayRecord* r = f.find(p.name);
    if (!r) throw std::runtime_error("checkpoint: missing parameter " + p.name);
    if (r->dims.size() != p.shape.size())
      throw std::runtime_error("checkpoint: rank mismatch for " + p.name);
    for (std::size_t d = 0; d < p.shape.size(); ++d)
      if (r->dims[d] != static_cast<std::uint64_t>(p.shape[d]))
        throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.values = r->data;
  }
  return out;
}

}  // namespace empp
