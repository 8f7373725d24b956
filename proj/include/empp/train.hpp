#pragma once

// Training loop: gradient descent with momentum 0.9 and cosine decay of the
// learning rate, deterministic shuffling and mask resampling per epoch, and
// JSON-lines epoch reports. Two modes: "self_supervised" optimizes the masked
// position loss alone; "auxiliary" adds a property-MAE head on the unmasked
// graph and conditions the position loss on the known property value.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "empp/config.hpp"
#include "empp/data.hpp"
#include "empp/model.hpp"

namespace empp {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t epoch,
                              std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(seed) ^ (epoch + 0x100)) ^
                    (index + 0x10000));
}

inline std::string json_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

struct EpochStats {
  int epoch = 0;
  double loss_radius = 0.0;
  double loss_direction = 0.0;
  double mae = 0.0;  // meaningful only when has_mae
  bool has_mae = false;
  double lr = 0.0;
  double wall_seconds = 0.0;
  int samples = 0;  // molecules contributing gradients this epoch
  int skipped = 0;  // molecules with no maskable atom
};

inline void write_report_header(std::ostream& os, const Config& cfg,
                                const std::string& mode) {
  char hash[24];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(config_hash(cfg)));
  os << "{\"seed\":" << cfg.seed << ",\"config_hash\":\"" << hash
     << "\",\"mode\":\"" << mode << "\",\"epochs\":" << cfg.train_epochs
     << "}\n";
  os.flush();
}

inline void write_epoch_line(std::ostream& os, const EpochStats& s) {
  os << "{\"epoch\":" << s.epoch
     << ",\"loss_radius\":" << detail::json_double(s.loss_radius)
     << ",\"loss_direction\":" << detail::json_double(s.loss_direction);
  if (s.has_mae) os << ",\"mae\":" << detail::json_double(s.mae);
  os << ",\"lr\":" << detail::json_double(s.lr)
     << ",\"wall_seconds\":" << detail::json_double(s.wall_seconds)
     << ",\"samples\":" << s.samples << ",\"skipped\":" << s.skipped << "}\n";
  os.flush();
}

class Trainer {
 public:
  Trainer(const Config& cfg, std::string mode)
      : cfg_(cfg), mode_(std::move(mode)), model_(to_model_config(cfg), cfg.seed) {
    if (mode_ != "self_supervised" && mode_ != "auxiliary")
      throw ConfigError("mode must be self_supervised or auxiliary");
    velocity_.resize(model_.params.count());
    for (std::size_t i = 0; i < model_.params.count(); ++i)
      velocity_[i].assign(model_.params.at(i).size(), 0.0);
  }

  Model& model() { return model_; }
  const Config& config() const { return cfg_; }
  const std::string& mode() const { return mode_; }

  // Cosine decay over the configured epoch count; full train.lr on epoch 0.
  double epoch_lr(int epoch) const {
    const int total = std::max(cfg_.train_epochs, 1);
    return cfg_.train_lr * 0.5 *
           (1.0 + std::cos(M_PI * static_cast<double>(epoch) /
                           static_cast<double>(total)));
  }

  // Trains on ds.molecules[i] for i in train_idx; writes one JSONL line per
  // epoch when report is given (header written here too).
  std::vector<EpochStats> train(const Dataset& ds, const std::vector<int>& train_idx,
                                std::ostream* report = nullptr) {
    if (train_idx.empty()) throw DataError("training split is empty");
    if (mode_ == "auxiliary") {
      double lo = std::numeric_limits<double>::infinity();
      double hi = -std::numeric_limits<double>::infinity();
      for (int i : train_idx) {
        const Molecule& mol = ds.molecules[static_cast<std::size_t>(i)];
        if (!mol.energy)
          throw DataError("auxiliary mode needs a property label on every sample");
        lo = std::min(lo, *mol.energy);
        hi = std::max(hi, *mol.energy);
      }
      model_.set_property_range(lo, hi);
    }
    if (report) write_report_header(*report, cfg_, mode_);
    std::vector<EpochStats> all;
    for (int e = 0; e < cfg_.train_epochs; ++e) {
      const EpochStats s = run_epoch(ds, train_idx, e);
      if (report) write_epoch_line(*report, s);
      all.push_back(s);
    }
    return all;
  }

  EpochStats run_epoch(const Dataset& ds, const std::vector<int>& train_idx,
                       int epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = epoch_lr(epoch);
    stats.has_mae = mode_ == "auxiliary";

    std::vector<int> order = train_idx;
    {
      std::mt19937_64 rng(detail::mix_seed(cfg_.seed,
                                           static_cast<std::uint64_t>(epoch),
                                           0xFFFFFFFFULL));
      std::shuffle(order.begin(), order.end(), rng);
    }

    double sum_r = 0.0, sum_d = 0.0, sum_mae = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg_.train_batch)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg_.train_batch));

      // Resolve the batch's masks first so the per-sample gradient scale uses
      // the number of samples that actually contribute.
      std::vector<std::pair<int, std::vector<int>>> work;
      for (std::size_t bi = start; bi < stop; ++bi) {
        const int idx = order[bi];
        const Molecule& mol = ds.molecules[static_cast<std::size_t>(idx)];
        std::mt19937_64 rng(detail::mix_seed(cfg_.seed,
                                             static_cast<std::uint64_t>(epoch),
                                             static_cast<std::uint64_t>(idx)));
        std::vector<int> masks =
            sample_mask_indices(mol, cfg_.mask_n, cfg_.cutoff, rng);
        if (masks.empty()) {
          ++stats.skipped;
          continue;
        }
        work.emplace_back(idx, std::move(masks));
      }
      if (work.empty()) continue;
      const double inv_b = 1.0 / static_cast<double>(work.size());

      model_.params.zero_grad();
      for (auto& [idx, masks] : work) {
        const Molecule& mol = ds.molecules[static_cast<std::size_t>(idx)];
        if (mode_ == "auxiliary") {
          sum_mae += property_step(mol, inv_b);
          const EmppLossValue v = empp_multi_loss(
              model_, mol, masks, true, cfg_.loss_weight * inv_b, mol.energy);
          sum_r += v.radius;
          sum_d += v.direction;
        } else {
          const EmppLossValue v = empp_multi_loss(model_, mol, masks, true, inv_b);
          sum_r += v.radius;
          sum_d += v.direction;
        }
        ++stats.samples;
      }
      sgd_step(stats.lr);
    }

    if (stats.samples > 0) {
      sum_r /= stats.samples;
      sum_d /= stats.samples;
      sum_mae /= stats.samples;
    }
    stats.loss_radius = sum_r;
    stats.loss_direction = sum_d;
    stats.mae = sum_mae;
    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return stats;
  }

 private:
  // |readout - label| on the unmasked graph; backward scaled by inv_b.
  double property_step(const Molecule& mol, double inv_b) {
    PreparedGraph g = model_.prepare(mol);
    Tape t;
    std::vector<int> feats = model_.forward_features(t, g);
    const int pred = model_.energy_readout(t, feats);
    const int err = t.abs(t.add(pred, t.constant(-*mol.energy)));
    const double v = t.value(err)[0];
    t.backward(err, inv_b);
    return v;
  }

  void sgd_step(double lr) {
    for (std::size_t i = 0; i < model_.params.count(); ++i) {
      Parameter& p = model_.params.at(i);
      if (!p.trainable) continue;
      std::vector<double>& v = velocity_[i];
      for (std::size_t j = 0; j < p.values.size(); ++j) {
        v[j] = 0.9 * v[j] + p.grad[j];
        p.values[j] -= lr * v[j];
      }
    }
  }

  Config cfg_;
  std::string mode_;
  Model model_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace empp
