// Command-line entry point: synthetic data generation, training, verification
// checks, and masked-position prediction export.
//
// Exit codes: 0 success, 1 failed verification check, 2 configuration error,
// 3 data error, 4 masked atom without neighbors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "empp/checkpoint.hpp"
#include "empp/checks.hpp"
#include "empp/config.hpp"
#include "empp/data.hpp"
#include "empp/model.hpp"
#include "empp/prediction.hpp"
#include "empp/train.hpp"

namespace {

using namespace empp;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitIsolated = 4;

std::string slurp_file(const std::string& path, const char* what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(std::string(what) + ": cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Config read_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

// --data accepts either "synthetic:<template>:<count>:<jitter>" or a path to
// an XYZ file or a dataset cache. Generated and XYZ datasets get a seeded
// 0.8/0.1/0.1 split; caches keep their stored split.
Dataset load_or_generate(const std::string& spec, const Config& cfg) {
  if (spec.rfind("synthetic:", 0) == 0) {
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (pos <= spec.size()) {
      const std::size_t colon = spec.find(':', pos);
      if (colon == std::string::npos) {
        parts.push_back(spec.substr(pos));
        break;
      }
      parts.push_back(spec.substr(pos, colon - pos));
      pos = colon + 1;
    }
    if (parts.size() != 4)
      throw DataError("generator spec must be synthetic:<template>:<count>:<jitter>");
    try {
      const SyntheticTemplate tmpl = synthetic_template_from_name(parts[1]);
      const long long count = std::stoll(parts[2]);
      const double jitter = std::stod(parts[3]);
      if (count < 1 || count > 1000000)
        throw DataError("generator spec: count out of range");
      std::mt19937_64 rng(cfg.seed);
      Dataset ds = gen_synthetic(tmpl, static_cast<std::size_t>(count), jitter,
                                 rng, cfg.cutoff);
      split_dataset(ds, {0.8, 0.1, 0.1}, cfg.seed);
      return ds;
    } catch (const DataError&) {
      throw;
    } catch (const std::exception& e) {
      throw DataError(std::string("generator spec: ") + e.what());
    }
  }

  if (!std::filesystem::exists(spec))
    throw DataError("data file does not exist: " + spec);
  try {
    Dataset ds;
    if (spec.size() >= 4 && spec.substr(spec.size() - 4) == ".xyz") {
      ds.molecules = parse_xyz(slurp_file(spec, "xyz"));
      ds.provenance = spec;
      split_dataset(ds, {0.8, 0.1, 0.1}, cfg.seed);
    } else {
      ds = read_dataset_cache(spec);
      if (ds.split.size() != ds.molecules.size())
        split_dataset(ds, {0.8, 0.1, 0.1}, cfg.seed);
    }
    if (ds.molecules.empty()) throw DataError("dataset is empty: " + spec);
    return ds;
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(std::string("cannot load ") + spec + ": " + e.what());
  }
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int cmd_gen_data(const std::string& config_path, const std::string& data,
                 const std::string& out, std::optional<std::uint64_t> seed) {
  Config cfg = config_path.empty() ? Config{} : read_config_file(config_path);
  if (seed) cfg.seed = *seed;
  const Dataset ds = load_or_generate(data, cfg);
  try {
    write_dataset_cache(out, ds);
  } catch (const std::exception& e) {
    throw DataError(std::string("cannot write cache: ") + e.what());
  }
  std::cout << "wrote " << ds.molecules.size() << " molecules to " << out << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data,
              const std::string& out, std::optional<std::uint64_t> seed,
              const std::string& mode) {
  Config cfg = config_path.empty() ? Config{} : read_config_file(config_path);
  if (seed) cfg.seed = *seed;

  Trainer trainer = [&] {
    try {
      return Trainer(cfg, mode);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      // Model construction rejected the configured geometry (e.g. a grid too
      // coarse for the head band limit).
      throw ConfigError(e.what());
    }
  }();

  const Dataset ds = load_or_generate(data, cfg);
  std::vector<int> train_idx;
  for (std::size_t i = 0; i < ds.molecules.size(); ++i)
    if (ds.split.empty() || ds.split[i] == 0)
      train_idx.push_back(static_cast<int>(i));
  if (train_idx.empty()) throw DataError("training split is empty");

  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  const std::string report_path = out + "/report.jsonl";
  std::ofstream report(report_path, std::ios::trunc);
  if (!report) throw DataError("cannot write report: " + report_path);

  trainer.train(ds, train_idx, &report);
  save_checkpoint(out + "/checkpoint.bin", trainer.model(), cfg, mode);
  std::cout << "trained " << cfg.train_epochs << " epochs on "
            << train_idx.size() << " samples; checkpoint at " << out
            << "/checkpoint.bin\n";
  return kExitOk;
}

int cmd_check(const std::string& checkpoint, std::uint64_t seed,
              const std::string& fault, const std::string& out) {
  if (!fault.empty()) {
    if (fault == "cg_table")
      inject_cg_fault();
    else
      throw ConfigError("unknown fault name: " + fault);
  }

  std::optional<Model> model;
  if (!checkpoint.empty()) {
    try {
      model.emplace(load_checkpoint(checkpoint).model);
    } catch (const std::exception& e) {
      throw DataError(std::string("cannot load checkpoint: ") + e.what());
    }
  } else {
    model.emplace(ModelConfig{}, seed);
  }

  const std::vector<CheckResult> results = run_standard_checks(*model, seed);

  std::ofstream file;
  if (!out.empty()) {
    file.open(out, std::ios::trunc);
    if (!file) throw DataError("cannot write report: " + out);
  }
  std::ostream& os = out.empty() ? std::cout : file;
  bool all_pass = true;
  for (const CheckResult& r : results) {
    write_check_line(os, r);
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) {
    for (const CheckResult& r : results)
      if (!r.pass)
        std::cerr << "check failed: " << r.name << " (error " << r.error
                  << " >= threshold " << r.threshold << ")\n";
  }
  return all_pass ? kExitOk : kExitCheckFailed;
}

int cmd_predict(const std::string& checkpoint, const std::string& data,
                int mask_index, const std::string& out) {
  LoadedCheckpoint lc = [&] {
    try {
      return load_checkpoint(checkpoint);
    } catch (const std::exception& e) {
      throw DataError(std::string("cannot load checkpoint: ") + e.what());
    }
  }();

  std::vector<Molecule> mols;
  try {
    mols = parse_xyz(slurp_file(data, "xyz"));
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(std::string("cannot parse ") + data + ": " + e.what());
  }
  if (mols.size() != 1)
    throw DataError("predict expects exactly one molecule, got " +
                    std::to_string(mols.size()));
  const Molecule& mol = mols[0];
  if (mask_index < 0 || mask_index >= static_cast<int>(mol.size()))
    throw IsolatedMaskError("mask index " + std::to_string(mask_index) +
                            " out of range for " + std::to_string(mol.size()) +
                            " atoms");

  const MaskedMolecule mm = make_masked(mol, mask_index, lc.model.cfg.cutoff);
  const MaskPrediction pred = predict_masked(lc.model, mm);

  std::error_code ec;
  std::filesystem::create_directories(out, ec);

  {
    std::ofstream cfg_out(out + "/config.txt", std::ios::trunc | std::ios::binary);
    cfg_out << serialize_config(lc.config);
  }
  for (std::size_t k = 0; k < pred.radii.size(); ++k) {
    write_radius_csv(out + "/radius_" + std::to_string(k) + ".csv", pred.radii[k]);
    std::ofstream dir_out(out + "/direction_" + std::to_string(k) + ".csv",
                          std::ios::trunc | std::ios::binary);
    write_grid_csv(dir_out, lc.model.grid, pred.directions[k].p);
  }
  {
    std::ofstream est(out + "/estimate.txt", std::ios::trunc | std::ios::binary);
    est << "aggregate," << fmt17(pred.estimate.aggregate.x) << ","
        << fmt17(pred.estimate.aggregate.y) << ","
        << fmt17(pred.estimate.aggregate.z) << "\n";
    est << "spread," << fmt17(pred.estimate.spread) << "\n";
    for (std::size_t k = 0; k < pred.estimate.per_neighbor.size(); ++k) {
      const Vec3& p = pred.estimate.per_neighbor[k];
      est << "neighbor," << k << "," << fmt17(p.x) << "," << fmt17(p.y) << ","
          << fmt17(p.z) << "\n";
    }
  }
  std::cout << "estimate " << fmt17(pred.estimate.aggregate.x) << " "
            << fmt17(pred.estimate.aggregate.y) << " "
            << fmt17(pred.estimate.aggregate.z) << " spread "
            << fmt17(pred.estimate.spread) << " neighbors "
            << pred.radii.size() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"equivariant masked position prediction"};
  app.require_subcommand(1);

  std::string config_path, data, out, mode = "self_supervised", fault, checkpoint;
  std::optional<std::uint64_t> seed;
  std::uint64_t check_seed = 0;
  int mask_index = -1;

  CLI::App* gen = app.add_subcommand("gen-data", "generate or convert a dataset cache");
  gen->add_option("--config", config_path, "config file (for seed and cutoff)");
  gen->add_option("--data", data, "generator spec or input path")->required();
  gen->add_option("--out", out, "cache file to write")->required();
  gen->add_option("--seed", seed, "seed override");

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "config file");
  train->add_option("--data", data, "dataset path or generator spec")->required();
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--seed", seed, "seed override");
  train->add_option("--mode", mode, "self_supervised or auxiliary");

  CLI::App* check = app.add_subcommand("check", "run verification checks");
  check->add_option("checkpoint", checkpoint, "optional checkpoint to check");
  check->add_option("--seed", check_seed, "seed for randomized checks");
  check->add_option("--fault-inject", fault, "inject a named fault (cg_table)");
  check->add_option("--out", out, "report file (default stdout)");

  CLI::App* predict = app.add_subcommand("predict", "predict a masked position");
  predict->add_option("checkpoint", checkpoint, "trained checkpoint")->required();
  predict->add_option("--data", data, "molecule XYZ file")->required();
  predict->add_option("--mask-index", mask_index, "atom to mask")->required();
  predict->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, data, out, seed);
    if (train->parsed()) return cmd_train(config_path, data, out, seed, mode);
    if (check->parsed()) return cmd_check(checkpoint, check_seed, fault, out);
    if (predict->parsed()) return cmd_predict(checkpoint, data, mask_index, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IsolatedMaskError& e) {
    std::cerr << "mask error: " << e.what() << "\n";
    return kExitIsolated;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}
