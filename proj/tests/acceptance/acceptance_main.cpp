// Acceptance harness: verifies the library's headline guarantees end to end
// and prints exactly one PASS/FAIL line per criterion, with the measured
// quantity next to its pinned bound. Indented "info:" lines add context but
// never gate. The process exits with the number of failed criteria.
//
// Usage: acceptance <path-to-cli-binary> [work-dir]
//
// Criteria 8 and 9 train real models through the CLI binary and together take
// most of the runtime (roughly 15-20 minutes on one core).

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <empp/checkpoint.hpp>
#include <empp/checks.hpp>
#include <empp/train.hpp>

using namespace empp;

namespace {

// Hyperparameters for the toy-task training runs (criteria 8 and 9). The
// coarse run differs from the fine run only in grid resolution, so the pair
// isolates the effect of refinement.
constexpr int kToyCount = 2000;
constexpr double kToyJitter = 0.05;
constexpr std::uint64_t kToySeed = 2026;
constexpr double kToyLr = 1e-3;
constexpr int kToyEpochs = 6;
constexpr int kToyBatch = 4;
constexpr int kFineGrid = 100;
constexpr int kCoarseGrid = 20;
constexpr double kTrainBudgetSeconds = 900.0;

// Held-out probes: the rigid template in fresh random orientations, none of
// which appeared during training (training samples all carry jitter).
constexpr std::uint64_t kProbeSeed = 424242;
constexpr int kProbeCount = 50;

int g_failed = 0;

void emit(int num, const char* what, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", num,
              what, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failed;
}

void info(const std::string& text) {
  std::printf("          info: %s\n", text.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

int run(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  return -2;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double idx = q * (static_cast<double>(v.size()) - 1.0);
  const std::size_t lo = static_cast<std::size_t>(idx);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = idx - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

// --- held-out evaluation -----------------------------------------------------

struct EvalStats {
  std::vector<double> angles_deg;  // one per (molecule, mask, neighbor)
  std::vector<double> bin_errors;  // one per (molecule, mask, neighbor)
  std::vector<double> pos_errors;  // one per (molecule, mask)

  double frac_angle_below(double deg) const {
    std::size_t ok = 0;
    for (double a : angles_deg) ok += a < deg;
    return static_cast<double>(ok) / static_cast<double>(angles_deg.size());
  }
  double frac_bins_within(double bins) const {
    std::size_t ok = 0;
    for (double b : bin_errors) ok += b <= bins;
    return static_cast<double>(ok) / static_cast<double>(bin_errors.size());
  }
  double mean_pos() const {
    double s = 0.0;
    for (double p : pos_errors) s += p;
    return s / static_cast<double>(pos_errors.size());
  }
};

// Masks every atom of every listed molecule and compares the per-neighbor
// argmax radius/direction and the aggregated point estimate against the true
// masked position.
EvalStats evaluate(Model& m, const Dataset& ds, const std::vector<int>& idx) {
  EvalStats st;
  const RadiusBinning binning = m.cfg.binning;
  for (int i : idx) {
    const Molecule& mol = ds.molecules[static_cast<std::size_t>(i)];
    for (std::size_t a = 0; a < mol.size(); ++a) {
      const MaskedMolecule mm =
          make_masked(mol, static_cast<int>(a), m.cfg.cutoff);
      const MaskPrediction pred = predict_masked(m, mm);
      for (std::size_t k = 0; k < mm.neighbors.size(); ++k) {
        const double d_true = mm.r_label[k].norm();
        const Vec3 u_true = mm.r_label[k] * (1.0 / d_true);
        const Vec3 u_pred = pred.directions[k].peak_direction().unit();
        const double c = std::clamp(u_true.dot(u_pred), -1.0, 1.0);
        st.angles_deg.push_back(std::acos(c) * 180.0 / M_PI);
        int true_bin =
            static_cast<int>((d_true - binning.r_min) / binning.width());
        true_bin = std::clamp(true_bin, 0, binning.bins - 1);
        st.bin_errors.push_back(
            std::abs(pred.radii[k].peak_bin() - true_bin));
      }
      st.pos_errors.push_back((pred.estimate.aggregate - mol.pos[a]).norm());
    }
  }
  return st;
}

Dataset clean_probes(double cutoff) {
  std::mt19937_64 rng(kProbeSeed);
  return gen_synthetic(SyntheticTemplate::kTetrahedral, kProbeCount, 0.0, rng,
                       cutoff);
}

std::vector<int> all_indices(const Dataset& ds) {
  std::vector<int> idx(ds.molecules.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  return idx;
}

struct ToyRun {
  bool ok = false;
  std::string error;
  double train_seconds = 0.0;
  EvalStats clean;
  EvalStats jittered;
};

Config toy_config(int grid_n) {
  Config cfg;
  cfg.grid_n_theta = grid_n;
  cfg.grid_n_phi = grid_n;
  cfg.train_lr = kToyLr;
  cfg.train_epochs = kToyEpochs;
  cfg.train_batch = kToyBatch;
  cfg.seed = kToySeed;
  return cfg;
}

// Trains through the CLI (so the run also exercises config parsing, dataset
// generation, reporting, and checkpoint IO), then reloads the checkpoint and
// evaluates it on held-out data.
ToyRun train_and_eval(const std::string& cli, const std::string& workdir,
                      const std::string& tag, int grid_n) {
  ToyRun out;
  const Config cfg = toy_config(grid_n);
  const std::string dir = workdir + "/" + tag;
  std::filesystem::create_directories(dir);
  const std::string cfg_path = dir + "/config.txt";
  {
    std::ofstream f(cfg_path);
    f << serialize_config(cfg);
  }
  const std::string data_spec = fmt("synthetic:tetrahedral:%d:%g", kToyCount,
                                    kToyJitter);
  const std::string cmd = cli + " train --config " + cfg_path + " --data " +
                          data_spec + " --out " + dir + " > " + dir +
                          "/train.log 2>&1";
  const auto t0 = std::chrono::steady_clock::now();
  const int rc = run(cmd);
  out.train_seconds = seconds_since(t0);
  if (rc != 0) {
    out.error = fmt("train exited with %d", rc);
    return out;
  }

  LoadedCheckpoint lc = [&] {
    try {
      return load_checkpoint(dir + "/checkpoint.bin");
    } catch (const std::exception& e) {
      out.error = std::string("checkpoint reload failed: ") + e.what();
      return LoadedCheckpoint{Config{}, "", Model(ModelConfig::compact(), 0)};
    }
  }();
  if (!out.error.empty()) return out;
  if (!(lc.config == cfg)) {
    out.error = "checkpoint config differs from the one sent to the CLI";
    return out;
  }

  const Dataset probes = clean_probes(cfg.cutoff);
  out.clean = evaluate(lc.model, probes, all_indices(probes));

  // Regenerate the dataset the CLI trained on (same generator path, same
  // seed) and evaluate the jittered test split for context.
  std::mt19937_64 rng(cfg.seed);
  Dataset ds = gen_synthetic(SyntheticTemplate::kTetrahedral, kToyCount,
                             kToyJitter, rng, cfg.cutoff);
  split_dataset(ds, {0.8, 0.1, 0.1}, cfg.seed);
  std::vector<int> test_idx;
  for (std::size_t i = 0; i < ds.molecules.size(); ++i)
    if (ds.split[i] == 2) test_idx.push_back(static_cast<int>(i));
  if (test_idx.size() > 50) test_idx.resize(50);
  out.jittered = evaluate(lc.model, ds, test_idx);

  out.ok = true;
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <path-to-cli-binary> [work-dir]\n");
    return 64;
  }
  const std::string cli = argv[1];
  const std::string workdir =
      argc > 2 ? argv[2]
               : (std::filesystem::temp_directory_path() /
                  ("empp-acceptance-" + std::to_string(::getpid())))
                     .string();
  std::filesystem::create_directories(workdir);
  std::printf("acceptance artifacts: %s\n", workdir.c_str());

  // 1. Spherical harmonics are orthonormal under the quadrature rule.
  {
    const auto t0 = std::chrono::steady_clock::now();
    const CheckResult r = check_sh_orthonormality(3, 100, 100);
    const double wall = seconds_since(t0);
    emit(1, "spherical-harmonic orthonormality on the 100x100 grid",
         r.pass && wall < 5.0,
         fmt("max |<Ylm,Yl'm'> - delta| = %.3g, bound 1e-9; %.2f s, bound 5 s",
             r.error, wall));
  }

  // 2. Evaluating at a rotated direction equals applying the Wigner matrix.
  {
    const CheckResult r = check_sh_steerability(100, 3, 12345);
    emit(2, "spherical-harmonic steerability under rotation", r.pass,
         fmt("max error %.3g over 100 random rotation/direction pairs, "
             "bound 1e-9",
             r.error));
  }

  // 3. The coupling tables commute with rotation on every degree path.
  {
    const CheckResult r = check_cg_equivariance(20, 3, 54321);
    emit(3, "tensor-product coupling equivariance", r.pass,
         fmt("max error %.3g over all paths to degree 3, 20 inputs each, "
             "bound 1e-9",
             r.error));
  }

  // 4. Analysis then synthesis reproduces band-limited grid signals.
  {
    const CheckResult r = check_fourier_round_trip(5, 3, 100, 100, 2468);
    emit(4, "sphere-grid analysis/synthesis round trip", r.pass,
         fmt("max coefficient error %.3g over 5 random signals, bound 1e-9",
             r.error));
  }

  // 5. Rotating a molecule rotates the predicted direction distributions and
  //    leaves the radius distributions untouched.
  {
    const auto t0 = std::chrono::steady_clock::now();
    Model m(ModelConfig{}, 2026);
    const auto [dir, rad] = check_distribution_equivariance(m, 20, 5, 97531);
    const double wall = seconds_since(t0);
    emit(5, "predicted-distribution equivariance under rotation",
         dir.pass && rad.pass && wall < 60.0,
         fmt("direction %.3g (bound 1e-6), radius drift %.3g (bound 1e-12), "
             "20 molecules x 5 rotations in %.1f s (bound 60 s)",
             dir.error, rad.error, wall));
  }

  // 6. Analytic gradients of the full loss match central differences.
  {
    Model m(ModelConfig::compact(), 61);
    std::mt19937_64 rng(33);
    const Dataset ds =
        gen_synthetic(SyntheticTemplate::kTetrahedral, 1, 0.05, rng);
    const MaskedMolecule mm = make_masked(ds.molecules[0], 1, m.cfg.cutoff);
    const GradientCheckResult r = check_gradient(
        m.params,
        [&](ParameterStore&, bool with_grad) {
          if (with_grad) m.params.zero_grad();
          return empp_single_loss(m, mm, with_grad).total;
        },
        1e-5);
    emit(6, "end-to-end loss gradient fidelity", r.max_rel_error < 1e-5,
         fmt("max relative error %.3g over every parameter, bound 1e-5 "
             "(worst: %s[%zu])",
             r.max_rel_error, r.worst_param.c_str(), r.worst_index));
  }

  // 7. The multi-mask loss equals the mean of its single-mask parts exactly.
  {
    Model m(ModelConfig::compact(), 53);
    std::mt19937_64 rng(27);
    const Dataset ds =
        gen_synthetic(SyntheticTemplate::kTetrahedral, 1, 0.05, rng);
    const Molecule& mol = ds.molecules[0];
    const std::vector<int> masks = {0, 1, 2, 3, 4};
    const EmppLossValue multi = empp_multi_loss(m, mol, masks);
    double sr = 0.0, sd = 0.0, st = 0.0;
    for (int idx : masks) {
      const EmppLossValue one =
          empp_single_loss(m, make_masked(mol, idx, m.cfg.cutoff));
      sr += one.radius;
      sd += one.direction;
      st += one.total;
    }
    const double n = static_cast<double>(masks.size());
    const double diff =
        std::max({std::abs(multi.radius - sr / n),
                  std::abs(multi.direction - sd / n),
                  std::abs(multi.total - st / n)});
    emit(7, "multi-mask loss is the exact mean of single-mask losses",
         diff == 0.0, fmt("max |difference| = %.3g over 5 masks, bound 0", diff));
  }

  // 8. The toy task trains to useful accuracy inside the time budget.
  ToyRun fine;
  {
    fine = train_and_eval(cli, workdir, "toy_fine", kFineGrid);
    if (!fine.ok) {
      emit(8, "toy-task training and held-out accuracy", false, fine.error);
    } else {
      const double ang_frac = fine.clean.frac_angle_below(10.0);
      const double bin_frac = fine.clean.frac_bins_within(2.0);
      const double pos = fine.clean.mean_pos();
      const bool pass = fine.train_seconds < kTrainBudgetSeconds &&
                        ang_frac >= 0.90 && bin_frac >= 0.90 && pos < 0.15;
      emit(8, "toy-task training and held-out accuracy", pass,
           fmt("train %.0f s (bound %.0f); rigid held-out probes: "
               "direction <10 deg for %.1f%% (bound 90%%), radius within 2 "
               "bins for %.1f%% (bound 90%%), mean position error %.3f A "
               "(bound 0.15)",
               fine.train_seconds, kTrainBudgetSeconds, 100.0 * ang_frac,
               100.0 * bin_frac, pos));
      info(fmt("probe percentiles: p90 angle %.2f deg, p90 bin error %.1f, "
               "max position error %.3f A",
               percentile(fine.clean.angles_deg, 0.90),
               percentile(fine.clean.bin_errors, 0.90),
               percentile(fine.clean.pos_errors, 1.0)));
      info(fmt("jittered test split (context, not gated): direction <10 deg "
               "for %.1f%%, radius within 2 bins for %.1f%%, mean position "
               "error %.3f A",
               100.0 * fine.jittered.frac_angle_below(10.0),
               100.0 * fine.jittered.frac_bins_within(2.0),
               fine.jittered.mean_pos()));
    }
  }

  // 9. Refining the direction grid does not worsen the angular error.
  {
    if (!fine.ok) {
      emit(9, "grid refinement does not worsen the direction error", false,
           "skipped: the fine-grid training run failed");
    } else {
      const ToyRun coarse = train_and_eval(cli, workdir, "toy_coarse",
                                           kCoarseGrid);
      if (!coarse.ok) {
        emit(9, "grid refinement does not worsen the direction error", false,
             coarse.error);
      } else {
        const double p90_fine = percentile(fine.clean.angles_deg, 0.90);
        const double p90_coarse = percentile(coarse.clean.angles_deg, 0.90);
        emit(9, "grid refinement does not worsen the direction error",
             p90_fine <= p90_coarse,
             fmt("p90 angular error: %.2f deg at 100x100 vs %.2f deg at "
                 "20x20 (identical training otherwise)",
                 p90_fine, p90_coarse));
        info(fmt("coarse run: train %.0f s; direction <10 deg for %.1f%%, "
                 "radius within 2 bins for %.1f%%, mean position error %.3f A",
                 coarse.train_seconds,
                 100.0 * coarse.clean.frac_angle_below(10.0),
                 100.0 * coarse.clean.frac_bins_within(2.0),
                 coarse.clean.mean_pos()));
      }
    }
  }

  // 10. A corrupted coupling table is caught and named by the self-check.
  {
    const std::string out = workdir + "/fault.jsonl";
    const int rc = run(cli + " check --fault-inject cg_table --out " + out +
                       " 2> " + workdir + "/fault.err");
    const std::string report = slurp(out);
    const bool named = report.find("\"check\":\"cg_equivariance\"") !=
                           std::string::npos &&
                       report.find("\"pass\":false") != std::string::npos;
    emit(10, "corrupted coupling table fails the self-check by name",
         rc == 1 && named,
         fmt("exit code %d (want 1); failing check named in the report: %s",
             rc, named ? "yes" : "no"));
  }

  std::printf("acceptance: %d/10 criteria passed\n", 10 - g_failed);
  return g_failed;
}
