#pragma once

// Molecular data handling: XYZ parsing/writing, cutoff neighbor lists,
// synthetic toy-dataset generation, splits, and a binary dataset cache.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "empp/container.hpp"
#include "empp/so3.hpp"

namespace empp {

namespace detail {

inline const std::array<const char*, 118>& element_symbols() {
  static const std::array<const char*, 118> t = {
      "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg",
      "Al", "Si", "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr",
      "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr",
      "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd",
      "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
      "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf",
      "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po",
      "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm",
      "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs",
      "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};
  return t;
}

}  // namespace detail

// Atomic number for a symbol; 0 if unknown.
inline int element_number(const std::string& symbol) {
  const auto& tab = detail::element_symbols();
  for (std::size_t i = 0; i < tab.size(); ++i)
    if (symbol == tab[i]) return static_cast<int>(i) + 1;
  return 0;
}

inline std::string element_symbol(int z) {
  if (z < 1 || z > 118)
    throw std::invalid_argument("element_symbol: atomic number out of range");
  return detail::element_symbols()[static_cast<std::size_t>(z) - 1];
}

struct Molecule {
  std::vector<int> z;
  std::vector<Vec3> pos;
  std::optional<double> energy;
  std::vector<Vec3> vector_labels;  // optional per-atom labels (e.g. forces)

  std::size_t size() const { return z.size(); }
};

// --- XYZ I/O ---------------------------------------------------------------

namespace detail {

inline bool parse_double_token(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

inline std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> toks;
  std::istringstream ss(line);
  std::string t;
  while (ss >> t) toks.push_back(t);
  return toks;
}

}  // namespace detail

// Parses concatenated XYZ blocks: count line, comment line (may carry
// "energy=<float>"), then "Symbol x y z" rows. Errors carry line numbers.
inline std::vector<Molecule> parse_xyz(const std::string& text) {
  std::vector<std::string> lines;
  {
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
  }
  std::vector<Molecule> mols;
  std::size_t i = 0;
  auto fail = [](std::size_t line_no, const std::string& what) -> void {
    throw std::runtime_error("line " + std::to_string(line_no + 1) + ": " + what);
  };
  while (i < lines.size()) {
    if (detail::tokenize(lines[i]).empty()) {  // blank separator
      ++i;
      continue;
    }
    const std::vector<std::string> count_toks = detail::tokenize(lines[i]);
    long count = 0;
    {
      char* end = nullptr;
      count = std::strtol(count_toks[0].c_str(), &end, 10);
      if (count_toks.size() != 1 || end != count_toks[0].c_str() + count_toks[0].size() ||
          count <= 0)
        fail(i, "malformed atom count '" + lines[i] + "'");
    }
    const std::size_t count_line = i;
    ++i;
    if (i >= lines.size())
      throw std::runtime_error("truncated input: missing comment line after line " +
                               std::to_string(count_line + 1));
    Molecule m;
    for (const std::string& tok : detail::tokenize(lines[i])) {
      if (tok.rfind("energy=", 0) == 0) {
        double e = 0.0;
        if (detail::parse_double_token(tok.substr(7), e)) m.energy = e;
      }
    }
    ++i;
    for (long a = 0; a < count; ++a, ++i) {
      if (i >= lines.size())
        throw std::runtime_error("truncated input: expected " + std::to_string(count) +
                                 " atom rows after line " + std::to_string(count_line + 1));
      const std::vector<std::string> toks = detail::tokenize(lines[i]);
      if (toks.size() != 4) fail(i, "expected 'Symbol x y z'");
      const int z = element_number(toks[0]);
      if (z == 0) fail(i, "unknown element symbol '" + toks[0] + "'");
      Vec3 p;
      if (!detail::parse_double_token(toks[1], p.x) ||
          !detail::parse_double_token(toks[2], p.y) ||
          !detail::parse_double_token(toks[3], p.z))
        fail(i, "non-numeric coordinate");
      if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
        fail(i, "non-finite coordinate");
      m.z.push_back(z);
      m.pos.push_back(p);
    }
    mols.push_back(std::move(m));
  }
  return mols;
}

inline std::string write_xyz(const std::vector<Molecule>& mols) {
  std::string out;
  char buf[160];
  for (const Molecule& m : mols) {
    std::snprintf(buf, sizeof buf, "%zu\n", m.size());
    out += buf;
    if (m.energy.has_value()) {
      std::snprintf(buf, sizeof buf, "energy=%.17g\n", *m.energy);
      out += buf;
    } else {
      out += "\n";
    }
    for (std::size_t a = 0; a < m.size(); ++a) {
      std::snprintf(buf, sizeof buf, "%s %.17g %.17g %.17g\n",
                    element_symbol(m.z[a]).c_str(), m.pos[a].x, m.pos[a].y,
                    m.pos[a].z);
      out += buf;
    }
  }
  return out;
}

// --- Neighbor lists ---------------------------------------------------------

struct Edge {
  int src = 0, dst = 0;
  Vec3 r;           // pos[dst] - pos[src]
  double dist = 0;  // = |r|
};

struct NeighborList {
  std::vector<Edge> edges;  // sorted by (src, dst)
};

inline NeighborList neighbor_list(const Molecule& mol, double cutoff) {
  if (!(cutoff > 0.0)) throw std::invalid_argument("neighbor_list: cutoff must be > 0");
  NeighborList nl;
  const int n = static_cast<int>(mol.size());
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      if (a == b) continue;
      const Vec3 r = mol.pos[static_cast<std::size_t>(b)] -
                     mol.pos[static_cast<std::size_t>(a)];
      const double d = r.norm();
      if (d < 1e-12)
        throw std::invalid_argument("neighbor_list: atoms " + std::to_string(a) +
                                    " and " + std::to_string(b) +
                                    " share a position (degenerate geometry)");
      if (d <= cutoff) nl.edges.push_back({a, b, r, d});
    }
  return nl;
}

// --- Synthetic datasets -----------------------------------------------------

struct Dataset {
  std::vector<Molecule> molecules;
  std::vector<int> split;  // 0 train, 1 val, 2 test
  std::string provenance;
};

// Smooth invariant toy label: sum of 1/distance over pairs within the cutoff.
inline double synthetic_energy(const Molecule& mol, double cutoff) {
  double e = 0.0;
  for (std::size_t a = 0; a < mol.size(); ++a)
    for (std::size_t b = a + 1; b < mol.size(); ++b) {
      const double d = (mol.pos[a] - mol.pos[b]).norm();
      if (d <= cutoff) e += 1.0 / d;
    }
  return e;
}

enum class SyntheticTemplate { kTetrahedral, kPlanarHex, kChain };

inline SyntheticTemplate synthetic_template_from_name(const std::string& name) {
  if (name == "tetrahedral") return SyntheticTemplate::kTetrahedral;
  if (name == "planar_hex") return SyntheticTemplate::kPlanarHex;
  if (name == "chain") return SyntheticTemplate::kChain;
  throw std::invalid_argument("unknown synthetic template '" + name + "'");
}

namespace detail {

inline Molecule synthetic_base(SyntheticTemplate t) {
  Molecule m;
  switch (t) {
    case SyntheticTemplate::kTetrahedral: {
      // CH4: carbon at the origin, hydrogens at bond length 1.09 A.
      const double s = 1.09 / std::sqrt(3.0);
      m.z = {6, 1, 1, 1, 1};
      m.pos = {{0, 0, 0}, {s, s, s}, {s, -s, -s}, {-s, s, -s}, {-s, -s, s}};
      break;
    }
    case SyntheticTemplate::kPlanarHex: {
      // C6 ring, bond 1.39 A (hexagon circumradius equals the side length).
      const double r = 1.39;
      m.z.assign(6, 6);
      for (int k = 0; k < 6; ++k) {
        const double a = k * M_PI / 3.0;
        m.pos.push_back({r * std::cos(a), r * std::sin(a), 0.0});
      }
      break;
    }
    case SyntheticTemplate::kChain: {
      m.z.assign(4, 6);
      for (int k = 0; k < 4; ++k) m.pos.push_back({1.5 * k, 0.0, 0.0});
      break;
    }
  }
  return m;
}

}  // namespace detail

inline Dataset gen_synthetic(SyntheticTemplate t, std::size_t count, double jitter,
                             std::mt19937_64& rng, double cutoff = 5.0) {
  if (!(jitter >= 0.0) || jitter >= 0.2)
    throw std::invalid_argument("gen_synthetic: jitter must be in [0, 0.2)");
  const Molecule base = detail::synthetic_base(t);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset ds;
  ds.provenance = "synthetic";
  for (std::size_t s = 0; s < count; ++s) {
    Molecule m = base;
    if (jitter > 0.0)
      for (Vec3& p : m.pos) {
        p.x += jitter * noise(rng);
        p.y += jitter * noise(rng);
        p.z += jitter * noise(rng);
      }
    const Rotation rot = Rotation::random(rng);
    for (Vec3& p : m.pos) p = rot.apply(p);
    m.energy = synthetic_energy(m, cutoff);
    ds.molecules.push_back(std::move(m));
  }
  ds.split.assign(count, 0);
  return ds;
}

// Deterministic shuffled partition into train/val/test.
inline void split_dataset(Dataset& ds, const std::array<double, 3>& fractions,
                          std::uint64_t seed) {
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw std::invalid_argument("split_dataset: negative fraction");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split_dataset: fractions must sum to 1");
  const std::size_t n = ds.molecules.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t c0 = static_cast<std::size_t>(
      std::floor(fractions[0] * static_cast<double>(n) + 1e-9));
  const std::size_t c01 = static_cast<std::size_t>(
      std::floor((fractions[0] + fractions[1]) * static_cast<double>(n) + 1e-9));
  ds.split.assign(n, 2);
  for (std::size_t i = 0; i < n && i < c0; ++i) ds.split[idx[i]] = 0;
  for (std::size_t i = c0; i < n && i < c01; ++i) ds.split[idx[i]] = 1;
}

// --- Dataset cache ----------------------------------------------------------
// Uses the shared array container; requires a uniform atom count (true for all
// synthetic templates). Missing energies are stored as NaN.

inline void write_dataset_cache(const std::string& path, const Dataset& ds) {
  const std::size_t n_mol = ds.molecules.size();
  if (n_mol == 0) throw std::invalid_argument("write_dataset_cache: empty dataset");
  const std::size_t n_atom = ds.molecules[0].size();
  for (const Molecule& m : ds.molecules)
    if (m.size() != n_atom)
      throw std::invalid_argument(
          "write_dataset_cache: molecules must share an atom count");
  ArrayRecord z{"z", {n_mol, n_atom}, {}};
  ArrayRecord pos{"pos", {n_mol, n_atom, 3}, {}};
  ArrayRecord energy{"energy", {n_mol}, {}};
  ArrayRecord split{"split", {n_mol}, {}};
  for (std::size_t i = 0; i < n_mol; ++i) {
    const Molecule& m = ds.molecules[i];
    for (std::size_t a = 0; a < n_atom; ++a) {
      z.data.push_back(static_cast<double>(m.z[a]));
      pos.data.push_back(m.pos[a].x);
      pos.data.push_back(m.pos[a].y);
      pos.data.push_back(m.pos[a].z);
    }
    energy.data.push_back(m.energy.value_or(std::nan("")));
    split.data.push_back(ds.split.size() == n_mol
                             ? static_cast<double>(ds.split[i])
                             : 0.0);
  }
  write_array_file(path, {z, pos, energy, split});
}

inline Dataset read_dataset_cache(const std::string& path) {
  const ArrayFile f = read_array_file(path);
  const ArrayRecord* z = f.find("z");
  const ArrayRecord* pos = f.find("pos");
  const ArrayRecord* energy = f.find("energy");
  const ArrayRecord* split = f.find("split");
  if (!z || !pos || !energy || !split || z->dims.size() != 2 ||
      pos->dims.size() != 3 || pos->dims[2] != 3)
    throw std::runtime_error(path + ": not a dataset cache");
  const std::size_t n_mol = z->dims[0];
  const std::size_t n_atom = z->dims[1];
  if (pos->dims[0] != n_mol || pos->dims[1] != n_atom ||
      energy->dims != std::vector<std::uint64_t>{n_mol} ||
      split->dims != std::vector<std::uint64_t>{n_mol})
    throw std::runtime_error(path + ": inconsistent dataset cache dims");
  Dataset ds;
  ds.provenance = path;
  for (std::size_t i = 0; i < n_mol; ++i) {
    Molecule m;
    for (std::size_t a = 0; a < n_atom; ++a) {
      m.z.push_back(static_cast<int>(z->data[i * n_atom + a]));
      const std::size_t o = (i * n_atom + a) * 3;
      m.pos.push_back({pos->data[o], pos->data[o + 1], pos->data[o + 2]});
    }
    if (!std::isnan(energy->data[i])) m.energy = energy->data[i];
    ds.molecules.push_back(std::move(m));
    ds.split.push_back(static_cast<int>(split->data[i]));
  }
  return ds;
}

}  // namespace empp
