#pragma once

// Equivariant layers. Each layer exists in two forms: a plain function on
// SteerableTensor (used by evaluation paths and as a cross-check oracle) and a
// tape builder (used by the trainable model). Both share the same math.
//
//  - equi_linear: per-degree channel mixing (Schur: no cross-degree terms),
//    bias permitted on the l=0 block only.
//  - gate: SiLU on scalar value channels; each l>0 channel scaled by the
//    sigmoid of a dedicated extra scalar channel, which is consumed.
//  - equi_norm: per degree, divide channels by the RMS of their L2 norms
//    (+epsilon), mean-subtracting l=0 first; learnable per-channel scale.

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "empp/autodiff.hpp"
#include "empp/so3.hpp"

namespace empp {

inline constexpr std::size_t kNoParam = static_cast<std::size_t>(-1);

namespace detail {

// Index of the unique block with the given degree, or -1. Throws if the
// degree appears in more than one block (layers assume one block per degree).
inline int find_degree_block(const IrrepsLayout& lay, int degree) {
  int found = -1;
  for (std::size_t b = 0; b < lay.blocks.size(); ++b)
    if (lay.blocks[b].degree == degree) {
      if (found >= 0)
        throw std::invalid_argument("layer layouts need one block per degree");
      found = static_cast<int>(b);
    }
  return found;
}

}  // namespace detail

// --- Per-degree linear mixing ----------------------------------------------

struct EquiLinearWeights {
  IrrepsLayout in, out;
  std::vector<std::vector<double>> w;  // per out block: (out_mult x in_mult)
  std::vector<double> bias;            // optional, l=0 out block only
};

inline SteerableTensor equi_linear(const SteerableTensor& x,
                                   const EquiLinearWeights& w) {
  if (!(x.layout == w.in))
    throw std::invalid_argument("equi_linear: input layout mismatch");
  if (w.w.size() != w.out.blocks.size())
    throw std::invalid_argument("equi_linear: one mixing matrix per output block");
  SteerableTensor y = zeros_like(w.out);
  for (std::size_t b = 0; b < w.out.blocks.size(); ++b) {
    const auto& ob = w.out.blocks[b];
    const int ib = detail::find_degree_block(w.in, ob.degree);
    if (ib < 0)
      throw std::invalid_argument("equi_linear: output degree absent from input");
    const auto& inb = w.in.blocks[static_cast<std::size_t>(ib)];
    const int width = 2 * ob.degree + 1;
    if (w.w[b].size() != static_cast<std::size_t>(ob.mult * inb.mult))
      throw std::invalid_argument("equi_linear: mixing matrix size mismatch");
    detail::matmul(w.w[b].data(),
                   x.values.data() + w.in.block_offset(static_cast<std::size_t>(ib)),
                   y.values.data() + w.out.block_offset(b),
                   static_cast<std::size_t>(ob.mult),
                   static_cast<std::size_t>(inb.mult),
                   static_cast<std::size_t>(width));
  }
  if (!w.bias.empty()) {
    const int b0 = detail::find_degree_block(w.out, 0);
    if (b0 < 0 ||
        w.bias.size() !=
            static_cast<std::size_t>(w.out.blocks[static_cast<std::size_t>(b0)].mult))
      throw std::invalid_argument("equi_linear: bias must match the l=0 block");
    double* y0 = y.values.data() + w.out.block_offset(static_cast<std::size_t>(b0));
    for (std::size_t i = 0; i < w.bias.size(); ++i) y0[i] += w.bias[i];
  }
  return y;
}

// --- Gated nonlinearity -----------------------------------------------------

// Expands a layout's l=0 block with one extra scalar per l>0 channel (the
// gate scalars that gate() will consume).
inline IrrepsLayout gated_input_layout(const IrrepsLayout& ungated) {
  int gates = 0;
  for (const auto& b : ungated.blocks)
    if (b.degree > 0) gates += b.mult;
  if (detail::find_degree_block(ungated, 0) < 0)
    throw std::invalid_argument("gated_input_layout: need an l=0 block");
  std::vector<IrrepsLayout::Block> blocks = ungated.blocks;
  for (auto& b : blocks)
    if (b.degree == 0) b.mult += gates;
  return IrrepsLayout::of(std::move(blocks));
}

namespace detail {

struct GateShape {
  int n_value = 0;  // surviving l=0 channels
  int n_gate = 0;
  IrrepsLayout out;
};

inline GateShape gate_shape(const IrrepsLayout& in) {
  if (in.blocks.empty() || in.blocks[0].degree != 0)
    throw std::invalid_argument("gate: layout must start with an l=0 block");
  GateShape s;
  for (const auto& b : in.blocks)
    if (b.degree > 0) s.n_gate += b.mult;
  s.n_value = in.blocks[0].mult - s.n_gate;
  if (s.n_value <= 0)
    throw std::invalid_argument("gate: l=0 block too small to hold the gate scalars");
  std::vector<IrrepsLayout::Block> blocks = in.blocks;
  blocks[0].mult = s.n_value;
  s.out = IrrepsLayout::of(std::move(blocks));
  return s;
}

}  // namespace detail

inline SteerableTensor gate(const SteerableTensor& x) {
  const detail::GateShape s = detail::gate_shape(x.layout);
  SteerableTensor y = zeros_like(s.out);
  for (int c = 0; c < s.n_value; ++c) {
    const double v = x.values[static_cast<std::size_t>(c)];
    y.values[static_cast<std::size_t>(c)] = v / (1.0 + std::exp(-v));
  }
  int g = 0;
  for (std::size_t b = 1; b < x.layout.blocks.size(); ++b) {
    const auto& blk = x.layout.blocks[b];
    const int width = 2 * blk.degree + 1;
    const double* xb = x.values.data() + x.layout.block_offset(b);
    double* yb = y.values.data() + s.out.block_offset(b);
    for (int c = 0; c < blk.mult; ++c, ++g) {
      const double gs = x.values[static_cast<std::size_t>(s.n_value + g)];
      const double sg = 1.0 / (1.0 + std::exp(-gs));
      for (int i = 0; i < width; ++i) yb[c * width + i] = sg * xb[c * width + i];
    }
  }
  return y;
}

inline int tape_gate(Tape& t, const IrrepsLayout& in, int x) {
  const detail::GateShape s = detail::gate_shape(in);
  std::vector<int> parts;
  parts.push_back(t.silu(t.slice(x, 0, static_cast<std::size_t>(s.n_value))));
  const int gates = t.sigmoid(t.slice(x, static_cast<std::size_t>(s.n_value),
                                      static_cast<std::size_t>(s.n_gate)));
  int g = 0;
  for (std::size_t b = 1; b < in.blocks.size(); ++b) {
    const auto& blk = in.blocks[b];
    const int width = 2 * blk.degree + 1;
    std::vector<int> rows;
    rows.reserve(static_cast<std::size_t>(blk.mult * width));
    for (int c = 0; c < blk.mult; ++c, ++g)
      for (int i = 0; i < width; ++i) rows.push_back(g);
    const int gb = t.gather(gates, 1, std::move(rows));
    const int xb = t.slice(x, static_cast<std::size_t>(in.block_offset(b)),
                           static_cast<std::size_t>(blk.mult * width));
    parts.push_back(t.mul(xb, gb));
  }
  return parts.size() == 1 ? parts[0] : t.concat(parts);
}

// --- RMS normalization -------------------------------------------------------

inline SteerableTensor equi_norm(const SteerableTensor& x,
                                 const std::vector<std::vector<double>>& affine,
                                 double eps = 1e-8) {
  if (affine.size() != x.layout.blocks.size())
    throw std::invalid_argument("equi_norm: one affine vector per block");
  SteerableTensor y = zeros_like(x.layout);
  for (std::size_t b = 0; b < x.layout.blocks.size(); ++b) {
    const auto& blk = x.layout.blocks[b];
    if (affine[b].size() != static_cast<std::size_t>(blk.mult))
      throw std::invalid_argument("equi_norm: affine size mismatch");
    const int width = 2 * blk.degree + 1;
    const std::size_t off = static_cast<std::size_t>(x.layout.block_offset(b));
    const std::size_t len = static_cast<std::size_t>(blk.mult * width);
    std::vector<double> tmp(x.values.begin() + static_cast<std::ptrdiff_t>(off),
                            x.values.begin() + static_cast<std::ptrdiff_t>(off + len));
    if (blk.degree == 0) {
      double mean = 0.0;
      for (double v : tmp) mean += v;
      mean /= static_cast<double>(blk.mult);
      for (double& v : tmp) v -= mean;
    }
    double ssum = 0.0;
    for (double v : tmp) ssum += v * v;
    const double rms = std::sqrt(ssum / static_cast<double>(blk.mult));
    const double inv = 1.0 / (rms + eps);
    for (int c = 0; c < blk.mult; ++c)
      for (int i = 0; i < width; ++i)
        y.values[off + static_cast<std::size_t>(c * width + i)] =
            tmp[static_cast<std::size_t>(c * width + i)] * inv *
            affine[b][static_cast<std::size_t>(c)];
  }
  return y;
}

// --- Tape layer wrappers ----------------------------------------------------

struct LinearLayer {
  IrrepsLayout in, out;
  std::vector<std::size_t> w_idx;  // per out block
  std::size_t b_idx = kNoParam;

  static LinearLayer create(ParameterStore& ps, const std::string& prefix,
                            const IrrepsLayout& in, const IrrepsLayout& out,
                            bool with_bias, std::mt19937_64& rng) {
    LinearLayer L;
    L.in = in;
    L.out = out;
    for (std::size_t b = 0; b < out.blocks.size(); ++b) {
      const auto& ob = out.blocks[b];
      const int ib = detail::find_degree_block(in, ob.degree);
      if (ib < 0)
        throw std::invalid_argument("LinearLayer: output degree absent from input");
      const int in_mult = in.blocks[static_cast<std::size_t>(ib)].mult;
      std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(in_mult));
      std::vector<double> w(static_cast<std::size_t>(ob.mult * in_mult));
      for (double& v : w) v = g(rng);
      L.w_idx.push_back(ps.add(prefix + ".w" + std::to_string(ob.degree),
                               {static_cast<std::size_t>(ob.mult),
                                static_cast<std::size_t>(in_mult)},
                               std::move(w)));
    }
    if (with_bias) {
      const int b0 = detail::find_degree_block(out, 0);
      if (b0 < 0)
        throw std::invalid_argument("LinearLayer: bias requires an l=0 block");
      const std::size_t m0 =
          static_cast<std::size_t>(out.blocks[static_cast<std::size_t>(b0)].mult);
      L.b_idx = ps.add(prefix + ".b", {m0}, std::vector<double>(m0, 0.0));
    }
    return L;
  }

  int apply(Tape& t, ParameterStore& ps, int x) const {
    std::vector<int> parts;
    for (std::size_t b = 0; b < out.blocks.size(); ++b) {
      const auto& ob = out.blocks[b];
      const int ib = detail::find_degree_block(in, ob.degree);
      const auto& inb = in.blocks[static_cast<std::size_t>(ib)];
      const int width = 2 * ob.degree + 1;
      const int xb =
          t.slice(x, static_cast<std::size_t>(in.block_offset(static_cast<std::size_t>(ib))),
                  static_cast<std::size_t>(inb.mult * width));
      int yb = t.matmul(t.param(ps.at(w_idx[b])), xb,
                        static_cast<std::size_t>(ob.mult),
                        static_cast<std::size_t>(inb.mult),
                        static_cast<std::size_t>(width));
      if (ob.degree == 0 && b_idx != kNoParam)
        yb = t.add(yb, t.param(ps.at(b_idx)));
      parts.push_back(yb);
    }
    return parts.size() == 1 ? parts[0] : t.concat(parts);
  }

  EquiLinearWeights snapshot(const ParameterStore& ps) const {
    EquiLinearWeights w;
    w.in = in;
    w.out = out;
    for (std::size_t idx : w_idx) w.w.push_back(ps.at(idx).values);
    if (b_idx != kNoParam) w.bias = ps.at(b_idx).values;
    return w;
  }
};

struct NormLayer {
  IrrepsLayout layout;
  std::vector<std::size_t> affine_idx;  // per block
  double eps = 1e-8;

  static NormLayer create(ParameterStore& ps, const std::string& prefix,
                          const IrrepsLayout& layout, double eps = 1e-8) {
    NormLayer n;
    n.layout = layout;
    n.eps = eps;
    for (const auto& blk : layout.blocks)
      n.affine_idx.push_back(
          ps.add(prefix + ".affine" + std::to_string(blk.degree),
                 {static_cast<std::size_t>(blk.mult)},
                 std::vector<double>(static_cast<std::size_t>(blk.mult), 1.0)));
    return n;
  }

  int apply(Tape& t, ParameterStore& ps, int x) const {
    std::vector<int> parts;
    for (std::size_t b = 0; b < layout.blocks.size(); ++b) {
      const auto& blk = layout.blocks[b];
      const int width = 2 * blk.degree + 1;
      const std::size_t len = static_cast<std::size_t>(blk.mult * width);
      int xb = t.slice(x, static_cast<std::size_t>(layout.block_offset(b)), len);
      if (blk.degree == 0) {
        const int neg_mean = t.scale(t.mean(xb), -1.0);
        xb = t.add(xb, t.gather(neg_mean, 1,
                                std::vector<int>(static_cast<std::size_t>(blk.mult), 0)));
      }
      const int msq = t.scale(t.sum(t.mul(xb, xb)), 1.0 / blk.mult);
      // sqrt via exp/log; the floor keeps the gradient finite at zero input.
      const int rms = t.exp(t.scale(t.log(msq, 1e-30), 0.5));
      const int inv = t.exp(t.scale(t.log(t.add(rms, t.constant(eps))), -1.0));
      const int xn = t.scale_by(xb, inv);
      std::vector<int> rows;
      rows.reserve(len);
      for (int c = 0; c < blk.mult; ++c)
        for (int i = 0; i < width; ++i) rows.push_back(c);
      const int aff = t.gather(t.param(ps.at(affine_idx[b])), 1, std::move(rows));
      parts.push_back(t.mul(xn, aff));
    }
    return parts.size() == 1 ? parts[0] : t.concat(parts);
  }
};

struct EmbedTable {
  std::size_t idx = kNoParam;
  int max_z = 0;
  int dim = 0;

  static EmbedTable create(ParameterStore& ps, const std::string& prefix, int max_z,
                           int dim, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> init(static_cast<std::size_t>(max_z) *
                             static_cast<std::size_t>(dim));
    for (double& v : init) v = g(rng);
    EmbedTable e;
    e.max_z = max_z;
    e.dim = dim;
    e.idx = ps.add(prefix, {static_cast<std::size_t>(max_z),
                            static_cast<std::size_t>(dim)},
                   std::move(init));
    return e;
  }

  int apply(Tape& t, ParameterStore& ps, int z) const {
    if (z < 1 || z > max_z)
      throw std::invalid_argument("EmbedTable: atomic number out of range");
    return t.gather(t.param(ps.at(idx)), static_cast<std::size_t>(dim), {z - 1});
  }
};

}  // namespace empp
