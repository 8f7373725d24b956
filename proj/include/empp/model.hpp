#pragma once

// The full position-prediction model: a message-passing backbone over
// steerable node features, optional conditioning injections (removed-atom
// type, known scalar/vector property), and a two-branch head that outputs a
// radius histogram and a sphere-grid direction distribution per neighbor of
// the removed atom.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "empp/autodiff.hpp"
#include "empp/data.hpp"
#include "empp/nn.hpp"
#include "empp/prediction.hpp"
#include "empp/sphere_grid.hpp"
#include "empp/so3.hpp"

namespace empp {

struct ModelConfig {
  IrrepsLayout hidden = IrrepsLayout::of({{64, 0}, {32, 1}, {16, 2}, {8, 3}});
  int layers = 3;
  double cutoff = 5.0;
  int radial_bins = 16;
  int max_z = 118;

  int head_l_max = 2;      // degrees kept by the direction branch
  int head_channels = 32;  // channels per degree after the head coupling
  int head_embed_dim = 16; // scalar embedding contracted into the head coupling
  int head_hidden = 16;    // shared per-node MLP width in the direction branch
  double tau = 0.1;        // softmax temperature for both branches

  RadiusBinning binning{};
  double label_sigma = 0.5;

  int grid_n_theta = 100;
  int grid_n_phi = 100;
  GridKind grid_kind = GridKind::gauss_legendre_theta;

  int prop_centers = 32;  // radial basis size of the scalar-property encoder

  // Scaled-down variant: same pipeline, few enough parameters that central
  // differences over every one of them stay cheap.
  static ModelConfig compact() {
    ModelConfig c;
    c.hidden = IrrepsLayout::of({{4, 0}, {3, 1}, {2, 2}});
    c.layers = 2;
    c.radial_bins = 8;
    c.max_z = 10;
    c.head_channels = 3;
    c.head_embed_dim = 3;
    c.head_hidden = 4;
    c.binning.bins = 12;
    c.grid_n_theta = 8;
    c.grid_n_phi = 8;
    c.prop_centers = 8;
    return c;
  }
};

// Per-graph immutables: topology plus cached per-edge direction harmonics and
// radial-basis activations. Everything here is tape-independent; forward
// passes turn these vectors into tape constants.
struct PreparedGraph {
  std::vector<int> z;
  std::vector<Edge> edges;
  std::vector<std::vector<int>> in_edges;    // per node: indices into edges
  std::vector<std::vector<double>> edge_sh;  // per edge: components up to backbone degree
  std::vector<std::vector<double>> edge_rbf; // per edge: radial basis activations

  int masked_z = 0;  // > 0 enables removed-atom attribute injection
  std::vector<int> neighbor_nodes;       // head targets (indices into z/pos)
  std::vector<Vec3> neighbor_positions;
  std::vector<NeighborLabels> labels;    // aligned with neighbor_nodes

  std::optional<double> scalar_label;
  std::optional<Vec3> vector_label;

  int size() const { return static_cast<int>(z.size()); }
};

struct EmppLossValue {
  double radius = 0.0;
  double direction = 0.0;
  double total = 0.0;
};

// Per-neighbor head outputs as tape node ids.
struct HeadOutput {
  int radius = -1;     // bin probabilities
  int direction = -1;  // grid-node probabilities
  int coeff = -1;      // direction-branch coefficients (head output layout)
};

class Model {
 public:
  ModelConfig cfg;
  ParameterStore params;
  SphereGrid grid;

  IrrepsLayout sh_layout;     // one channel per degree 0..backbone max
  IrrepsLayout gated_hidden;  // hidden plus gate scalars
  IrrepsLayout head_mid;      // hidden truncated to the head band limit
  IrrepsLayout head_gated;
  IrrepsLayout head_out;      // head_channels per degree 0..head_l_max
  TpPlan msg_plan;            // hidden (x) edge harmonics -> hidden
  TpPlan head_plan;           // head_mid (x) type embedding -> head_out

  EmbedTable embed_atom;
  EmbedTable embed_head;
  std::size_t mask_w1 = 0, mask_b1 = 0, mask_w2 = 0, mask_b2 = 0;
  std::size_t prop_range = 0;  // non-trainable [lo, hi] of the scalar label
  std::size_t prop_scalar_w = 0, prop_scalar_b = 0;
  LinearLayer prop_vec;
  std::size_t readout_w = 0, readout_b = 0;

  struct Layer {
    std::size_t tp_w = 0;
    std::size_t rad_w1 = 0, rad_b1 = 0, rad_w2 = 0, rad_b2 = 0;
    LinearLayer lin;   // hidden -> gated_hidden
    NormLayer norm;    // hidden
  };
  std::vector<Layer> layers;

  LinearLayer head_lin1;  // hidden -> head_gated
  std::size_t head_tp_w = 0;
  LinearLayer head_lin2;  // head_out -> head_out
  std::size_t radius_w = 0, radius_b = 0;
  std::size_t dir_w1 = 0, dir_b1 = 0, dir_w2 = 0, dir_b2 = 0;

  Model(ModelConfig config, std::uint64_t seed) : cfg(std::move(config)) {
    if (cfg.hidden.max_degree() < 2)
      throw std::invalid_argument("Model: hidden layout must reach degree 2");
    if (cfg.hidden.blocks.front().degree != 0)
      throw std::invalid_argument("Model: hidden layout must start with degree 0");
    if (cfg.head_l_max < 0 || cfg.head_l_max > cfg.hidden.max_degree())
      throw std::invalid_argument("Model: head band limit exceeds hidden degrees");

    grid = make_grid(cfg.grid_n_theta, cfg.grid_n_phi, cfg.grid_kind, cfg.head_l_max);
    if (grid.size() < 4 * cfg.head_l_max * cfg.head_l_max)
      throw std::invalid_argument(
          "Model: grid too coarse to sample the head band limit");

    const int l_back = cfg.hidden.max_degree();
    std::vector<IrrepsLayout::Block> shb, midb, outb;
    for (int l = 0; l <= l_back; ++l) shb.push_back({1, l});
    sh_layout = IrrepsLayout::of(std::move(shb));
    for (const auto& b : cfg.hidden.blocks)
      if (b.degree <= cfg.head_l_max) midb.push_back(b);
    head_mid = IrrepsLayout::of(std::move(midb));
    for (int l = 0; l <= cfg.head_l_max; ++l)
      outb.push_back({cfg.head_channels, l});
    head_out = IrrepsLayout::of(std::move(outb));

    gated_hidden = gated_input_layout(cfg.hidden);
    head_gated = gated_input_layout(head_mid);
    msg_plan = make_tp_plan(cfg.hidden, sh_layout, cfg.hidden);
    head_plan = make_tp_plan(
        head_mid, IrrepsLayout::of({{cfg.head_embed_dim, 0}}), head_out);

    build_params(seed);
    cache_grid_blocks();
  }

  int backbone_l_max() const { return cfg.hidden.max_degree(); }
  int scalar_width() const { return cfg.hidden.blocks.front().mult; }

  void set_property_range(double lo, double hi) {
    params.at(prop_range).values = {lo, hi};
  }

  // -- graph preparation ------------------------------------------------------

  PreparedGraph prepare(const Molecule& mol) const {
    return prepare_edges(mol, neighbor_list(mol, cfg.cutoff));
  }

  PreparedGraph prepare(const MaskedMolecule& mm) const {
    PreparedGraph g = prepare_edges(mm.sub, mm.nl);
    g.masked_z = mm.masked_z;
    g.neighbor_nodes = mm.neighbors;
    for (int k : mm.neighbors)
      g.neighbor_positions.push_back(mm.sub.pos[static_cast<std::size_t>(k)]);
    g.labels = position_labels(mm, grid, cfg.binning, cfg.label_sigma,
                               cfg.head_l_max);
    return g;
  }

  std::vector<double> radial_basis(double d) const {
    const int n = cfg.radial_bins;
    const double spacing = cfg.cutoff / (n - 1);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int b = 0; b < n; ++b) {
      const double u = (d - b * spacing) / spacing;
      v[static_cast<std::size_t>(b)] = std::exp(-0.5 * u * u);
    }
    return v;
  }

  std::vector<double> property_basis(double y) const {
    const int n = cfg.prop_centers;
    const double lo = params.at(prop_range).values[0];
    const double hi = params.at(prop_range).values[1];
    const double spacing = (hi > lo && n > 1) ? (hi - lo) / (n - 1) : 1.0;
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int b = 0; b < n; ++b) {
      const double u = (y - (lo + b * spacing)) / spacing;
      v[static_cast<std::size_t>(b)] = std::exp(-0.5 * u * u);
    }
    return v;
  }

  // -- forward ----------------------------------------------------------------

  // Runs the backbone; returns one hidden-layout tape node per graph node.
  // Messages flow synchronously: each layer reads the previous layer's
  // features for every edge, then applies gate, norm, and a residual add.
  // Nodes without incoming edges keep their value through the layer.
  std::vector<int> forward_features(Tape& t, const PreparedGraph& g) {
    const int n = g.size();
    const int m0 = scalar_width();
    const std::size_t hdim = static_cast<std::size_t>(cfg.hidden.dim());
    const int zero_tail =
        t.constant(std::vector<double>(hdim - static_cast<std::size_t>(m0), 0.0));

    std::vector<int> h(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      h[static_cast<std::size_t>(i)] = t.concat(
          {embed_atom.apply(t, params, g.z[static_cast<std::size_t>(i)]), zero_tail});

    if (g.scalar_label) {
      const int rbf = t.constant(property_basis(*g.scalar_label));
      int inj = t.add(t.matmul(t.param(params.at(prop_scalar_w)), rbf,
                               static_cast<std::size_t>(m0),
                               static_cast<std::size_t>(cfg.prop_centers), 1),
                      t.param(params.at(prop_scalar_b)));
      inj = t.concat({inj, zero_tail});
      for (int& node : h) node = t.add(node, inj);
    }
    if (g.vector_label) {
      const double mag = g.vector_label->norm();
      if (mag > 0.0) {
        std::vector<double> comps = sh_components(Direction(*g.vector_label), 1);
        for (double& v : comps) v *= mag;
        const int enc = prop_vec.apply(t, params, t.constant(std::move(comps)));
        const std::size_t enc_len = static_cast<std::size_t>(prop_vec.out.dim());
        const int inj = t.concat(
            {enc, t.constant(std::vector<double>(hdim - enc_len, 0.0))});
        for (int& node : h) node = t.add(node, inj);
      }
    }

    int mask_inj = -1;
    if (g.masked_z > 0) {
      const int e = embed_atom.apply(t, params, g.masked_z);
      int x = t.add(t.matmul(t.param(params.at(mask_w1)), e,
                             static_cast<std::size_t>(m0),
                             static_cast<std::size_t>(m0), 1),
                    t.param(params.at(mask_b1)));
      x = t.silu(x);
      x = t.add(t.matmul(t.param(params.at(mask_w2)), x,
                         static_cast<std::size_t>(m0),
                         static_cast<std::size_t>(m0), 1),
                t.param(params.at(mask_b2)));
      mask_inj = t.concat({x, zero_tail});
    }

    std::vector<int> sh_ids(g.edges.size()), rbf_ids(g.edges.size());
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
      sh_ids[e] = t.constant(g.edge_sh[e]);
      rbf_ids[e] = t.constant(g.edge_rbf[e]);
    }

    for (const Layer& ly : layers) {
      if (mask_inj >= 0)
        for (int& node : h) node = t.add(node, mask_inj);

      const int tpw = t.param(params.at(ly.tp_w));
      std::vector<int> msg(g.edges.size());
      for (std::size_t e = 0; e < g.edges.size(); ++e) {
        const int scales = radial_scales(t, ly, rbf_ids[e]);
        const int tp = t.cg_contract(
            msg_plan, h[static_cast<std::size_t>(g.edges[e].src)], sh_ids[e],
            tpw, scales);
        msg[e] = ly.lin.apply(t, params, tp);
      }

      std::vector<int> next = h;
      for (int k = 0; k < n; ++k) {
        const std::vector<int>& in = g.in_edges[static_cast<std::size_t>(k)];
        if (in.empty()) continue;
        std::vector<int> terms;
        terms.reserve(in.size());
        for (int e : in) terms.push_back(msg[static_cast<std::size_t>(e)]);
        int agg = terms.size() == 1 ? terms[0] : t.add(terms);
        agg = t.scale(agg, 1.0 / static_cast<double>(terms.size()));
        const int gated = tape_gate(t, gated_hidden, agg);
        const int normed = ly.norm.apply(t, params, gated);
        next[static_cast<std::size_t>(k)] =
            t.add(h[static_cast<std::size_t>(k)], normed);
      }
      h = std::move(next);
    }
    return h;
  }

  // Per-tape cache for head constants shared across neighbors.
  struct HeadShared {
    std::vector<int> sh_blocks;  // per degree: grid harmonics, node-major
    int embed_z = 0;
    int embed_id = -1;
  };

  HeadOutput head_forward(Tape& t, HeadShared& shared, int f, int masked_z) {
    int x = head_lin1.apply(t, params, f);
    x = tape_gate(t, head_gated, x);
    if (shared.embed_id < 0 || shared.embed_z != masked_z) {
      shared.embed_id = embed_head.apply(t, params, masked_z);
      shared.embed_z = masked_z;
    }
    const int tp = t.cg_contract(head_plan, x, shared.embed_id,
                                 t.param(params.at(head_tp_w)));
    const int y = head_lin2.apply(t, params, tp);

    HeadOutput out;
    out.coeff = y;

    const std::size_t c = static_cast<std::size_t>(cfg.head_channels);
    const int l0 = t.slice(y, 0, c);
    int rl = t.add(t.matmul(t.param(params.at(radius_w)), l0,
                            static_cast<std::size_t>(cfg.binning.bins), c, 1),
                   t.param(params.at(radius_b)));
    out.radius = t.softmax(t.scale(rl, 1.0 / cfg.tau));

    // Direction branch: synthesizing the coefficients on the grid and running
    // the shared per-node MLP is reassociated as per-degree products with the
    // first MLP layer, so the grid-sized matmuls touch the hidden width, not
    // the channel count.
    const std::size_t s = static_cast<std::size_t>(grid.size());
    const std::size_t hw = static_cast<std::size_t>(cfg.head_hidden);
    if (shared.sh_blocks.empty()) {
      for (int l = 0; l <= cfg.head_l_max; ++l)
        shared.sh_blocks.push_back(t.constant(grid_sh_blocks_[static_cast<std::size_t>(l)]));
    }
    const int w1 = t.param(params.at(dir_w1));
    std::vector<int> parts;
    for (int l = 0; l <= cfg.head_l_max; ++l) {
      const std::size_t width = static_cast<std::size_t>(2 * l + 1);
      const int xl = t.slice(
          y, static_cast<std::size_t>(head_out.block_offset(static_cast<std::size_t>(l))),
          c * width);
      const int pl = t.matmul(w1, xl, hw, c, width);
      parts.push_back(t.matmul(shared.sh_blocks[static_cast<std::size_t>(l)], pl,
                               s, width, hw, false, true));
    }
    int hm = parts.size() == 1 ? parts[0] : t.add(parts);
    hm = t.add(hm, t.gather(t.param(params.at(dir_b1)), hw,
                            std::vector<int>(s, 0)));
    hm = t.silu(hm);
    int logits = t.matmul(hm, t.param(params.at(dir_w2)), s, hw, 1);
    logits = t.add(logits, t.gather(t.param(params.at(dir_b2)), 1,
                                    std::vector<int>(s, 0)));
    out.direction = t.softmax(t.scale(logits, 1.0 / cfg.tau));
    return out;
  }

  // Tape-free direction synthesis from head coefficients; lets callers move
  // coefficients (e.g. rotate them) and compare resulting distributions.
  DirectionDistribution synthesize_direction(const SteerableTensor& coeff) const {
    if (!(coeff.layout == head_out))
      throw std::invalid_argument("synthesize_direction: unexpected layout");
    const std::size_t s = static_cast<std::size_t>(grid.size());
    const std::size_t hw = static_cast<std::size_t>(cfg.head_hidden);
    const std::size_t c = static_cast<std::size_t>(cfg.head_channels);
    const std::vector<double>& w1 = params.at(dir_w1).values;
    const std::vector<double>& b1 = params.at(dir_b1).values;
    const std::vector<double>& w2 = params.at(dir_w2).values;
    const double b2 = params.at(dir_b2).values[0];

    std::vector<double> hm(s * hw, 0.0);
    std::vector<double> pl;
    for (int l = 0; l <= cfg.head_l_max; ++l) {
      const std::size_t width = static_cast<std::size_t>(2 * l + 1);
      pl.assign(hw * width, 0.0);
      const double* xl =
          coeff.values.data() + head_out.block_offset(static_cast<std::size_t>(l));
      detail::matmul(w1.data(), xl, pl.data(), hw, c, width);
      detail::matmul(grid_sh_blocks_[static_cast<std::size_t>(l)].data(), pl.data(),
                     hm.data(), s, width, hw, false, true, true);
    }
    std::vector<double> logits(s);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < s; ++i) {
      double acc = b2;
      for (std::size_t j = 0; j < hw; ++j) {
        const double v = hm[i * hw + j] + b1[j];
        acc += w2[j] * (v / (1.0 + std::exp(-v)));
      }
      logits[i] = acc / cfg.tau;
      mx = std::max(mx, logits[i]);
    }
    DirectionDistribution out;
    out.grid = &grid;
    out.weighted = false;  // softmax mass, not weight-carrying label mass
    out.p.resize(s);
    double sum = 0.0;
    for (std::size_t i = 0; i < s; ++i) {
      out.p[i] = std::exp(logits[i] - mx);
      sum += out.p[i];
    }
    for (double& v : out.p) v /= sum;
    return out;
  }

  // -- losses -----------------------------------------------------------------

  // Loss for one masked graph on the caller's tape: per-neighbor KL terms for
  // both branches, averaged over neighbors, summed. backward (optional) seeds
  // d(total)/d(node) = grad_scale and accumulates into parameter grads.
  EmppLossValue masked_loss(Tape& t, const PreparedGraph& g, bool with_grad,
                            double grad_scale = 1.0) {
    if (g.neighbor_nodes.empty())
      throw std::invalid_argument("masked_loss: graph has no labeled neighbors");
    std::vector<int> feats = forward_features(t, g);
    HeadShared shared;
    std::vector<int> rad_terms, dir_terms;
    for (std::size_t i = 0; i < g.neighbor_nodes.size(); ++i) {
      const int f = feats[static_cast<std::size_t>(g.neighbor_nodes[i])];
      const HeadOutput head = head_forward(t, shared, f, g.masked_z);
      rad_terms.push_back(tape_kl(t, g.labels[i].radius.p, head.radius));
      dir_terms.push_back(tape_kl(t, g.labels[i].direction.p, head.direction));
    }
    const double inv = 1.0 / static_cast<double>(rad_terms.size());
    const int lr = t.scale(rad_terms.size() == 1 ? rad_terms[0] : t.add(rad_terms), inv);
    const int ld = t.scale(dir_terms.size() == 1 ? dir_terms[0] : t.add(dir_terms), inv);
    const int ltot = t.add(lr, ld);
    EmppLossValue v;
    v.radius = t.value(lr)[0];
    v.direction = t.value(ld)[0];
    v.total = t.value(ltot)[0];
    if (with_grad) t.backward(ltot, grad_scale);
    return v;
  }

  // KL(label || prediction) with the prediction floored at 1e-12; zero-mass
  // label entries contribute nothing.
  int tape_kl(Tape& t, const std::vector<double>& label, int pred) {
    double ent = 0.0;
    for (double q : label)
      if (q > 0.0) ent += q * std::log(std::max(q, 1e-12));
    const int cross = t.sum(t.mul(t.constant(label), t.log(pred, 1e-12)));
    return t.add(t.constant(ent), t.scale(cross, -1.0));
  }

  // Scalar property readout over an unmasked graph: linear in each node's
  // scalar block, summed over nodes.
  int energy_readout(Tape& t, const std::vector<int>& feats) {
    const std::size_t m0 = static_cast<std::size_t>(scalar_width());
    std::vector<int> terms;
    terms.reserve(feats.size());
    for (int f : feats)
      terms.push_back(t.add(t.matmul(t.param(params.at(readout_w)),
                                     t.slice(f, 0, m0), 1, m0, 1),
                            t.param(params.at(readout_b))));
    return terms.size() == 1 ? terms[0] : t.add(terms);
  }

 private:
  std::vector<std::vector<double>> grid_sh_blocks_;  // per degree, node-major

  PreparedGraph prepare_edges(const Molecule& mol, const NeighborList& nl) const {
    PreparedGraph g;
    g.z = mol.z;
    g.edges = nl.edges;
    g.in_edges.assign(mol.size(), {});
    const int l_back = backbone_l_max();
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
      const Edge& ed = g.edges[e];
      g.in_edges[static_cast<std::size_t>(ed.dst)].push_back(static_cast<int>(e));
      g.edge_sh.push_back(sh_components(Direction(ed.r), l_back));
      g.edge_rbf.push_back(radial_basis(ed.dist));
    }
    return g;
  }

  int radial_scales(Tape& t, const Layer& ly, int rbf_id) {
    const std::size_t nb = static_cast<std::size_t>(cfg.radial_bins);
    int h = t.add(t.matmul(t.param(params.at(ly.rad_w1)), rbf_id, nb, nb, 1),
                  t.param(params.at(ly.rad_b1)));
    h = t.silu(h);
    return t.add(t.matmul(t.param(params.at(ly.rad_w2)), h,
                          msg_plan.paths.size(), nb, 1),
                 t.param(params.at(ly.rad_b2)));
  }

  std::vector<double> init_tp_weights(const TpPlan& plan, std::mt19937_64& rng) {
    std::vector<double> w(plan.weight_count);
    for (const TpPath& p : plan.paths) {
      const std::size_t cu =
          static_cast<std::size_t>(plan.u.blocks[p.u_block].mult);
      const std::size_t cv =
          static_cast<std::size_t>(plan.v.blocks[p.v_block].mult);
      const std::size_t co =
          static_cast<std::size_t>(plan.out.blocks[p.out_block].mult);
      std::normal_distribution<double> g(
          0.0, 1.0 / std::sqrt(static_cast<double>(cu * cv)));
      for (std::size_t i = 0; i < cu * cv * co; ++i) w[p.w_offset + i] = g(rng);
    }
    return w;
  }

  std::size_t add_dense(const std::string& name, std::size_t rows,
                        std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
    std::vector<double> w(rows * cols);
    for (double& v : w) v = g(rng);
    return params.add(name, {rows, cols}, std::move(w));
  }

  std::size_t add_zeros(const std::string& name, std::size_t n) {
    return params.add(name, {n}, std::vector<double>(n, 0.0));
  }

  void build_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t m0 = static_cast<std::size_t>(scalar_width());
    const int m1 = [&] {
      for (const auto& b : cfg.hidden.blocks)
        if (b.degree == 1) return b.mult;
      return 0;
    }();

    embed_atom = EmbedTable::create(params, "embed.atom", cfg.max_z,
                                    static_cast<int>(m0), rng);
    embed_head = EmbedTable::create(params, "embed.head", cfg.max_z,
                                    cfg.head_embed_dim, rng);
    mask_w1 = add_dense("mask_mlp.w1", m0, m0, rng);
    mask_b1 = add_zeros("mask_mlp.b1", m0);
    mask_w2 = add_dense("mask_mlp.w2", m0, m0, rng);
    mask_b2 = add_zeros("mask_mlp.b2", m0);

    prop_range = params.add("prop.range", {2}, {0.0, 1.0}, /*trainable=*/false);
    prop_scalar_w = add_dense("prop.scalar.w", m0,
                              static_cast<std::size_t>(cfg.prop_centers), rng);
    prop_scalar_b = add_zeros("prop.scalar.b", m0);
    {
      std::vector<IrrepsLayout::Block> out{{static_cast<int>(m0), 0}};
      if (m1 > 0) out.push_back({m1, 1});
      prop_vec = LinearLayer::create(params, "prop.vec",
                                     IrrepsLayout::of({{1, 0}, {1, 1}}),
                                     IrrepsLayout::of(std::move(out)), true, rng);
    }
    readout_w = add_dense("readout.w", 1, m0, rng);
    readout_b = add_zeros("readout.b", 1);

    for (int i = 0; i < cfg.layers; ++i) {
      const std::string prefix = "layer" + std::to_string(i);
      Layer ly;
      ly.tp_w = params.add(prefix + ".tp.w", {msg_plan.weight_count},
                           init_tp_weights(msg_plan, rng));
      const std::size_t nb = static_cast<std::size_t>(cfg.radial_bins);
      ly.rad_w1 = add_dense(prefix + ".radial.w1", nb, nb, rng);
      ly.rad_b1 = add_zeros(prefix + ".radial.b1", nb);
      ly.rad_w2 = add_dense(prefix + ".radial.w2", msg_plan.paths.size(), nb, rng);
      ly.rad_b2 = add_zeros(prefix + ".radial.b2", msg_plan.paths.size());
      ly.lin = LinearLayer::create(params, prefix + ".lin", cfg.hidden,
                                   gated_hidden, true, rng);
      ly.norm = NormLayer::create(params, prefix + ".norm", cfg.hidden);
      layers.push_back(std::move(ly));
    }

    head_lin1 = LinearLayer::create(params, "head.lin1", cfg.hidden, head_gated,
                                    true, rng);
    head_tp_w = params.add("head.tp.w", {head_plan.weight_count},
                           init_tp_weights(head_plan, rng));
    head_lin2 = LinearLayer::create(params, "head.lin2", head_out, head_out,
                                    true, rng);
    const std::size_t c = static_cast<std::size_t>(cfg.head_channels);
    radius_w = add_dense("head.radius.w", static_cast<std::size_t>(cfg.binning.bins),
                         c, rng);
    radius_b = add_zeros("head.radius.b", static_cast<std::size_t>(cfg.binning.bins));
    const std::size_t hw = static_cast<std::size_t>(cfg.head_hidden);
    dir_w1 = add_dense("head.dir.w1", hw, c, rng);
    dir_b1 = add_zeros("head.dir.b1", hw);
    {
      std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(hw)));
      std::vector<double> w(hw);
      for (double& v : w) v = g(rng);
      dir_w2 = params.add("head.dir.w2", {hw}, std::move(w));
    }
    dir_b2 = add_zeros("head.dir.b2", 1);
  }

  void cache_grid_blocks() {
    const std::size_t stride = static_cast<std::size_t>(grid.sh_dim());
    for (int l = 0; l <= cfg.head_l_max; ++l) {
      const std::size_t off = static_cast<std::size_t>(l * l);
      const std::size_t width = static_cast<std::size_t>(2 * l + 1);
      std::vector<double> blk(static_cast<std::size_t>(grid.size()) * width);
      for (int s = 0; s < grid.size(); ++s)
        for (std::size_t j = 0; j < width; ++j)
          blk[static_cast<std::size_t>(s) * width + j] =
              grid.sh[static_cast<std::size_t>(s) * stride + off + j];
      grid_sh_blocks_.push_back(std::move(blk));
    }
  }
};

// -- loss wrappers ------------------------------------------------------------

inline EmppLossValue empp_single_loss(Model& m, const MaskedMolecule& mm,
                                      bool with_grad = false,
                                      double grad_scale = 1.0,
                                      std::optional<double> scalar_label = {},
                                      std::optional<Vec3> vector_label = {}) {
  PreparedGraph g = m.prepare(mm);
  g.scalar_label = scalar_label;
  g.vector_label = vector_label;
  Tape t;
  return m.masked_loss(t, g, with_grad, grad_scale);
}

// Mean of the single-mask losses over the given indices; each mask runs on
// its own tape and gradients merge as an ordered sum.
inline EmppLossValue empp_multi_loss(Model& m, const Molecule& mol,
                                     const std::vector<int>& mask_indices,
                                     bool with_grad = false,
                                     double grad_scale = 1.0,
                                     std::optional<double> scalar_label = {},
                                     std::optional<Vec3> vector_label = {}) {
  if (mask_indices.empty())
    throw std::invalid_argument("empp_multi_loss: need at least one mask");
  const double n = static_cast<double>(mask_indices.size());
  EmppLossValue acc;
  for (int idx : mask_indices) {
    const MaskedMolecule mm = make_masked(mol, idx, m.cfg.cutoff);
    const EmppLossValue one = empp_single_loss(m, mm, with_grad, grad_scale / n,
                                               scalar_label, vector_label);
    acc.radius += one.radius;
    acc.direction += one.direction;
    acc.total += one.total;
  }
  acc.radius /= n;
  acc.direction /= n;
  acc.total /= n;
  return acc;
}

// -- prediction ---------------------------------------------------------------

struct MaskPrediction {
  std::vector<RadiusDistribution> radii;          // per neighbor
  std::vector<DirectionDistribution> directions;  // per neighbor
  std::vector<SteerableTensor> coeffs;            // direction-branch coefficients
  PositionEstimate estimate;
};

inline MaskPrediction predict_masked(Model& m, const MaskedMolecule& mm,
                                     std::optional<double> scalar_label = {},
                                     std::optional<Vec3> vector_label = {}) {
  PreparedGraph g = m.prepare(mm);
  g.scalar_label = scalar_label;
  g.vector_label = vector_label;
  Tape t;
  std::vector<int> feats = m.forward_features(t, g);
  Model::HeadShared shared;
  MaskPrediction out;
  for (std::size_t i = 0; i < g.neighbor_nodes.size(); ++i) {
    const int f = feats[static_cast<std::size_t>(g.neighbor_nodes[i])];
    const HeadOutput head = m.head_forward(t, shared, f, g.masked_z);
    RadiusDistribution rd;
    rd.binning = m.cfg.binning;
    rd.p = t.value(head.radius);
    out.radii.push_back(std::move(rd));
    DirectionDistribution dd;
    dd.grid = &m.grid;
    dd.weighted = false;  // softmax mass, not weight-carrying label mass
    dd.p = t.value(head.direction);
    out.directions.push_back(std::move(dd));
    SteerableTensor coeff;
    coeff.layout = m.head_out;
    coeff.values = t.value(head.coeff);
    out.coeffs.push_back(std::move(coeff));
  }
  out.estimate =
      predicted_position(out.radii, out.directions, g.neighbor_positions);
  return out;
}

}  // namespace empp
