#pragma once

// Minimal reverse-mode tape: eager forward evaluation, append-only record,
// reverse-order adjoint sweep. The primitive set is exactly what the model
// needs; shapes must match exactly (no broadcasting beyond scalar-times-tensor
// and explicit gather/scatter index plumbing).

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "empp/so3.hpp"

namespace empp {

struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool trainable = true;

  std::size_t size() const { return values.size(); }
};

class ParameterStore {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> shape,
                  std::vector<double> init, bool trainable = true) {
    if (index_.count(name))
      throw std::invalid_argument("ParameterStore: duplicate name " + name);
    std::size_t expect = 1;
    for (std::size_t d : shape) expect *= d;
    if (expect != init.size())
      throw std::invalid_argument("ParameterStore: shape does not match data for " +
                                  name);
    Parameter p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.values = std::move(init);
    p.grad.assign(p.values.size(), 0.0);
    p.trainable = trainable;
    index_[p.name] = params_.size();
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Parameter& at(std::size_t i) { return params_.at(i); }
  const Parameter& at(std::size_t i) const { return params_.at(i); }
  std::size_t count() const { return params_.size(); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::out_of_range("ParameterStore: no parameter named " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  void zero_grad() {
    for (Parameter& p : params_) p.grad.assign(p.grad.size(), 0.0);
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape {
  enum class Op {
    kConst,
    kParam,
    kAdd,
    kScale,
    kScaleBy,
    kMul,
    kMatmul,
    kCg,
    kConcat,
    kSlice,
    kExp,
    kLog,
    kSoftmax,
    kSum,
    kMean,
    kGather,
    kScatterAdd,
    kSilu,
    kSigmoid,
    kAbs
  };

  struct Node {
    Op op;
    std::vector<int> in;
    std::vector<double> val;
    bool needs_grad = false;
    double c0 = 0.0;  // scale factor or log floor
    std::size_t m = 0, k = 0, n = 0;  // matmul dims; slice offset/len; row_len
    bool ta = false, tb = false;
    const TpPlan* plan = nullptr;
    Parameter* param = nullptr;
    std::vector<int> rows;
  };

 public:
  int constant(std::vector<double> v) {
    Node nd;
    nd.op = Op::kConst;
    nd.val = std::move(v);
    return push(std::move(nd));
  }
  int constant(double v) { return constant(std::vector<double>{v}); }

  // Snapshots the parameter's current values; backward accumulates into grad.
  // Repeated calls for the same parameter reuse one node, so layers applied
  // many times per tape share a single copy of their weights.
  int param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    Node nd;
    nd.op = Op::kParam;
    nd.val = p.values;
    nd.param = &p;
    nd.needs_grad = true;
    const int id = push(std::move(nd));
    param_nodes_[&p] = id;
    return id;
  }

  int add(int a, int b) { return add(std::vector<int>{a, b}); }

  int add(const std::vector<int>& xs) {
    if (xs.empty()) throw std::invalid_argument("add: needs at least one input");
    const std::size_t sz = val(xs[0]).size();
    Node nd;
    nd.op = Op::kAdd;
    nd.val.assign(sz, 0.0);
    for (int x : xs) {
      const std::vector<double>& v = val(x);
      if (v.size() != sz) throw std::invalid_argument("add: size mismatch");
      for (std::size_t i = 0; i < sz; ++i) nd.val[i] += v[i];
    }
    nd.in = xs;
    return push(std::move(nd));
  }

  int scale(int x, double c) {
    Node nd;
    nd.op = Op::kScale;
    nd.c0 = c;
    nd.in = {x};
    nd.val = val(x);
    for (double& v : nd.val) v *= c;
    return push(std::move(nd));
  }

  // scalar (size-1 node) times tensor
  int scale_by(int x, int scalar) {
    if (val(scalar).size() != 1)
      throw std::invalid_argument("scale_by: scalar input must have size 1");
    Node nd;
    nd.op = Op::kScaleBy;
    nd.in = {x, scalar};
    const double s = val(scalar)[0];
    nd.val = val(x);
    for (double& v : nd.val) v *= s;
    return push(std::move(nd));
  }

  int mul(int a, int b) {
    const std::vector<double>& va = val(a);
    const std::vector<double>& vb = val(b);
    if (va.size() != vb.size()) throw std::invalid_argument("mul: size mismatch");
    Node nd;
    nd.op = Op::kMul;
    nd.in = {a, b};
    nd.val.resize(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) nd.val[i] = va[i] * vb[i];
    return push(std::move(nd));
  }

  // C (m x n) = A (m x k) * B (k x n); trans flags reinterpret the stored
  // operand as its transpose. Both flags at once are unsupported.
  int matmul(int a, int b, std::size_t m, std::size_t k, std::size_t n,
             bool trans_a = false, bool trans_b = false) {
    if (trans_a && trans_b)
      throw std::invalid_argument("matmul: double transpose is not supported");
    if (val(a).size() != m * k || val(b).size() != k * n)
      throw std::invalid_argument("matmul: operand sizes do not match dims");
    Node nd;
    nd.op = Op::kMatmul;
    nd.in = {a, b};
    nd.m = m;
    nd.k = k;
    nd.n = n;
    nd.ta = trans_a;
    nd.tb = trans_b;
    nd.val.assign(m * n, 0.0);
    detail::matmul(val(a).data(), val(b).data(), nd.val.data(), m, k, n, trans_a,
                   trans_b);
    return push(std::move(nd));
  }

  // Weighted CG contraction; w/scales may be -1 for all-ones/no scaling.
  // The plan must outlive the tape.
  int cg_contract(const TpPlan& plan, int u, int v, int w = -1, int scales = -1) {
    if (val(u).size() != static_cast<std::size_t>(plan.u.dim()) ||
        val(v).size() != static_cast<std::size_t>(plan.v.dim()))
      throw std::invalid_argument("cg_contract: input sizes do not match the plan");
    if (w >= 0 && val(w).size() != plan.weight_count)
      throw std::invalid_argument("cg_contract: weight size mismatch");
    if (scales >= 0 && val(scales).size() != plan.paths.size())
      throw std::invalid_argument("cg_contract: path scale size mismatch");
    Node nd;
    nd.op = Op::kCg;
    nd.plan = &plan;
    nd.in = {u, v, w, scales};
    nd.val.assign(static_cast<std::size_t>(plan.out.dim()), 0.0);
    ensure_scratch(plan.scratch_size);
    detail::tp_forward(plan, val(u).data(), val(v).data(),
                       w >= 0 ? val(w).data() : nullptr,
                       scales >= 0 ? val(scales).data() : nullptr, nd.val.data(),
                       scratch_.data());
    return push(std::move(nd));
  }

  int concat(const std::vector<int>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat: needs inputs");
    Node nd;
    nd.op = Op::kConcat;
    nd.in = xs;
    std::size_t total = 0;
    for (int x : xs) total += val(x).size();
    nd.val.reserve(total);
    for (int x : xs) {
      const std::vector<double>& v = val(x);
      nd.val.insert(nd.val.end(), v.begin(), v.end());
    }
    return push(std::move(nd));
  }

  int slice(int x, std::size_t offset, std::size_t len) {
    const std::vector<double>& v = val(x);
    if (offset + len > v.size()) throw std::invalid_argument("slice: out of range");
    Node nd;
    nd.op = Op::kSlice;
    nd.in = {x};
    nd.m = offset;
    nd.n = len;
    nd.val.assign(v.begin() + offset, v.begin() + offset + len);
    return push(std::move(nd));
  }

  int exp(int x) {
    Node nd;
    nd.op = Op::kExp;
    nd.in = {x};
    nd.val = val(x);
    for (double& v : nd.val) v = std::exp(v);
    return push(std::move(nd));
  }

  // floor > 0 clamps inputs below it (with zero gradient there); without a
  // floor the input must be strictly positive.
  int log(int x, double floor = 0.0) {
    Node nd;
    nd.op = Op::kLog;
    nd.in = {x};
    nd.c0 = floor;
    nd.val = val(x);
    for (double& v : nd.val) {
      if (floor > 0.0) v = std::max(v, floor);
      if (!(v > 0.0)) throw std::invalid_argument("log: non-positive input");
      v = std::log(v);
    }
    return push(std::move(nd));
  }

  int softmax(int x) {
    const std::vector<double>& v = val(x);
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    Node nd;
    nd.op = Op::kSoftmax;
    nd.in = {x};
    nd.val.resize(v.size());
    double mx = v[0];
    for (double e : v) mx = std::max(mx, e);
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      nd.val[i] = std::exp(v[i] - mx);
      sum += nd.val[i];
    }
    const double inv = 1.0 / sum;
    for (double& e : nd.val) e *= inv;
    return push(std::move(nd));
  }

  int sum(int x) {
    Node nd;
    nd.op = Op::kSum;
    nd.in = {x};
    double acc = 0.0;
    for (double v : val(x)) acc += v;
    nd.val = {acc};
    return push(std::move(nd));
  }

  int mean(int x) {
    Node nd;
    nd.op = Op::kMean;
    nd.in = {x};
    double acc = 0.0;
    for (double v : val(x)) acc += v;
    nd.val = {acc / static_cast<double>(val(x).size())};
    return push(std::move(nd));
  }

  // Treats x as rows of row_len; output stacks rows[i] in order. Repeated
  // indices implement row broadcasting; the adjoint scatter-adds.
  int gather(int x, std::size_t row_len, std::vector<int> rows) {
    const std::vector<double>& v = val(x);
    if (row_len == 0 || v.size() % row_len != 0)
      throw std::invalid_argument("gather: row length does not divide input");
    const std::size_t nrows = v.size() / row_len;
    for (int r : rows)
      if (r < 0 || static_cast<std::size_t>(r) >= nrows)
        throw std::invalid_argument("gather: row index out of range");
    Node nd;
    nd.op = Op::kGather;
    nd.in = {x};
    nd.n = row_len;
    nd.val.resize(rows.size() * row_len);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < row_len; ++j)
        nd.val[i * row_len + j] = v[static_cast<std::size_t>(rows[i]) * row_len + j];
    nd.rows = std::move(rows);
    return push(std::move(nd));
  }

  int scatter_add(int x, std::size_t row_len, std::vector<int> rows,
                  std::size_t out_rows) {
    const std::vector<double>& v = val(x);
    if (row_len == 0 || v.size() != rows.size() * row_len)
      throw std::invalid_argument("scatter_add: input is not rows.size() rows");
    for (int r : rows)
      if (r < 0 || static_cast<std::size_t>(r) >= out_rows)
        throw std::invalid_argument("scatter_add: row index out of range");
    Node nd;
    nd.op = Op::kScatterAdd;
    nd.in = {x};
    nd.n = row_len;
    nd.val.assign(out_rows * row_len, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < row_len; ++j)
        nd.val[static_cast<std::size_t>(rows[i]) * row_len + j] += v[i * row_len + j];
    nd.rows = std::move(rows);
    return push(std::move(nd));
  }

  int silu(int x) {
    Node nd;
    nd.op = Op::kSilu;
    nd.in = {x};
    nd.val = val(x);
    for (double& v : nd.val) v = v / (1.0 + std::exp(-v));
    return push(std::move(nd));
  }

  int sigmoid(int x) {
    Node nd;
    nd.op = Op::kSigmoid;
    nd.in = {x};
    nd.val = val(x);
    for (double& v : nd.val) v = 1.0 / (1.0 + std::exp(-v));
    return push(std::move(nd));
  }

  int abs(int x) {
    Node nd;
    nd.op = Op::kAbs;
    nd.in = {x};
    nd.val = val(x);
    for (double& v : nd.val) v = std::abs(v);
    return push(std::move(nd));
  }

  const std::vector<double>& value(int id) const { return val(id); }
  std::size_t node_count() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss; gradients accumulate into parameters.
  // seed scales the loss adjoint (used for mean-of-batch without extra nodes).
  void backward(int loss, double seed = 1.0) {
    if (val(loss).size() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    std::vector<std::vector<double>> adj(nodes_.size());
    adj[static_cast<std::size_t>(loss)] = {seed};
    for (std::size_t idx = static_cast<std::size_t>(loss) + 1; idx-- > 0;) {
      Node& nd = nodes_[idx];
      if (!nd.needs_grad || adj[idx].empty()) continue;
      const std::vector<double>& d = adj[idx];
      switch (nd.op) {
        case Op::kConst:
          break;
        case Op::kParam:
          for (std::size_t i = 0; i < d.size(); ++i) nd.param->grad[i] += d[i];
          break;
        case Op::kAdd:
          for (int x : nd.in)
            if (wants(x)) {
              std::vector<double>& a = touch(adj, x);
              for (std::size_t i = 0; i < d.size(); ++i) a[i] += d[i];
            }
          break;
        case Op::kScale:
          if (wants(nd.in[0])) {
            std::vector<double>& a = touch(adj, nd.in[0]);
            for (std::size_t i = 0; i < d.size(); ++i) a[i] += nd.c0 * d[i];
          }
          break;
        case Op::kScaleBy: {
          const double s = val(nd.in[1])[0];
          if (wants(nd.in[0])) {
            std::vector<double>& a = touch(adj, nd.in[0]);
            for (std::size_t i = 0; i < d.size(); ++i) a[i] += s * d[i];
          }
          if (wants(nd.in[1])) {
            const std::vector<double>& x = val(nd.in[0]);
            double acc = 0.0;
            for (std::size_t i = 0; i < d.size(); ++i) acc += x[i] * d[i];
            touch(adj, nd.in[1])[0] += acc;
          }
          break;
        }
        case Op::kMul: {
          const std::vector<double>& a = val(nd.in[0]);
          const std::vector<double>& b = val(nd.in[1]);
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            for (std::size_t i = 0; i < d.size(); ++i) g[i] += b[i] * d[i];
          }
          if (wants(nd.in[1])) {
            std::vector<double>& g = touch(adj, nd.in[1]);
            for (std::size_t i = 0; i < d.size(); ++i) g[i] += a[i] * d[i];
          }
          break;
        }
        case Op::kMatmul: {
          const double* A = val(nd.in[0]).data();
          const double* B = val(nd.in[1]).data();
          const std::size_t m = nd.m, k = nd.k, n = nd.n;
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            if (!nd.ta) {
              // dA += dC * B^T (respecting B's storage)
              detail::matmul(d.data(), B, g.data(), m, n, k, false, !nd.tb, true);
            } else {
              // A stored (k x m): dA_stored += B * dC^T
              detail::matmul(B, d.data(), g.data(), k, n, m, nd.tb, true, true);
            }
          }
          if (wants(nd.in[1])) {
            std::vector<double>& g = touch(adj, nd.in[1]);
            if (!nd.tb) {
              // dB += A^T * dC (respecting A's storage)
              detail::matmul(A, d.data(), g.data(), k, m, n, !nd.ta, false, true);
            } else {
              // B stored (n x k): dB_stored += dC^T * A
              detail::matmul(d.data(), A, g.data(), n, m, k, true, nd.ta, true);
            }
          }
          break;
        }
        case Op::kCg: {
          const TpPlan& plan = *nd.plan;
          ensure_scratch(plan.scratch_size);
          const int u = nd.in[0], v = nd.in[1], w = nd.in[2], s = nd.in[3];
          detail::tp_backward(
              plan, val(u).data(), val(v).data(), w >= 0 ? val(w).data() : nullptr,
              s >= 0 ? val(s).data() : nullptr, d.data(),
              wants(u) ? touch(adj, u).data() : nullptr,
              wants(v) ? touch(adj, v).data() : nullptr,
              (w >= 0 && wants(w)) ? touch(adj, w).data() : nullptr,
              (s >= 0 && wants(s)) ? touch(adj, s).data() : nullptr, scratch_.data(),
              scratch2_.data());
          break;
        }
        case Op::kConcat: {
          std::size_t off = 0;
          for (int x : nd.in) {
            const std::size_t sz = val(x).size();
            if (wants(x)) {
              std::vector<double>& g = touch(adj, x);
              for (std::size_t i = 0; i < sz; ++i) g[i] += d[off + i];
            }
            off += sz;
          }
          break;
        }
        case Op::kSlice:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            for (std::size_t i = 0; i < nd.n; ++i) g[nd.m + i] += d[i];
          }
          break;
        case Op::kExp:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            for (std::size_t i = 0; i < d.size(); ++i) g[i] += nd.val[i] * d[i];
          }
          break;
        case Op::kLog:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            const std::vector<double>& x = val(nd.in[0]);
            for (std::size_t i = 0; i < d.size(); ++i) {
              if (nd.c0 > 0.0 && x[i] < nd.c0) continue;  // clamped: zero grad
              g[i] += d[i] / x[i];
            }
          }
          break;
        case Op::kSoftmax:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            double dot = 0.0;
            for (std::size_t i = 0; i < d.size(); ++i) dot += d[i] * nd.val[i];
            for (std::size_t i = 0; i < d.size(); ++i)
              g[i] += nd.val[i] * (d[i] - dot);
          }
          break;
        case Op::kSum:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            for (double& e : g) e += d[0];
          }
          break;
        case Op::kMean:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            const double f = d[0] / static_cast<double>(g.size());
            for (double& e : g) e += f;
          }
          break;
        case Op::kGather:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            for (std::size_t i = 0; i < nd.rows.size(); ++i)
              for (std::size_t j = 0; j < nd.n; ++j)
                g[static_cast<std::size_t>(nd.rows[i]) * nd.n + j] +=
                    d[i * nd.n + j];
          }
          break;
        case Op::kScatterAdd:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            for (std::size_t i = 0; i < nd.rows.size(); ++i)
              for (std::size_t j = 0; j < nd.n; ++j)
                g[i * nd.n + j] += d[static_cast<std::size_t>(nd.rows[i]) * nd.n + j];
          }
          break;
        case Op::kSilu:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            const std::vector<double>& x = val(nd.in[0]);
            for (std::size_t i = 0; i < d.size(); ++i) {
              const double sg = 1.0 / (1.0 + std::exp(-x[i]));
              g[i] += d[i] * sg * (1.0 + x[i] * (1.0 - sg));
            }
          }
          break;
        case Op::kSigmoid:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            for (std::size_t i = 0; i < d.size(); ++i)
              g[i] += d[i] * nd.val[i] * (1.0 - nd.val[i]);
          }
          break;
        case Op::kAbs:
          if (wants(nd.in[0])) {
            std::vector<double>& g = touch(adj, nd.in[0]);
            const std::vector<double>& x = val(nd.in[0]);
            for (std::size_t i = 0; i < d.size(); ++i) {
              if (x[i] > 0.0)
                g[i] += d[i];
              else if (x[i] < 0.0)
                g[i] -= d[i];
            }
          }
          break;
      }
      // Free the adjoint buffer eagerly; it is never read again.
      adj[idx].clear();
      adj[idx].shrink_to_fit();
    }
  }

 private:
  int push(Node nd) {
    if (!nd.needs_grad)
      for (int x : nd.in)
        if (x >= 0 && nodes_[static_cast<std::size_t>(x)].needs_grad) {
          nd.needs_grad = true;
          break;
        }
    nodes_.push_back(std::move(nd));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const std::vector<double>& val(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw std::invalid_argument("Tape: invalid node id");
    return nodes_[static_cast<std::size_t>(id)].val;
  }

  bool wants(int id) const {
    return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad;
  }

  std::vector<double>& touch(std::vector<std::vector<double>>& adj, int id) {
    std::vector<double>& a = adj[static_cast<std::size_t>(id)];
    if (a.empty()) a.assign(val(id).size(), 0.0);
    return a;
  }

  void ensure_scratch(std::size_t n) {
    if (scratch_.size() < n) scratch_.resize(n);
    if (scratch2_.size() < n) scratch2_.resize(n);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  std::vector<double> scratch_, scratch2_;
};

struct GradientCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares backward() gradients against central differences, componentwise
// over every trainable parameter. f builds a fresh tape from the store's
// current values; it must run backward() when need_grad is set.
inline GradientCheckResult check_gradient(
    ParameterStore& params, const std::function<double(ParameterStore&, bool)>& f,
    double h_base = 1e-4) {
  params.zero_grad();
  f(params, true);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.count());
  for (std::size_t p = 0; p < params.count(); ++p) analytic.push_back(params.at(p).grad);

  GradientCheckResult r;
  for (std::size_t p = 0; p < params.count(); ++p) {
    Parameter& par = params.at(p);
    if (!par.trainable) continue;
    for (std::size_t i = 0; i < par.size(); ++i) {
      const double x0 = par.values[i];
      const double h = h_base * (1.0 + std::abs(x0));
      par.values[i] = x0 + h;
      const double fp = f(params, false);
      par.values[i] = x0 - h;
      const double fm = f(params, false);
      par.values[i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = analytic[p][i];
      const double rel =
          std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst_param = par.name;
        r.worst_index = i;
        r.analytic = ana;
        r.numeric = num;
      }
    }
  }
  return r;
}

}  // namespace empp
