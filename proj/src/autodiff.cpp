#include "megt/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "megt/errors.hpp"

namespace megt::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap view(const Tensor& t) {
  return {t.values().data(), static_cast<Eigen::Index>(t.rows()),
          static_cast<Eigen::Index>(t.cols())};
}
ConstMatMap view(std::span<const double> s, std::size_t rows, std::size_t cols) {
  return {s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}
MatMap view(std::span<double> s, std::size_t rows, std::size_t cols) {
  return {s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                   b.shape_string());
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) shape_fail(op, a, b);
}

struct FaultState {
  std::string op;
  double factor = 1.0;
};
FaultState& fault_state() {
  static FaultState state;
  return state;
}

}  // namespace

void set_gradient_fault(std::string op, double factor) {
  fault_state() = FaultState{std::move(op), factor};
}

double gradient_fault(const char* op) {
  const auto& f = fault_state();
  return (!f.op.empty() && f.op == op) ? f.factor : 1.0;
}

// -- Var / Tape ---------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->needs_grad(id_); }

Tape::Tape(bool recording) : recording_(recording) {}

const Tensor& Tape::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.external != nullptr ? *n.external : n.value;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(Tensor& param) {
  Node n;
  n.external = &param;
  n.param = recording_ ? &param : nullptr;
  n.requires_grad = recording_;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (const Var& in : inputs) {
      if (in.tape_ != this) throw ContractError("op inputs recorded on a different tape");
      if (nodes_[in.id_].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  return push(std::move(n));
}

std::span<double> Tape::accum(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return {};
  const std::size_t len = value(id).size();
  if (n.grad.size() != len) n.grad.assign(len, 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss belongs to a different tape");
  const Tensor& lv = value(loss.id_);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: loss must be 1x1, got " + lv.shape_string());
  }
  if (!recording_) throw ContractError("backward: tape was built without recording");
  for (Node& n : nodes_) n.grad.clear();
  auto seed = accum(loss.id_);
  if (seed.empty()) return;  // loss does not depend on any parameter
  seed[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.param != nullptr) {
      auto g = n.param->grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    } else if (n.backward) {
      n.backward(*this, static_cast<std::uint32_t>(i));
    }
  }
}

// -- linear algebra -------------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) shape_fail("matmul", av, bv);
  Tensor out(av.rows(), bv.cols());
  view(out.values(), out.rows(), out.cols()).noalias() = view(av) * view(bv);
  const std::uint32_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("matmul");
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    const auto G = view(t.upstream(self), A.rows(), B.cols());
    if (auto da = t.accum(ia); !da.empty())
      view(da, A.rows(), A.cols()).noalias() += f * (G * view(B).transpose());
    if (auto db = t.accum(ib); !db.empty())
      view(db, B.rows(), B.cols()).noalias() += f * (view(A).transpose() * G);
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) shape_fail("matmul_nt", av, bv);
  Tensor out(av.rows(), bv.rows());
  view(out.values(), out.rows(), out.cols()).noalias() = view(av) * view(bv).transpose();
  const std::uint32_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("matmul_nt");
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    const auto G = view(t.upstream(self), A.rows(), B.rows());
    if (auto da = t.accum(ia); !da.empty())
      view(da, A.rows(), A.cols()).noalias() += f * (G * view(B));
    if (auto db = t.accum(ib); !db.empty())
      view(db, B.rows(), B.cols()).noalias() += f * (G.transpose() * view(A));
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.cols(), av.rows());
  view(out.values(), out.rows(), out.cols()) = view(av).transpose();
  const std::uint32_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("transpose");
    const Tensor& A = t.value(ia);
    if (auto da = t.accum(ia); !da.empty())
      view(da, A.rows(), A.cols()) += f * view(t.upstream(self), A.cols(), A.rows()).transpose();
  });
}

// -- elementwise ------------------------------------------------------------------

Var add(Var a, Var b) {
  require_same("add", a.value(), b.value());
  Tensor out = a.value();
  const auto bv = b.value().values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  const std::uint32_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("add");
    const auto g = t.upstream(self);
    for (std::uint32_t id : {ia, ib}) {
      if (auto d = t.accum(id); !d.empty())
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  const auto bv = b.value().values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
  const std::uint32_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("sub");
    const auto g = t.upstream(self);
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * g[i];
    if (auto d = t.accum(ib); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= f * g[i];
  });
}

Var hadamard(Var a, Var b) {
  require_same("hadamard", a.value(), b.value());
  Tensor out = a.value();
  const auto bv = b.value().values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
  const std::uint32_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("hadamard");
    const auto g = t.upstream(self);
    const auto av = t.value(ia).values();
    const auto bv = t.value(ib).values();
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * g[i] * bv[i];
    if (auto d = t.accum(ib); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * g[i] * av[i];
  });
}

Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) shape_fail("add_row", av, rv);
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv[c];
  const std::uint32_t ia = a.id(), ir = row.id();
  return a.tape().record(std::move(out), {a, row}, [ia, ir](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("add_row");
    const auto g = t.upstream(self);
    const std::size_t cols = t.value(ir).cols();
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * g[i];
    if (auto d = t.accum(ir); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i % cols] += f * g[i];
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& x : out.values()) x *= s;
  const std::uint32_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("scale");
    const auto g = t.upstream(self);
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * s * g[i];
  });
}

Var scale_by(Var a, Var s) {
  const Tensor& sv = s.value();
  if (sv.rows() != 1 || sv.cols() != 1) shape_fail("scale_by", a.value(), sv);
  const double k = sv[0];
  Tensor out = a.value();
  for (double& x : out.values()) x *= k;
  const std::uint32_t ia = a.id(), is = s.id();
  return a.tape().record(std::move(out), {a, s}, [ia, is](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("scale_by");
    const auto g = t.upstream(self);
    const auto av = t.value(ia).values();
    const double k = t.value(is)[0];
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * k * g[i];
    if (auto d = t.accum(is); !d.empty()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      d[0] += f * acc;
    }
  });
}

Var add_identity(Var a) {
  const Tensor& av = a.value();
  if (av.rows() != av.cols()) shape_fail("add_identity", av, av);
  Tensor out = av;
  for (std::size_t i = 0; i < out.rows(); ++i) out(i, i) += 1.0;
  const std::uint32_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("add_identity");
    const auto g = t.upstream(self);
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += f * g[i];
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& x : out.values()) x = x > 0.0 ? x : 0.0;
  const std::uint32_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("relu");
    const auto g = t.upstream(self);
    const auto x = t.value(ia).values();
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) d[i] += f * g[i];
  });
}

// -- normalizations ---------------------------------------------------------------

Var softmax_rows(Var a) {
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& x : row) {
      x = std::exp(x - mx);
      total += x;
    }
    for (double& x : row) x /= total;
  }
  return a.tape().record(std::move(out), {a}, [ia = a.id()](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("softmax_rows");
    auto d = t.accum(ia);
    if (d.empty()) return;
    const Tensor& y = t.value(self);
    const auto g = t.upstream(self);
    const std::size_t cols = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const auto yr = y.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * yr[c];
      for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += f * yr[c] * (g[r * cols + c] - dot);
    }
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), d = xv.cols();
  if (d == 0) throw ShapeError("layer_norm_rows: zero-width rows");
  if (gamma.rows() != 1 || gamma.cols() != d) shape_fail("layer_norm_rows", xv, gamma.value());
  if (beta.rows() != 1 || beta.cols() != d) shape_fail("layer_norm_rows", xv, beta.value());
  const auto gv = gamma.value().values();
  const auto bv = beta.value().values();
  Tensor xhat(m, d);
  std::vector<double> inv_std(m);
  Tensor out(m, d);
  for (std::size_t r = 0; r < m; ++r) {
    const auto row = xv.row(r);
    const double mean = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (row[c] - mean) * inv_std[r];
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  const std::uint32_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                          std::uint32_t self) {
        const double f = gradient_fault("layer_norm_rows");
        const auto g = t.upstream(self);
        const std::size_t m = xhat.rows(), d = xhat.cols();
        if (auto db = t.accum(ib); !db.empty())
          for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += f * g[i];
        if (auto dg = t.accum(ig); !dg.empty())
          for (std::size_t i = 0; i < g.size(); ++i) dg[i % d] += f * g[i] * xhat[i];
        auto dx = t.accum(ix);
        if (dx.empty()) return;
        const auto gam = t.value(ig).values();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < m; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            dxhat[c] = g[r * d + c] * gam[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xhat(r, c);
          }
          mean_d /= static_cast<double>(d);
          mean_dx /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c)
            dx[r * d + c] += f * inv_std[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
        }
      });
}

// -- structural -------------------------------------------------------------------

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_fail("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + off);
    off += pv.cols();
    ids.push_back(p.id());
    widths.push_back(pv.cols());
  }
  return parts[0].tape().record(
      std::move(out), parts, [ids, widths, rows, cols](Tape& t, std::uint32_t self) {
        const double f = gradient_fault("concat_cols");
        const auto g = t.upstream(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (auto d = t.accum(ids[k]); !d.empty())
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < widths[k]; ++c)
                d[r * widths[k] + c] += f * g[r * cols + off + c];
          off += widths[k];
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::vector<double> values;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) {
    if (p.cols() != cols) shape_fail("concat_rows", parts[0].value(), p.value());
    const auto pv = p.value().values();
    values.insert(values.end(), pv.begin(), pv.end());
    ids.push_back(p.id());
    sizes.push_back(pv.size());
  }
  const std::size_t rows = cols == 0 ? 0 : values.size() / cols;
  Tensor out(rows, cols, std::move(values));
  return parts[0].tape().record(std::move(out), parts, [ids, sizes](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("concat_rows");
    const auto g = t.upstream(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (auto d = t.accum(ids[k]); !d.empty())
        for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += f * g[off + i];
      off += sizes[k];
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (begin + count > av.cols())
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " + av.shape_string());
  Tensor out(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r)
    std::copy_n(av.row(r).begin() + begin, count, out.row(r).begin());
  const std::uint32_t ia = a.id();
  const std::size_t cols = av.cols();
  return a.tape().record(std::move(out), {a}, [ia, begin, count, cols](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("slice_cols");
    const auto g = t.upstream(self);
    auto d = t.accum(ia);
    if (d.empty()) return;
    const std::size_t rows = g.size() / std::max<std::size_t>(count, 1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) d[r * cols + begin + c] += f * g[r * count + c];
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (begin + count > av.rows())
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " + av.shape_string());
  const std::size_t cols = av.cols();
  std::vector<double> v(av.values().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                        av.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
  Tensor out(count, cols, std::move(v));
  const std::uint32_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, begin, cols](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("slice_rows");
    const auto g = t.upstream(self);
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < g.size(); ++i) d[begin * cols + i] += f * g[i];
  });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
  const Tensor& av = a.value();
  const std::size_t cols = av.cols();
  Tensor out(index.size(), cols);
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= av.rows())
      throw ShapeError("gather_rows: row " + std::to_string(index[k]) + " out of " +
                       av.shape_string());
    std::copy(av.row(index[k]).begin(), av.row(index[k]).end(), out.row(k).begin());
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  const std::uint32_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, idx, cols](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("gather_rows");
    const auto g = t.upstream(self);
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (std::size_t c = 0; c < cols; ++c) d[idx[k] * cols + c] += f * g[k * cols + c];
  });
}

Var gather_cols(Var a, std::span<const std::size_t> index) {
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out(rows, index.size());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= cols)
      throw ShapeError("gather_cols: column " + std::to_string(index[k]) + " out of " +
                       av.shape_string());
    for (std::size_t r = 0; r < rows; ++r) out(r, k) = av(r, index[k]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  const std::uint32_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, idx, rows, cols](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("gather_cols");
    const auto g = t.upstream(self);
    const std::size_t w = idx.size();
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < w; ++k) d[r * cols + idx[k]] += f * g[r * w + k];
  });
}

Var segment_means(Var a, std::size_t m) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows(), d = av.cols();
  if (m == 0 || m > n)
    throw ShapeError("segment_means: " + std::to_string(m) + " segments over " +
                     av.shape_string());
  const std::size_t base = n / m, extra = n % m;
  Tensor out(m, d);
  std::vector<std::size_t> starts(m + 1, 0);
  for (std::size_t s = 0; s < m; ++s) starts[s + 1] = starts[s] + base + (s < extra ? 1 : 0);
  for (std::size_t s = 0; s < m; ++s) {
    const double inv = 1.0 / static_cast<double>(starts[s + 1] - starts[s]);
    for (std::size_t r = starts[s]; r < starts[s + 1]; ++r)
      for (std::size_t c = 0; c < d; ++c) out(s, c) += av(r, c);
    for (std::size_t c = 0; c < d; ++c) out(s, c) *= inv;
  }
  const std::uint32_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, starts, d](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("segment_means");
    const auto g = t.upstream(self);
    auto da = t.accum(ia);
    if (da.empty()) return;
    for (std::size_t s = 0; s + 1 < starts.size(); ++s) {
      const double inv = 1.0 / static_cast<double>(starts[s + 1] - starts[s]);
      for (std::size_t r = starts[s]; r < starts[s + 1]; ++r)
        for (std::size_t c = 0; c < d; ++c) da[r * d + c] += f * inv * g[s * d + c];
    }
  });
}

Var gcn_normalize(Var a) {
  const Tensor& av = a.value();
  const std::size_t n = av.rows();
  if (av.cols() != n) shape_fail("gcn_normalize", av, av);
  std::vector<double> rs(n);  // D^-1/2
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = av.row(i);
    const double deg = std::accumulate(row.begin(), row.end(), 0.0);
    if (deg <= 0.0) throw ContractError("gcn_normalize: non-positive degree at node " + std::to_string(i));
    rs[i] = 1.0 / std::sqrt(deg);
  }
  Tensor out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = av(i, j) * rs[i] * rs[j];
  const std::uint32_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, rs](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("gcn_normalize");
    auto da = t.accum(ia);
    if (da.empty()) return;
    const Tensor& A = t.value(ia);
    const auto g = t.upstream(self);
    const std::size_t n = A.rows();
    // P_ij = A_ij r_i r_j with r_i = deg_i^-1/2, deg_i = sum_j A_ij.
    // dL/dA_kl = G_kl r_k r_l + c_k, c_k = -r_k^3/2 (sum_j G_kj A_kj r_j + sum_i G_ik A_ik r_i).
    std::vector<double> c(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double w = g[i * n + j] * A(i, j);
        c[i] += w * rs[j];
        c[j] += w * rs[i];
      }
    for (std::size_t k = 0; k < n; ++k) c[k] *= -0.5 * rs[k] * rs[k] * rs[k];
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = 0; l < n; ++l) da[k * n + l] += f * (g[k * n + l] * rs[k] * rs[l] + c[k]);
  });
}

Var pinv_init_scale(Var a) {
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  std::size_t best_col = 0, best_row = 0;
  double col_norm = -1.0, row_norm = -1.0;
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += std::abs(av(i, j));
    if (s > col_norm) col_norm = s, best_col = j;
  }
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::abs(av(i, j));
    if (s > row_norm) row_norm = s, best_row = i;
  }
  if (col_norm == 0.0 && row_norm == 0.0) throw ContractError("pinv_init_scale: zero matrix has no scaling");
  // NaN entries defeat the comparisons above; let them propagate instead of throwing.
  const bool finite = col_norm > 0.0 && row_norm > 0.0;
  const double scale = finite ? 1.0 / (col_norm * row_norm) : std::numeric_limits<double>::quiet_NaN();
  const std::uint32_t ia = a.id();
  return a.tape().record(
      Tensor(1, 1, scale), {a},
      [ia, best_col, best_row, col_norm, row_norm, scale](Tape& t, std::uint32_t self) {
        const double f = gradient_fault("pinv_init_scale");
        auto da = t.accum(ia);
        if (da.empty()) return;
        const Tensor& A = t.value(ia);
        const double g = t.upstream(self)[0] * f;
        const auto sgn = [](double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); };
        for (std::size_t i = 0; i < A.rows(); ++i)
          da[i * A.cols() + best_col] += -g * scale / col_norm * sgn(A(i, best_col));
        for (std::size_t j = 0; j < A.cols(); ++j)
          da[best_row * A.cols() + j] += -g * scale / row_norm * sgn(A(best_row, j));
      });
}

// -- reductions -------------------------------------------------------------------

Var sum(Var a) {
  const auto av = a.value().values();
  const double total = std::accumulate(av.begin(), av.end(), 0.0);
  const std::uint32_t ia = a.id();
  return a.tape().record(Tensor(1, 1, total), {a}, [ia](Tape& t, std::uint32_t self) {
    const double g = t.upstream(self)[0] * gradient_fault("sum");
    if (auto d = t.accum(ia); !d.empty())
      for (double& x : d) x += g;
  });
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  if (av.rows() == 0) throw ShapeError("mean_rows: no rows in " + av.shape_string());
  Tensor out(1, av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out[c] += av(r, c);
  const double inv = 1.0 / static_cast<double>(av.rows());
  for (double& x : out.values()) x *= inv;
  const std::uint32_t ia = a.id();
  const std::size_t cols = av.cols();
  return a.tape().record(std::move(out), {a}, [ia, inv, cols](Tape& t, std::uint32_t self) {
    const double f = gradient_fault("mean_rows");
    const auto g = t.upstream(self);
    if (auto d = t.accum(ia); !d.empty())
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += f * inv * g[i % cols];
  });
}

Var nll_of_probs(Var probs, std::span<const std::size_t> labels) {
  const Tensor& p = probs.value();
  if (labels.size() != p.rows())
    throw ShapeError("nll_of_probs: " + std::to_string(labels.size()) + " labels for " +
                     p.shape_string());
  if (p.rows() == 0) throw ShapeError("nll_of_probs: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= p.cols())
      throw DataError("label " + std::to_string(labels[i]) + " out of range for " +
                      std::to_string(p.cols()) + " classes");
    total -= std::log(p(i, labels[i]));
  }
  const double inv_m = 1.0 / static_cast<double>(labels.size());
  std::vector<std::size_t> y(labels.begin(), labels.end());
  const std::uint32_t ip = probs.id();
  return probs.tape().record(Tensor(1, 1, total * inv_m), {probs}, [ip, y, inv_m](Tape& t, std::uint32_t self) {
    const double g = t.upstream(self)[0] * gradient_fault("nll_of_probs");
    auto d = t.accum(ip);
    if (d.empty()) return;
    const Tensor& p = t.value(ip);
    for (std::size_t i = 0; i < y.size(); ++i) d[i * p.cols() + y[i]] -= g * inv_m / p(i, y[i]);
  });
}

}  // namespace megt::ad
