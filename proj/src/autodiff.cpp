#include "patchlm/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "patchlm/errors.hpp"

namespace patchlm {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap view(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap view(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

void require_same_graph(Var a, Var b) {
  if (a.graph != b.graph || a.graph == nullptr) throw ContractError("vars belong to different graphs");
}

void require_rank2(Var x, const char* op) {
  if (x.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_to_string(x.shape()));
  }
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), std::nullopt, nullptr, false});
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), std::nullopt, nullptr, true});
  return Var{this, nodes_.size() - 1};
}

Var Graph::make_node(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.graph != this) throw ContractError("parent var belongs to a different graph");
    needs = needs || nodes_[p.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), std::nullopt, needs ? std::move(backward) : nullptr, needs});
  return Var{this, nodes_.size() - 1};
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.grad ? *n.grad : Tensor::zeros(n.value.shape());
}

void Graph::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw DimensionError("gradient shape " + shape_to_string(g.shape()) + " does not match value shape " +
                         shape_to_string(n.value.shape()));
  }
  if (n.grad) {
    kernels::add_inplace(*n.grad, g);
  } else {
    n.grad = g;
  }
}

void Graph::accumulate(std::size_t id, Tensor&& g) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return;
  if (g.shape() != n.value.shape()) {
    throw DimensionError("gradient shape " + shape_to_string(g.shape()) + " does not match value shape " +
                         shape_to_string(n.value.shape()));
  }
  if (n.grad) {
    kernels::add_inplace(*n.grad, g);
  } else {
    n.grad = std::move(g);
  }
}

void Graph::backward(Var root) {
  if (root.graph != this) throw ContractError("backward root belongs to a different graph");
  if (value(root).size() != 1) {
    throw ContractError("backward requires a scalar root, got " + shape_to_string(value(root).shape()));
  }
  for (auto& n : nodes_) n.grad.reset();
  accumulate(root.id, Tensor::ones(value(root).shape()));
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad && n.backward) n.backward(*this, id);
  }
}

Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions, double base) {
  if (x.rank() != 2 || x.cols() % 2 != 0) {
    throw ConfigError("rope: head dimension must be even, got shape " + shape_to_string(x.shape()));
  }
  if (positions.size() != x.rows()) throw DimensionError("rope: one position per row required");
  const std::size_t d = x.cols();
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double theta =
          static_cast<double>(positions[r]) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double c = std::cos(theta), s = std::sin(theta);
      const double a = x.at(r, 2 * i), b = x.at(r, 2 * i + 1);
      out.at(r, 2 * i) = a * c - b * s;
      out.at(r, 2 * i + 1) = a * s + b * c;
    }
  }
  return out;
}

namespace ops {

Var add(Var a, Var b) {
  require_same_graph(a, b);
  Var parents[] = {a, b};
  return a.graph->make_node(kernels::add(a.value(), b.value()), parents, [a, b](Graph& g, std::size_t self) {
    g.accumulate(a.id, g.grad_ref(self));
    g.accumulate(b.id, g.grad_ref(self));
  });
}

Var add_bias(Var x, Var bias) {
  require_same_graph(x, bias);
  require_rank2(x, "add_bias");
  if (bias.value().size() != x.value().cols()) {
    throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) + " vs input " + shape_to_string(x.shape()));
  }
  Tensor out = x.value();
  const auto& b = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += b[c];
  Var parents[] = {x, bias};
  return x.graph->make_node(std::move(out), parents, [x, bias](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad_ref(self);
    g.accumulate(x.id, gy);
    if (g.requires_grad(bias)) {
      Tensor gb(g.value(bias).shape());
      for (std::size_t r = 0; r < gy.rows(); ++r)
        for (std::size_t c = 0; c < gy.cols(); ++c) gb[c] += gy.at(r, c);
      g.accumulate(bias.id, std::move(gb));
    }
  });
}

Var scale(Var x, double s) {
  Var parents[] = {x};
  return x.graph->make_node(kernels::scale(x.value(), s), parents, [x, s](Graph& g, std::size_t self) {
    g.accumulate(x.id, kernels::scale(g.grad_ref(self), s));
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  Var parents[] = {x};
  return x.graph->make_node(Tensor::scalar(total), parents, [x](Graph& g, std::size_t self) {
    g.accumulate(x.id, Tensor(g.value(x).shape(), g.grad_ref(self).item()));
  });
}

Var matmul(Var a, Var b) {
  require_same_graph(a, b);
  Var parents[] = {a, b};
  return a.graph->make_node(kernels::matmul(a.value(), b.value()), parents, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad_ref(self);
    if (g.requires_grad(a)) g.accumulate(a.id, kernels::matmul_nt(gy, g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b.id, kernels::matmul_tn(g.value(a), gy));
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_graph(a, b);
  Var parents[] = {a, b};
  return a.graph->make_node(kernels::matmul_nt(a.value(), b.value()), parents, [a, b](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad_ref(self);
    if (g.requires_grad(a)) g.accumulate(a.id, kernels::matmul(gy, g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b.id, kernels::matmul_tn(gy, g.value(a)));
  });
}

namespace {

Tensor masked_softmax_forward(const Tensor& x, const AttentionMask* mask) {
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mx = kNegInf;
    for (std::size_t c = 0; c < n; ++c) {
      const double v = x.at(r, c);
      if (std::isnan(v)) throw NumericError("softmax_rows: NaN in row " + std::to_string(r));
      if (!mask || mask->allows(r, c)) mx = std::max(mx, v);
    }
    if (mx == kNegInf) throw NumericError("softmax_rows: row " + std::to_string(r) + " has no admissible entry");
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double e = (!mask || mask->allows(r, c)) ? std::exp(x.at(r, c) - mx) : 0.0;
      out.at(r, c) = e;
      total += e;
    }
    for (std::size_t c = 0; c < n; ++c) out.at(r, c) /= total;
  }
  return out;
}

Graph::BackwardFn softmax_backward(Var x) {
  return [x](Graph& g, std::size_t self) {
    const Tensor& p = g.value_of(self);
    const Tensor& gy = g.grad_ref(self);
    Tensor gx(p.shape());
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) dot += p.at(r, c) * gy.at(r, c);
      for (std::size_t c = 0; c < p.cols(); ++c) gx.at(r, c) = p.at(r, c) * (gy.at(r, c) - dot);
    }
    g.accumulate(x.id, std::move(gx));
  };
}

}  // namespace

Var softmax_rows(Var x) {
  Var parents[] = {x};
  return x.graph->make_node(masked_softmax_forward(x.value(), nullptr), parents, softmax_backward(x));
}

Var masked_softmax_rows(Var x, const AttentionMask& mask) {
  require_rank2(x, "masked_softmax_rows");
  Var parents[] = {x};
  return x.graph->make_node(masked_softmax_forward(x.value(), &mask), parents, softmax_backward(x));
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_graph(x, gain);
  require_same_graph(x, bias);
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" +
                         shape_to_string(bias.shape()) + " vs input " + shape_to_string(xv.shape()));
  }
  const std::size_t rows = xv.rows();
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  Tensor out(xv.shape());
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xv.at(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xv.at(r, c) - mean) * (xv.at(r, c) - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat.at(r, c) = (xv.at(r, c) - mean) * inv_std[r];
      out.at(r, c) = xhat.at(r, c) * gv[c] + bv[c];
    }
  }
  Var parents[] = {x, gain, bias};
  return x.graph->make_node(
      std::move(out), parents,
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
        const Tensor& gy = g.grad_ref(self);
        const auto& gv = g.value(gain);
        const std::size_t d = gy.cols();
        if (g.requires_grad(gain) || g.requires_grad(bias)) {
          Tensor gg(gv.shape()), gb(gv.shape());
          for (std::size_t r = 0; r < gy.rows(); ++r)
            for (std::size_t c = 0; c < d; ++c) {
              gg[c] += gy.at(r, c) * xhat.at(r, c);
              gb[c] += gy.at(r, c);
            }
          g.accumulate(gain.id, std::move(gg));
          g.accumulate(bias.id, std::move(gb));
        }
        if (g.requires_grad(x)) {
          Tensor gx(gy.shape());
          for (std::size_t r = 0; r < gy.rows(); ++r) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = gy.at(r, c) * gv[c];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhat.at(r, c);
            }
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_xhat /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = gy.at(r, c) * gv[c];
              gx.at(r, c) = inv_std[r] * (dxh - mean_dxhat - xhat.at(r, c) * mean_dxhat_xhat);
            }
          }
          g.accumulate(x.id, std::move(gx));
        }
      });
}

Var relu_squared(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v * v : 0.0;
  Var parents[] = {x};
  return x.graph->make_node(std::move(out), parents, [x](Graph& g, std::size_t self) {
    const Tensor& xv = g.value(x);
    Tensor gx = g.grad_ref(self);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= xv[i] > 0.0 ? 2.0 * xv[i] : 0.0;
    g.accumulate(x.id, std::move(gx));
  });
}

Var rope(Var x, std::span<const std::size_t> positions, double base) {
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  Tensor out = rope_apply(x.value(), pos, base);
  Var parents[] = {x};
  return x.graph->make_node(std::move(out), parents, [x, pos = std::move(pos), base](Graph& g, std::size_t self) {
    // The rotation is orthogonal, so the adjoint is the rotation by -theta.
    const Tensor& gy = g.grad_ref(self);
    const std::size_t d = gy.cols();
    Tensor gx(gy.shape());
    for (std::size_t r = 0; r < gy.rows(); ++r) {
      for (std::size_t i = 0; i < d / 2; ++i) {
        const double theta =
            static_cast<double>(pos[r]) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = gy.at(r, 2 * i), b = gy.at(r, 2 * i + 1);
        gx.at(r, 2 * i) = a * c + b * s;
        gx.at(r, 2 * i + 1) = -a * s + b * c;
      }
    }
    g.accumulate(x.id, std::move(gx));
  });
}

Var gather_rows(Var table, std::span<const std::size_t> rows) {
  require_rank2(table, "gather_rows");
  const Tensor& t = table.value();
  if (rows.empty()) throw ContractError("gather_rows: empty row list");
  Tensor out({rows.size(), t.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.rows()) {
      throw ContractError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                          shape_to_string(t.shape()));
    }
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * t.cols()), t.cols(),
                out.data().begin() + static_cast<std::ptrdiff_t>(i * t.cols()));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Var parents[] = {table};
  return table.graph->make_node(std::move(out), parents, [table, idx = std::move(idx)](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad_ref(self);
    Tensor gt(g.value(table).shape());
    const std::size_t d = gy.cols();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gt.at(idx[i], c) += gy.at(i, c);
    g.accumulate(table.id, std::move(gt));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.value().cols() != cols) throw DimensionError("concat_rows: column mismatch");
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].graph->make_node(Tensor({rows, cols}, std::move(data)), parts, [ps](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad_ref(self);
    std::size_t offset = 0;
    for (const Var& p : ps) {
      const std::size_t n = g.value(p).size();
      if (g.requires_grad(p)) {
        std::vector<double> slice(gy.data().begin() + static_cast<std::ptrdiff_t>(offset),
                                  gy.data().begin() + static_cast<std::ptrdiff_t>(offset + n));
        g.accumulate(p.id, Tensor(g.value(p).shape(), std::move(slice)));
      }
      offset += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.value().rows() != rows) throw DimensionError("concat_cols: row mismatch");
    cols += p.value().cols();
  }
  Tensor out({rows, cols});
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out.at(r, c0 + c) = v.at(r, c);
    c0 += v.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].graph->make_node(std::move(out), parts, [ps](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad_ref(self);
    std::size_t c0 = 0;
    for (const Var& p : ps) {
      const std::size_t w = g.value(p).cols();
      if (g.requires_grad(p)) {
        Tensor gp({gy.rows(), w});
        for (std::size_t r = 0; r < gy.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gp.at(r, c) = gy.at(r, c0 + c);
        g.accumulate(p.id, std::move(gp));
      }
      c0 += w;
    }
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_cols");
  const Tensor& v = x.value();
  if (count == 0 || start + count > v.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for " + shape_to_string(v.shape()));
  }
  Tensor out({v.rows(), count});
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out.at(r, c) = v.at(r, start + c);
  Var parents[] = {x};
  return x.graph->make_node(std::move(out), parents, [x, start, count](Graph& g, std::size_t self) {
    const Tensor& gy = g.grad_ref(self);
    Tensor gx(g.value(x).shape());
    for (std::size_t r = 0; r < gy.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) gx.at(r, start + c) = gy.at(r, c);
    g.accumulate(x.id, std::move(gx));
  });
}

namespace {

// Tiled online-softmax attention. Only the output is stored; backward
// recomputes probabilities one query tile at a time.
Tensor blocked_attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                                 double scale, std::size_t block) {
  const std::size_t n = q.rows(), m = k.rows(), dv = v.cols();
  Tensor out({n, dv});
  ConstMap Q = view(q), K = view(k), V = view(v);
  MutMap O = view(out);
  for (std::size_t i0 = 0; i0 < n; i0 += block) {
    const std::size_t bi = std::min(block, n - i0);
    Eigen::VectorXd row_max = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(bi), kNegInf);
    Eigen::VectorXd row_sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bi));
    RowMatrix acc = RowMatrix::Zero(static_cast<Eigen::Index>(bi), static_cast<Eigen::Index>(dv));
    for (std::size_t j0 = 0; j0 < m; j0 += block) {
      if (mask.causal && j0 > i0 + bi - 1) break;
      if (mask.valid_length != 0 && j0 >= mask.valid_length) break;
      const std::size_t bj = std::min(block, m - j0);
      RowMatrix s = (Q.middleRows(static_cast<Eigen::Index>(i0), static_cast<Eigen::Index>(bi)) *
                     K.middleRows(static_cast<Eigen::Index>(j0), static_cast<Eigen::Index>(bj)).transpose()) *
                    scale;
      for (std::size_t r = 0; r < bi; ++r) {
        double tile_max = kNegInf;
        for (std::size_t c = 0; c < bj; ++c) {
          if (!mask.allows(i0 + r, j0 + c)) {
            s(r, c) = kNegInf;
          } else {
            tile_max = std::max(tile_max, s(r, c));
          }
        }
        const double new_max = std::max(row_max[r], tile_max);
        if (new_max == kNegInf) {
          s.row(r).setZero();
          continue;
        }
        const double correction = std::exp(row_max[r] - new_max);
        double tile_sum = 0.0;
        for (std::size_t c = 0; c < bj; ++c) {
          s(r, c) = s(r, c) == kNegInf ? 0.0 : std::exp(s(r, c) - new_max);
          tile_sum += s(r, c);
        }
        row_sum[r] = row_sum[r] * correction + tile_sum;
        acc.row(r) *= correction;
        row_max[r] = new_max;
      }
      acc.noalias() += s * V.middleRows(static_cast<Eigen::Index>(j0), static_cast<Eigen::Index>(bj));
    }
    for (std::size_t r = 0; r < bi; ++r) {
      if (row_sum[r] == 0.0) throw NumericError("attention: query " + std::to_string(i0 + r) + " has no visible key");
      O.row(static_cast<Eigen::Index>(i0 + r)) = acc.row(r) / row_sum[r];
    }
  }
  return out;
}

Var blocked_attention(Var q, Var k, Var v, const AttentionMask& mask, double scale, std::size_t block) {
  Tensor out = blocked_attention_forward(q.value(), k.value(), v.value(), mask, scale, block);
  Var parents[] = {q, k, v};
  return q.graph->make_node(std::move(out), parents, [q, k, v, mask, scale, block](Graph& g, std::size_t self) {
    const Tensor& qt = g.value(q);
    const Tensor& kt = g.value(k);
    const Tensor& vt = g.value(v);
    const Tensor& ot = g.value_of(self);
    const Tensor& got = g.grad_ref(self);
    const std::size_t n = qt.rows(), m = kt.rows();
    ConstMap Q = view(qt), K = view(kt), V = view(vt), O = view(ot), dO = view(got);
    Tensor gq(qt.shape()), gk(kt.shape()), gv(vt.shape());
    MutMap dQ = view(gq), dK = view(gk), dV = view(gv);
    for (std::size_t i0 = 0; i0 < n; i0 += block) {
      const auto bi = static_cast<Eigen::Index>(std::min(block, n - i0));
      const auto rows = static_cast<Eigen::Index>(i0);
      RowMatrix p = (Q.middleRows(rows, bi) * K.transpose()) * scale;
      for (Eigen::Index r = 0; r < bi; ++r) {
        double mx = kNegInf;
        for (std::size_t c = 0; c < m; ++c)
          if (mask.allows(i0 + static_cast<std::size_t>(r), c)) mx = std::max(mx, p(r, static_cast<Eigen::Index>(c)));
        double total = 0.0;
        for (std::size_t c = 0; c < m; ++c) {
          auto& e = p(r, static_cast<Eigen::Index>(c));
          e = mask.allows(i0 + static_cast<std::size_t>(r), c) ? std::exp(e - mx) : 0.0;
          total += e;
        }
        p.row(r) /= total;
      }
      const RowMatrix dp = dO.middleRows(rows, bi) * V.transpose();
      const Eigen::VectorXd delta = (dO.middleRows(rows, bi).array() * O.middleRows(rows, bi).array()).rowwise().sum();
      RowMatrix ds = p.array() * (dp.colwise() - delta).array();
      ds *= scale;
      dQ.middleRows(rows, bi).noalias() += ds * K;
      dK.noalias() += ds.transpose() * Q.middleRows(rows, bi);
      dV.noalias() += p.transpose() * dO.middleRows(rows, bi);
    }
    g.accumulate(q.id, std::move(gq));
    g.accumulate(k.id, std::move(gk));
    g.accumulate(v.id, std::move(gv));
  });
}

}  // namespace

Var attention(Var q, Var k, Var v, const AttentionMask& mask, AttentionKernel kernel, std::size_t block) {
  require_same_graph(q, k);
  require_same_graph(q, v);
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  if (q.value().cols() != k.value().cols() || k.value().rows() != v.value().rows()) {
    throw DimensionError("attention: q " + shape_to_string(q.shape()) + ", k " + shape_to_string(k.shape()) +
                         ", v " + shape_to_string(v.shape()));
  }
  if (block == 0) throw ContractError("attention: block size must be positive");
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  if (kernel == AttentionKernel::kBlocked) return blocked_attention(q, k, v, mask, scale_factor, block);
  Var scores = scale(matmul_nt(q, k), scale_factor);
  return matmul(masked_softmax_rows(scores, mask), v);
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const double> weights) {
  require_rank2(logits, "cross_entropy");
  const Tensor& x = logits.value();
  if (targets.size() != x.rows() || weights.size() != x.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(weights.size()) + " weights for logits " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.cols();
  Tensor probs(x.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (targets[r] >= n) throw ContractError("cross_entropy: target id " + std::to_string(targets[r]) + " >= vocab");
    double mx = x.at(r, 0);
    for (std::size_t c = 0; c < n; ++c) {
      if (std::isnan(x.at(r, c))) throw NumericError("cross_entropy: NaN logit in row " + std::to_string(r));
      mx = std::max(mx, x.at(r, c));
    }
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) total += std::exp(x.at(r, c) - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < n; ++c) probs.at(r, c) = std::exp(x.at(r, c) - lse);
    if (weights[r] != 0.0) loss += weights[r] * (lse - x.at(r, targets[r]));
  }
  std::vector<std::size_t> t(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  Var parents[] = {logits};
  return logits.graph->make_node(
      Tensor::scalar(loss), parents,
      [logits, probs = std::move(probs), t = std::move(t), w = std::move(w)](Graph& g, std::size_t self) {
        const double gs = g.grad_ref(self).item();
        Tensor gx(probs.shape());
        for (std::size_t r = 0; r < probs.rows(); ++r) {
          if (w[r] == 0.0) continue;
          for (std::size_t c = 0; c < probs.cols(); ++c) gx.at(r, c) = gs * w[r] * probs.at(r, c);
          gx.at(r, t[r]) -= gs * w[r];
        }
        g.accumulate(logits.id, std::move(gx));
      });
}

}  // namespace ops
}  // namespace patchlm
