#include "vib/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "vib/error.hpp"

namespace vib {

const Tensor& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

Tensor* GradSink::grad(std::uint32_t id) {
  if (!tape_.requires_grad(id)) return nullptr;
  Tensor& g = grads_[id];
  if (g.empty()) g = Tensor(tape_.value(id).shape());
  return &g;
}

const Tensor& Gradients::of(Var leaf) const { return of(leaf.id); }

const Tensor& Gradients::of(std::uint32_t id) const {
  auto it = std::lower_bound(leaf_ids_.begin(), leaf_ids_.end(), id);
  if (it == leaf_ids_.end() || *it != id) {
    throw std::out_of_range("no gradient recorded for tape node " + std::to_string(id));
  }
  return grads_[static_cast<std::size_t>(it - leaf_ids_.begin())];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad && recording_;
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::push(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
              std::move(backward));
}

Var Tape::push(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  if (recording_) {
    for (const Var& p : parents) {
      if (p.tape != this) throw std::logic_error("Tape::push: parent belongs to another tape");
      node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
    }
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Gradients Tape::backward(Var loss) const {
  if (!recording_) throw std::logic_error("Tape::backward on a non-recording tape");
  if (loss.tape != this) throw std::logic_error("Tape::backward: loss belongs to another tape");
  const Tensor& loss_value = nodes_[loss.id].value;
  if (loss_value.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + loss_value.shape_string());
  }

  std::vector<Tensor> grads(nodes_.size());
  GradSink sink(grads, *this);
  if (nodes_[loss.id].requires_grad) {
    grads[loss.id] = Tensor(loss_value.shape(), 1.0);
    for (std::uint32_t id = loss.id + 1; id-- > 0;) {
      const Node& node = nodes_[id];
      if (node.is_leaf || !node.backward || grads[id].empty()) continue;
      node.backward(node.value, grads[id], sink);
    }
  }

  std::vector<std::uint32_t> leaf_ids;
  std::vector<Tensor> leaf_grads;
  for (std::uint32_t id = 0; id < nodes_.size(); ++id) {
    const Node& node = nodes_[id];
    if (!node.is_leaf || !node.requires_grad) continue;
    leaf_ids.push_back(id);
    leaf_grads.push_back(grads[id].empty() ? Tensor(node.value.shape()) : std::move(grads[id]));
  }
  return Gradients(std::move(leaf_ids), std::move(leaf_grads));
}

namespace ops {
namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected 2-D operand, got " + t.shape_string());
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("operands recorded on different tapes");
}

void axpy(std::span<double> out, std::span<const double> in, double factor = 1.0) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += factor * in[i];
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_2d(av, "matmul");
  require_2d(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " + av.shape_string() + " x " +
                     bv.shape_string());
  }
  Tensor out({m, n});
  gemm_nn_acc(av.data(), bv.data(), out.data(), m, k, n);
  Tape* tape = a.tape;
  const auto ia = a.id, ib = b.id;
  return tape->push(std::move(out), {a, b}, [tape, ia, ib, m, k, n](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(ia)) gemm_nt_acc(g.data(), tape->value(ib).data(), ga->data(), m, n, k);
    if (Tensor* gb = s.grad(ib)) gemm_tn_acc(tape->value(ia).data(), g.data(), gb->data(), k, m, n);
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_2d(av, "matmul_nt");
  require_2d(bv, "matmul_nt");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + av.shape_string() + " x " +
                     bv.shape_string() + "^T");
  }
  Tensor out({m, n});
  gemm_nt_acc(av.data(), bv.data(), out.data(), m, k, n);
  Tape* tape = a.tape;
  const auto ia = a.id, ib = b.id;
  return tape->push(std::move(out), {a, b}, [tape, ia, ib, m, k, n](const Tensor&, const Tensor& g, GradSink& s) {
    // out = A B^T: dA = G B, dB = G^T A
    if (Tensor* ga = s.grad(ia)) gemm_nn_acc(g.data(), tape->value(ib).data(), ga->data(), m, n, k);
    if (Tensor* gb = s.grad(ib)) gemm_tn_acc(g.data(), tape->value(ia).data(), gb->data(), n, m, k);
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  axpy(out.data(), b.value().data());
  const auto ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(ia)) axpy(ga->data(), g.data());
    if (Tensor* gb = s.grad(ib)) axpy(gb->data(), g.data());
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  axpy(out.data(), b.value().data(), -1.0);
  const auto ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(ia)) axpy(ga->data(), g.data());
    if (Tensor* gb = s.grad(ib)) axpy(gb->data(), g.data(), -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  Tape* tape = a.tape;
  const auto ia = a.id, ib = b.id;
  return tape->push(std::move(out), {a, b}, [tape, ia, ib](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(ia)) {
      const Tensor& bv = tape->value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = s.grad(ib)) {
      const Tensor& av = tape->value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& x : out.data()) x *= factor;
  const auto ia = a.id;
  return a.tape->push(std::move(out), {a}, [ia, factor](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(ia)) axpy(ga->data(), g.data(), factor);
  });
}

Var add_scalar(Var a, double value) {
  Tensor out = a.value();
  for (double& x : out.data()) x += value;
  const auto ia = a.id;
  return a.tape->push(std::move(out), {a}, [ia](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(ia)) axpy(ga->data(), g.data());
  });
}

Var add_row(Var a, Var bias) {
  require_same_tape(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  require_2d(av, "add_row");
  const std::size_t n = av.rows(), m = av.cols();
  if (bv.size() != m) {
    throw ShapeError("add_row: bias " + bv.shape_string() + " does not match " + av.shape_string());
  }
  Tensor out = av;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) out(r, c) += bv[c];
  }
  const auto ia = a.id, ib = bias.id;
  return a.tape->push(std::move(out), {a, bias}, [ia, ib, n, m](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* ga = s.grad(ia)) axpy(ga->data(), g.data());
    if (Tensor* gb = s.grad(ib)) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c) (*gb)[c] += g(r, c);
      }
    }
  });
}

Var affine(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var gelu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  Tape* tape = x.tape;
  const auto ix = x.id;
  return tape->push(std::move(out), {x}, [tape, ix](const Tensor&, const Tensor& g, GradSink& s) {
    Tensor* gx = s.grad(ix);
    if (!gx) return;
    const Tensor& xv = tape->value(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      (*gx)[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  require_2d(xv, "layer_norm");
  const std::size_t n = xv.rows(), m = xv.cols();
  if (gain.value().size() != m || bias.value().size() != m) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(m) + " entries");
  }
  Tensor xhat({n, m});
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < m; ++c) mu += xv(r, c);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t c = 0; c < m; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= static_cast<double>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < m; ++c) xhat(r, c) = (xv(r, c) - mu) * inv_std[r];
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out({n, m});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) out(r, c) = xhat(r, c) * gv[c] + bv[c];
  }
  Tape* tape = x.tape;
  const auto ix = x.id, ig = gain.id, ib = bias.id;
  return tape->push(
      std::move(out), {x, gain, bias},
      [tape, ix, ig, ib, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const Tensor&, const Tensor& g, GradSink& s) {
        if (Tensor* gg = s.grad(ig)) {
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < m; ++c) (*gg)[c] += g(r, c) * xhat(r, c);
          }
        }
        if (Tensor* gb = s.grad(ib)) {
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < m; ++c) (*gb)[c] += g(r, c);
          }
        }
        if (Tensor* gx = s.grad(ix)) {
          const Tensor& gv = tape->value(ig);
          std::vector<double> dxhat(m);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
              dxhat[c] = g(r, c) * gv[c];
              mean_d += dxhat[c];
              mean_dx += dxhat[c] * xhat(r, c);
            }
            mean_d /= static_cast<double>(m);
            mean_dx /= static_cast<double>(m);
            for (std::size_t c = 0; c < m; ++c) {
              (*gx)(r, c) += inv_std[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
            }
          }
        }
      });
}

Var softmax_rows(Var x, bool causal) {
  const Tensor& xv = x.value();
  require_2d(xv, "softmax_rows");
  const std::size_t n = xv.rows(), m = xv.cols();
  Tensor out({n, m});
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t width = causal ? std::min(m, r + 1) : m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < width; ++c) mx = std::max(mx, xv(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      out(r, c) = std::exp(xv(r, c) - mx);
      total += out(r, c);
    }
    for (std::size_t c = 0; c < width; ++c) out(r, c) /= total;
  }
  const auto ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix, n, m](const Tensor& y, const Tensor& g, GradSink& s) {
    Tensor* gx = s.grad(ix);
    if (!gx) return;
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < m; ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < m; ++c) (*gx)(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

Var exp(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = std::exp(v);
  const auto ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix](const Tensor& y, const Tensor& g, GradSink& s) {
    if (Tensor* gx = s.grad(ix)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i];
    }
  });
}

Var softplus(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  Tape* tape = x.tape;
  const auto ix = x.id;
  return tape->push(std::move(out), {x}, [tape, ix](const Tensor&, const Tensor& g, GradSink& s) {
    Tensor* gx = s.grad(ix);
    if (!gx) return;
    const Tensor& xv = tape->value(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double sig = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      (*gx)[i] += g[i] * sig;
    }
  });
}

Var clamp(Var x, double lo, double hi) {
  Tensor out = x.value();
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  Tape* tape = x.tape;
  const auto ix = x.id;
  return tape->push(std::move(out), {x}, [tape, ix, lo, hi](const Tensor&, const Tensor& g, GradSink& s) {
    Tensor* gx = s.grad(ix);
    if (!gx) return;
    const Tensor& xv = tape->value(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > lo && xv[i] < hi) (*gx)[i] += g[i];
    }
  });
}

Var slice_cols(Var x, std::size_t lo, std::size_t hi) {
  const Tensor& xv = x.value();
  require_2d(xv, "slice_cols");
  const std::size_t n = xv.rows(), m = xv.cols();
  if (lo >= hi || hi > m) {
    throw ShapeError("slice_cols: range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                     ") invalid for " + xv.shape_string());
  }
  const std::size_t w = hi - lo;
  Tensor out({n, w});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < w; ++c) out(r, c) = xv(r, lo + c);
  }
  const auto ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix, n, w, lo](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* gx = s.grad(ix)) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < w; ++c) (*gx)(r, lo + c) += g(r, c);
      }
    }
  });
}

Var slice_rows(Var x, std::size_t lo, std::size_t hi) {
  const Tensor& xv = x.value();
  require_2d(xv, "slice_rows");
  const std::size_t n = xv.rows(), m = xv.cols();
  if (lo >= hi || hi > n) {
    throw ShapeError("slice_rows: range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                     ") invalid for " + xv.shape_string());
  }
  std::vector<double> data(xv.data().begin() + lo * m, xv.data().begin() + hi * m);
  const auto ix = x.id;
  return x.tape->push(Tensor({hi - lo, m}, std::move(data)), {x},
                      [ix, lo, m](const Tensor&, const Tensor& g, GradSink& s) {
                        if (Tensor* gx = s.grad(ix)) {
                          axpy(gx->data().subspan(lo * m, g.size()), g.data());
                        }
                      });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape* tape = parts.front().tape;
  const std::size_t n = parts.front().value().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape != tape) throw std::logic_error("operands recorded on different tapes");
    const Tensor& pv = p.value();
    require_2d(pv, "concat_cols");
    if (pv.rows() != n) throw ShapeError("concat_cols: row counts differ");
    offsets.push_back(total);
    total += pv.cols();
  }
  Tensor out({n, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offsets[k] + c) = pv(r, c);
    }
  }
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    ids.push_back(p.id);
    widths.push_back(p.value().cols());
  }
  return tape->push(std::move(out), parts,
                    [ids = std::move(ids), widths = std::move(widths),
                     offsets = std::move(offsets), n](const Tensor&, const Tensor& g, GradSink& s) {
                      for (std::size_t k = 0; k < ids.size(); ++k) {
                        Tensor* gp = s.grad(ids[k]);
                        if (!gp) continue;
                        for (std::size_t r = 0; r < n; ++r) {
                          for (std::size_t c = 0; c < widths[k]; ++c) {
                            (*gp)(r, c) += g(r, offsets[k] + c);
                          }
                        }
                      }
                    });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require_2d(tv, "gather_rows");
  const std::size_t m = tv.cols();
  Tensor out({ids.size(), m});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[r]) + " out of range for " +
                       tv.shape_string());
    }
    for (std::size_t c = 0; c < m; ++c) out(r, c) = tv(static_cast<std::size_t>(ids[r]), c);
  }
  const auto it = table.id;
  return table.tape->push(
      std::move(out), {table},
      [it, m, idx = std::vector<int>(ids.begin(), ids.end())](const Tensor&, const Tensor& g, GradSink& s) {
        if (Tensor* gt = s.grad(it)) {
          for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t c = 0; c < m; ++c) (*gt)(static_cast<std::size_t>(idx[r]), c) += g(r, c);
          }
        }
      });
}

Var reshape(Var x, std::size_t rows, std::size_t cols) {
  Tensor out = x.value().reshaped({rows, cols});
  const auto ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* gx = s.grad(ix)) axpy(gx->data(), g.data());
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  const auto ix = x.id;
  return x.tape->push(Tensor::scalar(total), {x}, [ix](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* gx = s.grad(ix)) {
      const double gv = g[0];
      for (double& v : gx->data()) v += gv;
    }
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var sum_cols(Var x) {
  const Tensor& xv = x.value();
  require_2d(xv, "sum_cols");
  const std::size_t n = xv.rows(), m = xv.cols();
  Tensor out({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) out[r] += xv(r, c);
  }
  const auto ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix, n, m](const Tensor&, const Tensor& g, GradSink& s) {
    if (Tensor* gx = s.grad(ix)) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < m; ++c) (*gx)(r, c) += g[r];
      }
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& lv = logits.value();
  require_2d(lv, "cross_entropy");
  const std::size_t n = lv.rows(), m = lv.cols();
  if (targets.size() != n) throw ShapeError("cross_entropy: one target per row required");
  Tensor probs({n, m});
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= m) throw ShapeError("cross_entropy: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c) mx = std::max(mx, lv(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      probs(r, c) = std::exp(lv(r, c) - mx);
      z += probs(r, c);
    }
    for (std::size_t c = 0; c < m; ++c) probs(r, c) /= z;
    total += mx + std::log(z) - lv(r, static_cast<std::size_t>(targets[r]));
    ++counted;
  }
  if (counted == 0) throw ShapeError("cross_entropy: no target rows");
  const double inv = 1.0 / static_cast<double>(counted);
  const auto il = logits.id;
  return logits.tape->push(
      Tensor::scalar(total * inv), {logits},
      [il, n, m, inv, probs = std::move(probs),
       tg = std::vector<int>(targets.begin(), targets.end())](const Tensor&, const Tensor& g, GradSink& s) {
        Tensor* gl = s.grad(il);
        if (!gl) return;
        const double scale_factor = g[0] * inv;
        for (std::size_t r = 0; r < n; ++r) {
          if (tg[r] < 0) continue;
          for (std::size_t c = 0; c < m; ++c) (*gl)(r, c) += scale_factor * probs(r, c);
          (*gl)(r, static_cast<std::size_t>(tg[r])) -= scale_factor;
        }
      });
}

}  // namespace ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape tape(false);
  return ops::matmul(tape.constant(a), tape.constant(b)).value();
}

Tensor softmax_rows(const Tensor& x, bool causal) {
  Tape tape(false);
  return ops::softmax_rows(tape.constant(x), causal).value();
}

Tensor gelu(const Tensor& x) {
  Tape tape(false);
  return ops::gelu(tape.constant(x)).value();
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  Tape tape(false);
  return ops::layer_norm(tape.constant(x), tape.constant(gain), tape.constant(bias), eps).value();
}

}  // namespace vib
