#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "crashcast/geometry.hpp"
#include "crashcast/tensor.hpp"

namespace crashcast::nn {

// Reverse-mode automatic differentiation on a dynamic tape. Each operation
// builds a Node whose backprop closure scatters the incoming gradient into
// its parents. Graphs are rebuilt per training step; parameters are the only
// long-lived nodes.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;
  bool requires_grad = false;
};

inline Var make_const(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

inline Var make_param(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

inline Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(fn);
  return n;
}

inline double scalar_value(const Var& v) { return v->value[0]; }

// ---------------------------------------------------------------------------
// elementwise ops

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (int p = 0; p < 2; ++p) {
      Node& parent = *self.parents[p];
      if (!parent.requires_grad) continue;
      for (int i = 0; i < self.grad.size(); ++i) parent.grad[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "sub");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad)
      for (int i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (int i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad)
      for (int i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (int i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] *= s;
  return make_node(std::move(out), {a}, [s](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
  });
}

inline Var add_n(const std::vector<Var>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: empty term list");
  Tensor out = terms[0]->value;
  for (std::size_t t = 1; t < terms.size(); ++t) {
    check_same_shape(out, terms[t]->value, "add_n");
    for (int i = 0; i < out.size(); ++i) out[i] += terms[t]->value[i];
  }
  return make_node(std::move(out), terms, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (int i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Var relu(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      p.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

inline Var tanh_op(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      p.grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

inline Var exp_op(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.value[i];
  });
}

/// log(max(x, eps)); gradient is zero where the clamp is active.
inline Var log_clamped(const Var& a, double eps = 1e-12) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::log(out[i] > eps ? out[i] : eps);
  return make_node(std::move(out), {a}, [eps](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > eps) p.grad[i] += self.grad[i] / p.value[i];
  });
}

inline Var sum(const Var& a) {
  Tensor out = Tensor::scalar(a->value.sum());
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    const double g = self.grad[0];
    for (int i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
  });
}

inline Var pick(const Var& a, int index) {
  if (index < 0 || index >= a->value.size()) throw std::invalid_argument("pick: index out of range");
  Tensor out = Tensor::scalar(a->value[index]);
  return make_node(std::move(out), {a},
                   [index](Node& self) { self.parents[0]->grad[index] += self.grad[0]; });
}

// ---------------------------------------------------------------------------
// shape ops

inline Var flatten(const Var& a) {
  Tensor out = Tensor({a->value.size()});
  for (int i = 0; i < out.size(); ++i) out[i] = a->value[i];
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: empty list");
  int total = 0;
  for (const auto& p : parts) {
    if (p->value.ndim() != 1) throw std::invalid_argument("concat: 1-D vectors expected");
    total += p->value.size();
  }
  Tensor out({total});
  int off = 0;
  for (const auto& p : parts)
    for (int i = 0; i < p->value.size(); ++i) out[off++] = p->value[i];
  return make_node(std::move(out), parts, [](Node& self) {
    int off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad)
        for (int i = 0; i < p->grad.size(); ++i) p->grad[i] += self.grad[off + i];
      off += p->value.size();
    }
  });
}

inline Var slice(const Var& a, int start, int len) {
  if (a->value.ndim() != 1 || start < 0 || len <= 0 || start + len > a->value.size())
    throw std::invalid_argument("slice: bad range");
  Tensor out({len});
  for (int i = 0; i < len; ++i) out[i] = a->value[start + i];
  return make_node(std::move(out), {a}, [start, len](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < len; ++i) p.grad[start + i] += self.grad[i];
  });
}

inline Var gather(const Var& a, std::vector<int> indices) {
  Tensor out({static_cast<int>(indices.size())});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= a->value.size())
      throw std::invalid_argument("gather: index out of range");
    out[static_cast<int>(i)] = a->value[indices[i]];
  }
  return make_node(std::move(out), {a}, [idx = std::move(indices)](Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < idx.size(); ++i)
      p.grad[idx[i]] += self.grad[static_cast<int>(i)];
  });
}

inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty list");
  const int n = rows[0]->value.size();
  for (const auto& r : rows)
    if (r->value.ndim() != 1 || r->value.size() != n)
      throw std::invalid_argument("stack_rows: rows must be equal-length vectors");
  Tensor out({static_cast<int>(rows.size()), n});
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (int i = 0; i < n; ++i) out.at(static_cast<int>(k), i) = rows[k]->value[i];
  return make_node(std::move(out), rows, [n](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      for (int i = 0; i < n; ++i) p.grad[i] += self.grad.at(static_cast<int>(k), i);
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes");
  const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = a->value.at(i, p);
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) out.at(i, j) += av * b->value.at(p, j);
    }
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad)
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const double g = self.grad.at(i, j);
          if (g == 0.0) continue;
          for (int p = 0; p < k; ++p) pa.grad.at(i, p) += g * pb.value.at(p, j);
        }
    if (pb.requires_grad)
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          const double av = pa.value.at(i, p);
          if (av == 0.0) continue;
          for (int j = 0; j < n; ++j) pb.grad.at(p, j) += av * self.grad.at(i, j);
        }
  });
}

/// W[m,n] * x[n] -> [m]
inline Var matvec(const Var& w, const Var& x) {
  if (w->value.ndim() != 2 || x->value.ndim() != 1 || w->value.dim(1) != x->value.size())
    throw std::invalid_argument("matvec: incompatible shapes");
  const int m = w->value.dim(0), n = w->value.dim(1);
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int j = 0; j < n; ++j) acc += w->value.at(i, j) * x->value[j];
    out[i] = acc;
  }
  return make_node(std::move(out), {w, x}, [m, n](Node& self) {
    Node& pw = *self.parents[0];
    Node& px = *self.parents[1];
    for (int i = 0; i < m; ++i) {
      const double g = self.grad[i];
      if (g == 0.0) continue;
      if (pw.requires_grad)
        for (int j = 0; j < n; ++j) pw.grad.at(i, j) += g * px.value[j];
      if (px.requires_grad)
        for (int j = 0; j < n; ++j) px.grad[j] += g * pw.value.at(i, j);
    }
  });
}

/// M[m,n]^T * x[m] -> [n]
inline Var matvec_t(const Var& mat, const Var& x) {
  if (mat->value.ndim() != 2 || x->value.ndim() != 1 || mat->value.dim(0) != x->value.size())
    throw std::invalid_argument("matvec_t: incompatible shapes");
  const int m = mat->value.dim(0), n = mat->value.dim(1);
  Tensor out({n});
  for (int i = 0; i < m; ++i) {
    const double xv = x->value[i];
    if (xv == 0.0) continue;
    for (int j = 0; j < n; ++j) out[j] += xv * mat->value.at(i, j);
  }
  return make_node(std::move(out), {mat, x}, [m, n](Node& self) {
    Node& pm = *self.parents[0];
    Node& px = *self.parents[1];
    if (pm.requires_grad)
      for (int i = 0; i < m; ++i) {
        const double xv = px.value[i];
        if (xv == 0.0) continue;
        for (int j = 0; j < n; ++j) pm.grad.at(i, j) += xv * self.grad[j];
      }
    if (px.requires_grad)
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += pm.value.at(i, j) * self.grad[j];
        px.grad[i] += acc;
      }
  });
}

/// M[m,n] with v[m] broadcast-added to every column.
inline Var add_col(const Var& mat, const Var& v) {
  if (mat->value.ndim() != 2 || v->value.ndim() != 1 || mat->value.dim(0) != v->value.size())
    throw std::invalid_argument("add_col: incompatible shapes");
  const int m = mat->value.dim(0), n = mat->value.dim(1);
  Tensor out = mat->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += v->value[i];
  return make_node(std::move(out), {mat, v}, [m, n](Node& self) {
    Node& pm = *self.parents[0];
    Node& pv = *self.parents[1];
    if (pm.requires_grad)
      for (int i = 0; i < m * n; ++i) pm.grad[i] += self.grad[i];
    if (pv.requires_grad)
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += self.grad.at(i, j);
        pv.grad[i] += acc;
      }
  });
}

/// Fully connected layer over a batch of rows: X[k,n] * W[m,n]^T + b -> [k,m].
inline Var linear(const Var& x, const Var& w, const Var& b) {
  if (x->value.ndim() != 2 || w->value.ndim() != 2 || b->value.ndim() != 1 ||
      x->value.dim(1) != w->value.dim(1) || w->value.dim(0) != b->value.size())
    throw std::invalid_argument("linear: incompatible shapes");
  const int k = x->value.dim(0), n = x->value.dim(1), m = w->value.dim(0);
  Tensor out({k, m});
  for (int r = 0; r < k; ++r)
    for (int i = 0; i < m; ++i) {
      double acc = b->value[i];
      for (int j = 0; j < n; ++j) acc += x->value.at(r, j) * w->value.at(i, j);
      out.at(r, i) = acc;
    }
  return make_node(std::move(out), {x, w, b}, [k, n, m](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    for (int r = 0; r < k; ++r)
      for (int i = 0; i < m; ++i) {
        const double g = self.grad.at(r, i);
        if (g == 0.0) continue;
        if (px.requires_grad)
          for (int j = 0; j < n; ++j) px.grad.at(r, j) += g * pw.value.at(i, j);
        if (pw.requires_grad)
          for (int j = 0; j < n; ++j) pw.grad.at(i, j) += g * px.value.at(r, j);
        if (pb.requires_grad) pb.grad[i] += g;
      }
  });
}

// ---------------------------------------------------------------------------
// softmax family

/// Softmax over the valid entries of a score vector; masked slots get exactly
/// zero weight. A fully masked input yields the all-zero vector.
inline Var masked_softmax(const Var& scores, std::vector<std::uint8_t> mask) {
  if (scores->value.ndim() != 1 || static_cast<int>(mask.size()) != scores->value.size())
    throw std::invalid_argument("masked_softmax: mask length mismatch");
  const int k = scores->value.size();
  Tensor out({k});
  double max_v = -1e300;
  bool any = false;
  for (int i = 0; i < k; ++i)
    if (mask[i]) {
      any = true;
      max_v = std::max(max_v, scores->value[i]);
    }
  if (any) {
    double z = 0.0;
    for (int i = 0; i < k; ++i)
      if (mask[i]) z += std::exp(scores->value[i] - max_v);
    for (int i = 0; i < k; ++i) out[i] = mask[i] ? std::exp(scores->value[i] - max_v) / z : 0.0;
  }
  return make_node(std::move(out), {scores}, [m = std::move(mask), k](Node& self) {
    Node& p = *self.parents[0];
    double dot = 0.0;
    for (int i = 0; i < k; ++i) dot += self.value[i] * self.grad[i];
    for (int i = 0; i < k; ++i)
      if (m[i]) p.grad[i] += self.value[i] * (self.grad[i] - dot);
  });
}

inline Var log_softmax(const Var& logits) {
  if (logits->value.ndim() != 1) throw std::invalid_argument("log_softmax: vector expected");
  const int k = logits->value.size();
  double max_v = logits->value[0];
  for (int i = 1; i < k; ++i) max_v = std::max(max_v, logits->value[i]);
  double z = 0.0;
  for (int i = 0; i < k; ++i) z += std::exp(logits->value[i] - max_v);
  const double log_z = max_v + std::log(z);
  Tensor out({k});
  for (int i = 0; i < k; ++i) out[i] = logits->value[i] - log_z;
  return make_node(std::move(out), {logits}, [k](Node& self) {
    Node& p = *self.parents[0];
    double gsum = 0.0;
    for (int i = 0; i < k; ++i) gsum += self.grad[i];
    for (int i = 0; i < k; ++i) p.grad[i] += self.grad[i] - std::exp(self.value[i]) * gsum;
  });
}

/// Sum over rows of -log softmax(logits_row)[label]; the multi-class
/// cross-entropy used by the detector heads.
inline Var softmax_ce_rows(const Var& logits, std::vector<int> labels) {
  if (logits->value.ndim() != 2 || static_cast<int>(labels.size()) != logits->value.dim(0))
    throw std::invalid_argument("softmax_ce_rows: label count mismatch");
  const int k = logits->value.dim(0), c = logits->value.dim(1);
  double loss = 0.0;
  for (int r = 0; r < k; ++r) {
    if (labels[r] < 0 || labels[r] >= c) throw std::invalid_argument("softmax_ce_rows: bad label");
    double max_v = logits->value.at(r, 0);
    for (int j = 1; j < c; ++j) max_v = std::max(max_v, logits->value.at(r, j));
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(logits->value.at(r, j) - max_v);
    loss += max_v + std::log(z) - logits->value.at(r, labels[r]);
  }
  return make_node(Tensor::scalar(loss), {logits}, [lab = std::move(labels), k, c](Node& self) {
    Node& p = *self.parents[0];
    const double g = self.grad[0];
    for (int r = 0; r < k; ++r) {
      double max_v = p.value.at(r, 0);
      for (int j = 1; j < c; ++j) max_v = std::max(max_v, p.value.at(r, j));
      double z = 0.0;
      for (int j = 0; j < c; ++j) z += std::exp(p.value.at(r, j) - max_v);
      for (int j = 0; j < c; ++j) {
        const double soft = std::exp(p.value.at(r, j) - max_v) / z;
        p.grad.at(r, j) += g * (soft - (j == lab[r] ? 1.0 : 0.0));
      }
    }
  });
}

/// Numerically stable sum of binary cross-entropies against constant targets.
inline Var bce_with_logits(const Var& logits, Tensor targets) {
  check_same_shape(logits->value, targets, "bce_with_logits");
  double loss = 0.0;
  for (int i = 0; i < logits->value.size(); ++i) {
    const double l = logits->value[i], t = targets[i];
    loss += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::abs(l)));
  }
  return make_node(Tensor::scalar(loss), {logits}, [tg = std::move(targets)](Node& self) {
    Node& p = *self.parents[0];
    const double g = self.grad[0];
    for (int i = 0; i < p.value.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-p.value[i]));
      p.grad[i] += g * (s - tg[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// losses

inline double smooth_l1_scalar(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

/// Sum of smooth-L1 penalties of (pred - target), optionally restricted to
/// rows enabled in `row_mask` (pred shaped [k, d]); pass an empty mask to use
/// every element of an arbitrarily shaped tensor.
inline Var smooth_l1_sum(const Var& pred, Tensor target, std::vector<std::uint8_t> row_mask = {}) {
  check_same_shape(pred->value, target, "smooth_l1_sum");
  if (!row_mask.empty() &&
      (pred->value.ndim() != 2 || static_cast<int>(row_mask.size()) != pred->value.dim(0)))
    throw std::invalid_argument("smooth_l1_sum: row mask shape mismatch");
  const int row_len = row_mask.empty() ? pred->value.size() : pred->value.dim(1);
  double loss = 0.0;
  for (int i = 0; i < pred->value.size(); ++i) {
    if (!row_mask.empty() && !row_mask[static_cast<std::size_t>(i / row_len)]) continue;
    loss += smooth_l1_scalar(pred->value[i] - target[i]);
  }
  return make_node(Tensor::scalar(loss), {pred},
                   [tg = std::move(target), rm = std::move(row_mask), row_len](Node& self) {
                     Node& p = *self.parents[0];
                     const double g = self.grad[0];
                     for (int i = 0; i < p.value.size(); ++i) {
                       if (!rm.empty() && !rm[static_cast<std::size_t>(i / row_len)]) continue;
                       const double d = p.value[i] - tg[i];
                       p.grad[i] += g * std::clamp(d, -1.0, 1.0);
                     }
                   });
}

// ---------------------------------------------------------------------------
// structured ops

/// Element-wise maximum across equal-shape inputs. Gradient flows to the
/// first input attaining the maximum at each element.
inline Var maxout(const std::vector<Var>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("maxout: empty input list");
  for (const auto& v : inputs) check_same_shape(inputs[0]->value, v->value, "maxout");
  const int n = inputs[0]->value.size();
  Tensor out = inputs[0]->value;
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(n), 0);
  for (std::size_t k = 1; k < inputs.size(); ++k)
    for (int i = 0; i < n; ++i)
      if (inputs[k]->value[i] > out[i]) {
        out[i] = inputs[k]->value[i];
        argmax[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(k);
      }
  return make_node(std::move(out), inputs, [am = std::move(argmax)](Node& self) {
    for (int i = 0; i < self.grad.size(); ++i) {
      Node& p = *self.parents[static_cast<std::size_t>(am[static_cast<std::size_t>(i)])];
      if (p.requires_grad) p.grad[i] += self.grad[i];
    }
  });
}

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  if (x->value.ndim() != 3 || w->value.ndim() != 4 || b->value.ndim() != 1 ||
      w->value.dim(1) != x->value.dim(0) || w->value.dim(0) != b->value.size())
    throw std::invalid_argument("conv2d: incompatible shapes");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int ci = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  const int co = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: output collapses to zero size");
  Tensor out({co, ho, wo});
  for (int f = 0; f < co; ++f)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = b->value[f];
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += x->value.at(c, iy, ix) * w->value.at(f, c, ky, kx);
            }
          }
        out.at(f, oy, ox) = acc;
      }
  return make_node(std::move(out), {x, w, b}, [stride, pad, ci, h, wd, co, kh, kw, ho, wo](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    for (int f = 0; f < co; ++f)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const double g = self.grad.at(f, oy, ox);
          if (g == 0.0) continue;
          if (pb.requires_grad) pb.grad[f] += g;
          for (int c = 0; c < ci; ++c)
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= wd) continue;
                if (pw.requires_grad) pw.grad.at(f, c, ky, kx) += g * px.value.at(c, iy, ix);
                if (px.requires_grad) px.grad.at(c, iy, ix) += g * pw.value.at(f, c, ky, kx);
              }
            }
        }
  });
}

/// Max-pool the feature-map cells under a pixel-space box into a fixed
/// grid x grid output. A box smaller than one cell pools from the single
/// covering cell. `stride_px` is the pixel footprint of one feature cell.
inline Var roi_max_pool(const Var& features, const geometry::BoundingBox& box, double stride_px,
                        int grid) {
  if (features->value.ndim() != 3) throw std::invalid_argument("roi_max_pool: [C,H,W] expected");
  if (grid < 1 || stride_px <= 0.0) throw std::invalid_argument("roi_max_pool: bad grid/stride");
  if (!box.valid()) throw std::invalid_argument("roi_max_pool: box with non-positive area");
  const int c = features->value.dim(0), h = features->value.dim(1), w = features->value.dim(2);
  int fx1 = static_cast<int>(std::floor(box.x1 / stride_px));
  int fy1 = static_cast<int>(std::floor(box.y1 / stride_px));
  int fx2 = static_cast<int>(std::ceil(box.x2 / stride_px));
  int fy2 = static_cast<int>(std::ceil(box.y2 / stride_px));
  fx1 = std::clamp(fx1, 0, w - 1);
  fy1 = std::clamp(fy1, 0, h - 1);
  fx2 = std::clamp(fx2, fx1 + 1, w);
  fy2 = std::clamp(fy2, fy1 + 1, h);
  const int cw = fx2 - fx1, ch = fy2 - fy1;
  Tensor out({c, grid, grid});
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(c) * grid * grid);
  int oi = 0;
  for (int ch_i = 0; ch_i < c; ++ch_i)
    for (int gy = 0; gy < grid; ++gy) {
      int ys = fy1 + (gy * ch) / grid;
      int ye = fy1 + ((gy + 1) * ch + grid - 1) / grid;
      if (ye <= ys) ye = ys + 1;
      for (int gx = 0; gx < grid; ++gx) {
        int xs = fx1 + (gx * cw) / grid;
        int xe = fx1 + ((gx + 1) * cw + grid - 1) / grid;
        if (xe <= xs) xe = xs + 1;
        double best = -1e300;
        int best_idx = -1;
        for (int yy = ys; yy < ye; ++yy)
          for (int xx = xs; xx < xe; ++xx) {
            const double v = features->value.at(ch_i, yy, xx);
            if (v > best) {
              best = v;
              best_idx = (ch_i * h + yy) * w + xx;
            }
          }
        out[oi] = best;
        argmax[static_cast<std::size_t>(oi)] = best_idx;
        ++oi;
      }
    }
  return make_node(std::move(out), {features}, [am = std::move(argmax)](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < self.grad.size(); ++i) p.grad[am[static_cast<std::size_t>(i)]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// backward pass

inline void backward(const Var& root) {
  if (root->value.size() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->requires_grad) return;
  // Iterative post-order DFS over grad-requiring ancestors.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    bool descended = false;
    while (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
        descended = true;
        break;
      }
    }
    if (!descended && f.next_parent >= f.node->parents.size()) {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }
  for (Node* n : topo) n->grad = Tensor(n->value.shape());
  root->grad[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

/// Drops stale gradients. Training loops call this before building a step's
/// graph so parameters that end up unused in the graph are skipped by the
/// optimizer instead of reusing last step's gradient.
inline void reset_grads(const std::vector<Var>& params) {
  for (const auto& p : params) p->grad = Tensor();
}

// ---------------------------------------------------------------------------
// optimization

/// Adaptive-moment first-order optimizer (Adam). State is keyed by parameter
/// node identity and persists across steps.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Var>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& p : params) {
      if (p->grad.size() != p->value.size()) continue;  // parameter unused in this graph
      auto& st = state_[p.get()];
      if (st.m.size() != p->value.size()) {
        st.m = Tensor(p->value.shape());
        st.v = Tensor(p->value.shape());
      }
      for (int i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
        p->value[i] -= lr_ * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + eps_);
      }
    }
  }

  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  struct State {
    Tensor m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::unordered_map<Node*, State> state_;
};

/// Scales gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<Var>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p->grad.size() != p->value.size()) continue;
    for (int i = 0; i < p->grad.size(); ++i) sq += p->grad[i] * p->grad[i];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      if (p->grad.size() != p->value.size()) continue;
      for (int i = 0; i < p->grad.size(); ++i) p->grad[i] *= s;
    }
  }
  return norm;
}

}  // namespace crashcast::nn
