#include "ensemble/nn/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <unordered_set>

#include "ensemble/core/error.hpp"
#include "ensemble/kernels/kernels.hpp"

namespace ensemble::nn {

namespace {

thread_local bool g_grad_enabled = true;

void check_same(const Matrix& a, const Matrix& b, const char* op) {
  require(a.same_shape(b), ErrorKind::kValidation,
          std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
              " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

// Accumulates `g` scaled by `s` into the parent's gradient if it wants one.
void accumulate(Node& p, const Matrix& g, double s = 1.0) {
  if (!p.requires_grad) return;
  Matrix& pg = p.ensure_grad();
  double* d = pg.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < pg.size(); ++i) d[i] += s * src[i];
}

template <typename F, typename D>
Var unary(const Var& x, F f, D dfdx) {
  Matrix out(x.rows(), x.cols());
  const double* xv = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = f(xv[i]);
  return make_op(std::move(out), {x}, [dfdx](Node& n) {
    Node& p = parent(n, 0);
    if (!p.requires_grad) return;
    Matrix& pg = p.ensure_grad();
    for (std::size_t i = 0; i < pg.size(); ++i)
      pg.data()[i] += n.grad.data()[i] * dfdx(p.value.data()[i], n.value.data()[i]);
  });
}

}  // namespace

Matrix& Node::ensure_grad() {
  if (grad.empty() && !value.empty()) grad = Matrix(value.rows(), value.cols());
  return grad;
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  require(root.rows() == 1 && root.cols() == 1, ErrorKind::kValidation, "backward: root must be scalar");
  if (!root.requires_grad()) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().data()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Var constant(Matrix value) { return Var(std::move(value), false); }

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), ErrorKind::kValidation, "matmul: inner dimension mismatch");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix out(m, n);
  kernels::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n, false);
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) kernels::gemm_nt(self.grad.data(), pb.value.data(), pa.ensure_grad().data(), m, n, k, true);
    if (pb.requires_grad) kernels::gemm_tn(pa.value.data(), self.grad.data(), pb.ensure_grad().data(), k, m, n, true);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(), ErrorKind::kValidation, "matmul_nt: inner dimension mismatch");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Matrix out(m, n);
  kernels::gemm_nt(a.value().data(), b.value().data(), out.data(), m, k, n, false);
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    // dA = G B, dB = G^T A
    if (pa.requires_grad) kernels::gemm_nn(self.grad.data(), pb.value.data(), pa.ensure_grad().data(), m, n, k, true);
    if (pb.requires_grad) kernels::gemm_tn(self.grad.data(), pa.value.data(), pb.ensure_grad().data(), n, m, k, true);
  });
}

Var transpose(const Var& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a.value()(r, c);
  return make_op(std::move(out), {a}, [](Node& self) {
    Node& p = parent(self, 0);
    Matrix& g = p.ensure_grad();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += self.grad(c, r);
  });
}

Var add(const Var& a, const Var& b) {
  check_same(a.value(), b.value(), "add");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.value().data()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    accumulate(parent(self, 0), self.grad);
    accumulate(parent(self, 1), self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same(a.value(), b.value(), "sub");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.value().data()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    accumulate(parent(self, 0), self.grad);
    accumulate(parent(self, 1), self.grad, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same(a.value(), b.value(), "mul");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.value().data()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      Matrix& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += self.grad.data()[i] * pb.value.data()[i];
    }
    if (pb.requires_grad) {
      Matrix& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += self.grad.data()[i] * pa.value.data()[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Matrix out = a.value();
  for (double& v : out.storage()) v *= s;
  return make_op(std::move(out), {a}, [s](Node& self) { accumulate(parent(self, 0), self.grad, s); });
}

Var add_scalar(const Var& a, double s) {
  Matrix out = a.value();
  for (double& v : out.storage()) v += s;
  return make_op(std::move(out), {a}, [](Node& self) { accumulate(parent(self, 0), self.grad); });
}

Var add_row(const Var& x, const Var& bias) {
  require(bias.rows() == 1 && bias.cols() == x.cols(), ErrorKind::kValidation, "add_row: bias shape");
  Matrix out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bias.value()(0, c);
  return make_op(std::move(out), {x, bias}, [](Node& self) {
    accumulate(parent(self, 0), self.grad);
    Node& pb = parent(self, 1);
    if (pb.requires_grad) {
      Matrix& g = pb.ensure_grad();
      for (std::size_t r = 0; r < self.grad.rows(); ++r)
        for (std::size_t c = 0; c < self.grad.cols(); ++c) g(0, c) += self.grad(r, c);
    }
  });
}

Var mul_row(const Var& x, const Var& row) {
  require(row.rows() == 1 && row.cols() == x.cols(), ErrorKind::kValidation, "mul_row: row shape");
  Matrix out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= row.value()(0, c);
  return make_op(std::move(out), {x, row}, [](Node& self) {
    Node& px = parent(self, 0);
    Node& pr = parent(self, 1);
    const std::size_t rows = self.grad.rows(), cols = self.grad.cols();
    if (px.requires_grad) {
      Matrix& g = px.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g(r, c) += self.grad(r, c) * pr.value(0, c);
    }
    if (pr.requires_grad) {
      Matrix& g = pr.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g(0, c) += self.grad(r, c) * px.value(r, c);
    }
  });
}

Var mul_col(const Var& x, const Var& col) {
  require(col.cols() == 1 && col.rows() == x.rows(), ErrorKind::kValidation, "mul_col: column shape");
  Matrix out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= col.value()(r, 0);
  return make_op(std::move(out), {x, col}, [](Node& self) {
    Node& px = parent(self, 0);
    Node& pc = parent(self, 1);
    const std::size_t rows = self.grad.rows(), cols = self.grad.cols();
    if (px.requires_grad) {
      Matrix& g = px.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g(r, c) += self.grad(r, c) * pc.value(r, 0);
    }
    if (pc.requires_grad) {
      Matrix& g = pc.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g(r, 0) += self.grad(r, c) * px.value(r, c);
    }
  });
}

Var gelu(const Var& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = k * (v + 0.044715 * v * v * v);
        const double th = std::tanh(u);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * 0.044715 * v * v);
      });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Var tanh(const Var& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Var exp(const Var& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var square(const Var& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t rows = x.rows(), cols = x.cols();
  require(gamma.cols() == cols && beta.cols() == cols, ErrorKind::kValidation, "layer_norm: affine shape");
  auto xhat = std::make_shared<Matrix>(rows, cols);
  auto mean_v = std::make_shared<std::vector<double>>(rows);
  auto rstd = std::make_shared<std::vector<double>>(rows);
  kernels::normalize_rows(x.value().data(), xhat->data(), mean_v->data(), rstd->data(), rows, cols, eps);
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = (*xhat)(r, c) * gamma.value()(0, c) + beta.value()(0, c);
  return make_op(std::move(out), {x, gamma, beta}, [xhat, rstd, rows, cols](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    Node& pb = parent(self, 2);
    const Matrix& g = self.grad;
    if (pg.requires_grad || pb.requires_grad) {
      Matrix& gg = pg.ensure_grad();
      Matrix& gb = pb.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          gg(0, c) += g(r, c) * (*xhat)(r, c);
          gb(0, c) += g(r, c);
        }
    }
    if (px.requires_grad) {
      Matrix& gx = px.ensure_grad();
      std::vector<double> dxh(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          dxh[c] = g(r, c) * pg.value(0, c);
          m1 += dxh[c];
          m2 += dxh[c] * (*xhat)(r, c);
        }
        m1 /= static_cast<double>(cols);
        m2 /= static_cast<double>(cols);
        for (std::size_t c = 0; c < cols; ++c) gx(r, c) += (*rstd)[r] * (dxh[c] - m1 - (*xhat)(r, c) * m2);
      }
    }
  });
}

Var softmax_rows(const Var& x) {
  Matrix out = x.value();
  kernels::softmax_rows(out.data(), out.rows(), out.cols());
  return make_op(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    Matrix& g = p.ensure_grad();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += self.grad(r, c) * self.value(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += self.value(r, c) * (self.grad(r, c) - dot);
    }
  });
}

Matrix attention_probs(const Matrix& q, const Matrix& k, std::size_t batch, std::size_t tq, std::size_t tk,
                       std::size_t heads, std::span<const std::size_t> key_len) {
  const std::size_t d = q.cols();
  require(d % heads == 0 && k.cols() == d, ErrorKind::kValidation, "attention: head split");
  require(q.rows() == batch * tq && k.rows() == batch * tk, ErrorKind::kValidation, "attention: row count");
  require(key_len.empty() || key_len.size() == batch, ErrorKind::kValidation, "attention: key_len size");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix p(batch * heads * tq, tk);
  const long bh_count = static_cast<long>(batch * heads);
#pragma omp parallel for schedule(static) if (batch * heads * tq * tk * dh > (1u << 15))
  for (long bh = 0; bh < bh_count; ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / heads, h = static_cast<std::size_t>(bh) % heads;
    const std::size_t len = key_len.empty() ? tk : key_len[b];
    for (std::size_t i = 0; i < tq; ++i) {
      double* row = p.data() + (static_cast<std::size_t>(bh) * tq + i) * tk;
      const double* qi = q.data() + (b * tq + i) * d + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        const double* kj = k.data() + (b * tk + j) * d + h * dh;
        double s = 0.0;
        for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
        row[j] = s * sc;
        mx = std::max(mx, row[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
      }
      for (std::size_t j = 0; j < len; ++j) row[j] /= total;
      for (std::size_t j = len; j < tk; ++j) row[j] = 0.0;
    }
  }
  return p;
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t batch, std::size_t tq, std::size_t tk,
              std::size_t heads, std::span<const std::size_t> key_len) {
  require(v.value().same_shape(k.value()), ErrorKind::kValidation, "attention: k/v shape");
  auto probs = std::make_shared<Matrix>(attention_probs(q.value(), k.value(), batch, tq, tk, heads, key_len));
  const std::size_t d = q.cols(), dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out(batch * tq, d);
  const long bh_count = static_cast<long>(batch * heads);
  const Matrix& vv = v.value();
#pragma omp parallel for schedule(static) if (batch * heads * tq * tk * dh > (1u << 15))
  for (long bh = 0; bh < bh_count; ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / heads, h = static_cast<std::size_t>(bh) % heads;
    for (std::size_t i = 0; i < tq; ++i) {
      const double* row = probs->data() + (static_cast<std::size_t>(bh) * tq + i) * tk;
      double* oi = out.data() + (b * tq + i) * d + h * dh;
      for (std::size_t j = 0; j < tk; ++j) {
        const double pj = row[j];
        if (pj == 0.0) continue;
        const double* vj = vv.data() + (b * tk + j) * d + h * dh;
        for (std::size_t e = 0; e < dh; ++e) oi[e] += pj * vj[e];
      }
    }
  }
  return make_op(std::move(out), {q, k, v}, [probs, batch, tq, tk, heads, d, dh, sc](Node& self) {
    Node& pq = parent(self, 0);
    Node& pk = parent(self, 1);
    Node& pv = parent(self, 2);
    Matrix& gq = pq.ensure_grad();
    Matrix& gk = pk.ensure_grad();
    Matrix& gv = pv.ensure_grad();
    const long b_count = static_cast<long>(batch);
    // Parallel over batch items: each writes only its own rows of gq/gk/gv.
#pragma omp parallel for schedule(static) if (batch * heads * tq * tk * dh > (1u << 15))
    for (long bl = 0; bl < b_count; ++bl) {
      const std::size_t b = static_cast<std::size_t>(bl);
      std::vector<double> dp(tk), ds(tk);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < tq; ++i) {
          const double* row = probs->data() + ((b * heads + h) * tq + i) * tk;
          const double* go = self.grad.data() + (b * tq + i) * d + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < tk; ++j) {
            const double* vj = pv.value.data() + (b * tk + j) * d + h * dh;
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += go[e] * vj[e];
            dp[j] = s;
            dot += row[j] * s;
            double* gvj = gv.data() + (b * tk + j) * d + h * dh;
            for (std::size_t e = 0; e < dh; ++e) gvj[e] += row[j] * go[e];
          }
          const double* qi = pq.value.data() + (b * tq + i) * d + h * dh;
          double* gqi = gq.data() + (b * tq + i) * d + h * dh;
          for (std::size_t j = 0; j < tk; ++j) {
            ds[j] = row[j] * (dp[j] - dot) * sc;
            if (ds[j] == 0.0) continue;
            const double* kj = pk.value.data() + (b * tk + j) * d + h * dh;
            double* gkj = gk.data() + (b * tk + j) * d + h * dh;
            for (std::size_t e = 0; e < dh; ++e) {
              gqi[e] += ds[j] * kj[e];
              gkj[e] += ds[j] * qi[e];
            }
          }
        }
      }
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorKind::kValidation, "concat_cols: no parts");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, ErrorKind::kAlignment, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out(r, off + c) = p.value()(r, c);
    off += p.cols();
  }
  return make_op(std::move(out), parts, [](Node& self) {
    std::size_t o = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      if (p.requires_grad) {
        Matrix& g = p.ensure_grad();
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += self.grad(r, o + c);
      }
      o += p.value.cols();
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorKind::kValidation, "concat_rows: no parts");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, ErrorKind::kAlignment, "concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off * cols);
    off += p.rows();
  }
  return make_op(std::move(out), parts, [](Node& self) {
    std::size_t o = 0;
    const std::size_t cols = self.grad.cols();
    for (auto& pp : self.parents) {
      Node& p = *pp;
      if (p.requires_grad) {
        Matrix& g = p.ensure_grad();
        const double* src = self.grad.data() + o * cols;
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += src[i];
      }
      o += p.value.rows();
    }
  });
}

Var slice_cols(const Var& x, std::size_t c0, std::size_t c1) {
  require(c0 <= c1 && c1 <= x.cols(), ErrorKind::kValidation, "slice_cols: range");
  Matrix out(x.rows(), c1 - c0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = c0; c < c1; ++c) out(r, c - c0) = x.value()(r, c);
  return make_op(std::move(out), {x}, [c0](Node& self) {
    Matrix& g = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < self.grad.rows(); ++r)
      for (std::size_t c = 0; c < self.grad.cols(); ++c) g(r, c0 + c) += self.grad(r, c);
  });
}

Var slice_rows(const Var& x, std::size_t r0, std::size_t r1) {
  require(r0 <= r1 && r1 <= x.rows(), ErrorKind::kValidation, "slice_rows: range");
  const std::size_t cols = x.cols();
  Matrix out(r1 - r0, cols);
  std::copy(x.value().data() + r0 * cols, x.value().data() + r1 * cols, out.data());
  return make_op(std::move(out), {x}, [r0, cols](Node& self) {
    Matrix& g = parent(self, 0).ensure_grad();
    double* dst = g.data() + r0 * cols;
    for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad.data()[i];
  });
}

Var repeat_rows(const Var& x, std::size_t factor) {
  const std::size_t cols = x.cols();
  Matrix out(x.rows() * factor, cols);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = x.value()(r / factor, c);
  return make_op(std::move(out), {x}, [factor](Node& self) {
    Matrix& g = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < self.grad.rows(); ++r)
      for (std::size_t c = 0; c < self.grad.cols(); ++c) g(r / factor, c) += self.grad(r, c);
  });
}

Var reshape(const Var& x, std::size_t rows, std::size_t cols) {
  require(rows * cols == x.value().size(), ErrorKind::kValidation, "reshape: element count changes");
  return make_op(Matrix(rows, cols, x.value().storage()), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    Matrix& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += self.grad.data()[i];
  });
}

Var broadcast_rows(const Var& row, std::size_t n) {
  require(row.rows() == 1, ErrorKind::kValidation, "broadcast_rows: expects a row");
  return repeat_rows(row, n);
}

Var mean_row_groups(const Var& x, std::size_t factor) {
  require(factor > 0 && x.rows() % factor == 0, ErrorKind::kAlignment, "mean_row_groups: rows not divisible");
  const std::size_t cols = x.cols();
  Matrix out(x.rows() / factor, cols);
  const double inv = 1.0 / static_cast<double>(factor);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out(r / factor, c) += x.value()(r, c) * inv;
  return make_op(std::move(out), {x}, [factor, inv](Node& self) {
    Matrix& g = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += self.grad(r / factor, c) * inv;
  });
}

Var gather_rows(const Var& table, std::span<const std::size_t> index) {
  const std::size_t cols = table.cols();
  Matrix out(index.size(), cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < table.rows(), ErrorKind::kValidation, "gather_rows: index out of range");
    std::copy_n(table.value().data() + index[i] * cols, cols, out.data() + i * cols);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op(std::move(out), {table}, [idx = std::move(idx), cols](Node& self) {
    Matrix& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) g(idx[i], c) += self.grad(i, c);
  });
}

Var conv1d(const Var& x, const Var& weight, const Var& bias, std::size_t batch, std::size_t kernel,
           std::size_t stride, std::size_t pad) {
  const std::size_t cin = x.cols(), cout = weight.cols();
  require(x.rows() % batch == 0, ErrorKind::kAlignment, "conv1d: rows not divisible by batch");
  require(weight.rows() == kernel * cin, ErrorKind::kValidation, "conv1d: weight shape");
  require(bias.rows() == 1 && bias.cols() == cout, ErrorKind::kValidation, "conv1d: bias shape");
  kernels::ConvGeometry g{batch, x.rows() / batch, cin, kernel, stride, pad};
  require(g.seq_in + 2 * pad >= kernel, ErrorKind::kValidation, "conv1d: sequence shorter than kernel");
  const std::size_t n_out = batch * g.seq_out();
  auto cols = std::make_shared<Matrix>(n_out, g.col_width());
  kernels::im2col(x.value().data(), cols->data(), g);
  Matrix out(n_out, cout);
  kernels::gemm_nn(cols->data(), weight.value().data(), out.data(), n_out, g.col_width(), cout, false);
  for (std::size_t r = 0; r < n_out; ++r)
    for (std::size_t c = 0; c < cout; ++c) out(r, c) += bias.value()(0, c);
  return make_op(std::move(out), {x, weight, bias}, [cols, g, n_out, cout](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    Node& pb = parent(self, 2);
    const std::size_t width = g.col_width();
    if (pw.requires_grad) kernels::gemm_tn(cols->data(), self.grad.data(), pw.ensure_grad().data(), width, n_out, cout, true);
    if (pb.requires_grad) {
      Matrix& gb = pb.ensure_grad();
      for (std::size_t r = 0; r < n_out; ++r)
        for (std::size_t c = 0; c < cout; ++c) gb(0, c) += self.grad(r, c);
    }
    if (px.requires_grad) {
      Matrix dcols(n_out, width);
      kernels::gemm_nt(self.grad.data(), pw.value.data(), dcols.data(), n_out, cout, width, false);
      kernels::col2im(dcols.data(), px.ensure_grad().data(), g);
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().storage()) s += v;
  return make_op(Matrix(1, 1, s), {x}, [](Node& self) {
    Matrix& g = parent(self, 0).ensure_grad();
    const double gs = self.grad.data()[0];
    for (double& v : g.storage()) v += gs;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var mse(const Var& a, const Var& b) {
  check_same(a.value(), b.value(), "mse");
  const std::size_t n = a.value().size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value().data()[i] - b.value().data()[i];
    s += d * d;
  }
  return make_op(Matrix(1, 1, s / static_cast<double>(n)), {a, b}, [n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const double k = 2.0 * self.grad.data()[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = k * (pa.value.data()[i] - pb.value.data()[i]);
      if (pa.requires_grad) pa.ensure_grad().data()[i] += d;
      if (pb.requires_grad) pb.ensure_grad().data()[i] -= d;
    }
  });
}

Var gaussian_kl(const Var& mu, const Var& logvar) {
  check_same(mu.value(), logvar.value(), "gaussian_kl");
  const std::size_t n = mu.value().size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = mu.value().data()[i], lv = logvar.value().data()[i];
    s += 0.5 * (m * m + std::exp(lv) - lv - 1.0);
  }
  return make_op(Matrix(1, 1, s / static_cast<double>(n)), {mu, logvar}, [n](Node& self) {
    Node& pm = parent(self, 0);
    Node& pl = parent(self, 1);
    const double k = self.grad.data()[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (pm.requires_grad) pm.ensure_grad().data()[i] += k * pm.value.data()[i];
      if (pl.requires_grad) pl.ensure_grad().data()[i] += k * 0.5 * (std::exp(pl.value.data()[i]) - 1.0);
    }
  });
}

Var bce_with_logits(const Var& logits, const Matrix& targets) {
  check_same(logits.value(), targets, "bce_with_logits");
  const std::size_t n = targets.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits.value().data()[i], y = targets.data()[i];
    // log(1 + e^x) - x*y, computed stably
    s += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Matrix t = targets;
  return make_op(Matrix(1, 1, s / static_cast<double>(n)), {logits}, [t = std::move(t), n](Node& self) {
    Node& p = parent(self, 0);
    Matrix& g = p.ensure_grad();
    const double k = self.grad.data()[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double sgm = 1.0 / (1.0 + std::exp(-p.value.data()[i]));
      g.data()[i] += k * (sgm - t.data()[i]);
    }
  });
}

Var weighted_mse(const Var& a, const Matrix& b, const Matrix& w) {
  check_same(a.value(), b, "weighted_mse");
  check_same(a.value(), w, "weighted_mse");
  const std::size_t n = b.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value().data()[i] - b.data()[i];
    s += w.data()[i] * d * d;
  }
  Matrix bb = b, ww = w;
  return make_op(Matrix(1, 1, s / static_cast<double>(n)), {a},
                 [bb = std::move(bb), ww = std::move(ww), n](Node& self) {
                   Node& p = parent(self, 0);
                   Matrix& g = p.ensure_grad();
                   const double k = 2.0 * self.grad.data()[0] / static_cast<double>(n);
                   for (std::size_t i = 0; i < n; ++i)
                     g.data()[i] += k * ww.data()[i] * (p.value.data()[i] - bb.data()[i]);
                 });
}

}  // namespace ensemble::nn
