#include "cvaet/autodiff.hpp"

#include <cmath>
#include <string>

#include "cvaet/error.hpp"

namespace cvaet::ad {

namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) fail(ErrorKind::internal, "operands live on different tapes");
}

void check_shape(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (ok) return;
  fail(ErrorKind::invalid_argument,
       std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
           std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
           std::to_string(b.cols()) + ")");
}

// Numerically stable row-wise log-softmax.
Matrix log_softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

}  // namespace

// ---- tape ------------------------------------------------------------------

Var Tape::constant(Matrix value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(const Parameter& param, int index) {
  if (auto it = param_leaves_.find(&param); it != param_leaves_.end()) {
    return Var(this, it->second);
  }
  Node& n = nodes_.emplace_back();
  n.ref = &param.value;
  n.requires_grad = record_;
  n.param_index = index;
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_leaves_.emplace(&param, id);
  return Var(this, id);
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
  return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
              std::move(backward));
}

Var Tape::push(Matrix value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  if (record_) {
    for (const Var& v : inputs) {
      if (v.valid() && v.tape() != this) fail(ErrorKind::internal, "operand from a foreign tape");
      needs = needs || requires_grad(v);
    }
  }
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    const Matrix& v = value(id);
    n.grad = Matrix::Zero(v.rows(), v.cols());
    n.has_grad = true;
  }
  return n.grad;
}

const Matrix* Tape::grad_if_any(int id) const {
  const Node& n = nodes_[id];
  return n.has_grad ? &n.grad : nullptr;
}

void Tape::backward(std::span<const std::pair<Var, double>> seeds) {
  if (!record_) fail(ErrorKind::internal, "backward on a non-recording tape");
  int last = -1;
  for (const auto& [v, w] : seeds) {
    if (!v.valid() || !requires_grad(v)) continue;
    if (v.rows() != 1 || v.cols() != 1) fail(ErrorKind::internal, "backward root must be scalar");
    grad(v.id())(0, 0) += w;
    last = std::max(last, v.id());
  }
  for (int id = last; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad, value(id));
  }
}

void Tape::backward(Var root, double seed) {
  const std::pair<Var, double> s{root, seed};
  backward(std::span<const std::pair<Var, double>>(&s, 1));
}

void Tape::for_each_parameter_grad(
    const std::function<void(int, const Matrix&)>& fn) const {
  for (const auto& [param, id] : param_leaves_) {
    const Node& n = nodes_[id];
    if (n.has_grad) fn(n.param_index, n.grad);
  }
}

// ---- structural --------------------------------------------------------------

Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& t = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) {
      fail(ErrorKind::invalid_argument,
           "embedding lookup: id " + std::to_string(ids[i]) + " outside table of " +
               std::to_string(t.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape()->push(std::move(out), {table},
                            [table, idx = std::move(idx)](Tape& tp, const Matrix& g, const Matrix&) {
                              Matrix& gt = tp.grad(table.id());
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                              }
                            });
}

Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
  const Matrix& v = x.value();
  if (start < 0 || count < 0 || start + count > v.rows()) {
    fail(ErrorKind::invalid_argument, "slice_rows out of range");
  }
  return x.tape()->push(v.middleRows(start, count), {x},
                        [x, start, count](Tape& tp, const Matrix& g, const Matrix&) {
                          tp.grad(x.id()).middleRows(start, count) += g;
                        });
}

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  const Matrix& v = x.value();
  if (start < 0 || count < 0 || start + count > v.cols()) {
    fail(ErrorKind::invalid_argument, "slice_cols out of range");
  }
  return x.tape()->push(v.middleCols(start, count), {x},
                        [x, start, count](Tape& tp, const Matrix& g, const Matrix&) {
                          tp.grad(x.id()).middleCols(start, count) += g;
                        });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::invalid_argument, "concat_rows of nothing");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    check_shape(p.cols() == cols, "concat_rows", parts[0].value(), p.value());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape()->push(std::move(out), parts,
                               [ps](Tape& tp, const Matrix& g, const Matrix&) {
                                 Eigen::Index off = 0;
                                 for (const Var& p : ps) {
                                   const Eigen::Index r = p.rows();
                                   tp.accumulate(p, g.middleRows(off, r));
                                   off += r;
                                 }
                               });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::invalid_argument, "concat_cols of nothing");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    check_shape(p.rows() == rows, "concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].tape()->push(std::move(out), parts,
                               [ps](Tape& tp, const Matrix& g, const Matrix&) {
                                 Eigen::Index off = 0;
                                 for (const Var& p : ps) {
                                   const Eigen::Index c = p.cols();
                                   tp.accumulate(p, g.middleCols(off, c));
                                   off += c;
                                 }
                               });
}

Var reshape(Var x, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& v = x.value();
  if (rows * cols != v.size()) fail(ErrorKind::invalid_argument, "reshape changes element count");
  Matrix out = Eigen::Map<const Matrix>(v.data(), rows, cols);
  const Eigen::Index r0 = v.rows(), c0 = v.cols();
  return x.tape()->push(std::move(out), {x}, [x, r0, c0](Tape& tp, const Matrix& g, const Matrix&) {
    tp.grad(x.id()) += Eigen::Map<const Matrix>(g.data(), r0, c0);
  });
}

// ---- arithmetic ----------------------------------------------------------------

Var add(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", a.value(), b.value());
  return a.tape()->push(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub", a.value(), b.value());
  return a.tape()->push(a.value() - b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard", a.value(), b.value());
  return a.tape()->push(a.value().cwiseProduct(b.value()), {a, b},
                        [a, b](Tape& tp, const Matrix& g, const Matrix&) {
                          tp.accumulate(a, g.cwiseProduct(b.value()));
                          tp.accumulate(b, g.cwiseProduct(a.value()));
                        });
}

Var scale(Var a, double factor) {
  return a.tape()->push(a.value() * factor, {a}, [a, factor](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate(a, g * factor);
  });
}

Var add_row_broadcast(Var x, Var row) {
  check_same_tape(x, row);
  check_shape(row.rows() == 1 && row.cols() == x.cols(), "add_row_broadcast", x.value(), row.value());
  Matrix out = x.value().rowwise() + row.value().row(0);
  return x.tape()->push(std::move(out), {x, row}, [x, row](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate(x, g);
    tp.accumulate(row, g.colwise().sum());
  });
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.cols() == b.rows(), "matmul", a.value(), b.value());
  Matrix out = a.value() * b.value();
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate(a, g * b.value().transpose());
    tp.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.cols() == b.cols(), "matmul_nt", a.value(), b.value());
  Matrix out = a.value() * b.value().transpose();
  return a.tape()->push(std::move(out), {a, b}, [a, b](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate(a, g * b.value());
    tp.accumulate(b, g.transpose() * a.value());
  });
}

Var linear(Var x, Var w, Var bias) {
  check_same_tape(x, w);
  check_shape(x.cols() == w.rows(), "linear", x.value(), w.value());
  Matrix out = x.value() * w.value();
  if (bias.valid()) {
    check_shape(bias.rows() == 1 && bias.cols() == w.cols(), "linear bias", w.value(), bias.value());
    out.rowwise() += bias.value().row(0);
    return x.tape()->push(std::move(out), {x, w, bias},
                          [x, w, bias](Tape& tp, const Matrix& g, const Matrix&) {
                            tp.accumulate(x, g * w.value().transpose());
                            tp.accumulate(w, x.value().transpose() * g);
                            tp.accumulate(bias, g.colwise().sum());
                          });
  }
  return x.tape()->push(std::move(out), {x, w}, [x, w](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate(x, g * w.value().transpose());
    tp.accumulate(w, x.value().transpose() * g);
  });
}

Var sum_all(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape()->push(std::move(out), {x}, [x](Tape& tp, const Matrix& g, const Matrix&) {
    if (!tp.requires_grad(x)) return;
    tp.grad(x.id()).array() += g(0, 0);
  });
}

Var tanh(Var x) {
  Matrix out = x.value().array().tanh().matrix();
  return x.tape()->push(std::move(out), {x}, [x](Tape& tp, const Matrix& g, const Matrix& y) {
    tp.accumulate(x, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var relu(Var x) {
  Matrix out = x.value().cwiseMax(0.0);
  return x.tape()->push(std::move(out), {x}, [x](Tape& tp, const Matrix& g, const Matrix& y) {
    tp.accumulate(x, (g.array() * (y.array() > 0.0).cast<double>()).matrix());
  });
}

Var exp(Var x) {
  Matrix out = x.value().array().exp().matrix();
  return x.tape()->push(std::move(out), {x}, [x](Tape& tp, const Matrix& g, const Matrix& y) {
    tp.accumulate(x, g.cwiseProduct(y));
  });
}

Var dropout(Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(x.rows(), x.cols());
  const double inv = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? inv : 0.0;
  Matrix out = x.value().cwiseProduct(mask);
  return x.tape()->push(std::move(out), {x},
                        [x, mask = std::move(mask)](Tape& tp, const Matrix& g, const Matrix&) {
                          tp.accumulate(x, g.cwiseProduct(mask));
                        });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& v = x.value();
  check_shape(gamma.rows() == 1 && gamma.cols() == v.cols(), "layer_norm gamma", v, gamma.value());
  check_shape(beta.rows() == 1 && beta.cols() == v.cols(), "layer_norm beta", v, beta.value());
  const Eigen::Index n = v.rows(), d = v.cols();
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = v.row(r).mean();
    const double var = (v.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return x.tape()->push(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
        tp.accumulate(beta, g.colwise().sum());
        if (!tp.requires_grad(x)) return;
        const Matrix gx_hat = (g.array().rowwise() * gamma.value().row(0).array()).matrix();
        Matrix& gx = tp.grad(x.id());
        for (Eigen::Index r = 0; r < gx_hat.rows(); ++r) {
          const double m1 = gx_hat.row(r).mean();
          const double m2 = gx_hat.row(r).cwiseProduct(xhat.row(r)).mean();
          gx.row(r) += inv_std(r) * (gx_hat.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
        }
      });
}

namespace {

void softmax_inplace_rows(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    // Eigen's vectorised exp clamps its argument, so exp(-1e9) would come out
    // as a denormal; below -745 the true double result is 0.
    const Eigen::ArrayXd shifted = (m.row(r).array() - mx).transpose();
    m.row(r) = (shifted < -745.0).select(0.0, shifted.exp()).transpose();
    m.row(r) /= m.row(r).sum();
  }
}

Matrix softmax_backward(const Matrix& y, const Matrix& g) {
  Matrix out(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double dot = y.row(r).dot(g.row(r));
    out.row(r) = y.row(r).array() * (g.row(r).array() - dot);
  }
  return out;
}

}  // namespace

Var softmax_rows(Var x, const Matrix* additive_mask) {
  Matrix out = x.value();
  if (additive_mask != nullptr) {
    check_shape(additive_mask->rows() == out.rows() && additive_mask->cols() == out.cols(),
                "softmax mask", out, *additive_mask);
    out += *additive_mask;
  }
  softmax_inplace_rows(out);
  return x.tape()->push(std::move(out), {x}, [x](Tape& tp, const Matrix& g, const Matrix& y) {
    tp.accumulate(x, softmax_backward(y, g));
  });
}

Var multi_head_attention(Var q, Var k, Var v, int heads, const Matrix* additive_mask,
                         std::vector<Matrix>* probs_out) {
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  check_shape(Q.cols() == K.cols() && K.cols() == V.cols() && K.rows() == V.rows(),
              "multi_head_attention", Q, K);
  if (heads <= 0 || Q.cols() % heads != 0) {
    fail(ErrorKind::invalid_argument, "model width must be divisible by the head count");
  }
  if (additive_mask != nullptr) {
    check_shape(additive_mask->rows() == Q.rows() && additive_mask->cols() == K.rows(),
                "attention mask", Q, *additive_mask);
  }
  const Eigen::Index dh = Q.cols() / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix out(Q.rows(), Q.cols());
  for (int h = 0; h < heads; ++h) {
    Matrix scores = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * s;
    if (additive_mask != nullptr) scores += *additive_mask;
    softmax_inplace_rows(scores);
    out.middleCols(h * dh, dh).noalias() = scores * V.middleCols(h * dh, dh);
    probs[static_cast<std::size_t>(h)] = std::move(scores);
  }
  if (probs_out != nullptr) *probs_out = probs;
  return q.tape()->push(
      std::move(out), {q, k, v},
      [q, k, v, heads, dh, s, probs = std::move(probs)](Tape& tp, const Matrix& g, const Matrix&) {
        const Matrix& Qv = q.value();
        const Matrix& Kv = k.value();
        const Matrix& Vv = v.value();
        const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k), gv = tp.requires_grad(v);
        for (int h = 0; h < heads; ++h) {
          const Matrix& P = probs[static_cast<std::size_t>(h)];
          const auto go = g.middleCols(h * dh, dh);
          if (gv) tp.grad(v.id()).middleCols(h * dh, dh).noalias() += P.transpose() * go;
          if (!gq && !gk) continue;
          const Matrix gp = go * Vv.middleCols(h * dh, dh).transpose();
          const Matrix gs = softmax_backward(P, gp) * s;
          if (gq) tp.grad(q.id()).middleCols(h * dh, dh).noalias() += gs * Kv.middleCols(h * dh, dh);
          if (gk) tp.grad(k.id()).middleCols(h * dh, dh).noalias() += gs.transpose() * Qv.middleCols(h * dh, dh);
        }
      });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Matrix& l = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != l.rows()) {
    fail(ErrorKind::invalid_argument, "cross_entropy: one target per row required");
  }
  Matrix logp = log_softmax_rows(l);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < l.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    if (t >= l.cols()) fail(ErrorKind::invalid_argument, "cross_entropy: target outside vocabulary");
    loss -= logp(r, t);
  }
  Matrix out(1, 1);
  out(0, 0) = loss;
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape()->push(
      std::move(out), {logits},
      [logits, tg = std::move(tg), logp = std::move(logp)](Tape& tp, const Matrix& g, const Matrix&) {
        if (!tp.requires_grad(logits)) return;
        Matrix& gl = tp.grad(logits.id());
        const double w = g(0, 0);
        for (Eigen::Index r = 0; r < logp.rows(); ++r) {
          const int t = tg[static_cast<std::size_t>(r)];
          if (t < 0) continue;
          gl.row(r) += w * logp.row(r).array().exp().matrix();
          gl(r, t) -= w;
        }
      });
}

Var bag_of_words_nll(Var logits, std::span<const int> targets) {
  const Matrix& l = logits.value();
  if (l.rows() != 1) fail(ErrorKind::invalid_argument, "bag_of_words_nll expects a single row");
  Matrix logp = log_softmax_rows(l);
  double loss = 0.0;
  Eigen::RowVectorXd counts = Eigen::RowVectorXd::Zero(l.cols());
  for (int t : targets) {
    if (t < 0 || t >= l.cols()) fail(ErrorKind::invalid_argument, "bag_of_words_nll: target outside vocabulary");
    loss -= logp(0, t);
    counts(t) += 1.0;
  }
  Matrix out(1, 1);
  out(0, 0) = loss;
  const double total = static_cast<double>(targets.size());
  return logits.tape()->push(
      std::move(out), {logits},
      [logits, logp = std::move(logp), counts = std::move(counts), total](Tape& tp, const Matrix& g,
                                                                          const Matrix&) {
        tp.accumulate(logits, (g(0, 0) * (total * logp.array().exp().matrix() - counts)));
      });
}

Var gaussian_kl(Var mu_q, Var logvar_q, Var mu_p, Var logvar_p) {
  const Matrix& mq = mu_q.value();
  const Matrix& lq = logvar_q.value();
  const Matrix& mp = mu_p.value();
  const Matrix& lp = logvar_p.value();
  const bool same = mq.size() == lq.size() && mq.size() == mp.size() && mq.size() == lp.size();
  check_shape(same, "gaussian_kl", mq, mp);
  const Eigen::ArrayXXd var_q = lq.array().exp();
  const Eigen::ArrayXXd inv_var_p = (-lp.array()).exp();
  const Eigen::ArrayXXd diff = mq.array() - mp.array();
  const double kl =
      (0.5 * (lp.array() - lq.array()) + 0.5 * (var_q + diff.square()) * inv_var_p - 0.5).sum();
  Matrix out(1, 1);
  out(0, 0) = kl;
  return mu_q.tape()->push(
      std::move(out), {mu_q, logvar_q, mu_p, logvar_p},
      [mu_q, logvar_q, mu_p, logvar_p](Tape& tp, const Matrix& g, const Matrix&) {
        const double w = g(0, 0);
        const Eigen::ArrayXXd vq = logvar_q.value().array().exp();
        const Eigen::ArrayXXd ivp = (-logvar_p.value().array()).exp();
        const Eigen::ArrayXXd d = mu_q.value().array() - mu_p.value().array();
        tp.accumulate(mu_q, (w * d * ivp).matrix());
        tp.accumulate(mu_p, (-w * d * ivp).matrix());
        tp.accumulate(logvar_q, (w * (0.5 * vq * ivp - 0.5)).matrix());
        tp.accumulate(logvar_p, (w * (0.5 - 0.5 * (vq + d.square()) * ivp)).matrix());
      });
}

}  // namespace cvaet::ad
