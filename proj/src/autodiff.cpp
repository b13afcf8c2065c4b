// SPDX-License-Identifier: Apache-2.0
#include "dsdi/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dsdi {

namespace {

void require_rank(const Shape& shape, Index rank, const char* op, const char* arg) {
  if (static_cast<Index>(shape.size()) != rank)
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                     ", got " + shape_string(shape));
}

void require_same_tape(const void* a, const void* b, const char* op) {
  if (a != b) throw std::logic_error(std::string(op) + ": operands live on different tapes");
}

// Unfolds one sample [C,H,W] into columns [C*k*k, Ho*Wo].
template <typename Scalar>
void im2col(const Scalar* image, Index channels, Index height, Index width, Index k,
            Index stride, Index pad, Index out_h, Index out_w, Scalar* col) {
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        Scalar* row = col + ((c * k + ki) * k + kj) * out_h * out_w;
        for (Index oh = 0; oh < out_h; ++oh) {
          const Index ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= height) {
            std::fill(row + oh * out_w, row + (oh + 1) * out_w, Scalar(0));
            continue;
          }
          const Scalar* src = image + (c * height + ih) * width;
          for (Index ow = 0; ow < out_w; ++ow) {
            const Index iw = ow * stride - pad + kj;
            row[oh * out_w + ow] = (iw < 0 || iw >= width) ? Scalar(0) : src[iw];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* col, Index channels, Index height, Index width, Index k, Index stride,
            Index pad, Index out_h, Index out_w, Scalar* image) {
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        const Scalar* row = col + ((c * k + ki) * k + kj) * out_h * out_w;
        for (Index oh = 0; oh < out_h; ++oh) {
          const Index ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= height) continue;
          Scalar* dst = image + (c * height + ih) * width;
          for (Index ow = 0; ow < out_w; ++ow) {
            const Index iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < width) dst[iw] += row[oh * out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Tensor<Scalar> value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::leaf(Tensor<Scalar> value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::parameter(Parameter<Scalar>& param, bool trainable) {
  Node node;
  node.value = param.value;
  node.requires_grad = trainable;
  node.param = trainable ? &param : nullptr;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(Tensor<Scalar> value, std::vector<std::size_t> parents,
                                 BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                   [&](std::size_t p) { return nodes_[p].requires_grad; });
  if (node.requires_grad) node.backward = std::move(fn);
  node.parents = std::move(parents);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename Scalar>
const Tensor<Scalar>& Tape<Scalar>::grad(std::size_t i) const {
  if (nodes_[i].grad.empty() && !nodes_[i].value.empty())
    throw std::logic_error("no gradient recorded for node " + std::to_string(i));
  return nodes_[i].grad;
}

template <typename Scalar>
Tensor<Scalar>& Tape<Scalar>::grad_buffer(std::size_t i) {
  auto& node = nodes_[i];
  if (node.grad.shape() != node.value.shape()) node.grad = Tensor<Scalar>(node.value.shape());
  return node.grad;
}

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& out) {
  require_same_tape(&out.tape(), this, "backward");
  if (backward_done_) throw std::logic_error("backward() called twice on the same tape");
  backward_done_ = true;
  if (value(out.index()).size() != 1)
    throw ShapeError("backward() needs a scalar output, got " +
                     shape_string(value(out.index()).shape()));
  if (!nodes_[out.index()].requires_grad) return;

  grad_buffer(out.index())[0] = Scalar(1);
  for (std::size_t i = out.index() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.backward) node.backward(*this, i);
    if (node.param) {
      auto& pg = node.param->grad;
      if (pg.shape() != node.value.shape()) pg = Tensor<Scalar>(node.value.shape());
      pg.array() += node.grad.array();
    }
  }
}

// ---------------------------------------------------------------------------
// Operators

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, Index stride, Index pad) {
  require_same_tape(&input.tape(), &kernel.tape(), "conv2d");
  const auto& xs = input.shape();
  const auto& ws = kernel.shape();
  require_rank(xs, 4, "conv2d", "input");
  require_rank(ws, 4, "conv2d", "kernel");
  const Index batch = xs[0], channels = xs[1], height = xs[2], width = xs[3];
  const Index out_c = ws[0], k = ws[2];
  if (ws[1] != channels)
    throw ShapeError("conv2d: kernel " + shape_string(ws) + " expects " + std::to_string(ws[1]) +
                     " input channels, input " + shape_string(xs) + " has " +
                     std::to_string(channels));
  if (ws[3] != k) throw ShapeError("conv2d: kernel must be square, got " + shape_string(ws));
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d: padding must be >= 0");
  if (k > height + 2 * pad || k > width + 2 * pad)
    throw ShapeError("conv2d: kernel size " + std::to_string(k) + " exceeds padded input " +
                     shape_string(xs));

  const Index out_h = (height + 2 * pad - k) / stride + 1;
  const Index out_w = (width + 2 * pad - k) / stride + 1;
  const Index patch = channels * k * k, pixels = out_h * out_w;

  Tensor<Scalar> out({batch, out_c, out_h, out_w});
  {
    RowMatrix<Scalar> col(patch, pixels);
    ConstMatrixMap<Scalar> w(kernel.value().data(), out_c, patch);
    const Scalar* x = input.value().data();
    for (Index b = 0; b < batch; ++b) {
      im2col(x + b * channels * height * width, channels, height, width, k, stride, pad, out_h,
             out_w, col.data());
      MatrixMap<Scalar> y(out.data() + b * out_c * pixels, out_c, pixels);
      y.noalias() = w * col;
    }
  }

  const std::size_t xi = input.index(), wi = kernel.index();
  return input.tape().record(
      std::move(out), {xi, wi},
      [=](Tape<Scalar>& tape, std::size_t self) {
        const bool need_x = tape.requires_grad(xi), need_w = tape.requires_grad(wi);
        const Scalar* x = tape.value(xi).data();
        const Scalar* dy = tape.grad(self).data();
        ConstMatrixMap<Scalar> w(tape.value(wi).data(), out_c, patch);
        RowMatrix<Scalar> col(patch, pixels);
        RowMatrix<Scalar> dcol(patch, pixels);
        Scalar* dx = need_x ? tape.grad_buffer(xi).data() : nullptr;
        RowMatrix<Scalar> dw;
        if (need_w) dw = RowMatrix<Scalar>::Zero(out_c, patch);
        for (Index b = 0; b < batch; ++b) {
          ConstMatrixMap<Scalar> dyb(dy + b * out_c * pixels, out_c, pixels);
          if (need_w) {
            im2col(x + b * channels * height * width, channels, height, width, k, stride, pad,
                   out_h, out_w, col.data());
            dw.noalias() += dyb * col.transpose();
          }
          if (need_x) {
            dcol.noalias() = w.transpose() * dyb;
            col2im(dcol.data(), channels, height, width, k, stride, pad, out_h, out_w,
                   dx + b * channels * height * width);
          }
        }
        if (need_w) {
          MatrixMap<Scalar> gw(tape.grad_buffer(wi).data(), out_c, patch);
          gw += dw;
        }
      });
}

template <typename Scalar>
Var<Scalar> add_channel_bias(const Var<Scalar>& input, const Var<Scalar>& bias) {
  require_same_tape(&input.tape(), &bias.tape(), "add_channel_bias");
  const auto& xs = input.shape();
  if (xs.size() != 2 && xs.size() != 4)
    throw ShapeError("add_channel_bias: input must be [B,C] or [B,C,H,W], got " +
                     shape_string(xs));
  require_rank(bias.shape(), 1, "add_channel_bias", "bias");
  const Index batch = xs[0], channels = xs[1];
  if (bias.shape()[0] != channels)
    throw ShapeError("add_channel_bias: bias " + shape_string(bias.shape()) +
                     " does not match channels of " + shape_string(xs));
  const Index spatial = xs.size() == 4 ? xs[2] * xs[3] : 1;

  Tensor<Scalar> out = input.value();
  const Scalar* bv = bias.value().data();
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) {
      Scalar* p = out.data() + (b * channels + c) * spatial;
      for (Index s = 0; s < spatial; ++s) p[s] += bv[c];
    }

  const std::size_t xi = input.index(), bi = bias.index();
  return input.tape().record(std::move(out), {xi, bi},
                             [=](Tape<Scalar>& tape, std::size_t self) {
                               const auto& g = tape.grad(self);
                               if (tape.requires_grad(xi)) tape.grad_buffer(xi).array() += g.array();
                               if (tape.requires_grad(bi)) {
                                 Scalar* gb = tape.grad_buffer(bi).data();
                                 for (Index b = 0; b < batch; ++b)
                                   for (Index c = 0; c < channels; ++c) {
                                     const Scalar* p = g.data() + (b * channels + c) * spatial;
                                     Scalar acc = 0;
                                     for (Index s = 0; s < spatial; ++s) acc += p[s];
                                     gb[c] += acc;
                                   }
                               }
                             });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& input) {
  Tensor<Scalar> out = input.value();
  out.array() = out.array().max(Scalar(0));
  const std::size_t xi = input.index();
  return input.tape().record(std::move(out), {xi}, [=](Tape<Scalar>& tape, std::size_t self) {
    const auto& y = tape.value(self);
    tape.grad_buffer(xi).array() +=
        (y.array() > Scalar(0)).select(tape.grad(self).array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> group_norm(const Var<Scalar>& input, Index groups, const Var<Scalar>& gamma,
                       const Var<Scalar>& beta, Scalar eps) {
  require_same_tape(&input.tape(), &gamma.tape(), "group_norm");
  require_same_tape(&input.tape(), &beta.tape(), "group_norm");
  const auto& xs = input.shape();
  require_rank(xs, 4, "group_norm", "input");
  const Index batch = xs[0], channels = xs[1], spatial = xs[2] * xs[3];
  if (groups < 1 || channels % groups != 0)
    throw ConfigError("group_norm: " + std::to_string(channels) +
                      " channels are not divisible into " + std::to_string(groups) + " groups");
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels})
    throw ShapeError("group_norm: gamma/beta must have shape [" + std::to_string(channels) + "]");

  const Index per_group = channels / groups;
  const Index count = per_group * spatial;
  Tensor<Scalar> normalized(xs);
  std::vector<Scalar> inv_std(static_cast<std::size_t>(batch * groups));
  const Scalar* x = input.value().data();
  for (Index b = 0; b < batch; ++b)
    for (Index g = 0; g < groups; ++g) {
      const Index offset = (b * channels + g * per_group) * spatial;
      ConstArrayMap<Scalar> seg(x + offset, count);
      const Scalar mean = seg.mean();
      const Scalar var = (seg - mean).square().mean();
      const Scalar is = Scalar(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(b * groups + g)] = is;
      ArrayMap<Scalar>(normalized.data() + offset, count) = (seg - mean) * is;
    }

  Tensor<Scalar> out(xs);
  const Scalar* gv = gamma.value().data();
  const Scalar* bv = beta.value().data();
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) {
      const Index offset = (b * channels + c) * spatial;
      ArrayMap<Scalar>(out.data() + offset, spatial) =
          ConstArrayMap<Scalar>(normalized.data() + offset, spatial) * gv[c] + bv[c];
    }

  const std::size_t xi = input.index(), gi = gamma.index(), bi = beta.index();
  return input.tape().record(
      std::move(out), {xi, gi, bi},
      [=, normalized = std::move(normalized), inv_std = std::move(inv_std)](Tape<Scalar>& tape,
                                                                            std::size_t self) {
        const Scalar* dy = tape.grad(self).data();
        const Scalar* gv = tape.value(gi).data();
        if (tape.requires_grad(gi) || tape.requires_grad(bi)) {
          const bool need_g = tape.requires_grad(gi), need_b = tape.requires_grad(bi);
          Scalar* dg = need_g ? tape.grad_buffer(gi).data() : nullptr;
          Scalar* db = need_b ? tape.grad_buffer(bi).data() : nullptr;
          for (Index b = 0; b < batch; ++b)
            for (Index c = 0; c < channels; ++c) {
              const Index offset = (b * channels + c) * spatial;
              ConstArrayMap<Scalar> g(dy + offset, spatial);
              if (need_g)
                dg[c] += (g * ConstArrayMap<Scalar>(normalized.data() + offset, spatial)).sum();
              if (need_b) db[c] += g.sum();
            }
        }
        if (!tape.requires_grad(xi)) return;
        Scalar* dx = tape.grad_buffer(xi).data();
        Eigen::Array<Scalar, Eigen::Dynamic, 1> dxhat(count);
        for (Index b = 0; b < batch; ++b)
          for (Index g = 0; g < groups; ++g) {
            const Index offset = (b * channels + g * per_group) * spatial;
            for (Index c = 0; c < per_group; ++c)
              dxhat.segment(c * spatial, spatial) =
                  ConstArrayMap<Scalar>(dy + offset + c * spatial, spatial) *
                  gv[g * per_group + c];
            ConstArrayMap<Scalar> xhat(normalized.data() + offset, count);
            const Scalar mean_d = dxhat.mean();
            const Scalar mean_dx = (dxhat * xhat).mean();
            ArrayMap<Scalar>(dx + offset, count) +=
                inv_std[static_cast<std::size_t>(b * groups + g)] *
                (dxhat - mean_d - xhat * mean_dx);
          }
      });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& input) {
  const auto& xs = input.shape();
  require_rank(xs, 4, "global_avg_pool", "input");
  const Index batch = xs[0], channels = xs[1], spatial = xs[2] * xs[3];
  if (spatial == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor<Scalar> out({batch, channels});
  const Scalar* x = input.value().data();
  for (Index i = 0; i < batch * channels; ++i)
    out[i] = ConstArrayMap<Scalar>(x + i * spatial, spatial).mean();
  const std::size_t xi = input.index();
  return input.tape().record(std::move(out), {xi}, [=](Tape<Scalar>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    Scalar* dx = tape.grad_buffer(xi).data();
    const Scalar inv = Scalar(1) / static_cast<Scalar>(spatial);
    for (Index i = 0; i < batch * channels; ++i)
      ArrayMap<Scalar>(dx + i * spatial, spatial) += g[i] * inv;
  });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_tape(&a.tape(), &b.tape(), "matmul");
  require_rank(a.shape(), 2, "matmul", "a");
  require_rank(b.shape(), 2, "matmul", "b");
  const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  Tensor<Scalar> out({m, n});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(std::move(out), {ai, bi}, [=](Tape<Scalar>& tape, std::size_t self) {
    auto g = tape.grad(self).matrix();
    if (tape.requires_grad(ai))
      tape.grad_buffer(ai).matrix().noalias() += g * tape.value(bi).matrix().transpose();
    if (tape.requires_grad(bi))
      tape.grad_buffer(bi).matrix().noalias() += tape.value(ai).matrix().transpose() * g;
  });
}

template <typename Scalar>
Var<Scalar> concat(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_tape(&a.tape(), &b.tape(), "concat");
  require_rank(a.shape(), 2, "concat", "a");
  require_rank(b.shape(), 2, "concat", "b");
  const Index rows = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  if (b.shape()[0] != rows)
    throw ShapeError("concat: batch sizes differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  Tensor<Scalar> out({rows, p + q});
  out.matrix().leftCols(p) = a.value().matrix();
  out.matrix().rightCols(q) = b.value().matrix();
  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(std::move(out), {ai, bi}, [=](Tape<Scalar>& tape, std::size_t self) {
    auto g = tape.grad(self).matrix();
    if (tape.requires_grad(ai)) tape.grad_buffer(ai).matrix() += g.leftCols(p);
    if (tape.requires_grad(bi)) tape.grad_buffer(bi).matrix() += g.rightCols(q);
  });
}

template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, const Tensor<Scalar>& targets) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy", "logits");
  if (targets.shape() != logits.shape())
    throw ShapeError("softmax_cross_entropy: targets " + shape_string(targets.shape()) +
                     " do not match logits " + shape_string(logits.shape()));
  const Index batch = logits.shape()[0];
  if (batch == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  auto t = targets.matrix();
  for (Index r = 0; r < batch; ++r) {
    if ((t.row(r).array() < Scalar(0)).any() ||
        std::abs(t.row(r).sum() - Scalar(1)) > Scalar(1e-6))
      throw InputError("softmax_cross_entropy: target row " + std::to_string(r) +
                       " is not a probability vector");
  }
  Tensor<Scalar> prob = softmax_rows(logits.value());
  auto z = logits.value().matrix();
  Scalar total = 0;
  for (Index r = 0; r < batch; ++r) {
    const Scalar mx = z.row(r).maxCoeff();
    const Scalar lse = mx + std::log((z.row(r).array() - mx).exp().sum());
    total += (t.row(r).array() * (lse - z.row(r).array())).sum();
  }
  Tensor<Scalar> out({1});
  out[0] = total / static_cast<Scalar>(batch);
  const std::size_t li = logits.index();
  return logits.tape().record(
      std::move(out), {li},
      [=, prob = std::move(prob), targets = targets](Tape<Scalar>& tape, std::size_t self) {
        const Scalar g = tape.grad(self)[0] / static_cast<Scalar>(batch);
        tape.grad_buffer(li).array() += g * (prob.array() - targets.array());
      });
}

template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy", "logits");
  if (static_cast<Index>(labels.size()) != logits.shape()[0])
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_string(logits.shape()));
  return softmax_cross_entropy(logits, one_hot<Scalar>(labels, logits.shape()[1]));
}

template <typename Scalar>
Var<Scalar> gradient_reversal(const Var<Scalar>& input, Scalar lambda) {
  const std::size_t xi = input.index();
  return input.tape().record(input.value(), {xi}, [=](Tape<Scalar>& tape, std::size_t self) {
    tape.grad_buffer(xi).array() -= lambda * tape.grad(self).array();
  });
}

template <typename Scalar>
Var<Scalar> batch_covariance(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_tape(&a.tape(), &b.tape(), "batch_covariance");
  require_rank(a.shape(), 2, "batch_covariance", "a");
  require_rank(b.shape(), 2, "batch_covariance", "b");
  const Index n = a.shape()[0];
  if (b.shape()[0] != n)
    throw ShapeError("batch_covariance: batch sizes differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  if (n < 2)
    throw DegenerateBatchError("batch_covariance: needs at least 2 samples, got " +
                               std::to_string(n));
  RowMatrix<Scalar> ac = a.value().matrix().rowwise() - a.value().matrix().colwise().mean();
  RowMatrix<Scalar> bc = b.value().matrix().rowwise() - b.value().matrix().colwise().mean();
  const Scalar denom = static_cast<Scalar>(n - 1);
  Tensor<Scalar> out({a.shape()[1], b.shape()[1]});
  out.matrix().noalias() = ac.transpose() * bc / denom;
  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(
      std::move(out), {ai, bi},
      [=, ac = std::move(ac), bc = std::move(bc)](Tape<Scalar>& tape, std::size_t self) {
        auto g = tape.grad(self).matrix();
        if (tape.requires_grad(ai)) {
          RowMatrix<Scalar> d = bc * g.transpose() / denom;
          d.rowwise() -= d.colwise().mean();
          tape.grad_buffer(ai).matrix() += d;
        }
        if (tape.requires_grad(bi)) {
          RowMatrix<Scalar> d = ac * g / denom;
          d.rowwise() -= d.colwise().mean();
          tape.grad_buffer(bi).matrix() += d;
        }
      });
}

template <typename Scalar>
Var<Scalar> frobenius_norm(const Var<Scalar>& input) {
  Tensor<Scalar> out({1});
  out[0] = std::sqrt(input.value().array().square().sum());
  const std::size_t xi = input.index();
  return input.tape().record(std::move(out), {xi}, [=](Tape<Scalar>& tape, std::size_t self) {
    const Scalar norm = tape.value(self)[0];
    if (norm == Scalar(0)) return;  // subgradient 0 at the origin
    tape.grad_buffer(xi).array() += (tape.grad(self)[0] / norm) * tape.value(xi).array();
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_tape(&a.tape(), &b.tape(), "add");
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  Tensor<Scalar> out = a.value();
  out.array() += b.value().array();
  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(std::move(out), {ai, bi}, [=](Tape<Scalar>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    if (tape.requires_grad(ai)) tape.grad_buffer(ai).array() += g.array();
    if (tape.requires_grad(bi)) tape.grad_buffer(bi).array() += g.array();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& input, Scalar factor) {
  Tensor<Scalar> out = input.value();
  out.array() *= factor;
  const std::size_t xi = input.index();
  return input.tape().record(std::move(out), {xi}, [=](Tape<Scalar>& tape, std::size_t self) {
    tape.grad_buffer(xi).array() += factor * tape.grad(self).array();
  });
}

template <typename Scalar>
Var<Scalar> multiply(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_tape(&a.tape(), &b.tape(), "multiply");
  if (a.shape() != b.shape())
    throw ShapeError("multiply: shapes differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  Tensor<Scalar> out = a.value();
  out.array() *= b.value().array();
  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(std::move(out), {ai, bi}, [=](Tape<Scalar>& tape, std::size_t self) {
    const auto& g = tape.grad(self);
    if (tape.requires_grad(ai)) tape.grad_buffer(ai).array() += g.array() * tape.value(bi).array();
    if (tape.requires_grad(bi)) tape.grad_buffer(bi).array() += g.array() * tape.value(ai).array();
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& input) {
  Tensor<Scalar> out({1});
  out[0] = input.value().array().sum();
  const std::size_t xi = input.index();
  return input.tape().record(std::move(out), {xi}, [=](Tape<Scalar>& tape, std::size_t self) {
    tape.grad_buffer(xi).array() += tape.grad(self)[0];
  });
}

template <typename Scalar>
Var<Scalar> detach(const Var<Scalar>& input) {
  return input.tape().constant(input.value());
}

// ---------------------------------------------------------------------------
// Tensor helpers

template <typename Scalar>
Tensor<Scalar> one_hot(std::span<const int> labels, Index classes) {
  Tensor<Scalar> out({static_cast<Index>(labels.size()), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes)
      throw InputError("label " + std::to_string(labels[i]) + " outside [0," +
                       std::to_string(classes) + ")");
    out[static_cast<Index>(i) * classes + labels[i]] = Scalar(1);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& logits) {
  Tensor<Scalar> out = logits;
  auto m = out.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    m.row(r).array() -= m.row(r).maxCoeff();
    m.row(r).array() = m.row(r).array().exp();
    m.row(r) /= m.row(r).sum();
  }
  return out;
}

template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& matrix) {
  auto m = matrix.matrix();
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Index r = 0; r < m.rows(); ++r) {
    Index best = 0;
    m.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> covariance_matrix(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("covariance_matrix: need [B,P] and [B,Q]");
  if (a.dim(0) < 2) throw DegenerateBatchError("covariance_matrix: needs at least 2 samples");
  RowMatrix<Scalar> ac = a.matrix().rowwise() - a.matrix().colwise().mean();
  RowMatrix<Scalar> bc = b.matrix().rowwise() - b.matrix().colwise().mean();
  return ac.transpose() * bc / static_cast<Scalar>(a.dim(0) - 1);
}

#define DSDI_INSTANTIATE_AUTODIFF(S)                                                          \
  template class Tape<S>;                                                                     \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, Index, Index);                         \
  template Var<S> add_channel_bias(const Var<S>&, const Var<S>&);                             \
  template Var<S> relu(const Var<S>&);                                                        \
  template Var<S> group_norm(const Var<S>&, Index, const Var<S>&, const Var<S>&, S);          \
  template Var<S> global_avg_pool(const Var<S>&);                                             \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                       \
  template Var<S> concat(const Var<S>&, const Var<S>&);                                       \
  template Var<S> softmax_cross_entropy(const Var<S>&, const Tensor<S>&);                     \
  template Var<S> cross_entropy(const Var<S>&, std::span<const int>);                         \
  template Var<S> gradient_reversal(const Var<S>&, S);                                        \
  template Var<S> batch_covariance(const Var<S>&, const Var<S>&);                             \
  template Var<S> frobenius_norm(const Var<S>&);                                              \
  template Var<S> add(const Var<S>&, const Var<S>&);                                          \
  template Var<S> scale(const Var<S>&, S);                                                    \
  template Var<S> multiply(const Var<S>&, const Var<S>&);                                     \
  template Var<S> sum(const Var<S>&);                                                         \
  template Var<S> detach(const Var<S>&);                                                      \
  template Tensor<S> one_hot(std::span<const int>, Index);                                    \
  template Tensor<S> softmax_rows(const Tensor<S>&);                                          \
  template std::vector<int> argmax_rows(const Tensor<S>&);                                    \
  template RowMatrix<S> covariance_matrix(const Tensor<S>&, const Tensor<S>&);

DSDI_INSTANTIATE_AUTODIFF(float)
DSDI_INSTANTIATE_AUTODIFF(double)

}  // namespace dsdi
