// Copyright 2026 The unlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Packed-batch forward pass with an explicit tape, and the matching
// reverse-mode pass over the fixed operator set of the toy transformer
// (affine, GELU, layer norm, causal attention, unembedding head).

#include <cmath>
#include <limits>
#include <vector>

#include "unlab/model.hpp"
#include "unlab/tensor.hpp"

namespace unlab::engine {

using Eigen::Index;

inline constexpr double kLayerNormEps = 1e-5;

template <typename Real>
Real gelu(Real x) {
  constexpr Real c = Real(0.7978845608028654);  // sqrt(2 / pi)
  return Real(0.5) * x * (Real(1) + std::tanh(c * (x + Real(0.044715) * x * x * x)));
}

template <typename Real>
Real gelu_grad(Real x) {
  constexpr Real c = Real(0.7978845608028654);
  const Real inner = c * (x + Real(0.044715) * x * x * x);
  const Real t = std::tanh(inner);
  return Real(0.5) * (Real(1) + t) +
         Real(0.5) * x * (Real(1) - t * t) * c * (Real(1) + Real(3 * 0.044715) * x * x);
}

template <typename Real>
struct LayerNormCache {
  RowMatrix<Real> xhat;
  std::vector<Real> rstd;
};

template <typename Real>
RowMatrix<Real> layer_norm(const RowMatrix<Real>& x, const Tensor<Real>& gain,
                           const Tensor<Real>& bias, LayerNormCache<Real>& cache) {
  const Index n = x.rows();
  const Index d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(static_cast<std::size_t>(n));
  RowMatrix<Real> y(n, d);
  const auto g = gain.row_vector();
  const auto b = bias.row_vector();
  for (Index i = 0; i < n; ++i) {
    const Real mean = x.row(i).mean();
    const Real var = (x.row(i).array() - mean).square().mean();
    const Real rstd = Real(1) / std::sqrt(var + Real(kLayerNormEps));
    cache.rstd[static_cast<std::size_t>(i)] = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
    y.row(i) = cache.xhat.row(i).cwiseProduct(g) + b;
  }
  return y;
}

// Returns dx; accumulates gain/bias gradients when the pointers are set.
template <typename Real>
RowMatrix<Real> layer_norm_backward(const RowMatrix<Real>& dy, const Tensor<Real>& gain,
                                    const LayerNormCache<Real>& cache, RowMatrix<Real>* dgain,
                                    RowMatrix<Real>* dbias) {
  const Index n = dy.rows();
  const auto g = gain.row_vector();
  if (dgain) dgain->row(0) += (dy.cwiseProduct(cache.xhat)).colwise().sum();
  if (dbias) dbias->row(0) += dy.colwise().sum();
  RowMatrix<Real> dx(n, dy.cols());
  for (Index i = 0; i < n; ++i) {
    const RowVector<Real> dxhat = dy.row(i).cwiseProduct(g);
    const Real m1 = dxhat.mean();
    const Real m2 = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
    dx.row(i) = (dxhat.array() - m1 - cache.xhat.row(i).array() * m2) *
                cache.rstd[static_cast<std::size_t>(i)];
  }
  return dx;
}

template <typename Real>
struct LayerCache {
  RowMatrix<Real> x_in, a, q, k, v, o, x_mid, bn, u, g, x_out;
  LayerNormCache<Real> ln1, ln2;
  std::vector<RowMatrix<Real>> probs;  // index seq * heads + head
};

// Readout of one hidden state through the final norm and unembedding.
template <typename Real>
struct HeadCache {
  LayerNormCache<Real> ln;
  RowMatrix<Real> normed;  // 1 x d
  std::vector<Real> logits;
  std::vector<Real> probs;
};

template <typename Real>
struct Tape {
  std::vector<Index> offsets;
  std::vector<Index> lengths;
  std::vector<std::vector<int>> tokens;
  RowMatrix<Real> proj_in, proj_h1, proj_g1, proj_out;
  RowMatrix<Real> x0;
  std::vector<LayerCache<Real>> layers;
  // heads[seq][layer]; only the final layer is populated unless all_layers.
  std::vector<std::vector<HeadCache<Real>>> heads;
  bool all_layers = false;

  std::size_t batch() const { return offsets.size(); }
  Index last_row(std::size_t seq) const { return offsets[seq] + lengths[seq] - 1; }
  const HeadCache<Real>& head(std::size_t seq, std::size_t layer) const {
    return heads[seq][layer];
  }
  const HeadCache<Real>& output(std::size_t seq) const { return heads[seq].back(); }
};

template <typename Real>
void validate_query(const ModelConfig& c, const Query& q) {
  if (static_cast<int>(q.image.size()) != c.image_dim) {
    throw ConfigurationError("image feature length does not match the projector input");
  }
  if (q.tokens.empty()) throw InvalidInput("question must contain at least one token");
  if (c.prefix_len + static_cast<int>(q.tokens.size()) > c.max_seq_len) {
    throw InvalidInput("sequence exceeds max_seq_len");
  }
  for (int t : q.tokens) {
    if (t < 0 || t >= c.vocab_size) throw InvalidInput("token outside vocabulary");
  }
}

template <typename Real>
HeadCache<Real> run_head(const ModelState<Real>& s, const RowMatrix<Real>& hidden) {
  const ParamLayout& L = s.layout();
  HeadCache<Real> h;
  h.normed = layer_norm(hidden, s.params[L.lnf_g], s.params[L.lnf_b], h.ln);
  RowMatrix<Real> z = h.normed * s.params[L.unembed].matrix();
  h.logits.assign(z.data(), z.data() + z.size());
  h.probs = softmax<Real>(h.logits);
  return h;
}

template <typename Real>
Tape<Real> forward(const ModelState<Real>& s, const std::vector<const Query*>& batch,
                   bool all_layers) {
  const ModelConfig& c = s.config;
  const ParamLayout& L = s.layout();
  const Index d = c.width;
  const Index P = c.prefix_len;
  const Index nh = c.heads;
  const Index dh = c.head_dim();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const auto& W = s.params;
  const auto* adapter = s.adapter ? &*s.adapter : nullptr;

  Tape<Real> tp;
  tp.all_layers = all_layers;
  const auto B = static_cast<Index>(batch.size());
  Index rows = 0;
  for (const Query* q : batch) {
    validate_query<Real>(c, *q);
    tp.offsets.push_back(rows);
    tp.lengths.push_back(P + static_cast<Index>(q->tokens.size()));
    tp.tokens.push_back(q->tokens);
    rows += tp.lengths.back();
  }

  // Projector: image -> P prefix embeddings.
  tp.proj_in.resize(B, c.image_dim);
  for (Index b = 0; b < B; ++b) {
    for (Index j = 0; j < c.image_dim; ++j) {
      tp.proj_in(b, j) = static_cast<Real>(batch[static_cast<std::size_t>(b)]->image[static_cast<std::size_t>(j)]);
    }
  }
  tp.proj_h1 = tp.proj_in * W[L.proj_w1].matrix();
  tp.proj_h1.rowwise() += W[L.proj_b1].row_vector();
  tp.proj_g1 = tp.proj_h1.unaryExpr([](Real x) { return gelu(x); });
  tp.proj_out = tp.proj_g1 * W[L.proj_w2].matrix();
  tp.proj_out.rowwise() += W[L.proj_b2].row_vector();
  if (adapter && adapter->target == EditTarget::kProjectorMlp) {
    const RowMatrix<Real> act = tp.proj_g1 * adapter->a.row_vector().transpose();
    tp.proj_out.noalias() += adapter->alpha * act * adapter->b.row_vector();
  }

  tp.x0.resize(rows, d);
  const auto tok = W[L.tok_emb].matrix();
  const auto pos = W[L.pos_emb].matrix();
  for (Index b = 0; b < B; ++b) {
    const Index off = tp.offsets[static_cast<std::size_t>(b)];
    for (Index p = 0; p < P; ++p) {
      tp.x0.row(off + p) = tp.proj_out.block(b, p * d, 1, d) + pos.row(p);
    }
    const auto& toks = batch[static_cast<std::size_t>(b)]->tokens;
    for (std::size_t t = 0; t < toks.size(); ++t) {
      const Index r = P + static_cast<Index>(t);
      tp.x0.row(off + r) = tok.row(toks[t]) + pos.row(r);
    }
  }

  tp.layers.resize(static_cast<std::size_t>(c.layers));
  const RowMatrix<Real>* x = &tp.x0;
  for (int l = 0; l < c.layers; ++l) {
    const auto& Ly = L.layers[static_cast<std::size_t>(l)];
    LayerCache<Real>& lc = tp.layers[static_cast<std::size_t>(l)];
    lc.x_in = *x;
    lc.a = layer_norm(lc.x_in, W[Ly.ln1_g], W[Ly.ln1_b], lc.ln1);
    lc.q = lc.a * W[Ly.wq].matrix();
    lc.q.rowwise() += W[Ly.bq].row_vector();
    lc.k = lc.a * W[Ly.wk].matrix();
    lc.k.rowwise() += W[Ly.bk].row_vector();
    lc.v = lc.a * W[Ly.wv].matrix();
    lc.v.rowwise() += W[Ly.bv].row_vector();
    lc.o.setZero(rows, d);
    lc.probs.resize(static_cast<std::size_t>(B * nh));
    for (Index b = 0; b < B; ++b) {
      const Index off = tp.offsets[static_cast<std::size_t>(b)];
      const Index T = tp.lengths[static_cast<std::size_t>(b)];
      for (Index h = 0; h < nh; ++h) {
        RowMatrix<Real> sc = lc.q.block(off, h * dh, T, dh) *
                             lc.k.block(off, h * dh, T, dh).transpose() * scale;
        for (Index i = 0; i < T; ++i) {
          const Real top = sc.row(i).head(i + 1).maxCoeff();
          Real total = 0;
          for (Index j = 0; j < T; ++j) {
            const Real e = j <= i ? std::exp(sc(i, j) - top) : Real(0);
            sc(i, j) = e;
            total += e;
          }
          sc.row(i) /= total;
        }
        lc.o.block(off, h * dh, T, dh) = sc * lc.v.block(off, h * dh, T, dh);
        lc.probs[static_cast<std::size_t>(b * nh + h)] = std::move(sc);
      }
    }
    lc.x_mid = lc.x_in + lc.o * W[Ly.wo].matrix();
    lc.x_mid.rowwise() += W[Ly.bo].row_vector();
    lc.bn = layer_norm(lc.x_mid, W[Ly.ln2_g], W[Ly.ln2_b], lc.ln2);
    lc.u = lc.bn * W[Ly.up_w].matrix();
    lc.u.rowwise() += W[Ly.up_b].row_vector();
    lc.g = lc.u.unaryExpr([](Real v) { return gelu(v); });
    lc.x_out = lc.x_mid + lc.g * W[Ly.down_w].matrix();
    lc.x_out.rowwise() += W[Ly.down_b].row_vector();
    if (adapter && adapter->target == EditTarget::kLlmMlpDown && adapter->layer == l + 1) {
      const RowMatrix<Real> act = lc.g * adapter->a.row_vector().transpose();
      lc.x_out.noalias() += adapter->alpha * act * adapter->b.row_vector();
    }
    x = &lc.x_out;
  }

  tp.heads.resize(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    auto& hs = tp.heads[static_cast<std::size_t>(b)];
    hs.resize(static_cast<std::size_t>(c.layers));
    const Index r = tp.last_row(static_cast<std::size_t>(b));
    for (int l = all_layers ? 0 : c.layers - 1; l < c.layers; ++l) {
      hs[static_cast<std::size_t>(l)] = run_head(s, RowMatrix<Real>(tp.layers[static_cast<std::size_t>(l)].x_out.row(r)));
    }
  }
  return tp;
}

// Which parameters receive gradients.
struct Trainable {
  std::vector<bool> base;
  bool adapter = false;

  bool any() const {
    return adapter || std::find(base.begin(), base.end(), true) != base.end();
  }
};

template <typename Real>
struct GradBuffers {
  std::vector<RowMatrix<Real>> base;  // empty matrix when not trainable
  RowMatrix<Real> adapter_a, adapter_b;
};

// dlogits[seq][layer] holds the loss gradient w.r.t. that layer's readout
// logits; an empty vector means the readout does not enter the loss.
template <typename Real>
using HeadSeeds = std::vector<std::vector<std::vector<Real>>>;

template <typename Real>
GradBuffers<Real> backward(const ModelState<Real>& s, const Tape<Real>& tp,
                           const HeadSeeds<Real>& seeds, const Trainable& train) {
  const ModelConfig& c = s.config;
  const ParamLayout& L = s.layout();
  const auto& W = s.params;
  const Index d = c.width;
  const Index P = c.prefix_len;
  const Index nh = c.heads;
  const Index dh = c.head_dim();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const auto* adapter = s.adapter ? &*s.adapter : nullptr;
  const bool train_adapter = train.adapter && adapter != nullptr;

  GradBuffers<Real> gb;
  gb.base.resize(L.size());
  for (std::size_t i = 0; i < L.size(); ++i) {
    if (!train.base[i]) continue;
    if (W[i].rank() == 1) {
      gb.base[i].setZero(1, static_cast<Index>(W[i].size()));
    } else {
      gb.base[i].setZero(static_cast<Index>(W[i].rows()), static_cast<Index>(W[i].cols()));
    }
  }
  if (train_adapter) {
    gb.adapter_a.setZero(1, static_cast<Index>(adapter->a.size()));
    gb.adapter_b.setZero(1, static_cast<Index>(adapter->b.size()));
  }
  auto buf = [&](std::size_t i) -> RowMatrix<Real>* {
    return train.base[i] ? &gb.base[i] : nullptr;
  };

  // Blocks below stop_layer (0-based) need no backward pass.
  int stop_layer = c.layers;
  bool need_embed = false;
  for (std::size_t i = 0; i <= L.pos_emb; ++i) need_embed = need_embed || train.base[i];
  for (int l = 0; l < c.layers && stop_layer == c.layers; ++l) {
    const auto& Ly = L.layers[static_cast<std::size_t>(l)];
    for (std::size_t i = Ly.ln1_g; i <= Ly.down_b; ++i) {
      if (train.base[i]) stop_layer = l;
    }
  }
  // The adapter block itself only needs the part above the adapter.
  bool stop_at_adapter = false;
  if (train_adapter) {
    if (adapter->target == EditTarget::kProjectorMlp) {
      need_embed = true;
    } else if (adapter->layer - 1 < stop_layer) {
      stop_layer = adapter->layer - 1;
      stop_at_adapter = true;
    }
  }
  if (need_embed) {
    stop_layer = 0;
    stop_at_adapter = false;
  }

  const Index rows = tp.x0.rows();
  RowMatrix<Real> dx = RowMatrix<Real>::Zero(rows, d);
  const auto U = W[L.unembed].matrix();

  auto inject_head = [&](int l) {
    for (std::size_t b = 0; b < tp.batch(); ++b) {
      const auto& seed = seeds[b][static_cast<std::size_t>(l)];
      if (seed.empty()) continue;
      const HeadCache<Real>& hc = tp.head(b, static_cast<std::size_t>(l));
      const Eigen::Map<const RowMatrix<Real>> dz(seed.data(), 1, static_cast<Index>(seed.size()));
      if (auto* g = buf(L.unembed)) g->noalias() += hc.normed.transpose() * dz;
      const RowMatrix<Real> dn = dz * U.transpose();
      dx.row(tp.last_row(b)) += layer_norm_backward(dn, W[L.lnf_g], hc.ln, buf(L.lnf_g), buf(L.lnf_b));
    }
  };

  auto accumulate_affine = [&](std::size_t w_idx, std::size_t b_idx, const RowMatrix<Real>& in,
                               const RowMatrix<Real>& dout) {
    if (auto* g = buf(w_idx)) g->noalias() += in.transpose() * dout;
    if (auto* g = buf(b_idx)) g->row(0) += dout.colwise().sum();
  };

  for (int l = c.layers - 1; l >= 0; --l) {
    inject_head(l);
    if (l < stop_layer) continue;
    const auto& Ly = L.layers[static_cast<std::size_t>(l)];
    const LayerCache<Real>& lc = tp.layers[static_cast<std::size_t>(l)];

    // x_out = x_mid + G Wdown + bdown (+ adapter)
    const RowMatrix<Real>& dm = dx;
    accumulate_affine(Ly.down_w, Ly.down_b, lc.g, dm);
    if (adapter && adapter->target == EditTarget::kLlmMlpDown && adapter->layer == l + 1) {
      const auto av = adapter->a.row_vector();
      const auto bv = adapter->b.row_vector();
      const RowMatrix<Real> t = dm * bv.transpose();  // N x 1
      if (train_adapter) {
        const RowMatrix<Real> act = lc.g * av.transpose();  // N x 1
        gb.adapter_b.noalias() += adapter->alpha * act.transpose() * dm;
        gb.adapter_a.noalias() += adapter->alpha * t.transpose() * lc.g;
      }
      // Below the adapter only the shared readout still takes gradients.
      if (stop_at_adapter && l == stop_layer) continue;
    }
    RowMatrix<Real> dg = dm * W[Ly.down_w].matrix().transpose();
    if (adapter && adapter->target == EditTarget::kLlmMlpDown && adapter->layer == l + 1) {
      dg.noalias() += adapter->alpha * (dm * adapter->b.row_vector().transpose()) *
                      adapter->a.row_vector();
    }
    const RowMatrix<Real> du = dg.cwiseProduct(lc.u.unaryExpr([](Real v) { return gelu_grad(v); }));
    accumulate_affine(Ly.up_w, Ly.up_b, lc.bn, du);
    const RowMatrix<Real> dbn = du * W[Ly.up_w].matrix().transpose();
    RowMatrix<Real> dxm = dx + layer_norm_backward(dbn, W[Ly.ln2_g], lc.ln2, buf(Ly.ln2_g), buf(Ly.ln2_b));

    // x_mid = x_in + O Wo + bo
    accumulate_affine(Ly.wo, Ly.bo, lc.o, dxm);
    const RowMatrix<Real> dout = dxm * W[Ly.wo].matrix().transpose();
    RowMatrix<Real> dq = RowMatrix<Real>::Zero(rows, d);
    RowMatrix<Real> dk = RowMatrix<Real>::Zero(rows, d);
    RowMatrix<Real> dv = RowMatrix<Real>::Zero(rows, d);
    for (std::size_t b = 0; b < tp.batch(); ++b) {
      const Index off = tp.offsets[b];
      const Index T = tp.lengths[b];
      for (Index h = 0; h < nh; ++h) {
        const RowMatrix<Real>& pr = lc.probs[b * static_cast<std::size_t>(nh) + static_cast<std::size_t>(h)];
        const RowMatrix<Real> doh = dout.block(off, h * dh, T, dh);
        const RowMatrix<Real> dp = doh * lc.v.block(off, h * dh, T, dh).transpose();
        dv.block(off, h * dh, T, dh).noalias() += pr.transpose() * doh;
        RowMatrix<Real> ds = pr.cwiseProduct(dp);
        const Eigen::Matrix<Real, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
        ds -= pr.cwiseProduct(rs.replicate(1, T));
        ds *= scale;
        dq.block(off, h * dh, T, dh).noalias() += ds * lc.k.block(off, h * dh, T, dh);
        dk.block(off, h * dh, T, dh).noalias() += ds.transpose() * lc.q.block(off, h * dh, T, dh);
      }
    }
    accumulate_affine(Ly.wq, Ly.bq, lc.a, dq);
    accumulate_affine(Ly.wk, Ly.bk, lc.a, dk);
    accumulate_affine(Ly.wv, Ly.bv, lc.a, dv);
    RowMatrix<Real> da = dq * W[Ly.wq].matrix().transpose();
    da.noalias() += dk * W[Ly.wk].matrix().transpose();
    da.noalias() += dv * W[Ly.wv].matrix().transpose();
    dx = dxm + layer_norm_backward(da, W[Ly.ln1_g], lc.ln1, buf(Ly.ln1_g), buf(Ly.ln1_b));
  }

  if (!need_embed) return gb;

  // Embeddings and projector.
  for (std::size_t b = 0; b < tp.batch(); ++b) {
    const Index off = tp.offsets[b];
    const Index T = tp.lengths[b];
    if (auto* g = buf(L.pos_emb)) g->topRows(T) += dx.block(off, 0, T, d);
  }
  if (auto* g = buf(L.tok_emb)) {
    for (std::size_t b = 0; b < tp.batch(); ++b) {
      const auto& toks = tp.tokens[b];
      for (std::size_t t = 0; t < toks.size(); ++t) {
        g->row(toks[t]) += dx.row(tp.offsets[b] + P + static_cast<Index>(t));
      }
    }
  }
  RowMatrix<Real> dproj(static_cast<Index>(tp.batch()), P * d);
  for (std::size_t b = 0; b < tp.batch(); ++b) {
    for (Index p = 0; p < P; ++p) {
      dproj.block(static_cast<Index>(b), p * d, 1, d) = dx.row(tp.offsets[b] + p);
    }
  }
  accumulate_affine(L.proj_w2, L.proj_b2, tp.proj_g1, dproj);
  RowMatrix<Real> dg1 = dproj * W[L.proj_w2].matrix().transpose();
  if (adapter && adapter->target == EditTarget::kProjectorMlp) {
    const auto av = adapter->a.row_vector();
    const auto bv = adapter->b.row_vector();
    const RowMatrix<Real> t = dproj * bv.transpose();
    if (train_adapter) {
      const RowMatrix<Real> act = tp.proj_g1 * av.transpose();
      gb.adapter_b.noalias() += adapter->alpha * act.transpose() * dproj;
      gb.adapter_a.noalias() += adapter->alpha * t.transpose() * tp.proj_g1;
    }
    dg1.noalias() += adapter->alpha * t * av;
  }
  const RowMatrix<Real> dh1 = dg1.cwiseProduct(tp.proj_h1.unaryExpr([](Real v) { return gelu_grad(v); }));
  accumulate_affine(L.proj_w1, L.proj_b1, tp.proj_in, dh1);
  return gb;
}

}  // namespace unlab::engine
