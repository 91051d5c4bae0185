#pragma once

#include <cmath>
#include <vector>

#include "melo/lora.hpp"
#include "melo/tensor.hpp"
#include "melo/vit.hpp"

namespace melo {

/// Activations kept by a forward pass for the backward pass.
template <typename Scalar>
struct BlockCache {
  Matrix<Scalar> input;  // block input, also norm1 input
  Matrix<Scalar> ln1;
  Matrix<Scalar> q, k, v;
  Matrix<Scalar> q_low, v_low;  // ln1 A^T, present only with an adapter
  std::vector<Matrix<Scalar>> probs;  // per head, tokens x tokens
  Matrix<Scalar> attn;  // concatenated head outputs
  Matrix<Scalar> mid;   // residual after attention, also norm2 input
  Matrix<Scalar> ln2;
  Matrix<Scalar> fc1_pre;
  Matrix<Scalar> fc1_act;
};

template <typename Scalar>
struct ForwardCache {
  Matrix<Scalar> patches;
  std::vector<BlockCache<Scalar>> blocks;
  Vector<Scalar> cls_out;   // CLS row entering the final norm
  Vector<Scalar> features;  // CLS row after the final norm
};

namespace detail {

template <typename Scalar>
Matrix<Scalar> project(const Matrix<Scalar>& x, const Matrix<Scalar>& w, const Vector<Scalar>& bias,
                       const LowRankPair<Scalar>* lora, Scalar scale, Matrix<Scalar>* low_out) {
  Matrix<Scalar> out(x.rows(), w.rows());
  out.noalias() = x * w.transpose();
  if (lora != nullptr) {
    Matrix<Scalar> low(x.rows(), lora->a.rows());
    low.noalias() = x * lora->a.transpose();
    Matrix<Scalar> delta(x.rows(), w.rows());
    delta.noalias() = low * lora->b.transpose();
    out += scale * delta;
    if (low_out != nullptr) *low_out = std::move(low);
  }
  out.rowwise() += bias.transpose();
  return out;
}

template <typename Scalar>
Matrix<Scalar> encoder_block(const Matrix<Scalar>& x, const EncoderBlock<Scalar>& b, const ViTConfig& cfg,
                             const LoraLayer<Scalar>* lora, Scalar scale, BlockCache<Scalar>* cache) {
  const Eigen::Index heads = cfg.heads, hd = cfg.head_dim();
  const Scalar eps = static_cast<Scalar>(kLayerNormEps);
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));

  Matrix<Scalar> h = layernorm<Scalar>(x, b.ln1_gamma, b.ln1_beta, eps);
  Matrix<Scalar> q_low, v_low;
  Matrix<Scalar> q = project<Scalar>(h, b.wq, b.bq, lora ? &lora->query : nullptr, scale, &q_low);
  Matrix<Scalar> k = project<Scalar>(h, b.wk, b.bk, nullptr, scale, nullptr);
  Matrix<Scalar> v = project<Scalar>(h, b.wv, b.bv, lora ? &lora->value : nullptr, scale, &v_low);

  Matrix<Scalar> attn(x.rows(), cfg.dim);
  std::vector<Matrix<Scalar>> probs;
  for (Eigen::Index head = 0; head < heads; ++head) {
    Matrix<Scalar> scores(x.rows(), x.rows());
    scores.noalias() = q.middleCols(head * hd, hd) * k.middleCols(head * hd, hd).transpose();
    scores *= inv_sqrt;
    Matrix<Scalar> p = softmax<Scalar>(scores, 1);
    attn.middleCols(head * hd, hd).noalias() = p * v.middleCols(head * hd, hd);
    if (cache != nullptr) probs.push_back(std::move(p));
  }
  Matrix<Scalar> mid = x;
  mid.noalias() += attn * b.wo.transpose();
  mid.rowwise() += b.bo.transpose();

  Matrix<Scalar> h2 = layernorm<Scalar>(mid, b.ln2_gamma, b.ln2_beta, eps);
  Matrix<Scalar> fc1_pre(x.rows(), b.fc1.rows());
  fc1_pre.noalias() = h2 * b.fc1.transpose();
  fc1_pre.rowwise() += b.fc1_bias.transpose();
  Matrix<Scalar> fc1_act = gelu<Scalar>(fc1_pre);
  Matrix<Scalar> out = mid;
  out.noalias() += fc1_act * b.fc2.transpose();
  out.rowwise() += b.fc2_bias.transpose();

  if (cache != nullptr) {
    *cache = BlockCache<Scalar>{x,     std::move(h),   std::move(q),   std::move(k),
                                std::move(v), std::move(q_low), std::move(v_low), std::move(probs),
                                std::move(attn), std::move(mid), std::move(h2), std::move(fc1_pre),
                                std::move(fc1_act)};
  }
  return out;
}

}  // namespace detail

/// CLS embedding after the final norm. `lora` may be null; when set, its
/// low-rank pairs are added to the query and value projections at runtime.
template <typename Scalar>
Vector<Scalar> forward_features(const Tensor& image, const ViTWeights<Scalar>& w, const LoraAdapter<Scalar>* lora,
                                ForwardCache<Scalar>* cache = nullptr) {
  if (lora != nullptr) check_compatible(w.config, *lora);
  Matrix<Scalar> patches = extract_patches<Scalar>(image, w.config);
  Matrix<Scalar> x = embed_patches(patches, w);
  if (cache != nullptr) {
    cache->patches = std::move(patches);
    cache->blocks.assign(w.blocks.size(), {});
  }
  const Scalar scale = lora ? lora->scale : Scalar(1);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    x = detail::encoder_block<Scalar>(x, w.blocks[l], w.config, lora ? &lora->layers[l] : nullptr, scale,
                                      cache ? &cache->blocks[l] : nullptr);
  }
  Matrix<Scalar> cls = x.topRows(1);
  Vector<Scalar> features =
      layernorm<Scalar>(cls, w.norm_gamma, w.norm_beta, static_cast<Scalar>(kLayerNormEps)).row(0).transpose();
  if (cache != nullptr) {
    cache->cls_out = cls.row(0).transpose();
    cache->features = features;
  }
  return features;
}

template <typename Scalar>
Vector<Scalar> classify(const Vector<Scalar>& features, const ClassifierHead<Scalar>& head) {
  if (head.weight.cols() != features.size()) {
    throw ShapeError("classify: head " + shape_string(head.weight) + " vs features " + shape_string(features));
  }
  Vector<Scalar> logits(head.weight.rows());
  logits.noalias() = head.weight * features;
  logits += head.bias;
  return logits;
}

/// Logits with an explicit head and optional runtime low-rank update.
template <typename Scalar>
Vector<Scalar> forward(const Tensor& image, const ViTWeights<Scalar>& w, const ClassifierHead<Scalar>& head,
                       const LoraAdapter<Scalar>* lora = nullptr) {
  return classify(forward_features(image, w, lora), head);
}

/// Logits for the adapter's task: runtime-add path with the adapter's own head.
template <typename Scalar>
Vector<Scalar> forward(const Tensor& image, const ViTWeights<Scalar>& w, const LoraAdapter<Scalar>& adapter) {
  return forward(image, w, adapter.head, &adapter);
}

}  // namespace melo
