#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "melo/tensor.hpp"

namespace melo {

struct ViTConfig {
  std::uint32_t image_size = 224;
  std::uint32_t patch_size = 16;
  std::uint32_t channels = 3;
  std::uint32_t dim = 768;
  std::uint32_t depth = 12;
  std::uint32_t heads = 12;
  // Hidden width of the MLP. Stored directly rather than as a ratio because
  // the giga tier (1664 -> 8192) is not an integral multiple.
  std::uint32_t mlp_dim = 3072;

  std::uint32_t grid() const { return image_size / patch_size; }
  std::uint32_t num_patches() const { return grid() * grid(); }
  std::uint32_t tokens() const { return num_patches() + 1; }
  std::uint32_t head_dim() const { return dim / heads; }
  std::uint32_t patch_dim() const { return channels * patch_size * patch_size; }

  /// Throws std::invalid_argument on a structurally impossible config.
  void validate() const;

  bool operator==(const ViTConfig&) const = default;

  /// vit-base, vit-huge, vit-giga, plus desk-scale vit-micro and vit-mini.
  static ViTConfig preset(std::string_view name);
  static std::vector<std::string> preset_names();
};

std::string to_string(const ViTConfig& cfg);

inline constexpr float kLayerNormEps = 1e-6f;

enum class Projection { Query, Value };

template <typename Scalar>
struct EncoderBlock {
  Vector<Scalar> ln1_gamma, ln1_beta;
  Matrix<Scalar> wq, wk, wv, wo;  // d x d, applied as W x
  Vector<Scalar> bq, bk, bv, bo;
  Vector<Scalar> ln2_gamma, ln2_beta;
  Matrix<Scalar> fc1;  // mlp_dim x d
  Vector<Scalar> fc1_bias;
  Matrix<Scalar> fc2;  // d x mlp_dim
  Vector<Scalar> fc2_bias;
};

template <typename Scalar>
struct ClassifierHead {
  Matrix<Scalar> weight;  // num_classes x d
  Vector<Scalar> bias;

  std::size_t num_classes() const { return static_cast<std::size_t>(bias.size()); }

  template <typename To>
  ClassifierHead<To> cast() const {
    return {weight.template cast<To>(), bias.template cast<To>()};
  }
  bool operator==(const ClassifierHead&) const = default;
};

/// Frozen backbone parameters. Treated as immutable once built; the only
/// code that writes into one is the full fine-tune baseline, on its own copy.
template <typename Scalar>
struct ViTWeights {
  ViTConfig config;
  Matrix<Scalar> patch_weight;  // d x patch_dim
  Vector<Scalar> patch_bias;
  Vector<Scalar> cls_token;
  Matrix<Scalar> pos_embed;  // tokens x d
  std::vector<EncoderBlock<Scalar>> blocks;
  Vector<Scalar> norm_gamma, norm_beta;

  const Matrix<Scalar>& projection(std::size_t layer, Projection kind) const {
    const auto& b = blocks.at(layer);
    return kind == Projection::Query ? b.wq : b.wv;
  }
  Matrix<Scalar>& projection(std::size_t layer, Projection kind) {
    auto& b = blocks.at(layer);
    return kind == Projection::Query ? b.wq : b.wv;
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_parameter(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  template <typename To>
  ViTWeights<To> cast() const {
    ViTWeights<To> out;
    out.config = config;
    out.blocks.resize(blocks.size());
    // Both visits enumerate parameters in the same order.
    std::vector<std::tuple<Eigen::Index, Eigen::Index, const Scalar*>> src;
    for_each_parameter([&](const std::string&, const auto& t) { src.emplace_back(t.rows(), t.cols(), t.data()); });
    std::size_t i = 0;
    out.for_each_parameter([&](const std::string&, auto& t) {
      const auto [rows, cols, data] = src[i++];
      t.resize(rows, cols);
      for (Eigen::Index k = 0; k < rows * cols; ++k) t.data()[k] = static_cast<To>(data[k]);
    });
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& w, F& f) {
    f("patch_embed.weight", w.patch_weight);
    f("patch_embed.bias", w.patch_bias);
    f("cls_token", w.cls_token);
    f("pos_embed", w.pos_embed);
    for (std::size_t i = 0; i < w.blocks.size(); ++i) {
      auto& b = w.blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      f(p + "norm1.weight", b.ln1_gamma);
      f(p + "norm1.bias", b.ln1_beta);
      f(p + "attn.q.weight", b.wq);
      f(p + "attn.q.bias", b.bq);
      f(p + "attn.k.weight", b.wk);
      f(p + "attn.k.bias", b.bk);
      f(p + "attn.v.weight", b.wv);
      f(p + "attn.v.bias", b.bv);
      f(p + "attn.proj.weight", b.wo);
      f(p + "attn.proj.bias", b.bo);
      f(p + "norm2.weight", b.ln2_gamma);
      f(p + "norm2.bias", b.ln2_beta);
      f(p + "mlp.fc1.weight", b.fc1);
      f(p + "mlp.fc1.bias", b.fc1_bias);
      f(p + "mlp.fc2.weight", b.fc2);
      f(p + "mlp.fc2.bias", b.fc2_bias);
    }
    f("norm.weight", w.norm_gamma);
    f("norm.bias", w.norm_beta);
  }
};

/// Parameter count of a backbone built from cfg, without allocating it.
std::size_t backbone_parameter_count(const ViTConfig& cfg);

/// Every weight matrix ~ N(0, stddev), biases zero, layernorm gamma one.
ViTWeights<float> init_backbone(const ViTConfig& cfg, std::uint64_t seed, float stddev = 0.02f);

/// All-zero backbone with unit layernorm gammas.
ViTWeights<float> zero_backbone(const ViTConfig& cfg);

ClassifierHead<float> init_head(const ViTConfig& cfg, std::size_t num_classes, std::mt19937_64& rng,
                                float stddev = 0.02f);

/// Image {C, H, W} to an N x (C * p * p) matrix, one flattened patch per row
/// in row-major grid order.
template <typename Scalar>
Matrix<Scalar> extract_patches(const Tensor& image, const ViTConfig& cfg) {
  const std::vector<std::size_t> expected{cfg.channels, cfg.image_size, cfg.image_size};
  if (image.shape() != expected) {
    throw ShapeError("patchify_embed: image shape " + shape_string(image.shape()) + " but config expects " +
                     shape_string(expected));
  }
  const std::size_t p = cfg.patch_size, side = cfg.image_size, g = cfg.grid();
  Matrix<Scalar> patches(cfg.num_patches(), cfg.patch_dim());
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      const auto row = static_cast<Eigen::Index>(gy * g + gx);
      Eigen::Index col = 0;
      for (std::size_t c = 0; c < cfg.channels; ++c) {
        for (std::size_t py = 0; py < p; ++py) {
          for (std::size_t px = 0; px < p; ++px) {
            patches(row, col++) = static_cast<Scalar>(image[(c * side + gy * p + py) * side + gx * p + px]);
          }
        }
      }
    }
  }
  return patches;
}

template <typename Scalar>
Matrix<Scalar> embed_patches(const Matrix<Scalar>& patches, const ViTWeights<Scalar>& w) {
  const ViTConfig& cfg = w.config;
  Matrix<Scalar> tokens(cfg.tokens(), cfg.dim);
  tokens.row(0) = w.cls_token.transpose();
  tokens.bottomRows(cfg.num_patches()).noalias() = patches * w.patch_weight.transpose();
  tokens.bottomRows(cfg.num_patches()).rowwise() += w.patch_bias.transpose();
  tokens += w.pos_embed;
  return tokens;
}

/// Image {C, H, W} to the (1 + N) x d token matrix: CLS first, then patches,
/// positional embedding added.
template <typename Scalar>
Matrix<Scalar> patchify_embed(const Tensor& image, const ViTWeights<Scalar>& w) {
  return embed_patches(extract_patches<Scalar>(image, w.config), w);
}

}  // namespace melo
