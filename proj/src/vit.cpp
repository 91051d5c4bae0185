#include "melo/vit.hpp"

#include <map>

namespace melo {

void ViTConfig::validate() const {
  auto fail = [&](const std::string& why) { throw std::invalid_argument("invalid ViT config " + to_string(*this) + ": " + why); };
  if (image_size == 0 || patch_size == 0 || channels == 0 || dim == 0 || depth == 0 || heads == 0 || mlp_dim == 0) {
    fail("all fields must be positive");
  }
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (dim % heads != 0) fail("dim must be divisible by heads");
}

namespace {
const std::map<std::string, ViTConfig, std::less<>>& presets() {
  // Public ViT family widths; the desk-scale entries keep tests and benches fast.
  static const std::map<std::string, ViTConfig, std::less<>> table{
      {"vit-base", {224, 16, 3, 768, 12, 12, 3072}},
      {"vit-huge", {224, 14, 3, 1280, 32, 16, 5120}},
      {"vit-giga", {224, 14, 3, 1664, 48, 16, 8192}},
      {"vit-mini", {32, 8, 3, 64, 4, 4, 256}},
      {"vit-micro", {16, 4, 1, 16, 2, 2, 32}},
  };
  return table;
}
}  // namespace

ViTConfig ViTConfig::preset(std::string_view name) {
  const auto& table = presets();
  auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown ViT preset '" + std::string(name) + "'");
  return it->second;
}

std::vector<std::string> ViTConfig::preset_names() {
  std::vector<std::string> names;
  for (const auto& [name, cfg] : presets()) names.push_back(name);
  return names;
}

std::string to_string(const ViTConfig& c) {
  return "{image=" + std::to_string(c.image_size) + " patch=" + std::to_string(c.patch_size) +
         " channels=" + std::to_string(c.channels) + " d=" + std::to_string(c.dim) + " L=" + std::to_string(c.depth) +
         " heads=" + std::to_string(c.heads) + " mlp=" + std::to_string(c.mlp_dim) + "}";
}

std::size_t backbone_parameter_count(const ViTConfig& c) {
  const std::size_t d = c.dim, m = c.mlp_dim;
  const std::size_t front = d * c.patch_dim() + d + d + std::size_t{c.tokens()} * d;
  const std::size_t block = 2 * d + 4 * (d * d + d) + 2 * d + (m * d + m) + (d * m + d);
  return front + c.depth * block + 2 * d;
}

namespace {

template <typename Fill>
ViTWeights<float> build_backbone(const ViTConfig& cfg, Fill&& weight) {
  cfg.validate();
  const Eigen::Index d = cfg.dim, m = cfg.mlp_dim;
  ViTWeights<float> w;
  w.config = cfg;
  w.patch_weight = weight(d, cfg.patch_dim());
  w.patch_bias = VectorF::Zero(d);
  w.cls_token = weight(d, 1);
  w.pos_embed = weight(cfg.tokens(), d);
  w.blocks.resize(cfg.depth);
  for (auto& b : w.blocks) {
    b.ln1_gamma = VectorF::Ones(d);
    b.ln1_beta = VectorF::Zero(d);
    b.wq = weight(d, d);
    b.bq = VectorF::Zero(d);
    b.wk = weight(d, d);
    b.bk = VectorF::Zero(d);
    b.wv = weight(d, d);
    b.bv = VectorF::Zero(d);
    b.wo = weight(d, d);
    b.bo = VectorF::Zero(d);
    b.ln2_gamma = VectorF::Ones(d);
    b.ln2_beta = VectorF::Zero(d);
    b.fc1 = weight(m, d);
    b.fc1_bias = VectorF::Zero(m);
    b.fc2 = weight(d, m);
    b.fc2_bias = VectorF::Zero(d);
  }
  w.norm_gamma = VectorF::Ones(d);
  w.norm_beta = VectorF::Zero(d);
  return w;
}

}  // namespace

ViTWeights<float> init_backbone(const ViTConfig& cfg, std::uint64_t seed, float stddev) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, stddev);
  return build_backbone(cfg, [&](Eigen::Index rows, Eigen::Index cols) {
    MatrixF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  });
}

ViTWeights<float> zero_backbone(const ViTConfig& cfg) {
  return build_backbone(cfg, [](Eigen::Index rows, Eigen::Index cols) { return MatrixF::Zero(rows, cols); });
}

ClassifierHead<float> init_head(const ViTConfig& cfg, std::size_t num_classes, std::mt19937_64& rng, float stddev) {
  if (num_classes == 0) throw std::invalid_argument("classifier head needs at least one class");
  std::normal_distribution<float> normal(0.0f, stddev);
  ClassifierHead<float> head{MatrixF(num_classes, cfg.dim), VectorF::Zero(static_cast<Eigen::Index>(num_classes))};
  for (Eigen::Index i = 0; i < head.weight.size(); ++i) head.weight.data()[i] = normal(rng);
  return head;
}

}  // namespace melo
