#include "melo/lora.hpp"

#include <random>

namespace melo {

void check_compatible(const ViTConfig& cfg, std::uint32_t adapter_dim, std::uint32_t adapter_depth) {
  if (cfg.dim != adapter_dim || cfg.depth != adapter_depth) {
    throw CompatibilityError("adapter (d=" + std::to_string(adapter_dim) + ", L=" + std::to_string(adapter_depth) +
                             ") does not fit backbone (d=" + std::to_string(cfg.dim) +
                             ", L=" + std::to_string(cfg.depth) + ")");
  }
}

LoraAdapter<float> init_adapter(const ViTConfig& cfg, std::size_t num_classes, std::uint32_t rank, std::uint64_t seed,
                                std::string task_name, float scale) {
  cfg.validate();
  if (rank < 1 || rank >= cfg.dim) {
    throw std::invalid_argument("adapter rank must satisfy 1 <= r < d (r=" + std::to_string(rank) +
                                ", d=" + std::to_string(cfg.dim) + ")");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 0.02f);
  auto gaussian = [&](Eigen::Index rows, Eigen::Index cols) {
    MatrixF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };
  LoraAdapter<float> a;
  a.task_name = std::move(task_name);
  a.dim = cfg.dim;
  a.rank = rank;
  a.scale = scale;
  a.layers.reserve(cfg.depth);
  for (std::uint32_t l = 0; l < cfg.depth; ++l) {
    LoraLayer<float> layer;
    layer.query.a = gaussian(rank, cfg.dim);
    layer.query.b = MatrixF::Zero(cfg.dim, rank);
    layer.value.a = gaussian(rank, cfg.dim);
    layer.value.b = MatrixF::Zero(cfg.dim, rank);
    a.layers.push_back(std::move(layer));
  }
  a.head = init_head(cfg, num_classes, rng);
  return a;
}

TrainableCount count_trainable(const ViTConfig& cfg, std::uint32_t rank, std::size_t num_classes) {
  TrainableCount c;
  // Two projections (Q, V), each with A (r x d) and B (d x r).
  c.lora = std::size_t{cfg.depth} * 2 * (std::size_t{cfg.dim} * rank + std::size_t{rank} * cfg.dim);
  c.head = num_classes * cfg.dim + num_classes;
  c.total = c.lora + c.head;
  return c;
}

double trainable_fraction(const ViTConfig& cfg, std::uint32_t rank, std::size_t num_classes) {
  const auto t = count_trainable(cfg, rank, num_classes).total;
  return static_cast<double>(t) / static_cast<double>(backbone_parameter_count(cfg) + t);
}

}  // namespace melo
