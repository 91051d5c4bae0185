#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "melo/tensor.hpp"
#include "melo/vit.hpp"

namespace melo {

class CompatibilityError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline constexpr std::uint32_t kDefaultRank = 4;

/// Delta W = scale * B * A with A: r x d and B: d x r.
template <typename Scalar>
struct LowRankPair {
  Matrix<Scalar> a;
  Matrix<Scalar> b;

  Matrix<Scalar> delta(Scalar scale) const { return scale * (b * a); }
  bool operator==(const LowRankPair&) const = default;
};

template <typename Scalar>
struct LoraLayer {
  LowRankPair<Scalar> query;
  LowRankPair<Scalar> value;

  const LowRankPair<Scalar>& pair(Projection kind) const { return kind == Projection::Query ? query : value; }
  LowRankPair<Scalar>& pair(Projection kind) { return kind == Projection::Query ? query : value; }
  bool operator==(const LoraLayer&) const = default;
};

/// One task's plug-in: low-rank pairs on every block's query and value
/// projections, plus the task's classifier head.
template <typename Scalar>
struct LoraAdapter {
  std::string task_name;
  std::uint32_t dim = 0;
  std::uint32_t rank = kDefaultRank;
  Scalar scale = 1;
  std::vector<LoraLayer<Scalar>> layers;
  ClassifierHead<Scalar> head;

  std::uint32_t depth() const { return static_cast<std::uint32_t>(layers.size()); }
  std::size_t num_classes() const { return head.num_classes(); }

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
    for_each_parameter([&](const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  template <typename To>
  LoraAdapter<To> cast() const {
    LoraAdapter<To> out{task_name, dim, rank, static_cast<To>(scale), {}, head.template cast<To>()};
    out.layers.reserve(layers.size());
    for (const auto& l : layers) {
      out.layers.push_back({{l.query.a.template cast<To>(), l.query.b.template cast<To>()},
                            {l.value.a.template cast<To>(), l.value.b.template cast<To>()}});
    }
    return out;
  }

  bool operator==(const LoraAdapter&) const = default;

 private:
  // Same order as the on-disk payload.
  template <typename Self, typename F>
  static void visit(Self& a, F& f) {
    for (auto& l : a.layers) {
      f(l.query.a);
      f(l.query.b);
      f(l.value.a);
      f(l.value.b);
    }
    f(a.head.weight);
    f(a.head.bias);
  }
};

/// Throws CompatibilityError naming (d, L) of both sides.
void check_compatible(const ViTConfig& cfg, std::uint32_t adapter_dim, std::uint32_t adapter_depth);

template <typename Scalar>
void check_compatible(const ViTConfig& cfg, const LoraAdapter<Scalar>& a) {
  check_compatible(cfg, a.dim, a.depth());
}

/// A ~ N(0, 0.02), B = 0, head ~ N(0, 0.02) with zero bias. The result leaves
/// the backbone function unchanged until B moves.
LoraAdapter<float> init_adapter(const ViTConfig& cfg, std::size_t num_classes, std::uint32_t rank,
                                std::uint64_t seed, std::string task_name = "task", float scale = 1.0f);

/// Rows of x are tokens. Returns x W0^T + scale * (x A^T) B^T, i.e. the
/// row-vector form of W0 x + scale * B (A x); BA is never materialised.
template <typename Scalar>
Matrix<Scalar> apply_lora(const Matrix<Scalar>& x, const Matrix<Scalar>& w0, const Matrix<Scalar>& a,
                          const Matrix<Scalar>& b, Scalar scale) {
  if (x.cols() != w0.cols() || a.cols() != x.cols() || b.rows() != w0.rows() || b.cols() != a.rows()) {
    throw ShapeError("apply_lora: inconsistent shapes x" + shape_string(x) + " W0" + shape_string(w0) + " A" +
                     shape_string(a) + " B" + shape_string(b));
  }
  Matrix<Scalar> h(x.rows(), w0.rows());
  h.noalias() = x * w0.transpose();
  Matrix<Scalar> low(x.rows(), a.rows());
  low.noalias() = x * a.transpose();
  Matrix<Scalar> delta(x.rows(), b.rows());
  delta.noalias() = low * b.transpose();
  h += scale * delta;
  return h;
}

/// Column-vector convenience form: W0 x + scale * B (A x).
template <typename Scalar>
Vector<Scalar> apply_lora(const Vector<Scalar>& x, const Matrix<Scalar>& w0, const Matrix<Scalar>& a,
                          const Matrix<Scalar>& b, Scalar scale) {
  const Matrix<Scalar> row = x.transpose();
  return apply_lora<Scalar>(row, w0, a, b, scale).row(0).transpose();
}

/// Backbone with W_Q += s B A and W_V += s B A folded in at every layer. The
/// result is a new weight set; the input is not touched.
template <typename Scalar>
ViTWeights<Scalar> merge_adapter(const ViTWeights<Scalar>& w, const LoraAdapter<Scalar>& a) {
  check_compatible(w.config, a);
  ViTWeights<Scalar> out = w;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    for (Projection p : {Projection::Query, Projection::Value}) {
      out.projection(l, p) += a.layers[l].pair(p).delta(a.scale);
    }
  }
  return out;
}

/// A backbone that remembers which adapter has been folded into it, so the
/// fold can be undone and cannot be undone twice.
template <typename Scalar>
class MergedBackbone {
 public:
  MergedBackbone(const ViTWeights<Scalar>& base, const LoraAdapter<Scalar>& a)
      : weights_(merge_adapter(base, a)), merged_task_(a.task_name) {}

  const ViTWeights<Scalar>& weights() const { return weights_; }
  bool merged() const { return merged_; }
  const std::string& merged_task() const { return merged_task_; }

  /// Subtracts the same s B A that was added. Throws StateError if nothing is
  /// merged or if a different adapter is passed.
  ViTWeights<Scalar> unmerge(const LoraAdapter<Scalar>& a) {
    if (!merged_) throw StateError("unmerge: no adapter is currently merged");
    if (a.task_name != merged_task_) {
      throw StateError("unmerge: adapter '" + a.task_name + "' was not merged (merged: '" + merged_task_ + "')");
    }
    check_compatible(weights_.config, a);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
      for (Projection p : {Projection::Query, Projection::Value}) {
        weights_.projection(l, p) -= a.layers[l].pair(p).delta(a.scale);
      }
    }
    merged_ = false;
    return weights_;
  }

 private:
  ViTWeights<Scalar> weights_;
  std::string merged_task_;
  bool merged_ = true;
};

struct TrainableCount {
  std::size_t lora = 0;
  std::size_t head = 0;
  std::size_t total = 0;

  bool operator==(const TrainableCount&) const = default;
};

/// lora = 4 L r d (A and B on both Q and V), head = C d + C.
TrainableCount count_trainable(const ViTConfig& cfg, std::uint32_t rank, std::size_t num_classes);

/// total trainable / (backbone + total trainable).
double trainable_fraction(const ViTConfig& cfg, std::uint32_t rank, std::size_t num_classes);

}  // namespace melo
