#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "melo/forward.hpp"
#include "melo/lora.hpp"
#include "melo/metrics.hpp"
#include "melo/vit.hpp"

namespace melo {

enum class LossKind { SoftmaxCrossEntropy, SigmoidMultiLabel };

struct TrainConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint32_t epochs = 200;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::uint32_t rank = kDefaultRank;
  float scale = 1.0f;
  LossKind loss = LossKind::SoftmaxCrossEntropy;

  void validate() const;
};

struct Sample {
  Tensor image;
  std::size_t label = 0;
  std::vector<std::uint8_t> label_set;  // multi-label targets, one 0/1 per class
};

struct SyntheticTaskSpec {
  std::string name = "task";
  std::uint64_t seed = 1;
  std::size_t num_classes = 2;
  std::size_t samples = 200;
  float signal = 1.0f;  // amplitude of the per-class mean pattern
  float noise = 1.0f;   // stddev of per-pixel Gaussian noise
  bool multi_label = false;
  double test_fraction = 0.2;
  double val_fraction = 0.2;  // of what remains after the test split

  /// "key=value,key=value" with keys name, seed, classes, samples, signal,
  /// noise, multilabel.
  static SyntheticTaskSpec parse(const std::string& text);
};

/// Class-conditional images: each class owns a fixed Gaussian pixel pattern;
/// a sample is signal * pattern(label) + noise. Multi-label samples sum the
/// patterns of every active class.
struct SyntheticTask {
  SyntheticTaskSpec spec;
  std::vector<Sample> train, val, test;
};

SyntheticTask make_synthetic_task(const ViTConfig& cfg, const SyntheticTaskSpec& spec);

/// Mean loss of a batch and its gradient w.r.t. the adapter parameters only.
/// `grad` has the adapter's shape; the backbone gets no gradient storage.
struct LoraGradients {
  double loss = 0;
  LoraAdapter<double> grad;
};

LoraGradients lora_backward(std::span<const Sample> batch, const ViTWeights<double>& backbone,
                            const LoraAdapter<double>& adapter, LossKind loss = LossKind::SoftmaxCrossEntropy);

struct FullGradients {
  double loss = 0;
  ViTWeights<double> backbone;
  ClassifierHead<double> head;
};

/// Same loss, gradient w.r.t. every backbone parameter and the head.
FullGradients full_backward(std::span<const Sample> batch, const ViTWeights<double>& backbone,
                            const ClassifierHead<double>& head, LossKind loss = LossKind::SoftmaxCrossEntropy);

/// Per-sample loss from logits; the mean of these is what the backward passes differentiate.
double sample_loss(const VectorD& logits, const Sample& s, LossKind loss);

struct EpochRecord {
  std::uint32_t epoch = 0;
  double train_loss = 0;
  double val_accuracy = 0;
  double val_metric = 0;  // the selection metric

  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  std::string selection_metric;  // "accuracy" or "mean_auc"
  std::vector<EpochRecord> epochs;
  std::uint32_t best_epoch = 0;
  double best_val_metric = 0;
  std::size_t trainable_parameters = 0;

  bool operator==(const TrainHistory&) const = default;
};

/// One JSON object per line, plot-ready.
void write_history(const TrainHistory& history, const std::filesystem::path& path);

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, TrainHistory partial)
      : std::runtime_error(what), history_(std::move(partial)) {}
  const TrainHistory& history() const { return history_; }

 private:
  TrainHistory history_;
};

struct TrainResult {
  LoraAdapter<float> adapter;  // snapshot at the best validation epoch
  TrainHistory history;
  TrainableCount ledger;
};

/// Adam on the adapter (A, B, head) only; the backbone is read-only.
TrainResult train(const SyntheticTask& task, const TrainConfig& cfg, const ViTWeights<float>& backbone);

struct FullFinetuneResult {
  ViTWeights<float> weights;
  ClassifierHead<float> head;
  TrainHistory history;
};

/// Same loop with every backbone parameter trainable; starts from the same
/// head initialisation as train() for a given seed. Comparison oracle only.
FullFinetuneResult full_finetune_baseline(const SyntheticTask& task, const TrainConfig& cfg,
                                          const ViTWeights<float>& backbone);

AveragingMode averaging_mode_for(const SyntheticTask& task);

/// Scores are softmax probabilities (single-label) or sigmoids (multi-label).
std::vector<EvalRecord> predict_records(std::span<const Sample> samples, const ViTWeights<float>& backbone,
                                        const ClassifierHead<float>& head, const LoraAdapter<float>* lora,
                                        bool multi_label);

/// Bias-corrected Adam over a flat parameter vector.
class Adam {
 public:
  Adam(std::size_t size, double lr, double beta1, double beta2, double eps);
  void step(VectorD& params, const VectorD& grad);
  std::uint64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  VectorD m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace melo
