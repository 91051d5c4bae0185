#include "melo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "melo/serialization.hpp"

namespace melo {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning rate must be finite and non-negative");
  }
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
}

SyntheticTaskSpec SyntheticTaskSpec::parse(const std::string& text) {
  SyntheticTaskSpec spec;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("task spec: expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "name") spec.name = value;
    else if (key == "seed") spec.seed = std::stoull(value);
    else if (key == "classes") spec.num_classes = std::stoul(value);
    else if (key == "samples") spec.samples = std::stoul(value);
    else if (key == "signal") spec.signal = std::stof(value);
    else if (key == "noise") spec.noise = std::stof(value);
    else if (key == "multilabel") spec.multi_label = value == "1" || value == "true";
    else throw std::invalid_argument("task spec: unknown key '" + key + "'");
  }
  if (spec.num_classes < 2) throw std::invalid_argument("task spec: need at least 2 classes");
  return spec;
}

SyntheticTask make_synthetic_task(const ViTConfig& cfg, const SyntheticTaskSpec& spec) {
  cfg.validate();
  if (spec.num_classes < 2) throw std::invalid_argument("synthetic task needs >= 2 classes");
  const std::vector<std::size_t> shape{cfg.channels, cfg.image_size, cfg.image_size};
  const std::size_t pixels = std::size_t{cfg.channels} * cfg.image_size * cfg.image_size;

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<std::vector<float>> patterns(spec.num_classes, std::vector<float>(pixels));
  for (auto& p : patterns) {
    for (auto& v : p) v = normal(rng);
  }

  std::vector<Sample> all;
  all.reserve(spec.samples);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    Sample s;
    s.image = Tensor(shape);
    if (spec.multi_label) {
      s.label_set.resize(spec.num_classes);
      for (auto& bit : s.label_set) bit = coin(rng) ? 1 : 0;
    } else {
      s.label = i % spec.num_classes;
    }
    for (std::size_t px = 0; px < pixels; ++px) {
      float mean = 0;
      if (spec.multi_label) {
        for (std::size_t c = 0; c < spec.num_classes; ++c) mean += s.label_set[c] ? patterns[c][px] : 0.0f;
      } else {
        mean = patterns[s.label][px];
      }
      s.image[px] = spec.signal * mean + spec.noise * normal(rng);
    }
    all.push_back(std::move(s));
  }
  std::shuffle(all.begin(), all.end(), rng);

  SyntheticTask task;
  task.spec = spec;
  const auto n_test = static_cast<std::size_t>(std::round(spec.test_fraction * static_cast<double>(all.size())));
  const auto n_val =
      static_cast<std::size_t>(std::round(spec.val_fraction * static_cast<double>(all.size() - n_test)));
  task.test.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_test));
  task.val.assign(all.begin() + static_cast<std::ptrdiff_t>(n_test),
                  all.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  task.train.assign(all.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), all.end());
  return task;
}

// ---------------------------------------------------------------------------
// Backward pass

namespace {

template <typename T>
void zero_like(T& dst, const T& src) {
  dst.setZero(src.rows(), src.cols());
}

LoraAdapter<double> zeros_like(const LoraAdapter<double>& a) {
  LoraAdapter<double> g = a;
  g.for_each_parameter([](auto& t) { t.setZero(); });
  return g;
}

ViTWeights<double> zeros_like(const ViTWeights<double>& w) {
  ViTWeights<double> g = w;
  g.for_each_parameter([](const std::string&, auto& t) { t.setZero(); });
  return g;
}

/// Gradient through y = gamma * (x - mean) / sqrt(var + eps) + beta, row-wise.
MatrixD layernorm_backward(const MatrixD& x, const VectorD& gamma, const MatrixD& dy, VectorD* dgamma,
                           VectorD* dbeta) {
  const double eps = static_cast<double>(kLayerNormEps);
  const double n = static_cast<double>(x.cols());
  MatrixD dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).sum() / n;
    const double var = (x.row(i).array() - mean).square().sum() / n;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    const Eigen::RowVectorXd xhat = (x.row(i).array() - mean) * inv_std;
    const Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(gamma.transpose());
    if (dgamma) *dgamma += dy.row(i).cwiseProduct(xhat).transpose();
    if (dbeta) *dbeta += dy.row(i).transpose();
    const double mean_dxhat = dxhat.sum() / n;
    const double mean_dxhat_xhat = dxhat.dot(xhat) / n;
    dx.row(i) = inv_std * (dxhat.array() - mean_dxhat - xhat.array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

struct LowRankBackward {
  const LowRankPair<double>* pair;
  LowRankPair<double>* grad;
};

/// Gradient of a (possibly low-rank augmented) projection out = x W^T + s (x A^T) B^T + b.
/// Returns dx; accumulates into the backbone and adapter gradients when given.
MatrixD projection_backward(const MatrixD& x, const MatrixD& dout, const MatrixD& w, const MatrixD* low,
                            LowRankBackward lora, double scale, MatrixD* dw, VectorD* db) {
  MatrixD dx(x.rows(), x.cols());
  dx.noalias() = dout * w;
  if (dw) dw->noalias() += dout.transpose() * x;
  if (db) *db += dout.colwise().sum().transpose();
  if (lora.pair != nullptr) {
    if (lora.grad) lora.grad->b.noalias() += scale * (dout.transpose() * *low);
    MatrixD dlow(x.rows(), lora.pair->a.rows());
    dlow.noalias() = scale * (dout * lora.pair->b);
    if (lora.grad) lora.grad->a.noalias() += dlow.transpose() * x;
    dx.noalias() += dlow * lora.pair->a;
  }
  return dx;
}

MatrixD block_backward(const MatrixD& dout, const BlockCache<double>& cache, const EncoderBlock<double>& b,
                       const ViTConfig& cfg, const LoraLayer<double>* lora, double scale, EncoderBlock<double>* gb,
                       LoraLayer<double>* gl) {
  const Eigen::Index heads = cfg.heads, hd = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  // MLP branch: out = mid + gelu(ln2 fc1^T + b1) fc2^T + b2
  MatrixD dmid = dout;
  if (gb) {
    gb->fc2.noalias() += dout.transpose() * cache.fc1_act;
    gb->fc2_bias += dout.colwise().sum().transpose();
  }
  MatrixD dpre(dout.rows(), b.fc2.cols());
  dpre.noalias() = dout * b.fc2;
  dpre.array() *= cache.fc1_pre.unaryExpr([](double v) { return gelu_derivative(v); }).array();
  if (gb) {
    gb->fc1.noalias() += dpre.transpose() * cache.ln2;
    gb->fc1_bias += dpre.colwise().sum().transpose();
  }
  MatrixD dln2(dout.rows(), cfg.dim);
  dln2.noalias() = dpre * b.fc1;
  dmid += layernorm_backward(cache.mid, b.ln2_gamma, dln2, gb ? &gb->ln2_gamma : nullptr,
                             gb ? &gb->ln2_beta : nullptr);

  // Attention branch: mid = x + attn wo^T + bo
  if (gb) {
    gb->wo.noalias() += dmid.transpose() * cache.attn;
    gb->bo += dmid.colwise().sum().transpose();
  }
  MatrixD dattn(dout.rows(), cfg.dim);
  dattn.noalias() = dmid * b.wo;

  MatrixD dq = MatrixD::Zero(dout.rows(), cfg.dim);
  MatrixD dk = MatrixD::Zero(dout.rows(), cfg.dim);
  MatrixD dv = MatrixD::Zero(dout.rows(), cfg.dim);
  for (Eigen::Index h = 0; h < heads; ++h) {
    const MatrixD& p = cache.probs[static_cast<std::size_t>(h)];
    const MatrixD d_head = dattn.middleCols(h * hd, hd);
    MatrixD dp = d_head * cache.v.middleCols(h * hd, hd).transpose();
    dv.middleCols(h * hd, hd).noalias() = p.transpose() * d_head;
    // softmax Jacobian, row-wise: ds = p * (dp - <dp, p>)
    const VectorD inner = dp.cwiseProduct(p).rowwise().sum();
    MatrixD ds = p.cwiseProduct(dp.colwise() - inner) * inv_sqrt;
    dq.middleCols(h * hd, hd).noalias() = ds * cache.k.middleCols(h * hd, hd);
    dk.middleCols(h * hd, hd).noalias() = ds.transpose() * cache.q.middleCols(h * hd, hd);
  }

  const LowRankBackward lq{lora ? &lora->query : nullptr, gl ? &gl->query : nullptr};
  const LowRankBackward lv{lora ? &lora->value : nullptr, gl ? &gl->value : nullptr};
  MatrixD dln1 = projection_backward(cache.ln1, dq, b.wq, &cache.q_low, lq, scale, gb ? &gb->wq : nullptr,
                                     gb ? &gb->bq : nullptr);
  dln1 += projection_backward(cache.ln1, dk, b.wk, nullptr, {nullptr, nullptr}, scale, gb ? &gb->wk : nullptr,
                              gb ? &gb->bk : nullptr);
  dln1 += projection_backward(cache.ln1, dv, b.wv, &cache.v_low, lv, scale, gb ? &gb->wv : nullptr,
                              gb ? &gb->bv : nullptr);

  return dmid + layernorm_backward(cache.input, b.ln1_gamma, dln1, gb ? &gb->ln1_gamma : nullptr,
                                   gb ? &gb->ln1_beta : nullptr);
}

VectorD logits_gradient(const VectorD& logits, const Sample& s, LossKind loss) {
  if (loss == LossKind::SoftmaxCrossEntropy) {
    VectorD g = softmax<double>(logits);
    g(static_cast<Eigen::Index>(s.label)) -= 1.0;
    return g;
  }
  VectorD g(logits.size());
  for (Eigen::Index c = 0; c < logits.size(); ++c) {
    g(c) = 1.0 / (1.0 + std::exp(-logits(c))) - static_cast<double>(s.label_set.at(static_cast<std::size_t>(c)));
  }
  return g;
}

/// One sample through the network and back. Gradients are accumulated with
/// weight `w_sample` into whichever of backbone_grad / lora_grad is non-null.
double sample_backward(const Sample& s, const ViTWeights<double>& w, const ClassifierHead<double>& head,
                       const LoraAdapter<double>* lora, LossKind loss, double w_sample, ViTWeights<double>* backbone_grad,
                       ClassifierHead<double>* head_grad, LoraAdapter<double>* lora_grad) {
  ForwardCache<double> cache;
  const VectorD features = forward_features<double>(s.image, w, lora, &cache);
  const VectorD logits = classify(features, head);
  const double value = sample_loss(logits, s, loss);
  const VectorD dlogits = w_sample * logits_gradient(logits, s, loss);

  head_grad->weight.noalias() += dlogits * features.transpose();
  head_grad->bias += dlogits;
  const VectorD dfeatures = head.weight.transpose() * dlogits;

  const ViTConfig& cfg = w.config;
  MatrixD dx = MatrixD::Zero(cfg.tokens(), cfg.dim);
  const MatrixD cls_row = cache.cls_out.transpose();
  const MatrixD dfeat_row = dfeatures.transpose();
  dx.row(0) = layernorm_backward(cls_row, w.norm_gamma, dfeat_row, backbone_grad ? &backbone_grad->norm_gamma : nullptr,
                                 backbone_grad ? &backbone_grad->norm_beta : nullptr);

  const double scale = lora ? lora->scale : 1.0;
  for (std::size_t l = w.blocks.size(); l-- > 0;) {
    dx = block_backward(dx, cache.blocks[l], w.blocks[l], cfg, lora ? &lora->layers[l] : nullptr, scale,
                        backbone_grad ? &backbone_grad->blocks[l] : nullptr,
                        lora_grad ? &lora_grad->layers[l] : nullptr);
  }

  if (backbone_grad) {
    backbone_grad->pos_embed += dx;
    backbone_grad->cls_token += dx.row(0).transpose();
    const auto dtok = dx.bottomRows(cfg.num_patches());
    backbone_grad->patch_weight.noalias() += dtok.transpose() * cache.patches;
    backbone_grad->patch_bias += dtok.colwise().sum().transpose();
  }
  return value;
}

}  // namespace

double sample_loss(const VectorD& logits, const Sample& s, LossKind loss) {
  if (loss == LossKind::SoftmaxCrossEntropy) {
    const double peak = logits.maxCoeff();
    double total = 0;
    for (Eigen::Index c = 0; c < logits.size(); ++c) total += std::exp(logits(c) - peak);
    return peak + std::log(total) - logits(static_cast<Eigen::Index>(s.label));
  }
  double value = 0;
  for (Eigen::Index c = 0; c < logits.size(); ++c) {
    const double z = logits(c);
    const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    value += softplus - static_cast<double>(s.label_set.at(static_cast<std::size_t>(c))) * z;
  }
  return value;
}

LoraGradients lora_backward(std::span<const Sample> batch, const ViTWeights<double>& backbone,
                            const LoraAdapter<double>& adapter, LossKind loss) {
  if (batch.empty()) throw std::invalid_argument("lora_backward: empty batch");
  check_compatible(backbone.config, adapter);
  LoraGradients out{0.0, zeros_like(adapter)};
  const double weight = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    out.loss += weight * sample_backward(s, backbone, adapter.head, &adapter, loss, weight, nullptr,
                                         &out.grad.head, &out.grad);
  }
  return out;
}

FullGradients full_backward(std::span<const Sample> batch, const ViTWeights<double>& backbone,
                            const ClassifierHead<double>& head, LossKind loss) {
  if (batch.empty()) throw std::invalid_argument("full_backward: empty batch");
  FullGradients out{0.0, zeros_like(backbone), {}};
  zero_like(out.head.weight, head.weight);
  zero_like(out.head.bias, head.bias);
  const double weight = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    out.loss += weight * sample_backward(s, backbone, head, nullptr, loss, weight, &out.backbone, &out.head, nullptr);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimiser and training loop

Adam::Adam(std::size_t size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(VectorD::Zero(static_cast<Eigen::Index>(size))),
      v_(VectorD::Zero(static_cast<Eigen::Index>(size))) {}

void Adam::step(VectorD& params, const VectorD& grad) {
  ++t_;
  m_ = beta1_ * m_ + (1 - beta1_) * grad;
  v_ = beta2_ * v_ + (1 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

namespace {

// Flat views over everything a trainer updates.
struct LoraParams {
  LoraAdapter<double> adapter;
  template <typename F>
  void each(F&& f) { adapter.for_each_parameter(f); }
  template <typename F>
  void each(F&& f) const { adapter.for_each_parameter(f); }
};

struct FullParams {
  ViTWeights<double> weights;
  ClassifierHead<double> head;
  template <typename F>
  void each(F&& f) {
    weights.for_each_parameter([&](const std::string&, auto& t) { f(t); });
    f(head.weight);
    f(head.bias);
  }
  template <typename F>
  void each(F&& f) const {
    weights.for_each_parameter([&](const std::string&, const auto& t) { f(t); });
    f(head.weight);
    f(head.bias);
  }
};

template <typename P>
VectorD flatten(const P& p) {
  std::size_t n = 0;
  p.each([&](const auto& t) { n += static_cast<std::size_t>(t.size()); });
  VectorD out(static_cast<Eigen::Index>(n));
  Eigen::Index off = 0;
  p.each([&](const auto& t) {
    out.segment(off, t.size()) = Eigen::Map<const VectorD>(t.data(), t.size());
    off += t.size();
  });
  return out;
}

template <typename P>
void unflatten(const VectorD& flat, P& p) {
  Eigen::Index off = 0;
  p.each([&](auto& t) {
    Eigen::Map<VectorD>(t.data(), t.size()) = flat.segment(off, t.size());
    off += t.size();
  });
}

bool is_multi_label(const SyntheticTask& task) { return task.spec.multi_label; }

LossKind effective_loss(const SyntheticTask& task, const TrainConfig& cfg) {
  if (is_multi_label(task) && cfg.loss != LossKind::SigmoidMultiLabel) {
    throw std::invalid_argument("multi-label task requires the sigmoid loss");
  }
  if (!is_multi_label(task) && cfg.loss != LossKind::SoftmaxCrossEntropy) {
    throw std::invalid_argument("single-label task requires the softmax cross-entropy loss");
  }
  return cfg.loss;
}

struct ValidationScore {
  double accuracy = 0;
  double metric = 0;
};

ValidationScore validate(const SyntheticTask& task, const ViTWeights<float>& backbone, const ClassifierHead<float>& head,
                         const LoraAdapter<float>* lora) {
  if (task.val.empty()) throw std::invalid_argument("training needs a non-empty validation split");
  const auto records = predict_records(task.val, backbone, head, lora, is_multi_label(task));
  const auto mode = averaging_mode_for(task);
  const auto rep = confusion_metrics(records, mode);
  ValidationScore score{rep.acc, rep.acc};
  if (is_multi_label(task)) {
    try {
      score.metric = auc(records, mode);
    } catch (const UndefinedAucError&) {
      score.metric = 0.0;
    }
  }
  return score;
}

/// Shared epoch loop. `step` runs one batch and returns its mean loss;
/// `snapshot` evaluates and, on improvement, stores the current parameters.
template <typename Step, typename Evaluate, typename Keep>
TrainHistory run_epochs(const SyntheticTask& task, const TrainConfig& cfg, Step&& step, Evaluate&& evaluate,
                        Keep&& keep) {
  TrainHistory history;
  history.selection_metric = is_multi_label(task) ? "mean_auc" : "accuracy";
  std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  bool have_best = false;
  for (std::uint32_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Sample> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(task.train[order[i]]);
      const double loss = step(std::span<const Sample>(batch));
      if (!std::isfinite(loss)) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + " (loss " +
                                  std::to_string(loss) + ")",
                              history);
      }
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    const ValidationScore val = evaluate();
    history.epochs.push_back({epoch, loss_sum / static_cast<double>(seen), val.accuracy, val.metric});
    if (!have_best || val.metric > history.best_val_metric) {
      have_best = true;
      history.best_val_metric = val.metric;
      history.best_epoch = epoch;
      keep();
    }
  }
  return history;
}

}  // namespace

AveragingMode averaging_mode_for(const SyntheticTask& task) {
  if (task.spec.multi_label) return AveragingMode::MultiLabel;
  return task.spec.num_classes == 2 ? AveragingMode::Binary : AveragingMode::Macro;
}

std::vector<EvalRecord> predict_records(std::span<const Sample> samples, const ViTWeights<float>& backbone,
                                        const ClassifierHead<float>& head, const LoraAdapter<float>* lora,
                                        bool multi_label) {
  std::vector<EvalRecord> records;
  records.reserve(samples.size());
  for (const auto& s : samples) {
    const VectorD logits = forward<float>(s.image, backbone, head, lora).cast<double>();
    EvalRecord r;
    r.label = s.label;
    r.label_set = s.label_set;
    if (multi_label) {
      for (Eigen::Index c = 0; c < logits.size(); ++c) r.scores.push_back(1.0 / (1.0 + std::exp(-logits(c))));
    } else {
      const VectorD p = softmax<double>(logits);
      r.scores.assign(p.data(), p.data() + p.size());
    }
    records.push_back(std::move(r));
  }
  return records;
}

TrainResult train(const SyntheticTask& task, const TrainConfig& cfg, const ViTWeights<float>& backbone) {
  cfg.validate();
  const LossKind loss = effective_loss(task, cfg);
  const ViTConfig& vit = backbone.config;
  const LoraAdapter<float> initial =
      init_adapter(vit, task.spec.num_classes, cfg.rank, cfg.seed, task.spec.name, cfg.scale);
  const ViTWeights<double> frozen = backbone.cast<double>();

  LoraParams params{initial.cast<double>()};
  VectorD flat = flatten(params);
  Adam adam(static_cast<std::size_t>(flat.size()), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);

  TrainResult result;
  result.ledger = count_trainable(vit, cfg.rank, task.spec.num_classes);
  LoraAdapter<float> current;
  auto step = [&](std::span<const Sample> batch) {
    LoraGradients g = lora_backward(batch, frozen, params.adapter, loss);
    adam.step(flat, flatten(LoraParams{std::move(g.grad)}));
    unflatten(flat, params);
    return g.loss;
  };
  auto evaluate = [&] {
    current = params.adapter.cast<float>();
    return validate(task, backbone, current.head, &current);
  };
  auto keep = [&] { result.adapter = current; };
  result.history = run_epochs(task, cfg, step, evaluate, keep);
  result.history.trainable_parameters = static_cast<std::size_t>(flat.size());
  return result;
}

FullFinetuneResult full_finetune_baseline(const SyntheticTask& task, const TrainConfig& cfg,
                                          const ViTWeights<float>& backbone) {
  cfg.validate();
  const LossKind loss = effective_loss(task, cfg);
  const LoraAdapter<float> initial =
      init_adapter(backbone.config, task.spec.num_classes, cfg.rank, cfg.seed, task.spec.name, cfg.scale);

  FullParams params{backbone.cast<double>(), initial.head.cast<double>()};
  VectorD flat = flatten(params);
  Adam adam(static_cast<std::size_t>(flat.size()), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);

  FullFinetuneResult result;
  ViTWeights<float> current_w;
  ClassifierHead<float> current_head;
  auto step = [&](std::span<const Sample> batch) {
    FullGradients g = full_backward(batch, params.weights, params.head, loss);
    adam.step(flat, flatten(FullParams{std::move(g.backbone), std::move(g.head)}));
    unflatten(flat, params);
    return g.loss;
  };
  auto evaluate = [&] {
    current_w = params.weights.cast<float>();
    current_head = params.head.cast<float>();
    return validate(task, current_w, current_head, nullptr);
  };
  auto keep = [&] {
    result.weights = current_w;
    result.head = current_head;
  };
  result.history = run_epochs(task, cfg, step, evaluate, keep);
  result.history.trainable_parameters = static_cast<std::size_t>(flat.size());
  return result;
}

void write_history(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& e : history.epochs) {
    nlohmann::json j{{"epoch", e.epoch},
                     {"train_loss", e.train_loss},
                     {"val_accuracy", e.val_accuracy},
                     {"val_metric", e.val_metric},
                     {"selection_metric", history.selection_metric}};
    out << j.dump() << "\n";
  }
  nlohmann::json summary{{"best_epoch", history.best_epoch},
                         {"best_val_metric", history.best_val_metric},
                         {"selection_metric", history.selection_metric},
                         {"trainable_parameters", history.trainable_parameters}};
  out << summary.dump() << "\n";
}

}  // namespace melo
