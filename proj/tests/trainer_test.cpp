#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"
#include "melo/serialization.hpp"
#include "melo/trainer.hpp"
#include "test_support.hpp"

using namespace melo;

namespace {

// d=8, L=2, heads=2 on 4x4 single-channel images with 2x2 patches.
ViTConfig grad_config() { return ViTConfig{4, 2, 1, 8, 2, 2, 16}; }

std::vector<Sample> random_batch(const ViTConfig& c, std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::vector<Sample> batch;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.image = testing::random_image(c, rng);
    s.label = i % classes;
    s.label_set.resize(classes);
    for (auto& b : s.label_set) b = rng() % 2;
    batch.push_back(std::move(s));
  }
  return batch;
}

// Loss written out independently of the trainer's loss helpers.
double reference_loss(const VectorD& z, const Sample& s, LossKind kind) {
  if (kind == LossKind::SoftmaxCrossEntropy) {
    double sum = 0;
    for (Eigen::Index c = 0; c < z.size(); ++c) sum += std::exp(z(c));
    return std::log(sum) - z(static_cast<Eigen::Index>(s.label));
  }
  double v = 0;
  for (Eigen::Index c = 0; c < z.size(); ++c) {
    const double p = 1.0 / (1.0 + std::exp(-z(c)));
    v -= s.label_set[static_cast<std::size_t>(c)] ? std::log(p) : std::log(1.0 - p);
  }
  return v;
}

double batch_loss(const std::vector<Sample>& batch, const ViTWeights<double>& w, const ClassifierHead<double>& head,
                  const LoraAdapter<double>* lora, LossKind kind) {
  double total = 0;
  for (const auto& s : batch) total += reference_loss(forward<double>(s.image, w, head, lora), s, kind);
  return total / static_cast<double>(batch.size());
}

// Central differences in double carry ~1e-12 of rounding noise at this step
// size, so entries whose true gradient is zero (the key bias, for one) are
// compared on an absolute 1e-6 floor instead.
double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / scale;
}

struct GradCheck {
  std::size_t checked = 0;
  double worst = 0;
  std::string worst_name;
};

constexpr double kStep = 1e-4;

GradCheck check_lora_gradients(LossKind kind, std::uint64_t seed) {
  const ViTConfig c = grad_config();
  std::mt19937_64 rng(seed);
  const auto w = init_backbone(c, seed, 0.3f).cast<double>();
  auto a = testing::random_adapter(c, 3, 2, rng, 0.3f).cast<double>();
  a.head.weight = testing::random_matrix(rng, 3, c.dim, 0.3);
  const auto batch = random_batch(c, 3, 3, rng);
  const LoraGradients g = lora_backward(batch, w, a, kind);
  CHECK(g.loss == doctest::Approx(batch_loss(batch, w, a.head, &a, kind)).epsilon(1e-12));

  std::vector<const double*> analytic;
  g.grad.for_each_parameter([&](const auto& t) { analytic.push_back(t.data()); });
  std::vector<std::string> names;
  for (std::size_t l = 0; l < c.depth; ++l)
    for (const char* p : {"A_Q", "B_Q", "A_V", "B_V"}) names.push_back("layer" + std::to_string(l) + "." + p);
  names.push_back("head.weight");
  names.push_back("head.bias");

  GradCheck out;
  std::size_t tensor = 0;
  a.for_each_parameter([&](auto& t) {
    const double* grad = analytic[tensor];
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + kStep;
      const double up = batch_loss(batch, w, a.head, &a, kind);
      t.data()[i] = saved - kStep;
      const double down = batch_loss(batch, w, a.head, &a, kind);
      t.data()[i] = saved;
      const double err = relative_error(grad[i], (up - down) / (2 * kStep));
      if (err > out.worst) out.worst = err, out.worst_name = names[tensor] + "[" + std::to_string(i) + "]";
      ++out.checked;
    }
    ++tensor;
  });
  return out;
}

SyntheticTask micro_task(std::uint64_t seed, std::size_t classes, std::size_t samples = 200) {
  SyntheticTaskSpec spec;
  spec.seed = seed;
  spec.num_classes = classes;
  spec.samples = samples;
  return make_synthetic_task(ViTConfig::preset("vit-micro"), spec);
}

double test_accuracy(const SyntheticTask& task, const ViTWeights<float>& w, const ClassifierHead<float>& head,
                     const LoraAdapter<float>* lora) {
  const auto records = predict_records(task.test, w, head, lora, false);
  return confusion_metrics(records, averaging_mode_for(task)).acc;
}

}  // namespace

TEST_CASE("zero B gives exactly zero gradient for A") {
  const ViTConfig c = grad_config();
  std::mt19937_64 rng(1);
  const auto w = init_backbone(c, 1, 0.3f).cast<double>();
  const auto a = init_adapter(c, 3, 2, 1).cast<double>();
  const auto batch = random_batch(c, 4, 3, rng);
  const auto g = lora_backward(batch, w, a);
  for (const auto& l : g.grad.layers) {
    CHECK(l.query.a.isZero(0));
    CHECK(l.value.a.isZero(0));
    CHECK(!l.query.b.isZero(0));
    CHECK(!l.value.b.isZero(0));
  }
  CHECK(!g.grad.head.weight.isZero(0));
}

TEST_CASE("adapter gradients match central differences") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const GradCheck r = check_lora_gradients(LossKind::SoftmaxCrossEntropy, seed);
    INFO("worst entry " << r.worst_name);
    CHECK(r.checked == count_trainable(grad_config(), 2, 3).total);
    CHECK(r.worst < 1e-4);
  }
  const GradCheck ml = check_lora_gradients(LossKind::SigmoidMultiLabel, 4);
  INFO("worst entry " << ml.worst_name);
  CHECK(ml.worst < 1e-4);
}

TEST_CASE("full backbone gradients match central differences") {
  const ViTConfig c = grad_config();
  std::mt19937_64 rng(5);
  auto w = init_backbone(c, 5, 0.3f).cast<double>();
  // Non-trivial layer norm parameters so their gradients are exercised.
  w.for_each_parameter([&](const std::string& name, auto& t) {
    if (name.find("norm") != std::string::npos) t = MatrixD(t.array() + testing::random_matrix(rng, t.rows(), t.cols(), 0.2).array()).template cast<double>();
  });
  ClassifierHead<double> head{testing::random_matrix(rng, 3, c.dim, 0.3), VectorD::Zero(3)};
  const auto batch = random_batch(c, 2, 3, rng);
  const FullGradients g = full_backward(batch, w, head);

  std::vector<const double*> analytic;
  g.backbone.for_each_parameter([&](const std::string&, const auto& t) { analytic.push_back(t.data()); });
  double worst = 0;
  std::string worst_name;
  std::size_t k = 0, checked = 0;
  w.for_each_parameter([&](const std::string& name, auto& t) {
    const double* grad = analytic[k++];
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + kStep;
      const double up = batch_loss(batch, w, head, nullptr, LossKind::SoftmaxCrossEntropy);
      t.data()[i] = saved - kStep;
      const double down = batch_loss(batch, w, head, nullptr, LossKind::SoftmaxCrossEntropy);
      t.data()[i] = saved;
      const double err = relative_error(grad[i], (up - down) / (2 * kStep));
      if (err > worst) worst = err, worst_name = name + "[" + std::to_string(i) + "]";
      ++checked;
    }
  });
  INFO("worst entry " << worst_name);
  CHECK(checked == backbone_parameter_count(c));
  CHECK(worst < 1e-4);
}

TEST_CASE("one Adam step lowers the batch loss") {
  const ViTConfig c = ViTConfig::preset("vit-micro");
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const SyntheticTask task = micro_task(seed, 2, 64);
    const auto w = init_backbone(c, seed).cast<double>();
    auto a = init_adapter(c, 2, 4, seed).cast<double>();
    const std::vector<Sample> batch(task.train.begin(), task.train.begin() + 32);

    const auto before = lora_backward(batch, w, a);
    VectorD flat(static_cast<Eigen::Index>(a.parameter_count())), grad(flat.size());
    Eigen::Index at = 0;
    a.for_each_parameter([&](const auto& t) { flat.segment(at, t.size()) = Eigen::Map<const VectorD>(t.data(), t.size()); at += t.size(); });
    at = 0;
    before.grad.for_each_parameter([&](const auto& t) { grad.segment(at, t.size()) = Eigen::Map<const VectorD>(t.data(), t.size()); at += t.size(); });
    Adam adam(static_cast<std::size_t>(flat.size()), 3e-4, 0.9, 0.999, 1e-8);
    adam.step(flat, grad);
    at = 0;
    a.for_each_parameter([&](auto& t) { Eigen::Map<VectorD>(t.data(), t.size()) = flat.segment(at, t.size()); at += t.size(); });

    if (lora_backward(batch, w, a).loss < before.loss) ++decreased;
  }
  CHECK(decreased >= 19);
}

TEST_CASE("Adam first step moves each parameter by the learning rate") {
  Adam adam(3, 0.1, 0.9, 0.999, 1e-8);
  VectorD p = VectorD::Zero(3), g(3);
  g << 2.0, -0.5, 0.0;
  adam.step(p, g);
  CHECK(p(0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(p(1) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(p(2) == 0.0);
  CHECK(adam.steps() == 1);
}

TEST_CASE("synthetic tasks") {
  const auto c = ViTConfig::preset("vit-micro");
  const SyntheticTask t = micro_task(7, 4);
  CHECK(t.test.size() == 40);
  CHECK(t.val.size() == 32);
  CHECK(t.train.size() == 128);
  const SyntheticTask again = micro_task(7, 4);
  CHECK(again.train.front().image == t.train.front().image);
  CHECK(again.test.back().label == t.test.back().label);

  const auto spec = SyntheticTaskSpec::parse("name=x,seed=3,classes=5,samples=50,signal=2,noise=0.5");
  CHECK(spec.name == "x");
  CHECK(spec.seed == 3);
  CHECK(spec.num_classes == 5);
  CHECK(spec.samples == 50);
  CHECK(spec.signal == 2.0f);
  CHECK(spec.noise == 0.5f);
  CHECK_THROWS_AS(SyntheticTaskSpec::parse("colour=blue"), std::invalid_argument);
  CHECK_THROWS_AS(SyntheticTaskSpec::parse("classes=1"), std::invalid_argument);
  CHECK(make_synthetic_task(c, SyntheticTaskSpec::parse("multilabel=1,classes=3")).train.front().label_set.size() == 3);
}

TEST_CASE("separable task: logistic regression on raw pixels") {
  // The task must be learnable by a linear model before the ViT is blamed.
  const SyntheticTask task = micro_task(11, 2);
  const std::size_t n = task.train.front().image.size();
  VectorD wvec = VectorD::Zero(static_cast<Eigen::Index>(n));
  double bias = 0;
  for (int it = 0; it < 300; ++it) {
    VectorD gw = VectorD::Zero(wvec.size());
    double gb = 0;
    for (const auto& s : task.train) {
      const Eigen::Map<const Eigen::VectorXf> x(s.image.data().data(), wvec.size());
      const double p = 1.0 / (1.0 + std::exp(-(wvec.dot(x.cast<double>()) + bias)));
      gw += (p - static_cast<double>(s.label)) * x.cast<double>();
      gb += p - static_cast<double>(s.label);
    }
    wvec -= 0.01 * gw / static_cast<double>(task.train.size());
    bias -= 0.01 * gb / static_cast<double>(task.train.size());
  }
  std::size_t correct = 0;
  for (const auto& s : task.test) {
    const Eigen::Map<const Eigen::VectorXf> x(s.image.data().data(), wvec.size());
    correct += ((wvec.dot(x.cast<double>()) + bias) > 0) == (s.label == 1);
  }
  CHECK(double(correct) / double(task.test.size()) >= 0.95);
}

TEST_CASE("training: accuracy, frozen backbone, ledger, best snapshot") {
  const auto c = ViTConfig::preset("vit-micro");
  const auto backbone = init_backbone(c, 21);
  const SyntheticTask task = micro_task(11, 2);
  TrainConfig cfg;
  cfg.seed = 3;
  cfg.epochs = 60;

  const auto checksum = backbone_checksum(backbone);
  const TrainResult r = train(task, cfg, backbone);
  CHECK(backbone_checksum(backbone) == checksum);

  CHECK(r.ledger == count_trainable(c, cfg.rank, 2));
  CHECK(r.history.trainable_parameters == r.ledger.total);
  CHECK(r.adapter.parameter_count() == r.ledger.total);
  CHECK(r.history.selection_metric == "accuracy");
  REQUIRE(r.history.epochs.size() == cfg.epochs);

  double best = -1;
  for (const auto& e : r.history.epochs) best = std::max(best, e.val_metric);
  CHECK(r.history.best_val_metric == best);
  const auto& chosen = r.history.epochs[r.history.best_epoch - 1];
  CHECK(chosen.val_metric == best);
  // The returned snapshot reproduces the recorded validation score.
  const auto val_records = predict_records(task.val, backbone, r.adapter.head, &r.adapter, false);
  CHECK(confusion_metrics(val_records, AveragingMode::Binary).acc == best);

  CHECK(test_accuracy(task, backbone, r.adapter.head, &r.adapter) >= 0.95);
  CHECK(r.history.epochs.back().train_loss < r.history.epochs.front().train_loss);
}

TEST_CASE("seeded training is exactly reproducible") {
  const auto c = ViTConfig::preset("vit-micro");
  const auto backbone = init_backbone(c, 22);
  const SyntheticTask task = micro_task(12, 3, 90);
  TrainConfig cfg;
  cfg.seed = 8;
  cfg.epochs = 5;
  const TrainResult a = train(task, cfg, backbone);
  const TrainResult b = train(task, cfg, backbone);
  CHECK(a.history == b.history);
  CHECK(a.adapter == b.adapter);
  cfg.seed = 9;
  CHECK(!(train(task, cfg, backbone).adapter == a.adapter));
}

TEST_CASE("with a zero learning rate the full and adapter paths agree") {
  const auto c = ViTConfig::preset("vit-micro");
  const auto backbone = init_backbone(c, 23);
  const SyntheticTask task = micro_task(13, 3, 90);
  TrainConfig cfg;
  cfg.learning_rate = 0;
  cfg.epochs = 3;
  const TrainResult lora = train(task, cfg, backbone);
  const FullFinetuneResult full = full_finetune_baseline(task, cfg, backbone);
  REQUIRE(lora.history.epochs.size() == full.history.epochs.size());
  for (std::size_t i = 0; i < lora.history.epochs.size(); ++i) {
    CHECK(lora.history.epochs[i].val_metric == full.history.epochs[i].val_metric);
    CHECK(lora.history.epochs[i].train_loss == doctest::Approx(full.history.epochs[i].train_loss).epsilon(1e-12));
  }
  CHECK(full.head.weight == lora.adapter.head.weight);
  CHECK(full.weights.blocks[0].wq == backbone.blocks[0].wq);
  CHECK(full.history.trainable_parameters == backbone_parameter_count(c) + c.dim * 3 + 3);
}

TEST_CASE("full fine-tuning reaches the separable-task bar") {
  const auto c = ViTConfig::preset("vit-micro");
  const auto backbone = init_backbone(c, 24);
  const SyntheticTask task = micro_task(11, 2);
  TrainConfig cfg;
  cfg.epochs = 40;
  const FullFinetuneResult full = full_finetune_baseline(task, cfg, backbone);
  CHECK(test_accuracy(task, full.weights, full.head, nullptr) >= 0.95);
}

TEST_CASE("divergence aborts with the partial history") {
  const auto c = ViTConfig::preset("vit-micro");
  auto backbone = init_backbone(c, 25);
  SyntheticTask task = micro_task(14, 2, 60);
  task.train[3].image[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 3;
  try {
    train(task, cfg, backbone);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    CHECK(e.history().epochs.empty());
  }
}

TEST_CASE("multi-label training selects on mean AUC") {
  const auto c = ViTConfig::preset("vit-micro");
  const auto backbone = init_backbone(c, 26);
  SyntheticTaskSpec spec;
  spec.seed = 15;
  spec.num_classes = 3;
  spec.multi_label = true;
  const SyntheticTask task = make_synthetic_task(c, spec);
  TrainConfig cfg;
  cfg.loss = LossKind::SigmoidMultiLabel;
  cfg.epochs = 40;
  const TrainResult r = train(task, cfg, backbone);
  CHECK(r.history.selection_metric == "mean_auc");
  CHECK(averaging_mode_for(task) == AveragingMode::MultiLabel);
  const auto records = predict_records(task.test, backbone, r.adapter.head, &r.adapter, true);
  CHECK(auc(records, AveragingMode::MultiLabel) > 0.75);
  CHECK(r.history.best_val_metric > r.history.epochs.front().val_metric);

  cfg.loss = LossKind::SoftmaxCrossEntropy;
  CHECK_THROWS_AS(train(task, cfg, backbone), std::invalid_argument);
}

TEST_CASE("history file is line-delimited JSON") {
  TrainHistory h;
  h.selection_metric = "accuracy";
  h.epochs = {{1, 0.7, 0.5, 0.5}, {2, 0.4, 0.75, 0.75}};
  h.best_epoch = 2;
  h.best_val_metric = 0.75;
  h.trainable_parameters = 42;
  testing::TempDir dir;
  write_history(h, dir / "h.jsonl");
  std::ifstream in(dir / "h.jsonl");
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  REQUIRE(rows.size() == 3);
  CHECK(rows[1]["epoch"] == 2);
  CHECK(rows[1]["train_loss"] == 0.4);
  CHECK(rows[2]["best_epoch"] == 2);
  CHECK(rows[2]["trainable_parameters"] == 42);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.learning_rate = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("four-class task: adapter within five points of full fine-tuning") {
  const auto c = ViTConfig::preset("vit-micro");
  const auto backbone = init_backbone(c, 27);
  // Default budget (200 epochs, lr 3e-4). Over a random frozen backbone the
  // adapter needs the full budget and a 1000-image task to close the gap.
  const SyntheticTask task = micro_task(27, 4, 1000);
  TrainConfig cfg;
  cfg.seed = 27;
  const TrainResult lora = train(task, cfg, backbone);
  const FullFinetuneResult full = full_finetune_baseline(task, cfg, backbone);
  const double lora_acc = test_accuracy(task, backbone, lora.adapter.head, &lora.adapter);
  const double full_acc = test_accuracy(task, full.weights, full.head, nullptr);
  MESSAGE("4-class test accuracy: lora " << lora_acc << ", full " << full_acc);
  CHECK(lora_acc >= full_acc - 0.05);
}
