// melo: build backbones, train adapters, serve them, and benchmark serving strategies.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "melo/bench.hpp"
#include "melo/forward.hpp"
#include "melo/lora.hpp"
#include "melo/metrics.hpp"
#include "melo/registry.hpp"
#include "melo/serialization.hpp"
#include "melo/tensor.hpp"
#include "melo/trainer.hpp"
#include "melo/vit.hpp"

namespace fs = std::filesystem;
using namespace melo;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void print_logits(std::ostream& out, const VectorF& logits) {
  out << std::setprecision(std::numeric_limits<float>::max_digits10);
  for (Eigen::Index i = 0; i < logits.size(); ++i) out << (i ? " " : "") << logits(i);
}

std::size_t predicted_class(const VectorF& logits) {
  const VectorD d = logits.cast<double>();
  return argmax(std::span<const double>(d.data(), static_cast<std::size_t>(d.size())));
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw IoError("cannot open '" + p.string() + "' for writing");
  return out;
}

// ---------------------------------------------------------------------------

struct InitBackboneArgs {
  std::string preset = "vit-base";
  std::uint64_t seed = 0;
  float stddev = 0.02f;
  fs::path out;
};

int cmd_init_backbone(const InitBackboneArgs& a) {
  const ViTConfig cfg = ViTConfig::preset(a.preset);
  save_backbone(init_backbone(cfg, a.seed, a.stddev), a.out);
  std::cout << "wrote " << a.out.string() << " (" << to_string(cfg) << ", " << backbone_parameter_count(cfg)
            << " parameters, " << fs::file_size(a.out) << " bytes)\n";
  return 0;
}

struct TrainArgs {
  fs::path backbone;
  std::string task_spec;
  std::uint32_t rank = kDefaultRank;
  double lr = 3e-4;
  std::uint32_t epochs = 200;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  float scale = 1.0f;
  fs::path out;
  fs::path history;
};

int cmd_train(const TrainArgs& a) {
  const BackboneFile bf = load_backbone(a.backbone);
  const SyntheticTaskSpec spec = SyntheticTaskSpec::parse(a.task_spec);
  const SyntheticTask task = make_synthetic_task(bf.weights.config, spec);

  TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.rank = a.rank;
  cfg.scale = a.scale;
  cfg.loss = spec.multi_label ? LossKind::SigmoidMultiLabel : LossKind::SoftmaxCrossEntropy;

  const TrainResult r = train(task, cfg, bf.weights);
  save_adapter(r.adapter, a.out);
  if (!a.history.empty()) write_history(r.history, a.history);

  const std::size_t backbone_params = backbone_parameter_count(bf.weights.config);
  std::cout << "trainable.lora=" << r.ledger.lora << "\n"
            << "trainable.head=" << r.ledger.head << "\n"
            << "trainable.total=" << r.ledger.total << "\n"
            << "frozen.backbone=" << backbone_params << "\n"
            << "trainable.fraction=" << std::setprecision(6)
            << static_cast<double>(r.ledger.total) / static_cast<double>(backbone_params + r.ledger.total) << "\n"
            << "best_epoch=" << r.history.best_epoch << "\n"
            << "best_val_" << r.history.selection_metric << "=" << r.history.best_val_metric << "\n";

  const auto records = predict_records(task.test, bf.weights, r.adapter.head, &r.adapter, spec.multi_label);
  const MetricsReport m = evaluate_records(records, averaging_mode_for(task));
  std::cout << "test.acc=" << m.acc << "\n";
  if (m.auc) std::cout << "test.auc=" << *m.auc << "\n";
  std::cout << "adapter=" << a.out.string() << " (" << fs::file_size(a.out) << " bytes)\n";
  return 0;
}

struct InferArgs {
  fs::path backbone;
  fs::path adapter;
  fs::path input;
};

int cmd_infer(const InferArgs& a) {
  const BackboneFile bf = load_backbone(a.backbone);
  const Tensor image = load_image(a.input);
  VectorF logits;
  if (!a.adapter.empty()) {
    logits = forward<float>(image, bf.weights, load_adapter(a.adapter));
  } else {
    if (!bf.head) {
      throw UsageError("backbone '" + a.backbone.string() +
                       "' has no classifier head; pass --adapter or use a merged task model");
    }
    logits = forward<float>(image, bf.weights, *bf.head);
  }
  std::cout << "logits=";
  print_logits(std::cout, logits);
  std::cout << "\nclass=" << predicted_class(logits) << "\n";
  return 0;
}

struct MergeArgs {
  fs::path backbone;
  fs::path adapter;
  fs::path out;
};

int cmd_merge(const MergeArgs& a) {
  const BackboneFile bf = load_backbone(a.backbone);
  const LoraAdapter<float> adapter = load_adapter(a.adapter);
  save_backbone(merge_adapter(bf.weights, adapter), a.out, &adapter.head);
  std::cout << "wrote " << a.out.string() << " (task '" << adapter.task_name << "', " << fs::file_size(a.out)
            << " bytes)\n";
  return 0;
}

struct RegistryArgs {
  fs::path backbone;
  std::string adapters;
  fs::path workload;
  fs::path report;
  bool concurrent = false;
  unsigned threads = 4;
};

struct WorkloadLine {
  std::string task;
  fs::path image;
};

// One "task image-path" pair per line; '#' starts a comment; relative paths
// are resolved against the workload file's directory.
std::vector<WorkloadLine> read_workload(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open workload '" + path.string() + "'");
  std::vector<WorkloadLine> lines;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    WorkloadLine w;
    if (!(ss >> w.task)) continue;
    std::string image;
    if (!(ss >> image)) throw UsageError(path.string() + ":" + std::to_string(number) + ": expected 'task image'");
    w.image = image;
    if (w.image.is_relative()) w.image = path.parent_path() / w.image;
    lines.push_back(std::move(w));
  }
  if (lines.empty()) throw UsageError("workload '" + path.string() + "' is empty");
  return lines;
}

int cmd_registry(const RegistryArgs& a) {
  AdapterRegistry registry(a.backbone);
  for (const auto& p : split(a.adapters, ',')) registry.register_adapter(fs::path(p));
  const auto work = read_workload(a.workload);
  std::vector<Tensor> images;
  images.reserve(work.size());
  for (const auto& w : work) images.push_back(load_image(w.image));

  std::vector<VectorF> outputs(work.size());
  if (a.concurrent) {
    std::vector<std::thread> pool;
    const unsigned n = std::max(1u, a.threads);
    for (unsigned t = 0; t < n; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < work.size(); i += n) outputs[i] = registry.infer_as(work[i].task, images[i]);
      });
    }
    for (auto& th : pool) th.join();
  } else {
    for (std::size_t i = 0; i < work.size(); ++i) {
      registry.switch_to(work[i].task);
      outputs[i] = registry.infer(images[i]);
    }
  }

  std::ostringstream rep;
  for (std::size_t i = 0; i < work.size(); ++i) {
    rep << "item." << i << "=" << work[i].task << " class=" << predicted_class(outputs[i]) << " logits=";
    print_logits(rep, outputs[i]);
    rep << "\n";
  }
  const LatencySummary lat = registry.switch_latency();
  const MemoryReport mem = registry.memory_report();
  rep << "mode=" << (a.concurrent ? "concurrent" : "serial") << "\n"
      << "items=" << work.size() << "\n"
      << "switches=" << registry.switches() << "\n"
      << "switch_calls=" << lat.count << "\n"
      << "switch_min_ns=" << lat.min_ns << "\n"
      << "switch_median_ns=" << lat.median_ns << "\n"
      << "switch_mean_ns=" << lat.mean_ns << "\n"
      << "memory.backbone_bytes=" << mem.backbone_bytes << "\n"
      << "memory.adapter_bytes_total=" << mem.adapter_bytes_total << "\n";
  for (const auto& [task, bytes] : mem.per_adapter) rep << "memory.adapter." << task << "=" << bytes << "\n";
  for (const auto& [task, n] : registry.inference_counts()) rep << "inferences." << task << "=" << n << "\n";

  if (a.report.empty()) {
    std::cout << rep.str();
  } else {
    open_out(a.report) << rep.str();
    std::cout << "items=" << work.size() << " switches=" << registry.switches() << " report=" << a.report.string()
              << "\n";
  }
  return 0;
}

struct BenchArgs {
  std::string strategies = "all";
  std::string orderings = "in-order,random";
  std::string preset = "vit-mini";
  std::string classes = "2,14,3,4";
  std::size_t per_task = 25;
  std::uint64_t seed = 0;
  std::optional<double> load_cost;
  fs::path workdir;
  fs::path report;
};

int cmd_bench(const BenchArgs& a) {
  std::vector<Strategy> strategies;
  if (a.strategies == "all") {
    strategies = {Strategy::ReloadPerTask, Strategy::PreloadAll, Strategy::MeloShared};
  } else {
    for (const auto& s : split(a.strategies, ',')) strategies.push_back(parse_strategy(s));
  }
  std::vector<Ordering> orderings;
  for (const auto& o : split(a.orderings, ',')) orderings.push_back(parse_ordering(o));
  std::vector<std::size_t> classes;
  for (const auto& c : split(a.classes, ',')) classes.push_back(std::stoul(c));
  if (strategies.empty() || orderings.empty() || classes.empty()) throw UsageError("bench: nothing to run");

  const fs::path dir = a.workdir.empty() ? fs::temp_directory_path() / ("melo-bench-" + std::to_string(a.seed)) : a.workdir;
  const BenchArtifacts art = prepare_bench_artifacts(dir, ViTConfig::preset(a.preset), classes, a.seed);
  const BenchReport report = run_benchmarks(art, strategies, orderings, a.per_task, a.seed, a.load_cost);

  const std::string table = report.to_table();
  std::cout << table;
  if (!a.report.empty()) {
    open_out(a.report) << table;
    open_out(fs::path(a.report.string() + ".kv")) << report.to_key_value();
  }
  if (a.workdir.empty()) fs::remove_all(dir);
  return 0;
}

struct CountArgs {
  std::string preset = "vit-base";
  std::uint32_t rank = kDefaultRank;
  std::size_t classes = 2;
};

int cmd_count_params(const CountArgs& a) {
  const ViTConfig cfg = ViTConfig::preset(a.preset);
  const TrainableCount c = count_trainable(cfg, a.rank, a.classes);
  std::cout << "preset=" << a.preset << "\n"
            << "lora=" << c.lora << "\n"
            << "head=" << c.head << "\n"
            << "total=" << c.total << "\n"
            << "backbone=" << backbone_parameter_count(cfg) << "\n"
            << "fraction=" << std::setprecision(6) << trainable_fraction(cfg, a.rank, a.classes) << "\n"
            << "adapter_bytes=" << adapter_file_size(cfg, a.rank, a.classes, 4) << "\n";
  return 0;
}

struct EvalArgs {
  fs::path pred;
  fs::path labels;
  std::string mode;
  fs::path report;
};

std::vector<std::vector<double>> read_rows(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<double> row;
    double v;
    while (ss >> v) row.push_back(v);
    if (!ss.eof()) throw UsageError(p.string() + ": non-numeric value in line " + std::to_string(rows.size() + 1));
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

int cmd_eval(const EvalArgs& a) {
  const auto preds = read_rows(a.pred);
  const auto labels = read_rows(a.labels);
  if (preds.size() != labels.size()) {
    throw UsageError("eval: " + std::to_string(preds.size()) + " predictions but " + std::to_string(labels.size()) +
                     " labels");
  }
  if (preds.empty()) throw UsageError("eval: no records");

  AveragingMode mode;
  if (!a.mode.empty()) mode = parse_averaging_mode(a.mode);
  else if (labels.front().size() > 1) mode = AveragingMode::MultiLabel;
  else mode = preds.front().size() == 2 ? AveragingMode::Binary : AveragingMode::Macro;

  std::vector<EvalRecord> records;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    EvalRecord r;
    r.scores = preds[i];
    if (mode == AveragingMode::MultiLabel) {
      for (double v : labels[i]) r.label_set.push_back(v != 0.0);
    } else {
      if (labels[i].size() != 1 || labels[i][0] < 0 || labels[i][0] >= static_cast<double>(r.scores.size())) {
        throw UsageError("eval: bad label on line " + std::to_string(i + 1));
      }
      r.label = static_cast<std::size_t>(labels[i][0]);
    }
    records.push_back(std::move(r));
  }
  const MetricsReport m = evaluate_records(records, mode);
  std::cout << m.to_table();
  if (!a.report.empty()) open_out(a.report) << m.to_key_value();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank task adapters over a shared frozen ViT backbone"};
  app.require_subcommand(1);

  InitBackboneArgs init_args;
  auto* init = app.add_subcommand("init-backbone", "Write a seeded random backbone");
  init->add_option("--preset", init_args.preset, "vit-base, vit-huge, vit-giga, vit-mini, vit-micro")->capture_default_str();
  init->add_option("--seed", init_args.seed)->capture_default_str();
  init->add_option("--std", init_args.stddev, "Gaussian init stddev")->capture_default_str();
  init->add_option("--out", init_args.out)->required();

  TrainArgs train_args;
  auto* tr = app.add_subcommand("train", "Train an adapter on a synthetic task");
  tr->add_option("--backbone", train_args.backbone)->required()->check(CLI::ExistingFile);
  tr->add_option("--task-spec", train_args.task_spec, "e.g. name=xray,seed=1,classes=2,samples=200")->required();
  tr->add_option("--rank", train_args.rank)->capture_default_str();
  tr->add_option("--lr", train_args.lr)->capture_default_str();
  tr->add_option("--epochs", train_args.epochs)->capture_default_str();
  tr->add_option("--batch", train_args.batch)->capture_default_str();
  tr->add_option("--seed", train_args.seed)->capture_default_str();
  tr->add_option("--scale", train_args.scale)->capture_default_str();
  tr->add_option("--out", train_args.out)->required();
  tr->add_option("--history", train_args.history, "JSON-lines training history");

  InferArgs infer_args;
  auto* inf = app.add_subcommand("infer", "Classify one image");
  inf->add_option("--backbone", infer_args.backbone)->required()->check(CLI::ExistingFile);
  inf->add_option("--adapter", infer_args.adapter, "omit to use the head stored in the backbone file")
      ->check(CLI::ExistingFile);
  inf->add_option("--input", infer_args.input, ".melt tensor or .pgm image")->required()->check(CLI::ExistingFile);

  MergeArgs merge_args;
  auto* mg = app.add_subcommand("merge", "Fold an adapter into the backbone, producing a standalone task model");
  mg->add_option("--backbone", merge_args.backbone)->required()->check(CLI::ExistingFile);
  mg->add_option("--adapter", merge_args.adapter)->required()->check(CLI::ExistingFile);
  mg->add_option("--out", merge_args.out)->required();

  RegistryArgs reg_args;
  auto* rg = app.add_subcommand("registry", "Serve a workload through one backbone and many adapters");
  rg->add_option("--backbone", reg_args.backbone)->required()->check(CLI::ExistingFile);
  rg->add_option("--adapters", reg_args.adapters, "comma-separated adapter files")->required();
  rg->add_option("--workload", reg_args.workload, "lines of 'task image-path'")->required()->check(CLI::ExistingFile);
  rg->add_option("--report", reg_args.report);
  rg->add_flag("--concurrent", reg_args.concurrent, "per-call task selection across threads");
  rg->add_option("--threads", reg_args.threads)->capture_default_str();

  BenchArgs bench_args;
  auto* bn = app.add_subcommand("bench", "Compare reload-per-task, preload-all and melo-shared serving");
  bn->add_option("--strategies", bench_args.strategies, "all or a comma-separated list")->capture_default_str();
  bn->add_option("--orderings", bench_args.orderings)->capture_default_str();
  bn->add_option("--preset", bench_args.preset)->capture_default_str();
  bn->add_option("--classes", bench_args.classes, "class count per task")->capture_default_str();
  bn->add_option("--per-task", bench_args.per_task, "images per task")->capture_default_str();
  bn->add_option("--seed", bench_args.seed)->capture_default_str();
  bn->add_option("--load-cost", bench_args.load_cost, "simulated ns per byte read from disk");
  bn->add_option("--workdir", bench_args.workdir, "keep artifacts here instead of a temp dir");
  bn->add_option("--report", bench_args.report, "table file; key=value lines go to <report>.kv");

  CountArgs count_args;
  auto* cp = app.add_subcommand("count-params", "Trainable parameter ledger for a preset");
  cp->add_option("--preset", count_args.preset)->capture_default_str();
  cp->add_option("--rank", count_args.rank)->capture_default_str();
  cp->add_option("--classes", count_args.classes)->capture_default_str();

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "Metrics from prediction and label files");
  ev->add_option("--pred", eval_args.pred, "one row of scores per record")->required()->check(CLI::ExistingFile);
  ev->add_option("--labels", eval_args.labels, "class index, or a 0/1 row for multi-label")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--mode", eval_args.mode, "binary, macro or multilabel (inferred when omitted)");
  ev->add_option("--report", eval_args.report, "key=value output");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init) return cmd_init_backbone(init_args);
    if (*tr) return cmd_train(train_args);
    if (*inf) return cmd_infer(infer_args);
    if (*mg) return cmd_merge(merge_args);
    if (*rg) return cmd_registry(reg_args);
    if (*bn) return cmd_bench(bench_args);
    if (*cp) return cmd_count_params(count_args);
    if (*ev) return cmd_eval(eval_args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
