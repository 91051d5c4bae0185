#include "melo/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace melo {

std::string to_string(AveragingMode mode) {
  switch (mode) {
    case AveragingMode::Binary: return "binary";
    case AveragingMode::Macro: return "macro";
    case AveragingMode::MultiLabel: return "multilabel";
  }
  return "unknown";
}

AveragingMode parse_averaging_mode(const std::string& s) {
  if (s == "binary") return AveragingMode::Binary;
  if (s == "macro") return AveragingMode::Macro;
  if (s == "multilabel" || s == "multi-label") return AveragingMode::MultiLabel;
  throw std::invalid_argument("unknown averaging mode '" + s + "'");
}

std::size_t argmax(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("argmax of empty score vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

namespace {

std::size_t class_count(std::span<const EvalRecord> records, AveragingMode mode) {
  if (records.empty()) throw std::invalid_argument("metrics: no records");
  const std::size_t k = records.front().scores.size();
  if (mode == AveragingMode::Binary && k != 2) {
    throw std::invalid_argument("metrics: binary mode needs 2 scores per record, got " + std::to_string(k));
  }
  for (const auto& r : records) {
    if (r.scores.size() != k) throw std::invalid_argument("metrics: records disagree on class count");
    if (mode == AveragingMode::MultiLabel) {
      if (r.label_set.size() != k) throw std::invalid_argument("metrics: multi-label record needs one label per class");
    } else if (r.label >= k) {
      throw std::invalid_argument("metrics: label " + std::to_string(r.label) + " out of range");
    }
  }
  return k;
}

// Per-class one-vs-rest truth and prediction.
bool is_positive(const EvalRecord& r, std::size_t c, AveragingMode mode) {
  return mode == AveragingMode::MultiLabel ? r.label_set[c] != 0 : r.label == c;
}

bool predicted(const EvalRecord& r, std::size_t c, AveragingMode mode) {
  return mode == AveragingMode::MultiLabel ? r.scores[c] >= 0.5 : argmax(r.scores) == c;
}

double ratio(std::size_t num, std::size_t den, const std::string& what, std::vector<std::string>& flags) {
  if (den == 0) {
    flags.push_back(what);
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport confusion_metrics(std::span<const EvalRecord> records, AveragingMode mode) {
  const std::size_t k = class_count(records, mode);
  MetricsReport rep;
  rep.mode = mode;
  rep.count = records.size();
  rep.per_class.resize(k);

  for (std::size_t c = 0; c < k; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& r : records) {
      const bool truth = is_positive(r, c, mode), pred = predicted(r, c, mode);
      tp += truth && pred;
      fp += !truth && pred;
      fn += truth && !pred;
    }
    auto& m = rep.per_class[c];
    const std::string tag = "class " + std::to_string(c) + ": ";
    m.support = tp + fn;
    m.sen = ratio(tp, tp + fn, tag + "sen undefined (no positives)", rep.flags);
    m.pre = ratio(tp, tp + fp, tag + "pre undefined (no positive predictions)", rep.flags);
    if (m.sen + m.pre > 0) {
      m.f1s = 2 * m.sen * m.pre / (m.sen + m.pre);
    } else {
      rep.flags.push_back(tag + "f1s undefined (sen + pre = 0)");
    }
  }

  if (mode == AveragingMode::MultiLabel) {
    std::size_t hits = 0;
    for (const auto& r : records) {
      for (std::size_t c = 0; c < k; ++c) hits += is_positive(r, c, mode) == predicted(r, c, mode);
    }
    rep.acc = static_cast<double>(hits) / static_cast<double>(records.size() * k);
  } else {
    std::size_t hits = 0;
    for (const auto& r : records) hits += argmax(r.scores) == r.label;
    rep.acc = static_cast<double>(hits) / static_cast<double>(records.size());
  }

  if (mode == AveragingMode::Binary) {
    rep.sen = rep.per_class[1].sen;
    rep.pre = rep.per_class[1].pre;
    rep.f1s = rep.per_class[1].f1s;
  } else {
    for (const auto& m : rep.per_class) {
      rep.sen += m.sen;
      rep.pre += m.pre;
      rep.f1s += m.f1s;
    }
    rep.sen /= static_cast<double>(k);
    rep.pre /= static_cast<double>(k);
    rep.f1s /= static_cast<double>(k);
  }
  return rep;
}

double auc_binary(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of 1-based ranks of positives, tied groups sharing their mean rank.
  double pos_rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (positive[order[t]]) {
        pos_rank_sum += mean_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw UndefinedAucError("auc: undefined with " + std::to_string(n_pos) + " positives and " +
                            std::to_string(n_neg) + " negatives");
  }
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1) / 2;
  return u / (np * static_cast<double>(n_neg));
}

namespace {
double class_auc(std::span<const EvalRecord> records, std::size_t c, AveragingMode mode) {
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  s.reserve(records.size());
  y.reserve(records.size());
  for (const auto& r : records) {
    s.push_back(r.scores[c]);
    y.push_back(is_positive(r, c, mode) ? 1 : 0);
  }
  try {
    return auc_binary(s, y);
  } catch (const UndefinedAucError& e) {
    throw UndefinedAucError("class " + std::to_string(c) + ": " + e.what());
  }
}
}  // namespace

double auc(std::span<const EvalRecord> records, AveragingMode mode) {
  const std::size_t k = class_count(records, mode);
  if (mode == AveragingMode::Binary) return class_auc(records, 1, mode);
  double total = 0;
  for (std::size_t c = 0; c < k; ++c) total += class_auc(records, c, mode);
  return total / static_cast<double>(k);
}

MetricsReport evaluate_records(std::span<const EvalRecord> records, AveragingMode mode) {
  MetricsReport rep = confusion_metrics(records, mode);
  bool all_defined = true;
  for (std::size_t c = 0; c < rep.per_class.size(); ++c) {
    if (mode == AveragingMode::Binary && c == 0) continue;
    try {
      rep.per_class[c].auc = class_auc(records, c, mode);
    } catch (const UndefinedAucError& e) {
      all_defined = false;
      rep.flags.push_back(std::string("auc undefined: ") + e.what());
    }
  }
  if (all_defined) rep.auc = auc(records, mode);
  return rep;
}

std::string MetricsReport::to_key_value() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "mode=" << to_string(mode) << "\n";
  out << "count=" << count << "\n";
  out << "acc=" << acc << "\nsen=" << sen << "\npre=" << pre << "\nf1s=" << f1s << "\n";
  out << "auc=";
  if (auc) out << *auc;
  else out << "undefined";
  out << "\n";
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& m = per_class[c];
    const std::string p = "class." + std::to_string(c) + ".";
    out << p << "support=" << m.support << "\n" << p << "sen=" << m.sen << "\n" << p << "pre=" << m.pre << "\n"
        << p << "f1s=" << m.f1s << "\n";
    if (m.auc) out << p << "auc=" << *m.auc << "\n";
  }
  for (std::size_t i = 0; i < flags.size(); ++i) out << "flag." << i << "=" << flags[i] << "\n";
  return out.str();
}

std::string MetricsReport::to_table() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << std::left << std::setw(10) << "class" << std::right << std::setw(9) << "support" << std::setw(9) << "SEN"
      << std::setw(9) << "PRE" << std::setw(9) << "F1S" << std::setw(9) << "AUC" << "\n";
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& m = per_class[c];
    out << std::left << std::setw(10) << c << std::right << std::setw(9) << m.support << std::setw(9) << m.sen
        << std::setw(9) << m.pre << std::setw(9) << m.f1s;
    if (m.auc) out << std::setw(9) << *m.auc;
    else out << std::setw(9) << "-";
    out << "\n";
  }
  out << "\n" << std::left << std::setw(10) << "ACC" << std::right << std::setw(9) << acc << "\n";
  out << std::left << std::setw(10) << "SEN" << std::right << std::setw(9) << sen << "\n";
  out << std::left << std::setw(10) << "PRE" << std::right << std::setw(9) << pre << "\n";
  out << std::left << std::setw(10) << "F1S" << std::right << std::setw(9) << f1s << "\n";
  out << std::left << std::setw(10) << "AUC" << std::right << std::setw(9);
  if (auc) out << *auc;
  else out << "undefined";
  out << "\n(" << to_string(mode) << " averaging, " << count << " records)\n";
  for (const auto& f : flags) out << "note: " << f << "\n";
  return out.str();
}

}  // namespace melo
