#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace melo {

/// Binary: two-column scores, class 1 is positive. Macro: one-vs-rest per
/// class, averaged unweighted. MultiLabel: independent per-class sigmoid
/// scores thresholded at 0.5, averaged unweighted.
enum class AveragingMode { Binary, Macro, MultiLabel };

std::string to_string(AveragingMode mode);
AveragingMode parse_averaging_mode(const std::string& s);

class UndefinedAucError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct EvalRecord {
  std::size_t label = 0;                 // Binary / Macro
  std::vector<std::uint8_t> label_set;   // MultiLabel: one 0/1 per class
  std::vector<double> scores;
};

struct ClassMetrics {
  std::size_t support = 0;  // positives for this class
  double sen = 0, pre = 0, f1s = 0;
  std::optional<double> auc;
};

struct MetricsReport {
  AveragingMode mode = AveragingMode::Binary;
  std::size_t count = 0;
  double acc = 0, sen = 0, pre = 0, f1s = 0;
  std::optional<double> auc;
  std::vector<ClassMetrics> per_class;
  /// Zero-denominator cases; each such metric contributed 0.
  std::vector<std::string> flags;

  /// key=value lines.
  std::string to_key_value() const;
  /// Aligned text table, one row per class plus the averaged row.
  std::string to_table() const;
};

/// Lowest index wins ties.
std::size_t argmax(std::span<const double> scores);

/// acc/sen/pre/f1s; auc left empty. Throws std::invalid_argument on empty input.
MetricsReport confusion_metrics(std::span<const EvalRecord> records, AveragingMode mode);

/// Mann-Whitney AUC with ties counted one half. Throws UndefinedAucError when
/// either side is empty.
double auc_binary(std::span<const double> scores, std::span<const std::uint8_t> positive);

/// Binary: AUC of scores[1]. Macro/MultiLabel: unweighted mean of one-vs-rest AUCs.
double auc(std::span<const EvalRecord> records, AveragingMode mode);

/// confusion_metrics plus AUC (and per-class AUC) when defined; an undefined
/// AUC is flagged, not reported as a number.
MetricsReport evaluate_records(std::span<const EvalRecord> records, AveragingMode mode);

}  // namespace melo
