#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cgpattn/common.hpp"

namespace cgpattn {

struct CalibrationBin {
  double confidence{0.0};
  double accuracy{0.0};
  double weight{0.0};
};

struct CalibrationReport {
  double accuracy{0.0};
  double mcc{0.0};
  double nll{0.0};
  double ece{0.0};
  double mce{0.0};
  int bin_count{15};
  std::vector<CalibrationBin> bins;
};

/// Accuracy, MCC, NLL and equal-width-bin ECE/MCE of a logit matrix. Empty
/// bins contribute zero to ECE and are skipped for MCE.
CalibrationReport calibration(const Matrix& logits,
                              const std::vector<int>& labels, int bins = 15);

/// Binary Matthews correlation coefficient; 0 when any factor of the
/// denominator vanishes.
double mcc(const std::vector<int>& predictions, const std::vector<int>& labels);

enum class OodDetector { MaxSoftmax, Entropy, EnergyBased, KLMatching };

std::string to_string(OodDetector d);

/// Per-class softmax templates for KLMatching, keyed by predicted class of
/// the validation samples.
struct KlTemplates {
  Matrix by_class;            // C x C, row c = mean softmax of samples predicted c
  std::vector<bool> fitted;   // per class
};

KlTemplates fit_kl_templates(const Matrix& val_logits);

/// OOD score, higher = more out-of-distribution. KLMatching requires fitted
/// templates.
double ood_score(const Eigen::RowVectorXd& logits, OodDetector detector,
                 const KlTemplates* templates = nullptr);

struct DetectionMetrics {
  double auroc{0.0};
  double aupr_in{0.0};
  double aupr_out{0.0};
  double fpr_at_95{0.0};
};

/// Threshold-free detection metrics; OOD is the positive class for AUROC and
/// AUPR-OUT, in-distribution (with negated scores) for AUPR-IN. Ties receive
/// half credit.
DetectionMetrics detection_metrics(const std::vector<double>& scores_in,
                                   const std::vector<double>& scores_out);

struct OodReport {
  struct PerDetector {
    std::string detector;
    DetectionMetrics metrics;
  };
  std::vector<PerDetector> detectors;
};

/// Mean pairwise cosine similarity of token rows, one value per layer. Zero
/// vectors contribute similarity 0.
std::vector<double> oversmoothing_probe(const std::vector<Matrix>& layer_outputs);
double mean_pairwise_cosine(const Matrix& tokens);

/// CSV logit dumps: header row c0..c{C-1},label.
struct LogitDump {
  Matrix logits;
  std::vector<int> labels;
};
LogitDump read_logits_csv(const std::string& path);
void write_logits_csv(const std::string& path, const Matrix& logits,
                      const std::vector<int>& labels);

Eigen::RowVectorXd softmax_row(const Eigen::RowVectorXd& logits);

}  // namespace cgpattn
