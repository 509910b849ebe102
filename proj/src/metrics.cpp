#include "cgpattn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cgpattn {

namespace {

int argmax_row(const Eigen::RowVectorXd& row) {
  int best = 0;
  for (Index c = 1; c < row.size(); ++c)
    if (row(c) > row(best)) best = static_cast<int>(c);
  return best;
}

/// Multiclass MCC (reduces to the binary formula for two classes).
double multiclass_mcc(const std::vector<int>& predictions,
                      const std::vector<int>& labels, int classes) {
  Matrix confusion = Matrix::Zero(classes, classes);
  for (std::size_t i = 0; i < labels.size(); ++i)
    confusion(labels[i], predictions[i]) += 1.0;
  const double total = static_cast<double>(labels.size());
  const double correct = confusion.trace();
  const Vector pred_counts = confusion.colwise().sum();
  const Vector true_counts = confusion.rowwise().sum();
  const double cov = correct * total - pred_counts.dot(true_counts);
  const double denom_p = total * total - pred_counts.squaredNorm();
  const double denom_t = total * total - true_counts.squaredNorm();
  const double denom = std::sqrt(denom_p) * std::sqrt(denom_t);
  if (denom <= 0.0) return 0.0;
  return cov / denom;
}

struct Scored {
  double score;
  bool positive;
};

/// Tie-aware AUROC equal to the all-pairs statistic (wins + half ties).
double auroc_positive_high(std::vector<Scored> scored) {
  std::sort(scored.begin(), scored.end(),
            [](const Scored& a, const Scored& b) { return a.score < b.score; });
  double positives = 0.0, negatives = 0.0;
  for (const auto& s : scored) (s.positive ? positives : negatives) += 1.0;
  if (positives == 0.0 || negatives == 0.0) return 0.0;
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  double rank = 1.0;
  while (i < scored.size()) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].score == scored[i].score) ++j;
    const double midrank = rank + static_cast<double>(j - i - 1) * 0.5;
    for (std::size_t k = i; k < j; ++k)
      if (scored[k].positive) rank_sum_pos += midrank;
    rank += static_cast<double>(j - i);
    i = j;
  }
  return (rank_sum_pos - positives * (positives + 1.0) / 2.0) /
         (positives * negatives);
}

/// Step-wise area under the precision-recall curve over tie groups.
double aupr_positive_high(std::vector<Scored> scored) {
  std::sort(scored.begin(), scored.end(),
            [](const Scored& a, const Scored& b) { return a.score > b.score; });
  double positives = 0.0;
  for (const auto& s : scored)
    if (s.positive) positives += 1.0;
  if (positives == 0.0) return 0.0;
  double tp = 0.0, fp = 0.0, area = 0.0;
  std::size_t i = 0;
  while (i < scored.size()) {
    std::size_t j = i;
    double group_tp = 0.0, group_fp = 0.0;
    while (j < scored.size() && scored[j].score == scored[i].score) {
      (scored[j].positive ? group_tp : group_fp) += 1.0;
      ++j;
    }
    tp += group_tp;
    fp += group_fp;
    const double precision = tp / (tp + fp);
    area += precision * (group_tp / positives);
    i = j;
  }
  return area;
}

double fpr_at_tpr(const std::vector<double>& scores_in,
                  const std::vector<double>& scores_out, double target_tpr) {
  std::vector<Scored> scored;
  scored.reserve(scores_in.size() + scores_out.size());
  for (double s : scores_in) scored.push_back({s, false});
  for (double s : scores_out) scored.push_back({s, true});
  std::sort(scored.begin(), scored.end(),
            [](const Scored& a, const Scored& b) { return a.score > b.score; });
  const double n_pos = static_cast<double>(scores_out.size());
  const double n_neg = static_cast<double>(scores_in.size());
  // ROC points from the highest threshold downward, one per tie group.
  double tp = 0.0, fp = 0.0;
  double prev_tpr = 0.0, prev_fpr = 0.0;
  std::size_t i = 0;
  while (i < scored.size()) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].score == scored[i].score) {
      (scored[j].positive ? tp : fp) += 1.0;
      ++j;
    }
    const double tpr = tp / n_pos;
    const double fpr = fp / n_neg;
    if (tpr >= target_tpr) {
      if (tpr == prev_tpr) return fpr;
      const double t = (target_tpr - prev_tpr) / (tpr - prev_tpr);
      return prev_fpr + t * (fpr - prev_fpr);
    }
    prev_tpr = tpr;
    prev_fpr = fpr;
    i = j;
  }
  return 1.0;
}

}  // namespace

Eigen::RowVectorXd softmax_row(const Eigen::RowVectorXd& logits) {
  const double mx = logits.maxCoeff();
  Eigen::ArrayXd e = (logits.array() - mx).exp();
  return (e / e.sum()).matrix().transpose();
}

CalibrationReport calibration(const Matrix& logits,
                              const std::vector<int>& labels, int bins) {
  if (logits.rows() < 1 || bins < 1)
    throw ValueError("calibration needs data and at least one bin");
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw DimensionError("calibration: one label per row required");
  const int classes = static_cast<int>(logits.cols());
  for (int y : labels)
    if (y < 0 || y >= classes) throw ValueError("label out of range");

  CalibrationReport report;
  report.bin_count = bins;
  report.bins.assign(static_cast<std::size_t>(bins), CalibrationBin{});
  std::vector<double> bin_conf(bins, 0.0), bin_acc(bins, 0.0);
  std::vector<long> bin_n(bins, 0);

  std::vector<int> predictions(labels.size());
  double nll = 0.0;
  long correct = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const Eigen::RowVectorXd probs = softmax_row(logits.row(r));
    const int pred = argmax_row(probs);
    predictions[static_cast<std::size_t>(r)] = pred;
    const double conf = probs(pred);
    const bool hit = pred == labels[static_cast<std::size_t>(r)];
    if (hit) ++correct;
    nll -= std::log(std::max(probs(labels[static_cast<std::size_t>(r)]),
                             1e-300));
    int b = static_cast<int>(conf * bins);
    if (b >= bins) b = bins - 1;
    if (b < 0) b = 0;
    bin_conf[b] += conf;
    bin_acc[b] += hit ? 1.0 : 0.0;
    bin_n[b] += 1;
  }

  const double n = static_cast<double>(logits.rows());
  report.accuracy = static_cast<double>(correct) / n;
  report.nll = nll / n;
  report.mcc = multiclass_mcc(predictions, labels, classes);

  double ece = 0.0, mce = 0.0;
  for (int b = 0; b < bins; ++b) {
    auto& bin = report.bins[static_cast<std::size_t>(b)];
    if (bin_n[b] == 0) continue;
    bin.weight = static_cast<double>(bin_n[b]) / n;
    bin.confidence = bin_conf[b] / static_cast<double>(bin_n[b]);
    bin.accuracy = bin_acc[b] / static_cast<double>(bin_n[b]);
    const double gap = std::abs(bin.accuracy - bin.confidence);
    ece += bin.weight * gap;
    mce = std::max(mce, gap);
  }
  report.ece = ece;
  report.mce = mce;
  return report;
}

double mcc(const std::vector<int>& predictions,
           const std::vector<int>& labels) {
  if (predictions.size() != labels.size())
    throw DimensionError("mcc: size mismatch");
  double tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw ValueError("mcc expects binary labels");
    if (predictions[i] == 1 && labels[i] == 1) tp += 1;
    else if (predictions[i] == 0 && labels[i] == 0) tn += 1;
    else if (predictions[i] == 1 && labels[i] == 0) fp += 1;
    else fn += 1;
  }
  const double denom_sq = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom_sq <= 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(denom_sq);
}

std::string to_string(OodDetector d) {
  switch (d) {
    case OodDetector::MaxSoftmax: return "max_softmax";
    case OodDetector::Entropy: return "entropy";
    case OodDetector::EnergyBased: return "energy_based";
    case OodDetector::KLMatching: return "kl_matching";
  }
  return "unknown";
}

KlTemplates fit_kl_templates(const Matrix& val_logits) {
  if (val_logits.rows() < 1) throw ValueError("fit_kl_templates: no data");
  const int classes = static_cast<int>(val_logits.cols());
  KlTemplates out;
  out.by_class = Matrix::Zero(classes, classes);
  out.fitted.assign(static_cast<std::size_t>(classes), false);
  std::vector<long> counts(static_cast<std::size_t>(classes), 0);
  for (Index r = 0; r < val_logits.rows(); ++r) {
    const Eigen::RowVectorXd probs = softmax_row(val_logits.row(r));
    const int pred = argmax_row(probs);
    out.by_class.row(pred) += probs;
    counts[static_cast<std::size_t>(pred)] += 1;
  }
  for (int c = 0; c < classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0) {
      out.by_class.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
      out.fitted[static_cast<std::size_t>(c)] = true;
    }
  }
  return out;
}

double ood_score(const Eigen::RowVectorXd& logits, OodDetector detector,
                 const KlTemplates* templates) {
  switch (detector) {
    case OodDetector::MaxSoftmax: {
      const Eigen::RowVectorXd probs = softmax_row(logits);
      return -probs.maxCoeff();
    }
    case OodDetector::Entropy: {
      const Eigen::RowVectorXd probs = softmax_row(logits);
      double h = 0.0;
      for (Index i = 0; i < probs.size(); ++i)
        if (probs(i) > 0.0) h -= probs(i) * std::log(probs(i));
      return h;
    }
    case OodDetector::EnergyBased: {
      const double mx = logits.maxCoeff();
      return -(mx + std::log((logits.array() - mx).exp().sum()));
    }
    case OodDetector::KLMatching: {
      if (templates == nullptr)
        throw ValueError("KLMatching requires fitted templates");
      const Eigen::RowVectorXd probs = softmax_row(logits);
      double best = std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t c = 0; c < templates->fitted.size(); ++c) {
        if (!templates->fitted[c]) continue;
        any = true;
        double kl = 0.0;
        for (Index i = 0; i < probs.size(); ++i) {
          if (probs(i) <= 0.0) continue;
          kl += probs(i) *
                std::log(probs(i) /
                         std::max(templates->by_class(static_cast<Index>(c), i),
                                  1e-300));
        }
        best = std::min(best, kl);
      }
      if (!any) throw ValueError("KLMatching requires fitted templates");
      return best;
    }
  }
  throw ValueError("unknown detector");
}

DetectionMetrics detection_metrics(const std::vector<double>& scores_in,
                                   const std::vector<double>& scores_out) {
  if (scores_in.empty() || scores_out.empty())
    throw ValueError("detection_metrics needs both score sets");
  DetectionMetrics out;

  std::vector<Scored> scored;
  scored.reserve(scores_in.size() + scores_out.size());
  for (double s : scores_in) scored.push_back({s, false});
  for (double s : scores_out) scored.push_back({s, true});
  out.auroc = auroc_positive_high(scored);

  out.aupr_out = aupr_positive_high(scored);

  std::vector<Scored> negated;
  negated.reserve(scored.size());
  for (double s : scores_in) negated.push_back({-s, true});
  for (double s : scores_out) negated.push_back({-s, false});
  out.aupr_in = aupr_positive_high(negated);

  out.fpr_at_95 = fpr_at_tpr(scores_in, scores_out, 0.95);
  return out;
}

double mean_pairwise_cosine(const Matrix& tokens) {
  const Index n = tokens.rows();
  if (n < 2) throw ValueError("cosine probe needs at least two tokens");
  double acc = 0.0;
  long pairs = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const double ni = tokens.row(i).norm();
      const double nj = tokens.row(j).norm();
      double sim = 0.0;
      if (ni > 0.0 && nj > 0.0)
        sim = tokens.row(i).dot(tokens.row(j)) / (ni * nj);
      acc += sim;
      ++pairs;
    }
  }
  return acc / static_cast<double>(pairs);
}

std::vector<double> oversmoothing_probe(
    const std::vector<Matrix>& layer_outputs) {
  std::vector<double> out;
  out.reserve(layer_outputs.size());
  for (const auto& layer : layer_outputs)
    out.push_back(mean_pairwise_cosine(layer));
  return out;
}

LogitDump read_logits_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot open logits CSV: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValueError("empty logits CSV: " + path);
  int classes = 0;
  {
    std::stringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ',')) {
      if (cell == "label") break;
      ++classes;
    }
  }
  if (classes < 1) throw ValueError("logits CSV header must list c0..c{C-1}");
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (static_cast<int>(row.size()) != classes + 1)
      throw ValueError("logits CSV row width mismatch");
    labels.push_back(static_cast<int>(row.back()));
    row.pop_back();
    rows.push_back(std::move(row));
  }
  LogitDump dump;
  dump.logits.resize(static_cast<Index>(rows.size()), classes);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int c = 0; c < classes; ++c)
      dump.logits(static_cast<Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
  dump.labels = std::move(labels);
  return dump;
}

void write_logits_csv(const std::string& path, const Matrix& logits,
                      const std::vector<int>& labels) {
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw DimensionError("write_logits_csv: label count mismatch");
  std::ofstream out(path);
  if (!out) throw ValueError("cannot write logits CSV: " + path);
  for (Index c = 0; c < logits.cols(); ++c) out << "c" << c << ",";
  out << "label\n";
  out.precision(17);
  for (Index r = 0; r < logits.rows(); ++r) {
    for (Index c = 0; c < logits.cols(); ++c) out << logits(r, c) << ",";
    out << labels[static_cast<std::size_t>(r)] << "\n";
  }
}

}  // namespace cgpattn
