#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "cgpattn/bench.hpp"
#include "cgpattn/checkpoint.hpp"
#include "cgpattn/gp_core.hpp"
#include "cgpattn/runner.hpp"

namespace {

using namespace cgpattn;

void write_error_record(const std::string& out_dir, const std::string& what) {
  try {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/error.json");
    Json j;
    j["error"] = what;
    out << j.dump(2) << "\n";
  } catch (...) {
    // The error itself is already reported on stderr.
  }
}

RunConfig make_config(const std::string& config_path, std::uint64_t seed,
                      bool seed_set, const std::string& out_dir,
                      const std::string& attention) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = load_run_config(config_path);
  if (seed_set) cfg.root_seed = seed;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (!attention.empty())
    cfg.model.attention = attention_kind_from_string(attention);
  cfg.finalize();
  return cfg;
}

int cmd_train(const RunConfig& cfg) {
  const RunArtifacts artifacts = run(cfg);
  std::cout << "wrote " << artifacts.results_path << "\n"
            << "wrote " << artifacts.csv_path << "\n"
            << "wrote " << artifacts.checkpoint_path << "\n";
  const auto& clean = artifacts.results["calibration"]["clean"];
  std::cout << "clean test accuracy " << clean["accuracy"]
            << "  ece " << clean["ece"] << "  nll " << clean["nll"] << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
             const std::string& logits_csv) {
  if (!logits_csv.empty()) {
    const LogitDump dump = read_logits_csv(logits_csv);
    const CalibrationReport report =
        calibration(dump.logits, dump.labels, cfg.metrics.bins);
    std::cout << calibration_to_json(report).dump(2) << "\n";
    return 0;
  }
  RunConfig local = cfg;
  local.finalize();
  const ToyDataset data =
      local.dataset.build(Rng::derive(local.root_seed, 101));
  TransformerModel model(local.model);
  if (checkpoint.empty())
    throw ValueError("eval needs --checkpoint or --logits");
  model.params() = load_checkpoint(checkpoint);
  const Matrix logits =
      collect_logits(model, data.test, Rng::derive(local.root_seed, 103),
                     local.train.mc_samples);
  std::vector<int> labels;
  for (const auto& ex : data.test) labels.push_back(ex.label);
  const CalibrationReport report =
      calibration(logits, labels, local.metrics.bins);
  std::cout << calibration_to_json(report).dump(2) << "\n";
  return 0;
}

int cmd_ood(const RunConfig& cfg, const std::string& checkpoint) {
  RunConfig local = cfg;
  local.finalize();
  const std::uint64_t eval_seed = Rng::derive(local.root_seed, 103);
  const ToyDataset data =
      local.dataset.build(Rng::derive(local.root_seed, 101));
  TransformerModel model(local.model);
  if (checkpoint.empty()) throw ValueError("ood needs --checkpoint");
  model.params() = load_checkpoint(checkpoint);

  const Matrix val_logits =
      collect_logits(model, data.val, eval_seed, local.train.mc_samples);
  const Matrix test_logits =
      collect_logits(model, data.test, eval_seed, local.train.mc_samples);
  const KlTemplates templates = fit_kl_templates(val_logits);

  OodReport report;
  const std::vector<OodDetector> detectors = {
      OodDetector::KLMatching, OodDetector::MaxSoftmax, OodDetector::Entropy,
      OodDetector::EnergyBased};
  std::vector<ExampleSet> outliers;
  if (data.kind == DatasetKind::Images) {
    for (const auto& name : ood_image_set_names())
      outliers.push_back(make_ood_image_set(
          name, data, local.metrics.ood_per_set,
          Rng::derive(local.root_seed, 300 + outliers.size())));
  } else {
    outliers.push_back(data.ood);
  }
  for (const auto det : detectors) {
    std::vector<double> in_scores;
    for (Index r = 0; r < test_logits.rows(); ++r)
      in_scores.push_back(ood_score(test_logits.row(r), det, &templates));
    DetectionMetrics mean{};
    for (const auto& set : outliers) {
      const Matrix logits =
          collect_logits(model, set, eval_seed, local.train.mc_samples);
      std::vector<double> out_scores;
      for (Index r = 0; r < logits.rows(); ++r)
        out_scores.push_back(ood_score(logits.row(r), det, &templates));
      const DetectionMetrics m = detection_metrics(in_scores, out_scores);
      mean.auroc += m.auroc;
      mean.aupr_in += m.aupr_in;
      mean.aupr_out += m.aupr_out;
      mean.fpr_at_95 += m.fpr_at_95;
    }
    const double n = static_cast<double>(outliers.size());
    mean.auroc /= n;
    mean.aupr_in /= n;
    mean.aupr_out /= n;
    mean.fpr_at_95 /= n;
    report.detectors.push_back({to_string(det), mean});
  }
  std::cout << ood_report_to_json(report).dump(2) << "\n";
  return 0;
}

int cmd_bench(const std::string& out_dir, std::vector<int> n_values,
              std::vector<int> m_values, int repeats) {
  if (n_values.empty()) n_values = {64, 128, 256, 512};
  if (m_values.empty()) m_values = {8, 16, 32};
  const BenchTable table = bench(n_values, m_values, repeats);
  const std::string csv = table.to_csv();
  std::cout << csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/bench.csv");
    out << csv;
    std::cout << "wrote " << out_dir << "/bench.csv\n";
  }
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, int probes, double eps) {
  RunConfig local = cfg;
  local.finalize();
  ModelConfig mc = local.model;
  mc.layers = 1;
  mc.heads = 1;
  // A moderate noise scale keeps the objective's intermediates small enough
  // that central differences at the default step resolve every coordinate.
  mc.init_noise = std::max(mc.init_noise, 0.5);
  TransformerModel model(mc);
  model.init_params(Rng::derive(local.root_seed, 102));

  Rng rng(Rng::derive(local.root_seed, 7));
  ExampleSet batch;
  for (int i = 0; i < 2; ++i) {
    Example ex;
    if (mc.token_ids) {
      ex.tokens.resize(std::min(6, mc.max_positions), 1);
      for (Index r = 0; r < ex.tokens.rows(); ++r)
        ex.tokens(r, 0) = static_cast<double>(rng.below(mc.input_dim));
    } else {
      ex.tokens = 0.5 * rng.gaussian_matrix(std::min(4, mc.max_positions),
                                            mc.input_dim);
    }
    ex.label = static_cast<int>(rng.below(mc.classes));
    batch.push_back(std::move(ex));
  }
  const auto objective = make_objective(model, batch, /*alpha=*/0.5,
                                        Rng::derive(local.root_seed, 8),
                                        /*mc_samples=*/4);
  const GradCheckReport report =
      gradcheck(model.params(), objective, probes, eps,
                Rng::derive(local.root_seed, 9));
  std::cout << "max relative error " << report.max_rel_error << " over "
            << report.probes << " probes\n";
  return report.max_rel_error <= 1e-4 ? 0 : 1;
}

int cmd_selftest() {
  int failures = 0;
  const auto check = [&failures](bool ok, const std::string& name) {
    std::cout << (ok ? "ok   " : "FAIL ") << name << "\n";
    if (!ok) ++failures;
  };

  {
    Rng rng(3);
    bool reversal = true;
    for (int i = 0; i < 100 && reversal; ++i) {
      BranchProjection q{rng.gaussian_matrix(2, 3), 1.3};
      BranchProjection k{rng.gaussian_matrix(2, 3), 0.7};
      const Vector x = rng.gaussian_vector(3);
      const Vector y = rng.gaussian_vector(3);
      reversal = std::abs(eval_cross(x, y, k, q) - eval_cross(y, x, q, k)) <=
                 1e-14;
    }
    check(reversal, "cross-kernel reversal");
  }
  {
    const Matrix k = Matrix::Identity(3, 3);
    check(std::abs(logdet_psd(k, 0.0)) <= 1e-12, "logdet identity");
  }
  {
    Rng rng(5);
    const Matrix pts = rng.gaussian_matrix(6, 2);
    const Matrix k_oo = gram_canonical_rows(pts, pts);
    const Matrix k_qo = gram_canonical_rows(rng.gaussian_matrix(6, 2), pts);
    const Matrix exact = k_qo * PsdSolveContext::factorize(k_oo, 0.25).solve(
                                    Matrix(Matrix::Identity(6, 6)));
    const Matrix dtc = dtc_mean_operator(k_qo, k_oo, k_oo, 0.25);
    check((exact - dtc).norm() / exact.norm() <= 1e-9, "dtc reduction");
  }
  {
    const std::vector<double> in = {0.1, 0.2};
    const std::vector<double> out = {0.15, 0.3};
    check(std::abs(detection_metrics(in, out).auroc - 0.75) <= 1e-12,
          "auroc hand case");
  }
  {
    Matrix logits(2, 2);
    logits << 0.405465108108164, 0.0, 0.405465108108164, 0.0;
    const CalibrationReport r = calibration(logits, {0, 1}, 15);
    check(std::abs(r.ece - 0.1) <= 1e-9 && std::abs(r.mce - 0.1) <= 1e-9,
          "ece/mce hand case");
  }
  std::cout << (failures == 0 ? "selftest passed\n" : "selftest FAILED\n");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"correlated-GP attention workbench"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir, attention, checkpoint, logits_csv;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int repeats = 20, probes = 50;
  double eps = 1e-5;
  std::vector<int> n_values, m_values;

  app.add_option("--config", config_path, "JSON run configuration");
  auto* seed_opt = app.add_option("--seed", seed, "root seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--attention", attention,
                 "softmax|kernel_sym|kernel_asym|cgp_exact|cgp_sparse");

  auto* train_cmd = app.add_subcommand("train", "train and emit reports");
  auto* eval_cmd = app.add_subcommand("eval", "calibration of a checkpoint or logits CSV");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint path");
  eval_cmd->add_option("--logits", logits_csv, "logits CSV (c0..cN,label)");
  auto* ood_cmd = app.add_subcommand("ood", "OOD detection suite");
  ood_cmd->add_option("--checkpoint", checkpoint, "checkpoint path");
  auto* bench_cmd = app.add_subcommand("bench", "attention step benchmark");
  bench_cmd->add_option("--n", n_values, "sequence lengths");
  bench_cmd->add_option("--m", m_values, "inducing sizes");
  bench_cmd->add_option("--repeats", repeats, "repeats per cell");
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check");
  grad_cmd->add_option("--probes", probes, "probed coordinates");
  grad_cmd->add_option("--eps", eps, "finite-difference step");
  auto* self_cmd = app.add_subcommand("selftest", "fast internal checks");

  CLI11_PARSE(app, argc, argv);
  seed_set = seed_opt->count() > 0;

  std::string effective_out = out_dir.empty() ? "out" : out_dir;
  try {
    const RunConfig cfg =
        make_config(config_path, seed, seed_set, out_dir, attention);
    effective_out = cfg.out_dir;
    if (train_cmd->parsed()) return cmd_train(cfg);
    if (eval_cmd->parsed()) return cmd_eval(cfg, checkpoint, logits_csv);
    if (ood_cmd->parsed()) return cmd_ood(cfg, checkpoint);
    if (bench_cmd->parsed())
      return cmd_bench(out_dir, n_values, m_values, repeats);
    if (grad_cmd->parsed()) return cmd_gradcheck(cfg, probes, eps);
    if (self_cmd->parsed()) return cmd_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_error_record(effective_out, e.what());
    return 1;
  }
  return 0;
}
