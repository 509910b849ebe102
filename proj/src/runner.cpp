#include "cgpattn/runner.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>

#include "cgpattn/checkpoint.hpp"
#include "cgpattn/gp_core.hpp"

namespace cgpattn {

namespace {

std::vector<int> labels_of(const ExampleSet& set) {
  std::vector<int> out;
  out.reserve(set.size());
  for (const auto& ex : set) out.push_back(ex.label);
  return out;
}

Json mean_calibration_json(const std::vector<CalibrationReport>& reports) {
  Json j;
  double acc = 0, mcc_v = 0, nll = 0, ece = 0, mce = 0;
  for (const auto& r : reports) {
    acc += r.accuracy;
    mcc_v += r.mcc;
    nll += r.nll;
    ece += r.ece;
    mce += r.mce;
  }
  const double n = static_cast<double>(reports.size());
  j["accuracy"] = acc / n;
  j["mcc"] = mcc_v / n;
  j["nll"] = nll / n;
  j["ece"] = ece / n;
  j["mce"] = mce / n;
  j["reports"] = static_cast<int>(reports.size());
  return j;
}

std::vector<double> scores_of(const Matrix& logits, OodDetector det,
                              const KlTemplates& templates) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r)
    out.push_back(ood_score(logits.row(r), det, &templates));
  return out;
}

}  // namespace

Json calibration_to_json(const CalibrationReport& report) {
  Json j;
  j["accuracy"] = report.accuracy;
  j["mcc"] = report.mcc;
  j["nll"] = report.nll;
  j["ece"] = report.ece;
  j["mce"] = report.mce;
  j["bin_count"] = report.bin_count;
  j["bins"] = Json::array();
  for (const auto& b : report.bins)
    j["bins"].push_back({{"confidence", b.confidence},
                         {"accuracy", b.accuracy},
                         {"weight", b.weight}});
  return j;
}

Json ood_report_to_json(const OodReport& report) {
  Json j = Json::array();
  for (const auto& d : report.detectors)
    j.push_back({{"detector", d.detector},
                 {"auroc", d.metrics.auroc},
                 {"aupr_in", d.metrics.aupr_in},
                 {"aupr_out", d.metrics.aupr_out},
                 {"fpr_at_95", d.metrics.fpr_at_95}});
  return j;
}

Matrix collect_logits(const TransformerModel& model, const ExampleSet& data,
                      std::uint64_t seed, int mc_samples) {
  Matrix logits(static_cast<Index>(data.size()), model.config().classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto out =
        model.forward_value(data[i].tokens, Rng::derive(seed, i), mc_samples);
    logits.row(static_cast<Index>(i)) = out.logits;
  }
  return logits;
}

Json strip_volatile_fields(Json results) {
  results.erase("timestamp");
  return results;
}

RunArtifacts run(const RunConfig& raw_cfg) {
  RunConfig cfg = raw_cfg;
  cfg.finalize();
  reset_jitter_events();

  std::filesystem::create_directories(cfg.out_dir);

  const std::uint64_t data_seed = Rng::derive(cfg.root_seed, 101);
  const std::uint64_t init_seed = Rng::derive(cfg.root_seed, 102);
  const std::uint64_t eval_seed = Rng::derive(cfg.root_seed, 103);
  ToyDataset data = cfg.dataset.build(data_seed);

  TransformerModel model(cfg.model);
  model.init_params(init_seed, &data.train);
  TrainConfig tc = cfg.train;
  if (tc.seed == 0) tc.seed = Rng::derive(cfg.root_seed, 104);
  const TrainResult trained = train(model, tc, data.train, data.val);

  Json results;
  results["schema_version"] = 1;
  results["config"] = run_config_to_json(cfg);
  results["config_hash"] = config_hash(cfg);
  results["seed"] = cfg.root_seed;

  // Training history.
  Json history = Json::array();
  for (const auto& e : trained.history)
    history.push_back({{"task_loss", e.task_loss},
                       {"regularizer", e.regularizer},
                       {"alpha", e.alpha},
                       {"lr", e.lr},
                       {"val_accuracy", e.val_accuracy}});
  results["history"] = history;

  // Clean calibration.
  const Matrix test_logits =
      collect_logits(model, data.test, eval_seed, tc.mc_samples);
  const CalibrationReport clean =
      calibration(test_logits, labels_of(data.test), cfg.metrics.bins);
  results["calibration"] = Json{{"clean", calibration_to_json(clean)}};

  // Per-corruption-category means over severities 1..5 (images only).
  if (data.kind == DatasetKind::Images) {
    Json corr;
    for (const auto category : corruption_categories()) {
      std::vector<CalibrationReport> reports;
      for (int severity = 1; severity <= 5; ++severity) {
        CorruptionSpec spec;
        spec.category = category;
        spec.severity = severity;
        spec.seed = Rng::derive(cfg.root_seed,
                                200 + 10 * static_cast<int>(category) + severity);
        ToyDataset corrupted = data;
        corrupted.train.clear();
        corrupted.val.clear();
        corrupted = corrupt(corrupted, spec);
        const Matrix logits =
            collect_logits(model, corrupted.test, eval_seed, tc.mc_samples);
        reports.push_back(
            calibration(logits, labels_of(corrupted.test), cfg.metrics.bins));
      }
      corr[to_string(category)] = mean_calibration_json(reports);
    }
    results["calibration"]["corruption"] = corr;
  }

  // OOD detection.
  {
    const Matrix val_logits =
        collect_logits(model, data.val, eval_seed, tc.mc_samples);
    const KlTemplates templates = fit_kl_templates(val_logits);
    const std::vector<OodDetector> detectors = {
        OodDetector::KLMatching, OodDetector::MaxSoftmax, OodDetector::Entropy,
        OodDetector::EnergyBased};

    std::vector<ExampleSet> outlier_sets;
    std::vector<std::string> outlier_names;
    if (data.kind == DatasetKind::Images) {
      for (const auto& name : ood_image_set_names()) {
        outlier_sets.push_back(make_ood_image_set(
            name, data, cfg.metrics.ood_per_set,
            Rng::derive(cfg.root_seed, 300 + outlier_sets.size())));
        outlier_names.push_back(name);
      }
    } else {
      outlier_sets.push_back(data.ood);
      outlier_names.push_back("long_strings");
    }

    std::vector<Matrix> outlier_logits;
    for (const auto& set : outlier_sets)
      outlier_logits.push_back(
          collect_logits(model, set, eval_seed, tc.mc_samples));

    OodReport report;
    for (const auto det : detectors) {
      const std::vector<double> in_scores =
          scores_of(test_logits, det, templates);
      DetectionMetrics mean{};
      for (const auto& logits : outlier_logits) {
        const DetectionMetrics m =
            detection_metrics(in_scores, scores_of(logits, det, templates));
        mean.auroc += m.auroc;
        mean.aupr_in += m.aupr_in;
        mean.aupr_out += m.aupr_out;
        mean.fpr_at_95 += m.fpr_at_95;
      }
      const double n = static_cast<double>(outlier_logits.size());
      mean.auroc /= n;
      mean.aupr_in /= n;
      mean.aupr_out /= n;
      mean.fpr_at_95 /= n;
      report.detectors.push_back({to_string(det), mean});
    }
    results["ood"] = ood_report_to_json(report);
    results["ood_sets"] = outlier_names;
    if (data.kind == DatasetKind::Grammar) {
      const CalibrationReport ood_cal = calibration(
          outlier_logits[0], labels_of(data.ood), cfg.metrics.bins);
      results["calibration"]["ood_split"] = calibration_to_json(ood_cal);
    }
  }

  // Oversmoothing probe on a test subset: mean per-layer cosine similarity.
  {
    const int probe_n = std::min<int>(cfg.metrics.probe_examples,
                                      static_cast<int>(data.test.size()));
    std::vector<double> per_layer(static_cast<std::size_t>(cfg.model.layers), 0.0);
    for (int i = 0; i < probe_n; ++i) {
      const auto out = model.forward_value(
          data.test[static_cast<std::size_t>(i)].tokens,
          Rng::derive(eval_seed, static_cast<std::uint64_t>(i)), tc.mc_samples);
      const auto sims = oversmoothing_probe(out.layer_tokens);
      for (std::size_t l = 0; l < sims.size(); ++l) per_layer[l] += sims[l];
    }
    for (auto& v : per_layer) v /= static_cast<double>(probe_n);
    results["oversmoothing"] = per_layer;
  }

  results["jitter_events"] = jitter_event_count();
  results["parameter_count"] = model.params().total_count();
  results["timestamp"] =
      static_cast<long long>(std::chrono::duration_cast<std::chrono::seconds>(
                                 std::chrono::system_clock::now().time_since_epoch())
                                 .count());

  RunArtifacts artifacts;
  artifacts.results = results;
  artifacts.results_path = cfg.out_dir + "/results.json";
  artifacts.csv_path = cfg.out_dir + "/results.csv";
  artifacts.checkpoint_path = cfg.out_dir + "/checkpoint.bin";

  {
    std::ofstream out(artifacts.results_path);
    out << results.dump(2) << "\n";
  }
  {
    std::ofstream csv(artifacts.csv_path);
    csv << "section,key,value\n";
    csv.precision(17);
    const auto emit = [&csv](const std::string& section, const Json& obj) {
      for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (it.value().is_number())
          csv << section << "," << it.key() << "," << it.value().dump() << "\n";
      }
    };
    emit("calibration.clean", results["calibration"]["clean"]);
    if (results["calibration"].contains("corruption"))
      for (auto it = results["calibration"]["corruption"].begin();
           it != results["calibration"]["corruption"].end(); ++it)
        emit("calibration.corruption." + it.key(), it.value());
    int d = 0;
    for (const auto& det : results["ood"]) {
      emit("ood." + det.at("detector").get<std::string>(), det);
      ++d;
    }
    int l = 0;
    for (const auto& v : results["oversmoothing"]) {
      csv << "oversmoothing,layer" << l << "," << v.dump() << "\n";
      ++l;
    }
    csv << "meta,jitter_events," << results["jitter_events"].dump() << "\n";
    csv << "meta,parameter_count," << results["parameter_count"].dump() << "\n";
  }
  save_checkpoint(artifacts.checkpoint_path, model.params());
  return artifacts;
}

}  // namespace cgpattn
