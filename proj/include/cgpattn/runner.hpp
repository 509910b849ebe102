#pragma once

#include "cgpattn/metrics.hpp"
#include "cgpattn/run_config.hpp"

namespace cgpattn {

Json calibration_to_json(const CalibrationReport& report);
Json ood_report_to_json(const OodReport& report);

struct RunArtifacts {
  Json results;
  std::string results_path;
  std::string csv_path;
  std::string checkpoint_path;
};

/// Full pipeline: build dataset, train, evaluate clean/corrupted calibration,
/// OOD detection, oversmoothing probe; writes results.json, results.csv and a
/// checkpoint under cfg.out_dir.
RunArtifacts run(const RunConfig& cfg);

/// Logits of the model on a dataset split (deterministic eval seeds).
Matrix collect_logits(const TransformerModel& model, const ExampleSet& data,
                      std::uint64_t seed, int mc_samples);

/// results.json minus fields that legitimately differ between reruns.
Json strip_volatile_fields(Json results);

}  // namespace cgpattn
