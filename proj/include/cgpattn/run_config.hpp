#pragma once

#include <json.hpp>

#include <string>

#include "cgpattn/corruption.hpp"
#include "cgpattn/dataset.hpp"

namespace cgpattn {

using Json = nlohmann::json;

struct DatasetSpec {
  DatasetKind kind{DatasetKind::Images};
  int classes{4};
  int per_class{200};
  int side{8};
  int patch{2};
  int size{1000};   // grammar
  int max_len{12};  // grammar

  ToyDataset build(std::uint64_t seed) const;
};

struct MetricOptions {
  int bins{15};
  int ood_per_set{200};
  int probe_examples{32};  // oversmoothing probe subset
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DatasetSpec dataset;
  MetricOptions metrics;
  std::string out_dir{"out"};
  std::uint64_t root_seed{0};

  /// Fills the model's input/positions/classes fields from the dataset spec.
  void finalize();
};

Json run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::string& path);

/// FNV-1a hash of the canonical JSON serialization.
std::string config_hash(const RunConfig& cfg);

}  // namespace cgpattn
