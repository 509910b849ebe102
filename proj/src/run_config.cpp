#include "cgpattn/run_config.hpp"

#include <fstream>

namespace cgpattn {

namespace {

std::string kernel_family_name(KernelFamily f) {
  switch (f) {
    case KernelFamily::CanonicalSE: return "canonical_se";
    case KernelFamily::ArdRbf: return "ard_rbf";
    case KernelFamily::ExpDot: return "exp_dot";
  }
  return "unknown";
}

KernelFamily kernel_family_from(const std::string& name) {
  if (name == "canonical_se") return KernelFamily::CanonicalSE;
  if (name == "ard_rbf") return KernelFamily::ArdRbf;
  if (name == "exp_dot") return KernelFamily::ExpDot;
  throw ValueError("unknown kernel family: " + name);
}

}  // namespace

ToyDataset DatasetSpec::build(std::uint64_t seed) const {
  if (kind == DatasetKind::Images)
    return make_toy_images(classes, per_class, side, patch, seed);
  return make_toy_grammar(size, max_len, seed);
}

void RunConfig::finalize() {
  if (dataset.kind == DatasetKind::Images) {
    model.input_dim = dataset.patch * dataset.patch;
    model.token_ids = false;
    const int per_side = dataset.side / dataset.patch;
    model.max_positions = per_side * per_side;
    model.classes = dataset.classes;
  } else {
    model.input_dim = kGrammarVocab;
    model.token_ids = true;
    model.max_positions = 2 * dataset.max_len;
    model.classes = 2;
    model.baseline_kernel = KernelFamily::ExpDot;
  }
}

Json run_config_to_json(const RunConfig& cfg) {
  Json j;
  j["model"] = {
      {"layers", cfg.model.layers},
      {"heads", cfg.model.heads},
      {"token_dim", cfg.model.token_dim},
      {"head_dim", cfg.model.head_dim},
      {"classes", cfg.model.classes},
      {"attention", to_string(cfg.model.attention)},
      {"baseline_kernel", kernel_family_name(cfg.model.baseline_kernel)},
      {"baseline_output_variance", cfg.model.baseline_output_variance},
      {"baseline_lengthscale", cfg.model.baseline_lengthscale},
      {"input_dim", cfg.model.input_dim},
      {"token_ids", cfg.model.token_ids},
      {"max_positions", cfg.model.max_positions},
      {"ffn_multiplier", cfg.model.ffn_multiplier},
      {"inducing_q", cfg.model.inducing_q},
      {"inducing_k", cfg.model.inducing_k},
      {"init_noise", cfg.model.init_noise},
  };
  j["train"] = {
      {"epochs", cfg.train.epochs},
      {"batch_size", cfg.train.batch_size},
      {"lr_initial", cfg.train.lr_initial},
      {"lr_final", cfg.train.lr_final},
      {"adam_beta1", cfg.train.adam_beta1},
      {"adam_beta2", cfg.train.adam_beta2},
      {"adam_eps", cfg.train.adam_eps},
      {"alpha_start", cfg.train.alpha_start},
      {"alpha_end", cfg.train.alpha_end},
      {"alpha_fixed", cfg.train.alpha_fixed},
      {"alpha_value", cfg.train.alpha_value},
      {"warm_epochs", cfg.train.warm_epochs},
      {"seed", cfg.train.seed},
      {"mc_samples", cfg.train.mc_samples},
      {"skip_regularizer", cfg.train.skip_regularizer},
  };
  j["dataset"] = {
      {"kind", cfg.dataset.kind == DatasetKind::Images ? "images" : "grammar"},
      {"classes", cfg.dataset.classes},
      {"per_class", cfg.dataset.per_class},
      {"side", cfg.dataset.side},
      {"patch", cfg.dataset.patch},
      {"size", cfg.dataset.size},
      {"max_len", cfg.dataset.max_len},
  };
  j["metrics"] = {
      {"bins", cfg.metrics.bins},
      {"ood_per_set", cfg.metrics.ood_per_set},
      {"probe_examples", cfg.metrics.probe_examples},
  };
  j["out_dir"] = cfg.out_dir;
  j["root_seed"] = cfg.root_seed;
  return j;
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.contains("layers")) cfg.model.layers = m.at("layers");
    if (m.contains("heads")) cfg.model.heads = m.at("heads");
    if (m.contains("token_dim")) cfg.model.token_dim = m.at("token_dim");
    if (m.contains("head_dim")) cfg.model.head_dim = m.at("head_dim");
    if (m.contains("classes")) cfg.model.classes = m.at("classes");
    if (m.contains("attention"))
      cfg.model.attention = attention_kind_from_string(m.at("attention"));
    if (m.contains("baseline_kernel"))
      cfg.model.baseline_kernel = kernel_family_from(m.at("baseline_kernel"));
    if (m.contains("baseline_output_variance"))
      cfg.model.baseline_output_variance = m.at("baseline_output_variance");
    if (m.contains("baseline_lengthscale"))
      cfg.model.baseline_lengthscale = m.at("baseline_lengthscale");
    if (m.contains("input_dim")) cfg.model.input_dim = m.at("input_dim");
    if (m.contains("token_ids")) cfg.model.token_ids = m.at("token_ids");
    if (m.contains("max_positions"))
      cfg.model.max_positions = m.at("max_positions");
    if (m.contains("ffn_multiplier"))
      cfg.model.ffn_multiplier = m.at("ffn_multiplier");
    if (m.contains("inducing_q")) cfg.model.inducing_q = m.at("inducing_q");
    if (m.contains("inducing_k")) cfg.model.inducing_k = m.at("inducing_k");
    if (m.contains("init_noise")) cfg.model.init_noise = m.at("init_noise");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    if (t.contains("epochs")) cfg.train.epochs = t.at("epochs");
    if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size");
    if (t.contains("lr_initial")) cfg.train.lr_initial = t.at("lr_initial");
    if (t.contains("lr_final")) cfg.train.lr_final = t.at("lr_final");
    if (t.contains("adam_beta1")) cfg.train.adam_beta1 = t.at("adam_beta1");
    if (t.contains("adam_beta2")) cfg.train.adam_beta2 = t.at("adam_beta2");
    if (t.contains("adam_eps")) cfg.train.adam_eps = t.at("adam_eps");
    if (t.contains("alpha_start")) cfg.train.alpha_start = t.at("alpha_start");
    if (t.contains("alpha_end")) cfg.train.alpha_end = t.at("alpha_end");
    if (t.contains("alpha_fixed")) cfg.train.alpha_fixed = t.at("alpha_fixed");
    if (t.contains("alpha_value")) cfg.train.alpha_value = t.at("alpha_value");
    if (t.contains("warm_epochs")) cfg.train.warm_epochs = t.at("warm_epochs");
    if (t.contains("seed")) cfg.train.seed = t.at("seed");
    if (t.contains("mc_samples")) cfg.train.mc_samples = t.at("mc_samples");
    if (t.contains("skip_regularizer"))
      cfg.train.skip_regularizer = t.at("skip_regularizer");
  }
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (d.contains("kind"))
      cfg.dataset.kind = d.at("kind") == "grammar" ? DatasetKind::Grammar
                                                   : DatasetKind::Images;
    if (d.contains("classes")) cfg.dataset.classes = d.at("classes");
    if (d.contains("per_class")) cfg.dataset.per_class = d.at("per_class");
    if (d.contains("side")) cfg.dataset.side = d.at("side");
    if (d.contains("patch")) cfg.dataset.patch = d.at("patch");
    if (d.contains("size")) cfg.dataset.size = d.at("size");
    if (d.contains("max_len")) cfg.dataset.max_len = d.at("max_len");
  }
  if (j.contains("metrics")) {
    const auto& m = j.at("metrics");
    if (m.contains("bins")) cfg.metrics.bins = m.at("bins");
    if (m.contains("ood_per_set")) cfg.metrics.ood_per_set = m.at("ood_per_set");
    if (m.contains("probe_examples"))
      cfg.metrics.probe_examples = m.at("probe_examples");
  }
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir");
  if (j.contains("root_seed")) cfg.root_seed = j.at("root_seed");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot open config: " + path);
  Json j;
  in >> j;
  return run_config_from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
  const std::string dump = run_config_to_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace cgpattn
