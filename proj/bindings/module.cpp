#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cgpattn/bench.hpp"
#include "cgpattn/runner.hpp"

namespace py = pybind11;
using namespace cgpattn;

namespace {

OodDetector detector_from_string(const std::string& name) {
  if (name == "max_softmax") return OodDetector::MaxSoftmax;
  if (name == "entropy") return OodDetector::Entropy;
  if (name == "energy_based") return OodDetector::EnergyBased;
  if (name == "kl_matching") return OodDetector::KLMatching;
  throw ValueError("unknown detector: " + name);
}

py::dict dataset_to_dict(const ToyDataset& ds) {
  const auto split = [](const ExampleSet& set) {
    py::list tokens;
    py::list labels;
    for (const auto& ex : set) {
      tokens.append(ex.tokens);
      labels.append(ex.label);
    }
    py::dict out;
    out["tokens"] = tokens;
    out["labels"] = labels;
    return out;
  };
  py::dict out;
  out["kind"] = ds.kind == DatasetKind::Images ? "images" : "grammar";
  out["train"] = split(ds.train);
  out["val"] = split(ds.val);
  out["test"] = split(ds.test);
  out["ood"] = split(ds.ood);
  out["classes"] = ds.classes;
  return out;
}

}  // namespace

PYBIND11_MODULE(_cgpattn, m) {
  m.doc() = "correlated-GP attention core";

  py::class_<BranchProjection>(m, "BranchProjection")
      .def(py::init([](const Matrix& weight, double scale) {
             return BranchProjection{weight, scale};
           }),
           py::arg("weight"), py::arg("scale") = 1.0)
      .def_readwrite("weight", &BranchProjection::weight)
      .def_readwrite("scale", &BranchProjection::scale);

  py::class_<McConfig>(m, "McConfig")
      .def(py::init([](int samples, std::uint64_t seed) {
             return McConfig{samples, seed};
           }),
           py::arg("sample_count") = 8, py::arg("seed") = 0)
      .def_readwrite("sample_count", &McConfig::sample_count)
      .def_readwrite("seed", &McConfig::seed);

  py::class_<CgpHeadParams>(m, "CgpHeadParams")
      .def(py::init([](const BranchProjection& q, const BranchProjection& k,
                       const Matrix& w_value, const Matrix& w_latent,
                       double noise) {
             return CgpHeadParams{q, k, w_value, w_latent, noise};
           }),
           py::arg("branch_q"), py::arg("branch_k"), py::arg("w_value"),
           py::arg("w_latent"), py::arg("noise") = 0.1)
      .def_readwrite("branch_q", &CgpHeadParams::branch_q)
      .def_readwrite("branch_k", &CgpHeadParams::branch_k)
      .def_readwrite("w_value", &CgpHeadParams::w_value)
      .def_readwrite("w_latent", &CgpHeadParams::w_latent)
      .def_readwrite("noise", &CgpHeadParams::noise);

  py::class_<InducingSets>(m, "InducingSets")
      .def(py::init([](const Matrix& s_q, const Matrix& s_k) {
             return InducingSets{s_q, s_k};
           }),
           py::arg("s_q"), py::arg("s_k"))
      .def_readwrite("s_q", &InducingSets::s_q)
      .def_readwrite("s_k", &InducingSets::s_k);

  py::class_<ScgpHeadParams>(m, "ScgpHeadParams")
      .def(py::init([](const CgpHeadParams& base, const InducingSets& ind) {
             return ScgpHeadParams{base, ind};
           }),
           py::arg("base"), py::arg("inducing"))
      .def_readwrite("base", &ScgpHeadParams::base)
      .def_readwrite("inducing", &ScgpHeadParams::inducing);

  py::class_<AttentionResult>(m, "AttentionResult")
      .def_readonly("v_plus", &AttentionResult::v_plus)
      .def_readonly("uncertainty", &AttentionResult::uncertainty)
      .def_readonly("predictive_cov", &AttentionResult::predictive_cov);

  // Kernels.
  m.def("eval_canonical", &eval_canonical, py::arg("x"), py::arg("y"));
  m.def("eval_branch", &eval_branch, py::arg("x"), py::arg("y"), py::arg("branch"));
  m.def("eval_cross", &eval_cross, py::arg("x"), py::arg("y"), py::arg("a"),
        py::arg("b"));
  m.def(
      "eval_ard_rbf",
      [](const Vector& x, const Vector& y, double output_variance,
         const Vector& lengthscales) {
        return eval_baseline(x, y, KernelKind::ard_rbf(output_variance, lengthscales));
      },
      py::arg("x"), py::arg("y"), py::arg("output_variance"),
      py::arg("lengthscales"));
  m.def(
      "eval_exp_dot",
      [](const Vector& x, const Vector& y, double output_variance,
         const Vector& lengthscales) {
        return eval_baseline(x, y, KernelKind::exp_dot(output_variance, lengthscales));
      },
      py::arg("x"), py::arg("y"), py::arg("output_variance"),
      py::arg("lengthscales"));
  m.def("gram_canonical", &gram_canonical_rows, py::arg("a"), py::arg("b"));

  // GP primitives.
  m.def("psd_solve", &psd_solve, py::arg("k"), py::arg("sigma2"), py::arg("b"));
  m.def("logdet_psd", &logdet_psd, py::arg("k"), py::arg("sigma2"));
  m.def("conditional", &conditional, py::arg("k_cross"), py::arg("k_obs"),
        py::arg("sigma2"), py::arg("z_obs"));
  m.def(
      "conditional_full",
      [](const Matrix& k_query, const Matrix& k_cross, const Matrix& k_obs,
         double sigma2, const Vector& z_obs) {
        const auto out = conditional_full(k_query, k_cross, k_obs, sigma2, z_obs);
        return py::make_tuple(out.mean, out.covariance);
      },
      py::arg("k_query"), py::arg("k_cross"), py::arg("k_obs"),
      py::arg("sigma2"), py::arg("z_obs"));
  m.def("sample_mvn", &sample_mvn, py::arg("k"), py::arg("count"),
        py::arg("seed"));

  // Exact and sparse attention.
  m.def("attention_matrix_exact", &attention_matrix_exact, py::arg("x"),
        py::arg("params"));
  m.def("forward_exact", &forward_exact, py::arg("x"), py::arg("params"),
        py::arg("mc"), py::arg("with_covariance") = false,
        py::arg("with_cache") = false);
  m.def("predictive_variance_exact", &predictive_variance_exact, py::arg("x"),
        py::arg("params"));
  m.def("regularizer_exact", &regularizer_exact, py::arg("nu_a"),
        py::arg("z_a"), py::arg("x"), py::arg("params"), py::arg("mc"));
  m.def("dtc_mean_operator", &dtc_mean_operator, py::arg("k_am"),
        py::arg("k_mm"), py::arg("k_mo"), py::arg("sigma2"));
  m.def("attention_matrix_sparse", &attention_matrix_sparse, py::arg("x"),
        py::arg("params"));
  m.def("forward_sparse", &forward_sparse, py::arg("x"), py::arg("params"),
        py::arg("mc"), py::arg("with_covariance") = false);
  m.def("predictive_variance_sparse", &predictive_variance_sparse,
        py::arg("x"), py::arg("params"));
  m.def("regularizer_sparse", &regularizer_sparse, py::arg("nu_a"),
        py::arg("z_a"), py::arg("x"), py::arg("params"));

  // Metrics.
  m.def(
      "calibration",
      [](const Matrix& logits, const std::vector<int>& labels, int bins) {
        const CalibrationReport r = calibration(logits, labels, bins);
        py::dict out;
        out["accuracy"] = r.accuracy;
        out["mcc"] = r.mcc;
        out["nll"] = r.nll;
        out["ece"] = r.ece;
        out["mce"] = r.mce;
        out["bin_count"] = r.bin_count;
        return out;
      },
      py::arg("logits"), py::arg("labels"), py::arg("bins") = 15);
  m.def("mcc", &mcc, py::arg("predictions"), py::arg("labels"));
  m.def(
      "ood_score",
      [](const Eigen::RowVectorXd& logits, const std::string& detector,
         py::object templates) {
        if (templates.is_none())
          return ood_score(logits, detector_from_string(detector));
        const Matrix val_logits = templates.cast<Matrix>();
        const KlTemplates fitted = fit_kl_templates(val_logits);
        return ood_score(logits, detector_from_string(detector), &fitted);
      },
      py::arg("logits"), py::arg("detector"),
      py::arg("val_logits") = py::none());
  m.def(
      "detection_metrics",
      [](const std::vector<double>& scores_in,
         const std::vector<double>& scores_out) {
        const DetectionMetrics d = detection_metrics(scores_in, scores_out);
        py::dict out;
        out["auroc"] = d.auroc;
        out["aupr_in"] = d.aupr_in;
        out["aupr_out"] = d.aupr_out;
        out["fpr_at_95"] = d.fpr_at_95;
        return out;
      },
      py::arg("scores_in"), py::arg("scores_out"));
  m.def("oversmoothing_probe", &oversmoothing_probe, py::arg("layer_outputs"));

  // Datasets and the full pipeline.
  m.def(
      "make_toy_images",
      [](int classes, int per_class, int side, int patch, std::uint64_t seed) {
        return dataset_to_dict(make_toy_images(classes, per_class, side, patch, seed));
      },
      py::arg("classes"), py::arg("per_class"), py::arg("side"),
      py::arg("patch"), py::arg("seed"));
  m.def(
      "make_toy_grammar",
      [](int size, int max_len, std::uint64_t seed) {
        return dataset_to_dict(make_toy_grammar(size, max_len, seed));
      },
      py::arg("size"), py::arg("max_len"), py::arg("seed"));
  m.def(
      "run_experiment",
      [](const std::string& config_json) {
        const RunConfig cfg = run_config_from_json(Json::parse(config_json));
        const RunArtifacts artifacts = run(cfg);
        return artifacts.results.dump();
      },
      py::arg("config_json"),
      "Runs the full train/eval pipeline; returns results.json as a string.");
  m.def(
      "bench_attention",
      [](const std::vector<int>& n_values, const std::vector<int>& m_values,
         int repeats) { return bench(n_values, m_values, repeats).to_csv(); },
      py::arg("n_values"), py::arg("m_values"), py::arg("repeats") = 5);
}
