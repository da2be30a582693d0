#include "sparse_moe/serialization.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace sparse_moe {

using nlohmann::json;

namespace {

json vector_json(const Vector<double>& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector<double> vector_from(const json& j, Index expected, const char* what) {
  const auto values = j.get<std::vector<double>>();
  if (static_cast<Index>(values.size()) != expected)
    throw DataError(std::string("model field '") + what + "' has the wrong length");
  return Eigen::Map<const Vector<double>>(values.data(), expected);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path + "'");
}

}  // namespace

std::string model_to_json(const MixtureModel<double>& model) {
  model.validate();
  const Index k = model.k();
  const Index q = model.q();
  json doc;
  doc["format_version"] = kFormatVersion;
  doc["k"] = k;
  doc["q"] = q;
  doc["d"] = model.d();
  doc["selector_mode"] = to_string(model.hyper.selector_mode);
  doc["schedule"] = to_string(model.hyper.schedule);
  doc["lambda_nu"] = model.hyper.lambda_nu;
  doc["lambda_omega"] = model.hyper.lambda_omega;
  doc["lambda_mu"] = model.hyper.lambda_mu;
  doc["max_iters"] = model.hyper.max_iters;
  doc["tol"] = model.hyper.tol;
  doc["seed"] = model.hyper.seed;
  doc["labels"] = model.label_names;
  doc["scaler"] = {{"mean", vector_json(model.scaler.mean)}, {"std", vector_json(model.scaler.std)}};

  json nu = json::array();
  for (Index i = 0; i < k; ++i) nu.push_back(vector_json(model.gate.nu.row(i).transpose()));
  doc["nu"] = std::move(nu);

  json omega = json::array();
  for (Index l = 0; l < q; ++l) {
    json per_class = json::array();
    for (Index i = 0; i < k; ++i)
      per_class.push_back(vector_json(model.experts.by_expert[static_cast<std::size_t>(i)].row(l).transpose()));
    omega.push_back(std::move(per_class));
  }
  doc["omega"] = std::move(omega);
  return doc.dump(2) + "\n";
}

MixtureModel<double> model_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("model document is not valid JSON: ") + e.what());
  }
  try {
    if (doc.at("format_version").get<int>() != kFormatVersion)
      throw DataError("unsupported model format_version");
    const Index k = doc.at("k").get<Index>();
    const Index q = doc.at("q").get<Index>();
    const Index d = doc.at("d").get<Index>();
    if (k < 1 || q < 2 || d < 1) throw DataError("model dimensions out of range");

    MixtureModel<double> model;
    model.hyper.k = static_cast<int>(k);
    model.hyper.selector_mode = parse_selector_mode(doc.at("selector_mode").get<std::string>());
    model.hyper.schedule = parse_schedule(doc.value("schedule", std::string("full")));
    model.hyper.lambda_nu = doc.at("lambda_nu").get<double>();
    model.hyper.lambda_omega = doc.at("lambda_omega").get<double>();
    model.hyper.lambda_mu = doc.at("lambda_mu").get<double>();
    model.hyper.max_iters = doc.value("max_iters", 30);
    model.hyper.tol = doc.value("tol", 1e-6);
    model.hyper.seed = doc.value("seed", std::uint64_t{0});
    if (doc.contains("labels")) model.label_names = doc.at("labels").get<std::vector<std::string>>();
    if (model.label_names.empty())
      for (Index l = 0; l < q; ++l) model.label_names.push_back(std::to_string(l));
    if (static_cast<Index>(model.label_names.size()) != q)
      throw DataError("model label list does not match q");

    model.scaler.mean = vector_from(doc.at("scaler").at("mean"), d, "scaler.mean");
    model.scaler.std = vector_from(doc.at("scaler").at("std"), d, "scaler.std");

    const auto& nu = doc.at("nu");
    if (static_cast<Index>(nu.size()) != k) throw DataError("model field 'nu' has the wrong length");
    model.gate.nu.resize(k, d + 1);
    for (Index i = 0; i < k; ++i) model.gate.nu.row(i) = vector_from(nu[static_cast<std::size_t>(i)], d + 1, "nu").transpose();

    const auto& omega = doc.at("omega");
    if (static_cast<Index>(omega.size()) != q) throw DataError("model field 'omega' has the wrong length");
    model.experts = ExpertParams<double>::zeros(k, q, d + 1);
    for (Index l = 0; l < q; ++l) {
      const auto& per_class = omega[static_cast<std::size_t>(l)];
      if (static_cast<Index>(per_class.size()) != k) throw DataError("model field 'omega' has the wrong shape");
      for (Index i = 0; i < k; ++i)
        model.experts.by_expert[static_cast<std::size_t>(i)].row(l) =
            vector_from(per_class[static_cast<std::size_t>(i)], d + 1, "omega").transpose();
    }
    model.validate();
    return model;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed model document: ") + e.what());
  } catch (const DimensionError& e) {
    throw DataError(std::string("inconsistent model document: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("invalid model document: ") + e.what());
  }
}

void save_model(const std::string& path, const MixtureModel<double>& model) {
  write_file(path, model_to_json(model));
}

MixtureModel<double> load_model(const std::string& path) { return model_from_json(read_file(path)); }

std::string report_to_json(const FitReport& report) {
  json doc;
  doc["format_version"] = kFormatVersion;
  json trace = json::array();
  for (const auto& r : report.trace)
    trace.push_back({{"iter", r.iter},
                     {"expected_complete_ll", r.expected_complete_ll},
                     {"l1_penalty_nu", r.l1_penalty_nu},
                     {"l1_penalty_omega", r.l1_penalty_omega},
                     {"selector_penalty", r.selector_penalty},
                     {"penalized_total", r.penalized_total}});
  doc["trace"] = std::move(trace);
  doc["iterations_run"] = report.iterations_run;
  doc["converged"] = report.converged;
  doc["sparsity"] = report.sparsity;
  doc["selector_histogram"] = report.selector_histogram;
  doc["solves"] = {{"gate", report.gate_solves},
                   {"expert_constrained", report.expert_constrained_solves},
                   {"expert_plain", report.expert_plain_solves},
                   {"selector", report.selector_solves}};
  doc["reinitialized_experts"] = report.reinitialized_experts;
  doc["damped_steps"] = report.damped_steps;
  doc["best_iteration"] = report.best_iteration;
  return doc.dump(2) + "\n";
}

FitReport report_from_json(const std::string& text) {
  try {
    const json doc = json::parse(text);
    FitReport report;
    for (const auto& r : doc.at("trace")) {
      ObjectiveRecord rec;
      rec.iter = r.at("iter").get<int>();
      rec.expected_complete_ll = r.at("expected_complete_ll").get<double>();
      rec.l1_penalty_nu = r.at("l1_penalty_nu").get<double>();
      rec.l1_penalty_omega = r.at("l1_penalty_omega").get<double>();
      rec.selector_penalty = r.at("selector_penalty").get<double>();
      rec.penalized_total = r.at("penalized_total").get<double>();
      report.trace.push_back(rec);
    }
    report.iterations_run = doc.at("iterations_run").get<int>();
    report.converged = doc.at("converged").get<bool>();
    report.sparsity = doc.at("sparsity").get<double>();
    report.selector_histogram = doc.at("selector_histogram").get<std::vector<long>>();
    const auto& solves = doc.at("solves");
    report.gate_solves = solves.at("gate").get<int>();
    report.expert_constrained_solves = solves.at("expert_constrained").get<int>();
    report.expert_plain_solves = solves.at("expert_plain").get<int>();
    report.selector_solves = solves.at("selector").get<int>();
    report.reinitialized_experts = doc.value("reinitialized_experts", 0);
    report.damped_steps = doc.value("damped_steps", 0);
    report.best_iteration = doc.value("best_iteration", -1);
    return report;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report document: ") + e.what());
  }
}

void save_report(const std::string& path, const FitReport& report) {
  write_file(path, report_to_json(report));
}

FitReport load_report(const std::string& path) { return report_from_json(read_file(path)); }

}  // namespace sparse_moe
