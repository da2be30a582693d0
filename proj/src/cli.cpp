#include "sparse_moe/cli.hpp"

#include "sparse_moe/data_io.hpp"
#include "sparse_moe/em_trainer.hpp"
#include "sparse_moe/parallel.hpp"
#include "sparse_moe/serialization.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

namespace sparse_moe::cli {

namespace {

struct TrainArgs {
  std::string data;
  int experts = 0;
  double lambda_gate = 0;
  double lambda_expert = 0;
  std::string selector = "none";
  std::optional<double> lambda_mu;
  int iters = 30;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  std::string schedule = "full";
  std::string model_out;
  std::string report_out;
  std::optional<double> split;
  std::uint64_t split_seed = 0;
};

struct PredictArgs {
  std::string model;
  std::string data;
  std::string policy = "ones";
  std::string out;
};

struct InspectArgs {
  std::string model;
  double threshold = kZeroThreshold;
  std::string report;
};

struct SynthArgs {
  std::string preset;
  int n = 100;
  int noise_dims = 0;
  std::uint64_t seed = 0;
  std::string out;
};

std::string fixed6(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(6) << v;
  return s.str();
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  Hyperparams hyper;
  hyper.k = a.experts;
  hyper.lambda_nu = a.lambda_gate;
  hyper.lambda_omega = a.lambda_expert;
  hyper.selector_mode = parse_selector_mode(a.selector);
  hyper.lambda_mu = a.lambda_mu.value_or(hyper.selector_mode == SelectorMode::none ? a.experts : 1.0);
  hyper.max_iters = a.iters;
  hyper.tol = a.tol;
  hyper.seed = a.seed;
  hyper.schedule = parse_schedule(a.schedule);
  hyper.validate();

  DatasetD data = load_dataset(a.data);
  std::optional<DatasetD> holdout;
  if (a.split) {
    auto [train, test] = train_test_split(data, *a.split, a.split_seed);
    data = std::move(train);
    holdout = std::move(test);
  }

  FitOptions options;
  options.threads = threads_from_env();
  options.on_iteration = [&out](const ObjectiveRecord& rec) {
    out << "iter=" << rec.iter << " obj=" << std::setprecision(12) << rec.penalized_total << '\n';
  };
  const auto result = fit(data, hyper, options);
  save_model(a.model_out, result.model);
  if (!a.report_out.empty()) save_report(a.report_out, result.report);

  const auto& report = result.report;
  out << "iterations=" << report.iterations_run << " converged=" << (report.converged ? 1 : 0)
      << " sparsity=" << fixed6(report.sparsity) << '\n';
  if (holdout) {
    const Metrics m = evaluate(result.model, *holdout, SelectorPolicy::ones, options.threads);
    out << "holdout accuracy=" << fixed6(m.accuracy) << " nll=" << fixed6(m.nll) << '\n';
  }
  return kExitOk;
}

int cmd_predict(const PredictArgs& a) {
  const auto model = load_model(a.model);
  const SelectorPolicy policy = parse_selector_policy(a.policy);
  const Matrix<double> features = load_features(a.data, model.d());
  const Matrix<double> proba = predict_proba_rows(model, features, policy, threads_from_env());

  std::ofstream file(a.out, std::ios::binary);
  if (!file) throw DataError("cannot write '" + a.out + "'");
  std::ostringstream buf;
  buf << std::setprecision(9);
  for (Index n = 0; n < proba.rows(); ++n) {
    buf << model.label_names[static_cast<std::size_t>(argmax(proba.row(n).transpose()))];
    for (Index l = 0; l < proba.cols(); ++l) buf << ',' << proba(n, l);
    buf << '\n';
  }
  file << buf.str();
  if (!file) throw DataError("failed writing '" + a.out + "'");
  return kExitOk;
}

int cmd_evaluate(const PredictArgs& a, std::ostream& out) {
  const auto model = load_model(a.model);
  const SelectorPolicy policy = parse_selector_policy(a.policy);
  DatasetD data = load_dataset_with_labels(a.data, model.label_names);
  if (data.d() != model.d())
    throw DataError("dataset has " + std::to_string(data.d()) + " features, model expects " +
                    std::to_string(model.d()));
  const Metrics m = evaluate(model, data, policy, threads_from_env());
  out << "accuracy=" << fixed6(m.accuracy) << " nll=" << fixed6(m.nll) << '\n';
  return kExitOk;
}

void print_indices(std::ostream& out, const std::vector<Index>& idx) {
  out << '[';
  for (std::size_t j = 0; j < idx.size(); ++j) out << (j ? " " : "") << idx[j];
  out << "]\n";
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  const auto model = load_model(a.model);
  if (!(a.threshold >= 0)) throw ConfigError("threshold must be >= 0");
  const Index d = model.d();
  long surviving = 0;
  long total = 0;
  for (Index i = 0; i < model.k(); ++i) {
    std::vector<Index> kept;
    for (Index j = 0; j < d; ++j) {
      ++total;
      if (std::abs(model.gate.nu(i, j)) > a.threshold) {
        kept.push_back(j);
        ++surviving;
      }
    }
    out << "gate " << i << ": ";
    print_indices(out, kept);
  }
  for (Index i = 0; i < model.k(); ++i) {
    const auto& w = model.experts.by_expert[static_cast<std::size_t>(i)];
    std::vector<Index> kept;
    for (Index j = 0; j < d; ++j) {
      bool any = false;
      for (Index l = 0; l < w.rows(); ++l) {
        ++total;
        if (std::abs(w(l, j)) > a.threshold) {
          ++surviving;
          any = true;
        }
      }
      if (any) kept.push_back(j);
    }
    out << "expert " << i << ": ";
    print_indices(out, kept);
  }
  out << "surviving=" << surviving << " total=" << total << '\n';
  if (!a.report.empty()) {
    const FitReport report = load_report(a.report);
    out << "sparsity=" << fixed6(report.sparsity) << '\n';
    for (std::size_t c = 0; c < report.selector_histogram.size(); ++c)
      out << "active_experts=" << c << " instances=" << report.selector_histogram[c] << '\n';
  }
  return kExitOk;
}

int cmd_synth(const SynthArgs& a) {
  const SynthSpec spec = synth_preset(a.preset, a.n, a.noise_dims, a.seed);
  save_dataset(a.out, generate_synthetic(spec));
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse mixture-of-experts trainer"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Fit a model with EM");
  train_cmd->add_option("--data", train.data, "Training CSV")->required();
  train_cmd->add_option("--experts", train.experts, "Number of experts K")->required();
  train_cmd->add_option("--lambda-gate", train.lambda_gate, "L1 radius for gate rows")->required();
  train_cmd->add_option("--lambda-expert", train.lambda_expert, "L1 radius for expert rows")->required();
  train_cmd->add_option("--selector", train.selector, "none|l0|l1")
      ->check(CLI::IsMember({"none", "l0", "l1"}));
  train_cmd->add_option("--lambda-mu", train.lambda_mu, "Selector budget");
  train_cmd->add_option("--iters", train.iters, "Maximum EM iterations");
  train_cmd->add_option("--tol", train.tol, "Relative objective tolerance");
  train_cmd->add_option("--seed", train.seed, "RNG seed");
  train_cmd->add_option("--schedule", train.schedule, "full|fast")
      ->check(CLI::IsMember({"full", "fast"}));
  train_cmd->add_option("--model-out", train.model_out, "Model output path")->required();
  train_cmd->add_option("--report-out", train.report_out, "Fit report output path");
  train_cmd->add_option("--split", train.split, "Train on this stratified fraction, report the rest");
  train_cmd->add_option("--split-seed", train.split_seed, "Seed for --split");

  PredictArgs predict;
  auto* predict_cmd = app.add_subcommand("predict", "Write per-row labels and probabilities");
  predict_cmd->add_option("--model", predict.model)->required();
  predict_cmd->add_option("--data", predict.data)->required();
  predict_cmd->add_option("--selector-policy", predict.policy, "ones|gate-surrogate")
      ->check(CLI::IsMember({"ones", "gate-surrogate"}));
  predict_cmd->add_option("--out", predict.out)->required();

  PredictArgs evaluate_args;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Print accuracy and mean NLL");
  evaluate_cmd->add_option("--model", evaluate_args.model)->required();
  evaluate_cmd->add_option("--data", evaluate_args.data)->required();
  evaluate_cmd->add_option("--selector-policy", evaluate_args.policy, "ones|gate-surrogate")
      ->check(CLI::IsMember({"ones", "gate-surrogate"}));

  InspectArgs inspect;
  auto* inspect_cmd = app.add_subcommand("inspect", "List surviving features per gate and expert");
  inspect_cmd->add_option("--model", inspect.model)->required();
  inspect_cmd->add_option("--threshold", inspect.threshold, "Magnitude threshold");
  inspect_cmd->add_option("--report", inspect.report, "Fit report for the selector histogram");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth_cmd->add_option("--preset", synth.preset, "two-cluster-xor|grouped-four|noisy-subspace")
      ->required();
  synth_cmd->add_option("--n", synth.n, "Rows per cluster");
  synth_cmd->add_option("--noise-dims", synth.noise_dims, "Appended pure-noise features");
  synth_cmd->add_option("--seed", synth.seed, "RNG seed");
  synth_cmd->add_option("--out", synth.out)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train, out);
    if (*predict_cmd) return cmd_predict(predict);
    if (*evaluate_cmd) return cmd_evaluate(evaluate_args, out);
    if (*inspect_cmd) return cmd_inspect(inspect, out);
    if (*synth_cmd) return cmd_synth(synth);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const SolverError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitUsage;
}

}  // namespace sparse_moe::cli
