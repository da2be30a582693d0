#pragma once

// JSON documents for trained models and fit reports.

#include "sparse_moe/em_trainer.hpp"
#include "sparse_moe/model.hpp"

#include <string>

namespace sparse_moe {

inline constexpr int kFormatVersion = 1;

std::string model_to_json(const MixtureModel<double>& model);
MixtureModel<double> model_from_json(const std::string& text);
void save_model(const std::string& path, const MixtureModel<double>& model);
MixtureModel<double> load_model(const std::string& path);

std::string report_to_json(const FitReport& report);
FitReport report_from_json(const std::string& text);
void save_report(const std::string& path, const FitReport& report);
FitReport load_report(const std::string& path);

}  // namespace sparse_moe
