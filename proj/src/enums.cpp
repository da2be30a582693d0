#include "sparse_moe/em_trainer.hpp"
#include "sparse_moe/model.hpp"

namespace sparse_moe {

std::string to_string(SelectorMode mode) {
  switch (mode) {
    case SelectorMode::none: return "none";
    case SelectorMode::l0: return "l0";
    case SelectorMode::l1: return "l1";
  }
  return "none";
}

std::string to_string(Schedule schedule) {
  return schedule == Schedule::fast ? "fast" : "full";
}

SelectorMode parse_selector_mode(const std::string& text) {
  if (text == "none") return SelectorMode::none;
  if (text == "l0") return SelectorMode::l0;
  if (text == "l1") return SelectorMode::l1;
  throw ConfigError("unknown selector mode '" + text + "'");
}

Schedule parse_schedule(const std::string& text) {
  if (text == "full") return Schedule::full;
  if (text == "fast") return Schedule::fast;
  throw ConfigError("unknown schedule '" + text + "'");
}

std::string to_string(SelectorPolicy policy) {
  return policy == SelectorPolicy::gate_surrogate ? "gate-surrogate" : "ones";
}

SelectorPolicy parse_selector_policy(const std::string& text) {
  if (text == "ones") return SelectorPolicy::ones;
  if (text == "gate-surrogate") return SelectorPolicy::gate_surrogate;
  throw ConfigError("unknown selector policy '" + text + "'");
}

}  // namespace sparse_moe
