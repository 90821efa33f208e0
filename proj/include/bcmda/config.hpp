#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <string>

#include "bcmda/errors.hpp"

namespace bcmda {

enum class LrSchedule { kPoly, kConstant };

// How a labeled/unlabeled pair decides whether it counts as same-domain
// (same-domain pairs skip probability averaging): derive it per sample from
// the manifest, or force it for every pair.
enum class SameDomainMode { kAuto, kAlways, kNever };

// Pipeline-stage switches for ablations. Everything on is the full method;
// everything off keeps only the bidirectional CutMix baseline.
struct AblationToggles {
  bool fixmix = true;  // off: virtual views fall back to the weak views
  bool pdmix = true;   // off: the dynamic-virtual view falls back to the weak view
  bool avg = true;     // off: the averaged teacher probability is just the corrected one
  bool bpa = true;     // off: a single prototype set serves both blended roles
  bool pplc = true;    // off: corrected probabilities are the linear ones, bit-exact
};

struct TrainConfig {
  double lambda_fix = 0.75;   // fixed real/synthetic mixing weight
  double alpha = 0.70;        // Beta shape for the progressive mix
  double tau_temp = 0.05;     // cosine-head softmax temperature
  double tau = 0.95;          // confidence threshold (correction + filtering)
  int w_prime_ratio = 4;      // correlation maps act at W/w_prime_ratio
  double ema_decay = 0.99;    // teacher update decay
  double lr0 = 0.03;          // initial learning rate
  double momentum = 0.9;      // SGD momentum
  double weight_decay = 1e-4; // decoupled from the loss, applied in the step
  int t_max = 2000;           // total iterations
  int batch_size = 8;         // even: half labeled, half unlabeled
  std::uint64_t seed = 0;
  int labeled_domain = 0;
  AblationToggles ablation;
  LrSchedule lr_schedule = LrSchedule::kPoly;
  SameDomainMode same_domain = SameDomainMode::kAuto;
  int checkpoint_interval = 500;  // iterations between snapshots; 0 = final only
  int classes = 2;
  int levels = 3;          // backbone depth
  int base_channels = 8;   // backbone width at the top level
  int feature_dim = 16;    // backbone output channels / classifier input

  // Errors: ParameterError describing the first violated range.
  void validate() const;
};

// Parses flat `key = value` text: one pair per line, '#' starts a comment,
// blank lines ignored. Unknown or duplicate keys are errors, as are
// malformed values. `where` names the source in diagnostics.
// Errors: FormatError.
TrainConfig parse_config(std::istream& is, const std::string& where);

// Errors: IoError if the file cannot be opened, else as parse_config.
TrainConfig load_config(const std::filesystem::path& path);

// Canonical `key = value` rendering; parse_config(config_text(c)) == c.
std::string config_text(const TrainConfig& cfg);

// Short stable hash of the canonical text, for tagging reports/checkpoints.
std::string config_fingerprint(const TrainConfig& cfg);

}  // namespace bcmda
