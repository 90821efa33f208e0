#pragma once

// Per-domain evaluation reports: runs plain inference over the test split of
// every domain, computes foreground-class overlap and surface metrics, and
// aggregates per class, per domain, and across domains.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bcmda/metrics.hpp"
#include "bcmda/synthdata.hpp"
#include "bcmda/tensor.hpp"
#include "bcmda/trainer.hpp"

namespace bcmda {

struct ClassMetrics {
  int domain = 0;
  Index cls = 0;  // foreground class id (1-based; 0 is background)
  double dice = 0.0;
  double jaccard = 0.0;
  double hd95 = 0.0;
  double asd = 0.0;
  Index n = 0;  // test samples contributing to the row
};

struct DomainMetrics {
  int domain = 0;  // -1 for the cross-domain average
  double dice = 0.0;
  double jaccard = 0.0;
  double hd95 = 0.0;
  double asd = 0.0;
  Index n = 0;
};

struct MetricReport {
  std::vector<ClassMetrics> rows;      // one per (domain, foreground class)
  std::vector<DomainMetrics> domains;  // class-averaged, one per evaluated domain
  DomainMetrics average;               // left-to-right arithmetic mean over `domains`
  std::vector<int> skipped;            // domains whose test split is empty
  std::string fingerprint;             // config fingerprint of the evaluated model
};

// Prediction source: maps a test image (plus its manifest row index) to a
// label map. Lets tests evaluate synthetic predictors without a checkpoint.
using Predictor = std::function<TensorU8(const TensorF& image, std::size_t row)>;

MetricReport evaluate_with(const Predictor& predict, const Dataset& ds, Index classes,
                           const std::string& fingerprint,
                           Hd95Mode mode = Hd95Mode::kPerDirection);

// Evaluates a trained state via infer(): student backbone + linear head only.
MetricReport evaluate(const TrainState& state, const TrainConfig& cfg, const Dataset& ds,
                      Hd95Mode mode = Hd95Mode::kPerDirection);

// Loads checkpoint and manifest from disk, then evaluates.
MetricReport evaluate(const std::filesystem::path& checkpoint,
                      const std::filesystem::path& manifest,
                      Hd95Mode mode = Hd95Mode::kPerDirection);

// CSV with header domain,class,dice,jaccard,hd95,asd,n; one row per
// (domain, foreground class).
void write_report_csv(const std::filesystem::path& path, const MetricReport& report);

// Fixed-width table with per-domain summaries, the cross-domain average, and
// a warning line for every skipped domain.
std::string report_table(const MetricReport& report);

}  // namespace bcmda
