#pragma once

// Training orchestration: the per-iteration update (augment, cross-domain
// synthesis, mixing, teacher-corrected pseudo-labels, four-branch student
// update), SGD with momentum and weight decay, EMA teacher maintenance,
// checkpointing, and plain linear-head inference.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bcmda/backbone.hpp"
#include "bcmda/config.hpp"
#include "bcmda/protohead.hpp"
#include "bcmda/tensor.hpp"

namespace bcmda {

// One row of the training history; serialized as CSV with columns
// t,L_in1,L_out1,L_in2,L_out2,total,lr,lambda_sim,gamma.
struct HistoryRow {
  Index t = 0;
  double l_in1 = 0.0;
  double l_out1 = 0.0;
  double l_in2 = 0.0;
  double l_out2 = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double lambda_sim = 0.0;
  double gamma = 0.0;
};

struct TrainState {
  Backbone<float> student;
  ClassifierBank<float> student_bank;
  Backbone<float> teacher;            // EMA copy, never receives gradients
  ClassifierBank<float> teacher_bank;
  std::vector<std::vector<float>> velocity;  // parallel to trainable_params()
  Index t = 0;
  std::vector<HistoryRow> history;
};

// Fresh student/teacher pair from the config's architecture fields. The
// teacher starts as an exact copy with gradients disabled. With BPA disabled
// the second prototype set is frozen (it never enters the forward pass).
TrainState init_state(const TrainConfig& cfg);

TrainState clone_state(const TrainState& state);

// Every student tensor the optimizer owns, with stable names, in a stable
// order. Excludes proto_w2 when BPA is off.
std::vector<std::pair<std::string, Tensor<float>*>> trainable_params(TrainState& state,
                                                                     const TrainConfig& cfg);

// Polynomial decay lr0 * (1 - t/t_max)^0.9, or constant lr0.
double lr_at(Index t, Index t_max, double lr0, LrSchedule schedule = LrSchedule::kPoly);

struct LabeledExample {
  TensorF image;  // [1, H, W]
  TensorU8 mask;  // [H, W]
};

struct UnlabeledExample {
  TensorF image;  // [1, H, W]
  int domain = 0;
};

using LabeledBatch = std::vector<LabeledExample>;
using UnlabeledBatch = std::vector<UnlabeledExample>;

// Pseudo-label correction step as used inside train_step. With the toggle off
// this returns p_l itself (same handle, bit-identical).
TensorF corrected_probability(const TensorF& p_c, const TensorF& p_l, double tau, bool pplc_on);

// Student-side prototype weights for the two cosine heads. With BPA disabled
// both heads share the single prototype set proto_w1.
BlendedWeights<float> student_blend(const ClassifierBank<float>& bank, Index t, Index t_max,
                                    bool bpa_on);

// Test seam: lets property tests drive internal corner cases of train_step.
struct StepOverrides {
  bool force_zero_filters = false;  // zero every supervision filter mask
};

// One full training iteration at state.t. Mutates the state in place (SGD
// step, EMA update, history append, t+1) and returns the recorded row.
// Batches must each hold batch_size/2 examples of identical spatial shape.
HistoryRow train_step(TrainState& state, const LabeledBatch& labeled,
                      const UnlabeledBatch& unlabeled, const TrainConfig& cfg,
                      const StepOverrides& overrides = {});

// Plain inference: student backbone -> linear head -> argmax. No
// augmentation, no label correction, cosine heads never invoked.
TensorU8 infer(const TrainState& state, const TensorF& image);

// Runs one probe iteration on synthetic data and reports the names of
// trainable tensors that received no gradient. Empty means full coverage.
std::vector<std::string> audit_parameter_coverage(const TrainConfig& cfg);

// Checkpoints bundle both networks, optimizer velocity, iteration counter,
// canonical config text, and the history so far in one binary file, written
// via temp-file-then-rename.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const TrainConfig& cfg);

struct Checkpoint {
  TrainState state;
  TrainConfig cfg;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& history);
std::vector<HistoryRow> read_history_csv(const std::filesystem::path& path);

struct RunResult {
  std::filesystem::path checkpoint;  // final snapshot
  std::filesystem::path history;     // CSV with exactly t_max rows
};

// Full training run over a generated dataset. Labeled pool: train rows
// flagged labeled; unlabeled pool: all remaining train rows across every
// domain. Batch order is a pure function of (seed, t) with a fresh shuffle
// each epoch. Resuming from a checkpoint reproduces the uninterrupted
// trajectory exactly.
RunResult run_training(const TrainConfig& cfg, const std::filesystem::path& manifest,
                       const std::filesystem::path& out_dir,
                       const std::optional<std::filesystem::path>& resume = std::nullopt,
                       std::ostream* progress = nullptr);

}  // namespace bcmda
