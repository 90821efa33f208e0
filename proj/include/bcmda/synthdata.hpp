#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bcmda/rng.hpp"
#include "bcmda/tensor.hpp"

namespace bcmda {

// Photometric signature of one synthetic acquisition domain. Geometry (and
// therefore every mask) is deliberately independent of these parameters: the
// shift is appearance-only, like the same anatomy scanned on different
// machines.
struct DomainSpec {
  int id = 0;
  float gamma = 1.0f;         // exponent applied to [0, 1]-rescaled intensities
  float brightness = 0.0f;    // additive offset on the [-1, 1] scale
  float noise_sigma = 0.0f;   // Gaussian pixel noise, [-1, 1] scale
  float texture_freq = 0.0f;  // diagonal grating, cycles per image span
  float texture_amp = 0.0f;   // grating amplitude, [-1, 1] scale
  float background = -0.6f;   // background base level in [-1, 1]
};

// A ready trio of visibly distinct domains; ids beyond the presets continue
// the progression procedurally so any domain count stays pairwise distinct.
std::vector<DomainSpec> default_domains(int count);

struct Sample {
  TensorF image;   // [1, H, W], values in [-1, 1]
  TensorU8 mask;   // [H, W], class ids (0 = background)
  int domain_id = 0;
};

// Renders 1-2 elliptical blobs with sinusoidally perturbed boundaries (one
// foreground class per blob), then applies the domain's gamma, grating,
// brightness, and noise. Foreground covers 5-40% of the area; parameter draws
// that miss that window are redrawn a bounded number of times.
//
// Geometry consumes only a spec-independent child stream of `rng`, so two
// specs rendered from equal seeds produce identical masks.
//
// Errors: ParameterError if classes < 2 or h, w < 32; GenerationError if no
// feasible blob placement is found after the retry budget.
Sample gen_sample(const DomainSpec& spec, const Rng& rng, Index h, Index w, int classes);

struct DatasetConfig {
  int train_per_domain = 200;
  int test_per_domain = 50;
  int labeled_domain = 0;  // only this domain's train split gets labeled rows
  int num_labeled = 10;    // at most this many train rows flagged labeled
  Index height = 64;
  Index width = 64;
  int classes = 2;
  std::uint64_t seed = 0;
};

// Writes one binary file per sample (image tensor followed by mask tensor)
// under out_dir plus a tab-separated manifest:
//   <relative path>\t<domain id>\t<train|test>\t<labeled|unlabeled>
// Returns the manifest path. Regenerating with the same config and specs
// produces byte-identical files.
//
// Errors: ParameterError on empty specs, non-positive counts, or a labeled
// domain id not present in specs; IoError if out_dir cannot be written.
std::filesystem::path gen_dataset(const std::vector<DomainSpec>& specs,
                                  const DatasetConfig& cfg,
                                  const std::filesystem::path& out_dir);

struct ManifestRow {
  std::filesystem::path path;  // resolved against the manifest directory
  int domain = 0;
  bool train = true;
  bool labeled = false;
};

// Manifest-backed dataset. Rows are parsed and checked for existence up
// front (a missing file fails here, before any training step); tensors are
// read lazily per sample with header validation that names the file.
class Dataset {
 public:
  explicit Dataset(const std::filesystem::path& manifest_path);

  const std::vector<ManifestRow>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  // Loads and validates the sample behind row `index`.
  // Errors: ParameterError on out-of-range index; FormatError (naming the
  // file) on corrupt headers or an image/mask shape mismatch.
  Sample load(std::size_t index) const;

  // Row indices matching every provided filter (unset = accept all).
  std::vector<std::size_t> select(std::optional<int> domain,
                                  std::optional<bool> train,
                                  std::optional<bool> labeled) const;

  // Distinct domain ids present, ascending.
  std::vector<int> domains() const;

 private:
  std::filesystem::path dir_;
  std::vector<ManifestRow> rows_;
};

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  return Dataset(manifest_path);
}

// Per-epoch shuffling hook: a Fisher-Yates permutation of [0, n) drawn from
// `rng`, so an epoch's order is a pure function of the stream it is handed.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng rng);

}  // namespace bcmda
