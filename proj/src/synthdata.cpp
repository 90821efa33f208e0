#include "bcmda/synthdata.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>

#include "bcmda/tensor_io.hpp"

namespace bcmda {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr std::uint64_t kGeometryTag = 0xB10B;  // blob layout stream
constexpr std::uint64_t kPhotoTag = 0x0F07;     // pixel-noise stream
constexpr int kMaxAttempts = 64;
constexpr double kMinFg = 0.05;
constexpr double kMaxFg = 0.40;

// Canonical pre-photometric intensity of a foreground class, on [0, 1].
// Backgrounds sit at (spec.background + 1) / 2, at most 0.5 for the supported
// range, so every class keeps visible contrast before the domain transform.
double class_level(int cls) { return std::max(0.30, 0.88 - 0.28 * (cls - 1)); }

struct Blob {
  double cy = 0, cx = 0;    // center, pixel coordinates
  double a = 1, b = 1;      // semi-axes
  double theta = 0;         // rotation
  double amp = 0;           // boundary perturbation amplitude
  double phase = 0;         // perturbation phase
  int lobes = 3;            // perturbation lobe count
};

Blob draw_blob(Rng& geo, Index h, Index w) {
  const double base = static_cast<double>(std::min(h, w));
  Blob bl;
  bl.a = geo.uniform(0.12, 0.26) * base;
  bl.b = geo.uniform(0.12, 0.26) * base;
  bl.theta = geo.uniform(0.0, kPi);
  bl.amp = geo.uniform(0.05, 0.18);
  bl.lobes = 3 + static_cast<int>(geo.uniform_int(5));
  bl.phase = geo.uniform(0.0, 2.0 * kPi);
  // Keep the whole perturbed outline inside the frame.
  const double reach = std::max(bl.a, bl.b) * (1.0 + bl.amp) + 1.0;
  bl.cy = geo.uniform(reach, static_cast<double>(h - 1) - reach);
  bl.cx = geo.uniform(reach, static_cast<double>(w - 1) - reach);
  return bl;
}

void paint(const Blob& bl, std::uint8_t cls, TensorU8& mask) {
  const Index h = mask.extent(0);
  const Index w = mask.extent(1);
  const double reach = std::max(bl.a, bl.b) * (1.0 + bl.amp) + 1.0;
  const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(bl.cy - reach)));
  const Index y1 = std::min<Index>(h - 1, static_cast<Index>(std::ceil(bl.cy + reach)));
  const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(bl.cx - reach)));
  const Index x1 = std::min<Index>(w - 1, static_cast<Index>(std::ceil(bl.cx + reach)));
  const double ct = std::cos(bl.theta);
  const double st = std::sin(bl.theta);
  for (Index y = y0; y <= y1; ++y) {
    for (Index x = x0; x <= x1; ++x) {
      const double dy = static_cast<double>(y) - bl.cy;
      const double dx = static_cast<double>(x) - bl.cx;
      const double u = (ct * dx + st * dy) / bl.a;
      const double v = (-st * dx + ct * dy) / bl.b;
      const double rho = std::hypot(u, v);
      const double phi = std::atan2(v, u);
      if (rho <= 1.0 + bl.amp * std::sin(bl.lobes * phi + bl.phase))
        mask.at({y, x}) = cls;
    }
  }
}

std::string format_index(int i) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

int parse_int(const std::string& s, const std::string& where) {
  int v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw FormatError(where + ": expected an integer, got \"" + s + "\"");
  return v;
}

}  // namespace

std::vector<DomainSpec> default_domains(int count) {
  if (count < 1) throw ParameterError("default_domains: count must be >= 1");
  static const std::array<DomainSpec, 4> presets = {{
      {0, 1.00f, 0.00f, 0.03f, 0.0f, 0.00f, -0.60f},
      {1, 0.60f, 0.18f, 0.06f, 7.0f, 0.18f, -0.40f},
      {2, 1.70f, -0.15f, 0.10f, 12.0f, 0.22f, -0.75f},
      {3, 0.80f, -0.22f, 0.05f, 17.0f, 0.14f, -0.30f},
  }};
  std::vector<DomainSpec> specs;
  specs.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    if (k < static_cast<int>(presets.size())) {
      specs.push_back(presets[static_cast<std::size_t>(k)]);
    } else {
      const int j = k - static_cast<int>(presets.size());
      DomainSpec s;
      s.id = k;
      s.gamma = 0.70f + 0.15f * static_cast<float>(j % 5);
      s.brightness = -0.20f + 0.10f * static_cast<float>(j % 5);
      s.noise_sigma = 0.03f + 0.01f * static_cast<float>(j % 4);
      s.texture_freq = 20.0f + 3.0f * static_cast<float>(j);  // monotone, keeps tuples distinct
      s.texture_amp = 0.08f + 0.02f * static_cast<float>(j % 3);
      s.background = -0.65f + 0.07f * static_cast<float>(j % 5);
      specs.push_back(s);
    }
  }
  return specs;
}

Sample gen_sample(const DomainSpec& spec, const Rng& rng, Index h, Index w, int classes) {
  if (classes < 2)
    throw ParameterError("gen_sample: classes must be >= 2, got " + std::to_string(classes));
  if (h < 32 || w < 32)
    throw ParameterError("gen_sample: extents must be >= 32, got " + std::to_string(h) + "x" +
                         std::to_string(w));
  if (!(spec.gamma > 0.0f))
    throw ParameterError("gen_sample: domain gamma must be positive");
  if (spec.noise_sigma < 0.0f)
    throw ParameterError("gen_sample: domain noise sigma must be non-negative");
  if (spec.background < -1.0f || spec.background > 0.0f)
    throw ParameterError("gen_sample: domain background must lie in [-1, 0]");

  // Geometry draws come from a child stream that never sees the domain
  // parameters, so a fixed seed yields the same mask under every domain.
  Rng geo = rng.fork(kGeometryTag);
  Rng photo = rng.fork(kPhotoTag);

  TensorU8 mask;
  bool placed = false;
  for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
    mask = TensorU8::zeros({h, w});
    const int blobs = 1 + static_cast<int>(geo.uniform_int(2));
    for (int k = 0; k < blobs; ++k) {
      const Blob bl = draw_blob(geo, h, w);
      const auto cls = static_cast<std::uint8_t>(1 + (k % (classes - 1)));
      paint(bl, cls, mask);
    }
    Index fg = 0;
    for (std::uint8_t m : mask.data()) fg += (m != 0);
    const double frac = static_cast<double>(fg) / static_cast<double>(h * w);
    placed = frac >= kMinFg && frac <= kMaxFg;
  }
  if (!placed)
    throw GenerationError("gen_sample: no blob layout with 5-40% foreground found for " +
                          std::to_string(h) + "x" + std::to_string(w) + " after " +
                          std::to_string(kMaxAttempts) + " attempts");

  const double bg01 = (static_cast<double>(spec.background) + 1.0) / 2.0;
  TensorF image = TensorF::zeros({1, h, w});
  float* out = image.data().data();
  const std::uint8_t* cls = mask.data().data();
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      double v01 = cls[i] == 0 ? bg01 : class_level(cls[i]);
      v01 = std::pow(v01, static_cast<double>(spec.gamma));
      double v = 2.0 * v01 - 1.0;
      if (spec.texture_amp != 0.0f) {
        const double span = (static_cast<double>(x) / static_cast<double>(w) +
                             static_cast<double>(y) / static_cast<double>(h)) /
                            2.0;
        v += static_cast<double>(spec.texture_amp) *
             std::sin(2.0 * kPi * static_cast<double>(spec.texture_freq) * span);
      }
      v += static_cast<double>(spec.brightness);
      if (spec.noise_sigma > 0.0f) v += static_cast<double>(spec.noise_sigma) * photo.normal();
      out[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
  }
  return Sample{std::move(image), std::move(mask), spec.id};
}

std::filesystem::path gen_dataset(const std::vector<DomainSpec>& specs,
                                  const DatasetConfig& cfg,
                                  const std::filesystem::path& out_dir) {
  if (specs.empty()) throw ParameterError("gen_dataset: need at least one domain spec");
  if (cfg.train_per_domain < 1 || cfg.test_per_domain < 1)
    throw ParameterError("gen_dataset: per-domain counts must be >= 1");
  if (cfg.num_labeled < 0) throw ParameterError("gen_dataset: num_labeled must be >= 0");
  std::set<int> ids;
  for (const auto& s : specs)
    if (!ids.insert(s.id).second)
      throw ParameterError("gen_dataset: duplicate domain id " + std::to_string(s.id));
  if (!ids.count(cfg.labeled_domain))
    throw ParameterError("gen_dataset: labeled domain " + std::to_string(cfg.labeled_domain) +
                         " is not among the provided specs");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("gen_dataset: cannot create " + out_dir.string() + ": " + ec.message());

  const Rng root = Rng(cfg.seed).fork(streams::kData);
  std::ostringstream manifest;
  for (const auto& spec : specs) {
    const std::filesystem::path sub = "d" + std::to_string(spec.id);
    std::filesystem::create_directories(out_dir / sub, ec);
    if (ec)
      throw IoError("gen_dataset: cannot create " + (out_dir / sub).string() + ": " + ec.message());
    const Rng dom = root.fork(static_cast<std::uint64_t>(spec.id));
    for (int split = 0; split < 2; ++split) {
      const bool is_train = split == 0;
      const int count = is_train ? cfg.train_per_domain : cfg.test_per_domain;
      const Rng split_rng = dom.fork(is_train ? 1u : 2u);
      for (int i = 0; i < count; ++i) {
        const Sample s = gen_sample(spec, split_rng.fork(static_cast<std::uint64_t>(i)),
                                    cfg.height, cfg.width, cfg.classes);
        const std::filesystem::path rel =
            sub / ((is_train ? "train_" : "test_") + format_index(i) + ".bin");
        const std::filesystem::path full = out_dir / rel;
        {
          std::ofstream os(full, std::ios::binary);
          if (!os) throw IoError("gen_dataset: cannot open " + full.string() + " for writing");
          write_tensor(os, s.image);
          write_tensor(os, s.mask);
          if (!os) throw IoError("gen_dataset: failed while writing " + full.string());
        }
        const bool labeled =
            is_train && spec.id == cfg.labeled_domain && i < cfg.num_labeled;
        manifest << rel.generic_string() << '\t' << spec.id << '\t'
                 << (is_train ? "train" : "test") << '\t'
                 << (labeled ? "labeled" : "unlabeled") << '\n';
      }
    }
  }

  const std::filesystem::path manifest_path = out_dir / "manifest.tsv";
  std::ofstream os(manifest_path, std::ios::binary);  // binary: byte-stable across platforms
  if (!os) throw IoError("gen_dataset: cannot open " + manifest_path.string() + " for writing");
  os << manifest.str();
  if (!os) throw IoError("gen_dataset: failed while writing " + manifest_path.string());
  return manifest_path;
}

Dataset::Dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open manifest " + manifest_path.string());
  dir_ = manifest_path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = manifest_path.string() + " line " + std::to_string(lineno);
    if (std::count(line.begin(), line.end(), '\t') != 3)
      throw FormatError(where + ": expected 4 tab-separated fields");
    std::array<std::string, 4> field;
    std::size_t begin = 0;
    for (std::size_t f = 0; f < 4; ++f) {
      const std::size_t tab = line.find('\t', begin);
      field[f] = line.substr(begin, tab == std::string::npos ? tab : tab - begin);
      begin = tab + 1;
    }
    if (field[0].empty()) throw FormatError(where + ": empty sample path");
    ManifestRow row;
    row.path = dir_ / std::filesystem::path(field[0]);
    row.domain = parse_int(field[1], where);
    if (field[2] == "train")
      row.train = true;
    else if (field[2] == "test")
      row.train = false;
    else
      throw FormatError(where + ": split must be train or test, got \"" + field[2] + "\"");
    if (field[3] == "labeled")
      row.labeled = true;
    else if (field[3] == "unlabeled")
      row.labeled = false;
    else
      throw FormatError(where + ": flag must be labeled or unlabeled, got \"" + field[3] + "\"");
    if (!std::filesystem::exists(row.path))
      throw IoError(where + ": references missing file " + row.path.string());
    rows_.push_back(std::move(row));
  }
}

Sample Dataset::load(std::size_t index) const {
  if (index >= rows_.size())
    throw ParameterError("Dataset::load: index " + std::to_string(index) + " out of range (" +
                         std::to_string(rows_.size()) + " rows)");
  const ManifestRow& row = rows_[index];
  std::ifstream is(row.path, std::ios::binary);
  if (!is) throw IoError("cannot open " + row.path.string());
  TensorF image = read_tensor<float>(is, row.path.string());
  TensorU8 mask = read_tensor<std::uint8_t>(is, row.path.string());
  if (image.rank() != 3 || image.extent(0) != 1 || mask.rank() != 2 ||
      image.extent(1) != mask.extent(0) || image.extent(2) != mask.extent(1))
    throw FormatError("sample shapes disagree in " + row.path.string() + ": image " +
                      shape_str(image.shape()) + ", mask " + shape_str(mask.shape()));
  return Sample{std::move(image), std::move(mask), row.domain};
}

std::vector<std::size_t> Dataset::select(std::optional<int> domain,
                                         std::optional<bool> train,
                                         std::optional<bool> labeled) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    const ManifestRow& r = rows_[i];
    if (domain && r.domain != *domain) continue;
    if (train && r.train != *train) continue;
    if (labeled && r.labeled != *labeled) continue;
    out.push_back(i);
  }
  return out;
}

std::vector<int> Dataset::domains() const {
  std::set<int> ids;
  for (const auto& r : rows_) ids.insert(r.domain);
  return std::vector<int>(ids.begin(), ids.end());
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i)
    std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
  return idx;
}

}  // namespace bcmda
