#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "bcmda/evaluate.hpp"
#include "bcmda/synthdata.hpp"

using namespace bcmda;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "bcmda_eval_test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct EvalFixture {
  fs::path dir;
  fs::path manifest;
  Index classes = 3;

  EvalFixture() {
    dir = fresh_dir("dataset");
    DatasetConfig dc;
    dc.train_per_domain = 2;
    dc.test_per_domain = 3;
    dc.num_labeled = 1;
    dc.height = 32;
    dc.width = 32;
    dc.classes = static_cast<int>(classes);
    dc.seed = 11;
    manifest = gen_dataset(default_domains(2), dc, dir);
  }
};

}  // namespace

TEST_CASE("a perfect predictor scores 1.0 overlap and zero distance everywhere") {
  EvalFixture fx;
  const Dataset ds = load_dataset(fx.manifest);
  const Predictor oracle = [&ds](const TensorF&, std::size_t row) { return ds.load(row).mask; };
  const MetricReport report = evaluate_with(oracle, ds, fx.classes, "fp");
  REQUIRE(report.domains.size() == 2);
  REQUIRE(report.rows.size() == 4);  // 2 domains x 2 foreground classes
  for (const auto& r : report.rows) {
    CHECK(r.dice == 1.0);
    CHECK(r.jaccard == 1.0);
    CHECK(r.hd95 == 0.0);
    CHECK(r.asd == 0.0);
    CHECK(r.n == 3);
  }
  CHECK(report.average.dice == 1.0);
  CHECK(report.average.jaccard == 1.0);
  CHECK(report.average.hd95 == 0.0);
  CHECK(report.average.asd == 0.0);
  CHECK(report.average.n == 6);
  CHECK(report.average.domain == -1);
  CHECK(report.skipped.empty());
  CHECK(report.fingerprint == "fp");
}

TEST_CASE("a constant-background predictor earns zero overlap and the diagonal penalty") {
  EvalFixture fx;
  const Dataset ds = load_dataset(fx.manifest);
  const Predictor blank = [](const TensorF& image, std::size_t) {
    return TensorU8::zeros({image.extent(1), image.extent(2)});
  };
  const MetricReport report = evaluate_with(blank, ds, fx.classes, "blank");
  const double diag = std::hypot(32.0, 32.0);

  // Expected values straight from the ground truth: a sample whose mask lacks
  // the class matches the empty prediction perfectly (dice 1, distance 0);
  // any sample with the class present scores dice 0 and the diagonal penalty.
  for (const auto& r : report.rows) {
    double dice = 0.0, dist = 0.0;
    Index n = 0;
    for (const auto& row : ds.select(r.domain, false, std::nullopt)) {
      const Sample s = ds.load(row);
      bool present = false;
      for (const auto v : s.mask.data()) present = present || v == r.cls;
      dice += present ? 0.0 : 1.0;
      dist += present ? diag : 0.0;
      ++n;
    }
    REQUIRE(n == 3);
    CHECK(r.dice == dice / 3.0);
    CHECK(r.jaccard == dice / 3.0);
    CHECK(r.hd95 == doctest::Approx(dist / 3.0).epsilon(1e-12));
    CHECK(r.asd == doctest::Approx(dist / 3.0).epsilon(1e-12));
    CHECK(r.dice < 1.0);  // the generator places foreground in every domain
  }
}

TEST_CASE("the average row is the exact arithmetic mean of per-domain rows") {
  EvalFixture fx;
  const Dataset ds = load_dataset(fx.manifest);
  // A deliberately imperfect predictor: correct labels on one domain, blank
  // on the other, so the per-domain rows genuinely differ.
  const Predictor mixed = [&ds](const TensorF& image, std::size_t row) {
    const Sample s = ds.load(row);
    if (s.domain_id == 0) return s.mask;
    return TensorU8::zeros({image.extent(1), image.extent(2)});
  };
  const MetricReport report = evaluate_with(mixed, ds, fx.classes, "mixed");
  REQUIRE(report.domains.size() == 2);
  CHECK(report.domains[0].dice != report.domains[1].dice);
  double dice = 0.0, jac = 0.0, hd = 0.0, asd = 0.0;
  for (const auto& d : report.domains) {
    dice += d.dice;
    jac += d.jaccard;
    hd += d.hd95;
    asd += d.asd;
  }
  const double k = static_cast<double>(report.domains.size());
  CHECK(report.average.dice == dice / k);
  CHECK(report.average.jaccard == jac / k);
  CHECK(report.average.hd95 == hd / k);
  CHECK(report.average.asd == asd / k);

  // Per-domain rows are themselves the mean of their per-class rows.
  for (const auto& d : report.domains) {
    double cls_dice = 0.0;
    int cnt = 0;
    for (const auto& r : report.rows)
      if (r.domain == d.domain) {
        cls_dice += r.dice;
        ++cnt;
      }
    REQUIRE(cnt == 2);
    CHECK(d.dice == cls_dice / 2.0);
  }
}

TEST_CASE("domains without test rows are skipped with a warning") {
  EvalFixture fx;
  // Drop domain 1's test rows from the manifest; its files stay on disk.
  std::istringstream in(slurp(fx.manifest));
  std::string line, kept;
  while (std::getline(in, line))
    if (line.find("d1/test_") == std::string::npos) kept += line + "\n";
  const fs::path trimmed = fx.dir / "manifest_trimmed.tsv";
  std::ofstream(trimmed) << kept;

  const Dataset ds = load_dataset(trimmed);
  const Predictor oracle = [&ds](const TensorF&, std::size_t row) { return ds.load(row).mask; };
  const MetricReport report = evaluate_with(oracle, ds, fx.classes, "skip");
  REQUIRE(report.skipped.size() == 1);
  CHECK(report.skipped[0] == 1);
  REQUIRE(report.domains.size() == 1);
  CHECK(report.domains[0].domain == 0);
  CHECK(report.average.dice == report.domains[0].dice);

  const std::string table = report_table(report);
  CHECK(table.find("warning: domain 1 has no test rows") != std::string::npos);
  CHECK(table.find("avg") != std::string::npos);
}

TEST_CASE("report CSV carries one row per domain and foreground class") {
  EvalFixture fx;
  const Dataset ds = load_dataset(fx.manifest);
  const Predictor oracle = [&ds](const TensorF&, std::size_t row) { return ds.load(row).mask; };
  const MetricReport report = evaluate_with(oracle, ds, fx.classes, "csv");
  const fs::path out = fresh_dir("csv_out") / "report.csv";
  write_report_csv(out, report);
  std::istringstream in(slurp(out));
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "domain,class,dice,jaccard,hd95,asd,n");
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 6);
  }
  CHECK(rows == 4);
}

TEST_CASE("evaluating a training state never touches the cosine heads") {
  EvalFixture fx;
  TrainConfig cfg;
  cfg.classes = static_cast<int>(fx.classes);
  cfg.base_channels = 4;
  cfg.feature_dim = 8;
  const TrainState st = init_state(cfg);
  const Dataset ds = load_dataset(fx.manifest);
  const auto calls_before = cossim_call_count().load();
  const MetricReport report = evaluate(st, cfg, ds);
  CHECK(cossim_call_count().load() == calls_before);
  CHECK(report.fingerprint == config_fingerprint(cfg));
  for (const auto& r : report.rows) {
    CHECK(r.dice >= 0.0);
    CHECK(r.dice <= 1.0);
    CHECK(r.jaccard >= 0.0);
    CHECK(r.jaccard <= 1.0);
    CHECK(r.hd95 >= 0.0);
    CHECK(r.asd >= 0.0);
  }
}

TEST_CASE("evaluate loads checkpoints from disk") {
  EvalFixture fx;
  TrainConfig cfg;
  cfg.classes = static_cast<int>(fx.classes);
  cfg.base_channels = 4;
  cfg.feature_dim = 8;
  const TrainState st = init_state(cfg);
  const fs::path ckpt = fresh_dir("eval_ckpt") / "state.bin";
  save_checkpoint(ckpt, st, cfg);
  const MetricReport report = evaluate(ckpt, fx.manifest);
  CHECK(report.fingerprint == config_fingerprint(cfg));
  CHECK(report.domains.size() == 2);
  CHECK_THROWS_AS(evaluate(fs::path("/nonexistent/ckpt.bin"), fx.manifest), IoError);
}

TEST_CASE("evaluate rejects broken predictors and empty datasets") {
  EvalFixture fx;
  const Dataset ds = load_dataset(fx.manifest);
  const Predictor wrong_shape = [](const TensorF&, std::size_t) {
    return TensorU8::zeros({4, 4});
  };
  CHECK_THROWS_AS(evaluate_with(wrong_shape, ds, fx.classes, "bad"), DimensionError);
  const Predictor oracle = [&ds](const TensorF&, std::size_t row) { return ds.load(row).mask; };
  CHECK_THROWS_AS(evaluate_with(oracle, ds, 1, "bad"), ParameterError);

  // Every domain empty: manifest with train rows only.
  std::istringstream in(slurp(fx.manifest));
  std::string line, kept;
  while (std::getline(in, line))
    if (line.find("test_") == std::string::npos) kept += line + "\n";
  const fs::path no_test = fx.dir / "manifest_no_test.tsv";
  std::ofstream(no_test) << kept;
  const Dataset ds2 = load_dataset(no_test);
  CHECK_THROWS_AS(evaluate_with(oracle, ds2, fx.classes, "none"), ContractError);
}
