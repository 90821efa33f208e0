#include "bcmda/evaluate.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace bcmda {
namespace {

std::string fmt_g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::string(buf);
}

}  // namespace

MetricReport evaluate_with(const Predictor& predict, const Dataset& ds, Index classes,
                           const std::string& fingerprint, Hd95Mode mode) {
  if (classes < 2) throw ParameterError("evaluate: need at least 2 classes");
  MetricReport report;
  report.fingerprint = fingerprint;

  for (const int domain : ds.domains()) {
    const auto test_rows = ds.select(domain, false, std::nullopt);
    if (test_rows.empty()) {
      report.skipped.push_back(domain);
      continue;
    }
    const Index fg = classes - 1;
    std::vector<double> dice(fg, 0.0), jaccard(fg, 0.0), hd95(fg, 0.0), asd(fg, 0.0);
    for (const std::size_t row : test_rows) {
      const Sample sample = ds.load(row);
      const TensorU8 pred = predict(sample.image, row);
      if (pred.shape() != sample.mask.shape())
        throw DimensionError("evaluate: prediction " + shape_str(pred.shape()) +
                             " does not match mask " + shape_str(sample.mask.shape()));
      for (Index c = 1; c < classes; ++c) {
        const TensorU8 p = binarize(pred, static_cast<std::uint8_t>(c));
        const TensorU8 g = binarize(sample.mask, static_cast<std::uint8_t>(c));
        const OverlapResult ov = overlap_metrics(p, g);
        const SurfaceResult sf = surface_metrics(p, g, mode);
        dice[c - 1] += ov.dice;
        jaccard[c - 1] += ov.jaccard;
        hd95[c - 1] += sf.hd95;
        asd[c - 1] += sf.asd;
      }
    }
    const double n = static_cast<double>(test_rows.size());
    DomainMetrics dm;
    dm.domain = domain;
    dm.n = static_cast<Index>(test_rows.size());
    for (Index c = 1; c < classes; ++c) {
      ClassMetrics cm;
      cm.domain = domain;
      cm.cls = c;
      cm.dice = dice[c - 1] / n;
      cm.jaccard = jaccard[c - 1] / n;
      cm.hd95 = hd95[c - 1] / n;
      cm.asd = asd[c - 1] / n;
      cm.n = dm.n;
      report.rows.push_back(cm);
      dm.dice += cm.dice;
      dm.jaccard += cm.jaccard;
      dm.hd95 += cm.hd95;
      dm.asd += cm.asd;
    }
    dm.dice /= static_cast<double>(fg);
    dm.jaccard /= static_cast<double>(fg);
    dm.hd95 /= static_cast<double>(fg);
    dm.asd /= static_cast<double>(fg);
    report.domains.push_back(dm);
  }

  if (report.domains.empty())
    throw ContractError("evaluate: every domain has an empty test split");

  DomainMetrics avg;
  avg.domain = -1;
  for (const auto& dm : report.domains) {
    avg.dice += dm.dice;
    avg.jaccard += dm.jaccard;
    avg.hd95 += dm.hd95;
    avg.asd += dm.asd;
    avg.n += dm.n;
  }
  const double k = static_cast<double>(report.domains.size());
  avg.dice /= k;
  avg.jaccard /= k;
  avg.hd95 /= k;
  avg.asd /= k;
  report.average = avg;
  return report;
}

MetricReport evaluate(const TrainState& state, const TrainConfig& cfg, const Dataset& ds,
                      Hd95Mode mode) {
  const Predictor predict = [&state](const TensorF& image, std::size_t) {
    return infer(state, image);
  };
  return evaluate_with(predict, ds, cfg.classes, config_fingerprint(cfg), mode);
}

MetricReport evaluate(const std::filesystem::path& checkpoint,
                      const std::filesystem::path& manifest, Hd95Mode mode) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(manifest);
  return evaluate(ck.state, ck.cfg, ds, mode);
}

void write_report_csv(const std::filesystem::path& path, const MetricReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("report: cannot open " + path.string() + " for writing");
  out << "domain,class,dice,jaccard,hd95,asd,n\n";
  for (const auto& r : report.rows)
    out << r.domain << ',' << r.cls << ',' << fmt_g9(r.dice) << ',' << fmt_g9(r.jaccard) << ','
        << fmt_g9(r.hd95) << ',' << fmt_g9(r.asd) << ',' << r.n << "\n";
  if (!out) throw IoError("report: write failed for " + path.string());
}

std::string report_table(const MetricReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << std::setw(7) << "domain" << std::setw(7) << "class" << std::setw(10) << "dice"
      << std::setw(10) << "jaccard" << std::setw(10) << "hd95" << std::setw(10) << "asd"
      << std::setw(7) << "n" << "\n";
  for (const auto& r : report.rows)
    out << std::setw(7) << r.domain << std::setw(7) << r.cls << std::setw(10) << r.dice
        << std::setw(10) << r.jaccard << std::setw(10) << r.hd95 << std::setw(10) << r.asd
        << std::setw(7) << r.n << "\n";
  for (const auto& d : report.domains)
    out << std::setw(7) << d.domain << std::setw(7) << "all" << std::setw(10) << d.dice
        << std::setw(10) << d.jaccard << std::setw(10) << d.hd95 << std::setw(10) << d.asd
        << std::setw(7) << d.n << "\n";
  out << std::setw(7) << "avg" << std::setw(7) << "all" << std::setw(10) << report.average.dice
      << std::setw(10) << report.average.jaccard << std::setw(10) << report.average.hd95
      << std::setw(10) << report.average.asd << std::setw(7) << report.average.n << "\n";
  for (const int d : report.skipped)
    out << "warning: domain " << d << " has no test rows; excluded from the average\n";
  return out.str();
}

}  // namespace bcmda
