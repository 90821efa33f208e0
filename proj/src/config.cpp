#include "bcmda/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "bcmda/errors.hpp"

namespace bcmda {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

double parse_double(const std::string& v, const std::string& where) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw FormatError(where + ": expected a number, got \"" + v + "\"");
  }
  if (pos != v.size() || !std::isfinite(x))
    throw FormatError(where + ": expected a number, got \"" + v + "\"");
  return x;
}

long long parse_ll(const std::string& v, const std::string& where) {
  long long x = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
    throw FormatError(where + ": expected an integer, got \"" + v + "\"");
  return x;
}

std::uint64_t parse_u64(const std::string& v, const std::string& where) {
  std::uint64_t x = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
    throw FormatError(where + ": expected a non-negative integer, got \"" + v + "\"");
  return x;
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw FormatError(where + ": expected true/false, got \"" + v + "\"");
}

std::string fmt_double(double x) {
  // Shortest representation that round-trips; keeps the canonical text tidy.
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  double back = 0.0;
  for (int prec = 1; prec <= 16; ++prec) {
    char probe[64];
    std::snprintf(probe, sizeof(probe), "%.*g", prec, x);
    std::sscanf(probe, "%lf", &back);
    if (back == x) return probe;
  }
  return buf;
}

void check_range(bool ok, const std::string& what) {
  if (!ok) throw ParameterError("config: " + what);
}

}  // namespace

void TrainConfig::validate() const {
  check_range(lambda_fix >= 0.0 && lambda_fix <= 1.0, "lambda_fix must lie in [0, 1]");
  check_range(alpha > 0.0, "alpha must be positive");
  check_range(tau_temp > 0.0, "tau_temp must be positive");
  check_range(tau > 0.0 && tau < 1.0, "tau must lie in (0, 1)");
  check_range(w_prime_ratio >= 1, "w_prime_ratio must be >= 1");
  check_range(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay must lie in [0, 1)");
  check_range(lr0 > 0.0, "lr0 must be positive");
  check_range(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  check_range(weight_decay >= 0.0, "weight_decay must be >= 0");
  check_range(t_max >= 1, "t_max must be >= 1");
  check_range(batch_size >= 2 && batch_size % 2 == 0,
              "batch_size must be even (half labeled, half unlabeled) and >= 2");
  check_range(checkpoint_interval >= 0, "checkpoint_interval must be >= 0");
  check_range(classes >= 2, "classes must be >= 2");
  check_range(levels >= 1, "levels must be >= 1");
  check_range(base_channels >= 1, "base_channels must be >= 1");
  check_range(feature_dim >= 1, "feature_dim must be >= 1");
}

TrainConfig parse_config(std::istream& is, const std::string& where) {
  TrainConfig cfg;
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters;
  auto dbl = [](double& field) {
    return [&field](const std::string& v, const std::string& w) { field = parse_double(v, w); };
  };
  auto num = [](int& field) {
    return [&field](const std::string& v, const std::string& w) {
      const long long x = parse_ll(v, w);
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
        throw FormatError(w + ": integer out of range");
      field = static_cast<int>(x);
    };
  };
  auto flag = [](bool& field) {
    return [&field](const std::string& v, const std::string& w) { field = parse_bool(v, w); };
  };
  setters["lambda_fix"] = dbl(cfg.lambda_fix);
  setters["alpha"] = dbl(cfg.alpha);
  setters["tau_temp"] = dbl(cfg.tau_temp);
  setters["tau"] = dbl(cfg.tau);
  setters["w_prime_ratio"] = num(cfg.w_prime_ratio);
  setters["ema_decay"] = dbl(cfg.ema_decay);
  setters["lr0"] = dbl(cfg.lr0);
  setters["momentum"] = dbl(cfg.momentum);
  setters["weight_decay"] = dbl(cfg.weight_decay);
  setters["t_max"] = num(cfg.t_max);
  setters["batch_size"] = num(cfg.batch_size);
  setters["seed"] = [&cfg](const std::string& v, const std::string& w) {
    cfg.seed = parse_u64(v, w);
  };
  setters["labeled_domain"] = num(cfg.labeled_domain);
  setters["fixmix"] = flag(cfg.ablation.fixmix);
  setters["pdmix"] = flag(cfg.ablation.pdmix);
  setters["avg"] = flag(cfg.ablation.avg);
  setters["bpa"] = flag(cfg.ablation.bpa);
  setters["pplc"] = flag(cfg.ablation.pplc);
  setters["lr_schedule"] = [&cfg](const std::string& v, const std::string& w) {
    if (v == "poly")
      cfg.lr_schedule = LrSchedule::kPoly;
    else if (v == "constant")
      cfg.lr_schedule = LrSchedule::kConstant;
    else
      throw FormatError(w + ": lr_schedule must be poly or constant, got \"" + v + "\"");
  };
  setters["same_domain"] = [&cfg](const std::string& v, const std::string& w) {
    if (v == "auto")
      cfg.same_domain = SameDomainMode::kAuto;
    else if (v == "always")
      cfg.same_domain = SameDomainMode::kAlways;
    else if (v == "never")
      cfg.same_domain = SameDomainMode::kNever;
    else
      throw FormatError(w + ": same_domain must be auto, always, or never, got \"" + v + "\"");
  };
  setters["checkpoint_interval"] = num(cfg.checkpoint_interval);
  setters["classes"] = num(cfg.classes);
  setters["levels"] = num(cfg.levels);
  setters["base_channels"] = num(cfg.base_channels);
  setters["feature_dim"] = num(cfg.feature_dim);

  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string lw = where + " line " + std::to_string(lineno);
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(lw + ": expected `key = value`");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw FormatError(lw + ": expected `key = value`");
    const auto it = setters.find(key);
    if (it == setters.end()) throw FormatError(lw + ": unknown config key \"" + key + "\"");
    if (!seen.insert(key).second) throw FormatError(lw + ": duplicate config key \"" + key + "\"");
    it->second(value, lw);
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  return parse_config(is, path.string());
}

std::string config_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "lambda_fix = " << fmt_double(cfg.lambda_fix) << '\n';
  os << "alpha = " << fmt_double(cfg.alpha) << '\n';
  os << "tau_temp = " << fmt_double(cfg.tau_temp) << '\n';
  os << "tau = " << fmt_double(cfg.tau) << '\n';
  os << "w_prime_ratio = " << cfg.w_prime_ratio << '\n';
  os << "ema_decay = " << fmt_double(cfg.ema_decay) << '\n';
  os << "lr0 = " << fmt_double(cfg.lr0) << '\n';
  os << "momentum = " << fmt_double(cfg.momentum) << '\n';
  os << "weight_decay = " << fmt_double(cfg.weight_decay) << '\n';
  os << "t_max = " << cfg.t_max << '\n';
  os << "batch_size = " << cfg.batch_size << '\n';
  os << "seed = " << cfg.seed << '\n';
  os << "labeled_domain = " << cfg.labeled_domain << '\n';
  os << "fixmix = " << (cfg.ablation.fixmix ? "true" : "false") << '\n';
  os << "pdmix = " << (cfg.ablation.pdmix ? "true" : "false") << '\n';
  os << "avg = " << (cfg.ablation.avg ? "true" : "false") << '\n';
  os << "bpa = " << (cfg.ablation.bpa ? "true" : "false") << '\n';
  os << "pplc = " << (cfg.ablation.pplc ? "true" : "false") << '\n';
  os << "lr_schedule = " << (cfg.lr_schedule == LrSchedule::kPoly ? "poly" : "constant") << '\n';
  os << "same_domain = "
     << (cfg.same_domain == SameDomainMode::kAuto
             ? "auto"
             : cfg.same_domain == SameDomainMode::kAlways ? "always" : "never")
     << '\n';
  os << "checkpoint_interval = " << cfg.checkpoint_interval << '\n';
  os << "classes = " << cfg.classes << '\n';
  os << "levels = " << cfg.levels << '\n';
  os << "base_channels = " << cfg.base_channels << '\n';
  os << "feature_dim = " << cfg.feature_dim << '\n';
  return os.str();
}

std::string config_fingerprint(const TrainConfig& cfg) {
  // FNV-1a over the canonical text.
  const std::string text = config_text(cfg);
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace bcmda
