#include "bcmda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "bcmda/corrsynth.hpp"
#include "bcmda/losses.hpp"
#include "bcmda/mixing.hpp"
#include "bcmda/synthdata.hpp"
#include "bcmda/tensor_io.hpp"

namespace bcmda {
namespace {

namespace fs = std::filesystem;

BackboneDesc desc_from(const TrainConfig& cfg) {
  BackboneDesc desc;
  desc.in_channels = 1;
  desc.levels = cfg.levels;
  desc.base_channels = cfg.base_channels;
  desc.feature_channels = cfg.feature_dim;
  return desc;
}

void check_image(const TensorF& image, Index h, Index w, const char* what) {
  if (image.rank() != 3 || image.extent(0) != 1 || image.extent(1) != h || image.extent(2) != w)
    throw DimensionError(std::string("train_step: ") + what + " must be [1," +
                         std::to_string(h) + "," + std::to_string(w) + "], got " +
                         shape_str(image.shape()));
}

// Shortest decimal form that round-trips the exact double.
std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

const char* const kHistoryHeader = "t,L_in1,L_out1,L_in2,L_out2,total,lr,lambda_sim,gamma";

std::string history_csv_string(const std::vector<HistoryRow>& history) {
  std::ostringstream out;
  out << kHistoryHeader << "\n";
  for (const auto& r : history) {
    out << r.t << ',' << fmt_g17(r.l_in1) << ',' << fmt_g17(r.l_out1) << ','
        << fmt_g17(r.l_in2) << ',' << fmt_g17(r.l_out2) << ',' << fmt_g17(r.total) << ','
        << fmt_g17(r.lr) << ',' << fmt_g17(r.lambda_sim) << ',' << fmt_g17(r.gamma) << "\n";
  }
  return out.str();
}

double parse_history_double(const std::string& tok, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw FormatError("history: bad numeric field '" + tok + "' in " + where);
  }
}

std::vector<HistoryRow> parse_history(std::istream& in, const std::string& where) {
  std::string line;
  if (!std::getline(in, line) || line != kHistoryHeader)
    throw FormatError("history: missing or wrong header in " + where);
  std::vector<HistoryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> tok;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      tok.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (tok.size() != 9)
      throw FormatError("history: expected 9 fields, got " + std::to_string(tok.size()) +
                        " in " + where);
    HistoryRow r;
    r.t = static_cast<Index>(parse_history_double(tok[0], where));
    r.l_in1 = parse_history_double(tok[1], where);
    r.l_out1 = parse_history_double(tok[2], where);
    r.l_in2 = parse_history_double(tok[3], where);
    r.l_out2 = parse_history_double(tok[4], where);
    r.total = parse_history_double(tok[5], where);
    r.lr = parse_history_double(tok[6], where);
    r.lambda_sim = parse_history_double(tok[7], where);
    r.gamma = parse_history_double(tok[8], where);
    rows.push_back(r);
  }
  return rows;
}

// ---- checkpoint binary layout ----------------------------------------------
// magic "BCKP" | u32 version | u64 t | u32 entry count |
// entries: u32 name length | name bytes | u32 dtype (1=f32, 2=u8) | tensor.
// Text payloads (config, history) travel as u8 tensors of their bytes.

constexpr char kCkptMagic[4] = {'B', 'C', 'K', 'P'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& in, const std::string& where) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw FormatError("checkpoint: truncated file " + where);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in, const std::string& where) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8))
    throw FormatError("checkpoint: truncated file " + where);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

TensorU8 bytes_tensor(const std::string& text) {
  if (text.empty()) throw ContractError("checkpoint: refusing to store empty text payload");
  TensorU8 t = TensorU8::zeros({static_cast<Index>(text.size())});
  std::memcpy(t.data().data(), text.data(), text.size());
  return t;
}

std::string tensor_bytes(const TensorU8& t) {
  return std::string(reinterpret_cast<const char*>(t.data().data()), t.data().size());
}

std::string velocity_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "velocity/%04zu", k);
  return std::string(buf);
}

// Stable list of (name, tensor) pairs mirrored by save and load.
std::vector<std::pair<std::string, const Tensor<float>*>> snapshot_entries(const TrainState& s) {
  std::vector<std::pair<std::string, const Tensor<float>*>> out;
  for (const auto& [name, t] : s.student.params) out.emplace_back("student/" + name, &t);
  out.emplace_back("student_bank/linear_w", &s.student_bank.linear_w);
  out.emplace_back("student_bank/linear_b", &s.student_bank.linear_b);
  out.emplace_back("student_bank/proto_w1", &s.student_bank.proto_w1);
  out.emplace_back("student_bank/proto_w2", &s.student_bank.proto_w2);
  for (const auto& [name, t] : s.teacher.params) out.emplace_back("teacher/" + name, &t);
  out.emplace_back("teacher_bank/linear_w", &s.teacher_bank.linear_w);
  out.emplace_back("teacher_bank/linear_b", &s.teacher_bank.linear_b);
  out.emplace_back("teacher_bank/proto_w1", &s.teacher_bank.proto_w1);
  out.emplace_back("teacher_bank/proto_w2", &s.teacher_bank.proto_w2);
  return out;
}

std::vector<std::pair<std::string, Tensor<float>*>> snapshot_entries_mut(TrainState& s) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  for (auto& [name, t] : s.student.params) out.emplace_back("student/" + name, &t);
  out.emplace_back("student_bank/linear_w", &s.student_bank.linear_w);
  out.emplace_back("student_bank/linear_b", &s.student_bank.linear_b);
  out.emplace_back("student_bank/proto_w1", &s.student_bank.proto_w1);
  out.emplace_back("student_bank/proto_w2", &s.student_bank.proto_w2);
  for (auto& [name, t] : s.teacher.params) out.emplace_back("teacher/" + name, &t);
  out.emplace_back("teacher_bank/linear_w", &s.teacher_bank.linear_w);
  out.emplace_back("teacher_bank/linear_b", &s.teacher_bank.linear_b);
  out.emplace_back("teacher_bank/proto_w1", &s.teacher_bank.proto_w1);
  out.emplace_back("teacher_bank/proto_w2", &s.teacher_bank.proto_w2);
  return out;
}

}  // namespace

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  Rng root = Rng(cfg.seed).fork(streams::kInit);
  TrainState st;
  st.student = make_backbone<float>(desc_from(cfg), root.fork(1));
  st.student_bank = make_bank<float>(cfg.classes, cfg.feature_dim, cfg.tau_temp, root.fork(2));
  st.teacher = clone_backbone(st.student);
  st.teacher_bank = clone_bank(st.student_bank);
  set_trainable(st.student, true);
  set_trainable(st.student_bank, true);
  if (!cfg.ablation.bpa) st.student_bank.proto_w2.set_requires_grad(false);
  auto params = trainable_params(st, cfg);
  st.velocity.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    st.velocity[i].assign(params[i].second->data().size(), 0.0f);
  return st;
}

TrainState clone_state(const TrainState& state) {
  TrainState out;
  out.student = clone_backbone(state.student);
  out.student_bank = clone_bank(state.student_bank);
  out.teacher = clone_backbone(state.teacher);
  out.teacher_bank = clone_bank(state.teacher_bank);
  for (std::size_t i = 0; i < state.student.params.size(); ++i)
    out.student.params[i].second.set_requires_grad(state.student.params[i].second.requires_grad());
  out.student_bank.linear_w.set_requires_grad(state.student_bank.linear_w.requires_grad());
  out.student_bank.linear_b.set_requires_grad(state.student_bank.linear_b.requires_grad());
  out.student_bank.proto_w1.set_requires_grad(state.student_bank.proto_w1.requires_grad());
  out.student_bank.proto_w2.set_requires_grad(state.student_bank.proto_w2.requires_grad());
  out.velocity = state.velocity;
  out.t = state.t;
  out.history = state.history;
  return out;
}

std::vector<std::pair<std::string, Tensor<float>*>> trainable_params(TrainState& state,
                                                                     const TrainConfig& cfg) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  for (auto& [name, t] : state.student.params) out.emplace_back("student/" + name, &t);
  out.emplace_back("student_bank/linear_w", &state.student_bank.linear_w);
  out.emplace_back("student_bank/linear_b", &state.student_bank.linear_b);
  out.emplace_back("student_bank/proto_w1", &state.student_bank.proto_w1);
  if (cfg.ablation.bpa) out.emplace_back("student_bank/proto_w2", &state.student_bank.proto_w2);
  return out;
}

double lr_at(Index t, Index t_max, double lr0, LrSchedule schedule) {
  if (t_max < 1) throw ParameterError("lr_at: t_max must be >= 1");
  if (t < 0 || t > t_max) throw ParameterError("lr_at: t must lie in [0, t_max]");
  if (!(lr0 > 0.0)) throw ParameterError("lr_at: lr0 must be positive");
  if (schedule == LrSchedule::kConstant) return lr0;
  const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(t_max);
  return lr0 * std::pow(frac, 0.9);
}

TensorF corrected_probability(const TensorF& p_c, const TensorF& p_l, double tau, bool pplc_on) {
  if (!pplc_on) return p_l;
  return pplc(p_c, p_l, tau);
}

BlendedWeights<float> student_blend(const ClassifierBank<float>& bank, Index t, Index t_max,
                                    bool bpa_on) {
  if (bpa_on) return blend_weights(bank, t, t_max);
  BlendedWeights<float> out;
  out.lambda_sim = lambda_sim_at(t, t_max);
  out.w_v = bank.proto_w1;
  out.w_r = bank.proto_w1;
  out.w_avg = bank.proto_w1;
  return out;
}

HistoryRow train_step(TrainState& state, const LabeledBatch& labeled,
                      const UnlabeledBatch& unlabeled, const TrainConfig& cfg,
                      const StepOverrides& overrides) {
  cfg.validate();
  const Index half = cfg.batch_size / 2;
  if (static_cast<Index>(labeled.size()) != half ||
      static_cast<Index>(unlabeled.size()) != half)
    throw ContractError("train_step: expected " + std::to_string(half) +
                        " labeled and unlabeled examples each, got " +
                        std::to_string(labeled.size()) + "/" + std::to_string(unlabeled.size()));
  if (state.t >= cfg.t_max)
    throw ContractError("train_step: t=" + std::to_string(state.t) + " is past t_max=" +
                        std::to_string(cfg.t_max));

  if (labeled[0].image.rank() != 3)
    throw DimensionError("train_step: images must be [1,H,W], got " +
                         shape_str(labeled[0].image.shape()));
  const Index h = labeled[0].image.extent(1);
  const Index w = labeled[0].image.extent(2);
  const Index classes = cfg.classes;
  for (const auto& ex : labeled) {
    check_image(ex.image, h, w, "labeled image");
    if (ex.mask.rank() != 2 || ex.mask.extent(0) != h || ex.mask.extent(1) != w)
      throw DimensionError("train_step: label mask must be [" + std::to_string(h) + "," +
                           std::to_string(w) + "], got " + shape_str(ex.mask.shape()));
  }
  for (const auto& ex : unlabeled) check_image(ex.image, h, w, "unlabeled image");

  const Index t = state.t;
  const Rng root(cfg.seed);
  const Rng aug_root = root.fork(streams::kAugment).fork(static_cast<std::uint64_t>(t));
  const Rng mix_root = root.fork(streams::kMix).fork(static_cast<std::uint64_t>(t));

  auto params = trainable_params(state, cfg);
  if (state.velocity.size() != params.size())
    throw ContractError("train_step: velocity buffers (" + std::to_string(state.velocity.size()) +
                        ") do not match trainable tensors (" + std::to_string(params.size()) +
                        "); state and config disagree");
  for (auto& [name, p] : params) p->zero_grad();

  MixSchedule sched;
  sched.lambda_fix = cfg.lambda_fix;
  sched.alpha = cfg.alpha;
  sched.t = t;
  sched.t_max = cfg.t_max;
  const double gamma_t = sched.gamma();

  // Teacher-side averaged prototypes for label correction (no gradient).
  TensorF teacher_avg_proto;
  {
    NoGradGuard ng;
    teacher_avg_proto =
        scale(add(state.teacher_bank.proto_w1, state.teacher_bank.proto_w2), 0.5f);
  }

  // Student-side blended prototype sets; differentiable into both sets.
  const BlendedWeights<float> blended =
      student_blend(state.student_bank, t, cfg.t_max, cfg.ablation.bpa);

  const Index w_prime = std::max<Index>(1, w / cfg.w_prime_ratio);
  const bool need_synthesis = cfg.ablation.fixmix || cfg.ablation.pdmix;

  TensorF acc[4];
  for (Index i = 0; i < half; ++i) {
    Rng aug = aug_root.fork(static_cast<std::uint64_t>(i));
    Rng mix = mix_root.fork(static_cast<std::uint64_t>(i));
    Rng aug_x = aug.fork(0);
    Rng aug_u = aug.fork(1);
    Rng aug_s = aug.fork(2);
    Rng mix_pd = mix.fork(0);
    Rng mix_m1 = mix.fork(1);
    Rng mix_m2 = mix.fork(2);

    const auto& lab = labeled[i];
    const auto& unl = unlabeled[i];

    bool same_domain = false;
    switch (cfg.same_domain) {
      case SameDomainMode::kAuto: same_domain = unl.domain == cfg.labeled_domain; break;
      case SameDomainMode::kAlways: same_domain = true; break;
      case SameDomainMode::kNever: same_domain = false; break;
    }

    // Weak views of both images; strong view only for the second unlabeled branch.
    auto weak_x = weak_augment(lab.image, std::optional<TensorU8>(lab.mask), aug_x);
    auto weak_u = weak_augment(unl.image, std::nullopt, aug_u);
    const TensorF x_w = weak_x.image;
    const TensorU8 y_w = *weak_x.label;
    const TensorF u_w = weak_u.image;
    const TensorF u_s = strong_augment(u_w, aug_s);

    // Teacher features, correlation maps, and cross-domain synthesis.
    TensorF x_wv = x_w;
    TensorF u_wv = u_w;
    TensorF x_wdv = x_w;
    {
      NoGradGuard ng;
      if (need_synthesis) {
        const TensorF ft_x = backbone_forward(state.teacher, x_w);
        const TensorF ft_u = backbone_forward(state.teacher, u_w);
        const auto corr = compute_bcm(ft_x, ft_u, w_prime);
        const TensorF synth_x = synthesize(u_w, corr.c_ux, h, w);  // x-aligned, u pixels
        const TensorF synth_u = synthesize(x_w, corr.c_xu, h, w);  // u-aligned, x pixels
        if (cfg.ablation.fixmix) {
          x_wv = fixmix(x_w, synth_x, cfg.lambda_fix);
          u_wv = fixmix(u_w, synth_u, cfg.lambda_fix);
        }
        if (cfg.ablation.pdmix) x_wdv = pdmix(x_w, synth_x, sched, mix_pd).first;
      }
    }

    // Region masks and the two BCMix pairs fed to the student.
    const CutMask m1 = gen_mask(h, w, mix_m1);
    const CutMask m2 = gen_mask(h, w, mix_m2);
    const auto pair1 = bcmix(u_wv, x_wv, m1);   // inner: u^{w,v}, outer: x^{w,v}
    const auto pair2 = bcmix(u_s, x_wdv, m2);   // inner: u^s,     outer: x^{w,dv}

    // Teacher-corrected probabilities on the real and virtual unlabeled views,
    // averaged into the pseudo-label source.
    TensorF p_avg;
    {
      NoGradGuard ng;
      const TensorF ft_u = backbone_forward(state.teacher, u_w);
      const TensorF p_l = linear_forward(ft_u, state.teacher_bank);
      TensorF p_cr_w;
      if (cfg.ablation.pplc) {
        const TensorF p_c = cossim_forward(ft_u, teacher_avg_proto, cfg.tau_temp);
        p_cr_w = corrected_probability(p_c, p_l, cfg.tau, true);
      } else {
        p_cr_w = corrected_probability(TensorF(), p_l, cfg.tau, false);
      }
      if (cfg.ablation.avg && !same_domain && cfg.ablation.fixmix) {
        const TensorF ft_uv = backbone_forward(state.teacher, u_wv);
        const TensorF p_l_v = linear_forward(ft_uv, state.teacher_bank);
        TensorF p_cr_wv;
        if (cfg.ablation.pplc) {
          const TensorF p_c_v = cossim_forward(ft_uv, teacher_avg_proto, cfg.tau_temp);
          p_cr_wv = corrected_probability(p_c_v, p_l_v, cfg.tau, true);
        } else {
          p_cr_wv = corrected_probability(TensorF(), p_l_v, cfg.tau, false);
        }
        p_avg = avg_probability(p_cr_wv, p_cr_w, false);
      } else {
        p_avg = p_cr_w;
      }
    }

    // Four supervision packs: pseudo-labeled unlabeled content and fully
    // trusted labeled content selected by the same masks as the inputs.
    std::vector<SupervisionPack<float>> packs(4);
    {
      NoGradGuard ng;
      const TensorF y_x = one_hot<float>(y_w, classes);
      const TensorF target_u = pseudo_label(p_avg);
      TensorF filter_u = overrides.force_zero_filters ? TensorF::zeros({h, w})
                                                      : filter_mask(p_avg, cfg.tau);
      TensorF filter_x = overrides.force_zero_filters ? TensorF::zeros({h, w})
                                                      : TensorF::full({h, w}, 1.0f);
      const auto tgt1 = bcmix(target_u, y_x, m1);
      const auto cnf1 = bcmix(p_avg, y_x, m1);
      const auto flt1 = bcmix(filter_u, filter_x, m1);
      packs[0] = {tgt1.first, cnf1.first, flt1.first};
      packs[1] = {tgt1.second, cnf1.second, flt1.second};
      const auto tgt2 = bcmix(target_u, y_x, m2);
      const auto cnf2 = bcmix(p_avg, y_x, m2);
      const auto flt2 = bcmix(filter_u, filter_x, m2);
      packs[2] = {tgt2.first, cnf2.first, flt2.first};
      packs[3] = {tgt2.second, cnf2.second, flt2.second};
    }

    // Student forwards: virtual pair through the W_v cosine head, the
    // real/strong pair through W_r; linear head shared.
    const TensorF inputs[4] = {pair1.first, pair1.second, pair2.first, pair2.second};
    const TensorF* protos[4] = {&blended.w_v, &blended.w_v, &blended.w_r, &blended.w_r};
    for (int b = 0; b < 4; ++b) {
      const TensorF ft = backbone_forward(state.student, inputs[b]);
      const TensorF pred_l = linear_forward(ft, state.student_bank);
      const TensorF pred_c = cossim_forward(ft, *protos[b], cfg.tau_temp);
      const TensorF loss_b = branch_loss(packs[b], pred_l, pred_c);
      acc[b] = acc[b].defined() ? add(acc[b], loss_b) : loss_b;
    }
  }

  const float inv = 1.0f / static_cast<float>(half);
  const TensorF l_in1 = scale(acc[0], inv);
  const TensorF l_out1 = scale(acc[1], inv);
  const TensorF l_in2 = scale(acc[2], inv);
  const TensorF l_out2 = scale(acc[3], inv);
  const TensorF total =
      add(scale(add(l_in1, l_out1), 0.5f), scale(add(l_in2, l_out2), 0.5f));

  HistoryRow row;
  row.t = t;
  row.l_in1 = static_cast<double>(l_in1.item());
  row.l_out1 = static_cast<double>(l_out1.item());
  row.l_in2 = static_cast<double>(l_in2.item());
  row.l_out2 = static_cast<double>(l_out2.item());
  row.total = static_cast<double>(total.item());
  row.lr = lr_at(t, cfg.t_max, cfg.lr0, cfg.lr_schedule);
  row.lambda_sim = lambda_sim_at(t, cfg.t_max);
  row.gamma = gamma_t;

  const struct {
    const char* name;
    double value;
  } components[5] = {{"L_in1", row.l_in1},
                     {"L_out1", row.l_out1},
                     {"L_in2", row.l_in2},
                     {"L_out2", row.l_out2},
                     {"total", row.total}};
  for (const auto& c : components) {
    if (!std::isfinite(c.value))
      throw Error("train_step: non-finite loss in branch " + std::string(c.name) + " at t=" +
                  std::to_string(t) + " (L_in1=" + fmt_g17(row.l_in1) + ", L_out1=" +
                  fmt_g17(row.l_out1) + ", L_in2=" + fmt_g17(row.l_in2) + ", L_out2=" +
                  fmt_g17(row.l_out2) + ")");
  }

  backward(total);

  const float lr = static_cast<float>(row.lr);
  const float momentum = static_cast<float>(cfg.momentum);
  const float wd = static_cast<float>(cfg.weight_decay);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<float>& p = *params[k].second;
    std::vector<float>& vel = state.velocity[k];
    auto& values = p.data();
    const float* g = p.has_grad() ? p.grad().data() : nullptr;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const float grad_j = (g ? g[j] : 0.0f) + wd * values[j];
      vel[j] = momentum * vel[j] + grad_j;
      values[j] -= lr * vel[j];
    }
  }

  ema_update(state.teacher, state.student, cfg.ema_decay);
  ema_update_bank(state.teacher_bank, state.student_bank, cfg.ema_decay);

  state.history.push_back(row);
  state.t = t + 1;
  return row;
}

TensorU8 infer(const TrainState& state, const TensorF& image) {
  NoGradGuard ng;
  const TensorF ft = backbone_forward(state.student, image);
  const TensorF p = linear_forward(ft, state.student_bank);
  return argmax0(p);
}

std::vector<std::string> audit_parameter_coverage(const TrainConfig& cfg) {
  TrainConfig probe = cfg;
  probe.batch_size = 2;
  probe.validate();
  const Index side = std::max<Index>(32, Index(8) << probe.levels);
  TrainState state = init_state(probe);
  const auto specs = default_domains(2);
  const Sample a = gen_sample(specs[0], Rng(1), side, side, probe.classes);
  const Sample b = gen_sample(specs[1], Rng(2), side, side, probe.classes);
  LabeledBatch lb{{a.image, a.mask}};
  UnlabeledBatch ub{{b.image, specs[1].id}};
  train_step(state, lb, ub, probe);
  std::vector<std::string> missing;
  for (auto& [name, p] : trainable_params(state, probe))
    if (!p->has_grad()) missing.push_back(name);
  return missing;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const TrainConfig& cfg) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open " + tmp.string() + " for writing");
    out.write(kCkptMagic, 4);
    put_u32(out, kCkptVersion);
    put_u64(out, static_cast<std::uint64_t>(state.t));

    const TensorU8 config_blob = bytes_tensor(config_text(cfg));
    const TensorU8 history_blob = bytes_tensor(history_csv_string(state.history));
    const auto tensors = snapshot_entries(state);

    put_u32(out, static_cast<std::uint32_t>(tensors.size() + 2 + state.velocity.size()));
    auto put_name = [&out](const std::string& name, std::uint32_t dtype) {
      put_u32(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put_u32(out, dtype);
    };
    put_name("config", 2);
    write_tensor(out, config_blob);
    put_name("history", 2);
    write_tensor(out, history_blob);
    for (const auto& [name, tensor] : tensors) {
      put_name(name, 1);
      write_tensor(out, *tensor);
    }
    for (std::size_t k = 0; k < state.velocity.size(); ++k) {
      if (state.velocity[k].empty())
        throw ContractError("checkpoint: empty velocity buffer " + std::to_string(k));
      put_name(velocity_name(k), 1);
      TensorF v = TensorF::zeros({static_cast<Index>(state.velocity[k].size())});
      v.data() = state.velocity[k];
      write_tensor(out, v);
    }
    if (!out) throw IoError("checkpoint: write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());
  const std::string where = path.string();
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic in " + where);
  const std::uint32_t version = get_u32(in, where);
  if (version != kCkptVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " in " +
                      where);
  const std::uint64_t t = get_u64(in, where);
  const std::uint32_t count = get_u32(in, where);

  std::map<std::string, TensorF> floats;
  std::map<std::string, TensorU8> bytes;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t len = get_u32(in, where);
    if (len == 0 || len > 4096) throw FormatError("checkpoint: bad entry name in " + where);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("checkpoint: truncated file " + where);
    const std::uint32_t dtype = get_u32(in, where);
    if (dtype == 1)
      floats.emplace(name, read_tensor<float>(in, where));
    else if (dtype == 2)
      bytes.emplace(name, read_tensor<std::uint8_t>(in, where));
    else
      throw FormatError("checkpoint: unknown dtype code " + std::to_string(dtype) + " for " +
                        name + " in " + where);
  }

  const auto cfg_it = bytes.find("config");
  if (cfg_it == bytes.end()) throw FormatError("checkpoint: missing config entry in " + where);
  std::istringstream cfg_stream(tensor_bytes(cfg_it->second));
  Checkpoint ck;
  ck.cfg = parse_config(cfg_stream, where + "#config");

  ck.state = init_state(ck.cfg);
  ck.state.t = static_cast<Index>(t);

  const auto hist_it = bytes.find("history");
  if (hist_it == bytes.end()) throw FormatError("checkpoint: missing history entry in " + where);
  std::istringstream hist_stream(tensor_bytes(hist_it->second));
  ck.state.history = parse_history(hist_stream, where + "#history");
  if (static_cast<Index>(ck.state.history.size()) != ck.state.t)
    throw FormatError("checkpoint: history rows (" + std::to_string(ck.state.history.size()) +
                      ") do not match t=" + std::to_string(ck.state.t) + " in " + where);

  for (auto& [name, dst] : snapshot_entries_mut(ck.state)) {
    const auto it = floats.find(name);
    if (it == floats.end()) throw FormatError("checkpoint: missing tensor " + name + " in " + where);
    if (it->second.shape() != dst->shape())
      throw FormatError("checkpoint: tensor " + name + " has shape " +
                        shape_str(it->second.shape()) + ", expected " + shape_str(dst->shape()) +
                        " in " + where);
    dst->data() = it->second.data();
  }
  for (std::size_t k = 0; k < ck.state.velocity.size(); ++k) {
    const auto it = floats.find(velocity_name(k));
    if (it == floats.end())
      throw FormatError("checkpoint: missing tensor " + velocity_name(k) + " in " + where);
    if (it->second.data().size() != ck.state.velocity[k].size())
      throw FormatError("checkpoint: velocity buffer " + std::to_string(k) + " has " +
                        std::to_string(it->second.data().size()) + " values, expected " +
                        std::to_string(ck.state.velocity[k].size()) + " in " + where);
    ck.state.velocity[k] = it->second.data();
  }
  return ck;
}

void write_history_csv(const std::filesystem::path& path,
                       const std::vector<HistoryRow>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("history: cannot open " + path.string() + " for writing");
  out << history_csv_string(history);
  if (!out) throw IoError("history: write failed for " + path.string());
}

std::vector<HistoryRow> read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("history: cannot open " + path.string());
  return parse_history(in, path.string());
}

RunResult run_training(const TrainConfig& cfg, const std::filesystem::path& manifest,
                       const std::filesystem::path& out_dir,
                       const std::optional<std::filesystem::path>& resume,
                       std::ostream* progress) {
  cfg.validate();
  const Dataset ds = load_dataset(manifest);  // missing dataset fails here, before training
  const auto labeled_idx = ds.select(std::nullopt, true, true);
  const auto unlabeled_idx = ds.select(std::nullopt, true, false);
  if (labeled_idx.empty())
    throw ContractError("run_training: manifest has no labeled train rows");
  if (unlabeled_idx.empty())
    throw ContractError("run_training: manifest has no unlabeled train rows");

  LabeledBatch labeled_pool;
  labeled_pool.reserve(labeled_idx.size());
  for (const std::size_t i : labeled_idx) {
    Sample s = ds.load(i);
    labeled_pool.push_back({std::move(s.image), std::move(s.mask)});
  }
  UnlabeledBatch unlabeled_pool;
  unlabeled_pool.reserve(unlabeled_idx.size());
  for (const std::size_t i : unlabeled_idx) {
    Sample s = ds.load(i);
    unlabeled_pool.push_back({std::move(s.image), s.domain_id});
  }

  fs::create_directories(out_dir);

  TrainState state;
  if (resume) {
    Checkpoint ck = load_checkpoint(*resume);
    if (config_text(ck.cfg) != config_text(cfg))
      throw ContractError("run_training: resume checkpoint was trained with a different config");
    state = std::move(ck.state);
    if (state.t > cfg.t_max)
      throw ContractError("run_training: checkpoint t=" + std::to_string(state.t) +
                          " exceeds t_max=" + std::to_string(cfg.t_max));
  } else {
    state = init_state(cfg);
  }

  // Epoch-wise reshuffled cyclic sampler; a pure function of (seed, position).
  struct Cycler {
    std::size_t n;
    Rng base;
    Index epoch = -1;
    std::vector<std::size_t> perm;
    std::size_t at(Index global) {
      const Index e = global / static_cast<Index>(n);
      if (e != epoch) {
        perm = shuffled_indices(n, base.fork(static_cast<std::uint64_t>(e)));
        epoch = e;
      }
      return perm[static_cast<std::size_t>(global % static_cast<Index>(n))];
    }
  };
  const Rng sampler = Rng(cfg.seed).fork(streams::kSampler);
  Cycler lab_cycle{labeled_pool.size(), sampler.fork(1)};
  Cycler unl_cycle{unlabeled_pool.size(), sampler.fork(2)};

  const Index half = cfg.batch_size / 2;
  for (Index t = state.t; t < cfg.t_max; ++t) {
    LabeledBatch lb;
    UnlabeledBatch ub;
    lb.reserve(half);
    ub.reserve(half);
    for (Index k = 0; k < half; ++k) {
      lb.push_back(labeled_pool[lab_cycle.at(t * half + k)]);
      ub.push_back(unlabeled_pool[unl_cycle.at(t * half + k)]);
    }
    const HistoryRow row = train_step(state, lb, ub, cfg);
    if (progress && ((t + 1) % 100 == 0 || t + 1 == cfg.t_max))
      *progress << "iter " << (t + 1) << "/" << cfg.t_max << "  loss " << row.total << "  lr "
                << row.lr << std::endl;
    if (cfg.checkpoint_interval > 0 && (t + 1) % cfg.checkpoint_interval == 0 &&
        t + 1 < cfg.t_max) {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "checkpoint_%06lld.bin",
                    static_cast<long long>(t + 1));
      save_checkpoint(out_dir / buf, state, cfg);
    }
  }

  const fs::path ckpt = out_dir / "checkpoint_final.bin";
  save_checkpoint(ckpt, state, cfg);
  const fs::path hist = out_dir / "history.csv";
  write_history_csv(hist, state.history);
  return {ckpt, hist};
}

}  // namespace bcmda
