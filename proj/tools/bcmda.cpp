// Command-line entry point: dataset generation, training, evaluation, and
// checkpoint inspection (PGM dumps of correlation maps and mixed images).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "bcmda/config.hpp"
#include "bcmda/corrsynth.hpp"
#include "bcmda/evaluate.hpp"
#include "bcmda/mixing.hpp"
#include "bcmda/pgm.hpp"
#include "bcmda/synthdata.hpp"
#include "bcmda/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct GenDataArgs {
  std::string out;
  int domains = 3;
  bcmda::DatasetConfig cfg;
};

int run_gen_data(const GenDataArgs& args) {
  const auto specs = bcmda::default_domains(args.domains);
  const fs::path manifest = bcmda::gen_dataset(specs, args.cfg, args.out);
  std::cout << manifest.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
};

int run_train(const TrainArgs& args) {
  const bcmda::TrainConfig cfg = bcmda::load_config(args.config);
  std::optional<fs::path> resume;
  if (!args.resume.empty()) resume = fs::path(args.resume);
  const bcmda::RunResult result =
      bcmda::run_training(cfg, args.data, args.out, resume, &std::cout);
  std::cout << "checkpoint: " << result.checkpoint.string() << "\n";
  std::cout << "history:    " << result.history.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  bool pooled_hd95 = false;
};

int run_eval(const EvalArgs& args) {
  const bcmda::Hd95Mode mode =
      args.pooled_hd95 ? bcmda::Hd95Mode::kPooled : bcmda::Hd95Mode::kPerDirection;
  const bcmda::MetricReport report = bcmda::evaluate(args.checkpoint, args.data, mode);
  std::cout << bcmda::report_table(report);
  std::cout << "fingerprint: " << report.fingerprint << "\n";
  if (!args.out.empty()) {
    bcmda::write_report_csv(args.out, report);
    std::cout << "report: " << args.out << "\n";
  }
  return 0;
}

struct InspectArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  long long labeled_row = -1;
  long long unlabeled_row = -1;
};

int run_inspect(const InspectArgs& args) {
  using namespace bcmda;
  const Checkpoint ck = load_checkpoint(args.checkpoint);
  const Dataset ds = load_dataset(args.data);
  const TrainConfig& cfg = ck.cfg;

  auto pick = [&ds](long long requested, bool labeled, const char* what) {
    if (requested >= 0) {
      if (static_cast<std::size_t>(requested) >= ds.size())
        throw ParameterError(std::string("inspect: ") + what + " row " +
                             std::to_string(requested) + " is out of range");
      return static_cast<std::size_t>(requested);
    }
    const auto rows = ds.select(std::nullopt, true, labeled);
    if (rows.empty())
      throw ContractError(std::string("inspect: manifest has no ") + what + " train rows");
    return rows.front();
  };
  const Sample lab = ds.load(pick(args.labeled_row, true, "labeled"));
  const Sample unl = ds.load(pick(args.unlabeled_row, false, "unlabeled"));
  const Index h = lab.image.extent(1);
  const Index w = lab.image.extent(2);

  fs::create_directories(args.out);
  const fs::path out(args.out);

  NoGradGuard ng;
  Rng rng = Rng(cfg.seed).fork(streams::kAugment).fork(ck.state.t);
  Rng aug_x = rng.fork(0);
  Rng aug_u = rng.fork(1);
  const auto weak_x = weak_augment(lab.image, std::optional<TensorU8>(lab.mask), aug_x);
  const auto weak_u = weak_augment(unl.image, std::nullopt, aug_u);

  const TensorF ft_x = backbone_forward(ck.state.teacher, weak_x.image);
  const TensorF ft_u = backbone_forward(ck.state.teacher, weak_u.image);
  const Index w_prime = std::max<Index>(1, w / cfg.w_prime_ratio);
  const auto corr = compute_bcm(ft_x, ft_u, w_prime);
  const TensorF synth_x = synthesize(weak_u.image, corr.c_ux, h, w);
  const TensorF synth_u = synthesize(weak_x.image, corr.c_xu, h, w);
  const TensorF mixed_x = fixmix(weak_x.image, synth_x, cfg.lambda_fix);
  const TensorF mixed_u = fixmix(weak_u.image, synth_u, cfg.lambda_fix);

  MixSchedule sched;
  sched.lambda_fix = cfg.lambda_fix;
  sched.alpha = cfg.alpha;
  sched.t = std::min<Index>(ck.state.t, cfg.t_max);
  sched.t_max = cfg.t_max;
  Rng mix = Rng(cfg.seed).fork(streams::kMix).fork(ck.state.t);
  Rng pd = mix.fork(0);
  Rng m1r = mix.fork(1);
  const TensorF dyn_x = pdmix(weak_x.image, synth_x, sched, pd).first;
  const CutMask m1 = gen_mask(h, w, m1r);
  const auto pair1 = bcmix(mixed_u, mixed_x, m1);

  write_pgm(out / "image_x.pgm", weak_x.image);
  write_pgm(out / "image_u.pgm", weak_u.image);
  write_pgm(out / "corr_xu.pgm", corr.c_xu);
  write_pgm(out / "corr_ux.pgm", corr.c_ux);
  write_pgm(out / "synth_x.pgm", synth_x);
  write_pgm(out / "synth_u.pgm", synth_u);
  write_pgm(out / "fixmix_x.pgm", mixed_x);
  write_pgm(out / "fixmix_u.pgm", mixed_u);
  write_pgm(out / "pdmix_x.pgm", dyn_x);
  write_pgm(out / "bcmix_in.pgm", pair1.first);
  write_pgm(out / "bcmix_out.pgm", pair1.second);
  write_pgm_labels(out / "label_x.pgm", *weak_x.label);
  write_pgm_labels(out / "pred_u.pgm", infer(ck.state, weak_u.image));
  std::cout << "wrote 13 PGM files to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-domain semi-supervised segmentation pipeline"};
  app.require_subcommand(1);

  GenDataArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic multi-domain dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--domains", gen.domains, "Number of domains")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--train", gen.cfg.train_per_domain, "Training samples per domain");
  gen_cmd->add_option("--test", gen.cfg.test_per_domain, "Test samples per domain");
  gen_cmd->add_option("--labeled-domain", gen.cfg.labeled_domain, "Domain providing labels");
  gen_cmd->add_option("--num-labeled", gen.cfg.num_labeled, "Labeled samples in that domain");
  gen_cmd->add_option("--height", gen.cfg.height, "Image height");
  gen_cmd->add_option("--width", gen.cfg.width, "Image width");
  gen_cmd->add_option("--classes", gen.cfg.classes, "Segmentation classes incl. background");
  gen_cmd->add_option("--seed", gen.cfg.seed, "Generator seed");

  TrainArgs train;
  CLI::App* train_cmd = app.add_subcommand("train", "Train on a generated dataset");
  train_cmd->add_option("--config", train.config, "Training config file")
      ->required()
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--data", train.data, "Dataset manifest")->required();
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to resume from");

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset manifest")->required();
  eval_cmd->add_option("--out", eval.out, "Write the report CSV here");
  eval_cmd->add_flag("--pooled-hd95", eval.pooled_hd95,
                     "Pool directed distances before the 95th percentile");

  InspectArgs inspect;
  CLI::App* inspect_cmd =
      app.add_subcommand("inspect", "Dump correlation maps and mixed images as PGM");
  inspect_cmd->add_option("--checkpoint", inspect.checkpoint, "Checkpoint file")->required();
  inspect_cmd->add_option("--data", inspect.data, "Dataset manifest")->required();
  inspect_cmd->add_option("--out", inspect.out, "Output directory")->required();
  inspect_cmd->add_option("--labeled-row", inspect.labeled_row,
                          "Manifest row of the labeled sample (default: first labeled)");
  inspect_cmd->add_option("--unlabeled-row", inspect.unlabeled_row,
                          "Manifest row of the unlabeled sample (default: first unlabeled)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (train_cmd->parsed()) return run_train(train);
    if (eval_cmd->parsed()) return run_eval(eval);
    if (inspect_cmd->parsed()) return run_inspect(inspect);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
