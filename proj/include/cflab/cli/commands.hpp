#ifndef CFLAB_CLI_COMMANDS_HPP
#define CFLAB_CLI_COMMANDS_HPP

#include <chrono>
#include <filesystem>
#include <iostream>

#include "cflab/cli/config.hpp"
#include "cflab/diffusion/trainer.hpp"
#include "cflab/experiments/experiments.hpp"
#include "cflab/svc/svc.hpp"

namespace cflab::cli {

namespace fs = std::filesystem;
using classifiers::ConvClassifier;
using diffcore::Tensor;
using Diffusion = diffusion::DiffusionModel<diffusion::UNet<float>>;

/// Exit codes.
inline constexpr int kOk = 0, kFailure = 1, kConfigError = 2, kMissingArtifact = 3, kNumericalFailure = 4;

/// Artifact locations inside the workspace directory `out`.
struct Workspace {
  fs::path root;

  explicit Workspace(const Config& cfg) : root(cfg.text("out")) {}
  fs::path data() const { return root / "data"; }
  fs::path manifest() const { return data() / "manifest.csv"; }
  fs::path models() const { return root / "models"; }
  fs::path diffusion_weights() const { return models() / "diffusion.ckpt"; }
  fs::path diffusion_state() const { return models() / "diffusion_state.ckpt"; }
  fs::path classifier(classifiers::Mode m) const { return models() / (classifiers::to_string(m) + ".ckpt"); }
  fs::path generate() const { return root / "generate"; }
  fs::path experiment() const { return root / "experiment"; }
  fs::path exports() const { return root / "export"; }
};

struct Context {
  Config cfg;
  unsigned jobs = 1;
  std::ostream* log = &std::cerr;

  std::ostream& out() const { return *log; }
};

/// Seconds since construction.
class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---- typed views of the config ----

inline synthdata::DatasetSpec dataset_spec(const Config& c) {
  synthdata::DatasetSpec s;
  s.modality = synthdata::parse_modality(c.text("data.modality"));
  s.task = synthdata::parse_task(c.text("data.task"));
  s.n_train = c.count("data.n_train");
  s.n_validation = c.count("data.n_validation");
  s.n_test = c.count("data.n_test");
  s.class_fractions = c.reals("data.class_fractions");
  s.balance = synthdata::parse_balance(c.text("data.balance"));
  s.seed = c.seed("data.seed");
  return s;
}

inline int task_classes(const Config& c) {
  const auto s = dataset_spec(c);
  return synthdata::task_class_count(s.modality, s.task);
}

inline diffusion::UNetConfig unet_config(const Config& c) {
  diffusion::UNetConfig u;
  u.base_channels = c.count("diffusion.base_channels");
  return u;
}

inline diffusion::NoiseSchedule noise_schedule(const Config& c) {
  return diffusion::NoiseSchedule::linear(static_cast<int>(c.integer("diffusion.steps")));
}

inline classifiers::ClassifierConfig classifier_config(const Config& c) {
  classifiers::ClassifierConfig k;
  k.classes = static_cast<std::size_t>(task_classes(c));
  k.widths = c.counts("classifier.widths");
  k.seed = c.seed("classifier.seed");
  return k;
}

inline classifiers::AttackConfig attack_config(const Config& c) {
  classifiers::AttackConfig a;
  a.eps = c.real("attack.eps");
  a.steps = static_cast<int>(c.integer("attack.steps"));
  a.step_size = c.real("attack.step_size");
  a.seed = c.seed("attack.seed");
  return a;
}

inline guidance::GuidanceConfig guidance_config(const Config& c) {
  guidance::GuidanceConfig g;
  g.lambda_c = c.real("guidance.lambda_c");
  g.lambda_d = c.real("guidance.lambda_d");
  g.cone_angle = c.real("guidance.cone_angle");
  g.start_fraction = c.real("guidance.start_fraction");
  g.distance_norm = c.real("guidance.distance_norm");
  g.mode = guidance::parse_guidance_mode(c.text("guidance.mode"));
  return g;
}

inline svc::SvcConfig svc_config(const Config& c) {
  svc::SvcConfig s;
  s.ball = {c.real("svc.eps"), c.real("svc.p")};
  s.iterations = static_cast<int>(c.integer("svc.iterations"));
  s.momentum = c.real("svc.momentum");
  return s;
}

inline diffusion::TrainConfig diffusion_train_config(const Config& c, const Workspace& ws) {
  diffusion::TrainConfig t;
  t.iterations = c.count("diffusion.iterations");
  t.batch = c.count("diffusion.batch");
  t.lr = c.real("diffusion.lr");
  t.warmup = c.count("diffusion.warmup");
  t.ema_decay = c.real("diffusion.ema_decay");
  t.lambda_vlb = c.real("diffusion.lambda_vlb");
  t.checkpoint_every = c.count("diffusion.checkpoint_every");
  t.log_every = 10;
  t.seed = c.seed("diffusion.seed");
  t.checkpoint_path = ws.diffusion_state().string();
  t.loss_csv_path = (ws.models() / "diffusion_loss.csv").string();
  t.resume = c.flag("train.resume");
  return t;
}

inline classifiers::ClassifierTrainConfig classifier_train_config(const Config& c, classifiers::Mode m) {
  classifiers::ClassifierTrainConfig t;
  t.epochs = c.count(m == classifiers::Mode::plain ? "train.plain_epochs" : "train.robust_epochs");
  t.batch = c.count("train.batch");
  t.lr = c.real("train.lr");
  t.momentum = c.real("train.momentum");
  t.weight_decay = c.real("train.weight_decay");
  t.trades.beta = c.real("trades.beta");
  t.trades.attack = attack_config(c);
  t.seed = c.seed("classifier.seed");
  t.resume = c.flag("train.resume");
  return t;
}

/// Explicit target class, or -1 for "flip".
inline int explicit_target(const Config& c) {
  const auto t = c.text("generate.target");
  if (t == "flip") return -1;
  try {
    std::size_t used = 0;
    const int v = std::stoi(t, &used);
    if (used == t.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("generate.target: expected flip or a class index, got '" + t + "'");
}

/// Schema check plus the cross-key constraints of the library types. Runs
/// before any command does work.
inline void validate(const Config& c) {
  c.validate();
  try {
    const auto spec = dataset_spec(c);
    const auto& fr = spec.class_fractions;
    if (!fr.empty() && fr.size() != static_cast<std::size_t>(synthdata::class_count(spec.modality)))
      throw ConfigError("data.class_fractions needs " + std::to_string(synthdata::class_count(spec.modality)) +
                        " entries for " + synthdata::to_string(spec.modality));
    guidance_config(c).validate();
    svc_config(c).validate();
    auto t = classifier_train_config(c, classifiers::Mode::robust);
    t.trades.validate();
    const auto a = attack_config(c);
    if (a.eps > 0 && !(a.step_size > 0)) throw ConfigError("attack.step_size must be positive");
    if (c.counts("classifier.widths").empty()) throw ConfigError("classifier.widths must not be empty");
    const int target = explicit_target(c);
    if (target >= task_classes(c)) throw ConfigError("generate.target exceeds the number of classes");
    if (target < -1) throw ConfigError("generate.target must be non-negative");
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
}

/// Writes the effective config next to the outputs.
inline void echo_config(const Context& ctx, const std::string& command) {
  const Workspace ws(ctx.cfg);
  fs::create_directories(ws.root);
  experiments::write_text(ws.root / (command + ".config.yaml"), ctx.cfg.dump());
}

// ---- artifacts ----

inline synthdata::Dataset load_dataset(const Config& c) {
  const Workspace ws(c);
  if (!fs::exists(ws.manifest())) throw MissingArtifact("dataset manifest not found: " + ws.manifest().string());
  const auto spec = dataset_spec(c);
  auto rows = synthdata::Dataset::read_manifest(ws.manifest().string());
  for (const auto& r : rows)
    if (r.modality != spec.modality)
      throw ConfigError("manifest modality differs from data.modality=" + synthdata::to_string(spec.modality));
  return synthdata::Dataset(spec, std::move(rows));
}

inline diffcore::NamedTensors<float> read_weights(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingArtifact(what + " checkpoint not found: " + path.string() + " (run train first)");
  return diffcore::load_checkpoint(path.string());
}

template <typename Module>
void assign_weights(Module& m, const diffcore::NamedTensors<float>& w, const fs::path& path) {
  try {
    m.parameters().assign(w);
  } catch (const Error& e) {
    throw MissingArtifact("checkpoint " + path.string() + " does not match the configured model: " + e.what());
  }
}

inline Diffusion load_diffusion(const Config& c) {
  const Workspace ws(c);
  Diffusion model(diffusion::UNet<float>(unet_config(c)), noise_schedule(c));
  assign_weights(model.net(), read_weights(ws.diffusion_weights(), "diffusion"), ws.diffusion_weights());
  return model;
}

inline ConvClassifier<float> load_classifier(const Config& c, classifiers::Mode m) {
  const Workspace ws(c);
  ConvClassifier<float> net(classifier_config(c), m);
  assign_weights(net, read_weights(ws.classifier(m), classifiers::to_string(m) + " classifier"), ws.classifier(m));
  return net;
}

struct Labeled {
  Tensor<float> x;
  std::vector<int> y;
};

inline Labeled labeled(const synthdata::Dataset& d, const std::vector<synthdata::ManifestRow>& rows) {
  Labeled out{rows.empty() ? Tensor<float>() : synthdata::stack_images(rows), {}};
  for (const auto& r : rows) out.y.push_back(d.label(r));
  return out;
}

// ---- commands ----

inline int cmd_dataset(const Context& ctx) {
  const auto& c = ctx.cfg;
  const Workspace ws(c);
  const auto d = synthdata::build_dataset(dataset_spec(c));
  fs::create_directories(ws.data());
  d.write_manifest(ws.manifest().string());
  std::map<int, std::size_t> per_class;
  for (const auto& r : d.rows()) ++per_class[r.cls];
  ctx.out() << "dataset: " << d.rows().size() << " rows -> " << ws.manifest().string() << "\n";
  for (const auto& [cls, n] : per_class)
    ctx.out() << "  class " << cls << " (" << synthdata::class_names(d.spec().modality).at(cls) << "): " << n << "\n";
  if (c.flag("data.export_png")) {
    for (const auto& r : d.rows()) {
      const auto dir = ws.data() / "png" / synthdata::to_string(r.split);
      fs::create_directories(dir);
      const auto s = synthdata::generate(r);
      const auto id = std::to_string(r.seed) + "_c" + std::to_string(r.cls);
      synthdata::write_png((dir / (id + ".png")).string(),
                           synthdata::gray_image(s.image.data(), synthdata::kImageSize, synthdata::kImageSize));
      std::vector<double> mask(s.lesion_mask.data().begin(), s.lesion_mask.data().end());
      synthdata::write_png((dir / (id + "_mask.png")).string(),
                           synthdata::gray_image(mask, synthdata::kImageSize, synthdata::kImageSize));
    }
    ctx.out() << "  PNG export -> " << (ws.data() / "png").string() << "\n";
  }
  return kOk;
}

/// Test-split metrics of every classifier checkpoint present, as CSV and Markdown.
inline void write_classifier_report(const Context& ctx, const synthdata::Dataset& d) {
  const auto& c = ctx.cfg;
  const Workspace ws(c);
  std::vector<classifiers::MetricsRow> rows;
  for (auto m : {classifiers::Mode::plain, classifiers::Mode::robust}) {
    if (!fs::exists(ws.classifier(m))) continue;
    const auto net = load_classifier(c, m);
    rows.push_back(experiments::evaluate_classifier(net, classifiers::to_string(m), d, synthdata::Split::test,
                                                    attack_config(c), ctx.jobs));
  }
  experiments::write_text(ws.models() / "classifier_metrics.csv", classifiers::metrics_csv(rows));
  experiments::write_text(ws.models() / "classifier_metrics.md", experiments::metrics_markdown(rows, c.real("attack.eps")));
  for (const auto& r : rows)
    ctx.out() << "  " << r.mode << ": test accuracy " << r.clean.accuracy << ", PGD accuracy " << r.robust_accuracy
              << "\n";
}

inline void train_diffusion_model(const Context& ctx, const synthdata::Dataset& d) {
  const auto& c = ctx.cfg;
  const Workspace ws(c);
  Diffusion model(diffusion::UNet<float>(unet_config(c)), noise_schedule(c));
  auto tc = diffusion_train_config(c, ws);
  const Stopwatch clock;
  tc.progress = [&](std::size_t it, double simple, double vlb) {
    if (it % 100 == 0 || it == tc.iterations)
      ctx.out() << "  diffusion it " << it << " loss " << simple << " vlb " << vlb << " (" << clock.seconds()
                << " s)\n";
  };
  const auto images = synthdata::stack_images(d.split(synthdata::Split::train));
  diffusion::train_diffusion(model, images, tc);
  diffcore::save_checkpoint(ws.diffusion_weights().string(), model.net().parameters().named());
  ctx.out() << "diffusion: " << tc.iterations << " iterations in " << clock.seconds() << " s -> "
            << ws.diffusion_weights().string() << "\n";
}

inline void train_classifier_model(const Context& ctx, const synthdata::Dataset& d, classifiers::Mode m) {
  const auto& c = ctx.cfg;
  const Workspace ws(c);
  ConvClassifier<float> net(classifier_config(c), m);
  auto tc = classifier_train_config(c, m);
  tc.jobs = ctx.jobs;
  tc.checkpoint_path = ws.classifier(m).string();
  const auto csv_path = ws.models() / (classifiers::to_string(m) + "_epochs.csv");
  const bool append = tc.resume && fs::exists(ws.classifier(m)) && fs::exists(csv_path);
  std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw MissingArtifact("cannot write " + csv_path.string());
  if (!append) csv << "epoch,train_loss,val_accuracy,val_balanced_accuracy,val_quadratic_kappa\n";
  const Stopwatch clock;
  tc.progress = [&](std::size_t epoch, double loss, const classifiers::Metrics& v) {
    csv << epoch << ',' << experiments::num(loss) << ',' << experiments::num(v.accuracy) << ','
        << experiments::num(v.balanced_accuracy) << ',' << experiments::num(v.quadratic_kappa) << '\n'
        << std::flush;
    ctx.out() << "  " << classifiers::to_string(m) << " epoch " << epoch << " loss " << loss << " val acc "
              << v.accuracy << " (" << clock.seconds() << " s)\n";
  };
  const auto train = labeled(d, d.training_stream());
  const auto val = labeled(d, d.split(synthdata::Split::validation));
  classifiers::train_classifier(net, train.x, train.y, val.x, val.y, tc);
  ctx.out() << classifiers::to_string(m) << " classifier: " << tc.epochs << " epochs in " << clock.seconds()
            << " s -> " << ws.classifier(m).string() << "\n";
}

inline int cmd_train(const Context& ctx) {
  const auto& c = ctx.cfg;
  const Workspace ws(c);
  const auto d = load_dataset(c);
  fs::create_directories(ws.models());
  const auto wanted = c.texts("train.models");
  auto has = [&](const std::string& m) { return std::find(wanted.begin(), wanted.end(), m) != wanted.end(); };
  if (has("diffusion")) train_diffusion_model(ctx, d);
  bool classifiers_trained = false;
  for (auto m : {classifiers::Mode::plain, classifiers::Mode::robust})
    if (has(classifiers::to_string(m))) {
      train_classifier_model(ctx, d, m);
      classifiers_trained = true;
    }
  if (classifiers_trained) write_classifier_report(ctx, d);
  return kOk;
}

/// Input rows: generate.ids when set, otherwise the first generate.count rows of the split.
inline std::vector<synthdata::ManifestRow> generation_inputs(const Config& c, const synthdata::Dataset& d) {
  if (c.is_set("generate.ids")) {
    std::vector<synthdata::ManifestRow> out;
    for (const auto& id : c.texts("generate.ids")) {
      auto it = std::find_if(d.rows().begin(), d.rows().end(),
                             [&](const auto& r) { return std::to_string(r.seed) == id; });
      if (it == d.rows().end()) throw ConfigError("generate.ids: no image with id " + id + " in the manifest");
      out.push_back(*it);
    }
    return out;
  }
  auto rows = d.split(synthdata::parse_split(c.text("generate.split")));
  rows.resize(std::min(rows.size(), c.count("generate.count")));
  return rows;
}

inline void check_in_box(const Tensor<float>& x, const std::string& what) {
  for (float v : x.data())
    if (!(v >= 0 && v <= 1)) throw NumericalError(what, "counterfactual leaves [0, 1]");
}

inline int cmd_generate(const Context& ctx) {
  const auto& c = ctx.cfg;
  const Workspace ws(c);
  const auto d = load_dataset(c);
  const auto inputs = generation_inputs(c, d);
  fs::create_directories(ws.generate());
  const auto csv_path = ws.generate() / "counterfactuals.csv";
  std::string csv = std::string(guidance::counterfactual_csv_header()) + "\n";
  if (inputs.empty()) {
    experiments::write_text(csv_path, csv);
    ctx.out() << "generate: no inputs; wrote header only -> " << csv_path.string() << "\n";
    return kOk;
  }

  const auto opt = c.text("generate.optimizer");
  const bool run_dvc = opt != "svc", run_svc = opt != "dvc";
  const int fixed = explicit_target(c);
  if (fixed < 0 && task_classes(c) != 2) throw ConfigError("generate.target=flip needs the binary task");
  std::vector<int> targets;
  for (const auto& r : inputs) targets.push_back(fixed >= 0 ? fixed : 1 - d.label(r));
  const auto x = synthdata::stack_images(inputs);
  const auto robust = load_classifier(c, classifiers::Mode::robust);
  const std::size_t m = x.size() / x.dim(0);

  std::vector<guidance::CounterfactualResult<float>> dvc, svcs;
  const Stopwatch clock;
  if (run_dvc) {
    const auto plain = load_classifier(c, classifiers::Mode::plain);
    const auto model = load_diffusion(c);
    dvc = guidance::generate_dvc(plain, robust, model, x, targets, guidance_config(c), c.seed("seed"), ctx.jobs);
    for (const auto& r : dvc) check_in_box(r.image, "dvc");
  }
  if (run_svc) {
    const auto s = svc_config(c);
    svcs = svc::generate_svc(robust, x, targets, s, ctx.jobs);
    for (std::size_t i = 0; i < svcs.size(); ++i)
      if (svc::feasibility_violation(svcs[i].image, x.rows(i, i + 1), s.ball) > svc::kBallSlack)
        throw NumericalError("svc", "counterfactual leaves the feasible set");
  }

  const auto g = guidance_config(c);
  const auto s = svc_config(c);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto id = std::to_string(inputs[i].seed);
    if (run_dvc) {
      guidance::RunRecord rec{id, "dvc", guidance::to_string(g.mode), g.lambda_c, g.lambda_d, g.cone_angle};
      csv += guidance::counterfactual_csv_row(rec, dvc[i]) + "\n";
    }
    if (run_svc) {
      guidance::RunRecord rec{id, "svc", "l" + experiments::num(s.ball.p)};
      rec.eps = s.ball.eps;
      csv += guidance::counterfactual_csv_row(rec, svcs[i]) + "\n";
    }
    if (c.flag("generate.panels")) {
      if (run_dvc)
        synthdata::write_png((ws.generate() / (id + "_dvc.png")).string(),
                             guidance::counterfactual_panel(x.ptr() + i * m, dvc[i]));
      if (run_svc)
        synthdata::write_png((ws.generate() / (id + "_svc.png")).string(),
                             guidance::counterfactual_panel(x.ptr() + i * m, svcs[i]));
    }
  }
  experiments::write_text(csv_path, csv);
  ctx.out() << "generate: " << inputs.size() << " images (" << opt << ") in " << clock.seconds() << " s -> "
            << csv_path.string() << "\n";
  return kOk;
}

inline int cmd_experiment(const Context& ctx) {
  const auto& c = ctx.cfg;
  const Workspace ws(c);
  const auto d = load_dataset(c);
  const auto kind = c.text("experiment.kind");
  const auto split = synthdata::parse_split(c.text("experiment.split"));
  const auto plain = load_classifier(c, classifiers::Mode::plain);
  const auto robust = load_classifier(c, classifiers::Mode::robust);
  const Stopwatch clock;
  if (kind == "metrics") {
    std::vector<classifiers::MetricsRow> rows;
    rows.push_back(experiments::evaluate_classifier(plain, "plain", d, split, attack_config(c), ctx.jobs));
    rows.push_back(experiments::evaluate_classifier(robust, "robust", d, split, attack_config(c), ctx.jobs));
    const auto dir = ws.experiment() / "metrics";
    fs::create_directories(dir);
    experiments::write_text(dir / "metrics.csv", classifiers::metrics_csv(rows));
    experiments::write_text(dir / "metrics.md", experiments::metrics_markdown(rows, c.real("attack.eps")));
    ctx.out() << "experiment metrics -> " << dir.string() << "\n";
    return kOk;
  }

  const auto model = load_diffusion(c);
  const experiments::Models models{plain, robust, model};
  const auto n = c.count("experiment.n_per_cell");
  if (kind == "sweep") {
    const auto rep = experiments::run_lambda_sweep(models, d, c.reals("experiment.lambda_grid"), n, c.seed("seed"),
                                                   guidance_config(c), ctx.jobs, split);
    const auto dir = ws.experiment() / "sweep";
    experiments::write_sweep_report(dir, rep);
    std::ifstream f(dir / "sweep_runs.csv");
    std::stringstream written;
    written << f.rdbuf();
    if (!experiments::sweep_consistent(rep, written.str()))
      throw Error("sweep report disagrees with its per-run CSV");
    for (const auto& cell : rep.cells)
      ctx.out() << "  lambda_d " << cell.lambda_d << " " << cell.direction.name() << ": failure "
                << experiments::pct(cell.failure) << " of " << cell.n << "\n";
    ctx.out() << "experiment sweep in " << clock.seconds() << " s -> " << dir.string() << "\n";
    return kOk;
  }

  std::vector<synthdata::ManifestRow> images;
  const auto pool = d.split(split);
  for (const auto& dir : experiments::binary_directions())
    for (const auto& r : experiments::label_correct(plain, d, pool, dir.source, n, ctx.jobs)) images.push_back(r);
  const auto rep = experiments::run_guidance_comparison(models, d, images, guidance_config(c), c.seed("seed"), ctx.jobs);
  const auto dir = ws.experiment() / "comparison";
  experiments::write_comparison_report(dir, rep);
  for (const auto& cell : rep.cells)
    ctx.out() << "  " << guidance::to_string(cell.mode) << " " << cell.direction.name() << ": confidence "
              << cell.confidence << ", l2 " << cell.l2 << "\n";
  ctx.out() << "experiment comparison in " << clock.seconds() << " s -> " << dir.string() << "\n";
  return kOk;
}

inline int cmd_export(const Context& ctx) {
  const auto& c = ctx.cfg;
  const Workspace ws(c);
  const auto count = c.count("export.count");
  fs::create_directories(ws.exports());
  const std::size_t side = synthdata::kImageSize, per_row = 8;
  std::vector<synthdata::Image8> tiles;
  fs::path path;
  if (c.text("export.what") == "samples") {
    const auto model = load_diffusion(c);
    const auto x = diffusion::sample_unconditional(model, count, c.seed("seed"), ctx.jobs);
    for (std::size_t i = 0; i < count; ++i)
      tiles.push_back(synthdata::gray_image(x.rows(i, i + 1).data(), side, side));
    path = ws.exports() / "samples.png";
  } else {
    const auto d = load_dataset(c);
    auto rows = d.split(synthdata::parse_split(c.text("generate.split")));
    rows.resize(std::min(rows.size(), count));
    for (const auto& r : rows) {
      const auto s = synthdata::generate(r);
      std::vector<double> mask(s.lesion_mask.data().begin(), s.lesion_mask.data().end());
      tiles.push_back(synthdata::hstack(
          {synthdata::gray_image(s.image.data(), side, side), synthdata::gray_image(mask, side, side)}));
    }
    path = ws.exports() / "dataset.png";
  }
  if (tiles.empty()) throw MissingArtifact("nothing to export");
  std::vector<synthdata::Image8> rows;
  for (std::size_t i = 0; i < tiles.size(); i += per_row) {
    std::vector<synthdata::Image8> row(tiles.begin() + i, tiles.begin() + std::min(tiles.size(), i + per_row));
    while (row.size() < per_row && tiles.size() > per_row) {  // pad the last row to the grid width
      auto blank = row[0];
      std::fill(blank.pixels.begin(), blank.pixels.end(), 0);
      row.push_back(std::move(blank));
    }
    rows.push_back(synthdata::hstack(row));
  }
  synthdata::write_png(path.string(), synthdata::upscale(synthdata::vstack(rows), 3));
  ctx.out() << "export -> " << path.string() << "\n";
  return kOk;
}

}  // namespace cflab::cli

#endif  // CFLAB_CLI_COMMANDS_HPP
