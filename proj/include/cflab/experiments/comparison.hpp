#ifndef CFLAB_EXPERIMENTS_COMPARISON_HPP
#define CFLAB_EXPERIMENTS_COMPARISON_HPP

#include "cflab/experiments/sweep.hpp"

namespace cflab::experiments {

inline const std::vector<guidance::GuidanceMode>& all_modes() {
  static const std::vector<guidance::GuidanceMode> modes{guidance::GuidanceMode::plain_only,
                                                         guidance::GuidanceMode::robust_only,
                                                         guidance::GuidanceMode::cone};
  return modes;
}

struct ModeCell {
  guidance::GuidanceMode mode = guidance::GuidanceMode::cone;
  Direction direction;
  std::size_t n = 0, flips = 0;
  double confidence = 0, l2 = 0;
  EditSummary edits;
};

/// Cells are mode-major (all_modes() order), then binary_directions() order.
template <typename T>
struct GuidanceComparison {
  guidance::GuidanceConfig guidance;
  std::vector<Direction> directions;
  std::vector<Tensor<T>> originals;  // per direction
  std::vector<ModeCell> cells;
  std::vector<SweepRun<T>> runs;

  const ModeCell& cell(guidance::GuidanceMode mode, int source) const {
    for (const auto& c : cells)
      if (c.mode == mode && c.direction.source == source) return c;
    throw InvalidArgument("no comparison cell for " + guidance::to_string(mode));
  }
};

/// DVCs of every image towards the other class under each guidance mode, with
/// all other settings from `cfg`. Each direction uses one seed across modes.
template <classifiers::Classifier P, classifiers::Classifier R, diffusion::StepDenoiser Net>
GuidanceComparison<typename Net::scalar_type> run_guidance_comparison(const Models<P, R, Net>& models,
                                                                      const synthdata::Dataset& d,
                                                                      const std::vector<ManifestRow>& images,
                                                                      const guidance::GuidanceConfig& cfg,
                                                                      std::uint64_t seed, unsigned jobs = 1) {
  using T = typename Net::scalar_type;
  require_binary(d);
  cfg.validate();
  GuidanceComparison<T> rep;
  rep.guidance = cfg;
  rep.directions = binary_directions();
  std::vector<std::vector<ManifestRow>> inputs(rep.directions.size());
  for (const auto& r : images) inputs.at(static_cast<std::size_t>(d.label(r))).push_back(r);
  std::vector<std::vector<Tensor<std::uint8_t>>> masks;
  for (const auto& dir : rep.directions) {
    const auto& rows = inputs[dir.source];
    if (rows.empty()) throw InvalidArgument("guidance comparison needs images of both classes");
    rep.originals.push_back(synthdata::stack_images(rows).template cast<T>());
    masks.push_back(lesion_masks(rows));
  }

  for (auto mode : all_modes())
    for (const auto& dir : rep.directions) {
      ModeCell cell;
      cell.mode = mode;
      cell.direction = dir;
      cell.n = inputs[dir.source].size();
      rep.cells.push_back(cell);
    }
  std::vector<std::vector<CounterfactualResult<T>>> results(rep.cells.size());
  diffcore::parallel_chunks(rep.cells.size(), jobs, [&](std::size_t c) {
    auto g = cfg;
    g.mode = rep.cells[c].mode;
    const int k = rep.cells[c].direction.source;
    results[c] = guidance::generate_dvc(models.plain, models.robust, models.diffusion, rep.originals[k],
                                        std::vector<int>(inputs[k].size(), rep.cells[c].direction.target), g,
                                        derive_seed(seed, {static_cast<std::uint64_t>(k)}));
  });

  for (std::size_t c = 0; c < rep.cells.size(); ++c) {
    auto& cell = rep.cells[c];
    const int k = cell.direction.source;
    std::vector<double> conf, l2;
    for (const auto& r : results[c]) {
      cell.flips += r.flipped;
      conf.push_back(r.final_confidence);
      l2.push_back(r.l2);
    }
    cell.confidence = finite_mean(conf);
    cell.l2 = finite_mean(l2);
    cell.edits = summarize_edits(lesion_edit_analysis(results[c], rep.originals[k], masks[k]));
    for (std::size_t i = 0; i < results[c].size(); ++i) {
      guidance::RunRecord rec{std::to_string(inputs[k][i].seed), "dvc", guidance::to_string(cell.mode), cfg.lambda_c,
                              cfg.lambda_d, cfg.cone_angle};
      rep.runs.push_back({c, std::move(rec), std::move(results[c][i])});
    }
  }
  return rep;
}

/// One row per mode; each direction contributes a block of columns.
template <typename T>
std::string comparison_csv(const GuidanceComparison<T>& rep) {
  std::ostringstream os;
  os << "mode";
  for (const auto& d : rep.directions) {
    const auto p = d.code() + "_";
    os << ',' << p << "n," << p << "flips," << p << "mean_confidence," << p << "mean_l2," << p << "in_mask_change,"
       << p << "out_mask_change";
  }
  os << '\n';
  for (std::size_t c = 0; c < rep.cells.size(); c += rep.directions.size()) {
    os << guidance::to_string(rep.cells[c].mode);
    for (std::size_t j = 0; j < rep.directions.size(); ++j) {
      const auto& x = rep.cells[c + j];
      os << ',' << x.n << ',' << x.flips << ',' << num(x.confidence) << ',' << num(x.l2) << ','
         << num(x.edits.in_mask) << ',' << num(x.edits.out_mask);
    }
    os << '\n';
  }
  return os.str();
}

template <typename T>
std::string comparison_runs_csv(const GuidanceComparison<T>& rep) {
  std::string out = std::string(guidance::counterfactual_csv_header()) + "\n";
  for (const auto& r : rep.runs) out += guidance::counterfactual_csv_row(r.record, r.result) + "\n";
  return out;
}

template <typename T>
std::string comparison_markdown(const GuidanceComparison<T>& rep) {
  std::ostringstream os;
  const auto& g = rep.guidance;
  os << "# Guidance comparison\n\n"
     << "lambda_c " << num(g.lambda_c) << ", lambda_d " << num(g.lambda_d) << ", cone angle " << num(g.cone_angle)
     << " deg. Edit magnitude is the mean l2 distance to the original; mask columns are mean absolute change per "
        "pixel inside and outside the ground-truth lesion mask (n/a without lesions).\n\n"
     << "| mode | direction | n | flipped | mean confidence | mean l2 | in-mask change | out-mask change |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& c : rep.cells)
    os << "| " << guidance::to_string(c.mode) << " | " << c.direction.name() << " | " << c.n << " | " << c.flips
       << " | " << num(c.confidence) << " | " << num(c.l2) << " | "
       << (std::isnan(c.edits.in_mask) ? "n/a" : num(c.edits.in_mask)) << " | " << num(c.edits.out_mask) << " |\n";
  return os.str();
}

/// comparison.md, comparison.csv, comparison_runs.csv and a PNG grid per cell.
template <typename T>
void write_comparison_report(const std::filesystem::path& dir, const GuidanceComparison<T>& rep) {
  std::filesystem::create_directories(dir);
  write_text(dir / "comparison.md", comparison_markdown(rep));
  write_text(dir / "comparison.csv", comparison_csv(rep));
  write_text(dir / "comparison_runs.csv", comparison_runs_csv(rep));
  for (std::size_t c = 0; c < rep.cells.size(); ++c) {
    std::vector<const CounterfactualResult<T>*> rs;
    for (const auto& r : rep.runs)
      if (r.cell == c) rs.push_back(&r.result);
    const auto& cell = rep.cells[c];
    synthdata::write_png(
        (dir / ("comparison_" + guidance::to_string(cell.mode) + "_" + cell.direction.code() + ".png"))
            .string(),
        panel_grid(rep.originals[cell.direction.source], rs));
  }
}

}  // namespace cflab::experiments

#endif  // CFLAB_EXPERIMENTS_COMPARISON_HPP
