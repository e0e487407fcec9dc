#ifndef CFLAB_EXPERIMENTS_SWEEP_HPP
#define CFLAB_EXPERIMENTS_SWEEP_HPP

#include <map>

#include "cflab/experiments/lesion.hpp"

namespace cflab::experiments {

struct SweepCell {
  double lambda_d = 0;
  Direction direction;
  std::size_t n = 0, flips = 0;
  double failure = 0;  // 1 - flips / n
  double confidence = 0, l1 = 0, l2 = 0, l4 = 0;
  EditSummary edits;
};

template <typename T>
struct SweepRun {
  std::size_t cell = 0;
  guidance::RunRecord record;
  CounterfactualResult<T> result;
};

/// Cells are lambda-major in grid order, directions in binary_directions()
/// order; runs follow the cells with inputs in dataset order.
template <typename T>
struct SweepReport {
  std::vector<double> grid;
  guidance::GuidanceConfig guidance;
  std::vector<Direction> directions;
  std::vector<Tensor<T>> originals;  // per direction
  std::vector<SweepCell> cells;
  std::vector<SweepRun<T>> runs;
};

/// Flip-failure fraction of DVCs per (lambda_d, direction) over the first
/// `n_per_cell` label-correct images of each source class in `split`. Every
/// lambda reuses the same per-direction seed, so cells differ only in lambda_d.
template <classifiers::Classifier P, classifiers::Classifier R, diffusion::StepDenoiser Net>
SweepReport<typename Net::scalar_type> run_lambda_sweep(const Models<P, R, Net>& models, const synthdata::Dataset& d,
                                                        const std::vector<double>& lambda_grid, std::size_t n_per_cell,
                                                        std::uint64_t seed, const guidance::GuidanceConfig& base = {},
                                                        unsigned jobs = 1,
                                                        synthdata::Split split = synthdata::Split::test) {
  using T = typename Net::scalar_type;
  require_binary(d);
  if (lambda_grid.empty()) throw InvalidArgument("lambda sweep needs a nonempty grid");
  if (n_per_cell == 0) throw InvalidArgument("lambda sweep needs at least one image per cell");
  base.validate();
  for (double l : lambda_grid)
    if (!(l >= 0)) throw InvalidArgument("lambda_d values must be non-negative");

  SweepReport<T> rep;
  rep.grid = lambda_grid;
  rep.guidance = base;
  rep.directions = binary_directions();
  const auto pool = d.split(split);
  std::vector<std::vector<ManifestRow>> inputs;
  std::vector<std::vector<Tensor<std::uint8_t>>> masks;
  for (const auto& dir : rep.directions) {
    inputs.push_back(label_correct(models.plain, d, pool, dir.source, n_per_cell, jobs));
    if (inputs.back().empty())
      throw InvalidArgument("no correctly classified " + to_string(split) + " images for " + dir.name());
    rep.originals.push_back(synthdata::stack_images(inputs.back()).template cast<T>());
    masks.push_back(lesion_masks(inputs.back()));
  }

  for (double l : lambda_grid)
    for (const auto& dir : rep.directions) {
      SweepCell cell;
      cell.lambda_d = l;
      cell.direction = dir;
      cell.n = inputs[dir.source].size();
      rep.cells.push_back(cell);
    }
  std::vector<std::vector<CounterfactualResult<T>>> results(rep.cells.size());
  diffcore::parallel_chunks(rep.cells.size(), jobs, [&](std::size_t c) {
    auto cfg = base;
    cfg.lambda_d = rep.cells[c].lambda_d;
    const int k = rep.cells[c].direction.source;
    results[c] = guidance::generate_dvc(models.plain, models.robust, models.diffusion, rep.originals[k],
                                        std::vector<int>(inputs[k].size(), rep.cells[c].direction.target), cfg,
                                        derive_seed(seed, {static_cast<std::uint64_t>(k)}));
  });

  for (std::size_t c = 0; c < rep.cells.size(); ++c) {
    auto& cell = rep.cells[c];
    const int k = cell.direction.source;
    std::vector<double> conf, l1, l2, l4;
    for (const auto& r : results[c]) {
      cell.flips += r.flipped;
      conf.push_back(r.final_confidence);
      l1.push_back(r.l1);
      l2.push_back(r.l2);
      l4.push_back(r.l4);
    }
    cell.failure = failure_fraction(results[c]);
    cell.confidence = finite_mean(conf);
    cell.l1 = finite_mean(l1);
    cell.l2 = finite_mean(l2);
    cell.l4 = finite_mean(l4);
    cell.edits = summarize_edits(lesion_edit_analysis(results[c], rep.originals[k], masks[k]));
    for (std::size_t i = 0; i < results[c].size(); ++i) {
      guidance::RunRecord rec{std::to_string(inputs[k][i].seed), "dvc", guidance::to_string(base.mode),
                              base.lambda_c, cell.lambda_d, base.cone_angle};
      rep.runs.push_back({c, std::move(rec), std::move(results[c][i])});
    }
  }
  return rep;
}

template <typename T>
std::string sweep_csv(const SweepReport<T>& rep) {
  std::ostringstream os;
  os << "lambda_d,direction,n,flips,failure_fraction,mean_confidence,mean_l1,mean_l2,mean_l4,in_mask_change,"
        "out_mask_change\n";
  for (const auto& c : rep.cells)
    os << num(c.lambda_d) << ',' << c.direction.name() << ',' << c.n << ',' << c.flips << ',' << num(c.failure) << ','
       << num(c.confidence) << ',' << num(c.l1) << ',' << num(c.l2) << ',' << num(c.l4) << ','
       << num(c.edits.in_mask) << ',' << num(c.edits.out_mask) << '\n';
  return os.str();
}

/// Per-counterfactual rows in the shared counterfactual CSV schema.
template <typename T>
std::string sweep_runs_csv(const SweepReport<T>& rep) {
  std::string out = std::string(guidance::counterfactual_csv_header()) + "\n";
  for (const auto& r : rep.runs) out += guidance::counterfactual_csv_row(r.record, r.result) + "\n";
  return out;
}

template <typename T>
std::string sweep_markdown(const SweepReport<T>& rep) {
  std::ostringstream os;
  const auto& g = rep.guidance;
  os << "# Lambda_d sweep\n\n"
     << "Fraction of label-correct images whose counterfactual keeps the original label.\n"
     << "Guidance " << guidance::to_string(g.mode) << ", lambda_c " << num(g.lambda_c) << ", cone angle "
     << num(g.cone_angle) << " deg, start fraction " << num(g.start_fraction) << ".\n\n"
     << "| lambda_d |";
  for (const auto& dir : rep.directions) os << ' ' << dir.name() << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < rep.directions.size(); ++i) os << "---|";
  os << '\n';
  for (std::size_t c = 0; c < rep.cells.size(); c += rep.directions.size()) {
    os << "| " << num(rep.cells[c].lambda_d) << " |";
    for (std::size_t j = 0; j < rep.directions.size(); ++j) {
      const auto& cell = rep.cells[c + j];
      os << ' ' << pct(cell.failure) << " (" << cell.n - cell.flips << '/' << cell.n << ") |";
    }
    os << '\n';
  }
  os << "\n## Cell statistics\n\n"
     << "| lambda_d | direction | n | mean confidence | mean l2 | in-mask change | out-mask change |\n"
     << "|---|---|---|---|---|---|---|\n";
  for (const auto& c : rep.cells)
    os << "| " << num(c.lambda_d) << " | " << c.direction.name() << " | " << c.n << " | " << num(c.confidence)
       << " | " << num(c.l2) << " | " << (std::isnan(c.edits.in_mask) ? "n/a" : num(c.edits.in_mask)) << " | "
       << num(c.edits.out_mask) << " |\n";
  return os.str();
}

/// Recomputes every cell's failure fraction from the per-run CSV and checks
/// it against the report.
template <typename T>
bool sweep_consistent(const SweepReport<T>& rep, const std::string& runs_csv) {
  std::istringstream in(runs_csv);
  std::string line;
  if (!std::getline(in, line) || line != guidance::counterfactual_csv_header()) return false;
  std::map<std::pair<double, int>, std::pair<std::size_t, std::size_t>> tally;  // flips, n
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() < 9) return false;
    auto& t = tally[{std::stod(f[5]), std::stoi(f[3])}];
    t.first += f[8] == "1";
    ++t.second;
  }
  if (tally.size() != rep.cells.size()) return false;
  for (const auto& c : rep.cells) {
    auto it = std::find_if(tally.begin(), tally.end(), [&](const auto& e) {
      return std::abs(e.first.first - c.lambda_d) < 1e-9 && e.first.second == c.direction.target;
    });
    if (it == tally.end() || it->second.second != c.n) return false;
    if (1.0 - static_cast<double>(it->second.first) / static_cast<double>(it->second.second) != c.failure) return false;
  }
  return true;
}

/// sweep.md, sweep.csv, sweep_runs.csv and one PNG grid per cell.
template <typename T>
void write_sweep_report(const std::filesystem::path& dir, const SweepReport<T>& rep) {
  std::filesystem::create_directories(dir);
  write_text(dir / "sweep.md", sweep_markdown(rep));
  write_text(dir / "sweep.csv", sweep_csv(rep));
  write_text(dir / "sweep_runs.csv", sweep_runs_csv(rep));
  for (std::size_t c = 0; c < rep.cells.size(); ++c) {
    std::vector<const CounterfactualResult<T>*> rs;
    for (const auto& r : rep.runs)
      if (r.cell == c) rs.push_back(&r.result);
    const auto& cell = rep.cells[c];
    synthdata::write_png((dir / ("sweep_" + cell.direction.code() + "_ld" + num(cell.lambda_d) + ".png")).string(),
                         panel_grid(rep.originals[cell.direction.source], rs));
  }
}

}  // namespace cflab::experiments

#endif  // CFLAB_EXPERIMENTS_SWEEP_HPP
