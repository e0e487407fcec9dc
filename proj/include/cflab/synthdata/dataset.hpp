#ifndef CFLAB_SYNTHDATA_DATASET_HPP
#define CFLAB_SYNTHDATA_DATASET_HPP

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cflab/synthdata/generator.hpp"

namespace cflab::synthdata {

enum class Split { train, validation, test };
enum class Balance { as_is, oversample_diseased };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw InvalidArgument("unknown split: " + s);
}

inline Balance parse_balance(const std::string& s) {
  if (s == "as-is") return Balance::as_is;
  if (s == "oversample-diseased") return Balance::oversample_diseased;
  throw InvalidArgument("unknown balance mode: " + s);
}

struct DatasetSpec {
  Modality modality = Modality::fundus;
  Task task = Task::binary;
  std::size_t n_train = 100, n_validation = 20, n_test = 20;
  /// Share of each generator class; empty means uniform.
  std::vector<double> class_fractions;
  Balance balance = Balance::as_is;
  std::uint64_t seed = 0;
};

struct ManifestRow {
  std::uint64_t seed = 0;
  Modality modality = Modality::fundus;
  int cls = 0;
  Split split = Split::train;
};

/// Largest-remainder apportionment of n items over fractions.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& fractions) {
  double total = 0;
  for (double f : fractions) {
    if (!(f >= 0)) throw InvalidArgument("class fractions must be non-negative");
    total += f;
  }
  if (total <= 0) throw InvalidArgument("class fractions sum to zero");
  std::vector<std::size_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = n * fractions[i] / total;
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    used += counts[i];
    rem.emplace_back(exact - counts[i], i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++counts[rem[k % rem.size()].second];
  return counts;
}

class Dataset {
 public:
  Dataset() = default;
  Dataset(DatasetSpec spec, std::vector<ManifestRow> rows)
      : spec_(std::move(spec)), rows_(std::move(rows)) {}

  const DatasetSpec& spec() const noexcept { return spec_; }
  const std::vector<ManifestRow>& rows() const noexcept { return rows_; }

  std::vector<ManifestRow> split(Split s) const {
    std::vector<ManifestRow> out;
    for (const auto& r : rows_)
      if (r.split == s) out.push_back(r);
    return out;
  }

  int label(const ManifestRow& r) const { return task_label(spec_.modality, spec_.task, r.cls); }

  /// Training rows with diseased task classes repeated until each matches the
  /// count of task class 0. Under as-is balance this is the train split.
  std::vector<ManifestRow> training_stream() const {
    auto train = split(Split::train);
    if (spec_.balance == Balance::as_is) return train;
    std::map<int, std::vector<ManifestRow>> by_label;
    for (const auto& r : train) by_label[label(r)].push_back(r);
    const std::size_t target = by_label.count(0) ? by_label[0].size() : 0;
    std::vector<ManifestRow> out = by_label.count(0) ? by_label[0] : std::vector<ManifestRow>{};
    for (const auto& [lab, rows] : by_label) {
      if (lab == 0 || rows.empty()) continue;
      const std::size_t reps = std::max(target, rows.size());
      for (std::size_t i = 0; i < reps; ++i) out.push_back(rows[i % rows.size()]);
    }
    return out;
  }

  std::string manifest_csv() const {
    std::ostringstream os;
    os << "seed,modality,class,split\n";
    for (const auto& r : rows_)
      os << r.seed << ',' << to_string(r.modality) << ',' << r.cls << ',' << to_string(r.split) << '\n';
    return os.str();
  }

  void write_manifest(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingArtifact("cannot write manifest: " + path);
    f << manifest_csv();
  }

  static std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifact("cannot open manifest: " + path);
    std::string line;
    std::getline(f, line);
    if (line != "seed,modality,class,split") throw MissingArtifact("bad manifest header in " + path);
    std::vector<ManifestRow> rows;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string seed, mod, cls, split;
      std::getline(ss, seed, ',');
      std::getline(ss, mod, ',');
      std::getline(ss, cls, ',');
      std::getline(ss, split, ',');
      rows.push_back({std::stoull(seed), parse_modality(mod), std::stoi(cls), parse_split(split)});
    }
    return rows;
  }

 private:
  DatasetSpec spec_;
  std::vector<ManifestRow> rows_;
};

inline Dataset build_dataset(const DatasetSpec& spec) {
  if (spec.n_train < 1 || spec.n_validation < 1 || spec.n_test < 1)
    throw InvalidArgument("every split needs at least one sample");
  std::vector<double> fractions = spec.class_fractions;
  if (fractions.empty()) fractions.assign(class_count(spec.modality), 1.0);
  if (fractions.size() != static_cast<std::size_t>(class_count(spec.modality)))
    throw InvalidArgument("class_fractions needs one entry per class of " + to_string(spec.modality));

  std::vector<ManifestRow> rows;
  std::set<std::uint64_t> used;
  const std::pair<Split, std::size_t> splits[] = {
      {Split::train, spec.n_train}, {Split::validation, spec.n_validation}, {Split::test, spec.n_test}};
  for (const auto& [split, n] : splits) {
    const auto counts = apportion(n, fractions);
    std::uint64_t k = 0;
    for (std::size_t cls = 0; cls < counts.size(); ++cls)
      for (std::size_t i = 0; i < counts[cls]; ++i) {
        std::uint64_t seed;
        do {
          seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(split), k++}) >> 16;
        } while (!used.insert(seed).second);
        rows.push_back({seed, spec.modality, static_cast<int>(cls), split});
      }
  }
  return Dataset(spec, std::move(rows));
}

inline SynthSample generate(const ManifestRow& r) { return generate_sample(r.seed, r.modality, r.cls); }

/// Images of `rows` stacked into (N, 1, 32, 32).
inline Tensor<float> stack_images(const std::vector<ManifestRow>& rows) {
  std::vector<Tensor<float>> parts;
  parts.reserve(rows.size());
  for (const auto& r : rows) parts.push_back(generate(r).image.reshaped({1, 1, kImageSize, kImageSize}));
  return diffcore::concat_rows(parts);
}

}  // namespace cflab::synthdata

#endif  // CFLAB_SYNTHDATA_DATASET_HPP
