#pragma once

// Dataset manifests and train/validation/test splitting. Patches are laid
// out as root/<class-name>/<source_id>__<patch-id>.ppm; a manifest CSV lists
// path,label,source_id. Fold assignment is by source photograph so patches
// cut from one image never straddle a train/test boundary.

#include <dfu/image.hpp>

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace dfu {

struct ManifestEntry {
  std::string path;
  std::size_t label = 0;
  std::string source_id;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;  // optional; filled when scanning a directory

  std::size_t num_classes() const {
    std::size_t k = class_names.size();
    for (const auto& e : entries) k = std::max(k, e.label + 1);
    return k;
  }

  void validate() const {
    std::set<std::string> paths;
    for (const auto& e : entries) {
      if (e.source_id.empty()) throw std::invalid_argument("manifest: empty source_id");
      if (!paths.insert(e.path).second)
        throw std::invalid_argument("manifest: duplicate path " + e.path);
    }
  }
};

// Parses "<source_id>__<patch-id>" file stems; a stem without the separator
// is its own source.
inline std::string source_id_from_stem(const std::string& stem) {
  const auto at = stem.find("__");
  return at == std::string::npos ? stem : stem.substr(0, at);
}

inline DatasetManifest scan_dataset_dir(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root);
  DatasetManifest m;
  std::vector<std::string> classes;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) classes.push_back(entry.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw IoError("dataset root has no class directories: " + root);
  m.class_names = classes;
  for (std::size_t label = 0; label < classes.size(); ++label) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / classes[label]))
      if (entry.is_regular_file() && entry.path().extension() == ".ppm")
        files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    for (const std::string& f : files)
      m.entries.push_back({f, label, source_id_from_stem(fs::path(f).stem().string())});
  }
  m.validate();
  return m;
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "path,label,source_id\n";
  for (const auto& e : m.entries) out << e.path << ',' << e.label << ',' << e.source_id << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("manifest is empty: " + path);
  if (line != "path,label,source_id")
    throw IoError("manifest must start with the header path,label,source_id");
  DatasetManifest m;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 == std::string::npos ? 0 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw IoError("manifest line lacks three columns: " + line);
    ManifestEntry e;
    e.path = line.substr(0, c1);
    try {
      e.label = std::stoul(line.substr(c1 + 1, c2 - c1 - 1));
    } catch (...) {
      throw IoError("manifest label is not a number: " + line);
    }
    e.source_id = line.substr(c2 + 1);
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Fold plans

enum class SplitMode { kSingleSplit, kKfold };  // 85/5/10 or 10-fold

struct FoldAssignment {
  std::vector<std::string> train, val, test;  // source ids
};

struct FoldPlan {
  std::vector<FoldAssignment> folds;
  std::vector<std::string> warnings;
};

namespace detail {

inline void shuffle_strings(std::vector<std::string>& v, std::mt19937_64& gen) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[gen() % i]);
}

// Largest-remainder apportionment of n into parts proportional to fractions.
inline std::vector<std::size_t> largest_remainder(std::size_t n,
                                                  const std::vector<double>& fractions) {
  std::vector<std::size_t> base(fractions.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double q = fractions[i] * static_cast<double>(n);
    base[i] = static_cast<std::size_t>(q);
    assigned += base[i];
    rema.emplace_back(q - static_cast<double>(base[i]), i);
  }
  std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++base[rema[i % rema.size()].second];
  return base;
}

}  // namespace detail

// Assigns whole source photographs to partitions. kfold partitions sources
// into k near-equal test groups, each serving once as test, with roughly
// 1/19 of each fold's remainder as validation (5% of the total). The single
// split is the 85/5/10 analogue. Shuffling is seeded and per-class, so label
// proportions are approximately stratified.
inline FoldPlan make_folds(const DatasetManifest& manifest, std::size_t k, SplitMode mode,
                           std::uint64_t seed) {
  manifest.validate();
  // majority label per source for stratification
  std::map<std::string, std::map<std::size_t, std::size_t>> counts;
  for (const auto& e : manifest.entries) counts[e.source_id][e.label]++;
  std::map<std::size_t, std::vector<std::string>> strata;
  for (const auto& [source, labels] : counts) {
    std::size_t best_label = 0, best_count = 0;
    for (const auto& [label, c] : labels)
      if (c > best_count) {
        best_count = c;
        best_label = label;
      }
    strata[best_label].push_back(source);
  }
  const std::size_t total_sources = counts.size();

  std::mt19937_64 gen(seed);
  for (auto& [label, sources] : strata) {
    std::sort(sources.begin(), sources.end());
    detail::shuffle_strings(sources, gen);
  }

  FoldPlan plan;
  if (mode == SplitMode::kSingleSplit) {
    // Global partition sizes are exact (largest remainder over the total);
    // per-stratum floors keep the split approximately stratified and the
    // leftovers go to the globally under-filled partition.
    const std::vector<double> fractions = {0.85, 0.05, 0.10};
    const auto target = detail::largest_remainder(total_sources, fractions);
    std::map<std::size_t, std::array<std::size_t, 3>> stratum_alloc;
    std::array<std::size_t, 3> assigned{};
    for (auto& [label, sources] : strata) {
      std::array<std::size_t, 3> alloc{};
      for (std::size_t p = 0; p < 3; ++p) {
        alloc[p] = static_cast<std::size_t>(fractions[p] * static_cast<double>(sources.size()));
        assigned[p] += alloc[p];
      }
      stratum_alloc[label] = alloc;
    }
    for (auto& [label, sources] : strata) {
      auto& alloc = stratum_alloc[label];
      std::size_t leftover = sources.size() - (alloc[0] + alloc[1] + alloc[2]);
      while (leftover-- > 0) {
        std::size_t best = 0;
        for (std::size_t p = 1; p < 3; ++p)
          if (target[p] - assigned[p] > target[best] - assigned[best]) best = p;
        ++alloc[best];
        ++assigned[best];
      }
    }
    FoldAssignment fold;
    for (auto& [label, sources] : strata) {
      const auto& alloc = stratum_alloc[label];
      std::size_t at = 0;
      for (std::size_t i = 0; i < alloc[0]; ++i) fold.train.push_back(sources[at++]);
      for (std::size_t i = 0; i < alloc[1]; ++i) fold.val.push_back(sources[at++]);
      for (std::size_t i = 0; i < alloc[2]; ++i) fold.test.push_back(sources[at++]);
    }
    plan.folds.push_back(std::move(fold));
  } else {
    if (total_sources < k)
      throw std::invalid_argument("kfold: need at least " + std::to_string(k) +
                                  " distinct source ids, have " + std::to_string(total_sources));
    // deal each stratum round-robin into k test groups
    std::vector<std::vector<std::string>> groups(k);
    std::size_t next = 0;
    for (const auto& [label, sources] : strata)
      for (const std::string& s : sources) groups[next++ % k].push_back(s);

    for (std::size_t fi = 0; fi < k; ++fi) {
      FoldAssignment fold;
      fold.test = groups[fi];
      std::vector<std::string> remainder;
      for (std::size_t gi = 0; gi < k; ++gi)
        if (gi != fi)
          remainder.insert(remainder.end(), groups[gi].begin(), groups[gi].end());
      // every 19th source of the remainder (about 5% of the total) validates
      for (std::size_t i = 0; i < remainder.size(); ++i)
        (i % 19 == 9 ? fold.val : fold.train).push_back(remainder[i]);
      plan.folds.push_back(std::move(fold));
    }
  }

  // sorted members keep the plan independent of traversal order
  for (auto& fold : plan.folds) {
    std::sort(fold.train.begin(), fold.train.end());
    std::sort(fold.val.begin(), fold.val.end());
    std::sort(fold.test.begin(), fold.test.end());
  }

  // warn about label-empty partitions
  std::map<std::string, std::size_t> majority;
  for (const auto& [label, sources] : strata)
    for (const std::string& s : sources) majority[s] = label;
  const std::size_t num_classes = manifest.num_classes();
  for (std::size_t fi = 0; fi < plan.folds.size(); ++fi) {
    auto check = [&](const std::vector<std::string>& part, const char* name) {
      if (part.empty()) return;
      std::set<std::size_t> seen;
      for (const std::string& s : part) seen.insert(majority.at(s));
      for (std::size_t cls = 0; cls < num_classes; ++cls)
        if (!seen.count(cls))
          plan.warnings.push_back("fold " + std::to_string(fi) + ": " + name +
                                  " has no sources of class " + std::to_string(cls));
    };
    check(plan.folds[fi].train, "train");
    check(plan.folds[fi].val, "val");
    check(plan.folds[fi].test, "test");
  }
  return plan;
}

// JSON form: {"0": {"train": [...], "val": [...], "test": [...]}, ...}
inline nlohmann::json fold_plan_to_json(const FoldPlan& plan) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < plan.folds.size(); ++i)
    j[std::to_string(i)] = {{"train", plan.folds[i].train},
                            {"val", plan.folds[i].val},
                            {"test", plan.folds[i].test}};
  return j;
}

inline FoldPlan fold_plan_from_json(const nlohmann::json& j) {
  FoldPlan plan;
  plan.folds.resize(j.size());
  for (const auto& [key, value] : j.items()) {
    const std::size_t idx = std::stoul(key);
    if (idx >= plan.folds.size()) throw IoError("fold plan: non-contiguous fold indices");
    plan.folds[idx].train = value.at("train").get<std::vector<std::string>>();
    plan.folds[idx].val = value.at("val").get<std::vector<std::string>>();
    plan.folds[idx].test = value.at("test").get<std::vector<std::string>>();
  }
  return plan;
}

inline void save_fold_plan(const std::string& path, const FoldPlan& plan) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << fold_plan_to_json(plan).dump(2) << '\n';
}

inline FoldPlan load_fold_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open fold plan: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("fold plan is not valid JSON: ") + e.what());
  }
  return fold_plan_from_json(j);
}

}  // namespace dfu
