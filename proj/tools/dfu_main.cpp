// Command-line surface for the patch-classification engine: augment a
// dataset, extract classical features, train the CNN or the SVM, score a
// test split, and render ROC/AUC reports.
//
// Exit codes: 0 success, 2 input or format errors, 3 numeric failures.

#include <dfu/augment.hpp>
#include <dfu/checkpoint.hpp>
#include <dfu/dataset.hpp>
#include <dfu/features.hpp>
#include <dfu/metrics.hpp>
#include <dfu/network.hpp>
#include <dfu/optim.hpp>
#include <dfu/svm.hpp>

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace dfu;

namespace {

constexpr std::uint64_t kDefaultSeed = 42;

std::uint64_t env_seed_or(std::uint64_t fallback) {
  if (const char* env = std::getenv("DFU_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      throw IoError("DFU_SEED is not a number: " + std::string(env));
    }
  }
  return fallback;
}

struct ArchDefaults {
  std::size_t epochs;
  std::size_t batch;
  double lr;
};

ArchDefaults defaults_for(const std::string& arch) {
  if (arch == "lenet") return {60, 8, 0.01};
  return {40, 8, 0.001};  // dfunet family
}

// Sources assigned to one partition of a fold.
std::set<std::string> partition_sources(const FoldAssignment& fold, const std::string& which) {
  const std::vector<std::string>* part = &fold.train;
  if (which == "val") part = &fold.val;
  if (which == "test") part = &fold.test;
  return std::set<std::string>(part->begin(), part->end());
}

std::vector<ManifestEntry> entries_for(const DatasetManifest& manifest,
                                       const std::set<std::string>& sources) {
  std::vector<ManifestEntry> out;
  for (const auto& e : manifest.entries)
    if (sources.count(e.source_id)) out.push_back(e);
  return out;
}

// Image -> network input tensor for the given spec (grayscale nets take the
// luminance plane; color nets take RGB), resized to the network spec's extent.
Tensor entry_to_input(const std::string& path, const NetworkSpec& spec) {
  ImageBuffer img = read_ppm_file(path);
  if (spec.input_shape[0] == 1) img = convert_colorspace(img, Colorspace::kGray);
  img = resize_patch(img, spec.input_shape[2], spec.input_shape[1]);
  return patch_to_tensor(img);
}

LabeledData assemble(const std::vector<ManifestEntry>& entries, const NetworkSpec& spec,
                     const Normalizer* normalizer) {
  if (entries.empty()) throw std::invalid_argument("no patches selected");
  LabeledData data;
  data.inputs = Tensor({entries.size(), spec.input_shape[0], spec.input_shape[1],
                        spec.input_shape[2]});
  data.labels.resize(entries.size());
  const std::size_t sample = spec.input_shape[0] * spec.input_shape[1] * spec.input_shape[2];
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entry_to_input(entries[i].path, spec);
    if (normalizer) t = apply_normalizer(*normalizer, t);
    std::copy_n(t.data(), sample, data.inputs.data() + i * sample);
    data.labels[i] = entries[i].label;
  }
  return data;
}

// Batched softmax scoring; returns per-sample class probabilities.
std::vector<std::vector<double>> score_batchwise(const NetworkSpec& spec, const Params& params,
                                                 const LabeledData& data,
                                                 std::size_t batch = 32) {
  const std::size_t n = data.labels.size();
  const std::size_t sample = data.inputs.size() / n;
  std::vector<std::vector<double>> probs(n);
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const std::size_t end = std::min(begin + batch, n);
    Tensor chunk({end - begin, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]});
    std::copy_n(data.inputs.data() + begin * sample, (end - begin) * sample, chunk.data());
    Tensor logits = forward(spec, params, chunk);
    for (std::size_t row = 0; row < end - begin; ++row) {
      Tensor z({spec.num_classes});
      for (std::size_t k = 0; k < spec.num_classes; ++k) z[k] = logits.at2(row, k);
      probs[begin + row] = softmax_cross_entropy(z, 0).probabilities.values();
    }
  }
  return probs;
}

// ---------------------------------------------------------------------------

int cmd_augment(const std::string& in_dir, const std::string& out_dir, std::uint64_t seed) {
  DatasetManifest manifest = scan_dataset_dir(in_dir);
  DatasetManifest out_manifest;
  out_manifest.class_names = manifest.class_names;
  std::size_t originals = 0, written = 0;
  for (const auto& entry : manifest.entries) {
    PatchRecord patch{read_ppm_file(entry.path), entry.label, entry.source_id, "original"};
    const fs::path src(entry.path);
    const std::string cls = manifest.class_names[entry.label];
    fs::create_directories(fs::path(out_dir) / cls);
    auto variants = augment_patch(patch, seed);
    for (std::size_t i = 0; i < variants.size(); ++i) {
      const std::string name = src.stem().string() + "-a" + std::to_string(i + 1) + ".ppm";
      const fs::path dst = fs::path(out_dir) / cls / name;
      write_ppm_file(dst.string(), variants[i].image);
      out_manifest.entries.push_back({dst.string(), entry.label, entry.source_id});
      ++written;
    }
    ++originals;
  }
  write_manifest((fs::path(out_dir) / "manifest.csv").string(), out_manifest);
  std::cout << "originals: " << originals << "\naugmented: " << written << " (15x)\n";
  return 0;
}

int cmd_train(const std::string& manifest_path, const std::string& arch,
              const std::string& folds_path, std::size_t fold_index, const std::string& out_path,
              std::size_t epochs, std::size_t batch, double lr, double gamma,
              double step_fraction, std::uint64_t seed, std::size_t input_size,
              std::size_t fc1_units, bool final_pool_max, const std::string& log_path) {
  DatasetManifest manifest = read_manifest(manifest_path);
  FoldPlan plan = load_fold_plan(folds_path);
  if (fold_index >= plan.folds.size())
    throw std::invalid_argument("fold index " + std::to_string(fold_index) +
                                " out of range (plan has " +
                                std::to_string(plan.folds.size()) + ")");
  const FoldAssignment& fold = plan.folds[fold_index];
  const std::size_t classes = std::max<std::size_t>(2, manifest.num_classes());

  NetworkSpec spec;
  if (arch == "lenet") {
    spec = build_lenet(classes);
  } else if (arch.rfind("dfunet-", 0) == 0) {
    DfunetOptions options;
    options.fc1_units = fc1_units;
    options.final_pool_max = final_pool_max;
    spec = build_dfunet(dfunet_variant_from_string(arch.substr(7)), 3, input_size, input_size,
                        classes, options);
  } else {
    throw std::invalid_argument("unknown architecture: " + arch);
  }

  std::cout << "arch=" << arch << " epochs=" << epochs << " batch=" << batch << " lr=" << lr
            << " gamma=" << gamma << " step_fraction=" << step_fraction << " seed=" << seed
            << " input=" << spec.input_shape[0] << "x" << spec.input_shape[1] << "x"
            << spec.input_shape[2] << " classes=" << classes << "\n";

  const auto train_entries = entries_for(manifest, partition_sources(fold, "train"));
  if (train_entries.empty()) throw std::invalid_argument("fold has an empty train split");
  const auto val_entries = entries_for(manifest, partition_sources(fold, "val"));

  // fit the zero-center normalizer on the raw training patches
  std::vector<Tensor> raw;
  raw.reserve(train_entries.size());
  for (const auto& e : train_entries) raw.push_back(entry_to_input(e.path, spec));
  Normalizer normalizer = fit_normalizer(raw);
  raw.clear();

  LabeledData train_data = assemble(train_entries, spec, &normalizer);
  LabeledData val_data;
  if (!val_entries.empty()) val_data = assemble(val_entries, spec, &normalizer);

  Params params = init_params(spec, seed);
  TrainConfig config;
  config.epochs = epochs;
  config.batch_size = std::min(batch, train_data.labels.size());
  config.base_lr = lr;
  config.gamma = gamma;
  config.step_fraction = step_fraction;
  config.seed = seed;
  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) throw IoError("cannot open " + log_path + " for writing");
    config.log = &log_file;
  } else {
    config.log = &std::cout;
  }
  if (!val_entries.empty())
    config.on_epoch_end = [&](const EpochStats& stats, const Params& p) {
      auto probs = score_batchwise(spec, p, val_data);
      std::size_t correct = 0;
      double loss = 0.0;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < probs[i].size(); ++k)
          if (probs[i][k] > probs[i][best]) best = k;
        correct += best == val_data.labels[i];
        loss += -std::log(std::max(probs[i][val_data.labels[i]], 1e-300));
      }
      std::cerr << "val epoch=" << stats.epoch
                << " loss=" << loss / static_cast<double>(probs.size()) << " accuracy="
                << static_cast<double>(correct) / static_cast<double>(probs.size()) << "\n";
    };

  train(spec, params, train_data, config);

  std::vector<std::pair<std::string, Tensor>> extras = {{"normalizer.mean", normalizer.mean},
                                                        {"normalizer.std", normalizer.stddev}};
  nlohmann::json flags = {{"arch", arch},
                          {"normalizer", {{"epsilon", normalizer.epsilon}}},
                          {"seed", seed}};
  save_checkpoint(out_path, spec, params, nullptr, extras, flags);
  std::cout << "checkpoint written: " << out_path << "\n";
  return 0;
}

int cmd_features(const std::string& manifest_path, const std::string& which_str,
                 const std::string& out_path) {
  DatasetManifest manifest = read_manifest(manifest_path);
  const FeatureSelection which = feature_selection_from_string(which_str);
  const FeatureConfig cfg;
  std::vector<FeatureRow> rows;
  std::vector<FeatureSegment> layout;
  for (const auto& entry : manifest.entries) {
    ImageBuffer img = read_ppm_file(entry.path);
    FeatureVector fv = extract_features(img, which, cfg);
    if (layout.empty()) layout = fv.layout;
    rows.push_back({entry.path, static_cast<int>(entry.label), std::move(fv.values)});
  }
  if (rows.empty()) throw std::invalid_argument("manifest has no patches");
  write_feature_csv(out_path, rows, layout, which, cfg);
  std::cout << "features: " << rows.size() << " rows x " << rows.front().values.size()
            << " columns\n";
  return 0;
}

int cmd_svm_train(const std::string& features_path, double c, const std::string& kernel_str,
                  double gamma, double tol, std::size_t max_passes, const std::string& out_path,
                  const std::string& folds_path, long fold_index,
                  const std::string& manifest_path) {
  auto rows = read_feature_csv(features_path);
  if (rows.empty()) throw std::invalid_argument("feature file has no rows");

  if (!folds_path.empty()) {  // optional: keep only the fold's training sources
    if (manifest_path.empty())
      throw std::invalid_argument("--folds filtering needs --manifest to map ids to sources");
    DatasetManifest manifest = read_manifest(manifest_path);
    std::map<std::string, std::string> source_of;
    for (const auto& e : manifest.entries) source_of[e.path] = e.source_id;
    FoldPlan plan = load_fold_plan(folds_path);
    if (fold_index < 0 || static_cast<std::size_t>(fold_index) >= plan.folds.size())
      throw std::invalid_argument("fold index out of range");
    auto train_sources = partition_sources(plan.folds[fold_index], "train");
    std::vector<FeatureRow> kept;
    for (auto& row : rows) {
      auto it = source_of.find(row.id);
      if (it != source_of.end() && train_sources.count(it->second))
        kept.push_back(std::move(row));
    }
    rows = std::move(kept);
    if (rows.empty()) throw std::invalid_argument("fold filtering left no training rows");
  }

  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (const auto& row : rows) {
    x.push_back(row.values);
    y.push_back(row.label == 1 ? 1 : -1);
  }

  KernelSpec kernel;
  if (kernel_str == "rbf")
    kernel = {KernelKind::kRbf, gamma};
  else if (kernel_str != "linear")
    throw std::invalid_argument("unknown kernel: " + kernel_str);

  SmoOptions options;
  options.tol = tol;
  options.max_passes = max_passes;
  std::cout << "svm: C=" << c << " kernel=" << kernel_str << " tol=" << tol
            << " max_passes=" << max_passes << " rows=" << rows.size() << "\n";
  SvmModel model = smo_train(x, y, c, kernel, options);

  nlohmann::json extra = nlohmann::json::object();
  std::ifstream meta_in(features_path + ".meta.json");
  if (meta_in) {
    nlohmann::json meta;
    meta_in >> meta;
    extra["features"] = meta;
  }
  save_svm_model(out_path, model, extra);
  std::cout << "support vectors: " << model.support_vectors.size()
            << "  iterations: " << model.iterations << "  model written: " << out_path << "\n";
  return 0;
}

bool is_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model: " + path);
  char magic[4] = {};
  in.read(magic, 4);
  return in && std::string(magic, 4) == "DFUN";
}

int cmd_eval(const std::string& model_path, const std::string& manifest_path,
             const std::string& folds_path, std::size_t fold_index,
             const std::string& metrics_path, const std::string& scores_path) {
  DatasetManifest manifest = read_manifest(manifest_path);
  FoldPlan plan = load_fold_plan(folds_path);
  if (fold_index >= plan.folds.size()) throw std::invalid_argument("fold index out of range");
  const auto test_entries = entries_for(manifest, partition_sources(plan.folds[fold_index], "test"));
  if (test_entries.empty()) throw std::invalid_argument("fold has an empty test split");

  std::vector<ScoredSample> samples;
  std::vector<std::size_t> predicted;
  std::size_t classes = 2;

  if (is_checkpoint_file(model_path)) {
    Checkpoint ckpt = load_checkpoint(model_path);
    Params params = params_from_checkpoint(ckpt);
    classes = ckpt.spec.num_classes;
    Normalizer normalizer;
    normalizer.mean = ckpt.tensors.at("normalizer.mean");
    normalizer.stddev = ckpt.tensors.at("normalizer.std");
    if (ckpt.flags.contains("normalizer"))
      normalizer.epsilon = ckpt.flags["normalizer"].value("epsilon", 1e-8);
    LabeledData data = assemble(test_entries, ckpt.spec, &normalizer);
    auto probs = score_batchwise(ckpt.spec, params, data);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < probs[i].size(); ++k)
        if (probs[i][k] > probs[i][best]) best = k;
      predicted.push_back(best);
      samples.push_back({test_entries[i].path, test_entries[i].label == 1 ? 1 : 0,
                         probs[i].size() > 1 ? probs[i][1] : probs[i][0]});
    }
  } else {
    nlohmann::json extra;
    SvmModel model = load_svm_model(model_path, &extra);
    FeatureSelection which = FeatureSelection::kLbpHogColor;
    if (extra.contains("features") && extra["features"].contains("which"))
      which = feature_selection_from_string(extra["features"]["which"].get<std::string>());
    for (const auto& entry : test_entries) {
      ImageBuffer img = read_ppm_file(entry.path);
      FeatureVector fv = extract_features(img, which);
      const double f = svm_decision(model, fv.values);
      predicted.push_back(f >= 0.0 ? 1 : 0);
      samples.push_back({entry.path, entry.label == 1 ? 1 : 0, f});
    }
  }

  nlohmann::json metrics;
  if (classes <= 2) {
    ConfusionCounts counts;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const bool truth = test_entries[i].label == 1;
      const bool pred = predicted[i] == 1;
      if (truth && pred) ++counts.tp;
      else if (truth) ++counts.fn;
      else if (pred) ++counts.fp;
      else ++counts.tn;
    }
    BinaryReport report = binary_report(counts);
    std::optional<AucReport> auc;
    bool both = false, pos_seen = false, neg_seen = false;
    for (const auto& s : samples) (s.label == 1 ? pos_seen : neg_seen) = true;
    both = pos_seen && neg_seen;
    if (both) auc = auc_report(samples);
    metrics = metrics_to_json(report, mcc(counts), auc);
  } else {
    MulticlassCounts counts = make_multiclass_counts(classes);
    for (std::size_t i = 0; i < samples.size(); ++i)
      ++counts.at(test_entries[i].label, predicted[i]);
    MacroReport report = multiclass_report(counts);
    BinaryReport as_binary{report.sensitivity, report.specificity, report.precision,
                           report.accuracy, report.f_measure};
    metrics = metrics_to_json(as_binary, report.mcc);
  }

  write_scores_csv(scores_path, samples);
  std::ofstream metrics_out(metrics_path);
  if (!metrics_out) throw IoError("cannot open " + metrics_path + " for writing");
  metrics_out << metrics.dump(2) << '\n';
  std::cout << "evaluated " << samples.size() << " test patches; metrics: " << metrics_path
            << " scores: " << scores_path << "\n";
  return 0;
}

int cmd_report(const std::string& scores_list, const std::string& svg_path,
               const std::string& table_path) {
  std::vector<std::pair<std::string, RocCurve>> curves;
  std::vector<std::pair<std::string, AucReport>> reports;
  std::size_t begin = 0;
  while (begin <= scores_list.size()) {
    const auto comma = scores_list.find(',', begin);
    const std::string path = scores_list.substr(
        begin, comma == std::string::npos ? std::string::npos : comma - begin);
    if (!path.empty()) {
      auto samples = read_scores_csv(path);
      RocCurve curve = roc_curve(samples);
      const std::string name = fs::path(path).stem().string();
      curves.emplace_back(name, curve);
      reports.emplace_back(name, auc_report(curve));
    }
    if (comma == std::string::npos) break;
    begin = comma + 1;
  }
  if (curves.empty()) throw std::invalid_argument("no scores files given");

  write_roc_svg(svg_path, curves);
  std::ofstream table(table_path);
  if (!table) throw IoError("cannot open " + table_path + " for writing");
  table << "model,auc,se,ci_low,ci_high\n";
  table.precision(17);
  for (const auto& [name, r] : reports)
    table << name << ',' << r.auc << ',' << r.se << ',' << r.ci_low << ',' << r.ci_high << '\n';
  std::cout << "report: " << svg_path << " " << table_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DFU patch classification toolkit"};
  app.require_subcommand(1);

  std::string in_dir, out_dir, manifest_path, folds_path, out_path, arch = "dfunet-base";
  std::string which = "lbp+hog+color", kernel = "linear", features_path, model_path;
  std::string metrics_path = "metrics.json", scores_path = "scores.csv", scores_list;
  std::string svg_path = "roc.svg", table_path = "table.csv", log_path;
  std::uint64_t seed = kDefaultSeed;
  std::size_t fold_index = 0, input_size = 224, fc1_units = 100;
  long svm_fold = -1;
  std::size_t epochs = 0, batch = 0, max_passes = 100;
  double lr = 0.0, gamma_lr = 0.1, step_fraction = 0.33, c_value = 1.0, rbf_gamma = 1.0;
  double tol = 1e-3;
  bool final_pool_max = false;

  auto* aug = app.add_subcommand("augment", "write the 15 augmented variants of every patch");
  aug->add_option("--in", in_dir, "dataset root (root/<class>/<source>__<patch>.ppm)")->required();
  aug->add_option("--out", out_dir, "output root")->required();
  CLI::Option* aug_seed = aug->add_option("--seed", seed, "crop randomness seed");

  auto* trn = app.add_subcommand("train", "train a CNN on one fold");
  trn->add_option("--manifest", manifest_path)->required();
  trn->add_option("--arch", arch, "dfunet-base|dfunet-v1..v5|lenet");
  trn->add_option("--folds", folds_path)->required();
  trn->add_option("--fold", fold_index);
  trn->add_option("--out", out_path)->required();
  trn->add_option("--epochs", epochs);
  trn->add_option("--batch", batch);
  trn->add_option("--lr", lr);
  trn->add_option("--gamma", gamma_lr);
  trn->add_option("--step-fraction", step_fraction);
  CLI::Option* trn_seed = trn->add_option("--seed", seed);
  trn->add_option("--input-size", input_size, "square input extent for dfunet");
  trn->add_option("--fc1-units", fc1_units);
  trn->add_flag("--final-pool-max", final_pool_max, "7x7 max pool instead of global average");
  trn->add_option("--log", log_path, "write the per-iteration training CSV here");

  auto* fea = app.add_subcommand("features", "extract classical descriptors to CSV");
  fea->add_option("--manifest", manifest_path)->required();
  fea->add_option("--which", which, "lbp|lbp+hog|lbp+hog+color");
  fea->add_option("--out", out_path)->required();

  auto* svm = app.add_subcommand("svm-train", "train the SMO classifier on a feature CSV");
  svm->add_option("--features", features_path)->required();
  svm->add_option("--C", c_value);
  svm->add_option("--kernel", kernel, "linear|rbf");
  svm->add_option("--gamma", rbf_gamma, "rbf kernel width");
  svm->add_option("--tol", tol);
  svm->add_option("--max-passes", max_passes);
  svm->add_option("--out", out_path)->required();
  svm->add_option("--folds", folds_path, "optional fold plan for train-split filtering");
  svm->add_option("--fold", svm_fold);
  svm->add_option("--manifest", manifest_path, "needed with --folds to map rows to sources");

  auto* evl = app.add_subcommand("eval", "score a fold's test split with a trained model");
  evl->add_option("--model", model_path, "checkpoint (CNN) or JSON (SVM)")->required();
  evl->add_option("--manifest", manifest_path)->required();
  evl->add_option("--folds", folds_path)->required();
  evl->add_option("--fold", fold_index);
  evl->add_option("--out", metrics_path);
  evl->add_option("--scores", scores_path);

  auto* rep = app.add_subcommand("report", "multi-model ROC SVG and AUC table");
  rep->add_option("--scores", scores_list, "comma-separated scores CSV files")->required();
  rep->add_option("--out", svg_path);
  rep->add_option("--table", table_path);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    // DFU_SEED overrides the default; an explicit --seed wins over both
    const bool seed_given = (app.got_subcommand(aug) && aug_seed->count() > 0) ||
                            (app.got_subcommand(trn) && trn_seed->count() > 0);
    if (!seed_given) seed = env_seed_or(kDefaultSeed);
    if (app.got_subcommand(aug)) return cmd_augment(in_dir, out_dir, seed);
    if (app.got_subcommand(trn)) {
      const ArchDefaults d = defaults_for(arch);
      return cmd_train(manifest_path, arch, folds_path, fold_index, out_path,
                       epochs ? epochs : d.epochs, batch ? batch : d.batch, lr > 0 ? lr : d.lr,
                       gamma_lr, step_fraction, seed, input_size, fc1_units, final_pool_max,
                       log_path);
    }
    if (app.got_subcommand(fea)) return cmd_features(manifest_path, which, out_path);
    if (app.got_subcommand(svm))
      return cmd_svm_train(features_path, c_value, kernel, rbf_gamma, tol, max_passes, out_path,
                           folds_path, svm_fold, manifest_path);
    if (app.got_subcommand(evl))
      return cmd_eval(model_path, manifest_path, folds_path, fold_index, metrics_path,
                      scores_path);
    if (app.got_subcommand(rep)) return cmd_report(scores_list, svg_path, table_path);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
