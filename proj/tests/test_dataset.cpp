#include <dfu/augment.hpp>
#include <dfu/dataset.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "test_support.hpp"

using namespace dfu;
namespace fs = std::filesystem;

namespace {

ImageBuffer random_rgb(std::size_t w, std::size_t h, testsupport::Rng& rng) {
  ImageBuffer img = make_image(w, h, 3);
  for (auto& s : img.samples) s = static_cast<std::uint8_t>(rng.integer(256));
  return img;
}

DatasetManifest synthetic_manifest(std::size_t sources, std::size_t patches_per_source) {
  DatasetManifest m;
  m.class_names = {"normal", "abnormal"};
  for (std::size_t s = 0; s < sources; ++s)
    for (std::size_t p = 0; p < patches_per_source; ++p) {
      ManifestEntry e;
      e.source_id = "src" + std::to_string(s);
      e.label = s % 2;
      e.path = "root/" + m.class_names[e.label] + "/" + e.source_id + "__p" +
               std::to_string(p) + ".ppm";
      m.entries.push_back(e);
    }
  return m;
}

}  // namespace

TEST_CASE("augmentation emits exactly 15 variants preserving label and source") {
  testsupport::Rng rng(61);
  PatchRecord patch{random_rgb(20, 20, rng), 1, "srcA", "original"};
  auto out = augment_patch(patch, 1234);
  REQUIRE(out.size() == 15);
  std::set<std::string> kinds;
  for (const auto& p : out) {
    CHECK(p.label == 1);
    CHECK(p.source_id == "srcA");
    CHECK(p.provenance.rfind("augmented:", 0) == 0);
    kinds.insert(p.provenance);
  }
  CHECK(kinds.size() == 15);
}

TEST_CASE("90 degree rotation permutes pixels clockwise") {
  ImageBuffer img = make_image(2, 2, 1, Colorspace::kGray);
  img.samples = {10, 20, 30, 40};  // [[a,b],[c,d]]
  ImageBuffer rot = rotate90(img);
  CHECK(rot.samples == std::vector<std::uint8_t>({30, 10, 40, 20}));  // [[c,a],[d,b]]
}

TEST_CASE("geometric transforms are bijections with their inverses") {
  testsupport::Rng rng(63);
  ImageBuffer img = random_rgb(7, 5, rng);
  CHECK(rotate270(rotate90(img)).samples == img.samples);
  CHECK(rotate180(rotate180(img)).samples == img.samples);
  CHECK(flip_horizontal(flip_horizontal(img)).samples == img.samples);
  CHECK(flip_vertical(flip_vertical(img)).samples == img.samples);
}

TEST_CASE("augmentation is deterministic in the patch and seed") {
  testsupport::Rng rng(65);
  PatchRecord patch{random_rgb(16, 16, rng), 0, "srcB", "original"};
  auto a = augment_patch(patch, 99);
  auto b = augment_patch(patch, 99);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].image.samples == b[i].image.samples);

  auto c = augment_patch(patch, 100);  // crops move with the seed
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    any_diff |= a[i].image.samples != c[i].image.samples;
  CHECK(any_diff);
}

TEST_CASE("augmentation rejects non-RGB patches") {
  PatchRecord gray{make_image(8, 8, 1, Colorspace::kGray), 0, "s", "original"};
  CHECK_THROWS_AS(augment_patch(gray, 1), std::invalid_argument);
}

TEST_CASE("normalizer zero-centers the fit set") {
  testsupport::Rng rng(67);
  std::vector<Tensor> patches;
  for (int i = 0; i < 6; ++i) patches.push_back(rng.tensor({3, 4, 4}, 0, 255));
  Normalizer n = fit_normalizer(patches);
  Tensor sums({3, 4, 4});
  for (const auto& p : patches) {
    Tensor z = apply_normalizer(n, p);
    for (std::size_t i = 0; i < z.size(); ++i) {
      CHECK(std::isfinite(z[i]));
      sums[i] += z[i];
    }
  }
  for (std::size_t i = 0; i < sums.size(); ++i)
    CHECK(std::abs(sums[i] / 6.0) < 1e-9);
}

TEST_CASE("normalizer on a single patch maps it to zero") {
  testsupport::Rng rng(69);
  Tensor p = rng.tensor({1, 3, 3}, 0, 255);
  Normalizer n = fit_normalizer({p});
  Tensor z = apply_normalizer(n, p);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0);
}

TEST_CASE("two-patch fit gives plus and minus one under the population convention") {
  Tensor a({1, 1, 1}, {0.0});
  Tensor b({1, 1, 1}, {10.0});
  Normalizer n = fit_normalizer({a, b});
  CHECK(n.mean[0] == 5.0);
  CHECK(n.stddev[0] == 5.0);
  CHECK(apply_normalizer(n, a)[0] == Catch::Approx(-1.0).margin(1e-8));
  CHECK(apply_normalizer(n, b)[0] == Catch::Approx(1.0).margin(1e-8));
}

TEST_CASE("normalizer rejects shape mismatches and empty fit sets") {
  CHECK_THROWS_AS(fit_normalizer({}), std::invalid_argument);
  Normalizer n = fit_normalizer({Tensor({1, 2, 2}, 1.0)});
  CHECK_THROWS_AS(apply_normalizer(n, Tensor({1, 3, 3})), std::invalid_argument);
}

TEST_CASE("kfold test groups partition the source universe") {
  DatasetManifest m = synthetic_manifest(25, 4);
  FoldPlan plan = make_folds(m, 10, SplitMode::kKfold, 7);
  REQUIRE(plan.folds.size() == 10);
  std::set<std::string> all_test;
  std::size_t total = 0;
  for (const auto& fold : plan.folds) {
    for (const std::string& s : fold.test) {
      CHECK(!all_test.count(s));  // pairwise disjoint
      all_test.insert(s);
    }
    total += fold.test.size();
    // no source appears in both train and test
    std::set<std::string> train(fold.train.begin(), fold.train.end());
    for (const std::string& s : fold.test) CHECK(!train.count(s));
    for (const std::string& s : fold.val) CHECK(!train.count(s));
    CHECK(fold.train.size() + fold.val.size() + fold.test.size() == 25);
  }
  CHECK(total == 25);
  CHECK(all_test.size() == 25);
}

TEST_CASE("single split of 100 equal sources is exactly 85/5/10") {
  DatasetManifest m = synthetic_manifest(100, 3);
  FoldPlan plan = make_folds(m, 10, SplitMode::kSingleSplit, 3);
  REQUIRE(plan.folds.size() == 1);
  CHECK(plan.folds[0].train.size() == 85);
  CHECK(plan.folds[0].val.size() == 5);
  CHECK(plan.folds[0].test.size() == 10);
}

TEST_CASE("fold plans are deterministic per seed") {
  DatasetManifest m = synthetic_manifest(30, 2);
  FoldPlan a = make_folds(m, 10, SplitMode::kKfold, 11);
  FoldPlan b = make_folds(m, 10, SplitMode::kKfold, 11);
  CHECK(fold_plan_to_json(a) == fold_plan_to_json(b));
  FoldPlan c = make_folds(m, 10, SplitMode::kKfold, 12);
  CHECK(fold_plan_to_json(a) != fold_plan_to_json(c));
}

TEST_CASE("kfold rejects too few sources") {
  DatasetManifest m = synthetic_manifest(6, 2);
  CHECK_THROWS_AS(make_folds(m, 10, SplitMode::kKfold, 1), std::invalid_argument);
}

TEST_CASE("fold plan JSON round trips") {
  DatasetManifest m = synthetic_manifest(20, 2);
  FoldPlan plan = make_folds(m, 10, SplitMode::kKfold, 5);
  FoldPlan back = fold_plan_from_json(fold_plan_to_json(plan));
  CHECK(fold_plan_to_json(back) == fold_plan_to_json(plan));
}

TEST_CASE("manifest CSV round trips and validates") {
  DatasetManifest m = synthetic_manifest(5, 2);
  const fs::path tmp = fs::temp_directory_path() / "dfu_manifest_test.csv";
  write_manifest(tmp.string(), m);
  DatasetManifest back = read_manifest(tmp.string());
  REQUIRE(back.entries.size() == m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    CHECK(back.entries[i].path == m.entries[i].path);
    CHECK(back.entries[i].label == m.entries[i].label);
    CHECK(back.entries[i].source_id == m.entries[i].source_id);
  }
  fs::remove(tmp);

  DatasetManifest dup = m;
  dup.entries.push_back(dup.entries.front());
  CHECK_THROWS_AS(dup.validate(), std::invalid_argument);
}

TEST_CASE("directory scan assigns labels from sorted class names") {
  testsupport::Rng rng(71);
  const fs::path root = fs::temp_directory_path() / "dfu_scan_test";
  fs::remove_all(root);
  fs::create_directories(root / "abnormal");
  fs::create_directories(root / "normal");
  write_ppm_file((root / "abnormal" / "s1__p0.ppm").string(), random_rgb(4, 4, rng));
  write_ppm_file((root / "normal" / "s2__p0.ppm").string(), random_rgb(4, 4, rng));
  write_ppm_file((root / "normal" / "s2__p1.ppm").string(), random_rgb(4, 4, rng));

  DatasetManifest m = scan_dataset_dir(root.string());
  REQUIRE(m.class_names == std::vector<std::string>({"abnormal", "normal"}));
  REQUIRE(m.entries.size() == 3);
  CHECK(m.entries[0].label == 0);
  CHECK(m.entries[0].source_id == "s1");
  CHECK(m.entries[2].label == 1);
  CHECK(m.entries[2].source_id == "s2");
  fs::remove_all(root);
}
