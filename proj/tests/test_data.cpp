#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "ofa/data.hpp"
#include "ofa/error.hpp"
#include "oracles.hpp"

using namespace ofa;
using namespace ofa::data;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("ofa_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Image solid(int w, int h, uint8_t r, uint8_t g, uint8_t b) {
  Image img;
  img.width = w;
  img.height = h;
  for (int i = 0; i < w * h; ++i) img.rgb.insert(img.rgb.end(), {r, g, b});
  return img;
}

std::set<int64_t> ids_of(const Dataset& d) { return {d.ids.begin(), d.ids.end()}; }

}  // namespace

TEST_CASE("synthetic load is deterministic and labels are in range") {
  DatasetSpec spec;
  const Splits a = load_dataset(spec), b = load_dataset(spec);
  CHECK(a.train.ids == b.train.ids);
  CHECK(a.val.ids == b.val.ids);
  CHECK(a.train.pixels == b.train.pixels);
  CHECK(a.test.pixels == b.test.pixels);
  CHECK(a.train.size() + a.val.size() == 400);
  CHECK(a.test.size() == 160);
  for (const Dataset* d : {&a.train, &a.val, &a.test}) {
    CHECK(d->resolution == 64);
    for (int l : d->labels) CHECK((l >= 0 && l < 8));
  }
  spec.seed = 8;
  CHECK(load_dataset(spec).train.pixels != a.train.pixels);
}

TEST_CASE("holdout split sizes, disjointness and id-keyed assignment") {
  const Dataset d = synthetic_images(10, 100, 16, 3);
  REQUIRE(d.size() == 1000);
  const auto [train, val] = split_holdout(d, 0.15, 42);
  CHECK(train.size() == 850);
  CHECK(val.size() == 150);
  const auto ti = ids_of(train), vi = ids_of(val);
  for (auto id : vi) CHECK(ti.count(id) == 0);
  CHECK(ti.size() + vi.size() == 1000);

  // Reordering the items does not change which ids are held out.
  std::vector<size_t> rev(d.size());
  for (size_t i = 0; i < rev.size(); ++i) rev[i] = rev.size() - 1 - i;
  const auto [train_r, val_r] = split_holdout(d.subset(rev), 0.15, 42);
  CHECK(ids_of(val_r) == vi);
  CHECK(ids_of(split_holdout(d, 0.15, 43).second) != vi);

  CHECK(split_holdout(d, 0.0, 1).second.size() == 0);
}

TEST_CASE("normalized training channels have near-zero mean") {
  const Splits s = load_dataset(DatasetSpec{});
  std::vector<size_t> all(s.train.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Tensor x = batch_tensor(s.train, all, s.norm);
  const size_t plane = 64 * 64;
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (size_t b = 0; b < all.size(); ++b)
      for (size_t k = 0; k < plane; ++k) sum += x.data()[(b * 3 + c) * plane + k];
    CHECK(std::fabs(sum / static_cast<double>(all.size() * plane)) < 0.05);
  }
}

TEST_CASE("resize_batch contracts") {
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({2, 3, 64, 64}, rng);
  const Tensor same = resize_batch(x, 64);
  CHECK(oracle::max_abs_diff(same.data(), x.data()) == 0.0);
  CHECK(resize_batch(x, 48).shape() == Shape{2, 3, 48, 48});
  CHECK(resize_batch(x, 56).shape() == Shape{2, 3, 56, 56});
  const Tensor c(Shape{1, 3, 64, 64}, 0.3712f);
  for (int r : {48, 56}) {
    const Tensor y = resize_batch(c, r);
    for (float v : y.data()) CHECK(v == doctest::Approx(0.3712f).epsilon(1e-6));
  }
  CHECK_THROWS_AS(resize_batch(x, 32), Error);
  CHECK_THROWS_AS(resize_batch(Tensor(Shape{3, 64, 64}, 0.0f), 48), DimensionError);
}

TEST_CASE("batching") {
  const auto b = make_batches(850, 200, 7, 0);
  REQUIRE(b.size() == 5);
  for (size_t i = 0; i < 4; ++i) CHECK(b[i].size() == 200);
  CHECK(b[4].size() == 50);
  CHECK(make_batches(850, 200, 7, 0) == b);
  CHECK(make_batches(850, 200, 7, 1) != b);
  CHECK(make_batches(850, 200, 8, 0) != b);
  std::vector<int> seen(850, 0);
  for (const auto& batch : b)
    for (size_t i : batch) ++seen[i];
  for (int s : seen) CHECK(s == 1);

  const auto seq = sequential_batches(5, 2);
  CHECK(seq == std::vector<std::vector<size_t>>{{0, 1}, {2, 3}, {4}});
}

TEST_CASE("augmentation is seeded and shape preserving") {
  const Dataset d = synthetic_images(2, 3, 64, 1);
  const std::vector<size_t> idx{0, 1, 2};
  std::mt19937_64 r1(5), r2(5);
  const Tensor a = augmented_batch(d, idx, Normalization{}, r1);
  const Tensor b = augmented_batch(d, idx, Normalization{}, r2);
  CHECK(a.shape() == Shape{3, 3, 64, 64});
  CHECK(oracle::max_abs_diff(a.data(), b.data()) == 0.0);
}

TEST_CASE("PPM round trip and planar conversion") {
  TempDir tmp("ppm");
  Image img;
  img.width = 3;
  img.height = 2;
  img.rgb = {0, 1, 2, 10, 20, 30, 255, 128, 0, 7, 7, 7, 100, 0, 50, 1, 2, 3};
  write_ppm(tmp.path / "a.ppm", img);
  const Image back = read_image(tmp.path / "a.ppm");
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.rgb == img.rgb);

  const auto planar = to_planar(solid(5, 9, 12, 34, 56), 8);
  REQUIRE(planar.size() == 3 * 64);
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 64; ++k) CHECK(planar[c * 64 + k] == std::array<uint8_t, 3>{12, 34, 56}[c]);
}

TEST_CASE("unreadable images report their path") {
  TempDir tmp("bad");
  const fs::path bad = tmp.path / "broken.ppm";
  std::ofstream(bad) << "P6\n4 4\n255\nxx";
  try {
    read_image(bad);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("broken.ppm") != std::string::npos);
  }
  const fs::path junk = tmp.path / "junk.bin";
  std::ofstream(junk) << "hello";
  CHECK_THROWS_AS(read_image(junk), FormatError);
  CHECK_THROWS_AS(read_image(tmp.path / "missing.ppm"), IoError);
}

TEST_CASE("Tiny-ImageNet directory layout") {
  TempDir tmp("tin");
  const fs::path root = tmp.path;
  const std::vector<std::string> wnids{"n001", "n002", "n003"};
  {
    std::ofstream w(root / "wnids.txt");
    for (const auto& s : wnids) w << s << "\n";
  }
  std::ofstream ann;
  fs::create_directories(root / "val" / "images");
  ann.open(root / "val" / "val_annotations.txt");
  for (size_t c = 0; c < wnids.size(); ++c) {
    const fs::path dir = root / "train" / wnids[c] / "images";
    fs::create_directories(dir);
    for (int i = 0; i < 4; ++i)
      write_ppm(dir / (wnids[c] + "_" + std::to_string(i) + ".ppm"),
                solid(8, 8, static_cast<uint8_t>(40 * c), 0, static_cast<uint8_t>(i)));
    for (int i = 0; i < 2; ++i) {
      const std::string f = "val_" + std::to_string(c) + std::to_string(i) + ".ppm";
      write_ppm(root / "val" / "images" / f, solid(8, 8, static_cast<uint8_t>(40 * c), 9, 9));
      ann << f << "\t" << wnids[c] << "\t0\t0\t8\t8\n";
    }
  }
  ann.close();

  const auto [train, test] = load_tiny_imagenet(root, 2, 3, 1, 16);
  CHECK(train.size() == 6);
  CHECK(test.size() == 2);
  CHECK(train.labels == std::vector<int>{0, 0, 0, 1, 1, 1});
  CHECK(train.resolution == 16);
  CHECK(train.image(3)[0] == 40);

  DatasetSpec spec;
  spec.kind = "tiny_imagenet";
  spec.root = root.string();
  spec.n_classes = 3;
  spec.train_per_class = 0;
  spec.test_per_class = 0;
  spec.val_fraction = 0.25;
  const Splits s = load_dataset(spec);
  CHECK(s.train.size() == 9);
  CHECK(s.val.size() == 3);
  CHECK(s.test.size() == 6);

  CHECK_THROWS_AS(load_tiny_imagenet(root, 4, 0, 0, 16), ConfigError);
  fs::remove(root / "val" / "val_annotations.txt");
  try {
    load_tiny_imagenet(root, 2, 0, 0, 16);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("val_annotations.txt") != std::string::npos);
  }
  CHECK_THROWS_AS(load_tiny_imagenet(root / "nowhere", 2, 0, 0, 16), IoError);
}

TEST_CASE("dataset spec JSON round trip") {
  DatasetSpec s;
  s.kind = "tiny_imagenet";
  s.root = "/data/tin";
  s.n_classes = 200;
  s.augment = true;
  nlohmann::json j = s;
  const DatasetSpec back = j.get<DatasetSpec>();
  CHECK(nlohmann::json(back) == j);
}
