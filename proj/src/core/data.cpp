#include "ofa/data.hpp"

#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "ofa/arch.hpp"
#include "ofa/error.hpp"

namespace ofa::data {

namespace fs = std::filesystem;

void Dataset::push(const uint8_t* planar, int label, int64_t id) {
  pixels.insert(pixels.end(), planar, planar + image_bytes());
  labels.push_back(label);
  ids.push_back(id);
}

Dataset Dataset::subset(std::span<const size_t> idx) const {
  Dataset out;
  out.n_classes = n_classes;
  out.resolution = resolution;
  out.pixels.reserve(idx.size() * image_bytes());
  for (size_t i : idx) out.push(image(i), labels[i], ids[i]);
  return out;
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"kind", s.kind},
       {"root", s.root},
       {"n_classes", s.n_classes},
       {"train_per_class", s.train_per_class},
       {"test_per_class", s.test_per_class},
       {"resolution", s.resolution},
       {"seed", s.seed},
       {"val_fraction", s.val_fraction},
       {"augment", s.augment}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.kind = j.value("kind", d.kind);
  s.root = j.value("root", d.root);
  s.n_classes = j.value("n_classes", d.n_classes);
  s.train_per_class = j.value("train_per_class", d.train_per_class);
  s.test_per_class = j.value("test_per_class", d.test_per_class);
  s.resolution = j.value("resolution", d.resolution);
  s.seed = j.value("seed", d.seed);
  s.val_fraction = j.value("val_fraction", d.val_fraction);
  s.augment = j.value("augment", d.augment);
  if (s.kind != "synthetic" && s.kind != "tiny_imagenet")
    throw ConfigError("dataset.kind must be synthetic or tiny_imagenet, got '" + s.kind + "'");
  if (s.n_classes < 2) throw ConfigError("dataset.n_classes must be >= 2");
  if (s.resolution != 64) throw ConfigError("dataset.resolution must be 64");
  if (s.val_fraction < 0.0 || s.val_fraction >= 1.0) throw ConfigError("dataset.val_fraction must be in [0, 1)");
  if (s.kind == "synthetic" && (s.train_per_class < 1 || s.test_per_class < 1))
    throw ConfigError("synthetic dataset needs train_per_class and test_per_class >= 1");
}

void to_json(nlohmann::json& j, const Normalization& n) { j = {{"mean", n.mean}, {"std", n.std}}; }

void from_json(const nlohmann::json& j, Normalization& n) {
  n.mean = j.at("mean").get<std::array<float, 3>>();
  n.std = j.at("std").get<std::array<float, 3>>();
}

// ---------------------------------------------------------------------------
// Synthetic generator

Dataset synthetic_images(int n_classes, int per_class, int resolution, uint64_t seed) {
  require(n_classes >= 2 && per_class >= 1 && resolution >= 8, "synthetic_images: invalid parameters");
  Dataset d;
  d.n_classes = n_classes;
  d.resolution = resolution;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const float r = static_cast<float>(resolution);
  const float radius = 0.25f * r, sigma = 0.14f * r;
  std::vector<uint8_t> img(static_cast<size_t>(3) * resolution * resolution);
  int64_t id = 0;
  for (int i = 0; i < per_class; ++i)
    for (int c = 0; c < n_classes; ++c) {
      const float angle = 2.0f * static_cast<float>(M_PI) * static_cast<float>(c) / static_cast<float>(n_classes);
      // Colour wheel: one hue per class, full saturation.
      std::array<float, 3> colour;
      for (int ch = 0; ch < 3; ++ch)
        colour[ch] = 0.5f + 0.5f * std::cos(angle - 2.0f * static_cast<float>(M_PI) * static_cast<float>(ch) / 3.0f);
      const float cx = 0.5f * r + radius * std::cos(angle) + 0.06f * r * noise(rng);
      const float cy = 0.5f * r + radius * std::sin(angle) + 0.06f * r * noise(rng);
      const float s = sigma * (0.8f + 0.4f * unit(rng));
      const float gain = 0.8f + 0.2f * unit(rng);
      const float bg = 0.3f + 0.2f * unit(rng);
      for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x) {
          const float dx = static_cast<float>(x) + 0.5f - cx, dy = static_cast<float>(y) + 0.5f - cy;
          const float blob = std::exp(-(dx * dx + dy * dy) / (2.0f * s * s));
          for (int ch = 0; ch < 3; ++ch) {
            float v = bg * (1.0f - blob) + gain * colour[ch] * blob + 0.08f * noise(rng);
            v = std::clamp(v, 0.0f, 1.0f);
            img[(static_cast<size_t>(ch) * resolution + y) * resolution + x] = static_cast<uint8_t>(std::lround(v * 255.0f));
          }
        }
      d.push(img.data(), c, id++);
    }
  return d;
}

// ---------------------------------------------------------------------------
// Image decoding

namespace {

std::string read_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open image");
  const std::string magic = read_token(in);
  if (magic != "P6" && magic != "P3") throw FormatError(path.string() + ": not a PPM image (magic '" + magic + "')");
  Image img;
  try {
    img.width = std::stoi(read_token(in));
    img.height = std::stoi(read_token(in));
    const int maxval = std::stoi(read_token(in));
    if (maxval != 255) throw FormatError(path.string() + ": only 8-bit PPM is supported");
  } catch (const std::invalid_argument&) {
    throw FormatError(path.string() + ": malformed PPM header");
  }
  if (img.width <= 0 || img.height <= 0) throw FormatError(path.string() + ": bad PPM dimensions");
  img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
  if (magic == "P6") {
    in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) throw FormatError(path.string() + ": truncated PPM");
  } else {
    for (auto& v : img.rgb) {
      const std::string t = read_token(in);
      if (t.empty()) throw FormatError(path.string() + ": truncated PPM");
      v = static_cast<uint8_t>(std::stoi(t));
    }
  }
  return img;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_fail(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Image read_jpeg(const fs::path& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError(path.string(), "cannot open image");
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  Image img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    throw FormatError(path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = static_cast<int>(cinfo.output_width);
  img.height = static_cast<int>(cinfo.output_height);
  img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.rgb.data() + static_cast<size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(f);
  return img;
}

// Source coordinate and weight for output pixel o when mapping n -> m.
inline void bilinear_tap(int o, int n, int m, int& i0, int& i1, float& t) {
  const float src = (static_cast<float>(o) + 0.5f) * static_cast<float>(n) / static_cast<float>(m) - 0.5f;
  const float c = std::clamp(src, 0.0f, static_cast<float>(n - 1));
  i0 = static_cast<int>(std::floor(c));
  i1 = std::min(i0 + 1, n - 1);
  t = c - static_cast<float>(i0);
}

inline float lerp(float a, float b, float t) { return a + (b - a) * t; }

}  // namespace

Image read_image(const fs::path& path) {
  if (!fs::exists(path)) throw IoError(path.string(), "image file not found");
  std::ifstream probe(path, std::ios::binary);
  unsigned char head[2] = {0, 0};
  probe.read(reinterpret_cast<char*>(head), 2);
  if (head[0] == 0xFF && head[1] == 0xD8) return read_jpeg(path);
  if (head[0] == 'P') return read_ppm(path);
  throw FormatError(path.string() + ": unsupported image format (expected JPEG or PPM)");
}

void write_ppm(const fs::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot write image");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

std::vector<uint8_t> to_planar(const Image& img, int r) {
  std::vector<uint8_t> out(static_cast<size_t>(3) * r * r);
  for (int y = 0; y < r; ++y) {
    int y0, y1;
    float ty;
    bilinear_tap(y, img.height, r, y0, y1, ty);
    for (int x = 0; x < r; ++x) {
      int x0, x1;
      float tx;
      bilinear_tap(x, img.width, r, x0, x1, tx);
      for (int c = 0; c < 3; ++c) {
        auto px = [&](int yy, int xx) {
          return static_cast<float>(img.rgb[(static_cast<size_t>(yy) * img.width + xx) * 3 + c]);
        };
        const float v = lerp(lerp(px(y0, x0), px(y0, x1), tx), lerp(px(y1, x0), px(y1, x1), tx), ty);
        out[(static_cast<size_t>(c) * r + y) * r + x] = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tiny-ImageNet

namespace {

std::vector<fs::path> sorted_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) throw IoError(dir.string(), "directory not found");
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> load_tiny_imagenet(const fs::path& root, int n_classes, int train_per_class,
                                               int test_per_class, int resolution) {
  const fs::path wnids_path = root / "wnids.txt";
  std::ifstream wn(wnids_path);
  if (!wn) throw IoError(wnids_path.string(), "missing class list");
  std::vector<std::string> wnids;
  for (std::string line; std::getline(wn, line);) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    if (!line.empty()) wnids.push_back(line);
  }
  if (static_cast<int>(wnids.size()) < n_classes)
    throw ConfigError(wnids_path.string() + " lists " + std::to_string(wnids.size()) + " classes, " +
                      std::to_string(n_classes) + " requested");
  wnids.resize(static_cast<size_t>(n_classes));
  std::map<std::string, int> label_of;
  for (size_t i = 0; i < wnids.size(); ++i) label_of[wnids[i]] = static_cast<int>(i);

  Dataset train, test;
  train.n_classes = test.n_classes = n_classes;
  train.resolution = test.resolution = resolution;
  int64_t id = 0;
  for (int c = 0; c < n_classes; ++c) {
    const auto files = sorted_files(root / "train" / wnids[static_cast<size_t>(c)] / "images");
    int taken = 0;
    for (const auto& f : files) {
      if (train_per_class > 0 && taken >= train_per_class) break;
      train.push(to_planar(read_image(f), resolution).data(), c, id++);
      ++taken;
    }
  }

  const fs::path ann = root / "val" / "val_annotations.txt";
  std::ifstream in(ann);
  if (!in) throw IoError(ann.string(), "missing validation annotations");
  std::map<int, int> taken;
  int64_t tid = 0;
  for (std::string line; std::getline(in, line);) {
    std::istringstream ss(line);
    std::string file, wnid;
    if (!(ss >> file >> wnid)) continue;
    auto it = label_of.find(wnid);
    if (it == label_of.end()) continue;
    if (test_per_class > 0 && taken[it->second] >= test_per_class) continue;
    test.push(to_planar(read_image(root / "val" / "images" / file), resolution).data(), it->second, tid++);
    ++taken[it->second];
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------

std::pair<Dataset, Dataset> split_holdout(const Dataset& d, double fraction, uint64_t seed) {
  const size_t n = d.size();
  const auto n_out = static_cast<size_t>(std::llround(fraction * static_cast<double>(n)));
  auto key = [&](size_t i) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<uint64_t>(d.ids[i]) + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), size_t{0});
  std::sort(perm.begin(), perm.end(), [&](size_t a, size_t b) {
    const uint64_t ka = key(a), kb = key(b);
    return ka != kb ? ka < kb : d.ids[a] < d.ids[b];
  });
  std::vector<size_t> keep(perm.begin() + static_cast<std::ptrdiff_t>(n_out), perm.end());
  std::vector<size_t> out(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_out));
  std::sort(keep.begin(), keep.end());
  std::sort(out.begin(), out.end());
  return {d.subset(keep), d.subset(out)};
}

Normalization compute_normalization(const Dataset& d) {
  Normalization n;
  if (d.size() == 0) return n;
  const size_t plane = static_cast<size_t>(d.resolution) * d.resolution;
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, ss = 0.0;
    for (size_t i = 0; i < d.size(); ++i) {
      const uint8_t* p = d.image(i) + c * plane;
      for (size_t k = 0; k < plane; ++k) {
        const double v = p[k] / 255.0;
        s += v;
        ss += v * v;
      }
    }
    const double cnt = static_cast<double>(plane * d.size());
    const double m = s / cnt;
    n.mean[c] = static_cast<float>(m);
    n.std[c] = static_cast<float>(std::sqrt(std::max(ss / cnt - m * m, 1e-12)));
  }
  return n;
}

Tensor batch_tensor(const Dataset& d, std::span<const size_t> idx, const Normalization& norm) {
  const int r = d.resolution;
  const size_t plane = static_cast<size_t>(r) * r;
  std::vector<float> out(idx.size() * 3 * plane);
  for (size_t b = 0; b < idx.size(); ++b) {
    const uint8_t* src = d.image(idx[b]);
    for (int c = 0; c < 3; ++c) {
      const float m = norm.mean[c], inv = 1.0f / norm.std[c];
      float* dst = out.data() + (b * 3 + c) * plane;
      for (size_t k = 0; k < plane; ++k) dst[k] = (src[c * plane + k] / 255.0f - m) * inv;
    }
  }
  return Tensor(Shape{static_cast<int64_t>(idx.size()), 3, r, r}, std::move(out));
}

Tensor augmented_batch(const Dataset& d, std::span<const size_t> idx, const Normalization& norm,
                       std::mt19937_64& rng) {
  Tensor x = batch_tensor(d, idx, norm);
  const int r = d.resolution, pad = 4;
  const size_t plane = static_cast<size_t>(r) * r;
  std::uniform_int_distribution<int> shift(-pad, pad);
  std::uniform_int_distribution<int> coin(0, 1);
  std::vector<float> tmp(plane);
  auto data = x.data();
  for (size_t b = 0; b < idx.size(); ++b) {
    const int sx = shift(rng), sy = shift(rng);
    const bool flip = coin(rng) == 1;
    for (int c = 0; c < 3; ++c) {
      float* p = data.data() + (b * 3 + c) * plane;
      // Zero in normalized space is the channel mean.
      for (int y = 0; y < r; ++y)
        for (int xx = 0; xx < r; ++xx) {
          const int sy2 = y + sy, sx2 = (flip ? r - 1 - xx : xx) + sx;
          tmp[static_cast<size_t>(y) * r + xx] =
              (sy2 >= 0 && sy2 < r && sx2 >= 0 && sx2 < r) ? p[static_cast<size_t>(sy2) * r + sx2] : 0.0f;
        }
      std::copy(tmp.begin(), tmp.end(), p);
    }
  }
  return x;
}

std::vector<int> batch_labels(const Dataset& d, std::span<const size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(d.labels[i]);
  return out;
}

std::vector<std::vector<size_t>> make_batches(size_t n, int batch_size, uint64_t seed, int64_t epoch) {
  require(batch_size >= 1, "make_batches: batch_size must be >= 1");
  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), size_t{0});
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                    static_cast<uint32_t>(static_cast<uint64_t>(epoch) >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < n; i += static_cast<size_t>(batch_size))
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<size_t>(batch_size))));
  return out;
}

std::vector<std::vector<size_t>> sequential_batches(size_t n, int batch_size) {
  require(batch_size >= 1, "sequential_batches: batch_size must be >= 1");
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < n; i += static_cast<size_t>(batch_size)) {
    std::vector<size_t> b;
    for (size_t k = i; k < std::min(n, i + static_cast<size_t>(batch_size)); ++k) b.push_back(k);
    out.push_back(std::move(b));
  }
  return out;
}

Tensor resize_batch(const Tensor& x, int r) {
  if (std::find(std::begin(kResolutions), std::end(kResolutions), r) == std::end(kResolutions))
    throw Error(ErrorKind::invalid_argument, "resize_batch: resolution " + std::to_string(r) + " not in {48,56,64}");
  if (x.rank() != 4) throw DimensionError("resize_batch: expected (B,C,H,W), got " + shape_str(x.shape()));
  const int h = static_cast<int>(x.dim(2)), w = static_cast<int>(x.dim(3));
  if (h == r && w == r) return x;
  const int64_t bc = x.dim(0) * x.dim(1);
  std::vector<float> out(static_cast<size_t>(bc) * r * r);
  std::vector<int> x0(r), x1(r);
  std::vector<float> tx(r);
  for (int o = 0; o < r; ++o) bilinear_tap(o, w, r, x0[o], x1[o], tx[o]);
  auto in = x.data();
  for (int64_t p = 0; p < bc; ++p) {
    const float* src = in.data() + p * h * w;
    float* dst = out.data() + p * r * r;
    for (int y = 0; y < r; ++y) {
      int y0, y1;
      float ty;
      bilinear_tap(y, h, r, y0, y1, ty);
      const float* r0 = src + static_cast<int64_t>(y0) * w;
      const float* r1 = src + static_cast<int64_t>(y1) * w;
      for (int xx = 0; xx < r; ++xx)
        dst[y * r + xx] = lerp(lerp(r0[x0[xx]], r0[x1[xx]], tx[xx]), lerp(r1[x0[xx]], r1[x1[xx]], tx[xx]), ty);
    }
  }
  return Tensor(Shape{x.dim(0), x.dim(1), r, r}, std::move(out));
}

// ---------------------------------------------------------------------------

Splits load_dataset(const DatasetSpec& spec) {
  Dataset train_full, test;
  if (spec.kind == "synthetic") {
    train_full = synthetic_images(spec.n_classes, spec.train_per_class, spec.resolution, spec.seed);
    test = synthetic_images(spec.n_classes, spec.test_per_class, spec.resolution, spec.seed ^ 0x5bd1e995u);
  } else if (spec.kind == "tiny_imagenet") {
    if (spec.root.empty()) throw ConfigError("dataset.root is required for tiny_imagenet");
    std::tie(train_full, test) =
        load_tiny_imagenet(spec.root, spec.n_classes, spec.train_per_class, spec.test_per_class, spec.resolution);
  } else {
    throw ConfigError("unknown dataset kind '" + spec.kind + "'");
  }
  Splits s;
  std::tie(s.train, s.val) = split_holdout(train_full, spec.val_fraction, spec.seed);
  s.test = std::move(test);
  s.norm = compute_normalization(s.train);
  return s;
}

}  // namespace ofa::data
