#include "entro/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace entro {

namespace {

constexpr int kRecordBytes = 1 + kImageChannels * kImagePixels;

float sdf_box(double dx, double dy, double hx, double hy) {
  const double qx = std::fabs(dx) - hx, qy = std::fabs(dy) - hy;
  const double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
  return static_cast<float>(outside + std::min(std::max(qx, qy), 0.0));
}

float shape_sdf(int label, double dx, double dy, double s) {
  switch (label) {
    case 0:  // disk
      return static_cast<float>(std::hypot(dx, dy) - s);
    case 1:  // square
      return sdf_box(dx, dy, s * 0.85, s * 0.85);
    case 2:  // triangle, apex up
      return static_cast<float>(
          std::max(0.866 * std::fabs(dx) + 0.5 * dy, -dy - s * 0.5) - s * 0.5);
    case 3:  // ring
      return static_cast<float>(std::fabs(std::hypot(dx, dy) - s * 0.75) - s * 0.3);
    case 4:  // plus
      return std::min(sdf_box(dx, dy, s, s * 0.3), sdf_box(dx, dy, s * 0.3, s));
    case 5:  // diamond
      return static_cast<float>((std::fabs(dx) + std::fabs(dy)) * 0.7071 - s * 0.9);
    case 6:  // horizontal bar
      return sdf_box(dx, dy, s, s * 0.32);
    case 7:  // vertical bar
      return sdf_box(dx, dy, s * 0.32, s);
    case 8: {  // X: a plus rotated 45 degrees
      const double u = (dx + dy) * 0.7071, v = (dx - dy) * 0.7071;
      return std::min(sdf_box(u, v, s * 1.1, s * 0.28), sdf_box(u, v, s * 0.28, s * 1.1));
    }
    case 9:  // finely striped square
      return sdf_box(dx, dy, s * 0.85, s * 0.85);
    default:
      throw ValueError("shape_sdf: label out of range");
  }
}

double luminance(const double rgb[3]) { return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]; }

// Bilinear lookup into a g x g grid spanning the image, cell centers at the
// grid points.
double field_at(const double* grid, int g, double x, double y) {
  const double fx = std::clamp(x / (kImageDim - 1.0), 0.0, 1.0) * (g - 1);
  const double fy = std::clamp(y / (kImageDim - 1.0), 0.0, 1.0) * (g - 1);
  const int x0 = std::min(static_cast<int>(fx), g - 2), y0 = std::min(static_cast<int>(fy), g - 2);
  const double tx = fx - x0, ty = fy - y0;
  const double a = grid[y0 * g + x0], b = grid[y0 * g + x0 + 1];
  const double c = grid[(y0 + 1) * g + x0], d = grid[(y0 + 1) * g + x0 + 1];
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

struct PlacedShape {
  int label = 0;
  double cx = 0, cy = 0, s = 0, rot = 0, opacity = 1;
  double color[3] = {0, 0, 0};

  double coverage(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    const double c = std::cos(rot), sn = std::sin(rot);
    const float d = shape_sdf(label, c * dx + sn * dy, -sn * dx + c * dy, s);
    return std::clamp(0.5 - static_cast<double>(d), 0.0, 1.0) * opacity;
  }
};

void render_shape_image(float* img, int label, Rng& rng) {
  // background: per-channel base + linear gradient + low-frequency color
  // blotches + noise whose amplitude varies patch to patch, so some regions
  // are nearly clean and others rough, the way natural photos mix sky and
  // grass
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.18, 0.82);
    gx[c] = rng.uniform(-0.3, 0.3);
    gy[c] = rng.uniform(-0.3, 0.3);
  }
  double blob[3][25];
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 25; ++k) blob[c][k] = rng.uniform(-0.14, 0.14);
  double amp[16];
  for (int k = 0; k < 16; ++k) {
    const double u = rng.uniform();
    amp[k] = 0.01 + 0.13 * u * u;  // skew toward smooth patches
  }

  // the labeled shape: jittered placement, scale, tilt, and strength
  PlacedShape main;
  main.label = label;
  main.cx = rng.uniform(9.0, 23.0);
  main.cy = rng.uniform(9.0, 23.0);
  main.s = rng.uniform(4.5, 11.0);
  main.rot = rng.uniform(-0.26, 0.26);
  main.opacity = rng.uniform(0.6, 1.0);

  const double bg_lum = luminance(base);
  for (int attempt = 0;; ++attempt) {
    for (int c = 0; c < 3; ++c) main.color[c] = rng.uniform(0.0, 1.0);
    if (std::fabs(luminance(main.color) - bg_lum) >= 0.12) break;
    if (attempt >= 19) {
      const double v = bg_lum > 0.5 ? 0.05 : 0.95;
      for (int c = 0; c < 3; ++c) main.color[c] = v;
      break;
    }
  }
  // stripe partner color for the textured class: complementary, so stripes
  // carry strong single-pixel structure
  double color2[3];
  for (int c = 0; c < 3; ++c) color2[c] = 1.0 - main.color[c];

  // clutter: up to two small faint shapes of arbitrary class, drawn under
  // the labeled one
  PlacedShape extra[2];
  const int n_extra = rng.range_int(0, 2);
  for (int e = 0; e < n_extra; ++e) {
    extra[e].label = rng.range_int(0, kNumClasses - 1);
    extra[e].cx = rng.uniform(3.0, 29.0);
    extra[e].cy = rng.uniform(3.0, 29.0);
    extra[e].s = rng.uniform(1.5, 3.5);
    extra[e].rot = rng.uniform(-0.5, 0.5);
    extra[e].opacity = rng.uniform(0.45, 0.85);
    for (int c = 0; c < 3; ++c) extra[e].color[c] = rng.uniform(0.0, 1.0);
  }

  for (int y = 0; y < kImageDim; ++y)
    for (int x = 0; x < kImageDim; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double xn = x / 31.0 - 0.5, yn = y / 31.0 - 0.5;
      const double noise_amp = field_at(amp, 4, px, py);
      const double cover = main.coverage(px, py);
      const bool stripe = label == 9 && (x & 1) == 1;
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + gx[c] * xn + gy[c] * yn + field_at(blob[c], 5, px, py) +
                   noise_amp * rng.uniform(-1.0, 1.0);
        for (int e = 0; e < n_extra; ++e) {
          const double ec = extra[e].coverage(px, py);
          v += ec * (extra[e].color[c] - v);
        }
        const double fg = stripe ? color2[c] : main.color[c];
        v += cover * (fg - v);
        img[c * kImagePixels + y * kImageDim + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
}

}  // namespace

Dataset load_cifar_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const int64_t bytes = in.tellg();
  in.seekg(0);
  if (bytes == 0 || bytes % kRecordBytes != 0)
    throw FormatError("'" + path + "' is not a whole number of 3073-byte records");
  const int count = static_cast<int>(bytes / kRecordBytes);

  Dataset ds;
  ds.labels.resize(static_cast<size_t>(count));
  ds.images.resize(static_cast<size_t>(count) * kImageFloats);
  std::vector<uint8_t> record(kRecordBytes);
  for (int i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(record.data()), kRecordBytes);
    if (!in) throw FormatError("short read in '" + path + "'");
    if (record[0] >= kNumClasses)
      throw FormatError("'" + path + "' record " + std::to_string(i) + " has label " +
                        std::to_string(record[0]));
    ds.labels[static_cast<size_t>(i)] = record[0];
    float* dst = ds.images.data() + static_cast<int64_t>(i) * kImageFloats;
    for (int64_t j = 0; j < kImageFloats; ++j) dst[j] = record[static_cast<size_t>(j) + 1] / 255.0f;
  }
  return ds;
}

namespace {

Dataset concat(std::vector<Dataset> parts) {
  Dataset out;
  for (auto& p : parts) {
    out.images.insert(out.images.end(), p.images.begin(), p.images.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

}  // namespace

Dataset load_cifar_train(const std::string& dir) {
  std::vector<Dataset> parts;
  for (int i = 1; i <= 5; ++i)
    parts.push_back(load_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin"));
  return concat(std::move(parts));
}

Dataset load_cifar_test(const std::string& dir) { return load_cifar_file(dir + "/test_batch.bin"); }

void write_cifar_file(const std::string& path, const Dataset& data) {
  if (data.images.size() != static_cast<size_t>(data.count()) * kImageFloats)
    throw ShapeError("write_cifar_file: image buffer does not match label count");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  std::vector<uint8_t> record(kRecordBytes);
  for (int i = 0; i < data.count(); ++i) {
    record[0] = static_cast<uint8_t>(data.labels[static_cast<size_t>(i)]);
    const float* src = data.image(i);
    for (int64_t j = 0; j < kImageFloats; ++j)
      record[static_cast<size_t>(j) + 1] =
          static_cast<uint8_t>(std::clamp(std::lround(src[j] * 255.0f), 0l, 255l));
    out.write(reinterpret_cast<const char*>(record.data()), kRecordBytes);
  }
  if (!out) throw FormatError("short write on '" + path + "'");
}

Dataset make_shape_dataset(int count, uint64_t seed) {
  if (count < 1) throw ValueError("make_shape_dataset: count must be positive");
  Dataset ds;
  ds.labels.resize(static_cast<size_t>(count));
  ds.images.resize(static_cast<size_t>(count) * kImageFloats);
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    const int label = i % kNumClasses;
    ds.labels[static_cast<size_t>(i)] = label;
    render_shape_image(ds.images.data() + static_cast<int64_t>(i) * kImageFloats, label, rng);
  }
  return ds;
}

void generate_dataset_dir(const std::string& dir, uint64_t seed, int train_count, int test_count) {
  if (train_count < 1 || test_count < 1)
    throw ValueError("generate_dataset_dir: counts must be positive");
  std::filesystem::create_directories(dir);
  const Dataset train = make_shape_dataset(train_count, derive_seed(seed, 0x7121));
  const Dataset test = make_shape_dataset(test_count, derive_seed(seed, 0x7e57));
  const int per_file = (train_count + 4) / 5;
  for (int f = 0; f < 5; ++f) {
    const int lo = f * per_file, hi = std::min(train_count, (f + 1) * per_file);
    Dataset chunk;
    chunk.labels.assign(train.labels.begin() + lo, train.labels.begin() + hi);
    chunk.images.assign(train.images.begin() + static_cast<int64_t>(lo) * kImageFloats,
                        train.images.begin() + static_cast<int64_t>(hi) * kImageFloats);
    write_cifar_file(dir + "/data_batch_" + std::to_string(f + 1) + ".bin", chunk);
  }
  write_cifar_file(dir + "/test_batch.bin", test);
}

}  // namespace entro
