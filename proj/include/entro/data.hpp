#pragma once

// Image datasets in CIFAR-10 binary layout: records of one label byte
// followed by 3072 bytes of planar RGB (three 32x32 row-major planes).
// Pixels live in [0,1] once loaded.

#include <cstdint>
#include <string>
#include <vector>

#include "entro/common.hpp"

namespace entro {

constexpr int kImageDim = 32;
constexpr int kImageChannels = 3;
constexpr int kImagePixels = kImageDim * kImageDim;
constexpr int64_t kImageFloats = static_cast<int64_t>(kImageChannels) * kImagePixels;
constexpr int kNumClasses = 10;

struct Dataset {
  std::vector<float> images;  // count * 3 * 32 * 32, NCHW planar
  std::vector<int> labels;

  int count() const { return static_cast<int>(labels.size()); }
  const float* image(int i) const { return images.data() + static_cast<int64_t>(i) * kImageFloats; }
};

Dataset load_cifar_file(const std::string& path);
// data_batch_1.bin .. data_batch_5.bin
Dataset load_cifar_train(const std::string& dir);
// test_batch.bin
Dataset load_cifar_test(const std::string& dir);
void write_cifar_file(const std::string& path, const Dataset& data);

// Synthetic corpus: ten anti-aliased shape classes over textured backgrounds.
// Class balance is exact up to rounding and sample i depends only on
// (seed, i), not on count.
Dataset make_shape_dataset(int count, uint64_t seed);

// Writes a full train/test split in CIFAR-10 layout into dir.
void generate_dataset_dir(const std::string& dir, uint64_t seed, int train_count = 50000,
                          int test_count = 10000);

}  // namespace entro
