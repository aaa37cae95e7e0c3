// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stq/rng.hpp"

namespace stq {

struct Dataset {
  int64_t n = 0;
  int64_t channels = 0, height = 0, width = 0;
  std::vector<float> images;  // n * c * h * w, row-major
  std::vector<int> labels;    // class ids in [0, 9]
  std::string split;

  int64_t image_size() const { return channels * height * width; }
};

// MNIST IDX pair (big-endian headers, magic 0x00000803 / 0x00000801).
// Pixels are scaled to [0,1]. Expects train-images-idx3-ubyte,
// train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte.
std::pair<Dataset, Dataset> load_mnist(const std::string& dir);

// One CIFAR-10 binary batch (3073-byte records), pixels in [0,1], not yet
// normalized.
Dataset load_cifar_batch(const std::string& path);

// Channel normalization with the CIFAR-10 constants
// mean (0.4914, 0.4822, 0.4465), std (0.247, 0.243, 0.261).
void normalize_cifar(Dataset& ds);

// data_batch_1..5.bin + test_batch.bin, normalized; 50k/10k records.
std::pair<Dataset, Dataset> load_cifar10(const std::string& dir);

// Zero-pad by `pad`, crop at offset (oy, ox) in [0, 2*pad], optional
// horizontal flip. (oy, ox) = (pad, pad) without flip is the identity.
void augment_one(const float* src, float* dst, int64_t c, int64_t h, int64_t w, int pad, int oy,
                 int ox, bool flip);

// Training-time CIFAR augmentation: pad 4, random 32x32 crop, flip with
// probability 1/2. Deterministic given the RNG state.
void augment_batch(std::span<float> images, int64_t n, int64_t c, int64_t h, int64_t w, Rng& rng);

}  // namespace stq
