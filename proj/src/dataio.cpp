// SPDX-License-Identifier: Apache-2.0
#include "stq/dataio.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace stq {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  in.seekg(0, std::ios::end);
  std::streamoff size = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw std::runtime_error("failed reading " + path);
  return bytes;
}

uint32_t be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

std::string hex32(uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxImages {
  int64_t n, rows, cols;
  const uint8_t* pixels;
};

IdxImages parse_idx_images(const std::vector<uint8_t>& bytes, const std::string& path) {
  if (bytes.size() < 16) throw std::runtime_error(path + ": truncated IDX header");
  uint32_t magic = be32(bytes.data());
  if (magic != kIdxImagesMagic)
    throw std::runtime_error(path + ": bad magic " + hex32(magic) + ", expected " + hex32(kIdxImagesMagic));
  int64_t n = be32(bytes.data() + 4);
  int64_t rows = be32(bytes.data() + 8);
  int64_t cols = be32(bytes.data() + 12);
  if (rows != 28 || cols != 28)
    throw std::runtime_error(path + ": expected 28x28 images, got " + std::to_string(rows) + "x" +
                             std::to_string(cols));
  if (static_cast<int64_t>(bytes.size()) != 16 + n * rows * cols)
    throw std::runtime_error(path + ": truncated, " + std::to_string(bytes.size()) + " bytes for " +
                             std::to_string(n) + " images");
  return {n, rows, cols, bytes.data() + 16};
}

std::vector<int> parse_idx_labels(const std::vector<uint8_t>& bytes, const std::string& path) {
  if (bytes.size() < 8) throw std::runtime_error(path + ": truncated IDX header");
  uint32_t magic = be32(bytes.data());
  if (magic != kIdxLabelsMagic)
    throw std::runtime_error(path + ": bad magic " + hex32(magic) + ", expected " + hex32(kIdxLabelsMagic));
  int64_t n = be32(bytes.data() + 4);
  if (static_cast<int64_t>(bytes.size()) != 8 + n)
    throw std::runtime_error(path + ": truncated, " + std::to_string(bytes.size()) + " bytes for " +
                             std::to_string(n) + " labels");
  std::vector<int> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    uint8_t v = bytes[static_cast<size_t>(8 + i)];
    if (v > 9) throw std::runtime_error(path + ": label " + std::to_string(v) + " outside [0,9]");
    labels[static_cast<size_t>(i)] = v;
  }
  return labels;
}

Dataset load_mnist_split(const std::string& images_path, const std::string& labels_path,
                         const std::string& split) {
  std::vector<uint8_t> ib = read_file(images_path);
  std::vector<uint8_t> lb = read_file(labels_path);
  IdxImages img = parse_idx_images(ib, images_path);
  std::vector<int> labels = parse_idx_labels(lb, labels_path);
  if (img.n != static_cast<int64_t>(labels.size()))
    throw std::runtime_error("count mismatch: " + std::to_string(img.n) + " images vs " +
                             std::to_string(labels.size()) + " labels in " + split + " split");
  Dataset ds;
  ds.n = img.n;
  ds.channels = 1;
  ds.height = img.rows;
  ds.width = img.cols;
  ds.split = split;
  ds.labels = std::move(labels);
  ds.images.resize(static_cast<size_t>(ds.n * ds.image_size()));
  for (size_t i = 0; i < ds.images.size(); ++i) ds.images[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return ds;
}

}  // namespace

std::pair<Dataset, Dataset> load_mnist(const std::string& dir) {
  Dataset train = load_mnist_split(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte", "train");
  Dataset test = load_mnist_split(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte", "test");
  return {std::move(train), std::move(test)};
}

Dataset load_cifar_batch(const std::string& path) {
  constexpr int64_t kRecord = 3073;  // label byte + 3*32*32 pixels
  std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() % kRecord != 0)
    throw std::runtime_error(path + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                             std::to_string(kRecord));
  Dataset ds;
  ds.n = static_cast<int64_t>(bytes.size()) / kRecord;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.labels.resize(static_cast<size_t>(ds.n));
  ds.images.resize(static_cast<size_t>(ds.n * ds.image_size()));
  for (int64_t i = 0; i < ds.n; ++i) {
    const uint8_t* rec = bytes.data() + i * kRecord;
    if (rec[0] > 9)
      throw std::runtime_error(path + ": label " + std::to_string(rec[0]) + " outside [0,9] in record " +
                               std::to_string(i));
    ds.labels[static_cast<size_t>(i)] = rec[0];
    float* out = ds.images.data() + i * ds.image_size();
    for (int64_t p = 0; p < 3072; ++p) out[p] = static_cast<float>(rec[1 + p]) / 255.0f;
  }
  return ds;
}

void normalize_cifar(Dataset& ds) {
  static constexpr float kMean[3] = {0.4914f, 0.4822f, 0.4465f};
  static constexpr float kStd[3] = {0.247f, 0.243f, 0.261f};
  int64_t plane = ds.height * ds.width;
  for (int64_t i = 0; i < ds.n; ++i)
    for (int64_t c = 0; c < 3; ++c) {
      float* p = ds.images.data() + (i * 3 + c) * plane;
      for (int64_t j = 0; j < plane; ++j) p[j] = (p[j] - kMean[c]) / kStd[c];
    }
}

std::pair<Dataset, Dataset> load_cifar10(const std::string& dir) {
  Dataset train;
  for (int b = 1; b <= 5; ++b) {
    Dataset part = load_cifar_batch(dir + "/data_batch_" + std::to_string(b) + ".bin");
    if (train.n == 0) {
      train = std::move(part);
    } else {
      train.images.insert(train.images.end(), part.images.begin(), part.images.end());
      train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
      train.n += part.n;
    }
  }
  train.split = "train";
  Dataset test = load_cifar_batch(dir + "/test_batch.bin");
  test.split = "test";
  if (train.n != 50000 || test.n != 10000)
    throw std::runtime_error("cifar10: wrong record count, got " + std::to_string(train.n) + "/" +
                             std::to_string(test.n) + " train/test records, expected 50000/10000");
  normalize_cifar(train);
  normalize_cifar(test);
  return {std::move(train), std::move(test)};
}

void augment_one(const float* src, float* dst, int64_t c, int64_t h, int64_t w, int pad, int oy,
                 int ox, bool flip) {
  for (int64_t ch = 0; ch < c; ++ch) {
    const float* sp = src + ch * h * w;
    float* dp = dst + ch * h * w;
    for (int64_t y = 0; y < h; ++y) {
      int64_t sy = y + oy - pad;
      for (int64_t x = 0; x < w; ++x) {
        int64_t px = flip ? (w - 1 - x) : x;
        int64_t sx = px + ox - pad;
        dp[y * w + x] =
            (sy < 0 || sy >= h || sx < 0 || sx >= w) ? 0.0f : sp[sy * w + sx];
      }
    }
  }
}

void augment_batch(std::span<float> images, int64_t n, int64_t c, int64_t h, int64_t w, Rng& rng) {
  constexpr int kPad = 4;
  std::vector<float> tmp(static_cast<size_t>(c * h * w));
  for (int64_t i = 0; i < n; ++i) {
    int oy = static_cast<int>(rng.below(2 * kPad + 1));
    int ox = static_cast<int>(rng.below(2 * kPad + 1));
    bool flip = rng.below(2) == 1;
    float* img = images.data() + i * c * h * w;
    augment_one(img, tmp.data(), c, h, w, kPad, oy, ox, flip);
    std::copy(tmp.begin(), tmp.end(), img);
  }
}

}  // namespace stq
