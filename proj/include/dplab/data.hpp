#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "dplab/error.hpp"
#include "dplab/rng.hpp"
#include "dplab/tensor.hpp"

namespace dplab {

enum class DatasetName { Mnist, FashionMnist, Cifar10 };

inline const char* to_string(DatasetName n) {
  switch (n) {
    case DatasetName::Mnist: return "mnist";
    case DatasetName::FashionMnist: return "fashion_mnist";
    case DatasetName::Cifar10: return "cifar10";
  }
  return "?";
}

/// Labeled image dataset with pixels scaled to [0,1].
struct Dataset {
  Tensor images;  // [N,C,H,W]
  std::vector<int> labels;
  DatasetName name = DatasetName::Mnist;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const {
    return size() == 0 ? 0 : images.numel() / size();
  }

  /// Gathers the given samples into a batch tensor.
  Tensor gather(const std::vector<std::size_t>& idx) const {
    std::vector<std::size_t> shape = images.shape();
    shape[0] = idx.size();
    Tensor out(shape);
    const std::size_t row = sample_numel();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= size()) {
        throw ValueError(msg("sample index ", idx[i], " out of range ", size()));
      }
      std::copy(images.data() + idx[i] * row, images.data() + (idx[i] + 1) * row,
                out.data() + i * row);
    }
    return out;
  }

  std::vector<int> gather_labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels.at(idx[i]);
    return out;
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    d.images = gather(idx);
    d.labels = gather_labels(idx);
    d.name = name;
    return d;
  }

  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return subset(idx);
  }
};

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(msg("cannot open ", path));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

/// Transparently gunzips gzip-compressed payloads (magic 1f 8b).
inline std::vector<std::uint8_t> maybe_gunzip(std::vector<std::uint8_t> bytes,
                                              const std::string& path) {
  if (bytes.size() < 2 || bytes[0] != 0x1f || bytes[1] != 0x8b) return bytes;
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) {
    throw FormatError(msg(path, ": cannot initialize gzip decoder"));
  }
  std::vector<std::uint8_t> out;
  out.reserve(bytes.size() * 4);
  std::vector<std::uint8_t> chunk(1 << 16);
  zs.next_in = bytes.data();
  zs.avail_in = static_cast<uInt>(bytes.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError(msg(path, ": corrupt gzip stream (zlib rc ", rc, ")"));
    }
    out.insert(out.end(), chunk.data(),
               chunk.data() + (chunk.size() - zs.avail_out));
  }
  inflateEnd(&zs);
  return out;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b,
                               std::size_t offset, const std::string& path) {
  if (offset + 4 > b.size()) {
    throw FormatError(msg(path, ": truncated at offset ", offset,
                          " (need 4 bytes, have ", b.size() - offset, ")"));
  }
  return (std::uint32_t(b[offset]) << 24) | (std::uint32_t(b[offset + 1]) << 16) |
         (std::uint32_t(b[offset + 2]) << 8) | std::uint32_t(b[offset + 3]);
}

}  // namespace detail

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;  // 2051
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;  // 2049

/// Loads a big-endian IDX image/label file pair (plain or gzipped).
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path,
                        DatasetName name = DatasetName::Mnist) {
  auto img = detail::maybe_gunzip(detail::read_file_bytes(images_path),
                                  images_path);
  auto lbl = detail::maybe_gunzip(detail::read_file_bytes(labels_path),
                                  labels_path);

  const std::uint32_t img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != kIdxImagesMagic) {
    throw FormatError(msg(images_path, ": offset 0: bad magic ", img_magic,
                          ", expected ", kIdxImagesMagic));
  }
  const std::uint32_t n = detail::read_be32(img, 4, images_path);
  const std::uint32_t h = detail::read_be32(img, 8, images_path);
  const std::uint32_t w = detail::read_be32(img, 12, images_path);
  const std::size_t expected = 16 + std::size_t(n) * h * w;
  if (img.size() != expected) {
    throw FormatError(msg(images_path, ": expected ", expected,
                          " bytes for ", n, " images of ", h, "x", w,
                          ", got ", img.size()));
  }

  const std::uint32_t lbl_magic = detail::read_be32(lbl, 0, labels_path);
  if (lbl_magic != kIdxLabelsMagic) {
    throw FormatError(msg(labels_path, ": offset 0: bad magic ", lbl_magic,
                          ", expected ", kIdxLabelsMagic));
  }
  const std::uint32_t nl = detail::read_be32(lbl, 4, labels_path);
  if (nl != n) {
    throw FormatError(msg(labels_path, ": has ", nl, " labels but ",
                          images_path, " has ", n, " images"));
  }
  if (lbl.size() != 8 + std::size_t(n)) {
    throw FormatError(msg(labels_path, ": expected ", 8 + std::size_t(n),
                          " bytes, got ", lbl.size()));
  }

  Dataset d;
  d.name = name;
  d.images = Tensor({n, 1, h, w});
  for (std::size_t i = 0; i < std::size_t(n) * h * w; ++i) {
    d.images[i] = img[16 + i] / 255.0;
  }
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = lbl[8 + i];
  return d;
}

/// Writes the dataset back to plain IDX files (inverse of load_idx).
inline void save_idx(const Dataset& d, const std::string& images_path,
                     const std::string& labels_path) {
  if (d.images.dim(1) != 1) {
    throw ValueError("save_idx expects single-channel images");
  }
  auto be32 = [](std::ofstream& out, std::uint32_t v) {
    const std::uint8_t b[4] = {std::uint8_t(v >> 24), std::uint8_t(v >> 16),
                               std::uint8_t(v >> 8), std::uint8_t(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw FormatError(msg("cannot open ", images_path, " for writing"));
  be32(img, kIdxImagesMagic);
  be32(img, static_cast<std::uint32_t>(d.size()));
  be32(img, static_cast<std::uint32_t>(d.images.dim(2)));
  be32(img, static_cast<std::uint32_t>(d.images.dim(3)));
  for (std::size_t i = 0; i < d.images.numel(); ++i) {
    img.put(static_cast<char>(
        static_cast<std::uint8_t>(std::lround(d.images[i] * 255.0))));
  }
  std::ofstream lbl(labels_path, std::ios::binary);
  if (!lbl) throw FormatError(msg("cannot open ", labels_path, " for writing"));
  be32(lbl, kIdxLabelsMagic);
  be32(lbl, static_cast<std::uint32_t>(d.size()));
  for (int y : d.labels) lbl.put(static_cast<char>(std::uint8_t(y)));
}

constexpr std::size_t kCifarRecordBytes = 3073;  // 1 label + 3*32*32 pixels

/// Loads and concatenates CIFAR-10 binary batch files.
inline Dataset load_cifar10(const std::vector<std::string>& batch_paths) {
  if (batch_paths.empty()) throw ValueError("no CIFAR-10 batch files given");
  std::vector<std::uint8_t> all;
  for (const auto& path : batch_paths) {
    auto bytes = detail::maybe_gunzip(detail::read_file_bytes(path), path);
    if (bytes.size() % kCifarRecordBytes != 0) {
      throw FormatError(msg(path, ": size ", bytes.size(),
                            " is not a multiple of the ", kCifarRecordBytes,
                            "-byte record"));
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  const std::size_t n = all.size() / kCifarRecordBytes;
  Dataset d;
  d.name = DatasetName::Cifar10;
  d.images = Tensor({n, 3, 32, 32});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = all.data() + i * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError(msg("record ", i, ": label byte ", int(rec[0]),
                            " outside [0,9]"));
    }
    d.labels[i] = rec[0];
    for (std::size_t j = 0; j < 3072; ++j) {
      d.images[i * 3072 + j] = rec[1 + j] / 255.0;
    }
  }
  return d;
}

/// Writes CIFAR-10 binary records (inverse of load_cifar10, single file).
inline void save_cifar10(const Dataset& d, const std::string& path) {
  if (d.images.dim(1) != 3 || d.images.dim(2) != 32 || d.images.dim(3) != 32) {
    throw ValueError(msg("save_cifar10 expects [N,3,32,32] images, got ",
                         d.images.shape_str()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(msg("cannot open ", path, " for writing"));
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.put(static_cast<char>(std::uint8_t(d.labels[i])));
    for (std::size_t j = 0; j < 3072; ++j) {
      out.put(static_cast<char>(static_cast<std::uint8_t>(
          std::lround(d.images[i * 3072 + j] * 255.0))));
    }
  }
}

/// One epoch of Poisson-sampled batches: ceil(1/q) batches, each including
/// every index independently with probability q. Batches may be empty.
inline std::vector<std::vector<std::size_t>> poisson_batches(std::size_t n,
                                                             double q,
                                                             Rng& rng) {
  if (q <= 0.0 || q > 1.0) {
    throw ValueError(msg("sampling rate q must be in (0,1], got ", q));
  }
  const std::size_t batches = static_cast<std::size_t>(std::ceil(1.0 / q));
  std::vector<std::vector<std::size_t>> out(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.uniform() < q) out[b].push_back(i);
    }
  }
  return out;
}

/// One epoch of shuffled batches: a uniform permutation in chunks of b,
/// covering every index exactly once.
inline std::vector<std::vector<std::size_t>> shuffle_batches(std::size_t n,
                                                             std::size_t b,
                                                             Rng& rng) {
  if (b < 1) throw ValueError("batch size must be >= 1");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    std::swap(perm[i - 1], perm[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += b) {
    out.emplace_back(perm.begin() + start,
                     perm.begin() + std::min(n, start + b));
  }
  return out;
}

}  // namespace dplab
