#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include "l2sm/pairs.hpp"
#include "l2sm/rng.hpp"
#include "l2sm/tensor.hpp"

namespace l2sm {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

class IdxMagicError : public DataError {
 public:
  using DataError::DataError;
};
class IdxTruncatedError : public DataError {
 public:
  using DataError::DataError;
};
class IdxSizeError : public DataError {
 public:
  using DataError::DataError;
};

struct IdxHeader {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;

  std::size_t header_bytes() const { return 4 + 4 * dims.size(); }
  std::size_t body_bytes() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct LabeledDataset {
  Tensor images;                    // [N x 1 x H x W], values in [0, 1]
  std::vector<std::size_t> labels;  // N class ids
  std::string split;

  std::size_t size() const { return labels.size(); }
};

/// Reads a file, transparently inflating gzip content.
inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("file not found: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw DataError("read error (corrupt gzip?) in " + path.string());
  return out;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.string().c_str(), "wb");
    if (!f) throw DataError("cannot write " + path.string());
    const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    if (n != static_cast<int>(bytes.size())) throw DataError("short write to " + path.string());
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace detail {
inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}
inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}
}  // namespace detail

/// Parses and checks an unsigned-byte IDX header against the expected magic.
inline IdxHeader parse_idx_header(std::span<const std::uint8_t> bytes, std::uint32_t expected_magic,
                                  const std::string& origin) {
  if (bytes.size() < 4) {
    throw IdxTruncatedError(origin + ": truncated header (" + std::to_string(bytes.size()) + " bytes)");
  }
  IdxHeader h;
  h.magic = detail::read_be32(bytes, 0);
  if (h.magic != expected_magic) {
    char buf[96];
    std::snprintf(buf, sizeof buf, ": wrong magic 0x%08x (expected 0x%08x)", h.magic, expected_magic);
    throw IdxMagicError(origin + buf);
  }
  const std::size_t rank = h.magic & 0xff;
  if (bytes.size() < 4 + 4 * rank) throw IdxTruncatedError(origin + ": truncated header");
  for (std::size_t i = 0; i < rank; ++i) {
    h.dims.push_back(detail::read_be32(bytes, 4 + 4 * i));
    if (h.dims.back() == 0) throw IdxSizeError(origin + ": zero extent in header");
  }
  const std::size_t expected = h.header_bytes() + h.body_bytes();
  if (bytes.size() < expected) {
    throw IdxTruncatedError(origin + ": truncated body, expected " + std::to_string(expected) +
                            " bytes, got " + std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw IdxSizeError(origin + ": extents declare " + std::to_string(expected) + " bytes but file has " +
                       std::to_string(bytes.size()));
  }
  return h;
}

/// Images as [N x 1 x H x W], pixel bytes divided by 255.
inline Tensor load_idx_images(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const IdxHeader h = parse_idx_header(bytes, kIdxImageMagic, path.string());
  Tensor images({h.dims[0], 1, h.dims[1], h.dims[2]});
  const std::size_t off = h.header_bytes();
  for (std::size_t i = 0; i < images.size(); ++i) images[i] = bytes[off + i] / 255.0;
  return images;
}

inline std::vector<std::size_t> load_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const IdxHeader h = parse_idx_header(bytes, kIdxLabelMagic, path.string());
  return {bytes.begin() + static_cast<std::ptrdiff_t>(h.header_bytes()), bytes.end()};
}

inline LabeledDataset load_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                                   std::string split) {
  LabeledDataset ds{load_idx_images(images), load_idx_labels(labels), std::move(split)};
  if (ds.images.extent(0) != ds.labels.size()) {
    throw DataError("image count " + std::to_string(ds.images.extent(0)) + " != label count " +
                    std::to_string(ds.labels.size()));
  }
  return ds;
}

inline std::vector<std::uint8_t> encode_idx_images(const Tensor& images) {
  require_rank(images, 4, "encode_idx_images");
  if (images.extent(1) != 1) throw ShapeError("IDX images must have a single channel");
  std::vector<std::uint8_t> out;
  detail::put_be32(out, kIdxImageMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(images.extent(0)));
  detail::put_be32(out, static_cast<std::uint32_t>(images.extent(2)));
  detail::put_be32(out, static_cast<std::uint32_t>(images.extent(3)));
  for (double v : images.data()) {
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const std::size_t> labels) {
  std::vector<std::uint8_t> out;
  detail::put_be32(out, kIdxLabelMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (auto l : labels) {
    if (l > 255) throw InvalidArgument("IDX labels must fit in a byte");
    out.push_back(static_cast<std::uint8_t>(l));
  }
  return out;
}

inline void save_dataset(const LabeledDataset& ds, const std::filesystem::path& images,
                         const std::filesystem::path& labels) {
  write_file_bytes(images, encode_idx_images(ds.images));
  write_file_bytes(labels, encode_idx_labels(ds.labels));
}

/// Rows [begin, begin + count) of a dataset.
inline LabeledDataset slice(const LabeledDataset& ds, std::size_t begin, std::size_t count) {
  if (begin + count > ds.size() || count == 0) throw InvalidArgument("dataset slice out of range");
  const std::size_t stride = ds.images.size() / ds.size();
  Shape shape = ds.images.shape();
  shape[0] = count;
  std::vector<double> px(ds.images.values().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                         ds.images.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
  return {Tensor(shape, std::move(px)),
          {ds.labels.begin() + static_cast<std::ptrdiff_t>(begin),
           ds.labels.begin() + static_cast<std::ptrdiff_t>(begin + count)},
          ds.split};
}

// ---------------------------------------------------------------------------
// Verification pair sampling.

/**
 * Samples n_genuine distinct same-label pairs and n_impostor distinct
 * different-label pairs, each uniformly over its category and without
 * replacement within it. Genuine pairs come first in the output.
 */
inline PairList generate_pairs(std::span<const std::size_t> labels, std::size_t n_genuine,
                               std::size_t n_impostor, std::uint64_t seed) {
  if (n_genuine == 0 || n_impostor == 0) {
    throw InvalidArgument("generate_pairs: need at least one genuine and one impostor pair");
  }
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2) throw InvalidArgument("generate_pairs: need at least two classes");
  std::vector<const std::vector<std::size_t>*> classes;
  std::vector<std::uint64_t> weight;
  std::uint64_t genuine_total = 0;
  for (const auto& [label, members] : by_class) {
    if (members.size() < 2) continue;
    const std::uint64_t w = members.size() * (members.size() - 1) / 2;
    classes.push_back(&members);
    weight.push_back(w);
    genuine_total += w;
  }
  const std::uint64_t n = labels.size();
  const std::uint64_t impostor_total = (n * (n - 1)) / 2 - genuine_total;
  if (n_genuine > genuine_total) {
    throw InvalidArgument("generate_pairs: requested " + std::to_string(n_genuine) + " genuine pairs, only " +
                          std::to_string(genuine_total) + " exist");
  }
  if (n_impostor > impostor_total) {
    throw InvalidArgument("generate_pairs: requested " + std::to_string(n_impostor) + " impostor pairs, only " +
                          std::to_string(impostor_total) + " exist");
  }

  Rng rng(seed);
  PairList out;
  out.reserve(n_genuine + n_impostor);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  auto push = [&](std::size_t a, std::size_t b, bool same) {
    if (a > b) std::swap(a, b);
    if (!seen.insert({a, b}).second) return false;
    out.push_back({a, b, same});
    return true;
  };

  // Rejection sampling degrades when most of a category is requested; enumerate instead.
  auto enumerate_and_take = [&](bool same, std::size_t count) {
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if ((labels[i] == labels[j]) == same) all.emplace_back(i, j);
      }
    }
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t pick = k + static_cast<std::size_t>(rng.below(all.size() - k));
      std::swap(all[k], all[pick]);
      push(all[k].first, all[k].second, same);
    }
  };

  if (n_genuine * 2 > genuine_total) {
    enumerate_and_take(true, n_genuine);
  } else {
    while (out.size() < n_genuine) {
      std::uint64_t r = rng.below(genuine_total);
      std::size_t c = 0;
      while (r >= weight[c]) r -= weight[c++];
      const auto& members = *classes[c];
      const std::size_t i = static_cast<std::size_t>(rng.below(members.size()));
      std::size_t j = static_cast<std::size_t>(rng.below(members.size() - 1));
      if (j >= i) ++j;
      push(members[i], members[j], true);
    }
  }
  if (n_impostor * 2 > impostor_total) {
    enumerate_and_take(false, n_impostor);
  } else {
    while (out.size() < n_genuine + n_impostor) {
      const std::size_t i = static_cast<std::size_t>(rng.below(n));
      const std::size_t j = static_cast<std::size_t>(rng.below(n));
      if (labels[i] == labels[j]) continue;
      push(i, j, false);
    }
  }
  return out;
}

}  // namespace l2sm
