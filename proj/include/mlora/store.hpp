// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mlora/model.hpp"

namespace mlora {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

/// Named dense tensor as stored on disk. Exactly one of f32/f64 holds the
/// row-major payload, matching dtype.
struct Tensor {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint32_t> dims;
  std::vector<float> f32;
  std::vector<double> f64;

  std::size_t numel() const;
  /// Rank-2 view widened to double; rank 1 becomes a single row.
  MatrixD to_matrix() const;

  template <typename T>
  static Tensor from_matrix(std::string name, const Matrix<T>& m);

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named tensors plus string metadata.
///
/// On disk: "MLRA", u32 version, u32 tensor count, then per tensor a u16
/// name length and name, u8 dtype, u8 rank, u32 dims and the payload, all
/// little-endian, closed by a CRC32 of every preceding byte. Metadata rides
/// along as empty double tensors named "@meta:<key>=<value>", written before
/// the real tensors in key order.
struct Checkpoint {
  std::vector<Tensor> tensors;
  std::map<std::string, std::string> metadata;

  const Tensor* find(std::string_view name) const;
  /// Throws ArgumentError on a duplicate or reserved name.
  void add(Tensor t);
  const std::string& meta(const std::string& key) const;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on bad magic, version, CRC, truncation or duplicate
/// names.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes to a sibling temp file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// ΔW = W_tuned − W_base for one named site. Throws ArgumentError when the
/// site is missing or the shapes differ.
MatrixD delta_from_checkpoints(const Checkpoint& base, const Checkpoint& tuned,
                               const std::string& site);

/// Every parameter of the model under its own name, plus the configuration
/// and adapter layout as metadata. `extra` metadata is merged in.
template <typename T>
Checkpoint to_checkpoint(const Model<T>& model,
                         const std::map<std::string, std::string>& extra = {});

/// Rebuilds the model a to_checkpoint call described. Throws FormatError when
/// metadata is missing, a tensor is absent or mis-shaped, or extra tensors
/// remain.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ckpt);

/// Flat `key = value` text, `#` starts a comment. Throws FormatError on a line
/// without '=' or an empty key, and on a repeated key.
std::map<std::string, std::string> parse_kv(std::istream& in);
std::map<std::string, std::string> load_kv(const std::filesystem::path& path);

/// Exact decimal text for a double (round-trips through std::stod).
std::string exact_real(double v);

}  // namespace mlora
