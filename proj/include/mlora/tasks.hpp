// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <vector>

#include "mlora/model.hpp"

namespace mlora {

/// Task families of the synthetic mixture. `choice` has one-token targets,
/// `longgen` targets of at least eight tokens.
enum class TaskTag : std::uint8_t { choice, copy, arith, longgen };

inline constexpr std::array<TaskTag, 4> kAllTasks = {TaskTag::choice, TaskTag::copy,
                                                     TaskTag::arith, TaskTag::longgen};

std::string_view task_name(TaskTag t);
TaskTag task_from_name(std::string_view name);

/// Fixed 64-token vocabulary.
///   0 pad, 1 separator, 2..5 task markers, 6..7 unused,
///   8..63 the 56 data symbols. Digits are symbols 0..9, choice labels the
///   last four symbols.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kSep = 1;
inline constexpr int kTaskBase = 2;
inline constexpr int kSymbolBase = 8;
inline constexpr int kSymbolCount = 56;
inline constexpr std::size_t kSize = 64;

inline constexpr int symbol(int s) { return kSymbolBase + s; }
inline constexpr int digit(int d) { return symbol(d); }
inline constexpr int label(int k) { return symbol(kSymbolCount - 4 + k); }
inline constexpr int task_marker(TaskTag t) { return kTaskBase + static_cast<int>(t); }
}  // namespace vocab

struct Sample {
  std::vector<int> input_ids;
  std::vector<int> target_ids;
  TaskTag task = TaskTag::choice;

  std::size_t length() const { return input_ids.size() + target_ids.size(); }
  friend bool operator==(const Sample&, const Sample&) = default;
};

struct MixtureSpec {
  std::array<std::size_t, 4> counts = {0, 0, 0, 0};  // indexed by TaskTag
  std::uint64_t seed = 0;

  std::size_t& count(TaskTag t) { return counts[static_cast<std::size_t>(t)]; }
  std::size_t count(TaskTag t) const { return counts[static_cast<std::size_t>(t)]; }
  std::size_t total() const;
};

/// Number of distinct samples a task family can produce.
std::uint64_t task_capacity(TaskTag t);

/// Draws the requested number of distinct samples per task and shuffles the
/// union. Throws ArgumentError when a count exceeds the family's capacity.
std::vector<Sample> gen_mixture(const MixtureSpec& spec);

/// Two-digit (a + b) mod 100 as the arith family encodes it.
std::vector<int> arith_target(int a, int b);

/// Right-pads consecutive groups of `batch_size` samples into token batches.
/// Pad rows never carry loss and, being after every real token, are never
/// attended to by a real position under the causal mask.
std::vector<TokenBatch> batchify(const std::vector<Sample>& samples, std::size_t batch_size);

/// One sample per line: `<task> <input ids> | <target ids>`.
void write_samples(std::ostream& out, const std::vector<Sample>& samples);
std::vector<Sample> read_samples(std::istream& in);

}  // namespace mlora
