// SPDX-License-Identifier: Apache-2.0
#include "mlora/tasks.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>

#include "mlora/rng.hpp"

namespace mlora {

namespace {

constexpr std::array<std::string_view, 4> kTaskNames = {"choice", "copy", "arith", "longgen"};

// choice: six symbols from four 12-symbol categories; exactly three come from
// the labelled category and no other category appears three times.
constexpr int kChoiceLen = 6;
constexpr int kCategoryWidth = 12;
constexpr int kCategories = 4;

constexpr int kCopyMin = 3;
constexpr int kCopyMax = 6;

constexpr int kStepMax = 7;
constexpr int kLongMin = 8;
constexpr int kLongMax = 23;

int pick(Rng& rng, int n) { return static_cast<int>(rng.below(static_cast<std::uint64_t>(n))); }

Sample make_choice(Rng& rng) {
  const int label = pick(rng, kCategories);
  std::array<int, kChoiceLen> positions = {0, 1, 2, 3, 4, 5};
  shuffle(positions, rng);
  std::array<int, kChoiceLen> syms{};
  for (int i = 0; i < 3; ++i) syms[positions[i]] = label * kCategoryWidth + pick(rng, kCategoryWidth);
  std::array<int, 3> cats{};
  do {
    for (int i = 0; i < 3; ++i) {
      cats[i] = pick(rng, kCategories - 1);
      if (cats[i] >= label) ++cats[i];
    }
  } while (cats[0] == cats[1] && cats[1] == cats[2]);
  for (int i = 0; i < 3; ++i)
    syms[positions[3 + i]] = cats[i] * kCategoryWidth + pick(rng, kCategoryWidth);

  Sample s;
  s.task = TaskTag::choice;
  s.input_ids.push_back(vocab::task_marker(TaskTag::choice));
  for (int v : syms) s.input_ids.push_back(vocab::symbol(v));
  s.input_ids.push_back(vocab::kSep);
  s.target_ids = {vocab::label(label)};
  return s;
}

Sample make_copy(Rng& rng) {
  const int len = kCopyMin + pick(rng, kCopyMax - kCopyMin + 1);
  Sample s;
  s.task = TaskTag::copy;
  s.input_ids.push_back(vocab::task_marker(TaskTag::copy));
  for (int i = 0; i < len; ++i) s.target_ids.push_back(vocab::symbol(pick(rng, vocab::kSymbolCount)));
  s.input_ids.insert(s.input_ids.end(), s.target_ids.begin(), s.target_ids.end());
  s.input_ids.push_back(vocab::kSep);
  return s;
}

Sample make_arith(Rng& rng) {
  const int a = pick(rng, 100);
  const int b = pick(rng, 100);
  Sample s;
  s.task = TaskTag::arith;
  s.input_ids = {vocab::task_marker(TaskTag::arith), vocab::digit(a / 10), vocab::digit(a % 10),
                 vocab::digit(b / 10), vocab::digit(b % 10), vocab::kSep};
  s.target_ids = arith_target(a, b);
  return s;
}

// Arithmetic progression over the symbol ring: start, step and length are
// spelled out in the input.
Sample make_longgen(Rng& rng) {
  const int start = pick(rng, vocab::kSymbolCount);
  const int step = 1 + pick(rng, kStepMax);
  const int len = kLongMin + pick(rng, kLongMax - kLongMin + 1);
  Sample s;
  s.task = TaskTag::longgen;
  s.input_ids = {vocab::task_marker(TaskTag::longgen), vocab::symbol(start), vocab::symbol(step),
                 vocab::symbol(len), vocab::kSep};
  for (int i = 1; i <= len; ++i)
    s.target_ids.push_back(vocab::symbol((start + i * step) % vocab::kSymbolCount));
  return s;
}

Sample make_sample(TaskTag t, Rng& rng) {
  switch (t) {
    case TaskTag::choice: return make_choice(rng);
    case TaskTag::copy: return make_copy(rng);
    case TaskTag::arith: return make_arith(rng);
    case TaskTag::longgen: return make_longgen(rng);
  }
  throw ArgumentError("unknown task");
}

std::uint64_t ipow(std::uint64_t b, int e) {
  std::uint64_t r = 1;
  while (e-- > 0) r *= b;
  return r;
}

}  // namespace

std::string_view task_name(TaskTag t) { return kTaskNames[static_cast<std::size_t>(t)]; }

TaskTag task_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kTaskNames.size(); ++i)
    if (kTaskNames[i] == name) return static_cast<TaskTag>(i);
  throw ArgumentError("unknown task '" + std::string(name) + "'");
}

std::size_t MixtureSpec::total() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

std::uint64_t task_capacity(TaskTag t) {
  switch (t) {
    case TaskTag::choice: {
      const std::uint64_t w = kCategoryWidth;
      const std::uint64_t others = ipow(3 * w, 3) - 3 * ipow(w, 3);
      return kCategories * 20 * ipow(w, 3) * others;  // 20 = C(6,3)
    }
    case TaskTag::copy: {
      std::uint64_t n = 0;
      for (int k = kCopyMin; k <= kCopyMax; ++k) n += ipow(vocab::kSymbolCount, k);
      return n;
    }
    case TaskTag::arith: return 100 * 100;
    case TaskTag::longgen:
      return static_cast<std::uint64_t>(vocab::kSymbolCount) * kStepMax * (kLongMax - kLongMin + 1);
  }
  return 0;
}

std::vector<int> arith_target(int a, int b) {
  const int sum = (a + b) % 100;
  return {vocab::digit(sum / 10), vocab::digit(sum % 10)};
}

std::vector<Sample> gen_mixture(const MixtureSpec& spec) {
  for (TaskTag t : kAllTasks) {
    if (spec.count(t) > task_capacity(t)) {
      throw ArgumentError("requested " + std::to_string(spec.count(t)) + " " +
                          std::string(task_name(t)) + " samples but only " +
                          std::to_string(task_capacity(t)) + " distinct ones exist");
    }
  }
  Rng root(spec.seed);
  std::vector<Sample> out;
  out.reserve(spec.total());
  for (TaskTag t : kAllTasks) {
    Rng rng = root.fork(static_cast<std::uint64_t>(t) + 1);
    std::set<std::vector<int>> seen;
    for (std::size_t i = 0; i < spec.count(t);) {
      Sample s = make_sample(t, rng);
      if (!seen.insert(s.input_ids).second) continue;
      out.push_back(std::move(s));
      ++i;
    }
  }
  Rng order = root.fork(0xC0FFEE);
  shuffle(out, order);
  return out;
}

std::vector<TokenBatch> batchify(const std::vector<Sample>& samples, std::size_t batch_size) {
  if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  if (samples.empty()) throw ArgumentError("batchify: no samples");
  std::vector<TokenBatch> out;
  for (std::size_t first = 0; first < samples.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, samples.size() - first);
    std::size_t longest = 0;
    for (std::size_t i = 0; i < count; ++i)
      longest = std::max(longest, samples[first + i].length());
    TokenBatch b;
    b.batch = count;
    b.seq_len = longest - 1;
    b.tokens.assign(b.rows(), vocab::kPad);
    b.targets.assign(b.rows(), vocab::kPad);
    b.loss_mask.assign(b.rows(), 0);
    for (std::size_t i = 0; i < count; ++i) {
      const Sample& s = samples[first + i];
      if (s.target_ids.empty() || s.input_ids.empty()) {
        throw ArgumentError("batchify: sample without input or target");
      }
      std::vector<int> seq = s.input_ids;
      seq.insert(seq.end(), s.target_ids.begin(), s.target_ids.end());
      const std::size_t row0 = i * b.seq_len;
      for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
        b.tokens[row0 + t] = seq[t];
        b.targets[row0 + t] = seq[t + 1];
        b.loss_mask[row0 + t] = (t + 1 >= s.input_ids.size()) ? 1 : 0;
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

void write_samples(std::ostream& out, const std::vector<Sample>& samples) {
  for (const Sample& s : samples) {
    out << task_name(s.task);
    for (int id : s.input_ids) out << ' ' << id;
    out << " |";
    for (int id : s.target_ids) out << ' ' << id;
    out << '\n';
  }
}

std::vector<Sample> read_samples(std::istream& in) {
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    Sample s;
    s.task = task_from_name(word);
    bool in_target = false;
    while (ss >> word) {
      if (word == "|") {
        if (in_target) throw FormatError("line " + std::to_string(lineno) + ": second separator");
        in_target = true;
        continue;
      }
      int id = 0;
      try {
        std::size_t used = 0;
        id = std::stoi(word, &used);
        if (used != word.size()) throw std::invalid_argument(word);
      } catch (const std::exception&) {
        throw FormatError("line " + std::to_string(lineno) + ": bad token '" + word + "'");
      }
      (in_target ? s.target_ids : s.input_ids).push_back(id);
    }
    if (!in_target) throw FormatError("line " + std::to_string(lineno) + ": missing '|'");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mlora
