// SPDX-License-Identifier: Apache-2.0
#include "mlora/store.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <set>
#include <sstream>
#include <unistd.h>

#include "mlora/attach.hpp"

namespace mlora {

namespace {

constexpr std::string_view kMagic = "MLRA";
constexpr std::string_view kMetaPrefix = "@meta:";

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError("checkpoint truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

void write_tensor(Writer& w, const Tensor& t) {
  if (t.name.empty() || t.name.size() > 0xFFFF) {
    throw ArgumentError("tensor name length must lie in [1, 65535]");
  }
  if (t.dims.size() > 0xFF) throw ArgumentError("tensor '" + t.name + "': rank above 255");
  const std::size_t n = t.numel();
  if ((t.dtype == DType::f32 ? t.f32.size() : t.f64.size()) != n ||
      (t.dtype == DType::f32 ? !t.f64.empty() : !t.f32.empty())) {
    throw ArgumentError("tensor '" + t.name + "': payload does not match dims/dtype");
  }
  w.u16(static_cast<std::uint16_t>(t.name.size()));
  w.raw(t.name);
  w.u8(static_cast<std::uint8_t>(t.dtype));
  w.u8(static_cast<std::uint8_t>(t.dims.size()));
  for (std::uint32_t d : t.dims) w.u32(d);
  if (t.dtype == DType::f32) {
    for (float v : t.f32) w.u32(std::bit_cast<std::uint32_t>(v));
  } else {
    for (double v : t.f64) w.u64(std::bit_cast<std::uint64_t>(v));
  }
}

Tensor read_tensor(Reader& r) {
  Tensor t;
  t.name = r.str(r.u16());
  const std::uint8_t dtype = r.u8();
  if (dtype > 1) throw FormatError("tensor '" + t.name + "': unknown dtype tag");
  t.dtype = static_cast<DType>(dtype);
  const std::uint8_t rank = r.u8();
  std::uint64_t n = 1;
  for (std::uint8_t k = 0; k < rank; ++k) {
    t.dims.push_back(r.u32());
    n *= t.dims.back();
  }
  const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
  if (n > r.remaining() / width) throw FormatError("tensor '" + t.name + "' overruns the file");
  if (t.dtype == DType::f32) {
    t.f32.resize(n);
    for (float& v : t.f32) v = std::bit_cast<float>(r.u32());
  } else {
    t.f64.resize(n);
    for (double& v : t.f64) v = std::bit_cast<double>(r.u64());
  }
  return t;
}

std::size_t to_size(const std::string& key, const std::string& text) {
  std::size_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    throw FormatError("metadata " + key + " = '" + text + "' is not a count");
  }
  return v;
}

double to_real(const std::string& key, const std::string& text) {
  double v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    throw FormatError("metadata " + key + " = '" + text + "' is not a number");
  }
  return v;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (std::uint32_t d : dims) n *= d;
  return n;
}

MatrixD Tensor::to_matrix() const {
  std::size_t rows = 1, cols = 1;
  if (dims.size() == 1) {
    cols = dims[0];
  } else if (dims.size() == 2) {
    rows = dims[0];
    cols = dims[1];
  } else {
    throw ArgumentError("tensor '" + name + "' has rank " + std::to_string(dims.size()) +
                        ", not a matrix");
  }
  MatrixD m(rows, cols);
  auto out = m.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = dtype == DType::f32 ? static_cast<double>(f32[i]) : f64[i];
  return m;
}

template <typename T>
Tensor Tensor::from_matrix(std::string name, const Matrix<T>& m) {
  Tensor t;
  t.name = std::move(name);
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  const auto src = m.data();
  if constexpr (std::is_same_v<T, float>) {
    t.dtype = DType::f32;
    t.f32.assign(src.begin(), src.end());
  } else {
    t.dtype = DType::f64;
    t.f64.assign(src.begin(), src.end());
  }
  return t;
}

template Tensor Tensor::from_matrix<float>(std::string, const Matrix<float>&);
template Tensor Tensor::from_matrix<double>(std::string, const Matrix<double>&);

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const Tensor& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void Checkpoint::add(Tensor t) {
  if (std::string_view(t.name).starts_with(kMetaPrefix)) {
    throw ArgumentError("tensor name '" + t.name + "' uses the reserved metadata prefix");
  }
  if (find(t.name)) throw ArgumentError("duplicate tensor name '" + t.name + "'");
  tensors.push_back(std::move(t));
}

const std::string& Checkpoint::meta(const std::string& key) const {
  const auto it = metadata.find(key);
  if (it == metadata.end()) throw FormatError("checkpoint lacks metadata '" + key + "'");
  return it->second;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  const std::size_t count = ckpt.metadata.size() + ckpt.tensors.size();
  if (count > 0xFFFFFFFFu) throw ArgumentError("too many tensors");
  w.u32(static_cast<std::uint32_t>(count));
  for (const auto& [key, value] : ckpt.metadata) {
    if (key.empty() || key.find('=') != std::string::npos) {
      throw ArgumentError("metadata key '" + key + "' must be non-empty and free of '='");
    }
    Tensor t;
    t.name = std::string(kMetaPrefix) + key + "=" + value;
    t.dims = {0};
    write_tensor(w, t);
  }
  std::set<std::string_view> names;
  for (const Tensor& t : ckpt.tensors) {
    if (!names.insert(t.name).second) throw ArgumentError("duplicate tensor name '" + t.name + "'");
    write_tensor(w, t);
  }
  const std::uint32_t crc = crc_of(w.bytes());
  w.u32(crc);
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() + 12) throw FormatError("checkpoint truncated");
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  if (crc_of(body) != tail.u32()) throw FormatError("checkpoint CRC mismatch");

  Reader r(body);
  if (r.str(kMagic.size()) != kMagic) throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  Checkpoint ckpt;
  std::set<std::string> names;
  for (std::uint32_t k = 0; k < count; ++k) {
    Tensor t = read_tensor(r);
    if (!names.insert(t.name).second) throw FormatError("duplicate tensor name '" + t.name + "'");
    if (std::string_view(t.name).starts_with(kMetaPrefix)) {
      const std::string entry = t.name.substr(kMetaPrefix.size());
      const auto eq = entry.find('=');
      if (eq == std::string::npos || eq == 0 || t.numel() != 0) {
        throw FormatError("malformed metadata record '" + t.name + "'");
      }
      ckpt.metadata.emplace(entry.substr(0, eq), entry.substr(eq + 1));
    } else {
      ckpt.tensors.push_back(std::move(t));
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the last tensor");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::vector<std::uint8_t> bytes = encode_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw FormatError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw FormatError("cannot move checkpoint into " + path.string() + ": " + ec.message());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

MatrixD delta_from_checkpoints(const Checkpoint& base, const Checkpoint& tuned,
                               const std::string& site) {
  const Tensor* b = base.find(site);
  const Tensor* t = tuned.find(site);
  if (!b || !t) {
    throw ArgumentError("site '" + site + "' missing from the " +
                        std::string(!b ? "base" : "tuned") + " checkpoint");
  }
  if (b->dims != t->dims) throw ArgumentError("site '" + site + "' differs in shape");
  return materialize_delta(b->to_matrix(), t->to_matrix());
}

template <typename T>
Checkpoint to_checkpoint(const Model<T>& model, const std::map<std::string, std::string>& extra) {
  const ModelConfig& c = model.config();
  Checkpoint ck;
  ck.metadata = {{"kind", "model"},
                 {"model.d_model", std::to_string(c.d_model)},
                 {"model.n_heads", std::to_string(c.n_heads)},
                 {"model.d_mid", std::to_string(c.d_mid)},
                 {"model.n_layers", std::to_string(c.n_layers)},
                 {"model.vocab", std::to_string(c.vocab)},
                 {"model.max_seq", std::to_string(c.max_seq)}};
  const char* state = model.adapter_state() == AdapterState::attached ? "attached"
                      : model.adapter_state() == AdapterState::merged ? "merged"
                                                                      : "none";
  ck.metadata["adapter.state"] = state;
  ck.metadata["adapter.method"] = std::string(method_name(model.method()));
  if (model.adapter_state() == AdapterState::attached) {
    std::string targets;
    std::size_t rank = 0, n = 1;
    double alpha = 0.0;
    for (Projection p : kAllProjections) {
      const AdapterSlot<T>& s = model.slot(0, p);
      if (std::holds_alternative<std::monostate>(s)) continue;
      if (!targets.empty()) targets += ",";
      targets += projection_name(p);
      if (const auto* l = std::get_if<LoraAdapter<T>>(&s)) {
        rank = l->rank;
        alpha = l->alpha;
      } else {
        const auto& m = std::get<MultiLoraAdapter<T>>(s);
        rank = m.rank;
        n = m.n();
      }
    }
    ck.metadata["adapter.targets"] = targets;
    ck.metadata["adapter.rank"] = std::to_string(rank);
    if (model.method() == Method::lora) ck.metadata["adapter.alpha"] = exact_real(alpha);
    if (model.method() == Method::multilora) ck.metadata["adapter.n"] = std::to_string(n);
  }
  for (const auto& [k, v] : extra) ck.metadata[k] = v;
  for (const Param<T>* p : model.parameters()) ck.add(Tensor::from_matrix(p->name, p->value));
  return ck;
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
  if (ck.metadata.count("kind") && ck.meta("kind") != "model") {
    throw FormatError("checkpoint holds '" + ck.meta("kind") + "', not a model");
  }
  ModelConfig cfg;
  auto dim = [&](const char* key) { return to_size(key, ck.meta(key)); };
  cfg.d_model = dim("model.d_model");
  cfg.n_heads = dim("model.n_heads");
  cfg.d_mid = dim("model.d_mid");
  cfg.n_layers = dim("model.n_layers");
  cfg.vocab = dim("model.vocab");
  cfg.max_seq = dim("model.max_seq");
  try {
    cfg.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("checkpoint model config: ") + e.what());
  }

  Rng rng(0);
  Model<T> model(cfg, rng);
  const std::string& state = ck.meta("adapter.state");
  if (state == "attached") {
    std::vector<Projection> targets;
    Method method{};
    try {
      targets = parse_targets(ck.meta("adapter.targets"));
      method = method_from_name(ck.meta("adapter.method"));
    } catch (const ArgumentError& e) {
      throw FormatError(std::string("checkpoint adapter layout: ") + e.what());
    }
    const std::size_t rank = dim("adapter.rank");
    if (method == Method::lora) {
      attach_lora(model, targets, rank, to_real("adapter.alpha", ck.meta("adapter.alpha")), rng);
    } else if (method == Method::multilora) {
      attach_multilora(model, targets, dim("adapter.n"), rank, rng);
    } else {
      throw FormatError("checkpoint claims attached adapters but method ft");
    }
  } else if (state == "merged") {
    model.set_adapter_state(AdapterState::merged);
  } else if (state != "none") {
    throw FormatError("unknown adapter state '" + state + "'");
  }

  std::size_t used = 0;
  for (Param<T>* p : model.parameters()) {
    const Tensor* t = ck.find(p->name);
    if (!t) throw FormatError("checkpoint lacks tensor '" + p->name + "'");
    const MatrixD m = t->to_matrix();
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw FormatError("tensor '" + p->name + "' is " + shape_str(m) + ", model expects " +
                        shape_str(p->value));
    }
    p->value = m.template cast<T>();
    ++used;
  }
  if (used != ck.tensors.size()) {
    throw FormatError("checkpoint has " + std::to_string(ck.tensors.size() - used) +
                      " tensors the model does not use");
  }
  return model;
}

template Checkpoint to_checkpoint<float>(const Model<float>&,
                                         const std::map<std::string, std::string>&);
template Checkpoint to_checkpoint<double>(const Model<double>&,
                                          const std::map<std::string, std::string>&);
template Model<float> model_from_checkpoint<float>(const Checkpoint&);
template Model<double> model_from_checkpoint<double>(const Checkpoint&);

std::map<std::string, std::string> parse_kv(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string key = eq == std::string::npos ? "" : trim(std::string_view(body).substr(0, eq));
    if (key.empty()) {
      throw FormatError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    if (!out.emplace(key, trim(std::string_view(body).substr(eq + 1))).second) {
      throw FormatError("line " + std::to_string(lineno) + ": key '" + key + "' repeated");
    }
  }
  return out;
}

std::map<std::string, std::string> load_kv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    return parse_kv(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string exact_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace mlora
