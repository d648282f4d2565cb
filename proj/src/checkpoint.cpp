#include "qarv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace qarv::nn {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(std::uint8_t(v));
  out.push_back(std::uint8_t(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw std::runtime_error("checkpoint: truncated file");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    auto s = take(2);
    return std::uint16_t(s[0] | (s[1] << 8));
  }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(s[i]) << (8 * i);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
  }
  throw std::runtime_error("checkpoint: unknown dtype tag");
}

}  // namespace

std::size_t CheckpointEntry::count() const {
  std::size_t n = 1;
  for (auto e : extents) n *= e;
  return n;
}

std::vector<double> CheckpointEntry::as_doubles() const {
  std::vector<double> out(count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (dtype) {
      case DType::kF32: {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t(raw[4 * i + b]) << (8 * b);
        out[i] = std::bit_cast<float>(bits);
        break;
      }
      case DType::kF64: {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= std::uint64_t(raw[8 * i + b]) << (8 * b);
        out[i] = std::bit_cast<double>(bits);
        break;
      }
      case DType::kU8: out[i] = raw[i]; break;
    }
  }
  return out;
}

std::string CheckpointEntry::as_string() const {
  if (dtype != DType::kU8) throw std::runtime_error("checkpoint: entry '" + name + "' is not text");
  return std::string(raw.begin(), raw.end());
}

template <typename T>
void Checkpoint::put(const std::string& name, const Shape& shape, std::span<const T> values) {
  CheckpointEntry e;
  e.name = name;
  for (auto s : shape) e.extents.push_back(std::uint32_t(s));
  if (e.count() != values.size()) throw std::invalid_argument("checkpoint: shape/value mismatch");
  if constexpr (std::is_same_v<T, double>) {
    e.dtype = DType::kF64;
    for (double v : values) put_u64(e.raw, std::bit_cast<std::uint64_t>(v));
  } else {
    e.dtype = DType::kF32;
    for (auto v : values) put_u32(e.raw, std::bit_cast<std::uint32_t>(float(v)));
  }
  put_entry(std::move(e));
}

void Checkpoint::put_string(const std::string& name, const std::string& text) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = DType::kU8;
  e.extents = {std::uint32_t(text.size())};
  e.raw.assign(text.begin(), text.end());
  put_entry(std::move(e));
}

void Checkpoint::put_entry(CheckpointEntry entry) {
  if (entry.name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: name too long");
  if (entry.extents.size() > 0xFF) throw std::invalid_argument("checkpoint: rank too large");
  for (auto& e : entries_) {
    if (e.name == entry.name) {
      e = std::move(entry);
      return;
    }
  }
  entries_.push_back(std::move(entry));
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  if (auto* e = find(name)) return *e;
  throw std::runtime_error("checkpoint: missing entry '" + name + "'");
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u16(out, kCheckpointVersion);
  put_u32(out, std::uint32_t(entries_.size()));
  for (const auto& e : entries_) {
    put_u16(out, std::uint16_t(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(std::uint8_t(e.dtype));
    out.push_back(std::uint8_t(e.extents.size()));
    for (auto x : e.extents) put_u32(out, x);
    out.insert(out.end(), e.raw.begin(), e.raw.end());
  }
  return out;
}

Checkpoint Checkpoint::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(8);
  if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.u16();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.u32();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    auto name = r.take(r.u16());
    e.name.assign(name.begin(), name.end());
    e.dtype = DType(r.u8());
    const auto size = dtype_size(e.dtype);
    const auto rank = r.u8();
    for (int k = 0; k < rank; ++k) e.extents.push_back(r.u32());
    auto raw = r.take(e.count() * size);
    e.raw.assign(raw.begin(), raw.end());
    ckpt.entries_.push_back(std::move(e));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse(bytes);
}

template <typename T>
void put_parameters(Checkpoint& ckpt, const ParameterStore<T>& store, const EmaState<T>* ema) {
  const auto& params = store.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<float> v(params[k].value.values().begin(), params[k].value.values().end());
    ckpt.put<float>(params[k].name, params[k].value.shape(), v);
    if (ema) {
      std::vector<float> s(ema->shadow[k].begin(), ema->shadow[k].end());
      ckpt.put<float>(params[k].name + "/ema", params[k].value.shape(), s);
    }
  }
}

template <typename T>
void load_parameters(const Checkpoint& ckpt, ParameterStore<T>& store, bool use_ema) {
  for (auto& p : store.params()) {
    const CheckpointEntry* e = use_ema ? ckpt.find(p.name + "/ema") : nullptr;
    if (!e) e = ckpt.find(p.name);
    if (!e) throw std::runtime_error("checkpoint: missing parameter '" + p.name + "'");
    Shape shape(e->extents.begin(), e->extents.end());
    if (shape != p.value.shape())
      throw std::runtime_error("checkpoint: parameter '" + p.name + "' has shape " +
                               shape_str(shape) + ", model expects " + shape_str(p.value.shape()));
    auto vals = e->as_doubles();
    auto dst = p.value.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) dst[i] = T(vals[i]);
  }
}

template void Checkpoint::put<float>(const std::string&, const Shape&, std::span<const float>);
template void Checkpoint::put<double>(const std::string&, const Shape&, std::span<const double>);
template void put_parameters(Checkpoint&, const ParameterStore<float>&, const EmaState<float>*);
template void put_parameters(Checkpoint&, const ParameterStore<double>&, const EmaState<double>*);
template void load_parameters(const Checkpoint&, ParameterStore<float>&, bool);
template void load_parameters(const Checkpoint&, ParameterStore<double>&, bool);

}  // namespace qarv::nn
