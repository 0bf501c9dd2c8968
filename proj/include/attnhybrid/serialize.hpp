#pragma once
// Model files. Layout (all integers little-endian):
//   magic "AHYBMODL" | u32 version | u32 len + recipe text | u64 count |
//   count x { u32 len + name | u32 rank | u64 extents[rank] | f64 values }
// Loading validates the whole file before any tensor is touched.

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "attnhybrid/backbones.hpp"

namespace attnhybrid {

inline constexpr char model_magic[8] = {'A', 'H', 'Y', 'B', 'M', 'O', 'D', 'L'};
inline constexpr std::uint32_t model_format_version = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void text(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::string origin)
      : bytes_(bytes), origin_(std::move(origin)) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string text(std::size_t limit) {
    const std::uint32_t n = u32();
    if (n > limit) fail("string field of " + std::to_string(n) + " bytes exceeds limit");
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void raw(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error(origin_ + ": " + what + " (offset " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("truncated file");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<char>& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Parameters and buffers (BatchNorm running statistics included).
inline std::vector<char> serialize_model(const ModelGraph& model) {
  detail::ByteWriter w;
  w.raw(model_magic, sizeof model_magic);
  w.u32(model_format_version);
  w.text(recipe_to_text(model.recipe));
  const auto tensors = model.named_tensors();
  w.u64(tensors.size());
  for (const auto& nt : tensors) {
    w.text(nt.name);
    w.u32(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto e : nt.tensor.shape()) w.u64(e);
    for (double v : nt.tensor.data()) w.f64(v);
  }
  return w.bytes();
}

inline ModelGraph deserialize_model(const std::vector<char>& bytes, const std::string& origin = "<model>") {
  detail::ByteReader r(bytes, origin);
  char magic[sizeof model_magic];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, model_magic, sizeof magic) != 0) r.fail("not a model file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != model_format_version) {
    r.fail("unsupported format version " + std::to_string(version) + " (expected " +
           std::to_string(model_format_version) + ")");
  }
  ArchitectureRecipe recipe;
  try {
    recipe = recipe_from_config(KeyValueConfig::parse_text(r.text(1 << 16)));
  } catch (const std::invalid_argument& e) {
    r.fail(std::string("bad recipe: ") + e.what());
  }
  struct Record {
    Shape shape;
    std::vector<double> values;
  };
  std::map<std::string, Record> records;
  const std::uint64_t count = r.u64();
  if (count > bytes.size()) r.fail("implausible tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.text(4096);
    Record rec;
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) r.fail("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t e = r.u64();
      if (e == 0 || e > bytes.size()) r.fail("tensor '" + name + "' has invalid extent");
      rec.shape.push_back(static_cast<std::size_t>(e));
      numel *= e;
      if (numel > bytes.size()) r.fail("tensor '" + name + "' larger than the file");
    }
    rec.values.resize(static_cast<std::size_t>(numel));
    for (auto& v : rec.values) v = r.f64();
    if (!records.emplace(std::move(name), std::move(rec)).second) r.fail("duplicate tensor name");
  }
  if (!r.at_end()) r.fail("trailing bytes after last tensor");

  ModelGraph model = build(recipe);
  const auto targets = model.named_tensors();
  if (targets.size() != records.size()) {
    r.fail("file holds " + std::to_string(records.size()) + " tensors, recipe expects " +
           std::to_string(targets.size()));
  }
  for (const auto& nt : targets) {
    auto it = records.find(nt.name);
    if (it == records.end()) r.fail("missing tensor '" + nt.name + "'");
    if (it->second.shape != nt.tensor.shape()) {
      r.fail("tensor '" + nt.name + "' has shape " + shape_str(it->second.shape) + ", recipe expects " +
             shape_str(nt.tensor.shape()));
    }
  }
  for (const auto& nt : targets) {
    const auto& src = records.at(nt.name).values;
    Tensor t = nt.tensor;
    std::copy(src.begin(), src.end(), t.data().begin());
  }
  return model;
}

inline void save_model(const ModelGraph& model, const std::string& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write model file '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline ModelGraph load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file '" + path + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes, path);
}

}  // namespace attnhybrid
