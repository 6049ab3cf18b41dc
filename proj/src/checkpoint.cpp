#include "mhc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mhc {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'M', 'H', 'C', 'S', 'S', 'M', 'C', 'K'};

class Writer {
 public:
  template <typename U>
  void pod(U v) {
    out_.append(reinterpret_cast<const char*>(&v), sizeof(U));
  }
  void text(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void array(const ArrayRecord& r) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    out_ += r.name;
    pod<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
    pod<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) pod<std::uint64_t>(d);
    pod<std::uint64_t>(r.bytes.size());
    out_.append(reinterpret_cast<const char*>(r.bytes.data()), r.bytes.size());
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  void need(std::size_t n) const {
    MHC_CHECK(pos_ + n <= in_.size(), DataError, "checkpoint truncated");
  }
  template <typename U>
  U pod() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, in_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string text() { return raw(pod<std::uint64_t>()); }
  ArrayRecord array() {
    ArrayRecord r;
    r.name = raw(pod<std::uint32_t>());
    const auto dt = pod<std::uint8_t>();
    MHC_CHECK(dt == 1 || dt == 2, DataError, "checkpoint: unknown dtype for " + r.name);
    r.dtype = static_cast<DType>(dt);
    const auto rank = pod<std::uint32_t>();
    MHC_CHECK(rank <= 8, DataError, "checkpoint: implausible rank for " + r.name);
    for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(pod<std::uint64_t>());
    const auto len = pod<std::uint64_t>();
    need(len);
    r.bytes.assign(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
                   in_.begin() + static_cast<std::ptrdiff_t>(pos_ + len));
    pos_ += len;
    return r;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

std::size_t element_size(DType d) { return d == DType::f32 ? 4 : 8; }

const ArrayRecord* find_in(const std::vector<ArrayRecord>& v, const std::string& name) {
  for (const auto& r : v) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

}  // namespace

template <typename T>
ArrayRecord to_record(std::string name, const Tensor<T>& t) {
  ArrayRecord r{std::move(name), dtype_of<T>(), t.shape(), {}};
  r.bytes.resize(t.size() * sizeof(T));
  if (t.size() > 0) std::memcpy(r.bytes.data(), t.raw(), r.bytes.size());
  return r;
}

template <typename T>
Tensor<T> from_record(const ArrayRecord& r) {
  MHC_CHECK(r.dtype == dtype_of<T>(), DataError,
            "checkpoint: array " + r.name + " has a different element type");
  Tensor<T> t(r.shape);
  MHC_CHECK(r.bytes.size() == t.size() * sizeof(T), DataError,
            "checkpoint: array " + r.name + " byte length does not match its shape");
  if (t.size() > 0) std::memcpy(t.raw(), r.bytes.data(), r.bytes.size());
  return t;
}

template ArrayRecord to_record(std::string, const Tensor<float>&);
template ArrayRecord to_record(std::string, const Tensor<double>&);
template Tensor<float> from_record(const ArrayRecord&);
template Tensor<double> from_record(const ArrayRecord&);

const ArrayRecord* CheckpointBundle::find_param(const std::string& name) const {
  return find_in(params, name);
}

const ArrayRecord* CheckpointBundle::find_optimizer(const std::string& name) const {
  return find_in(optimizer, name);
}

std::string serialize(const CheckpointBundle& b) {
  Writer w;
  for (char c : kMagic) w.pod(c);
  w.pod<std::uint32_t>(CheckpointBundle::kVersion);
  w.text(b.config_text);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(b.params.size()));
  for (const auto& r : b.params) w.array(r);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(b.optimizer.size()));
  for (const auto& r : b.optimizer) w.array(r);
  w.text(format_key_values(b.meta));
  w.text(b.rng_state);
  return w.take();
}

CheckpointBundle deserialize(const std::string& bytes) {
  Reader r(bytes);
  MHC_CHECK(r.raw(sizeof(kMagic)) == std::string(kMagic, sizeof(kMagic)), DataError,
            "not a checkpoint file (bad magic)");
  const auto version = r.pod<std::uint32_t>();
  MHC_CHECK(version == CheckpointBundle::kVersion, DataError,
            "unsupported checkpoint version " + std::to_string(version));
  CheckpointBundle b;
  b.config_text = r.text();
  for (auto n = r.pod<std::uint32_t>(); n > 0; --n) b.params.push_back(r.array());
  for (auto n = r.pod<std::uint32_t>(); n > 0; --n) b.optimizer.push_back(r.array());
  b.meta = parse_key_values(r.text());
  b.rng_state = r.text();
  MHC_CHECK(r.done(), DataError, "checkpoint has trailing bytes");
  for (const auto* list : {&b.params, &b.optimizer}) {
    for (const auto& a : *list) {
      MHC_CHECK(a.bytes.size() == shape_size(a.shape) * element_size(a.dtype), DataError,
                "checkpoint: array " + a.name + " byte length does not match its shape");
    }
  }
  return b;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointBundle& b) {
  const std::string bytes = serialize(b);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    MHC_CHECK(out.good(), DataError, "cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    MHC_CHECK(out.good(), DataError, "write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  MHC_CHECK(in.good(), DataError, "cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

}  // namespace mhc
