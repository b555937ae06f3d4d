#include "bupo/cli/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <set>
#include <zlib.h>

#include "bupo/cli/io.hpp"
#include "bupo/errors.hpp"

namespace bupo::cli {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace {

std::uint32_t crc(const void* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  // zlib takes 32-bit lengths.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put_str(const std::string& s) {
    put<std::uint64_t>(s.size());
    out_ += s;
  }
  void put_raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_str() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void get_raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > in_.size() - pos_) throw CorruptDataError("checkpoint is truncated");
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

const numeric::Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& r : tensors) {
    if (r.name == name) return r.tensor;
  }
  throw CorruptDataError("checkpoint has no tensor '" + name + "'");
}

const std::string& Checkpoint::value(const std::string& key) const {
  const auto it = meta.find(key);
  if (it == meta.end()) throw CorruptDataError("checkpoint has no metadata '" + key + "'");
  return it->second;
}

std::uint32_t payload_checksum(const numeric::Tensor& t) {
  return crc(t.data(), t.size() * sizeof(double));
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.put_raw(kCheckpointMagic, 8);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    w.put_str(k);
    w.put_str(v);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& r : ckpt.tensors) {
    w.put_str(r.name);
    const auto& shape = r.tensor.empty() ? numeric::Shape{} : r.tensor.shape();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) w.put<std::uint64_t>(d);
    if (!r.tensor.empty()) w.put_raw(r.tensor.data(), r.tensor.size() * sizeof(double));
    w.put<std::uint32_t>(payload_checksum(r.tensor));
  }
  w.put<std::uint32_t>(crc(w.bytes().data(), w.bytes().size()));
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 + 4 + 4 || bytes.compare(0, 8, kCheckpointMagic) != 0) {
    throw CorruptDataError("not a checkpoint (bad magic)");
  }
  {
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (stored != crc(bytes.data(), bytes.size() - 4)) {
      throw CorruptDataError("checkpoint checksum mismatch");
    }
  }
  Reader r(bytes);
  char magic[8];
  r.get_raw(magic, 8);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CorruptDataError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.get_str();
    std::string v = r.get_str();
    if (!ckpt.meta.emplace(std::move(k), std::move(v)).second) {
      throw CorruptDataError("duplicate checkpoint metadata key");
    }
  }
  const auto n_tensors = r.get<std::uint32_t>();
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    TensorRecord rec;
    rec.name = r.get_str();
    if (!names.insert(rec.name).second) {
      throw CorruptDataError("duplicate tensor '" + rec.name + "'");
    }
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CorruptDataError("tensor '" + rec.name + "' has implausible rank");
    numeric::Shape shape;
    std::uint64_t count = rank ? 1 : 0;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto e = r.get<std::uint64_t>();
      if (e == 0 || e > bytes.size()) throw CorruptDataError("tensor '" + rec.name + "' has a bad shape");
      count *= e;
      if (count > bytes.size()) throw CorruptDataError("tensor '" + rec.name + "' is truncated");
      shape.push_back(e);
    }
    if (rank) {
      rec.tensor = numeric::Tensor(shape);
      r.get_raw(rec.tensor.data(), count * sizeof(double));
    }
    if (r.get<std::uint32_t>() != payload_checksum(rec.tensor)) {
      throw CorruptDataError("checksum mismatch in tensor '" + rec.name + "'");
    }
    ckpt.tensors.push_back(std::move(rec));
  }
  if (r.pos() + 4 != bytes.size()) throw CorruptDataError("trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const InputError& e) {
    throw CorruptDataError(e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace bupo::cli
