#include "ilm/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "ilm/error.hpp"

namespace ilm {

namespace {

constexpr char kMagic[4] = {'I', 'L', 'M', 'C'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw StorageError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint64_t uint(int width) {
    need(width);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }
  std::string str() {
    const auto n = uint(4);
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
  for (auto& [k, v] : metadata) {
    if (k == key) {
      v = value;
      return;
    }
  }
  metadata.emplace_back(key, value);
}

std::optional<std::string> Checkpoint::meta(const std::string& key) const {
  for (const auto& [k, v] : metadata)
    if (k == key) return v;
  return std::nullopt;
}

bool Checkpoint::has_array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

const NamedArray& Checkpoint::array(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw StorageError("checkpoint has no array named '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::set<std::string> names;
  for (const auto& a : ckpt.arrays) {
    if (!names.insert(a.name).second) throw StorageError("duplicate array name '" + a.name + "'");
    if (shape_size(a.shape) != a.values.size()) throw StorageError("array '" + a.name + "' size/shape mismatch");
  }
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    put_string(out, k);
    put_string(out, v);
  }
  put_u32(out, static_cast<std::uint32_t>(ckpt.arrays.size()));
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    put_string(out, a.name);
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put_u64(out, d);
    put_u64(out, offset);
    put_u64(out, a.values.size());
    offset += a.values.size();
  }
  for (const auto& a : ckpt.arrays)
    for (float f : a.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw StorageError("not an ILMC checkpoint (bad magic)");
  r.skip(4);
  const auto version = r.uint(4);
  if (version != kCheckpointVersion) {
    throw StorageError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto meta_count = r.uint(4);
  for (std::uint64_t i = 0; i < meta_count; ++i) {
    auto k = r.str();
    auto v = r.str();
    ckpt.metadata.emplace_back(std::move(k), std::move(v));
  }
  const auto count = r.uint(4);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  std::set<std::string> names;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str();
    if (!names.insert(a.name).second) throw StorageError("duplicate array name '" + a.name + "'");
    const auto ndim = r.uint(4);
    for (std::uint64_t d = 0; d < ndim; ++d) a.shape.push_back(r.uint(8));
    const auto offset = r.uint(8), n = r.uint(8);
    if (shape_size(a.shape) != n) throw StorageError("array '" + a.name + "' directory size mismatch");
    spans.emplace_back(offset, n);
    ckpt.arrays.push_back(std::move(a));
  }
  const std::size_t payload = r.pos();
  for (std::size_t i = 0; i < ckpt.arrays.size(); ++i) {
    const auto [offset, n] = spans[i];
    Reader p(bytes);
    p.skip(payload + offset * 4);
    auto& values = ckpt.arrays[i].values;
    values.resize(n);
    for (std::uint64_t j = 0; j < n; ++j) values[j] = std::bit_cast<float>(static_cast<std::uint32_t>(p.uint(4)));
  }
  return ckpt;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw StorageError("read failed for " + path.string());
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw StorageError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw StorageError("cannot move " + tmp + " into place: " + ec.message());
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw StorageError("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

void add_arrays(Checkpoint& ckpt, const nn::NamedTensors& tensors) {
  for (const auto& [name, t] : tensors) {
    NamedArray a{name, t.shape(), {}};
    a.values.reserve(t.size());
    for (double x : t.data()) a.values.push_back(static_cast<float>(x));
    ckpt.arrays.push_back(std::move(a));
  }
}

void load_arrays(const Checkpoint& ckpt, const nn::NamedTensors& tensors) {
  for (auto [name, t] : tensors) {
    const auto& a = ckpt.array(name);
    if (a.shape != t.shape()) {
      throw StorageError("array '" + name + "' has shape " + shape_string(a.shape) + ", expected " +
                         shape_string(t.shape()));
    }
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = a.values[i];
  }
}

Tensor array_to_tensor(const NamedArray& array, bool requires_grad) {
  return Tensor::from_data(array.shape, std::vector<double>(array.values.begin(), array.values.end()),
                           requires_grad);
}

std::string parameter_checksum(const nn::NamedTensors& tensors) {
  std::string bytes;
  for (const auto& [name, t] : tensors) {
    put_string(bytes, name);
    for (auto d : t.shape()) put_u64(bytes, d);
    for (double x : t.data()) put_u64(bytes, std::bit_cast<std::uint64_t>(x));
  }
  return sha256_hex(bytes);
}

}  // namespace ilm
