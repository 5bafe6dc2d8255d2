#include "dfsar/archive.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <openssl/evp.h>

#include "dfsar/error.hpp"

namespace dfsar::io {

namespace {

constexpr char kMagic[8] = {'D', 'F', 'S', 'A', 'R', 'A', 'R', '1'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename T>
  T get() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  void take(void* dst, std::size_t n) {
    if (n > bytes_.size() - pos_) throw ValidationError("archive: truncated data");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string string(std::size_t n) {
    std::string s(n, '\0');
    take(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize(const Archive& a) {
  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  const std::string manifest = a.manifest.dump();
  put<std::uint64_t>(out, manifest.size());
  out.insert(out.end(), manifest.begin(), manifest.end());
  put<std::uint64_t>(out, a.arrays.size());
  for (const auto& [name, t] : a.arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put<std::int32_t>(out, d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), p, p + t.size() * sizeof(double));
  }
  return out;
}

Archive deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ValidationError("archive: bad magic number");
  std::vector<std::uint8_t> body(bytes.begin() + sizeof(kMagic), bytes.end());
  Reader r(body);
  Archive a;
  const auto manifest_size = r.get<std::uint64_t>();
  if (manifest_size > body.size()) throw ValidationError("archive: truncated data");
  try {
    a.manifest = nlohmann::json::parse(r.string(manifest_size));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("archive: manifest is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_size = r.get<std::uint32_t>();
    std::string name = r.string(name_size);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw ValidationError("archive: array '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto v = r.get<std::int32_t>();
      if (v < 0) throw ValidationError("archive: array '" + name + "' has a negative dimension");
      shape.push_back(v);
    }
    Tensor t(shape);
    r.take(t.data(), t.size() * sizeof(double));
    a.arrays.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw ValidationError("archive: trailing bytes");
  return a;
}

std::vector<std::uint8_t> read_bytes(const std::string& path, const std::string& asset) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingAssetError(asset, path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ValidationError("short write to " + path);
  }
  std::filesystem::rename(tmp, target);
}

void save_archive(const std::string& path, const Archive& a) { write_bytes(path, serialize(a)); }

Archive load_archive(const std::string& path, const std::string& asset) {
  const auto bytes = read_bytes(path, asset);
  try {
    return deserialize(bytes);
  } catch (const ValidationError& e) {
    throw ValidationError(asset + " " + path + ": " + e.what());
  }
}

void put_tensor_map(Archive& a, const std::string& prefix, const std::map<std::string, Tensor>& m) {
  for (const auto& [name, t] : m) a.arrays[prefix + name] = t;
}

void get_tensor_map(const Archive& a, const std::string& prefix, std::map<std::string, Tensor>& m) {
  for (auto& [name, t] : m) {
    auto it = a.arrays.find(prefix + name);
    if (it == a.arrays.end()) throw ValidationError("architecture mismatch: archive lacks '" + prefix + name + "'");
    if (it->second.shape() != t.shape())
      throw ValidationError("architecture mismatch: '" + prefix + name + "' stored as " +
                            shape_str(it->second.shape()) + ", expected " + shape_str(t.shape()));
    t = it->second;
  }
}

void put_parameters(Archive& a, const std::string& prefix, const nn::ParameterSet& ps) {
  for (const auto& [name, v] : ps.params()) a.arrays[prefix + name] = v.value();
  put_tensor_map(a, prefix, ps.buffers());
}

void get_parameters(const Archive& a, const std::string& prefix, nn::ParameterSet& ps) {
  std::size_t expected = ps.params().size() + ps.buffers().size();
  std::size_t stored = 0;
  for (const auto& [name, t] : a.arrays)
    if (name.compare(0, prefix.size(), prefix) == 0) ++stored;
  if (stored != expected)
    throw ValidationError("architecture mismatch: archive holds " + std::to_string(stored) + " '" + prefix +
                          "' arrays, model has " + std::to_string(expected));
  for (auto& [name, v] : ps.params()) {
    auto it = a.arrays.find(prefix + name);
    if (it == a.arrays.end()) throw ValidationError("architecture mismatch: archive lacks '" + prefix + name + "'");
    if (it->second.shape() != v.shape())
      throw ValidationError("architecture mismatch: '" + prefix + name + "' stored as " +
                            shape_str(it->second.shape()) + ", expected " + shape_str(v.shape()));
    v.mutable_value() = it->second;
  }
  get_tensor_map(a, prefix, ps.buffers());
}

// ---------------------------------------------------------------- hashing

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(const std::string& text) { return sha256_hex(text.data(), text.size()); }

std::string sha256_file(const std::string& path, const std::string& asset) {
  const auto bytes = read_bytes(path, asset);
  return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace dfsar::io
