#include "memreg/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace memreg {

namespace {

constexpr char kMagic[8] = {'M', 'R', 'S', 'E', 'G', 'C', 'K', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw FormatError(std::string("truncated checkpoint: expected ") + what, pos);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void Checkpoint::add(const std::string& name, Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("checkpoint record '" + name + "': " +
                                std::to_string(values.size()) + " values for shape " +
                                shape_str(shape));
  records[name] = {std::move(shape), std::move(values)};
}

void Checkpoint::add_tensor(const std::string& name, const TensorF& t) {
  add(name, t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
}

const std::pair<Shape, std::vector<float>>& Checkpoint::at(const std::string& name) const {
  auto it = records.find(name);
  if (it == records.end())
    throw std::out_of_range("checkpoint has no record named '" + name + "'");
  return it->second;
}

float Checkpoint::scalar(const std::string& name) const {
  const auto& [shape, values] = at(name);
  if (values.size() != 1)
    throw std::invalid_argument("checkpoint record '" + name + "' is not a scalar");
  return values[0];
}

void Checkpoint::load_into(const std::string& name, TensorF& t) const {
  const auto& [shape, values] = at(name);
  if (shape != t.shape())
    throw ShapeError("checkpoint record '" + name + "' has shape " + shape_str(shape) +
                     ", expected " + shape_str(t.shape()));
  std::copy(values.begin(), values.end(), t.data().begin());
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, Checkpoint::kFormatVersion);
  put_u64(out, ck.config_hash);
  put_u64(out, ck.iteration);
  put_u32(out, static_cast<std::uint32_t>(ck.records.size()));
  for (const auto& [name, rec] : ck.records) {
    const auto& [shape, values] = rec;
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_u64(out, d);
    put_u64(out, values.size());
    for (float v : values) put_f32(out, v);
  }
  // Write-then-rename so a crash never leaves a half-written file at path.
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  std::string magic = r.bytes(8, "magic");
  if (std::memcmp(magic.data(), kMagic, 8) != 0)
    throw FormatError("bad magic, not a checkpoint file", 0);
  std::uint32_t version = r.u32("format_version");
  if (version != Checkpoint::kFormatVersion)
    throw VersionError("checkpoint format_version " + std::to_string(version) +
                       " is not readable by this build (expected " +
                       std::to_string(Checkpoint::kFormatVersion) + ")");
  Checkpoint ck;
  ck.config_hash = r.u64("config_hash");
  ck.iteration = r.u64("iteration");
  std::uint32_t count = r.u32("record_count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = r.u32("record name length");
    std::string name = r.bytes(name_len, "record name");
    std::uint32_t ndim = r.u32("record rank");
    if (ndim > 8) throw FormatError("implausible tensor rank " + std::to_string(ndim), r.pos - 4);
    Shape shape(ndim);
    for (auto& d : shape) d = r.u64("record dim");
    std::uint64_t n = r.u64("record value count");
    if (n != shape_numel(shape))
      throw FormatError("record '" + name + "' count disagrees with shape", r.pos - 8);
    r.need(n * 4, "record values");
    std::vector<float> values(n);
    for (std::uint64_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[r.pos + 4 * k + b]))
                << (8 * b);
      std::memcpy(&values[k], &bits, 4);
    }
    r.pos += n * 4;
    if (ck.records.count(name))
      throw FormatError("duplicate record '" + name + "'", r.pos);
    ck.records[name] = {std::move(shape), std::move(values)};
  }
  if (r.pos != buf.size())
    throw FormatError("trailing bytes after last record", r.pos);
  return ck;
}

}  // namespace memreg
