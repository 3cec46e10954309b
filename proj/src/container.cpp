#include "fwvit/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

#include "fwvit/errors.hpp"

namespace fwvit {

namespace {

constexpr char kMagic[4] = {'F', 'W', 'V', 'T'};

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t crc_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, const std::string& origin)
      : bytes_(bytes), end_(end), origin_(origin) {}

  std::uint64_t uint(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (end_ - pos_ < n) {
      throw TruncatedError(origin_ + ": truncated while reading " + what + " at byte " +
                           std::to_string(pos_));
    }
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  const std::string& bytes_;
  std::size_t end_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_container(const std::vector<StoredTensor>& tensors) {
  std::string out(kMagic, 4);
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw std::invalid_argument("tensor name too long: " + t.name.substr(0, 64));
    if (t.value.rank() > 0xFF) throw std::invalid_argument("tensor rank too large: " + t.name);
    put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    put_u8(out, t.flags);
    put_u8(out, static_cast<std::uint8_t>(t.value.rank()));
    for (auto d : t.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  put_u32(out, crc_of(out.data() + 4, out.size() - 4));
  return out;
}

std::vector<StoredTensor> decode_container(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 4) throw TruncatedError(origin + ": file shorter than the magic number");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw BadMagicError(origin + ": bad magic, not an FWVT container");
  Reader r(bytes, bytes.size(), origin);
  r.seek(4);
  const auto version = r.uint(4, "version");
  if (version != kContainerVersion) {
    throw VersionMismatchError(origin + ": container version " + std::to_string(version) +
                               ", this build reads version " + std::to_string(kContainerVersion));
  }
  const auto count = r.uint(4, "tensor count");
  std::vector<StoredTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto len = r.uint(2, "name length");
    t.name = r.str(len, "name");
    t.flags = static_cast<std::uint8_t>(r.uint(1, "flags"));
    const auto rank = r.uint(1, "rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint64_t k = 0; k < rank; ++k) {
      const auto d = r.uint(4, "dims");
      if (d == 0) throw FormatError(origin + ": tensor " + t.name + " has a zero dimension");
      shape.push_back(d);
      numel *= d;
      if (numel > bytes.size()) r.need(bytes.size() + 1, "payload");
    }
    r.need(numel * 4, "payload");
    std::vector<float> values(numel);
    for (auto& v : values) v = std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(4, "payload")));
    t.value = Tensor(std::move(shape), std::move(values));
    out.push_back(std::move(t));
  }
  const std::size_t body_end = r.pos();
  const auto stored = static_cast<std::uint32_t>(r.uint(4, "checksum"));
  if (r.pos() != bytes.size()) {
    throw ChecksumError(origin + ": " + std::to_string(bytes.size() - r.pos()) +
                        " unexpected bytes after the checksum");
  }
  if (crc_of(bytes.data() + 4, body_end - 4) != stored) {
    throw ChecksumError(origin + ": checksum mismatch, file is corrupted");
  }
  return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
      throw DataError("cannot write " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

void write_container(const std::filesystem::path& path, const std::vector<StoredTensor>& tensors) {
  write_file_atomic(path, encode_container(tensors));
}

std::vector<StoredTensor> read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return decode_container(bytes, path.string());
}

}  // namespace fwvit
