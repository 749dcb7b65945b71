#include "patchlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "patchlm/errors.hpp"

namespace patchlm {
namespace {

constexpr char kMagic[8] = {'P', 'L', 'M', 'C', 'K', 'P', 'T', '\0'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }

  std::string str(std::uint64_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, ckpt.version);
  put_u64(out, ckpt.config_json.size());
  out.insert(out.end(), ckpt.config_json.begin(), ckpt.config_json.end());
  put_u64(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    put_u64(out, name.size());
    out.insert(out.end(), name.begin(), name.end());
    put_u64(out, t.rank());
    for (auto d : t.shape()) put_u64(out, d);
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw IoError("not a checkpoint file (bad magic)");
  }
  std::vector<std::uint8_t> body(bytes.begin() + sizeof kMagic, bytes.end());
  Reader r(body);
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  ckpt.config_json = r.str(r.u64());
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u64());
    const std::uint64_t rank = r.u64();
    if (rank == 0 || rank > 8) throw IoError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0 || d > (std::uint64_t{1} << 40)) throw IoError("tensor '" + name + "' has invalid dimension");
      n *= d;
    }
    std::vector<double> data(n);
    for (auto& v : data) v = std::bit_cast<double>(r.u64());
    ckpt.tensors.insert_or_assign(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint records");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("short write to " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move checkpoint into place at " + path.string());
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_params(const std::filesystem::path& path, const ModelParams& params) {
  write_checkpoint(path, Checkpoint{kCheckpointVersion, params.config.to_json(), params.tensors});
}

ModelParams load_params(const std::filesystem::path& path) {
  Checkpoint ckpt = read_checkpoint(path);
  ModelParams params{ModelConfig::from_json(ckpt.config_json), std::move(ckpt.tensors)};
  params.validate();
  return params;
}

}  // namespace patchlm
