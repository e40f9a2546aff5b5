#include "megt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "megt/errors.hpp"

namespace megt {

namespace {

constexpr char kMagic[4] = {'M', 'E', 'G', 'M'};
constexpr std::uint16_t kVersion = 1;

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + off_, sizeof(T));
    off_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + off_), n);
    off_ += n;
    return s;
  }
  bool done() const { return off_ == bytes_.size(); }

private:
  void need(std::size_t n) const {
    if (bytes_.size() - off_ < n)
      throw ParseError(ParseError::Kind::truncated, "checkpoint: truncated at byte " + std::to_string(off_));
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t off_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(Model& model) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint16_t>(out, kVersion);
  const std::string cfg = model.config().to_text();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  model.visit([&](const std::string& name, Tensor& t) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
    for (double x : t.values()) put<double>(out, x);
  });
  return out;
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  using K = ParseError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw ParseError(K::bad_magic, "checkpoint: bad magic");
  Reader in(bytes.subspan(4));
  const auto version = in.get<std::uint16_t>();
  if (version != kVersion)
    throw ParseError(K::version_mismatch, "checkpoint: version mismatch (file " + std::to_string(version) +
                                              ", expected " + std::to_string(kVersion) + ")");
  const auto cfg_len = in.get<std::uint32_t>();
  Model model(ModelConfig::from_text(in.str(cfg_len)));
  model.visit([&](const std::string& name, Tensor& t) {
    const auto len = in.get<std::uint16_t>();
    const std::string stored = in.str(len);
    if (stored != name)
      throw ParseError(K::malformed, "checkpoint: expected parameter '" + name + "', found '" + stored + "'");
    const std::size_t rows = in.get<std::uint32_t>();
    const std::size_t cols = in.get<std::uint32_t>();
    if (rows != t.rows() || cols != t.cols())
      throw ParseError(K::malformed, "checkpoint: parameter '" + name + "' has shape [" + std::to_string(rows) +
                                         "x" + std::to_string(cols) + "], model expects " + t.shape_string());
    for (double& x : t.values()) x = in.get<double>();
  });
  if (!in.done()) throw ParseError(K::malformed, "checkpoint: trailing bytes after last parameter");
  return model;
}

void save_checkpoint(Model& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace megt
