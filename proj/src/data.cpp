#include "megt/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>

#include "megt/errors.hpp"
#include "megt/numerics.hpp"
#include "megt/rng.hpp"

namespace megt {

static_assert(std::endian::native == std::endian::little, "bag I/O assumes a little-endian host");

void Bag::validate() const {
  if (low.rows() == 0) throw DataError("bag '" + id + "': empty low-resolution instance set");
  if (high.rows() == 0) throw DataError("bag '" + id + "': empty high-resolution instance set");
  if (low.cols() != high.cols())
    throw DataError("bag '" + id + "': low width " + std::to_string(low.cols()) +
                    " differs from high width " + std::to_string(high.cols()));
}

void SynthSpec::validate() const {
  if (bags == 0) throw ConfigError("no bags requested");
  if (n_low_min < 1 || n_low_max < n_low_min) throw ConfigError("invalid n_low range");
  if (children_per_low < 1) throw ConfigError("children_per_low must be at least 1");
  if (d < 2) throw ConfigError("feature width must be at least 2");
  if (!(signal_fraction > 0.0 && signal_fraction <= 1.0))
    throw ConfigError("signal fraction must lie in (0, 1]");
  double total = 0.0;
  for (double p : type_probs) {
    if (!(p >= 0.0)) throw ConfigError("invalid bag-type probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("bag-type probabilities must sum to 1");
}

SynthTask parse_task(std::string_view name) {
  if (name == "witness") return SynthTask::witness;
  if (name == "cross_scale" || name == "cross-scale") return SynthTask::cross_scale;
  throw ConfigError("unknown synthetic task '" + std::string(name) + "'");
}

namespace {

Tensor random_direction(std::size_t d, Rng rng) {
  Tensor v(1, d);
  double norm = 0.0;
  for (double& x : v.values()) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v.values()) x /= norm;
  return v;
}

// Random subset of round(fraction * n) (at least one) positions.
std::vector<std::size_t> random_subset(std::size_t n, double fraction, Rng& rng) {
  const std::size_t k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void add_signal(Tensor& t, std::size_t row, const Tensor& dir, double s) {
  for (std::size_t c = 0; c < t.cols(); ++c) t(row, c) += s * dir[c];
}

void round_to_float(Tensor& t) {
  for (double& x : t.values()) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace

SyntheticSet generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  SyntheticSet out;
  out.low_direction = random_direction(spec.d, root.child("direction/low"));
  // Gram-Schmidt against the low direction.
  Tensor high = random_direction(spec.d, root.child("direction/high"));
  double dot = 0.0;
  for (std::size_t c = 0; c < spec.d; ++c) dot += high[c] * out.low_direction[c];
  double norm = 0.0;
  for (std::size_t c = 0; c < spec.d; ++c) {
    high[c] -= dot * out.low_direction[c];
    norm += high[c] * high[c];
  }
  for (double& x : high.values()) x /= std::sqrt(norm);
  out.high_direction = std::move(high);

  for (std::size_t b = 0; b < spec.bags; ++b) {
    Rng rng = root.child("bag").child(b);
    const std::size_t n_low = spec.n_low_min + rng.below(spec.n_low_max - spec.n_low_min + 1);
    const std::size_t n_high = n_low * spec.children_per_low;
    Bag bag;
    bag.id = "bag_" + std::to_string(b);
    bag.low = Tensor(n_low, spec.d);
    bag.high = Tensor(n_high, spec.d);
    for (double& x : bag.low.values()) x = spec.noise * rng.normal();
    for (double& x : bag.high.values()) x = spec.noise * rng.normal();

    BagType type;
    if (spec.task == SynthTask::witness) {
      type.low_signal = type.high_signal = rng.uniform() < 0.5;
      if (type.low_signal) {
        for (std::size_t i : random_subset(n_low, spec.signal_fraction, rng)) {
          add_signal(bag.low, i, out.low_direction, spec.signal_strength);
          for (std::size_t c = 0; c < spec.children_per_low; ++c)
            add_signal(bag.high, i * spec.children_per_low + c, out.high_direction, spec.signal_strength);
        }
      }
      bag.label = type.low_signal ? 1 : 0;
    } else {
      const double u = rng.uniform();
      double acc = 0.0;
      int kind = 3;
      for (int t = 0; t < 4; ++t) {
        acc += spec.type_probs[t];
        if (u < acc) {
          kind = t;
          break;
        }
      }
      type.low_signal = kind == 0 || kind == 1;
      type.high_signal = kind == 0 || kind == 2;
      if (type.low_signal)
        for (std::size_t i : random_subset(n_low, spec.signal_fraction, rng))
          add_signal(bag.low, i, out.low_direction, spec.signal_strength);
      if (type.high_signal)
        for (std::size_t i : random_subset(n_high, spec.signal_fraction, rng))
          add_signal(bag.high, i, out.high_direction, spec.signal_strength);
      bag.label = kind == 0 ? 1 : 0;
    }
    round_to_float(bag.low);
    round_to_float(bag.high);
    out.bags.push_back(std::move(bag));
    out.types.push_back(type);
  }
  return out;
}

// -- bag files ------------------------------------------------------------------------

namespace {

constexpr char kBagMagic[4] = {'M', 'E', 'G', 'B'};
constexpr std::uint16_t kBagVersion = 1;
constexpr std::size_t kBagHeader = 4 + 2 + 1 + 1 + 4 * 3;

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <class T>
T get(std::span<const std::uint8_t> in, std::size_t& off) {
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_bag(const Bag& bag) {
  bag.validate();
  if (bag.label > 255) throw DataError("bag label " + std::to_string(bag.label) + " does not fit in u8");
  std::vector<std::uint8_t> out;
  out.reserve(kBagHeader + 4 * (bag.low.size() + bag.high.size()));
  out.insert(out.end(), kBagMagic, kBagMagic + 4);
  put<std::uint16_t>(out, kBagVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(bag.label));
  put<std::uint8_t>(out, 0);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(bag.low.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(bag.high.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(bag.width()));
  for (double x : bag.low.values()) put<float>(out, static_cast<float>(x));
  for (double x : bag.high.values()) put<float>(out, static_cast<float>(x));
  return out;
}

Bag decode_bag(std::span<const std::uint8_t> bytes, std::string id) {
  using K = ParseError::Kind;
  const std::string where = id.empty() ? std::string("bag") : "bag '" + id + "'";
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kBagMagic, 4) != 0)
    throw ParseError(K::bad_magic, where + ": bad magic");
  if (bytes.size() < kBagHeader) throw ParseError(K::truncated, where + ": truncated header");
  std::size_t off = 4;
  const auto version = get<std::uint16_t>(bytes, off);
  if (version != kBagVersion)
    throw ParseError(K::version_mismatch, where + ": version mismatch (file " +
                                              std::to_string(version) + ", expected 1)");
  Bag bag;
  bag.id = std::move(id);
  bag.label = get<std::uint8_t>(bytes, off);
  off += 1;  // reserved
  const std::uint64_t n_low = get<std::uint32_t>(bytes, off);
  const std::uint64_t n_high = get<std::uint32_t>(bytes, off);
  const std::uint64_t d = get<std::uint32_t>(bytes, off);
  const std::uint64_t need = kBagHeader + 4 * (n_low + n_high) * d;
  if (bytes.size() < need)
    throw ParseError(K::truncated, where + ": truncated (" + std::to_string(bytes.size()) +
                                       " bytes, need " + std::to_string(need) + ")");
  if (bytes.size() > need) throw ParseError(K::malformed, where + ": trailing bytes");
  auto read_block = [&](std::size_t rows) {
    Tensor t(rows, d);
    for (double& x : t.values()) x = static_cast<double>(get<float>(bytes, off));
    return t;
  };
  bag.low = read_block(n_low);
  bag.high = read_block(n_high);
  if (n_low == 0 || n_high == 0 || d == 0)
    throw ParseError(K::malformed, where + ": zero-sized instance block");
  return bag;
}

void write_bag(const Bag& bag, const std::filesystem::path& path) {
  const auto bytes = encode_bag(bag);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

Bag read_bag(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open bag file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_bag(bytes, path.stem().string());
}

// -- manifests --------------------------------------------------------------------------

Split parse_split(std::string_view token) {
  if (token == "train") return Split::train;
  if (token == "val") return Split::val;
  if (token == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(token) + "' (expected train, val or test)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

const std::vector<Bag>& Dataset::split(Split s) const {
  return s == Split::train ? train : s == Split::val ? val : test;
}

std::vector<ManifestEntry> parse_manifest(std::string_view text) {
  std::vector<ManifestEntry> entries;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      fields.push_back(line.substr(start, tab - start));
    fields.push_back(line.substr(start));
    if (fields.size() != 3 || fields[0].empty())
      throw ParseError(ParseError::Kind::malformed,
                       "manifest line " + std::to_string(line_no) +
                           ": expected path<TAB>label<TAB>split");
    ManifestEntry e;
    e.path = fields[0];
    e.line = line_no;
    std::size_t used = 0;
    try {
      const long long label = std::stoll(fields[1], &used);
      if (label < 0 || used != fields[1].size()) throw std::invalid_argument("label");
      e.label = static_cast<std::size_t>(label);
    } catch (const std::exception&) {
      throw ParseError(ParseError::Kind::malformed, "manifest line " + std::to_string(line_no) +
                                                        ": bad label '" + fields[1] + "'");
    }
    try {
      e.split = parse_split(fields[2]);
    } catch (const ConfigError& err) {
      throw ConfigError("manifest line " + std::to_string(line_no) + ": " + err.what());
    }
    if (auto [it, fresh] = seen.emplace(e.path, line_no); !fresh)
      warn("manifest line " + std::to_string(line_no) + ": duplicate path '" + e.path +
           "' (first on line " + std::to_string(it->second) + "); both entries kept");
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw ConfigError("manifest lists no bags");
  return entries;
}

Dataset load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto entries = parse_manifest(text);
  const auto base = path.parent_path();
  Dataset ds;
  for (const auto& e : entries) {
    const auto file = base / e.path;
    if (!std::filesystem::exists(file))
      throw DataError("manifest line " + std::to_string(e.line) + ": missing bag file '" +
                      file.string() + "'");
    Bag bag = read_bag(file);
    if (bag.label != e.label)
      throw DataError("manifest line " + std::to_string(e.line) + ": label " +
                      std::to_string(e.label) + " disagrees with bag file label " +
                      std::to_string(bag.label));
    bag.id = e.path;
    (e.split == Split::train ? ds.train : e.split == Split::val ? ds.val : ds.test)
        .push_back(std::move(bag));
  }
  return ds;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << "# path\tlabel\tsplit\n";
  for (const auto& e : entries) out << e.path << '\t' << e.label << '\t' << to_string(e.split) << '\n';
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

}  // namespace megt
