#include "megt/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "megt/errors.hpp"

namespace megt {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(value) +
                    "' as " + expected);
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "an unsigned integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "a boolean (true/false)");
}

struct Field {
  std::function<void(ModelConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const ModelConfig&)> get;
};

template <class T>
Field size_field(T ModelConfig::*member) {
  return {[member](ModelConfig& c, std::string_view k, std::string_view v) {
            c.*member = static_cast<T>(parse_u64(k, v));
          },
          [member](const ModelConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(double ModelConfig::*member) {
  return {[member](ModelConfig& c, std::string_view k, std::string_view v) { c.*member = parse_double(k, v); },
          [member](const ModelConfig& c) { return format_double(c.*member); }};
}

Field bool_field(bool ModelConfig::*member) {
  return {[member](ModelConfig& c, std::string_view k, std::string_view v) { c.*member = parse_bool(k, v); },
          [member](const ModelConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

const std::vector<std::pair<std::string, Field>>& field_table() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("d_in", size_field(&ModelConfig::d_in));
    t.emplace_back("d_model", size_field(&ModelConfig::d_model));
    t.emplace_back("n_heads", size_field(&ModelConfig::n_heads));
    t.emplace_back("k_keep", size_field(&ModelConfig::k_keep));
    t.emplace_back("m_landmarks", size_field(&ModelConfig::m_landmarks));
    t.emplace_back("pinv_iters", size_field(&ModelConfig::pinv_iters));
    t.emplace_back("egt_depth", size_field(&ModelConfig::egt_depth));
    t.emplace_back("l_low", size_field(&ModelConfig::l_low));
    t.emplace_back("l_high", size_field(&ModelConfig::l_high));
    t.emplace_back("k_mffm", size_field(&ModelConfig::k_mffm));
    t.emplace_back("n_classes", size_field(&ModelConfig::n_classes));
    t.emplace_back("mlp_ratio", size_field(&ModelConfig::mlp_ratio));
    t.emplace_back("enable_tpm", bool_field(&ModelConfig::enable_tpm));
    t.emplace_back("enable_gtl", bool_field(&ModelConfig::enable_gtl));
    t.emplace_back("attention",
                   Field{[](ModelConfig& c, std::string_view k, std::string_view v) {
                           if (v == "nystrom") c.attention = AttentionKind::nystrom;
                           else if (v == "exact") c.attention = AttentionKind::exact;
                           else bad_value(k, v, "one of nystrom|exact");
                         },
                         [](const ModelConfig& c) { return to_string(c.attention); }});
    t.emplace_back("arch",
                   Field{[](ModelConfig& c, std::string_view k, std::string_view v) {
                           if (v == "megt") c.arch = Arch::megt;
                           else if (v == "egt_low") c.arch = Arch::egt_low;
                           else if (v == "egt_high") c.arch = Arch::egt_high;
                           else if (v == "mean_pool") c.arch = Arch::mean_pool;
                           else bad_value(k, v, "one of megt|egt_low|egt_high|mean_pool");
                         },
                         [](const ModelConfig& c) { return to_string(c.arch); }});
    t.emplace_back("ln_eps", double_field(&ModelConfig::ln_eps));
    t.emplace_back("lr", double_field(&ModelConfig::lr));
    t.emplace_back("weight_decay", double_field(&ModelConfig::weight_decay));
    t.emplace_back("adam_beta1", double_field(&ModelConfig::adam_beta1));
    t.emplace_back("adam_beta2", double_field(&ModelConfig::adam_beta2));
    t.emplace_back("adam_eps", double_field(&ModelConfig::adam_eps));
    t.emplace_back("max_epochs", size_field(&ModelConfig::max_epochs));
    t.emplace_back("patience", size_field(&ModelConfig::patience));
    t.emplace_back("seed", size_field(&ModelConfig::seed));
    return t;
  }();
  return table;
}

const Field& lookup(std::string_view key) {
  for (const auto& [name, field] : field_table())
    if (name == key) return field;
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

std::string format_double(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::megt: return "megt";
    case Arch::egt_low: return "egt_low";
    case Arch::egt_high: return "egt_high";
    case Arch::mean_pool: return "mean_pool";
  }
  return "?";
}

std::string to_string(AttentionKind kind) {
  return kind == AttentionKind::exact ? "exact" : "nystrom";
}

void ModelConfig::set(std::string_view key, std::string_view value) {
  lookup(key).set(*this, key, trim(value));
}

std::string ModelConfig::get(std::string_view key) const { return lookup(key).get(*this); }

const std::vector<std::string>& ModelConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, _] : field_table()) n.push_back(name);
    return n;
  }();
  return names;
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(d_in >= 1, "d_in must be at least 1");
  require(d_model >= 1, "d_model must be at least 1");
  require(n_heads >= 1 && d_model % n_heads == 0,
          "n_heads (" + std::to_string(n_heads) + ") must divide d_model (" + std::to_string(d_model) + ")");
  require(k_keep >= 1, "k_keep must be at least 1");
  require(m_landmarks >= 1, "m_landmarks must be at least 1");
  require(pinv_iters >= 1, "pinv_iters must be at least 1");
  require(egt_depth >= 1, "egt_depth must be at least 1");
  require(k_mffm >= 1, "k_mffm must be at least 1");
  require(n_classes >= 2, "n_classes must be at least 2");
  require(mlp_ratio >= 1, "mlp_ratio must be at least 1");
  require(lr >= 0.0, "lr must be non-negative");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(ln_eps >= 0.0, "ln_eps must be non-negative");
  require(max_epochs >= 1, "max_epochs must be at least 1");
}

std::string ModelConfig::to_text() const {
  std::string out;
  for (const auto& [name, field] : field_table()) out += name + "=" + field.get(*this) + "\n";
  return out;
}

void ModelConfig::apply_text(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    set(trim(std::string_view(t).substr(0, eq)), std::string_view(t).substr(eq + 1));
  }
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig c;
  c.apply_text(text);
  return c;
}

}  // namespace megt
