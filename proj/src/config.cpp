#include "smoe/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

namespace smoe {

void RunConfig::validate() const {
  model.validate();
  train.validate();
  train.balance.validate(model.n_heads);
  if (train.seq_len > model.max_seq_len) {
    throw ConfigError("train.seq_len " + std::to_string(train.seq_len) + " exceeds model.max_seq_len " +
                      std::to_string(model.max_seq_len));
  }
}

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(std::string_view v, std::size_t line) {
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'')) {
    if (v.back() != v.front()) throw ConfigError("line " + std::to_string(line) + ": unterminated string");
    return std::string(v.substr(1, v.size() - 2));
  }
  return std::string(v);
}

/// Drops a trailing `# comment` that sits outside quotes.
std::string_view strip_comment(std::string_view line) {
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quote) {
      if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

void flatten(const nlohmann::json& j, const std::string& prefix, ConfigMap& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten(*it, key, out);
    } else if (it->is_string()) {
      out[key] = it->get<std::string>();
    } else if (it->is_primitive()) {
      out[key] = it->dump();
    } else {
      throw ConfigError("config key '" + key + "': arrays are not supported");
    }
  }
}

template <typename Int>
Int parse_uint(std::string_view key, std::string_view v) {
  Int out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + std::string(key) + "': expected a non-negative integer, got '" +
                      std::string(v) + "'");
  }
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(std::string(v), &used);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + std::string(key) + "': expected a number, got '" + std::string(v) + "'");
  }
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true or false, got '" + std::string(v) + "'");
}

}  // namespace

ConfigMap parse_config_text(std::string_view text) {
  ConfigMap out;
  const std::string_view body = trim(text);
  if (!body.empty() && body.front() == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config JSON: ") + e.what());
    }
    flatten(j, "", out);
    return out;
  }
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string_view line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": bad section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    out[section.empty() ? key : section + "." + key] = unquote(trim(line.substr(eq + 1)), line_no);
  }
  return out;
}

ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ConfigMap m = parse_config_text(text);
  auto it = m.find("train.corpus");
  if (it != m.end() && !it->second.empty()) {
    const std::filesystem::path p(it->second);
    if (p.is_relative()) {
      it->second = (std::filesystem::path(path).parent_path() / p).lexically_normal().string();
    }
  }
  return m;
}

std::pair<std::string, std::string> parse_override(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(text) + "' is not of the form key=value");
  }
  return {std::string(trim(text.substr(0, eq))), unquote(trim(text.substr(eq + 1)), 0)};
}

void apply_setting(RunConfig& c, std::string_view key, std::string_view value) {
  ModelConfig& m = c.model;
  TrainConfig& t = c.train;
  auto size = [&] { return parse_uint<std::size_t>(key, value); };
  auto u64 = [&] { return parse_uint<std::uint64_t>(key, value); };
  auto num = [&] { return parse_double(key, value); };
  try {
    if (key == "variant" || key == "model.variant") m.variant = parse_variant(value);
    else if (key == "seed") m.seed = t.seed = u64();
    else if (key == "model.vocab_size") m.vocab_size = size();
    else if (key == "model.d_model") m.d_model = size();
    else if (key == "model.n_layers") m.n_layers = size();
    else if (key == "model.n_heads") m.n_heads = size();
    else if (key == "model.mlp_hidden") m.mlp_hidden = size();
    else if (key == "model.max_seq_len") m.max_seq_len = size();
    else if (key == "model.seed") m.seed = u64();
    else if (key == "train.steps") t.steps = size();
    else if (key == "train.batch_size") t.batch_size = size();
    else if (key == "train.seq_len") t.seq_len = size();
    else if (key == "train.lr_peak") t.lr_peak = num();
    else if (key == "train.decay_frac") t.decay_frac = num();
    else if (key == "train.weight_decay") t.weight_decay = num();
    else if (key == "train.grad_clip") t.grad_clip = num();
    else if (key == "train.beta1") t.beta1 = num();
    else if (key == "train.beta2") t.beta2 = num();
    else if (key == "train.adam_eps") t.adam_eps = num();
    else if (key == "train.eval_every") t.eval_every = size();
    else if (key == "train.seed") t.seed = u64();
    else if (key == "train.corpus") t.corpus = std::string(value);
    else if (key == "train.valid_frac") t.valid_frac = num();
    else if (key == "balance.mode") t.balance.mode = parse_balance_mode(value);
    else if (key == "balance.lambda") t.balance.lambda = num();
    else if (key == "balance.m") t.balance.m = size();
    else if (key == "log.wall_clock") t.wall_clock = parse_bool(key, value);
    else throw ConfigError("unknown config key '" + std::string(key) + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

RunConfig resolve_config(const ConfigMap& base, std::span<const std::string> overrides,
                         const RunConfig& defaults) {
  RunConfig c = defaults;
  for (const auto& [k, v] : base) apply_setting(c, k, v);
  for (const auto& o : overrides) {
    const auto [k, v] = parse_override(o);
    apply_setting(c, k, v);
  }
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  const ModelConfig& m = c.model;
  const TrainConfig& t = c.train;
  j["model"] = {{"vocab_size", m.vocab_size}, {"d_model", m.d_model},
                {"n_layers", m.n_layers},     {"n_heads", m.n_heads},
                {"mlp_hidden", m.mlp_hidden}, {"max_seq_len", m.max_seq_len},
                {"variant", std::string(to_string(m.variant))}, {"seed", m.seed}};
  j["train"] = {{"steps", t.steps},           {"batch_size", t.batch_size},
                {"seq_len", t.seq_len},       {"lr_peak", t.lr_peak},
                {"decay_frac", t.decay_frac}, {"weight_decay", t.weight_decay},
                {"grad_clip", t.grad_clip},   {"beta1", t.beta1},
                {"beta2", t.beta2},           {"adam_eps", t.adam_eps},
                {"eval_every", t.eval_every}, {"seed", t.seed},
                {"corpus", t.corpus},         {"valid_frac", t.valid_frac}};
  j["balance"] = {{"mode", std::string(to_string(t.balance.mode))},
                  {"lambda", t.balance.lambda},
                  {"m", t.balance.m}};
  j["log"] = {{"wall_clock", t.wall_clock}};
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  ConfigMap flat;
  flatten(j, "", flat);
  RunConfig c;
  for (const auto& [k, v] : flat) apply_setting(c, k, v);
  return c;
}

}  // namespace smoe
