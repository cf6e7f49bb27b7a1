#include "smoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

namespace smoe {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace {

template <typename Int>
void put(std::string& out, Int v) {
  char buf[sizeof(Int)];
  std::memcpy(buf, &v, sizeof(Int));
  out.append(buf, sizeof(Int));
}

template <typename Int>
Int get(const std::string& in, std::size_t& pos, const char* what) {
  if (in.size() - pos < sizeof(Int)) throw CheckpointError(std::string("checkpoint truncated in ") + what);
  Int v;
  std::memcpy(&v, in.data() + pos, sizeof(Int));
  pos += sizeof(Int);
  return v;
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

}  // namespace

std::string serialize_checkpoint(const TrainState& state, const RunConfig& config) {
  const auto& params = state.model.params;
  if (state.adam.m.size() != params.size() || state.adam.v.size() != params.size()) {
    throw CheckpointError("checkpoint: optimizer state does not match the parameters");
  }
  RunConfig snapshot = config;
  snapshot.model = state.model.config;

  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  auto entry = [&](const std::string& name, const Tensor<float>& t) {
    dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  };
  for (std::size_t i = 0; i < params.size(); ++i) entry(state.model.names[i], params[i]);
  for (std::size_t i = 0; i < params.size(); ++i) entry("adam.m." + state.model.names[i], state.adam.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) entry("adam.v." + state.model.names[i], state.adam.v[i]);

  nlohmann::ordered_json header;
  header["config"] = to_json(snapshot);
  header["step"] = state.step;
  header["adam_t"] = state.adam.t;
  header["rng"] = rng_state(state.rng);
  header["shared_heads"] = state.shared;
  header["tensors"] = dir;
  header["payload_bytes"] = offset;
  const std::string text = header.dump();

  std::string out;
  out.reserve(16 + text.size() + offset);
  out.append(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  auto raw = [&](const Tensor<float>& t) {
    out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(float));
  };
  for (const auto& p : params) raw(p);
  for (const auto& m : state.adam.m) raw(m);
  for (const auto& v : state.adam.v) raw(v);
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4) throw CheckpointError("checkpoint truncated before the magic bytes");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("bad checkpoint magic: expected 'SMOE', found '" + bytes.substr(0, 4) + "'");
  }
  std::size_t pos = 4;
  const auto version = get<std::uint32_t>(bytes, pos, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get<std::uint64_t>(bytes, pos, "header length");
  if (bytes.size() - pos < header_len) throw CheckpointError("checkpoint truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }
  pos += header_len;

  Checkpoint ck;
  try {
    ck.config = run_config_from_json(header.at("config"));
    ck.config.model.validate();
    ck.state.model = Model<float>::zeros(ck.config.model);
    ck.state.adam = AdamState<float>::like(ck.state.model.params);
    ck.state.step = header.at("step").get<std::size_t>();
    ck.state.adam.t = header.at("adam_t").get<std::uint64_t>();
    std::istringstream rng(header.at("rng").get<std::string>());
    rng >> ck.state.rng;
    if (!rng) throw CheckpointError("checkpoint RNG state is malformed");
    ck.state.shared = header.at("shared_heads").get<HeadSets>();
    const auto payload = header.at("payload_bytes").get<std::uint64_t>();
    if (bytes.size() - pos != payload) {
      throw CheckpointError("checkpoint payload holds " + std::to_string(bytes.size() - pos) +
                            " bytes, header declares " + std::to_string(payload));
    }

    const auto& dir = header.at("tensors");
    const std::size_t n = ck.state.model.params.size();
    if (dir.size() != 3 * n) throw CheckpointError("checkpoint tensor directory does not match the model");
    for (std::size_t i = 0; i < 3 * n; ++i) {
      Tensor<float>& dst = i < n ? ck.state.model.params[i]
                                 : (i < 2 * n ? ck.state.adam.m[i - n] : ck.state.adam.v[i - 2 * n]);
      const std::string& base = ck.state.model.names[i % n];
      const std::string expect = i < n ? base : (i < 2 * n ? "adam.m." : "adam.v.") + base;
      const auto& e = dir[i];
      if (e.at("name").get<std::string>() != expect || e.at("shape").get<Shape>() != dst.shape()) {
        throw CheckpointError("checkpoint tensor " + std::to_string(i) + " is not '" + expect + "' " +
                              shape_str(dst.shape()));
      }
      const auto off = e.at("offset").get<std::uint64_t>();
      const std::size_t len = dst.size() * sizeof(float);
      if (off > payload || payload - off < len) throw CheckpointError("checkpoint tensor '" + expect + "' overruns payload");
      std::memcpy(dst.data().data(), bytes.data() + pos + off, len);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  return ck;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, target);
}

void save_checkpoint(const TrainState& state, const RunConfig& config, const std::string& path) {
  write_file_atomic(path, serialize_checkpoint(state, config));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace smoe
