#include "dectseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace dectseg {
namespace {

using nlohmann::json;

void put_u32(std::string& out, std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  out.append(reinterpret_cast<const char*>(&v), 4);
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    std::uint32_t v = 0;
    std::memcpy(&v, take(4), 4);
    if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
    return v;
  }
  std::string str(std::size_t n) { return std::string(take(n), n); }
  float f32() { return std::bit_cast<float>(u32()); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

json config_json(const UNetConfig& c) {
  return json{{"levels", c.levels}, {"base_channels", c.base_channels}, {"in_channels", c.in_channels},
              {"out_channels", c.out_channels}};
}

}  // namespace

std::string metadata_json(const CheckpointMeta& meta) {
  json j{{"config", config_json(meta.config)}, {"stage", meta.stage},       {"alpha_training", meta.alpha_training},
         {"iteration", meta.iteration},        {"loss_tail", meta.loss_tail}, {"seed", meta.seed}};
  return j.dump();
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string meta = metadata_json(checkpoint.meta);
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& t : checkpoint.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (Index e : t.shape) put_u32(out, static_cast<std::uint32_t>(e));
    if (static_cast<Index>(t.values.size()) != shape_numel(t.shape)) {
      throw ShapeError("checkpoint tensor '" + t.name + "' value count does not match its shape");
    }
    for (float v : t.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  Reader r(std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));

  if (r.str(4) != std::string(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  try {
    const json j = json::parse(r.str(r.u32()));
    const json& c = j.at("config");
    ck.meta.config = UNetConfig{c.at("levels").get<int>(), c.at("base_channels").get<int>(),
                                c.at("in_channels").get<int>(), c.at("out_channels").get<int>()};
    ck.meta.stage = j.at("stage").get<int>();
    ck.meta.alpha_training = j.at("alpha_training").get<double>();
    ck.meta.iteration = j.at("iteration").get<std::int64_t>();
    ck.meta.loss_tail = j.at("loss_tail").get<std::vector<double>>();
    ck.meta.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str(r.u32());
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t a = 0; a < ndim; ++a) t.shape.push_back(r.u32());
    const Index n = shape_numel(t.shape);
    t.values.resize(static_cast<std::size_t>(n));
    for (float& v : t.values) v = r.f32();
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const UNetConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.meta.config == expected)) {
    throw ConfigError("checkpoint config (" + to_string(ck.meta.config) + ") does not match expected (" +
                      to_string(expected) + ")");
  }
  return ck;
}

Checkpoint make_checkpoint(const UNet<float>& net, CheckpointMeta meta) {
  meta.config = net.config();
  return Checkpoint{std::move(meta), net.state()};
}

UNet<float> restore_network(const Checkpoint& checkpoint) {
  UNet<float> net(checkpoint.meta.config, 0);
  net.load_state(checkpoint.tensors);
  return net;
}

}  // namespace dectseg
