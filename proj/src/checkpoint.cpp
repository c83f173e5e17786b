#include "entro/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "entro/wire.hpp"

namespace entro {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const std::streamoff n = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> data(static_cast<size_t>(n));
  in.read(reinterpret_cast<char*>(data.data()), n);
  if (!in) throw FormatError("short read on '" + path + "'");
  return data;
}

}  // namespace

void save_checkpoint(const std::string& path, SplitModel& model, const nlohmann::json& meta) {
  const ModelConfig& cfg = model.config();
  nlohmann::json header;
  header["config"] = {
      {"prior", prior_name(cfg.prior)},
      {"beta", cfg.beta},
      {"latent_channels", cfg.latent_channels},
      {"hyper_channels", cfg.hyper_channels},
      {"sigma_floor", cfg.sigma_floor},
      {"likelihood_floor", cfg.likelihood_floor},
  };
  header["meta"] = meta;
  const std::string js = header.dump();

  std::vector<uint8_t> out;
  for (char c : {'E', 'N', 'T', 'C'}) out.push_back(static_cast<uint8_t>(c));
  wire::put_u8(out, 1);
  wire::put_u32(out, static_cast<uint32_t>(js.size()));
  out.insert(out.end(), js.begin(), js.end());

  auto params = model.named_parameters();
  wire::put_u32(out, static_cast<uint32_t>(params.size()));
  for (auto& [name, t] : params) {
    if (t->size() == 0) throw ValueError("save_checkpoint: parameter '" + name + "' is uninitialized");
    wire::put_u16(out, static_cast<uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    wire::put_u8(out, static_cast<uint8_t>(t->rank()));
    for (int d : t->shape()) wire::put_u32(out, static_cast<uint32_t>(d));
    for (float v : t->values()) wire::put_f32(out, v);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("short write on '" + path + "'");
}

SplitModel load_checkpoint(const std::string& path, nlohmann::json* meta_out) {
  const std::vector<uint8_t> data = read_file(path);
  wire::Reader r(data.data(), data.size());
  const uint8_t* magic = r.bytes(4);
  if (std::memcmp(magic, "ENTC", 4) != 0) throw FormatError("bad magic, not a checkpoint: " + path);
  const uint8_t version = r.u8();
  if (version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(version));

  const uint32_t jlen = r.u32();
  const uint8_t* jp = r.bytes(jlen);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(jp, jp + jlen);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.contains("config")) throw FormatError("checkpoint header missing config");
  const auto& jc = header["config"];

  ModelConfig cfg;
  try {
    cfg.prior = prior_from_name(jc.at("prior").get<std::string>());
    cfg.beta = jc.at("beta").get<float>();
    cfg.latent_channels = jc.at("latent_channels").get<int>();
    cfg.hyper_channels = jc.at("hyper_channels").get<int>();
    cfg.sigma_floor = jc.at("sigma_floor").get<float>();
    cfg.likelihood_floor = jc.at("likelihood_floor").get<float>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config malformed: ") + e.what());
  }
  if (cfg.latent_channels < 1 || cfg.hyper_channels < 1)
    throw FormatError("checkpoint config has non-positive channel counts");

  // Build the architecture to get authoritative shapes, then overwrite.
  SplitModel model(cfg);
  Rng rng(0);
  model.init(rng);

  auto params = model.named_parameters();
  const uint32_t count = r.u32();
  if (count != params.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                      std::to_string(params.size()));
  for (auto& [name, t] : params) {
    const uint16_t nlen = r.u16();
    const uint8_t* np = r.bytes(nlen);
    const std::string stored(reinterpret_cast<const char*>(np), nlen);
    if (stored != name)
      throw FormatError("checkpoint tensor '" + stored + "' where '" + name + "' was expected");
    const uint8_t rank = r.u8();
    if (rank != static_cast<uint8_t>(t->rank()))
      throw FormatError("checkpoint tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (int i = 0; i < rank; ++i) shape[static_cast<size_t>(i)] = static_cast<int>(r.u32());
    if (shape != t->shape())
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                        ", model wants " + shape_str(t->shape()));
    auto& vals = t->mutable_values();
    for (auto& v : vals) v = r.f32();
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint payload");

  if (meta_out) *meta_out = header;
  return model;
}

}  // namespace entro
