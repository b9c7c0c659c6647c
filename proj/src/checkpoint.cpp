#include <cstring>
#include <fstream>

#include "binio.hpp"
#include "cdepth/trainer.hpp"

namespace cdepth {
namespace {

void put_array(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  binio::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  binio::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (Index d : t.shape) binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  binio::put_array(os, t.ptr(), static_cast<std::size_t>(t.size()));
}

std::pair<std::string, Tensor<float>> get_array(std::istream& is) {
  const auto len = binio::get<std::uint16_t>(is, "checkpoint array name");
  std::string name(len, '\0');
  binio::read_exact(is, name.data(), len, "checkpoint array name");
  const auto rank = binio::get<std::uint8_t>(is, "checkpoint array '" + name + "'");
  Shape shape;
  for (int i = 0; i < rank; ++i) {
    const auto d = binio::get<std::uint32_t>(is, "checkpoint array '" + name + "'");
    if (d == 0) throw FormatError(FormatError::Kind::kCorrupt, "checkpoint array '" + name + "' has a zero dimension");
    shape.push_back(d);
  }
  Tensor<float> t(shape);
  binio::read_exact(is, t.ptr(), sizeof(float) * static_cast<std::size_t>(t.size()), "checkpoint array '" + name + "'");
  return {std::move(name), std::move(t)};
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto& params = ck.state.params.entries;
  if (ck.state.adam.slots.size() != params.size()) throw ContractError("save_checkpoint: optimizer state misaligned");
  nlohmann::json meta{{"config", to_json(ck.config)}, {"vocab", ck.vocab.tokens()}};
  std::vector<std::uint64_t> adam_steps;
  for (const auto& s : ck.state.adam.slots) adam_steps.push_back(s.t);
  meta["adam_steps"] = adam_steps;
  const std::string meta_text = meta.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "' for writing");
  os.write(kCheckpointMagic, 4);
  binio::put<std::uint16_t>(os, kCheckpointVersion);
  binio::put<std::uint64_t>(os, ck.state.step);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(meta_text.size()));
  os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(3 * params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    put_array(os, params[i].name, params[i].value);
    put_array(os, "adam.m/" + params[i].name, ck.state.adam.slots[i].m);
    put_array(os, "adam.v/" + params[i].name, ck.state.adam.slots[i].v);
  }
  if (!os) throw FormatError(FormatError::Kind::kIo, "write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "'");
  char magic[4];
  binio::read_exact(is, magic, 4, "checkpoint header");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(FormatError::Kind::kBadMagic, "not a checkpoint (bad magic)");
  const auto version = binio::get<std::uint16_t>(is, "checkpoint header");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kBadVersion, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.state.step = binio::get<std::uint64_t>(is, "checkpoint header");
  const auto meta_len = binio::get<std::uint32_t>(is, "checkpoint header");
  std::string meta_text(meta_len, '\0');
  binio::read_exact(is, meta_text.data(), meta_len, "checkpoint metadata");
  std::vector<std::uint64_t> adam_steps;
  try {
    const auto meta = nlohmann::json::parse(meta_text);
    ck.config = train_config_from_json(meta.at("config"));
    ck.vocab = Vocabulary(meta.at("vocab").get<std::vector<std::string>>());
    adam_steps = meta.at("adam_steps").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kCorrupt, std::string("bad checkpoint metadata: ") + e.what());
  }

  const auto count = binio::get<std::uint32_t>(is, "checkpoint header");
  std::map<std::string, Tensor<float>> arrays;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (binio::at_eof(is)) throw FormatError(FormatError::Kind::kCountMismatch, "checkpoint holds fewer arrays than declared");
    auto [name, t] = get_array(is);
    arrays.emplace(std::move(name), std::move(t));
  }
  if (!binio::at_eof(is)) throw FormatError(FormatError::Kind::kCountMismatch, "trailing data after checkpoint arrays");

  const auto layout = parameter_layout(ck.config.model);
  if (adam_steps.size() != layout.size()) throw FormatError(FormatError::Kind::kCorrupt, "optimizer step list misaligned");
  const auto take = [&](const std::string& name, const Shape& shape) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw FormatError(FormatError::Kind::kCorrupt, "checkpoint is missing array '" + name + "'");
    if (it->second.shape != shape) throw FormatError(FormatError::Kind::kCorrupt, "checkpoint array '" + name + "' has the wrong shape");
    return std::move(it->second);
  };
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& spec = layout[i];
    ck.state.params.entries.push_back({spec.name, spec.group, take(spec.name, spec.shape)});
    AdamSlot<float> slot;
    slot.m = take("adam.m/" + spec.name, spec.shape);
    slot.v = take("adam.v/" + spec.name, spec.shape);
    slot.t = adam_steps[i];
    ck.state.adam.slots.push_back(std::move(slot));
  }
  return ck;
}

}  // namespace cdepth
