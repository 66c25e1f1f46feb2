#include "conceptvae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "conceptvae/errors.hpp"

namespace cvae {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated checkpoint " + path);
  return v;
}

}  // namespace

void write_tensor_container(const std::string& path, const nlohmann::json& header, const NamedTensors& tensors) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    const auto text = header.dump();
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint64_t>(out, tensors.size());
    for (const auto& [name, tensor] : tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      const auto t = tensor.detach().to(torch::kFloat32).contiguous();
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
      for (auto d : t.sizes()) put<std::int64_t>(out, d);
      out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

std::pair<nlohmann::json, NamedTensors> read_tensor_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw IoError(path + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  const auto header_len = get<std::uint64_t>(in, path);
  if (header_len > (1ULL << 30)) throw IoError("corrupt checkpoint header in " + path);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("truncated checkpoint " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path + ": " + e.what());
  }
  const auto count = get<std::uint64_t>(in, path);
  NamedTensors tensors;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto name_len = get<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto ndim = get<std::uint32_t>(in, path);
    if (ndim > 8) throw IoError("corrupt tensor record '" + name + "' in " + path);
    std::vector<std::int64_t> dims(ndim);
    for (auto& d : dims) d = get<std::int64_t>(in, path);
    auto t = torch::empty(dims, torch::kFloat32);
    in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in) throw IoError("truncated tensor '" + name + "' in " + path);
    tensors.emplace_back(std::move(name), std::move(t));
  }
  return {header, tensors};
}

void assign_named_state(torch::nn::Module& module, const NamedTensors& values, const std::string& prefix) {
  std::map<std::string, const torch::Tensor*> lookup;
  for (const auto& [name, t] : values)
    if (name.rfind(prefix, 0) == 0) lookup[name.substr(prefix.size())] = &t;
  torch::NoGradGuard no_grad;
  for (auto& [name, target] : named_state(module)) {
    auto it = lookup.find(name);
    if (it == lookup.end()) throw IoError("checkpoint lacks tensor '" + prefix + name + "'");
    if (!it->second->sizes().equals(target.sizes()))
      throw IoError("checkpoint tensor '" + prefix + name + "' has the wrong shape");
    target.copy_(*it->second);
    lookup.erase(it);
  }
  if (!lookup.empty()) throw IoError("checkpoint has unexpected tensor '" + prefix + lookup.begin()->first + "'");
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  if (!ckpt.model || !ckpt.ema) throw ConfigError("save_checkpoint needs a model and its EMA mirror");
  nlohmann::json header{{"model_config", ckpt.model_config},
                        {"train_config", ckpt.train_config},
                        {"step", ckpt.step},
                        {"metadata", ckpt.metadata}};
  NamedTensors tensors;
  for (auto& [name, t] : named_state(*ckpt.model.ptr())) tensors.emplace_back("online/" + name, t);
  for (auto& [name, t] : named_state(*ckpt.ema.ptr())) tensors.emplace_back("ema/" + name, t);
  for (const auto& entry : ckpt.optimizer_state) tensors.push_back(entry);
  write_tensor_container(path, header, tensors);
}

Checkpoint load_checkpoint(const std::string& path) {
  auto [header, tensors] = read_tensor_container(path);
  Checkpoint ckpt;
  try {
    ckpt.model_config = header.at("model_config").get<ModelConfig>();
    ckpt.train_config = header.at("train_config").get<TrainConfig>();
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.metadata = header.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint header of " + path + ": " + e.what());
  }
  ckpt.model_config.validate();
  ckpt.model = ConceptVAE(ckpt.model_config);
  ckpt.ema = EmaMirror(ckpt.model_config);
  NamedTensors online, ema;
  for (auto& entry : tensors) {
    if (entry.first.rfind("online/", 0) == 0) online.push_back(entry);
    else if (entry.first.rfind("ema/", 0) == 0) ema.push_back(entry);
    else if (entry.first.rfind("optim/", 0) == 0) ckpt.optimizer_state.push_back(entry);
    else throw IoError("unexpected tensor '" + entry.first + "' in " + path);
  }
  assign_named_state(*ckpt.model, online, "online/");
  assign_named_state(*ckpt.ema, ema, "ema/");
  return ckpt;
}

}  // namespace cvae
