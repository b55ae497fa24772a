#pragma once

// Checkpoint directory: manifest.json (names, shapes, dtype, step, config,
// vocabulary, optimizer and sampler state) plus one raw little-endian
// float32 file per tensor.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "evcmf/training.hpp"

namespace evcmf {

namespace detail {

inline void write_f32(const std::filesystem::path& path, std::span<const float> values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &values[i], 4);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xff);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw InputError("write failed for " + path.string());
}

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("missing tensor file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() != count * 4) {
    throw FormatError(path.string() + ": expected " + std::to_string(count * 4) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    std::memcpy(&out[i], &u, 4);
  }
  return out;
}

}  // namespace detail

/// Everything needed to resume training or run generation.
struct Checkpoint {
  RunConfig config;
  Vocabulary vocabulary;
  ParamStore<float> params;
  std::size_t step = 0;
  std::size_t total_steps = 0;
  std::size_t optimizer_steps = 0;
  std::vector<std::vector<float>> first_moments;
  std::vector<std::vector<float>> second_moments;
  std::string rng_state;
  nlohmann::json sampler_state = nlohmann::json::object();
};

inline void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config, const Vocabulary& vocab,
                            const ParamStore<float>& params, const AdamW<float>* optimizer, std::size_t step,
                            std::size_t total_steps, const std::string& rng_state,
                            const nlohmann::json& sampler_state = nlohmann::json::object()) {
  std::filesystem::create_directories(dir / "tensors");
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    const auto& t = params.tensor(i);
    const std::string file = "tensors/" + name + ".bin";
    detail::write_f32(dir / file, t.data());
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
  }
  nlohmann::json opt = nullptr;
  if (optimizer && optimizer->steps() > 0) {
    nlohmann::json moments = nlohmann::json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& name = params.names()[i];
      const std::string f1 = "tensors/adam_m." + name + ".bin";
      const std::string f2 = "tensors/adam_v." + name + ".bin";
      detail::write_f32(dir / f1, optimizer->first_moments()[i]);
      detail::write_f32(dir / f2, optimizer->second_moments()[i]);
      moments.push_back({{"name", name}, {"first", f1}, {"second", f2}});
    }
    opt = {{"steps", optimizer->steps()},
           {"beta1", optimizer->beta1},
           {"beta2", optimizer->beta2},
           {"eps", optimizer->eps},
           {"moments", moments}};
  }
  nlohmann::json manifest{{"format", "evcmf-checkpoint"},
                          {"version", 1},
                          {"dtype", "float32"},
                          {"step", step},
                          {"total_steps", total_steps},
                          {"config", to_json(config)},
                          {"vocabulary", vocab.tokens()},
                          {"tensors", tensors},
                          {"optimizer", opt},
                          {"rng_state", rng_state},
                          {"sampler", sampler_state}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw InputError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw InputError("checkpoint manifest not found: " + path.string());
  Checkpoint ck;
  try {
    const auto j = nlohmann::json::parse(is);
    if (j.at("format") != "evcmf-checkpoint") throw FormatError(path.string() + ": not an evcmf checkpoint");
    if (j.at("dtype") != "float32") throw FormatError(path.string() + ": unsupported dtype");
    ck.config = run_config_from_json(j.at("config"));
    ck.vocabulary = Vocabulary::from_tokens(j.at("vocabulary").get<std::vector<std::string>>());
    ck.step = j.at("step").get<std::size_t>();
    ck.total_steps = j.at("total_steps").get<std::size_t>();
    for (const auto& t : j.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      auto values = detail::read_f32(dir / t.at("file").get<std::string>(), element_count(shape));
      ck.params.add(t.at("name").get<std::string>(), Tensor<float>::from_data(shape, std::move(values), true));
    }
    const auto& opt = j.at("optimizer");
    if (!opt.is_null()) {
      ck.optimizer_steps = opt.at("steps").get<std::size_t>();
      const auto& moments = opt.at("moments");
      if (moments.size() != ck.params.size()) throw FormatError(path.string() + ": optimizer moment count mismatch");
      for (std::size_t i = 0; i < moments.size(); ++i) {
        const auto n = ck.params.tensor(i).size();
        ck.first_moments.push_back(detail::read_f32(dir / moments[i].at("first").get<std::string>(), n));
        ck.second_moments.push_back(detail::read_f32(dir / moments[i].at("second").get<std::string>(), n));
      }
    }
    ck.rng_state = j.at("rng_state").get<std::string>();
    if (j.contains("sampler")) ck.sampler_state = j.at("sampler");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace evcmf
