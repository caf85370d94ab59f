#pragma once

// Encoder checkpoints as JSON. Doubles are written in shortest round-trip
// form, so load(save(m)) reproduces every parameter bit for bit.

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "parasent/corpus.hpp"
#include "parasent/encoder.hpp"
#include "parasent/errors.hpp"
#include "parasent/json_util.hpp"

namespace parasent {

inline constexpr const char* kCheckpointFormat = "parasent-encoder";
inline constexpr int kCheckpointVersion = 1;

inline Json encoder_config_to_json(const EncoderConfig& c) {
  return Json{{"embed_dim", c.embed_dim}, {"num_blocks", c.num_blocks}, {"ffn_dim", c.ffn_dim},
              {"pooling", to_string(c.pooling)}, {"lstm_hidden", c.lstm_hidden}, {"max_len", c.max_len}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline EncoderConfig encoder_config_from_json(const Json& j, const std::string& context, EncoderConfig c = {}) {
  StrictObject o(j, context);
  o.read("embed_dim", c.embed_dim);
  o.read("num_blocks", c.num_blocks);
  o.read("ffn_dim", c.ffn_dim);
  if (o.has("pooling")) {
    try {
      c.pooling = parse_pooling(o.require<std::string>("pooling"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(context + ".pooling: " + e.what());
    }
  }
  o.read("lstm_hidden", c.lstm_hidden);
  o.read("max_len", c.max_len);
  o.finish();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(context + ": " + e.what());
  }
  return c;
}

inline Json model_to_json(const EncoderModel& model) {
  Json params = Json::object();
  model.params.for_each([&](const std::string& name, const Matrix& m) {
    if (!all_finite(m.values())) throw DivergenceError("checkpoint: non-finite values in " + name);
    params[name] = Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.values().begin(), m.values().end())}};
  });
  return Json{{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"config", encoder_config_to_json(model.config)},
              {"vocabulary", model.vocab.tokens()},
              {"parameters", std::move(params)}};
}

inline EncoderModel model_from_json(const Json& j) {
  StrictObject o(j, "checkpoint");
  if (o.require<std::string>("format") != kCheckpointFormat) throw ConfigError("checkpoint: unrecognized format");
  if (o.require<int>("version") != kCheckpointVersion) throw ConfigError("checkpoint: unsupported version");
  const auto config = encoder_config_from_json(o.at("config"), "checkpoint.config");
  std::vector<std::string> tokens;
  try {
    tokens = o.at("vocabulary").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint.vocabulary: ") + e.what());
  }
  Vocabulary vocab;
  try {
    vocab = Vocabulary(std::move(tokens));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("checkpoint.vocabulary: ") + e.what());
  }
  // Allocate shapes from the config, then overwrite every tensor.
  EncoderModel model = init_model(config, std::move(vocab), SeededRng(0));
  StrictObject params(o.at("parameters"), "checkpoint.parameters");
  model.params.for_each([&](const std::string& name, Matrix& m) {
    StrictObject t(params.at(name), params.path(name));
    const auto rows = t.require<std::size_t>("rows");
    const auto cols = t.require<std::size_t>("cols");
    if (rows != m.rows() || cols != m.cols()) {
      throw ConfigError(params.path(name) + ": shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " does not match config (" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")");
    }
    const auto data = t.require<std::vector<double>>("data");
    if (data.size() != m.size()) throw ConfigError(params.path(name) + ": wrong number of values");
    if (!all_finite(data)) throw ConfigError(params.path(name) + ": non-finite value");
    std::copy(data.begin(), data.end(), m.values().begin());
    t.finish();
  });
  params.finish();
  o.finish();
  return model;
}

inline void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << model_to_json(model).dump() << '\n';
  out.flush();
  if (!out) throw IoError("write failure: " + path.string());
}

inline EncoderModel load_checkpoint(const std::filesystem::path& path) {
  auto in = open_input(path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed checkpoint: " + e.what());
  }
  try {
    return model_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace parasent
