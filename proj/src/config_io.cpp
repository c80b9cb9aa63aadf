#include "ms2tan/config_io.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace ms2tan {

using nlohmann::ordered_json;

ModelConfig model_preset(const std::string& name) {
  if (name == "ms2tan") return presets::ms2tan();
  if (name == "ms2tan-l") return presets::ms2tan_l();
  if (name == "ms2tan-s") return presets::ms2tan_s();
  if (name == "toy") return presets::toy();
  throw ConfigError("unknown model preset '" + name + "'");
}

bool is_model_preset(const std::string& name) {
  return name == "ms2tan" || name == "ms2tan-l" || name == "ms2tan-s" || name == "toy";
}

std::string model_config_to_json(const ModelConfig& config, int indent) {
  ordered_json j;
  j["scales"] = ordered_json::array();
  for (const auto& s : config.scales)
    j["scales"].push_back({{"P", s.patch}, {"d_emb", s.d_emb}, {"h", s.heads}, {"d_qkv", s.d_qkv}, {"L", s.layers}});
  j["bands"] = config.bands;
  j["c_max"] = config.c_max;
  j["loss_weights"] = {config.loss_weights.pixel, config.loss_weights.structural, config.loss_weights.perceptual};
  j["mask_mode"] = config.mask_mode == MaskMode::Key ? "key" : "query";
  j["ffn_multiplier"] = config.ffn_multiplier;
  j["seed"] = config.seed;
  j["feature_seed"] = config.feature_seed;
  j["strict_scale_order"] = config.strict_scale_order;
  return j.dump(indent);
}

ModelConfig model_config_from_json(const std::string& text) {
  static const std::set<std::string> known = {"preset",         "scales", "bands",        "c_max",
                                              "loss_weights",   "mask_mode", "ffn_multiplier", "seed",
                                              "feature_seed",   "strict_scale_order"};
  ModelConfig c;
  try {
    const auto j = ordered_json::parse(text);
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    for (const auto& [key, _] : j.items())
      if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");
    if (j.contains("preset")) c = model_preset(j["preset"].get<std::string>());
    if (j.contains("scales")) {
      c.scales.clear();
      for (const auto& s : j["scales"])
        c.scales.push_back({s.at("P").get<Index>(), s.at("d_emb").get<Index>(), s.at("h").get<Index>(),
                            s.at("d_qkv").get<Index>(), s.at("L").get<Index>()});
    }
    if (j.contains("bands")) c.bands = j["bands"].get<Index>();
    if (j.contains("c_max")) c.c_max = j["c_max"].get<double>();
    if (j.contains("loss_weights")) {
      const auto& w = j["loss_weights"];
      if (!w.is_array() || w.size() != 3) throw ConfigError("loss_weights must hold three numbers");
      c.loss_weights = {w[0].get<double>(), w[1].get<double>(), w[2].get<double>()};
    }
    if (j.contains("mask_mode")) {
      const auto mode = j["mask_mode"].get<std::string>();
      if (mode != "key" && mode != "query") throw ConfigError("mask_mode must be key or query");
      c.mask_mode = mode == "key" ? MaskMode::Key : MaskMode::Query;
    }
    if (j.contains("ffn_multiplier")) c.ffn_multiplier = j["ffn_multiplier"].get<Index>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("feature_seed")) c.feature_seed = j["feature_seed"].get<std::uint64_t>();
    if (j.contains("strict_scale_order")) c.strict_scale_order = j["strict_scale_order"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ModelConfig load_model_config(const std::string& spec) {
  if (is_model_preset(spec)) return model_preset(spec);
  return model_config_from_json(read_text_file(spec));
}

ModelConfig load_model_config(const std::string& spec, Index bands) {
  if (is_model_preset(spec)) {
    ModelConfig c = model_preset(spec);
    c.bands = bands;
    return c;
  }
  const std::string text = read_text_file(spec);
  ModelConfig c = model_config_from_json(text);
  bool explicit_bands = false;
  try {
    explicit_bands = ordered_json::parse(text).contains("bands");
  } catch (const nlohmann::json::exception&) {
  }
  if (!explicit_bands) c.bands = bands;
  c.validate();
  return c;
}

}  // namespace ms2tan
