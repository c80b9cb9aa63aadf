#pragma once

#include <filesystem>
#include <string>

#include "ms2tan/types.hpp"

namespace ms2tan {

/// Known preset names: ms2tan, ms2tan-l, ms2tan-s, toy.
ModelConfig model_preset(const std::string& name);
bool is_model_preset(const std::string& name);

std::string model_config_to_json(const ModelConfig& config, int indent = 2);

/// Accepts {"preset": name, ...overrides} or a full {"scales": [...], ...} object.
/// Scale entries use keys P, d_emb, h, d_qkv, L.
ModelConfig model_config_from_json(const std::string& text);

/// `spec` is either a preset name or a path to a JSON file.
ModelConfig load_model_config(const std::string& spec);

/// As above, but `bands` replaces the band count unless the JSON file sets "bands" itself.
ModelConfig load_model_config(const std::string& spec, Index bands);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace ms2tan
