#pragma once

// Model persistence. A checkpoint is a small JSON blob (architecture config
// plus caller metadata) followed by named f32 tensors in a fixed order.

#include <string>

#include "json.hpp"

#include "entro/model.hpp"

namespace entro {

void save_checkpoint(const std::string& path, SplitModel& model,
                     const nlohmann::json& meta = nlohmann::json::object());

// Rebuilds the model from the stored config and weights. When meta_out is
// given it receives the full JSON header ("config" and "meta" keys).
SplitModel load_checkpoint(const std::string& path, nlohmann::json* meta_out = nullptr);

}  // namespace entro
