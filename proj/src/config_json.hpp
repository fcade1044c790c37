#pragma once

#include <json.hpp>

#include "revattn/model.hpp"

namespace revattn {

nlohmann::json config_to_json(const ModelConfig& c);
// Throws json exceptions on missing keys and InvalidConfig on bad values.
ModelConfig config_from_json(const nlohmann::json& j);

}  // namespace revattn
