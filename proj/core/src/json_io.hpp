#pragma once

#include "json.hpp"
#include "lungtriage/config.hpp"

namespace lungtriage::detail {

using Json = nlohmann::ordered_json;

Json policy_to_json(const AugmentationPolicy& p);
AugmentationPolicy policy_from_json(const nlohmann::json& j);
Json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
Json classifier_config_to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);
Json segmenter_config_to_json(const SegmenterConfig& c);
SegmenterConfig segmenter_config_from_json(const nlohmann::json& j);

}  // namespace lungtriage::detail
