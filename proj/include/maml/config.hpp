#pragma once

#include <optional>
#include <string>

#include "json.hpp"
#include "maml/engine.hpp"

namespace maml {

// Everything one run needs: the model, the training recipe, and exactly one
// data source (a synthetic recipe or a manifest of volumes on disk).
struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    std::optional<SynthSpec> synth;
    std::string dataset_manifest;
    std::string output_dir;
};

nlohmann::ordered_json to_json(const BackboneConfig& cfg);
nlohmann::ordered_json to_json(const FusionConfig& cfg);
nlohmann::ordered_json to_json(const ModelConfig& cfg);
nlohmann::ordered_json to_json(const TrainConfig& cfg);
nlohmann::ordered_json to_json(const SynthSpec& spec);
nlohmann::ordered_json to_json(const ExperimentConfig& cfg);

BackboneConfig backbone_config_from_json(const nlohmann::ordered_json& j);
FusionConfig fusion_config_from_json(const nlohmann::ordered_json& j);
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);
TrainConfig train_config_from_json(const nlohmann::ordered_json& j);
SynthSpec synth_spec_from_json(const nlohmann::ordered_json& j);
ExperimentConfig experiment_from_json(const nlohmann::ordered_json& j);

// Parse errors, unknown keys, wrong types and inconsistent settings all
// surface as ConfigError.
ExperimentConfig load_experiment_config(const std::string& path);

void validate_experiment(const ExperimentConfig& cfg);

}  // namespace maml
