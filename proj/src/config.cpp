#include "maml/config.hpp"

#include <fstream>
#include <set>

#include "maml/errors.hpp"

namespace maml {

using nlohmann::ordered_json;

namespace {

void check_keys(const ordered_json& j, const char* where,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : allowed)
            if (item.key() == k) {
                known = true;
                break;
            }
        if (!known)
            throw ConfigError("unknown key \"" + item.key() + "\" in " + where);
    }
}

template <typename T>
T get_or(const ordered_json& j, const char* key, T fallback, const char* where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("bad value for \"") + key + "\" in " + where);
    }
}

template <typename T, size_t N>
std::array<T, N> get_array(const ordered_json& j, const char* key, std::array<T, N> fallback,
                           const char* where) {
    if (!j.contains(key)) return fallback;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != N)
        throw ConfigError(std::string("\"") + key + "\" in " + where + " must be an array of " +
                          std::to_string(N) + " numbers");
    std::array<T, N> out{};
    for (size_t i = 0; i < N; ++i) {
        try {
            out[i] = a.at(i).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(std::string("bad value for \"") + key + "\" in " + where);
        }
    }
    return out;
}

}  // namespace

ordered_json to_json(const BackboneConfig& cfg) {
    return ordered_json{{"levels", cfg.levels},
                        {"base_channels", cfg.base_channels},
                        {"feature_channels", cfg.feature_channels},
                        {"norm_epsilon", cfg.norm_epsilon},
                        {"leaky_slope", cfg.leaky_slope}};
}

BackboneConfig backbone_config_from_json(const ordered_json& j) {
    check_keys(j, "backbone",
               {"levels", "base_channels", "feature_channels", "norm_epsilon", "leaky_slope"});
    BackboneConfig cfg;
    cfg.levels = get_or(j, "levels", cfg.levels, "backbone");
    cfg.base_channels = get_or(j, "base_channels", cfg.base_channels, "backbone");
    cfg.feature_channels = get_or(j, "feature_channels", cfg.feature_channels, "backbone");
    cfg.norm_epsilon = get_or(j, "norm_epsilon", cfg.norm_epsilon, "backbone");
    cfg.leaky_slope = get_or(j, "leaky_slope", cfg.leaky_slope, "backbone");
    return cfg;
}

ordered_json to_json(const FusionConfig& cfg) {
    return ordered_json{{"dual_kernel", cfg.dual_kernel},
                        {"fa_mid_channels", cfg.fa_mid_channels}};
}

FusionConfig fusion_config_from_json(const ordered_json& j) {
    check_keys(j, "fusion", {"dual_kernel", "fa_mid_channels"});
    FusionConfig cfg;
    cfg.dual_kernel = get_or(j, "dual_kernel", cfg.dual_kernel, "fusion");
    cfg.fa_mid_channels = get_or(j, "fa_mid_channels", cfg.fa_mid_channels, "fusion");
    return cfg;
}

ordered_json to_json(const ModelConfig& cfg) {
    ordered_json mods = ordered_json::array();
    for (const auto& m : cfg.modalities) mods.push_back(m.name);
    return ordered_json{{"modalities", mods},
                        {"backbone", to_json(cfg.backbone)},
                        {"fusion", to_json(cfg.fusion)}};
}

ModelConfig model_config_from_json(const ordered_json& j) {
    check_keys(j, "model", {"modalities", "backbone", "fusion"});
    if (!j.contains("modalities")) throw ConfigError("model config requires \"modalities\"");
    const auto& mods = j.at("modalities");
    if (!mods.is_array()) throw ConfigError("\"modalities\" must be an array of names");
    ModelConfig cfg;
    for (const auto& m : mods) {
        if (!m.is_string()) throw ConfigError("\"modalities\" must be an array of names");
        cfg.modalities.push_back({m.get<std::string>()});
    }
    if (j.contains("backbone")) cfg.backbone = backbone_config_from_json(j.at("backbone"));
    if (j.contains("fusion")) cfg.fusion = fusion_config_from_json(j.at("fusion"));
    return cfg;
}

ordered_json to_json(const TrainConfig& cfg) {
    return ordered_json{
        {"lr", cfg.lr},
        {"epochs", cfg.epochs},
        {"batch_size", cfg.batch_size},
        {"lambda", cfg.lambda},
        {"patch",
         ordered_json{{"size", cfg.patch.size}, {"foreground_bias", cfg.patch.foreground_bias}}},
        {"seed", cfg.seed},
        {"deterministic", cfg.deterministic},
        {"augment", cfg.augment},
        {"eval_every", cfg.eval_every},
        {"early_stop_dice", cfg.early_stop_dice}};
}

TrainConfig train_config_from_json(const ordered_json& j) {
    check_keys(j, "train",
               {"lr", "epochs", "batch_size", "lambda", "patch", "seed", "deterministic",
                "augment", "eval_every", "early_stop_dice"});
    TrainConfig cfg;
    cfg.lr = get_or(j, "lr", cfg.lr, "train");
    cfg.epochs = get_or(j, "epochs", cfg.epochs, "train");
    cfg.batch_size = get_or(j, "batch_size", cfg.batch_size, "train");
    cfg.lambda = get_or(j, "lambda", cfg.lambda, "train");
    if (j.contains("patch")) {
        const auto& p = j.at("patch");
        check_keys(p, "train.patch", {"size", "foreground_bias"});
        cfg.patch.size = get_array<int, 3>(p, "size", cfg.patch.size, "train.patch");
        cfg.patch.foreground_bias =
            get_or(p, "foreground_bias", cfg.patch.foreground_bias, "train.patch");
    }
    cfg.seed = get_or(j, "seed", cfg.seed, "train");
    cfg.deterministic = get_or(j, "deterministic", cfg.deterministic, "train");
    cfg.augment = get_or(j, "augment", cfg.augment, "train");
    cfg.eval_every = get_or(j, "eval_every", cfg.eval_every, "train");
    cfg.early_stop_dice = get_or(j, "early_stop_dice", cfg.early_stop_dice, "train");
    return cfg;
}

ordered_json to_json(const SynthSpec& spec) {
    return ordered_json{{"num_cases", spec.num_cases},
                        {"shape", spec.shape},
                        {"lesion_count_range", spec.lesion_count_range},
                        {"lesion_radius_range", spec.lesion_radius_range},
                        {"body_modality", spec.body_modality.name},
                        {"rim_modality", spec.rim_modality.name},
                        {"noise_sigma", spec.noise_sigma},
                        {"seed", spec.seed}};
}

SynthSpec synth_spec_from_json(const ordered_json& j) {
    check_keys(j, "synth",
               {"num_cases", "shape", "lesion_count_range", "lesion_radius_range",
                "body_modality", "rim_modality", "noise_sigma", "seed"});
    SynthSpec spec;
    spec.num_cases = get_or(j, "num_cases", spec.num_cases, "synth");
    spec.shape = get_array<int, 3>(j, "shape", spec.shape, "synth");
    spec.lesion_count_range =
        get_array<int, 2>(j, "lesion_count_range", spec.lesion_count_range, "synth");
    spec.lesion_radius_range =
        get_array<double, 2>(j, "lesion_radius_range", spec.lesion_radius_range, "synth");
    spec.body_modality = {get_or<std::string>(j, "body_modality", spec.body_modality.name, "synth")};
    spec.rim_modality = {get_or<std::string>(j, "rim_modality", spec.rim_modality.name, "synth")};
    spec.noise_sigma = get_or(j, "noise_sigma", spec.noise_sigma, "synth");
    spec.seed = get_or(j, "seed", spec.seed, "synth");
    return spec;
}

ordered_json to_json(const ExperimentConfig& cfg) {
    ordered_json j = to_json(cfg.model);
    j["train"] = to_json(cfg.train);
    if (cfg.synth) j["synth"] = to_json(*cfg.synth);
    if (!cfg.dataset_manifest.empty()) j["dataset_manifest"] = cfg.dataset_manifest;
    j["output_dir"] = cfg.output_dir;
    return j;
}

ExperimentConfig experiment_from_json(const ordered_json& j) {
    check_keys(j, "experiment config",
               {"modalities", "backbone", "fusion", "train", "synth", "dataset_manifest",
                "output_dir"});
    ExperimentConfig cfg;
    ordered_json model = ordered_json::object();
    if (j.contains("modalities")) model["modalities"] = j.at("modalities");
    if (j.contains("backbone")) model["backbone"] = j.at("backbone");
    if (j.contains("fusion")) model["fusion"] = j.at("fusion");
    cfg.model = model_config_from_json(model);
    if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
    if (j.contains("synth")) cfg.synth = synth_spec_from_json(j.at("synth"));
    cfg.dataset_manifest = get_or<std::string>(j, "dataset_manifest", "", "experiment config");
    cfg.output_dir = get_or<std::string>(j, "output_dir", "", "experiment config");
    validate_experiment(cfg);
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid JSON in " + path + ": " + e.what());
    }
    return experiment_from_json(j);
}

void validate_experiment(const ExperimentConfig& cfg) {
    validate_model_config(cfg.model);
    validate_train_config(cfg.train);

    const int factor = 1 << (cfg.model.backbone.levels - 1);
    for (int d : cfg.train.patch.size)
        if (d % factor != 0)
            throw ConfigError("patch dimensions must be divisible by " + std::to_string(factor) +
                              " for a " + std::to_string(cfg.model.backbone.levels) +
                              "-level backbone");

    if (cfg.output_dir.empty()) throw ConfigError("output_dir must be set");

    const bool has_manifest = !cfg.dataset_manifest.empty();
    if (cfg.synth && has_manifest)
        throw ConfigError("config sets both synth and dataset_manifest; choose one data source");
    if (!cfg.synth && !has_manifest)
        throw ConfigError("config needs a data source: synth or dataset_manifest");

    if (cfg.synth) {
        validate_synth_spec(*cfg.synth);
        std::set<std::string> names;
        for (const auto& m : cfg.model.modalities) names.insert(m.name);
        if (names != std::set<std::string>{cfg.synth->body_modality.name,
                                           cfg.synth->rim_modality.name})
            throw ConfigError("synthetic modalities must match the model's modality list");
        for (int d : cfg.synth->shape) {
            if (d % factor != 0)
                throw ConfigError("synthetic volume dimensions must be divisible by " +
                                  std::to_string(factor));
        }
        for (int a = 0; a < 3; ++a)
            if (cfg.train.patch.size[a] > cfg.synth->shape[a])
                throw ConfigError("patch does not fit inside the synthetic volumes");
    }
}

}  // namespace maml
