#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "maml/config.hpp"
#include "maml/engine.hpp"

namespace fs = std::filesystem;
using namespace maml;
using nlohmann::ordered_json;

namespace {

MultiModalCase preprocess(MultiModalCase c) {
    for (auto& [id, vol] : c.volumes) vol = zscore_normalize(clip_percentile(vol, 0.5, 99.5));
    return c;
}

// Manifest datasets come preprocessed out of load_dataset; in-memory synthetic
// cases get the same treatment so both paths feed the model the same way.
std::vector<MultiModalCase> load_cases(const ExperimentConfig& cfg) {
    if (!cfg.dataset_manifest.empty()) return load_dataset(cfg.dataset_manifest);
    SynthDataset ds = generate_synthetic(*cfg.synth);
    std::vector<MultiModalCase> cases;
    cases.reserve(ds.cases.size());
    for (auto& c : ds.cases) cases.push_back(preprocess(std::move(c)));
    return cases;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << content;
    if (!out.flush()) throw IoError("failed writing " + path);
}

MamlModel checked_checkpoint_model(const ExperimentConfig& cfg, const std::string& path) {
    LoadedCheckpoint ck = load_checkpoint(path);
    if (to_json(ck.model.cfg) != to_json(cfg.model))
        throw ConfigError("checkpoint " + path + " was trained with a different model configuration");
    return std::move(ck.model);
}

int cmd_synth(const ExperimentConfig& cfg, bool force) {
    if (!cfg.synth) throw ConfigError("the synth command needs a synth section in the config");
    const std::string dir = cfg.output_dir + "/dataset";
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw ConfigError(dir + " is not empty; pass --force to overwrite it");
    fs::create_directories(dir);

    SynthDataset ds = generate_synthetic(*cfg.synth);
    const std::string manifest = write_synth_dataset(ds, cfg.model.modalities, dir);

    size_t total_lesions = 0;
    size_t total_voxels = 0;
    ordered_json details = ordered_json::array();
    for (const auto& info : ds.infos) {
        total_lesions += info.lesions.size();
        total_voxels += info.mask_voxels;
        details.push_back(ordered_json{{"case_id", info.case_id},
                                       {"lesions", info.lesions.size()},
                                       {"mask_voxels", info.mask_voxels}});
    }
    ordered_json summary;
    summary["cases"] = ds.cases.size();
    summary["total_lesions"] = total_lesions;
    summary["total_mask_voxels"] = total_voxels;
    summary["case_details"] = details;
    write_text(dir + "/summary.json", summary.dump(2) + "\n");

    std::printf("wrote %zu cases to %s\n", ds.cases.size(), dir.c_str());
    std::printf("manifest: %s\n", manifest.c_str());
    std::printf("lesions: %zu total, foreground voxels: %zu total\n", total_lesions, total_voxels);
    return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
    std::vector<MultiModalCase> cases = load_cases(cfg);
    MamlModel model = build_model(cfg.model, cfg.train.seed);
    fs::create_directories(cfg.output_dir);
    write_text(cfg.output_dir + "/config.json", to_json(cfg).dump(2) + "\n");

    TrainResult res = train(model, cases, cfg.train, cfg.output_dir);
    std::printf("trained %d epoch(s), %ld step(s), final loss %.6f\n", res.epochs_run,
                res.steps_run, res.final_total_loss);
    if (res.last_probe_dice) std::printf("last training-set dice: %.4f\n", *res.last_probe_dice);
    if (res.early_stopped) std::printf("stopped early at the dice target\n");
    std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
    std::printf("log: %s\n", res.log_path.c_str());
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint, const std::string& mode) {
    MamlModel model = checked_checkpoint_model(cfg, checkpoint);
    std::vector<MultiModalCase> cases = load_cases(cfg);
    EvalReport rep = evaluate(model, cases, mode, cfg.train.patch.size);

    fs::create_directories(cfg.output_dir);
    write_report_csv(cfg.output_dir + "/report.csv", rep);
    const std::string text = format_report(rep);
    write_text(cfg.output_dir + "/report.txt", text);
    std::fputs(text.c_str(), stdout);
    return 0;
}

int cmd_export_attention(const ExperimentConfig& cfg, const std::string& checkpoint,
                         const std::string& case_id) {
    MamlModel model = checked_checkpoint_model(cfg, checkpoint);
    std::vector<MultiModalCase> cases = load_cases(cfg);
    const MultiModalCase* found = nullptr;
    for (const auto& c : cases)
        if (c.case_id == case_id) found = &c;
    if (!found) throw DataError("no case named " + case_id + " in the dataset");

    MultimodalPrediction pred = predict_multimodal(model, *found, cfg.train.patch.size);
    const std::string dir = cfg.output_dir + "/attention";
    fs::create_directories(dir);
    for (const auto& [id, att] : pred.attentions) {
        const std::string path = dir + "/" + case_id + "_" + id.name + ".nii";
        export_attention(att, *found, path);
        std::printf("wrote %s\n", path.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-modal volumetric segmentation with attention fusion"};
    app.require_subcommand(1);

    std::string config_path;
    std::string checkpoint;
    std::string mode = "multimodal";
    std::string case_id;
    bool force = false;
    bool deterministic = false;
    uint64_t seed = 0;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config file (JSON)")
            ->required();
    };

    CLI::App* synth = app.add_subcommand("synth", "write the synthetic dataset to disk");
    add_config(synth);
    synth->add_flag("--force", force, "overwrite a non-empty dataset directory");
    CLI::Option* synth_seed = synth->add_option("--seed", seed, "override the dataset seed");

    CLI::App* train_cmd = app.add_subcommand("train", "train a model and save checkpoints");
    add_config(train_cmd);
    CLI::Option* train_seed = train_cmd->add_option("--seed", seed, "override the training seed");
    train_cmd->add_flag("--deterministic", deterministic, "force deterministic execution");

    CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint and write reports");
    add_config(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file to score")->required();
    eval_cmd->add_option("--mode", mode, "multimodal or single:<MODALITY>");

    CLI::App* export_cmd =
        app.add_subcommand("export-attention", "write per-modality attention volumes for one case");
    add_config(export_cmd);
    export_cmd->add_option("--checkpoint", checkpoint, "checkpoint file to load")->required();
    export_cmd->add_option("--case-id", case_id, "case to run inference on")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg = load_experiment_config(config_path);
        if (synth_seed->count() > 0 && cfg.synth) cfg.synth->seed = seed;
        if (train_seed->count() > 0) cfg.train.seed = seed;
        if (deterministic) cfg.train.deterministic = true;

        if (app.got_subcommand(synth)) return cmd_synth(cfg, force);
        if (app.got_subcommand(train_cmd)) return cmd_train(cfg);
        if (app.got_subcommand(eval_cmd)) return cmd_eval(cfg, checkpoint, mode);
        return cmd_export_attention(cfg, checkpoint, case_id);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    }
}
