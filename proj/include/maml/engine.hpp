#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "maml/data.hpp"
#include "maml/model.hpp"

namespace maml {

struct TrainConfig {
    double lr = 3e-4;
    int epochs = 200;
    int batch_size = 2;
    double lambda = 0.5;
    PatchSpec patch;
    uint64_t seed = 1;
    bool deterministic = true;
    bool augment = false;
    AugmentConfig aug;
    // Every eval_every epochs the whole training set is re-scored with the
    // joint head; training stops once mean Dice reaches early_stop_dice.
    // Either value at zero disables the probe.
    int eval_every = 10;
    double early_stop_dice = 0.0;
};

void validate_train_config(const TrainConfig& cfg);

struct AdamState {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    void init(const ParamStore& store);
    void step(ParamStore& store, const std::vector<Tensor>& grads);
};

struct TrainResult {
    int epochs_run = 0;
    long steps_run = 0;
    double final_total_loss = 0.0;
    std::optional<double> last_probe_dice;
    bool early_stopped = false;
    std::string checkpoint_path;
    std::string log_path;
};

// Full training loop: shuffled batches of biased patches, one optimizer step
// per batch, a JSONL log line per step, checkpoint_last.ckpt per epoch and
// checkpoint_final.ckpt at the end. A non-finite loss dumps a diagnostic
// checkpoint and raises DivergenceError.
TrainResult train(MamlModel& model, const std::vector<MultiModalCase>& dataset,
                  const TrainConfig& cfg, const std::string& out_dir);

// A plain one-modality network trained with the same loop and loss on its
// own head; the reference point for what fusion has to beat.
struct SingleModel {
    BackboneConfig cfg;
    ModalityId modality;
    ParamStore store;
    BackboneNet net;
};

SingleModel build_single_model(const BackboneConfig& cfg, const ModalityId& modality,
                               uint64_t seed);

TrainResult train_single(SingleModel& model, const std::vector<MultiModalCase>& dataset,
                         const TrainConfig& cfg, const std::string& out_dir);

// ---- checkpoints ----

// Layout: 8-byte magic, little-endian u64 JSON length, a JSON directory
// (configuration, epoch, tensor names and shapes), then raw float64 tensor
// payloads in directory order.
void save_checkpoint(const std::string& path, const MamlModel& model, const AdamState* opt,
                     int epoch, const nlohmann::ordered_json& extra);

struct LoadedCheckpoint {
    MamlModel model;
    AdamState opt;
    bool has_opt = false;
    int epoch = 0;
    nlohmann::ordered_json meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// ---- inference ----

struct MultimodalPrediction {
    ProbMap probs;
    Mask mask;
    std::map<ModalityId, AttentionMap> attentions;
};

// Sliding-window inference with half-window stride; overlapping probability
// and attention estimates are averaged with uniform weights. Ties go to
// background.
MultimodalPrediction predict_multimodal(const MamlModel& model, const MultiModalCase& c,
                                        std::array<int, 3> window);

struct SinglePrediction {
    ProbMap probs;
    Mask mask;
};

// Inference when only one modality is available: that backbone and its own
// segmentation head, no fusion.
SinglePrediction predict_single(const MamlModel& model, const Volume& vol,
                                std::array<int, 3> window);

SinglePrediction predict_single_model(const SingleModel& model, const Volume& vol,
                                      std::array<int, 3> window);

// ---- evaluation ----

struct EvalRow {
    std::string case_id;
    double dice = 0.0;
    std::optional<double> assd;
};

struct EvalReport {
    std::string mode;
    std::vector<EvalRow> rows;
    Aggregate dice_agg;
    std::optional<Aggregate> assd_agg;
    int assd_missing = 0;
};

// mode is "multimodal" or "single:<MODALITY>". Cases are sharded across
// MAMLSEG_WORKERS threads; results land by case index, so the report does
// not depend on the worker count.
EvalReport evaluate(const MamlModel& model, const std::vector<MultiModalCase>& cases,
                    const std::string& mode, std::array<int, 3> window);

int worker_count();

std::string format_report(const EvalReport& report);

void write_report_csv(const std::string& path, const EvalReport& report);

}  // namespace maml
