#include "maml/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <thread>

#include "maml/config.hpp"
#include "maml/errors.hpp"

namespace maml {

using nlohmann::ordered_json;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string step_line(long step, int epoch, const LossBreakdown& lb) {
    std::string s = "{\"step\":" + std::to_string(step) + ",\"epoch\":" + std::to_string(epoch) +
                    ",\"intra\":{";
    bool first = true;
    for (const auto& [id, v] : lb.intra) {
        if (!first) s += ",";
        first = false;
        s += "\"" + id.name + "\":" + fmt_double(v);
    }
    s += "},\"joint\":" + fmt_double(lb.joint) + ",\"total\":" + fmt_double(lb.total) + "}";
    return s;
}

std::string probe_line(int epoch, double dice) {
    return "{\"epoch\":" + std::to_string(epoch) + ",\"train_dice\":" + fmt_double(dice) + "}";
}

Tensor crop3(const Tensor& t, const std::array<int, 3>& off, const std::array<int, 3>& size) {
    Tensor out = Tensor::zeros({size[0], size[1], size[2]});
    for (int z = 0; z < size[0]; ++z)
        for (int y = 0; y < size[1]; ++y)
            for (int x = 0; x < size[2]; ++x)
                out.at(z, y, x) = t.at(off[0] + z, off[1] + y, off[2] + x);
    return out;
}

std::vector<int> window_positions(int dim, int w) {
    std::vector<int> pos{0};
    const int stride = std::max(1, w / 2);
    while (pos.back() + w < dim) pos.push_back(std::min(pos.back() + stride, dim - w));
    return pos;
}

std::array<int, 3> clamp_window(const std::vector<int>& shape, std::array<int, 3> window,
                                int levels) {
    for (int a = 0; a < 3; ++a) {
        if (window[a] < 1) throw ConfigError("inference window dimensions must be positive");
        window[a] = std::min(window[a], shape[a]);
    }
    if (!shape_divisible({window[0], window[1], window[2]}, levels))
        throw ConfigError("inference window must be divisible by 2^(levels-1)");
    return window;
}

struct WindowOut {
    Tensor probs;                      // (2,wz,wy,wx)
    std::map<ModalityId, Tensor> atts; // (1,wz,wy,wx) each
};

struct Stitched {
    Tensor probs;                      // (2,D,H,W)
    std::map<ModalityId, Tensor> atts; // (D,H,W) each
};

Stitched stitch_windows(const std::vector<int>& shape, const std::array<int, 3>& window,
                        const std::vector<ModalityId>& att_ids,
                        const std::function<WindowOut(const std::array<int, 3>&)>& run) {
    const int D = shape[0], H = shape[1], W = shape[2];
    Stitched out;
    out.probs = Tensor::zeros({2, D, H, W});
    Tensor count = Tensor::zeros({D, H, W});
    for (const auto& id : att_ids) out.atts.emplace(id, Tensor::zeros({D, H, W}));

    for (int pz : window_positions(D, window[0]))
        for (int py : window_positions(H, window[1]))
            for (int px : window_positions(W, window[2])) {
                const std::array<int, 3> off{pz, py, px};
                WindowOut w = run(off);
                for (int c = 0; c < 2; ++c)
                    for (int z = 0; z < window[0]; ++z)
                        for (int y = 0; y < window[1]; ++y)
                            for (int x = 0; x < window[2]; ++x)
                                out.probs.at(c, pz + z, py + y, px + x) += w.probs.at(c, z, y, x);
                for (int z = 0; z < window[0]; ++z)
                    for (int y = 0; y < window[1]; ++y)
                        for (int x = 0; x < window[2]; ++x)
                            count.at(pz + z, py + y, px + x) += 1.0;
                for (auto& [id, acc] : out.atts) {
                    const Tensor& a = w.atts.at(id);
                    for (int z = 0; z < window[0]; ++z)
                        for (int y = 0; y < window[1]; ++y)
                            for (int x = 0; x < window[2]; ++x)
                                acc.at(pz + z, py + y, px + x) += a.at(0, z, y, x);
                }
            }

    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double n = count.at(z, y, x);
                out.probs.at(0, z, y, x) /= n;
                out.probs.at(1, z, y, x) /= n;
                for (auto& [id, acc] : out.atts) acc.at(z, y, x) /= n;
            }
    return out;
}

Mask argmax_mask(const Tensor& probs) {
    const int D = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
    Tensor m = Tensor::zeros({D, H, W});
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                m.at(z, y, x) = probs.at(1, z, y, x) > probs.at(0, z, y, x) ? 1.0 : 0.0;
    return Mask{m};
}

void check_dataset(const std::vector<MultiModalCase>& dataset,
                   const std::vector<ModalityId>& modalities) {
    if (dataset.empty()) throw DataError("dataset is empty");
    for (const auto& c : dataset) {
        validate_case(c);
        if (modalities_of(c) != modalities)
            throw DataError("case " + c.case_id + " does not carry the configured modalities");
    }
}

std::map<ModalityId, Tensor> case_inputs(const MultiModalCase& c) {
    std::map<ModalityId, Tensor> inputs;
    for (const auto& [id, vol] : c.volumes) inputs.emplace(id, vol.data);
    return inputs;
}

double probe_multimodal_dice(const MamlModel& model, const std::vector<MultiModalCase>& dataset,
                             const std::array<int, 3>& window) {
    double sum = 0.0;
    for (const auto& c : dataset)
        sum += dice_score(predict_multimodal(model, c, window).mask, c.mask);
    return sum / static_cast<double>(dataset.size());
}

double probe_single_dice(const SingleModel& model, const std::vector<MultiModalCase>& dataset,
                         const std::array<int, 3>& window) {
    double sum = 0.0;
    for (const auto& c : dataset)
        sum += dice_score(predict_single_model(model, c.volumes.at(model.modality), window).mask,
                          c.mask);
    return sum / static_cast<double>(dataset.size());
}

ad::Value input_node(ad::Tape& tape, const Tensor& vol) {
    Tensor in({1, vol.dim(0), vol.dim(1), vol.dim(2)});
    std::copy(vol.data(), vol.data() + vol.numel(), in.data());
    return tape.leaf(std::move(in), false);
}

void accumulate_grads(ad::Tape& tape, const TapeParams& tp, double scale,
                      std::vector<Tensor>& accum) {
    for (size_t i = 0; i < tp.values.size(); ++i) {
        if (!tape.has_grad(tp.values[i])) continue;
        const Tensor& g = tape.grad(tp.values[i]);
        Tensor& a = accum[i];
        for (size_t k = 0; k < a.numel(); ++k) a[k] += g[k] * scale;
    }
}

std::vector<Tensor> zero_like_store(const ParamStore& store) {
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(store.count()));
    for (int i = 0; i < store.count(); ++i) out.push_back(Tensor::zeros(store.at(i).shape()));
    return out;
}

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
    if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr))
        throw ConfigError("learning rate must be positive");
    if (cfg.epochs < 1) throw ConfigError("epochs must be at least 1");
    if (cfg.batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (cfg.lambda < 0.0 || !std::isfinite(cfg.lambda))
        throw ConfigError("lambda must be non-negative");
    validate_patch_spec(cfg.patch);
    if (cfg.eval_every < 0) throw ConfigError("eval_every must be non-negative");
    if (cfg.early_stop_dice < 0.0 || cfg.early_stop_dice > 1.0)
        throw ConfigError("early_stop_dice must lie in [0,1]");
    if (cfg.augment && !(cfg.aug.gamma_lo > 0.0 && cfg.aug.gamma_hi >= cfg.aug.gamma_lo))
        throw ConfigError("invalid gamma range");
}

void AdamState::init(const ParamStore& store) {
    t = 0;
    m = zero_like_store(store);
    v = zero_like_store(store);
}

void AdamState::step(ParamStore& store, const std::vector<Tensor>& grads) {
    if (static_cast<int>(grads.size()) != store.count() ||
        m.size() != grads.size() || v.size() != grads.size())
        throw std::logic_error("optimizer state does not match the parameter store");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < grads.size(); ++i) {
        Tensor& p = store.at(static_cast<int>(i));
        Tensor& mi = m[i];
        Tensor& vi = v[i];
        const Tensor& g = grads[i];
        for (size_t k = 0; k < p.numel(); ++k) {
            mi[k] = beta1 * mi[k] + (1.0 - beta1) * g[k];
            vi[k] = beta2 * vi[k] + (1.0 - beta2) * g[k] * g[k];
            p[k] -= lr * (mi[k] / bc1) / (std::sqrt(vi[k] / bc2) + eps);
        }
    }
}

TrainResult train(MamlModel& model, const std::vector<MultiModalCase>& dataset,
                  const TrainConfig& cfg, const std::string& out_dir) {
    validate_train_config(cfg);
    check_dataset(dataset, model.cfg.modalities);
    std::filesystem::create_directories(out_dir);

    const std::string log_path = out_dir + "/train_log.jsonl";
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write training log " + log_path);

    AdamState opt;
    opt.lr = cfg.lr;
    opt.init(model.store);

    std::mt19937_64 rng(cfg.seed);
    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), size_t{0});

    TrainResult res;
    res.log_path = log_path;
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            const size_t batch_n =
                std::min(static_cast<size_t>(cfg.batch_size), order.size() - b0);
            std::vector<Tensor> grads = zero_like_store(model.store);
            LossBreakdown avg;
            avg.lambda = cfg.lambda;
            for (const auto& id : model.cfg.modalities) avg.intra[id] = 0.0;

            for (size_t s = 0; s < batch_n; ++s) {
                MultiModalCase patch = sample_patch(dataset[order[b0 + s]], cfg.patch, rng);
                if (cfg.augment) patch = augment(patch, rng, cfg.aug);

                ad::Tape tape(true);
                TapeParams tp = lift_params(tape, model.store, true);
                ForwardNodes fw = model_forward_t(tape, tp, model, case_inputs(patch));
                MutualLossNodes loss = mutual_learning_loss_t(tape, fw.intra_probs,
                                                              fw.joint_probs, patch.mask.data,
                                                              cfg.lambda);
                const double total = tape.val(loss.total)[0];
                if (!std::isfinite(total)) {
                    save_checkpoint(out_dir + "/checkpoint_diverged.ckpt", model, &opt, epoch,
                                    ordered_json{{"diverged_at_step", step + 1}});
                    throw DivergenceError("non-finite training loss at step " +
                                          std::to_string(step + 1));
                }

                const double scale = 1.0 / static_cast<double>(batch_n);
                for (const auto& [id, node] : loss.intra) avg.intra[id] += tape.val(node)[0] * scale;
                avg.joint += tape.val(loss.joint)[0] * scale;
                avg.total += total * scale;

                tape.backward(loss.total);
                accumulate_grads(tape, tp, scale, grads);
            }

            opt.step(model.store, grads);
            ++step;
            log << step_line(step, epoch, avg) << "\n";
            res.final_total_loss = avg.total;
        }
        log.flush();
        res.epochs_run = epoch + 1;
        res.steps_run = step;
        save_checkpoint(out_dir + "/checkpoint_last.ckpt", model, &opt, epoch + 1, {});

        if (cfg.eval_every > 0 && cfg.early_stop_dice > 0.0 &&
            (epoch + 1) % cfg.eval_every == 0) {
            const double d = probe_multimodal_dice(model, dataset, cfg.patch.size);
            log << probe_line(epoch, d) << "\n";
            log.flush();
            res.last_probe_dice = d;
            if (d >= cfg.early_stop_dice) {
                res.early_stopped = true;
                break;
            }
        }
    }

    ordered_json extra;
    extra["final_total_loss"] = res.final_total_loss;
    if (res.last_probe_dice) extra["train_dice"] = *res.last_probe_dice;
    res.checkpoint_path = out_dir + "/checkpoint_final.ckpt";
    save_checkpoint(res.checkpoint_path, model, &opt, res.epochs_run, extra);
    return res;
}

SingleModel build_single_model(const BackboneConfig& cfg, const ModalityId& modality,
                               uint64_t seed) {
    validate_backbone_config(cfg);
    if (modality.name.empty()) throw ConfigError("modality name must be non-empty");
    SingleModel m;
    m.cfg = cfg;
    m.modality = modality;
    std::mt19937_64 rng(seed);
    m.net = build_backbone(m.store, "backbone." + modality.name, cfg, rng);
    return m;
}

TrainResult train_single(SingleModel& model, const std::vector<MultiModalCase>& dataset,
                         const TrainConfig& cfg, const std::string& out_dir) {
    validate_train_config(cfg);
    if (dataset.empty()) throw DataError("dataset is empty");
    for (const auto& c : dataset) {
        validate_case(c);
        if (c.volumes.find(model.modality) == c.volumes.end())
            throw DataError("case " + c.case_id + " lacks modality " + model.modality.name);
    }
    std::filesystem::create_directories(out_dir);

    const std::string log_path = out_dir + "/train_log.jsonl";
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write training log " + log_path);

    AdamState opt;
    opt.lr = cfg.lr;
    opt.init(model.store);

    std::mt19937_64 rng(cfg.seed);
    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), size_t{0});

    TrainResult res;
    res.log_path = log_path;
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            const size_t batch_n =
                std::min(static_cast<size_t>(cfg.batch_size), order.size() - b0);
            std::vector<Tensor> grads = zero_like_store(model.store);
            double avg_total = 0.0;

            for (size_t s = 0; s < batch_n; ++s) {
                MultiModalCase patch = sample_patch(dataset[order[b0 + s]], cfg.patch, rng);
                if (cfg.augment) patch = augment(patch, rng, cfg.aug);

                ad::Tape tape(true);
                TapeParams tp = lift_params(tape, model.store, true);
                ad::Value feat = backbone_forward_t(
                    tape, tp, model.net, input_node(tape, patch.volumes.at(model.modality).data));
                ad::Value probs = modality_head_t(tape, tp, model.net, feat);
                ad::Value loss = seg_loss_t(tape, probs, patch.mask.data);

                const double total = tape.val(loss)[0];
                if (!std::isfinite(total))
                    throw DivergenceError("non-finite training loss at step " +
                                          std::to_string(step + 1));

                const double scale = 1.0 / static_cast<double>(batch_n);
                avg_total += total * scale;
                tape.backward(loss);
                accumulate_grads(tape, tp, scale, grads);
            }

            opt.step(model.store, grads);
            ++step;
            log << "{\"step\":" << step << ",\"epoch\":" << epoch
                << ",\"total\":" << fmt_double(avg_total) << "}\n";
            res.final_total_loss = avg_total;
        }
        log.flush();
        res.epochs_run = epoch + 1;
        res.steps_run = step;

        if (cfg.eval_every > 0 && cfg.early_stop_dice > 0.0 &&
            (epoch + 1) % cfg.eval_every == 0) {
            const double d = probe_single_dice(model, dataset, cfg.patch.size);
            log << probe_line(epoch, d) << "\n";
            log.flush();
            res.last_probe_dice = d;
            if (d >= cfg.early_stop_dice) {
                res.early_stopped = true;
                break;
            }
        }
    }
    return res;
}

void save_checkpoint(const std::string& path, const MamlModel& model, const AdamState* opt,
                     int epoch, const ordered_json& extra) {
    ordered_json meta;
    meta["version"] = 1;
    meta["epoch"] = epoch;
    meta["model"] = to_json(model.cfg);
    ordered_json optj;
    optj["present"] = opt != nullptr;
    if (opt) {
        optj["t"] = opt->t;
        optj["lr"] = opt->lr;
        optj["beta1"] = opt->beta1;
        optj["beta2"] = opt->beta2;
        optj["eps"] = opt->eps;
    }
    meta["optimizer"] = optj;

    const ParamStore& store = model.store;
    ordered_json tensors = ordered_json::array();
    auto add_entry = [&](const std::string& name, const Tensor& t) {
        tensors.push_back(ordered_json{{"name", name}, {"shape", t.shape()}});
    };
    for (int i = 0; i < store.count(); ++i) add_entry("param/" + store.name_of(i), store.at(i));
    if (opt) {
        for (int i = 0; i < store.count(); ++i)
            add_entry("adam.m/" + store.name_of(i), opt->m[static_cast<size_t>(i)]);
        for (int i = 0; i < store.count(); ++i)
            add_entry("adam.v/" + store.name_of(i), opt->v[static_cast<size_t>(i)]);
    }
    meta["tensors"] = tensors;
    if (!extra.is_null() && !extra.empty()) meta["extra"] = extra;

    const std::string js = meta.dump();
    const std::string tmp = path + ".tmp";
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write("MAMLCKP1", 8);
    const uint64_t len = js.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(js.data(), static_cast<std::streamsize>(js.size()));
    auto dump_tensor = [&](const Tensor& t) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
    };
    for (int i = 0; i < store.count(); ++i) dump_tensor(store.at(i));
    if (opt) {
        for (const Tensor& t : opt->m) dump_tensor(t);
        for (const Tensor& t : opt->v) dump_tensor(t);
    }
    out.close();
    if (!out) throw IoError("failed writing checkpoint " + path);
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "MAMLCKP1", 8) != 0)
        throw IoError(path + " is not a checkpoint file");
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len == 0 || len > (1ull << 30)) throw IoError("corrupt checkpoint header in " + path);
    std::string js(len, '\0');
    in.read(js.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated checkpoint " + path);

    ordered_json meta;
    try {
        meta = ordered_json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint metadata in " + path + ": " + e.what());
    }
    if (!meta.contains("version") || meta.at("version").get<int>() != 1)
        throw IoError("unsupported checkpoint version in " + path);

    LoadedCheckpoint ck;
    ck.meta = meta;
    ck.epoch = meta.value("epoch", 0);
    ck.model = build_model(model_config_from_json(meta.at("model")), 0);
    const ParamStore& store = ck.model.store;

    ck.has_opt = meta.at("optimizer").at("present").get<bool>();
    if (ck.has_opt) {
        const auto& o = meta.at("optimizer");
        ck.opt.t = o.at("t").get<long>();
        ck.opt.lr = o.at("lr").get<double>();
        ck.opt.beta1 = o.at("beta1").get<double>();
        ck.opt.beta2 = o.at("beta2").get<double>();
        ck.opt.eps = o.at("eps").get<double>();
        ck.opt.m = zero_like_store(store);
        ck.opt.v = zero_like_store(store);
    }

    std::vector<std::pair<std::string, Tensor*>> expected;
    for (int i = 0; i < store.count(); ++i)
        expected.emplace_back("param/" + store.name_of(i), &ck.model.store.at(i));
    if (ck.has_opt) {
        for (int i = 0; i < store.count(); ++i)
            expected.emplace_back("adam.m/" + store.name_of(i), &ck.opt.m[static_cast<size_t>(i)]);
        for (int i = 0; i < store.count(); ++i)
            expected.emplace_back("adam.v/" + store.name_of(i), &ck.opt.v[static_cast<size_t>(i)]);
    }

    const auto& tensors = meta.at("tensors");
    if (!tensors.is_array() || tensors.size() != expected.size())
        throw IoError("checkpoint tensor directory does not match the model layout");
    for (size_t i = 0; i < expected.size(); ++i) {
        const auto& entry = tensors.at(i);
        if (entry.at("name").get<std::string>() != expected[i].first)
            throw IoError("checkpoint tensor " + std::to_string(i) + " is " +
                          entry.at("name").get<std::string>() + ", expected " + expected[i].first);
        const auto shape = entry.at("shape").get<std::vector<int>>();
        Tensor* dst = expected[i].second;
        if (shape != dst->shape())
            throw IoError("checkpoint tensor " + expected[i].first + " has unexpected shape");
        in.read(reinterpret_cast<char*>(dst->data()),
                static_cast<std::streamsize>(dst->numel() * sizeof(double)));
        if (!in) throw IoError("truncated checkpoint " + path);
    }
    return ck;
}

MultimodalPrediction predict_multimodal(const MamlModel& model, const MultiModalCase& c,
                                        std::array<int, 3> window) {
    validate_case(c);
    if (modalities_of(c) != model.cfg.modalities)
        throw DataError("case " + c.case_id + " does not carry the configured modalities");
    const std::vector<int>& shape = c.mask.data.shape();
    window = clamp_window(shape, window, model.cfg.backbone.levels);

    auto run = [&](const std::array<int, 3>& off) {
        std::map<ModalityId, Tensor> inputs;
        for (const auto& [id, vol] : c.volumes) inputs.emplace(id, crop3(vol.data, off, window));
        ad::Tape tape(false);
        TapeParams tp = lift_params(tape, model.store, false);
        ForwardNodes fw = model_forward_t(tape, tp, model, inputs);
        WindowOut w;
        w.probs = tape.val(fw.joint_probs);
        for (const auto& [id, att] : fw.attentions) w.atts.emplace(id, tape.val(att));
        return w;
    };

    Stitched st = stitch_windows(shape, window, model.cfg.modalities, run);
    MultimodalPrediction pred;
    pred.mask = argmax_mask(st.probs);
    pred.probs = ProbMap{std::move(st.probs)};
    for (auto& [id, att] : st.atts) {
        Tensor a4({1, shape[0], shape[1], shape[2]});
        std::copy(att.data(), att.data() + att.numel(), a4.data());
        pred.attentions.emplace(id, AttentionMap{std::move(a4), id});
    }
    return pred;
}

SinglePrediction predict_single(const MamlModel& model, const Volume& vol,
                                std::array<int, 3> window) {
    validate_volume(vol);
    const std::vector<int>& shape = vol.data.shape();
    window = clamp_window(shape, window, model.cfg.backbone.levels);

    auto run = [&](const std::array<int, 3>& off) {
        ad::Tape tape(false);
        TapeParams tp = lift_params(tape, model.store, false);
        WindowOut w;
        w.probs = tape.val(
            model_single_forward_t(tape, tp, model, vol.modality, crop3(vol.data, off, window)));
        return w;
    };

    Stitched st = stitch_windows(shape, window, {}, run);
    SinglePrediction pred;
    pred.mask = argmax_mask(st.probs);
    pred.probs = ProbMap{std::move(st.probs)};
    return pred;
}

SinglePrediction predict_single_model(const SingleModel& model, const Volume& vol,
                                      std::array<int, 3> window) {
    validate_volume(vol);
    const std::vector<int>& shape = vol.data.shape();
    window = clamp_window(shape, window, model.cfg.levels);

    auto run = [&](const std::array<int, 3>& off) {
        ad::Tape tape(false);
        TapeParams tp = lift_params(tape, model.store, false);
        ad::Value feat = backbone_forward_t(tape, tp, model.net,
                                            input_node(tape, crop3(vol.data, off, window)));
        WindowOut w;
        w.probs = tape.val(modality_head_t(tape, tp, model.net, feat));
        return w;
    };

    Stitched st = stitch_windows(shape, window, {}, run);
    SinglePrediction pred;
    pred.mask = argmax_mask(st.probs);
    pred.probs = ProbMap{std::move(st.probs)};
    return pred;
}

int worker_count() {
    const char* env = std::getenv("MAMLSEG_WORKERS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1 || n > 64)
        throw ConfigError("MAMLSEG_WORKERS must be an integer between 1 and 64");
    return static_cast<int>(n);
}

EvalReport evaluate(const MamlModel& model, const std::vector<MultiModalCase>& cases,
                    const std::string& mode, std::array<int, 3> window) {
    if (cases.empty()) throw DataError("no cases to evaluate");

    std::optional<ModalityId> single;
    if (mode.rfind("single:", 0) == 0) {
        single = ModalityId{mode.substr(7)};
        if (single->name.empty()) throw ConfigError("mode \"single:\" needs a modality name");
        bool known = false;
        for (const auto& id : model.cfg.modalities) known = known || id == *single;
        if (!known) throw ConfigError("mode names unknown modality " + single->name);
    } else if (mode != "multimodal") {
        throw ConfigError("mode must be \"multimodal\" or \"single:<MODALITY>\"");
    }

    EvalReport report;
    report.mode = mode;
    report.rows.resize(cases.size());

    auto eval_one = [&](size_t i) {
        const MultiModalCase& c = cases[i];
        Mask pred;
        if (single) {
            auto it = c.volumes.find(*single);
            if (it == c.volumes.end())
                throw DataError("case " + c.case_id + " lacks modality " + single->name);
            pred = predict_single(model, it->second, window).mask;
        } else {
            pred = predict_multimodal(model, c, window).mask;
        }
        EvalRow row;
        row.case_id = c.case_id;
        row.dice = dice_score(pred, c.mask);
        row.assd = assd(pred, c.mask, c.volumes.begin()->second.spacing);
        report.rows[i] = std::move(row);
    };

    const int workers = worker_count();
    if (workers <= 1 || cases.size() == 1) {
        for (size_t i = 0; i < cases.size(); ++i) eval_one(i);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&, t] {
                try {
                    for (size_t i = static_cast<size_t>(t); i < cases.size();
                         i += static_cast<size_t>(workers))
                        eval_one(i);
                } catch (...) {
                    errors[static_cast<size_t>(t)] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    std::vector<double> dices;
    std::vector<double> assds;
    for (const auto& row : report.rows) {
        dices.push_back(row.dice);
        if (row.assd)
            assds.push_back(*row.assd);
        else
            ++report.assd_missing;
    }
    report.dice_agg = aggregate_per_case(dices);
    if (!assds.empty()) report.assd_agg = aggregate_per_case(assds);
    return report;
}

std::string format_report(const EvalReport& report) {
    std::string s = "mode: " + report.mode + "\n";
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-16s %10s %10s\n", "case_id", "dice", "assd");
    s += buf;
    for (const auto& row : report.rows) {
        if (row.assd)
            std::snprintf(buf, sizeof(buf), "%-16s %10.4f %10.4f\n", row.case_id.c_str(),
                          row.dice, *row.assd);
        else
            std::snprintf(buf, sizeof(buf), "%-16s %10.4f %10s\n", row.case_id.c_str(), row.dice,
                          "n/a");
        s += buf;
    }
    std::snprintf(buf, sizeof(buf), "dice mean %.4f std %.4f over %zu cases\n",
                  report.dice_agg.mean, report.dice_agg.std, report.rows.size());
    s += buf;
    if (report.assd_agg)
        std::snprintf(buf, sizeof(buf), "assd mean %.4f std %.4f (%d case(s) undefined)\n",
                      report.assd_agg->mean, report.assd_agg->std, report.assd_missing);
    else
        std::snprintf(buf, sizeof(buf), "assd undefined for every case\n");
    s += buf;
    return s;
}

void write_report_csv(const std::string& path, const EvalReport& report) {
    std::vector<io::MetricsRow> rows;
    for (const auto& row : report.rows) rows.push_back({row.case_id, row.dice, row.assd});
    io::write_metrics_csv(path, rows);
}

}  // namespace maml
