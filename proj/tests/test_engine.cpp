#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "maml/engine.hpp"

using namespace maml;
using nlohmann::ordered_json;

namespace {

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.modalities = {ModalityId{"AP"}, ModalityId{"VP"}};
    cfg.backbone.levels = 2;
    cfg.backbone.base_channels = 2;
    cfg.backbone.feature_channels = 4;
    cfg.fusion.dual_kernel = 1;
    cfg.fusion.fa_mid_channels = 2;
    return cfg;
}

SynthDataset tiny_dataset(int cases = 4, uint64_t seed = 42) {
    SynthSpec spec;
    spec.num_cases = cases;
    spec.shape = {16, 16, 16};
    spec.lesion_count_range = {1, 2};
    spec.lesion_radius_range = {3.0, 5.0};
    spec.noise_sigma = 4.0;
    spec.seed = seed;
    return generate_synthetic(spec);
}

TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    cfg.patch.size = {8, 8, 8};
    cfg.seed = 5;
    cfg.eval_every = 0;
    return cfg;
}

std::string fresh_dir(const std::string& name) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
    return path.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<ordered_json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<ordered_json> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(ordered_json::parse(line));
    return lines;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (size_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

bool stores_equal(const ParamStore& a, const ParamStore& b) {
    if (a.count() != b.count()) return false;
    for (int i = 0; i < a.count(); ++i) {
        if (a.name_of(i) != b.name_of(i)) return false;
        if (!tensors_equal(a.at(i), b.at(i))) return false;
    }
    return true;
}

struct EnvGuard {
    explicit EnvGuard(const char* value) {
        if (value)
            setenv("MAMLSEG_WORKERS", value, 1);
        else
            unsetenv("MAMLSEG_WORKERS");
    }
    ~EnvGuard() { unsetenv("MAMLSEG_WORKERS"); }
};

}  // namespace

TEST_CASE("the first adam step moves each weight by roughly lr times the gradient sign") {
    ParamStore store;
    Tensor w({4});
    w.data()[0] = 1.0;
    w.data()[1] = -2.0;
    w.data()[2] = 0.25;
    w.data()[3] = 3.0;
    store.add("w", w);

    AdamState opt;
    opt.lr = 0.1;
    opt.init(store);
    CHECK(opt.t == 0);
    CHECK(opt.m.size() == 1);
    CHECK(opt.v.size() == 1);

    Tensor g({4});
    g.data()[0] = 0.5;
    g.data()[1] = -3.0;
    g.data()[2] = 1e-4;
    g.data()[3] = 0.0;
    opt.step(store, {g});

    CHECK(opt.t == 1);
    const double* p = store.at(0).data();
    CHECK(p[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
    CHECK(p[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-6));
    CHECK(p[2] == doctest::Approx(0.25 - 0.1).epsilon(1e-3));
    CHECK(p[3] == 3.0);
}

TEST_CASE("training runs, logs every step, and leaves checkpoints behind") {
    MamlModel model = build_model(tiny_model_config(), 1);
    SynthDataset ds = tiny_dataset();
    TrainConfig cfg = tiny_train_config();
    const std::string out = fresh_dir("maml_train_smoke");

    TrainResult res = train(model, ds.cases, cfg, out);
    CHECK(res.epochs_run == 1);
    CHECK(res.steps_run == 2);
    CHECK(std::isfinite(res.final_total_loss));
    CHECK_FALSE(res.early_stopped);
    CHECK_FALSE(res.last_probe_dice.has_value());
    CHECK(std::filesystem::exists(res.checkpoint_path));
    CHECK(std::filesystem::exists(out + "/checkpoint_last.ckpt"));

    const auto lines = read_jsonl(res.log_path);
    REQUIRE(lines.size() == 2);
    for (size_t i = 0; i < lines.size(); ++i) {
        const auto& l = lines[i];
        CHECK(l.at("step").get<long>() == static_cast<long>(i + 1));
        CHECK(l.at("epoch").get<int>() == 0);
        REQUIRE(l.contains("intra"));
        CHECK(l.at("intra").contains("AP"));
        CHECK(l.at("intra").contains("VP"));
        CHECK(std::isfinite(l.at("joint").get<double>()));
        CHECK(std::isfinite(l.at("total").get<double>()));
    }
    CHECK(lines.back().at("total").get<double>() == res.final_total_loss);
}

TEST_CASE("the training-set probe records a dice value and lands in the log") {
    MamlModel model = build_model(tiny_model_config(), 1);
    SynthDataset ds = tiny_dataset(2);
    TrainConfig cfg = tiny_train_config();
    cfg.eval_every = 1;
    cfg.early_stop_dice = 1.0;
    const std::string out = fresh_dir("maml_train_probe");

    TrainResult res = train(model, ds.cases, cfg, out);
    REQUIRE(res.last_probe_dice.has_value());
    CHECK(*res.last_probe_dice >= 0.0);
    CHECK(*res.last_probe_dice <= 1.0);
    CHECK_FALSE(res.early_stopped);

    const auto lines = read_jsonl(res.log_path);
    REQUIRE(!lines.empty());
    CHECK(lines.back().contains("train_dice"));
    CHECK(lines.back().at("train_dice").get<double>() == *res.last_probe_dice);
}

TEST_CASE("two runs from the same seeds are identical down to the last bit") {
    SynthDataset ds = tiny_dataset();
    TrainConfig cfg = tiny_train_config();
    cfg.epochs = 2;
    cfg.augment = true;

    MamlModel m1 = build_model(tiny_model_config(), 9);
    MamlModel m2 = build_model(tiny_model_config(), 9);
    const std::string out1 = fresh_dir("maml_det_a");
    const std::string out2 = fresh_dir("maml_det_b");
    TrainResult r1 = train(m1, ds.cases, cfg, out1);
    TrainResult r2 = train(m2, ds.cases, cfg, out2);

    CHECK(slurp(r1.log_path) == slurp(r2.log_path));
    CHECK(stores_equal(m1.store, m2.store));
    CHECK(r1.final_total_loss == r2.final_total_loss);

    MamlModel m3 = build_model(tiny_model_config(), 10);
    const std::string out3 = fresh_dir("maml_det_c");
    TrainResult r3 = train(m3, ds.cases, cfg, out3);
    CHECK_FALSE(stores_equal(m1.store, m3.store));
}

TEST_CASE("checkpoints restore parameters, optimizer state, and predictions exactly") {
    MamlModel model = build_model(tiny_model_config(), 1);
    SynthDataset ds = tiny_dataset();
    TrainConfig cfg = tiny_train_config();
    const std::string out = fresh_dir("maml_ckpt_roundtrip");
    TrainResult res = train(model, ds.cases, cfg, out);

    LoadedCheckpoint ck = load_checkpoint(res.checkpoint_path);
    CHECK(ck.epoch == 1);
    REQUIRE(ck.has_opt);
    CHECK(ck.opt.t == res.steps_run);
    CHECK(ck.opt.lr == cfg.lr);
    CHECK(stores_equal(ck.model.store, model.store));
    CHECK(ck.meta.at("extra").at("final_total_loss").get<double>() == res.final_total_loss);

    EvalReport before = evaluate(model, ds.cases, "multimodal", {8, 8, 8});
    EvalReport after = evaluate(ck.model, ds.cases, "multimodal", {8, 8, 8});
    REQUIRE(before.rows.size() == after.rows.size());
    for (size_t i = 0; i < before.rows.size(); ++i) {
        CHECK(before.rows[i].case_id == after.rows[i].case_id);
        CHECK(before.rows[i].dice == after.rows[i].dice);
        CHECK(before.rows[i].assd == after.rows[i].assd);
    }
}

TEST_CASE("optimizer moments survive a save and load bit for bit") {
    MamlModel model = build_model(tiny_model_config(), 3);
    AdamState opt;
    opt.lr = 0.01;
    opt.init(model.store);
    std::vector<Tensor> grads;
    std::mt19937_64 rng(17);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int i = 0; i < model.store.count(); ++i) {
        Tensor g(model.store.at(i).shape());
        for (size_t k = 0; k < g.numel(); ++k) g.data()[k] = dist(rng);
        grads.push_back(std::move(g));
    }
    opt.step(model.store, grads);
    opt.step(model.store, grads);

    const std::string path = fresh_dir("maml_ckpt_opt") + "/state.ckpt";
    save_checkpoint(path, model, &opt, 7, ordered_json{{"note", "after two steps"}});
    LoadedCheckpoint ck = load_checkpoint(path);

    CHECK(ck.epoch == 7);
    REQUIRE(ck.has_opt);
    CHECK(ck.opt.t == 2);
    CHECK(ck.opt.lr == 0.01);
    REQUIRE(ck.opt.m.size() == opt.m.size());
    for (size_t i = 0; i < opt.m.size(); ++i) {
        CHECK(tensors_equal(ck.opt.m[i], opt.m[i]));
        CHECK(tensors_equal(ck.opt.v[i], opt.v[i]));
    }
    CHECK(ck.meta.at("extra").at("note").get<std::string>() == "after two steps");

    SUBCASE("a checkpoint without optimizer state loads as model only") {
        const std::string bare = fresh_dir("maml_ckpt_bare") + "/bare.ckpt";
        save_checkpoint(bare, model, nullptr, 3, {});
        LoadedCheckpoint plain = load_checkpoint(bare);
        CHECK_FALSE(plain.has_opt);
        CHECK(stores_equal(plain.model.store, model.store));
    }
}

TEST_CASE("damaged checkpoint files are reported as such") {
    MamlModel model = build_model(tiny_model_config(), 1);
    const std::string dir = fresh_dir("maml_ckpt_damage");
    const std::string good = dir + "/good.ckpt";
    save_checkpoint(good, model, nullptr, 1, {});
    const std::string bytes = slurp(good);

    CHECK_THROWS_AS(load_checkpoint(dir + "/missing.ckpt"), IoError);

    {
        std::ofstream out(dir + "/garbage.ckpt", std::ios::binary);
        out << "this is not a checkpoint at all";
    }
    CHECK_THROWS_AS(load_checkpoint(dir + "/garbage.ckpt"), IoError);

    {
        std::ofstream out(dir + "/truncated.ckpt", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(dir + "/truncated.ckpt"), IoError);

    {
        std::string tampered = bytes;
        const size_t pos = tampered.find("param/backbone");
        REQUIRE(pos != std::string::npos);
        tampered[pos] = 'q';
        std::ofstream out(dir + "/tampered.ckpt", std::ios::binary);
        out.write(tampered.data(), static_cast<std::streamsize>(tampered.size()));
    }
    CHECK_THROWS_AS(load_checkpoint(dir + "/tampered.ckpt"), IoError);
}

TEST_CASE("a poisoned parameter aborts training with a diagnostic checkpoint") {
    MamlModel model = build_model(tiny_model_config(), 1);
    model.store.at(0).data()[0] = std::numeric_limits<double>::quiet_NaN();
    SynthDataset ds = tiny_dataset(2);
    TrainConfig cfg = tiny_train_config();
    const std::string out = fresh_dir("maml_train_nan");

    CHECK_THROWS_AS(train(model, ds.cases, cfg, out), DivergenceError);
    CHECK(std::filesystem::exists(out + "/checkpoint_diverged.ckpt"));
    LoadedCheckpoint ck = load_checkpoint(out + "/checkpoint_diverged.ckpt");
    CHECK(ck.meta.at("extra").at("diverged_at_step").get<long>() == 1);
}

TEST_CASE("sliding-window predictions stitch into proper distributions") {
    MamlModel model = build_model(tiny_model_config(), 2);
    SynthSpec spec;
    spec.num_cases = 1;
    spec.shape = {12, 12, 12};
    spec.lesion_count_range = {1, 1};
    spec.lesion_radius_range = {3.0, 4.0};
    spec.noise_sigma = 4.0;
    spec.seed = 11;
    SynthDataset ds = generate_synthetic(spec);
    const MultiModalCase& c = ds.cases[0];

    MultimodalPrediction pred = predict_multimodal(model, c, {8, 8, 8});
    const std::vector<int> pshape = {2, 12, 12, 12};
    REQUIRE(pred.probs.data.shape() == pshape);
    const size_t vox = 12 * 12 * 12;
    const double* pd = pred.probs.data.data();
    const double* md = pred.mask.data.data();
    for (size_t v = 0; v < vox; ++v) {
        CHECK(pd[v] + pd[vox + v] == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(md[v] == ((pd[vox + v] > pd[v]) ? 1.0 : 0.0));
    }

    REQUIRE(pred.attentions.size() == 2);
    for (const auto& [id, att] : pred.attentions) {
        const std::vector<int> ashape = {1, 12, 12, 12};
        REQUIRE(att.data.shape() == ashape);
        CHECK(att.modality == id);
        for (size_t v = 0; v < vox; ++v) {
            CHECK(att.data.data()[v] > 0.0);
            CHECK(att.data.data()[v] < 1.0);
        }
    }

    SUBCASE("an oversized window is clamped to the volume") {
        MultimodalPrediction whole = predict_multimodal(model, c, {16, 16, 16});
        MultimodalPrediction exact = predict_multimodal(model, c, {12, 12, 12});
        CHECK(tensors_equal(whole.probs.data, exact.probs.data));
    }

    SUBCASE("a window the backbone cannot downsample is rejected") {
        CHECK_THROWS_AS(predict_multimodal(model, c, {7, 7, 7}), ConfigError);
    }

    SUBCASE("a case with a missing modality is rejected") {
        MultiModalCase broken = c;
        broken.volumes.erase(ModalityId{"VP"});
        CHECK_THROWS_AS(predict_multimodal(model, broken, {8, 8, 8}), DataError);
    }
}

TEST_CASE("single-modality prediction equals that branch run on the whole volume") {
    MamlModel model = build_model(tiny_model_config(), 4);
    SynthDataset ds = tiny_dataset(1, 13);
    const Volume& vol = ds.cases[0].volumes.at(ModalityId{"AP"});

    SinglePrediction pred = predict_single(model, vol, {16, 16, 16});

    ad::Tape tape(false);
    TapeParams tp = lift_params(tape, model.store, false);
    ad::Value probs = model_single_forward_t(tape, tp, model, vol.modality, vol.data);
    CHECK(tensors_equal(pred.probs.data, tape.val(probs)));

    const std::vector<int> mshape = {16, 16, 16};
    CHECK(pred.mask.data.shape() == mshape);
}

TEST_CASE("evaluation reports every case in order with sane aggregates") {
    MamlModel model = build_model(tiny_model_config(), 1);
    SynthDataset ds = tiny_dataset(3);

    EvalReport rep = evaluate(model, ds.cases, "multimodal", {8, 8, 8});
    CHECK(rep.mode == "multimodal");
    REQUIRE(rep.rows.size() == 3);
    double sum = 0.0;
    for (size_t i = 0; i < rep.rows.size(); ++i) {
        CHECK(rep.rows[i].case_id == ds.cases[i].case_id);
        CHECK(rep.rows[i].dice >= 0.0);
        CHECK(rep.rows[i].dice <= 1.0);
        sum += rep.rows[i].dice;
    }
    CHECK(rep.dice_agg.mean == doctest::Approx(sum / 3.0).epsilon(1e-12));
    CHECK(rep.assd_missing + (rep.assd_agg ? 1 : 0) >= 1);

    SUBCASE("worker count does not change the numbers") {
        EnvGuard guard("3");
        EvalReport threaded = evaluate(model, ds.cases, "multimodal", {8, 8, 8});
        REQUIRE(threaded.rows.size() == rep.rows.size());
        for (size_t i = 0; i < rep.rows.size(); ++i) {
            CHECK(threaded.rows[i].case_id == rep.rows[i].case_id);
            CHECK(threaded.rows[i].dice == rep.rows[i].dice);
            CHECK(threaded.rows[i].assd == rep.rows[i].assd);
        }
    }

    SUBCASE("single-modality mode scores through one branch") {
        EvalReport single = evaluate(model, ds.cases, "single:AP", {8, 8, 8});
        CHECK(single.mode == "single:AP");
        CHECK(single.rows.size() == 3);
    }

    SUBCASE("bad modes and bad worker counts are configuration errors") {
        CHECK_THROWS_AS(evaluate(model, ds.cases, "joint", {8, 8, 8}), ConfigError);
        CHECK_THROWS_AS(evaluate(model, ds.cases, "single:", {8, 8, 8}), ConfigError);
        CHECK_THROWS_AS(evaluate(model, ds.cases, "single:T2", {8, 8, 8}), ConfigError);
        EnvGuard guard("zero");
        CHECK_THROWS_AS(evaluate(model, ds.cases, "multimodal", {8, 8, 8}), ConfigError);
    }

    SUBCASE("a case that lacks the requested modality is a data error") {
        std::vector<MultiModalCase> cases = ds.cases;
        cases[1].volumes.erase(ModalityId{"VP"});
        CHECK_THROWS_AS(evaluate(model, cases, "multimodal", {8, 8, 8}), DataError);
        CHECK_THROWS_AS(evaluate(model, cases, "single:VP", {8, 8, 8}), DataError);
        EvalReport ap_only = evaluate(model, cases, "single:AP", {8, 8, 8});
        CHECK(ap_only.rows.size() == 3);
    }
}

TEST_CASE("worker count comes from the environment and is strictly validated") {
    {
        EnvGuard guard(nullptr);
        CHECK(worker_count() == 1);
    }
    {
        EnvGuard guard("4");
        CHECK(worker_count() == 4);
    }
    for (const char* bad : {"0", "65", "-2", "abc", "3.5"}) {
        EnvGuard guard(bad);
        CHECK_THROWS_AS(worker_count(), ConfigError);
    }
}

TEST_CASE("reports format and export with one line per case") {
    EvalReport rep;
    rep.mode = "multimodal";
    rep.rows.push_back({"case_0000", 0.875, 1.25});
    rep.rows.push_back({"case_0001", 0.5, std::nullopt});
    rep.dice_agg = aggregate_per_case({0.875, 0.5});
    rep.assd_agg = aggregate_per_case({1.25});
    rep.assd_missing = 1;

    const std::string text = format_report(rep);
    CHECK(text.find("case_0000") != std::string::npos);
    CHECK(text.find("case_0001") != std::string::npos);
    CHECK(text.find("multimodal") != std::string::npos);

    const std::string path = fresh_dir("maml_report") + "/report.csv";
    write_report_csv(path, rep);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string header;
    std::getline(in, header);
    CHECK(header.find("case_id") != std::string::npos);
    CHECK(header.find("dice") != std::string::npos);
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
}

TEST_CASE("the one-modality baseline trains and predicts on its own") {
    SynthDataset ds = tiny_dataset();
    TrainConfig cfg = tiny_train_config();
    SingleModel model = build_single_model(tiny_model_config().backbone, ModalityId{"AP"}, 6);
    const std::string out = fresh_dir("maml_single_train");

    TrainResult res = train_single(model, ds.cases, cfg, out);
    CHECK(res.epochs_run == 1);
    CHECK(res.steps_run == 2);
    CHECK(std::isfinite(res.final_total_loss));
    const auto lines = read_jsonl(res.log_path);
    REQUIRE(lines.size() == 2);
    CHECK(lines[0].at("step").get<long>() == 1);
    CHECK(std::isfinite(lines[0].at("total").get<double>()));

    const Volume& vol = ds.cases[0].volumes.at(ModalityId{"AP"});
    SinglePrediction pred = predict_single_model(model, vol, {8, 8, 8});
    const std::vector<int> pshape = {2, 16, 16, 16};
    REQUIRE(pred.probs.data.shape() == pshape);
    const size_t vox = 16 * 16 * 16;
    for (size_t v = 0; v < vox; ++v)
        CHECK(pred.probs.data.data()[v] + pred.probs.data.data()[vox + v] ==
              doctest::Approx(1.0).epsilon(1e-9));

    SUBCASE("two same-seed baseline runs agree exactly") {
        SingleModel m1 = build_single_model(tiny_model_config().backbone, ModalityId{"AP"}, 6);
        TrainResult r1 = train_single(m1, ds.cases, cfg, fresh_dir("maml_single_a"));
        CHECK(slurp(r1.log_path) == slurp(res.log_path));
        CHECK(stores_equal(m1.store, model.store));
    }
}

TEST_CASE("nonsense training configurations never start") {
    MamlModel model = build_model(tiny_model_config(), 1);
    SynthDataset ds = tiny_dataset(2);
    const std::string out = fresh_dir("maml_train_invalid");

    TrainConfig cfg = tiny_train_config();
    cfg.lr = 0.0;
    CHECK_THROWS_AS(train(model, ds.cases, cfg, out), ConfigError);

    cfg = tiny_train_config();
    cfg.epochs = 0;
    CHECK_THROWS_AS(train(model, ds.cases, cfg, out), ConfigError);

    cfg = tiny_train_config();
    cfg.lambda = -0.25;
    CHECK_THROWS_AS(train(model, ds.cases, cfg, out), ConfigError);

    cfg = tiny_train_config();
    cfg.early_stop_dice = 1.5;
    CHECK_THROWS_AS(train(model, ds.cases, cfg, out), ConfigError);

    cfg = tiny_train_config();
    CHECK_THROWS_AS(train(model, {}, cfg, out), DataError);

    std::vector<MultiModalCase> cases = ds.cases;
    cases[0].volumes.erase(ModalityId{"VP"});
    CHECK_THROWS_AS(train(model, cases, cfg, out), DataError);
}
