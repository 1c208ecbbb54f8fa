#include "maml/backbone.hpp"

#include <stdexcept>

namespace maml {

void validate_backbone_config(const BackboneConfig& cfg) {
    if (cfg.levels < 1) throw ConfigError("backbone: levels must be >= 1");
    if (cfg.base_channels < 1) throw ConfigError("backbone: base_channels must be >= 1");
    if (cfg.feature_channels < 1) throw ConfigError("backbone: feature_channels must be >= 1");
    if (cfg.in_channels < 1) throw ConfigError("backbone: in_channels must be >= 1");
    if (!(cfg.norm_epsilon > 0.0)) throw ConfigError("backbone: norm_epsilon must be positive");
    if (!(cfg.leaky_slope >= 0.0)) throw ConfigError("backbone: leaky_slope must be >= 0");
}

bool shape_divisible(const std::vector<int>& dhw, int levels) {
    const int factor = 1 << (levels - 1);
    for (int d : dhw)
        if (d % factor != 0) return false;
    return true;
}

BackboneNet build_backbone(ParamStore& store, const std::string& prefix,
                           const BackboneConfig& cfg, std::mt19937_64& rng) {
    validate_backbone_config(cfg);
    BackboneNet net;
    net.cfg = cfg;
    auto ch = [&](int level) { return cfg.base_channels << level; };

    for (int l = 0; l < cfg.levels; ++l) {
        const int cin = l == 0 ? cfg.in_channels : ch(l);
        const std::string base = prefix + ".enc" + std::to_string(l);
        net.enc.push_back({add_conv(store, base + ".c0", cin, ch(l), 3, rng),
                           add_conv(store, base + ".c1", ch(l), ch(l), 3, rng)});
        if (l + 1 < cfg.levels)
            net.down.push_back(
                add_conv(store, prefix + ".down" + std::to_string(l + 1), ch(l), ch(l + 1), 3, rng));
    }
    for (int l = cfg.levels - 2; l >= 0; --l) {
        const std::string base = prefix + ".dec" + std::to_string(l);
        net.up.push_back(add_conv(store, base + ".up", ch(l + 1), ch(l), 3, rng));
        net.dec.push_back({add_conv(store, base + ".c0", 2 * ch(l), ch(l), 3, rng),
                           add_conv(store, base + ".c1", ch(l), ch(l), 3, rng)});
    }
    net.proj = add_conv(store, prefix + ".proj", cfg.base_channels, cfg.feature_channels, 1, rng);
    net.head = add_conv(store, prefix + ".head", cfg.feature_channels, 2, 1, rng);
    return net;
}

namespace {

ad::Value conv_norm_act(const TapeParams& tp, const ConvRef& c, ad::Value x, int stride,
                        const BackboneConfig& cfg) {
    ad::Value y = ad::conv3d(x, tp.values[static_cast<size_t>(c.w)],
                             tp.values[static_cast<size_t>(c.b)], stride);
    y = ad::instance_norm(y, cfg.norm_epsilon);
    return ad::leaky_relu(y, cfg.leaky_slope);
}

}  // namespace

ad::Value backbone_forward_t(ad::Tape& tape, const TapeParams& tp, const BackboneNet& net,
                             ad::Value input) {
    const BackboneConfig& cfg = net.cfg;
    const Tensor& in = tape.val(input);
    if (in.rank() != 4 || in.dim(0) != cfg.in_channels)
        throw ConfigError("backbone: input must have " + std::to_string(cfg.in_channels) +
                          " channel(s)");
    if (!shape_divisible({in.dim(1), in.dim(2), in.dim(3)}, cfg.levels))
        throw ConfigError("backbone: input dims " + Tensor::shape_str(in.shape()) +
                          " not divisible by 2^(levels-1)");

    std::vector<ad::Value> skips;
    ad::Value x = input;
    for (int l = 0; l < cfg.levels; ++l) {
        if (l > 0) x = conv_norm_act(tp, net.down[static_cast<size_t>(l - 1)], x, 2, cfg);
        x = conv_norm_act(tp, net.enc[static_cast<size_t>(l)][0], x, 1, cfg);
        x = conv_norm_act(tp, net.enc[static_cast<size_t>(l)][1], x, 1, cfg);
        skips.push_back(x);
    }
    // net.up / net.dec are stored deepest-first
    for (int l = cfg.levels - 2, i = 0; l >= 0; --l, ++i) {
        ad::Value u = ad::upsample_nearest2(x);
        u = conv_norm_act(tp, net.up[static_cast<size_t>(i)], u, 1, cfg);
        x = ad::concat_channels({skips[static_cast<size_t>(l)], u});
        x = conv_norm_act(tp, net.dec[static_cast<size_t>(i)][0], x, 1, cfg);
        x = conv_norm_act(tp, net.dec[static_cast<size_t>(i)][1], x, 1, cfg);
    }
    return conv_norm_act(tp, net.proj, x, 1, cfg);
}

ad::Value modality_head_t(ad::Tape& tape, const TapeParams& tp, const BackboneNet& net,
                          ad::Value feature) {
    const Tensor& f = tape.val(feature);
    if (f.rank() != 4 || f.dim(0) != net.cfg.feature_channels)
        throw ConfigError("modality head: feature must have " +
                          std::to_string(net.cfg.feature_channels) + " channels");
    ad::Value logits = ad::conv3d(feature, tp.values[static_cast<size_t>(net.head.w)],
                                  tp.values[static_cast<size_t>(net.head.b)], 1);
    return ad::softmax_channels(logits);
}

FeatureMap backbone_forward(const Volume& vol, const ParamStore& store, const BackboneNet& net) {
    ad::Tape tape(false);
    TapeParams tp = lift_params(tape, store, false);
    Tensor in({1, vol.data.dim(0), vol.data.dim(1), vol.data.dim(2)});
    std::copy(vol.data.data(), vol.data.data() + vol.data.numel(), in.data());
    ad::Value f = backbone_forward_t(tape, tp, net, tape.leaf(std::move(in), false));
    FeatureMap out;
    out.data = tape.val(f);
    out.modality = vol.modality;
    return out;
}

ProbMap modality_head(const FeatureMap& feat, const ParamStore& store, const BackboneNet& net) {
    ad::Tape tape(false);
    TapeParams tp = lift_params(tape, store, false);
    ad::Value p = modality_head_t(tape, tp, net, tape.leaf(feat.data, false));
    ProbMap out;
    out.data = tape.val(p);
    return out;
}

Tensor instance_norm(const Tensor& x, double eps) { return ad::eval_instance_norm(x, eps); }

Tensor leaky_relu(const Tensor& x, double slope) { return ad::eval_leaky_relu(x, slope); }

}  // namespace maml
