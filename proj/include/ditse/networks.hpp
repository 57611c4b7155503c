#ifndef DITSE_NETWORKS_HPP
#define DITSE_NETWORKS_HPP

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ditse/audio.hpp"
#include "ditse/tensor.hpp"

namespace ditse::nn {

// ---------------------------------------------------------------- building blocks

template <typename T>
struct Linear {
    Parameter<T> W, b;

    void setup(const std::string& name, int in, int out, std::mt19937_64& rng, bool zero_init = false) {
        W.setup(name + ".w", in, out);
        b.setup(name + ".b", 1, out);
        if (!zero_init) W.init_kaiming(rng, in);
    }
    Var<T> fwd(Graph<T>& g, Var<T> x) { return add_rowvec(matmul(x, g.param(W)), g.param(b)); }
    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&W);
        out.push_back(&b);
    }
};

// standard sinusoidal table, rows = positions
template <typename T>
Mat<T> sinusoid_table(int n, int dim, double scale = 1.0) {
    Mat<T> pe(n, dim);
    const int half = dim / 2;
    for (int p = 0; p < n; ++p)
        for (int i = 0; i < half; ++i) {
            const double omega = std::exp(-std::log(10000.0) * double(i) / double(half));
            pe(p, 2 * i) = T(std::sin(scale * p * omega));
            pe(p, 2 * i + 1) = T(std::cos(scale * p * omega));
        }
    if (dim % 2) pe.col(dim - 1).setZero();
    return pe;
}

// scaled dot-product attention over pre-projected q/k/v, multi-head on the col axis
template <typename T>
Var<T> attention(Graph<T>& g, Var<T> q, Var<T> k, Var<T> v, int n_heads) {
    const int d = q.cols();
    if (d % n_heads != 0) throw TensorError("attention: dim not divisible by heads");
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows())
        throw TensorError("attention: k/v shape mismatch");
    const int hd = d / n_heads;
    const T sc = T(1) / T(std::sqrt(double(hd)));
    std::vector<Var<T>> heads;
    heads.reserve(size_t(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Var<T> qi = slice_cols(q, h * hd, hd);
        Var<T> ki = slice_cols(k, h * hd, hd);
        Var<T> vi = slice_cols(v, h * hd, hd);
        Var<T> att = softmax_rows(scale(matmul(qi, transpose(ki)), sc));
        heads.push_back(matmul(att, vi));
    }
    return concat_cols(heads);
}

// ---------------------------------------------------------------- timestep embedding

// sinusoidal basis over pseudo-positions t * 1000, refined by a 2-layer MLP;
// the same vector feeds adaLN modulation and optional input concatenation
template <typename T>
struct TimestepEmbedding {
    int dim = 0;
    Linear<T> l1, l2;

    void setup(const std::string& name, int d, std::mt19937_64& rng) {
        dim = d;
        l1.setup(name + ".mlp1", d, d, rng);
        l2.setup(name + ".mlp2", d, d, rng);
    }

    Mat<T> basis(double t) const {
        if (!(t >= 0.0 && t <= 1.0)) throw TensorError("timestep_embed: t outside [0,1]");
        const double pos = t * 1000.0;
        Mat<T> out(1, dim);
        const int half = dim / 2;
        for (int i = 0; i < half; ++i) {
            const double omega = std::exp(-std::log(10000.0) * double(i) / double(half));
            out(0, 2 * i) = T(std::sin(pos * omega));
            out(0, 2 * i + 1) = T(std::cos(pos * omega));
        }
        if (dim % 2) out(0, dim - 1) = T(0);
        return out;
    }

    Var<T> fwd(Graph<T>& g, double t) {
        Var<T> h = g.constant(basis(t));
        return l2.fwd(g, silu(l1.fwd(g, h)));
    }

    void collect(std::vector<Parameter<T>*>& out) {
        l1.collect(out);
        l2.collect(out);
    }
};

// ---------------------------------------------------------------- feature extractor

// pluggable stand-in for a pretrained speech feature model: any extractor
// producing >= 2 fixed-dim feature maps at its own frame rate fits here
struct FeatureExtractor {
    virtual ~FeatureExtractor() = default;
    virtual std::vector<Eigen::MatrixXf> extract(const AudioBuffer& in) const = 0;
    virtual int layers() const = 0;
    virtual int dim() const = 0;
    virtual int hop() const = 0;
    virtual int sample_rate() const = 0;
};

namespace feat_detail {

// regression deltas with a +-2 frame window, edge rows replicated
inline Eigen::MatrixXf delta_features(const Eigen::MatrixXf& x) {
    const int n = int(x.rows());
    Eigen::MatrixXf d = Eigen::MatrixXf::Zero(n, x.cols());
    const float denom = 2.0f * (1.0f + 4.0f);
    auto row_at = [&](int i) { return x.row(std::clamp(i, 0, n - 1)); };
    for (int t = 0; t < n; ++t)
        d.row(t) = (1.0f * (row_at(t + 1) - row_at(t - 1)) + 2.0f * (row_at(t + 2) - row_at(t - 2))) / denom;
    return d;
}

}  // namespace feat_detail

// three "layers": log-mel energies plus first and second temporal differences
struct MelFeatureExtractor : FeatureExtractor {
    int rate = 16000;
    int n_mels = 40;
    int window = 512;
    int hop_len = 160;

    std::vector<Eigen::MatrixXf> extract(const AudioBuffer& in) const override {
        if (in.sample_rate != rate) throw AudioError("feature extractor: wrong sample rate");
        // reflect-pad so a whole number of hops maps to a whole number of frames
        const int pad = (window - hop_len) / 2;
        AudioBuffer padded;
        padded.sample_rate = in.sample_rate;
        const long n = long(in.samples.size());
        padded.samples.resize(size_t(n + 2L * pad));
        for (long i = 0; i < n + 2L * pad; ++i)
            padded.samples[size_t(i)] = ditse::detail::reflect_at(in.samples, i - pad);
        auto spec = stft(padded, window, hop_len);
        Eigen::MatrixXf base = mel_features(spec, n_mels);
        Eigen::MatrixXf d1 = feat_detail::delta_features(base);
        Eigen::MatrixXf d2 = feat_detail::delta_features(d1);
        return {base, d1, d2};
    }
    int layers() const override { return 3; }
    int dim() const override { return n_mels; }
    int hop() const override { return hop_len; }
    int sample_rate() const override { return rate; }
};

// convex combination of same-shape feature maps with learned layer logits
template <typename T>
Var<T> weighted_sum_features(Graph<T>& g, const std::vector<Mat<T>>& maps, Var<T> logits) {
    if (maps.empty()) throw TensorError("weighted_sum_features: no maps");
    if (logits.rows() != 1 || logits.cols() != int(maps.size()))
        throw TensorError("weighted_sum_features: logits must be 1 x n_maps");
    for (const auto& m : maps)
        if (m.rows() != maps[0].rows() || m.cols() != maps[0].cols())
            throw TensorError("weighted_sum_features: map shape mismatch");
    Var<T> w = softmax_rows(logits);
    Var<T> acc = mul_scalar_var(g.constant(maps[0]), slice_cols(w, 0, 1));
    for (int l = 1; l < int(maps.size()); ++l)
        acc = add(acc, mul_scalar_var(g.constant(maps[size_t(l)]), slice_cols(w, l, 1)));
    return acc;
}

// ---------------------------------------------------------------- conditioner

enum class ConditionerMode { masking, mapping };

struct ConditionerConfig {
    int n_layers = 2;
    int model_dim = 64;
    int ff_dim = 128;
    int conv_kernel = 15;
    int latent_dim = 16;
    int n_heads = 4;
    ConditionerMode mode = ConditionerMode::masking;
};

// Conformer stack mapping a noisy latent to a pre-enhanced latent. In masking
// mode the head emits a non-negative mask multiplied onto the input; in
// mapping mode it regresses the target latent directly.
template <typename T>
struct Conditioner {
    struct Block {
        Linear<T> ff1_a, ff1_b;   // half-step feed-forward
        Linear<T> q, k, v, o;     // self-attention
        Linear<T> pw1, pw2;       // conv module pointwise layers
        Parameter<T> dw;          // depthwise kernel, k x dim
        Linear<T> ff2_a, ff2_b;
    };

    ConditionerConfig cfg;
    Linear<T> in_proj, out_proj;
    std::vector<Block> blocks;

    void setup(const ConditionerConfig& c, std::mt19937_64& rng) {
        cfg = c;
        if (c.model_dim % c.n_heads != 0) throw TensorError("conditioner: dim not divisible by heads");
        if (c.conv_kernel % 2 == 0) throw TensorError("conditioner: conv kernel must be odd");
        in_proj.setup("cond.in", c.latent_dim, c.model_dim, rng);
        out_proj.setup("cond.out", c.model_dim, c.latent_dim, rng);
        blocks.resize(size_t(c.n_layers));
        for (int i = 0; i < c.n_layers; ++i) {
            auto& b = blocks[size_t(i)];
            const std::string p = "cond.b" + std::to_string(i);
            b.ff1_a.setup(p + ".ff1a", c.model_dim, c.ff_dim, rng);
            b.ff1_b.setup(p + ".ff1b", c.ff_dim, c.model_dim, rng);
            b.q.setup(p + ".q", c.model_dim, c.model_dim, rng);
            b.k.setup(p + ".k", c.model_dim, c.model_dim, rng);
            b.v.setup(p + ".v", c.model_dim, c.model_dim, rng);
            b.o.setup(p + ".o", c.model_dim, c.model_dim, rng);
            b.pw1.setup(p + ".pw1", c.model_dim, 2 * c.model_dim, rng);
            b.pw2.setup(p + ".pw2", c.model_dim, c.model_dim, rng);
            b.dw.setup(p + ".dw", c.conv_kernel, c.model_dim);
            b.dw.init_kaiming(rng, c.conv_kernel);
            b.ff2_a.setup(p + ".ff2a", c.model_dim, c.ff_dim, rng);
            b.ff2_b.setup(p + ".ff2b", c.ff_dim, c.model_dim, rng);
        }
    }

    Var<T> fwd(Graph<T>& g, Var<T> noisy) {
        if (noisy.cols() != cfg.latent_dim) throw TensorError("conditioner: latent dim mismatch");
        Var<T> x = in_proj.fwd(g, noisy);
        const Mat<T> pe = sinusoid_table<T>(noisy.rows(), cfg.model_dim);
        for (auto& b : blocks) {
            x = add(x, scale(b.ff1_b.fwd(g, silu(b.ff1_a.fwd(g, layer_norm(x)))), T(0.5)));
            {
                Var<T> h = layer_norm(x);
                Var<T> pev = g.constant(pe);
                Var<T> att = attention(g, add(b.q.fwd(g, h), pev), add(b.k.fwd(g, h), pev),
                                       b.v.fwd(g, h), cfg.n_heads);
                x = add(x, b.o.fwd(g, att));
            }
            {
                Var<T> h = b.pw1.fwd(g, layer_norm(x));
                Var<T> gates = mul(slice_cols(h, 0, cfg.model_dim),
                                   sigmoid(slice_cols(h, cfg.model_dim, cfg.model_dim)));
                Var<T> cv = depthwise_conv1d(gates, g.param(b.dw));
                x = add(x, b.pw2.fwd(g, silu(cv)));
            }
            x = add(x, scale(b.ff2_b.fwd(g, silu(b.ff2_a.fwd(g, layer_norm(x)))), T(0.5)));
        }
        Var<T> raw = out_proj.fwd(g, layer_norm(x));
        if (cfg.mode == ConditionerMode::masking) return mul(softplus(raw), noisy);
        return raw;
    }

    void collect(std::vector<Parameter<T>*>& out) {
        in_proj.collect(out);
        out_proj.collect(out);
        for (auto& b : blocks) {
            b.ff1_a.collect(out);
            b.ff1_b.collect(out);
            b.q.collect(out);
            b.k.collect(out);
            b.v.collect(out);
            b.o.collect(out);
            b.pw1.collect(out);
            b.pw2.collect(out);
            out.push_back(&b.dw);
            b.ff2_a.collect(out);
            b.ff2_b.collect(out);
        }
    }
};

// ---------------------------------------------------------------- DiT backbone

struct DiTConfig {
    int n_layers = 4;
    int n_heads = 4;
    int channels = 128;
    int latent_dim = 16;
    int cond_feature_dim = 40;
    double dropout = 0.0;
    bool concat_timestep = true;  // append the timestep embedding to every input frame
};

// diffusion transformer with adaLN-zero timestep modulation and one
// cross-attention sublayer per block reading the feature stream
template <typename T>
struct DiT {
    struct Block {
        Linear<T> mod;            // silu(temb) -> 9 modulation row vectors, zero-init
        Linear<T> q, k, v, o;     // self-attention
        Linear<T> cq, ck, cv, co; // cross-attention (k/v from feature stream)
        Linear<T> f1, f2;         // feed-forward
    };

    DiTConfig cfg;
    TimestepEmbedding<T> temb;
    Linear<T> in_proj;
    Linear<T> feat_proj;  // cond_feature_dim -> channels, shared by all blocks
    std::vector<Block> blocks;
    Linear<T> final_mod;  // silu(temb) -> 2 modulation vectors, zero-init
    Linear<T> head;
    Parameter<T> null_feature;    // 1 x cond_feature_dim learned null token
    Parameter<T> null_pre_latent; // 1 x latent_dim learned null pre-latent

    void setup(const DiTConfig& c, std::mt19937_64& rng) {
        cfg = c;
        if (c.channels % c.n_heads != 0) throw TensorError("dit: channels not divisible by heads");
        temb.setup("dit.temb", c.channels, rng);
        const int in_cols = 2 * c.latent_dim + (c.concat_timestep ? c.channels : 0);
        in_proj.setup("dit.in", in_cols, c.channels, rng);
        feat_proj.setup("dit.featproj", c.cond_feature_dim, c.channels, rng);
        blocks.resize(size_t(c.n_layers));
        for (int i = 0; i < c.n_layers; ++i) {
            auto& b = blocks[size_t(i)];
            const std::string p = "dit.b" + std::to_string(i);
            b.mod.setup(p + ".mod", c.channels, 9 * c.channels, rng, /*zero_init=*/true);
            b.q.setup(p + ".q", c.channels, c.channels, rng);
            b.k.setup(p + ".k", c.channels, c.channels, rng);
            b.v.setup(p + ".v", c.channels, c.channels, rng);
            b.o.setup(p + ".o", c.channels, c.channels, rng);
            b.cq.setup(p + ".cq", c.channels, c.channels, rng);
            b.ck.setup(p + ".ck", c.channels, c.channels, rng);
            b.cv.setup(p + ".cv", c.channels, c.channels, rng);
            b.co.setup(p + ".co", c.channels, c.channels, rng);
            b.f1.setup(p + ".f1", c.channels, 4 * c.channels, rng);
            b.f2.setup(p + ".f2", 4 * c.channels, c.channels, rng);
        }
        final_mod.setup("dit.finalmod", c.channels, 2 * c.channels, rng, /*zero_init=*/true);
        head.setup("dit.head", c.channels, c.latent_dim, rng);
        null_feature.setup("dit.nullfeat", 1, c.cond_feature_dim);
        null_feature.init_uniform(rng, T(0.02));
        null_pre_latent.setup("dit.nullpre", 1, c.latent_dim);
        null_pre_latent.init_uniform(rng, T(0.02));
    }

    // features: one frame map at its own rate, or nullptr for the CFG null branch;
    // pre_latent: nullptr likewise substitutes the learned null pre-latent
    Var<T> fwd(Graph<T>& g, Var<T> z_t, const Var<T>* pre_latent, double t, const Var<T>* features) {
        if (z_t.cols() != cfg.latent_dim) throw TensorError("dit: latent dim mismatch");
        const int frames = z_t.rows();
        Var<T> pre = pre_latent ? *pre_latent : broadcast_rows(g.param(null_pre_latent), frames);
        if (pre.rows() != frames) throw TensorError("dit: pre-latent frame count mismatch");
        Var<T> feats = features ? *features : broadcast_rows(g.param(null_feature), 1);
        if (feats.cols() != cfg.cond_feature_dim) throw TensorError("dit: feature dim mismatch");

        Var<T> tv = temb.fwd(g, t);        // 1 x channels
        Var<T> tmod = silu(tv);
        std::vector<Var<T>> in_parts{z_t, pre};
        if (cfg.concat_timestep) in_parts.push_back(broadcast_rows(tv, frames));
        Var<T> x = in_proj.fwd(g, concat_cols(in_parts));

        const Mat<T> pe = sinusoid_table<T>(frames, cfg.channels);
        const Mat<T> pe_f = sinusoid_table<T>(feats.rows(), cfg.channels);
        Var<T> fkv = feat_proj.fwd(g, feats);

        for (auto& b : blocks) {
            Var<T> m = b.mod.fwd(g, tmod);  // 1 x 9*channels
            auto chunk = [&](int i) { return slice_cols(m, i * cfg.channels, cfg.channels); };
            auto modulate = [&](Var<T> h, int i) {
                return add_rowvec(mul_rowvec(layer_norm(h), add_scalar(chunk(i + 1), T(1))), chunk(i));
            };
            {
                Var<T> h = modulate(x, 0);
                Var<T> pev = g.constant(pe);
                Var<T> att = attention(g, add(b.q.fwd(g, h), pev), add(b.k.fwd(g, h), pev),
                                       b.v.fwd(g, h), cfg.n_heads);
                x = add(x, mul_rowvec(b.o.fwd(g, att), chunk(2)));
            }
            {
                Var<T> h = modulate(x, 3);
                Var<T> keys = add(b.ck.fwd(g, fkv), g.constant(pe_f));
                Var<T> att = attention(g, b.cq.fwd(g, h), keys, b.cv.fwd(g, fkv), cfg.n_heads);
                x = add(x, mul_rowvec(b.co.fwd(g, att), chunk(5)));
            }
            {
                Var<T> h = modulate(x, 6);
                x = add(x, mul_rowvec(b.f2.fwd(g, silu(b.f1.fwd(g, h))), chunk(8)));
            }
        }
        Var<T> fm = final_mod.fwd(g, tmod);
        Var<T> shift = slice_cols(fm, 0, cfg.channels);
        Var<T> sc = add_scalar(slice_cols(fm, cfg.channels, cfg.channels), T(1));
        return head.fwd(g, add_rowvec(mul_rowvec(layer_norm(x), sc), shift));
    }

    void collect(std::vector<Parameter<T>*>& out) {
        temb.collect(out);
        in_proj.collect(out);
        feat_proj.collect(out);
        for (auto& b : blocks) {
            b.mod.collect(out);
            b.q.collect(out);
            b.k.collect(out);
            b.v.collect(out);
            b.o.collect(out);
            b.cq.collect(out);
            b.ck.collect(out);
            b.cv.collect(out);
            b.co.collect(out);
            b.f1.collect(out);
            b.f2.collect(out);
        }
        final_mod.collect(out);
        head.collect(out);
        out.push_back(&null_feature);
        out.push_back(&null_pre_latent);
    }
};

}  // namespace ditse::nn

#endif  // DITSE_NETWORKS_HPP
