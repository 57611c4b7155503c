#ifndef DITSE_TRAINING_HPP
#define DITSE_TRAINING_HPP

#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "ditse/codec.hpp"
#include "ditse/diffusion.hpp"
#include "ditse/networks.hpp"
#include "ditse/synthdata.hpp"

namespace ditse::nn {

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    int batch_size = 8;
    double segment_seconds = 5.0;
    long total_steps = 1000;
    double warmup_fraction = 0.10;
    double peak_lr = 1e-4;
    double final_lr = 1e-5;
    double weight_decay = 0.0;
    double cfg_dropout_p = 0.10;
    bool independent_cfg_drop = false;  // default: one joint drop of both streams
    double prefix_p = 0.50;
    double prefix_max_fraction = 0.50;
    double lambda_cond = 1.0;
    uint64_t seed = 0;

    void validate() const {
        auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!prob(cfg_dropout_p) || !prob(prefix_p) || !prob(prefix_max_fraction) ||
            !prob(warmup_fraction))
            throw TrainError("train config: probability outside [0,1]");
        if (!(peak_lr > final_lr && final_lr > 0.0))
            throw TrainError("train config: need peak_lr > final_lr > 0");
    }
};

// linear warmup from zero to peak over the first warmup fraction, then
// cosine decay down to the final rate
inline double lr_at(long step, const TrainConfig& cfg) {
    const double T = double(cfg.total_steps);
    const double w = cfg.warmup_fraction * T;
    const double s = double(step);
    if (s <= w) return w > 0.0 ? cfg.peak_lr * s / w : cfg.peak_lr;
    const double u = (s - w) / (T - w);
    return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + std::cos(M_PI * u));
}

// -------------------------------------------------------------- prompting / CFG

struct PrefixPrompt {
    Eigen::MatrixXf z;          // z_t with the prompt prefix substituted
    Eigen::MatrixXf loss_mask;  // 1 where the diffusion loss applies, 0 on prompt rows
    int prompt_frames = 0;
};

inline PrefixPrompt apply_prefix_prompt(const Eigen::MatrixXf& z_t, const Eigen::MatrixXf& x,
                                        std::mt19937_64& rng, const TrainConfig& cfg) {
    if (z_t.rows() != x.rows() || z_t.cols() != x.cols())
        throw TrainError("apply_prefix_prompt: shape mismatch");
    PrefixPrompt out;
    out.z = z_t;
    out.loss_mask = Eigen::MatrixXf::Ones(z_t.rows(), z_t.cols());
    const int k_max = int(std::floor(cfg.prefix_max_fraction * double(z_t.rows())));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (k_max < 1 || u(rng) >= cfg.prefix_p) return out;
    std::uniform_int_distribution<int> kd(1, k_max);
    out.prompt_frames = kd(rng);
    out.z.topRows(out.prompt_frames) = x.topRows(out.prompt_frames);
    out.loss_mask.topRows(out.prompt_frames).setZero();
    return out;
}

struct CondDrop {
    bool drop_features = false;
    bool drop_pre_latent = false;
};

inline CondDrop cfg_dropout(std::mt19937_64& rng, const TrainConfig& cfg) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    CondDrop d;
    if (cfg.independent_cfg_drop) {
        d.drop_features = u(rng) < cfg.cfg_dropout_p;
        d.drop_pre_latent = u(rng) < cfg.cfg_dropout_p;
    } else {
        const bool drop = u(rng) < cfg.cfg_dropout_p;
        d.drop_features = drop;
        d.drop_pre_latent = drop;
    }
    return d;
}

// -------------------------------------------------------------- joint loss

struct DiffLossParts {
    double total = 0, diffusion = 0, conditioner = 0;
};

// masked v-prediction MSE plus the conditioner's L1 to the clean latent.
// The pre-latent fed to the DiT is detached, so the conditioner trains from
// its own L1 term only and lambda_cond = 0 silences it completely.
template <typename T>
Var<T> diffusion_loss(Graph<T>& g, DiT<T>& dit, Conditioner<T>& cond, Parameter<T>& feat_logits,
                      const Mat<T>& z_t, double t, const Mat<T>& v_tgt, const Mat<T>& loss_mask,
                      const Mat<T>& x_clean, const Mat<T>& y_latent,
                      const std::vector<Mat<T>>& feat_maps, const CondDrop& drop,
                      double lambda_cond, DiffLossParts* parts = nullptr) {
    Var<T> pre = cond.fwd(g, g.constant(y_latent));
    Var<T> pre_detached = g.constant(pre.val());
    Var<T> vhat;
    if (drop.drop_features) {
        vhat = dit.fwd(g, g.constant(z_t), drop.drop_pre_latent ? nullptr : &pre_detached, t, nullptr);
    } else {
        Var<T> feats = weighted_sum_features(g, feat_maps, g.param(feat_logits));
        vhat = dit.fwd(g, g.constant(z_t), drop.drop_pre_latent ? nullptr : &pre_detached, t, &feats);
    }
    Var<T> diff = mse_loss(vhat, v_tgt, &loss_mask);
    Var<T> cond_l1 = l1_loss(pre, x_clean);
    Var<T> total = add(diff, scale(cond_l1, T(lambda_cond)));
    if (parts) {
        parts->diffusion = double(diff.val()(0, 0));
        parts->conditioner = double(cond_l1.val()(0, 0));
        parts->total = double(total.val()(0, 0));
    }
    return total;
}

// -------------------------------------------------------------- checkpoints

inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const std::vector<Parameter<float>*>& params,
                            const nlohmann::json& meta) {
    nlohmann::json header;
    header["version"] = kCheckpointVersion;
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();
    for (const auto* p : params)
        header["tensors"].push_back({{"name", p->name},
                                     {"rows", p->value.rows()},
                                     {"cols", p->value.cols()},
                                     {"dtype", "f32"}});
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw TrainError("checkpoint: cannot open for writing: " + path);
    out.write("DITS", 4);
    const uint32_t ver = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&ver), 4);
    const uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), std::streamsize(hs.size()));
    for (const auto* p : params) {
        // row-major so the layout is independent of the matrix library
        for (int i = 0; i < p->value.rows(); ++i)
            for (int j = 0; j < p->value.cols(); ++j) {
                const float v = p->value(i, j);
                out.write(reinterpret_cast<const char*>(&v), 4);
            }
    }
    if (!out) throw TrainError("checkpoint: short write: " + path);
}

struct LoadedCheckpoint {
    nlohmann::json meta;
    std::map<std::string, Eigen::MatrixXf> tensors;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TrainError("checkpoint: cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "DITS") throw TrainError("checkpoint: bad magic");
    uint32_t ver = 0;
    in.read(reinterpret_cast<char*>(&ver), 4);
    if (ver != kCheckpointVersion) throw TrainError("checkpoint: unsupported version");
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    in.read(hs.data(), std::streamsize(hlen));
    if (!in) throw TrainError("checkpoint: truncated header");
    nlohmann::json header = nlohmann::json::parse(hs);

    LoadedCheckpoint ck;
    ck.meta = header.value("meta", nlohmann::json::object());
    for (const auto& t : header.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const long rows = t.at("rows").get<long>();
        const long cols = t.at("cols").get<long>();
        Eigen::MatrixXf m(rows, cols);
        for (long i = 0; i < rows; ++i)
            for (long j = 0; j < cols; ++j) {
                float v = 0.0f;
                in.read(reinterpret_cast<char*>(&v), 4);
                m(i, j) = v;
            }
        if (!in) throw TrainError("checkpoint: truncated payload at tensor " + name);
        ck.tensors.emplace(name, std::move(m));
    }
    return ck;
}

inline void apply_checkpoint(const LoadedCheckpoint& ck, const std::vector<Parameter<float>*>& params) {
    for (auto* p : params) {
        auto it = ck.tensors.find(p->name);
        if (it == ck.tensors.end()) throw TrainError("checkpoint: missing tensor " + p->name);
        if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
            throw TrainError("checkpoint: shape mismatch for " + p->name);
        p->value = it->second;
    }
}

// -------------------------------------------------------------- model bundle

inline DiTConfig dit_toy() {
    DiTConfig c;
    c.n_layers = 4;
    c.n_heads = 4;
    c.channels = 128;
    c.latent_dim = 16;
    c.cond_feature_dim = 40;
    return c;
}

inline DiTConfig dit_paper() {
    DiTConfig c;
    c.n_layers = 12;
    c.n_heads = 8;
    c.channels = 1024;
    c.latent_dim = 64;
    c.cond_feature_dim = 40;
    return c;
}

inline ConditionerConfig cond_toy() {
    ConditionerConfig c;
    c.n_layers = 2;
    c.model_dim = 64;
    c.ff_dim = 128;
    c.conv_kernel = 15;
    c.latent_dim = 16;
    return c;
}

inline ConditionerConfig cond_paper() {
    ConditionerConfig c;
    c.n_layers = 12;
    c.model_dim = 256;
    c.ff_dim = 1024;
    c.conv_kernel = 31;
    c.latent_dim = 64;
    c.n_heads = 4;
    return c;
}

// everything a single enhancement run needs, wired to matching dimensions
struct EnhancerModel {
    VaeConfig vae_cfg;
    DiTConfig dit_cfg;
    ConditionerConfig cond_cfg;
    Vae<float> vae;
    DiT<float> dit;
    Conditioner<float> cond;
    Parameter<float> feat_logits;
    MelFeatureExtractor fe;
    bool trained = false;

    void setup(uint64_t seed, const VaeConfig& vc = vae_toy16k(), const DiTConfig& dc = dit_toy(),
               const ConditionerConfig& cc = cond_toy()) {
        vae_cfg = vc;
        dit_cfg = dc;
        cond_cfg = cc;
        if (dc.latent_dim != vc.latent_dim || cc.latent_dim != vc.latent_dim)
            throw TrainError("model: latent dims disagree");
        fe.rate = vc.sample_rate;
        if (dc.cond_feature_dim != fe.dim()) throw TrainError("model: feature dim disagrees");
        std::mt19937_64 rng(seed);
        vae.setup(vc, rng);
        dit.setup(dc, rng);
        cond.setup(cc, rng);
        feat_logits.setup("feat.logits", 1, fe.layers());
    }

    std::vector<Parameter<float>*> vae_params() {
        std::vector<Parameter<float>*> p;
        vae.collect(p);
        return p;
    }
    std::vector<Parameter<float>*> dit_params() {
        std::vector<Parameter<float>*> p;
        dit.collect(p);
        cond.collect(p);
        p.push_back(&feat_logits);
        return p;
    }
    std::vector<Parameter<float>*> all_params() {
        std::vector<Parameter<float>*> p = vae_params();
        auto d = dit_params();
        p.insert(p.end(), d.begin(), d.end());
        return p;
    }
};

inline long param_count(const std::vector<Parameter<float>*>& params) {
    long n = 0;
    for (const auto* p : params) n += long(p->value.size());
    return n;
}

// -------------------------------------------------------------- train loops

inline void train_vae(Vae<float>& vae, const std::vector<AudioBuffer>& clean,
                      const TrainConfig& cfg, std::vector<double>* losses = nullptr) {
    cfg.validate();
    if (clean.empty()) throw TrainError("train_vae: no data");
    auto params = [&] {
        std::vector<Parameter<float>*> p;
        vae.collect(p);
        return p;
    }();
    AdamW<float> opt;
    opt.weight_decay = cfg.weight_decay;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    std::uniform_int_distribution<size_t> pick(0, clean.size() - 1);
    int bad = 0;
    for (long step = 0; step < cfg.total_steps; ++step) {
        const AudioBuffer& sig = clean[pick(rng)];
        Mat<float> wave = vae.padded_wave(sig);
        Graph<float> g;
        auto [m, lv] = vae.encode(g, g.constant(wave));
        Mat<float> eps(m.rows(), m.cols());
        for (int i = 0; i < eps.rows(); ++i)
            for (int j = 0; j < eps.cols(); ++j) eps(i, j) = nd(rng);
        Var<float> z = add(m, mul(exp_(scale(lv, 0.5f)), g.constant(eps)));
        Var<float> rec = vae.decode(g, z);
        VaeLossParts parts;
        Var<float> loss = vae_loss(g, rec, wave, m, lv, vae.cfg, &parts);
        if (!std::isfinite(parts.total)) {
            if (++bad >= 3)
                throw TrainError("train_vae: diverged at step " + std::to_string(step) +
                                 " (loss non-finite 3 times in a row)");
            continue;
        }
        bad = 0;
        if (losses) losses->push_back(parts.total);
        g.backward(loss);
        opt.step(params, lr_at(step, cfg));
    }
}

inline void train_rvq(Rvq<float>& rvq, const std::vector<AudioBuffer>& clean,
                      const TrainConfig& cfg, std::vector<double>* losses = nullptr) {
    cfg.validate();
    if (clean.empty()) throw TrainError("train_rvq: no data");
    auto params = [&] {
        std::vector<Parameter<float>*> p;
        rvq.collect(p);
        return p;
    }();
    AdamW<float> opt;
    opt.weight_decay = cfg.weight_decay;
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<size_t> pick(0, clean.size() - 1);
    int bad = 0;
    for (long step = 0; step < cfg.total_steps; ++step) {
        const AudioBuffer& sig = clean[pick(rng)];
        const int hop = rvq.cfg.hop_total();
        const long padded = (long(sig.samples.size()) + hop - 1) / hop * hop;
        Mat<float> wave = Mat<float>::Zero(padded, 1);
        for (size_t i = 0; i < sig.samples.size(); ++i) wave(long(i), 0) = sig.samples[i];

        Graph<float> g;
        Var<float> enc = rvq.encode(g, g.constant(wave));
        auto qr = rvq.quantize_st(g, enc);
        Var<float> rec = rvq.decode(g, qr.dequantized);
        Var<float> loss = add(multiscale_spectral_l1(rec, wave),
                              add(scale(l1_loss(rec, wave), float(rvq.cfg.wav_weight)),
                                  add(qr.codebook_loss,
                                      scale(qr.commit_loss, float(rvq.cfg.commit_weight)))));
        const double lv = double(loss.val()(0, 0));
        if (!std::isfinite(lv)) {
            if (++bad >= 3)
                throw TrainError("train_rvq: diverged at step " + std::to_string(step));
            continue;
        }
        bad = 0;
        if (losses) losses->push_back(lv);
        g.backward(loss);
        opt.step(params, lr_at(step, cfg));
        rvq.pin_zero_codeword();
    }
    rvq.trained = true;
}

struct TrainItem {
    Eigen::MatrixXf clean_latent;
    Eigen::MatrixXf degraded_latent;
    std::vector<Eigen::MatrixXf> features;
};

inline std::vector<TrainItem> build_train_items(EnhancerModel& model,
                                                const std::vector<synth::AudioPair>& pairs) {
    std::vector<TrainItem> items;
    items.reserve(pairs.size());
    for (const auto& p : pairs) {
        TrainItem it;
        it.clean_latent = model.vae.encode_mean(p.clean);
        it.degraded_latent = model.vae.encode_mean(p.degraded);
        it.features = model.fe.extract(p.degraded);
        items.push_back(std::move(it));
    }
    return items;
}

// joint DiT + conditioner training over precomputed latents; the VAE stays
// frozen (its parameters are never part of the optimizer's set)
inline void train_dit(EnhancerModel& model, const std::vector<TrainItem>& items,
                      const TrainConfig& cfg, std::vector<double>* losses = nullptr) {
    cfg.validate();
    if (items.empty()) throw TrainError("train_dit: no data");
    auto params = model.dit_params();
    AdamW<float> opt;
    opt.weight_decay = cfg.weight_decay;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    std::uniform_real_distribution<double> ut(0.0, 1.0);
    std::uniform_int_distribution<size_t> pick(0, items.size() - 1);
    int bad = 0;
    for (long step = 0; step < cfg.total_steps; ++step) {
        double step_loss = 0.0;
        bool finite = true;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const TrainItem& it = items[pick(rng)];
            const double t = ut(rng);
            Eigen::MatrixXf eps(it.clean_latent.rows(), it.clean_latent.cols());
            for (int i = 0; i < eps.rows(); ++i)
                for (int j = 0; j < eps.cols(); ++j) eps(i, j) = nd(rng);
            Eigen::MatrixXf z = forward_diffuse(it.clean_latent, t, eps);
            Eigen::MatrixXf v = v_target(it.clean_latent, eps, t);
            PrefixPrompt pp = apply_prefix_prompt(z, it.clean_latent, rng, cfg);
            CondDrop drop = cfg_dropout(rng, cfg);

            Graph<float> g;
            DiffLossParts parts;
            Var<float> loss = diffusion_loss(g, model.dit, model.cond, model.feat_logits, pp.z, t,
                                             v, pp.loss_mask, it.clean_latent, it.degraded_latent,
                                             it.features, drop, cfg.lambda_cond, &parts);
            if (!std::isfinite(parts.total)) {
                finite = false;
                break;
            }
            step_loss += parts.total / cfg.batch_size;
            g.backward(scale(loss, 1.0f / float(cfg.batch_size)));
        }
        if (!finite) {
            opt.zero_grad(params);
            if (++bad >= 3)
                throw TrainError("train_dit: diverged at step " + std::to_string(step) +
                                 " (loss non-finite 3 times in a row)");
            continue;
        }
        bad = 0;
        if (losses) losses->push_back(step_loss);
        opt.step(params, lr_at(step, cfg));
    }
    model.trained = true;
}

}  // namespace ditse::nn

#endif  // DITSE_TRAINING_HPP
