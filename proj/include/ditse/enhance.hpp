#ifndef DITSE_ENHANCE_HPP
#define DITSE_ENHANCE_HPP

#include <cmath>
#include <vector>

#include "ditse/diffusion.hpp"
#include "ditse/training.hpp"

namespace ditse::nn {

struct EnhanceConfig {
    double window_seconds = 5.0;
    double overlap_seconds = 1.0;
    SamplerConfig sampler;
    bool posthoc = false;
    int output_rate = 0;  // 0 keeps the input rate
    double prefix_max_fraction = 0.5;

    void validate() const {
        if (!(overlap_seconds > 0.0 && overlap_seconds < window_seconds))
            throw TrainError("enhance config: need 0 < overlap < window");
        if (overlap_seconds > prefix_max_fraction * window_seconds)
            throw TrainError("enhance config: overlap exceeds the usable prompt fraction");
    }
};

struct WindowSpec {
    int start = 0;
    int end = 0;
    int prompt_frames = 0;
};

// tile [0, n_frames) into windows; each window after the first re-generates
// `overlap_frames` of already-produced context as its prompt
inline std::vector<WindowSpec> window_plan(int n_frames, int window_frames, int overlap_frames) {
    if (window_frames <= overlap_frames || overlap_frames < 0)
        throw TrainError("window_plan: need window_frames > overlap_frames >= 0");
    std::vector<WindowSpec> plan;
    if (n_frames <= 0) return plan;
    int start = 0;
    int end = std::min(window_frames, n_frames);
    plan.push_back({start, end, 0});
    while (end < n_frames) {
        start = end - overlap_frames;
        end = std::min(start + window_frames, n_frames);
        plan.push_back({start, end, overlap_frames});
    }
    return plan;
}

// v-predictor over one window: conditioner pre-latent and features are fixed,
// classifier-free guidance mixes in the null-conditioned branch when w != 1
inline VPredictor make_window_predictor(EnhancerModel& model, const Eigen::MatrixXf& pre_latent,
                                        const std::vector<Eigen::MatrixXf>& feat_maps,
                                        double guidance_weight) {
    return [&model, pre_latent, feat_maps, guidance_weight](const LatentMat& z, double t) -> LatentMat {
        Graph<float> g;
        Var<float> pre = g.constant(pre_latent);
        Var<float> feats = weighted_sum_features(g, feat_maps, g.param(model.feat_logits));
        LatentMat v_cond = model.dit.fwd(g, g.constant(z), &pre, t, &feats).val();
        if (guidance_weight == 1.0) return v_cond;
        LatentMat v_uncond = model.dit.fwd(g, g.constant(z), nullptr, t, nullptr).val();
        return cfg_combine(v_cond, v_uncond, guidance_weight);
    };
}

// run the windowed sampler over a full degraded latent; returns the enhanced
// latent. degraded audio is needed per window for feature extraction.
inline Eigen::MatrixXf enhance_latent(EnhancerModel& model, const Eigen::MatrixXf& y_latent,
                                      const AudioBuffer& degraded, const EnhanceConfig& cfg,
                                      std::vector<WindowSpec>* plan_out = nullptr) {
    const int n_frames = int(y_latent.rows());
    const int hop = model.vae_cfg.hop_total();
    const int window_frames = std::max(1, int(std::lround(cfg.window_seconds * model.vae_cfg.frame_rate)));
    const int overlap_frames = std::max(0, int(std::lround(cfg.overlap_seconds * model.vae_cfg.frame_rate)));
    auto plan = window_plan(n_frames, window_frames, overlap_frames);
    if (plan_out) *plan_out = plan;

    Eigen::MatrixXf out(n_frames, y_latent.cols());
    for (size_t w = 0; w < plan.size(); ++w) {
        const WindowSpec& ws = plan[w];
        const int frames = ws.end - ws.start;
        Eigen::MatrixXf y_win = y_latent.middleRows(ws.start, frames);

        AudioBuffer seg;
        seg.sample_rate = degraded.sample_rate;
        seg.samples.assign(degraded.samples.begin() + long(ws.start) * hop,
                           degraded.samples.begin() + long(ws.end) * hop);
        auto feats = model.fe.extract(seg);

        Eigen::MatrixXf pre;
        {
            Graph<float> g;
            pre = model.cond.fwd(g, g.constant(y_win)).val();
        }
        VPredictor predictor = make_window_predictor(model, pre, feats, cfg.sampler.guidance_weight);

        SamplerConfig sc = cfg.sampler;
        sc.seed = cfg.sampler.seed + w;  // decorrelate noise draws across windows
        LatentMat z;
        if (ws.prompt_frames > 0) {
            LatentMat prompt = out.middleRows(ws.start, ws.prompt_frames);
            z = sample(predictor, frames, int(y_latent.cols()), sc, &prompt, ws.prompt_frames);
        } else {
            z = sample(predictor, frames, int(y_latent.cols()), sc);
        }
        if (!z.allFinite()) throw DiffusionError("enhance: non-finite latent in window " + std::to_string(w));
        // keep previously generated prompt rows, write only fresh frames
        out.middleRows(ws.start + ws.prompt_frames, frames - ws.prompt_frames) =
            z.bottomRows(frames - ws.prompt_frames);
    }
    return out;
}

// full pipeline: resample, encode, windowed sampling, per-window decode with a
// short waveform crossfade at stitch points, optional codec round trip
inline AudioBuffer enhance(const AudioBuffer& input, EnhancerModel& model, const EnhanceConfig& cfg,
                           Rvq<float>* rvq = nullptr) {
    cfg.validate();
    if (!model.trained) throw TrainError("enhance: model not trained");
    if (cfg.posthoc && (!rvq || !rvq->trained)) throw TrainError("enhance: posthoc requires a trained codec");
    if (input.samples.empty()) return input;

    AudioBuffer work = input.sample_rate == model.vae_cfg.sample_rate
                           ? input
                           : resample(input, model.vae_cfg.sample_rate);
    const int hop = model.vae_cfg.hop_total();
    const long orig_len = long(work.samples.size());
    const long padded = (orig_len + hop - 1) / hop * hop;
    work.samples.resize(size_t(padded), 0.0f);

    Eigen::MatrixXf y_latent = model.vae.encode_mean(work);
    std::vector<WindowSpec> plan;
    Eigen::MatrixXf enhanced = enhance_latent(model, y_latent, work, cfg, &plan);

    // decode each window and stitch with a 10 ms linear crossfade at the
    // points where one window's fresh region meets the previous output
    const int fade = std::max(1, model.vae_cfg.sample_rate / 100);
    std::vector<float> out_samples(size_t(padded), 0.0f);
    for (size_t w = 0; w < plan.size(); ++w) {
        const WindowSpec& ws = plan[w];
        AudioBuffer dec = model.vae.decode_audio(enhanced.middleRows(ws.start, ws.end - ws.start));
        const long base = long(ws.start) * hop;
        const long fresh = base + long(ws.prompt_frames) * hop;  // first sample not yet written
        const long lo = (w == 0) ? base : std::max(base, fresh - fade);
        for (long i = lo; i < long(ws.end) * hop; ++i) {
            const float v = dec.samples[size_t(i - base)];
            if (i < fresh) {
                const float a = float(i - lo + 1) / float(fresh - lo + 1);
                out_samples[size_t(i)] = (1.0f - a) * out_samples[size_t(i)] + a * v;
            } else {
                out_samples[size_t(i)] = v;
            }
        }
    }

    AudioBuffer out;
    out.sample_rate = model.vae_cfg.sample_rate;
    out.samples.assign(out_samples.begin(), out_samples.begin() + orig_len);
    if (cfg.posthoc) out = rvq->refine(out);

    const int target_rate = cfg.output_rate > 0 ? cfg.output_rate : input.sample_rate;
    if (out.sample_rate != target_rate) out = resample(out, target_rate);
    return out;
}

}  // namespace ditse::nn

#endif  // DITSE_ENHANCE_HPP
