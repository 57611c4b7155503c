#ifndef DITSE_DIFFUSION_HPP
#define DITSE_DIFFUSION_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace ditse {

struct DiffusionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// variance-preserving cosine schedule: alpha = cos(pi t / 2), sigma = sin(pi t / 2)
struct NoiseSchedule {
    static std::pair<double, double> at(double t) {
        if (t < 0.0 || t > 1.0) throw DiffusionError("schedule: t outside [0, 1]");
        return {std::cos(M_PI * t / 2.0), std::sin(M_PI * t / 2.0)};
    }
    static double alpha(double t) { return at(t).first; }
    static double sigma(double t) { return at(t).second; }
    // log-SNR lambda = log(alpha / sigma); -inf at t = 1
    static double log_snr(double t) {
        auto [a, s] = at(t);
        if (a <= 0.0) return -std::numeric_limits<double>::infinity();
        if (s <= 0.0) return std::numeric_limits<double>::infinity();
        return std::log(a / s);
    }
};

using LatentMat = Eigen::MatrixXf;  // frames x latent_dim

// z_t = alpha_t x + sigma_t eps
inline LatentMat forward_diffuse(const LatentMat& x, double t, const LatentMat& eps) {
    if (x.rows() != eps.rows() || x.cols() != eps.cols())
        throw DiffusionError("forward_diffuse: shape mismatch");
    auto [a, s] = NoiseSchedule::at(t);
    return float(a) * x + float(s) * eps;
}

// v = alpha_t eps - sigma_t x
inline LatentMat v_target(const LatentMat& x, const LatentMat& eps, double t) {
    if (x.rows() != eps.rows() || x.cols() != eps.cols())
        throw DiffusionError("v_target: shape mismatch");
    auto [a, s] = NoiseSchedule::at(t);
    return float(a) * eps - float(s) * x;
}

// x_hat = alpha_t z_t - sigma_t v
inline LatentMat recover_x(const LatentMat& z_t, const LatentMat& v, double t) {
    if (z_t.rows() != v.rows() || z_t.cols() != v.cols())
        throw DiffusionError("recover_x: shape mismatch");
    auto [a, s] = NoiseSchedule::at(t);
    return float(a) * z_t - float(s) * v;
}

// eps_hat = sigma_t z_t + alpha_t v
inline LatentMat recover_eps(const LatentMat& z_t, const LatentMat& v, double t) {
    if (z_t.rows() != v.rows() || z_t.cols() != v.cols())
        throw DiffusionError("recover_eps: shape mismatch");
    auto [a, s] = NoiseSchedule::at(t);
    return float(s) * z_t + float(a) * v;
}

// v = v_uncond + w (v_cond - v_uncond)
inline LatentMat cfg_combine(const LatentMat& v_cond, const LatentMat& v_uncond, double w) {
    if (v_cond.rows() != v_uncond.rows() || v_cond.cols() != v_uncond.cols())
        throw DiffusionError("cfg_combine: shape mismatch");
    if (w < 0.0) throw DiffusionError("cfg_combine: w must be >= 0");
    return v_uncond + float(w) * (v_cond - v_uncond);
}

enum class SamplerKind { ddim, dpmpp_multistep, dpmpp_multistep_sde };

inline SamplerKind sampler_kind_from_string(const std::string& s) {
    if (s == "ddim") return SamplerKind::ddim;
    if (s == "dpmpp-multistep") return SamplerKind::dpmpp_multistep;
    if (s == "dpmpp-multistep-sde") return SamplerKind::dpmpp_multistep_sde;
    throw DiffusionError("unknown sampler kind: " + s);
}

struct SamplerConfig {
    SamplerKind kind = SamplerKind::dpmpp_multistep_sde;
    int steps = 32;
    double guidance_weight = 1.0;
    uint64_t seed = 0;
};

// predictor: (z_t, t) -> v_hat; guidance is the caller's concern
using VPredictor = std::function<LatentMat(const LatentMat&, double)>;

// Integrates from t = 1 (pure noise) to t = 0 on a uniform-in-t grid.
//
// The update rule is the exponential integrator in data-prediction form.
// With lambda = log(alpha/sigma), h = lambda_next - lambda_cur > 0 and
// kappa = 1 (ODE) or 2 (SDE, eta = 1):
//   z_next = (sigma_next/sigma_cur) e^{-(kappa-1)h} z_cur
//          + alpha_next [ c0 xhat + c1 D1 + c2 D2 ] (+ noise term for SDE)
//   c0 = 1 - e^{-kappa h}
//   c1 = h - c0 / kappa
//   c2 = h^2/2 - h/kappa + c0 / kappa^2
// D1, D2 are backward-difference derivative estimates of xhat in lambda
// (third-order multistep; first/second order on the first two steps).
// SDE noise std: sigma_next sqrt(1 - e^{-2h}).
inline LatentMat sample(const VPredictor& predictor, int frames, int latent_dim,
                        const SamplerConfig& config,
                        const LatentMat* prefix = nullptr, int prefix_frames = 0) {
    if (config.steps < 1) throw DiffusionError("sample: steps must be >= 1");
    if (prefix_frames < 0 || prefix_frames > frames)
        throw DiffusionError("sample: prefix frames out of range");

    std::mt19937_64 rng(config.seed);
    std::normal_distribution<float> gauss(0.0f, 1.0f);
    auto draw = [&](int r, int c) {
        LatentMat m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = gauss(rng);
        return m;
    };

    LatentMat z = draw(frames, latent_dim);

    // one fixed noise draw for prompt-frame re-noising, shared across steps
    LatentMat prefix_eps;
    if (prefix && prefix_frames > 0) prefix_eps = draw(prefix_frames, latent_dim);

    const int N = config.steps;
    const bool sde = (config.kind == SamplerKind::dpmpp_multistep_sde);
    const bool multistep = (config.kind != SamplerKind::ddim);
    const double kappa = sde ? 2.0 : 1.0;

    // xhat history for multistep differences, most recent first
    LatentMat xh0, xh1, xh2;
    double lam0 = 0.0, lam1 = 0.0;
    int history = 0;

    for (int i = 0; i < N; ++i) {
        const double t_cur = 1.0 - double(i) / N;
        const double t_next = 1.0 - double(i + 1) / N;

        if (prefix && prefix_frames > 0)
            z.topRows(prefix_frames) =
                forward_diffuse(prefix->topRows(prefix_frames), t_cur, prefix_eps);

        const LatentMat v = predictor(z, t_cur);
        if (!v.allFinite())
            throw DiffusionError("sample: predictor returned non-finite values at step " + std::to_string(i));

        const LatentMat xhat = recover_x(z, v, t_cur);
        auto [a_cur, s_cur] = NoiseSchedule::at(t_cur);
        auto [a_next, s_next] = NoiseSchedule::at(t_next);
        const double lam_cur = NoiseSchedule::log_snr(t_cur);
        const double lam_next = NoiseSchedule::log_snr(t_next);
        const double h = lam_next - lam_cur;

        if (!multistep) {
            // ddim: z_next = alpha_next xhat + sigma_next eps_hat
            const LatentMat eps_hat = recover_eps(z, v, t_cur);
            z = float(a_next) * xhat + float(s_next) * eps_hat;
        } else {
            const bool finite_h = std::isfinite(h);
            double c0, zc;
            if (finite_h) {
                c0 = 1.0 - std::exp(-kappa * h);
                zc = (s_next / s_cur) * std::exp(-(kappa - 1.0) * h);
            } else {
                c0 = 1.0;
                zc = sde ? 0.0 : s_next / s_cur;
            }
            LatentMat combo = float(c0) * xhat;
            if (finite_h && history >= 1 && std::isfinite(lam0)) {
                const double h1 = lam_cur - lam0;
                const LatentMat d10 = (xhat - xh0) / float(h1);
                const double c1 = h - c0 / kappa;
                if (history >= 2 && std::isfinite(lam1)) {
                    const double h2 = lam0 - lam1;
                    const LatentMat d11 = (xh0 - xh1) / float(h2);
                    const LatentMat d1 = d10 + float(h1 / (h1 + h2)) * (d10 - d11);
                    const LatentMat d2 = float(2.0 / (h1 + h2)) * (d10 - d11);
                    const double c2 = h * h / 2.0 - h / kappa + c0 / (kappa * kappa);
                    combo += float(c1) * d1 + float(c2) * d2;
                } else {
                    combo += float(c1) * d10;
                }
            }
            LatentMat z_next = float(zc) * z + float(a_next) * combo;
            if (sde && t_next > 0.0) {
                const double noise_std = finite_h ? s_next * std::sqrt(1.0 - std::exp(-2.0 * h)) : s_next;
                z_next += float(noise_std) * draw(frames, latent_dim);
            }
            z = z_next;
            xh2 = xh1;
            xh1 = xh0;
            xh0 = xhat;
            lam1 = lam0;
            lam0 = lam_cur;
            ++history;
        }
    }

    if (prefix && prefix_frames > 0) z.topRows(prefix_frames) = prefix->topRows(prefix_frames);
    return z;
}

}  // namespace ditse

#endif  // DITSE_DIFFUSION_HPP
