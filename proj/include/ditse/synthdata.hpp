#ifndef DITSE_SYNTHDATA_HPP
#define DITSE_SYNTHDATA_HPP

#include <cmath>
#include <random>
#include <vector>

#include "ditse/degrade.hpp"

// synthetic speech-like material for codec and enhancer training: harmonic
// stacks with drifting pitch and amplitude envelopes, plus noise and room
// responses for the degradation side

namespace ditse::synth {

inline AudioBuffer voice(int rate, int n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> f0_d(180.0, 300.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double f0 = f0_d(rng);
    // cap the stack well below Nyquist: a handful of partials is plenty of
    // spectral structure for codec and enhancer training, and keeps the
    // material compressible at small latent sizes
    const int n_harm = std::min(16, std::max(3, int(std::floor(0.45 * rate / f0))));
    std::vector<double> amp(static_cast<size_t>(n_harm));
    std::vector<double> phase(static_cast<size_t>(n_harm));
    for (int h = 0; h < n_harm; ++h) {
        amp[size_t(h)] = (0.5 + u(rng)) / double(h + 1);
        phase[size_t(h)] = 2.0 * M_PI * u(rng);
    }
    const double env_rate = 1.5 + 3.0 * u(rng);
    const double env_phase = 2.0 * M_PI * u(rng);

    AudioBuffer out;
    out.sample_rate = rate;
    out.samples.resize(size_t(n));
    double t_phase = 0.0;
    for (int i = 0; i < n; ++i) {
        const double t = double(i) / rate;
        t_phase += 2.0 * M_PI * f0 / rate;
        double s = 0.0;
        for (int h = 0; h < n_harm; ++h) s += amp[size_t(h)] * std::sin((h + 1) * t_phase + phase[size_t(h)]);
        const double env = 0.55 + 0.45 * std::sin(2.0 * M_PI * env_rate * t + env_phase);
        out.samples[size_t(i)] = float(0.25 * env * s / double(n_harm));
    }
    // keep a sane level
    const double r = out.rms();
    if (r > 1e-9)
        for (auto& s : out.samples) s = float(s * 0.08 / r);
    return out;
}

inline AudioBuffer noise(int rate, int n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // one-pole lowpass with a random corner shapes the spectrum per source
    const float a = float(0.2 + 0.75 * u(rng));
    AudioBuffer out;
    out.sample_rate = rate;
    out.samples.resize(size_t(n));
    float state = 0.0f;
    for (int i = 0; i < n; ++i) {
        state = a * state + (1.0f - a) * nd(rng);
        out.samples[size_t(i)] = 0.1f * state;
    }
    return out;
}

inline AudioBuffer room_response(int rate, uint64_t seed, double tail_seconds = 0.12) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int n = std::max(8, int(tail_seconds * rate));
    const double decay = 3.0 + 5.0 * u(rng);  // time constants over the tail
    AudioBuffer h;
    h.sample_rate = rate;
    h.samples.resize(size_t(n));
    h.samples[0] = 1.0f;  // direct path
    for (int i = 1; i < n; ++i)
        h.samples[size_t(i)] = 0.3f * nd(rng) * float(std::exp(-decay * double(i) / n));
    return h;
}

inline DegradationSpec sample_degradation(std::mt19937_64& rng, const DegradePolicy& policy,
                                          int rate, int n_samples) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    DegradationSpec spec;
    spec.seed = rng();
    if (u(rng) < policy.rir_p) spec.rir = room_response(rate, rng());
    spec.noises.push_back(noise(rate, n_samples, rng()));
    if (u(rng) < policy.second_noise_p) spec.noises.push_back(noise(rate, n_samples, rng()));
    spec.snr_db = policy.snr_lo + (policy.snr_hi - policy.snr_lo) * u(rng);
    std::uniform_real_distribution<double> eq(-policy.eq_max_db, policy.eq_max_db);
    for (auto& gdb : spec.eq_gains_db) gdb = eq(rng);
    if (u(rng) < policy.bandwidth_p && !policy.bandwidth_choices.empty()) {
        std::uniform_int_distribution<size_t> pick(0, policy.bandwidth_choices.size() - 1);
        const double bw = policy.bandwidth_choices[pick(rng)];
        if (2.0 * bw < double(rate)) spec.bandwidth_hz = bw;
    }
    return spec;
}

struct AudioPair {
    AudioBuffer clean;
    AudioBuffer degraded;
};

inline std::vector<AudioPair> make_pairs(int count, int rate, double seconds, uint64_t seed,
                                         const DegradePolicy& policy = DegradePolicy{}) {
    std::mt19937_64 rng(seed);
    const int n = int(seconds * rate);
    std::vector<AudioPair> out;
    out.reserve(size_t(count));
    for (int i = 0; i < count; ++i) {
        AudioBuffer clean = voice(rate, n, rng());
        DegradationSpec spec = sample_degradation(rng, policy, rate, n);
        auto [degraded, clean_out] = synthesize_pair(clean, spec);
        out.push_back({clean_out, degraded});
    }
    return out;
}

}  // namespace ditse::synth

#endif  // DITSE_SYNTHDATA_HPP
