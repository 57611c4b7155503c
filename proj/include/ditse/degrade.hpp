#ifndef DITSE_DEGRADE_HPP
#define DITSE_DEGRADE_HPP

#include <cmath>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ditse/audio.hpp"
#include "json.hpp"

namespace ditse {

struct DegradationSpec {
    std::optional<AudioBuffer> rir;
    std::vector<AudioBuffer> noises;  // 1..2 sources; may be empty in test mode
    double snr_db = 0.0;
    std::array<double, 8> eq_gains_db = {};
    std::optional<double> bandwidth_hz;
    uint64_t seed = 0;
};

// manifest row: file references instead of inline buffers
struct ManifestRow {
    std::string clean_path;
    std::optional<std::string> rir_path;
    std::vector<std::string> noise_paths;
    double snr_db = 0.0;
    std::array<double, 8> eq_gains_db = {};
    std::optional<double> bandwidth_hz;
    uint64_t seed = 0;
};

// ---------------------------------------------------------------- RIR

// full linear convolution with a peak-normalized RIR, aligned so the
// direct-path peak of h maps to zero delay, truncated to len(x)
inline AudioBuffer convolve_rir(const AudioBuffer& x, const AudioBuffer& h) {
    if (h.samples.empty()) throw AudioError("convolve_rir: empty RIR");
    if (x.sample_rate != h.sample_rate) throw AudioError("convolve_rir: sample rate mismatch");

    float peak = 0.0f;
    size_t peak_idx = 0;
    for (size_t i = 0; i < h.samples.size(); ++i) {
        if (std::abs(h.samples[i]) > peak) {
            peak = std::abs(h.samples[i]);
            peak_idx = i;
        }
    }
    if (peak < 1e-12f) throw AudioError("convolve_rir: degenerate all-zero RIR");

    const size_t nx = x.samples.size(), nh = h.samples.size();
    if (nx == 0) return x;
    size_t nfft = 1;
    while (nfft < nx + nh) nfft <<= 1;
    std::vector<std::complex<double>> fx(nfft), fh(nfft);
    for (size_t i = 0; i < nx; ++i) fx[i] = x.samples[i];
    for (size_t i = 0; i < nh; ++i) fh[i] = h.samples[i] / peak;
    detail::fft(fx);
    detail::fft(fh);
    for (size_t i = 0; i < nfft; ++i) fx[i] *= fh[i];
    detail::fft(fx, true);

    AudioBuffer out;
    out.sample_rate = x.sample_rate;
    out.samples.resize(nx);
    for (size_t i = 0; i < nx; ++i) {
        const size_t j = i + peak_idx;  // alignment cancels the direct-path delay
        out.samples[i] = (j < nx + nh - 1) ? float(fx[j].real()) : 0.0f;
    }
    return out;
}

// ---------------------------------------------------------------- noise mixing

// loop or truncate noise to n samples, starting at offset
inline AudioBuffer fit_length(const AudioBuffer& noise, size_t n, size_t offset = 0) {
    AudioBuffer out;
    out.sample_rate = noise.sample_rate;
    out.samples.resize(n);
    if (noise.samples.empty()) return out;
    for (size_t i = 0; i < n; ++i)
        out.samples[i] = noise.samples[(offset + i) % noise.samples.size()];
    return out;
}

inline AudioBuffer mix_at_snr(const AudioBuffer& speech, const AudioBuffer& noise, double snr_db) {
    const AudioBuffer fitted = fit_length(noise, speech.samples.size());
    const double rs = speech.rms(), rn = fitted.rms();
    if (rs < 1e-8 || rn < 1e-8) throw AudioError("mix_at_snr: silent source");
    const double gain = (rs / rn) * std::pow(10.0, -snr_db / 20.0);
    AudioBuffer out;
    out.sample_rate = speech.sample_rate;
    out.samples.resize(speech.samples.size());
    for (size_t i = 0; i < out.samples.size(); ++i)
        out.samples[i] = speech.samples[i] + float(gain * fitted.samples[i]);
    return out;
}

// ---------------------------------------------------------------- equalizer

namespace detail {

struct Biquad {
    double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;

    // RBJ peaking EQ
    static Biquad peaking(double fc, double fs, double gain_db, double q) {
        Biquad f;
        const double A = std::pow(10.0, gain_db / 40.0);
        const double w = 2.0 * M_PI * fc / fs;
        const double alpha = std::sin(w) / (2.0 * q);
        const double a0 = 1.0 + alpha / A;
        f.b0 = (1.0 + alpha * A) / a0;
        f.b1 = (-2.0 * std::cos(w)) / a0;
        f.b2 = (1.0 - alpha * A) / a0;
        f.a1 = (-2.0 * std::cos(w)) / a0;
        f.a2 = (1.0 - alpha / A) / a0;
        return f;
    }

    void process(std::vector<float>& x) const {
        double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
        for (auto& s : x) {
            const double x0 = s;
            const double y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1; x1 = x0;
            y2 = y1; y1 = y0;
            s = float(y0);
        }
    }

    // |H(e^{jw})|^2 at frequency f
    double power_response(double f, double fs) const {
        const std::complex<double> z = std::polar(1.0, -2.0 * M_PI * f / fs);
        const std::complex<double> num = b0 + b1 * z + b2 * z * z;
        const std::complex<double> den = 1.0 + a1 * z + a2 * z * z;
        return std::norm(num / den);
    }
};

}  // namespace detail

inline constexpr double kEqBaseHz = 62.5;  // octave-spaced centers 62.5 .. 8000 Hz

// 8-band graphic EQ: cascaded second-order peaking filters, Q = 1.0. Bands
// with centers at or above Nyquist are skipped (degenerate at that rate).
inline AudioBuffer apply_eq(const AudioBuffer& x, const std::array<double, 8>& eq_gains_db) {
    AudioBuffer out = x;
    for (int band = 0; band < 8; ++band) {
        const double fc = kEqBaseHz * std::pow(2.0, band);
        if (fc >= x.sample_rate / 2.0) continue;
        if (std::abs(eq_gains_db[band]) < 1e-12) continue;
        detail::Biquad::peaking(fc, x.sample_rate, eq_gains_db[band], 1.0).process(out.samples);
    }
    return out;
}

// ---------------------------------------------------------------- bandwidth

// resample down to 2*cutoff and back up; length padded/truncated to match
inline AudioBuffer bandwidth_limit(const AudioBuffer& x, double cutoff_hz) {
    if (cutoff_hz <= 0.0 || cutoff_hz > x.sample_rate / 2.0 + 1e-9)
        throw AudioError("bandwidth_limit: cutoff out of range");
    const int low_rate = int(std::lround(2.0 * cutoff_hz));
    if (low_rate >= x.sample_rate) return x;
    AudioBuffer out = resample(resample(x, low_rate), x.sample_rate);
    out.samples.resize(x.samples.size(), 0.0f);
    return out;
}

// ---------------------------------------------------------------- pipeline

// RIR -> noise mixing (SNR vs the reverberant speech) -> EQ -> bandwidth limit
inline std::pair<AudioBuffer, AudioBuffer> synthesize_pair(const AudioBuffer& clean,
                                                           const DegradationSpec& spec) {
    if (spec.noises.size() > 2) throw AudioError("synthesize_pair: at most 2 noise sources");
    std::mt19937_64 rng(spec.seed);

    AudioBuffer degraded = clean;
    if (spec.rir) degraded = convolve_rir(degraded, *spec.rir);

    if (!spec.noises.empty()) {
        // equal-energy sum of the noise sources, then mixed at the target SNR
        AudioBuffer mix_noise;
        mix_noise.sample_rate = clean.sample_rate;
        mix_noise.samples.assign(clean.samples.size(), 0.0f);
        for (const auto& noise : spec.noises) {
            if (noise.sample_rate != clean.sample_rate)
                throw AudioError("synthesize_pair: noise sample rate mismatch");
            const size_t offset = noise.samples.empty()
                                      ? 0
                                      : std::uniform_int_distribution<size_t>(0, noise.samples.size() - 1)(rng);
            AudioBuffer fitted = fit_length(noise, clean.samples.size(), offset);
            const double r = fitted.rms();
            if (r < 1e-8) throw AudioError("synthesize_pair: silent noise source");
            for (size_t i = 0; i < fitted.samples.size(); ++i)
                mix_noise.samples[i] += float(fitted.samples[i] / r);
        }
        degraded = mix_at_snr(degraded, mix_noise, spec.snr_db);
    }

    degraded = apply_eq(degraded, spec.eq_gains_db);
    if (spec.bandwidth_hz) degraded = bandwidth_limit(degraded, *spec.bandwidth_hz);

    float peak = 0.0f;
    for (float s : degraded.samples) peak = std::max(peak, std::abs(s));
    if (peak > 1.0f)
        for (auto& s : degraded.samples) s *= 0.95f / peak;

    return {degraded, clean};
}

// spec sampling policy used by the simulate command
struct DegradePolicy {
    double snr_lo = -10.0, snr_hi = 20.0;
    double eq_max_db = 6.0;
    std::vector<double> bandwidth_choices = {4000.0, 8000.0, 12000.0, 16000.0, 24000.0};
    double rir_p = 0.5;
    double second_noise_p = 0.3;
    double bandwidth_p = 0.5;
};

// ---------------------------------------------------------------- manifest

inline nlohmann::json manifest_row_to_json(const ManifestRow& r) {
    nlohmann::json j;
    j["clean_path"] = r.clean_path;
    if (r.rir_path) j["rir_path"] = *r.rir_path;
    j["noise_paths"] = r.noise_paths;
    j["snr_db"] = r.snr_db;
    j["eq_gains_db"] = r.eq_gains_db;
    if (r.bandwidth_hz) j["bandwidth_hz"] = *r.bandwidth_hz;
    j["seed"] = r.seed;
    return j;
}

inline ManifestRow manifest_row_from_json(const nlohmann::json& j) {
    ManifestRow r;
    r.clean_path = j.at("clean_path").get<std::string>();
    if (j.contains("rir_path")) r.rir_path = j["rir_path"].get<std::string>();
    if (j.contains("noise_paths")) r.noise_paths = j["noise_paths"].get<std::vector<std::string>>();
    r.snr_db = j.value("snr_db", 0.0);
    if (j.contains("eq_gains_db")) {
        auto v = j["eq_gains_db"].get<std::vector<double>>();
        if (v.size() != 8) throw AudioError("manifest: eq_gains_db must have 8 entries");
        std::copy(v.begin(), v.end(), r.eq_gains_db.begin());
    }
    if (j.contains("bandwidth_hz")) r.bandwidth_hz = j["bandwidth_hz"].get<double>();
    r.seed = j.value("seed", uint64_t(0));
    return r;
}

// one JSON record per line
inline std::vector<ManifestRow> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw AudioError("load_manifest: cannot open " + path);
    std::vector<ManifestRow> rows;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            rows.push_back(manifest_row_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw AudioError("load_manifest: parse error at line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

inline void save_manifest(const std::vector<ManifestRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw AudioError("save_manifest: cannot open " + path);
    for (const auto& r : rows) out << manifest_row_to_json(r).dump() << "\n";
}

}  // namespace ditse

#endif  // DITSE_DEGRADE_HPP
