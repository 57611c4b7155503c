#ifndef DITSE_AUDIO_HPP
#define DITSE_AUDIO_HPP

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ditse {

struct AudioBuffer {
    std::vector<float> samples;  // mono, [-1, 1] nominal range
    int sample_rate = 0;

    size_t size() const { return samples.size(); }
    double duration() const { return sample_rate > 0 ? double(samples.size()) / sample_rate : 0.0; }

    float rms() const {
        if (samples.empty()) return 0.0f;
        double acc = 0.0;
        for (float s : samples) acc += double(s) * s;
        return float(std::sqrt(acc / samples.size()));
    }
};

struct Spectrogram {
    // frames x bins, bins = window/2 + 1
    Eigen::MatrixXf magnitudes;
    int hop = 0;
    int window = 0;
    int sample_rate = 0;

    int frames() const { return int(magnitudes.rows()); }
    int bins() const { return int(magnitudes.cols()); }
};

struct AudioError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- WAV I/O

enum class WavEncoding { pcm16, float32 };

namespace detail {

inline uint32_t read_u32(std::istream& in) {
    uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline uint16_t read_u16(std::istream& in) {
    uint8_t b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return uint16_t(b[0]) | uint16_t(b[1]) << 8;
}

inline void write_u32(std::ostream& out, uint32_t v) {
    uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
    out.write(reinterpret_cast<char*>(b), 4);
}

inline void write_u16(std::ostream& out, uint16_t v) {
    uint8_t b[2] = {uint8_t(v), uint8_t(v >> 8)};
    out.write(reinterpret_cast<char*>(b), 2);
}

}  // namespace detail

inline AudioBuffer load_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw AudioError("load_wav: cannot open " + path);

    char tag[4];
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "RIFF", 4) != 0) throw AudioError("load_wav: not a RIFF file: " + path);
    detail::read_u32(in);  // riff size
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "WAVE", 4) != 0) throw AudioError("load_wav: not a WAVE file: " + path);

    uint16_t format = 0, channels = 0, bits = 0;
    uint32_t rate = 0;
    bool have_fmt = false;
    std::vector<uint8_t> data;
    bool have_data = false;

    while (in.read(tag, 4)) {
        uint32_t chunk = detail::read_u32(in);
        if (!in) throw AudioError("load_wav: truncated chunk header in " + path);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            if (chunk < 16) throw AudioError("load_wav: malformed fmt chunk in " + path);
            format = detail::read_u16(in);
            channels = detail::read_u16(in);
            rate = detail::read_u32(in);
            detail::read_u32(in);  // byte rate
            detail::read_u16(in);  // block align
            bits = detail::read_u16(in);
            in.ignore(chunk - 16 + (chunk & 1));
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            data.resize(chunk);
            in.read(reinterpret_cast<char*>(data.data()), chunk);
            if (uint32_t(in.gcount()) != chunk) throw AudioError("load_wav: truncated data chunk in " + path);
            if (chunk & 1) in.ignore(1);
            have_data = true;
        } else {
            in.ignore(chunk + (chunk & 1));
        }
    }
    if (!have_fmt || !have_data) throw AudioError("load_wav: missing fmt or data chunk in " + path);
    if (channels < 1 || rate == 0) throw AudioError("load_wav: malformed header in " + path);

    const bool pcm16 = (format == 1 && bits == 16);
    const bool f32 = (format == 3 && bits == 32);
    if (!pcm16 && !f32) throw AudioError("load_wav: unsupported encoding (format=" + std::to_string(format) + ", bits=" + std::to_string(bits) + ") in " + path);

    const size_t bytes_per = pcm16 ? 2 : 4;
    const size_t n_frames = data.size() / (bytes_per * channels);

    AudioBuffer out;
    out.sample_rate = int(rate);
    out.samples.resize(n_frames);
    for (size_t i = 0; i < n_frames; ++i) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
            const uint8_t* p = data.data() + (i * channels + c) * bytes_per;
            if (pcm16) {
                int16_t v = int16_t(uint16_t(p[0]) | uint16_t(p[1]) << 8);
                acc += double(v) / 32768.0;
            } else {
                float v;
                std::memcpy(&v, p, 4);
                acc += v;
            }
        }
        out.samples[i] = float(acc / channels);
    }
    return out;
}

inline void save_wav(const AudioBuffer& buf, const std::string& path, WavEncoding enc = WavEncoding::float32) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw AudioError("save_wav: cannot open " + path + " for writing");

    const bool pcm16 = (enc == WavEncoding::pcm16);
    const uint32_t bytes_per = pcm16 ? 2 : 4;
    const uint32_t data_size = uint32_t(buf.samples.size() * bytes_per);

    out.write("RIFF", 4);
    detail::write_u32(out, 36 + data_size);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    detail::write_u32(out, 16);
    detail::write_u16(out, pcm16 ? 1 : 3);
    detail::write_u16(out, 1);  // mono
    detail::write_u32(out, uint32_t(buf.sample_rate));
    detail::write_u32(out, uint32_t(buf.sample_rate) * bytes_per);
    detail::write_u16(out, uint16_t(bytes_per));
    detail::write_u16(out, uint16_t(bytes_per * 8));
    out.write("data", 4);
    detail::write_u32(out, data_size);

    for (float s : buf.samples) {
        if (pcm16) {
            float c = std::clamp(s, -1.0f, 1.0f);
            int v = int(std::lrint(c * 32768.0f));
            v = std::clamp(v, -32768, 32767);
            detail::write_u16(out, uint16_t(int16_t(v)));
        } else {
            uint32_t bits;
            std::memcpy(&bits, &s, 4);
            detail::write_u32(out, bits);
        }
    }
    if (!out) throw AudioError("save_wav: write failed for " + path);
}

// ---------------------------------------------------------------- resampling

namespace detail {

inline double bessel_i0(double x) {
    // power series, converges fast for the beta range used here
    double sum = 1.0, term = 1.0;
    for (int k = 1; k < 64; ++k) {
        term *= (x / (2.0 * k)) * (x / (2.0 * k));
        sum += term;
        if (term < 1e-16 * sum) break;
    }
    return sum;
}

}  // namespace detail

// Windowed-sinc resampler, Kaiser beta = 8, 64 taps evaluated per output sample.
inline AudioBuffer resample(const AudioBuffer& in, int target_rate) {
    if (target_rate <= 0) throw AudioError("resample: target_rate must be positive");
    if (in.sample_rate == target_rate || in.samples.empty()) {
        AudioBuffer out = in;
        out.sample_rate = target_rate;
        return out;
    }

    const double ratio = double(target_rate) / in.sample_rate;
    const size_t out_len = size_t(std::llround(double(in.samples.size()) * ratio));

    const int taps = 64;
    const int half = taps / 2;
    const double beta = 8.0;
    // cutoff below the smaller Nyquist, with rolloff margin for the finite window
    const double cutoff = 0.9 * std::min(1.0, ratio);
    const double i0b = detail::bessel_i0(beta);

    AudioBuffer out;
    out.sample_rate = target_rate;
    out.samples.resize(out_len);

    const auto& x = in.samples;
    const long n = long(x.size());
    for (size_t m = 0; m < out_len; ++m) {
        const double center = double(m) / ratio;
        const long i0 = long(std::floor(center)) - half + 1;
        double acc = 0.0;
        for (long i = i0; i < i0 + taps; ++i) {
            if (i < 0 || i >= n) continue;
            const double d = double(i) - center;
            const double u = d / half;
            if (u <= -1.0 || u >= 1.0) continue;
            const double win = detail::bessel_i0(beta * std::sqrt(1.0 - u * u)) / i0b;
            const double arg = M_PI * d * cutoff;
            const double sinc = (std::abs(arg) < 1e-12) ? 1.0 : std::sin(arg) / arg;
            acc += double(x[i]) * cutoff * sinc * win;
        }
        out.samples[m] = float(acc);
    }
    return out;
}

// ---------------------------------------------------------------- FFT / STFT

namespace detail {

// iterative radix-2 FFT, in place; n must be a power of two
inline void fft(std::vector<std::complex<double>>& a, bool inverse = false) {
    const size_t n = a.size();
    if (n < 2) return;
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * M_PI / double(len) * (inverse ? 1.0 : -1.0);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                std::complex<double> u = a[i + k];
                std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& v : a) v /= double(n);
}

inline bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

// sample with reflection at both ends; valid for any idx when len > 0
inline float reflect_at(const std::vector<float>& x, long idx) {
    const long n = long(x.size());
    if (n == 1) return x[0];
    const long period = 2 * (n - 1);
    long k = idx % period;
    if (k < 0) k += period;
    if (k >= n) k = period - k;
    return x[size_t(k)];
}

inline std::vector<double> hann_window(int n) {
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n);
    return w;
}

}  // namespace detail

// Hann magnitude STFT. frames = 1 + floor((max(len, window) - window) / hop);
// signals shorter than one window are reflection-padded to fill the frame.
inline Spectrogram stft(const AudioBuffer& in, int window, int hop) {
    if (hop <= 0 || hop > window) throw AudioError("stft: require 0 < hop <= window");
    if (!detail::is_pow2(window)) throw AudioError("stft: window must be a power of two");
    if (in.samples.empty()) throw AudioError("stft: empty buffer");

    const long len = long(in.samples.size());
    const long eff = std::max(len, long(window));
    const int n_frames = int(1 + (eff - window) / hop);
    const int bins = window / 2 + 1;
    const auto win = detail::hann_window(window);

    Spectrogram spec;
    spec.hop = hop;
    spec.window = window;
    spec.sample_rate = in.sample_rate;
    spec.magnitudes.resize(n_frames, bins);

    std::vector<std::complex<double>> buf(window);
    for (int f = 0; f < n_frames; ++f) {
        const long start = long(f) * hop;
        for (int i = 0; i < window; ++i)
            buf[i] = detail::reflect_at(in.samples, start + i) * win[i];
        detail::fft(buf);
        for (int b = 0; b < bins; ++b)
            spec.magnitudes(f, b) = float(std::abs(buf[b]));
    }
    return spec;
}

// ---------------------------------------------------------------- mel features

namespace detail {

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace detail

// triangular mel filterbank, n_mels x bins; every bin gets nonzero coverage
inline Eigen::MatrixXf mel_filterbank(int n_mels, int bins, int window, int sample_rate) {
    Eigen::MatrixXf fb = Eigen::MatrixXf::Zero(n_mels, bins);
    const double nyq = sample_rate / 2.0;
    const double mel_max = detail::hz_to_mel(nyq);
    std::vector<double> centers(n_mels + 2);
    for (int i = 0; i < n_mels + 2; ++i)
        centers[i] = detail::mel_to_hz(mel_max * i / (n_mels + 1));

    for (int b = 0; b < bins; ++b) {
        const double f = double(b) * sample_rate / window;
        for (int m = 0; m < n_mels; ++m) {
            const double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
            double w = 0.0;
            if (f >= lo && f <= mid && mid > lo) w = (f - lo) / (mid - lo);
            else if (f > mid && f <= hi && hi > mid) w = (hi - f) / (hi - mid);
            fb(m, b) = float(w);
        }
    }
    // edge bins fall on triangle feet; assign them to the nearest filter
    for (int b = 0; b < bins; ++b) {
        if (fb.col(b).sum() > 0.0f) continue;
        const double f = double(b) * sample_rate / window;
        int best = 0;
        double best_d = std::abs(f - centers[1]);
        for (int m = 1; m < n_mels; ++m) {
            const double d = std::abs(f - centers[m + 1]);
            if (d < best_d) { best_d = d; best = m; }
        }
        fb(best, b) = 1.0f;
    }
    return fb;
}

// log-compressed mel filterbank energies, frames x n_mels
inline Eigen::MatrixXf mel_features(const Spectrogram& spec, int n_mels) {
    if (n_mels < 1) throw AudioError("mel_features: n_mels must be >= 1");
    const Eigen::MatrixXf fb = mel_filterbank(n_mels, spec.bins(), spec.window, spec.sample_rate);
    Eigen::MatrixXf energies = spec.magnitudes * fb.transpose();  // frames x n_mels
    return (energies.array() + 1e-5f).log().matrix();
}

}  // namespace ditse

#endif  // DITSE_AUDIO_HPP
