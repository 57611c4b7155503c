#ifndef DITSE_CODEC_HPP
#define DITSE_CODEC_HPP

#include <complex>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ditse/audio.hpp"
#include "ditse/tensor.hpp"

namespace ditse::nn {

struct LatentSequence {
    Eigen::MatrixXf values;  // frames x latent_dim
    double frame_rate = 40.0;
    int latent_dim = 0;
    int frames() const { return int(values.rows()); }
};

// -------------------------------------------------------------- conv layers

template <typename T>
struct Conv1dLayer {
    Parameter<T> W, b;
    int k = 0, stride = 1, pl = 0, pr = 0;

    void setup(const std::string& name, int in, int out, int kernel, int s, std::mt19937_64& rng) {
        k = kernel;
        stride = s;
        pl = (k - s) / 2;
        pr = k - s - pl;
        W.setup(name + ".w", k * in, out);
        W.init_kaiming(rng, k * in);
        b.setup(name + ".b", 1, out);
    }
    Var<T> fwd(Graph<T>& g, Var<T> x) {
        return add_rowvec(conv1d(x, g.param(W), k, stride, pl, pr), g.param(b));
    }
    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&W);
        out.push_back(&b);
    }
};

template <typename T>
struct ConvT1dLayer {
    Parameter<T> W, b;
    int k = 0, stride = 1, c_out = 0;

    void setup(const std::string& name, int in, int out, int kernel, int s, std::mt19937_64& rng) {
        k = kernel;
        stride = s;
        c_out = out;
        W.setup(name + ".w", in, k * out);
        W.init_kaiming(rng, k * in);
        b.setup(name + ".b", 1, out);
    }
    Var<T> fwd(Graph<T>& g, Var<T> x) {
        return add_rowvec(conv1d_transpose(x, g.param(W), k, stride, c_out), g.param(b));
    }
    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&W);
        out.push_back(&b);
    }
};

// two-conv residual unit, keeps channel count and rate
template <typename T>
struct ResUnit {
    Conv1dLayer<T> c1, c2;

    void setup(const std::string& name, int ch, std::mt19937_64& rng) {
        c1.setup(name + ".c1", ch, ch, 7, 1, rng);
        c2.setup(name + ".c2", ch, ch, 1, 1, rng);
    }
    Var<T> fwd(Graph<T>& g, Var<T> x) {
        return add(x, c2.fwd(g, snake(c1.fwd(g, snake(x)))));
    }
    void collect(std::vector<Parameter<T>*>& out) {
        c1.collect(out);
        c2.collect(out);
    }
};

// ------------------------------------------------------- multiscale spectral loss

// L1 distance between log magnitude spectra over several STFT scales,
// averaged per scale and summed. Fused op: the backward pass maps the per-bin
// log-magnitude subgradient back to the waveform through the transform
// explicitly instead of tracking every FFT butterfly in the graph.
template <typename T>
Var<T> multiscale_spectral_l1(Var<T> xhat, const Mat<T>& target,
                              const std::vector<int>& scales = {256, 512, 1024, 2048}) {
    if (xhat.cols() != 1 || target.cols() != 1 || xhat.rows() != target.rows())
        throw TensorError("multiscale_spectral_l1: expect matching column waveforms");
    const int n = xhat.rows();
    const T eps = T(1e-5);

    auto frame_fft = [](const Mat<T>& x, int start, int s, const std::vector<double>& win) {
        std::vector<std::complex<double>> a(static_cast<size_t>(s));
        for (int i = 0; i < s; ++i) a[size_t(i)] = double(x(start + i, 0)) * win[size_t(i)];
        ditse::detail::fft(a);
        return a;
    };

    double total = 0.0;
    for (int s : scales) {
        if (n < s) continue;
        const int hop = s / 4;
        const int nf = 1 + (n - s) / hop;
        const auto win = ditse::detail::hann_window(s);
        const double norm = double(nf) * double(s / 2 + 1);
        for (int f = 0; f < nf; ++f) {
            auto A = frame_fft(xhat.val(), f * hop, s, win);
            auto B = frame_fft(target, f * hop, s, win);
            for (int k = 0; k <= s / 2; ++k)
                total += std::abs(std::log(std::abs(A[size_t(k)]) + double(eps)) -
                                  std::log(std::abs(B[size_t(k)]) + double(eps))) /
                         norm;
        }
    }

    Graph<T>& g = *xhat.g;
    Mat<T> v(1, 1);
    v(0, 0) = T(total);
    return g.adopt(v, [xhat, target, scales, n, eps, frame_fft](Graph<T>& g, typename Graph<T>::Node& nd) {
        const double up = double(nd.grad(0, 0));
        Mat<T>& gx = g.grad(xhat);
        for (int s : scales) {
            if (n < s) continue;
            const int hop = s / 4;
            const int nf = 1 + (n - s) / hop;
            const auto win = ditse::detail::hann_window(s);
            const double norm = double(nf) * double(s / 2 + 1);
            for (int f = 0; f < nf; ++f) {
                auto A = frame_fft(xhat.val(), f * hop, s, win);
                auto B = frame_fft(target, f * hop, s, win);
                std::vector<std::complex<double>> a(static_cast<size_t>(s), {0.0, 0.0});
                for (int k = 0; k <= s / 2; ++k) {
                    const double m = std::abs(A[size_t(k)]);
                    const double mt = std::abs(B[size_t(k)]);
                    const double sgn = (std::log(m + double(eps)) > std::log(mt + double(eps))) ? 1.0 : -1.0;
                    const double dl_dm = up * sgn / ((m + double(eps)) * norm);
                    const double safe = std::max(m, 1e-30);
                    // d|X|/dRe = Re/|X|, d|X|/dIm = Im/|X|; pack as one complex coefficient
                    a[size_t(k)] = std::complex<double>(dl_dm * A[size_t(k)].real() / safe,
                                                        dl_dm * A[size_t(k)].imag() / safe);
                }
                ditse::detail::fft(a, /*inverse=*/true);
                for (int i = 0; i < s; ++i)
                    gx(f * hop + i, 0) += T(win[size_t(i)] * double(s) * a[size_t(i)].real());
            }
        }
    });
}

// KL(q || N(0, I)) in closed form, averaged over elements
template <typename T>
Var<T> kl_divergence(Graph<T>& g, Var<T> mean, Var<T> logvar) {
    (void)g;
    Var<T> inner = add_scalar(sub(logvar, add(mul(mean, mean), exp_(logvar))), T(1));
    return scale(mean_all(inner), T(-0.5));
}

// --------------------------------------------------------------------- VAE

struct VaeConfig {
    int sample_rate = 16000;
    double frame_rate = 40.0;
    std::vector<int> strides{5, 5, 4, 4};
    std::vector<int> channels{24, 32, 48, 64, 64};  // strides.size() + 1 widths
    int latent_dim = 16;
    double kl_weight = 1e-4;
    double wav_weight = 1.0;

    int hop_total() const {
        return std::accumulate(strides.begin(), strides.end(), 1, std::multiplies<int>());
    }
    void validate() const {
        if (channels.size() != strides.size() + 1)
            throw TensorError("vae config: need strides.size()+1 channel widths");
        if (double(hop_total()) * frame_rate != double(sample_rate))
            throw TensorError("vae config: strides product * frame_rate != sample_rate");
    }
};

inline VaeConfig vae_toy16k() { return VaeConfig{}; }

inline VaeConfig vae_paper48k() {
    VaeConfig c;
    c.sample_rate = 48000;
    c.strides = {5, 5, 6, 8};
    c.channels = {32, 64, 128, 256, 256};
    c.latent_dim = 64;
    return c;
}

// strided 1-D convolutional autoencoder with a diagonal-Gaussian bottleneck
template <typename T>
struct Vae {
    VaeConfig cfg;
    Conv1dLayer<T> enc_in, enc_out;
    std::vector<Conv1dLayer<T>> enc_stages;
    std::vector<ResUnit<T>> enc_res;
    Conv1dLayer<T> dec_in, dec_out;
    std::vector<ConvT1dLayer<T>> dec_stages;
    std::vector<ResUnit<T>> dec_res;

    void setup(const VaeConfig& c, std::mt19937_64& rng) {
        cfg = c;
        cfg.validate();
        const int S = int(c.strides.size());
        enc_in.setup("vae.enc.in", 1, c.channels[0], 7, 1, rng);
        enc_stages.resize(size_t(S));
        enc_res.resize(size_t(S));
        for (int i = 0; i < S; ++i) {
            enc_res[size_t(i)].setup("vae.enc.r" + std::to_string(i), c.channels[size_t(i)], rng);
            enc_stages[size_t(i)].setup("vae.enc.s" + std::to_string(i), c.channels[size_t(i)],
                                        c.channels[size_t(i) + 1], 2 * c.strides[size_t(i)],
                                        c.strides[size_t(i)], rng);
        }
        enc_out.setup("vae.enc.out", c.channels[size_t(S)], 2 * c.latent_dim, 3, 1, rng);
        dec_in.setup("vae.dec.in", c.latent_dim, c.channels[size_t(S)], 3, 1, rng);
        dec_stages.resize(size_t(S));
        dec_res.resize(size_t(S));
        for (int i = S - 1; i >= 0; --i) {
            dec_stages[size_t(S - 1 - i)].setup("vae.dec.s" + std::to_string(S - 1 - i),
                                                c.channels[size_t(i) + 1], c.channels[size_t(i)],
                                                2 * c.strides[size_t(i)], c.strides[size_t(i)], rng);
            dec_res[size_t(S - 1 - i)].setup("vae.dec.r" + std::to_string(S - 1 - i),
                                             c.channels[size_t(i)], rng);
        }
        dec_out.setup("vae.dec.out", c.channels[0], 1, 7, 1, rng);
    }

    // wave: samples x 1, length must be a whole number of hops
    std::pair<Var<T>, Var<T>> encode(Graph<T>& g, Var<T> wave) {
        if (wave.cols() != 1) throw TensorError("vae encode: expect samples x 1");
        if (wave.rows() % cfg.hop_total() != 0)
            throw TensorError("vae encode: length not a multiple of the hop");
        Var<T> h = enc_in.fwd(g, wave);
        for (size_t i = 0; i < enc_stages.size(); ++i)
            h = enc_stages[i].fwd(g, snake(enc_res[i].fwd(g, h)));
        Var<T> both = enc_out.fwd(g, snake(h));
        return {slice_cols(both, 0, cfg.latent_dim), slice_cols(both, cfg.latent_dim, cfg.latent_dim)};
    }

    Var<T> decode(Graph<T>& g, Var<T> latent) {
        if (latent.cols() != cfg.latent_dim) throw TensorError("vae decode: latent dim mismatch");
        Var<T> h = dec_in.fwd(g, latent);
        for (size_t i = 0; i < dec_stages.size(); ++i)
            h = dec_res[i].fwd(g, dec_stages[i].fwd(g, snake(h)));
        return dec_out.fwd(g, snake(h));
    }

    // non-graph inference helpers
    Eigen::MatrixXf encode_mean(const AudioBuffer& in) {
        if (in.sample_rate != cfg.sample_rate) throw AudioError("vae: sample rate mismatch");
        Mat<T> w = padded_wave(in);
        if (w.rows() == 0) return Eigen::MatrixXf(0, cfg.latent_dim);
        Graph<T> g;
        Mat<T> m = encode(g, g.constant(w)).first.val();
        return m.template cast<float>();
    }

    AudioBuffer decode_audio(const Eigen::MatrixXf& latent) {
        AudioBuffer out;
        out.sample_rate = cfg.sample_rate;
        if (latent.rows() == 0) return out;
        Graph<T> g;
        Mat<T> w = decode(g, g.constant(Mat<T>(latent.template cast<T>()))).val();
        out.samples.resize(size_t(w.rows()));
        for (int i = 0; i < w.rows(); ++i) out.samples[size_t(i)] = float(w(i, 0));
        return out;
    }

    Mat<T> padded_wave(const AudioBuffer& in) const {
        const int hop = cfg.hop_total();
        const long n = long(in.samples.size());
        const long padded = (n + hop - 1) / hop * hop;
        Mat<T> w = Mat<T>::Zero(padded, 1);
        for (long i = 0; i < n; ++i) w(i, 0) = T(in.samples[size_t(i)]);
        return w;
    }

    void collect(std::vector<Parameter<T>*>& out) {
        enc_in.collect(out);
        for (size_t i = 0; i < enc_stages.size(); ++i) {
            enc_res[i].collect(out);
            enc_stages[i].collect(out);
        }
        enc_out.collect(out);
        dec_in.collect(out);
        for (size_t i = 0; i < dec_stages.size(); ++i) {
            dec_stages[i].collect(out);
            dec_res[i].collect(out);
        }
        dec_out.collect(out);
    }
};

struct VaeLossParts {
    double total = 0, spectral = 0, waveform = 0, kl = 0;
};

template <typename T>
Var<T> vae_loss(Graph<T>& g, Var<T> reconstruction, const Mat<T>& audio, Var<T> mean, Var<T> logvar,
                const VaeConfig& cfg, VaeLossParts* parts = nullptr,
                const std::vector<int>& scales = {256, 512, 1024, 2048}) {
    Var<T> spec = multiscale_spectral_l1(reconstruction, audio, scales);
    Var<T> wav = l1_loss(reconstruction, audio);
    Var<T> kl = kl_divergence(g, mean, logvar);
    Var<T> total = add(spec, add(scale(wav, T(cfg.wav_weight)), scale(kl, T(cfg.kl_weight))));
    if (parts) {
        parts->spectral = double(spec.val()(0, 0));
        parts->waveform = double(wav.val()(0, 0));
        parts->kl = double(kl.val()(0, 0));
        parts->total = double(total.val()(0, 0));
    }
    return total;
}

// --------------------------------------------------------------------- RVQ

struct RvqConfig {
    int sample_rate = 16000;
    std::vector<int> strides{5, 5, 8};
    std::vector<int> channels{16, 24, 32, 32};
    int code_dim = 16;
    int n_quantizers = 4;
    int codebook_size = 64;
    double commit_weight = 0.25;
    double wav_weight = 1.0;

    int hop_total() const {
        return std::accumulate(strides.begin(), strides.end(), 1, std::multiplies<int>());
    }
};

// small waveform autoencoder with residual vector quantization in the middle.
// codebook row 0 of every stage stays pinned at zero, which makes skipping a
// stage free and the per-stage residual energy non-increasing by construction.
template <typename T>
struct Rvq {
    RvqConfig cfg;
    Conv1dLayer<T> enc_in, enc_out;
    std::vector<Conv1dLayer<T>> enc_stages;
    Conv1dLayer<T> dec_in, dec_out;
    std::vector<ConvT1dLayer<T>> dec_stages;
    std::vector<Parameter<T>> codebooks;  // n_quantizers tables, size x code_dim
    bool trained = false;

    void setup(const RvqConfig& c, std::mt19937_64& rng) {
        cfg = c;
        if (c.channels.size() != c.strides.size() + 1)
            throw TensorError("rvq config: need strides.size()+1 channel widths");
        const int S = int(c.strides.size());
        enc_in.setup("rvq.enc.in", 1, c.channels[0], 7, 1, rng);
        enc_stages.resize(size_t(S));
        for (int i = 0; i < S; ++i)
            enc_stages[size_t(i)].setup("rvq.enc.s" + std::to_string(i), c.channels[size_t(i)],
                                        c.channels[size_t(i) + 1], 2 * c.strides[size_t(i)],
                                        c.strides[size_t(i)], rng);
        enc_out.setup("rvq.enc.out", c.channels[size_t(S)], c.code_dim, 3, 1, rng);
        dec_in.setup("rvq.dec.in", c.code_dim, c.channels[size_t(S)], 3, 1, rng);
        dec_stages.resize(size_t(S));
        for (int i = S - 1; i >= 0; --i)
            dec_stages[size_t(S - 1 - i)].setup("rvq.dec.s" + std::to_string(S - 1 - i),
                                                c.channels[size_t(i) + 1], c.channels[size_t(i)],
                                                2 * c.strides[size_t(i)], c.strides[size_t(i)], rng);
        dec_out.setup("rvq.dec.out", c.channels[0], 1, 7, 1, rng);
        codebooks.resize(size_t(c.n_quantizers));
        for (int q = 0; q < c.n_quantizers; ++q) {
            codebooks[size_t(q)].setup("rvq.cb" + std::to_string(q), c.codebook_size, c.code_dim);
            codebooks[size_t(q)].init_uniform(rng, T(0.5));
            codebooks[size_t(q)].value.row(0).setZero();
        }
    }

    void pin_zero_codeword() {
        for (auto& cb : codebooks) cb.value.row(0).setZero();
    }

    Var<T> encode(Graph<T>& g, Var<T> wave) {
        if (wave.cols() != 1) throw TensorError("rvq encode: expect samples x 1");
        if (wave.rows() % cfg.hop_total() != 0)
            throw TensorError("rvq encode: length not a multiple of the hop");
        Var<T> h = enc_in.fwd(g, wave);
        for (auto& st : enc_stages) h = st.fwd(g, snake(h));
        return enc_out.fwd(g, snake(h));
    }

    Var<T> decode(Graph<T>& g, Var<T> codes) {
        Var<T> h = dec_in.fwd(g, codes);
        for (auto& st : dec_stages) h = st.fwd(g, snake(h));
        return dec_out.fwd(g, snake(h));
    }

    // nearest-neighbor residual quantization on plain matrices
    std::pair<Eigen::MatrixXi, Mat<T>> quantize(const Mat<T>& frames) const {
        Eigen::MatrixXi codes(frames.rows(), cfg.n_quantizers);
        Mat<T> deq = Mat<T>::Zero(frames.rows(), frames.cols());
        Mat<T> residual = frames;
        for (int q = 0; q < cfg.n_quantizers; ++q) {
            const Mat<T>& cb = codebooks[size_t(q)].value;
            for (int f = 0; f < frames.rows(); ++f) {
                int best = 0;
                T best_d = (residual.row(f) - cb.row(0)).squaredNorm();
                for (int j = 1; j < cb.rows(); ++j) {
                    const T d = (residual.row(f) - cb.row(j)).squaredNorm();
                    if (d < best_d) {
                        best_d = d;
                        best = j;
                    }
                }
                codes(f, q) = best;
                residual.row(f) -= cb.row(best);
                deq.row(f) += cb.row(best);
            }
        }
        return {codes, deq};
    }

    struct QuantizeResult {
        Var<T> dequantized;     // straight-through to the encoder output
        Var<T> codebook_loss;   // pulls selected codewords toward the residuals
        Var<T> commit_loss;     // pulls the encoder output toward the codewords
    };

    QuantizeResult quantize_st(Graph<T>& g, Var<T> enc) {
        Mat<T> residual = enc.val();
        Mat<T> deq = Mat<T>::Zero(enc.rows(), enc.cols());
        Var<T> cb_loss = g.constant(Mat<T>::Zero(1, 1));
        for (int q = 0; q < cfg.n_quantizers; ++q) {
            const Mat<T>& cb = codebooks[size_t(q)].value;
            std::vector<int> idx(size_t(enc.rows()));
            for (int f = 0; f < enc.rows(); ++f) {
                int best = 0;
                T best_d = (residual.row(f) - cb.row(0)).squaredNorm();
                for (int j = 1; j < cb.rows(); ++j) {
                    const T d = (residual.row(f) - cb.row(j)).squaredNorm();
                    if (d < best_d) {
                        best_d = d;
                        best = j;
                    }
                }
                idx[size_t(f)] = best;
            }
            Var<T> selected = gather_rows(g.param(codebooks[size_t(q)]), idx);
            cb_loss = add(cb_loss, mse_loss(selected, residual));
            for (int f = 0; f < enc.rows(); ++f) {
                residual.row(f) -= cb.row(idx[size_t(f)]);
                deq.row(f) += cb.row(idx[size_t(f)]);
            }
        }
        QuantizeResult r{straight_through(enc, deq), cb_loss, mse_loss(enc, deq)};
        return r;
    }

    // round-trip an audio signal through the quantized codec
    AudioBuffer refine(const AudioBuffer& in) {
        if (!trained) throw TensorError("rvq: codec not trained");
        if (in.sample_rate != cfg.sample_rate) throw AudioError("rvq: sample rate mismatch");
        const int hop = cfg.hop_total();
        const long n = long(in.samples.size());
        if (n == 0) return in;
        const long padded = (n + hop - 1) / hop * hop;
        Mat<T> w = Mat<T>::Zero(padded, 1);
        for (long i = 0; i < n; ++i) w(i, 0) = T(in.samples[size_t(i)]);
        Graph<T> g;
        Mat<T> enc = encode(g, g.constant(w)).val();
        Mat<T> deq = quantize(enc).second;
        Mat<T> out = decode(g, g.constant(deq)).val();
        AudioBuffer res;
        res.sample_rate = in.sample_rate;
        res.samples.resize(size_t(n));
        for (long i = 0; i < n; ++i) res.samples[size_t(i)] = float(out(i, 0));
        return res;
    }

    void collect(std::vector<Parameter<T>*>& out) {
        enc_in.collect(out);
        for (auto& s : enc_stages) s.collect(out);
        enc_out.collect(out);
        dec_in.collect(out);
        for (auto& s : dec_stages) s.collect(out);
        dec_out.collect(out);
        for (auto& cb : codebooks) out.push_back(&cb);
    }
};

}  // namespace ditse::nn

#endif  // DITSE_CODEC_HPP
