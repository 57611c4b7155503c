#ifndef DITSE_METRICS_HPP
#define DITSE_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ditse/audio.hpp"
#include "json.hpp"

namespace ditse {

// scale-invariant SDR in dB, capped at +100
inline double si_sdr(const AudioBuffer& reference, const AudioBuffer& estimate) {
    if (reference.samples.size() != estimate.samples.size())
        throw AudioError("si_sdr: length mismatch");
    const size_t n = reference.samples.size();
    double rr = 0.0, er = 0.0;
    for (size_t i = 0; i < n; ++i) {
        rr += double(reference.samples[i]) * reference.samples[i];
        er += double(estimate.samples[i]) * reference.samples[i];
    }
    if (rr < 1e-16) throw AudioError("si_sdr: silent reference");
    const double scale = er / rr;
    double target = 0.0, residual = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double t = scale * reference.samples[i];
        const double r = double(estimate.samples[i]) - t;
        target += t * t;
        residual += r * r;
    }
    if (residual < 1e-24 * std::max(target, 1.0) || target / std::max(residual, 1e-300) > 1e10)
        return 100.0;
    return std::min(100.0, 10.0 * std::log10(target / residual));
}

// plain SNR of estimate against reference, in dB
inline double measured_snr(const AudioBuffer& reference, const AudioBuffer& estimate) {
    if (reference.samples.size() != estimate.samples.size())
        throw AudioError("measured_snr: length mismatch");
    double sig = 0.0, err = 0.0;
    for (size_t i = 0; i < reference.samples.size(); ++i) {
        sig += double(reference.samples[i]) * reference.samples[i];
        const double d = double(reference.samples[i]) - estimate.samples[i];
        err += d * d;
    }
    if (err < 1e-24) return 100.0;
    return std::min(100.0, 10.0 * std::log10(sig / err));
}

// log-spectral distance in dB: RMS over frames of the per-frame RMS
// log-magnitude difference, window 1024 hop 256
inline double lsd(const AudioBuffer& reference, const AudioBuffer& estimate,
                  int window = 1024, int hop = 256) {
    if (reference.samples.size() != estimate.samples.size())
        throw AudioError("lsd: length mismatch");
    const Spectrogram sr = stft(reference, window, hop);
    const Spectrogram se = stft(estimate, window, hop);
    const double eps = 1e-8;
    double acc = 0.0;
    for (int f = 0; f < sr.frames(); ++f) {
        double frame_acc = 0.0;
        for (int b = 0; b < sr.bins(); ++b) {
            const double d = 20.0 * std::log10((double(sr.magnitudes(f, b)) + eps) /
                                               (double(se.magnitudes(f, b)) + eps));
            frame_acc += d * d;
        }
        acc += frame_acc / sr.bins();
    }
    return std::sqrt(acc / sr.frames());
}

// ---------------------------------------------------------------- reports

struct MetricRow {
    std::string file;
    double si_sdr_db = 0.0;
    double lsd_db = 0.0;
    double measured_snr_db = 0.0;
    // reserved columns for externally computed metrics (merge-metrics)
    std::map<std::string, double> extra;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    std::vector<std::string> unmatched;
    std::map<std::string, std::string> metadata;  // seed, steps, config hash, ...

    bool empty() const { return rows.empty(); }

    static double mean_of(const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / v.size();
    }
    static double median_of(std::vector<double> v) {
        if (v.empty()) return 0.0;
        std::sort(v.begin(), v.end());
        const size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    }
    static double std_of(const std::vector<double>& v) {
        if (v.empty()) return 0.0;
        const double m = mean_of(v);
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / v.size());  // population std
    }

    std::vector<double> column(const std::string& name) const {
        std::vector<double> out;
        for (const auto& r : rows) {
            if (name == "si_sdr_db") out.push_back(r.si_sdr_db);
            else if (name == "lsd_db") out.push_back(r.lsd_db);
            else if (name == "measured_snr_db") out.push_back(r.measured_snr_db);
            else if (auto it = r.extra.find(name); it != r.extra.end()) out.push_back(it->second);
        }
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["metadata"] = metadata;
        j["rows"] = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json row = {{"file", r.file},
                                  {"si_sdr_db", r.si_sdr_db},
                                  {"lsd_db", r.lsd_db},
                                  {"measured_snr_db", r.measured_snr_db}};
            for (const auto& [k, v] : r.extra) row[k] = v;
            j["rows"].push_back(row);
        }
        j["unmatched"] = unmatched;
        for (const char* col : {"si_sdr_db", "lsd_db", "measured_snr_db"}) {
            const auto v = column(col);
            j["aggregate"][col] = {{"mean", mean_of(v)}, {"median", median_of(v)}, {"std", std_of(v)}};
        }
        return j;
    }

    std::string to_table() const {
        std::string out = "file                          si_sdr_db   lsd_db   snr_db\n";
        char buf[256];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%-28s %9.3f %8.3f %8.3f\n",
                          r.file.c_str(), r.si_sdr_db, r.lsd_db, r.measured_snr_db);
            out += buf;
        }
        for (const char* col : {"si_sdr_db", "lsd_db", "measured_snr_db"}) {
            const auto v = column(col);
            std::snprintf(buf, sizeof(buf), "# %s mean=%.3f median=%.3f std=%.3f\n",
                          col, mean_of(v), median_of(v), std_of(v));
            out += buf;
        }
        return out;
    }
};

// per-file metrics over matched file names in two directories
inline MetricReport evaluate_run(const std::string& clean_dir, const std::string& enhanced_dir) {
    namespace fs = std::filesystem;
    MetricReport rep;
    if (!fs::is_directory(clean_dir) || !fs::is_directory(enhanced_dir))
        throw AudioError("evaluate_run: missing directory");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(clean_dir))
        if (e.path().extension() == ".wav") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
        const fs::path est = fs::path(enhanced_dir) / name;
        if (!fs::exists(est)) {
            rep.unmatched.push_back(name);
            continue;
        }
        AudioBuffer ref = load_wav((fs::path(clean_dir) / name).string());
        AudioBuffer hyp = load_wav(est.string());
        if (hyp.sample_rate != ref.sample_rate) hyp = resample(hyp, ref.sample_rate);
        const size_t n = std::min(ref.samples.size(), hyp.samples.size());
        ref.samples.resize(n);
        hyp.samples.resize(n);
        MetricRow row;
        row.file = name;
        row.si_sdr_db = si_sdr(ref, hyp);
        row.lsd_db = lsd(ref, hyp);
        row.measured_snr_db = measured_snr(ref, hyp);
        rep.rows.push_back(row);
    }
    return rep;
}

// aggregate per-seed reports (mean +- std of per-seed means)
struct SeedAggregate {
    double si_sdr_mean = 0.0, si_sdr_std = 0.0;
    double lsd_mean = 0.0, lsd_std = 0.0;
};

inline SeedAggregate aggregate_seeds(const std::vector<MetricReport>& reports) {
    std::vector<double> si, ls;
    for (const auto& r : reports) {
        si.push_back(MetricReport::mean_of(r.column("si_sdr_db")));
        ls.push_back(MetricReport::mean_of(r.column("lsd_db")));
    }
    SeedAggregate a;
    a.si_sdr_mean = MetricReport::mean_of(si);
    a.si_sdr_std = MetricReport::std_of(si);
    a.lsd_mean = MetricReport::mean_of(ls);
    a.lsd_std = MetricReport::std_of(ls);
    return a;
}

}  // namespace ditse

#endif  // DITSE_METRICS_HPP
