#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ditse/config.hpp"
#include "ditse/enhance.hpp"
#include "ditse/metrics.hpp"
#include "ditse/synthdata.hpp"

namespace fs = std::filesystem;
using namespace ditse;
using namespace ditse::nn;

namespace {

std::string default_data_root() {
    const char* env = std::getenv("DITSE_DATA_ROOT");
    return env ? env : "data";
}

struct CommonOpts {
    std::string config_path;
    std::string profile;
    int64_t seed = -1;
    bool dry_run = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON run config");
    cmd->add_option("--profile", o.profile, "config profile (toy16k, paper48k)");
    cmd->add_option("--seed", o.seed, "override the run seed");
    cmd->add_flag("--dry-run", o.dry_run, "validate config and exit without side effects");
}

RunConfig resolve_config(const CommonOpts& o) {
    RunConfig c;
    if (!o.config_path.empty()) {
        c = load_run_config(o.config_path);
    } else {
        apply_profile(c, c.profile);
    }
    if (!o.profile.empty()) apply_profile(c, o.profile);
    if (o.seed >= 0) {
        c.seed = uint64_t(o.seed);
        c.train.seed = uint64_t(o.seed);
        c.sampler.seed = uint64_t(o.seed);
    }
    if (c.data_root.empty()) c.data_root = default_data_root();
    c.vae.validate();
    c.train.validate();
    c.enhance.validate();
    return c;
}

std::vector<std::string> wav_names(const std::string& dir) {
    std::vector<std::string> names;
    if (!fs::is_directory(dir)) throw AudioError("not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".wav") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

std::vector<AudioBuffer> load_dir(const std::string& dir) {
    std::vector<AudioBuffer> out;
    for (const auto& n : wav_names(dir)) out.push_back(load_wav((fs::path(dir) / n).string()));
    if (out.empty()) throw AudioError("no wav files in " + dir);
    return out;
}

std::vector<synth::AudioPair> load_pairs(const std::string& data_dir) {
    const std::string cdir = (fs::path(data_dir) / "clean").string();
    const std::string ddir = (fs::path(data_dir) / "degraded").string();
    std::vector<synth::AudioPair> pairs;
    for (const auto& n : wav_names(cdir)) {
        const fs::path dp = fs::path(ddir) / n;
        if (!fs::exists(dp)) continue;
        pairs.push_back({load_wav((fs::path(cdir) / n).string()), load_wav(dp.string())});
    }
    if (pairs.empty()) throw AudioError("no matched clean/degraded pairs in " + data_dir);
    return pairs;
}

nlohmann::json checkpoint_meta(const char* kind, const RunConfig& cfg) {
    nlohmann::json meta;
    meta["kind"] = kind;
    meta["config"] = run_config_to_json(cfg);
    meta["config_hash"] = config_hash(cfg);
    return meta;
}

RunConfig config_from_meta(const nlohmann::json& meta) {
    RunConfig c;
    apply_profile(c, c.profile);
    apply_run_config_json(meta.at("config"), c);
    return c;
}

// ------------------------------------------------------------------ simulate

int cmd_simulate(const CommonOpts& common, const std::string& out_dir, int count, double seconds) {
    RunConfig cfg = resolve_config(common);
    if (common.dry_run) return 0;
    const std::string root = out_dir.empty() ? (fs::path(cfg.data_root) / "sim").string() : out_dir;
    for (const char* sub : {"clean", "degraded", "rir", "noise"})
        fs::create_directories(fs::path(root) / sub);

    std::mt19937_64 rng(cfg.seed);
    DegradePolicy policy;
    // keep bandlimiting below Nyquist for the configured rate
    std::vector<double> bw;
    for (double b : policy.bandwidth_choices)
        if (2.0 * b < cfg.vae.sample_rate) bw.push_back(b);
    if (!bw.empty()) policy.bandwidth_choices = bw;

    const int rate = cfg.vae.sample_rate;
    const int n = int(seconds * rate);
    std::vector<ManifestRow> manifest;
    for (int i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%04d.wav", i);
        AudioBuffer clean = synth::voice(rate, n, rng());
        DegradationSpec spec = synth::sample_degradation(rng, policy, rate, n);
        auto [degraded, clean_out] = synthesize_pair(clean, spec);

        ManifestRow row;
        row.clean_path = (fs::path("clean") / name).string();
        save_wav(clean_out, (fs::path(root) / "clean" / name).string());
        save_wav(degraded, (fs::path(root) / "degraded" / name).string());
        if (spec.rir) {
            row.rir_path = (fs::path("rir") / name).string();
            save_wav(*spec.rir, (fs::path(root) / *row.rir_path).string());
        }
        for (size_t k = 0; k < spec.noises.size(); ++k) {
            char nn[40];
            std::snprintf(nn, sizeof(nn), "%04d_%zu.wav", i, k);
            row.noise_paths.push_back((fs::path("noise") / nn).string());
            save_wav(spec.noises[k], (fs::path(root) / row.noise_paths.back()).string());
        }
        row.snr_db = spec.snr_db;
        row.eq_gains_db = spec.eq_gains_db;
        row.bandwidth_hz = spec.bandwidth_hz;
        row.seed = spec.seed;
        manifest.push_back(row);
    }
    save_manifest(manifest, (fs::path(root) / "manifest.jsonl").string());
    std::printf("simulate: wrote %d pairs to %s (config %s)\n", count, root.c_str(),
                config_hash(cfg).c_str());
    return 0;
}

// ------------------------------------------------------------------ training

int cmd_train_vae(const CommonOpts& common, const std::string& data_dir, const std::string& out_path,
                  long steps) {
    RunConfig cfg = resolve_config(common);
    if (steps > 0) cfg.train.total_steps = steps;
    if (common.dry_run) return 0;
    auto clean = load_dir((fs::path(data_dir) / "clean").string());
    Vae<float> vae;
    std::mt19937_64 rng(cfg.seed);
    vae.setup(cfg.vae, rng);
    std::vector<double> losses;
    train_vae(vae, clean, cfg.train, &losses);
    std::vector<Parameter<float>*> params;
    vae.collect(params);
    save_checkpoint(out_path, params, checkpoint_meta("vae", cfg));
    std::printf("train-vae: %ld steps, final loss %.5f, saved %s\n", cfg.train.total_steps,
                losses.empty() ? 0.0 : losses.back(), out_path.c_str());
    return 0;
}

int cmd_train_codec(const CommonOpts& common, const std::string& data_dir,
                    const std::string& out_path, long steps) {
    RunConfig cfg = resolve_config(common);
    if (steps > 0) cfg.train.total_steps = steps;
    if (common.dry_run) return 0;
    auto clean = load_dir((fs::path(data_dir) / "clean").string());
    Rvq<float> rvq;
    std::mt19937_64 rng(cfg.seed);
    rvq.setup(cfg.rvq, rng);
    std::vector<double> losses;
    train_rvq(rvq, clean, cfg.train, &losses);
    std::vector<Parameter<float>*> params;
    rvq.collect(params);
    save_checkpoint(out_path, params, checkpoint_meta("rvq", cfg));
    std::printf("train-codec: %ld steps, final loss %.5f, saved %s\n", cfg.train.total_steps,
                losses.empty() ? 0.0 : losses.back(), out_path.c_str());
    return 0;
}

int cmd_train(const CommonOpts& common, const std::string& data_dir, const std::string& init_path,
              const std::string& out_path, long steps) {
    RunConfig cfg = resolve_config(common);
    if (steps > 0) cfg.train.total_steps = steps;
    if (common.dry_run) return 0;
    auto pairs = load_pairs(data_dir);

    EnhancerModel model;
    model.setup(cfg.seed, cfg.vae, cfg.dit, cfg.cond);
    if (!init_path.empty()) {
        LoadedCheckpoint ck = load_checkpoint(init_path);
        apply_checkpoint(ck, model.vae_params());
    } else {
        std::vector<double> vl;
        train_vae(model.vae, [&] {
            std::vector<AudioBuffer> clean;
            for (const auto& p : pairs) clean.push_back(p.clean);
            return clean;
        }(), cfg.train, &vl);
    }

    auto items = build_train_items(model, pairs);
    std::vector<double> losses;
    train_dit(model, items, cfg.train, &losses);
    nlohmann::json meta = checkpoint_meta("enhancer", cfg);
    meta["trained"] = true;
    save_checkpoint(out_path, model.all_params(), meta);
    std::printf("train: %ld steps, final loss %.5f, saved %s (config %s)\n", cfg.train.total_steps,
                losses.empty() ? 0.0 : losses.back(), out_path.c_str(), config_hash(cfg).c_str());
    return 0;
}

// ------------------------------------------------------------------- enhance

EnhancerModel load_enhancer(const std::string& ckpt_path, RunConfig* cfg_out = nullptr) {
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    if (ck.meta.value("kind", "") != "enhancer")
        throw TrainError("checkpoint is not an enhancer bundle: " + ckpt_path);
    RunConfig cfg = config_from_meta(ck.meta);
    EnhancerModel model;
    model.setup(cfg.seed, cfg.vae, cfg.dit, cfg.cond);
    apply_checkpoint(ck, model.all_params());
    model.trained = ck.meta.value("trained", false);
    if (cfg_out) *cfg_out = cfg;
    return model;
}

int cmd_enhance(const CommonOpts& common, const std::string& in_path, const std::string& out_path,
                const std::string& ckpt_path, const std::string& rvq_path, int steps,
                const std::string& sampler_name, double guidance, bool posthoc) {
    RunConfig cfg;
    EnhancerModel model = load_enhancer(ckpt_path, &cfg);
    EnhanceConfig ec = cfg.enhance;
    ec.sampler = cfg.sampler;
    if (steps > 0) ec.sampler.steps = steps;
    if (!sampler_name.empty()) ec.sampler.kind = sampler_kind_from_string(sampler_name);
    if (guidance >= 0.0) ec.sampler.guidance_weight = guidance;
    if (common.seed >= 0) ec.sampler.seed = uint64_t(common.seed);
    ec.posthoc = posthoc;
    if (common.dry_run) return 0;

    Rvq<float> rvq;
    if (posthoc) {
        if (rvq_path.empty()) throw TrainError("--posthoc needs --rvq-ckpt");
        LoadedCheckpoint rk = load_checkpoint(rvq_path);
        RunConfig rcfg = config_from_meta(rk.meta);
        std::mt19937_64 rng(0);
        rvq.setup(rcfg.rvq, rng);
        std::vector<Parameter<float>*> params;
        rvq.collect(params);
        apply_checkpoint(rk, params);
        rvq.trained = true;
    }

    AudioBuffer in = load_wav(in_path);
    AudioBuffer out = enhance(in, model, ec, posthoc ? &rvq : nullptr);
    save_wav(out, out_path);
    std::printf("enhance: %s -> %s (%d steps, %s, w=%.2f, config %s)\n", in_path.c_str(),
                out_path.c_str(), ec.sampler.steps, sampler_kind_to_string(ec.sampler.kind).c_str(),
                ec.sampler.guidance_weight, config_hash(cfg).c_str());
    return 0;
}

// ---------------------------------------------------------------------- eval

int cmd_eval(const std::string& clean_dir, const std::string& enhanced_dir,
             const std::string& report_path, int seeds,
             const std::map<std::string, std::string>& metadata) {
    nlohmann::json out;
    bool empty = true;
    if (seeds <= 1) {
        MetricReport rep = evaluate_run(clean_dir, enhanced_dir);
        rep.metadata = metadata;
        out = rep.to_json();
        empty = rep.empty();
        std::printf("%s", rep.to_table().c_str());
    } else {
        // per-seed runs live in <enhanced>/seed0 .. seed{k-1}
        std::vector<MetricReport> reps;
        for (int s = 0; s < seeds; ++s) {
            const std::string dir = (fs::path(enhanced_dir) / ("seed" + std::to_string(s))).string();
            MetricReport r = evaluate_run(clean_dir, dir);
            r.metadata = metadata;
            r.metadata["seed"] = std::to_string(s);
            out["seeds"].push_back(r.to_json());
            empty = empty && r.empty();
            reps.push_back(std::move(r));
        }
        SeedAggregate agg = aggregate_seeds(reps);
        out["aggregate"] = {{"si_sdr_db", {{"mean", agg.si_sdr_mean}, {"std", agg.si_sdr_std}}},
                            {"lsd_db", {{"mean", agg.lsd_mean}, {"std", agg.lsd_std}}}};
        out["metadata"] = metadata;
        std::printf("eval: %d seeds, si_sdr %.3f +- %.3f dB, lsd %.3f +- %.3f dB\n", seeds,
                    agg.si_sdr_mean, agg.si_sdr_std, agg.lsd_mean, agg.lsd_std);
    }
    if (!report_path.empty()) {
        std::ofstream f(report_path);
        f << out.dump(2) << "\n";
    }
    return empty ? 3 : 0;
}

int cmd_merge_metrics(const std::string& report_path, const std::string& extra_path,
                      const std::string& out_path) {
    std::ifstream rf(report_path);
    if (!rf) throw AudioError("cannot open report: " + report_path);
    nlohmann::json rep = nlohmann::json::parse(rf);

    std::ifstream ef(extra_path);
    if (!ef) throw AudioError("cannot open extra metrics: " + extra_path);
    std::map<std::string, nlohmann::json> extra;
    std::string line;
    while (std::getline(ef, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        extra[j.at("file").get<std::string>()] = j;
    }

    int merged = 0;
    for (auto& row : rep.at("rows")) {
        auto it = extra.find(row.at("file").get<std::string>());
        if (it == extra.end()) continue;
        for (auto& [k, v] : it->second.items())
            if (k != "file") row[k] = v;
        ++merged;
    }
    std::ofstream out(out_path);
    out << rep.dump(2) << "\n";
    std::printf("merge-metrics: merged external columns into %d rows -> %s\n", merged,
                out_path.c_str());
    return 0;
}

// -------------------------------------------------------------------- ablate

struct AblationVariant {
    std::string name;
    RunConfig cfg;
    bool posthoc = false;
};

std::vector<AblationVariant> ablation_axes(const RunConfig& base) {
    std::vector<AblationVariant> v;
    RunConfig c = base;
    c.dit.concat_timestep = false;
    c.cond.mode = ConditionerMode::mapping;
    c.train.lambda_cond = 0.0;
    v.push_back({"baseline", c, false});

    c.dit.concat_timestep = true;
    v.push_back({"+concat-t", c, false});

    c.train.lambda_cond = 1.0;
    v.push_back({"+conditioner-mapping", c, false});

    c.cond.mode = ConditionerMode::masking;
    v.push_back({"+conditioner-masking", c, false});

    v.push_back({"+posthoc", c, true});

    RunConfig small = c;
    small.dit.n_layers = std::max(1, c.dit.n_layers / 2);
    small.dit.channels = std::max(8, c.dit.channels / 2);
    small.cond.model_dim = std::max(8, c.cond.model_dim / 2);
    small.cond.ff_dim = std::max(8, c.cond.ff_dim / 2);
    v.push_back({"scaling-down", small, false});
    return v;
}

int cmd_ablate(const CommonOpts& common, const std::string& data_dir, const std::string& out_path,
               long train_steps, int n_seeds, int eval_count) {
    RunConfig base = resolve_config(common);
    if (train_steps > 0) base.train.total_steps = train_steps;
    if (common.dry_run) return 0;

    auto pairs = load_pairs(data_dir);
    std::vector<synth::AudioPair> eval_pairs(pairs.end() - std::min<size_t>(pairs.size(), size_t(eval_count)),
                                             pairs.end());

    // one VAE shared by every variant so the axis under test is isolated
    EnhancerModel shared;
    shared.setup(base.seed, base.vae, base.dit, base.cond);
    {
        std::vector<AudioBuffer> clean;
        for (const auto& p : pairs) clean.push_back(p.clean);
        train_vae(shared.vae, clean, base.train);
    }
    Eigen::MatrixXf vae_snapshot;  // parameters travel through a checkpoint file
    const std::string vae_tmp = (fs::temp_directory_path() / "ditse_ablate_vae.bin").string();
    save_checkpoint(vae_tmp, shared.vae_params(), checkpoint_meta("vae", base));

    Rvq<float> rvq;
    {
        std::mt19937_64 rng(base.seed);
        rvq.setup(base.rvq, rng);
        std::vector<AudioBuffer> clean;
        for (const auto& p : pairs) clean.push_back(p.clean);
        TrainConfig rc = base.train;
        train_rvq(rvq, clean, rc);
    }

    std::string table = "variant                        params    si_sdr_db (mean+-std)   lsd_db (mean+-std)\n";
    LoadedCheckpoint vae_ck = load_checkpoint(vae_tmp);
    std::vector<long> param_counts;
    for (const auto& variant : ablation_axes(base)) {
        EnhancerModel model;
        model.setup(base.seed, variant.cfg.vae, variant.cfg.dit, variant.cfg.cond);
        apply_checkpoint(vae_ck, model.vae_params());
        auto items = build_train_items(model, pairs);
        train_dit(model, items, variant.cfg.train);
        param_counts.push_back(param_count(model.dit_params()));

        std::vector<MetricReport> reports;
        for (int s = 0; s < n_seeds; ++s) {
            MetricReport rep;
            for (size_t i = 0; i < eval_pairs.size(); ++i) {
                EnhanceConfig ec = variant.cfg.enhance;
                ec.sampler = variant.cfg.sampler;
                ec.sampler.seed = base.sampler.seed + uint64_t(s) * 1000 + i;
                ec.posthoc = variant.posthoc;
                AudioBuffer out = enhance(eval_pairs[i].degraded, model, ec,
                                          variant.posthoc ? &rvq : nullptr);
                AudioBuffer ref = eval_pairs[i].clean;
                const size_t n = std::min(ref.samples.size(), out.samples.size());
                ref.samples.resize(n);
                out.samples.resize(n);
                MetricRow row;
                row.file = "pair" + std::to_string(i);
                row.si_sdr_db = si_sdr(ref, out);
                row.lsd_db = lsd(ref, out);
                rep.rows.push_back(row);
            }
            reports.push_back(std::move(rep));
        }
        SeedAggregate agg = aggregate_seeds(reports);
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%-30s %8ld %12.3f +- %-8.3f %9.3f +- %-8.3f\n",
                      variant.name.c_str(), param_counts.back(), agg.si_sdr_mean, agg.si_sdr_std,
                      agg.lsd_mean, agg.lsd_std);
        table += buf;
    }
    table += "# config " + config_hash(base) + ", " + std::to_string(n_seeds) + " inference seeds\n";
    std::printf("%s", table.c_str());
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        f << table;
    }
    fs::remove(vae_tmp);
    (void)vae_snapshot;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent diffusion speech enhancement toolkit"};
    app.require_subcommand(1);

    CommonOpts c_sim, c_tv, c_tc, c_tr, c_en, c_ab;
    std::string out_dir, data_dir, out_path, init_path, ckpt_path, rvq_path;
    std::string in_path, sampler_name, clean_dir, enhanced_dir, report_path, extra_path;
    int count = 8, seeds = 1, eval_count = 4, steps = -1;
    long train_steps = -1;
    double seconds = 2.0, guidance = -1.0;
    bool posthoc = false;

    auto* sim = app.add_subcommand("simulate", "synthesize a paired toy dataset");
    add_common(sim, c_sim);
    sim->add_option("--out", out_dir, "output directory");
    sim->add_option("--count", count, "number of pairs");
    sim->add_option("--seconds", seconds, "clip length in seconds");

    auto* tv = app.add_subcommand("train-vae", "train the waveform autoencoder");
    add_common(tv, c_tv);
    tv->add_option("--data", data_dir, "dataset directory (expects clean/)")->required();
    tv->add_option("--out", out_path, "checkpoint path")->required();
    tv->add_option("--steps", train_steps, "override training steps");

    auto* tc = app.add_subcommand("train-codec", "train the quantized refinement codec");
    add_common(tc, c_tc);
    tc->add_option("--data", data_dir, "dataset directory (expects clean/)")->required();
    tc->add_option("--out", out_path, "checkpoint path")->required();
    tc->add_option("--steps", train_steps, "override training steps");

    auto* tr = app.add_subcommand("train", "train the diffusion model and conditioner");
    add_common(tr, c_tr);
    tr->add_option("--data", data_dir, "dataset directory (expects clean/ and degraded/)")->required();
    tr->add_option("--init", init_path, "autoencoder checkpoint to start from");
    tr->add_option("--out", out_path, "checkpoint path")->required();
    tr->add_option("--steps", train_steps, "override training steps");

    auto* en = app.add_subcommand("enhance", "enhance a recording");
    add_common(en, c_en);
    en->add_option("--in", in_path, "input wav")->required();
    en->add_option("--out", out_path, "output wav")->required();
    en->add_option("--ckpt", ckpt_path, "enhancer checkpoint")->required();
    en->add_option("--rvq-ckpt", rvq_path, "refinement codec checkpoint");
    en->add_option("--steps", steps, "sampler steps");
    en->add_option("--sampler", sampler_name, "ddim | dpmpp-multistep | dpmpp-multistep-sde");
    en->add_option("--guidance", guidance, "classifier-free guidance weight");
    en->add_flag("--posthoc", posthoc, "apply quantized refinement after decoding");

    auto* ev = app.add_subcommand("eval", "compute objective metrics");
    ev->add_option("--clean", clean_dir, "reference directory")->required();
    ev->add_option("--enhanced", enhanced_dir, "estimate directory")->required();
    ev->add_option("--report", report_path, "report output path");
    ev->add_option("--seeds", seeds, "aggregate across per-seed subdirectories");

    auto* mm = app.add_subcommand("merge-metrics", "merge externally computed metric columns");
    mm->add_option("--report", report_path, "report to merge into")->required();
    mm->add_option("--extra", extra_path, "JSONL with file plus extra columns")->required();
    mm->add_option("--out", out_path, "merged report path")->required();

    auto* ab = app.add_subcommand("ablate", "train and score one variant per design axis");
    add_common(ab, c_ab);
    ab->add_option("--data", data_dir, "dataset directory (expects clean/ and degraded/)")->required();
    ab->add_option("--out", out_path, "report path");
    ab->add_option("--train-steps", train_steps, "training steps per variant");
    ab->add_option("--seeds", seeds, "inference seeds per variant");
    ab->add_option("--eval-count", eval_count, "held-out pairs to score");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed()) return cmd_simulate(c_sim, out_dir, count, seconds);
        if (tv->parsed()) return cmd_train_vae(c_tv, data_dir, out_path, train_steps);
        if (tc->parsed()) return cmd_train_codec(c_tc, data_dir, out_path, train_steps);
        if (tr->parsed()) return cmd_train(c_tr, data_dir, init_path, out_path, train_steps);
        if (en->parsed())
            return cmd_enhance(c_en, in_path, out_path, ckpt_path, rvq_path, steps, sampler_name,
                               guidance, posthoc);
        if (ev->parsed()) return cmd_eval(clean_dir, enhanced_dir, report_path, seeds, {});
        if (mm->parsed()) return cmd_merge_metrics(report_path, extra_path, out_path);
        if (ab->parsed())
            return cmd_ablate(c_ab, data_dir, out_path, train_steps, seeds == 1 ? 5 : seeds, eval_count);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
