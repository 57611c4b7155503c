#include "doctest.h"

#include <cstdio>
#include <random>

#include "ditse/training.hpp"

using namespace ditse;
using namespace ditse::nn;

namespace {

using MatF = Mat<float>;

MatF random_mat(std::mt19937_64& rng, int r, int c, float s = 1.0f) {
    std::uniform_real_distribution<float> d(-s, s);
    MatF m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = d(rng);
    return m;
}

// miniature model wiring for fast loop tests
struct TinySetup {
    VaeConfig vc;
    DiTConfig dc;
    ConditionerConfig cc;
    TinySetup() {
        vc.sample_rate = 16000;
        vc.frame_rate = 40.0;
        vc.strides = {5, 5, 4, 4};
        vc.channels = {4, 6, 8, 8, 8};
        vc.latent_dim = 4;
        dc.n_layers = 1;
        dc.n_heads = 2;
        dc.channels = 16;
        dc.latent_dim = 4;
        dc.cond_feature_dim = 40;
        cc.n_layers = 1;
        cc.model_dim = 16;
        cc.ff_dim = 24;
        cc.conv_kernel = 5;
        cc.latent_dim = 4;
        cc.n_heads = 2;
    }
};

}  // namespace

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.prefix_p = 1.2;
    CHECK_THROWS_AS(c.validate(), TrainError);
    c = TrainConfig{};
    c.final_lr = c.peak_lr;
    CHECK_THROWS_AS(c.validate(), TrainError);
}

TEST_CASE("lr schedule: exact endpoints and junction continuity") {
    TrainConfig c;
    c.total_steps = 20000;
    CHECK(lr_at(0, c) == 0.0);
    CHECK(lr_at(2000, c) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(20000, c) == doctest::Approx(1e-5).epsilon(1e-12));

    // warmup/decay junction: both branches agree at the boundary
    const double left = lr_at(2000, c);
    const double slope = c.peak_lr / 2000.0;
    CHECK(std::abs(lr_at(2001, c) - left) < 10.0 * slope);

    // monotone: increasing through warmup, decreasing after
    for (long s = 1; s <= 2000; ++s) CHECK(lr_at(s, c) >= lr_at(s - 1, c));
    for (long s = 2001; s <= 20000; s += 97) CHECK(lr_at(s, c) <= lr_at(s - 1, c));
}

TEST_CASE("prefix prompt: identity, cap, bit-equality, mask") {
    std::mt19937_64 rng(1);
    MatF z = random_mat(rng, 200, 4);
    MatF x = random_mat(rng, 200, 4);

    TrainConfig c;
    c.prefix_p = 0.0;
    for (int i = 0; i < 20; ++i) {
        auto pp = apply_prefix_prompt(z, x, rng, c);
        CHECK(pp.prompt_frames == 0);
        CHECK((pp.z - z).cwiseAbs().maxCoeff() == 0.0f);
        CHECK(pp.loss_mask.minCoeff() == 1.0f);
    }

    c.prefix_p = 1.0;
    c.prefix_max_fraction = 0.5;
    bool saw_nonzero = false;
    for (int i = 0; i < 200; ++i) {
        auto pp = apply_prefix_prompt(z, x, rng, c);
        CHECK(pp.prompt_frames >= 1);
        CHECK(pp.prompt_frames <= 100);
        saw_nonzero = true;
        // prompted rows are bit-equal to the clean latent, the rest untouched
        CHECK((pp.z.topRows(pp.prompt_frames) - x.topRows(pp.prompt_frames)).cwiseAbs().maxCoeff() == 0.0f);
        const int rest = 200 - pp.prompt_frames;
        CHECK((pp.z.bottomRows(rest) - z.bottomRows(rest)).cwiseAbs().maxCoeff() == 0.0f);
        CHECK(pp.loss_mask.topRows(pp.prompt_frames).maxCoeff() == 0.0f);
        CHECK(pp.loss_mask.bottomRows(rest).minCoeff() == 1.0f);
    }
    CHECK(saw_nonzero);

    MatF bad = random_mat(rng, 100, 4);
    CHECK_THROWS_AS(apply_prefix_prompt(z, bad, rng, c), TrainError);
}

TEST_CASE("cfg dropout: degenerate probabilities and empirical rate") {
    std::mt19937_64 rng(2);
    TrainConfig c;

    c.cfg_dropout_p = 0.0;
    for (int i = 0; i < 100000; ++i) {
        auto d = cfg_dropout(rng, c);
        REQUIRE_FALSE(d.drop_features);
        REQUIRE_FALSE(d.drop_pre_latent);
    }

    c.cfg_dropout_p = 1.0;
    for (int i = 0; i < 1000; ++i) {
        auto d = cfg_dropout(rng, c);
        REQUIRE(d.drop_features);
        REQUIRE(d.drop_pre_latent);
    }

    c.cfg_dropout_p = 0.1;
    long drops = 0;
    for (int i = 0; i < 100000; ++i) {
        auto d = cfg_dropout(rng, c);
        // joint drop by default: the two flags always agree
        REQUIRE(d.drop_features == d.drop_pre_latent);
        drops += d.drop_features ? 1 : 0;
    }
    const double rate = double(drops) / 100000.0;
    CHECK(rate >= 0.09);
    CHECK(rate <= 0.11);

    c.independent_cfg_drop = true;
    bool disagreed = false;
    for (int i = 0; i < 10000; ++i) {
        auto d = cfg_dropout(rng, c);
        if (d.drop_features != d.drop_pre_latent) disagreed = true;
    }
    CHECK(disagreed);
}

TEST_CASE("diffusion loss: oracle zero, lambda gating, prompt-frame exclusion") {
    std::mt19937_64 rng(3);
    TinySetup ts;
    DiT<float> dit;
    dit.setup(ts.dc, rng);
    Conditioner<float> cond;
    cond.setup(ts.cc, rng);
    Parameter<float> logits;
    logits.setup("feat.logits", 1, 3);

    const int frames = 6;
    MatF x = random_mat(rng, frames, 4);
    MatF y = random_mat(rng, frames, 4);
    std::vector<MatF> maps{random_mat(rng, 10, 40), random_mat(rng, 10, 40), random_mat(rng, 10, 40)};
    MatF z = random_mat(rng, frames, 4);
    MatF mask = MatF::Ones(frames, 4);
    mask.topRows(2).setZero();
    CondDrop keep;

    // capture the actual forward outputs, feed them back as targets: loss = 0
    MatF vhat_val, pre_val;
    {
        Graph<float> g;
        Var<float> pre = cond.fwd(g, g.constant(y));
        pre_val = pre.val();
        Var<float> pre_d = g.constant(pre_val);
        Var<float> feats = weighted_sum_features(g, maps, g.param(logits));
        vhat_val = dit.fwd(g, g.constant(z), &pre_d, 0.3, &feats).val();
    }
    {
        Graph<float> g;
        DiffLossParts parts;
        diffusion_loss(g, dit, cond, logits, z, 0.3, vhat_val, mask, pre_val, y, maps, keep, 1.0,
                       &parts);
        CHECK(parts.total == doctest::Approx(0.0));
    }

    // lambda_cond = 0: conditioner parameters receive exactly zero gradient
    {
        Graph<float> g;
        MatF v_tgt = random_mat(rng, frames, 4);
        Var<float> loss = diffusion_loss(g, dit, cond, logits, z, 0.3, v_tgt, mask, x, y, maps,
                                         keep, 0.0, nullptr);
        g.backward(loss);
        std::vector<Parameter<float>*> cp;
        cond.collect(cp);
        for (auto* p : cp) CHECK(p->grad.cwiseAbs().maxCoeff() == 0.0f);
        for (auto* p : cp) p->grad.setZero();
        std::vector<Parameter<float>*> dp;
        dit.collect(dp);
        for (auto* p : dp) p->grad.setZero();
        logits.grad.setZero();
    }

    // perturbing the target on masked (prompt) rows changes neither loss nor grads
    {
        MatF v_a = random_mat(rng, frames, 4);
        MatF v_b = v_a;
        v_b.topRows(2).setConstant(99.0f);
        auto run = [&](const MatF& v_tgt, std::vector<MatF>& grads) -> double {
            Graph<float> g;
            DiffLossParts parts;
            Var<float> loss = diffusion_loss(g, dit, cond, logits, z, 0.3, v_tgt, mask, x, y, maps,
                                             keep, 1.0, &parts);
            g.backward(loss);
            std::vector<Parameter<float>*> all;
            dit.collect(all);
            cond.collect(all);
            all.push_back(&logits);
            for (auto* p : all) {
                grads.push_back(p->grad);
                p->grad.setZero();
            }
            return parts.total;
        };
        std::vector<MatF> ga, gb;
        const double la = run(v_a, ga);
        const double lb = run(v_b, gb);
        CHECK(la == lb);
        REQUIRE(ga.size() == gb.size());
        for (size_t i = 0; i < ga.size(); ++i)
            CHECK((ga[i] - gb[i]).cwiseAbs().maxCoeff() == 0.0f);
    }
}

TEST_CASE("checkpoint: round trip, bit-identical forward, error paths") {
    std::mt19937_64 rng(5);
    TinySetup ts;
    DiT<float> a, b;
    a.setup(ts.dc, rng);
    std::mt19937_64 rng2(999);
    b.setup(ts.dc, rng2);

    std::vector<Parameter<float>*> pa, pb;
    a.collect(pa);
    b.collect(pb);

    nlohmann::json meta{{"step", 123}, {"config_hash", "abc"}};
    const std::string path = "/tmp/ditse_test_ckpt.bin";
    save_checkpoint(path, pa, meta);

    LoadedCheckpoint ck = load_checkpoint(path);
    CHECK(ck.meta.at("step") == 123);
    CHECK(ck.meta.at("config_hash") == "abc");
    apply_checkpoint(ck, pb);

    MatF z = random_mat(rng, 5, ts.dc.latent_dim);
    Graph<float> g;
    auto zv = g.constant(z);
    MatF ya = a.fwd(g, zv, nullptr, 0.5, nullptr).val();
    MatF yb = b.fwd(g, zv, nullptr, 0.5, nullptr).val();
    CHECK((ya - yb).cwiseAbs().maxCoeff() == 0.0f);

    // missing tensor
    Parameter<float> extra;
    extra.setup("does.not.exist", 2, 2);
    std::vector<Parameter<float>*> with_extra = pb;
    with_extra.push_back(&extra);
    CHECK_THROWS_AS(apply_checkpoint(ck, with_extra), TrainError);

    // corrupt magic
    {
        std::ofstream f(path, std::ios::binary);
        f.write("NOPE", 4);
    }
    CHECK_THROWS_AS(load_checkpoint(path), TrainError);
    std::remove(path.c_str());
}

TEST_CASE("train_dit: deterministic, frozen VAE, loss decreases on a gaussian toy") {
    TinySetup ts;

    auto make_items = [&](uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::vector<TrainItem> items;
        for (int i = 0; i < 4; ++i) {
            TrainItem it;
            it.clean_latent = random_mat(rng, 8, 4, 0.8f);
            it.degraded_latent = it.clean_latent + random_mat(rng, 8, 4, 0.3f);
            it.features = {random_mat(rng, 20, 40), random_mat(rng, 20, 40),
                           random_mat(rng, 20, 40)};
            items.push_back(std::move(it));
        }
        return items;
    };

    SUBCASE("same seed, same losses; vae untouched") {
        EnhancerModel m1, m2;
        m1.setup(7, ts.vc, ts.dc, ts.cc);
        m2.setup(7, ts.vc, ts.dc, ts.cc);
        auto items = make_items(11);
        TrainConfig c;
        c.total_steps = 5;
        c.batch_size = 2;
        c.seed = 3;

        Eigen::MatrixXf vae_before = m1.vae.enc_in.W.value;
        std::vector<double> l1, l2;
        train_dit(m1, items, c, &l1);
        train_dit(m2, items, c, &l2);
        REQUIRE(l1.size() == 5);
        REQUIRE(l2.size() == 5);
        for (size_t i = 0; i < l1.size(); ++i) CHECK(l1[i] == l2[i]);
        CHECK((m1.vae.enc_in.W.value - vae_before).cwiseAbs().maxCoeff() == 0.0f);
    }

    SUBCASE("loss halves over 300 steps, median of 3 seeds") {
        std::vector<double> ratios;
        for (uint64_t seed : {1ull, 2ull, 3ull}) {
            EnhancerModel m;
            m.setup(seed, ts.vc, ts.dc, ts.cc);
            auto items = make_items(seed + 100);
            TrainConfig c;
            c.total_steps = 600;
            c.batch_size = 2;
            c.seed = seed;
            c.peak_lr = 1e-3;
            c.final_lr = 1e-5;
            std::vector<double> losses;
            train_dit(m, items, c, &losses);
            auto avg = [&](size_t from, size_t to) {
                double s = 0;
                for (size_t i = from; i < to; ++i) s += losses[i];
                return s / double(to - from);
            };
            ratios.push_back(avg(580, 600) / avg(0, 20));
        }
        std::sort(ratios.begin(), ratios.end());
        CHECK(ratios[1] < 0.5);
    }
}

TEST_CASE("train_vae smoke: runs, finite, reduces loss") {
    TinySetup ts;
    Vae<float> vae;
    std::mt19937_64 rng(13);
    vae.setup(ts.vc, rng);

    std::vector<AudioBuffer> data;
    for (int i = 0; i < 3; ++i) data.push_back(synth::voice(16000, 4000, 50 + uint64_t(i)));

    TrainConfig c;
    c.total_steps = 40;
    c.peak_lr = 1e-3;
    c.final_lr = 1e-5;
    c.seed = 1;
    std::vector<double> losses;
    train_vae(vae, data, c, &losses);
    REQUIRE(losses.size() == 40);
    for (double l : losses) CHECK(std::isfinite(l));
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) head += losses[size_t(i)];
    for (int i = 30; i < 40; ++i) tail += losses[size_t(i)];
    CHECK(tail < head);
}

TEST_CASE("train_rvq smoke: trains and marks codec ready") {
    RvqConfig rc;
    rc.strides = {5, 5, 8};
    rc.channels = {4, 6, 8, 8};
    rc.code_dim = 6;
    rc.n_quantizers = 2;
    rc.codebook_size = 16;
    Rvq<float> rvq;
    std::mt19937_64 rng(17);
    rvq.setup(rc, rng);

    std::vector<AudioBuffer> data;
    for (int i = 0; i < 2; ++i) data.push_back(synth::voice(16000, 4000, 90 + uint64_t(i)));
    TrainConfig c;
    c.total_steps = 15;
    c.peak_lr = 1e-3;
    c.final_lr = 1e-5;
    std::vector<double> losses;
    train_rvq(rvq, data, c, &losses);
    CHECK(rvq.trained);
    REQUIRE(losses.size() == 15);
    for (double l : losses) CHECK(std::isfinite(l));
    for (auto& cb : rvq.codebooks) CHECK(cb.value.row(0).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("synthetic data pairs: lengths match and degradation is audible") {
    auto pairs = synth::make_pairs(3, 16000, 0.5, 42);
    REQUIRE(pairs.size() == 3);
    for (const auto& p : pairs) {
        CHECK(p.clean.samples.size() == 8000);
        CHECK(p.degraded.samples.size() == 8000);
        CHECK(p.clean.rms() > 1e-4);
        double diff = 0.0;
        for (size_t i = 0; i < p.clean.samples.size(); ++i)
            diff += std::abs(double(p.clean.samples[i] - p.degraded.samples[i]));
        CHECK(diff > 1e-3);
    }
    // determinism
    auto again = synth::make_pairs(3, 16000, 0.5, 42);
    for (int i = 0; i < 3; ++i)
        CHECK(pairs[size_t(i)].degraded.samples == again[size_t(i)].degraded.samples);
}
