#include "doctest.h"

#include <random>

#include "ditse/networks.hpp"

using namespace ditse;
using namespace ditse::nn;

namespace {

using MatD = Mat<double>;
using MatF = Mat<float>;

template <typename T>
Mat<T> random_mat(std::mt19937_64& rng, int r, int c, double s = 1.0) {
    std::uniform_real_distribution<double> d(-s, s);
    Mat<T> m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = T(d(rng));
    return m;
}

AudioBuffer tone(int rate, double seconds, double freq, float amp = 0.3f) {
    AudioBuffer b;
    b.sample_rate = rate;
    const int n = int(std::lround(seconds * rate));
    b.samples.resize(size_t(n));
    for (int i = 0; i < n; ++i)
        b.samples[size_t(i)] = amp * float(std::sin(2.0 * M_PI * freq * i / rate));
    return b;
}

}  // namespace

TEST_CASE("timestep embedding: determinism, range separation, finiteness, injectivity") {
    std::mt19937_64 rng(1);
    TimestepEmbedding<double> te;
    te.setup("t", 64, rng);

    Graph<double> g;
    MatD e0 = te.fwd(g, 0.0).val();
    MatD e0b = te.fwd(g, 0.0).val();
    CHECK((e0 - e0b).cwiseAbs().maxCoeff() == 0.0);

    MatD e1 = te.fwd(g, 1.0).val();
    CHECK((e0 - e1).cwiseAbs().maxCoeff() > 0.1);

    CHECK_THROWS_AS(te.fwd(g, -0.01), ditse::nn::TensorError);
    CHECK_THROWS_AS(te.fwd(g, 1.01), ditse::nn::TensorError);

    // finiteness over 1001 points, injectivity over 1000 points
    std::vector<MatD> embs;
    for (int i = 0; i <= 1000; ++i) {
        Graph<double> gg;
        MatD e = te.fwd(gg, double(i) / 1000.0).val();
        CHECK(e.allFinite());
        if (i < 1000) embs.push_back(e);
    }
    double min_gap = 1e30;
    for (size_t i = 0; i + 1 < embs.size(); ++i)
        min_gap = std::min(min_gap, (embs[i] - embs[i + 1]).cwiseAbs().maxCoeff());
    // adjacent grid points are the closest pairs for a smooth curve in t
    CHECK(min_gap > 1e-6);
}

TEST_CASE("mel feature extractor: layer count, frame count, floor on silence") {
    MelFeatureExtractor fe;
    auto maps = fe.extract(tone(16000, 1.0, 440.0));
    REQUIRE(maps.size() == 3);
    for (const auto& m : maps) {
        CHECK(m.rows() == 100);  // 1 s at hop 160 -> 100 frames
        CHECK(m.cols() == 40);
    }

    AudioBuffer silence;
    silence.sample_rate = 16000;
    silence.samples.assign(16000, 0.0f);
    auto smaps = fe.extract(silence);
    // log floor everywhere, deltas exactly zero
    CHECK((smaps[0].array() - smaps[0](0, 0)).abs().maxCoeff() < 1e-6f);
    CHECK(smaps[1].cwiseAbs().maxCoeff() < 1e-6f);
    CHECK(smaps[2].cwiseAbs().maxCoeff() < 1e-6f);

    AudioBuffer wrong = tone(48000, 0.1, 440.0);
    CHECK_THROWS_AS(fe.extract(wrong), AudioError);
}

TEST_CASE("mel feature extractor: one-hop shift moves features by one frame") {
    MelFeatureExtractor fe;
    std::mt19937_64 rng(5);
    std::normal_distribution<float> nd(0.0f, 0.2f);
    AudioBuffer a;
    a.sample_rate = 16000;
    a.samples.resize(16000);
    for (auto& s : a.samples) s = nd(rng);

    AudioBuffer shifted;
    shifted.sample_rate = 16000;
    shifted.samples.assign(a.samples.begin() + fe.hop(), a.samples.end());

    auto ma = fe.extract(a);
    auto ms = fe.extract(shifted);
    // compare interiors: frame t of the shifted signal equals frame t+1 of the original
    const int n = int(ms[0].rows());
    double worst = 0.0;
    for (int t = 2; t < n - 2; ++t)
        worst = std::max(worst, double((ms[0].row(t) - ma[0].row(t + 1)).cwiseAbs().maxCoeff()));
    CHECK(worst < 1e-4);
}

TEST_CASE("weighted_sum_features: symmetry, saturation, convex envelope") {
    std::mt19937_64 rng(9);
    std::vector<MatD> maps{random_mat<double>(rng, 6, 5), random_mat<double>(rng, 6, 5),
                           random_mat<double>(rng, 6, 5)};

    Graph<double> g;
    MatD eq(1, 3);
    eq.setConstant(0.7);
    MatD avg = weighted_sum_features(g, maps, g.constant(eq)).val();
    MatD manual = (maps[0] + maps[1] + maps[2]) / 3.0;
    CHECK((avg - manual).cwiseAbs().maxCoeff() < 1e-12);

    MatD sat(1, 3);
    sat << 20.0, -20.0, -20.0;
    MatD first = weighted_sum_features(g, maps, g.constant(sat)).val();
    CHECK((first - maps[0]).cwiseAbs().maxCoeff() < 1e-6);

    MatD rnd = random_mat<double>(rng, 1, 3, 2.0);
    MatD out = weighted_sum_features(g, maps, g.constant(rnd)).val();
    for (int i = 0; i < out.rows(); ++i)
        for (int j = 0; j < out.cols(); ++j) {
            const double lo = std::min({maps[0](i, j), maps[1](i, j), maps[2](i, j)});
            const double hi = std::max({maps[0](i, j), maps[1](i, j), maps[2](i, j)});
            CHECK(out(i, j) >= lo - 1e-12);
            CHECK(out(i, j) <= hi + 1e-12);
        }

    std::vector<MatD> bad{maps[0], random_mat<double>(rng, 5, 5)};
    CHECK_THROWS_AS(weighted_sum_features(g, bad, g.constant(MatD::Zero(1, 2))),
                    ditse::nn::TensorError);
}

TEST_CASE("weighted_sum_features logits receive gradient") {
    std::mt19937_64 rng(11);
    std::vector<MatD> maps{random_mat<double>(rng, 4, 3), random_mat<double>(rng, 4, 3)};
    Parameter<double> logits;
    logits.setup("lw", 1, 2);
    logits.value << 0.3, -0.4;

    Graph<double> g;
    auto out = weighted_sum_features(g, maps, g.param(logits));
    MatD target = random_mat<double>(rng, 4, 3);
    g.backward(mse_loss(out, target));
    CHECK(logits.grad.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("conditioner: masking non-negativity and frame-count closure") {
    std::mt19937_64 rng(13);
    ConditionerConfig cc;
    cc.n_layers = 2;
    cc.model_dim = 32;
    cc.ff_dim = 48;
    cc.conv_kernel = 7;
    cc.latent_dim = 8;
    Conditioner<float> cond;
    cond.setup(cc, rng);

    for (int frames : {1, 7, 200}) {
        Graph<float> g;
        MatF noisy = random_mat<float>(rng, frames, cc.latent_dim);
        auto out = cond.fwd(g, g.constant(noisy));
        CHECK(out.rows() == frames);
        CHECK(out.cols() == cc.latent_dim);
        CHECK(out.val().allFinite());
        // masking mode: output sign never flips relative to the input
        for (int i = 0; i < frames; ++i)
            for (int j = 0; j < cc.latent_dim; ++j)
                CHECK(out.val()(i, j) * noisy(i, j) >= 0.0f);
    }

    Graph<float> g;
    CHECK_THROWS_AS(cond.fwd(g, g.constant(MatF::Zero(4, cc.latent_dim + 1))),
                    ditse::nn::TensorError);
}

TEST_CASE("conditioner mapping mode is an unconstrained regression head") {
    std::mt19937_64 rng(17);
    ConditionerConfig cc;
    cc.n_layers = 1;
    cc.model_dim = 16;
    cc.ff_dim = 24;
    cc.conv_kernel = 5;
    cc.latent_dim = 4;
    cc.n_heads = 2;
    cc.mode = ConditionerMode::mapping;
    Conditioner<float> cond;
    cond.setup(cc, rng);
    std::vector<Parameter<float>*> params;
    cond.collect(params);
    for (auto* p : params) p->init_uniform(rng, 0.2f);

    Graph<float> g;
    // zero input in masking mode would force zero output; mapping mode need not
    auto out = cond.fwd(g, g.constant(MatF::Zero(6, 4)));
    CHECK(out.val().cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("dit: adaLN-zero property at initialization") {
    std::mt19937_64 rng(19);
    DiTConfig dc;
    dc.n_layers = 2;
    dc.n_heads = 2;
    dc.channels = 32;
    dc.latent_dim = 6;
    dc.cond_feature_dim = 10;
    DiT<float> dit;
    dit.setup(dc, rng);

    MatF z = random_mat<float>(rng, 12, dc.latent_dim);
    MatF pre = random_mat<float>(rng, 12, dc.latent_dim);
    MatF feats_a = random_mat<float>(rng, 30, dc.cond_feature_dim);
    MatF feats_b = random_mat<float>(rng, 30, dc.cond_feature_dim);

    Graph<float> g;
    auto zv = g.constant(z);
    auto pv = g.constant(pre);
    auto fa = g.constant(feats_a);
    auto fb = g.constant(feats_b);
    MatF ya = dit.fwd(g, zv, &pv, 0.5, &fa).val();
    MatF yb = dit.fwd(g, zv, &pv, 0.5, &fb).val();
    // zero gates: swapping the cross-attention content changes nothing
    CHECK((ya - yb).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("dit: shape closure and null conditioning path") {
    std::mt19937_64 rng(23);
    DiTConfig dc;
    dc.n_layers = 2;
    dc.n_heads = 2;
    dc.channels = 32;
    dc.latent_dim = 6;
    dc.cond_feature_dim = 10;
    DiT<float> dit;
    dit.setup(dc, rng);

    for (int frames : {1, 7, 50, 200}) {
        Graph<float> g;
        auto z = g.constant(random_mat<float>(rng, frames, dc.latent_dim));
        auto out = dit.fwd(g, z, nullptr, 0.25, nullptr);
        CHECK(out.rows() == frames);
        CHECK(out.cols() == dc.latent_dim);
        CHECK(out.val().allFinite());
    }

    Graph<float> g;
    auto z = g.constant(random_mat<float>(rng, 8, dc.latent_dim));
    auto short_pre = g.constant(random_mat<float>(rng, 5, dc.latent_dim));
    CHECK_THROWS_AS(dit.fwd(g, z, &short_pre, 0.5, nullptr), ditse::nn::TensorError);
}

TEST_CASE("dit: concat_timestep=false still yields valid forward") {
    std::mt19937_64 rng(27);
    DiTConfig dc;
    dc.n_layers = 1;
    dc.n_heads = 2;
    dc.channels = 16;
    dc.latent_dim = 4;
    dc.cond_feature_dim = 6;
    dc.concat_timestep = false;
    DiT<float> dit;
    dit.setup(dc, rng);

    Graph<float> g;
    auto z = g.constant(random_mat<float>(rng, 10, dc.latent_dim));
    auto out = dit.fwd(g, z, nullptr, 0.9, nullptr);
    CHECK(out.rows() == 10);
    CHECK(out.val().allFinite());
}

TEST_CASE("dit: finite-difference gradient check on a tiny config") {
    std::mt19937_64 rng(31);
    DiTConfig dc;
    dc.n_layers = 2;
    dc.n_heads = 2;
    dc.channels = 8;
    dc.latent_dim = 3;
    dc.cond_feature_dim = 4;
    DiT<double> dit;
    dit.setup(dc, rng);
    // break the adaLN-zero symmetry so gates pass gradient
    std::vector<Parameter<double>*> params;
    dit.collect(params);
    for (auto* p : params)
        if (p->value.cwiseAbs().maxCoeff() == 0.0) p->init_uniform(rng, 0.1);

    MatD z = random_mat<double>(rng, 5, dc.latent_dim);
    MatD pre = random_mat<double>(rng, 5, dc.latent_dim);
    MatD feats = random_mat<double>(rng, 9, dc.cond_feature_dim);
    MatD target = random_mat<double>(rng, 5, dc.latent_dim);

    auto loss_of = [&]() {
        Graph<double> g;
        auto zv = g.constant(z);
        auto pv = g.constant(pre);
        auto fv = g.constant(feats);
        return mse_loss(dit.fwd(g, zv, &pv, 0.37, &fv), target).val()(0, 0);
    };
    {
        Graph<double> g;
        auto zv = g.constant(z);
        auto pv = g.constant(pre);
        auto fv = g.constant(feats);
        g.backward(mse_loss(dit.fwd(g, zv, &pv, 0.37, &fv), target));
    }

    // sample >= 25 entries across a middle-layer block and check each
    std::vector<Parameter<double>*> checked{&dit.blocks[1].q.W, &dit.blocks[1].f1.W,
                                            &dit.blocks[1].ck.W, &dit.blocks[1].mod.W,
                                            &dit.null_feature};
    const double h = 1e-5;
    int n_checked = 0;
    double worst = 0.0;
    std::uniform_int_distribution<int> pick(0, 1 << 30);
    for (auto* p : checked) {
        for (int s = 0; s < 6; ++s) {
            const int i = pick(rng) % int(p->value.rows());
            const int j = pick(rng) % int(p->value.cols());
            const double keep = p->value(i, j);
            p->value(i, j) = keep + h;
            const double up = loss_of();
            p->value(i, j) = keep - h;
            const double dn = loss_of();
            p->value(i, j) = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double an = p->grad(i, j);
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
            worst = std::max(worst, rel);
            ++n_checked;
        }
    }
    CHECK(n_checked >= 25);
    CHECK(worst < 1e-3);
}

TEST_CASE("dit: permutation of feature frames changes output once gates are open") {
    std::mt19937_64 rng(37);
    DiTConfig dc;
    dc.n_layers = 2;
    dc.n_heads = 2;
    dc.channels = 16;
    dc.latent_dim = 4;
    dc.cond_feature_dim = 6;
    DiT<float> dit;
    dit.setup(dc, rng);
    std::vector<Parameter<float>*> params;
    dit.collect(params);
    for (auto* p : params)
        if (p->value.cwiseAbs().maxCoeff() == 0.0f) p->init_uniform(rng, 0.2f);

    MatF z = random_mat<float>(rng, 8, dc.latent_dim);
    MatF feats = random_mat<float>(rng, 12, dc.cond_feature_dim);
    MatF shuffled = feats;
    shuffled.row(0).swap(shuffled.row(11));
    shuffled.row(3).swap(shuffled.row(7));

    Graph<float> g;
    auto zv = g.constant(z);
    auto fa = g.constant(feats);
    auto fb = g.constant(shuffled);
    MatF ya = dit.fwd(g, zv, nullptr, 0.5, &fa).val();
    MatF yb = dit.fwd(g, zv, nullptr, 0.5, &fb).val();
    CHECK((ya - yb).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("dit + conditioner: every parameter gets gradient after one step") {
    std::mt19937_64 rng(41);
    DiTConfig dc;
    dc.n_layers = 1;
    dc.n_heads = 2;
    dc.channels = 16;
    dc.latent_dim = 4;
    dc.cond_feature_dim = 6;
    DiT<double> dit;
    dit.setup(dc, rng);
    std::vector<Parameter<double>*> params;
    dit.collect(params);
    for (auto* p : params)
        if (p->value.cwiseAbs().maxCoeff() == 0.0) p->init_uniform(rng, 0.2);

    MatD z = random_mat<double>(rng, 6, dc.latent_dim);
    MatD pre = random_mat<double>(rng, 6, dc.latent_dim);
    MatD feats = random_mat<double>(rng, 10, dc.cond_feature_dim);
    MatD target = random_mat<double>(rng, 6, dc.latent_dim);

    Graph<double> g;
    auto zv = g.constant(z);
    auto pv = g.constant(pre);
    auto fv = g.constant(feats);
    g.backward(mse_loss(dit.fwd(g, zv, &pv, 0.4, &fv), target));
    int dead = 0;
    for (auto* p : params) {
        // null embeddings are unused when both conditioning streams are present
        if (p == &dit.null_feature || p == &dit.null_pre_latent) continue;
        if (p->grad.cwiseAbs().maxCoeff() == 0.0) ++dead;
    }
    CHECK(dead == 0);
}
