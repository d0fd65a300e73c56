#include <cmath>

#include <doctest.h>

#include "awmark/embedder.hpp"
#include "awmark/checkpoint.hpp"

using namespace awmark;

namespace {

double pixel_correlation(const Image& a, const Image& b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.px.size(); ++i) {
        ma += a.px[i];
        mb += b.px[i];
    }
    ma /= a.px.size();
    mb /= b.px.size();
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < a.px.size(); ++i) {
        num += (a.px[i] - ma) * (b.px[i] - mb);
        da += (a.px[i] - ma) * (a.px[i] - ma);
        db += (b.px[i] - mb) * (b.px[i] - mb);
    }
    return num / std::sqrt(da * db);
}

}  // namespace

TEST_SUITE_BEGIN("embedder");

TEST_CASE("toy dataset contract") {
    ToyIdentityDataset ds = generate_toy_dataset(10, 2, 0);
    CHECK(ds.images.size() == 20);
    CHECK(ds.labels.size() == 20);
    for (const Image& img : ds.images) {
        CHECK(img.h == 112);
        CHECK(img.w == 112);
        CHECK(img.c == 3);
        CHECK(img.in_range());
    }

    SUBCASE("same seed gives identical bytes") {
        ToyIdentityDataset again = generate_toy_dataset(10, 2, 0);
        for (std::size_t i = 0; i < ds.images.size(); ++i)
            CHECK(ds.images[i].px == again.images[i].px);
    }
    SUBCASE("different seed changes the data") {
        ToyIdentityDataset other = generate_toy_dataset(10, 2, 1);
        CHECK(ds.images[0].px != other.images[0].px);
    }
    SUBCASE("same-identity samples correlate more than cross-identity") {
        double genuine = 0, impostor = 0;
        for (int id = 0; id < 10; ++id)
            genuine += pixel_correlation(ds.sample(id, 0), ds.sample(id, 1));
        for (int id = 0; id < 10; ++id)
            impostor += pixel_correlation(ds.sample(id, 0), ds.sample((id + 1) % 10, 1));
        CHECK(genuine / 10 > impostor / 10);
    }
    SUBCASE("invalid counts rejected") {
        CHECK_THROWS_AS(generate_toy_dataset(1, 2, 0), std::invalid_argument);
        CHECK_THROWS_AS(generate_toy_dataset(4, 1, 0), std::invalid_argument);
    }
}

TEST_CASE("embed_face shape, determinism, input checks") {
    EmbedderConfig cfg;
    cfg.num_identities = 4;
    EmbedderParams emb = init_embedder(cfg, 0);
    ToyIdentityDataset ds = generate_toy_dataset(4, 2, 3);

    std::vector<double> z = embed_face(ds.sample(0, 0), emb);
    CHECK(z.size() == 64);
    CHECK(z == embed_face(ds.sample(0, 0), emb));

    Image wrong = Image::zeros(64, 64, 3);
    CHECK_THROWS_AS(embed_face(wrong, emb), std::invalid_argument);
}

TEST_CASE("embed_face gradient matches finite differences") {
    EmbedderConfig cfg;
    cfg.num_identities = 2;
    EmbedderParams emb = init_embedder(cfg, 5);
    std::vector<double> z_ref;
    Tensor z_ref_t;
    int reliable = 0;
    // redraw datasets until the graph is clear of relu kinks within fd reach
    for (std::uint64_t seed = 9; seed < 29 && reliable < 1; ++seed) {
        ToyIdentityDataset ds = generate_toy_dataset(2, 2, seed);
        z_ref = embed_face(ds.sample(0, 1), emb);
        z_ref_t = Tensor::from_data({64}, z_ref);
        Tensor probe = to_chw(ds.sample(0, 0), true);
        auto rep = grad_check(
            [&](Tape& t, const std::vector<Tensor>& in) {
                return cosine_similarity(t, embed_face_t(t, in[0], emb), z_ref_t);
            },
            {probe}, 1e-5, 24, seed);
        if (rep.unreliable) continue;
        ++reliable;
        CHECK(rep.max_rel_err < 1e-4);
    }
    CHECK(reliable == 1);
}

TEST_CASE("similarity and match") {
    std::vector<double> a = {1, 0, 0}, b = {0, 1, 0};
    CHECK(similarity(a, a) == doctest::Approx(1.0));
    CHECK(similarity(a, b) == doctest::Approx(0.0));

    std::vector<double> b5 = {0, 5, 0};
    CHECK(similarity(a, b5) == doctest::Approx(similarity(a, b)).epsilon(1e-12));

    MatcherConfig tau03{0.3};
    SUBCASE("boundary is inclusive") {
        CHECK(match_score(0.31, 0.3) == 1);
        CHECK(match_score(0.3, 0.3) == 1);
        CHECK(match_score(0.29, 0.3) == 0);
    }
    SUBCASE("monotone in tau and self-match") {
        SeededRng rng(13);
        for (int trial = 0; trial < 100; ++trial) {
            const double s = rng.uniform(-1.0, 1.0);
            const double tau = rng.uniform(-0.99, 0.99);
            const double tau_lower = tau - rng.uniform(0.0, 0.5);
            if (match_score(s, tau) == 1 && tau_lower > -1.0)
                CHECK(match_score(s, tau_lower) == 1);
        }
        CHECK(match(a, a, tau03) == 1);
    }
    SUBCASE("invalid tau rejected") {
        CHECK_THROWS_AS(match(a, b, MatcherConfig{1.5}), std::invalid_argument);
    }
}

TEST_CASE("tiny training run improves separation and is deterministic") {
    ToyIdentityDataset ds = generate_toy_dataset(6, 2, 21);
    EmbedderConfig cfg;
    cfg.num_identities = 6;
    EmbedderTrainConfig tcfg;
    tcfg.epochs = 6;
    tcfg.batch = 4;
    tcfg.lr = 0.2;
    tcfg.seed = 1;

    EmbedderParams emb = init_embedder(cfg, 1);
    TrainLog log = train_embedder(emb, ds, tcfg);
    CHECK(log.epoch_loss.back() < log.epoch_loss.front());

    double genuine = 0, impostor = 0;
    for (int id = 0; id < 6; ++id) {
        std::vector<double> zp = embed_face(ds.sample(id, 0), emb);
        std::vector<double> zr = embed_face(ds.sample(id, 1), emb);
        std::vector<double> zi = embed_face(ds.sample((id + 1) % 6, 1), emb);
        genuine += similarity(zp, zr);
        impostor += similarity(zp, zi);
    }
    CHECK(genuine / 6 > impostor / 6);

    EmbedderParams emb2 = init_embedder(cfg, 1);
    train_embedder(emb2, ds, tcfg);
    for (std::size_t p = 0; p < emb.net.size(); ++p) {
        const Tensor& a = emb.net.entries()[p].value;
        const Tensor& b = emb2.net.entries()[p].value;
        for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
    }
}

TEST_CASE("embedder checkpoint drops the training head") {
    EmbedderConfig cfg;
    cfg.num_identities = 4;
    EmbedderParams emb = init_embedder(cfg, 2);
    const std::string dir = "/tmp/awmark_emb_ckpt_test";
    save_embedder(dir, emb);
    EmbedderParams loaded = embedder_from_checkpoint(dir);
    CHECK(loaded.cfg.embedding_dim == 64);
    CHECK(loaded.head.size() == 0);
    CHECK(loaded.net.size() == emb.net.size());
}

TEST_SUITE_END();
