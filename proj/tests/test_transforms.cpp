#include <cmath>
#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "awmark/transforms.hpp"
#include "awmark/embedder.hpp"

using namespace awmark;

namespace {

// smooth pattern plus mild noise; stands in for natural image statistics
Image natural_image(int h, int w, SeededRng& rng) {
    Image img = Image::zeros(h, w, 3);
    const double fx = rng.uniform(0.02, 0.08), fy = rng.uniform(0.02, 0.08);
    const double phase = rng.uniform(0.0, 6.28);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = 0.5 + 0.25 * std::sin(fx * x * 6.28 + phase + c) +
                           0.15 * std::cos(fy * y * 6.28 + phase) + 0.02 * rng.normal();
                img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
            }
    return img;
}

}  // namespace

TEST_SUITE_BEGIN("transforms");

TEST_CASE("spec validation") {
    CHECK_THROWS_AS((TransformSpec{TransformKind::crop, 0.0}).validate(), std::invalid_argument);
    CHECK_THROWS_AS((TransformSpec{TransformKind::crop, 1.2}).validate(), std::invalid_argument);
    CHECK_THROWS_AS((TransformSpec{TransformKind::brightness, -1.0}).validate(),
                    std::invalid_argument);
    CHECK_THROWS_AS((TransformSpec{TransformKind::jpeg, 0.0}).validate(), std::invalid_argument);
    CHECK_THROWS_AS((TransformSpec{TransformKind::jpeg, 101.0}).validate(), std::invalid_argument);
    CHECK_NOTHROW((TransformSpec{TransformKind::jpeg, 1.0}).validate());
    CHECK(transform_kind_from_name("contrast") == TransformKind::contrast);
    CHECK_THROWS_AS(transform_kind_from_name("blur"), std::invalid_argument);
}

TEST_CASE("identity and ratio-1 cells are exact passthroughs") {
    SeededRng rng(7);
    Image img = natural_image(40, 40, rng);
    CHECK(apply_transform(img, {TransformKind::identity, 1.0}).px == img.px);
    CHECK(apply_transform(img, {TransformKind::crop, 1.0}).px == img.px);
    CHECK(apply_transform(img, {TransformKind::resize, 1.0}).px == img.px);
    CHECK(apply_transform(img, {TransformKind::brightness, 1.0}).px == img.px);
    CHECK(apply_transform(img, {TransformKind::contrast, 1.0}).px == img.px);
}

TEST_CASE("brightness definition") {
    Image img = Image::zeros(2, 1, 3);
    img.at(0, 0, 0) = 0.2;
    img.at(1, 0, 0) = 0.6;
    Image out = apply_transform(img, {TransformKind::brightness, 2.0});
    CHECK(out.at(0, 0, 0) == doctest::Approx(0.4));
    CHECK(out.at(1, 0, 0) == 1.0);  // clamped
}

TEST_CASE("contrast fixes constant images") {
    Image img = Image::zeros(8, 8, 3);
    for (double& v : img.px) v = 0.37;
    for (double factor : {0.5, 1.0, 2.0, 3.5}) {
        Image out = apply_transform(img, {TransformKind::contrast, factor});
        for (double v : out.px) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
    }
}

TEST_CASE("crop and resize shapes") {
    SeededRng rng(9);
    Image img = natural_image(112, 112, rng);
    Image cropped = apply_transform(img, {TransformKind::crop, 0.75});
    CHECK(cropped.h == 84);
    CHECK(cropped.w == 84);
    // centered window
    CHECK(cropped.at(0, 0, 0) == img.at(14, 14, 0));
    Image resized = apply_transform(img, {TransformKind::resize, 0.75});
    CHECK(resized.h == 84);
    CHECK(resized.w == 84);
    CHECK(resized.in_range());
}

TEST_CASE("jpeg round-trip at quality 100 keeps PSNR >= 38 dB") {
    SeededRng rng(11);
    double worst = 1e9;
    for (int trial = 0; trial < 5; ++trial) {
        Image img = natural_image(112, 112, rng);
        Image back = apply_transform(img, {TransformKind::jpeg, 100.0});
        CHECK(back.h == 112);
        CHECK(back.w == 112);
        worst = std::min(worst, psnr(img, back));
    }
    CHECK(worst >= 38.0);
}

TEST_CASE("jpeg quality ladder degrades fidelity") {
    SeededRng rng(13);
    Image img = natural_image(112, 112, rng);
    const double p95 = psnr(img, apply_transform(img, {TransformKind::jpeg, 95.0}));
    const double p30 = psnr(img, apply_transform(img, {TransformKind::jpeg, 30.0}));
    CHECK(p95 > p30);
}

TEST_CASE("sweep aggregation equals mean of per-image accuracies") {
    CodecConfig cfg;
    cfg.message_bits = 8;
    CodecParams codec = init_codec(cfg, 5);
    SeededRng rng(17);
    std::vector<Image> images;
    for (int i = 0; i < 10; ++i) images.push_back(natural_image(32, 32, rng));

    std::vector<TransformSpec> grid = {{TransformKind::identity, 1.0}};
    auto cells = robustness_sweep(codec, images, grid, 42);
    REQUIRE(cells.size() == 1);
    CHECK(cells[0].n_images == 10);

    double manual = 0.0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        SeededRng stream(derive_stream(42, i));
        Message msg = random_message(8, stream);
        Image wm = embed(images[i], msg, codec);
        manual += bit_accuracy(extract(wm, codec), msg);
    }
    CHECK(cells[0].mean_bit_accuracy == doctest::Approx(manual / 10).epsilon(1e-12));
}

TEST_CASE("identity cell composed with extract equals plain extract") {
    CodecConfig cfg;
    cfg.message_bits = 8;
    CodecParams codec = init_codec(cfg, 5);
    SeededRng rng(19);
    Image img = natural_image(40, 40, rng);
    Image wm = embed(img, random_message(8, 1), codec);
    Message direct = extract(wm, codec);
    Message via_identity = extract(apply_transform(wm, {TransformKind::identity, 1.0}), codec);
    CHECK(direct.bits == via_identity.bits);
}

TEST_CASE("default grid layout") {
    auto grid = default_robustness_grid();
    CHECK(grid.size() == 30);  // 5 families x (identity + 5 parameters)
    int identity_cells = 0;
    for (const auto& spec : grid)
        if (spec.kind == TransformKind::identity) ++identity_cells;
    CHECK(identity_cells == 5);
    for (const auto& spec : grid) CHECK_NOTHROW(spec.validate());
}

TEST_CASE("sweep csv") {
    std::vector<SweepCell> cells = {{{TransformKind::identity, 1.0}, 0.9875, 10},
                                    {{TransformKind::jpeg, 95.0}, 0.9125, 10}};
    const std::string path = "/tmp/awmark_sweep_test.csv";
    write_sweep_csv(path, cells);
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    CHECK(line == "# schema_version=1");
    std::getline(f, line);
    CHECK(line == "transform,parameter,mean_bit_accuracy,n_images");
    std::getline(f, line);
    CHECK(line == "identity,1,0.987500,10");
    std::getline(f, line);
    CHECK(line == "jpeg,95,0.912500,10");
    std::filesystem::remove(path);
}

TEST_SUITE_END();
