#include "awmark/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "awmark/rng.hpp"

namespace awmark {

std::string transform_kind_name(TransformKind k) {
    switch (k) {
        case TransformKind::identity: return "identity";
        case TransformKind::crop: return "crop";
        case TransformKind::resize: return "resize";
        case TransformKind::brightness: return "brightness";
        case TransformKind::contrast: return "contrast";
        case TransformKind::jpeg: return "jpeg";
    }
    throw std::logic_error("transform_kind_name: bad kind");
}

TransformKind transform_kind_from_name(const std::string& s) {
    for (TransformKind k : {TransformKind::identity, TransformKind::crop, TransformKind::resize,
                            TransformKind::brightness, TransformKind::contrast, TransformKind::jpeg})
        if (transform_kind_name(k) == s) return k;
    throw std::invalid_argument("unknown transform kind: " + s);
}

void TransformSpec::validate() const {
    switch (kind) {
        case TransformKind::identity:
            break;
        case TransformKind::crop:
        case TransformKind::resize:
            if (!(parameter > 0.0 && parameter <= 1.0))
                throw std::invalid_argument(transform_kind_name(kind) +
                                            ": ratio must be in (0,1], got " +
                                            std::to_string(parameter));
            break;
        case TransformKind::brightness:
        case TransformKind::contrast:
            if (!(parameter > 0.0))
                throw std::invalid_argument(transform_kind_name(kind) +
                                            ": factor must be > 0, got " +
                                            std::to_string(parameter));
            break;
        case TransformKind::jpeg:
            if (!(parameter >= 1.0 && parameter <= 100.0))
                throw std::invalid_argument("jpeg: quality must be in [1,100], got " +
                                            std::to_string(parameter));
            break;
    }
}

Image apply_transform(const Image& image, const TransformSpec& spec) {
    spec.validate();
    switch (spec.kind) {
        case TransformKind::identity:
            return image;
        case TransformKind::crop: {
            const int ch = std::max(1, static_cast<int>(std::floor(spec.parameter * image.h)));
            const int cw = std::max(1, static_cast<int>(std::floor(spec.parameter * image.w)));
            const int oy = (image.h - ch) / 2;
            const int ox = (image.w - cw) / 2;
            Image out = Image::zeros(ch, cw, image.c);
            for (int y = 0; y < ch; ++y)
                for (int x = 0; x < cw; ++x)
                    for (int c = 0; c < image.c; ++c)
                        out.at(y, x, c) = image.at(oy + y, ox + x, c);
            return out;
        }
        case TransformKind::resize: {
            const int rh = std::max(1, static_cast<int>(std::floor(spec.parameter * image.h)));
            const int rw = std::max(1, static_cast<int>(std::floor(spec.parameter * image.w)));
            return resize_bilinear(image, rh, rw);
        }
        case TransformKind::brightness: {
            Image out = image;
            for (double& v : out.px) v = std::clamp(spec.parameter * v, 0.0, 1.0);
            return out;
        }
        case TransformKind::contrast: {
            if (spec.parameter == 1.0) return image;  // exact fixed point
            std::vector<double> mean(image.c, 0.0);
            for (int y = 0; y < image.h; ++y)
                for (int x = 0; x < image.w; ++x)
                    for (int c = 0; c < image.c; ++c) mean[c] += image.at(y, x, c);
            const double n = static_cast<double>(image.h) * image.w;
            for (int c = 0; c < image.c; ++c) mean[c] /= n;
            Image out = image;
            for (int y = 0; y < image.h; ++y)
                for (int x = 0; x < image.w; ++x)
                    for (int c = 0; c < image.c; ++c)
                        out.at(y, x, c) = std::clamp(
                            mean[c] + spec.parameter * (image.at(y, x, c) - mean[c]), 0.0, 1.0);
            return out;
        }
        case TransformKind::jpeg:
            return jpeg_decode(jpeg_encode(image, static_cast<int>(spec.parameter)));
    }
    throw std::logic_error("apply_transform: bad kind");
}

std::vector<SweepCell> robustness_sweep(const CodecParams& codec,
                                        const std::vector<Image>& images,
                                        const std::vector<TransformSpec>& grid,
                                        std::uint64_t seed) {
    if (images.empty()) throw std::invalid_argument("robustness_sweep: no images");
    if (grid.empty()) throw std::invalid_argument("robustness_sweep: empty grid");
    for (const auto& spec : grid) spec.validate();

    std::vector<SweepCell> cells(grid.size());
    for (std::size_t g = 0; g < grid.size(); ++g) cells[g].spec = grid[g];

    for (std::size_t i = 0; i < images.size(); ++i) {
        SeededRng rng(derive_stream(seed, i));
        const Message msg = random_message(codec.cfg.message_bits, rng);
        const Image watermarked = embed(images[i], msg, codec);
        for (std::size_t g = 0; g < grid.size(); ++g) {
            const Image transformed = apply_transform(watermarked, grid[g]);
            cells[g].mean_bit_accuracy += bit_accuracy(extract(transformed, codec), msg);
            cells[g].n_images += 1;
        }
    }
    for (auto& cell : cells) cell.mean_bit_accuracy /= cell.n_images;
    return cells;
}

std::vector<TransformSpec> default_robustness_grid() {
    std::vector<TransformSpec> grid;
    for (TransformKind family : {TransformKind::crop, TransformKind::resize,
                                 TransformKind::brightness, TransformKind::contrast,
                                 TransformKind::jpeg}) {
        grid.push_back({TransformKind::identity, 1.0});
        switch (family) {
            case TransformKind::crop:
            case TransformKind::resize:
                for (double r : {0.95, 0.9, 0.85, 0.8, 0.75}) grid.push_back({family, r});
                break;
            case TransformKind::brightness:
            case TransformKind::contrast:
                for (double f : {1.5, 2.0, 2.5, 3.0, 3.5}) grid.push_back({family, f});
                break;
            case TransformKind::jpeg:
                for (double q : {95.0, 90.0, 85.0, 80.0, 75.0}) grid.push_back({family, q});
                break;
            default:
                break;
        }
    }
    return grid;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_sweep_csv: cannot open " + path);
    f << "# schema_version=1\n";
    f << "transform,parameter,mean_bit_accuracy,n_images\n";
    char buf[128];
    for (const auto& cell : cells) {
        std::snprintf(buf, sizeof(buf), "%s,%g,%.6f,%d\n",
                      transform_kind_name(cell.spec.kind).c_str(), cell.spec.parameter,
                      cell.mean_bit_accuracy, cell.n_images);
        f << buf;
    }
    if (!f) throw std::runtime_error("write_sweep_csv: write failed for " + path);
}

}  // namespace awmark
