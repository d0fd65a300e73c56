#ifndef AWMARK_IMAGE_HPP
#define AWMARK_IMAGE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "awmark/tensor.hpp"

namespace awmark {

/// H x W x C pixel tensor, channels-last, values in [0,1]. This is the
/// interchange type at file and transform boundaries; networks run on CHW
/// tensors (see to_chw/from_chw).
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> px;  // row-major HWC

    static Image zeros(int h, int w, int c);
    double& at(int y, int x, int ch) { return px[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const {
        return px[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }
    bool in_range() const;  // all values within [0,1]
};

Tensor to_chw(const Image& img, bool requires_grad = false);
Image from_chw(const Tensor& t);

double psnr(const Image& a, const Image& b);  // peak 1.0

/// Bilinear resample to the given size; half-pixel centers, edge clamped.
/// Resizing to the source size is an exact copy.
Image resize_bilinear(const Image& img, int out_h, int out_w);

// PNG, 8-bit RGB (values quantized with round(255 v)).
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// Baseline JPEG round-trip helpers, quality in [1,100].
std::vector<std::uint8_t> jpeg_encode(const Image& img, int quality);
Image jpeg_decode(const std::vector<std::uint8_t>& bytes);

/// Loads `<identity>/<name>.png` folders, resizing to 112x112; returns
/// images with identity labels assigned in sorted directory order.
struct LabeledImages {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<std::string> identity_names;
};
LabeledImages load_image_folder(const std::string& dir);

}  // namespace awmark

#endif
