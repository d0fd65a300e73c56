#ifndef AWMARK_TRANSFORMS_HPP
#define AWMARK_TRANSFORMS_HPP

#include <string>
#include <vector>

#include "awmark/codec.hpp"
#include "awmark/image.hpp"

namespace awmark {

enum class TransformKind { identity, crop, resize, brightness, contrast, jpeg };

std::string transform_kind_name(TransformKind k);
TransformKind transform_kind_from_name(const std::string& s);

/// Evaluation-only post-watermarking transformation. crop/resize ratio in
/// (0,1]; brightness/contrast factor > 0; JPEG quality in [1,100]. These are
/// never inside the attack's gradient path (JPEG is not differentiable).
struct TransformSpec {
    TransformKind kind = TransformKind::identity;
    double parameter = 1.0;

    void validate() const;
};

/// crop: centered window of side floor(ratio * side) per axis.
/// resize: bilinear to floor(ratio * side).
/// brightness: clamp(factor * I).
/// contrast: clamp(mean_per_channel + factor * (I - mean_per_channel)); a
/// constant image is a fixed point for any factor.
/// jpeg: baseline encode/decode round-trip at the given quality.
Image apply_transform(const Image& image, const TransformSpec& spec);

struct SweepCell {
    TransformSpec spec;
    double mean_bit_accuracy = 0.0;
    int n_images = 0;
};

/// For each image: embed one fresh random message, then decode after every
/// transform in the grid. Cropped/resized images are decoded at their
/// reduced size (the decoder is size-agnostic), not upsampled back.
std::vector<SweepCell> robustness_sweep(const CodecParams& codec,
                                        const std::vector<Image>& images,
                                        const std::vector<TransformSpec>& grid,
                                        std::uint64_t seed);

/// The default sweep grid. The leading cell of each transform family is an
/// explicit identity (untransformed baseline), so every family reports the
/// same baseline value.
std::vector<TransformSpec> default_robustness_grid();

void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells);

}  // namespace awmark

#endif
