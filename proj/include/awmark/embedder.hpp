#ifndef AWMARK_EMBEDDER_HPP
#define AWMARK_EMBEDDER_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "awmark/image.hpp"
#include "awmark/nn.hpp"
#include "awmark/tensor.hpp"

namespace awmark {

struct EmbedderConfig {
    int embedding_dim = 64;
    int num_identities = 0;   // classification head size used in training
    double head_scale = 16.0;  // cosine-logit scale
};

/// Face-embedding network: 4 conv blocks (widths 16/32/64/64, 3x3 stride-2
/// downsampling), global average pooling, linear to embedding_dim. Input is
/// a 112x112x3 image. The classification head lives in `head` during
/// training and is dropped from checkpoints.
struct EmbedderParams {
    EmbedderConfig cfg;
    ParamSet net;
    ParamSet head;

    std::string config_json() const;
};

EmbedderParams init_embedder(const EmbedderConfig& cfg, std::uint64_t seed);
EmbedderParams embedder_from_checkpoint(const std::string& dir);
void save_embedder(const std::string& dir, const EmbedderParams& emb);

Tensor embed_face_t(Tape& tape, const Tensor& image_chw, const EmbedderParams& emb);
std::vector<double> embed_face(const Image& image, const EmbedderParams& emb);

/// Cosine similarity of two embeddings (delegates to the tensor op).
double similarity(const std::vector<double>& a, const std::vector<double>& b);

struct MatcherConfig {
    double tau = 0.3;
};

/// 1 iff similarity >= tau (boundary inclusive).
int match(const std::vector<double>& z_probe, const std::vector<double>& z_ref,
          const MatcherConfig& cfg);
int match_score(double sim, double tau);

/// Procedurally generated identity dataset standing in for real face data.
/// Each identity is a deterministic function of (seed, id): a composite of
/// oriented sinusoid patterns and ellipse masks; samples add translation
/// (<= 4 px), brightness jitter (+-10%) and Gaussian noise (sigma 0.02).
struct ToyDatasetConfig {
    int num_identities = 100;
    int per_identity = 2;
    std::uint64_t seed = 0;
};

struct ToyIdentityDataset {
    ToyDatasetConfig spec;
    std::vector<Image> images;  // grouped by identity, per_identity each
    std::vector<int> labels;

    const Image& sample(int identity, int k) const {
        return images[static_cast<std::size_t>(identity) * spec.per_identity + k];
    }
};

ToyIdentityDataset generate_toy_dataset(int num_identities, int per_identity, std::uint64_t seed);

struct EmbedderTrainConfig {
    int epochs = 40;
    int batch = 16;
    double lr = 0.2;
    std::uint64_t seed = 0;
    double momentum = 0.9;
};

/// Normalized-softmax training: logits = head_scale * cos(head row, z),
/// cross-entropy against the identity label. The head is discarded by
/// save_embedder. Aborts on a non-finite loss.
TrainLog train_embedder(EmbedderParams& emb, const ToyIdentityDataset& dataset,
                        const EmbedderTrainConfig& cfg);

}  // namespace awmark

#endif
