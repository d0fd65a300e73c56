#include "awmark/embedder.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "awmark/checkpoint.hpp"

namespace awmark {

using nlohmann::ordered_json;

namespace {
constexpr int kFaceSize = 112;
constexpr int kWidths[4] = {16, 32, 64, 64};
}  // namespace

std::string EmbedderParams::config_json() const {
    ordered_json j;
    j["model"] = "face-embedder";
    j["embedding_dim"] = cfg.embedding_dim;
    j["num_identities"] = cfg.num_identities;
    j["head_scale"] = cfg.head_scale;
    return j.dump();
}

EmbedderParams init_embedder(const EmbedderConfig& cfg, std::uint64_t seed) {
    if (cfg.embedding_dim < 8)
        throw std::invalid_argument("init_embedder: embedding_dim must be >= 8");
    SeededRng rng(splitmix64(seed ^ 0xE3BEDD));
    EmbedderParams emb;
    emb.cfg = cfg;
    int ci = 3;
    for (int i = 0; i < 4; ++i) {
        emb.net.add("emb.b" + std::to_string(i + 1) + ".w",
                    init_conv_weight(kWidths[i], ci, 3, 3, rng));
        emb.net.add("emb.b" + std::to_string(i + 1) + ".b", Tensor::zeros({kWidths[i]}));
        ci = kWidths[i];
    }
    emb.net.add("emb.fc.w", init_linear_weight(cfg.embedding_dim, kWidths[3], rng));
    emb.net.add("emb.fc.b", Tensor::zeros({cfg.embedding_dim}));
    if (cfg.num_identities > 0)
        emb.head.add("head.w", init_linear_weight(cfg.num_identities, cfg.embedding_dim, rng));
    return emb;
}

EmbedderParams embedder_from_checkpoint(const std::string& dir) {
    std::string cfg_json;
    ParamSet p = load_checkpoint(dir, &cfg_json);
    if (cfg_json.empty())
        throw std::runtime_error("embedder_from_checkpoint: manifest has no config echo in " + dir);
    ordered_json j = ordered_json::parse(cfg_json);
    if (j.value("model", "") != "face-embedder")
        throw std::runtime_error("embedder_from_checkpoint: " + dir +
                                 " is not an embedder checkpoint");
    EmbedderParams emb;
    emb.cfg.embedding_dim = j.at("embedding_dim").get<int>();
    emb.cfg.num_identities = j.at("num_identities").get<int>();
    emb.cfg.head_scale = j.at("head_scale").get<double>();
    emb.net = std::move(p);
    return emb;
}

void save_embedder(const std::string& dir, const EmbedderParams& emb) {
    // head intentionally not saved; it only exists for training
    save_checkpoint(dir, emb.net, emb.config_json());
}

Tensor embed_face_t(Tape& tape, const Tensor& image_chw, const EmbedderParams& emb) {
    if (image_chw.shape().size() != 3 || image_chw.dim(0) != 3 ||
        image_chw.dim(1) != kFaceSize || image_chw.dim(2) != kFaceSize)
        throw std::invalid_argument("embed_face: image must be [3,112,112], got " +
                                    shape_str(image_chw.shape()));
    Tensor x = image_chw;
    for (int i = 1; i <= 4; ++i) {
        const std::string name = "emb.b" + std::to_string(i);
        x = relu(tape, conv2d(tape, x, emb.net.get(name + ".w"), emb.net.get(name + ".b"), 2, 1));
    }
    Tensor pooled = global_avg_pool(tape, x);
    return linear(tape, pooled, emb.net.get("emb.fc.w"), emb.net.get("emb.fc.b"));
}

std::vector<double> embed_face(const Image& image, const EmbedderParams& emb) {
    Tape tape(false);
    Tensor z = embed_face_t(tape, to_chw(image), emb);
    return std::vector<double>(z.data(), z.data() + z.size());
}

double similarity(const std::vector<double>& a, const std::vector<double>& b) {
    Tape tape(false);
    return cosine_similarity(tape, Tensor::from_data({static_cast<int>(a.size())}, a),
                             Tensor::from_data({static_cast<int>(b.size())}, b))
        .item();
}

int match_score(double sim, double tau) { return sim >= tau ? 1 : 0; }

int match(const std::vector<double>& z_probe, const std::vector<double>& z_ref,
          const MatcherConfig& cfg) {
    if (!(cfg.tau > -1.0 && cfg.tau < 1.0))
        throw std::invalid_argument("match: tau must be in (-1,1)");
    return match_score(similarity(z_probe, z_ref), cfg.tau);
}

// ---- toy identity dataset ----

namespace {

struct IdentityPattern {
    double bg[3], fg[3];
    double cx, cy, ax, ay, rot;
    double inner_dy, inner_ax, inner_ay, inner_dark;
    struct Wave {
        double freq, theta, phase, amp[3];
    };
    Wave waves[3];
};

IdentityPattern make_identity(std::uint64_t seed, int id) {
    SeededRng rng(derive_stream(derive_stream(seed, 0xFACE), static_cast<std::uint64_t>(id)));
    IdentityPattern p;
    for (int c = 0; c < 3; ++c) p.bg[c] = rng.uniform(0.15, 0.45);
    for (int c = 0; c < 3; ++c) p.fg[c] = rng.uniform(0.45, 0.85);
    p.cx = 56.0 + rng.uniform(-6.0, 6.0);
    p.cy = 56.0 + rng.uniform(-6.0, 6.0);
    p.ax = rng.uniform(30.0, 42.0);
    p.ay = rng.uniform(38.0, 52.0);
    p.rot = rng.uniform(-0.3, 0.3);
    p.inner_dy = rng.uniform(-14.0, -4.0);
    p.inner_ax = p.ax * rng.uniform(0.45, 0.65);
    p.inner_ay = p.ay * rng.uniform(0.15, 0.25);
    p.inner_dark = rng.uniform(0.10, 0.25);
    for (auto& w : p.waves) {
        w.freq = rng.uniform(0.05, 0.18);
        w.theta = rng.uniform(0.0, 3.14159265358979323846);
        w.phase = rng.uniform(0.0, 6.28318530717958647692);
        for (int c = 0; c < 3; ++c) w.amp[c] = rng.uniform(-0.12, 0.12);
    }
    return p;
}

Image render_sample(const IdentityPattern& p, SeededRng& rng) {
    const double tx = rng.uniform(-4.0, 4.0);
    const double ty = rng.uniform(-4.0, 4.0);
    const double brightness = rng.uniform(0.9, 1.1);
    Image img = Image::zeros(kFaceSize, kFaceSize, 3);
    const double cr = std::cos(p.rot), sr = std::sin(p.rot);
    for (int y = 0; y < kFaceSize; ++y) {
        for (int x = 0; x < kFaceSize; ++x) {
            const double u = x - p.cx - tx;
            const double v = y - p.cy - ty;
            const double ur = u * cr + v * sr;
            const double vr = -u * sr + v * cr;
            const double re = std::sqrt((ur / p.ax) * (ur / p.ax) + (vr / p.ay) * (vr / p.ay));
            const double mask = std::clamp((1.08 - re) / 0.16, 0.0, 1.0);
            const double ri =
                std::sqrt((ur / p.inner_ax) * (ur / p.inner_ax) +
                          ((vr - p.inner_dy) / p.inner_ay) * ((vr - p.inner_dy) / p.inner_ay));
            const double inner = std::clamp((1.0 - ri) / 0.25, 0.0, 1.0);
            double wave[3] = {0.0, 0.0, 0.0};
            for (const auto& w : p.waves) {
                const double s = std::sin(6.28318530717958647692 * w.freq *
                                              (u * std::cos(w.theta) + v * std::sin(w.theta)) +
                                          w.phase);
                for (int c = 0; c < 3; ++c) wave[c] += w.amp[c] * s;
            }
            for (int c = 0; c < 3; ++c) {
                double val = p.bg[c] + mask * (p.fg[c] - p.bg[c] + wave[c]) - inner * p.inner_dark;
                val = val * brightness + 0.02 * rng.normal();
                img.at(y, x, c) = std::clamp(val, 0.0, 1.0);
            }
        }
    }
    return img;
}

}  // namespace

ToyIdentityDataset generate_toy_dataset(int num_identities, int per_identity, std::uint64_t seed) {
    if (num_identities < 2) throw std::invalid_argument("generate_toy_dataset: need >= 2 identities");
    if (per_identity < 2)
        throw std::invalid_argument("generate_toy_dataset: need >= 2 samples per identity");
    ToyIdentityDataset ds;
    ds.spec = {num_identities, per_identity, seed};
    ds.images.reserve(static_cast<std::size_t>(num_identities) * per_identity);
    for (int id = 0; id < num_identities; ++id) {
        const IdentityPattern pat = make_identity(seed, id);
        const std::uint64_t id_stream = derive_stream(derive_stream(seed, 0xFACE), id);
        for (int k = 0; k < per_identity; ++k) {
            SeededRng rng(derive_stream(id_stream, 1000 + static_cast<std::uint64_t>(k)));
            ds.images.push_back(render_sample(pat, rng));
            ds.labels.push_back(id);
        }
    }
    return ds;
}

TrainLog train_embedder(EmbedderParams& emb, const ToyIdentityDataset& dataset,
                        const EmbedderTrainConfig& cfg) {
    if (dataset.images.empty()) throw std::invalid_argument("train_embedder: empty dataset");
    int num_ids = 0;
    for (int l : dataset.labels) num_ids = std::max(num_ids, l + 1);
    if (emb.cfg.num_identities != num_ids || !emb.head.has("head.w"))
        throw std::invalid_argument(
            "train_embedder: embedder head does not match dataset identity count");

    SeededRng rng(splitmix64(cfg.seed ^ 0x7241E2));
    SgdMomentum opt_net(cfg.lr, cfg.momentum);
    SgdMomentum opt_head(cfg.lr, cfg.momentum);
    emb.net.set_requires_grad(true);
    emb.head.set_requires_grad(true);
    TrainLog log;

    std::vector<int> order(dataset.images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Tensor head_w = emb.head.get("head.w");

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = rng.integer(i);
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0;
        int in_batch = 0;
        emb.net.zero_grad();
        emb.head.zero_grad();
        for (std::size_t s = 0; s < order.size(); ++s) {
            const int idx = order[s];
            Tape tape(true);
            Tensor z = embed_face_t(tape, to_chw(dataset.images[idx]), emb);
            Tensor logits = scalar_mul(tape, cosine_rows(tape, head_w, z), emb.cfg.head_scale);
            Tensor loss = softmax_cross_entropy(tape, logits, dataset.labels[idx]);
            const double loss_v = loss.item();
            if (!std::isfinite(loss_v))
                throw std::runtime_error("train_embedder: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", sample " + std::to_string(s));
            epoch_loss += loss_v;
            tape.backward(loss);
            ++in_batch;
            if (in_batch == cfg.batch || s + 1 == order.size()) {
                opt_net.step(emb.net, 1.0 / in_batch);
                opt_head.step(emb.head, 1.0 / in_batch);
                emb.net.zero_grad();
                emb.head.zero_grad();
                in_batch = 0;
            }
        }
        log.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    emb.net.set_requires_grad(false);
    emb.head.set_requires_grad(false);
    return log;
}

}  // namespace awmark
