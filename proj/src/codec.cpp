#include "awmark/codec.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "awmark/checkpoint.hpp"

namespace awmark {

using nlohmann::ordered_json;

void Message::validate() const {
    if (bits.empty()) throw std::invalid_argument("Message: length must be >= 1");
    for (int b : bits)
        if (b != 0 && b != 1) throw std::invalid_argument("Message: bits must be 0 or 1");
}

std::string Message::to_string() const {
    std::string s;
    s.reserve(bits.size());
    for (int b : bits) s.push_back(b ? '1' : '0');
    return s;
}

Message Message::from_string(const std::string& s) {
    Message m;
    for (char ch : s) {
        if (ch != '0' && ch != '1')
            throw std::invalid_argument("Message: bitstring may contain only 0 and 1");
        m.bits.push_back(ch - '0');
    }
    m.validate();
    return m;
}

Message random_message(int length, std::uint64_t seed) {
    SeededRng rng(seed);
    return random_message(length, rng);
}

Message random_message(int length, SeededRng& rng) {
    if (length < 1) throw std::invalid_argument("random_message: length must be >= 1");
    Message m;
    m.bits.resize(length);
    for (int i = 0; i < length; ++i) m.bits[i] = rng.bit();
    return m;
}

bool RelaxedMessage::in_unit_box() const {
    for (double v : values)
        if (!(v >= 0.0 && v <= 1.0)) return false;
    return true;
}

RelaxedMessage RelaxedMessage::from_message(const Message& m) {
    m.validate();
    RelaxedMessage r;
    r.values.assign(m.bits.begin(), m.bits.end());
    return r;
}

double bit_accuracy(const Message& predicted, const Message& truth) {
    if (predicted.length() != truth.length())
        throw std::invalid_argument("bit_accuracy: length mismatch " +
                                    std::to_string(predicted.length()) + " vs " +
                                    std::to_string(truth.length()));
    int matches = 0;
    for (int i = 0; i < truth.length(); ++i)
        if (predicted.bits[i] == truth.bits[i]) ++matches;
    return static_cast<double>(matches) / truth.length();
}

std::string CodecParams::config_json() const {
    ordered_json j;
    j["model"] = "watermark-codec";
    j["message_bits"] = cfg.message_bits;
    j["width"] = cfg.width;
    j["strength"] = cfg.strength;
    j["lambda"] = cfg.lambda;
    return j.dump();
}

CodecParams init_codec(const CodecConfig& cfg, std::uint64_t seed) {
    if (cfg.message_bits < 1) throw std::invalid_argument("init_codec: message_bits must be >= 1");
    if (cfg.strength <= 0.0) throw std::invalid_argument("init_codec: strength must be > 0");
    if (cfg.lambda < 0.0) throw std::invalid_argument("init_codec: lambda must be >= 0");
    SeededRng rng(splitmix64(seed ^ 0xC0DEC));
    CodecParams codec;
    codec.cfg = cfg;
    ParamSet& p = codec.params;
    const int w = cfg.width, l = cfg.message_bits, c = 3;
    p.add("enc.b1.w", init_conv_weight(w, c + l, 3, 3, rng));
    p.add("enc.b1.b", Tensor::zeros({w}));
    for (int i = 2; i <= 4; ++i) {
        p.add("enc.b" + std::to_string(i) + ".w", init_conv_weight(w, w, 3, 3, rng));
        p.add("enc.b" + std::to_string(i) + ".b", Tensor::zeros({w}));
    }
    p.add("enc.out.w", init_conv_weight(c, w, 3, 3, rng));
    p.add("enc.out.b", Tensor::zeros({c}));
    p.add("dec.b1.w", init_conv_weight(w, c, 3, 3, rng));
    p.add("dec.b1.b", Tensor::zeros({w}));
    for (int i = 2; i <= 4; ++i) {
        p.add("dec.b" + std::to_string(i) + ".w", init_conv_weight(w, w, 3, 3, rng));
        p.add("dec.b" + std::to_string(i) + ".b", Tensor::zeros({w}));
    }
    p.add("dec.fc.w", init_linear_weight(l, w, rng));
    p.add("dec.fc.b", Tensor::zeros({l}));
    return codec;
}

CodecParams codec_from_checkpoint(const std::string& dir) {
    std::string cfg_json;
    ParamSet p = load_checkpoint(dir, &cfg_json);
    if (cfg_json.empty())
        throw std::runtime_error("codec_from_checkpoint: manifest has no config echo in " + dir);
    ordered_json j = ordered_json::parse(cfg_json);
    if (j.value("model", "") != "watermark-codec")
        throw std::runtime_error("codec_from_checkpoint: " + dir + " is not a codec checkpoint");
    CodecParams codec;
    codec.cfg.message_bits = j.at("message_bits").get<int>();
    codec.cfg.width = j.at("width").get<int>();
    codec.cfg.strength = j.at("strength").get<double>();
    codec.cfg.lambda = j.at("lambda").get<double>();
    codec.params = std::move(p);
    return codec;
}

void save_codec(const std::string& dir, const CodecParams& codec) {
    save_checkpoint(dir, codec.params, codec.config_json());
}

void zero_encoder_output_layer(CodecParams& codec) {
    for (const char* name : {"enc.out.w", "enc.out.b"}) {
        Tensor t = codec.params.get(name);
        for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = 0.0;
    }
}

namespace {

Tensor conv_block(Tape& tape, const Tensor& x, const ParamSet& p, const std::string& name) {
    return relu(tape, conv2d(tape, x, p.get(name + ".w"), p.get(name + ".b"), 1, 1));
}

void check_message_len(const Tensor& message, const CodecParams& codec, const char* op) {
    if (message.shape().size() != 1 || message.dim(0) != codec.cfg.message_bits)
        throw std::invalid_argument(std::string(op) + ": message length " +
                                    shape_str(message.shape()) + " does not match codec L=" +
                                    std::to_string(codec.cfg.message_bits));
}

}  // namespace

namespace {

// blocks 2..4, output conv, residual composition; shared by both encoder paths
Tensor encoder_tail(Tape& tape, Tensor x, const Tensor& image_chw, const CodecParams& codec) {
    const ParamSet& p = codec.params;
    x = conv_block(tape, x, p, "enc.b2");
    x = conv_block(tape, x, p, "enc.b3");
    x = conv_block(tape, x, p, "enc.b4");
    Tensor residual = conv2d(tape, x, p.get("enc.out.w"), p.get("enc.out.b"), 1, 1);
    Tensor scaled = scalar_mul(tape, tanh(tape, residual), codec.cfg.strength);
    return clamp(tape, add(tape, image_chw, scaled), 0.0, 1.0);
}

}  // namespace

Tensor embed_t(Tape& tape, const Tensor& image_chw, const Tensor& message,
               const CodecParams& codec) {
    if (image_chw.shape().size() != 3 || image_chw.dim(0) != 3)
        throw std::invalid_argument("embed: image must be [3,H,W], got " +
                                    shape_str(image_chw.shape()));
    check_message_len(message, codec, "embed");
    const int h = image_chw.dim(1), w = image_chw.dim(2);
    const ParamSet& p = codec.params;
    Tensor msg_planes = broadcast_channels(tape, message, h, w);
    Tensor x = concat(tape, {image_chw, msg_planes}, 0);
    x = conv_block(tape, x, p, "enc.b1");
    return encoder_tail(tape, x, image_chw, codec);
}

EncoderMsgContext make_encoder_msg_context(const CodecParams& codec) {
    const int width = codec.cfg.width, l = codec.cfg.message_bits;
    const Tensor w1 = codec.params.get("enc.b1.w");  // [width, 3+L, 3, 3]
    EncoderMsgContext ctx;
    ctx.width = width;
    ctx.message_bits = l;
    // tap row/col ranges per border case: 0 = first row/col, 1 = interior, 2 = last
    const int ranges[3][2] = {{1, 3}, {0, 3}, {0, 2}};
    for (int i = 0; i < 3; ++i) {
        ctx.case_rows[i][0] = ranges[i][0];
        ctx.case_rows[i][1] = ranges[i][1];
        ctx.case_cols[i][0] = ranges[i][0];
        ctx.case_cols[i][1] = ranges[i][1];
    }
    ctx.w1_img = Tensor::zeros({width, 3, 3, 3});
    for (int oc = 0; oc < width; ++oc)
        for (int ic = 0; ic < 3; ++ic)
            for (int k = 0; k < 9; ++k)
                ctx.w1_img.data()[(oc * 3 + ic) * 9 + k] =
                    w1.data()[(static_cast<std::int64_t>(oc) * (3 + l) + ic) * 9 + k];
    ctx.bias1 = codec.params.get("enc.b1.b");
    ctx.case_sums.assign(static_cast<std::size_t>(9) * width * l, 0.0);
    for (int ty = 0; ty < 3; ++ty)
        for (int tx = 0; tx < 3; ++tx)
            for (int oc = 0; oc < width; ++oc)
                for (int bit = 0; bit < l; ++bit) {
                    double s = 0.0;
                    for (int ky = ranges[ty][0]; ky < ranges[ty][1]; ++ky)
                        for (int kx = ranges[tx][0]; kx < ranges[tx][1]; ++kx)
                            s += w1.data()[(static_cast<std::int64_t>(oc) * (3 + l) + 3 + bit) * 9 +
                                           ky * 3 + kx];
                    ctx.case_sums[((ty * 3 + tx) * width + oc) * l + bit] = s;
                }
    return ctx;
}

namespace {

// adds the constant-plane message contribution of conv1 to its image-part
// output; differentiable w.r.t. both base and message
Tensor msg_affine_add(Tape& tape, const Tensor& base, const Tensor& message,
                      const EncoderMsgContext& ctx) {
    const int width = ctx.width, l = ctx.message_bits;
    const int h = base.dim(1), w = base.dim(2);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;

    // v[ty][tx][oc] = sum_l m_l * S[ty][tx][oc][l]
    std::vector<double> v(9 * static_cast<std::size_t>(width), 0.0);
    for (int c = 0; c < 9; ++c)
        for (int oc = 0; oc < width; ++oc) {
            double acc = 0.0;
            for (int bit = 0; bit < l; ++bit)
                acc += message.data()[bit] * ctx.case_sums[(c * width + oc) * l + bit];
            v[c * width + oc] = acc;
        }

    Tensor out = Tensor::zeros(base.shape(), false);
    auto row_case = [&](int y) { return y == 0 ? 0 : (y == h - 1 ? 2 : 1); };
    for (int oc = 0; oc < width; ++oc) {
        const double* src = base.data() + oc * hw;
        double* dst = out.data() + oc * hw;
        for (int y = 0; y < h; ++y) {
            const int ty = row_case(y);
            const double vl = v[(ty * 3 + 0) * width + oc];
            const double vm = v[(ty * 3 + 1) * width + oc];
            const double vr = v[(ty * 3 + 2) * width + oc];
            const double* s = src + static_cast<std::int64_t>(y) * w;
            double* d = dst + static_cast<std::int64_t>(y) * w;
            d[0] = s[0] + vl;
            for (int x = 1; x < w - 1; ++x) d[x] = s[x] + vm;
            d[w - 1] = s[w - 1] + vr;
        }
    }
    if (tape.active() && (base.requires_grad() || message.requires_grad())) {
        out.set_requires_grad(true);
        Tensor bc = base, mc = message, oc_t = out;
        // copied so the record stays valid independent of the context's lifetime
        std::vector<double> sums = ctx.case_sums;
        tape.record({{base, message}, out, [bc, mc, oc_t, sums, width, l, h, w, hw]() mutable {
                         const double* g = oc_t.grad();
                         if (bc.requires_grad()) {
                             double* gb = bc.grad();
                             for (std::int64_t i = 0; i < oc_t.size(); ++i) gb[i] += g[i];
                         }
                         if (mc.requires_grad()) {
                             // region sums of the output grad, then through S
                             std::vector<double> region(9 * static_cast<std::size_t>(width), 0.0);
                             for (int och = 0; och < width; ++och) {
                                 const double* gc = g + och * hw;
                                 for (int y = 0; y < h; ++y) {
                                     const int ty = y == 0 ? 0 : (y == h - 1 ? 2 : 1);
                                     const double* row = gc + static_cast<std::int64_t>(y) * w;
                                     double mid = 0.0;
                                     for (int x = 1; x < w - 1; ++x) mid += row[x];
                                     region[(ty * 3 + 0) * width + och] += row[0];
                                     region[(ty * 3 + 1) * width + och] += mid;
                                     region[(ty * 3 + 2) * width + och] += row[w - 1];
                                 }
                             }
                             double* gm = mc.grad();
                             for (int c = 0; c < 9; ++c)
                                 for (int och = 0; och < width; ++och) {
                                     const double r = region[c * width + och];
                                     if (r == 0.0) continue;
                                     const double* s = &sums[(c * width + och) * l];
                                     for (int bit = 0; bit < l; ++bit) gm[bit] += r * s[bit];
                                 }
                         }
                     }});
    }
    return out;
}

}  // namespace

Tensor embed_fixed_weights_t(Tape& tape, const Tensor& image_chw, const Tensor& message,
                             const CodecParams& codec, const EncoderMsgContext& ctx) {
    if (image_chw.shape().size() != 3 || image_chw.dim(0) != 3)
        throw std::invalid_argument("embed: image must be [3,H,W], got " +
                                    shape_str(image_chw.shape()));
    check_message_len(message, codec, "embed");
    if (image_chw.dim(1) < 2 || image_chw.dim(2) < 2)
        return embed_t(tape, image_chw, message, codec);
    Tensor base = conv2d(tape, image_chw, ctx.w1_img, ctx.bias1, 1, 1);
    Tensor pre1 = msg_affine_add(tape, base, message, ctx);
    return encoder_tail(tape, relu(tape, pre1), image_chw, codec);
}

Tensor extract_t(Tape& tape, const Tensor& image_chw, const CodecParams& codec) {
    if (image_chw.shape().size() != 3 || image_chw.dim(0) != 3)
        throw std::invalid_argument("extract: image must be [3,H,W], got " +
                                    shape_str(image_chw.shape()));
    if (image_chw.dim(1) < 8 || image_chw.dim(2) < 8)
        throw std::invalid_argument("extract: image smaller than 8x8: " +
                                    shape_str(image_chw.shape()));
    const ParamSet& p = codec.params;
    Tensor x = conv_block(tape, image_chw, p, "dec.b1");
    x = conv_block(tape, x, p, "dec.b2");
    x = conv_block(tape, x, p, "dec.b3");
    x = conv_block(tape, x, p, "dec.b4");
    Tensor pooled = global_avg_pool(tape, x);
    return linear(tape, pooled, p.get("dec.fc.w"), p.get("dec.fc.b"));
}

namespace {

Tensor message_tensor(const std::vector<double>& values) {
    return Tensor::from_data({static_cast<int>(values.size())}, values);
}

Image embed_values(const Image& image, const std::vector<double>& values,
                   const CodecParams& codec) {
    if (!image.in_range())
        throw std::invalid_argument("embed: image values outside [0,1]");
    Tape tape(false);
    return from_chw(embed_t(tape, to_chw(image), message_tensor(values), codec));
}

}  // namespace

Image embed(const Image& image, const Message& message, const CodecParams& codec) {
    message.validate();
    return embed_values(image, std::vector<double>(message.bits.begin(), message.bits.end()),
                        codec);
}

Image embed(const Image& image, const RelaxedMessage& message, const CodecParams& codec) {
    if (!message.in_unit_box())
        throw std::invalid_argument("embed: relaxed message outside [0,1]");
    return embed_values(image, message.values, codec);
}

std::vector<double> extract_logits(const Image& image, const CodecParams& codec) {
    Tape tape(false);
    Tensor logits = extract_t(tape, to_chw(image), codec);
    return std::vector<double>(logits.data(), logits.data() + logits.size());
}

Message extract(const Image& image, const CodecParams& codec) {
    Message m;
    for (double l : extract_logits(image, codec)) m.bits.push_back(l >= 0.0 ? 1 : 0);
    return m;
}

TrainLog train_codec(CodecParams& codec, const std::vector<Image>& dataset,
                     const CodecTrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("train_codec: empty dataset");
    if (cfg.lambda < 0.0) throw std::invalid_argument("train_codec: lambda must be >= 0");
    codec.cfg.lambda = cfg.lambda;  // keep the checkpoint config echo truthful
    const int l = codec.cfg.message_bits;
    SeededRng rng(splitmix64(cfg.seed ^ 0x7241EC));
    SgdMomentum opt(cfg.lr, cfg.momentum);
    codec.params.set_requires_grad(true);
    TrainLog log;

    std::vector<int> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates reshuffle per epoch
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = rng.integer(i);
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0;
        int in_batch = 0;
        codec.params.zero_grad();
        for (std::size_t s = 0; s < order.size(); ++s) {
            const Image& full = dataset[order[s]];
            Image img = full;
            if (cfg.crop > 0 && (cfg.crop < full.h || cfg.crop < full.w)) {
                const int cy = static_cast<int>(rng.integer(full.h - cfg.crop + 1));
                const int cx = static_cast<int>(rng.integer(full.w - cfg.crop + 1));
                img = Image::zeros(cfg.crop, cfg.crop, full.c);
                for (int y = 0; y < cfg.crop; ++y)
                    for (int x = 0; x < cfg.crop; ++x)
                        for (int ch = 0; ch < full.c; ++ch)
                            img.at(y, x, ch) = full.at(cy + y, cx + x, ch);
            }
            Message msg = random_message(l, rng);
            Tensor target = Tensor::from_data({l}, std::vector<double>(msg.bits.begin(), msg.bits.end()));

            Tape tape(true);
            Tensor image = to_chw(img);
            Tensor msg_t = message_tensor(std::vector<double>(msg.bits.begin(), msg.bits.end()));
            Tensor watermarked = embed_t(tape, image, msg_t, codec);
            Tensor logits = extract_t(tape, watermarked, codec);
            Tensor loss = add(tape, mse_loss(tape, watermarked, image),
                              scalar_mul(tape, bce_with_logits(tape, logits, target), cfg.lambda));
            const double loss_v = loss.item();
            if (!std::isfinite(loss_v))
                throw std::runtime_error("train_codec: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", sample " + std::to_string(s));
            epoch_loss += loss_v;
            tape.backward(loss);
            ++in_batch;
            if (in_batch == cfg.batch || s + 1 == order.size()) {
                opt.step(codec.params, 1.0 / in_batch);
                codec.params.zero_grad();
                in_batch = 0;
            }
        }
        log.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    codec.params.set_requires_grad(false);
    return log;
}

}  // namespace awmark
