#include "awmark/attack.hpp"

#include <cmath>
#include <stdexcept>

#include "awmark/rng.hpp"

namespace awmark {

void AttackConfig::validate() const {
    if (epsilon < 0.0) throw std::invalid_argument("attack: epsilon must be >= 0");
    if (pgd_steps < 1) throw std::invalid_argument("attack: pgd_steps must be >= 1");
    if (rounds < 1) throw std::invalid_argument("attack: rounds must be >= 1");
}

namespace {

Tensor vec_tensor(const std::vector<double>& v, bool requires_grad = false) {
    return Tensor::from_data({static_cast<int>(v.size())}, v, requires_grad);
}

// Largest d with probe + d <= 1.0 under round-to-nearest; -probe is exact.
double upper_box_bound(double probe) {
    double hi = 1.0 - probe;
    while (probe + hi > 1.0) hi = std::nexttoward(hi, -1.0L);
    return hi;
}

void assert_delta_constraints(const std::vector<double>& delta, const Tensor& probe, double eps,
                              long& checks) {
    const double* p = probe.data();
    for (std::size_t i = 0; i < delta.size(); ++i) {
        if (std::fabs(delta[i]) > eps)
            throw std::logic_error("attack: |delta| exceeds epsilon at element " +
                                   std::to_string(i));
        const double v = p[i] + delta[i];
        if (!(v >= 0.0 && v <= 1.0))
            throw std::logic_error("attack: probe+delta leaves [0,1] at element " +
                                   std::to_string(i));
    }
    ++checks;
}

void assert_message_box(const std::vector<double>& m, long& checks) {
    for (std::size_t i = 0; i < m.size(); ++i)
        if (!(m[i] >= 0.0 && m[i] <= 1.0))
            throw std::logic_error("attack: relaxed message leaves [0,1] at element " +
                                   std::to_string(i));
    ++checks;
}

void check_finite(double v, const std::vector<double>& trace, const char* where) {
    if (!std::isfinite(v))
        throw std::runtime_error(std::string("attack: non-finite loss in ") + where +
                                 " after " + std::to_string(trace.size()) + " recorded steps");
}

}  // namespace

namespace {

Tensor attack_loss_impl(Tape& tape, const Tensor& delta, const Tensor& relaxed_m,
                        const Tensor& probe_chw, const Tensor& z_ref, const CodecParams& codec,
                        const EmbedderParams& emb, const EncoderMsgContext* ctx) {
    if (delta.shape() != probe_chw.shape())
        throw std::invalid_argument("attack_loss: delta shape " + shape_str(delta.shape()) +
                                    " does not match probe " + shape_str(probe_chw.shape()));
    Tensor perturbed = clamp(tape, add(tape, probe_chw, delta), 0.0, 1.0);
    Tensor watermarked = ctx ? embed_fixed_weights_t(tape, perturbed, relaxed_m, codec, *ctx)
                             : embed_t(tape, perturbed, relaxed_m, codec);
    Tensor z_probe = embed_face_t(tape, perturbed, emb);
    Tensor z_wm = embed_face_t(tape, watermarked, emb);
    Tensor s_probe = cosine_similarity(tape, z_probe, z_ref);
    Tensor s_wm = cosine_similarity(tape, z_wm, z_ref);
    return sub(tape, s_wm, s_probe);  // -s(z_p',z_r) + s(z_w',z_r)
}

}  // namespace

Tensor attack_loss(Tape& tape, const Tensor& delta, const Tensor& relaxed_m,
                   const Tensor& probe_chw, const Tensor& z_ref, const CodecParams& codec,
                   const EmbedderParams& emb) {
    return attack_loss_impl(tape, delta, relaxed_m, probe_chw, z_ref, codec, emb, nullptr);
}

void pgd_delta_round(std::vector<double>& delta, const std::vector<double>& relaxed_m,
                     const Tensor& probe_chw, const std::vector<double>& z_ref,
                     const CodecParams& codec, const EmbedderParams& emb,
                     const AttackConfig& cfg, std::vector<double>& trace, long& checks) {
    cfg.validate();
    const double eps = cfg.epsilon;
    const double alpha = cfg.alpha();
    const Tensor z_ref_t = vec_tensor(z_ref);
    const Tensor m_t = vec_tensor(relaxed_m);
    const double* p = probe_chw.data();
    const EncoderMsgContext ctx = make_encoder_msg_context(codec);

    for (int t = 0; t < cfg.pgd_steps; ++t) {
        Tape tape(true);
        Tensor d = Tensor::from_data(probe_chw.shape(), delta, true);
        Tensor loss = attack_loss_impl(tape, d, m_t, probe_chw, z_ref_t, codec, emb, &ctx);
        check_finite(loss.item(), trace, "pgd_delta_round");
        trace.push_back(loss.item());
        tape.backward(loss);
        const double* g = d.grad();
        for (std::size_t i = 0; i < delta.size(); ++i) {
            const double sign = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
            double v = delta[i] - alpha * sign;
            if (v > eps) v = eps;
            if (v < -eps) v = -eps;
            // box projection so probe+delta stays in [0,1]; can only shrink |v|
            const double lo = -p[i];
            if (v < lo) v = lo;
            const double hi = upper_box_bound(p[i]);
            if (v > hi) v = hi;
            delta[i] = v;
        }
        assert_delta_constraints(delta, probe_chw, eps, checks);
    }
}

void message_round(std::vector<double>& relaxed_m, const std::vector<double>& delta,
                   const Tensor& probe_chw, const std::vector<double>& z_ref,
                   const CodecParams& codec, const EmbedderParams& emb, const AttackConfig& cfg,
                   std::vector<double>& trace, long& checks) {
    cfg.validate();
    const double beta = cfg.beta();
    const Tensor z_ref_t = vec_tensor(z_ref);
    const EncoderMsgContext ctx = make_encoder_msg_context(codec);

    // delta is fixed for the whole round, so the perturbed probe and the
    // first objective term are constants here.
    Tensor perturbed;
    {
        Tape t0(false);
        perturbed = clamp(t0, add(t0, probe_chw, Tensor::from_data(probe_chw.shape(), delta)),
                          0.0, 1.0);
    }
    double s_probe;
    {
        Tape t0(false);
        s_probe =
            cosine_similarity(t0, embed_face_t(t0, perturbed, emb), z_ref_t).item();
    }

    for (int t = 0; t < cfg.pgd_steps; ++t) {
        Tape tape(true);
        Tensor m = vec_tensor(relaxed_m, true);
        Tensor watermarked = embed_fixed_weights_t(tape, perturbed, m, codec, ctx);
        Tensor s_wm = cosine_similarity(tape, embed_face_t(tape, watermarked, emb), z_ref_t);
        check_finite(s_wm.item(), trace, "message_round");
        trace.push_back(s_wm.item() - s_probe);
        tape.backward(s_wm);
        const double* g = m.grad();
        for (std::size_t i = 0; i < relaxed_m.size(); ++i) {
            double v = relaxed_m[i] - beta * g[i];
            if (v < 0.0) v = 0.0;
            if (v > 1.0) v = 1.0;
            relaxed_m[i] = v;
        }
        assert_message_box(relaxed_m, checks);
    }
}

Message round_message(const RelaxedMessage& relaxed) {
    if (!relaxed.in_unit_box())
        throw std::invalid_argument("round_message: relaxed message outside [0,1]");
    Message m;
    m.bits.reserve(relaxed.values.size());
    for (double v : relaxed.values) m.bits.push_back(v >= 0.5 ? 1 : 0);
    return m;
}

double attack_objective(const Tensor& perturbed_probe_chw, const std::vector<double>& message,
                        const CodecParams& codec, const EmbedderParams& emb,
                        const std::vector<double>& z_ref) {
    Tape tape(false);
    const Tensor z_ref_t = vec_tensor(z_ref);
    Tensor watermarked = embed_t(tape, perturbed_probe_chw, vec_tensor(message), codec);
    const double s_wm =
        cosine_similarity(tape, embed_face_t(tape, watermarked, emb), z_ref_t).item();
    const double s_probe =
        cosine_similarity(tape, embed_face_t(tape, perturbed_probe_chw, emb), z_ref_t).item();
    return s_wm - s_probe;
}

AttackResult adversarial_watermark_attack(const Image& probe, const Image& reference,
                                          const CodecParams& codec, const EmbedderParams& emb,
                                          const AttackConfig& cfg, const MatcherConfig& matcher) {
    cfg.validate();
    if (!probe.in_range()) throw std::invalid_argument("attack: probe values outside [0,1]");
    if (!reference.in_range())
        throw std::invalid_argument("attack: reference values outside [0,1]");

    const Tensor probe_t = to_chw(probe);
    const std::vector<double> z_ref = embed_face(reference, emb);
    const std::vector<double> z_probe_clean = embed_face(probe, emb);

    AttackResult res;
    res.s_pre_clean = similarity(z_probe_clean, z_ref);

    const int l = codec.cfg.message_bits;
    std::vector<double> delta(static_cast<std::size_t>(probe_t.size()), 0.0);
    std::vector<double> relaxed(static_cast<std::size_t>(l), 0.5);
    if (cfg.m_init == AttackConfig::MessageInit::uniform_random) {
        SeededRng rng(splitmix64(cfg.seed ^ 0xA77AC4));
        for (double& v : relaxed) v = rng.uniform();
    }

    for (int k = 0; k < cfg.rounds; ++k) {
        if (cfg.epsilon > 0.0)
            pgd_delta_round(delta, relaxed, probe_t, z_ref, codec, emb, cfg, res.loss_trace,
                            res.constraint_checks);
        message_round(relaxed, delta, probe_t, z_ref, codec, emb, cfg, res.loss_trace,
                      res.constraint_checks);
        if (cfg.round_each_round && k + 1 < cfg.rounds) {
            const Message rounded = round_message(RelaxedMessage{relaxed});
            for (std::size_t i = 0; i < relaxed.size(); ++i)
                relaxed[i] = static_cast<double>(rounded.bits[i]);
        }
    }

    res.message = round_message(RelaxedMessage{relaxed});
    res.delta = Tensor::from_data(probe_t.shape(), delta);

    Tensor perturbed;
    {
        Tape t0(false);
        perturbed = clamp(t0, add(t0, probe_t, res.delta), 0.0, 1.0);
    }
    {
        Tape t0(false);
        Tensor z_ref_t = vec_tensor(z_ref);
        res.s_pre_adv =
            cosine_similarity(t0, embed_face_t(t0, perturbed, emb), z_ref_t).item();
        Tensor watermarked = embed_t(
            t0, perturbed,
            vec_tensor(std::vector<double>(res.message.bits.begin(), res.message.bits.end())),
            codec);
        res.s_post_adv =
            cosine_similarity(t0, embed_face_t(t0, watermarked, emb), z_ref_t).item();
    }
    res.match_pre = match_score(res.s_pre_adv, matcher.tau);
    res.match_post = match_score(res.s_post_adv, matcher.tau);

    // result invariants
    assert_delta_constraints(delta, probe_t, cfg.epsilon, res.constraint_checks);
    res.message.validate();
    return res;
}

std::pair<Message, double> brute_force_message_oracle(const Image& perturbed_probe,
                                                      const std::vector<double>& z_ref,
                                                      const CodecParams& codec,
                                                      const EmbedderParams& emb) {
    const int l = codec.cfg.message_bits;
    if (l > 12)
        throw std::invalid_argument("brute_force_message_oracle: L=" + std::to_string(l) +
                                    " too large to enumerate (max 12)");
    const Tensor probe_t = to_chw(perturbed_probe);

    // the first objective term is constant across messages; fold it in once
    double s_probe;
    {
        Tape t0(false);
        s_probe = cosine_similarity(t0, embed_face_t(t0, probe_t, emb), vec_tensor(z_ref)).item();
    }

    Message best;
    double best_obj = 0.0;
    std::vector<double> message(static_cast<std::size_t>(l), 0.0);
    const std::uint64_t total = 1ULL << l;
    for (std::uint64_t idx = 0; idx < total; ++idx) {
        Message m;
        m.bits.resize(l);
        for (int j = 0; j < l; ++j) m.bits[j] = static_cast<int>((idx >> (l - 1 - j)) & 1ULL);
        for (int j = 0; j < l; ++j) message[j] = static_cast<double>(m.bits[j]);

        double s_wm;
        {
            Tape t0(false);
            Tensor watermarked = embed_t(t0, probe_t, vec_tensor(message), codec);
            s_wm = cosine_similarity(t0, embed_face_t(t0, watermarked, emb), vec_tensor(z_ref))
                       .item();
        }
        const double obj = s_wm - s_probe;
        if (idx == 0 || obj < best_obj) {
            best = m;
            best_obj = obj;
        }
    }
    return {best, best_obj};
}

}  // namespace awmark
