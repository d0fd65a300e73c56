#ifndef AWMARK_ATTACK_HPP
#define AWMARK_ATTACK_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "awmark/codec.hpp"
#include "awmark/embedder.hpp"
#include "awmark/image.hpp"

namespace awmark {

/// Joint perturbation/message attack configuration. Step sizes follow the
/// evaluated setup: alpha = epsilon / pgd_steps for delta, beta =
/// 1 / pgd_steps for the relaxed message.
struct AttackConfig {
    double epsilon = 4.0 / 255.0;  // l-infinity budget, pixel units in [0,1] scale
    int pgd_steps = 10;            // T, inner steps per variable
    int rounds = 3;                // K, outer alternation rounds

    enum class MessageInit { uniform_random, all_half };
    MessageInit m_init = MessageInit::uniform_random;

    /// Round the relaxed message after every outer round instead of once at
    /// the end (ablation switch; discards relaxation state between rounds).
    bool round_each_round = false;

    std::uint64_t seed = 0;

    double alpha() const { return epsilon / pgd_steps; }
    double beta() const { return 1.0 / pgd_steps; }
    void validate() const;
};

struct AttackResult {
    Tensor delta;     // [3,H,W]; max-norm <= epsilon, probe+delta in [0,1]
    Message message;  // final, rounded
    double s_pre_clean = 0.0;  // s(z_p, z_r)
    double s_pre_adv = 0.0;    // s(z_p', z_r)
    double s_post_adv = 0.0;   // s(z_w', z_r) with the rounded message
    int match_pre = 0;
    int match_post = 0;
    std::vector<double> loss_trace;     // objective before each inner step
    long constraint_checks = 0;         // in-loop constraint assertions performed
};

/// The joint objective: with I_p' = clamp(probe + delta, 0, 1) and
/// I_w' = embed(I_p', m), returns s(z_w', z_r) - s(z_p', z_r).
/// Differentiable w.r.t. delta and relaxed_m.
Tensor attack_loss(Tape& tape, const Tensor& delta, const Tensor& relaxed_m,
                   const Tensor& probe_chw, const Tensor& z_ref, const CodecParams& codec,
                   const EmbedderParams& emb);

/// T steps of sign-PGD on delta with the message held fixed. After every
/// step delta is projected onto the epsilon ball and onto the box that keeps
/// probe + delta inside [0,1]; both constraints are asserted in-loop.
void pgd_delta_round(std::vector<double>& delta, const std::vector<double>& relaxed_m,
                     const Tensor& probe_chw, const std::vector<double>& z_ref,
                     const CodecParams& codec, const EmbedderParams& emb,
                     const AttackConfig& cfg, std::vector<double>& trace, long& checks);

/// T steps of raw-gradient descent on the relaxed message with delta held
/// fixed (sign steps of size 1/T would saturate a [0,1] variable within T
/// steps). Every iterate is projected back into [0,1]^L and asserted.
void message_round(std::vector<double>& relaxed_m, const std::vector<double>& delta,
                   const Tensor& probe_chw, const std::vector<double>& z_ref,
                   const CodecParams& codec, const EmbedderParams& emb, const AttackConfig& cfg,
                   std::vector<double>& trace, long& checks);

/// Element >= 0.5 rounds to 1 (ties up), else 0. Idempotent on binary input.
Message round_message(const RelaxedMessage& relaxed);

AttackResult adversarial_watermark_attack(const Image& probe, const Image& reference,
                                          const CodecParams& codec, const EmbedderParams& emb,
                                          const AttackConfig& cfg, const MatcherConfig& matcher);

/// Objective value s(z_w', z_r) - s(z_p', z_r) for a fixed binary or relaxed
/// message, evaluated through the same forward path the oracle uses.
double attack_objective(const Tensor& perturbed_probe_chw, const std::vector<double>& message,
                        const CodecParams& codec, const EmbedderParams& emb,
                        const std::vector<double>& z_ref);

/// Exhaustive minimum of the objective over all 2^L binary messages
/// (L <= 12). Enumeration is lexicographic over bit vectors and ties keep
/// the first minimizer, i.e. the lexicographically smallest.
std::pair<Message, double> brute_force_message_oracle(const Image& perturbed_probe,
                                                      const std::vector<double>& z_ref,
                                                      const CodecParams& codec,
                                                      const EmbedderParams& emb);

}  // namespace awmark

#endif
