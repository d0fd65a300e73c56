#ifndef AWMARK_BENCH_HPP
#define AWMARK_BENCH_HPP

#include <string>
#include <utility>
#include <vector>

#include "awmark/attack.hpp"
#include "awmark/codec.hpp"
#include "awmark/embedder.hpp"
#include "awmark/transforms.hpp"

namespace awmark {

inline constexpr int kReportSchemaVersion = 1;

/// Full campaign configuration. Epsilon values are quoted in 1/255 units
/// throughout the config and reports; they are converted to the [0,1] pixel
/// scale where the attack runs.
struct ExperimentConfig {
    int num_identities = 100;
    int per_identity = 2;
    std::string data_dir;  // optional image folder; empty = toy generator

    std::vector<double> epsilon_grid_255 = {0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0};
    AttackConfig attack;  // epsilon is overridden per grid point
    double tau = 0.3;
    std::uint64_t seed = 0;
    int workers = 1;
    std::string out_dir = "out";

    void validate() const;
    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
};

struct PairRecord {
    int pair_index = 0;
    int identity = 0;
    double epsilon_255 = 0.0;
    double s_pre_clean = 0.0, s_pre_adv = 0.0, s_post_adv = 0.0;
    int match_pre = 0, match_post = 0;
    std::string message;
    long constraint_checks = 0;
};

struct ReportRow {
    double epsilon_255 = 0.0;
    double accuracy_without = 0.0;  // % of pairs with match(z_p', z_r) = 1
    double accuracy_with = 0.0;     // % of pairs with match(z_w', z_r) = 1
    double reduction = 0.0;         // accuracy_without - accuracy_with
};

struct CampaignOutput {
    std::vector<ReportRow> rows;
    std::vector<PairRecord> records;  // ordered by (epsilon, pair)
};

/// Probe/reference pairs: one per identity (sample 0 probes, sample 1 is the
/// reference).
std::vector<std::pair<Image, Image>> pairs_from_dataset(const ToyIdentityDataset& ds);

/// Runs the attack on every pair at every epsilon of the grid. The per-pair
/// attack seed is derived from (config seed, pair index), so serial and
/// parallel campaigns produce identical results.
CampaignOutput run_attack_experiment(const ExperimentConfig& cfg, const CodecParams& codec,
                                     const EmbedderParams& emb,
                                     const std::vector<std::pair<Image, Image>>& pairs);

/// Pure aggregation: recompute the match decisions from the logged
/// similarities and tau.
std::vector<ReportRow> rows_from_records(const std::vector<PairRecord>& records, double tau);

void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows);
void write_pairs_jsonl(const std::string& path, const std::vector<PairRecord>& records,
                       const ExperimentConfig& cfg);
std::vector<PairRecord> load_pairs_jsonl(const std::string& path, double* tau_out = nullptr);

/// Long-format similarity table: one row per pair per condition per epsilon,
/// conditions `with_watermarking` and `without_watermarking`.
void write_similarity_csv(const std::string& path, const std::vector<PairRecord>& records);

/// run.json: resolved config echo plus FNV-1a hashes of the artifacts.
void write_run_json(const std::string& path, const std::string& config_json,
                    const std::vector<std::string>& artifact_paths);

/// Image dumps for one attacked pair: reference, probe, watermarked probe,
/// adversarial probe, adversarial watermarked probe, and x10 inverted
/// absolute-difference visualizations, plus an annotations.json sidecar with
/// each probe-side image's similarity to the reference.
void export_diff_images(const Image& probe, const Image& reference, const AttackResult& result,
                        const CodecParams& codec, const EmbedderParams& emb,
                        const std::string& out_dir);

/// abs-difference visualization: intensity 1 - min(1, 10 |a-b|).
Image diff_visual(const Image& a, const Image& b);

}  // namespace awmark

#endif
