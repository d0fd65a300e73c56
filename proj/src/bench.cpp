#include "awmark/bench.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "awmark/checkpoint.hpp"
#include "awmark/rng.hpp"

namespace awmark {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void ExperimentConfig::validate() const {
    if (epsilon_grid_255.empty()) throw std::invalid_argument("config: empty epsilon grid");
    for (std::size_t i = 0; i < epsilon_grid_255.size(); ++i) {
        if (epsilon_grid_255[i] < 0.0)
            throw std::invalid_argument("config: epsilon values must be >= 0");
        if (i > 0 && epsilon_grid_255[i] <= epsilon_grid_255[i - 1])
            throw std::invalid_argument("config: epsilon grid must be sorted ascending");
    }
    if (!(tau > -1.0 && tau < 1.0)) throw std::invalid_argument("config: tau must be in (-1,1)");
    if (workers < 1) throw std::invalid_argument("config: workers must be >= 1");
    if (num_identities < 2) throw std::invalid_argument("config: need >= 2 identities");
    if (per_identity < 2) throw std::invalid_argument("config: need >= 2 samples per identity");
    attack.validate();
}

namespace {

std::string message_init_name(AttackConfig::MessageInit m) {
    return m == AttackConfig::MessageInit::all_half ? "all-half" : "uniform-random";
}

AttackConfig::MessageInit message_init_from_name(const std::string& s) {
    if (s == "all-half") return AttackConfig::MessageInit::all_half;
    if (s == "uniform-random") return AttackConfig::MessageInit::uniform_random;
    throw std::invalid_argument("config: unknown m_init " + s);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    ordered_json j = ordered_json::parse(text);
    ExperimentConfig cfg;
    cfg.num_identities = j.value("num_identities", cfg.num_identities);
    cfg.per_identity = j.value("per_identity", cfg.per_identity);
    cfg.data_dir = j.value("data_dir", cfg.data_dir);
    if (j.contains("epsilon_grid_255"))
        cfg.epsilon_grid_255 = j["epsilon_grid_255"].get<std::vector<double>>();
    cfg.tau = j.value("tau", cfg.tau);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.workers = j.value("workers", cfg.workers);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    if (j.contains("attack")) {
        const auto& a = j["attack"];
        cfg.attack.pgd_steps = a.value("pgd_steps", cfg.attack.pgd_steps);
        cfg.attack.rounds = a.value("rounds", cfg.attack.rounds);
        cfg.attack.round_each_round = a.value("round_each_round", cfg.attack.round_each_round);
        if (a.contains("m_init"))
            cfg.attack.m_init = message_init_from_name(a["m_init"].get<std::string>());
    }
    cfg.validate();
    return cfg;
}

std::string ExperimentConfig::to_json_text() const {
    ordered_json j;
    j["num_identities"] = num_identities;
    j["per_identity"] = per_identity;
    j["data_dir"] = data_dir;
    j["epsilon_grid_255"] = epsilon_grid_255;
    ordered_json a;
    a["pgd_steps"] = attack.pgd_steps;
    a["rounds"] = attack.rounds;
    a["m_init"] = message_init_name(attack.m_init);
    a["round_each_round"] = attack.round_each_round;
    j["attack"] = a;
    j["tau"] = tau;
    j["seed"] = seed;
    j["workers"] = workers;
    j["out_dir"] = out_dir;
    return j.dump(2);
}

std::vector<std::pair<Image, Image>> pairs_from_dataset(const ToyIdentityDataset& ds) {
    std::vector<std::pair<Image, Image>> pairs;
    pairs.reserve(ds.spec.num_identities);
    for (int id = 0; id < ds.spec.num_identities; ++id)
        pairs.emplace_back(ds.sample(id, 0), ds.sample(id, 1));
    return pairs;
}

CampaignOutput run_attack_experiment(const ExperimentConfig& cfg, const CodecParams& codec,
                                     const EmbedderParams& emb,
                                     const std::vector<std::pair<Image, Image>>& pairs) {
    cfg.validate();
    if (pairs.empty()) throw std::invalid_argument("campaign: no pairs");

    const std::size_t n_eps = cfg.epsilon_grid_255.size();
    const std::size_t n_pairs = pairs.size();
    std::vector<AttackResult> results(n_eps * n_pairs);

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t task = next.fetch_add(1);
            if (task >= n_eps * n_pairs) break;
            const std::size_t ei = task / n_pairs;
            const std::size_t pi = task % n_pairs;
            AttackConfig acfg = cfg.attack;
            acfg.epsilon = cfg.epsilon_grid_255[ei] / 255.0;
            acfg.seed = derive_stream(cfg.seed, pi);
            MatcherConfig matcher{cfg.tau};
            results[task] = adversarial_watermark_attack(pairs[pi].first, pairs[pi].second,
                                                         codec, emb, acfg, matcher);
        }
    };
    if (cfg.workers == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (int t = 0; t < cfg.workers; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }

    CampaignOutput out;
    out.records.reserve(n_eps * n_pairs);
    for (std::size_t ei = 0; ei < n_eps; ++ei) {
        for (std::size_t pi = 0; pi < n_pairs; ++pi) {
            const AttackResult& r = results[ei * n_pairs + pi];
            PairRecord rec;
            rec.pair_index = static_cast<int>(pi);
            rec.identity = static_cast<int>(pi);
            rec.epsilon_255 = cfg.epsilon_grid_255[ei];
            rec.s_pre_clean = r.s_pre_clean;
            rec.s_pre_adv = r.s_pre_adv;
            rec.s_post_adv = r.s_post_adv;
            rec.match_pre = r.match_pre;
            rec.match_post = r.match_post;
            rec.message = r.message.to_string();
            rec.constraint_checks = r.constraint_checks;
            out.records.push_back(std::move(rec));
        }
    }
    out.rows = rows_from_records(out.records, cfg.tau);
    return out;
}

std::vector<ReportRow> rows_from_records(const std::vector<PairRecord>& records, double tau) {
    std::vector<ReportRow> rows;
    for (const PairRecord& rec : records) {
        if (rows.empty() || rows.back().epsilon_255 != rec.epsilon_255) {
            if (!rows.empty()) {
                for (const ReportRow& prev : rows)
                    if (prev.epsilon_255 == rec.epsilon_255)
                        throw std::invalid_argument(
                            "rows_from_records: records not grouped by epsilon");
            }
            rows.push_back({rec.epsilon_255, 0.0, 0.0, 0.0});
        }
        rows.back().accuracy_without += match_score(rec.s_pre_adv, tau);
        rows.back().accuracy_with += match_score(rec.s_post_adv, tau);
        rows.back().reduction += 1.0;  // pair count, rescaled below
    }
    for (ReportRow& row : rows) {
        const double n = row.reduction;
        row.accuracy_without = 100.0 * row.accuracy_without / n;
        row.accuracy_with = 100.0 * row.accuracy_with / n;
        row.reduction = row.accuracy_without - row.accuracy_with;
    }
    return rows;
}

namespace {

// Table 2 of the evaluated full-scale system, embedded for comparison only.
constexpr double kPaperEps[] = {0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0};
constexpr double kPaperWithout[] = {81.8, 85.4, 88.5, 90.9, 92.2, 94.1, 95.7, 97.5, 98.3};
constexpr double kPaperWith[] = {73.9, 63.5, 50.0, 35.7, 25.0, 16.5, 8.4, 4.5, 2.4};

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), format, v);
    return buf;
}

}  // namespace

void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_report_csv: cannot open " + path);
    f << "# schema_version=" << kReportSchemaVersion << "\n";
    f << "epsilon_255,accuracy_without_watermark,accuracy_with_watermark,reduction\n";
    for (const ReportRow& r : rows)
        f << fmt("%g", r.epsilon_255) << "," << fmt("%.4f", r.accuracy_without) << ","
          << fmt("%.4f", r.accuracy_with) << "," << fmt("%.4f", r.reduction) << "\n";
    f << "# reference: paper (full-scale) -- not expected to match desk scale\n";
    for (std::size_t i = 0; i < std::size(kPaperEps); ++i)
        f << "# paper," << fmt("%g", kPaperEps[i]) << "," << fmt("%.1f", kPaperWithout[i]) << ","
          << fmt("%.1f", kPaperWith[i]) << ","
          << fmt("%.1f", kPaperWithout[i] - kPaperWith[i]) << "\n";
    if (!f) throw std::runtime_error("write_report_csv: write failed for " + path);
}

void write_pairs_jsonl(const std::string& path, const std::vector<PairRecord>& records,
                       const ExperimentConfig& cfg) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_pairs_jsonl: cannot open " + path);
    for (const PairRecord& rec : records) {
        ordered_json j;
        j["schema_version"] = kReportSchemaVersion;
        j["pair_index"] = rec.pair_index;
        j["identity"] = rec.identity;
        j["epsilon_255"] = rec.epsilon_255;
        j["s_pre_clean"] = rec.s_pre_clean;
        j["s_pre_adv"] = rec.s_pre_adv;
        j["s_post_adv"] = rec.s_post_adv;
        j["match_pre"] = rec.match_pre;
        j["match_post"] = rec.match_post;
        j["message"] = rec.message;
        j["constraint_checks"] = rec.constraint_checks;
        ordered_json c;
        c["pgd_steps"] = cfg.attack.pgd_steps;
        c["rounds"] = cfg.attack.rounds;
        c["m_init"] = message_init_name(cfg.attack.m_init);
        c["round_each_round"] = cfg.attack.round_each_round;
        c["seed"] = cfg.seed;
        c["tau"] = cfg.tau;
        j["config"] = c;
        f << j.dump() << "\n";
    }
    if (!f) throw std::runtime_error("write_pairs_jsonl: write failed for " + path);
}

std::vector<PairRecord> load_pairs_jsonl(const std::string& path, double* tau_out) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_pairs_jsonl: cannot open " + path);
    std::vector<PairRecord> records;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        PairRecord rec;
        rec.pair_index = j.at("pair_index").get<int>();
        rec.identity = j.at("identity").get<int>();
        rec.epsilon_255 = j.at("epsilon_255").get<double>();
        rec.s_pre_clean = j.at("s_pre_clean").get<double>();
        rec.s_pre_adv = j.at("s_pre_adv").get<double>();
        rec.s_post_adv = j.at("s_post_adv").get<double>();
        rec.match_pre = j.at("match_pre").get<int>();
        rec.match_post = j.at("match_post").get<int>();
        rec.message = j.at("message").get<std::string>();
        rec.constraint_checks = j.value("constraint_checks", 0L);
        if (tau_out && j.contains("config")) *tau_out = j["config"].value("tau", *tau_out);
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw std::runtime_error("load_pairs_jsonl: no records in " + path);
    return records;
}

void write_similarity_csv(const std::string& path, const std::vector<PairRecord>& records) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_similarity_csv: cannot open " + path);
    f << "# schema_version=" << kReportSchemaVersion << "\n";
    f << "epsilon_255,condition,similarity\n";
    for (const PairRecord& rec : records) {
        f << fmt("%g", rec.epsilon_255) << ",without_watermarking,"
          << fmt("%.17g", rec.s_pre_adv) << "\n";
        f << fmt("%g", rec.epsilon_255) << ",with_watermarking,"
          << fmt("%.17g", rec.s_post_adv) << "\n";
    }
    if (!f) throw std::runtime_error("write_similarity_csv: write failed for " + path);
}

void write_run_json(const std::string& path, const std::string& config_json,
                    const std::vector<std::string>& artifact_paths) {
    ordered_json j;
    j["schema_version"] = kReportSchemaVersion;
    j["config"] = ordered_json::parse(config_json);
    ordered_json artifacts = ordered_json::object();
    for (const std::string& p : artifact_paths)
        artifacts[fs::path(p).filename().string()] = file_hash_hex(p);
    j["artifacts"] = artifacts;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_run_json: cannot open " + path);
    f << j.dump(2) << "\n";
    if (!f) throw std::runtime_error("write_run_json: write failed for " + path);
}

Image diff_visual(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w || a.c != b.c)
        throw std::invalid_argument("diff_visual: image size mismatch");
    Image out = Image::zeros(a.h, a.w, a.c);
    for (std::size_t i = 0; i < a.px.size(); ++i)
        out.px[i] = 1.0 - std::min(1.0, 10.0 * std::fabs(a.px[i] - b.px[i]));
    return out;
}

void export_diff_images(const Image& probe, const Image& reference, const AttackResult& result,
                        const CodecParams& codec, const EmbedderParams& emb,
                        const std::string& out_dir) {
    fs::create_directories(out_dir);
    const std::vector<double> z_ref = embed_face(reference, emb);

    Image perturbed;
    {
        Tape t0(false);
        perturbed = from_chw(clamp(t0, add(t0, to_chw(probe), result.delta), 0.0, 1.0));
    }
    const Image watermarked = embed(probe, result.message, codec);
    const Image watermarked_adv = embed(perturbed, result.message, codec);

    const auto path = [&](const char* name) { return (fs::path(out_dir) / name).string(); };
    write_png(path("reference.png"), reference);
    write_png(path("probe.png"), probe);
    write_png(path("watermarked.png"), watermarked);
    write_png(path("diff_watermarked.png"), diff_visual(watermarked, probe));
    write_png(path("probe_adv.png"), perturbed);
    write_png(path("delta.png"), diff_visual(perturbed, probe));
    write_png(path("watermarked_adv.png"), watermarked_adv);
    write_png(path("diff_watermarked_adv.png"), diff_visual(watermarked_adv, probe));

    ordered_json ann;
    ann["reference.png"] = nullptr;
    ann["probe.png"] = similarity(embed_face(probe, emb), z_ref);
    ann["watermarked.png"] = similarity(embed_face(watermarked, emb), z_ref);
    ann["probe_adv.png"] = result.s_pre_adv;
    ann["watermarked_adv.png"] = result.s_post_adv;
    std::ofstream f(path("annotations.json"));
    if (!f) throw std::runtime_error("export_diff_images: cannot write annotations.json");
    f << ann.dump(2) << "\n";
}

}  // namespace awmark
