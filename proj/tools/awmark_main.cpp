// awmark: adversarial watermarking testbed CLI.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "awmark/bench.hpp"
#include "awmark/checkpoint.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace awmark;

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

CodecParams require_codec(const std::string& path) {
    if (path.empty() || !fs::exists(fs::path(path) / "manifest.json"))
        throw std::runtime_error("train first: no codec checkpoint at '" + path +
                                 "' (run `awmark train-codec`)");
    return codec_from_checkpoint(path);
}

EmbedderParams require_embedder(const std::string& path) {
    if (path.empty() || !fs::exists(fs::path(path) / "manifest.json"))
        throw std::runtime_error("train first: no embedder checkpoint at '" + path +
                                 "' (run `awmark train-embedder`)");
    return embedder_from_checkpoint(path);
}

std::vector<Image> toy_image_pool(int count, std::uint64_t seed) {
    // flat image pool for codec work; identities are irrelevant there
    const int per = 2;
    const int ids = (count + per - 1) / per;
    ToyIdentityDataset ds = generate_toy_dataset(std::max(2, ids), per, seed);
    ds.images.resize(count);
    return ds.images;
}

std::vector<Image> load_pool(const std::string& data_dir, int toy_images, std::uint64_t seed) {
    if (!data_dir.empty()) return load_image_folder(data_dir).images;
    return toy_image_pool(toy_images, seed);
}

void finish_run(const std::string& out_dir, const ordered_json& config,
                const std::vector<std::string>& artifacts) {
    fs::create_directories(out_dir);
    write_run_json((fs::path(out_dir) / "run.json").string(), config.dump(), artifacts);
}

std::vector<std::pair<Image, Image>> pairs_for_config(const ExperimentConfig& cfg) {
    if (!cfg.data_dir.empty()) {
        LabeledImages li = load_image_folder(cfg.data_dir);
        std::vector<std::pair<Image, Image>> pairs;
        int current = -1;
        std::vector<const Image*> bucket;
        for (std::size_t i = 0; i <= li.images.size(); ++i) {
            const int label = i < li.images.size() ? li.labels[i] : -2;
            if (label != current) {
                if (bucket.size() >= 2) pairs.emplace_back(*bucket[0], *bucket[1]);
                bucket.clear();
                current = label;
            }
            if (i < li.images.size()) bucket.push_back(&li.images[i]);
        }
        if (pairs.empty()) throw std::runtime_error("data_dir has no identity with two images");
        return pairs;
    }
    return pairs_from_dataset(
        generate_toy_dataset(cfg.num_identities, cfg.per_identity, cfg.seed));
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"adversarial watermarking attack testbed"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string config_path, out_dir = "out";
    app.add_option("--seed", seed, "base RNG seed")->capture_default_str();
    app.add_option("--config", config_path, "JSON config file (campaign)");
    app.add_option("--out", out_dir, "output directory")->capture_default_str();

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the toy identity dataset as PNG folders");
    int gd_identities = 100, gd_per = 2;
    gen->add_option("--identities", gd_identities)->capture_default_str();
    gen->add_option("--per-identity", gd_per)->capture_default_str();

    // train-codec
    auto* tc = app.add_subcommand("train-codec", "train the watermark encoder/decoder");
    std::string tc_data;
    int tc_images = 200, tc_bits = 48, tc_epochs = 30, tc_batch = 8, tc_crop = 64;
    double tc_lambda = 1.0, tc_lr = 0.3, tc_strength = 0.02;
    tc->add_option("--data", tc_data, "image folder (default: toy images)");
    tc->add_option("--toy-images", tc_images)->capture_default_str();
    tc->add_option("--bits", tc_bits)->capture_default_str();
    tc->add_option("--epochs", tc_epochs)->capture_default_str();
    tc->add_option("--batch", tc_batch)->capture_default_str();
    tc->add_option("--crop", tc_crop)->capture_default_str();
    tc->add_option("--lambda", tc_lambda)->capture_default_str();
    tc->add_option("--lr", tc_lr)->capture_default_str();
    tc->add_option("--strength", tc_strength)->capture_default_str();

    // train-embedder
    auto* te = app.add_subcommand("train-embedder", "train the face embedder");
    std::string te_data;
    int te_identities = 100, te_per = 2, te_epochs = 40, te_batch = 16;
    double te_lr = 0.2;
    te->add_option("--data", te_data, "image folder (default: toy dataset)");
    te->add_option("--identities", te_identities)->capture_default_str();
    te->add_option("--per-identity", te_per)->capture_default_str();
    te->add_option("--epochs", te_epochs)->capture_default_str();
    te->add_option("--batch", te_batch)->capture_default_str();
    te->add_option("--lr", te_lr)->capture_default_str();

    // embed
    auto* em = app.add_subcommand("embed", "embed a message into an image");
    std::string em_codec, em_in, em_message;
    em->add_option("--codec", em_codec)->required();
    em->add_option("--in", em_in)->required();
    em->add_option("--message", em_message, "bitstring; default: random from --seed");

    // extract
    auto* ex = app.add_subcommand("extract", "extract the message bits from an image");
    std::string ex_codec, ex_in;
    ex->add_option("--codec", ex_codec)->required();
    ex->add_option("--in", ex_in)->required();

    // eval-robustness
    auto* er = app.add_subcommand("eval-robustness", "bit-accuracy sweep over transforms");
    std::string er_codec, er_data;
    int er_images = 100;
    er->add_option("--codec", er_codec)->required();
    er->add_option("--data", er_data, "image folder (default: toy images)");
    er->add_option("--toy-images", er_images)->capture_default_str();

    // attack
    auto* at = app.add_subcommand("attack", "attack a single probe/reference pair");
    std::string at_codec, at_embedder, at_probe, at_reference, at_minit = "uniform-random";
    double at_eps255 = 4.0, at_tau = 0.3;
    int at_steps = 10, at_rounds = 3;
    bool at_dump = false, at_dump_delta = false;
    at->add_option("--codec", at_codec)->required();
    at->add_option("--embedder", at_embedder)->required();
    at->add_option("--probe", at_probe)->required();
    at->add_option("--reference", at_reference)->required();
    at->add_option("--epsilon-255", at_eps255, "epsilon in 1/255 units")->capture_default_str();
    at->add_option("--steps", at_steps, "PGD steps per variable (T)")->capture_default_str();
    at->add_option("--rounds", at_rounds, "alternation rounds (K)")->capture_default_str();
    at->add_option("--tau", at_tau)->capture_default_str();
    at->add_option("--m-init", at_minit, "uniform-random | all-half")->capture_default_str();
    at->add_flag("--dump-images", at_dump, "write PNG dumps of the attacked pair");
    at->add_flag("--dump-delta", at_dump_delta, "write delta in the checkpoint tensor format");

    // campaign
    auto* ca = app.add_subcommand("campaign", "full epsilon-grid attack experiment");
    std::string ca_codec, ca_embedder;
    int ca_workers = 0;
    ca->add_option("--codec", ca_codec)->required();
    ca->add_option("--embedder", ca_embedder)->required();
    ca->add_option("--workers", ca_workers, "override config worker count");

    // report
    auto* re = app.add_subcommand("report", "re-aggregate report CSVs from a pairs.jsonl log");
    std::string re_log;
    double re_tau = -2.0;
    re->add_option("--log", re_log)->required();
    re->add_option("--tau", re_tau, "override the tau echoed in the log");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            ToyIdentityDataset ds = generate_toy_dataset(gd_identities, gd_per, seed);
            std::vector<std::string> files;
            for (int id = 0; id < gd_identities; ++id) {
                char dname[64];
                std::snprintf(dname, sizeof(dname), "identity_%03d", id);
                fs::create_directories(fs::path(out_dir) / dname);
                for (int k = 0; k < gd_per; ++k) {
                    char fname[64];
                    std::snprintf(fname, sizeof(fname), "sample_%d.png", k);
                    const std::string p = (fs::path(out_dir) / dname / fname).string();
                    write_png(p, ds.sample(id, k));
                    files.push_back(p);
                }
            }
            ordered_json cfg{{"command", "gen-data"}, {"identities", gd_identities},
                             {"per_identity", gd_per}, {"seed", seed}};
            finish_run(out_dir, cfg, {});
            std::cout << "wrote " << files.size() << " images under " << out_dir << "\n";
        } else if (*tc) {
            std::vector<Image> pool = load_pool(tc_data, tc_images, seed);
            CodecConfig ccfg;
            ccfg.message_bits = tc_bits;
            ccfg.strength = tc_strength;
            ccfg.lambda = tc_lambda;
            CodecParams codec = init_codec(ccfg, seed);
            CodecTrainConfig tcfg;
            tcfg.lambda = tc_lambda;
            tcfg.epochs = tc_epochs;
            tcfg.batch = tc_batch;
            tcfg.lr = tc_lr;
            tcfg.crop = tc_crop;
            tcfg.seed = seed;
            TrainLog log = train_codec(codec, pool, tcfg);
            const std::string ckpt = (fs::path(out_dir) / "codec").string();
            save_codec(ckpt, codec);
            ordered_json cfg{{"command", "train-codec"}, {"images", pool.size()},
                             {"bits", tc_bits}, {"epochs", tc_epochs}, {"batch", tc_batch},
                             {"crop", tc_crop}, {"lambda", tc_lambda}, {"lr", tc_lr},
                             {"strength", tc_strength}, {"seed", seed},
                             {"final_loss", log.epoch_loss.back()}};
            finish_run(out_dir, cfg, {(fs::path(ckpt) / "manifest.json").string()});
            std::cout << "codec checkpoint: " << ckpt << " (final loss "
                      << log.epoch_loss.back() << ")\n";
        } else if (*te) {
            EmbedderConfig ecfg;
            ToyIdentityDataset ds;
            if (te_data.empty()) {
                ds = generate_toy_dataset(te_identities, te_per, seed);
            } else {
                LabeledImages li = load_image_folder(te_data);
                ds.spec = {static_cast<int>(li.identity_names.size()), 0, seed};
                ds.images = std::move(li.images);
                ds.labels = std::move(li.labels);
            }
            int num_ids = 0;
            for (int l : ds.labels) num_ids = std::max(num_ids, l + 1);
            ecfg.num_identities = num_ids;
            EmbedderParams emb = init_embedder(ecfg, seed);
            EmbedderTrainConfig tcfg;
            tcfg.epochs = te_epochs;
            tcfg.batch = te_batch;
            tcfg.lr = te_lr;
            tcfg.seed = seed;
            TrainLog log = train_embedder(emb, ds, tcfg);
            const std::string ckpt = (fs::path(out_dir) / "embedder").string();
            save_embedder(ckpt, emb);
            ordered_json cfg{{"command", "train-embedder"}, {"identities", num_ids},
                             {"epochs", te_epochs}, {"batch", te_batch}, {"lr", te_lr},
                             {"seed", seed}, {"final_loss", log.epoch_loss.back()}};
            finish_run(out_dir, cfg, {(fs::path(ckpt) / "manifest.json").string()});
            std::cout << "embedder checkpoint: " << ckpt << " (final loss "
                      << log.epoch_loss.back() << ")\n";
        } else if (*em) {
            CodecParams codec = require_codec(em_codec);
            Message msg = em_message.empty()
                              ? random_message(codec.cfg.message_bits, seed)
                              : Message::from_string(em_message);
            Image img = read_png(em_in);
            Image watermarked = embed(img, msg, codec);
            fs::create_directories(out_dir);
            const std::string out_png = (fs::path(out_dir) / "watermarked.png").string();
            write_png(out_png, watermarked);
            ordered_json cfg{{"command", "embed"}, {"codec", em_codec}, {"in", em_in},
                             {"message", msg.to_string()}, {"seed", seed}};
            finish_run(out_dir, cfg, {out_png});
            std::cout << "message " << msg.to_string() << "\n"
                      << "psnr " << psnr(img, watermarked) << " dB\n"
                      << "wrote " << out_png << "\n";
        } else if (*ex) {
            CodecParams codec = require_codec(ex_codec);
            Message msg = extract(read_png(ex_in), codec);
            ordered_json cfg{{"command", "extract"}, {"codec", ex_codec}, {"in", ex_in},
                             {"message", msg.to_string()}};
            finish_run(out_dir, cfg, {});
            std::cout << msg.to_string() << "\n";
        } else if (*er) {
            CodecParams codec = require_codec(er_codec);
            std::vector<Image> pool = load_pool(er_data, er_images, seed);
            auto cells = robustness_sweep(codec, pool, default_robustness_grid(), seed);
            fs::create_directories(out_dir);
            const std::string csv = (fs::path(out_dir) / "robustness.csv").string();
            write_sweep_csv(csv, cells);
            ordered_json cfg{{"command", "eval-robustness"}, {"codec", er_codec},
                             {"images", pool.size()}, {"seed", seed}};
            finish_run(out_dir, cfg, {csv});
            std::cout << "wrote " << csv << "\n";
        } else if (*at) {
            CodecParams codec = require_codec(at_codec);
            EmbedderParams emb = require_embedder(at_embedder);
            AttackConfig acfg;
            acfg.epsilon = at_eps255 / 255.0;
            acfg.pgd_steps = at_steps;
            acfg.rounds = at_rounds;
            acfg.seed = seed;
            acfg.m_init = at_minit == "all-half" ? AttackConfig::MessageInit::all_half
                                                 : AttackConfig::MessageInit::uniform_random;
            MatcherConfig matcher{at_tau};
            Image probe = read_png(at_probe), reference = read_png(at_reference);
            AttackResult res = adversarial_watermark_attack(probe, reference, codec, emb, acfg,
                                                            matcher);
            fs::create_directories(out_dir);
            ordered_json rec{{"schema_version", kReportSchemaVersion},
                             {"epsilon_255", at_eps255},
                             {"s_pre_clean", res.s_pre_clean},
                             {"s_pre_adv", res.s_pre_adv},
                             {"s_post_adv", res.s_post_adv},
                             {"match_pre", res.match_pre},
                             {"match_post", res.match_post},
                             {"message", res.message.to_string()},
                             {"constraint_checks", res.constraint_checks},
                             {"config",
                              ordered_json{{"pgd_steps", at_steps}, {"rounds", at_rounds},
                                           {"m_init", at_minit}, {"tau", at_tau},
                                           {"seed", seed}}}};
            const std::string rec_path = (fs::path(out_dir) / "attack_result.json").string();
            {
                std::ofstream f(rec_path);
                f << rec.dump(2) << "\n";
            }
            std::vector<std::string> artifacts{rec_path};
            if (at_dump_delta) {
                ParamSet ps;
                ps.add("delta", res.delta);
                save_checkpoint((fs::path(out_dir) / "delta").string(), ps,
                                rec["config"].dump());
                artifacts.push_back((fs::path(out_dir) / "delta" / "manifest.json").string());
            }
            if (at_dump) export_diff_images(probe, reference, res, codec, emb, out_dir);
            finish_run(out_dir, rec, artifacts);
            std::cout << "s_pre_clean " << res.s_pre_clean << "\n"
                      << "s_pre_adv   " << res.s_pre_adv << " (match " << res.match_pre << ")\n"
                      << "s_post_adv  " << res.s_post_adv << " (match " << res.match_post << ")\n"
                      << "message     " << res.message.to_string() << "\n";
        } else if (*ca) {
            ExperimentConfig cfg;
            if (!config_path.empty())
                cfg = ExperimentConfig::from_json_text(read_text_file(config_path));
            if (app.count("--seed")) cfg.seed = seed;
            if (app.count("--out")) cfg.out_dir = out_dir;
            if (ca_workers > 0) cfg.workers = ca_workers;
            cfg.validate();
            CodecParams codec = require_codec(ca_codec);
            EmbedderParams emb = require_embedder(ca_embedder);
            auto pairs = pairs_for_config(cfg);
            CampaignOutput out = run_attack_experiment(cfg, codec, emb, pairs);
            fs::create_directories(cfg.out_dir);
            const std::string report = (fs::path(cfg.out_dir) / "report.csv").string();
            const std::string log = (fs::path(cfg.out_dir) / "pairs.jsonl").string();
            const std::string sims = (fs::path(cfg.out_dir) / "similarity.csv").string();
            write_report_csv(report, out.rows);
            write_pairs_jsonl(log, out.records, cfg);
            write_similarity_csv(sims, out.records);
            write_run_json((fs::path(cfg.out_dir) / "run.json").string(), cfg.to_json_text(),
                           {report, log, sims});
            for (const ReportRow& r : out.rows)
                std::printf("eps %4.1f/255  without %6.2f%%  with %6.2f%%  reduction %6.2f\n",
                            r.epsilon_255, r.accuracy_without, r.accuracy_with, r.reduction);
            std::cout << "wrote " << report << ", " << log << ", " << sims << "\n";
        } else if (*re) {
            double tau = 0.3;
            std::vector<PairRecord> records = load_pairs_jsonl(re_log, &tau);
            if (re_tau > -1.0) tau = re_tau;
            auto rows = rows_from_records(records, tau);
            fs::create_directories(out_dir);
            const std::string report = (fs::path(out_dir) / "report.csv").string();
            const std::string sims = (fs::path(out_dir) / "similarity.csv").string();
            write_report_csv(report, rows);
            write_similarity_csv(sims, records);
            ordered_json cfg{{"command", "report"}, {"log", re_log}, {"tau", tau}};
            finish_run(out_dir, cfg, {report, sims});
            std::cout << "wrote " << report << " and " << sims << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
