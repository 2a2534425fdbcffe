// cpl: synthetic-scene detector lab driving the co-paced / self-paced
// training strategy comparison. Subcommands: gen | train | eval | compare.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "cpl/checkpoint.hpp"
#include "cpl/dataset_io.hpp"
#include "cpl/harness.hpp"
#include "cpl/rng.hpp"
#include "cpl/svg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct HyperFlags {
    cpl::Hyper hyper;
    cpl::DecodeParams decode;
    std::string weight_source = "fresh-per-batch";

    void attach(CLI::App* cmd) {
        cmd->add_option("--t0", hyper.t0, "prior-stage epochs")->capture_default_str();
        cmd->add_option("--t1", hyper.t1, "strategy-stage epochs")->capture_default_str();
        cmd->add_option("--batch", hyper.batch, "batch size")->capture_default_str();
        cmd->add_option("--lr", hyper.lr, "initial Adam learning rate")->capture_default_str();
        cmd->add_option("--lr-decay", hyper.lr_decay, "per-epoch learning-rate factor")
            ->capture_default_str();
        cmd->add_option("--alpha", hyper.alpha, "box-loss balance term")->capture_default_str();
        cmd->add_option("--n-fixed", hyper.n_fixed, "loss normalizer for empty images")
            ->capture_default_str();
        cmd->add_option("--xi0", hyper.schedule.xi0, "initial confidence threshold")
            ->capture_default_str();
        cmd->add_option("--e1", hyper.schedule.e1, "schedule breakpoint e1")
            ->capture_default_str();
        cmd->add_option("--e2", hyper.schedule.e2, "schedule breakpoint e2")
            ->capture_default_str();
        cmd->add_option("--m", hyper.m, "confidence minimizer root")->capture_default_str();
        cmd->add_option("--es-threshold", hyper.es_threshold, "easy-sample difficulty cutoff")
            ->capture_default_str();
        cmd->add_option("--threads", hyper.threads, "worker threads per run (0 = auto)")
            ->capture_default_str();
        cmd->add_option("--conf-threshold", decode.conf_threshold,
                        "decode confidence threshold")
            ->capture_default_str();
        cmd->add_option("--nms-iou", decode.nms_iou, "decode NMS IoU")->capture_default_str();
        cmd->add_option("--weight-source", weight_source,
                        "fresh-per-batch | cached-previous-epoch")
            ->capture_default_str();
    }

    cpl::WeightSource source() const {
        if (weight_source == "fresh-per-batch") return cpl::WeightSource::FreshPerBatch;
        if (weight_source == "cached-previous-epoch")
            return cpl::WeightSource::CachedPreviousEpoch;
        cpl::fail("unknown --weight-source '" + weight_source + "'");
    }

    void finalize(int parallel_runs) {
        if (hyper.threads <= 0) {
            unsigned hw = std::max(1u, std::thread::hardware_concurrency());
            hyper.threads = std::max(1, static_cast<int>(hw) / std::max(1, parallel_runs));
        }
    }
};

void print_effective(const std::string& cmd, const HyperFlags& hf, const json& extra) {
    json j = json::parse(cpl::hyper_json(hf.hyper, hf.decode, hf.source()));
    for (auto& [k, v] : extra.items()) j[k] = v;
    std::cout << "[cpl " << cmd << "] effective config: " << j.dump() << "\n";
}

cpl::SceneConfig preset_config(const std::string& preset, uint64_t seed, int size, int stack) {
    cpl::SceneConfig c;
    c.height = size;
    c.width = size;
    c.seed = seed;
    c.temporal_stack = stack;
    if (preset == "default") {
        // the full parameter spread; difficulty covers both tails
    } else if (preset == "easy") {
        c.contrast_lo = 0.6f;
        c.contrast_hi = 1.0f;
        c.radius_lo = 4.0f;
        c.radius_hi = 8.0f;
    } else if (preset == "hard-mix") {
        c.contrast_lo = 0.45f;
        c.contrast_hi = 1.0f;
        c.radius_lo = 4.0f;
        c.radius_hi = 8.0f;
        c.clutter_blob_count = 6;
        c.hard_mix = cpl::HardMix{};
    } else {
        cpl::fail("unknown preset '" + preset + "' (expected default, easy or hard-mix)");
    }
    return c;
}

// The test split keeps the visual mixture but never jitters labels, so the
// evaluation compares against clean ground truth.
cpl::SceneConfig test_variant(const cpl::SceneConfig& train_cfg) {
    cpl::SceneConfig c = train_cfg;
    c.label_noise_prob = 0.0;
    if (c.hard_mix) c.hard_mix->jitter_ultra = false; // same visuals, clean labels
    return c;
}

int cmd_gen(const std::string& out, int scenes, int test_scenes, uint64_t seed,
            const std::string& preset, int size, int stack) {
    cpl::SceneConfig cfg = preset_config(preset, seed, size, stack);
    json extra{{"out", out}, {"scenes", scenes}, {"test_scenes", test_scenes},
               {"seed", seed}, {"preset", preset}};
    std::cout << "[cpl gen] effective config: " << extra.dump() << "\n";

    cpl::Dataset train = cpl::generate_dataset(cfg, scenes, cpl::seed_hash(seed, 1), "train");
    std::vector<std::pair<std::string, const cpl::Dataset*>> splits{{"train", &train}};
    std::optional<cpl::Dataset> test;
    if (test_scenes > 0) {
        cpl::Dataset t =
            cpl::generate_dataset(test_variant(cfg), test_scenes, cpl::seed_hash(seed, 2), "test");
        test = std::move(t);
        splits.push_back({"test", &*test});
    }
    cpl::write_split(out, train);
    if (test) cpl::write_split(out, *test);
    cpl::write_manifest(out, cfg, splits, preset);
    std::cout << "[cpl gen] wrote " << scenes << " train scenes"
              << (test ? " and " + std::to_string(test_scenes) + " test scenes" : "") << " to "
              << out << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& out, const std::string& strategy,
              const std::string& prior, uint64_t seed, HyperFlags& hf, bool plots) {
    hf.finalize(1);
    print_effective("train", hf,
                    json{{"data", data}, {"out", out}, {"strategy", strategy},
                         {"prior", prior}, {"seed", seed}});

    cpl::require(prior == "esp" || prior == "asp", "--prior must be esp or asp");
    cpl::PriorKind pk = prior == "asp" ? cpl::PriorKind::ASP : cpl::PriorKind::ESP;
    cpl::StrategySel sel = cpl::parse_strategy(strategy, pk);

    cpl::Dataset train = cpl::read_split(data, "train");
    std::optional<cpl::Dataset> test;
    if (fs::exists(fs::path(data) / "test")) test = cpl::read_split(data, "test");

    cpl::CompareConfig cc;
    cc.train = &train;
    cc.test = test ? &*test : nullptr;
    cc.hyper = hf.hyper;
    cc.decode = hf.decode;
    cc.weight_source = hf.source();
    cc.out_dir = out;
    cc.plots = plots;

    cpl::RunRecord rec = cpl::execute_run(cc, sel, seed, out);
    if (!rec.error.empty()) {
        json err{{"error", rec.error}, {"strategy", sel.display()}, {"seed", seed}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    std::cout << "[cpl train] " << sel.display() << " seed " << seed << " finished in "
              << rec.wall_seconds << " s; artifacts in " << out << "\n";
    if (test)
        std::cout << "[cpl train] test AP50 " << rec.eval.ap50 << " AP75 " << rec.eval.ap75
                  << " AP " << rec.eval.ap << " FDR " << rec.eval.fdr << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& split,
             const std::string& model, const std::string& out, HyperFlags& hf, bool plots) {
    hf.finalize(1);
    print_effective("eval", hf,
                    json{{"checkpoint", checkpoint}, {"data", data}, {"split", split},
                         {"model", model}, {"out", out}});
    cpl::require(model == "f" || model == "g", "--model must be f or g");

    fs::path ckpt = checkpoint;
    if (fs::is_directory(ckpt)) ckpt /= "model_" + model + ".ckpt";
    cpl::LoadedCheckpoint loaded = cpl::load_checkpoint(ckpt);

    cpl::Dataset test = cpl::read_split(data, split);
    cpl::EvalResult eval = cpl::evaluate(loaded.weights, test, hf.decode, hf.hyper.threads);

    json j;
    j["checkpoint"] = ckpt.string();
    j["strategy"] = loaded.meta.strategy;
    j["epoch"] = loaded.meta.epoch;
    j["split"] = split;
    j["decode"] = {{"conf_threshold", hf.decode.conf_threshold}, {"nms_iou", hf.decode.nms_iou}};
    j["eval"] = {{"ap50", eval.ap50},
                 {"ap75", eval.ap75},
                 {"ap", eval.ap},
                 {"fdr", eval.fdr},
                 {"ap_per_threshold", eval.ap_per_threshold}};
    j["binary_fnv"] = cpl::binary_checksum();

    if (out.empty()) {
        std::cout << j.dump(2) << "\n";
    } else {
        std::ofstream os(out);
        cpl::require(bool(os), "eval: cannot write " + out);
        os << j.dump(2) << "\n";
        std::cout << "[cpl eval] AP50 " << eval.ap50 << " AP75 " << eval.ap75 << " AP " << eval.ap
                  << " FDR " << eval.fdr << " -> " << out << "\n";
        if (plots) {
            std::vector<std::pair<double, double>> pr;
            for (const cpl::PrPoint& p : eval.pr50) pr.push_back({p.recall, p.precision});
            fs::path svg = fs::path(out).replace_extension(".pr50.svg");
            cpl::write_svg_curve(svg, "PR @ IoU 0.5", "recall", "precision", pr);
        }
    }
    return 0;
}

int cmd_compare(const std::string& data, const std::string& strategies, const std::string& prior,
                const std::string& seeds_csv, const std::string& out, HyperFlags& hf,
                bool plots) {
    int matrix_workers = cpl::env_max_parallel_runs();
    hf.finalize(matrix_workers);
    print_effective("compare", hf,
                    json{{"data", data}, {"strategies", strategies}, {"prior", prior},
                         {"seeds", seeds_csv}, {"out", out},
                         {"parallel_runs", matrix_workers}});

    cpl::PriorKind pk = prior == "asp" ? cpl::PriorKind::ASP : cpl::PriorKind::ESP;
    cpl::require(prior == "esp" || prior == "asp" || prior == "both",
                 "--prior must be esp, asp or both");

    std::vector<cpl::StrategySel> sels;
    if (prior == "both") {
        for (const auto& s : cpl::parse_strategies(strategies, cpl::PriorKind::ESP)) {
            sels.push_back(s);
            if (s.kind != cpl::StrategyKind::AS && s.kind != cpl::StrategyKind::ES) {
                cpl::StrategySel asp = s;
                asp.prior = cpl::PriorKind::ASP;
                sels.push_back(asp);
            }
        }
    } else {
        sels = cpl::parse_strategies(strategies, pk);
    }

    std::vector<uint64_t> seeds;
    for (size_t start = 0; start <= seeds_csv.size();) {
        size_t comma = seeds_csv.find(',', start);
        std::string tok = seeds_csv.substr(
            start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!tok.empty()) seeds.push_back(std::stoull(tok));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    cpl::require(!seeds.empty(), "--seeds must list at least one seed");

    cpl::Dataset train = cpl::read_split(data, "train");
    cpl::Dataset test = cpl::read_split(data, "test");

    cpl::CompareConfig cc;
    cc.train = &train;
    cc.test = &test;
    cc.strategies = sels;
    cc.seeds = seeds;
    cc.hyper = hf.hyper;
    cc.decode = hf.decode;
    cc.weight_source = hf.source();
    cc.out_dir = out;
    cc.plots = plots;
    cc.max_parallel_runs = matrix_workers;

    std::vector<cpl::RunRecord> runs = cpl::run_matrix(cc);
    cpl::write_compare_report(cc, runs);

    int failures = 0;
    for (const cpl::RunRecord& r : runs) {
        std::cout << "[cpl compare] " << r.sel.display() << " (" << r.sel.prior_label()
                  << ") seed " << r.seed;
        if (r.error.empty())
            std::cout << ": AP50 " << r.eval.ap50 << " FDR " << r.eval.fdr << " ("
                      << r.wall_seconds << " s)\n";
        else {
            std::cout << ": FAILED: " << r.error << "\n";
            ++failures;
        }
    }
    std::cout << "[cpl compare] report written to " << out << "/compare.{json,csv,md}\n";
    return failures == 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic flying-object detector lab: dataset generation, curriculum "
                 "training strategies, VOC evaluation"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    std::string gen_out = "dataset";
    int gen_scenes = 100, gen_test = 0, gen_size = 64, gen_stack = 1;
    uint64_t gen_seed = 1;
    std::string gen_preset = "default";
    gen->add_option("--out", gen_out, "output directory")->capture_default_str();
    gen->add_option("--scenes", gen_scenes, "train scene count")->capture_default_str();
    gen->add_option("--test-scenes", gen_test, "test scene count (0 = none)")
        ->capture_default_str();
    gen->add_option("--seed", gen_seed, "dataset seed")->capture_default_str();
    gen->add_option("--preset", gen_preset, "default | easy | hard-mix")->capture_default_str();
    gen->add_option("--size", gen_size, "image side length")->capture_default_str();
    gen->add_option("--stack", gen_stack, "channel stack (1 or 3)")->capture_default_str();

    // train
    auto* train = app.add_subcommand("train", "train one strategy on a dataset");
    std::string tr_data, tr_out = "run", tr_strategy = "as", tr_prior = "esp";
    uint64_t tr_seed = 1;
    bool tr_plots = false;
    HyperFlags tr_hf;
    train->add_option("--data", tr_data, "dataset directory")->required();
    train->add_option("--out", tr_out, "output directory")->capture_default_str();
    train->add_option("--strategy", tr_strategy,
                      "as | es | spl-bh | spl-bline | spl-blog | spl-bpoly | spl-bc | cpl-bc")
        ->capture_default_str();
    train->add_option("--prior", tr_prior, "esp | asp")->capture_default_str();
    train->add_option("--seed", tr_seed, "run seed")->capture_default_str();
    train->add_flag("--plots", tr_plots, "emit SVG plots");
    tr_hf.attach(train);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    std::string ev_ckpt, ev_data, ev_split = "test", ev_model = "f", ev_out;
    bool ev_plots = false;
    HyperFlags ev_hf;
    eval->add_option("--checkpoint", ev_ckpt, "checkpoint file or run directory")->required();
    eval->add_option("--data", ev_data, "dataset directory")->required();
    eval->add_option("--split", ev_split, "dataset split")->capture_default_str();
    eval->add_option("--model", ev_model, "f | g (for co-paced runs)")->capture_default_str();
    eval->add_option("--out", ev_out, "report path (stdout when empty)");
    eval->add_flag("--plots", ev_plots, "emit PR curve SVG");
    ev_hf.attach(eval);

    // compare
    auto* compare = app.add_subcommand("compare", "run a strategy x seed comparison matrix");
    std::string cp_data, cp_strategies = "as,es,spl-bc,cpl-bc", cp_prior = "esp",
                cp_seeds = "1,2,3", cp_out = "compare";
    bool cp_plots = false;
    HyperFlags cp_hf;
    compare->add_option("--data", cp_data, "dataset directory")->required();
    compare->add_option("--strategies", cp_strategies, "comma-separated strategy list")
        ->capture_default_str();
    compare->add_option("--prior", cp_prior, "esp | asp | both")->capture_default_str();
    compare->add_option("--seeds", cp_seeds, "comma-separated seed list")->capture_default_str();
    compare->add_option("--out", cp_out, "output directory")->capture_default_str();
    compare->add_flag("--plots", cp_plots, "emit SVG plots");
    cp_hf.attach(compare);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen(gen_out, gen_scenes, gen_test, gen_seed, gen_preset, gen_size,
                           gen_stack);
        if (train->parsed())
            return cmd_train(tr_data, tr_out, tr_strategy, tr_prior, tr_seed, tr_hf, tr_plots);
        if (eval->parsed())
            return cmd_eval(ev_ckpt, ev_data, ev_split, ev_model, ev_out, ev_hf, ev_plots);
        if (compare->parsed())
            return cmd_compare(cp_data, cp_strategies, cp_prior, cp_seeds, cp_out, cp_hf,
                               cp_plots);
    } catch (const std::exception& e) {
        nlohmann::json err{{"error", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 0;
}
