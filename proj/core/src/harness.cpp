#include "cpl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "cpl/checkpoint.hpp"
#include "cpl/error.hpp"
#include "cpl/svg.hpp"

namespace cpl {

namespace fs = std::filesystem;
using nlohmann::json;

StrategySel parse_strategy(const std::string& token, PriorKind prior) {
    StrategySel sel;
    sel.prior = prior;
    if (token == "as") sel.kind = StrategyKind::AS;
    else if (token == "es") sel.kind = StrategyKind::ES;
    else if (token == "spl-bh") { sel.kind = StrategyKind::SplLoss; sel.minimizer = {MinKind::Hard}; }
    else if (token == "spl-bline") { sel.kind = StrategyKind::SplLoss; sel.minimizer = {MinKind::Linear}; }
    else if (token == "spl-blog") { sel.kind = StrategyKind::SplLoss; sel.minimizer = {MinKind::Logarithmic}; }
    else if (token == "spl-bpoly") { sel.kind = StrategyKind::SplLoss; sel.minimizer = {MinKind::Polynomial, 2.0}; }
    else if (token == "spl-bc") sel.kind = StrategyKind::SplBC;
    else if (token == "cpl-bc") sel.kind = StrategyKind::CplBC;
    else fail("unknown strategy '" + token +
              "' (expected one of as, es, spl-bh, spl-bline, spl-blog, spl-bpoly, spl-bc, cpl-bc)");
    return sel;
}

std::vector<StrategySel> parse_strategies(const std::string& csv, PriorKind prior) {
    std::vector<StrategySel> out;
    size_t start = 0;
    while (start <= csv.size()) {
        size_t comma = csv.find(',', start);
        std::string tok = csv.substr(start, comma == std::string::npos ? std::string::npos
                                                                       : comma - start);
        if (!tok.empty()) out.push_back(parse_strategy(tok, prior));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    require(!out.empty(), "no strategies given");
    return out;
}

int strategy_rank(const std::string& name) {
    static const std::vector<std::string> order{"AS",       "ES",     "SPL-BH", "SPL-BLine",
                                                "SPL-BLog", "SPL-BPoly", "SPL-BC", "CPL-BC"};
    for (size_t i = 0; i < order.size(); ++i)
        if (order[i] == name) return static_cast<int>(i);
    return static_cast<int>(order.size());
}

std::string hyper_json(const Hyper& h, const DecodeParams& d, WeightSource ws) {
    json j;
    j["t0"] = h.t0;
    j["t1"] = h.t1;
    j["batch"] = h.batch;
    j["lr"] = h.lr;
    j["lr_decay"] = h.lr_decay;
    j["alpha"] = h.alpha;
    j["n_fixed"] = h.n_fixed;
    j["xi0"] = h.schedule.xi0;
    j["e1"] = h.schedule.e1;
    j["e2"] = h.schedule.e2;
    j["q_start"] = h.schedule.q_start;
    j["q_end"] = h.schedule.q_end;
    j["m"] = h.m;
    j["es_threshold"] = h.es_threshold;
    j["conf_agg"] = h.conf_agg == ConfAgg::Max ? "max" : "mean";
    j["threads"] = h.threads;
    j["conf_threshold"] = d.conf_threshold;
    j["nms_iou"] = d.nms_iou;
    j["weight_source"] = ws == WeightSource::FreshPerBatch ? "fresh-per-batch"
                                                           : "cached-previous-epoch";
    return j.dump();
}

uint64_t binary_checksum() {
    std::ifstream is("/proc/self/exe", std::ios::binary);
    if (!is) return 0;
    uint64_t h = 14695981039346656037ULL;
    char buf[1 << 16];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        h = fnv1a(buf, static_cast<size_t>(is.gcount()), h);
        if (!is) break;
    }
    return h;
}

int env_max_parallel_runs() {
    const char* env = std::getenv("CPL_THREADS");
    if (!env) return 1;
    int v = std::atoi(env);
    return v >= 1 ? v : 1;
}

namespace {

json eval_json(const EvalResult& e) {
    json j;
    j["ap50"] = e.ap50;
    j["ap75"] = e.ap75;
    j["ap"] = e.ap;
    j["fdr"] = e.fdr;
    j["ap_per_threshold"] = e.ap_per_threshold;
    return j;
}

std::string seed_dir_name(uint64_t seed) { return "seed" + std::to_string(seed); }

std::string sel_dir_name(const StrategySel& sel) {
    std::string s = sel.display();
    for (char& c : s) c = c == '-' ? '_' : static_cast<char>(std::tolower(c));
    if (sel.prior_label() != "-") s += sel.prior == PriorKind::ESP ? "_esp" : "_asp";
    return s;
}

} // namespace

std::filesystem::path matrix_run_dir(const std::filesystem::path& out_dir, const StrategySel& sel,
                                     uint64_t seed) {
    return out_dir / sel_dir_name(sel) / seed_dir_name(seed);
}

RunRecord execute_run(const CompareConfig& config, const StrategySel& sel, uint64_t seed,
                      const std::filesystem::path& run_dir) {
    RunRecord rec;
    rec.sel = sel;
    rec.seed = seed;
    rec.run_dir = run_dir;

    auto t_start = std::chrono::steady_clock::now();
    try {
        fs::create_directories(rec.run_dir);

        StrategyConfig sc;
        sc.kind = sel.kind;
        sc.minimizer = sel.minimizer;
        sc.prior = sel.prior;
        sc.weight_source = config.weight_source;
        sc.seed = seed;

        TrainResult tr = run_strategy(sc, *config.train, config.hyper);
        rec.trace = tr.trace;

        CheckpointMeta meta;
        meta.strategy = sel.display();
        meta.epoch = tr.epochs_run;
        save_checkpoint(rec.run_dir / "model_f.ckpt", tr.model_f, tr.adam_f, meta);
        if (tr.model_g)
            save_checkpoint(rec.run_dir / "model_g.ckpt", *tr.model_g, *tr.adam_g, meta);
        write_trace_csv((rec.run_dir / "trace.csv").string(), tr.trace);

        if (config.test)
            rec.eval = evaluate(tr.model_f, *config.test, config.decode, config.hyper.threads);

        if (config.plots) {
            if (config.test) {
                std::vector<std::pair<double, double>> pr;
                for (const PrPoint& p : rec.eval.pr50) pr.push_back({p.recall, p.precision});
                write_svg_curve(rec.run_dir / "pr50.svg", sel.display() + " PR @ IoU 0.5",
                                "recall", "precision", pr);
            }
            std::vector<std::pair<double, double>> xi;
            for (const TraceRow& r : tr.trace)
                if (r.stage == "strategy" && r.threshold) xi.push_back({r.ep, *r.threshold});
            write_svg_curve(rec.run_dir / "xi_schedule.svg", "threshold vs training progress",
                            "EP", "xi", xi);
        }
    } catch (const std::exception& e) {
        rec.error = e.what();
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

    // per-run report fragment
    json j;
    j["strategy"] = sel.display();
    j["prior"] = sel.prior_label();
    j["seed"] = seed;
    j["hyper"] = json::parse(hyper_json(config.hyper, config.decode, config.weight_source));
    j["wall_seconds"] = rec.wall_seconds;
    j["binary_fnv"] = binary_checksum();
    j["config_fnv"] = fnv1a(j["hyper"].dump().data(), j["hyper"].dump().size());
    if (rec.error.empty()) {
        if (config.test) j["eval"] = eval_json(rec.eval);
        j["trace_csv"] = "trace.csv";
        j["checkpoints"] = sel.kind == StrategyKind::CplBC
                               ? json::array({"model_f.ckpt", "model_g.ckpt"})
                               : json::array({"model_f.ckpt"});
    } else {
        j["error"] = rec.error;
    }
    std::error_code ec;
    fs::create_directories(rec.run_dir, ec);
    std::ofstream os(rec.run_dir / "report.json");
    if (os) os << j.dump(2) << "\n";
    return rec;
}

std::vector<RunRecord> run_matrix(const CompareConfig& config) {
    struct Cell {
        StrategySel sel;
        uint64_t seed;
    };
    std::vector<Cell> cells;
    for (const StrategySel& sel : config.strategies)
        for (uint64_t seed : config.seeds) cells.push_back({sel, seed});

    std::vector<RunRecord> records(cells.size());
    int workers = std::max(1, std::min<int>(config.max_parallel_runs,
                                            static_cast<int>(cells.size())));
    std::atomic<size_t> next{0};
    auto runner = [&]() {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            records[i] = execute_run(config, cells[i].sel, cells[i].seed,
                                     matrix_run_dir(config.out_dir, cells[i].sel, cells[i].seed));
        }
    };
    if (workers == 1) {
        runner();
    } else {
        std::vector<std::thread> pool;
        for (int t = 1; t < workers; ++t) pool.emplace_back(runner);
        runner();
        for (auto& th : pool) th.join();
    }
    return records;
}

std::vector<Aggregate> aggregate_runs(const std::vector<RunRecord>& runs) {
    std::vector<Aggregate> out;
    for (const RunRecord& r : runs) {
        if (!r.error.empty()) continue;
        std::string key_s = r.sel.display(), key_p = r.sel.prior_label();
        Aggregate* agg = nullptr;
        for (Aggregate& a : out)
            if (a.strategy == key_s && a.prior == key_p) agg = &a;
        if (!agg) {
            out.push_back({key_s, key_p});
            agg = &out.back();
        }
        ++agg->n;
    }
    auto fill = [&](Aggregate& a, auto metric_of) {
        std::vector<float> vals;
        for (const RunRecord& r : runs)
            if (r.error.empty() && r.sel.display() == a.strategy &&
                r.sel.prior_label() == a.prior)
                vals.push_back(metric_of(r.eval));
        float mean = 0;
        for (float v : vals) mean += v;
        mean /= vals.empty() ? 1.0f : static_cast<float>(vals.size());
        float var = 0;
        for (float v : vals) var += (v - mean) * (v - mean);
        float sd = vals.size() > 1 ? std::sqrt(var / static_cast<float>(vals.size() - 1)) : 0.0f;
        return std::make_pair(mean, sd);
    };
    for (Aggregate& a : out) {
        std::tie(a.ap50_mean, a.ap50_std) = fill(a, [](const EvalResult& e) { return e.ap50; });
        std::tie(a.ap75_mean, a.ap75_std) = fill(a, [](const EvalResult& e) { return e.ap75; });
        std::tie(a.ap_mean, a.ap_std) = fill(a, [](const EvalResult& e) { return e.ap; });
        std::tie(a.fdr_mean, a.fdr_std) = fill(a, [](const EvalResult& e) { return e.fdr; });
    }
    std::sort(out.begin(), out.end(), [](const Aggregate& a, const Aggregate& b) {
        int ra = strategy_rank(a.strategy), rb = strategy_rank(b.strategy);
        if (ra != rb) return ra < rb;
        return a.prior < b.prior; // ESP above ASP, matching the paper tables
    });
    return out;
}

void write_compare_report(const CompareConfig& config, const std::vector<RunRecord>& runs) {
    fs::create_directories(config.out_dir);
    std::vector<Aggregate> aggs = aggregate_runs(runs);

    json j;
    std::string hj = hyper_json(config.hyper, config.decode, config.weight_source);
    j["hyper"] = json::parse(hj);
    j["config_fnv"] = fnv1a(hj.data(), hj.size());
    j["seeds"] = config.seeds;
    j["binary_fnv"] = binary_checksum();
    j["runs"] = json::array();
    for (const RunRecord& r : runs) {
        json jr;
        jr["strategy"] = r.sel.display();
        jr["prior"] = r.sel.prior_label();
        jr["seed"] = r.seed;
        jr["wall_seconds"] = r.wall_seconds;
        jr["dir"] = r.run_dir.string();
        if (r.error.empty())
            jr["eval"] = eval_json(r.eval);
        else
            jr["error"] = r.error;
        j["runs"].push_back(jr);
    }
    j["aggregates"] = json::array();
    for (const Aggregate& a : aggs) {
        j["aggregates"].push_back({{"strategy", a.strategy},
                                   {"prior", a.prior},
                                   {"n", a.n},
                                   {"ap50", {{"mean", a.ap50_mean}, {"std", a.ap50_std}}},
                                   {"ap75", {{"mean", a.ap75_mean}, {"std", a.ap75_std}}},
                                   {"ap", {{"mean", a.ap_mean}, {"std", a.ap_std}}},
                                   {"fdr", {{"mean", a.fdr_mean}, {"std", a.fdr_std}}}});
    }
    {
        std::ofstream os(config.out_dir / "compare.json");
        require(bool(os), "compare: cannot write compare.json");
        os << j.dump(2) << "\n";
    }
    {
        std::ofstream os(config.out_dir / "compare.csv");
        require(bool(os), "compare: cannot write compare.csv");
        os << "strategy,prior,seed,ap50,ap75,ap,fdr,wall_seconds,error\n";
        for (const RunRecord& r : runs) {
            os << r.sel.display() << ',' << r.sel.prior_label() << ',' << r.seed << ',';
            if (r.error.empty())
                os << r.eval.ap50 << ',' << r.eval.ap75 << ',' << r.eval.ap << ',' << r.eval.fdr;
            else
                os << ",,,";
            os << ',' << r.wall_seconds << ',' << r.error << '\n';
        }
    }
    {
        std::ofstream os(config.out_dir / "compare.md");
        require(bool(os), "compare: cannot write compare.md");
        os << "| Training strategy | Prior type | AP50 | AP75 | AP | FDR |\n";
        os << "|---|---|---|---|---|---|\n";
        char buf[64];
        auto cell = [&](float mean, float sd) {
            std::snprintf(buf, sizeof(buf), "%.3f (%.3f)", mean, sd);
            return std::string(buf);
        };
        for (const Aggregate& a : aggs) {
            os << "| " << a.strategy << " | " << a.prior << " | " << cell(a.ap50_mean, a.ap50_std)
               << " | " << cell(a.ap75_mean, a.ap75_std) << " | " << cell(a.ap_mean, a.ap_std)
               << " | " << cell(a.fdr_mean, a.fdr_std) << " |\n";
        }
    }
}

} // namespace cpl
