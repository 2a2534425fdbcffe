#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cpl/curriculum.hpp"
#include "cpl/metrics.hpp"

namespace cpl {

// One row of the strategy x prior comparison matrix.
struct StrategySel {
    StrategyKind kind = StrategyKind::AS;
    MinimizerSpec minimizer{MinKind::Hard};
    PriorKind prior = PriorKind::ESP;

    std::string display() const { return strategy_name(kind, minimizer); }
    std::string prior_label() const {
        if (kind == StrategyKind::AS || kind == StrategyKind::ES) return "-";
        return prior == PriorKind::ESP ? "ESP" : "ASP";
    }
};

// Accepts the paper's row tokens: as, es, spl-bh, spl-bline, spl-blog,
// spl-bpoly, spl-bc, cpl-bc.
StrategySel parse_strategy(const std::string& token, PriorKind prior);
std::vector<StrategySel> parse_strategies(const std::string& csv, PriorKind prior);

struct RunRecord {
    StrategySel sel;
    uint64_t seed = 0;
    EvalResult eval;
    double wall_seconds = 0;
    std::string error; // nonempty when the run failed
    std::filesystem::path run_dir;
    std::vector<TraceRow> trace;
};

struct Aggregate {
    std::string strategy;
    std::string prior;
    int n = 0;
    float ap50_mean = 0, ap50_std = 0;
    float ap75_mean = 0, ap75_std = 0;
    float ap_mean = 0, ap_std = 0;
    float fdr_mean = 0, fdr_std = 0;
};

struct CompareConfig {
    const Dataset* train = nullptr;
    const Dataset* test = nullptr;
    std::vector<StrategySel> strategies;
    std::vector<uint64_t> seeds;
    Hyper hyper;
    DecodeParams decode;
    WeightSource weight_source = WeightSource::FreshPerBatch;
    std::filesystem::path out_dir;
    bool plots = false;
    int max_parallel_runs = 1; // CPL_THREADS caps this
};

// Trains one (strategy, seed) cell, writes checkpoints + trace + report
// fragment into run_dir, and evaluates on the test split when one is given.
RunRecord execute_run(const CompareConfig& config, const StrategySel& sel, uint64_t seed,
                      const std::filesystem::path& run_dir);

// compare layout: out_dir/<strategy>_<prior>/seed<k>/
std::filesystem::path matrix_run_dir(const std::filesystem::path& out_dir,
                                     const StrategySel& sel, uint64_t seed);

// Full matrix with a worker pool; failures are recorded and the matrix
// continues.
std::vector<RunRecord> run_matrix(const CompareConfig& config);

std::vector<Aggregate> aggregate_runs(const std::vector<RunRecord>& runs);

// compare.json + compare.csv + compare.md under out_dir
void write_compare_report(const CompareConfig& config, const std::vector<RunRecord>& runs);

// Canonical paper row order: AS, ES, SPL-BH, SPL-BLine, SPL-BLog, SPL-BPoly,
// SPL-BC, CPL-BC.
int strategy_rank(const std::string& display_name);

// Effective-config echo (also hashed into every report).
std::string hyper_json(const Hyper& hyper, const DecodeParams& decode, WeightSource ws);

uint64_t binary_checksum(); // FNV-1a of the running executable, 0 if unreadable

int env_max_parallel_runs(); // reads CPL_THREADS, default 1

} // namespace cpl
