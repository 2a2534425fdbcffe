#include "cpl/curriculum.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "cpl/error.hpp"
#include "cpl/rng.hpp"

namespace cpl {

// ---------------------------------------------------------------------------
// minimizer functions (Table-1 closed forms plus the confidence-based one)

double minimizer_value(const MinimizerSpec& spec, double threshold, double statistic) {
    CPL_REQUIRE(std::isfinite(statistic), "minimizer_value: statistic must be finite");
    switch (spec.kind) {
        case MinKind::Hard:
            require(statistic >= 0.0, "minimizer_value: loss must be >= 0");
            return statistic < threshold ? 1.0 : 0.0;
        case MinKind::Linear:
            require(statistic >= 0.0, "minimizer_value: loss must be >= 0");
            return statistic < threshold ? 1.0 - statistic / threshold : 0.0;
        case MinKind::Logarithmic: {
            require(threshold > 0.0 && threshold < 1.0,
                    "minimizer_value: Logarithmic requires 0 < lambda < 1");
            require(statistic >= 0.0, "minimizer_value: loss must be >= 0");
            if (!(statistic < threshold)) return 0.0;
            double zeta = 1.0 - threshold;
            return std::log(statistic + zeta) / std::log(zeta);
        }
        case MinKind::Polynomial: {
            require(spec.t > 1.0, "minimizer_value: Polynomial requires t > 1");
            require(statistic >= 0.0, "minimizer_value: loss must be >= 0");
            if (!(statistic < threshold)) return 0.0;
            return std::pow(1.0 - statistic / threshold, 1.0 / (spec.t - 1.0));
        }
        case MinKind::ConfidenceBased: {
            require(spec.m >= 1, "minimizer_value: ConfidenceBased requires m >= 1");
            require(statistic >= 0.0 && statistic <= 1.0,
                    "minimizer_value: confidence must lie in [0,1]");
            if (!(statistic > threshold)) return 0.0;
            return std::pow(statistic, 1.0 / static_cast<double>(spec.m));
        }
    }
    fail("minimizer_value: unknown kind");
}

// ---------------------------------------------------------------------------
// training schedule

namespace {

void check_schedule(const ScheduleSpec& s) {
    // e1 == e2 is the degenerate constant-then-zero schedule used by tests
    require(s.e1 >= 0.0 && s.e1 <= s.e2 && s.e2 <= 1.0, "schedule: need 0 <= e1 <= e2 <= 1");
    require(s.xi0 > 0.0 && s.xi0 <= 1.0, "schedule: xi0 must lie in (0,1]");
}

} // namespace

double schedule_xi(const ScheduleSpec& s, double ep) {
    check_schedule(s);
    require(ep >= 0.0 && ep <= 1.0, "schedule_xi: EP outside [0,1]");
    if (ep < s.e1) return s.xi0;
    if (ep >= s.e2) return 0.0;
    // ratio first so xi(e1) == xi0 bit-exactly
    return s.xi0 * ((s.e2 - ep) / (s.e2 - s.e1));
}

double schedule_quantile(const ScheduleSpec& s, double ep) {
    check_schedule(s);
    require(ep >= 0.0 && ep <= 1.0, "schedule_quantile: EP outside [0,1]");
    if (ep < s.e1) return s.q_start;
    if (ep >= s.e2) return s.q_end;
    return s.q_start + (s.q_end - s.q_start) * ((ep - s.e1) / (s.e2 - s.e1));
}

double quantile_lambda(std::vector<double> losses, double q) {
    require(!losses.empty(), "quantile_lambda: no losses");
    require(q >= 0.0 && q <= 1.0, "quantile_lambda: q outside [0,1]");
    std::sort(losses.begin(), losses.end());
    size_t n = losses.size();
    // admitting l < lambda keeps ceil(q*n) samples when values are distinct
    size_t k = static_cast<size_t>(std::ceil(q * static_cast<double>(n))) + 1;
    if (k > n) {
        double top = losses.back();
        return top + std::max(1e-9, std::fabs(top) * 1e-3);
    }
    double lam = losses[k - 1];
    if (lam <= 0.0) lam = 1e-9;
    return lam;
}

// ---------------------------------------------------------------------------
// per-object confidence and cross weights

double object_confidence(const ModelOutput& output, const AnchorAssignment& assignment,
                         int object_index, ConfAgg agg) {
    require(object_index >= 0 &&
                object_index < static_cast<int>(assignment.per_object.size()),
            "object_confidence: object index out of range");
    const auto& anchors = assignment.per_object[object_index];
    require(!anchors.empty(), "object_confidence: object has no positive anchors");
    const float* conf = output.conf_map.data();
    if (agg == ConfAgg::Max) {
        float best = 0.0f;
        for (int32_t flat : anchors) best = std::max(best, conf[flat]);
        return best;
    }
    double acc = 0.0;
    for (int32_t flat : anchors) acc += conf[flat];
    return acc / static_cast<double>(anchors.size());
}

std::vector<double> cross_weights(const std::vector<double>& peer_confidences, double xi, int m) {
    MinimizerSpec spec{MinKind::ConfidenceBased, 2.0, m};
    std::vector<double> out;
    out.reserve(peer_confidences.size());
    for (double c : peer_confidences) out.push_back(minimizer_value(spec, xi, c));
    return out;
}

std::string strategy_name(StrategyKind kind, const MinimizerSpec& minimizer) {
    switch (kind) {
        case StrategyKind::AS: return "AS";
        case StrategyKind::ES: return "ES";
        case StrategyKind::SplBC: return "SPL-BC";
        case StrategyKind::CplBC: return "CPL-BC";
        case StrategyKind::SplLoss:
            switch (minimizer.kind) {
                case MinKind::Hard: return "SPL-BH";
                case MinKind::Linear: return "SPL-BLine";
                case MinKind::Logarithmic: return "SPL-BLog";
                case MinKind::Polynomial: return "SPL-BPoly";
                default: return "SPL-B?";
            }
    }
    return "?";
}

uint64_t default_init_seed_f(uint64_t run_seed) { return seed_hash(run_seed, 0xF00Dull); }
uint64_t default_init_seed_g(uint64_t run_seed) { return seed_hash(run_seed, 0x6006ull); }

// ---------------------------------------------------------------------------
// training engine

namespace {

constexpr uint64_t kPriorStreamTag = 0x9E1AULL;
constexpr uint64_t kStageStreamTag = 0xC057ULL;

struct ObjectTable {
    std::vector<int> offset; // first flat object id per scene
    int total = 0;
};

ObjectTable build_object_table(const Dataset& data) {
    ObjectTable t;
    t.offset.reserve(data.scenes.size());
    for (const Scene& s : data.scenes) {
        t.offset.push_back(t.total);
        t.total += static_cast<int>(s.gt_boxes.size());
    }
    return t;
}

struct WeightRule {
    enum class Mode { Plain, SelfConf, PeerConf, LossBased, Forced };
    Mode mode = Mode::Plain;
    double threshold = 0.0; // xi or lambda
    MinimizerSpec minimizer{MinKind::ConfidenceBased};
    float forced = 1.0f;
    bool cached = false;    // stats come from the previous epoch's cache
    double loss_norm = 1.0; // Logarithmic pre-normalization divisor
    const std::vector<float>* cache_f = nullptr; // per-object stat from model f
    const std::vector<float>* cache_g = nullptr; // per-object stat from model g
};

struct ImageResult {
    std::vector<std::vector<float>> grads_f, grads_g;
    double loss_f = 0, loss_g = 0;
    std::vector<float> conf_f, conf_g;   // per object
    std::vector<float> lstat_f, lstat_g; // per object: L(A_Fi)/|A_Fi|
    std::vector<float> v_f, v_g;         // weights applied
};

std::vector<std::vector<float>> take_grads(DetectorWeights& w) {
    std::vector<std::vector<float>> out;
    for (Tensor* p : w.params()) {
        if (p->has_grad())
            out.push_back(p->grad());
        else
            out.emplace_back(static_cast<size_t>(p->numel()), 0.0f);
    }
    return out;
}

// Weights for one model on one image. `own`/`peer` are the fresh per-object
// stats from this batch's forwards; flat0 indexes the epoch-level caches.
std::vector<float> weights_for(const WeightRule& rule, char model,
                               const std::vector<float>& own_conf,
                               const std::vector<float>& own_lstat,
                               const std::vector<float>& peer_conf, int flat0, size_t n_objects) {
    std::vector<float> v(n_objects, 1.0f);
    switch (rule.mode) {
        case WeightRule::Mode::Plain:
            return v;
        case WeightRule::Mode::Forced:
            std::fill(v.begin(), v.end(), rule.forced);
            return v;
        case WeightRule::Mode::SelfConf:
        case WeightRule::Mode::PeerConf: {
            const std::vector<float>* cache = nullptr;
            if (rule.cached) {
                bool use_f = (rule.mode == WeightRule::Mode::SelfConf) == (model == 'f');
                cache = use_f ? rule.cache_f : rule.cache_g;
            }
            for (size_t i = 0; i < n_objects; ++i) {
                double stat;
                if (rule.cached) {
                    stat = (*cache)[static_cast<size_t>(flat0) + i];
                } else if (rule.mode == WeightRule::Mode::SelfConf) {
                    stat = own_conf[i];
                } else {
                    stat = peer_conf[i];
                }
                v[i] = static_cast<float>(minimizer_value(rule.minimizer, rule.threshold, stat));
            }
            return v;
        }
        case WeightRule::Mode::LossBased: {
            const std::vector<float>* cache = (model == 'f') ? rule.cache_f : rule.cache_g;
            for (size_t i = 0; i < n_objects; ++i) {
                double stat = rule.cached ? (*cache)[static_cast<size_t>(flat0) + i]
                                          : own_lstat[i];
                stat /= rule.loss_norm;
                v[i] = static_cast<float>(minimizer_value(rule.minimizer, rule.threshold, stat));
            }
            return v;
        }
    }
    return v;
}

ImageResult process_image(const Scene& scene, int flat0, const DetectorWeights& wf,
                          const DetectorWeights* wg, const WeightRule& rule, const Hyper& hyper,
                          int temporal_stack) {
    ImageResult r;
    Tensor input = scene_input(scene, temporal_stack);
    size_t n_obj = scene.gt_boxes.size();

    Tape tape; // one tape carries both models; their parameter sets are disjoint

    DetectorWeights cf = wf.clone();
    ModelOutput out_f = detector_forward(cf, input);
    AnchorAssignment asg = assign_anchors(scene.gt_boxes, out_f.grid_h, out_f.grid_w);
    LossBreakdown bd_f = total_loss(out_f, asg, scene.gt_boxes, hyper.alpha, hyper.n_fixed);
    for (size_t j = 0; j < n_obj; ++j) {
        r.conf_f.push_back(static_cast<float>(
            object_confidence(out_f, asg, static_cast<int>(j), hyper.conf_agg)));
        r.lstat_f.push_back(bd_f.per_object[j].item() /
                            static_cast<float>(asg.per_object[j].size()));
    }

    std::optional<DetectorWeights> cg;
    std::optional<LossBreakdown> bd_g;
    if (wg) {
        cg = wg->clone();
        ModelOutput out_g = detector_forward(*cg, input);
        bd_g = total_loss(out_g, asg, scene.gt_boxes, hyper.alpha, hyper.n_fixed);
        for (size_t j = 0; j < n_obj; ++j) {
            r.conf_g.push_back(static_cast<float>(
                object_confidence(out_g, asg, static_cast<int>(j), hyper.conf_agg)));
            r.lstat_g.push_back(bd_g->per_object[j].item() /
                                static_cast<float>(asg.per_object[j].size()));
        }
    }

    r.v_f = weights_for(rule, 'f', r.conf_f, r.lstat_f, r.conf_g, flat0, n_obj);
    if (wg) r.v_g = weights_for(rule, 'g', r.conf_g, r.lstat_g, r.conf_f, flat0, n_obj);

    Tensor loss_f = rule.mode == WeightRule::Mode::Plain
                        ? bd_f.total
                        : weighted_total_loss(bd_f, r.v_f);
    r.loss_f = loss_f.item();
    Tensor combined = loss_f;
    if (wg) {
        Tensor loss_g = rule.mode == WeightRule::Mode::Plain
                            ? bd_g->total
                            : weighted_total_loss(*bd_g, r.v_g);
        r.loss_g = loss_g.item();
        combined = add(combined, loss_g);
    }

    tape.backward(combined);
    r.grads_f = take_grads(cf);
    if (wg) r.grads_g = take_grads(*cg);
    return r;
}

struct EpochOutcome {
    double mean_loss_f = 0, mean_loss_g = 0;
    int objects_weighted = 0; // model f, nonzero weight
    double weight_sum = 0;    // model f, over all objects seen
    int objects_total = 0;
    // fresh caches for the next epoch, indexed by flat object id
    std::vector<float> conf_f, conf_g, lstat_f, lstat_g;
};

EpochOutcome run_epoch(const Dataset& data, const ObjectTable& table, DetectorWeights& wf,
                       AdamState& opt_f, DetectorWeights* wg, AdamState* opt_g,
                       const WeightRule& rule, const Hyper& hyper, float lr,
                       uint64_t stream_seed, int global_epoch, const TrainObserver* obs) {
    std::vector<int> order(data.scenes.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(stream_seed);
    rng.shuffle(order);

    EpochOutcome oc;
    oc.objects_total = table.total;
    oc.conf_f.assign(static_cast<size_t>(table.total), 0.0f);
    oc.lstat_f.assign(static_cast<size_t>(table.total), 0.0f);
    if (wg) {
        oc.conf_g.assign(static_cast<size_t>(table.total), 0.0f);
        oc.lstat_g.assign(static_cast<size_t>(table.total), 0.0f);
    }

    double loss_acc_f = 0, loss_acc_g = 0;
    size_t n_images = order.size();
    int batch_index = 0;

    for (size_t start = 0; start < n_images; start += static_cast<size_t>(hyper.batch)) {
        size_t end = std::min(n_images, start + static_cast<size_t>(hyper.batch));
        size_t bsize = end - start;
        std::vector<ImageResult> results(bsize);

        auto work = [&](size_t k) {
            int scene_idx = order[start + k];
            results[k] = process_image(data.scenes[scene_idx], table.offset[scene_idx], wf, wg,
                                       rule, hyper, data.config.temporal_stack);
        };
        int nthreads = std::min<int>(std::max(1, hyper.threads), static_cast<int>(bsize));
        if (nthreads <= 1) {
            for (size_t k = 0; k < bsize; ++k) work(k);
        } else {
            std::atomic<size_t> next{0};
            auto runner = [&]() {
                for (;;) {
                    size_t k = next.fetch_add(1);
                    if (k >= bsize) return;
                    work(k);
                }
            };
            std::vector<std::thread> pool;
            for (int t = 1; t < nthreads; ++t) pool.emplace_back(runner);
            runner();
            for (auto& th : pool) th.join();
        }

        // deterministic reduction in batch order
        auto reduce_and_step = [&](DetectorWeights& w, AdamState& opt, bool is_f) {
            std::vector<Tensor*> params = w.params();
            std::vector<std::vector<float>> acc(params.size());
            for (size_t p = 0; p < params.size(); ++p)
                acc[p].assign(static_cast<size_t>(params[p]->numel()), 0.0f);
            for (size_t k = 0; k < bsize; ++k) {
                const auto& grads = is_f ? results[k].grads_f : results[k].grads_g;
                for (size_t p = 0; p < params.size(); ++p)
                    for (size_t j = 0; j < acc[p].size(); ++j) acc[p][j] += grads[p][j];
            }
            float inv = 1.0f / static_cast<float>(bsize);
            for (auto& g : acc)
                for (float& x : g) x *= inv;
            adam_step(params, acc, opt, lr);
        };
        reduce_and_step(wf, opt_f, true);
        if (wg) reduce_and_step(*wg, *opt_g, false);

        // stats, weights bookkeeping, observer
        for (size_t k = 0; k < bsize; ++k) {
            const ImageResult& r = results[k];
            int scene_idx = order[start + k];
            int flat0 = table.offset[scene_idx];
            size_t n_obj = data.scenes[scene_idx].gt_boxes.size();
            for (size_t j = 0; j < n_obj; ++j) {
                oc.conf_f[flat0 + j] = r.conf_f[j];
                oc.lstat_f[flat0 + j] = r.lstat_f[j];
                if (wg) {
                    oc.conf_g[flat0 + j] = r.conf_g[j];
                    oc.lstat_g[flat0 + j] = r.lstat_g[j];
                }
                if (r.v_f[j] > 0.0f) ++oc.objects_weighted;
                oc.weight_sum += r.v_f[j];
            }
            loss_acc_f += r.loss_f;
            loss_acc_g += r.loss_g;
        }
        if (obs && obs->on_batch_weights && rule.mode != WeightRule::Mode::Plain) {
            for (char model : {'f', 'g'}) {
                if (model == 'g' && !wg) continue;
                std::vector<ObjectUid> uids;
                std::vector<float> weights;
                for (size_t k = 0; k < bsize; ++k) {
                    int scene_idx = order[start + k];
                    const auto& v = model == 'f' ? results[k].v_f : results[k].v_g;
                    for (size_t j = 0; j < v.size(); ++j) {
                        uids.push_back({scene_idx, static_cast<int>(j)});
                        weights.push_back(v[j]);
                    }
                }
                obs->on_batch_weights(global_epoch, batch_index, model, uids, weights);
            }
        }
        ++batch_index;
    }

    oc.mean_loss_f = loss_acc_f / static_cast<double>(n_images);
    oc.mean_loss_g = loss_acc_g / static_cast<double>(n_images);
    return oc;
}

float epoch_lr(const Hyper& hyper, int global_epoch) {
    return hyper.lr * std::pow(hyper.lr_decay, static_cast<float>(global_epoch - 1));
}

} // namespace

DetectorWeights run_prior_stage(const DetectorWeights& init, const Dataset& prior_set, int t0,
                                const Hyper& hyper, uint64_t init_seed,
                                std::vector<TraceRow>* trace, AdamState* opt_state) {
    require(t0 >= 1, "run_prior_stage: T0 must be >= 1");
    DetectorWeights w = init.clone();
    AdamState local;
    AdamState& opt = opt_state ? *opt_state : local;
    ObjectTable table = build_object_table(prior_set);
    WeightRule rule; // plain
    if (hyper.force_weight) {
        rule.mode = WeightRule::Mode::Forced;
        rule.forced = *hyper.force_weight;
    }
    for (int e = 1; e <= t0; ++e) {
        EpochOutcome oc;
        try {
            oc = run_epoch(prior_set, table, w, opt, nullptr, nullptr, rule, hyper,
                           epoch_lr(hyper, e), seed_hash(init_seed, kPriorStreamTag, e), e,
                           nullptr);
        } catch (const Error& err) {
            fail("prior stage diverged at epoch " + std::to_string(e) + ": " + err.what());
        }
        if (trace) {
            TraceRow row;
            row.epoch = e;
            row.stage = "prior";
            row.objects_weighted = oc.objects_total;
            row.mean_weight = 1.0;
            row.loss_f = oc.mean_loss_f;
            trace->push_back(row);
        }
    }
    return w;
}

std::vector<ObjectStat> dataset_object_stats(const DetectorWeights& weights, const Dataset& data,
                                             const Hyper& hyper) {
    std::vector<std::vector<ObjectStat>> per_scene(data.scenes.size());
    std::atomic<size_t> next{0};
    auto runner = [&]() {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= data.scenes.size()) return;
            const Scene& scene = data.scenes[i];
            if (scene.gt_boxes.empty()) continue;
            Tensor input = scene_input(scene, data.config.temporal_stack);
            ModelOutput out = detector_forward(weights, input);
            AnchorAssignment asg = assign_anchors(scene.gt_boxes, out.grid_h, out.grid_w);
            LossBreakdown bd = total_loss(out, asg, scene.gt_boxes, hyper.alpha, hyper.n_fixed);
            for (size_t j = 0; j < scene.gt_boxes.size(); ++j) {
                ObjectStat st;
                st.uid = {static_cast<int>(i), static_cast<int>(j)};
                st.confidence = object_confidence(out, asg, static_cast<int>(j), hyper.conf_agg);
                st.mean_loss = bd.per_object[j].item() /
                               static_cast<double>(asg.per_object[j].size());
                per_scene[i].push_back(st);
            }
        }
    };
    int nthreads = std::max(1, hyper.threads);
    if (nthreads == 1) {
        runner();
    } else {
        std::vector<std::thread> pool;
        for (int t = 1; t < nthreads; ++t) pool.emplace_back(runner);
        runner();
        for (auto& th : pool) th.join();
    }
    std::vector<ObjectStat> out;
    for (auto& v : per_scene)
        for (auto& st : v) out.push_back(st);
    return out;
}

std::vector<std::vector<ObjectUid>> replay_weight_sets(const DetectorWeights& weights,
                                                       const Dataset& data, const Hyper& hyper,
                                                       int t1) {
    require(t1 >= 1, "replay_weight_sets: T1 must be >= 1");
    std::vector<ObjectStat> stats = dataset_object_stats(weights, data, hyper);
    std::vector<std::vector<ObjectUid>> sets;
    sets.reserve(static_cast<size_t>(t1));
    for (int t = 1; t <= t1; ++t) {
        double ep = static_cast<double>(t - 1) / static_cast<double>(t1);
        double xi = schedule_xi(hyper.schedule, ep);
        std::vector<ObjectUid> admitted;
        for (const ObjectStat& st : stats)
            if (st.confidence > xi) admitted.push_back(st.uid);
        sets.push_back(std::move(admitted));
    }
    return sets;
}

TrainResult run_strategy(const StrategyConfig& config, const Dataset& train, const Hyper& hyper,
                         const TrainObserver* observer) {
    require(hyper.t0 >= 1, "run_strategy: T0 must be >= 1");
    require(hyper.t1 >= 1, "run_strategy: T1 must be >= 1");
    require(hyper.batch >= 1, "run_strategy: batch must be >= 1");
    require(!train.scenes.empty(), "run_strategy: empty training set");

    uint64_t seed_f = config.init_seed_f.value_or(default_init_seed_f(config.seed));
    uint64_t seed_g = config.init_seed_g.value_or(default_init_seed_g(config.seed));
    int in_channels = train.config.temporal_stack == 3 ? 3 : 1;

    bool dual = config.kind == StrategyKind::CplBC;
    bool curriculum = config.kind == StrategyKind::SplLoss || config.kind == StrategyKind::SplBC ||
                      config.kind == StrategyKind::CplBC;

    Dataset easy;
    const Dataset* prior_set = &train;
    const Dataset* stage_set = &train;
    if (config.kind == StrategyKind::ES) {
        easy = easy_subset(train, hyper.es_threshold);
        prior_set = &easy;
        stage_set = &easy;
    } else if (curriculum && config.prior == PriorKind::ESP) {
        easy = easy_subset(train, hyper.es_threshold);
        prior_set = &easy;
    }

    TrainResult res;

    // ---- prior phase: plain training, one model at a time ----
    std::vector<TraceRow> trace_f, trace_g;
    res.model_f = run_prior_stage(DetectorWeights::init(in_channels, seed_f), *prior_set,
                                  hyper.t0, hyper, seed_f, &trace_f, &res.adam_f);
    if (dual) {
        res.adam_g.emplace();
        res.model_g = run_prior_stage(DetectorWeights::init(in_channels, seed_g), *prior_set,
                                      hyper.t0, hyper, seed_g, &trace_g, &*res.adam_g);
    }
    for (size_t i = 0; i < trace_f.size(); ++i) {
        if (dual) trace_f[i].loss_g = trace_g[i].loss_f;
        res.trace.push_back(trace_f[i]);
    }

    // ---- strategy phase ----
    ObjectTable table = build_object_table(*stage_set);
    DetectorWeights* wg = dual ? &*res.model_g : nullptr;
    AdamState* opt_g = dual ? &*res.adam_g : nullptr;

    bool needs_cache = config.weight_source == WeightSource::CachedPreviousEpoch ||
                       config.kind == StrategyKind::SplLoss;
    std::vector<float> conf_cache_f, conf_cache_g, lstat_cache_f, lstat_cache_g;
    std::vector<double> prev_losses; // model f, for the lambda quantile

    if (curriculum && needs_cache) {
        // bootstrap: one inference sweep stands in for the "previous epoch"
        auto fill = [&](const DetectorWeights& w, std::vector<float>& conf_c,
                        std::vector<float>& lstat_c) {
            conf_c.assign(static_cast<size_t>(table.total), 0.0f);
            lstat_c.assign(static_cast<size_t>(table.total), 0.0f);
            std::vector<ObjectStat> stats = dataset_object_stats(w, *stage_set, hyper);
            size_t i = 0;
            for (const ObjectStat& st : stats) {
                conf_c[i] = static_cast<float>(st.confidence);
                lstat_c[i] = static_cast<float>(st.mean_loss);
                ++i;
            }
        };
        fill(res.model_f, conf_cache_f, lstat_cache_f);
        if (dual) fill(*res.model_g, conf_cache_g, lstat_cache_g);
        prev_losses.assign(lstat_cache_f.begin(), lstat_cache_f.end());
    }

    for (int t = 1; t <= hyper.t1; ++t) {
        int global_epoch = hyper.t0 + t;
        double ep = static_cast<double>(t - 1) / static_cast<double>(hyper.t1);

        WeightRule rule;
        std::optional<double> threshold;
        if (hyper.force_weight) {
            rule.mode = WeightRule::Mode::Forced;
            rule.forced = *hyper.force_weight;
        } else if (config.kind == StrategyKind::SplBC || config.kind == StrategyKind::CplBC) {
            rule.mode = config.kind == StrategyKind::SplBC ? WeightRule::Mode::SelfConf
                                                           : WeightRule::Mode::PeerConf;
            rule.threshold = schedule_xi(hyper.schedule, ep);
            rule.minimizer = MinimizerSpec{MinKind::ConfidenceBased, 2.0, hyper.m};
            rule.cached = config.weight_source == WeightSource::CachedPreviousEpoch;
            rule.cache_f = &conf_cache_f;
            rule.cache_g = &conf_cache_g;
            threshold = rule.threshold;
        } else if (config.kind == StrategyKind::SplLoss) {
            require(!prev_losses.empty(),
                    "run_strategy: SPL-loss needs at least one labelled object");
            rule.mode = WeightRule::Mode::LossBased;
            rule.minimizer = config.minimizer;
            double q = schedule_quantile(hyper.schedule, ep);
            if (config.minimizer.kind == MinKind::Logarithmic) {
                // normalize losses into [0,1] so lambda stays inside (0,1)
                double mx = *std::max_element(prev_losses.begin(), prev_losses.end());
                rule.loss_norm = mx > 0.0 ? mx : 1.0;
                std::vector<double> scaled = prev_losses;
                for (double& v : scaled) v /= rule.loss_norm;
                rule.threshold =
                    std::clamp(quantile_lambda(std::move(scaled), q), 1e-6, 1.0 - 1e-6);
            } else {
                rule.threshold = quantile_lambda(prev_losses, q);
            }
            rule.cached = config.weight_source == WeightSource::CachedPreviousEpoch;
            rule.cache_f = &lstat_cache_f;
            rule.cache_g = &lstat_cache_g;
            threshold = rule.threshold;
        }

        EpochOutcome oc;
        try {
            oc = run_epoch(*stage_set, table, res.model_f, res.adam_f, wg, opt_g, rule, hyper,
                           epoch_lr(hyper, global_epoch),
                           seed_hash(config.seed, kStageStreamTag, static_cast<uint64_t>(t)),
                           global_epoch, observer);
        } catch (const Error& err) {
            fail("strategy stage diverged at epoch " + std::to_string(global_epoch) + ": " +
                 err.what());
        }

        if (needs_cache || config.kind == StrategyKind::SplLoss) {
            conf_cache_f = oc.conf_f;
            lstat_cache_f = oc.lstat_f;
            if (dual) {
                conf_cache_g = oc.conf_g;
                lstat_cache_g = oc.lstat_g;
            }
            prev_losses.assign(oc.lstat_f.begin(), oc.lstat_f.end());
        }

        TraceRow row;
        row.epoch = global_epoch;
        row.stage = "strategy";
        row.ep = ep;
        row.threshold = threshold;
        row.objects_weighted =
            rule.mode == WeightRule::Mode::Plain ? oc.objects_total : oc.objects_weighted;
        row.mean_weight = oc.objects_total
                              ? (rule.mode == WeightRule::Mode::Plain
                                     ? 1.0
                                     : oc.weight_sum / static_cast<double>(oc.objects_total))
                              : 1.0;
        row.loss_f = oc.mean_loss_f;
        if (dual) row.loss_g = oc.mean_loss_g;
        res.trace.push_back(row);
    }
    res.epochs_run = hyper.t0 + hyper.t1;
    return res;
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
    std::ofstream os(path);
    require(bool(os), "write_trace_csv: cannot open " + path);
    os << "epoch,ep,threshold,objects_weighted,mean_weight,train_loss_f,train_loss_g\n";
    for (const TraceRow& r : trace) {
        os << r.epoch << ',';
        if (r.stage == "strategy") os << r.ep; // blank during the prior phase
        os << ',';
        if (r.threshold) os << *r.threshold;
        os << ',' << r.objects_weighted << ',' << r.mean_weight << ',' << r.loss_f << ',';
        if (r.loss_g) os << *r.loss_g;
        os << '\n';
    }
}

} // namespace cpl
