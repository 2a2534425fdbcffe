#include <doctest.h>

#include <cmath>
#include <set>

#include "cpl/curriculum.hpp"
#include "cpl/rng.hpp"
#include "oracles.hpp"

using namespace cpl;

TEST_CASE("hard minimizer is a strict step") {
    MinimizerSpec hard{MinKind::Hard};
    CHECK(minimizer_value(hard, 1.0, 0.5) == doctest::Approx(1.0));
    CHECK(minimizer_value(hard, 1.0, 1.5) == doctest::Approx(0.0));
    CHECK(minimizer_value(hard, 1.0, 1.0) == doctest::Approx(0.0)); // boundary excluded
}

TEST_CASE("linear minimizer ramps down") {
    MinimizerSpec lin{MinKind::Linear};
    CHECK(minimizer_value(lin, 2.0, 0.5) == doctest::Approx(0.75));
    CHECK(minimizer_value(lin, 2.0, 2.0) == doctest::Approx(0.0));
    CHECK(minimizer_value(lin, 2.0, 0.0) == doctest::Approx(1.0));
}

TEST_CASE("logarithmic minimizer endpoints and domain") {
    MinimizerSpec log{MinKind::Logarithmic};
    CHECK(minimizer_value(log, 0.5, 0.0) == doctest::Approx(1.0));
    CHECK(minimizer_value(log, 0.5, 0.5) == doctest::Approx(0.0));
    double mid = minimizer_value(log, 0.5, 0.25);
    CHECK(mid > 0.0);
    CHECK(mid < 1.0);
    CHECK_THROWS_AS(minimizer_value(log, 1.0, 0.1), Error);
    CHECK_THROWS_AS(minimizer_value(log, 0.0, 0.1), Error);
}

TEST_CASE("polynomial minimizer shape and domain") {
    MinimizerSpec poly{MinKind::Polynomial, 3.0};
    // (1 - l/lambda)^(1/(t-1)) with t=3 is a square root
    CHECK(minimizer_value(poly, 2.0, 1.0) == doctest::Approx(std::sqrt(0.5)));
    CHECK(minimizer_value(poly, 2.0, 2.5) == doctest::Approx(0.0));
    MinimizerSpec bad{MinKind::Polynomial, 1.0};
    CHECK_THROWS_AS(minimizer_value(bad, 2.0, 1.0), Error);
}

TEST_CASE("confidence minimizer with m=3") {
    MinimizerSpec conf{MinKind::ConfidenceBased, 2.0, 3};
    CHECK(minimizer_value(conf, 0.8, 0.9) == doctest::Approx(0.96548938).epsilon(1e-7));
    CHECK(minimizer_value(conf, 0.8, 0.5) == doctest::Approx(0.0));
    CHECK(minimizer_value(conf, 0.8, 1.0) == doctest::Approx(1.0));
    CHECK(minimizer_value(conf, 0.8, 0.8) == doctest::Approx(0.0)); // strict >
    CHECK_THROWS_AS(minimizer_value(conf, 0.5, 1.5), Error);
}

TEST_CASE("minimizer outputs stay in [0,1] and threshold semantics are strict") {
    Rng rng(7);
    for (int i = 0; i < 2000; ++i) {
        double lam = rng.uniform(0.05, 0.95);
        double l = rng.uniform(0.0, 2.0);
        for (MinKind kind : {MinKind::Hard, MinKind::Linear, MinKind::Logarithmic,
                             MinKind::Polynomial}) {
            MinimizerSpec spec{kind, 2.5};
            double v = minimizer_value(spec, lam, l);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            if (l >= lam) CHECK(v == 0.0);
            if (l < lam && kind == MinKind::Hard) CHECK(v == 1.0);
        }
        double conf = rng.uniform(0.0, 1.0);
        double xi = rng.uniform(0.0, 1.0);
        double v = minimizer_value(MinimizerSpec{MinKind::ConfidenceBased, 2.0, 3}, xi, conf);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        if (conf <= xi) CHECK(v == 0.0);
        if (conf > xi) CHECK(v > 0.0);
    }
}

TEST_CASE("confidence weight is monotone in confidence; loss weights monotone in loss") {
    MinimizerSpec conf{MinKind::ConfidenceBased, 2.0, 3};
    double prev = -1.0;
    for (double c = 0.0; c <= 1.0; c += 0.01) {
        double v = minimizer_value(conf, 0.4, c);
        CHECK(v >= prev - 1e-12);
        prev = v;
    }
    for (MinKind kind : {MinKind::Hard, MinKind::Linear, MinKind::Logarithmic,
                         MinKind::Polynomial}) {
        MinimizerSpec spec{kind, 2.0};
        prev = 2.0;
        for (double l = 0.0; l <= 1.0; l += 0.01) {
            double v = minimizer_value(spec, 0.6, l);
            CHECK(v <= prev + 1e-12);
            prev = v;
        }
    }
}

TEST_CASE("minimizer condition: closed form minimizes v*l + g(v,lambda)") {
    // explicit regularizers: Hard g = -lambda v; Linear g = lambda (v^2 - 2v)/2
    Rng rng(97);
    for (int trial = 0; trial < 100; ++trial) {
        double lam = rng.uniform(0.1, 2.0);
        double l = rng.uniform(0.0, 2.5);

        auto obj_hard = [&](double v) { return v * l - lam * v; };
        auto obj_linear = [&](double v) { return v * l + lam * (v * v - 2.0 * v) / 2.0; };

        double vh = minimizer_value(MinimizerSpec{MinKind::Hard}, lam, l);
        double vl = minimizer_value(MinimizerSpec{MinKind::Linear}, lam, l);
        for (int k = 0; k <= 1000; ++k) {
            double v = k / 1000.0;
            CHECK(obj_hard(vh) <= obj_hard(v) + 1e-12);
            CHECK(obj_linear(vl) <= obj_linear(v) + 1e-12);
        }
    }
}

TEST_CASE("schedule follows the three branches exactly") {
    ScheduleSpec s; // xi0 0.8, e1 0.1, e2 0.9
    CHECK(schedule_xi(s, 0.0) == 0.8);
    CHECK(schedule_xi(s, 0.05) == 0.8);
    CHECK(schedule_xi(s, 0.1) == 0.8);
    CHECK(schedule_xi(s, 0.5) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(schedule_xi(s, 0.9) == 0.0);
    CHECK(schedule_xi(s, 0.95) == 0.0);
    CHECK(schedule_xi(s, 1.0) == 0.0);
}

TEST_CASE("schedule is continuous and non-increasing") {
    ScheduleSpec s;
    double prev = s.xi0;
    for (int k = 0; k <= 1000; ++k) {
        double ep = k / 1000.0;
        double v = schedule_xi(s, ep);
        CHECK(v <= prev + 1e-12);
        CHECK(std::fabs(v - prev) <= s.xi0 / (s.e2 - s.e1) * 1e-3 + 1e-12);
        prev = v;
    }
}

TEST_CASE("degenerate schedule with e1 == e2 == 1 stays at xi0") {
    ScheduleSpec s;
    s.xi0 = 1.0;
    s.e1 = s.e2 = 1.0;
    CHECK(schedule_xi(s, 0.0) == 1.0);
    CHECK(schedule_xi(s, 0.99) == 1.0);
    CHECK(schedule_xi(s, 1.0) == 0.0);
}

TEST_CASE("quantile schedule ramps from q_start to q_end") {
    ScheduleSpec s;
    CHECK(schedule_quantile(s, 0.0) == doctest::Approx(0.5));
    CHECK(schedule_quantile(s, 0.5) == doctest::Approx(0.75));
    CHECK(schedule_quantile(s, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("quantile lambda admits the right count on distinct losses") {
    Rng rng(101);
    for (int n : {3, 9, 10, 25}) {
        std::vector<double> losses;
        for (int i = 0; i < n; ++i) losses.push_back(rng.uniform(0.01, 5.0));
        double lam = quantile_lambda(losses, 0.5);
        int admitted = 0;
        for (double l : losses)
            if (l < lam) ++admitted;
        CHECK(admitted == (n + 1) / 2);

        // q = 1 admits every sample
        double lam1 = quantile_lambda(losses, 1.0);
        for (double l : losses) CHECK(l < lam1);
    }
}

TEST_CASE("object confidence aggregates max or mean") {
    ModelOutput out;
    out.grid_h = out.grid_w = 4;
    out.conf_map = Tensor::zeros({1, 4, 4});
    out.box_map = Tensor::zeros({4, 4, 4});
    AnchorAssignment asg;
    asg.grid_h = asg.grid_w = 4;
    asg.label.assign(16, -1);
    asg.per_object = {{1, 5, 6}};
    out.conf_map.data()[1] = 0.2f;
    out.conf_map.data()[5] = 0.9f;
    out.conf_map.data()[6] = 0.4f;
    CHECK(object_confidence(out, asg, 0, ConfAgg::Max) == doctest::Approx(0.9));
    CHECK(object_confidence(out, asg, 0, ConfAgg::Mean) == doctest::Approx(0.5));

    std::fill(out.conf_map.data(), out.conf_map.data() + 16, 0.5f);
    CHECK(object_confidence(out, asg, 0, ConfAgg::Max) == doctest::Approx(0.5));

    AnchorAssignment empty_asg;
    empty_asg.per_object = {{}};
    CHECK_THROWS_AS(object_confidence(out, empty_asg, 0, ConfAgg::Max), Error);
}

TEST_CASE("cross_weights applies the confidence minimizer elementwise") {
    std::vector<double> peer{0.9, 0.3};
    std::vector<double> w = cross_weights(peer, 0.8, 3);
    REQUIRE(w.size() == 2);
    CHECK(w[0] == doctest::Approx(0.96548938).epsilon(1e-7));
    CHECK(w[1] == doctest::Approx(0.0));

    // xi = 0 admits every positive confidence
    std::vector<double> w0 = cross_weights({0.01, 0.5, 1.0}, 0.0, 3);
    for (double v : w0) CHECK(v > 0.0);

    CHECK(cross_weights({}, 0.5, 3).empty());
}

TEST_CASE("strategy display names match the paper tables") {
    CHECK(strategy_name(StrategyKind::AS, {}) == "AS");
    CHECK(strategy_name(StrategyKind::ES, {}) == "ES");
    CHECK(strategy_name(StrategyKind::SplLoss, {MinKind::Hard}) == "SPL-BH");
    CHECK(strategy_name(StrategyKind::SplLoss, {MinKind::Linear}) == "SPL-BLine");
    CHECK(strategy_name(StrategyKind::SplLoss, {MinKind::Logarithmic}) == "SPL-BLog");
    CHECK(strategy_name(StrategyKind::SplLoss, {MinKind::Polynomial}) == "SPL-BPoly");
    CHECK(strategy_name(StrategyKind::SplBC, {}) == "SPL-BC");
    CHECK(strategy_name(StrategyKind::CplBC, {}) == "CPL-BC");
}
