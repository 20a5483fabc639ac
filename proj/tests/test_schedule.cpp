#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <algorithm>

#include "doctest.h"
#include "orchidkit/ldm.hpp"
#include "orchidkit/rng.hpp"
#include "orchidkit/schedule.hpp"

using namespace orchid;

TEST_CASE("scaled-linear schedule with zero terminal SNR") {
    NoiseSchedule s = build_schedule(1000, 0.00085, 0.012, true);
    NoiseSchedule raw = build_schedule(1000, 0.00085, 0.012, false);

    CHECK(s.alpha_bar_at(1000) <= 1e-12);
    for (int t = 2; t <= 1000; ++t) CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    // first step preserved by the affine remap of sqrt(alpha_bar)
    CHECK(std::sqrt(s.alpha_bar_at(1)) == doctest::Approx(std::sqrt(raw.alpha_bar_at(1))).epsilon(1e-12));
    CHECK(s.alpha_bar_at(1) == doctest::Approx(1.0 - s.beta_at(1)).epsilon(1e-12));
    // without the flag the terminal signal-to-noise ratio stays positive
    CHECK(raw.alpha_bar_at(1000) > 0.0);
}

TEST_CASE("uniform beta product by hand") {
    NoiseSchedule s = build_schedule(2, 0.5, 0.5, false);
    CHECK(s.alpha_bar_at(1) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.alpha_bar_at(2) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("build_schedule parameter validation") {
    CHECK_THROWS_AS(build_schedule(1, 0.001, 0.01, false), ScheduleError);
    CHECK_THROWS_AS(build_schedule(10, 0.0, 0.01, false), ScheduleError);
    CHECK_THROWS_AS(build_schedule(10, 0.02, 0.01, false), ScheduleError);
    CHECK_THROWS_AS(build_schedule(10, 0.001, 1.0, false), ScheduleError);
}

TEST_CASE("forward_noise endpoints via hand-built tables") {
    NoiseSchedule s;
    s.T = 2;
    s.beta = DenseArray::from({2}, {0.0, 1.0});
    s.alpha = DenseArray::from({2}, {1.0, 0.0});
    s.alpha_bar = DenseArray::from({2}, {1.0, 0.0});
    s.sigma = DenseArray::from({2}, {0.0, 0.0});

    RandomStream rng(1);
    DenseArray z0 = rng.normal_array({2, 3, 3});
    DenseArray eps = rng.normal_array({2, 3, 3});
    CHECK(forward_noise(z0, 1, eps, s).data == z0.data);   // alpha_bar = 1
    CHECK(forward_noise(z0, 2, eps, s).data == eps.data);  // alpha_bar = 0
    DenseArray bad({2, 3, 2}, 0.0);
    CHECK_THROWS_AS(forward_noise(z0, 1, bad, s), ShapeError);
}

TEST_CASE("forward-noise moments match the closed form over 1e5 draws") {
    NoiseSchedule s = build_schedule(1000, 0.00085, 0.012, false);
    int t = 420;
    double ab = s.alpha_bar_at(t);
    DenseArray z0 = DenseArray::from({3}, {0.7, -0.4, 1.9});
    RandomStream rng(5150);
    const int N = 100000;
    std::vector<double> mean(3, 0.0), m2(3, 0.0);
    for (int k = 0; k < N; ++k) {
        DenseArray z = forward_noise(z0, t, rng.normal_array({3}), s);
        for (int i = 0; i < 3; ++i) {
            mean[i] += z.data[i];
            m2[i] += z.data[i] * z.data[i];
        }
    }
    double se_mean = std::sqrt((1.0 - ab) / N);
    double se_var = (1.0 - ab) * std::sqrt(2.0 / N);
    for (int i = 0; i < 3; ++i) {
        double mu = mean[i] / N;
        double var = m2[i] / N - mu * mu;
        CHECK(std::abs(mu - std::sqrt(ab) * z0.data[i]) <= 3.0 * se_mean);
        CHECK(std::abs(var - (1.0 - ab)) <= 3.0 * se_var);
    }
}

TEST_CASE("parametrization conversions") {
    NoiseSchedule s = build_schedule(1000, 0.00085, 0.012, false);
    RandomStream rng(7);

    SUBCASE("alpha_bar = 1 endpoint: v -> x0 returns z_t") {
        NoiseSchedule ep;
        ep.T = 1;
        ep.beta = DenseArray::from({1}, {0.0});
        ep.alpha = DenseArray::from({1}, {1.0});
        ep.alpha_bar = DenseArray::from({1}, {1.0});
        ep.sigma = DenseArray::from({1}, {0.0});
        DenseArray z = rng.normal_array({4});
        DenseArray v = rng.normal_array({4});
        CHECK(convert(v, z, 1, Parametrization::V, Parametrization::X0, ep).data == z.data);
    }
    SUBCASE("v -> eps -> v round trip") {
        for (int t : {1, 250, 999}) {
            DenseArray z = rng.normal_array({2, 4, 4});
            DenseArray v = rng.normal_array({2, 4, 4});
            DenseArray eps = convert(v, z, t, Parametrization::V, Parametrization::Epsilon, s);
            DenseArray back = convert(eps, z, t, Parametrization::Epsilon, Parametrization::V, s);
            CHECK(max_abs_diff(back, v) <= 1e-12);
        }
    }
    SUBCASE("construct-then-invert oracle") {
        for (int t : {3, 500, 998}) {
            DenseArray z0 = rng.normal_array({3, 4, 4});
            DenseArray eps = rng.normal_array({3, 4, 4});
            DenseArray z_t = forward_noise(z0, t, eps, s);
            DenseArray v = v_target(z0, eps, t, s);
            DenseArray x0 = convert(v, z_t, t, Parametrization::V, Parametrization::X0, s);
            CHECK(max_abs_diff(x0, z0) <= 1e-10);
        }
    }
    SUBCASE("six directions mutually consistent within 1e-10") {
        for (int t : {1, 111, 777, 1000}) {
            DenseArray z0 = rng.normal_array({2, 3, 3});
            DenseArray eps = rng.normal_array({2, 3, 3});
            DenseArray z_t = forward_noise(z0, t, eps, s);
            DenseArray v = v_target(z0, eps, t, s);
            using P = Parametrization;
            CHECK(max_abs_diff(convert(v, z_t, t, P::V, P::X0, s), z0) <= 1e-10);
            CHECK(max_abs_diff(convert(v, z_t, t, P::V, P::Epsilon, s), eps) <= 1e-10);
            CHECK(max_abs_diff(convert(z0, z_t, t, P::X0, P::Epsilon, s), eps) <= 1e-10);
            CHECK(max_abs_diff(convert(z0, z_t, t, P::X0, P::V, s), v) <= 1e-10);
            CHECK(max_abs_diff(convert(eps, z_t, t, P::Epsilon, P::X0, s), z0) <= 1e-10);
            CHECK(max_abs_diff(convert(eps, z_t, t, P::Epsilon, P::V, s), v) <= 1e-10);
        }
    }
    SUBCASE("same-kind conversion and bad steps rejected") {
        DenseArray z = rng.normal_array({4});
        CHECK_THROWS_AS(convert(z, z, 5, Parametrization::V, Parametrization::V, s), ScheduleError);
        CHECK_THROWS_AS(convert(z, z, 0, Parametrization::V, Parametrization::X0, s), ScheduleError);
        CHECK_THROWS_AS(convert(z, z, 1001, Parametrization::V, Parametrization::X0, s), ScheduleError);
    }
}

TEST_CASE("ddpm_step") {
    NoiseSchedule s = build_schedule(1000, 0.00085, 0.012, true);
    RandomStream rng(9);
    DenseArray z0 = rng.normal_array({2, 4, 4});
    DenseArray eps = rng.normal_array({2, 4, 4});

    SUBCASE("no stochastic term at t = 1") {
        DenseArray z1 = forward_noise(z0, 1, eps, s);
        DenseArray v = v_target(z0, eps, 1, s);
        DenseArray quiet(z1.shape, 0.0);
        DenseArray loud = rng.normal_array(z1.shape);
        CHECK(ddpm_step(z1, v, 1, quiet, s).data == ddpm_step(z1, v, 1, loud, s).data);
    }
    SUBCASE("exact v recovers the closed-form posterior mean") {
        for (int t : {2, 300, 1000}) {
            DenseArray z_t = forward_noise(z0, t, eps, s);
            DenseArray v = v_target(z0, eps, t, s);
            DenseArray eta(z_t.shape, 0.0);
            DenseArray got = ddpm_step(z_t, v, t, eta, s);
            double ab = s.alpha_bar_at(t), abp = s.alpha_bar_at(t - 1);
            double c0 = std::sqrt(abp) * s.beta_at(t) / (1.0 - ab);
            double c1 = std::sqrt(s.alpha_at(t)) * (1.0 - abp) / (1.0 - ab);
            DenseArray want(z_t.shape);
            for (std::size_t i = 0; i < want.size(); ++i)
                want.data[i] = c0 * z0.data[i] + c1 * z_t.data[i];
            CHECK(max_abs_diff(got, want) <= 1e-12);
        }
    }
    SUBCASE("posterior-mean form equals the epsilon-prediction form when alpha_t > 0") {
        NoiseSchedule raw = build_schedule(1000, 0.00085, 0.012, false);
        for (int t : {2, 640}) {
            DenseArray z_t = forward_noise(z0, t, eps, raw);
            DenseArray v = v_target(z0, eps, t, raw);
            DenseArray eta = rng.normal_array(z_t.shape);
            DenseArray got = ddpm_step(z_t, v, t, eta, raw);
            DenseArray eps_hat = convert(v, z_t, t, Parametrization::V, Parametrization::Epsilon, raw);
            double inv_sa = 1.0 / std::sqrt(raw.alpha_at(t));
            double coef = raw.beta_at(t) / std::sqrt(1.0 - raw.alpha_bar_at(t));
            DenseArray want(z_t.shape);
            for (std::size_t i = 0; i < want.size(); ++i)
                want.data[i] = inv_sa * (z_t.data[i] - coef * eps_hat.data[i]) +
                               raw.sigma_at(t) * eta.data[i];
            CHECK(max_abs_diff(got, want) <= 1e-10);
        }
    }
    SUBCASE("degenerate no-noise step leaves z unchanged") {
        NoiseSchedule flat;
        flat.T = 2;
        flat.beta = DenseArray::from({2}, {0.0, 0.0});
        flat.alpha = DenseArray::from({2}, {1.0, 1.0});
        flat.alpha_bar = DenseArray::from({2}, {1.0, 1.0});
        flat.sigma = DenseArray::from({2}, {0.0, 0.0});
        DenseArray z = rng.normal_array({4});
        DenseArray zero(z.shape, 0.0);
        CHECK(ddpm_step(z, zero, 2, zero, flat).data == z.data);
    }
    SUBCASE("t = 0 rejected") {
        DenseArray z = rng.normal_array({4});
        DenseArray zero(z.shape, 0.0);
        CHECK_THROWS_AS(ddpm_step(z, zero, 0, zero, s), ScheduleError);
    }
}

TEST_CASE("ddim_step") {
    NoiseSchedule s = build_schedule(1000, 0.00085, 0.012, true);
    RandomStream rng(10);
    DenseArray z0 = rng.normal_array({2, 4, 4});
    DenseArray eps = rng.normal_array({2, 4, 4});

    SUBCASE("exact-model 10-step trajectory lands on z0") {
        DenseArray z = forward_noise(z0, s.T, eps, s);
        auto ts = ddim_timesteps(s.T, 10);
        REQUIRE(ts.front() == s.T);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            int t = ts[i], t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
            double a = std::sqrt(s.alpha_bar_at(t)), b = std::sqrt(1.0 - s.alpha_bar_at(t));
            DenseArray v(z.shape);
            for (std::size_t k = 0; k < v.size(); ++k) v.data[k] = (a * z.data[k] - z0.data[k]) / b;
            z = ddim_step(z, v, t, t_prev, s);
        }
        CHECK(max_abs_diff(z, z0) <= 1e-8);
    }
    SUBCASE("stepping to t_prev = 0 returns the x0 prediction") {
        int t = 700;
        DenseArray z_t = forward_noise(z0, t, eps, s);
        DenseArray v = v_target(z0, eps, t, s);
        DenseArray out = ddim_step(z_t, v, t, 0, s);
        CHECK(max_abs_diff(out, z0) <= 1e-10);
    }
    SUBCASE("deterministic") {
        DenseArray z_t = forward_noise(z0, 600, eps, s);
        DenseArray v = v_target(z0, eps, 600, s);
        CHECK(ddim_step(z_t, v, 600, 400, s).data == ddim_step(z_t, v, 600, 400, s).data);
    }
    SUBCASE("non-monotone step pairs rejected") {
        DenseArray z = rng.normal_array({4});
        CHECK_THROWS_AS(ddim_step(z, z, 100, 100, s), ScheduleError);
        CHECK_THROWS_AS(ddim_step(z, z, 100, 200, s), ScheduleError);
    }
}

TEST_CASE("ddim timestep subsequences") {
    auto ts = ddim_timesteps(1000, 50);
    CHECK(ts.front() == 1000);
    CHECK(ts.size() == 50);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
    CHECK(ts.back() >= 1);
    auto all = ddim_timesteps(10, 99);  // more steps than T collapses to every step
    CHECK(all.size() == 10);
    CHECK(all.front() == 10);
    CHECK(all.back() == 1);
}

TEST_CASE("schedule csv dump") {
    NoiseSchedule s = build_schedule(4, 0.1, 0.2, false);
    std::string csv = schedule_csv(s);
    CHECK(csv.find("t,beta,alpha_bar,sigma") == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);  // header + T rows
}
