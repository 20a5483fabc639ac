#pragma once

#include <string>
#include <vector>

#include "orchidkit/array.hpp"

namespace orchid {

class ScheduleError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Parametrization { Epsilon, X0, V };

Parametrization parametrization_from_string(const std::string& s);
std::string to_string(Parametrization p);

/// Diffusion time tables. Steps are 1-indexed: beta[t-1] is beta_t for
/// t in [1,T]; alpha_bar_at(0) == 1 by convention.
struct NoiseSchedule {
    int T = 0;
    DenseArray beta;       // [T]
    DenseArray alpha;      // [T], alpha_t = 1 - beta_t
    DenseArray alpha_bar;  // [T], cumulative product
    DenseArray sigma;      // [T], DDPM posterior noise scales
    bool zero_terminal_snr = false;

    double beta_at(int t) const { return beta.data[check(t)]; }
    double alpha_at(int t) const { return alpha.data[check(t)]; }
    double alpha_bar_at(int t) const {
        if (t == 0) return 1.0;
        return alpha_bar.data[check(t)];
    }
    double sigma_at(int t) const { return sigma.data[check(t)]; }

    int check(int t) const {
        if (t < 1 || t > T) throw ScheduleError("schedule: step " + std::to_string(t) + " out of [1," +
                                                std::to_string(T) + "]");
        return t - 1;
    }
};

/// Scaled-linear beta schedule: sqrt(beta) interpolates linearly between
/// sqrt(beta_start) and sqrt(beta_end). With zero_terminal_snr set, sqrt of
/// the cumulative product is remapped affinely so the terminal value is 0
/// while the first step is preserved, and beta is rebuilt from the ratios.
NoiseSchedule build_schedule(int T, double beta_start, double beta_end, bool zero_terminal_snr);

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, exactly.
DenseArray forward_noise(const DenseArray& z0, int t, const DenseArray& eps, const NoiseSchedule& s);

/// Convert a model prediction between parametrizations at step t, given z_t.
DenseArray convert(const DenseArray& pred, const DenseArray& z_t, int t, Parametrization from,
                   Parametrization to, const NoiseSchedule& s);

/// Ancestral DDPM posterior step; the model prediction is v and is converted
/// internally. The stochastic term is forced to zero at t = 1.
DenseArray ddpm_step(const DenseArray& z_t, const DenseArray& pred_v, int t,
                     const DenseArray& eta_noise, const NoiseSchedule& s);

/// Deterministic DDIM update from step t to t_prev < t (t_prev = 0 lands on
/// the predicted z0).
DenseArray ddim_step(const DenseArray& z_t, const DenseArray& pred_v, int t, int t_prev,
                     const NoiseSchedule& s);

/// Descending sub-sequence of steps for DDIM sampling: uniform stride over
/// [1, T] including T; pair the last entry with t_prev = 0.
std::vector<int> ddim_timesteps(int T, int steps);

/// Debug dump: CSV with columns t, beta, alpha_bar, sigma.
std::string schedule_csv(const NoiseSchedule& s);

}  // namespace orchid
