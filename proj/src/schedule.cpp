#include "orchidkit/schedule.hpp"

#include <cmath>
#include <sstream>

namespace orchid {

Parametrization parametrization_from_string(const std::string& s) {
    if (s == "epsilon") return Parametrization::Epsilon;
    if (s == "x0") return Parametrization::X0;
    if (s == "v") return Parametrization::V;
    throw ScheduleError("unknown parametrization '" + s + "'");
}

std::string to_string(Parametrization p) {
    switch (p) {
        case Parametrization::Epsilon: return "epsilon";
        case Parametrization::X0: return "x0";
        case Parametrization::V: return "v";
    }
    return "?";
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end, bool zero_terminal_snr) {
    if (T < 2) throw ScheduleError("build_schedule: T must be >= 2");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ScheduleError("build_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.zero_terminal_snr = zero_terminal_snr;
    s.beta = DenseArray({static_cast<std::size_t>(T)});
    s.alpha = DenseArray({static_cast<std::size_t>(T)});
    s.alpha_bar = DenseArray({static_cast<std::size_t>(T)});
    s.sigma = DenseArray({static_cast<std::size_t>(T)});

    double sb0 = std::sqrt(beta_start), sb1 = std::sqrt(beta_end);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        double f = static_cast<double>(i) / static_cast<double>(T - 1);
        double sb = sb0 + f * (sb1 - sb0);
        double b = sb * sb;
        s.beta.data[i] = b;
        s.alpha.data[i] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar.data[i] = prod;
    }

    if (zero_terminal_snr) {
        // affine remap of sqrt(alpha_bar): terminal -> 0, first step preserved
        std::vector<double> sab(T);
        for (int i = 0; i < T; ++i) sab[i] = std::sqrt(s.alpha_bar.data[i]);
        double first = sab[0], last = sab[T - 1];
        if (!(first > last)) throw ScheduleError("build_schedule: cannot rescale a flat schedule");
        for (int i = 0; i < T; ++i) {
            double v = (sab[i] - last) * first / (first - last);
            s.alpha_bar.data[i] = v * v;
        }
        double prev = 1.0;
        for (int i = 0; i < T; ++i) {
            double a = s.alpha_bar.data[i] / prev;
            s.alpha.data[i] = a;
            s.beta.data[i] = 1.0 - a;
            prev = s.alpha_bar.data[i];
        }
    }

    for (int i = 0; i < T; ++i) {
        double ab_prev = i == 0 ? 1.0 : s.alpha_bar.data[i - 1];
        double ab = s.alpha_bar.data[i];
        double denom = 1.0 - ab;
        double var = denom > 0.0 ? s.beta.data[i] * (1.0 - ab_prev) / denom : 0.0;
        s.sigma.data[i] = std::sqrt(std::max(0.0, var));
    }
    return s;
}

DenseArray forward_noise(const DenseArray& z0, int t, const DenseArray& eps, const NoiseSchedule& s) {
    require_same_shape(z0, eps, "forward_noise");
    double ab = s.alpha_bar_at(t);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    DenseArray out = z0;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * out.data[i] + b * eps.data[i];
    return out;
}

DenseArray convert(const DenseArray& pred, const DenseArray& z_t, int t, Parametrization from,
                   Parametrization to, const NoiseSchedule& s) {
    require_same_shape(pred, z_t, "convert");
    if (from == to) throw ScheduleError("convert: from and to must differ");
    s.check(t);
    double ab = s.alpha_bar_at(t);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    DenseArray out(pred.shape);

    // All directed conversions derive from:
    //   v = a*eps - b*x0,  x0 = a*z_t - b*v,  eps = b*z_t + a*v
    auto from_v = [&](const DenseArray& v) {
        if (to == Parametrization::X0) {
            for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * z_t.data[i] - b * v.data[i];
        } else {  // epsilon
            for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = b * z_t.data[i] + a * v.data[i];
        }
    };

    switch (from) {
        case Parametrization::V:
            from_v(pred);
            break;
        case Parametrization::X0:
            if (b == 0.0) throw ScheduleError("convert: alpha_bar = 1 makes x0 conversions singular");
            if (to == Parametrization::Epsilon) {
                for (std::size_t i = 0; i < out.size(); ++i)
                    out.data[i] = (z_t.data[i] - a * pred.data[i]) / b;
            } else {  // v = (a*z_t - x0)/b
                for (std::size_t i = 0; i < out.size(); ++i)
                    out.data[i] = (a * z_t.data[i] - pred.data[i]) / b;
            }
            break;
        case Parametrization::Epsilon:
            if (a == 0.0) throw ScheduleError("convert: alpha_bar = 0 makes epsilon conversions singular");
            if (to == Parametrization::X0) {
                for (std::size_t i = 0; i < out.size(); ++i)
                    out.data[i] = (z_t.data[i] - b * pred.data[i]) / a;
            } else {  // v = (eps - b*z_t)/a
                for (std::size_t i = 0; i < out.size(); ++i)
                    out.data[i] = (pred.data[i] - b * z_t.data[i]) / a;
            }
            break;
    }
    return out;
}

DenseArray ddpm_step(const DenseArray& z_t, const DenseArray& pred_v, int t,
                     const DenseArray& eta_noise, const NoiseSchedule& s) {
    require_same_shape(z_t, pred_v, "ddpm_step");
    require_same_shape(z_t, eta_noise, "ddpm_step");
    s.check(t);
    // posterior-mean form of the ancestral update; algebraically equal to the
    // epsilon form (1/sqrt(alpha_t))(z_t - beta_t/sqrt(1-ab_t) eps) when
    // alpha_t > 0, and stays finite at a zero-terminal-SNR endpoint
    double ab = s.alpha_bar_at(t);
    double ab_prev = s.alpha_bar_at(t - 1);
    double beta = s.beta_at(t);
    double alpha = s.alpha_at(t);
    double denom = 1.0 - ab;
    // beta_t = 0 never added noise at this step: the update degenerates to z_t
    double c0 = denom > 0.0 ? std::sqrt(ab_prev) * beta / denom : 0.0;
    double c1 = denom > 0.0 ? std::sqrt(alpha) * (1.0 - ab_prev) / denom : 1.0;
    double sg = t == 1 ? 0.0 : s.sigma_at(t);

    DenseArray x0 = convert(pred_v, z_t, t, Parametrization::V, Parametrization::X0, s);
    DenseArray out(z_t.shape);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = c0 * x0.data[i] + c1 * z_t.data[i] + sg * eta_noise.data[i];
    return out;
}

DenseArray ddim_step(const DenseArray& z_t, const DenseArray& pred_v, int t, int t_prev,
                     const NoiseSchedule& s) {
    require_same_shape(z_t, pred_v, "ddim_step");
    s.check(t);
    if (t_prev >= t || t_prev < 0)
        throw ScheduleError("ddim_step: need 0 <= t_prev < t, got t=" + std::to_string(t) +
                            ", t_prev=" + std::to_string(t_prev));
    DenseArray x0 = convert(pred_v, z_t, t, Parametrization::V, Parametrization::X0, s);
    DenseArray eps = convert(pred_v, z_t, t, Parametrization::V, Parametrization::Epsilon, s);
    double abp = s.alpha_bar_at(t_prev);
    double a = std::sqrt(abp), b = std::sqrt(1.0 - abp);
    DenseArray out(z_t.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1) throw ScheduleError("ddim_timesteps: steps must be >= 1");
    steps = std::min(steps, T);
    std::vector<int> ts;
    ts.reserve(steps);
    int prev = -1;
    for (int i = 0; i < steps; ++i) {
        double f = static_cast<double>(i) / static_cast<double>(steps);
        int t = static_cast<int>(std::llround(static_cast<double>(T) * (1.0 - f)));
        t = std::max(1, std::min(T, t));
        if (t != prev) ts.push_back(t);
        prev = t;
    }
    return ts;  // descending, starts at T; caller pairs the last entry with 0
}

std::string schedule_csv(const NoiseSchedule& s) {
    std::ostringstream os;
    os.precision(17);
    os << "t,beta,alpha_bar,sigma\n";
    for (int t = 1; t <= s.T; ++t)
        os << t << ',' << s.beta_at(t) << ',' << s.alpha_bar_at(t) << ',' << s.sigma_at(t) << '\n';
    return os.str();
}

}  // namespace orchid
