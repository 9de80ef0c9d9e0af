#include "billiard/statistics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "billiard/rng.hpp"

namespace billiard {

namespace {

constexpr double kSlopeTol = 1e-9;

int draw_cell(const std::vector<double>& cum, Rng& rng) {
    const double u = rng.uniform() * cum.back();
    return static_cast<int>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
}

std::vector<double> cumulative(const std::vector<double>& w) {
    std::vector<double> cum(w.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        cum[i] = acc;
    }
    return cum;
}

double wrap_r_diff(double a, double b, double per) {
    double d = std::fmod(a - b, per);
    if (d > per / 2) d -= per;
    if (d < -per / 2) d += per;
    return d;
}

} // namespace

MeasureSample sample_measure(const TableGeometry& table, const EquilibriumMeasure& measure,
                             std::size_t count, std::uint64_t seed, ExecPolicy policy) {
    MeasureSample out;
    out.seed = seed;
    out.t = measure.t;
    out.points.resize(count);
    const std::vector<double> cum = cumulative(measure.mu_cells);
    for_each_index(count, policy, [&](std::size_t i) {
        Rng rng(derive_seed(seed, 0x3a371e, i));
        const int cell = draw_cell(cum, rng);
        out.points[i] = measure.grid.sample_in_cell(table, cell, rng);
    });
    return out;
}

MeasureSample sample_srb(const TableGeometry& table, std::size_t count, std::uint64_t seed) {
    MeasureSample out;
    out.seed = seed;
    out.t = 1.0;
    out.points.resize(count);
    std::vector<double> per_cum;
    double acc = 0.0;
    for (int sc = 0; sc < table.num_scatterers(); ++sc) {
        acc += table.perimeter(sc);
        per_cum.push_back(acc);
    }
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, 0x5125b, i));
        const double u = rng.uniform() * acc;
        int sc = 0;
        while (per_cum[sc] < u) ++sc;
        const double r = rng.uniform(0.0, table.perimeter(sc));
        const double s = rng.uniform(-1.0, 1.0);
        out.points[i] = make_phase_point(table, sc, r, std::asin(s));
    }
    return out;
}

SrbAverage srb_average_log_ju(const TableGeometry& table, std::size_t count,
                              std::uint64_t seed, ExecPolicy policy, const MapOptions& opts) {
    std::vector<double> vals(count, std::numeric_limits<double>::quiet_NaN());
    for_each_index(count, policy, [&](std::size_t i) {
        Rng rng(derive_seed(seed, 0x10f0, i));
        const int sc = static_cast<int>(rng.below(table.num_scatterers()));
        const double r = rng.uniform(0.0, table.perimeter(sc));
        const double s = rng.uniform(-1.0, 1.0);
        const PhasePoint x = make_phase_point(table, sc, r, std::asin(s));
        // the unstable slope needs backward history: walk back, then forward
        PhasePoint y = x;
        bool ok = true;
        for (int k = 0; k < 18 && ok; ++k) {
            CollisionStep cs = try_step_inverse(table, y, opts);
            ok = cs.status == StepStatus::ok;
            if (ok) y = cs.to;
        }
        if (!ok) return;
        OrbitWithSlopes orbit = forward_orbit_with_slopes(table, y, 19, 2, opts);
        if (orbit.steps_completed < 19) return;
        if (orbit.slope_u_err[18] > kSlopeTol) return;
        vals[i] = orbit.log_ju[18];
    });
    SrbAverage avg;
    double acc = 0.0;
    for (double v : vals) {
        if (std::isnan(v)) {
            ++avg.skipped;
            continue;
        }
        acc += v;
        ++avg.used;
    }
    avg.mean = acc / std::max<std::size_t>(avg.used, 1);
    double var = 0.0;
    for (double v : vals)
        if (!std::isnan(v)) var += (v - avg.mean) * (v - avg.mean);
    var /= avg.used > 1 ? avg.used - 1 : 1;
    avg.stderr_ = std::sqrt(var / std::max<std::size_t>(avg.used, 1));
    return avg;
}

ShellCurve adaptedness_integral(const TableGeometry& table, const MeasureSample& sample,
                                const SingularCurveSet& forward_set,
                                const SingularCurveSet& backward_set) {
    ShellCurve curve;
    curve.resolution = std::max(forward_set.resolution, backward_set.resolution);
    const int max_shell = 40;
    curve.shell_mass.assign(max_shell + 1, 0.0);
    curve.shell_contrib.assign(max_shell + 1, 0.0);

    const double w = 1.0 / static_cast<double>(sample.points.size());
    std::vector<double> contributions;
    for (const PhasePoint& x : sample.points) {
        const double d = std::min(distance_to_singularity(table, x, forward_set),
                                  distance_to_singularity(table, x, backward_set));
        if (d < curve.resolution) {
            ++curve.floored;
            continue;
        }
        int shell = d >= 1.0 ? 0 : static_cast<int>(std::floor(-std::log2(d)));
        shell = std::clamp(shell, 0, max_shell);
        curve.shell_mass[shell] += w;
        curve.shell_contrib[shell] += w * std::abs(std::log(d));
        contributions.push_back(std::abs(std::log(d)));
    }
    for (double c : contributions) curve.estimate += c * w;

    // deepest populated shells: their contributions should decay
    int deepest = 0;
    for (int j = 0; j <= max_shell; ++j)
        if (curve.shell_mass[j] > 0) deepest = j;
    if (deepest >= 4) {
        double a = 0, b = 0;
        for (int j = deepest - 3; j <= deepest - 2; ++j) a += curve.shell_contrib[j];
        for (int j = deepest - 1; j <= deepest; ++j) b += curve.shell_contrib[j];
        curve.tail_decaying = b <= a;
    }

    // geometric fit of the shell masses extrapolates the floored tail
    if (curve.floored > 0 && deepest >= 6) {
        double num = 0, den = 0;
        for (int j = deepest - 3; j < deepest; ++j) {
            if (curve.shell_mass[j] > 0 && curve.shell_mass[j + 1] > 0) {
                num += curve.shell_mass[j + 1];
                den += curve.shell_mass[j];
            }
        }
        const double rho = den > 0 ? std::min(0.95, num / den) : 0.5;
        double mass = curve.shell_mass[deepest] * rho;
        for (int j = deepest + 1; j <= deepest + 200 && mass > 1e-18; ++j) {
            curve.tail_extrapolated += mass * (j + 1) * std::log(2.0);
            mass *= rho;
        }
        curve.tail_flagged = true;
    }
    return curve;
}

ScalingFit neighborhood_scaling(const TableGeometry& table, const MeasureSample& sample,
                                const SingularCurveSet* curves,
                                const std::vector<double>& epsilons) {
    std::vector<double> dist(sample.points.size());
    for (std::size_t i = 0; i < sample.points.size(); ++i) {
        const PhasePoint& x = sample.points[i];
        dist[i] = curves ? distance_to_singularity(table, x, *curves)
                         : std::numbers::pi / 2.0 - std::abs(x.phi);
    }
    const double floor_eps = curves ? 2.0 * curves->resolution : 0.0;

    ScalingFit fit;
    for (double eps : epsilons) {
        if (eps < floor_eps) continue;
        std::size_t hits = 0;
        for (double d : dist)
            if (d <= eps) ++hits;
        if (hits == 0) continue;
        fit.eps.push_back(eps);
        fit.mass.push_back(static_cast<double>(hits) / dist.size());
    }
    if (fit.eps.size() < 3)
        throw InsufficientRangeError("neighborhood_scaling: fewer than 3 usable radii");

    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const int m = static_cast<int>(fit.eps.size());
    for (int i = 0; i < m; ++i) {
        const double lx = std::log(fit.eps[i]), ly = std::log(fit.mass[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    fit.slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    fit.points_used = m;
    return fit;
}

EntropyReport entropy_identities(const EquilibriumMeasure& measure,
                                 const DerivativeEstimate& derivs, double chi_u_reference) {
    EntropyReport rep;
    rep.t = measure.t;
    rep.log_lambda = std::log(measure.lambda);
    rep.P1 = derivs.P1;
    rep.h_mu = rep.log_lambda - measure.t * derivs.P1;
    rep.lyapunov = -derivs.P1;
    rep.chi_u_reference = chi_u_reference;
    rep.pesin_residual = std::abs(rep.h_mu - chi_u_reference) / std::abs(chi_u_reference);
    return rep;
}

BowenReport bowen_ball_check(const TableGeometry& table, const EquilibriumMeasure& measure,
                             double p_star, std::size_t centers, int n_max, double eps,
                             std::size_t sample_count, std::uint64_t seed, ExecPolicy policy,
                             const MapOptions& opts) {
    BowenReport rep;
    rep.eps = eps;
    rep.n_max = n_max;
    rep.t = measure.t;

    // backward orbits of the sample cloud
    const std::vector<double> cum = cumulative(measure.mu_cells);
    struct BackOrbit {
        bool ok = false;
        std::vector<PhasePoint> pts; // 0..n_max
    };
    std::vector<BackOrbit> cloud(sample_count);
    for_each_index(sample_count, policy, [&](std::size_t i) {
        Rng rng(derive_seed(seed, 0xb0e4, i));
        PhasePoint x = measure.grid.sample_in_cell(table, draw_cell(cum, rng), rng);
        BackOrbit& bo = cloud[i];
        bo.pts.push_back(x);
        for (int k = 0; k < n_max; ++k) {
            CollisionStep cs = try_step_inverse(table, bo.pts.back(), opts);
            if (cs.status != StepStatus::ok) return;
            bo.pts.push_back(cs.to);
        }
        bo.ok = true;
    });

    struct Center {
        bool ok = false;
        std::vector<PhasePoint> pts;
        std::vector<double> backward_logjs; // sum_{k=1..n} log J^s(T^-k x)
    };
    std::vector<Center> ctr(centers);
    for_each_index(centers, policy, [&](std::size_t i) {
        Rng rng(derive_seed(seed, 0xce27, i));
        PhasePoint x = measure.grid.sample_in_cell(table, draw_cell(cum, rng), rng);
        Center& c = ctr[i];
        c.pts.push_back(x);
        for (int k = 0; k < n_max; ++k) {
            CollisionStep cs = try_step_inverse(table, c.pts.back(), opts);
            if (cs.status != StepStatus::ok) return;
            c.pts.push_back(cs.to);
        }
        // one forward sweep from the deepest point covers every backward point
        OrbitWithSlopes orbit = forward_orbit_with_slopes(table, c.pts.back(), n_max, 22, opts);
        if (orbit.steps_completed < n_max) return;
        c.backward_logjs.assign(n_max + 1, 0.0);
        double acc = 0.0;
        for (int k = n_max - 1; k >= 0; --k) {
            if (orbit.slope_err[k] > kSlopeTol) return;
            // orbit index k corresponds to T^{-(n_max-k)} x
            acc += orbit.log_js[k];
            c.backward_logjs[n_max - k] = 0.0; // filled below
        }
        // prefix sums: sum_{k=1..n} log J^s(T^{-k}x) = sum of the last n
        // one-step factors of the forward sweep
        double run = 0.0;
        for (int n = 1; n <= n_max; ++n) {
            run += orbit.log_js[n_max - n];
            c.backward_logjs[n] = run;
        }
        c.ok = true;
    });

    // ball masses by membership counting
    std::vector<std::vector<double>> mass(centers, std::vector<double>(n_max + 1, 0.0));
    for_each_index(centers, policy, [&](std::size_t ci) {
        if (!ctr[ci].ok) return;
        auto& m = mass[ci];
        for (const auto& bo : cloud) {
            if (!bo.ok) continue;
            int deepest = -1;
            for (int j = 0; j <= n_max; ++j) {
                const PhasePoint& a = bo.pts[j];
                const PhasePoint& b = ctr[ci].pts[j];
                if (a.scatterer_id != b.scatterer_id) break;
                const double d = std::hypot(
                    wrap_r_diff(a.r, b.r, table.perimeter(a.scatterer_id)), a.phi - b.phi);
                if (d > eps) break;
                deepest = j;
            }
            for (int j = 0; j <= deepest; ++j) m[j] += 1.0;
        }
        for (auto& v : m) v /= static_cast<double>(sample_count);
    });

    double a_fit = 0.0;
    std::vector<double> slope_mismatch;
    for (std::size_t ci = 0; ci < centers; ++ci) {
        if (!ctr[ci].ok) continue;
        int usable = 0;
        for (int n = 1; n <= n_max; ++n) {
            if (mass[ci][n] <= 0.0) {
                ++rep.pairs_skipped;
                continue;
            }
            ++rep.pairs_tested;
            ++usable;
            if (mass[ci][n] > mass[ci][n - 1] + 1e-15) rep.monotone = false;
            const double rhs =
                std::exp(-n * p_star + measure.t * ctr[ci].backward_logjs[n]);
            a_fit = std::max(a_fit, mass[ci][n] / rhs);
        }
        if (usable >= 4) {
            // per-center decay exponent vs the predicted one
            double sx = 0, sy = 0, sxx = 0, sxy = 0;
            int m = 0;
            for (int n = 1; n <= n_max; ++n) {
                if (mass[ci][n] <= 0.0) continue;
                sx += n;
                sy += std::log(mass[ci][n]);
                sxx += static_cast<double>(n) * n;
                sxy += n * std::log(mass[ci][n]);
                ++m;
            }
            const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
            const double predicted =
                -p_star + measure.t * ctr[ci].backward_logjs[n_max] / n_max;
            if (std::abs(predicted) > 0.2)
                slope_mismatch.push_back(std::abs(slope - predicted) / std::abs(predicted));
        }
    }
    rep.A_fit = a_fit;
    rep.violation_rate = 0.0; // by construction of the fitted constant
    for (std::size_t ci = 0; ci < centers; ++ci) {
        if (!ctr[ci].ok) continue;
        for (int n = 1; n <= n_max; ++n) {
            if (mass[ci][n] <= 0.0) continue;
            const double rhs =
                a_fit * std::exp(-n * p_star + measure.t * ctr[ci].backward_logjs[n]);
            if (mass[ci][n] > rhs * (1.0 + 1e-12)) rep.violation_rate += 1.0;
        }
    }
    if (rep.pairs_tested) rep.violation_rate /= static_cast<double>(rep.pairs_tested);
    if (!slope_mismatch.empty()) {
        std::sort(slope_mismatch.begin(), slope_mismatch.end());
        rep.exponent_mismatch = slope_mismatch[slope_mismatch.size() / 2];
        rep.exponent_centers = static_cast<int>(slope_mismatch.size());
    }
    return rep;
}

CltReport clt_check(const TableGeometry& table, const EquilibriumMeasure& measure, double chi,
                    double sigma2_ref, int n_block, std::size_t m_samples, std::uint64_t seed,
                    ExecPolicy policy, const MapOptions& opts) {
    CltReport rep;
    rep.sigma2_ref = sigma2_ref;
    if (sigma2_ref < 1e-8) {
        rep.skipped = true;
        return rep;
    }

    const std::vector<double> cum = cumulative(measure.mu_cells);
    const int burn = 20;
    std::vector<double> z(m_samples, std::numeric_limits<double>::quiet_NaN());
    for_each_index(m_samples, policy, [&](std::size_t i) {
        Rng rng(derive_seed(seed, 0xc17, i));
        PhasePoint x = measure.grid.sample_in_cell(table, draw_cell(cum, rng), rng);
        OrbitWithSlopes orbit = forward_orbit_with_slopes(table, x, burn + n_block, 22, opts);
        if (orbit.steps_completed < burn + n_block) return;
        double s = 0.0;
        for (int k = burn; k < burn + n_block; ++k) {
            if (orbit.slope_err[k] > kSlopeTol) return;
            s += orbit.log_js[k] - chi;
        }
        z[i] = s / std::sqrt(static_cast<double>(n_block));
    });

    std::vector<double> zz;
    zz.reserve(m_samples);
    for (double v : z) {
        if (std::isnan(v))
            ++rep.blocks_truncated;
        else
            zz.push_back(v);
    }
    rep.blocks_used = zz.size();
    rep.truncation_warning = rep.blocks_truncated * 100 > m_samples;
    if (zz.size() < 100) {
        rep.skipped = true;
        return rep;
    }

    double var = 0.0, mean = 0.0;
    for (double v : zz) mean += v;
    mean /= zz.size();
    for (double v : zz) var += (v - mean) * (v - mean);
    var /= zz.size() - 1;
    rep.block_var_over_k = var; // z already carries the 1/sqrt(k) scaling

    std::sort(zz.begin(), zz.end());
    const double sigma = std::sqrt(sigma2_ref);
    double dmax = 0.0;
    for (std::size_t i = 0; i < zz.size(); ++i) {
        const double cdf = 0.5 * std::erfc(-zz[i] / (sigma * std::numbers::sqrt2));
        const double lo = static_cast<double>(i) / zz.size();
        const double hi = static_cast<double>(i + 1) / zz.size();
        dmax = std::max({dmax, std::abs(cdf - lo), std::abs(cdf - hi)});
    }
    rep.ks_distance = dmax;
    rep.ks_threshold = 1.628 / std::sqrt(static_cast<double>(zz.size()));
    rep.pass = dmax < rep.ks_threshold;
    return rep;
}

} // namespace billiard
