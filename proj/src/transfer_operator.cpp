#include "billiard/transfer_operator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <cstdio>
#include <cstring>

#include "billiard/rng.hpp"

namespace billiard {

namespace {
constexpr double kSlopeTol = 1e-9;
}

UlamGrid::UlamGrid(const TableGeometry& table, UlamGridSpec spec) : spec_(spec) {
    const int per_scatterer = spec.n_r * spec.n_s;
    for (int sc = 0; sc < table.num_scatterers(); ++sc) {
        perimeter_.push_back(table.perimeter(sc));
        offset_.push_back(total_cells_);
        // uniform in (r, sin phi): every cell of a scatterer carries the same
        // share of the invariant reference measure
        mass_.push_back(table.perimeter(sc) * 2.0 /
                        (per_scatterer * 2.0 * table.boundary_length()));
        total_cells_ += per_scatterer;
    }
}

int UlamGrid::cell_of(const PhasePoint& x) const {
    const double per = perimeter_[x.scatterer_id];
    int ir = static_cast<int>(x.r / per * spec_.n_r);
    ir = std::clamp(ir, 0, spec_.n_r - 1);
    const double s = std::sin(x.phi);
    int is = static_cast<int>((s + 1.0) / 2.0 * spec_.n_s);
    is = std::clamp(is, 0, spec_.n_s - 1);
    return offset_[x.scatterer_id] + ir * spec_.n_s + is;
}

int UlamGrid::cell_scatterer(int cell) const {
    int sc = static_cast<int>(offset_.size()) - 1;
    while (sc > 0 && cell < offset_[sc]) --sc;
    return sc;
}

PhasePoint UlamGrid::sample_in_cell(const TableGeometry& table, int cell, Rng& rng) const {
    const int sc = cell_scatterer(cell);
    const int local = cell - offset_[sc];
    const int ir = local / spec_.n_s;
    const int is = local % spec_.n_s;
    const double per = perimeter_[sc];
    const double r = per * (ir + rng.uniform()) / spec_.n_r;
    const double s = -1.0 + 2.0 * (is + rng.uniform()) / spec_.n_s;
    return make_phase_point(table, sc, r, std::asin(std::clamp(s, -1.0 + 1e-15, 1.0 - 1e-15)));
}

UlamSampleCache build_ulam_cache(const TableGeometry& table, UlamGridSpec spec,
                                 int samples_per_cell, std::uint64_t seed, ExecPolicy policy,
                                 const MapOptions& opts) {
    if (samples_per_cell < 16)
        throw std::invalid_argument("build_ulam_cache: need at least 16 samples per cell");
    UlamSampleCache cache;
    cache.grid = UlamGrid(table, spec);
    cache.seed = seed;
    cache.samples_per_cell = samples_per_cell;

    const int cells = cache.grid.cell_count();
    std::vector<std::vector<std::int32_t>> dst(cells);
    std::vector<std::vector<double>> logjs(cells);
    std::vector<char> flag(cells, 0);

    for_each_index(static_cast<std::size_t>(cells), policy, [&](std::size_t ci) {
        Rng rng(derive_seed(seed, 0x071a, ci));
        const int retry_cap = samples_per_cell * 8;
        int accepted = 0, draws = 0;
        auto& d = dst[ci];
        auto& w = logjs[ci];
        d.reserve(samples_per_cell);
        w.reserve(samples_per_cell);
        while (accepted < samples_per_cell && draws < retry_cap) {
            ++draws;
            PhasePoint x = cache.grid.sample_in_cell(table, static_cast<int>(ci), rng);
            CollisionStep back = try_step_inverse(table, x, opts);
            if (back.status != StepStatus::ok) continue;
            // stable log-Jacobian at the backward image; its forward orbit
            // starts by returning through x, so one sweep covers both
            OrbitWithSlopes orbit = forward_orbit_with_slopes(table, back.to, 1, 22, opts);
            if (orbit.steps_completed < 1 || orbit.slope_err[0] > kSlopeTol) continue;
            d.push_back(cache.grid.cell_of(back.to));
            w.push_back(orbit.log_js[0]);
            ++accepted;
        }
        if (accepted * 2 < draws) flag[ci] = 1;
    });

    cache.row_begin.resize(cells + 1, 0);
    for (int ci = 0; ci < cells; ++ci)
        cache.row_begin[ci + 1] = cache.row_begin[ci] + static_cast<std::uint32_t>(dst[ci].size());
    cache.dst.reserve(cache.row_begin[cells]);
    cache.log_js.reserve(cache.row_begin[cells]);
    for (int ci = 0; ci < cells; ++ci) {
        cache.dst.insert(cache.dst.end(), dst[ci].begin(), dst[ci].end());
        cache.log_js.insert(cache.log_js.end(), logjs[ci].begin(), logjs[ci].end());
        if (flag[ci]) cache.flagged.push_back(ci);
    }
    return cache;
}

UlamOperator assemble_from_cache(const UlamSampleCache& cache, double t) {
    UlamOperator op;
    op.t = t;
    op.grid = cache.grid;
    op.flagged = cache.flagged;
    op.seed = cache.seed;
    op.samples_per_cell = cache.samples_per_cell;

    const int cells = cache.grid.cell_count();
    op.row_ptr.resize(cells + 1, 0);
    std::vector<std::pair<std::int32_t, double>> row;
    for (int ci = 0; ci < cells; ++ci) {
        row.clear();
        const std::uint32_t lo = cache.row_begin[ci], hi = cache.row_begin[ci + 1];
        for (std::uint32_t k = lo; k < hi; ++k)
            row.emplace_back(cache.dst[k], std::exp((t - 1.0) * cache.log_js[k]));
        std::sort(row.begin(), row.end());
        const double inv = hi > lo ? 1.0 / static_cast<double>(hi - lo) : 0.0;
        std::size_t out = op.col.size();
        for (std::size_t k = 0; k < row.size(); ++k) {
            if (out > op.row_ptr[ci] + 0 && !op.col.empty() && k > 0 &&
                row[k].first == row[k - 1].first) {
                op.val.back() += row[k].second * inv;
            } else {
                op.col.push_back(row[k].first);
                op.val.push_back(row[k].second * inv);
            }
            out = op.col.size();
        }
        op.row_ptr[ci + 1] = op.col.size();
    }
    return op;
}

UlamOperator assemble_ulam(const TableGeometry& table, double t, UlamGridSpec spec,
                           int samples_per_cell, std::uint64_t seed, ExecPolicy policy,
                           const MapOptions& opts) {
    if (!(t > 0.0)) throw std::invalid_argument("assemble_ulam: t must be positive");
    UlamSampleCache cache = build_ulam_cache(table, spec, samples_per_cell, seed, policy, opts);
    return assemble_from_cache(cache, t);
}

void UlamOperator::apply(const std::vector<double>& f, std::vector<double>& out) const {
    const int cells = grid.cell_count();
    out.assign(cells, 0.0);
    for (int i = 0; i < cells; ++i) {
        double acc = 0.0;
        for (std::size_t k = row_ptr[i]; k < row_ptr[i + 1]; ++k) acc += val[k] * f[col[k]];
        out[i] = acc;
    }
}

void UlamOperator::apply_transpose(const std::vector<double>& f, std::vector<double>& out) const {
    const int cells = grid.cell_count();
    out.assign(cells, 0.0);
    for (int i = 0; i < cells; ++i) {
        const double fi = f[i];
        if (fi == 0.0) continue;
        for (std::size_t k = row_ptr[i]; k < row_ptr[i + 1]; ++k) out[col[k]] += val[k] * fi;
    }
}

namespace {

double reference_mean(const UlamGrid& grid, const std::vector<double>& v) {
    double acc = 0.0;
    for (int i = 0; i < grid.cell_count(); ++i) acc += grid.srb_mass(i) * v[i];
    return acc;
}

void normalize_mean_one(const UlamGrid& grid, std::vector<double>& v) {
    const double m = reference_mean(grid, v);
    for (auto& x : v) x /= m;
}

} // namespace

EigenTriple leading_triple(const UlamOperator& op, double tol, int max_iters) {
    const int cells = op.grid.cell_count();
    EigenTriple tr;
    std::vector<double> f(cells, 1.0), tmp;
    std::vector<double> g_mass(cells);
    for (int i = 0; i < cells; ++i) g_mass[i] = op.grid.srb_mass(i);
    std::vector<double> f_avg(cells, 0.0);
    int averaged = 0;

    auto normalize_mass = [&](std::vector<double>& m) {
        double s = 0.0;
        for (double v : m) s += v;
        for (auto& v : m) v /= s;
    };
    normalize_mass(g_mass);

    for (int it = 0; it < max_iters; ++it) {
        op.apply(f, tmp);
        const double lam_f = reference_mean(op.grid, tmp) / reference_mean(op.grid, f);
        double delta_f = 0.0;
        for (int i = 0; i < cells; ++i)
            delta_f += op.grid.srb_mass(i) * std::abs(tmp[i] / lam_f - f[i]);
        f.swap(tmp);
        normalize_mean_one(op.grid, f);

        op.apply_transpose(g_mass, tmp);
        double lam_g = 0.0;
        for (double v : tmp) lam_g += v;
        double delta_g = 0.0;
        for (int i = 0; i < cells; ++i) delta_g += std::abs(tmp[i] / lam_g - g_mass[i]);
        g_mass.swap(tmp);
        normalize_mass(g_mass);

        tr.lambda = lam_f;
        tr.iterations = it + 1;
        if (it >= 16) {
            for (int i = 0; i < cells; ++i) f_avg[i] += f[i];
            ++averaged;
        }
        if (it > 20 && delta_f < tol && delta_g < tol) {
            tr.converged = true;
            break;
        }
    }
    tr.nu = f;
    tr.nu_tilde.resize(cells);
    for (int i = 0; i < cells; ++i) tr.nu_tilde[i] = g_mass[i] / op.grid.srb_mass(i);
    {
        std::vector<double> nt = tr.nu_tilde;
        double m = reference_mean(op.grid, nt);
        for (auto& v : tr.nu_tilde) v /= m;
    }

    if (averaged > 0) {
        normalize_mean_one(op.grid, f_avg);
        tr.nu_time_avg = f_avg;
        double dist = 0.0;
        for (int i = 0; i < cells; ++i)
            dist += op.grid.srb_mass(i) * std::abs(f_avg[i] - tr.nu[i]);
        tr.time_avg_agreement = dist;
    }

    for (double v : tr.nu)
        if (v < -1e-12) throw SpectralError("leading_triple: negative eigenvector entry");
    for (double v : tr.nu_tilde)
        if (v < -1e-12) throw SpectralError("leading_triple: negative dual entry");

    op.apply(tr.nu, tmp);
    double res = 0.0, nrm = 0.0;
    for (int i = 0; i < cells; ++i) {
        res += op.grid.srb_mass(i) * std::abs(tmp[i] - tr.lambda * tr.nu[i]);
        nrm += op.grid.srb_mass(i) * std::abs(tr.nu[i]);
    }
    tr.residual = res / (nrm * std::max(tr.lambda, 1e-300));
    if (!tr.converged)
        throw SpectralError("leading_triple: no convergence, residual " +
                            std::to_string(tr.residual));
    return tr;
}

double second_eigenvalue(const UlamOperator& op, const EigenTriple& triple, int iterations,
                         std::uint64_t seed) {
    const int cells = op.grid.cell_count();
    double pairing = 0.0;
    for (int i = 0; i < cells; ++i)
        pairing += op.grid.srb_mass(i) * triple.nu[i] * triple.nu_tilde[i];

    auto deflate = [&](std::vector<double>& w) {
        double c = 0.0;
        for (int i = 0; i < cells; ++i) c += op.grid.srb_mass(i) * w[i] * triple.nu_tilde[i];
        c /= pairing;
        for (int i = 0; i < cells; ++i) w[i] -= c * triple.nu[i];
    };

    Rng rng(derive_seed(seed, 0x2ded));
    std::vector<double> w(cells), tmp;
    for (auto& v : w) v = rng.uniform() - 0.5;
    deflate(w);

    // geometric-mean growth rate; robust when the subleading pair is complex
    double log_rate_acc = 0.0;
    int counted = 0;
    for (int it = 0; it < iterations; ++it) {
        double norm = 0.0;
        for (int i = 0; i < cells; ++i) norm += op.grid.srb_mass(i) * std::abs(w[i]);
        if (norm < 1e-280) break;
        for (auto& v : w) v /= norm;
        op.apply(w, tmp);
        w.swap(tmp);
        deflate(w);
        double norm2 = 0.0;
        for (int i = 0; i < cells; ++i) norm2 += op.grid.srb_mass(i) * std::abs(w[i]);
        if (it >= iterations / 2 && norm2 > 0.0) {
            log_rate_acc += std::log(norm2);
            ++counted;
        }
    }
    if (counted == 0) return 0.0;
    const double rate = std::exp(log_rate_acc / counted);
    return std::min(rate / triple.lambda, 1.0 - 1e-9);
}

EquilibriumMeasure equilibrium_measure(const TableGeometry& table, const UlamOperator& op,
                                       const EigenTriple& triple, std::uint64_t seed,
                                       ExecPolicy policy, const MapOptions& opts) {
    EquilibriumMeasure m;
    m.t = op.t;
    m.lambda = triple.lambda;
    m.grid = op.grid;
    m.nu = triple.nu;
    m.nu_tilde = triple.nu_tilde;

    const int cells = op.grid.cell_count();
    m.mu_cells.resize(cells);
    double total = 0.0;
    for (int i = 0; i < cells; ++i) {
        m.mu_cells[i] = std::max(0.0, triple.nu[i]) * std::max(0.0, triple.nu_tilde[i]) *
                        op.grid.srb_mass(i);
        total += m.mu_cells[i];
    }
    for (auto& v : m.mu_cells) v /= total;

    m.gap = second_eigenvalue(op, triple);

    m.min_cell_fraction = std::numeric_limits<double>::infinity();
    for (int i = 0; i < cells; ++i)
        m.min_cell_fraction = std::min(m.min_cell_fraction,
                                       m.mu_cells[i] / op.grid.srb_mass(i));

    // invariance: push fresh per-cell samples one step forward and re-bin
    const int push_samples = 256;
    std::vector<std::vector<double>> pushed_rows(cells);
    for_each_index(static_cast<std::size_t>(cells), policy, [&](std::size_t ci) {
        Rng rng(derive_seed(seed, 0xf02d, ci));
        std::vector<double>& row = pushed_rows[ci];
        row.assign(push_samples, -1);
        for (int s = 0; s < push_samples; ++s) {
            PhasePoint x = op.grid.sample_in_cell(table, static_cast<int>(ci), rng);
            CollisionStep cs = try_step(table, x, opts);
            if (cs.status != StepStatus::ok) continue;
            row[s] = op.grid.cell_of(cs.to);
        }
    });
    std::vector<double> pushed(cells, 0.0);
    std::vector<double> kept(cells, 0.0);
    for (int ci = 0; ci < cells; ++ci) {
        int ok = 0;
        for (double c : pushed_rows[ci])
            if (c >= 0) ++ok;
        if (ok == 0) continue;
        const double w = m.mu_cells[ci] / ok;
        for (double c : pushed_rows[ci])
            if (c >= 0) pushed[static_cast<int>(c)] += w;
        kept[ci] = m.mu_cells[ci];
    }
    double tv = 0.0, mass = 0.0;
    for (int i = 0; i < cells; ++i) mass += pushed[i];
    if (mass > 0)
        for (auto& v : pushed) v /= mass;
    for (int i = 0; i < cells; ++i) tv += std::abs(pushed[i] - m.mu_cells[i]);
    m.invariance_residual = 0.5 * tv;
    return m;
}

SpectralPressure pressure_from_spectrum(const TableGeometry& table, double t,
                                        const std::vector<UlamGridSpec>& ladder,
                                        int samples_per_cell, std::uint64_t seed,
                                        ExecPolicy policy, const MapOptions& opts) {
    if (ladder.size() < 2)
        throw std::invalid_argument("pressure_from_spectrum: need at least two grid levels");
    SpectralPressure sp;
    sp.t = t;
    for (const auto& spec : ladder) {
        UlamOperator op = assemble_ulam(table, t, spec, samples_per_cell, seed, policy, opts);
        EigenTriple tr = leading_triple(op);
        SpectralPressureLevel lvl;
        lvl.spec = spec;
        lvl.log_lambda = std::log(tr.lambda);
        lvl.gap = second_eigenvalue(op, tr);
        sp.levels.push_back(lvl);
    }
    const double fine = sp.levels.back().log_lambda;
    const double coarse = sp.levels[sp.levels.size() - 2].log_lambda;
    sp.extrapolated = fine + (fine - coarse);
    sp.level_spread = std::abs(fine - coarse);
    return sp;
}

namespace {

/// Cell draw proportional to weights; cumulative table + binary search.
struct CellSampler {
    std::vector<double> cum;
    explicit CellSampler(const std::vector<double>& w) {
        cum.resize(w.size());
        double acc = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            acc += w[i];
            cum[i] = acc;
        }
    }
    int draw(Rng& rng) const {
        const double u = rng.uniform() * cum.back();
        return static_cast<int>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    }
};

} // namespace

DerivativeEstimate pressure_derivatives(const TableGeometry& table,
                                        const EquilibriumMeasure& measure, int k_trunc,
                                        std::size_t trajectories, int traj_len,
                                        std::uint64_t seed, ExecPolicy policy,
                                        const MapOptions& opts) {
    if (k_trunc < 10) throw std::invalid_argument("pressure_derivatives: k_trunc too small");
    DerivativeEstimate est;
    est.t = measure.t;
    est.k_trunc = k_trunc;
    const int len = std::max(traj_len, k_trunc + 20);

    CellSampler sampler(measure.mu_cells);
    struct TrajStats {
        double sum = 0.0;
        std::size_t count = 0;
        std::vector<double> cov;  // per-lag sums of products
        std::vector<std::size_t> cov_n;
        std::vector<double> f;
        bool ok = false;
    };
    std::vector<TrajStats> stats(trajectories);

    for_each_index(trajectories, policy, [&](std::size_t ti) {
        Rng rng(derive_seed(seed, 0xd124, ti));
        TrajStats& st = stats[ti];
        const int cell = sampler.draw(rng);
        PhasePoint x0 = measure.grid.sample_in_cell(table, cell, rng);
        OrbitWithSlopes orbit = forward_orbit_with_slopes(table, x0, len, 22, opts);
        if (orbit.steps_completed < len / 2) return; // truncated; dropped
        const int usable = std::min<int>(orbit.steps_completed, len);
        st.f.reserve(usable);
        for (int k = 0; k < usable; ++k) {
            if (orbit.slope_err[k] > kSlopeTol) break;
            st.f.push_back(orbit.log_js[k]);
        }
        if (static_cast<int>(st.f.size()) < k_trunc + 10) return;
        st.ok = true;
        for (double v : st.f) st.sum += v;
        st.count = st.f.size();
    });

    // global mean of log J^s under the equilibrium weights
    double mean_acc = 0.0;
    std::size_t mean_n = 0;
    std::vector<double> traj_means;
    for (auto& st : stats) {
        if (!st.ok) continue;
        mean_acc += st.sum;
        mean_n += st.count;
        traj_means.push_back(st.sum / st.count);
    }
    if (traj_means.size() < 8)
        throw SpectralError("pressure_derivatives: too few usable trajectories");
    est.P1 = mean_acc / static_cast<double>(mean_n);
    double var_means = 0.0;
    for (double m : traj_means) var_means += (m - est.P1) * (m - est.P1);
    var_means /= traj_means.size() > 1 ? (traj_means.size() - 1) : 1;
    est.P1_stderr = std::sqrt(var_means / traj_means.size());

    // autocovariances around the global mean
    est.autocov.assign(k_trunc + 1, 0.0);
    std::vector<std::size_t> counts(k_trunc + 1, 0);
    std::vector<std::vector<double>> per_traj_cov(stats.size());
    for (std::size_t ti = 0; ti < stats.size(); ++ti) {
        auto& st = stats[ti];
        if (!st.ok) continue;
        per_traj_cov[ti].assign(k_trunc + 1, 0.0);
        for (int k = 0; k <= k_trunc; ++k) {
            double acc = 0.0;
            std::size_t n = 0;
            for (std::size_t j = 0; j + k < st.f.size(); ++j) {
                acc += (st.f[j] - est.P1) * (st.f[j + k] - est.P1);
                ++n;
            }
            per_traj_cov[ti][k] = n ? acc / n : 0.0;
            est.autocov[k] += acc;
            counts[k] += n;
        }
    }
    for (int k = 0; k <= k_trunc; ++k)
        est.autocov[k] = counts[k] ? est.autocov[k] / counts[k] : 0.0;

    est.P2 = est.autocov[0];
    for (int k = 1; k <= k_trunc; ++k) est.P2 += 2.0 * est.autocov[k];

    // spread of the same sum across trajectories
    std::vector<double> per_traj_p2;
    for (std::size_t ti = 0; ti < stats.size(); ++ti) {
        if (!stats[ti].ok) continue;
        double p2 = per_traj_cov[ti][0];
        for (int k = 1; k <= k_trunc; ++k) p2 += 2.0 * per_traj_cov[ti][k];
        per_traj_p2.push_back(p2);
    }
    double var_p2 = 0.0;
    for (double v : per_traj_p2) var_p2 += (v - est.P2) * (v - est.P2);
    var_p2 /= per_traj_p2.size() > 1 ? (per_traj_p2.size() - 1) : 1;
    est.P2_stderr = std::sqrt(var_p2 / per_traj_p2.size());

    const double partial = std::abs(est.P2) > 1e-300 ? std::abs(est.P2) : 1.0;
    est.tail_ratio = 2.0 * std::abs(est.autocov[k_trunc]) / partial;
    est.tail_warning = est.tail_ratio > 0.1;
    return est;
}

CorrelationCurve correlation(const TableGeometry& table, const EquilibriumMeasure& measure,
                             const GridObservable& f, const GridObservable& h, int k_max,
                             std::size_t trajectories, std::uint64_t seed, ExecPolicy policy,
                             const MapOptions& opts) {
    CorrelationCurve curve;
    const int len = k_max + 24;
    CellSampler sampler(measure.mu_cells);

    struct Row {
        bool ok = false;
        std::vector<double> fv, hv;
    };
    std::vector<Row> rows(trajectories);
    for_each_index(trajectories, policy, [&](std::size_t ti) {
        Rng rng(derive_seed(seed, 0xc0bb, ti));
        Row& row = rows[ti];
        const int cell = sampler.draw(rng);
        PhasePoint x = measure.grid.sample_in_cell(table, cell, rng);
        row.fv.reserve(len);
        row.hv.reserve(len);
        for (int k = 0; k < len; ++k) {
            row.fv.push_back(f.eval(table, x));
            row.hv.push_back(h.eval(table, x));
            CollisionStep cs = try_step(table, x, opts);
            if (cs.status != StepStatus::ok) return;
            x = cs.to;
        }
        row.ok = true;
    });

    double ef = 0.0, eh = 0.0;
    std::size_t n = 0;
    for (auto& row : rows) {
        if (!row.ok) continue;
        for (int j = 0; j < len; ++j) {
            ef += row.fv[j];
            eh += row.hv[j];
            ++n;
        }
    }
    if (n == 0) return curve;
    ef /= n;
    eh /= n;

    curve.lag_cov.assign(k_max + 1, 0.0);
    curve.band.assign(k_max + 1, 0.0);
    for (int k = 0; k <= k_max; ++k) {
        std::vector<double> per_traj;
        double acc = 0.0;
        std::size_t cnt = 0;
        for (auto& row : rows) {
            if (!row.ok) continue;
            double tacc = 0.0;
            std::size_t tn = 0;
            for (int j = 0; j + k < len; ++j) {
                tacc += (row.fv[j + k] - ef) * (row.hv[j] - eh);
                ++tn;
            }
            if (tn) per_traj.push_back(tacc / tn);
            acc += tacc;
            cnt += tn;
        }
        curve.lag_cov[k] = cnt ? acc / cnt : 0.0;
        double mean = per_traj.empty() ? 0.0 : curve.lag_cov[k];
        double var = 0.0;
        for (double v : per_traj) var += (v - mean) * (v - mean);
        var /= per_traj.size() > 1 ? per_traj.size() - 1 : 1;
        curve.band[k] = std::sqrt(var / std::max<std::size_t>(per_traj.size(), 1));
    }

    // exponential fit on lags that stand above the noise band
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (int k = 1; k <= k_max; ++k) {
        if (std::abs(curve.lag_cov[k]) < 3.0 * curve.band[k]) continue;
        if (k > 5 && m == 0) break;
        sx += k;
        sy += std::log(std::abs(curve.lag_cov[k]));
        sxx += static_cast<double>(k) * k;
        sxy += k * std::log(std::abs(curve.lag_cov[k]));
        ++m;
    }
    if (m >= 3) {
        curve.fit_rate = std::exp((m * sxy - sx * sy) / (m * sxx - sx * sx));
        curve.fit_ok = curve.fit_rate > 0.0 && curve.fit_rate < 1.0;
    }
    return curve;
}


namespace {
constexpr char kOpMagic[9] = "ULAMOP01";
}

void save_operator_cache(const std::string& path, const UlamOperator& op) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("save_operator_cache: cannot open " + path);
    std::fwrite(kOpMagic, 1, 8, f);
    const std::int32_t nr = op.grid.spec().n_r, ns = op.grid.spec().n_s;
    std::fwrite(&nr, sizeof nr, 1, f);
    std::fwrite(&ns, sizeof ns, 1, f);
    std::fwrite(&op.t, sizeof op.t, 1, f);
    std::fwrite(&op.seed, sizeof op.seed, 1, f);
    const std::int32_t spc = op.samples_per_cell;
    std::fwrite(&spc, sizeof spc, 1, f);
    const std::uint64_t rows = op.row_ptr.size(), nnz = op.col.size(),
                        nflag = op.flagged.size();
    std::fwrite(&rows, sizeof rows, 1, f);
    std::fwrite(&nnz, sizeof nnz, 1, f);
    std::fwrite(&nflag, sizeof nflag, 1, f);
    std::fwrite(op.row_ptr.data(), sizeof(std::size_t), rows, f);
    std::fwrite(op.col.data(), sizeof(std::int32_t), nnz, f);
    std::fwrite(op.val.data(), sizeof(double), nnz, f);
    if (nflag) std::fwrite(op.flagged.data(), sizeof(std::int32_t), nflag, f);
    std::fclose(f);
}

UlamOperator load_operator_cache(const std::string& path, const TableGeometry& table) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("load_operator_cache: cannot open " + path);
    char magic[8];
    if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kOpMagic, 8) != 0) {
        std::fclose(f);
        throw std::runtime_error("load_operator_cache: bad header in " + path);
    }
    UlamOperator op;
    std::int32_t nr = 0, ns = 0, spc = 0;
    std::uint64_t rows = 0, nnz = 0, nflag = 0;
    bool ok = std::fread(&nr, sizeof nr, 1, f) == 1 && std::fread(&ns, sizeof ns, 1, f) == 1 &&
              std::fread(&op.t, sizeof op.t, 1, f) == 1 &&
              std::fread(&op.seed, sizeof op.seed, 1, f) == 1 &&
              std::fread(&spc, sizeof spc, 1, f) == 1 &&
              std::fread(&rows, sizeof rows, 1, f) == 1 &&
              std::fread(&nnz, sizeof nnz, 1, f) == 1 &&
              std::fread(&nflag, sizeof nflag, 1, f) == 1;
    if (ok) {
        op.grid = UlamGrid(table, {nr, ns});
        op.samples_per_cell = spc;
        op.row_ptr.resize(rows);
        op.col.resize(nnz);
        op.val.resize(nnz);
        op.flagged.resize(nflag);
        ok = std::fread(op.row_ptr.data(), sizeof(std::size_t), rows, f) == rows &&
             std::fread(op.col.data(), sizeof(std::int32_t), nnz, f) == nnz &&
             std::fread(op.val.data(), sizeof(double), nnz, f) == nnz &&
             (nflag == 0 ||
              std::fread(op.flagged.data(), sizeof(std::int32_t), nflag, f) == nflag);
    }
    std::fclose(f);
    if (!ok) throw std::runtime_error("load_operator_cache: truncated file " + path);
    return op;
}

} // namespace billiard

