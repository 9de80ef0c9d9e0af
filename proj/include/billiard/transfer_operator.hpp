#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "billiard/billiard_map.hpp"
#include "billiard/complexity.hpp"
#include "billiard/geometry.hpp"
#include "billiard/parallel.hpp"
#include "billiard/rng.hpp"

namespace billiard {

struct UlamGridSpec {
    int n_r = 48;
    int n_s = 48; // rows in sin(phi); equalizes invariant mass near tangency
};

/// Rectangular grid per scatterer in (r, sin phi). The invariant reference
/// measure is uniform in these coordinates, so cell masses depend only on
/// the scatterer perimeter.
class UlamGrid {
public:
    UlamGrid() = default;
    UlamGrid(const TableGeometry& table, UlamGridSpec spec);

    int cell_count() const { return total_cells_; }
    const UlamGridSpec& spec() const { return spec_; }
    int cell_of(const PhasePoint& x) const;
    double srb_mass(int cell) const { return mass_[cell_scatterer(cell)]; }
    int cell_scatterer(int cell) const;
    /// Uniform draw in (r, sin phi) within the cell.
    PhasePoint sample_in_cell(const TableGeometry& table, int cell, Rng& rng) const;

private:
    UlamGridSpec spec_;
    std::vector<double> perimeter_;
    std::vector<int> offset_; // first cell index of each scatterer
    std::vector<double> mass_;
    int total_cells_ = 0;
};

/// t-independent Monte Carlo backbone of the discretized transfer operator:
/// per accepted sample, the source cell, the backward-image cell, and the
/// stable log-Jacobian at the image. Any exponent is assembled from it by
/// reweighting only.
struct UlamSampleCache {
    UlamGrid grid;
    std::uint64_t seed = 0;
    int samples_per_cell = 0;
    std::vector<std::uint32_t> row_begin; // per cell, into the arrays below
    std::vector<std::int32_t> dst;
    std::vector<double> log_js;
    std::vector<std::int32_t> flagged; // cells with > 50% rejected draws
};

UlamSampleCache build_ulam_cache(const TableGeometry& table, UlamGridSpec spec,
                                 int samples_per_cell, std::uint64_t seed,
                                 ExecPolicy policy = ExecPolicy::parallel,
                                 const MapOptions& opts = {});

/// Sparse weighted transition matrix: row i holds the cell-averaged weights
/// of backward images of cell i.
struct UlamOperator {
    double t = 1.0;
    UlamGrid grid;
    std::vector<std::size_t> row_ptr;
    std::vector<std::int32_t> col;
    std::vector<double> val;
    std::vector<std::int32_t> flagged;
    std::uint64_t seed = 0;
    int samples_per_cell = 0;

    void apply(const std::vector<double>& f, std::vector<double>& out) const;
    void apply_transpose(const std::vector<double>& f, std::vector<double>& out) const;
};

UlamOperator assemble_from_cache(const UlamSampleCache& cache, double t);
UlamOperator assemble_ulam(const TableGeometry& table, double t, UlamGridSpec spec,
                           int samples_per_cell, std::uint64_t seed,
                           ExecPolicy policy = ExecPolicy::parallel,
                           const MapOptions& opts = {});

struct EigenTriple {
    double lambda = 0.0;
    std::vector<double> nu;       // right eigenvector, density against the
                                  // invariant reference measure
    std::vector<double> nu_tilde; // left eigenvector, same normalization
    double residual = 0.0;        // reference-weighted l1 residual
    int iterations = 0;
    bool converged = false;
    // resolvent-style time average of the iterates, kept as a cross-check:
    // with a spectral gap it converges to the same direction
    std::vector<double> nu_time_avg;
    double time_avg_agreement = 0.0; // l1 distance between nu and the average
};

class SpectralError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Power iteration for the leading triple; eigenvectors are nonnegative and
/// normalized to reference-measure mean one. Convergence is declared on the
/// l1 change of the iterates, so the dual pairing identities hold to the
/// same tolerance.
EigenTriple leading_triple(const UlamOperator& op, double tol = 1e-11, int max_iters = 4000);

/// Modulus of the subleading spectrum via deflated power iteration; returns
/// the gap ratio |lambda_2| / lambda_1 in [0, 1).
double second_eigenvalue(const UlamOperator& op, const EigenTriple& triple,
                         int iterations = 400, std::uint64_t seed = 71);

struct EquilibriumMeasure {
    double t = 1.0;
    double lambda = 0.0;
    UlamGrid grid;
    std::vector<double> nu;
    std::vector<double> nu_tilde;
    std::vector<double> mu_cells; // normalized weights, nu * nu_tilde * mass
    double gap = 0.0;             // |lambda_2| / lambda
    double invariance_residual = 0.0;
    double min_cell_fraction = 0.0; // min mu(cell)/mass(cell): support check
};

EquilibriumMeasure equilibrium_measure(const TableGeometry& table, const UlamOperator& op,
                                       const EigenTriple& triple,
                                       std::uint64_t seed = 1234,
                                       ExecPolicy policy = ExecPolicy::parallel,
                                       const MapOptions& opts = {});

/// Versioned binary snapshot of an assembled operator (grid spec, exponent,
/// seed, CSR triplets).
void save_operator_cache(const std::string& path, const UlamOperator& op);
UlamOperator load_operator_cache(const std::string& path, const TableGeometry& table);

struct SpectralPressureLevel {
    UlamGridSpec spec;
    double log_lambda = 0.0;
    double gap = 0.0;
};

struct SpectralPressure {
    double t = 0.0;
    std::vector<SpectralPressureLevel> levels;
    double extrapolated = 0.0; // two-level extrapolation toward zero cell size
    double level_spread = 0.0;
};

SpectralPressure pressure_from_spectrum(const TableGeometry& table, double t,
                                        const std::vector<UlamGridSpec>& ladder,
                                        int samples_per_cell, std::uint64_t seed,
                                        ExecPolicy policy = ExecPolicy::parallel,
                                        const MapOptions& opts = {});

struct DerivativeEstimate {
    double t = 0.0;
    double P1 = 0.0;       // mean of log J^s under the equilibrium weights
    double P1_stderr = 0.0;
    double P2 = 0.0;       // Green-Kubo sum C0 + 2 sum_{k>=1} C_k
    double P2_stderr = 0.0;
    int k_trunc = 0;
    double tail_ratio = 0.0; // last-term share of the partial sum
    bool tail_warning = false;
    std::vector<double> autocov; // C_k for k = 0..k_trunc
};

DerivativeEstimate pressure_derivatives(const TableGeometry& table,
                                        const EquilibriumMeasure& measure, int k_trunc,
                                        std::size_t trajectories, int traj_len,
                                        std::uint64_t seed,
                                        ExecPolicy policy = ExecPolicy::parallel,
                                        const MapOptions& opts = {});

struct CorrelationCurve {
    std::vector<double> lag_cov;  // covariance of f(T^k .) and h(.) under mu_t
    std::vector<double> band;     // Monte Carlo error per lag
    double fit_rate = 0.0;        // exponential decay rate per step, in (0,1]
    bool fit_ok = false;
};

CorrelationCurve correlation(const TableGeometry& table, const EquilibriumMeasure& measure,
                             const GridObservable& f, const GridObservable& h, int k_max,
                             std::size_t trajectories, std::uint64_t seed,
                             ExecPolicy policy = ExecPolicy::parallel,
                             const MapOptions& opts = {});

} // namespace billiard
