#pragma once

#include <cstdint>
#include <vector>

#include "billiard/singularity.hpp"
#include "billiard/transfer_operator.hpp"

namespace billiard {

/// Point cloud drawn from an equilibrium measure: cells proportional to
/// their weights, positions uniform in (r, sin phi) within the cell.
struct MeasureSample {
    std::vector<PhasePoint> points;
    std::uint64_t seed = 0;
    double t = 1.0;
};

MeasureSample sample_measure(const TableGeometry& table, const EquilibriumMeasure& measure,
                             std::size_t count, std::uint64_t seed,
                             ExecPolicy policy = ExecPolicy::parallel);

/// Uniform draw from the smooth invariant measure (direct, no dynamics).
MeasureSample sample_srb(const TableGeometry& table, std::size_t count, std::uint64_t seed);

/// Monte Carlo mean of log J^u under the smooth invariant measure.
struct SrbAverage {
    double mean = 0.0;
    double stderr_ = 0.0;
    std::size_t used = 0, skipped = 0;
};
SrbAverage srb_average_log_ju(const TableGeometry& table, std::size_t count,
                              std::uint64_t seed, ExecPolicy policy = ExecPolicy::parallel,
                              const MapOptions& opts = {});

/// Integrability diagnostic of |log d(x, singular set)| with dyadic shells.
struct ShellCurve {
    double estimate = 0.0;        // resolved part of the integral
    double tail_extrapolated = 0.0;
    bool tail_flagged = false;    // resolution floor reached, tail fitted
    bool tail_decaying = false;   // shell contributions decay at the deep end
    std::vector<double> shell_mass;    // index j: distance in [2^-j-1, 2^-j)
    std::vector<double> shell_contrib; // mass-weighted |log d|
    std::size_t floored = 0;
    double resolution = 0.0;
};

ShellCurve adaptedness_integral(const TableGeometry& table, const MeasureSample& sample,
                                const SingularCurveSet& forward_set,
                                const SingularCurveSet& backward_set);

struct ScalingFit {
    double slope = 0.0;
    int points_used = 0;
    std::vector<double> eps;
    std::vector<double> mass;
};

class InsufficientRangeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Log-log slope of the measure of eps-neighborhoods of a singular set;
/// curves == nullptr uses the tangency lines alone.
ScalingFit neighborhood_scaling(const TableGeometry& table, const MeasureSample& sample,
                                const SingularCurveSet* curves,
                                const std::vector<double>& epsilons);

struct EntropyReport {
    double t = 0.0;
    double log_lambda = 0.0;
    double P1 = 0.0;
    double h_mu = 0.0;           // log lambda - t * P1
    double lyapunov = 0.0;       // -P1, the unstable-Jacobian mean
    double chi_u_reference = 0.0;
    double pesin_residual = 0.0; // |h_mu - chi_u| / chi_u, meaningful at t = 1
};

EntropyReport entropy_identities(const EquilibriumMeasure& measure,
                                 const DerivativeEstimate& derivs, double chi_u_reference);

struct BowenReport {
    double eps = 0.0;
    int n_max = 0;
    double t = 0.0;
    double A_fit = 0.0;          // smallest constant making the bound hold
    double violation_rate = 0.0; // fraction of (center, n) pairs above A_fit
    std::size_t pairs_tested = 0;
    std::size_t pairs_skipped = 0; // balls with no sample hits
    bool monotone = true;          // ball masses non-increasing in n
    double exponent_mismatch = 0.0; // worst relative slope disagreement
    int exponent_centers = 0;
};

/// Upper-bound structure of dynamical-ball masses: mu(B_n(x, eps)) against
/// exp(-n P + t sum log J^s along the backward orbit of x).
BowenReport bowen_ball_check(const TableGeometry& table, const EquilibriumMeasure& measure,
                             double p_star, std::size_t centers, int n_max, double eps,
                             std::size_t sample_count, std::uint64_t seed,
                             ExecPolicy policy = ExecPolicy::parallel,
                             const MapOptions& opts = {});

struct CltReport {
    bool skipped = false;      // variance indistinguishable from zero
    bool pass = false;
    double ks_distance = 0.0;
    double ks_threshold = 0.0;
    double block_var_over_k = 0.0;
    double sigma2_ref = 0.0;
    std::size_t blocks_used = 0;
    std::size_t blocks_truncated = 0;
    bool truncation_warning = false;
};

/// Gaussian block-sum test for the stable log-Jacobian under the
/// equilibrium measure: compares normalized block sums against
/// Normal(0, sigma2_ref) at level alpha = 0.01.
CltReport clt_check(const TableGeometry& table, const EquilibriumMeasure& measure, double chi,
                    double sigma2_ref, int n_block, std::size_t m_samples, std::uint64_t seed,
                    ExecPolicy policy = ExecPolicy::parallel, const MapOptions& opts = {});

} // namespace billiard
