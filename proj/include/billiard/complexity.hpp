#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "billiard/billiard_map.hpp"
#include "billiard/geometry.hpp"
#include "billiard/parallel.hpp"
#include "billiard/singularity.hpp"

namespace billiard {

/// Stratified-jitter sampling of phase space in (r, sin phi) coordinates,
/// with geometric refinement layers toward the tangency lines where the
/// partition elements thin out.
struct SamplingPlan {
    int grid_r = 384;
    int grid_s = 384;          // sin(phi) rows per scatterer
    int tangency_layers = 6;   // dyadic refinement bands near sin(phi) = +-1
    int tangency_rows = 24;    // rows per refinement band
    std::uint64_t seed = 1;
};

/// A bounded observable given as a grid function on (r, sin phi), evaluated
/// by bilinear interpolation. Used for the weighted complexity sums.
struct GridObservable {
    int n_r = 0, n_s = 0;
    std::vector<std::vector<double>> values; // per scatterer, row-major r x s
    double sup_norm = 0.0;
    double grad_norm = 0.0; // reported Lipschitz-style constant

    double eval(const TableGeometry& table, const PhasePoint& x) const;
};

GridObservable make_grid_observable(const TableGeometry& table, int n_r, int n_s,
                                    const std::function<double(const PhasePoint&)>& f);

struct ClassAggregate {
    double max_log_weight = -1e300; // max of sum(log J^s) (+ Birkhoff sum of g)
    std::uint32_t count = 0;
    float r_min = 0, r_max = 0, phi_min = 0, phi_max = 0;

    double diam() const {
        const double dr = r_max - r_min, dp = phi_max - phi_min;
        return std::sqrt(dr * dr + dp * dp);
    }
};

using ClassMap = std::unordered_map<ClassKey, ClassAggregate, ClassKeyHasher>;

/// One pass over the sample set computing, for every horizon n <= n_max, the
/// partition classes (itinerary addresses) and per-class maxima of the
/// stable-Jacobian Birkhoff sums. The same sweep serves every t > 0 because
/// the maximizer of t * S is the maximizer of S.
struct QnSweep {
    int n_max = 0;
    std::vector<ClassMap> with_strips;    // index n-1: addresses of the n-step partition
    std::vector<ClassMap> plain;          // strip-free addresses (component counting)
    std::size_t samples_total = 0;
    std::vector<std::size_t> skipped;     // per n: samples unusable at that horizon
    SamplingPlan plan;
};

QnSweep sweep_qn(const TableGeometry& table, int n_max, const SamplingPlan& plan,
                 ExecPolicy policy = ExecPolicy::parallel, const MapOptions& opts = {});

struct ComplexityEstimate {
    int n = 0;
    double t = 0.0;
    double value = 0.0;       // inflated upper estimate of the weighted sum
    double value_raw = 0.0;   // plain sum of per-class sample maxima
    std::size_t class_count = 0;
    std::size_t samples = 0;
    std::size_t skipped = 0;
    bool skip_warning = false; // skip fraction above 1%
    int largest_strip_resolved = 0;
};

/// Distortion constant for stable-Jacobian ratios along weakly homogeneous
/// stable curves, fitted from sampled pairs; exponent 1/(q+1).
struct DistortionFit {
    double c_fitted = 0.0;
    double exponent = 0.0;
    std::size_t pairs = 0;
};

DistortionFit fit_distortion_constant(const TableGeometry& table, int n_steps,
                                      int curve_count, std::uint64_t seed,
                                      const MapOptions& opts = {});

ComplexityEstimate estimate_Qn(const TableGeometry& table, double t, int n,
                               const QnSweep& sweep, double distortion_c = 0.0);

/// Weighted variant with a nonzero potential correction g; runs its own pass
/// because the per-class maximizer depends on g. Accepts only small g.
ComplexityEstimate estimate_Qn_weighted(const TableGeometry& table, double t, int n,
                                        const GridObservable& g, const SamplingPlan& plan,
                                        double distortion_c = 0.0,
                                        ExecPolicy policy = ExecPolicy::parallel);

struct PressurePoint {
    double t = 0.0;
    double estimate = 0.0;     // point estimate (see decisions in the report)
    double inf_estimate = 0.0; // min_n (1/n) log Q_n: upper bound by submultiplicativity
    double slope_fit = 0.0;    // least-squares growth rate of log Q_n
    double last_over_n = 0.0;  // (1/n_max) log Q_{n_max}
    double spread = 0.0;
    int n_max = 0;
    std::size_t class_count = 0;
    bool resolution_exhausted = false; // class count within 2x of sample count
    std::vector<double> log_qn;        // index n-1
};

PressurePoint estimate_pressure(const TableGeometry& table, double t, int n_max,
                                const QnSweep& sweep, double distortion_c = 0.0);

/// Backward-decomposition statistics of an ensemble of seed stable curves:
/// for every horizon n, the per-piece sup log-Jacobians of the n-step
/// decomposition. The weighted sums over these pieces grow at the same
/// exponential rate as the complexity sums but with piece counts that stay
/// polynomially bounded in the horizon, so they resolve horizons far beyond
/// what direct class sampling can reach.
struct GrowthSweep {
    int n_max = 0;
    double delta = 0.0;
    std::vector<std::vector<std::vector<double>>> piece_logs;  // [curve][n-1][piece]
    std::vector<std::vector<std::vector<double>>> piece_mults; // roulette multipliers
    std::vector<double> curve_length;
};

GrowthSweep sweep_growth(const TableGeometry& table, int n_max, int curve_count, double delta,
                         std::uint64_t seed, ExecPolicy policy = ExecPolicy::parallel,
                         const MapOptions& opts = {});

/// Growth-rate estimators of the ensemble sums; same estimator triple as the
/// class-sampling route.
PressurePoint estimate_pressure(const TableGeometry& table, double t, int n_max,
                                const GrowthSweep& sweep);

struct HStarEstimate {
    double estimate = 0.0;   // slope fit of log counts
    double inf_estimate = 0.0;
    double spread = 0.0;
    std::vector<std::size_t> counts; // index n-1: distinct strip-free addresses
};

HStarEstimate estimate_h_star(const TableGeometry& table, int n_max, const QnSweep& sweep);

struct SparseRecurrenceEstimate {
    double s0 = 0.0;            // worst fraction of high-angle collisions
    double phi0 = 0.0;
    int n0 = 0;
    std::size_t segments = 0;
    double h_star = 0.0;
    bool verdict = false;       // h_star > s0 log 2
};

SparseRecurrenceEstimate sparse_recurrence_statistic(const TableGeometry& table, double phi0,
                                                     int n0, std::size_t segments,
                                                     std::uint64_t seed, double h_star,
                                                     ExecPolicy policy = ExecPolicy::parallel);

struct TStarEstimate {
    double value = 0.0;
    double lower = 0.0, upper = 0.0;
    bool bounded = false; // false: no crossing inside the curve's range
};

/// Largest t with Lambda^{-t} < exp(P(t)), from a sampled pressure curve.
TStarEstimate estimate_t_star(const std::vector<PressurePoint>& curve, double Lambda);

// ---------------------------------------------------------------------------
// Stable curves and their backward evolution

struct CurveVertex {
    double r = 0.0, phi = 0.0;
    double slope = 0.0;    // tangent dphi/dr, inside the stable cone
    double param = 0.0;    // arclength position on the generation-0 curve
    double log_j = 0.0;    // accumulated log Jacobian of the forward n-step map
};

struct StableCurve {
    int scatterer_id = 0;
    std::vector<CurveVertex> vertices;
    bool homogeneous = true;   // single homogeneity band
    double weight_mult = 1.0;  // survival multiplier from roulette thinning

    double length() const;
};

/// Integrates the stable line field through x to a curve of total length
/// about 2*half_len (shorter if the field is interrupted).
std::optional<StableCurve> grow_stable_curve(const TableGeometry& table, const PhasePoint& x,
                                             double half_len, double step_len,
                                             const MapOptions& opts = {});

struct CurveEvolution {
    std::vector<StableCurve> pieces;
    std::vector<double> sup_jacobian;   // per piece: |J T^n|_{C0} along the piece
    std::vector<double> image_length;   // per piece: length of its forward image in W
    bool complete = true;               // refinement budget respected
};

/// n-fold backward images of W, cut at tangency and homogeneity-band
/// crossings, long pieces subdivided to lengths in [delta/2, delta].
CurveEvolution evolve_stable_curve(const TableGeometry& table, const StableCurve& W, int n,
                                   double delta, const MapOptions& opts = {});

struct ExpansionSumResult {
    double sum = 0.0;        // sum over components of sup |J T|_* ^ t
    double theta_hat = 0.0;  // sum^(1/t)
    double tail = 0.0;       // analytic bound for strips beyond the resolved range
    int strips_resolved = 0;
    int components = 0;
};

/// One-step expansion functional of a short stable curve: the backward image
/// is decomposed into maximal weakly homogeneous components (with strip
/// parameters q, k0 that may differ from the table's) and the adapted-metric
/// sup Jacobian of each component is summed to the power t.
ExpansionSumResult one_step_expansion_sum(const TableGeometry& table, const StableCurve& W,
                                          double t, double q, int k0,
                                          const MapOptions& opts = {});

struct ExpansionParams {
    double theta = 0.0; // midpoint of (Lambda^-1, Lambda^-1/2)
    double q = 0.0;
    int k0 = 0;
    double delta0_bar = 0.0;  // certified curve-length scale for the bound
    double worst_ratio = 0.0; // max over probe curves of sum / theta^t
};

/// Chooses band spacing, cutoff and length scale for the one-step expansion
/// bound: q is raised until the tangential tail converges at the smallest
/// exponent, then (k0, delta0_bar) are scanned until the bound holds with
/// margin on a probe family that includes curves crossing a tangency fan.
ExpansionParams choose_expansion_params(const TableGeometry& table, double t0, double t1,
                                        int probe_curves, std::uint64_t seed,
                                        const MapOptions& opts = {});

/// Weighted fraction of the backward decomposition carried by short pieces
/// (length below delta1/3) after n steps.
double short_piece_fraction(const TableGeometry& table, const StableCurve& W, int n,
                            double delta1, double t, const MapOptions& opts = {});

} // namespace billiard
