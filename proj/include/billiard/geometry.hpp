#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "billiard/parallel.hpp"
#include "billiard/vec2.hpp"

namespace billiard {

struct Disk {
    Vec2 center;   // in [0,1)^2 on the unit torus
    double radius = 0.0;
};

class InvalidTableError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Billiard table on the unit torus: the complement of a finite union of
/// disjoint closed disks. Immutable after construction; derived constants
/// (tau_min, curvature bounds, the expansion constant Lambda) are computed
/// once. Circles only: curvature is constant per scatterer and collisions
/// have closed-form solutions.
class TableGeometry {
public:
    TableGeometry(std::vector<Disk> disks, double q_exponent, int k0, double delta0);

    const std::vector<Disk>& disks() const { return disks_; }
    int num_scatterers() const { return static_cast<int>(disks_.size()); }

    double q_exponent() const { return q_; }
    int k0() const { return k0_; }
    double delta0() const { return delta0_; }

    /// Certified lower bound on the free flight: the minimum pairwise
    /// boundary gap over torus lifts. For circles this bound is attained by
    /// the normal flight between the closest pair, so it is exact.
    double tau_min() const { return tau_min_; }
    double K_min() const { return K_min_; }
    double K_max() const { return K_max_; }
    /// Hyperbolicity constant 1 + 2 tau_min K_min (> 1).
    double Lambda() const { return Lambda_; }
    double boundary_length() const { return boundary_length_; }

    double perimeter(int scatterer_id) const { return perimeters_.at(scatterer_id); }
    double radius(int scatterer_id) const { return disks_.at(scatterer_id).radius; }
    double curvature(int scatterer_id) const { return 1.0 / disks_.at(scatterer_id).radius; }

    /// Upper edge of the stable/unstable cone slope band: K_max + 1/tau_min.
    double cone_slope_max() const { return K_max_ + 1.0 / tau_min_; }
    double cone_slope_min() const { return K_min_; }

    bool finite_horizon_checked() const { return finite_horizon_checked_; }
    bool finite_horizon_verdict() const { return finite_horizon_verdict_; }
    void record_horizon_verdict(bool verdict) {
        finite_horizon_checked_ = true;
        finite_horizon_verdict_ = verdict;
    }

private:
    std::vector<Disk> disks_;
    double q_;
    int k0_;
    double delta0_;
    std::vector<double> perimeters_;
    double tau_min_ = 0.0;
    double K_min_ = 0.0;
    double K_max_ = 0.0;
    double Lambda_ = 1.0;
    double boundary_length_ = 0.0;
    bool finite_horizon_checked_ = false;
    bool finite_horizon_verdict_ = false;
};

/// A point on a scatterer boundary with its torus position, the unit normal
/// pointing into the billiard domain (away from the disk center), and the
/// curvature there. r is arclength, counterclockwise, r = 0 at angle 0 from
/// the center; reduced mod perimeter.
struct BoundaryPoint {
    int scatterer_id = 0;
    double r = 0.0;
    Vec2 position;
    Vec2 inward_normal;
    double curvature = 0.0;
};

BoundaryPoint boundary_point(const TableGeometry& table, int scatterer_id, double r);

struct ValidationReport {
    bool valid = false;
    // min boundary gap between scatterer pair (i,j) over torus lifts
    std::vector<std::vector<double>> pairwise_gap;
    double tau_min = 0.0;
    double tau_max_empirical = 0.0;
    bool finite_horizon = false;
    double Lambda = 1.0;
    int direction_samples = 0;
    double horizon_bound = 0.0;
    std::size_t rays_cast = 0;
    std::size_t rays_escaped = 0;       // rays with no hit within horizon_bound
    // densest grazing corridor found: longest flight and where it started
    double longest_flight = 0.0;
    int longest_flight_scatterer = -1;
    double longest_flight_r = 0.0;
    double longest_flight_phi = 0.0;

    std::string to_json() const;
};

/// Sampled finite-horizon certificate: casts a deterministic grid of rays
/// from every scatterer boundary, with a refinement pass around the longest
/// flights found (grazing corridors drift slowly, so local refinement in
/// direction is the cheap way to expose them). The verdict is evidence, not
/// proof; the report records the densest corridor seen.
ValidationReport validate_table(const TableGeometry& table, int direction_samples,
                                double horizon_bound,
                                ExecPolicy policy = ExecPolicy::parallel);

/// Parses {"disks":[{"center":[x,y],"radius":r},...],"q":3,"k0":3,"delta0":0.05}.
TableGeometry table_from_json(const std::string& json_text);
std::string table_to_json(const TableGeometry& table);

/// Two disks of radius 1/4 at (0,0) and (1/2,1/2), q = 3, k0 = 3,
/// delta0 = 0.05. The workhorse configuration for tests and experiments.
TableGeometry default_table();

} // namespace billiard
