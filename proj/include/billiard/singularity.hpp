#pragma once

#include <cstdint>
#include <vector>

#include "billiard/billiard_map.hpp"
#include "billiard/geometry.hpp"

namespace billiard {

// Homogeneity strips: band k (|k| >= k0) collects angles with
// (k+1)^{-q} <= pi/2 - |phi| < k^{-q}, signed like phi; band 0 is the bulk
// min(pi/2 - phi, pi/2 + phi) >= k0^{-q}. Exact hits on an interior band
// boundary go to the larger |k|.
struct StripIndex {
    int k = 0;
};

StripIndex strip_index(const TableGeometry& table, double phi);
inline StripIndex strip_index(const TableGeometry& table, const PhasePoint& x) {
    return strip_index(table, x.phi);
}

enum class OrbitDirection { forward, backward };

struct ItineraryStep {
    int scatterer_id = 0;
    int strip_k = 0;
};

/// Symbolic address of a point: scatterer and strip of each iterate.
struct Itinerary {
    std::vector<ItineraryStep> symbols;
    OrbitDirection direction = OrbitDirection::forward;
    bool complete = true; // false when the orbit hit the tangency band early
};

class TruncatedItineraryError : public std::runtime_error {
public:
    TruncatedItineraryError(const std::string& msg, Itinerary partial)
        : std::runtime_error(msg), achieved(std::move(partial)) {}
    Itinerary achieved;
};

Itinerary try_itinerary(const TableGeometry& table, const PhasePoint& x, int n,
                        OrbitDirection direction, const MapOptions& opts = {});
Itinerary itinerary(const TableGeometry& table, const PhasePoint& x, int n,
                    OrbitDirection direction, const MapOptions& opts = {});

/// 128-bit accumulator for partition-element addresses. Besides the
/// (scatterer, strip) symbols it folds in the lattice cell of every flight,
/// which separates branches that share coarse symbols after a long flight
/// wraps the torus differently.
struct ClassKey {
    std::uint64_t hi = 0xcbf29ce484222325ULL;
    std::uint64_t lo = 0x100000001b3ULL;
    bool operator==(const ClassKey& o) const { return hi == o.hi && lo == o.lo; }

    void push(std::uint64_t word) {
        hi ^= word;
        hi *= 0x100000001b3ULL;
        hi ^= hi >> 29;
        lo += word ^ (hi * 0x9e3779b97f4a7c15ULL);
        lo *= 0xc2b2ae3d27d4eb4fULL;
        lo ^= lo >> 31;
    }
    void push_strip(int k) { push(0x5354u ^ (static_cast<std::uint64_t>(static_cast<std::uint32_t>(k)) << 16)); }
    void push_flight(int target_id, int dx, int dy) {
        std::uint64_t w = 0x464cu;
        w ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(target_id)) << 16;
        w ^= static_cast<std::uint64_t>(static_cast<std::uint16_t>(dx)) << 32;
        w ^= static_cast<std::uint64_t>(static_cast<std::uint16_t>(dy)) << 48;
        push(w);
    }
};

struct ClassKeyHasher {
    std::size_t operator()(const ClassKey& k) const {
        return static_cast<std::size_t>(k.hi ^ (k.lo * 0x9e3779b97f4a7c15ULL));
    }
};

struct SingularBranch {
    int scatterer_id = 0;
    std::vector<Vec2> vertices; // (r, phi)
};

/// Nearest-segment queries over a set of polylines on one table, with a
/// bucket grid per scatterer; r wraps around the perimeter.
class SegmentIndex {
public:
    SegmentIndex() = default;
    SegmentIndex(const TableGeometry& table, const std::vector<SingularBranch>& branches);
    double distance(const PhasePoint& x) const;
    bool empty() const { return total_segments_ == 0; }

private:
    struct Grid {
        double perimeter = 0.0;
        int nr = 0, nphi = 0;
        double dr = 0.0, dphi = 0.0;
        std::vector<std::vector<std::uint32_t>> buckets;
        std::vector<Vec2> seg_a, seg_b;
    };
    std::vector<Grid> grids_;
    std::size_t total_segments_ = 0;
};

/// Polyline approximation of the singularity set. Positive level n holds the
/// tangency set itself plus its first n backward preimages (the curves cut by
/// the n-step forward map, stable-cone slopes); negative level holds forward
/// images (slopes transverse to the stable cone). The tangency lines
/// phi = +-pi/2 are kept implicitly and included in distance queries.
struct SingularCurveSet {
    int level = 0;
    double resolution = 0.0;
    bool complete = true; // false when the refinement budget ran out
    std::vector<SingularBranch> branches;
    SegmentIndex index;

    /// Distance from x to the set, including the tangency lines; accuracy is
    /// bounded by `resolution`.
    double distance(const PhasePoint& x) const;
};

SingularCurveSet singularity_curves(const TableGeometry& table, int level,
                                    double resolution = 1e-3,
                                    std::size_t budget_vertices = 400000,
                                    const MapOptions& opts = {});

double distance_to_singularity(const TableGeometry& table, const PhasePoint& x,
                               const SingularCurveSet& curves);

} // namespace billiard
