#include "billiard/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "billiard/billiard_map.hpp"
#include "json.hpp"

namespace billiard {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_unit(double v) {
    double w = std::fmod(v, 1.0);
    if (w < 0.0) w += 1.0;
    return w;
}

} // namespace

TableGeometry::TableGeometry(std::vector<Disk> disks, double q_exponent, int k0,
                             double delta0)
    : disks_(std::move(disks)), q_(q_exponent), k0_(k0), delta0_(delta0) {
    if (disks_.empty()) throw InvalidTableError("table needs at least one scatterer");
    if (q_ <= 1.0) throw InvalidTableError("homogeneity exponent q must exceed 1");
    if (k0_ < 1) throw InvalidTableError("first strip index k0 must be >= 1");
    if (delta0_ <= 0.0 || delta0_ >= 1.0)
        throw InvalidTableError("length scale delta0 must lie in (0,1)");

    double r_min = std::numeric_limits<double>::infinity();
    double r_max = 0.0;
    for (auto& d : disks_) {
        if (!(d.radius > 0.0)) throw InvalidTableError("scatterer radius must be positive");
        if (2.0 * d.radius >= 1.0)
            throw InvalidTableError("scatterer overlaps its own torus lift");
        d.center.x = wrap_unit(d.center.x);
        d.center.y = wrap_unit(d.center.y);
        r_min = std::min(r_min, d.radius);
        r_max = std::max(r_max, d.radius);
        perimeters_.push_back(kTwoPi * d.radius);
        boundary_length_ += kTwoPi * d.radius;
    }
    K_min_ = 1.0 / r_max;
    K_max_ = 1.0 / r_min;

    // Minimum boundary gap over all lift pairs. Gaps grow with lattice
    // distance, so scanning a small neighborhood of cells is exhaustive.
    double gap_min = std::numeric_limits<double>::infinity();
    const int span = 2;
    const int n = num_scatterers();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            for (int mx = -span; mx <= span; ++mx) {
                for (int my = -span; my <= span; ++my) {
                    if (i == j && mx == 0 && my == 0) continue;
                    const Vec2 off{static_cast<double>(mx), static_cast<double>(my)};
                    const double d = (disks_[j].center + off - disks_[i].center).norm() -
                                     disks_[i].radius - disks_[j].radius;
                    gap_min = std::min(gap_min, d);
                }
            }
        }
    }
    if (!(gap_min > 0.0)) {
        std::ostringstream os;
        os << "scatterers not pairwise disjoint (minimum gap " << gap_min << ")";
        throw InvalidTableError(os.str());
    }
    tau_min_ = gap_min;
    Lambda_ = 1.0 + 2.0 * tau_min_ * K_min_;
}

BoundaryPoint boundary_point(const TableGeometry& table, int scatterer_id, double r) {
    if (scatterer_id < 0 || scatterer_id >= table.num_scatterers())
        throw std::domain_error("boundary_point: invalid scatterer id");
    if (!std::isfinite(r)) throw std::domain_error("boundary_point: r must be finite");
    const Disk& d = table.disks()[scatterer_id];
    const double per = table.perimeter(scatterer_id);
    double rr = std::fmod(r, per);
    if (rr < 0.0) rr += per;
    const double ang = rr / d.radius;
    const Vec2 n{std::cos(ang), std::sin(ang)};
    BoundaryPoint bp;
    bp.scatterer_id = scatterer_id;
    bp.r = rr;
    bp.position = d.center + n * d.radius;
    bp.inward_normal = n; // away from the disk center, into the billiard domain
    bp.curvature = 1.0 / d.radius;
    return bp;
}

ValidationReport validate_table(const TableGeometry& table, int direction_samples,
                                double horizon_bound, ExecPolicy policy) {
    if (direction_samples < 1000)
        throw std::invalid_argument("validate_table: need at least 1000 direction samples");

    ValidationReport rep;
    rep.direction_samples = direction_samples;
    rep.horizon_bound = horizon_bound;
    rep.tau_min = table.tau_min();
    rep.Lambda = table.Lambda();

    const int n = table.num_scatterers();
    rep.pairwise_gap.assign(n, std::vector<double>(n, std::numeric_limits<double>::infinity()));
    const int span = static_cast<int>(std::ceil(horizon_bound)) + 1;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            double g = std::numeric_limits<double>::infinity();
            for (int mx = -span; mx <= span; ++mx) {
                for (int my = -span; my <= span; ++my) {
                    if (i == j && mx == 0 && my == 0) continue;
                    const Vec2 off{static_cast<double>(mx), static_cast<double>(my)};
                    const double d = (table.disks()[j].center + off - table.disks()[i].center).norm() -
                                     table.disks()[i].radius - table.disks()[j].radius;
                    g = std::min(g, d);
                }
            }
            rep.pairwise_gap[i][j] = g;
        }
    }

    // Deterministic ray grid: boundary points x outgoing angles. A second
    // pass refines directions around the longest flights found, since a
    // corridor shows up as a narrow spike in flight length vs angle.
    const int n_boundary = std::max(32, static_cast<int>(std::sqrt(double(direction_samples))));
    const int n_phi = (direction_samples + n_boundary - 1) / n_boundary;

    struct RayResult {
        double longest = 0.0;
        double longest_r = 0.0, longest_phi = 0.0;
        int longest_id = -1;
        std::size_t cast = 0, escaped = 0;
    };

    const std::size_t tasks = static_cast<std::size_t>(n) * n_boundary;
    std::vector<RayResult> results(tasks);

    auto cast_fan = [&](int sc, double r, RayResult& out) {
        for (int a = 0; a < n_phi; ++a) {
            // open interval in phi: endpoints are exactly tangential
            const double phi = -std::numbers::pi / 2.0 +
                               std::numbers::pi * (a + 0.5) / n_phi;
            FlightResult fr = cast_ray(table, sc, r, phi, horizon_bound);
            ++out.cast;
            if (!fr.hit) {
                ++out.escaped;
                if (horizon_bound > out.longest) {
                    out.longest = horizon_bound;
                    out.longest_id = sc;
                    out.longest_r = r;
                    out.longest_phi = phi;
                }
                continue;
            }
            if (fr.tau > out.longest) {
                out.longest = fr.tau;
                out.longest_id = sc;
                out.longest_r = r;
                out.longest_phi = phi;
            }
        }
    };

    for_each_index(tasks, policy, [&](std::size_t idx) {
        const int sc = static_cast<int>(idx) / n_boundary;
        const int b = static_cast<int>(idx) % n_boundary;
        const double r = table.perimeter(sc) * (b + 0.5) / n_boundary;
        cast_fan(sc, r, results[idx]);
    });

    RayResult agg;
    for (const auto& r : results) {
        agg.cast += r.cast;
        agg.escaped += r.escaped;
        if (r.longest > agg.longest) {
            agg.longest = r.longest;
            agg.longest_id = r.longest_id;
            agg.longest_r = r.longest_r;
            agg.longest_phi = r.longest_phi;
        }
    }

    // Continuation search: refine around the longest flight to chase the
    // corridor it grazes. Each level halves the angular window.
    if (agg.longest_id >= 0) {
        double phi_lo = agg.longest_phi - std::numbers::pi / n_phi;
        double phi_hi = agg.longest_phi + std::numbers::pi / n_phi;
        for (int level = 0; level < 12; ++level) {
            RayResult best = agg;
            const int refit = 64;
            for (int a = 0; a <= refit; ++a) {
                const double phi = phi_lo + (phi_hi - phi_lo) * a / refit;
                if (std::abs(phi) >= std::numbers::pi / 2.0) continue;
                FlightResult fr = cast_ray(table, agg.longest_id, agg.longest_r, phi, horizon_bound);
                ++agg.cast;
                if (!fr.hit) {
                    ++agg.escaped;
                    best.longest = horizon_bound;
                    best.longest_phi = phi;
                    continue;
                }
                if (fr.tau > best.longest) {
                    best.longest = fr.tau;
                    best.longest_phi = phi;
                }
            }
            const double w = (phi_hi - phi_lo) * 0.25;
            phi_lo = best.longest_phi - w;
            phi_hi = best.longest_phi + w;
            agg.longest = best.longest;
            agg.longest_phi = best.longest_phi;
            if (agg.longest >= horizon_bound) break;
        }
    }

    rep.valid = true;
    rep.rays_cast = agg.cast;
    rep.rays_escaped = agg.escaped;
    rep.tau_max_empirical = agg.longest;
    rep.longest_flight = agg.longest;
    rep.longest_flight_scatterer = agg.longest_id;
    rep.longest_flight_r = agg.longest_r;
    rep.longest_flight_phi = agg.longest_phi;
    rep.finite_horizon = (agg.escaped == 0) && (agg.longest < horizon_bound);
    return rep;
}

std::string ValidationReport::to_json() const {
    nlohmann::json j;
    j["valid"] = valid;
    j["tau_min"] = tau_min;
    j["tau_max_empirical"] = tau_max_empirical;
    j["finite_horizon"] = finite_horizon;
    j["Lambda"] = Lambda;
    j["direction_samples"] = direction_samples;
    j["horizon_bound"] = horizon_bound;
    j["rays_cast"] = rays_cast;
    j["rays_escaped"] = rays_escaped;
    j["pairwise_gap"] = pairwise_gap;
    j["longest_flight"] = {{"tau", longest_flight},
                           {"scatterer", longest_flight_scatterer},
                           {"r", longest_flight_r},
                           {"phi", longest_flight_phi}};
    return j.dump(2);
}

TableGeometry table_from_json(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text);
    std::vector<Disk> disks;
    for (const auto& d : j.at("disks")) {
        Disk disk;
        disk.center = {d.at("center").at(0).get<double>(), d.at("center").at(1).get<double>()};
        disk.radius = d.at("radius").get<double>();
        disks.push_back(disk);
    }
    const double q = j.value("q", 3.0);
    const int k0 = j.value("k0", 3);
    const double delta0 = j.value("delta0", 0.05);
    return TableGeometry(std::move(disks), q, k0, delta0);
}

std::string table_to_json(const TableGeometry& table) {
    nlohmann::json j;
    j["disks"] = nlohmann::json::array();
    for (const auto& d : table.disks())
        j["disks"].push_back({{"center", {d.center.x, d.center.y}}, {"radius", d.radius}});
    j["q"] = table.q_exponent();
    j["k0"] = table.k0();
    j["delta0"] = table.delta0();
    return j.dump(2);
}

TableGeometry default_table() {
    return TableGeometry({{{0.0, 0.0}, 0.25}, {{0.5, 0.5}, 0.25}}, 3.0, 3, 0.05);
}

} // namespace billiard
