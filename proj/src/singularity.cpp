#include "billiard/singularity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace billiard {

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;
constexpr int kStripCap = 1 << 20;

double wrap_r_diff(double a, double b, double per) {
    double d = std::fmod(a - b, per);
    if (d > per / 2) d -= per;
    if (d < -per / 2) d += per;
    return d;
}

double point_segment_dist2(const Vec2& p, const Vec2& a, const Vec2& b) {
    const Vec2 ab = b - a;
    const double len2 = ab.norm2();
    double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 q = a + ab * t;
    return (p - q).norm2();
}

} // namespace

StripIndex strip_index(const TableGeometry& table, double phi) {
    const double q = table.q_exponent();
    const int k0 = table.k0();
    const double v_top = kHalfPi - phi;
    const double v_bot = kHalfPi + phi;
    const double v_min = std::min(v_top, v_bot);
    const double edge = std::pow(static_cast<double>(k0), -q);
    // the bulk band is closed at its k0^-q edge
    if (v_min >= edge * (1.0 - 1e-12)) return {0};

    int k;
    if (v_min <= 0.0) {
        k = kStripCap;
    } else {
        const double u = std::pow(v_min, -1.0 / q);
        const double nearest = std::round(u);
        // a band boundary (within roundoff) belongs to the larger index
        if (std::abs(u - nearest) <= 1e-9 * u)
            k = static_cast<int>(nearest);
        else
            k = static_cast<int>(std::ceil(u)) - 1;
        k = std::clamp(k, k0, kStripCap);
    }
    return {v_top <= v_bot ? k : -k};
}

Itinerary try_itinerary(const TableGeometry& table, const PhasePoint& x, int n,
                        OrbitDirection direction, const MapOptions& opts) {
    Itinerary it;
    it.direction = direction;
    it.symbols.reserve(n);
    PhasePoint cur = x;
    for (int j = 0; j < n; ++j) {
        it.symbols.push_back({cur.scatterer_id, strip_index(table, cur).k});
        if (j + 1 == n) break;
        CollisionStep cs = direction == OrbitDirection::forward
                               ? try_step(table, cur, opts)
                               : try_step_inverse(table, cur, opts);
        if (cs.status != StepStatus::ok) {
            it.complete = false;
            return it;
        }
        cur = cs.to;
    }
    it.complete = static_cast<int>(it.symbols.size()) == n;
    return it;
}

Itinerary itinerary(const TableGeometry& table, const PhasePoint& x, int n,
                    OrbitDirection direction, const MapOptions& opts) {
    Itinerary it = try_itinerary(table, x, n, direction, opts);
    if (!it.complete) {
        std::ostringstream os;
        os << "itinerary: orbit entered the tangency band after " << it.symbols.size()
           << " of " << n << " symbols";
        throw TruncatedItineraryError(os.str(), it);
    }
    return it;
}

SegmentIndex::SegmentIndex(const TableGeometry& table,
                           const std::vector<SingularBranch>& branches) {
    grids_.resize(table.num_scatterers());
    for (int s = 0; s < table.num_scatterers(); ++s) {
        Grid& g = grids_[s];
        g.perimeter = table.perimeter(s);
        g.nr = 64;
        g.nphi = 64;
        g.dr = g.perimeter / g.nr;
        g.dphi = std::numbers::pi / g.nphi;
        g.buckets.assign(static_cast<std::size_t>(g.nr) * g.nphi, {});
    }
    for (const auto& br : branches) {
        if (br.scatterer_id < 0 || br.scatterer_id >= table.num_scatterers()) continue;
        Grid& g = grids_[br.scatterer_id];
        for (std::size_t i = 0; i + 1 < br.vertices.size(); ++i) {
            const Vec2 a = br.vertices[i];
            const Vec2 b = br.vertices[i + 1];
            const auto id = static_cast<std::uint32_t>(g.seg_a.size());
            g.seg_a.push_back(a);
            g.seg_b.push_back(b);
            ++total_segments_;
            const int r0 = static_cast<int>(std::floor(std::min(a.x, b.x) / g.dr));
            const int r1 = static_cast<int>(std::floor(std::max(a.x, b.x) / g.dr));
            const int p0 = static_cast<int>(std::floor((std::min(a.y, b.y) + kHalfPi) / g.dphi));
            const int p1 = static_cast<int>(std::floor((std::max(a.y, b.y) + kHalfPi) / g.dphi));
            for (int ri = r0; ri <= r1; ++ri) {
                const int rw = ((ri % g.nr) + g.nr) % g.nr;
                for (int pi = std::max(0, p0); pi <= std::min(g.nphi - 1, p1); ++pi)
                    g.buckets[static_cast<std::size_t>(rw) * g.nphi + pi].push_back(id);
            }
        }
    }
}

double SegmentIndex::distance(const PhasePoint& x) const {
    if (grids_.empty()) return std::numeric_limits<double>::infinity();
    const Grid& g = grids_[x.scatterer_id];
    if (g.seg_a.empty()) return std::numeric_limits<double>::infinity();

    const Vec2 p{x.r, x.phi};
    double best2 = std::numeric_limits<double>::infinity();
    const int rc = static_cast<int>(std::floor(x.r / g.dr));
    const int pc = static_cast<int>(std::floor((x.phi + kHalfPi) / g.dphi));
    const int max_ring = std::max(g.nr, g.nphi);

    for (int ring = 0; ring <= max_ring; ++ring) {
        const double ring_floor = (ring - 1) * std::min(g.dr, g.dphi);
        if (ring > 0 && ring_floor * ring_floor > best2) break;
        for (int dr = -ring; dr <= ring; ++dr) {
            for (int dp = -ring; dp <= ring; ++dp) {
                if (std::max(std::abs(dr), std::abs(dp)) != ring) continue;
                const int pi = pc + dp;
                if (pi < 0 || pi >= g.nphi) continue;
                const int ri = ((rc + dr) % g.nr + g.nr) % g.nr;
                for (std::uint32_t id : g.buckets[static_cast<std::size_t>(ri) * g.nphi + pi]) {
                    Vec2 a = g.seg_a[id], b = g.seg_b[id];
                    // evaluate in the unwrapped chart nearest to p
                    const double shift = wrap_r_diff(a.x, p.x, g.perimeter) - (a.x - p.x);
                    a.x += shift;
                    b.x += shift;
                    best2 = std::min(best2, point_segment_dist2(p, a, b));
                }
            }
        }
    }
    return std::sqrt(best2);
}

double SingularCurveSet::distance(const PhasePoint& x) const {
    const double d_tangency = kHalfPi - std::abs(x.phi);
    const double d_curves = index.distance(x);
    return std::min(d_tangency, d_curves);
}

namespace {

/// One candidate branch of the first-preimage set: departures from `src`
/// whose flight is tangent to the lift of `dst` in lattice cell (cx, cy), on
/// one side. phi(r) is closed form; occlusion is checked with a real ray.
struct TangentFamily {
    int src, dst, cx, cy, side;
};

struct TangentSample {
    bool valid = false;
    double phi = 0.0;
};

TangentSample tangent_phi(const TableGeometry& table, const TangentFamily& fam, double r,
                          double horizon) {
    const Disk& s = table.disks()[fam.src];
    const Disk& d = table.disks()[fam.dst];
    const Vec2 c = d.center + Vec2{double(fam.cx), double(fam.cy)};
    const double ang = r / s.radius;
    const Vec2 n{std::cos(ang), std::sin(ang)};
    const Vec2 t = n.perp();
    const Vec2 p = s.center + n * s.radius;
    const Vec2 w = c - p;
    const double dist = w.norm();
    TangentSample out;
    if (dist <= d.radius + 1e-12 || dist - d.radius > horizon) return out;
    // bias infinitesimally onto the hitting side so the grazing collision is
    // realized rather than lost to roundoff in the intersection discriminant
    const double theta = std::asin(std::min(1.0, d.radius / dist)) - 1e-14;
    const double base = std::atan2(w.y, w.x);
    const double dir_ang = base + fam.side * theta;
    const Vec2 dir{std::cos(dir_ang), std::sin(dir_ang)};
    const double phi = std::atan2(dir.dot(t), dir.dot(n));
    if (std::abs(phi) >= kHalfPi) return out;
    const double tangent_len = std::sqrt(std::max(0.0, dist * dist - d.radius * d.radius));
    FlightResult fr = cast_ray(table, fam.src, r, phi, horizon);
    if (!fr.hit || fr.target_id != fam.dst || fr.cell_dx != fam.cx || fr.cell_dy != fam.cy ||
        std::abs(fr.tau - tangent_len) > 1e-5)
        return out; // occluded or lost
    out.valid = true;
    out.phi = phi;
    return out;
}

void emit_polyline(std::vector<SingularBranch>& branches, int scatterer,
                   std::vector<Vec2>&& pts) {
    if (pts.size() >= 2 && scatterer >= 0) {
        SingularBranch br;
        br.scatterer_id = scatterer;
        br.vertices = std::move(pts);
        branches.push_back(std::move(br));
    }
    pts.clear();
}

std::vector<SingularBranch> first_preimage_branches(const TableGeometry& table,
                                                    double resolution, double horizon) {
    std::vector<SingularBranch> branches;
    const int span = static_cast<int>(std::ceil(horizon)) + 1;
    for (int src = 0; src < table.num_scatterers(); ++src) {
        const double per = table.perimeter(src);
        const int base_n = std::max(256, static_cast<int>(per / resolution / 4));
        for (int dst = 0; dst < table.num_scatterers(); ++dst) {
            for (int cx = -span; cx <= span; ++cx) {
                for (int cy = -span; cy <= span; ++cy) {
                    if (src == dst && cx == 0 && cy == 0) continue;
                    const double cdist = (table.disks()[dst].center +
                                          Vec2{double(cx), double(cy)} -
                                          table.disks()[src].center)
                                             .norm();
                    if (cdist - table.disks()[dst].radius > horizon) continue;
                    for (int side : {-1, 1}) {
                        TangentFamily fam{src, dst, cx, cy, side};
                        std::vector<Vec2> run;
                        for (int i = 0; i <= base_n; ++i) {
                            const double r = per * i / base_n;
                            TangentSample ts = tangent_phi(table, fam, r, horizon);
                            if (!ts.valid) {
                                emit_polyline(branches, src, std::move(run));
                                continue;
                            }
                            if (!run.empty()) {
                                const Vec2 prev = run.back();
                                const double gap = std::hypot(r - prev.x, ts.phi - prev.y);
                                const int extra =
                                    std::min(64, static_cast<int>(gap / resolution));
                                for (int e = 1; e <= extra; ++e) {
                                    const double rm = prev.x + (r - prev.x) * e / (extra + 1);
                                    TangentSample tm = tangent_phi(table, fam, rm, horizon);
                                    if (tm.valid) run.push_back({rm, tm.phi});
                                }
                            }
                            run.push_back({r, ts.phi});
                        }
                        emit_polyline(branches, src, std::move(run));
                    }
                }
            }
        }
    }
    return branches;
}

struct PullState {
    std::vector<SingularBranch> out;
    std::size_t used = 0;
    std::size_t budget;
    bool complete = true;
};

/// Backward image of polylines under one inverse step: vertices are pulled
/// individually, runs are cut where the image jumps scatterer or tears, and
/// torn segments are subdivided on the source curve until the image is
/// resolution-fine (stable curves stretch under the inverse map).
void pull_back_branch(const TableGeometry& table, const SingularBranch& br, double resolution,
                      const MapOptions& opts, PullState& st) {
    struct ImgPt {
        bool ok = false;
        int id = -1;
        Vec2 img;
    };
    auto pull = [&](const Vec2& v) -> ImgPt {
        ImgPt p;
        if (st.used >= st.budget) {
            st.complete = false;
            return p;
        }
        ++st.used;
        if (std::abs(v.y) >= kHalfPi) return p;
        PhasePoint x = make_phase_point(table, br.scatterer_id, v.x, v.y);
        CollisionStep cs = try_step_inverse(table, x, opts);
        if (cs.status != StepStatus::ok) return p;
        p.ok = true;
        p.id = cs.to.scatterer_id;
        p.img = {cs.to.r, cs.to.phi};
        return p;
    };

    std::vector<Vec2> run;
    int run_id = -1;
    auto flush = [&] { emit_polyline(st.out, run_id, std::move(run)); };

    ImgPt prev;
    Vec2 prev_src;
    for (std::size_t i = 0; i < br.vertices.size(); ++i) {
        const Vec2 v = br.vertices[i];
        ImgPt cur = pull(v);
        if (!cur.ok) {
            flush();
            prev = cur;
            continue;
        }
        if (prev.ok) {
            // subdivide the source segment until image gaps are fine
            struct Item {
                Vec2 a, b;
                ImgPt ia, ib;
                int depth;
            };
            std::vector<Item> stack{{prev_src, v, prev, cur, 0}};
            std::vector<std::pair<Vec2, ImgPt>> chain;
            while (!stack.empty()) {
                Item it = stack.back();
                stack.pop_back();
                const double per = table.perimeter(std::max(it.ia.id, 0));
                const bool same = it.ia.ok && it.ib.ok && it.ia.id == it.ib.id;
                const double gap =
                    same ? std::hypot(wrap_r_diff(it.ib.img.x, it.ia.img.x, per),
                                      it.ib.img.y - it.ia.img.y)
                         : std::numeric_limits<double>::infinity();
                if (gap <= resolution || it.depth >= 12) {
                    chain.emplace_back(it.b, it.ib);
                    continue;
                }
                const Vec2 m = (it.a + it.b) * 0.5;
                ImgPt im = pull(m);
                if (!st.complete) break;
                stack.push_back({m, it.b, im, it.ib, it.depth + 1});
                stack.push_back({it.a, m, it.ia, im, it.depth + 1});
            }
            for (auto& [src_pt, ip] : chain) {
                (void)src_pt;
                if (!ip.ok) {
                    flush();
                    continue;
                }
                if (!run.empty() && run_id == ip.id) {
                    const double per = table.perimeter(ip.id);
                    const double d = std::hypot(wrap_r_diff(ip.img.x, run.back().x, per),
                                                ip.img.y - run.back().y);
                    if (d > 50 * resolution) flush();
                } else if (run_id != ip.id) {
                    flush();
                }
                run_id = ip.id;
                run.push_back(ip.img);
            }
        } else {
            run_id = cur.id;
            run.push_back(cur.img);
        }
        prev = cur;
        prev_src = v;
        if (!st.complete) break;
    }
    flush();
}

} // namespace

SingularCurveSet singularity_curves(const TableGeometry& table, int level, double resolution,
                                    std::size_t budget_vertices, const MapOptions& opts) {
    SingularCurveSet set;
    set.level = level;
    set.resolution = resolution;
    if (level == 0) return set; // tangency lines only, kept implicit

    const int depth = std::abs(level);
    std::vector<SingularBranch> acc =
        first_preimage_branches(table, resolution, opts.horizon_bound);
    std::vector<SingularBranch> frontier = acc;
    for (int d = 2; d <= depth; ++d) {
        PullState st;
        st.budget = budget_vertices;
        for (const auto& br : frontier) pull_back_branch(table, br, resolution, opts, st);
        if (!st.complete) set.complete = false;
        frontier = std::move(st.out);
        acc.insert(acc.end(), frontier.begin(), frontier.end());
    }

    if (level < 0) {
        // images are the time reversal of preimages
        for (auto& br : acc)
            for (auto& v : br.vertices) v.y = -v.y;
    }
    set.branches = std::move(acc);
    set.index = SegmentIndex(table, set.branches);
    return set;
}

double distance_to_singularity(const TableGeometry& table, const PhasePoint& x,
                               const SingularCurveSet& curves) {
    (void)table;
    return curves.distance(x);
}

} // namespace billiard
