#include "billiard/runner.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "billiard/complexity.hpp"
#include "billiard/rng.hpp"
#include "billiard/singularity.hpp"
#include "billiard/statistics.hpp"
#include "json.hpp"

namespace billiard {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    try {
        if (j.contains("table_path"))
            cfg.table_json = read_file(j.at("table_path").get<std::string>());
        else if (j.contains("table"))
            cfg.table_json = j.at("table").dump();
        else
            throw ConfigError("config field missing: table or table_path");

        if (!j.contains("seed")) throw ConfigError("config field missing: seed");
        cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.seed_set = true;

        cfg.t_grid = j.value("t_grid", std::vector<double>{0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2,
                                                           1.3, 1.4});
        for (double t : cfg.t_grid)
            if (!(t > 0.0)) throw ConfigError("config field invalid: t_grid must be positive");
        cfg.n_max = j.value("n_max", 8);
        if (cfg.n_max < 4) throw ConfigError("config field invalid: n_max must be >= 4");
        if (j.contains("grid_ladder")) {
            for (const auto& lv : j.at("grid_ladder"))
                cfg.grid_ladder.push_back({lv.at(0).get<int>(), lv.at(1).get<int>()});
        } else {
            cfg.grid_ladder = {{48, 48}, {96, 96}};
        }
        if (cfg.grid_ladder.size() < 2)
            throw ConfigError("config field invalid: grid_ladder needs two levels");
        cfg.samples_per_cell = j.value("samples_per_cell", 64);
        if (cfg.samples_per_cell < 16)
            throw ConfigError("config field invalid: samples_per_cell must be >= 16");
        cfg.measure_samples_per_cell = j.value("measure_samples_per_cell", 128);
        cfg.growth_curves = j.value("growth_curves", 8);
        cfg.output_dir = j.value("output_dir", std::string("out"));
        cfg.suites = j.value("suites", std::vector<std::string>{"all"});
        cfg.threads = j.value("threads", 0);
        cfg.validation_samples = j.value("validation_samples", 20000);
        cfg.horizon_bound = j.value("horizon_bound", 15.0);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config field invalid: ") + e.what());
    }
    for (const auto& s : cfg.suites) {
        if (s != "all" && s != "geometry" && s != "complexity" && s != "spectrum" &&
            s != "statistics")
            throw ConfigError("config field invalid: unknown suite " + s);
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    return from_json_text(read_file(path));
}

std::string ExperimentConfig::canonical() const {
    json j;
    j["table"] = json::parse(table_json);
    j["t_grid"] = t_grid;
    j["n_max"] = n_max;
    json ladder = json::array();
    for (const auto& g : grid_ladder) ladder.push_back({g.n_r, g.n_s});
    j["grid_ladder"] = ladder;
    j["samples_per_cell"] = samples_per_cell;
    j["measure_samples_per_cell"] = measure_samples_per_cell;
    j["growth_curves"] = growth_curves;
    j["seed"] = seed;
    j["validation_samples"] = validation_samples;
    j["horizon_bound"] = horizon_bound;
    j["version"] = kVersion;
    return j.dump();
}

std::string cache_key(const ExperimentConfig& config, const std::string& suite) {
    const std::string content = suite + "|" + config.canonical();
    // FNV-1a, doubled for 128 bits
    std::uint64_t h1 = 0xcbf29ce484222325ULL, h2 = 0x84222325cbf29ce4ULL;
    for (unsigned char c : content) {
        h1 = (h1 ^ c) * 0x100000001b3ULL;
        h2 = (h2 ^ (c + 0x9e)) * 0x100000001b3ULL;
    }
    char buf[36];
    std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(h1),
                  static_cast<unsigned long long>(h2));
    return buf;
}

namespace {

struct SuiteContext {
    const ExperimentConfig& cfg;
    const TableGeometry& table;
    fs::path out;
    json& manifest;
    RunResult& result;

    /// Runs `compute` unless a cached payload exists for this suite; either
    /// way hands the payload JSON to `emit` which writes the artifacts.
    template <typename Compute, typename Emit>
    void cached_suite(const std::string& name, Compute&& compute, Emit&& emit) {
        const std::string key = cache_key(cfg, name);
        const fs::path cache_file = out / "cache" / (name + "-" + key + ".json");
        json payload;
        bool reused = false;
        if (fs::exists(cache_file)) {
            try {
                payload = json::parse(read_file(cache_file.string()));
                reused = true;
            } catch (...) {
                reused = false;
            }
        }
        const auto start = std::chrono::steady_clock::now();
        if (!reused) {
            payload = compute();
            write_file(cache_file.string(), payload.dump(2));
        }
        emit(payload);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        manifest["suites"][name] = {{"cache_key", key},
                                    {"reused_cache", reused},
                                    {"seconds", secs}};
    }
};

json run_geometry(const SuiteContext& ctx) {
    ValidationReport rep =
        validate_table(ctx.table, ctx.cfg.validation_samples, ctx.cfg.horizon_bound);
    return json::parse(rep.to_json());
}

json run_complexity(const SuiteContext& ctx) {
    const auto& cfg = ctx.cfg;
    const auto& table = ctx.table;
    json out;

    GrowthSweep growth = sweep_growth(table, cfg.n_max, cfg.growth_curves, table.delta0(),
                                      derive_seed(cfg.seed, 1));
    SamplingPlan plan;
    plan.grid_r = 256;
    plan.grid_s = 256;
    plan.seed = derive_seed(cfg.seed, 2);
    QnSweep classes = sweep_qn(table, std::min(cfg.n_max, 6), plan);
    DistortionFit dist = fit_distortion_constant(table, 4, 40, derive_seed(cfg.seed, 3));

    out["distortion_constant"] = dist.c_fitted;
    out["pressure_curve"] = json::array();
    std::vector<PressurePoint> curve;
    for (double t : cfg.t_grid) {
        PressurePoint p = estimate_pressure(table, t, cfg.n_max, growth);
        curve.push_back(p);
        out["pressure_curve"].push_back({{"t", t},
                                         {"P_star_inf", p.inf_estimate},
                                         {"P_star_fit", p.slope_fit},
                                         {"estimate", p.estimate},
                                         {"spread", p.spread},
                                         {"n_max", p.n_max},
                                         {"classes", p.class_count},
                                         {"log_qn", p.log_qn}});
    }
    HStarEstimate h = estimate_h_star(table, std::min(cfg.n_max, 6), classes);
    out["h_star"] = {{"fit", h.estimate}, {"inf", h.inf_estimate}, {"spread", h.spread},
                     {"counts", h.counts}};
    SparseRecurrenceEstimate sparse = sparse_recurrence_statistic(
        table, 1.4, 20, 100000, derive_seed(cfg.seed, 4), h.estimate);
    out["sparse_recurrence"] = {{"phi0", sparse.phi0},
                                {"n0", sparse.n0},
                                {"s0", sparse.s0},
                                {"segments", sparse.segments},
                                {"verdict", sparse.verdict}};
    TStarEstimate ts = estimate_t_star(curve, table.Lambda());
    out["t_star"] = {{"value", ts.value},
                     {"lower", ts.lower},
                     {"upper", ts.upper},
                     {"bounded", ts.bounded}};

    // class-sampling cross-check at moderate horizons
    out["class_route"] = json::array();
    for (double t : {cfg.t_grid.front(), 1.0, cfg.t_grid.back()}) {
        PressurePoint p = estimate_pressure(table, t, std::min(cfg.n_max, 6), classes,
                                            dist.c_fitted);
        out["class_route"].push_back({{"t", t},
                                      {"inf", p.inf_estimate},
                                      {"fit", p.slope_fit},
                                      {"resolution_exhausted", p.resolution_exhausted}});
    }
    return out;
}

json run_spectrum(const SuiteContext& ctx) {
    const auto& cfg = ctx.cfg;
    const auto& table = ctx.table;
    json out;
    out["ladder"] = json::array();
    for (const auto& spec : cfg.grid_ladder)
        out["ladder"].push_back({spec.n_r, spec.n_s});

    json rows = json::array();
    std::vector<UlamSampleCache> caches;
    for (const auto& spec : cfg.grid_ladder)
        caches.push_back(build_ulam_cache(table, spec, cfg.samples_per_cell,
                                          derive_seed(cfg.seed, 11)));

    for (double t : cfg.t_grid) {
        json row;
        row["t"] = t;
        json levels = json::array();
        double log_lambda_fine = 0.0, gap_fine = 0.0, residual_fine = 0.0;
        for (std::size_t li = 0; li < caches.size(); ++li) {
            UlamOperator op = assemble_from_cache(caches[li], t);
            EigenTriple tr = leading_triple(op);
            const double gap = second_eigenvalue(op, tr);
            levels.push_back({{"log_lambda", std::log(tr.lambda)},
                              {"gap", gap},
                              {"residual", tr.residual}});
            log_lambda_fine = std::log(tr.lambda);
            gap_fine = gap;
            residual_fine = tr.residual;
            if (li + 1 == caches.size() && std::abs(t - 1.0) < 1e-12) {
                const fs::path op_path =
                    ctx.out / "cache" / ("operator-" + cache_key(cfg, "op1") + ".bin");
                save_operator_cache(op_path.string(), op);
            }
        }
        row["levels"] = levels;
        row["lambda"] = std::exp(log_lambda_fine);
        row["log_lambda"] = log_lambda_fine;
        row["gap"] = gap_fine;
        row["residual"] = residual_fine;

        // derivative quantities on the measure grid
        UlamOperator opm = assemble_from_cache(caches.back(), t);
        EigenTriple trm = leading_triple(opm);
        EquilibriumMeasure m = equilibrium_measure(table, opm, trm, derive_seed(cfg.seed, 12));
        DerivativeEstimate d = pressure_derivatives(table, m, 40, 300, 140,
                                                    derive_seed(cfg.seed, 13));
        row["P1"] = d.P1;
        row["P1_stderr"] = d.P1_stderr;
        row["P2"] = d.P2;
        row["P2_stderr"] = d.P2_stderr;
        row["invariance_residual"] = m.invariance_residual;
        rows.push_back(row);
    }
    out["points"] = rows;
    return out;
}

json run_statistics(const SuiteContext& ctx) {
    const auto& cfg = ctx.cfg;
    const auto& table = ctx.table;
    json out = json::array();

    MapOptions curve_opts;
    curve_opts.horizon_bound = 5.0;
    SingularCurveSet fwd = singularity_curves(table, 1, 1e-3, 400000, curve_opts);
    SingularCurveSet bwd = singularity_curves(table, -1, 1e-3, 400000, curve_opts);

    for (double t : {1.0}) {
        UlamOperator op = assemble_ulam(table, t, cfg.grid_ladder.front(),
                                        cfg.measure_samples_per_cell, derive_seed(cfg.seed, 21));
        EigenTriple tr = leading_triple(op);
        EquilibriumMeasure m = equilibrium_measure(table, op, tr, derive_seed(cfg.seed, 22));
        DerivativeEstimate d = pressure_derivatives(table, m, 40, 400, 160,
                                                    derive_seed(cfg.seed, 23));
        SrbAverage chi = srb_average_log_ju(table, 150000, derive_seed(cfg.seed, 24));
        EntropyReport ent = entropy_identities(m, d, chi.mean);
        MeasureSample sample = sample_measure(table, m, 200000, derive_seed(cfg.seed, 25));
        ShellCurve shells = adaptedness_integral(table, sample, fwd, bwd);
        ScalingFit s0 = neighborhood_scaling(table, sample, nullptr,
                                             {0.002, 0.005, 0.01, 0.02, 0.05, 0.1});
        BowenReport bowen = bowen_ball_check(table, m, std::log(m.lambda), 40, 8, 0.045,
                                             300000, derive_seed(cfg.seed, 26));
        CltReport clt = clt_check(table, m, d.P1, d.P2, 400, 5000, derive_seed(cfg.seed, 27));

        json row;
        row["t"] = t;
        row["seed"] = cfg.seed;
        row["version"] = kVersion;
        row["lambda"] = m.lambda;
        row["invariance_residual"] = m.invariance_residual;
        row["min_cell_fraction"] = m.min_cell_fraction;
        row["gap"] = m.gap;
        row["P1"] = {{"value", d.P1}, {"stderr", d.P1_stderr}};
        row["P2"] = {{"value", d.P2}, {"stderr", d.P2_stderr}};
        row["entropy"] = {{"h_mu", ent.h_mu},
                          {"lyapunov", ent.lyapunov},
                          {"chi_u", chi.mean},
                          {"pesin_residual", ent.pesin_residual}};
        row["adaptedness"] = {{"estimate", shells.estimate},
                              {"tail", shells.tail_extrapolated},
                              {"tail_decaying", shells.tail_decaying},
                              {"floored", shells.floored}};
        row["neighborhood_slope_tangency"] = s0.slope;
        row["bowen"] = {{"A", bowen.A_fit},
                        {"violation_rate", bowen.violation_rate},
                        {"pairs", bowen.pairs_tested},
                        {"skipped", bowen.pairs_skipped},
                        {"monotone", bowen.monotone}};
        row["clt"] = {{"pass", clt.pass},
                      {"ks", clt.ks_distance},
                      {"threshold", clt.ks_threshold},
                      {"block_var", clt.block_var_over_k},
                      {"blocks", clt.blocks_used}};
        row["verdicts"] = {{"adapted", shells.tail_decaying},
                           {"neighborhood_slope_positive", s0.slope > 0.0},
                           {"bowen_no_violations", bowen.violation_rate == 0.0},
                           {"clt_pass", clt.pass || clt.skipped},
                           {"full_support", m.min_cell_fraction > 0.0}};
        out.push_back(row);
    }
    return out;
}

void emit_pressure_csv(const fs::path& path, const json& complexity) {
    std::ostringstream csv;
    csv << "t,P_star_inf,P_star_fit,spread,n_max,classes\n";
    for (const auto& row : complexity.at("pressure_curve"))
        csv << fmt(row.at("t").get<double>()) << ',' << fmt(row.at("P_star_inf").get<double>())
            << ',' << fmt(row.at("P_star_fit").get<double>()) << ','
            << fmt(row.at("spread").get<double>()) << ',' << row.at("n_max").get<int>() << ','
            << row.at("classes").get<std::size_t>() << '\n';
    write_file(path.string(), csv.str());
}

} // namespace

RunResult run_experiment(const ExperimentConfig& cfg) {
    RunResult result;
    set_thread_cap(cfg.threads);

    TableGeometry table = table_from_json(cfg.table_json);

    fs::path out(cfg.output_dir);
    fs::create_directories(out / "cache");
    fs::create_directories(out / "diagnostics");

    json manifest;
    manifest["version"] = kVersion;
    manifest["seed"] = cfg.seed;
    manifest["config"] = json::parse(cfg.canonical());
    manifest["timestamp"] = std::chrono::duration_cast<std::chrono::seconds>(
                                std::chrono::system_clock::now().time_since_epoch())
                                .count();

    auto wants = [&](const std::string& name) {
        for (const auto& s : cfg.suites)
            if (s == "all" || s == name) return true;
        return false;
    };

    SuiteContext ctx{cfg, table, out, manifest, result};

    try {
        if (wants("geometry")) {
            ctx.cached_suite(
                "geometry", [&] { return run_geometry(ctx); },
                [&](const json& payload) {
                    write_file((out / "validation_report.json").string(), payload.dump(2));
                    result.artifacts.push_back("validation_report.json");
                });
        }
        if (wants("complexity")) {
            ctx.cached_suite(
                "complexity", [&] { return run_complexity(ctx); },
                [&](const json& payload) {
                    write_file((out / "complexity_report.json").string(), payload.dump(2));
                    emit_pressure_csv(out / "pressure_curve.csv", payload);
                    result.artifacts.push_back("complexity_report.json");
                    result.artifacts.push_back("pressure_curve.csv");
                    if (payload.at("t_star").at("bounded").get<bool>() &&
                        payload.at("t_star").at("value").get<double>() <= 1.0)
                        result.failures.push_back("t_star at or below 1");
                });
        }
        if (wants("spectrum")) {
            ctx.cached_suite(
                "spectrum", [&] { return run_spectrum(ctx); },
                [&](const json& payload) {
                    write_file((out / "spectrum_report.json").string(), payload.dump(2));
                    result.artifacts.push_back("spectrum_report.json");
                });
        }
        if (wants("statistics")) {
            ctx.cached_suite(
                "statistics", [&] { return run_statistics(ctx); },
                [&](const json& payload) {
                    write_file((out / "statistics_report.json").string(), payload.dump(2));
                    result.artifacts.push_back("statistics_report.json");
                    for (const auto& row : payload) {
                        for (const auto& [name, ok] : row.at("verdicts").items()) {
                            if (!ok.get<bool>())
                                result.failures.push_back("statistics verdict failed: " + name);
                        }
                    }
                });
        }

        // small diagnostic artifacts, cheap enough to refresh every run
        {
            MapOptions copts;
            copts.horizon_bound = 5.0;
            SingularCurveSet s1 = singularity_curves(table, 1, 5e-3, 200000, copts);
            std::ostringstream csv;
            csv << "level,branch_id,r,phi\n";
            for (std::size_t b = 0; b < s1.branches.size(); ++b)
                for (const auto& v : s1.branches[b].vertices)
                    csv << 1 << ',' << b << ',' << fmt(v.x) << ',' << fmt(v.y) << '\n';
            write_file((out / "diagnostics" / "singularity_polylines.csv").string(), csv.str());

            // one batch trajectory dump
            std::ostringstream tcsv;
            tcsv << "step,scatterer_id,r,phi,tau,log_Js,log_Ju\n";
            PhasePoint x = make_phase_point(table, 0, 0.123 * table.perimeter(0), 0.3);
            OrbitWithSlopes orbit = forward_orbit_with_slopes(table, x, 200, 22);
            for (int k = 0; k + 22 < orbit.steps_completed; ++k) {
                tcsv << k << ',' << orbit.points[k].scatterer_id << ',' << fmt(orbit.points[k].r)
                     << ',' << fmt(orbit.points[k].phi) << ',' << fmt(orbit.taus[k]) << ','
                     << fmt(orbit.log_js[k]) << ',' << fmt(orbit.log_ju[k]) << '\n';
            }
            write_file((out / "diagnostics" / "trajectory.csv").string(), tcsv.str());
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        result.failures.push_back(std::string("internal error: ") + e.what());
        result.exit_code = 3;
    }

    if (result.exit_code == 0 && !result.failures.empty()) result.exit_code = 1;
    manifest["failures"] = result.failures;
    manifest["artifacts"] = result.artifacts;
    write_file((out / "manifest.json").string(), manifest.dump(2));
    return result;
}

} // namespace billiard
