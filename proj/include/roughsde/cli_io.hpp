#pragma once

// Scenario runner: JSON scenario files, the stage pipeline and its CSV and
// manifest output.

#include "roughsde/drifts.hpp"
#include "roughsde/quadrature.hpp"
#include "roughsde/sde_flow.hpp"
#include "roughsde/transport.hpp"
#include "roughsde/zvonkin.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace roughsde {

using json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "1.0.0";

struct SigmaSpec {
    std::string kind = "identity";  // identity | scaled | oscillating
    double scale = 1.0;
    double amplitude = 0.0;  // oscillating: scale · (1 + amplitude sin(2πt/T)) · I
    double theta = 1.5;
};

struct GridSpec {
    double L = 8.0;
    double h = 1.0 / 64;
    double T = 1.0;
    int M = 256;
};

struct SolverSpec {
    double lambda0 = 4.0;
    double tol = 1e-10;
    int max_iter = 200;
    double target = 0.5;
    double lambda_max = 65536.0;
};

struct McSpec {
    int n_paths = 10000;
    int n_steps = 512;
    std::uint64_t seed = 1;
    std::vector<std::vector<double>> x0;  // empty: −1, 0, 1 along the diagonal
};

struct FeatureSpec {
    bool transport = false;
    bool stability = false;
    bool holder_fits = false;
};

struct TransportSpec {
    double L = 4.0;
    double h = 0.125;
    double width = 0.5;  // Gaussian datum for the conservation checks
    int n_paths = 8;
    double residual_width = 1.0;
    int residual_paths = 8;
};

struct StabilitySpec {
    std::vector<int> n_list{4, 8, 16, 32};
    int n_paths = 1000;
    bool gradients = false;
};

struct Scenario {
    std::string name = "scenario";
    int dimension = 1;
    DriftParams drift;
    HolderExponents exponents = HolderExponents::make(1.8, 0.5);
    SigmaSpec sigma;
    GridSpec grid;
    SolverSpec solver;
    McSpec mc;
    FeatureSpec features;
    TransportSpec transport;
    StabilitySpec stability;
    std::string output = "out";

    json to_json() const
    {
        json j;
        j["name"] = name;
        j["dimension"] = dimension;
        j["drift"] = {{"family", drift.family},         {"amplitude", drift.amplitude},
                      {"frequency", drift.frequency},   {"levels", drift.levels},
                      {"growth", drift.growth},         {"epsilon", drift.epsilon},
                      {"time_beta", drift.time_beta},   {"time_reg", drift.time_reg},
                      {"phase_seed", drift.phase_seed}};
        j["exponents"] = {{"q", exponents.q}, {"alpha", exponents.alpha}, {"theta", exponents.theta}};
        j["sigma"] = {{"kind", sigma.kind}, {"scale", sigma.scale}, {"amplitude", sigma.amplitude},
                      {"theta", sigma.theta}};
        j["grid"] = {{"L", grid.L}, {"h", grid.h}, {"T", grid.T}, {"M", grid.M}};
        j["solver"] = {{"lambda0", solver.lambda0},
                       {"tol", solver.tol},
                       {"max_iter", solver.max_iter},
                       {"target", solver.target},
                       {"lambda_max", solver.lambda_max}};
        j["mc"] = {{"n_paths", mc.n_paths}, {"n_steps", mc.n_steps}, {"seed", mc.seed}, {"x0", mc.x0}};
        j["features"] = {{"transport", features.transport},
                         {"stability", features.stability},
                         {"holder_fits", features.holder_fits}};
        j["transport"] = {{"L", transport.L},
                          {"h", transport.h},
                          {"width", transport.width},
                          {"n_paths", transport.n_paths},
                          {"residual_width", transport.residual_width},
                          {"residual_paths", transport.residual_paths}};
        j["stability"] = {{"n_list", stability.n_list},
                          {"n_paths", stability.n_paths},
                          {"gradients", stability.gradients}};
        j["output"] = output;
        return j;
    }

    /// Reads a complete document (as produced by merging onto the defaults).
    static Scenario from_json(const json& j)
    {
        Scenario s;
        try {
            s.name = j.at("name").get<std::string>();
            s.dimension = j.at("dimension").get<int>();
            const auto& d = j.at("drift");
            s.drift.family = d.at("family").get<std::string>();
            s.drift.amplitude = d.at("amplitude").get<double>();
            s.drift.frequency = d.at("frequency").get<double>();
            s.drift.levels = d.at("levels").get<int>();
            s.drift.growth = d.at("growth").get<double>();
            s.drift.epsilon = d.at("epsilon").get<double>();
            s.drift.time_beta = d.at("time_beta").get<double>();
            s.drift.time_reg = d.at("time_reg").get<double>();
            s.drift.phase_seed = d.at("phase_seed").get<double>();
            const auto& e = j.at("exponents");
            std::optional<double> theta;
            if (!e.at("theta").is_null()) {
                theta = e.at("theta").get<double>();
            }
            s.exponents = HolderExponents::make(e.at("q").get<double>(), e.at("alpha").get<double>(), theta);
            const auto& sg = j.at("sigma");
            s.sigma = {sg.at("kind").get<std::string>(), sg.at("scale").get<double>(),
                       sg.at("amplitude").get<double>(), sg.at("theta").get<double>()};
            const auto& g = j.at("grid");
            s.grid = {g.at("L").get<double>(), g.at("h").get<double>(), g.at("T").get<double>(),
                      g.at("M").get<int>()};
            const auto& so = j.at("solver");
            s.solver = {so.at("lambda0").get<double>(), so.at("tol").get<double>(), so.at("max_iter").get<int>(),
                        so.at("target").get<double>(), so.at("lambda_max").get<double>()};
            const auto& mc = j.at("mc");
            s.mc.n_paths = mc.at("n_paths").get<int>();
            s.mc.n_steps = mc.at("n_steps").get<int>();
            s.mc.seed = mc.at("seed").get<std::uint64_t>();
            s.mc.x0 = mc.at("x0").get<std::vector<std::vector<double>>>();
            const auto& f = j.at("features");
            s.features = {f.at("transport").get<bool>(), f.at("stability").get<bool>(),
                          f.at("holder_fits").get<bool>()};
            const auto& t = j.at("transport");
            s.transport = {t.at("L").get<double>(),       t.at("h").get<double>(),
                           t.at("width").get<double>(),   t.at("n_paths").get<int>(),
                           t.at("residual_width").get<double>(), t.at("residual_paths").get<int>()};
            const auto& st = j.at("stability");
            s.stability = {st.at("n_list").get<std::vector<int>>(), st.at("n_paths").get<int>(),
                           st.at("gradients").get<bool>()};
            s.output = j.at("output").get<std::string>();
        } catch (const json::exception& ex) {
            throw Error(std::string("malformed scenario: ") + ex.what());
        }
        s.validate();
        return s;
    }

    template <int D>
    DiffusionCoefficient<D> make_sigma() const
    {
        DiffusionCoefficient<D> c;
        c.theta = sigma.theta;
        const double sc = sigma.scale;
        if (sigma.kind == "identity") {
            return c;
        }
        if (sigma.kind == "scaled") {
            c.sigma = [sc](double) { return (sc * Mat<D>::Identity()).eval(); };
        } else if (sigma.kind == "oscillating") {
            const double a = sigma.amplitude;
            const double T = grid.T;
            c.constant = false;
            c.sigma = [sc, a, T](double t) {
                return (sc * (1.0 + a * std::sin(2.0 * std::numbers::pi * t / T)) * Mat<D>::Identity()).eval();
            };
        } else {
            throw Error("unknown sigma kind '" + sigma.kind + "'");
        }
        return c;
    }

    template <int D>
    std::vector<Vec<D>> initial_points() const
    {
        std::vector<Vec<D>> v;
        if (mc.x0.empty()) {
            for (double c : {-1.0, 0.0, 1.0}) {
                v.push_back(Vec<D>::Constant(c));
            }
            return v;
        }
        for (const auto& p : mc.x0) {
            if (static_cast<int>(p.size()) != D) {
                throw Error("initial point has the wrong dimension");
            }
            v.push_back(Eigen::Map<const Vec<D>>(p.data()));
        }
        return v;
    }

    /// Parse-time gates: exponent windows, ellipticity, divergence-free flag
    /// and resolution consistency.
    void validate() const
    {
        if (dimension != 1 && dimension != 2) {
            throw Error("dimension must be 1 or 2");
        }
        const bool strong = features.transport || features.stability;
        exponents.validate(strong);
        if (!(grid.L > 0 && grid.h > 0 && grid.T > 0 && grid.M >= 1)) {
            throw Error("grid needs L, h, T > 0 and M >= 1");
        }
        if (mc.n_paths < 1 || mc.n_steps < 1) {
            throw Error("mc needs n_paths >= 1 and n_steps >= 1");
        }
        if (mc.n_steps % 2 != 0) {
            throw Error("mc.n_steps must be even (the flow checks split the window in half)");
        }
        if (dimension == 1) {
            check_gates<1>();
        } else {
            check_gates<2>();
        }
    }

private:
    template <int D>
    void check_gates() const
    {
        make_sigma<D>().validate(grid.T);
        const auto b = make_drift<D>(drift, exponents);
        (void)initial_points<D>();
        if (features.transport) {
            if (!b.divergence_free) {
                throw HypothesisError("transport needs a divergence-free drift; '" + drift.family + "' is not");
            }
            if (sigma.kind != "identity") {
                throw HypothesisError("transport needs sigma = I");
            }
        }
        for (int n : stability.n_list) {
            if (n < 1) {
                throw Error("stability.n_list entries must be positive");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Loading and overrides

namespace detail {

inline void merge_known(json& base, const json& patch, const std::string& prefix)
{
    if (!patch.is_object()) {
        throw Error("scenario section '" + prefix + "' must be an object");
    }
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) {
            throw Error("unknown scenario key '" + key + "'");
        }
        json& slot = base[it.key()];
        if (slot.is_object()) {
            merge_known(slot, it.value(), key);
        } else {
            slot = it.value();
        }
    }
}

}  // namespace detail

/// Applies `key.path=value`; the value is parsed as JSON when possible,
/// otherwise taken as a string.
inline void apply_override(json& doc, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw Error("override '" + assignment + "' is not of the form key=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json patch = value;
    std::size_t end = path.size();
    while (true) {
        const auto dot = path.rfind('.', end - 1);
        const std::string key = path.substr(dot == std::string::npos ? 0 : dot + 1,
                                            end - (dot == std::string::npos ? 0 : dot + 1));
        patch = json{{key, patch}};
        if (dot == std::string::npos) {
            break;
        }
        end = dot;
    }
    detail::merge_known(doc, patch, "");
}

/// Defaults, then the config file (if any), then the overrides in order.
inline Scenario load_scenario(const std::optional<std::filesystem::path>& config,
                              const std::vector<std::string>& overrides = {})
{
    json doc = Scenario{}.to_json();
    doc["exponents"]["theta"] = nullptr;
    if (config) {
        std::ifstream in(*config);
        if (!in) {
            throw Error("cannot read config '" + config->string() + "'");
        }
        json file;
        try {
            file = json::parse(in, nullptr, true, true);
        } catch (const json::exception& ex) {
            throw Error("config '" + config->string() + "' is not valid JSON: " + ex.what());
        }
        detail::merge_known(doc, file, "");
    }
    for (const auto& o : overrides) {
        apply_override(doc, o);
    }
    return Scenario::from_json(doc);
}

/// 64-bit FNV-1a of the canonical effective scenario, output directory excluded.
inline std::string scenario_hash(const Scenario& s)
{
    auto j = s.to_json();
    j.erase("output");
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : j.dump()) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Run state and output

struct CheckRow {
    std::string check;
    std::string stage;
    double value = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

struct RunResult {
    std::vector<CheckRow> rows;
    std::vector<std::string> files;
    json manifest;
    int exit_code() const
    {
        for (const auto& r : rows) {
            if (!r.pass) {
                return 1;
            }
        }
        return 0;
    }
};

inline const std::vector<std::string>& stage_names()
{
    static const std::vector<std::string> v{"norms", "solve-pde", "transform", "simulate", "transport", "stability"};
    return v;
}

/// Stages run by a subcommand; `full` adds transport and stability only when
/// their feature flags are set.
inline std::vector<std::string> stages_for(const std::string& command, const Scenario& s)
{
    if (command == "full") {
        std::vector<std::string> v{"norms", "solve-pde", "transform", "simulate"};
        if (s.features.transport) {
            v.push_back("transport");
        }
        if (s.features.stability) {
            v.push_back("stability");
        }
        return v;
    }
    for (const auto& n : stage_names()) {
        if (n == command) {
            return {command};
        }
    }
    throw Error("unknown command '" + command + "'");
}

class CsvFile {
public:
    CsvFile(const std::filesystem::path& path, const std::vector<std::string>& header) : os_(path)
    {
        if (!os_) {
            throw Error("cannot write '" + path.string() + "'");
        }
        row(header);
    }

    void row(const std::vector<std::string>& cells)
    {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            os_ << (i ? "," : "") << cells[i];
        }
        os_ << '\n';
    }

private:
    std::ofstream os_;
};

namespace detail {

template <int D>
std::vector<std::string> coords(const Vec<D>& x)
{
    std::vector<std::string> v;
    for (int a = 0; a < D; ++a) {
        v.push_back(fmt17(x[a]));
    }
    return v;
}

inline std::vector<std::string> axis_names(const std::string& stem, int d)
{
    std::vector<std::string> v;
    for (int a = 1; a <= d; ++a) {
        v.push_back(stem + std::to_string(a));
    }
    return v;
}

inline std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b)
{
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

/// Combined two-stderr agreement of two estimates.
inline bool within_two_stderr(const Estimate& a, const Estimate& b)
{
    return std::abs(a.value - b.value) <= 2.0 * std::hypot(a.stderr_, b.stderr_);
}

template <int D>
class Pipeline {
public:
    Pipeline(const Scenario& s, const std::filesystem::path& dir, RunResult& out)
        : sc_(s), dir_(dir), out_(out), b_(make_drift<D>(s.drift, s.exponents)), sigma_(s.make_sigma<D>()),
          grid_(s.grid.L, s.grid.h), time_(s.grid.T, s.grid.M), ns_(s.mc.seed, s.grid.T, 4 * s.mc.n_steps),
          x0s_(s.initial_points<D>()), window_{0.0, s.grid.T, s.mc.n_steps}
    {
    }

    void run(const std::string& stage)
    {
        if (stage == "norms") {
            norms();
        } else if (stage == "solve-pde") {
            solve_pde();
        } else if (stage == "transform") {
            transform_stage();
        } else if (stage == "simulate") {
            simulate();
        } else if (stage == "transport") {
            transport();
        } else if (stage == "stability") {
            stability();
        } else {
            throw Error("unknown stage '" + stage + "'");
        }
    }

private:
    std::filesystem::path file(const std::string& name)
    {
        out_.files.push_back(name);
        return dir_ / name;
    }

    void check(const std::string& stage, const std::string& name, double value, double threshold, bool pass)
    {
        out_.rows.push_back({name, stage, value, threshold, pass});
    }

    TransformOptions transform_options() const
    {
        TransformOptions o;
        o.tuning.lambda0 = sc_.solver.lambda0;
        o.tuning.lambda_max = sc_.solver.lambda_max;
        o.tuning.target = sc_.solver.target;
        o.tuning.solver.tol = sc_.solver.tol;
        o.tuning.solver.max_iter = sc_.solver.max_iter;
        return o;
    }

    const ZvonkinTransform<D>& transform()
    {
        if (!z_) {
            z_.emplace(build_transform<D>(b_, grid_, time_, sigma_, transform_options()));
            const auto& n = z_->solution().norms;
            out_.manifest["lambda"] = z_->lambda();
            out_.manifest["contraction"] = z_->solution().contraction;
            out_.manifest["pde_iterations"] = z_->solution().iterations;
            out_.manifest["certificates"] = {{"grad_sup", n.grad_sup},
                                             {"grad_holder", n.grad_holder},
                                             {"hess_l2_holder", n.hess_l2_holder},
                                             {"weighted_sup_u", n.weighted_sup_u},
                                             {"weighted_dt_u", n.weighted_dt_u}};
        }
        return *z_;
    }

    int slice_stride(int parts) const { return std::max(1, sc_.grid.M / parts); }

    void norms()
    {
        const auto f = sample_drift(b_, grid_, time_);
        const auto& ex = sc_.exponents;
        const double glow = ex.gamma_low();
        CsvFile csv(file("norms.csv"), {"t", "sup", "weighted_sup", "holder_low", "holder_alpha", "norm"});
        std::vector<double> powers;
        const int stride = slice_stride(16);
        for (int k = 0; k <= sc_.grid.M; k += stride) {
            const auto v = f.slice(k);
            const double ws = weighted_sup_norm(grid_, v, D, glow);
            const double hl = holder_seminorm(grid_, v, D, glow);
            const double ha = holder_seminorm(grid_, v, D, ex.alpha);
            csv.row({fmt17(time_.time(k)), fmt17(sup_norm<D>(v, D)), fmt17(ws), fmt17(hl), fmt17(ha),
                     fmt17(ws + hl + ha)});
            powers.push_back(std::pow(ws + hl + ha, ex.q));
        }
        const double lq = std::pow(trapezoid(powers, time_.step() * stride), 1.0 / ex.q);
        const auto deg = degree_classify(HolderSpace{ex.alpha}, ex.q, D);
        out_.manifest["drift_lq_norm"] = lq;
        out_.manifest["degree"] = {{"value", deg.value}, {"class", to_string(deg.cls)}};
        check("norms", "degree_subcritical", deg.value, -1.0, deg.cls == DegreeClass::subcritical);
        check("norms", "drift_norm_finite", lq, INFINITY, std::isfinite(lq));
    }

    void solve_pde()
    {
        const auto& z = transform();
        const auto& sol = z.solution();
        {
            CsvFile csv(file("lambda_ladder.csv"), {"lambda", "converged", "grad_bound", "contraction", "iterations"});
            for (const auto& e : z.ladder()) {
                csv.row({fmt17(e.lambda), e.converged ? "1" : "0", fmt17(e.grad_bound), fmt17(e.contraction),
                         std::to_string(e.iterations)});
            }
        }
        CsvFile csv(file("pde_u.csv"),
                    cat(cat({"t"}, axis_names("x", D)), axis_names("v", D)));
        for (int k = 0; k <= sc_.grid.M; k += slice_stride(8)) {
            for (std::size_t i = 0; i < grid_.size(); ++i) {
                auto row = cat({fmt17(time_.time(k))}, coords<D>(grid_.node(i)));
                for (int c = 0; c < D; ++c) {
                    row.push_back(fmt17(sol.u(k, i, c)));
                }
                csv.row(row);
            }
        }
        check("solve-pde", "grad_bound_below_target", sol.norms.grad_holder, sc_.solver.target,
              sol.norms.grad_holder < sc_.solver.target);
        check("solve-pde", "contraction_below_one", sol.contraction, 1.0, sol.contraction < 1.0);
    }

    void transform_stage()
    {
        const auto& z = transform();
        const auto c = z.checks();
        CsvFile csv(file("transform.csv"),
                    cat(cat(cat({"t"}, axis_names("x", D)), axis_names("phi", D)), axis_names("psi", D)));
        for (double t : {0.0, 0.5 * sc_.grid.T}) {
            for (std::size_t i = 0; i < grid_.size(); ++i) {
                const Vec<D> x = grid_.node(i);
                csv.row(cat(cat(cat({fmt17(t)}, coords<D>(x)), coords<D>(z.phi(t, x))), coords<D>(z.psi(t, x))));
            }
        }
        check("transform", "grad_phi_upper", c.grad_phi_max, 1.5, c.grad_phi_max < 1.5);
        check("transform", "grad_phi_lower", c.grad_phi_min, 0.5, c.grad_phi_min > 0.5);
        check("transform", "grad_psi_upper", c.grad_psi_max, 2.0, c.grad_psi_max < 2.0);
        check("transform", "grad_psi_lower", c.grad_psi_min, 2.0 / 3.0, c.grad_psi_min > 2.0 / 3.0);
        check("transform", "round_trip", c.round_trip, 1e-8, c.round_trip <= 1e-8);
    }

    void simulate()
    {
        const auto& z = transform();
        const int n = sc_.mc.n_paths;
        const int steps = sc_.mc.n_steps;
        SimOptions opt;
        opt.n_paths = n;
        opt.record_every = steps % 32 == 0 ? steps / 32 : 1;
        opt.variational = true;
        const auto ens = simulate_transformed(z, x0s_, window_, ns_, opt);
        out_.manifest["excursion_fraction"] = ens.excursion_fraction();
        {
            CsvFile csv(file("paths.csv"), cat(cat({"point", "t"}, axis_names("mean_x", D)), {"msd", "valid"}));
            for (std::size_t i = 0; i < x0s_.size(); ++i) {
                for (int r = 0; r < ens.n_records; ++r) {
                    Vec<D> mean = Vec<D>::Zero();
                    double msd = 0.0;
                    int valid = 0;
                    for (int p = 0; p < n; ++p) {
                        if (!ens.valid(i, p)) {
                            continue;
                        }
                        const Vec<D> x = ens.x(i, p, r);
                        mean += x;
                        msd += (x - x0s_[i]).squaredNorm();
                        ++valid;
                    }
                    mean /= std::max(valid, 1);
                    msd /= std::max(valid, 1);
                    csv.row(cat(cat({std::to_string(i), fmt17(ens.record_time(r))}, coords<D>(mean)),
                                {fmt17(msd), std::to_string(valid)}));
                }
            }
        }
        {
            CsvFile csv(file("moments.csv"), {"p", "n_paths", "estimate", "stderr"});
            for (double p : {2.0, 4.0}) {
                const auto full = grad_moment_samples(ens, p);
                auto half = full;
                for (auto& g : half) {
                    g.resize(std::max(1, n / 2));
                }
                const auto ef = sup_mean_bootstrap(full);
                const auto eh = sup_mean_bootstrap(half);
                csv.row({fmt17(p), std::to_string(std::max(1, n / 2)), fmt17(eh.value), fmt17(eh.stderr_)});
                csv.row({fmt17(p), std::to_string(n), fmt17(ef.value), fmt17(ef.stderr_)});
                check("simulate", "grad_moment_p" + std::to_string(static_cast<int>(p)) + "_doubling",
                      std::abs(ef.value - eh.value), 2.0 * std::hypot(ef.stderr_, eh.stderr_),
                      within_two_stderr(ef, eh));
            }
        }
        check("simulate", "path_failures", static_cast<double>(ens.failures()), 0.0, ens.failures() == 0);
        const auto fc = flow_checks(z, ns_, x0s_, 0.0, 0.5 * sc_.grid.T, sc_.grid.T, steps, std::min(n, 256));
        {
            CsvFile csv(file("flow_checks.csv"), {"defect", "max", "rms"});
            csv.row({"composition", fmt17(fc.composition_max), fmt17(fc.composition_rms)});
            csv.row({"inverse", fmt17(fc.inverse_max), fmt17(fc.inverse_rms)});
            csv.row({"identity", fmt17(fc.identity_defect), fmt17(fc.identity_defect)});
        }
        check("simulate", "composition_defect_rms", fc.composition_rms, 5e-2, fc.composition_rms <= 5e-2);
        check("simulate", "inverse_defect_rms", fc.inverse_rms, 5e-2, fc.inverse_rms <= 5e-2);
        check("simulate", "identity_defect", fc.identity_defect, 0.0, fc.identity_defect == 0.0);
        if (sc_.features.holder_fits) {
            holder_fits(ens);
        }
    }

    void holder_fits(const FlowEnsemble<D>& ens)
    {
        std::vector<int> lags;
        for (int l = 1; l < ens.n_records && lags.size() < 5; l *= 2) {
            lags.push_back(l);
        }
        if (lags.size() < 4) {
            throw Error("Hölder fits need at least 16 records; raise mc.n_steps");
        }
        const std::size_t mid = x0s_.size() / 2;
        const auto [sep, diffs] = time_increments(ens, mid, 0, lags);
        const auto fit = holder_exponent_fit(sep, diffs, 2.0, sc_.mc.seed, 200);
        CsvFile csv(file("holder.csv"), {"kind", "exponent", "stderr", "ci_low", "ci_high"});
        csv.row({"time", fmt17(fit.exponent), fmt17(fit.stderr_), fmt17(fit.ci_low), fmt17(fit.ci_high)});
        const double q = sc_.exponents.q;
        const double floor = std::min(0.5, 1.0 - 1.0 / q) - 0.05;
        check("simulate", "time_exponent", fit.exponent, floor, fit.exponent >= floor);
    }

    void transport()
    {
        if (!b_.divergence_free) {
            throw HypothesisError("transport needs a divergence-free drift; '" + b_.name + "' is not");
        }
        const auto& z = transform();
        const auto& tr = sc_.transport;
        const double T = sc_.grid.T;
        const Grid<D> tg(tr.L, tr.h);
        const auto u0 = InitialDatum<D>::gaussian(Vec<D>::Zero(), tr.width);
        const std::vector<double> times{0.5 * T, T};
        const double dt = T / sc_.mc.n_steps;
        const auto f = solve_transport(u0, b_, z, ns_, tg, times, dt, tr.n_paths);
        out_.manifest["transport_excursion_fraction"] = f.excursion_fraction;
        const auto cons = conservation_checks(f, 2.0);
        {
            CsvFile csv(file("transport_slice.csv"), cat(cat({"t"}, axis_names("x", D)), {"v1"}));
            for (std::size_t j = 0; j < times.size(); ++j) {
                for (std::size_t k = 0; k < f.nodes.size(); ++k) {
                    csv.row(cat(cat({fmt17(times[j])}, coords<D>(tg.node(f.nodes[k]))),
                                {fmt17(f.at(0, static_cast<int>(j), k))}));
                }
            }
        }
        const auto euler = euler_identity(z, b_, ns_, x0s_, window_, tr.n_paths);
        const auto phis = default_test_functions<D>();
        const auto u0r = InitialDatum<D>::gaussian(Vec<D>::Zero(), tr.residual_width);
        const auto res = weak_residual_lagrangian(u0r, b_, z, ns_, Grid<D>(tr.L + 1.0, tr.h), phis, window_,
                                                  tr.residual_paths);
        double worst = 0.0;
        CsvFile csv(file("transport_checks.csv"), {"quantity", "value"});
        for (std::size_t i = 0; i < res.size(); ++i) {
            csv.row({"weak_residual_rms_phi" + std::to_string(i), fmt17(res[i].rms)});
            worst = std::max(worst, res[i].rms);
        }
        std::vector<Vec<D>> pts;
        for (std::size_t i = 0; i < tg.size(); i += 3) {
            if (tg.node(i).norm() <= 1.0) {
                pts.push_back(tg.node(i));
            }
        }
        const int gp = std::max(2, tr.n_paths);
        const auto g_full = gradient_transport(u0, z, ns_, pts, 1.0, times, dt, INFINITY, 2.0, gp);
        const auto g_half = gradient_transport(u0, z, ns_, pts, 1.0, times, dt, INFINITY, 2.0, gp / 2);
        csv.row({"mass_defect", fmt17(cons.mass_defect)});
        csv.row({"l2_defect", fmt17(cons.lr_defect)});
        csv.row({"max_principle_violation", fmt17(cons.max_principle_violation)});
        csv.row({"euler_det_rms", fmt17(euler.rms)});
        csv.row({"euler_det_max", fmt17(euler.max)});
        csv.row({"gradient_sup_p2", fmt17(g_full.estimate.value)});
        csv.row({"gradient_sup_p2_half", fmt17(g_half.estimate.value)});
        check("transport", "mass_defect", cons.mass_defect, 1e-3, cons.mass_defect <= 1e-3);
        check("transport", "l2_defect", cons.lr_defect, 1e-3, cons.lr_defect <= 1e-3);
        check("transport", "max_principle", cons.max_principle_violation, 0.0, cons.max_principle_violation == 0.0);
        check("transport", "euler_det_rms", euler.rms, 5e-2, euler.rms <= 5e-2);
        check("transport", "weak_residual_rms", worst, 5e-2, worst <= 5e-2);
        const bool finite = std::isfinite(g_full.estimate.value) && std::isfinite(g_half.estimate.value);
        check("transport", "gradient_statistic_doubling", std::abs(g_full.estimate.value - g_half.estimate.value),
              2.0 * std::hypot(g_full.estimate.stderr_, g_half.estimate.stderr_),
              finite && within_two_stderr(g_full.estimate, g_half.estimate));
    }

    void stability()
    {
        FlowStabilityOptions<D> o;
        o.n_list = sc_.stability.n_list;
        o.window = window_;
        o.x0s = x0s_;
        o.n_paths = sc_.stability.n_paths;
        o.gradients = sc_.stability.gradients;
        o.transform = transform_options();
        o.bootstrap_seed = sc_.mc.seed;
        const auto rep = stability_experiment(b_, sigma_, grid_, time_, ns_, o);
        CsvFile csv(file("stability.csv"),
                    {"n", "lambda", "path_distance", "path_stderr", "grad_distance", "grad_stderr", "c1theta_distance"});
        for (const auto& r : rep.rows) {
            csv.row({std::to_string(r.n), fmt17(r.lambda), fmt17(r.path_distance.value),
                     fmt17(r.path_distance.stderr_), fmt17(r.grad_distance.value), fmt17(r.grad_distance.stderr_),
                     fmt17(r.c1theta_distance)});
        }
        if (rep.rows.empty()) {
            return;
        }
        const auto& first = rep.rows.front();
        const auto& last = rep.rows.back();
        check("stability", "path_distance_nonincreasing", last.path_distance.value, first.path_distance.value,
              rep.path_nonincreasing);
        check("stability", "path_distance_quartered", last.path_distance.value, 0.25 * first.path_distance.value,
              last.path_distance.value < 0.25 * first.path_distance.value);
        check("stability", "pde_distance_nonincreasing", last.c1theta_distance, first.c1theta_distance,
              rep.pde_nonincreasing);
        check("stability", "pde_distance_quartered", last.c1theta_distance, 0.25 * first.c1theta_distance,
              last.c1theta_distance < 0.25 * first.c1theta_distance);
    }

    const Scenario& sc_;
    std::filesystem::path dir_;
    RunResult& out_;
    DriftSpec<D> b_;
    DiffusionCoefficient<D> sigma_;
    Grid<D> grid_;
    TimeGrid time_;
    NoiseStream<D> ns_;
    std::vector<Vec<D>> x0s_;
    FlowWindow window_;
    std::optional<ZvonkinTransform<D>> z_;
};

}  // namespace detail

/// Writes summary.csv (when any check ran) and manifest.json.
inline void emit_results(const std::filesystem::path& dir, RunResult& r)
{
    if (!r.rows.empty()) {
        CsvFile csv(dir / "summary.csv", {"check", "stage", "value", "threshold", "pass"});
        for (const auto& row : r.rows) {
            csv.row({row.check, row.stage, fmt17(row.value), fmt17(row.threshold), row.pass ? "1" : "0"});
        }
        r.files.push_back("summary.csv");
    }
    r.manifest["files"] = r.files;
    std::size_t failed = 0;
    for (const auto& row : r.rows) {
        failed += row.pass ? 0 : 1;
    }
    r.manifest["checks"] = r.rows.size();
    r.manifest["checks_failed"] = failed;
    std::ofstream os(dir / "manifest.json");
    if (!os) {
        throw Error("cannot write manifest to '" + dir.string() + "'");
    }
    os << r.manifest.dump(2) << '\n';
}

/// Runs the stages in order into `scenario.output` and emits the results.
/// The exit code is nonzero iff a check failed.
inline RunResult run_scenario(const Scenario& s, const std::vector<std::string>& stages)
{
    const std::filesystem::path dir = s.output;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) {
        throw Error("cannot create output directory '" + dir.string() + "'");
    }
    RunResult r;
    r.manifest["tool_version"] = kToolVersion;
    r.manifest["scenario_hash"] = scenario_hash(s);
    r.manifest["seed"] = s.mc.seed;
    r.manifest["scenario"] = s.to_json();
    r.manifest["stages"] = json::array();
    const auto go = [&](auto& pipeline) {
        for (const auto& stage : stages) {
            const auto t0 = std::chrono::steady_clock::now();
            pipeline.run(stage);
            const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
            r.manifest["stages"].push_back({{"name", stage}, {"wall_seconds", dt.count()}});
        }
    };
    if (s.dimension == 1) {
        detail::Pipeline<1> p(s, dir, r);
        go(p);
    } else {
        detail::Pipeline<2> p(s, dir, r);
        go(p);
    }
    emit_results(dir, r);
    return r;
}

}  // namespace roughsde
