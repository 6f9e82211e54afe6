#ifndef MELTCAL_PIPELINE_HPP
#define MELTCAL_PIPELINE_HPP

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "meltcal/doe.hpp"
#include "meltcal/domain.hpp"
#include "meltcal/error.hpp"
#include "meltcal/csv.hpp"
#include "meltcal/format.hpp"
#include "meltcal/forward.hpp"
#include "meltcal/inference.hpp"
#include "meltcal/plots.hpp"
#include "meltcal/random.hpp"
#include "meltcal/sensitivity.hpp"
#include "meltcal/surrogate.hpp"

namespace meltcal {

namespace fs = std::filesystem;
using nlohmann::json;

enum class ModelKind { reduced, external, table };

inline const char* model_kind_name(ModelKind k) {
    switch (k) {
    case ModelKind::reduced: return "reduced";
    case ModelKind::external: return "external";
    default: return "table";
    }
}

struct RunConfig {
    std::string dataset;                  // empty: bundled 13-row dataset
    ModelKind model = ModelKind::reduced;
    PhysicalConstants constants;
    ReducedModelConfig reduced;
    ExternalModelSpec external;
    std::string run_table;                // CSV path for the table model
    std::string table_fallback = "reduced"; // reduced | external | none
    PriorSpec prior = default_prior();
    std::size_t samples_per_condition = 10;
    GpOptions gp;
    std::size_t sa_n_base = 4096;
    std::size_t mcmc_steps = 50000;
    std::size_t mcmc_burn = 10000;
    std::size_t mcmc_thin = 20;
    std::size_t mcmc_adapt_start = 1000;
    std::size_t mcmc_chains = 1;
    LikelihoodConfig likelihood;
    std::uint64_t seed = 20240101;
    std::string output_dir = "meltcal-out";
    fs::path base_dir = ".";              // relative paths resolve here; not serialized

    fs::path resolve(const std::string& p) const {
        fs::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    }

    void validate() const {
        if (!dataset.empty() && !fs::exists(resolve(dataset)))
            throw ConfigError("dataset file not found: " + resolve(dataset).string());
        constants.validate();
        reduced.validate();
        prior.validate();
        likelihood.validate();
        bool needs_external = model == ModelKind::external || (model == ModelKind::table && table_fallback == "external");
        if (needs_external) external.validate();
        if (model == ModelKind::table) {
            if (run_table.empty()) throw ConfigError("table model needs model.table.path");
            if (table_fallback != "reduced" && table_fallback != "external" && table_fallback != "none")
                throw ConfigError("model.table.fallback must be reduced, external or none");
            if (table_fallback == "none" && !fs::exists(resolve(run_table)))
                throw ConfigError("run table not found: " + resolve(run_table).string());
        }
        if (samples_per_condition < 2) throw ConfigError("design.samples_per_condition must be at least 2");
        if (gp.starts < 1 || gp.max_iterations < 1) throw ConfigError("gp.starts and gp.max_iterations must be positive");
        if (sa_n_base < 256 || (sa_n_base & (sa_n_base - 1)) != 0)
            throw ConfigError("sa.n_base must be a power of two and at least 256");
        if (mcmc_adapt_start < 100 || mcmc_steps <= mcmc_adapt_start)
            throw ConfigError("mcmc needs steps > adapt_start >= 100");
        if (mcmc_burn >= mcmc_steps) throw ConfigError("mcmc.burn must be smaller than mcmc.steps");
        if (mcmc_thin < 1 || mcmc_chains < 1) throw ConfigError("mcmc.thin and mcmc.chains must be positive");
        if ((mcmc_steps - mcmc_burn - 1) / mcmc_thin + 1 < 50)
            throw ConfigError("mcmc settings retain fewer than 50 samples");
    }
};

namespace config_detail {

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for " + where + "." + key);
    }
}

} // namespace config_detail

inline json config_to_json(const RunConfig& c) {
    json prior = json::array();
    for (const auto& e : c.prior.entries)
        prior.push_back({{"name", e.name}, {"nominal", e.nominal}, {"lower", e.lower_multiplier}, {"upper", e.upper_multiplier}});
    return {
        {"config_format", 1},
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"dataset", c.dataset},
        {"model",
         {{"kind", model_kind_name(c.model)},
          {"constants",
           {{"density", c.constants.density},
            {"liquidus", c.constants.liquidus},
            {"ambient", c.constants.ambient},
            {"solid_conductivity", c.constants.solid_conductivity}}},
          {"reduced",
           {{"quadrature_points", c.reduced.quadrature_points},
            {"tolerance_m", c.reduced.tolerance},
            {"marangoni_chi", c.reduced.marangoni_chi},
            {"marangoni_ref", c.reduced.marangoni_ref},
            {"loss_correction", c.reduced.loss_correction},
            {"liquid_weight", c.reduced.liquid_weight}}},
          {"external",
           {{"command", c.external.command_template},
            {"working_directory", c.external.working_directory},
            {"timeout_s", c.external.timeout_seconds}}},
          {"table", {{"path", c.run_table}, {"fallback", c.table_fallback}}}}},
        {"prior", prior},
        {"design", {{"samples_per_condition", c.samples_per_condition}}},
        {"gp",
         {{"starts", c.gp.starts},
          {"max_iterations", c.gp.max_iterations},
          {"gradient_tolerance", c.gp.gradient_tolerance},
          {"function_tolerance", c.gp.function_tolerance}}},
        {"sa", {{"n_base", c.sa_n_base}}},
        {"mcmc",
         {{"steps", c.mcmc_steps},
          {"burn", c.mcmc_burn},
          {"thin", c.mcmc_thin},
          {"adapt_start", c.mcmc_adapt_start},
          {"chains", c.mcmc_chains}}},
        {"likelihood",
         {{"relative_noise", c.likelihood.relative_noise},
          {"absolute_floor_m", c.likelihood.absolute_floor},
          {"use_dataset_sigmas", c.likelihood.use_dataset_sigmas},
          {"include_code_uncertainty", c.likelihood.include_code_uncertainty},
          {"outputs", selection_name(c.likelihood.outputs)}}}};
}

/// Parses a config document; absent keys keep their defaults, unknown keys are errors.
inline RunConfig config_from_json(const json& j, const fs::path& base_dir = ".") {
    using config_detail::check_keys;
    using config_detail::read;
    RunConfig c;
    c.base_dir = base_dir;
    check_keys(j, "config",
               {"config_format", "seed", "output_dir", "dataset", "model", "prior", "design", "gp", "sa", "mcmc",
                "likelihood"});
    int format = 1;
    read(j, "config_format", format, "config");
    if (format != 1) throw ConfigError("unsupported config_format " + std::to_string(format));
    read(j, "seed", c.seed, "config");
    read(j, "output_dir", c.output_dir, "config");
    read(j, "dataset", c.dataset, "config");
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "model", {"kind", "constants", "reduced", "external", "table"});
        std::string kind = "reduced";
        read(m, "kind", kind, "model");
        if (kind == "reduced") c.model = ModelKind::reduced;
        else if (kind == "external") c.model = ModelKind::external;
        else if (kind == "table") c.model = ModelKind::table;
        else throw ConfigError("model.kind must be reduced, external or table");
        if (m.contains("constants")) {
            const auto& k = m.at("constants");
            check_keys(k, "model.constants", {"density", "liquidus", "ambient", "solid_conductivity"});
            read(k, "density", c.constants.density, "model.constants");
            read(k, "liquidus", c.constants.liquidus, "model.constants");
            read(k, "ambient", c.constants.ambient, "model.constants");
            read(k, "solid_conductivity", c.constants.solid_conductivity, "model.constants");
        }
        if (m.contains("reduced")) {
            const auto& r = m.at("reduced");
            check_keys(r, "model.reduced",
                       {"quadrature_points", "tolerance_m", "marangoni_chi", "marangoni_ref", "loss_correction",
                        "liquid_weight"});
            read(r, "quadrature_points", c.reduced.quadrature_points, "model.reduced");
            read(r, "tolerance_m", c.reduced.tolerance, "model.reduced");
            read(r, "marangoni_chi", c.reduced.marangoni_chi, "model.reduced");
            read(r, "marangoni_ref", c.reduced.marangoni_ref, "model.reduced");
            read(r, "loss_correction", c.reduced.loss_correction, "model.reduced");
            read(r, "liquid_weight", c.reduced.liquid_weight, "model.reduced");
        }
        if (m.contains("external")) {
            const auto& e = m.at("external");
            check_keys(e, "model.external", {"command", "working_directory", "timeout_s"});
            read(e, "command", c.external.command_template, "model.external");
            read(e, "working_directory", c.external.working_directory, "model.external");
            read(e, "timeout_s", c.external.timeout_seconds, "model.external");
        }
        if (m.contains("table")) {
            const auto& t = m.at("table");
            check_keys(t, "model.table", {"path", "fallback"});
            read(t, "path", c.run_table, "model.table");
            read(t, "fallback", c.table_fallback, "model.table");
        }
    }
    if (j.contains("prior")) {
        const auto& p = j.at("prior");
        if (!p.is_array() || p.size() != kNumParams) throw ConfigError("prior must be an array of 8 entries");
        for (std::size_t i = 0; i < kNumParams; ++i) {
            check_keys(p[i], "prior[" + std::to_string(i) + "]", {"name", "nominal", "lower", "upper"});
            auto& e = c.prior.entries[i];
            std::string where = "prior[" + std::to_string(i) + "]";
            read(p[i], "name", e.name, where);
            read(p[i], "nominal", e.nominal, where);
            read(p[i], "lower", e.lower_multiplier, where);
            read(p[i], "upper", e.upper_multiplier, where);
        }
    }
    if (j.contains("design")) {
        check_keys(j.at("design"), "design", {"samples_per_condition"});
        read(j.at("design"), "samples_per_condition", c.samples_per_condition, "design");
    }
    if (j.contains("gp")) {
        const auto& g = j.at("gp");
        check_keys(g, "gp", {"starts", "max_iterations", "gradient_tolerance", "function_tolerance"});
        read(g, "starts", c.gp.starts, "gp");
        read(g, "max_iterations", c.gp.max_iterations, "gp");
        read(g, "gradient_tolerance", c.gp.gradient_tolerance, "gp");
        read(g, "function_tolerance", c.gp.function_tolerance, "gp");
    }
    if (j.contains("sa")) {
        check_keys(j.at("sa"), "sa", {"n_base"});
        read(j.at("sa"), "n_base", c.sa_n_base, "sa");
    }
    if (j.contains("mcmc")) {
        const auto& m = j.at("mcmc");
        check_keys(m, "mcmc", {"steps", "burn", "thin", "adapt_start", "chains"});
        read(m, "steps", c.mcmc_steps, "mcmc");
        read(m, "burn", c.mcmc_burn, "mcmc");
        read(m, "thin", c.mcmc_thin, "mcmc");
        read(m, "adapt_start", c.mcmc_adapt_start, "mcmc");
        read(m, "chains", c.mcmc_chains, "mcmc");
    }
    if (j.contains("likelihood")) {
        const auto& l = j.at("likelihood");
        check_keys(l, "likelihood",
                   {"relative_noise", "absolute_floor_m", "use_dataset_sigmas", "include_code_uncertainty", "outputs"});
        read(l, "relative_noise", c.likelihood.relative_noise, "likelihood");
        read(l, "absolute_floor_m", c.likelihood.absolute_floor, "likelihood");
        read(l, "use_dataset_sigmas", c.likelihood.use_dataset_sigmas, "likelihood");
        read(l, "include_code_uncertainty", c.likelihood.include_code_uncertainty, "likelihood");
        std::string outputs = selection_name(c.likelihood.outputs);
        read(l, "outputs", outputs, "likelihood");
        c.likelihood.outputs = parse_selection(outputs);
    }
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    auto c = config_from_json(j, fs::absolute(path).parent_path());
    c.validate();
    return c;
}

inline void save_config(const RunConfig& c, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << config_to_json(c).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// content digests

/// 64-bit FNV-1a as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return strprintf("%016llx", static_cast<unsigned long long>(h));
}

inline std::string digest_of(const json& j) { return fnv1a_hex(j.dump()); }

/// Digest of the configuration with the output location removed.
inline std::string config_digest(const RunConfig& c) {
    auto j = config_to_json(c);
    j.erase("output_dir");
    return digest_of(j);
}

// ---------------------------------------------------------------------------
// model construction, synthetic data, point validation

inline ForwardModel make_model(const RunConfig& c) {
    ForwardModel reduced = make_reduced_model(c.constants, c.reduced);
    auto external_spec = c.external;
    external_spec.working_directory = c.resolve(c.external.working_directory).string();
    switch (c.model) {
    case ModelKind::reduced: return reduced;
    case ModelKind::external: return make_external_model(external_spec);
    case ModelKind::table: {
        auto path = c.resolve(c.run_table).string();
        auto table = std::make_shared<RunTable>(fs::exists(path) ? RunTable::load(path) : RunTable{});
        table->set_path(path);
        ForwardModel fallback;
        if (c.table_fallback == "reduced") fallback = reduced;
        else if (c.table_fallback == "external") fallback = make_external_model(external_spec);
        return make_table_model(table, fallback);
    }
    }
    return reduced;
}

inline ExperimentalDataset load_run_dataset(const RunConfig& c) {
    return c.dataset.empty() ? bundled_dataset() : load_dataset(c.resolve(c.dataset).string());
}

/// Dataset with the designs of `base` and measurements from the model at
/// theta, multiplied by (1 + noise * N(0,1)).
inline ExperimentalDataset synthetic_dataset(const ExperimentalDataset& base, const ForwardModel& model,
                                             const CalibrationParams& theta, double relative_noise, RandomStream stream) {
    ExperimentalDataset ds;
    for (const auto& row : base.rows) {
        auto s = model(row.design, theta);
        if (!s.melted) throw PreconditionError(strprintf("synthetic truth does not melt at condition %d", row.index));
        ExperimentRow r;
        r.index = row.index;
        r.design = row.design;
        r.length = s.length * (1.0 + relative_noise * stream.normal());
        r.depth = s.depth * (1.0 + relative_noise * stream.normal());
        if (!(r.length > 0.0) || !(r.depth > 0.0)) throw PreconditionError("synthetic noise produced a non-positive size");
        ds.rows.push_back(r);
    }
    return ds;
}

struct ValidationRow {
    int index = 0;
    double measured_length = 0.0, measured_depth = 0.0;    // mm
    double predicted_length = 0.0, predicted_depth = 0.0;  // mm
    double error_length = 0.0, error_depth = 0.0;          // mm, absolute
};

struct ValidationTable {
    std::vector<ValidationRow> rows;
    double average_length_error = 0.0; // mm
    double average_depth_error = 0.0;  // mm
};

/// Absolute forward-model errors (mm) at theta for every experiment.
inline ValidationTable validate_at_point(const CalibrationParams& theta, const ExperimentalDataset& ds,
                                         const ForwardModel& model) {
    if (ds.rows.empty()) throw PreconditionError("validation needs a non-empty dataset");
    ValidationTable t;
    for (const auto& r : ds.rows) {
        auto s = model(r.design, theta);
        ValidationRow v;
        v.index = r.index;
        v.measured_length = r.length * 1e3;
        v.measured_depth = r.depth * 1e3;
        v.predicted_length = s.length * 1e3;
        v.predicted_depth = s.depth * 1e3;
        v.error_length = std::abs(v.predicted_length - v.measured_length);
        v.error_depth = std::abs(v.predicted_depth - v.measured_depth);
        t.rows.push_back(v);
    }
    for (const auto& v : t.rows) {
        t.average_length_error += v.error_length;
        t.average_depth_error += v.error_depth;
    }
    t.average_length_error /= static_cast<double>(t.rows.size());
    t.average_depth_error /= static_cast<double>(t.rows.size());
    return t;
}

inline json validation_to_json(const ValidationTable& t) {
    json rows = json::array();
    for (const auto& v : t.rows)
        rows.push_back({{"index", v.index},
                        {"measured_length_mm", v.measured_length},
                        {"measured_depth_mm", v.measured_depth},
                        {"predicted_length_mm", v.predicted_length},
                        {"predicted_depth_mm", v.predicted_depth},
                        {"error_length_mm", v.error_length},
                        {"error_depth_mm", v.error_depth}});
    return {{"rows", rows},
            {"average_error_length_mm", t.average_length_error},
            {"average_error_depth_mm", t.average_depth_error}};
}

inline ValidationTable validation_from_json(const json& j) {
    try {
        ValidationTable t;
        for (const auto& r : j.at("rows")) {
            ValidationRow v;
            v.index = r.at("index");
            v.measured_length = r.at("measured_length_mm");
            v.measured_depth = r.at("measured_depth_mm");
            v.predicted_length = r.at("predicted_length_mm");
            v.predicted_depth = r.at("predicted_depth_mm");
            v.error_length = r.at("error_length_mm");
            v.error_depth = r.at("error_depth_mm");
            t.rows.push_back(v);
        }
        t.average_length_error = j.at("average_error_length_mm");
        t.average_depth_error = j.at("average_error_depth_mm");
        return t;
    } catch (const json::exception& e) {
        throw ParseError(std::string("validation table: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// stages

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"design", "train", "validate-surrogate", "sa",
                                                   "calibrate", "validate", "report"};
    return names;
}

struct StageOutcome {
    std::string stage;
    std::string digest;
    bool recomputed = false;
};

inline json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(p.string() + ": " + e.what());
    }
}

inline void write_json_file(const fs::path& p, const json& j) {
    std::ofstream os(p);
    if (!os) throw IoError("cannot write " + p.string());
    os << j.dump(2) << '\n';
    if (!os) throw IoError("write failed for " + p.string());
}

/// Removes the wall-clock fields of a report so runs can be compared byte for byte.
inline json strip_timestamps(json report) {
    report.erase("timestamps");
    return report;
}

/// Runs the calibration stages against an output directory. Every stage
/// reads its upstream inputs from disk and writes a stamp holding the
/// digest of (its config section, upstream digests); a stage whose stamp
/// matches and whose artifacts exist is skipped.
class Pipeline {
public:
    Pipeline(RunConfig cfg, fs::path out_dir, unsigned threads = 1, std::ostream* log = nullptr)
        : cfg_(std::move(cfg)), out_(std::move(out_dir)), threads_(std::max(1u, threads)), log_(log) {
        cfg_.validate();
    }

    const fs::path& out_dir() const { return out_; }
    const RunConfig& config() const { return cfg_; }
    fs::path path(const std::string& name) const { return out_ / name; }

    StageOutcome design() {
        json key = {{"stage", "design"},
                    {"dataset", dataset_digest()},
                    {"model", model_section()},
                    {"prior", config_to_json(cfg_).at("prior")},
                    {"design", cfg_.samples_per_condition},
                    {"seed", cfg_.seed}};
        return run_stage("design", digest_of(key), {"training.csv", "training.json"}, [&] {
            auto ds = load_run_dataset(cfg_);
            auto model = make_model(cfg_);
            auto ts = build_training_set(ds, cfg_.prior, cfg_.samples_per_condition, model,
                                         RandomStream(cfg_.seed, kStreamDesign), threads_);
            save_training_set(ts, tmp("training.csv"), tmp("training.json"));
            commit({"training.csv", "training.json"});
        });
    }

    StageOutcome train() {
        auto up = design();
        json key = {{"stage", "train"}, {"design", up.digest}, {"gp", config_to_json(cfg_).at("gp")}, {"seed", cfg_.seed}};
        return run_stage("train", digest_of(key), {"gp_length.json", "gp_depth.json"}, [&] {
            auto ts = load_training_set(path("training.csv").string(), path("training.json").string());
            GpOptions opt = cfg_.gp;
            opt.threads = threads_;
            auto gl = fit_gp(ts, Output::length, RandomStream(cfg_.seed, kStreamGpLength), opt);
            save_gp(gl, tmp("gp_length.json"));
            auto gd = fit_gp(ts, Output::depth, RandomStream(cfg_.seed, kStreamGpDepth), opt);
            save_gp(gd, tmp("gp_depth.json"));
            commit({"gp_length.json", "gp_depth.json"});
        });
    }

    StageOutcome validate_surrogate() {
        auto up = train();
        json key = {{"stage", "validate-surrogate"}, {"train", up.digest}};
        return run_stage("validate-surrogate", digest_of(key), {"loocv.csv", "surrogate_validation.json"}, [&] {
            auto gl = load_gp(path("gp_length.json").string());
            auto gd = load_gp(path("gp_depth.json").string());
            auto ts = load_training_set(path("training.csv").string(), path("training.json").string());
            auto ll = loocv_q2(gl);
            auto ld = loocv_q2(gd);
            std::ofstream os(tmp("loocv.csv"));
            if (!os) throw IoError("cannot write loocv.csv");
            os << "row,condition,length_mm,length_loo_mm,depth_mm,depth_loo_mm\n";
            for (Eigen::Index i = 0; i < ll.targets.size(); ++i)
                os << i + 1 << ',' << ts.condition[static_cast<std::size_t>(i)] << ',' << format_exact(ll.targets(i) * 1e3)
                   << ',' << format_exact(ll.predictions(i) * 1e3) << ',' << format_exact(ld.targets(i) * 1e3) << ','
                   << format_exact(ld.predictions(i) * 1e3) << '\n';
            os.close();
            write_json_file(tmp("surrogate_validation.json"),
                            {{"q2_length", ll.q2},
                             {"q2_depth", ld.q2},
                             {"training_rows", ts.size()},
                             {"samples_per_condition", ts.samples_per_condition},
                             {"rejections", ts.rejections.size()},
                             {"method", "closed-form leave-one-out, hyperparameters frozen"}});
            commit({"loocv.csv", "surrogate_validation.json"});
        });
    }

    StageOutcome sa() {
        auto up = train();
        json key = {{"stage", "sa"}, {"train", up.digest}, {"sa", cfg_.sa_n_base}, {"dataset", dataset_digest()},
                    {"seed", cfg_.seed}};
        return run_stage("sa", digest_of(key), {"sensitivity.json", "sensitivity.csv"}, [&] {
            auto gl = load_gp(path("gp_length.json").string());
            auto gd = load_gp(path("gp_depth.json").string());
            auto ds = load_run_dataset(cfg_);
            auto rep = sa_on_surrogate(gl, gd, ds, cfg_.prior, cfg_.sa_n_base, RandomStream(cfg_.seed, kStreamSa), threads_);
            write_json_file(tmp("sensitivity.json"), sensitivity_to_json(rep));
            std::ofstream os(tmp("sensitivity.csv"));
            if (!os) throw IoError("cannot write sensitivity.csv");
            write_sensitivity_csv(os, rep);
            os.close();
            commit({"sensitivity.json", "sensitivity.csv"});
        });
    }

    StageOutcome calibrate() {
        auto up = train();
        auto cj = config_to_json(cfg_);
        json key = {{"stage", "calibrate"}, {"train", up.digest},        {"mcmc", cj.at("mcmc")},
                    {"likelihood", cj.at("likelihood")}, {"prior", cj.at("prior")}, {"dataset", dataset_digest()},
                    {"seed", cfg_.seed}};
        return run_stage("calibrate", digest_of(key), {"chain.csv", "chain.json", "posterior.json"}, [&] {
            auto gl = load_gp(path("gp_length.json").string());
            auto gd = load_gp(path("gp_depth.json").string());
            auto ds = load_run_dataset(cfg_);
            LogPosterior target(ds, gl, gd, cfg_.likelihood, cfg_.prior);
            MetropolisOptions opt{cfg_.mcmc_steps, cfg_.mcmc_adapt_start};
            std::vector<CalibrationParams> inits(cfg_.mcmc_chains, cfg_.prior.nominal());
            // extra chains start from prior draws
            RandomStream init_stream = RandomStream(cfg_.seed, kStreamMcmc).split(1000);
            for (std::size_t c = 1; c < inits.size(); ++c) {
                for (int attempt = 0;; ++attempt) {
                    Eigen::VectorXd u(static_cast<Eigen::Index>(kNumParams));
                    for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = init_stream.uniform();
                    inits[c] = scale_unit_point(u, cfg_.prior);
                    if (std::isfinite(target(inits[c]))) break;
                    if (attempt > 100) throw NumericError("no finite starting point found for chain " + std::to_string(c));
                }
            }
            auto chains = run_chains(target, inits, cfg_.prior, opt, RandomStream(cfg_.seed, kStreamMcmc), threads_);
            save_chain(chains.front(), tmp("chain.csv"), tmp("chain.json"));
            std::vector<PosteriorChain> kept;
            for (const auto& ch : chains) kept.push_back(burn_thin(ch, cfg_.mcmc_burn, cfg_.mcmc_thin));
            PosteriorChain pooled = kept.front();
            for (std::size_t c = 1; c < kept.size(); ++c) {
                Eigen::MatrixXd joined(pooled.samples.rows() + kept[c].samples.rows(), pooled.samples.cols());
                joined << pooled.samples, kept[c].samples;
                pooled.samples = joined;
                pooled.log_post.insert(pooled.log_post.end(), kept[c].log_post.begin(), kept[c].log_post.end());
                pooled.accepted.insert(pooled.accepted.end(), kept[c].accepted.begin(), kept[c].accepted.end());
                pooled.step.insert(pooled.step.end(), kept[c].step.begin(), kept[c].step.end());
            }
            auto summary = summarize(pooled);
            json post = summary_to_json(summary);
            post["burn"] = cfg_.mcmc_burn;
            post["thin"] = cfg_.mcmc_thin;
            post["steps"] = cfg_.mcmc_steps;
            post["chains"] = cfg_.mcmc_chains;
            if (chains.size() > 1) post["potential_scale_reduction"] = potential_scale_reduction(kept);
            write_json_file(tmp("posterior.json"), post);
            commit({"chain.csv", "chain.json", "posterior.json"});
        });
    }

    StageOutcome validate() {
        auto up = calibrate();
        json key = {{"stage", "validate"}, {"calibrate", up.digest}, {"model", model_section()},
                    {"dataset", dataset_digest()}};
        return run_stage("validate", digest_of(key), {"validation.json", "validation.csv"}, [&] {
            auto summary = summary_from_json(read_json_file(path("posterior.json")));
            auto ds = load_run_dataset(cfg_);
            auto model = make_model(cfg_);
            std::array<double, kNumParams> mean{};
            for (std::size_t i = 0; i < kNumParams; ++i) mean[i] = summary.params[i].mean;
            auto prior_t = validate_at_point(cfg_.prior.nominal(), ds, model);
            auto post_t = validate_at_point(CalibrationParams::from_array(mean), ds, model);
            auto mode_t = validate_at_point(CalibrationParams::from_vector(summary.mode), ds, model);
            write_json_file(tmp("validation.json"),
                            {{"comparison", "in-sample: the validation data are the calibration data"},
                             {"prior_nominal", validation_to_json(prior_t)},
                             {"posterior_mean", validation_to_json(post_t)},
                             {"posterior_mode", validation_to_json(mode_t)}});
            std::ofstream os(tmp("validation.csv"));
            if (!os) throw IoError("cannot write validation.csv");
            os << "index,measured_length_mm,measured_depth_mm,prior_length_mm,prior_depth_mm,prior_error_length_mm,"
                  "prior_error_depth_mm,posterior_length_mm,posterior_depth_mm,posterior_error_length_mm,"
                  "posterior_error_depth_mm\n";
            for (std::size_t i = 0; i < prior_t.rows.size(); ++i) {
                const auto& a = prior_t.rows[i];
                const auto& b = post_t.rows[i];
                os << a.index;
                for (double v : {a.measured_length, a.measured_depth, a.predicted_length, a.predicted_depth, a.error_length,
                                 a.error_depth, b.predicted_length, b.predicted_depth, b.error_length, b.error_depth})
                    os << ',' << format_exact(v);
                os << '\n';
            }
            os << "average,,,,," << format_exact(prior_t.average_length_error) << ','
               << format_exact(prior_t.average_depth_error) << ",,," << format_exact(post_t.average_length_error) << ','
               << format_exact(post_t.average_depth_error) << '\n';
            os.close();
            commit({"validation.json", "validation.csv"});
        });
    }

    StageOutcome report() {
        std::vector<StageOutcome> ups = {validate_surrogate(), sa(), validate()};
        json key = {{"stage", "report"}, {"config", config_digest(cfg_)}};
        for (const auto& u : ups) key[u.stage] = u.digest;
        return run_stage("report", digest_of(key), {"report.json"}, [&] {
            json rep = assemble_report();
            fs::create_directories(out_ / "plots");
            auto files = emit_plots(out_ / "plots");
            rep["plots"] = files;
            rep["timestamps"] = {{"generated_utc", utc_now()}};
            write_json_file(tmp("report.json"), rep);
            commit({"report.json"});
        });
    }

    /// Every stage, in order; the report stage pulls in all the others.
    StageOutcome run_all() { return report(); }

    StageOutcome run(const std::string& stage) {
        if (stage == "design") return design();
        if (stage == "train") return train();
        if (stage == "validate-surrogate") return validate_surrogate();
        if (stage == "sa") return sa();
        if (stage == "calibrate") return calibrate();
        if (stage == "validate") return validate();
        if (stage == "report") return report();
        throw PreconditionError("unknown stage '" + stage + "'");
    }

    /// Writes every figure (SVG plus CSV twin) into dir; returns the file names.
    std::vector<std::string> emit_plots(const fs::path& dir) const {
        auto chain = load_chain(path("chain.csv").string(), path("chain.json").string());
        if (chain.size() == 0) throw PreconditionError("cannot plot an empty chain");
        fs::create_directories(dir);
        std::vector<std::string> files;
        auto add = [&](std::vector<std::string> f) { files.insert(files.end(), f.begin(), f.end()); };

        auto val = read_json_file(path("validation.json"));
        auto prior_t = validation_from_json(val.at("prior_nominal"));
        auto post_t = validation_from_json(val.at("posterior_mean"));
        for (int o = 0; o < 2; ++o) {
            std::vector<double> measured, pri, post;
            for (std::size_t i = 0; i < prior_t.rows.size(); ++i) {
                measured.push_back(o == 0 ? prior_t.rows[i].measured_length : prior_t.rows[i].measured_depth);
                pri.push_back(o == 0 ? prior_t.rows[i].predicted_length : prior_t.rows[i].predicted_depth);
                post.push_back(o == 0 ? post_t.rows[i].predicted_length : post_t.rows[i].predicted_depth);
            }
            std::string name = o == 0 ? "length" : "depth";
            add(plot::parity(dir, "parity_" + name, "Melt pool " + name + ": model vs measurement (in-sample)", measured,
                             {{"prior_nominal", pri}, {"posterior_mean", post}}, "mm"));
        }

        auto loo = csv::read_file(path("loocv.csv").string());
        for (int o = 0; o < 2; ++o) {
            std::vector<double> truth, pred;
            for (const auto& r : loo.rows) {
                double a = 0.0, b = 0.0;
                csv::parse_double(r[static_cast<std::size_t>(2 + 2 * o)], a);
                csv::parse_double(r[static_cast<std::size_t>(3 + 2 * o)], b);
                truth.push_back(a);
                pred.push_back(b);
            }
            std::string name = o == 0 ? "length" : "depth";
            add(plot::parity(dir, "loocv_" + name, "Leave-one-out surrogate predictions: " + name, truth,
                             {{"loo_prediction", pred}}, "mm"));
        }

        auto kept = burn_thin(chain, std::min(cfg_.mcmc_burn, chain.size() - 1), cfg_.mcmc_thin);
        std::vector<double> steps(chain.step.begin(), chain.step.end());
        for (std::size_t j = 0; j < chain.dims(); ++j) {
            Eigen::VectorXd col = chain.samples.col(static_cast<Eigen::Index>(j));
            add(plot::lines(dir, "trace_" + chain.names[j], "Trace: " + chain.names[j], steps,
                            {{chain.names[j], std::vector<double>(col.data(), col.data() + col.size())}}, "step",
                            chain.names[j]));
            Eigen::VectorXd kc = kept.samples.col(static_cast<Eigen::Index>(j));
            std::vector<double> series(kc.data(), kc.data() + kc.size());
            std::size_t max_lag = std::min<std::size_t>(50, series.size() - 1);
            std::vector<double> acf(max_lag + 1, 0.0);
            try {
                acf = autocorrelation(series, max_lag);
            } catch (const PreconditionError&) {
                acf[0] = 1.0; // constant retained series
            }
            std::vector<double> lags(acf.size());
            for (std::size_t k = 0; k < lags.size(); ++k) lags[k] = static_cast<double>(k);
            double band = 1.96 / std::sqrt(static_cast<double>(series.size()));
            add(plot::lines(dir, "acf_" + chain.names[j], "Autocorrelation of retained samples: " + chain.names[j], lags,
                            {{"acf", acf}}, "lag", "acf", {band, -band}));
        }
        add(plot::pairs(dir, "pairs", kept.samples, chain.names));

        auto sens = sensitivity_from_json(read_json_file(path("sensitivity.json")));
        std::vector<std::string> cats(CalibrationParams::names.begin(), CalibrationParams::names.end());
        for (int o = 0; o < 2; ++o) {
            std::string name = o == 0 ? "length" : "depth";
            std::vector<double> p, s, first, total;
            for (std::size_t i = 0; i < kNumParams; ++i) {
                const auto& e = sens.entries[static_cast<std::size_t>(o)][i];
                p.push_back(e.pcc);
                s.push_back(e.srcc);
                first.push_back(e.first);
                total.push_back(e.total);
            }
            add(plot::bars(dir, "sa_correlation_" + name, "PCC and SRCC: " + name, cats, {{"PCC", p}, {"SRCC", s}}));
            add(plot::bars(dir, "sa_sobol_" + name, "Sobol indices: " + name, cats, {{"S_i", first}, {"T_i", total}}));
        }
        return files;
    }

private:
    static constexpr std::uint64_t kStreamDesign = 1, kStreamGpLength = 2, kStreamGpDepth = 3, kStreamSa = 4,
                                   kStreamMcmc = 5;

    void log(const std::string& s) const {
        if (log_) *log_ << s << '\n';
    }

    std::string tmp(const std::string& name) const { return (out_ / (name + ".partial")).string(); }

    void commit(std::initializer_list<const char*> names) const {
        for (const char* n : names) fs::rename(out_ / (std::string(n) + ".partial"), out_ / n);
    }

    json model_section() const {
        auto m = config_to_json(cfg_).at("model");
        if (cfg_.model == ModelKind::table && fs::exists(cfg_.resolve(cfg_.run_table)))
            m["table_content"] = fnv1a_hex(read_bytes(cfg_.resolve(cfg_.run_table)));
        return m;
    }

    static std::string read_bytes(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    std::string dataset_digest() const {
        std::ostringstream os;
        write_dataset(os, load_run_dataset(cfg_));
        return fnv1a_hex(os.str());
    }

    static std::string utc_now() {
        std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&t, &tm);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }

    StageOutcome run_stage(const std::string& stage, const std::string& digest, const std::vector<std::string>& artifacts,
                           const std::function<void()>& body) {
        StageOutcome out{stage, digest, false};
        fs::path stamp = out_ / "stamps" / (stage + ".json");
        bool fresh = fs::exists(stamp);
        if (fresh) {
            try {
                fresh = read_json_file(stamp).at("digest").get<std::string>() == digest;
            } catch (const std::exception&) {
                fresh = false;
            }
        }
        for (const auto& a : artifacts) fresh = fresh && fs::exists(out_ / a);
        if (fresh) {
            if (reported_.insert(stage).second) log(stage + ": up to date (" + digest + ")");
            return out;
        }
        log(stage + ": running");
        try {
            fs::create_directories(out_ / "stamps");
            fs::remove(stamp);
            body();
            write_json_file(stamp, {{"stage", stage}, {"digest", digest}, {"artifacts", artifacts}});
        } catch (const Error& e) {
            throw StageError(stage, e.category() + ": " + e.what());
        } catch (const fs::filesystem_error& e) {
            throw StageError(stage, std::string("io: ") + e.what());
        }
        out.recomputed = true;
        return out;
    }

    json assemble_report() const {
        auto posterior = read_json_file(path("posterior.json"));
        auto validation = read_json_file(path("validation.json"));
        auto surrogate = read_json_file(path("surrogate_validation.json"));
        auto sensitivity = read_json_file(path("sensitivity.json"));
        json stamps;
        for (const auto& s : stage_names()) {
            fs::path p = out_ / "stamps" / (s + ".json");
            if (s != "report" && fs::exists(p)) stamps[s] = read_json_file(p).at("digest");
        }
        const auto& pri = validation.at("prior_nominal");
        const auto& post = validation.at("posterior_mean");
        double lp = pri.at("average_error_length_mm"), dp = pri.at("average_error_depth_mm");
        double lq = post.at("average_error_length_mm"), dq = post.at("average_error_depth_mm");
        auto sens = sensitivity_from_json(sensitivity);
        json rep;
        rep["report_format"] = 1;
        rep["provenance"] = {{"seed", cfg_.seed},
                             {"config_digest", config_digest(cfg_)},
                             {"stage_digests", stamps},
                             {"model", model_kind_name(cfg_.model)},
                             {"dataset", cfg_.dataset.empty() ? std::string("bundled") : cfg_.dataset}};
        rep["likelihood"] = {
            {"noise_rule", strprintf("sigma_exp = max(%s * measured, %s m)", format_exact(cfg_.likelihood.relative_noise).c_str(),
                                     format_exact(cfg_.likelihood.absolute_floor).c_str())},
            {"explicit_sigmas_used", cfg_.likelihood.use_dataset_sigmas && load_run_dataset(cfg_).has_sigmas()},
            {"code_uncertainty", cfg_.likelihood.include_code_uncertainty},
            {"outputs", selection_name(cfg_.likelihood.outputs)},
            {"model_discrepancy", "zero"}};
        rep["surrogate"] = surrogate;
        rep["sensitivity"] = sensitivity;
        rep["sensitivity"]["dominant_total_index"] = {
            {"length", std::string(CalibrationParams::names[sens.dominant(Output::length)])},
            {"depth", std::string(CalibrationParams::names[sens.dominant(Output::depth)])}};
        rep["posterior"] = posterior;
        rep["validation"] = validation;
        rep["error_summary"] = {{"prior_nominal", {{"length_mm", lp}, {"depth_mm", dp}}},
                                {"posterior_mean", {{"length_mm", lq}, {"depth_mm", dq}}},
                                {"length_ratio", lp > 0.0 ? lq / lp : 0.0},
                                {"depth_ratio", dp > 0.0 ? dq / dp : 0.0}};
        return rep;
    }

    RunConfig cfg_;
    fs::path out_;
    unsigned threads_;
    std::ostream* log_;
    std::set<std::string> reported_;
};

/// Runs every stage and returns the parsed report.
inline json run_calibration(const RunConfig& cfg, const fs::path& out_dir, unsigned threads = 1,
                            std::ostream* log = nullptr) {
    fs::create_directories(out_dir);
    Pipeline p(cfg, out_dir, threads, log);
    p.run_all();
    return read_json_file(out_dir / "report.json");
}

} // namespace meltcal

#endif // MELTCAL_PIPELINE_HPP
