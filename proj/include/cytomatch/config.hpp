#ifndef CYTOMATCH_CONFIG_HPP
#define CYTOMATCH_CONFIG_HPP

#include <nlohmann/json.hpp>

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "data.hpp"
#include "error.hpp"
#include "impute.hpp"
#include "panel.hpp"
#include "synthetic.hpp"

/**
 * @file config.hpp
 *
 * @brief The JSON run configuration shared by every command.
 *
 * Every section is optional; missing keys take the defaults below. `"pattern"` and `"panel"` accept either an
 * object or one of the preset names `"lymph-node"` and `"toy"`.
 */

namespace cytomatch {

struct InputPaths {
    std::string data;
    std::string file1;
    std::string file2;
    std::string truth1;
    std::string truth2;
    std::string eval;
    std::string model;
    std::string missing_token;
};

struct SimulateSettings {
    /** "panel" or "toy". */
    std::string generator = "panel";
    std::size_t rows = 25000;
    std::uint64_t seed = 1;
    std::vector<double> weights;
    std::uint64_t covariance_seed = 7;
};

struct SplitSettings {
    std::size_t n1 = 10000;
    std::size_t n2 = 10000;
    std::size_t n_eval = 5000;
    std::uint64_t seed = 1;
};

struct ModelSettings {
    /** 0 means one component per panel cell type. */
    std::size_t components = 0;
    Index latent_dim = 2;
    double tol = 1e-6;
    int max_iter = 500;
    std::uint64_t seed = 1;
};

struct ImputeSettings {
    ImputeMethod method = ImputeMethod::cluster_nn;
    bool standardize = false;
};

struct HistogramSettings {
    HistogramOptions options;
    /** Empty means every column. */
    std::vector<std::string> markers;
};

struct EvaluateSettings {
    int repetitions = 10;
    std::uint64_t seed = 1;
    std::string label = "data";
};

struct RunConfig {
    InputPaths inputs;
    std::string output_dir = "cytomatch-out";
    std::optional<FilePattern> pattern;
    std::optional<PanelConfig> panel;
    ModelSettings model;
    ImputeSettings impute;
    SplitSettings split;
    HistogramSettings histogram;
    EvaluateSettings evaluate;
    SimulateSettings simulate;
    int threads = 0;
};

namespace detail {

inline FilePattern pattern_from_json(const nlohmann::json& node) {
    if (node.is_string()) {
        const auto name = node.get<std::string>();
        if (name == "lymph-node") {
            return lymph_node_pattern();
        }
        if (name == "toy") {
            return toy_pattern();
        }
        throw ConfigError("unknown pattern preset '" + name + "'");
    }
    FilePattern pattern;
    pattern.common = node.value("common", std::vector<std::string>{});
    pattern.specific1 = node.value("specific1", std::vector<std::string>{});
    pattern.specific2 = node.value("specific2", std::vector<std::string>{});
    return pattern;
}

inline nlohmann::json pattern_to_json(const FilePattern& pattern) {
    return {{"common", pattern.common}, {"specific1", pattern.specific1}, {"specific2", pattern.specific2}};
}

inline Expression parse_sign(const std::string& text, const std::string& type, const std::string& marker) {
    if (text == "+") {
        return Expression::positive;
    }
    if (text == "-") {
        return Expression::negative;
    }
    throw ConfigError("cell type '" + type + "', marker '" + marker + "': sign must be '+' or '-'");
}

inline PanelConfig panel_from_json(const nlohmann::json& node) {
    if (node.is_string()) {
        const auto name = node.get<std::string>();
        if (name == "lymph-node") {
            return lymph_node_panel();
        }
        if (name == "toy") {
            return toy_panel();
        }
        throw ConfigError("unknown panel preset '" + name + "'");
    }

    PanelConfig panel;
    panel.markers = node.at("markers").get<std::vector<std::string>>();
    for (const auto& entry : node.at("cell_types")) {
        CellType type;
        type.name = entry.at("name").get<std::string>();
        const auto& signs = entry.at("signs");
        if (signs.is_string()) {
            const auto text = signs.get<std::string>();
            if (text.size() != panel.markers.size()) {
                throw ConfigError("cell type '" + type.name + "': sign string must have one character per marker");
            }
            for (std::size_t j = 0; j < text.size(); ++j) {
                type.signs.push_back(parse_sign(std::string(1, text[j]), type.name, panel.markers[j]));
            }
        } else {
            for (const auto& marker : panel.markers) {
                if (!signs.contains(marker)) {
                    throw ConfigError("cell type '" + type.name + "' gives no sign for marker '" + marker + "'");
                }
                type.signs.push_back(parse_sign(signs.at(marker).get<std::string>(), type.name, marker));
            }
        }
        panel.cell_types.push_back(std::move(type));
    }

    panel.levels.assign(panel.markers.size(), std::nullopt);
    if (node.contains("levels")) {
        const auto& levels = node.at("levels");
        for (auto it = levels.begin(); it != levels.end(); ++it) {
            const auto pos = std::find(panel.markers.begin(), panel.markers.end(), it.key());
            if (pos == panel.markers.end()) {
                throw ConfigError("levels given for unknown marker '" + it.key() + "'");
            }
            panel.levels[static_cast<std::size_t>(pos - panel.markers.begin())] =
                ExpressionLevels{it.value().at("negative").get<double>(), it.value().at("positive").get<double>()};
        }
    }
    panel.validate();
    return panel;
}

inline nlohmann::json panel_to_json(const PanelConfig& panel) {
    nlohmann::json types = nlohmann::json::array();
    for (const auto& type : panel.cell_types) {
        std::string signs;
        for (auto s : type.signs) {
            signs += s == Expression::positive ? '+' : '-';
        }
        types.push_back({{"name", type.name}, {"signs", signs}});
    }
    nlohmann::json levels = nlohmann::json::object();
    for (std::size_t j = 0; j < panel.markers.size(); ++j) {
        if (panel.levels[j]) {
            levels[panel.markers[j]] = {{"negative", panel.levels[j]->negative}, {"positive", panel.levels[j]->positive}};
        }
    }
    return {{"markers", panel.markers}, {"cell_types", types}, {"levels", levels}};
}

}

inline RunConfig parse_config(const nlohmann::json& doc) {
    try {
        RunConfig cfg;
        if (doc.contains("inputs")) {
            const auto& in = doc.at("inputs");
            cfg.inputs.data = in.value("data", "");
            cfg.inputs.file1 = in.value("file1", "");
            cfg.inputs.file2 = in.value("file2", "");
            cfg.inputs.truth1 = in.value("truth1", "");
            cfg.inputs.truth2 = in.value("truth2", "");
            cfg.inputs.eval = in.value("eval", "");
            cfg.inputs.model = in.value("model", "");
            cfg.inputs.missing_token = in.value("missing_token", "");
        }
        cfg.output_dir = doc.value("output_dir", cfg.output_dir);
        if (doc.contains("pattern") && !doc.at("pattern").is_null()) {
            cfg.pattern = detail::pattern_from_json(doc.at("pattern"));
        }
        if (doc.contains("panel") && !doc.at("panel").is_null()) {
            cfg.panel = detail::panel_from_json(doc.at("panel"));
        }
        if (doc.contains("model")) {
            const auto& m = doc.at("model");
            cfg.model.components = m.value("components", cfg.model.components);
            cfg.model.latent_dim = m.value("latent_dim", cfg.model.latent_dim);
            cfg.model.tol = m.value("tol", cfg.model.tol);
            cfg.model.max_iter = m.value("max_iter", cfg.model.max_iter);
            cfg.model.seed = m.value("seed", cfg.model.seed);
        }
        if (doc.contains("impute")) {
            const auto& im = doc.at("impute");
            cfg.impute.method = parse_impute_method(im.value("method", to_string(cfg.impute.method)));
            cfg.impute.standardize = im.value("standardize", cfg.impute.standardize);
        }
        if (doc.contains("split")) {
            const auto& s = doc.at("split");
            cfg.split.n1 = s.value("n1", cfg.split.n1);
            cfg.split.n2 = s.value("n2", cfg.split.n2);
            cfg.split.n_eval = s.value("n_eval", cfg.split.n_eval);
            cfg.split.seed = s.value("seed", cfg.split.seed);
        }
        if (doc.contains("histogram")) {
            const auto& h = doc.at("histogram");
            cfg.histogram.options.bins = h.value("bins", cfg.histogram.options.bins);
            cfg.histogram.options.smoothing = h.value("smoothing", cfg.histogram.options.smoothing);
            cfg.histogram.markers = h.value("markers", cfg.histogram.markers);
        }
        if (doc.contains("evaluate")) {
            const auto& e = doc.at("evaluate");
            cfg.evaluate.repetitions = e.value("repetitions", cfg.evaluate.repetitions);
            cfg.evaluate.seed = e.value("seed", cfg.evaluate.seed);
            cfg.evaluate.label = e.value("label", cfg.evaluate.label);
        }
        if (doc.contains("simulate")) {
            const auto& s = doc.at("simulate");
            cfg.simulate.generator = s.value("generator", cfg.simulate.generator);
            cfg.simulate.rows = s.value("rows", cfg.simulate.rows);
            cfg.simulate.seed = s.value("seed", cfg.simulate.seed);
            cfg.simulate.weights = s.value("weights", cfg.simulate.weights);
            cfg.simulate.covariance_seed = s.value("covariance_seed", cfg.simulate.covariance_seed);
        }
        cfg.threads = doc.value("threads", cfg.threads);

        if (cfg.model.latent_dim < 1) {
            throw ConfigError("model.latent_dim must be at least 1");
        }
        if (!(cfg.model.tol > 0)) {
            throw ConfigError("model.tol must be positive");
        }
        if (cfg.evaluate.repetitions < 1) {
            throw ConfigError("evaluate.repetitions must be at least 1");
        }
        if (cfg.panel && cfg.model.components > cfg.panel->components()) {
            throw ConfigError("model.components exceeds the number of panel cell types");
        }
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed configuration: ") + e.what());
    }
}

/** The fully resolved configuration, every default spelled out. */
inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json doc;
    doc["inputs"] = {
        {"data", cfg.inputs.data}, {"file1", cfg.inputs.file1}, {"file2", cfg.inputs.file2}, {"truth1", cfg.inputs.truth1},
        {"truth2", cfg.inputs.truth2}, {"eval", cfg.inputs.eval}, {"model", cfg.inputs.model}, {"missing_token", cfg.inputs.missing_token},
    };
    doc["output_dir"] = cfg.output_dir;
    doc["pattern"] = cfg.pattern ? detail::pattern_to_json(*cfg.pattern) : nlohmann::json();
    doc["panel"] = cfg.panel ? detail::panel_to_json(*cfg.panel) : nlohmann::json();
    doc["model"] = {{"components", cfg.model.components}, {"latent_dim", cfg.model.latent_dim}, {"tol", cfg.model.tol},
                    {"max_iter", cfg.model.max_iter}, {"seed", cfg.model.seed}};
    doc["impute"] = {{"method", to_string(cfg.impute.method)}, {"standardize", cfg.impute.standardize}};
    doc["split"] = {{"n1", cfg.split.n1}, {"n2", cfg.split.n2}, {"n_eval", cfg.split.n_eval}, {"seed", cfg.split.seed}};
    doc["histogram"] = {{"bins", cfg.histogram.options.bins}, {"smoothing", cfg.histogram.options.smoothing}, {"markers", cfg.histogram.markers}};
    doc["evaluate"] = {{"repetitions", cfg.evaluate.repetitions}, {"seed", cfg.evaluate.seed}, {"label", cfg.evaluate.label}};
    doc["simulate"] = {{"generator", cfg.simulate.generator}, {"rows", cfg.simulate.rows}, {"seed", cfg.simulate.seed},
                       {"weights", cfg.simulate.weights}, {"covariance_seed", cfg.simulate.covariance_seed}};
    doc["threads"] = cfg.threads;
    return doc;
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot open configuration '" + path + "'");
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("'" + path + "': " + e.what());
    }
}

/**
 * Applies one `dotted.key=value` override to a configuration document.
 * The value is read as JSON when it parses as such and as a plain string otherwise.
 */
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' must look like key.path=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);

    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        value = text;
    }

    nlohmann::json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) {
            throw ConfigError("override key '" + path + "' has an empty component");
        }
        if (!node->is_object()) {
            *node = nlohmann::json::object();
        }
        node = &(*node)[key];
        if (dot == std::string::npos) {
            break;
        }
        start = dot + 1;
    }
    *node = value;
}

}

#endif
