#ifndef CYTOMATCH_MODEL_IO_HPP
#define CYTOMATCH_MODEL_IO_HPP

#include <nlohmann/json.hpp>

#include <fstream>
#include <string>

#include "em.hpp"
#include "error.hpp"

/**
 * @file model_io.hpp
 *
 * @brief JSON persistence of fitted mixture models.
 *
 * Documents carry `"schema": "cytomatch.mixture_model"` and an integer `"version"`; loading rejects anything else.
 */

namespace cytomatch {

inline constexpr const char* model_schema_name = "cytomatch.mixture_model";
inline constexpr int model_schema_version = 1;

inline nlohmann::json model_to_json(const MixtureModel& model) {
    using nlohmann::json;
    json doc;
    doc["schema"] = model_schema_name;
    doc["version"] = model_schema_version;
    doc["columns"] = model.columns;
    doc["latent_dim"] = model.latent_dim;

    json comps = json::array();
    for (const auto& comp : model.components) {
        json entry;
        entry["weight"] = comp.weight;
        entry["mean"] = std::vector<double>(comp.mean.data(), comp.mean.data() + comp.mean.size());
        json rows = json::array();
        for (Index i = 0; i < comp.loadings.rows(); ++i) {
            std::vector<double> row(static_cast<std::size_t>(comp.loadings.cols()));
            for (Index j = 0; j < comp.loadings.cols(); ++j) {
                row[static_cast<std::size_t>(j)] = comp.loadings(i, j);
            }
            rows.push_back(row);
        }
        entry["loadings"] = rows;
        entry["noise_variance"] = comp.noise_variance;
        comps.push_back(entry);
    }
    doc["components"] = comps;
    doc["trace"] = model.trace;
    doc["iterations"] = model.iterations;
    doc["converged"] = model.converged;
    doc["init"] = {
        {"seed", model.init.seed},
        {"random_entries", "uniform[-r, r], r = mean estimable sample variance"},
        {"random_range", model.init.random_range},
        {"fallback", model.init.fallback},
    };
    doc["warnings"] = model.warnings;
    return doc;
}

inline MixtureModel model_from_json(const nlohmann::json& doc) {
    try {
        if (doc.value("schema", std::string()) != model_schema_name) {
            throw ConfigError("not a cytomatch mixture model document");
        }
        const int version = doc.at("version").get<int>();
        if (version != model_schema_version) {
            throw ConfigError("unsupported model schema version " + std::to_string(version) + " (expected " +
                              std::to_string(model_schema_version) + ")");
        }

        MixtureModel model;
        model.columns = doc.at("columns").get<std::vector<std::string>>();
        model.latent_dim = doc.at("latent_dim").get<Index>();
        for (const auto& entry : doc.at("components")) {
            PpcaComponent comp;
            comp.weight = entry.at("weight").get<double>();
            const auto mean = entry.at("mean").get<std::vector<double>>();
            comp.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Index>(mean.size()));
            const auto rows = entry.at("loadings").get<std::vector<std::vector<double>>>();
            comp.loadings.resize(static_cast<Index>(rows.size()), model.latent_dim);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (static_cast<Index>(rows[i].size()) != model.latent_dim) {
                    throw ConfigError("loading row has the wrong length");
                }
                for (std::size_t j = 0; j < rows[i].size(); ++j) {
                    comp.loadings(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
                }
            }
            comp.noise_variance = entry.at("noise_variance").get<double>();
            model.components.push_back(std::move(comp));
        }
        model.trace = doc.value("trace", std::vector<double>{});
        model.iterations = doc.value("iterations", 0);
        model.converged = doc.value("converged", false);
        if (doc.contains("init")) {
            const auto& init = doc.at("init");
            model.init.seed = init.value("seed", std::uint64_t{0});
            model.init.random_range = init.value("random_range", std::vector<double>{});
            model.init.fallback = init.value("fallback", std::vector<bool>{});
        }
        model.warnings = doc.value("warnings", std::vector<std::string>{});
        model.validate();
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed model document: ") + e.what());
    }
}

inline void save_model(const MixtureModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw LoadError("cannot write '" + path + "'");
    }
    out << model_to_json(model).dump(2) << '\n';
}

inline MixtureModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot open '" + path + "'");
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("'" + path + "': " + e.what());
    }
    return model_from_json(doc);
}

}

#endif
