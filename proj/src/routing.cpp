// SPDX-License-Identifier: Apache-2.0
#include "esft/routing.hpp"

#include <fstream>

#include "esft/common.hpp"
#include "json.hpp"

namespace esft {

void RoutingLog::validate() const {
    if (static_cast<int>(per_layer.size()) != layer_count) {
        throw ContractError("routing log layer list does not match layer_count");
    }
    int64_t total = 0;
    for (int s : sample_sizes) total += s;
    for (const auto& layer : per_layer) {
        if (static_cast<int64_t>(layer.size()) != total) {
            throw ContractError("routing log token records do not match sample sizes");
        }
        for (const TokenRouting& rec : layer) {
            if (static_cast<int>(rec.experts.size()) != top_k ||
                rec.gates.size() != rec.experts.size()) {
                throw ContractError("token record does not hold exactly top_k entries");
            }
            for (double g : rec.gates) {
                if (g < 0.0) throw ContractError("negative gate value in routing log");
            }
            for (int e : rec.experts) {
                if (e < 0 || e >= n_experts) throw ContractError("expert id out of range in log");
            }
        }
    }
    if (retain_affinities && static_cast<int>(affinity_rows.size()) != layer_count) {
        throw ContractError("retained affinity rows do not match layer_count");
    }
}

void save_routing_log(const RoutingLog& log, const std::string& path) {
    log.validate();
    std::ofstream out(path);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    nlohmann::json header{{"schema_version", 1},
                          {"task_label", log.task_label},
                          {"layer_count", log.layer_count},
                          {"n_experts", log.n_experts},
                          {"top_k", log.top_k},
                          {"retain_affinities", log.retain_affinities},
                          {"sample_sizes", log.sample_sizes}};
    out << header.dump() << "\n";
    const int64_t tokens = log.token_count();
    for (int64_t t = 0; t < tokens; ++t) {
        nlohmann::json layers = nlohmann::json::array();
        for (int l = 0; l < log.layer_count; ++l) {
            const TokenRouting& rec = log.per_layer[static_cast<size_t>(l)][static_cast<size_t>(t)];
            nlohmann::json jl{{"e", rec.experts}, {"g", rec.gates}};
            if (log.retain_affinities) {
                jl["a"] = log.affinity_rows[static_cast<size_t>(l)][static_cast<size_t>(t)];
            }
            layers.push_back(std::move(jl));
        }
        out << nlohmann::json{{"layers", std::move(layers)}}.dump() << "\n";
    }
}

RoutingLog load_routing_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open routing log '" + path + "'");
    std::string line;
    int line_no = 0;
    RoutingLog log;
    auto parse = [&](const std::string& text) {
        try {
            return nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw InputError("malformed routing log line " + std::to_string(line_no) + ": " +
                             e.what());
        }
    };
    if (!std::getline(in, line)) throw InputError("routing log '" + path + "' is empty");
    ++line_no;
    const nlohmann::json header = parse(line);
    try {
        log.task_label = header.at("task_label").get<std::string>();
        log.layer_count = header.at("layer_count").get<int>();
        log.n_experts = header.at("n_experts").get<int>();
        log.top_k = header.at("top_k").get<int>();
        log.retain_affinities = header.at("retain_affinities").get<bool>();
        log.sample_sizes = header.at("sample_sizes").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError("malformed routing log header: " + std::string(e.what()));
    }
    log.per_layer.resize(static_cast<size_t>(log.layer_count));
    if (log.retain_affinities) log.affinity_rows.resize(static_cast<size_t>(log.layer_count));
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const nlohmann::json rec = parse(line);
        try {
            const auto& layers = rec.at("layers");
            if (static_cast<int>(layers.size()) != log.layer_count) {
                throw InputError("line " + std::to_string(line_no) +
                                 " does not cover every layer");
            }
            for (int l = 0; l < log.layer_count; ++l) {
                TokenRouting tr;
                tr.experts = layers[static_cast<size_t>(l)].at("e").get<std::vector<int>>();
                tr.gates = layers[static_cast<size_t>(l)].at("g").get<std::vector<double>>();
                log.per_layer[static_cast<size_t>(l)].push_back(std::move(tr));
                if (log.retain_affinities) {
                    log.affinity_rows[static_cast<size_t>(l)].push_back(
                        layers[static_cast<size_t>(l)].at("a").get<std::vector<double>>());
                }
            }
        } catch (const nlohmann::json::exception& e) {
            throw InputError("malformed routing log line " + std::to_string(line_no) + ": " +
                             e.what());
        }
    }
    log.validate();
    return log;
}

} // namespace esft
