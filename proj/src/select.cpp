// SPDX-License-Identifier: Apache-2.0

#include "esft/select.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace esft {

using nlohmann::json;

std::string score_kind_name(ScoreKind k) {
    return k == ScoreKind::average_gate ? "average_gate" : "token_selection_ratio";
}

ScoreKind score_kind_from_name(const std::string& s) {
    if (s == "average_gate") return ScoreKind::average_gate;
    if (s == "token_selection_ratio") return ScoreKind::token_selection_ratio;
    throw ConfigError("unknown score kind '" + s +
                      "', expected average_gate or token_selection_ratio");
}

std::string routed_policy_name(RoutedPolicy p) {
    switch (p) {
        case RoutedPolicy::all: return "all";
        case RoutedPolicy::selected: return "selected";
        case RoutedPolicy::none: return "none";
    }
    throw ContractError("unhandled routed policy");
}

RoutedPolicy routed_policy_from_name(const std::string& s) {
    if (s == "all") return RoutedPolicy::all;
    if (s == "selected") return RoutedPolicy::selected;
    if (s == "none") return RoutedPolicy::none;
    throw ConfigError("unknown routed policy '" + s + "', expected all, selected, or none");
}

namespace {

// Shared two-level averaging core. accumulate(layer, token, out_row) adds the
// token's contribution to the per-sample sums.
ExpertRelevance two_level_mean(const RoutingLog& log, ScoreKind kind, double slot_scale) {
    log.validate();
    if (log.token_count() == 0 || log.sample_count() == 0) {
        throw InputError("relevance scores need a non-empty routing log");
    }
    ExpertRelevance rel;
    rel.score_kind = kind;
    rel.sample_count = log.sample_count();
    rel.sample_sizes = log.sample_sizes;
    rel.scores.assign(static_cast<size_t>(log.layer_count),
                      std::vector<double>(static_cast<size_t>(log.n_experts), 0.0));
    for (int l = 0; l < log.layer_count; ++l) {
        auto& out = rel.scores[static_cast<size_t>(l)];
        const auto& tokens = log.per_layer[static_cast<size_t>(l)];
        int64_t t = 0;
        for (const int len : log.sample_sizes) {
            std::vector<double> sample_sum(static_cast<size_t>(log.n_experts), 0.0);
            for (int j = 0; j < len; ++j, ++t) {
                const TokenRouting& tr = tokens[static_cast<size_t>(t)];
                for (size_t i = 0; i < tr.experts.size(); ++i) {
                    const double v = kind == ScoreKind::average_gate ? tr.gates[i] : slot_scale;
                    sample_sum[static_cast<size_t>(tr.experts[i])] += v;
                }
            }
            for (int e = 0; e < log.n_experts; ++e) {
                out[static_cast<size_t>(e)] += sample_sum[static_cast<size_t>(e)] / len;
            }
        }
        for (double& v : out) v /= static_cast<double>(log.sample_count());
    }
    return rel;
}

} // namespace

ExpertRelevance average_gate_score(const RoutingLog& log) {
    return two_level_mean(log, ScoreKind::average_gate, 0.0);
}

ExpertRelevance token_selection_ratio(const RoutingLog& log, int k) {
    if (k != log.top_k) {
        throw InputError("token selection ratio got k=" + std::to_string(k) +
                         " but the log was collected with top_k=" + std::to_string(log.top_k));
    }
    return two_level_mean(log, ScoreKind::token_selection_ratio, 1.0 / k);
}

ExpertSelection select_experts(const ExpertRelevance& rel, double p) {
    if (!(p > 0.0) || p > 1.0) {
        throw ConfigError("selection threshold must be in (0, 1], got " + std::to_string(p));
    }
    ExpertSelection sel;
    sel.p = p;
    sel.score_kind = rel.score_kind;
    for (const auto& scores : rel.scores) {
        const int n = static_cast<int>(scores.size());
        std::vector<int> order(scores.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        });
        const double total = std::accumulate(scores.begin(), scores.end(), 0.0);
        std::vector<int> chosen;
        double achieved = 0.0;
        if (total < p) {
            // Average-gate totals can fall short of p; take everything that
            // contributes rather than failing.
            for (int e = 0; e < n; ++e) {
                if (scores[static_cast<size_t>(e)] > 0.0) chosen.push_back(e);
            }
            achieved = total;
        } else {
            double cum = 0.0;
            for (const int e : order) {
                chosen.push_back(e);
                cum += scores[static_cast<size_t>(e)];
                if (cum >= p) break;
            }
            achieved = cum;
        }
        std::sort(chosen.begin(), chosen.end());
        sel.per_layer.push_back(std::move(chosen));
        sel.achieved_mass.push_back(achieved);
    }
    return sel;
}

bool TrainMask::contains(const std::string& group_name) const {
    return std::find(trainable_groups.begin(), trainable_groups.end(), group_name) !=
           trainable_groups.end();
}

TrainMask build_train_mask(const MoEModel& model, const std::optional<ExpertSelection>& sel,
                           RoutedPolicy routed_policy, bool shared_flag, bool non_expert_flag) {
    if (routed_policy == RoutedPolicy::selected && !sel.has_value()) {
        throw ConfigError("routed policy 'selected' needs an expert selection");
    }
    const MoEModelConfig& cfg = model.config();
    if (sel.has_value() && static_cast<int>(sel->per_layer.size()) != cfg.n_layers) {
        throw ConfigError("selection covers " + std::to_string(sel->per_layer.size()) +
                          " layers, model has " + std::to_string(cfg.n_layers));
    }
    if (sel.has_value()) {
        for (const auto& layer : sel->per_layer) {
            for (const int e : layer) {
                if (e < 0 || e >= cfg.n_routed_experts) {
                    throw ConfigError("selection contains expert " + std::to_string(e) +
                                      ", model has " + std::to_string(cfg.n_routed_experts));
                }
            }
        }
    }
    TrainMask mask;
    mask.routed_policy = routed_policy;
    mask.shared_experts_trainable = shared_flag;
    mask.non_expert_trainable = non_expert_flag;
    for (const ParamGroup& g : model.param_groups()) {
        bool trainable = false;
        if (g.id.kind == GroupKind::lora_a || g.id.kind == GroupKind::lora_b) {
            trainable = true;
        } else if (is_routed_expert_kind(g.id.kind)) {
            switch (routed_policy) {
                case RoutedPolicy::all: trainable = true; break;
                case RoutedPolicy::none: trainable = false; break;
                case RoutedPolicy::selected: {
                    const auto& ids = sel->per_layer[static_cast<size_t>(g.id.layer)];
                    trainable = std::binary_search(ids.begin(), ids.end(), g.id.expert);
                    break;
                }
            }
        } else if (is_shared_expert_kind(g.id.kind)) {
            trainable = shared_flag;
        } else {
            trainable = non_expert_flag;
        }
        if (trainable) {
            mask.trainable_groups.push_back(g.name);
            mask.trainable_param_count += static_cast<int64_t>(g.tensor.numel());
        }
    }
    return mask;
}

ExpertsTrainedReport experts_trained_report(const ExpertSelection& sel) {
    ExpertsTrainedReport rep;
    for (const auto& layer : sel.per_layer) {
        rep.per_layer_counts.push_back(static_cast<int>(layer.size()));
        rep.mean_count += static_cast<double>(layer.size());
    }
    if (!rep.per_layer_counts.empty()) {
        rep.mean_count /= static_cast<double>(rep.per_layer_counts.size());
    }
    return rep;
}

void save_selection(const ExpertSelection& sel, const std::string& path) {
    json j{{"schema_version", 1},
           {"p", sel.p},
           {"score_kind", score_kind_name(sel.score_kind)},
           {"layers", sel.per_layer},
           {"achieved_mass", sel.achieved_mass}};
    std::ofstream out(path);
    if (!out) throw InputError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

ExpertSelection load_selection(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open selection file " + path);
    try {
        json j = json::parse(in);
        ExpertSelection sel;
        sel.p = j.at("p").get<double>();
        sel.score_kind = score_kind_from_name(j.at("score_kind").get<std::string>());
        sel.per_layer = j.at("layers").get<std::vector<std::vector<int>>>();
        sel.achieved_mass = j.at("achieved_mass").get<std::vector<double>>();
        return sel;
    } catch (const json::exception& e) {
        throw InputError("malformed selection file " + path + ": " + e.what());
    }
}

void save_train_mask(const TrainMask& mask, const std::string& path) {
    json j{{"schema_version", 1},
           {"routed_policy", routed_policy_name(mask.routed_policy)},
           {"shared_experts_trainable", mask.shared_experts_trainable},
           {"non_expert_trainable", mask.non_expert_trainable},
           {"trainable_groups", mask.trainable_groups},
           {"trainable_param_count", mask.trainable_param_count}};
    std::ofstream out(path);
    if (!out) throw InputError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

TrainMask load_train_mask(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open mask file " + path);
    try {
        json j = json::parse(in);
        TrainMask mask;
        mask.routed_policy = routed_policy_from_name(j.at("routed_policy").get<std::string>());
        mask.shared_experts_trainable = j.at("shared_experts_trainable").get<bool>();
        mask.non_expert_trainable = j.at("non_expert_trainable").get<bool>();
        mask.trainable_groups = j.at("trainable_groups").get<std::vector<std::string>>();
        mask.trainable_param_count = j.at("trainable_param_count").get<int64_t>();
        return mask;
    } catch (const json::exception& e) {
        throw InputError("malformed mask file " + path + ": " + e.what());
    }
}

} // namespace esft
