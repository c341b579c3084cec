// SPDX-License-Identifier: Apache-2.0
//
// Expert relevance scores, cumulative-threshold expert selection, and
// train-mask resolution. Selection consumes routing logs only; masks are
// resolved against a concrete model's parameter groups.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "esft/model.hpp"
#include "esft/routing.hpp"

namespace esft {

enum class ScoreKind { average_gate, token_selection_ratio };
std::string score_kind_name(ScoreKind k);
ScoreKind score_kind_from_name(const std::string& s);

struct ExpertRelevance {
    ScoreKind score_kind = ScoreKind::average_gate;
    std::vector<std::vector<double>> scores; // [layer][expert], each in [0,1]
    // Subset descriptor carried along for reporting.
    int64_t sample_count = 0;
    std::vector<int> sample_sizes;
};

// Mean over samples of (mean over that sample's tokens of the gate value),
// so samples weigh equally regardless of length. Layer totals are <= 1 and
// usually below it.
ExpertRelevance average_gate_score(const RoutingLog& log);

// Fraction of selection slots each expert takes: selection indicator divided
// by k, averaged the same two-level way. Layer sums are exactly 1.
ExpertRelevance token_selection_ratio(const RoutingLog& log, int k);

struct ExpertSelection {
    double p = 0.0;
    ScoreKind score_kind = ScoreKind::average_gate;
    std::vector<std::vector<int>> per_layer; // selected ids, ascending
    std::vector<double> achieved_mass; // cumulative score actually captured
};

// Per layer: shortest descending-score prefix whose cumulative score reaches
// p, ties toward the lower expert id. A layer whose total score is below p
// selects every expert with positive score instead.
ExpertSelection select_experts(const ExpertRelevance& rel, double p);

enum class RoutedPolicy { all, selected, none };
std::string routed_policy_name(RoutedPolicy p);
RoutedPolicy routed_policy_from_name(const std::string& s);

struct TrainMask {
    RoutedPolicy routed_policy = RoutedPolicy::none;
    bool shared_experts_trainable = false;
    bool non_expert_trainable = false;
    std::vector<std::string> trainable_groups; // resolved names, stable order
    int64_t trainable_param_count = 0;

    bool contains(const std::string& group_name) const;
};

// Resolves the three policy flags plus an optional selection into concrete
// trainable parameter groups. Non-expert covers gates, attention, embeddings,
// head, and norms. LoRA adapters, when attached, are always trainable.
TrainMask build_train_mask(const MoEModel& model, const std::optional<ExpertSelection>& sel,
                           RoutedPolicy routed_policy, bool shared_flag, bool non_expert_flag);

struct ExpertsTrainedReport {
    std::vector<int> per_layer_counts;
    double mean_count = 0.0;
};

ExpertsTrainedReport experts_trained_report(const ExpertSelection& sel);

// JSON persistence. Selections carry p/score kind/per-layer ids; masks carry
// the policy flags, resolved group names, and the parameter count.
void save_selection(const ExpertSelection& sel, const std::string& path);
ExpertSelection load_selection(const std::string& path);
void save_train_mask(const TrainMask& mask, const std::string& path);
TrainMask load_train_mask(const std::string& path);

} // namespace esft
