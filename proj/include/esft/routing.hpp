// SPDX-License-Identifier: Apache-2.0
//
// Routing logs: per-layer, per-token records of which experts a token
// selected and with what gate values. Logs are append-only during forward
// passes and immutable afterwards; all probes consume them read-only.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace esft {

struct TokenRouting {
    std::vector<int> experts; // selected routed expert ids, ascending
    std::vector<double> gates; // gate value per selected expert, same order
};

struct RoutingLog {
    std::string task_label;
    int layer_count = 0;
    int n_experts = 0;
    int top_k = 0; // routed selections per token (grouped mode: active count)
    bool retain_affinities = false;

    // Tokens are indexed globally across samples; sample_sizes records how
    // many consecutive tokens belong to each logged sequence, which the
    // relevance scores need for their per-sample averaging.
    std::vector<int> sample_sizes;
    std::vector<std::vector<TokenRouting>> per_layer; // [layer][token]
    // Full affinity rows, only populated when retain_affinities is set.
    std::vector<std::vector<std::vector<double>>> affinity_rows; // [layer][token]

    int64_t token_count() const {
        return per_layer.empty() ? 0 : static_cast<int64_t>(per_layer[0].size());
    }
    int64_t sample_count() const { return static_cast<int64_t>(sample_sizes.size()); }

    // Structural checks: per-token record counts, entry counts equal top_k,
    // nonnegative gates, sample sizes summing to token_count. Throws
    // ContractError on violation.
    void validate() const;
};

// Line-delimited records file. First line is a header object; every
// following line is one token record covering all layers.
void save_routing_log(const RoutingLog& log, const std::string& path);
RoutingLog load_routing_log(const std::string& path);

} // namespace esft
