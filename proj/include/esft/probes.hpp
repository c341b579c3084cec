// SPDX-License-Identifier: Apache-2.0
//
// Specialization diagnostics over routing logs: gate-mass distributions,
// shared top-k overlap between logs, co-occurrence similarity, greedy expert
// grouping, and the overlap-vs-sample-size curve. All probes are pure
// functions of immutable logs.
#pragma once

#include <string>
#include <vector>

#include "esft/corpus.hpp"
#include "esft/model.hpp"
#include "esft/routing.hpp"

namespace esft {

// Runs the model over every corpus document with the routing sink attached.
RoutingLog collect_routing(const MoEModel& model, const Corpus& corpus,
                           bool retain_affinities = false);

struct DistributionEntry {
    int expert_id;
    double share;
};

// Per-expert share of total gate mass in one layer, sorted descending
// (ties toward the lower expert id). Shares sum to 1.
std::vector<DistributionEntry> normalized_gate_distribution(const RoutingLog& log, int layer);

// Smallest leading fraction of experts whose cumulative share reaches the
// given mass; a concentration summary of the distribution above.
double top_share_fraction(const std::vector<DistributionEntry>& dist, double mass);
// Cumulative share captured by the top `count` experts.
double top_count_share(const std::vector<DistributionEntry>& dist, int count);

struct OverlapResult {
    std::vector<int> per_layer;
    double mean = 0.0;
};

// Per layer: rank experts by total gate mass in each log (ties toward the
// lower id), intersect the two top-k sets, report the size.
OverlapResult shared_topk_overlap(const RoutingLog& a, const RoutingLog& b, int top_k);

struct SimilarityMatrix {
    int n = 0;
    std::vector<double> values; // row-major n x n
    double at(int i, int j) const { return values[static_cast<size_t>(i) * n + j]; }
};

// Co-occurrence counts over every token record (an expert also co-occurs
// with itself, so experts with identical selection patterns get cosine 1),
// then cosine similarity between count rows. Never-selected experts have
// zero rows and similarity 0 to everyone. layer = -1 pools all layers.
SimilarityMatrix cooccurrence_similarity(const RoutingLog& log, int layer = -1);

// Repeatedly picks the unselected group of `group_size` experts with the
// highest mean pairwise similarity; ties resolve to the lexicographically
// smallest index tuple.
std::vector<std::vector<int>> greedy_group(const SimilarityMatrix& sim, int group_size);

struct OverlapCurvePoint {
    int size; // tokens per subsample
    double mean_overlap;
};

// For each size, draws two disjoint token subsamples from the corpus,
// collects routing for both, and reports the mean shared top-k overlap.
std::vector<OverlapCurvePoint> overlap_vs_samplesize(const MoEModel& model, const Corpus& corpus,
                                                     const std::vector<int>& sizes, int top_k,
                                                     int64_t seed);

} // namespace esft
