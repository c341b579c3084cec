// SPDX-License-Identifier: Apache-2.0

#include "esft/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "esft/tensor.hpp"

namespace esft {

RoutingLog collect_routing(const MoEModel& model, const Corpus& corpus, bool retain_affinities) {
    corpus.validate();
    const MoEModelConfig& cfg = model.config();
    if (corpus.vocab_size > cfg.vocab_size) {
        throw InputError("corpus vocab " + std::to_string(corpus.vocab_size) +
                         " exceeds model vocab " + std::to_string(cfg.vocab_size));
    }
    RoutingLog log;
    log.task_label = corpus.task_label;
    log.retain_affinities = retain_affinities;
    for (size_t d = 0; d < corpus.documents.size(); ++d) {
        const auto& doc = corpus.documents[d];
        if (static_cast<int>(doc.size()) > cfg.max_seq_len) {
            throw InputError("document " + std::to_string(d) + " has " +
                             std::to_string(doc.size()) + " tokens, model max_seq_len is " +
                             std::to_string(cfg.max_seq_len) + "; chunk before probing");
        }
        Tape tape;
        model.model_forward(tape, doc, &log);
    }
    log.validate();
    return log;
}

namespace {

// Total gate mass per expert in one layer.
std::vector<double> layer_gate_mass(const RoutingLog& log, int layer) {
    std::vector<double> mass(static_cast<size_t>(log.n_experts), 0.0);
    for (const TokenRouting& tr : log.per_layer[static_cast<size_t>(layer)]) {
        for (size_t i = 0; i < tr.experts.size(); ++i) {
            mass[static_cast<size_t>(tr.experts[i])] += tr.gates[i];
        }
    }
    return mass;
}

void check_layer_index(const RoutingLog& log, int layer) {
    if (layer < 0 || layer >= log.layer_count) {
        throw InputError("layer " + std::to_string(layer) + " out of range, log has " +
                         std::to_string(log.layer_count) + " layers");
    }
}

// Expert ids ordered by descending mass, ties toward the lower id.
std::vector<int> mass_ranking(const std::vector<double>& mass) {
    std::vector<int> order(mass.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return mass[static_cast<size_t>(a)] > mass[static_cast<size_t>(b)];
    });
    return order;
}

} // namespace

std::vector<DistributionEntry> normalized_gate_distribution(const RoutingLog& log, int layer) {
    log.validate();
    check_layer_index(log, layer);
    const std::vector<double> mass = layer_gate_mass(log, layer);
    const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
    if (total <= 0.0) throw InputError("layer " + std::to_string(layer) + " has zero gate mass");
    std::vector<DistributionEntry> out;
    out.reserve(mass.size());
    for (const int e : mass_ranking(mass)) {
        out.push_back({e, mass[static_cast<size_t>(e)] / total});
    }
    return out;
}

double top_share_fraction(const std::vector<DistributionEntry>& dist, double mass) {
    if (dist.empty()) throw InputError("empty gate distribution");
    if (!(mass > 0.0) || mass > 1.0) {
        throw ConfigError("cumulative mass must be in (0, 1], got " + std::to_string(mass));
    }
    double cum = 0.0;
    for (size_t i = 0; i < dist.size(); ++i) {
        cum += dist[i].share;
        if (cum >= mass - 1e-12) {
            return static_cast<double>(i + 1) / static_cast<double>(dist.size());
        }
    }
    return 1.0;
}

double top_count_share(const std::vector<DistributionEntry>& dist, int count) {
    if (count < 0 || count > static_cast<int>(dist.size())) {
        throw ConfigError("top count " + std::to_string(count) + " out of range for " +
                          std::to_string(dist.size()) + " experts");
    }
    double cum = 0.0;
    for (int i = 0; i < count; ++i) cum += dist[static_cast<size_t>(i)].share;
    return cum;
}

OverlapResult shared_topk_overlap(const RoutingLog& a, const RoutingLog& b, int top_k) {
    a.validate();
    b.validate();
    if (a.layer_count != b.layer_count || a.n_experts != b.n_experts) {
        throw InputError("routing logs disagree on shape: " + std::to_string(a.layer_count) +
                         "x" + std::to_string(a.n_experts) + " vs " +
                         std::to_string(b.layer_count) + "x" + std::to_string(b.n_experts));
    }
    if (top_k < 1 || top_k > a.n_experts) {
        throw ConfigError("overlap top_k " + std::to_string(top_k) + " out of range [1, " +
                          std::to_string(a.n_experts) + "]");
    }
    OverlapResult res;
    for (int l = 0; l < a.layer_count; ++l) {
        const std::vector<int> ra = mass_ranking(layer_gate_mass(a, l));
        const std::vector<int> rb = mass_ranking(layer_gate_mass(b, l));
        std::vector<int> ta(ra.begin(), ra.begin() + top_k);
        std::vector<int> tb(rb.begin(), rb.begin() + top_k);
        std::sort(ta.begin(), ta.end());
        std::sort(tb.begin(), tb.end());
        std::vector<int> both;
        std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(),
                              std::back_inserter(both));
        res.per_layer.push_back(static_cast<int>(both.size()));
        res.mean += static_cast<double>(both.size());
    }
    res.mean /= static_cast<double>(a.layer_count);
    return res;
}

SimilarityMatrix cooccurrence_similarity(const RoutingLog& log, int layer) {
    log.validate();
    if (layer != -1) check_layer_index(log, layer);
    const int n = log.n_experts;
    std::vector<double> counts(static_cast<size_t>(n) * n, 0.0);
    const int lo = layer == -1 ? 0 : layer;
    const int hi = layer == -1 ? log.layer_count : layer + 1;
    for (int l = lo; l < hi; ++l) {
        for (const TokenRouting& tr : log.per_layer[static_cast<size_t>(l)]) {
            // Self-pairs included: a token counts toward (e, e) as well, so
            // experts with identical selection patterns get similarity 1.
            for (const int i : tr.experts) {
                for (const int j : tr.experts) {
                    counts[static_cast<size_t>(i) * n + j] += 1.0;
                }
            }
        }
    }
    SimilarityMatrix sim;
    sim.n = n;
    sim.values.assign(static_cast<size_t>(n) * n, 0.0);
    std::vector<double> norms(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            const double v = counts[static_cast<size_t>(i) * n + j];
            s += v * v;
        }
        norms[static_cast<size_t>(i)] = std::sqrt(s);
    }
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double ni = norms[static_cast<size_t>(i)];
            const double nj = norms[static_cast<size_t>(j)];
            double v = 0.0;
            if (i == j) {
                v = ni > 0.0 ? 1.0 : 0.0;
            } else if (ni > 0.0 && nj > 0.0) {
                double dot = 0.0;
                for (int k = 0; k < n; ++k) {
                    dot += counts[static_cast<size_t>(i) * n + k] *
                           counts[static_cast<size_t>(j) * n + k];
                }
                v = std::clamp(dot / (ni * nj), 0.0, 1.0);
            }
            sim.values[static_cast<size_t>(i) * n + j] = v;
        }
    }
    return sim;
}

std::vector<std::vector<int>> greedy_group(const SimilarityMatrix& sim, int group_size) {
    const int n = sim.n;
    if (group_size < 2) {
        throw ConfigError("group size must be at least 2, got " + std::to_string(group_size));
    }
    if (n <= 0 || n % group_size != 0) {
        throw ConfigError("group size " + std::to_string(group_size) + " does not divide " +
                          std::to_string(n) + " experts");
    }
    std::vector<int> remaining(static_cast<size_t>(n));
    std::iota(remaining.begin(), remaining.end(), 0);
    std::vector<std::vector<int>> groups;
    while (!remaining.empty()) {
        const int m = static_cast<int>(remaining.size());
        // Lexicographic enumeration of index combinations into `remaining`;
        // strict improvement keeps the first (smallest) tuple on ties.
        std::vector<int> idx(static_cast<size_t>(group_size));
        std::iota(idx.begin(), idx.end(), 0);
        std::vector<int> best;
        double best_score = -1.0;
        while (true) {
            double s = 0.0;
            for (int a = 0; a < group_size; ++a) {
                for (int b = a + 1; b < group_size; ++b) {
                    s += sim.at(remaining[static_cast<size_t>(idx[static_cast<size_t>(a)])],
                                remaining[static_cast<size_t>(idx[static_cast<size_t>(b)])]);
                }
            }
            s /= static_cast<double>(group_size * (group_size - 1) / 2);
            if (s > best_score) {
                best_score = s;
                best.clear();
                for (const int i : idx) best.push_back(remaining[static_cast<size_t>(i)]);
            }
            int pos = group_size - 1;
            while (pos >= 0 && idx[static_cast<size_t>(pos)] == m - group_size + pos) --pos;
            if (pos < 0) break;
            ++idx[static_cast<size_t>(pos)];
            for (int q = pos + 1; q < group_size; ++q) {
                idx[static_cast<size_t>(q)] = idx[static_cast<size_t>(q - 1)] + 1;
            }
        }
        groups.push_back(best);
        std::vector<int> next;
        for (const int e : remaining) {
            if (std::find(best.begin(), best.end(), e) == best.end()) next.push_back(e);
        }
        remaining = std::move(next);
    }
    return groups;
}

std::vector<OverlapCurvePoint> overlap_vs_samplesize(const MoEModel& model, const Corpus& corpus,
                                                     const std::vector<int>& sizes, int top_k,
                                                     int64_t seed) {
    corpus.validate();
    if (sizes.empty()) throw ConfigError("overlap curve needs at least one subsample size");
    for (const int s : sizes) {
        if (s < 1) throw ConfigError("subsample sizes must be positive, got " + std::to_string(s));
    }
    const int max_size = *std::max_element(sizes.begin(), sizes.end());
    if (corpus.token_count() < 2 * static_cast<int64_t>(max_size)) {
        throw InputError("overlap curve at size " + std::to_string(max_size) + " needs " +
                         std::to_string(2 * static_cast<int64_t>(max_size)) +
                         " tokens, corpus has " + std::to_string(corpus.token_count()));
    }
    Rng rng(static_cast<uint64_t>(seed));
    std::vector<int> order(corpus.documents.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<int> flat;
    flat.reserve(static_cast<size_t>(corpus.token_count()));
    for (const int d : order) {
        const auto& doc = corpus.documents[static_cast<size_t>(d)];
        flat.insert(flat.end(), doc.begin(), doc.end());
    }
    const int chunk = model.config().max_seq_len;
    const auto make_corpus = [&](int64_t begin, int64_t count, const char* tag) {
        Corpus sub;
        sub.task_label = corpus.task_label + tag;
        sub.vocab_size = corpus.vocab_size;
        for (int64_t off = 0; off < count; off += chunk) {
            const int64_t len = std::min<int64_t>(chunk, count - off);
            sub.documents.emplace_back(flat.begin() + begin + off, flat.begin() + begin + off + len);
        }
        return sub;
    };
    std::vector<OverlapCurvePoint> out;
    for (const int s : sizes) {
        const RoutingLog la = collect_routing(model, make_corpus(0, s, "#a"));
        const RoutingLog lb = collect_routing(model, make_corpus(s, s, "#b"));
        out.push_back({s, shared_topk_overlap(la, lb, top_k).mean});
    }
    return out;
}

} // namespace esft
