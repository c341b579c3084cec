// SPDX-License-Identifier: Apache-2.0
#include "esft/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace esft {
namespace {

struct KindName {
    GroupKind kind;
    const char* name;
};

constexpr KindName kKindNames[] = {
    {GroupKind::embedding, "embedding"},
    {GroupKind::pos_embedding, "pos_embedding"},
    {GroupKind::head, "head"},
    {GroupKind::final_norm, "final_norm"},
    {GroupKind::attn_norm, "attn_norm"},
    {GroupKind::attn_wq, "attn_wq"},
    {GroupKind::attn_wk, "attn_wk"},
    {GroupKind::attn_wv, "attn_wv"},
    {GroupKind::attn_wo, "attn_wo"},
    {GroupKind::ffn_norm, "ffn_norm"},
    {GroupKind::gate, "gate"},
    {GroupKind::expert_up, "expert_up"},
    {GroupKind::expert_down, "expert_down"},
    {GroupKind::shared_up, "shared_up"},
    {GroupKind::shared_down, "shared_down"},
    {GroupKind::lora_a, "lora_a"},
    {GroupKind::lora_b, "lora_b"},
};

std::vector<int> iota_vec(int n) {
    std::vector<int> v(static_cast<size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

} // namespace

std::string group_kind_name(GroupKind k) {
    for (const auto& kn : kKindNames) {
        if (kn.kind == k) return kn.name;
    }
    throw ContractError("unknown group kind");
}

GroupKind group_kind_from_name(const std::string& s) {
    for (const auto& kn : kKindNames) {
        if (s == kn.name) return kn.kind;
    }
    throw InputError("unknown parameter group kind '" + s + "'");
}

bool is_routed_expert_kind(GroupKind k) {
    return k == GroupKind::expert_up || k == GroupKind::expert_down;
}

bool is_shared_expert_kind(GroupKind k) {
    return k == GroupKind::shared_up || k == GroupKind::shared_down;
}

std::string param_name(const ParamId& id) {
    std::string s;
    if (id.layer >= 0) s += "L" + std::to_string(id.layer) + ".";
    s += group_kind_name(id.kind);
    if (id.kind == GroupKind::lora_a || id.kind == GroupKind::lora_b) {
        s += "." + group_kind_name(id.target_kind);
    }
    if (id.expert >= 0) s += ".E" + std::to_string(id.expert);
    return s;
}

void MoEModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) {
            throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
        }
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_routed_experts, "n_routed_experts");
    positive(top_k, "top_k");
    positive(expert_hidden_dim, "expert_hidden_dim");
    positive(segmentation_factor, "segmentation_factor");
    positive(max_seq_len, "max_seq_len");
    if (n_heads != 1) {
        throw ConfigError("n_heads must be 1 (single-head attention only), got " +
                          std::to_string(n_heads));
    }
    if (n_shared_experts < 0) {
        throw ConfigError("n_shared_experts must be nonnegative, got " +
                          std::to_string(n_shared_experts));
    }
    if (top_k > n_routed_experts) {
        throw ConfigError("top_k " + std::to_string(top_k) + " exceeds n_routed_experts " +
                          std::to_string(n_routed_experts));
    }
    if (n_shared_experts + top_k < 1) {
        throw ConfigError("at least one expert must be active per token");
    }
}

int64_t MoEModelConfig::param_count() const {
    const int64_t d = d_model, v = vocab_size, h = expert_hidden_dim;
    const int64_t per_expert = 2 * d * h;
    const int64_t per_layer = 2 * d // attn_norm + ffn_norm gains
                              + 4 * d * d // wq, wk, wv, wo
                              + static_cast<int64_t>(n_routed_experts) * d // gate centroids
                              + n_routed_experts * per_expert + n_shared_experts * per_expert;
    return v * d // embedding
           + static_cast<int64_t>(max_seq_len) * d // positions
           + d * v // head
           + d // final_norm gain
           + static_cast<int64_t>(n_layers) * per_layer;
}

Tensor MoEModel::init_tensor(std::vector<int> shape, double stddev, Rng& rng) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& x : data) x = rng.normal() * stddev;
    return Tensor(std::move(shape), std::move(data), true);
}

void MoEModel::push_group(int layer, GroupKind kind, int expert, Tensor t) {
    ParamId id;
    id.layer = layer;
    id.kind = kind;
    id.expert = expert;
    base_.push_back(ParamGroup{id, std::move(t), param_name(id)});
}

MoEModel::MoEModel(MoEModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(static_cast<uint64_t>(cfg_.seed));
    const int d = cfg_.d_model, v = cfg_.vocab_size, h = cfg_.expert_hidden_dim;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sh = 1.0 / std::sqrt(static_cast<double>(h));

    push_group(-1, GroupKind::embedding, -1, init_tensor({v, d}, 0.1, rng));
    push_group(-1, GroupKind::pos_embedding, -1, init_tensor({cfg_.max_seq_len, d}, 0.1, rng));
    push_group(-1, GroupKind::head, -1, init_tensor({d, v}, sd, rng));
    push_group(-1, GroupKind::final_norm, -1, Tensor::full({d}, 1.0, true));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        push_group(l, GroupKind::attn_norm, -1, Tensor::full({d}, 1.0, true));
        push_group(l, GroupKind::attn_wq, -1, init_tensor({d, d}, sd, rng));
        push_group(l, GroupKind::attn_wk, -1, init_tensor({d, d}, sd, rng));
        push_group(l, GroupKind::attn_wv, -1, init_tensor({d, d}, sd, rng));
        push_group(l, GroupKind::attn_wo, -1, init_tensor({d, d}, sd, rng));
        push_group(l, GroupKind::ffn_norm, -1, Tensor::full({d}, 1.0, true));
        push_group(l, GroupKind::gate, -1, init_tensor({cfg_.n_routed_experts, d}, sd, rng));
        for (int e = 0; e < cfg_.n_routed_experts; ++e) {
            push_group(l, GroupKind::expert_up, e, init_tensor({d, h}, sd, rng));
            push_group(l, GroupKind::expert_down, e, init_tensor({h, d}, sh, rng));
        }
        for (int e = 0; e < cfg_.n_shared_experts; ++e) {
            push_group(l, GroupKind::shared_up, e, init_tensor({d, h}, sd, rng));
            push_group(l, GroupKind::shared_down, e, init_tensor({h, d}, sh, rng));
        }
    }

    int64_t total = 0;
    for (const ParamGroup& g : base_) total += g.tensor.numel();
    if (total != cfg_.param_count()) {
        throw ContractError("allocated parameter count " + std::to_string(total) +
                            " does not match the closed form " +
                            std::to_string(cfg_.param_count()));
    }
}

std::vector<ParamGroup> MoEModel::param_groups() const {
    std::vector<ParamGroup> all = base_;
    if (lora_) {
        for (const LoraAdapter& ad : lora_->adapters) {
            ParamId ida = ad.id;
            ida.kind = GroupKind::lora_a;
            ParamId idb = ad.id;
            idb.kind = GroupKind::lora_b;
            all.push_back(ParamGroup{ida, ad.a, param_name(ida)});
            all.push_back(ParamGroup{idb, ad.b, param_name(idb)});
        }
    }
    return all;
}

const Tensor& MoEModel::param(int layer, GroupKind kind, int expert) const {
    for (const ParamGroup& g : base_) {
        if (g.id.layer == layer && g.id.kind == kind && g.id.expert == expert) return g.tensor;
    }
    throw ContractError("no parameter group layer=" + std::to_string(layer) + " kind=" +
                        group_kind_name(kind) + " expert=" + std::to_string(expert));
}

int64_t MoEModel::total_param_count() const {
    int64_t total = cfg_.param_count();
    if (lora_) {
        for (const LoraAdapter& ad : lora_->adapters) total += ad.a.numel() + ad.b.numel();
    }
    return total;
}

MoEModel MoEModel::clone() const {
    MoEModel copy(cfg_);
    for (size_t i = 0; i < base_.size(); ++i) {
        copy.base_[i].tensor.data_mut() = base_[i].tensor.data();
    }
    if (lora_) {
        Rng rng(0);
        copy.attach_lora(lora_->rank, lora_->scaling, rng);
        for (size_t i = 0; i < lora_->adapters.size(); ++i) {
            copy.lora_->adapters[i].a.data_mut() = lora_->adapters[i].a.data();
            copy.lora_->adapters[i].b.data_mut() = lora_->adapters[i].b.data();
        }
    }
    return copy;
}

void MoEModel::attach_lora(int rank, double scaling, Rng& rng) {
    if (lora_) throw ConfigError("adapters are already attached to this model");
    if (rank < 1) throw ConfigError("lora rank must be positive, got " + std::to_string(rank));
    LoraState st;
    st.rank = rank;
    st.scaling = scaling;
    auto add_adapter = [&](int layer, GroupKind target, int expert) {
        const Tensor& w = param(layer, target, expert);
        const int din = w.rows(), dout = w.cols();
        if (rank > std::min(din, dout)) {
            throw ConfigError("lora rank " + std::to_string(rank) + " exceeds min dimension of " +
                              param_name({layer, target, expert, target}) + " " +
                              shape_str(w.shape()));
        }
        LoraAdapter ad;
        ad.id.layer = layer;
        ad.id.kind = GroupKind::lora_a;
        ad.id.expert = expert;
        ad.id.target_kind = target;
        std::vector<double> adata(static_cast<size_t>(din) * rank);
        for (double& x : adata) x = rng.normal() * 0.02;
        ad.a = Tensor({din, rank}, std::move(adata), true);
        ad.b = Tensor::zeros({rank, dout}, true);
        st.adapters.push_back(std::move(ad));
    };
    for (int l = 0; l < cfg_.n_layers; ++l) {
        add_adapter(l, GroupKind::attn_wq, -1);
        add_adapter(l, GroupKind::attn_wk, -1);
        add_adapter(l, GroupKind::attn_wv, -1);
        add_adapter(l, GroupKind::attn_wo, -1);
        for (int e = 0; e < cfg_.n_routed_experts; ++e) {
            add_adapter(l, GroupKind::expert_up, e);
            add_adapter(l, GroupKind::expert_down, e);
        }
        for (int e = 0; e < cfg_.n_shared_experts; ++e) {
            add_adapter(l, GroupKind::shared_up, e);
            add_adapter(l, GroupKind::shared_down, e);
        }
    }
    lora_ = std::move(st);
}

const LoraAdapter* MoEModel::find_adapter(int layer, GroupKind kind, int expert) const {
    if (!lora_) return nullptr;
    for (const LoraAdapter& ad : lora_->adapters) {
        if (ad.id.layer == layer && ad.id.target_kind == kind && ad.id.expert == expert) return &ad;
    }
    return nullptr;
}

Tensor MoEModel::apply_weight(Tape& tape, const Tensor& x, int layer, GroupKind kind,
                              int expert) const {
    Tensor y = ops::matmul(tape, x, param(layer, kind, expert));
    if (const LoraAdapter* ad = find_adapter(layer, kind, expert)) {
        Tensor low = ops::matmul(tape, ops::matmul(tape, x, ad->a), ad->b);
        y = ops::add(tape, y, ops::scale(tape, low, lora_->scaling));
    }
    return y;
}

Tensor MoEModel::expert_ffn(Tape& tape, const Tensor& x, int layer, bool shared,
                            int expert) const {
    const GroupKind up = shared ? GroupKind::shared_up : GroupKind::expert_up;
    const GroupKind down = shared ? GroupKind::shared_down : GroupKind::expert_down;
    Tensor hdn = ops::silu(tape, apply_weight(tape, x, layer, up, expert));
    return apply_weight(tape, hdn, layer, down, expert);
}

Tensor gate_affinity(Tape& tape, const Tensor& hidden, const Tensor& centroids) {
    return ops::softmax_rows(tape, ops::matmul(tape, hidden, ops::transpose(tape, centroids)));
}

namespace {

// gates = s masked to the chosen entries; gradient flows only through them.
GateOutput masked_gate(Tape& tape, const Tensor& s, std::vector<std::vector<int>> selected) {
    const int t_count = s.rows(), n = s.cols();
    Tensor mask = Tensor::zeros({t_count, n});
    for (int t = 0; t < t_count; ++t) {
        for (int e : selected[static_cast<size_t>(t)]) {
            mask.data_mut()[static_cast<size_t>(t) * n + e] = 1.0;
        }
    }
    GateOutput out;
    out.affinities = s;
    out.gates = ops::mul(tape, s, mask);
    out.selected = std::move(selected);
    return out;
}

} // namespace

GateOutput topk_gate(Tape& tape, const Tensor& s, int k) {
    const int n = s.cols();
    if (k < 1 || k > n) {
        throw ConfigError("top_k " + std::to_string(k) + " out of range for " + std::to_string(n) +
                          " experts");
    }
    const int t_count = s.rows();
    std::vector<std::vector<int>> selected(static_cast<size_t>(t_count));
    std::vector<int> order(static_cast<size_t>(n));
    for (int t = 0; t < t_count; ++t) {
        const double* row = s.data().data() + static_cast<long>(t) * n;
        std::iota(order.begin(), order.end(), 0);
        // stable sort on descending value keeps lower indices first on ties
        std::stable_sort(order.begin(), order.end(),
                         [row](int a, int b) { return row[a] > row[b]; });
        std::vector<int> sel(order.begin(), order.begin() + k);
        std::sort(sel.begin(), sel.end());
        selected[static_cast<size_t>(t)] = std::move(sel);
    }
    return masked_gate(tape, s, std::move(selected));
}

GateOutput grouped_topk_gate(Tape& tape, const Tensor& s,
                             const std::vector<std::vector<int>>& groups,
                             Rational active_fraction) {
    const int n = s.cols();
    if (groups.empty()) throw ConfigError("grouped gating requires at least one group");
    const size_t gsize = groups[0].size();
    std::vector<int> seen(static_cast<size_t>(n), 0);
    for (const auto& g : groups) {
        if (g.size() != gsize || g.empty()) {
            throw ConfigError("expert groups must be non-empty and equal-size");
        }
        for (int e : g) {
            if (e < 0 || e >= n || seen[static_cast<size_t>(e)]++) {
                throw ConfigError("expert groups must partition 0.." + std::to_string(n - 1));
            }
        }
    }
    if (static_cast<size_t>(n) != gsize * groups.size()) {
        throw ConfigError("expert groups must cover every expert exactly once");
    }
    if (active_fraction.num <= 0 || active_fraction.den <= 0) {
        throw ConfigError("active_fraction must be a positive rational");
    }
    const long scaled = static_cast<long>(n) * active_fraction.num;
    if (scaled % active_fraction.den != 0) {
        throw ConfigError("active_fraction * n_experts must be an integer");
    }
    const long active = scaled / active_fraction.den;
    if (active < 1 || active > n) {
        throw ConfigError("active expert count " + std::to_string(active) + " out of range");
    }
    if (active % static_cast<long>(gsize) != 0) {
        throw ConfigError("active expert count " + std::to_string(active) +
                          " is not divisible by group size " + std::to_string(gsize));
    }
    const size_t n_select = static_cast<size_t>(active) / gsize;

    std::vector<int> min_member(groups.size());
    for (size_t gi = 0; gi < groups.size(); ++gi) {
        min_member[gi] = *std::min_element(groups[gi].begin(), groups[gi].end());
    }

    const int t_count = s.rows();
    std::vector<std::vector<int>> selected(static_cast<size_t>(t_count));
    std::vector<size_t> order(groups.size());
    for (int t = 0; t < t_count; ++t) {
        const double* row = s.data().data() + static_cast<long>(t) * n;
        std::vector<double> score(groups.size(), 0.0);
        for (size_t gi = 0; gi < groups.size(); ++gi) {
            for (int e : groups[gi]) score[gi] += row[e];
            score[gi] /= static_cast<double>(gsize);
        }
        std::iota(order.begin(), order.end(), size_t{0});
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            if (score[a] != score[b]) return score[a] > score[b];
            return min_member[a] < min_member[b];
        });
        std::vector<int> sel;
        sel.reserve(static_cast<size_t>(active));
        for (size_t i = 0; i < n_select; ++i) {
            for (int e : groups[order[i]]) sel.push_back(e);
        }
        std::sort(sel.begin(), sel.end());
        selected[static_cast<size_t>(t)] = std::move(sel);
    }
    return masked_gate(tape, s, std::move(selected));
}

Tensor MoEModel::moe_layer_forward(Tape& tape, const Tensor& hidden, int layer,
                                   RoutingLog* routing_sink, const Tensor* residual_override,
                                   const FrozenRouting* frozen,
                                   const GroupedGatingSpec* grouped) const {
    if (layer < 0 || layer >= cfg_.n_layers) {
        throw ContractError("layer index " + std::to_string(layer) + " out of range");
    }
    const int t_count = hidden.rows();
    const int n = cfg_.n_routed_experts;

    Tensor s = gate_affinity(tape, hidden, param(layer, GroupKind::gate));
    GateOutput go;
    if (frozen != nullptr) {
        if (static_cast<int>(frozen->selected.size()) <= layer ||
            static_cast<int>(frozen->selected[static_cast<size_t>(layer)].size()) != t_count) {
            throw ContractError("frozen routing does not cover layer " + std::to_string(layer));
        }
        go = masked_gate(tape, s, frozen->selected[static_cast<size_t>(layer)]);
    } else if (grouped != nullptr) {
        go = grouped_topk_gate(tape, s, grouped->groups, grouped->active_fraction);
    } else {
        go = topk_gate(tape, s, cfg_.top_k);
    }

    Tensor acc = residual_override != nullptr ? *residual_override : hidden;
    if (acc.shape() != hidden.shape()) {
        throw ShapeError("residual shape " + shape_str(acc.shape()) + " does not match hidden " +
                         shape_str(hidden.shape()));
    }
    for (int e = 0; e < cfg_.n_shared_experts; ++e) {
        acc = ops::add(tape, acc, expert_ffn(tape, hidden, layer, true, e));
    }
    for (int e = 0; e < n; ++e) {
        std::vector<int> rows;
        for (int t = 0; t < t_count; ++t) {
            const auto& sel = go.selected[static_cast<size_t>(t)];
            if (std::binary_search(sel.begin(), sel.end(), e)) rows.push_back(t);
        }
        if (rows.empty()) continue;
        Tensor in = ops::gather_rows(tape, hidden, rows);
        Tensor out = expert_ffn(tape, in, layer, false, e);
        std::vector<int> cols(rows.size(), e);
        Tensor gvals = ops::gather_scalars(tape, go.gates, rows, cols);
        out = ops::scale_rows(tape, out, gvals);
        acc = ops::add(tape, acc, ops::scatter_rows(tape, out, rows, t_count));
    }

    if (routing_sink != nullptr) {
        auto& layer_log = routing_sink->per_layer[static_cast<size_t>(layer)];
        for (int t = 0; t < t_count; ++t) {
            TokenRouting rec;
            rec.experts = go.selected[static_cast<size_t>(t)];
            rec.gates.reserve(rec.experts.size());
            for (int e : rec.experts) {
                rec.gates.push_back(go.gates.data()[static_cast<size_t>(t) * n + e]);
            }
            layer_log.push_back(std::move(rec));
        }
        if (routing_sink->retain_affinities) {
            auto& rows = routing_sink->affinity_rows[static_cast<size_t>(layer)];
            for (int t = 0; t < t_count; ++t) {
                const double* srow = s.data().data() + static_cast<long>(t) * n;
                rows.emplace_back(srow, srow + n);
            }
        }
    }
    return acc;
}

Tensor MoEModel::model_forward(Tape& tape, const std::vector<int>& tokens,
                               RoutingLog* routing_sink, const FrozenRouting* frozen,
                               const GroupedGatingSpec* grouped) const {
    const int t_count = static_cast<int>(tokens.size());
    if (t_count == 0) throw InputError("model_forward: empty token sequence");
    if (t_count > cfg_.max_seq_len) {
        throw InputError("sequence length " + std::to_string(t_count) + " exceeds max_seq_len " +
                         std::to_string(cfg_.max_seq_len));
    }
    if (routing_sink != nullptr) {
        routing_sink->layer_count = cfg_.n_layers;
        routing_sink->n_experts = cfg_.n_routed_experts;
        routing_sink->top_k = grouped != nullptr
                                  ? static_cast<int>(static_cast<long>(cfg_.n_routed_experts) *
                                                     grouped->active_fraction.num /
                                                     grouped->active_fraction.den)
                                  : cfg_.top_k;
        routing_sink->per_layer.resize(static_cast<size_t>(cfg_.n_layers));
        if (routing_sink->retain_affinities) {
            routing_sink->affinity_rows.resize(static_cast<size_t>(cfg_.n_layers));
        }
        routing_sink->sample_sizes.push_back(t_count);
    }

    Tensor x = ops::add(tape, ops::embedding_lookup(tape, param(-1, GroupKind::embedding), tokens),
                        ops::gather_rows(tape, param(-1, GroupKind::pos_embedding),
                                         iota_vec(t_count)));
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        Tensor a_in = ops::rmsnorm(tape, x, param(l, GroupKind::attn_norm));
        Tensor q = apply_weight(tape, a_in, l, GroupKind::attn_wq, -1);
        Tensor k = apply_weight(tape, a_in, l, GroupKind::attn_wk, -1);
        Tensor v = apply_weight(tape, a_in, l, GroupKind::attn_wv, -1);
        Tensor att = ops::causal_softmax(
            tape, ops::scale(tape, ops::matmul(tape, q, ops::transpose(tape, k)), att_scale));
        Tensor ctx = apply_weight(tape, ops::matmul(tape, att, v), l, GroupKind::attn_wo, -1);
        x = ops::add(tape, x, ctx);
        Tensor f_in = ops::rmsnorm(tape, x, param(l, GroupKind::ffn_norm));
        x = moe_layer_forward(tape, f_in, l, routing_sink, &x, frozen, grouped);
    }
    x = ops::rmsnorm(tape, x, param(-1, GroupKind::final_norm));
    return apply_weight(tape, x, -1, GroupKind::head, -1);
}

} // namespace esft
