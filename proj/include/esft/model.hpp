// SPDX-License-Identifier: Apache-2.0
//
// The toy MoE transformer: token + position embeddings, pre-norm single-head
// causal attention, and an MoE feed-forward block per layer with optional
// shared experts. Routed gates keep raw softmax affinities (no
// renormalization after top-k); shared experts process every token
// unconditionally.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "esft/common.hpp"
#include "esft/ops.hpp"
#include "esft/rng.hpp"
#include "esft/routing.hpp"
#include "esft/tensor.hpp"

namespace esft {

struct MoEModelConfig {
    int vocab_size = 0;
    int d_model = 0;
    int n_layers = 0;
    int n_heads = 1; // single-head only; stored for the record
    int n_routed_experts = 0; // N
    int n_shared_experts = 0; // K_s
    int top_k = 0; // routed selections per token, not counting shared experts
    int expert_hidden_dim = 0;
    int segmentation_factor = 1; // m; N and top_k are stored post-segmentation
    int max_seq_len = 0;
    int64_t seed = 0;

    void validate() const; // ConfigError on violation
    int64_t param_count() const; // closed form
};

enum class GroupKind {
    embedding,
    pos_embedding,
    head,
    final_norm,
    attn_norm,
    attn_wq,
    attn_wk,
    attn_wv,
    attn_wo,
    ffn_norm,
    gate,
    expert_up,
    expert_down,
    shared_up,
    shared_down,
    lora_a,
    lora_b,
};

std::string group_kind_name(GroupKind k);
GroupKind group_kind_from_name(const std::string& s);
// Routed-expert parameters are the only ones ESFT selection applies to;
// gates count as non-expert parameters alongside attention and embeddings.
bool is_routed_expert_kind(GroupKind k);
bool is_shared_expert_kind(GroupKind k);

struct ParamId {
    int layer = -1; // -1 for globals
    GroupKind kind = GroupKind::embedding;
    int expert = -1; // -1 when not applicable
    // LoRA adapters wrap a base matrix; these identify it.
    GroupKind target_kind = GroupKind::embedding;

    bool operator==(const ParamId& o) const {
        return layer == o.layer && kind == o.kind && expert == o.expert &&
               (kind != GroupKind::lora_a && kind != GroupKind::lora_b
                    ? true
                    : target_kind == o.target_kind);
    }
};

struct ParamGroup {
    ParamId id;
    Tensor tensor;
    std::string name; // unique, stable across runs with the same config
};

struct GateOutput {
    Tensor affinities; // [tokens x N], rows sum to 1
    Tensor gates; // [tokens x N], exactly K nonzeros per row, values from affinities
    std::vector<std::vector<int>> selected; // per token, ascending expert ids
};

// softmax over per-token logits hidden . centroids[i].
Tensor gate_affinity(Tape& tape, const Tensor& hidden, const Tensor& centroids);

// Keep the K largest affinities per token as gate values, zero elsewhere.
// Ties resolve toward the lower expert index.
GateOutput topk_gate(Tape& tape, const Tensor& s, int k);

// Grouped variant: equal-size expert groups share their mean affinity as the
// group score; whole groups activate until active_fraction of all experts is
// active, and active experts keep their own affinity as gate value.
GateOutput grouped_topk_gate(Tape& tape, const Tensor& s,
                             const std::vector<std::vector<int>>& groups,
                             Rational active_fraction);

// Routing choices captured from a previous forward pass, replayed verbatim
// so finite-difference checks see a fixed top-k support.
struct FrozenRouting {
    std::vector<std::vector<std::vector<int>>> selected; // [layer][token]
};

struct LoraAdapter {
    ParamId id; // kind lora_a/lora_b, target_kind set
    Tensor a; // [d_in x rank]
    Tensor b; // [rank x d_out]
};

struct LoraState {
    int rank = 0;
    double scaling = 0.0;
    std::vector<LoraAdapter> adapters;
};

struct GroupedGatingSpec {
    std::vector<std::vector<int>> groups;
    Rational active_fraction;
};

class MoEModel {
public:
    explicit MoEModel(MoEModelConfig cfg);
    // Copying is deleted because a copy would alias parameter storage; use
    // clone() for an independent model.
    MoEModel(const MoEModel&) = delete;
    MoEModel& operator=(const MoEModel&) = delete;
    MoEModel(MoEModel&&) = default;
    MoEModel& operator=(MoEModel&&) = default;

    const MoEModelConfig& config() const { return cfg_; }
    // Base parameter groups in a stable order, followed by adapters if any.
    std::vector<ParamGroup> param_groups() const;
    const Tensor& param(int layer, GroupKind kind, int expert = -1) const;
    int64_t total_param_count() const;
    const std::optional<LoraState>& lora() const { return lora_; }

    // Deep copy: fresh tensors with identical bytes.
    MoEModel clone() const;

    // Adds zero-initialized-B adapters to attention and expert matrices, so
    // outputs are unchanged until training moves the adapters. Embedding,
    // head, norms, and gate centroids are not adapted.
    void attach_lora(int rank, double scaling, Rng& rng);

    // residual + shared expert outputs + gated routed expert outputs, all
    // computed on `hidden`. The model itself passes a pre-norm stream value
    // via residual_override; standalone callers omit it and get
    // residual = hidden.
    Tensor moe_layer_forward(Tape& tape, const Tensor& hidden, int layer,
                             RoutingLog* routing_sink = nullptr,
                             const Tensor* residual_override = nullptr,
                             const FrozenRouting* frozen = nullptr,
                             const GroupedGatingSpec* grouped = nullptr) const;

    Tensor model_forward(Tape& tape, const std::vector<int>& tokens,
                         RoutingLog* routing_sink = nullptr,
                         const FrozenRouting* frozen = nullptr,
                         const GroupedGatingSpec* grouped = nullptr) const;

private:
    MoEModelConfig cfg_;
    std::vector<ParamGroup> base_;
    std::optional<LoraState> lora_;

    Tensor init_tensor(std::vector<int> shape, double stddev, Rng& rng);
    void push_group(int layer, GroupKind kind, int expert, Tensor t);
    // y = x . W (+ scaled adapter path when one is attached to W).
    Tensor apply_weight(Tape& tape, const Tensor& x, int layer, GroupKind kind, int expert) const;
    const LoraAdapter* find_adapter(int layer, GroupKind kind, int expert) const;
    Tensor expert_ffn(Tape& tape, const Tensor& x, int layer, bool shared, int expert) const;
};

std::string param_name(const ParamId& id);

} // namespace esft
