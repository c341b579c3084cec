// SPDX-License-Identifier: Apache-2.0
//
// Strict JSON (de)serialization for the model config: unknown keys are
// rejected so a typo in an experiment file fails loudly instead of silently
// falling back to a default.
#pragma once

#include <string>

#include "esft/model.hpp"
#include "json.hpp"

namespace esft {

inline nlohmann::json config_to_json(const MoEModelConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size},
                          {"d_model", c.d_model},
                          {"n_layers", c.n_layers},
                          {"n_heads", c.n_heads},
                          {"n_routed_experts", c.n_routed_experts},
                          {"n_shared_experts", c.n_shared_experts},
                          {"top_k", c.top_k},
                          {"expert_hidden_dim", c.expert_hidden_dim},
                          {"segmentation_factor", c.segmentation_factor},
                          {"max_seq_len", c.max_seq_len},
                          {"seed", c.seed}};
}

inline MoEModelConfig config_from_json(const nlohmann::json& j) {
    static const char* known[] = {"vocab_size",         "d_model",
                                  "n_layers",           "n_heads",
                                  "n_routed_experts",   "n_shared_experts",
                                  "top_k",              "expert_hidden_dim",
                                  "segmentation_factor", "max_seq_len",
                                  "seed"};
    if (!j.is_object()) throw InputError("model config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const char* k : known) {
            if (key == k) ok = true;
        }
        if (!ok) throw InputError("unknown model config key '" + key + "'");
    }
    MoEModelConfig c;
    try {
        c.vocab_size = j.at("vocab_size").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.value("n_heads", 1);
        c.n_routed_experts = j.at("n_routed_experts").get<int>();
        c.n_shared_experts = j.at("n_shared_experts").get<int>();
        c.top_k = j.at("top_k").get<int>();
        c.expert_hidden_dim = j.at("expert_hidden_dim").get<int>();
        c.segmentation_factor = j.value("segmentation_factor", 1);
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.seed = j.at("seed").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError("invalid model config: " + std::string(e.what()));
    }
    c.validate();
    return c;
}

} // namespace esft
