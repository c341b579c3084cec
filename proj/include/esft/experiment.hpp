// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: a strict JSON manifest drives gen -> pretrain ->
// probe -> select -> train -> eval, writing every artifact under one output
// directory. Stages can be toggled; disabled stages load their inputs from
// the files an earlier run left behind.
#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "esft/corpus.hpp"
#include "esft/model.hpp"
#include "esft/probes.hpp"
#include "esft/select.hpp"
#include "esft/trainer.hpp"

namespace esft {

// LoRA adapter init draws from seed ^ this salt so the stream never collides
// with the training batch stream of the same seed.
constexpr uint64_t kLoraAttachSeedSalt = 0x6c6f72615f696e69ULL;

// Parses a JSON array of task specs (same schema as the manifest's "tasks"
// list, unknown keys rejected). InputError on malformed text.
std::vector<TaskSpec> task_specs_from_json_text(const std::string& text);

struct StageToggles {
    bool gen = true;
    bool pretrain = true;
    bool probe = true;
    bool select = true;
    bool train = true;
    bool eval = true;
};

struct TrainSection {
    int pretrain_steps = 0;
    double pretrain_learning_rate = 0.0;
    int train_steps = 0;
    double learning_rate = 0.0;
    int batch_size = 1;
    int seq_len = 0;
    int eval_every = 0;
    bool mix_alignment = true;
    double p_token = 0.2;
    double p_gate = 0.1;
    int lora_rank = 8;
    double lora_scaling = 2.0;
};

struct ProbeSection {
    int n_selection_samples = 0;
    int selection_seq_len = 0;
    int overlap_top_k = 6;
};

struct ExperimentManifest {
    MoEModelConfig model;
    std::vector<TaskSpec> tasks;
    std::vector<Method> methods;
    std::vector<int64_t> seeds; // one training run per seed
    std::string out_dir;
    StageToggles stages;
    TrainSection train;
    ProbeSection probe;
    std::vector<std::string> train_tasks; // empty means every task
    std::string vanilla_checkpoint; // empty means <out_dir>/vanilla/model.ckpt
    // Trailing fraction of each task's documents held out for probes.
    double holdout_fraction = 0.25;

    void validate() const; // ConfigError on violation
};

// Strict parsing: unknown keys anywhere in the document are rejected.
ExperimentManifest manifest_from_json_text(const std::string& text);
ExperimentManifest load_manifest(const std::string& path);

void run_experiment(const ExperimentManifest& manifest, std::ostream* log = nullptr);

// Figure-analog data files. CSV for flat tables, JSON mirrors where a
// structure (matrix + labels) warrants it; every JSON carries schema_version.
void export_gate_distribution_csv(const RoutingLog& log, const std::string& path);

struct OverlapHeatmap {
    std::vector<std::string> labels;
    std::vector<double> matrix; // row-major, labels.size() squared
    int top_k = 0;
};

OverlapHeatmap overlap_heatmap(const std::vector<RoutingLog>& logs, int top_k);
void export_overlap_heatmap(const OverlapHeatmap& heat, const std::string& csv_path,
                            const std::string& json_path);

void export_experts_per_layer_csv(
    const std::vector<std::pair<std::string, ExpertSelection>>& labeled_selections,
    int n_routed_experts, const std::string& path);

struct PSweepRow {
    double p = 0.0;
    int64_t trainable_param_count = 0;
    double mean_selected_experts = 0.0;
    double min_achieved_mass = 0.0;
};

// Selection at each threshold with the default mask (selected experts only);
// the trainable-count column is nondecreasing in p.
std::vector<PSweepRow> p_sweep(const MoEModel& model, const ExpertRelevance& rel,
                               const std::vector<double>& ps);
void export_p_sweep_csv(const std::vector<PSweepRow>& rows, const std::string& path);

struct EvalSummaryRow {
    std::string task;
    std::string method;
    int64_t seed = 0;
    int64_t trainable_param_count = 0;
    double task_loss_initial = 0.0;
    double task_loss_final = 0.0;
    double general_loss_final = 0.0;
    double forgetting_kl = 0.0;
    double delta_general_loss = 0.0;
};

void export_eval_summary(const std::vector<EvalSummaryRow>& rows, const std::string& csv_path,
                         const std::string& json_path);

// Round-robin blend of several corpora (doc 0 of each, doc 1 of each, ...).
Corpus blend_corpora(const std::vector<Corpus>& parts, const std::string& label);
// Leading/trailing document split at the given holdout fraction; at least one
// document lands on each side.
std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double holdout_fraction);

} // namespace esft
