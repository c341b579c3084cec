// SPDX-License-Identifier: Apache-2.0
//
// Deterministic next-token training with masked parameter updates. Tokens
// route wherever the gate sends them and gradients flow everywhere; the mask
// is enforced at the optimizer step, so frozen parameters stay byte-identical
// while still shaping the gradients of trainable ones.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "esft/corpus.hpp"
#include "esft/model.hpp"
#include "esft/select.hpp"

namespace esft {

enum class Method { fft, lora, esft_token, esft_gate };
std::string method_name(Method m);
Method method_from_name(const std::string& s);

struct TrainConfig {
    Method method = Method::fft;
    double learning_rate = 1e-3;
    int batch_size = 1; // sequences per step
    int seq_len = 0; // tokens per training sequence (targets shift by one)
    int max_steps = 0;
    int eval_every = 0;
    double p = 0.2; // selection threshold, ESFT methods only
    int lora_rank = 8;
    double lora_scaling = 2.0;
    bool mix_alignment = false;
    int64_t seed = 0;

    void validate() const; // ConfigError on violation
};

// Shuffles documents, concatenates, and cuts exactly n_samples sequences of
// seq_len tokens. Deterministic under seed.
Corpus sample_selection_subset(const Corpus& corpus, int n_samples, int seq_len, int64_t seed);

// Concatenates documents in order and cuts non-overlapping windows of
// `window` tokens, dropping the remainder.
std::vector<std::vector<int>> chunk_corpus(const Corpus& corpus, int window);

enum class SourceKind { task, alignment };

// Batch schedule: step s draws from the task pool when s mod (rt + ra) < rt,
// otherwise from the alignment pool. Pools hold seq_len + 1 token windows;
// each pool reshuffles per epoch from its own seeded stream.
struct MixedSchedule {
    std::vector<std::vector<int>> task_seqs;
    std::vector<std::vector<int>> alignment_seqs;
    int ratio_task = 1;
    int ratio_alignment = 0;
    int seq_len = 0;
    int64_t seed = 0;

    SourceKind source_at(int step) const;
};

MixedSchedule mix_datasets(const Corpus& task, const Corpus& alignment,
                           std::pair<int, int> ratio, int seq_len, int64_t seed);

// Fixed probe sets evaluated at each eval interval; entries are seq_len + 1
// token windows. Empty probes are skipped and reported as absent.
struct EvalSuite {
    std::vector<std::vector<int>> task_probe;
    std::vector<std::vector<int>> alignment_probe;
    std::vector<std::vector<int>> general_probe;
};

struct EvalRecord {
    int step = 0; // completed optimizer steps at eval time
    double task_loss = 0.0;
    std::optional<double> alignment_loss;
    std::optional<double> general_loss;
    // Mean next-token KL from the model as it was when train() started,
    // measured on the general probe.
    std::optional<double> kl_vs_initial;
    double wall_ms_per_step = 0.0; // measured; not part of the determinism contract
};

struct TrainReport {
    std::vector<EvalRecord> evals;
    int64_t trainable_param_count = 0;
    // Doubles held in each optimizer moment buffer; frozen groups hold none.
    int64_t optimizer_state_param_count = 0;
    int steps = 0;
    double total_wall_ms = 0.0;
};

// Runs cross-entropy training; only parameter groups named in the mask are
// updated. Throws InputError naming the step if the loss goes non-finite.
TrainReport train(MoEModel& model, const TrainMask& mask, const MixedSchedule& schedule,
                  const EvalSuite& eval, const TrainConfig& config);

// Token-weighted mean cross entropy over seq_len + 1 windows.
double corpus_cross_entropy(const MoEModel& model, const std::vector<std::vector<int>>& seqs);

struct ForgettingReport {
    double mean_kl = 0.0; // KL(before || after) of next-token distributions
    double loss_before = 0.0;
    double loss_after = 0.0;
    double delta_loss = 0.0; // after minus before
};

ForgettingReport evaluate_forgetting(const MoEModel& before, const MoEModel& after,
                                     const Corpus& probe);

// JSON-lines: one header record, then one record per eval step.
void save_train_report(const TrainReport& report, const std::string& path);
TrainReport load_train_report(const std::string& path);

} // namespace esft
