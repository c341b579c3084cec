// SPDX-License-Identifier: Apache-2.0

#include "esft/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "esft/kernels.hpp"
#include "esft/ops.hpp"
#include "esft/rng.hpp"
#include "json.hpp"

namespace esft {

using nlohmann::json;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
// Alignment stream draws from a distinct but seed-derived generator.
constexpr uint64_t kAlignmentSeedSalt = 0x9e3779b97f4a7c15ULL;

} // namespace

std::string method_name(Method m) {
    switch (m) {
        case Method::fft: return "fft";
        case Method::lora: return "lora";
        case Method::esft_token: return "esft_token";
        case Method::esft_gate: return "esft_gate";
    }
    throw ContractError("unhandled method");
}

Method method_from_name(const std::string& s) {
    if (s == "fft") return Method::fft;
    if (s == "lora") return Method::lora;
    if (s == "esft_token") return Method::esft_token;
    if (s == "esft_gate") return Method::esft_gate;
    throw ConfigError("unknown method '" + s + "', expected fft, lora, esft_token, or esft_gate");
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be positive and finite");
    }
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (seq_len < 1) throw ConfigError("seq_len must be at least 1");
    if (max_steps < 1) throw ConfigError("max_steps must be at least 1");
    if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
    if (method == Method::esft_token || method == Method::esft_gate) {
        if (!(p > 0.0) || p > 1.0) {
            throw ConfigError("selection threshold p must be in (0, 1], got " + std::to_string(p));
        }
    }
    if (method == Method::lora) {
        if (lora_rank < 1) throw ConfigError("lora_rank must be at least 1");
        if (!(lora_scaling > 0.0)) throw ConfigError("lora_scaling must be positive");
    }
}

Corpus sample_selection_subset(const Corpus& corpus, int n_samples, int seq_len, int64_t seed) {
    corpus.validate();
    if (n_samples < 1 || seq_len < 1) {
        throw ConfigError("selection subset needs positive n_samples and seq_len");
    }
    const int64_t needed = static_cast<int64_t>(n_samples) * seq_len;
    const int64_t have = corpus.token_count();
    if (have < needed) {
        throw InputError("selection subset needs " + std::to_string(needed) + " tokens (" +
                         std::to_string(n_samples) + " x " + std::to_string(seq_len) +
                         "), corpus has " + std::to_string(have) + ", short by " +
                         std::to_string(needed - have));
    }
    Rng rng(static_cast<uint64_t>(seed));
    std::vector<int> order(corpus.documents.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    Corpus out;
    out.task_label = corpus.task_label;
    out.vocab_size = corpus.vocab_size;
    std::vector<int> current;
    current.reserve(static_cast<size_t>(seq_len));
    for (const int d : order) {
        for (const int tok : corpus.documents[static_cast<size_t>(d)]) {
            current.push_back(tok);
            if (static_cast<int>(current.size()) == seq_len) {
                out.documents.push_back(current);
                current.clear();
                if (static_cast<int>(out.documents.size()) == n_samples) return out;
            }
        }
    }
    throw ContractError("selection subset ran out of tokens after the budget check");
}

std::vector<std::vector<int>> chunk_corpus(const Corpus& corpus, int window) {
    if (window < 1) throw ConfigError("chunk window must be positive");
    std::vector<std::vector<int>> out;
    std::vector<int> current;
    current.reserve(static_cast<size_t>(window));
    for (const auto& doc : corpus.documents) {
        for (const int tok : doc) {
            current.push_back(tok);
            if (static_cast<int>(current.size()) == window) {
                out.push_back(current);
                current.clear();
            }
        }
    }
    return out;
}

SourceKind MixedSchedule::source_at(int step) const {
    if (ratio_alignment == 0) return SourceKind::task;
    if (ratio_task == 0) return SourceKind::alignment;
    const int cycle = ratio_task + ratio_alignment;
    return step % cycle < ratio_task ? SourceKind::task : SourceKind::alignment;
}

MixedSchedule mix_datasets(const Corpus& task, const Corpus& alignment,
                           std::pair<int, int> ratio, int seq_len, int64_t seed) {
    if (ratio.first < 0 || ratio.second < 0 || ratio.first + ratio.second == 0) {
        throw ConfigError("mix ratio components must be nonnegative with a positive sum");
    }
    if (seq_len < 1) throw ConfigError("seq_len must be at least 1");
    MixedSchedule sched;
    sched.ratio_task = ratio.first;
    sched.ratio_alignment = ratio.second;
    sched.seq_len = seq_len;
    sched.seed = seed;
    if (ratio.first > 0) {
        sched.task_seqs = chunk_corpus(task, seq_len + 1);
        if (sched.task_seqs.empty()) {
            throw InputError("task corpus yields no sequences of " + std::to_string(seq_len + 1) +
                             " tokens (has " + std::to_string(task.token_count()) + ")");
        }
    }
    if (ratio.second > 0) {
        sched.alignment_seqs = chunk_corpus(alignment, seq_len + 1);
        if (sched.alignment_seqs.empty()) {
            throw InputError("alignment corpus yields no sequences of " +
                             std::to_string(seq_len + 1) + " tokens (has " +
                             std::to_string(alignment.token_count()) + ")");
        }
    }
    return sched;
}

namespace {

// Cycles through a sequence pool, reshuffling at every epoch boundary.
class SequenceStream {
public:
    SequenceStream(const std::vector<std::vector<int>>* seqs, uint64_t seed)
        : seqs_(seqs), rng_(seed) {
        order_.resize(seqs_->size());
        std::iota(order_.begin(), order_.end(), 0);
    }

    const std::vector<int>& next() {
        if (pos_ == order_.size()) {
            rng_.shuffle(order_);
            pos_ = 0;
        }
        return (*seqs_)[static_cast<size_t>(order_[pos_++])];
    }

private:
    const std::vector<std::vector<int>>* seqs_;
    Rng rng_;
    std::vector<int> order_;
    size_t pos_ = 0;
};

std::vector<double> log_softmax_row(const double* row, int n) {
    double mx = row[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    double lse = 0.0;
    for (int i = 0; i < n; ++i) lse += std::exp(row[i] - mx);
    lse = std::log(lse) + mx;
    std::vector<double> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = row[i] - lse;
    return out;
}

// Mean next-token KL(a || b) over every position of every window.
double mean_next_token_kl(const MoEModel& a, const MoEModel& b,
                          const std::vector<std::vector<int>>& seqs) {
    double total = 0.0;
    int64_t positions = 0;
    for (const auto& w : seqs) {
        const std::vector<int> in(w.begin(), w.end() - 1);
        Tape ta, tb;
        const Tensor la = a.model_forward(ta, in);
        const Tensor lb = b.model_forward(tb, in);
        const int rows = la.rows();
        const int cols = la.cols();
        for (int r = 0; r < rows; ++r) {
            const auto pa = log_softmax_row(la.data().data() + static_cast<size_t>(r) * cols, cols);
            const auto pb = log_softmax_row(lb.data().data() + static_cast<size_t>(r) * cols, cols);
            double kl = 0.0;
            for (int c = 0; c < cols; ++c) {
                kl += std::exp(pa[static_cast<size_t>(c)]) *
                      (pa[static_cast<size_t>(c)] - pb[static_cast<size_t>(c)]);
            }
            total += std::max(kl, 0.0); // clamp the tiny negatives rounding can produce
            ++positions;
        }
    }
    if (positions == 0) throw InputError("KL probe has no scoreable positions");
    return total / static_cast<double>(positions);
}

} // namespace

double corpus_cross_entropy(const MoEModel& model, const std::vector<std::vector<int>>& seqs) {
    double total = 0.0;
    int64_t positions = 0;
    for (const auto& w : seqs) {
        if (w.size() < 2) {
            throw InputError("cross-entropy windows need at least 2 tokens, got " +
                             std::to_string(w.size()));
        }
        const std::vector<int> in(w.begin(), w.end() - 1);
        const std::vector<int> tg(w.begin() + 1, w.end());
        Tape tape;
        const Tensor logits = model.model_forward(tape, in);
        const Tensor ce = ops::cross_entropy_mean(tape, logits, tg);
        total += ce.value() * static_cast<double>(tg.size());
        positions += static_cast<int64_t>(tg.size());
    }
    if (positions == 0) throw InputError("cross-entropy probe is empty");
    return total / static_cast<double>(positions);
}

TrainReport train(MoEModel& model, const TrainMask& mask, const MixedSchedule& schedule,
                  const EvalSuite& eval, const TrainConfig& config) {
    config.validate();
    const MoEModelConfig& cfg = model.config();
    if (config.seq_len > cfg.max_seq_len) {
        throw ConfigError("seq_len " + std::to_string(config.seq_len) + " exceeds model max " +
                          std::to_string(cfg.max_seq_len));
    }
    if (schedule.seq_len != config.seq_len) {
        throw ConfigError("schedule was built for seq_len " + std::to_string(schedule.seq_len) +
                          ", config has " + std::to_string(config.seq_len));
    }
    if (eval.task_probe.empty()) throw InputError("eval suite needs a non-empty task probe");
    if (schedule.ratio_task > 0 && schedule.task_seqs.empty()) {
        throw ConfigError("schedule draws task batches but has no task sequences");
    }
    if (schedule.ratio_alignment > 0 && schedule.alignment_seqs.empty()) {
        throw ConfigError("schedule draws alignment batches but has no alignment sequences");
    }

    std::vector<ParamGroup> groups = model.param_groups();
    std::unordered_map<std::string, size_t> by_name;
    for (size_t i = 0; i < groups.size(); ++i) by_name.emplace(groups[i].name, i);
    std::vector<size_t> trainable;
    for (const std::string& name : mask.trainable_groups) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw ConfigError("mask names unknown parameter group '" + name +
                              "'; was it built against a different model?");
        }
        trainable.push_back(it->second);
    }
    std::sort(trainable.begin(), trainable.end());
    int64_t resolved_count = 0;
    for (const size_t i : trainable) resolved_count += groups[i].tensor.numel();
    if (resolved_count != mask.trainable_param_count) {
        throw ConfigError("mask claims " + std::to_string(mask.trainable_param_count) +
                          " trainable parameters, resolved groups hold " +
                          std::to_string(resolved_count));
    }

    // Optimizer moments exist only for trainable groups.
    std::vector<std::vector<double>> adam_m(trainable.size());
    std::vector<std::vector<double>> adam_v(trainable.size());
    for (size_t i = 0; i < trainable.size(); ++i) {
        const size_t n = groups[trainable[i]].tensor.data().size();
        adam_m[i].assign(n, 0.0);
        adam_v[i].assign(n, 0.0);
    }

    const MoEModel initial = model.clone();
    SequenceStream task_stream(&schedule.task_seqs, static_cast<uint64_t>(config.seed));
    SequenceStream align_stream(&schedule.alignment_seqs,
                                static_cast<uint64_t>(config.seed) ^ kAlignmentSeedSalt);

    TrainReport report;
    report.trainable_param_count = resolved_count;
    report.optimizer_state_param_count = resolved_count;
    report.steps = config.max_steps;

    const auto t0 = std::chrono::steady_clock::now();
    const auto elapsed_ms = [&t0]() {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    };
    const auto run_eval = [&](int completed) {
        EvalRecord r;
        r.step = completed;
        r.task_loss = corpus_cross_entropy(model, eval.task_probe);
        if (!eval.alignment_probe.empty()) {
            r.alignment_loss = corpus_cross_entropy(model, eval.alignment_probe);
        }
        if (!eval.general_probe.empty()) {
            r.general_loss = corpus_cross_entropy(model, eval.general_probe);
            r.kl_vs_initial = mean_next_token_kl(initial, model, eval.general_probe);
        }
        r.wall_ms_per_step = completed > 0 ? elapsed_ms() / completed : 0.0;
        report.evals.push_back(r);
    };

    run_eval(0);
    std::vector<double> zero_grad_buffer;
    for (int step = 0; step < config.max_steps; ++step) {
        SequenceStream& stream =
            schedule.source_at(step) == SourceKind::task ? task_stream : align_stream;
        for (const ParamGroup& g : groups) g.tensor.zero_grad();
        Tape tape;
        try {
            Tensor total;
            for (int b = 0; b < config.batch_size; ++b) {
                const std::vector<int>& w = stream.next();
                const std::vector<int> in(w.begin(), w.end() - 1);
                const std::vector<int> tg(w.begin() + 1, w.end());
                const Tensor logits = model.model_forward(tape, in);
                const Tensor ce = ops::cross_entropy_mean(tape, logits, tg);
                total = b == 0 ? ce : ops::add(tape, total, ce);
            }
            const Tensor loss = ops::scale(tape, total, 1.0 / config.batch_size);
            tape.backward(loss);
        } catch (const InputError& e) {
            throw InputError("training aborted at step " + std::to_string(step) + ": " + e.what());
        }
        const double bc1 = 1.0 - std::pow(kBeta1, step + 1);
        const double bc2 = 1.0 - std::pow(kBeta2, step + 1);
        for (size_t i = 0; i < trainable.size(); ++i) {
            const Tensor& t = groups[trainable[i]].tensor;
            const int n = static_cast<int>(t.data().size());
            const double* grad;
            if (t.has_grad()) {
                grad = t.grad().data();
            } else {
                // Expert groups the batch never routed through get a zero
                // gradient; moments still decay like plain Adam.
                if (static_cast<int>(zero_grad_buffer.size()) < n) {
                    zero_grad_buffer.assign(static_cast<size_t>(n), 0.0);
                }
                grad = zero_grad_buffer.data();
            }
            kernels::active().adam_update(t.data_mut().data(), adam_m[i].data(), adam_v[i].data(), grad, n,
                                 config.learning_rate, kBeta1, kBeta2, kAdamEps, bc1, bc2);
        }
        if ((step + 1) % config.eval_every == 0 || step + 1 == config.max_steps) {
            run_eval(step + 1);
        }
    }
    report.total_wall_ms = elapsed_ms();
    return report;
}

ForgettingReport evaluate_forgetting(const MoEModel& before, const MoEModel& after,
                                     const Corpus& probe) {
    const MoEModelConfig& a = before.config();
    const MoEModelConfig& b = after.config();
    if (a.vocab_size != b.vocab_size || a.d_model != b.d_model || a.n_layers != b.n_layers ||
        a.n_routed_experts != b.n_routed_experts || a.n_shared_experts != b.n_shared_experts ||
        a.top_k != b.top_k || a.expert_hidden_dim != b.expert_hidden_dim ||
        a.max_seq_len != b.max_seq_len) {
        throw InputError("forgetting evaluation needs models with identical configs");
    }
    probe.validate();
    std::vector<std::vector<int>> seqs;
    for (const auto& doc : probe.documents) {
        // A doc of n tokens scores n-1 next-token positions from an (n-1)-token input.
        if (static_cast<int>(doc.size()) > a.max_seq_len + 1) {
            throw InputError("probe document of " + std::to_string(doc.size()) +
                             " tokens yields a " + std::to_string(doc.size() - 1) +
                             "-token input, model max_seq_len is " + std::to_string(a.max_seq_len));
        }
        if (doc.size() >= 2) seqs.push_back(doc);
    }
    if (seqs.empty()) throw InputError("probe has no documents with at least 2 tokens");
    ForgettingReport rep;
    rep.mean_kl = mean_next_token_kl(before, after, seqs);
    rep.loss_before = corpus_cross_entropy(before, seqs);
    rep.loss_after = corpus_cross_entropy(after, seqs);
    rep.delta_loss = rep.loss_after - rep.loss_before;
    return rep;
}

namespace {

json eval_record_to_json(const EvalRecord& r) {
    json j{{"step", r.step},
           {"task_loss", r.task_loss},
           {"wall_ms_per_step", r.wall_ms_per_step}};
    j["alignment_loss"] = r.alignment_loss.has_value() ? json(*r.alignment_loss) : json(nullptr);
    j["general_loss"] = r.general_loss.has_value() ? json(*r.general_loss) : json(nullptr);
    j["kl_vs_initial"] = r.kl_vs_initial.has_value() ? json(*r.kl_vs_initial) : json(nullptr);
    return j;
}

std::optional<double> optional_from(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

} // namespace

void save_train_report(const TrainReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot open " + path + " for writing");
    json header{{"schema_version", 1},
                {"record", "header"},
                {"trainable_param_count", report.trainable_param_count},
                {"optimizer_state_param_count", report.optimizer_state_param_count},
                {"steps", report.steps},
                {"total_wall_ms", report.total_wall_ms}};
    out << header.dump() << "\n";
    for (const EvalRecord& r : report.evals) out << eval_record_to_json(r).dump() << "\n";
}

TrainReport load_train_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open train report " + path);
    TrainReport report;
    std::string line;
    int line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            if (!have_header) {
                if (j.value("record", "") != "header") {
                    throw InputError("first record must be the header");
                }
                report.trainable_param_count = j.at("trainable_param_count").get<int64_t>();
                report.optimizer_state_param_count =
                    j.at("optimizer_state_param_count").get<int64_t>();
                report.steps = j.at("steps").get<int>();
                report.total_wall_ms = j.at("total_wall_ms").get<double>();
                have_header = true;
                continue;
            }
            EvalRecord r;
            r.step = j.at("step").get<int>();
            r.task_loss = j.at("task_loss").get<double>();
            r.wall_ms_per_step = j.at("wall_ms_per_step").get<double>();
            r.alignment_loss = optional_from(j, "alignment_loss");
            r.general_loss = optional_from(j, "general_loss");
            r.kl_vs_initial = optional_from(j, "kl_vs_initial");
            report.evals.push_back(r);
        } catch (const json::exception& e) {
            throw InputError("malformed train report " + path + " line " +
                             std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!have_header) throw InputError("train report " + path + " is empty");
    return report;
}

} // namespace esft
