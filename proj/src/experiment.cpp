// SPDX-License-Identifier: Apache-2.0

#include "esft/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>

#include "esft/checkpoint.hpp"
#include "esft/config_json.hpp"
#include "json.hpp"

namespace esft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
                return it.key() == k;
            }) == allowed.end()) {
            throw InputError("unknown key '" + it.key() + "' in " + where);
        }
    }
}

TaskSpec task_spec_from_json(const json& j) {
    check_keys(j,
               {"name", "generator", "vocab_size", "band_lo", "band_hi", "weights",
                "doc_len_min", "doc_len_max", "n_docs", "seed"},
               "task spec");
    TaskSpec s;
    s.name = j.at("name").get<std::string>();
    s.generator = j.value("generator", std::string("categorical"));
    s.vocab_size = j.at("vocab_size").get<int>();
    s.band_lo = j.at("band_lo").get<int>();
    s.band_hi = j.at("band_hi").get<int>();
    if (j.contains("weights")) s.weights = j.at("weights").get<std::vector<double>>();
    s.doc_len_min = j.at("doc_len_min").get<int>();
    s.doc_len_max = j.at("doc_len_max").get<int>();
    s.n_docs = j.at("n_docs").get<int>();
    s.seed = j.value("seed", int64_t{0});
    return s;
}

bool same_structure(const MoEModelConfig& a, const MoEModelConfig& b) {
    return a.vocab_size == b.vocab_size && a.d_model == b.d_model && a.n_layers == b.n_layers &&
           a.n_routed_experts == b.n_routed_experts && a.n_shared_experts == b.n_shared_experts &&
           a.top_k == b.top_k && a.expert_hidden_dim == b.expert_hidden_dim &&
           a.max_seq_len == b.max_seq_len;
}

std::string run_tag(const std::string& task, Method method, int64_t seed) {
    return task + "_" + method_name(method) + "_seed" + std::to_string(seed);
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw InputError("cannot open " + p.string() + " for writing");
    return out;
}

} // namespace

void ExperimentManifest::validate() const {
    model.validate();
    if (tasks.empty()) throw ConfigError("manifest needs at least one task");
    std::set<std::string> names;
    for (const TaskSpec& t : tasks) {
        t.validate();
        if (!names.insert(t.name).second) throw ConfigError("duplicate task name '" + t.name + "'");
        if (t.vocab_size > model.vocab_size) {
            throw ConfigError("task '" + t.name + "' vocab " + std::to_string(t.vocab_size) +
                              " exceeds model vocab " + std::to_string(model.vocab_size));
        }
    }
    if (out_dir.empty()) throw ConfigError("manifest needs an out_dir");
    if (!(holdout_fraction > 0.0) || !(holdout_fraction < 1.0)) {
        throw ConfigError("holdout_fraction must be in (0, 1)");
    }
    for (const std::string& t : train_tasks) {
        if (names.find(t) == names.end()) {
            throw ConfigError("train_tasks names unknown task '" + t + "'");
        }
    }
    if (stages.pretrain || stages.train || stages.eval) {
        if (train.batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
        if (train.seq_len < 1 || train.seq_len > model.max_seq_len) {
            throw ConfigError("train.seq_len must be in [1, max_seq_len]");
        }
        if (train.eval_every < 1) throw ConfigError("train.eval_every must be at least 1");
    }
    if (stages.pretrain) {
        if (train.pretrain_steps < 1) throw ConfigError("train.pretrain_steps must be at least 1");
        if (!(train.pretrain_learning_rate > 0.0)) {
            throw ConfigError("train.pretrain_learning_rate must be positive");
        }
    }
    if (stages.train || stages.eval) {
        if (methods.empty()) throw ConfigError("manifest needs at least one method");
        if (seeds.empty()) throw ConfigError("manifest needs at least one seed");
    }
    if (stages.train) {
        if (train.train_steps < 1) throw ConfigError("train.train_steps must be at least 1");
        if (!(train.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
        if (!(train.p_token > 0.0) || train.p_token > 1.0 || !(train.p_gate > 0.0) ||
            train.p_gate > 1.0) {
            throw ConfigError("train.p_token and train.p_gate must be in (0, 1]");
        }
        if (std::find(methods.begin(), methods.end(), Method::lora) != methods.end()) {
            if (train.lora_rank < 1) throw ConfigError("train.lora_rank must be at least 1");
            if (!(train.lora_scaling > 0.0)) throw ConfigError("train.lora_scaling must be positive");
        }
    }
    if (stages.probe || stages.select) {
        if (probe.n_selection_samples < 2) {
            throw ConfigError("probe.n_selection_samples must be at least 2 (split-half needs 2)");
        }
        if (probe.selection_seq_len < 1 || probe.selection_seq_len > model.max_seq_len) {
            throw ConfigError("probe.selection_seq_len must be in [1, max_seq_len]");
        }
        if (probe.overlap_top_k < 1 || probe.overlap_top_k > model.n_routed_experts) {
            throw ConfigError("probe.overlap_top_k must be in [1, n_routed_experts]");
        }
    }
}

std::vector<TaskSpec> task_specs_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("task specs are not valid JSON: ") + e.what());
    }
    if (!j.is_array()) throw InputError("task specs must be a JSON array");
    std::vector<TaskSpec> specs;
    try {
        for (const json& t : j) specs.push_back(task_spec_from_json(t));
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed task spec: ") + e.what());
    }
    for (const TaskSpec& s : specs) s.validate();
    return specs;
}

ExperimentManifest manifest_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError(std::string("manifest is not valid JSON: ") + e.what());
    }
    try {
        check_keys(j,
                   {"schema_version", "model", "tasks", "methods", "seeds", "out_dir", "stages",
                    "train", "probe", "train_tasks", "vanilla_checkpoint", "holdout_fraction"},
                   "manifest");
        if (j.value("schema_version", 1) != 1) {
            throw InputError("unsupported manifest schema_version");
        }
        ExperimentManifest m;
        m.model = config_from_json(j.at("model"));
        for (const json& t : j.at("tasks")) m.tasks.push_back(task_spec_from_json(t));
        for (const json& s : j.at("methods")) {
            m.methods.push_back(method_from_name(s.get<std::string>()));
        }
        m.seeds = j.at("seeds").get<std::vector<int64_t>>();
        m.out_dir = j.at("out_dir").get<std::string>();
        if (j.contains("stages")) {
            const json& st = j.at("stages");
            check_keys(st, {"gen", "pretrain", "probe", "select", "train", "eval"}, "stages");
            m.stages.gen = st.value("gen", true);
            m.stages.pretrain = st.value("pretrain", true);
            m.stages.probe = st.value("probe", true);
            m.stages.select = st.value("select", true);
            m.stages.train = st.value("train", true);
            m.stages.eval = st.value("eval", true);
        }
        if (j.contains("train")) {
            const json& tr = j.at("train");
            check_keys(tr,
                       {"pretrain_steps", "pretrain_learning_rate", "train_steps", "learning_rate",
                        "batch_size", "seq_len", "eval_every", "mix_alignment", "p_token", "p_gate",
                        "lora_rank", "lora_scaling"},
                       "train section");
            m.train.pretrain_steps = tr.value("pretrain_steps", 0);
            m.train.pretrain_learning_rate = tr.value("pretrain_learning_rate", 0.0);
            m.train.train_steps = tr.value("train_steps", 0);
            m.train.learning_rate = tr.value("learning_rate", 0.0);
            m.train.batch_size = tr.value("batch_size", 1);
            m.train.seq_len = tr.value("seq_len", 0);
            m.train.eval_every = tr.value("eval_every", 0);
            m.train.mix_alignment = tr.value("mix_alignment", true);
            m.train.p_token = tr.value("p_token", 0.2);
            m.train.p_gate = tr.value("p_gate", 0.1);
            m.train.lora_rank = tr.value("lora_rank", 8);
            m.train.lora_scaling = tr.value("lora_scaling", 2.0);
        }
        if (j.contains("probe")) {
            const json& pr = j.at("probe");
            check_keys(pr, {"n_selection_samples", "selection_seq_len", "overlap_top_k"},
                       "probe section");
            m.probe.n_selection_samples = pr.value("n_selection_samples", 0);
            m.probe.selection_seq_len = pr.value("selection_seq_len", 0);
            m.probe.overlap_top_k = pr.value("overlap_top_k", 6);
        }
        if (j.contains("train_tasks")) {
            m.train_tasks = j.at("train_tasks").get<std::vector<std::string>>();
        }
        if (j.contains("vanilla_checkpoint")) {
            m.vanilla_checkpoint = j.at("vanilla_checkpoint").get<std::string>();
        }
        m.holdout_fraction = j.value("holdout_fraction", 0.25);
        m.validate();
        return m;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed manifest: ") + e.what());
    }
}

ExperimentManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open manifest " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return manifest_from_json_text(text);
}

Corpus blend_corpora(const std::vector<Corpus>& parts, const std::string& label) {
    if (parts.empty()) throw InputError("cannot blend zero corpora");
    Corpus out;
    out.task_label = label;
    size_t max_docs = 0;
    for (const Corpus& p : parts) {
        p.validate();
        out.vocab_size = std::max(out.vocab_size, p.vocab_size);
        max_docs = std::max(max_docs, p.documents.size());
    }
    for (size_t r = 0; r < max_docs; ++r) {
        for (const Corpus& p : parts) {
            if (r < p.documents.size()) out.documents.push_back(p.documents[r]);
        }
    }
    return out;
}

std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double holdout_fraction) {
    corpus.validate();
    if (!(holdout_fraction > 0.0) || !(holdout_fraction < 1.0)) {
        throw ConfigError("holdout fraction must be in (0, 1)");
    }
    const int n = static_cast<int>(corpus.documents.size());
    if (n < 2) throw InputError("cannot split a corpus of " + std::to_string(n) + " document(s)");
    const int holdout =
        std::clamp(static_cast<int>(std::lround(n * holdout_fraction)), 1, n - 1);
    Corpus head, tail;
    head.task_label = corpus.task_label;
    tail.task_label = corpus.task_label;
    head.vocab_size = corpus.vocab_size;
    tail.vocab_size = corpus.vocab_size;
    head.documents.assign(corpus.documents.begin(), corpus.documents.end() - holdout);
    tail.documents.assign(corpus.documents.end() - holdout, corpus.documents.end());
    return {std::move(head), std::move(tail)};
}

void export_gate_distribution_csv(const RoutingLog& log, const std::string& path) {
    std::ofstream out = open_out(path);
    out << "layer,rank,expert_id,share\n";
    for (int l = 0; l < log.layer_count; ++l) {
        const auto dist = normalized_gate_distribution(log, l);
        for (size_t r = 0; r < dist.size(); ++r) {
            out << l << "," << r << "," << dist[r].expert_id << "," << dist[r].share << "\n";
        }
    }
}

OverlapHeatmap overlap_heatmap(const std::vector<RoutingLog>& logs, int top_k) {
    if (logs.empty()) throw InputError("overlap heatmap needs at least one log");
    OverlapHeatmap heat;
    heat.top_k = top_k;
    const size_t t = logs.size();
    for (const RoutingLog& l : logs) heat.labels.push_back(l.task_label);
    heat.matrix.assign(t * t, 0.0);
    for (size_t i = 0; i < t; ++i) {
        for (size_t j = i; j < t; ++j) {
            const double v = shared_topk_overlap(logs[i], logs[j], top_k).mean;
            heat.matrix[i * t + j] = v;
            heat.matrix[j * t + i] = v;
        }
    }
    return heat;
}

void export_overlap_heatmap(const OverlapHeatmap& heat, const std::string& csv_path,
                            const std::string& json_path) {
    const size_t t = heat.labels.size();
    {
        std::ofstream out = open_out(csv_path);
        out << "task";
        for (const std::string& l : heat.labels) out << "," << l;
        out << "\n";
        for (size_t i = 0; i < t; ++i) {
            out << heat.labels[i];
            for (size_t j = 0; j < t; ++j) out << "," << heat.matrix[i * t + j];
            out << "\n";
        }
    }
    std::vector<std::vector<double>> rows;
    for (size_t i = 0; i < t; ++i) {
        rows.emplace_back(heat.matrix.begin() + static_cast<int64_t>(i * t),
                          heat.matrix.begin() + static_cast<int64_t>((i + 1) * t));
    }
    std::ofstream out = open_out(json_path);
    out << json{{"schema_version", 1},
                {"top_k", heat.top_k},
                {"labels", heat.labels},
                {"matrix", rows}}
               .dump(2)
        << "\n";
}

void export_experts_per_layer_csv(
    const std::vector<std::pair<std::string, ExpertSelection>>& labeled_selections,
    int n_routed_experts, const std::string& path) {
    std::ofstream out = open_out(path);
    out << "label,score_kind,p,layer,selected_count,routed_param_fraction\n";
    for (const auto& [label, sel] : labeled_selections) {
        for (size_t l = 0; l < sel.per_layer.size(); ++l) {
            const auto count = static_cast<int>(sel.per_layer[l].size());
            out << label << "," << score_kind_name(sel.score_kind) << "," << sel.p << "," << l
                << "," << count << ","
                << static_cast<double>(count) / static_cast<double>(n_routed_experts) << "\n";
        }
    }
}

std::vector<PSweepRow> p_sweep(const MoEModel& model, const ExpertRelevance& rel,
                               const std::vector<double>& ps) {
    if (ps.empty()) throw ConfigError("p sweep needs at least one threshold");
    std::vector<PSweepRow> rows;
    for (const double p : ps) {
        const ExpertSelection sel = select_experts(rel, p);
        const TrainMask mask =
            build_train_mask(model, sel, RoutedPolicy::selected, false, false);
        PSweepRow row;
        row.p = p;
        row.trainable_param_count = mask.trainable_param_count;
        row.mean_selected_experts = experts_trained_report(sel).mean_count;
        row.min_achieved_mass =
            *std::min_element(sel.achieved_mass.begin(), sel.achieved_mass.end());
        rows.push_back(row);
    }
    return rows;
}

void export_p_sweep_csv(const std::vector<PSweepRow>& rows, const std::string& path) {
    std::ofstream out = open_out(path);
    out << "p,trainable_param_count,mean_selected_experts,min_achieved_mass\n";
    for (const PSweepRow& r : rows) {
        out << r.p << "," << r.trainable_param_count << "," << r.mean_selected_experts << ","
            << r.min_achieved_mass << "\n";
    }
}

void export_eval_summary(const std::vector<EvalSummaryRow>& rows, const std::string& csv_path,
                         const std::string& json_path) {
    {
        std::ofstream out = open_out(csv_path);
        out << "task,method,seed,trainable_param_count,task_loss_initial,task_loss_final,"
               "general_loss_final,forgetting_kl,delta_general_loss\n";
        for (const EvalSummaryRow& r : rows) {
            out << r.task << "," << r.method << "," << r.seed << "," << r.trainable_param_count
                << "," << r.task_loss_initial << "," << r.task_loss_final << ","
                << r.general_loss_final << "," << r.forgetting_kl << "," << r.delta_general_loss
                << "\n";
        }
    }
    json jrows = json::array();
    for (const EvalSummaryRow& r : rows) {
        jrows.push_back({{"task", r.task},
                         {"method", r.method},
                         {"seed", r.seed},
                         {"trainable_param_count", r.trainable_param_count},
                         {"task_loss_initial", r.task_loss_initial},
                         {"task_loss_final", r.task_loss_final},
                         {"general_loss_final", r.general_loss_final},
                         {"forgetting_kl", r.forgetting_kl},
                         {"delta_general_loss", r.delta_general_loss}});
    }
    std::ofstream out = open_out(json_path);
    out << json{{"schema_version", 1}, {"rows", jrows}}.dump(2) << "\n";
}

void run_experiment(const ExperimentManifest& m, std::ostream* log) {
    m.validate();
    const fs::path out(m.out_dir);
    for (const char* sub : {"corpora", "vanilla", "probe", "select", "train", "eval", "figures"}) {
        fs::create_directories(out / sub);
    }
    const auto say = [&](const std::string& s) {
        if (log) *log << s << std::endl;
    };

    const size_t n_tasks = m.tasks.size();
    std::vector<Corpus> train_c(n_tasks), probe_c(n_tasks);
    Corpus alignment, general;
    bool corpora_ready = false;
    std::optional<MoEModel> vanilla;
    std::map<std::string, RoutingLog> task_logs;
    std::map<std::string, ExpertSelection> selections; // "<task>/<kind>"

    const auto load_tokens = [&](const fs::path& p, const std::string& label, int vocab,
                                 const char* producer) {
        if (!fs::exists(p)) {
            throw InputError(p.string() + " is missing; run the " + producer + " stage first");
        }
        // Saved corpora are token arrays, so the tokenizer never fires;
        // whitespace mode carries no vocab floor.
        Corpus c = ingest(p.string(), "jsonl", "whitespace", vocab);
        c.task_label = label;
        return c;
    };
    const auto ensure_corpora = [&]() {
        if (corpora_ready) return;
        for (size_t i = 0; i < n_tasks; ++i) {
            const std::string& name = m.tasks[i].name;
            const int vocab = m.tasks[i].vocab_size;
            train_c[i] = load_tokens(out / "corpora" / (name + "_train.jsonl"), name, vocab, "gen");
            probe_c[i] = load_tokens(out / "corpora" / (name + "_probe.jsonl"), name, vocab, "gen");
        }
        alignment =
            load_tokens(out / "corpora/alignment.jsonl", "alignment", m.model.vocab_size, "gen");
        general = load_tokens(out / "corpora/general_probe.jsonl", "general_probe",
                              m.model.vocab_size, "gen");
        corpora_ready = true;
    };
    const auto ensure_vanilla = [&]() {
        if (vanilla.has_value()) return;
        const fs::path p = m.vanilla_checkpoint.empty() ? out / "vanilla/model.ckpt"
                                                        : fs::path(m.vanilla_checkpoint);
        if (!fs::exists(p)) {
            throw InputError(p.string() +
                             " is missing; run the pretrain stage first or set vanilla_checkpoint");
        }
        vanilla.emplace(load_checkpoint(p.string()));
        if (!same_structure(vanilla->config(), m.model)) {
            throw InputError("checkpoint " + p.string() + " disagrees with the manifest model config");
        }
    };
    const auto ensure_log = [&](size_t i) -> const RoutingLog& {
        const std::string& name = m.tasks[i].name;
        auto it = task_logs.find(name);
        if (it != task_logs.end()) return it->second;
        const fs::path p = out / "probe" / (name + ".jsonl");
        if (!fs::exists(p)) {
            throw InputError(p.string() + " is missing; run the probe stage first");
        }
        return task_logs.emplace(name, load_routing_log(p.string())).first->second;
    };
    const auto ensure_selection = [&](const std::string& task, ScoreKind kind) {
        const std::string key = task + "/" + score_kind_name(kind);
        auto it = selections.find(key);
        if (it != selections.end()) return it->second;
        const std::string suffix = kind == ScoreKind::average_gate ? "_gate.json" : "_token.json";
        const fs::path p = out / "select" / (task + suffix);
        if (!fs::exists(p)) {
            throw InputError(p.string() + " is missing; run the select stage first");
        }
        return selections.emplace(key, load_selection(p.string())).first->second;
    };
    const auto stage = [&](const char* name, bool enabled, auto&& fn) {
        if (!enabled) {
            say(std::string("stage ") + name + ": skipped");
            return;
        }
        say(std::string("stage ") + name + ": running");
        try {
            fn();
        } catch (const std::exception& e) {
            throw InputError(std::string("stage ") + name + " failed: " + e.what());
        }
    };
    const auto probe_windows = [&](const Corpus& c) {
        return chunk_corpus(c, m.train.seq_len + 1);
    };

    stage("gen", m.stages.gen, [&]() {
        for (size_t i = 0; i < n_tasks; ++i) {
            const Corpus full = gen_task(m.tasks[i]);
            auto [head, tail] = split_corpus(full, m.holdout_fraction);
            save_corpus(head, (out / "corpora" / (m.tasks[i].name + "_train.jsonl")).string());
            save_corpus(tail, (out / "corpora" / (m.tasks[i].name + "_probe.jsonl")).string());
            say("  task " + m.tasks[i].name + ": " + std::to_string(head.documents.size()) +
                " train docs, " + std::to_string(tail.documents.size()) + " probe docs");
            train_c[i] = std::move(head);
            probe_c[i] = std::move(tail);
        }
        alignment = blend_corpora(train_c, "alignment");
        general = blend_corpora(probe_c, "general_probe");
        save_corpus(alignment, (out / "corpora/alignment.jsonl").string());
        save_corpus(general, (out / "corpora/general_probe.jsonl").string());
        corpora_ready = true;
    });

    stage("pretrain", m.stages.pretrain, [&]() {
        ensure_corpora();
        MoEModel model(m.model);
        const TrainMask fft_mask =
            build_train_mask(model, std::nullopt, RoutedPolicy::all, true, true);
        const MixedSchedule sched =
            mix_datasets(alignment, alignment, {1, 0}, m.train.seq_len, m.seeds[0]);
        EvalSuite ev;
        ev.task_probe = probe_windows(general);
        TrainConfig tc;
        tc.method = Method::fft;
        tc.learning_rate = m.train.pretrain_learning_rate;
        tc.batch_size = m.train.batch_size;
        tc.seq_len = m.train.seq_len;
        tc.max_steps = m.train.pretrain_steps;
        tc.eval_every = m.train.eval_every;
        tc.seed = m.seeds[0];
        const TrainReport report = train(model, fft_mask, sched, ev, tc);
        save_train_report(report, (out / "vanilla/pretrain_report.jsonl").string());
        save_checkpoint(model, (out / "vanilla/model.ckpt").string());
        say("  pretrain loss " + std::to_string(report.evals.front().task_loss) + " -> " +
            std::to_string(report.evals.back().task_loss));
        vanilla.emplace(std::move(model));
    });

    stage("probe", m.stages.probe, [&]() {
        ensure_corpora();
        ensure_vanilla();
        std::vector<RoutingLog> logs;
        json split_half{{"schema_version", 1}, {"top_k", m.probe.overlap_top_k}};
        for (size_t i = 0; i < n_tasks; ++i) {
            const std::string& name = m.tasks[i].name;
            const Corpus subset =
                sample_selection_subset(train_c[i], m.probe.n_selection_samples,
                                        m.probe.selection_seq_len,
                                        m.seeds[0] + static_cast<int64_t>(i));
            RoutingLog lg = collect_routing(*vanilla, subset);
            save_routing_log(lg, (out / "probe" / (name + ".jsonl")).string());
            export_gate_distribution_csv(
                lg, (out / "figures" / ("gate_distribution_" + name + ".csv")).string());
            Corpus h1, h2;
            h1.task_label = name + "#half1";
            h2.task_label = name + "#half2";
            h1.vocab_size = h2.vocab_size = subset.vocab_size;
            const size_t mid = subset.documents.size() / 2;
            h1.documents.assign(subset.documents.begin(), subset.documents.begin() + mid);
            h2.documents.assign(subset.documents.begin() + mid, subset.documents.end());
            const double half_overlap =
                shared_topk_overlap(collect_routing(*vanilla, h1), collect_routing(*vanilla, h2),
                                    m.probe.overlap_top_k)
                    .mean;
            split_half["tasks"][name] = half_overlap;
            const SimilarityMatrix sim = cooccurrence_similarity(lg);
            std::vector<std::vector<double>> rows;
            for (int r = 0; r < sim.n; ++r) {
                rows.emplace_back(sim.values.begin() + static_cast<int64_t>(r) * sim.n,
                                  sim.values.begin() + static_cast<int64_t>(r + 1) * sim.n);
            }
            std::ofstream sf = open_out(out / "probe" / ("similarity_" + name + ".json"));
            sf << json{{"schema_version", 1}, {"task", name}, {"matrix", rows}}.dump(2) << "\n";
            say("  task " + name + ": " + std::to_string(lg.token_count()) +
                " tokens logged, split-half overlap " + std::to_string(half_overlap));
            logs.push_back(std::move(lg));
            task_logs.emplace(name, logs.back());
        }
        const OverlapHeatmap heat = overlap_heatmap(logs, m.probe.overlap_top_k);
        export_overlap_heatmap(heat, (out / "figures/overlap_heatmap.csv").string(),
                               (out / "figures/overlap_heatmap.json").string());
        std::ofstream sh = open_out(out / "probe/split_half_overlap.json");
        sh << split_half.dump(2) << "\n";
    });

    stage("select", m.stages.select, [&]() {
        ensure_vanilla();
        std::vector<std::pair<std::string, ExpertSelection>> labeled;
        for (size_t i = 0; i < n_tasks; ++i) {
            const std::string& name = m.tasks[i].name;
            const RoutingLog& lg = ensure_log(i);
            const ExpertSelection sel_token =
                select_experts(token_selection_ratio(lg, m.model.top_k), m.train.p_token);
            const ExpertSelection sel_gate =
                select_experts(average_gate_score(lg), m.train.p_gate);
            save_selection(sel_token, (out / "select" / (name + "_token.json")).string());
            save_selection(sel_gate, (out / "select" / (name + "_gate.json")).string());
            save_train_mask(
                build_train_mask(*vanilla, sel_token, RoutedPolicy::selected, false, false),
                (out / "select" / (name + "_token_mask.json")).string());
            save_train_mask(
                build_train_mask(*vanilla, sel_gate, RoutedPolicy::selected, false, false),
                (out / "select" / (name + "_gate_mask.json")).string());
            labeled.emplace_back(name + "/token", sel_token);
            labeled.emplace_back(name + "/gate", sel_gate);
            selections[name + "/token_selection_ratio"] = sel_token;
            selections[name + "/average_gate"] = sel_gate;
            say("  task " + name + ": token counts per layer " +
                std::to_string(experts_trained_report(sel_token).mean_count) + " mean, gate " +
                std::to_string(experts_trained_report(sel_gate).mean_count) + " mean");
        }
        export_experts_per_layer_csv(labeled, m.model.n_routed_experts,
                                     (out / "figures/experts_per_layer.csv").string());
        const ExpertRelevance sweep_rel =
            token_selection_ratio(ensure_log(0), m.model.top_k);
        export_p_sweep_csv(
            p_sweep(*vanilla, sweep_rel, {0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0}),
            (out / "figures/tradeoff_p_sweep.csv").string());
    });

    stage("train", m.stages.train, [&]() {
        ensure_corpora();
        ensure_vanilla();
        std::vector<std::string> to_train = m.train_tasks;
        if (to_train.empty()) {
            for (const TaskSpec& t : m.tasks) to_train.push_back(t.name);
        }
        for (const std::string& name : to_train) {
            const size_t i = static_cast<size_t>(
                std::find_if(m.tasks.begin(), m.tasks.end(),
                             [&](const TaskSpec& t) { return t.name == name; }) -
                m.tasks.begin());
            EvalSuite ev;
            ev.task_probe = probe_windows(probe_c[i]);
            ev.alignment_probe = probe_windows(general);
            ev.general_probe = ev.alignment_probe;
            for (const Method method : m.methods) {
                for (const int64_t seed : m.seeds) {
                    MoEModel model = vanilla->clone();
                    TrainConfig tc;
                    tc.method = method;
                    tc.learning_rate = m.train.learning_rate;
                    tc.batch_size = m.train.batch_size;
                    tc.seq_len = m.train.seq_len;
                    tc.max_steps = m.train.train_steps;
                    tc.eval_every = m.train.eval_every;
                    tc.p = method == Method::esft_gate ? m.train.p_gate : m.train.p_token;
                    tc.lora_rank = m.train.lora_rank;
                    tc.lora_scaling = m.train.lora_scaling;
                    tc.mix_alignment = m.train.mix_alignment;
                    tc.seed = seed;
                    TrainMask mask;
                    switch (method) {
                        case Method::fft:
                            mask = build_train_mask(model, std::nullopt, RoutedPolicy::all, true,
                                                    true);
                            break;
                        case Method::lora: {
                            Rng lrng(static_cast<uint64_t>(seed) ^ kLoraAttachSeedSalt);
                            model.attach_lora(tc.lora_rank, tc.lora_scaling, lrng);
                            mask = build_train_mask(model, std::nullopt, RoutedPolicy::none, false,
                                                    false);
                            break;
                        }
                        case Method::esft_token:
                            mask = build_train_mask(
                                model, ensure_selection(name, ScoreKind::token_selection_ratio),
                                RoutedPolicy::selected, false, false);
                            break;
                        case Method::esft_gate:
                            mask = build_train_mask(
                                model, ensure_selection(name, ScoreKind::average_gate),
                                RoutedPolicy::selected, false, false);
                            break;
                    }
                    const MixedSchedule sched =
                        mix_datasets(train_c[i], alignment,
                                     tc.mix_alignment ? std::pair<int, int>{1, 1}
                                                      : std::pair<int, int>{1, 0},
                                     tc.seq_len, seed);
                    const TrainReport report = train(model, mask, sched, ev, tc);
                    const std::string tag = run_tag(name, method, seed);
                    save_train_report(report, (out / "train" / (tag + ".jsonl")).string());
                    save_checkpoint(model, (out / "train" / (tag + ".ckpt")).string());
                    say("  " + tag + ": task loss " +
                        std::to_string(report.evals.front().task_loss) + " -> " +
                        std::to_string(report.evals.back().task_loss) + ", trainable " +
                        std::to_string(report.trainable_param_count));
                }
            }
        }
    });

    stage("eval", m.stages.eval, [&]() {
        ensure_corpora();
        ensure_vanilla();
        Corpus forget_probe;
        forget_probe.task_label = "general_probe";
        forget_probe.vocab_size = general.vocab_size;
        forget_probe.documents = probe_windows(general);
        std::vector<std::string> to_eval = m.train_tasks;
        if (to_eval.empty()) {
            for (const TaskSpec& t : m.tasks) to_eval.push_back(t.name);
        }
        std::vector<EvalSummaryRow> rows;
        for (const std::string& name : to_eval) {
            for (const Method method : m.methods) {
                for (const int64_t seed : m.seeds) {
                    const std::string tag = run_tag(name, method, seed);
                    const fs::path ckpt = out / "train" / (tag + ".ckpt");
                    const fs::path rep_path = out / "train" / (tag + ".jsonl");
                    if (!fs::exists(ckpt) || !fs::exists(rep_path)) {
                        throw InputError(ckpt.string() +
                                         " is missing; run the train stage first");
                    }
                    const MoEModel trained = load_checkpoint(ckpt.string());
                    const TrainReport report = load_train_report(rep_path.string());
                    const ForgettingReport fr =
                        evaluate_forgetting(*vanilla, trained, forget_probe);
                    EvalSummaryRow row;
                    row.task = name;
                    row.method = method_name(method);
                    row.seed = seed;
                    row.trainable_param_count = report.trainable_param_count;
                    row.task_loss_initial = report.evals.front().task_loss;
                    row.task_loss_final = report.evals.back().task_loss;
                    row.general_loss_final = fr.loss_after;
                    row.forgetting_kl = fr.mean_kl;
                    row.delta_general_loss = fr.delta_loss;
                    rows.push_back(row);
                    say("  " + tag + ": forgetting KL " + std::to_string(fr.mean_kl));
                }
            }
        }
        export_eval_summary(rows, (out / "eval/summary.csv").string(),
                            (out / "eval/summary.json").string());
    });

    say("experiment complete: " + out.string());
}

} // namespace esft
