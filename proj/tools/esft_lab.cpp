// SPDX-License-Identifier: Apache-2.0
//
// esft_lab: command-line workbench around the library. Subcommands cover the
// whole pipeline piecewise (gen, ingest, pretrain, probe, select, train,
// eval, export, sweep) and as one orchestrated run from a JSON manifest
// (run). Every command is deterministic under its seed flags.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "esft/checkpoint.hpp"
#include "esft/config_json.hpp"
#include "esft/experiment.hpp"
#include "esft/probes.hpp"
#include "esft/rng.hpp"
#include "esft/select.hpp"
#include "esft/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw esft::InputError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

// Saved corpora hold token arrays, so the tokenizer choice never fires.
esft::Corpus load_corpus(const std::string& path, int vocab, const std::string& label = "") {
    esft::Corpus c = esft::ingest(path, "jsonl", "whitespace", vocab);
    c.task_label = label.empty() ? stem_of(path) : label;
    return c;
}

esft::ScoreKind score_from_flag(const std::string& s) {
    if (s == "token") return esft::ScoreKind::token_selection_ratio;
    if (s == "gate") return esft::ScoreKind::average_gate;
    throw esft::ConfigError("score must be 'token' or 'gate', got '" + s + "'");
}

esft::ExpertRelevance relevance_for(const esft::RoutingLog& log, esft::ScoreKind kind) {
    return kind == esft::ScoreKind::average_gate ? esft::average_gate_score(log)
                                                 : esft::token_selection_ratio(log, log.top_k);
}

void write_json(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw esft::InputError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

struct GenArgs {
    std::string specs_path;
    std::string out_dir;
    double holdout = 0.0;
};

void cmd_gen(const GenArgs& a) {
    const std::vector<esft::TaskSpec> specs = esft::task_specs_from_json_text(slurp(a.specs_path));
    const std::vector<esft::Corpus> corpora = esft::gen_tasks(specs);
    fs::create_directories(a.out_dir);
    for (const esft::Corpus& c : corpora) {
        const fs::path base = fs::path(a.out_dir);
        if (a.holdout > 0.0) {
            const auto [head, tail] = esft::split_corpus(c, a.holdout);
            esft::save_corpus(head, (base / (c.task_label + "_train.jsonl")).string());
            esft::save_corpus(tail, (base / (c.task_label + "_probe.jsonl")).string());
            std::cout << c.task_label << ": " << head.documents.size() << " train + "
                      << tail.documents.size() << " probe docs, " << c.token_count()
                      << " tokens\n";
        } else {
            esft::save_corpus(c, (base / (c.task_label + ".jsonl")).string());
            std::cout << c.task_label << ": " << c.documents.size() << " docs, "
                      << c.token_count() << " tokens\n";
        }
    }
}

struct IngestArgs {
    std::string input;
    std::string format = "jsonl";
    std::string tokenizer = "byte";
    int vocab = 256;
    std::string label;
    std::string out;
};

void cmd_ingest(const IngestArgs& a) {
    esft::Corpus c = esft::ingest(a.input, a.format, a.tokenizer, a.vocab);
    if (!a.label.empty()) c.task_label = a.label;
    esft::save_corpus(c, a.out);
    std::cout << c.task_label << ": " << c.documents.size() << " docs, " << c.token_count()
              << " tokens, vocab " << c.vocab_size << "\n";
}

struct PretrainArgs {
    std::string model_config;
    std::vector<std::string> corpora;
    int steps = 0;
    double lr = 1e-3;
    int batch = 4;
    int seq_len = 0;
    int eval_every = 0;
    int64_t seed = 0;
    std::string out_dir;
};

void cmd_pretrain(const PretrainArgs& a) {
    json cfg_json;
    try {
        cfg_json = json::parse(slurp(a.model_config));
    } catch (const json::exception& e) {
        throw esft::InputError(std::string("model config is not valid JSON: ") + e.what());
    }
    const esft::MoEModelConfig cfg = esft::config_from_json(cfg_json);
    esft::MoEModel model(cfg);

    std::vector<esft::Corpus> parts;
    for (const std::string& p : a.corpora) parts.push_back(load_corpus(p, cfg.vocab_size));
    const esft::Corpus blend = esft::blend_corpora(parts, "pretrain_blend");

    esft::TrainConfig tc;
    tc.method = esft::Method::fft;
    tc.learning_rate = a.lr;
    tc.batch_size = a.batch;
    tc.seq_len = a.seq_len;
    tc.max_steps = a.steps;
    tc.eval_every = a.eval_every > 0 ? a.eval_every : a.steps;
    tc.seed = a.seed;
    tc.validate();

    const esft::MixedSchedule sched = esft::mix_datasets(blend, blend, {1, 0}, a.seq_len, a.seed);
    esft::EvalSuite suite;
    suite.task_probe = esft::chunk_corpus(blend, a.seq_len + 1);
    const esft::TrainMask mask =
        esft::build_train_mask(model, std::nullopt, esft::RoutedPolicy::all, true, true);
    const esft::TrainReport report = esft::train(model, mask, sched, suite, tc);

    fs::create_directories(a.out_dir);
    esft::save_checkpoint(model, (fs::path(a.out_dir) / "model.ckpt").string());
    esft::save_train_report(report, (fs::path(a.out_dir) / "pretrain_report.jsonl").string());
    std::cout << "pretrained " << report.steps << " steps, final task loss "
              << report.evals.back().task_loss << ", params " << model.total_param_count()
              << "\n";
}

struct ProbeArgs {
    std::string checkpoint;
    std::string corpus;
    int samples = 0;
    int seq_len = 0;
    int64_t seed = 0;
    bool retain_affinities = false;
    std::string out;
};

void cmd_probe(const ProbeArgs& a) {
    const esft::MoEModel model = esft::load_checkpoint(a.checkpoint);
    const esft::Corpus corpus = load_corpus(a.corpus, model.config().vocab_size);
    const esft::Corpus subset =
        esft::sample_selection_subset(corpus, a.samples, a.seq_len, a.seed);
    const esft::RoutingLog log = esft::collect_routing(model, subset, a.retain_affinities);
    esft::save_routing_log(log, a.out);
    std::cout << "probed " << log.sample_count() << " samples, " << log.token_count()
              << " tokens across " << log.layer_count << " layers\n";
}

struct SelectArgs {
    std::string log_path;
    std::string score = "token";
    double p = -1.0; // sentinel: default depends on score kind
    std::string out;
    std::string checkpoint;
    std::string mask_out;
    bool shared = false;
    bool non_expert = false;
};

void cmd_select(const SelectArgs& a) {
    const esft::RoutingLog log = esft::load_routing_log(a.log_path);
    const esft::ScoreKind kind = score_from_flag(a.score);
    const double p = a.p > 0.0 ? a.p : (kind == esft::ScoreKind::average_gate ? 0.1 : 0.2);
    const esft::ExpertSelection sel = esft::select_experts(relevance_for(log, kind), p);
    esft::save_selection(sel, a.out);
    const esft::ExpertsTrainedReport rep = esft::experts_trained_report(sel);
    std::cout << "selected mean " << rep.mean_count << " experts/layer at p=" << p << " (";
    for (size_t l = 0; l < sel.per_layer.size(); ++l) {
        std::cout << (l ? " " : "") << sel.per_layer[l].size();
    }
    std::cout << ")\n";

    if (!a.mask_out.empty()) {
        if (a.checkpoint.empty()) {
            throw esft::ConfigError("--mask-out needs --checkpoint to resolve parameter groups");
        }
        const esft::MoEModel model = esft::load_checkpoint(a.checkpoint);
        const esft::TrainMask mask = esft::build_train_mask(
            model, sel, esft::RoutedPolicy::selected, a.shared, a.non_expert);
        esft::save_train_mask(mask, a.mask_out);
        std::cout << "mask: " << mask.trainable_param_count << " of "
                  << model.total_param_count() << " params trainable\n";
    }
}

struct TrainArgs {
    std::string checkpoint;
    std::string method = "esft_token";
    std::string task_corpus;
    std::string alignment_corpus;
    std::string selection;
    std::string task_probe;
    std::string general_probe;
    int steps = 0;
    double lr = 1e-3;
    int batch = 1;
    int seq_len = 0;
    int eval_every = 0;
    int64_t seed = 0;
    int ratio_task = 1;
    int ratio_align = 1;
    int lora_rank = 8;
    double lora_scaling = 2.0;
    std::string out_dir;
};

void cmd_train(const TrainArgs& a) {
    esft::MoEModel model = esft::load_checkpoint(a.checkpoint);
    const int vocab = model.config().vocab_size;
    const esft::Method method = esft::method_from_name(a.method);

    esft::TrainMask mask;
    if (method == esft::Method::fft) {
        mask = esft::build_train_mask(model, std::nullopt, esft::RoutedPolicy::all, true, true);
    } else if (method == esft::Method::lora) {
        esft::Rng lrng(static_cast<uint64_t>(a.seed) ^ esft::kLoraAttachSeedSalt);
        model.attach_lora(a.lora_rank, a.lora_scaling, lrng);
        mask = esft::build_train_mask(model, std::nullopt, esft::RoutedPolicy::none, false, false);
    } else {
        if (a.selection.empty()) {
            throw esft::ConfigError("method " + a.method + " needs --selection");
        }
        const esft::ExpertSelection sel = esft::load_selection(a.selection);
        const esft::ScoreKind wanted = method == esft::Method::esft_gate
                                           ? esft::ScoreKind::average_gate
                                           : esft::ScoreKind::token_selection_ratio;
        if (sel.score_kind != wanted) {
            throw esft::ConfigError("selection was computed with score kind '" +
                                    esft::score_kind_name(sel.score_kind) + "' but method " +
                                    a.method + " expects '" + esft::score_kind_name(wanted) +
                                    "'");
        }
        mask = esft::build_train_mask(model, sel, esft::RoutedPolicy::selected, false, false);
    }

    const esft::Corpus task = load_corpus(a.task_corpus, vocab);
    const bool mix = !a.alignment_corpus.empty() && a.ratio_align > 0;
    esft::Corpus alignment;
    if (!a.alignment_corpus.empty()) alignment = load_corpus(a.alignment_corpus, vocab);
    const esft::MixedSchedule sched =
        esft::mix_datasets(task, mix ? alignment : task,
                           mix ? std::make_pair(a.ratio_task, a.ratio_align)
                               : std::make_pair(1, 0),
                           a.seq_len, a.seed);

    esft::EvalSuite suite;
    suite.task_probe = esft::chunk_corpus(
        a.task_probe.empty() ? task : load_corpus(a.task_probe, vocab), a.seq_len + 1);
    if (!a.alignment_corpus.empty()) {
        suite.alignment_probe = esft::chunk_corpus(alignment, a.seq_len + 1);
    }
    if (!a.general_probe.empty()) {
        suite.general_probe = esft::chunk_corpus(load_corpus(a.general_probe, vocab),
                                                 a.seq_len + 1);
    } else if (!a.alignment_corpus.empty()) {
        suite.general_probe = suite.alignment_probe;
    }

    esft::TrainConfig tc;
    tc.method = method;
    tc.learning_rate = a.lr;
    tc.batch_size = a.batch;
    tc.seq_len = a.seq_len;
    tc.max_steps = a.steps;
    tc.eval_every = a.eval_every > 0 ? a.eval_every : a.steps;
    tc.lora_rank = a.lora_rank;
    tc.lora_scaling = a.lora_scaling;
    tc.mix_alignment = mix;
    tc.seed = a.seed;
    tc.validate();

    const esft::TrainReport report = esft::train(model, mask, sched, suite, tc);
    fs::create_directories(a.out_dir);
    esft::save_checkpoint(model, (fs::path(a.out_dir) / "model.ckpt").string());
    esft::save_train_report(report, (fs::path(a.out_dir) / "train_report.jsonl").string());
    std::cout << a.method << ": " << report.steps << " steps, "
              << report.trainable_param_count << " trainable params, final task loss "
              << report.evals.back().task_loss << "\n";
}

struct EvalArgs {
    std::string before;
    std::string after;
    std::string probe;
    std::string out;
};

void cmd_eval(const EvalArgs& a) {
    const esft::MoEModel before = esft::load_checkpoint(a.before);
    const esft::MoEModel after = esft::load_checkpoint(a.after);
    const esft::Corpus probe = load_corpus(a.probe, before.config().vocab_size);
    const esft::ForgettingReport rep = esft::evaluate_forgetting(before, after, probe);
    const json j{{"schema_version", 1},
                 {"mean_kl", rep.mean_kl},
                 {"loss_before", rep.loss_before},
                 {"loss_after", rep.loss_after},
                 {"delta_loss", rep.delta_loss}};
    if (a.out.empty()) {
        std::cout << j.dump(2) << "\n";
    } else {
        write_json(j, a.out);
        std::cout << "mean_kl " << rep.mean_kl << ", delta_loss " << rep.delta_loss << "\n";
    }
}

struct SweepArgs {
    std::string log_path;
    std::string checkpoint;
    std::string score = "token";
    std::vector<double> ps;
    std::string out;
};

void run_p_sweep(const SweepArgs& a) {
    const esft::RoutingLog log = esft::load_routing_log(a.log_path);
    const esft::MoEModel model = esft::load_checkpoint(a.checkpoint);
    const std::vector<double> ps =
        a.ps.empty() ? std::vector<double>{0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0} : a.ps;
    const auto rows = esft::p_sweep(model, relevance_for(log, score_from_flag(a.score)), ps);
    esft::export_p_sweep_csv(rows, a.out);
    std::cout << "swept " << rows.size() << " thresholds -> " << a.out << "\n";
}

struct ExportArgs {
    std::string kind;
    std::vector<std::string> logs;
    std::vector<std::string> selections;
    std::string checkpoint;
    std::string score = "token";
    std::vector<double> ps;
    int top_k = 6;
    int n_experts = 0;
    std::string out;
    std::string out_json;
};

void cmd_export(const ExportArgs& a) {
    const auto need = [&](bool ok, const std::string& what) {
        if (!ok) throw esft::ConfigError("export " + a.kind + " needs " + what);
    };
    if (a.kind == "gate_distribution") {
        need(a.logs.size() == 1, "exactly one --log");
        need(!a.out.empty(), "--out");
        esft::export_gate_distribution_csv(esft::load_routing_log(a.logs[0]), a.out);
    } else if (a.kind == "overlap_heatmap") {
        need(!a.logs.empty(), "at least one --log");
        need(!a.out.empty() && !a.out_json.empty(), "--out and --out-json");
        std::vector<esft::RoutingLog> logs;
        for (const std::string& p : a.logs) logs.push_back(esft::load_routing_log(p));
        esft::export_overlap_heatmap(esft::overlap_heatmap(logs, a.top_k), a.out, a.out_json);
    } else if (a.kind == "experts_per_layer") {
        need(!a.selections.empty(), "at least one --selection");
        need(a.n_experts > 0, "--n-experts");
        need(!a.out.empty(), "--out");
        std::vector<std::pair<std::string, esft::ExpertSelection>> labeled;
        for (const std::string& p : a.selections) {
            labeled.push_back({stem_of(p), esft::load_selection(p)});
        }
        esft::export_experts_per_layer_csv(labeled, a.n_experts, a.out);
    } else if (a.kind == "tradeoff_curve") {
        need(a.logs.size() == 1, "exactly one --log");
        need(!a.checkpoint.empty(), "--checkpoint");
        need(!a.out.empty(), "--out");
        SweepArgs s;
        s.log_path = a.logs[0];
        s.checkpoint = a.checkpoint;
        s.score = a.score;
        s.ps = a.ps;
        s.out = a.out;
        run_p_sweep(s);
        return;
    } else {
        throw esft::ConfigError(
            "unknown export kind '" + a.kind +
            "', expected gate_distribution, overlap_heatmap, experts_per_layer, or "
            "tradeoff_curve");
    }
    std::cout << "wrote " << a.out << "\n";
}

struct RunArgs {
    std::string manifest;
    bool quiet = false;
};

void cmd_run(const RunArgs& a) {
    const esft::ExperimentManifest m = esft::manifest_from_json_text(slurp(a.manifest));
    esft::run_experiment(m, a.quiet ? nullptr : &std::cout);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale laboratory for expert-specialized fine-tuning of MoE transformers"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* cgen = app.add_subcommand("gen", "Generate synthetic task corpora from a spec file");
    cgen->add_option("--specs", gen.specs_path, "JSON array of task specs")->required();
    cgen->add_option("--out-dir", gen.out_dir, "Directory for <task>.jsonl files")->required();
    cgen->add_option("--holdout", gen.holdout,
                     "Trailing document fraction split into <task>_probe.jsonl (0 = no split)");
    cgen->callback([&] { cmd_gen(gen); });

    IngestArgs ing;
    auto* cing = app.add_subcommand("ingest", "Tokenize a text or jsonl file into a corpus");
    cing->add_option("--input", ing.input, "Source file")->required();
    cing->add_option("--format", ing.format, "jsonl or plain")->default_val("jsonl");
    cing->add_option("--tokenizer", ing.tokenizer, "byte or whitespace")->default_val("byte");
    cing->add_option("--vocab", ing.vocab, "Vocabulary size")->default_val(256);
    cing->add_option("--label", ing.label, "Task label (default: input stem)");
    cing->add_option("--out", ing.out, "Output corpus jsonl")->required();
    cing->callback([&] { cmd_ingest(ing); });

    PretrainArgs pre;
    auto* cpre = app.add_subcommand("pretrain", "Train a fresh model on blended corpora");
    cpre->add_option("--model", pre.model_config, "Model config JSON file")->required();
    cpre->add_option("--corpus", pre.corpora, "Corpus jsonl (repeatable, round-robin blend)")
        ->required();
    cpre->add_option("--steps", pre.steps, "Optimizer steps")->required();
    cpre->add_option("--lr", pre.lr, "Learning rate")->default_val(1e-3);
    cpre->add_option("--batch", pre.batch, "Sequences per step")->default_val(4);
    cpre->add_option("--seq-len", pre.seq_len, "Training sequence length")->required();
    cpre->add_option("--eval-every", pre.eval_every, "Eval interval (default: steps)");
    cpre->add_option("--seed", pre.seed, "Seed")->default_val(0);
    cpre->add_option("--out-dir", pre.out_dir, "Writes model.ckpt + pretrain_report.jsonl")
        ->required();
    cpre->callback([&] { cmd_pretrain(pre); });

    ProbeArgs prb;
    auto* cprb = app.add_subcommand("probe", "Collect per-token routing over a sampled subset");
    cprb->add_option("--checkpoint", prb.checkpoint, "Model checkpoint")->required();
    cprb->add_option("--corpus", prb.corpus, "Corpus jsonl")->required();
    cprb->add_option("--samples", prb.samples, "Sequences to sample")->required();
    cprb->add_option("--seq-len", prb.seq_len, "Tokens per sampled sequence")->required();
    cprb->add_option("--seed", prb.seed, "Subset seed")->default_val(0);
    cprb->add_flag("--retain-affinities", prb.retain_affinities,
                   "Also store full softmax affinity rows");
    cprb->add_option("--out", prb.out, "Routing log jsonl")->required();
    cprb->callback([&] { cmd_probe(prb); });

    SelectArgs sel;
    auto* csel = app.add_subcommand("select", "Pick experts by cumulative relevance threshold");
    csel->add_option("--log", sel.log_path, "Routing log jsonl")->required();
    csel->add_option("--score", sel.score, "token (selection ratio) or gate (average score)")
        ->default_val("token");
    csel->add_option("--p", sel.p, "Cumulative threshold (default 0.2 token, 0.1 gate)");
    csel->add_option("--out", sel.out, "Selection JSON")->required();
    csel->add_option("--checkpoint", sel.checkpoint, "Model checkpoint (for --mask-out)");
    csel->add_option("--mask-out", sel.mask_out, "Also resolve and save a train mask");
    csel->add_flag("--shared", sel.shared, "Mark shared experts trainable in the mask");
    csel->add_flag("--non-expert", sel.non_expert,
                   "Mark attention/embeddings/norms/gates trainable in the mask");
    csel->callback([&] { cmd_select(sel); });

    TrainArgs trn;
    auto* ctrn = app.add_subcommand("train", "Fine-tune a checkpoint with a chosen method");
    ctrn->add_option("--checkpoint", trn.checkpoint, "Starting checkpoint")->required();
    ctrn->add_option("--method", trn.method, "fft, lora, esft_token, or esft_gate")
        ->default_val("esft_token");
    ctrn->add_option("--task-corpus", trn.task_corpus, "Task training corpus")->required();
    ctrn->add_option("--alignment-corpus", trn.alignment_corpus,
                     "Alignment corpus mixed into batches and used as probe");
    ctrn->add_option("--selection", trn.selection, "Expert selection JSON (esft methods)");
    ctrn->add_option("--task-probe", trn.task_probe, "Task eval corpus (default: task corpus)");
    ctrn->add_option("--general-probe", trn.general_probe,
                     "General eval corpus (default: alignment corpus)");
    ctrn->add_option("--steps", trn.steps, "Optimizer steps")->required();
    ctrn->add_option("--lr", trn.lr, "Learning rate")->default_val(1e-3);
    ctrn->add_option("--batch", trn.batch, "Sequences per step")->default_val(1);
    ctrn->add_option("--seq-len", trn.seq_len, "Training sequence length")->required();
    ctrn->add_option("--eval-every", trn.eval_every, "Eval interval (default: steps)");
    ctrn->add_option("--seed", trn.seed, "Seed")->default_val(0);
    ctrn->add_option("--ratio-task", trn.ratio_task, "Task batches per cycle")->default_val(1);
    ctrn->add_option("--ratio-align", trn.ratio_align, "Alignment batches per cycle")
        ->default_val(1);
    ctrn->add_option("--lora-rank", trn.lora_rank, "Adapter rank")->default_val(8);
    ctrn->add_option("--lora-scaling", trn.lora_scaling, "Adapter scaling")->default_val(2.0);
    ctrn->add_option("--out-dir", trn.out_dir, "Writes model.ckpt + train_report.jsonl")
        ->required();
    ctrn->callback([&] { cmd_train(trn); });

    EvalArgs evl;
    auto* cevl = app.add_subcommand("eval", "Compare two checkpoints on a probe corpus");
    cevl->add_option("--before", evl.before, "Reference checkpoint")->required();
    cevl->add_option("--after", evl.after, "Fine-tuned checkpoint")->required();
    cevl->add_option("--probe", evl.probe, "Probe corpus jsonl")->required();
    cevl->add_option("--out", evl.out, "Report JSON (default: stdout)");
    cevl->callback([&] { cmd_eval(evl); });

    ExportArgs exp;
    auto* cexp = app.add_subcommand("export", "Write figure-ready CSV/JSON from saved artifacts");
    cexp->add_option("--kind", exp.kind,
                     "gate_distribution, overlap_heatmap, experts_per_layer, or tradeoff_curve")
        ->required();
    cexp->add_option("--log", exp.logs, "Routing log jsonl (repeatable)");
    cexp->add_option("--selection", exp.selections, "Selection JSON (repeatable)");
    cexp->add_option("--checkpoint", exp.checkpoint, "Model checkpoint (tradeoff_curve)");
    cexp->add_option("--score", exp.score, "token or gate (tradeoff_curve)")
        ->default_val("token");
    cexp->add_option("--ps", exp.ps, "Thresholds (tradeoff_curve)");
    cexp->add_option("--top-k", exp.top_k, "Experts per task ranking (overlap_heatmap)")
        ->default_val(6);
    cexp->add_option("--n-experts", exp.n_experts, "Routed experts per layer (experts_per_layer)");
    cexp->add_option("--out", exp.out, "Output CSV");
    cexp->add_option("--out-json", exp.out_json, "Output JSON (overlap_heatmap)");
    cexp->callback([&] { cmd_export(exp); });

    SweepArgs swp;
    auto* cswp = app.add_subcommand("sweep", "Threshold sweep: trainable params vs p");
    cswp->add_option("--log", swp.log_path, "Routing log jsonl")->required();
    cswp->add_option("--checkpoint", swp.checkpoint, "Model checkpoint")->required();
    cswp->add_option("--score", swp.score, "token or gate")->default_val("token");
    cswp->add_option("--ps", swp.ps, "Thresholds (default 0.05 0.1 0.2 0.3 0.5 0.75 1.0)");
    cswp->add_option("--out", swp.out, "Output CSV")->required();
    cswp->callback([&] { run_p_sweep(swp); });

    RunArgs run;
    auto* crun = app.add_subcommand("run", "Execute a manifest end to end");
    crun->add_option("--manifest", run.manifest, "Experiment manifest JSON")->required();
    crun->add_flag("--quiet", run.quiet, "Suppress stage progress");
    crun->callback([&] { cmd_run(run); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
