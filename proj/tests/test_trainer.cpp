// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "esft/rng.hpp"
#include "esft/trainer.hpp"
#include "test_util.hpp"

using namespace esft;

namespace {

MoEModelConfig train_config_small() {
    MoEModelConfig c;
    c.vocab_size = 16;
    c.d_model = 4;
    c.n_layers = 2;
    c.n_routed_experts = 4;
    c.n_shared_experts = 1;
    c.top_k = 2;
    c.expert_hidden_dim = 6;
    c.max_seq_len = 12;
    c.seed = 505;
    return c;
}

TaskSpec banded_spec(const std::string& name, int lo, int hi, int n_docs, uint64_t seed) {
    TaskSpec s;
    s.name = name;
    s.generator = "categorical";
    s.vocab_size = 16;
    s.band_lo = lo;
    s.band_hi = hi;
    s.weights.assign(static_cast<size_t>(hi - lo), 1.0);
    s.doc_len_min = 8;
    s.doc_len_max = 14;
    s.n_docs = n_docs;
    s.seed = seed;
    return s;
}

// Forgetting probes feed documents straight through the model, so lengths
// must fit max_seq_len + 1.
TaskSpec probe_spec(const std::string& name, int n_docs, uint64_t seed) {
    TaskSpec s = banded_spec(name, 0, 16, n_docs, seed);
    s.doc_len_min = 6;
    s.doc_len_max = 12;
    return s;
}

TrainConfig base_train_config() {
    TrainConfig c;
    c.method = Method::fft;
    c.learning_rate = 0.01;
    c.batch_size = 2;
    c.seq_len = 8;
    c.max_steps = 10;
    c.eval_every = 5;
    c.seed = 17;
    return c;
}

std::vector<double> snapshot(const MoEModel& model) {
    std::vector<double> out;
    for (const ParamGroup& g : model.param_groups()) {
        out.insert(out.end(), g.tensor.data().begin(), g.tensor.data().end());
    }
    return out;
}

} // namespace

TEST_CASE("train config validation") {
    TrainConfig c = base_train_config();
    c.validate();

    TrainConfig bad = c;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.seq_len = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.max_steps = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.eval_every = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.method = Method::esft_token;
    bad.p = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.method = Method::esft_gate;
    bad.p = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.method = Method::lora;
    bad.lora_rank = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.method = Method::lora;
    bad.lora_scaling = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("method names round trip") {
    for (const Method m : {Method::fft, Method::lora, Method::esft_token, Method::esft_gate}) {
        CHECK(method_from_name(method_name(m)) == m);
    }
    CHECK_THROWS_AS(method_from_name("adapter"), ConfigError);
}

TEST_CASE("selection subset cuts exact windows deterministically") {
    const Corpus corpus = gen_task(banded_spec("subset", 0, 8, 40, 9));
    const Corpus sub = sample_selection_subset(corpus, 6, 9, 123);
    CHECK(sub.documents.size() == 6);
    for (const auto& doc : sub.documents) {
        CHECK(doc.size() == 9);
        for (const int t : doc) {
            CHECK(t >= 0);
            CHECK(t < 8); // band tokens only
        }
    }
    CHECK(sub.token_count() == 54);
    CHECK(sub.vocab_size == corpus.vocab_size);

    const Corpus again = sample_selection_subset(corpus, 6, 9, 123);
    CHECK(sub.documents == again.documents);
    const Corpus other = sample_selection_subset(corpus, 6, 9, 124);
    CHECK(sub.documents != other.documents);
}

TEST_CASE("selection subset names its deficit") {
    const Corpus corpus = gen_task(banded_spec("small", 0, 8, 3, 5));
    CHECK_THROWS_WITH_AS(sample_selection_subset(corpus, 100, 50, 1),
                         doctest::Contains("short by"), InputError);
    CHECK_THROWS_AS(sample_selection_subset(corpus, 0, 9, 1), ConfigError);
    CHECK_THROWS_AS(sample_selection_subset(corpus, 1, 0, 1), ConfigError);
}

TEST_CASE("selection subset handles large requests") {
    // Budget comparable to a real selection pass: 32 samples of 4096 tokens.
    TaskSpec spec = banded_spec("bulk", 0, 8, 13000, 77);
    const Corpus corpus = gen_task(spec);
    REQUIRE(corpus.token_count() >= 32 * 4096);
    const Corpus sub = sample_selection_subset(corpus, 32, 4096, 55);
    CHECK(sub.documents.size() == 32);
    for (const auto& doc : sub.documents) CHECK(doc.size() == 4096);
}

TEST_CASE("chunk_corpus concatenates then windows") {
    Corpus c;
    c.task_label = "chunks";
    c.vocab_size = 16;
    c.documents = {{1, 2, 3, 4, 5}, {6, 7, 8, 9, 10, 11, 12}};
    const auto w3 = chunk_corpus(c, 3);
    REQUIRE(w3.size() == 4);
    CHECK(w3[0] == std::vector<int>{1, 2, 3});
    CHECK(w3[1] == std::vector<int>{4, 5, 6});
    CHECK(w3[2] == std::vector<int>{7, 8, 9});
    CHECK(w3[3] == std::vector<int>{10, 11, 12});
    const auto w5 = chunk_corpus(c, 5);
    REQUIRE(w5.size() == 2);
    CHECK(w5[1] == std::vector<int>{6, 7, 8, 9, 10});
    CHECK(chunk_corpus(c, 13).empty());
    CHECK_THROWS_AS(chunk_corpus(c, 0), ConfigError);
}

TEST_CASE("mixed schedule interleaves by ratio") {
    MixedSchedule s;
    s.seq_len = 4;
    s.task_seqs = {{0, 0, 0, 0, 0}};
    s.alignment_seqs = {{1, 1, 1, 1, 1}};

    s.ratio_task = 1;
    s.ratio_alignment = 0;
    for (int i = 0; i < 6; ++i) CHECK(s.source_at(i) == SourceKind::task);

    s.ratio_alignment = 1;
    const std::vector<SourceKind> alt = {SourceKind::task, SourceKind::alignment,
                                         SourceKind::task, SourceKind::alignment};
    for (int i = 0; i < 4; ++i) CHECK(s.source_at(i) == alt[static_cast<size_t>(i)]);

    s.ratio_task = 2;
    const std::vector<SourceKind> two_one = {SourceKind::task, SourceKind::task,
                                             SourceKind::alignment, SourceKind::task,
                                             SourceKind::task, SourceKind::alignment};
    for (int i = 0; i < 6; ++i) CHECK(s.source_at(i) == two_one[static_cast<size_t>(i)]);

    s.ratio_task = 0;
    s.ratio_alignment = 1;
    for (int i = 0; i < 4; ++i) CHECK(s.source_at(i) == SourceKind::alignment);
}

TEST_CASE("mix_datasets builds pools and validates") {
    const Corpus task = gen_task(banded_spec("mix_t", 0, 8, 30, 2));
    const Corpus align = gen_task(banded_spec("mix_a", 8, 16, 30, 3));
    const MixedSchedule s = mix_datasets(task, align, {1, 1}, 8, 11);
    CHECK(s.task_seqs.size() == static_cast<size_t>(task.token_count() / 9));
    CHECK(s.alignment_seqs.size() == static_cast<size_t>(align.token_count() / 9));
    for (const auto& w : s.task_seqs) CHECK(w.size() == 9);

    CHECK_THROWS_AS(mix_datasets(task, align, {0, 0}, 8, 11), ConfigError);
    CHECK_THROWS_AS(mix_datasets(task, align, {-1, 2}, 8, 11), ConfigError);

    Corpus tiny;
    tiny.task_label = "tiny";
    tiny.vocab_size = 16;
    tiny.documents = {{1, 2}};
    CHECK_THROWS_WITH_AS(mix_datasets(tiny, align, {1, 1}, 8, 11),
                         doctest::Contains("yields no sequences"), InputError);
    CHECK_THROWS_WITH_AS(mix_datasets(task, tiny, {1, 1}, 8, 11),
                         doctest::Contains("yields no sequences"), InputError);
    // A starved pool is fine when its ratio is zero.
    const MixedSchedule ok = mix_datasets(task, tiny, {1, 0}, 8, 11);
    CHECK(ok.alignment_seqs.empty());
}

TEST_CASE("empty mask leaves every parameter byte-identical") {
    MoEModel model(train_config_small());
    const std::vector<double> before = snapshot(model);

    const Corpus task = gen_task(banded_spec("frozen", 0, 8, 40, 21));
    const MixedSchedule sched = mix_datasets(task, task, {1, 0}, 8, 1);
    EvalSuite suite;
    suite.task_probe = chunk_corpus(task, 9);
    suite.general_probe = suite.task_probe;

    const TrainMask none = build_train_mask(model, std::nullopt, RoutedPolicy::none, false, false);
    TrainConfig cfg = base_train_config();
    cfg.max_steps = 6;
    cfg.eval_every = 2;
    const TrainReport rep = train(model, none, sched, suite, cfg);

    CHECK(snapshot(model) == before);
    CHECK(rep.trainable_param_count == 0);
    CHECK(rep.optimizer_state_param_count == 0);
    CHECK(rep.steps == 6);
    // Evals land at step 0 and then every eval_every steps.
    REQUIRE(rep.evals.size() == 4);
    CHECK(rep.evals[0].step == 0);
    for (const EvalRecord& e : rep.evals) {
        CHECK(e.task_loss == rep.evals[0].task_loss);
        REQUIRE(e.kl_vs_initial.has_value());
        CHECK(*e.kl_vs_initial == 0.0);
        CHECK_FALSE(e.alignment_loss.has_value());
    }
}

TEST_CASE("full fine-tuning reduces task loss") {
    MoEModel model(train_config_small());
    const Corpus task = gen_task(banded_spec("learn", 0, 6, 60, 31));
    const MixedSchedule sched = mix_datasets(task, task, {1, 0}, 8, 2);
    EvalSuite suite;
    suite.task_probe = chunk_corpus(task, 9);

    const double initial = corpus_cross_entropy(model, suite.task_probe);
    const TrainMask fft = build_train_mask(model, std::nullopt, RoutedPolicy::all, true, true);
    TrainConfig cfg = base_train_config();
    cfg.max_steps = 50;
    cfg.eval_every = 10;
    const TrainReport rep = train(model, fft, sched, suite, cfg);

    CHECK(rep.trainable_param_count == model.total_param_count());
    CHECK(rep.optimizer_state_param_count == model.total_param_count());
    REQUIRE(!rep.evals.empty());
    const double final_loss = rep.evals.back().task_loss;
    CHECK(final_loss < initial - 0.1);
    CHECK(corpus_cross_entropy(model, suite.task_probe) == doctest::Approx(final_loss));
}

TEST_CASE("masked training touches only selected experts") {
    MoEModel model(train_config_small());
    ExpertSelection sel;
    sel.p = 0.5;
    sel.per_layer = {{0, 2}, {1}};
    sel.achieved_mass = {0.6, 0.5};
    const TrainMask mask = build_train_mask(model, sel, RoutedPolicy::selected, false, false);

    // Name-addressable snapshot.
    std::vector<std::pair<std::string, std::vector<double>>> before;
    for (const ParamGroup& g : model.param_groups()) {
        before.push_back({g.name, g.tensor.data()});
    }

    const Corpus task = gen_task(banded_spec("esft", 0, 8, 60, 41));
    const MixedSchedule sched = mix_datasets(task, task, {1, 0}, 8, 3);
    EvalSuite suite;
    suite.task_probe = chunk_corpus(task, 9);
    TrainConfig cfg = base_train_config();
    cfg.method = Method::esft_token;
    cfg.max_steps = 20;
    cfg.eval_every = 20;
    cfg.learning_rate = 0.02;
    const TrainReport rep = train(model, mask, sched, suite, cfg);
    CHECK(rep.optimizer_state_param_count == mask.trainable_param_count);

    int changed_groups = 0;
    for (const ParamGroup& g : model.param_groups()) {
        const auto it = std::find_if(before.begin(), before.end(),
                                     [&](const auto& kv) { return kv.first == g.name; });
        REQUIRE(it != before.end());
        if (mask.contains(g.name)) {
            if (g.tensor.data() != it->second) ++changed_groups;
        } else {
            CHECK(g.tensor.data() == it->second);
        }
    }
    // Every selected expert matrix must actually move: the gate routes some
    // tokens to each expert across 20 batches of this corpus.
    CHECK(changed_groups == static_cast<int>(mask.trainable_groups.size()));
}

TEST_CASE("training is deterministic modulo wall-clock fields") {
    const MoEModel base(train_config_small());
    const Corpus task = gen_task(banded_spec("det", 0, 8, 50, 51));
    const Corpus align = gen_task(banded_spec("det_a", 8, 16, 50, 52));
    EvalSuite suite;
    suite.task_probe = chunk_corpus(task, 9);
    suite.alignment_probe = chunk_corpus(align, 9);
    suite.general_probe = suite.alignment_probe;
    TrainConfig cfg = base_train_config();
    cfg.max_steps = 12;
    cfg.eval_every = 4;
    cfg.mix_alignment = true;

    auto run = [&]() {
        MoEModel m = base.clone();
        const TrainMask fft = build_train_mask(m, std::nullopt, RoutedPolicy::all, true, true);
        const MixedSchedule sched = mix_datasets(task, align, {1, 1}, 8, cfg.seed);
        const TrainReport rep = train(m, fft, sched, suite, cfg);
        return std::make_pair(snapshot(m), rep);
    };
    const auto [params_a, rep_a] = run();
    const auto [params_b, rep_b] = run();
    CHECK(params_a == params_b);
    REQUIRE(rep_a.evals.size() == rep_b.evals.size());
    for (size_t i = 0; i < rep_a.evals.size(); ++i) {
        CHECK(rep_a.evals[i].step == rep_b.evals[i].step);
        CHECK(rep_a.evals[i].task_loss == rep_b.evals[i].task_loss);
        CHECK(rep_a.evals[i].alignment_loss == rep_b.evals[i].alignment_loss);
        CHECK(rep_a.evals[i].general_loss == rep_b.evals[i].general_loss);
        CHECK(rep_a.evals[i].kl_vs_initial == rep_b.evals[i].kl_vs_initial);
    }
}

TEST_CASE("diverging loss aborts with the step named") {
    MoEModel model(train_config_small());
    const Corpus task = gen_task(banded_spec("boom", 0, 8, 40, 61));
    const MixedSchedule sched = mix_datasets(task, task, {1, 0}, 8, 4);
    EvalSuite suite;
    suite.task_probe = chunk_corpus(task, 9);
    const TrainMask fft = build_train_mask(model, std::nullopt, RoutedPolicy::all, true, true);
    TrainConfig cfg = base_train_config();
    cfg.learning_rate = 1e308;
    cfg.max_steps = 10;
    CHECK_THROWS_WITH_AS(train(model, fft, sched, suite, cfg),
                         doctest::Contains("training aborted at step"), InputError);
}

TEST_CASE("train validates shapes and masks") {
    MoEModel model(train_config_small());
    const Corpus task = gen_task(banded_spec("val", 0, 8, 40, 71));
    EvalSuite suite;
    suite.task_probe = chunk_corpus(task, 9);
    const TrainMask fft = build_train_mask(model, std::nullopt, RoutedPolicy::all, true, true);

    TrainConfig cfg = base_train_config();
    cfg.seq_len = 20; // model max is 12
    CHECK_THROWS_AS(train(model, fft, mix_datasets(task, task, {1, 0}, 20, 1), suite, cfg),
                    ConfigError);

    cfg = base_train_config();
    CHECK_THROWS_WITH_AS(train(model, fft, mix_datasets(task, task, {1, 0}, 4, 1), suite, cfg),
                         doctest::Contains("schedule was built for seq_len"), ConfigError);

    EvalSuite empty_suite;
    CHECK_THROWS_AS(train(model, fft, mix_datasets(task, task, {1, 0}, 8, 1), empty_suite, cfg),
                    InputError);

    TrainMask alien = fft;
    alien.trainable_groups.push_back("no_such_group");
    CHECK_THROWS_AS(train(model, alien, mix_datasets(task, task, {1, 0}, 8, 1), suite, cfg),
                    ConfigError);

    TrainMask lying = fft;
    lying.trainable_param_count += 1;
    CHECK_THROWS_AS(train(model, lying, mix_datasets(task, task, {1, 0}, 8, 1), suite, cfg),
                    ConfigError);
}

TEST_CASE("uniform logits give log-vocab cross entropy") {
    MoEModel model(train_config_small());
    auto& head = model.param(-1, GroupKind::head).data_mut();
    std::fill(head.begin(), head.end(), 0.0);
    const Corpus task = gen_task(banded_spec("uniform", 0, 16, 20, 81));
    const double ce = corpus_cross_entropy(model, chunk_corpus(task, 9));
    CHECK(ce == doctest::Approx(std::log(16.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy validates windows") {
    const MoEModel model(train_config_small());
    CHECK_THROWS_WITH_AS(corpus_cross_entropy(model, {{1}}), doctest::Contains("at least 2"),
                         InputError);
    CHECK_THROWS_AS(corpus_cross_entropy(model, {}), InputError);
}

TEST_CASE("forgetting report on identical and perturbed models") {
    const MoEModel a(train_config_small());
    const MoEModel b = a.clone();
    Corpus probe = gen_task(probe_spec("probe", 20, 91));

    const ForgettingReport same = evaluate_forgetting(a, b, probe);
    CHECK(same.mean_kl == 0.0);
    CHECK(same.delta_loss == 0.0);
    CHECK(same.loss_before == same.loss_after);

    MoEModel c = a.clone();
    auto& head = c.param(-1, GroupKind::head).data_mut();
    for (double& v : head) v += 0.05;
    const ForgettingReport moved = evaluate_forgetting(a, c, probe);
    CHECK(moved.mean_kl > 0.0);
    CHECK(moved.delta_loss == doctest::Approx(moved.loss_after - moved.loss_before));

    MoEModelConfig other_cfg = train_config_small();
    other_cfg.n_routed_experts = 2;
    other_cfg.top_k = 1;
    const MoEModel other(other_cfg);
    CHECK_THROWS_AS(evaluate_forgetting(a, other, probe), InputError);

    Corpus empty;
    empty.task_label = "none";
    empty.vocab_size = 16;
    CHECK_THROWS_AS(evaluate_forgetting(a, b, empty), InputError);
}

TEST_CASE("fresh adapters leave the model's behavior unchanged") {
    const MoEModel base(train_config_small());
    MoEModel adapted = base.clone();
    Rng rng(7);
    adapted.attach_lora(2, 2.0, rng);
    const Corpus probe = gen_task(probe_spec("lora0", 20, 101));
    const ForgettingReport rep = evaluate_forgetting(base, adapted, probe);
    CHECK(rep.mean_kl == 0.0);
    CHECK(rep.delta_loss == 0.0);
}

TEST_CASE("train report json-lines round trip") {
    esft_test::TempDir tmp("train_report");
    TrainReport rep;
    rep.trainable_param_count = 123;
    rep.optimizer_state_param_count = 246;
    rep.steps = 20;
    rep.total_wall_ms = 17.5;
    EvalRecord r1;
    r1.step = 10;
    r1.task_loss = 2.5;
    r1.alignment_loss = 2.9;
    r1.kl_vs_initial = 0.001;
    r1.wall_ms_per_step = 1.25;
    EvalRecord r2;
    r2.step = 20;
    r2.task_loss = 2.1;
    rep.evals = {r1, r2};

    save_train_report(rep, tmp.file("rep.jsonl"));
    const TrainReport back = load_train_report(tmp.file("rep.jsonl"));
    CHECK(back.trainable_param_count == rep.trainable_param_count);
    CHECK(back.optimizer_state_param_count == rep.optimizer_state_param_count);
    CHECK(back.steps == rep.steps);
    CHECK(back.total_wall_ms == rep.total_wall_ms);
    REQUIRE(back.evals.size() == 2);
    CHECK(back.evals[0].step == 10);
    CHECK(back.evals[0].alignment_loss == r1.alignment_loss);
    CHECK_FALSE(back.evals[0].general_loss.has_value());
    CHECK(back.evals[1].task_loss == 2.1);
    CHECK_FALSE(back.evals[1].alignment_loss.has_value());

    CHECK_THROWS_AS(load_train_report(tmp.file("absent.jsonl")), InputError);
    std::ofstream bad(tmp.file("bad.jsonl"));
    bad << "{\"schema_version\":1,\"record\":\"header\",\"trainable_param_count\":1,"
           "\"optimizer_state_param_count\":2,\"steps\":3,\"total_wall_ms\":4.0}\n";
    bad << "not json\n";
    bad.close();
    CHECK_THROWS_WITH_AS(load_train_report(tmp.file("bad.jsonl")), doctest::Contains("line 2"),
                         InputError);
}
