// SPDX-License-Identifier: Apache-2.0
//
// Token corpora and synthetic task generation. Each task draws from its own
// vocabulary band and pattern family, so a multitask model has something to
// specialize on; real text can be ingested from JSONL or plain text.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "esft/common.hpp"

namespace esft {

struct Corpus {
    std::vector<std::vector<int>> documents;
    std::string task_label;
    int vocab_size = 0;

    int64_t token_count() const {
        int64_t n = 0;
        for (const auto& d : documents) n += static_cast<int64_t>(d.size());
        return n;
    }
    void validate() const; // InputError on empty docs or out-of-range ids
};

struct TaskSpec {
    std::string name;
    // Pattern families: "categorical" draws tokens independently from the
    // weight vector; "arithmetic" emits strided progressions; "copy" repeats
    // a random prefix; "template_json" interleaves fixed skeleton tokens
    // with random field values.
    std::string generator = "categorical";
    int vocab_size = 0;
    int band_lo = 0; // tokens are drawn from [band_lo, band_hi)
    int band_hi = 0;
    std::vector<double> weights; // categorical only; length band_hi - band_lo
    int doc_len_min = 0;
    int doc_len_max = 0;
    int n_docs = 0;
    int64_t seed = 0;

    void validate() const;
};

Corpus gen_task(const TaskSpec& spec);
std::vector<Corpus> gen_tasks(const std::vector<TaskSpec>& specs);

// format: "jsonl" (one {"text": ...} or {"tokens": [...]} object per line)
// or "plain" (one document per non-empty line).
// tokenizer: "byte" (ids 0..255, needs vocab_size >= 256) or "whitespace"
// (ids assigned to distinct words in first-seen order).
Corpus ingest(const std::string& path, const std::string& format, const std::string& tokenizer,
              int vocab_size);

// Inverse of byte-level tokenization, one string per document.
std::vector<std::string> detokenize_bytes(const Corpus& corpus);

// Corpus JSONL persistence ({"tokens": [...]} per line).
void save_corpus(const Corpus& corpus, const std::string& path);

} // namespace esft
