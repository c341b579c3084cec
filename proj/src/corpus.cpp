// SPDX-License-Identifier: Apache-2.0
#include "esft/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "esft/rng.hpp"
#include "json.hpp"

namespace esft {

void Corpus::validate() const {
    if (documents.empty()) throw InputError("corpus '" + task_label + "' holds no documents");
    if (vocab_size <= 0) throw InputError("corpus '" + task_label + "' has no vocabulary");
    for (const auto& doc : documents) {
        if (doc.empty()) throw InputError("corpus '" + task_label + "' holds an empty document");
        for (int id : doc) {
            if (id < 0 || id >= vocab_size) {
                throw InputError("corpus '" + task_label + "' token id " + std::to_string(id) +
                                 " outside vocab " + std::to_string(vocab_size));
            }
        }
    }
}

void TaskSpec::validate() const {
    if (name.empty()) throw ConfigError("task spec needs a name");
    if (generator != "categorical" && generator != "arithmetic" && generator != "copy" &&
        generator != "template_json") {
        throw ConfigError("unknown generator '" + generator + "' for task '" + name + "'");
    }
    if (vocab_size <= 0) throw ConfigError("task '" + name + "' vocab_size must be positive");
    if (band_lo < 0 || band_hi <= band_lo || band_hi > vocab_size) {
        throw ConfigError("task '" + name + "' band [" + std::to_string(band_lo) + "," +
                          std::to_string(band_hi) + ") is invalid for vocab " +
                          std::to_string(vocab_size));
    }
    if (doc_len_min < 2 || doc_len_max < doc_len_min) {
        throw ConfigError("task '" + name + "' document length range is invalid");
    }
    if (n_docs <= 0) throw ConfigError("task '" + name + "' n_docs must be positive");
    if (generator == "categorical") {
        if (static_cast<int>(weights.size()) != band_hi - band_lo) {
            throw ConfigError("task '" + name + "' needs one weight per band token");
        }
        double total = 0.0;
        for (double w : weights) {
            if (w < 0.0) throw ConfigError("task '" + name + "' weights must be nonnegative");
            total += w;
        }
        if (total <= 0.0) throw ConfigError("task '" + name + "' weight distribution sums to zero");
    }
}

namespace {

int draw_categorical(Rng& rng, const std::vector<double>& weights, double total) {
    double u = rng.uniform01() * total;
    for (size_t i = 0; i < weights.size(); ++i) {
        u -= weights[i];
        if (u < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
}

} // namespace

Corpus gen_task(const TaskSpec& spec) {
    spec.validate();
    Rng rng(static_cast<uint64_t>(spec.seed));
    const int band = spec.band_hi - spec.band_lo;
    Corpus corpus;
    corpus.task_label = spec.name;
    corpus.vocab_size = spec.vocab_size;
    const double total = std::accumulate(spec.weights.begin(), spec.weights.end(), 0.0);
    for (int d = 0; d < spec.n_docs; ++d) {
        const int len = spec.doc_len_min +
                        static_cast<int>(rng.below(spec.doc_len_max - spec.doc_len_min + 1));
        std::vector<int> doc(static_cast<size_t>(len));
        if (spec.generator == "categorical") {
            for (int& t : doc) t = spec.band_lo + draw_categorical(rng, spec.weights, total);
        } else if (spec.generator == "arithmetic") {
            const int start = static_cast<int>(rng.below(band));
            const int stride = 1 + static_cast<int>(rng.below(std::max(1, band / 2)));
            for (int i = 0; i < len; ++i) {
                doc[static_cast<size_t>(i)] = spec.band_lo + (start + i * stride) % band;
            }
        } else if (spec.generator == "copy") {
            const int prefix = 2 + static_cast<int>(rng.below(std::max(1, std::min(band, len / 2))));
            std::vector<int> pat(static_cast<size_t>(prefix));
            for (int& t : pat) t = spec.band_lo + static_cast<int>(rng.below(band));
            for (int i = 0; i < len; ++i) doc[static_cast<size_t>(i)] = pat[static_cast<size_t>(i % prefix)];
        } else { // template_json: skeleton tokens at fixed slots, random fields between
            // Skeleton uses the low half of the band, fields the high half.
            const int half = std::max(1, band / 2);
            for (int i = 0; i < len; ++i) {
                if (i % 2 == 0) {
                    doc[static_cast<size_t>(i)] = spec.band_lo + (i / 2) % half;
                } else {
                    doc[static_cast<size_t>(i)] =
                        spec.band_lo + half + static_cast<int>(rng.below(std::max(1, band - half)));
                }
            }
        }
        corpus.documents.push_back(std::move(doc));
    }
    corpus.validate();
    return corpus;
}

std::vector<Corpus> gen_tasks(const std::vector<TaskSpec>& specs) {
    std::vector<Corpus> out;
    out.reserve(specs.size());
    for (const TaskSpec& s : specs) out.push_back(gen_task(s));
    return out;
}

namespace {

std::vector<int> tokenize_bytes(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

} // namespace

Corpus ingest(const std::string& path, const std::string& format, const std::string& tokenizer,
              int vocab_size) {
    if (format != "jsonl" && format != "plain") {
        throw ConfigError("unknown ingest format '" + format + "' (expected jsonl or plain)");
    }
    if (tokenizer != "byte" && tokenizer != "whitespace") {
        throw ConfigError("unknown tokenizer '" + tokenizer + "' (expected byte or whitespace)");
    }
    if (tokenizer == "byte" && vocab_size < 256) {
        throw ConfigError("byte tokenizer needs vocab_size >= 256, got " +
                          std::to_string(vocab_size));
    }
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");

    Corpus corpus;
    corpus.task_label = path;
    corpus.vocab_size = vocab_size;
    std::map<std::string, int> word_ids;

    auto tokenize = [&](const std::string& text, int line_no) {
        std::vector<int> ids;
        if (tokenizer == "byte") {
            ids = tokenize_bytes(text);
        } else {
            std::istringstream ss(text);
            std::string word;
            while (ss >> word) {
                auto it = word_ids.find(word);
                if (it == word_ids.end()) {
                    const int id = static_cast<int>(word_ids.size());
                    if (id >= vocab_size) {
                        throw InputError("line " + std::to_string(line_no) + ": word '" + word +
                                         "' overflows vocab of " + std::to_string(vocab_size));
                    }
                    it = word_ids.emplace(word, id).first;
                }
                ids.push_back(it->second);
            }
        }
        return ids;
    };

    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<int> doc;
        if (format == "plain") {
            doc = tokenize(line, line_no);
        } else {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw InputError("malformed jsonl at line " + std::to_string(line_no) + ": " +
                                 e.what());
            }
            if (j.contains("tokens")) {
                try {
                    doc = j["tokens"].get<std::vector<int>>();
                } catch (const nlohmann::json::exception& e) {
                    throw InputError("malformed token list at line " + std::to_string(line_no) +
                                     ": " + e.what());
                }
                for (int id : doc) {
                    if (id < 0 || id >= vocab_size) {
                        throw InputError("line " + std::to_string(line_no) + ": token id " +
                                         std::to_string(id) + " outside vocab " +
                                         std::to_string(vocab_size));
                    }
                }
            } else if (j.contains("text")) {
                doc = tokenize(j["text"].get<std::string>(), line_no);
            } else {
                throw InputError("line " + std::to_string(line_no) +
                                 " has neither 'text' nor 'tokens'");
            }
        }
        if (!doc.empty()) corpus.documents.push_back(std::move(doc));
    }
    if (corpus.documents.empty()) {
        throw InputError("'" + path + "' produced an empty corpus");
    }
    corpus.validate();
    return corpus;
}

std::vector<std::string> detokenize_bytes(const Corpus& corpus) {
    std::vector<std::string> out;
    out.reserve(corpus.documents.size());
    for (const auto& doc : corpus.documents) {
        std::string s;
        s.reserve(doc.size());
        for (int id : doc) {
            if (id < 0 || id > 255) {
                throw InputError("token id " + std::to_string(id) + " is not a byte");
            }
            s.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
        out.push_back(std::move(s));
    }
    return out;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
    corpus.validate();
    std::ofstream out(path);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    for (const auto& doc : corpus.documents) {
        out << nlohmann::json{{"tokens", doc}}.dump() << "\n";
    }
}

} // namespace esft
