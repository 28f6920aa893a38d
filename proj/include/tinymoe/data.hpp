// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tinymoe/common.hpp"
#include "tinymoe/rng.hpp"

namespace tinymoe {

// Byte-level vocabulary: 256 byte values + BOS + EOS + PAD = 259.
inline constexpr int32_t kBosId = 0;
inline constexpr int32_t kEosId = 1;
inline constexpr int32_t kPadId = 2;
inline constexpr int32_t kByteOffset = 3;
inline constexpr int32_t kByteVocabSize = 259;

struct Document {
    std::string bytes;
    int32_t domain_id = 0;
    std::string path;
};

struct Corpus {
    std::vector<Document> docs;
    std::vector<std::string> domains; // registered in first-seen order

    int64_t total_tokens() const {
        int64_t n = 0;
        for (const auto& d : docs) n += int64_t(d.bytes.size()) + 2; // BOS + EOS
        return n;
    }
};

struct TokenStream {
    std::vector<int32_t> ids;
    std::vector<int32_t> domains; // one per token, constant within a document
};

/// BOS + raw bytes (offset past the specials) + EOS.
inline TokenStream tokenize(const Document& doc) {
    TokenStream s;
    s.ids.reserve(doc.bytes.size() + 2);
    s.ids.push_back(kBosId);
    for (unsigned char c : doc.bytes) s.ids.push_back(kByteOffset + int32_t(c));
    s.ids.push_back(kEosId);
    s.domains.assign(s.ids.size(), doc.domain_id);
    return s;
}

/// Inverse of tokenize on the byte payload; specials are dropped.
inline std::string detokenize(const std::vector<int32_t>& ids) {
    std::string out;
    for (int32_t id : ids) {
        check(id >= 0 && id < kByteVocabSize, "token id out of range: " + std::to_string(id));
        if (id >= kByteOffset) out.push_back(char(uint8_t(id - kByteOffset)));
    }
    return out;
}

namespace detail {

inline bool glob_match(const std::string& pattern, const std::string& text) {
    // Minimal glob: '*' matches any run (including '/'), '?' one char.
    size_t p = 0, t = 0, star = std::string::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
            ++p;
            ++t;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (star != std::string::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

} // namespace detail

/// Reads a corpus manifest (json: {"entries": [{"glob":..., "domain":...}]})
/// and ingests every data file under the manifest's directory. Document
/// order is lexicographic by path; domains register in first-seen order.
/// A data file matched by no glob is a configuration error.
inline Corpus ingest(const std::filesystem::path& manifest_path) {
    namespace fs = std::filesystem;
    if (!fs::exists(manifest_path)) throw IoError("manifest not found: " + manifest_path.string());

    nlohmann::json manifest;
    {
        std::ifstream in(manifest_path);
        if (!in) throw IoError("cannot open manifest: " + manifest_path.string());
        try {
            manifest = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("malformed manifest " + manifest_path.string() + ": " + e.what());
        }
    }
    struct Rule {
        std::string glob;
        std::string domain;
    };
    std::vector<Rule> rules;
    try {
        for (const auto& e : manifest.at("entries"))
            rules.push_back({e.at("glob").get<std::string>(), e.at("domain").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad manifest schema in " + manifest_path.string() + ": " + e.what());
    }

    const fs::path root = manifest_path.parent_path();
    std::vector<std::string> rel_paths;
    for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator(); ++it) {
        if (!it->is_regular_file()) continue;
        fs::path rel = fs::relative(it->path(), root);
        if (rel == manifest_path.filename()) continue;
        rel_paths.push_back(rel.generic_string());
    }
    std::sort(rel_paths.begin(), rel_paths.end());

    Corpus corpus;
    if (rel_paths.empty())
        std::cerr << "warning: corpus at " << root.string() << " has no data files\n";
    for (const auto& rel : rel_paths) {
        std::string domain;
        for (const auto& r : rules) {
            if (detail::glob_match(r.glob, rel)) {
                domain = r.domain;
                break;
            }
        }
        if (domain.empty())
            throw ConfigError("file not covered by any manifest glob: " + rel);
        int32_t domain_id = -1;
        for (size_t i = 0; i < corpus.domains.size(); ++i)
            if (corpus.domains[i] == domain) domain_id = int32_t(i);
        if (domain_id < 0) {
            domain_id = int32_t(corpus.domains.size());
            corpus.domains.push_back(domain);
        }
        std::ifstream in(root / rel, std::ios::binary);
        if (!in) throw IoError("cannot read corpus file: " + (root / rel).string());
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (in.bad()) throw IoError("read error on corpus file: " + (root / rel).string());
        check<ConfigError>(!bytes.empty(), "empty corpus file: " + rel);
        corpus.docs.push_back({std::move(bytes), domain_id, rel});
    }
    return corpus;
}

struct Batch {
    int64_t index = 0;      // batch ordinal within the run
    int64_t batch_size = 0; // sequences
    int64_t seq_len = 0;
    std::vector<int32_t> inputs;  // [batch_size * seq_len]
    std::vector<int32_t> targets; // next token per position
    std::vector<int32_t> domains; // domain of each input position
};

/// Deterministic shuffled batch stream. Documents are reshuffled at every
/// epoch boundary and once more at the anneal boundary; sequences pack
/// across document boundaries with EOS/BOS separators intact. Fully
/// determined by (corpus, seq_len, batch_size, seed).
class BatchCursor {
public:
    BatchCursor(const Corpus& corpus, int64_t seq_len, int64_t batch_size, uint64_t seed,
                int64_t total_batches, std::optional<int64_t> anneal_boundary = std::nullopt)
        : corpus_(&corpus),
          seq_len_(seq_len),
          batch_size_(batch_size),
          seed_(seed),
          total_batches_(total_batches),
          anneal_boundary_(anneal_boundary) {
        check<ConfigError>(seq_len_ >= 1 && batch_size_ >= 1, "batch shape must be positive");
        check<ConfigError>(!corpus.docs.empty(), "cannot batch an empty corpus");
        check<ConfigError>(corpus.total_tokens() > seq_len_,
                           "seq_len exceeds the tokens available in the corpus");
        load_epoch();
    }

    /// Batches an exact fractional-epoch budget: floor(epochs * N / (L*B)).
    static int64_t batches_for_epochs(const Corpus& corpus, int64_t seq_len, int64_t batch_size,
                                      double epochs) {
        check(epochs > 0, "epochs must be > 0");
        return int64_t(epochs * double(corpus.total_tokens()) / double(seq_len * batch_size));
    }

    int64_t total_batches() const { return total_batches_; }
    int64_t position() const { return next_batch_; }

    /// Tokens discarded by mid-epoch reshuffles plus the unconsumed tail of
    /// the current epoch (the dropped partial window at exhaustion).
    int64_t dropped_tail_tokens() const {
        return dropped_tail_ + (int64_t(stream_.ids.size()) - pos_);
    }

    bool done() const { return next_batch_ >= total_batches_; }

    Batch next() {
        check(!done(), "batch cursor exhausted");
        if (anneal_boundary_ && next_batch_ == *anneal_boundary_ && !anneal_reshuffled_) {
            // One extra reshuffle of the whole dataset entering the anneal;
            // the unconsumed tail of the current epoch is discarded.
            anneal_reshuffled_ = true;
            dropped_tail_ += int64_t(stream_.ids.size()) - pos_;
            epoch_ = 0;
            anneal_phase_ = true;
            pos_ = 0;
            load_epoch();
        }
        Batch b;
        b.index = next_batch_++;
        b.batch_size = batch_size_;
        b.seq_len = seq_len_;
        const int64_t want = batch_size_ * seq_len_;
        b.inputs.reserve(size_t(want));
        b.targets.reserve(size_t(want));
        b.domains.reserve(size_t(want));
        for (int64_t i = 0; i < want; ++i) {
            const int64_t len = int64_t(stream_.ids.size());
            if (pos_ >= len) roll_epoch();
            b.inputs.push_back(stream_.ids[size_t(pos_)]);
            // The first token of any epoch stream is BOS, so the lookahead
            // target across an epoch boundary is BOS without materializing
            // the next shuffle early.
            b.targets.push_back(pos_ + 1 < int64_t(stream_.ids.size())
                                    ? stream_.ids[size_t(pos_ + 1)]
                                    : kBosId);
            b.domains.push_back(stream_.domains[size_t(pos_)]);
            ++pos_;
        }
        return b;
    }

    /// Fast-forwards to a batch index by regenerating the stream state.
    void skip_to(int64_t batch_index) {
        check(batch_index >= 0 && batch_index <= total_batches_, "skip_to out of range");
        epoch_ = 0;
        pos_ = 0;
        next_batch_ = 0;
        anneal_reshuffled_ = false;
        anneal_phase_ = false;
        dropped_tail_ = 0;
        load_epoch();
        while (next_batch_ < batch_index) next();
    }

private:
    void roll_epoch() {
        dropped_tail_ += int64_t(stream_.ids.size()) - pos_;
        ++epoch_;
        pos_ = 0;
        load_epoch();
    }

    void load_epoch() {
        RngStream rng = anneal_phase_ ? RngStream(seed_, "data").split("anneal", uint64_t(epoch_))
                                      : RngStream(seed_, "data").split("epoch", uint64_t(epoch_));
        std::vector<size_t> order(corpus_->docs.size());
        std::iota(order.begin(), order.end(), size_t(0));
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = size_t(rng.next_u64() % uint64_t(i));
            std::swap(order[i - 1], order[j]);
        }
        stream_.ids.clear();
        stream_.domains.clear();
        for (size_t di : order) {
            TokenStream doc = tokenize(corpus_->docs[di]);
            stream_.ids.insert(stream_.ids.end(), doc.ids.begin(), doc.ids.end());
            stream_.domains.insert(stream_.domains.end(), doc.domains.begin(), doc.domains.end());
        }
    }

    const Corpus* corpus_;
    int64_t seq_len_;
    int64_t batch_size_;
    uint64_t seed_;
    int64_t total_batches_;
    std::optional<int64_t> anneal_boundary_;

    TokenStream stream_;
    int64_t epoch_ = 0;
    int64_t pos_ = 0;
    int64_t next_batch_ = 0;
    int64_t dropped_tail_ = 0;
    bool anneal_reshuffled_ = false;
    bool anneal_phase_ = false;
};

/// Spec-shaped constructor: a deterministic batch sequence covering
/// `epochs` fractional epochs with a reshuffle at the anneal boundary.
inline BatchCursor make_batches(const Corpus& corpus, int64_t seq_len, int64_t batch_size,
                                double epochs, double anneal_fraction, uint64_t seed) {
    check(epochs > 0, "epochs must be > 0");
    check(anneal_fraction >= 0 && anneal_fraction < 1, "anneal_fraction must be in [0,1)");
    const int64_t total = BatchCursor::batches_for_epochs(corpus, seq_len, batch_size, epochs);
    std::optional<int64_t> boundary;
    if (anneal_fraction > 0) boundary = int64_t((1.0 - anneal_fraction) * double(total));
    return BatchCursor(corpus, seq_len, batch_size, seed, total, boundary);
}

} // namespace tinymoe
