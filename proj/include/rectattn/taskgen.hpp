#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rectattn/serialize.hpp"

namespace rectattn {

enum class Ordering { QueryFirst, QueryLast };
std::string to_string(Ordering o);
Ordering parse_ordering(std::string_view name);

// Token layout shared by every KV episode: five structural ids, then the key
// alphabet, then the value alphabet.
struct KVVocab {
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kQuery = 2;
    static constexpr int kDoc = 3;
    static constexpr int kAns = 4;
    static constexpr int kFirstKey = 5;

    int key_alphabet = 0;
    int value_alphabet = 0;

    int key(int k) const { return kFirstKey + k; }
    int value(int v) const { return kFirstKey + key_alphabet + v; }
    bool is_key(int t) const { return t >= kFirstKey && t < kFirstKey + key_alphabet; }
    bool is_value(int t) const { return t >= value(0) && t < value(0) + value_alphabet; }
    int size() const { return kFirstKey + key_alphabet + value_alphabet; }
};

struct KVTaskConfig {
    int key_alphabet = 8;
    int value_alphabet = 16;
    int n_irrelevant = 0;
    int n_distracting = 0;
    int key_width = 2;
    Ordering ordering = Ordering::QueryFirst;
    std::uint64_t seed = 0;

    KVVocab vocab() const { return {key_alphabet, value_alphabet}; }
    // Sequence length of every episode under this config.
    int seq_len() const;
    void validate() const;
};

struct Episode {
    std::vector<int> tokens;
    std::vector<int> r;
    std::vector<int> answer_positions;
    int target = -1;
    Ordering ordering = Ordering::QueryFirst;
    std::uint64_t seed = 0;

    // Prediction is read at the final (ANS) position.
    std::size_t readout() const { return tokens.size() - 1; }
};

// BOS, the query block (QUERY k_1..k_w) first or last, shuffled documents
// (DOC k_1..k_w value), ANS. Exactly one document carries every query key;
// distracting documents share exactly one query key in its query slot;
// irrelevant documents share none. Non-gold values differ from the gold
// value, so the target occurs once. Throws ConfigError when the alphabets
// cannot supply the requested documents.
Episode gen_kv_episode(const KVTaskConfig& cfg);

// Episode `index` of a stream: cfg with seed derive_seed(cfg.seed, "kv", index).
Episode gen_kv_episode(const KVTaskConfig& cfg, std::uint64_t index);

struct Match3Config {
    int n = 24;
    int modulus = 16;
    // Tokens are drawn from a random subset of this many residues per
    // episode; 0 draws uniformly from all of Z_M.
    int support_size = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Match3Episode {
    std::vector<int> tokens;
    std::vector<int> labels;
};

// label[i] = 1 iff distinct a, b (both != i) exist with x_i + x_a + x_b = 0 mod M.
std::vector<int> match3_labels(const std::vector<int>& tokens, int modulus);
Match3Episode gen_match3_episode(const Match3Config& cfg);
Match3Episode gen_match3_episode(const Match3Config& cfg, std::uint64_t index);

struct Batch {
    std::vector<std::vector<int>> tokens;          // right-padded rows
    std::vector<std::vector<unsigned char>> mask;  // 1 on real positions
    std::vector<std::size_t> lengths;
};

Batch batch(const std::vector<std::vector<int>>& sequences, int pad_token);
Batch batch(const std::vector<Episode>& episodes, int pad_token);

Json to_json(const Episode& e);
Episode episode_from_json(const Json& j);
void write_jsonl(const std::vector<Episode>& episodes, const std::string& path);
std::vector<Episode> read_jsonl(const std::string& path);

Json to_json(const KVTaskConfig& c);
KVTaskConfig kv_task_config_from_json(const Json& j, const std::string& path = "task");
Json to_json(const Match3Config& c);
Match3Config match3_config_from_json(const Json& j, const std::string& path = "match3");

} // namespace rectattn
