#include "rectattn/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "rectattn/error.hpp"
#include "rectattn/rng.hpp"

namespace rectattn {

std::string to_string(Ordering o) { return o == Ordering::QueryFirst ? "QUERY_FIRST" : "QUERY_LAST"; }

Ordering parse_ordering(std::string_view name) {
    if (name == "QUERY_FIRST") return Ordering::QueryFirst;
    if (name == "QUERY_LAST") return Ordering::QueryLast;
    throw ConfigError("unknown ordering '" + std::string(name) + "'");
}

int KVTaskConfig::seq_len() const {
    const int docs = 1 + n_distracting + n_irrelevant;
    return 1 + (1 + key_width) + docs * (2 + key_width) + 1;
}

void KVTaskConfig::validate() const {
    if (key_width < 2) throw ConfigError("task.key_width must be >= 2");
    if (n_irrelevant < 0 || n_distracting < 0) throw ConfigError("task document counts must be >= 0");
    if (key_alphabet < key_width) throw ConfigError("task.key_alphabet must be >= key_width");
    if (n_distracting > 0 && key_alphabet < 2 * key_width - 1)
        throw ConfigError("task.key_alphabet too small for near-miss distractors (need 2*key_width-1)");
    if (n_irrelevant > 0 && key_alphabet < 2 * key_width)
        throw ConfigError("task.key_alphabet too small for irrelevant documents (need 2*key_width)");
    if (value_alphabet < 1) throw ConfigError("task.value_alphabet must be >= 1");
    if (n_distracting + n_irrelevant > 0 && value_alphabet < 2)
        throw ConfigError("task.value_alphabet must be >= 2 when noise documents are present");
}

namespace {

int draw(Rng& rng, int n) { return static_cast<int>(uniform_int(rng, 0, n - 1)); }

// `count` distinct keys from [0, K) avoiding `exclude`.
std::vector<int> keys_outside(Rng& rng, int K, const std::vector<int>& exclude, int count) {
    std::vector<int> pool;
    for (int k = 0; k < K; ++k)
        if (std::find(exclude.begin(), exclude.end(), k) == exclude.end()) pool.push_back(k);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(static_cast<std::size_t>(count));
    return pool;
}

struct Doc {
    std::vector<int> keys;
    int value = 0;
    bool gold = false;
};

} // namespace

Episode gen_kv_episode(const KVTaskConfig& cfg) {
    cfg.validate();
    const KVVocab voc = cfg.vocab();
    Rng rng(cfg.seed);
    const int w = cfg.key_width;

    std::vector<int> query = keys_outside(rng, cfg.key_alphabet, {}, w);
    const int gold_value = draw(rng, cfg.value_alphabet);
    auto other_value = [&] {
        const int v = draw(rng, cfg.value_alphabet - 1);
        return v >= gold_value ? v + 1 : v;
    };

    std::vector<Doc> docs;
    docs.push_back({query, gold_value, true});
    for (int d = 0; d < cfg.n_distracting; ++d) {
        const int slot = draw(rng, w);
        std::vector<int> fill = keys_outside(rng, cfg.key_alphabet, query, w - 1);
        std::vector<int> keys;
        for (int s = 0, f = 0; s < w; ++s) keys.push_back(s == slot ? query[static_cast<std::size_t>(s)] : fill[static_cast<std::size_t>(f++)]);
        docs.push_back({keys, other_value(), false});
    }
    for (int d = 0; d < cfg.n_irrelevant; ++d)
        docs.push_back({keys_outside(rng, cfg.key_alphabet, query, w), other_value(), false});
    std::shuffle(docs.begin(), docs.end(), rng);

    Episode e;
    e.ordering = cfg.ordering;
    e.seed = cfg.seed;
    e.target = voc.value(gold_value);
    auto push = [&](int tok, int rel) {
        e.tokens.push_back(tok);
        e.r.push_back(rel);
    };
    auto push_query = [&] {
        push(KVVocab::kQuery, 1);
        for (int k : query) push(voc.key(k), 1);
    };
    push(KVVocab::kBos, 1);
    if (cfg.ordering == Ordering::QueryFirst) push_query();
    for (const Doc& d : docs) {
        const int rel = d.gold ? 1 : 0;
        push(KVVocab::kDoc, rel);
        for (int k : d.keys) push(voc.key(k), rel);
        if (d.gold) e.answer_positions.push_back(static_cast<int>(e.tokens.size()));
        push(voc.value(d.value), rel);
    }
    if (cfg.ordering == Ordering::QueryLast) push_query();
    push(KVVocab::kAns, 1);
    return e;
}

Episode gen_kv_episode(const KVTaskConfig& cfg, std::uint64_t index) {
    KVTaskConfig c = cfg;
    c.seed = derive_seed(cfg.seed, "kv", index);
    return gen_kv_episode(c);
}

void Match3Config::validate() const {
    if (n < 3) throw ConfigError("match3.n must be >= 3");
    if (modulus < 2) throw ConfigError("match3.modulus must be >= 2");
    if (support_size < 0 || support_size > modulus) throw ConfigError("match3.support_size must lie in [0, modulus]");
}

std::vector<int> match3_labels(const std::vector<int>& tokens, int modulus) {
    std::vector<int> count(static_cast<std::size_t>(modulus), 0);
    for (int t : tokens) ++count[static_cast<std::size_t>(t)];
    std::vector<int> labels(tokens.size(), 0);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        --count[static_cast<std::size_t>(tokens[i])];
        const int need = (modulus - tokens[i]) % modulus;
        for (int p = 0; p < modulus && !labels[i]; ++p) {
            const int q = ((need - p) % modulus + modulus) % modulus;
            const int cp = count[static_cast<std::size_t>(p)], cq = count[static_cast<std::size_t>(q)];
            labels[i] = p == q ? cp >= 2 : (cp >= 1 && cq >= 1);
        }
        ++count[static_cast<std::size_t>(tokens[i])];
    }
    return labels;
}

Match3Episode gen_match3_episode(const Match3Config& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    std::vector<int> support(static_cast<std::size_t>(cfg.modulus));
    std::iota(support.begin(), support.end(), 0);
    if (cfg.support_size > 0) {
        std::shuffle(support.begin(), support.end(), rng);
        support.resize(static_cast<std::size_t>(cfg.support_size));
    }
    Match3Episode e;
    for (int i = 0; i < cfg.n; ++i) e.tokens.push_back(support[static_cast<std::size_t>(draw(rng, static_cast<int>(support.size())))]);
    e.labels = match3_labels(e.tokens, cfg.modulus);
    return e;
}

Match3Episode gen_match3_episode(const Match3Config& cfg, std::uint64_t index) {
    Match3Config c = cfg;
    c.seed = derive_seed(cfg.seed, "match3", index);
    return gen_match3_episode(c);
}

Batch batch(const std::vector<std::vector<int>>& sequences, int pad_token) {
    Batch b;
    std::size_t width = 0;
    for (const auto& s : sequences) width = std::max(width, s.size());
    for (const auto& s : sequences) {
        std::vector<int> row = s;
        std::vector<unsigned char> mask(s.size(), 1);
        row.resize(width, pad_token);
        mask.resize(width, 0);
        b.tokens.push_back(std::move(row));
        b.mask.push_back(std::move(mask));
        b.lengths.push_back(s.size());
    }
    return b;
}

Batch batch(const std::vector<Episode>& episodes, int pad_token) {
    std::vector<std::vector<int>> seqs;
    for (const Episode& e : episodes) seqs.push_back(e.tokens);
    return batch(seqs, pad_token);
}

Json to_json(const Episode& e) {
    return Json{{"tokens", e.tokens},         {"r", e.r},
                {"answer_positions", e.answer_positions}, {"target", e.target},
                {"ordering", to_string(e.ordering)},      {"seed", e.seed}};
}

Episode episode_from_json(const Json& j) {
    Episode e;
    try {
        e.tokens = j.at("tokens").get<std::vector<int>>();
        e.r = j.at("r").get<std::vector<int>>();
        e.answer_positions = j.at("answer_positions").get<std::vector<int>>();
        e.target = j.at("target").get<int>();
        e.ordering = parse_ordering(j.at("ordering").get<std::string>());
        e.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
        throw IoError(std::string("malformed episode: ") + ex.what());
    }
    if (e.r.size() != e.tokens.size()) throw IoError("malformed episode: r and tokens differ in length");
    return e;
}

void write_jsonl(const std::vector<Episode>& episodes, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (const Episode& e : episodes) out << to_json(e).dump() << '\n';
    if (!out) throw IoError("write failed: " + path);
}

std::vector<Episode> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<Episode> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(episode_from_json(Json::parse(line)));
        } catch (const nlohmann::json::exception& ex) {
            throw IoError(path + ": " + ex.what());
        }
    }
    return out;
}

Json to_json(const KVTaskConfig& c) {
    return Json{{"key_alphabet", c.key_alphabet}, {"value_alphabet", c.value_alphabet},
                {"n_irrelevant", c.n_irrelevant}, {"n_distracting", c.n_distracting},
                {"key_width", c.key_width},       {"ordering", to_string(c.ordering)},
                {"seed", c.seed}};
}

KVTaskConfig kv_task_config_from_json(const Json& j, const std::string& path) {
    KVTaskConfig c;
    FieldReader r(j, path);
    r.read("key_alphabet", c.key_alphabet);
    r.read("value_alphabet", c.value_alphabet);
    r.read("n_irrelevant", c.n_irrelevant);
    r.read("n_distracting", c.n_distracting);
    r.read("key_width", c.key_width);
    std::string ordering = to_string(c.ordering);
    r.read("ordering", ordering);
    try {
        c.ordering = parse_ordering(ordering);
    } catch (const ConfigError& e) {
        throw ConfigError(r.path_of("ordering") + ": " + e.what());
    }
    r.read("seed", c.seed);
    r.finish();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return c;
}

Json to_json(const Match3Config& c) {
    return Json{{"n", c.n}, {"modulus", c.modulus}, {"support_size", c.support_size}, {"seed", c.seed}};
}

Match3Config match3_config_from_json(const Json& j, const std::string& path) {
    Match3Config c;
    FieldReader r(j, path);
    r.read("n", c.n);
    r.read("modulus", c.modulus);
    r.read("support_size", c.support_size);
    r.read("seed", c.seed);
    r.finish();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return c;
}

} // namespace rectattn
