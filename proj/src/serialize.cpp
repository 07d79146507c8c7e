#include "rectattn/serialize.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include "rectattn/error.hpp"

namespace rectattn {

FieldReader::FieldReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + ": expected a JSON object");
}

std::string FieldReader::path_of(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

const Json* FieldReader::find(const char* key) {
    seen_.emplace_back(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
}

void FieldReader::read(const char* key, int& out) {
    if (const Json* v = find(key)) {
        if (!v->is_number_integer()) throw ConfigError(path_of(key) + ": expected an integer");
        const auto x = v->get<long long>();
        if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
            throw ConfigError(path_of(key) + ": integer out of range");
        out = static_cast<int>(x);
    }
}

void FieldReader::read(const char* key, long& out) {
    if (const Json* v = find(key)) {
        if (!v->is_number_integer()) throw ConfigError(path_of(key) + ": expected an integer");
        out = v->get<long>();
    }
}

void FieldReader::read(const char* key, std::uint64_t& out) {
    if (const Json* v = find(key)) {
        if (v->is_number_unsigned()) {
            out = v->get<std::uint64_t>();
        } else if (v->is_number_integer() && v->get<long long>() >= 0) {
            out = static_cast<std::uint64_t>(v->get<long long>());
        } else {
            throw ConfigError(path_of(key) + ": expected a non-negative integer");
        }
    }
}

void FieldReader::read(const char* key, double& out) {
    if (const Json* v = find(key)) {
        if (!v->is_number()) throw ConfigError(path_of(key) + ": expected a number");
        out = v->get<double>();
    }
}

void FieldReader::read(const char* key, bool& out) {
    if (const Json* v = find(key)) {
        if (!v->is_boolean()) throw ConfigError(path_of(key) + ": expected true or false");
        out = v->get<bool>();
    }
}

void FieldReader::read(const char* key, std::string& out) {
    if (const Json* v = find(key)) {
        if (!v->is_string()) throw ConfigError(path_of(key) + ": expected a string");
        out = v->get<std::string>();
    }
}

const Json* FieldReader::child(const char* key) { return find(key); }

void FieldReader::finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
        if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
            throw ConfigError(path_of(it.key().c_str()) + ": unknown field");
    }
}

Json to_json(const RectifierConfig& c) {
    return Json{{"variant", to_string(c.variant)},
                {"xi_max", c.xi_max},
                {"ramp_fraction", c.ramp_fraction},
                {"sigmoid_scale", c.sigmoid_scale}};
}

RectifierConfig rectifier_config_from_json(const Json& j, const std::string& path) {
    RectifierConfig c;
    FieldReader r(j, path);
    std::string variant = to_string(c.variant);
    r.read("variant", variant);
    try {
        c.variant = parse_variant(variant);
    } catch (const ConfigError& e) {
        throw ConfigError(r.path_of("variant") + ": " + e.what());
    }
    r.read("xi_max", c.xi_max);
    r.read("ramp_fraction", c.ramp_fraction);
    r.read("sigmoid_scale", c.sigmoid_scale);
    r.finish();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return c;
}

Json to_json(const ModelConfig& c) {
    return Json{{"vocab_size", c.vocab_size},
                {"hidden_dim", c.hidden_dim},
                {"n_layers", c.n_layers},
                {"n_query_heads", c.n_query_heads},
                {"n_kv_heads", c.n_kv_heads},
                {"head_dim", c.head_dim},
                {"ffn_dim", c.ffn_dim},
                {"max_seq_len", c.max_seq_len},
                {"lora_rank", c.lora_rank},
                {"qk_lora_rank", c.qk_lora_rank},
                {"causal", c.causal},
                {"output_dim", c.output_dim},
                {"rectifier", to_json(c.rectifier)}};
}

ModelConfig model_config_from_json(const Json& j, const std::string& path) {
    ModelConfig c;
    FieldReader r(j, path);
    r.read("vocab_size", c.vocab_size);
    r.read("hidden_dim", c.hidden_dim);
    r.read("n_layers", c.n_layers);
    r.read("n_query_heads", c.n_query_heads);
    r.read("n_kv_heads", c.n_kv_heads);
    r.read("head_dim", c.head_dim);
    r.read("ffn_dim", c.ffn_dim);
    r.read("max_seq_len", c.max_seq_len);
    r.read("lora_rank", c.lora_rank);
    r.read("qk_lora_rank", c.qk_lora_rank);
    r.read("causal", c.causal);
    r.read("output_dim", c.output_dim);
    if (const Json* rc = r.child("rectifier")) c.rectifier = rectifier_config_from_json(*rc, r.path_of("rectifier"));
    r.finish();
    return c;
}

Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + e.what());
    }
}

void write_json_file(const Json& j, const std::string& path, int indent) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(indent) << '\n';
    if (!out) throw IoError("write failed: " + path);
}

} // namespace rectattn
