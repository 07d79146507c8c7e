#pragma once

#include <string>

#include <json.hpp>

#include "rectattn/model.hpp"
#include "rectattn/rectifier.hpp"

namespace rectattn {

using Json = nlohmann::ordered_json;

// Strict field reader for config objects. Unknown keys and type mismatches
// raise ConfigError naming the dotted field path; absent keys keep the
// caller's default.
class FieldReader {
public:
    FieldReader(const Json& obj, std::string path);

    void read(const char* key, int& out);
    void read(const char* key, long& out);
    void read(const char* key, std::uint64_t& out);
    void read(const char* key, double& out);
    void read(const char* key, bool& out);
    void read(const char* key, std::string& out);
    const Json* child(const char* key);
    std::string path_of(const char* key) const;
    // Throws on any key that was never asked for.
    void finish() const;

private:
    const Json* find(const char* key);
    const Json& obj_;
    std::string path_;
    std::vector<std::string> seen_;
};

Json to_json(const RectifierConfig& c);
RectifierConfig rectifier_config_from_json(const Json& j, const std::string& path = "rectifier");

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j, const std::string& path = "model");

// Throws IoError when the file cannot be read or parsed.
Json read_json_file(const std::string& path);
// Writes `j` followed by a newline; throws IoError on failure.
void write_json_file(const Json& j, const std::string& path, int indent = 2);

} // namespace rectattn
