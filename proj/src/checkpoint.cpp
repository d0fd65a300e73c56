#include "awmark/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

namespace awmark {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void save_checkpoint(const std::string& dir, const ParamSet& params,
                     const std::string& config_json) {
    fs::create_directories(dir);
    ordered_json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["dtype"] = "float64-le";
    if (!config_json.empty())
        manifest["config"] = ordered_json::parse(config_json);
    ordered_json tensors = ordered_json::array();
    for (const auto& e : params.entries()) {
        ordered_json t;
        t["name"] = e.name;
        t["shape"] = e.value.shape();
        tensors.push_back(t);

        std::ofstream f(fs::path(dir) / e.name, std::ios::binary);
        if (!f) throw std::runtime_error("checkpoint: cannot write " + dir + "/" + e.name);
        f.write(reinterpret_cast<const char*>(e.value.data()),
                static_cast<std::streamsize>(e.value.size() * sizeof(double)));
        if (!f) throw std::runtime_error("checkpoint: short write for " + dir + "/" + e.name);
    }
    manifest["tensors"] = tensors;
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("checkpoint: cannot write manifest in " + dir);
    mf << manifest.dump(2) << "\n";
}

ParamSet load_checkpoint(const std::string& dir, std::string* config_json_out) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("checkpoint: no manifest.json in " + dir);
    ordered_json manifest = ordered_json::parse(mf);
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw std::runtime_error("checkpoint: unsupported format version in " + dir);
    if (manifest.at("dtype").get<std::string>() != "float64-le")
        throw std::runtime_error("checkpoint: unsupported dtype in " + dir);
    if (config_json_out) {
        *config_json_out =
            manifest.contains("config") ? manifest["config"].dump() : std::string();
    }
    ParamSet params;
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const std::vector<int> shape = t.at("shape").get<std::vector<int>>();
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        std::vector<double> data(static_cast<std::size_t>(n));
        std::ifstream f(fs::path(dir) / name, std::ios::binary);
        if (!f) throw std::runtime_error("checkpoint: missing tensor file " + dir + "/" + name);
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (f.gcount() != static_cast<std::streamsize>(data.size() * sizeof(double)))
            throw std::runtime_error("checkpoint: truncated tensor file " + dir + "/" + name);
        params.add(name, Tensor::from_data(shape, std::move(data)));
    }
    return params;
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("hash: cannot open " + path);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    char buf[8192];
    while (f) {
        f.read(buf, sizeof(buf));
        const std::streamsize got = f.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ULL;
        }
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

}  // namespace awmark
