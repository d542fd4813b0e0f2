// Checkpoint container: `<stem>.json` manifest (name → shape, dtype,
// byte offset) plus `<stem>.bin`, one little-endian blob. Also used for
// feature matrices.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "urlbert/nn/param_store.hpp"

namespace urlbert::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

inline constexpr int checkpoint_version = 1;

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

template <class T>
constexpr const char* dtype_name() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? "float32" : "float64";
}

inline std::filesystem::path manifest_path(const std::filesystem::path& stem) {
    return std::filesystem::path(stem.string() + ".json");
}
inline std::filesystem::path blob_path(const std::filesystem::path& stem) {
    return std::filesystem::path(stem.string() + ".bin");
}

/// Writes params as dtype S. Returns the manifest that was written.
template <class S = float, class T>
nlohmann::json save_checkpoint(const ParamStore<T>& params, const std::filesystem::path& stem,
                               const nlohmann::json& metadata = nlohmann::json::object()) {
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
    nlohmann::json m;
    m["version"] = checkpoint_version;
    m["dtype"] = dtype_name<S>();
    m["blob"] = blob_path(stem).filename().string();
    m["step_count"] = params.step_count;
    m["tensors"] = nlohmann::json::array();
    std::ofstream blob(blob_path(stem), std::ios::binary);
    if (!blob) throw CheckpointError("cannot write " + blob_path(stem).string());
    std::uint64_t offset = 0;
    for (const auto& [name, p] : params.items()) {
        std::vector<S> buf(p.data().begin(), p.data().end());
        const auto nbytes = buf.size() * sizeof(S);
        blob.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(nbytes));
        m["tensors"].push_back({{"name", name}, {"shape", p.shape()}, {"dtype", dtype_name<S>()},
                                {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
    }
    if (!blob) throw CheckpointError("write failure on " + blob_path(stem).string());
    m["checksum"] = hex64(params.template cast<S>().checksum());
    m["metadata"] = metadata;
    std::ofstream man(manifest_path(stem));
    if (!man) throw CheckpointError("cannot write " + manifest_path(stem).string());
    man << m.dump(2) << '\n';
    return m;
}

inline nlohmann::json read_manifest(const std::filesystem::path& stem) {
    std::ifstream in(manifest_path(stem));
    if (!in) throw CheckpointError("cannot read " + manifest_path(stem).string());
    auto m = nlohmann::json::parse(in);
    if (m.value("version", 0) != checkpoint_version) {
        throw CheckpointError(manifest_path(stem).string() + ": unsupported checkpoint version");
    }
    return m;
}

template <class T>
struct LoadedCheckpoint {
    ParamStore<T> params;
    nlohmann::json manifest;
    nlohmann::json& metadata() { return manifest["metadata"]; }
};

namespace detail {

template <class S>
ParamStore<S> read_blob(const nlohmann::json& manifest, const std::vector<char>& bytes) {
    ParamStore<S> ps;
    for (const auto& t : manifest.at("tensors")) {
        const auto name = t.at("name").template get<std::string>();
        const auto shape = t.at("shape").template get<Shape>();
        const auto offset = t.at("offset").template get<std::uint64_t>();
        const auto nbytes = t.at("nbytes").template get<std::uint64_t>();
        if (t.at("dtype").template get<std::string>() != dtype_name<S>()) {
            throw CheckpointError(name + ": dtype differs from the checkpoint dtype");
        }
        if (nbytes != numel(shape) * sizeof(S) || offset + nbytes > bytes.size()) {
            throw CheckpointError(name + ": blob range does not match shape " + shape_str(shape));
        }
        std::vector<S> vals(numel(shape));
        std::memcpy(vals.data(), bytes.data() + offset, nbytes);
        ps.add(name, shape, std::move(vals));
    }
    if (manifest.contains("checksum") && manifest["checksum"] != hex64(ps.checksum())) {
        throw CheckpointError("checksum mismatch: parameters differ from the manifest");
    }
    return ps;
}

}  // namespace detail

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& stem) {
    LoadedCheckpoint<T> out;
    out.manifest = read_manifest(stem);
    const auto bp = stem.parent_path() / out.manifest.at("blob").template get<std::string>();
    std::ifstream blob(bp, std::ios::binary);
    if (!blob) throw CheckpointError("cannot read " + bp.string());
    const std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
    const auto dtype = out.manifest.value("dtype", std::string{});
    if (dtype == "float32") {
        out.params = detail::read_blob<float>(out.manifest, bytes).template cast<T>();
    } else if (dtype == "float64") {
        out.params = detail::read_blob<double>(out.manifest, bytes).template cast<T>();
    } else {
        throw CheckpointError(manifest_path(stem).string() + ": unknown dtype " + dtype);
    }
    out.params.step_count = out.manifest.value("step_count", std::size_t{0});
    if (!out.manifest.contains("metadata")) out.manifest["metadata"] = nlohmann::json::object();
    return out;
}

}  // namespace urlbert::nn
