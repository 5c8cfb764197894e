#pragma once

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "odelm/model.hpp"

namespace odelm {

// Single-file checkpoint: magic, version, config text, then every named
// parameter as (name, dtype, trainable, shape, raw little-endian bytes).
// Loading reconstructs the model from the embedded config and fails closed
// on any name/shape mismatch.
namespace ckpt {

constexpr char kMagic[8] = {'O', 'D', 'L', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class S, class V>
void write_pod(S& s, const V& v) {
    s.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class S, class V>
void read_pod(S& s, V& v) {
    s.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!s) throw IoError("checkpoint: truncated file");
}

inline std::string config_text(const ModelConfig& cfg, ModelKind kind) {
    std::ostringstream os;
    os << "kind=" << kind_name(kind) << "\n";
    for (const auto& [k, v] : cfg.to_kv()) os << k << "=" << v << "\n";
    return os.str();
}

inline std::pair<ModelConfig, ModelKind> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto it = kv.find("kind");
    if (it == kv.end()) throw IoError("checkpoint: config block missing model kind");
    const ModelKind kind = it->second == "hybrid" ? ModelKind::hybrid : ModelKind::baseline;
    return {ModelConfig::from_kv(kv), kind};
}

}  // namespace ckpt

template <class T>
void save_checkpoint(const TransformerLM<T>& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    f.write(ckpt::kMagic, sizeof(ckpt::kMagic));
    ckpt::write_pod(f, ckpt::kVersion);
    const std::string cfg = ckpt::config_text(model.config(), model.kind());
    ckpt::write_pod(f, static_cast<std::uint64_t>(cfg.size()));
    f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    ckpt::write_pod(f, static_cast<std::uint64_t>(model.params().size()));
    for (const auto& [name, e] : model.params()) {
        ckpt::write_pod(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        ckpt::write_pod(f, static_cast<std::uint8_t>(e.value.dtype()));
        ckpt::write_pod(f, static_cast<std::uint8_t>(e.trainable ? 1 : 0));
        ckpt::write_pod(f, static_cast<std::uint32_t>(e.value.rank()));
        for (int d = 0; d < e.value.rank(); ++d)
            ckpt::write_pod(f, static_cast<std::uint64_t>(e.value.dim(d)));
        const std::uint64_t bytes = static_cast<std::uint64_t>(e.value.numel()) * sizeof(T);
        ckpt::write_pod(f, bytes);
        f.write(reinterpret_cast<const char*>(e.value.data()), static_cast<std::streamsize>(bytes));
    }
    if (!f) throw IoError("checkpoint: write to '" + path + "' failed");
}

template <class T>
TransformerLM<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, ckpt::kMagic, sizeof(magic)) != 0)
        throw IoError("checkpoint: '" + path + "' is not a model checkpoint");
    std::uint32_t version = 0;
    ckpt::read_pod(f, version);
    if (version != ckpt::kVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    std::uint64_t cfg_len = 0;
    ckpt::read_pod(f, cfg_len);
    std::string cfg_text(cfg_len, '\0');
    f.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
    if (!f) throw IoError("checkpoint: truncated config block");
    auto [cfg, kind] = ckpt::parse_config_text(cfg_text);

    TransformerLM<T> model(cfg, kind, 0);
    std::uint64_t n_params = 0;
    ckpt::read_pod(f, n_params);
    if (n_params != model.params().size())
        throw ContractViolation("checkpoint: parameter count " + std::to_string(n_params) +
                                " does not match config expectation " +
                                std::to_string(model.params().size()));
    for (std::uint64_t i = 0; i < n_params; ++i) {
        std::uint32_t name_len = 0;
        ckpt::read_pod(f, name_len);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        std::uint8_t dtype = 0, trainable = 0;
        ckpt::read_pod(f, dtype);
        ckpt::read_pod(f, trainable);
        std::uint32_t rank = 0;
        ckpt::read_pod(f, rank);
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            std::uint64_t ext = 0;
            ckpt::read_pod(f, ext);
            shape[d] = static_cast<std::int64_t>(ext);
        }
        std::uint64_t bytes = 0;
        ckpt::read_pod(f, bytes);
        if (!model.params().has(name))
            throw ContractViolation("checkpoint: unexpected parameter '" + name + "'");
        auto& entry = model.params().at(name);
        if (entry.value.shape() != shape)
            throw ContractViolation("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) +
                                    ", config expects " + shape_str(entry.value.shape()));
        const std::int64_t numel = shape_numel(shape);
        if (static_cast<Dtype>(dtype) == Dtype::f32) {
            if (bytes != static_cast<std::uint64_t>(numel) * 4) throw IoError("checkpoint: bad payload size");
            std::vector<float> raw(static_cast<std::size_t>(numel));
            f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
            for (std::int64_t j = 0; j < numel; ++j) entry.value[j] = static_cast<T>(raw[static_cast<std::size_t>(j)]);
        } else {
            if (bytes != static_cast<std::uint64_t>(numel) * 8) throw IoError("checkpoint: bad payload size");
            std::vector<double> raw(static_cast<std::size_t>(numel));
            f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
            for (std::int64_t j = 0; j < numel; ++j) entry.value[j] = static_cast<T>(raw[static_cast<std::size_t>(j)]);
        }
        if (!f) throw IoError("checkpoint: truncated parameter payload");
        entry.trainable = trainable != 0;
        entry.grad = Tensor<T>::zeros(entry.value.shape());
    }
    return model;
}

}  // namespace odelm
