#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "dkn/model.hpp"

// Neutral weight format: manifest.json (tensor names, shapes, dtypes, byte
// offsets, checksum) plus one raw little-endian blob.

namespace dkn {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

inline constexpr const char* kWeightsFormat = "dkn-weights";
inline constexpr int kWeightsVersion = 1;

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error("sha256 failed");
    }
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

enum class DType { float32, float64 };

inline const char* to_string(DType t) { return t == DType::float32 ? "float32" : "float64"; }

inline DType parse_dtype(const std::string& s) {
    if (s == "float32") return DType::float32;
    if (s == "float64") return DType::float64;
    throw Error("unsupported tensor dtype '" + s + "'");
}

inline std::size_t dtype_size(DType t) { return t == DType::float32 ? 4 : 8; }

/// Accumulates tensors into a blob and its manifest entries.
class BlobWriter {
public:
    explicit BlobWriter(DType dtype) : dtype_(dtype) {}

    void add(const std::string& name, const Matrix& m) {
        entries_.push_back({{"name", name},
                            {"shape", {m.rows, m.cols}},
                            {"dtype", to_string(dtype_)},
                            {"offset", blob_.size()}});
        for (double x : m.v) {
            if (dtype_ == DType::float32) {
                const float f = static_cast<float>(x);
                blob_.append(reinterpret_cast<const char*>(&f), sizeof f);
            } else {
                blob_.append(reinterpret_cast<const char*>(&x), sizeof x);
            }
        }
    }

    const std::string& blob() const { return blob_; }
    const nlohmann::json& entries() const { return entries_; }

private:
    DType dtype_;
    std::string blob_;
    nlohmann::json entries_ = nlohmann::json::array();
};

struct TensorTable {
    nlohmann::json manifest;
    std::string blob;

    const nlohmann::json* find(const std::string& name) const {
        for (const auto& t : manifest.at("tensors")) {
            if (t.at("name") == name) return &t;
        }
        return nullptr;
    }

    Matrix read(const std::string& name, std::size_t rows, std::size_t cols) const {
        const auto* t = find(name);
        if (!t) throw Error("weights: tensor '" + name + "' missing from manifest");
        const auto shape = t->at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 2 || shape[0] != rows || shape[1] != cols) {
            throw Error("weights: tensor '" + name + "' has shape " + t->at("shape").dump() + ", expected [" +
                        std::to_string(rows) + "," + std::to_string(cols) + "]");
        }
        const DType dt = parse_dtype(t->at("dtype").get<std::string>());
        const auto offset = t->at("offset").get<std::size_t>();
        const std::size_t bytes = rows * cols * dtype_size(dt);
        if (offset > blob.size() || bytes > blob.size() - offset) {
            throw Error("weights: tensor '" + name + "' runs past the end of the blob");
        }
        Matrix m(rows, cols);
        const char* p = blob.data() + offset;
        for (std::size_t i = 0; i < m.v.size(); ++i) {
            if (dt == DType::float32) {
                float f;
                std::memcpy(&f, p + 4 * i, 4);
                m.v[i] = f;
            } else {
                std::memcpy(&m.v[i], p + 8 * i, 8);
            }
        }
        return m;
    }
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw MissingPrerequisite("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Reads manifest and blob and verifies the checksum.
inline TensorTable read_tensor_table(const std::filesystem::path& dir) {
    TensorTable t;
    t.manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
    if (t.manifest.value("format", "") != kWeightsFormat) throw Error("weights: unknown manifest format");
    if (t.manifest.value("version", 0) != kWeightsVersion) throw Error("weights: unsupported manifest version");
    t.blob = slurp(dir / t.manifest.at("blob").get<std::string>());
    const auto expected = t.manifest.at("checksum").at("sha256").get<std::string>();
    if (sha256_hex(t.blob) != expected) throw Error("weights: blob checksum mismatch");
    return t;
}

inline void write_tensor_table(const std::filesystem::path& dir, nlohmann::json manifest, const BlobWriter& w) {
    std::filesystem::create_directories(dir);
    manifest["format"] = kWeightsFormat;
    manifest["version"] = kWeightsVersion;
    manifest["blob"] = "weights.bin";
    manifest["checksum"] = {{"sha256", sha256_hex(w.blob())}};
    manifest["tensors"] = w.entries();
    spit(dir / "weights.bin", w.blob());
    spit(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers}, {"d_model", c.d_model},     {"d_ff", c.d_ff},
            {"n_heads", c.n_heads},   {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
            {"seed", c.seed},         {"init_std", c.init_std},   {"mlp_init_std", c.mlp_init_std}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.init_std = j.at("init_std").get<double>();
    c.mlp_init_std = j.value("mlp_init_std", c.init_std);
    c.validate();
    return c;
}

/// Full checkpoint; float64 keeps training state exact.
inline void save_model(const std::filesystem::path& dir, const ToyTransformer& m, const Vocab& vocab,
                       const std::string& name = "toy", DType dtype = DType::float64,
                       const nlohmann::json& extra = nlohmann::json::object()) {
    BlobWriter w(dtype);
    m.for_each_param([&](const std::string& n, const Matrix& p) { w.add(n, p); });
    nlohmann::json manifest{{"model", name},
                            {"config", to_json(m.config)},
                            {"n_layers", m.config.n_layers},
                            {"d_model", m.config.d_model},
                            {"d_ff", m.config.d_ff},
                            {"vocab", vocab.words()}};
    for (const auto& [k, v] : extra.items()) manifest[k] = v;
    write_tensor_table(dir, std::move(manifest), w);
}

struct LoadedModel {
    ToyTransformer model;
    Vocab vocab;
    nlohmann::json manifest;
};

inline LoadedModel load_model(const std::filesystem::path& dir) {
    const TensorTable t = read_tensor_table(dir);
    if (!t.manifest.contains("config")) throw Error("weights: manifest has no model config (MLP-only export?)");
    LoadedModel out{ToyTransformer::zeros(model_config_from_json(t.manifest.at("config"))), Vocab(), t.manifest};
    out.model.for_each_param([&](const std::string& n, Matrix& p) { p = t.read(n, p.rows, p.cols); });
    if (t.manifest.contains("vocab")) {
        const auto words = t.manifest.at("vocab").get<std::vector<std::string>>();
        Vocab v;
        for (const auto& word : words) v.add(word);
        if (v.words() != words) throw Error("weights: vocabulary does not start with the reserved tokens");
        out.vocab = std::move(v);
    }
    if (out.vocab.size() != out.model.config.vocab_size) throw Error("weights: vocabulary size mismatch");
    if (!out.model.all_finite()) throw NumericError("weights: non-finite values in checkpoint");
    return out;
}

/// MLP matrices only, as produced by an exporter for a real checkpoint.
struct MlpWeights {
    std::size_t n_layers = 0, d_model = 0, d_ff = 0;
    std::vector<Matrix> fc;    // d_model x d_ff
    std::vector<Matrix> proj;  // d_ff x d_model

    std::span<const double> proj_row(const NeuronId& n) const { return proj.at(n.layer).row(n.pos); }

    std::vector<double> fc_column(const NeuronId& n) const {
        const Matrix& w = fc.at(n.layer);
        std::vector<double> col(w.rows);
        for (std::size_t i = 0; i < w.rows; ++i) col[i] = w(i, n.pos);
        return col;
    }

    bool valid(const NeuronId& n) const { return n.layer < n_layers && n.pos < d_ff; }

    static MlpWeights from_model(const ToyTransformer& m) {
        MlpWeights w{m.config.n_layers, m.config.d_model, m.config.d_ff, {}, {}};
        for (const auto& l : m.layers) {
            w.fc.push_back(l.fc_w);
            w.proj.push_back(l.proj_w);
        }
        return w;
    }
};

inline std::string fc_name(std::size_t l) { return "h." + std::to_string(l) + ".mlp.c_fc.weight"; }
inline std::string proj_name(std::size_t l) { return "h." + std::to_string(l) + ".mlp.c_proj.weight"; }

inline void save_mlp_weights(const std::filesystem::path& dir, const MlpWeights& w, const std::string& name) {
    BlobWriter b(DType::float32);
    for (std::size_t l = 0; l < w.n_layers; ++l) {
        b.add(fc_name(l), w.fc[l]);
        b.add(proj_name(l), w.proj[l]);
    }
    write_tensor_table(dir, {{"model", name}, {"n_layers", w.n_layers}, {"d_model", w.d_model}, {"d_ff", w.d_ff}}, b);
}

/// Loads the MLP matrices of either an MLP-only export or a full checkpoint.
inline MlpWeights load_mlp_weights(const std::filesystem::path& dir) {
    const TensorTable t = read_tensor_table(dir);
    MlpWeights w;
    w.n_layers = t.manifest.at("n_layers").get<std::size_t>();
    w.d_model = t.manifest.at("d_model").get<std::size_t>();
    w.d_ff = t.manifest.at("d_ff").get<std::size_t>();
    if (w.n_layers == 0 || w.d_model == 0 || w.d_ff == 0) throw Error("weights: empty MLP dimensions");
    for (std::size_t l = 0; l < w.n_layers; ++l) {
        w.fc.push_back(t.read(fc_name(l), w.d_model, w.d_ff));
        w.proj.push_back(t.read(proj_name(l), w.d_ff, w.d_model));
    }
    return w;
}

}  // namespace dkn
