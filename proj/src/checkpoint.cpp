#include "peftkit/checkpoint.hpp"

#include <array>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace peftkit {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::array<uint64_t, 256>& crc_table() {
    static const std::array<uint64_t, 256> table = [] {
        constexpr uint64_t poly = 0xC96C5795D7870F42ULL;
        std::array<uint64_t, 256> t{};
        for (uint64_t i = 0; i < 256; ++i) {
            uint64_t c = i;
            for (int b = 0; b < 8; ++b) c = (c & 1) ? (c >> 1) ^ poly : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

void append_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void append_f32_le(std::string& out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

uint64_t read_u64_le(std::string_view bytes, size_t& off) {
    if (off + 8 > bytes.size()) throw DataError("tensor record truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(bytes[off + i])) << (8 * i);
    off += 8;
    return v;
}

float read_f32_le(std::string_view bytes, size_t& off) {
    if (off + 4 > bytes.size()) throw DataError("tensor record truncated");
    uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<uint32_t>(static_cast<uint8_t>(bytes[off + i])) << (8 * i);
    off += 4;
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_file(const fs::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write file: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path.string());
}

struct TensorEntry {
    std::string name;
    const Tensor* dense = nullptr;
    const QuantizedMatrix* q4 = nullptr;
};

// Canonical checkpoint order; also the order checksums are computed in.
std::vector<TensorEntry> enumerate_model_tensors(const TransformerModel& model) {
    std::vector<TensorEntry> out;
    auto push_site = [&out](const std::string& name, const LinearSite& site) {
        if (site.quantized()) {
            out.push_back({name, nullptr, site.q4.get()});
        } else {
            out.push_back({name, &site.weight, nullptr});
        }
    };
    out.push_back({"token_embedding", &model.token_embedding, nullptr});
    out.push_back({"pos_embedding", &model.pos_embedding, nullptr});
    for (size_t i = 0; i < model.layers.size(); ++i) {
        const LayerParams& l = model.layers[i];
        push_site(site_id(i, "attn.q"), l.w_q);
        push_site(site_id(i, "attn.k"), l.w_k);
        push_site(site_id(i, "attn.v"), l.w_v);
        push_site(site_id(i, "attn.o"), l.w_o);
        push_site(site_id(i, "ffn.w1"), l.w1);
        out.push_back({site_id(i, "ffn.b1"), &l.b1, nullptr});
        push_site(site_id(i, "ffn.w2"), l.w2);
        out.push_back({site_id(i, "ffn.b2"), &l.b2, nullptr});
        out.push_back({site_id(i, "ln1.gamma"), &l.ln1_gamma, nullptr});
        out.push_back({site_id(i, "ln1.beta"), &l.ln1_beta, nullptr});
        out.push_back({site_id(i, "ln2.gamma"), &l.ln2_gamma, nullptr});
        out.push_back({site_id(i, "ln2.beta"), &l.ln2_beta, nullptr});
    }
    push_site("output_proj", model.output_proj);
    return out;
}

json config_to_json(const TransformerConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
                {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
                {"ffn_variant", to_string(c.ffn_variant)}};
}

TransformerConfig config_from_json(const json& j) {
    TransformerConfig c;
    c.vocab_size = j.at("vocab_size").get<size_t>();
    c.d_model = j.at("d_model").get<size_t>();
    c.n_heads = j.at("n_heads").get<size_t>();
    c.n_layers = j.at("n_layers").get<size_t>();
    c.d_ff = j.at("d_ff").get<size_t>();
    c.max_seq_len = j.at("max_seq_len").get<size_t>();
    c.ffn_variant = ffn_variant_from_string(j.at("ffn_variant").get<std::string>());
    c.validate();
    return c;
}

// Zero-filled model shell with the right shapes; load fills the values.
TransformerModel make_shell(const TransformerConfig& config) {
    TransformerModel m;
    m.config = config;
    m.token_embedding = Tensor::zeros({config.vocab_size, config.d_model});
    m.pos_embedding = Tensor::zeros({config.max_seq_len, config.d_model});
    m.layers.resize(config.n_layers);
    for (auto& l : m.layers) {
        l.w_q.weight = Tensor::zeros({config.d_model, config.d_model});
        l.w_k.weight = Tensor::zeros({config.d_model, config.d_model});
        l.w_v.weight = Tensor::zeros({config.d_model, config.d_model});
        l.w_o.weight = Tensor::zeros({config.d_model, config.d_model});
        l.w1.weight = Tensor::zeros({config.d_model, config.d_ff});
        l.b1 = Tensor::zeros({config.d_ff});
        l.w2.weight = Tensor::zeros({config.d_ff, config.d_model});
        l.b2 = Tensor::zeros({config.d_model});
        l.ln1_gamma = Tensor::zeros({config.d_model});
        l.ln1_beta = Tensor::zeros({config.d_model});
        l.ln2_gamma = Tensor::zeros({config.d_model});
        l.ln2_beta = Tensor::zeros({config.d_model});
    }
    m.output_proj.weight = Tensor::zeros({config.d_model, config.vocab_size});
    return m;
}

struct BlobEntry {
    std::string name;
    std::string dtype;
    std::vector<size_t> shape;
    size_t block_size = 0;
    std::string bytes;
};

void write_checkpoint_files(const fs::path& dir, json manifest,
                            const std::vector<BlobEntry>& entries, bool force) {
    if (fs::exists(dir / "manifest.json") && !force) {
        throw UsageError("checkpoint already exists at " + dir.string() +
                         " (use --force to overwrite)");
    }
    fs::create_directories(dir);

    std::string blob;
    json tensors = json::array();
    for (const auto& e : entries) {
        json t{{"name", e.name},
               {"dtype", e.dtype},
               {"shape", e.shape},
               {"offset", blob.size()},
               {"length", e.bytes.size()},
               {"crc64", crc64_hex(crc64(e.bytes))}};
        if (e.dtype == "q4") t["block_size"] = e.block_size;
        tensors.push_back(std::move(t));
        blob += e.bytes;
    }
    manifest["tensors"] = std::move(tensors);
    write_file(dir / "weights.bin", blob);
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct LoadedCheckpoint {
    json manifest;
    std::string blob;
};

LoadedCheckpoint read_checkpoint_files(const fs::path& dir) {
    LoadedCheckpoint ck;
    const std::string manifest_text = read_file(dir / "manifest.json");
    try {
        ck.manifest = json::parse(manifest_text);
    } catch (const json::exception& e) {
        throw DataError("invalid checkpoint manifest " + (dir / "manifest.json").string() +
                        ": " + e.what());
    }
    if (ck.manifest.value("format_version", -1) != kCheckpointFormatVersion) {
        throw DataError("unsupported checkpoint format version in " + dir.string());
    }
    ck.blob = read_file(dir / "weights.bin");
    return ck;
}

std::string slice_entry(const LoadedCheckpoint& ck, const json& t) {
    const size_t offset = t.at("offset").get<size_t>();
    const size_t length = t.at("length").get<size_t>();
    if (offset + length > ck.blob.size()) {
        throw DataError("tensor '" + t.at("name").get<std::string>() +
                        "' extends past the end of weights.bin");
    }
    std::string bytes = ck.blob.substr(offset, length);
    if (crc64_hex(crc64(bytes)) != t.at("crc64").get<std::string>()) {
        throw DataError("checksum mismatch for tensor '" + t.at("name").get<std::string>() +
                        "'");
    }
    return bytes;
}

}  // namespace

void Crc64::update(const void* data, size_t len) {
    const auto* p = static_cast<const uint8_t*>(data);
    const auto& table = crc_table();
    for (size_t i = 0; i < len; ++i) crc_ = table[(crc_ ^ p[i]) & 0xFF] ^ (crc_ >> 8);
}

uint64_t crc64(std::string_view bytes) {
    Crc64 c;
    c.update(bytes);
    return c.value();
}

uint64_t file_crc64(const fs::path& path) { return crc64(read_file(path)); }

std::string crc64_hex(uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::string serialize_tensor(const Tensor& t) {
    std::string out;
    out.reserve(8 + 8 * t.rank() + 4 * t.size());
    append_u64_le(out, t.rank());
    for (size_t d : t.shape()) append_u64_le(out, d);
    for (float v : t.data()) append_f32_le(out, v);
    return out;
}

Tensor deserialize_tensor(std::string_view bytes) {
    size_t off = 0;
    const uint64_t rank = read_u64_le(bytes, off);
    if (rank > 8) throw DataError("implausible tensor rank " + std::to_string(rank));
    std::vector<size_t> shape(rank);
    size_t n = 1;
    for (uint64_t i = 0; i < rank; ++i) {
        shape[i] = read_u64_le(bytes, off);
        n *= shape[i];
    }
    std::vector<float> data(n);
    for (size_t i = 0; i < n; ++i) data[i] = read_f32_le(bytes, off);
    if (off != bytes.size()) throw DataError("trailing bytes after tensor record");
    return Tensor(std::move(shape), std::move(data));
}

std::string serialize_q4(const QuantizedMatrix& q) {
    std::string out;
    append_u64_le(out, q.rows);
    append_u64_le(out, q.cols);
    append_u64_le(out, q.block_size);
    out.append(reinterpret_cast<const char*>(q.codes.data()), q.codes.size());
    for (float s : q.scales) append_f32_le(out, s);
    return out;
}

QuantizedMatrix deserialize_q4(std::string_view bytes) {
    size_t off = 0;
    QuantizedMatrix q;
    q.rows = read_u64_le(bytes, off);
    q.cols = read_u64_le(bytes, off);
    q.block_size = read_u64_le(bytes, off);
    if (q.block_size < 1) throw DataError("q4 record has zero block size");
    const size_t code_bytes = (q.num_elements() + 1) / 2;
    if (off + code_bytes > bytes.size()) throw DataError("q4 record truncated");
    q.codes.assign(bytes.begin() + static_cast<long>(off),
                   bytes.begin() + static_cast<long>(off + code_bytes));
    off += code_bytes;
    q.scales.resize(q.num_blocks());
    for (auto& s : q.scales) s = read_f32_le(bytes, off);
    if (off != bytes.size()) throw DataError("trailing bytes after q4 record");
    return q;
}

bool checkpoint_exists(const fs::path& dir) { return fs::exists(dir / "manifest.json"); }

std::string checkpoint_kind(const fs::path& dir) {
    const auto ck = read_checkpoint_files(dir);
    return ck.manifest.value("kind", "");
}

void save_model_checkpoint(const fs::path& dir, const TransformerModel& model, bool force) {
    json manifest{{"format_version", kCheckpointFormatVersion},
                  {"kind", "model"},
                  {"model_config", config_to_json(model.config)}};
    std::vector<BlobEntry> entries;
    for (const auto& e : enumerate_model_tensors(model)) {
        BlobEntry b;
        b.name = e.name;
        if (e.q4 != nullptr) {
            b.dtype = "q4";
            b.shape = {e.q4->rows, e.q4->cols};
            b.block_size = e.q4->block_size;
            b.bytes = serialize_q4(*e.q4);
        } else {
            b.dtype = "f32";
            b.shape = e.dense->shape();
            b.bytes = serialize_tensor(*e.dense);
        }
        entries.push_back(std::move(b));
    }
    write_checkpoint_files(dir, std::move(manifest), entries, force);
}

TransformerModel load_model_checkpoint(const fs::path& dir) {
    const auto ck = read_checkpoint_files(dir);
    if (ck.manifest.value("kind", "") != "model") {
        throw DataError(dir.string() + " is not a model checkpoint");
    }
    TransformerModel model = make_shell(config_from_json(ck.manifest.at("model_config")));

    std::map<std::string, Tensor*> dense_slots;
    for (auto& [name, t] : model.named_parameters()) dense_slots[name] = t;
    std::map<std::string, LinearSite*> site_slots;
    for (auto& [name, s] : model.linear_sites()) site_slots[name] = s;

    size_t loaded = 0;
    for (const auto& t : ck.manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const std::string dtype = t.at("dtype").get<std::string>();
        const std::string bytes = slice_entry(ck, t);
        if (dtype == "f32") {
            auto it = dense_slots.find(name);
            if (it == dense_slots.end()) throw DataError("unexpected tensor '" + name + "'");
            Tensor loaded_t = deserialize_tensor(bytes);
            if (loaded_t.shape() != it->second->shape()) {
                throw DataError("tensor '" + name + "' has shape " +
                                detail::shape_str(loaded_t.shape()) + ", expected " +
                                detail::shape_str(it->second->shape()));
            }
            *it->second = std::move(loaded_t);
        } else if (dtype == "q4") {
            auto it = site_slots.find(name);
            if (it == site_slots.end()) throw DataError("unexpected q4 tensor '" + name + "'");
            QuantizedMatrix q = deserialize_q4(bytes);
            if (q.rows != it->second->weight.rows() || q.cols != it->second->weight.cols()) {
                throw DataError("q4 tensor '" + name + "' does not match site shape");
            }
            it->second->q4 = std::make_shared<const QuantizedMatrix>(std::move(q));
            it->second->weight = Tensor();
        } else {
            throw DataError("unknown dtype '" + dtype + "' for tensor '" + name + "'");
        }
        ++loaded;
    }
    const size_t expected = enumerate_model_tensors(model).size();
    if (loaded != expected) {
        throw DataError("checkpoint holds " + std::to_string(loaded) + " tensors, expected " +
                        std::to_string(expected));
    }
    return model;
}

void save_adapter_checkpoint(const fs::path& dir, const PeftSet& peft, bool force) {
    json meta{{"method", to_string(peft.method)}, {"base_mode", to_string(peft.base_mode)}};
    json sites = json::array();
    for (const auto& [id, ad] : peft.lora) {
        sites.push_back({{"site_id", id}, {"rank", ad.rank}, {"scale", ad.scale}});
    }
    for (const auto& [id, ad] : peft.adapters) sites.push_back({{"site_id", id}});
    for (const auto& [layer, p] : peft.prefixes) {
        sites.push_back({{"layer", layer}, {"prefix_len", p.prefix_len}});
    }
    meta["sites"] = std::move(sites);

    json manifest{{"format_version", kCheckpointFormatVersion},
                  {"kind", "adapter"},
                  {"peft", std::move(meta)}};
    std::vector<BlobEntry> entries;
    for (const auto& [name, t] : peft.named_parameters()) {
        entries.push_back({name, "f32", t->shape(), 0, serialize_tensor(*t)});
    }
    write_checkpoint_files(dir, std::move(manifest), entries, force);
}

PeftSet load_adapter_checkpoint(const fs::path& dir) {
    const auto ck = read_checkpoint_files(dir);
    if (ck.manifest.value("kind", "") != "adapter") {
        throw DataError(dir.string() + " is not an adapter checkpoint");
    }
    const json& meta = ck.manifest.at("peft");
    PeftSet set;
    set.method = peft_method_from_string(meta.at("method").get<std::string>());
    set.base_mode = base_mode_from_string(meta.at("base_mode").get<std::string>());

    std::map<std::string, Tensor> tensors;
    for (const auto& t : ck.manifest.at("tensors")) {
        tensors.emplace(t.at("name").get<std::string>(),
                        deserialize_tensor(slice_entry(ck, t)));
    }
    auto take = [&tensors](const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw DataError("adapter checkpoint missing tensor '" + name + "'");
        Tensor t = std::move(it->second);
        t.set_requires_grad(true);
        return t;
    };

    for (const auto& s : meta.at("sites")) {
        if (set.method == PeftMethod::lora) {
            LoraAdapter ad;
            ad.site_id = s.at("site_id").get<std::string>();
            ad.rank = s.at("rank").get<size_t>();
            ad.scale = s.at("scale").get<float>();
            ad.a = take(ad.site_id + ".lora_a");
            ad.b = take(ad.site_id + ".lora_b");
            set.lora.emplace(ad.site_id, std::move(ad));
        } else if (set.method == PeftMethod::adapter) {
            AdapterLayer ad;
            ad.site_id = s.at("site_id").get<std::string>();
            ad.w_down = take(ad.site_id + ".down");
            ad.w_up = take(ad.site_id + ".up");
            set.adapters.emplace(ad.site_id, std::move(ad));
        } else {
            PrefixAdapter p;
            p.layer = s.at("layer").get<size_t>();
            p.prefix_len = s.at("prefix_len").get<size_t>();
            p.p_k = take("layer" + std::to_string(p.layer) + ".prefix.k");
            p.p_v = take("layer" + std::to_string(p.layer) + ".prefix.v");
            set.prefixes.emplace(p.layer, std::move(p));
        }
    }
    return set;
}

uint64_t model_checksum(const TransformerModel& model) {
    Crc64 c;
    for (const auto& e : enumerate_model_tensors(model)) {
        const std::string bytes =
            e.q4 != nullptr ? serialize_q4(*e.q4) : serialize_tensor(*e.dense);
        c.update(bytes);
    }
    return c.value();
}

uint64_t peft_checksum(const PeftSet& peft) {
    Crc64 c;
    for (const auto& [name, t] : peft.named_parameters()) c.update(serialize_tensor(*t));
    return c.value();
}

json RunManifest::to_json() const {
    json inputs = json::object();
    for (const auto& [path, digest] : input_digests) inputs[path] = crc64_hex(digest);
    return json{{"command", command},
                {"config", config},
                {"seed", seed},
                {"version", kToolVersion},
                {"inputs", std::move(inputs)},
                {"started_unix_ms", started_unix_ms},
                {"finished_unix_ms", finished_unix_ms}};
}

void write_run_manifest(const fs::path& path, const RunManifest& manifest) {
    write_file(path, manifest.to_json().dump(2) + "\n");
}

}  // namespace peftkit
