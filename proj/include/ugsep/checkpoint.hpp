#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ugsep/model.hpp"

namespace ugsep {

// ---------------------------------------------------------------------------
// Checkpoint container. Little-endian on every host, so golden files are
// portable:
//
//   "UGSEP"                             magic, 5 bytes
//   u32  version (currently 1)
//   u32  config length + config JSON bytes
//   u32  record count
//   per record:
//     u32  name length + name bytes
//     u8   dtype tag: 1 = f32, 2 = f64, 3 = q8
//     u8   quant format (q8 only): 1 = int8, 2 = fp8-e4m3
//     u32  ndim, then u64 extents
//     payload, row-major; q8 stores codes then one f32 scale per row
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[5] = {'U', 'G', 'S', 'E', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class RecordDtype : std::uint8_t { F32 = 1, F64 = 2, Q8 = 3 };

struct CheckpointRecord {
    std::string name;
    RecordDtype dtype = RecordDtype::F64;
    TensorF f32;
    TensorD f64;
    QuantizedMatrix q8;

    std::vector<std::size_t> shape() const {
        switch (dtype) {
            case RecordDtype::F32: return f32.shape();
            case RecordDtype::F64: return f64.shape();
            case RecordDtype::Q8: return {q8.rows(), q8.cols()};
        }
        return {};
    }
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string config_json;
    std::vector<CheckpointRecord> records;

    const CheckpointRecord* find(const std::string& name) const {
        for (const auto& r : records) {
            if (r.name == name) return &r;
        }
        return nullptr;
    }

    bool any_quantized() const {
        for (const auto& r : records) {
            if (r.dtype == RecordDtype::Q8) return true;
        }
        return false;
    }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
public:
    Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

    std::uint32_t u32() {
        const char* p = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        const char* p = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }

    std::string bytes(std::size_t n) { return std::string(take(n), n); }

private:
    const char* take(std::size_t n) {
        if (pos_ + n > buf_.size()) {
            throw std::runtime_error("checkpoint: truncated file " + path_);
        }
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    const std::string& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out.append(kCheckpointMagic, 5);
    detail::put_u32(out, ckpt.version);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.config_json.size()));
    out.append(ckpt.config_json);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.records.size()));
    for (const auto& r : ckpt.records) {
        detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out.append(r.name);
        out.push_back(static_cast<char>(r.dtype));
        if (r.dtype == RecordDtype::Q8) {
            out.push_back(static_cast<char>(r.q8.scheme.format));
        }
        const auto shape = r.shape();
        detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
        for (std::size_t e : shape) detail::put_u64(out, e);
        switch (r.dtype) {
            case RecordDtype::F32:
                for (float v : r.f32.flat()) detail::put_f32(out, v);
                break;
            case RecordDtype::F64:
                for (double v : r.f64.flat()) detail::put_f64(out, v);
                break;
            case RecordDtype::Q8:
                for (std::int8_t c : r.q8.codes) out.push_back(static_cast<char>(c));
                for (float s : r.q8.scales) detail::put_f32(out, s);
                break;
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw std::runtime_error("checkpoint: write failed for " + path);
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("checkpoint: cannot open " + path);
    }
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::Reader r(buf, path);
    if (r.bytes(5) != std::string(kCheckpointMagic, 5)) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version " +
                                 std::to_string(ckpt.version) + " in " + path + ", expected " +
                                 std::to_string(kCheckpointVersion));
    }
    ckpt.config_json = r.bytes(r.u32());
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointRecord rec;
        rec.name = r.bytes(r.u32());
        rec.dtype = static_cast<RecordDtype>(r.u8());
        QuantFormat qf = QuantFormat::Int8Symmetric;
        if (rec.dtype == RecordDtype::Q8) {
            qf = static_cast<QuantFormat>(r.u8());
        }
        const std::uint32_t ndim = r.u32();
        std::vector<std::size_t> shape;
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            shape.push_back(static_cast<std::size_t>(r.u64()));
            numel *= shape.back();
        }
        switch (rec.dtype) {
            case RecordDtype::F32: {
                std::vector<float> data(numel);
                for (auto& v : data) v = r.f32();
                rec.f32 = TensorF(shape, std::move(data));
                break;
            }
            case RecordDtype::F64: {
                std::vector<double> data(numel);
                for (auto& v : data) v = r.f64();
                rec.f64 = TensorD(shape, std::move(data));
                break;
            }
            case RecordDtype::Q8: {
                if (shape.size() != 2) {
                    throw std::runtime_error("checkpoint: q8 record " + rec.name +
                                             " must be 2-D");
                }
                rec.q8.n_rows = shape[0];
                rec.q8.n_cols = shape[1];
                rec.q8.scheme.format = qf;
                const std::string codes = r.bytes(numel);
                rec.q8.codes.resize(numel);
                for (std::size_t c = 0; c < numel; ++c) {
                    rec.q8.codes[c] = static_cast<std::int8_t>(codes[c]);
                }
                rec.q8.scales.resize(shape[0]);
                for (auto& s : rec.q8.scales) s = r.f32();
                break;
            }
            default:
                throw std::runtime_error("checkpoint: unknown dtype tag in " + path);
        }
        ckpt.records.push_back(std::move(rec));
    }
    return ckpt;
}

// --- model <-> checkpoint -----------------------------------------------------------

inline Checkpoint checkpoint_from_model(Model<double>& model, const std::string& config_json) {
    Checkpoint ckpt;
    ckpt.config_json = config_json;
    for (auto& [name, tensor] : collect_params(model)) {
        CheckpointRecord rec;
        rec.name = name;
        rec.dtype = RecordDtype::F64;
        rec.f64 = *tensor;
        ckpt.records.push_back(std::move(rec));
    }
    return ckpt;
}

/// Copies record payloads into an already-shaped model, bitwise.
inline void load_model_params(Model<double>& model, const Checkpoint& ckpt) {
    for (auto& [name, tensor] : collect_params(model)) {
        const CheckpointRecord* rec = ckpt.find(name);
        if (!rec) {
            throw std::runtime_error("checkpoint: missing record " + name);
        }
        if (rec->dtype != RecordDtype::F64 || !rec->f64.same_shape(*tensor)) {
            throw std::runtime_error("checkpoint: record " + name +
                                     " has wrong dtype or shape");
        }
        *tensor = rec->f64;
    }
}

/// True weight matrices (>= 2 rows and columns) go to 8-bit; biases,
/// layer norms and the readout vector stay in full precision.
inline bool quantize_eligible(const Tensor<double>& t) {
    return t.rank() == 2 && t.rows() >= 2 && t.cols() >= 2;
}

inline Checkpoint quantize_checkpoint(const Checkpoint& in, QuantScheme scheme) {
    if (in.any_quantized()) {
        throw std::runtime_error("quantize: input checkpoint is already quantized");
    }
    Checkpoint out;
    out.config_json = in.config_json;
    for (const auto& rec : in.records) {
        CheckpointRecord q = rec;
        if (rec.dtype == RecordDtype::F64 && quantize_eligible(rec.f64)) {
            q.dtype = RecordDtype::Q8;
            q.q8 = quantize(rec.f64, scheme);
            q.f64 = TensorD();
        }
        out.records.push_back(std::move(q));
    }
    return out;
}

/// Builds the quantized runtime model from a q8 checkpoint laid over a
/// freshly-shaped model.
inline QuantizedModel<double> quantized_model_from_checkpoint(const ModelSpec& spec,
                                                              const Checkpoint& ckpt) {
    Model<double> shaped = Model<double>::init(spec, 0);
    QuantizedModel<double> q = quantize_model(shaped);  // shapes only; payloads replaced below
    auto assign_ffn = [&](QFfnWeights<double>& dst, const std::string& prefix) {
        const CheckpointRecord* w1 = ckpt.find(prefix + ".w1");
        const CheckpointRecord* b1 = ckpt.find(prefix + ".b1");
        const CheckpointRecord* w2 = ckpt.find(prefix + ".w2");
        const CheckpointRecord* b2 = ckpt.find(prefix + ".b2");
        if (!w1 || !b1 || !w2 || !b2 || w1->dtype != RecordDtype::Q8 ||
            w2->dtype != RecordDtype::Q8) {
            throw std::runtime_error("checkpoint: incomplete quantized FFN at " + prefix);
        }
        dst.w1 = w1->q8;
        dst.b1 = b1->f64;
        dst.w2 = w2->q8;
        dst.b2 = b2->f64;
    };
    auto need = [&](const std::string& name) -> const CheckpointRecord& {
        const CheckpointRecord* rec = ckpt.find(name);
        if (!rec) throw std::runtime_error("checkpoint: missing record " + name);
        return *rec;
    };
    for (std::size_t k = 0; k < q.blocks.size(); ++k) {
        const std::string bp = "block" + std::to_string(k);
        auto& b = q.blocks[k];
        for (std::size_t i = 0; i < b.reusable.size(); ++i) {
            assign_ffn(b.reusable[i], bp + ".reusable" + std::to_string(i));
        }
        for (std::size_t i = 0; i < b.non_reusable.size(); ++i) {
            assign_ffn(b.non_reusable[i], bp + ".non_reusable" + std::to_string(i));
        }
        b.ln_mix.gamma = need(bp + ".ln_mix.gamma").f64;
        b.ln_mix.beta = need(bp + ".ln_mix.beta").f64;
        b.ln_out.gamma = need(bp + ".ln_out.gamma").f64;
        b.ln_out.beta = need(bp + ".ln_out.beta").f64;
        if (b.comp) {
            b.comp->w = need(bp + ".comp.w").q8;
            b.comp->b = need(bp + ".comp.b").f64;
        }
        if (b.resid) {
            b.resid->wq = need(bp + ".resid.wq").q8;
            b.resid->wk = need(bp + ".resid.wk").q8;
            b.resid->wv = need(bp + ".resid.wv").q8;
            b.resid->wo = need(bp + ".resid.wo").q8;
        }
    }
    q.readout.w = need("readout.w").f64;
    q.readout.b = need("readout.b").f64;
    return q;
}

}  // namespace ugsep
