#pragma once

#include <string>

#include <json.hpp>

#include "ugsep/model.hpp"
#include "ugsep/serving.hpp"
#include "ugsep/synthetic.hpp"

namespace ugsep {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Run configuration. One JSON document drives every subcommand; the only
// override outside the file is the seed (--seed flag or UGSEP_SEED).
// ---------------------------------------------------------------------------

constexpr int kConfigSchemaVersion = 1;

struct ModelSection {
    std::size_t tokens = 8;
    std::size_t dim = 32;
    std::size_t heads = 8;
    std::size_t ffn_hidden = 64;
    std::size_t depth = 2;
    std::size_t attn_dim = 16;
    std::string activation = "gelu";
    std::size_t n = 4, m = 4;
    std::size_t c_u = 4, c_g = 4;
    bool compensation = false;
    bool fault_inject_mask = false;
    std::string quant = "none";  // none | int8 | fp8

    Activation act() const {
        if (activation == "gelu") return Activation::Gelu;
        if (activation == "relu") return Activation::Relu;
        throw std::invalid_argument("config: unknown activation '" + activation + "'");
    }

    ModelSpec to_spec() const {
        ModelSpec spec = make_stack(tokens, dim, heads, ffn_hidden, depth, n, m, c_u, c_g,
                                    compensation, act(), attn_dim);
        spec.fault_inject_mask = fault_inject_mask;
        return spec;
    }
};

struct ServeSection {
    WorkloadSpec workload;
    std::size_t repetitions = 5;
};

struct RunConfig {
    std::uint64_t seed = 7;
    ModelSection model;
    DataConfig data;
    TrainConfig train;
    ServeSection serve;
};

// --- JSON binding -------------------------------------------------------------------

inline void to_json(json& j, const TeacherConfig& t) {
    j = json{{"temperature", t.temperature}, {"target_base_rate", t.target_base_rate}};
}

inline void from_json(const json& j, TeacherConfig& t) {
    t.temperature = j.value("temperature", TeacherConfig{}.temperature);
    t.target_base_rate = j.value("target_base_rate", TeacherConfig{}.target_base_rate);
}

inline void to_json(json& j, const DataConfig& d) {
    j = json{{"seed", d.seed},           {"num_users", d.num_users},
             {"cands_per_user", d.cands_per_user}, {"u_tokens", d.u_tokens},
             {"g_tokens", d.g_tokens},   {"dim", d.dim},
             {"teacher", d.teacher}};
}

inline void from_json(const json& j, DataConfig& d) {
    const DataConfig def;
    d.seed = j.value("seed", def.seed);
    d.num_users = j.value("num_users", def.num_users);
    d.cands_per_user = j.value("cands_per_user", def.cands_per_user);
    d.u_tokens = j.value("u_tokens", def.u_tokens);
    d.g_tokens = j.value("g_tokens", def.g_tokens);
    d.dim = j.value("dim", def.dim);
    if (j.contains("teacher")) d.teacher = j.at("teacher").get<TeacherConfig>();
}

inline void to_json(json& j, const TrainConfig& t) {
    j = json{{"lr", t.lr},       {"momentum", t.momentum}, {"batch", t.batch},
             {"steps", t.steps}, {"seed", t.seed},         {"log_every", t.log_every}};
}

inline void from_json(const json& j, TrainConfig& t) {
    const TrainConfig def;
    t.lr = j.value("lr", def.lr);
    t.momentum = j.value("momentum", def.momentum);
    t.batch = j.value("batch", def.batch);
    t.steps = j.value("steps", def.steps);
    t.seed = j.value("seed", def.seed);
    t.log_every = j.value("log_every", def.log_every);
}

inline void to_json(json& j, const SizeDist& s) {
    if (s.kind == SizeDist::Kind::Fixed) {
        j = json{{"kind", "fixed"}, {"value", s.fixed}};
    } else {
        j = json{{"kind", "uniform"}, {"lo", s.lo}, {"hi", s.hi}};
    }
}

inline void from_json(const json& j, SizeDist& s) {
    const std::string kind = j.value("kind", "fixed");
    if (kind == "fixed") {
        s.kind = SizeDist::Kind::Fixed;
        s.fixed = j.value("value", std::size_t{1});
    } else if (kind == "uniform") {
        s.kind = SizeDist::Kind::Uniform;
        s.lo = j.value("lo", std::size_t{1});
        s.hi = j.value("hi", std::size_t{1});
        if (s.hi < s.lo) {
            throw std::invalid_argument("config: candidate size range has hi < lo");
        }
    } else {
        throw std::invalid_argument("config: unknown size distribution '" + kind + "'");
    }
}

inline void to_json(json& j, const WorkloadSpec& w) {
    j = json{{"seed", w.seed}, {"users", w.users}, {"sizes", w.sizes}};
}

inline void from_json(const json& j, WorkloadSpec& w) {
    const WorkloadSpec def;
    w.seed = j.value("seed", def.seed);
    w.users = j.value("users", def.users);
    if (j.contains("sizes")) w.sizes = j.at("sizes").get<SizeDist>();
}

inline void to_json(json& j, const ServeSection& s) {
    j = json{{"workload", s.workload}, {"repetitions", s.repetitions}};
}

inline void from_json(const json& j, ServeSection& s) {
    if (j.contains("workload")) s.workload = j.at("workload").get<WorkloadSpec>();
    s.repetitions = j.value("repetitions", ServeSection{}.repetitions);
}

inline void to_json(json& j, const ModelSection& m) {
    j = json{{"tokens", m.tokens},
             {"dim", m.dim},
             {"heads", m.heads},
             {"ffn_hidden", m.ffn_hidden},
             {"depth", m.depth},
             {"attn_dim", m.attn_dim},
             {"activation", m.activation},
             {"partition", json{{"n", m.n}, {"m", m.m}, {"c_u", m.c_u}, {"c_g", m.c_g}}},
             {"compensation", m.compensation},
             {"fault_inject_mask", m.fault_inject_mask},
             {"quant", m.quant}};
}

inline void from_json(const json& j, ModelSection& m) {
    const ModelSection def;
    m.tokens = j.value("tokens", def.tokens);
    m.dim = j.value("dim", def.dim);
    m.heads = j.value("heads", def.heads);
    m.ffn_hidden = j.value("ffn_hidden", def.ffn_hidden);
    m.depth = j.value("depth", def.depth);
    m.attn_dim = j.value("attn_dim", def.attn_dim);
    m.activation = j.value("activation", def.activation);
    if (j.contains("partition")) {
        const json& p = j.at("partition");
        m.n = p.value("n", def.n);
        m.m = p.value("m", def.m);
        m.c_u = p.value("c_u", def.c_u);
        m.c_g = p.value("c_g", def.c_g);
    }
    m.compensation = j.value("compensation", def.compensation);
    m.fault_inject_mask = j.value("fault_inject_mask", def.fault_inject_mask);
    m.quant = j.value("quant", def.quant);
}

inline void to_json(json& j, const RunConfig& c) {
    j = json{{"schema_version", kConfigSchemaVersion},
             {"seed", c.seed},
             {"model", c.model},
             {"data", c.data},
             {"train", c.train},
             {"serve", c.serve}};
}

inline void from_json(const json& j, RunConfig& c) {
    if (j.value("schema_version", kConfigSchemaVersion) != kConfigSchemaVersion) {
        throw std::invalid_argument("config: unsupported schema_version");
    }
    c.seed = j.value("seed", RunConfig{}.seed);
    if (j.contains("model")) c.model = j.at("model").get<ModelSection>();
    if (j.contains("data")) c.data = j.at("data").get<DataConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("serve")) c.serve = j.at("serve").get<ServeSection>();
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    return json(a) == json(b);
}

inline RunConfig parse_config(const std::string& text) {
    return json::parse(text).get<RunConfig>();
}

inline std::string serialize_config(const RunConfig& c) { return json(c).dump(2); }

}  // namespace ugsep
