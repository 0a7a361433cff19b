// Command-line entry point: verify / train / ablate / bench / quantize.
//
// Exit codes: 0 success, 1 domain failure (failed invariant, divergence,
// bad checkpoint contents), 2 usage or configuration failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ugsep/checkpoint.hpp"
#include "ugsep/config.hpp"
#include "ugsep/report.hpp"
#include "ugsep/serving.hpp"
#include "ugsep/synthetic.hpp"

namespace {

using namespace ugsep;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

struct CliError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

RunConfig load_config(const std::string& path, const std::string& seed_flag) {
    if (!fs::exists(path)) {
        throw CliError("config file not found: " + path);
    }
    std::ifstream f(path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    RunConfig cfg;
    try {
        cfg = parse_config(text);
    } catch (const std::exception& e) {
        throw CliError("config parse error in " + path + ": " + e.what());
    }
    if (const char* env = std::getenv("UGSEP_SEED")) {
        cfg.seed = std::strtoull(env, nullptr, 10);
    }
    if (!seed_flag.empty()) {
        cfg.seed = std::strtoull(seed_flag.c_str(), nullptr, 10);
    }
    return cfg;
}

void write_text(const std::string& dir, const std::string& name, const std::string& text) {
    if (dir.empty()) return;
    fs::create_directories(dir);
    std::ofstream f(fs::path(dir) / name, std::ios::trunc);
    f << text;
}

void emit_report(const std::string& dir, const std::string& name, const json& j) {
    const std::string text = j.dump(2) + "\n";
    std::cout << text;
    write_text(dir, name, text);
}

// --- verify --------------------------------------------------------------------

int cmd_verify(const RunConfig& cfg, const std::string& out_dir) {
    ModelSpec spec = cfg.model.to_spec();
    Model<double> model = Model<double>::init(spec, cfg.seed);

    SeparabilityReport sep = verify_separability(model, 100, detail::splitmix64(cfg.seed));

    json equivalence;
    bool equiv_pass = true;
    json first_failure = nullptr;
    const std::size_t n_requests = 50;
    for (std::size_t i = 0; i < n_requests; ++i) {
        WorkloadSpec wl;
        wl.seed = detail::splitmix64(cfg.seed ^ (0xC0FFEE00ull + i));
        wl.users = 1 + i % 8;
        wl.sizes.kind = SizeDist::Kind::Uniform;
        wl.sizes.lo = 1;
        wl.sizes.hi = 16;
        Request<double> req = make_request<double>(spec, wl);
        auto naive = serve_naive(model, req);
        auto cached = serve_cached(model, req);
        if (!bitwise_equal<double>(std::span<const double>(naive),
                                   std::span<const double>(cached))) {
            equiv_pass = false;
            for (std::size_t c = 0; c < naive.size(); ++c) {
                if (naive[c] != cached[c]) {
                    first_failure = json{{"request", i}, {"candidate", c}};
                    break;
                }
            }
            break;
        }
    }
    equivalence = json{{"requests", n_requests},
                       {"pass", equiv_pass},
                       {"first_failure", first_failure}};

    const bool pass = sep.pass && equiv_pass;
    json report{{"schema_version", kReportSchemaVersion},
                {"seed", cfg.seed},
                {"separability", to_json_report(sep)},
                {"equivalence", equivalence},
                {"pass", pass}};
    emit_report(out_dir, "verify_report.json", report);
    return pass ? kExitOk : kExitDomain;
}

// --- train ---------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, const std::string& out_dir) {
    SyntheticDataset ds = generate(cfg.data);
    ModelSpec spec = cfg.model.to_spec();
    Model<double> model = Model<double>::init(spec, cfg.seed);
    const double pre_auc = eval_auc(model, ds, ds.test_idx);
    TrainResult result = train(model, ds, cfg.train);

    json report{{"schema_version", kReportSchemaVersion},
                {"seed", cfg.seed},
                {"pre_train_auc", pre_auc},
                {"test_auc", result.test_auc},
                {"steps", cfg.train.steps},
                {"loss_trace", result.loss_trace}};
    emit_report(out_dir, "train_report.json", report);
    if (!out_dir.empty()) {
        json cfg_json = cfg;
        save_checkpoint((fs::path(out_dir) / "model.ckpt").string(),
                        checkpoint_from_model(model, cfg_json.dump()));
    }
    return kExitOk;
}

// --- ablate --------------------------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> parse_ratios(const std::string& text) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t comma = text.find(',', pos);
        const std::string item = text.substr(pos, comma == std::string::npos ? comma
                                                                             : comma - pos);
        const std::size_t colon = item.find(':');
        if (colon == std::string::npos) {
            throw CliError("bad ratio '" + item + "', expected c_u:c_g");
        }
        out.emplace_back(std::stoul(item.substr(0, colon)), std::stoul(item.substr(colon + 1)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

int cmd_ablate(const RunConfig& cfg, const std::string& out_dir, const std::string& study,
               const std::string& ratios_text, const std::string& comp_ratios_text,
               std::size_t n_seeds, std::size_t threads) {
    SyntheticDataset ds = generate(cfg.data);
    AblationModelShape shape;
    shape.tokens = cfg.model.tokens;
    shape.dim = cfg.model.dim;
    shape.heads = cfg.model.heads;
    shape.ffn_hidden = cfg.model.ffn_hidden;
    shape.depth = cfg.model.depth;
    shape.attn_dim = cfg.model.attn_dim;
    shape.act = cfg.model.act();

    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < n_seeds; ++i) {
        seeds.push_back(detail::splitmix64(cfg.seed + i));
    }

    if (study == "ratios" || study == "all") {
        AblationTable t =
            ablate_ratios(ds, shape, parse_ratios(ratios_text), cfg.train, seeds, threads);
        emit_report(out_dir, "ablate_ratios.json", to_json_report(t));
        const std::string text = to_text_table(t, "ratio ablation");
        std::cout << text;
        write_text(out_dir, "ablate_ratios.txt", text);
    }
    if (study == "compensation" || study == "all") {
        // Single-block models isolate the compensation pathway.
        AblationModelShape comp_shape = shape;
        comp_shape.depth = 1;
        AblationTable t = ablate_compensation(ds, comp_shape, parse_ratios(comp_ratios_text),
                                              cfg.train, seeds, threads);
        emit_report(out_dir, "ablate_compensation.json", to_json_report(t));
        const std::string text = to_text_table(t, "information compensation ablation");
        std::cout << text;
        write_text(out_dir, "ablate_compensation.txt", text);
    }
    if (study != "ratios" && study != "compensation" && study != "all") {
        throw CliError("unknown study '" + study + "', expected ratios|compensation|all");
    }
    return kExitOk;
}

// --- bench ---------------------------------------------------------------------

int cmd_bench(const RunConfig& cfg, const std::string& out_dir, bool flops_only) {
    ModelSpec spec = cfg.model.to_spec();
    // Benchmarks run at f32; random weights are fine for timing.
    Model<float> model = Model<float>::init(spec, cfg.seed);
    WorkloadSpec wl = cfg.serve.workload;
    if (wl.seed == 0) wl.seed = detail::splitmix64(cfg.seed ^ 0xBE7C4ull);
    BenchReport report = bench(model, wl, cfg.serve.repetitions, flops_only);
    emit_report(out_dir, "bench_report.json", to_json_report(report));
    return kExitOk;
}

// --- quantize ------------------------------------------------------------------

int cmd_quantize(const std::string& in_path, const std::string& out_dir,
                 const std::string& scheme_name) {
    if (!fs::exists(in_path)) {
        throw CliError("checkpoint not found: " + in_path);
    }
    QuantScheme scheme;
    if (scheme_name == "int8") {
        scheme.format = QuantFormat::Int8Symmetric;
    } else if (scheme_name == "fp8") {
        scheme.format = QuantFormat::Fp8E4M3;
    } else {
        throw CliError("unknown scheme '" + scheme_name + "', expected int8|fp8");
    }
    Checkpoint input = load_checkpoint(in_path);
    Checkpoint q8 = quantize_checkpoint(input, scheme);

    json matrices = json::array();
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    for (std::size_t i = 0; i < input.records.size(); ++i) {
        const auto& rec = q8.records[i];
        if (rec.dtype != RecordDtype::Q8) continue;
        shapes.emplace_back(rec.q8.rows(), rec.q8.cols());
        const TensorF back = dequantize(rec.q8);
        double max_err = 0.0;
        const TensorD& orig = input.records[i].f64;
        for (std::size_t e = 0; e < orig.numel(); ++e) {
            max_err = std::max(max_err, std::fabs(orig[e] - static_cast<double>(back[e])));
        }
        const FootprintReport f = footprint_matrix(rec.q8.rows(), rec.q8.cols());
        matrices.push_back(json{{"name", rec.name},
                                {"rows", rec.q8.rows()},
                                {"cols", rec.q8.cols()},
                                {"max_roundtrip_error", max_err},
                                {"footprint_ratio", f.ratio}});
    }
    const FootprintReport total = footprint_accumulate(shapes);
    json report{{"schema_version", kReportSchemaVersion},
                {"scheme", scheme_name},
                {"bytes_16bit", total.bytes_16bit},
                {"bytes_w8a16", total.bytes_w8a16},
                {"footprint_ratio", total.ratio},
                {"matrices", matrices}};
    emit_report(out_dir, "quantize_report.json", report);
    if (!out_dir.empty()) {
        save_checkpoint((fs::path(out_dir) / "model_q8.ckpt").string(), q8);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"UG-separated token mixer: verification, training, serving benchmarks"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seed_flag;
    std::string study = "all", ratios = "4:4,6:2", comp_ratios = "6:2";
    std::string ckpt_in, scheme = "int8";
    std::size_t n_seeds = 5, threads = 2;
    bool flops_only = false;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        if (needs_config) {
            sub->add_option("--config", config_path, "run configuration (JSON)")->required();
        }
        sub->add_option("--out", out_dir, "output directory for reports and artifacts");
        sub->add_option("--seed", seed_flag, "override the config seed");
    };

    CLI::App* verify = app.add_subcommand("verify", "separability + cached/naive equivalence");
    add_common(verify, true);
    CLI::App* train_cmd = app.add_subcommand("train", "train on synthetic data, write checkpoint");
    add_common(train_cmd, true);
    CLI::App* ablate = app.add_subcommand("ablate", "ratio / compensation ablation tables");
    add_common(ablate, true);
    ablate->add_option("--study", study, "ratios|compensation|all");
    ablate->add_option("--ratios", ratios, "comma-separated c_u:c_g list");
    ablate->add_option("--comp-ratios", comp_ratios, "ratios for the compensation study");
    ablate->add_option("--seeds", n_seeds, "training seeds per variant");
    ablate->add_option("--threads", threads, "parallel training runs");
    CLI::App* bench_cmd = app.add_subcommand("bench", "naive vs cached vs cached+W8A16");
    add_common(bench_cmd, true);
    bench_cmd->add_flag("--flops-only", flops_only, "skip wall-clock timing");
    CLI::App* quant = app.add_subcommand("quantize", "weight-only quantize a checkpoint");
    quant->add_option("--checkpoint", ckpt_in, "input checkpoint")->required();
    quant->add_option("--scheme", scheme, "int8|fp8");
    add_common(quant, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*verify) return cmd_verify(load_config(config_path, seed_flag), out_dir);
        if (*train_cmd) return cmd_train(load_config(config_path, seed_flag), out_dir);
        if (*ablate) {
            return cmd_ablate(load_config(config_path, seed_flag), out_dir, study, ratios,
                              comp_ratios, n_seeds, threads);
        }
        if (*bench_cmd) return cmd_bench(load_config(config_path, seed_flag), out_dir, flops_only);
        if (*quant) return cmd_quantize(ckpt_in, out_dir, scheme);
    } catch (const CliError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDomain;
    }
    return kExitUsage;
}
