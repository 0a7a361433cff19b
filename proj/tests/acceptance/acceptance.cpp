// Acceptance suite: one line per criterion, nonzero exit when any fails.
//
// Every tolerance is pinned here; nothing is deferred to calibration.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ugsep/attention.hpp"
#include "ugsep/checkpoint.hpp"
#include "ugsep/config.hpp"
#include "ugsep/gradcheck.hpp"
#include "ugsep/report.hpp"
#include "ugsep/serving.hpp"
#include "ugsep/synthetic.hpp"

using namespace ugsep;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int id;
    std::string name;
    bool pass;
    std::string detail;
    double seconds;
};

std::vector<Outcome> g_outcomes;

template <class Fn>
void criterion(int id, const std::string& name, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = false;
    std::string detail;
    try {
        detail = fn();
        pass = true;
    } catch (const std::exception& e) {
        detail = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    g_outcomes.push_back({id, name, pass, detail, secs});
    std::printf("[%s] criterion %2d: %-28s (%.1fs) %s\n", pass ? "PASS" : "FAIL", id,
                name.c_str(), secs, detail.c_str());
    std::fflush(stdout);
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

// --- 1. separability ---------------------------------------------------------

std::string run_separability() {
    ModelSpec spec = make_stack(8, 64, 8, 32, 4, 4, 4, 4, 4, false);
    Model<double> model = Model<double>::init(spec, 2024);
    const auto t0 = std::chrono::steady_clock::now();
    SeparabilityReport rep = verify_separability(model, 100, 99);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require(rep.pass, "user rows diverged under group randomization");
    for (const auto& b : rep.blocks) {
        require(b.pass && b.rows_checked == 4, "block " + std::to_string(b.block_index));
    }
    require(secs <= 10.0, "runtime " + fmt(secs) + "s exceeds 10s");
    return "4 blocks x 100 trials bitwise, " + fmt(secs) + "s";
}

// --- 2. serving equivalence ---------------------------------------------------

std::string run_serving_equivalence() {
    struct Case {
        ModelSpec spec;
        const char* name;
    };
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Case> cases{
        {make_stack(8, 32, 8, 16, 2, 4, 4, 4, 4, false), "plain"},
        {make_stack(8, 32, 8, 16, 2, 4, 4, 4, 4, true), "plain+comp"},
        {make_stack(8, 32, 4, 16, 2, 4, 4, 2, 2, false), "separated"},
        {make_stack(8, 32, 4, 16, 2, 4, 4, 2, 2, true), "separated+comp"},
    };
    std::size_t candidates = 0;
    for (const auto& c : cases) {
        Model<double> model = Model<double>::init(c.spec, 515);
        for (std::size_t i = 0; i < 50; ++i) {
            WorkloadSpec wl;
            wl.seed = detail::splitmix64(i * 7919 + 13);
            wl.users = 1 + i % 8;
            wl.sizes.kind = SizeDist::Kind::Uniform;
            wl.sizes.lo = 1;
            wl.sizes.hi = 16;
            Request<double> req = make_request<double>(c.spec, wl);
            auto naive = serve_naive(model, req);
            auto cached = serve_cached(model, req);
            require(bitwise_equal<double>(std::span<const double>(naive),
                                          std::span<const double>(cached)),
                    std::string(c.name) + " diverged at request " + std::to_string(i));
            candidates += naive.size();
        }
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require(secs <= 60.0, "runtime " + fmt(secs) + "s exceeds 60s");
    return "4 variants x 50 requests (" + std::to_string(candidates) + " candidates) bitwise";
}

// --- 3. baseline reduction ----------------------------------------------------

std::string run_baseline_reduction() {
    MixerConfig cfg(8, 32, 8, 16);
    UGPartition part(0, 8, 0, 8);
    UGSepBlockSpec spec;
    spec.mixer = cfg;
    spec.part = part;
    spec.residual = ResidualKind::Plain;
    UgMask mask = build_ug_mask(part, cfg.head_dim(), cfg.tokens);
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        UGSepBlockParams<double> up =
            UGSepBlockParams<double>::init(cfg, part, false, ResidualKind::Plain, 0, rng);
        MixerBlockParams<double> mp;
        mp.ffn = up.non_reusable;
        mp.ln_mix = up.ln_mix;
        mp.ln_out = up.ln_out;
        TensorD x({8, 32});
        rng.fill_gaussian(x);
        require(bitwise_equal(ugsep_block_forward(x, spec, up, mask),
                              mixer_block_forward(x, mp, cfg)),
                "seed " + std::to_string(seed));
    }
    return "20 seeds bitwise";
}

// --- 4. flops identity --------------------------------------------------------

std::string run_flops_identity() {
    ModelSpec spec = make_stack(8, 64, 8, 32, 2, 4, 4, 4, 4, false);
    const std::size_t m = 4, n = 4 * 512;
    FlopsLedger ledger = flops_count(spec, m, n, ServeMode::Cached);
    require(2 * ledger.reusable.ffn == ledger.reusable.ffn + ledger.nonreusable.ffn,
            "reusable FFN fraction != exactly 1/2");
    const auto fu = static_cast<unsigned __int128>(ledger.f_u());
    const auto fg = static_cast<unsigned __int128>(ledger.f_g());
    const unsigned __int128 cached = fu * m + fg * n;
    const unsigned __int128 naive = (fu + fg) * n;
    require(cached == static_cast<unsigned __int128>(ledger.cached_total()),
            "cached total != F_U*M + F_G*N");
    require(naive == static_cast<unsigned __int128>(ledger.naive_total()),
            "naive total != (F_U+F_G)*N");
    require(ledger.naive_total() - ledger.cached_total() == ledger.f_u() * (n - m),
            "ledger difference identity failed");
    return "reusable FFN fraction = 1/2 exactly; M=4, N=2048 closed form exact";
}

// --- 5. gradient correctness ---------------------------------------------------

void block_gradient_case(const UGSepBlockSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    UGSepBlockParams<double> params = UGSepBlockParams<double>::init(
        spec.mixer, spec.part, spec.compensation, spec.residual, spec.attn_dim, rng);
    if (params.comp) rng.fill_uniform(params.comp->w, -0.2, 0.2);
    UgMask mask = build_ug_mask(spec.part, spec.mixer.head_dim(), spec.mixer.tokens);
    TensorD x({spec.mixer.tokens, spec.mixer.dim});
    rng.fill_gaussian(x);
    TensorD weights({spec.part.rows(), spec.mixer.dim});
    rng.fill_gaussian(weights);

    UGSepBlockParams<double> work = params;
    std::vector<std::pair<std::string, TensorD*>> named;
    collect_params(work, "b", named);
    std::vector<TensorD> flat;
    for (auto& [nm, t] : named) flat.push_back(*t);
    flat.push_back(x);

    auto f = [&](const std::vector<TensorD>& p) {
        UGSepBlockParams<double> local = params;
        std::vector<std::pair<std::string, TensorD*>> ln;
        collect_params(local, "b", ln);
        for (std::size_t i = 0; i < ln.size(); ++i) *ln[i].second = p[i];
        TensorD y = ugsep_block_forward(p.back(), spec, local, mask);
        double s = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += weights[i] * y[i];
        return s;
    };
    UGSepBlockForward<double> fwd(x, spec, params, mask);
    UGSepBlockGrads<double> g = fwd.backward(weights);
    std::vector<std::pair<std::string, TensorD*>> gn;
    collect_params(g.params, "b", gn);
    std::vector<TensorD> analytic;
    for (auto& [nm, t] : gn) analytic.push_back(*t);
    analytic.push_back(g.input);
    GradCheckReport rep = check_gradient(f, flat, analytic, 1e-5, 1e-5);
    require(rep.pass,
            "block variant seed " + std::to_string(seed) + " rel err " + fmt(rep.max_rel_err));

    // No group-to-user flow: U-row outputs are bitwise invariant to G inputs,
    // so the finite-difference derivative is exactly zero.
    if (spec.part.c_u > 0) {
        TensorD xp = x;
        for (std::size_t tok = spec.part.n; tok < spec.mixer.tokens; ++tok) {
            xp.at(tok, seed % spec.mixer.dim) += 1e-3;
        }
        UGSepBlockForward<double> fwd2(xp, spec, params, mask);
        for (std::size_t r = 0; r < spec.part.c_u; ++r) {
            require(bitwise_equal<double>(fwd.output().row(r), fwd2.output().row(r)),
                    "G perturbation reached a U row");
        }
    }
}

void mixer_gradient_case(std::uint64_t seed) {
    MixerConfig cfg(4, 8, 4, 6);
    Rng rng(seed);
    MixerBlockParams<double> params = MixerBlockParams<double>::init(cfg, rng);
    TensorD x({4, 8});
    rng.fill_gaussian(x);
    TensorD weights({4, 8});
    rng.fill_gaussian(weights);
    MixerBlockParams<double> work = params;
    std::vector<std::pair<std::string, TensorD*>> named;
    collect_params(work, "m", named);
    std::vector<TensorD> flat;
    for (auto& [nm, t] : named) flat.push_back(*t);
    flat.push_back(x);
    auto f = [&](const std::vector<TensorD>& p) {
        MixerBlockParams<double> local = params;
        std::vector<std::pair<std::string, TensorD*>> ln;
        collect_params(local, "m", ln);
        for (std::size_t i = 0; i < ln.size(); ++i) *ln[i].second = p[i];
        TensorD y = mixer_block_forward(p.back(), local, cfg);
        double s = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += weights[i] * y[i];
        return s;
    };
    MixerBlockForward<double> fwd(x, params, cfg);
    MixerBlockGrads<double> g = fwd.backward(weights);
    std::vector<std::pair<std::string, TensorD*>> gn;
    collect_params(g.params, "m", gn);
    std::vector<TensorD> analytic;
    for (auto& [nm, t] : gn) analytic.push_back(*t);
    analytic.push_back(g.input);
    GradCheckReport rep = check_gradient(f, flat, analytic, 1e-5, 1e-5);
    require(rep.pass, "baseline seed " + std::to_string(seed) + " rel err " +
                          fmt(rep.max_rel_err));
}

void attention_gradient_case(AttnMaskMode mode, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t t = 5, n = 2, d = 4, da = 3;
    AttentionParams<double> params = AttentionParams<double>::init(d, da, rng);
    AttnUGMask mask = AttnUGMask::for_partition(n, t);
    TensorD x({t, d});
    rng.fill_gaussian(x);
    TensorD weights({t, da});
    rng.fill_gaussian(weights);
    auto f = [&](const std::vector<TensorD>& p) {
        AttentionParams<double> local{p[0], p[1], p[2]};
        TensorD y = masked_attention(p[3], local, mask, mode);
        double s = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += weights[i] * y[i];
        return s;
    };
    MaskedAttention<double> attn(x, params, mask, mode);
    auto g = attn.backward(weights);
    GradCheckReport rep =
        check_gradient(f, {params.wq, params.wk, params.wv, x},
                       {g.params.wq, g.params.wk, g.params.wv, g.input}, 1e-5, 1e-5);
    require(rep.pass, "attention seed " + std::to_string(seed) + " rel err " +
                          fmt(rep.max_rel_err));
}

std::string run_gradient_correctness() {
    auto plain = [](bool comp) {
        UGSepBlockSpec spec;
        spec.mixer = MixerConfig(4, 8, 4, 5);
        spec.part = UGPartition(2, 2, 2, 2);
        spec.compensation = comp;
        spec.residual = ResidualKind::Plain;
        return spec;
    };
    auto separated = [](bool comp) {
        UGSepBlockSpec spec;
        spec.mixer = MixerConfig(6, 8, 4, 5);
        spec.part = UGPartition(3, 3, 2, 2);
        spec.compensation = comp;
        spec.residual = ResidualKind::Separated;
        spec.attn_dim = 4;
        return spec;
    };
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        mixer_gradient_case(1000 + seed);
        block_gradient_case(plain(false), 2000 + seed);
        block_gradient_case(plain(true), 3000 + seed);
        block_gradient_case(separated(false), 4000 + seed);
        block_gradient_case(separated(true), 5000 + seed);
        attention_gradient_case(AttnMaskMode::Multiplicative, 6000 + seed);
        attention_gradient_case(AttnMaskMode::Additive, 7000 + seed);
    }
    return "7 variants x 20 seeds at rel tol 1e-5; dU/dG exactly 0";
}

// --- 6. attention separability -------------------------------------------------

std::string run_attention_separability() {
    const std::size_t t = 8, n = 4, d = 16, da = 8;
    Rng rng(606);
    AttentionParams<double> params = AttentionParams<double>::init(d, da, rng);
    AttnUGMask mask = AttnUGMask::for_partition(n, t);
    TensorD u({n, d});
    rng.fill_gaussian(u);
    for (AttnMaskMode mode : {AttnMaskMode::Multiplicative, AttnMaskMode::Additive}) {
        TensorD reference;
        for (int trial = 0; trial < 100; ++trial) {
            TensorD g({t - n, d});
            rng.fill_gaussian(g);
            TensorD x = concat_tokens(u, n, g, t - n, d);
            MaskedAttention<double> attn(x, params, mask, mode);
            TensorD u_rows({n, da});
            for (std::size_t r = 0; r < n; ++r) {
                std::copy(attn.output().row(r).begin(), attn.output().row(r).end(),
                          u_rows.row(r).begin());
            }
            if (trial == 0) {
                reference = u_rows;
            } else {
                require(bitwise_equal(reference, u_rows),
                        "mode " + std::to_string(static_cast<int>(mode)) + " trial " +
                            std::to_string(trial));
            }
            for (std::size_t i = n; i < t; ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < t; ++j) sum += attn.weights().at(i, j);
                require(std::fabs(sum - 1.0) <= 1e-12, "G-row softmax sum off");
            }
        }
    }
    return "both modes bitwise over 100 trials; G-row sums = 1 within 1e-12";
}

// --- 7. quantization bounds -----------------------------------------------------

std::string run_quantization_bounds() {
    Rng rng(707);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t r = 1 + rng.index(12), c = 1 + rng.index(24);
        TensorD w({r, c});
        rng.fill_gaussian(w, 2.5);
        QuantizedMatrix q = quantize(w);
        TensorF back = dequantize(q);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                require(std::fabs(w.at(i, j) - static_cast<double>(back.at(i, j))) <=
                            static_cast<double>(q.scales[i]) / 2.0 + 1e-12,
                        "round-trip bound violated at trial " + std::to_string(trial));
            }
        }
    }

    // Trained desk-scale model: footprint per >= 64-row matrix, then AUC drift.
    DataConfig dc;
    dc.dim = 128;
    dc.num_users = 1024;
    SyntheticDataset ds = generate(dc);
    ModelSpec spec = make_stack(8, 128, 8, 256, 1, 4, 4, 4, 4, false);
    Model<double> model = Model<double>::init(spec, 717);
    TrainConfig tc;
    tc.steps = 400;
    tc.batch = 64;
    TrainResult tr = train(model, ds, tc);

    Checkpoint q8 = quantize_checkpoint(checkpoint_from_model(model, "{}"), {});
    std::size_t checked = 0;
    for (const auto& rec : q8.records) {
        if (rec.dtype != RecordDtype::Q8 || rec.q8.rows() < 64) continue;
        const FootprintReport f = footprint_matrix(rec.q8.rows(), rec.q8.cols());
        require(f.ratio >= 1.9 && f.ratio <= 2.0,
                rec.name + " footprint ratio " + fmt(f.ratio));
        ++checked;
    }
    require(checked > 0, "no >=64-row matrices in the checkpoint");

    QuantizedModel<double> qmodel = quantize_model(model);
    const double full_auc = tr.test_auc;
    const double q_auc = eval_auc(qmodel, ds, ds.test_idx);
    require(std::fabs(full_auc - q_auc) <= 0.005,
            "AUC drift " + fmt(std::fabs(full_auc - q_auc)) + " exceeds 0.005");
    return "1000 matrices within scale/2; " + std::to_string(checked) +
           " matrices in [1.9,2.0]; AUC drift " + fmt(std::fabs(full_auc - q_auc));
}

// --- 8. ablation directions -----------------------------------------------------

std::string run_ablation_directions() {
    DataConfig dc;  // defaults: 4096 users x 8, n=m=4, D=32
    SyntheticDataset ds = generate(dc);
    AblationModelShape shape;  // depth 2, hidden 32
    TrainConfig cfg;           // lr 0.2, batch 128, 2500 steps
    std::vector<std::uint64_t> seeds{101, 202, 303, 404, 505};
    const std::size_t threads = std::max(2u, std::thread::hardware_concurrency());

    AblationTable ratios = ablate_ratios(ds, shape, {{4, 4}, {6, 2}}, cfg, seeds, threads);
    double delta_11 = 0.0, delta_31 = 0.0;
    for (const auto& r : ratios.rows) {
        if (r.name == "4:4") delta_11 = r.median_delta;
        if (r.name == "6:2") delta_31 = r.median_delta;
    }
    require(std::fabs(delta_11) <= 0.01,
            "(a) 1:1 delta " + fmt(delta_11) + " outside +/-0.01");
    require(delta_31 <= delta_11,
            "(b) 3:1 delta " + fmt(delta_31) + " not <= 1:1 delta " + fmt(delta_11));

    AblationModelShape comp_shape = shape;
    comp_shape.depth = 1;
    AblationTable comp = ablate_compensation(ds, comp_shape, {{6, 2}}, cfg, seeds, threads);
    double off = 0.0, on = 0.0;
    for (const auto& r : comp.rows) {
        if (r.name == "6:2") off = r.median_auc;
        if (r.name == "6:2 +comp") on = r.median_auc;
    }
    require(on >= off, "(c) compensation-on " + fmt(on) + " < compensation-off " + fmt(off));
    return "d(1:1)=" + fmt(delta_11) + " d(3:1)=" + fmt(delta_31) + " comp " + fmt(off) +
           " -> " + fmt(on);
}

// --- 9. benchmark monotonicity ---------------------------------------------------

std::string run_benchmark_monotonicity() {
    ModelSpec spec = make_stack(8, 256, 8, 512, 4, 4, 4, 4, 4, false);
    Model<float> model = Model<float>::init(spec, 909);
    WorkloadSpec wl;
    wl.seed = 9090;
    wl.users = 4;
    wl.sizes.kind = SizeDist::Kind::Fixed;
    wl.sizes.fixed = 32;  // N/M = 32
    BenchReport report = bench(model, wl, 3);
    require(report.equivalence_pass, "cached != naive on the bench workload");
    double naive_p50 = 0.0, cached_p50 = 0.0;
    std::uint64_t cached_flops = 0, q_flops = 0;
    for (const auto& m : report.modes) {
        if (m.mode == "naive") naive_p50 = m.p50_ms;
        if (m.mode == "cached") {
            cached_p50 = m.p50_ms;
            cached_flops = m.flops;
        }
        if (m.mode == "cached_w8a16") q_flops = m.flops;
    }
    require(cached_p50 <= naive_p50, "cached p50 " + fmt(cached_p50) + "ms > naive p50 " +
                                         fmt(naive_p50) + "ms");
    require(cached_flops == q_flops, "W8A16 changed the flops column");
    return "naive " + fmt(naive_p50) + "ms >= cached " + fmt(cached_p50) +
           "ms; W8A16 flops unchanged";
}

// --- 10. determinism --------------------------------------------------------------

std::string g_cli_path;

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    require(f.good(), "missing report " + p.string());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string run_cli_determinism() {
    require(!g_cli_path.empty() && fs::exists(g_cli_path),
            "CLI binary not found (pass --cli <path>)");
    const fs::path work = fs::temp_directory_path() / "ugsep_acceptance_cli";
    fs::remove_all(work);
    fs::create_directories(work);

    RunConfig cfg;
    cfg.seed = 1234;
    cfg.model.dim = 16;
    cfg.model.ffn_hidden = 8;
    cfg.data.num_users = 128;
    cfg.data.cands_per_user = 4;
    cfg.data.dim = 16;
    cfg.model.tokens = 8;
    cfg.train.steps = 40;
    cfg.train.batch = 16;
    cfg.serve.workload.users = 3;
    cfg.serve.workload.sizes.kind = SizeDist::Kind::Fixed;
    cfg.serve.workload.sizes.fixed = 4;
    cfg.serve.repetitions = 3;
    const fs::path cfg_path = work / "config.json";
    std::ofstream(cfg_path) << serialize_config(cfg);

    auto run = [&](const std::string& args, const fs::path& out) {
        fs::create_directories(out);
        const std::string cmd = g_cli_path + " " + args + " --config " + cfg_path.string() +
                                " --out " + out.string() + " >/dev/null 2>&1";
        const int rc = std::system(cmd.c_str());
        require(rc == 0, "CLI failed: " + cmd);
    };
    for (int round = 1; round <= 2; ++round) {
        const fs::path out = work / ("round" + std::to_string(round));
        run("verify", out / "verify");
        run("ablate --seeds 2 --threads 2", out / "ablate");
        run("bench --flops-only", out / "bench");
    }
    const std::vector<std::string> reports{
        "verify/verify_report.json", "ablate/ablate_ratios.json",
        "ablate/ablate_compensation.json", "bench/bench_report.json"};
    for (const std::string& rel : reports) {
        require(slurp(work / "round1" / rel) == slurp(work / "round2" / rel),
                rel + " differs across runs");
    }
    fs::remove_all(work);
    return "verify, ablate, bench --flops-only byte-identical across two runs";
}

}  // namespace

int main(int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--cli") g_cli_path = argv[i + 1];
    }

    criterion(1, "separability", run_separability);
    criterion(2, "serving equivalence", run_serving_equivalence);
    criterion(3, "baseline reduction", run_baseline_reduction);
    criterion(4, "flops identity", run_flops_identity);
    criterion(5, "gradient correctness", run_gradient_correctness);
    criterion(6, "attention separability", run_attention_separability);
    criterion(7, "quantization bounds", run_quantization_bounds);
    criterion(8, "ablation directions", run_ablation_directions);
    criterion(9, "benchmark monotonicity", run_benchmark_monotonicity);
    criterion(10, "determinism", run_cli_determinism);

    int failures = 0;
    for (const auto& o : g_outcomes) failures += o.pass ? 0 : 1;
    std::printf("%d/%zu criteria passed\n", static_cast<int>(g_outcomes.size()) - failures,
                g_outcomes.size());
    return failures == 0 ? 0 : 1;
}
