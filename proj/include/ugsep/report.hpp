#pragma once

#include <iomanip>
#include <sstream>
#include <string>

#include <json.hpp>

#include "ugsep/serving.hpp"
#include "ugsep/synthetic.hpp"

namespace ugsep {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Report documents. Every JSON report carries schema_version; nothing
// wall-clock-dependent goes into verify or ablation reports, so two runs
// with the same seed serialize to identical bytes.
// ---------------------------------------------------------------------------

constexpr int kReportSchemaVersion = 1;

inline json to_json_report(const SeparabilityReport& r) {
    json blocks = json::array();
    for (const auto& b : r.blocks) {
        json divergence = nullptr;
        if (b.first_divergence) {
            divergence = json{{"row", b.first_divergence->row},
                              {"col", b.first_divergence->col},
                              {"trial", b.first_divergence->trial}};
        }
        blocks.push_back(json{{"block_index", b.block_index},
                              {"rows_checked", b.rows_checked},
                              {"trials", b.trials},
                              {"pass", b.pass},
                              {"first_divergence", divergence}});
    }
    return json{{"schema_version", kReportSchemaVersion},
                {"trials", r.trials},
                {"pass", r.pass},
                {"blocks", blocks}};
}

inline json to_json_report(const PathCost& c) {
    return json{{"ln", c.ln},
                {"ffn", c.ffn},
                {"residual", c.residual},
                {"compensation", c.compensation},
                {"readout", c.readout},
                {"total", c.total()}};
}

inline json to_json_report(const FlopsLedger& l) {
    return json{{"f_u", l.f_u()},
                {"f_g", l.f_g()},
                {"reusable", to_json_report(l.reusable)},
                {"non_reusable", to_json_report(l.nonreusable)},
                {"users", l.users},
                {"candidates", l.candidates},
                {"naive_total", l.naive_total()},
                {"cached_total", l.cached_total()},
                {"cached_over_naive", l.cached_over_naive()},
                {"reusable_ffn_fraction",
                 static_cast<double>(l.reusable.ffn) /
                     static_cast<double>(l.reusable.ffn + l.nonreusable.ffn)}};
}

inline json to_json_report(const BenchReport& r) {
    json modes = json::array();
    for (const auto& m : r.modes) {
        json entry{{"mode", m.mode}, {"flops", m.flops}};
        if (!r.flops_only) {
            entry["wallclock_ms"] = json{{"p50", m.p50_ms}, {"p90", m.p90_ms}};
        }
        modes.push_back(entry);
    }
    return json{{"schema_version", kReportSchemaVersion},
                {"users", r.users},
                {"candidates", r.candidates},
                {"flops_only", r.flops_only},
                {"equivalence", r.equivalence_pass ? "pass" : "fail"},
                {"modes", modes},
                {"flops", to_json_report(r.ledger)},
                {"note", BenchReport::kNote}};
}

inline json to_json_report(const AblationTable& t) {
    json rows = json::array();
    for (const auto& r : t.rows) {
        rows.push_back(json{{"name", r.name},
                            {"c_u", r.c_u},
                            {"c_g", r.c_g},
                            {"compensation", r.compensation},
                            {"aucs", r.aucs},
                            {"median_auc", r.median_auc},
                            {"median_delta_auc", r.median_delta},
                            {"matched_baseline_auc", r.matched_baseline_auc}});
    }
    return json{{"schema_version", kReportSchemaVersion}, {"seeds", t.seeds}, {"rows", rows}};
}

/// Aligned-column text rendering of an ablation table.
inline std::string to_text_table(const AblationTable& t, const std::string& title) {
    std::ostringstream os;
    os << title << " (median over " << t.seeds.size() << " seeds)\n";
    os << std::left << std::setw(14) << "U:G rows" << std::setw(8) << "comp" << std::setw(12)
       << "AUC" << std::setw(12) << "dAUC" << "\n";
    for (const auto& r : t.rows) {
        os << std::left << std::setw(14) << r.name << std::setw(8)
           << (r.compensation ? "Y" : "N") << std::setw(12) << std::fixed
           << std::setprecision(5) << r.median_auc << std::setw(12) << std::showpos
           << r.median_delta << std::noshowpos << "\n";
    }
    return os.str();
}

}  // namespace ugsep
