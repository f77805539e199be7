#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "calvaria/core/errors.hpp"
#include "calvaria/pipeline/pipeline.hpp"
#include "calvaria/stats/stats.hpp"
#include "stage_util.hpp"

namespace calvaria::pipeline {

namespace {

std::string fmt(double v, const char* spec = "%.6g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

nlohmann::json test_result_json(const stats::TestResult& r) {
    return {
        {"statistic", r.statistic},
        {"p_value", r.p_value},
        {"method", r.method == stats::Method::exact ? "exact" : "normal_approx"},
        {"n_effective", r.n_effective},
        {"decision", r.decision == stats::Decision::reject ? "reject" : "fail_to_reject"},
    };
}

std::string pad(const std::string& s, std::size_t width) {
    return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

} // namespace

std::filesystem::path run_stats(const ExperimentConfig& cfg,
                                const std::filesystem::path& metrics_csv) {
    validate(cfg);
    std::ifstream in(metrics_csv);
    if (!in) {
        throw StateError("stats: cannot read " + metrics_csv.string() +
                         " (run the evaluate stage first)");
    }

    std::string line;
    if (!std::getline(in, line)) {
        throw StateError("stats: empty metrics file " + metrics_csv.string());
    }
    const std::vector<std::string> header = split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) {
        col[header[i]] = i;
    }
    for (const char* required : {"subject_id", "condition", "dice_1", "hd95_1"}) {
        if (col.count(required) == 0) {
            throw StateError("stats: metrics file lacks column " + std::string(required));
        }
    }

    // subject -> condition -> cells
    std::map<std::string, std::map<std::string, std::vector<std::string>>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells = split_csv_line(line);
        cells.resize(header.size());
        rows[cells[col["subject_id"]]][cells[col["condition"]]] = std::move(cells);
    }

    // Paired samples: a = real-CT segmentation, b = sCT segmentation.
    stats::MetricTable table;
    for (int code = 1; code <= 8; ++code) {
        const std::string region = label_names()[static_cast<std::size_t>(code)];
        stats::PairedSample dice, hd;
        dice.label = hd.label = region;
        const std::size_t dice_col = col.at("dice_" + std::to_string(code));
        const std::size_t hd_col = col.at("hd95_" + std::to_string(code));
        for (const auto& [subject, conditions] : rows) {
            (void)subject;
            const auto a = conditions.find("real_ct");
            const auto b = conditions.find("sct");
            if (a == conditions.end() || b == conditions.end()) {
                continue;
            }
            dice.values_a.push_back(std::stod(a->second[dice_col]));
            dice.values_b.push_back(std::stod(b->second[dice_col]));
            if (!a->second[hd_col].empty() && !b->second[hd_col].empty()) {
                hd.values_a.push_back(std::stod(a->second[hd_col]));
                hd.values_b.push_back(std::stod(b->second[hd_col]));
            }
        }
        table[region]["dice"] = dice;
        table[region]["hd95_mm"] = hd;
    }

    const std::map<std::string, double> bounds{{"dice", 0.02}, {"hd95_mm", 3.0}};
    const stats::PanelReport panel = stats::run_region_panel(table, bounds);

    nlohmann::json cells = nlohmann::json::array();
    for (const stats::PanelCell& cell : panel.cells) {
        nlohmann::json j{{"region", cell.region}, {"metric", cell.metric}, {"bound", cell.bound}};
        if (cell.wilcoxon) {
            j["wilcoxon"] = test_result_json(*cell.wilcoxon);
        } else {
            j["wilcoxon_error"] = cell.wilcoxon_error;
        }
        if (cell.tost) {
            j["tost"] = test_result_json(*cell.tost);
        } else {
            j["tost_error"] = cell.tost_error;
        }
        cells.push_back(j);
    }
    const nlohmann::json out{{"alpha", stats::kAlpha},
                             {"bounds", bounds},
                             {"cells", cells},
                             {"equivalent_regions", panel.equivalent_regions},
                             {"significant_regions", panel.significant_regions}};

    const std::filesystem::path dir = metrics_csv.parent_path();
    const std::filesystem::path json_path = dir / "stats.json";
    {
        std::ofstream f(json_path, std::ios::trunc);
        if (!f) {
            throw StateError("stats: cannot write " + json_path.string());
        }
        f << out.dump(2) << "\n";
    }
    {
        std::ofstream f(dir / "stats_table.txt", std::ios::trunc);
        if (!f) {
            throw StateError("stats: cannot write stats_table.txt");
        }
        f << pad("region", 18) << pad("metric", 10) << pad("n", 5) << pad("wilcoxon_p", 12)
          << pad("significant", 13) << pad("tost_p", 12) << pad("equivalent", 11) << "\n";
        f << std::string(81, '-') << "\n";
        for (const stats::PanelCell& cell : panel.cells) {
            // Full error text lives in stats.json; the table stays aligned.
            f << pad(cell.region, 18) << pad(cell.metric, 10);
            if (cell.wilcoxon) {
                f << pad(std::to_string(cell.wilcoxon->n_effective), 5)
                  << pad(fmt(cell.wilcoxon->p_value, "%.4f"), 12)
                  << pad(cell.wilcoxon->decision == stats::Decision::reject ? "yes" : "no", 13);
            } else {
                f << pad("-", 5) << pad("-", 12) << pad("no-data", 13);
            }
            if (cell.tost) {
                f << pad(fmt(cell.tost->p_value, "%.4f"), 12)
                  << pad(cell.tost->decision == stats::Decision::reject ? "yes" : "no", 11);
            } else {
                f << pad("-", 12) << pad("no-data", 11);
            }
            f << "\n";
        }
    }
    return json_path;
}

std::filesystem::path write_report(const ExperimentConfig& cfg) {
    validate(cfg);
    const std::filesystem::path ev = detail::eval_dir(cfg);
    nlohmann::json metrics, st;
    {
        std::ifstream f(ev / "metrics.json");
        if (!f) {
            throw StateError("report: missing " + (ev / "metrics.json").string() +
                             " (run the evaluate stage first)");
        }
        f >> metrics;
    }
    {
        std::ifstream f(ev / "stats.json");
        if (!f) {
            throw StateError("report: missing " + (ev / "stats.json").string() +
                             " (run the stats stage first)");
        }
        f >> st;
    }

    std::ostringstream md;
    md << "# Synthesis and segmentation evaluation\n\n";
    md << "Config hash: `" << metrics.at("config_hash").get<std::string>() << "`\n\n";

    md << "## Image quality (sCT vs real CT, test split)\n\n";
    md << "| subject | SSIM | PSNR (dB) | MAE | LPIPS proxy |\n";
    md << "|---|---|---|---|---|\n";
    for (const auto& [id, entry] : metrics.at("subjects").items()) {
        const auto& q = entry.at("image_quality");
        const std::string psnr = q.at("psnr_db").is_string()
                                     ? q.at("psnr_db").get<std::string>()
                                     : fmt(q.at("psnr_db").get<double>(), "%.2f");
        md << "| " << id << " | " << fmt(q.at("ssim").get<double>(), "%.4f") << " | " << psnr
           << " | " << fmt(q.at("mae").get<double>(), "%.4f") << " | "
           << fmt(q.at("lpips_proxy").get<double>(), "%.5f") << " |\n";
    }
    md << "\nFID (sCT vs real CT, pooled test patches): "
       << fmt(metrics.at("fid_sct_vs_real").get<double>(), "%.4f") << "\n\n";

    md << "## Segmentation (mean Dice per label)\n\n";
    md << "| label | real CT | sCT | sCT (fine-tuned) |\n";
    md << "|---|---|---|---|\n";
    for (int code = 1; code <= 8; ++code) {
        std::map<std::string, std::pair<double, int>> acc;
        for (const auto& [id, entry] : metrics.at("subjects").items()) {
            (void)id;
            for (const char* cond : {"real_ct", "sct", "sct_ft"}) {
                const auto& d = entry.at("segmentation").at(cond).at("dice");
                acc[cond].first += d.at(std::to_string(code)).get<double>();
                acc[cond].second += 1;
            }
        }
        md << "| " << label_names()[static_cast<std::size_t>(code)] << " |";
        for (const char* cond : {"real_ct", "sct", "sct_ft"}) {
            md << " " << fmt(acc[cond].first / std::max(acc[cond].second, 1), "%.4f") << " |";
        }
        md << "\n";
    }

    const auto& summary = metrics.at("summary");
    md << "\nHeadline means: SSIM " << fmt(summary.at("mean_ssim").get<double>(), "%.4f")
       << ", bone Dice (sCT) " << fmt(summary.at("mean_bone_dice_sct").get<double>(), "%.4f")
       << ", suture Dice (sCT) "
       << fmt(summary.at("mean_suture_dice_sct").get<double>(), "%.4f")
       << ", suture Dice (FT) "
       << fmt(summary.at("mean_suture_dice_sct_ft").get<double>(), "%.4f") << ".\n\n";

    md << "## Equivalence panel (real CT vs sCT segmentations)\n\n";
    md << "alpha = " << fmt(st.at("alpha").get<double>(), "%.2f")
       << ", bounds: Dice +/- " << fmt(st.at("bounds").at("dice").get<double>(), "%.2f")
       << ", HD95 +/- " << fmt(st.at("bounds").at("hd95_mm").get<double>(), "%.1f") << " mm\n\n";
    md << "| region | metric | Wilcoxon p | significant | TOST p | equivalent |\n";
    md << "|---|---|---|---|---|---|\n";
    for (const auto& cell : st.at("cells")) {
        md << "| " << cell.at("region").get<std::string>() << " | "
           << cell.at("metric").get<std::string>() << " | ";
        if (cell.contains("wilcoxon")) {
            const auto& w = cell.at("wilcoxon");
            md << fmt(w.at("p_value").get<double>(), "%.4f") << " | "
               << (w.at("decision").get<std::string>() == "reject" ? "yes" : "no") << " | ";
        } else {
            md << "- | " << cell.at("wilcoxon_error").get<std::string>() << " | ";
        }
        if (cell.contains("tost")) {
            const auto& t = cell.at("tost");
            md << fmt(t.at("p_value").get<double>(), "%.4f") << " | "
               << (t.at("decision").get<std::string>() == "reject" ? "yes" : "no") << " |\n";
        } else {
            md << "- | " << cell.at("tost_error").get<std::string>() << " |\n";
        }
    }

    md << "\n## Figures\n\nPer-subject slice grids (MRI | real CT | sCT) and suture overlays"
          " (predicted heatmap in red on sCT, ground truth in blue on real CT) are under"
          " `figures/`.\n";

    const std::filesystem::path path = cfg.out_dir / "report.md";
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw StateError("report: cannot write " + path.string());
    }
    f << md.str();
    return path;
}

} // namespace calvaria::pipeline
