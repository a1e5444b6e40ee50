#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "nervesynth/cli/commands.hpp"
#include "nervesynth/common/error.hpp"

namespace nervesynth::cli {

using nlohmann::json;

namespace {

using Table = std::vector<std::vector<std::string>>;

std::string fmt(const json& v, const char* spec = "%.3f") {
  if (v.is_null()) return "-";
  if (v.is_string()) return v.get<std::string>();
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v.get<double>());
  return buf;
}

std::string mean_sd(const json& stat) {
  if (stat.is_null() || stat.value("n", 0) == 0) return "-";
  return fmt(stat.at("mean"), "%.2f") + " +/- " + fmt(stat.at("sd"), "%.2f");
}

void print_table(std::ostringstream& out, const Table& t) {
  std::vector<std::size_t> w(t.front().size(), 0);
  for (const auto& row : t)
    for (std::size_t i = 0; i < row.size(); ++i) w[i] = std::max(w[i], row[i].size());
  for (const auto& row : t) {
    std::string line;
    for (std::size_t i = 0; i < row.size(); ++i) {
      line += row[i];
      if (i + 1 < row.size()) line += std::string(w[i] - row[i].size() + 2, ' ');
    }
    out << line << '\n';
  }
  out << '\n';
}

}  // namespace

std::string render_report(const json& r) {
  if (r.value("format", "") != "nervesynth-report") throw DataError("not a nervesynth report");
  std::ostringstream out;
  out << "nervesynth evaluation report\n"
      << "real manifest " << r.value("real_manifest_hash", "?") << ", generated manifest "
      << r.value("generated_manifest_hash", "?") << ", resolution " << r.value("resolution_px", 0) << " px\n\n";

  if (r.contains("fidelity")) {
    const auto& f = r.at("fidelity");
    out << "Fidelity (paired PSNR/SSIM against the conditioning sample)\n";
    Table t{{"Class", "Real", "Generated", "Pairs", "FID", "PSNR (dB)", "SSIM"}};
    auto row = [&](const std::string& name, const json& c) {
      t.push_back({name, std::to_string(c.value("n_real", 0)), std::to_string(c.value("n_generated", 0)),
                   std::to_string(c.value("n_pairs", 0)), fmt(c.at("fid")), fmt(c.at("psnr"), "%.2f"),
                   fmt(c.at("ssim"))});
    };
    for (const auto& [name, c] : f.at("classes").items()) row(name, c);
    row("overall", f.at("overall"));
    print_table(out, t);

    const auto& d = f.at("diversity");
    out << "Diversity (feature space)\n";
    Table dt{{"Class", "Real", "Generated", "Rel. diff"}};
    for (const auto& [name, v] : d.at("real").at("intra_class").items()) {
      dt.push_back({name, fmt(v), fmt(d.at("generated").at("intra_class").at(name)),
                    fmt(d.at("relative_difference").at("intra_class").at(name))});
    }
    dt.push_back({"separability", fmt(d.at("real").at("separability")), fmt(d.at("generated").at("separability")),
                  fmt(d.at("relative_difference").at("separability"))});
    print_table(out, dt);
  }

  if (r.contains("biomarkers")) {
    const auto& b = r.at("biomarkers");
    out << "Biomarkers (mean +/- SD; segmented rows at " << b.value("resolution_px", 0) << " px)\n";
    Table t{{"Class", "Source", "n", "CNFL (mm/mm2)", "CNFD (no./mm2)", "CNBD (no./mm2)", "CNFW (um)"}};
    for (const auto& [name, c] : b.at("classes").items()) {
      for (const char* src : {"real_annotation", "real_segmented", "generated_segmented"}) {
        const auto& s = c.at(src);
        t.push_back({name, src, std::to_string(s.value("n", 0)), mean_sd(s.at("cnfl")), mean_sd(s.at("cnfd")),
                     mean_sd(s.at("cnbd")), mean_sd(s.at("cnfw"))});
      }
    }
    print_table(out, t);
  }

  if (r.contains("downstream")) {
    const auto& d = r.at("downstream");
    out << "Downstream tasks (mean +/- SD over seeds)\n";
    Table t{{"Regime", "Train size", "Accuracy", "mIoU"}};
    for (const auto& [name, g] : d.at("regimes").items()) {
      t.push_back({name, std::to_string(g.value("train_size", 0)), mean_sd(g.at("accuracy")), mean_sd(g.at("miou"))});
    }
    print_table(out, t);
    const auto& delta = d.at("hybrid_minus_real");
    out << "hybrid - real: accuracy " << fmt(delta.at("accuracy"), "%+.3f") << ", mIoU "
        << fmt(delta.at("miou"), "%+.3f") << "\n";
  }
  return out.str();
}

}  // namespace nervesynth::cli
