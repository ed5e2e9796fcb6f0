#include "saerec/pipeline/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "saerec/dataset.hpp"

namespace saerec::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
                                "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Table of a CSV file: header plus rows.
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int col(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  }
};

std::optional<Csv> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) return std::nullopt;
  csv.header = data::split_csv_line(line);
  while (std::getline(in, line)) {
    if (!line.empty()) csv.rows.push_back(data::split_csv_line(line));
  }
  return csv;
}

std::optional<json> read_json_opt(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  return json::parse(in);
}

bool numeric(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

std::string markdown_table(const Csv& csv) {
  std::string out = "| " + fmt::format("{}", fmt::join(csv.header, " | ")) + " |\n|";
  for (std::size_t i = 0; i < csv.header.size(); ++i) out += "---|";
  out += "\n";
  for (const auto& r : csv.rows) out += "| " + fmt::format("{}", fmt::join(r, " | ")) + " |\n";
  return out;
}

std::string cell(const json& j, const char* key, const char* spec = "{:.3f}") {
  if (!j.contains(key) || j.at(key).is_null()) return "n/a";
  if (j.at(key).is_number()) return fmt::format(fmt::runtime(spec), j.at(key).get<double>());
  return j.at(key).dump();
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                           const std::vector<Series>& series) {
  constexpr double W = 720, H = 440, left = 70, right = 180, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      W, H);
  out += fmt::format("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n", left + pw / 2,
                     escape(title));
  out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n", left, top,
                     pw, ph);
  for (int t = 0; t <= 5; ++t) {
    const double xv = x0 + (x1 - x0) * t / 5.0, yv = y0 + (y1 - y0) * t / 5.0;
    out += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1}\" x2=\"{0:.1f}\" y2=\"{2}\" stroke=\"#ddd\"/>\n", px(xv), top,
                       top + ph);
    out += fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{:.3g}</text>\n", px(xv), top + ph + 16, xv);
    out += fmt::format("<line x1=\"{0}\" y1=\"{1:.1f}\" x2=\"{2}\" y2=\"{1:.1f}\" stroke=\"#ddd\"/>\n", left, py(yv),
                       left + pw);
    out += fmt::format("<text x=\"{}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3g}</text>\n", left - 6, py(yv) + 4, yv);
  }
  out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", left + pw / 2, H - 18,
                     escape(xlabel));
  out += fmt::format("<text x=\"18\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>\n",
                     top + ph / 2, escape(ylabel));
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    std::string pts;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      pts += fmt::format("{:.1f},{:.1f} ", px(s.x[i]), py(s.y[i]));
    }
    out += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\" points=\"{}\"/>\n", color, pts);
    const double ly = top + 8 + 16.0 * static_cast<double>(k);
    out += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{3}\" stroke-width=\"2\"/>\n",
                       left + pw + 12, ly, left + pw + 32, color);
    out += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", left + pw + 38, ly + 4, escape(s.name));
  }
  out += "</svg>\n";
  return out;
}

std::vector<std::string> render_report(const fs::path& dir) {
  std::vector<std::string> written;
  std::string md = "# Run report\n\n";
  auto chart = [&](const std::string& name, const std::string& svg) {
    write_file(dir / "report" / name, svg);
    written.push_back("report/" + name);
    md += fmt::format("![{}]({})\n\n", name, name);
  };

  if (auto m = read_json_opt(dir / "sae/metrics.json")) {
    md += "## Sparse autoencoder\n\n| split | rmse | explained variance | L0 |\n|---|---|---|---|\n";
    for (const char* split : {"train", "test"}) {
      const json& s = m->at(split);
      md += fmt::format("| {} | {} | {} | {} |\n", split, cell(s, "rmse", "{:.4f}"), cell(s, "explained_variance", "{:.4f}"),
                        cell(s, "l0", "{:.1f}"));
    }
    md += fmt::format("\nNDCG original {} / with reconstruction {}\n\n", cell(m->at("original"), "ndcg", "{:.4f}"),
                      cell(m->at("substituted"), "ndcg", "{:.4f}"));
  }

  if (auto table = read_csv(dir / "sae_grid/table.csv")) {
    md += "## L1 weight table\n\n" + markdown_table(*table) + "\n";
  }
  for (const auto& [file, label] : std::vector<std::pair<std::string, std::string>>{
           {"sweep_l1.csv", "L1 weight"}, {"sweep_dict.csv", "dictionary size"}}) {
    auto csv = read_csv(dir / "sae_grid" / file);
    if (!csv || csv->rows.empty()) continue;
    Series mean{"mean", {}, {}}, lo{"mean - std", {}, {}}, hi{"mean + std", {}, {}};
    for (const auto& r : csv->rows) {
      double v, m, s;
      if (!numeric(r[0], v) || !numeric(r[1], m) || !numeric(r[2], s)) continue;
      const double x = label == "L1 weight" ? std::log10(v) : v;
      mean.x.push_back(x), lo.x.push_back(x), hi.x.push_back(x);
      mean.y.push_back(m), lo.y.push_back(m - s), hi.y.push_back(m + s);
    }
    md += fmt::format("## Mean correlation against {}\n\n", label) + markdown_table(*csv) + "\n";
    chart(file.substr(0, file.size() - 4) + ".svg",
          svg_line_chart("Mean top-feature correlation", label == "L1 weight" ? "log10 L1 weight" : label,
                         "correlation", {mean, lo, hi}));
  }

  if (auto s = read_json_opt(dir / "interpret/summary.json")) {
    md += "## Interpretability\n\n";
    md += fmt::format("Mean correlation: SAE {} vs raw neurons {}; SAE wins {} of {}\n\n",
                      cell(*s, "sae_mean_correlation"), cell(*s, "raw_mean_correlation"), s->value("wins", 0),
                      s->value("compared", 0));
    md += "| attribute | feature | correlation | raw neuron | raw correlation | top-100 share |\n|---|---|---|---|---|---|\n";
    for (const auto& a : s->at("attributes")) {
      md += fmt::format("| {} | {} | {} | {} | {} | {} |\n", a.at("name").get<std::string>(), a.at("feature").dump(),
                        cell(a, "correlation"), a.at("raw_neuron").dump(), cell(a, "raw_correlation"),
                        cell(a, "top100_share", "{:.2f}"));
    }
    md += "\n";
  }

  if (auto s = read_json_opt(dir / "steer/summary.json")) {
    std::vector<Series> curves;
    md += "## Steering\n\n| attribute | feature | baseline | lowest v | highest v | spearman |\n|---|---|---|---|---|---|\n";
    for (const auto& a : s->at("attributes")) {
      const auto name = a.at("name").get<std::string>();
      md += fmt::format("| {} | {} | {} | {} | {} | {} |\n", name, a.at("feature").dump(), cell(a, "baseline"),
                        cell(a, "at_v_min"), cell(a, "at_v_max"), cell(a, "spearman"));
      auto csv = read_csv(dir / fmt::format("steer/attribute_{:02}_proportions.csv", a.at("attribute").get<int>()));
      if (!csv) continue;
      Series c{name, {}, {}};
      for (const auto& r : csv->rows) {
        double v, p;
        if (r.size() == 3 && r[1] == name && numeric(r[0], v) && numeric(r[2], p)) c.x.push_back(v), c.y.push_back(p);
      }
      curves.push_back(std::move(c));
    }
    md += "\n";
    if (!curves.empty()) chart("steering.svg", svg_line_chart("Target attribute share", "v", "proportion", curves));
  }

  if (auto csv = read_csv(dir / "compare/comparison.csv")) {
    // mean target share over attributes, per method and v
    std::map<std::string, std::map<double, std::pair<double, int>>> acc;
    const int mi = csv->col("method"), vi = csv->col("v"), pi = csv->col("proportion");
    for (const auto& r : csv->rows) {
      double v, p;
      if (!numeric(r[static_cast<std::size_t>(vi)], v) || !numeric(r[static_cast<std::size_t>(pi)], p)) continue;
      auto& slot = acc[r[static_cast<std::size_t>(mi)]][v];
      slot.first += p;
      slot.second += 1;
    }
    std::vector<Series> curves;
    for (const auto& [method, points] : acc) {
      Series c{method, {}, {}};
      for (const auto& [v, sum] : points) c.x.push_back(v), c.y.push_back(sum.first / sum.second);
      curves.push_back(std::move(c));
    }
    if (!curves.empty()) {
      md += "## Additive steering: SAE feature against linear probe\n\n";
      chart("compare.svg", svg_line_chart("Mean target share over attributes", "v", "proportion", curves));
    }
  }
  if (auto s = read_json_opt(dir / "probe/summary.json")) {
    md += fmt::format("Probe mean correlation on test records: {}\n\n", cell(*s, "mean_correlation"));
  }

  write_file(dir / "report/report.md", md);
  written.push_back("report/report.md");
  return written;
}

}  // namespace saerec::pipeline
