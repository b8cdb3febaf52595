#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fusionq/errors.hpp"
#include "fusionq/harness/harness.hpp"

namespace fusionq::harness {

namespace {

namespace fs = std::filesystem;

std::string num(double v) { return json(v).dump(); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

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

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string svg_open(const std::string& title, const std::string& stamp) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
     << " " << kH << "\">\n";
  if (!stamp.empty()) os << "<!-- " << escape(stamp) << " -->\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << fmt(kW / 2) << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
     << escape(title) << "</text>\n";
  return os.str();
}

std::string legend(const std::vector<std::string>& names) {
  std::ostringstream os;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = kTop + 10 + 18 * static_cast<double>(i);
    os << "<rect x=\"" << fmt(kW - kRight + 12) << "\" y=\"" << fmt(y - 9) << "\" width=\"10\" height=\"10\" fill=\""
       << kPalette[i % 7] << "\"/>\n";
    os << "<text x=\"" << fmt(kW - kRight + 28) << "\" y=\"" << fmt(y) << "\" font-family=\"sans-serif\" font-size=\"11\">"
       << escape(names[i]) << "</text>\n";
  }
  return os.str();
}

std::string axes(const std::string& x_label, const std::string& y_label, double y_lo, double y_hi) {
  std::ostringstream os;
  const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
  os << "<line x1=\"" << fmt(x0) << "\" y1=\"" << fmt(y0) << "\" x2=\"" << fmt(x1) << "\" y2=\"" << fmt(y0)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << fmt(x0) << "\" y1=\"" << fmt(y0) << "\" x2=\"" << fmt(x0) << "\" y2=\"" << fmt(y1)
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = y_lo + (y_hi - y_lo) * i / 4.0;
    const double y = y0 - (y0 - y1) * i / 4.0;
    os << "<text x=\"" << fmt(x0 - 6) << "\" y=\"" << fmt(y + 4)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << tick(v) << "</text>\n";
  }
  os << "<text x=\"" << fmt((x0 + x1) / 2) << "\" y=\"" << fmt(kH - 10)
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << escape(x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << fmt((y0 + y1) / 2) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"12\" transform=\"rotate(-90 16 " << fmt((y0 + y1) / 2) << ")\">" << escape(y_label) << "</text>\n";
  return os.str();
}

std::string line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                      const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series,
                      const std::string& stamp) {
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const auto& [name, pts] : series)
    for (const auto& [x, y] : pts) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      if (first) {
        xmin = xmax = x;
        ymin = ymax = y;
        first = false;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  ymin = std::min(ymin, 0.0);
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  std::ostringstream os;
  os << svg_open(title, stamp) << axes(x_label, y_label, ymin, ymax);
  const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
  os << "<text x=\"" << fmt(x0) << "\" y=\"" << fmt(y0 + 16) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"10\">" << tick(xmin) << "</text>\n";
  os << "<text x=\"" << fmt(x1) << "\" y=\"" << fmt(y0 + 16) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"10\">" << tick(xmax) << "</text>\n";
  std::vector<std::string> names;
  for (std::size_t s = 0; s < series.size(); ++s) {
    names.push_back(series[s].first);
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[s % 7] << "\" stroke-width=\"1.5\" points=\"";
    bool sep = false;
    for (const auto& [x, y] : series[s].second) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      const double px = x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
      const double py = y0 - (y - ymin) / (ymax - ymin) * (y0 - y1);
      os << (sep ? " " : "") << fmt(px) << "," << fmt(py);
      sep = true;
    }
    os << "\"/>\n";
  }
  os << legend(names) << "</svg>\n";
  return os.str();
}

std::string bar_chart(const std::string& title, const std::vector<std::string>& groups,
                      const std::vector<std::string>& series_names, const std::vector<std::vector<double>>& values,
                      const std::string& stamp) {
  double ymax = 1.0;
  for (const auto& g : values)
    for (double v : g)
      if (std::isfinite(v)) ymax = std::max(ymax, v);
  std::ostringstream os;
  os << svg_open(title, stamp) << axes("", "value", 0.0, ymax);
  const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
  const double group_w = (x1 - x0) / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const double bar_w = group_w * 0.8 / static_cast<double>(std::max<std::size_t>(series_names.size(), 1));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = x0 + group_w * static_cast<double>(g) + group_w * 0.1;
    for (std::size_t s = 0; s < series_names.size() && g < values.size() && s < values[g].size(); ++s) {
      const double v = std::isfinite(values[g][s]) ? std::max(values[g][s], 0.0) : 0.0;
      const double h = v / ymax * (y0 - y1);
      os << "<rect x=\"" << fmt(gx + bar_w * static_cast<double>(s)) << "\" y=\"" << fmt(y0 - h) << "\" width=\""
         << fmt(bar_w) << "\" height=\"" << fmt(h) << "\" fill=\"" << kPalette[s % 7] << "\"/>\n";
    }
    os << "<text x=\"" << fmt(gx + group_w * 0.4) << "\" y=\"" << fmt(y0 + 16)
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << escape(groups[g]) << "</text>\n";
  }
  os << legend(series_names) << "</svg>\n";
  return os.str();
}

struct Csv {
  std::string stamp;
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

Csv read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open");
  Csv csv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (csv.stamp.empty()) csv.stamp = line.substr(line.find_first_not_of("# "));
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (csv.header.empty()) {
      csv.header = cells;
      continue;
    }
    if (cells.size() != csv.header.size())
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": wrong column count");
    std::vector<double> row;
    for (const auto& c : cells) {
      try {
        row.push_back(std::stod(c));
      } catch (const std::exception&) {
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": not a number '" + c + "'");
      }
    }
    csv.rows.push_back(std::move(row));
  }
  if (csv.header.empty()) throw ParseError(path.string() + ": missing header");
  return csv;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string stamp_of(const json& doc) {
  return "config_hash=" + doc.at("config_hash").get<std::string>() + " seed=" + doc.at("seed").dump();
}

struct SummaryRow {
  std::string source, formulation, cross_attention, history, modality;
  const json* report = nullptr;
};

}  // namespace

void write_json(const std::filesystem::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows, const std::string& stamp) {
  std::ostringstream os;
  if (!stamp.empty()) os << "# " << stamp << "\n";
  os << "step,L_total,L_cls,L_reg,L_aux\n";
  for (const auto& r : rows)
    os << r.step << "," << num(r.loss.total) << "," << num(r.loss.cls) << "," << num(r.loss.reg) << ","
       << num(r.loss.aux) << "\n";
  write_text(path, os.str());
}

void write_mse_csv(const std::filesystem::path& path, const std::vector<double>& mse, const std::string& stamp) {
  std::ostringstream os;
  if (!stamp.empty()) os << "# " << stamp << "\n";
  os << "layer,mse\n";
  for (std::size_t i = 0; i < mse.size(); ++i) os << i << "," << num(mse[i]) << "\n";
  write_text(path, os.str());
}

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
  return line_plot(title, x_label, y_label, series, "");
}

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& groups,
                          const std::vector<std::string>& series_names, const std::vector<std::vector<double>>& values) {
  return bar_chart(title, groups, series_names, values, "");
}

std::vector<std::string> emit_report(const std::filesystem::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("report: not a directory: " + dir.string());
  std::vector<std::string> skipped;
  const fs::path plots = dir / "plots";
  auto ensure_plots = [&] { fs::create_directories(plots); };

  auto attempt = [&](const char* name, auto&& fn) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) {
      skipped.push_back(std::string(name) + ": missing");
      return;
    }
    try {
      fn(p);
    } catch (const std::exception& e) {
      skipped.push_back(std::string(name) + ": " + e.what());
    }
  };

  attempt("loss.csv", [&](const fs::path& p) {
    const Csv csv = read_csv(p);
    std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
    for (std::size_t c = 1; c < csv.header.size(); ++c) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& r : csv.rows) pts.emplace_back(r[0], r[c]);
      series.emplace_back(csv.header[c], std::move(pts));
    }
    ensure_plots();
    write_text(plots / "loss.svg", line_plot("Training loss", csv.header[0], "loss", series, csv.stamp));
  });

  attempt("mse_layers.csv", [&](const fs::path& p) {
    const Csv csv = read_csv(p);
    if (csv.header.size() != 2) throw ParseError(p.string() + ": expected two columns");
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : csv.rows) pts.emplace_back(r[0], r[1]);
    ensure_plots();
    write_text(plots / "mse_layers.svg",
               line_plot("Image-query center MSE per layer", "layer", "MSE (m^2)", {{"mse", pts}}, csv.stamp));
  });

  json report, ablation;
  std::vector<SummaryRow> rows;
  std::vector<std::string> stamps;

  attempt("report.json", [&](const fs::path& p) {
    report = read_json(p);
    const auto& ap = report.at("ap");
    const auto thresholds = ap.at("thresholds").get<std::vector<double>>();
    std::vector<std::string> groups, series;
    for (double t : thresholds) groups.push_back(tick(t) + " m");
    std::vector<std::vector<double>> values(thresholds.size());
    for (auto it = ap.at("per_class").begin(); it != ap.at("per_class").end(); ++it) {
      series.push_back(it.key());
      const auto v = it.value().at("ap").get<std::vector<double>>();
      for (std::size_t t = 0; t < thresholds.size() && t < v.size(); ++t) values[t].push_back(v[t]);
    }
    series.push_back("mean");
    const auto mean = ap.at("mean_per_threshold").get<std::vector<double>>();
    for (std::size_t t = 0; t < thresholds.size() && t < mean.size(); ++t) values[t].push_back(mean[t]);
    ensure_plots();
    write_text(plots / "ap.svg", bar_chart("Center-distance AP", groups, series, values, stamp_of(report)));
    stamps.push_back("report.json " + stamp_of(report));
    rows.push_back({"eval", "", "", "", report.value("modality", ""), &report});
  });

  attempt("ablation.json", [&](const fs::path& p) {
    ablation = read_json(p);
    std::vector<std::string> groups;
    std::vector<std::vector<double>> values;
    for (const auto& r : ablation.at("rows")) {
      SummaryRow row{"ablation", r.at("formulation").get<std::string>(), r.at("cross_attention").dump(),
                     r.at("history").dump(), r.at("modality").get<std::string>(), &r.at("report")};
      groups.push_back(row.formulation.substr(0, 4) + "/" + (r.at("cross_attention").get<bool>() ? "x" : "-") + "/h" +
                       row.history + "/" + row.modality);
      values.push_back({r.at("report").at("ap").at("mean").get<double>()});
      rows.push_back(std::move(row));
    }
    ensure_plots();
    write_text(plots / "ablation.svg", bar_chart("Ablation mean AP", groups, {"mean AP"}, values, stamp_of(ablation)));
    stamps.push_back("ablation.json " + stamp_of(ablation));
  });

  json sparsity;
  attempt("sparsity.json", [&](const fs::path& p) {
    sparsity = read_json(p);
    sparsity.at("ratio").get<double>();
    stamps.push_back("sparsity.json " + stamp_of(sparsity));
  });

  std::ostringstream csv, md;
  if (!rows.empty()) {
    const auto thresholds = rows.front().report->at("ap").at("thresholds").get<std::vector<double>>();
    std::vector<std::string> cols = {"source", "formulation", "cross_attention", "history", "modality", "mean_ap"};
    for (double t : thresholds) cols.push_back("ap@" + tick(t));
    cols.push_back("mse_initial");
    cols.push_back("mse_final");
    for (std::size_t i = 0; i < stamps.size(); ++i) md << "<!-- " << stamps[i] << " -->\n";
    md << "|";
    for (std::size_t i = 0; i < cols.size(); ++i) {
      csv << (i ? "," : "") << cols[i];
      md << " " << cols[i] << " |";
    }
    csv << "\n";
    md << "\n|";
    for (std::size_t i = 0; i < cols.size(); ++i) md << "---|";
    md << "\n";
    for (const auto& r : rows) {
      const auto& rep = *r.report;
      std::vector<std::string> cells = {r.source, r.formulation, r.cross_attention, r.history, r.modality,
                                        rep.at("ap").at("mean").dump()};
      const auto& mpt = rep.at("ap").at("mean_per_threshold");
      for (std::size_t t = 0; t < thresholds.size(); ++t) cells.push_back(t < mpt.size() ? mpt[t].dump() : "");
      const auto& mse = rep.at("mse_layers");
      cells.push_back(mse.empty() ? "" : mse.front().dump());
      cells.push_back(mse.empty() ? "" : mse.back().dump());
      md << "|";
      for (std::size_t i = 0; i < cells.size(); ++i) {
        csv << (i ? "," : "") << cells[i];
        md << " " << cells[i] << " |";
      }
      csv << "\n";
      md << "\n";
    }
  }
  if (!sparsity.is_null()) {
    if (!md.str().empty()) md << "\n";
    else md << "<!-- sparsity.json " << stamp_of(sparsity) << " -->\n";
    md << "| pillar_count_mean | dense_grid_count | ratio |\n|---|---|---|\n| " << sparsity.at("pillar_count_mean").dump()
       << " | " << sparsity.at("dense_grid_count").dump() << " | " << sparsity.at("ratio").dump() << " |\n";
  }
  write_text(dir / "summary.csv", csv.str());
  write_text(dir / "summary.md", md.str());
  return skipped;
}

}  // namespace fusionq::harness
