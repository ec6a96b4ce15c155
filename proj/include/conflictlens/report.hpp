// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Report bundle: per-figure CSVs, standalone SVG charts and a summary table,
// assembled from whatever stage outputs exist in a run directory.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "conflictlens/binio.hpp"

namespace conflictlens {

// Minimal reader for the comma-separated files this tool writes (no quoting;
// lines starting with '#' are trailers).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> trailers;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw FormatError("csv: missing column '" + name + "'", 0);
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      t.trailers.push_back(line);
      continue;
    }
    if (first) {
      t.header = split_csv_line(line);
      first = false;
    } else {
      t.rows.push_back(split_csv_line(line));
    }
  }
  return t;
}

inline std::optional<CsvTable> read_csv_if_exists(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) return std::nullopt;
  return parse_csv(binio::read_file(p));
}

// ---------------------------------------------------------------------------
// SVG

namespace svg {

inline std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(2);
  os << std::fixed << v;
  return os.str();
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};
  return colors[i % 6];
}

struct Series {
  std::string name;
  std::vector<double> values;
};

inline std::string header(double w, double h, const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
     << ' ' << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << esc(title) << "</text>\n";
  return os.str();
}

inline void legend(std::ostringstream& os, const std::vector<Series>& series, double x, double y) {
  for (std::size_t s = 0; s < series.size(); ++s) {
    os << "<rect x=\"" << x << "\" y=\"" << y + 16.0 * static_cast<double>(s) << "\" width=\"10\" height=\"10\" fill=\""
       << palette(s) << "\"/><text x=\"" << x + 14 << "\" y=\"" << y + 9 + 16.0 * static_cast<double>(s) << "\">"
       << esc(series[s].name) << "</text>\n";
  }
}

// Grouped vertical bars in [0, 1].
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& groups,
                             const std::vector<Series>& series) {
  const double W = 560, H = 320, L = 50, T = 40, B = 50, R = 150;
  const double pw = W - L - R, ph = H - T - B;
  std::ostringstream os;
  os << header(W, H, title);
  os << "<line x1=\"" << L << "\" y1=\"" << T + ph << "\" x2=\"" << L + pw << "\" y2=\"" << T + ph
     << "\" stroke=\"black\"/>\n<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << T + ph
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = T + ph * (1.0 - t / 4.0);
    os << "<text x=\"" << L - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << num(t / 4.0) << "</text>\n";
  }
  const double gw = pw / static_cast<double>(std::max<std::size_t>(1, groups.size()));
  const double bw = gw * 0.8 / static_cast<double>(std::max<std::size_t>(1, series.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = L + gw * static_cast<double>(g) + gw * 0.1;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = g < series[s].values.size() ? std::clamp(series[s].values[g], 0.0, 1.0) : 0.0;
      const double x = gx + bw * static_cast<double>(s);
      os << "<rect x=\"" << x << "\" y=\"" << T + ph * (1 - v) << "\" width=\"" << bw * 0.95 << "\" height=\"" << ph * v
         << "\" fill=\"" << palette(s) << "\"><title>" << esc(series[s].name) << ": " << num(v) << "</title></rect>\n";
      os << "<text x=\"" << x + bw / 2 << "\" y=\"" << T + ph * (1 - v) - 3 << "\" text-anchor=\"middle\" font-size=\"9\">"
         << num(v) << "</text>\n";
    }
    os << "<text x=\"" << gx + gw * 0.4 << "\" y=\"" << T + ph + 16 << "\" text-anchor=\"middle\">" << esc(groups[g])
       << "</text>\n";
  }
  legend(os, series, L + pw + 12, T);
  os << "</svg>\n";
  return os.str();
}

inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::vector<double>& xs,
                              const std::vector<Series>& series, double ymin = 0.0, double ymax = 1.0) {
  const double W = 600, H = 340, L = 50, T = 40, B = 50, R = 190;
  const double pw = W - L - R, ph = H - T - B;
  std::ostringstream os;
  os << header(W, H, title);
  if (xs.empty()) {
    os << "</svg>\n";
    return os.str();
  }
  const double x0 = xs.front(), x1 = xs.back() == xs.front() ? xs.front() + 1 : xs.back();
  auto px = [&](double x) { return L + pw * (x - x0) / (x1 - x0); };
  auto py = [&](double y) { return T + ph * (1 - (std::clamp(y, ymin, ymax) - ymin) / (ymax - ymin)); };
  os << "<line x1=\"" << L << "\" y1=\"" << T + ph << "\" x2=\"" << L + pw << "\" y2=\"" << T + ph
     << "\" stroke=\"black\"/>\n<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << T + ph
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = ymin + (ymax - ymin) * t / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  for (double x : {x0, (x0 + x1) / 2, x1})
    os << "<text x=\"" << px(x) << "\" y=\"" << T + ph + 16 << "\" text-anchor=\"middle\">" << num(x) << "</text>\n";
  os << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << esc(xlabel) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    os << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << palette(s) << "\" points=\"";
    for (std::size_t i = 0; i < std::min(xs.size(), series[s].values.size()); ++i)
      os << px(xs[i]) << ',' << py(series[s].values[i]) << ' ';
    os << "\"/>\n";
  }
  legend(os, series, L + pw + 12, T);
  os << "</svg>\n";
  return os.str();
}

// Table whose numeric cells in `signed_columns` are filled green when
// positive and red when negative.
inline std::string signed_table(const std::string& title, const std::vector<std::string>& header_row,
                                const std::vector<std::vector<std::string>>& rows,
                                const std::vector<std::size_t>& signed_columns) {
  const double cw = 110, rh = 24, T = 36;
  const double W = cw * static_cast<double>(header_row.size()) + 20;
  const double H = T + rh * static_cast<double>(rows.size() + 1) + 16;
  std::ostringstream os;
  os << svg::header(W, H, title);
  auto cell = [&](double x, double y, const std::string& text, const char* fill, bool bold) {
    os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cw << "\" height=\"" << rh << "\" fill=\"" << fill
       << "\" stroke=\"#999\"/><text x=\"" << x + cw / 2 << "\" y=\"" << y + 16 << "\" text-anchor=\"middle\""
       << (bold ? " font-weight=\"bold\"" : "") << ">" << esc(text) << "</text>\n";
  };
  for (std::size_t c = 0; c < header_row.size(); ++c) cell(10 + cw * static_cast<double>(c), T, header_row[c], "#eee", true);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const char* fill = "white";
      if (std::find(signed_columns.begin(), signed_columns.end(), c) != signed_columns.end()) {
        const double v = std::strtod(rows[r][c].c_str(), nullptr);
        fill = v > 0 ? "#b7e1b5" : (v < 0 ? "#f2b8b5" : "white");
      }
      cell(10 + cw * static_cast<double>(c), T + rh * static_cast<double>(r + 1), rows[r][c], fill, false);
    }
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace svg

// ---------------------------------------------------------------------------
// Report

struct ReportFiles {
  std::vector<std::filesystem::path> written;
  std::vector<std::string> absent;  // stages whose outputs were missing
};

namespace detail {

inline double to_d(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

inline std::string fmt_pct(double v) {
  std::ostringstream os;
  os.precision(1);
  os << std::fixed << v * 100.0;
  return os.str();
}

}  // namespace detail

// Reads stage outputs from `run_dir` and writes the bundle into
// `run_dir/report`. Missing inputs are noted, never fatal.
inline ReportFiles emit_report(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  using detail::to_d;
  const fs::path out = run_dir / "report";
  fs::create_directories(out);
  ReportFiles files;
  std::ostringstream summary;
  auto put = [&](const std::string& name, const std::string& text) {
    binio::write_file_atomic(out / name, text);
    files.written.push_back(out / name);
  };
  summary << "conflictlens report for " << run_dir.string() << "\n\n";

  // Behavior: unimodal vs. conflict bars per modality.
  if (auto t = read_csv_if_exists(run_dir / "behave.csv")) {
    const auto ci = t->column("condition"), ti = t->column("target_modality"), ai = t->column("accuracy"),
               mi = t->column("misled"), ii = t->column("in_option_incorrect"), oi = t->column("out_of_option");
    std::map<std::pair<std::string, std::string>, std::vector<std::string>> by;
    for (const auto& r : t->rows) by[{r[ci], r[ti]}] = r;
    std::vector<std::string> groups = {"image", "caption"};
    svg::Series uni{"unimodal baseline", {}}, con{"conflicting input", {}}, cons{"consistent input", {}};
    std::ostringstream csv;
    csv << "target_modality,unimodal_accuracy,conflict_accuracy,consistent_accuracy,drop\n";
    summary << "[stage: behave] accuracy (%) by target modality\n";
    summary << "  target    unimodal  conflict  consistent  drop   | conflict breakdown: correct misled in-option out-of-option\n";
    for (const auto& g : groups) {
      auto get = [&](const std::string& cond) {
        auto it = by.find({cond, g});
        return it == by.end() ? std::vector<std::string>{} : it->second;
      };
      const auto u = get("unimodal"), c = get("inconsistent"), k = get("consistent");
      const double ua = u.empty() ? 0 : to_d(u[ai]), ca = c.empty() ? 0 : to_d(c[ai]), ka = k.empty() ? 0 : to_d(k[ai]);
      uni.values.push_back(ua);
      con.values.push_back(ca);
      cons.values.push_back(ka);
      csv << g << ',' << ua << ',' << ca << ',' << ka << ',' << ua - ca << '\n';
      char line[256];
      std::snprintf(line, sizeof line, "  %-8s  %8s  %8s  %10s  %5s  |   %s %s %s %s\n", g.c_str(),
                    detail::fmt_pct(ua).c_str(), detail::fmt_pct(ca).c_str(), detail::fmt_pct(ka).c_str(),
                    detail::fmt_pct(ua - ca).c_str(), c.empty() ? "-" : detail::fmt_pct(ca).c_str(),
                    c.empty() ? "-" : detail::fmt_pct(to_d(c[mi])).c_str(),
                    c.empty() ? "-" : detail::fmt_pct(to_d(c[ii])).c_str(),
                    c.empty() ? "-" : detail::fmt_pct(to_d(c[oi])).c_str());
      summary << line;
    }
    put("behavior.csv", csv.str());
    put("behavior.svg", svg::bar_chart("Accuracy by target modality", groups, {uni, con, cons}));
  } else {
    files.absent.push_back("behave");
    summary << "behave: absent\n";
  }
  summary << '\n';

  // Probes.
  if (auto t = read_csv_if_exists(run_dir / "probes.csv")) {
    const auto li = t->column("layer"), ki = t->column("probe_kind"), ti = t->column("target_modality"),
               ri = t->column("regime"), ai = t->column("accuracy");
    std::map<std::string, std::map<std::size_t, double>> series;
    for (const auto& r : t->rows)
      series[r[ki] + "/" + r[ti] + (r[ri] == "plain" ? "" : "/" + r[ri])][std::stoul(r[li])] = to_d(r[ai]);
    std::vector<double> xs;
    std::vector<svg::Series> ss;
    for (const auto& [name, pts] : series) {
      if (name.find("consistency") != std::string::npos && name.find("/SID") != std::string::npos) continue;
      svg::Series s{name, {}};
      xs.clear();
      for (const auto& [l, v] : pts) {
        xs.push_back(static_cast<double>(l));
        s.values.push_back(v);
      }
      ss.push_back(std::move(s));
    }
    put("probes.csv", binio::read_file(run_dir / "probes.csv"));
    put("probes.svg", svg::line_chart("Probe accuracy by layer", "layer", xs, ss));
    summary << "[stage: probe] last-layer probe accuracy\n";
    const std::size_t last = xs.empty() ? 0 : static_cast<std::size_t>(xs.back());
    for (const auto& [name, pts] : series)
      if (auto it = pts.find(last); it != pts.end()) summary << "  " << name << ": " << detail::fmt_pct(it->second) << "\n";
  } else {
    files.absent.push_back("probe");
    summary << "probe: absent\n";
  }
  summary << '\n';

  // Salience.
  if (auto t = read_csv_if_exists(run_dir / "salience.csv")) {
    const auto li = t->column("layer"), mi = t->column("modality"), vi = t->column("v"), si = t->column("seed"),
               ci = t->column("condition");
    std::map<std::string, std::map<std::size_t, double>> series;
    for (const auto& r : t->rows)
      if (r[si] == "mean") series[r[ci] + ": v(" + r[mi] + ")"][std::stoul(r[li])] = to_d(r[vi]);
    std::vector<double> xs;
    std::vector<svg::Series> ss;
    for (const auto& [name, pts] : series) {
      svg::Series s{name, {}};
      xs.clear();
      for (const auto& [l, v] : pts) {
        xs.push_back(static_cast<double>(l));
        s.values.push_back(v);
      }
      ss.push_back(std::move(s));
    }
    put("salience.csv", binio::read_file(run_dir / "salience.csv"));
    put("salience.svg", svg::line_chart("V-Measure by layer", "layer", xs, ss));
    if (auto g = read_csv_if_exists(run_dir / "gap_accuracy.csv")) {
      put("gap_accuracy.csv", binio::read_file(run_dir / "gap_accuracy.csv"));
      summary << "[stage: cluster] last-layer V-gap vs. conflict accuracy\n";
      for (const auto& r : g->rows)
        summary << "  " << r[g->column("condition")] << ": gap " << r[g->column("gap")] << ", accuracy "
                << r[g->column("accuracy")] << "\n";
      for (const auto& tr : g->trailers) summary << "  " << tr.substr(2) << "\n";
    }
  } else {
    files.absent.push_back("cluster");
    summary << "cluster: absent\n";
  }
  summary << '\n';

  // Sweep curves and classification.
  auto curves = read_csv_if_exists(run_dir / "sweep" / "curves.csv");
  if (curves) {
    put("curves.csv", binio::read_file(run_dir / "sweep" / "curves.csv"));
    std::vector<std::pair<std::size_t, std::size_t>> show;
    std::map<std::pair<std::size_t, std::size_t>, std::string> type_of;
    if (fs::exists(run_dir / "heads.json")) {
      auto j = nlohmann::json::parse(binio::read_file(run_dir / "heads.json"));
      for (const auto& h : j.at("heads")) type_of[{h.at("layer").get<std::size_t>(), h.at("head").get<std::size_t>()}] = h.at("type");
      for (const auto& [type, lists] : j.at("rankings").items())
        if (!lists.at("top_delta2").empty())
          show.emplace_back(lists.at("top_delta2")[0][0].get<std::size_t>(), lists.at("top_delta2")[0][1].get<std::size_t>());
    }
    if (show.empty() && !curves->rows.empty()) show.emplace_back(0, 0);
    const auto li = curves->column("layer"), hi = curves->column("head"), ti = curves->column("target_modality"),
               ai = curves->column("alpha"), pi = curves->column("portion_target");
    std::vector<svg::Series> ss;
    std::vector<double> xs;
    for (auto [l, h] : show) {
      for (const std::string target : {"image", "caption"}) {
        svg::Series s{"L" + std::to_string(l) + "H" + std::to_string(h) + " target=" + target, {}};
        std::vector<double> x;
        for (const auto& r : curves->rows)
          if (std::stoul(r[li]) == l && std::stoul(r[hi]) == h && r[ti] == target) {
            x.push_back(to_d(r[ai]));
            s.values.push_back(to_d(r[pi]));
          }
        if (xs.empty()) xs = x;
        ss.push_back(std::move(s));
      }
    }
    put("curves.svg", svg::line_chart("Target accuracy vs. alpha (top head per type)", "alpha", xs, ss));
    summary << "[stage: classify] head types\n";
    if (type_of.empty()) {
      summary << "  classify: absent\n";
    } else {
      std::map<std::string, std::vector<std::string>> members;
      for (const auto& [id, type] : type_of)
        members[type].push_back("L" + std::to_string(id.first) + "H" + std::to_string(id.second));
      for (const auto& [type, ids] : members) {
        summary << "  " << type << " (" << ids.size() << "):";
        for (const auto& s : ids) summary << ' ' << s;
        summary << '\n';
      }
    }
  } else {
    files.absent.push_back("sweep");
    summary << "sweep: absent\n";
  }
  summary << '\n';

  // Transfer accuracy and gap shift.
  if (auto t = read_csv_if_exists(run_dir / "transfer.csv")) {
    put("transfer.csv", binio::read_file(run_dir / "transfer.csv"));
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : t->rows)
      rows.push_back({r[t->column("dataset")], r[t->column("target_modality")], r[t->column("original")],
                      r[t->column("intervened")], r[t->column("delta")]});
    put("transfer.svg", svg::signed_table("Transfer at fixed alpha",
                                                  {"dataset", "target", "original", "intervened", "delta"}, rows, {4}));
    summary << "[stage: transfer] accuracy (%) original -> intervened (delta)\n";
    for (const auto& r : rows) summary << "  " << r[0] << " / " << r[1] << ": " << r[2] << " -> " << r[3] << " (" << r[4] << ")\n";
    if (auto g = read_csv_if_exists(run_dir / "gap_shift.csv")) {
      put("gap_shift.csv", binio::read_file(run_dir / "gap_shift.csv"));
      std::vector<std::vector<std::string>> grows;
      for (const auto& r : g->rows)
        grows.push_back({r[g->column("dataset")], r[g->column("target_modality")], r[g->column("gap_before")],
                         r[g->column("gap_after")], r[g->column("delta")]});
      put("gap_shift.svg", svg::signed_table("V-gap under intervention",
                                                     {"dataset", "target", "before", "after", "delta"}, grows, {4}));
      summary << "[stage: transfer] last-layer V-gap before -> after (delta)\n";
      for (const auto& r : grows) summary << "  " << r[0] << " / " << r[1] << ": " << r[2] << " -> " << r[3] << " (" << r[4] << ")\n";
    }
  } else {
    files.absent.push_back("transfer");
    summary << "transfer: absent\n";
  }

  put("summary.txt", summary.str());
  return files;
}

}  // namespace conflictlens
