#include "report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

namespace cellsearch {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// Round steps of 1, 2 or 5 times a power of ten.
std::vector<double> linear_ticks(double lo, double hi, int target = 6) {
  const double span = hi - lo;
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  std::vector<double> out;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * span; t += step) out.push_back(std::abs(t) < 1e-12 * span ? 0.0 : t);
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void pad() {
    if (!(lo <= hi)) {
      lo = 0.0;
      hi = 1.0;
    }
    if (hi - lo < 1e-12 * std::max(1.0, std::abs(hi))) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

}  // namespace

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

void render_svg(const PlotSpec& plot, std::ostream& os, const std::string& metadata) {
  const double left = 70.0;
  const double right = 160.0;
  const double top = 40.0;
  const double bottom = 50.0;
  const double pw = plot.width - left - right;
  const double ph = plot.height - top - bottom;

  Range xr;
  Range yr;
  bool positive = true;
  for (const Series& s : plot.series) {
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      xr.add(x);
      yr.add(y);
      positive = positive && y > 0.0;
    }
  }
  const bool log_y = plot.log_y && positive && yr.lo <= yr.hi;
  auto ty = [&](double y) { return log_y ? std::log10(y) : y; };
  Range ys;
  if (yr.lo <= yr.hi) {
    ys.add(ty(yr.lo));
    ys.add(ty(yr.hi));
  }
  xr.pad();
  ys.pad();
  auto px = [&](double x) { return left + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto py = [&](double y) { return top + ph - (ty(y) - ys.lo) / (ys.hi - ys.lo) * ph; };

  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(plot.width) << "\" height=\"" << num(plot.height)
     << "\" viewBox=\"0 0 " << num(plot.width) << " " << num(plot.height) << "\">\n";
  if (!metadata.empty()) os << "<metadata>" << xml_escape(metadata) << "</metadata>\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << num(plot.width) << "\" height=\"" << num(plot.height)
     << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"15\">" << xml_escape(plot.title) << "</text>\n";
  os << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(pw) << "\" height=\"" << num(ph)
     << "\" fill=\"none\" stroke=\"black\"/>\n";

  os << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (double t : linear_ticks(xr.lo, xr.hi)) {
    const double x = px(t);
    os << "<line x1=\"" << num(x) << "\" y1=\"" << num(top + ph) << "\" x2=\"" << num(x) << "\" y2=\""
       << num(top + ph + 5) << "\" stroke=\"black\"/>";
    os << "<text x=\"" << num(x) << "\" y=\"" << num(top + ph + 18) << "\" text-anchor=\"middle\">"
       << tick_label(t) << "</text>\n";
  }
  for (double t : linear_ticks(ys.lo, ys.hi)) {
    const double y = top + ph - (t - ys.lo) / (ys.hi - ys.lo) * ph;
    const double label = log_y ? std::pow(10.0, t) : t;
    os << "<line x1=\"" << num(left - 5) << "\" y1=\"" << num(y) << "\" x2=\"" << num(left) << "\" y2=\"" << num(y)
       << "\" stroke=\"black\"/>";
    os << "<text x=\"" << num(left - 8) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << tick_label(label)
       << "</text>\n";
  }
  os << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(plot.height - 12) << "\" text-anchor=\"middle\">"
     << xml_escape(plot.x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << num(top + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << xml_escape(plot.y_label) << (log_y ? " (log)" : "") << "</text>\n";
  os << "</g>\n";

  for (size_t i = 0; i < plot.series.size(); ++i) {
    const Series& s = plot.series[i];
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : s.points) {
      if (std::isfinite(p.first) && std::isfinite(p.second) && (!log_y || p.second > 0.0)) pts.push_back(p);
    }
    os << "<g fill=\"" << s.color << "\" stroke=\"" << s.color << "\">\n";
    if (s.line && !pts.empty()) {
      os << "<polyline fill=\"none\" stroke-width=\"2\" points=\"";
      for (size_t k = 0; k < pts.size(); ++k) {
        if (s.step && k > 0) os << num(px(pts[k].first)) << "," << num(py(pts[k - 1].second)) << " ";
        os << num(px(pts[k].first)) << "," << num(py(pts[k].second)) << " ";
      }
      os << "\"/>\n";
    } else {
      for (const auto& [x, y] : pts) {
        os << "<circle cx=\"" << num(px(x)) << "\" cy=\"" << num(py(y)) << "\" r=\"2.5\" fill-opacity=\"0.6\"/>\n";
      }
    }
    const double ly = top + 14.0 + 18.0 * static_cast<double>(i);
    os << "<rect x=\"" << num(left + pw + 12) << "\" y=\"" << num(ly - 9) << "\" width=\"10\" height=\"10\"/>";
    os << "<text x=\"" << num(left + pw + 28) << "\" y=\"" << num(ly) << "\" stroke=\"none\" fill=\"black\" "
       << "font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(s.label) << "</text>\n";
    os << "</g>\n";
  }
  os << "</svg>\n";
}

PlotSpec trial_scatter_plot(const std::vector<TrialRecord>& trials) {
  PlotSpec p;
  p.title = "Trials and incumbent";
  p.x_label = "finish time";
  p.y_label = "loss";
  p.log_y = true;
  std::map<double, Series> by_budget;
  for (const TrialRecord& t : trials) {
    if (t.status != TrialStatus::kFinished) continue;
    Series& s = by_budget[t.budget];
    s.points.emplace_back(t.wall_time, t.loss);
  }
  size_t i = 0;
  for (auto& [b, s] : by_budget) {
    s.label = "budget " + tick_label(b);
    s.color = kPalette[i++ % std::size(kPalette)];
    p.series.push_back(std::move(s));
  }
  const std::vector<Trajectory> traj = incumbent_trajectory(trials);
  if (!traj.empty()) {
    Series inc;
    inc.label = "incumbent";
    inc.color = "black";
    inc.line = true;
    inc.step = true;
    inc.points = traj.back().points;
    p.series.push_back(std::move(inc));
  }
  return p;
}

void write_trials_csv(const std::vector<TrialRecord>& trials, const HyperparamSpace& space, std::ostream& os) {
  os << "config_id,bracket,round,budget,loss,wall_time,status,model_based,seed";
  for (const Dim& d : space.dims()) os << "," << d.name;
  os << "\n";
  char buf[256];
  for (const TrialRecord& t : trials) {
    std::snprintf(buf, sizeof buf, "%ld,%d,%d,%.17g,%.17g,%.17g,%s,%d,%llu", t.config_id, t.bracket, t.round, t.budget,
                  t.loss, t.wall_time, t.status == TrialStatus::kFinished ? "finished" : "failed",
                  t.model_based ? 1 : 0, static_cast<unsigned long long>(t.seed));
    os << buf;
    for (size_t k = 0; k < t.config.size(); ++k) {
      if (space.dims()[k].categorical()) {
        os << "," << space.dims()[k].categories.at(static_cast<size_t>(t.config[k]));
      } else {
        std::snprintf(buf, sizeof buf, ",%.17g", t.config[k]);
        os << buf;
      }
    }
    os << "\n";
  }
}

void write_incumbent_csv(const std::vector<Trajectory>& traj, std::ostream& os) {
  os << "wall_time,budget,best_loss\n";
  char buf[128];
  for (const Trajectory& t : traj) {
    for (const auto& [time, loss] : t.points) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", time, t.budget, loss);
      os << buf;
    }
  }
}

std::vector<HistoryRow> read_history_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "iter,phase,train_epe,val_epe,lr,tau") {
    throw ParseError("history csv: unexpected header");
  }
  std::vector<HistoryRow> rows;
  size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw ParseError("history csv line " + std::to_string(lineno) + ": expected 6 fields");
    try {
      HistoryRow r;
      r.iteration = std::stol(f[0]);
      if (f[1] == "warm_start") {
        r.phase = Phase::kWarmStart;
      } else if (f[1] == "alternating") {
        r.phase = Phase::kAlternating;
      } else {
        throw ParseError("unknown phase '" + f[1] + "'");
      }
      r.train_epe = std::stod(f[2]);
      if (!f[3].empty()) r.val_epe = std::stod(f[3]);
      r.lr = std::stod(f[4]);
      r.tau = std::stod(f[5]);
      rows.push_back(r);
    } catch (const std::logic_error& e) {
      throw ParseError("history csv line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

PlotSpec learning_curve_plot(const std::vector<HistoryRow>& rows) {
  PlotSpec p;
  p.title = "Search learning curves";
  p.x_label = "iteration";
  p.y_label = "batch EPE";
  p.log_y = true;
  Series train{"train batch", kPalette[0], {}, true, false};
  Series val{"val batch", kPalette[1], {}, true, false};
  for (const HistoryRow& r : rows) {
    train.points.emplace_back(static_cast<double>(r.iteration), r.train_epe);
    if (r.val_epe) val.points.emplace_back(static_cast<double>(r.iteration), *r.val_epe);
  }
  p.series.push_back(std::move(train));
  if (!val.points.empty()) p.series.push_back(std::move(val));
  return p;
}

}  // namespace cellsearch
