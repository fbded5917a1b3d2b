#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "bilevel.hpp"
#include "bohb.hpp"

namespace cellsearch {

struct Series {
  std::string label;
  std::string color = "#1f77b4";
  std::vector<std::pair<double, double>> points;
  bool line = false;  // polyline instead of markers
  bool step = false;  // horizontal then vertical segments
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;  // ignored unless every y is positive
  double width = 720.0;
  double height = 440.0;
  std::vector<Series> series;
};

/// Self-contained SVG document. `metadata` is embedded verbatim (escaped) in
/// a <metadata> element when non-empty.
void render_svg(const PlotSpec& plot, std::ostream& os, const std::string& metadata = {});

std::string xml_escape(std::string_view s);

/// Loss against finish time, one colour per budget, plus the incumbent at the
/// largest budget as a step line. Failed trials are left out.
PlotSpec trial_scatter_plot(const std::vector<TrialRecord>& trials);

/// One row per trial, in log order.
void write_trials_csv(const std::vector<TrialRecord>& trials, const HyperparamSpace& space, std::ostream& os);

/// wall_time,budget,best_loss for every incumbent step.
void write_incumbent_csv(const std::vector<Trajectory>& traj, std::ostream& os);

std::vector<HistoryRow> read_history_csv(std::istream& is);
PlotSpec learning_curve_plot(const std::vector<HistoryRow>& rows);

}  // namespace cellsearch
