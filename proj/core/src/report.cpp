#include <array>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "qfat/envlab.hpp"
#include "qfat/error.hpp"

namespace qfat {

nlohmann::json report_to_json(const RolloutReport& r) {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [count, n] : r.active_histogram) hist[std::to_string(count)] = n;
  nlohmann::json episodes = nlohmann::json::array();
  for (std::size_t e = 0; e < r.records.size(); ++e) {
    const auto& rec = r.records[e];
    nlohmann::json ep = {{"episode", e},
                         {"success", rec.success},
                         {"outcome", rec.outcome},
                         {"steps", rec.actions.rows()},
                         {"jitter", rec.jitter}};
    if (rec.conditioned_on) ep["conditioned_on"] = *rec.conditioned_on;
    episodes.push_back(std::move(ep));
  }
  nlohmann::json j = {{"env", to_string(r.env.kind)},
                      {"process_noise", r.env.process_noise},
                      {"sampler", r.sampler},
                      {"episodes", r.episodes},
                      {"seed", r.seed},
                      {"active_threshold", r.active_threshold},
                      {"success_rate", r.success_rate},
                      {"behavioral_entropy_bits", r.behavioral_entropy_bits},
                      {"mean_jitter", r.mean_jitter},
                      {"active_histogram", hist},
                      {"unimodal_fraction", r.unimodal_fraction},
                      {"outcomes", r.outcomes},
                      {"degraded_steps", r.degraded_steps},
                      {"laplace_fallbacks", r.laplace_fallbacks},
                      {"per_episode", episodes}};
  j["conditioned_match_rate"] = r.conditioned_match_rate ? nlohmann::json(*r.conditioned_match_rate) : nlohmann::json(nullptr);
  return j;
}

void write_report(const std::filesystem::path& path, const RolloutReport& report, const nlohmann::json& config) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), "report: cannot open " + path.string());
  nlohmann::json j = {{"config", config}, {"report", report_to_json(report)}};
  out << std::setw(2) << j << '\n';
}

void write_trajectories_csv(const std::filesystem::path& path, const RolloutReport& report,
                            const nlohmann::json& config) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), "trajectories: cannot open " + path.string());
  out << "# " << config.dump() << '\n' << "episode,step,x,y,ax,ay\n" << std::setprecision(9);
  for (std::size_t e = 0; e < report.records.size(); ++e) {
    const auto& rec = report.records[e];
    for (Eigen::Index t = 0; t < rec.positions.rows(); ++t) {
      out << e << ',' << t << ',' << rec.positions(t, 0) << ',' << rec.positions(t, 1) << ',';
      if (t < rec.actions.rows()) {
        out << rec.actions(t, 0) << ',' << rec.actions(t, 1);
      } else {
        out << ',';
      }
      out << '\n';
    }
  }
}

namespace {

constexpr std::array<const char*, 8> kPalette = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                                 "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

struct Frame {
  double x0, x1, y0, y1;
  double size = 480.0;
  double px(double x) const { return (x - x0) / (x1 - x0) * size; }
  double py(double y) const { return (1.0 - (y - y0) / (y1 - y0)) * size; }
  double scale() const { return size / (x1 - x0); }
};

void open_svg(std::ostringstream& s, const Frame& f, const std::string& title) {
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.size << "\" height=\"" << f.size + 24
    << "\" viewBox=\"0 -24 " << f.size << ' ' << f.size + 24 << "\">\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << f.size << "\" height=\"" << f.size << "\" fill=\"white\" stroke=\"#888\"/>\n";
  s << "<text x=\"4\" y=\"-8\" font-family=\"sans-serif\" font-size=\"13\">" << title << "</text>\n";
}

}  // namespace

std::string trajectories_svg(const RolloutReport& report) {
  const bool multiroute = report.env.kind == EnvKind::kMultiroute;
  const Frame f = multiroute ? Frame{-0.3, 1.3, -0.3, 1.3} : Frame{-1.4, 1.4, -0.4, 1.6};
  std::ostringstream s;
  std::ostringstream title;
  title << to_string(report.env.kind) << ' ' << report.sampler.value("kind", "") << ", success "
        << std::setprecision(3) << report.success_rate;
  open_svg(s, f, title.str());

  auto disc = [&](const Eigen::Vector2d& c, double r) {
    s << "<circle cx=\"" << f.px(c.x()) << "\" cy=\"" << f.py(c.y()) << "\" r=\"" << r * f.scale()
      << "\" fill=\"#ddd\" stroke=\"#555\"/>\n";
  };
  if (multiroute) {
    disc(MultirouteEnv::target(), MultirouteEnv::kTargetRadius);
  } else {
    disc(SequencingEnv::goal('A'), SequencingEnv::kGoalRadius);
    disc(SequencingEnv::goal('B'), SequencingEnv::kGoalRadius);
  }

  std::map<std::string, std::size_t> colour;
  for (const auto& [name, _] : report.outcomes) {
    if (name != "incomplete") colour.emplace(name, colour.size() % kPalette.size());
  }
  for (const auto& rec : report.records) {
    const auto it = colour.find(rec.outcome);
    const char* stroke = it == colour.end() ? "#999" : kPalette[it->second];
    s << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-opacity=\"0.35\" stroke-width=\"1\" points=\"";
    for (Eigen::Index t = 0; t < rec.positions.rows(); ++t) {
      s << f.px(rec.positions(t, 0)) << ',' << f.py(rec.positions(t, 1)) << ' ';
    }
    s << "\"/>\n";
  }
  double y = 16.0;
  for (const auto& [name, idx] : colour) {
    s << "<text x=\"8\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << kPalette[idx]
      << "\">" << name << " (" << report.outcomes.at(name) << ")</text>\n";
    y += 14.0;
  }
  s << "</svg>\n";
  return s.str();
}

std::string scatter_svg(const std::vector<std::pair<std::string, Eigen::MatrixXd>>& series, const std::string& title) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& [_, pts] : series) {
    require(pts.cols() >= 2 || pts.rows() == 0, "scatter: points must have at least two columns");
    if (pts.rows() == 0) continue;
    lo = std::min({lo, pts.col(0).minCoeff(), pts.col(1).minCoeff()});
    hi = std::max({hi, pts.col(0).maxCoeff(), pts.col(1).maxCoeff()});
  }
  if (!(hi > lo)) {
    lo = -1.0;
    hi = 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  const Frame f{lo - pad, hi + pad, lo - pad, hi + pad};
  std::ostringstream s;
  open_svg(s, f, title);
  double y = 16.0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& [name, pts] = series[i];
    const char* fill = kPalette[i % kPalette.size()];
    for (Eigen::Index r = 0; r < pts.rows(); ++r) {
      s << "<circle cx=\"" << f.px(pts(r, 0)) << "\" cy=\"" << f.py(pts(r, 1)) << "\" r=\"1.5\" fill=\"" << fill
        << "\" fill-opacity=\"0.5\"/>\n";
    }
    s << "<text x=\"8\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << fill << "\">" << name
      << "</text>\n";
    y += 14.0;
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace qfat
