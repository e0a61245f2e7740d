#pragma once

// Post-hoc analyses over persisted results: head-set overlap, shared-head
// activation similarity per layer, CIE tables, accuracy summaries, and the
// deterministic CSV/SVG/HTML artifacts built from them.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fvlab/error.hpp"
#include "fvlab/evaluator.hpp"
#include "fvlab/fv.hpp"
#include "fvlab/store.hpp"

namespace fvlab {

struct OverlapReport {
  std::string model_id;
  HeadSet demo_only;
  HeadSet instruction_only;
  HeadSet shared;
  std::map<std::string, double> mean_layer;  // "demo_only", "instruction_only", "shared"; absent when empty
};

inline double mean_layer_of(const HeadSet& s) {
  double total = 0;
  for (const auto& h : s.heads) total += h.layer;
  return total / static_cast<double>(s.heads.size());
}

inline OverlapReport head_overlap(const HeadSet& demo_heads, const HeadSet& instr_heads, std::string model_id = {}) {
  if (demo_heads.size() != instr_heads.size())
    throw PreconditionError("head sets differ in size: " + std::to_string(demo_heads.size()) + " vs " +
                            std::to_string(instr_heads.size()));
  OverlapReport r;
  r.model_id = std::move(model_id);
  r.demo_only.provenance = HeadSetProvenance::demo;
  r.instruction_only.provenance = HeadSetProvenance::instruction;
  r.shared.provenance = HeadSetProvenance::shared_analysis;
  for (const auto& h : demo_heads.heads) (instr_heads.contains(h) ? r.shared : r.demo_only).heads.push_back(h);
  for (const auto& h : instr_heads.heads)
    if (!demo_heads.contains(h)) r.instruction_only.heads.push_back(h);
  for (auto& s : {&r.demo_only, &r.instruction_only, &r.shared}) std::sort(s->heads.begin(), s->heads.end());
  if (!r.demo_only.heads.empty()) r.mean_layer["demo_only"] = mean_layer_of(r.demo_only);
  if (!r.instruction_only.heads.empty()) r.mean_layer["instruction_only"] = mean_layer_of(r.instruction_only);
  if (!r.shared.heads.empty()) r.mean_layer["shared"] = mean_layer_of(r.shared);
  return r;
}

enum class Pairing { demo_vs_short, demo_vs_long, short_vs_long };

inline const char* to_string(Pairing p) {
  switch (p) {
    case Pairing::demo_vs_short: return "demo_vs_short";
    case Pairing::demo_vs_long: return "demo_vs_long";
    case Pairing::short_vs_long: return "short_vs_long";
  }
  return "?";
}

struct SimilarityCurve {
  std::string model_id;
  Pairing pairing = Pairing::demo_vs_short;
  std::vector<std::pair<int, double>> points;  // (layer, mean cosine over shared heads at that layer)
};

// Cosine on raw means; 0 when either vector is zero.
inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// Per-layer mean cosine between mean activations of the shared heads. Heads
// at a layer are weighted equally.
inline std::vector<SimilarityCurve> shared_head_similarity(const ActivationSummary& demo,
                                                           const ActivationSummary& instr_short,
                                                           const ActivationSummary& instr_long, const HeadSet& shared) {
  if (demo.model_id != instr_short.model_id || demo.model_id != instr_long.model_id)
    throw CompatibilityError("similarity needs summaries from a single model");
  auto mean_of = [](const ActivationSummary& s, const HeadId& h) -> const Vector& {
    auto it = s.means.find(h);
    if (it == s.means.end())
      throw CompletenessError("summary for " + std::string(to_string(s.form)) + " lacks " + h.str());
    return it->second;
  };
  const std::pair<const ActivationSummary*, const ActivationSummary*> pairs[] = {
      {&demo, &instr_short}, {&demo, &instr_long}, {&instr_short, &instr_long}};
  const Pairing names[] = {Pairing::demo_vs_short, Pairing::demo_vs_long, Pairing::short_vs_long};
  std::vector<SimilarityCurve> out;
  for (int i = 0; i < 3; ++i) {
    std::map<int, std::pair<double, int>> by_layer;
    for (const auto& h : shared.heads) {
      auto& [sum, n] = by_layer[h.layer];
      sum += cosine(mean_of(*pairs[i].first, h), mean_of(*pairs[i].second, h));
      ++n;
    }
    SimilarityCurve c;
    c.model_id = demo.model_id;
    c.pairing = names[i];
    for (const auto& [layer, acc] : by_layer) c.points.emplace_back(layer, acc.first / acc.second);
    out.push_back(std::move(c));
  }
  return out;
}

// Everything the artifact emitter reads. One entry per model in `heads`.
struct ModelHeads {
  std::string model_id;
  std::map<HeadId, double> demo_aggregate;
  std::map<HeadId, double> instruction_aggregate;
  HeadSet demo_heads;
  HeadSet instruction_heads;
};

struct AnalysisInputs {
  std::vector<EvalReport> reports;
  std::vector<ModelHeads> heads;
  std::vector<SimilarityCurve> similarities;
};

namespace detail {

inline std::string fmt(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) line += (i ? "," : "") + csv_field(fields[i]);
  return line + "\n";
}

inline std::string xml_escape(const std::string& s) {
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

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"};
  return colors[i % 8];
}

// Minimal fixed-layout SVG builder.
class Svg {
 public:
  Svg(int width, int height, const std::string& title) : w_(width), h_(height) {
    body_ << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
          << "</text>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    body_ << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(w) << "\" height=\"" << fmt(h)
          << "\" fill=\"" << fill << "\"/>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, bool dotted = false) {
    body_ << "<line x1=\"" << fmt(x1) << "\" y1=\"" << fmt(y1) << "\" x2=\"" << fmt(x2) << "\" y2=\"" << fmt(y2)
          << "\" stroke=\"" << stroke << "\"" << (dotted ? " stroke-dasharray=\"3,3\"" : "") << "/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) body_ << (i ? " " : "") << fmt(pts[i].first) << "," << fmt(pts[i].second);
    body_ << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 10, const char* anchor = "start") {
    body_ << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" font-size=\"" << size << "\" text-anchor=\""
          << anchor << "\">" << xml_escape(s) << "</text>\n";
  }
  std::string str() const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
        << "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << body_.str() << "</svg>\n";
    return out.str();
  }

 private:
  int w_, h_;
  std::ostringstream body_;
};

// Grouped bars: one group per (model, regime), one bar per setting label.
// The "baseline" label is drawn as a dotted line instead of a bar.
inline std::string accuracy_plot(const std::vector<AccuracySummary>& rows) {
  std::set<std::string> label_set;
  std::map<std::pair<std::string, std::string>, std::map<std::string, const AccuracySummary*>> groups;
  for (const auto& r : rows) {
    groups[{r.model_id, to_string(r.regime)}][r.label] = &r;
    if (r.label != "baseline") label_set.insert(r.label);
  }
  std::vector<std::string> labels(label_set.begin(), label_set.end());
  const double group_w = 40.0 + 24.0 * static_cast<double>(std::max<std::size_t>(1, labels.size()));
  const int width = static_cast<int>(80 + group_w * static_cast<double>(std::max<std::size_t>(1, groups.size())) + 160);
  const double top = 40, plot_h = 240, bottom = top + plot_h;
  Svg svg(width, 340, "Accuracy by model and regime");
  svg.line(60, top, 60, bottom, "black");
  svg.line(60, bottom, width - 160, bottom, "black");
  for (int t = 0; t <= 4; ++t) {
    const double y = bottom - plot_h * t / 4.0;
    svg.text(55, y + 3, fmt(t / 4.0).substr(0, 4), 9, "end");
  }
  if (groups.empty()) svg.text(width / 2.0, top + plot_h / 2, "no accuracy reports", 12, "middle");
  double x = 70;
  for (const auto& [key, by_label] : groups) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto it = by_label.find(labels[i]);
      const double bx = x + 24.0 * static_cast<double>(i);
      if (it == by_label.end()) {
        svg.text(bx + 10, bottom - 4, "n/a", 8, "middle");
        continue;
      }
      const double hgt = plot_h * it->second->mean;
      svg.rect(bx, bottom - hgt, 20, hgt, palette(i));
      const double e = plot_h * it->second->sem;
      svg.line(bx + 10, bottom - hgt - e, bx + 10, bottom - hgt + e, "black");
    }
    if (auto b = by_label.find("baseline"); b != by_label.end()) {
      const double y = bottom - plot_h * b->second->mean;
      svg.line(x - 4, y, x + 24.0 * static_cast<double>(labels.size()), y, "black", true);
    }
    svg.text(x, bottom + 14, key.first, 9);
    svg.text(x, bottom + 26, key.second, 9);
    x += group_w;
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    svg.rect(width - 150, top + 16.0 * static_cast<double>(i), 10, 10, palette(i));
    svg.text(width - 135, top + 9 + 16.0 * static_cast<double>(i), labels[i]);
  }
  svg.line(width - 150, top + 16.0 * static_cast<double>(labels.size()) + 5, width - 140,
           top + 16.0 * static_cast<double>(labels.size()) + 5, "black", true);
  svg.text(width - 135, top + 9 + 16.0 * static_cast<double>(labels.size()), "baseline");
  return svg.str();
}

// Heads by layer per model, coloured by overlap partition. The legend always
// lists all three partitions, even when one is empty.
inline std::string overlap_plot(const std::vector<OverlapReport>& overlaps, const std::map<std::string, int>& n_layers) {
  const char* names[] = {"demo_only", "instruction_only", "shared"};
  const int width = 140 + 160 * static_cast<int>(std::max<std::size_t>(1, overlaps.size())) + 160;
  Svg svg(width, 340, "Top heads by layer and partition");
  const double top = 40, plot_h = 240, bottom = top + plot_h;
  if (overlaps.empty()) svg.text(width / 2.0, top + plot_h / 2, "no head sets", 12, "middle");
  double x = 80;
  for (const auto& o : overlaps) {
    const int L = std::max(1, n_layers.count(o.model_id) ? n_layers.at(o.model_id) : 1);
    svg.line(x, top, x, bottom, "black");
    const HeadSet* parts[] = {&o.demo_only, &o.instruction_only, &o.shared};
    for (int p = 0; p < 3; ++p) {
      std::map<int, int> stack;
      for (const auto& h : parts[p]->heads) {
        const double y = bottom - plot_h * (h.layer + 0.5) / L;
        const double cx = x + 10 + 40.0 * p + 6.0 * stack[h.layer]++;
        svg.rect(cx, y - 3, 5, 5, palette(static_cast<std::size_t>(p)));
      }
    }
    svg.text(x, bottom + 14, o.model_id, 9);
    svg.text(x, bottom + 26, "shared " + std::to_string(o.shared.size()), 9);
    x += 160;
  }
  for (int p = 0; p < 3; ++p) {
    svg.rect(width - 150, top + 16.0 * p, 10, 10, palette(static_cast<std::size_t>(p)));
    svg.text(width - 135, top + 9 + 16.0 * p, names[p]);
  }
  return svg.str();
}

// Line chart of y over integer x, one series per entry.
inline std::string line_plot(const std::string& title, const std::vector<std::pair<std::string, std::vector<std::pair<int, double>>>>& series,
                             double y_min, double y_max) {
  const int width = 560;
  Svg svg(width, 340, title);
  const double left = 60, right = width - 180.0, top = 40, bottom = 280;
  svg.line(left, top, left, bottom, "black");
  svg.line(left, bottom, right, bottom, "black");
  int x_min = 0, x_max = 1;
  bool any = false;
  for (const auto& [name, pts] : series)
    for (const auto& [x, y] : pts) {
      x_min = any ? std::min(x_min, x) : x;
      x_max = any ? std::max(x_max, x) : x;
      any = true;
    }
  if (x_max == x_min) x_max = x_min + 1;
  auto px = [&](int x) { return left + (right - left) * (x - x_min) / static_cast<double>(x_max - x_min); };
  auto py = [&](double y) { return bottom - (bottom - top) * (y - y_min) / (y_max - y_min); };
  svg.text(left - 5, top + 3, fmt(y_max).substr(0, 5), 9, "end");
  svg.text(left - 5, bottom + 3, fmt(y_min).substr(0, 5), 9, "end");
  for (int x = x_min; x <= x_max; ++x) svg.text(px(x), bottom + 14, std::to_string(x), 9, "middle");
  if (!any) svg.text((left + right) / 2, (top + bottom) / 2, "no data", 12, "middle");
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& [x, y] : series[i].second) pts.emplace_back(px(x), py(y));
    if (pts.size() == 1) svg.rect(pts[0].first - 2, pts[0].second - 2, 4, 4, palette(i));
    if (!pts.empty()) svg.polyline(pts, palette(i));
    svg.rect(right + 20, top + 16.0 * static_cast<double>(i), 10, 10, palette(i));
    svg.text(right + 35, top + 9 + 16.0 * static_cast<double>(i), series[i].first + (pts.empty() ? " (missing)" : ""));
  }
  return svg.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << content;
}

inline double mean_over(const std::map<HeadId, double>& scores, const HeadSet& heads) {
  if (heads.heads.empty()) return std::nan("");
  double total = 0;
  for (const auto& h : heads.heads) {
    auto it = scores.find(h);
    if (it == scores.end()) return std::nan("");
    total += it->second;
  }
  return total / static_cast<double>(heads.size());
}

}  // namespace detail

// Writes every table and figure into `out_dir` and returns the file names in
// the order written. Output depends only on `inputs`.
inline std::vector<std::string> emit_tables_and_plots(const AnalysisInputs& inputs, const std::filesystem::path& out_dir,
                                                      const std::map<std::string, int>& n_layers = {}) {
  using detail::csv_row;
  using detail::fmt;
  if (inputs.reports.empty() && inputs.heads.empty() && inputs.similarities.empty())
    throw PreconditionError("nothing to analyze: all stores are empty");
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> files;
  auto emit = [&](const std::string& name, const std::string& content) {
    detail::write_file(out_dir / name, content);
    files.push_back(name);
  };

  std::vector<EvalReport> reports = inputs.reports;
  std::sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
    return std::tie(a.model_id, a.task_id, a.label, a.regime, a.layers) <
           std::tie(b.model_id, b.task_id, b.label, b.regime, b.layers);
  });

  std::string acc = csv_row({"model_id", "fv_model_id", "task_id", "label", "regime", "layers", "accuracy", "sem",
                             "n_queries"});
  for (const auto& r : reports) {
    std::string layers;
    for (std::size_t i = 0; i < r.layers.size(); ++i) layers += (i ? ";" : "") + std::to_string(r.layers[i]);
    acc += csv_row({r.model_id, r.fv_model_id, r.task_id, r.label, to_string(r.regime), layers, fmt(r.accuracy),
                    fmt(r.sem), std::to_string(r.n_queries)});
  }
  emit("accuracy.csv", acc);

  const auto summaries = summarize_across_tasks(reports);
  std::string summ = csv_row({"model_id", "label", "regime", "mean_accuracy", "sem_across_tasks", "n_tasks"});
  for (const auto& s : summaries)
    summ += csv_row({s.model_id, s.label, to_string(s.regime), fmt(s.mean), fmt(s.sem), std::to_string(s.n_tasks)});
  emit("accuracy_summary.csv", summ);

  std::vector<ModelHeads> heads = inputs.heads;
  // Models that were evaluated but have no head record still get a row.
  for (const auto& r : reports) {
    if (r.label.starts_with("steer_")) continue;
    if (std::none_of(heads.begin(), heads.end(), [&](const ModelHeads& m) { return m.model_id == r.model_id; }))
      heads.push_back(ModelHeads{.model_id = r.model_id});
  }
  std::sort(heads.begin(), heads.end(), [](const ModelHeads& a, const ModelHeads& b) { return a.model_id < b.model_id; });

  std::vector<OverlapReport> overlaps;
  std::string ov = csv_row({"model_id", "partition", "head", "layer"});
  std::string ov_summary = csv_row({"model_id", "partition", "count", "mean_layer"});
  for (const auto& m : heads) {
    if (m.demo_heads.heads.empty() || m.instruction_heads.heads.empty()) {
      ov_summary += csv_row({m.model_id, "missing", "", ""});
      continue;
    }
    auto o = head_overlap(m.demo_heads, m.instruction_heads, m.model_id);
    const std::pair<const char*, const HeadSet*> parts[] = {
        {"demo_only", &o.demo_only}, {"instruction_only", &o.instruction_only}, {"shared", &o.shared}};
    for (const auto& [name, set] : parts) {
      for (const auto& h : set->heads) ov += csv_row({m.model_id, name, h.str(), std::to_string(h.layer)});
      auto it = o.mean_layer.find(name);
      ov_summary += csv_row({m.model_id, name, std::to_string(set->size()), it == o.mean_layer.end() ? "" : fmt(it->second)});
    }
    overlaps.push_back(std::move(o));
  }
  emit("head_overlap.csv", ov);
  emit("head_overlap_summary.csv", ov_summary);

  std::vector<SimilarityCurve> sims = inputs.similarities;
  std::sort(sims.begin(), sims.end(), [](const SimilarityCurve& a, const SimilarityCurve& b) {
    return std::tie(a.model_id, a.pairing) < std::tie(b.model_id, b.pairing);
  });
  std::string sim = csv_row({"model_id", "pairing", "layer", "mean_cosine", "weighting"});
  for (const auto& c : sims)
    for (const auto& [layer, v] : c.points)
      sim += csv_row({c.model_id, to_string(c.pairing), std::to_string(layer), fmt(v), "equal_per_head"});
  emit("similarity.csv", sim);

  // Two readings of the overall CIE table: the mean aggregate score of the
  // family's top heads, and the per-head scores behind that mean.
  std::string overall = csv_row({"model_id", "family", "reading", "head", "rank", "cie"});
  std::string localizer = csv_row({"model_id", "localizer", "scored_with", "reading", "head", "cie"});
  for (const auto& m : heads) {
    const std::pair<const char*, std::pair<const std::map<HeadId, double>*, const HeadSet*>> fams[] = {
        {"demo", {&m.demo_aggregate, &m.demo_heads}}, {"instruction", {&m.instruction_aggregate, &m.instruction_heads}}};
    for (const auto& [fam, data] : fams) {
      const auto& [agg, set] = data;
      if (set->heads.empty() || agg->empty()) {
        overall += csv_row({m.model_id, fam, "missing", "", "", ""});
        continue;
      }
      overall += csv_row({m.model_id, fam, "top_head_mean", "", "", fmt(detail::mean_over(*agg, *set))});
      for (std::size_t i = 0; i < set->heads.size(); ++i) {
        auto it = agg->find(set->heads[i]);
        overall += csv_row({m.model_id, fam, "per_head", set->heads[i].str(), std::to_string(i + 1),
                            it == agg->end() ? "" : fmt(it->second)});
      }
    }
    for (const auto& [loc, ldata] : fams)
      for (const auto& [scored, sdata] : fams) {
        if (loc == scored) continue;
        const HeadSet& set = *ldata.second;
        const auto& agg = *sdata.first;
        if (set.heads.empty() || agg.empty()) {
          localizer += csv_row({m.model_id, loc, scored, "missing", "", ""});
          continue;
        }
        localizer += csv_row({m.model_id, loc, scored, "top_head_mean", "", fmt(detail::mean_over(agg, set))});
        for (const auto& h : set.heads) {
          auto it = agg.find(h);
          localizer += csv_row({m.model_id, loc, scored, "per_head", h.str(), it == agg.end() ? "" : fmt(it->second)});
        }
      }
  }
  emit("cie_overall.csv", overall);
  emit("cie_localizer.csv", localizer);

  std::string sweep = csv_row({"model_id", "task_id", "label", "regime", "layer", "accuracy"});
  std::vector<std::pair<std::string, std::vector<std::pair<int, double>>>> sweep_series;
  for (const auto& r : reports) {
    if (!r.per_layer_curve) continue;
    std::vector<std::pair<int, double>> pts;
    for (const auto& [layer, a] : *r.per_layer_curve) {
      sweep += csv_row({r.model_id, r.task_id, r.label, to_string(r.regime), std::to_string(layer), fmt(a)});
      pts.emplace_back(layer, a);
    }
    sweep_series.emplace_back(r.model_id + " " + r.task_id + " " + r.label + " " + to_string(r.regime), std::move(pts));
  }
  emit("layer_sweep.csv", sweep);

  emit("accuracy.svg", detail::accuracy_plot(summaries));
  emit("head_overlap.svg", detail::overlap_plot(overlaps, n_layers));
  std::vector<std::pair<std::string, std::vector<std::pair<int, double>>>> sim_series;
  for (const auto& c : sims) sim_series.emplace_back(c.model_id + " " + to_string(c.pairing), c.points);
  emit("similarity.svg", detail::line_plot("Shared-head cosine similarity by layer", sim_series, -1.0, 1.0));
  emit("layer_sweep.svg", detail::line_plot("Accuracy by intervention layer", sweep_series, 0.0, 1.0));

  std::string html = "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>fvlab report</title></head><body>\n"
                     "<h1>fvlab report</h1>\n";
  html += "<h2>Figures</h2>\n";
  for (const auto& f : files)
    if (f.ends_with(".svg")) html += "<p><img src=\"" + f + "\" alt=\"" + f + "\"></p>\n";
  html += "<h2>Tables</h2>\n<ul>\n";
  for (const auto& f : files)
    if (f.ends_with(".csv")) html += "<li><a href=\"" + f + "\">" + f + "</a></li>\n";
  html += "</ul>\n</body></html>\n";
  emit("index.html", html);
  return files;
}

// ---------------------------------------------------------------------------
// Loading from result stores. Each model directory may hold eval.jsonl,
// heads.jsonl and activations.jsonl as written by the workbench.

// Per-form activation means pooled over eligible tasks (tasks weighted equally).
inline std::map<ActivationForm, ActivationSummary> pooled_activation_means(const ReportStore& acts) {
  std::map<ActivationForm, ActivationSummary> pooled;
  std::map<ActivationForm, int> counts;
  for (const auto& r : acts.records()) {
    auto s = activation_summary_from_json(r.payload);
    if (!s.eligible || s.means.empty()) continue;
    auto [it, inserted] = pooled.try_emplace(s.form, s);
    if (!inserted)
      for (auto& [h, v] : it->second.means) v += s.means.at(h);
    ++counts[s.form];
  }
  for (auto& [form, s] : pooled) {
    for (auto& [h, v] : s.means) v /= static_cast<double>(counts[form]);
    s.task_id = "pooled";
  }
  return pooled;
}

struct LoadedAnalysis {
  AnalysisInputs inputs;
  std::map<std::string, int> n_layers;
};

inline LoadedAnalysis load_analysis_inputs(const std::vector<std::filesystem::path>& model_dirs,
                                           const std::filesystem::path& steer_store, const std::string& config_hash,
                                           bool force) {
  LoadedAnalysis out;
  auto open = [&](const std::filesystem::path& p) {
    ReportStore s(p);
    if (!config_hash.empty()) s.check_config_hash(config_hash, force);
    return s;
  };
  for (const auto& dir : model_dirs) {
    for (const auto& r : open(dir / "eval.jsonl").records()) out.inputs.reports.push_back(eval_report_from_json(r.payload));
    auto rec = open(dir / "heads.jsonl").get("heads");
    if (!rec) continue;
    ModelHeads mh;
    mh.model_id = rec->at("model_id").get<std::string>();
    out.n_layers[mh.model_id] = rec->at("n_layers").get<int>();
    auto read = [&](const char* fam, std::map<HeadId, double>& agg, HeadSet& top) {
      if (!rec->contains(fam)) return;
      for (const auto& [k, v] : (*rec)[fam]["aggregate"].items()) agg[HeadId::parse(k)] = v.get<double>();
      top = head_set_from_json((*rec)[fam]["top"]);
    };
    read("demo", mh.demo_aggregate, mh.demo_heads);
    read("instruction", mh.instruction_aggregate, mh.instruction_heads);
    if (!mh.demo_heads.heads.empty() && mh.demo_heads.size() == mh.instruction_heads.size()) {
      auto overlap = head_overlap(mh.demo_heads, mh.instruction_heads, mh.model_id);
      auto pooled = pooled_activation_means(open(dir / "activations.jsonl"));
      if (pooled.size() == 3 && !overlap.shared.heads.empty()) {
        auto sims = shared_head_similarity(pooled.at(ActivationForm::demo), pooled.at(ActivationForm::instruction_short),
                                           pooled.at(ActivationForm::instruction_long), overlap.shared);
        out.inputs.similarities.insert(out.inputs.similarities.end(), sims.begin(), sims.end());
      }
    }
    out.inputs.heads.push_back(std::move(mh));
  }
  if (!steer_store.empty() && std::filesystem::exists(steer_store))
    for (const auto& r : open(steer_store).records()) out.inputs.reports.push_back(eval_report_from_json(r.payload));
  return out;
}

}  // namespace fvlab
