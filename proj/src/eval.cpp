#include "pcvd/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "pcvd/errors.hpp"

namespace pcvd {

MatchResult match_by_center_distance(const std::vector<BevBox>& preds, const std::vector<BevBox>& gts, double d) {
  MatchResult r;
  r.num_gt = static_cast<int>(gts.size());
  r.order.resize(preds.size());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) { return preds[a].score > preds[b].score; });
  std::vector<bool> taken(gts.size(), false);
  for (int p : r.order) {
    int best = -1;
    double best_d = d;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double dist = (preds[p].center - gts[g].center).norm();
      if (dist <= d && (best < 0 || dist < best_d)) {
        best = static_cast<int>(g);
        best_d = dist;
      }
    }
    if (best >= 0) taken[best] = true;
    r.gt_match.push_back(best);
  }
  return r;
}

std::optional<double> average_precision(std::vector<ScoredHit> hits, int num_gt) {
  if (num_gt <= 0) return std::nullopt;
  std::stable_sort(hits.begin(), hits.end(), [](const ScoredHit& a, const ScoredHit& b) { return a.score > b.score; });
  std::vector<double> recall, precision;
  int tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    tp += hits[i].true_positive;
    recall.push_back(static_cast<double>(tp) / num_gt);
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  // precision envelope: best precision at any recall >= r
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double area = 0.0;
  std::size_t j = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    while (j < recall.size() && recall[j] < r - 1e-12) ++j;
    if (j < recall.size()) area += precision[j];
  }
  return area / 101.0;
}

std::vector<double> scaled_thresholds(double scale) { return {0.5 * scale, 1.0 * scale, 2.0 * scale, 4.0 * scale}; }

EvalReport map_report(const std::vector<FrameDetections>& frames, const std::vector<std::string>& class_names,
                      const std::vector<double>& thresholds) {
  EvalReport rep;
  rep.thresholds = thresholds;
  double total = 0;
  int counted = 0;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    ClassReport cr;
    cr.name = class_names[c];
    for (const auto& f : frames)
      for (const auto& g : f.gts) cr.num_gt += g.class_id == static_cast<int>(c);
    for (double d : thresholds) {
      std::vector<ScoredHit> hits;
      for (const auto& f : frames) {
        std::vector<BevBox> p, g;
        for (const auto& b : f.preds)
          if (b.class_id == static_cast<int>(c)) p.push_back(b);
        for (const auto& b : f.gts)
          if (b.class_id == static_cast<int>(c)) g.push_back(b);
        const MatchResult m = match_by_center_distance(p, g, d);
        for (std::size_t i = 0; i < m.order.size(); ++i) hits.push_back({p[m.order[i]].score, m.gt_match[i] >= 0});
      }
      const auto ap = average_precision(std::move(hits), cr.num_gt);
      if (ap) {
        total += *ap;
        ++counted;
      }
      cr.ap.push_back(ap);
    }
    rep.classes.push_back(std::move(cr));
  }
  rep.mean_ap = counted > 0 ? total / counted : 0.0;
  return rep;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema"] = kEvalSchema;
  j["thresholds"] = thresholds;
  nlohmann::json cls = nlohmann::json::array();
  for (const auto& c : classes) {
    nlohmann::json ap = nlohmann::json::array();
    for (const auto& v : c.ap) ap.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    cls.push_back({{"name", c.name}, {"num_gt", c.num_gt}, {"ap", ap}});
  }
  j["classes"] = cls;
  j["mAP"] = mean_ap;
  return j;
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  char buf[64];
  os << "class     ";
  for (double d : thresholds) {
    std::snprintf(buf, sizeof buf, "  AP@%-5.2fm", d);
    os << buf;
  }
  os << "   gt\n";
  for (const auto& c : classes) {
    std::snprintf(buf, sizeof buf, "%-10s", c.name.c_str());
    os << buf;
    for (const auto& v : c.ap) {
      if (v)
        std::snprintf(buf, sizeof buf, "  %9.4f", *v);
      else
        std::snprintf(buf, sizeof buf, "  %9s", "n/a");
      os << buf;
    }
    os << "  " << c.num_gt << "\n";
  }
  std::snprintf(buf, sizeof buf, "mAP %.4f\n", mean_ap);
  os << buf;
  return os.str();
}

void validate_eval_report(const nlohmann::json& j) {
  auto fail = [](const std::string& what) { throw FormatError("eval report: " + what, 0); };
  if (!j.is_object()) fail("not an object");
  if (!j.contains("schema") || j["schema"] != kEvalSchema) fail("schema is not pcvd-eval-1");
  if (!j.contains("thresholds") || !j["thresholds"].is_array() || j["thresholds"].empty()) fail("missing thresholds");
  for (const auto& t : j["thresholds"])
    if (!t.is_number() || t.get<double>() <= 0) fail("threshold must be a positive number");
  if (!j.contains("mAP") || !j["mAP"].is_number()) fail("missing mAP");
  const double m = j["mAP"].get<double>();
  if (m < 0 || m > 1) fail("mAP outside [0, 1]");
  if (!j.contains("classes") || !j["classes"].is_array()) fail("missing classes");
  for (const auto& c : j["classes"]) {
    if (!c.contains("name") || !c["name"].is_string()) fail("class without name");
    if (!c.contains("num_gt") || !c["num_gt"].is_number_integer()) fail("class without num_gt");
    if (!c.contains("ap") || !c["ap"].is_array() || c["ap"].size() != j["thresholds"].size())
      fail("class ap list does not match thresholds");
    for (const auto& v : c["ap"]) {
      if (v.is_null()) continue;
      if (!v.is_number() || v.get<double>() < 0 || v.get<double>() > 1) fail("ap outside [0, 1]");
    }
  }
}

double recall_at(const std::vector<BevBox>& preds, const std::vector<BevBox>& targets, double d, double min_score) {
  if (targets.empty()) return 0.0;
  int hit = 0;
  std::vector<BevBox> confident;
  for (const auto& p : preds)
    if (p.score >= min_score) confident.push_back(p);
  std::vector<int> classes;
  for (const auto& t : targets) classes.push_back(t.class_id);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  for (int c : classes) {
    std::vector<BevBox> p, g;
    for (const auto& b : confident)
      if (b.class_id == c) p.push_back(b);
    for (const auto& b : targets)
      if (b.class_id == c) g.push_back(b);
    const MatchResult m = match_by_center_distance(p, g, d);
    for (int v : m.gt_match) hit += v >= 0;
  }
  return static_cast<double>(hit) / static_cast<double>(targets.size());
}

}  // namespace pcvd
