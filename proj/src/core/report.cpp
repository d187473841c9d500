#include "ofa/report.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "ofa/error.hpp"
#include "ofa/scheduler.hpp"

namespace ofa {

bool PhaseReport::same_results(const PhaseReport& o) const {
  return phase == o.phase && subnets == o.subnets && avg == o.avg && best == o.best && best_key == o.best_key &&
         best_params == o.best_params && best_macs == o.best_macs && maximal_accuracy == o.maximal_accuracy &&
         train_loss == o.train_loss && iterations == o.iterations;
}

void summarize(PhaseReport& r) {
  r.avg = r.best = 0.0;
  r.best_key.clear();
  r.best_params = r.best_macs = 0;
  if (r.subnets.empty()) return;
  double sum = 0.0;
  size_t best = 0;
  for (size_t i = 0; i < r.subnets.size(); ++i) {
    sum += r.subnets[i].accuracy;
    if (r.subnets[i].accuracy > r.subnets[best].accuracy) best = i;
  }
  r.avg = sum / static_cast<double>(r.subnets.size());
  for (auto& s : r.subnets) s.best = false;
  r.subnets[best].best = true;
  r.best = r.subnets[best].accuracy;
  r.best_key = r.subnets[best].key;
  r.best_params = r.subnets[best].params;
  r.best_macs = r.subnets[best].macs;
}

nlohmann::json to_json(const PhaseReport& r) {
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& s : r.subnets) {
    nlohmann::json cfg;
    to_json(cfg, s.config);
    subs.push_back({{"config", cfg},
                    {"key", s.key},
                    {"accuracy", s.accuracy},
                    {"params", s.params},
                    {"flops", s.macs},
                    {"best", s.best}});
  }
  return {{"phase", r.phase},
          {"subnets", subs},
          {"avg", r.avg},
          {"best", r.best},
          {"best_key", r.best_key},
          {"best_params", r.best_params},
          {"best_flops", r.best_macs},
          {"maximal_accuracy", r.maximal_accuracy},
          {"train_loss", r.train_loss},
          {"iterations", r.iterations},
          {"wall_clock_s", r.wall_clock_s}};
}

PhaseReport phase_report_from_json(const nlohmann::json& j, const ArchSpec& arch) {
  PhaseReport r;
  try {
    r.phase = j.at("phase").get<std::string>();
    for (const auto& s : j.at("subnets")) {
      SubnetRecord rec;
      rec.config = subnet_from_json(s.at("config"), arch);
      rec.key = s.at("key").get<std::string>();
      rec.accuracy = s.at("accuracy").get<double>();
      rec.params = s.at("params").get<int64_t>();
      rec.macs = s.at("flops").get<int64_t>();
      rec.best = s.at("best").get<bool>();
      r.subnets.push_back(std::move(rec));
    }
    r.avg = j.at("avg").get<double>();
    r.best = j.at("best").get<double>();
    r.best_key = j.at("best_key").get<std::string>();
    r.best_params = j.at("best_params").get<int64_t>();
    r.best_macs = j.at("best_flops").get<int64_t>();
    r.maximal_accuracy = j.at("maximal_accuracy").get<double>();
    r.train_loss = j.at("train_loss").get<double>();
    r.iterations = j.at("iterations").get<int64_t>();
    r.wall_clock_s = j.at("wall_clock_s").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed phase report: ") + e.what());
  }
  return r;
}

nlohmann::json to_json(const RunReport& r) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : r.phases) phases.push_back(to_json(p));
  return {{"schema_version", kReportSchemaVersion},
          {"network", r.arch.network_name()},
          {"variant", r.arch.variant()},
          {"width_multiplier", r.arch.width_multiplier},
          {"arch", r.arch},
          {"teacher", r.teacher},
          {"teacher_extractions", r.teacher_extractions},
          {"run_config", r.run_config},
          {"phases", phases}};
}

RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  try {
    const int v = j.at("schema_version").get<int>();
    if (v != kReportSchemaVersion)
      throw VersionError("report schema_version " + std::to_string(v) + ", expected " +
                         std::to_string(kReportSchemaVersion));
    r.arch = j.at("arch").get<ArchSpec>();
    r.teacher = j.at("teacher").get<std::string>();
    r.teacher_extractions = j.value("teacher_extractions", 0);
    r.run_config = j.value("run_config", nlohmann::json::object());
    for (const auto& p : j.at("phases")) r.phases.push_back(phase_report_from_json(p, r.arch));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed run report: ") + e.what());
  }
  return r;
}

namespace {

struct Column {
  const char* title;
  const char* phase;
  bool extended;  // step introduced by the extended schedule
};

constexpr Column kColumns[] = {
    {"RESOLUTION", "Full", false}, {"KERNEL SIZE", "EKS", false}, {"LEVEL *", "EL2", true},
    {"HEIGHT *", "EH4", true},     {"DEPTH", "ED2", false},      {"WIDTH", "EW2", false},
};

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

int variant_order(const std::string& v) {
  const auto all = all_variants();
  return static_cast<int>(std::find(all.begin(), all.end(), v) - all.begin());
}

}  // namespace

std::string render_table(const std::vector<RunReport>& runs) {
  std::map<double, std::vector<const RunReport*>> by_wm;
  for (const auto& r : runs) by_wm[r.arch.width_multiplier].push_back(&r);

  std::ostringstream out;
  bool first_block = true;
  for (auto& [wm, list] : by_wm) {
    std::stable_sort(list.begin(), list.end(), [](const RunReport* a, const RunReport* b) {
      const int va = variant_order(a->arch.variant()), vb = variant_order(b->arch.variant());
      if (va != vb) return va < vb;
      return (a->teacher == "fixed") > (b->teacher == "fixed");
    });

    // cells[row][col*2 + {0,1}]
    std::vector<std::vector<std::string>> cells;
    std::vector<std::vector<double>> values;
    std::vector<std::string> labels;
    for (const RunReport* r : list) {
      const auto names = phase_names(r->arch);
      std::vector<std::string> row;
      std::vector<double> vals;
      for (const auto& col : kColumns) {
        const bool has = std::find(names.begin(), names.end(), col.phase) != names.end();
        const PhaseReport* p = nullptr;
        for (const auto& ph : r->phases)
          if (ph.phase == col.phase) p = &ph;
        if (!has) {
          row.insert(row.end(), {"X", "X"});
          vals.insert(vals.end(), {-1.0, -1.0});
        } else if (!p) {
          row.insert(row.end(), {"-", "-"});
          vals.insert(vals.end(), {-1.0, -1.0});
        } else {
          row.insert(row.end(), {pct(p->avg), pct(p->best)});
          vals.insert(vals.end(), {p->avg, p->best});
        }
      }
      cells.push_back(std::move(row));
      values.push_back(std::move(vals));
      labels.push_back(r->arch.network_name() + " [" + r->teacher + "]");
    }
    const size_t ncol = std::size(kColumns) * 2;
    for (size_t c = 0; c < ncol; ++c) {
      double best = -1.0;
      for (const auto& v : values) best = std::max(best, v[c]);
      if (best < 0.0) continue;
      for (size_t r = 0; r < values.size(); ++r)
        if (values[r][c] == best) cells[r][c] = "[" + cells[r][c] + "]";
    }

    char head[64];
    std::snprintf(head, sizeof head, "NETWORK (WM = %.1f)", wm);
    size_t w0 = std::string(head).size();
    for (const auto& l : labels) w0 = std::max(w0, l.size());
    size_t wc = 8;
    for (const auto& row : cells)
      for (const auto& c : row) wc = std::max(wc, c.size());
    std::vector<size_t> group(std::size(kColumns));
    for (size_t g = 0; g < group.size(); ++g)
      group[g] = std::max(2 * wc + 1, std::string(kColumns[g].title).size());

    auto pad = [](const std::string& s, size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
    auto lpad = [](const std::string& s, size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; };

    if (!first_block) out << "\n";
    first_block = false;
    out << pad(head, w0);
    for (size_t g = 0; g < group.size(); ++g) out << " | " << pad(kColumns[g].title, group[g]);
    out << "\n" << pad("", w0);
    for (size_t g = 0; g < group.size(); ++g) {
      const size_t half = (group[g] - 1) / 2;
      out << " | " << lpad("avg", half) << " " << lpad("best", group[g] - half - 1);
    }
    out << "\n" << std::string(w0, '-');
    for (size_t g = 0; g < group.size(); ++g) out << "-+-" << std::string(group[g], '-');
    out << "\n";
    for (size_t r = 0; r < cells.size(); ++r) {
      out << pad(labels[r], w0);
      for (size_t g = 0; g < group.size(); ++g) {
        const size_t half = (group[g] - 1) / 2;
        out << " | " << lpad(cells[r][2 * g], half) << " " << lpad(cells[r][2 * g + 1], group[g] - half - 1);
      }
      out << "\n";
    }
  }
  return out.str();
}

}  // namespace ofa
