#include "upm/report.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "text_format.hpp"
#include "upm/error.hpp"

namespace upm {

namespace fs = std::filesystem;

namespace {

constexpr const char* kGroundingHeader = "name\tinstances\tR@1\tR@5\tR@10\tvisible_set_accuracy";
constexpr const char* kRetrievalHeader = "name\tutterances\tinstances\tR@1\tR@5";
constexpr const char* kClassificationHeader = "method\tcount\taccuracy";
constexpr const char* kPlotHeader = "series\tx\ty";

std::string recall(const RetrievalResult& r, std::size_t n) {
  const auto it = r.recall_at.find(n);
  return it == r.recall_at.end() ? "nan" : text::number(it->second);
}

void write_file(const fs::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << body;
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::vector<std::string>> read_table(const fs::path& path, const char* header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != header) throw FormatError(path.string() + ": unexpected header");
  const std::size_t cols = text::split(header, '\t').size();
  std::vector<std::vector<std::string>> rows;
  for (std::size_t no = 2; std::getline(in, line); ++no) {
    if (line.empty()) continue;
    auto f = text::split(line, '\t');
    if (f.size() != cols) throw FormatError(path.string() + ":" + std::to_string(no) + ": wrong column count");
    rows.push_back(std::move(f));
  }
  return rows;
}

double num(const fs::path& path, const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  const auto v = text::parse_double(s);
  if (!v) throw FormatError(path.string() + ": malformed number '" + s + "'");
  return *v;
}

void set_recall(RetrievalResult& r, std::size_t n, double v) {
  if (!std::isnan(v)) r.recall_at[n] = v;
}

}  // namespace

std::vector<std::pair<std::string, double>> summary_entries(const EvalReport& report) {
  std::vector<std::pair<std::string, double>> out;
  if (report.grounding) {
    for (const auto& row : *report.grounding) {
      const std::string p = "grounding." + row.name + ".";
      out.emplace_back(p + "instances", static_cast<double>(row.result.instances));
      for (const auto& [n, v] : row.result.recall_at) out.emplace_back(p + "r" + std::to_string(n), v);
      if (row.result.visible_set_accuracy) out.emplace_back(p + "visible_set_accuracy", *row.result.visible_set_accuracy);
    }
  }
  if (report.retrieval) {
    for (const auto& row : *report.retrieval) {
      const std::string p = "retrieval." + row.name + ".";
      out.emplace_back(p + "instances", static_cast<double>(row.result.instances));
      for (const auto& [n, v] : row.result.recall_at) out.emplace_back(p + "r" + std::to_string(n), v);
    }
  }
  if (report.classification) {
    for (const auto& row : *report.classification) out.emplace_back("classification." + row.method, row.accuracy);
  }
  return out;
}

void emit_report(const EvalReport& report, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  if (report.grounding) {
    std::ostringstream o;
    o << kGroundingHeader << '\n';
    for (const auto& r : *report.grounding) {
      o << r.name << '\t' << r.result.instances << '\t' << recall(r.result, 1) << '\t' << recall(r.result, 5) << '\t'
        << recall(r.result, 10) << '\t'
        << (r.result.visible_set_accuracy ? text::number(*r.result.visible_set_accuracy) : "nan") << '\n';
    }
    write_file(dir / "grounding.tsv", o.str());
  }
  if (report.retrieval) {
    std::ostringstream o;
    o << kRetrievalHeader << '\n';
    for (const auto& r : *report.retrieval) {
      o << r.name << '\t' << r.utterances << '\t' << r.result.instances << '\t' << recall(r.result, 1) << '\t'
        << recall(r.result, 5) << '\n';
    }
    write_file(dir / "retrieval.tsv", o.str());
  }
  if (report.classification) {
    std::ostringstream o;
    o << kClassificationHeader << '\n';
    for (const auto& r : *report.classification) o << r.method << '\t' << r.count << '\t' << text::number(r.accuracy) << '\n';
    write_file(dir / "classification.tsv", o.str());
  }
  if (report.plot) {
    std::ostringstream o;
    o << kPlotHeader << '\n';
    for (const auto& p : *report.plot) o << p.series << '\t' << text::number(p.x) << '\t' << text::number(p.y) << '\n';
    write_file(dir / "plot_data.tsv", o.str());
  }
  std::ostringstream s;
  for (const auto& [k, v] : summary_entries(report)) s << k << '=' << text::number(v) << '\n';
  write_file(dir / "summary.txt", s.str());
}

EvalReport read_report(const fs::path& dir) {
  EvalReport rep;
  if (const auto p = dir / "grounding.tsv"; fs::exists(p)) {
    rep.grounding.emplace();
    for (const auto& f : read_table(p, kGroundingHeader)) {
      GroundingRow row{f[0], {}};
      row.result.instances = static_cast<std::size_t>(num(p, f[1]));
      set_recall(row.result, 1, num(p, f[2]));
      set_recall(row.result, 5, num(p, f[3]));
      set_recall(row.result, 10, num(p, f[4]));
      if (const double v = num(p, f[5]); !std::isnan(v)) row.result.visible_set_accuracy = v;
      rep.grounding->push_back(std::move(row));
    }
  }
  if (const auto p = dir / "retrieval.tsv"; fs::exists(p)) {
    rep.retrieval.emplace();
    for (const auto& f : read_table(p, kRetrievalHeader)) {
      RetrievalRow row{f[0], static_cast<std::size_t>(num(p, f[1])), {}};
      row.result.instances = static_cast<std::size_t>(num(p, f[2]));
      set_recall(row.result, 1, num(p, f[3]));
      set_recall(row.result, 5, num(p, f[4]));
      rep.retrieval->push_back(std::move(row));
    }
  }
  if (const auto p = dir / "classification.tsv"; fs::exists(p)) {
    rep.classification.emplace();
    for (const auto& f : read_table(p, kClassificationHeader)) {
      rep.classification->push_back({f[0], num(p, f[2]), static_cast<std::size_t>(num(p, f[1]))});
    }
  }
  if (const auto p = dir / "plot_data.tsv"; fs::exists(p)) {
    rep.plot.emplace();
    for (const auto& f : read_table(p, kPlotHeader)) rep.plot->push_back({f[0], num(p, f[1]), num(p, f[2])});
  }
  return rep;
}

}  // namespace upm
