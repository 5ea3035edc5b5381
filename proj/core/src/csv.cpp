#include "cmi/csv.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "cmi/errors.hpp"
#include "cmi/impute.hpp"

namespace cmi {

namespace {

bool is_missing_token(const std::string& s) { return s.empty() || s == "NA"; }

double parse_double(const std::string& s, const std::string& what, int line_no) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    std::ostringstream msg;
    msg << "line " << line_no << ": cannot parse " << what << " value \"" << s << "\"";
    throw CsvError(msg.str());
  }
}

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct SubjectBuilder {
  Subject subject;
  std::vector<bool> seen;             // per follow-up visit
  bool baseline_seen = false;
  std::string ice_visit, ice_strategy;
  int first_line = 0;
};

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

TrialDataset load_csv(const std::string& path, const DatasetSchema& schema) {
  std::ifstream in(path);
  if (!in) throw CsvError("cannot open file: " + path);
  return load_csv(in, schema);
}

TrialDataset load_csv(std::istream& in, const DatasetSchema& schema) {
  const int J = schema.grid.num_visits();
  std::string line;
  if (!std::getline(in, line)) throw CsvError("empty file: header row required");
  const auto header = split_csv_line(line);

  auto column = [&](const std::string& name) -> int {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return static_cast<int>(c);
    return -1;
  };
  const int col_id = column("subject_id");
  const int col_group = column("group");
  const int col_visit = column("visit");
  const int col_outcome = column("outcome");
  for (const auto& [name, col] : {std::pair<const char*, int>{"subject_id", col_id},
                                  {"group", col_group},
                                  {"visit", col_visit},
                                  {"outcome", col_outcome}})
    if (col < 0) throw CsvError(std::string("required column missing: ") + name);

  std::vector<int> cov_cols;
  for (const auto& name : schema.covariates) {
    const int c = column(name);
    if (c < 0) throw CsvError("covariate column missing: " + name);
    cov_cols.push_back(c);
  }
  const int col_ice_visit = column("ice_visit");
  const int col_ice_strategy = column("ice_strategy");
  const int col_baseline = column(schema.grid.baseline_label);
  const bool baseline_is_covariate_column =
      col_baseline >= 0 ||
      std::find(schema.covariates.begin(), schema.covariates.end(),
                schema.grid.baseline_label) != schema.covariates.end();

  std::map<std::string, SubjectBuilder> builders;
  std::vector<std::string> order;  // subject ids in first-appearance order

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    auto field = [&](int c) -> std::string {
      return (c >= 0 && c < static_cast<int>(fields.size())) ? fields[static_cast<std::size_t>(c)] : std::string();
    };

    const std::string id = field(col_id);
    if (id.empty()) throw CsvError("line " + std::to_string(line_no) + ": empty subject_id");
    auto [it, inserted] = builders.try_emplace(id);
    SubjectBuilder& b = it->second;
    if (inserted) {
      order.push_back(id);
      b.subject.id = id;
      b.subject.outcomes.assign(static_cast<std::size_t>(J), std::nullopt);
      b.seen.assign(static_cast<std::size_t>(J), false);
      b.first_line = line_no;
      const std::string g = field(col_group);
      if (g == schema.group_control)
        b.subject.group = Group::control;
      else if (g == schema.group_intervention)
        b.subject.group = Group::intervention;
      else
        throw CsvError("line " + std::to_string(line_no) + ": unknown group \"" + g + "\"");
    } else {
      const std::string g = field(col_group);
      const Group parsed = (g == schema.group_control) ? Group::control : Group::intervention;
      if ((g != schema.group_control && g != schema.group_intervention) ||
          parsed != b.subject.group)
        throw CsvError("line " + std::to_string(line_no) + ": inconsistent group for subject " + id);
    }

    const std::string visit = field(col_visit);
    const std::string outcome = field(col_outcome);
    if (visit == schema.grid.baseline_label) {
      if (b.baseline_seen)
        throw CsvError("line " + std::to_string(line_no) + ": duplicate (subject, visit) row: " +
                       id + ", " + visit);
      b.baseline_seen = true;
      if (is_missing_token(outcome))
        throw CsvError("line " + std::to_string(line_no) +
                       ": missing covariate: baseline outcome for subject " + id);
      b.subject.covariates[schema.grid.baseline_label] =
          parse_double(outcome, "baseline outcome", line_no);
    } else {
      const auto j = schema.grid.index_of(visit);
      if (!j)
        throw CsvError("line " + std::to_string(line_no) + ": unknown visit label \"" + visit + "\"");
      if (b.seen[static_cast<std::size_t>(*j)])
        throw CsvError("line " + std::to_string(line_no) + ": duplicate (subject, visit) row: " +
                       id + ", " + visit);
      b.seen[static_cast<std::size_t>(*j)] = true;
      if (!is_missing_token(outcome))
        b.subject.outcomes[static_cast<std::size_t>(*j)] = parse_double(outcome, "outcome", line_no);
    }

    for (std::size_t k = 0; k < cov_cols.size(); ++k) {
      const std::string v = field(cov_cols[k]);
      if (is_missing_token(v))
        throw CsvError("line " + std::to_string(line_no) + ": missing covariate \"" +
                       schema.covariates[k] + "\" for subject " + id);
      const double value = parse_double(v, "covariate " + schema.covariates[k], line_no);
      const auto [cit, cinserted] = b.subject.covariates.try_emplace(schema.covariates[k], value);
      if (!cinserted && cit->second != value)
        throw CsvError("line " + std::to_string(line_no) + ": covariate \"" +
                       schema.covariates[k] + "\" varies within subject " + id +
                       " (time-varying covariates are not supported)");
    }

    const std::string iv = field(col_ice_visit);
    const std::string is = field(col_ice_strategy);
    if (!is_missing_token(iv)) {
      if (!b.ice_visit.empty() && b.ice_visit != iv)
        throw CsvError("line " + std::to_string(line_no) + ": conflicting ice_visit for subject " + id);
      b.ice_visit = iv;
    }
    if (!is_missing_token(is)) {
      if (!b.ice_strategy.empty() && b.ice_strategy != is)
        throw CsvError("line " + std::to_string(line_no) + ": conflicting ice_strategy for subject " + id);
      b.ice_strategy = is;
    }
  }

  TrialDataset out;
  out.grid = schema.grid;
  out.covariate_names = schema.covariates;
  if (!baseline_is_covariate_column) {
    // baseline arrived via visit rows; expose it as a covariate
    bool any_baseline = false;
    for (const auto& id : order)
      any_baseline = any_baseline || builders[id].baseline_seen;
    if (any_baseline) out.covariate_names.push_back(schema.grid.baseline_label);
  }

  for (const auto& id : order) {
    SubjectBuilder& b = builders[id];
    if (!b.ice_visit.empty() || !b.ice_strategy.empty()) {
      if (b.ice_visit.empty() || b.ice_strategy.empty())
        throw CsvError("subject " + id + ": ice_visit and ice_strategy must be given together");
      const auto strat = strategy_from_string(b.ice_strategy);
      if (!strat)
        throw CsvError("subject " + id + ": malformed strategy string \"" + b.ice_strategy +
                       "\" (expected MAR, CR, J2R or CIR)");
      const auto j = schema.grid.index_of(b.ice_visit);
      if (!j)
        throw CsvError("subject " + id + ": unknown ice_visit label \"" + b.ice_visit + "\"");
      b.subject.ice = IceRecord{*j + 1, *strat};
    }
    out.subjects.push_back(std::move(b.subject));
  }
  return out;
}

void write_imputed_csv(const ImputedDataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CsvError("cannot open file for writing: " + path);
  write_imputed_csv(d, out);
}

void write_imputed_csv(const ImputedDataset& d, std::ostream& out) {
  const TrialDataset& base = d.base;
  out << "subject_id,group,visit,outcome";
  for (const auto& name : base.covariate_names) out << "," << name;
  out << ",ice_visit,ice_strategy,provenance\n";
  for (int i = 0; i < base.num_subjects(); ++i) {
    const Subject& s = base.subjects[i];
    for (int j = 0; j < base.num_visits(); ++j) {
      out << s.id << ","
          << (s.group == Group::control ? "control" : "intervention") << ","
          << base.grid.labels[static_cast<std::size_t>(j)] << ","
          << format_value(d.filled[static_cast<std::size_t>(i)](j));
      for (const auto& name : base.covariate_names) out << "," << format_value(s.covariate(name));
      if (s.ice)
        out << "," << base.grid.labels[static_cast<std::size_t>(s.ice->last_pre_ice_visit - 1)]
            << "," << to_string(s.ice->strategy);
      else
        out << ",,";
      out << ","
          << (d.provenance[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] ==
                      CellProvenance::observed
                  ? "observed"
                  : "imputed")
          << "\n";
    }
  }
}

}  // namespace cmi
