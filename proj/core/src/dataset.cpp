#include "cmi/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "cmi/errors.hpp"

namespace cmi {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::mar: return "MAR";
    case Strategy::cr: return "CR";
    case Strategy::j2r: return "J2R";
    case Strategy::cir: return "CIR";
  }
  return "?";
}

const char* to_string(Group g) {
  return g == Group::control ? "control" : "intervention";
}

std::optional<Strategy> strategy_from_string(const std::string& s) {
  if (s == "MAR") return Strategy::mar;
  if (s == "CR") return Strategy::cr;
  if (s == "J2R") return Strategy::j2r;
  if (s == "CIR") return Strategy::cir;
  return std::nullopt;
}

std::optional<int> VisitGrid::index_of(const std::string& label) const {
  for (std::size_t j = 0; j < labels.size(); ++j)
    if (labels[j] == label) return static_cast<int>(j);
  return std::nullopt;
}

double Subject::covariate(const std::string& name) const {
  const auto it = covariates.find(name);
  if (it == covariates.end())
    throw ValidationError("subject " + id + ": covariate \"" + name + "\" not present");
  return it->second;
}

TrialDataset mask_for_imputation(const TrialDataset& d) {
  TrialDataset out = d;
  for (auto& s : out.subjects) {
    if (!s.ice || !is_reference_based(s.ice->strategy)) continue;
    for (std::size_t j = static_cast<std::size_t>(s.ice->last_pre_ice_visit);
         j < s.outcomes.size(); ++j)
      s.outcomes[j] = std::nullopt;
  }
  return out;
}

TrialDataset with_strategy(const TrialDataset& d, Strategy strategy) {
  TrialDataset out = d;
  for (auto& s : out.subjects) {
    if (!s.ice) continue;
    if (strategy == Strategy::mar)
      s.ice = std::nullopt;
    else
      s.ice->strategy = strategy;
  }
  return out;
}

TrialDataset without_subject(const TrialDataset& d, int subject_index) {
  TrialDataset out;
  out.grid = d.grid;
  out.covariate_names = d.covariate_names;
  out.subjects.reserve(d.subjects.size() - 1);
  for (int i = 0; i < d.num_subjects(); ++i)
    if (i != subject_index) out.subjects.push_back(d.subjects[i]);
  return out;
}

std::pair<std::vector<int>, std::vector<int>> split_observed_missing(const Subject& s) {
  std::vector<int> observed, missing;
  for (std::size_t j = 0; j < s.outcomes.size(); ++j) {
    if (s.outcomes[j].has_value())
      observed.push_back(static_cast<int>(j));
    else
      missing.push_back(static_cast<int>(j));
  }
  return {observed, missing};
}

std::vector<Violation> validate(const TrialDataset& d) {
  std::vector<Violation> out;
  const int J = d.num_visits();
  if (J < 1) out.push_back({"", "visit grid must have at least one follow-up visit"});
  {
    std::set<std::string> seen(d.grid.labels.begin(), d.grid.labels.end());
    if (static_cast<int>(seen.size()) != J)
      out.push_back({"", "visit labels are not unique"});
  }
  if (d.num_subjects() < 2)
    out.push_back({"", "dataset must contain at least two subjects"});

  int n_control = 0, n_intervention = 0;
  std::set<std::string> ids;
  for (const auto& s : d.subjects) {
    (s.group == Group::control ? n_control : n_intervention) += 1;
    if (!ids.insert(s.id).second)
      out.push_back({s.id, "duplicate subject id"});
    if (static_cast<int>(s.outcomes.size()) != J)
      out.push_back({s.id, "outcome vector length differs from the visit grid"});
    for (const auto& name : d.covariate_names) {
      const auto it = s.covariates.find(name);
      if (it == s.covariates.end())
        out.push_back({s.id, "missing covariate \"" + name + "\""});
      else if (!std::isfinite(it->second))
        out.push_back({s.id, "non-finite covariate \"" + name + "\""});
    }
    for (const auto& y : s.outcomes)
      if (y && !std::isfinite(*y)) out.push_back({s.id, "non-finite outcome"});
    if (s.ice) {
      const int t = s.ice->last_pre_ice_visit;
      if (t < 1 || t >= J) {
        std::ostringstream msg;
        msg << "ICE visit index " << t << " outside 1.." << (J - 1)
            << " (an ICE at or after the final visit leaves nothing to impute)";
        out.push_back({s.id, msg.str()});
      } else if (s.ice->strategy == Strategy::mar) {
        // hypothetical-strategy declaration: post-ICE data must be absent
        for (std::size_t j = static_cast<std::size_t>(t); j < s.outcomes.size(); ++j)
          if (s.outcomes[j].has_value()) {
            out.push_back({s.id,
                           "observed post-ICE outcome is not compatible with a "
                           "hypothetical-strategy (MAR) ICE"});
            break;
          }
      }
    }
  }
  if (n_control == 0) out.push_back({"", "group without subjects: control"});
  if (n_intervention == 0) out.push_back({"", "group without subjects: intervention"});
  return out;
}

void require_valid(const TrialDataset& d) {
  const auto report = validate(d);
  if (report.empty()) return;
  std::ostringstream msg;
  msg << "invalid dataset:";
  for (const auto& v : report) {
    msg << "\n  ";
    if (!v.subject_id.empty()) msg << "[" << v.subject_id << "] ";
    msg << v.message;
  }
  throw ValidationError(msg.str());
}

}  // namespace cmi
