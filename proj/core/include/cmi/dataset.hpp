#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cmi {

enum class Group { control, intervention };

/// Imputation rule attached to an intercurrent event. MAR doubles as the
/// hypothetical-strategy declaration: post-ICE outcomes must already be
/// missing on ingestion for such records (checked by validate()).
enum class Strategy { mar, cr, j2r, cir };

const char* to_string(Strategy s);
const char* to_string(Group g);
std::optional<Strategy> strategy_from_string(const std::string& s);

inline bool is_reference_based(Strategy s) { return s != Strategy::mar; }

/// Visit schedule: J ordered follow-up visits plus the baseline assessment,
/// which is not counted among the J follow-ups (it enters as a covariate).
struct VisitGrid {
  std::vector<std::string> labels;
  std::string baseline_label;

  int num_visits() const { return static_cast<int>(labels.size()); }
  /// 0-based index of a follow-up visit label.
  std::optional<int> index_of(const std::string& label) const;
};

struct IceRecord {
  /// 1-based index of the last visit before the ICE (1..J-1). Subjects with
  /// no ICE simply carry no record.
  int last_pre_ice_visit = 1;
  Strategy strategy = Strategy::mar;
};

struct Subject {
  std::string id;
  Group group = Group::control;
  /// Baseline covariates by name; includes the baseline outcome.
  std::map<std::string, double> covariates;
  /// Length-J outcome vector; nullopt marks a missing assessment.
  std::vector<std::optional<double>> outcomes;
  std::optional<IceRecord> ice;

  double covariate(const std::string& name) const;
};

struct TrialDataset {
  VisitGrid grid;
  std::vector<std::string> covariate_names;
  std::vector<Subject> subjects;

  int num_subjects() const { return static_cast<int>(subjects.size()); }
  int num_visits() const { return grid.num_visits(); }
};

/// Returns a copy in which, for every subject whose ICE is handled by a
/// reference-based strategy, outcomes after the last pre-ICE visit are set to
/// missing. This is the dataset the imputation model is fitted on; all other
/// values (including observed post-ICE data of MAR-strategy subjects) are
/// unchanged.
TrialDataset mask_for_imputation(const TrialDataset& d);

/// Returns a copy with the given imputation strategy applied to every ICE
/// record. Assigning MAR removes the records altogether (analyze-under-MAR
/// ignores reference-based declarations and retains observed post-ICE data).
TrialDataset with_strategy(const TrialDataset& d, Strategy s);

/// Returns a copy without the given subject.
TrialDataset without_subject(const TrialDataset& d, int subject_index);

/// Partition of the visit indices (0-based) into observed and missing.
std::pair<std::vector<int>, std::vector<int>> split_observed_missing(const Subject& s);

struct Violation {
  std::string subject_id;  // empty for dataset-level violations
  std::string message;
};

/// Structural invariant check; returns an empty report iff the dataset is
/// valid. Never throws.
std::vector<Violation> validate(const TrialDataset& d);

/// Throws ValidationError listing all violations if the dataset is invalid.
void require_valid(const TrialDataset& d);

}  // namespace cmi
