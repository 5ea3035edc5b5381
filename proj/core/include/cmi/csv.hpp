#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cmi/dataset.hpp"

namespace cmi {

struct ImputedDataset;  // impute.hpp

/// Describes the expected layout of a long-format trial CSV: one row per
/// (subject, visit), header required, column order free.
///
/// Required columns: subject_id, group, visit, outcome. The covariates listed
/// here are read from identically named columns and must be constant within a
/// subject and non-missing. Optional columns ice_visit / ice_strategy declare
/// at most one ICE per subject.
///
/// The baseline outcome may be supplied either as a covariate column named
/// grid.baseline_label or as rows with visit == grid.baseline_label, whose
/// outcome is folded into that covariate.
struct DatasetSchema {
  VisitGrid grid;
  std::vector<std::string> covariates;
  std::string group_control = "control";
  std::string group_intervention = "intervention";
};

/// Parses a long-format CSV per the schema. Empty cells and the literal "NA"
/// (case sensitive) denote missing outcomes. Structural problems (duplicate
/// subject-visit rows, unknown visit labels, missing covariate cells,
/// malformed strategy strings, ...) raise CsvError.
TrialDataset load_csv(const std::string& path, const DatasetSchema& schema);
TrialDataset load_csv(std::istream& in, const DatasetSchema& schema);

/// Writes a completed dataset in the same long format plus a provenance
/// column ("observed" or "imputed").
void write_imputed_csv(const ImputedDataset& d, const std::string& path);
void write_imputed_csv(const ImputedDataset& d, std::ostream& out);

/// Splits one CSV record, honoring double-quoted fields.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace cmi
