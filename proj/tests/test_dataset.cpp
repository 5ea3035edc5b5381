#include <doctest.h>

#include <sstream>

#include "cmi/csv.hpp"
#include "cmi/dataset.hpp"
#include "cmi/errors.hpp"
#include "cmi/rng.hpp"

using namespace cmi;

namespace {

DatasetSchema basic_schema(int num_visits) {
  DatasetSchema schema;
  for (int j = 1; j <= num_visits; ++j) schema.grid.labels.push_back("v" + std::to_string(j));
  schema.grid.baseline_label = "base";
  schema.covariates = {"base"};
  return schema;
}

Subject make_subject(const std::string& id, Group g,
                     std::vector<std::optional<double>> outcomes,
                     std::optional<IceRecord> ice = std::nullopt) {
  Subject s;
  s.id = id;
  s.group = g;
  s.covariates["base"] = 1.0;
  s.outcomes = std::move(outcomes);
  s.ice = ice;
  return s;
}

TrialDataset tiny_dataset(int J = 4) {
  TrialDataset d;
  for (int j = 1; j <= J; ++j) d.grid.labels.push_back("v" + std::to_string(j));
  d.grid.baseline_label = "base";
  d.covariate_names = {"base"};
  return d;
}

}  // namespace

TEST_CASE("load_csv: two subjects, three visits, no ICEs") {
  const std::string csv =
      "subject_id,group,visit,outcome,base\n"
      "s1,control,v1,1.0,10\n"
      "s1,control,v2,2.0,10\n"
      "s1,control,v3,3.0,10\n"
      "s2,intervention,v1,1.5,11\n"
      "s2,intervention,v2,,11\n"
      "s2,intervention,v3,NA,11\n";
  std::istringstream in(csv);
  const TrialDataset d = load_csv(in, basic_schema(3));
  REQUIRE(d.num_subjects() == 2);
  CHECK(d.num_visits() == 3);
  CHECK(!d.subjects[0].ice);
  CHECK(!d.subjects[1].ice);
  CHECK(*d.subjects[0].outcomes[2] == 3.0);
  CHECK(!d.subjects[1].outcomes[1].has_value());  // blank cell
  CHECK(!d.subjects[1].outcomes[2].has_value());  // literal NA
  CHECK(d.subjects[1].covariate("base") == 11.0);
  CHECK(validate(d).empty());
}

TEST_CASE("load_csv: ICE columns map to an IceRecord") {
  const std::string csv =
      "subject_id,group,visit,outcome,base,ice_visit,ice_strategy\n"
      "s1,control,v1,1,9,,\n"
      "s1,control,v2,2,9,,\n"
      "s1,control,v3,3,9,,\n"
      "s1,control,v4,4,9,,\n"
      "s2,intervention,v1,1,9,v2,J2R\n"
      "s2,intervention,v2,2,9,v2,J2R\n"
      "s2,intervention,v3,,9,v2,J2R\n"
      "s2,intervention,v4,,9,v2,J2R\n";
  std::istringstream in(csv);
  const TrialDataset d = load_csv(in, basic_schema(4));
  REQUIRE(d.subjects[1].ice.has_value());
  CHECK(d.subjects[1].ice->last_pre_ice_visit == 2);
  CHECK(d.subjects[1].ice->strategy == Strategy::j2r);
}

TEST_CASE("load_csv: missing covariate cell is an error") {
  const std::string csv =
      "subject_id,group,visit,outcome,base\n"
      "s1,control,v1,1.0,\n";
  std::istringstream in(csv);
  CHECK_THROWS_WITH_AS(load_csv(in, basic_schema(1)),
                       doctest::Contains("missing covariate"), CsvError);
}

TEST_CASE("load_csv: duplicate row, unknown visit, bad strategy") {
  {
    std::istringstream in(
        "subject_id,group,visit,outcome,base\n"
        "s1,control,v1,1,0\n"
        "s1,control,v1,2,0\n");
    CHECK_THROWS_WITH_AS(load_csv(in, basic_schema(2)), doctest::Contains("duplicate"),
                         CsvError);
  }
  {
    std::istringstream in(
        "subject_id,group,visit,outcome,base\n"
        "s1,control,week9,1,0\n");
    CHECK_THROWS_WITH_AS(load_csv(in, basic_schema(2)),
                         doctest::Contains("unknown visit label"), CsvError);
  }
  {
    std::istringstream in(
        "subject_id,group,visit,outcome,base,ice_visit,ice_strategy\n"
        "s1,control,v1,1,0,v1,JUMP\n"
        "s1,control,v2,2,0,v1,JUMP\n");
    CHECK_THROWS_WITH_AS(load_csv(in, basic_schema(2)),
                         doctest::Contains("malformed strategy"), CsvError);
  }
}

TEST_CASE("load_csv: baseline can arrive as visit rows") {
  DatasetSchema schema;
  schema.grid.labels = {"v1", "v2"};
  schema.grid.baseline_label = "base";
  // no covariate columns declared
  std::istringstream in(
      "subject_id,group,visit,outcome\n"
      "s1,control,base,10\n"
      "s1,control,v1,11\n"
      "s1,control,v2,12\n"
      "s2,intervention,base,20\n"
      "s2,intervention,v1,21\n"
      "s2,intervention,v2,22\n");
  const TrialDataset d = load_csv(in, schema);
  CHECK(d.covariate_names == std::vector<std::string>{"base"});
  CHECK(d.subjects[0].covariate("base") == 10.0);
  CHECK(d.subjects[1].covariate("base") == 20.0);
  CHECK(validate(d).empty());
}

TEST_CASE("mask_for_imputation: no ICE leaves outcomes unchanged") {
  TrialDataset d = tiny_dataset();
  d.subjects.push_back(make_subject("a", Group::control, {1.0, 2.0, 3.0, 4.0}));
  d.subjects.push_back(make_subject("b", Group::intervention, {1.0, 2.0, 3.0, std::nullopt}));
  const TrialDataset m = mask_for_imputation(d);
  for (int i = 0; i < 2; ++i)
    CHECK(m.subjects[i].outcomes == d.subjects[i].outcomes);
}

TEST_CASE("mask_for_imputation: reference-based post-ICE data removed") {
  TrialDataset d = tiny_dataset();
  d.subjects.push_back(make_subject("a", Group::intervention, {1.0, 2.0, 3.0, std::nullopt},
                                    IceRecord{2, Strategy::j2r}));
  const TrialDataset m = mask_for_imputation(d);
  const auto& y = m.subjects[0].outcomes;
  CHECK(*y[0] == 1.0);
  CHECK(*y[1] == 2.0);
  CHECK(!y[2].has_value());
  CHECK(!y[3].has_value());
  // original untouched
  CHECK(*d.subjects[0].outcomes[2] == 3.0);
}

TEST_CASE("mask_for_imputation: MAR-strategy data retained") {
  TrialDataset d = tiny_dataset();
  d.subjects.push_back(make_subject("a", Group::intervention, {1.0, 2.0, 3.0, 4.0},
                                    IceRecord{2, Strategy::mar}));
  const TrialDataset m = mask_for_imputation(d);
  CHECK(m.subjects[0].outcomes == d.subjects[0].outcomes);
}

TEST_CASE("split_observed_missing covers the spec cases") {
  {
    const Subject s = make_subject("a", Group::control, {1.0, std::nullopt, 3.0});
    const auto [obs, miss] = split_observed_missing(s);
    CHECK(obs == std::vector<int>{0, 2});
    CHECK(miss == std::vector<int>{1});
  }
  {
    const Subject s = make_subject("a", Group::control, {1.0, 2.0});
    const auto [obs, miss] = split_observed_missing(s);
    CHECK(obs == std::vector<int>{0, 1});
    CHECK(miss.empty());
  }
  {
    const Subject s = make_subject("a", Group::control, {std::nullopt, std::nullopt});
    const auto [obs, miss] = split_observed_missing(s);
    CHECK(obs.empty());
    CHECK(miss == std::vector<int>{0, 1});
  }
}

TEST_CASE("validate: valid dataset, empty group, hypothetical post-ICE data") {
  TrialDataset d = tiny_dataset();
  d.subjects.push_back(make_subject("a", Group::control, {1.0, 2.0, 3.0, 4.0}));
  d.subjects.push_back(make_subject("b", Group::intervention, {1.0, 2.0, 3.0, 4.0}));
  CHECK(validate(d).empty());

  TrialDataset one_group = tiny_dataset();
  one_group.subjects.push_back(make_subject("a", Group::control, {1.0, 2.0, 3.0, 4.0}));
  one_group.subjects.push_back(make_subject("b", Group::control, {1.0, 2.0, 3.0, 4.0}));
  bool found = false;
  for (const auto& v : validate(one_group))
    found = found || v.message.find("group without subjects") != std::string::npos;
  CHECK(found);

  TrialDataset hyp = tiny_dataset();
  hyp.subjects.push_back(make_subject("a", Group::control, {1.0, 2.0, 3.0, 4.0}));
  hyp.subjects.push_back(make_subject("b", Group::intervention, {1.0, 2.0, 3.0, 4.0},
                                      IceRecord{2, Strategy::mar}));
  found = false;
  for (const auto& v : validate(hyp))
    found = found || v.message.find("not compatible") != std::string::npos;
  CHECK(found);
}

TEST_CASE("validate rejects an ICE at or after the final visit") {
  TrialDataset d = tiny_dataset();
  d.subjects.push_back(make_subject("a", Group::control, {1.0, 2.0, 3.0, 4.0}));
  d.subjects.push_back(make_subject("b", Group::intervention,
                                    {1.0, 2.0, 3.0, std::nullopt},
                                    IceRecord{4, Strategy::j2r}));
  CHECK(!validate(d).empty());
}

TEST_CASE("with_strategy: MAR drops records, reference strategies rewrite them") {
  TrialDataset d = tiny_dataset();
  d.subjects.push_back(make_subject("a", Group::intervention, {1.0, 2.0, std::nullopt, std::nullopt},
                                    IceRecord{2, Strategy::j2r}));
  d.subjects.push_back(make_subject("b", Group::control, {1.0, 2.0, 3.0, 4.0}));
  const TrialDataset as_cir = with_strategy(d, Strategy::cir);
  CHECK(as_cir.subjects[0].ice->strategy == Strategy::cir);
  CHECK(as_cir.subjects[0].ice->last_pre_ice_visit == 2);
  const TrialDataset as_mar = with_strategy(d, Strategy::mar);
  CHECK(!as_mar.subjects[0].ice.has_value());
}

// property: masking is idempotent, never unmasks, and touches only
// reference-based post-ICE visits
TEST_CASE("mask_for_imputation properties on random datasets") {
  RngStream rng(2024);
  for (int rep = 0; rep < 50; ++rep) {
    const int J = 2 + rng.uniform_int(5);
    TrialDataset d;
    for (int j = 1; j <= J; ++j) d.grid.labels.push_back("v" + std::to_string(j));
    d.grid.baseline_label = "base";
    d.covariate_names = {"base"};
    const int n = 2 + rng.uniform_int(8);
    for (int i = 0; i < n; ++i) {
      std::vector<std::optional<double>> y(static_cast<std::size_t>(J));
      for (auto& v : y)
        if (rng.uniform() < 0.8) v = rng.normal();
      std::optional<IceRecord> ice;
      if (J > 1 && rng.uniform() < 0.5) {
        const Strategy s =
            static_cast<Strategy>(rng.uniform_int(4));
        ice = IceRecord{1 + rng.uniform_int(J - 1), s};
      }
      d.subjects.push_back(make_subject("s" + std::to_string(i),
                                        i % 2 ? Group::intervention : Group::control,
                                        std::move(y), ice));
    }
    const TrialDataset m1 = mask_for_imputation(d);
    const TrialDataset m2 = mask_for_imputation(m1);
    for (int i = 0; i < n; ++i) {
      const auto& orig = d.subjects[i];
      const auto& once = m1.subjects[i];
      const auto& twice = m2.subjects[i];
      CHECK(once.outcomes == twice.outcomes);  // idempotent
      const auto [obs_o, miss_o] = split_observed_missing(orig);
      const auto [obs_m, miss_m] = split_observed_missing(once);
      CHECK(obs_m.size() + miss_m.size() == static_cast<std::size_t>(J));
      for (std::size_t j = 0; j < orig.outcomes.size(); ++j) {
        if (!orig.outcomes[j].has_value()) CHECK(!once.outcomes[j].has_value());  // never unmask
        const bool ref_post_ice = orig.ice && is_reference_based(orig.ice->strategy) &&
                                  static_cast<int>(j) >= orig.ice->last_pre_ice_visit;
        if (!ref_post_ice) CHECK(once.outcomes[j] == orig.outcomes[j]);
      }
    }
  }
}
