#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace uad {

enum class SubjectLabel { control, patient };

SubjectLabel parse_label(const std::string& s);
std::string label_name(SubjectLabel label);

// Subject-level score: percentage of abnormal voxels in a region (or the
// whole brain), used to classify test subjects.
struct SubjectScore {
  std::string subject_id;
  SubjectLabel label = SubjectLabel::control;
  double metric = 0.0;
};

struct RocPoint {
  double threshold;
  double sensitivity;
  double specificity;
};

// One operating point per distinct metric value plus a -inf sentinel,
// ordered by increasing threshold. Classification rule: patient iff
// metric > threshold.
std::vector<RocPoint> roc(const std::vector<SubjectScore>& points);

double auc(const std::vector<RocPoint>& curve);

struct GmeanResult {
  double gmean = 0.0;
  double threshold = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

// Maximal sqrt(sensitivity * specificity) over the curve; ties broken
// toward higher specificity.
GmeanResult best_gmean(const std::vector<RocPoint>& curve);

struct SubjectMeta {
  std::string id;
  SubjectLabel label = SubjectLabel::control;
  double age = 0.0;
  char sex = 'F';
};

struct Fold {
  std::vector<std::string> train_controls, test_controls;
  std::vector<std::string> train_patients, test_patients;
};

struct FoldConfig {
  int n_folds = 10;
  double control_train_fraction = 0.75;
  double patient_train_fraction = 0.3;
};

// Bootstrap folds: per fold, an independent stratified (sex x age-tercile)
// random split of each role into train/test. Age terciles come from the
// pooled age distribution of all subjects. Strata with fewer than 4 members
// are merged into a remainder stratum before splitting.
std::vector<Fold> make_folds(const std::vector<SubjectMeta>& controls,
                             const std::vector<SubjectMeta>& patients, const FoldConfig& cfg,
                             std::uint64_t seed);

// Subject metadata CSV: header "id,label,age,sex".
std::vector<SubjectMeta> parse_metadata_csv(const std::string& text);
std::string metadata_csv(const std::vector<SubjectMeta>& subjects);

}  // namespace uad
