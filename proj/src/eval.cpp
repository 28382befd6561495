#include "uad/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "uad/rng.hpp"
#include "uad/volume.hpp"

namespace uad {

SubjectLabel parse_label(const std::string& s) {
  if (s == "control") return SubjectLabel::control;
  if (s == "patient") return SubjectLabel::patient;
  throw std::invalid_argument("unknown subject label \"" + s + "\" (need control|patient)");
}

std::string label_name(SubjectLabel label) {
  return label == SubjectLabel::control ? "control" : "patient";
}

std::vector<RocPoint> roc(const std::vector<SubjectScore>& points) {
  std::vector<double> patients, controls;
  for (const auto& p : points)
    (p.label == SubjectLabel::patient ? patients : controls).push_back(p.metric);
  if (patients.empty() || controls.empty())
    throw std::invalid_argument("roc: both classes must be present (have " +
                                std::to_string(controls.size()) + " controls, " +
                                std::to_string(patients.size()) + " patients)");

  std::vector<double> thresholds;
  thresholds.push_back(-std::numeric_limits<double>::infinity());
  for (const auto& p : points) thresholds.push_back(p.metric);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<RocPoint> curve;
  curve.reserve(thresholds.size());
  for (const double th : thresholds) {
    std::int64_t tp = 0, tn = 0;
    for (const double m : patients) tp += m > th;
    for (const double m : controls) tn += m <= th;
    curve.push_back({th, static_cast<double>(tp) / static_cast<double>(patients.size()),
                     static_cast<double>(tn) / static_cast<double>(controls.size())});
  }
  return curve;
}

double auc(const std::vector<RocPoint>& curve) {
  if (curve.empty()) throw std::invalid_argument("auc: empty curve");
  // integrate sensitivity over the false-positive rate
  std::vector<std::pair<double, double>> pts;  // (fpr, tpr)
  pts.reserve(curve.size());
  for (const auto& p : curve) pts.emplace_back(1.0 - p.specificity, p.sensitivity);
  std::sort(pts.begin(), pts.end());
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += 0.5 * (pts[i].first - pts[i - 1].first) * (pts[i].second + pts[i - 1].second);
  return area;
}

GmeanResult best_gmean(const std::vector<RocPoint>& curve) {
  if (curve.empty()) throw std::invalid_argument("best_gmean: empty ROC");
  GmeanResult best{-1.0, 0.0, 0.0, 0.0};
  for (const auto& p : curve) {
    const double g = std::sqrt(p.sensitivity * p.specificity);
    if (g > best.gmean || (g == best.gmean && p.specificity > best.specificity))
      best = {g, p.threshold, p.sensitivity, p.specificity};
  }
  return best;
}

namespace {

// stratum key: sex x age tercile
int age_tercile(double age, double t1, double t2) { return age <= t1 ? 0 : (age <= t2 ? 1 : 2); }

struct RoleSplit {
  std::vector<std::string> train, test;
};

RoleSplit split_role(const std::vector<SubjectMeta>& members, double train_fraction, double t1,
                     double t2, Rng& rng) {
  // group into strata, merging tiny ones into a remainder bucket
  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < members.size(); ++i) {
    const int key = (members[i].sex == 'M' ? 3 : 0) + age_tercile(members[i].age, t1, t2);
    strata[key].push_back(i);
  }
  constexpr std::size_t kMinStratum = 4;
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> rest;
  for (auto& [key, idx] : strata) {
    if (idx.size() >= kMinStratum)
      groups.push_back(std::move(idx));
    else
      rest.insert(rest.end(), idx.begin(), idx.end());
  }
  if (!rest.empty()) groups.push_back(std::move(rest));

  const std::size_t n = members.size();
  const double target = train_fraction * static_cast<double>(n);
  std::size_t total_train = static_cast<std::size_t>(std::floor(target));
  if (rng.uniform() < target - std::floor(target)) ++total_train;
  total_train = std::min(total_train, n);

  // largest-remainder allocation of the train quota across strata
  std::vector<std::size_t> quota(groups.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double exact =
        static_cast<double>(total_train) * static_cast<double>(groups[g].size()) /
        static_cast<double>(n);
    quota[g] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[g];
    remainders.emplace_back(exact - std::floor(exact), g);
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (std::size_t r = 0; assigned < total_train; r = (r + 1) % remainders.size()) {
    const std::size_t g = remainders[r].second;
    if (quota[g] < groups[g].size()) {
      ++quota[g];
      ++assigned;
    }
  }

  RoleSplit out;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto idx = groups[g];
    rng.shuffle(idx);
    for (std::size_t i = 0; i < idx.size(); ++i)
      (i < quota[g] ? out.train : out.test).push_back(members[idx[i]].id);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

}  // namespace

std::vector<Fold> make_folds(const std::vector<SubjectMeta>& controls,
                             const std::vector<SubjectMeta>& patients, const FoldConfig& cfg,
                             std::uint64_t seed) {
  if (cfg.n_folds < 1) throw std::invalid_argument("make_folds: n_folds must be >= 1");
  if (controls.size() < 2)
    throw std::invalid_argument("make_folds: need at least 2 controls to split");

  std::vector<double> ages;
  for (const auto& s : controls) ages.push_back(s.age);
  for (const auto& s : patients) ages.push_back(s.age);
  const double t1 = interpolated_quantile(ages, 1.0 / 3.0);
  const double t2 = interpolated_quantile(ages, 2.0 / 3.0);

  std::vector<Fold> folds;
  for (int f = 0; f < cfg.n_folds; ++f) {
    Rng rng(substream_seed(seed, "folds", static_cast<std::uint64_t>(f)));
    Fold fold;
    auto ctl = split_role(controls, cfg.control_train_fraction, t1, t2, rng);
    fold.train_controls = std::move(ctl.train);
    fold.test_controls = std::move(ctl.test);
    if (!patients.empty()) {
      auto pat = split_role(patients, cfg.patient_train_fraction, t1, t2, rng);
      fold.train_patients = std::move(pat.train);
      fold.test_patients = std::move(pat.test);
    }
    if (fold.train_controls.empty() || fold.test_controls.empty())
      throw std::runtime_error("make_folds: fold " + std::to_string(f) +
                               " has an empty control split; not enough controls");
    if (!patients.empty() && fold.test_patients.empty())
      throw std::runtime_error("make_folds: fold " + std::to_string(f) +
                               " has no test patients; lower patient_train_fraction");
    folds.push_back(std::move(fold));
  }
  return folds;
}

std::vector<SubjectMeta> parse_metadata_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("metadata CSV: empty file");
  if (line.rfind("id,label,age,sex", 0) != 0)
    throw std::runtime_error("metadata CSV: expected header \"id,label,age,sex\", got \"" + line +
                             "\"");
  std::vector<SubjectMeta> subjects;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id, label, age, sex;
    if (!std::getline(row, id, ',') || !std::getline(row, label, ',') ||
        !std::getline(row, age, ',') || !std::getline(row, sex, ','))
      throw std::runtime_error("metadata CSV: malformed row \"" + line + "\"");
    SubjectMeta m;
    m.id = id;
    m.label = parse_label(label);
    m.age = std::stod(age);
    if (sex != "M" && sex != "F")
      throw std::runtime_error("metadata CSV: sex must be M or F, got \"" + sex + "\"");
    m.sex = sex[0];
    subjects.push_back(std::move(m));
  }
  return subjects;
}

std::string metadata_csv(const std::vector<SubjectMeta>& subjects) {
  std::ostringstream out;
  out << "id,label,age,sex\n";
  for (const auto& s : subjects)
    out << s.id << "," << label_name(s.label) << "," << s.age << "," << s.sex << "\n";
  return out.str();
}

}  // namespace uad
