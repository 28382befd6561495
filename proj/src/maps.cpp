#include "uad/maps.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "uad/parallel.hpp"
#include "uad/patching.hpp"

namespace uad {

namespace {

template <typename ScoreFn>
AnomalyMap score_locations(const SaeModel& m, const Volume& v,
                           const std::vector<Eigen::Vector3i>& locations, ScoreFn&& fn) {
  if (m.input.c != v.channels())
    throw std::invalid_argument("score map: model expects " + std::to_string(m.input.c) +
                                " channels, volume has " + std::to_string(v.channels()));
  AnomalyMap map(v.nx(), v.ny(), v.nz());
  const int p = m.input.h;
  parallel_for(static_cast<std::int64_t>(locations.size()), [&](std::int64_t i) {
    const auto& loc = locations[static_cast<std::size_t>(i)];
    const Patch patch = extract_patch(v, loc, p);
    map.scores[map.index(loc.x(), loc.y(), loc.z())] = fn(patch);
  });
  for (const auto& loc : locations) map.valid.set(loc.x(), loc.y(), loc.z(), true);
  return map;
}

}  // namespace

AnomalyMap recon_error_map(const SaeModel& m, const Volume& v,
                           const std::vector<Eigen::Vector3i>& locations) {
  return score_locations(m, v, locations,
                         [&](const Patch& patch) { return recon_error(m, patch.window); });
}

AnomalyMap latent_score_map(const OcsvmEnsemble& scorer, const SaeModel& m, const Volume& v,
                            const std::vector<Eigen::Vector3i>& locations) {
  if (!scorer.models.empty() && scorer.models.front().support_vectors.cols() != m.latent_dim())
    throw std::invalid_argument("latent_score_map: scorer dimension " +
                                std::to_string(scorer.models.front().support_vectors.cols()) +
                                " != latent dimension " + std::to_string(m.latent_dim()));
  return score_locations(
      m, v, locations, [&](const Patch& patch) { return anomaly_score(scorer, encode(m, patch)); });
}

AnomalyMap latent_score_map(const MmstParams& scorer, const SaeModel& m, const Volume& v,
                            const std::vector<Eigen::Vector3i>& locations) {
  if (scorer.dim() != m.latent_dim())
    throw std::invalid_argument("latent_score_map: scorer dimension " +
                                std::to_string(scorer.dim()) + " != latent dimension " +
                                std::to_string(m.latent_dim()));
  return score_locations(
      m, v, locations, [&](const Patch& patch) { return anomaly_score(scorer, encode(m, patch)); });
}

double abnormality_threshold(const std::vector<AnomalyMap>& train_maps, double q) {
  if (!(q >= 0.90 && q < 1.0))
    throw std::invalid_argument("abnormality_threshold: q must be in [0.90, 1.0), got " +
                                std::to_string(q));
  std::vector<double> pooled;
  for (const auto& map : train_maps)
    for (Eigen::Index i = 0; i < map.scores.size(); ++i)
      if (map.valid.in[i]) pooled.push_back(map.scores[i]);
  if (pooled.empty())
    throw std::runtime_error("abnormality_threshold: no valid scores in the training maps");
  return interpolated_quantile(std::move(pooled), q);
}

VoxelMask binarize(const AnomalyMap& map, double threshold) {
  VoxelMask out(map.nx, map.ny, map.nz);
  out.in = map.valid.in && (map.scores.array() > threshold);
  return out;
}

const RegionRow* RegionReport::find(int label) const {
  for (const auto& row : rows)
    if (row.label == label) return &row;
  return nullptr;
}

RegionReport region_aggregate(const VoxelMask& abnormal, const VoxelMask& valid,
                              const LabelAtlas& atlas) {
  if (abnormal.nx != atlas.nx || abnormal.ny != atlas.ny || abnormal.nz != atlas.nz ||
      !abnormal.same_dims(valid))
    throw std::invalid_argument("region_aggregate: dims mismatch between map and atlas");

  RegionReport report;
  RegionRow whole;
  whole.label = 0;
  whole.name = "whole_brain";
  std::map<int, RegionRow> rows;
  for (const auto& [id, name] : atlas.names) {
    RegionRow row;
    row.label = id;
    row.name = name;
    rows[id] = row;
  }

  for (Eigen::Index i = 0; i < atlas.labels.size(); ++i) {
    if (!valid.in[i]) continue;
    const bool abn = abnormal.in[i];
    ++whole.n_voxels;
    whole.n_abnormal += abn;
    const int label = atlas.labels[i];
    if (label != 0) {
      auto it = rows.find(label);
      if (it != rows.end()) {
        ++it->second.n_voxels;
        it->second.n_abnormal += abn;
      }
    }
  }

  const auto finish = [](RegionRow& row) {
    if (row.n_voxels > 0)
      row.pct = 100.0 * static_cast<double>(row.n_abnormal) / static_cast<double>(row.n_voxels);
  };
  finish(whole);
  report.rows.push_back(std::move(whole));
  for (auto& [id, row] : rows) {
    finish(row);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string region_report_csv(const RegionReport& report) {
  std::ostringstream out;
  out.precision(12);
  out << "label,name,n_voxels,n_abnormal,pct\n";
  for (const auto& row : report.rows) {
    out << row.label << "," << row.name << "," << row.n_voxels << "," << row.n_abnormal << ",";
    if (row.pct)
      out << *row.pct;
    else
      out << "NA";
    out << "\n";
  }
  return out.str();
}

RegionReport parse_region_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("label,name,n_voxels,n_abnormal,pct", 0) != 0)
    throw std::runtime_error("region report CSV: bad header");
  RegionReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row_in(line);
    std::string label, name, nvox, nabn, pct;
    if (!std::getline(row_in, label, ',') || !std::getline(row_in, name, ',') ||
        !std::getline(row_in, nvox, ',') || !std::getline(row_in, nabn, ',') ||
        !std::getline(row_in, pct))
      throw std::runtime_error("region report CSV: malformed row \"" + line + "\"");
    RegionRow row;
    row.label = std::stoi(label);
    row.name = name;
    row.n_voxels = std::stoll(nvox);
    row.n_abnormal = std::stoll(nabn);
    if (pct != "NA") row.pct = std::stod(pct);
    report.rows.push_back(std::move(row));
  }
  return report;
}

void save_anomaly_map(const AnomalyMap& map, const std::filesystem::path& path) {
  Volume v(map.nx, map.ny, map.nz, 2);
  v.data().row(0) = map.scores.transpose();
  v.data().row(1) = map.valid.in.cast<double>().transpose();
  write_raw_file(v, path);
}

AnomalyMap load_anomaly_map(const std::filesystem::path& path) {
  const Volume v = read_raw_file(path);
  if (v.channels() != 2)
    throw std::runtime_error(path.string() + ": anomaly map container must have 2 channels");
  AnomalyMap map(v.nx(), v.ny(), v.nz());
  map.scores = v.data().row(0).transpose();
  map.valid.in = v.data().row(1).transpose().array() != 0.0;
  return map;
}

}  // namespace uad
