#include "uad/patching.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "uad/binary_io.hpp"
#include "uad/rng.hpp"

namespace uad {

void validate_pair(const PatchPair& pair) {
  if (pair.a.location != pair.b.location)
    throw std::invalid_argument("PatchPair: locations differ");
  if (pair.a.subject_id == pair.b.subject_id)
    throw std::invalid_argument("PatchPair: both patches from subject \"" + pair.a.subject_id +
                                "\"");
}

std::vector<Eigen::Vector3i> eligible_locations(const VoxelMask& mask, int margin, int stride) {
  if (margin < 0) throw std::invalid_argument("eligible_locations: margin must be >= 0");
  if (stride < 1) throw std::invalid_argument("eligible_locations: stride must be >= 1");
  std::vector<Eigen::Vector3i> out;
  for (int z = 0; z < mask.nz; ++z)
    for (int y = margin; y < mask.ny - margin; y += stride)
      for (int x = margin; x < mask.nx - margin; x += stride)
        if (mask.at(x, y, z)) out.emplace_back(x, y, z);
  return out;
}

std::vector<Eigen::Vector3i> sample_locations(const VoxelMask& mask, std::int64_t n, int margin,
                                              std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_locations: n must be >= 1");
  const auto eligible = eligible_locations(mask, margin);
  if (eligible.empty())
    throw std::runtime_error("sample_locations: no in-mask voxel at distance >= " +
                             std::to_string(margin) + " from the x/y borders");
  Rng rng(seed);
  std::vector<Eigen::Vector3i> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    out.push_back(eligible[rng.uniform_int(eligible.size())]);
  return out;
}

Patch extract_patch(const Volume& v, const Eigen::Vector3i& loc, int p,
                    const std::string& subject_id) {
  if (p < 1 || p % 2 == 0)
    throw std::invalid_argument("extract_patch: patch side must be odd and positive, got " +
                                std::to_string(p));
  const int h = (p - 1) / 2;
  const int x = loc.x(), y = loc.y(), z = loc.z();
  if (z < 0 || z >= v.nz() || x - h < 0 || x + h >= v.nx() || y - h < 0 || y + h >= v.ny())
    throw std::out_of_range("extract_patch: window of side " + std::to_string(p) + " at (" +
                            std::to_string(x) + "," + std::to_string(y) + "," +
                            std::to_string(z) + ") exceeds volume bounds");

  Patch patch;
  patch.location = loc;
  patch.subject_id = subject_id;
  patch.window.assign(static_cast<std::size_t>(v.channels()), Eigen::MatrixXd(p, p));
  for (int c = 0; c < v.channels(); ++c)
    for (int wy = 0; wy < p; ++wy)
      for (int wx = 0; wx < p; ++wx)
        patch.window[c](wy, wx) = v.at(x - h + wx, y - h + wy, z, c);
  return patch;
}

std::vector<PatchPair> sample_pairs(const std::vector<Volume>& volumes,
                                    const std::vector<std::string>& subject_ids,
                                    const std::vector<VoxelMask>& masks, std::int64_t n_pairs,
                                    int p, std::uint64_t seed) {
  const std::size_t S = volumes.size();
  if (S < 2) throw std::invalid_argument("sample_pairs: need at least 2 subjects");
  if (subject_ids.size() != S || masks.size() != S)
    throw std::invalid_argument("sample_pairs: volumes, ids and masks must align");

  VoxelMask shared = masks.front();
  for (std::size_t i = 1; i < masks.size(); ++i) {
    if (!shared.same_dims(masks[i]))
      throw std::invalid_argument("sample_pairs: mask dims differ between subjects");
    shared.in = shared.in && masks[i].in;
  }
  const int margin = (p - 1) / 2;
  const auto eligible = eligible_locations(shared, margin);
  if (eligible.empty())
    throw std::runtime_error("sample_pairs: no location eligible in every subject");

  Rng rng(seed);
  std::vector<PatchPair> pairs;
  pairs.reserve(static_cast<std::size_t>(n_pairs));
  for (std::int64_t i = 0; i < n_pairs; ++i) {
    const auto& loc = eligible[rng.uniform_int(eligible.size())];
    const std::size_t sa = rng.uniform_int(S);
    std::size_t sb = rng.uniform_int(S - 1);
    if (sb >= sa) ++sb;
    PatchPair pair{extract_patch(volumes[sa], loc, p, subject_ids[sa]),
                   extract_patch(volumes[sb], loc, p, subject_ids[sb])};
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

namespace {

Volume patch_to_volume(const Patch& patch) {
  const int p = patch.side();
  Volume v(p, p, 1, patch.channels());
  for (int c = 0; c < patch.channels(); ++c)
    for (int wy = 0; wy < p; ++wy)
      for (int wx = 0; wx < p; ++wx) v.at(wx, wy, 0, c) = patch.window[c](wy, wx);
  return v;
}

Patch volume_to_patch(const Volume& v) {
  if (v.nz() != 1 || v.nx() != v.ny())
    throw std::runtime_error("patch container: expected dims (p, p, 1), got " +
                             std::to_string(v.nx()) + "x" + std::to_string(v.ny()) + "x" +
                             std::to_string(v.nz()));
  Patch patch;
  const int p = v.nx();
  patch.window.assign(static_cast<std::size_t>(v.channels()), Eigen::MatrixXd(p, p));
  for (int c = 0; c < v.channels(); ++c)
    for (int wy = 0; wy < p; ++wy)
      for (int wx = 0; wx < p; ++wx) patch.window[c](wy, wx) = v.at(wx, wy, 0, c);
  return patch;
}

}  // namespace

void write_patches(const std::vector<Patch>& patches, const std::filesystem::path& data_path,
                   const std::filesystem::path& sidecar_tsv_path) {
  std::vector<std::uint8_t> blob;
  std::string tsv;
  for (const auto& patch : patches) {
    const auto bytes = write_raw(patch_to_volume(patch));
    blob.insert(blob.end(), bytes.begin(), bytes.end());
    tsv += patch.subject_id + "\t" + std::to_string(patch.location.x()) + "\t" +
           std::to_string(patch.location.y()) + "\t" + std::to_string(patch.location.z()) + "\n";
  }
  write_file_bytes(data_path, blob);
  write_text_file(sidecar_tsv_path, tsv);
}

std::vector<Patch> read_patches(const std::filesystem::path& data_path,
                                const std::filesystem::path& sidecar_tsv_path) {
  const auto blob = read_file_bytes(data_path);
  std::istringstream sidecar(read_text_file(sidecar_tsv_path));

  std::vector<Patch> patches;
  std::size_t offset = 0;
  std::string line;
  while (offset < blob.size()) {
    // each record is one raw volume container; compute its length from the header
    ByteReader header(blob.data() + offset, blob.size() - offset);
    header.magic4();
    header.u32();
    const std::uint64_t nx = header.u32(), ny = header.u32(), nz = header.u32(),
                        nc = header.u32();
    const std::size_t record = 4 + 4 + 16 + 24 + static_cast<std::size_t>(nx * ny * nz * nc) * 4;
    if (offset + record > blob.size())
      throw std::runtime_error("patch dump: truncated record at offset " +
                               std::to_string(offset));
    std::vector<std::uint8_t> rec(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                                  blob.begin() + static_cast<std::ptrdiff_t>(offset + record));
    Patch patch = volume_to_patch(read_raw(rec));

    if (!std::getline(sidecar, line))
      throw std::runtime_error("patch dump: sidecar TSV has fewer rows than records");
    std::istringstream row(line);
    std::string sid, xs, ys, zs;
    std::getline(row, sid, '\t');
    std::getline(row, xs, '\t');
    std::getline(row, ys, '\t');
    std::getline(row, zs, '\t');
    patch.subject_id = sid;
    patch.location = Eigen::Vector3i(std::stoi(xs), std::stoi(ys), std::stoi(zs));

    patches.push_back(std::move(patch));
    offset += record;
  }
  return patches;
}

}  // namespace uad
