#include "uad/phantom.hpp"

#include <cmath>
#include <stdexcept>

#include "uad/rng.hpp"

namespace uad {

namespace {

bool inside_ellipsoid(const PhantomSpec& spec, double x, double y, double z, double scale = 1.0) {
  const double cx = 0.5 * (spec.nx - 1), cy = 0.5 * (spec.ny - 1), cz = 0.5 * (spec.nz - 1);
  const double ax = scale * spec.foreground_semiaxis_frac.x() * spec.nx;
  const double ay = scale * spec.foreground_semiaxis_frac.y() * spec.ny;
  const double az = scale * spec.foreground_semiaxis_frac.z() * spec.nz;
  const double dx = (x - cx) / ax, dy = (y - cy) / ay, dz = (z - cz) / az;
  return dx * dx + dy * dy + dz * dz <= 1.0;
}

// separable Gaussian blur along one axis, kernel normalized to unit l2 norm
// so white-noise variance is preserved
void blur_axis(Eigen::VectorXd& field, int nx, int ny, int nz, int axis, double kernel_std) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * kernel_std)));
  Eigen::VectorXd kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i)
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (kernel_std * kernel_std));
  kernel /= kernel.norm();

  const auto idx = [&](int x, int y, int z) {
    return static_cast<std::int64_t>(x) + static_cast<std::int64_t>(nx) * (y + static_cast<std::int64_t>(ny) * z);
  };
  Eigen::VectorXd out(field.size());
  const int dims[3] = {nx, ny, nz};
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        double acc = 0.0;
        const int pos[3] = {x, y, z};
        for (int k = -radius; k <= radius; ++k) {
          int q[3] = {x, y, z};
          q[axis] = pos[axis] + k;
          if (q[axis] < 0 || q[axis] >= dims[axis]) continue;  // zero boundary
          acc += kernel[k + radius] * field[idx(q[0], q[1], q[2])];
        }
        out[idx(x, y, z)] = acc;
      }
  field = std::move(out);
}

}  // namespace

PhantomVolume generate_normal(const PhantomSpec& spec) {
  Eigen::VectorXd base = spec.base_intensity;
  if (base.size() == 0) base = Eigen::VectorXd::Ones(spec.channels);
  if (base.size() != spec.channels)
    throw std::invalid_argument("phantom: base_intensity size must match channels");
  if (spec.correlation_length_vox <= 0)
    throw std::invalid_argument("phantom: correlation length must be positive");

  Volume v(spec.nx, spec.ny, spec.nz, spec.channels, spec.voxel_size_mm);
  VoxelMask fg(spec.nx, spec.ny, spec.nz);
  for (int z = 0; z < spec.nz; ++z)
    for (int y = 0; y < spec.ny; ++y)
      for (int x = 0; x < spec.nx; ++x)
        fg.set(x, y, z, inside_ellipsoid(spec, x, y, z));

  // smoothed white noise has autocorrelation exp(-tau^2 / (4 s^2)); a kernel
  // std of L/2 puts the 1/e lag at L
  const double kernel_std = 0.5 * spec.correlation_length_vox;
  for (int c = 0; c < spec.channels; ++c) {
    Rng rng(substream_seed(spec.seed, "phantom-noise", static_cast<std::uint64_t>(c)));
    Eigen::VectorXd noise(v.num_voxels());
    for (std::int64_t i = 0; i < noise.size(); ++i) noise[i] = spec.noise_sigma * rng.normal();
    if (spec.noise_sigma > 0) {
      blur_axis(noise, spec.nx, spec.ny, spec.nz, 0, kernel_std);
      blur_axis(noise, spec.nx, spec.ny, spec.nz, 1, kernel_std);
      blur_axis(noise, spec.nx, spec.ny, spec.nz, 2, kernel_std);
    }
    for (std::int64_t i = 0; i < noise.size(); ++i)
      v.data()(c, i) = fg.in[i] ? base[c] + noise[i] : 0.0;
  }
  return {std::move(v), std::move(fg)};
}

InjectedAnomaly inject_anomaly(const Volume& v, const VoxelMask& foreground,
                               const PhantomSpec& spec, const AnomalySpec& anomaly) {
  if (anomaly.radius_vox < 0) throw std::invalid_argument("anomaly: radius must be >= 0");
  InjectedAnomaly out{v, VoxelMask(v.nx(), v.ny(), v.nz())};
  const double R = anomaly.radius_vox;
  const double delta = anomaly.contrast_sigma * spec.noise_sigma;

  const int x0 = std::max(0, static_cast<int>(std::floor(anomaly.center.x() - R)));
  const int x1 = std::min(v.nx() - 1, static_cast<int>(std::ceil(anomaly.center.x() + R)));
  const int y0 = std::max(0, static_cast<int>(std::floor(anomaly.center.y() - R)));
  const int y1 = std::min(v.ny() - 1, static_cast<int>(std::ceil(anomaly.center.y() + R)));
  const int z0 = std::max(0, static_cast<int>(std::floor(anomaly.center.z() - R)));
  const int z1 = std::min(v.nz() - 1, static_cast<int>(std::ceil(anomaly.center.z() + R)));

  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - anomaly.center.x(), dy = y - anomaly.center.y(),
                     dz = z - anomaly.center.z();
        const double r2 = dx * dx + dy * dy + dz * dz;
        if (r2 >= R * R) continue;
        if (!foreground.at(x, y, z))
          throw std::runtime_error("anomaly: sphere leaves the foreground at (" +
                                   std::to_string(x) + "," + std::to_string(y) + "," +
                                   std::to_string(z) + ")");
        const double taper = 1.0 - r2 / (R * R);
        out.affected.set(x, y, z, true);
        for (int c = 0; c < v.channels(); ++c) out.volume.at(x, y, z, c) += delta * taper;
      }
  return out;
}

AnomalySpec place_anomaly(const PhantomSpec& spec, double radius_vox, double contrast_sigma,
                          std::uint64_t seed) {
  Rng rng(substream_seed(seed, "anomaly-center"));
  const double cx = 0.5 * (spec.nx - 1), cy = 0.5 * (spec.ny - 1), cz = 0.5 * (spec.nz - 1);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const double x = cx + (rng.uniform() - 0.5) * spec.nx * 0.5;
    const double y = cy + (rng.uniform() - 0.5) * spec.ny * 0.5;
    const double z = cz + (rng.uniform() - 0.5) * spec.nz * 0.5;
    // keep the whole sphere inside the foreground with one voxel to spare
    bool ok = true;
    for (const double sx : {-1.0, 1.0})
      for (const double sy : {-1.0, 1.0})
        for (const double sz : {-1.0, 1.0})
          ok = ok && inside_ellipsoid(spec, x + sx * (radius_vox + 1), y + sy * (radius_vox + 1),
                                      z + sz * (radius_vox + 1));
    if (ok) return {Eigen::Vector3d(x, y, z), radius_vox, contrast_sigma};
  }
  throw std::runtime_error("anomaly: could not place a radius-" + std::to_string(radius_vox) +
                           " sphere inside the foreground");
}

LabelAtlas phantom_atlas(const PhantomSpec& spec) {
  Volume labels(spec.nx, spec.ny, spec.nz, 1, spec.voxel_size_mm);
  for (int z = 0; z < spec.nz; ++z)
    for (int y = 0; y < spec.ny; ++y)
      for (int x = 0; x < spec.nx; ++x) {
        int label = 0;
        if (inside_ellipsoid(spec, x, y, z)) {
          if (inside_ellipsoid(spec, x, y, z, 0.55))
            label = 1;
          else
            label = x < 0.5 * (spec.nx - 1) ? 2 : 3;
        }
        labels.at(x, y, z, 0) = label;
      }
  return make_label_atlas(labels, "1\tcore\n2\tleft_shell\n3\tright_shell\n");
}

}  // namespace uad
