#include "reconuq/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "reconuq/errors.hpp"
#include "reconuq/rng.hpp"
#include "reconuq/uqt1.hpp"

namespace reconuq {

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"n_id", s.n_id},   {"n_ood", s.n_ood}, {"shape", s.shape},
                     {"seed", s.seed},   {"sigma", s.sigma}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s.n_id = j.value("n_id", s.n_id);
  s.n_ood = j.value("n_ood", s.n_ood);
  s.shape = j.value("shape", s.shape);
  s.seed = j.value("seed", s.seed);
  s.sigma = j.value("sigma", s.sigma);
}

void DatasetSpec::validate() const {
  if (n_id < 12) throw SpecInvalid("n_id must be >= 12 to support the CV splits");
  if (n_ood < 0) throw SpecInvalid("n_ood must be >= 0");
  if (shape.empty()) throw SpecInvalid("shape must have at least one axis");
  for (int d : shape)
    if (d < 32) throw SpecInvalid("every shape axis must be >= 32");
  if (!(sigma > 0.0)) throw SpecInvalid("sigma must be positive");
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D lower-envelope pass of the exact squared distance transform.
void dt1d(const double* f, double* d, int n, std::vector<int>& v,
          std::vector<double>& z) {
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n) + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s = -kInf;
    while (k >= 0) {
      const int p = v[k];
      s = f[p] == kInf
              ? -kInf
              : ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
                    (2.0 * (q - p));
      if (s > z[k]) break;
      --k;
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
    } else {
      ++k;
      v[k] = q;
      z[k] = s;
    }
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const int p = v[k];
    d[q] = f[p] == kInf ? kInf : static_cast<double>(q - p) * (q - p) + f[p];
  }
}

}  // namespace

Tensor<double> squared_distance_transform(const Mask& seeds) {
  Tensor<double> d(seeds.shape);
  for (std::int64_t i = 0; i < seeds.size(); ++i)
    d.data[i] = seeds.data[i] ? 0.0 : kInf;

  const int rank = seeds.rank();
  const auto strides = strides_of(seeds.shape);
  std::vector<double> line, out;
  std::vector<int> v;
  std::vector<double> z;

  for (int axis = 0; axis < rank; ++axis) {
    const int n = seeds.shape[axis];
    const std::int64_t stride = strides[axis];
    line.resize(static_cast<std::size_t>(n));
    out.resize(static_cast<std::size_t>(n));

    // Iterate over every line parallel to `axis`.
    std::vector<int> shape_rest;
    std::vector<std::int64_t> strides_rest;
    for (int a = 0; a < rank; ++a) {
      if (a == axis) continue;
      shape_rest.push_back(seeds.shape[a]);
      strides_rest.push_back(strides[a]);
    }
    if (shape_rest.empty()) {
      shape_rest.push_back(1);
      strides_rest.push_back(0);
    }
    std::vector<int> idx(shape_rest.size(), 0);
    do {
      std::int64_t base = 0;
      for (std::size_t a = 0; a < idx.size(); ++a) base += idx[a] * strides_rest[a];
      for (int q = 0; q < n; ++q) line[static_cast<std::size_t>(q)] = d.data[base + q * stride];
      dt1d(line.data(), out.data(), n, v, z);
      for (int q = 0; q < n; ++q) d.data[base + q * stride] = out[static_cast<std::size_t>(q)];
    } while (advance_index(idx, shape_rest));
  }
  return d;
}

namespace {

// Reference density: depth is measured in water-equivalent voxels, so a
// uniform 0.45 medium makes effective and geometric distance coincide.
constexpr double kWaterDensity = 0.45;
constexpr double kRayStep = 0.5;

std::vector<double> mask_centroid(const Mask& m) {
  std::vector<double> c(m.shape.size(), 0.0);
  std::int64_t n = 0;
  std::vector<int> idx(m.shape.size(), 0);
  const auto strides = strides_of(m.shape);
  do {
    std::int64_t flat = 0;
    for (std::size_t a = 0; a < idx.size(); ++a) flat += idx[a] * strides[a];
    if (!m.data[flat]) continue;
    for (std::size_t a = 0; a < idx.size(); ++a) c[a] += idx[a];
    ++n;
  } while (advance_index(idx, m.shape));
  for (auto& v : c) v /= static_cast<double>(n);
  return c;
}

// Water-equivalent thickness of the tissue between the target surface and the
// voxel `to`: midpoint rule along the straight segment from `from` with
// nearest-voxel lookup. The running sum resets at every sample still inside
// the target, so only tissue past the last target crossing counts and the
// target interior has depth exactly 0.
double effective_depth(const Volume& ct, const Mask& target,
                       const std::vector<double>& from, const std::vector<int>& to,
                       const std::vector<std::int64_t>& strides) {
  const std::size_t rank = from.size();
  double len2 = 0.0;
  for (std::size_t a = 0; a < rank; ++a) {
    const double d = to[a] - from[a];
    len2 += d * d;
  }
  const double len = std::sqrt(len2);
  if (len == 0.0) return 0.0;

  double depth = 0.0;
  double pos = 0.0;
  while (pos < len) {
    const double w = std::min(kRayStep, len - pos);
    const double t = (pos + 0.5 * w) / len;
    std::int64_t flat = 0;
    bool inside = true;
    for (std::size_t a = 0; a < rank; ++a) {
      const int q =
          static_cast<int>(std::lround(from[a] + t * (to[a] - from[a])));
      if (q < 0 || q >= ct.shape[a]) {
        inside = false;
        break;
      }
      flat += q * strides[a];
    }
    if (inside && target.data[flat])
      depth = 0.0;
    else if (inside)
      depth += w * ct.data[flat] / kWaterDensity;
    pos += w;
  }
  return depth;
}

}  // namespace

Volume analytic_dose(const Sample& s, double sigma) {
  bool any_high = false, any_low = false;
  for (std::int64_t i = 0; i < s.tv_high.size(); ++i) any_high |= s.tv_high.data[i] != 0;
  for (std::int64_t i = 0; i < s.tv_low.size(); ++i) any_low |= s.tv_low.data[i] != 0;
  if (!any_high || !any_low) throw EmptyTarget("analytic_dose: empty target mask");

  const auto high_c = mask_centroid(s.tv_high);
  const auto low_c = mask_centroid(s.tv_low);

  Volume dose(s.ct.shape);
  dose.spacing = s.ct.spacing;
  const auto strides = strides_of(s.ct.shape);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  std::vector<int> idx(s.ct.shape.size(), 0);
  do {
    std::int64_t flat = 0;
    for (std::size_t a = 0; a < idx.size(); ++a) flat += idx[a] * strides[a];
    if (!s.body.data[flat]) continue;
    const double dh = effective_depth(s.ct, s.tv_high, high_c, idx, strides);
    const double dl = effective_depth(s.ct, s.tv_low, low_c, idx, strides);
    const double high = s.rx_high * std::exp(-dh * dh * inv);
    const double low = s.rx_low * std::exp(-dl * dl * inv);
    dose.data[flat] = static_cast<float>(std::max(high, low));
  } while (advance_index(idx, s.ct.shape));
  return dose;
}

namespace {

// Geometry fractions are relative to the smallest axis so ID targets sit
// deep inside the body and the falloff reaches near-zero before the rim.
struct BodyGeom {
  std::vector<double> center;     // voxel coordinates of the body center
  std::vector<double> semi_axes;  // per-axis ellipsoid semi-axes
};

double norm_radius(const std::vector<int>& x, const BodyGeom& g) {
  double r2 = 0.0;
  for (std::size_t a = 0; a < x.size(); ++a) {
    const double t = (x[a] - g.center[a]) / g.semi_axes[a];
    r2 += t * t;
  }
  return std::sqrt(r2);
}

Mask ball_mask(const std::vector<int>& shape, const std::vector<double>& center,
               double radius) {
  Mask m(shape);
  std::vector<int> idx(shape.size(), 0);
  const auto strides = strides_of(shape);
  do {
    double r2 = 0.0;
    for (std::size_t a = 0; a < idx.size(); ++a) {
      const double t = idx[a] - center[a];
      r2 += t * t;
    }
    if (r2 <= radius * radius) {
      std::int64_t flat = 0;
      for (std::size_t a = 0; a < idx.size(); ++a) flat += idx[a] * strides[a];
      m.data[flat] = 1;
    }
  } while (advance_index(idx, shape));
  return m;
}

std::vector<double> unit_direction(Rng& rng, int rank) {
  std::vector<double> u(static_cast<std::size_t>(rank));
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (auto& c : u) {
      c = rng.normal();
      n2 += c * c;
    }
  } while (n2 < 1e-12);
  const double inv = 1.0 / std::sqrt(n2);
  for (auto& c : u) c *= inv;
  return u;
}

}  // namespace

Sample generate_sample(const DatasetSpec& spec, Family family, int index) {
  spec.validate();
  const int rank = static_cast<int>(spec.shape.size());
  const double min_shape = *std::min_element(spec.shape.begin(), spec.shape.end());
  Rng rng(mix64(spec.seed, family == Family::kId ? 1 : 2, static_cast<std::uint64_t>(index)));

  Sample s;
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%03d", family_name(family), index);
    s.id = buf;
  }
  s.family = family;

  BodyGeom body;
  body.center.resize(static_cast<std::size_t>(rank));
  body.semi_axes.resize(static_cast<std::size_t>(rank));
  for (int a = 0; a < rank; ++a) body.center[a] = spec.shape[a] / 2.0;
  if (family == Family::kId) {
    for (int a = 0; a < rank; ++a)
      body.semi_axes[a] = rng.uniform(0.42, 0.46) * min_shape;
  } else {
    // Elongated along axis 0, narrow elsewhere.
    body.semi_axes[0] = rng.uniform(0.44, 0.47) * min_shape;
    for (int a = 1; a < rank; ++a)
      body.semi_axes[a] = rng.uniform(0.26, 0.32) * min_shape;
  }

  // Target geometry. ID targets sit above the body center, OOD targets below;
  // the axis-0 offset ranges have opposite signs, so the families' target
  // center coordinates are disjoint by construction.
  const double r_high = rng.uniform(0.060, 0.070) * min_shape;
  const double r_low = r_high + rng.uniform(0.030, 0.050) * min_shape;
  const double offset0 = family == Family::kId
                             ? -rng.uniform(0.040, 0.065) * min_shape
                             : rng.uniform(0.100, 0.150) * min_shape;
  std::vector<double> tv_center = body.center;
  tv_center[0] += offset0;

  s.tv_high = ball_mask(spec.shape, tv_center, r_high);
  s.tv_low = ball_mask(spec.shape, tv_center, r_low);

  // OARs: disks ringed around the low target, just outside it.
  const int n_oars = 3;
  for (int k = 0; k < n_oars; ++k) {
    const double r_oar = rng.uniform(0.040, 0.060) * min_shape;
    const double dist = r_low + r_oar + rng.uniform(1.0, 2.5);
    auto dir = unit_direction(rng, rank);
    std::vector<double> c = tv_center;
    for (int a = 0; a < rank; ++a) c[a] += dist * dir[a];
    char buf[16];
    std::snprintf(buf, sizeof(buf), "oar_%d", k + 1);
    s.oars.emplace_back(buf, ball_mask(spec.shape, c, r_oar));
  }

  // Per-patient texture energy: scales the waves, the density blobs and the
  // voxel noise, so patients span a shared difficulty spectrum. High-energy
  // patients have more texture to reconstruct, a higher noise floor no model
  // can remove, and stronger attenuation anomalies to dose.
  const double texture = rng.uniform(0.7, 1.5);
  const double noise_amp = 0.009 * texture;

  // Smooth CT texture: plane cosine waves plus voxel noise.
  struct Wave {
    double amp, freq, phase;
    std::vector<double> dir;
  };
  std::vector<Wave> waves;
  const int n_waves = rng.range(3, 6);
  for (int w = 0; w < n_waves; ++w) {
    Wave wave;
    wave.amp = texture * rng.uniform(0.025, 0.060);
    wave.freq = 2.0 * std::numbers::pi / rng.uniform(8.0, 28.0);
    wave.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    wave.dir = unit_direction(rng, rank);
    waves.push_back(std::move(wave));
  }

  // Broad density blobs give each patient a nonzero-mean tissue layout. The
  // waves integrate to nearly nothing along a ray, so without blobs every
  // patient would attenuate identically and the dose field would carry no
  // patient-specific density signal.
  struct Blob {
    std::vector<double> center;
    double radius, amp;
  };
  std::vector<Blob> blobs;
  {
    const int n_blobs = rng.range(2, 4);
    for (int k = 0; k < n_blobs; ++k) {
      Blob b;
      b.radius = rng.uniform(0.10, 0.20) * min_shape;
      b.amp = texture * rng.uniform(-0.14, 0.17);
      const double rn = rng.uniform(0.0, 0.7);
      auto dir = unit_direction(rng, rank);
      b.center = body.center;
      for (int a = 0; a < rank; ++a) b.center[a] += rn * body.semi_axes[a] * dir[a];
      blobs.push_back(std::move(b));
    }
  }

  // Cavities make the OOD CTs structurally unlike anything in the ID family.
  struct Cavity {
    std::vector<double> center;
    double radius;
  };
  std::vector<Cavity> cavities;
  if (family == Family::kOod) {
    const int n_cav = rng.range(3, 5);
    for (int k = 0; k < n_cav; ++k) {
      Cavity cav;
      cav.radius = rng.uniform(0.060, 0.110) * min_shape;
      const double rn = rng.uniform(0.15, 0.55);
      auto dir = unit_direction(rng, rank);
      cav.center = body.center;
      for (int a = 0; a < rank; ++a)
        cav.center[a] += rn * body.semi_axes[a] * dir[a];
      cavities.push_back(std::move(cav));
    }
  }

  s.body = Mask(spec.shape);
  s.ct = Volume(spec.shape);

  const auto strides = strides_of(spec.shape);
  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  do {
    std::int64_t flat = 0;
    for (int a = 0; a < rank; ++a) flat += idx[a] * strides[a];
    const float noise = static_cast<float>(rng.uniform(-noise_amp, noise_amp));

    const double rn = norm_radius(idx, body);
    if (rn > 1.0) continue;  // outside body: ct stays 0
    s.body.data[flat] = 1;

    double v = 0.45;
    for (const auto& w : waves) {
      double t = 0.0;
      for (int a = 0; a < rank; ++a) t += idx[a] * w.dir[a];
      v += w.amp * std::cos(w.freq * t + w.phase);
    }
    for (const auto& b : blobs) {
      double r2 = 0.0;
      for (int a = 0; a < rank; ++a) {
        const double t = idx[a] - b.center[a];
        r2 += t * t;
      }
      v += b.amp * std::exp(-r2 / (2.0 * b.radius * b.radius));
    }
    v += noise;
    if (rn >= 0.88) v = 0.90;  // bone-like annulus at the body rim
    for (const auto& cav : cavities) {
      double r2 = 0.0;
      for (int a = 0; a < rank; ++a) {
        const double t = idx[a] - cav.center[a];
        r2 += t * t;
      }
      if (r2 <= cav.radius * cav.radius) v = 0.05;
    }
    s.ct.data[flat] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  } while (advance_index(idx, spec.shape));

  // Masks are defined as intersections with the body.
  auto clip = [&](Mask& m) {
    for (std::int64_t i = 0; i < m.size(); ++i) m.data[i] &= s.body.data[i];
  };
  clip(s.tv_high);
  clip(s.tv_low);
  for (auto& [name, m] : s.oars) {
    (void)name;
    clip(m);
  }

  if (family == Family::kId) s.dose = analytic_dose(s, spec.sigma);
  return s;
}

std::vector<Sample> generate(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.n_id + spec.n_ood));
  for (int i = 0; i < spec.n_id; ++i) out.push_back(generate_sample(spec, Family::kId, i));
  for (int i = 0; i < spec.n_ood; ++i) out.push_back(generate_sample(spec, Family::kOod, i));

  // The families' axis-0 target-center ranges must not touch.
  double id_max = -kInf, ood_min = kInf;
  for (const auto& s : out) {
    double centroid = 0.0;
    std::int64_t n = 0;
    const auto strides = strides_of(s.ct.shape);
    for (std::int64_t i = 0; i < s.tv_high.size(); ++i) {
      if (!s.tv_high.data[i]) continue;
      centroid += static_cast<double>(i / strides[0]);
      ++n;
    }
    centroid /= static_cast<double>(n);
    if (s.family == Family::kId) id_max = std::max(id_max, centroid);
    else ood_min = std::min(ood_min, centroid);
  }
  if (spec.n_ood > 0 && !(id_max < ood_min))
    throw SpecInvalid("generated ID and OOD target ranges overlap");
  return out;
}

void save_sample(const Sample& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_uqt1(dir / "ct.uqt1", s.ct, "ct");
  write_uqt1(dir / "body.uqt1", s.body, "mask");
  write_uqt1(dir / "tv_high.uqt1", s.tv_high, "mask");
  write_uqt1(dir / "tv_low.uqt1", s.tv_low, "mask");
  for (const auto& [name, m] : s.oars) write_uqt1(dir / (name + ".uqt1"), m, "mask");
  if (s.dose) write_uqt1(dir / "dose.uqt1", *s.dose, "dose");

  nlohmann::json meta;
  meta["id"] = s.id;
  meta["family"] = family_name(s.family);
  meta["prescriptions"] = {{"tv_high", s.rx_high}, {"tv_low", s.rx_low}};
  nlohmann::json oars = nlohmann::json::array();
  for (const auto& [name, m] : s.oars) {
    (void)m;
    oars.push_back(name);
  }
  meta["oars"] = oars;
  meta["spacing"] = s.ct.spacing;
  std::ofstream out(dir / "meta.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << "\n";
}

Sample load_sample(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json", std::ios::binary);
  if (!in) throw IoError("cannot read " + (dir / "meta.json").string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad meta.json in " + dir.string() + ": " + e.what());
  }

  Sample s;
  s.id = meta.at("id").get<std::string>();
  const std::string fam = meta.at("family").get<std::string>();
  if (fam == family_name(Family::kId)) s.family = Family::kId;
  else if (fam == family_name(Family::kOod)) s.family = Family::kOod;
  else throw IoError("unknown family '" + fam + "' in " + dir.string());
  s.rx_high = meta.at("prescriptions").at("tv_high").get<double>();
  s.rx_low = meta.at("prescriptions").at("tv_low").get<double>();

  const auto spacing = meta.value("spacing", std::vector<float>{});

  auto load_volume = [&](const char* name) {
    Volume v;
    static_cast<Tensor<float>&>(v) = read_uqt1_f32(dir / name);
    v.spacing = spacing.empty() ? std::vector<float>(v.shape.size(), 1.0f) : spacing;
    return v;
  };
  s.ct = load_volume("ct.uqt1");
  s.body = read_uqt1_u8(dir / "body.uqt1");
  s.tv_high = read_uqt1_u8(dir / "tv_high.uqt1");
  s.tv_low = read_uqt1_u8(dir / "tv_low.uqt1");
  for (const auto& name : meta.at("oars").get<std::vector<std::string>>())
    s.oars.emplace_back(name, read_uqt1_u8(dir / (name + ".uqt1")));
  if (std::filesystem::exists(dir / "dose.uqt1")) s.dose = load_volume("dose.uqt1");
  return s;
}

std::vector<Sample> load_dataset(const std::filesystem::path& data_dir) {
  if (!std::filesystem::is_directory(data_dir))
    throw IoError("dataset directory not found: " + data_dir.string() +
                  " (run gen-data first)");
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(data_dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<Sample> samples;
  samples.reserve(dirs.size());
  for (const auto& d : dirs) samples.push_back(load_sample(d));
  if (samples.empty()) throw IoError("no samples under " + data_dir.string());
  return samples;
}

}  // namespace reconuq
