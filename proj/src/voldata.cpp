#include "vseg/voldata.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "vseg/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "case files are little-endian; big-endian hosts are unsupported");

namespace vseg::voldata {

using nlohmann::json;

std::array<OrganSpec, 5> PhantomSpec::default_organs() {
  std::array<OrganSpec, 5> o{};
  // prostate: mid-intensity sphere below the bladder, low contrast vs background
  o[0] = {{0.56, 0.60, 0.50}, {0.04, 0.02, 0.03}, {0.13, 0.12, 0.12}, 0.10, 420.0, 20.0, false};
  // bladder: bright ellipsoid
  o[1] = {{0.42, 0.33, 0.50}, {0.04, 0.02, 0.03}, {0.26, 0.15, 0.17}, 0.08, 780.0, 25.0, false};
  // rectum: low-contrast tube along z
  o[2] = {{0.50, 0.85, 0.50}, {0.00, 0.02, 0.03}, {0.0, 0.065, 0.065}, 0.10, 180.0, 20.0, true};
  // femurs: lateral high-intensity cylinders along z
  o[3] = {{0.50, 0.55, 0.20}, {0.00, 0.03, 0.02}, {0.0, 0.10, 0.10}, 0.08, 900.0, 20.0, true};
  o[4] = {{0.50, 0.55, 0.80}, {0.00, 0.03, 0.02}, {0.0, 0.10, 0.10}, 0.08, 900.0, 20.0, true};
  return o;
}

CtVolume normalize_intensity(const CtVolume& raw, double lo, double hi) {
  check_arg(!raw.normalized, "normalize_intensity: volume is already normalized");
  check_arg(hi > lo, "normalize_intensity: window must be non-empty");
  CtVolume out;
  out.spacing_mm = raw.spacing_mm;
  out.normalized = true;
  out.data = Tensor<float>(raw.data.shape());
  const float flo = float(lo), inv = float(1.0 / (hi - lo));
  for (int64_t i = 0; i < raw.data.size(); ++i) {
    const float v = raw.data[i];
    check_arg(std::isfinite(v), "normalize_intensity: non-finite input value at index " +
                                    std::to_string(i));
    out.data[i] = std::min(1.0f, std::max(0.0f, (v - flo) * inv));
  }
  return out;
}

std::pair<CtVolume, std::optional<LabelMap>> random_crop_subvolume(
    const CtVolume& vol, const std::optional<LabelMap>& labels, int64_t depth, Rng& rng) {
  const int64_t z = vol.depth();
  check_arg(depth >= 1 && depth <= z, "random_crop_subvolume: depth exceeds volume");
  if (labels) {
    check_arg(labels->classes.same_shape(
                  Tensor<uint8_t>({vol.depth(), vol.height(), vol.width()})),
              "random_crop_subvolume: label shape mismatch");
  }
  const int64_t offset = rng.uniform_int(z - depth + 1);
  const int64_t plane = vol.height() * vol.width();
  CtVolume cropped;
  cropped.spacing_mm = vol.spacing_mm;
  cropped.normalized = vol.normalized;
  cropped.data = Tensor<float>({depth, vol.height(), vol.width()});
  std::memcpy(cropped.data.data(), vol.data.data() + offset * plane,
              size_t(depth * plane) * sizeof(float));
  std::optional<LabelMap> lcrop;
  if (labels) {
    LabelMap lm;
    lm.num_classes = labels->num_classes;
    lm.classes = Tensor<uint8_t>({depth, vol.height(), vol.width()});
    std::memcpy(lm.classes.data(), labels->classes.data() + offset * plane,
                size_t(depth * plane));
    lcrop = std::move(lm);
  }
  return {std::move(cropped), std::move(lcrop)};
}

std::pair<CtVolume, std::optional<LabelMap>> random_crop_subvolume(
    const CtVolume& vol, const std::optional<LabelMap>& labels, int64_t depth, uint64_t rng_seed) {
  Rng rng(rng_seed);
  return random_crop_subvolume(vol, labels, depth, rng);
}

std::vector<CtVolume> split_for_inference(const CtVolume& vol, int64_t depth) {
  const int64_t z = vol.depth();
  check_arg(depth >= 1 && z % depth == 0,
            "split_for_inference: volume depth must be divisible by slab depth");
  const int64_t plane = vol.height() * vol.width();
  std::vector<CtVolume> out;
  for (int64_t off = 0; off < z; off += depth) {
    CtVolume piece;
    piece.spacing_mm = vol.spacing_mm;
    piece.normalized = vol.normalized;
    piece.data = Tensor<float>({depth, vol.height(), vol.width()});
    std::memcpy(piece.data.data(), vol.data.data() + off * plane,
                size_t(depth * plane) * sizeof(float));
    out.push_back(std::move(piece));
  }
  return out;
}

OneHotMap stack_predictions(const std::vector<OneHotMap>& chunks) {
  check_arg(!chunks.empty(), "stack_predictions: no chunks");
  const auto& first = chunks.front().data;
  const int64_t c = first.dim(0), h = first.dim(2), w = first.dim(3);
  int64_t ztotal = 0;
  for (const auto& ch : chunks) {
    check_arg(ch.data.dim(0) == c, "stack_predictions: channel count mismatch");
    check_arg(ch.data.dim(2) == h && ch.data.dim(3) == w,
              "stack_predictions: in-plane shape mismatch");
    ztotal += ch.data.dim(1);
  }
  OneHotMap out;
  out.num_classes = chunks.front().num_classes;
  out.data = Tensor<float>({c, ztotal, h, w});
  const int64_t plane = h * w;
  for (int64_t cc = 0; cc < c; ++cc) {
    int64_t zoff = 0;
    for (const auto& ch : chunks) {
      const int64_t zc = ch.data.dim(1);
      std::memcpy(out.data.data() + (cc * ztotal + zoff) * plane,
                  ch.data.data() + cc * zc * plane, size_t(zc * plane) * sizeof(float));
      zoff += zc;
    }
  }
  return out;
}

namespace {

struct PlacedOrgan {
  std::array<double, 3> center;  // voxel units
  std::array<double, 3> radii;   // voxel units (z radius ignored if full_depth)
  double intensity = 0.0;
  bool full_depth = false;

  bool contains(double z, double h, double w, int64_t zdim) const {
    double dz = 0.0;
    if (!full_depth) {
      dz = (z - center[0]) / radii[0];
    } else {
      if (z < -0.5 || z > double(zdim) - 0.5) return false;
    }
    const double dh = (h - center[1]) / radii[1];
    const double dw = (w - center[2]) / radii[2];
    return dz * dz + dh * dh + dw * dw <= 1.0;
  }

  // Conservative overlap test on bounding ellipsoids (sum of radii per axis).
  bool overlaps(const PlacedOrgan& o) const {
    double d2 = 0.0, r2 = 0.0;
    for (int ax = (full_depth || o.full_depth) ? 1 : 0; ax < 3; ++ax) {
      const double d = center[size_t(ax)] - o.center[size_t(ax)];
      const double r = radii[size_t(ax)] + o.radii[size_t(ax)];
      d2 += d * d / (r * r);
      r2 = 1.0;
    }
    return d2 <= r2;
  }
};

}  // namespace

std::pair<CtVolume, LabelMap> generate_phantom(const PhantomSpec& spec) {
  const auto [zd, hd, wd] = spec.grid_shape;
  check_arg(zd >= 8 && hd >= 8 && wd >= 8, "generate_phantom: grid dims must be >= 8");
  Rng rng(spec.seed);

  std::array<PlacedOrgan, 5> placed{};
  bool ok = false;
  for (int attempt = 0; attempt <= spec.max_placement_retries && !ok; ++attempt) {
    for (size_t i = 0; i < 5; ++i) {
      const OrganSpec& os = spec.organs[i];
      PlacedOrgan p;
      p.full_depth = os.full_depth;
      p.intensity = os.mean_intensity + (2.0 * rng.uniform() - 1.0) * os.intensity_jitter;
      const double dims[3] = {double(zd), double(hd), double(wd)};
      for (int ax = 0; ax < 3; ++ax) {
        const double jitter = (2.0 * rng.uniform() - 1.0) * os.center_jitter[size_t(ax)];
        p.center[size_t(ax)] = (os.center[size_t(ax)] + jitter) * dims[ax];
        const double rj = 1.0 + (2.0 * rng.uniform() - 1.0) * os.radii_jitter;
        p.radii[size_t(ax)] = std::max(1.0, os.radii[size_t(ax)] * rj * dims[ax]);
      }
      if (os.full_depth) p.radii[0] = double(zd);  // irrelevant, kept sane
      placed[i] = p;
    }
    ok = true;
    for (size_t i = 0; i < 5 && ok; ++i)
      for (size_t j = i + 1; j < 5 && ok; ++j)
        if (placed[i].overlaps(placed[j])) ok = false;
  }
  check_runtime(ok, "generate_phantom: organ placement collision persisted after retries (seed " +
                        std::to_string(spec.seed) + ")");

  CtVolume vol;
  vol.spacing_mm = spec.spacing_mm;
  vol.normalized = false;
  vol.data = Tensor<float>({zd, hd, wd});
  LabelMap labels;
  labels.num_classes = kNumClasses;
  labels.classes = Tensor<uint8_t>({zd, hd, wd});

  for (int64_t z = 0; z < zd; ++z)
    for (int64_t h = 0; h < hd; ++h)
      for (int64_t w = 0; w < wd; ++w) {
        uint8_t cls = 0;
        double mean = spec.background_intensity;
        for (size_t i = 0; i < 5; ++i) {
          if (placed[i].contains(double(z), double(h), double(w), zd)) {
            cls = uint8_t(i + 1);
            mean = placed[i].intensity;
            break;
          }
        }
        labels.classes.at(z, h, w) = cls;
        const double noise = spec.noise_sigma > 0.0 ? rng.normal() * spec.noise_sigma : 0.0;
        vol.data.at(z, h, w) = float(mean + noise);
      }

  // Every organ must be present with a usable voxel share.
  const int64_t total = zd * hd * wd;
  std::array<int64_t, 6> census{};
  for (int64_t i = 0; i < total; ++i) census[labels.classes[i]]++;
  for (int c = 1; c < kNumClasses; ++c)
    check_runtime(census[size_t(c)] * 1000 >= total,
                  "generate_phantom: organ class " + std::to_string(c) +
                      " occupies under 0.1% of voxels (seed " + std::to_string(spec.seed) + ")");
  return {std::move(vol), std::move(labels)};
}

OneHotMap to_one_hot(const LabelMap& labels) {
  const int c = labels.num_classes;
  const auto& cl = labels.classes;
  OneHotMap out;
  out.num_classes = c;
  out.data = Tensor<float>({c, cl.dim(0), cl.dim(1), cl.dim(2)});
  const int64_t vox = cl.size();
  for (int64_t i = 0; i < vox; ++i) {
    check_arg(cl[i] < c, "to_one_hot: class value exceeds num_classes");
    out.data[cl[i] * vox + i] = 1.0f;
  }
  return out;
}

LabelMap from_one_hot(const OneHotMap& onehot) {
  const int64_t c = onehot.data.dim(0);
  const int64_t vox = onehot.data.size() / c;
  LabelMap out;
  out.num_classes = int(c);
  out.classes = Tensor<uint8_t>({onehot.data.dim(1), onehot.data.dim(2), onehot.data.dim(3)});
  for (int64_t i = 0; i < vox; ++i) {
    int best = 0;
    float bv = onehot.data[i];
    for (int cc = 1; cc < c; ++cc) {
      const float v = onehot.data[cc * vox + i];
      if (v > bv) {
        bv = v;
        best = cc;
      }
    }
    out.classes[i] = uint8_t(best);
  }
  return out;
}

// ---- Persistence ------------------------------------------------------------

namespace fs = std::filesystem;

namespace {

template <typename T>
void write_raw(const fs::path& p, const Tensor<T>& t) {
  std::ofstream f(p, std::ios::binary);
  check_runtime(f.good(), "cannot open for writing: " + p.string());
  f.write(reinterpret_cast<const char*>(t.data()),
          std::streamsize(size_t(t.size()) * sizeof(T)));
  check_runtime(f.good(), "short write: " + p.string());
}

template <typename T>
Tensor<T> read_raw(const fs::path& p, std::vector<int64_t> shape) {
  Tensor<T> t(std::move(shape));
  std::ifstream f(p, std::ios::binary);
  check_runtime(f.good(), "cannot open for reading: " + p.string());
  f.read(reinterpret_cast<char*>(t.data()), std::streamsize(size_t(t.size()) * sizeof(T)));
  check_runtime(f.gcount() == std::streamsize(size_t(t.size()) * sizeof(T)),
                "short read: " + p.string());
  return t;
}

}  // namespace

void write_case(const fs::path& dir, const CtVolume& vol, const LabelMap* labels,
                const CaseMeta& meta) {
  fs::create_directories(dir);
  write_raw(dir / "volume.f32", vol.data);
  if (labels) write_raw(dir / "labels.u8", labels->classes);
  json j;
  j["format_version"] = 1;
  j["id"] = meta.id;
  j["shape"] = {vol.depth(), vol.height(), vol.width()};
  j["spacing_mm"] = vol.spacing_mm;
  j["normalized"] = vol.normalized;
  j["normalization_window"] = {kWindowLo, kWindowHi};
  j["class_names"] = kClassNames;
  j["has_labels"] = labels != nullptr;
  j["seed"] = meta.seed;
  j["role"] = meta.role;
  j["split"] = meta.split;
  std::ofstream f(dir / "meta.json");
  f << j.dump(2) << "\n";
  check_runtime(f.good(), "cannot write meta.json in " + dir.string());
}

LoadedCase read_case(const fs::path& dir) {
  std::ifstream f(dir / "meta.json");
  check_runtime(f.good(), "cannot read meta.json in " + dir.string());
  json j = json::parse(f);
  LoadedCase out;
  const auto shape = j.at("shape").get<std::vector<int64_t>>();
  check_runtime(shape.size() == 3, "meta.json: bad shape");
  out.volume.data = read_raw<float>(dir / "volume.f32", {shape[0], shape[1], shape[2]});
  const auto sp = j.at("spacing_mm").get<std::vector<double>>();
  out.volume.spacing_mm = {sp.at(0), sp.at(1), sp.at(2)};
  out.volume.normalized = j.at("normalized").get<bool>();
  if (j.at("has_labels").get<bool>()) {
    LabelMap lm;
    lm.classes = read_raw<uint8_t>(dir / "labels.u8", {shape[0], shape[1], shape[2]});
    lm.num_classes = kNumClasses;
    out.labels = std::move(lm);
  }
  out.meta.id = j.at("id").get<std::string>();
  out.meta.seed = j.at("seed").get<uint64_t>();
  out.meta.role = j.at("role").get<std::string>();
  out.meta.split = j.at("split").get<std::string>();
  return out;
}

void write_manifest(const fs::path& root, const DatasetManifest& m) {
  json j;
  j["format_version"] = 1;
  j["grid_shape"] = m.grid_shape;
  j["spacing_mm"] = m.spacing_mm;
  j["class_names"] = m.class_names;
  j["cases"] = json::array();
  for (const auto& c : m.cases)
    j["cases"].push_back({{"id", c.id}, {"seed", c.seed}, {"role", c.role}, {"split", c.split}});
  std::ofstream f(root / "dataset.json");
  f << j.dump(2) << "\n";
  check_runtime(f.good(), "cannot write dataset.json in " + root.string());
}

DatasetManifest read_manifest(const fs::path& root) {
  std::ifstream f(root / "dataset.json");
  check_runtime(f.good(), "cannot read dataset.json in " + root.string());
  json j = json::parse(f);
  DatasetManifest m;
  const auto gs = j.at("grid_shape").get<std::vector<int64_t>>();
  m.grid_shape = {gs.at(0), gs.at(1), gs.at(2)};
  const auto sp = j.at("spacing_mm").get<std::vector<double>>();
  m.spacing_mm = {sp.at(0), sp.at(1), sp.at(2)};
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  for (const auto& c : j.at("cases")) {
    CaseMeta cm;
    cm.id = c.at("id").get<std::string>();
    cm.seed = c.at("seed").get<uint64_t>();
    cm.role = c.at("role").get<std::string>();
    cm.split = c.at("split").get<std::string>();
    m.cases.push_back(std::move(cm));
  }
  return m;
}

}  // namespace vseg::voldata
