#include "vseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "vseg/common.hpp"

namespace vseg::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D lower envelope of parabolas rooted at coordinates pos[i] with heights
// f[i]; evaluates the envelope back onto the same coordinates. Exact for
// arbitrary (monotone) sample positions, which covers anisotropic spacing.
void edt_1d(const double* f, const double* pos, double* out, int64_t n, int* v, double* z,
            double* fv) {
  int k = 0;
  v[0] = -1;  // sentinel: envelope empty
  for (int64_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    while (true) {
      if (k == 0 && v[0] == -1) {
        v[0] = int(q);
        fv[0] = f[q];
        z[0] = -kInf;
        break;
      }
      const int p = v[k];
      // Intersection of parabolas rooted at pos[p] and pos[q].
      const double s =
          (f[q] + pos[q] * pos[q] - (fv[k] + pos[p] * pos[p])) / (2 * pos[q] - 2 * pos[p]);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      if (s <= z[k] && k == 0) {
        v[0] = int(q);
        fv[0] = f[q];
        z[0] = -kInf;
        break;
      }
      ++k;
      v[k] = int(q);
      fv[k] = f[q];
      z[k] = s;
      break;
    }
  }
  if (v[0] == -1) {
    for (int64_t q = 0; q < n; ++q) out[q] = kInf;
    return;
  }
  int j = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (j < k && z[j + 1] < pos[q]) ++j;
    const double d = pos[q] - pos[v[j]];
    out[q] = d * d + fv[j];
  }
}

}  // namespace

Tensor<double> edt_squared(const BinaryMask& mask) {
  const int64_t zd = mask.data.dim(0), hd = mask.data.dim(1), wd = mask.data.dim(2);
  Tensor<double> dist({zd, hd, wd});
  for (int64_t i = 0; i < dist.size(); ++i) dist[i] = mask.data[i] ? 0.0 : kInf;

  const int64_t maxn = std::max({zd, hd, wd});
  std::vector<double> posz(static_cast<size_t>(zd)), posh(static_cast<size_t>(hd)), posw(static_cast<size_t>(wd));
  for (int64_t i = 0; i < zd; ++i) posz[size_t(i)] = double(i) * mask.spacing_mm[0];
  for (int64_t i = 0; i < hd; ++i) posh[size_t(i)] = double(i) * mask.spacing_mm[1];
  for (int64_t i = 0; i < wd; ++i) posw[size_t(i)] = double(i) * mask.spacing_mm[2];

  // Pass 1: along w (contiguous rows).
#pragma omp parallel
  {
    std::vector<double> buf(static_cast<size_t>(maxn)), fbuf(static_cast<size_t>(maxn)), zbuf(static_cast<size_t>(maxn) + 1),
        fvbuf(static_cast<size_t>(maxn));
    std::vector<int> vbuf(static_cast<size_t>(maxn));
#pragma omp for collapse(2) schedule(static)
    for (int64_t z = 0; z < zd; ++z)
      for (int64_t h = 0; h < hd; ++h) {
        double* row = dist.data() + (z * hd + h) * wd;
        edt_1d(row, posw.data(), buf.data(), wd, vbuf.data(), zbuf.data(), fvbuf.data());
        std::copy(buf.begin(), buf.begin() + wd, row);
      }
    // Pass 2: along h.
#pragma omp for collapse(2) schedule(static)
    for (int64_t z = 0; z < zd; ++z)
      for (int64_t w = 0; w < wd; ++w) {
        for (int64_t h = 0; h < hd; ++h) fbuf[size_t(h)] = dist[(z * hd + h) * wd + w];
        edt_1d(fbuf.data(), posh.data(), buf.data(), hd, vbuf.data(), zbuf.data(), fvbuf.data());
        for (int64_t h = 0; h < hd; ++h) dist[(z * hd + h) * wd + w] = buf[size_t(h)];
      }
    // Pass 3: along z.
#pragma omp for collapse(2) schedule(static)
    for (int64_t h = 0; h < hd; ++h)
      for (int64_t w = 0; w < wd; ++w) {
        for (int64_t z = 0; z < zd; ++z) fbuf[size_t(z)] = dist[(z * hd + h) * wd + w];
        edt_1d(fbuf.data(), posz.data(), buf.data(), zd, vbuf.data(), zbuf.data(), fvbuf.data());
        for (int64_t z = 0; z < zd; ++z) dist[(z * hd + h) * wd + w] = buf[size_t(z)];
      }
  }
  return dist;
}

double dsc(const BinaryMask& gt, const BinaryMask& pred) {
  check_arg(gt.data.same_shape(pred.data), "dsc: shape mismatch");
  int64_t a = 0, b = 0, inter = 0;
  for (int64_t i = 0; i < gt.data.size(); ++i) {
    const bool ga = gt.data[i] != 0, pb = pred.data[i] != 0;
    a += ga;
    b += pb;
    inter += (ga && pb);
  }
  if (a + b == 0) return 1.0;  // both empty: perfect agreement by convention
  return 2.0 * double(inter) / double(a + b);
}

namespace {

// Mean over foreground of `from` of the exact distance to the nearest
// foreground voxel of `to`.
double directed_mean_edt(const BinaryMask& from, const BinaryMask& to) {
  const Tensor<double> d2 = edt_squared(to);
  double sum = 0.0;
  int64_t n = 0;
  for (int64_t i = 0; i < from.data.size(); ++i)
    if (from.data[i]) {
      sum += std::sqrt(d2[i]);
      ++n;
    }
  return sum / double(n);
}

void require_nonempty(const BinaryMask& gt, const BinaryMask& pred, const char* what) {
  if (gt.count() == 0 || pred.count() == 0)
    throw OrganMissing(std::string(what) + ": empty mask (organ missing)");
}

}  // namespace

double ahd(const BinaryMask& gt, const BinaryMask& pred) {
  check_arg(gt.data.same_shape(pred.data), "ahd: shape mismatch");
  check_arg(gt.spacing_mm == pred.spacing_mm, "ahd: spacing mismatch");
  require_nonempty(gt, pred, "ahd");
  return std::max(directed_mean_edt(gt, pred), directed_mean_edt(pred, gt));
}

BinaryMask extract_surface(const BinaryMask& mask) {
  check_arg(mask.count() > 0, "extract_surface: empty mask");
  const int64_t zd = mask.data.dim(0), hd = mask.data.dim(1), wd = mask.data.dim(2);
  BinaryMask out;
  out.spacing_mm = mask.spacing_mm;
  out.data = Tensor<uint8_t>({zd, hd, wd});
  auto fg = [&](int64_t z, int64_t h, int64_t w) {
    if (z < 0 || z >= zd || h < 0 || h >= hd || w < 0 || w >= wd) return false;
    return mask.data.at(z, h, w) != 0;
  };
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t z = 0; z < zd; ++z)
    for (int64_t h = 0; h < hd; ++h)
      for (int64_t w = 0; w < wd; ++w) {
        if (!mask.data.at(z, h, w)) continue;
        const bool interior = fg(z - 1, h, w) && fg(z + 1, h, w) && fg(z, h - 1, w) &&
                              fg(z, h + 1, w) && fg(z, h, w - 1) && fg(z, h, w + 1);
        out.data.at(z, h, w) = interior ? 0 : 1;
      }
  return out;
}

double ashd(const BinaryMask& gt, const BinaryMask& pred) {
  check_arg(gt.data.same_shape(pred.data), "ashd: shape mismatch");
  check_arg(gt.spacing_mm == pred.spacing_mm, "ashd: spacing mismatch");
  require_nonempty(gt, pred, "ashd");
  const BinaryMask sa = extract_surface(gt);
  const BinaryMask sb = extract_surface(pred);
  return 0.5 * (directed_mean_edt(sa, sb) + directed_mean_edt(sb, sa));
}

double volume_difference(const BinaryMask& gt, const BinaryMask& pred) {
  const int64_t t = gt.count();
  check_arg(t > 0, "volume_difference: empty ground truth");
  return 100.0 * double(pred.count() - t) / double(t);
}

double MetricReport::mean_foreground_dsc() const {
  double s = 0.0;
  for (const auto& o : per_organ) s += o.dsc;
  return per_organ.empty() ? 0.0 : s / double(per_organ.size());
}

MetricReport evaluate_case(const voldata::LabelMap& gt, const voldata::LabelMap& pred,
                           const std::array<double, 3>& spacing_mm) {
  check_arg(gt.classes.same_shape(pred.classes), "evaluate_case: shape mismatch");
  MetricReport rep;
  for (int c = 1; c < gt.num_classes; ++c) {
    rep.organ_names.push_back(voldata::kClassNames[size_t(c)]);
    BinaryMask mg{Tensor<uint8_t>(gt.classes.shape()), spacing_mm};
    BinaryMask mp{Tensor<uint8_t>(gt.classes.shape()), spacing_mm};
    for (int64_t i = 0; i < gt.classes.size(); ++i) {
      mg.data[i] = gt.classes[i] == c;
      mp.data[i] = pred.classes[i] == c;
    }
    OrganMetrics om;
    om.dsc = dsc(mg, mp);
    try {
      om.ahd_mm = ahd(mg, mp);
      om.ashd_mm = ashd(mg, mp);
      om.distances_valid = true;
    } catch (const OrganMissing&) {
      om.distances_valid = false;
    }
    if (mg.count() > 0) {
      om.vd_percent = volume_difference(mg, mp);
      om.vd_valid = true;
    }
    rep.per_organ.push_back(om);
  }
  return rep;
}

AggregateReport aggregate(const std::vector<MetricReport>& cases) {
  AggregateReport agg;
  check_arg(!cases.empty(), "aggregate: no cases");
  agg.organ_names = cases.front().organ_names;
  const size_t norg = agg.organ_names.size();
  agg.mean.assign(norg, {});
  agg.stddev.assign(norg, {});
  agg.samples.assign(norg, {});
  for (size_t o = 0; o < norg; ++o) {
    for (int m = 0; m < 4; ++m) {
      double s = 0, s2 = 0;
      int64_t n = 0;
      for (const auto& c : cases) {
        const auto& om = c.per_organ[o];
        const bool valid = (m == 0) || (m == 3 ? om.vd_valid : om.distances_valid);
        if (!valid) continue;
        const double v = m == 0 ? om.dsc : m == 1 ? om.ahd_mm : m == 2 ? om.ashd_mm
                                                                       : om.vd_percent;
        s += v;
        s2 += v * v;
        ++n;
      }
      agg.samples[o][size_t(m)] = n;
      agg.mean[o][size_t(m)] = n ? s / double(n) : 0.0;
      agg.stddev[o][size_t(m)] = n ? std::sqrt(std::max(0.0, s2 / double(n) -
                                                                 (s / double(n)) * (s / double(n))))
                                   : 0.0;
    }
  }
  return agg;
}

namespace {
const char* kMetricNames[4] = {"dsc", "ahd_mm", "ashd_mm", "vd_percent"};
}

std::string report_to_csv(const AggregateReport& r) {
  std::ostringstream os;
  os << "organ";
  for (const char* m : kMetricNames) os << "," << m << "_mean," << m << "_std";
  os << "\n";
  for (size_t o = 0; o < r.organ_names.size(); ++o) {
    os << r.organ_names[o];
    for (int m = 0; m < 4; ++m) {
      if (r.samples[o][size_t(m)] == 0) {
        os << ",N/A,N/A";
      } else {
        os << "," << r.mean[o][size_t(m)] << "," << r.stddev[o][size_t(m)];
      }
    }
    os << "\n";
  }
  return os.str();
}

std::string report_to_json(const AggregateReport& r) {
  nlohmann::ordered_json j;
  for (size_t o = 0; o < r.organ_names.size(); ++o) {
    nlohmann::ordered_json org;
    for (int m = 0; m < 4; ++m) {
      if (r.samples[o][size_t(m)] == 0) {
        org[kMetricNames[m]] = nullptr;
      } else {
        org[kMetricNames[m]] = {{"mean", r.mean[o][size_t(m)]},
                                {"std", r.stddev[o][size_t(m)]},
                                {"n", r.samples[o][size_t(m)]}};
      }
    }
    j[r.organ_names[o]] = org;
  }
  return j.dump(2);
}

namespace brute {

double directed_mean_distance(const BinaryMask& from, const BinaryMask& to) {
  std::vector<std::array<double, 3>> fp, tp;
  const int64_t hd = from.data.dim(1), wd = from.data.dim(2);
  auto collect = [&](const BinaryMask& m, std::vector<std::array<double, 3>>& out) {
    for (int64_t i = 0; i < m.data.size(); ++i)
      if (m.data[i]) {
        const int64_t z = i / (hd * wd), h = (i / wd) % hd, w = i % wd;
        out.push_back({double(z) * m.spacing_mm[0], double(h) * m.spacing_mm[1],
                       double(w) * m.spacing_mm[2]});
      }
  };
  collect(from, fp);
  collect(to, tp);
  check_arg(!fp.empty() && !tp.empty(), "brute force: empty mask");
  double sum = 0.0;
  for (const auto& a : fp) {
    double best = kInf;
    for (const auto& b : tp) {
      const double dz = a[0] - b[0], dh = a[1] - b[1], dw = a[2] - b[2];
      best = std::min(best, dz * dz + dh * dh + dw * dw);
    }
    sum += std::sqrt(best);
  }
  return sum / double(fp.size());
}

double ahd(const BinaryMask& gt, const BinaryMask& pred) {
  require_nonempty(gt, pred, "brute::ahd");
  return std::max(directed_mean_distance(gt, pred), directed_mean_distance(pred, gt));
}

double ashd(const BinaryMask& gt, const BinaryMask& pred) {
  require_nonempty(gt, pred, "brute::ashd");
  const BinaryMask sa = extract_surface(gt);
  const BinaryMask sb = extract_surface(pred);
  return 0.5 * (directed_mean_distance(sa, sb) + directed_mean_distance(sb, sa));
}

}  // namespace brute

}  // namespace vseg::metrics
