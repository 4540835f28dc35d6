#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "hsia/common.hpp"

namespace hsia {

struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::int64_t> counts;  // [gt * classes + pred]
  std::int64_t ignored = 0;

  explicit ConfusionMatrix(int c = 0) : classes(c), counts(static_cast<std::size_t>(c) * c, 0) {}

  std::int64_t& at(int gt, int pred) {
    return counts[static_cast<std::size_t>(gt) * classes + pred];
  }
  std::int64_t at(int gt, int pred) const {
    return counts[static_cast<std::size_t>(gt) * classes + pred];
  }
  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : counts) t += v;
    return t;
  }
  // Merge is plain addition, so parallel per-image matrices combine in any
  // order.
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes != classes) throw ShapeError("confusion merge: class count mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    ignored += o.ignored;
    return *this;
  }
};

inline ConfusionMatrix confusion(const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& gt, int classes,
                                 int ignore_label = 255) {
  if (pred.size() != gt.size()) throw ShapeError("confusion: prediction/label size mismatch");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    int g = gt[i];
    if (g == ignore_label) {
      ++cm.ignored;
      continue;
    }
    int p = pred[i];
    if (g >= classes) throw DataError("ground-truth label " + std::to_string(g) + " out of range");
    if (p >= classes) throw DataError("predicted label " + std::to_string(p) + " out of range");
    ++cm.at(g, p);
  }
  return cm;
}

struct MetricsResult {
  std::vector<double> iou;      // NaN where the class is absent from pred and gt
  std::vector<double> acc;      // per-class recall; NaN where gt has no pixels
  double miou = 0, aacc = 0, macc = 0;
};

// IoU_c = tp/(tp+fp+fn); classes with zero union are excluded from mIoU,
// classes with no ground-truth pixels are excluded from mAcc.
inline MetricsResult metrics(const ConfusionMatrix& cm) {
  std::int64_t total = cm.total();
  if (total == 0) throw DataError("metrics undefined: confusion matrix is empty");
  int c = cm.classes;
  MetricsResult r;
  r.iou.assign(c, std::nan(""));
  r.acc.assign(c, std::nan(""));
  double iou_sum = 0, acc_sum = 0;
  std::int64_t diag = 0;
  int iou_n = 0, acc_n = 0;
  for (int k = 0; k < c; ++k) {
    std::int64_t tp = cm.at(k, k), gt_n = 0, pred_n = 0;
    diag += tp;
    for (int j = 0; j < c; ++j) {
      gt_n += cm.at(k, j);
      pred_n += cm.at(j, k);
    }
    std::int64_t uni = gt_n + pred_n - tp;
    if (uni > 0) {
      r.iou[k] = static_cast<double>(tp) / uni;
      iou_sum += r.iou[k];
      ++iou_n;
    }
    if (gt_n > 0) {
      r.acc[k] = static_cast<double>(tp) / gt_n;
      acc_sum += r.acc[k];
      ++acc_n;
    }
  }
  r.miou = iou_n ? iou_sum / iou_n : 0;
  r.macc = acc_n ? acc_sum / acc_n : 0;
  r.aacc = static_cast<double>(diag) / total;
  return r;
}

inline std::string metrics_csv(const MetricsResult& r) {
  char buf[128];
  std::string out = "class,iou,acc\n";
  for (std::size_t k = 0; k < r.iou.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", k, r.iou[k], r.acc[k]);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "__overall__,%.6f,%.6f,%.6f\n", r.miou, r.aacc, r.macc);
  out += buf;
  return out;
}

struct AblationRow {
  int band = 0;
  int cls = 0;
  double delta_iou = 0;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "band,class,delta_iou\n";
  char buf[96];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.6f\n", row.band, row.cls, row.delta_iou);
    out += buf;
  }
  return out;
}

// Comparison map: red where ours is wrong, green where the baseline is
// wrong and ours is right, neutral grey elsewhere, black on ignored pixels.
inline std::vector<std::uint8_t> improvement_error_map(const std::vector<std::uint8_t>& pred_ours,
                                                       const std::vector<std::uint8_t>& pred_base,
                                                       const std::vector<std::uint8_t>& gt,
                                                       int ignore_label = 255) {
  if (pred_ours.size() != gt.size() || pred_base.size() != gt.size())
    throw ShapeError("improvement_error_map: size mismatch");
  std::vector<std::uint8_t> rgb(gt.size() * 3);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    std::uint8_t r = 180, g = 180, b = 180;
    if (gt[i] == ignore_label) {
      r = g = b = 0;
    } else if (pred_ours[i] != gt[i]) {
      r = 220; g = 40; b = 40;
    } else if (pred_base[i] != gt[i]) {
      r = 40; g = 180; b = 60;
    }
    rgb[3 * i] = r;
    rgb[3 * i + 1] = g;
    rgb[3 * i + 2] = b;
  }
  return rgb;
}

inline void write_ppm(const std::string& path, const std::vector<std::uint8_t>& rgb, int h,
                      int w) {
  if (rgb.size() != static_cast<std::size_t>(h) * w * 3) throw ShapeError("write_ppm: size");
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot write " + path);
  std::fprintf(f, "P6\n%d %d\n255\n", w, h);
  std::size_t n = std::fwrite(rgb.data(), 1, rgb.size(), f);
  std::fclose(f);
  if (n != rgb.size()) throw IoError("short write to " + path);
}

}  // namespace hsia
