#pragma once

#include "hsia/config.hpp"
#include "hsia/data.hpp"
#include "hsia/metrics.hpp"
#include "hsia/model.hpp"

namespace hsia {

template <class T>
TensorT<T> cube_to_tensor(const HyperCube& cube) {
  auto x = make_tensor<T>(Shape{cube.bands, cube.height, cube.width});
  for (std::size_t i = 0; i < cube.data.size(); ++i) x->data[i] = static_cast<T>(cube.data[i]);
  return x;
}

inline std::vector<HyperCube> make_dataset(const SynthConfig& cfg, int count, int index_offset) {
  std::vector<HyperCube> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(synth_scene(cfg, index_offset + i));
  return out;
}

// Single-scale argmax prediction, no augmentation.
template <class T>
std::vector<std::uint8_t> predict(const HsiAdapterT<T>& model, const HyperCube& cube) {
  NoGradGuard ng;
  auto out = model.forward(cube_to_tensor<T>(cube), false);
  const auto& logits = out.seg_logits;
  int c = logits->shape.at(0);
  std::int64_t hw = static_cast<std::int64_t>(logits->shape.at(1)) * logits->shape.at(2);
  std::vector<std::uint8_t> pred(static_cast<std::size_t>(hw));
  for (std::int64_t p = 0; p < hw; ++p) {
    int best = 0;
    T bv = logits->data[p];
    for (int k = 1; k < c; ++k) {
      T v = logits->data[static_cast<std::int64_t>(k) * hw + p];
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    pred[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
  }
  return pred;
}

template <class T>
ConfusionMatrix evaluate_cm(const HsiAdapterT<T>& model, const std::vector<HyperCube>& scenes,
                            int classes) {
  ConfusionMatrix cm(classes);
  for (const auto& s : scenes) cm += confusion(predict(model, s), s.labels, classes);
  return cm;
}

// One optimization run over random crops of the given scenes; returns the
// per-step loss log. The whole loop is serial and seed-deterministic.
template <class T>
std::string train_model(HsiAdapterT<T>& model, const std::vector<HyperCube>& train_set,
                        const OptimProfile& opt, int crop_h, int crop_w, std::uint64_t seed) {
  if (train_set.empty()) throw DataError("training set is empty");
  if (opt.warmup >= opt.steps) throw ConfigError("warmup must be below total steps");
  typename AdamWT<T>::Hyper hp;
  hp.weight_decay = opt.weight_decay;
  AdamWT<T> optim(hp);
  Rng rng(Rng::splitmix(seed ^ 0x7261696e21ull));
  std::string csv = "step,lr,l_seg,l_aux,l_total\n";
  char buf[160];
  for (int step = 0; step < opt.steps; ++step) {
    double lr = cosine_warmup_lr(step, opt.lr, opt.warmup, opt.steps);
    model.params().zero_grads();
    T seg_sum = T(0), aux_sum = T(0);
    for (int b = 0; b < opt.batch; ++b) {
      const auto& scene = train_set[rng.below(static_cast<std::uint32_t>(train_set.size()))];
      auto crop = random_crop(scene, crop_h, crop_w, rng);
      auto out = model.forward(cube_to_tensor<T>(crop), true);
      auto rep = total_loss(out.seg_logits, out.aux_logits, crop.labels);
      seg_sum += rep.seg;
      aux_sum += rep.aux;
      backward(scale(rep.total, T(1) / static_cast<T>(opt.batch)));
    }
    T l_seg = seg_sum / static_cast<T>(opt.batch);
    T l_aux = aux_sum / static_cast<T>(opt.batch);
    T l_total = l_seg + T(0.4) * l_aux;
    if (!std::isfinite(static_cast<double>(l_total)))
      throw NumericError("non-finite loss at step " + std::to_string(step));
    std::snprintf(buf, sizeof buf, "%d,%.12g,%.9g,%.9g,%.9g\n", step, lr,
                  static_cast<double>(l_seg), static_cast<double>(l_aux),
                  static_cast<double>(l_total));
    csv += buf;
    optim.step(model.params(), lr);
  }
  return csv;
}

// Per-band sensitivity: zero one band everywhere, re-evaluate, report the
// per-class IoU drop. Emits bands*classes rows; classes absent from the
// data contribute zero.
template <class T>
std::vector<AblationRow> band_ablation(const HsiAdapterT<T>& model,
                                       const std::vector<HyperCube>& scenes, int classes) {
  if (scenes.empty()) throw DataError("ablation dataset is empty");
  int bands = scenes[0].bands;
  auto base = metrics(evaluate_cm(model, scenes, classes));
  std::vector<AblationRow> rows;
  for (int k = 0; k < bands; ++k) {
    std::vector<HyperCube> ablated = scenes;
    for (auto& s : ablated) {
      std::int64_t hw = s.pixels();
      std::fill(s.data.begin() + static_cast<std::int64_t>(k) * hw,
                s.data.begin() + static_cast<std::int64_t>(k + 1) * hw, 0.0f);
    }
    auto m = metrics(evaluate_cm(model, ablated, classes));
    for (int c = 0; c < classes; ++c) {
      double d = 0;
      if (std::isfinite(base.iou[c]) && std::isfinite(m.iou[c])) d = base.iou[c] - m.iou[c];
      rows.push_back({k, c, d});
    }
  }
  return rows;
}

}  // namespace hsia
