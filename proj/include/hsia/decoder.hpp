#pragma once

#include "hsia/blocks.hpp"

namespace hsia {

struct DecoderConfig {
  int dim = 96;       // channels of the incoming pyramid
  int fpn_ch = 64;    // lateral / fused width
  int aux_ch = 64;    // FCN auxiliary head hidden width
  int num_classes = 6;
  std::vector<int> ppm_bins{1, 2, 3, 6};
};

// Pyramid pooling over the coarsest map: pool to each bin, 1x1 conv, resize
// back, concatenate with the input, fuse with a 3x3 conv. Branch convs skip
// batch norm: the 1x1 bin leaves a single spatial element per channel, which
// has no per-sample statistics.
template <class T>
class PpmT {
 public:
  PpmT() = default;
  PpmT(ModelParamsT<T>& params, BufferRegistryT<T>& buffers, const std::string& prefix,
       const DecoderConfig& cfg, Rng& rng)
      : bins_(cfg.ppm_bins) {
    for (std::size_t i = 0; i < bins_.size(); ++i)
      branches_.emplace_back(params, prefix + ".branch" + std::to_string(i), cfg.dim, cfg.fpn_ch,
                             1, 1, 0, rng);
    int cat = cfg.dim + cfg.fpn_ch * static_cast<int>(bins_.size());
    fuse_ = ConvBnReluT<T>(params, buffers, prefix + ".fuse", cat, cfg.fpn_ch, 3, 1, 1, rng);
  }

  TensorT<T> forward(const TensorT<T>& f4, bool training) const {
    int h = f4->shape.at(1), w = f4->shape.at(2);
    std::vector<TensorT<T>> parts{f4};
    for (std::size_t i = 0; i < bins_.size(); ++i) {
      auto pooled = adaptive_avg_pool2d(f4, bins_[i], bins_[i]);
      parts.push_back(bilinear_resize(relu(branches_[i].forward(pooled)), h, w));
    }
    return fuse_.forward(concat_channels(parts), training);
  }

 private:
  std::vector<int> bins_;
  std::vector<ConvT<T>> branches_;
  ConvBnReluT<T> fuse_;
};

// UPerNet-style decode head: PPM on the coarsest level, FPN top-down fusion,
// concat of all smoothed levels at 1/4 scale, fuse, classify, upsample.
template <class T>
class UperHeadT {
 public:
  UperHeadT() = default;
  UperHeadT(ModelParamsT<T>& params, BufferRegistryT<T>& buffers, const std::string& prefix,
            const DecoderConfig& cfg, Rng& rng)
      : ppm_(params, buffers, prefix + ".ppm", cfg, rng) {
    for (int i = 0; i < 3; ++i) {
      laterals_.emplace_back(params, buffers, prefix + ".lateral" + std::to_string(i + 1), cfg.dim,
                             cfg.fpn_ch, 1, 1, 0, rng);
      smooth_.emplace_back(params, buffers, prefix + ".smooth" + std::to_string(i + 1), cfg.fpn_ch,
                           cfg.fpn_ch, 3, 1, 1, rng);
    }
    fuse_ = ConvBnReluT<T>(params, buffers, prefix + ".fuse", 4 * cfg.fpn_ch, cfg.fpn_ch, 3, 1, 1,
                           rng);
    classifier_ = ConvT<T>(params, prefix + ".classifier", cfg.fpn_ch, cfg.num_classes, 1, 1, 0,
                           rng, true);
  }

  // Logits at the resolution of f1 (1/4 scale); upsampling to image size is
  // the caller's job since it also crops away padding.
  TensorT<T> forward(const std::array<TensorT<T>, 4>& pyramid, bool training) const {
    auto top = ppm_.forward(pyramid[3], training);
    std::array<TensorT<T>, 4> fused;
    fused[3] = top;
    for (int i = 2; i >= 0; --i) {
      auto lat = laterals_[i].forward(pyramid[i], training);
      auto up = bilinear_resize(fused[i + 1], lat->shape.at(1), lat->shape.at(2));
      fused[i] = smooth_[i].forward(add(lat, up), training);
    }
    int h = fused[0]->shape.at(1), w = fused[0]->shape.at(2);
    std::vector<TensorT<T>> parts;
    for (int i = 0; i < 4; ++i) parts.push_back(bilinear_resize(fused[i], h, w));
    auto x = fuse_.forward(concat_channels(parts), training);
    return classifier_.forward(x);
  }

 private:
  PpmT<T> ppm_;
  std::vector<ConvBnReluT<T>> laterals_;
  std::vector<ConvBnReluT<T>> smooth_;
  ConvBnReluT<T> fuse_;
  ConvT<T> classifier_;
};

// FCN auxiliary head on the 1/16 feature map.
template <class T>
class FcnAuxHeadT {
 public:
  FcnAuxHeadT() = default;
  FcnAuxHeadT(ModelParamsT<T>& params, BufferRegistryT<T>& buffers, const std::string& prefix,
              const DecoderConfig& cfg, Rng& rng) {
    conv1_ = ConvBnReluT<T>(params, buffers, prefix + ".conv1", cfg.dim, cfg.aux_ch, 3, 1, 1, rng);
    conv2_ = ConvBnReluT<T>(params, buffers, prefix + ".conv2", cfg.aux_ch, cfg.aux_ch, 3, 1, 1,
                            rng);
    classifier_ = ConvT<T>(params, prefix + ".classifier", cfg.aux_ch, cfg.num_classes, 1, 1, 0,
                           rng, true);
  }

  TensorT<T> forward(const TensorT<T>& f3, bool training) const {
    return classifier_.forward(conv2_.forward(conv1_.forward(f3, training), training));
  }

 private:
  ConvBnReluT<T> conv1_, conv2_;
  ConvT<T> classifier_;
};

// Mean cross-entropy over pixels whose label != ignore_label. Logits are
// [C,H,W]; labels row-major H*W. Returns a scalar; if every pixel is ignored
// the loss is exactly zero and *all_ignored is set.
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<std::uint8_t>& labels,
                         int ignore_label = 255, bool* all_ignored = nullptr) {
  if (logits->shape.size() != 3) throw ShapeError("cross_entropy: logits rank");
  int c = logits->shape[0], h = logits->shape[1], w = logits->shape[2];
  std::int64_t hw = static_cast<std::int64_t>(h) * w;
  if (static_cast<std::int64_t>(labels.size()) != hw)
    throw ShapeError("cross_entropy: label count " + std::to_string(labels.size()) +
                     " for " + std::to_string(hw) + " pixels");
  // log-softmax cached per valid pixel for the backward pass
  auto probs = std::make_shared<std::vector<T>>();
  auto valid = std::make_shared<std::vector<std::int64_t>>();
  T total = T(0);
  for (std::int64_t p = 0; p < hw; ++p) {
    int lab = labels[static_cast<std::size_t>(p)];
    if (lab == ignore_label) continue;
    if (lab >= c)
      throw DataError("label " + std::to_string(lab) + " out of range for " + std::to_string(c) +
                      " classes");
    T mx = logits->data[p];
    for (int k = 1; k < c; ++k) mx = std::max(mx, logits->data[k * hw + p]);
    T denom = T(0);
    for (int k = 0; k < c; ++k) denom += std::exp(logits->data[k * hw + p] - mx);
    T log_denom = std::log(denom) + mx;
    total += log_denom - logits->data[static_cast<std::int64_t>(lab) * hw + p];
    valid->push_back(p);
    for (int k = 0; k < c; ++k)
      probs->push_back(std::exp(logits->data[k * hw + p] - log_denom));
  }
  auto out = make_tensor<T>(Shape{1});
  if (valid->empty()) {
    if (all_ignored) *all_ignored = true;
    out->data[0] = T(0);
    return out;
  }
  if (all_ignored) *all_ignored = false;
  std::int64_t n = static_cast<std::int64_t>(valid->size());
  out->data[0] = total / static_cast<T>(n);
  detail::attach<T>(out, {logits}, [logits, probs, valid, labels, c, hw, n](Node<T>& o) {
    if (!logits->requires_grad) return;
    logits->ensure_grad();
    T scale = o.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < valid->size(); ++i) {
      std::int64_t p = (*valid)[i];
      int lab = labels[static_cast<std::size_t>(p)];
      for (int k = 0; k < c; ++k) {
        T g = (*probs)[i * c + k] - (k == lab ? T(1) : T(0));
        logits->grad[static_cast<std::int64_t>(k) * hw + p] += scale * g;
      }
    }
  });
  return out;
}

template <class T>
struct LossReportT {
  TensorT<T> total;
  T seg = T(0);
  T aux = T(0);
  bool all_ignored = false;
};

// Total objective: segmentation loss plus 0.4 times the auxiliary loss.
// Both logit maps are expected at full label resolution.
template <class T>
LossReportT<T> total_loss(const TensorT<T>& seg_logits, const TensorT<T>& aux_logits,
                          const std::vector<std::uint8_t>& labels, int ignore_label = 255) {
  LossReportT<T> rep;
  bool ig1 = false, ig2 = false;
  auto l_seg = cross_entropy(seg_logits, labels, ignore_label, &ig1);
  auto l_aux = cross_entropy(aux_logits, labels, ignore_label, &ig2);
  rep.seg = l_seg->data[0];
  rep.aux = l_aux->data[0];
  rep.all_ignored = ig1 && ig2;
  rep.total = add(l_seg, scale(l_aux, T(0.4)));
  T v = rep.total->data[0];
  if (!std::isfinite(v)) throw NumericError("non-finite training loss");
  return rep;
}

}  // namespace hsia
