#pragma once

#include "hsia/decoder.hpp"
#include "hsia/interaction.hpp"
#include "hsia/prior.hpp"
#include "hsia/vit.hpp"

namespace hsia {

struct HsiAdapterConfig {
  int bands = 25;
  int num_classes = 6;
  SpectralConfig spectral;
  PriorConfig prior;
  ViTConfig vit;
  InteractionConfig interaction;
  DecoderConfig decoder;

  // Small configuration sized for a single CPU core.
  static HsiAdapterConfig desk() {
    HsiAdapterConfig c;
    c.spectral.d_s = 16;
    c.spectral.heads = 4;
    c.spectral.layers = 1;
    c.prior.c_stem = 32;
    c.prior.stage_widths[0] = 32;
    c.prior.stage_widths[1] = 64;
    c.prior.stage_widths[2] = 128;
    c.decoder.fpn_ch = 64;
    c.decoder.aux_ch = 64;
    return c;
  }

  // Reference configuration with the documented widths.
  static HsiAdapterConfig full() {
    HsiAdapterConfig c;
    c.spectral.d_s = 32;
    c.spectral.heads = 4;
    c.spectral.layers = 2;
    c.prior.c_stem = 64;
    c.prior.stage_widths[0] = 128;
    c.prior.stage_widths[1] = 256;
    c.prior.stage_widths[2] = 256;
    c.decoder.fpn_ch = 256;
    c.decoder.aux_ch = 256;
    return c;
  }

  void sync() {
    spectral.bands = bands;
    prior.bands = bands;
    prior.dim = vit.dim;
    interaction.dim = vit.dim;
    decoder.dim = vit.dim;
    decoder.num_classes = num_classes;
  }
};

template <class T>
struct ModelOutputT {
  TensorT<T> seg_logits;  // [num_classes, H, W] at the input resolution
  TensorT<T> aux_logits;  // same shape, from the auxiliary head
  TensorT<T> vit_tokens;  // final backbone token stream (class token at row 0)
  std::vector<Shape> pyramid_shapes;  // decoder input maps, strides 4/8/16/32
};

// The full adapter: spectral transformer feeding a frozen ViT through
// gated interaction blocks, a spatial prior pyramid, and a UPerNet decoder.
template <class T>
class HsiAdapterT {
 public:
  HsiAdapterT(HsiAdapterConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.sync();
    cfg_.vit.validate();
    params_.seed = seed;
    Rng rng(seed);
    spectral_ = std::make_unique<SpectralTransformerT<T>>(params_, "spectral", cfg_.spectral, rng);
    prior_ = std::make_unique<SpatialPriorT<T>>(params_, buffers_, "prior", cfg_.prior, rng);
    vit_ = std::make_unique<ViTBackboneT<T>>(params_, "vit", cfg_.vit, rng);
    int n_stages = vit_->num_stages();
    for (int i = 0; i < n_stages; ++i)
      blocks_.emplace_back(params_, "interaction" + std::to_string(i), cfg_.interaction, rng);
    for (int i = 0; i < cfg_.interaction.num_extra_extractors; ++i)
      extra_extractors_.emplace_back(params_, "extra_extractor" + std::to_string(i),
                                     cfg_.interaction.dim, cfg_.interaction.deform_heads,
                                     cfg_.interaction.deform_points, rng);
    assembler_ = OutputAssemblerT<T>(params_, "assemble", cfg_.interaction.dim, rng);
    head_ = std::make_unique<UperHeadT<T>>(params_, buffers_, "decode_head", cfg_.decoder, rng);
    aux_head_ = std::make_unique<FcnAuxHeadT<T>>(params_, buffers_, "aux_head", cfg_.decoder, rng);
  }

  ModelOutputT<T> forward(const TensorT<T>& cube, bool training) const {
    if (cube->shape.size() != 3 || cube->shape[0] != cfg_.bands)
      throw ShapeError("model input must be [" + std::to_string(cfg_.bands) + ",H,W], got " +
                       shape_str(cube->shape));
    int h = cube->shape[1], w = cube->shape[2];
    int hp = ((h + 31) / 32) * 32, wp = ((w + 31) / 32) * 32;
    auto padded = pad2d_br(cube, hp, wp);

    auto rgb = spectral_->transform(padded);
    auto pyr = prior_->forward(padded, training);
    auto st = vit_->patch_embed(rgb);

    auto vit_refs = grid_centers<T>(st.grid_h, st.grid_w);
    auto vit_spec = LevelSpec::from_levels({{st.grid_h, st.grid_w}});
    auto spm_refs = make_reference_points<T>(pyr.spec);

    auto x = st.tokens;
    auto f = pyr.spm_seq;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto [patches, cls] = detach_class_token(x);
      auto injected = blocks_[i].inject(patches, f, pyr.spec, vit_refs);
      auto gated = blocks_[i].gate(patches, injected);
      x = vit_->run_stage(reattach_class_token(gated, cls), static_cast<int>(i));
      auto [out_patches, out_cls] = detach_class_token(x);
      f = blocks_[i].extract(f, out_patches, vit_spec, spm_refs);
      f = blocks_[i].feedback(f, out_patches);
    }
    auto [final_patches, final_cls] = detach_class_token(x);
    for (const auto& ex : extra_extractors_)
      f = ex.forward(f, final_patches, vit_spec, spm_refs);

    auto pyramid = assembler_.forward(f, pyr.c1, pyr.spec);
    auto seg = head_->forward(pyramid, training);
    auto aux = aux_head_->forward(pyramid[2], training);

    ModelOutputT<T> out;
    out.seg_logits = crop2d(bilinear_resize(seg, hp, wp), h, w);
    out.aux_logits = crop2d(bilinear_resize(aux, hp, wp), h, w);
    out.vit_tokens = x;
    for (const auto& level : pyramid) out.pyramid_shapes.push_back(level->shape);
    return out;
  }

  // Backbone-only forward with no interaction, for identity probes. The
  // pseudo-image path is identical to forward().
  TensorT<T> plain_vit_forward(const TensorT<T>& cube) const {
    int h = cube->shape.at(1), w = cube->shape.at(2);
    int hp = ((h + 31) / 32) * 32, wp = ((w + 31) / 32) * 32;
    auto rgb = spectral_->transform(pad2d_br(cube, hp, wp));
    auto st = vit_->patch_embed(rgb);
    auto x = st.tokens;
    for (int i = 0; i < vit_->num_stages(); ++i) x = vit_->run_stage(x, i);
    return x;
  }

  ModelParamsT<T>& params() { return params_; }
  const ModelParamsT<T>& params() const { return params_; }
  BufferRegistryT<T>& buffers() { return buffers_; }
  const BufferRegistryT<T>& buffers() const { return buffers_; }
  const HsiAdapterConfig& config() const { return cfg_; }
  const InteractionBlockT<T>& block(int i) const { return blocks_.at(i); }
  const SpectralTransformerT<T>& spectral() const { return *spectral_; }
  const ViTBackboneT<T>& vit() const { return *vit_; }
  const SpatialPriorT<T>& prior() const { return *prior_; }

 private:
  HsiAdapterConfig cfg_;
  ModelParamsT<T> params_;
  BufferRegistryT<T> buffers_;
  std::unique_ptr<SpectralTransformerT<T>> spectral_;
  std::unique_ptr<SpatialPriorT<T>> prior_;
  std::unique_ptr<ViTBackboneT<T>> vit_;
  std::vector<InteractionBlockT<T>> blocks_;
  std::vector<ExtractorT<T>> extra_extractors_;
  OutputAssemblerT<T> assembler_;
  std::unique_ptr<UperHeadT<T>> head_;
  std::unique_ptr<FcnAuxHeadT<T>> aux_head_;
};

using HsiAdapter = HsiAdapterT<float>;

// Checkpoints bundle parameters and batch-norm running statistics in a
// single NTW1 payload; buffer entries are namespaced under "buffers.".
template <class T>
std::string checkpoint_serialize(const ModelParamsT<T>& params,
                                 const BufferRegistryT<T>& buffers) {
  std::string out = "NTW1";
  std::uint32_t count =
      static_cast<std::uint32_t>(params.entries().size() + 2 * buffers.bn.size());
  detail::put_u32(out, count);
  auto put_entry = [&](const std::string& name, const Shape& shape, const T* data,
                       std::int64_t n) {
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(shape.size()));
    for (int ext : shape) detail::put_u32(out, static_cast<std::uint32_t>(ext));
    for (std::int64_t i = 0; i < n; ++i) detail::put_f32(out, static_cast<float>(data[i]));
  };
  for (auto& [name, e] : params.entries())
    put_entry(name, e.tensor->shape, e.tensor->data.data(), e.tensor->size());
  for (auto& [name, st] : buffers.bn) {
    int c = static_cast<int>(st->running_mean.size());
    put_entry("buffers." + name + ".mean", Shape{c}, st->running_mean.data(), c);
    put_entry("buffers." + name + ".var", Shape{c}, st->running_var.data(), c);
  }
  return out;
}

template <class T>
void checkpoint_save(const std::string& path, const HsiAdapterT<T>& model) {
  write_file_bytes(path, checkpoint_serialize(model.params(), model.buffers()));
}

template <class T>
ImportReport checkpoint_load(const std::string& path, HsiAdapterT<T>& model) {
  auto tensors = ntw_parse(read_file_bytes(path));
  ImportReport rep;
  std::vector<std::string> bad;
  auto take_buffer = [&](const std::string& key, std::vector<T>& dst) {
    auto it = tensors.find(key);
    if (it == tensors.end()) {
      rep.missing_names.push_back(key);
      return;
    }
    if (it->second.data.size() != dst.size()) {
      bad.push_back(key);
    } else {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.data[i]);
      ++rep.imported;
    }
    tensors.erase(it);
  };
  for (auto& [name, st] : model.buffers().bn) {
    take_buffer("buffers." + name + ".mean", st->running_mean);
    take_buffer("buffers." + name + ".var", st->running_var);
  }
  for (auto& [name, e] : model.params().entries()) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      rep.missing_names.push_back(name);
      continue;
    }
    if (e.tensor->shape != it->second.shape) {
      bad.push_back(name + " expected " + shape_str(e.tensor->shape) + " got " +
                    shape_str(it->second.shape));
    } else {
      for (std::size_t i = 0; i < it->second.data.size(); ++i)
        e.tensor->data[i] = static_cast<T>(it->second.data[i]);
      ++rep.imported;
    }
    tensors.erase(it);
  }
  for (auto& [name, td] : tensors) rep.unknown_names.push_back(name);
  if (!bad.empty()) {
    std::string msg = "checkpoint shape mismatch:";
    for (auto& b : bad) msg += " " + b;
    throw IoError(msg);
  }
  return rep;
}

}  // namespace hsia
