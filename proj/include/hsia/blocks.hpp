#pragma once

#include "hsia/ops.hpp"
#include "hsia/params.hpp"

namespace hsia {

// Mutable non-parameter state (batch-norm running stats) collected so
// checkpoints can carry it alongside the parameter registry.
template <class T>
struct BufferRegistryT {
  std::vector<std::pair<std::string, BnStats<T>*>> bn;
  void add(const std::string& name, BnStats<T>* s) { bn.emplace_back(name, s); }
};

using BufferRegistry = BufferRegistryT<float>;

// conv -> batchnorm -> relu, the workhorse of the prior and decoder.
template <class T>
class ConvBnReluT {
 public:
  ConvBnReluT() = default;
  ConvBnReluT(ModelParamsT<T>& params, BufferRegistryT<T>& buffers, const std::string& prefix,
              int cin, int cout, int kernel, int stride, int padding, Rng& rng, int groups = 1,
              bool with_relu = true)
      : stride_(stride), padding_(padding), groups_(groups), with_relu_(with_relu) {
    double fan_in = static_cast<double>(cin / groups) * kernel * kernel;
    double std_dev = std::sqrt(2.0 / fan_in);
    w_ = params.add(prefix + ".conv.weight",
                    tensor_init_trunc_normal<T>({cout, cin / groups, kernel, kernel}, rng, std_dev),
                    false);
    b_ = params.add(prefix + ".conv.bias", tensor_zeros<T>({cout}), false);
    gamma_ = params.add(prefix + ".bn.gamma", tensor_ones<T>({cout}), false);
    beta_ = params.add(prefix + ".bn.beta", tensor_zeros<T>({cout}), false);
    stats_ = std::make_shared<BnStats<T>>();
    stats_->init(cout);
    buffers.add(prefix + ".bn", stats_.get());
  }

  TensorT<T> forward(const TensorT<T>& x, bool training) const {
    auto y = conv2d(x, w_, b_, stride_, padding_, groups_);
    y = batchnorm2d(y, gamma_, beta_, *stats_, training);
    return with_relu_ ? relu(y) : y;
  }

 private:
  TensorT<T> w_, b_, gamma_, beta_;
  std::shared_ptr<BnStats<T>> stats_;
  int stride_ = 1, padding_ = 0, groups_ = 1;
  bool with_relu_ = true;
};

// Plain convolution parameter pair (no norm), e.g. classifiers.
template <class T>
class ConvT {
 public:
  ConvT() = default;
  // zero_init makes the layer start as the zero map: used by classifier
  // heads so early logits are driven purely by the training signal instead
  // of random projections of the features.
  ConvT(ModelParamsT<T>& params, const std::string& prefix, int cin, int cout, int kernel,
        int stride, int padding, Rng& rng, bool zero_init = false)
      : stride_(stride), padding_(padding) {
    double fan_in = static_cast<double>(cin) * kernel * kernel;
    double std_dev = std::sqrt(2.0 / fan_in);
    w_ = params.add(prefix + ".weight",
                    zero_init ? tensor_zeros<T>({cout, cin, kernel, kernel})
                              : tensor_init_trunc_normal<T>({cout, cin, kernel, kernel}, rng,
                                                            std_dev),
                    false);
    b_ = params.add(prefix + ".bias", tensor_zeros<T>({cout}), false);
  }

  TensorT<T> forward(const TensorT<T>& x) const { return conv2d(x, w_, b_, stride_, padding_); }

 private:
  TensorT<T> w_, b_;
  int stride_ = 1, padding_ = 0;
};

}  // namespace hsia
