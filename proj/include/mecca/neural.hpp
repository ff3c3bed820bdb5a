#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mecca/rng.hpp"
#include "mecca/volume.hpp"

namespace mecca::nn {

/// Channel-major stack of volumes: element (c, i) lives at c * voxels + i.
struct Activation {
  int channels = 0;
  Shape3 shape;
  std::vector<float> data;

  Activation() = default;
  Activation(int channels, Shape3 shape, float fill = 0.0f);

  std::size_t voxels() const { return shape.voxels(); }
  std::span<float> channel(int c) { return {data.data() + c * voxels(), voxels()}; }
  std::span<const float> channel(int c) const { return {data.data() + c * voxels(), voxels()}; }

  static Activation stack(std::span<const Volume* const> volumes);
};

// ---------------------------------------------------------------------------
// Primitive ops. Weights are [out, in, 3, 3, 3] (or [out, in, 1, 1, 1] for the
// pointwise projection). Zero padding preserves the spatial shape.

/// out = conv(in, weight) + bias. `out` is resized to weight's out channels.
void conv3d_forward(const Activation& in, const Tensor& weight, const Tensor& bias, int dilation,
                    Activation& out);
/// d_in += conv_transpose(d_out, weight).
void conv3d_backward_input(const Activation& d_out, const Tensor& weight, int dilation,
                           Activation& d_in);
/// d_weight += correlation(in, d_out); d_bias += sum(d_out).
void conv3d_backward_params(const Activation& in, const Activation& d_out, int dilation,
                            Tensor& d_weight, Tensor& d_bias);

void pointwise_forward(const Activation& in, const Tensor& weight, const Tensor& bias,
                       Activation& out);
void pointwise_backward(const Activation& in, const Activation& d_out, const Tensor& weight,
                        Tensor& d_weight, Tensor& d_bias, Activation* d_in);

// ---------------------------------------------------------------------------
// Architecture specs.

/// Two 3x3x3 dilated convolutions, each followed by a rectifier:
/// in -> out -> out.
struct ConvBlockSpec {
  int in_channels = 0;
  int out_channels = 0;
  int dilation = 1;

  friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

/// Channel widths and dilations for both networks. Defaults are the full-size
/// configuration; `desk()` is the reduced configuration used for single-core
/// training runs.
struct NetWidths {
  std::vector<int> shared{16, 32, 64};
  std::vector<int> shared_dilation{1, 2, 4};
  std::vector<int> head{64, 32};
  std::vector<int> head_dilation{2, 1};
  std::vector<int> conf{16, 32, 64, 64, 32, 16};
  std::vector<int> conf_dilation{1, 2, 4, 4, 2, 1};

  static NetWidths desk();
  static NetWidths tiny();

  friend bool operator==(const NetWidths&, const NetWidths&) = default;
};

void to_json(nlohmann::json& j, const NetWidths& w);
void from_json(const nlohmann::json& j, NetWidths& w);

inline constexpr int kSegInputChannels = 3;   // image, probability, hint
inline constexpr int kConfInputChannels = 4;  // image, probability, hint, action / 0.4

struct SegNetSpec {
  std::vector<ConvBlockSpec> shared_blocks;
  std::vector<ConvBlockSpec> policy_blocks;
  std::vector<ConvBlockSpec> value_blocks;
  int actions = 6;

  static SegNetSpec from_widths(const NetWidths& w, int actions = 6);
  nlohmann::json to_json() const;
  friend bool operator==(const SegNetSpec&, const SegNetSpec&) = default;
};

struct ConfNetSpec {
  std::vector<ConvBlockSpec> blocks;

  static ConfNetSpec from_widths(const NetWidths& w);
  nlohmann::json to_json() const;
  friend bool operator==(const ConfNetSpec&, const ConfNetSpec&) = default;
};

/// A chain of conv blocks with cached activations for the backward pass.
class ConvStack {
 public:
  ConvStack() = default;
  ConvStack(std::string prefix, std::vector<ConvBlockSpec> blocks);

  struct Tape {
    std::vector<Activation> outputs;  // post-rectifier output of every conv
  };

  void add_params(NamedTensorSet& params, Rng* rng) const;
  const Activation& forward(const NamedTensorSet& params, const Activation& input, Tape& tape) const;
  /// Accumulates parameter gradients; writes d_input when non-null. `input`
  /// is the activation the tape was recorded from.
  void backward(const NamedTensorSet& params, const Activation& input, const Tape& tape,
                Activation d_output, NamedTensorSet& grads, Activation* d_input) const;

  int out_channels() const;
  const std::string& prefix() const { return prefix_; }

 private:
  struct Layer {
    std::string weight;
    std::string bias;
    int in_channels;
    int out_channels;
    int dilation;
  };
  std::string prefix_;
  std::vector<Layer> layers_;
};

/// Segmentation network: shared trunk, policy head (softmax over the action
/// set) and value head (linear).
class SegNet {
 public:
  explicit SegNet(SegNetSpec spec);

  struct Output {
    Activation input;
    ConvStack::Tape trunk_tape;
    ConvStack::Tape policy_tape;
    ConvStack::Tape value_tape;
    Activation policy_logits;  // actions x N
    Activation policy;         // softmax of logits
    Activation value;          // 1 x N
  };

  const SegNetSpec& spec() const { return spec_; }
  NamedTensorSet init(Rng& rng) const;
  NamedTensorSet zero_params() const;
  /// Throws kValidation unless names and shapes are exactly this architecture's.
  void validate(const NamedTensorSet& params) const;

  Output forward(const NamedTensorSet& params, const Volume& image, const Volume& prob,
                 const Volume& hint) const;
  /// Gradients of a scalar loss given dL/dlogits and dL/dvalue (either may be
  /// empty, meaning zero). Returned set has every parameter name.
  NamedTensorSet backward(const NamedTensorSet& params, const Output& out,
                          std::span<const float> d_logits, std::span<const float> d_value) const;

  std::vector<std::string> policy_param_names() const;  // trunk + policy head
  std::vector<std::string> value_param_names() const;   // trunk + value head

 private:
  SegNetSpec spec_;
  ConvStack trunk_;
  ConvStack policy_;
  ConvStack value_;
};

/// Action-confidence network: conv blocks, pointwise projection, logistic.
class ConfNet {
 public:
  explicit ConfNet(ConfNetSpec spec);

  struct Output {
    Activation input;
    ConvStack::Tape tape;
    Activation logit;  // 1 x N
    Volume confidence;
  };

  const ConfNetSpec& spec() const { return spec_; }
  NamedTensorSet init(Rng& rng) const;
  NamedTensorSet zero_params() const;
  void validate(const NamedTensorSet& params) const;

  /// `action` carries action values; it is normalized by 0.4 internally.
  Output forward(const NamedTensorSet& params, const Volume& image, const Volume& prob,
                 const Volume& hint, const Volume& action) const;
  NamedTensorSet backward(const NamedTensorSet& params, const Output& out,
                          std::span<const float> d_logit) const;

 private:
  ConfNetSpec spec_;
  ConvStack stack_;
};

/// Uniform(-b, b), b = sqrt(6 / (fan_in + fan_out)) for weights; zero biases.
void xavier_fill(Tensor& weight, Rng& rng);

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Adam with bias correction over a named subset of parameters.
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, const NamedTensorSet& params, const std::vector<std::string>& names);
  Adam(AdamConfig cfg, const NamedTensorSet& params);

  /// Updates only the tensors this optimizer tracks.
  void step(NamedTensorSet& params, const NamedTensorSet& grads);

  long steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(float lr) { cfg_.lr = lr; }

  /// Moments as "<prefix>m.<name>" / "<prefix>v.<name>" tensors.
  void save(NamedTensorSet& out, const std::string& prefix) const;
  void load(const NamedTensorSet& in, const std::string& prefix, long steps);

  const NamedTensorSet& first_moment() const { return m_; }
  const NamedTensorSet& second_moment() const { return v_; }

 private:
  AdamConfig cfg_;
  NamedTensorSet m_;
  NamedTensorSet v_;
  long step_ = 0;
};

/// Softmax over channels at each voxel.
void softmax_channels(const Activation& logits, Activation& probs);

float sigmoid(float x);

}  // namespace mecca::nn
