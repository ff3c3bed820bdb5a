#include "mecca/neural.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mecca/error.hpp"

namespace mecca::nn {
namespace {

constexpr int kTaps = 27;
constexpr int kLanes = 16;

using vfloat = float __attribute__((vector_size(kLanes * sizeof(float))));

inline vfloat load(const float* p) {
  vfloat v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline int round_up(int v, int m) { return (v + m - 1) / m * m; }

void check_conv_weight(const Tensor& weight, int in_channels, int kernel) {
  if (weight.shape.size() != 5 || weight.shape[1] != in_channels || weight.shape[2] != kernel ||
      weight.shape[3] != kernel || weight.shape[4] != kernel) {
    fail(ErrorKind::kShapeMismatch, "convolution weight does not match input channels");
  }
}

/// Zero-padded copy: `pad` voxels on each side of z and y, `pad` in front of x,
/// and rows long enough that every 16-lane load starting below W + 2 * pad is
/// in bounds.
struct Padded {
  int depth = 0, height = 0, row = 0, pad = 0;
  std::vector<float> data;

  Padded(const Activation& a, int pad_, int channels) : pad(pad_) {
    const Shape3& s = a.shape;
    depth = s.depth + 2 * pad;
    height = s.height + 2 * pad;
    row = round_up(round_up(s.width, kLanes) + 2 * pad + kLanes, kLanes);
    data.assign(static_cast<std::size_t>(channels) * depth * height * row, 0.0f);
    const std::size_t N = s.voxels();
    for (int c = 0; c < a.channels; ++c)
      for (int z = 0; z < s.depth; ++z)
        for (int y = 0; y < s.height; ++y)
          std::memcpy(at(c, z + pad, y + pad) + pad, a.data.data() + c * N + (static_cast<std::size_t>(z) * s.height + y) * s.width,
                      sizeof(float) * s.width);
  }
  float* at(int c, int zp, int yp) {
    return data.data() + ((static_cast<std::size_t>(c) * depth + zp) * height + yp) * row;
  }
  const float* at(int c, int zp, int yp) const {
    return data.data() + ((static_cast<std::size_t>(c) * depth + zp) * height + yp) * row;
  }
};

/// out[c'][p] (+)= bias[c'] + sum_c sum_t wt[(c * 27 + t) * cout_pad + c'] * in[c][p + off(t)],
/// off(t) = ((t / 9) - 1, (t / 3 % 3) - 1, (t % 3) - 1) * dilation, zero padded.
/// Output channels are processed CB at a time with their accumulators kept in
/// registers across the whole reduction.
template <int CB>
void correlate_blocked(const Padded& in, int cin, Shape3 s, int cout, int cout_pad, const std::vector<float>& wt,
                       const float* bias, int dil, Activation& out, bool accumulate) {
  const int H = s.height, W = s.width;
  const std::size_t N = s.voxels();
  const int Wv = round_up(W, kLanes);
  alignas(64) float tmp[kLanes];
  for (int z = 0; z < s.depth; ++z) {
    for (int y = 0; y < H; ++y) {
      const std::size_t row = (static_cast<std::size_t>(z) * H + y) * W;
      for (int cb0 = 0; cb0 < cout_pad; cb0 += CB) {
        for (int xc = 0; xc < Wv; xc += kLanes) {
          vfloat acc[CB];
          for (int b = 0; b < CB; ++b) {
            const float init = (bias && cb0 + b < cout) ? bias[cb0 + b] : 0.0f;
            acc[b] = vfloat{} + init;
          }
          for (int ci = 0; ci < cin; ++ci) {
            for (int kz = 0; kz < 3; ++kz) {
              const int zp = z + in.pad + (kz - 1) * dil;
              for (int ky = 0; ky < 3; ++ky) {
                const float* src = in.at(ci, zp, y + in.pad + (ky - 1) * dil) + in.pad - dil + xc;
                const float* w = wt.data() + (static_cast<std::size_t>(ci) * kTaps + kz * 9 + ky * 3) * cout_pad + cb0;
                const vfloat s0 = load(src);
                const vfloat s1 = load(src + dil);
                const vfloat s2 = load(src + 2 * dil);
                for (int b = 0; b < CB; ++b) {
                  acc[b] += s0 * w[b];
                  acc[b] += s1 * w[cout_pad + b];
                  acc[b] += s2 * w[2 * cout_pad + b];
                }
              }
            }
          }
          const int n = std::min(kLanes, W - xc);
          for (int b = 0; b < CB && cb0 + b < cout; ++b) {
            std::memcpy(tmp, &acc[b], sizeof tmp);
            float* dst = out.data.data() + (cb0 + b) * N + row + xc;
            if (accumulate) {
              for (int x = 0; x < n; ++x) dst[x] += tmp[x];
            } else {
              std::memcpy(dst, tmp, sizeof(float) * n);
            }
          }
        }
      }
    }
  }
}

int block_for(int cout) { return cout <= 4 ? 4 : 8; }

/// `wt` is laid out [(ci * 27 + t) * cout + co] on entry; padded to the block.
void correlate(const Activation& in, int cout, const std::vector<float>& wt, const float* bias, int dil,
               Activation& out, bool accumulate) {
  const Shape3 s = in.shape;
  const int cin = in.channels;
  if (!accumulate) out = Activation(cout, s);
  const int cb = block_for(cout);
  const int cout_pad = round_up(cout, cb);
  std::vector<float> wpad(static_cast<std::size_t>(cin) * kTaps * cout_pad, 0.0f);
  for (std::size_t k = 0; k < static_cast<std::size_t>(cin) * kTaps; ++k)
    for (int co = 0; co < cout; ++co) wpad[k * cout_pad + co] = wt[k * cout + co];
  const Padded p(in, dil, cin);
  if (cb == 4) {
    correlate_blocked<4>(p, cin, s, cout, cout_pad, wpad, bias, dil, out, accumulate);
  } else {
    correlate_blocked<8>(p, cin, s, cout, cout_pad, wpad, bias, dil, out, accumulate);
  }
}

template <int CB>
void weight_grad_blocked(const Padded& in, int cin, const Padded& g, int cout, Shape3 s, int dil,
                         std::vector<double>& accw) {
  const int H = s.height, W = s.width;
  const int Wv = round_up(W, kLanes);
  alignas(64) float tmp[kLanes];
  for (int ci = 0; ci < cin; ++ci) {
    for (int cb0 = 0; cb0 < cout; cb0 += CB) {
      const int nb = std::min(CB, cout - cb0);
      for (int z = 0; z < s.depth; ++z) {
        for (int kz = 0; kz < 3; ++kz) {
          const int zp = z + in.pad + (kz - 1) * dil;
          for (int ky = 0; ky < 3; ++ky) {
            vfloat acc[CB][3];
            for (int b = 0; b < CB; ++b) acc[b][0] = acc[b][1] = acc[b][2] = vfloat{};
            for (int y = 0; y < H; ++y) {
              const float* src = in.at(ci, zp, y + in.pad + (ky - 1) * dil) + in.pad - dil;
              for (int xc = 0; xc < Wv; xc += kLanes) {
                const vfloat s0 = load(src + xc);
                const vfloat s1 = load(src + xc + dil);
                const vfloat s2 = load(src + xc + 2 * dil);
                for (int b = 0; b < CB; ++b) {
                  // Rows of `g` past the last channel are zero, as are lanes past W.
                  const vfloat gv = load(g.at(cb0 + b, z, y) + xc);
                  acc[b][0] += gv * s0;
                  acc[b][1] += gv * s1;
                  acc[b][2] += gv * s2;
                }
              }
            }
            for (int b = 0; b < nb; ++b) {
              for (int kx = 0; kx < 3; ++kx) {
                std::memcpy(tmp, &acc[b][kx], sizeof tmp);
                double sum = 0.0;
                for (int l = 0; l < kLanes; ++l) sum += tmp[l];
                accw[(static_cast<std::size_t>(cb0 + b) * cin + ci) * kTaps + kz * 9 + ky * 3 + kx] += sum;
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Activation::Activation(int channels, Shape3 shape, float fill)
    : channels(channels), shape(shape), data(static_cast<std::size_t>(channels) * shape.voxels(), fill) {}

Activation Activation::stack(std::span<const Volume* const> volumes) {
  if (volumes.empty()) fail(ErrorKind::kInvalidArgument, "cannot stack zero volumes");
  const Shape3 s = volumes.front()->shape();
  Activation a(static_cast<int>(volumes.size()), s);
  for (std::size_t c = 0; c < volumes.size(); ++c) {
    require_same_shape(volumes[c]->shape(), s, "input channels");
    std::copy(volumes[c]->values().begin(), volumes[c]->values().end(),
              a.data.begin() + static_cast<std::ptrdiff_t>(c * s.voxels()));
  }
  return a;
}

void conv3d_forward(const Activation& in, const Tensor& weight, const Tensor& bias, int dilation,
                    Activation& out) {
  check_conv_weight(weight, in.channels, 3);
  const int cout = weight.shape[0];
  const int cin = in.channels;
  std::vector<float> wt(static_cast<std::size_t>(cin) * kTaps * cout);
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int t = 0; t < kTaps; ++t)
        wt[(static_cast<std::size_t>(ci) * kTaps + t) * cout + co] =
            weight.data[(static_cast<std::size_t>(co) * cin + ci) * kTaps + t];
  correlate(in, cout, wt, bias.data.data(), dilation, out, false);
}

void conv3d_backward_input(const Activation& d_out, const Tensor& weight, int dilation,
                           Activation& d_in) {
  const int cout = weight.shape[0];
  const int cin = weight.shape[1];
  if (d_out.channels != cout) fail(ErrorKind::kShapeMismatch, "conv backward: gradient channels");
  // Transposed correlation: swap channel roles and mirror the taps.
  std::vector<float> wt(static_cast<std::size_t>(cout) * kTaps * cin);
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int t = 0; t < kTaps; ++t)
        wt[(static_cast<std::size_t>(co) * kTaps + (kTaps - 1 - t)) * cin + ci] =
            weight.data[(static_cast<std::size_t>(co) * cin + ci) * kTaps + t];
  if (d_in.channels != cin || d_in.shape != d_out.shape) d_in = Activation(cin, d_out.shape);
  correlate(d_out, cin, wt, nullptr, dilation, d_in, true);
}

void conv3d_backward_params(const Activation& in, const Activation& d_out, int dilation,
                            Tensor& d_weight, Tensor& d_bias) {
  const Shape3 s = in.shape;
  const std::size_t N = s.voxels();
  const int cin = in.channels;
  const int cout = d_out.channels;
  const int cb = block_for(cout);
  const Padded p(in, dilation, cin);
  const Padded g(d_out, 0, round_up(cout, cb));
  std::vector<double> accw(static_cast<std::size_t>(cout) * cin * kTaps, 0.0);
  if (cb == 4) {
    weight_grad_blocked<4>(p, cin, g, cout, s, dilation, accw);
  } else {
    weight_grad_blocked<8>(p, cin, g, cout, s, dilation, accw);
  }
  for (std::size_t i = 0; i < accw.size(); ++i) d_weight.data[i] += static_cast<float>(accw[i]);
  for (int co = 0; co < cout; ++co) {
    double sum = 0.0;
    const float* gp = d_out.data.data() + co * N;
    for (std::size_t i = 0; i < N; ++i) sum += gp[i];
    d_bias.data[co] += static_cast<float>(sum);
  }
}

void pointwise_forward(const Activation& in, const Tensor& weight, const Tensor& bias,
                       Activation& out) {
  check_conv_weight(weight, in.channels, 1);
  const int cout = weight.shape[0];
  const int cin = in.channels;
  const std::size_t N = in.voxels();
  out = Activation(cout, in.shape);
  for (int co = 0; co < cout; ++co) {
    float* dst = out.data.data() + co * N;
    std::fill_n(dst, N, bias.data[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const float w = weight.data[static_cast<std::size_t>(co) * cin + ci];
      const float* src = in.data.data() + ci * N;
#pragma omp simd
      for (std::size_t i = 0; i < N; ++i) dst[i] += w * src[i];
    }
  }
}

void pointwise_backward(const Activation& in, const Activation& d_out, const Tensor& weight,
                        Tensor& d_weight, Tensor& d_bias, Activation* d_in) {
  const int cout = d_out.channels;
  const int cin = in.channels;
  const std::size_t N = in.voxels();
  for (int co = 0; co < cout; ++co) {
    const float* g = d_out.data.data() + co * N;
    double bsum = 0.0;
    for (std::size_t i = 0; i < N; ++i) bsum += g[i];
    d_bias.data[co] += static_cast<float>(bsum);
    for (int ci = 0; ci < cin; ++ci) {
      const float* x = in.data.data() + ci * N;
      double sum = 0.0;
      for (std::size_t i = 0; i < N; ++i) sum += static_cast<double>(g[i]) * x[i];
      d_weight.data[static_cast<std::size_t>(co) * cin + ci] += static_cast<float>(sum);
    }
  }
  if (d_in) {
    *d_in = Activation(cin, in.shape);
    for (int ci = 0; ci < cin; ++ci) {
      float* dst = d_in->data.data() + ci * N;
      for (int co = 0; co < cout; ++co) {
        const float w = weight.data[static_cast<std::size_t>(co) * cin + ci];
        const float* g = d_out.data.data() + co * N;
#pragma omp simd
        for (std::size_t i = 0; i < N; ++i) dst[i] += w * g[i];
      }
    }
  }
}

void softmax_channels(const Activation& logits, Activation& probs) {
  const std::size_t N = logits.voxels();
  const int C = logits.channels;
  probs = Activation(C, logits.shape);
  for (std::size_t i = 0; i < N; ++i) {
    float mx = logits.data[i];
    for (int c = 1; c < C; ++c) mx = std::max(mx, logits.data[c * N + i]);
    float sum = 0.0f;
    for (int c = 0; c < C; ++c) {
      const float e = std::exp(logits.data[c * N + i] - mx);
      probs.data[c * N + i] = e;
      sum += e;
    }
    const float inv = 1.0f / sum;
    for (int c = 0; c < C; ++c) probs.data[c * N + i] *= inv;
  }
}

float sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

void xavier_fill(Tensor& weight, Rng& rng) {
  int receptive = 1;
  for (std::size_t i = 2; i < weight.shape.size(); ++i) receptive *= weight.shape[i];
  const double fan_out = static_cast<double>(weight.shape[0]) * receptive;
  const double fan_in = static_cast<double>(weight.shape.size() > 1 ? weight.shape[1] : 1) * receptive;
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (float& w : weight.data) w = static_cast<float>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------

NetWidths NetWidths::desk() {
  NetWidths w;
  w.shared = {8, 8, 16};
  w.head = {16, 8};
  w.conf = {8, 8, 16, 16, 8, 8};
  return w;
}

NetWidths NetWidths::tiny() {
  NetWidths w;
  w.shared = {2, 2, 2};
  w.head = {2, 2};
  w.conf = {2, 2, 2, 2, 2, 2};
  return w;
}

void to_json(nlohmann::json& j, const NetWidths& w) {
  j = {{"shared", w.shared},   {"shared_dilation", w.shared_dilation},
       {"head", w.head},       {"head_dilation", w.head_dilation},
       {"conf", w.conf},       {"conf_dilation", w.conf_dilation}};
}

void from_json(const nlohmann::json& j, NetWidths& w) {
  NetWidths d;
  w.shared = j.value("shared", d.shared);
  w.shared_dilation = j.value("shared_dilation", d.shared_dilation);
  w.head = j.value("head", d.head);
  w.head_dilation = j.value("head_dilation", d.head_dilation);
  w.conf = j.value("conf", d.conf);
  w.conf_dilation = j.value("conf_dilation", d.conf_dilation);
}

namespace {

std::vector<ConvBlockSpec> chain(int in, const std::vector<int>& widths, const std::vector<int>& dil,
                                 const char* what) {
  if (widths.size() != dil.size()) {
    fail(ErrorKind::kValidation, std::string(what) + ": widths and dilations differ in length");
  }
  std::vector<ConvBlockSpec> blocks;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1 || dil[i] < 1) fail(ErrorKind::kValidation, std::string(what) + ": non-positive entry");
    blocks.push_back({in, widths[i], dil[i]});
    in = widths[i];
  }
  return blocks;
}

nlohmann::json blocks_json(const std::vector<ConvBlockSpec>& blocks) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& b : blocks) out.push_back({b.in_channels, b.out_channels, b.dilation});
  return out;
}

}  // namespace

SegNetSpec SegNetSpec::from_widths(const NetWidths& w, int actions) {
  if (w.shared.size() != 3) fail(ErrorKind::kValidation, "segmentation trunk needs 3 blocks");
  if (w.head.size() != 2) fail(ErrorKind::kValidation, "segmentation heads need 2 blocks");
  SegNetSpec s;
  s.shared_blocks = chain(kSegInputChannels, w.shared, w.shared_dilation, "shared");
  s.policy_blocks = chain(w.shared.back(), w.head, w.head_dilation, "policy");
  s.value_blocks = chain(w.shared.back(), w.head, w.head_dilation, "value");
  s.actions = actions;
  return s;
}

nlohmann::json SegNetSpec::to_json() const {
  return {{"kind", "segnet"},
          {"shared", blocks_json(shared_blocks)},
          {"policy", blocks_json(policy_blocks)},
          {"value", blocks_json(value_blocks)},
          {"actions", actions}};
}

ConfNetSpec ConfNetSpec::from_widths(const NetWidths& w) {
  if (w.conf.size() != 6) fail(ErrorKind::kValidation, "confidence network needs 6 blocks");
  ConfNetSpec s;
  s.blocks = chain(kConfInputChannels, w.conf, w.conf_dilation, "conf");
  return s;
}

nlohmann::json ConfNetSpec::to_json() const {
  return {{"kind", "confnet"}, {"blocks", blocks_json(blocks)}};
}

// ---------------------------------------------------------------------------

ConvStack::ConvStack(std::string prefix, std::vector<ConvBlockSpec> blocks) : prefix_(std::move(prefix)) {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (int c = 0; c < 2; ++c) {
      const std::string base = prefix_ + ".block" + std::to_string(b) + ".conv" + std::to_string(c);
      layers_.push_back({base + ".weight", base + ".bias",
                         c == 0 ? blocks[b].in_channels : blocks[b].out_channels,
                         blocks[b].out_channels, blocks[b].dilation});
    }
  }
}

int ConvStack::out_channels() const { return layers_.empty() ? 0 : layers_.back().out_channels; }

void ConvStack::add_params(NamedTensorSet& params, Rng* rng) const {
  for (const auto& l : layers_) {
    Tensor w = Tensor::zeros({l.out_channels, l.in_channels, 3, 3, 3});
    if (rng) xavier_fill(w, *rng);
    params.insert(l.weight, std::move(w));
    params.insert(l.bias, Tensor::zeros({l.out_channels}));
  }
}

const Activation& ConvStack::forward(const NamedTensorSet& params, const Activation& input,
                                     Tape& tape) const {
  tape.outputs.resize(layers_.size());
  const Activation* prev = &input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    Activation& out = tape.outputs[i];
    conv3d_forward(*prev, params.at(l.weight), params.at(l.bias), l.dilation, out);
    for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
    prev = &out;
  }
  return *prev;
}

void ConvStack::backward(const NamedTensorSet& params, const Activation& input, const Tape& tape,
                         Activation d_output, NamedTensorSet& grads, Activation* d_input) const {
  Activation d = std::move(d_output);
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const auto& l = layers_[k];
    const Activation& post = tape.outputs[k];
    for (std::size_t i = 0; i < d.data.size(); ++i) {
      if (!(post.data[i] > 0.0f)) d.data[i] = 0.0f;
    }
    const Activation& in = k == 0 ? input : tape.outputs[k - 1];
    conv3d_backward_params(in, d, l.dilation, grads.at(l.weight), grads.at(l.bias));
    if (k > 0 || d_input) {
      Activation d_prev(l.in_channels, in.shape);
      conv3d_backward_input(d, params.at(l.weight), l.dilation, d_prev);
      d = std::move(d_prev);
    }
  }
  if (d_input) *d_input = std::move(d);
}

// ---------------------------------------------------------------------------

SegNet::SegNet(SegNetSpec spec)
    : spec_(std::move(spec)),
      trunk_("shared", spec_.shared_blocks),
      policy_("policy", spec_.policy_blocks),
      value_("value", spec_.value_blocks) {
  if (spec_.shared_blocks.empty() || spec_.shared_blocks.front().in_channels != kSegInputChannels) {
    fail(ErrorKind::kValidation, "segmentation trunk must take 3 input channels");
  }
}

NamedTensorSet SegNet::init(Rng& rng) const {
  NamedTensorSet p;
  trunk_.add_params(p, &rng);
  policy_.add_params(p, &rng);
  value_.add_params(p, &rng);
  Tensor pw = Tensor::zeros({spec_.actions, policy_.out_channels(), 1, 1, 1});
  xavier_fill(pw, rng);
  p.insert("policy.proj.weight", std::move(pw));
  p.insert("policy.proj.bias", Tensor::zeros({spec_.actions}));
  Tensor vw = Tensor::zeros({1, value_.out_channels(), 1, 1, 1});
  xavier_fill(vw, rng);
  p.insert("value.proj.weight", std::move(vw));
  p.insert("value.proj.bias", Tensor::zeros({1}));
  return p;
}

NamedTensorSet SegNet::zero_params() const {
  NamedTensorSet p;
  trunk_.add_params(p, nullptr);
  policy_.add_params(p, nullptr);
  value_.add_params(p, nullptr);
  p.insert("policy.proj.weight", Tensor::zeros({spec_.actions, policy_.out_channels(), 1, 1, 1}));
  p.insert("policy.proj.bias", Tensor::zeros({spec_.actions}));
  p.insert("value.proj.weight", Tensor::zeros({1, value_.out_channels(), 1, 1, 1}));
  p.insert("value.proj.bias", Tensor::zeros({1}));
  return p;
}

void SegNet::validate(const NamedTensorSet& params) const {
  if (!zero_params().same_layout(params)) {
    fail(ErrorKind::kValidation, "parameter set does not match the segmentation architecture");
  }
}

SegNet::Output SegNet::forward(const NamedTensorSet& params, const Volume& image, const Volume& prob,
                               const Volume& hint) const {
  require_same_shape(image.shape(), prob.shape(), "segmentation input");
  require_same_shape(image.shape(), hint.shape(), "segmentation input");
  Output out;
  const Volume* channels[] = {&image, &prob, &hint};
  out.input = Activation::stack(channels);
  const Activation& features = trunk_.forward(params, out.input, out.trunk_tape);
  const Activation& pf = policy_.forward(params, features, out.policy_tape);
  pointwise_forward(pf, params.at("policy.proj.weight"), params.at("policy.proj.bias"), out.policy_logits);
  softmax_channels(out.policy_logits, out.policy);
  const Activation& vf = value_.forward(params, features, out.value_tape);
  pointwise_forward(vf, params.at("value.proj.weight"), params.at("value.proj.bias"), out.value);
  return out;
}

NamedTensorSet SegNet::backward(const NamedTensorSet& params, const Output& out,
                                std::span<const float> d_logits, std::span<const float> d_value) const {
  NamedTensorSet grads = params.zeros_like();
  const Activation& features = out.trunk_tape.outputs.back();
  Activation d_features;
  bool have_features = false;

  auto add_into = [&](Activation&& d) {
    if (!have_features) {
      d_features = std::move(d);
      have_features = true;
    } else {
      for (std::size_t i = 0; i < d.data.size(); ++i) d_features.data[i] += d.data[i];
    }
  };

  if (!d_logits.empty()) {
    if (d_logits.size() != out.policy_logits.data.size()) {
      fail(ErrorKind::kShapeMismatch, "policy gradient size");
    }
    Activation g(out.policy_logits.channels, out.policy_logits.shape);
    std::copy(d_logits.begin(), d_logits.end(), g.data.begin());
    Activation d_head;
    pointwise_backward(out.policy_tape.outputs.back(), g, params.at("policy.proj.weight"),
                       grads.at("policy.proj.weight"), grads.at("policy.proj.bias"), &d_head);
    Activation d_in;
    policy_.backward(params, features, out.policy_tape, std::move(d_head), grads, &d_in);
    add_into(std::move(d_in));
  }
  if (!d_value.empty()) {
    if (d_value.size() != out.value.data.size()) fail(ErrorKind::kShapeMismatch, "value gradient size");
    Activation g(1, out.value.shape);
    std::copy(d_value.begin(), d_value.end(), g.data.begin());
    Activation d_head;
    pointwise_backward(out.value_tape.outputs.back(), g, params.at("value.proj.weight"),
                       grads.at("value.proj.weight"), grads.at("value.proj.bias"), &d_head);
    Activation d_in;
    value_.backward(params, features, out.value_tape, std::move(d_head), grads, &d_in);
    add_into(std::move(d_in));
  }
  if (have_features) trunk_.backward(params, out.input, out.trunk_tape, std::move(d_features), grads, nullptr);
  return grads;
}

std::vector<std::string> SegNet::policy_param_names() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : zero_params()) {
    if (name.rfind("value.", 0) != 0) names.push_back(name);
  }
  return names;
}

std::vector<std::string> SegNet::value_param_names() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : zero_params()) {
    if (name.rfind("policy.", 0) != 0) names.push_back(name);
  }
  return names;
}

// ---------------------------------------------------------------------------

ConfNet::ConfNet(ConfNetSpec spec) : spec_(std::move(spec)), stack_("conf", spec_.blocks) {
  if (spec_.blocks.empty() || spec_.blocks.front().in_channels != kConfInputChannels) {
    fail(ErrorKind::kValidation, "confidence network must take 4 input channels");
  }
}

NamedTensorSet ConfNet::init(Rng& rng) const {
  NamedTensorSet p;
  stack_.add_params(p, &rng);
  Tensor w = Tensor::zeros({1, stack_.out_channels(), 1, 1, 1});
  xavier_fill(w, rng);
  p.insert("conf.proj.weight", std::move(w));
  p.insert("conf.proj.bias", Tensor::zeros({1}));
  return p;
}

NamedTensorSet ConfNet::zero_params() const {
  NamedTensorSet p;
  stack_.add_params(p, nullptr);
  p.insert("conf.proj.weight", Tensor::zeros({1, stack_.out_channels(), 1, 1, 1}));
  p.insert("conf.proj.bias", Tensor::zeros({1}));
  return p;
}

void ConfNet::validate(const NamedTensorSet& params) const {
  if (!zero_params().same_layout(params)) {
    fail(ErrorKind::kValidation, "parameter set does not match the confidence architecture");
  }
}

ConfNet::Output ConfNet::forward(const NamedTensorSet& params, const Volume& image, const Volume& prob,
                                 const Volume& hint, const Volume& action) const {
  require_same_shape(image.shape(), prob.shape(), "confidence input");
  require_same_shape(image.shape(), hint.shape(), "confidence input");
  require_same_shape(image.shape(), action.shape(), "confidence input");
  Output out;
  Volume scaled = action;
  for (float& a : scaled.values()) a /= 0.4f;
  const Volume* channels[] = {&image, &prob, &hint, &scaled};
  out.input = Activation::stack(channels);
  const Activation& f = stack_.forward(params, out.input, out.tape);
  pointwise_forward(f, params.at("conf.proj.weight"), params.at("conf.proj.bias"), out.logit);
  out.confidence = Volume(image.shape());
  for (std::size_t i = 0; i < out.logit.data.size(); ++i) out.confidence[i] = sigmoid(out.logit.data[i]);
  return out;
}

NamedTensorSet ConfNet::backward(const NamedTensorSet& params, const Output& out,
                                 std::span<const float> d_logit) const {
  NamedTensorSet grads = params.zeros_like();
  if (d_logit.size() != out.logit.data.size()) fail(ErrorKind::kShapeMismatch, "confidence gradient size");
  Activation g(1, out.logit.shape);
  std::copy(d_logit.begin(), d_logit.end(), g.data.begin());
  Activation d_head;
  pointwise_backward(out.tape.outputs.back(), g, params.at("conf.proj.weight"),
                     grads.at("conf.proj.weight"), grads.at("conf.proj.bias"), &d_head);
  stack_.backward(params, out.input, out.tape, std::move(d_head), grads, nullptr);
  return grads;
}

// ---------------------------------------------------------------------------

Adam::Adam(AdamConfig cfg, const NamedTensorSet& params, const std::vector<std::string>& names)
    : cfg_(cfg) {
  for (const auto& name : names) {
    m_.insert(name, Tensor::zeros(params.at(name).shape));
    v_.insert(name, Tensor::zeros(params.at(name).shape));
  }
}

Adam::Adam(AdamConfig cfg, const NamedTensorSet& params) : cfg_(cfg), m_(params.zeros_like()), v_(params.zeros_like()) {}

void Adam::step(NamedTensorSet& params, const NamedTensorSet& grads) {
  ++step_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));
  const float step_size = static_cast<float>(cfg_.lr / bc1);
  const float bc2_sqrt = static_cast<float>(std::sqrt(bc2));
  for (auto& [name, m] : m_) {
    Tensor& p = params.at(name);
    const Tensor& g = grads.at(name);
    Tensor& v = v_.at(name);
    if (g.shape != p.shape || m.shape != p.shape) fail(ErrorKind::kShapeMismatch, "adam: shape of " + name);
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const float gi = g.data[i];
      m.data[i] = cfg_.beta1 * m.data[i] + (1.0f - cfg_.beta1) * gi;
      v.data[i] = cfg_.beta2 * v.data[i] + (1.0f - cfg_.beta2) * gi * gi;
      const float denom = std::sqrt(v.data[i]) / bc2_sqrt + cfg_.eps;
      p.data[i] -= step_size * m.data[i] / denom;
    }
  }
}

void Adam::save(NamedTensorSet& out, const std::string& prefix) const {
  for (const auto& [name, t] : m_) out.insert(prefix + "m." + name, t);
  for (const auto& [name, t] : v_) out.insert(prefix + "v." + name, t);
}

void Adam::load(const NamedTensorSet& in, const std::string& prefix, long steps) {
  for (auto& [name, t] : m_) {
    const Tensor& src = in.at(prefix + "m." + name);
    if (src.shape != t.shape) fail(ErrorKind::kShapeMismatch, "adam moment " + name);
    t = src;
  }
  for (auto& [name, t] : v_) {
    const Tensor& src = in.at(prefix + "v." + name);
    if (src.shape != t.shape) fail(ErrorKind::kShapeMismatch, "adam moment " + name);
    t = src;
  }
  step_ = steps;
}

}  // namespace mecca::nn
