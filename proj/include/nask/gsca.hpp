#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nask/tensor.hpp"

namespace nask {

// Attention-map normalization. kSoftmax row-normalizes theta*phi; kLinear
// applies the raw matrix product (the literal text of the block's formula).
enum class AttentionNorm { kSoftmax, kLinear };

enum class CostModel { kPaper, kImplemented };

struct GscaConfig {
  int channels = 0;
  int groups = 1;
  AttentionNorm normalization = AttentionNorm::kSoftmax;
  // Forces the channel weights to zero, reducing the block to the identity
  // shortcut. Used by ablations and the residual-identity check.
  bool bypass_lambda = false;

  void validate() const {
    if (channels <= 0 || groups <= 0)
      throw ConfigError("gsca: channels and groups must be positive");
    if (channels % groups != 0)
      throw ConfigError("gsca: groups (" + std::to_string(groups) +
                        ") must divide channels (" + std::to_string(channels) + ")");
  }

  int group_width() const { return channels / groups; }
};

// Learnable state of one block: the theta/phi/g 1x1 projections plus the
// global channel branch (two 3x3 convs, then one fully connected layer).
struct GscaParams {
  Tensor theta_w;  // [C, C, 1, 1]
  Tensor phi_w;    // [C, C, 1, 1]
  Tensor g_w;      // [C, C, 1, 1]
  Tensor branch_conv1_w, branch_conv1_b;  // [C, C, 3, 3], [C]
  Tensor branch_conv2_w, branch_conv2_b;
  Tensor fc_w;  // [C, C]
  Tensor fc_b;  // [C]

  static GscaParams init(int channels, Rng& rng) {
    GscaParams p;
    const double s1 = std::sqrt(2.0 / channels);
    const double s3 = std::sqrt(2.0 / (9.0 * channels));
    p.theta_w = Tensor::randn({channels, channels, 1, 1}, rng, s1, true);
    p.phi_w = Tensor::randn({channels, channels, 1, 1}, rng, s1, true);
    p.g_w = Tensor::randn({channels, channels, 1, 1}, rng, s1, true);
    p.branch_conv1_w = Tensor::randn({channels, channels, 3, 3}, rng, s3, true);
    p.branch_conv1_b = Tensor::zeros({channels}, true);
    p.branch_conv2_w = Tensor::randn({channels, channels, 3, 3}, rng, s3, true);
    p.branch_conv2_b = Tensor::zeros({channels}, true);
    // Zero FC start: sigmoid(0) = 0.5, so every group contributes from the
    // first step without swamping the shortcut.
    p.fc_w = Tensor::zeros({channels, channels}, true);
    p.fc_b = Tensor::zeros({channels}, true);
    return p;
  }

  std::vector<Tensor> parameters() const {
    return {theta_w,         phi_w,           g_w,
            branch_conv1_w,  branch_conv1_b,  branch_conv2_w,
            branch_conv2_b,  fc_w,            fc_b};
  }

  std::vector<std::string> parameter_names() const {
    return {"gsca_theta_w",        "gsca_phi_w",          "gsca_g_w",
            "gsca_branch_conv1_w", "gsca_branch_conv1_b", "gsca_branch_conv2_w",
            "gsca_branch_conv2_b", "gsca_fc_w",           "gsca_fc_b"};
  }
};

// Intra-group spatial-channel attention over one group of width C'.
// theta/phi/g reshape to (HW)xC', C'x(HW) and (HW)xC'; the (HW)x(HW)
// attention map is row-normalized (or left linear) and applied to g.
inline Tensor group_attention(Tape& tape, const Tensor& theta_out, const Tensor& phi_out,
                              const Tensor& g_out, AttentionNorm norm) {
  if (theta_out.rank() != 3 || theta_out.shape() != phi_out.shape() ||
      theta_out.shape() != g_out.shape())
    throw DimensionError("group_attention: theta/phi/g shapes must agree, got " +
                         theta_out.shape_string() + ", " + phi_out.shape_string() +
                         ", " + g_out.shape_string());
  const int cw = theta_out.dim(0), h = theta_out.dim(1), w = theta_out.dim(2);
  const int hw = h * w;
  Tensor theta_m = tape.transpose2d(tape.reshape(theta_out, {cw, hw}));  // (HW)xC'
  Tensor phi_m = tape.reshape(phi_out, {cw, hw});                        // C'x(HW)
  Tensor g_m = tape.transpose2d(tape.reshape(g_out, {cw, hw}));          // (HW)xC'
  Tensor att = tape.matmul(theta_m, phi_m);                              // (HW)x(HW)
  if (norm == AttentionNorm::kSoftmax) att = tape.softmax(att, 1);
  Tensor out_m = tape.matmul(att, g_m);  // (HW)xC'
  return tape.reshape(tape.transpose2d(out_m), {cw, h, w});
}

// Global channel branch: two 3x3 convs with ReLU, global average pooling,
// one fully connected layer, sigmoid. Output lies in (0,1)^C.
inline Tensor global_channel_weights(Tape& tape, const Tensor& x, const GscaParams& p) {
  Tensor f = tape.relu(tape.conv2d(x, p.branch_conv1_w, p.branch_conv1_b));
  f = tape.relu(tape.conv2d(f, p.branch_conv2_w, p.branch_conv2_b));
  Tensor pooled = tape.global_avg_pool(f);  // [C]
  const int c = x.dim(0);
  Tensor fc = tape.matmul(p.fc_w, tape.reshape(pooled, {c, 1}));  // [C,1]
  fc = tape.add(fc, tape.reshape(p.fc_b, {c, 1}));
  return tape.reshape(tape.sigmoid(fc), {c});
}

// Grouped attention and concat, before channel weighting: the Y' maps of
// all G groups stitched back into a CxHxW tensor.
inline Tensor gsca_attention_concat(Tape& tape, const Tensor& x, const GscaParams& p,
                                    const GscaConfig& cfg) {
  cfg.validate();
  if (x.rank() != 3 || x.dim(0) != cfg.channels)
    throw DimensionError("gsca: input " + x.shape_string() + " does not carry " +
                         std::to_string(cfg.channels) + " channels");
  Tensor theta = tape.conv2d(x, p.theta_w);
  Tensor phi = tape.conv2d(x, p.phi_w);
  Tensor g = tape.conv2d(x, p.g_w);
  const int cw = cfg.group_width();
  std::vector<Tensor> groups;
  groups.reserve(static_cast<size_t>(cfg.groups));
  for (int gi = 0; gi < cfg.groups; ++gi) {
    const int c0 = gi * cw, c1 = (gi + 1) * cw;
    groups.push_back(group_attention(tape, tape.slice_channels(theta, c0, c1),
                                     tape.slice_channels(phi, c0, c1),
                                     tape.slice_channels(g, c0, c1),
                                     cfg.normalization));
  }
  return groups.size() == 1 ? groups[0] : tape.concat_channels(groups);
}

// Full block: Z = X + concat_i(lambda_i * Y'_i).
inline Tensor gsca_forward(Tape& tape, const Tensor& x, const GscaParams& p,
                           const GscaConfig& cfg) {
  Tensor y = gsca_attention_concat(tape, x, p, cfg);
  Tensor lam = cfg.bypass_lambda ? Tensor::zeros({cfg.channels})
                                 : global_channel_weights(tape, x, p);
  return tape.add(x, tape.scale_channels(y, lam));
}

// Multiply-accumulate cost of the grouped attention stage.
//  - kPaper: the stated complexity figure, (H*W*C)^2 / G.
//  - kImplemented: the exact count of this implementation's two matrix
//    products per group, 2*G*(HW)^2*C' = 2*(HW)^2*C.
inline std::uint64_t attention_cost(int h, int w, int c, int g, CostModel model) {
  if (g <= 0 || c % g != 0) throw ConfigError("attention_cost: G must divide C");
  const std::uint64_t hw = static_cast<std::uint64_t>(h) * static_cast<std::uint64_t>(w);
  if (model == CostModel::kPaper) {
    const std::uint64_t hwc = hw * static_cast<std::uint64_t>(c);
    return hwc * hwc / static_cast<std::uint64_t>(g);
  }
  return 2 * hw * hw * static_cast<std::uint64_t>(c);
}

}  // namespace nask
