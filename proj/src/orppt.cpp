#include "fusedet/orppt.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fusedet/ops.hpp"

namespace fusedet {

namespace {

std::string stage(std::size_t k) { return std::string(kBackbonePrefix) + "s" + std::to_string(k); }
std::string branch_name(std::size_t l) { return std::string(kFusionPrefix) + "branch" + std::to_string(l); }

void add_conv(ParamSet& params, const std::string& name, std::size_t out, std::size_t in, std::size_t k, SplitMix64& rng,
              double gain = std::sqrt(2.0), bool shared = false) {
  const double std = gain / std::sqrt(static_cast<double>(in * k * k));
  params.add(name + ".w", rng.normal_tensor(Shape{out, in, k, k}, std), shared);
  params.add(name + ".b", Tensor(Shape{out}), shared);
}

const Var& param(const Bindings& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

Var conv(const Bindings& params, const std::string& name, const Var& x, Conv2dOptions opts) {
  const Var& w = param(params, name + ".w");
  const Var& b = param(params, name + ".b");
  return conv2d(x, w, &b, opts);
}

Var conv_same(const Bindings& params, const std::string& name, const Var& x) {
  const std::size_t k = param(params, name + ".w").shape()[2];
  return conv(params, name, x, {1, k / 2});
}

Var as_planes(const Var& image) {
  if (image.shape().size() != 2) throw ShapeError("expected an H x W image, got " + shape_string(image.shape()));
  return reshape(image, Shape{1, image.shape()[0], image.shape()[1]});
}

}  // namespace

void OrpptConfig::validate() const {
  if (backbone_channels.empty() || backbone_channels.size() != backbone_strides.size())
    throw std::invalid_argument("orppt: backbone channel and stride lists must be non-empty and equally long");
  for (std::size_t s : backbone_strides)
    if (s != 1 && s != 2) throw std::invalid_argument("orppt: backbone strides must be 1 or 2");
  if (region_channels == 0 || prompts == 0 || fuse_channels == 0 || recon_stages == 0)
    throw std::invalid_argument("orppt: channel counts and stage counts must be positive");
  if (branches.empty() || branches.front() != 0)
    throw std::invalid_argument("orppt: branch set must start with the pixel branch 0");
  for (std::size_t i = 1; i < branches.size(); ++i)
    if (branches[i] <= branches[i - 1]) throw std::invalid_argument("orppt: branch set must be strictly increasing");
  if (branches.back() > levels())
    throw std::invalid_argument("orppt: branch " + std::to_string(branches.back()) + " exceeds the " +
                                std::to_string(levels()) + " backbone levels");
}

void init_backbone(ParamSet& params, const OrpptConfig& config, SplitMix64& rng) {
  config.validate();
  std::size_t in = 1;
  for (std::size_t k = 0; k < config.levels(); ++k) {
    add_conv(params, stage(k + 1), config.backbone_channels[k], in, 3, rng, std::sqrt(2.0), true);
    in = config.backbone_channels[k];
  }
}

void init_fusion_head(ParamSet& params, const OrpptConfig& config, SplitMix64& rng) {
  config.validate();
  const std::string f = kFusionPrefix;
  add_conv(params, f + "pfmm.c1", config.fuse_channels, 2, 3, rng);
  add_conv(params, f + "pfmm.c2", config.fuse_channels, config.fuse_channels, 3, rng);
  const std::size_t C2 = config.region_channels, M = config.prompts;
  for (std::size_t l : config.branches) {
    if (l == 0) continue;
    const std::string b = branch_name(l);
    add_conv(params, b + ".phi", C2, config.backbone_channels[l - 1], 3, rng);
    params.add(b + ".prompts", rng.normal_tensor(Shape{M, C2}, 1.0 / std::sqrt(static_cast<double>(C2))));
    params.add(b + ".norm.gamma", Tensor(Shape{M}, 1.0));
    params.add(b + ".norm.beta", Tensor(Shape{M}));
    add_conv(params, b + ".align", config.fuse_channels, M * C2, 1, rng, 1.0);
  }
  if (config.branches.size() > 1) {
    add_conv(params, f + "assemble", config.fuse_channels, config.fuse_channels, 1, rng);
    add_conv(params, f + "gate", config.fuse_channels, config.fuse_channels, 1, rng, 1.0);
  }
  for (std::size_t k = 0; k < config.recon_stages; ++k) {
    const bool last = k + 1 == config.recon_stages;
    add_conv(params, f + "recon" + std::to_string(k + 1), last ? 1 : config.fuse_channels, config.fuse_channels, 3, rng,
             last ? 1.0 : std::sqrt(2.0));
  }
}

FeaturePyramid backbone_single(const Bindings& params, const Var& image, const OrpptConfig& config) {
  FeaturePyramid out;
  Var h = as_planes(image);
  for (std::size_t k = 0; k < config.levels(); ++k) {
    h = relu(conv(params, stage(k + 1), h, {config.backbone_strides[k], 1}));
    out.levels.push_back(h);
  }
  return out;
}

FeaturePyramid backbone_forward(const Bindings& params, const Var& visible, const Var& infrared,
                                const OrpptConfig& config) {
  if (visible.shape() != infrared.shape())
    throw ShapeError("backbone: modality shapes differ " + shape_string(visible.shape()) + " vs " +
                     shape_string(infrared.shape()));
  const FeaturePyramid fx = backbone_single(params, visible, config);
  const FeaturePyramid fy = backbone_single(params, infrared, config);
  FeaturePyramid out;
  for (std::size_t k = 0; k < fx.levels.size(); ++k) out.levels.push_back(fx.levels[k] + fy.levels[k]);
  return out;
}

Var region_mask(const Var& prompts, const Var& phi, const Var& gamma, const Var& beta) {
  const Shape ps = prompts.shape();
  const Shape fs = phi.shape();
  if (ps.size() != 2 || fs.size() != 3 || ps[1] != fs[0])
    throw ShapeError("region_mask: prompts " + shape_string(ps) + " do not match features " + shape_string(fs));
  const Var scores = matmul(prompts, reshape(phi, Shape{fs[0], fs[1] * fs[2]}));
  return relu(channel_norm(reshape(scores, Shape{ps[0], fs[1], fs[2]}), gamma, beta));
}

Var region_representation(const Var& mask, const Var& phi) { return channel_outer(mask, phi); }

Var pfmm(const Bindings& params, const Var& visible, const Var& infrared) {
  if (visible.shape() != infrared.shape())
    throw ShapeError("pfmm: modality shapes differ " + shape_string(visible.shape()) + " vs " +
                     shape_string(infrared.shape()));
  const std::string f = kFusionPrefix;
  Var h = concat({as_planes(visible), as_planes(infrared)});
  h = relu(conv_same(params, f + "pfmm.c1", h));
  return relu(conv_same(params, f + "pfmm.c2", h));
}

BranchOutput region_branch(const Bindings& params, std::size_t branch, const Var& level) {
  const std::string b = branch_name(branch);
  const Var phi = relu(conv_same(params, b + ".phi", level));
  BranchOutput out;
  out.branch = branch;
  out.mask = region_mask(param(params, b + ".prompts"), phi, param(params, b + ".norm.gamma"),
                         param(params, b + ".norm.beta"));
  out.features = region_representation(out.mask, phi);
  return out;
}

Var assemble_fuse(const Bindings& params, const Var& b0, const std::vector<BranchOutput>& branches,
                  const OrpptConfig& config) {
  const std::string f = kFusionPrefix;
  const std::size_t H = b0.shape()[1], W = b0.shape()[2];
  Var features = b0;
  if (!branches.empty()) {
    Var acc;
    for (const BranchOutput& br : branches) {
      // A 1x1 convolution commutes with nearest upsampling, so align channels first.
      Var aligned = conv(params, branch_name(br.branch) + ".align", br.features, {1, 0});
      const std::size_t h = aligned.shape()[1];
      if (H % h != 0 || W % aligned.shape()[2] != 0 || H / h != W / aligned.shape()[2])
        throw ShapeError("assemble_fuse: branch " + std::to_string(br.branch) + " size " + shape_string(aligned.shape()) +
                         " does not divide " + shape_string(b0.shape()));
      if (H / h > 1) aligned = upsample_nearest(aligned, H / h);
      acc = acc.valid() ? acc + aligned : aligned;
    }
    const Var region = relu(conv(params, f + "assemble", acc, {1, 0}));
    const Var gate = sigmoid(conv(params, f + "gate", region, {1, 0}));
    features = b0 * gate + b0;
  }
  Var h = features;
  for (std::size_t k = 0; k < config.recon_stages; ++k) {
    h = conv_same(params, f + "recon" + std::to_string(k + 1), h);
    h = k + 1 == config.recon_stages ? sigmoid(h) : relu(h);
  }
  return reshape(h, Shape{H, W});
}

FusionOutput orppt_forward(const Bindings& params, const Var& visible, const Var& infrared, const OrpptConfig& config) {
  config.validate();
  FusionOutput out;
  out.pyramid = backbone_forward(params, visible, infrared, config);
  out.b0 = pfmm(params, visible, infrared);
  for (std::size_t l : config.branches)
    if (l != 0) out.branches.push_back(region_branch(params, l, out.pyramid.levels[l - 1]));
  out.fused = assemble_fuse(params, out.b0, out.branches, config);
  return out;
}

}  // namespace fusedet
