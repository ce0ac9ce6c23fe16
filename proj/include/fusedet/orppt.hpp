#pragma once

#include <vector>

#include "fusedet/params.hpp"
#include "fusedet/rng.hpp"

namespace fusedet {

/// Sizes of the fusion network. Branch 0 is the pixel branch; branch l >= 1
/// reads backbone level l.
struct OrpptConfig {
  std::vector<std::size_t> backbone_channels{8, 16, 32, 32};
  std::vector<std::size_t> backbone_strides{2, 2, 2, 1};
  std::size_t region_channels = 16;
  std::size_t prompts = 4;
  std::size_t fuse_channels = 8;
  std::size_t recon_stages = 5;
  std::vector<std::size_t> branches{0, 1, 2, 3};

  std::size_t levels() const noexcept { return backbone_channels.size(); }
  /// Throws std::invalid_argument on inconsistent sizes or an invalid branch set.
  void validate() const;
};

inline constexpr const char* kBackbonePrefix = "backbone.";
inline constexpr const char* kFusionPrefix = "fusion.";

/// Adds backbone parameters (marked shared) to `params`.
void init_backbone(ParamSet& params, const OrpptConfig& config, SplitMix64& rng);
/// Adds the fusion-head parameters for the configured branches.
void init_fusion_head(ParamSet& params, const OrpptConfig& config, SplitMix64& rng);

struct FeaturePyramid {
  std::vector<Var> levels;
};

/// Backbone levels for one single-channel H x W image.
FeaturePyramid backbone_single(const Bindings& params, const Var& image, const OrpptConfig& config);
/// Levelwise sum of the backbone applied to each modality with the same weights.
FeaturePyramid backbone_forward(const Bindings& params, const Var& visible, const Var& infrared,
                                const OrpptConfig& config);

/// ReLU(channel_norm(R phi)): prompts M x C, phi C x H x W -> M x H x W.
Var region_mask(const Var& prompts, const Var& phi, const Var& gamma, const Var& beta);
/// Each mask channel times phi, concatenated in prompt order: (M*C) x H x W.
Var region_representation(const Var& mask, const Var& phi);

/// Pixel branch: concat(x, y) then two 3x3 conv + ReLU, fuse_channels x H x W.
Var pfmm(const Bindings& params, const Var& visible, const Var& infrared);

struct BranchOutput {
  std::size_t branch = 0;
  Var mask;
  Var features;
};

/// Region branch l on backbone level o_l.
BranchOutput region_branch(const Bindings& params, std::size_t branch, const Var& level);

/// Injects the region branches into b0 through the sigmoid gate and reconstructs
/// the fused H x W image in [0, 1]. With no region branches the features are b0.
Var assemble_fuse(const Bindings& params, const Var& b0, const std::vector<BranchOutput>& branches,
                  const OrpptConfig& config);

struct FusionOutput {
  Var fused;
  FeaturePyramid pyramid;
  Var b0;
  std::vector<BranchOutput> branches;
};

/// Full fusion forward pass on H x W inputs (H and W divisible by the total stride).
FusionOutput orppt_forward(const Bindings& params, const Var& visible, const Var& infrared, const OrpptConfig& config);

}  // namespace fusedet
