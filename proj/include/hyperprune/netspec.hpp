#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hyperprune/common.hpp"

namespace hyperprune {

enum class LayerKind { conv, conv_transpose, norm, activation, upsample, concat_skip, add_skip };
enum class NormKind { none, instance, batch };
enum class ActKind { relu, leaky_relu, tanh, sigmoid };

std::string to_string(LayerKind k);
std::string to_string(NormKind k);
std::string to_string(ActKind k);

/// One layer of an architecture graph. Channel counts are the unmasked
/// (construction-time) widths; pruning rewrites them via compact().
struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::conv;
  int in_channels = 0;
  int out_channels = 0;
  int kw = 0, kh = 0;
  int stride = 1, pad = 0;
  bool bias = true;                      // conv-like only
  NormKind norm_kind = NormKind::none;   // norm only
  bool norm_affine = false;              // norm only
  ActKind act = ActKind::relu;           // activation only
  double alpha = 0.2;                    // leaky_relu slope
  int factor = 2;                        // upsample only
  std::string skip_source;               // concat_skip / add_skip: earlier layer id
  std::string latent_id;                 // conv-like: governing latent (may be shared)
  bool prunable = true;                  // conv-like: latent subject to shrinkage

  bool is_conv_like() const {
    return kind == LayerKind::conv || kind == LayerKind::conv_transpose;
  }
};

/// A contiguous run of channels governed by one latent.
struct LatentSegment {
  std::string id;
  int len = 0;
};

/// Static wiring between latents and layers, derived from a spec:
/// which latent governs each channel of each layer boundary.
struct LatentPlan {
  struct Info {
    int length = 0;
    bool prunable = true;
  };
  std::map<std::string, Info> latents;  // includes the virtual input latent
  // conv-like layer id -> latent segments covering its input channels
  std::map<std::string, std::vector<LatentSegment>> layer_inputs;
  // any layer id -> segments covering its output channels
  std::map<std::string, std::vector<LatentSegment>> layer_outputs;
};

inline constexpr const char* kInputLatentId = "__input__";

/// Architecture description: an ordered layer chain with declared skip edges.
struct NetSpec {
  std::string name;
  Shape input_shape;  // [c,h,w]
  std::vector<LayerSpec> layers;

  const LayerSpec* find(const std::string& id) const;
  int layer_index(const std::string& id) const;  // -1 if absent

  /// Channel/spatial consistency; throws ShapeError with the offending layer.
  void validate() const;

  /// Spatial size of every layer output at the spec's input resolution
  /// (or an override), keyed by layer id.
  std::map<std::string, std::pair<int, int>> spatial_chain(
      std::optional<std::pair<int, int>> input_hw = std::nullopt) const;

  Shape output_shape() const;

  LatentPlan latent_plan() const;
};

/// Text round-trip: one layer per line with explicit dims and hyper flags.
std::string to_text(const NetSpec& spec);
NetSpec parse_netspec(const std::string& text);
NetSpec load_netspec(const std::string& path);
void save_netspec(const NetSpec& spec, const std::string& path);

/// Published / toy generator architectures.
///   dcgan_toy, unet_toy, resnet_toy    -- 16x16 trainable at desk scale
///   unet_pix2pix_256, resnet_cyclegan_256, dcgan_cifar -- reference schedules
NetSpec build_preset(const std::string& name);
std::vector<std::string> preset_names();

/// Small convolutional discriminator matched to a generator's output
/// resolution; `conditional` stacks the generator input as extra channels.
NetSpec build_discriminator_for(const NetSpec& gen, bool conditional);

}  // namespace hyperprune
