#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "upm/geometry.hpp"
#include "upm/tensor.hpp"

namespace upm {

struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t num_blocks = 2;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t text_vocab_size = 8192;
  std::size_t text_context_length = 32;
  double layer_norm_eps = 1e-5;

  /// Desk-scale defaults (32² views, 8² patches, d=64, two blocks).
  static EncoderConfig desk() { return {}; }
  /// ViT-B/16 at 224², kept for completeness.
  static EncoderConfig vit_b16();

  void validate() const;
  [[nodiscard]] std::size_t patches_per_side() const { return image_size / patch_size; }
  [[nodiscard]] std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  [[nodiscard]] std::size_t patch_dim() const { return patch_size * patch_size * 3; }
  [[nodiscard]] std::size_t tokens_per_view() const { return num_patches() + 1; }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Which patch streams feed the fused tokens.
enum class Modality { kFull, kImageOnly, kPointmapOnly };

std::string to_string(Modality m);
Modality parse_modality(const std::string& text);

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_w, qkv_b;    // d × 3d
  Tensor proj_w, proj_b;  // d × d
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_w, fc1_b;  // d × (mlp_ratio·d)
  Tensor fc2_w, fc2_b;  // (mlp_ratio·d) × d
};

struct EncoderParams {
  // View tower.
  Tensor image_patch_w, image_patch_b;  // patch_dim × d, d
  Tensor point_patch_w, point_patch_b;  // same shapes; initialized equal to the image projection
  Tensor pos_embed;                     // M × d, added to the image stream only
  Tensor cls_token;                     // 1 × d
  std::vector<BlockParams> blocks;
  Tensor final_ln_gamma, final_ln_beta;
  // Text tower.
  Tensor token_table;  // vocab × d; row 0 is the reserved empty-text token
  Tensor text_proj_w, text_proj_b;

  static EncoderParams init(const EncoderConfig& config, std::uint64_t seed);

  /// Every parameter with a stable name, in checkpoint order.
  [[nodiscard]] std::vector<NamedTensor> named() const;
  [[nodiscard]] std::vector<NamedTensor> named_text() const;
  /// Deep copy (fresh storage, gradient tracking preserved).
  [[nodiscard]] EncoderParams clone() const;
  void set_text_trainable(bool trainable);
};

struct ViewEmbedding {
  std::vector<double> h;
};
struct SceneEmbedding {
  std::vector<double> h_bar;
};
struct TextEmbedding {
  std::vector<double> t;
};

/// One colored pointmap: an H×W×3 image in [0,1] plus its pixel-aligned pointmap.
struct ViewInput {
  std::span<const double> image;
  const Pointmap* pointmap = nullptr;
};

struct PatchPair {
  Tensor image;   // M × (p²·3)
  Tensor points;  // M × (p²·3)
};

/// Non-overlapping p×p patches in raster order, channels last within a patch.
/// Invalid pointmap pixels contribute zeros.
PatchPair patchify(std::span<const double> image, const Pointmap& pointmap, const EncoderConfig& config);
/// Inverse of the image half of patchify: M × (p²·3) back to H×W×3.
std::vector<double> unpatchify(const Tensor& patches, const EncoderConfig& config);

/// Patchified views stacked row-wise: [(V·M) × (p²·3)] per stream.
struct ViewBatch {
  Tensor image_patches;
  Tensor point_patches;
  std::size_t views = 0;
};
ViewBatch make_view_batch(std::span<const ViewInput> views, const EncoderConfig& config);

/// Early fusion: [cls ; φ_I(I)+E_pos+φ_P(P)] per view → [(V·(M+1)) × d].
Tensor embed_views(const ViewBatch& batch, const EncoderParams& params, const EncoderConfig& config,
                   Modality modality = Modality::kFull);

/// Full view tower; returns [V × d] L2-normalized class-token outputs (graph-tracked).
Tensor encode_view_batch(const ViewBatch& batch, const EncoderParams& params,
                         const EncoderConfig& config, Modality modality = Modality::kFull);

/// Gradient-free convenience wrapper.
std::vector<ViewEmbedding> encode_views(std::span<const ViewInput> views, const EncoderParams& params,
                                        const EncoderConfig& config, Modality modality = Modality::kFull);

/// Mean of view embeddings per group, L2-normalized → [G × d].
Tensor pool_scene_embeddings(const Tensor& view_embeddings, std::span<const std::size_t> group_sizes);
SceneEmbedding pool_scene(std::span<const ViewEmbedding> views);

/// Lower-cased alphanumeric tokens, truncated to the context length; ids via
/// FNV-1a mod (vocab − 1) + 1. Empty text maps to the reserved id 0.
std::vector<std::size_t> tokenize(const std::string& text, const EncoderConfig& config);
std::vector<std::string> split_words(const std::string& text);

/// [B × d] L2-normalized text embeddings (graph-tracked).
Tensor encode_text_batch(const std::vector<std::string>& texts, const EncoderParams& params,
                         const EncoderConfig& config);
TextEmbedding encode_text(const std::string& text, const EncoderParams& params, const EncoderConfig& config);

// --- Checkpoints -----------------------------------------------------------

struct Checkpoint {
  EncoderConfig config;
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<NamedTensor> tensors;

  [[nodiscard]] const Tensor* find(const std::string& name) const;
};

/// Binary container: "UPM1", config record, then named float64 tensors.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuilds parameters from a checkpoint; missing or misshapen tensors raise FormatError.
EncoderParams params_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace upm
