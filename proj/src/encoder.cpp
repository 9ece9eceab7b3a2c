#include "upm/encoder.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "binary_io.hpp"
#include "upm/error.hpp"
#include "upm/ops.hpp"
#include "upm/rng.hpp"

namespace upm {

EncoderConfig EncoderConfig::vit_b16() {
  EncoderConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.embed_dim = 768;
  c.num_blocks = 12;
  c.num_heads = 12;
  c.mlp_ratio = 4;
  c.text_vocab_size = 49408;
  c.text_context_length = 77;
  return c;
}

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size must be a positive multiple of patch_size");
  }
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim must be a positive multiple of num_heads");
  }
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be >= 1");
  if (text_vocab_size < 2) throw ConfigError("text_vocab_size must be >= 2");
  if (text_context_length == 0) throw ConfigError("text_context_length must be >= 1");
  if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be > 0");
}

std::string to_string(Modality m) {
  switch (m) {
    case Modality::kFull: return "full";
    case Modality::kImageOnly: return "image-only";
    case Modality::kPointmapOnly: return "pointmap-only";
  }
  return "full";
}

Modality parse_modality(const std::string& text) {
  if (text == "full") return Modality::kFull;
  if (text == "image-only") return Modality::kImageOnly;
  if (text == "pointmap-only") return Modality::kPointmapOnly;
  throw ConfigError("unknown modality '" + text + "' (expected full, image-only, pointmap-only)");
}

namespace {

Tensor normal_param(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor const_param(Shape shape, double value) { return Tensor(std::move(shape), value, true); }

Tensor copy_param(const Tensor& t) {
  return Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
}

}  // namespace

EncoderParams EncoderParams::init(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.embed_dim;
  const std::size_t pd = config.patch_dim();
  const std::size_t hidden = config.mlp_ratio * d;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  EncoderParams p;
  p.image_patch_w = normal_param(rng, {pd, d}, 1.0 / std::sqrt(static_cast<double>(pd)));
  p.image_patch_b = const_param({d}, 0.0);
  p.point_patch_w = copy_param(p.image_patch_w);
  p.point_patch_b = copy_param(p.image_patch_b);
  p.pos_embed = normal_param(rng, {config.num_patches(), d}, 0.02);
  p.cls_token = normal_param(rng, {1, d}, 0.02);
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    BlockParams blk;
    blk.ln1_gamma = const_param({d}, 1.0);
    blk.ln1_beta = const_param({d}, 0.0);
    blk.qkv_w = normal_param(rng, {d, 3 * d}, inv_sqrt_d);
    blk.qkv_b = const_param({3 * d}, 0.0);
    blk.proj_w = normal_param(rng, {d, d}, inv_sqrt_d);
    blk.proj_b = const_param({d}, 0.0);
    blk.ln2_gamma = const_param({d}, 1.0);
    blk.ln2_beta = const_param({d}, 0.0);
    blk.fc1_w = normal_param(rng, {d, hidden}, inv_sqrt_d);
    blk.fc1_b = const_param({hidden}, 0.0);
    blk.fc2_w = normal_param(rng, {hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden)));
    blk.fc2_b = const_param({d}, 0.0);
    p.blocks.push_back(std::move(blk));
  }
  p.final_ln_gamma = const_param({d}, 1.0);
  p.final_ln_beta = const_param({d}, 0.0);
  p.token_table = normal_param(rng, {config.text_vocab_size, d}, 0.02);
  p.text_proj_w = normal_param(rng, {d, d}, inv_sqrt_d);
  p.text_proj_b = const_param({d}, 0.0);
  return p;
}

std::vector<NamedTensor> EncoderParams::named() const {
  std::vector<NamedTensor> out = {
      {"vision.image_patch.w", image_patch_w}, {"vision.image_patch.b", image_patch_b},
      {"vision.point_patch.w", point_patch_w}, {"vision.point_patch.b", point_patch_b},
      {"vision.pos_embed", pos_embed},         {"vision.cls_token", cls_token},
  };
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string pre = "vision.block" + std::to_string(b) + ".";
    const auto& k = blocks[b];
    out.push_back({pre + "ln1.gamma", k.ln1_gamma});
    out.push_back({pre + "ln1.beta", k.ln1_beta});
    out.push_back({pre + "attn.qkv.w", k.qkv_w});
    out.push_back({pre + "attn.qkv.b", k.qkv_b});
    out.push_back({pre + "attn.proj.w", k.proj_w});
    out.push_back({pre + "attn.proj.b", k.proj_b});
    out.push_back({pre + "ln2.gamma", k.ln2_gamma});
    out.push_back({pre + "ln2.beta", k.ln2_beta});
    out.push_back({pre + "mlp.fc1.w", k.fc1_w});
    out.push_back({pre + "mlp.fc1.b", k.fc1_b});
    out.push_back({pre + "mlp.fc2.w", k.fc2_w});
    out.push_back({pre + "mlp.fc2.b", k.fc2_b});
  }
  out.push_back({"vision.final_ln.gamma", final_ln_gamma});
  out.push_back({"vision.final_ln.beta", final_ln_beta});
  for (auto& t : named_text()) out.push_back(std::move(t));
  return out;
}

std::vector<NamedTensor> EncoderParams::named_text() const {
  return {{"text.token_table", token_table}, {"text.proj.w", text_proj_w}, {"text.proj.b", text_proj_b}};
}

EncoderParams EncoderParams::clone() const {
  EncoderParams p = *this;
  p.image_patch_w = copy_param(image_patch_w);
  p.image_patch_b = copy_param(image_patch_b);
  p.point_patch_w = copy_param(point_patch_w);
  p.point_patch_b = copy_param(point_patch_b);
  p.pos_embed = copy_param(pos_embed);
  p.cls_token = copy_param(cls_token);
  for (auto& b : p.blocks) {
    for (Tensor* t : {&b.ln1_gamma, &b.ln1_beta, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.ln2_gamma,
                      &b.ln2_beta, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b}) {
      *t = copy_param(*t);
    }
  }
  p.final_ln_gamma = copy_param(final_ln_gamma);
  p.final_ln_beta = copy_param(final_ln_beta);
  p.token_table = copy_param(token_table);
  p.text_proj_w = copy_param(text_proj_w);
  p.text_proj_b = copy_param(text_proj_b);
  return p;
}

void EncoderParams::set_text_trainable(bool trainable) {
  for (auto& t : named_text()) t.tensor.set_requires_grad(trainable);
}

PatchPair patchify(std::span<const double> image, const Pointmap& pointmap, const EncoderConfig& config) {
  const std::size_t s = config.image_size, p = config.patch_size, side = config.patches_per_side();
  if (image.size() != s * s * 3) {
    throw ShapeError("patchify: image has " + std::to_string(image.size()) + " values, expected " +
                     std::to_string(s) + "x" + std::to_string(s) + "x3");
  }
  if (pointmap.height != s || pointmap.width != s || pointmap.points.size() != s * s) {
    throw ShapeError("patchify: pointmap is not pixel-aligned with the image");
  }
  const std::size_t pd = config.patch_dim();
  std::vector<double> img(config.num_patches() * pd), pts(config.num_patches() * pd);
  for (std::size_t py = 0; py < side; ++py) {
    for (std::size_t px = 0; px < side; ++px) {
      const std::size_t m = py * side + px;
      std::size_t k = m * pd;
      for (std::size_t dy = 0; dy < p; ++dy) {
        for (std::size_t dx = 0; dx < p; ++dx) {
          const std::size_t pix = (py * p + dy) * s + (px * p + dx);
          const Vec3& q = pointmap.points[pix];
          const bool ok = pointmap.valid[pix] != 0;
          for (std::size_t c = 0; c < 3; ++c, ++k) img[k] = image[pix * 3 + c];
          pts[k - 3] = ok ? q.x : 0.0;
          pts[k - 2] = ok ? q.y : 0.0;
          pts[k - 1] = ok ? q.z : 0.0;
        }
      }
    }
  }
  return {Tensor({config.num_patches(), pd}, std::move(img)), Tensor({config.num_patches(), pd}, std::move(pts))};
}

std::vector<double> unpatchify(const Tensor& patches, const EncoderConfig& config) {
  const std::size_t s = config.image_size, p = config.patch_size, side = config.patches_per_side();
  if (patches.rank() != 2 || patches.dim(0) != config.num_patches() || patches.dim(1) != config.patch_dim()) {
    throw ShapeError("unpatchify: expected " + std::to_string(config.num_patches()) + "x" +
                     std::to_string(config.patch_dim()) + " patches");
  }
  std::vector<double> out(s * s * 3);
  const auto x = patches.data();
  for (std::size_t m = 0; m < config.num_patches(); ++m) {
    const std::size_t py = m / side, px = m % side;
    std::size_t k = m * config.patch_dim();
    for (std::size_t dy = 0; dy < p; ++dy)
      for (std::size_t dx = 0; dx < p; ++dx)
        for (std::size_t c = 0; c < 3; ++c) out[((py * p + dy) * s + (px * p + dx)) * 3 + c] = x[k++];
  }
  return out;
}

ViewBatch make_view_batch(std::span<const ViewInput> views, const EncoderConfig& config) {
  if (views.empty()) throw DegenerateInputError("encode_views needs at least one view");
  const std::size_t rows = views.size() * config.num_patches();
  std::vector<double> img, pts;
  img.reserve(rows * config.patch_dim());
  pts.reserve(rows * config.patch_dim());
  for (const auto& v : views) {
    if (v.pointmap == nullptr) throw ContractError("view input without pointmap");
    const PatchPair pp = patchify(v.image, *v.pointmap, config);
    img.insert(img.end(), pp.image.data().begin(), pp.image.data().end());
    pts.insert(pts.end(), pp.points.data().begin(), pp.points.data().end());
  }
  return {Tensor({rows, config.patch_dim()}, std::move(img)),
          Tensor({rows, config.patch_dim()}, std::move(pts)), views.size()};
}

Tensor embed_views(const ViewBatch& batch, const EncoderParams& params, const EncoderConfig& config,
                   Modality modality) {
  Tensor fused;
  if (modality != Modality::kPointmapOnly) {
    const Tensor zi = add_row(matmul(batch.image_patches, params.image_patch_w), params.image_patch_b);
    fused = add_tiled(zi, params.pos_embed);
  }
  if (modality != Modality::kImageOnly) {
    const Tensor zp = add_row(matmul(batch.point_patches, params.point_patch_w), params.point_patch_b);
    fused = fused.defined() ? add(fused, zp) : add_tiled(zp, params.pos_embed);
  }
  return prepend_token(fused, params.cls_token, config.num_patches());
}

Tensor encode_view_batch(const ViewBatch& batch, const EncoderParams& params, const EncoderConfig& config,
                         Modality modality) {
  const double eps = config.layer_norm_eps;
  const std::size_t seq = config.tokens_per_view();
  Tensor x = embed_views(batch, params, config, modality);
  for (const auto& blk : params.blocks) {
    const Tensor h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta, eps);
    const Tensor qkv = add_row(matmul(h, blk.qkv_w), blk.qkv_b);
    const Tensor attn = multi_head_attention(qkv, seq, config.num_heads);
    x = add(x, add_row(matmul(attn, blk.proj_w), blk.proj_b));
    const Tensor h2 = layer_norm(x, blk.ln2_gamma, blk.ln2_beta, eps);
    const Tensor mid = gelu(add_row(matmul(h2, blk.fc1_w), blk.fc1_b));
    x = add(x, add_row(matmul(mid, blk.fc2_w), blk.fc2_b));
  }
  std::vector<std::size_t> cls_rows(batch.views);
  for (std::size_t v = 0; v < batch.views; ++v) cls_rows[v] = v * seq;
  const Tensor cls = gather_rows(x, cls_rows);
  return l2_normalize_rows(layer_norm(cls, params.final_ln_gamma, params.final_ln_beta, eps));
}

std::vector<ViewEmbedding> encode_views(std::span<const ViewInput> views, const EncoderParams& params,
                                        const EncoderConfig& config, Modality modality) {
  NoGradGuard no_grad;
  const Tensor h = encode_view_batch(make_view_batch(views, config), params, config, modality);
  const std::size_t d = h.cols();
  std::vector<ViewEmbedding> out(views.size());
  for (std::size_t v = 0; v < views.size(); ++v) {
    out[v].h.assign(h.data().begin() + static_cast<std::ptrdiff_t>(v * d),
                    h.data().begin() + static_cast<std::ptrdiff_t>((v + 1) * d));
  }
  return out;
}

Tensor pool_scene_embeddings(const Tensor& view_embeddings, std::span<const std::size_t> group_sizes) {
  return l2_normalize_rows(segment_mean_rows(view_embeddings, group_sizes));
}

SceneEmbedding pool_scene(std::span<const ViewEmbedding> views) {
  if (views.empty()) throw DegenerateInputError("pool_scene: no view embeddings");
  const std::size_t d = views.front().h.size();
  std::vector<double> flat;
  flat.reserve(views.size() * d);
  for (const auto& v : views) {
    if (v.h.size() != d) throw ShapeError("pool_scene: embedding width mismatch");
    flat.insert(flat.end(), v.h.begin(), v.h.end());
  }
  NoGradGuard no_grad;
  const std::size_t group[] = {views.size()};
  const Tensor pooled = pool_scene_embeddings(Tensor({views.size(), d}, std::move(flat)), group);
  return {std::vector<double>(pooled.data().begin(), pooled.data().end())};
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (const char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isalnum(uc)) {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

std::vector<std::size_t> tokenize(const std::string& text, const EncoderConfig& config) {
  std::vector<std::size_t> ids;
  for (const auto& w : split_words(text)) {
    if (ids.size() == config.text_context_length) break;
    std::uint64_t h = 14695981039346656037ULL;
    for (const char ch : w) {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ULL;
    }
    ids.push_back(1 + static_cast<std::size_t>(h % (config.text_vocab_size - 1)));
  }
  if (ids.empty()) ids.push_back(0);
  return ids;
}

Tensor encode_text_batch(const std::vector<std::string>& texts, const EncoderParams& params,
                         const EncoderConfig& config) {
  if (texts.empty()) throw DegenerateInputError("encode_text_batch: no texts");
  std::vector<std::vector<std::size_t>> bags;
  bags.reserve(texts.size());
  for (const auto& t : texts) bags.push_back(tokenize(t, config));
  const Tensor pooled = embedding_bag_mean(params.token_table, bags);
  return l2_normalize_rows(add_row(matmul(pooled, params.text_proj_w), params.text_proj_b));
}

TextEmbedding encode_text(const std::string& text, const EncoderParams& params, const EncoderConfig& config) {
  NoGradGuard no_grad;
  const Tensor t = encode_text_batch({text}, params, config);
  return {std::vector<double>(t.data().begin(), t.data().end())};
}

// --- Checkpoints -----------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string config_record(const Checkpoint& ck) {
  const auto& c = ck.config;
  std::ostringstream out;
  out << "image_size=" << c.image_size << '\n'
      << "patch_size=" << c.patch_size << '\n'
      << "embed_dim=" << c.embed_dim << '\n'
      << "num_blocks=" << c.num_blocks << '\n'
      << "num_heads=" << c.num_heads << '\n'
      << "mlp_ratio=" << c.mlp_ratio << '\n'
      << "text_vocab_size=" << c.text_vocab_size << '\n'
      << "text_context_length=" << c.text_context_length << '\n'
      << "layer_norm_eps=" << format_double(c.layer_norm_eps) << '\n';
  for (const auto& [k, v] : ck.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint metadata may not contain '=' in keys or newlines");
    }
    out << "meta." << k << '=' << v << '\n';
  }
  return out.str();
}

std::size_t parse_size(const std::string& key, const std::string& value, const binary::Reader& r) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    r.fail("config value for " + key + " is not an integer: " + value);
  }
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  binary::Writer w;
  w.bytes("UPM1", 4);
  w.str(config_record(checkpoint));
  w.u32(static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& [name, t] : checkpoint.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (const auto d : t.shape()) w.u64(d);
    for (const double v : t.data()) w.f64(v);
  }
  w.save(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  binary::Reader r(path);
  r.expect_magic("UPM1");
  Checkpoint ck;
  std::istringstream record(r.str());
  std::string line;
  while (std::getline(record, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("malformed config line: " + line);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    auto& c = ck.config;
    if (key.rfind("meta.", 0) == 0) ck.metadata.emplace_back(key.substr(5), value);
    else if (key == "image_size") c.image_size = parse_size(key, value, r);
    else if (key == "patch_size") c.patch_size = parse_size(key, value, r);
    else if (key == "embed_dim") c.embed_dim = parse_size(key, value, r);
    else if (key == "num_blocks") c.num_blocks = parse_size(key, value, r);
    else if (key == "num_heads") c.num_heads = parse_size(key, value, r);
    else if (key == "mlp_ratio") c.mlp_ratio = parse_size(key, value, r);
    else if (key == "text_vocab_size") c.text_vocab_size = parse_size(key, value, r);
    else if (key == "text_context_length") c.text_context_length = parse_size(key, value, r);
    else if (key == "layer_norm_eps") c.layer_norm_eps = std::stod(value);
    else r.fail("unknown config key " + key);
  }
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(4096);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) r.fail("tensor " + name + " has invalid rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0 || d > (std::size_t{1} << 32)) r.fail("tensor " + name + " has invalid dimension");
      n *= d;
    }
    if (n * 8 > r.remaining()) r.fail("truncated payload for tensor " + name);
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    ck.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (r.remaining() != 0) r.fail("trailing bytes after last tensor");
  return ck;
}

EncoderParams params_from_checkpoint(const Checkpoint& checkpoint) {
  EncoderParams p = EncoderParams::init(checkpoint.config, 0);
  for (auto& [name, t] : p.named()) {
    const Tensor* src = checkpoint.find(name);
    if (src == nullptr) throw FormatError("checkpoint is missing tensor " + name);
    if (src->shape() != t.shape()) {
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_string(src->shape()) +
                        ", expected " + shape_string(t.shape()));
    }
    std::copy(src->data().begin(), src->data().end(), t.mutable_data().begin());
  }
  return p;
}

}  // namespace upm
