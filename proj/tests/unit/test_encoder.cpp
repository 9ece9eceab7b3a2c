#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "upm/data.hpp"
#include "upm/encoder.hpp"
#include "upm/error.hpp"
#include "upm/eval.hpp"
#include "upm/gradcheck.hpp"
#include "upm/ops.hpp"
#include "upm/rng.hpp"

using namespace upm;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny(std::size_t blocks = 1) {
  EncoderConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.num_blocks = blocks;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.text_vocab_size = 64;
  c.text_context_length = 8;
  return c;
}

struct RandomView {
  std::vector<double> image;
  Pointmap pm;
};

RandomView random_view(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  RandomView v;
  v.image.resize(n * n * 3);
  for (auto& x : v.image) x = rng.uniform();
  v.pm.height = v.pm.width = n;
  for (std::size_t i = 0; i < n * n; ++i) v.pm.points.push_back({rng.normal(), rng.normal(), rng.normal()});
  v.pm.valid.assign(n * n, 1);
  v.pm.valid[3] = 0;
  return v;
}

}  // namespace

TEST_SUITE("encoder") {
  TEST_CASE("config validation") {
    EncoderConfig c = tiny();
    c.patch_size = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.num_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_NOTHROW(EncoderConfig::desk().validate());
    CHECK_NOTHROW(EncoderConfig::vit_b16().validate());
  }

  TEST_CASE("patchify layouts and round trip") {
    EncoderConfig c = tiny();
    c.image_size = 4;
    c.patch_size = 4;
    const auto v = random_view(4, 1);
    const auto one = patchify(v.image, v.pm, c);
    CHECK(one.image.shape() == Shape{1, 48});
    for (std::size_t i = 0; i < 48; ++i) CHECK(one.image.at(i) == v.image[i]);

    c = tiny();
    const auto w = random_view(8, 2);
    const auto four = patchify(w.image, w.pm, c);
    CHECK(four.image.shape() == Shape{4, 48});
    // Patch 0 is the top-left 4×4 block.
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t col = 0; col < 4; ++col)
        for (std::size_t ch = 0; ch < 3; ++ch)
          CHECK(four.image.at(0, (r * 4 + col) * 3 + ch) == w.image[(r * 8 + col) * 3 + ch]);
    // Patch 1 is the top-right block.
    CHECK(four.image.at(1, 0) == w.image[(0 * 8 + 4) * 3]);
    CHECK(unpatchify(four.image, c) == w.image);
    // Invalid pointmap pixel 3 (row 0, col 3) is zero in patch 0.
    CHECK(four.points.at(0, 3 * 3) == 0.0);
    CHECK(four.points.at(0, 2 * 3) == w.pm.points[2].x);
  }

  TEST_CASE("fused tokens are the sum of the two streams plus positions") {
    const EncoderConfig c = tiny();
    const EncoderParams p = EncoderParams::init(c, 3);
    const auto v = random_view(8, 4);
    const ViewInput in{v.image, &v.pm};
    const ViewBatch b = make_view_batch(std::span<const ViewInput>(&in, 1), c);
    const Tensor fused = embed_views(b, p, c);
    const Tensor zi = matmul(b.image_patches, p.image_patch_w);
    const Tensor zp = matmul(b.point_patches, p.point_patch_w);
    const std::size_t d = c.embed_dim;
    for (std::size_t k = 0; k < d; ++k) CHECK(fused.at(0, k) == p.cls_token.at(k));
    for (std::size_t m = 0; m < c.num_patches(); ++m) {
      for (std::size_t k = 0; k < d; ++k) {
        const double expect = zi.at(m, k) + p.image_patch_b.at(k) + p.pos_embed.at(m, k) + zp.at(m, k) + p.point_patch_b.at(k);
        CHECK(fused.at(m + 1, k) == doctest::Approx(expect).epsilon(1e-13));
      }
    }
  }

  TEST_CASE("zero inputs leave biases and positions") {
    const EncoderConfig c = tiny();
    EncoderParams p = EncoderParams::init(c, 5);
    for (auto b : {p.image_patch_b, p.point_patch_b}) {
      Rng rng(6);
      for (auto& x : b.mutable_data()) x = rng.normal();
    }
    RandomView v = random_view(8, 7);
    std::fill(v.image.begin(), v.image.end(), 0.0);
    std::fill(v.pm.valid.begin(), v.pm.valid.end(), 0);
    const ViewInput in{v.image, &v.pm};
    const Tensor fused = embed_views(make_view_batch(std::span<const ViewInput>(&in, 1), c), p, c);
    for (std::size_t m = 0; m < c.num_patches(); ++m)
      for (std::size_t k = 0; k < c.embed_dim; ++k)
        CHECK(fused.at(m + 1, k) ==
              doctest::Approx(p.image_patch_b.at(k) + p.point_patch_b.at(k) + p.pos_embed.at(m, k)).epsilon(1e-14));
  }

  TEST_CASE("zeroed pointmap projection equals image-only embedding") {
    const EncoderConfig c = tiny();
    EncoderParams p = EncoderParams::init(c, 8);
    for (auto t : {p.point_patch_w, p.point_patch_b}) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    const auto v = random_view(8, 9);
    const ViewInput in{v.image, &v.pm};
    const auto full = encode_views(std::span<const ViewInput>(&in, 1), p, c, Modality::kFull);
    const auto image = encode_views(std::span<const ViewInput>(&in, 1), p, c, Modality::kImageOnly);
    for (std::size_t k = 0; k < c.embed_dim; ++k) CHECK(full[0].h[k] == doctest::Approx(image[0].h[k]).epsilon(1e-13));
  }

  TEST_CASE("identical views embed identically and have unit norm") {
    const EncoderConfig c = tiny(2);
    const EncoderParams p = EncoderParams::init(c, 10);
    const auto v = random_view(8, 11);
    const std::vector<ViewInput> in{{v.image, &v.pm}, {v.image, &v.pm}};
    const auto e = encode_views(in, p, c);
    CHECK(e[0].h == e[1].h);
    double n = 0;
    for (const double x : e[0].h) n += x * x;
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("zero blocks: the class row ignores the patches") {
    const EncoderConfig c = tiny(0);
    const EncoderParams p = EncoderParams::init(c, 12);
    const auto a = random_view(8, 13), b = random_view(8, 14);
    const std::vector<ViewInput> in{{a.image, &a.pm}, {b.image, &b.pm}};
    const auto e = encode_views(in, p, c);
    CHECK(e[0].h == e[1].h);
  }

  TEST_CASE("view tower gradients match finite differences") {
    const EncoderConfig c = tiny(1);
    const EncoderParams p = EncoderParams::init(c, 15);
    const auto a = random_view(8, 16), b = random_view(8, 17);
    const std::vector<ViewInput> in{{a.image, &a.pm}, {b.image, &b.pm}};
    const ViewBatch batch = make_view_batch(in, c);
    Rng rng(18);
    std::vector<double> w(2 * c.embed_dim);
    for (auto& x : w) x = rng.normal();
    const Tensor wt({2, c.embed_dim}, w);
    const auto f = [&] { return sum(encode_view_batch(batch, p, c) * wt); };
    std::vector<NamedTensor> view_params;
    for (const auto& nt : p.named()) {
      if (nt.name.rfind("text.", 0) != 0) view_params.push_back(nt);
    }
    const auto rep = finite_diff_check(f, view_params, 1e-5, 0.2, 19);
    INFO("worst " << rep.worst_parameter << "[" << rep.worst_index << "]");
    CHECK(rep.max_rel_error <= 1e-4);
  }

  TEST_CASE("pool_scene cases") {
    const std::vector<ViewEmbedding> one{{{0.6, 0.8}}};
    CHECK(pool_scene(one).h_bar == std::vector<double>{0.6, 0.8});
    const std::vector<ViewEmbedding> two{{{1, 0}}, {{0, 1}}};
    const auto m = pool_scene(two).h_bar;
    CHECK(m[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
    CHECK(m[1] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
    const std::vector<ViewEmbedding> anti{{{1, 0}}, {{-1, 0}}};
    CHECK_THROWS_AS(pool_scene(anti), DegenerateInputError);
  }

  TEST_CASE("text encoder: determinism, empty text and unit norm") {
    const EncoderConfig c = tiny();
    const EncoderParams p = EncoderParams::init(c, 20);
    CHECK(encode_text("the red bed", p, c).t == encode_text("the red bed", p, c).t);
    CHECK(tokenize("", c) == std::vector<std::size_t>{0});
    CHECK(tokenize("  !!  ", c) == std::vector<std::size_t>{0});
    Rng rng(21);
    for (int i = 0; i < 20; ++i) {
      std::string s;
      const std::size_t len = rng.below(40);
      for (std::size_t k = 0; k < len; ++k) s += static_cast<char>(32 + rng.below(95));
      double n = 0;
      for (const double x : encode_text(s, p, c).t) n += x * x;
      CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  TEST_CASE("tokenizer lowercases, splits and truncates") {
    EncoderConfig c = tiny();
    c.text_context_length = 3;
    CHECK(split_words("The RED-bed, near 2 lamps") == std::vector<std::string>{"the", "red", "bed", "near", "2", "lamps"});
    CHECK(tokenize("a b c d e", c).size() == 3);
    CHECK(tokenize("Bed", c) == tokenize("bed", c));
  }

  TEST_CASE("desk vocabulary has no hash collisions") {
    const EncoderConfig c = EncoderConfig::desk();
    const SceneSpec spec = SceneSpec::desk();
    std::set<std::string> words;
    const auto add = [&](const std::string& s) {
      for (const auto& w : split_words(s)) words.insert(w);
    };
    for (const auto& e : spec.catalog) add(e.category);
    for (const auto& col : spec.palette) add(col.name);
    for (const auto& t : spec.scene_types) add(t.name);
    for (const auto& t : default_prompt_templates()) add(t);
    add("the a an near view of floor with and empty");
    std::map<std::size_t, std::string> seen;
    for (const auto& w : words) {
      const auto id = tokenize(w, c).front();
      CHECK(id != 0);
      INFO(w << " collides with " << seen[id]);
      CHECK(seen.count(id) == 0);
      seen[id] = w;
    }
  }

  TEST_CASE("checkpoint round trip and corruption") {
    const EncoderConfig c = tiny();
    const EncoderParams p = EncoderParams::init(c, 22);
    Checkpoint ck{c, {{"seed", "22"}}, p.named()};
    const fs::path dir = fs::temp_directory_path() / "upm_ckpt_test";
    fs::create_directories(dir);
    save_checkpoint(dir / "a.ckpt", ck);
    const Checkpoint back = load_checkpoint(dir / "a.ckpt");
    CHECK(back.config == c);
    CHECK(back.metadata == ck.metadata);
    const EncoderParams q = params_from_checkpoint(back);
    const auto pn = p.named(), qn = q.named();
    REQUIRE(pn.size() == qn.size());
    for (std::size_t i = 0; i < pn.size(); ++i) {
      CHECK(pn[i].name == qn[i].name);
      CHECK(std::equal(pn[i].tensor.data().begin(), pn[i].tensor.data().end(), qn[i].tensor.data().begin()));
    }
    const auto size = fs::file_size(dir / "a.ckpt");
    fs::resize_file(dir / "a.ckpt", size / 2);
    CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), FormatError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
    fs::remove_all(dir);
  }
}
