#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "upm/data.hpp"

using namespace upm;
namespace fs = std::filesystem;

namespace {

const char* kTiny =
    "[encoder]\nimage_size = 16\nembed_dim = 16\nnum_blocks = 1\nnum_heads = 2\n"
    "[data]\nimage_size = 16\nview_count = 4\nmin_points = 4\n"
    "[train]\nepochs = 1\nscenes_per_batch = 2\nviews_per_scene = 4\nmin_points = 4\nchamfer_points = 64\n"
    "[eval]\nmin_points = 4\nview_curve = 1, 2, 4\nutterances = 1, 2\n";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args, const std::string& env = "") {
  static testing::TempDir logs("cli_logs");
  static int n = 0;
  const fs::path log = logs / ("run" + std::to_string(n++) + ".txt");
  const std::string cmd = env + (env.empty() ? "" : " ") + "\"" UPM_CLI_PATH "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

/// One small dataset and checkpoint shared by the cases below.
struct Workspace {
  testing::TempDir dir{"cli"};
  std::string config, data, run_dir;
  Workspace() {
    config = (dir / "tiny.ini").string();
    std::ofstream(config) << kTiny;
    data = (dir / "data").string();
    run_dir = (dir / "run").string();
    REQUIRE(run("gen --config " + config + " --out " + data + " --count 10 --seed 4").code == 0);
    REQUIRE(run("pretrain --config " + config + " --manifest " + data + "/manifest.tsv --out " + run_dir).code == 0);
  }
  [[nodiscard]] std::string manifest() const { return data + "/manifest.tsv"; }
  [[nodiscard]] std::string ckpt() const { return run_dir + "/final.ckpt"; }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

std::vector<std::vector<std::string>> similarity_rows(const std::string& out) {
  std::istringstream in(out);
  std::string line;
  while (std::getline(in, line) && line != "cosine similarity") {
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line) && line.rfind("  ", 0) == 0) {
    std::istringstream cells(line);
    std::vector<std::string> row;
    for (std::string c; cells >> c;) row.push_back(c);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage and configuration errors exit with 2") {
    auto& w = ws();
    CHECK(run("").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("gen --out").code == 2);
    CHECK(run("gen --out " + (w.dir / "x").string() + " --set train.nope=1").code == 2);
    CHECK(run("pretrain --manifest " + (w.dir / "none.tsv").string() + " --out " + (w.dir / "y").string()).code == 2);
    CHECK(run("eval --config " + w.config + " --checkpoint " + w.ckpt() + " --manifest " + w.manifest() + " --out " +
              (w.dir / "z").string() + " --ablate-modality full")
              .code == 2);
    CHECK(run("eval --config " + w.config + " --checkpoint " + w.ckpt() + " --manifest " + w.manifest() + " --out " +
              (w.dir / "z").string() + " --tasks grounding,dance")
              .code == 2);
    CHECK(run("inspect --checkpoint " + w.ckpt() + " --scene " + (w.dir / "nope").string()).code == 2);
  }

  TEST_CASE("corrupt checkpoint exits with 4, divergence with 3") {
    auto& w = ws();
    const fs::path bad = w.dir / "bad.ckpt";
    const std::string bytes = slurp(w.ckpt());
    std::ofstream(bad, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK(run("inspect --checkpoint " + bad.string() + " --scene " + w.data + "/scene_0000").code == 4);
    const Run r = run("pretrain --config " + w.config + " --manifest " + w.manifest() + " --out " +
                      (w.dir / "diverge").string() + " --set train.learning_rate=1e200 --set train.grad_clip=0");
    CHECK(r.code == 3);
    CHECK(r.output.find("numeric") != std::string::npos);
  }

  TEST_CASE("a single scene lands in train") {
    testing::TempDir tmp("cli_one");
    REQUIRE(run("gen --config " + ws().config + " --out " + (tmp / "d").string() + " --count 1").code == 0);
    const Manifest m = load_manifest(tmp / "d" / "manifest.tsv");
    REQUIRE(m.entries.size() == 1);
    CHECK(m.entries[0].split == "train");
  }

  TEST_CASE("generation is reproducible from the seed or UPM_SEED") {
    testing::TempDir tmp("cli_seed");
    const std::string c = ws().config;
    REQUIRE(run("gen --config " + c + " --out " + (tmp / "a").string() + " --count 3 --seed 11").code == 0);
    REQUIRE(run("gen --config " + c + " --out " + (tmp / "b").string() + " --count 3", "UPM_SEED=11").code == 0);
    REQUIRE(run("gen --config " + c + " --out " + (tmp / "c").string() + " --count 3 --seed 12").code == 0);
    CHECK(slurp(tmp / "a" / "manifest.tsv") == slurp(tmp / "b" / "manifest.tsv"));
    for (const char* s : {"scene_0000", "scene_0002"}) {
      CHECK(slurp(tmp / "a" / s / "scene.txt") == slurp(tmp / "b" / s / "scene.txt"));
      CHECK(slurp(tmp / "a" / s / "view_001.depth") == slurp(tmp / "b" / s / "view_001.depth"));
    }
    CHECK(slurp(tmp / "a" / "scene_0000" / "scene.txt") != slurp(tmp / "c" / "scene_0000" / "scene.txt"));
  }

  TEST_CASE("pretrain writes its artifacts and honors loss switches") {
    auto& w = ws();
    CHECK(fs::exists(fs::path(w.run_dir) / "metrics.tsv"));
    CHECK(fs::exists(fs::path(w.run_dir) / "best.ckpt"));
    const std::string out = (w.dir / "nogeo").string();
    const Run r = run("pretrain --config " + w.config + " --manifest " + w.manifest() + " --out " + out + " --no-geo");
    REQUIRE(r.code == 0);
    std::istringstream in(slurp(fs::path(out) / "metrics.tsv"));
    std::string line;
    std::getline(in, line);
    CHECK(line == "step\tlr\tl_geo\tl_ground\tl_view\tl_scene\ttotal\ttau");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      std::istringstream cells(line);
      std::string step, lr, geo;
      cells >> step >> lr >> geo;
      CHECK(geo == "0");
      ++rows;
    }
    CHECK(rows > 0);
  }

  TEST_CASE("asking for more views than rendered warns") {
    auto& w = ws();
    const Run r = run("pretrain --config " + w.config + " --manifest " + w.manifest() + " --out " +
                      (w.dir / "views").string() + " --views 9");
    CHECK(r.code == 0);
    CHECK(r.output.find("warning") != std::string::npos);
    CHECK(r.output.find("capped") != std::string::npos);
  }

  TEST_CASE("grounding-only eval writes only the grounding table") {
    auto& w = ws();
    const fs::path out = w.dir / "eval_g";
    REQUIRE(run("eval --config " + w.config + " --checkpoint " + w.ckpt() + " --manifest " + w.manifest() + " --out " +
                out.string() + " --tasks grounding --split train")
                .code == 0);
    CHECK(fs::exists(out / "grounding.tsv"));
    CHECK(fs::exists(out / "summary.txt"));
    CHECK_FALSE(fs::exists(out / "retrieval.tsv"));
    CHECK_FALSE(fs::exists(out / "classification.tsv"));
    CHECK_FALSE(fs::exists(out / "plot_data.tsv"));
  }

  TEST_CASE("full eval reports every metric inside [0, 1]") {
    auto& w = ws();
    const fs::path out = w.dir / "eval_all";
    const Run r = run("eval --config " + w.config + " --checkpoint " + w.ckpt() + " --manifest " + w.manifest() +
                      " --out " + out.string() + " --split train");
    REQUIRE(r.code == 0);
    for (const char* f : {"grounding.tsv", "retrieval.tsv", "classification.tsv", "plot_data.tsv", "summary.txt"}) {
      CHECK(fs::exists(out / f));
    }
    std::istringstream in(slurp(out / "summary.txt"));
    std::size_t metrics = 0;
    for (std::string line; std::getline(in, line);) {
      const auto eq = line.find('=');
      REQUIRE(eq != std::string::npos);
      if (line.find(".instances=") != std::string::npos) continue;
      const double v = std::stod(line.substr(eq + 1));
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      ++metrics;
    }
    CHECK(metrics >= 8);
    const Run ab = run("eval --config " + w.config + " --checkpoint " + w.ckpt() + " --manifest " + w.manifest() +
                       " --out " + (w.dir / "eval_ab").string() + " --tasks grounding --ablate-modality image-only");
    CHECK(ab.code == 0);
  }

  TEST_CASE("inspect prints a symmetric similarity matrix") {
    auto& w = ws();
    const Run r = run("inspect --checkpoint " + w.ckpt() + " --scene " + w.data + "/scene_0001");
    REQUIRE(r.code == 0);
    const auto m = similarity_rows(r.output);
    REQUIRE(m.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      REQUIRE(m[i].size() == 4);
      CHECK(m[i][i] == "1.0000");
      for (std::size_t j = 0; j < 4; ++j) CHECK(m[i][j] == m[j][i]);
    }
    CHECK(r.output.find("spearman") != std::string::npos);
  }

  TEST_CASE("duplicated views are maximally similar") {
    auto& w = ws();
    Scene s = load_scene(fs::path(w.data) / "scene_0001");
    s.views[2] = s.views[0];
    s.view_captions[2] = s.view_captions[0];
    const fs::path dup = w.dir / "dup";
    save_scene(s, dup);
    const Run r = run("inspect --checkpoint " + w.ckpt() + " --scene " + dup.string());
    REQUIRE(r.code == 0);
    const auto m = similarity_rows(r.output);
    REQUIRE(m.size() == 4);
    CHECK(m[0][2] == "1.0000");
  }
}
