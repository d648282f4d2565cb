#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "doctest.h"
#include "qarv/metrics.hpp"

namespace fs = std::filesystem;
using namespace qarv;

namespace {

struct Run {
  int code = -1;
  std::string out;  // stdout and stderr
};

Run run(const std::string& args) {
  const std::string cmd = std::string(QARV_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream f(p);
  std::size_t n = 0;
  for (std::string line; std::getline(f, line);) n += !line.empty();
  return n;
}

// Scratch directory with a small training config and a trained 10-step model.
struct Workspace {
  fs::path dir = fs::temp_directory_path() / "qarv_cli_test";
  std::string config, ckpt, images;

  Workspace() {
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = (dir / "small.json").string();
    std::ofstream(config) << R"({"preset": "qarv-tiny", "synthetic_count": 32, "batch_size": 4, "seed": 5,
                                 "log_every": 2, "checkpoint_every": 5, "ema_decay": 0.9})";
    const auto r = run("train --config " + config + " --iterations 10 --quiet --out " + (dir / "run").string());
    REQUIRE_MESSAGE(r.code == 0, r.out);
    ckpt = (dir / "run" / "model.ckpt").string();
    images = (dir / "imgs").string();
    REQUIRE(run("synth " + images + " --count 3 --size 24 --seed 9").code == 0);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("cli: help lists every flag") {
  const std::vector<std::pair<std::string, std::vector<std::string>>> expect{
      {"train", {"--config", "--iterations", "--seed", "--dataset", "--lambda-schedule", "--out", "--quiet"}},
      {"compress", {"--lambda", "--raw-weights", "checkpoint", "image", "output"}},
      {"decompress", {"--mode", "--ref", "--raw-weights"}},
      {"sweep", {"--lambdas", "--out", "--threads"}},
      {"bdrate", {"anchor", "test"}},
      {"ablate", {"--axis", "--out", "--work-dir", "--eval-dir", "--eval-count", "--lambdas", "--config"}},
      {"synth", {"--count", "--size", "--seed"}}};
  for (const auto& [cmd, flags] : expect) {
    const auto r = run(cmd + " --help");
    CHECK(r.code == 0);
    for (const auto& f : flags) CHECK_MESSAGE(r.out.find(f) != std::string::npos, cmd << " help lacks " << f);
  }
  CHECK(run("").code != 0);
  CHECK(run("frobnicate").code != 0);
}

TEST_CASE("cli: train errors and determinism") {
  auto& w = ws();
  const auto missing = run("train --dataset /nonexistent/images --iterations 2 --out " + w.path("x"));
  CHECK(missing.code != 0);
  CHECK(missing.out.find("/nonexistent/images") != std::string::npos);

  std::ofstream(w.path("bad.json")) << R"({"iterations": 10, "learning_rate": 1})";
  const auto bad = run("train --config " + w.path("bad.json") + " --out " + w.path("y"));
  CHECK(bad.code != 0);
  CHECK(bad.out.find("learning_rate") != std::string::npos);

  const auto a = run("train --config " + w.config + " --iterations 10 --out " + w.path("rep"));
  REQUIRE(a.code == 0);
  const std::string log = slurp(w.path("rep") + "/train_log.csv");
  CHECK(log == slurp(w.dir / "run" / "train_log.csv"));
  CHECK(log.rfind("iteration,loss,rate_bpp,mse,psnr,lambda,lr\n", 0) == 0);
  CHECK(a.out.find(log.substr(log.find('\n') + 1)) != std::string::npos);
}

TEST_CASE("cli: compress and decompress") {
  auto& w = ws();
  const std::string img = w.images + "/tex00000.ppm";
  const auto c = run("compress " + w.ckpt + " " + img + " " + w.path("a.qarv") + " --lambda 300");
  REQUIRE_MESSAGE(c.code == 0, c.out);
  CHECK(c.out.find("bpp: ") != std::string::npos);
  const auto bytes = fs::file_size(w.path("a.qarv"));
  CHECK(c.out.find("bytes: " + std::to_string(bytes)) != std::string::npos);

  const auto full = run("decompress " + w.ckpt + " " + w.path("a.qarv") + " " + w.path("full.ppm") + " --ref " + img);
  REQUIRE_MESSAGE(full.code == 0, full.out);
  const auto pos = full.out.find("psnr: ");
  REQUIRE(pos != std::string::npos);
  CHECK(std::isfinite(std::stod(full.out.substr(pos + 6))));

  REQUIRE(run("decompress " + w.ckpt + " " + w.path("a.qarv") + " " + w.path("p4.ppm") + " --mode progressive:4").code == 0);
  CHECK(slurp(w.path("p4.ppm")) == slurp(w.path("full.ppm")));
  for (const char* mode : {"progressive:1", "loo:2", "disjoint:3"})
    CHECK(run("decompress " + w.ckpt + " " + w.path("a.qarv") + " " + w.path("m.ppm") + " --mode " + mode).code == 0);

  const auto big = run("compress " + w.ckpt + " " + img + " " + w.path("b.qarv") + " --lambda 1e9");
  CHECK(big.code != 0);
  CHECK(big.out.find("lambda") != std::string::npos);
  CHECK(run("decompress " + w.ckpt + " " + w.path("a.qarv") + " " + w.path("m.ppm") + " --mode loo:9").code != 0);
  CHECK(run("decompress " + w.ckpt + " " + w.path("a.qarv") + " " + w.path("m.ppm") + " --mode sideways").code != 0);

  std::ofstream(w.path("junk.qarv")) << "not a container";
  const auto junk = run("decompress " + w.ckpt + " " + w.path("junk.qarv") + " " + w.path("m.ppm"));
  CHECK(junk.code != 0);
  std::ofstream(w.path("p3.ppm")) << "P3\n1 1\n255\n0 0 0\n";
  const auto p3 = run("compress " + w.ckpt + " " + w.path("p3.ppm") + " " + w.path("c.qarv") + " --lambda 64");
  CHECK(p3.code != 0);
  CHECK(p3.out.find("P3") != std::string::npos);
}

TEST_CASE("cli: sweep and bdrate") {
  auto& w = ws();
  const auto s = run("sweep " + w.ckpt + " " + w.images + " --lambdas 16,2048 --threads 2 --out " + w.path("s.csv"));
  REQUIRE_MESSAGE(s.code == 0, s.out);
  CHECK(count_lines(w.path("s.csv")) == 1 + 2 * 3 + 2);
  REQUIRE(run("sweep " + w.ckpt + " " + w.images + " --lambdas 16,2048 --threads 1 --out " + w.path("s1.csv")).code == 0);
  CHECK(slurp(w.path("s.csv")) == slurp(w.path("s1.csv")));

  std::vector<metrics::RdPoint> anchor, doubled;
  for (int i = 0; i < 5; ++i) {
    const double b = 0.2 * (i + 1);
    anchor.push_back({metrics::kMeanRowId, 16.0 * (1 << i), b, 25 + 8 * std::log2(b + 0.5)});
    doubled.push_back(anchor.back());
    doubled.back().bpp *= 2;
  }
  metrics::write_csv(fs::path(w.path("anchor.csv")), anchor);
  metrics::write_csv(fs::path(w.path("doubled.csv")), doubled);
  const auto same = run("bdrate " + w.path("anchor.csv") + " " + w.path("anchor.csv"));
  CHECK(same.code == 0);
  CHECK(same.out == "0.00\n");
  const auto dbl = run("bdrate " + w.path("anchor.csv") + " " + w.path("doubled.csv"));
  CHECK(dbl.code == 0);
  CHECK(std::abs(std::stod(dbl.out) - 100) < 1e-3);
  CHECK(dbl.out == "100.00\n");
  CHECK(run("bdrate " + w.path("anchor.csv") + " " + w.path("s.csv")).code != 0);
}

TEST_CASE("cli: ablate enumerates variants") {
  auto& w = ws();
  CHECK(run("ablate --axis colour --out " + w.path("t.csv")).code != 0);
  for (auto [axis, rows] : {std::pair<std::string, std::size_t>{"block-config", 3}, {"affine-position", 5}}) {
    const auto r = run("ablate --config " + w.config + " --iterations 2 --eval-count 2 --axis " + axis + " --out " +
                       w.path(axis + ".csv"));
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(count_lines(w.path(axis + ".csv")) == rows + 1);
    CHECK(slurp(w.path(axis + ".csv")).rfind("axis,variant,final_loss,mean_bpp,mean_psnr,nan_free,rank\n", 0) == 0);
  }
}
