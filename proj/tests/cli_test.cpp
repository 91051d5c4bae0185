#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "melo/serialization.hpp"
#include "melo/vit.hpp"
#include "test_support.hpp"

using namespace melo;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const testing::TempDir& dir, const std::string& args) {
  const auto log = dir / "stdout.txt";
  const std::string cmd = std::string(MELO_CLI) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string value_of(const std::string& out, const std::string& key) {
  const auto at = out.find(key + "=");
  if (at == std::string::npos) return {};
  const auto start = at + key.size() + 1;
  return out.substr(start, out.find('\n', start) - start);
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("count-params") {
  testing::TempDir dir;
  const Run r = run(dir, "count-params --preset vit-base --rank 4 --classes 2");
  CHECK(r.code == 0);
  CHECK(value_of(r.out, "lora") == "147456");
  CHECK(value_of(r.out, "head") == "1538");
  CHECK(value_of(r.out, "total") == "148994");
}

TEST_CASE("usage errors exit non-zero") {
  testing::TempDir dir;
  CHECK(run(dir, "").code != 0);
  CHECK(run(dir, "frobnicate").code != 0);
  CHECK(run(dir, "init-backbone --preset vit-mini").code != 0);
  CHECK(run(dir, "count-params --preset vit-colossal").code != 0);
  CHECK(run(dir, "infer --backbone " + q(dir / "missing.melb") + " --input x").code != 0);
}

TEST_CASE("vit-base backbone file is four bytes per parameter") {
  testing::TempDir dir;
  const Run r = run(dir, "init-backbone --preset vit-base --seed 1 --out " + q(dir / "base.melb"));
  REQUIRE(r.code == 0);
  const auto size = std::filesystem::file_size(dir / "base.melb");
  const double ratio = double(size) / (4.0 * double(backbone_parameter_count(ViTConfig::preset("vit-base"))));
  CHECK(ratio > 1.0);
  CHECK(ratio < 1.0001);
}

TEST_CASE("infer with a zero adapter equals infer on the merged model without --adapter") {
  testing::TempDir dir;
  REQUIRE(run(dir, "init-backbone --preset vit-micro --seed 2 --out " + q(dir / "b.melb")).code == 0);
  // A zero learning rate leaves B at its zero initialisation.
  const Run tr = run(dir, "train --backbone " + q(dir / "b.melb") +
                              " --task-spec name=zero,seed=3,classes=3,samples=40 --lr 0 --epochs 1 --out " +
                              q(dir / "zero.melo"));
  REQUIRE(tr.code == 0);
  CHECK(value_of(tr.out, "trainable.total") == std::to_string(4 * 2 * 4 * 16 + 3 * 16 + 3));
  const auto adapter = load_adapter(dir / "zero.melo");
  CHECK(adapter.layers[0].query.b.isZero(0));

  REQUIRE(run(dir, "merge --backbone " + q(dir / "b.melb") + " --adapter " + q(dir / "zero.melo") + " --out " +
                       q(dir / "model.melb"))
              .code == 0);

  std::mt19937_64 rng(4);
  save_tensor(testing::random_image(ViTConfig::preset("vit-micro"), rng), dir / "x.melt");
  const Run with = run(dir, "infer --backbone " + q(dir / "b.melb") + " --adapter " + q(dir / "zero.melo") +
                                " --input " + q(dir / "x.melt"));
  const Run without = run(dir, "infer --backbone " + q(dir / "model.melb") + " --input " + q(dir / "x.melt"));
  REQUIRE(with.code == 0);
  REQUIRE(without.code == 0);
  CHECK(!value_of(with.out, "logits").empty());
  CHECK(value_of(with.out, "logits") == value_of(without.out, "logits"));
  CHECK(value_of(with.out, "class") == value_of(without.out, "class"));

  // A plain backbone has no head to fall back on.
  CHECK(run(dir, "infer --backbone " + q(dir / "b.melb") + " --input " + q(dir / "x.melt")).code == 2);
}

TEST_CASE("registry workload") {
  testing::TempDir dir;
  const ViTConfig c = ViTConfig::preset("vit-micro");
  std::mt19937_64 rng(5);
  save_backbone(init_backbone(c, 5), dir / "b.melb");
  save_adapter(testing::random_adapter(c, 2, 4, rng, 0.05f, "a"), dir / "a.melo");
  save_adapter(testing::random_adapter(c, 5, 4, rng, 0.05f, "b"), dir / "b.melo");
  save_tensor(testing::random_image(c, rng), dir / "x.melt");
  {
    std::ofstream w(dir / "work.txt");
    w << "# task image\na x.melt\nb x.melt\nb x.melt\na x.melt\n";
  }
  const std::string common = "registry --backbone " + q(dir / "b.melb") + " --adapters " + q(dir / "a.melo") + "," +
                             q(dir / "b.melo") + " --workload " + q(dir / "work.txt");
  const Run serial = run(dir, common);
  REQUIRE(serial.code == 0);
  CHECK(value_of(serial.out, "items") == "4");
  CHECK(value_of(serial.out, "switches") == "3");
  CHECK(value_of(serial.out, "inferences.a") == "2");
  CHECK(value_of(serial.out, "item.0") == value_of(serial.out, "item.3"));

  const Run concurrent = run(dir, common + " --concurrent --report " + q(dir / "rep.txt"));
  REQUIRE(concurrent.code == 0);
  std::ifstream in(dir / "rep.txt");
  std::stringstream ss;
  ss << in.rdbuf();
  for (const char* k : {"item.0", "item.1", "item.2", "item.3"}) CHECK(value_of(ss.str(), k) == value_of(serial.out, k));
}

TEST_CASE("bench table carries the serving columns") {
  testing::TempDir dir;
  const Run r = run(dir, "bench --preset vit-micro --per-task 3 --report " + q(dir / "bench.txt"));
  REQUIRE(r.code == 0);
  for (const char* col : {"IT", "ST", "A-ST", "TT", "memory", "reload-per-task", "preload-all", "melo-shared"}) {
    CHECK(r.out.find(col) != std::string::npos);
  }
  CHECK(std::filesystem::exists(dir / "bench.txt"));
  std::ifstream kv(dir / "bench.txt.kv");
  std::stringstream ss;
  ss << kv.rdbuf();
  CHECK(value_of(ss.str(), "melo-shared.random.validated") == "true");
  CHECK(run(dir, "bench --strategies teleport").code != 0);
}

TEST_CASE("eval") {
  testing::TempDir dir;
  {
    std::ofstream p(dir / "p.txt"), l(dir / "l.txt");
    p << "0.1 0.9\n0.2 0.8\n0.3 0.7\n0.6 0.4\n0.9 0.1\n";
    l << "1\n1\n0\n1\n0\n";
  }
  const Run r = run(dir, "eval --pred " + q(dir / "p.txt") + " --labels " + q(dir / "l.txt") + " --report " +
                             q(dir / "m.kv"));
  REQUIRE(r.code == 0);
  std::ifstream kv(dir / "m.kv");
  std::stringstream ss;
  ss << kv.rdbuf();
  CHECK(value_of(ss.str(), "mode") == "binary");
  CHECK(std::stod(value_of(ss.str(), "acc")) == doctest::Approx(0.6));
  CHECK(std::stod(value_of(ss.str(), "sen")) == doctest::Approx(2.0 / 3.0));
}
