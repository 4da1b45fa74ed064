#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "vralign/params.hpp"
#include "vralign/rng.hpp"

using namespace vralign;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("store add/at/has", "[params]") {
  ParamStore s;
  s.add("w", NdArray({2, 2}, {1, 2, 3, 4}));
  s.add("b", NdArray({2}), false);
  CHECK(s.has("w"));
  CHECK_FALSE(s.has("missing"));
  CHECK(s.at("w").value.at(1, 1) == 4);
  CHECK_FALSE(s.at("b").trainable);
  CHECK(s.size() == 2);
  CHECK(s.scalar_count() == 6);
  CHECK(s.scalar_count(true) == 4);
  CHECK_THROWS_AS(s.add("w", NdArray({1})), ConfigError);
  CHECK_THROWS_AS(s.at("nope"), ConfigError);
}

TEST_CASE("iteration is sorted by name", "[params]") {
  ParamStore s;
  s.add("zeta", NdArray({1}));
  s.add("alpha", NdArray({1}));
  s.add("mid", NdArray({1}));
  CHECK(s.names() == std::vector<std::string>{"alpha", "mid", "zeta"});
}

TEST_CASE("freeze_prefix marks matching names", "[params]") {
  ParamStore s;
  s.add("vol.stage1.weight", NdArray({2}));
  s.add("vol.stage1.bias", NdArray({2}));
  s.add("vol.stage2.weight", NdArray({2}));
  s.add("txt.embed", NdArray({2}));
  CHECK(s.freeze_prefix("vol.stage1.") == 2);
  CHECK_FALSE(s.at("vol.stage1.weight").trainable);
  CHECK_FALSE(s.at("vol.stage1.bias").trainable);
  CHECK(s.at("vol.stage2.weight").trainable);
  CHECK(s.at("txt.embed").trainable);
  CHECK(s.freeze_prefix("nomatch.") == 0);
}

TEST_CASE("bind routes gradients only to trainable parameters", "[params]") {
  ParamStore s;
  s.add("w", NdArray({2}, {3, 4}));
  s.add("frozen", NdArray({2}, {5, 6}), false);
  Tape t;
  BoundParams bound = bind_params(t, s);
  Var loss = sum(mul(bound.at("w"), bound.at("frozen")));
  t.backward(loss);
  pull_grads(bound, s);
  CHECK(s.at("w").grad.data == std::vector<double>{5, 6});
  CHECK(s.at("frozen").grad.data == std::vector<double>{0, 0});

  // pull_grads accumulates across steps until zero_grads.
  t.backward(loss);
  pull_grads(bound, s);
  CHECK(s.at("w").grad.data == std::vector<double>{15, 18});
  s.zero_grads();
  CHECK(s.at("w").grad.data == std::vector<double>{0, 0});
}

TEST_CASE("checkpoint round trip is bit exact", "[params]") {
  ParamStore s;
  NdArray odd({6});
  odd.data = {0.0, -0.0, std::numeric_limits<double>::denorm_min(),
              std::numeric_limits<double>::max(), 1.0 / 3.0, -1e-300};
  s.add("odd", odd);
  Rng r(9);
  NdArray big({17, 5});
  for (auto& v : big.data) v = r.normal();
  s.add("big", big, false);

  const std::string path = temp_path("vralign_ckpt_test.bin");
  save_checkpoint(path, s);
  ParamStore loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded.at("odd").value.shape == odd.shape);
  for (std::size_t i = 0; i < odd.data.size(); ++i) {
    std::uint64_t a, b;
    std::memcpy(&a, &loaded.at("odd").value.data[i], 8);
    std::memcpy(&b, &odd.data[i], 8);
    CHECK(a == b);
  }
  CHECK(loaded.at("big").value.data == big.data);
  CHECK_FALSE(loaded.at("big").trainable);
  CHECK(loaded.at("odd").trainable);

  // Saving the loaded store reproduces the file byte for byte.
  const std::string path2 = temp_path("vralign_ckpt_test2.bin");
  save_checkpoint(path2, loaded);
  CHECK(io::file_hash(path) == io::file_hash(path2));
  CHECK(io::read_text_file(path) == io::read_text_file(path2));
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("checkpoint rejects wrong magic and version", "[params]") {
  const std::string path = temp_path("vralign_ckpt_bad.bin");
  io::write_text_file(path, "NOPE....");
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint(temp_path("vralign_ckpt_missing.bin")), IoError);
}

TEST_CASE("load_checkpoint_into matches by name and checks shapes", "[params]") {
  ParamStore saved;
  saved.add("vol.stage1.weight", NdArray({2, 2}, {1, 2, 3, 4}));
  saved.add("txt.embed", NdArray({3}, {7, 8, 9}));
  const std::string path = temp_path("vralign_ckpt_into.bin");
  save_checkpoint(path, saved);

  ParamStore model;
  model.add("vol.stage1.weight", NdArray({2, 2}), false);  // frozen in this run
  model.add("cls.w", NdArray({4}));
  CHECK(load_checkpoint_into(model, path) == 1);
  CHECK(model.at("vol.stage1.weight").value.data == std::vector<double>{1, 2, 3, 4});
  CHECK_FALSE(model.at("vol.stage1.weight").trainable);  // run's flag wins

  ParamStore mismatched;
  mismatched.add("vol.stage1.weight", NdArray({3, 3}));
  CHECK_THROWS_WITH(load_checkpoint_into(mismatched, path),
                    Catch::Matchers::ContainsSubstring("vol.stage1.weight") &&
                        Catch::Matchers::ContainsSubstring("incompatible"));

  ParamStore unrelated;
  unrelated.add("other.param", NdArray({1}));
  CHECK_THROWS_AS(load_checkpoint_into(unrelated, path), ConfigError);
  std::remove(path.c_str());
}
