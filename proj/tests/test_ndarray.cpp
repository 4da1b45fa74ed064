#include <catch2/catch_amalgamated.hpp>

#include "vralign/ndarray.hpp"

using namespace vralign;

TEST_CASE("construction zero-fills", "[ndarray]") {
  NdArray a({2, 3});
  REQUIRE(a.numel() == 6);
  for (double v : a.data) CHECK(v == 0.0);
}

TEST_CASE("construction with data validates length", "[ndarray]") {
  CHECK_NOTHROW(NdArray({2, 2}, {1, 2, 3, 4}));
  CHECK_THROWS_AS(NdArray({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("accessors are row-major", "[ndarray]") {
  NdArray a({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(a.at(0, 0) == 1);
  CHECK(a.at(0, 2) == 3);
  CHECK(a.at(1, 0) == 4);
  CHECK(a.at(1, 2) == 6);
  a.at(1, 1) = 9;
  CHECK(a.data[4] == 9);
}

TEST_CASE("three-index accessor", "[ndarray]") {
  NdArray a({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(a.at(0, 0, 0) == 0);
  CHECK(a.at(0, 1, 0) == 2);
  CHECK(a.at(1, 0, 1) == 5);
  CHECK(a.at(1, 1, 1) == 7);
}

TEST_CASE("factories", "[ndarray]") {
  CHECK(NdArray::scalar(2.5).numel() == 1);
  CHECK(NdArray::scalar(2.5).data[0] == 2.5);
  NdArray f = NdArray::full({3}, -1.0);
  for (double v : f.data) CHECK(v == -1.0);
  NdArray id = NdArray::identity(3);
  CHECK(id.at(0, 0) == 1.0);
  CHECK(id.at(1, 1) == 1.0);
  CHECK(id.at(0, 1) == 0.0);
}

TEST_CASE("same_shape and shape_str", "[ndarray]") {
  NdArray a({2, 3}), b({2, 3}), c({3, 2});
  CHECK(a.same_shape(b));
  CHECK_FALSE(a.same_shape(c));
  CHECK(a.shape_str() == "(2x3)");
}

TEST_CASE("shape guards throw with the op name", "[ndarray]") {
  NdArray a({2, 3}), c({3, 2});
  CHECK_THROWS_WITH(require_same_shape(a, c, "add"),
                    Catch::Matchers::ContainsSubstring("add"));
  CHECK_THROWS_AS(require_rank(a, 1, "norm"), ShapeError);
  CHECK_NOTHROW(require_rank(a, 2, "norm"));
}

TEST_CASE("all_finite flags NaN and infinity", "[ndarray]") {
  NdArray a({2}, {1.0, 2.0});
  CHECK(a.all_finite());
  a.data[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(a.all_finite());
  a.data[1] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(a.all_finite());
}
