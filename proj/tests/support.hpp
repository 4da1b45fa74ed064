#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vralign/gradcheck.hpp"
#include "vralign/params.hpp"
#include "vralign/rng.hpp"

namespace testsupport {

// Random values with |v| in [0.1, 1]: bounded away from relu/clamp kinks and
// from zero denominators, so central differences are trustworthy.
inline vralign::ParamStore make_store(
    const std::vector<std::pair<std::string, std::vector<std::size_t>>>& specs,
    std::uint64_t seed) {
  vralign::ParamStore s;
  vralign::Rng r(seed);
  for (const auto& [name, shape] : specs) {
    vralign::NdArray a(shape);
    for (auto& v : a.data) {
      const double mag = r.uniform(0.1, 1.0);
      v = r.uniform() < 0.5 ? -mag : mag;
    }
    s.add(name, std::move(a));
  }
  return s;
}

using Builder = std::function<vralign::Var(vralign::Tape&, const vralign::BoundParams&)>;

inline void check_grads(
    const std::vector<std::pair<std::string, std::vector<std::size_t>>>& specs,
    const Builder& f, double tol = 1e-6,
    const std::vector<std::uint64_t>& seeds = {11, 22, 33}) {
  for (std::uint64_t seed : seeds) {
    vralign::ParamStore store = make_store(specs, seed);
    auto report = vralign::finite_diff_check(f, store, 1e-5);
    INFO("seed " << seed << " worst " << report.worst_param << "[" << report.worst_index
                 << "]");
    CHECK(report.max_rel_error < tol);
  }
}

inline void check_grads_on(vralign::ParamStore& store, const Builder& f,
                           double tol = 1e-6) {
  auto report = vralign::finite_diff_check(f, store, 1e-5);
  INFO("worst " << report.worst_param << "[" << report.worst_index << "]");
  CHECK(report.max_rel_error < tol);
}

}  // namespace testsupport
