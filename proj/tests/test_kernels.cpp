#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "lumos/kernels.hpp"
#include "lumos/rng.hpp"

using lumos::RngStream;
namespace ker = lumos::kernels;

namespace {

std::vector<double> random_vec(RngStream& rng, size_t n, double lo = -3.0, double hi = 3.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("scalar elementwise kernels compute exact expected values") {
  const auto& be = ker::scalar_backend();
  std::vector<double> a{1.0, -2.0, 0.5}, b{4.0, 0.25, -1.0}, out(3);
  be.add(out.data(), a.data(), b.data(), 3);
  CHECK(out == std::vector<double>{5.0, -1.75, -0.5});
  be.sub(out.data(), a.data(), b.data(), 3);
  CHECK(out == std::vector<double>{-3.0, -2.25, 1.5});
  be.mul(out.data(), a.data(), b.data(), 3);
  CHECK(out == std::vector<double>{4.0, -0.5, -0.5});
  be.scale(out.data(), a.data(), 2.0, 3);
  CHECK(out == std::vector<double>{2.0, -4.0, 1.0});
  out = {10.0, 10.0, 10.0};
  be.axpy(out.data(), 3.0, a.data(), 3);
  CHECK(out == std::vector<double>{13.0, 4.0, 11.5});
}

TEST_CASE("scalar matmul matches hand-computed 2x3 by 3x2 product") {
  const auto& be = ker::scalar_backend();
  // A = [[1,2,3],[4,5,6]], B = [[7,8],[9,10],[11,12]]
  std::vector<double> a{1, 2, 3, 4, 5, 6}, b{7, 8, 9, 10, 11, 12}, c(4);
  be.matmul(c.data(), a.data(), b.data(), 2, 3, 2);
  CHECK(c == std::vector<double>{58, 64, 139, 154});
}

TEST_CASE("matmul with inner dimension 1 is the outer product") {
  const auto& be = ker::scalar_backend();
  std::vector<double> a{2, 3}, b{5, 7, 11}, c(6);
  be.matmul(c.data(), a.data(), b.data(), 2, 1, 3);
  CHECK(c == std::vector<double>{10, 14, 22, 15, 21, 33});
}

TEST_CASE("add allows aliased destination for in-place accumulation") {
  const auto& be = ker::scalar_backend();
  std::vector<double> a{1, 2, 3, 4, 5}, b{10, 20, 30, 40, 50};
  be.add(a.data(), a.data(), b.data(), 5);
  CHECK(a == std::vector<double>{11, 22, 33, 44, 55});
}

TEST_CASE("every available backend agrees bit-for-bit with the scalar reference") {
  auto backends = ker::all_backends();
  REQUIRE(!backends.empty());
  const auto& ref = ker::scalar_backend();

  RngStream rng(20260815);
  // Sizes straddle the 4-lane vector width to exercise remainder handling.
  for (size_t n : {1u, 2u, 3u, 4u, 5u, 7u, 8u, 15u, 16u, 33u, 257u, 1024u}) {
    auto a = random_vec(rng, n);
    auto b = random_vec(rng, n);
    for (const auto* be : backends) {
      CAPTURE(be->name);
      CAPTURE(n);
      std::vector<double> got(n), want(n);
      ref.add(want.data(), a.data(), b.data(), n);
      be->add(got.data(), a.data(), b.data(), n);
      CHECK(bit_equal(got, want));
      ref.sub(want.data(), a.data(), b.data(), n);
      be->sub(got.data(), a.data(), b.data(), n);
      CHECK(bit_equal(got, want));
      ref.mul(want.data(), a.data(), b.data(), n);
      be->mul(got.data(), a.data(), b.data(), n);
      CHECK(bit_equal(got, want));
      ref.scale(want.data(), a.data(), 1.7182818, n);
      be->scale(got.data(), a.data(), 1.7182818, n);
      CHECK(bit_equal(got, want));
      want = b;
      got = b;
      ref.axpy(want.data(), -0.33, a.data(), n);
      be->axpy(got.data(), -0.33, a.data(), n);
      CHECK(bit_equal(got, want));
    }
  }
}

TEST_CASE("matmul agrees bit-for-bit across backends on awkward shapes") {
  auto backends = ker::all_backends();
  const auto& ref = ker::scalar_backend();
  RngStream rng(99);
  struct Dim { size_t m, n, k; };
  for (Dim d : {Dim{1, 1, 1}, Dim{3, 5, 7}, Dim{4, 4, 4}, Dim{2, 9, 13},
                Dim{17, 3, 6}, Dim{8, 32, 5}, Dim{31, 31, 31}}) {
    auto a = random_vec(rng, d.m * d.n);
    auto b = random_vec(rng, d.n * d.k);
    std::vector<double> want(d.m * d.k);
    ref.matmul(want.data(), a.data(), b.data(), d.m, d.n, d.k);
    for (const auto* be : backends) {
      CAPTURE(be->name);
      std::vector<double> got(d.m * d.k, -777.0);
      be->matmul(got.data(), a.data(), b.data(), d.m, d.n, d.k);
      CHECK(bit_equal(got, want));
    }
  }
}

TEST_CASE("backend selection honors the force hook and restores env selection") {
  const auto& before = ker::active();
  ker::force(&ker::scalar_backend());
  CHECK(std::string(ker::active().name) == "scalar");
  ker::force(nullptr);
  CHECK(std::string(ker::active().name) == std::string(before.name));
}

TEST_CASE("avx2 backend is only handed out when the cpu supports it") {
  if (ker::avx2_supported()) {
    REQUIRE(ker::avx2_backend() != nullptr);
    CHECK(std::string(ker::avx2_backend()->name) == "avx2");
  } else {
    CHECK(ker::avx2_backend() == nullptr);
  }
}
