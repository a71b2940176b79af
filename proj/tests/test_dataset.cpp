#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "sace/dataset.hpp"
#include "testutil.hpp"

using namespace sace;

namespace {

const std::string kData = SACE_DATA_DIR;

Roles nsw_roles() { return load_roles(kData + "/nsw_roles.json"); }

std::string write_temp(const std::string& name, const std::string& content) {
  const std::string path = "/tmp/sace_test_" + name;
  std::ofstream f(path);
  f << content;
  return path;
}

const char* kTinyHeader = "id,treat,age,education,black,hispanic,married,nodegree,re74,re75,emp74,emp75,emp78,re78\n";

}  // namespace

TEST_CASE("NSW file loads with the documented dimensions") {
  Dataset d = load_dataset(kData + "/nsw.csv", nsw_roles());
  REQUIRE(d.n() == 722);
  long treated = 0;
  for (long i = 0; i < d.n(); ++i) treated += d.a[i];
  CHECK(treated == 297);
  CHECK(d.k0() == 10);
  for (long i = 0; i < d.n(); ++i) {
    if (d.s[i] == 1) REQUIRE_FALSE(std::isnan(d.y[i]));
    else REQUIRE(std::isnan(d.y[i]));
  }
}

TEST_CASE("NSW crosstab and survival rates") {
  Dataset d = load_dataset(kData + "/nsw.csv", nsw_roles());
  CrossTab ct = crosstab_survival(d);
  CHECK(ct.counts[0][0] == 129);
  CHECK(ct.counts[0][1] == 296);
  CHECK(ct.counts[1][0] == 67);
  CHECK(ct.counts[1][1] == 230);
  CHECK(ct.total() == 722);
  auto [p0, p1] = survival_rates(d);
  CHECK_THAT(p0, Catch::Matchers::WithinAbs(0.696, 5e-4));
  CHECK_THAT(p1, Catch::Matchers::WithinAbs(0.774, 5e-4));
}

TEST_CASE("crosstab partitions and matches survival rates on random data") {
  std::mt19937_64 gen(7);
  for (int rep = 0; rep < 20; ++rep) {
    const long n = 2 + static_cast<long>(gen() % 50);
    std::vector<std::vector<double>> x(n, {0.0});
    std::vector<int> a(n), s(n);
    std::vector<double> y(n, 1.0);
    for (long i = 0; i < n; ++i) {
      a[i] = static_cast<int>(gen() % 2);
      s[i] = static_cast<int>(gen() % 2);
    }
    a[0] = 0; a[1] = 1;  // keep both arms populated
    Dataset d = testutil::make_dataset(x, a, s, y);
    CrossTab ct = crosstab_survival(d);
    REQUIRE(ct.total() == n);
    const long n0 = ct.counts[0][0] + ct.counts[0][1];
    const long n1 = ct.counts[1][0] + ct.counts[1][1];
    if (n0 > 0 && n1 > 0) {
      auto [p0, p1] = survival_rates(d);
      CHECK(p0 == static_cast<double>(ct.counts[0][1]) / n0);
      CHECK(p1 == static_cast<double>(ct.counts[1][1]) / n1);
    }
  }
}

TEST_CASE("crosstab corner cases") {
  Dataset all_survive = testutil::make_dataset({{0.0}, {0.0}, {0.0}}, {0, 1, 1}, {1, 1, 1}, {1, 2, 3});
  CrossTab ct = crosstab_survival(all_survive);
  CHECK(ct.counts[0][0] == 0);
  CHECK(ct.counts[1][0] == 0);

  Dataset four = testutil::make_dataset({{0.0}, {0.0}, {0.0}, {0.0}}, {0, 0, 1, 1}, {0, 1, 0, 1},
                                        {0, 5, 0, 6});
  ct = crosstab_survival(four);
  for (int a = 0; a < 2; ++a)
    for (int s = 0; s < 2; ++s) {
      CHECK(ct.counts[a][s] == 1);
      CHECK(ct.proportion(a, s) == 0.25);
    }
  auto [p0, p1] = survival_rates(four);
  CHECK(p0 == 0.5);
  CHECK(p1 == 0.5);
}

TEST_CASE("survival_rates direct count example") {
  std::vector<std::vector<double>> x(20, {0.0});
  std::vector<int> a(20), s(20);
  std::vector<double> y(20, 1.0);
  for (int i = 0; i < 10; ++i) { a[i] = 0; s[i] = i < 5; }
  for (int i = 10; i < 20; ++i) { a[i] = 1; s[i] = i < 18; }
  auto [p0, p1] = survival_rates(testutil::make_dataset(x, a, s, y));
  CHECK(p0 == 0.5);
  CHECK(p1 == 0.8);
}

TEST_CASE("loader rejects malformed files") {
  Roles r = nsw_roles();
  SECTION("empty file") {
    auto path = write_temp("empty.csv", kTinyHeader);
    REQUIRE_THROWS_WITH(load_dataset(path, r), Catch::Matchers::ContainsSubstring("no rows"));
  }
  SECTION("non-binary treatment names row and column") {
    auto path = write_temp("badtreat.csv", std::string(kTinyHeader) +
                                               "1,2,25,10,1,0,0,1,0,0,0,0,1,100\n");
    REQUIRE_THROWS_WITH(load_dataset(path, r),
                        Catch::Matchers::ContainsSubstring("row 2") &&
                            Catch::Matchers::ContainsSubstring("treat"));
  }
  SECTION("outcome present for a non-survivor") {
    auto path = write_temp("deadoutcome.csv", std::string(kTinyHeader) +
                                                  "1,1,25,10,1,0,0,1,0,0,0,0,0,100\n");
    REQUIRE_THROWS_WITH(load_dataset(path, r),
                        Catch::Matchers::ContainsSubstring("non-survivor"));
  }
  SECTION("outcome missing for a survivor") {
    auto path = write_temp("missingy.csv", std::string(kTinyHeader) +
                                               "1,1,25,10,1,0,0,1,0,0,0,0,1,\n");
    REQUIRE_THROWS_WITH(load_dataset(path, r),
                        Catch::Matchers::ContainsSubstring("outcome missing"));
  }
  SECTION("missing required column") {
    auto path = write_temp("nocol.csv", "id,treat\n1,1\n");
    REQUIRE_THROWS_WITH(load_dataset(path, r),
                        Catch::Matchers::ContainsSubstring("missing required column"));
  }
}

TEST_CASE("save/load round trip is bit identical") {
  Dataset d = load_dataset(kData + "/nsw.csv", nsw_roles());
  const std::string path = "/tmp/sace_test_roundtrip.csv";
  save_dataset(d, path);
  Roles r2 = d.roles;
  r2.id_col = d.roles.id_col;
  Dataset d2 = load_dataset(path, r2);
  REQUIRE(d2.n() == d.n());
  for (long i = 0; i < d.n(); ++i) {
    REQUIRE(d2.ids[i] == d.ids[i]);
    REQUIRE(d2.a[i] == d.a[i]);
    REQUIRE(d2.s[i] == d.s[i]);
    for (long j = 0; j < d.k0(); ++j) REQUIRE(d2.x0(i, j) == d.x0(i, j));
    if (d.s[i] == 1) REQUIRE(d2.y[i] == d.y[i]);
  }
  std::remove(path.c_str());
}
