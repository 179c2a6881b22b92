#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "pfa/selection.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace pfa;

namespace {

ResponseMatrix make_responses(const Eigen::MatrixXd& data, std::string id = "layer") {
  ResponseMatrix r;
  r.layer_id = std::move(id);
  r.data = data;
  return r;
}

Eigen::MatrixXd random_responses(int m, int c) {
  Eigen::MatrixXd x(m, c);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) x(i, j) = urand(-2.0, 2.0);
  return x;
}

std::vector<std::vector<double>> as_columns(const Eigen::MatrixXd& x) {
  std::vector<std::vector<double>> cols(x.cols());
  for (int j = 0; j < x.cols(); ++j)
    cols[j].assign(x.col(j).data(), x.col(j).data() + x.rows());
  return cols;
}

}  // namespace

TEST_SUITE("selection") {

TEST_CASE("a planted duplicate column goes first") {
  Eigen::MatrixXd x = random_responses(40, 6);
  x.col(4) = x.col(1);  // bitwise twin -> |r| = 1 dominates every live row

  const SelectionResult r = select_filters(make_responses(x), 5);
  REQUIRE(r.removed_order.size() == 1);
  // The twins' norm sums contain the same terms in different accumulation
  // order, so either copy may round a hair higher; exactly one must go.
  const int gone = r.removed_order[0];
  CHECK((gone == 1 || gone == 4));
  std::vector<int> expect;
  for (int i = 0; i < 6; ++i)
    if (i != gone) expect.push_back(i);
  CHECK(r.kept_indices == expect);
}

TEST_CASE("zero-variance columns are dropped before informative ones") {
  Eigen::MatrixXd x = random_responses(24, 4);
  x.col(2).setConstant(3.7);

  SUBCASE("single removal") {
    const SelectionResult r = select_filters(make_responses(x), 3);
    CHECK(r.removed_order == std::vector<int>{2});
  }
  SUBCASE("dead column leads the trace even when more go") {
    const SelectionResult r = select_filters(make_responses(x), 1);
    REQUIRE(r.removed_order.size() == 3);
    CHECK(r.removed_order[0] == 2);
    CHECK(r.kept_indices.size() == 1);
  }
  SUBCASE("two dead columns leave in index order") {
    x.col(0).setZero();
    const SelectionResult r = select_filters(make_responses(x), 2);
    CHECK(r.removed_order == std::vector<int>{0, 2});
  }
}

TEST_CASE("scaled copies tie on norm and peak, lowest index loses") {
  // col1 = 2*col0 makes corr(0,1) exactly 1 and gives both columns bitwise
  // identical rows against col2, so the strict comparisons fall through to
  // the scan order.
  Eigen::MatrixXd x(4, 3);
  x.col(0) << 1, 2, 3, 4;
  x.col(1) << 2, 4, 6, 8;
  x.col(2) << 1, -1, 1, -1;

  const SelectionResult r = select_filters(make_responses(x), 2);
  CHECK(r.removed_order == std::vector<int>{0});
  CHECK(r.kept_indices == std::vector<int>{1, 2});
}

TEST_CASE("keeping every column is a no-op") {
  const Eigen::MatrixXd x = random_responses(10, 5);
  const SelectionResult r = select_filters(make_responses(x), 5);
  CHECK(r.removed_order.empty());
  CHECK(r.kept_indices == std::vector<int>{0, 1, 2, 3, 4});
}

TEST_CASE("row order does not matter") {
  // Integer-valued responses keep every covariance accumulation exact, so
  // shuffling samples cannot even flip a rounding-level tie.
  const int m = 16, c = 6;
  Eigen::MatrixXd x(m, c);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) x(i, j) = std::floor(urand(-8.0, 9.0));

  std::vector<int> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), test_rng());
  Eigen::MatrixXd shuffled(m, c);
  for (int i = 0; i < m; ++i) shuffled.row(i) = x.row(perm[i]);

  for (int kept : {1, 3, 5}) {
    const SelectionResult a = select_filters(make_responses(x), kept);
    const SelectionResult b = select_filters(make_responses(shuffled), kept);
    CHECK(a.kept_indices == b.kept_indices);
    CHECK(a.removed_order == b.removed_order);
  }
}

TEST_CASE("full trace matches the from-scratch oracle") {
  // Integer entries with a power-of-two sample count keep every mean,
  // centering, dot product and variance exact, so the library's vectorized
  // sums and the oracle's naive loops produce bitwise-equal correlations and
  // the greedy traces must agree even on rounding-level ties (twins).
  for (int rep = 0; rep < 30; ++rep) {
    const int m = (rep % 2 == 0) ? 16 : 32;
    const int c = 3 + static_cast<int>(urand(0, 9));
    Eigen::MatrixXd x(m, c);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < c; ++j) x(i, j) = std::floor(urand(-8.0, 9.0));
    if (rep % 4 == 0) x.col(c - 1) = x.col(0);       // twins
    if (rep % 5 == 0) x.col(1).setConstant(-0.25);   // dead
    const int kept = 1 + static_cast<int>(urand(0, c));

    std::vector<int> oracle_removed;
    const std::vector<int> oracle_kept =
        oracle::greedy_selection(as_columns(x), m, kept, &oracle_removed);

    const SelectionResult got = select_filters(make_responses(x), kept);
    CHECK(got.kept_indices == oracle_kept);
    CHECK(got.removed_order == oracle_removed);
  }
}

TEST_CASE("bad inputs are rejected") {
  const Eigen::MatrixXd x = random_responses(8, 4);
  CHECK_THROWS_AS(select_filters(make_responses(x), 0), Error);
  CHECK_THROWS_AS(select_filters(make_responses(x), 5), Error);
  CHECK_THROWS_AS(select_filters(make_responses(Eigen::MatrixXd(1, 4)), 1), Error);
  Eigen::MatrixXd sick = x;
  sick(3, 2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(select_filters(make_responses(sick), 2), Error);

  try {
    select_filters(make_responses(x), 9);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidCount);
  }
}

TEST_CASE("attach_selection fills kept_indices from the dump") {
  TempDir dir;
  const int m = 32;

  NdArray<float> conv({static_cast<std::size_t>(m), 2, 2, 4});  // spatial responses
  for (float& v : conv.data) v = static_cast<float>(urand(-1.0, 1.0));
  NdArray<float> fc({static_cast<std::size_t>(m), 3});  // already flat
  for (float& v : fc.data) v = static_cast<float>(urand(-1.0, 1.0));

  save_dump(dir / "dump.json", {{"conv1", TensorData{conv}}, {"fc", TensorData{fc}}});
  const ActivationDump dump = load_dump(dir / "dump.json");

  Recipe recipe;
  recipe.method = RecipeMethod::KL;
  recipe.entries.push_back({"conv1", 4, 0.5, 2, std::nullopt});
  recipe.entries.push_back({"fc", 3, 1.0 / 3.0, 1, std::nullopt});
  validate_recipe(recipe);

  const Recipe attached = attach_selection(recipe, dump, PoolMode::Max, 1);
  REQUIRE(attached.entries.size() == 2);
  for (const RecipeEntry& e : attached.entries) {
    REQUIRE(e.kept_indices.has_value());
    CHECK(static_cast<int>(e.kept_indices->size()) == e.kept_count);
    CHECK(std::is_sorted(e.kept_indices->begin(), e.kept_indices->end()));
  }
  CHECK_NOTHROW(validate_recipe(attached));

  // the attachment is exactly a per-layer select_filters run
  const ResponseMatrix pooled =
      pool_responses("conv1", load_dump_tensor(*find_entry(dump, "conv1")), PoolMode::Max);
  CHECK(*attached.entries[0].kept_indices == select_filters(pooled, 2).kept_indices);

  // scheduling must not change anything
  const Recipe threaded = attach_selection(recipe, dump, PoolMode::Max, 4);
  CHECK(threaded == attached);

  SUBCASE("recipe layers missing from the dump are an error") {
    Recipe ghost = recipe;
    ghost.entries[1].layer_id = "ghost";
    CHECK_THROWS_AS(attach_selection(ghost, dump, PoolMode::Max, 1), Error);
  }
  SUBCASE("channel-count disagreement is an error") {
    Recipe wide = recipe;
    wide.entries[0].channels = 5;
    wide.entries[0].gamma = 0.4;  // keeps kept_count=2 self-consistent
    CHECK_THROWS_AS(attach_selection(wide, dump, PoolMode::Max, 1), Error);
  }
}

}  // TEST_SUITE
