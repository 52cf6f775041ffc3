#include <gtest/gtest.h>

#include <sstream>

#include "cgdmer/verify/suites.hpp"

namespace cgdmer::verify {
namespace {

TEST(LossCheck, EveryEntryPasses) {
  auto r = losscheck();
  std::ostringstream os;
  r.print(os);
  EXPECT_TRUE(r.passed()) << os.str();
  EXPECT_GT(r.checks.size(), 50u);
}

TEST(GradCheckSuite, CoversPrimitivesAndLosses) {
  auto r = gradcheck(3);
  std::ostringstream os;
  r.print(os);
  EXPECT_TRUE(r.passed()) << os.str();
  EXPECT_EQ(r.checks.size(), primitive_names().size() + 6);
}

TEST(Recorder, ExceptionsAndNonFiniteFail) {
  SuiteReport r;
  detail::Recorder rec(r);
  rec.run("throws", Kind::kTrivial, []() -> double { throw std::runtime_error("x"); });
  rec.run("nan", Kind::kDerived, [] { return std::nan(""); });
  rec.run("loose", Kind::kDerived, [] { return 1e-7; });
  rec.run("tight", Kind::kTrivial, [] { return 1e-7; });
  ASSERT_EQ(r.checks.size(), 4u);
  EXPECT_FALSE(r.checks[0].passed);
  EXPECT_FALSE(r.checks[1].passed);
  EXPECT_FALSE(r.checks[2].passed);
  EXPECT_TRUE(r.checks[3].passed);
  EXPECT_EQ(r.failures(), 3u);
}

}  // namespace
}  // namespace cgdmer::verify
