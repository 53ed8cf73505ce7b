// Built with PEFT_CHECK_FINITE=1 regardless of build type.
#include <gtest/gtest.h>

#include <limits>

#include "peft/diffengine/ops.hpp"

using peft::ad::Tensor;

TEST(FiniteCheck, OverflowingOpIsReported) {
  auto x = Tensor<float>::from({2}, {1e30f, 1.0f});
  EXPECT_THROW(peft::ad::scale(x, 1e30f), peft::NumericalError);
}

TEST(FiniteCheck, FiniteResultsPass) {
  auto x = Tensor<float>::from({2}, {1.0f, 2.0f});
  EXPECT_NO_THROW(peft::ad::scale(x, 3.0f));
}
