#include <gtest/gtest.h>

#include <cmath>

#include "fusedet/ops.hpp"
#include "fusedet/params.hpp"
#include "gradcheck.hpp"

using namespace fusedet;
using fusedet::testing::check_gradients;
using fusedet::testing::random_tensor;

TEST(Ops, ReluExample) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(relu(x).value(), Tensor(Shape{3}, {0.0, 0.0, 2.0}));
}

TEST(Ops, MatmulIdentity) {
  SplitMix64 rng(5);
  Tape tape;
  Tensor eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor a = random_tensor(rng, {3, 3});
  EXPECT_EQ(matmul(tape.constant(eye), tape.constant(a)).value(), a);
}

TEST(Ops, Conv2dOnesCenterIsNine) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{1, 3, 3}, 1.0));
  Var w = tape.constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
  Tensor out = conv2d_same(x, w).value();
  ASSERT_EQ(out.shape(), (Shape{1, 3, 3}));
  EXPECT_DOUBLE_EQ(out.at(0, 1, 1), 9.0);
  // Direct zero-padded convolution by hand: corners see 4 ones, edges 6.
  EXPECT_DOUBLE_EQ(out.at(0, 0, 0), 4.0);
  EXPECT_DOUBLE_EQ(out.at(0, 0, 1), 6.0);
}

TEST(Ops, Conv2dStrideTwoShape) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{2, 8, 8}, 1.0));
  Var w = tape.constant(Tensor(Shape{4, 2, 3, 3}, 1.0));
  Tensor out = conv2d(x, w, nullptr, {2, 1}).value();
  EXPECT_EQ(out.shape(), (Shape{4, 4, 4}));
  EXPECT_DOUBLE_EQ(out.at(0, 1, 1), 18.0);
  EXPECT_THROW(conv2d(x, w, nullptr, {3, 1}), std::invalid_argument);
}

TEST(Ops, ShapeErrorsNameTheOp) {
  Tape tape;
  Var a = tape.constant(Tensor(Shape{2, 3}));
  Var b = tape.constant(Tensor(Shape{3, 2}));
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(matmul(a, a), ShapeError);
  EXPECT_THROW(div(a, tape.constant(Tensor(Shape{2, 3}, 0.0))), DomainError);
}

TEST(Ops, BlurPreservesConstants) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{2, 5, 7}, 0.3));
  const auto k = gaussian_kernel(7, 1.4);
  Tensor out = blur(x, k).value();
  for (double v : out.data()) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(Backward, SumOfSquares) {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{3}, {1.0, 2.0, 3.0}));
  tape.backward(sum(x * x));
  EXPECT_EQ(x.grad(), Tensor(Shape{3}, {2.0, 4.0, 6.0}));
}

TEST(Backward, SigmoidAtZero) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(0.0));
  tape.backward(sigmoid(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Backward, NonScalarRootRejected) {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{2}, 1.0));
  EXPECT_THROW(tape.backward(x * x), ShapeError);
}

TEST(Backward, UnreachedParamsGetZeros) {
  ParamSet params;
  params.add("a", Tensor(Shape{2}, {1.0, 2.0}));
  params.add("b", Tensor(Shape{3}, 1.0));
  Tape tape;
  Bindings bound = params.bind(tape);
  GradMap grads = backward(sum(square(bound.at("a"))), bound);
  EXPECT_EQ(grads.at("a"), Tensor(Shape{2}, {2.0, 4.0}));
  EXPECT_EQ(grads.at("b"), Tensor(Shape{3}, 0.0));
}

TEST(Backward, MaxTiesRouteToFirstInput) {
  Tape tape;
  Var a = tape.leaf(Tensor(Shape{2}, {1.0, 2.0}));
  Var b = tape.leaf(Tensor(Shape{2}, {1.0, 3.0}));
  tape.backward(sum(maximum(a, b)));
  EXPECT_EQ(a.grad(), Tensor(Shape{2}, {1.0, 0.0}));
  EXPECT_EQ(b.grad(), Tensor(Shape{2}, {0.0, 1.0}));
}

TEST(Backward, ChannelNormSinglePositionLeavesBeta) {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{2, 1, 1}, {3.0, -4.0}));
  Var gamma = tape.leaf(Tensor(Shape{2}, {1.5, 2.0}));
  Var beta = tape.leaf(Tensor(Shape{2}, {0.25, -0.5}));
  Var y = channel_norm(x, gamma, beta);
  EXPECT_EQ(y.value(), Tensor(Shape{2, 1, 1}, {0.25, -0.5}));
  tape.backward(sum(y));
  EXPECT_EQ(x.grad(), Tensor(Shape{2, 1, 1}, 0.0));
}

namespace {

// Random inputs for one instance of `kind`, shaped to be compatible.
std::vector<Tensor> random_inputs(OpKind kind, SplitMix64& rng) {
  auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
  const Shape s{dim(1, 3), dim(2, 5), dim(2, 5)};
  const bool scalar_rhs = rng.below(5) == 0;
  const Shape rhs = scalar_rhs ? Shape{1} : s;
  switch (kind) {
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kMaximum:
      return {random_tensor(rng, s), random_tensor(rng, rhs)};
    case OpKind::kDiv: {
      Tensor d = random_tensor(rng, rhs, 0.5, 2.0);
      for (double& v : d.data()) v *= rng.below(2) ? 1.0 : -1.0;
      return {random_tensor(rng, s), d};
    }
    case OpKind::kMatmul: {
      const std::size_t m = dim(1, 4), k = dim(1, 4), n = dim(1, 4);
      return {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})};
    }
    case OpKind::kConv2d: {
      const std::size_t kk = rng.below(2) ? 3 : 1;
      std::vector<Tensor> in{random_tensor(rng, s), random_tensor(rng, {dim(1, 3), s[0], kk, kk})};
      if (rng.below(2)) in.push_back(random_tensor(rng, {in[1].dim(0)}));
      return in;
    }
    case OpKind::kSqrt:
      return {random_tensor(rng, s, 0.2, 2.0)};
    case OpKind::kBroadcastScale:
      return {random_tensor(rng, {1}), random_tensor(rng, s)};
    case OpKind::kConcatChannel: {
      std::vector<Tensor> in;
      const std::size_t parts = dim(1, 3);
      for (std::size_t p = 0; p < parts; ++p) in.push_back(random_tensor(rng, {dim(1, 3), s[1], s[2]}));
      return in;
    }
    case OpKind::kBlur:
      if (rng.below(2)) return {random_tensor(rng, {s[1] + 2, s[2] + 1})};
      return {random_tensor(rng, s)};
    default:
      return {random_tensor(rng, s)};
  }
}

}  // namespace

// Every registered op inside a random weighted-sum graph agrees with central differences.
TEST(GradientProperty, EveryOpKindMatchesFiniteDifferences) {
  for (OpKind kind : kAllOpKinds) {
    SplitMix64 rng(1000 + static_cast<std::uint64_t>(kind));
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Tensor> inputs = random_inputs(kind, rng);
      const std::uint64_t weight_seed = rng.next();
      auto build = [&](Tape& tape, const std::vector<Var>& in) {
        Var out = forward_op(kind, in);
        SplitMix64 wr(weight_seed);
        Var w = tape.constant(random_tensor(wr, out.shape()));
        return sum(out * w);
      };
      const auto check = check_gradients(build, inputs);
      ASSERT_LT(check.relative_error, 1e-5) << op_name(kind) << " trial " << trial;
    }
  }
}

TEST(GradientProperty, RandomCompositeGraphs) {
  SplitMix64 rng(77);
  const OpKind unary_ops[] = {OpKind::kRelu, OpKind::kSigmoid, OpKind::kAbs, OpKind::kSquare, OpKind::kBlur};
  const OpKind binary_ops[] = {OpKind::kAdd, OpKind::kSub, OpKind::kMul, OpKind::kMaximum};
  for (int graph = 0; graph < 100; ++graph) {
    const Shape s{1 + rng.below(2), 3 + rng.below(3), 3 + rng.below(3)};
    std::vector<Tensor> inputs{random_tensor(rng, s), random_tensor(rng, s), random_tensor(rng, s)};
    std::vector<int> program;
    for (int i = 0; i < 6; ++i) program.push_back(static_cast<int>(rng.below(100)));
    auto build = [&](Tape&, const std::vector<Var>& in) {
      Var acc = in[0];
      for (std::size_t i = 0; i < program.size(); ++i) {
        const int code = program[i];
        if (code % 2 == 0) {
          Var u = forward_op(unary_ops[code / 2 % 5], std::vector<Var>{acc});
          acc = u;
        } else {
          std::vector<Var> args{acc, in[1 + code / 2 % 2]};
          acc = forward_op(binary_ops[code / 4 % 4], args);
        }
      }
      return mean(acc * in[2]);
    };
    const auto check = check_gradients(build, inputs);
    ASSERT_LT(check.relative_error, 1e-5) << "graph " << graph;
  }
}

TEST(GradientProperty, ChannelNormAndOuterProduct) {
  SplitMix64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Tensor> inputs{random_tensor(rng, {3, 4, 5}), random_tensor(rng, {3}), random_tensor(rng, {3}),
                               random_tensor(rng, {2, 4, 5}), random_tensor(rng, {6, 4, 5})};
    auto build = [](Tape& tape, const std::vector<Var>& in) {
      Var n = channel_norm(in[0], in[1], in[2]);
      Var o = channel_outer(in[3], n);
      (void)tape;
      return sum(o * in[4]);
    };
    ASSERT_LT(check_gradients(build, inputs).relative_error, 1e-5);
  }
}

TEST(GradientProperty, StridedConvTransposeReshapeBias) {
  SplitMix64 rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Tensor> inputs{random_tensor(rng, {2, 7, 6}), random_tensor(rng, {3, 2, 3, 3}),
                               random_tensor(rng, {3})};
    auto build = [](Tape&, const std::vector<Var>& in) {
      Var y = conv2d(in[0], in[1], &in[2], {2, 1});
      Var flat = reshape(y, {3, y.value().size() / 3});
      Var t = transpose(flat);
      return sum(square(matmul(t, flat)));
    };
    ASSERT_LT(check_gradients(build, inputs).relative_error, 1e-5);
  }
}

TEST(Tape, DeterministicValuesAndGradients) {
  auto run = []() {
    SplitMix64 rng(123);
    Tape tape;
    Var x = tape.leaf(random_tensor(rng, {2, 6, 6}));
    Var w = tape.leaf(random_tensor(rng, {3, 2, 3, 3}));
    Var y = sigmoid(conv2d_same(x, w));
    Var loss = mean(square(blur(y, gaussian_kernel(3, 0.8))));
    tape.backward(loss);
    return std::pair{loss.value(), w.grad()};
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Tape, BackwardIsLinear) {
  SplitMix64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x0 = random_tensor(rng, {3, 4});
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    auto f = [](const Var& x) { return sum(sigmoid(x) * x); };
    auto g = [](const Var& x) { return mean(abs(x) + square(x)); };
    Tape t1;
    Var x1 = t1.leaf(x0);
    t1.backward(add(scale(f(x1), a), scale(g(x1), b)));
    const Tensor combined = x1.grad();
    Tape t2;
    Var x2 = t2.leaf(x0);
    Var fv = f(x2), gv = g(x2);
    t2.backward(fv);
    const Tensor gf = x2.grad();
    t2.backward(gv);
    const Tensor gg = x2.grad();
    for (std::size_t i = 0; i < combined.size(); ++i) EXPECT_NEAR(combined[i], a * gf[i] + b * gg[i], 1e-12);
  }
}

TEST(FlattenGrads, LexicographicOrder) {
  ParamSet params;
  params.add("b", Tensor(Shape{2}));
  params.add("a", Tensor(Shape{2}));
  GradMap grads{{"a", Tensor(Shape{2}, {1.0, 2.0})}, {"b", Tensor(Shape{2}, {3.0, 4.0})}};
  EXPECT_EQ(flatten_grads(grads, {"a", "b"}), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_TRUE(flatten_grads(grads, {}).empty());
  EXPECT_THROW(flatten_grads(grads, {"c"}), std::invalid_argument);
}

TEST(FlattenGrads, UnflattenRoundTrip) {
  SplitMix64 rng(2);
  ParamSet params;
  params.add("conv.w", random_tensor(rng, {2, 1, 3, 3}), true);
  params.add("conv.b", random_tensor(rng, {2}), true);
  params.add("head", random_tensor(rng, {4, 3}));
  GradMap grads;
  for (const auto& [name, v] : params.values()) grads.emplace(name, random_tensor(rng, v.shape()));
  const auto flat = flatten_grads(grads, params.shared_names());
  EXPECT_EQ(flat.size(), params.count(params.shared_names()));
  GradMap back = unflatten(flat, params, params.shared_names());
  for (const auto& name : params.shared_names()) EXPECT_EQ(back.at(name), grads.at(name));
  EXPECT_THROW(unflatten(std::vector<double>(3), params, params.shared_names()), ShapeError);
}

TEST(ParamSet, SharedMaskMustNameParameters) {
  ParamSet params;
  params.add("a", Tensor(Shape{1}));
  EXPECT_THROW(params.mark_shared("missing"), std::out_of_range);
  EXPECT_THROW(params.add("a", Tensor(Shape{1})), std::invalid_argument);
  EXPECT_THROW(params.set("a", Tensor(Shape{2})), ShapeError);
}
