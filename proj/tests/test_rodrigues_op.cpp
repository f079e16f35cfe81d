#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "rodrinet/gradcheck.hpp"
#include "rodrinet/rodrigues_op.hpp"
#include "test_support.hpp"

using namespace rodrinet;
using testutil::random_unit_axis;
using testutil::random_pose;

namespace {

using D = double;

struct OpInputs {
  Tensor<D> f, theta, w, wc;
};

OpInputs random_inputs(std::size_t n, std::size_t ci, std::size_t co, std::size_t cj, std::uint64_t seed) {
  CounterRng rng(seed, "op-inputs");
  const Shape ks = RodriguesKernel<D>::shape(ci, co, cj);
  OpInputs in{random_tensor<D>({n, ci, 4, 4}, rng), random_tensor<D>({n, cj}, rng), random_tensor<D>(ks, rng),
              random_tensor<D>(ks, rng)};
  for (D& v : in.theta.data) v *= 2.0;
  return in;
}

// Operating range of the operator: O(1) features, weights at the init bound.
OpInputs init_scale_inputs(std::size_t n, std::size_t ci, std::size_t co, std::size_t cj, std::uint64_t seed) {
  CounterRng rng(seed, "op-inputs-init-scale");
  const Shape ks = RodriguesKernel<D>::shape(ci, co, cj);
  const double bound = kernel_init_bound(ci, 1 + 2 * cj);
  auto fill = [&](Shape s, double a) {
    Tensor<D> t(std::move(s));
    for (D& v : t.data) v = rng.uniform(-a, a);
    return t;
  };
  return {fill({n, ci, 4, 4}, 1.0), fill({n, cj}, std::numbers::pi), fill(ks, bound), fill(ks, bound)};
}

template <typename T>
Tensor<T> run_op(const OpInputs& in, OpMode mode) {
  Tape<T> t;
  return rodrigues_multichannel(t.constant(in.f.cast<T>()), t.constant(in.theta.cast<T>()),
                                t.constant(in.w.cast<T>()), t.constant(in.wc.cast<T>()), mode)
      .value();
}

using Block = Eigen::Matrix<D, 4, 4, Eigen::RowMajor>;
Block block(const Tensor<D>& t, std::size_t offset) { return Eigen::Map<const Block>(t.ptr() + offset * 16); }

// Direct evaluation of the operator definition with explicit matrices.
Tensor<D> naive_operator(const OpInputs& in) {
  const std::size_t n = in.f.dim(0), ci = in.f.dim(1), co = in.w.dim(1), cj = in.theta.dim(1), k = 1 + 2 * cj;
  Tensor<D> out({n, co, 4, 4});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < co; ++j) {
      Block acc = Block::Zero();
      for (std::size_t i = 0; i < ci; ++i) {
        Block u = block(in.w, (i * co + j) * k), ub = block(in.wc, (i * co + j) * k);
        for (std::size_t c = 0; c < cj; ++c) {
          const D th = in.theta[b * cj + c];
          u += block(in.w, (i * co + j) * k + 1 + c) * std::cos(th) +
               block(in.w, (i * co + j) * k + 1 + cj + c) * std::sin(th);
          ub += block(in.wc, (i * co + j) * k + 1 + c) * std::cos(th) +
                block(in.wc, (i * co + j) * k + 1 + cj + c) * std::sin(th);
        }
        const Block fi = block(in.f, b * ci + i);
        acc += fi * u + ub * fi;
      }
      Eigen::Map<Block>(out.ptr() + (b * co + j) * 16) = acc;
    }
  return out;
}

double max_diff(const Tensor<D>& a, const Tensor<D>& b) {
  EXPECT_EQ(a.shape, b.shape);
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Joint random_joint(CounterRng& rng) {
  Joint j;
  j.fixed_transform = random_pose(rng);
  j.axis = random_unit_axis(rng);
  return j;
}

}  // namespace

TEST(RodriguesOp, ClassicalSingleChannelReproducesJointTransform) {
  CounterRng rng(3, "classical");
  for (int trial = 0; trial < 200; ++trial) {
    const Joint joint = random_joint(rng);
    const double theta = rng.uniform(-4 * std::numbers::pi, 4 * std::numbers::pi);
    const Mat4<D> f = random_pose(rng).matrix();
    auto k = init_from_classical(joint);
    const Mat4<D> got = rodrigues_single<D>(f, theta, k.bias(0, 0), k.cos_weight(0, 0, 0), k.sin_weight(0, 0, 0));
    Eigen::Matrix4d rot = Eigen::Matrix4d::Identity();
    rot.topLeftCorner<3, 3>() = Eigen::AngleAxisd(theta, joint.axis).toRotationMatrix();
    const Mat4<D> expect = f * joint.fixed_transform.matrix() * rot;
    EXPECT_LT((got - expect).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_TRUE(k.conj.to_vector() == std::vector<D>(k.conj.size(), 0.0));
  }
}

TEST(RodriguesOp, ClassicalInitRejectsMultiChannel) {
  const Joint joint;
  EXPECT_THROW(init_from_classical(joint, 2, 1, 1), InvalidShape);
  EXPECT_THROW(init_from_classical(joint, 1, 3, 1), InvalidShape);
  EXPECT_THROW(init_from_classical(joint, 1, 1, 2), InvalidShape);
  EXPECT_NO_THROW(init_from_classical(joint, 1, 1, 1));
}

TEST(RodriguesOp, BothModesMatchNaiveDefinition) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const OpInputs in = random_inputs(3, 2 + seed % 2, 3, 1 + seed % 3, seed);
    const Tensor<D> expect = naive_operator(in);
    EXPECT_LT(max_diff(run_op<D>(in, OpMode::fused), expect), 1e-12);
    EXPECT_LT(max_diff(run_op<D>(in, OpMode::reference), expect), 1e-12);
  }
}

TEST(RodriguesOp, FusedMatchesReferenceOnShapeGrid) {
  for (std::size_t ci : {1, 4, 16})
    for (std::size_t co : {1, 2, 8})
      for (std::size_t cj : {1, 4})
        for (std::size_t n : {1, 33}) {
          SCOPED_TRACE(shape_str({n, ci, co, cj}));
          const OpInputs in = random_inputs(n, ci, co, cj, ci * 100 + co * 10 + cj);
          EXPECT_LT(max_diff(run_op<D>(in, OpMode::fused), run_op<D>(in, OpMode::reference)), 1e-12);
          const OpInputs fin = init_scale_inputs(n, ci, co, cj, ci * 100 + co * 10 + cj);
          const Tensor<float> a = run_op<float>(fin, OpMode::fused), b = run_op<float>(fin, OpMode::reference);
          double m = 0;
          for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, double(std::abs(a[i] - b[i])));
          EXPECT_LT(m, 1e-5);
        }
}

TEST(RodriguesOp, PeriodicInJointAngle) {
  OpInputs in = random_inputs(8, 3, 2, 2, 11);
  const Tensor<D> base = run_op<D>(in, OpMode::fused);
  for (D& v : in.theta.data) v += 2 * std::numbers::pi;
  EXPECT_LT(max_diff(run_op<D>(in, OpMode::fused), base), 1e-10);
  for (D& v : in.theta.data) v -= 6 * std::numbers::pi;
  EXPECT_LT(max_diff(run_op<D>(in, OpMode::reference), base), 1e-10);
}

TEST(RodriguesOp, LinearInFeatures) {
  OpInputs a = random_inputs(5, 3, 4, 2, 21);
  OpInputs b = random_inputs(5, 3, 4, 2, 22);
  b.theta = a.theta;
  b.w = a.w;
  b.wc = a.wc;
  OpInputs mix = a;
  const D alpha = 0.7, beta = -1.9;
  for (std::size_t i = 0; i < mix.f.size(); ++i) mix.f[i] = alpha * a.f[i] + beta * b.f[i];
  const Tensor<D> ya = run_op<D>(a, OpMode::fused), yb = run_op<D>(b, OpMode::fused);
  Tensor<D> expect(ya.shape);
  for (std::size_t i = 0; i < ya.size(); ++i) expect[i] = alpha * ya[i] + beta * yb[i];
  EXPECT_LT(max_diff(run_op<D>(mix, OpMode::fused), expect), 1e-10);
}

namespace {

struct Grads {
  Tensor<D> f, theta, w, wc;
};

Grads op_grads(const OpInputs& in, const Tensor<D>& g, OpMode mode) {
  Tape<D> t;
  Var<D> f = t.input(in.f, true), th = t.input(in.theta, true), w = t.input(in.w, true), wc = t.input(in.wc, true);
  Var<D> y = rodrigues_multichannel(f, th, w, wc, mode);
  t.backward(sum(mul(y, t.constant(g))));
  return {t.grad(f.id), t.grad(th.id), t.grad(w.id), t.grad(wc.id)};
}

}  // namespace

TEST(RodriguesOp, FusedVjpMatchesReferenceVjp) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const OpInputs in = random_inputs(7, 1 + seed, 2 + seed % 3, 1 + seed % 4, 40 + seed);
    CounterRng rng(seed, "cotangent");
    const Tensor<D> g = random_tensor<D>({7, 2 + seed % 3, 4, 4}, rng);
    const Grads a = op_grads(in, g, OpMode::fused), b = op_grads(in, g, OpMode::reference);
    EXPECT_LT(max_diff(a.f, b.f), 1e-8);
    EXPECT_LT(max_diff(a.theta, b.theta), 1e-8);
    EXPECT_LT(max_diff(a.w, b.w), 1e-8);
    EXPECT_LT(max_diff(a.wc, b.wc), 1e-8);
  }
}

TEST(RodriguesOp, BiasGradientIsSumOfFeatureTransposeTimesCotangent) {
  const OpInputs in = random_inputs(6, 3, 2, 2, 77);
  CounterRng rng(77, "cotangent");
  const Tensor<D> g = random_tensor<D>({6, 2, 4, 4}, rng);
  const std::size_t k = 5;
  for (OpMode mode : {OpMode::fused, OpMode::reference}) {
    const Grads gr = op_grads(in, g, mode);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        Block expect = Block::Zero();
        for (std::size_t b = 0; b < 6; ++b) expect += block(in.f, b * 3 + i).transpose() * block(g, b * 2 + j);
        EXPECT_LT((block(gr.w, (i * 2 + j) * k) - expect).cwiseAbs().maxCoeff(), 1e-12);
      }
  }
}

TEST(RodriguesOp, GradcheckBothModes) {
  for (OpMode mode : {OpMode::fused, OpMode::reference}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SCOPED_TRACE(std::string(to_string(mode)) + " seed " + std::to_string(seed));
      CounterRng srng(seed, "op-shapes");
      const std::size_t n = 1 + srng.below(3), ci = 1 + srng.below(3), co = 1 + srng.below(3), cj = 1 + srng.below(2);
      ParameterStore<D> store;
      store.add("f", {n, ci, 4, 4});
      store.add("theta", {n, cj});
      store.add("w", RodriguesKernel<D>::shape(ci, co, cj));
      store.add("wc", RodriguesKernel<D>::shape(ci, co, cj));
      CounterRng rng(seed, "op-values");
      randomize(store, rng, -1.5, 1.5);
      auto loss = [&](auto& t, auto& st) {
        using S = typename std::decay_t<decltype(t)>::value_type;
        auto y = rodrigues_multichannel(t.param(*st.find("f")), t.param(*st.find("theta")), t.param(*st.find("w")),
                                        t.param(*st.find("wc")), mode);
        CounterRng prng(seed, "op-projection");
        return sum(mul(y, t.constant(random_tensor<S>(y.shape(), prng))));
      };
      const auto rep = gradcheck(store, loss);
      EXPECT_LT(rep.max_rel_error, 1e-5) << rep.worst;
    }
  }
}

TEST(RodriguesOp, ThreadCountDoesNotChangeBits) {
  const OpInputs in = random_inputs(70, 5, 6, 3, 5);
  CounterRng rng(5, "cotangent");
  const Tensor<D> g = random_tensor<D>({70, 6, 4, 4}, rng);
  set_num_threads(1);
  const Tensor<D> y1 = run_op<D>(in, OpMode::fused);
  const Grads g1 = op_grads(in, g, OpMode::fused);
  set_num_threads(4);
  const Tensor<D> y4 = run_op<D>(in, OpMode::fused);
  const Grads g4 = op_grads(in, g, OpMode::fused);
  set_num_threads(1);
  EXPECT_EQ(y1.data, y4.data);
  EXPECT_EQ(g1.f.data, g4.f.data);
  EXPECT_EQ(g1.theta.data, g4.theta.data);
  EXPECT_EQ(g1.w.data, g4.w.data);
}

TEST(RodriguesOp, ShapeErrorsNameTheShapes) {
  Tape<D> t;
  Var<D> f = t.constant(Tensor<D>({2, 3, 4, 4}));
  Var<D> th = t.constant(Tensor<D>({2, 1}));
  Var<D> w = t.constant(Tensor<D>(RodriguesKernel<D>::shape(2, 1, 1)));
  for (OpMode mode : {OpMode::fused, OpMode::reference}) {
    try {
      rodrigues_multichannel(f, th, w, w, mode);
      ADD_FAILURE() << "no throw";
    } catch (const ShapeError& e) {
      EXPECT_NE(std::string(e.what()).find("[2,3,4,4]"), std::string::npos) << e.what();
    }
  }
}

TEST(QuaternionOp, ClassicalCoefficientsReproduceRotation) {
  CounterRng rng(8, "quat");
  for (int trial = 0; trial < 200; ++trial) {
    const Pose<D> tj = random_pose(rng);
    const Eigen::Quaterniond eq = Eigen::Quaterniond::UnitRandom();
    const UnitQuaternion<D> q{eq.w(), eq.x(), eq.y(), eq.z()};
    const auto k = quat_init_from_classical(tj);
    const auto basis = quat_basis_values(q);
    Block u = Block::Zero();
    for (std::size_t m = 0; m < kQuatTerms; ++m) u += block(k.weight, m) * basis[m];
    Eigen::Matrix4d rot = Eigen::Matrix4d::Identity();
    rot.topLeftCorner<3, 3>() = eq.toRotationMatrix();
    const Eigen::Matrix4d expect = tj.matrix() * rot;
    EXPECT_LT((Eigen::Matrix4d(u) - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(QuaternionOp, TapeBasisMatchesValues) {
  Tape<D> t;
  const Eigen::Quaterniond eq(0.5, -0.5, 0.5, 0.5);
  Var<D> b = quat_basis(t.constant(Tensor<D>({1, 4}, {eq.w(), eq.x(), eq.y(), eq.z()})));
  const auto v = quat_basis_values(UnitQuaternion<D>{eq.w(), eq.x(), eq.y(), eq.z()});
  ASSERT_EQ(b.shape(), (Shape{1, kQuatTerms}));
  for (std::size_t m = 0; m < kQuatTerms; ++m) EXPECT_EQ(b.value()[m], v[m]);
}

TEST(QuaternionOp, FusedMatchesReferenceAndGradchecks) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SCOPED_TRACE("seed " + std::to_string(seed));
    CounterRng srng(seed, "qop-shapes");
    const std::size_t n = 1 + srng.below(3), ci = 1 + srng.below(3), co = 1 + srng.below(3);
    ParameterStore<D> store;
    store.add("f", {n, ci, 4, 4});
    store.add("q", {n, 4});
    store.add("w", QuatRodriguesKernel<D>::shape(ci, co));
    store.add("wc", QuatRodriguesKernel<D>::shape(ci, co));
    CounterRng rng(seed, "qop-values");
    randomize(store, rng);
    {
      Tape<D> t;
      std::vector<Var<D>> x;
      for (auto& p : store) x.push_back(t.constant(p.value));
      const Tensor<D> a = rodrigues_quaternion(x[0], x[1], x[2], x[3], OpMode::fused).value();
      const Tensor<D> b = rodrigues_quaternion(x[0], x[1], x[2], x[3], OpMode::reference).value();
      EXPECT_LT(max_diff(a, b), 1e-12);
    }
    auto loss = [&](auto& t, auto& st) {
      using S = typename std::decay_t<decltype(t)>::value_type;
      auto y = rodrigues_quaternion(t.param(*st.find("f")), t.param(*st.find("q")), t.param(*st.find("w")),
                                    t.param(*st.find("wc")), OpMode::fused);
      CounterRng prng(seed, "qop-projection");
      return sum(mul(y, t.constant(random_tensor<S>(y.shape(), prng))));
    };
    const auto rep = gradcheck(store, loss);
    EXPECT_LT(rep.max_rel_error, 1e-5) << rep.worst;
  }
}

TEST(RodriguesBench, ProducesCsvRows) {
  const auto rows = bench_operator({{4, 2, 2, 1}, {8, 3, 2, 2}}, 3, 1);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_GT(r.reference_ns, 0);
    EXPECT_GT(r.fused_ns, 0);
    EXPECT_LT(r.max_abs_diff, 1e-5);
  }
  const auto path = std::filesystem::temp_directory_path() / "rodrinet_bench_test.csv";
  write_bench_csv(path.string(), rows);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "batch,c_in,c_out,c_joint,reference_ns,fused_ns,speedup,max_abs_diff");
  int count = 0;
  while (std::getline(in, line)) ++count;
  EXPECT_EQ(count, 2);
  std::filesystem::remove(path);
}
