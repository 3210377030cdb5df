#include "gradcheck.hpp"

#include "mmscore/checkpoint.hpp"
#include "mmscore/nn.hpp"

#include <doctest.h>

using namespace mmscore;

TEST_CASE("dense net gradients match central differences") {
  CHECK(gradcheck::dense_net(50, 1) < 1e-4);
}

TEST_CASE("dense net rejects input of the wrong width") {
  DenseNet net({3, 4, 2}, {Activation::relu, Activation::identity}, 0);
  CHECK_THROWS_AS(net.forward(Matrix(Matrix::Zero(2, 5))), ShapeError);
}

TEST_CASE("parameter count follows the flat layout") {
  CHECK(DenseNet::count_parameters({3, 4, 2}) == 3 * 4 + 4 + 4 * 2 + 2);
  DenseNet net = make_mlp(3, {4}, 2, Activation::tanh, Activation::identity, 1);
  CHECK(net.parameter_count() == 26);
  CHECK(net.num_layers() == 2);
}

TEST_CASE("hidden returns the post-activation layer output") {
  DenseNet net({2, 3, 1}, {Activation::relu, Activation::identity}, 4);
  const Matrix x = Matrix::Ones(1, 2);
  const Matrix h = net.hidden(x, 0);
  CHECK(h.cols() == 3);
  CHECK(h.minCoeff() >= 0.0);
}

TEST_CASE("adam first step moves each parameter by about the learning rate") {
  AdamState st(2, AdamConfig{0.1, 0.9, 0.999, 1e-8});
  std::vector<double> p{1.0, -1.0};
  std::vector<double> g{0.5, -2.0};
  adam_step(st, p, g);
  CHECK(p[0] == doctest::Approx(0.9));
  CHECK(p[1] == doctest::Approx(-0.9));
  CHECK(st.step == 1);
}

TEST_CASE("adam refuses non-finite gradients") {
  AdamState st(1, AdamConfig{});
  std::vector<double> p{0.0};
  std::vector<double> g{std::nan("")};
  CHECK_THROWS_AS(adam_step(st, p, g), NumericError);
}

TEST_CASE("gradient clipping") {
  std::vector<double> g{3.0, 4.0};
  CHECK(clip_gradient_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0] == doctest::Approx(0.6));
  CHECK(g[1] == doctest::Approx(0.8));
  std::vector<double> small{0.1};
  clip_gradient_norm(small, 1.0);
  CHECK(small[0] == 0.1);
}

TEST_CASE("time embedding layout") {
  const Vector e = time_embed(0.0, 4);
  CHECK(e(0) == 0.0);
  CHECK(e(1) == 1.0);
  CHECK(e(2) == 0.0);
  CHECK(e(3) == 1.0);
  const Vector f = time_embed(0.5, 2);
  CHECK(f(0) == doctest::Approx(std::sin(500.0)));
  CHECK_THROWS_AS(time_embed(0.1, 3), ConfigError);
}

TEST_CASE("checkpoint round trip of a network and adam state") {
  DenseNet net = make_mlp(3, {5}, 2, Activation::softplus, Activation::identity, 9);
  round_to_f32(net);
  AdamState st(net.parameter_count(), AdamConfig{});
  std::vector<double> g(net.parameter_count(), 0.25);
  adam_step(st, net.parameters(), g);
  round_to_f32(net);
  Checkpoint ck;
  ck.put_net("net", net);
  ck.put_adam("adam", st);
  ck.put_string("tag", "abc");
  const Checkpoint back = Checkpoint::decode(ck.encode());
  const DenseNet n2 = back.get_net("net");
  CHECK(n2.widths() == net.widths());
  CHECK(std::equal(n2.parameters().begin(), n2.parameters().end(), net.parameters().begin()));
  CHECK(back.get_string("tag") == "abc");
  CHECK(back.get_adam("adam", AdamConfig{}).step == 1);
  CHECK_THROWS_AS(back.get_net("missing"), FormatError);
}

TEST_CASE("checkpoint decoding rejects corrupted input") {
  Checkpoint ck;
  ck.put_string("a", "b");
  auto bytes = ck.encode();
  bytes[1] = 'Z';
  CHECK_THROWS_AS(Checkpoint::decode(bytes), FormatError);
  auto cut = ck.encode();
  cut.pop_back();
  CHECK_THROWS_AS(Checkpoint::decode(cut), LengthError);
}
