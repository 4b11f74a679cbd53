#include <cstdio>
#include <cstring>
#include <filesystem>

#include "common/fixtures.hpp"
#include "doctest.h"
#include "sdfm/container.hpp"
#include "sdfm/error.hpp"
#include "sdfm/flow.hpp"

using namespace sdfm;

namespace {

Container sample_container() {
  Container c;
  c.kind = ContainerKind::Dataset;
  c.meta["note"] = "roundtrip";
  c.add("a", {2, 3}, {1.0 / 3, -2.5e-300, 7.0, 0.1, 1e300, -0.0});
  c.add("b", {4}, {0.1, 1.0 / 3, -7.25, 3e38}, DType::F32);
  return c;
}

std::uint64_t read_u64(const std::vector<std::uint8_t>& b, std::size_t off) {
  std::uint64_t v = 0;
  std::memcpy(&v, b.data() + off, 8);
  return v;
}

}  // namespace

TEST_CASE("container roundtrip is bit exact") {
  const Container c = sample_container();
  const auto bytes = encode_container(c);
  CHECK(std::memcmp(bytes.data(), "SDFM", 4) == 0);
  const Container d = decode_container(bytes);
  CHECK(d.kind == ContainerKind::Dataset);
  CHECK(d.meta.at("note") == "roundtrip");
  const Array& a = d.get("a");
  CHECK(a.shape == std::vector<std::size_t>{2, 3});
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::memcmp(&a.data[i], &c.get("a").data[i], sizeof(double)) == 0);
  const Array& b = d.get("b");
  CHECK(b.dtype == DType::F32);
  for (std::size_t i = 0; i < 4; ++i) CHECK(b.data[i] == static_cast<double>(static_cast<float>(c.get("b").data[i])));
  CHECK(encode_container(d) == bytes);
}

TEST_CASE("container decoding fails closed") {
  const auto good = encode_container(sample_container());
  const std::size_t meta_len = read_u64(good, 12);
  const std::size_t payload_start = 20 + meta_len;
  REQUIRE(good.size() > payload_start);

  SUBCASE("bad magic") {
    auto b = good;
    b[0] = 'X';
    CHECK_THROWS_AS(decode_container(b), FormatError);
  }
  SUBCASE("version mismatch") {
    auto b = good;
    b[4] = 2;
    CHECK_THROWS_AS(decode_container(b), FormatError);
  }
  SUBCASE("unknown kind") {
    auto b = good;
    b[8] = 9;
    CHECK_THROWS_AS(decode_container(b), FormatError);
  }
  SUBCASE("corrupt payload") {
    auto b = good;
    b.back() ^= 0x01;
    CHECK_THROWS_AS(decode_container(b), FormatError);
  }
  SUBCASE("truncated") {
    for (std::size_t n : {std::size_t{3}, std::size_t{15}, payload_start - 1, good.size() - 1}) {
      const std::vector<std::uint8_t> b(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(n));
      CHECK_THROWS_AS(decode_container(b), FormatError);
    }
  }
  SUBCASE("trailing bytes") {
    auto b = good;
    b.push_back(0);
    CHECK_THROWS_AS(decode_container(b), FormatError);
  }
  SUBCASE("metadata that is not JSON") {
    auto b = good;
    b[20] = '#';
    CHECK_THROWS_AS(decode_container(b), FormatError);
  }
}

TEST_CASE("container files") {
  const std::string path = "container_test.sdfm";
  write_container(path, sample_container());
  CHECK(read_container(path).get("a").count() == 6);
  CHECK_THROWS_AS(read_container(path, ContainerKind::Potential), FormatError);
  CHECK_THROWS_AS(read_container("does/not/exist.sdfm"), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("dataset roundtrip") {
  Rng rng(1);
  Dataset d{sample_gaussian(rng, 5, 3), sample_gaussian(rng, 5, 2), {0.1, 0.2, 0.3, 0.2, 0.2}};
  const Dataset e = dataset_from_container(decode_container(encode_container(dataset_container(d))));
  CHECK(e.points == d.points);
  REQUIRE(e.conditions.has_value());
  CHECK(*e.conditions == *d.conditions);
  CHECK(e.weights == d.weights);
}

TEST_CASE("potential roundtrip keeps cost, binding and provenance") {
  Rng rng(2);
  const DenseMatrix y = sample_gaussian(rng, 6, 4);
  CostConfig cost = fx::negdot_cost(0.0);
  cost.eps_raw = 0.1;
  cost.eps_effective = 0.37;
  cost.cost_std = 3.7;
  cost.rescaled = true;
  Rng prng(3);
  cost.projection = fit_pca(y, 2, prng);
  const TargetMeasure t = make_target(y, std::nullopt, {}, cost);
  Potential p = Potential::zeros(t, cost);
  for (double& v : p.g) v = rng.normal();
  p.provenance.optimizer = "adagrad";
  p.provenance.iterations = 1234;
  p.provenance.final_chi2 = 0.01;
  p.provenance.averaging_window = 200;

  const Potential q = potential_from_container(decode_container(encode_container(potential_container(p))));
  CHECK(q.g == p.g);
  CHECK(q.target_fingerprint == p.target_fingerprint);
  CHECK(q.cost.eps_effective == 0.37);
  CHECK(q.cost.eps_raw == 0.1);
  CHECK(q.cost.cost_std == 3.7);
  CHECK(q.cost.rescaled);
  REQUIRE(q.cost.projection.has_value());
  CHECK(q.cost.projection->basis == p.cost.projection->basis);
  CHECK(q.cost.projection->mean == p.cost.projection->mean);
  CHECK(q.provenance.iterations == 1234);
  CHECK(q.provenance.optimizer == "adagrad");
  CHECK_NOTHROW(check_binding(t, q));
  CHECK_THROWS_AS(potential_from_container(dataset_container({y, std::nullopt, {}})), FormatError);
}

TEST_CASE("projection roundtrip") {
  Rng rng(4);
  const DenseMatrix y = sample_gaussian(rng, 20, 5);
  Rng prng(5);
  const ProjectionMatrix p = fit_pca(y, 3, prng);
  const auto q = projection_from(decode_container(encode_container(projection_container(p))), "");
  REQUIRE(q.has_value());
  CHECK(q->basis == p.basis);
  CHECK(q->explained_variance == p.explained_variance);
  CHECK(q->apply(y.row(0)) == p.apply(y.row(0)));
}

TEST_CASE("model roundtrip") {
  Rng rng(6);
  const FlowModel m(MlpConfig{3, 2, {8, 4}}, rng);
  const FlowModel n = model_from_container(decode_container(encode_container(model_container(m))));
  CHECK(n == m);
  CHECK(n.config().hidden == std::vector<std::size_t>{8, 4});
  CHECK(n.condition_dim() == 2);
}
