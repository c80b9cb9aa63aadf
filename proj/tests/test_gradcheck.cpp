#include "doctest.h"

#include "ms2tan/attention.hpp"
#include "ms2tan/gradcheck.hpp"

using namespace ms2tan;

TEST_CASE("registered ops") {
  const auto& ops = gradcheck_ops();
  for (const char* op : {"embed", "unembed", "masked_attention", "mta", "msa", "ffn", "msta", "mfe", "scale_forward",
                         "model", "pixel_loss", "structural_loss", "perceptual_loss"})
    CHECK(std::find(ops.begin(), ops.end(), op) != ops.end());
  CHECK(gradcheck_module("ffn") == "attention");
  CHECK(gradcheck_module("model") == "network");
  CHECK_THROWS_AS(gradcheck_suite("optimizer"), ConfigError);
}

TEST_CASE("linear ops meet the tight tolerance") {
  for (const char* op : {"ffn", "embed", "unembed"}) {
    const auto r = gradcheck(op);
    CAPTURE(op);
    CHECK(r.tolerance == 1e-6);
    CHECK(r.max_rel_err < 1e-6);
    CHECK(r.passed);
    CHECK(r.coordinates_checked > 0);
  }
}

TEST_CASE("attention and structural loss") {
  for (const char* op : {"masked_attention", "structural_loss", "layer_norm"}) {
    const auto r = gradcheck(op);
    CAPTURE(op);
    CHECK(r.max_rel_err < 1e-4);
    CHECK(r.passed);
  }
}

TEST_CASE("report names the worst coordinate") {
  const auto r = gradcheck("masked_attention", GradcheckOptions{1e-5, 3, 0});
  CHECK(r.worst_coordinate.find('[') != std::string::npos);
  CHECK(r.module == "attention");
}

TEST_CASE("injected sign fault is detected") {
  FfnSignFaultScope fault;
  const auto r = gradcheck("ffn");
  CHECK_FALSE(r.passed);
  CHECK(r.worst_coordinate.find("fc2.weight") != std::string::npos);
}
