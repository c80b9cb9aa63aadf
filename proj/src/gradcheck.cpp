#include "ms2tan/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>

#include "ms2tan/attention.hpp"
#include "ms2tan/embedding.hpp"
#include "ms2tan/losses.hpp"
#include "ms2tan/network.hpp"
#include "ms2tan/parameters.hpp"
#include "ms2tan/random.hpp"

namespace ms2tan {

namespace {

using D = double;

struct Tensor {
  std::string name;
  D* value;
  const D* grad;
  Index size;
};

struct Problem {
  std::vector<Tensor> tensors;
  std::function<D()> objective;
  std::function<void()> analytic;  // refreshes every grad buffer
  double tolerance = 1e-4;
};

struct State {
  ParameterStore<D> params;
  std::vector<Mat<D>> mats;
  std::vector<Mat<D>> mat_grads;
  std::vector<Cube<D>> cubes;
  std::vector<Cube<D>> cube_grads;
  Mat<D> weights;         // objective weights for matrix outputs
  Cube<D> cube_weights;   // objective weights for cube outputs
  MaskCube mask;
  AttentionMaskFlags flags;
  std::vector<double> rates;
};

constexpr double kLinearTolerance = 1e-6;
constexpr double kTolerance = 1e-4;

Mat<D> random_mat(Rng& rng, Index r, Index c, double scale = 1.0) {
  Mat<D> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, scale);
  return m;
}

Cube<D> random_cube(Rng& rng, Dims d, double lo = 0.0, double hi = 1.0) {
  Cube<D> c(d);
  for (Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform(lo, hi);
  return c;
}

MaskCube random_mask(Rng& rng, Dims d, double missing) {
  MaskCube m(d, 1);
  for (Index i = 0; i < m.size(); ++i) m[i] = rng.uniform(0.0, 1.0) < missing ? 0 : 1;
  return m;
}

/// Random missing rates with at least one token above and one below c_max = 0.5.
std::vector<double> random_rates(Rng& rng, Index n) {
  std::vector<double> r(static_cast<std::size_t>(n));
  for (auto& v : r) v = rng.uniform(0.0, 1.0);
  r[0] = 0.9;
  if (n > 1) r[1] = 0.1;
  return r;
}

void randomize(ParameterStore<D>& params, Rng& rng) {
  for (auto& p : params) {
    const bool gain = p.name.size() > 5 && p.name.compare(p.name.size() - 5, 5, ".gain") == 0;
    const bool bias = p.name.size() > 5 && p.name.compare(p.name.size() - 5, 5, ".bias") == 0;
    const double scale = gain || bias ? 0.2 : 1.0 / std::sqrt(static_cast<double>(p.rows()));
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = (gain ? 1.0 : 0.0) + rng.normal(0.0, scale);
  }
}

void add_param_tensors(Problem& prob, State& st) {
  for (auto& p : st.params) prob.tensors.push_back({p.name, p.value.data(), p.grad.data(), p.value.size()});
}

// Copies element-wise so Tensor grad pointers stay valid.
void copy_into(Mat<D>& dst, const Mat<D>& src) { dst.array() = src.array(); }
void copy_into(Cube<D>& dst, const Cube<D>& src) { std::copy(src.data().begin(), src.data().end(), dst.data().begin()); }

D weighted_sum(const Mat<D>& out, const Mat<D>& w) { return (out.array() * w.array()).sum(); }
D weighted_sum(const Cube<D>& out, const Cube<D>& w) { return (out.data() * w.data()).sum(); }

ModelConfig single_scale(Index P, Index d, Index h, Index dk, Index L) {
  ModelConfig c;
  c.scales = {{P, d, h, dk, L}};
  c.bands = 1;
  return c;
}

// Matrix-in, matrix-out op with parameters: fwd(x, cache) and bwd(cache, dout) -> dx.
template <typename Cache>
Problem matrix_problem(std::shared_ptr<State> st, std::function<Mat<D>(const Mat<D>&, Cache*)> fwd,
                       std::function<Mat<D>(const Cache&, const Mat<D>&)> bwd, double tol) {
  Problem prob;
  prob.tolerance = tol;
  st->mat_grads = {Mat<D>::Zero(st->mats[0].rows(), st->mats[0].cols())};
  prob.tensors.push_back({"x", st->mats[0].data(), st->mat_grads[0].data(), st->mats[0].size()});
  add_param_tensors(prob, *st);
  prob.objective = [st, fwd] { return weighted_sum(fwd(st->mats[0], nullptr), st->weights); };
  prob.analytic = [st, fwd, bwd] {
    st->params.zero_grad();
    Cache cache;
    fwd(st->mats[0], &cache);
    copy_into(st->mat_grads[0], bwd(cache, st->weights));
  };
  return prob;
}

Problem make_embed(std::uint64_t seed) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Dims d{2, 1, 4, 4};
  const ScaleConfig sc{2, 6, 1, 2, 0};
  st->params.add("scale0.embed.weight", 2 * d.C * sc.patch * sc.patch, sc.d_emb, InitKind::Normal);
  st->params.add("scale0.embed.bias", 1, sc.d_emb, InitKind::Zero);
  randomize(st->params, rng);
  st->cubes = {random_cube(rng, d)};
  st->cube_grads = {Cube<D>(d)};
  st->mask = random_mask(rng, d, 0.3);
  st->weights = random_mat(rng, d.T * 4, sc.d_emb);
  Problem prob;
  prob.tolerance = kLinearTolerance;
  prob.tensors.push_back({"x", st->cubes[0].data().data(), st->cube_grads[0].data().data(), st->cubes[0].size()});
  add_param_tensors(prob, *st);
  prob.objective = [st, sc] { return weighted_sum(embed(st->cubes[0], st->mask, sc, st->params, 0).tokens, st->weights); };
  prob.analytic = [st, sc] {
    st->params.zero_grad();
    EmbedCache<D> cache;
    embed(st->cubes[0], st->mask, sc, st->params, 0, &cache);
    copy_into(st->cube_grads[0], embed_backward(cache, st->weights, st->params, 0));
  };
  return prob;
}

Problem make_unembed(std::uint64_t seed) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Dims d{2, 1, 4, 4};
  const ScaleConfig sc{2, 6, 1, 2, 0};
  st->params.add("scale0.unembed.weight", sc.d_emb, d.C * sc.patch * sc.patch, InitKind::Normal);
  st->params.add("scale0.unembed.bias", 1, d.C * sc.patch * sc.patch, InitKind::Zero);
  randomize(st->params, rng);
  st->mats = {random_mat(rng, d.T * 4, sc.d_emb)};
  st->mat_grads = {Mat<D>::Zero(d.T * 4, sc.d_emb)};
  Rng wrng(derive_seed(seed, "weights"));
  st->cube_weights = random_cube(wrng, d, -1.0, 1.0);
  Problem prob;
  prob.tolerance = kLinearTolerance;
  prob.tensors.push_back({"tokens", st->mats[0].data(), st->mat_grads[0].data(), st->mats[0].size()});
  add_param_tensors(prob, *st);
  prob.objective = [st, sc, d] { return weighted_sum(unembed(st->mats[0], sc, st->params, 0, d), st->cube_weights); };
  prob.analytic = [st, sc, d] {
    st->params.zero_grad();
    UnembedCache<D> cache;
    unembed(st->mats[0], sc, st->params, 0, d, &cache);
    copy_into(st->mat_grads[0], unembed_backward(cache, st->cube_weights, st->params, 0));
  };
  return prob;
}

void add_attention_params(ParameterStore<D>& params, const std::string& prefix, Index d, AttentionShape shape) {
  params.add(prefix + ".qkv.weight", d, 3 * shape.inner(), InitKind::Normal);
  params.add(prefix + ".proj.weight", shape.inner(), d, InitKind::Normal);
  params.add(prefix + ".proj.bias", 1, d, InitKind::Zero);
}

Problem make_masked_attention(std::uint64_t seed) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Index n = 5, d = 6;
  const AttentionShape shape{2, 3};
  add_attention_params(st->params, "att", d, shape);
  randomize(st->params, rng);
  st->mats = {random_mat(rng, n, d)};
  st->weights = random_mat(rng, n, d);
  st->flags = AttentionMaskFlags::from_missing_rates(random_rates(rng, n), 0.5);
  using C = MaskedAttentionCache<D>;
  return matrix_problem<C>(
      st, [st, shape](const Mat<D>& x, C* c) { return masked_attention(x, st->flags, st->params, "att", shape, c); },
      [st, shape](const C& c, const Mat<D>& dy) { return masked_attention_backward(c, dy, st->params, "att", shape); },
      kTolerance);
}

Problem make_axis_attention(std::uint64_t seed, AttentionAxis axis) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Index T = 3, N = 4, d = 6;
  const AttentionShape shape{2, 3};
  add_attention_params(st->params, "att", d, shape);
  randomize(st->params, rng);
  st->mats = {random_mat(rng, T * N, d)};
  st->weights = random_mat(rng, T * N, d);
  st->flags = AttentionMaskFlags::from_missing_rates(random_rates(rng, T * N), 0.5);
  using C = GroupedAttentionCache<D>;
  return matrix_problem<C>(
      st,
      [st, shape, axis](const Mat<D>& x, C* c) {
        return axis_attention(x, T, N, axis, st->flags, st->params, "att", shape, c);
      },
      [st, shape, axis](const C& c, const Mat<D>& dy) {
        return axis_attention_backward(c, dy, T, N, axis, st->params, "att", shape);
      },
      kTolerance);
}

Problem make_ffn(std::uint64_t seed) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Index n = 4, d = 6, hidden = 12;
  st->params.add("ffn.fc1.weight", d, hidden, InitKind::Normal);
  st->params.add("ffn.fc1.bias", 1, hidden, InitKind::Zero);
  st->params.add("ffn.fc2.weight", hidden, d, InitKind::Normal);
  st->params.add("ffn.fc2.bias", 1, d, InitKind::Zero);
  randomize(st->params, rng);
  st->mats = {random_mat(rng, n, d)};
  st->weights = random_mat(rng, n, d);
  using C = FfnCache<D>;
  return matrix_problem<C>(
      st, [st](const Mat<D>& x, C* c) { return ffn(x, st->params, "ffn", c); },
      [st](const C& c, const Mat<D>& dy) { return ffn_backward(c, dy, st->params, "ffn"); }, kLinearTolerance);
}

Problem make_layer_norm(std::uint64_t seed) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Index n = 3, d = 6;
  st->params.add("ln.gain", 1, d, InitKind::One);
  st->params.add("ln.bias", 1, d, InitKind::Zero);
  randomize(st->params, rng);
  st->mats = {random_mat(rng, n, d)};
  st->weights = random_mat(rng, n, d);
  using C = LayerNormCache<D>;
  return matrix_problem<C>(
      st, [st](const Mat<D>& x, C* c) { return layer_norm(x, st->params, "ln", c); },
      [st](const C& c, const Mat<D>& dy) { return layer_norm_backward(c, dy, st->params, "ln"); }, kTolerance);
}

Problem make_msta(std::uint64_t seed) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Index T = 2, N = 3, d = 8;
  const AttentionShape shape{2, 4};
  st->params = init_parameters<D>(single_scale(2, d, shape.heads, shape.d_qkv, 1), seed);
  randomize(st->params, rng);
  st->mats = {random_mat(rng, T * N, d)};
  st->weights = random_mat(rng, T * N, d);
  st->flags = AttentionMaskFlags::from_missing_rates(random_rates(rng, T * N), 0.5);
  const std::string prefix = pname::layer(0, 0);
  using C = MstaCache<D>;
  return matrix_problem<C>(
      st,
      [st, shape, prefix](const Mat<D>& x, C* c) { return msta_unit(x, T, N, st->flags, st->params, prefix, shape, c); },
      [st, shape, prefix](const C& c, const Mat<D>& dy) {
        return msta_unit_backward(c, dy, T, N, st->params, prefix, shape);
      },
      kTolerance);
}

Problem make_mfe(std::uint64_t seed) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Index T = 2, N = 4, d = 8;
  const ScaleConfig sc{2, d, 2, 4, 2};
  ModelConfig cfg;
  cfg.scales = {sc};
  st->params = init_parameters<D>(cfg, seed);
  randomize(st->params, rng);
  st->mats = {random_mat(rng, T * N, d)};
  st->weights = random_mat(rng, T * N, d);
  st->rates = random_rates(rng, T * N);
  st->flags = AttentionMaskFlags::from_missing_rates(st->rates, 0.5);
  auto seq_of = [st](const Mat<D>& x) {
    TokenSequence<D> seq;
    seq.tokens = x;
    seq.missing_rate = st->rates;
    seq.T = T;
    seq.N = N;
    seq.P = 2;
    return seq;
  };
  using C = MfeCache<D>;
  return matrix_problem<C>(
      st, [st, sc, seq_of](const Mat<D>& x, C* c) { return mfe(seq_of(x), st->flags, sc, st->params, 0, c); },
      [st, sc](const C& c, const Mat<D>& dy) { return mfe_backward(c, dy, T, N, sc, st->params, 0); }, kTolerance);
}

Problem make_scale_forward(std::uint64_t seed) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Dims d{2, 1, 8, 8};
  const ModelConfig cfg = single_scale(4, 8, 2, 4, 1);
  st->params = init_parameters<D>(cfg, seed, InitOptions{false});
  randomize(st->params, rng);
  st->mask = random_mask(rng, d, 0.4);
  st->cubes = {random_cube(rng, d)};
  st->cube_grads = {Cube<D>(d)};
  st->cube_weights = random_cube(rng, d, -1.0, 1.0);
  Problem prob;
  prob.tolerance = kTolerance;
  prob.tensors.push_back({"prev", st->cubes[0].data().data(), st->cube_grads[0].data().data(), st->cubes[0].size()});
  add_param_tensors(prob, *st);
  prob.objective = [st, cfg] {
    return weighted_sum(scale_forward(st->cubes[0], st->mask, cfg, 0, st->params), st->cube_weights);
  };
  prob.analytic = [st, cfg] {
    st->params.zero_grad();
    ScaleCache<D> cache;
    scale_forward(st->cubes[0], st->mask, cfg, 0, st->params, &cache);
    copy_into(st->cube_grads[0], scale_backward(cache, st->cube_weights, cfg, 0, st->params));
  };
  return prob;
}

Problem make_model(std::uint64_t seed) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Dims d{2, 1, 8, 8};
  ModelConfig cfg;
  cfg.scales = {{4, 8, 2, 4, 1}, {2, 8, 2, 4, 1}};
  cfg.bands = 1;
  st->params = init_parameters<D>(cfg, seed, InitOptions{false});
  randomize(st->params, rng);
  st->mask = random_mask(rng, d, 0.4);
  st->cubes = {random_cube(rng, d), random_cube(rng, d)};  // input, target
  st->cube_grads = {Cube<D>(d)};
  auto feat = std::make_shared<FeatureNetwork<D>>(d.C, cfg.feature_seed);
  Problem prob;
  prob.tolerance = kTolerance;
  prob.tensors.push_back({"x", st->cubes[0].data().data(), st->cube_grads[0].data().data(), st->cubes[0].size()});
  add_param_tensors(prob, *st);
  prob.objective = [st, cfg, feat] {
    const auto trace = ms2tan_forward(st->cubes[0], st->mask, cfg, st->params);
    return joint_loss(trace, st->cubes[1], cfg.loss_weights, *feat).total;
  };
  prob.analytic = [st, cfg, feat] {
    st->params.zero_grad();
    ForwardTape<D> tape;
    const auto trace = ms2tan_forward(st->cubes[0], st->mask, cfg, st->params, &tape);
    std::vector<Cube<D>> grads;
    joint_loss(trace, st->cubes[1], cfg.loss_weights, *feat, &grads);
    copy_into(st->cube_grads[0], network_backward(tape, grads, cfg, st->params));
  };
  return prob;
}

Problem make_loss(std::uint64_t seed, std::function<D(const Cube<D>&, const Cube<D>&, Cube<D>*)> loss) {
  Rng rng(seed);
  auto st = std::make_shared<State>();
  const Dims d{1, 1, 8, 8};
  st->cubes = {random_cube(rng, d), random_cube(rng, d)};  // eta, y
  st->cube_grads = {Cube<D>(d)};
  Problem prob;
  prob.tolerance = kTolerance;
  prob.tensors.push_back({"eta", st->cubes[0].data().data(), st->cube_grads[0].data().data(), st->cubes[0].size()});
  prob.objective = [st, loss] { return loss(st->cubes[0], st->cubes[1], nullptr); };
  prob.analytic = [st, loss] {
    Cube<D> g;
    loss(st->cubes[0], st->cubes[1], &g);
    copy_into(st->cube_grads[0], g);
  };
  return prob;
}

Problem build(const std::string& op, std::uint64_t seed) {
  if (op == "embed") return make_embed(seed);
  if (op == "unembed") return make_unembed(seed);
  if (op == "masked_attention") return make_masked_attention(seed);
  if (op == "mta") return make_axis_attention(seed, AttentionAxis::Temporal);
  if (op == "msa") return make_axis_attention(seed, AttentionAxis::Spatial);
  if (op == "ffn") return make_ffn(seed);
  if (op == "layer_norm") return make_layer_norm(seed);
  if (op == "msta") return make_msta(seed);
  if (op == "mfe") return make_mfe(seed);
  if (op == "scale_forward") return make_scale_forward(seed);
  if (op == "model") return make_model(seed);
  if (op == "pixel_loss")
    return make_loss(seed, [](const Cube<D>& e, const Cube<D>& y, Cube<D>* g) { return pixel_loss(e, y, g); });
  if (op == "structural_loss")
    return make_loss(seed, [](const Cube<D>& e, const Cube<D>& y, Cube<D>* g) { return structural_loss(e, y, g); });
  if (op == "perceptual_loss") {
    auto feat = std::make_shared<FeatureNetwork<D>>(1, 7);
    return make_loss(seed, [feat](const Cube<D>& e, const Cube<D>& y, Cube<D>* g) {
      return perceptual_loss(e, y, *feat, g);
    });
  }
  throw ConfigError("unknown gradcheck op '" + op + "'");
}

std::vector<Index> pick_coordinates(Index size, Index limit) {
  std::vector<Index> out;
  if (limit <= 0 || size <= limit) {
    for (Index k = 0; k < size; ++k) out.push_back(k);
  } else {
    for (Index k = 0; k < limit; ++k) out.push_back(k * size / limit);
  }
  return out;
}

}  // namespace

const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> ops = {"embed",         "unembed", "masked_attention", "mta",
                                               "msa",           "ffn",     "layer_norm",       "msta",
                                               "mfe",           "scale_forward", "model",      "pixel_loss",
                                               "structural_loss", "perceptual_loss"};
  return ops;
}

std::string gradcheck_module(const std::string& op) {
  if (op == "embed" || op == "unembed") return "embedding";
  if (op == "scale_forward" || op == "model") return "network";
  if (op == "pixel_loss" || op == "structural_loss" || op == "perceptual_loss") return "losses";
  return "attention";
}

GradcheckReport gradcheck(const std::string& op, const GradcheckOptions& options) {
  Problem prob = build(op, derive_seed(options.seed, "gradcheck." + op));
  prob.analytic();

  struct Sample {
    std::size_t tensor;
    Index index;
    double analytic;
    double numeric;
  };
  std::vector<Sample> samples;
  const double h = options.epsilon;
  for (std::size_t t = 0; t < prob.tensors.size(); ++t) {
    const Tensor& ten = prob.tensors[t];
    for (Index k : pick_coordinates(ten.size, options.max_coords_per_tensor)) {
      const double orig = ten.value[k];
      ten.value[k] = orig + h;
      const double fp = prob.objective();
      ten.value[k] = orig - h;
      const double fm = prob.objective();
      ten.value[k] = orig;
      samples.push_back({t, k, ten.grad[k], (fp - fm) / (2 * h)});
    }
  }


  GradcheckReport r;
  r.op = op;
  r.module = gradcheck_module(op);
  r.tolerance = prob.tolerance;
  r.coordinates_checked = static_cast<Index>(samples.size());
  for (const auto& s : samples) {
    const double denom = std::max(std::abs(s.analytic), std::abs(s.numeric));
    const double err = denom == 0 ? 0.0 : std::abs(s.analytic - s.numeric) / denom;
    if (std::isnan(err) || r.worst_coordinate.empty() || err > r.max_rel_err) {
      r.max_rel_err = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
      r.worst_coordinate = prob.tensors[s.tensor].name + "[" + std::to_string(s.index) + "]";
      r.analytic_at_worst = s.analytic;
      r.numeric_at_worst = s.numeric;
    }
  }
  r.passed = r.max_rel_err < r.tolerance;
  return r;
}

std::vector<GradcheckReport> gradcheck_suite(const std::string& suite, const GradcheckOptions& options) {
  static const std::vector<std::string> modules = {"embedding", "attention", "network", "losses"};
  if (suite != "all" && std::find(modules.begin(), modules.end(), suite) == modules.end())
    throw ConfigError("unknown gradcheck suite '" + suite + "' (all, embedding, attention, network, losses)");
  std::vector<GradcheckReport> out;
  for (const auto& op : gradcheck_ops())
    if (suite == "all" || gradcheck_module(op) == suite) out.push_back(gradcheck(op, options));
  return out;
}

}  // namespace ms2tan
