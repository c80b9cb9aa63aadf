#include <cstdio>
#include <filesystem>
#include <optional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ms2tan/attention.hpp"
#include "ms2tan/bench.hpp"
#include "ms2tan/config_io.hpp"
#include "ms2tan/cube_io.hpp"
#include "ms2tan/dataset.hpp"
#include "ms2tan/gradcheck.hpp"
#include "ms2tan/metrics.hpp"
#include "ms2tan/network.hpp"
#include "ms2tan/training.hpp"

namespace fs = std::filesystem;
using namespace ms2tan;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

Dims parse_dims(const std::string& text) {
  const auto parts = split_list(text);
  if (parts.size() != 4) throw UsageError("--dims expects T,C,H,W, got '" + text + "'");
  Index v[4];
  for (int k = 0; k < 4; ++k) {
    try {
      std::size_t used = 0;
      v[k] = std::stoll(parts[static_cast<std::size_t>(k)], &used);
      if (used != parts[static_cast<std::size_t>(k)].size() || v[k] < 1) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw UsageError("--dims entries must be positive integers, got '" + text + "'");
    }
  }
  return {v[0], v[1], v[2], v[3]};
}

std::array<double, 3> parse_splits(const std::string& text) {
  const auto parts = split_list(text);
  if (parts.size() != 3) throw UsageError("--splits expects A,B,C, got '" + text + "'");
  std::array<double, 3> r{};
  for (int k = 0; k < 3; ++k) {
    try {
      std::size_t used = 0;
      r[static_cast<std::size_t>(k)] = std::stod(parts[static_cast<std::size_t>(k)], &used);
      if (used != parts[static_cast<std::size_t>(k)].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw UsageError("--splits entries must be numbers, got '" + text + "'");
    }
  }
  return r;
}

void print_config(const std::string& command, const ordered_json& config) {
  std::cerr << "[" << command << "] config " << config.dump() << '\n';
}

void warn_scale_order(const ModelConfig& model) {
  if (!scales_coarse_to_fine(model))
    std::cerr << "warning: scale patch sizes are not non-increasing from input to output\n";
}

// --- make-data ---

struct MakeDataArgs {
  std::string out;
  Index samples = 100;
  std::string dims = "4,2,24,24";
  std::string gap = "cloud";
  double coverage = 0.3;
  std::uint64_t seed = 0;
  std::string splits = "0.64,0.16,0.20";
};

int run_make_data(const MakeDataArgs& a) {
  DatasetSpec spec;
  spec.samples = a.samples;
  spec.dims = parse_dims(a.dims);
  spec.split_ratios = parse_splits(a.splits);
  spec.seed = a.seed;
  GapSpec gap;
  gap.kind = parse_gap_kind(a.gap);
  gap.target_coverage = a.coverage;
  spec.gaps = {gap};
  print_config("make-data", {{"out", a.out},
                             {"samples", spec.samples},
                             {"dims", spec.dims.as_array()},
                             {"gap", to_string(gap.kind)},
                             {"coverage", gap.target_coverage},
                             {"seed", spec.seed},
                             {"splits", spec.split_ratios}});
  const DatasetManifest m = make_dataset(a.out, spec);
  double cov = 0;
  for (const auto& s : m.samples) cov += s.coverage;
  std::printf("wrote %zu samples (train %lld, valid %lld, test %lld) to %s; mean coverage %.4f\n", m.samples.size(),
              static_cast<long long>(m.count(Split::Train)), static_cast<long long>(m.count(Split::Valid)),
              static_cast<long long>(m.count(Split::Test)), a.out.c_str(),
              cov / static_cast<double>(m.samples.size()));
  return kExitOk;
}

// --- train ---

struct TrainArgs {
  std::string data;
  std::string model_config = "ms2tan";
  std::string train_config;
  std::string out;
  std::string resample_gap;
  double resample_coverage = 0.3;
};

int run_train(const TrainArgs& a) {
  const DatasetManifest manifest = load_manifest(a.data);
  const ModelConfig model = load_model_config(a.model_config, manifest.dims.C);
  const TrainConfig tc = a.train_config.empty() ? TrainConfig{} : load_train_config(a.train_config);
  print_config("train", {{"data", a.data},
                         {"out", a.out},
                         {"model", ordered_json::parse(model_config_to_json(model, -1))},
                         {"train", ordered_json::parse(tc.to_json(-1))},
                         {"resample_gap", a.resample_gap},
                         {"resample_coverage", a.resample_coverage}});
  warn_scale_order(model);
  GapResampling resampling;
  if (!a.resample_gap.empty()) {
    GapSpec g;
    g.kind = parse_gap_kind(a.resample_gap);
    g.target_coverage = a.resample_coverage;
    g.validate();
    resampling.specs = {g};
  }
  const TrainResult r = train_from_directory(a.data, model, tc, a.out, &std::cout, resampling);
  std::printf("epochs %lld, best epoch %lld, val gap-MAE %.6g (initial %.6g)%s\n",
              static_cast<long long>(r.epochs_run), static_cast<long long>(r.best_epoch), r.best_val_mae,
              r.initial.mae, r.early_stopped ? ", early stopped" : "");
  std::printf("checkpoint %s, log %s\n", a.out.c_str(), training_log_path(a.out).string().c_str());
  return kExitOk;
}

// --- infer ---

struct InferArgs {
  std::string ckpt;
  std::string input;
  std::string mask;
  std::string out;
  std::string render;
};

int run_infer(const InferArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const SequenceCube x = read_cube(a.input);
  const MaskCube m = read_mask(a.mask);
  print_config("infer", {{"ckpt", a.ckpt},
                         {"input", a.input},
                         {"mask", a.mask},
                         {"out", a.out},
                         {"render", a.render},
                         {"model", ordered_json::parse(model_config_to_json(ck.config, -1))}});
  warn_scale_order(ck.config);
  const SequenceCube y = restore(x, m, ck.config, ck.params);
  write_cube(a.out, y);
  if (!a.render.empty()) {
    std::error_code ec;
    fs::create_directories(a.render, ec);
    if (ec) throw IoError("cannot create " + a.render + ": " + ec.message());
    const char* ext = y.dims().C >= 3 ? ".ppm" : ".pgm";
    for (Index t = 0; t < y.dims().T; ++t) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%03lld", static_cast<long long>(t));
      write_frame_render(fs::path(a.render) / (std::string(name) + ext), y, t);
    }
  }
  std::printf("wrote %s %s\n", a.out.c_str(), y.dims().str().c_str());
  return kExitOk;
}

// --- eval ---

struct EvalArgs {
  std::string pred;
  std::string truth;
  std::string mask;
  std::string region = "gap";
  std::string format = "json";
  bool with_baselines = false;
};

int run_eval(const EvalArgs& a) {
  const RegionKind region = parse_region(a.region);
  if (a.format != "json" && a.format != "csv") throw UsageError("--format must be json or csv");
  print_config("eval", {{"pred", a.pred},
                        {"truth", a.truth},
                        {"mask", a.mask},
                        {"region", to_string(region)},
                        {"format", a.format},
                        {"with_baselines", a.with_baselines}});
  const SequenceCube pred = read_cube(a.pred);
  const SequenceCube truth = read_cube(a.truth);
  const MaskCube m = read_mask(a.mask);
  std::vector<std::pair<std::string, EvalReport>> rows;
  rows.push_back({"model", evaluate(pred, truth, m, region)});
  if (a.with_baselines)
    for (auto method : {BaselineMethod::Last, BaselineMethod::Nearest, BaselineMethod::Linear})
      rows.push_back({to_string(method), evaluate(baseline_impute(truth, m, method), truth, m, region)});

  if (a.format == "csv") {
    std::cout << EvalReport::csv_header() << (a.with_baselines ? ",method" : "") << '\n';
    for (const auto& [method, r] : rows) std::cout << r.to_csv_row() << (a.with_baselines ? "," + method : "") << '\n';
  } else {
    for (const auto& [method, r] : rows) {
      if (!a.with_baselines) {
        std::cout << r.to_json() << '\n';
        continue;
      }
      ordered_json j = ordered_json::parse(r.to_json());
      j["method"] = method;
      std::cout << j.dump() << '\n';
    }
  }
  return kExitOk;
}

// --- gradcheck ---

struct GradcheckArgs {
  std::string suite = "all";
  std::string inject_fault;
  std::uint64_t seed = 0;
};

int run_gradcheck(const GradcheckArgs& a) {
  print_config("gradcheck", {{"suite", a.suite}, {"seed", a.seed}, {"epsilon", GradcheckOptions{}.epsilon}});
  if (!a.inject_fault.empty() && a.inject_fault != "ffn-sign") throw UsageError("--inject-fault accepts ffn-sign");
  std::optional<FfnSignFaultScope> fault;
  if (!a.inject_fault.empty()) fault.emplace();
  GradcheckOptions opt;
  opt.seed = a.seed;
  const auto reports = gradcheck_suite(a.suite, opt);
  const GradcheckReport* worst = nullptr;
  bool ok = true;
  std::printf("%-18s %-10s %-12s %-9s %-8s %s\n", "op", "module", "max_rel_err", "tol", "status", "worst coordinate");
  for (const auto& r : reports) {
    std::printf("%-18s %-10s %-12.3e %-9.0e %-8s %s (analytic %.9g, numeric %.9g)\n", r.op.c_str(), r.module.c_str(),
                r.max_rel_err, r.tolerance, r.passed ? "ok" : "FAIL", r.worst_coordinate.c_str(), r.analytic_at_worst,
                r.numeric_at_worst);
    ok = ok && r.passed;
    if (!worst || r.max_rel_err / r.tolerance > worst->max_rel_err / worst->tolerance) worst = &r;
  }
  if (worst)
    std::printf("worst: %s at %s, rel err %.3e (tol %.0e)\n", worst->op.c_str(), worst->worst_coordinate.c_str(),
                worst->max_rel_err, worst->tolerance);
  std::printf("%s\n", ok ? "gradcheck passed" : "gradcheck FAILED");
  return ok ? kExitOk : kExitNumeric;
}

// --- bench-attention ---

struct BenchArgs {
  Index T = 10;
  Index N = 225;
  Index d = 32;
  Index h = 8;
  Index repeat = 3;
};

int run_bench(const BenchArgs& a) {
  print_config("bench-attention", {{"T", a.T}, {"N", a.N}, {"d_qkv", a.d}, {"h", a.h}, {"repeat", a.repeat}});
  const AttentionBenchResult r = bench_attention(a.T, a.N, a.d, a.h, a.repeat);
  std::printf("joint      score MACs %llu (closed form %llu), %.6f s/run\n",
              static_cast<unsigned long long>(r.joint_counted), static_cast<unsigned long long>(r.joint_closed_form),
              r.joint_seconds);
  std::printf("separated  score MACs %llu (closed form %llu), %.6f s/run\n",
              static_cast<unsigned long long>(r.separated_counted),
              static_cast<unsigned long long>(r.separated_closed_form), r.separated_seconds);
  std::printf("ratio separated/joint %.9g, closed form 1/T + 1/N = %.9g, exact %s\n", r.ratio, r.closed_form_ratio,
              r.counts_exact && r.ratio_exact ? "yes" : "NO");
  if (r.repeat > 0 && r.separated_seconds > 0)
    std::printf("measured speedup %.3gx\n", r.joint_seconds / r.separated_seconds);
  return r.counts_exact && r.ratio_exact ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked multi-scale spatial-temporal attention imputation for image time series"};
  app.require_subcommand(1);
  app.allow_extras(false);

  MakeDataArgs md;
  auto* c_md = app.add_subcommand("make-data", "Generate a synthetic gapped dataset with manifest");
  c_md->add_option("--out", md.out, "Output directory")->required();
  c_md->add_option("--samples", md.samples, "Number of samples")->capture_default_str()->check(CLI::PositiveNumber);
  c_md->add_option("--dims", md.dims, "Cube dims T,C,H,W")->capture_default_str();
  c_md->add_option("--gap", md.gap, "Gap pattern: slc|cloud")->capture_default_str()->check(CLI::IsMember({"slc", "cloud"}));
  c_md->add_option("--coverage", md.coverage, "Target missing fraction per frame")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  c_md->add_option("--seed", md.seed, "Dataset seed")->capture_default_str();
  c_md->add_option("--splits", md.splits, "Train,valid,test ratios")->capture_default_str();

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train a model and write the best-validation checkpoint");
  c_tr->add_option("--data", tr.data, "Dataset directory (from make-data)")->required();
  c_tr->add_option("--model-config", tr.model_config, "Preset (ms2tan, ms2tan-l, ms2tan-s, toy) or JSON file")
      ->capture_default_str();
  c_tr->add_option("--train-config", tr.train_config, "Train config file (JSON or key = value lines)");
  c_tr->add_option("--out", tr.out, "Checkpoint path (writes <base>.json, <base>.bin, <base>.log.csv)")->required();
  c_tr->add_option("--resample-gap", tr.resample_gap, "Draw fresh slc|cloud gaps for every training sample each epoch")
      ->check(CLI::IsMember({"slc", "cloud"}));
  c_tr->add_option("--resample-coverage", tr.resample_coverage, "Target missing fraction of resampled gaps")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));

  InferArgs in;
  auto* c_in = app.add_subcommand("infer", "Restore a gapped cube with a trained checkpoint");
  c_in->add_option("--ckpt", in.ckpt, "Checkpoint path")->required();
  c_in->add_option("--input", in.input, "Input cube")->required();
  c_in->add_option("--mask", in.mask, "Mask cube (1 = observed)")->required();
  c_in->add_option("--out", in.out, "Output cube (clamped to [0,1])")->required();
  c_in->add_option("--render", in.render, "Directory for per-frame PGM/PPM renders");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Score a prediction against ground truth");
  c_ev->add_option("--pred", ev.pred, "Predicted cube")->required();
  c_ev->add_option("--truth", ev.truth, "Ground-truth cube")->required();
  c_ev->add_option("--mask", ev.mask, "Mask cube (1 = observed)")->required();
  c_ev->add_option("--region", ev.region, "gap|full")->capture_default_str()->check(CLI::IsMember({"gap", "full"}));
  c_ev->add_option("--format", ev.format, "json|csv")->capture_default_str()->check(CLI::IsMember({"json", "csv"}));
  c_ev->add_flag("--with-baselines", ev.with_baselines, "Also score Last/Nearest/Linear imputations");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Compare analytic gradients against central differences");
  c_gc->add_option("--suite", gc.suite, "all|embedding|attention|network|losses")
      ->capture_default_str()
      ->check(CLI::IsMember({"all", "embedding", "attention", "network", "losses"}));
  c_gc->add_option("--seed", gc.seed, "Seed for random inputs")->capture_default_str();
  c_gc->add_option("--inject-fault", gc.inject_fault)->group("");

  BenchArgs bn;
  auto* c_bn = app.add_subcommand("bench-attention", "Count and time joint vs separated attention");
  c_bn->set_help_flag("--help", "Print this help message and exit");
  c_bn->add_option("--T", bn.T, "Time steps")->capture_default_str()->check(CLI::PositiveNumber);
  c_bn->add_option("--N", bn.N, "Patches per frame")->capture_default_str()->check(CLI::PositiveNumber);
  c_bn->add_option("--d", bn.d, "Per-head width d_qkv (d_emb = h * d)")->capture_default_str()->check(CLI::PositiveNumber);
  c_bn->add_option("--h", bn.h, "Heads")->capture_default_str()->check(CLI::PositiveNumber);
  c_bn->add_option("--repeat", bn.repeat, "Timed repetitions (0 counts only)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*c_md) return run_make_data(md);
    if (*c_tr) return run_train(tr);
    if (*c_in) return run_infer(in);
    if (*c_ev) return run_eval(ev);
    if (*c_gc) return run_gradcheck(gc);
    if (*c_bn) return run_bench(bn);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const UnreachableCoverage& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const GraphError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
