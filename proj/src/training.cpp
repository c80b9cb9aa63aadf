#include "ms2tan/training.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "ms2tan/config_io.hpp"
#include "ms2tan/losses.hpp"
#include "ms2tan/metrics.hpp"
#include "ms2tan/network.hpp"
#include "ms2tan/random.hpp"

namespace ms2tan {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(lr0 > 0)) throw ConfigError("lr0 must be positive");
  if (decay_period_epochs < 1) throw ConfigError("decay_period_epochs must be positive");
  if (!(decay_factor > 0)) throw ConfigError("decay_factor must be positive");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be positive");
  if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
}

std::string TrainConfig::to_json(int indent) const {
  ordered_json j;
  j["batch_size"] = batch_size;
  j["lr0"] = lr0;
  j["decay_period_epochs"] = decay_period_epochs;
  j["decay_factor"] = decay_factor;
  j["early_stop_patience"] = early_stop_patience;
  j["max_epochs"] = max_epochs;
  j["seed"] = seed;
  return j.dump(indent);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return value;
}

void assign_key(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "batch_size") c.batch_size = parse_number<Index>(key, value);
  else if (key == "lr0") c.lr0 = parse_number<double>(key, value);
  else if (key == "decay_period_epochs") c.decay_period_epochs = parse_number<Index>(key, value);
  else if (key == "decay_factor") c.decay_factor = parse_number<double>(key, value);
  else if (key == "early_stop_patience") c.early_stop_patience = parse_number<Index>(key, value);
  else if (key == "max_epochs") c.max_epochs = parse_number<Index>(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else throw ConfigError("unknown train config key '" + key + "'");
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  const std::string body = trim(text);
  if (!body.empty() && body.front() == '{') {
    try {
      const auto j = ordered_json::parse(body);
      for (const auto& [key, v] : j.items()) {
        if (!v.is_number()) throw ConfigError("train config value for " + key + " must be a number");
        assign_key(c, key, v.dump());
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad train config: ") + e.what());
    }
  } else {
    std::istringstream in(body);
    std::string line;
    while (std::getline(in, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find_first_of("=:");
      if (eq == std::string::npos) throw ConfigError("train config line without '=': " + line);
      assign_key(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const fs::path& path) { return parse_train_config(read_text_file(path)); }

double lr_schedule(Index epoch, const TrainConfig& config) {
  const auto k = static_cast<double>(epoch / config.decay_period_epochs);
  return config.lr0 * std::pow(config.decay_factor, k);
}

// --- checkpoint ---

namespace {

fs::path with_ext(const fs::path& base, const char* ext) {
  fs::path p = base;
  p += ext;
  return p;
}

fs::path ckpt_base(const fs::path& path) {
  if (path.extension() == ".json" || path.extension() == ".bin") {
    fs::path p = path;
    return p.replace_extension();
  }
  return path;
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  return v;
}

}  // namespace

void save_checkpoint(const fs::path& path, const ModelConfig& config, const ParameterStore<float>& params) {
  const fs::path base = ckpt_base(path);
  if (base.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(base.parent_path(), ec);
  }
  ordered_json j;
  j["version"] = 1;
  j["dtype"] = "f32le";
  j["seed"] = params.seed();
  j["model"] = ordered_json::parse(model_config_to_json(config, -1));
  j["parameters"] = ordered_json::array();
  std::vector<unsigned char> blob;
  blob.reserve(static_cast<std::size_t>(params.value_count()) * 4);
  for (const auto& p : params) {
    j["parameters"].push_back({{"name", p.name}, {"shape", {p.rows(), p.cols()}}});
    for (Index r = 0; r < p.rows(); ++r)
      for (Index c = 0; c < p.cols(); ++c) {
        const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(p.value(r, c)));
        unsigned char b[4];
        std::memcpy(b, &bits, 4);
        blob.insert(blob.end(), b, b + 4);
      }
  }
  {
    std::ofstream out(with_ext(base, ".json"), std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + with_ext(base, ".json").string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + with_ext(base, ".json").string());
  }
  std::ofstream out(with_ext(base, ".bin"), std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + with_ext(base, ".bin").string());
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("failed writing " + with_ext(base, ".bin").string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  const fs::path base = ckpt_base(path);
  const std::string text = read_text_file(with_ext(base, ".json"));
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(base.string() + ": bad checkpoint manifest: " + e.what());
  }
  Checkpoint ck;
  std::vector<std::pair<std::string, std::array<Index, 2>>> entries;
  try {
    if (j.at("version").get<int>() != 1) throw FormatError(base.string() + ": unsupported checkpoint version");
    if (j.at("dtype").get<std::string>() != "f32le") throw FormatError(base.string() + ": unsupported dtype");
    ck.config = model_config_from_json(j.at("model").dump());
    for (const auto& e : j.at("parameters")) {
      const auto& s = e.at("shape");
      entries.push_back({e.at("name").get<std::string>(), {s.at(0).get<Index>(), s.at(1).get<Index>()}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(base.string() + ": bad checkpoint manifest: " + e.what());
  }
  // Register in the canonical order, then check the manifest agrees with the config.
  ck.params = init_parameters<float>(ck.config, j.value("seed", std::uint64_t{0}));
  if (entries.size() != ck.params.size())
    throw FormatError(base.string() + ": checkpoint lists " + std::to_string(entries.size()) +
                      " parameters, model config implies " + std::to_string(ck.params.size()));
  Index total = 0;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& p = ck.params.entries()[k];
    if (entries[k].first != p.name || entries[k].second[0] != p.rows() || entries[k].second[1] != p.cols())
      throw FormatError(base.string() + ": parameter " + entries[k].first + " does not match model config");
    total += p.value.size();
  }
  std::ifstream in(with_ext(base, ".bin"), std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + with_ext(base, ".bin").string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != static_cast<std::size_t>(total) * 4)
    throw FormatError(base.string() + ": blob holds " + std::to_string(size) + " bytes, expected " +
                      std::to_string(total * 4));
  in.seekg(0);
  std::vector<unsigned char> blob(size);
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("failed reading " + with_ext(base, ".bin").string());
  std::size_t off = 0;
  for (auto& p : ck.params)
    for (Index r = 0; r < p.rows(); ++r)
      for (Index c = 0; c < p.cols(); ++c) {
        std::uint32_t bits;
        std::memcpy(&bits, blob.data() + off, 4);
        off += 4;
        p.value(r, c) = std::bit_cast<float>(to_little(bits));
      }
  return ck;
}

// --- evaluation ---

SequenceCube restore(const SequenceCube& x, const MaskCube& m, const ModelConfig& config,
                     const ParameterStore<float>& params) {
  SequenceCube out = ms2tan_forward(x, m, config, params).final;
  out.data() = out.data().cwiseMax(0.0f).cwiseMin(1.0f);
  return out;
}

ValidationStats evaluate_model(const std::vector<Sample>& samples, const ModelConfig& config,
                               const ParameterStore<float>& params) {
  ValidationStats s;
  double abs_sum = 0;
  Index count = 0;
  double psnr_sum = 0;
  Index psnr_count = 0;
  for (const auto& smp : samples) {
    const SequenceCube pred = restore(smp.gapped, smp.mask, config, params);
    const MaskCube region = make_region(smp.mask, RegionKind::GapOnly);
    Index n = 0;
    for (Index k = 0; k < pred.size(); ++k) {
      if (!region[k]) continue;
      abs_sum += std::abs(static_cast<double>(pred.data()[k]) - static_cast<double>(smp.clean.data()[k]));
      ++n;
    }
    if (n == 0) continue;
    count += n;
    psnr_sum += psnr(pred, smp.clean, region);
    ++psnr_count;
  }
  s.mae = count ? abs_sum / static_cast<double>(count) : 0.0;
  s.psnr = psnr_count ? psnr_sum / static_cast<double>(psnr_count) : std::numeric_limits<double>::infinity();
  return s;
}

std::string training_log_header() { return "epoch,train_loss,val_mae,val_psnr,lr"; }

std::string training_log_row(const EpochLog& row) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(row.epoch), row.train_loss,
                row.val_mae, row.val_psnr, row.lr);
  return buf;
}

// --- training loop ---

TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& valid_set,
                  const ModelConfig& model, const TrainConfig& config, std::ostream* progress,
                  const GapResampling& resampling) {
  model.validate();
  config.validate();
  if (train_set.empty()) throw ConfigError("training split is empty");
  if (valid_set.empty()) throw ConfigError("validation split is empty");

  ParameterStore<float> params = init_parameters<float>(model, model.seed);
  OptimState<float> opt(params, config.lr0);
  const FeatureNetwork<float> feat(model.bands, model.feature_seed);
  Rng rng(derive_seed(config.seed, "train.shuffle"));

  TrainResult result;
  result.initial = evaluate_model(valid_set, model, params);
  result.best_val_mae = result.initial.mae;
  result.best_params = params;
  if (progress)
    *progress << "epoch 0 (init): val_mae " << result.initial.mae << " val_psnr " << result.initial.psnr << '\n';

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Index since_best = 0;
  for (Index epoch = 0; epoch < config.max_epochs; ++epoch) {
    opt.lr = lr_schedule(epoch, config);
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::vector<Sample> fresh;
    if (!resampling.specs.empty()) {
      fresh.reserve(train_set.size());
      for (std::size_t i = 0; i < train_set.size(); ++i) {
        GapSpec g = resampling.specs[i % resampling.specs.size()];
        g.seed = derive_seed(config.seed, "train.gaps", static_cast<std::uint64_t>(epoch) * train_set.size() + i);
        Sample s{train_set[i].clean, {}, synth_mask(train_set[i].clean.dims(), g)};
        s.gapped = apply_gaps(s.clean, s.mask);
        fresh.push_back(std::move(s));
      }
    }
    const std::vector<Sample>& epoch_set = fresh.empty() ? train_set : fresh;
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const float inv_b = 1.0f / static_cast<float>(stop - start);
      params.zero_grad();
      for (std::size_t b = start; b < stop; ++b) {
        const Sample& s = epoch_set[order[b]];
        ForwardTape<float> tape;
        const auto trace = ms2tan_forward(s.gapped, s.mask, model, params, &tape);
        std::vector<SequenceCube> grads;
        const LossBreakdown loss = joint_loss(trace, s.clean, model.loss_weights, feat, &grads);
        if (!std::isfinite(loss.total)) {
          std::ostringstream msg;
          msg << "non-finite loss at epoch " << epoch << ", sample " << order[b] << ": pixel " << loss.pixel
              << " structural " << loss.structural << " perceptual " << loss.perceptual;
          throw NonFiniteLoss(msg.str());
        }
        loss_sum += loss.total;
        for (auto& g : grads) g.data() *= inv_b;
        network_backward(tape, grads, model, params);
      }
      adam_step(params, opt);
    }

    EpochLog row;
    row.epoch = epoch + 1;
    row.train_loss = loss_sum / static_cast<double>(train_set.size());
    const ValidationStats v = evaluate_model(valid_set, model, params);
    row.val_mae = v.mae;
    row.val_psnr = v.psnr;
    row.lr = opt.lr;
    result.log.push_back(row);
    result.epochs_run = epoch + 1;
    if (progress) *progress << training_log_row(row) << '\n';

    if (v.mae < result.best_val_mae) {
      result.best_val_mae = v.mae;
      result.best_epoch = epoch + 1;
      result.best_params = params;
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

fs::path training_log_path(const fs::path& ckpt) {
  fs::path p = ckpt_base(ckpt);
  p += ".log.csv";
  return p;
}

TrainResult train_from_directory(const fs::path& data_dir, const ModelConfig& model, const TrainConfig& config,
                                 const fs::path& ckpt, std::ostream* progress, const GapResampling& resampling) {
  const DatasetManifest manifest = load_manifest(data_dir);
  if (manifest.dims.C != model.bands)
    throw ConfigError("model expects " + std::to_string(model.bands) + " bands, dataset has " +
                      std::to_string(manifest.dims.C));
  const auto train_set = load_split(data_dir, manifest, Split::Train);
  const auto valid_set = load_split(data_dir, manifest, Split::Valid);
  TrainResult result = train(train_set, valid_set, model, config, progress, resampling);
  save_checkpoint(ckpt, model, result.best_params);
  const fs::path log_path = training_log_path(ckpt);
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());
  log << training_log_header() << '\n';
  for (const auto& row : result.log) log << training_log_row(row) << '\n';
  if (!log) throw IoError("failed writing " + log_path.string());
  return result;
}

}  // namespace ms2tan
