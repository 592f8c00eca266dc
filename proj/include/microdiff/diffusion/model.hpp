#pragma once

// Conditional denoiser: time embedding + optional curve/topology encoders
// feeding the U-Net, plus the checkpoint container that carries it.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include <torch/torch.h>

#include "microdiff/diffusion/schedule.hpp"
#include "microdiff/errors.hpp"
#include "microdiff/io/key_value.hpp"
#include "microdiff/nn/context.hpp"
#include "microdiff/nn/denoiser.hpp"

namespace microdiff::diffusion {

struct ModelConfig {
  int steps = 1000;
  double beta_start = kBetaStart;
  double beta_end = kBetaEnd;
  nn::DenoiserConfig unet;
  bool curve_context = true;
  bool topology_context = false;

  [[nodiscard]] NoiseSchedule schedule() const { return linear_beta_schedule(steps, beta_start, beta_end); }

  void write(io::KeyValue& kv) const {
    kv.set("T", steps);
    kv.set("beta_start", beta_start);
    kv.set("beta_end", beta_end);
    kv.set("curve_context", curve_context);
    kv.set("topology_context", topology_context);
    unet.write(kv);
  }

  static ModelConfig read(const io::KeyValue& kv) {
    ModelConfig c;
    c.steps = static_cast<int>(kv.get_int("T", c.steps));
    c.beta_start = kv.get_double("beta_start", c.beta_start);
    c.beta_end = kv.get_double("beta_end", c.beta_end);
    c.curve_context = kv.get_bool("curve_context", c.curve_context);
    c.topology_context = kv.get_bool("topology_context", c.topology_context);
    c.unet = nn::DenoiserConfig::read(kv);
    return c;
  }
};

// Per-row conditioning inputs. Undefined tensors mean "context absent".
struct Contexts {
  torch::Tensor curves;    // [B, 13] normalized energies
  torch::Tensor topology;  // [B, 1, 28, 28] in [0, 1]
  torch::Tensor keep;      // [B] float mask applied to both contexts (1 = keep)
  torch::Tensor keep_topology;  // optional separate mask for the topology context

  [[nodiscard]] bool empty() const { return !curves.defined() && !topology.defined(); }

  [[nodiscard]] Contexts rows(const torch::Tensor& idx) const {
    Contexts out;
    if (curves.defined()) out.curves = curves.index_select(0, idx);
    if (topology.defined()) out.topology = topology.index_select(0, idx);
    if (keep.defined()) out.keep = keep.index_select(0, idx);
    if (keep_topology.defined()) out.keep_topology = keep_topology.index_select(0, idx);
    return out;
  }
};

struct DiffusionModelImpl : torch::nn::Module {
  explicit DiffusionModelImpl(ModelConfig config = {}) : config_(std::move(config)) {
    time = register_module("time", nn::TimeEmbedding(config_.unet.embedding_width));
    unet = register_module("unet", nn::UNet(config_.unet));
    if (config_.curve_context) curve = register_module("curve", nn::CurveEncoder());
    if (config_.topology_context) topology = register_module("topology", nn::TopologyEncoder());
    nn::glorot_init(*time);
  }

  // zeta_emb = zeta_t + (kept) context embeddings
  torch::Tensor embedding(const torch::Tensor& t, const Contexts& ctx) {
    std::optional<torch::Tensor> zc, zg, kc, kg;
    if (ctx.curves.defined()) {
      if (!curve) throw ContractError("model was built without a curve context");
      zc = curve->forward(ctx.curves);
    }
    if (ctx.topology.defined()) {
      if (!topology) throw ContractError("model was built without a topology context");
      zg = topology->forward(ctx.topology);
    }
    if (ctx.keep.defined()) kc = kg = ctx.keep;
    if (ctx.keep_topology.defined()) kg = ctx.keep_topology;
    return nn::combine(time->forward(t), zc, zg, kc, kg);
  }

  nn::DenoiserOutput forward(const torch::Tensor& x_t, const torch::Tensor& t, const Contexts& ctx = {}) {
    return unet->forward(x_t, embedding(t, ctx));
  }

  [[nodiscard]] const ModelConfig& config() const { return config_; }

  ModelConfig config_;
  nn::TimeEmbedding time{nullptr};
  nn::UNet unet{nullptr};
  nn::CurveEncoder curve{nullptr};
  nn::TopologyEncoder topology{nullptr};
};
TORCH_MODULE(DiffusionModel);

// ---------------------------------------------------------------------------
// Checkpoint container: config text, beta table, step counter, model weights
// and (optionally) optimizer state.

inline constexpr int64_t kCheckpointMagic = 0x4D444946;

struct CheckpointInfo {
  ModelConfig config;
  io::KeyValue settings;  // everything echoed at save time
  int64_t step = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, DiffusionModel& model, const io::KeyValue& settings,
                            int64_t step, torch::optim::Optimizer* opt = nullptr) {
  torch::serialize::OutputArchive ar;
  io::KeyValue kv = settings;
  model->config().write(kv);
  ar.write("magic", torch::tensor(kCheckpointMagic));
  ar.write("config", c10::IValue(kv.str()));
  ar.write("betas", torch::tensor(model->config().schedule().beta, torch::kFloat64));
  ar.write("step", torch::tensor(step));
  torch::serialize::OutputArchive weights;
  model->save(weights);
  ar.write("model", weights);
  if (opt) {
    torch::serialize::OutputArchive o;
    opt->save(o);
    ar.write("optimizer", o);
  }
  const auto tmp = path.string() + ".tmp";
  ar.save_to(tmp);
  std::filesystem::rename(tmp, path);
}

inline CheckpointInfo read_checkpoint_info(torch::serialize::InputArchive& ar, const std::string& path) {
  torch::Tensor magic;
  if (!ar.try_read("magic", magic) || magic.item<int64_t>() != kCheckpointMagic)
    throw DataError("not a diffusion checkpoint: " + path);
  c10::IValue text;
  if (!ar.try_read("config", text) || !text.isString()) throw DataError(path + ": checkpoint has no config");
  CheckpointInfo info;
  info.settings = io::KeyValue::parse(text.toStringRef());
  info.config = ModelConfig::read(info.settings);
  torch::Tensor betas, step;
  ar.read("betas", betas);
  ar.read("step", step);
  info.step = step.item<int64_t>();
  const auto expected = info.config.schedule().beta;
  if (betas.numel() != static_cast<int64_t>(expected.size()))
    throw DataError(path + ": schedule length " + std::to_string(betas.numel()) + " does not match T = " +
                    std::to_string(info.config.steps));
  auto b = betas.contiguous();
  for (int64_t i = 0; i < b.numel(); ++i)
    if (b.data_ptr<double>()[i] != expected[static_cast<std::size_t>(i)])
      throw DataError(path + ": stored beta table differs from the configured schedule at index " +
                      std::to_string(i));
  return info;
}

struct LoadedModel {
  DiffusionModel model{nullptr};
  CheckpointInfo info;
};

// Rebuilds the model from the stored config and loads its weights. When
// `opt` is given the optimizer state is restored as well.
inline LoadedModel load_checkpoint(const std::filesystem::path& path,
                                   const std::function<torch::optim::Optimizer*(DiffusionModel&)>& make_opt = {}) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive ar;
  LoadedModel out;
  try {
    ar.load_from(path.string());
    out.info = read_checkpoint_info(ar, path.string());
    out.model = DiffusionModel(out.info.config);
    torch::serialize::InputArchive weights;
    ar.read("model", weights);
    out.model->load(weights);
    if (make_opt) {
      if (auto* opt = make_opt(out.model)) {
        torch::serialize::InputArchive o;
        if (ar.try_read("optimizer", o)) opt->load(o);
      }
    }
  } catch (const c10::Error& e) {
    throw DataError("cannot load checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return out;
}

// Restores optimizer state saved alongside the weights. Returns false when
// the checkpoint carries none.
inline bool load_optimizer_state(const std::filesystem::path& path, torch::optim::Optimizer& opt) {
  try {
    torch::serialize::InputArchive ar;
    ar.load_from(path.string());
    torch::serialize::InputArchive o;
    if (!ar.try_read("optimizer", o)) return false;
    opt.load(o);
    return true;
  } catch (const c10::Error& e) {
    throw DataError("cannot restore optimizer state from " + path.string() + ": " + e.what_without_backtrace());
  }
}

}  // namespace microdiff::diffusion
