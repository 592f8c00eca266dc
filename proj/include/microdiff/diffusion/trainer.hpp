#pragma once

// Hybrid-loss training loop with context dropping.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "microdiff/diffusion/losses.hpp"
#include "microdiff/diffusion/model.hpp"
#include "microdiff/errors.hpp"
#include "microdiff/io/key_value.hpp"
#include "microdiff/nn/context.hpp"

namespace microdiff::diffusion {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 128;
  int64_t steps = 50000;
  double drop_prob = 0.1;
  bool independent_drop = false;
  uint64_t seed = 0;

  void write(io::KeyValue& kv) const {
    kv.set("lr", lr);
    kv.set("batch", batch_size);
    kv.set("steps", steps);
    kv.set("drop_prob", drop_prob);
    kv.set("independent_drop", independent_drop);
    kv.set("seed", static_cast<int64_t>(seed));
  }

  static TrainConfig read(const io::KeyValue& kv) {
    TrainConfig c;
    c.lr = kv.get_double("lr", c.lr);
    c.batch_size = static_cast<int>(kv.get_int("batch", c.batch_size));
    c.steps = kv.get_int("steps", c.steps);
    c.drop_prob = kv.get_double("drop_prob", c.drop_prob);
    c.independent_drop = kv.get_bool("independent_drop", c.independent_drop);
    c.seed = static_cast<uint64_t>(kv.get_int("seed", 0));
    return c;
  }
};

// x0: [N, 1, 32, 32] in [-1, 1]; contexts aligned row by row with x0.
struct TrainingSet {
  torch::Tensor x0;
  Contexts contexts;

  [[nodiscard]] int64_t size() const { return x0.defined() ? x0.size(0) : 0; }
};

struct LossRecord {
  int64_t step = 0;
  double l_mu = 0.0;
  double l_vlb = 0.0;
  double l_hybrid = 0.0;
};

// What the last optimizer step saw; kept for inspection.
struct BatchTrace {
  torch::Tensor t;
  torch::Tensor keep;
  torch::Tensor keep_topology;
  torch::Tensor embedding;
};

class Trainer {
 public:
  Trainer(DiffusionModel model, TrainingSet data, TrainConfig cfg)
      : model_(std::move(model)),
        data_(std::move(data)),
        cfg_(cfg),
        sched_(model_->config().schedule()),
        dropper_(cfg.drop_prob, cfg.independent_drop),
        opt_(model_->parameters(), torch::optim::AdamOptions(cfg.lr)),
        gen_(torch::make_generator<torch::CPUGeneratorImpl>(cfg.seed)) {
    if (data_.size() == 0) throw DataError("diffusion training set is empty");
    if (cfg_.batch_size < 1) throw ConfigError("batch size must be positive");
    if (data_.x0.dim() != 4 || data_.x0.size(2) != nn::kCanvas || data_.x0.size(3) != nn::kCanvas)
      throw ContractError("training images must be [N, 1, 32, 32]");
    auto check = [&](const torch::Tensor& c, const char* what) {
      if (c.defined() && c.size(0) != data_.size())
        throw ContractError(std::string(what) + " context is not aligned with the images");
    };
    check(data_.contexts.curves, "curve");
    check(data_.contexts.topology, "topology");
  }

  LossRecord train_step() {
    model_->train();
    const auto idx = next_indices();
    const auto x0 = data_.x0.index_select(0, idx);
    const int64_t B = x0.size(0);
    const auto t = torch::randint(1, sched_.steps + 1, {B}, gen_, torch::kLong);
    const auto eps = torch::randn(x0.sizes(), gen_);
    const auto x_t = q_sample(x0, t, eps, sched_);

    auto ctx = data_.contexts.rows(idx);
    if (!ctx.empty()) {
      auto masks = dropper_.draw(B, gen_);
      ctx.keep = masks.behavior;
      if (cfg_.independent_drop) ctx.keep_topology = masks.topology;
    }
    const auto emb = model_->embedding(t, ctx);
    const auto out = model_->unet->forward(x_t, emb);
    const auto loss = hybrid_loss(out.eps, out.v_raw, x0, x_t, t, eps, sched_);

    LossRecord rec;
    rec.step = step_ + 1;
    rec.l_mu = loss.l_mu.item<double>();
    rec.l_vlb = loss.l_vlb.item<double>();
    rec.l_hybrid = loss.l_hybrid.item<double>();
    if (!std::isfinite(rec.l_hybrid))
      throw NumericalError("non-finite training loss at step " + std::to_string(rec.step));
    opt_.zero_grad();
    loss.l_hybrid.backward();
    opt_.step();
    ++step_;
    trace_ = {t, ctx.keep, ctx.keep_topology, emb.detach()};
    return rec;
  }

  [[nodiscard]] int64_t step() const { return step_; }
  // Resuming reseeds the stream from (seed, step) so a restarted run is
  // itself reproducible.
  void set_step(int64_t s) {
    step_ = s;
    gen_ = torch::make_generator<torch::CPUGeneratorImpl>(cfg_.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(s)));
    perm_ = torch::Tensor();
    cursor_ = 0;
  }
  [[nodiscard]] const BatchTrace& last_batch() const { return trace_; }
  [[nodiscard]] DiffusionModel& model() { return model_; }
  [[nodiscard]] torch::optim::Adam& optimizer() { return opt_; }
  [[nodiscard]] const NoiseSchedule& schedule() const { return sched_; }
  [[nodiscard]] const TrainConfig& config() const { return cfg_; }

 private:
  // Epoch-wise shuffled minibatches; the final partial batch of an epoch is
  // topped up from the next permutation so every batch has the full size.
  torch::Tensor next_indices() {
    const int64_t n = data_.size();
    std::vector<torch::Tensor> parts;
    int64_t need = cfg_.batch_size;
    while (need > 0) {
      if (cursor_ >= n || !perm_.defined()) {
        perm_ = torch::randperm(n, gen_);
        cursor_ = 0;
      }
      const int64_t take = std::min(need, n - cursor_);
      parts.push_back(perm_.slice(0, cursor_, cursor_ + take));
      cursor_ += take;
      need -= take;
    }
    return parts.size() == 1 ? parts.front() : torch::cat(parts);
  }

  DiffusionModel model_;
  TrainingSet data_;
  TrainConfig cfg_;
  NoiseSchedule sched_;
  nn::ContextDropper dropper_;
  torch::optim::Adam opt_;
  torch::Generator gen_;
  torch::Tensor perm_;
  int64_t cursor_ = 0;
  int64_t step_ = 0;
  BatchTrace trace_;
};

class LossLog {
 public:
  // Appends when resuming so the log stays continuous across restarts.
  LossLog(const std::filesystem::path& path, bool append) {
    const bool fresh = !append || !std::filesystem::exists(path);
    out_.open(path, fresh ? std::ios::out | std::ios::trunc : std::ios::out | std::ios::app);
    if (!out_) throw DataError("cannot write " + path.string());
    if (fresh) out_ << "step,l_mu,l_vlb,l_hybrid\n";
  }

  void write(const LossRecord& r) {
    out_ << r.step << ',' << io::format_double(r.l_mu) << ',' << io::format_double(r.l_vlb) << ','
         << io::format_double(r.l_hybrid) << '\n';
  }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

inline std::vector<LossRecord> read_loss_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (io::trim(line) != "step,l_mu,l_vlb,l_hybrid") throw DataError(path.string() + ": unexpected header");
  std::vector<LossRecord> out;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    LossRecord r;
    char c1 = 0, c2 = 0, c3 = 0;
    std::istringstream ss(line);
    if (!(ss >> r.step >> c1 >> r.l_mu >> c2 >> r.l_vlb >> c3 >> r.l_hybrid))
      throw DataError(path.string() + ": malformed row '" + line + "'");
    out.push_back(r);
  }
  return out;
}

}  // namespace microdiff::diffusion
