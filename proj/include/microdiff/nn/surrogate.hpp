#pragma once

// CNN that predicts the normalized 13-point energy curve from a bitmap.

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "microdiff/errors.hpp"
#include "microdiff/io/key_value.hpp"
#include "microdiff/mnist_data.hpp"
#include "microdiff/nn/tensors.hpp"

namespace microdiff::nn {

// conv(16) -> pool -> conv(16) -> pool -> 784 -> 120 -> 84 -> 13
struct SurrogateNetImpl : torch::nn::Module {
  static constexpr int kFlatten = 16 * 7 * 7;

  SurrogateNetImpl()
      : conv1(register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 16, 3).padding(1)))),
        conv2(register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(16, 16, 3).padding(1)))),
        dense1(register_module("dense1", torch::nn::Linear(kFlatten, 120))),
        dense2(register_module("dense2", torch::nn::Linear(120, 84))),
        dense3(register_module("dense3", torch::nn::Linear(84, kCurvePoints))) {
    glorot_init(*this);
  }

  // image: [B, 1, 28, 28] in [0, 1] -> [B, 13]
  torch::Tensor forward(const torch::Tensor& image) {
    if (image.dim() != 4 || image.size(1) != 1 || image.size(2) != kImageSize || image.size(3) != kImageSize)
      throw ContractError("surrogate input must be [B, 1, 28, 28]");
    auto h = torch::max_pool2d(torch::relu(conv1(image)), 2);
    h = torch::max_pool2d(torch::relu(conv2(h)), 2);
    h = torch::relu(dense1(h.flatten(1)));
    h = torch::relu(dense2(h));
    return dense3(h);
  }

  torch::nn::Conv2d conv1, conv2;
  torch::nn::Linear dense1, dense2, dense3;
};
TORCH_MODULE(SurrogateNet);

// Mean squared difference over the 13 curve points, accumulated in long double.
inline double mse(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.size() != static_cast<std::size_t>(kCurvePoints))
    throw ContractError("mse needs two curves of length 13");
  long double acc = 0.0L;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const long double d = static_cast<long double>(pred[i]) - static_cast<long double>(target[i]);
    acc += d * d;
  }
  return static_cast<double>(acc / static_cast<long double>(pred.size()));
}

inline double mse(const CurveValues& pred, const CurveValues& target) {
  return mse(std::span<const double>(pred), std::span<const double>(target));
}

// Row-wise predictions for a batch of bitmaps.
inline std::vector<CurveValues> predict(SurrogateNet& net, std::span<const Bitmap> images,
                                        int batch_size = 256) {
  torch::NoGradGuard guard;
  std::vector<CurveValues> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto n = std::min(images.size() - start, static_cast<std::size_t>(batch_size));
    auto y = net->forward(to_unit_tensor(images.subspan(start, n))).to(torch::kFloat64).contiguous();
    auto acc = y.accessor<double, 2>();
    for (int64_t r = 0; r < y.size(0); ++r) {
      CurveValues c{};
      for (int i = 0; i < kCurvePoints; ++i) c[static_cast<std::size_t>(i)] = acc[r][i];
      out.push_back(c);
    }
  }
  return out;
}

inline EnergyCurve predict(SurrogateNet& net, const Bitmap& image) {
  EnergyCurve c;
  c.displacements = canonical_displacements();
  c.energies = predict(net, std::span<const Bitmap>(&image, 1)).front();
  c.normalized = true;
  return c;
}

// Multiplies the learning rate by `factor` once the monitored loss has gone
// `patience` epochs without improving on its best value; the count restarts
// after every reduction.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(double factor = 0.9, int patience = 5) : factor_(factor), patience_(patience) {
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau factor must lie in (0, 1)");
    if (patience < 1) throw ConfigError("plateau patience must be at least 1");
  }

  // Returns true when this epoch triggered a reduction.
  bool step(double loss, torch::optim::Optimizer& opt) {
    if (loss < best_) {
      best_ = loss;
      bad_epochs_ = 0;
      return false;
    }
    if (++bad_epochs_ < patience_) return false;
    for (auto& group : opt.param_groups()) group.options().set_lr(group.options().get_lr() * factor_);
    bad_epochs_ = 0;
    ++reductions_;
    return true;
  }

  [[nodiscard]] int reductions() const { return reductions_; }
  [[nodiscard]] double best() const { return best_; }

 private:
  double factor_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
  int reductions_ = 0;
};

struct SurrogateTrainConfig {
  int epochs = 200;
  int batch_size = 256;
  double lr = 1e-3;
  double plateau_factor = 0.9;
  int plateau_patience = 5;
  int early_stop_patience = 0;  // 0 disables early stopping
  uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;  // NaN without a validation split
  double lr = 0.0;
};

// Mean of the per-element squared error over a whole set, evaluated in
// batches without gradients.
inline double dataset_mse(SurrogateNet& net, const torch::Tensor& x, const torch::Tensor& y,
                          int batch_size = 1024) {
  torch::NoGradGuard guard;
  double total = 0.0;
  for (int64_t s = 0; s < x.size(0); s += batch_size) {
    const auto e = std::min<int64_t>(s + batch_size, x.size(0));
    total += (net->forward(x.slice(0, s, e)) - y.slice(0, s, e)).pow(2).sum().item<double>();
  }
  return total / static_cast<double>(y.numel());
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// Adam + MSE with plateau decay on the validation loss (training loss when
// no validation set is given). Every epoch reshuffles with a seeded generator.
inline std::vector<EpochRecord> train_surrogate(SurrogateNet& net, const torch::Tensor& train_x,
                                                const torch::Tensor& train_y, const torch::Tensor& val_x,
                                                const torch::Tensor& val_y,
                                                const SurrogateTrainConfig& cfg,
                                                const EpochCallback& on_epoch = {}) {
  if (train_x.size(0) == 0 || train_x.size(0) != train_y.size(0))
    throw ContractError("surrogate training needs aligned, non-empty image/curve tensors");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("epochs and batch size must be positive");
  const bool has_val = val_x.defined() && val_x.size(0) > 0;
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.lr));
  PlateauScheduler plateau(cfg.plateau_factor, cfg.plateau_patience);
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(cfg.seed);
  std::vector<EpochRecord> log;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  const int64_t n = train_x.size(0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    net->train();
    auto perm = torch::randperm(n, gen);
    for (int64_t s = 0; s < n; s += cfg.batch_size) {
      auto idx = perm.slice(0, s, std::min<int64_t>(s + cfg.batch_size, n));
      auto loss = torch::mse_loss(net->forward(train_x.index_select(0, idx)), train_y.index_select(0, idx));
      if (!std::isfinite(loss.item<double>()))
        throw NumericalError("surrogate loss became non-finite at epoch " + std::to_string(epoch));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
    net->eval();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = dataset_mse(net, train_x, train_y);
    rec.val_mse = has_val ? dataset_mse(net, val_x, val_y) : std::numeric_limits<double>::quiet_NaN();
    rec.lr = opt.param_groups().front().options().get_lr();
    log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    const double monitored = has_val ? rec.val_mse : rec.train_mse;
    plateau.step(monitored, opt);
    if (cfg.early_stop_patience > 0) {
      if (monitored < best) {
        best = monitored;
        stale = 0;
      } else if (++stale >= cfg.early_stop_patience) {
        break;
      }
    }
  }
  return log;
}

inline void write_epoch_log(const std::string& path, const std::vector<EpochRecord>& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "epoch,train_mse,val_mse,lr\n";
  for (const auto& r : log)
    out << r.epoch << ',' << io::format_double(r.train_mse) << ',' << io::format_double(r.val_mse) << ','
        << io::format_double(r.lr) << '\n';
}

inline void save_surrogate(const std::string& path, SurrogateNet& net, double normalization) {
  torch::serialize::OutputArchive ar;
  net->save(ar);
  ar.write("normalization", torch::tensor(normalization, torch::kFloat64));
  ar.write("kind", torch::tensor(static_cast<int64_t>(0x5355)));
  ar.save_to(path);
}

// Returns the normalization constant stored with the weights.
inline double load_surrogate(const std::string& path, SurrogateNet& net) {
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(path);
    torch::Tensor kind;
    if (!ar.try_read("kind", kind) || kind.item<int64_t>() != 0x5355)
      throw DataError("not a surrogate checkpoint: " + path);
    net->load(ar);
    torch::Tensor s;
    ar.read("normalization", s);
    return s.item<double>();
  } catch (const c10::Error& e) {
    throw DataError("cannot load surrogate checkpoint " + path + ": " + e.what_without_backtrace());
  }
}

}  // namespace microdiff::nn
