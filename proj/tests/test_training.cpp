#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "microdiff/diffusion/model.hpp"
#include "microdiff/diffusion/sampler.hpp"
#include "microdiff/diffusion/trainer.hpp"
#include "test_util.hpp"
#include "torch_util.hpp"

using namespace microdiff;
using namespace microdiff::diffusion;

namespace {

TrainingSet block_set(std::size_t n, uint64_t seed, bool with_curves) {
  const auto imgs = test::blocks(n, seed);
  TrainingSet set;
  set.x0 = nn::to_diffusion_tensor(imgs);
  if (with_curves) {
    auto m = nn::to_unit_tensor(imgs).mean({1, 2, 3}).unsqueeze(1);
    set.contexts.curves = m * torch::linspace(0.0, 1.0, 13).pow(2).unsqueeze(0);
  }
  return set;
}

double mean_mu(const std::vector<LossRecord>& r, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += r[i].l_mu;
  return s / static_cast<double>(end - begin);
}

}  // namespace

TEST(Trainer, SmokeRunReducesNoiseLoss) {
  torch::manual_seed(1);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.lr = 1e-3;
  cfg.seed = 1;
  Trainer tr(DiffusionModel(test::tiny_model(1000, 8)), block_set(1000, 1, true), cfg);
  std::vector<LossRecord> log;
  for (int i = 0; i < 200; ++i) log.push_back(tr.train_step());
  EXPECT_EQ(tr.step(), 200);
  EXPECT_EQ(log.back().step, 200);
  EXPECT_LT(mean_mu(log, 150, 200), mean_mu(log, 0, 50));
  for (const auto& r : log) EXPECT_NEAR(r.l_hybrid, r.l_mu + 0.001 * r.l_vlb, 1e-6 * r.l_hybrid);
}

TEST(Trainer, DropProbabilityOneLeavesTimeEmbeddingOnly) {
  torch::manual_seed(2);
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.drop_prob = 1.0;
  cfg.lr = 0.0;  // keep the weights that produced the trace
  Trainer tr(DiffusionModel(test::tiny_model()), block_set(64, 2, true), cfg);
  for (int i = 0; i < 3; ++i) {
    tr.train_step();
    const auto& b = tr.last_batch();
    EXPECT_EQ(b.keep.sum().item<float>(), 0.0f);
    torch::NoGradGuard g;
    const auto zt = tr.model()->time->forward(b.t);
    EXPECT_TRUE(torch::equal(b.embedding, zt));
  }
}

TEST(Trainer, ContextsReachEmbeddingWhenKept) {
  torch::manual_seed(3);
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.drop_prob = 0.0;
  Trainer tr(DiffusionModel(test::tiny_model()), block_set(64, 3, true), cfg);
  tr.train_step();
  const auto& b = tr.last_batch();
  EXPECT_EQ(b.keep.sum().item<float>(), 32.0f);
  torch::NoGradGuard g;
  const auto zt = tr.model()->time->forward(b.t);
  EXPECT_GT((b.embedding - zt).abs().amax(1).min().item<float>(), 0.0f);
}

TEST(Trainer, SingleSampleOverfitsWithoutDropping) {
  torch::manual_seed(4);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.lr = 2e-3;
  cfg.drop_prob = 0.0;
  cfg.seed = 4;
  Trainer tr(DiffusionModel(test::tiny_model(1000, 8)), block_set(1, 4, true), cfg);
  std::vector<LossRecord> log;
  for (int i = 0; i < 200; ++i) log.push_back(tr.train_step());
  for (std::size_t w = 1; w < 4; ++w)
    EXPECT_LT(mean_mu(log, 50 * w, 50 * (w + 1)), mean_mu(log, 50 * (w - 1), 50 * w)) << "window " << w;
}

TEST(Trainer, SeededRunsRepeat) {
  auto run = [] {
    torch::manual_seed(5);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.seed = 9;
    Trainer tr(DiffusionModel(test::tiny_model()), block_set(20, 5, true), cfg);
    std::vector<double> out;
    for (int i = 0; i < 5; ++i) out.push_back(tr.train_step().l_hybrid);
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Trainer, NonFiniteLossStopsBeforeUpdate) {
  torch::manual_seed(6);
  TrainConfig cfg;
  cfg.batch_size = 4;
  Trainer tr(DiffusionModel(test::tiny_model()), block_set(8, 6, false), cfg);
  tr.train_step();
  {
    torch::NoGradGuard g;
    tr.model()->unet->in_conv->weight[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
  }
  const auto before = tr.model()->time->dense1->weight.clone();
  EXPECT_THROW(tr.train_step(), NumericalError);
  EXPECT_EQ(tr.step(), 1);
  EXPECT_TRUE(torch::equal(before, tr.model()->time->dense1->weight));
}

TEST(Trainer, RejectsBadInputs) {
  TrainConfig cfg;
  EXPECT_THROW(Trainer(DiffusionModel(test::tiny_model()), TrainingSet{}, cfg), DataError);
  auto set = block_set(4, 7, true);
  set.contexts.curves = set.contexts.curves.slice(0, 0, 3);
  EXPECT_THROW(Trainer(DiffusionModel(test::tiny_model()), set, cfg), ContractError);
  auto no_curve = test::tiny_model();
  no_curve.curve_context = false;
  Trainer tr(DiffusionModel(no_curve), block_set(4, 7, true), cfg);
  EXPECT_THROW(tr.train_step(), ContractError);
}

TEST(Trainer, IndependentDropUsesSeparateMasks) {
  auto mc = test::tiny_model();
  mc.topology_context = true;
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.drop_prob = 0.5;
  cfg.independent_drop = true;
  auto set = block_set(64, 8, true);
  set.contexts.topology = nn::to_unit_tensor(test::blocks(64, 8));
  Trainer tr(DiffusionModel(mc), set, cfg);
  tr.train_step();
  ASSERT_TRUE(tr.last_batch().keep_topology.defined());
  EXPECT_FALSE(torch::equal(tr.last_batch().keep, tr.last_batch().keep_topology));
}

TEST(Trainer, ConfigKeyValueRoundTrip) {
  TrainConfig c;
  c.lr = 3e-4;
  c.batch_size = 64;
  c.steps = 3000;
  c.drop_prob = 0.2;
  c.seed = 77;
  io::KeyValue kv;
  c.write(kv);
  const auto back = TrainConfig::read(kv);
  EXPECT_EQ(back.lr, c.lr);
  EXPECT_EQ(back.batch_size, 64);
  EXPECT_EQ(back.steps, 3000);
  EXPECT_EQ(back.drop_prob, 0.2);
  EXPECT_EQ(back.seed, 77u);
}

TEST(LossLog, WritesAppendsAndReads) {
  test::TempDir dir;
  const auto p = dir / "loss.csv";
  {
    LossLog log(p, false);
    log.write({1, 0.5, 10.0, 0.51});
  }
  {
    LossLog log(p, true);
    log.write({2, 0.25, 8.0, 0.258});
  }
  const auto rows = read_loss_log(p);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].step, 2);
  EXPECT_EQ(rows[1].l_vlb, 8.0);
  EXPECT_EQ(test::read_text(p).substr(0, 24), "step,l_mu,l_vlb,l_hybrid");
  test::write_text(dir / "bad.csv", "nope\n");
  EXPECT_THROW(read_loss_log(dir / "bad.csv"), DataError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripRestoresWeightsStepAndSettings) {
  test::TempDir dir;
  torch::manual_seed(10);
  TrainConfig cfg;
  cfg.batch_size = 4;
  Trainer tr(DiffusionModel(test::tiny_model()), block_set(8, 10, true), cfg);
  tr.train_step();
  tr.train_step();
  io::KeyValue settings;
  settings.set("note", "hello");
  save_checkpoint(dir / "ckpt.pt", tr.model(), settings, tr.step(), &tr.optimizer());
  EXPECT_FALSE(std::filesystem::exists(dir / "ckpt.pt.tmp"));

  std::unique_ptr<torch::optim::Adam> opt;
  auto loaded = load_checkpoint(dir / "ckpt.pt", [&](DiffusionModel& m) {
    opt = std::make_unique<torch::optim::Adam>(m->parameters(), torch::optim::AdamOptions(1e-4));
    return opt.get();
  });
  EXPECT_EQ(loaded.info.step, 2);
  EXPECT_EQ(loaded.info.settings.require("note"), "hello");
  EXPECT_EQ(loaded.info.config.steps, 50);
  EXPECT_EQ(loaded.info.config.unet.base_channels, 4);
  EXPECT_TRUE(loaded.info.config.curve_context);
  torch::NoGradGuard g;
  auto x = torch::randn({2, 1, 32, 32});
  auto t = torch::tensor({3, 40});
  Contexts ctx;
  ctx.curves = torch::rand({2, 13});
  tr.model()->eval();
  loaded.model->eval();
  EXPECT_TRUE(torch::equal(tr.model()->forward(x, t, ctx).eps, loaded.model->forward(x, t, ctx).eps));
  EXPECT_FALSE(opt->state().empty());
}

TEST(Checkpoint, CorruptOrMismatchedFilesAreDataErrors) {
  test::TempDir dir;
  EXPECT_THROW(load_checkpoint(dir / "missing.pt"), DataError);
  test::write_text(dir / "junk.pt", "garbage");
  EXPECT_THROW(load_checkpoint(dir / "junk.pt"), DataError);

  // Config says T = 50 but the stored beta table belongs to T = 60.
  DiffusionModel model(test::tiny_model());
  torch::serialize::OutputArchive ar;
  io::KeyValue kv;
  model->config().write(kv);
  ar.write("magic", torch::tensor(kCheckpointMagic));
  ar.write("config", c10::IValue(kv.str()));
  ar.write("betas", torch::tensor(linear_beta_schedule(60).beta, torch::kFloat64));
  ar.write("step", torch::tensor(int64_t{0}));
  ar.save_to((dir / "mismatch.pt").string());
  try {
    load_checkpoint(dir / "mismatch.pt");
    FAIL() << "expected a DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("does not match T = 50"), std::string::npos) << e.what();
  }

  // A surrogate file is not a diffusion checkpoint.
  torch::serialize::OutputArchive other;
  other.write("kind", torch::tensor(int64_t{1}));
  other.save_to((dir / "other.pt").string());
  EXPECT_THROW(load_checkpoint(dir / "other.pt"), DataError);
}

TEST(Model, RejectsContextsItWasNotBuiltFor) {
  auto c = test::tiny_model();
  c.curve_context = false;
  DiffusionModel m(c);
  torch::NoGradGuard g;
  Contexts ctx;
  ctx.curves = torch::rand({1, 13});
  EXPECT_THROW(m->forward(torch::randn({1, 1, 32, 32}), torch::tensor({1}), ctx), ContractError);
  ctx = {};
  ctx.topology = torch::rand({1, 1, 28, 28});
  EXPECT_THROW(m->forward(torch::randn({1, 1, 32, 32}), torch::tensor({1}), ctx), ContractError);
}

TEST(Model, ConfigKeyValueRoundTrip) {
  ModelConfig c = test::tiny_model(200, 16);
  c.topology_context = true;
  io::KeyValue kv;
  c.write(kv);
  const auto back = ModelConfig::read(kv);
  EXPECT_EQ(back.steps, 200);
  EXPECT_EQ(back.unet.base_channels, 16);
  EXPECT_TRUE(back.topology_context);
  EXPECT_EQ(back.schedule().beta, c.schedule().beta);
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

DiffusionModel random_model(uint64_t seed) {
  torch::manual_seed(seed);
  DiffusionModel m(test::tiny_model());
  test::perturb(*m, 0.02, seed);
  return m;
}

}  // namespace

TEST(Sampler, SeededSamplingRepeats) {
  auto m = random_model(20);
  const auto sched = m->config().schedule();
  SampleOptions o;
  o.seed = 3;
  const auto a = p_sample_loop(m, sched, 3, {}, o);
  const auto b = p_sample_loop(m, sched, 3, {}, o);
  EXPECT_TRUE(torch::equal(a.x, b.x));
  EXPECT_EQ(a.images, b.images);
  o.seed = 4;
  EXPECT_FALSE(torch::equal(p_sample_loop(m, sched, 3, {}, o).x, a.x));
}

TEST(Sampler, RandomWeightsGiveFiniteInRangeImages) {
  auto m = random_model(21);
  const auto r = p_sample_loop(m, m->config().schedule(), 4);
  EXPECT_TRUE(torch::isfinite(r.x).all().item<bool>());
  EXPECT_GE(r.x.min().item<float>(), -1.0f);
  EXPECT_LE(r.x.max().item<float>(), 1.0f);
  ASSERT_EQ(r.images.size(), 4u);
  EXPECT_EQ(r.images[0].width, 28);
}

TEST(Sampler, SnapshotsAtRequestedSteps) {
  auto m = random_model(22);
  const auto sched = m->config().schedule();
  SampleOptions o;
  o.snapshot_steps = {1, 25, 50};
  const auto r = p_sample_loop(m, sched, 2, {}, o);
  ASSERT_EQ(r.snapshots.size(), 3u);
  EXPECT_TRUE(torch::equal(r.snapshots.at(50), r.x));
  EXPECT_FALSE(torch::equal(r.snapshots.at(1), r.x));
  o.snapshot_steps = {51};
  EXPECT_THROW(p_sample_loop(m, sched, 2, {}, o), ConfigError);
}

TEST(Sampler, NonFiniteStateReportsStep) {
  auto m = random_model(23);
  {
    torch::NoGradGuard g;
    m->unet->out_conv->bias[0] = std::numeric_limits<float>::infinity();
  }
  try {
    p_sample_loop(m, m->config().schedule(), 1);
    FAIL() << "expected a NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("t = 50"), std::string::npos) << e.what();
  }
}

TEST(Sampler, ConditioningContracts) {
  auto m = random_model(24);
  const auto sched = m->config().schedule();
  Contexts ctx;
  ctx.curves = torch::rand({3, 13});
  EXPECT_THROW(p_sample_loop(m, sched, 2, ctx), ContractError);
  EXPECT_THROW(p_sample_loop(m, sched, 0), ContractError);
  SampleOptions guided;
  guided.guidance_weight = 2.0;
  EXPECT_TRUE(torch::equal(p_sample_loop(m, sched, 2, {}, guided).x, p_sample_loop(m, sched, 2).x));
  ctx.curves = torch::rand({2, 13});
  EXPECT_FALSE(torch::equal(p_sample_loop(m, sched, 2, ctx, guided).x, p_sample_loop(m, sched, 2, ctx).x));
}

TEST(Sampler, MixSeedSeparatesStreams) {
  EXPECT_NE(mix_seed(1, 0), mix_seed(1, 1));
  EXPECT_NE(mix_seed(1, 0), mix_seed(2, 0));
  EXPECT_EQ(mix_seed(5, 3), mix_seed(5, 3));
}

TEST(Trainer, ResumeContinuesStepCounter) {
  TrainConfig cfg;
  cfg.batch_size = 4;
  Trainer tr(DiffusionModel(test::tiny_model()), block_set(8, 11, false), cfg);
  tr.set_step(7);
  EXPECT_EQ(tr.train_step().step, 8);
  EXPECT_EQ(tr.step(), 8);
}
