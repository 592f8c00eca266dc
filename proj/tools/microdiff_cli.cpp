// microdiff command-line driver: dataset generation, training, design and
// validation runs. Every run writes its resolved settings to <out>/config.txt.

#include <torch/torch.h>

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "microdiff/dataset.hpp"
#include "microdiff/diffusion/model.hpp"
#include "microdiff/diffusion/sampler.hpp"
#include "microdiff/diffusion/trainer.hpp"
#include "microdiff/errors.hpp"
#include "microdiff/fem/mesh.hpp"
#include "microdiff/fem/solver.hpp"
#include "microdiff/io/key_value.hpp"
#include "microdiff/io/pgm.hpp"
#include "microdiff/mnist_data.hpp"
#include "microdiff/nn/surrogate.hpp"
#include "microdiff/nn/tensors.hpp"
#include "microdiff/pipeline.hpp"
#include "run_log.hpp"

namespace fs = std::filesystem;
using namespace microdiff;

namespace {

constexpr const char* kConfigFile = "config.txt";

struct Setting {
  std::string key;
  std::string value;
  std::string help;
};

struct Run {
  io::KeyValue cfg;
  fs::path out;
  bool resume = false;
  std::unique_ptr<RunLog> log;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<Setting> settings;
  std::function<int(Run&)> run;
  bool resumable = false;
};

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  for (auto& c : f)
    if (c == '_') c = '-';
  return f;
}

// ---------------------------------------------------------------------------
// Shared helpers

fem::SolverOptions solver_options(const io::KeyValue& cfg) {
  fem::SolverOptions o;
  o.newton_tol = cfg.get_double("newton_tol", o.newton_tol);
  o.max_newton = static_cast<int>(cfg.get_int("max_newton", o.max_newton));
  o.max_bisection = static_cast<int>(cfg.get_int("max_bisection", o.max_bisection));
  if (!(o.newton_tol > 0.0)) throw ConfigError("newton_tol must be positive");
  if (o.max_newton < 1) throw ConfigError("max_newton must be at least 1");
  if (o.max_bisection < 0) throw ConfigError("max_bisection must be non-negative");
  return o;
}

int positive_int(const io::KeyValue& cfg, const std::string& key) {
  const auto v = cfg.get_int(key, 0);
  if (v < 1) throw ConfigError(key + " must be at least 1");
  return static_cast<int>(v);
}

void set_threads(const io::KeyValue& cfg) { torch::set_num_threads(positive_int(cfg, "jobs")); }

std::vector<Bitmap> take(std::vector<Bitmap> images, int64_t count) {
  if (count > 0 && count < static_cast<int64_t>(images.size())) images.resize(static_cast<std::size_t>(count));
  return images;
}

void write_grid(const fs::path& path, std::span<const Bitmap> images, std::size_t limit) {
  const auto n = std::min(limit, images.size());
  if (n == 0) return;
  const int cols = static_cast<int>(std::min<std::size_t>(8, n));
  io::write_pgm(path, io::tile(images.subspan(0, n), cols));
}

std::string num(double v, const char* spec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), (std::string("%") + spec).c_str(), v);
  return buf;
}

std::string zero_pad(int64_t v, int width) {
  auto s = std::to_string(v);
  return std::string(static_cast<std::size_t>(std::max<int>(0, width - static_cast<int>(s.size()))), '0') + s;
}

// Normalized target from polynomial coefficients or from the first row of a
// curve CSV.
EnergyCurve resolve_target(const io::KeyValue& cfg) {
  const auto coeffs = cfg.get_doubles("coeffs");
  const auto curve = cfg.get_string("curve", "");
  if (coeffs.empty() == curve.empty()) throw ConfigError("give exactly one of coeffs or curve as the target");
  if (!coeffs.empty()) {
    if (coeffs.size() != 3) throw ConfigError("coeffs needs three values a,b,c");
    return eval_polynomial({coeffs[0], coeffs[1], coeffs[2]});
  }
  const auto rows = read_curve_csv(curve, true);
  if (rows.empty()) throw DataError(curve + ": no curve rows");
  return rows.front().curve;
}

struct AcceptedRow {
  int64_t id = 0;
  double mse = 0.0;
};

void write_accepted_csv(const fs::path& path, const pipeline::FilterReport& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "id,mse\n";
  for (const auto& s : r.samples)
    if (s.accepted) out << s.id << ',' << io::format_double(s.mse) << '\n';
}

std::vector<AcceptedRow> read_accepted_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (io::trim(line) != "id,mse") throw DataError(path.string() + ": unexpected header");
  std::vector<AcceptedRow> rows;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    AcceptedRow r;
    char comma = 0;
    std::istringstream ss(line);
    if (!(ss >> r.id >> comma >> r.mse)) throw DataError(path.string() + ": malformed row '" + line + "'");
    rows.push_back(r);
  }
  return rows;
}

io::KeyValue validation_summary(const pipeline::ValidationTable& t, double limit) {
  io::KeyValue kv;
  std::size_t converged = 0;
  for (const auto& r : t.rows) converged += r.converged ? 1 : 0;
  kv.set("validated", static_cast<int64_t>(t.rows.size()));
  kv.set("converged", static_cast<int64_t>(converged));
  kv.set("rank_correlation", t.rank_correlation);
  kv.set("mean_abs_discrepancy", t.mean_abs_discrepancy);
  kv.set("mse_limit", limit);
  kv.set("fraction_within_limit", t.fraction_within(limit));
  kv.set("fraction_within_3x_limit", t.fraction_within(3.0 * limit));
  return kv;
}

pipeline::ValidationTable run_validation(Run& run, std::span<const Bitmap> images,
                                         const std::vector<AcceptedRow>& accepted, const EnergyCurve& target,
                                         double normalization, double limit) {
  const auto& cfg = run.cfg;
  pipeline::FemSettings fs_;
  fs_.subdivision = positive_int(cfg, "subdivision");
  fs_.poisson = cfg.get_double("poisson", kDefaultPoisson);
  fs_.normalization = normalization;
  fs_.solver = solver_options(cfg);
  fs_.jobs = positive_int(cfg, "jobs");
  std::vector<int64_t> ids;
  std::vector<double> mses;
  for (const auto& a : accepted) {
    ids.push_back(a.id);
    mses.push_back(a.mse);
  }
  const auto k = static_cast<std::size_t>(cfg.get_int("validate_k", 0));
  run.log->info(cat("validating ", std::min(k, images.size()), " of ", images.size(),
                    " accepted samples with FEM at s=", fs_.subdivision));
  auto table = pipeline::validate_with_fem(images, ids, mses, target, k, fs_);
  pipeline::write_validation_csv(run.out / "validation.csv", table);
  const auto summary = validation_summary(table, limit);
  summary.save(run.out / "validation.txt");
  for (const auto& r : table.rows)
    if (!r.converged) run.log->warn(cat("sample ", r.id, ": ", r.error));
  run.log->info(cat("rank correlation ", num(table.rank_correlation, ".4f"), ", within limit ",
                    num(table.fraction_within(limit), ".3f"), ", within 3x limit ",
                    num(table.fraction_within(3.0 * limit), ".3f")));
  return table;
}

// ---------------------------------------------------------------------------
// gen-dataset

int gen_dataset(Run& run) {
  const auto& cfg = run.cfg;
  const fs::path dir = cfg.require("mnist_dir");
  const auto split = cfg.require("split");
  if (split != "train" && split != "test") throw ConfigError("split must be train or test");
  const auto images_all = load_idx(dir / (split == "train" ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte"));
  const auto offset = cfg.get_int("offset", 0);
  auto count = cfg.get_int("count", 0);
  if (offset < 0 || count < 0) throw ConfigError("offset and count must be non-negative");
  const auto available = static_cast<int64_t>(images_all.size());
  if (offset >= available) throw ConfigError("offset " + std::to_string(offset) + " is past the end of the split");
  if (count == 0) count = available - offset;
  if (offset + count > available)
    throw ConfigError("requested " + std::to_string(count) + " images from offset " + std::to_string(offset) +
                      " but the split holds " + std::to_string(available));
  const std::vector<Bitmap> images(images_all.begin() + offset, images_all.begin() + offset + count);

  SolveSettings s;
  s.subdivision = positive_int(cfg, "subdivision");
  s.poisson = cfg.get_double("poisson", kDefaultPoisson);
  s.solver = solver_options(cfg);
  s.jobs = positive_int(cfg, "jobs");
  const auto elements = fem::build_mesh(to_property_field(images.front(), s.poisson), s.subdivision).elements.size();
  run.log->info(cat("solving ", images.size(), " ", split, " samples at s=", s.subdivision, ": ", elements,
                    " elements per sample, ", s.jobs, " jobs"));

  std::size_t done = 0;
  const std::size_t every = std::max<std::size_t>(1, images.size() / 20);
  const auto raw = solve_curves(images, s, [&](std::size_t, const fem::UniaxialResult&) {
    if (++done % every == 0 || done == images.size()) run.log->info(cat("solved ", done, "/", images.size()));
  });

  std::vector<EnergyCurve> curves;
  std::size_t non_monotone = 0;
  for (const auto& r : raw) {
    curves.push_back(r.curve);
    if (!r.curve.monotone_increasing()) ++non_monotone;
  }
  if (non_monotone) run.log->warn(cat(non_monotone, " curves are not strictly increasing"));

  DatasetManifest m;
  (split == "train" ? m.train_size : m.test_size) = count;
  m.subdivision = s.subdivision;
  m.poisson = s.poisson;
  const double fixed = cfg.get_double("normalization", 0.0);
  if (fixed < 0.0) throw ConfigError("normalization must be positive, or 0 for the median of this set");
  m.normalization = fixed > 0.0 ? fixed : normalization_constant(curves);
  run.log->info(cat("normalization S = ", io::format_double(m.normalization)));
  write_dataset(run.out, images, raw, m);

  const auto dumps = std::min<int64_t>(cfg.get_int("dump_fields", 0), count);
  if (dumps > 0) {
    fs::create_directories(run.out / "fields");
    for (int64_t i = 0; i < dumps; ++i) {
      fem::run_uniaxial_extension(
          to_property_field(images[static_cast<std::size_t>(i)], s.poisson), fem::LoadSchedule{}, s.subdivision,
          s.solver, [&](int step, const fem::Mesh& mesh, const fem::DeformationState& state) {
            fem::write_displacement_grid(
                run.out / "fields" / ("sample_" + zero_pad(i, 5) + "_step_" + zero_pad(step, 2) + ".bin"), mesh, state,
                step);
          });
    }
    run.log->info(cat("wrote displacement fields for ", dumps, " samples"));
  }
  run.log->info(cat("wrote ", count, " curves to ", run.out.string()));
  return 0;
}

// ---------------------------------------------------------------------------
// train-surrogate

int train_surrogate_cmd(Run& run) {
  const auto& cfg = run.cfg;
  set_threads(cfg);
  const auto seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  torch::manual_seed(seed);
  auto data = load_dataset(cfg.require("dataset"));
  const auto count = cfg.get_int("count", 0);
  data.images = take(std::move(data.images), count);
  auto curves = data.energy_curves();
  curves.resize(data.images.size());

  const auto x = nn::to_unit_tensor(data.images);
  const auto y = nn::to_curve_tensor(curves);
  const int64_t n = x.size(0);
  const double val_fraction = cfg.get_double("val_fraction", 0.1);
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  const auto n_val = static_cast<int64_t>(std::llround(val_fraction * static_cast<double>(n)));
  auto split_gen = torch::make_generator<torch::CPUGeneratorImpl>(diffusion::mix_seed(seed, 1));
  const auto perm = torch::randperm(n, split_gen);
  const auto val_idx = perm.slice(0, 0, n_val), train_idx = perm.slice(0, n_val, n);

  nn::SurrogateTrainConfig tc;
  tc.epochs = positive_int(cfg, "epochs");
  tc.batch_size = positive_int(cfg, "batch");
  tc.lr = cfg.get_double("lr", tc.lr);
  tc.plateau_factor = cfg.get_double("plateau_factor", tc.plateau_factor);
  tc.plateau_patience = static_cast<int>(cfg.get_int("plateau_patience", tc.plateau_patience));
  tc.early_stop_patience = static_cast<int>(cfg.get_int("early_stop", 0));
  tc.seed = seed;
  run.log->info(cat("training surrogate on ", n - n_val, " samples, validating on ", n_val));

  nn::SurrogateNet net;
  const auto log =
      nn::train_surrogate(net, x.index_select(0, train_idx), y.index_select(0, train_idx), x.index_select(0, val_idx),
                          y.index_select(0, val_idx), tc, [&](const nn::EpochRecord& r) {
                            run.log->info(cat("epoch ", r.epoch, " train ", num(r.train_mse, ".3e"), " val ",
                                              num(r.val_mse, ".3e"), " lr ", num(r.lr, ".3e")));
                          });
  nn::save_surrogate((run.out / "surrogate.pt").string(), net, data.manifest.normalization);
  nn::write_epoch_log((run.out / "epochs.csv").string(), log);
  {
    std::ofstream ids(run.out / "val_ids.csv");
    ids << "sample_id\n";
    auto acc = val_idx.accessor<int64_t, 1>();
    for (int64_t i = 0; i < acc.size(0); ++i) ids << acc[i] << '\n';
  }
  io::KeyValue summary;
  summary.set("epochs_run", static_cast<int64_t>(log.size()));
  summary.set("train_mse", log.back().train_mse);
  summary.set("val_mse", log.back().val_mse);
  summary.set("train_size", n - n_val);
  summary.set("val_size", n_val);
  summary.set("normalization", data.manifest.normalization);
  summary.save(run.out / "summary.txt");
  return 0;
}

// ---------------------------------------------------------------------------
// train-diffusion

diffusion::ModelConfig model_config(const io::KeyValue& cfg) {
  diffusion::ModelConfig mc;
  mc.steps = positive_int(cfg, "T");
  mc.beta_start = cfg.get_double("beta_start", mc.beta_start);
  mc.beta_end = cfg.get_double("beta_end", mc.beta_end);
  mc.curve_context = cfg.get_bool("curve_context", true);
  mc.topology_context = cfg.get_bool("topology_context", false);
  io::KeyValue unet;
  unet.set("unet.base_channels", cfg.require("base_channels"));
  unet.set("unet.multipliers", cfg.require("multipliers"));
  unet.set("unet.attention", cfg.require("attention"));
  mc.unet = nn::DenoiserConfig::read(unet);
  (void)mc.schedule();  // validates the beta endpoints
  return mc;
}

int train_diffusion_cmd(Run& run) {
  const auto& cfg = run.cfg;
  set_threads(cfg);
  const auto mc = model_config(cfg);
  diffusion::TrainConfig tc;
  tc.lr = cfg.get_double("lr", tc.lr);
  tc.batch_size = positive_int(cfg, "batch");
  tc.steps = cfg.get_int("steps", tc.steps);
  tc.drop_prob = cfg.get_double("drop_prob", tc.drop_prob);
  tc.independent_drop = cfg.get_bool("independent_drop", false);
  tc.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  const auto every = positive_int(cfg, "checkpoint_every");
  const auto log_every = positive_int(cfg, "log_every");

  auto data = load_dataset(cfg.require("dataset"));
  data.images = take(std::move(data.images), cfg.get_int("count", 0));
  auto curves = data.energy_curves();
  curves.resize(data.images.size());
  diffusion::TrainingSet set;
  set.x0 = nn::to_diffusion_tensor(data.images);
  if (mc.curve_context) set.contexts.curves = nn::to_curve_tensor(curves);
  if (mc.topology_context) set.contexts.topology = nn::to_unit_tensor(data.images);

  const auto ckpt = run.out / "checkpoint.pt";
  diffusion::DiffusionModel model{nullptr};
  int64_t start = 0;
  if (run.resume) {
    auto loaded = diffusion::load_checkpoint(ckpt);
    io::KeyValue want, have;
    mc.write(want);
    loaded.info.config.write(have);
    for (const auto& [k, v] : want.entries())
      if (have.find(k) != v)
        throw ConfigError("checkpoint " + ckpt.string() + " has " + k + " = " + have.get_string(k, "?") +
                          " but the run asks for " + v);
    model = loaded.model;
    start = loaded.info.step;
    cfg.save(run.out / kConfigFile);
  } else {
    torch::manual_seed(tc.seed);
    model = diffusion::DiffusionModel(mc);
  }
  diffusion::Trainer trainer(model, set, tc);
  if (run.resume) {
    if (!diffusion::load_optimizer_state(ckpt, trainer.optimizer()))
      run.log->warn("checkpoint has no optimizer state; Adam restarts from zero moments");
    trainer.set_step(start);
    run.log->info(cat("resuming at step ", start));
  }
  run.log->info(cat("training on ", set.size(), " samples: T=", mc.steps, ", ", nn::parameter_count(*model),
                    " parameters, batch ", tc.batch_size, ", ", tc.steps, " steps"));

  diffusion::LossLog losses(run.out / "loss.csv", run.resume);
  double window = 0.0;
  int in_window = 0;
  while (trainer.step() < tc.steps) {
    const auto rec = trainer.train_step();
    losses.write(rec);
    window += rec.l_mu;
    ++in_window;
    if (rec.step % log_every == 0 || rec.step == tc.steps) {
      run.log->info(cat("step ", rec.step, " l_mu ", num(rec.l_mu, ".4f"), " (mean ", num(window / in_window, ".4f"),
                        ") l_vlb ", num(rec.l_vlb, ".4f"), " l_hybrid ", num(rec.l_hybrid, ".4f")));
      window = 0.0;
      in_window = 0;
      losses.flush();
    }
    if (rec.step % every == 0) diffusion::save_checkpoint(ckpt, model, cfg, rec.step, &trainer.optimizer());
  }
  losses.flush();
  diffusion::save_checkpoint(ckpt, model, cfg, trainer.step(), &trainer.optimizer());
  run.log->info(cat("saved ", ckpt.string(), " at step ", trainer.step()));
  return 0;
}

// ---------------------------------------------------------------------------
// design

std::set<int> parse_steps(const io::KeyValue& cfg, const std::string& key) {
  std::set<int> out;
  for (double v : cfg.get_doubles(key)) {
    if (v != std::floor(v)) throw ConfigError(key + ": steps must be integers");
    out.insert(static_cast<int>(v));
  }
  return out;
}

// A previous design run whose generated samples can be re-filtered. It must
// have drawn them under the same model, target and seed.
// Surrogate predictions from a report, reused as-is so a replay scores
// exactly what the original run scored.
std::vector<CurveValues> read_predictions(const fs::path& path, std::size_t expected) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<CurveValues> out;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 4 + kCurvePoints || std::stoll(cells[0]) != static_cast<int64_t>(out.size()))
      throw DataError(path.string() + ": malformed report row '" + line + "'");
    CurveValues v{};
    for (int i = 0; i < kCurvePoints; ++i)
      v[static_cast<std::size_t>(i)] = std::stod(cells[4 + static_cast<std::size_t>(i)]);
    out.push_back(v);
  }
  if (out.size() != expected)
    throw DataError(path.string() + ": report covers " + std::to_string(out.size()) + " samples but the pool holds " +
                    std::to_string(expected));
  return out;
}

pipeline::GenerationPool load_pool(const fs::path& dir, const io::KeyValue& cfg) {
  const auto prev = io::KeyValue::load(dir / kConfigFile);
  for (const char* k : {"diffusion", "coeffs", "curve", "topology", "guidance", "clip_denoised", "batch", "seed"})
    if (prev.find(k) != cfg.find(k)) throw ConfigError("pool " + dir.string() + " was generated with a different " + k);
  pipeline::GenerationPool pool;
  pool.batch_size = positive_int(cfg, "batch");
  pool.images = load_idx(dir / "generated.idx");
  if (pool.images.size() % static_cast<std::size_t>(pool.batch_size) != 0)
    throw DataError(dir.string() + ": generated pool is not a whole number of batches");
  pool.predicted = read_predictions(dir / "report.csv", pool.images.size());
  const auto seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  for (std::size_t b = 0; b < pool.images.size() / static_cast<std::size_t>(pool.batch_size); ++b)
    pool.batch_seeds.push_back(diffusion::mix_seed(seed, b));
  return pool;
}

int design_cmd(Run& run) {
  const auto& cfg = run.cfg;
  set_threads(cfg);
  auto loaded = diffusion::load_checkpoint(cfg.require("diffusion"));
  auto& model = loaded.model;
  nn::SurrogateNet surrogate;
  const double normalization = nn::load_surrogate(cfg.require("surrogate"), surrogate);

  pipeline::GenerationTarget target;
  target.behavior = resolve_target(cfg);
  if (const auto topo = cfg.get_string("topology", ""); !topo.empty()) {
    auto img = io::read_pgm(topo);
    if (img.width != kImageSize || img.height != kImageSize)
      throw ConfigError(topo + ": topology image must be 28x28, got " + std::to_string(img.width) + "x" +
                        std::to_string(img.height));
    target.topology = std::move(img);
  }
  target.mse_limit = cfg.get_double("mse_limit", target.mse_limit);
  target.n_accept = positive_int(cfg, "n_accept");
  target.max_generated = positive_int(cfg, "max_generated");
  target.validate();

  pipeline::GenerateOptions go;
  go.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  go.batch_size = positive_int(cfg, "batch");
  go.sampling.guidance_weight = cfg.get_double("guidance", 0.0);
  go.sampling.clip_denoised = cfg.get_bool("clip_denoised", false);
  go.sampling.snapshot_steps = parse_steps(cfg, "snapshot_steps");
  const auto snapshot_count = static_cast<std::size_t>(cfg.get_int("snapshot_count", 16));
  if (!go.sampling.snapshot_steps.empty()) fs::create_directories(run.out / "snapshots");
  go.on_sample = [&](std::size_t batch, const diffusion::SampleResult& s) {
    if (batch != 0) return;
    for (const auto& [step, x] : s.snapshots) {
      const auto imgs = nn::to_bitmaps(x);
      write_grid(run.out / "snapshots" / ("step_" + zero_pad(step, 4) + ".pgm"), imgs, snapshot_count);
    }
  };
  go.on_batch = [&](const pipeline::GenerationPool& p) {
    const auto r = pipeline::filter_pool(p, target);
    run.log->info(cat("generated ", p.size(), " accepted ", r.accepted_count, "/", target.n_accept));
  };

  pipeline::GenerationPool pool;
  if (const auto dir = cfg.get_string("pool", ""); !dir.empty()) {
    pool = load_pool(dir, cfg);
    run.log->info(cat("replaying ", pool.size(), " cached samples from ", dir));
  }
  run.log->info(cat("target final energy ", num(target.behavior.final_energy(), ".4f"), ", limit ",
                    io::format_double(target.mse_limit), ", want ", target.n_accept, " accepted, cap ",
                    target.max_generated));
  const auto sched = model->config().schedule();
  auto result = pipeline::generate_and_filter(model, sched, surrogate, target, go, &pool);
  const auto& report = result.report;

  save_idx(run.out / "generated.idx", pool.images);
  pipeline::write_report_csv(run.out / "report.csv", report);
  write_accepted_csv(run.out / "accepted.csv", report);
  save_idx(run.out / "accepted.idx", result.accepted);
  {
    std::array<CurveRecord, 1> rows{CurveRecord{0, target.behavior}};
    write_curve_csv(run.out / "target.csv", rows);
  }
  auto summary = pipeline::report_summary(report);
  summary.set("normalization", normalization);
  summary.set("target_final_energy", target.behavior.final_energy());
  summary.save(run.out / "summary.txt");
  if (!result.accepted.empty()) {
    write_grid(run.out / "accepted.pgm", result.accepted, result.accepted.size());
    fs::create_directories(run.out / "images");
    const auto ids = report.accepted_ids();
    for (std::size_t i = 0; i < ids.size(); ++i)
      io::write_pgm(run.out / "images" / ("sample_" + zero_pad(ids[i], 5) + ".pgm"), result.accepted[i]);
  }
  run.log->info(cat("status ", pipeline::to_string(report.status), ": ", report.accepted_count, " accepted of ",
                    report.generated_count, " generated, mean accepted intensity ",
                    num(report.mean_accepted_intensity, ".4f")));

  if (cfg.get_int("validate_k", 0) > 0 && !result.accepted.empty())
    run_validation(run, result.accepted, read_accepted_csv(run.out / "accepted.csv"), target.behavior, normalization,
                   target.mse_limit);

  if (report.status == pipeline::FilterStatus::exhausted) {
    run.log->error(cat("no sample met the limit within ", report.generated_count, " generated"));
    return static_cast<int>(ExitCode::exhausted);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// validate

int validate_cmd(Run& run) {
  const auto& cfg = run.cfg;
  const fs::path dir = cfg.require("run");
  const auto images = load_idx(dir / "accepted.idx");
  const auto accepted = read_accepted_csv(dir / "accepted.csv");
  if (accepted.size() != images.size())
    throw DataError(dir.string() + ": accepted.csv and accepted.idx disagree on the sample count");
  const auto target = read_curve_csv(dir / "target.csv", true);
  if (target.empty()) throw DataError(dir.string() + ": target.csv has no rows");
  const auto summary = io::KeyValue::load(dir / "summary.txt");
  const double normalization = summary.get_double("normalization", 0.0);
  if (!(normalization > 0.0)) throw DataError(dir.string() + ": summary.txt has no normalization constant");
  const double limit = summary.get_double("mse_limit", pipeline::kDefaultMseLimit);
  run_validation(run, images, accepted, target.front().curve, normalization, limit);
  return 0;
}

// ---------------------------------------------------------------------------
// fit-poly

int fit_poly_cmd(Run& run) {
  const auto& cfg = run.cfg;
  const auto coeffs = cfg.get_doubles("coeffs");
  const auto curves = cfg.get_string("curves", "");
  if (coeffs.empty() == curves.empty()) throw ConfigError("give exactly one of coeffs or curves");
  if (!coeffs.empty()) {
    if (coeffs.size() != 3) throw ConfigError("coeffs needs three values a,b,c");
    std::array<CurveRecord, 1> rows{CurveRecord{0, eval_polynomial({coeffs[0], coeffs[1], coeffs[2]})}};
    write_curve_csv(run.out / "target.csv", rows);
    run.log->info(cat("wrote target curve with final energy ", io::format_double(rows[0].curve.final_energy())));
    return 0;
  }
  const auto rows = read_curve_csv(curves, true);
  std::ofstream out(run.out / "fits.csv", std::ios::binary);
  if (!out) throw DataError("cannot write fits.csv");
  out << "sample_id,a,b,c,residual,in_range\n";
  std::size_t inside = 0;
  for (const auto& r : rows) {
    const auto fit = fit_cubic(r.curve);
    const bool in = in_reference_range(fit.coeffs);
    inside += in ? 1 : 0;
    out << r.sample_id << ',' << io::format_double(fit.coeffs.a) << ',' << io::format_double(fit.coeffs.b) << ','
        << io::format_double(fit.coeffs.c) << ',' << io::format_double(fit.residual) << ',' << (in ? 1 : 0) << '\n';
  }
  run.log->info(cat("fitted ", rows.size(), " curves, ", inside, " inside the reference coefficient box"));
  return 0;
}

// ---------------------------------------------------------------------------

std::vector<Command> commands() {
  const std::vector<Setting> fem = {
      {"subdivision", "2", "mesh subdivision s (s=5 gives 39200 elements)"},
      {"poisson", "0.3", "Poisson ratio"},
      {"newton_tol", "1e-08", "relative Newton residual tolerance"},
      {"max_newton", "20", "Newton iterations per load step"},
      {"max_bisection", "6", "load-step bisection depth"},
  };
  auto with = [](std::vector<Setting> a, const std::vector<Setting>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  return {
      {"gen-dataset", "Solve uniaxial extension for MNIST digits and write a curve dataset",
       with({{"mnist_dir", "data/mnist", "directory with the IDX files"},
             {"split", "train", "train or test"},
             {"offset", "0", "first image index"},
             {"count", "0", "number of images (0 = rest of the split)"}},
            with(fem, {{"normalization", "0", "fixed S (0 = median final energy of this set)"},
                       {"dump_fields", "0", "write displacement grids for the first N samples"},
                       {"jobs", "1", "parallel solves"}})),
       gen_dataset},
      {"train-surrogate",
       "Train the CNN energy surrogate on a dataset",
       {{"dataset", "", "dataset directory"},
        {"count", "0", "use the first N samples (0 = all)"},
        {"epochs", "200", "training epochs"},
        {"batch", "256", "minibatch size"},
        {"lr", "0.001", "Adam learning rate"},
        {"val_fraction", "0.1", "held-out fraction"},
        {"plateau_factor", "0.9", "lr factor on plateau"},
        {"plateau_patience", "5", "epochs without improvement before decay"},
        {"early_stop", "0", "stop after N stale epochs (0 = off)"},
        {"seed", "0", "random seed"},
        {"jobs", "1", "torch threads"}},
       train_surrogate_cmd},
      {"train-diffusion",
       "Train the conditional diffusion model",
       {{"dataset", "", "dataset directory"},
        {"count", "0", "use the first N samples (0 = all)"},
        {"T", "1000", "diffusion steps"},
        {"beta_start", "0.0001", "first beta at T=1000"},
        {"beta_end", "0.02", "last beta at T=1000"},
        {"base_channels", "32", "U-Net base width"},
        {"multipliers", "1,2,4,8", "channel multipliers per level"},
        {"attention", "16,8,4", "grid sizes with self-attention"},
        {"curve_context", "true", "condition on energy curves"},
        {"topology_context", "false", "condition on the sample bitmap"},
        {"lr", "0.0001", "Adam learning rate"},
        {"batch", "128", "minibatch size"},
        {"steps", "50000", "optimizer steps"},
        {"drop_prob", "0.1", "context drop probability"},
        {"independent_drop", "false", "drop curve and topology contexts separately"},
        {"checkpoint_every", "1000", "steps between checkpoints"},
        {"log_every", "50", "steps between log lines"},
        {"seed", "0", "random seed"},
        {"jobs", "1", "torch threads"}},
       train_diffusion_cmd,
       true},
      {"design", "Generate microstructures for a target curve and filter them with the surrogate",
       with({{"diffusion", "", "diffusion checkpoint"},
             {"surrogate", "", "surrogate checkpoint"},
             {"coeffs", "", "target polynomial a,b,c"},
             {"curve", "", "target curve CSV (first row)"},
             {"topology", "", "28x28 PGM topology context"},
             {"mse_limit", "0.0001", "acceptance limit on surrogate MSE"},
             {"n_accept", "512", "stop after this many acceptances"},
             {"max_generated", "4096", "generation cap (rounded up to whole batches)"},
             {"batch", "64", "sampling batch size"},
             {"guidance", "0", "classifier-free guidance weight"},
             {"clip_denoised", "false", "clamp the implied x0 while sampling"},
             {"snapshot_steps", "", "reverse steps to save as grids, e.g. 1,750,1000"},
             {"snapshot_count", "16", "images per snapshot grid"},
             {"pool", "", "previous design run to re-filter"},
             {"validate_k", "0", "FEM-validate this many accepted samples"}},
            with(fem, {{"seed", "0", "random seed"}, {"jobs", "1", "threads for sampling and FEM"}})),
       design_cmd},
      {"validate", "Re-solve accepted samples of a design run with FEM",
       with({{"run", "", "design output directory"}, {"validate_k", "16", "samples to validate"}},
            with(fem, {{"jobs", "1", "parallel solves"}})),
       validate_cmd},
      {"fit-poly",
       "Fit cubic polynomials to curves, or write the curve of given coefficients",
       {{"curves", "", "curve CSV to fit"}, {"coeffs", "", "coefficients a,b,c to evaluate"}},
       fit_poly_cmd},
  };
}

// Non-empty output directories are only reused when the caller says so, and
// only cleared when they hold a previous run.
void prepare_output(const fs::path& out, bool overwrite, bool resume) {
  if (out.empty()) throw ConfigError("--out is required");
  if (fs::exists(out) && !fs::is_directory(out)) throw ConfigError(out.string() + " is not a directory");
  const bool occupied = fs::exists(out) && !fs::is_empty(out);
  if (occupied && !resume) {
    if (!overwrite)
      throw ConfigError("output directory " + out.string() + " is not empty; pass --overwrite to replace it");
    if (!fs::exists(out / kConfigFile))
      throw ConfigError("refusing to clear " + out.string() + ": it does not hold a previous run");
    for (const auto& entry : fs::directory_iterator(out)) fs::remove_all(entry.path());
  }
  fs::create_directories(out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"microdiff: diffusion-based inverse design of hyperelastic microstructures"};
  app.require_subcommand(1);
  const auto cmds = commands();
  struct Parsed {
    CLI::App* sub = nullptr;
    std::map<std::string, std::string> values;
    std::string config, out;
    bool overwrite = false, resume = false;
  };
  std::vector<Parsed> parsed(cmds.size());
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    auto& p = parsed[i];
    p.sub = app.add_subcommand(cmds[i].name, cmds[i].help);
    p.sub->add_option("--out,-o", p.out, "output directory")->required();
    p.sub->add_option("--config,-c", p.config, "key = value settings file");
    p.sub->add_flag("--overwrite", p.overwrite, "replace a previous run in --out");
    if (cmds[i].resumable) p.sub->add_flag("--resume", p.resume, "continue from <out>/checkpoint.pt");
    for (const auto& s : cmds[i].settings) {
      auto* opt = p.sub->add_option(flag_name(s.key), p.values[s.key], s.help);
      if (!s.value.empty()) opt->default_str(s.value);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  std::size_t which = 0;
  while (!parsed[which].sub->parsed()) ++which;
  const auto& cmd = cmds[which];
  const auto& p = parsed[which];
  Run run;
  run.out = p.out;
  run.resume = p.resume;
  try {
    for (const auto& s : cmd.settings) run.cfg.set(s.key, s.value);
    if (!p.config.empty()) {
      const auto file = io::KeyValue::load(p.config);
      for (const auto& [k, v] : file.entries()) {
        if (!run.cfg.contains(k)) throw ConfigError(p.config + ": unknown key '" + k + "' for " + cmd.name);
        run.cfg.set(k, v);
      }
    }
    for (const auto& s : cmd.settings)
      if (p.sub->count(flag_name(s.key)) > 0) run.cfg.set(s.key, p.values.at(s.key));
    prepare_output(run.out, p.overwrite, p.resume);
    run.log = std::make_unique<RunLog>(run.out / "log.txt", run.resume);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::data);
  }

  try {
    // A resumed run only replaces the echo once the checkpoint matches it.
    if (!run.resume) run.cfg.save(run.out / kConfigFile);
    run.log->info(cat(cmd.name, " -> ", run.out.string()));
    return cmd.run(run);
  } catch (const Error& e) {
    run.log->error(e.what());
    return static_cast<int>(e.exit_code());
  } catch (const c10::Error& e) {
    run.log->error(e.what_without_backtrace());
    return static_cast<int>(ExitCode::contract);
  } catch (const std::exception& e) {
    run.log->error(e.what());
    return 1;
  }
}
