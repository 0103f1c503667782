#include "mabn/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

#include "mabn/gradcheck.hpp"
#include "mabn/layers.hpp"

namespace mabn {

namespace fs = std::filesystem;
using nlohmann::json;

TensorF ConvNormStack::forward_unfolded(const TensorF& x) {
  TensorF h = x;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    h = convs[i].forward(h);
    const std::size_t C = h.dim(1), S = h.dim(2) * h.dim(3);
    for (std::size_t n = 0; n < h.dim(0); ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const float s = static_cast<float>(norms[i].scale[c]);
        const float b = static_cast<float>(norms[i].shift[c]);
        float* row = h.data() + (n * C + c) * S;
        for (std::size_t p = 0; p < S; ++p) row[p] = s * row[p] + b;
      }
  }
  return h;
}

TensorF ConvNormStack::forward_instance(const TensorF& x) {
  TensorF h = x;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    h = convs[i].forward(h);
    h = instance_norm_inference(h, h.dim(1), gamma[i], beta[i]);
  }
  return h;
}

std::vector<Conv2d<float>> ConvNormStack::folded() const {
  std::vector<Conv2d<float>> out;
  out.reserve(convs.size());
  for (std::size_t i = 0; i < convs.size(); ++i)
    out.push_back(fold(convs[i], norms[i]));
  return out;
}

TensorF ConvNormStack::forward_folded(std::vector<Conv2d<float>>& convs,
                                      const TensorF& x) {
  TensorF h = x;
  for (auto& c : convs) h = c.forward(h);
  return h;
}

ConvNormStack make_conv_norm_stack(const BenchConfig& cfg, std::size_t kernel) {
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.5, 1.5);
  ConvNormStack stack;
  std::size_t ci = stack.in_channels;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t co = 64;
    const double scale = std::sqrt(1.0 / static_cast<double>(ci * kernel * kernel));
    TensorF w = TensorF::randn({co, ci, kernel, kernel}, rng,
                               static_cast<float>(scale));
    stack.convs.emplace_back(std::move(w), 1, kernel / 2);
    InferenceTransform t;
    t.scale.resize(co);
    t.shift.resize(co);
    std::vector<float> g(co), b(co);
    for (std::size_t c = 0; c < co; ++c) {
      t.scale[c] = unif(rng);
      t.shift[c] = 0.1 * gauss(rng);
      g[c] = static_cast<float>(unif(rng));
      b[c] = static_cast<float>(0.1 * gauss(rng));
    }
    stack.norms.push_back(std::move(t));
    stack.gamma.push_back(std::move(g));
    stack.beta.push_back(std::move(b));
    ci = co;
  }
  return stack;
}

fs::path resolve_out_dir(const std::string& flag_value) {
  fs::path dir;
  if (!flag_value.empty()) {
    dir = flag_value;
  } else if (const char* env = std::getenv("MABN_OUT_DIR")) {
    dir = env;
  } else {
    dir = "out";
  }
  fs::create_directories(dir);
  return dir;
}

namespace {

void write_run_artifacts(const RunReport& report, std::uint64_t seed,
                         const fs::path& dir) {
  fs::create_directories(dir);
  write_run_report_csv(report, dir / "report.csv");
  write_trace(report.trace, dir / "trace.csv");
  write_json(run_summary_json(report, seed), dir / "summary.json");
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

int cmd_train(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
              const fs::path& out_dir, const fs::path& resume_from,
              const fs::path& stop_checkpoint, std::size_t stop_at) {
  std::vector<std::uint64_t> seed_list = seeds;
  if (seed_list.empty()) seed_list.push_back(cfg.train.seed);

  std::vector<double> finals;
  for (std::uint64_t seed : seed_list) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    Trainer trainer(tc);
    if (!resume_from.empty()) {
      std::ifstream in(resume_from);
      if (!in)
        throw std::runtime_error("cannot open checkpoint " +
                                 resume_from.string());
      json ckpt;
      in >> ckpt;
      load_checkpoint(trainer, ckpt);
    }
    const std::size_t target =
        (stop_at > 0) ? std::min(stop_at, tc.iterations) : tc.iterations;
    if (target > trainer.iteration())
      trainer.run(target - trainer.iteration());
    trainer.finish();

    const fs::path dir =
        (seed_list.size() > 1) ? out_dir / ("seed_" + std::to_string(seed))
                               : out_dir;
    write_run_artifacts(trainer.report(), seed, dir);
    write_json(save_checkpoint(trainer),
               stop_checkpoint.empty() ? dir / "checkpoint.json"
                                       : stop_checkpoint);
    finals.push_back(trainer.report().final_val_error);
    std::cout << "seed " << seed << ": final val error "
              << trainer.report().final_val_error
              << (trainer.report().diverged ? " (diverged)" : "") << "\n";
  }
  if (seed_list.size() > 1) {
    write_json(json{{"format_version", kFormatVersion},
                    {"seeds", seed_list},
                    {"median_final_val_error", median(finals)}},
               out_dir / "summary_median.json");
  }
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const fs::path& checkpoint,
                 const fs::path& out_dir) {
  Trainer trainer(cfg.train);
  std::ifstream in(checkpoint);
  if (!in)
    throw std::runtime_error("cannot open checkpoint " + checkpoint.string());
  json ckpt;
  in >> ckpt;
  load_checkpoint(trainer, ckpt);
  const double err = trainer.evaluate_split(trainer.val_data(), 0);
  write_json(json{{"format_version", kFormatVersion},
                  {"iteration", trainer.iteration()},
                  {"val_error", err}},
             out_dir / "evaluation.json");
  std::cout << "val error " << err << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& layer, std::size_t batch,
                  std::size_t channels, std::uint64_t seed, double& max_err) {
  std::mt19937_64 rng(seed);
  max_err = 0.0;

  if (layer == "bn" || layer == "modified") {
    NormVariantConfig nc = layer == "bn" ? NormVariantConfig::bn()
                                         : NormVariantConfig::mabn();
    nc.form = layer == "bn" ? NormForm::vanilla : NormForm::modified;
    nc.fp_source = StatSource::batch;
    nc.bp_source = StatSource::batch;
    nc.epsilon = 0.0;
    nc.warmup_iters = 0;
    TensorD x = TensorD::randn({batch, channels}, rng);
    TensorD w = TensorD::randn({batch, channels}, rng);
    auto loss = [&](const TensorD& in) {
      NormLayerD probe(channels, nc);
      TensorD z = probe.forward(in);
      double acc = 0.0;
      for (std::size_t i = 0; i < z.numel(); ++i) acc += w[i] * z[i];
      return acc;
    };
    NormLayerD n(channels, nc);
    n.forward(x);
    TensorD analytic = n.backward(w);
    max_err = gradcheck(loss, x, analytic);
  } else if (layer == "conv") {
    TensorD x = TensorD::randn({batch, channels, 5, 5}, rng);
    TensorD kw = TensorD::randn({4, channels, 3, 3}, rng);
    TensorD g = TensorD::randn({batch, 4, 5, 5}, rng);
    auto loss = [&](const TensorD& in) {
      Conv2d<double> conv(kw, 1, 1);
      TensorD y = conv.forward(in);
      double acc = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) acc += g[i] * y[i];
      return acc;
    };
    Conv2d<double> conv(kw, 1, 1);
    conv.forward(x);
    TensorD analytic = conv.backward(g);
    max_err = gradcheck(loss, x, analytic);
  } else if (layer == "affine") {
    TensorD x = TensorD::randn({batch, channels}, rng);
    TensorD w = TensorD::randn({4, channels}, rng);
    std::vector<double> b(4, 0.1);
    TensorD g = TensorD::randn({batch, 4}, rng);
    auto loss = [&](const TensorD& in) {
      Affine<double> aff(w, b);
      TensorD y = aff.forward(in);
      double acc = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) acc += g[i] * y[i];
      return acc;
    };
    Affine<double> aff(w, b);
    aff.forward(x);
    TensorD analytic = aff.backward(g);
    max_err = gradcheck(loss, x, analytic);
  } else if (layer == "relu") {
    TensorD x = TensorD::randn({batch, channels}, rng);
    for (auto& v : x.vec())
      if (std::abs(v) < 1e-3) v = 0.5;  // keep off the kink
    TensorD g = TensorD::randn({batch, channels}, rng);
    auto loss = [&](const TensorD& in) {
      Relu<double> r;
      TensorD y = r.forward(in);
      double acc = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) acc += g[i] * y[i];
      return acc;
    };
    Relu<double> r;
    r.forward(x);
    TensorD analytic = r.backward(g);
    max_err = gradcheck(loss, x, analytic);
  } else if (layer == "softmax") {
    TensorD x = TensorD::randn({batch, channels}, rng);
    std::vector<int> labels(batch);
    for (std::size_t i = 0; i < batch; ++i)
      labels[i] = static_cast<int>(i % channels);
    auto loss = [&](const TensorD& in) {
      return softmax_cross_entropy(in, labels).first;
    };
    TensorD analytic = softmax_cross_entropy(x, labels).second;
    max_err = gradcheck(loss, x, analytic);
  } else {
    throw std::invalid_argument("gradcheck: unknown layer '" + layer + "'");
  }
  return max_err < 1e-6 ? 0 : 1;
}

int cmd_verify_theorem(const RunConfig& cfg, const fs::path& out_dir) {
  TheoremReport rep;
  if (cfg.theorem_which == "ema")
    rep = verify_ema_variance(cfg.theorem);
  else if (cfg.theorem_which == "sma")
    rep = verify_sma_variance(cfg.theorem);
  else if (cfg.theorem_which == "gap")
    rep = verify_variance_gap(cfg.theorem);
  else
    throw std::invalid_argument("verify-theorem: unknown check '" +
                                cfg.theorem_which + "'");
  const json j = theorem_report_json(rep);
  write_json(j, out_dir / ("theorem_" + rep.theorem + ".json"));
  std::cout << j.dump(2) << "\n";
  return rep.pass ? 0 : 1;
}

int cmd_bench(const RunConfig& cfg, const fs::path& out_dir) {
  ConvNormStack stack = make_conv_norm_stack(cfg.bench);
  auto folded = stack.folded();
  const std::vector<std::size_t> shape{cfg.bench.batch, stack.in_channels,
                                       cfg.bench.height, cfg.bench.width};
  std::mt19937_64 rng(cfg.bench.seed + 1);
  TensorF x = TensorF::randn(shape, rng);

  const BenchReport r_folded =
      bench("folded", [&] { ConvNormStack::forward_folded(folded, x); }, shape,
            cfg.bench.warmup_reps, cfg.bench.timed_reps,
            cfg.bench.iters_per_rep);
  const BenchReport r_unfolded =
      bench("unfolded", [&] { stack.forward_unfolded(x); }, shape,
            cfg.bench.warmup_reps, cfg.bench.timed_reps,
            cfg.bench.iters_per_rep);
  const BenchReport r_instance =
      bench("instance_norm", [&] { stack.forward_instance(x); }, shape,
            cfg.bench.warmup_reps, cfg.bench.timed_reps,
            cfg.bench.iters_per_rep);

  json all = json::array(
      {bench_report_json(r_folded), bench_report_json(r_unfolded),
       bench_report_json(r_instance)});
  write_json(all, out_dir / "bench.json");
  std::cout << all.dump(2) << "\n";
  return 0;
}

int cmd_stats_trace(const RunConfig& cfg, const fs::path& out_dir) {
  RunReport report = train(cfg.train);
  write_trace(report.trace, out_dir / "trace.csv");
  std::cout << "wrote " << report.trace.records.size() << " trace records\n";
  return 0;
}

int cmd_fold_check(const RunConfig& cfg, const fs::path& out_dir) {
  BenchConfig bc = cfg.bench;
  ConvNormStack stack = make_conv_norm_stack(bc, 3);
  auto folded = stack.folded();
  std::mt19937_64 rng(bc.seed + 2);
  std::uniform_real_distribution<float> unif(-1.0f, 1.0f);
  TensorF x({bc.batch, stack.in_channels, bc.height, bc.width});
  for (auto& v : x.vec()) v = unif(rng);

  const TensorF ref = stack.forward_unfolded(x);
  const TensorF got = ConvNormStack::forward_folded(folded, x);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < ref.numel(); ++i)
    max_diff = std::max(max_diff,
                        std::abs(static_cast<double>(ref[i]) - got[i]));
  const bool ok = max_diff < 1e-4;
  write_json(json{{"format_version", kFormatVersion},
                  {"layers", bc.layers},
                  {"max_abs_diff", max_diff},
                  {"pass", ok}},
             out_dir / "fold.json");
  std::cout << "fold max abs diff " << max_diff << "\n";
  return ok ? 0 : 1;
}

}  // namespace mabn
