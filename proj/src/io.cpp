#include "mabn/io.hpp"

#include <bit>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mabn {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::string& section,
                    std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw std::invalid_argument("config: section '" + section +
                                "' must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw std::invalid_argument("config: unknown key '" + item.key() +
                                  "' in section '" + section + "'");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

NormForm parse_form(const std::string& s) {
  if (s == "vanilla") return NormForm::vanilla;
  if (s == "modified") return NormForm::modified;
  throw std::invalid_argument("config: bad normalization form '" + s + "'");
}

StatSource parse_source(const std::string& s) {
  if (s == "batch") return StatSource::batch;
  if (s == "ema") return StatSource::ema;
  if (s == "sma") return StatSource::sma;
  throw std::invalid_argument("config: bad statistic source '" + s + "'");
}

NormVariantConfig parse_norm(const json& j) {
  reject_unknown(j, "norm",
                 {"preset", "form", "fp_source", "bp_source", "momentum",
                  "sma_capacity", "clip_lambda", "brn_d_max", "warmup_iters",
                  "epsilon", "affine"});
  NormVariantConfig c = NormVariantConfig::bn();
  if (j.contains("preset")) {
    const std::string p = j.at("preset").get<std::string>();
    if (p == "bn")
      c = NormVariantConfig::bn();
    else if (p == "brn")
      c = NormVariantConfig::brn();
    else if (p == "mabn")
      c = NormVariantConfig::mabn();
    else
      throw std::invalid_argument("config: unknown preset '" + p + "'");
  }
  if (j.contains("form")) c.form = parse_form(j.at("form").get<std::string>());
  if (j.contains("fp_source"))
    c.fp_source = parse_source(j.at("fp_source").get<std::string>());
  if (j.contains("bp_source"))
    c.bp_source = parse_source(j.at("bp_source").get<std::string>());
  read_field(j, "momentum", c.momentum);
  read_field(j, "sma_capacity", c.sma_capacity);
  read_field(j, "clip_lambda", c.clip_lambda);
  read_field(j, "brn_d_max", c.brn_d_max);
  read_field(j, "warmup_iters", c.warmup_iters);
  read_field(j, "epsilon", c.epsilon);
  read_field(j, "affine", c.affine);
  c.validate();
  return c;
}

void parse_train(const json& j, TrainConfig& c) {
  reject_unknown(j, "train",
                 {"gradient_batch", "norm_batch", "iterations", "base_lr",
                  "milestones", "decay_factor", "sgd_momentum", "weight_decay",
                  "seed", "n_train", "n_val", "eval_interval", "data_noise",
                  "centralize_weights"});
  read_field(j, "gradient_batch", c.gradient_batch);
  read_field(j, "norm_batch", c.norm_batch);
  read_field(j, "iterations", c.iterations);
  read_field(j, "base_lr", c.base_lr);
  read_field(j, "milestones", c.milestones);
  read_field(j, "decay_factor", c.decay_factor);
  read_field(j, "sgd_momentum", c.sgd_momentum);
  read_field(j, "weight_decay", c.weight_decay);
  read_field(j, "seed", c.seed);
  read_field(j, "n_train", c.n_train);
  read_field(j, "n_val", c.n_val);
  read_field(j, "eval_interval", c.eval_interval);
  read_field(j, "data_noise", c.data_noise);
  if (j.contains("centralize_weights"))
    c.centralize_weights = j.at("centralize_weights").get<bool>();
}

void parse_bench(const json& j, BenchConfig& c) {
  reject_unknown(j, "bench",
                 {"warmup_reps", "timed_reps", "iters_per_rep", "height",
                  "width", "batch", "layers", "seed"});
  read_field(j, "warmup_reps", c.warmup_reps);
  read_field(j, "timed_reps", c.timed_reps);
  read_field(j, "iters_per_rep", c.iters_per_rep);
  read_field(j, "height", c.height);
  read_field(j, "width", c.width);
  read_field(j, "batch", c.batch);
  read_field(j, "layers", c.layers);
  read_field(j, "seed", c.seed);
}

void parse_theorem(const json& j, McConfig& c, std::string& which) {
  reject_unknown(j, "theorem",
                 {"which", "trials", "horizon", "alpha", "window", "drift",
                  "truncation", "batch", "tolerance", "seed"});
  read_field(j, "which", which);
  read_field(j, "trials", c.trials);
  read_field(j, "horizon", c.horizon);
  read_field(j, "alpha", c.alpha);
  read_field(j, "window", c.window);
  read_field(j, "drift", c.drift);
  read_field(j, "truncation", c.truncation);
  read_field(j, "batch", c.batch);
  read_field(j, "tolerance", c.tolerance);
  read_field(j, "seed", c.seed);
}

std::vector<std::uint32_t> float_bits(const std::vector<float>& v) {
  std::vector<std::uint32_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = std::bit_cast<std::uint32_t>(v[i]);
  return out;
}

std::vector<float> bits_float(const std::vector<std::uint32_t>& v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = std::bit_cast<float>(v[i]);
  return out;
}

json sma_json(const SmaBuffer<float>& b) {
  return json{{"ring", float_bits(b.raw())}, {"head", b.head()},
              {"fill", b.fill()}};
}

void sma_restore(SmaBuffer<float>& b, const json& j) {
  b.restore(bits_float(j.at("ring").get<std::vector<std::uint32_t>>()),
            j.at("head").get<std::size_t>(), j.at("fill").get<std::size_t>());
}

}  // namespace

RunConfig parse_config(const json& j) {
  reject_unknown(j, "<root>", {"format_version", "norm", "train", "bench",
                               "theorem"});
  if (j.contains("format_version") &&
      j.at("format_version").get<int>() != kFormatVersion)
    throw std::invalid_argument("config: unsupported format_version");
  RunConfig cfg;
  if (j.contains("norm")) cfg.norm = parse_norm(j.at("norm"));
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("bench")) parse_bench(j.at("bench"), cfg.bench);
  if (j.contains("theorem"))
    parse_theorem(j.at("theorem"), cfg.theorem, cfg.theorem_which);
  cfg.train.norm = cfg.norm;
  cfg.train.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  in >> j;
  return parse_config(j);
}

nlohmann::json norm_config_json(const NormVariantConfig& c) {
  return json{{"form", to_string(c.form)},
              {"fp_source", to_string(c.fp_source)},
              {"bp_source", to_string(c.bp_source)},
              {"momentum", c.momentum},
              {"sma_capacity", c.sma_capacity},
              {"clip_lambda", c.clip_lambda},
              {"brn_d_max", c.brn_d_max},
              {"warmup_iters", c.warmup_iters},
              {"epsilon", c.epsilon},
              {"affine", c.affine}};
}

void write_trace(const StatTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trace " + path.string());
  out << "iter,layer,stat,l2norm\n";
  std::ostringstream os;
  os.precision(17);
  for (const auto& r : trace.records) {
    os.str("");
    os << r.iteration << ',' << r.layer << ',' << r.stat << ',' << r.l2norm
       << '\n';
    out << os.str();
  }
  if (!out) throw std::runtime_error("trace write failed: " + path.string());
}

StatTrace read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read trace " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "iter,layer,stat,l2norm")
    throw std::runtime_error("bad trace header in " + path.string());
  StatTrace trace;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    StatTrace::Record r;
    std::string field;
    std::getline(ls, field, ',');
    r.iteration = std::stoull(field);
    std::getline(ls, r.layer, ',');
    std::getline(ls, r.stat, ',');
    std::getline(ls, field, ',');
    r.l2norm = std::stod(field);
    trace.records.push_back(std::move(r));
  }
  return trace;
}

void write_run_report_csv(const RunReport& report,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << "iter,loss,train_err,val_err\n";
  out.precision(17);
  std::size_t e = 0;
  for (std::size_t i = 0; i < report.loss.size(); ++i) {
    const std::size_t iter = i + 1;
    out << iter << ',' << report.loss[i] << ',';
    if (e < report.evals.size() && report.evals[e].iteration == iter) {
      out << report.evals[e].train_error << ',' << report.evals[e].val_error;
      ++e;
    } else {
      out << ',';
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("report write failed: " + path.string());
}

nlohmann::json theorem_report_json(const TheoremReport& rep) {
  return json{{"format_version", kFormatVersion}, {"theorem", rep.theorem},
              {"empirical", rep.empirical},      {"predicted", rep.predicted},
              {"rel_dev", rep.rel_dev},          {"pass", rep.pass}};
}

nlohmann::json bench_report_json(const BenchReport& rep) {
  return json{{"format_version", kFormatVersion},
              {"label", rep.label},
              {"iters_per_sec", rep.iters_per_sec},
              {"wall_time_sec", rep.wall_time_sec},
              {"reps", rep.reps},
              {"input_shape", rep.input_shape}};
}

nlohmann::json run_summary_json(const RunReport& report, std::uint64_t seed) {
  json evals = json::array();
  for (const auto& e : report.evals)
    evals.push_back(json{{"iter", e.iteration},
                         {"train_err", e.train_error},
                         {"val_err", e.val_error}});
  return json{{"format_version", kFormatVersion},
              {"seed", seed},
              {"iterations", report.loss.size()},
              {"final_val_error", report.final_val_error},
              {"diverged", report.diverged},
              {"paper_reported_divergent", report.paper_reported_divergent},
              {"evals", evals}};
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json save_checkpoint(Trainer& trainer) {
  json params = json::object();
  json velocity = json::object();
  for (const auto& p : trainer.params()) {
    params[p.name] = float_bits(*p.param);
    velocity[p.name] = float_bits(*p.velocity);
  }
  json norms = json::array();
  auto& net = trainer.model();
  for (std::size_t i = 0; i < ConvNet::kBlocks; ++i) {
    auto& n = net.norm[i];
    norms.push_back(json{{"iteration", n.iteration()},
                         {"mu_ema", float_bits(n.mu_ema().value())},
                         {"var_ema", float_bits(n.var_ema().value())},
                         {"chi2_ema", float_bits(n.chi2_ema().value())},
                         {"g_ema", float_bits(n.g_ema().value())},
                         {"psi_ema", float_bits(n.psi_ema().value())},
                         {"mu_sma", sma_json(n.mu_sma())},
                         {"var_sma", sma_json(n.var_sma())},
                         {"chi2_sma", sma_json(n.chi2_sma())},
                         {"g_sma", sma_json(n.g_sma())},
                         {"psi_sma", sma_json(n.psi_sma())}});
  }
  return json{{"format_version", kFormatVersion},
              {"iteration", trainer.iteration()},
              {"rng", trainer.rng_state()},
              {"diverged", trainer.report().diverged},
              {"params", params},
              {"velocity", velocity},
              {"norm_state", norms}};
}

void load_checkpoint(Trainer& trainer, const nlohmann::json& ckpt) {
  if (ckpt.at("format_version").get<int>() != kFormatVersion)
    throw std::invalid_argument("checkpoint: unsupported format_version");
  for (auto& p : trainer.params()) {
    *p.param = bits_float(
        ckpt.at("params").at(p.name).get<std::vector<std::uint32_t>>());
    *p.velocity = bits_float(
        ckpt.at("velocity").at(p.name).get<std::vector<std::uint32_t>>());
  }
  auto& net = trainer.model();
  const json& norms = ckpt.at("norm_state");
  for (std::size_t i = 0; i < ConvNet::kBlocks; ++i) {
    auto& n = net.norm[i];
    const json& s = norms.at(i);
    n.set_iteration(s.at("iteration").get<std::size_t>());
    n.mu_ema().value() =
        bits_float(s.at("mu_ema").get<std::vector<std::uint32_t>>());
    n.var_ema().value() =
        bits_float(s.at("var_ema").get<std::vector<std::uint32_t>>());
    n.chi2_ema().value() =
        bits_float(s.at("chi2_ema").get<std::vector<std::uint32_t>>());
    n.g_ema().value() =
        bits_float(s.at("g_ema").get<std::vector<std::uint32_t>>());
    n.psi_ema().value() =
        bits_float(s.at("psi_ema").get<std::vector<std::uint32_t>>());
    sma_restore(n.mu_sma(), s.at("mu_sma"));
    sma_restore(n.var_sma(), s.at("var_sma"));
    sma_restore(n.chi2_sma(), s.at("chi2_sma"));
    sma_restore(n.g_sma(), s.at("g_sma"));
    sma_restore(n.psi_sma(), s.at("psi_sma"));
  }
  trainer.set_iteration(ckpt.at("iteration").get<std::size_t>());
  trainer.set_rng_state(ckpt.at("rng").get<std::string>());
  trainer.report().diverged = ckpt.at("diverged").get<bool>();
}

}  // namespace mabn
