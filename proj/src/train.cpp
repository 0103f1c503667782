#include "mabn/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace mabn {

void TrainConfig::validate() const {
  if (norm_batch == 0 || gradient_batch == 0)
    throw std::invalid_argument("train config: batch sizes must be positive");
  if (gradient_batch % norm_batch != 0)
    throw std::invalid_argument(
        "train config: gradient batch " + std::to_string(gradient_batch) +
        " not divisible by normalization batch " + std::to_string(norm_batch));
  for (std::size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1])
      throw std::invalid_argument("train config: milestones must be strictly increasing");
  norm.validate();
}

double TrainConfig::lr_at(std::size_t iter) const {
  double lr = base_lr;
  for (std::size_t m : milestones)
    if (iter >= m) lr *= decay_factor;
  return lr;
}

std::pair<Dataset, Dataset> synth_dataset(std::uint64_t seed,
                                          std::size_t n_train,
                                          std::size_t n_val, double noise) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr std::size_t kClasses = 10, kCode = 16, kHidden = 64, kPix = 256;

  std::vector<double> codes(kClasses * kCode);
  for (auto& v : codes) v = gauss(rng);
  std::vector<double> w1(kHidden * kCode), w2(kPix * kHidden);
  for (auto& v : w1) v = gauss(rng) / std::sqrt(static_cast<double>(kCode));
  for (auto& v : w2) v = gauss(rng) / std::sqrt(static_cast<double>(kHidden));

  auto fill = [&](std::size_t n) {
    Dataset d;
    d.images = TensorF({n, 1, 16, 16});
    d.labels.resize(n);
    std::vector<double> z(kCode), h(kHidden);
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % kClasses);
      d.labels[i] = label;
      for (std::size_t k = 0; k < kCode; ++k)
        z[k] = codes[label * kCode + k] + noise * gauss(rng);
      for (std::size_t j = 0; j < kHidden; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < kCode; ++k) acc += w1[j * kCode + k] * z[k];
        h[j] = std::tanh(acc);
      }
      float* img = d.images.data() + i * kPix;
      for (std::size_t p = 0; p < kPix; ++p) {
        double acc = 0.0;
        for (std::size_t j = 0; j < kHidden; ++j)
          acc += w2[p * kHidden + j] * h[j];
        img[p] = static_cast<float>(std::tanh(2.0 * acc));
      }
    }
    return d;
  };
  Dataset train = fill(n_train);
  Dataset val = fill(n_val);
  return {std::move(train), std::move(val)};
}

void sgd_step(std::vector<float>& param, const std::vector<float>& grad,
              std::vector<float>& velocity, float lr, float momentum,
              float weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size())
    throw std::invalid_argument("sgd: size mismatch");
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

namespace {

TensorF he_conv_init(std::size_t co, std::size_t ci, std::size_t k,
                     std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(ci * k * k);
  return TensorF::randn({co, ci, k, k}, rng,
                        static_cast<float>(std::sqrt(2.0 / fan_in)));
}

}  // namespace

ConvNet::ConvNet(const NormVariantConfig& norm_cfg, bool centralize_weights,
                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t channels[kBlocks + 1] = {1, 16, 32, 32, 64};
  const std::size_t strides[kBlocks] = {1, 2, 2, 2};
  for (std::size_t i = 0; i < kBlocks; ++i) {
    conv[i] = Conv2d<float>(he_conv_init(channels[i + 1], channels[i], 3, rng),
                            strides[i], 1, centralize_weights);
    norm[i] = NormLayer<float>(channels[i + 1], norm_cfg);
  }
  // 64 channels at 2x2 after three stride-2 blocks.
  const std::size_t feat = 64 * 2 * 2;
  TensorF wfc = TensorF::randn({10, feat}, rng,
                               static_cast<float>(std::sqrt(1.0 / feat)));
  fc = Affine<float>(std::move(wfc), std::vector<float>(10, 0.0f));
}

float ConvNet::train_group(const TensorF& x, const std::vector<int>& labels,
                           float grad_scale, StatTrace* trace,
                           std::size_t iteration) {
  TensorF h = x;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    h = conv[i].forward(h);
    h = norm[i].forward(h);
    h = relu_[i].forward(h);
  }
  const std::size_t B = h.dim(0);
  TensorF flat({B, h.numel() / B}, h.vec());
  TensorF logits = fc.forward(flat);
  auto [loss, dlogits] = softmax_cross_entropy(logits, labels);

  if (grad_scale != 1.0f)
    for (auto& v : dlogits.vec()) v *= grad_scale;
  TensorF dflat = fc.backward(dlogits);
  TensorF dh(h.shape(), dflat.vec());
  for (std::size_t i = kBlocks; i-- > 0;) {
    dh = relu_[i].backward(dh);
    dh = norm[i].backward(dh);
    dh = conv[i].backward(dh);
  }

  if (trace) {
    for (std::size_t i = 0; i < kBlocks; ++i) {
      const std::string layer = "norm" + std::to_string(i);
      trace->record(iteration, layer, "mu", norm[i].last_mu());
      trace->record(iteration, layer, "sigma2", norm[i].last_var());
      trace->record(iteration, layer, "chi2", norm[i].last_chi2());
      trace->record(iteration, layer, "g", norm[i].last_g());
      trace->record(iteration, layer, "psi", norm[i].last_psi());
    }
  }
  return loss;
}

std::vector<int> ConvNet::predict(const TensorF& x) {
  TensorF h = x;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    h = conv[i].forward(h);
    h = norm[i].infer(h);
    for (auto& v : h.vec()) v = std::max(v, 0.0f);
  }
  const std::size_t B = h.dim(0);
  TensorF flat({B, h.numel() / B}, h.vec());
  TensorF logits = fc.forward(flat);
  std::vector<int> pred(B);
  const std::size_t C = logits.dim(1);
  for (std::size_t i = 0; i < B; ++i) {
    const float* row = logits.data() + i * C;
    pred[i] = static_cast<int>(std::max_element(row, row + C) - row);
  }
  return pred;
}

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::tie(train_, val_) =
      synth_dataset(cfg_.seed * 0x9E3779B97F4A7C15ull + 1, cfg_.n_train,
                    cfg_.n_val, cfg_.data_noise);
  const bool wc = cfg_.centralize_weights.value_or(cfg_.norm.form ==
                                                   NormForm::modified);
  net_ = std::make_unique<ConvNet>(cfg_.norm, wc, cfg_.seed);
  rng_.seed(cfg_.seed * 0x9E3779B97F4A7C15ull + 3);
  report_.paper_reported_divergent = cfg_.norm.paper_reported_divergent();

  velocity_.clear();
  for (const auto& p : params()) {
    (void)p;
    velocity_.emplace_back();
  }
  auto ps = params();
  for (std::size_t i = 0; i < ps.size(); ++i)
    velocity_[i].assign(ps[i].param->size(), 0.0f);
}

std::vector<Trainer::ParamRef> Trainer::params() {
  std::vector<ParamRef> out;
  std::size_t vi = 0;
  auto add = [&](const std::string& name, std::vector<float>* p, bool decay) {
    std::vector<float>* vel =
        (vi < velocity_.size()) ? &velocity_[vi] : nullptr;
    out.push_back({name, p, vel, decay});
    ++vi;
  };
  for (std::size_t i = 0; i < ConvNet::kBlocks; ++i) {
    add("conv" + std::to_string(i) + ".w", &net_->conv[i].w.vec(), true);
    add("norm" + std::to_string(i) + ".gamma", &net_->norm[i].gamma, true);
    add("norm" + std::to_string(i) + ".beta", &net_->norm[i].beta, true);
  }
  add("fc.w", &net_->fc.w.vec(), true);
  add("fc.b", &net_->fc.b, false);
  return out;
}

void Trainer::step_once() {
  const std::size_t Bg = cfg_.gradient_batch;
  const std::size_t nb = cfg_.norm_batch;
  const std::size_t groups = Bg / nb;

  // Sample a gradient batch, contiguous normalization groups.
  std::uniform_int_distribution<std::size_t> pick(0, train_.size() - 1);
  std::vector<std::size_t> idx(Bg);
  for (auto& v : idx) v = pick(rng_);

  auto ps = params();
  std::vector<std::vector<float>> grad(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i)
    grad[i].assign(ps[i].param->size(), 0.0f);

  const float scale = 1.0f / static_cast<float>(groups);
  double loss_sum = 0.0;
  bool finite = true;
  for (std::size_t g = 0; g < groups; ++g) {
    TensorF x({nb, 1, 16, 16});
    std::vector<int> labels(nb);
    for (std::size_t s = 0; s < nb; ++s) {
      const std::size_t src = idx[g * nb + s];
      std::copy(train_.images.data() + src * 256,
                train_.images.data() + (src + 1) * 256, x.data() + s * 256);
      labels[s] = train_.labels[src];
    }
    StatTrace* trace = (g == 0) ? &report_.trace : nullptr;
    float loss;
    try {
      loss = net_->train_group(x, labels, scale, trace, iter_);
    } catch (const std::exception&) {
      finite = false;
      break;
    }
    if (!std::isfinite(loss)) {
      finite = false;
      break;
    }
    loss_sum += loss * scale;

    std::size_t pi = 0;
    for (std::size_t i = 0; i < ConvNet::kBlocks; ++i) {
      auto& gw = grad[pi++];
      for (std::size_t k = 0; k < gw.size(); ++k)
        gw[k] += net_->conv[i].dw.vec()[k];
      auto& gg = grad[pi++];
      for (std::size_t k = 0; k < gg.size(); ++k)
        gg[k] += net_->norm[i].dgamma[k];
      auto& gb = grad[pi++];
      for (std::size_t k = 0; k < gb.size(); ++k)
        gb[k] += net_->norm[i].dbeta[k];
    }
    auto& gw = grad[pi++];
    for (std::size_t k = 0; k < gw.size(); ++k)
      gw[k] += net_->fc.dw.vec()[k];
    auto& gb = grad[pi++];
    for (std::size_t k = 0; k < gb.size(); ++k) gb[k] += net_->fc.db[k];
  }

  if (finite)
    for (const auto& gv : grad)
      for (float v : gv)
        if (!std::isfinite(v)) {
          finite = false;
          break;
        }

  if (!finite) {
    // Step skipped; a non-finite loss/gradient marks the run as diverged.
    report_.diverged = true;
    report_.loss.push_back(std::numeric_limits<double>::quiet_NaN());
    ++iter_;
    return;
  }

  const float lr = static_cast<float>(cfg_.lr_at(iter_));
  const float mom = static_cast<float>(cfg_.sgd_momentum);
  const float wd = static_cast<float>(cfg_.weight_decay);
  for (std::size_t i = 0; i < ps.size(); ++i)
    sgd_step(*ps[i].param, grad[i], *ps[i].velocity, lr, mom,
             ps[i].decay ? wd : 0.0f);

  report_.loss.push_back(loss_sum);
  ++iter_;

  if (cfg_.eval_interval > 0 && iter_ % cfg_.eval_interval == 0) {
    const double tr = evaluate_split(train_, 512);
    const double va = evaluate_split(val_, 0);
    report_.evals.push_back({iter_, tr, va});
  }
}

void Trainer::run(std::size_t n) {
  for (std::size_t i = 0; i < n && !report_.diverged; ++i) step_once();
}

double Trainer::evaluate_split(const Dataset& data, std::size_t limit) {
  const std::size_t n = (limit && limit < data.size()) ? limit : data.size();
  if (n == 0) throw std::invalid_argument("evaluate: empty dataset");
  std::size_t wrong = 0;
  const std::size_t chunk = 64;
  for (std::size_t off = 0; off < n; off += chunk) {
    const std::size_t b = std::min(chunk, n - off);
    TensorF x({b, 1, 16, 16});
    std::copy(data.images.data() + off * 256, data.images.data() + (off + b) * 256,
              x.data());
    const std::vector<int> pred = net_->predict(x);
    for (std::size_t i = 0; i < b; ++i)
      if (pred[i] != data.labels[off + i]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(n);
}

void Trainer::finish() {
  if (report_.diverged) {
    report_.final_val_error = 1.0;
    return;
  }
  report_.final_val_error = evaluate_split(val_, 0);
  if (report_.evals.empty() || report_.evals.back().iteration != iter_) {
    const double tr = evaluate_split(train_, 512);
    report_.evals.push_back({iter_, tr, report_.final_val_error});
  }
}

std::string Trainer::rng_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void Trainer::set_rng_state(const std::string& s) {
  std::istringstream is(s);
  is >> rng_;
  if (is.fail()) throw std::invalid_argument("trainer: bad rng state");
}

RunReport train(const TrainConfig& cfg) {
  Trainer t(cfg);
  if (cfg.iterations == 0) {
    // No-op run: initial evaluation only.
    const double va = t.evaluate_split(t.val_data(), 0);
    t.report().final_val_error = va;
    t.report().evals.push_back({0, t.evaluate_split(t.train_data(), 512), va});
    return t.report();
  }
  t.run_all();
  t.finish();
  return t.report();
}

}  // namespace mabn
