#ifndef MABN_TRAIN_HPP_
#define MABN_TRAIN_HPP_

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mabn/layers.hpp"
#include "mabn/norm.hpp"
#include "mabn/stats.hpp"
#include "mabn/tensor.hpp"

namespace mabn {

struct TrainConfig {
  std::size_t gradient_batch = 32;   // B_g, samples per weight update
  std::size_t norm_batch = 32;       // |B|, samples per statistics group
  std::size_t iterations = 6000;
  double base_lr = 0.05;
  std::vector<std::size_t> milestones{3000, 4500};
  double decay_factor = 0.1;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  std::size_t n_train = 4096;
  std::size_t n_val = 1024;
  std::size_t eval_interval = 1000;
  double data_noise = 1.0;
  NormVariantConfig norm = NormVariantConfig::bn();
  // Defaults to on for the modified normalization form, off otherwise.
  std::optional<bool> centralize_weights;

  void validate() const;
  double lr_at(std::size_t iter) const;
};

struct EvalPoint {
  std::size_t iteration;
  double train_error;
  double val_error;
};

struct RunReport {
  std::vector<double> loss;  // one entry per iteration
  std::vector<EvalPoint> evals;
  double final_val_error = 1.0;
  bool diverged = false;
  bool paper_reported_divergent = false;
  StatTrace trace;
};

struct Dataset {
  TensorF images;  // [N,1,16,16]
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

// 10-class class-conditional Gaussian codes pushed through a fixed random
// two-layer tanh map into 1x16x16 images. Train and validation share the
// codes and the map; only the per-sample noise differs. Deterministic given
// the seed.
std::pair<Dataset, Dataset> synth_dataset(std::uint64_t seed,
                                          std::size_t n_train,
                                          std::size_t n_val,
                                          double noise = 1.0);

// v <- momentum * v + grad + wd * param; param <- param - lr * v
void sgd_step(std::vector<float>& param, const std::vector<float>& grad,
              std::vector<float>& velocity, float lr, float momentum,
              float weight_decay);

// 4 conv blocks (conv -> norm -> relu, channels 16/32/32/64) and a linear
// classifier head.
class ConvNet {
 public:
  ConvNet(const NormVariantConfig& norm_cfg, bool centralize_weights,
          std::uint64_t seed);

  // Training-mode pass over one normalization group. Returns (loss, logits).
  float train_group(const TensorF& x, const std::vector<int>& labels,
                    float grad_scale, StatTrace* trace, std::size_t iteration);

  // Inference-mode predictions using EMA statistics.
  std::vector<int> predict(const TensorF& x);

  static constexpr std::size_t kBlocks = 4;
  Conv2d<float> conv[kBlocks];
  NormLayer<float> norm[kBlocks];
  Affine<float> fc;

  // Parameter gradients of the most recent train_group call are held inside
  // the layers; the trainer accumulates them.
  friend class Trainer;

 private:
  Relu<float> relu_[kBlocks];
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  // Advances n iterations (or stops early on divergence).
  void run(std::size_t n);
  void run_all() { run(cfg_.iterations - iter_); }

  double evaluate_split(const Dataset& data, std::size_t limit = 0);
  void finish();  // final evaluation into the report

  const RunReport& report() const { return report_; }
  RunReport& report() { return report_; }
  ConvNet& model() { return *net_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t iteration() const { return iter_; }
  const Dataset& train_data() const { return train_; }
  const Dataset& val_data() const { return val_; }

  std::string rng_state() const;
  void set_rng_state(const std::string& s);
  void set_iteration(std::size_t it) { iter_ = it; }

  // Flat views over every learnable parameter / velocity, in a fixed order.
  struct ParamRef {
    std::string name;
    std::vector<float>* param;
    std::vector<float>* velocity;
    bool decay;
  };
  std::vector<ParamRef> params();

 private:
  void step_once();

  TrainConfig cfg_;
  Dataset train_, val_;
  std::unique_ptr<ConvNet> net_;
  std::vector<std::vector<float>> velocity_;
  std::mt19937_64 rng_;
  std::size_t iter_ = 0;
  RunReport report_;
};

// Full run: train, evaluate, attach traces.
RunReport train(const TrainConfig& cfg);

}  // namespace mabn

#endif  // MABN_TRAIN_HPP_
