#ifndef MABN_COMMANDS_HPP_
#define MABN_COMMANDS_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mabn/fold.hpp"
#include "mabn/io.hpp"

namespace mabn {

// A stack of convolutions, each followed by a finalized linear normalizer
// (foldable) or an instance-level normalizer (not foldable). The benchmark
// and fold-equivalence subjects.
struct ConvNormStack {
  std::vector<Conv2d<float>> convs;
  std::vector<InferenceTransform> norms;
  std::vector<std::vector<float>> gamma, beta;  // instance-norm affine
  std::size_t in_channels = 32;

  TensorF forward_unfolded(const TensorF& x);
  TensorF forward_instance(const TensorF& x);  // groups = channels
  std::vector<Conv2d<float>> folded() const;
  static TensorF forward_folded(std::vector<Conv2d<float>>& convs,
                                const TensorF& x);
};

// Random stack per the benchmark configuration: `layers` 1x1 convolutions,
// channels 32 -> 64 -> ... -> 64, with random finalized normalizers.
ConvNormStack make_conv_norm_stack(const BenchConfig& cfg,
                                   std::size_t kernel = 1);

// Subcommand bodies. Each returns a process exit status:
// 0 ok, 1 failed check, 2 usage/config error (thrown as exceptions upstream).
int cmd_train(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
              const std::filesystem::path& out_dir,
              const std::filesystem::path& resume_from = {},
              const std::filesystem::path& stop_checkpoint = {},
              std::size_t stop_at = 0);
int cmd_evaluate(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                 const std::filesystem::path& out_dir);
int cmd_gradcheck(const std::string& layer, std::size_t batch,
                  std::size_t channels, std::uint64_t seed, double& max_err);
int cmd_verify_theorem(const RunConfig& cfg,
                       const std::filesystem::path& out_dir);
int cmd_bench(const RunConfig& cfg, const std::filesystem::path& out_dir);
int cmd_stats_trace(const RunConfig& cfg, const std::filesystem::path& out_dir);
int cmd_fold_check(const RunConfig& cfg, const std::filesystem::path& out_dir);

std::filesystem::path resolve_out_dir(const std::string& flag_value);

}  // namespace mabn

#endif  // MABN_COMMANDS_HPP_
