#ifndef MABN_IO_HPP_
#define MABN_IO_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mabn/fold.hpp"
#include "mabn/norm.hpp"
#include "mabn/stats.hpp"
#include "mabn/theorem.hpp"
#include "mabn/train.hpp"

namespace mabn {

inline constexpr int kFormatVersion = 1;

struct BenchConfig {
  std::size_t warmup_reps = 2;
  std::size_t timed_reps = 5;
  std::size_t iters_per_rep = 20;
  std::size_t height = 56;
  std::size_t width = 56;
  std::size_t batch = 1;
  std::size_t layers = 6;
  std::uint64_t seed = 7;
};

// The whole on-disk configuration. Every field has a default; `{}` runs the
// BN@32 baseline. Unknown keys are rejected.
struct RunConfig {
  NormVariantConfig norm;
  TrainConfig train;
  BenchConfig bench;
  McConfig theorem;
  std::string theorem_which = "ema";
};

RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

nlohmann::json norm_config_json(const NormVariantConfig& c);

// --- CSV artifacts ---

// Exact header: iter,layer,stat,l2norm
void write_trace(const StatTrace& trace, const std::filesystem::path& path);
StatTrace read_trace(const std::filesystem::path& path);

// Exact header: iter,loss,train_err,val_err (error columns filled at
// evaluation iterations only).
void write_run_report_csv(const RunReport& report,
                          const std::filesystem::path& path);

// --- JSON artifacts ---

nlohmann::json theorem_report_json(const TheoremReport& rep);
nlohmann::json bench_report_json(const BenchReport& rep);
nlohmann::json run_summary_json(const RunReport& report, std::uint64_t seed);

void write_json(const nlohmann::json& j, const std::filesystem::path& path);

// --- Checkpoints ---
// Bit-exact: all floats stored as raw bit patterns, RNG state as text.
// load(save(x)) resumes training bit-identically.

nlohmann::json save_checkpoint(Trainer& trainer);
void load_checkpoint(Trainer& trainer, const nlohmann::json& ckpt);

}  // namespace mabn

#endif  // MABN_IO_HPP_
