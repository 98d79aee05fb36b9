#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tsfuse/tensor.hpp"
#include "tsfuse/textpath.hpp"

namespace tsfuse {

enum class Frequency : std::uint8_t { kDaily, kWeekly, kMonthly, kToy };

const char* frequency_name(Frequency f);
Frequency parse_frequency(std::string_view name);

struct HorizonPolicy {
  std::size_t lookback = 0;
  std::vector<std::size_t> horizons;
};

// Lookback and horizons per reporting frequency (monthly lookback is 8).
HorizonPolicy horizon_policy(Frequency f);

// Aligned numeric series [T, C] and per-step text embeddings [T, D_text].
struct MultimodalDataset {
  std::string name;
  Frequency frequency = Frequency::kToy;
  Tensor series;
  Tensor text;
  std::vector<TextType> labels;      // empty or one per step
  std::vector<int> trend;            // toy only: +1 rising, -1 falling
  std::vector<std::string> timestamps;
  std::size_t offset = 0;            // row 0's index in the dataset this was cut from

  std::size_t length() const { return series.dim(0); }
  std::size_t channels() const { return series.dim(1); }
  std::size_t text_dim() const { return text.dim(1); }
  void validate() const;
  MultimodalDataset rows(std::size_t begin, std::size_t end) const;
};

struct SeriesSchema {
  std::string name;
  Frequency frequency = Frequency::kMonthly;
};

enum class EmbeddingFormat : std::uint8_t { kCsv, kBinary };

// Series CSV: header row, column 1 an ISO-8601 timestamp, the rest numeric.
// Embeddings: CSV rows or the binary layout (u64 rows, u64 dim, f64 data, all
// little-endian); files ending in .bin are read as binary.
MultimodalDataset load_dataset(const std::string& series_path, const std::string& embedding_path,
                               const SeriesSchema& schema);
Tensor read_embeddings(const std::string& path);
Tensor read_embeddings(const std::string& path, EmbeddingFormat format);
void write_embeddings(const std::string& path, const Tensor& embeddings, EmbeddingFormat format);
void write_series_csv(const std::string& path, const MultimodalDataset& d);

// Synthetic univariate series of alternating rising/falling segments, each
// step paired with a matching, contradicting or irrelevant description.
struct ToyOptions {
  std::size_t length = 1000;
  std::size_t text_dim = 32;
  std::size_t min_segment = 20;
  std::size_t max_segment = 60;
  double min_slope = 0.02;
  double max_slope = 0.08;
  double noise = 0.05;
  std::uint64_t encoder_seed = 0;
};

MultimodalDataset generate_toy_dataset(std::uint64_t seed, const ToyOptions& options = {});

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct Splits {
  MultimodalDataset train;
  MultimodalDataset val;
  MultimodalDataset test;
};

// Cumulative floor boundaries; the remainder goes to the test segment.
std::array<std::size_t, 3> split_lengths(std::size_t total, const SplitSpec& spec);
// Segments shorter than min_length (and empty ones) raise InsufficientDataError.
Splits chronological_split(const MultimodalDataset& d, const SplitSpec& spec, std::size_t min_length = 0);

struct WindowBatch {
  Tensor x;     // [B, L, C]
  Tensor y;     // [B, H, C]
  Tensor text;  // [B, L, D_text]
  std::vector<TextType> labels;     // label of each window's last lookback step
  std::vector<std::size_t> starts;  // global index of each window's first step

  std::size_t size() const { return x.dim(0); }
  std::size_t lookback() const { return x.dim(1); }
  std::size_t horizon() const { return y.dim(1); }
  std::size_t channels() const { return x.dim(2); }
  WindowBatch select(std::span<const std::size_t> indices) const;
};

std::size_t window_count(std::size_t length, std::size_t lookback, std::size_t horizon, std::size_t stride = 1);
WindowBatch make_windows(const MultimodalDataset& d, std::size_t lookback, std::size_t horizon,
                         std::size_t stride = 1);

// Per-channel z-scoring fitted on training windows (x and y entries).
class Normalizer {
 public:
  static constexpr double kStdFloor = 1e-8;

  static Normalizer fit(const WindowBatch& train);
  Normalizer(std::vector<double> mean, std::vector<double> stddev);

  Tensor apply(const Tensor& values) const;   // last axis is the channel axis
  Tensor invert(const Tensor& values) const;
  WindowBatch apply(const WindowBatch& batch) const;

  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& stddev() const { return std_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  Normalizer() = default;
  std::vector<double> mean_;
  std::vector<double> std_;
  std::vector<std::string> warnings_;
};

// Replaces every text row of `target` with a row drawn uniformly from the
// pooled donor embeddings; the series is left untouched.
MultimodalDataset substitute_irrelevant_text(const MultimodalDataset& target,
                                             std::span<const MultimodalDataset> donors, std::uint64_t seed);

}  // namespace tsfuse
