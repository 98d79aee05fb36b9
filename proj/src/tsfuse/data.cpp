#include "tsfuse/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tsfuse/error.hpp"
#include "tsfuse/rng.hpp"

namespace tsfuse {

const char* frequency_name(Frequency f) {
  switch (f) {
    case Frequency::kDaily: return "daily";
    case Frequency::kWeekly: return "weekly";
    case Frequency::kMonthly: return "monthly";
    case Frequency::kToy: return "toy";
  }
  return "unknown";
}

Frequency parse_frequency(std::string_view name) {
  for (auto f : {Frequency::kDaily, Frequency::kWeekly, Frequency::kMonthly, Frequency::kToy})
    if (name == frequency_name(f)) return f;
  throw ConfigError("unknown frequency '" + std::string(name) + "' (expected daily, weekly, monthly or toy)");
}

HorizonPolicy horizon_policy(Frequency f) {
  switch (f) {
    case Frequency::kDaily: return {96, {48, 96, 192, 336}};
    case Frequency::kWeekly: return {36, {12, 24, 36, 48}};
    case Frequency::kMonthly: return {8, {6, 8, 10, 12}};
    case Frequency::kToy: return {8, {8}};
  }
  throw ConfigError("unknown frequency");
}

void MultimodalDataset::validate() const {
  if (series.rank() != 2 || text.rank() != 2)
    throw DataError(name + ": series and text must be matrices");
  if (series.dim(0) != text.dim(0))
    throw DataError(name + ": alignment error, series has " + std::to_string(series.dim(0)) +
                    " rows but text embeddings have " + std::to_string(text.dim(0)));
  if (!labels.empty() && labels.size() != length()) throw DataError(name + ": label count mismatch");
  if (!trend.empty() && trend.size() != length()) throw DataError(name + ": trend count mismatch");
  if (!timestamps.empty() && timestamps.size() != length()) throw DataError(name + ": timestamp count mismatch");
}

MultimodalDataset MultimodalDataset::rows(std::size_t begin, std::size_t end) const {
  if (begin >= end || end > length())
    throw InsufficientDataError(name + ": empty or out-of-range row range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ")");
  auto cut = [&](const Tensor& t) {
    const std::size_t w = t.dim(1);
    std::vector<double> data(t.data().begin() + static_cast<long>(begin * w),
                             t.data().begin() + static_cast<long>(end * w));
    return Tensor({end - begin, w}, std::move(data));
  };
  MultimodalDataset out;
  out.name = name;
  out.frequency = frequency;
  out.series = cut(series);
  out.text = cut(text);
  auto sub = [&](const auto& v) {
    using V = std::decay_t<decltype(v)>;
    return v.empty() ? V{} : V(v.begin() + static_cast<long>(begin), v.begin() + static_cast<long>(end));
  };
  out.labels = sub(labels);
  out.trend = sub(trend);
  out.timestamps = sub(timestamps);
  out.offset = offset + begin;
  return out;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

double parse_finite(const std::string& s, const std::string& file, std::size_t row, std::size_t col) {
  auto v = parse_number(s);
  if (!v) throw DataError(file + ": parse error at row " + std::to_string(row) + ", column " +
                          std::to_string(col) + ": '" + s + "' is not a number");
  if (!std::isfinite(*v))
    throw DataError(file + ": non-finite value at row " + std::to_string(row) + ", column " + std::to_string(col));
  return *v;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!trim(line).empty()) lines.push_back(line);
  return lines;
}

std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

// Seconds since the epoch for YYYY-MM[-DD][(T| )HH:MM[:SS]][Z].
std::optional<std::int64_t> parse_timestamp(const std::string& s) {
  int y = 0, mo = 0, d = 1, h = 0, mi = 0, sec = 0;
  int consumed = 0;
  if (std::sscanf(s.c_str(), "%4d-%2d%n", &y, &mo, &consumed) != 2) return std::nullopt;
  std::size_t pos = static_cast<std::size_t>(consumed);
  if (pos < s.size() && s[pos] == '-') {
    if (std::sscanf(s.c_str() + pos, "-%2d%n", &d, &consumed) != 1) return std::nullopt;
    pos += static_cast<std::size_t>(consumed);
  }
  if (pos < s.size() && (s[pos] == 'T' || s[pos] == ' ')) {
    if (std::sscanf(s.c_str() + pos + 1, "%2d:%2d%n", &h, &mi, &consumed) != 2) return std::nullopt;
    pos += 1 + static_cast<std::size_t>(consumed);
    if (pos < s.size() && s[pos] == ':') {
      if (std::sscanf(s.c_str() + pos, ":%2d%n", &sec, &consumed) != 1) return std::nullopt;
      pos += static_cast<std::size_t>(consumed);
    }
  }
  if (pos < s.size() && s[pos] == 'Z') ++pos;
  if (pos != s.size() || mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec > 60) return std::nullopt;
  return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 + h * 3600 + mi * 60 + sec;
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is, const std::string& path) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError(path + ": truncated binary header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

bool has_suffix(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Tensor read_embeddings(const std::string& path) {
  return read_embeddings(path, has_suffix(path, ".bin") ? EmbeddingFormat::kBinary : EmbeddingFormat::kCsv);
}

Tensor read_embeddings(const std::string& path, EmbeddingFormat format) {
  if (format == EmbeddingFormat::kBinary) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    const std::uint64_t rows = read_u64(in, path);
    const std::uint64_t dim = read_u64(in, path);
    if (rows == 0 || dim == 0) throw DataError(path + ": embedding file declares an empty matrix");
    std::vector<double> data(rows * dim);
    for (std::uint64_t i = 0; i < rows * dim; ++i) {
      const std::uint64_t bits = read_u64(in, path);
      data[i] = std::bit_cast<double>(bits);
      if (!std::isfinite(data[i]))
        throw DataError(path + ": non-finite value at row " + std::to_string(i / dim));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw DataError(path + ": trailing bytes after embedding data");
    return Tensor({rows, dim}, std::move(data));
  }

  const auto lines = read_lines(path);
  std::vector<double> data;
  std::size_t dim = 0;
  std::size_t rows = 0;
  for (std::size_t li = 0; li < lines.size(); ++li) {
    const auto fields = split_csv(lines[li]);
    if (li == 0 && !fields.empty() && !parse_number(fields[0])) continue;  // header
    if (dim == 0) dim = fields.size();
    if (fields.size() != dim)
      throw DataError(path + ": row " + std::to_string(rows) + " has " + std::to_string(fields.size()) +
                      " columns, expected " + std::to_string(dim));
    for (std::size_t c = 0; c < dim; ++c) data.push_back(parse_finite(fields[c], path, rows, c));
    ++rows;
  }
  if (rows == 0) throw DataError(path + ": no embedding rows");
  return Tensor({rows, dim}, std::move(data));
}

void write_embeddings(const std::string& path, const Tensor& embeddings, EmbeddingFormat format) {
  if (embeddings.rank() != 2) throw ShapeError("embeddings must be a matrix");
  if (format == EmbeddingFormat::kBinary) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    write_u64(out, embeddings.dim(0));
    write_u64(out, embeddings.dim(1));
    for (double v : embeddings.data()) write_u64(out, std::bit_cast<std::uint64_t>(v));
    if (!out) throw IoError("write failed for '" + path + "'");
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  char buf[32];
  for (std::size_t r = 0; r < embeddings.dim(0); ++r) {
    for (std::size_t c = 0; c < embeddings.dim(1); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", embeddings.at(r, c));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
}

void write_series_csv(const std::string& path, const MultimodalDataset& d) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "timestamp";
  for (std::size_t c = 0; c < d.channels(); ++c) out << ",ch" << c;
  out << '\n';
  char buf[32];
  for (std::size_t r = 0; r < d.length(); ++r) {
    if (!d.timestamps.empty()) {
      out << d.timestamps[r];
    } else {
      // synthetic daily stamps starting 2000-01-01
      const std::int64_t days = days_from_civil(2000, 1, 1) + static_cast<std::int64_t>(r);
      const std::int64_t z = days + 719468;
      const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
      const unsigned doe = static_cast<unsigned>(z - era * 146097);
      const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
      const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
      const unsigned mp = (5 * doy + 2) / 153;
      const unsigned day = doy - (153 * mp + 2) / 5 + 1;
      const unsigned month = mp < 10 ? mp + 3 : mp - 9;
      const std::int64_t year = static_cast<std::int64_t>(yoe) + era * 400 + (month <= 2);
      std::snprintf(buf, sizeof buf, "%04lld-%02u-%02u", static_cast<long long>(year), month, day);
      out << buf;
    }
    for (std::size_t c = 0; c < d.channels(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", d.series.at(r, c));
      out << ',' << buf;
    }
    out << '\n';
  }
}

MultimodalDataset load_dataset(const std::string& series_path, const std::string& embedding_path,
                               const SeriesSchema& schema) {
  const auto lines = read_lines(series_path);
  if (lines.size() < 2) throw DataError(series_path + ": expected a header row and at least one data row");
  const auto header = split_csv(lines[0]);
  if (header.size() < 2) throw DataError(series_path + ": expected a timestamp column and at least one channel");
  const std::size_t channels = header.size() - 1;

  MultimodalDataset d;
  d.name = schema.name.empty() ? series_path : schema.name;
  d.frequency = schema.frequency;
  std::vector<double> values;
  std::optional<std::int64_t> previous;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::size_t row = li - 1;
    const auto fields = split_csv(lines[li]);
    if (fields.size() != header.size())
      throw DataError(series_path + ": row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                      " columns, expected " + std::to_string(header.size()));
    const auto stamp = parse_timestamp(fields[0]);
    if (!stamp) throw DataError(series_path + ": row " + std::to_string(row) + ": bad timestamp '" + fields[0] + "'");
    if (previous && *stamp <= *previous)
      throw DataError(series_path + ": timestamps not strictly increasing at row " + std::to_string(row));
    previous = stamp;
    d.timestamps.push_back(fields[0]);
    for (std::size_t c = 0; c < channels; ++c) values.push_back(parse_finite(fields[c + 1], series_path, row, c + 1));
  }
  d.series = Tensor({d.timestamps.size(), channels}, std::move(values));
  d.text = read_embeddings(embedding_path);
  d.labels.assign(d.length(), TextType::kReal);
  if (d.text.dim(0) != d.series.dim(0)) d.labels.clear();
  d.validate();
  return d;
}

MultimodalDataset generate_toy_dataset(std::uint64_t seed, const ToyOptions& opt) {
  if (opt.length < 30) throw ConfigError("toy dataset needs at least 30 steps");
  Rng rng(seed, "toy");
  const ToyEncoder encoder(opt.text_dim, opt.encoder_seed);

  std::vector<double> raw(opt.length);
  std::vector<int> trend(opt.length);
  int direction = rng.below(2) ? 1 : -1;
  double level = 0.0;
  std::size_t t = 0;
  while (t < opt.length) {
    const auto len = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(opt.min_segment), static_cast<std::int64_t>(opt.max_segment)));
    const double slope = direction * rng.uniform(opt.min_slope, opt.max_slope);
    for (std::size_t k = 0; k < len && t < opt.length; ++k, ++t) {
      level += slope;
      trend[t] = direction;
      raw[t] = level + rng.normal(0.0, opt.noise);
    }
    direction = -direction;
  }

  double mean = 0.0;
  for (double v : raw) mean += v;
  mean /= static_cast<double>(raw.size());
  double var = 0.0;
  for (double v : raw) var += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(raw.size())), 1e-12);
  for (double& v : raw) v = (v - mean) / sd;

  MultimodalDataset d;
  d.name = "toy";
  d.frequency = Frequency::kToy;
  d.series = Tensor({opt.length, 1}, raw);
  std::vector<double> text;
  text.reserve(opt.length * opt.text_dim);
  d.labels.resize(opt.length);
  for (std::size_t i = 0; i < opt.length; ++i) {
    const auto type = static_cast<TextType>(rng.below(3));
    const std::size_t variant = rng.below(ToyEncoder::irrelevant_variants());
    d.labels[i] = type;
    const auto v = encoder.encode(type, trend[i], i, variant);
    text.insert(text.end(), v.begin(), v.end());
  }
  d.text = Tensor({opt.length, opt.text_dim}, std::move(text));
  d.trend = std::move(trend);
  d.validate();
  return d;
}

std::array<std::size_t, 3> split_lengths(std::size_t total, const SplitSpec& spec) {
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must be non-negative and sum to 1");
  // The small offset keeps ratios like 0.8 * 10 = 7.999... on the intended side.
  auto boundary = [&](double ratio) {
    return std::min(total, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(total) + 1e-9)));
  };
  const std::size_t b1 = boundary(spec.train);
  const std::size_t b2 = std::max(b1, boundary(spec.train + spec.val));
  return {b1, b2 - b1, total - b2};
}

Splits chronological_split(const MultimodalDataset& d, const SplitSpec& spec, std::size_t min_length) {
  const auto lens = split_lengths(d.length(), spec);
  const char* names[] = {"train", "validation", "test"};
  for (int i = 0; i < 3; ++i)
    if (lens[i] == 0 || lens[i] < min_length)
      throw InsufficientDataError(d.name + ": " + names[i] + " segment has " + std::to_string(lens[i]) +
                                  " steps, need at least " + std::to_string(std::max<std::size_t>(min_length, 1)));
  return {d.rows(0, lens[0]), d.rows(lens[0], lens[0] + lens[1]), d.rows(lens[0] + lens[1], d.length())};
}

std::size_t window_count(std::size_t length, std::size_t lookback, std::size_t horizon, std::size_t stride) {
  if (stride == 0) throw ConfigError("window stride must be positive");
  if (length < lookback + horizon) return 0;
  return (length - lookback - horizon) / stride + 1;
}

WindowBatch make_windows(const MultimodalDataset& d, std::size_t lookback, std::size_t horizon, std::size_t stride) {
  if (lookback == 0 || horizon == 0) throw ConfigError("lookback and horizon must be positive");
  const std::size_t count = window_count(d.length(), lookback, horizon, stride);
  if (count == 0)
    throw InsufficientDataError(d.name + ": " + std::to_string(d.length()) + " steps cannot hold a window of " +
                                std::to_string(lookback) + " + " + std::to_string(horizon));
  const std::size_t c = d.channels();
  const std::size_t dt = d.text_dim();
  std::vector<double> x, y, text;
  x.reserve(count * lookback * c);
  y.reserve(count * horizon * c);
  text.reserve(count * lookback * dt);
  WindowBatch w;
  for (std::size_t b = 0; b < count; ++b) {
    const std::size_t s = b * stride;
    const auto series = d.series.data();
    const auto emb = d.text.data();
    x.insert(x.end(), series.begin() + static_cast<long>(s * c), series.begin() + static_cast<long>((s + lookback) * c));
    y.insert(y.end(), series.begin() + static_cast<long>((s + lookback) * c),
             series.begin() + static_cast<long>((s + lookback + horizon) * c));
    text.insert(text.end(), emb.begin() + static_cast<long>(s * dt), emb.begin() + static_cast<long>((s + lookback) * dt));
    if (!d.labels.empty()) w.labels.push_back(d.labels[s + lookback - 1]);
    w.starts.push_back(d.offset + s);
  }
  w.x = Tensor({count, lookback, c}, std::move(x));
  w.y = Tensor({count, horizon, c}, std::move(y));
  w.text = Tensor({count, lookback, dt}, std::move(text));
  return w;
}

WindowBatch WindowBatch::select(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DataError("cannot select an empty batch");
  auto gather = [&](const Tensor& t) {
    const std::size_t stride = t.size() / t.dim(0);
    std::vector<double> out;
    out.reserve(indices.size() * stride);
    for (auto i : indices) {
      if (i >= t.dim(0)) throw DataError("window index out of range");
      out.insert(out.end(), t.data().begin() + static_cast<long>(i * stride),
                 t.data().begin() + static_cast<long>((i + 1) * stride));
    }
    Shape s = t.shape();
    s[0] = indices.size();
    return Tensor::unchecked(std::move(s), std::move(out));
  };
  WindowBatch out;
  out.x = gather(x);
  out.y = gather(y);
  out.text = gather(text);
  for (auto i : indices) {
    if (!labels.empty()) out.labels.push_back(labels[i]);
    out.starts.push_back(starts[i]);
  }
  return out;
}

Normalizer::Normalizer(std::vector<double> mean, std::vector<double> stddev)
    : mean_(std::move(mean)), std_(std::move(stddev)) {
  if (mean_.size() != std_.size() || mean_.empty()) throw ConfigError("normalizer statistics mismatch");
  for (double& s : std_) s = std::max(s, kStdFloor);
}

Normalizer Normalizer::fit(const WindowBatch& train) {
  const std::size_t c = train.channels();
  Normalizer n;
  n.mean_.assign(c, 0.0);
  n.std_.assign(c, 0.0);
  std::vector<std::size_t> count(c, 0);
  for (const Tensor* t : {&train.x, &train.y})
    for (std::size_t i = 0; i < t->size(); ++i) {
      n.mean_[i % c] += (*t)[i];
      ++count[i % c];
    }
  for (std::size_t k = 0; k < c; ++k) n.mean_[k] /= static_cast<double>(count[k]);
  for (const Tensor* t : {&train.x, &train.y})
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double dv = (*t)[i] - n.mean_[i % c];
      n.std_[i % c] += dv * dv;
    }
  for (std::size_t k = 0; k < c; ++k) {
    n.std_[k] = std::sqrt(n.std_[k] / static_cast<double>(count[k]));
    if (n.std_[k] < kStdFloor) {
      n.warnings_.push_back("channel " + std::to_string(k) + " is constant; std floored at 1e-8");
      n.std_[k] = kStdFloor;
    }
  }
  return n;
}

Tensor Normalizer::apply(const Tensor& values) const {
  if (values.shape().back() != mean_.size()) throw ShapeError("normalizer channel count mismatch");
  Tensor out = values;
  const std::size_t c = mean_.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean_[i % c]) / std_[i % c];
  return out;
}

Tensor Normalizer::invert(const Tensor& values) const {
  if (values.shape().back() != mean_.size()) throw ShapeError("normalizer channel count mismatch");
  Tensor out = values;
  const std::size_t c = mean_.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * std_[i % c] + mean_[i % c];
  return out;
}

WindowBatch Normalizer::apply(const WindowBatch& batch) const {
  WindowBatch out = batch;
  out.x = apply(batch.x);
  out.y = apply(batch.y);
  return out;
}

MultimodalDataset substitute_irrelevant_text(const MultimodalDataset& target,
                                             std::span<const MultimodalDataset> donors, std::uint64_t seed) {
  if (donors.empty()) throw DataError("irrelevant-text substitution needs at least one donor dataset");
  std::vector<const double*> pool;
  const std::size_t dim = target.text_dim();
  for (const auto& donor : donors) {
    if (donor.text_dim() != dim)
      throw DataError("donor '" + donor.name + "' has embedding dimension " + std::to_string(donor.text_dim()) +
                      ", target '" + target.name + "' has " + std::to_string(dim));
    for (std::size_t r = 0; r < donor.length(); ++r) pool.push_back(donor.text.data().data() + r * dim);
  }
  Rng rng(seed, "irrelevant-text");
  MultimodalDataset out = target;
  auto data = out.text.data();
  for (std::size_t r = 0; r < out.length(); ++r) {
    const double* src = pool[rng.below(pool.size())];
    std::copy_n(src, dim, data.begin() + static_cast<long>(r * dim));
  }
  out.labels.assign(out.length(), TextType::kIrrelevant);
  out.name = target.name + "+irrelevant";
  return out;
}

}  // namespace tsfuse
