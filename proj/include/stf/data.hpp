#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stf/landmarks.hpp"

namespace stf {

// Measurement series for N sensors over L steps. Missing readings are kept
// as explicit null flags, never encoded as 0.0 (0 is a legal speed).
struct TrafficFlow {
    i64 length = 0;
    int n_nodes = 0;
    std::vector<double> values;    // L x N, undefined where present == 0
    std::vector<uint8_t> present;  // L x N
    std::vector<int> day_of_week;  // L, 1..7
    std::vector<int> time_of_day;  // L, 1..steps_per_day

    double value(i64 t, int node) const { return values[static_cast<size_t>(t) * n_nodes + node]; }
    bool has_value(i64 t, int node) const { return present[static_cast<size_t>(t) * n_nodes + node] != 0; }
};

struct DatasetMeta {
    std::string name;
    int frequency_minutes = 5;
    std::string units = "mph";
};

struct DatasetBundle {
    TrafficFlow flow;
    NodeGeometry geometry;
    DatasetMeta meta;
};

// Directory layout: series.csv (header `timestamp,node_0,...`; empty cell =
// null), distances.csv (N x N), metadata.txt (key: value lines).
DatasetBundle load_bundle(const std::filesystem::path& dir);
void write_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);

// Per-node daily sinusoid with phase from planted 2-D coordinates (two
// spatial groups), Gaussian noise, ~1% nulls. Deterministic per seed.
DatasetBundle generate_synthetic(int n_nodes, i64 length, u64 seed);

struct NormStats {
    double mean = 0.0;
    double stddev = 1.0;
};

// z-score statistics over non-null entries of rows [lo, hi). Errors out on a
// constant series, naming it.
NormStats fit_normalizer(const TrafficFlow& flow, i64 lo, i64 hi, const std::string& series_name);
inline double normalize_value(double v, const NormStats& s) { return (v - s.mean) / s.stddev; }
inline double denormalize_value(double v, const NormStats& s) { return v * s.stddev + s.mean; }

struct SplitRatios {
    double train = 0.7, val = 0.1, test = 0.2;
};

// One model input sample: normalized values with nulls imputed to 0 (the
// train mean), plus per-step time flags.
struct Window {
    int T = 0;
    int N = 0;
    std::vector<double> values;    // T x N, normalized
    std::vector<int> day_of_week;  // T
    std::vector<int> time_of_day;  // T
};

// Targets stay in original units; mask is false at null positions.
struct TargetBlock {
    int horizon = 0;
    int N = 0;
    std::vector<double> values;   // T' x N
    std::vector<uint8_t> mask;    // T' x N
};

struct ForecastBatch {
    std::vector<Window> inputs;
    std::vector<TargetBlock> targets;

    i64 masked_count() const;
    i64 total_count() const;
    double masked_fraction() const;
};

// Sliding windows of stride 1 over one chronological split.
class WindowStream {
public:
    WindowStream() = default;
    WindowStream(const TrafficFlow* flow, i64 lo, i64 hi, int T, int horizon, NormStats stats);

    i64 size() const { return count_; }
    i64 start_of(i64 window) const { return lo_ + window; }
    Window input(i64 window) const;
    TargetBlock target(i64 window) const;
    ForecastBatch batch(std::span<const i64> windows) const;
    const NormStats& stats() const { return stats_; }

private:
    const TrafficFlow* flow_ = nullptr;
    i64 lo_ = 0, hi_ = 0, count_ = 0;
    int T_ = 0, horizon_ = 0;
    NormStats stats_;
};

struct Windows {
    WindowStream train, val, test;
    NormStats stats;
    i64 train_end = 0, val_end = 0;  // chronological boundaries
};

Windows make_windows(const DatasetBundle& bundle, int T, int horizon, const SplitRatios& ratios);

// Civil date/time helpers for the series timestamp column.
struct Timestamp {
    int year = 1970, month = 1, day = 1, hour = 0, minute = 0, second = 0;
};
Timestamp parse_timestamp(const std::string& text);  // "YYYY-MM-DD HH:MM:SS"
std::string format_timestamp(const Timestamp& ts);
Timestamp advance_minutes(const Timestamp& ts, int minutes);
int day_of_week_1to7(const Timestamp& ts);  // 1 = Monday .. 7 = Sunday
int time_of_day_flag(const Timestamp& ts, int frequency_minutes);  // 1-based slot

}  // namespace stf
