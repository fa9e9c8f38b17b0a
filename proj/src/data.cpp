#include "stf/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace stf {

namespace fs = std::filesystem;

// ---- timestamps ---------------------------------------------------------------

namespace {

// Days since 1970-01-01 for a civil date (Howard Hinnant's algorithm).
i64 days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const i64 era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = static_cast<unsigned>((153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1);
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<i64>(doe) - 719468;
}

void civil_from_days(i64 z, int& y, int& m, int& d) {
    z += 719468;
    const i64 era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const i64 yy = static_cast<i64>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
    m = static_cast<int>(mp + (mp < 10 ? 3 : -9));
    y = static_cast<int>(yy + (m <= 2));
}

}  // namespace

Timestamp parse_timestamp(const std::string& text) {
    Timestamp ts;
    if (std::sscanf(text.c_str(), "%d-%d-%d %d:%d:%d", &ts.year, &ts.month, &ts.day, &ts.hour,
                    &ts.minute, &ts.second) != 6)
        throw std::invalid_argument(msg("bad timestamp '", text, "' (expected YYYY-MM-DD HH:MM:SS)"));
    check_arg(ts.month >= 1 && ts.month <= 12 && ts.day >= 1 && ts.day <= 31 && ts.hour >= 0 &&
                  ts.hour < 24 && ts.minute >= 0 && ts.minute < 60 && ts.second >= 0 && ts.second < 60,
              msg("timestamp out of range: '", text, "'"));
    return ts;
}

std::string format_timestamp(const Timestamp& ts) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d %02d:%02d:%02d", ts.year, ts.month, ts.day, ts.hour,
                  ts.minute, ts.second);
    return buf;
}

Timestamp advance_minutes(const Timestamp& ts, int minutes) {
    i64 total = days_from_civil(ts.year, ts.month, ts.day) * 1440 + ts.hour * 60 + ts.minute + minutes;
    i64 days = total / 1440;
    i64 rem = total % 1440;
    if (rem < 0) {
        rem += 1440;
        --days;
    }
    Timestamp out;
    civil_from_days(days, out.year, out.month, out.day);
    out.hour = static_cast<int>(rem / 60);
    out.minute = static_cast<int>(rem % 60);
    out.second = ts.second;
    return out;
}

int day_of_week_1to7(const Timestamp& ts) {
    // 1970-01-01 was a Thursday.
    const i64 days = days_from_civil(ts.year, ts.month, ts.day);
    return static_cast<int>(((days % 7) + 7 + 3) % 7) + 1;
}

int time_of_day_flag(const Timestamp& ts, int frequency_minutes) {
    check_arg(frequency_minutes >= 1 && 1440 % frequency_minutes == 0,
              msg("frequency_minutes = ", frequency_minutes, " must divide 1440"));
    return (ts.hour * 60 + ts.minute) / frequency_minutes + 1;
}

// ---- bundle I/O ----------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

std::string trimmed(const std::string& s) {
    size_t a = s.find_first_not_of(" \t");
    size_t b = s.find_last_not_of(" \t");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

DatasetMeta read_metadata(const fs::path& file) {
    std::ifstream in(file);
    check_runtime(in.good(), msg("cannot open metadata file ", file.string()));
    DatasetMeta meta;
    std::string line;
    while (std::getline(in, line)) {
        if (trimmed(line).empty()) continue;
        const auto colon = line.find(':');
        check_runtime(colon != std::string::npos, msg("metadata line without ':' in ", file.string(),
                                                      ": '", line, "'"));
        const std::string key = trimmed(line.substr(0, colon));
        const std::string value = trimmed(line.substr(colon + 1));
        if (key == "name") {
            meta.name = value;
        } else if (key == "frequency_minutes") {
            meta.frequency_minutes = std::stoi(value);
        } else if (key == "units") {
            meta.units = value;
        } else {
            throw std::runtime_error(msg("unknown metadata key '", key, "' in ", file.string()));
        }
    }
    return meta;
}

}  // namespace

DatasetBundle load_bundle(const fs::path& dir) {
    const fs::path series_file = dir / "series.csv";
    const fs::path dist_file = dir / "distances.csv";
    const fs::path meta_file = dir / "metadata.txt";
    for (const auto& f : {series_file, dist_file, meta_file})
        check_runtime(fs::exists(f), msg("bundle file missing: ", f.string()));

    DatasetBundle bundle;
    bundle.meta = read_metadata(meta_file);

    std::ifstream in(series_file);
    check_runtime(in.good(), msg("cannot open series file ", series_file.string()));
    std::string line;
    check_runtime(static_cast<bool>(std::getline(in, line)),
                  msg("series file is empty: ", series_file.string()));
    const auto header = split_csv_line(line);
    check_runtime(header.size() >= 2 && header[0] == "timestamp",
                  msg("series header must start with 'timestamp', got '", line, "'"));
    const int n_nodes = static_cast<int>(header.size()) - 1;
    for (int j = 0; j < n_nodes; ++j) {
        const std::string expected = "node_" + std::to_string(j);
        check_runtime(header[static_cast<size_t>(j) + 1] == expected,
                      msg("series header column ", j + 1, " is '", header[static_cast<size_t>(j) + 1],
                          "', expected '", expected, "'"));
    }

    TrafficFlow& flow = bundle.flow;
    flow.n_nodes = n_nodes;
    i64 line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trimmed(line).empty()) continue;
        const auto cells = split_csv_line(line);
        check_runtime(static_cast<int>(cells.size()) == n_nodes + 1,
                      msg("series line ", line_no, ": expected ", n_nodes + 1, " cells, got ",
                          cells.size()));
        const Timestamp ts = parse_timestamp(cells[0]);
        flow.day_of_week.push_back(day_of_week_1to7(ts));
        flow.time_of_day.push_back(time_of_day_flag(ts, bundle.meta.frequency_minutes));
        for (int j = 0; j < n_nodes; ++j) {
            const std::string cell = trimmed(cells[static_cast<size_t>(j) + 1]);
            if (cell.empty()) {
                flow.values.push_back(0.0);
                flow.present.push_back(0);
            } else {
                try {
                    flow.values.push_back(std::stod(cell));
                } catch (const std::exception&) {
                    throw std::runtime_error(msg("series line ", line_no, ": bad number '", cell, "'"));
                }
                flow.present.push_back(1);
            }
        }
        ++flow.length;
    }
    check_runtime(flow.length > 0, msg("series file has a header but no data rows: ", series_file.string()));

    std::ifstream din(dist_file);
    check_runtime(din.good(), msg("cannot open distances file ", dist_file.string()));
    i64 row = 0;
    while (std::getline(din, line)) {
        if (trimmed(line).empty()) continue;
        ++row;
        const auto cells = split_csv_line(line);
        check_runtime(static_cast<int>(cells.size()) == n_nodes,
                      msg("distances line ", row, ": expected ", n_nodes, " cells (node count of the "
                          "series), got ", cells.size()));
        for (const auto& cell : cells) bundle.geometry.distances.push_back(std::stod(trimmed(cell)));
    }
    check_runtime(row == n_nodes, msg("distances file has ", row, " rows for ", n_nodes,
                                      " series nodes (node-count mismatch)"));
    bundle.geometry.n_nodes = n_nodes;
    bundle.geometry.validate();
    return bundle;
}

void write_bundle(const DatasetBundle& bundle, const fs::path& dir) {
    fs::create_directories(dir);
    {
        std::ofstream meta(dir / "metadata.txt");
        meta << "name: " << bundle.meta.name << "\n";
        meta << "frequency_minutes: " << bundle.meta.frequency_minutes << "\n";
        meta << "units: " << bundle.meta.units << "\n";
    }
    {
        std::ofstream out(dir / "series.csv");
        out << "timestamp";
        for (int j = 0; j < bundle.flow.n_nodes; ++j) out << ",node_" << j;
        out << "\n";
        char num[40];
        // Reconstruct timestamps from the stored flags: the writer is only
        // used for bundles whose flags follow the fixed frequency grid.
        Timestamp ts{2012, 3, 5, 0, 0, 0};  // a Monday, so flags start at 1
        const int freq = bundle.meta.frequency_minutes;
        // Align the starting timestamp with the first row's flags.
        if (bundle.flow.length > 0) {
            const int tod = bundle.flow.time_of_day[0];
            const int dow = bundle.flow.day_of_week[0];
            ts = advance_minutes(ts, (tod - 1) * freq);
            int cur_dow = day_of_week_1to7(ts);
            while (cur_dow != dow) {
                ts = advance_minutes(ts, 1440);
                cur_dow = day_of_week_1to7(ts);
            }
        }
        for (i64 t = 0; t < bundle.flow.length; ++t) {
            out << format_timestamp(ts);
            for (int j = 0; j < bundle.flow.n_nodes; ++j) {
                out << ",";
                if (bundle.flow.has_value(t, j)) {
                    std::snprintf(num, sizeof(num), "%.17g", bundle.flow.value(t, j));
                    out << num;
                }
            }
            out << "\n";
            ts = advance_minutes(ts, freq);
        }
    }
    {
        std::ofstream out(dir / "distances.csv");
        char num[40];
        for (int i = 0; i < bundle.geometry.n_nodes; ++i) {
            for (int j = 0; j < bundle.geometry.n_nodes; ++j) {
                if (j > 0) out << ",";
                std::snprintf(num, sizeof(num), "%.17g", bundle.geometry.dist(i, j));
                out << num;
            }
            out << "\n";
        }
    }
}

DatasetBundle generate_synthetic(int n_nodes, i64 length, u64 seed) {
    check_arg(n_nodes >= 2, msg("generate_synthetic: n_nodes = ", n_nodes, " must be >= 2"));
    check_arg(length >= 48, msg("generate_synthetic: length = ", length, " must be >= 48"));

    auto rng = make_rng(split_seed(seed, 17));
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::uniform_real_distribution<double> prob(0.0, 1.0);

    // Two planted spatial groups far apart; phases derive from coordinates.
    std::vector<double> xs(static_cast<size_t>(n_nodes)), ys(static_cast<size_t>(n_nodes));
    const int half = (n_nodes + 1) / 2;
    for (int i = 0; i < n_nodes; ++i) {
        const double cx = i < half ? 0.0 : 100.0;
        const double cy = i < half ? 0.0 : 100.0;
        xs[static_cast<size_t>(i)] = cx + unit(rng);
        ys[static_cast<size_t>(i)] = cy + unit(rng);
    }

    DatasetBundle bundle;
    bundle.meta.name = "synthetic";
    bundle.meta.frequency_minutes = 5;
    bundle.meta.units = "mph";

    bundle.geometry.n_nodes = n_nodes;
    bundle.geometry.distances.resize(static_cast<size_t>(n_nodes) * n_nodes);
    for (int i = 0; i < n_nodes; ++i)
        for (int j = 0; j < n_nodes; ++j) {
            const double dx = xs[static_cast<size_t>(i)] - xs[static_cast<size_t>(j)];
            const double dy = ys[static_cast<size_t>(i)] - ys[static_cast<size_t>(j)];
            bundle.geometry.distances[static_cast<size_t>(i) * n_nodes + j] =
                i == j ? 0.0 : std::sqrt(dx * dx + dy * dy);
        }

    TrafficFlow& flow = bundle.flow;
    flow.n_nodes = n_nodes;
    flow.length = length;
    flow.values.resize(static_cast<size_t>(length) * n_nodes);
    flow.present.resize(static_cast<size_t>(length) * n_nodes);
    flow.day_of_week.resize(static_cast<size_t>(length));
    flow.time_of_day.resize(static_cast<size_t>(length));

    Timestamp ts{2012, 3, 5, 0, 0, 0};  // Monday, midnight
    const double two_pi = 2.0 * 3.14159265358979323846;
    for (i64 t = 0; t < length; ++t) {
        flow.day_of_week[static_cast<size_t>(t)] = day_of_week_1to7(ts);
        flow.time_of_day[static_cast<size_t>(t)] = time_of_day_flag(ts, 5);
        for (int j = 0; j < n_nodes; ++j) {
            const double phase = two_pi * (xs[static_cast<size_t>(j)] + ys[static_cast<size_t>(j)]) / 200.0;
            const double daily = two_pi * static_cast<double>(t % 288) / 288.0;
            const double v = 60.0 + 10.0 * std::sin(daily + phase) + noise(rng);
            const bool null = prob(rng) < 0.01;
            flow.values[static_cast<size_t>(t) * n_nodes + j] = null ? 0.0 : v;
            flow.present[static_cast<size_t>(t) * n_nodes + j] = null ? 0 : 1;
        }
        ts = advance_minutes(ts, 5);
    }
    return bundle;
}

// ---- normalization ---------------------------------------------------------------

NormStats fit_normalizer(const TrafficFlow& flow, i64 lo, i64 hi, const std::string& series_name) {
    check_arg(0 <= lo && lo < hi && hi <= flow.length,
              msg("fit_normalizer: range [", lo, ",", hi, ") invalid for length ", flow.length));
    double sum = 0.0;
    i64 count = 0;
    for (i64 t = lo; t < hi; ++t)
        for (int j = 0; j < flow.n_nodes; ++j)
            if (flow.has_value(t, j)) {
                sum += flow.value(t, j);
                ++count;
            }
    check_runtime(count > 0, msg("fit_normalizer: no non-null values in '", series_name, "'"));
    const double mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (i64 t = lo; t < hi; ++t)
        for (int j = 0; j < flow.n_nodes; ++j)
            if (flow.has_value(t, j)) {
                const double d = flow.value(t, j) - mean;
                ss += d * d;
            }
    const double stddev = std::sqrt(ss / static_cast<double>(count));
    check_runtime(stddev > 1e-12,
                  msg("fit_normalizer: series '", series_name, "' is constant (stddev = 0); ",
                      "z-score normalization undefined"));
    return {mean, stddev};
}

// ---- windowing ---------------------------------------------------------------------

i64 ForecastBatch::masked_count() const {
    i64 c = 0;
    for (const auto& t : targets)
        for (uint8_t m : t.mask) c += (m == 0);
    return c;
}

i64 ForecastBatch::total_count() const {
    i64 c = 0;
    for (const auto& t : targets) c += static_cast<i64>(t.mask.size());
    return c;
}

double ForecastBatch::masked_fraction() const {
    const i64 total = total_count();
    return total == 0 ? 0.0 : static_cast<double>(masked_count()) / static_cast<double>(total);
}

WindowStream::WindowStream(const TrafficFlow* flow, i64 lo, i64 hi, int T, int horizon, NormStats stats)
    : flow_(flow), lo_(lo), hi_(hi), T_(T), horizon_(horizon), stats_(stats) {
    const i64 len = hi - lo;
    count_ = std::max<i64>(0, len - T - horizon + 1);
}

Window WindowStream::input(i64 window) const {
    check_arg(window >= 0 && window < count_, msg("window index ", window, " out of range [0,", count_, ")"));
    const i64 start = lo_ + window;
    Window w;
    w.T = T_;
    w.N = flow_->n_nodes;
    w.values.resize(static_cast<size_t>(T_) * flow_->n_nodes);
    w.day_of_week.resize(static_cast<size_t>(T_));
    w.time_of_day.resize(static_cast<size_t>(T_));
    for (int t = 0; t < T_; ++t) {
        const i64 row = start + t;
        w.day_of_week[static_cast<size_t>(t)] = flow_->day_of_week[static_cast<size_t>(row)];
        w.time_of_day[static_cast<size_t>(t)] = flow_->time_of_day[static_cast<size_t>(row)];
        for (int j = 0; j < flow_->n_nodes; ++j)
            // Null inputs impute to 0 in normalized units (the train mean).
            w.values[static_cast<size_t>(t) * flow_->n_nodes + j] =
                flow_->has_value(row, j) ? normalize_value(flow_->value(row, j), stats_) : 0.0;
    }
    return w;
}

TargetBlock WindowStream::target(i64 window) const {
    check_arg(window >= 0 && window < count_, msg("window index ", window, " out of range [0,", count_, ")"));
    const i64 start = lo_ + window + T_;
    TargetBlock tb;
    tb.horizon = horizon_;
    tb.N = flow_->n_nodes;
    tb.values.resize(static_cast<size_t>(horizon_) * flow_->n_nodes);
    tb.mask.resize(static_cast<size_t>(horizon_) * flow_->n_nodes);
    for (int t = 0; t < horizon_; ++t) {
        const i64 row = start + t;
        for (int j = 0; j < flow_->n_nodes; ++j) {
            const bool ok = flow_->has_value(row, j);
            tb.values[static_cast<size_t>(t) * flow_->n_nodes + j] = ok ? flow_->value(row, j) : 0.0;
            tb.mask[static_cast<size_t>(t) * flow_->n_nodes + j] = ok ? 1 : 0;
        }
    }
    return tb;
}

ForecastBatch WindowStream::batch(std::span<const i64> windows) const {
    ForecastBatch b;
    for (i64 w : windows) {
        b.inputs.push_back(input(w));
        b.targets.push_back(target(w));
    }
    check_runtime(b.masked_count() < b.total_count(),
                  "batch rejected: every target position is null (all-masked)");
    return b;
}

Windows make_windows(const DatasetBundle& bundle, int T, int horizon, const SplitRatios& ratios) {
    check_arg(T >= 1 && horizon >= 1, "make_windows: T and horizon must be >= 1");
    check_arg(ratios.train > 0 && ratios.val > 0 && ratios.test > 0,
              "make_windows: split ratios must be positive");
    check_arg(std::fabs(ratios.train + ratios.val + ratios.test - 1.0) < 1e-9,
              msg("make_windows: ratios sum to ", ratios.train + ratios.val + ratios.test, ", expected 1"));
    const i64 L = bundle.flow.length;
    const i64 need = static_cast<i64>(T) + horizon;
    const i64 train_end = static_cast<i64>(std::floor(static_cast<double>(L) * ratios.train));
    const i64 val_end = static_cast<i64>(std::floor(static_cast<double>(L) * (ratios.train + ratios.val)));
    check_arg(train_end >= need, msg("make_windows: train split length ", train_end,
                                     " too short for one window (needs ", need, ")"));
    check_arg(val_end - train_end >= need, msg("make_windows: val split length ", val_end - train_end,
                                               " too short for one window (needs ", need, ")"));
    check_arg(L - val_end >= need, msg("make_windows: test split length ", L - val_end,
                                       " too short for one window (needs ", need, ")"));

    Windows w;
    w.stats = fit_normalizer(bundle.flow, 0, train_end, bundle.meta.name);
    w.train = WindowStream(&bundle.flow, 0, train_end, T, horizon, w.stats);
    w.val = WindowStream(&bundle.flow, train_end, val_end, T, horizon, w.stats);
    w.test = WindowStream(&bundle.flow, val_end, L, T, horizon, w.stats);
    w.train_end = train_end;
    w.val_end = val_end;
    return w;
}

}  // namespace stf
