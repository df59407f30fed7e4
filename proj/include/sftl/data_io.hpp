#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sftl/engine.hpp"
#include "sftl/errors.hpp"
#include "sftl/rng.hpp"

namespace sftl {

/// One observed tensor entry with its timestamp. Indices are 1-based.
struct Event {
  double t = 0.0;
  std::vector<int> idx;
  double y = 0.0;
};

enum class FileFormat { kJsonl, kCsv };

namespace detail {

inline bool ends_with_icase(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  for (std::size_t i = 0; i < suffix.size(); ++i) {
    const char a = static_cast<char>(
        std::tolower(static_cast<unsigned char>(s[s.size() - suffix.size() + i])));
    if (a != suffix[i]) return false;
  }
  return true;
}

inline std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline double parse_double_field(const std::string& field, int line, int col,
                                 const char* what) {
  const std::string body = trim(field);
  if (body.empty()) {
    throw ParseError(line, col, std::string("empty ") + what + " field");
  }
  char* end = nullptr;
  const double v = std::strtod(body.c_str(), &end);
  if (end != body.c_str() + body.size()) {
    throw ParseError(line, col, std::string("invalid ") + what + " value");
  }
  return v;
}

inline int parse_index_field(const std::string& field, int line, int col) {
  const std::string body = trim(field);
  if (body.empty()) throw ParseError(line, col, "empty index field");
  char* end = nullptr;
  const long v = std::strtol(body.c_str(), &end, 10);
  if (end != body.c_str() + body.size()) {
    throw ParseError(line, col, "index is not an integer");
  }
  if (v < 1) throw ParseError(line, col, "indices are 1-based");
  if (v > INT32_MAX) throw ParseError(line, col, "index out of range");
  return static_cast<int>(v);
}

inline std::vector<std::string> split_csv_line(const std::string& line,
                                               std::vector<int>* starts) {
  std::vector<std::string> fields;
  std::string cur;
  int start = 1;
  if (starts) starts->push_back(start);
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == ',') {
      fields.push_back(cur);
      cur.clear();
      start = static_cast<int>(i) + 2;
      if (starts) starts->push_back(start);
    } else {
      cur.push_back(line[i]);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::vector<Event> load_jsonl(std::istream& in) {
  std::vector<Event> events;
  std::string line;
  int lineno = 0;
  int arity = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, static_cast<int>(e.byte), e.what());
    }
    if (!j.is_object()) {
      throw ParseError(lineno, 1, "expected a JSON object per line");
    }
    if (!j.contains("t") || !j["t"].is_number()) {
      throw ParseError(lineno, 1, "missing numeric field \"t\"");
    }
    if (!j.contains("y") || !j["y"].is_number()) {
      throw ParseError(lineno, 1, "missing numeric field \"y\"");
    }
    if (!j.contains("idx") || !j["idx"].is_array() || j["idx"].empty()) {
      throw ParseError(lineno, 1, "missing non-empty array field \"idx\"");
    }
    Event event;
    event.t = j["t"].get<double>();
    event.y = j["y"].get<double>();
    for (const auto& elem : j["idx"]) {
      if (!elem.is_number_integer()) {
        throw ParseError(lineno, 1, "indices must be integers");
      }
      const std::int64_t v = elem.get<std::int64_t>();
      if (v < 1) throw ParseError(lineno, 1, "indices are 1-based");
      if (v > INT32_MAX) throw ParseError(lineno, 1, "index out of range");
      event.idx.push_back(static_cast<int>(v));
    }
    if (arity < 0) {
      arity = static_cast<int>(event.idx.size());
    } else if (static_cast<int>(event.idx.size()) != arity) {
      throw DimensionMismatch("line " + std::to_string(lineno) +
                              ": inconsistent index arity");
    }
    events.push_back(std::move(event));
  }
  return events;
}

inline std::vector<Event> load_csv(std::istream& in) {
  std::vector<Event> events;
  std::string line;
  if (!std::getline(in, line)) return events;
  std::vector<std::string> header = split_csv_line(line, nullptr);
  for (auto& h : header) h = trim(h);
  if (header.size() < 3 || header.front() != "t" || header.back() != "y") {
    throw ParseError(1, 1, "expected header t,i1,...,iM,y");
  }
  const int arity = static_cast<int>(header.size()) - 2;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<int> starts;
    const std::vector<std::string> fields = split_csv_line(line, &starts);
    if (fields.size() != header.size()) {
      std::ostringstream reason;
      reason << "expected " << header.size() << " fields, found "
             << fields.size();
      throw ParseError(lineno, 1, reason.str());
    }
    Event event;
    event.t = parse_double_field(fields[0], lineno, starts[0], "timestamp");
    for (int m = 0; m < arity; ++m) {
      event.idx.push_back(
          parse_index_field(fields[1 + m], lineno, starts[1 + m]));
    }
    event.y = parse_double_field(fields[arity + 1], lineno, starts[arity + 1],
                                 "value");
    events.push_back(std::move(event));
  }
  return events;
}

}  // namespace detail

/// Picks the serialization format from the file extension, falling back to a
/// one-byte content sniff for unknown extensions.
inline FileFormat detect_format(const std::string& path) {
  if (detail::ends_with_icase(path, ".jsonl") ||
      detail::ends_with_icase(path, ".ndjson") ||
      detail::ends_with_icase(path, ".json")) {
    return FileFormat::kJsonl;
  }
  if (detail::ends_with_icase(path, ".csv")) return FileFormat::kCsv;
  std::ifstream in(path);
  char c = 0;
  while (in.get(c)) {
    if (!std::isspace(static_cast<unsigned char>(c))) break;
  }
  return c == '{' ? FileFormat::kJsonl : FileFormat::kCsv;
}

inline std::vector<Event> load_events(const std::string& path) {
  const FileFormat format = detect_format(path);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Event> events = format == FileFormat::kJsonl
                                  ? detail::load_jsonl(in)
                                  : detail::load_csv(in);
  // Events are returned time-sorted; ties keep file order.
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
  return events;
}

/// Writes events in the format implied by the extension. Doubles are printed
/// with %.17g so a load after a save reproduces them bit for bit.
inline void write_events(const std::string& path,
                         const std::vector<Event>& events) {
  const FileFormat format = detect_format(path);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  char buf[64];
  if (format == FileFormat::kJsonl) {
    for (const Event& e : events) {
      std::snprintf(buf, sizeof(buf), "%.17g", e.t);
      out << "{\"t\":" << buf << ",\"idx\":[";
      for (std::size_t m = 0; m < e.idx.size(); ++m) {
        if (m) out << ',';
        out << e.idx[m];
      }
      std::snprintf(buf, sizeof(buf), "%.17g", e.y);
      out << "],\"y\":" << buf << "}\n";
    }
  } else {
    const std::size_t arity = events.empty() ? 0 : events.front().idx.size();
    out << "t";
    for (std::size_t m = 1; m <= arity; ++m) out << ",i" << m;
    out << ",y\n";
    for (const Event& e : events) {
      std::snprintf(buf, sizeof(buf), "%.17g", e.t);
      out << buf;
      for (int v : e.idx) out << ',' << v;
      std::snprintf(buf, sizeof(buf), "%.17g", e.y);
      out << ',' << buf << '\n';
    }
  }
  if (!out) throw IoError("failed while writing " + path);
}

struct TimeRescale {
  double t_min = 0.0;
  double t_max = 0.0;
  /// True when every timestamp was identical (all map to 0) or no events.
  bool degenerate = false;
};

/// Affinely maps timestamps onto [0, 1] in place.
inline TimeRescale rescale_timestamps(std::vector<Event>& events) {
  TimeRescale out;
  if (events.empty()) {
    out.degenerate = true;
    return out;
  }
  out.t_min = events.front().t;
  out.t_max = events.front().t;
  for (const Event& e : events) {
    out.t_min = std::min(out.t_min, e.t);
    out.t_max = std::max(out.t_max, e.t);
  }
  if (out.t_max == out.t_min) {
    out.degenerate = true;
    for (Event& e : events) e.t = 0.0;
    return out;
  }
  const double span = out.t_max - out.t_min;
  for (Event& e : events) e.t = (e.t - out.t_min) / span;
  return out;
}

/// Random train/test split. The train size is ceil(n * fraction - 1/2), so
/// exact halves round down. Both halves come back sorted by time.
inline std::pair<std::vector<Event>, std::vector<Event>> split_train_test(
    const std::vector<Event>& events, double train_fraction,
    std::uint64_t seed) {
  const std::size_t n = events.size();
  double raw = std::ceil(static_cast<double>(n) * train_fraction - 0.5);
  if (raw < 0.0) raw = 0.0;
  std::size_t n_train = static_cast<std::size_t>(raw);
  if (n_train > n) n_train = n;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::uint64_t j = rng.uniform_int(i);
    std::swap(order[i - 1], order[static_cast<std::size_t>(j)]);
  }
  std::pair<std::vector<Event>, std::vector<Event>> out;
  out.first.reserve(n_train);
  out.second.reserve(n - n_train);
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_train ? out.first : out.second).push_back(events[order[i]]);
  }
  const auto by_time = [](const Event& a, const Event& b) { return a.t < b.t; };
  std::stable_sort(out.first.begin(), out.first.end(), by_time);
  std::stable_sort(out.second.begin(), out.second.end(), by_time);
  return out;
}

/// Groups consecutive equal timestamps into batches. Input must already be
/// sorted by time; a decrease throws NonMonotoneTimestamp.
inline std::vector<Batch> make_batches(const std::vector<Event>& events) {
  std::vector<Batch> batches;
  for (const Event& e : events) {
    if (!batches.empty() && e.t < batches.back().t) {
      throw NonMonotoneTimestamp("events are not sorted by time");
    }
    if (batches.empty() || e.t != batches.back().t) {
      batches.push_back(Batch{e.t, {}});
    }
    batches.back().entries.push_back(BatchEntry{e.idx, e.y});
  }
  return batches;
}

/// Ground-truth rank-1 factor trajectories of the bundled 2x2 synthetic
/// problem; mode and object are 1-based.
inline double synthetic_factor(int mode, int object, double t) {
  const double pi = 3.14159265358979323846;
  const double s2 = std::sin(2.0 * pi * t);
  if (mode == 1 && object == 1) return -s2 * s2 * s2;
  if (mode == 1 && object == 2) {
    const double sh = std::sin(pi * t / 2.0);
    const double s3 = std::sin(3.0 * pi * t);
    return (1.0 - sh * sh * sh) * s3 * s3 * s3;
  }
  if (mode == 2 && object == 1) return s2;
  if (mode == 2 && object == 2) {
    const double c3 = std::cos(3.0 * pi * t);
    return -c3 * c3 * c3 * std::sin(3.0 * pi * t) * s2;
  }
  throw UnknownObject("synthetic truth is defined on the 2x2 grid");
}

inline double synthetic_entry(int i, int j, double t) {
  return synthetic_factor(1, i, t) * synthetic_factor(2, j, t);
}

/// Samples the synthetic stream: sorted uniform timestamps, `per_time`
/// entries drawn uniformly from the 2x2 grid at each, Gaussian noise with the
/// given standard deviation.
inline std::vector<Event> generate_synthetic(std::uint64_t seed,
                                             int n_times = 500,
                                             int per_time = 2,
                                             double noise = 0.05) {
  Rng rng(seed);
  std::vector<double> ts(n_times);
  for (double& t : ts) t = rng.uniform();
  std::sort(ts.begin(), ts.end());
  std::vector<Event> events;
  events.reserve(static_cast<std::size_t>(n_times) * per_time);
  for (double t : ts) {
    for (int k = 0; k < per_time; ++k) {
      const int i = static_cast<int>(rng.uniform_int(2)) + 1;
      const int j = static_cast<int>(rng.uniform_int(2)) + 1;
      Event e;
      e.t = t;
      e.idx = {i, j};
      e.y = synthetic_entry(i, j, t) + noise * rng.normal();
      events.push_back(std::move(e));
    }
  }
  return events;
}

}  // namespace sftl
