#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsmi/tensor.hpp"

namespace tsmi {

class DatasetFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One parsed record: channels x (variable length) plus its label string.
struct RawSeries {
  std::vector<std::vector<double>> channels;
  std::string label;
  std::size_t length() const { return channels.empty() ? 0 : channels.front().size(); }
};

struct TsFile {
  std::string problem_name;
  std::size_t dimensions = 0;
  std::vector<std::string> class_labels;  // sorted lexicographically
  std::vector<RawSeries> records;

  int label_index(const std::string& label) const {
    auto it = std::lower_bound(class_labels.begin(), class_labels.end(), label);
    if (it == class_labels.end() || *it != label)
      throw DatasetFormatError("unknown class label '" + label + "'");
    return static_cast<int>(it - class_labels.begin());
  }
};

namespace detail {
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}
}  // namespace detail

/// Parses a UEA/UCR `.ts` file with dense, colon-separated dimensions.
inline TsFile parse_ts(std::istream& in, const std::string& source = "<stream>") {
  TsFile f;
  bool in_data = false, has_labels = false, univariate = false;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw DatasetFormatError(source + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (!in_data) {
      if (line[0] != '@') fail("expected a header line, got '" + line.substr(0, 40) + "'");
      std::istringstream hs(line);
      std::string key;
      hs >> key;
      key = detail::lower(key);
      if (key == "@problemname") {
        hs >> f.problem_name;
      } else if (key == "@dimensions" || key == "@dimension") {
        if (!(hs >> f.dimensions) || f.dimensions == 0) fail("malformed @dimensions");
      } else if (key == "@univariate") {
        std::string v;
        hs >> v;
        univariate = detail::lower(v) == "true";
      } else if (key == "@timestamps") {
        std::string v;
        hs >> v;
        if (detail::lower(v) == "true") fail("timestamped series are not supported");
      } else if (key == "@classlabel") {
        std::string v;
        hs >> v;
        has_labels = detail::lower(v) == "true";
        if (!has_labels) fail("file has no class labels");
        std::string lab;
        while (hs >> lab) f.class_labels.push_back(lab);
        if (f.class_labels.empty()) fail("@classLabel true but no labels listed");
        std::sort(f.class_labels.begin(), f.class_labels.end());
        f.class_labels.erase(std::unique(f.class_labels.begin(), f.class_labels.end()),
                             f.class_labels.end());
      } else if (key == "@data") {
        if (!has_labels) fail("@data reached before @classLabel");
        if (f.dimensions == 0) f.dimensions = univariate ? 1 : 0;
        if (f.dimensions == 0) fail("@data reached before @dimensions");
        in_data = true;
      }
      // Other headers (@missing, @equalLength, @seriesLength) carry no
      // information the loader needs.
      continue;
    }
    auto fields = detail::split(line, ':');
    if (fields.size() != f.dimensions + 1)
      fail("expected " + std::to_string(f.dimensions) + " dimensions plus label, found " +
           std::to_string(fields.size()) + " fields");
    RawSeries rec;
    rec.label = detail::trim(fields.back());
    if (!std::binary_search(f.class_labels.begin(), f.class_labels.end(), rec.label))
      fail("unknown class label '" + rec.label + "'");
    for (std::size_t c = 0; c < f.dimensions; ++c) {
      std::vector<double> vals;
      for (const auto& tok : detail::split(fields[c], ',')) {
        const std::string t = detail::trim(tok);
        if (t.empty() || t == "?") fail("missing value in dimension " + std::to_string(c));
        try {
          std::size_t used = 0;
          vals.push_back(std::stod(t, &used));
          if (used != t.size()) throw std::invalid_argument(t);
        } catch (const std::exception&) {
          fail("bad number '" + t + "' in dimension " + std::to_string(c));
        }
      }
      if (c > 0 && vals.size() != rec.channels.front().size())
        fail("inconsistent channel lengths within a record");
      rec.channels.push_back(std::move(vals));
    }
    f.records.push_back(std::move(rec));
  }
  if (!in_data) throw DatasetFormatError(source + ": no @data section");
  return f;
}

inline TsFile parse_ts_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file " + path.string());
  return parse_ts(in, path.string());
}

/// Truncates (keep the first T frames) or zero-pads at the tail to T.
inline Tensor<float> normalize_length(const std::vector<std::vector<double>>& series, std::size_t T) {
  if (series.empty() || series.front().empty())
    throw std::invalid_argument("normalize_length: empty series");
  const std::size_t C = series.size();
  Tensor<float> out({C, T});
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t n = std::min(series[c].size(), T);
    for (std::size_t t = 0; t < n; ++t) out[c * T + t] = static_cast<float>(series[c][t]);
  }
  return out;
}

struct TimeSeriesInstance {
  std::size_t id = 0;  // position within its split, file order
  Tensor<float> values;  // [C, T]
  int label = 0;
  std::size_t original_length = 0;
  std::size_t valid_length(std::size_t T) const { return std::min(original_length, T); }
};

struct Dataset {
  std::string name;
  std::size_t channels = 0;
  std::size_t seq_len = 0;
  std::vector<std::string> class_labels;
  std::vector<TimeSeriesInstance> train;
  std::vector<TimeSeriesInstance> test;
  std::vector<double> channel_mean;  // populated by standardize()
  std::vector<double> channel_std;
  bool standardized = false;

  std::size_t num_classes() const { return class_labels.size(); }
};

inline std::vector<TimeSeriesInstance> to_instances(const TsFile& f, std::size_t T) {
  std::vector<TimeSeriesInstance> out;
  for (std::size_t i = 0; i < f.records.size(); ++i) {
    const auto& r = f.records[i];
    out.push_back({i, normalize_length(r.channels, T), f.label_index(r.label), r.length()});
  }
  return out;
}

/// Fits per-channel mean/std on the non-padded frames of the training split
/// and applies them to both splits. Padding frames stay zero. Applying twice
/// is a logic error and throws.
inline void standardize(Dataset& ds, std::ostream* warn = &std::cerr) {
  if (ds.standardized) throw std::logic_error("dataset is already standardized");
  const std::size_t C = ds.channels, T = ds.seq_len;
  ds.channel_mean.assign(C, 0.0);
  ds.channel_std.assign(C, 1.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& inst : ds.train)
      for (std::size_t t = 0; t < inst.valid_length(T); ++t) {
        s += inst.values[c * T + t];
        ++n;
      }
    if (n == 0) throw std::invalid_argument("standardize: training split is empty");
    const double mu = s / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& inst : ds.train)
      for (std::size_t t = 0; t < inst.valid_length(T); ++t) {
        const double dv = inst.values[c * T + t] - mu;
        ss += dv * dv;
      }
    double sd = std::sqrt(ss / static_cast<double>(n));
    if (sd < 1e-8) {
      if (warn) *warn << "warning: channel " << c << " has zero variance; leaving it unscaled\n";
      sd = 1.0;
    }
    ds.channel_mean[c] = mu;
    ds.channel_std[c] = sd;
  }
  for (auto* split : {&ds.train, &ds.test})
    for (auto& inst : *split)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < inst.valid_length(T); ++t) {
          float& v = inst.values[c * T + t];
          v = static_cast<float>((v - ds.channel_mean[c]) / ds.channel_std[c]);
        }
  ds.standardized = true;
}

inline Dataset load_dataset(const std::filesystem::path& train_path,
                            const std::filesystem::path& test_path, std::size_t T,
                            bool standardize_inputs = true) {
  TsFile tr = parse_ts_file(train_path);
  TsFile te = parse_ts_file(test_path);
  if (tr.dimensions != te.dimensions)
    throw DatasetFormatError("train and test files disagree on dimensionality");
  if (tr.class_labels != te.class_labels)
    throw DatasetFormatError("train and test files disagree on class labels");
  Dataset ds;
  ds.name = tr.problem_name;
  ds.channels = tr.dimensions;
  ds.seq_len = T;
  ds.class_labels = tr.class_labels;
  ds.train = to_instances(tr, T);
  ds.test = to_instances(te, T);
  if (standardize_inputs) standardize(ds);
  return ds;
}

/// One CSV row per (split, instance, channel): split,id,label,channel,v0..v{T-1}
inline void write_dataset_csv(const Dataset& ds, std::ostream& out) {
  out << "split,id,label,original_length,channel";
  for (std::size_t t = 0; t < ds.seq_len; ++t) out << ",t" << t;
  out << '\n';
  char buf[32];
  for (const auto& [name, split] : {std::pair{"train", &ds.train}, std::pair{"test", &ds.test}})
    for (const auto& inst : *split)
      for (std::size_t c = 0; c < ds.channels; ++c) {
        out << name << ',' << inst.id << ',' << inst.label << ',' << inst.original_length << ','
            << c;
        for (std::size_t t = 0; t < ds.seq_len; ++t) {
          std::snprintf(buf, sizeof buf, "%.9g", inst.values[c * ds.seq_len + t]);
          out << ',' << buf;
        }
        out << '\n';
      }
}

}  // namespace tsmi
