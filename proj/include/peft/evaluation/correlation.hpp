#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "peft/errors.hpp"

namespace peft::evaluation {

struct Correlation {
  double r = 0.0;
  double p = 1.0;
};

struct CorrelationReport {
  std::string x_name = "x";
  std::string y_name = "y";
  std::size_t n = 0;
  Correlation pearson;
  Correlation spearman;
};

/// 1-based ranks with ties given their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

/// Two-tailed p-value of r under H0: ρ = 0, via t = r·√((n−2)/(1−r²)) with n−2 df.
inline double correlation_p_value(double r, std::size_t n) {
  if (std::abs(r) >= 1.0) return 0.0;
  const double df = static_cast<double>(n - 2);
  const double t = r * std::sqrt(df / (1.0 - r * r));
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

inline double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelationError("correlation undefined: a series has zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline CorrelationReport correlate(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size())
    throw InputError("correlate: series lengths differ (" + std::to_string(xs.size()) + " vs " +
                     std::to_string(ys.size()) + ")");
  if (xs.size() < 3) throw InputError("correlate: need at least 3 pairs, got " + std::to_string(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw InputError("correlate: non-finite value at pair " + std::to_string(i));
  CorrelationReport rep;
  rep.n = xs.size();
  rep.pearson.r = pearson_r(xs, ys);
  rep.pearson.p = correlation_p_value(rep.pearson.r, rep.n);
  rep.spearman.r = pearson_r(average_ranks(xs), average_ranks(ys));
  rep.spearman.p = correlation_p_value(rep.spearman.r, rep.n);
  return rep;
}

/// key,value rows; an optional header whose value column is not numeric is skipped.
inline std::vector<std::pair<std::string, double>> read_key_value_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read '" + path + "'");
  std::vector<std::pair<std::string, double>> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw InputError(path + ":" + std::to_string(n) + ": expected key,value");
    const auto key = line.substr(0, comma), val = line.substr(comma + 1);
    try {
      std::size_t used = 0;
      const double v = std::stod(val, &used);
      if (used != val.size()) throw std::invalid_argument("trailing characters");
      rows.emplace_back(key, v);
    } catch (const std::exception&) {
      if (n == 1) continue;  // header
      throw InputError(path + ":" + std::to_string(n) + ": value '" + val + "' is not a number");
    }
  }
  return rows;
}

/// Pairs two key,value tables on their shared keys, in the order of `x`. Every key must
/// appear in both.
inline void join_on_key(const std::vector<std::pair<std::string, double>>& x,
                        const std::vector<std::pair<std::string, double>>& y, std::vector<double>& xs,
                        std::vector<double>& ys, std::vector<std::string>* keys = nullptr) {
  std::map<std::string, double> ym(y.begin(), y.end());
  if (ym.size() != y.size()) throw InputError("y series has duplicate keys");
  std::map<std::string, double> seen;
  for (const auto& [k, v] : x) {
    if (!seen.emplace(k, v).second) throw InputError("x series has duplicate key '" + k + "'");
    auto it = ym.find(k);
    if (it == ym.end()) throw InputError("key '" + k + "' missing from y series");
    xs.push_back(v);
    ys.push_back(it->second);
    if (keys) keys->push_back(k);
  }
  if (x.size() != y.size())
    throw InputError("series lengths differ (" + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_correlation_csv(const std::string& path, const CorrelationReport& r) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << "x,y,n,method,r,p\n";
  out << r.x_name << ',' << r.y_name << ',' << r.n << ",pearson," << format_double(r.pearson.r) << ','
      << format_double(r.pearson.p) << '\n';
  out << r.x_name << ',' << r.y_name << ',' << r.n << ",spearman," << format_double(r.spearman.r) << ','
      << format_double(r.spearman.p) << '\n';
}

}  // namespace peft::evaluation
