#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "scratchdet/tensor.hpp"

namespace scratchdet {

// Per-step instrumentation record. grad_fluct is absent before the second
// recorded step.
struct TraceRecord {
  int64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::optional<double> grad_fluct;
  double lr = 0.0;
};

struct TrainingTrace {
  std::vector<TraceRecord> records;
  int window = 50;  // trailing moving-average width for the fluctuation

  // raw |g_t - g_{t-1}| history, for the trailing average
  std::vector<double> raw_fluct;
};

// Appends (step, loss, global grad norm, smoothed fluctuation, lr). grads
// must be the raw loss gradients of the step, before weight decay.
inline void record_step(TrainingTrace& trace, int64_t step, double loss,
                        const std::vector<const Tensor*>& grads, double lr) {
  if (!trace.records.empty() && step <= trace.records.back().step)
    throw ContractError("record_step: non-monotonic step " +
                        std::to_string(step));
  TraceRecord r;
  r.step = step;
  r.loss = loss;
  r.grad_norm = global_grad_l2_norm(grads);
  r.lr = lr;
  if (!trace.records.empty()) {
    trace.raw_fluct.push_back(
        std::abs(r.grad_norm - trace.records.back().grad_norm));
    size_t w = std::min(trace.raw_fluct.size(),
                        static_cast<size_t>(trace.window));
    double s = 0.0;
    for (size_t i = trace.raw_fluct.size() - w; i < trace.raw_fluct.size(); ++i)
      s += trace.raw_fluct[i];
    r.grad_fluct = s / static_cast<double>(w);
  }
  trace.records.push_back(r);
}

// Standalone smoothing of a gradient-norm series: raw f_t = |g_t - g_{t-1}|,
// then a trailing moving average over the last min(t, W) raw values.
inline std::vector<double> gradient_fluctuation(const std::vector<double>& norms,
                                                int window) {
  if (window < 1) throw ContractError("gradient_fluctuation: window must be >= 1");
  std::vector<double> out;
  if (norms.size() < 2) return out;
  std::vector<double> raw;
  for (size_t i = 1; i < norms.size(); ++i)
    raw.push_back(std::abs(norms[i] - norms[i - 1]));
  for (size_t i = 0; i < raw.size(); ++i) {
    size_t w = std::min(i + 1, static_cast<size_t>(window));
    double s = 0.0;
    for (size_t j = i + 1 - w; j <= i; ++j) s += raw[j];
    out.push_back(s / static_cast<double>(w));
  }
  return out;
}

enum class DivergenceStatus { converging, diverged };
enum class DivergenceReason { none, non_finite_loss, sustained_blowup };

struct DivergenceVerdict {
  DivergenceStatus status = DivergenceStatus::converging;
  DivergenceReason reason = DivergenceReason::none;
  std::optional<int64_t> first_bad_step;
};

inline const char* to_string(DivergenceStatus s) {
  return s == DivergenceStatus::converging ? "converging" : "diverged";
}
inline const char* to_string(DivergenceReason r) {
  switch (r) {
    case DivergenceReason::non_finite_loss: return "non_finite_loss";
    case DivergenceReason::sustained_blowup: return "sustained_blowup";
    default: return "none";
  }
}

// Diverged if any loss is non-finite, or if the loss exceeds
// blowup_factor * initial loss for `patience` consecutive steps.
inline DivergenceVerdict divergence_check(const TrainingTrace& trace,
                                          double blowup_factor = 10.0,
                                          int patience = 100) {
  if (trace.records.empty())
    throw ContractError("divergence_check: empty trace");
  DivergenceVerdict v;
  for (const auto& r : trace.records)
    if (!std::isfinite(r.loss)) {
      v.status = DivergenceStatus::diverged;
      v.reason = DivergenceReason::non_finite_loss;
      v.first_bad_step = r.step;
      return v;
    }
  double threshold = blowup_factor * trace.records.front().loss;
  int run = 0;
  int64_t run_start = 0;
  for (const auto& r : trace.records) {
    if (r.loss > threshold) {
      if (run == 0) run_start = r.step;
      if (++run >= patience) {
        v.status = DivergenceStatus::diverged;
        v.reason = DivergenceReason::sustained_blowup;
        v.first_bad_step = run_start;
        return v;
      }
    } else {
      run = 0;
    }
  }
  return v;
}

namespace detail {
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace detail

// CSV: header `step,loss,grad_norm,grad_fluct,lr`, 17-significant-digit
// decimals; the fluctuation field is empty while undefined. Deterministic
// byte output.
inline void export_trace(const TrainingTrace& trace, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("export_trace: cannot open " + path);
  f << "step,loss,grad_norm,grad_fluct,lr\n";
  for (const auto& r : trace.records) {
    f << r.step << ',' << detail::fmt17(r.loss) << ','
      << detail::fmt17(r.grad_norm) << ',';
    if (r.grad_fluct) f << detail::fmt17(*r.grad_fluct);
    f << ',' << detail::fmt17(r.lr) << '\n';
  }
  if (!f) throw IoError("export_trace: write failed for " + path);
}

inline TrainingTrace load_trace(const std::string& path, int window = 50) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_trace: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "step,loss,grad_norm,grad_fluct,lr")
    throw IoError("load_trace: bad header in " + path);
  TrainingTrace t;
  t.window = window;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    TraceRecord r;
    std::getline(ss, field, ',');
    r.step = std::stoll(field);
    std::getline(ss, field, ',');
    r.loss = std::stod(field);
    std::getline(ss, field, ',');
    r.grad_norm = std::stod(field);
    std::getline(ss, field, ',');
    if (!field.empty()) r.grad_fluct = std::stod(field);
    std::getline(ss, field, ',');
    r.lr = std::stod(field);
    if (!t.records.empty())
      t.raw_fluct.push_back(
          std::abs(r.grad_norm - t.records.back().grad_norm));
    t.records.push_back(r);
  }
  return t;
}

}  // namespace scratchdet
