/**
 * Copyright      2026  The llmfuse Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "llmfuse/errors.hpp"
#include "llmfuse/numcore/param_store.hpp"
#include "llmfuse/numcore/rng.hpp"
#include "llmfuse/numcore/tape.hpp"

namespace llmfuse {

struct GradCheckOptions {
  std::size_t samples = 500;  // coordinates drawn uniformly from trainable params
  std::uint64_t seed = 0;
  std::vector<std::string> always_include;  // every coordinate under these prefixes is checked
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_path;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::vector<std::string> checked_paths;  // distinct paths touched, sorted
};

// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Compares reverse-mode gradients of `f` against central differences
// (f(x+eps) - f(x-eps)) / 2eps on sampled coordinates of the non-frozen
// parameters. `f(tape, params)` must record a scalar loss on `tape` and be a
// pure function of `params`.
template <class T, class F>
GradCheckReport grad_check(F&& f, ParamStore<T>& params, double epsilon, const GradCheckOptions& opts = {}) {
  if (!(epsilon > 0)) throw ArgumentError("grad_check: epsilon must be positive");
  auto evaluate = [&]() -> double {
    Tape<T> tape;
    NoGradGuard<T> guard(tape);
    Var<T> loss = f(tape, params);
    if (loss.value().size() != 1) throw ArgumentError("grad_check: loss must be scalar");
    return static_cast<double>(loss.value()[0]);
  };

  const double base = evaluate();
  if (evaluate() != base) throw ContractError("grad_check: function is not deterministic");

  params.drop_grad();
  {
    Tape<T> tape;
    tape.backward(f(tape, params));
  }

  std::vector<std::pair<std::string, std::size_t>> coords;
  std::vector<std::pair<std::string, std::size_t>> pool;
  for (auto& [path, t] : params) {
    if (params.is_frozen(path)) continue;
    bool forced = false;
    for (const auto& p : opts.always_include) forced = forced || path_has_prefix(path, p);
    for (std::size_t i = 0; i < t.size(); ++i) (forced ? coords : pool).emplace_back(path, i);
  }
  Rng rng(opts.seed);
  const std::size_t take = std::min(opts.samples, pool.size());
  for (std::size_t i = 0; i < take; ++i) {  // partial Fisher-Yates
    std::swap(pool[i], pool[i + rng.uniform_int(pool.size() - i)]);
    coords.push_back(pool[i]);
  }

  GradCheckReport report;
  for (const auto& [path, idx] : coords) {
    Tensor<T>& t = params.at(path);
    const double analytic = t.has_grad() ? static_cast<double>(t.grad()[idx]) : 0.0;
    const T saved = t[idx];
    t[idx] = static_cast<T>(saved + epsilon);
    const double up = evaluate();
    t[idx] = static_cast<T>(saved - epsilon);
    const double down = evaluate();
    t[idx] = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double err = relative_error(analytic, numeric);
    if (report.coordinates == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_path = path;
      report.worst_index = idx;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
    ++report.coordinates;
    report.checked_paths.push_back(path);
  }
  std::sort(report.checked_paths.begin(), report.checked_paths.end());
  report.checked_paths.erase(std::unique(report.checked_paths.begin(), report.checked_paths.end()),
                             report.checked_paths.end());
  params.drop_grad();
  return report;
}

}  // namespace llmfuse
