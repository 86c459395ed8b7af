#include "simprop/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace simprop {

GraphEval evaluate_graph(const ScalarGraph& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  const Var out = f(tape, vars);
  return {out.value(), tape.branch_digest()};
}

double evaluate_scalar(const ScalarGraph& f, const std::vector<Tensor>& inputs) {
  double total = 0.0;
  for (float v : evaluate_graph(f, inputs).output.data()) total += v;
  return total;
}

namespace {

double sum_of_differences(const Tensor& up, const Tensor& down) {
  double total = 0.0;
  for (std::size_t i = 0; i < up.size(); ++i) total += static_cast<double>(up[i]) - static_cast<double>(down[i]);
  return total;
}

}  // namespace

GradCheckReport grad_check(const ScalarGraph& f, const std::vector<Tensor>& inputs, const GradCheckOptions& opts) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    const Var out = f(tape, vars);
    tape.backward(out.value().size() == 1 ? out : sum(out));
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }

  // (input, element) pairs to probe
  std::vector<std::pair<std::size_t, std::size_t>> sites;
  std::size_t total = 0;
  for (const Tensor& t : inputs) total += t.size();
  if (total <= opts.max_samples) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      for (std::size_t j = 0; j < inputs[i].size(); ++j) sites.emplace_back(i, j);
    }
  } else {
    std::mt19937_64 rng(opts.seed);
    std::vector<std::size_t> flat(total);
    std::iota(flat.begin(), flat.end(), std::size_t{0});
    std::shuffle(flat.begin(), flat.end(), rng);
    flat.resize(opts.max_samples);
    std::sort(flat.begin(), flat.end());
    std::size_t base = 0, which = 0;
    for (std::size_t idx : flat) {
      while (idx >= base + inputs[which].size()) base += inputs[which++].size();
      sites.emplace_back(which, idx - base);
    }
  }

  GradCheckReport report;
  const std::uint64_t base_branches = evaluate_graph(f, inputs).branches;
  std::vector<Tensor> probe = inputs;
  for (const auto& [i, j] : sites) {
    const float orig = probe[i][j];
    bool kink = false;
    // Central difference with step h; the perturbed value is re-read so the
    // divisor is the step actually representable in float.
    auto central = [&](float h) {
      probe[i][j] = orig + h;
      const float hi = probe[i][j];
      const GraphEval up = evaluate_graph(f, probe);
      probe[i][j] = orig - h;
      const float lo = probe[i][j];
      const GraphEval down = evaluate_graph(f, probe);
      probe[i][j] = orig;
      kink = kink || up.branches != base_branches || down.branches != base_branches;
      return sum_of_differences(up.output, down.output) / (static_cast<double>(hi) - lo);
    };
    double numeric = central(opts.step);
    if (opts.richardson) numeric = (4.0 * numeric - central(2.0f * opts.step)) / 3.0;
    if (kink) {
      ++report.kink_skipped;
      continue;
    }

    const double a = analytic[i][j];
    const double denom = std::max({std::abs(a), std::abs(numeric), static_cast<double>(opts.denom_floor)});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel > opts.tolerance) ++report.failed;
    if (rel > report.max_rel_error || report.checked == 1) {
      report.max_rel_error = rel;
      report.worst_input = i;
      report.worst_index = j;
      report.worst_analytic = static_cast<float>(a);
      report.worst_numeric = static_cast<float>(numeric);
    }
  }
  return report;
}

GradCheckReport directional_grad_check(const ScalarGraph& f, const std::vector<Tensor>& inputs, int directions,
                                       const GradCheckOptions& opts) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    const Var out = f(tape, vars);
    tape.backward(out.value().size() == 1 ? out : sum(out));
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }
  const std::uint64_t base_branches = evaluate_graph(f, inputs).branches;
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  GradCheckReport report;
  for (int k = 0; k < directions; ++k) {
    std::vector<Tensor> dir;
    for (const Tensor& t : inputs) {
      double ss = 0.0;
      for (float v : t.data()) ss += static_cast<double>(v) * v;
      const double rms = t.size() ? std::sqrt(ss / static_cast<double>(t.size())) : 0.0;
      const double scale = rms > 0.0 ? rms : 1.0;
      Tensor d(t.shape());
      for (float& v : d.data()) v = static_cast<float>(unit(rng) * scale);
      dir.push_back(std::move(d));
    }
    double a = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      for (std::size_t j = 0; j < inputs[i].size(); ++j) a += static_cast<double>(analytic[i][j]) * dir[i][j];
    }
    auto shifted = [&](double s) {
      std::vector<Tensor> p = inputs;
      for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t j = 0; j < p[i].size(); ++j) p[i][j] = static_cast<float>(p[i][j] + s * dir[i][j]);
      }
      return evaluate_graph(f, p);
    };
    const GraphEval up = shifted(opts.step), down = shifted(-opts.step);
    if (up.branches != base_branches || down.branches != base_branches) {
      ++report.kink_skipped;
      continue;
    }
    const double numeric = sum_of_differences(up.output, down.output) / (2.0 * opts.step);
    const double denom = std::max({std::abs(a), std::abs(numeric), static_cast<double>(opts.denom_floor)});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (rel > opts.tolerance) ++report.failed;
    if (rel > report.max_rel_error || report.checked == 1) {
      report.max_rel_error = rel;
      report.worst_input = 0;
      report.worst_index = static_cast<std::size_t>(k);
      report.worst_analytic = static_cast<float>(a);
      report.worst_numeric = static_cast<float>(numeric);
    }
  }
  return report;
}

std::string describe(const GradCheckReport& r) {
  std::ostringstream os;
  os << "checked=" << r.checked << " failed=" << r.failed << " kink_skipped=" << r.kink_skipped
     << " max_rel_error=" << r.max_rel_error << " worst=(input " << r.worst_input << ", element " << r.worst_index
     << ", analytic " << r.worst_analytic << ", numeric " << r.worst_numeric << ")";
  return os.str();
}

}  // namespace simprop
