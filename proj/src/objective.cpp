#include "cvaet/objective.hpp"

#include <algorithm>
#include <cmath>

#include "cvaet/error.hpp"

namespace cvaet {

double gaussian_kl(const GaussianValues& q, const GaussianValues& p) {
  require(q.mean.size() == p.mean.size() && q.log_variance.size() == p.log_variance.size() &&
              q.mean.size() == q.log_variance.size(),
          ErrorKind::invalid_argument, "gaussian_kl: dimension mismatch");
  const Eigen::ArrayXd lq = q.log_variance.transpose().array();
  const Eigen::ArrayXd lp = p.log_variance.transpose().array();
  const Eigen::ArrayXd d = (q.mean - p.mean).transpose().array();
  return (0.5 * (lp - lq) + 0.5 * (lq.exp() + d.square()) * (-lp).exp() - 0.5).sum();
}

ad::Var nll_loss(ad::Var logits, std::span<const int> targets, std::span<const std::uint8_t> valid) {
  require(targets.size() == valid.size(), ErrorKind::invalid_argument,
          "nll_loss: mask length differs from targets");
  std::vector<int> masked(targets.begin(), targets.end());
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (valid[i] == 0) masked[i] = -1;
  }
  return ad::cross_entropy(logits, masked);
}

ad::Var bow_loss(ad::Var bow_logits, std::span<const int> targets) {
  return ad::bag_of_words_nll(bow_logits, targets);
}

double regularizer_ld(double kl_plus, double kl_minus, double epsilon) {
  require(epsilon < 0.0, ErrorKind::config, "epsilon must be negative");
  return std::max(epsilon, kl_plus - kl_minus);
}

double anneal_beta(std::int64_t step, std::int64_t anneal_steps) {
  require(anneal_steps > 0, ErrorKind::config, "anneal_steps must be positive");
  if (step <= 0) return 0.0;
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(anneal_steps));
}

LdReduction parse_ld_reduction(const std::string& name) {
  if (name == "per_example") return LdReduction::per_example;
  if (name == "batch") return LdReduction::batch;
  fail(ErrorKind::config, "ld_reduction must be per_example or batch, got '" + name + "'");
}

bool LossBreakdown::finite() const {
  return std::isfinite(nll) && std::isfinite(bow) && std::isfinite(kl_plus) &&
         std::isfinite(kl_minus) && std::isfinite(l_d) && std::isfinite(total);
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"nll", nll},         {"bow", bow},   {"kl_plus", kl_plus}, {"kl_minus", kl_minus},
          {"l_d", l_d},         {"beta", beta}, {"total", total},     {"examples", examples},
          {"without_negatives", without_negatives}};
}

LossBreakdown total_loss(std::span<const ExampleLoss> examples, double beta,
                         const ObjectiveOptions& options, LossSeeds* seeds) {
  require(!examples.empty(), ErrorKind::invalid_argument, "total_loss: empty batch");
  require(options.epsilon < 0.0, ErrorKind::config, "epsilon must be negative");
  const std::size_t n = examples.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  LossBreakdown out;
  out.beta = beta;
  out.examples = n;
  if (seeds != nullptr) {
    seeds->nll.assign(n, inv_n);
    seeds->bow.assign(n, inv_n);
    seeds->kl_plus.assign(n, 0.0);
    seeds->kl_minus.assign(n, 0.0);
  }

  std::size_t with_neg = 0;
  for (const auto& e : examples) {
    out.nll += e.nll * inv_n;
    out.bow += e.bow * inv_n;
    out.kl_plus += e.kl_plus * inv_n;
    if (e.kl_minus) {
      out.kl_minus += *e.kl_minus;
      ++with_neg;
    }
  }
  out.without_negatives = n - with_neg;
  if (with_neg > 0) out.kl_minus /= static_cast<double>(with_neg);

  if (!options.use_ld) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = examples[i];
      out.l_d += std::max(options.epsilon, e.kl_plus - e.kl_minus.value_or(0.0)) * inv_n;
      if (seeds != nullptr) seeds->kl_plus[i] = beta * inv_n;
    }
    out.total = out.nll + out.bow + beta * out.kl_plus;
    return out;
  }
  const double w = beta;
  if (options.reduction == LdReduction::per_example) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = examples[i];
      const double diff = e.kl_plus - e.kl_minus.value_or(0.0);
      out.l_d += std::max(options.epsilon, diff) * inv_n;
      if (seeds != nullptr && diff > options.epsilon) {
        seeds->kl_plus[i] = w * inv_n;
        if (e.kl_minus) seeds->kl_minus[i] = -w * inv_n;
      }
    }
  } else {
    const double diff = out.kl_plus - out.kl_minus;
    out.l_d = std::max(options.epsilon, diff);
    if (seeds != nullptr && diff > options.epsilon) {
      for (std::size_t i = 0; i < n; ++i) {
        seeds->kl_plus[i] = w * inv_n;
        if (examples[i].kl_minus) seeds->kl_minus[i] = -w / static_cast<double>(with_neg);
      }
    }
  }
  out.total = out.nll + out.bow + w * out.l_d;
  return out;
}

}  // namespace cvaet
