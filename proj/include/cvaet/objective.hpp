#pragma once

// Loss terms and their batch combination:
//   total = nll + bow + beta * l_d,   l_d = max(eps, KL+ - KL-)
// with beta = min(1, step / anneal_steps) acting on l_d only.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cvaet/autodiff.hpp"

namespace cvaet {

struct GaussianValues {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd log_variance;
};

// Closed-form KL(q || p) between diagonal Gaussians.
double gaussian_kl(const GaussianValues& q, const GaussianValues& p);

// Summed token NLL over positions with valid[t] != 0.
ad::Var nll_loss(ad::Var logits, std::span<const int> targets, std::span<const std::uint8_t> valid);
// -sum_t log softmax(bow_logits)[targets[t]] over the real target tokens.
ad::Var bow_loss(ad::Var bow_logits, std::span<const int> targets);

// max(epsilon, kl_plus - kl_minus); epsilon must be negative.
double regularizer_ld(double kl_plus, double kl_minus, double epsilon);
double anneal_beta(std::int64_t step, std::int64_t anneal_steps);

enum class LdReduction { per_example, batch };
LdReduction parse_ld_reduction(const std::string& name);

struct ExampleLoss {
  double nll = 0.0;
  double bow = 0.0;
  double kl_plus = 0.0;
  std::optional<double> kl_minus;
};

struct LossBreakdown {
  double nll = 0.0;
  double bow = 0.0;
  double kl_plus = 0.0;
  double kl_minus = 0.0;  // over examples with a negative; 0 if none
  double l_d = 0.0;
  double beta = 0.0;
  double total = 0.0;
  std::size_t examples = 0;
  std::size_t without_negatives = 0;

  bool finite() const;
  nlohmann::json to_json() const;
};

// d total / d per-example term, used to seed each example's backward pass.
struct LossSeeds {
  std::vector<double> nll, bow, kl_plus, kl_minus;
};

struct ObjectiveOptions {
  double epsilon = -2.0;
  LdReduction reduction = LdReduction::per_example;
  // false: the plain CVAE objective, total = nll + bow + beta * KL+ (l_d is
  // still reported).
  bool use_ld = true;
};

// nll and bow are averaged over the batch. An example without a negative
// contributes max(eps, KL+) under per_example reduction and is left out of
// the KL- mean under batch reduction.
LossBreakdown total_loss(std::span<const ExampleLoss> examples, double beta,
                         const ObjectiveOptions& options, LossSeeds* seeds = nullptr);

}  // namespace cvaet
