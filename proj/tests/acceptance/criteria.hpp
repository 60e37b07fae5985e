#pragma once

#include <string>

namespace cvaet::acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome gradient_correctness();
Outcome overfit_oracle();
Outcome regularizer_effect();
Outcome kl_unit_oracle();
Outcome ld_floor();
Outcome beam_search_oracle();
Outcome metric_oracles();
Outcome negatives_pipeline();
Outcome checkpoint_round_trip();

}  // namespace cvaet::acceptance
