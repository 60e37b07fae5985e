#pragma once

#include <vector>

#include "cvaet/config.hpp"
#include "cvaet/corpus.hpp"

namespace cvaet::testing {

// d_model 8, one layer each side, d_z 4, |V| = 11.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.n_heads = 2;
  c.d_ffn = 16;
  c.d_z = 4;
  c.k_queries = 2;
  c.n_latent_vectors = 3;
  c.max_context_len = 16;
  c.max_response_len = 8;
  c.max_turn_id = 4;
  c.dropout = 0.0;
  return c;
}

// Two-utterance context "w6 w7 \n w8 w9", response "w9 w10".
inline TrainingExample tiny_example(bool with_negative = true) {
  TrainingExample ex;
  ex.context_ids = {6, 7, Vocab::kDelimiterId, 8, 9};
  ex.context_turn_ids = {2, 2, 2, 1, 1};
  ex.context_role_ids = {0, 0, 0, 1, 1};
  ex.response_ids = {Vocab::kStartId, 9, 10, Vocab::kEndId};
  ex.response_turn_id = 0;
  ex.response_role_id = 0;
  if (with_negative) ex.negatives = {{Vocab::kStartId, 9, 6, Vocab::kEndId}};
  return ex;
}

}  // namespace cvaet::testing
