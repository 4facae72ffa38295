#pragma once

#include <string>

#include "misdd/nn/parameters.h"
#include "misdd/nn/tape.h"

namespace misdd::nn {

struct Linear {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out

  static Linear init(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng);
  static Linear bind(ParameterStore& store, const std::string& name);
  Var operator()(Tape& tape, Var x) const;
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  static LayerNorm init(ParameterStore& store, const std::string& name, Eigen::Index width);
  static LayerNorm bind(ParameterStore& store, const std::string& name);
  Var operator()(Tape& tape, Var x) const;
};

/// softmax(V V^T / sqrt(d_k)) V per head, heads concatenated. `v` holds the
/// already projected tokens (n x d). Only the first `query_rows` output rows are
/// computed (all rows when negative); every row of `v` acts as key and value.
Var consistent_attention(Var v, int heads, Eigen::Index query_rows = -1);

/// Multi-head consistent self-attention: shared value projection, attention
/// over VV^T, output projection.
struct ConsistentSelfAttention {
  Linear value;
  Linear out;
  int heads = 1;

  static ConsistentSelfAttention init(ParameterStore& store, const std::string& name, Eigen::Index width, int heads,
                                      Rng& rng);
  static ConsistentSelfAttention bind(ParameterStore& store, const std::string& name, int heads);
  Var operator()(Tape& tape, Var x) const;
};

/// Pre-norm residual block: x + attn(ln1(x)), then + mlp(ln2(x)).
struct TransformerBlock {
  LayerNorm ln1;
  ConsistentSelfAttention attn;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;

  static TransformerBlock init(ParameterStore& store, const std::string& name, Eigen::Index width, int heads,
                               Eigen::Index mlp_hidden, Rng& rng);
  static TransformerBlock bind(ParameterStore& store, const std::string& name, int heads);
  Var operator()(Tape& tape, Var x) const;
  // Output restricted to the first `query_rows` rows; all rows still attend.
  Var operator()(Tape& tape, Var x, Eigen::Index query_rows) const;
};

}  // namespace misdd::nn
