#include "misdd/nn/layers.h"

#include <cmath>
#include <vector>

namespace misdd::nn {

Linear Linear::init(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) {
  Linear l;
  l.weight = &store.add(name + ".weight", linear_init(in, out, rng));
  l.bias = &store.add(name + ".bias", Matrix::Zero(1, out));
  return l;
}

Linear Linear::bind(ParameterStore& store, const std::string& name) {
  return {&store.at(name + ".weight"), &store.at(name + ".bias")};
}

Var Linear::operator()(Tape& tape, Var x) const {
  return add_row(matmul(x, tape.param(*weight)), tape.param(*bias));
}

LayerNorm LayerNorm::init(ParameterStore& store, const std::string& name, Eigen::Index width) {
  LayerNorm ln;
  ln.gain = &store.add(name + ".gain", Matrix::Ones(1, width));
  ln.bias = &store.add(name + ".bias", Matrix::Zero(1, width));
  return ln;
}

LayerNorm LayerNorm::bind(ParameterStore& store, const std::string& name) {
  return {&store.at(name + ".gain"), &store.at(name + ".bias")};
}

Var LayerNorm::operator()(Tape& tape, Var x) const { return layer_norm(x, tape.param(*gain), tape.param(*bias)); }

Var consistent_attention(Var v, int heads, Eigen::Index query_rows) {
  if (heads < 1 || v.cols() % heads != 0) {
    throw std::invalid_argument("consistent_attention: width " + std::to_string(v.cols()) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const Eigen::Index dk = v.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  const bool partial = query_rows >= 0 && query_rows < v.rows();
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var vh = heads == 1 ? v : slice_cols(v, h * dk, dk);
    Var q = partial ? slice_rows(vh, 0, query_rows) : vh;
    Var attn = softmax_rows(scale(matmul_nt(q, vh), inv_sqrt));
    outs.push_back(matmul(attn, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

ConsistentSelfAttention ConsistentSelfAttention::init(ParameterStore& store, const std::string& name,
                                                      Eigen::Index width, int heads, Rng& rng) {
  return {Linear::init(store, name + ".value", width, width, rng), Linear::init(store, name + ".out", width, width, rng),
          heads};
}

ConsistentSelfAttention ConsistentSelfAttention::bind(ParameterStore& store, const std::string& name, int heads) {
  return {Linear::bind(store, name + ".value"), Linear::bind(store, name + ".out"), heads};
}

Var ConsistentSelfAttention::operator()(Tape& tape, Var x) const {
  return out(tape, consistent_attention(value(tape, x), heads));
}

TransformerBlock TransformerBlock::init(ParameterStore& store, const std::string& name, Eigen::Index width, int heads,
                                        Eigen::Index mlp_hidden, Rng& rng) {
  TransformerBlock b;
  b.ln1 = LayerNorm::init(store, name + ".ln1", width);
  b.attn = ConsistentSelfAttention::init(store, name + ".attn", width, heads, rng);
  b.ln2 = LayerNorm::init(store, name + ".ln2", width);
  b.fc1 = Linear::init(store, name + ".fc1", width, mlp_hidden, rng);
  b.fc2 = Linear::init(store, name + ".fc2", mlp_hidden, width, rng);
  return b;
}

TransformerBlock TransformerBlock::bind(ParameterStore& store, const std::string& name, int heads) {
  return {LayerNorm::bind(store, name + ".ln1"), ConsistentSelfAttention::bind(store, name + ".attn", heads),
          LayerNorm::bind(store, name + ".ln2"), Linear::bind(store, name + ".fc1"), Linear::bind(store, name + ".fc2")};
}

Var TransformerBlock::operator()(Tape& tape, Var x) const {
  Var h = add(x, attn(tape, ln1(tape, x)));
  return add(h, fc2(tape, gelu(fc1(tape, ln2(tape, h)))));
}

Var TransformerBlock::operator()(Tape& tape, Var x, Eigen::Index query_rows) const {
  Var a = attn.out(tape, consistent_attention(attn.value(tape, ln1(tape, x)), attn.heads, query_rows));
  Var h = add(slice_rows(x, 0, query_rows), a);
  return add(h, fc2(tape, gelu(fc1(tape, ln2(tape, h)))));
}

}  // namespace misdd::nn
