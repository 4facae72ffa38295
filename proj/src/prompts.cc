#include "misdd/prompts.h"

#include <algorithm>
#include <stdexcept>

namespace misdd {

using nn::Matrix;
using nn::Var;

std::string msp_name(Branch b) { return std::string("msp/") + branch_tag(b); }

std::string map_name(Branch b, int layer) {
  return std::string("map.") + branch_tag(b) + "/layer" + std::to_string(layer);
}

PromptBundle PromptBundle::init(nn::ParameterStore& store, const PromptConfig& config, int prompt_depth, int width,
                                int heads, Rng& rng) {
  if ((config.use_ccp && config.l_ccp < 1) || (config.use_msp && config.l_msp < 1) ||
      (config.use_map && config.l_map < 1)) {
    throw std::invalid_argument("enabled prompts need length >= 1");
  }
  if (width < 1 || heads < 1 || width % heads != 0) throw std::invalid_argument("prompt width/heads mismatch");
  if (config.use_ccp) store.add("ccp/tokens", nn::normal_matrix(config.l_ccp, width, kPromptInitStd, rng));
  for (Branch b : kBranches) {
    if (config.use_msp) nn::Linear::init(store, msp_name(b), width, width, rng);
    if (config.use_map) {
      for (int j = 0; j < prompt_depth; ++j) {
        store.add(map_name(b, j), nn::normal_matrix(config.l_map, width, kPromptInitStd, rng));
      }
    }
  }
  return bind(store, config, prompt_depth, width, heads);
}

PromptBundle PromptBundle::bind(nn::ParameterStore& store, const PromptConfig& config, int prompt_depth, int width,
                                int heads) {
  PromptBundle p;
  p.config = config;
  p.prompt_depth = prompt_depth;
  p.width = width;
  p.heads = heads;
  auto check = [&](const nn::Parameter& q, Eigen::Index rows) {
    if (q.value.rows() != rows || q.value.cols() != width) {
      throw std::invalid_argument("prompt parameter '" + q.name + "' does not match the encoder width");
    }
  };
  if (config.use_ccp) {
    p.ccp = &store.at("ccp/tokens");
    check(*p.ccp, config.l_ccp);
  }
  for (Branch b : kBranches) {
    const int i = static_cast<int>(b);
    if (config.use_msp) p.msp[i] = nn::Linear::bind(store, msp_name(b));
    if (config.use_map) {
      for (int j = 0; j < prompt_depth; ++j) {
        p.map[i].push_back(&store.at(map_name(b, j)));
        check(*p.map[i].back(), config.l_map);
      }
    }
  }
  return p;
}

Matrix stride_pool_matrix(int l, Eigen::Index n) {
  if (l < 1 || n < 1) throw std::invalid_argument("stride_pool_matrix: empty input");
  Matrix pool = Matrix::Zero(l, n);
  for (int g = 0; g < l; ++g) {
    Eigen::Index start = std::min<Eigen::Index>(g * n / l, n - 1);
    Eigen::Index end = std::max<Eigen::Index>((g + 1) * n / l, start + 1);
    for (Eigen::Index r = start; r < end; ++r) pool(g, r) = 1.0 / static_cast<double>(end - start);
  }
  return pool;
}

Var generate_msp(nn::Tape& tape, Var x, const nn::Linear& w, int heads, int l_msp) {
  if (!x.value().allFinite()) throw std::domain_error("generate_msp: non-finite input");
  Var attended = nn::consistent_attention(w(tape, x), heads);
  return nn::matmul(tape.constant(stride_pool_matrix(l_msp, x.rows())), attended);
}

Var refine_prompt(Var prompt, Var tokens, int heads) {
  if (tokens.rows() > 0 && tokens.cols() != prompt.cols()) {
    throw std::invalid_argument("refine_prompt: prompt and token widths differ");
  }
  if (tokens.rows() == 0) return nn::consistent_attention(prompt, heads);
  const std::array<Var, 2> parts{prompt, tokens};
  return nn::consistent_attention(nn::concat_rows(parts), heads, prompt.rows());
}

InjectResult inject(Var tokens, const InjectedPrompts& prompts, int heads) {
  InjectResult result;
  std::vector<Var> parts;
  const bool any = prompts.ccp.valid() || prompts.msp.valid() || prompts.map.valid();
  if (!any) {
    result.extended = tokens;
    return result;
  }
  auto add_part = [&](Var p) {
    if (!p.valid()) return Var{};
    if (p.cols() != tokens.cols()) throw std::invalid_argument("inject: prompt width does not match tokens");
    Var refined = refine_prompt(p, tokens, heads);
    result.prompt_rows += refined.rows();
    parts.push_back(refined);
    return refined;
  };
  add_part(prompts.ccp);
  add_part(prompts.msp);
  result.map_out = add_part(prompts.map);
  parts.push_back(tokens);
  result.extended = nn::concat_rows(parts);
  return result;
}

}  // namespace misdd
