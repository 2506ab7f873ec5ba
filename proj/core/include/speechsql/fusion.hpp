#pragma once

// Cosine schema linking and the speech/schema co-attention encoder.

#include "speechsql/autograd.hpp"
#include "speechsql/params.hpp"

#include <random>
#include <vector>

namespace speechsql {

struct FusionConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 1024;
  int d_model = 512;
  double dropout = 0.3;
  bool use_positional_encoding = true;
};

void init_fusion(ParamStore& store, const FusionConfig& cfg, std::mt19937_64& rng);

/// g[i][j] = cosine(Z_a row i, Z_s row j); zero rows score 0.
ag::Var link_scores(const ag::Var& za, const ag::Var& zs);
/// Z_a + g Z_s.
ag::Var apply_linking(const ag::Var& za, const ag::Var& zs, const ag::Var& g);

/// Sinusoidal encoding: sin on even columns, cos on odd, base 10000.
ag::Matrix positional_encoding(Eigen::Index rows, Eigen::Index d_model);

struct FusedEmbeddings {
  ag::Var za;
  ag::Var zs;
};

/// Attention probabilities of every head, in call order per layer:
/// speech self, speech->schema, schema self, schema->speech.
struct FusionTrace {
  std::vector<ag::AttentionTrace> attention;
};

/// speech_valid marks unpadded rows of za (empty = all valid).
FusedEmbeddings fuse(ag::Context& ctx, ParamStore& store, const FusionConfig& cfg, const ag::Var& za,
                     const ag::Var& zs, const std::vector<bool>& speech_valid, FusionTrace* trace = nullptr);

}  // namespace speechsql
