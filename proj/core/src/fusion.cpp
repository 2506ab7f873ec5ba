#include "speechsql/fusion.hpp"

#include "speechsql/error.hpp"

#include <cmath>
#include <string>

namespace speechsql {

namespace {

std::string layer_name(int l, char side) { return "fusion.l" + std::to_string(l) + "." + side + "."; }

struct Side {
  ag::Var q, k, v;
};

}  // namespace

void init_fusion(ParamStore& store, const FusionConfig& cfg, std::mt19937_64& rng) {
  if (cfg.n_heads < 1 || cfg.d_model % cfg.n_heads != 0)
    throw Error(ErrorCode::kInvalidArgument, "d_model must be divisible by n_heads");
  const int d = cfg.d_model;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (char side : {'a', 's'}) {
      const std::string p = layer_name(l, side);
      for (const char* w : {"wq", "wk", "wv", "wo_sa", "wo_ca"}) store.create(p + w, init::xavier(d, d, rng));
      store.create(p + "ln1.g", init::ones(1, d));
      store.create(p + "ln1.b", init::zeros(1, d));
      store.create(p + "ln2.g", init::ones(1, d));
      store.create(p + "ln2.b", init::zeros(1, d));
      store.create(p + "ff.w1", init::xavier(d, cfg.d_ff, rng));
      store.create(p + "ff.b1", init::zeros(1, cfg.d_ff));
      store.create(p + "ff.w2", init::xavier(cfg.d_ff, d, rng));
      store.create(p + "ff.b2", init::zeros(1, d));
    }
  }
}

ag::Var link_scores(const ag::Var& za, const ag::Var& zs) {
  if (za.cols() != zs.cols()) throw Error(ErrorCode::kShapeMismatch, "link_scores: widths differ");
  return ag::matmul_nt(ag::normalize_rows(za), ag::normalize_rows(zs));
}

ag::Var apply_linking(const ag::Var& za, const ag::Var& zs, const ag::Var& g) {
  if (g.rows() != za.rows() || g.cols() != zs.rows() || za.cols() != zs.cols())
    throw Error(ErrorCode::kShapeMismatch, "apply_linking: g must be (l_a, l_s)");
  return ag::add(za, ag::matmul(g, zs));
}

ag::Matrix positional_encoding(Eigen::Index rows, Eigen::Index d_model) {
  ag::Matrix pe(rows, d_model);
  for (Eigen::Index pos = 0; pos < rows; ++pos)
    for (Eigen::Index i = 0; i < d_model; ++i) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * (i / 2)) / d_model);
      pe(pos, i) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

FusedEmbeddings fuse(ag::Context& ctx, ParamStore& store, const FusionConfig& cfg, const ag::Var& za_in,
                     const ag::Var& zs_in, const std::vector<bool>& speech_valid, FusionTrace* trace) {
  if (za_in.cols() != cfg.d_model || zs_in.cols() != cfg.d_model)
    throw Error(ErrorCode::kShapeMismatch, "fuse: inputs must be d_model wide");
  if (!speech_valid.empty() && static_cast<Eigen::Index>(speech_valid.size()) != za_in.rows())
    throw Error(ErrorCode::kShapeMismatch, "fuse: speech mask length differs from Z_a rows");
  ag::Var za = za_in;
  ag::Var zs = zs_in;
  if (cfg.use_positional_encoding) za = ag::add(za, ag::constant(positional_encoding(za.rows(), cfg.d_model)));

  auto P = [&](const std::string& name) { return ctx.param(store.at(name)); };
  auto record = [&](ag::AttentionTrace& t) {
    if (trace) trace->attention.push_back(std::move(t));
  };
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pa = layer_name(l, 'a'), ps = layer_name(l, 's');
    Side a{ag::matmul(za, P(pa + "wq")), ag::matmul(za, P(pa + "wk")), ag::matmul(za, P(pa + "wv"))};
    Side s{ag::matmul(zs, P(ps + "wq")), ag::matmul(zs, P(ps + "wk")), ag::matmul(zs, P(ps + "wv"))};

    ag::AttentionTrace t1, t2, t3, t4;
    ag::Var sa_a = ag::matmul(ag::attention(a.q, a.k, a.v, cfg.n_heads, speech_valid, 0.0, trace ? &t1 : nullptr),
                              P(pa + "wo_sa"));
    ag::Var ca_a = ag::matmul(ag::attention(a.q, s.k, s.v, cfg.n_heads, {}, 0.0, trace ? &t2 : nullptr),
                              P(pa + "wo_ca"));
    ag::Var sa_s = ag::matmul(ag::attention(s.q, s.k, s.v, cfg.n_heads, {}, 0.0, trace ? &t3 : nullptr),
                              P(ps + "wo_sa"));
    ag::Var ca_s = ag::matmul(ag::attention(s.q, a.k, a.v, cfg.n_heads, speech_valid, 0.0, trace ? &t4 : nullptr),
                              P(ps + "wo_ca"));
    record(t1);
    record(t2);
    record(t3);
    record(t4);

    auto block = [&](const ag::Var& z, const ag::Var& sa, const ag::Var& ca, const std::string& p) {
      ag::Var y = ag::dropout(ctx, ag::add(sa, ca), cfg.dropout);
      y = ag::layer_norm(ag::add(y, z), P(p + "ln1.g"), P(p + "ln1.b"));
      ag::Var ff = ag::linear(ag::relu(ag::linear(y, P(p + "ff.w1"), P(p + "ff.b1"))), P(p + "ff.w2"), P(p + "ff.b2"));
      ff = ag::dropout(ctx, ff, cfg.dropout);
      return ag::layer_norm(ag::add(ff, y), P(p + "ln2.g"), P(p + "ln2.b"));
    };
    ag::Var za_next = block(za, sa_a, ca_a, pa);
    ag::Var zs_next = block(zs, sa_s, ca_s, ps);
    za = za_next;
    zs = zs_next;
  }
  return {za, zs};
}

}  // namespace speechsql
