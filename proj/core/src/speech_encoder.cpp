#include "speechsql/speech_encoder.hpp"

#include "speechsql/error.hpp"

#include <algorithm>
#include <cmath>

namespace speechsql {

namespace {

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

std::string block_name(const std::string& prefix, const char* kind, int b) {
  return prefix + kind + std::to_string(b);
}

}  // namespace

ag::ConvGeometry block_geometry(const SpeechEncoderConfig& cfg, int block) {
  ag::ConvGeometry g;
  g.stride_h = contains(cfg.time_stride_blocks, block + 1) ? 2 : 1;
  g.stride_w = contains(cfg.mel_stride_blocks, block + 1) ? 2 : 1;
  return g;
}

int SpeechEncoderConfig::output_frames(int input_frames) const {
  int h = input_frames;
  for (int b = 0; b < n_blocks; ++b) h = block_geometry(*this, b).out_h(h);
  return h;
}

int SpeechEncoderConfig::output_mel() const {
  int w = kMelBands;
  for (int b = 0; b < n_blocks; ++b) w = block_geometry(*this, b).out_w(w);
  return w;
}

void init_speech_encoder(ParamStore& store, const SpeechEncoderConfig& cfg, std::mt19937_64& rng,
                         const std::string& prefix) {
  if (cfg.n_blocks < 1 || cfg.channels < 1 || cfg.d_model < 1)
    throw Error(ErrorCode::kInvalidArgument, "speech encoder needs n_blocks, channels, d_model >= 1");
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const int c_in = b == 0 ? 1 : cfg.channels;
    const double fan_in = c_in * 9.0;
    store.create(block_name(prefix, "conv", b) + ".w",
                 init::uniform(cfg.channels, c_in * 9, std::sqrt(6.0 / fan_in), rng));
    store.create(block_name(prefix, "bn", b) + ".gamma", init::ones(cfg.channels, 1));
    store.create(block_name(prefix, "bn", b) + ".beta", init::zeros(cfg.channels, 1));
    store.create(block_name(prefix, "bn", b) + ".mean", init::zeros(cfg.channels, 1), false);
    store.create(block_name(prefix, "bn", b) + ".var", init::ones(cfg.channels, 1), false);
  }
  const int in_dim = cfg.mel_reduce == MelReduce::kMean ? cfg.channels : cfg.channels * cfg.output_mel();
  store.create(prefix + "proj.w", init::xavier(in_dim, cfg.d_model, rng));
  store.create(prefix + "proj.b", init::zeros(1, cfg.d_model));
}

ag::Var maps_to_frames(const ag::Var& maps, const ag::MapShape& s) {
  const Eigen::Index c = maps.rows();
  const Eigen::Index hw = static_cast<Eigen::Index>(s.height) * s.width;
  if (maps.cols() != s.batch * hw) throw Error(ErrorCode::kShapeMismatch, "maps_to_frames: map shape");
  std::vector<int> index(static_cast<std::size_t>(maps.value().size()));
  std::size_t k = 0;
  for (int b = 0; b < s.batch; ++b)
    for (int h = 0; h < s.height; ++h)
      for (Eigen::Index ch = 0; ch < c; ++ch)
        for (int w = 0; w < s.width; ++w)
          index[k++] = static_cast<int>(ch * maps.cols() + b * hw + static_cast<Eigen::Index>(h) * s.width + w);
  return ag::gather_elements(maps, std::move(index), static_cast<Eigen::Index>(s.batch) * s.height,
                             c * s.width);
}

ag::Var frames_to_maps(const ag::Var& frames, int channels, const ag::MapShape& s) {
  const Eigen::Index hw = static_cast<Eigen::Index>(s.height) * s.width;
  if (frames.rows() != static_cast<Eigen::Index>(s.batch) * s.height || frames.cols() != channels * s.width)
    throw Error(ErrorCode::kShapeMismatch, "frames_to_maps: frame shape");
  std::vector<int> index(static_cast<std::size_t>(frames.value().size()));
  std::size_t k = 0;
  for (int ch = 0; ch < channels; ++ch)
    for (int b = 0; b < s.batch; ++b)
      for (int h = 0; h < s.height; ++h)
        for (int w = 0; w < s.width; ++w)
          index[k++] = static_cast<int>((static_cast<Eigen::Index>(b) * s.height + h) * frames.cols() +
                                        static_cast<Eigen::Index>(ch) * s.width + w);
  (void)hw;
  return ag::gather_elements(frames, std::move(index), channels, s.batch * hw);
}

ag::Var encode_speech_batch(ag::Context& ctx, ParamStore& store, const SpeechEncoderConfig& cfg,
                            const std::vector<const ag::Matrix*>& features, SpeechEncoderTrace* trace,
                            const std::string& prefix) {
  if (features.empty()) throw Error(ErrorCode::kEmptyInput, "no utterances to encode");
  const Eigen::Index frames = features.front()->rows();
  if (frames < 1) throw Error(ErrorCode::kShapeMismatch, "utterance has no frames");
  ag::Matrix x(1, static_cast<Eigen::Index>(features.size()) * frames * kMelBands);
  for (std::size_t b = 0; b < features.size(); ++b) {
    const ag::Matrix& f = *features[b];
    if (f.rows() != frames || f.cols() != kMelBands)
      throw Error(ErrorCode::kShapeMismatch, "speech batch needs equal-length (frames, 96) inputs");
    std::copy(f.data(), f.data() + f.size(), x.data() + static_cast<Eigen::Index>(b) * frames * kMelBands);
  }
  ag::MapShape shape{static_cast<int>(features.size()), static_cast<int>(frames), kMelBands};
  ag::Var h = ag::constant(std::move(x));
  if (trace) trace->block_inputs.clear();
  for (int b = 0; b < cfg.n_blocks; ++b) {
    if (trace) trace->block_inputs.push_back(shape);
    ag::MapShape out;
    const std::string conv = block_name(prefix, "conv", b);
    const std::string bn = block_name(prefix, "bn", b);
    // No conv bias: batch norm's shift subsumes it.
    h = ag::conv2d(h, shape, ctx.param(store.at(conv + ".w")), ag::constant(ag::Matrix::Zero(cfg.channels, 1)),
                   block_geometry(cfg, b), &out);
    h = ag::batch_norm(h, ctx.param(store.at(bn + ".gamma")), ctx.param(store.at(bn + ".beta")),
                       store.at(bn + ".mean").value, store.at(bn + ".var").value, ctx.training());
    h = ag::relu(h);
    shape = out;
  }
  if (trace) trace->final_map = shape;
  ag::Var rows = maps_to_frames(h, shape);
  if (cfg.mel_reduce == MelReduce::kMean) {
    ag::Matrix pool = ag::Matrix::Zero(static_cast<Eigen::Index>(cfg.channels) * shape.width, cfg.channels);
    for (int c = 0; c < cfg.channels; ++c)
      for (int w = 0; w < shape.width; ++w) pool(static_cast<Eigen::Index>(c) * shape.width + w, c) = 1.0 / shape.width;
    rows = ag::matmul(rows, ag::constant(std::move(pool)));
  }
  return ag::linear(rows, ctx.param(store.at(prefix + "proj.w")), ctx.param(store.at(prefix + "proj.b")));
}

ag::Matrix encode_speech(const SpeechFeatures& f, const SpeechEncoderConfig& cfg, ParamStore& store,
                         const std::string& prefix) {
  ag::Context ctx(false, 0, false);
  return encode_speech_batch(ctx, store, cfg, {&f.data}, nullptr, prefix).value();
}

}  // namespace speechsql
