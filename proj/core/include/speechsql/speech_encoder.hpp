#pragma once

// Stacked Conv-BN-ReLU blocks over (time, mel) feature maps, collapsed to a
// (frames, d_model) speech embedding.

#include "speechsql/autograd.hpp"
#include "speechsql/features.hpp"
#include "speechsql/params.hpp"

#include <random>
#include <string>
#include <vector>

namespace speechsql {

enum class MelReduce { kMean, kFlatten };

struct SpeechEncoderConfig {
  int n_blocks = 6;
  int channels = 128;
  /// 1-based block indices that stride by 2 along time.
  std::vector<int> time_stride_blocks = {2, 4, 6};
  /// 1-based block indices that stride by 2 along mel (none by default).
  std::vector<int> mel_stride_blocks = {};
  MelReduce mel_reduce = MelReduce::kMean;
  int d_model = 512;

  int output_frames(int input_frames) const;
  int output_mel() const;
};

/// Geometry of block b (0-based).
ag::ConvGeometry block_geometry(const SpeechEncoderConfig& cfg, int block);

/// Registers parameters under `prefix` ("speech." by default).
void init_speech_encoder(ParamStore& store, const SpeechEncoderConfig& cfg, std::mt19937_64& rng,
                         const std::string& prefix = "speech.");

/// Feature maps seen by each block, kept so a mirrored decoder can restore
/// the exact input geometry.
struct SpeechEncoderTrace {
  std::vector<ag::MapShape> block_inputs;
  ag::MapShape final_map;
};

/// Encodes a batch of equal-length feature matrices. Returns
/// (batch*l_out, d_model), utterance-major.
ag::Var encode_speech_batch(ag::Context& ctx, ParamStore& store, const SpeechEncoderConfig& cfg,
                            const std::vector<const ag::Matrix*>& features, SpeechEncoderTrace* trace = nullptr,
                            const std::string& prefix = "speech.");

/// Single utterance in inference mode (running BN statistics).
ag::Matrix encode_speech(const SpeechFeatures& f, const SpeechEncoderConfig& cfg, ParamStore& store,
                         const std::string& prefix = "speech.");

/// Permutes a (C, batch*H*W) map into (batch*H, C*W) rows, one per frame.
ag::Var maps_to_frames(const ag::Var& maps, const ag::MapShape& shape);
/// Inverse of maps_to_frames.
ag::Var frames_to_maps(const ag::Var& frames, int channels, const ag::MapShape& shape);

}  // namespace speechsql
