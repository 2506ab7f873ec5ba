#pragma once

// Acoustic front end: waveform -> log-mel matrix, fixed-length resampling,
// and a deterministic token-to-feature synthesizer used in place of TTS.

#include "speechsql/autograd.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace speechsql {

inline constexpr int kMelBands = 96;
inline constexpr int kFrameLength = 1024;
inline constexpr int kFrameHop = 512;

struct Waveform {
  std::vector<double> samples;  // PCM in [-1, 1]
  int sample_rate = 16000;
};

struct SpeechFeatures {
  ag::Matrix data;  // (frames, 96) log-mel energies
  int frame_hop = kFrameHop;
  int frame_len = kFrameLength;

  Eigen::Index frames() const { return data.rows(); }
};

struct LogMelOptions {
  double log_floor = 1e-10;
  bool mean_center = false;  // per-utterance mean subtraction, off by default
};

/// Power spectrum of Hamming-windowed 1024-sample frames (hop 512), pooled by
/// 96 triangular HTK-mel filters spanning 0..sample_rate/2, then log(e + floor).
SpeechFeatures extract_logmel(const Waveform& w, const LogMelOptions& opts = {});

/// Number of frames extract_logmel produces for n samples.
Eigen::Index logmel_frame_count(std::size_t n_samples);

double hz_to_mel(double hz);
double mel_to_hz(double mel);
/// Center frequency (Hz) of each mel band for a given sample rate.
std::vector<double> mel_band_centers(int sample_rate);

/// Zero-pads (longer target) or uniformly selects rows
/// round(i*(l-1)/(target-1)) (shorter target); identity when equal.
SpeechFeatures pad_or_resample(const SpeechFeatures& f, Eigen::Index target_len);

struct PseudoTTSConfig {
  int frames_per_token = 4;
  std::uint64_t seed = 0;
  double amplitude_low = -6.0;
  double amplitude_high = 2.0;
};

/// Concatenation of fixed-size per-token blocks; a block depends only on the
/// token text and cfg.seed.
SpeechFeatures synth_pseudo_speech(const std::vector<std::string>& tokens, const PseudoTTSConfig& cfg = {});

std::uint64_t fnv1a64(std::string_view text);

// ---- file formats -------------------------------------------------------
/// "SQLF1", u32 rows, u32 cols, rows*cols float32, all little-endian.
void write_feature_file(const std::filesystem::path& path, const SpeechFeatures& f);
SpeechFeatures read_feature_file(const std::filesystem::path& path);

/// 16-bit mono PCM WAV.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w);

}  // namespace speechsql
