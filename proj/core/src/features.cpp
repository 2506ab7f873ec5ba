#include "speechsql/features.hpp"

#include "speechsql/error.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

namespace speechsql {

namespace {

// Triangular filter weights over the rfft bins, one row per mel band.
ag::Matrix mel_filterbank(int sample_rate) {
  const int n_bins = kFrameLength / 2 + 1;
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(kMelBands + 2);
  for (int i = 0; i < kMelBands + 2; ++i) edges[i] = mel_to_hz(top * i / (kMelBands + 1));
  ag::Matrix fb = ag::Matrix::Zero(kMelBands, n_bins);
  for (int m = 0; m < kMelBands; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / kFrameLength;
      if (f > lo && f <= center) fb(m, k) = (f - lo) / (center - lo);
      else if (f > center && f < hi) fb(m, k) = (hi - f) / (hi - center);
    }
  }
  return fb;
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_band_centers(int sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> c(kMelBands);
  for (int m = 0; m < kMelBands; ++m) c[m] = mel_to_hz(top * (m + 1) / (kMelBands + 1));
  return c;
}

Eigen::Index logmel_frame_count(std::size_t n_samples) {
  if (n_samples < static_cast<std::size_t>(kFrameLength)) return 0;
  return static_cast<Eigen::Index>((n_samples - kFrameLength) / kFrameHop + 1);
}

SpeechFeatures extract_logmel(const Waveform& w, const LogMelOptions& opts) {
  if (w.sample_rate <= 0) throw Error(ErrorCode::kInvalidArgument, "sample_rate must be positive");
  if (w.samples.size() < static_cast<std::size_t>(kFrameLength))
    throw Error(ErrorCode::kInputTooShort, "waveform has " + std::to_string(w.samples.size()) +
                                               " samples, need at least one 1024-sample window");
  const Eigen::Index frames = logmel_frame_count(w.samples.size());
  const ag::Matrix fb = mel_filterbank(w.sample_rate);
  std::vector<double> window(kFrameLength);
  for (int n = 0; n < kFrameLength; ++n)
    window[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (kFrameLength - 1));

  Eigen::FFT<double> fft;
  std::vector<double> frame(kFrameLength);
  std::vector<std::complex<double>> spectrum;
  Eigen::VectorXd power(kFrameLength / 2 + 1);
  SpeechFeatures out;
  out.data.resize(frames, kMelBands);
  for (Eigen::Index t = 0; t < frames; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * kFrameHop;
    for (int n = 0; n < kFrameLength; ++n) frame[n] = w.samples[start + n] * window[n];
    fft.fwd(spectrum, frame);
    for (int k = 0; k <= kFrameLength / 2; ++k) power(k) = std::norm(spectrum[k]);
    Eigen::VectorXd energies = fb * power;
    for (int m = 0; m < kMelBands; ++m) out.data(t, m) = std::log(energies(m) + opts.log_floor);
  }
  if (opts.mean_center) out.data.rowwise() -= out.data.colwise().mean();
  return out;
}

SpeechFeatures pad_or_resample(const SpeechFeatures& f, Eigen::Index target_len) {
  if (target_len < 1) throw Error(ErrorCode::kInvalidArgument, "target_len must be >= 1");
  const Eigen::Index len = f.frames();
  SpeechFeatures out = f;
  if (len == target_len) return out;
  out.data = ag::Matrix::Zero(target_len, f.data.cols());
  if (len < target_len) {
    out.data.topRows(len) = f.data;
  } else if (target_len == 1) {
    out.data.row(0) = f.data.row(0);
  } else {
    for (Eigen::Index i = 0; i < target_len; ++i) {
      const auto src = static_cast<Eigen::Index>(
          std::lround(static_cast<double>(i) * static_cast<double>(len - 1) / static_cast<double>(target_len - 1)));
      out.data.row(i) = f.data.row(src);
    }
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

SpeechFeatures synth_pseudo_speech(const std::vector<std::string>& tokens, const PseudoTTSConfig& cfg) {
  if (tokens.empty()) throw Error(ErrorCode::kEmptyInput, "pseudo speech needs at least one token");
  if (cfg.frames_per_token < 1) throw Error(ErrorCode::kInvalidArgument, "frames_per_token must be >= 1");
  const int fpt = cfg.frames_per_token;
  SpeechFeatures out;
  out.data.resize(static_cast<Eigen::Index>(tokens.size()) * fpt, kMelBands);
  const double span = cfg.amplitude_high - cfg.amplitude_low;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    // Each token gets three formant-like bumps with a per-frame envelope plus
    // a fixed fine texture, all drawn from a token-and-seed keyed stream.
    std::mt19937_64 rng(fnv1a64(tokens[i]) ^ (cfg.seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    struct Bump { double center, width, height; };
    Bump bumps[3];
    for (auto& b : bumps) b = {unit(rng) * kMelBands, 2.0 + 6.0 * unit(rng), 0.4 + 0.6 * unit(rng)};
    for (int r = 0; r < fpt; ++r) {
      const double envelope = 0.6 + 0.4 * unit(rng);
      const double drift = (unit(rng) - 0.5) * 2.0;
      for (int m = 0; m < kMelBands; ++m) {
        double level = 0.0;
        for (const auto& b : bumps) {
          const double d = (m - b.center - drift) / b.width;
          level += b.height * std::exp(-0.5 * d * d);
        }
        level = envelope * std::min(level, 1.0) + 0.08 * unit(rng);
        out.data(static_cast<Eigen::Index>(i) * fpt + r, m) = cfg.amplitude_low + span * std::min(level, 1.0);
      }
    }
  }
  return out;
}

namespace {

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!is) throw Error(ErrorCode::kIo, "unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

void write_feature_file(const std::filesystem::path& path, const SpeechFeatures& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  os.write("SQLF1", 5);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.data.rows()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.data.cols()));
  for (Eigen::Index i = 0; i < f.data.size(); ++i) put_le<float>(os, static_cast<float>(f.data.data()[i]));
  if (!os) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

SpeechFeatures read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, "SQLF1", 5) != 0)
    throw Error(ErrorCode::kIo, path.string() + " is not a SQLF1 feature file");
  const auto rows = get_le<std::uint32_t>(is);
  const auto cols = get_le<std::uint32_t>(is);
  if (cols != static_cast<std::uint32_t>(kMelBands))
    throw Error(ErrorCode::kShapeMismatch, path.string() + " has " + std::to_string(cols) + " columns, expected 96");
  SpeechFeatures f;
  f.data.resize(rows, cols);
  for (Eigen::Index i = 0; i < f.data.size(); ++i) f.data.data()[i] = get_le<float>(is);
  return f;
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  char id[4];
  is.read(id, 4);
  if (!is || std::memcmp(id, "RIFF", 4) != 0) throw Error(ErrorCode::kIo, path.string() + ": not RIFF");
  get_le<std::uint32_t>(is);
  is.read(id, 4);
  if (!is || std::memcmp(id, "WAVE", 4) != 0) throw Error(ErrorCode::kIo, path.string() + ": not WAVE");
  Waveform w;
  bool have_fmt = false;
  while (is.read(id, 4)) {
    const auto size = get_le<std::uint32_t>(is);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      const auto format = get_le<std::uint16_t>(is);
      const auto channels = get_le<std::uint16_t>(is);
      w.sample_rate = static_cast<int>(get_le<std::uint32_t>(is));
      get_le<std::uint32_t>(is);
      get_le<std::uint16_t>(is);
      const auto bits = get_le<std::uint16_t>(is);
      if (format != 1 || channels != 1 || bits != 16)
        throw Error(ErrorCode::kIo, path.string() + ": only 16-bit mono PCM is supported");
      is.ignore(size - 16);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw Error(ErrorCode::kIo, path.string() + ": data chunk before fmt");
      w.samples.resize(size / 2);
      for (auto& s : w.samples) s = get_le<std::int16_t>(is) / 32768.0;
      return w;
    } else {
      is.ignore(size + (size & 1));
    }
  }
  throw Error(ErrorCode::kIo, path.string() + ": no data chunk");
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  const auto bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  os.write("RIFF", 4);
  put_le<std::uint32_t>(os, 36 + bytes);
  os.write("WAVEfmt ", 8);
  put_le<std::uint32_t>(os, 16);
  put_le<std::uint16_t>(os, 1);
  put_le<std::uint16_t>(os, 1);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(w.sample_rate * 2));
  put_le<std::uint16_t>(os, 2);
  put_le<std::uint16_t>(os, 16);
  os.write("data", 4);
  put_le<std::uint32_t>(os, bytes);
  for (double s : w.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    put_le<std::int16_t>(os, static_cast<std::int16_t>(std::lround(c * 32767.0)));
  }
}

}  // namespace speechsql
