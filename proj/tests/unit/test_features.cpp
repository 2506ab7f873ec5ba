#include "speechsql/features.hpp"
#include "support.hpp"

#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <set>

using namespace speechsql;

namespace {

Waveform sine(double hz, int n, int rate = 16000) {
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w.samples[i] = 0.5 * std::sin(2.0 * std::numbers::pi * hz * i / rate);
  return w;
}

// Frames counted by literally sliding the window.
int framing_oracle(std::size_t n) {
  int frames = 0;
  for (std::size_t start = 0; start + kFrameLength <= n; start += kFrameHop) ++frames;
  return frames;
}

// Strongest DFT bin of one Hamming-windowed frame, evaluated directly.
double dft_peak_hz(const Waveform& w, std::size_t start) {
  double best = -1.0, best_hz = 0.0;
  for (int k = 1; k < kFrameLength / 2; ++k) {
    std::complex<double> acc = 0.0;
    for (int t = 0; t < kFrameLength; ++t) {
      double win = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * t / (kFrameLength - 1));
      acc += win * w.samples[start + t] * std::polar(1.0, -2.0 * std::numbers::pi * k * t / kFrameLength);
    }
    if (std::norm(acc) > best) {
      best = std::norm(acc);
      best_hz = static_cast<double>(k) * w.sample_rate / kFrameLength;
    }
  }
  return best_hz;
}

int argmax_band(const SpeechFeatures& f, Eigen::Index row) {
  Eigen::Index idx = 0;
  f.data.row(row).maxCoeff(&idx);
  return static_cast<int>(idx);
}

}  // namespace

TEST_SUITE("features") {
  TEST_CASE("one second of silence yields 30 frames at the log floor") {
    Waveform w;
    w.samples.assign(16000, 0.0);
    auto f = extract_logmel(w);
    CHECK(framing_oracle(16000) == 30);
    CHECK(f.frames() == framing_oracle(16000));
    CHECK(f.data.cols() == kMelBands);
    CHECK((f.data.array() == std::log(1e-10)).all());
  }

  TEST_CASE("frame count matches the sliding-window oracle") {
    for (std::size_t n : {1024u, 1025u, 1535u, 1536u, 2048u, 4000u, 16000u, 48001u})
      CHECK(logmel_frame_count(n) == framing_oracle(n));
  }

  TEST_CASE("input shorter than a window is rejected") {
    Waveform w;
    w.samples.assign(500, 0.1);
    CHECK_CODE(extract_logmel(w), ErrorCode::kInputTooShort);
  }

  TEST_CASE("a 440 Hz tone peaks in the band nearest its DFT peak") {
    auto w = sine(440.0, 16000);
    auto f = extract_logmel(w);
    REQUIRE(f.frames() == 30);
    int band = argmax_band(f, 1);
    for (Eigen::Index r = 1; r + 1 < f.frames(); ++r) CHECK(argmax_band(f, r) == band);

    double peak = dft_peak_hz(w, 10 * kFrameHop);
    auto centers = mel_band_centers(16000);
    int nearest = 0;
    for (int b = 1; b < kMelBands; ++b)
      if (std::abs(centers[b] - peak) < std::abs(centers[nearest] - peak)) nearest = b;
    CHECK(std::abs(band - nearest) <= 1);
  }

  TEST_CASE("mel scale is the HTK formula and invertible") {
    CHECK(hz_to_mel(0.0) == doctest::Approx(0.0));
    CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
    for (double hz : {50.0, 440.0, 3999.0, 8000.0}) CHECK(mel_to_hz(hz_to_mel(hz)) == doctest::Approx(hz));
    auto c = mel_band_centers(16000);
    REQUIRE(c.size() == static_cast<std::size_t>(kMelBands));
    for (std::size_t i = 1; i < c.size(); ++i) CHECK(c[i] > c[i - 1]);
    CHECK(c.back() < 8000.0);
  }

  TEST_CASE("extraction is deterministic") {
    auto w = sine(1234.0, 9000);
    CHECK(extract_logmel(w).data == extract_logmel(w).data);
  }

  TEST_CASE("pad_or_resample") {
    std::mt19937_64 rng(3);
    SUBCASE("zero padding") {
      SpeechFeatures f;
      f.data = testing::random_matrix(10, kMelBands, rng);
      auto g = pad_or_resample(f, 16);
      REQUIRE(g.frames() == 16);
      CHECK(g.data.topRows(10) == f.data);
      CHECK((g.data.bottomRows(6).array() == 0.0).all());
    }
    SUBCASE("identity") {
      SpeechFeatures f;
      f.data = testing::random_matrix(16, kMelBands, rng);
      CHECK(pad_or_resample(f, 16).data == f.data);
    }
    SUBCASE("uniform selection") {
      SpeechFeatures f;
      f.data = testing::random_matrix(20, kMelBands, rng);
      auto g = pad_or_resample(f, 10);
      REQUIRE(g.frames() == 10);
      for (int i = 0; i < 10; ++i) {
        int src = static_cast<int>(std::floor(i * 19.0 / 9.0 + 0.5));
        CHECK(g.data.row(i) == f.data.row(src));
      }
      CHECK(g.data.row(0) == f.data.row(0));
      CHECK(g.data.row(9) == f.data.row(19));
    }
  }

  TEST_CASE("pseudo speech is built from per-token blocks") {
    PseudoTTSConfig cfg;
    auto a = synth_pseudo_speech({"min", "draws"}, cfg);
    auto b = synth_pseudo_speech({"min", "byes"}, cfg);
    REQUIRE(a.frames() == 2 * cfg.frames_per_token);
    CHECK(a.data.cols() == kMelBands);
    CHECK(a.data == synth_pseudo_speech({"min", "draws"}, cfg).data);
    CHECK(a.data.topRows(4) == b.data.topRows(4));
    CHECK(a.data.bottomRows(4) != b.data.bottomRows(4));
    CHECK(a.data.minCoeff() >= cfg.amplitude_low);
    CHECK(a.data.maxCoeff() <= cfg.amplitude_high);

    PseudoTTSConfig other = cfg;
    other.seed = 99;
    CHECK(synth_pseudo_speech({"min"}, other).data != synth_pseudo_speech({"min"}, cfg).data);
    CHECK_CODE(synth_pseudo_speech({}, cfg), ErrorCode::kEmptyInput);
  }

  TEST_CASE("feature files round-trip at float precision") {
    auto dir = testing::scratch_dir("features_sqlf");
    std::mt19937_64 rng(5);
    SpeechFeatures f;
    f.data = testing::random_matrix(7, kMelBands, rng);
    write_feature_file(dir / "x.sqlf", f);
    auto g = read_feature_file(dir / "x.sqlf");
    REQUIRE(g.frames() == 7);
    CHECK((g.data - f.data.cast<float>().cast<double>()).cwiseAbs().maxCoeff() == 0.0);

    std::ifstream is(dir / "x.sqlf", std::ios::binary);
    char magic[5];
    is.read(magic, 5);
    CHECK(std::string(magic, 5) == "SQLF1");
    CHECK(std::filesystem::file_size(dir / "x.sqlf") == 5 + 8 + 7 * kMelBands * 4);

    std::ofstream(dir / "bad.sqlf") << "garbage";
    CHECK_CODE(read_feature_file(dir / "bad.sqlf"), ErrorCode::kIo);
  }

  TEST_CASE("wav round-trips within 16-bit quantization") {
    auto dir = testing::scratch_dir("features_wav");
    auto w = sine(300.0, 3000, 8000);
    write_wav(dir / "a.wav", w);
    auto r = read_wav(dir / "a.wav");
    CHECK(r.sample_rate == 8000);
    REQUIRE(r.samples.size() == w.samples.size());
    for (std::size_t i = 0; i < w.samples.size(); ++i) CHECK(std::abs(r.samples[i] - w.samples[i]) < 1.0 / 32767.0);
  }
}
