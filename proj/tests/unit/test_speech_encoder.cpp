#include "speechsql/speech_encoder.hpp"
#include "speechsql/train.hpp"
#include "support.hpp"

#include <cmath>

using namespace speechsql;

namespace {

SpeechEncoderConfig small_config() {
  SpeechEncoderConfig cfg;
  cfg.n_blocks = 3;
  cfg.channels = 4;
  cfg.time_stride_blocks = {1, 3};
  cfg.d_model = 8;
  return cfg;
}

SpeechFeatures random_features(int frames, std::mt19937_64& rng) {
  SpeechFeatures f;
  f.data = testing::random_matrix(frames, kMelBands, rng);
  return f;
}

}  // namespace

TEST_SUITE("speech_encoder") {
  TEST_CASE("default configuration maps 64 frames to 8 rows of width 512") {
    SpeechEncoderConfig cfg;
    std::mt19937_64 rng(1);
    ParamStore store;
    init_speech_encoder(store, cfg, rng);
    auto f = random_features(64, rng);
    auto z = encode_speech(f, cfg, store);
    CHECK(z.rows() == 8);
    CHECK(z.cols() == 512);
    CHECK(encode_speech(f, cfg, store) == z);
  }

  TEST_CASE("a single frame is encoded to one finite row") {
    SpeechEncoderConfig cfg;
    std::mt19937_64 rng(2);
    ParamStore store;
    init_speech_encoder(store, cfg, rng);
    auto z = encode_speech(random_features(1, rng), cfg, store);
    CHECK(z.rows() == 1);
    CHECK(z.cols() == 512);
    CHECK(z.allFinite());
  }

  TEST_CASE("output length is the ceiling of the input over the time stride") {
    SpeechEncoderConfig cfg;
    for (int l = 1; l <= 4096; ++l) REQUIRE(cfg.output_frames(l) == (l + 7) / 8);
    auto small = small_config();
    std::mt19937_64 rng(3);
    ParamStore store;
    init_speech_encoder(store, small, rng);
    for (int l : {1, 2, 3, 5, 8, 13, 33}) {
      auto z = encode_speech(random_features(l, rng), small, store);
      CHECK(z.rows() == (l + 3) / 4);
      CHECK(z.rows() == small.output_frames(l));
    }
  }

  TEST_CASE("inference-mode batching does not mix utterances") {
    auto cfg = small_config();
    std::mt19937_64 rng(4);
    ParamStore store;
    init_speech_encoder(store, cfg, rng);
    auto a = random_features(12, rng), b = random_features(12, rng);
    ag::Context ctx(false, 0, false);
    auto both = encode_speech_batch(ctx, store, cfg, {&a.data, &b.data});
    REQUIRE(both.rows() == 6);
    auto za = encode_speech(a, cfg, store), zb = encode_speech(b, cfg, store);
    CHECK((both.value().topRows(3) - za).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((both.value().bottomRows(3) - zb).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("training mode updates running statistics") {
    auto cfg = small_config();
    std::mt19937_64 rng(5);
    ParamStore store;
    init_speech_encoder(store, cfg, rng);
    auto a = random_features(12, rng);
    ag::Matrix before = store.at("speech.bn0.mean").value;
    ag::Context ctx(true, 0);
    encode_speech_batch(ctx, store, cfg, {&a.data});
    CHECK(store.at("speech.bn0.mean").value != before);
  }

  TEST_CASE("frame layout conversions are inverse") {
    std::mt19937_64 rng(6);
    ag::MapShape s{2, 3, 5};
    auto maps = ag::constant(testing::random_matrix(4, 2 * 3 * 5, rng));
    auto frames = maps_to_frames(maps, s);
    CHECK(frames.rows() == 6);
    CHECK(frames.cols() == 20);
    // Row (b=1, h=2) holds channel 3's mel column 4 at offset 3*5+4.
    CHECK(frames.value()(1 * 3 + 2, 3 * 5 + 4) == maps.value()(3, 1 * 15 + 2 * 5 + 4));
    CHECK(frames_to_maps(frames, 4, s).value() == maps.value());
  }

  TEST_CASE("mean and flatten reductions give the configured width") {
    std::mt19937_64 rng(7);
    for (auto reduce : {MelReduce::kMean, MelReduce::kFlatten}) {
      auto cfg = small_config();
      cfg.mel_reduce = reduce;
      cfg.mel_stride_blocks = {2};
      ParamStore store;
      init_speech_encoder(store, cfg, rng);
      CHECK(cfg.output_mel() == 48);
      auto z = encode_speech(random_features(9, rng), cfg, store);
      CHECK(z.cols() == 8);
      CHECK(z.allFinite());
    }
  }

  TEST_CASE("gradient check on the toy encoder") {
    auto r = grad_check("speech_encoder");
    CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst_parameter);
    CHECK(r.entries_checked > 0);
  }
}
