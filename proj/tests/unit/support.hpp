#pragma once

#include "speechsql/dataset.hpp"
#include "speechsql/error.hpp"
#include "speechsql/schema.hpp"

#include <doctest.h>

#include <filesystem>
#include <optional>
#include <random>
#include <string>

namespace testing {

inline std::filesystem::path data_dir() { return SPEECHSQL_DATA_DIR; }

inline const speechsql::SchemaStore& shipped_schemas() {
  static const speechsql::SchemaStore store = speechsql::load_schema_store(data_dir() / "schemas.json");
  return store;
}

/// The error code `f` throws, or nullopt when it returns normally.
template <class F>
std::optional<speechsql::ErrorCode> code_of(F&& f) {
  try {
    f();
  } catch (const speechsql::Error& e) {
    return e.code();
  }
  return std::nullopt;
}

#define CHECK_CODE(expr, code) CHECK(::testing::code_of([&] { (void)(expr); }) == (code))

/// Fresh directory under the system temp dir, removed first if present.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("speechsql_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline speechsql::ag::Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  speechsql::ag::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace testing
