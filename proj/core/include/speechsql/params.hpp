#pragma once

#include "speechsql/autograd.hpp"

#include <iosfwd>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace speechsql {

/// Owns every named tensor of a model. Parameter addresses are stable for
/// the lifetime of the store.
class ParamStore {
 public:
  ag::Parameter& create(const std::string& name, ag::Matrix init, bool trainable = true);
  ag::Parameter* find(const std::string& name);
  const ag::Parameter* find(const std::string& name) const;
  ag::Parameter& at(const std::string& name);

  std::vector<ag::Parameter*> all();
  std::vector<const ag::Parameter*> all() const;
  /// Trainable parameters whose name starts with `prefix`.
  std::vector<ag::Parameter*> with_prefix(const std::string& prefix);
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  double grad_norm() const;
  /// Rescales gradients so their global L2 norm is at most max_norm.
  double clip_grad_norm(double max_norm);

 private:
  std::vector<std::unique_ptr<ag::Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct NamedTensor {
  std::string name;
  ag::Matrix value;
  bool trainable = true;
};

/// Binary tensor container: "SQLP1", u32 header-length + header bytes
/// (free-form, usually JSON), u32 count, then per tensor u32 name length,
/// name, u32 rows, u32 cols, u8 trainable, rows*cols little-endian f64.
void write_tensors(std::ostream& os, const std::string& header, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(std::istream& is, std::string* header);

std::vector<NamedTensor> snapshot(const ParamStore& store);

struct LoadReport {
  std::size_t loaded = 0;
  std::vector<std::string> missing;          // in store, absent from file
  std::vector<std::string> unexpected;       // in file, absent from store
  std::vector<std::string> shape_mismatch;
};

/// Copies tensors into same-named parameters; prefix filters the file side.
LoadReport load_into(ParamStore& store, const std::vector<NamedTensor>& tensors,
                     const std::string& prefix = "");

namespace init {
ag::Matrix xavier(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng);
ag::Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng);
ag::Matrix normal(Eigen::Index rows, Eigen::Index cols, double sd, std::mt19937_64& rng);
ag::Matrix zeros(Eigen::Index rows, Eigen::Index cols);
ag::Matrix ones(Eigen::Index rows, Eigen::Index cols);
}  // namespace init

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(ParamStore& store);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return t_; }

  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& tensors);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, ag::Matrix> m_, v_;
};

}  // namespace speechsql
