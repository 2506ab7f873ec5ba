#include "speechsql/params.hpp"

#include "speechsql/error.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

namespace speechsql {

ag::Parameter& ParamStore::create(const std::string& name, ag::Matrix init, bool trainable) {
  if (index_.count(name)) throw Error(ErrorCode::kInvalidArgument, "duplicate parameter " + name);
  auto p = std::make_unique<ag::Parameter>();
  p->name = name;
  p->value = std::move(init);
  p->trainable = trainable;
  p->zero_grad();
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

ag::Parameter* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const ag::Parameter* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

ag::Parameter& ParamStore::at(const std::string& name) {
  auto* p = find(name);
  if (!p) throw Error(ErrorCode::kInvalidArgument, "no parameter named " + name);
  return *p;
}

std::vector<ag::Parameter*> ParamStore::all() {
  std::vector<ag::Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const ag::Parameter*> ParamStore::all() const {
  std::vector<const ag::Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<ag::Parameter*> ParamStore::with_prefix(const std::string& prefix) {
  std::vector<ag::Parameter*> out;
  for (auto& p : params_)
    if (p->trainable && p->name.compare(0, prefix.size(), prefix) == 0) out.push_back(p.get());
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

double ParamStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : params_)
    if (p->trainable && p->grad.size() == p->value.size()) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

double ParamStore::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& p : params_)
      if (p->trainable) p->grad *= s;
  }
  return norm;
}

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error(ErrorCode::kIo, "truncated tensor file");
  return v;
}

constexpr char kMagic[5] = {'S', 'Q', 'L', 'P', '1'};

}  // namespace

void write_tensors(std::ostream& os, const std::string& header, const std::vector<NamedTensor>& tensors) {
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.value.rows()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.value.cols()));
    put<std::uint8_t>(os, t.trainable ? 1 : 0);
    os.write(reinterpret_cast<const char*>(t.value.data()),
             static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!os) throw Error(ErrorCode::kIo, "failed writing tensor file");
}

std::vector<NamedTensor> read_tensors(std::istream& is, std::string* header) {
  char magic[5];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorCode::kCheckpointMismatch, "not a SQLP1 tensor file");
  const auto hlen = get<std::uint32_t>(is);
  std::string h(hlen, '\0');
  is.read(h.data(), hlen);
  if (header) *header = std::move(h);
  const auto count = get<std::uint32_t>(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto nlen = get<std::uint32_t>(is);
    t.name.resize(nlen);
    is.read(t.name.data(), nlen);
    const auto rows = get<std::uint32_t>(is);
    const auto cols = get<std::uint32_t>(is);
    t.trainable = get<std::uint8_t>(is) != 0;
    t.value.resize(rows, cols);
    is.read(reinterpret_cast<char*>(t.value.data()),
            static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    if (!is) throw Error(ErrorCode::kIo, "truncated tensor " + t.name);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<NamedTensor> snapshot(const ParamStore& store) {
  std::vector<NamedTensor> out;
  for (const auto* p : store.all()) out.push_back({p->name, p->value, p->trainable});
  return out;
}

LoadReport load_into(ParamStore& store, const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  LoadReport report;
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) {
    if (t.name.compare(0, prefix.size(), prefix) != 0) continue;
    by_name.emplace(t.name, &t);
    auto* p = store.find(t.name);
    if (!p) {
      report.unexpected.push_back(t.name);
      continue;
    }
    if (p->value.rows() != t.value.rows() || p->value.cols() != t.value.cols()) {
      report.shape_mismatch.push_back(t.name);
      continue;
    }
    p->value = t.value;
    ++report.loaded;
  }
  for (auto* p : store.all())
    if (p->name.compare(0, prefix.size(), prefix) == 0 && !by_name.count(p->name))
      report.missing.push_back(p->name);
  return report;
}

namespace init {

ag::Matrix xavier(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return uniform(rows, cols, bound, rng);
}

ag::Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  ag::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

ag::Matrix normal(Eigen::Index rows, Eigen::Index cols, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sd);
  ag::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

ag::Matrix zeros(Eigen::Index rows, Eigen::Index cols) { return ag::Matrix::Zero(rows, cols); }
ag::Matrix ones(Eigen::Index rows, Eigen::Index cols) { return ag::Matrix::Ones(rows, cols); }

}  // namespace init

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamStore& store) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto* p : store.all()) {
    if (!p->trainable || p->grad.size() != p->value.size()) continue;
    auto& m = m_[p->name];
    auto& v = v_[p->name];
    if (m.size() != p->value.size()) {
      m = ag::Matrix::Zero(p->value.rows(), p->value.cols());
      v = ag::Matrix::Zero(p->value.rows(), p->value.cols());
    }
    m = beta1_ * m + (1.0 - beta1_) * p->grad;
    v = beta2_ * v + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
  }
}

std::vector<NamedTensor> Adam::state() const {
  std::vector<NamedTensor> out;
  ag::Matrix meta(1, 2);
  meta << static_cast<double>(t_), lr_;
  out.push_back({"adam.meta", meta, false});
  for (const auto& [name, m] : m_) out.push_back({"adam.m." + name, m, false});
  for (const auto& [name, v] : v_) out.push_back({"adam.v." + name, v, false});
  return out;
}

void Adam::load_state(const std::vector<NamedTensor>& tensors) {
  m_.clear();
  v_.clear();
  for (const auto& t : tensors) {
    if (t.name == "adam.meta") {
      t_ = static_cast<long>(t.value(0, 0));
      lr_ = t.value(0, 1);
    } else if (t.name.rfind("adam.m.", 0) == 0) {
      m_[t.name.substr(7)] = t.value;
    } else if (t.name.rfind("adam.v.", 0) == 0) {
      v_[t.name.substr(7)] = t.value;
    }
  }
}

}  // namespace speechsql
