#include "speechsql/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace speechsql {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradients(const std::vector<ag::Parameter*>& params,
                                const std::function<ag::Var(ag::Context&)>& loss,
                                bool training, double eps) {
  constexpr std::uint64_t kSeed = 1234;
  for (auto* p : params) p->zero_grad();
  {
    ag::Context ctx(training, kSeed);
    ag::Var l = loss(ctx);
    ag::backward(l);
    ctx.accumulate_grads();
  }
  auto evaluate = [&]() {
    ag::Context ctx(training, kSeed, /*grad=*/false);
    return loss(ctx).scalar();
  };
  GradCheckResult result;
  for (auto* p : params) {
    if (!p->trainable) continue;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& w = p->value.data()[i];
      const double saved = w;
      w = saved + eps;
      const double up = evaluate();
      w = saved - eps;
      const double down = evaluate();
      w = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = relative_error(p->grad.data()[i], numeric);
      ++result.entries_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = p->name;
        result.worst_analytic = p->grad.data()[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace speechsql
