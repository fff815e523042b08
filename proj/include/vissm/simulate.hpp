#pragma once

#include <cstdint>
#include <vector>

#include "vissm/model.hpp"

namespace vissm {

struct Simulation {
  Dataset data;
  /// x_1 .. x_{T+1}.
  std::vector<Eigen::VectorXd> states;
  Eigen::VectorXd theta;
  Eigen::VectorXd eta;
};

/// Ancestral sampling: x_1 ~ p(x_1 | θ), then (x_{k+1}, y_k) ~ p(x_{k+1}, y_k | x_k, θ) for k = 1..T.
/// `u` is either empty or holds T input vectors.
inline Simulation simulate(const Model& model, const Eigen::VectorXd& theta, const Eigen::VectorXd& eta, int T,
                           const std::vector<Eigen::VectorXd>& u, std::uint64_t seed) {
  const auto& d = model.dims();
  if (!model.can_sample()) throw UnsupportedError("model '" + model.name() + "' has no sampling form");
  if (T < 0) throw ConfigError("simulate: T must be non-negative");
  if (theta.size() != d.ntheta) throw ConfigError("simulate: theta has wrong dimension");
  if (eta.size() != d.neta) throw ConfigError("simulate: eta has wrong dimension");
  if (!u.empty() && static_cast<int>(u.size()) != T) throw ConfigError("simulate: inputs must cover T steps");
  if (u.empty() && d.nu > 0 && T > 0) throw ConfigError("simulate: model needs inputs");

  Simulation sim;
  sim.theta = theta;
  sim.eta = eta;
  sim.data.u = u;
  sim.data.seed = seed;
  Rng rng(seed);
  sim.states.reserve(static_cast<std::size_t>(T) + 1);
  sim.states.push_back(model.sample_initial(theta, eta, rng));
  for (int k = 0; k < T; ++k) {
    auto draw = model.sample_step(sim.states.back(), theta, eta, sim.data.u_at(k), k, rng);
    sim.data.y.push_back(std::move(draw.y));
    sim.states.push_back(std::move(draw.x_next));
  }
  return sim;
}

}  // namespace vissm
