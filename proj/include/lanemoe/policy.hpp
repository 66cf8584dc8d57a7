#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lanemoe/errors.hpp"
#include "lanemoe/hash.hpp"
#include "lanemoe/map.hpp"
#include "lanemoe/neural.hpp"
#include "lanemoe/observation.hpp"
#include "lanemoe/sim.hpp"

namespace lanemoe {

enum class Mode { Sample, Greedy };

// --- action distributions ---------------------------------------------------
//
// A head turns one row of actor output into a distribution. Both heads expose
// the same interface so PPO can be written once:
//   log_prob(out, action, grad)   log-density of a stored action, d/d(out)
//   entropy(out, noise, grad)     entropy (or estimate), d/d(out)

/// Categorical distribution over lane indices; the actor output is the logit
/// vector.
struct CategoricalHead {
  int n = 2;

  int output_size() const { return n; }
  int action_size() const { return 1; }
  int noise_size() const { return 0; }

  static void softmax(std::span<const double> logits, std::span<double> p) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
    for (double& v : p) v /= z;
  }

  double log_prob(std::span<const double> out, std::span<const double> action, std::span<double> grad) const {
    const int a = static_cast<int>(action[0]);
    std::vector<double> p(static_cast<std::size_t>(n));
    softmax(out, p);
    for (int i = 0; i < n; ++i) grad[i] = (i == a ? 1.0 : 0.0) - p[i];
    const double mx = *std::max_element(out.begin(), out.end());
    double z = 0.0;
    for (double v : out) z += std::exp(v - mx);
    return out[a] - mx - std::log(z);
  }

  double entropy(std::span<const double> out, std::span<const double>, std::span<double> grad) const {
    std::vector<double> p(static_cast<std::size_t>(n));
    softmax(out, p);
    double h = 0.0;
    for (double v : p) {
      if (v > 0.0) h -= v * std::log(v);
    }
    for (int i = 0; i < n; ++i) grad[i] = p[i] > 0.0 ? -p[i] * (std::log(p[i]) + h) : 0.0;
    return h;
  }
};

/// Diagonal Gaussian in pre-squash space, squashed by tanh and mapped
/// affinely onto [lo, hi] per dimension. The actor output holds the means
/// followed by raw log-std values, softly clamped to [-5, 1]. Stored actions
/// are the pre-squash samples.
struct SquashedGaussianHead {
  static constexpr int kDims = 2;
  static constexpr double kLogStdMin = -5.0;
  static constexpr double kLogStdMax = 1.0;
  std::array<double, kDims> lo{0.0, -0.5};
  std::array<double, kDims> hi{1.0, 0.5};

  int output_size() const { return 2 * kDims; }
  int action_size() const { return kDims; }
  int noise_size() const { return kDims; }

  static constexpr double kCenter = 0.5 * (kLogStdMin + kLogStdMax);
  static constexpr double kHalf = 0.5 * (kLogStdMax - kLogStdMin);

  static double log_std(double raw) { return kCenter + kHalf * std::tanh(raw / kHalf); }
  static double dlog_std(double raw) {
    const double t = std::tanh(raw / kHalf);
    return 1.0 - t * t;
  }
  static double raw_for_log_std(double ls) { return kHalf * std::atanh((ls - kCenter) / kHalf); }

  /// log(1 - tanh(u)^2), stable for large |u|.
  static double log_one_minus_tanh2(double u) {
    const double x = -2.0 * u;
    const double softplus = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    return 2.0 * (std::numbers::ln2 - u - softplus);
  }

  double squash(int dim, double u) const { return lo[dim] + (hi[dim] - lo[dim]) * 0.5 * (std::tanh(u) + 1.0); }

  double log_prob(std::span<const double> out, std::span<const double> u, std::span<double> grad) const {
    double lp = 0.0;
    for (int i = 0; i < kDims; ++i) {
      const double mu = out[i];
      const double ls = log_std(out[kDims + i]);
      const double sigma = std::exp(ls);
      const double z = (u[i] - mu) / sigma;
      lp += -0.5 * z * z - ls - 0.5 * std::log(2.0 * std::numbers::pi) - log_one_minus_tanh2(u[i]) -
            std::log(0.5 * (hi[i] - lo[i]));
      grad[i] = z / sigma;
      grad[kDims + i] = (z * z - 1.0) * dlog_std(out[kDims + i]);
    }
    return lp;
  }

  /// Single-sample reparameterised estimate of the squashed-action entropy,
  /// -log p(a) with a drawn from standard-normal noise.
  double entropy(std::span<const double> out, std::span<const double> noise, std::span<double> grad) const {
    double h = 0.0;
    for (int i = 0; i < kDims; ++i) {
      const double ls = log_std(out[kDims + i]);
      const double sigma = std::exp(ls);
      const double eps = noise[i];
      const double u = out[i] + sigma * eps;
      const double t = std::tanh(u);
      h += 0.5 * eps * eps + ls + 0.5 * std::log(2.0 * std::numbers::pi) + log_one_minus_tanh2(u) +
           std::log(0.5 * (hi[i] - lo[i]));
      grad[i] = -2.0 * t;
      grad[kDims + i] = (1.0 - 2.0 * t * sigma * eps) * dlog_std(out[kDims + i]);
    }
    return h;
  }
};

/// Separate actor and critic trunks over one backbone type.
template <typename Head, Backbone Net = MlpNet>
struct ActorCritic {
  Net actor;
  Net critic;
  Head head;

  std::size_t parameter_count() const {
    return static_cast<std::size_t>(actor.parameters().size() + critic.parameters().size());
  }

  ParamVector parameters() const {
    ParamVector p(static_cast<Eigen::Index>(parameter_count()));
    p << actor.parameters(), critic.parameters();
    return p;
  }

  void set_parameters(const ParamVector& p) {
    const Eigen::Index na = actor.parameters().size();
    if (p.size() != na + critic.parameters().size()) throw ShapeMismatch("actor-critic parameter length");
    actor.set_parameters(p.head(na));
    critic.set_parameters(p.tail(p.size() - na));
  }
};

struct HighLevelPolicy {
  ActorCritic<CategoricalHead> model;
  int n_lanes() const { return model.head.n; }
};

struct LowLevelExpert {
  int target_lane = 0;
  ActorCritic<SquashedGaussianHead> model;
};

/// One expert per lane; expert k drives toward lane k.
struct ExpertPool {
  std::vector<LowLevelExpert> experts;

  int size() const { return static_cast<int>(experts.size()); }
  const LowLevelExpert& at(int lane) const {
    if (lane < 0 || lane >= size()) throw Error("no expert for lane " + std::to_string(lane));
    return experts[static_cast<std::size_t>(lane)];
  }

  void validate(int n_lanes) const {
    if (size() != n_lanes) throw Error("expert pool size does not match the lane count");
    for (int k = 0; k < size(); ++k) {
      if (experts[static_cast<std::size_t>(k)].target_lane != k) throw Error("expert pool is not indexed by lane");
    }
  }
};

struct NetworkShape {
  std::vector<int> hidden{64, 64};
  double hidden_gain = std::numbers::sqrt2;
  double actor_gain = 0.01;
  double critic_gain = 1.0;
  double initial_log_std = -1.0;
};

inline std::vector<int> layer_sizes(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> s{in};
  s.insert(s.end(), hidden.begin(), hidden.end());
  s.push_back(out);
  return s;
}

inline HighLevelPolicy make_high_level_policy(int n_lanes, std::mt19937_64& rng, const NetworkShape& shape = {}) {
  HighLevelPolicy p;
  p.model.head.n = n_lanes;
  p.model.actor = MlpNet::orthogonal(layer_sizes(kHighLevelObsLength, shape.hidden, n_lanes), rng, shape.hidden_gain,
                                     shape.actor_gain);
  p.model.critic =
      MlpNet::orthogonal(layer_sizes(kHighLevelObsLength, shape.hidden, 1), rng, shape.hidden_gain, shape.critic_gain);
  return p;
}

inline LowLevelExpert make_expert(int lane, const SimConfig& sim, std::mt19937_64& rng,
                                  const NetworkShape& shape = {}) {
  LowLevelExpert e;
  e.target_lane = lane;
  e.model.head.lo = {sim.v_min, sim.delta_min};
  e.model.head.hi = {sim.v_max, sim.delta_max};
  const int out = e.model.head.output_size();
  e.model.actor =
      MlpNet::orthogonal(layer_sizes(kLowLevelObsLength, shape.hidden, out), rng, shape.hidden_gain, shape.actor_gain);
  e.model.critic =
      MlpNet::orthogonal(layer_sizes(kLowLevelObsLength, shape.hidden, 1), rng, shape.hidden_gain, shape.critic_gain);
  auto b = e.model.actor.bias(e.model.actor.layer_count() - 1);
  for (int i = 0; i < SquashedGaussianHead::kDims; ++i) {
    b[SquashedGaussianHead::kDims + i] = SquashedGaussianHead::raw_for_log_std(shape.initial_log_std);
  }
  return e;
}

inline ExpertPool make_expert_pool(int n_lanes, const SimConfig& sim, std::mt19937_64& rng,
                                   const NetworkShape& shape = {}) {
  ExpertPool pool;
  for (int k = 0; k < n_lanes; ++k) pool.experts.push_back(make_expert(k, sim, rng, shape));
  return pool;
}

// --- acting -----------------------------------------------------------------

template <std::size_t N>
Tensor2 as_row(const std::array<double, N>& v) {
  Tensor2 t(1, static_cast<Eigen::Index>(N));
  for (std::size_t i = 0; i < N; ++i) t(0, static_cast<Eigen::Index>(i)) = v[i];
  return t;
}

struct Decision {
  int decision = 0;
  double log_prob = 0.0;
  double value = 0.0;
};

/// Lane decision of the high-level policy; greedy ties go to the lower index.
inline Decision decide(const HighLevelPolicy& policy, const HLObservation& obs, Mode mode, std::mt19937_64& rng) {
  const Tensor2 x = as_row(obs);
  const Tensor2 logits = policy.model.actor.forward(x);
  const double value = policy.model.critic.forward(x)(0, 0);
  const int n = policy.n_lanes();
  std::vector<double> out(logits.data(), logits.data() + n);
  std::vector<double> p(static_cast<std::size_t>(n));
  CategoricalHead::softmax(out, p);
  int choice = 0;
  if (mode == Mode::Greedy) {
    for (int i = 1; i < n; ++i) {
      if (out[i] > out[choice]) choice = i;
    }
  } else {
    const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    choice = n - 1;
    for (int i = 0; i < n; ++i) {
      acc += p[i];
      if (r < acc) {
        choice = i;
        break;
      }
    }
  }
  std::vector<double> grad(static_cast<std::size_t>(n));
  const double action = choice;
  const double lp = policy.model.head.log_prob(out, std::span<const double>(&action, 1), grad);
  return {choice, lp, value};
}

struct ExpertAction {
  ControlAction action;
  std::array<double, SquashedGaussianHead::kDims> pre_squash{};
  double log_prob = 0.0;
  double value = 0.0;
};

/// Counts expert evaluations per lane.
struct DispatchStats {
  std::vector<std::uint64_t> expert_calls;
  std::uint64_t high_level_calls = 0;

  std::uint64_t total_expert_calls() const {
    std::uint64_t t = 0;
    for (auto c : expert_calls) t += c;
    return t;
  }
};

/// Runs only the expert selected by `decision`.
inline ExpertAction act_expert(const ExpertPool& pool, int decision, const LLObservation& obs, Mode mode,
                               std::mt19937_64& rng, DispatchStats* stats = nullptr) {
  const LowLevelExpert& expert = pool.at(decision);
  const auto& head = expert.model.head;
  const Tensor2 x = as_row(obs);
  const Tensor2 out = expert.model.actor.forward(x);
  if (stats) {
    stats->expert_calls.resize(static_cast<std::size_t>(pool.size()));
    ++stats->expert_calls[static_cast<std::size_t>(decision)];
  }
  ExpertAction res;
  res.value = expert.model.critic.forward(x)(0, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::array<double, SquashedGaussianHead::kDims> squashed{};
  for (int i = 0; i < SquashedGaussianHead::kDims; ++i) {
    const double mu = out(0, i);
    const double sigma = std::exp(SquashedGaussianHead::log_std(out(0, SquashedGaussianHead::kDims + i)));
    res.pre_squash[static_cast<std::size_t>(i)] = mode == Mode::Greedy ? mu : mu + sigma * normal(rng);
    squashed[static_cast<std::size_t>(i)] = head.squash(i, res.pre_squash[static_cast<std::size_t>(i)]);
  }
  res.action = {squashed[0], squashed[1]};
  std::array<double, 2 * SquashedGaussianHead::kDims> grad{};
  res.log_prob = head.log_prob(std::span<const double>(out.data(), static_cast<std::size_t>(out.cols())),
                               res.pre_squash, grad);
  return res;
}

struct DecisionRecord {
  int decision_t = 0;
  double hl_log_prob = 0.0;
  double hl_value = 0.0;
  ControlAction ll_action;
  std::array<double, SquashedGaussianHead::kDims> ll_pre_squash{};
  double ll_log_prob = 0.0;
  double ll_value = 0.0;
  HLObservation hl_obs{};
  LLObservation ll_obs{};
  ReferencePath ref;
};

struct StepOptions {
  Mode hl_mode = Mode::Greedy;
  Mode ll_mode = Mode::Greedy;
  std::optional<int> forced_decision;  // bypasses the high-level policy
  ObservationConfig obs;
};

/// Decide, then plan: high-level observation -> lane decision -> reference
/// path on the decided lane -> low-level observation -> that lane's expert.
/// Nothing is carried over between calls.
inline DecisionRecord hierarchical_step(const HighLevelPolicy& hl, const ExpertPool& pool, const WorldState& world,
                                        int agent_id, const MapGraph& map, const StepOptions& opts,
                                        std::mt19937_64& rng, DispatchStats* stats = nullptr) {
  DecisionRecord rec;
  if (opts.forced_decision) {
    rec.decision_t = *opts.forced_decision;
  } else {
    rec.hl_obs = observe_high(world, agent_id, map, opts.obs);
    const Decision d = decide(hl, rec.hl_obs, opts.hl_mode, rng);
    if (stats) ++stats->high_level_calls;
    rec.decision_t = d.decision;
    rec.hl_log_prob = d.log_prob;
    rec.hl_value = d.value;
  }
  const VehicleState& ego = world.vehicles[static_cast<std::size_t>(agent_id)];
  rec.ref = reference_path_for(map, ego.position, rec.decision_t, kRefPathPoints, opts.obs.ref_spacing);
  rec.ll_obs = observe_low(world, agent_id, map, rec.ref, opts.obs);
  const ExpertAction a = act_expert(pool, rec.decision_t, rec.ll_obs, opts.ll_mode, rng, stats);
  rec.ll_action = a.action;
  rec.ll_pre_squash = a.pre_squash;
  rec.ll_log_prob = a.log_prob;
  rec.ll_value = a.value;
  return rec;
}

// --- checkpoints ------------------------------------------------------------

inline std::string observation_schema_hash(const ObservationConfig& cfg = {}) {
  return sha1_hex(observation_schema(cfg).dump());
}

inline nlohmann::json high_level_to_json(const HighLevelPolicy& p, const std::string& schema_hash,
                                         const AdamState* adam = nullptr) {
  nlohmann::json j = {{"format", "lanemoe-checkpoint"}, {"version", 1},
                      {"kind", "high_level"},           {"schema_hash", schema_hash},
                      {"n_lanes", p.n_lanes()},         {"actor", net_to_json(p.model.actor)},
                      {"critic", net_to_json(p.model.critic)}};
  if (adam) j["optimizer"] = adam_to_json(*adam);
  return j;
}

inline nlohmann::json expert_to_json(const LowLevelExpert& e, const std::string& schema_hash,
                                     const AdamState* adam = nullptr) {
  nlohmann::json j = {{"format", "lanemoe-checkpoint"},
                      {"version", 1},
                      {"kind", "expert"},
                      {"schema_hash", schema_hash},
                      {"target_lane", e.target_lane},
                      {"action_low", e.model.head.lo},
                      {"action_high", e.model.head.hi},
                      {"actor", net_to_json(e.model.actor)},
                      {"critic", net_to_json(e.model.critic)}};
  if (adam) j["optimizer"] = adam_to_json(*adam);
  return j;
}

namespace detail {

inline void check_checkpoint(const nlohmann::json& j, const char* kind, const std::string& schema_hash) {
  if (j.at("format").get<std::string>() != "lanemoe-checkpoint" || j.at("version").get<int>() != 1) {
    throw Error("unsupported checkpoint format");
  }
  if (j.at("kind").get<std::string>() != kind) throw Error(std::string("checkpoint is not a ") + kind + " policy");
  if (j.at("schema_hash").get<std::string>() != schema_hash) {
    throw SchemaMismatch("checkpoint was trained against observation schema " + j.at("schema_hash").get<std::string>() +
                         ", current schema is " + schema_hash);
  }
}

}  // namespace detail

inline HighLevelPolicy high_level_from_json(const nlohmann::json& j, const std::string& schema_hash) {
  detail::check_checkpoint(j, "high_level", schema_hash);
  HighLevelPolicy p;
  p.model.head.n = j.at("n_lanes").get<int>();
  p.model.actor = net_from_json(j.at("actor"));
  p.model.critic = net_from_json(j.at("critic"));
  if (p.model.actor.input_size() != kHighLevelObsLength || p.model.actor.output_size() != p.n_lanes()) {
    throw ShapeMismatch("high-level checkpoint has incompatible layer sizes");
  }
  return p;
}

inline LowLevelExpert expert_from_json(const nlohmann::json& j, const std::string& schema_hash) {
  detail::check_checkpoint(j, "expert", schema_hash);
  LowLevelExpert e;
  e.target_lane = j.at("target_lane").get<int>();
  e.model.head.lo = j.at("action_low").get<std::array<double, 2>>();
  e.model.head.hi = j.at("action_high").get<std::array<double, 2>>();
  e.model.actor = net_from_json(j.at("actor"));
  e.model.critic = net_from_json(j.at("critic"));
  if (e.model.actor.input_size() != kLowLevelObsLength || e.model.actor.output_size() != e.model.head.output_size()) {
    throw ShapeMismatch("expert checkpoint has incompatible layer sizes");
  }
  return e;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("cannot parse " + path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(1) << '\n';
}

}  // namespace lanemoe
