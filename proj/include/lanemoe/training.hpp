#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lanemoe/config.hpp"
#include "lanemoe/errors.hpp"
#include "lanemoe/map.hpp"
#include "lanemoe/neural.hpp"
#include "lanemoe/observation.hpp"
#include "lanemoe/policy.hpp"
#include "lanemoe/reward.hpp"
#include "lanemoe/sim.hpp"

namespace lanemoe {

/// Linear decay from lr at the first iteration to lr_min at the last.
inline double lr_schedule(int iter, const TrainConfig& cfg) {
  if (iter < 0 || iter >= cfg.n_iters) throw Error("iteration " + std::to_string(iter) + " outside the schedule");
  if (cfg.n_iters == 1) return cfg.lr;
  const double f = static_cast<double>(iter) / (cfg.n_iters - 1);
  return cfg.lr + (cfg.lr_min - cfg.lr) * f;
}

// --- advantages -------------------------------------------------------------

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// Generalised advantage estimation over one (agent, episode) sequence. A
/// done flag cuts both the value bootstrap and the advantage recursion;
/// `bootstrap_value` is the critic value after the last frame.
inline GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                             std::span<const std::uint8_t> dones, double gamma, double lambda,
                             double bootstrap_value = 0.0) {
  if (rewards.size() != values.size() || rewards.size() != dones.size()) {
    throw ShapeMismatch("compute_gae: rewards, values and dones differ in length");
  }
  const std::size_t n = rewards.size();
  GaeResult out{std::vector<double>(n), std::vector<double>(n)};
  double next_value = bootstrap_value;
  double next_adv = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double live = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * next_value * live - values[t];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[t] = next_adv;
    out.returns[t] = next_adv + values[t];
    next_value = values[t];
  }
  return out;
}

inline void normalize_advantages(std::vector<double>& adv) {
  if (adv.empty()) return;
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / n);
  for (double& a : adv) a = (a - mean) / (sd + 1e-8);
}

// --- buffer -----------------------------------------------------------------

/// Structure-of-arrays frame store. Frames of different agents interleave in
/// time order; (agent, episode) identifies each agent's own sequence.
struct RolloutBuffer {
  int obs_dim = 0;
  int action_dim = 0;
  std::vector<double> observations;
  std::vector<double> actions;
  std::vector<double> log_probs;
  std::vector<double> values;
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  std::vector<int> agent_ids;
  std::vector<int> episode_ids;
  std::vector<int> target_lanes;  // lane of the reference path each frame was produced with
  std::map<std::pair<int, int>, double> bootstrap_values;  // critic value after each sequence's last frame

  std::vector<double> advantages;
  std::vector<double> returns;

  RolloutBuffer() = default;
  RolloutBuffer(int obs, int act) : obs_dim(obs), action_dim(act) {}

  std::size_t size() const { return rewards.size(); }

  void add(std::span<const double> obs, std::span<const double> action, double log_prob, double value, double reward,
           bool done, int agent, int episode, int target_lane) {
    if (static_cast<int>(obs.size()) != obs_dim || static_cast<int>(action.size()) != action_dim) {
      throw ShapeMismatch("frame does not match the buffer layout");
    }
    observations.insert(observations.end(), obs.begin(), obs.end());
    actions.insert(actions.end(), action.begin(), action.end());
    log_probs.push_back(log_prob);
    values.push_back(value);
    rewards.push_back(reward);
    dones.push_back(done ? 1 : 0);
    agent_ids.push_back(agent);
    episode_ids.push_back(episode);
    target_lanes.push_back(target_lane);
  }

  std::span<const double> observation(std::size_t i) const {
    return {observations.data() + i * static_cast<std::size_t>(obs_dim), static_cast<std::size_t>(obs_dim)};
  }
  std::span<const double> action(std::size_t i) const {
    return {actions.data() + i * static_cast<std::size_t>(action_dim), static_cast<std::size_t>(action_dim)};
  }

  /// Frame indices of every (agent, episode) sequence, in time order.
  std::map<std::pair<int, int>, std::vector<std::size_t>> sequences() const {
    std::map<std::pair<int, int>, std::vector<std::size_t>> seq;
    for (std::size_t i = 0; i < size(); ++i) seq[{agent_ids[i], episode_ids[i]}].push_back(i);
    return seq;
  }

  /// Mean undiscounted reward per (agent, episode) sequence.
  double mean_episode_reward() const {
    const auto seq = sequences();
    if (seq.empty()) return 0.0;
    double total = 0.0;
    for (const auto& [key, idx] : seq) {
      for (std::size_t i : idx) total += rewards[i];
    }
    return total / static_cast<double>(seq.size());
  }
};

/// Fills advantages (normalized over the batch) and returns (unnormalized).
inline void compute_advantages(RolloutBuffer& buf, double gamma, double lambda) {
  buf.advantages.assign(buf.size(), 0.0);
  buf.returns.assign(buf.size(), 0.0);
  for (const auto& [key, idx] : buf.sequences()) {
    std::vector<double> r, v;
    std::vector<std::uint8_t> d;
    for (std::size_t i : idx) {
      r.push_back(buf.rewards[i]);
      v.push_back(buf.values[i]);
      d.push_back(buf.dones[i]);
    }
    const auto it = buf.bootstrap_values.find(key);
    const GaeResult g = compute_gae(r, v, d, gamma, lambda, it == buf.bootstrap_values.end() ? 0.0 : it->second);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      buf.advantages[idx[k]] = g.advantages[k];
      buf.returns[idx[k]] = g.returns[k];
    }
  }
  normalize_advantages(buf.advantages);
}

// --- experience collection --------------------------------------------------

struct RolloutEnv {
  const MapGraph* map = nullptr;
  SimConfig sim;
  ObservationConfig obs;
};

namespace detail {

inline void require_whole_steps(const TrainConfig& cfg, int n_agents) {
  if (n_agents <= 0) throw ConfigError("a training phase needs at least one agent");
  if (cfg.frames_per_batch % n_agents != 0) {
    throw ConfigError("frames_per_batch must be a multiple of the number of agents");
  }
}

}  // namespace detail

/// Expert phase: every agent is driven by `expert` with its reference path
/// pinned to the expert's lane; frames carry the motion-planning reward.
inline RolloutBuffer collect_expert_rollouts(const LowLevelExpert& expert, const RolloutEnv& env,
                                             const LLRewardConfig& reward, const TrainConfig& cfg,
                                             std::mt19937_64& rng) {
  const MapGraph& map = *env.map;
  detail::require_whole_steps(cfg, env.sim.n_agents);
  ExpertPool single;
  single.experts.push_back(expert);
  RolloutBuffer buf(kLowLevelObsLength, SquashedGaussianHead::kDims);
  const auto frames = static_cast<std::size_t>(cfg.frames_per_batch);
  const int lane = expert.target_lane;
  for (int episode = 0; buf.size() < frames; ++episode) {
    SimConfig sim = env.sim;
    sim.seed = rng();
    WorldState world = spawn(map, sim);
    const int n = world.n_agents;
    for (int i = 0; i < n; ++i) world.vehicles[static_cast<std::size_t>(i)].target_lane = lane;
    std::vector<ControlAction> prev(static_cast<std::size_t>(n));
    std::vector<ControlAction> acts(static_cast<std::size_t>(n));
    std::vector<ExpertAction> outs(static_cast<std::size_t>(n));
    std::vector<LLObservation> obs(static_cast<std::size_t>(n));
    std::vector<ReferencePath> refs(static_cast<std::size_t>(n));
    for (int step = 0; step < cfg.max_steps && buf.size() < frames; ++step) {
      for (int i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        refs[k] = reference_path_for(map, world.vehicles[k].position, lane, kRefPathPoints, env.obs.ref_spacing);
        obs[k] = observe_low(world, i, map, refs[k], env.obs);
        // Pool index 0 holds the single expert being trained.
        outs[k] = act_expert(single, 0, obs[k], Mode::Sample, rng);
        acts[k] = outs[k].action;
      }
      WorldState next = step_world(world, acts, map, sim);
      for (int i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const double r = reward_low(world, next, i, prev[k], acts[k], refs[k], reward, map, sim.v_max);
        const bool done = next.collision_flags[k].any();
        buf.add(obs[k], outs[k].pre_squash, outs[k].log_prob, outs[k].value, r, done, i, episode, lane);
        prev[k] = done ? ControlAction{} : acts[k];
      }
      world = std::move(next);
      for (int i = 0; i < n; ++i) world.vehicles[static_cast<std::size_t>(i)].target_lane = lane;
    }
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const ReferencePath ref =
          reference_path_for(map, world.vehicles[k].position, lane, kRefPathPoints, env.obs.ref_spacing);
      const LLObservation o = observe_low(world, i, map, ref, env.obs);
      buf.bootstrap_values[{i, episode}] = expert.model.critic.forward(as_row(o))(0, 0);
    }
  }
  return buf;
}

/// Gate phase: the high-level policy samples decisions, frozen experts act
/// greedily, frames carry the lane-selection reward.
inline RolloutBuffer collect_gate_rollouts(const HighLevelPolicy& hl, const ExpertPool& pool, const RolloutEnv& env,
                                           const HLRewardConfig& reward, const TrainConfig& cfg,
                                           std::mt19937_64& rng) {
  const MapGraph& map = *env.map;
  detail::require_whole_steps(cfg, env.sim.n_agents);
  pool.validate(map.n_lanes());
  RolloutBuffer buf(kHighLevelObsLength, 1);
  const auto frames = static_cast<std::size_t>(cfg.frames_per_batch);
  for (int episode = 0; buf.size() < frames; ++episode) {
    SimConfig sim = env.sim;
    sim.seed = rng();
    WorldState world = spawn(map, sim);
    const int n = world.n_agents;
    std::vector<int> prev_decision(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) prev_decision[static_cast<std::size_t>(i)] = world.vehicles[static_cast<std::size_t>(i)].lane;
    std::vector<ControlAction> acts(static_cast<std::size_t>(n));
    std::vector<Decision> decisions(static_cast<std::size_t>(n));
    std::vector<HLObservation> obs(static_cast<std::size_t>(n));
    for (int step = 0; step < cfg.max_steps && buf.size() < frames; ++step) {
      for (int i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        obs[k] = observe_high(world, i, map, env.obs);
        decisions[k] = decide(hl, obs[k], Mode::Sample, rng);
        const ReferencePath ref = reference_path_for(map, world.vehicles[k].position, decisions[k].decision,
                                                     kRefPathPoints, env.obs.ref_spacing);
        const LLObservation ll = observe_low(world, i, map, ref, env.obs);
        acts[k] = act_expert(pool, decisions[k].decision, ll, Mode::Greedy, rng).action;
      }
      for (int i = 0; i < n; ++i) world.vehicles[static_cast<std::size_t>(i)].target_lane = decisions[static_cast<std::size_t>(i)].decision;
      WorldState next = step_world(world, acts, map, sim);
      for (int i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const int d = decisions[k].decision;
        const double r = reward_high(world, next, i, prev_decision[k], d, reward, map);
        const bool done = next.collision_flags[k].any();
        const double action = d;
        buf.add(obs[k], std::span<const double>(&action, 1), decisions[k].log_prob, decisions[k].value, r, done, i,
                episode, d);
        prev_decision[k] = next.respawned[k] ? next.vehicles[k].lane : d;
      }
      world = std::move(next);
    }
    for (int i = 0; i < n; ++i) {
      const HLObservation o = observe_high(world, i, map, env.obs);
      buf.bootstrap_values[{i, episode}] = hl.model.critic.forward(as_row(o))(0, 0);
    }
  }
  return buf;
}

// --- PPO ----------------------------------------------------------------------

struct LossStats {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
};

/// Clipped-surrogate loss over the frames `idx`, and optionally its gradient
/// with respect to the concatenated actor and critic parameters.
/// `entropy_noise` holds one row of standard-normal draws per frame for heads
/// whose entropy is estimated by sampling.
template <typename Head, Backbone Net>
LossStats ppo_loss(const ActorCritic<Head, Net>& model, const RolloutBuffer& buf, std::span<const std::size_t> idx,
                   const TrainConfig& cfg, const Tensor2& entropy_noise, ParamVector* grad = nullptr) {
  if (buf.advantages.size() != buf.size() || buf.returns.size() != buf.size()) {
    throw Error("advantages must be computed before the update");
  }
  const auto b = static_cast<Eigen::Index>(idx.size());
  if (b == 0) throw Error("empty minibatch");
  if (entropy_noise.rows() != b || entropy_noise.cols() != model.head.noise_size()) {
    throw ShapeMismatch("entropy noise does not match the minibatch");
  }
  Tensor2 x(b, buf.obs_dim);
  for (Eigen::Index r = 0; r < b; ++r) {
    const auto o = buf.observation(idx[static_cast<std::size_t>(r)]);
    for (int c = 0; c < buf.obs_dim; ++c) x(r, c) = o[static_cast<std::size_t>(c)];
  }
  ForwardCache actor_cache, critic_cache;
  const Tensor2 out = model.actor.forward(x, grad ? &actor_cache : nullptr);
  const Tensor2 v = model.critic.forward(x, grad ? &critic_cache : nullptr);
  const auto width = static_cast<std::size_t>(out.cols());
  Tensor2 out_grad = Tensor2::Zero(b, out.cols());
  Tensor2 value_grad = Tensor2::Zero(b, 1);
  std::vector<double> g_lp(width), g_h(width);
  const double inv_b = 1.0 / static_cast<double>(b);
  const double lo = 1.0 - cfg.clip_epsilon, hi = 1.0 + cfg.clip_epsilon;
  LossStats s;
  for (Eigen::Index r = 0; r < b; ++r) {
    const std::size_t f = idx[static_cast<std::size_t>(r)];
    const std::span<const double> row(out.data() + r * out.cols(), width);
    const std::span<const double> noise(entropy_noise.data() + r * entropy_noise.cols(),
                                        static_cast<std::size_t>(entropy_noise.cols()));
    const double lp = model.head.log_prob(row, buf.action(f), g_lp);
    const double h = model.head.entropy(row, noise, g_h);
    const double log_ratio = lp - buf.log_probs[f];
    const double ratio = std::exp(log_ratio);
    const double adv = buf.advantages[f];
    const double unclipped = ratio * adv;
    const double clipped = std::clamp(ratio, lo, hi) * adv;
    double dlp = 0.0;
    if (unclipped <= clipped) {
      s.policy -= unclipped * inv_b;
      dlp = -unclipped * inv_b;
    } else {
      s.policy -= clipped * inv_b;
      s.clip_fraction += inv_b;
    }
    s.entropy += h * inv_b;
    s.approx_kl += ((ratio - 1.0) - log_ratio) * inv_b;
    for (std::size_t c = 0; c < width; ++c) {
      out_grad(r, static_cast<Eigen::Index>(c)) = dlp * g_lp[c] - cfg.entropy_epsilon * inv_b * g_h[c];
    }
    const double err = v(r, 0) - buf.returns[f];
    s.value += err * err * inv_b;
    value_grad(r, 0) = cfg.value_coeff * 2.0 * err * inv_b;
  }
  s.total = s.policy + cfg.value_coeff * s.value - cfg.entropy_epsilon * s.entropy;
  if (!std::isfinite(s.total)) throw NonFinite("non-finite PPO loss");
  if (grad) {
    const ParamVector ga = model.actor.backward(actor_cache, out_grad);
    const ParamVector gc = model.critic.backward(critic_cache, value_grad);
    grad->resize(ga.size() + gc.size());
    *grad << ga, gc;
  }
  return s;
}

struct UpdateStats {
  LossStats mean;
  LossStats first;  // loss of the very first minibatch, before any step
  double grad_norm = 0.0;
  int minibatches = 0;
};

inline Tensor2 draw_noise(Eigen::Index rows, int cols, std::mt19937_64& rng) {
  Tensor2 t(rows, cols);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) t(r, c) = normal(rng);
  }
  return t;
}

/// num_epochs passes of shuffled minibatch Adam steps on the PPO loss.
template <typename Head, Backbone Net>
UpdateStats ppo_update(ActorCritic<Head, Net>& model, const RolloutBuffer& buf, const TrainConfig& cfg,
                       AdamState& opt, double lr, std::mt19937_64& rng) {
  const std::size_t n = buf.size();
  if (opt.m.size() == 0) opt = AdamState(model.parameter_count());
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const auto mb = static_cast<std::size_t>(cfg.minibatch_size);
  UpdateStats u;
  ParamVector grad;
  for (int epoch = 0; epoch < cfg.num_epochs; ++epoch) {
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t start = 0; start < n; start += mb) {
      const std::span<const std::size_t> idx(perm.data() + start, std::min(mb, n - start));
      const Tensor2 noise = draw_noise(static_cast<Eigen::Index>(idx.size()), model.head.noise_size(), rng);
      const LossStats s = ppo_loss(model, buf, idx, cfg, noise, &grad);
      if (u.minibatches == 0) u.first = s;
      ParamVector params = model.parameters();
      u.grad_norm += adam_step(params, grad, opt, lr, cfg.max_grad_norm);
      model.set_parameters(params);
      u.mean.total += s.total;
      u.mean.policy += s.policy;
      u.mean.value += s.value;
      u.mean.entropy += s.entropy;
      u.mean.clip_fraction += s.clip_fraction;
      u.mean.approx_kl += s.approx_kl;
      ++u.minibatches;
    }
  }
  if (u.minibatches > 0) {
    const double k = 1.0 / u.minibatches;
    u.mean.total *= k;
    u.mean.policy *= k;
    u.mean.value *= k;
    u.mean.entropy *= k;
    u.mean.clip_fraction *= k;
    u.mean.approx_kl *= k;
    u.grad_norm *= k;
  }
  return u;
}

// --- curriculum ---------------------------------------------------------------

struct IterationLog {
  std::string run;
  int iter = 0;
  double episode_reward = 0.0;
  double lr = 0.0;
  UpdateStats update;
  double seconds = 0.0;
};

using ProgressFn = std::function<void(const IterationLog&)>;

inline std::mt19937_64 seeded_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

namespace detail {

inline void write_reward_curve(const std::filesystem::path& path, const std::vector<IterationLog>& logs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "iter,episode_reward\n";
  out.precision(10);
  for (const auto& l : logs) out << l.iter << ',' << l.episode_reward << '\n';
}

inline void write_metrics(const std::filesystem::path& path, const std::vector<IterationLog>& logs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "iter,episode_reward,lr,loss,policy_loss,value_loss,entropy,clip_fraction,approx_kl,grad_norm,first_loss,seconds\n";
  out.precision(10);
  for (const auto& l : logs) {
    const LossStats& m = l.update.mean;
    out << l.iter << ',' << l.episode_reward << ',' << l.lr << ',' << m.total << ',' << m.policy << ',' << m.value << ','
        << m.entropy << ',' << m.clip_fraction << ',' << m.approx_kl << ',' << l.update.grad_norm << ','
        << l.update.first.total << ',' << l.seconds << '\n';
  }
}

template <typename Model, typename Collect, typename Save>
std::vector<IterationLog> train_loop(Model& model, const TrainConfig& cfg, const std::string& name,
                                     std::mt19937_64& rng, Collect&& collect, Save&& save_aborted,
                                     const ProgressFn& progress) {
  AdamState opt(model.parameter_count());
  std::vector<IterationLog> logs;
  for (int iter = 0; iter < cfg.n_iters; ++iter) {
    const auto t0 = std::chrono::steady_clock::now();
    IterationLog log{name, iter, 0.0, lr_schedule(iter, cfg), {}, 0.0};
    try {
      RolloutBuffer buf = collect(rng);
      log.episode_reward = buf.mean_episode_reward();
      compute_advantages(buf, cfg.gamma, cfg.lambda);
      log.update = ppo_update(model, buf, cfg, opt, log.lr, rng);
    } catch (const NonFinite&) {
      save_aborted(opt);
      throw;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    logs.push_back(log);
    if (progress) progress(log);
  }
  return logs;
}

}  // namespace detail

struct TrainedExpert {
  LowLevelExpert expert;
  std::vector<IterationLog> logs;
};

/// Trains the expert for `lane` and writes expert_<lane>.json and
/// expert_<lane>_rewards.csv into out_dir.
inline TrainedExpert train_expert(int lane, const RunConfig& cfg, const MapGraph& map, std::uint64_t seed,
                                  const std::filesystem::path& out_dir, const ProgressFn& progress = {}) {
  if (lane < 0 || lane >= map.n_lanes()) throw Error("no lane " + std::to_string(lane));
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const std::string name = "expert_" + std::to_string(lane);
  std::mt19937_64 rng = seeded_rng(seed, 1000 + static_cast<std::uint64_t>(lane));
  const SimConfig sim = cfg.sim_for(cfg.expert);
  const RolloutEnv env{&map, sim, cfg.observation()};
  const std::string hash = observation_schema_hash(env.obs);
  TrainedExpert res{make_expert(lane, sim, rng, cfg.network), {}};
  res.logs = detail::train_loop(
      res.expert.model, cfg.expert.train, name, rng,
      [&](std::mt19937_64& r) { return collect_expert_rollouts(res.expert, env, cfg.reward_low, cfg.expert.train, r); },
      [&](const AdamState& opt) {
        write_json_file((out_dir / (name + ".aborted.json")).string(), expert_to_json(res.expert, hash, &opt));
      },
      progress);
  write_json_file((out_dir / (name + ".json")).string(), expert_to_json(res.expert, hash));
  detail::write_reward_curve(out_dir / (name + "_rewards.csv"), res.logs);
  detail::write_metrics(out_dir / (name + "_metrics.csv"), res.logs);
  return res;
}

struct TrainedGate {
  HighLevelPolicy policy;
  std::vector<IterationLog> logs;
};

/// Trains the high-level policy over frozen experts and writes gate.json and
/// gate_rewards.csv into out_dir.
inline TrainedGate train_gate(const ExpertPool& pool, const RunConfig& cfg, const MapGraph& map, std::uint64_t seed,
                              const std::filesystem::path& out_dir, const ProgressFn& progress = {}) {
  cfg.validate();
  pool.validate(map.n_lanes());
  std::filesystem::create_directories(out_dir);
  std::mt19937_64 rng = seeded_rng(seed, 2000);
  const RolloutEnv env{&map, cfg.sim_for(cfg.gate), cfg.observation()};
  const std::string hash = observation_schema_hash(env.obs);
  TrainedGate res{make_high_level_policy(map.n_lanes(), rng, cfg.network), {}};
  res.logs = detail::train_loop(
      res.policy.model, cfg.gate.train, "gate", rng,
      [&](std::mt19937_64& r) { return collect_gate_rollouts(res.policy, pool, env, cfg.reward_high, cfg.gate.train, r); },
      [&](const AdamState& opt) {
        write_json_file((out_dir / "gate.aborted.json").string(), high_level_to_json(res.policy, hash, &opt));
      },
      progress);
  write_json_file((out_dir / "gate.json").string(), high_level_to_json(res.policy, hash));
  detail::write_reward_curve(out_dir / "gate_rewards.csv", res.logs);
  detail::write_metrics(out_dir / "gate_metrics.csv", res.logs);
  return res;
}

// --- manifest -------------------------------------------------------------------

/// Binds a trained system: configuration, map, schema hash and checkpoints.
/// Checkpoint paths are relative to the manifest's directory.
struct Manifest {
  std::string schema_hash;
  std::string config_ini;
  nlohmann::json map;
  std::vector<std::string> experts;
  std::optional<std::string> high_level;
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
  return {{"format", "lanemoe-manifest"},
          {"version", 1},
          {"schema_hash", m.schema_hash},
          {"config", m.config_ini},
          {"map", m.map},
          {"experts", m.experts},
          {"high_level", m.high_level ? nlohmann::json(*m.high_level) : nlohmann::json(nullptr)}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "lanemoe-manifest" || j.value("version", 0) != 1) throw Error("not a manifest");
  Manifest m;
  m.schema_hash = j.at("schema_hash").get<std::string>();
  m.config_ini = j.at("config").get<std::string>();
  m.map = j.at("map");
  m.experts = j.at("experts").get<std::vector<std::string>>();
  if (!j.at("high_level").is_null()) m.high_level = j.at("high_level").get<std::string>();
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing manifest " + path.string());
  return manifest_from_json(read_json_file(path.string()));
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  write_json_file(path.string(), manifest_to_json(m));
}

struct TrainedSystem {
  RunConfig config;
  MapGraph map;
  HighLevelPolicy high_level;
  ExpertPool experts;
  bool has_high_level = false;
};

/// Loads a manifest and its checkpoints, checking them against the current
/// observation schema.
inline TrainedSystem load_trained_system(const std::filesystem::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  RunConfig cfg = parse_config(m.config_ini);
  const std::string hash = observation_schema_hash(cfg.observation());
  if (m.schema_hash != hash) {
    throw SchemaMismatch("manifest was built against observation schema " + m.schema_hash + ", current schema is " +
                         hash);
  }
  TrainedSystem sys{cfg, map_from_json(m.map), {}, {}, false};
  for (const auto& e : m.experts) sys.experts.experts.push_back(expert_from_json(read_json_file((dir / e).string()), hash));
  std::sort(sys.experts.experts.begin(), sys.experts.experts.end(),
            [](const LowLevelExpert& a, const LowLevelExpert& b) { return a.target_lane < b.target_lane; });
  if (m.high_level) {
    sys.high_level = high_level_from_json(read_json_file((dir / *m.high_level).string()), hash);
    sys.has_high_level = true;
  }
  return sys;
}

/// Adds or replaces entries in the manifest at out_dir/manifest.json.
inline void update_manifest(const std::filesystem::path& out_dir, const RunConfig& cfg, const MapGraph& map,
                            std::optional<std::string> expert, std::optional<std::string> high_level) {
  const auto path = out_dir / "manifest.json";
  Manifest m;
  if (std::filesystem::exists(path)) {
    m = read_manifest(path);
  }
  m.schema_hash = observation_schema_hash(cfg.observation());
  m.config_ini = config_to_ini(cfg);
  m.map = map_to_json(map);
  if (expert && std::find(m.experts.begin(), m.experts.end(), *expert) == m.experts.end()) {
    m.experts.push_back(*expert);
    std::sort(m.experts.begin(), m.experts.end());
  }
  if (high_level) m.high_level = *high_level;
  write_manifest(path, m);
}

/// Sequential curriculum: each lane expert in turn, then the gate over the
/// frozen experts. Returns the manifest path.
inline std::filesystem::path run_curriculum(const RunConfig& cfg, const MapGraph& map, std::uint64_t seed,
                                            const std::filesystem::path& out_dir, const ProgressFn& progress = {}) {
  ExpertPool pool;
  for (int lane = 0; lane < map.n_lanes(); ++lane) {
    pool.experts.push_back(train_expert(lane, cfg, map, seed, out_dir, progress).expert);
    update_manifest(out_dir, cfg, map, "expert_" + std::to_string(lane) + ".json", std::nullopt);
  }
  train_gate(pool, cfg, map, seed, out_dir, progress);
  update_manifest(out_dir, cfg, map, std::nullopt, "gate.json");
  return out_dir / "manifest.json";
}

}  // namespace lanemoe
