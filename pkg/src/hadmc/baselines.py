"""Comparison models: greedy schedule, discretized DQN, direct TD3, and the two ablations."""

from __future__ import annotations

import math
import os
import pickle
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from .codec import feasible_discrete, split_discrete
from .env import (
    DroneChargerEnv,
    EnvState,
    JointAction,
    TraceEntry,
    encode_state,
    next_target,
    objective,
    reachable_chargers,
    state_dim,
)
from .nn import Adam, Checkpoint, TrainingError, loss_mse, mlp, save_checkpoint, soft_update
from .policy import ReplayBuffer
from .rewards import RewardContext, RewardParams, reward_fail
from .scenario import DeploymentSpec, atomic_write_text, travel_time
from .training import (
    EpisodeResult,
    EvalRow,
    TrainConfig,
    Trainer,
    eval_deployments,
    evaluate_frozen,
    report_to_csv,
    training_deployment,
)

BASELINE_KINDS = ("greedy", "dqn_disc", "td3_direct", "hadmc_minus_aae", "hadmc_minus_ml")
RESERVED_KINDS = ("hppo", "hyar")
TIME_SLOTS = (4.0, 6.0, 8.0)
FULL_TOL = 1e-9


def check_kind(kind: str) -> str:
    if kind in RESERVED_KINDS:
        raise NotImplementedError(f"{kind} relies on a third-party implementation and is not provided")
    if kind not in BASELINE_KINDS + ("hadmc",):
        raise ValueError(f"unknown model kind {kind!r}")
    return kind


# ------------------------------------------------------------------ greedy

def greedy_action(state: EnvState, spec: DeploymentSpec) -> JointAction | None:
    """Three-case rule; ``None`` when no case applies or no progress is possible."""
    d = state.drone
    i = state.next_poi
    target = next_target(state, spec)
    flight = travel_time(d.position, target, d.speed)
    tau = spec.pois[i].tau_max if i < spec.n else 0.0
    m = spec.m
    # Case 1: observe (or return) while the charger stays put
    if d.gamma_f * flight + d.gamma_o * tau <= d.energy + FULL_TOL:
        return JointAction(a=1, tau=tau, a_tilde=state.charger.site, tau_tilde=0.0,
                           a_dis=m + state.charger.site)
    reach = reachable_chargers(state, spec)
    if not reach:
        return None

    def dist(j, p):
        return travel_time(spec.charge_points[j].position, p, 1.0)

    # Case 2: the point closest to the next target; Case 3: the point closest to the drone
    near_target = min(range(m), key=lambda j: (dist(j, target), j))
    c_k = near_target if near_target in reach else min(reach, key=lambda j: (dist(j, d.position), j))
    site = spec.charge_points[c_k].position
    e_k = d.energy - d.gamma_f * travel_time(d.position, site, d.speed)
    if site == d.position and d.energy >= d.capacity - FULL_TOL:
        return None
    full = max(d.capacity - e_k, 0.0) / spec.params.gamma_c
    return JointAction(a=0, tau=0.0, a_tilde=c_k, tau_tilde=full, a_dis=c_k)


def greedy_schedule(spec: DeploymentSpec, reward_params: RewardParams | None = None,
                    ) -> tuple[EnvState, list[TraceEntry], float]:
    """Simulate the greedy rule. Returns (final state, trace, total reward)."""
    env = DroneChargerEnv(spec, reward_params)
    total = 0.0
    while not env.done:
        action = greedy_action(env.state, spec)
        if action is None:
            before = env.state
            env.state = replace(before, status="failed", stage=before.stage + 1)
            ctx = RewardContext(before, env.state, JointAction(1, 0.0, before.charger.site, 0.0),
                                spec, "fail")
            r = reward_fail(ctx, env.reward_params)
            d = before.drone
            env.trace.append(TraceEntry(env.state.stage, "fail", d.position, d.position,
                                        0.0, 0.0, 0.0, 0.0, d.energy, r))
            total += r
            break
        _, r, _, _ = env.step(action)
        total += r
    return env.state, env.trace, total


def greedy_episode(spec: DeploymentSpec, reward_params: RewardParams | None = None) -> EpisodeResult:
    s, _, total = greedy_schedule(spec, reward_params)
    led = s.ledger
    obj = objective(s, spec) if s.status == "completed" else math.nan
    return EpisodeResult(total, s.status, obj, s.drone_clock, led.observing, led.charging,
                         led.wait, led.flight, s.stage)


# --------------------------------------------------------------- direct TD3

def bin_index(v: float, m: int) -> int:
    """Split [-1, 1] into 2m equal bins of width 2 / (2m)."""
    k = 2 * m
    return int(min(max(math.floor((v + 1.0) / (2.0 / k)), 0), k - 1))


def snap_to_feasible(b: int, feasible) -> int:
    """Nearest feasible bin; ties go to the lower index."""
    feasible = np.sort(np.asarray(feasible, dtype=np.int64))
    return int(feasible[int(np.argmin(np.abs(feasible - b)))])


def td3_variant(config: TrainConfig, log=None) -> Trainer:
    trainer = Trainer(replace(config, model="td3_direct"), log)
    trainer.run()
    return trainer


def ablation_configs(base: TrainConfig | None = None) -> dict[str, TrainConfig]:
    base = base or TrainConfig()
    return {
        "hadmc_minus_aae": replace(base, model="hadmc_minus_aae"),
        "hadmc_minus_ml": replace(base, model="hadmc_minus_ml"),
    }


# --------------------------------------------------------------------- DQN

def dqn_id(a_dis: int, slot: int) -> int:
    return a_dis * len(TIME_SLOTS) + slot


def dqn_decode(action_id: int, state: EnvState, spec: DeploymentSpec) -> JointAction:
    """id = a_dis * 3 + slot; slot picks a duration from {4, 6, 8}."""
    a_dis, slot = divmod(int(action_id), len(TIME_SLOTS))
    a, a_tilde = split_discrete(a_dis, spec.m)
    t = TIME_SLOTS[slot]
    if a == 1:
        if state.next_poi < spec.n:
            q = spec.pois[state.next_poi]
            t = min(max(t, q.tau_min), q.tau_max)
        else:
            t = 0.0
        return JointAction(a=1, tau=t, a_tilde=a_tilde, tau_tilde=0.0, a_dis=a_dis)
    return JointAction(a=0, tau=0.0, a_tilde=a_tilde, tau_tilde=t, a_dis=a_dis)


def dqn_mask(state: EnvState, spec: DeploymentSpec) -> np.ndarray:
    mask = np.zeros(2 * spec.m * len(TIME_SLOTS), dtype=bool)
    for a_dis in feasible_discrete(state, spec):
        mask[a_dis * len(TIME_SLOTS): (a_dis + 1) * len(TIME_SLOTS)] = True
    return mask


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.argmax(np.where(mask, q, -np.inf), axis=-1)


class DQNController:
    def __init__(self, net):
        self.net = net

    def __call__(self, state: EnvState, spec: DeploymentSpec) -> JointAction:
        q = self.net.predict(encode_state(state, spec)[None, :])[0]
        return dqn_decode(int(masked_argmax(q, dqn_mask(state, spec))), state, spec)


class DQNTrainer:
    """Epsilon-greedy value learner over the 2m x 3 discretized action ids."""

    def __init__(self, config: TrainConfig, log: Callable[[str], None] | None = None,
                 eps_start: float = 1.0, eps_end: float = 0.05, eps_fraction: float = 0.5):
        self.config = cfg = replace(config, model="dqn_disc")
        self.log = log
        self.n_actions = 2 * cfg.m * len(TIME_SLOTS)
        sd = state_dim(cfg.n, cfg.m)
        dt = np.dtype(cfg.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        seeds = [int(v) for v in self.rng.integers(0, 2**31, size=2)]
        self.q = mlp(sd, self.n_actions, "linear", cfg.hidden, seeds[0], dt)
        self.q_t = self.q.copy()
        self.opt = Adam(self.q.params, lr=cfg.critic_lr or cfg.lr)
        self.buffer = ReplayBuffer(cfg.policy_capacity, {
            "s": ((sd,), "float64"), "a": ((), "int64"), "r": ((), "float64"),
            "s2": ((sd,), "float64"), "mask2": ((self.n_actions,), "bool"), "done": ((), "float64"),
        })
        self.eps_start, self.eps_end = eps_start, eps_end
        self.eps_steps = max(int(eps_fraction * cfg.n_mu), 1)
        self.eval_specs = eval_deployments(cfg)
        self.episode = 0
        self.env = DroneChargerEnv(self._train_spec(0), cfg.reward)
        self.obs = self.env.observation()
        self.step = 0
        self.rows: list[EvalRow] = []
        self.losses: list[float] = []

    def _train_spec(self, k: int) -> DeploymentSpec:
        return training_deployment(self.config, 0 if self.config.train_deployments == "fixed" else k)

    def epsilon(self) -> float:
        frac = min(self.step / self.eps_steps, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def controller(self) -> DQNController:
        return DQNController(self.q.copy())

    def _env_step(self) -> None:
        state, spec = self.env.state, self.env.spec
        mask = dqn_mask(state, spec)
        if self.rng.random() < self.epsilon():
            choices = np.flatnonzero(mask)
            a = int(choices[self.rng.integers(choices.size)])
        else:
            a = int(masked_argmax(self.q.predict(self.obs[None, :])[0], mask))
        s2, r, done, _ = self.env.step(dqn_decode(a, state, spec))
        mask2 = np.ones(self.n_actions, bool) if done else dqn_mask(self.env.state, spec)
        self.buffer.push(s=self.obs, a=a, r=r, s2=s2, mask2=mask2, done=float(done))
        self.obs = s2
        if done:
            self.episode += 1
            self.obs = self.env.reset(self._train_spec(self.episode))

    def update(self, batch: dict[str, np.ndarray]) -> float:
        cfg = self.config
        q2 = self.q_t.predict(batch["s2"]).astype(np.float64)
        best = np.max(np.where(batch["mask2"], q2, -np.inf), axis=1)
        y = np.where(batch["done"] > 0.5, batch["r"], batch["r"] + cfg.discount * best)
        q = self.q.forward(batch["s"])
        rows = np.arange(q.shape[0])
        target = q.copy()
        target[rows, batch["a"]] = y.astype(q.dtype)
        # only the taken action contributes; rescale so the loss is a per-sample mean
        loss, g = loss_mse(q, target)
        g = g * self.n_actions
        if not np.isfinite(loss):
            raise TrainingError(f"DQN loss became non-finite at step {self.step}")
        grads, _ = self.q.backward(g, input_grad=False)
        self.opt.step(self.q.params, grads)
        soft_update(self.q_t, self.q, cfg.tau_soft)
        return loss * self.n_actions

    def run(self, until: int | None = None) -> None:
        cfg = self.config
        until = cfg.n_mu if until is None else min(until, cfg.n_mu)
        while len(self.buffer) < cfg.b_mu:
            self._env_step()
        while self.step < until:
            self._env_step()
            self.losses.append(self.update(self.buffer.sample(cfg.b_mu, self.rng)))
            self.step += 1
            if self.step % cfg.eval_every == 0:
                row, _ = evaluate_frozen(self.controller(), self.eval_specs, cfg.reward, self.step)
                self.rows.append(row)
                if self.log:
                    self.log(f"dqn step {self.step}: reward={row.mean_reward:.3f} "
                             f"completion={row.completion_rate:.2f}")

    def save_state(self, path) -> None:
        log, self.log = self.log, None
        try:
            data = pickle.dumps(self, protocol=pickle.HIGHEST_PROTOCOL)
        finally:
            self.log = log
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint("dqn", {"q": self.q, "q_target": self.q_t},
                          {"n_actions": self.n_actions, "step": self.step, "m": self.config.m,
                           "time_slots": list(TIME_SLOTS)})

    def write_outputs(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"policy": out / "policy.json", "report": out / "train_report.csv"}
        save_checkpoint(self.to_checkpoint(), paths["policy"])
        atomic_write_text(paths["report"], report_to_csv(self.rows, "dqn_disc"))
        return paths


def dqn_variant(config: TrainConfig, log=None) -> DQNTrainer:
    trainer = DQNTrainer(config, log)
    trainer.run()
    return trainer
