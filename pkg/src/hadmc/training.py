"""End-to-end training: pre-train buffer, decoder pre-training, latent policy loop."""

from __future__ import annotations

import csv
import io
import math
import os
import pickle
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .codec import (
    ActionCodec,
    CodecConfig,
    PretrainBatch,
    feasible_discrete,
    lookup_discrete,
    to_joint_action,
)
from .env import DroneChargerEnv, EnvState, JointAction, encode_state, objective, state_dim
from .nn import TrainingError, save_checkpoint
from .policy import LatentTD3, PolicyHyper, ReplayBuffer, policy_buffer, pretrain_buffer
from .rewards import RewardParams
from .scenario import DeploymentSpec, SystemParams, atomic_write_text, generate_deployment

Controller = Callable[[EnvState, DeploymentSpec], JointAction]

LATENT_MODELS = ("hadmc", "hadmc_minus_aae", "hadmc_minus_ml", "td3_direct")
EVAL_SEED_OFFSET = 1_000_000
TRAIN_SEED_OFFSET = 2_000_000


@dataclass
class TrainConfig:
    model: str = "hadmc"
    deployment_type: str = "A"
    n: int = 10
    m: int = 4
    seed: int = 0
    train_deployments: str = "fixed"  # "fixed": one deployment; "resample": new one per episode
    n_eval_deployments: int = 20
    n_pi: int = 200_000
    n_mu: int = 200_000
    b_pi: int = 1024
    b_mu: int = 256
    pretrain_capacity: int = 100_000
    policy_capacity: int = 10_000
    eval_every: int = 20_000
    kappa1: int = 6
    kappa2: int = 14
    hidden: tuple[int, ...] = (256, 256)
    lr: float = 4e-5
    critic_lr: float | None = None
    codec_lr: float = 4e-5
    sigma: float = 0.1
    sigma_target: float = 0.4
    noise_clip: float = 0.5
    discount: float = 0.995
    tau_soft: float = 5e-3
    policy_delay: int = 30
    # uniformly random latent actions before learning starts; None means b_mu
    warmup_steps: int | None = None
    alpha1: float = 0.5
    alpha2: float = 0.5
    inference: str = "decoder_only"
    dtype: str = "float64"
    reward: RewardParams = field(default_factory=RewardParams)
    params: SystemParams = field(default_factory=SystemParams)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if isinstance(self.reward, dict):
            self.reward = RewardParams(**self.reward)
        if isinstance(self.params, dict):
            self.params = SystemParams(**self.params)
        if self.model not in LATENT_MODELS + ("dqn_disc",):
            raise ValueError(f"unknown model {self.model!r}")
        if self.train_deployments not in ("fixed", "resample"):
            raise ValueError(f"train_deployments must be 'fixed' or 'resample'")
        for name in ("n_pi", "n_mu", "b_pi", "b_mu", "pretrain_capacity", "policy_capacity",
                     "eval_every", "n_eval_deployments"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps is not None and self.warmup_steps < self.b_mu:
            raise ValueError("warmup_steps must be at least b_mu")
        if self.eval_every > self.n_mu:
            raise ValueError("eval_every must not exceed n_mu")

    def policy_hyper(self) -> PolicyHyper:
        return PolicyHyper(
            sigma=self.sigma, sigma_target=self.sigma_target, noise_clip=self.noise_clip,
            discount=self.discount, lr=self.lr, critic_lr=self.critic_lr, tau_soft=self.tau_soft,
            policy_delay=self.policy_delay, hidden=self.hidden, dtype=self.dtype,
        )

    def codec_config(self) -> CodecConfig:
        return CodecConfig(
            m=self.m, state_dim=state_dim(self.n, self.m), kappa1=self.kappa1, kappa2=self.kappa2,
            hidden=self.hidden, lr=self.codec_lr, alpha1=self.alpha1, alpha2=self.alpha2,
            use_aae=self.model != "hadmc_minus_aae",
            mutual_learning=self.model != "hadmc_minus_ml",
            inference=self.inference, dtype=self.dtype,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def training_deployment(cfg: TrainConfig, k: int = 0) -> DeploymentSpec:
    return generate_deployment(cfg.deployment_type, cfg.n, cfg.m, cfg.params,
                               cfg.seed + TRAIN_SEED_OFFSET * (k > 0) + k)


def eval_deployments(cfg: TrainConfig) -> list[DeploymentSpec]:
    """Held-out deployments of the same type, disjoint seeds from training."""
    return [
        generate_deployment(cfg.deployment_type, cfg.n, cfg.m, cfg.params, EVAL_SEED_OFFSET + cfg.seed * 1000 + k)
        for k in range(cfg.n_eval_deployments)
    ]


# --------------------------------------------------------------- rollouts

@dataclass
class EpisodeResult:
    total_reward: float
    status: str
    objective: float
    makespan: float
    t_obs: float
    t_chg: float
    t_wait: float
    t_fly: float
    stages: int
    env: DroneChargerEnv | None = None


def run_episode(spec: DeploymentSpec, controller: Controller,
                reward_params: RewardParams | None = None, keep_env: bool = False) -> EpisodeResult:
    env = DroneChargerEnv(spec, reward_params)
    total = 0.0
    while not env.done:
        _, r, _, _ = env.step(controller(env.state, spec))
        total += r
    s = env.state
    led = s.ledger
    obj = objective(s, spec) if s.status == "completed" else math.nan
    return EpisodeResult(total, s.status, obj, s.drone_clock, led.observing, led.charging,
                         led.wait, led.flight, s.stage, env if keep_env else None)


@dataclass
class EvalRow:
    step: int
    mean_reward: float
    std_reward: float
    completion_rate: float
    mean_objective: float
    t_obs: float
    t_chg: float
    t_wait: float
    t_fly: float

    def csv_values(self) -> list:
        return [self.step, self.mean_reward, self.completion_rate, self.mean_objective,
                self.t_obs, self.t_chg, self.t_wait, self.t_fly]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HADMC_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_frozen(controller: Controller, specs: Sequence[DeploymentSpec],
                    reward_params: RewardParams | None = None, step: int = 0,
                    ) -> tuple[EvalRow, list[EpisodeResult]]:
    """Noise-free rollouts, one per deployment; results merged in deployment order."""
    workers = min(_threads(), len(specs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda sp: run_episode(sp, controller, reward_params), specs))
    else:
        results = [run_episode(sp, controller, reward_params) for sp in specs]
    rewards = np.array([r.total_reward for r in results])
    done = [r for r in results if r.status == "completed"]

    def mean(vals):
        return float(np.mean(vals)) if vals else math.nan

    row = EvalRow(
        step=step,
        mean_reward=float(rewards.mean()),
        std_reward=float(rewards.std()),
        completion_rate=len(done) / len(results),
        mean_objective=mean([r.objective for r in done]),
        t_obs=mean([r.t_obs for r in done]),
        t_chg=mean([r.t_chg for r in done]),
        t_wait=mean([r.t_wait for r in done]),
        t_fly=mean([r.t_fly for r in done]),
    )
    return row, results


REPORT_COLUMNS = ["step", "mean_reward", "completion_rate", "mean_objective",
                  "t_obs", "t_chg", "t_wait", "t_fly"]


def report_to_csv(rows: Sequence[EvalRow], model: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS + (["model"] if model else []))
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row.csv_values()]
                   + ([model] if model else []))
    return buf.getvalue()


# ------------------------------------------------------ latent controllers

def codec_decoder(codec: ActionCodec):
    def decode(z: np.ndarray, x: np.ndarray, state: EnvState, spec: DeploymentSpec) -> JointAction:
        a_dis = lookup_discrete(z, codec.table, feasible_discrete(state, spec))
        return to_joint_action(a_dis, codec.decode_continuous(x), state, spec)
    return decode


def bin_decoder(z: np.ndarray, x: np.ndarray, state: EnvState, spec: DeploymentSpec) -> JointAction:
    """Direct TD3: first head -> one of 2m even bins (snapped to feasible), second -> a_con."""
    from .baselines import bin_index, snap_to_feasible

    b = snap_to_feasible(bin_index(float(z[0]), spec.m), feasible_discrete(state, spec))
    return to_joint_action(b, float(x[0]), state, spec)


class LatentController:
    def __init__(self, actor, decoder, kappa1: int):
        self.actor = actor
        self.decoder = decoder
        self.k1 = kappa1

    def __call__(self, state: EnvState, spec: DeploymentSpec) -> JointAction:
        out = self.actor.predict(encode_state(state, spec)[None, :])[0].astype(np.float64)
        return self.decoder(out[: self.k1], out[self.k1:], state, spec)


# ------------------------------------------------------- pre-train buffer

def _uniform_action(state: EnvState, spec: DeploymentSpec, rng: np.random.Generator) -> tuple[int, float]:
    feasible = feasible_discrete(state, spec)
    return int(feasible[rng.integers(feasible.size)]), float(rng.uniform(-1.0, 1.0))


def build_pretrain_buffer(spec_source, capacity: int, seed: int,
                          reward_params: RewardParams | None = None) -> ReplayBuffer:
    """Fill a buffer with transitions from a uniformly random feasible policy.

    ``spec_source`` is one deployment, or a callable ``k -> deployment`` giving
    the deployment for episode ``k``.
    """
    next_spec = spec_source if callable(spec_source) else (lambda k: spec_source)
    rng = np.random.default_rng(seed)
    spec = next_spec(0)
    buf = pretrain_buffer(capacity, state_dim(spec.n, spec.m))
    env = DroneChargerEnv(spec, reward_params)
    episode = 0
    s = env.observation()
    while len(buf) < capacity:
        a_dis, a_con = _uniform_action(env.state, env.spec, rng)
        s2, r, done, _ = env.step(to_joint_action(a_dis, a_con, env.state, env.spec))
        buf.push(s=s, a_dis=a_dis, a_con=a_con, r=r, s2=s2)
        s = s2
        if done:
            episode += 1
            s = env.reset(next_spec(episode))
    return buf


def batch_from(sample: dict[str, np.ndarray]) -> PretrainBatch:
    return PretrainBatch(sample["s"], sample["a_dis"], sample["a_con"])


def pretrain_decoder(buffer: ReplayBuffer, codec: ActionCodec, n_pi: int, b_pi: int,
                     seed: int, log_every: int = 0, log: Callable[[str], None] | None = None,
                     ) -> list[tuple[float, float, float]]:
    """Run ``n_pi`` pre-training steps on random batches; returns the loss curve."""
    if len(buffer) < b_pi:
        raise ValueError(f"buffer holds {len(buffer)} tuples, fewer than the batch size {b_pi}")
    rng = np.random.default_rng(seed)
    curve = []
    for step in range(n_pi):
        try:
            rep = codec.pretrain_step(batch_from(buffer.sample(b_pi, rng)))
        except TrainingError as exc:
            raise TrainingError(f"decoder pre-training diverged at step {step}: {exc}") from exc
        curve.append((rep.l1, rep.l2, rep.l3))
        if log and log_every and (step + 1) % log_every == 0:
            log(f"pretrain step {step + 1}: L1={rep.l1:.4f} L2={rep.l2:.4f} L3={rep.l3:.4f}")
    return curve


# ----------------------------------------------------------------- trainer

class Trainer:
    """Resumable training run for the latent-policy models."""

    def __init__(self, config: TrainConfig, log: Callable[[str], None] | None = None):
        if config.model not in LATENT_MODELS:
            raise ValueError(f"Trainer handles {LATENT_MODELS}, not {config.model!r}")
        self.config = cfg = config
        self.log = log
        self.sd = state_dim(cfg.n, cfg.m)
        direct = cfg.model == "td3_direct"
        self.k1, self.k2 = (1, 1) if direct else (cfg.kappa1, cfg.kappa2)
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        self.codec = None if direct else ActionCodec(cfg.codec_config(), seed=_seed(seeds[0]))
        self.agent = LatentTD3(self.sd, self.k1, self.k2, cfg.policy_hyper(), seed=_seed(seeds[1]))
        self.buffer = policy_buffer(cfg.policy_capacity, self.sd, self.k1, self.k2)
        self.pretrain_seed = _seed(seeds[2])
        self.sample_rng = np.random.default_rng(seeds[3])
        self.eval_specs = eval_deployments(cfg)
        self.episode = 0
        self.env = DroneChargerEnv(self._train_spec(0), cfg.reward)
        self.obs = self.env.observation()
        self.step = 0
        self.phase = "init"
        self.rows: list[EvalRow] = []
        self.pretrain_curve: list[tuple[float, float, float]] = []
        self.critic_losses: list[float] = []
        self.episode_returns: list[float] = []
        self._ep_return = 0.0

    def _train_spec(self, k: int) -> DeploymentSpec:
        if self.config.train_deployments == "fixed":
            k = 0
        return training_deployment(self.config, k)

    def _say(self, msg: str) -> None:
        if self.log:
            self.log(msg)

    @property
    def decoder(self):
        return bin_decoder if self.codec is None else codec_decoder(self.codec)

    def controller(self) -> LatentController:
        """Frozen snapshot for evaluation."""
        return LatentController(self.agent.actor.copy(), self.decoder, self.k1)

    # phases -----------------------------------------------------------

    def pretrain(self) -> None:
        cfg = self.config
        if self.codec is not None and self.codec.config.use_aae:
            buf = build_pretrain_buffer(self._train_spec, cfg.pretrain_capacity, self.pretrain_seed, cfg.reward)
            self.pretrain_curve = pretrain_decoder(
                buf, self.codec, cfg.n_pi, min(cfg.b_pi, len(buf)), self.pretrain_seed + 1,
                log_every=max(cfg.n_pi // 10, 1), log=self.log,
            )
        self.phase = "warmup"

    def _env_step(self, noisy: bool = True, uniform: bool = False) -> None:
        if uniform:
            z = self.agent.rng.uniform(-1.0, 1.0, self.agent.k1)
            x = self.agent.rng.uniform(-1.0, 1.0, self.agent.k2)
        else:
            z, x = self.agent.act(self.obs, None if noisy else 0.0)
        action = self.decoder(z, x, self.env.state, self.env.spec)
        s2, r, done, _ = self.env.step(action)
        self.buffer.push(s=self.obs, z=z, x=x, r=r, s2=s2, done=float(done))
        self._ep_return += r
        self.obs = s2
        if done:
            self.episode_returns.append(self._ep_return)
            self._ep_return = 0.0
            self.episode += 1
            self.obs = self.env.reset(self._train_spec(self.episode))

    def warmup(self) -> None:
        cfg = self.config
        if cfg.warmup_steps is None:
            while len(self.buffer) < cfg.b_mu:
                self._env_step()
        else:
            while len(self.buffer) < min(cfg.warmup_steps, cfg.policy_capacity):
                self._env_step(uniform=True)
        self.phase = "train"

    def evaluate(self) -> EvalRow:
        row, _ = evaluate_frozen(self.controller(), self.eval_specs, self.config.reward, self.step)
        return row

    def train(self, until: int | None = None) -> None:
        cfg = self.config
        until = cfg.n_mu if until is None else min(until, cfg.n_mu)
        while self.step < until:
            self._env_step()
            c_loss, _ = self.agent.train_step(self.buffer.sample(cfg.b_mu, self.sample_rng))
            self.critic_losses.append(c_loss)
            self.step += 1
            if self.step % cfg.eval_every == 0:
                row = self.evaluate()
                self.rows.append(row)
                self._say(
                    f"step {self.step}: reward={row.mean_reward:.3f} completion={row.completion_rate:.2f} "
                    f"objective={row.mean_objective:.5f}"
                )
        if self.step >= cfg.n_mu:
            self.phase = "done"

    def run(self, until: int | None = None) -> None:
        if self.phase == "init":
            self.pretrain()
        if self.phase == "warmup":
            self.warmup()
        if self.phase == "train":
            self.train(until)

    # persistence ------------------------------------------------------

    def save_state(self, path) -> None:
        log, self.log = self.log, None
        try:
            data = pickle.dumps(self, protocol=pickle.HIGHEST_PROTOCOL)
        finally:
            self.log = log
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    @staticmethod
    def load_state(path, log: Callable[[str], None] | None = None) -> "Trainer":
        with open(path, "rb") as fh:
            trainer = pickle.load(fh)
        trainer.log = log
        return trainer

    def write_outputs(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"policy": out / "policy.json", "report": out / "train_report.csv"}
        save_checkpoint(self.agent.to_checkpoint(self.step), paths["policy"])
        if self.codec is not None:
            paths["codec"] = out / "codec.json"
            save_checkpoint(self.codec.to_checkpoint(), paths["codec"])
        atomic_write_text(paths["report"], report_to_csv(self.rows))
        if self.pretrain_curve:
            paths["pretrain"] = out / "pretrain_losses.csv"
            atomic_write_text(paths["pretrain"], losses_to_csv(self.pretrain_curve))
        return paths


def losses_to_csv(curve: Sequence[tuple[float, float, float]]) -> str:
    lines = ["step,l1,l2,l3"]
    lines += [f"{k},{a!r},{b!r},{c!r}" for k, (a, b, c) in enumerate(curve)]
    return "\n".join(lines) + "\n"


def _seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def train(config: TrainConfig, out_dir=None, log=None, checkpoint_path=None) -> Trainer:
    """Run the whole pipeline. A resumable state is written on abort when a path is given."""
    trainer = Trainer(config, log)
    t0 = time.perf_counter()
    try:
        trainer.run()
    except BaseException:
        if checkpoint_path is not None:
            trainer.save_state(checkpoint_path)
        raise
    trainer.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        trainer.write_outputs(out_dir)
    return trainer
