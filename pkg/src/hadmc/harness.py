"""Experiment orchestration: configs, comparisons, the latent-dimension sweep, report bundles."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .baselines import DQNController, check_kind, greedy_episode
from .codec import ActionCodec, CodecConfig, lookup_discrete_batch
from .env import state_dim
from .nn import load_checkpoint
from .policy import LatentTD3
from .rewards import RewardParams
from .scenario import (
    DeploymentSpec,
    SystemParams,
    atomic_write_text,
    generate_deployment,
    load_deployment,
    save_deployment,
    scenario_preset,
)
from .training import (
    EpisodeResult,
    LatentController,
    TrainConfig,
    bin_decoder,
    build_pretrain_buffer,
    codec_decoder,
    eval_deployments,
    pretrain_decoder,
    run_episode,
)


class ConfigError(ValueError):
    def __init__(self, message: str, field_path: str = ""):
        super().__init__(message)
        self.field_path = field_path


class ReportError(RuntimeError):
    def __init__(self, message: str, missing: Sequence[str] = ()):
        super().__init__(message)
        self.missing = list(missing)


# ----------------------------------------------------------------- config

class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioBlock(_Block):
    type: Literal["A", "R"] = "A"
    n: int = Field(10, ge=1)
    m: int = Field(4, ge=1)
    seeds: list[int] = [0]
    count: int = Field(20, ge=1)
    tag: str | None = None

    @field_validator("tag")
    @classmethod
    def _known_tag(cls, v):
        if v is not None:
            scenario_preset(v)
        return v


class ModelBlock(_Block):
    kind: str = "hadmc"
    kappa1: int = Field(6, ge=1)
    kappa2: int = Field(14, ge=1)
    hidden: list[int] = [256, 256]
    alpha1: float = Field(0.5, gt=0, lt=1)
    alpha2: float = Field(0.5, gt=0, lt=1)
    inference: Literal["decoder_only", "encode_then_decode"] = "decoder_only"

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, v):
        check_kind(v)
        return v


class TrainBlock(_Block):
    n_pi: int = Field(200_000, ge=1)
    n_mu: int = Field(8_000_000, ge=1)
    b_pi: int = Field(1024, ge=1)
    b_mu: int = Field(256, ge=1)
    pretrain_capacity: int = Field(100_000, ge=1)
    policy_capacity: int = Field(10_000, ge=1)
    eval_every: int = Field(20_000, ge=1)
    n_eval_deployments: int = Field(50, ge=1)
    train_deployments: Literal["fixed", "resample"] = "fixed"
    lr: float = Field(4e-5, gt=0)
    critic_lr: float | None = Field(None, gt=0)
    codec_lr: float = Field(4e-5, gt=0)
    sigma: float = Field(0.1, ge=0)
    sigma_target: float = Field(0.4, gt=0)
    noise_clip: float = Field(0.5, ge=0)
    discount: float = Field(0.995, gt=0, le=1)
    tau_soft: float = Field(5e-3, gt=0, le=1)
    policy_delay: int = Field(30, ge=1)
    warmup_steps: int | None = Field(None, ge=1)
    dtype: Literal["float32", "float64"] = "float64"


class SweepBlock(_Block):
    kappa1: list[int] = [1, 9]
    kappa2: list[int] = [1, 14]
    samples: int = Field(10_000, ge=1)
    n_pi: int = Field(20_000, ge=1)
    b_pi: int = Field(1024, ge=1)
    buffer: int = Field(10_000, ge=1)
    repeats: int = Field(1, ge=1)


class ExperimentConfig(_Block):
    seed: int = 0
    output_dir: str = "out"
    scenario: ScenarioBlock = ScenarioBlock()
    model: ModelBlock = ModelBlock()
    train: TrainBlock = TrainBlock()
    sweep: SweepBlock = SweepBlock()
    reward: dict[str, float] = {}
    params: dict[str, float] = {}

    @field_validator("reward")
    @classmethod
    def _reward(cls, v):
        allowed = {f.name for f in fields(RewardParams)}
        bad = set(v) - allowed
        if bad:
            raise ValueError(f"unknown reward keys {sorted(bad)}")
        RewardParams(**v)
        return v

    @field_validator("params")
    @classmethod
    def _params(cls, v):
        allowed = {f.name for f in fields(SystemParams)}
        bad = set(v) - allowed
        if bad:
            raise ValueError(f"unknown params keys {sorted(bad)}")
        SystemParams(**v)
        return v

    # derived ---------------------------------------------------------

    def resolved_scenario(self) -> tuple[str, int, int, str]:
        sc = self.scenario
        if sc.tag:
            kind, n, m = scenario_preset(sc.tag)
            return kind, n, m, sc.tag
        return sc.type, sc.n, sc.m, scenario_tag_for(sc.type, sc.n, sc.m)

    def system_params(self) -> SystemParams:
        return SystemParams(**self.params)

    def train_config(self, kind: str | None = None, seed: int | None = None) -> TrainConfig:
        kind = kind or self.model.kind
        dep_type, n, m, _ = self.resolved_scenario()
        t = self.train.model_dump()
        mdl = self.model.model_dump()
        mdl.pop("kind")
        return TrainConfig(
            model=kind, deployment_type=dep_type, n=n, m=m,
            seed=self.seed if seed is None else seed,
            reward=RewardParams(**self.reward), params=self.system_params(),
            **t, **{**mdl, "hidden": tuple(mdl["hidden"])},
        )


# budgets that fit one CPU, plus policy settings that learn within them
DESK_SCALE = {
    "n_pi": 20_000, "n_mu": 200_000, "eval_every": 20_000, "n_eval_deployments": 20,
    "pretrain_capacity": 10_000, "dtype": "float32",
    "sigma": 0.3, "warmup_steps": 10_000, "lr": 3e-4, "policy_delay": 2, "train_deployments": "resample",
}


def scenario_tag_for(kind: str, n: int, m: int) -> str:
    for k in range(1, 5):
        if (n, m) == (10 * k, 4 * k):
            return f"S{kind}{k}"
    return "custom"


def _field_path(err: dict) -> str:
    parts = []
    for p in err.get("loc", ()):
        parts.append(f"[{p}]" if isinstance(p, int) else ("." if parts else "") + str(p))
    return "".join(parts)


def parse_config(doc: dict, desk_scale: bool = False) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(doc)
        if desk_scale:
            given = doc.get("train", {}) if isinstance(doc, dict) else {}
            overrides = {k: v for k, v in DESK_SCALE.items() if k not in given}
            cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update=overrides)})
        cfg.train_config()
    except ValidationError as exc:
        err = exc.errors()[0]
        path = _field_path(err)
        raise ConfigError(f"{path}: {err['msg']}", path) from None
    except (ValueError, NotImplementedError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, desk_scale: bool = False) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(doc, desk_scale)


def threads() -> int:
    try:
        return max(1, int(os.environ.get("HADMC_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Map over ``items`` with up to HADMC_THREADS workers; results keep input order."""
    workers = min(threads(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# -------------------------------------------------------------- deployments

def generate_set(cfg: ExperimentConfig) -> list[tuple[str, DeploymentSpec]]:
    """(file stem, deployment) for every seed x count, e.g. SA1_000."""
    kind, n, m, tag = cfg.resolved_scenario()
    out = []
    idx = 0
    for seed in cfg.scenario.seeds:
        for k in range(cfg.scenario.count):
            spec = generate_deployment(kind, n, m, cfg.system_params(), seed * 10_000 + k, scenario_tag=tag)
            out.append((f"{tag}_{idx:03d}", spec))
            idx += 1
    return out


def write_deployments(items, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for stem, spec in items:
        p = out / f"{stem}.json"
        save_deployment(spec, p)
        paths.append(p)
    return paths


def read_deployments(path) -> list[tuple[str, DeploymentSpec]]:
    p = Path(path)
    # generated sets are named like SA1_000.json; config copies are skipped
    files = sorted(f for f in p.glob("*.json") if "config" not in f.stem) if p.is_dir() else [p]
    if not files:
        raise FileNotFoundError(f"no deployment files under {p}")
    return [(f.stem, load_deployment(f)) for f in files]


# -------------------------------------------------------------- comparison

COMPARISON_COLUMNS = ["model", "scenario", "deployment_id", "objective", "completion_time",
                      "completion_rate", "t_obs", "t_chg", "t_wait", "t_fly"]


def load_controller(model_dir, kind: str | None = None):
    """Rebuild a frozen controller from a model directory written by ``train``."""
    d = Path(model_dir)
    policy = d / "policy.json"
    if not policy.exists():
        raise FileNotFoundError(f"missing checkpoint for model {kind or d.name!r}: {policy}")
    ckpt = load_checkpoint(policy)
    if ckpt.kind == "dqn":
        return DQNController(ckpt.nets["q"])
    agent = LatentTD3.from_checkpoint(ckpt)
    codec_path = d / "codec.json"
    if codec_path.exists():
        decoder = codec_decoder(ActionCodec.from_checkpoint(load_checkpoint(codec_path)))
    else:
        decoder = bin_decoder
    return LatentController(agent.actor, decoder, agent.k1)


def run_comparison(models: dict, deployments: Sequence[tuple[str, DeploymentSpec]], scenario: str,
                   reward: RewardParams | None = None) -> list[dict]:
    """One row per model x deployment. ``models`` maps name -> controller or "greedy"."""
    rows = []
    for name, ctl in models.items():
        def one(item, ctl=ctl):
            _, spec = item
            if ctl == "greedy":
                return greedy_episode(spec, reward)
            return run_episode(spec, ctl, reward)

        for (dep_id, _), res in zip(deployments, parallel_map(one, list(deployments))):
            rows.append(comparison_row(name, scenario, dep_id, res))
    return rows


def comparison_row(model: str, scenario: str, dep_id: str, res: EpisodeResult) -> dict:
    done = res.status == "completed"
    return {
        "model": model, "scenario": scenario, "deployment_id": dep_id,
        "objective": res.objective if done else math.nan,
        "completion_time": res.makespan if done else math.nan,
        "completion_rate": 1.0 if done else 0.0,
        "t_obs": res.t_obs, "t_chg": res.t_chg, "t_wait": res.t_wait, "t_fly": res.t_fly,
    }


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def summarize(rows: Sequence[dict]) -> dict:
    """Per-model means and stds; objective and time columns over completed episodes only."""
    out = {}
    for model in dict.fromkeys(r["model"] for r in rows):
        mine = [r for r in rows if r["model"] == model]
        done = [r for r in mine if r["completion_rate"] == 1.0]
        entry = {"episodes": len(mine), "completion_rate": float(np.mean([r["completion_rate"] for r in mine]))}
        for col in ("objective", "completion_time", "t_obs", "t_chg", "t_wait", "t_fly"):
            vals = [r[col] for r in done]
            entry[f"{col}_mean"] = float(np.mean(vals)) if vals else None
            entry[f"{col}_std"] = float(np.std(vals)) if vals else None
        shares = [r["t_obs"] / r["completion_time"] for r in done]
        entry["observing_share"] = float(np.mean(shares)) if shares else None
        out[model] = entry
    return out


# ------------------------------------------------------------------- sweep

SWEEP_COLUMNS = ["pipeline", "kappa1", "kappa2", "variance"]
AAE_BINS = 100


def frequency_variance(labels: np.ndarray, n_outputs: int) -> float:
    freq = np.bincount(labels, minlength=n_outputs) / labels.size
    return float(np.var(freq))


def sweep_point(buffer, m: int, sd: int, kappa1: int, kappa2: int, samples: int, n_pi: int,
                b_pi: int, seed: int, lr: float = 4e-5, dtype: str = "float32",
                hidden=(256, 256)) -> dict[str, float]:
    """Train a fresh codec at (kappa1, kappa2) and measure output-frequency variances."""
    codec = ActionCodec(CodecConfig(m=m, state_dim=sd, kappa1=kappa1, kappa2=kappa2, lr=lr,
                                    dtype=dtype, hidden=tuple(hidden)), seed=seed)
    pretrain_decoder(buffer, codec, n_pi, min(b_pi, len(buffer)), seed)
    rng = np.random.default_rng(seed)
    z = np.round(rng.uniform(-1.0, 1.0, size=(samples, kappa1)), 4)
    x = np.round(rng.uniform(-1.0, 1.0, size=(samples, kappa2)), 4)
    disc = lookup_discrete_batch(z.astype(codec.dtype), codec.table)
    a_con = codec.decode_continuous_batch(x)
    bins = np.clip(np.floor((a_con + 1.0) / (2.0 / AAE_BINS)).astype(np.int64), 0, AAE_BINS - 1)
    return {"embedding": frequency_variance(disc, 2 * m), "aae": frequency_variance(bins, AAE_BINS)}


def latent_dim_sweep(spec: DeploymentSpec, kappa1_range: Sequence[int], kappa2_range: Sequence[int],
                     samples: int = 10_000, seed: int = 0, n_pi: int = 20_000, b_pi: int = 1024,
                     buffer_capacity: int = 10_000, lr: float = 4e-5, dtype: str = "float32",
                     hidden=(256, 256)) -> list[dict]:
    """Variance of output frequencies per grid point, for both decoder pipelines."""
    buf = build_pretrain_buffer(spec, buffer_capacity, seed)
    sd = state_dim(spec.n, spec.m)
    grid = [(k1, k2) for k1 in kappa1_range for k2 in kappa2_range]

    def one(point):
        k1, k2 = point
        return sweep_point(buf, spec.m, sd, k1, k2, samples, n_pi, b_pi, seed, lr, dtype, hidden)

    rows = []
    for (k1, k2), res in zip(grid, parallel_map(one, grid)):
        rows.append({"pipeline": "embedding", "kappa1": k1, "kappa2": k2, "variance": res["embedding"]})
        rows.append({"pipeline": "aae", "kappa1": k1, "kappa2": k2, "variance": res["aae"]})
    return rows


# ------------------------------------------------------------------ report

REPORT_COLUMNS_TRAIN = ["step", "mean_reward", "completion_rate", "mean_objective",
                        "t_obs", "t_chg", "t_wait", "t_fly"]


def _read_csv(path: Path, columns: Sequence[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if [c for c in header if c != "model"] != [c for c in columns if c != "model"]:
            raise ReportError(f"{path}: expected columns {list(columns)}, found {header}")
        rows = list(reader)
    for k, r in enumerate(rows):
        for c in columns:
            if c in ("model", "scenario", "deployment_id", "pipeline"):
                continue
            try:
                r[c] = float(r[c])
            except (TypeError, ValueError):
                raise ReportError(f"{path}: row {k + 1} column {c!r} is not numeric") from None
    return rows


def _num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def build_report(results_dir, required: Sequence[str] = ("comparison.csv",)) -> dict[str, dict]:
    """Plot-ready bundles from the CSVs under ``results_dir``; nothing is rendered."""
    root = Path(results_dir)
    missing = [name for name in required if not (root / name).exists()]
    if missing:
        raise ReportError(f"missing inputs: {', '.join(missing)}", missing)
    bundles: dict[str, dict] = {}

    curves = {}
    for path in sorted(root.glob("*/train_report.csv")):
        rows = _read_csv(path, REPORT_COLUMNS_TRAIN)
        curves[path.parent.name] = {
            "step": [int(r["step"]) for r in rows],
            "mean_reward": [_num(r["mean_reward"]) for r in rows],
            "completion_rate": [_num(r["completion_rate"]) for r in rows],
        }
    if curves:
        bundles["reward_curves"] = {"series": curves}

    comp = root / "comparison.csv"
    if comp.exists():
        rows = _read_csv(comp, COMPARISON_COLUMNS)
        summary = summarize(rows)
        models = list(summary)
        bundles["objective_bars"] = {
            "models": models,
            "mean": [summary[k]["objective_mean"] for k in models],
            "std": [summary[k]["objective_std"] for k in models],
        }
        bundles["completion_time_bars"] = {
            "models": models,
            "mean": [summary[k]["completion_time_mean"] for k in models],
            "std": [summary[k]["completion_time_std"] for k in models],
        }
        bundles["time_assignment"] = {
            "components": ["observing", "charging", "waiting", "flight"],
            "models": {k: [summary[k][f"{c}_mean"] for c in ("t_obs", "t_chg", "t_wait", "t_fly")]
                       for k in models},
        }

    sweep = root / "sweep.csv"
    if sweep.exists():
        rows = _read_csv(sweep, SWEEP_COLUMNS)
        heat = {}
        for pipe in ("embedding", "aae"):
            mine = [r for r in rows if r["pipeline"] == pipe]
            k1s = sorted({int(r["kappa1"]) for r in mine})
            k2s = sorted({int(r["kappa2"]) for r in mine})
            grid = [[None] * len(k2s) for _ in k1s]
            for r in mine:
                grid[k1s.index(int(r["kappa1"]))][k2s.index(int(r["kappa2"]))] = r["variance"]
            if any(v is None for row in grid for v in row):
                raise ReportError(f"{sweep}: {pipe} grid is incomplete")
            heat[pipe] = {"kappa1": k1s, "kappa2": k2s, "variance": grid}
        bundles["sweep_heatmap"] = heat
    return bundles


def write_report(results_dir, out_dir=None, required: Sequence[str] = ("comparison.csv",)) -> list[Path]:
    bundles = build_report(results_dir, required)
    out = Path(out_dir or Path(results_dir) / "report")
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, doc in bundles.items():
        p = out / f"{name}.json"
        atomic_write_text(p, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        paths.append(p)
    return paths


def eval_set(cfg: ExperimentConfig, seed: int | None = None) -> list[tuple[str, DeploymentSpec]]:
    """Held-out deployments matching those used during training evaluation."""
    tc = cfg.train_config(seed=seed)
    _, _, _, tag = cfg.resolved_scenario()
    return [(f"{tag}_eval_{k:03d}", s) for k, s in enumerate(eval_deployments(tc))]


def with_train(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    return cfg.model_copy(update={"train": cfg.train.model_copy(update=updates)})

