"""TD3-style policy over the latent action (z, x)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import Adam, Checkpoint, DenseNet, TrainingError, loss_mse, mlp, soft_update


class ReplayBuffer:
    """Fixed-capacity FIFO ring buffer of named numpy fields."""

    def __init__(self, capacity: int, fields: dict[str, tuple[tuple[int, ...], str]]):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.data = {k: np.zeros((capacity, *shape), dtype=dt) for k, (shape, dt) in fields.items()}
        self.size = 0
        self.ptr = 0

    def __len__(self) -> int:
        return self.size

    def push(self, **values) -> None:
        for k, arr in self.data.items():
            arr[self.ptr] = values[k]
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def indices(self) -> np.ndarray:
        """Storage slots in insertion order, oldest first."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.ptr) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from a buffer holding {self.size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {k: v[idx] for k, v in self.data.items()}


def pretrain_buffer(capacity: int, state_dim: int) -> ReplayBuffer:
    return ReplayBuffer(capacity, {
        "s": ((state_dim,), "float64"), "a_dis": ((), "int64"), "a_con": ((), "float64"),
        "r": ((), "float64"), "s2": ((state_dim,), "float64"),
    })


def policy_buffer(capacity: int, state_dim: int, kappa1: int, kappa2: int) -> ReplayBuffer:
    return ReplayBuffer(capacity, {
        "s": ((state_dim,), "float64"), "z": ((kappa1,), "float64"), "x": ((kappa2,), "float64"),
        "r": ((), "float64"), "s2": ((state_dim,), "float64"), "done": ((), "float64"),
    })


@dataclass
class PolicyHyper:
    sigma: float = 0.1
    sigma_target: float = 0.4
    noise_clip: float = 0.5
    discount: float = 0.995
    lr: float = 4e-5
    critic_lr: float | None = None  # defaults to lr
    tau_soft: float = 5e-3
    policy_delay: int = 30
    hidden: tuple[int, ...] = (256, 256)
    dtype: str = "float64"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        for name in ("sigma_target", "lr", "tau_soft"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0 or self.noise_clip < 0 or self.policy_delay < 1:
            raise ValueError("sigma, noise_clip must be >= 0 and policy_delay >= 1")


def select_action(actor: DenseNet, s: np.ndarray, sigma: float, rng: np.random.Generator,
                  k1: int) -> tuple[np.ndarray, np.ndarray]:
    """Actor output plus N(0, sigma) per dimension, clamped to [-1, 1]."""
    out = actor.predict(np.asarray(s)[None, :])[0].astype(np.float64)
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=out.shape)
    out = np.clip(out, -1.0, 1.0)
    return out[:k1], out[k1:]


def target_action(target_actor: DenseNet, s2: np.ndarray, sigma: float, clip: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Target actor output with clipped Gaussian smoothing noise (batched)."""
    out = target_actor.predict(s2)
    noise = np.clip(rng.normal(0.0, sigma, size=out.shape), -clip, clip).astype(out.dtype)
    return np.clip(out + noise, -1.0, 1.0)


def td3_target(r, q1, q2, done, discount: float):
    """y = r for terminal transitions, else r + discount * min(q1, q2)."""
    r = np.asarray(r, dtype=np.float64)
    bootstrap = discount * np.minimum(q1, q2)
    return np.where(np.asarray(done) > 0.5, r, r + bootstrap)


class LatentTD3:
    def __init__(self, state_dim: int, kappa1: int, kappa2: int, hyper: PolicyHyper | None = None,
                 seed: int = 0):
        self.hyper = h = hyper or PolicyHyper()
        self.state_dim, self.k1, self.k2 = state_dim, kappa1, kappa2
        dt = np.dtype(h.dtype)
        self.rng = np.random.default_rng(seed)
        seeds = [int(v) for v in self.rng.integers(0, 2**31, size=3)]
        act_dim = kappa1 + kappa2
        self.actor = mlp(state_dim, act_dim, "tanh", h.hidden, seeds[0], dt)
        self.critic1 = mlp(state_dim + act_dim, 1, "linear", h.hidden, seeds[1], dt)
        self.critic2 = mlp(state_dim + act_dim, 1, "linear", h.hidden, seeds[2], dt)
        self.actor_t = self.actor.copy()
        self.critic1_t = self.critic1.copy()
        self.critic2_t = self.critic2.copy()
        clr = h.critic_lr or h.lr
        self.actor_opt = Adam(self.actor.params, lr=h.lr)
        self.critic1_opt = Adam(self.critic1.params, lr=clr)
        self.critic2_opt = Adam(self.critic2.params, lr=clr)
        self.critic_updates = 0
        self.actor_updates = 0

    def act(self, s: np.ndarray, sigma: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        sigma = self.hyper.sigma if sigma is None else sigma
        return select_action(self.actor, s, sigma, self.rng, self.k1)

    def critic_update(self, batch: dict[str, np.ndarray]) -> float:
        h = self.hyper
        s, s2 = batch["s"], batch["s2"]
        a = np.concatenate([batch["z"], batch["x"]], axis=1)
        a2 = target_action(self.actor_t, s2, h.sigma_target, h.noise_clip, self.rng)
        sa2 = np.concatenate([s2, a2], axis=1)
        q1t = self.critic1_t.predict(sa2)[:, 0]
        q2t = self.critic2_t.predict(sa2)[:, 0]
        y = td3_target(batch["r"], q1t, q2t, batch["done"], h.discount).reshape(-1, 1)
        sa = np.concatenate([s, a], axis=1)
        total = 0.0
        for net, opt in ((self.critic1, self.critic1_opt), (self.critic2, self.critic2_opt)):
            q = net.forward(sa)
            loss, g = loss_mse(q, y.astype(q.dtype))
            if not np.isfinite(loss):
                raise TrainingError(f"critic loss became non-finite at update {self.critic_updates}")
            grads, _ = net.backward(g, input_grad=False)
            opt.step(net.params, grads)
            total += loss
        self.critic_updates += 1
        return total / 2

    def actor_update(self, batch: dict[str, np.ndarray]) -> float:
        """One ascent step on mean critic-1 value; critics are left untouched."""
        s = batch["s"]
        a = self.actor.forward(s)
        actor_cache = self.actor.cache
        q = self.critic1.forward(np.concatenate([s, a], axis=1))
        loss = -float(np.mean(q))
        _, g_in = self.critic1.backward(np.full_like(q, -1.0 / q.shape[0]), param_grads=False)
        grads, _ = self.actor.backward(g_in[:, self.state_dim:], actor_cache, input_grad=False)
        self.actor_opt.step(self.actor.params, grads)
        self.actor_updates += 1
        return loss

    def soft_update_targets(self) -> None:
        d = self.hyper.tau_soft
        soft_update(self.actor_t, self.actor, d)
        soft_update(self.critic1_t, self.critic1, d)
        soft_update(self.critic2_t, self.critic2, d)

    def train_step(self, batch: dict[str, np.ndarray]) -> tuple[float, float | None]:
        """Critic update every call; actor and targets every ``policy_delay`` calls."""
        c_loss = self.critic_update(batch)
        a_loss = None
        if self.critic_updates % self.hyper.policy_delay == 0:
            a_loss = self.actor_update(batch)
            self.soft_update_targets()
        return c_loss, a_loss

    def to_checkpoint(self, step: int = 0) -> Checkpoint:
        nets = {"actor": self.actor, "critic1": self.critic1, "critic2": self.critic2,
                "actor_target": self.actor_t, "critic1_target": self.critic1_t,
                "critic2_target": self.critic2_t}
        meta = {"hyper": asdict(self.hyper), "state_dim": self.state_dim, "kappa1": self.k1,
                "kappa2": self.k2, "step": step, "critic_updates": self.critic_updates,
                "actor_updates": self.actor_updates}
        return Checkpoint("policy", nets, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LatentTD3":
        if ckpt.kind != "policy":
            raise ValueError(f"expected a policy checkpoint, got {ckpt.kind!r}")
        meta = ckpt.meta
        hyper = dict(meta["hyper"])
        hyper["hidden"] = tuple(hyper["hidden"])
        agent = cls(meta["state_dim"], meta["kappa1"], meta["kappa2"], PolicyHyper(**hyper))
        agent.actor, agent.critic1, agent.critic2 = (ckpt.nets[k] for k in ("actor", "critic1", "critic2"))
        agent.actor_t = ckpt.nets["actor_target"]
        agent.critic1_t = ckpt.nets["critic1_target"]
        agent.critic2_t = ckpt.nets["critic2_target"]
        agent.critic_updates = meta["critic_updates"]
        agent.actor_updates = meta["actor_updates"]
        return agent
