"""Action decoder: latent (z, x) -> hybrid joint action.

Two pipelines. An embedding table maps ``z`` to the coupled discrete action
``a_dis = m * a + a_tilde`` by nearest-row lookup. An adversarial
autoencoder maps ``x`` to the normalized continuous action ``a_con``. The
pre-training step couples them: the reconstruction loss also trains the
table, and the discriminator is conditioned on (embedding, state).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .env import EnvState, JointAction, reachable_chargers
from .nn import Adam, Checkpoint, DenseNet, TrainingError, loss_bce, loss_mse, mlp
from .scenario import DeploymentSpec, travel_time


class EmptyActionSet(RuntimeError):
    """No feasible discrete action; the episode must fail."""


def combine_discrete(a: int, a_tilde: int, m: int) -> int:
    if a not in (0, 1) or not 0 <= a_tilde < m:
        raise ValueError(f"out of range: a={a}, a_tilde={a_tilde}, m={m}")
    return m * a + a_tilde


def split_discrete(a_dis: int, m: int) -> tuple[int, int]:
    if not 0 <= a_dis < 2 * m:
        raise ValueError(f"a_dis={a_dis} outside 0..{2 * m - 1}")
    return divmod(int(a_dis), m)


def feasible_discrete(state: EnvState, spec: DeploymentSpec) -> np.ndarray:
    """Coupled ids allowed this stage: every observe id, charge ids only for C_k."""
    m = spec.m
    charge = reachable_chargers(state, spec)
    return np.asarray(sorted(charge) + list(range(m, 2 * m)), dtype=np.int64)


def init_table(rows: int, kappa1: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    return np.clip(rng.standard_normal((rows, kappa1)), -1.0, 1.0).astype(dtype)


def lookup_discrete(z: np.ndarray, table: np.ndarray, feasible=None) -> int:
    """Feasible row whose tanh-normalized embedding is nearest to ``z``.

    Ties resolve to the lowest row index.
    """
    rows = np.arange(table.shape[0]) if feasible is None else np.asarray(feasible, dtype=np.int64)
    if rows.size == 0:
        raise EmptyActionSet("no feasible discrete action")
    rows = np.sort(rows)
    diff = np.tanh(table[rows]) - np.asarray(z, dtype=table.dtype)
    return int(rows[int(np.argmin(np.einsum("ij,ij->i", diff, diff)))])


def lookup_discrete_batch(z: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Unmasked nearest-row lookup for a batch of latents."""
    emb = np.tanh(table)
    d2 = (z * z).sum(1)[:, None] - 2 * z @ emb.T + (emb * emb).sum(1)[None, :]
    return np.argmin(d2, axis=1)


def physical_time(a_dis: int, a_con: float, state: EnvState, spec: DeploymentSpec) -> float:
    """Map normalized ``a_con`` in [-1, 1] to an observation or charging duration."""
    a, a_tilde = split_discrete(a_dis, spec.m)
    frac = (min(max(float(a_con), -1.0), 1.0) + 1) / 2
    d = state.drone
    if a == 1:
        if state.next_poi >= spec.n:
            return 0.0
        q = spec.pois[state.next_poi]
        return q.tau_min + frac * (q.tau_max - q.tau_min)
    flight = travel_time(d.position, spec.charge_points[a_tilde].position, d.speed)
    e_pred = max(d.energy - d.gamma_f * flight, 0.0)
    return frac * (d.capacity - e_pred) / spec.params.gamma_c


def to_joint_action(a_dis: int, a_con: float, state: EnvState, spec: DeploymentSpec) -> JointAction:
    a, a_tilde = split_discrete(a_dis, spec.m)
    t = physical_time(a_dis, a_con, state, spec)
    return JointAction(a=a, tau=t if a else 0.0, a_tilde=a_tilde, tau_tilde=0.0 if a else t,
                       a_dis=int(a_dis), a_con=float(a_con))


@dataclass
class CodecConfig:
    m: int
    state_dim: int
    kappa1: int = 6
    kappa2: int = 14
    hidden: tuple[int, ...] = (256, 256)
    lr: float = 4e-5
    alpha1: float = 0.5
    alpha2: float = 0.5
    use_aae: bool = True
    mutual_learning: bool = True
    inference: str = "decoder_only"  # or "encode_then_decode"
    dtype: str = "float64"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.inference not in ("decoder_only", "encode_then_decode"):
            raise ValueError(f"unknown inference mode {self.inference!r}")
        if not (0 < self.alpha1 < 1 and 0 < self.alpha2 < 1):
            raise ValueError("alpha1 and alpha2 must lie in (0, 1)")


@dataclass
class LossReport:
    l1: float
    l2: float
    l3: float


@dataclass
class PretrainBatch:
    states: np.ndarray
    a_dis: np.ndarray
    a_con: np.ndarray


class ActionCodec:
    def __init__(self, config: CodecConfig, seed: int = 0):
        self.config = cfg = config
        self.dtype = np.dtype(cfg.dtype)
        self.rng = np.random.default_rng(seed)
        self.table = init_table(2 * cfg.m, cfg.kappa1, self.rng, self.dtype)
        self.table_opt = Adam([self.table], lr=cfg.lr)
        self.encoder = self.decoder = self.disc = None
        if cfg.use_aae:
            k1, k2 = cfg.kappa1, cfg.kappa2
            disc_in = k2 + (k1 + cfg.state_dim if cfg.mutual_learning else 0)
            seeds = self.rng.integers(0, 2**31, size=3)
            self.encoder = mlp(k1 + 1, k2, "linear", cfg.hidden, int(seeds[0]), self.dtype)
            self.decoder = mlp(k2, k1 + 1, "tanh", cfg.hidden, int(seeds[1]), self.dtype)
            self.disc = mlp(disc_in, 1, "sigmoid", cfg.hidden, int(seeds[2]), self.dtype)
            self.enc_opt = Adam(self.encoder.params, lr=cfg.lr)
            self.dec_opt = Adam(self.decoder.params, lr=cfg.lr)
            self.disc_opt = Adam(self.disc.params, lr=cfg.lr)
            self.gen_opt = Adam(self.encoder.params, lr=cfg.lr)
        self.steps = 0

    # ------------------------------------------------------------- inference

    def decode_continuous(self, x: np.ndarray) -> float:
        return float(self.decode_continuous_batch(np.asarray(x, dtype=self.dtype)[None, :])[0])

    def decode_continuous_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if not self.config.use_aae:
            return np.clip(x[:, 0], -1.0, 1.0)
        if self.config.inference == "encode_then_decode":
            width = self.config.kappa1 + 1
            padded = np.zeros((x.shape[0], width), dtype=self.dtype)
            k = min(width, x.shape[1])
            padded[:, :k] = x[:, :k]
            x = self.encoder.predict(padded)
        return self.decoder.predict(x)[:, -1]

    def decode(self, z: np.ndarray, x: np.ndarray, feasible=None) -> tuple[int, float]:
        return lookup_discrete(z, self.table, feasible), self.decode_continuous(x)

    # -------------------------------------------------------------- training

    def _embed(self, batch: PretrainBatch) -> np.ndarray:
        return self.table[batch.a_dis]

    def _disc_input(self, h: np.ndarray, emb: np.ndarray, states: np.ndarray) -> np.ndarray:
        if not self.config.mutual_learning:
            return h
        return np.concatenate([h, emb, states.astype(self.dtype)], axis=1)

    def l1_loss(self, batch: PretrainBatch):
        """Reconstruction loss and gradients for (encoder, decoder, table)."""
        cfg = self.config
        k1 = cfg.kappa1
        emb = self._embed(batch)
        a_con = batch.a_con.astype(self.dtype).reshape(-1, 1)
        inp = np.concatenate([emb, a_con], axis=1)
        h = self.encoder.forward(inp)
        out = self.decoder.forward(h)
        l_emb, g_emb_hat = loss_mse(out[:, :k1], emb)
        l_con, g_con_hat = loss_mse(out[:, k1:], a_con)
        loss = cfg.alpha1 * l_emb + (1 - cfg.alpha1) * l_con
        g_out = np.concatenate([cfg.alpha1 * g_emb_hat, (1 - cfg.alpha1) * g_con_hat], axis=1)
        g_dec, g_h = self.decoder.backward(g_out)
        g_enc, g_inp = self.encoder.backward(g_h)
        # the embedding is both an encoder input and the reconstruction target
        g_rows = g_inp[:, :k1] - cfg.alpha1 * g_emb_hat
        g_table = np.zeros_like(self.table)
        np.add.at(g_table, batch.a_dis, g_rows)
        return loss, g_enc, g_dec, g_table

    def _encode(self, batch: PretrainBatch) -> np.ndarray:
        emb = self._embed(batch)
        inp = np.concatenate([emb, batch.a_con.astype(self.dtype).reshape(-1, 1)], axis=1)
        return self.encoder.forward(inp)

    def l2_loss(self, batch: PretrainBatch, prior: np.ndarray | None = None, codes=None):
        """Discriminator loss: encoder codes -> 0, prior samples -> 1.

        ``codes`` optionally reuses an encoder pass as ``(h, cache)``.
        """
        cfg = self.config
        emb = self._embed(batch)
        h = codes[0] if codes is not None else self._encode(batch)
        if prior is None:
            prior = self.rng.standard_normal(h.shape).astype(self.dtype)
        n = h.shape[0]
        both = np.concatenate([self._disc_input(h, emb, batch.states),
                               self._disc_input(prior.astype(self.dtype), emb, batch.states)], axis=0)
        d = self.disc.forward(both)
        l_fake, g_fake = loss_bce(d[:n], 0.0)
        l_real, g_real = loss_bce(d[n:], 1.0)
        loss = cfg.alpha2 * l_fake + (1 - cfg.alpha2) * l_real
        grads, _ = self.disc.backward(np.concatenate([cfg.alpha2 * g_fake, (1 - cfg.alpha2) * g_real]),
                                      input_grad=False)
        return loss, grads

    def l3_loss(self, batch: PretrainBatch, codes=None):
        """Generator loss: push encoder codes to be judged as prior samples."""
        k2 = self.config.kappa2
        emb = self._embed(batch)
        if codes is None:
            h = self._encode(batch)
            codes = (h, self.encoder.cache)
        h, enc_cache = codes
        d = self.disc.forward(self._disc_input(h, emb, batch.states))
        loss, g = loss_bce(d, 1.0)
        _, g_in = self.disc.backward(g, param_grads=False)
        g_enc, _ = self.encoder.backward(g_in[:, :k2], enc_cache, input_grad=False)
        return loss, g_enc

    def aae_losses(self, batch: PretrainBatch, prior: np.ndarray | None = None) -> LossReport:
        l1 = self.l1_loss(batch)[0]
        l2 = self.l2_loss(batch, prior)[0]
        l3 = self.l3_loss(batch)[0]
        return LossReport(l1, l2, l3)

    def step_l1(self, batch: PretrainBatch) -> float:
        loss, g_enc, g_dec, g_table = self.l1_loss(batch)
        _check(loss, "L1", self.steps)
        self.enc_opt.step(self.encoder.params, g_enc)
        self.dec_opt.step(self.decoder.params, g_dec)
        if self.config.mutual_learning:
            self.table_opt.step([self.table], [g_table])
            np.clip(self.table, -1.0, 1.0, out=self.table)
        return loss

    def step_l2(self, batch: PretrainBatch, prior: np.ndarray | None = None, codes=None) -> float:
        loss, grads = self.l2_loss(batch, prior, codes)
        _check(loss, "L2", self.steps)
        self.disc_opt.step(self.disc.params, grads)
        return loss

    def step_l3(self, batch: PretrainBatch, codes=None) -> float:
        loss, g_enc = self.l3_loss(batch, codes)
        _check(loss, "L3", self.steps)
        self.gen_opt.step(self.encoder.params, g_enc)
        return loss

    def pretrain_step(self, batch: PretrainBatch) -> LossReport:
        """Reconstruction phase (L1), then regularization phase (L2, then L3)."""
        if not self.config.use_aae:
            self.steps += 1
            return LossReport(0.0, 0.0, 0.0)
        l1 = self.step_l1(batch)
        # the encoder is untouched by the L2 step, so L2 and L3 share one encoder pass
        h = self._encode(batch)
        codes = (h, self.encoder.cache)
        l2 = self.step_l2(batch, codes=codes)
        l3 = self.step_l3(batch, codes=codes)
        self.steps += 1
        return LossReport(l1, l2, l3)

    def reconstruct_con(self, batch: PretrainBatch) -> np.ndarray:
        emb = self._embed(batch)
        inp = np.concatenate([emb, batch.a_con.astype(self.dtype).reshape(-1, 1)], axis=1)
        return self.decoder.predict(self.encoder.predict(inp))[:, -1]

    # ----------------------------------------------------------- persistence

    def to_checkpoint(self) -> Checkpoint:
        nets = {}
        if self.config.use_aae:
            nets = {"encoder": self.encoder, "decoder": self.decoder, "discriminator": self.disc}
        meta = {"config": asdict(self.config), "table": self.table.tolist(), "steps": self.steps}
        return Checkpoint("codec", nets, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ActionCodec":
        if ckpt.kind != "codec":
            raise ValueError(f"expected a codec checkpoint, got {ckpt.kind!r}")
        cfg = dict(ckpt.meta["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        codec = cls(CodecConfig(**cfg), seed=0)
        codec.table = np.asarray(ckpt.meta["table"], dtype=codec.dtype)
        codec.steps = ckpt.meta["steps"]
        if codec.config.use_aae:
            codec.encoder = ckpt.nets["encoder"]
            codec.decoder = ckpt.nets["decoder"]
            codec.disc = ckpt.nets["discriminator"]
        return codec


def _check(loss: float, name: str, step: int) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"{name} became non-finite at pre-training step {step}")
