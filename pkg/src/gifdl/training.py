"""GAN training loop for the cost-learning generator."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import uniform_filter
from scipy.stats import spearmanr

from .adversary import (
    UpdateLog,
    choose,
    cross_entropy_pair,
    make_discriminators,
    param_digest,
    shared_task_losses,
    step_discriminator,
)
from .embedding import double_tanh_modify, ternary_entropy
from .errors import ConfigError, NumericError
from .generator import GeneratorConfig, UNetGenerator, load_checkpoint, save_checkpoint
from .maps import ProbabilityMap

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass
class TrainConfig:
    iterations: int = 200
    lr: float = 1e-4
    decay_every: int = 5000
    decay_factor: float = 0.9
    alpha: float = 1.0
    beta: float = 1e-7
    lam: float = 1.0
    gamma: float = 60.0
    payload: float = 0.4
    batch_size: int = 4
    seed: int = 0
    strategy: str = "assignment"
    lambda_prime: float = 1.0
    base_channels: int = 16
    max_channels: int = 128
    d1_arch: str = "strong"
    d2_arch: str = "weak"
    checkpoint_every: int = 0
    deterministic: bool = True
    audit: bool = False

    def __post_init__(self):
        for name in ("alpha", "lam", "gamma", "payload", "lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if not self.payload < 1:
            raise ConfigError("payload must be below 1 bpp")
        if self.strategy not in ("assignment", "shared"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.batch_size < 2:
            # batch norm at the 1x1 bottleneck needs two samples per batch
            raise ConfigError("batch_size must be at least 2")

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(base_channels=self.base_channels, max_channels=self.max_channels)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def capacity(p) -> torch.Tensor | float:
    """Ternary entropy in bits of symmetric change probabilities.

    ``p`` is a ProbabilityMap (returns float) or a tensor of total change
    probabilities with shape (..., H, W) (returns one value per leading index).
    """
    if isinstance(p, ProbabilityMap):
        return ternary_entropy(p)
    p0 = 1 - p
    h = -(torch.xlogy(p0, p0) + torch.xlogy(p, p / 2)) / LN2
    return h.sum(dim=(-2, -1))


def entropy_loss(p, q: float, h: int | None = None, w: int | None = None):
    """Squared deviation of capacity from the target ``H * W * q`` bits."""
    if h is None or w is None:
        h, w = p.shape[-2:]
    dev = capacity(p) - h * w * q
    return dev ** 2


def adversarial_loss(e1, e2, lam: float = 1.0):
    return e1 + lam * e2


def generator_loss(e1, e2, l_e, cfg: TrainConfig):
    return -cfg.alpha * adversarial_loss(e1, e2, cfg.lam) + cfg.beta * l_e


def decayed_lr(cfg: TrainConfig, iteration: int) -> float:
    """Step decay: ``lr * decay_factor ** (iteration // decay_every)``."""
    return cfg.lr * cfg.decay_factor ** (iteration // cfg.decay_every)


def _set_lr(optimizers, lr):
    for opt in optimizers:
        for group in opt.param_groups:
            group["lr"] = lr


def local_variance(img, size=3) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    m = uniform_filter(x, size, mode="reflect")
    return np.maximum(uniform_filter(x * x, size, mode="reflect") - m * m, 0.0)


def texture_correlation(p, cover) -> float:
    """Spearman rank correlation between 3x3 local variance and p."""
    v, p = local_variance(cover).ravel(), np.asarray(p).ravel()
    if np.ptp(v) == 0 or np.ptp(p) == 0:
        return 0.0
    return float(spearmanr(v, p)[0])


@dataclass
class TrainState:
    generator: UNetGenerator
    d1: object
    d2: object
    config: TrainConfig
    iteration: int = 0
    history: dict = field(default_factory=lambda: {k: [] for k in HISTORY_KEYS})
    update_log: UpdateLog = field(default_factory=UpdateLog)
    audit: list = field(default_factory=list)
    g_optimizer: torch.optim.Optimizer | None = None

    def __post_init__(self):
        if self.g_optimizer is None:
            self.g_optimizer = torch.optim.Adam(self.generator.parameters(), lr=self.config.lr)


HISTORY_KEYS = ("l_G", "l_a", "l_e", "e1", "e2", "capacity")


def _stack_sets(sets):
    if not sets:
        raise ConfigError("training needs at least one fluctuation set")
    for k, s in enumerate(sets):
        if s.n == 0:
            raise ConfigError(f"fluctuation set {k} ({s.prompt!r}, seed {s.seed}) is empty")
    covers = np.stack([s.cover for s in sets]).astype(np.float32)
    flus = [np.stack(s.fluctuations).astype(np.float32) for s in sets]
    return covers, flus


def init_state(cfg: TrainConfig, image_size) -> TrainState:
    torch.manual_seed(cfg.seed)
    g = UNetGenerator(cfg.generator_config())
    d1, d2 = make_discriminators(cfg.lr, image_size, cfg.d1_arch, cfg.d2_arch)
    return TrainState(g, d1, d2, cfg)


def _checkpoint(state, path, extra=None):
    save_checkpoint(
        path,
        {"generator": state.generator, "d1": state.d1.net, "d2": state.d2.net,
         "g_opt": state.g_optimizer, "d1_opt": state.d1.optimizer, "d2_opt": state.d2.optimizer},
        {"generator": state.config.generator_config(), "train": asdict(state.config),
         "d1": {"arch": state.d1.arch}, "d2": {"arch": state.d2.arch}},
        {"iteration": state.iteration, **(extra or {})},
    )


def train(sets, cfg: TrainConfig, out_dir=None, state: TrainState | None = None) -> TrainState:
    """Run ``cfg.iterations`` training iterations over in-memory fluctuation sets.

    Each iteration: probabilities from the generator, double-tanh simulated
    stego, a random fluctuation per cover, both cross-entropies, one
    discriminator update, one generator update, learning-rate decay.
    """
    covers, flus = _stack_sets(sets)
    n_sets, h, w = covers.shape
    if state is None:
        state = init_state(cfg, (h, w))
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    g, d1, d2 = state.generator, state.d1, state.d2
    g_opt = state.g_optimizer
    optimizers = [g_opt, d1.optimizer, d2.optimizer]
    _set_lr(optimizers, decayed_lr(cfg, state.iteration))
    out_dir = Path(out_dir) if out_dir else None
    metrics = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        # a resumed run continues its metrics file; a fresh run starts a new one
        metrics = open(out_dir / "metrics.jsonl", "a" if state.iteration else "w")
    target = h * w * cfg.payload
    b = min(cfg.batch_size, n_sets)
    if b < 2:
        raise ConfigError("training needs at least two fluctuation sets")
    g.train()
    d1.net.train()
    d2.net.train()
    try:
        for _ in range(cfg.iterations):
            # one stream per iteration so a resumed run draws what the original would have
            rng = np.random.default_rng([cfg.seed, state.iteration])
            idx = rng.choice(n_sets, size=b, replace=False)
            flu_idx = [int(rng.integers(len(flus[i]))) for i in idx]
            c = torch.from_numpy(covers[idx])[:, None]
            f = torch.from_numpy(np.stack([flus[i][k] for i, k in zip(idx, flu_idx)]))[:, None]
            r = torch.from_numpy(rng.random(c.shape).astype(np.float32))

            p = g(c / 255.0)
            m = double_tanh_modify(p / 2, p / 2, r, cfg.gamma)
            s = torch.clamp(c + m, 0.0, 255.0)

            if cfg.audit:
                before = [param_digest(x) for x in (g, d1, d2)]

            if cfg.strategy == "assignment":
                lp = cross_entropy_pair(d1, d2, c, s, f)
                e1, e2 = lp.e1, lp.e2
                which = choose(e1.item(), e2.item())
                d_loss = e1 if which == "D1" else e2
                l_a = adversarial_loss(e1, e2, cfg.lam)
            else:
                sh = shared_task_losses(d1, d2, c, s, f, cfg.lambda_prime)
                e1, e2 = sh.combined
                which, d_loss, l_a = sh.which, sh.l_d, sh.l_a
            cap = capacity(p[:, 0])
            l_e = ((cap - target) ** 2).mean()
            l_g = -cfg.alpha * l_a + cfg.beta * l_e

            values = [v.item() for v in (l_g, l_a, l_e, e1, e2)]
            if not all(math.isfinite(v) for v in values):
                snap = dict(zip(HISTORY_KEYS, values), iteration=state.iteration)
                if out_dir:
                    _checkpoint(state, out_dir / "diagnostic.pt", {"losses": snap})
                raise NumericError(f"non-finite loss at iteration {state.iteration}: {snap}")

            g_grads = torch.autograd.grad(l_g, list(g.parameters()), retain_graph=True)
            step_discriminator(d1 if which == "D1" else d2, d_loss)
            for prm, gr in zip(g.parameters(), g_grads):
                prm.grad = gr
            g_opt.step()
            g_opt.zero_grad(set_to_none=True)
            _set_lr(optimizers, decayed_lr(cfg, state.iteration + 1))

            if cfg.audit:
                after = [param_digest(x) for x in (g, d1, d2)]
                state.audit.append(tuple(a != bb for a, bb in zip(after, before)))

            state.update_log.append(state.iteration, values[3], values[4], which)
            rec = dict(zip(HISTORY_KEYS, values + [cap.mean().item()]))
            for k, v in rec.items():
                state.history[k].append(v)
            state.iteration += 1
            if metrics:
                metrics.write(json.dumps({"iteration": state.iteration, **rec, "updated": which,
                                          "f_index": flu_idx}) + "\n")
            if out_dir and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                _checkpoint(state, out_dir / f"checkpoint_{state.iteration:07d}.pt")
    finally:
        if metrics:
            metrics.close()
    if out_dir:
        _checkpoint(state, out_dir / "final.pt")
        state.update_log.write(out_dir / "updates.tsv")
    return state


def resume_state(cfg: TrainConfig, image_size, path) -> TrainState:
    """Rebuild a TrainState from a training checkpoint."""
    ck = load_checkpoint(path)
    state = init_state(cfg, image_size)
    state.generator.load_state_dict(ck["state"]["generator"])
    state.d1.net.load_state_dict(ck["state"]["d1"])
    state.d2.net.load_state_dict(ck["state"]["d2"])
    for key, opt in (("g_opt", state.g_optimizer), ("d1_opt", state.d1.optimizer), ("d2_opt", state.d2.optimizer)):
        if key in ck["state"]:
            opt.load_state_dict(ck["state"][key])
    state.iteration = int(ck["extra"].get("iteration", 0))
    return state


def load_config(path) -> TrainConfig:
    """Read a JSON training config; keys are the TrainConfig field names."""
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))
