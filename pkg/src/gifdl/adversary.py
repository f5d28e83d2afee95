"""Steganalyzer discriminators and the two update strategies.

"assignment": D1 (strong) separates covers from stegos, D2 (weak) separates
fluctuation images from stegos, and only the discriminator with the larger
cross-entropy is updated each iteration (ties update D2).

"shared": both discriminators do both tasks with combined loss
``E_i(F, S) + lambda' * E_i(C, S)``; the larger one is updated and the
smaller one is the generator's adversarial loss.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError

EPS = 1e-7
TLU_THRESHOLD = 3.0

KV = np.array(
    [[-1, 2, -2, 2, -1],
     [2, -6, 8, -6, 2],
     [-2, 8, -12, 8, -2],
     [2, -6, 8, -6, 2],
     [-1, 2, -2, 2, -1]],
    dtype=np.float64,
) / 12.0


def _embed5(k):
    out = np.zeros((5, 5))
    h, w = k.shape
    out[(5 - h) // 2:(5 - h) // 2 + h, (5 - w) // 2:(5 - w) // 2 + w] = k
    return out


def _directional(coeffs, center):
    """Place a 1-D residual stencil along the 8 compass directions around the centre."""
    kernels = []
    for dy, dx in ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)):
        k = np.zeros((5, 5))
        for t, c in enumerate(coeffs):
            off = t - center
            k[2 + off * dy, 2 + off * dx] += c
        kernels.append(k)
    return kernels


def srm_kernels() -> np.ndarray:
    """The 30 basic SRM high-pass residual filters as a (30, 5, 5) array."""
    first = _directional([-1, 1], 0)
    second = [k / 2 for k in _directional([1, -2, 1], 1)[:4]]
    third = [k / 3 for k in _directional([1, -3, 3, -1], 1)]
    sq3 = _embed5(np.array([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]]) / 4.0)
    edge3_base = np.array([[-1, 2, -1], [2, -4, 2], [0, 0, 0]]) / 4.0
    edge3 = [_embed5(np.rot90(edge3_base, r)) for r in range(4)]
    edge5_base = KV * 12.0
    edge5_base[3:] = 0
    edge5 = [np.rot90(edge5_base / 12.0, r) for r in range(4)]
    bank = first + second + third + [sq3, KV] + edge3 + edge5
    return np.stack(bank)


class _FixedHPF(nn.Module):
    def __init__(self, kernels):
        super().__init__()
        w = torch.as_tensor(np.asarray(kernels, dtype=np.float32))[:, None]
        self.register_buffer("weight", w)

    def forward(self, x):
        return F.conv2d(x, self.weight.to(x.dtype), padding=2)


class XuNetLike(nn.Module):
    """Weak steganalyzer: KV filter, ABS + tanh first group, 1x1 groups, global pooling."""

    arch = "weak"

    def __init__(self, width=8):
        super().__init__()
        self.hpf = _FixedHPF(KV[None])
        w = width
        self.c1, self.b1 = nn.Conv2d(1, w, 5, padding=2, bias=False), nn.BatchNorm2d(w)
        self.c2, self.b2 = nn.Conv2d(w, 2 * w, 5, padding=2, bias=False), nn.BatchNorm2d(2 * w)
        self.c3, self.b3 = nn.Conv2d(2 * w, 4 * w, 1, bias=False), nn.BatchNorm2d(4 * w)
        self.c4, self.b4 = nn.Conv2d(4 * w, 8 * w, 1, bias=False), nn.BatchNorm2d(8 * w)
        self.c5, self.b5 = nn.Conv2d(8 * w, 16 * w, 1, bias=False), nn.BatchNorm2d(16 * w)
        self.fc = nn.Linear(16 * w, 2)

    def forward(self, x):
        x = self.hpf(x)
        x = F.avg_pool2d(torch.tanh(self.b1(torch.abs(self.c1(x)))), 5, 2, 2)
        x = F.avg_pool2d(torch.tanh(self.b2(self.c2(x))), 5, 2, 2)
        x = F.avg_pool2d(F.relu(self.b3(self.c3(x))), 5, 2, 2)
        x = F.avg_pool2d(F.relu(self.b4(self.c4(x))), 5, 2, 2)
        x = F.relu(self.b5(self.c5(x))).mean(dim=(-2, -1))
        return self.fc(x)


class YedNetLike(nn.Module):
    """Strong steganalyzer: 30 fixed SRM filters, truncation, then conv groups."""

    arch = "strong"

    def __init__(self, width=16):
        super().__init__()
        self.hpf = _FixedHPF(srm_kernels())
        w = width
        layers, cin = [], 30
        for cout, k, pool in ((30, 3, False), (30, 3, False), (w, 3, True), (w, 5, True), (2 * w, 5, True), (2 * w, 3, False)):
            layers += [nn.Conv2d(cin, cout, k, padding=k // 2, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
            if pool:
                layers.append(nn.AvgPool2d(3, 2, 1))
            cin = cout
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, 2)

    def forward(self, x):
        x = torch.clamp(self.hpf(x), -TLU_THRESHOLD, TLU_THRESHOLD)
        return self.fc(self.body(x).mean(dim=(-2, -1)))


ARCHS = {"weak": XuNetLike, "strong": YedNetLike}


def make_net(arch: str, **kw) -> nn.Module:
    try:
        return ARCHS[arch](**kw)
    except KeyError:
        raise ConfigError(f"unknown steganalyzer architecture {arch!r}") from None


@dataclass
class Discriminator:
    id: str
    net: nn.Module
    task: tuple
    input_size: tuple | None = None
    optimizer: torch.optim.Optimizer | None = None

    @property
    def arch(self) -> str:
        return self.net.arch

    def parameters(self):
        return [p for p in self.net.parameters() if p.requires_grad]


def make_discriminators(lr=1e-4, input_size=None, d1_arch="strong", d2_arch="weak"):
    d1 = Discriminator("D1", make_net(d1_arch), ("cover", "stego"), input_size)
    d2 = Discriminator("D2", make_net(d2_arch), ("fluctuation", "stego"), input_size)
    for d in (d1, d2):
        d.optimizer = torch.optim.Adam(d.parameters(), lr=lr)
    return d1, d2


def _as_batch(img, dtype=torch.float32):
    if isinstance(img, torch.Tensor):
        t = img
    else:
        t = torch.as_tensor(np.asarray(img), dtype=dtype)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    return t.to(dtype) if not t.is_floating_point() else t


def discriminator_forward(d: Discriminator, img) -> torch.Tensor:
    """Softmax class probabilities (B, 2) for pixel-valued images; column 1 = stego."""
    x = _as_batch(img)
    if d.input_size is not None and tuple(x.shape[-2:]) != tuple(d.input_size):
        raise ShapeError(f"{d.id} expects {tuple(d.input_size)} inputs, got {tuple(x.shape[-2:])}")
    return F.softmax(d.net(x), dim=1)


def cross_entropy(d: Discriminator, genuine, stego) -> torch.Tensor:
    """``-log D(genuine)[0] - log D(stego)[1]``, averaged over the batch.

    Genuine and stego images go through the network as one batch so batch
    normalisation sees both classes.
    """
    g, s = _as_batch(genuine), _as_batch(stego)
    if g.shape != s.shape:
        raise ShapeError(f"genuine {tuple(g.shape)} vs stego {tuple(s.shape)}")
    probs = discriminator_forward(d, torch.cat([g, s]))
    if not torch.isfinite(probs).all():
        raise NumericError(f"non-finite output from {d.id}")
    b = g.shape[0]
    probs = probs.clamp(EPS, 1 - EPS)
    return -(torch.log(probs[:b, 0]) + torch.log(probs[b:, 1])).mean()


@dataclass
class LossPair:
    e1: torch.Tensor
    e2: torch.Tensor


def cross_entropy_pair(d1, d2, cover, stego, flu) -> LossPair:
    return LossPair(cross_entropy(d1, cover, stego), cross_entropy(d2, flu, stego))


@dataclass
class UpdateLog:
    records: list = field(default_factory=list)

    def append(self, iteration, e1, e2, updated):
        if hasattr(e1, "item"):
            e1, e2 = e1.item(), e2.item()
        self.records.append((int(iteration), float(e1), float(e2), updated))

    def __len__(self):
        return len(self.records)

    def lines(self):
        yield "iteration\te1\te2\tupdated"
        for it, e1, e2, who in self.records:
            yield f"{it}\t{e1!r}\t{e2!r}\t{who}"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")

    @classmethod
    def read(cls, path):
        log = cls()
        with open(path) as fh:
            next(fh)
            for line in fh:
                it, e1, e2, who = line.rstrip("\n").split("\t")
                log.append(int(it), float(e1), float(e2), who)
        return log


def choose(loss1: float, loss2: float) -> str:
    """The discriminator to update: the larger loss, ties going to D2."""
    return "D2" if loss1 <= loss2 else "D1"


def step_discriminator(d: Discriminator, loss: torch.Tensor, lr=None) -> None:
    """One optimizer step on ``d`` only; the graph is kept for later use."""
    params = d.parameters()
    grads = torch.autograd.grad(loss, params, retain_graph=True)
    if lr is not None:
        for group in d.optimizer.param_groups:
            group["lr"] = lr
    for p, g in zip(params, grads):
        p.grad = g
    d.optimizer.step()
    d.optimizer.zero_grad(set_to_none=True)


def assignment_update(lp: LossPair, d1, d2, lr=None, log: UpdateLog | None = None, iteration=0) -> str:
    """Update only the weaker discriminator; returns its id."""
    which = choose(lp.e1.item(), lp.e2.item())
    if which == "D1":
        step_discriminator(d1, lp.e1, lr)
    else:
        step_discriminator(d2, lp.e2, lr)
    if log is not None:
        log.append(iteration, lp.e1, lp.e2, which)
    return which


@dataclass
class SharedLosses:
    l_d: torch.Tensor
    l_a: torch.Tensor
    combined: tuple  # per-discriminator E_i(F,S) + lambda' E_i(C,S)
    which: str


def shared_task_losses(d1, d2, cover, stego, flu, lambda_prime=1.0) -> SharedLosses:
    """Both discriminators judge (F, S) and (C, S); max loss trains, min loss is adversarial."""
    if not lambda_prime > 0:
        raise ConfigError("lambda' must be positive")
    c, s, f = _as_batch(cover), _as_batch(stego), _as_batch(flu)
    b = c.shape[0]
    combined = []
    for d in (d1, d2):
        probs = discriminator_forward(d, torch.cat([c, f, s])).clamp(EPS, 1 - EPS)
        log_s = torch.log(probs[2 * b:, 1])
        e_cs = -(torch.log(probs[:b, 0]) + log_s).mean()
        e_fs = -(torch.log(probs[b:2 * b, 0]) + log_s).mean()
        combined.append(e_fs + lambda_prime * e_cs)
    which = choose(combined[0].item(), combined[1].item())
    hi, lo = (combined[0], combined[1]) if which == "D1" else (combined[1], combined[0])
    return SharedLosses(l_d=hi, l_a=lo, combined=tuple(combined), which=which)


def param_digest(module_or_params) -> str:
    params = module_or_params.parameters() if hasattr(module_or_params, "parameters") else module_or_params
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
