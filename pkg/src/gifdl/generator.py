"""U-Net mapping a cover to per-pixel change probabilities.

Fifteen blocks plus a transposed convolution: blocks 1-8 halve the
resolution, blocks 9-15 double it, and block ``i <= 7``'s output is
concatenated with block ``16 - i``'s output to form the input of block
``17 - i`` (block 16 being the final transposed convolution).

Every convolution pads circularly. Inputs whose sides are not multiples of
256 are mirror-extended to the next multiple and the output cropped back.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError
from .maps import ProbabilityMap

N_DOWN = 8
N_UP = 7
MULTIPLE = 2 ** N_DOWN


@dataclass(frozen=True)
class GeneratorConfig:
    down_blocks: int = N_DOWN
    up_blocks: int = N_UP
    base_channels: int = 16
    max_channels: int = 128
    leaky_slope: float = 0.2
    prob_floor: float = 1e-6

    def __post_init__(self):
        if (self.down_blocks, self.up_blocks) != (N_DOWN, N_UP):
            raise ConfigError("the generator has exactly 8 down and 7 up blocks")
        if not 0 < self.prob_floor <= 0.01:
            raise ConfigError(f"prob_floor {self.prob_floor} outside (0, 0.01]")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise ConfigError("channel widths must satisfy 1 <= base <= max")

    def widths(self) -> list[int]:
        """Output channels of blocks 1..8."""
        return [min(self.base_channels * 2 ** k, self.max_channels) for k in range(N_DOWN)]


def skip_topology(i: int):
    """For a down block ``i`` in 1..7: ``((i, 16 - i), 17 - i)``.

    The outputs of blocks ``i`` and ``16 - i`` are concatenated and fed to
    block ``17 - i``.
    """
    if not 1 <= i <= N_UP:
        raise IndexError(f"skip source block {i} outside 1..{N_UP}")
    return (i, 16 - i), 17 - i


class _Block(nn.Module):
    def __init__(self, cin, cout, down, slope):
        super().__init__()
        self.down = down
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2 if down else 1, padding=1, padding_mode="circular")
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, padding_mode="circular")
        self.bn2 = nn.BatchNorm2d(cout)
        self.slope = slope

    def forward(self, x):
        if not self.down:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.bn1(self.conv1(x)), self.slope)
        return F.leaky_relu(self.bn2(self.conv2(x)), self.slope)


class _CircularDeconv(nn.Module):
    """Stride-2 transposed convolution (k=4) with periodic boundary handling."""

    def __init__(self, cin, cout):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=0)

    def forward(self, x):
        h, w = x.shape[-2:]
        y = self.deconv(F.pad(x, (1, 1, 1, 1), mode="circular"))
        return y[..., 3:3 + 2 * h, 3:3 + 2 * w]


def _mirror_index(n, total):
    lead = (total - n) // 2
    idx = np.arange(total) - lead
    idx = np.mod(idx, 2 * n)
    return torch.as_tensor(np.where(idx >= n, 2 * n - 1 - idx, idx)), lead


class UNetGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        ch = config.widths()
        s = config.leaky_slope
        self.down = nn.ModuleList(
            _Block(1 if k == 0 else ch[k - 1], ch[k], True, s) for k in range(N_DOWN)
        )
        up, prev = [], ch[-1]
        for j in range(N_DOWN + 1, N_DOWN + N_UP + 1):  # blocks 9..15
            skip = ch[17 - j - 1] if j > N_DOWN + 1 else 0
            out = ch[16 - j - 1]
            up.append(_Block(prev + skip, out, False, s))
            prev = out
        self.up = nn.ModuleList(up)
        self.final = _CircularDeconv(prev + ch[0], 1)

    def forward(self, x: torch.Tensor, check_finite: bool = True) -> torch.Tensor:
        """``x``: covers scaled to [0, 1], shape (B, 1, H, W). Returns total change probability p."""
        h, w = x.shape[-2:]
        ph, pw = -(-h // MULTIPLE) * MULTIPLE, -(-w // MULTIPLE) * MULTIPLE
        if (ph, pw) != (h, w):
            ih, top = _mirror_index(h, ph)
            iw, left = _mirror_index(w, pw)
            x = x.index_select(-2, ih.to(x.device)).index_select(-1, iw.to(x.device))
        outs = []
        for k, block in enumerate(self.down, start=1):
            x = block(x)
            self._check(x, k, check_finite)
            outs.append(x)
        for k, block in enumerate(self.up, start=N_DOWN + 1):
            if k > N_DOWN + 1:
                x = torch.cat([x, outs[17 - k - 1]], dim=1)
            x = block(x)
            self._check(x, k, check_finite)
        x = self.final(torch.cat([x, outs[0]], dim=1))
        self._check(x, 16, check_finite)
        p = torch.sigmoid(x)
        floor = self.config.prob_floor
        p = torch.clamp(p, floor, 1 - floor)
        if (ph, pw) != (h, w):
            p = p[..., top:top + h, left:left + w]
        return p

    @staticmethod
    def _check(x, k, enabled):
        if enabled and not torch.isfinite(x).all():
            raise NumericError(f"non-finite activation in generator block {k}")


def cover_tensor(cover, dtype=torch.float32) -> torch.Tensor:
    """uint8 (H, W) or (B, H, W) covers -> (B, 1, H, W) tensor scaled to [0, 1]."""
    t = torch.as_tensor(np.asarray(cover), dtype=dtype) / 255.0
    if t.ndim == 2:
        t = t[None]
    return t[:, None]


@torch.no_grad()
def generator_forward(model: UNetGenerator, cover) -> ProbabilityMap:
    """Inference-mode probability map for a single uint8 cover."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        p = model(cover_tensor(cover, dtype))[0, 0].double().numpy()
    finally:
        model.train(was_training)
    return ProbabilityMap.symmetric(p)


def save_checkpoint(path, modules: dict, configs: dict, extra: dict | None = None) -> None:
    """Write one self-describing archive (configs embedded) via temp + rename."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    payload = {
        "format": "gifdl-checkpoint-1",
        "configs": {k: asdict(v) if hasattr(v, "__dataclass_fields__") else v for k, v in configs.items()},
        "state": {k: m.state_dict() for k, m in modules.items()},
        "extra": extra or {},
    }
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "gifdl-checkpoint-1":
        raise ConfigError(f"{path} is not a gifdl checkpoint")
    return payload


def load_generator(path) -> UNetGenerator:
    ck = load_checkpoint(path)
    model = UNetGenerator(GeneratorConfig(**ck["configs"]["generator"]))
    model.load_state_dict(ck["state"]["generator"])
    return model
