"""Detectability evaluation: P_E, steganalyzer training and baseline costs."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import convolve, uniform_filter

from .adversary import make_net
from .embedding import probs_to_costs
from .errors import ConfigError, EvaluationError, SizeError
from .generator import generator_forward
from .image import load_image, save_image
from .maps import WET_COST, CostMap
from .stc import StcParams, max_message_bits, stc_embed

log = logging.getLogger(__name__)

DESK_SPLIT = (200, 50, 250)


@dataclass
class EvalReport:
    p_fa: float
    p_md: float
    p_e: float
    payload: float | None = None
    method: str = ""
    split_sizes: tuple = ()

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def compute_pe(labels, predictions, payload=None, method="", split_sizes=()) -> EvalReport:
    """Detection error ``(P_FA + P_MD) / 2``; label 0 = cover, 1 = stego."""
    y = np.asarray(labels).astype(int).ravel()
    yhat = np.asarray(predictions).astype(int).ravel()
    if y.size == 0:
        raise EvaluationError("no samples to evaluate")
    if y.shape != yhat.shape:
        raise EvaluationError(f"{y.size} labels vs {yhat.size} predictions")
    if not set(np.unique(y)) <= {0, 1} or not set(np.unique(yhat)) <= {0, 1}:
        raise EvaluationError("labels and predictions must be binary")
    covers, stegos = y == 0, y == 1
    if not covers.any() or not stegos.any():
        raise EvaluationError("both classes must be present")
    p_fa = float(np.mean(yhat[covers] == 1))
    p_md = float(np.mean(yhat[stegos] == 0))
    return EvalReport(p_fa, p_md, (p_fa + p_md) / 2, payload, method, tuple(split_sizes))


# --- baseline costs ------------------------------------------------------

_HILL_KB = np.array([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]], dtype=np.float64)


def baseline_costs(cover, scheme: str = "uniform") -> CostMap:
    """``uniform``: every +-1 change costs 1. ``hill_like``: inverse local
    high-pass activity, smoothed (flat areas become near-wet)."""
    x = np.asarray(cover, dtype=np.float64)
    if scheme == "uniform":
        return CostMap.symmetric(np.ones_like(x))
    if scheme == "hill_like":
        resid = np.abs(convolve(x, _HILL_KB, mode="reflect"))
        act = uniform_filter(resid, 3, mode="reflect")
        with np.errstate(divide="ignore"):
            inv = np.where(act > 1e-10, 1.0 / np.maximum(act, 1e-10), WET_COST)
        # direct windowed sum: a running sum loses the small costs next to wet ones
        rho = np.minimum(convolve(inv, np.full((15, 15), 1 / 225), mode="reflect"), WET_COST)
        return CostMap.symmetric(rho)
    raise ConfigError(f"unknown baseline scheme {scheme!r}")


def generator_costs(model):
    """Cost function ``cover -> CostMap`` backed by a trained generator."""
    def costs(cover):
        return probs_to_costs(generator_forward(model, cover))
    return costs


def embed_stegos(covers, cost_fn, payload: float, seed: int = 0, h: int = 7) -> np.ndarray:
    """STC-embed a full-capacity random message into each cover."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(covers)
    for k, cover in enumerate(covers):
        params = StcParams(h=h, payload_q=payload, seed=int(rng.integers(2**31)))
        msg = rng.integers(0, 2, max_message_bits(cover.size, params), dtype=np.uint8)
        out[k] = stc_embed(cover, cost_fn(cover), msg, params)
    return out


# --- pairs manifest ------------------------------------------------------

PAIRS_MAGIC = "#gifdl-pairs v1"


@dataclass
class PairsManifest:
    pairs: list  # (cover path, stego path), relative to root
    method: str = ""
    payload: float | None = None
    root: Path = Path(".")

    def load(self):
        covers = np.stack([load_image(self.root / c) for c, _ in self.pairs])
        stegos = np.stack([load_image(self.root / s) for _, s in self.pairs])
        return covers, stegos


def write_pairs(manifest: PairsManifest, path) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(f"{PAIRS_MAGIC}\n#method\t{manifest.method}\n#payload\t{manifest.payload}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("cover", "stego"))
        w.writerows(manifest.pairs)
    os.replace(tmp, path)


def read_pairs(path) -> PairsManifest:
    path = Path(path)
    meta, rows = {}, []
    with open(path, newline="") as fh:
        if fh.readline().rstrip("\n") != PAIRS_MAGIC:
            raise ConfigError(f"{path}: not a pairs manifest")
        for row in csv.reader(fh, delimiter="\t"):
            if row and row[0].startswith("#"):
                meta[row[0][1:]] = row[1] if len(row) > 1 else ""
            else:
                rows.append(tuple(row))
    payload = meta.get("payload")
    return PairsManifest(
        pairs=rows[1:],
        method=meta.get("method", ""),
        payload=None if payload in (None, "", "None") else float(payload),
        root=path.parent,
    )


def save_pairs(covers, stegos, out_dir, method="", payload=None) -> PairsManifest:
    out_dir = Path(out_dir)
    (out_dir / "cover").mkdir(parents=True, exist_ok=True)
    (out_dir / "stego").mkdir(parents=True, exist_ok=True)
    pairs = []
    for k, (c, s) in enumerate(zip(covers, stegos)):
        save_image(c, out_dir / "cover" / f"{k:06d}.pgm")
        save_image(s, out_dir / "stego" / f"{k:06d}.pgm")
        pairs.append((f"cover/{k:06d}.pgm", f"stego/{k:06d}.pgm"))
    m = PairsManifest(pairs, method, payload, out_dir)
    write_pairs(m, out_dir / "pairs.tsv")
    return m


# --- steganalyzer ---------------------------------------------------------

def _augment(c, s, rng):
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    c, s = np.rot90(c, k, axes=(-2, -1)), np.rot90(s, k, axes=(-2, -1))
    if flip:
        c, s = c[..., ::-1], s[..., ::-1]
    return np.ascontiguousarray(c), np.ascontiguousarray(s)


@torch.no_grad()
def predict(net, images, batch=64) -> np.ndarray:
    """Hard labels (1 = stego) in inference mode."""
    net.eval()
    out = []
    for i in range(0, len(images), batch):
        x = torch.as_tensor(np.asarray(images[i:i + batch], dtype=np.float32))[:, None]
        out.append(net(x).argmax(dim=1).numpy())
    return np.concatenate(out)


def _pe_on(net, covers, stegos):
    pred = predict(net, np.concatenate([covers, stegos]))
    labels = np.r_[np.zeros(len(covers), int), np.ones(len(stegos), int)]
    return compute_pe(labels, pred)


def train_steganalyzer(
    pairs,
    arch: str = "weak",
    split=DESK_SPLIT,
    seed: int = 0,
    epochs: int = 30,
    lr: float = 1e-3,
    batch_pairs: int = 16,
    augment: bool = True,
    method: str = "",
    payload=None,
):
    """Train a steganalyzer on cover/stego pairs and report test P_E.

    ``pairs`` is a PairsManifest or a ``(covers, stegos)`` array pair. Pairs
    are split, never broken across subsets; the epoch with the lowest
    validation P_E is the one tested.
    """
    if isinstance(pairs, PairsManifest):
        method = method or pairs.method
        payload = payload if payload is not None else pairs.payload
        covers, stegos = pairs.load()
    else:
        covers, stegos = (np.asarray(a) for a in pairs)
    if covers.shape != stegos.shape:
        raise EvaluationError(f"covers {covers.shape} vs stegos {stegos.shape}")
    n_train, n_val, n_test = (int(v) for v in split)
    if min(n_train, n_val, n_test) < 1:
        raise SizeError(f"every split must be non-empty, got {split}")
    if n_train + n_val + n_test > len(covers):
        raise SizeError(f"split {split} needs {sum(split)} pairs, have {len(covers)}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(covers))
    tr, va, te = np.split(order[:n_train + n_val + n_test], [n_train, n_train + n_val])
    torch.manual_seed(seed)
    net = make_net(arch)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    best, best_state = None, None
    for epoch in range(epochs):
        net.train()
        perm = rng.permutation(tr)
        for i in range(0, len(perm), batch_pairs):
            idx = perm[i:i + batch_pairs]
            c, s = covers[idx].astype(np.float32), stegos[idx].astype(np.float32)
            if augment:
                c, s = _augment(c, s, rng)
            x = torch.from_numpy(np.concatenate([c, s]))[:, None]
            y = torch.cat([torch.zeros(len(idx)), torch.ones(len(idx))]).long()
            loss = F.cross_entropy(net(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        val = _pe_on(net, covers[va], stegos[va]).p_e
        if best is None or val < best:
            best = val
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
        log.debug("epoch %d: val P_E %.4f", epoch, val)
    net.load_state_dict(best_state)
    rep = _pe_on(net, covers[te], stegos[te])
    rep.payload, rep.method, rep.split_sizes = payload, method, (n_train, n_val, n_test)
    return net, rep


def write_reports(reports, path) -> None:
    """Write one JSON record per line, replacing ``path`` atomically."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text("".join(r.to_json() + "\n" for r in reports))
    os.replace(tmp, path)


def read_reports(path) -> list:
    with open(path) as fh:
        return [EvalReport(**{**json.loads(line), "split_sizes": tuple(json.loads(line)["split_sizes"])})
                for line in fh if line.strip()]


def render_table(reports) -> str:
    """Method x payload grid of P_E (%), with a per-method average column."""
    methods = list(dict.fromkeys(r.method for r in reports))
    payloads = sorted({r.payload for r in reports if r.payload is not None})
    cell = {}
    for r in reports:
        cell.setdefault((r.method, r.payload), []).append(r.p_e)
    head = ["Method"] + [f"{q:g} bpp" for q in payloads] + ["Average"]
    rows = []
    for m in methods:
        vals = [np.mean(cell[(m, q)]) * 100 if (m, q) in cell else None for q in payloads]
        present = [v for v in vals if v is not None]
        avg = np.mean(present) if present else None
        rows.append([m] + ["-" if v is None else f"{v:.2f}" for v in vals] + ["-" if avg is None else f"{avg:.2f}"])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt.format(*head), sep] + [fmt.format(*r) for r in rows])
