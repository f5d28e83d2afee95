"""Cover/fluctuation datasets built from a text-to-image backend.

A fluctuation set is one cover generated at a base CFG scale plus N images
generated from the same prompt and seed at nearby CFG scales, each kept only
if its MSE to the cover is at most ``tau``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    BackendError,
    ConfigError,
    GenerationExhaustedError,
    PgmParseError,
    ShapeError,
    SizeError,
)
from .image import as_image, decode_pnm, load_image, resize, save_image

log = logging.getLogger(__name__)

BASE_CFG = 7.5
CFG_STEP = 0.001
DEFAULT_SWEEP = (7.495, 7.496, 7.497, 7.498, 7.499, 7.501, 7.502, 7.503, 7.504, 7.505)
DEFAULT_TAU = 25.0


def mse(a, b) -> float:
    """Mean squared pixel difference of two equally sized images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse of differently shaped images {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _cfg_key(cfg: float) -> float:
    return round(float(cfg), 6)


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    seed: int
    cfg_scale: float

    def __post_init__(self):
        if not self.cfg_scale > 0:
            raise ConfigError(f"cfg_scale must be positive, got {self.cfg_scale}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


class T2IBackend(Protocol):
    def generate(self, request: GenerationRequest) -> np.ndarray: ...


def _digest_seed(*parts) -> int:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


class ProceduralBackend:
    """Offline stand-in for a diffusion model.

    ``(prompt, seed)`` fixes a piecewise-smooth scene with textured patches;
    the CFG scale only drives a small high-frequency perturbation confined to
    the textured patches, mimicking real CFG fluctuation. CFG values listed in
    ``content_jumps`` additionally get a large content change.
    """

    def __init__(self, size=(64, 64), amplitude=2.5, content_jumps=()):
        self.size = tuple(size)
        self.amplitude = amplitude
        self.content_jumps = {_cfg_key(c) for c in content_jumps}

    def scene(self, prompt: str, seed: int):
        h, w = self.size
        rng = np.random.default_rng(_digest_seed("scene", prompt, seed))
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        bg = 70 + 110 * (rng.random() * xx + rng.random() * yy) / 2
        bg += 20 * np.sin(2 * np.pi * (rng.random() * 1.5 * xx + rng.random() * yy + rng.random()))
        field_ = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 10, mode="wrap")
        field_ /= field_.std() + 1e-12
        mask = 1 / (1 + np.exp(-4 * (field_ - rng.uniform(-0.3, 0.3))))
        tex = gaussian_filter(rng.standard_normal((h, w)), sigma=0.7)
        tex *= 28 / (tex.std() + 1e-12)
        return bg + mask * tex, mask

    def generate(self, request: GenerationRequest) -> np.ndarray:
        base, mask = self.scene(request.prompt, request.seed)
        key = _cfg_key(request.cfg_scale)
        rng = np.random.default_rng(_digest_seed("cfg", request.prompt, request.seed, key))
        if key == _cfg_key(BASE_CFG):
            noise = np.zeros(self.size)
        else:
            noise = gaussian_filter(rng.standard_normal(self.size), sigma=0.6)
            noise *= self.amplitude / (noise.std() + 1e-12)
        img = base + mask * noise
        if key in self.content_jumps:
            h, w = self.size
            img[h // 4: 3 * h // 4, w // 4: 3 * w // 4] = 255 - img[h // 4: 3 * h // 4, w // 4: 3 * w // 4]
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode()).hexdigest()[:16]


class RecordedBackend:
    """Replays images stored as ``<prompt-hash>_<seed>_<cfg>.pgm`` in a directory."""

    def __init__(self, root, size=None):
        self.root = Path(root)
        self.size = size

    def path_for(self, request: GenerationRequest) -> Path:
        return self.root / f"{prompt_hash(request.prompt)}_{request.seed}_{request.cfg_scale:.4f}.pgm"

    def record(self, request: GenerationRequest, img) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path_for(request)
        save_image(img, path)
        return path

    def generate(self, request: GenerationRequest) -> np.ndarray:
        path = self.path_for(request)
        if not path.exists():
            raise BackendError(request, f"no recording at {path}")
        img = load_image(path)
        if self.size is not None and img.shape != tuple(self.size):
            img = resize(img, self.size)
        return img


class HttpBackend:
    """Client for a generation service.

    POSTs ``{"prompt", "seed", "cfg_scale"}`` as JSON to ``url`` and expects a
    PGM/PPM body back. Endpoint, timeout and retries default from the
    ``GIFDL_BACKEND_URL``, ``GIFDL_BACKEND_TIMEOUT`` and ``GIFDL_BACKEND_RETRIES``
    environment variables; ``GIFDL_BACKEND_TOKEN`` is sent as a bearer token.
    """

    def __init__(self, url=None, timeout=None, retries=None, token=None, size=None):
        self.url = url or os.environ.get("GIFDL_BACKEND_URL")
        if not self.url:
            raise ConfigError("no backend URL given and GIFDL_BACKEND_URL is unset")
        self.timeout = float(timeout if timeout is not None else os.environ.get("GIFDL_BACKEND_TIMEOUT", 120))
        self.retries = int(retries if retries is not None else os.environ.get("GIFDL_BACKEND_RETRIES", 2))
        self.token = token or os.environ.get("GIFDL_BACKEND_TOKEN")
        self.size = size

    def generate(self, request: GenerationRequest) -> np.ndarray:
        body = json.dumps(
            {"prompt": request.prompt, "seed": request.seed, "cfg_scale": request.cfg_scale}
        ).encode()
        headers = {"Content-Type": "application/json", "Accept": "image/x-portable-graymap"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last = None
        for _ in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    data = resp.read()
                break
            except (urllib.error.URLError, OSError) as exc:
                last = exc
        else:
            raise BackendError(request, f"request failed after {self.retries + 1} attempts: {last}")
        try:
            img = decode_pnm(data)
        except PgmParseError as exc:
            raise BackendError(request, f"bad image in response: {exc}") from exc
        if self.size is not None and img.shape != tuple(self.size):
            img = resize(img, self.size)
        return img


@dataclass
class FluctuationSet:
    cover: np.ndarray
    fluctuations: list
    cfg_values: list  # cover's cfg first, then one per fluctuation
    prompt: str
    seed: int
    tau: float
    rejected: list = field(default_factory=list)

    def __post_init__(self):
        shapes = {self.cover.shape} | {f.shape for f in self.fluctuations}
        if len(shapes) != 1:
            raise ShapeError(f"members differ in shape: {sorted(shapes)}")
        if len(self.cfg_values) != len(self.fluctuations) + 1:
            raise ConfigError("need one cfg value per member")
        if len({_cfg_key(c) for c in self.cfg_values}) != len(self.cfg_values):
            raise ConfigError("cfg values must be pairwise distinct")

    @property
    def n(self) -> int:
        return len(self.fluctuations)

    def stack(self) -> np.ndarray:
        return np.stack([self.cover, *self.fluctuations])


def _replacement_cfgs(base_cfg, sweep):
    """Extend the sweep outward in CFG_STEP increments, alternating sides."""
    hi, lo = max(sweep), min(sweep)
    k = 1
    while True:
        yield _cfg_key(hi + k * CFG_STEP)
        if lo - k * CFG_STEP > 0:
            yield _cfg_key(lo - k * CFG_STEP)
        k += 1


def _call(backend, request):
    try:
        img = backend.generate(request)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(request, exc) from exc
    return as_image(img)


def build_fluctuation_set(
    backend: T2IBackend,
    prompt: str,
    seed: int,
    base_cfg: float = BASE_CFG,
    sweep: Sequence[float] = DEFAULT_SWEEP,
    tau: float = DEFAULT_TAU,
    max_retries: int = 10,
    max_in_flight: int = 1,
) -> FluctuationSet:
    """Generate a cover and ``len(sweep)`` threshold-filtered fluctuations.

    A candidate with ``mse > tau`` is discarded and regenerated at the next
    unused CFG value beyond the sweep; at most ``max_retries`` replacements
    are attempted in total.
    """
    sweep = [_cfg_key(c) for c in sweep]
    if not sweep:
        raise ConfigError("sweep must not be empty")
    if _cfg_key(base_cfg) in sweep:
        raise ConfigError(f"base cfg {base_cfg} must not appear in the sweep")
    if len(set(sweep)) != len(sweep):
        raise ConfigError("sweep values must be distinct")

    cover = _call(backend, GenerationRequest(prompt, seed, base_cfg))
    want = len(sweep)
    accepted, cfgs, rejected = [], [], []

    def consider(cfg, img):
        d = mse(cover, img) if img.shape == cover.shape else math.inf
        if d <= tau:
            accepted.append(img)
            cfgs.append(cfg)
        else:
            rejected.append((cfg, d))
            log.info("rejected cfg %.4f for %r/%d: mse %.2f > tau %.2f", cfg, prompt, seed, d, tau)

    requests = [GenerationRequest(prompt, seed, c) for c in sweep]
    if max_in_flight > 1:
        with ThreadPoolExecutor(max_in_flight) as pool:
            images = list(pool.map(lambda r: _call(backend, r), requests))
    else:
        images = [_call(backend, r) for r in requests]
    for cfg, img in zip(sweep, images):
        consider(cfg, img)

    tried = want
    spare = _replacement_cfgs(base_cfg, sweep)
    retries = 0
    while len(accepted) < want:
        if retries >= max_retries:
            raise GenerationExhaustedError(len(accepted), want, tried)
        cfg = next(spare)
        if cfg == _cfg_key(base_cfg):
            continue
        retries += 1
        tried += 1
        consider(cfg, _call(backend, GenerationRequest(prompt, seed, cfg)))

    return FluctuationSet(
        cover=cover,
        fluctuations=accepted,
        cfg_values=[_cfg_key(base_cfg), *cfgs],
        prompt=prompt,
        seed=seed,
        tau=tau,
        rejected=rejected,
    )


# --- manifests -----------------------------------------------------------

MANIFEST_MAGIC = "#gifdl-manifest v1"
ROLES = ("train", "val", "test")
_COLUMNS = ("cover", "fluctuations", "prompt", "seed", "cfg_values", "tau")


@dataclass(frozen=True)
class ManifestEntry:
    cover: str
    fluctuations: tuple
    prompt: str
    seed: int
    cfg_values: tuple
    tau: float


@dataclass
class DatasetManifest:
    name: str
    role: str
    entries: list
    image_size: tuple
    root: Path = Path(".")

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"role must be one of {ROLES}, got {self.role!r}")

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel) -> Path:
        return self.root / rel

    def load_set(self, i: int) -> FluctuationSet:
        e = self.entries[i]
        return FluctuationSet(
            cover=load_image(self.resolve(e.cover)),
            fluctuations=[load_image(self.resolve(f)) for f in e.fluctuations],
            cfg_values=list(e.cfg_values),
            prompt=e.prompt,
            seed=e.seed,
            tau=e.tau,
        )

    def validate(self) -> None:
        """Check every referenced file exists, parses and has ``image_size``."""
        for e in self.entries:
            for rel in (e.cover, *e.fluctuations):
                path = self.resolve(rel)
                if not path.exists():
                    raise ConfigError(f"manifest {self.name}: missing file {path}")
                img = as_image(load_image(path))
                if img.shape != tuple(self.image_size):
                    raise ShapeError(f"{path}: {img.shape} != manifest size {self.image_size}")


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(f"{MANIFEST_MAGIC}\n#name\t{manifest.name}\n#role\t{manifest.role}\n")
        fh.write("#image_size\t%d\t%d\n" % tuple(manifest.image_size))
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(_COLUMNS)
        for e in manifest.entries:
            w.writerow([
                e.cover,
                ",".join(e.fluctuations),
                e.prompt,
                e.seed,
                ",".join(f"{c:.6f}" for c in e.cfg_values),
                repr(float(e.tau)),
            ])
    os.replace(tmp, path)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    meta = {}
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != MANIFEST_MAGIC:
            raise ConfigError(f"{path}: not a gifdl manifest")
        rows = []
        for row in csv.reader(fh, delimiter="\t"):
            if row and row[0].startswith("#"):
                meta[row[0][1:]] = row[1:]
            else:
                rows.append(row)
    if not rows or tuple(rows[0]) != _COLUMNS:
        raise ConfigError(f"{path}: missing column header")
    entries = [
        ManifestEntry(
            cover=r[0],
            fluctuations=tuple(x for x in r[1].split(",") if x),
            prompt=r[2],
            seed=int(r[3]),
            cfg_values=tuple(float(c) for c in r[4].split(",")),
            tau=float(r[5]),
        )
        for r in rows[1:]
    ]
    return DatasetManifest(
        name=meta["name"][0],
        role=meta["role"][0],
        entries=entries,
        image_size=tuple(int(v) for v in meta["image_size"]),
        root=path.parent,
    )


def check_disjoint(*manifests: DatasetManifest) -> None:
    seen = {}
    for m in manifests:
        for e in m.entries:
            key = m.resolve(e.cover).resolve()
            if key in seen and seen[key] != m.role:
                raise ConfigError(f"{e.cover} appears in both {seen[key]} and {m.role}")
            seen[key] = m.role


def split_manifest(manifest: DatasetManifest, sizes, rng_seed: int = 0):
    """Reproducible disjoint (train, val, test) split with the requested sizes."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or min(sizes) < 0:
        raise SizeError(f"sizes must be three non-negative integers, got {sizes}")
    if sum(sizes) > len(manifest.entries):
        raise SizeError(f"requested {sum(sizes)} entries but manifest has {len(manifest.entries)}")
    order = np.random.default_rng(rng_seed).permutation(len(manifest.entries))
    out, start = [], 0
    for role, k in zip(ROLES, sizes):
        picked = [manifest.entries[i] for i in order[start:start + k]]
        out.append(replace(manifest, name=f"{manifest.name}_{role}", role=role, entries=picked))
        start += k
    return tuple(out)


@dataclass
class BuildStats:
    sets: int = 0
    rejected: int = 0
    candidates: int = 0


def build_dataset(
    backend: T2IBackend,
    prompts: Sequence[str],
    seeds: Sequence[int],
    out_dir,
    name: str = "dataset",
    role: str = "train",
    tau: float = DEFAULT_TAU,
    base_cfg: float = BASE_CFG,
    sweep: Sequence[float] = DEFAULT_SWEEP,
    max_retries: int = 10,
    max_in_flight: int = 1,
):
    """Build one fluctuation set per (prompt, seed), save images and a manifest.

    Returns ``(manifest, stats)``; the manifest is written to
    ``out_dir/<name>.tsv`` with paths relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    (out_dir / "cover").mkdir(parents=True, exist_ok=True)
    (out_dir / "flu").mkdir(parents=True, exist_ok=True)
    entries, stats, size = [], BuildStats(), None
    for k, (prompt, seed) in enumerate((p, s) for p in prompts for s in seeds):
        fs = build_fluctuation_set(backend, prompt, seed, base_cfg, sweep, tau, max_retries, max_in_flight)
        stem = f"{name}_{k:06d}"
        save_image(fs.cover, out_dir / "cover" / f"{stem}.pgm")
        flu = []
        for j, img in enumerate(fs.fluctuations):
            rel = f"flu/{stem}_{j:02d}.pgm"
            save_image(img, out_dir / rel)
            flu.append(rel)
        entries.append(ManifestEntry(f"cover/{stem}.pgm", tuple(flu), prompt, seed, tuple(fs.cfg_values), tau))
        size = fs.cover.shape
        stats.sets += 1
        stats.rejected += len(fs.rejected)
        stats.candidates += fs.n + len(fs.rejected)
    manifest = DatasetManifest(name, role, entries, tuple(size or (0, 0)), root=out_dir)
    write_manifest(manifest, out_dir / f"{name}.tsv")
    log.info("built %d sets, %d/%d candidates rejected", stats.sets, stats.rejected, stats.candidates)
    return manifest, stats
