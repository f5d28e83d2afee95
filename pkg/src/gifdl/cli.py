"""Command-line interface.

Every option resolves as: command-line flag, then ``GIFDL_<OPTION>``
environment variable, then the JSON file given with ``--config`` (either flat
keys or a section named after the command), then the built-in default. The
effective values are logged and written, with input digests, to a run
manifest next to the command's output.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    BackendError,
    ConfigError,
    GenerationExhaustedError,
    GifdlError,
    InfeasibleError,
    PayloadError,
    PgmParseError,
    ShapeError,
)

log = logging.getLogger("gifdl")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_PAYLOAD = 4
EXIT_BACKEND = 5


# --- value converters -----------------------------------------------------

def _floats(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    if isinstance(v, (int, float)):
        return [float(v)]
    return [float(x) for x in str(v).replace(" ", "").split(",") if x]


def _ints(v):
    """``"0,1,5"``, ``"0:10"`` (half-open range) or a list."""
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    if isinstance(v, int):
        return [v]
    out = []
    for part in str(v).replace(" ", "").split(","):
        if ":" in part:
            a, b = part.split(":")
            out.extend(range(int(a), int(b)))
        elif part:
            out.append(int(part))
    return out


def _size(v):
    vals = _ints(v)
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise ValueError(f"size must be H,W, got {v!r}")
    return tuple(vals)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _paths(v):
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [x for x in str(v).split(",") if x]


@dataclass(frozen=True)
class Opt:
    name: str
    conv: object = str
    default: object = None
    help: str = ""
    choices: tuple | None = None
    required: bool = False
    flag: bool = False  # store_true style switch


def _train_opts():
    from .training import TrainConfig

    conv = {int: int, float: float, bool: _bool, str: str}
    opts = []
    for f in fields(TrainConfig):
        typ = {"int": int, "float": float, "bool": bool, "str": str}[str(f.type)]
        choices = {"strategy": ("assignment", "shared"), "d1_arch": ("weak", "strong"),
                   "d2_arch": ("weak", "strong")}.get(f.name)
        opts.append(Opt(f.name, conv[typ], f.default, f"training: {f.name}", choices))
    return opts


SEED = Opt("seed", int, 0, "seed for the command's random generator")

COMMANDS = {
    "dataset": [
        Opt("prompts", str, None, "text file, one prompt per line", required=True),
        Opt("seeds", _ints, [0], "generation seeds: list '0,1' or range '0:10'"),
        Opt("backend", str, "procedural", "image source", ("procedural", "recorded", "http")),
        Opt("backend_url", str, None, "generation service endpoint (http backend)"),
        Opt("recorded_dir", str, None, "directory of recorded images (recorded backend)"),
        Opt("size", _size, (64, 64), "image size H,W; backend output is resized on ingest"),
        Opt("tau", float, 25.0, "MSE acceptance threshold"),
        Opt("base_cfg", float, 7.5, "CFG scale of the cover"),
        Opt("sweep", _floats, None, "fluctuation CFG scales (default: 10 values at 0.001 spacing)"),
        Opt("max_retries", int, 10, "replacement attempts per set"),
        Opt("max_in_flight", int, 1, "concurrent backend requests"),
        Opt("name", str, "dataset", "dataset name"),
        Opt("role", str, "train", "manifest role", ("train", "val", "test")),
        Opt("split", _ints, None, "also write train,val,test sub-manifests of these sizes"),
        Opt("out", str, None, "output directory", required=True),
        Opt("dry_run", _bool, False, "validate the configuration and print the plan only", flag=True),
        SEED,
    ],
    "train": [
        Opt("manifest", _paths, None, "dataset manifest(s), comma separated", required=True),
        Opt("out", str, None, "output directory", required=True),
        Opt("resume", str, None, "checkpoint to resume from"),
    ] + _train_opts(),
    "costs": [
        Opt("checkpoint", str, None, "trained generator checkpoint", required=True),
        Opt("image", str, None, "cover image", required=True),
        Opt("out", str, None, "cost map output", required=True),
        Opt("probs_out", str, None, "optional probability map output"),
    ],
    "embed": [
        Opt("cover", str, None, "cover image", required=True),
        Opt("out", str, None, "stego image output", required=True),
        Opt("costs", str, None, "cost map file"),
        Opt("checkpoint", str, None, "generator checkpoint used to compute costs"),
        Opt("baseline", str, None, "baseline cost scheme", ("uniform", "hill_like")),
        Opt("message", str, None, "message as hex"),
        Opt("message_file", str, None, "message file (raw bytes)"),
        Opt("payload", _floats, [0.4], "payload in bits per pixel"),
        Opt("stc_h", int, 7, "trellis constraint height"),
        Opt("key", int, 0, "embedding key shared with the receiver"),
    ],
    "extract": [
        Opt("stego", str, None, "stego image", required=True),
        Opt("out", str, None, "message output file", required=True),
        Opt("payload", _floats, [0.4], "payload in bits per pixel"),
        Opt("stc_h", int, 7, "trellis constraint height"),
        Opt("key", int, 0, "embedding key"),
    ],
    "volatility": [
        Opt("manifest", str, None, "dataset manifest", required=True),
        Opt("index", int, 0, "entry index within the manifest"),
        Opt("sigma_min", float, 0.1, "fluctuation std below which a pixel is wet"),
        Opt("out", str, None, "volatility cost map output", required=True),
    ],
    "combine": [
        Opt("rho_o", str, None, "original cost map", required=True),
        Opt("rho_v", str, None, "volatility cost map", required=True),
        Opt("vc_beta", float, 0.15, "weight of the volatility cost"),
        Opt("out", str, None, "combined cost map output", required=True),
    ],
    "eval": [
        Opt("manifest", str, None, "dataset manifest supplying covers"),
        Opt("pairs", str, None, "existing pairs manifest (skips embedding)"),
        Opt("method", str, "uniform", "cost source for stegos; 'none' leaves covers unchanged",
            ("uniform", "hill_like", "gifdl", "none")),
        Opt("checkpoint", str, None, "generator checkpoint (method gifdl)"),
        Opt("payload", _floats, [0.4], "payload(s) in bits per pixel"),
        Opt("arch", str, "weak", "steganalyzer architecture", ("weak", "strong")),
        Opt("split", _ints, [200, 50, 250], "train,val,test pair counts"),
        Opt("epochs", int, 30, "steganalyzer epochs"),
        Opt("lr", float, 1e-3, "steganalyzer learning rate"),
        Opt("stc_h", int, 7, "trellis constraint height"),
        Opt("out", str, None, "report file (JSON lines, overwritten)", required=True),
        SEED,
    ],
    "report": [
        Opt("reports", _paths, None, "report file(s), comma separated", required=True),
        Opt("out", str, None, "write the table here instead of stdout"),
    ],
}


def _env_name(opt):
    return "GIFDL_" + opt.name.upper()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gifdl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gifdl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--log-level", default=os.environ.get("GIFDL_LOG_LEVEL", "INFO"))
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            env = _env_name(o)
            extra = f" [env {env}; default {o.default!r}]"
            if o.flag:
                sp.add_argument(flag, dest=o.name, action="store_const", const=True, default=None,
                                help=o.help + extra)
            else:
                sp.add_argument(flag, dest=o.name, default=None, help=o.help + extra)
    return p


def resolve(command: str, ns: argparse.Namespace, environ=None) -> dict:
    """Effective option values: flag > env > config file > default."""
    environ = os.environ if environ is None else environ
    file_cfg = {}
    if getattr(ns, "config", None):
        try:
            with open(ns.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {ns.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {ns.config} must hold a JSON object")
        section = raw.get(command, {})
        stray = set(section) - {o.name for o in COMMANDS[command]}
        if stray:
            raise ConfigError(f"config file {ns.config}: unknown {command} keys {sorted(stray)}")
        file_cfg = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        file_cfg.update(section)
    out = {}
    for o in COMMANDS[command]:
        val, src = getattr(ns, o.name, None), "flag"
        if val is None and _env_name(o) in environ:
            val, src = environ[_env_name(o)], "env"
        if val is None and o.name in file_cfg:
            val, src = file_cfg[o.name], "config"
        if val is None:
            if o.required:
                raise ConfigError(f"{command}: --{o.name.replace('_', '-')} is required "
                                  f"(or set {_env_name(o)})")
            out[o.name] = o.default
            continue
        try:
            val = o.conv(val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{command}: bad value for {o.name} from {src}: {exc}") from exc
        if o.choices and val not in o.choices:
            raise ConfigError(f"{command}: {o.name} must be one of {o.choices}, got {val!r}")
        out[o.name] = val
    return out


# --- run manifests --------------------------------------------------------

def _digest_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_run_manifest(path, command, cfg, inputs=()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "tool": "gifdl",
        "version": __version__,
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed", cfg.get("key")),
        "inputs": {str(p): _digest_file(p) for p in inputs if p and Path(p).is_file()},
    }
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    os.replace(tmp, path)


def _run_path(out, is_dir=False):
    out = Path(out)
    return out / "run.json" if is_dir else out.with_name(out.name + ".run.json")


# --- helpers --------------------------------------------------------------

def _single_payload(cfg):
    if len(cfg["payload"]) != 1:
        raise ConfigError("this command takes exactly one payload value")
    return cfg["payload"][0]


def _message_bits(cfg) -> np.ndarray:
    if (cfg["message"] is None) == (cfg["message_file"] is None):
        raise ConfigError("give exactly one of --message (hex) or --message-file")
    if cfg["message"] is not None:
        try:
            data = bytes.fromhex(cfg["message"])
        except ValueError as exc:
            raise ConfigError(f"--message is not valid hex: {exc}") from exc
    else:
        data = Path(cfg["message_file"]).read_bytes()
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def _require(path, what):
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def _make_backend(cfg):
    from .fluctuation import HttpBackend, ProceduralBackend, RecordedBackend

    if cfg["backend"] == "procedural":
        return ProceduralBackend(size=cfg["size"])
    if cfg["backend"] == "recorded":
        if not cfg["recorded_dir"]:
            raise ConfigError("recorded backend needs --recorded-dir")
        return RecordedBackend(cfg["recorded_dir"], size=cfg["size"])
    return HttpBackend(url=cfg["backend_url"], size=cfg["size"])


def _read_prompts(path):
    _require(path, "prompt file")
    prompts = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not prompts:
        raise ConfigError(f"prompt file {path} has no prompts")
    return prompts


# --- commands -------------------------------------------------------------

def cmd_dataset(cfg) -> int:
    from .fluctuation import DEFAULT_SWEEP, build_dataset, split_manifest, write_manifest

    prompts = _read_prompts(cfg["prompts"])
    seeds = cfg["seeds"]
    if not seeds or min(seeds) < 0:
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    sweep = tuple(cfg["sweep"] or DEFAULT_SWEEP)
    if cfg["base_cfg"] in sweep:
        raise ConfigError("base_cfg must not appear in the sweep")
    if min(cfg["size"]) < 16:
        raise ConfigError("images must be at least 16x16")
    n_sets = len(prompts) * len(seeds)
    if cfg["split"] is not None and (len(cfg["split"]) != 3 or sum(cfg["split"]) > n_sets):
        raise ConfigError(f"split {cfg['split']} does not fit {n_sets} sets")
    plan = {
        "sets": n_sets,
        "prompts": len(prompts),
        "seeds": len(seeds),
        "fluctuations_per_set": len(sweep),
        "min_backend_calls": n_sets * (len(sweep) + 1),
        "max_backend_calls": n_sets * (len(sweep) + 1 + cfg["max_retries"]),
    }
    if cfg["dry_run"]:
        print(json.dumps({"dry_run": True, **plan}, indent=2))
        return EXIT_OK
    backend = _make_backend(cfg)
    manifest, stats = build_dataset(
        backend, prompts, seeds, cfg["out"], name=cfg["name"], role=cfg["role"], tau=cfg["tau"],
        base_cfg=cfg["base_cfg"], sweep=sweep, max_retries=cfg["max_retries"],
        max_in_flight=cfg["max_in_flight"],
    )
    log.info("rejections: %d of %d candidates", stats.rejected, stats.candidates)
    if cfg["split"] is not None:
        for part in split_manifest(manifest, cfg["split"], rng_seed=cfg["seed"]):
            write_manifest(part, Path(cfg["out"]) / f"{part.name}.tsv")
    write_run_manifest(_run_path(cfg["out"], True), "dataset", cfg, [cfg["prompts"]])
    print(f"{len(manifest)} sets -> {Path(cfg['out']) / (cfg['name'] + '.tsv')}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    from .fluctuation import read_manifest
    from .training import TrainConfig, init_state, resume_state, train

    tcfg = TrainConfig.from_dict({f.name: cfg[f.name] for f in fields(TrainConfig)})
    sets, size = [], None
    for path in cfg["manifest"]:
        _require(path, "manifest")
        m = read_manifest(path)
        m.validate()
        sets.extend(m.load_set(i) for i in range(len(m)))
        if size is not None and tuple(m.image_size) != size:
            raise ShapeError(f"manifest {path} has size {m.image_size}, expected {size}")
        size = tuple(m.image_size)
    if not sets:
        raise ConfigError("no training sets in the given manifests")
    if cfg["resume"]:
        _require(cfg["resume"], "checkpoint")
        state = resume_state(tcfg, size, cfg["resume"])
    else:
        state = init_state(tcfg, size)
    train(sets, tcfg, out_dir=cfg["out"], state=state)
    write_run_manifest(_run_path(cfg["out"], True), "train", cfg, cfg["manifest"])
    print(f"trained {tcfg.iterations} iterations -> {Path(cfg['out']) / 'final.pt'}")
    return EXIT_OK


def cmd_costs(cfg) -> int:
    from .embedding import probs_to_costs
    from .generator import generator_forward, load_generator
    from .image import load_image
    from .maps import save_cost_map, save_probability_map

    _require(cfg["checkpoint"], "checkpoint")
    _require(cfg["image"], "image")
    pm = generator_forward(load_generator(cfg["checkpoint"]), load_image(cfg["image"]))
    save_cost_map(probs_to_costs(pm), cfg["out"])
    if cfg["probs_out"]:
        save_probability_map(pm, cfg["probs_out"])
    write_run_manifest(_run_path(cfg["out"]), "costs", cfg, [cfg["checkpoint"], cfg["image"]])
    return EXIT_OK


def _embedding_costs(cfg, cover):
    from .embedding import probs_to_costs
    from .evaluation import baseline_costs
    from .generator import generator_forward, load_generator
    from .maps import load_cost_map

    given = [k for k in ("costs", "checkpoint", "baseline") if cfg[k]]
    if len(given) != 1:
        raise ConfigError("give exactly one of --costs, --checkpoint or --baseline")
    if cfg["costs"]:
        _require(cfg["costs"], "cost map")
        costs = load_cost_map(cfg["costs"])
    elif cfg["checkpoint"]:
        _require(cfg["checkpoint"], "checkpoint")
        costs = probs_to_costs(generator_forward(load_generator(cfg["checkpoint"]), cover))
    else:
        costs = baseline_costs(cover, cfg["baseline"])
    if costs.shape != cover.shape:
        raise ShapeError(f"cost map {costs.shape} does not match cover {cover.shape}")
    return costs


def cmd_embed(cfg) -> int:
    from .image import load_image, save_image
    from .stc import StcParams, stc_embed

    _require(cfg["cover"], "cover image")
    cover = load_image(cfg["cover"])
    bits = _message_bits(cfg)
    params = StcParams(h=cfg["stc_h"], payload_q=_single_payload(cfg), seed=cfg["key"])
    stego = stc_embed(cover, _embedding_costs(cfg, cover), bits, params)
    save_image(stego, cfg["out"])
    changes = int(np.count_nonzero(stego.astype(int) - cover))
    log.info("embedded %d bits with %d changes", bits.size, changes)
    write_run_manifest(_run_path(cfg["out"]), "embed", cfg,
                       [cfg["cover"], cfg["costs"], cfg["checkpoint"], cfg["message_file"]])
    return EXIT_OK


def cmd_extract(cfg) -> int:
    from .image import load_image
    from .stc import StcParams, stc_extract

    _require(cfg["stego"], "stego image")
    params = StcParams(h=cfg["stc_h"], payload_q=_single_payload(cfg), seed=cfg["key"])
    bits = stc_extract(load_image(cfg["stego"]), params)
    if bits.size % 8:
        raise PayloadError(f"extracted {bits.size} bits, not a whole number of bytes")
    out = Path(cfg["out"])
    tmp = out.with_name(f".{out.name}.{os.getpid()}.tmp")
    tmp.write_bytes(np.packbits(bits).tobytes())
    os.replace(tmp, out)
    write_run_manifest(_run_path(out), "extract", cfg, [cfg["stego"]])
    return EXIT_OK


def cmd_volatility(cfg) -> int:
    from .fluctuation import read_manifest
    from .maps import save_cost_map
    from .volatility import estimate_volatility_cost

    _require(cfg["manifest"], "manifest")
    m = read_manifest(cfg["manifest"])
    if not 0 <= cfg["index"] < len(m):
        raise ConfigError(f"index {cfg['index']} outside manifest of {len(m)} entries")
    vc = estimate_volatility_cost(m.load_set(cfg["index"]), sigma_min=cfg["sigma_min"])
    save_cost_map(vc, cfg["out"])
    write_run_manifest(_run_path(cfg["out"]), "volatility", cfg, [cfg["manifest"]])
    return EXIT_OK


def cmd_combine(cfg) -> int:
    from .maps import load_cost_map, save_cost_map
    from .volatility import CombineConfig, combine_costs

    _require(cfg["rho_o"], "original cost map")
    _require(cfg["rho_v"], "volatility cost map")
    out = combine_costs(load_cost_map(cfg["rho_o"]), load_cost_map(cfg["rho_v"]),
                        CombineConfig(vc_beta=cfg["vc_beta"]))
    save_cost_map(out, cfg["out"])
    write_run_manifest(_run_path(cfg["out"]), "combine", cfg, [cfg["rho_o"], cfg["rho_v"]])
    return EXIT_OK


def cmd_eval(cfg) -> int:
    from .evaluation import (
        baseline_costs,
        embed_stegos,
        generator_costs,
        read_pairs,
        train_steganalyzer,
        write_reports,
    )
    from .fluctuation import read_manifest

    rng = np.random.default_rng(cfg["seed"])
    reports = []
    if cfg["pairs"]:
        _require(cfg["pairs"], "pairs manifest")
        pairs = read_pairs(cfg["pairs"])
        _, rep = train_steganalyzer(pairs, cfg["arch"], cfg["split"], seed=int(rng.integers(2**31)),
                                    epochs=cfg["epochs"], lr=cfg["lr"])
        reports.append(rep)
        inputs = [cfg["pairs"]]
    else:
        if not cfg["manifest"]:
            raise ConfigError("eval needs --manifest (covers) or --pairs")
        _require(cfg["manifest"], "manifest")
        m = read_manifest(cfg["manifest"])
        covers = np.stack([m.load_set(i).cover for i in range(len(m))])
        if cfg["method"] == "gifdl":
            from .generator import load_generator

            _require(cfg["checkpoint"], "checkpoint")
            cost_fn = generator_costs(load_generator(cfg["checkpoint"]))
        elif cfg["method"] != "none":
            def cost_fn(c, scheme=cfg["method"]):
                return baseline_costs(c, scheme)
        for q in cfg["payload"]:
            if cfg["method"] == "none":
                stegos = covers.copy()
            else:
                stegos = embed_stegos(covers, cost_fn, q, seed=int(rng.integers(2**31)), h=cfg["stc_h"])
            _, rep = train_steganalyzer((covers, stegos), cfg["arch"], cfg["split"],
                                        seed=int(rng.integers(2**31)), epochs=cfg["epochs"],
                                        lr=cfg["lr"], method=cfg["method"], payload=q)
            reports.append(rep)
        inputs = [cfg["manifest"], cfg["checkpoint"]]
    write_reports(reports, cfg["out"])
    for r in reports:
        print(f"{r.method or '-'} q={r.payload}: P_E={r.p_e:.4f} (FA {r.p_fa:.4f}, MD {r.p_md:.4f})")
    write_run_manifest(_run_path(cfg["out"]), "eval", cfg, inputs)
    return EXIT_OK


def cmd_report(cfg) -> int:
    from .evaluation import read_reports, render_table

    reports = []
    for path in cfg["reports"]:
        _require(path, "report file")
        reports.extend(read_reports(path))
    if not reports:
        raise ConfigError("no report records found")
    table = render_table(reports)
    if cfg["out"]:
        Path(cfg["out"]).write_text(table + "\n")
    else:
        print(table)
    return EXIT_OK


HANDLERS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "costs": cmd_costs,
    "embed": cmd_embed,
    "extract": cmd_extract,
    "volatility": cmd_volatility,
    "combine": cmd_combine,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _exit_code(exc) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (FileNotFoundError, PgmParseError, ShapeError)):
        return EXIT_INPUT
    if isinstance(exc, (PayloadError, InfeasibleError)):
        return EXIT_PAYLOAD
    if isinstance(exc, (BackendError, GenerationExhaustedError)):
        return EXIT_BACKEND
    return EXIT_ERROR


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=ns.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        log.info("effective config for %s: %s", ns.command, json.dumps(cfg, sort_keys=True, default=str))
        return HANDLERS[ns.command](cfg)
    except (GifdlError, FileNotFoundError) as exc:
        print(f"gifdl {ns.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
