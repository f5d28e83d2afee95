import json
import os

import numpy as np
import pytest

from gifdl.cli import EXIT_BACKEND, EXIT_CONFIG, EXIT_INPUT, EXIT_PAYLOAD, build_parser, main, resolve
from gifdl.fluctuation import read_manifest
from gifdl.image import load_image, save_image
from gifdl.maps import CostMap, load_cost_map, save_cost_map
from gifdl.volatility import CombineConfig, combine_costs


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    (root / "prompts.txt").write_text("".join(f"scene {k}\n" for k in range(5)))
    assert run("dataset", "--prompts", root / "prompts.txt", "--seeds", "0,1", "--size", "32,32",
               "--out", root / "data") == 0
    return root / "data"


@pytest.fixture
def cover_file(tmp_path, textured):
    save_image(textured, tmp_path / "cover.pgm")
    return tmp_path / "cover.pgm"


def test_dataset_layout(dataset):
    m = read_manifest(dataset / "dataset.tsv")
    assert len(m) == 10 and tuple(m.image_size) == (32, 32)
    m.validate()
    run_info = json.loads((dataset / "run.json").read_text())
    assert run_info["command"] == "dataset" and len(run_info["config_hash"]) == 64
    assert list(run_info["inputs"].values())[0] == __import__("hashlib").sha256(
        (dataset.parent / "prompts.txt").read_bytes()).hexdigest()


def test_dataset_dry_run_large(tmp_path, capsys):
    (tmp_path / "p.txt").write_text("\n".join(f"prompt {k}" for k in range(1000)))
    assert run("dataset", "--prompts", tmp_path / "p.txt", "--seeds", "0:10", "--out", tmp_path / "o",
               "--dry-run") == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["sets"] == 10000 and plan["min_backend_calls"] == 110000
    assert not (tmp_path / "o").exists()


def test_dataset_tau_zero_exhausts(tmp_path, capsys):
    (tmp_path / "p.txt").write_text("a\n")
    code = run("dataset", "--prompts", tmp_path / "p.txt", "--size", "16,16", "--tau", "0",
               "--max-retries", "2", "--out", tmp_path / "o")
    assert code == EXIT_BACKEND and "accepted only" in capsys.readouterr().err


def test_dataset_rejects_base_in_sweep(tmp_path):
    (tmp_path / "p.txt").write_text("a\n")
    assert run("dataset", "--prompts", tmp_path / "p.txt", "--sweep", "7.5,7.6", "--out", tmp_path) == EXIT_CONFIG


@pytest.mark.parametrize("hexmsg", [None, "00ff10a5"])
def test_embed_extract_round_trip(tmp_path, cover_file, hexmsg):
    msg = bytes(np.random.default_rng(9).integers(0, 256, 150, dtype=np.uint8))
    args = ["--message", hexmsg] if hexmsg else ["--message-file", tmp_path / "m.bin"]
    (tmp_path / "m.bin").write_bytes(msg)
    assert run("embed", "--cover", cover_file, "--out", tmp_path / "s.pgm", "--baseline", "hill_like",
               "--payload", "0.4", "--key", 11, *args) == 0
    assert run("extract", "--stego", tmp_path / "s.pgm", "--out", tmp_path / "back.bin",
               "--payload", "0.4", "--key", 11) == 0
    expect = bytes.fromhex(hexmsg) if hexmsg else msg
    assert (tmp_path / "back.bin").read_bytes() == expect
    assert (tmp_path / "s.pgm.run.json").exists()


def test_payload_overflow(tmp_path, cover_file, capsys):
    (tmp_path / "m.bin").write_bytes(bytes(4096))
    code = run("embed", "--cover", cover_file, "--out", tmp_path / "s.pgm", "--baseline", "uniform",
               "--payload", "0.1", "--message-file", tmp_path / "m.bin")
    assert code == EXIT_PAYLOAD and not (tmp_path / "s.pgm").exists()


def test_all_wet_costs_exit_payload(tmp_path, cover_file):
    save_cost_map(CostMap.symmetric(np.full((64, 64), 1e13)), tmp_path / "wet.gcm")
    assert run("embed", "--cover", cover_file, "--out", tmp_path / "s.pgm", "--costs", tmp_path / "wet.gcm",
               "--message", "ab") == EXIT_PAYLOAD


def test_embed_needs_one_cost_source(tmp_path, cover_file):
    assert run("embed", "--cover", cover_file, "--out", tmp_path / "s.pgm", "--message", "ab") == EXIT_CONFIG


def test_missing_inputs(tmp_path):
    assert run("costs", "--checkpoint", tmp_path / "no.pt", "--image", tmp_path / "x.pgm",
               "--out", tmp_path / "c") == EXIT_INPUT
    (tmp_path / "bad.pgm").write_bytes(b"P5\n4 4\n255\n")
    assert run("extract", "--stego", tmp_path / "bad.pgm", "--out", tmp_path / "m") == EXIT_INPUT


def test_train_costs_and_resume(dataset, tmp_path, cover_file):
    small = ["--base-channels", 4, "--max-channels", 8, "--batch-size", 2]
    assert run("train", "--manifest", dataset / "dataset.tsv", "--out", tmp_path / "run",
               "--iterations", 3, *small) == 0
    assert (tmp_path / "run" / "final.pt").exists() and (tmp_path / "run" / "run.json").exists()
    img = tmp_path / "c32.pgm"
    save_image(load_image(cover_file)[:32, 16:48], img)
    assert run("costs", "--checkpoint", tmp_path / "run" / "final.pt", "--image", img,
               "--out", tmp_path / "costs.gcm") == 0
    cm = load_cost_map(tmp_path / "costs.gcm")
    assert cm.shape == (32, 32) and (cm.rho_plus > 0).all()
    assert run("train", "--manifest", dataset / "dataset.tsv", "--out", tmp_path / "run2",
               "--iterations", 4, "--resume", tmp_path / "run" / "final.pt", *small) == 0


def test_volatility_and_combine(dataset, tmp_path):
    assert run("volatility", "--manifest", dataset / "dataset.tsv", "--index", 3,
               "--out", tmp_path / "v.gcm") == 0
    v = load_cost_map(tmp_path / "v.gcm")
    o = CostMap.symmetric(np.random.default_rng(0).random(v.shape) + 0.1)
    save_cost_map(o, tmp_path / "o.gcm")
    assert run("combine", "--rho-o", tmp_path / "o.gcm", "--rho-v", tmp_path / "v.gcm",
               "--vc-beta", 0.3, "--out", tmp_path / "c.gcm") == 0
    want = combine_costs(load_cost_map(tmp_path / "o.gcm"), v, CombineConfig(0.3))
    got = load_cost_map(tmp_path / "c.gcm")
    save_cost_map(want, tmp_path / "want.gcm")  # same float32 rounding as the command's output
    want = load_cost_map(tmp_path / "want.gcm")
    assert np.array_equal(got.rho_plus, want.rho_plus) and np.array_equal(got.rho_minus, want.rho_minus)
    assert run("volatility", "--manifest", dataset / "dataset.tsv", "--index", 10,
               "--out", tmp_path / "x.gcm") == EXIT_CONFIG


def test_eval_none_is_chance_and_report(dataset, tmp_path, capsys):
    common = ["--manifest", dataset / "dataset.tsv", "--split", "4,2,4", "--epochs", 2]
    assert run("eval", "--method", "none", *common, "--out", tmp_path / "a.jsonl") == 0
    assert run("eval", "--method", "uniform", "--payload", "0.1,0.4", *common, "--out", tmp_path / "b.jsonl") == 0
    first = (tmp_path / "b.jsonl").read_text()
    assert run("eval", "--method", "uniform", "--payload", "0.1,0.4", *common, "--out", tmp_path / "b.jsonl") == 0
    assert (tmp_path / "b.jsonl").read_text() == first  # same inputs and seed, same file
    recs = [json.loads(x) for p in ("a.jsonl", "b.jsonl") for x in (tmp_path / p).read_text().splitlines()]
    assert recs[0]["p_e"] == 0.5 and [r["payload"] for r in recs[1:]] == [0.1, 0.4]
    capsys.readouterr()
    assert run("report", "--reports", f"{tmp_path / 'a.jsonl'},{tmp_path / 'b.jsonl'}") == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("Method") and {t.split()[0] for t in table[2:]} == {"none", "uniform"}


def test_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"payload": [0.2], "embed": {"key": 5, "stc_h": 6}}))
    ns = build_parser().parse_args(["embed", "--cover", "c", "--out", "o", "--config", str(cfg),
                                    "--stc-h", "4"])
    env = {"GIFDL_KEY": "8"}
    out = resolve("embed", ns, env)
    assert (out["stc_h"], out["key"], out["payload"]) == (4, 8, [0.2])
    assert resolve("embed", ns, {})["key"] == 5
    assert resolve("embed", build_parser().parse_args(["embed", "--cover", "c", "--out", "o"]), {})["stc_h"] == 7


def test_config_errors(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"embed": {"bogus": 1}}))
    ns = build_parser().parse_args(["embed", "--cover", "c", "--out", "o", "--config", str(cfg)])
    from gifdl.errors import ConfigError

    with pytest.raises(ConfigError):
        resolve("embed", ns, {})
    ns = build_parser().parse_args(["embed", "--out", "o"])
    with pytest.raises(ConfigError, match="GIFDL_COVER"):
        resolve("embed", ns, {})
    ns = build_parser().parse_args(["eval", "--out", "o", "--arch", "huge"])
    with pytest.raises(ConfigError):
        resolve("eval", ns, {})


def test_env_drives_main(tmp_path, cover_file, monkeypatch):
    monkeypatch.setenv("GIFDL_BASELINE", "uniform")
    monkeypatch.setenv("GIFDL_MESSAGE", "c0ffee")
    assert run("embed", "--cover", cover_file, "--out", tmp_path / "s.pgm") == 0
    rec = json.loads((tmp_path / "s.pgm.run.json").read_text())
    assert rec["config"]["baseline"] == "uniform" and rec["seed"] == 0
    assert str(cover_file) in rec["inputs"]
