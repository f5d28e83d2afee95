import json
import math

import numpy as np
import pytest
import torch

import gifdl.training as training
from gifdl.adversary import UpdateLog, choose
from gifdl.embedding import ternary_entropy
from gifdl.errors import ConfigError, NumericError
from gifdl.fluctuation import ProceduralBackend, build_fluctuation_set
from gifdl.maps import ProbabilityMap
from gifdl.training import (
    TrainConfig,
    capacity,
    decayed_lr,
    entropy_loss,
    generator_loss,
    init_state,
    load_config,
    local_variance,
    resume_state,
    texture_correlation,
    train,
)

TINY = dict(base_channels=4, max_channels=8, batch_size=2, lr=1e-3)


@pytest.fixture(scope="module")
def sets():
    b = ProceduralBackend(size=(32, 32))
    return [build_fluctuation_set(b, f"t{k}", 0) for k in range(3)]


def test_capacity_tensor_matches_numpy(rng):
    p = rng.random((2, 8, 8)) * 0.9
    cap = capacity(torch.from_numpy(p))
    ref = [ternary_entropy(ProbabilityMap.symmetric(x)) for x in p]
    assert cap.numpy() == pytest.approx(ref, rel=1e-12)
    assert capacity(ProbabilityMap.symmetric(p[0])) == pytest.approx(ref[0])


def test_capacity_at_the_endpoints():
    assert capacity(torch.zeros(4, 4)).item() == 0.0
    assert capacity(torch.full((4, 4), 2 / 3)).item() == pytest.approx(16 * math.log2(3))


def test_entropy_loss_is_squared_deviation():
    p = torch.full((1, 10, 10), 0.1)
    dev = capacity(p).item() - 100 * 0.4
    assert entropy_loss(p, 0.4).item() == pytest.approx(dev ** 2, rel=1e-6)


def test_generator_loss_combination():
    cfg = TrainConfig(alpha=2.0, beta=0.5, lam=3.0)
    assert generator_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(4.0), cfg).item() == pytest.approx(-12.0)


def test_step_decay():
    cfg = TrainConfig(lr=1.0, decay_every=10, decay_factor=0.5)
    assert [decayed_lr(cfg, i) for i in (0, 9, 10, 25)] == [1.0, 1.0, 0.5, 0.25]


@pytest.mark.parametrize("bad", [dict(beta=-1), dict(payload=1.0), dict(strategy="vote"), dict(batch_size=1), dict(lr=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"iterations": 3, "beta": 0.0}))
    cfg = load_config(tmp_path / "c.json")
    assert (cfg.iterations, cfg.beta, cfg.lr) == (3, 0.0, 1e-4)
    (tmp_path / "bad.json").write_text(json.dumps({"iters": 3}))
    with pytest.raises(ConfigError, match="iters"):
        load_config(tmp_path / "bad.json")


def test_texture_correlation_signs(textured):
    v = local_variance(textured)
    assert texture_correlation(v, textured) == pytest.approx(1.0)
    assert texture_correlation(-v, textured) == pytest.approx(-1.0)
    assert texture_correlation(np.full(v.shape, 0.1), textured) == 0.0


def test_iteration_contract(sets, tmp_path):
    cfg = TrainConfig(iterations=4, audit=True, checkpoint_every=2, **TINY)
    state = train(sets, cfg, out_dir=tmp_path)
    assert state.iteration == 4
    for (g_changed, d1_changed, d2_changed), (_, e1, e2, who) in zip(state.audit, state.update_log.records):
        assert g_changed and d1_changed + d2_changed == 1
        assert who == choose(e1, e2)
        assert d1_changed == (who == "D1")
    assert all(math.isfinite(v) for vals in state.history.values() for v in vals)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["iteration"] for x in lines] == [1, 2, 3, 4]
    assert {p.name for p in tmp_path.glob("*.pt")} == {"checkpoint_0000002.pt", "checkpoint_0000004.pt", "final.pt"}
    assert UpdateLog.read(tmp_path / "updates.tsv").records == state.update_log.records


def test_deterministic_rerun(sets):
    cfg = TrainConfig(iterations=3, **TINY)
    a = train(sets, cfg).history
    b = train(sets, cfg).history
    assert a == b


def test_resume_continues_the_same_run(sets, tmp_path):
    cfg = TrainConfig(iterations=2, checkpoint_every=2, **TINY)
    straight = train(sets, TrainConfig(iterations=4, **TINY)).history
    train(sets, cfg, out_dir=tmp_path)
    state = resume_state(cfg, (32, 32), tmp_path / "final.pt")
    assert state.iteration == 2
    tail = train(sets, cfg, state=state).history
    assert tail["capacity"] == straight["capacity"][2:]


def test_shared_strategy_runs(sets):
    state = train(sets, TrainConfig(iterations=2, strategy="shared", lambda_prime=0.5, audit=True, **TINY))
    assert all(d1 + d2 == 1 for _, d1, d2 in state.audit)


def test_non_finite_loss_stops_with_diagnostic(sets, tmp_path, monkeypatch):
    monkeypatch.setattr(training, "capacity", lambda p: torch.full(p.shape[:1], float("inf")))
    with pytest.raises(NumericError, match="iteration 0"):
        train(sets, TrainConfig(iterations=2, **TINY), out_dir=tmp_path)
    assert (tmp_path / "diagnostic.pt").exists()


def test_needs_two_sets(sets):
    with pytest.raises(ConfigError):
        train(sets[:1], TrainConfig(iterations=1, **TINY))
    with pytest.raises(ConfigError):
        init_state(TrainConfig(**TINY), (32, 32)) and train([], TrainConfig(**TINY))
