import math
import os

import numpy as np
import pytest

from arcvq import codebook as cbm
from arcvq import losses, quantizer, trainer
from arcvq.errors import ConfigError, ContractError, FormatError, TrainingDiverged, TruncatedFileError
from arcvq.trainer import (
    CSV_HEADER,
    AdamState,
    TrainConfig,
    adam_update,
    init_state,
    load_checkpoint,
    load_config,
    parse_config_text,
    save_checkpoint,
    train,
    train_step,
)


def tiny(**kw):
    base = dict(K=16, d=4, hidden=8, side=8, patch=4, batch_size=8, n_train=24, n_val=10, epochs=2, clusters=3)
    base.update(kw)
    return TrainConfig(**base)


def test_adam_first_step_is_lr_sized():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.5, -3.0, 1e-3])}
    st = AdamState()
    adam_update(p, g, st, 0.1)
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 0.4], atol=1e-6)


def test_adam_zero_gradient_and_constant_gradient():
    p = {"w": np.array([1.0])}
    st = AdamState()
    adam_update(p, {"w": np.array([2.0])}, st, 0.01)
    m_before = st.m["w"].copy()
    frozen = p["w"].copy()
    adam_update(p, {"w": np.array([0.0])}, st, 0.0)
    assert np.array_equal(p["w"], frozen)
    assert abs(st.m["w"][0]) < abs(m_before[0])
    p = {"w": np.array([0.0])}
    st = AdamState()
    for _ in range(2000):
        before = p["w"].copy()
        adam_update(p, {"w": np.array([0.3])}, st, 1e-3)
    assert before[0] - p["w"][0] == pytest.approx(1e-3, rel=1e-4)


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_update({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), 0.1)


def test_config_file_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# desk run\nvariant = bbnr-only\nK = 32  # small\nlambda = 1e-3\n\nlearning_rate=0.001\n")
    cfg = load_config(str(p), seed=5)
    assert (cfg.variant, cfg.K, cfg.lam, cfg.learning_rate, cfg.seed) == ("bbnr-only", 32, 1e-3, 1e-3, 5)
    with pytest.raises(ConfigError):
        parse_config_text("colour = red")
    with pytest.raises(ConfigError):
        parse_config_text("K = many")
    with pytest.raises(ConfigError):
        parse_config_text("just words")


@pytest.mark.parametrize("kw", [{"variant": "nope"}, {"K": 0}, {"d": 1}, {"s": 0.0}, {"precision": "half"}, {"batch_size": -1}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tiny(**kw)


def test_vanilla_step_has_no_arc_or_bound():
    state = init_state(tiny(variant="vanilla"))
    b = train_step(state, np.random.default_rng(0).uniform(size=(4, 8, 8)))
    assert b.arc is None and b.gamma_t is None and b.M_t is None
    assert state.step == 1


def test_full_step_zero_schedule_origins():
    cfg = tiny(variant="full", gamma0=0.7)
    state = init_state(cfg)
    b = train_step(state, np.random.default_rng(0).uniform(size=(4, 8, 8)))
    assert b.gamma_t == 0.7 and b.M_t == 1.0
    assert b.total == pytest.approx(b.recon + b.codebook_term + cfg.beta * b.commit_term + b.gamma_t * b.arc, abs=1e-9)


def test_vanilla_never_touches_spherical_machinery(monkeypatch):
    calls = {"normalize_rows": 0, "arc_loss": 0, "apply_bound": 0}

    def counting(mod, name):
        orig = getattr(mod, name)

        def wrapper(*a, **k):
            calls[name] += 1
            return orig(*a, **k)

        monkeypatch.setattr(mod, name, wrapper)

    counting(quantizer, "normalize_rows")
    counting(losses, "arc_loss")
    counting(cbm, "apply_bound")
    train(tiny(variant="vanilla", epochs=1))
    assert calls == {"normalize_rows": 0, "arc_loss": 0, "apply_bound": 0}
    train(tiny(variant="full", epochs=1))
    assert all(v > 0 for v in calls.values())


@pytest.mark.parametrize("variant,mode", [("full", "exponential"), ("fixed-bound", "fixed-one"), ("bbnr-only", "exponential")])
def test_ball_invariant_and_logged_schedules(variant, mode):
    cfg = tiny(variant=variant, alpha=0.05, epochs=3)
    seen = []

    def probe(state, b):
        t = state.step - 1
        assert b.M_t == cbm.norm_bound(t, cfg.alpha, mode)
        if b.gamma_t is not None:
            assert b.gamma_t == losses.gamma_schedule(t, cfg.gamma0, cfg.lam)
        seen.append(np.linalg.norm(state.codebook.entries, axis=1).max() / b.M_t)

    train(cfg, on_step=probe)
    assert len(seen) == 9 and max(seen) <= 1 + 1e-6


def test_nan_aborts_with_dump(tmp_path):
    state = init_state(tiny(out_dir=str(tmp_path)))
    state.model.params["dec_b2"][0] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_step(state, np.full((2, 8, 8), 0.5))
    assert (tmp_path / "diverged-step0.json").exists()


def test_checkpoint_round_trip(tmp_path):
    res = train(tiny(variant="full"))
    path = str(tmp_path / "a.avqc")
    save_checkpoint(res.state, path)
    back = load_checkpoint(path)
    assert back.step == res.state.step and back.cfg == res.state.cfg
    assert np.array_equal(back.codebook.entries, res.state.codebook.entries)
    for k, v in res.state.model.params.items():
        assert np.array_equal(back.model.params[k], v)
    for k in res.state.adam.m:
        assert np.array_equal(back.adam.m[k], res.state.adam.m[k])
        assert np.array_equal(back.adam.v[k], res.state.adam.v[k])
    path2 = str(tmp_path / "b.avqc")
    save_checkpoint(back, path2)
    assert open(path, "rb").read() == open(path2, "rb").read()


def test_checkpoint_rejects_damage(tmp_path):
    path = tmp_path / "a.avqc"
    save_checkpoint(init_state(tiny()), str(path))
    raw = path.read_bytes()
    assert raw[:4] == b"AVQC" and raw[4:8] == b"\x01\x00\x00\x00"
    (tmp_path / "magic").write_bytes(b"XVQC" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(str(tmp_path / "magic"))
    (tmp_path / "version").write_bytes(raw[:4] + b"\x02\x00\x00\x00" + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(str(tmp_path / "version"))
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(str(tmp_path / "short"))
    (tmp_path / "long").write_bytes(raw + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(str(tmp_path / "long"))


@pytest.mark.parametrize("variant", ["vanilla", "full"])
def test_resume_is_bit_identical(tmp_path, variant):
    cfg = tiny(variant=variant, epochs=2)
    straight = train(cfg).state
    half = train(cfg, max_steps=3).state
    save_checkpoint(half, str(tmp_path / "mid.avqc"))
    resumed = train(cfg, state=load_checkpoint(str(tmp_path / "mid.avqc"))).state
    assert resumed.step == straight.step == 6
    assert np.array_equal(resumed.codebook.entries, straight.codebook.entries)
    for k in straight.model.params:
        assert np.array_equal(resumed.model.params[k], straight.model.params[k])


def test_csv_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    train(tiny(out_dir=str(a), eval_every=2))
    train(tiny(out_dir=str(b), eval_every=2))
    text = (a / "metrics.csv").read_text()
    assert text == (b / "metrics.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert sorted(os.listdir(a)) == ["epoch001.avqc", "epoch002.avqc", "final.avqc", "metrics.csv"]
    eval_lines = [ln for ln in lines[1:] if ln.split(",")[1] == ""]
    assert len(eval_lines) == 3  # steps 2 and 4, plus the final pass


def test_vanilla_csv_leaves_absent_terms_empty(tmp_path):
    train(tiny(variant="vanilla", out_dir=str(tmp_path), epochs=1))
    row = (tmp_path / "metrics.csv").read_text().splitlines()[1].split(",")
    named = dict(zip(CSV_HEADER, row))
    assert named["arc"] == "" and named["gamma"] == "" and named["M"] == ""
    assert float(named["total"]) > 0


def test_single_precision_runs():
    res = train(tiny(precision="single", epochs=1))
    assert res.state.codebook.entries.dtype == np.float32
    assert math.isfinite(res.report.psnr)


def test_evaluate_counts_one_pass():
    res = train(tiny(epochs=1))
    assert res.state.codebook.usage_counts.sum() == 10 * 4
