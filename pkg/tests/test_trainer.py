import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rehydil import tensor as T
from rehydil.chsnet import CHSNet, ModelConfig
from rehydil.data import generate_dataset, load_dataset
from rehydil.losses import intra_loss
from rehydil.tensor import Tensor
from rehydil.trainer import (Adam, ExperimentConfig, ProtocolError, ReplayBuffer, StagePlan,
                             load_run_models, populate_balanced_queue, retained_count, run_dil,
                             sample_batch_distinct_patients, select_replay_samples, train_stage,
                             warmup_multistep_lr)


def oracle_median(xs):
    s = sorted(xs)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def oracle_selection(losses, percent):
    mu = oracle_median(losses)
    keep = (len(losses) * int(percent * 1000)) // (100 * 1000)
    return sorted(range(len(losses)), key=lambda i: (abs(losses[i] - mu), i))[:keep]


def test_replay_examples():
    assert select_replay_samples([1, 2, 3, 4, 100], 20) == [2]
    assert select_replay_samples([5.0] * 7, 50) == [0, 1, 2]
    assert select_replay_samples([1, 3], 50) == [0]
    assert retained_count(100, 10) == 10
    assert retained_count(99, 10) == 9
    assert retained_count(30, 10) == 3  # exact: 30·0.1 = 2.9999… in floating point


def test_replay_errors():
    with pytest.raises(ValueError):
        select_replay_samples([], 10)
    with pytest.raises(ValueError):
        select_replay_samples([1.0], 0)
    with pytest.raises(ValueError):
        select_replay_samples([1.0, float("nan")], 50)


def test_replay_matches_oracle_on_random_vectors():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n = int(rng.integers(1, 60))
        if trial % 3 == 0:
            losses = rng.integers(0, 5, size=n).astype(float).tolist()  # heavy ties
        else:
            losses = rng.normal(size=n).tolist()
        percent = float(rng.choice([5, 10, 20, 25, 33, 50, 100]))
        assert select_replay_samples(losses, percent) == oracle_selection(losses, percent)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=40), st.integers(0, 2 ** 31 - 1))
def test_replay_permutation_invariance(losses, seed):
    perm = np.random.default_rng(seed).permutation(len(losses))
    picked = select_replay_samples(losses, 30)
    picked_p = select_replay_samples([losses[i] for i in perm], 30)
    assert len(picked) == len(picked_p)
    # same multiset of deviations; identical sets whenever deviations are distinct
    mu = oracle_median(losses)
    assert sorted(abs(losses[i] - mu) for i in picked) == sorted(abs(losses[perm[i]] - mu) for i in picked_p)


def test_scheduler_shape():
    lrs = [warmup_multistep_lr(s, 100, 1.0) for s in range(100)]
    assert lrs[:5] == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert lrs[39] == 1.0 and lrs[40] == 0.5
    assert lrs[59] == 0.5 and lrs[60] == 0.25
    assert lrs[80] == 0.125 and lrs[90] == 0.0625 and lrs[99] == 0.0625


def test_adam_zero_gradient_only_decays():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.01), rtol=0, atol=1e-15)
    q = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    Adam([q], lr=0.1, weight_decay=0.0).step()
    np.testing.assert_array_equal(q.data, [1.0, -2.0])


def test_coupled_decay_moves_unused_weights_by_lr():
    p = Tensor(np.array([0.3]), requires_grad=True)
    opt = Adam([p], lr=0.01, weight_decay=4e-4, decoupled=False)
    for _ in range(10):
        opt.step()
    # roughly one lr per step regardless of how small the decay coefficient is
    assert 0.3 - 10 * 0.01 <= p.data[0] <= 0.3 - 9 * 0.01


def test_plan_validation():
    with pytest.raises(ValueError):
        StagePlan(use_replay=False, use_tac=True)
    with pytest.raises(ValueError):
        StagePlan(modality_order=("T1", "T1"))
    with pytest.raises(ValueError):
        StagePlan(similarity="l2")
    assert StagePlan().omega_schedule == (0.0, 1.0, 1.0, 1.0)


def test_config_round_trip():
    cfg = ExperimentConfig(ModelConfig(cph_stages=(3, 4, 5)), StagePlan(alpha=0.6, beta=1.6, seed=3))
    back = ExperimentConfig.from_dict(json.loads(cfg.dumps()))
    assert back.to_dict() == cfg.to_dict()
    d = cfg.to_dict()
    d["plan"]["bogus"] = 1
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(d)


def test_distinct_patient_batches():
    rng = np.random.default_rng(0)
    patients = [f"P{i % 12}" for i in range(60)]
    for _ in range(50):
        pos = sample_batch_distinct_patients(patients, 8, rng)
        assert len({patients[p] for p in pos}) == 8
    exact = sample_batch_distinct_patients(patients[:12], 12, rng)
    assert sorted(patients[p] for p in exact) == sorted(patients[:12])
    with pytest.raises(ValueError, match="reduce batch_size"):
        sample_batch_distinct_patients(patients, 13, rng)


def test_distinct_patient_inclusion_is_uniform():
    rng = np.random.default_rng(1)
    n_pat, B, draws = 20, 8, 10_000
    patients = np.repeat([f"P{i:02d}" for i in range(n_pat)], 5)
    counts = {}
    for _ in range(draws):
        for p in sample_batch_distinct_patients(patients, B, rng):
            counts[patients[p]] = counts.get(patients[p], 0) + 1
    q = B / n_pat
    sigma = math.sqrt(draws * q * (1 - q))
    for c in counts.values():
        assert abs(c - draws * q) <= 3 * sigma


# -- stage-level behaviour on a tiny dataset --------------------------------

TINY_MODEL = dict(depth=3, base_channels=4, image_size=16, cph_stages=(3,))


@pytest.fixture(scope="module")
def tiny_ds(tmp_path_factory):
    root = generate_dataset(tmp_path_factory.mktemp("tiny"), seed=4, num_patients=12, slices_per_patient=4,
                            image_size=16, depth=3)
    return load_dataset(root)


def _plan(**kw):
    base = dict(modality_order=("T1", "T2"), epochs=1, batch_size=4, lr=1e-3, seed=0)
    base.update(kw)
    return StagePlan(**base)


def test_balanced_queue_contract(tiny_ds):
    rng = np.random.default_rng(0)
    model = CHSNet(ModelConfig(**TINY_MODEL))
    prev = model.copy()
    idx_all = tiny_ds.indices("train")
    for trial in range(20):
        B = int(rng.integers(2, 6))
        r_size = int(rng.integers(1, 12))
        buf = ReplayBuffer(10.0)
        buf.extend(1, tiny_ds, idx_all[:r_size * 10], list(rng.normal(size=r_size * 10)))
        assert len(buf) == r_size
        patients = [tiny_ds.records[i]["patient_id"] for i in idx_all]
        batch = [idx_all[p] for p in sample_batch_distinct_patients(patients, B, rng)]
        x, _ = tiny_ds.batch(batch)
        pred = model(Tensor(x))
        q = populate_balanced_queue(buf, tiny_ds, prev, pred, batch, B, np.random.default_rng(trial))
        S = min(B, r_size)
        assert q.sample_size == S and len(q) == 2 * S
        assert len(q.replay) == len(q.current) == S
        assert all(not e.probs.requires_grad for e in q.replay)
        assert all(e.probs.requires_grad for e in q.current)
        assert all(0.0 <= e.probs.data.min() and e.probs.data.max() <= 1.0 for e in q.replay + q.current)


def test_queue_draw_is_seeded(tiny_ds):
    model = CHSNet(ModelConfig(**TINY_MODEL))
    idx = tiny_ds.indices("train", "T1")
    buf = ReplayBuffer(10.0)
    buf.extend(1, tiny_ds, idx, list(np.arange(len(idx), dtype=float)))
    batch = idx[:4]
    pred = model(Tensor(tiny_ds.batch(batch)[0]))
    a = populate_balanced_queue(buf, tiny_ds, model, pred, batch, 4, np.random.default_rng(7))
    b = populate_balanced_queue(buf, tiny_ds, model, pred, batch, 4, np.random.default_rng(7))
    assert [e.patient for e in a.replay] == [e.patient for e in b.replay]
    assert a.current_positions == b.current_positions
    with pytest.raises(ProtocolError):
        populate_balanced_queue(ReplayBuffer(10.0), tiny_ds, model, pred, batch, 4, np.random.default_rng(0))


def test_stage_one_total_equals_intra(tiny_ds):
    model = CHSNet(ModelConfig(**TINY_MODEL))
    res = train_stage(0, _plan(), tiny_ds, model, None)
    assert all(r["L_total"] == r["L_intra"] and r["L_TAC"] == 0.0 for r in res.records)
    assert len(res.per_sample_losses) == len(res.stage_indices)


def test_buffer_size_law(tiny_ds):
    buf = ReplayBuffer(10.0)
    sizes = []
    for stage, mod in enumerate(("T1", "T2", "FLAIR", "T1CE"), start=1):
        idx = tiny_ds.indices("train", mod)[: 20 + 7 * stage]
        buf.extend(stage, tiny_ds, idx, list(np.random.default_rng(stage).normal(size=len(idx))))
        sizes.append(len(idx))
        assert len(buf) == sum(math.floor(n * 10 / 100) for n in sizes) == buf.capacity


def test_first_stage_of_100_keeps_10(tiny_ds):
    buf = ReplayBuffer(10.0)
    idx = tiny_ds.indices("train")[:100]
    buf.extend(1, tiny_ds, idx, list(np.linspace(0, 1, 100)))
    assert len(buf) == 10


def test_replay_and_tac_off_equals_no_buffer_control(tiny_ds):
    plan = _plan(use_replay=False, use_tac=False)
    cfg = ExperimentConfig(ModelConfig(**TINY_MODEL), plan)
    run = run_dil(cfg, tiny_ds)
    # control: plain sequential fine-tuning with no buffer object at all
    model = CHSNet(ModelConfig(**TINY_MODEL))
    prints = []
    for stage in range(2):
        model = model if stage == 0 else model.copy()
        train_stage(stage, plan, tiny_ds, model, None)
        prints.append(model.fingerprint())
    assert [m.fingerprint() for m in run.stage_models] == prints
    assert len(run.replay) == 0


def test_tac_requires_previous_model(tiny_ds):
    model = CHSNet(ModelConfig(**TINY_MODEL))
    buf = ReplayBuffer(10.0)
    idx = tiny_ds.indices("train", "T1")
    buf.extend(1, tiny_ds, idx, list(np.zeros(len(idx))))
    with pytest.raises(ProtocolError):
        train_stage(1, _plan(), tiny_ds, model, buf, None)
    with pytest.raises(ProtocolError):
        train_stage(1, _plan(), tiny_ds, model, ReplayBuffer(10.0), model.copy())


def test_loss_decreases_on_fixed_batch(tiny_ds):
    model = CHSNet(ModelConfig(**TINY_MODEL, seed=2))
    idx = [tiny_ds.indices("train", "FLAIR")[k] for k in (1, 5, 9, 13)]
    x, y = tiny_ds.batch(idx)
    opt = Adam(model.parameters(), lr=1e-3, weight_decay=4e-4)
    losses = []
    for _ in range(50):
        opt.zero_grad()
        loss = intra_loss(model(Tensor(x)), y)
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert losses[-1] < losses[0]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_run_directory_layout_and_reload(tiny_ds, tmp_path):
    cfg = ExperimentConfig(ModelConfig(**TINY_MODEL), _plan())
    run = run_dil(cfg, tiny_ds, tmp_path / "run")
    names = sorted(p.name for p in (tmp_path / "run").iterdir())
    assert names == ["config.json", "metrics.jsonl", "replay.json", "stage1_T1.bin", "stage1_T1.json",
                     "stage2_T2.bin", "stage2_T2.json"]
    rows = [json.loads(line) for line in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == len(run.records)
    assert set(rows[0]) == {"stage", "modality", "epoch", "step", "lr", "L_intra", "L_TAC", "L_total"}
    assert any(r["L_TAC"] > 0 for r in rows if r["stage"] == 2)
    replay = json.loads((tmp_path / "run" / "replay.json").read_text())
    assert len(replay["entries"]) == replay["capacity"] == len(run.replay)
    cfg2, models = load_run_models(tmp_path / "run")
    assert cfg2.to_dict() == cfg.to_dict()
    assert [m.fingerprint() for m in models] == [m.fingerprint() for m in run.stage_models]


def test_nan_loss_aborts_with_diagnostics(tiny_ds):
    model = CHSNet(ModelConfig(**TINY_MODEL))
    model.params["head.b"].data[:] = np.nan
    from rehydil.trainer import TrainingDivergedError
    with pytest.raises((TrainingDivergedError, ValueError)) as exc:
        train_stage(0, _plan(), tiny_ds, model, None)
    assert "non-finite" in str(exc.value) or "non-finite" in repr(exc.value)
