"""Stage-by-stage domain-incremental training with replay and the balanced queue."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .chsnet import CHSNet, ModelConfig, load_stage_weights
from .data import MODALITIES, SegmentationDataset
from .losses import PredictionEntry, TverskyParams, intra_loss, tac_loss, total_loss
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass
class StagePlan:
    modality_order: tuple[str, ...] = MODALITIES
    omega_schedule: tuple[float, ...] | None = None
    epochs: int = 3
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 4e-4
    decoupled_weight_decay: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_fraction: float = 0.05
    milestones: tuple[float, ...] = (0.4, 0.6, 0.8, 0.9)
    lr_decay: float = 0.5
    retention_percent: float = 10.0
    use_replay: bool = True
    use_tac: bool = True
    replay_in_intra: bool = True
    similarity: str = "tversky"
    alpha: float = 0.7
    beta: float = 1.5
    gamma: float = 1.2
    tau: float = 1.0
    epsilon: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        self.modality_order = tuple(self.modality_order)
        self.milestones = tuple(self.milestones)
        if self.omega_schedule is None:
            self.omega_schedule = tuple(0.0 if i == 0 else 1.0 for i in range(len(self.modality_order)))
        self.omega_schedule = tuple(float(w) for w in self.omega_schedule)
        if len(self.omega_schedule) != len(self.modality_order):
            raise ValueError("one omega per stage required")
        if len(set(self.modality_order)) != len(self.modality_order):
            raise ValueError("each modality may appear in only one stage")
        if self.use_tac and not self.use_replay:
            raise ValueError("the contrastive term draws from the replay buffer; use_tac requires use_replay")
        if self.similarity not in ("tversky", "cosine"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.retention_percent <= 0:
            raise ValueError("retention_percent must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    @property
    def tversky(self) -> TverskyParams:
        return TverskyParams(self.alpha, self.beta, self.epsilon)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: StagePlan = field(default_factory=StagePlan)

    def to_dict(self) -> dict:
        plan = asdict(self.plan)
        plan["modality_order"] = list(plan["modality_order"])
        plan["omega_schedule"] = list(plan["omega_schedule"])
        plan["milestones"] = list(plan["milestones"])
        return {"model": self.model.to_dict(), "plan": plan}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known_m = set(ModelConfig.__dataclass_fields__)
        known_p = set(StagePlan.__dataclass_fields__)
        m = d.get("model", {})
        p = d.get("plan", {})
        unknown = (set(m) - known_m) | (set(p) - known_p) | (set(d) - {"model", "plan"})
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(ModelConfig.from_dict(m) if m else ModelConfig(), StagePlan(**p))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class Adam:
    """Adam with weight decay, either decoupled (shrink the weights directly,
    the default) or coupled (L2 folded into the gradient).

    Coupled decay under Adam's per-coordinate normalisation moves any weight
    that receives no data gradient by ~lr per step toward zero; in
    domain-incremental training that wipes the input filters of modalities
    not seen yet.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, decoupled: bool = True):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.weight_decay and self.decoupled:
                p.data *= 1.0 - lr * self.weight_decay
            elif self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def warmup_multistep_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.05,
                        milestones: Sequence[float] = (0.4, 0.6, 0.8, 0.9), decay: float = 0.5) -> float:
    """Linear warm-up, then ×decay at each milestone (fractions of the stage's run)."""
    warmup = max(1, math.ceil(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = step / total_steps
    k = sum(1 for m in milestones if progress >= m)
    return base_lr * decay ** k


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------

def retained_count(stage_size: int, retention_percent: float) -> int:
    """floor(|D_i| · P / 100), computed exactly."""
    return int(Fraction(stage_size) * Fraction(str(retention_percent)) / 100)


def select_replay_samples(losses: Sequence[float], retention_percent: float) -> list[int]:
    """Positions of the samples whose loss is closest to the median.

    Ranked by |loss - median| ascending, ties to the lower position; the
    first floor(n·P/100) positions are returned in rank order.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("cannot select replay samples from an empty stage")
    if retention_percent <= 0:
        raise ValueError("retention_percent must be positive")
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    mu = np.median(losses)
    dev = np.abs(losses - mu)
    order = np.argsort(dev, kind="stable")
    return [int(i) for i in order[: retained_count(losses.size, retention_percent)]]


@dataclass
class ReplayEntry:
    sample_index: int
    sample_id: str
    patient: str
    modality: str
    loss: float
    stage: int


@dataclass
class ReplayBuffer:
    retention_percent: float = 10.0
    entries: list[ReplayEntry] = field(default_factory=list)
    stage_sizes: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def capacity(self) -> int:
        return sum(retained_count(n, self.retention_percent) for n in self.stage_sizes)

    def extend(self, stage: int, dataset: SegmentationDataset, stage_indices: Sequence[int],
               losses: Sequence[float]) -> list[ReplayEntry]:
        picked = select_replay_samples(losses, self.retention_percent)
        new = []
        for pos in picked:
            i = stage_indices[pos]
            r = dataset.records[i]
            new.append(ReplayEntry(i, r["sample_id"], r["patient_id"], r["modality_id"], float(losses[pos]), stage))
        self.stage_sizes.append(len(stage_indices))
        self.entries.extend(new)
        return new

    @property
    def sample_indices(self) -> list[int]:
        return [e.sample_index for e in self.entries]

    def manifest(self) -> dict:
        return {"retention_percent": self.retention_percent, "capacity": self.capacity,
                "stage_sizes": list(self.stage_sizes), "entries": [asdict(e) for e in self.entries]}


# ---------------------------------------------------------------------------
# sampling and the balanced queue
# ---------------------------------------------------------------------------

def sample_batch_distinct_patients(patients: Sequence[str], batch_size: int,
                                   rng: np.random.Generator) -> list[int]:
    """Positions of ``batch_size`` samples, one each from distinct random patients."""
    patients = np.asarray(patients)
    unique = np.unique(patients)
    if unique.size < batch_size:
        raise ValueError(f"only {unique.size} distinct patients available for a batch of {batch_size}; "
                         f"reduce batch_size to at most {unique.size}")
    chosen = rng.choice(unique, size=batch_size, replace=False)
    out = []
    for pid in chosen:
        cand = np.flatnonzero(patients == pid)
        out.append(int(cand[rng.integers(cand.size)]))
    return out


@dataclass
class BalancedQueue:
    replay: list[PredictionEntry]
    current: list[PredictionEntry]
    sample_size: int
    current_positions: list[int] = field(default_factory=list)  # batch position of each current entry

    def __len__(self) -> int:
        return len(self.replay) + len(self.current)


def populate_balanced_queue(replay: ReplayBuffer, dataset: SegmentationDataset, prev_model: CHSNet,
                            current_pred: Tensor, current_indices: Sequence[int], batch_size: int,
                            rng: np.random.Generator, current_modality: str | None = None) -> BalancedQueue:
    """Draw S = min(B, |R|) previous-model replay predictions and S current predictions.

    Replay predictions are computed without gradient tracking.  Current
    predictions keep their graph; samples of the current modality are
    preferred when the batch also carries replayed samples.
    """
    if len(replay) == 0:
        raise ProtocolError("replay buffer is empty; the balanced queue needs a populated buffer from stage 1")
    S = min(batch_size, len(replay), len(current_indices))
    pick = rng.choice(len(replay), size=S, replace=False)
    r_idx = [replay.entries[k].sample_index for k in pick]
    x_r, _ = dataset.batch(r_idx)
    with T.no_grad():
        p_r = prev_model.forward(Tensor(x_r)).data
    replay_entries = [
        PredictionEntry(Tensor(np.clip(p_r[k], 0.0, 1.0)), dataset.records[i]["patient_id"],
                        dataset.records[i]["modality_id"], "previous_stage")
        for k, i in enumerate(r_idx)
    ]

    positions = np.arange(len(current_indices))
    if current_modality is not None:
        is_cur = np.array([dataset.records[i]["modality_id"] == current_modality for i in current_indices])
        first = rng.permutation(positions[is_cur])
        rest = rng.permutation(positions[~is_cur])
        chosen = np.concatenate([first, rest])[:S]
    else:
        chosen = rng.choice(positions, size=S, replace=False)
    current_entries = []
    for pos in chosen:
        i = current_indices[pos]
        probs = T.clamp(T.reshape(T.take(current_pred, [int(pos)], axis=0), current_pred.shape[1:]), 0.0, 1.0)
        current_entries.append(PredictionEntry(probs, dataset.records[i]["patient_id"],
                                               dataset.records[i]["modality_id"], "current_stage"))
    return BalancedQueue(replay_entries, current_entries, S, [int(c) for c in chosen])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    model: CHSNet
    stage_indices: list[int]
    per_sample_losses: list[float]
    records: list[dict]


def _rng(plan: StagePlan, stage: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([plan.seed, stage, stream])


def stage_pool(dataset: SegmentationDataset, plan: StagePlan, stage: int,
               replay: ReplayBuffer | None) -> tuple[list[int], list[int]]:
    """(current-modality train indices, training pool including replayed samples)."""
    current = dataset.indices("train", plan.modality_order[stage])
    pool = list(current)
    if stage > 0 and plan.use_replay and plan.replay_in_intra and replay is not None:
        pool += replay.sample_indices
    return current, pool


def per_sample_losses(model: CHSNet, dataset: SegmentationDataset, indices: Sequence[int], plan: StagePlan,
                      stage: int, replay: ReplayBuffer | None, prev_model: CHSNet | None) -> list[float]:
    """End-of-stage loss per sample in one deterministic pass (intra, plus ω·TAC after stage 1)."""
    omega = plan.omega_schedule[stage]
    use_tac = stage > 0 and plan.use_tac and omega > 0 and replay is not None and len(replay) > 0
    chunk = min(plan.batch_size, len(replay)) if use_tac else plan.batch_size
    rng = _rng(plan, stage, 3)
    # slice-major order so each chunk spans several patients
    order = sorted(range(len(indices)),
                   key=lambda k: (dataset.records[indices[k]]["slice"], dataset.records[indices[k]]["patient_id"]))
    losses = np.zeros(len(indices))
    with T.no_grad():
        for s in range(0, len(order), chunk):
            pos = order[s:s + chunk]
            idx = [indices[k] for k in pos]
            x, y = dataset.batch(idx)
            pred = model.forward(Tensor(x))
            intra = intra_loss(pred, y, plan.tversky, plan.gamma, reduce="none").data
            tac = np.zeros(len(idx))
            if use_tac and len(idx) > 1:
                q = populate_balanced_queue(replay, dataset, prev_model, pred, idx, len(idx), rng)
                per = tac_loss(q.replay, q.current, plan.tversky, plan.tau, plan.similarity, per_entry=True)
                for k, p in enumerate(q.current_positions):
                    tac[p] = per[k]
            losses[pos] = omega * tac + intra
    return losses.tolist()


def train_stage(stage: int, plan: StagePlan, dataset: SegmentationDataset, model: CHSNet,
                replay: ReplayBuffer | None, prev_model: CHSNet | None = None) -> StageResult:
    """Train one modality stage in place on ``model`` and score its samples for replay."""
    if stage > 0 and plan.use_replay and (replay is None or len(replay) == 0):
        raise ProtocolError(f"stage {stage + 1} needs a populated replay buffer")
    if stage > 0 and plan.use_tac and prev_model is None:
        raise ProtocolError("the contrastive term needs the previous-stage model")
    modality = plan.modality_order[stage]
    omega = plan.omega_schedule[stage]
    current, pool = stage_pool(dataset, plan, stage, replay)
    if not current:
        raise ValueError(f"no training samples for modality {modality}")
    pool_patients = [dataset.records[i]["patient_id"] for i in pool]
    steps_per_epoch = max(1, len(pool) // plan.batch_size)
    total_steps = steps_per_epoch * plan.epochs
    opt = Adam(model.parameters(), plan.lr, (plan.adam_beta1, plan.adam_beta2), plan.adam_eps,
               plan.weight_decay, plan.decoupled_weight_decay)
    batch_rng = _rng(plan, stage, 1)
    queue_rng = _rng(plan, stage, 2)
    use_tac = stage > 0 and plan.use_tac
    records = []
    step = 0
    for epoch in range(plan.epochs):
        for _ in range(steps_per_epoch):
            lr = warmup_multistep_lr(step, total_steps, plan.lr, plan.warmup_fraction, plan.milestones, plan.lr_decay)
            pos = sample_batch_distinct_patients(pool_patients, plan.batch_size, batch_rng)
            idx = [pool[p] for p in pos]
            x, y = dataset.batch(idx)
            opt.zero_grad()
            pred = model.forward(Tensor(x))
            intra = intra_loss(pred, y, plan.tversky, plan.gamma)
            tac = None
            if use_tac:
                q = populate_balanced_queue(replay, dataset, prev_model, pred, idx, plan.batch_size,
                                            queue_rng, current_modality=modality)
                tac = tac_loss(q.replay, q.current, plan.tversky, plan.tau, plan.similarity).loss
            loss = total_loss(tac, intra, omega) if tac is not None else intra
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at stage {stage + 1} epoch {epoch} step {step} lr {lr:.3e}; "
                    f"batch samples {[dataset.records[i]['sample_id'] for i in idx]}")
            loss.backward()
            opt.step(lr)
            records.append({"stage": stage + 1, "modality": modality, "epoch": epoch, "step": step, "lr": lr,
                            "L_intra": intra.item(), "L_TAC": 0.0 if tac is None else tac.item(),
                            "L_total": value})
            step += 1
    losses = per_sample_losses(model, dataset, current, plan, stage, replay, prev_model)
    return StageResult(model, current, losses, records)


@dataclass
class DilRun:
    config: ExperimentConfig
    stage_models: list[CHSNet]
    replay: ReplayBuffer
    records: list[dict]


def run_dil(config: ExperimentConfig, dataset: SegmentationDataset, run_dir=None) -> DilRun:
    """Train every stage in order; optionally persist the run directory."""
    plan = config.plan
    model = CHSNet(config.model)
    replay = ReplayBuffer(plan.retention_percent)
    stage_models: list[CHSNet] = []
    records: list[dict] = []
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.dumps())
    prev = None
    for stage, modality in enumerate(plan.modality_order):
        current = model if stage == 0 else load_stage_weights(prev, config.model)
        log.info("stage %d (%s): training", stage + 1, modality)
        res = train_stage(stage, plan, dataset, current, replay if stage > 0 else None, prev)
        if plan.use_replay:
            replay.extend(stage + 1, dataset, res.stage_indices, res.per_sample_losses)
        records.extend(res.records)
        stage_models.append(res.model)
        prev = res.model
        if out is not None:
            res.model.save(out / f"stage{stage + 1}_{modality}")
    if out is not None:
        with open(out / "metrics.jsonl", "w") as f:
            for r in records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        (out / "replay.json").write_text(json.dumps(replay.manifest(), indent=1, sort_keys=True) + "\n")
    return DilRun(config, stage_models, replay, records)


def load_run_models(run_dir) -> tuple[ExperimentConfig, list[CHSNet]]:
    run_dir = Path(run_dir)
    config = ExperimentConfig.load(run_dir / "config.json")
    models = []
    for stage, modality in enumerate(config.plan.modality_order):
        ckpt = run_dir / f"stage{stage + 1}_{modality}"
        if not ckpt.with_suffix(".json").exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}.json")
        models.append(CHSNet.load(ckpt))
    return config, models
