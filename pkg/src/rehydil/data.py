"""Synthetic multi-patient, multi-modality nested-region segmentation data.

Each patient carries three nested ellipsoidal regions (WT ⊇ TC ⊇ ET
analogues) sliced along z.  Each modality renders the four tissue layers
(background, WT-only, TC-only, ET) with its own contrast profile, so no
single modality exposes every region equally well.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes

MODALITIES = ("T1", "T2", "FLAIR", "T1CE")
REGIONS = ("WT", "TC", "ET")
DATASET_VERSION = 1

# layer intensities: background, WT\TC, TC\ET, ET
CONTRAST = {
    "T1": (0.20, 0.35, 0.60, 0.30),
    "T2": (0.20, 0.45, 0.85, 0.70),
    "FLAIR": (0.15, 0.85, 0.80, 0.75),
    "T1CE": (0.20, 0.25, 0.40, 0.95),
}
# region each modality exposes best (largest mean gap to background)
DESIGNED_REGION = {"T1": "TC", "T2": "TC", "FLAIR": "WT", "T1CE": "ET"}
NOISE_SIGMA = 0.05
# whole-tumour semi-axes as a fraction of the image side
LESION_RADIUS = (0.18, 0.30)
# inner-region semi-axes as a fraction of the enclosing region's smaller semi-axis
TC_SCALE = (0.6, 0.75)
ET_SCALE = (0.55, 0.7)


class DatasetError(RuntimeError):
    pass


@dataclass
class PatientRecord:
    patient_id: str
    split: str
    latent: dict


def _ellipse(shape: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:shape, 0:shape].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return (u * u + v * v) <= 1.0


def _sample_latent(rng: np.random.Generator, size: int) -> dict:
    # lesions placed anywhere in the field, so location alone predicts little
    wt_r = rng.uniform(*LESION_RADIUS, size=2) * size
    margin = float(wt_r.max()) + 1.0
    wt = dict(cy=rng.uniform(margin, size - 1 - margin), cx=rng.uniform(margin, size - 1 - margin),
              ry=float(wt_r[0]), rx=float(wt_r[1]), theta=float(rng.uniform(0, np.pi)))
    tc_scale = rng.uniform(*TC_SCALE, size=2)
    tc = dict(cy=wt["cy"] + rng.uniform(-0.15, 0.15) * wt["ry"], cx=wt["cx"] + rng.uniform(-0.15, 0.15) * wt["rx"],
              ry=float(tc_scale[0] * min(wt["ry"], wt["rx"])), rx=float(tc_scale[1] * min(wt["ry"], wt["rx"])),
              theta=float(rng.uniform(0, np.pi)))
    et_scale = rng.uniform(*ET_SCALE, size=2)
    et = dict(cy=tc["cy"] + rng.uniform(-0.15, 0.15) * tc["ry"], cx=tc["cx"] + rng.uniform(-0.15, 0.15) * tc["rx"],
              ry=float(et_scale[0] * min(tc["ry"], tc["rx"])), rx=float(et_scale[1] * min(tc["ry"], tc["rx"])),
              theta=float(rng.uniform(0, np.pi)))
    return {"WT": {k: float(v) for k, v in wt.items()},
            "TC": {k: float(v) for k, v in tc.items()},
            "ET": {k: float(v) for k, v in et.items()},
            "offset": float(rng.uniform(-0.03, 0.03))}


def render_masks(latent: dict, size: int, z: float) -> np.ndarray:
    """3×H×W nested binary masks at relative slice position z ∈ [-1, 1]."""
    scale = np.sqrt(1.0 - 0.7 * z * z)
    masks = []
    prev = None
    for region in REGIONS:
        e = latent[region]
        ry = max(e["ry"] * scale, 1.6)
        rx = max(e["rx"] * scale, 1.6)
        m = _ellipse(size, e["cy"], e["cx"], ry, rx, e["theta"])
        if prev is not None:
            m &= prev
        masks.append(m)
        prev = m
    return np.stack(masks).astype(np.float64)


def render_modality(masks: np.ndarray, modality: str, rng: np.random.Generator, offset: float = 0.0) -> np.ndarray:
    bg, wt, tc, et = CONTRAST[modality]
    img = np.full(masks.shape[1:], bg)
    img[masks[0] > 0] = wt
    img[masks[1] > 0] = tc
    img[masks[2] > 0] = et
    img = img + offset + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    return n_train, n_val, n - n_train - n_val


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def generate_dataset(path, seed: int = 0, num_patients: int = 40, slices_per_patient: int = 16,
                     image_size: int = 32, split_ratios: Sequence[float] = (0.8, 0.1, 0.1),
                     depth: int = 5) -> Path:
    """Write a dataset directory; the same arguments always give identical bytes."""
    if image_size % (2 ** (depth - 1)):
        raise ValueError(f"image_size {image_size} not divisible by 2^{depth - 1}")
    counts = _split_counts(num_patients, split_ratios)
    root = Path(path)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {root}: {exc}") from exc

    rng = np.random.default_rng(seed)
    order = rng.permutation(num_patients)
    split_of = {}
    for rank, p in enumerate(order):
        split_of[int(p)] = "train" if rank < counts[0] else ("val" if rank < counts[0] + counts[1] else "test")

    patients = []
    samples = []
    for p in range(num_patients):
        pid = f"P{p:03d}"
        prng = np.random.default_rng([seed, p])
        latent = _sample_latent(prng, image_size)
        patients.append({"patient_id": pid, "split": split_of[p], "latent": latent})
        for z_idx in range(slices_per_patient):
            z = (z_idx - (slices_per_patient - 1) / 2.0) / (slices_per_patient / 2.0)
            masks = render_masks(latent, image_size, z)
            mask_rel = f"masks/{pid}_{z_idx:02d}.bin"
            mask_bytes = tensor_to_bytes(masks)
            (root / mask_rel).write_bytes(mask_bytes)
            for m_idx, mod in enumerate(MODALITIES):
                nrng = np.random.default_rng([seed, p, z_idx, m_idx])
                img = render_modality(masks, mod, nrng, latent["offset"])[None]
                img_rel = f"images/{pid}_{z_idx:02d}_{mod}.bin"
                img_bytes = tensor_to_bytes(img)
                (root / img_rel).write_bytes(img_bytes)
                samples.append({
                    "sample_id": f"{pid}_{z_idx:02d}_{mod}",
                    "patient_id": pid,
                    "modality_id": mod,
                    "slice": z_idx,
                    "split": split_of[p],
                    "image": img_rel,
                    "mask": mask_rel,
                    "mask_voxels": [int(v) for v in masks.reshape(3, -1).sum(axis=1)],
                    "image_sha256": _sha(img_bytes),
                    "mask_sha256": _sha(mask_bytes),
                })
    manifest = {
        "version": DATASET_VERSION,
        "seed": seed,
        "image_size": image_size,
        "image_shape": [1, image_size, image_size],
        "mask_shape": [len(REGIONS), image_size, image_size],
        "slices_per_patient": slices_per_patient,
        "split_ratios": list(split_ratios),
        "regions": list(REGIONS),
        "modalities": [{"id": m, "index": i, "contrast": list(CONTRAST[m]), "designed_region": DESIGNED_REGION[m]}
                       for i, m in enumerate(MODALITIES)],
        "noise_sigma": NOISE_SIGMA,
        "patients": patients,
        "samples": samples,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def _read_checked(root: Path, rel: str, sha: str) -> np.ndarray:
    f = root / rel
    if not f.exists():
        raise DatasetError(f"missing file {f}")
    raw = f.read_bytes()
    if _sha(raw) != sha:
        raise DatasetError(f"checksum mismatch for {f}")
    arr, _ = tensor_from_bytes(raw)
    return arr


class SegmentationDataset:
    """In-memory view of a generated dataset directory."""

    def __init__(self, path):
        self.root = Path(path)
        mf = self.root / "manifest.json"
        if not mf.exists():
            raise DatasetError(f"no manifest at {mf}")
        self.manifest = json.loads(mf.read_text())
        if self.manifest.get("version") != DATASET_VERSION:
            raise DatasetError(f"unsupported dataset version {self.manifest.get('version')}")
        self.modalities = [m["id"] for m in self.manifest["modalities"]]
        self.image_size = self.manifest["image_size"]
        self.records = self.manifest["samples"]
        self.index = {r["sample_id"]: i for i, r in enumerate(self.records)}
        masks: dict[str, np.ndarray] = {}
        images = np.empty((len(self.records), self.image_size, self.image_size))
        for i, r in enumerate(self.records):
            img = _read_checked(self.root, r["image"], r["image_sha256"])
            if list(img.shape) != self.manifest["image_shape"]:
                raise DatasetError(f"bad image shape for {r['sample_id']}")
            images[i] = img[0]
            if r["mask"] not in masks:
                m = _read_checked(self.root, r["mask"], r["mask_sha256"])
                if list(m.shape) != self.manifest["mask_shape"]:
                    raise DatasetError(f"bad mask shape for {r['sample_id']}")
                masks[r["mask"]] = m
        self.images = images
        self._masks = masks
        self.patient_of = np.array([r["patient_id"] for r in self.records])
        self.modality_of = np.array([r["modality_id"] for r in self.records])
        self.split_of = np.array([r["split"] for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def mask(self, i: int) -> np.ndarray:
        return self._masks[self.records[i]["mask"]]

    def modality_index(self, modality: str) -> int:
        return self.modalities.index(modality)

    def indices(self, split: str | None = None, modality: str | None = None) -> list[int]:
        sel = np.ones(len(self.records), dtype=bool)
        if split is not None:
            sel &= self.split_of == split
        if modality is not None:
            sel &= self.modality_of == modality
        return [int(i) for i in np.flatnonzero(sel)]

    def encode(self, i: int) -> np.ndarray:
        """M×H×W input with only this sample's modality channel populated."""
        x = np.zeros((len(self.modalities), self.image_size, self.image_size))
        x[self.modality_index(self.records[i]["modality_id"])] = self.images[i]
        return x

    def batch(self, indices: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
        idx = list(indices)
        x = np.stack([self.encode(i) for i in idx])
        y = np.stack([self.mask(i) for i in idx])
        return x, y

    def multimodal_slices(self, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """All-modality stacks per (patient, slice): (n×M×H×W, n×3×H×W, patient ids).

        Ordered slice-major so consecutive rows come from different patients.
        """
        keys = sorted({(r["slice"], r["patient_id"]) for r in self.records if r["split"] == split})
        if not keys:
            raise DatasetError(f"split {split!r} is empty")
        by_key = {(r["slice"], r["patient_id"], r["modality_id"]): i for i, r in enumerate(self.records)}
        xs, ys, pids = [], [], []
        for z, pid in keys:
            x = np.zeros((len(self.modalities), self.image_size, self.image_size))
            for m_idx, mod in enumerate(self.modalities):
                i = by_key[(z, pid, mod)]
                x[m_idx] = self.images[i]
            xs.append(x)
            ys.append(self.mask(by_key[(z, pid, self.modalities[0])]))
            pids.append(pid)
        return np.stack(xs), np.stack(ys), pids


def load_dataset(path) -> SegmentationDataset:
    return SegmentationDataset(path)


def load_sample(dataset: SegmentationDataset, sample_id: str):
    """(image M×H×W, masks 3×H×W, patient id, modality id) for one sample."""
    if sample_id not in dataset.index:
        raise DatasetError(f"unknown sample {sample_id!r}")
    i = dataset.index[sample_id]
    r = dataset.records[i]
    return dataset.encode(i), dataset.mask(i), r["patient_id"], r["modality_id"]


def zero_modalities(image: np.ndarray, available: Iterable, modalities: Sequence[str] = MODALITIES) -> np.ndarray:
    """Zero every channel not in ``available`` (names or channel indices); works on M×H×W or B×M×H×W."""
    avail = set()
    for a in available:
        avail.add(modalities.index(a) if isinstance(a, str) else int(a))
    if not avail:
        raise ValueError("at least one modality must be available")
    out = np.array(image, dtype=np.float64, copy=True)
    axis = 0 if out.ndim == 3 else 1
    for c in range(out.shape[axis]):
        if c not in avail:
            if axis == 0:
                out[c] = 0.0
            else:
                out[:, c] = 0.0
    return out
