"""U-Net segmenter with cross-patient hypergraph layers on selected encoder stages."""
from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .hypergraph import Hypergraph, build_hypergraph, flatten_features, fuse, hgnn_propagate
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes

CHECKPOINT_FORMAT = "rehydil-checkpoint/1"


@dataclass
class ModelConfig:
    depth: int = 5
    base_channels: int = 8
    num_classes: int = 3
    num_modalities: int = 4
    cph_stages: tuple[int, ...] = (4, 5)
    image_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.cph_stages = tuple(sorted(int(s) for s in self.cph_stages))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        bad = [s for s in self.cph_stages if not 1 <= s <= self.depth]
        if bad:
            raise ValueError(f"cph_stages {bad} outside 1..{self.depth}")
        if self.image_size % (2 ** (self.depth - 1)):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{self.depth - 1}")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)

    def spatial(self, stage: int) -> int:
        return self.image_size // 2 ** (stage - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cph_stages"] = list(self.cph_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "cph_stages" in d:
            d["cph_stages"] = tuple(d["cph_stages"])
        return cls(**d)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name → shape map; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.num_modalities
    for s in range(1, config.depth + 1):
        c = config.channels(s)
        shapes[f"enc{s}.conv1.w"] = (c, c_in, 3, 3)
        shapes[f"enc{s}.conv1.b"] = (c,)
        shapes[f"enc{s}.conv2.w"] = (c, c, 3, 3)
        shapes[f"enc{s}.conv2.b"] = (c,)
        if s in config.cph_stages:
            shapes[f"cph{s}.edge_w"] = (config.spatial(s) ** 2,)
            shapes[f"cph{s}.fuse.w"] = (c, 2 * c, 1, 1)
            shapes[f"cph{s}.fuse.b"] = (c,)
        c_in = c
    for s in range(config.depth - 1, 0, -1):
        c = config.channels(s)
        shapes[f"dec{s}.conv1.w"] = (c, config.channels(s + 1) + c, 3, 3)
        shapes[f"dec{s}.conv1.b"] = (c,)
        shapes[f"dec{s}.conv2.w"] = (c, c, 3, 3)
        shapes[f"dec{s}.conv2.b"] = (c,)
    shapes["head.w"] = (config.num_classes, config.base_channels, 1, 1)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def init_parameters(config: ModelConfig) -> dict[str, Tensor]:
    """He-uniform conv weights, zero biases, unit hyperedge weights, identity-on-original fuse."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".edge_w"):
            data = np.ones(shape)
        elif name.endswith(".fuse.w"):
            # start as the projection onto the original branch; the
            # hypergraph half is learned from zero
            c = shape[0]
            data = np.zeros(shape)
            data[np.arange(c), c + np.arange(c), 0, 0] = 1.0
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


class CHSNet:
    """Segmentation network; ``forward`` maps B×M×H×W to B×K×H×W sigmoid maps."""

    def __init__(self, config: ModelConfig | None = None, params: dict[str, Tensor] | None = None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_parameters(self.config)
        expected = parameter_shapes(self.config)
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise ValueError("parameter set does not match the model config")

    # -- parameters -------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> CHSNet:
        """Deep copy: training the copy never touches this model."""
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return CHSNet(copy.deepcopy(self.config), params)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(tensor_to_bytes(p))
        return h.hexdigest()

    # -- forward ----------------------------------------------------------
    def _double_conv(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        x = T.relu(T.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]))
        return T.relu(T.conv2d(x, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"]))

    def _cph(self, fmap: Tensor, stage: int, graph: Hypergraph | None) -> tuple[Tensor, Hypergraph]:
        p = self.params
        vs = flatten_features(fmap)
        if graph is None:
            if fmap.shape[0] * fmap.shape[2] * fmap.shape[3] == 1:
                # one image at a 1×1 stage: the only hyperedge is the vertex itself
                graph = Hypergraph(np.ones((1, 1), dtype=np.int8), np.zeros(1, dtype=np.int64))
            else:
                graph = build_hypergraph(vs)
        B = fmap.shape[0]
        hw = fmap.shape[2] * fmap.shape[3]
        # one learnable weight per anchor position, shared across the batch
        edge_w = T.take(p[f"cph{stage}.edge_w"], np.tile(np.arange(hw), B))
        prop = hgnn_propagate(graph, vs, edge_w)
        return fuse(prop, fmap, vs, p[f"cph{stage}.fuse.w"], p[f"cph{stage}.fuse.b"]), graph

    def forward(self, x, graphs: dict[int, Hypergraph] | None = None,
                return_graphs: bool = False):
        """Run the network.

        ``graphs`` pins the hypergraph topology per CPH stage (used by
        finite-difference checks, where re-selecting neighbours under a
        perturbation would make the function discontinuous).
        """
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != cfg.num_modalities:
            raise T.ShapeError("CHSNet.forward", x.shape, detail=f"expected B×{cfg.num_modalities}×H×W")
        div = 2 ** (cfg.depth - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"spatial size {x.shape[2:]} not divisible by {div}")
        if cfg.cph_stages and x.shape[2] != cfg.image_size:
            raise ValueError(f"CPH edge weights are sized for {cfg.image_size}×{cfg.image_size} inputs")
        if cfg.cph_stages and x.shape[0] < 2:
            warnings.warn("batch of 1 with CPH enabled: hypergraph only links pixels of one image",
                          RuntimeWarning)
        used: dict[int, Hypergraph] = {}
        skips = []
        h = x
        for s in range(1, cfg.depth + 1):
            if s > 1:
                h = T.max_pool2d(h)
            h = self._double_conv(h, f"enc{s}")
            if s in cfg.cph_stages:
                h, used[s] = self._cph(h, s, None if graphs is None else graphs.get(s))
            skips.append(h)
        for s in range(cfg.depth - 1, 0, -1):
            h = T.concat([T.upsample2d(h), skips[s - 1]], axis=1)
            h = self._double_conv(h, f"dec{s}")
        out = T.sigmoid(T.conv2d(h, self.params["head.w"], self.params["head.b"], padding="valid"))
        return (out, used) if return_graphs else out

    __call__ = forward

    def predict(self, x, batch_size: int = 8) -> np.ndarray:
        with T.no_grad():
            x = np.asarray(x.data if isinstance(x, Tensor) else x)
            outs = [self.forward(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    # -- checkpoints ------------------------------------------------------
    def save(self, path) -> None:
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (tensor payloads)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "parameters": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
        }
        payload = b"".join(tensor_to_bytes(v) for v in self.params.values())
        manifest["sha256"] = hashlib.sha256(payload).hexdigest()
        path.with_suffix(".bin").write_bytes(payload)
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> CHSNet:
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
        payload = path.with_suffix(".bin").read_bytes()
        if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
            raise ValueError(f"checkpoint payload checksum mismatch: {path}")
        config = ModelConfig.from_dict(manifest["config"])
        params = {}
        offset = 0
        for entry in manifest["parameters"]:
            arr, offset = tensor_from_bytes(payload, offset)
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"shape mismatch for {entry['name']}")
            params[entry["name"]] = Tensor(arr, requires_grad=True)
        return cls(config, params)


def load_stage_weights(prev: CHSNet, config: ModelConfig | None = None) -> CHSNet:
    """Start a new stage from the previous stage's weights (deep copy)."""
    if config is not None and config.to_dict() != prev.config.to_dict():
        raise ValueError("model config mismatch between stages")
    return prev.copy()
