"""Small trainable encoder standing in for a CNN backbone.

An input vector goes through one affine+ReLU layer (optionally two) whose
output is reshaped to a ``C x H x W`` feature map. The global, top and bottom
descriptors are average pools of the whole map and of its two row halves.
All parameters (encoder, classifier head, fusion block) live in a single
``ParameterStore``.

Checkpoint layout::

    b"CKPT1\\n"
    u64 manifest_length (little-endian)
    manifest: UTF-8 JSON {"format": 1, "metadata": {...},
                          "parameters": [{"name": str, "shape": [int]}...]}
    float64 little-endian payloads, concatenated in manifest order
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CongruenceError, FormatError, ShapeError, StateError
from .fusion import FusionParams, gap, split_map
from .losses import ClassifierHead
from .rng import Rng
from .teacher import ParameterStore

CKPT_MAGIC = b"CKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 32
    channels: int = 32
    height: int = 4
    width: int = 2
    depth: int = 1
    hidden: int = 128
    reduction: int = 4
    smp_layers: int = 5
    classes: int = 64
    target_classes: int = 0

    def __post_init__(self):
        if self.depth not in (1, 2):
            raise ValueError("depth must be 1 or 2")
        if self.channels < 2 or self.height < 2 or self.width < 1:
            raise ValueError("feature map needs C >= 2, H >= 2, W >= 1")
        if min(self.d_in, self.hidden, self.classes, self.reduction) < 1:
            raise ValueError("sizes must be positive")
        if self.target_classes < 0:
            raise ValueError("target_classes must be >= 0")

    @property
    def map_size(self) -> int:
        return self.channels * self.height * self.width


def _glorot(rng: Rng, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def flip_vector(x) -> np.ndarray:
    """Coordinate reversal: the vector-input stand-in for a horizontal image flip."""
    return np.asarray(x)[..., ::-1]


@dataclass
class Activations:
    x: np.ndarray
    pre: list[np.ndarray]
    layer_inputs: list[np.ndarray]
    map: np.ndarray
    global_vec: np.ndarray
    top_vec: np.ndarray
    bottom_vec: np.ndarray
    version: int


class DeskBackbone:
    def __init__(self, config: ModelConfig, params: ParameterStore):
        self.config = config
        self.params = params
        self.version = 0
        expected = self.expected_shapes(config)
        if params.shapes() != expected:
            raise CongruenceError(f"parameter shapes {params.shapes()} do not match config {expected}")

    @staticmethod
    def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        probe = DeskBackbone.initial_params(config, Rng(0))
        return probe.shapes()

    @staticmethod
    def initial_params(config: ModelConfig, rng: Rng) -> ParameterStore:
        store = ParameterStore()
        sizes = [config.d_in] + ([config.hidden] if config.depth == 2 else []) + [config.map_size]
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            store[f"encoder.{k}.weight"] = _glorot(rng.derive("encoder", k), fan_out, fan_in)
            store[f"encoder.{k}.bias"] = np.zeros(fan_out)
        store["head.weight"] = _glorot(rng.derive("head"), config.classes, config.channels)
        store["head.bias"] = np.zeros(config.classes)
        if config.target_classes:
            store["target_head.weight"] = _glorot(rng.derive("target_head"), config.target_classes, config.channels)
            store["target_head.bias"] = np.zeros(config.target_classes)
        fusion = FusionParams.init(config.channels, config.reduction, config.smp_layers, rng.derive("fusion"))
        for name, arr in fusion.arrays().items():
            store[f"fusion.{name}"] = arr
        return store

    @classmethod
    def create(cls, config: ModelConfig, rng: Rng) -> "DeskBackbone":
        return cls(config, cls.initial_params(config, rng))

    # parameter views -------------------------------------------------------

    @property
    def head(self) -> ClassifierHead:
        return ClassifierHead(self.params["head.weight"], self.params["head.bias"])

    @property
    def target_head(self) -> ClassifierHead:
        if "target_head.weight" not in self.params:
            raise StateError("model has no target head")
        return ClassifierHead(self.params["target_head.weight"], self.params["target_head.bias"])

    def with_target_head(self, classes: int, rng: Rng) -> "DeskBackbone":
        """Copy of the model with a fresh ``classes``-way target head added."""
        cfg = replace(self.config, target_classes=classes)
        store = self.params.copy()
        for name in ("target_head.weight", "target_head.bias"):
            if name in store:
                del store[name]
        store["target_head.weight"] = _glorot(rng.derive("target_head"), classes, cfg.channels)
        store["target_head.bias"] = np.zeros(classes)
        return DeskBackbone(cfg, store)

    @property
    def fusion(self) -> FusionParams:
        return FusionParams.from_arrays(self.params.subset("fusion."))

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("encoder.")]

    def trainable_names(self, head: str = "head") -> list[str]:
        """Parameters with a gradient path from the losses of one training stage."""
        return self.encoder_names() + [f"{head}.weight", f"{head}.bias"]

    def replace_head(self, weight: np.ndarray, bias: np.ndarray, head: str = "head") -> None:
        self.params[f"{head}.weight"] = weight
        self.params[f"{head}.bias"] = bias
        self.touch()

    def touch(self) -> None:
        """Mark cached activations as stale after a parameter change."""
        self.version += 1

    # forward / backward ----------------------------------------------------

    def forward(self, x) -> Activations:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != cfg.d_in:
            raise ShapeError(f"expected inputs of length {cfg.d_in}, got shape {x.shape}")
        h = x
        pre, inputs = [], []
        for k in range(cfg.depth):
            inputs.append(h)
            z = h @ self.params[f"encoder.{k}.weight"].T + self.params[f"encoder.{k}.bias"]
            pre.append(z)
            h = np.maximum(z, 0.0)
        fmap = h.reshape(-1, cfg.channels, cfg.height, cfg.width)
        top, bottom = split_map(fmap)
        acts = Activations(x, pre, inputs, fmap, gap(fmap), gap(top), gap(bottom), self.version)
        if single:
            acts.map = fmap[0]
            acts.global_vec, acts.top_vec, acts.bottom_vec = acts.global_vec[0], acts.top_vec[0], acts.bottom_vec[0]
        return acts

    def backward(self, acts: Activations, d_global=None, d_top=None, d_bottom=None, d_map=None,
                 extra: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        """Gradients for every registered parameter given upstream feature gradients.

        ``extra`` adds gradients computed elsewhere (e.g. the classifier head).
        """
        if acts.version != self.version:
            raise StateError("activations were computed before the last parameter update")
        cfg = self.config
        n = acts.x.shape[0]
        hw = cfg.height * cfg.width
        cut = (cfg.height + 1) // 2
        dmap = np.zeros((n, cfg.channels, cfg.height, cfg.width))
        if d_map is not None:
            dmap += np.asarray(d_map).reshape(dmap.shape)
        if d_global is not None:
            dmap += np.asarray(d_global).reshape(n, cfg.channels)[:, :, None, None] / hw
        if d_top is not None:
            dmap[:, :, :cut, :] += np.asarray(d_top).reshape(n, cfg.channels)[:, :, None, None] / (cut * cfg.width)
        if d_bottom is not None:
            rows = cfg.height - cut
            dmap[:, :, cut:, :] += np.asarray(d_bottom).reshape(n, cfg.channels)[:, :, None, None] / (rows * cfg.width)

        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dh = dmap.reshape(n, -1)
        for k in range(cfg.depth - 1, -1, -1):
            dz = dh * (acts.pre[k] > 0)
            grads[f"encoder.{k}.weight"] = dz.T @ acts.layer_inputs[k]
            grads[f"encoder.{k}.bias"] = dz.sum(axis=0)
            dh = dz @ self.params[f"encoder.{k}.weight"]
        for name, g in (extra or {}).items():
            if name not in grads or grads[name].shape != np.shape(g):
                raise CongruenceError(f"unexpected gradient {name!r}")
            grads[name] = grads[name] + g
        return grads


# -- optimiser ----------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)


def adam_step(params: ParameterStore, grads: dict[str, np.ndarray], state: OptimizerState,
              names: list[str] | None = None) -> None:
    """Adam with decoupled weight decay ``lr * wd * theta``, in place.

    Only ``names`` (default: every key of ``grads``) are updated.
    """
    names = list(grads) if names is None else names
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in names:
        if name not in params:
            raise CongruenceError(f"no parameter named {name!r}")
        theta, g = params[name], np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise CongruenceError(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        m = state.m.get(name)
        if m is None or m.shape != theta.shape:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta -= state.lr * update + state.lr * state.weight_decay * theta


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    stores: dict[str, ParameterStore]
    metadata: dict = field(default_factory=dict)

    def model(self, which: str = "model") -> DeskBackbone:
        cfg = ModelConfig(**self.metadata["model_config"])
        return DeskBackbone(cfg, self.stores[which].copy())


def _manifest(ckpt: Checkpoint) -> tuple[bytes, list[np.ndarray]]:
    entries, payloads = [], []
    for store_name, store in ckpt.stores.items():
        for name, arr in store.items():
            entries.append({"name": f"{store_name}/{name}", "shape": list(arr.shape)})
            payloads.append(arr)
    manifest = {"format": 1, "metadata": ckpt.metadata, "parameters": entries}
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8"), payloads


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    manifest, payloads = _manifest(ckpt)
    parts = [CKPT_MAGIC, struct.pack("<Q", len(manifest)), manifest]
    parts += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in payloads]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{source}: bad checkpoint magic")
    pos = len(CKPT_MAGIC)
    try:
        (length,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        manifest = json.loads(data[pos : pos + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable manifest") from exc
    pos += length
    stores: dict[str, ParameterStore] = {}
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if pos + 8 * count > len(data):
            raise FormatError(f"{source}: payload truncated at {entry['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        store_name, _, name = entry["name"].partition("/")
        stores.setdefault(store_name, ParameterStore())[name] = arr
    if pos != len(data):
        raise FormatError(f"{source}: {len(data) - pos} trailing bytes")
    return Checkpoint(stores, manifest.get("metadata", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def config_metadata(config: ModelConfig) -> dict:
    return {"model_config": asdict(config)}
