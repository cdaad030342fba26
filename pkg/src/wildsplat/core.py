"""Shared domain types, parameterization, validation and checkpoint/config I/O.

Gaussians live in a 2D world. Scales are stored as logs, opacities as
logits, rotations as a single angle. Colors are plain RGB.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

# Attribute name -> GaussianCloud field holding the learnable parameter.
ATTRIBUTES: dict[str, str] = {
    "position": "positions",
    "scale": "log_scales",
    "rotation": "rotations",
    "opacity": "opacity_logits",
    "color": "colors",
}
GEOMETRIC_ATTRIBUTES = ("position", "rotation", "scale")

_FLOAT_FIELDS = (
    "positions",
    "log_scales",
    "rotations",
    "opacity_logits",
    "colors",
    "depths",
    "densify_r_max",
    "densify_grad_accum",
    "conflict_ema",
)
_TRAILING = {"positions": (2,), "log_scales": (2,), "colors": (3,)}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    densify_r_max: np.ndarray = None
    densify_grad_accum: np.ndarray = None
    densify_count: np.ndarray = None
    conflict_ema: np.ndarray = None

    def __post_init__(self):
        n = len(self.positions)
        for name in _FLOAT_FIELDS:
            value = getattr(self, name)
            if value is None:
                value = np.zeros((n,) + _TRAILING.get(name, ()))
            setattr(self, name, np.array(value, dtype=np.float64).reshape((n,) + _TRAILING.get(name, ())))
        if self.densify_count is None:
            self.densify_count = np.zeros(n, dtype=np.int64)
        self.densify_count = np.array(self.densify_count, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def param(self, attribute: str) -> np.ndarray:
        return getattr(self, ATTRIBUTES[attribute])

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{f.name: getattr(self, f.name).copy() for f in dataclasses.fields(self)})

    def take(self, index) -> "GaussianCloud":
        """Row-select every per-Gaussian array with the same index."""
        index = np.asarray(index)
        return GaussianCloud(**{f.name: getattr(self, f.name)[index].copy() for f in dataclasses.fields(self)})

    @staticmethod
    def concat(clouds: list["GaussianCloud"]) -> "GaussianCloud":
        return GaussianCloud(
            **{f.name: np.concatenate([getattr(c, f.name) for c in clouds]) for f in dataclasses.fields(GaussianCloud)}
        )

    def reset_densify_stats(self) -> None:
        self.densify_r_max[:] = 0.0
        self.densify_grad_accum[:] = 0.0
        self.densify_count[:] = 0

    def equals(self, other: "GaussianCloud") -> bool:
        """Bitwise equality of every field."""
        return all(
            getattr(self, f.name).shape == getattr(other, f.name).shape
            and getattr(self, f.name).tobytes() == getattr(other, f.name).tobytes()
            for f in dataclasses.fields(self)
        )


@dataclass
class View:
    """One training or evaluation view: ``q = A x + t`` maps world to [0,1]² view coords."""

    A: np.ndarray
    t: np.ndarray
    gt_image: np.ndarray
    prior_mask: np.ndarray | None = None
    view_id: int = 0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64).reshape(2, 2)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(2)
        self.gt_image = np.asarray(self.gt_image, dtype=np.float64)
        if abs(np.linalg.det(self.A)) < 1e-12:
            raise ValueError(f"view {self.view_id}: affine matrix is singular")
        if self.prior_mask is None:
            self.prior_mask = np.ones(self.gt_image.shape[:2])
        self.prior_mask = np.asarray(self.prior_mask, dtype=np.float64)
        if self.prior_mask.shape != self.gt_image.shape[:2]:
            raise ValueError(
                f"view {self.view_id}: prior mask {self.prior_mask.shape} does not match image {self.gt_image.shape[:2]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_image.shape[0], self.gt_image.shape[1]

    @property
    def pixel_affine(self) -> np.ndarray:
        """World -> pixel linear part, ``diag(W, H) @ A``."""
        h, w = self.shape
        return np.diag([float(w), float(h)]) @ self.A


@dataclass
class GradientBundle:
    """Gradients of one view's loss w.r.t. the stored (unconstrained) parameters.

    ``per_attribute`` arrays keep the cloud's field shapes; ``flat`` gives the
    concatenated vector the harmonizer works on.
    """

    per_attribute: dict[str, np.ndarray]
    view_space_pos: np.ndarray

    def flat(self, attribute: str) -> np.ndarray:
        return self.per_attribute[attribute].reshape(-1)

    @property
    def per_gaussian(self) -> dict[str, np.ndarray]:
        return {"position": self.per_attribute["position"], "opacity": self.per_attribute["opacity"]}

    @property
    def n(self) -> int:
        return len(self.view_space_pos)

    @staticmethod
    def zeros(n: int) -> "GradientBundle":
        shapes = {"position": (n, 2), "scale": (n, 2), "rotation": (n,), "opacity": (n,), "color": (n, 3)}
        return GradientBundle({k: np.zeros(s) for k, s in shapes.items()}, np.zeros((n, 2)))


def build_covariance(log_scale, rotation) -> np.ndarray:
    """``R(θ) diag(exp(2·log_scale)) R(θ)ᵀ``; broadcasts over leading axes."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    c, s = np.cos(rotation), np.sin(rotation)
    v0, v1 = np.exp(2.0 * log_scale[..., 0]), np.exp(2.0 * log_scale[..., 1])
    cov = np.empty(np.broadcast_shapes(rotation.shape, log_scale.shape[:-1]) + (2, 2))
    cov[..., 0, 0] = c * c * v0 + s * s * v1
    cov[..., 1, 1] = s * s * v0 + c * c * v1
    cov[..., 0, 1] = cov[..., 1, 0] = c * s * (v0 - v1)
    return cov


@dataclass(frozen=True)
class Violation:
    index: int | None
    field: str
    message: str


def validate_cloud(cloud: GaussianCloud) -> list[Violation]:
    out: list[Violation] = []
    n = len(cloud)
    for f in dataclasses.fields(cloud):
        arr = getattr(cloud, f.name)
        if arr.shape[0] != n:
            out.append(Violation(None, f.name, f"length {arr.shape[0]} != {n}"))
    if out:
        return out

    def flag(bad_rows, name, message):
        for i in np.flatnonzero(bad_rows):
            out.append(Violation(int(i), name, message))

    flag(~np.isfinite(cloud.positions).all(axis=1), "position", "non-finite position")
    flag(~np.isfinite(cloud.log_scales).all(axis=1), "scale", "non-finite log-scale")
    with np.errstate(over="ignore"):
        flag(~(np.exp(cloud.log_scales) > 0).all(axis=1), "scale", "scale underflows to zero")
    flag(~np.isfinite(cloud.rotations), "rotation", "non-finite rotation")
    op = cloud.opacities
    flag(~((op > 0) & (op < 1)), "opacity", "opacity outside (0,1)")
    flag(~np.isfinite(cloud.colors).all(axis=1), "color", "non-finite color")
    flag(~np.isfinite(cloud.depths), "depth", "non-finite depth")
    flag(~(cloud.densify_r_max >= 0), "densify_r_max", "negative or NaN")
    flag(~(cloud.densify_grad_accum >= 0), "densify_grad_accum", "negative or NaN")
    flag(cloud.densify_count < 0, "densify_count", "negative")
    flag(~((cloud.conflict_ema >= 0) & (cloud.conflict_ema <= 1)), "conflict_ema", "outside [0,1]")
    return out


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class TrainConfig:
    """All training hyperparameters.

    Learning rates are desk-scale defaults tuned for 64×64 synthetic scenes;
    they are not taken from any published schedule.
    """

    lambda_rec: float = 0.25
    rho: float = 0.5
    k_geo: float = 0.5
    s_sem: float = 0.5
    c_sigma: float = 0.2
    eta_s: float = 1.2
    eta_t: float = 3.0
    lambda_inc: float = 0.5
    delta0: float = math.log(math.e - 1.0)
    eps_inc: float = 1e-6
    gamma: float = 0.99
    lambda_prune: float = 0.3
    decay_interval: int = 100
    warmup_iters: int = 200
    total_iters: int = 2000
    densify_start: int = 100
    densify_stop_fraction: float = 0.6  # densify/decay/prune window ends at this fraction of total_iters
    densify_interval: int = 100
    densify_grad_threshold: float = 1e-4
    densify_size_fraction: float = 0.1
    max_gaussians: int = 1500
    prune_opacity: float = 0.005
    lr_position: float = 1e-3
    lr_scale: float = 5e-3
    lr_rotation: float = 5e-3
    lr_opacity: float = 1e-2
    lr_color: float = 1e-3
    lr_predictor: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    init_gaussians: int = 200
    init_scale: float = 0.02
    init_opacity: float = 0.1
    cutoff_sigma: float = 3.0
    w_max: float = 0.999
    dssim_halved: bool = False
    image_size: int = 64
    seed: int = 0
    deterministic: bool = True
    # ablation switches
    dual_view: bool = True
    harmonize: bool = True
    conflict_structure: bool = True
    mask_mode: str = "full"  # full | none | bin | score
    checkpoint_every: int = 0

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 <= self.rho <= 1.0:
            errs.append("rho must lie in [0,1]")
        if not 0.0 < self.gamma < 1.0:
            errs.append("gamma must lie in (0,1)")
        if not 0.0 <= self.lambda_rec <= 1.0:
            errs.append("lambda_rec must lie in [0,1]")
        for name in ("s_sem", "c_sigma", "eta_s", "eta_t", "densify_grad_threshold", "densify_size_fraction",
                     "prune_opacity", "decay_interval", "densify_interval", "cutoff_sigma"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be > 0")
        if not 0.0 <= self.densify_stop_fraction <= 1.0:
            errs.append("densify_stop_fraction must lie in [0,1]")
        if self.total_iters > 0 and not self.warmup_iters < self.total_iters:
            errs.append("warmup_iters must be < total_iters")
        if self.mask_mode not in ("full", "none", "bin", "score"):
            errs.append(f"unknown mask_mode {self.mask_mode!r}")
        return errs

    @property
    def densify_stop(self) -> int:
        return int(self.densify_stop_fraction * self.total_iters)

    @property
    def ablation_tag(self) -> str:
        tags = []
        if not self.dual_view:
            tags.append("single-view")
        if self.mask_mode != "full":
            tags.append({"none": "no-mask", "bin": "bin-mask-only", "score": "score-mask-only"}[self.mask_mode])
        if self.dual_view and not self.harmonize:
            tags.append("no-harmonize")
        if not self.conflict_structure:
            tags.append("no-conflict-structure")
        return "+".join(tags) if tags else "full"

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def update(self, values: dict[str, Any]) -> "TrainConfig":
        """Return a copy with ``values`` applied; strings are coerced to field types."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kw[key] = _coerce(raw, types[key])
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(raw, type_name):
    if not isinstance(raw, str):
        return raw
    if type_name == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    return raw.strip()


CONFIG_SECTION = "train"


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read an INI-style ``[train]`` section of ``key = value`` lines."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    if CONFIG_SECTION not in parser:
        raise ValueError(f"{path}: missing [{CONFIG_SECTION}] section")
    return (base or TrainConfig()).update(dict(parser[CONFIG_SECTION]))


def save_config(config: TrainConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser[CONFIG_SECTION] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in config.to_dict().items()}
    with open(path, "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers little-endian):
#   magic   8 bytes  b"WSPLCKPT"
#   version u32
#   hlen    u64      length of the JSON header
#   header  hlen bytes, UTF-8 JSON: iteration, rng state, config, and an
#           ordered array table [{name, dtype, shape}, ...]
#   payload concatenated arrays in table order, '<f8' or '<i8'
#   digest  32 bytes SHA-256 over everything before it

CHECKPOINT_MAGIC = b"WSPLCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    iteration: int
    cloud: GaussianCloud
    predictor_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    def equals(self, other: "Checkpoint") -> bool:
        if (self.iteration, self.format_version) != (other.iteration, other.format_version):
            return False
        if json.dumps(self.rng_state, sort_keys=True) != json.dumps(other.rng_state, sort_keys=True):
            return False
        if json.dumps(self.config, sort_keys=True) != json.dumps(other.config, sort_keys=True):
            return False
        if not self.cloud.equals(other.cloud):
            return False
        if self.predictor_weights.tobytes() != other.predictor_weights.tobytes():
            return False
        if sorted(self.optimizer_state) != sorted(other.optimizer_state):
            return False
        return all(
            np.asarray(self.optimizer_state[k]).tobytes() == np.asarray(other.optimizer_state[k]).tobytes()
            for k in self.optimizer_state
        )


def _checkpoint_arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays = [(f"cloud/{f.name}", getattr(ckpt.cloud, f.name)) for f in dataclasses.fields(GaussianCloud)]
    arrays.append(("predictor", np.asarray(ckpt.predictor_weights, dtype=np.float64)))
    arrays += [(f"optim/{k}", np.asarray(v)) for k, v in sorted(ckpt.optimizer_state.items())]
    return arrays


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    table, chunks = [], []
    for name, arr in _checkpoint_arrays(ckpt):
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        arr = np.ascontiguousarray(arr, dtype=dtype)
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    header = json.dumps(
        {
            "iteration": int(ckpt.iteration),
            "rng_state": ckpt.rng_state,
            "config": ckpt.config,
            "arrays": table,
        },
        sort_keys=True,
    ).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", ckpt.format_version, len(header)) + header + b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < 20 + hlen + 32 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointCorruptError(f"{path}: checksum mismatch (truncated or corrupted)")
    header = json.loads(data[20 : 20 + hlen])
    offset = 20 + hlen
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=entry["dtype"], count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        offset += count * 8
    if offset != len(data) - 32:
        raise CheckpointCorruptError(f"{path}: payload size mismatch")
    cloud = GaussianCloud(**{f.name: arrays[f"cloud/{f.name}"] for f in dataclasses.fields(GaussianCloud)})
    return Checkpoint(
        iteration=header["iteration"],
        cloud=cloud,
        predictor_weights=arrays["predictor"],
        optimizer_state={k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")},
        rng_state=header["rng_state"],
        config=header["config"],
        format_version=version,
    )
