"""Synthetic in-the-wild datasets with known clean ground truth.

A scene is itself a 2D Gaussian cloud composited by the renderer:

* one very wide background Gaussian at the back,
* ``n_blobs`` anisotropic blobs (scales 0.03-0.12, opacity 0.5-0.95),
* ``n_stripe_groups`` patches of parallel thin elongated Gaussians,
* a fixed front blob centered at (0.5, 0.5).

All scene colors lie in [0.15, 0.7], so gains up to ±30% and small biases
never clip. Because the scene is a cloud, it can be rendered at any
resolution and serves as an exact oracle reconstruction.

Each training view applies a random affine (rotation ≤ 15°, scale in
[0.9, 1.1], translation ≤ 0.1), pastes opaque transient ellipses, then a
per-channel gain/bias. Masks use 1 for stable pixels and 0 for transients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from wildsplat.core import Checkpoint, GaussianCloud, View, load_checkpoint, logit, save_checkpoint
from wildsplat.renderer import render_image

DATASET_VERSION = 1

OCCLUSION_LEVELS = {
    # (min transients, max transients, coverage range)
    "none": (0, 0, (0.0, 0.0)),
    "low": (0, 1, (0.02, 0.08)),
    "medium": (1, 3, (0.04, 0.15)),
    "high": (3, 6, (0.08, 0.25)),
}
ILLUMINATION_LEVELS = {"none": 0.0, "mild": 0.1, "strong": 0.3}
PRIOR_FLIP_PROB = 0.1
PRIOR_MAX_RADIUS = 2


class DatasetError(Exception):
    pass


@dataclass
class SceneSpec:
    resolution: int = 64
    n_blobs: int = 24
    n_stripe_groups: int = 2
    stripes_per_group: int = 6

    def __post_init__(self):
        if self.resolution < 32:
            raise ValueError("scene resolution must be >= 32")


@dataclass
class Scene:
    cloud: GaussianCloud
    seed: int
    spec: SceneSpec

    def render(self, A, t, height: int | None = None, width: int | None = None) -> np.ndarray:
        h = height or self.spec.resolution
        w = width or h
        return render_image(self.cloud, View(A, t, np.zeros((h, w, 3))))


def _color(rng, n):
    return rng.uniform(0.15, 0.7, (n, 3))


def generate_scene(seed: int, spec: SceneSpec | None = None) -> Scene:
    spec = spec or SceneSpec()
    rng = np.random.default_rng([seed, 0x5CE7E])
    pos, ls, rot, op, col = [], [], [], [], []

    def add(p, s, r, a, c):
        pos.append(p), ls.append(np.log(s)), rot.append(r), op.append(a), col.append(c)

    add([0.5, 0.5], [2.0, 2.0], 0.0, 0.99, _color(rng, 1)[0])
    for _ in range(spec.n_blobs):
        add(rng.uniform(-0.1, 1.1, 2), rng.uniform(0.03, 0.12, 2), rng.uniform(0, math.pi), rng.uniform(0.5, 0.95),
            _color(rng, 1)[0])
    for _ in range(spec.n_stripe_groups):
        center = rng.uniform(0.2, 0.8, 2)
        angle = rng.uniform(0, math.pi)
        normal = np.array([-math.sin(angle), math.cos(angle)])
        color = _color(rng, 1)[0]
        length = rng.uniform(0.08, 0.15)
        for k in range(spec.stripes_per_group):
            offset = (k - (spec.stripes_per_group - 1) / 2) * 0.045
            add(center + offset * normal, [length, 0.012], angle, 0.85, color)
    add([0.5, 0.5], [0.06, 0.06], 0.0, 0.9, _color(rng, 1)[0])

    n = len(pos)
    # depth: background last, central blob first, the rest random in between
    depths = np.concatenate([[2.0], rng.uniform(0.1, 0.9, n - 2), [0.0]])
    cloud = GaussianCloud(
        positions=np.array(pos),
        log_scales=np.array(ls),
        rotations=np.array(rot),
        opacity_logits=logit(np.array(op)),
        colors=np.array(col),
        depths=depths,
    )
    return Scene(cloud, seed, spec)


def random_affine(rng, max_rot_deg=15.0, scale_range=(0.9, 1.1), max_shift=0.1):
    phi = math.radians(rng.uniform(-max_rot_deg, max_rot_deg))
    s = rng.uniform(*scale_range)
    A = s * np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    c = np.array([0.5, 0.5])
    t = c - A @ c + rng.uniform(-max_shift, max_shift, 2)
    return A, t


def _ellipse_mask(h, w, center, axes, angle):
    rr, cc = np.mgrid[0:h, 0:w]
    x = cc + 0.5 - center[0]
    y = rr + 0.5 - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = (ca * x + sa * y) / axes[0]
    v = (-sa * x + ca * y) / axes[1]
    return u * u + v * v <= 1.0


def _sample_ellipse(rng, h, w, area):
    aspect = rng.uniform(0.5, 2.0)
    ax = math.sqrt(area / (math.pi * aspect))
    return rng.uniform(0, w, 2) * [1, h / w], (ax, aspect * ax), rng.uniform(0, math.pi)


@dataclass
class SynthView:
    view_id: int
    A: np.ndarray
    t: np.ndarray
    gain: np.ndarray
    bias: np.ndarray
    image: np.ndarray
    clean: np.ndarray
    mask_true: np.ndarray
    mask_prior: np.ndarray
    n_transients: int = 0

    def as_view(self) -> View:
        return View(self.A, self.t, self.image, self.mask_prior, self.view_id)


@dataclass
class HeldoutView:
    view_id: int
    A: np.ndarray
    t: np.ndarray
    clean: np.ndarray

    def as_view(self) -> View:
        return View(self.A, self.t, self.clean, None, self.view_id)


@dataclass
class Dataset:
    views: list[SynthView]
    heldout: list[HeldoutView]
    meta: dict = field(default_factory=dict)
    oracle: GaussianCloud | None = None

    def training_views(self) -> list[View]:
        return [v.as_view() for v in self.views]

    def heldout_views(self) -> list[View]:
        return [v.as_view() for v in self.heldout]


def corrupt_mask(mask_true: np.ndarray, rng, labels: np.ndarray | None = None) -> np.ndarray:
    """Prior mask: flip whole transient regions (p=0.1), add a false region (p=0.1),
    then dilate or erode the transient set by up to 2 px."""
    h, w = mask_true.shape
    transient = mask_true < 0.5
    if labels is None:
        labels, n_regions = ndimage.label(transient)
    else:
        n_regions = int(labels.max())
    for region in range(1, n_regions + 1):
        if rng.random() < PRIOR_FLIP_PROB:
            transient &= labels != region
    if rng.random() < PRIOR_FLIP_PROB:
        center, axes, angle = _sample_ellipse(rng, h, w, rng.uniform(0.01, 0.04) * h * w)
        transient |= _ellipse_mask(h, w, center, axes, angle)
    radius = int(rng.integers(0, PRIOR_MAX_RADIUS + 1))
    if radius and transient.any():
        op = ndimage.binary_dilation if rng.random() < 0.5 else ndimage.binary_erosion
        transient = op(transient, structure=ndimage.generate_binary_structure(2, 1), iterations=radius)
    return (~transient).astype(np.float64)


def generate_views(
    scene: Scene,
    num_views: int,
    occlusion_level: str = "high",
    illumination_level: str = "strong",
    seed: int = 0,
    num_heldout: int = 4,
    resolution: int | None = None,
) -> Dataset:
    if num_views < 2:
        raise ValueError("need at least 2 views")
    if occlusion_level not in OCCLUSION_LEVELS or illumination_level not in ILLUMINATION_LEVELS:
        raise ValueError(f"unknown level {occlusion_level!r}/{illumination_level!r}")
    h = w = resolution or scene.spec.resolution
    kmin, kmax, cover = OCCLUSION_LEVELS[occlusion_level]
    delta = ILLUMINATION_LEVELS[illumination_level]
    streams = np.random.SeedSequence([seed, scene.seed]).spawn(num_views + num_heldout)
    views = []
    for i in range(num_views):
        rng = np.random.default_rng(streams[i])
        A, t = random_affine(rng)
        clean = scene.render(A, t, h, w)
        image = clean.copy()
        labels = np.zeros((h, w), dtype=np.int64)
        k = int(rng.integers(kmin, kmax + 1))
        if k:
            total = rng.uniform(*cover) * h * w
            for j in range(k):
                center, axes, angle = _sample_ellipse(rng, h, w, total / k)
                region = _ellipse_mask(h, w, center, axes, angle)
                image[region] = rng.uniform(0.05, 0.75, 3)
                labels[region] = j + 1
        mask_true = (labels == 0).astype(np.float64)
        gain = rng.uniform(1.0 - delta, 1.0 + delta, 3) if delta else np.ones(3)
        bias = rng.uniform(-delta / 10, delta / 10, 3) if delta else np.zeros(3)
        image = np.clip(gain * image + bias, 0.0, 1.0)
        prior = corrupt_mask(mask_true, rng, labels) if k else np.ones((h, w))
        views.append(SynthView(i, A, t, gain, bias, image, clean, mask_true, prior, k))
    heldout = []
    for j in range(num_heldout):
        rng = np.random.default_rng(streams[num_views + j])
        A, t = random_affine(rng)
        heldout.append(HeldoutView(num_views + j, A, t, scene.render(A, t, h, w)))
    meta = {
        "version": DATASET_VERSION,
        "seed": seed,
        "scene_seed": scene.seed,
        "resolution": h,
        "occlusion_level": occlusion_level,
        "illumination_level": illumination_level,
        "scene_spec": {
            "resolution": scene.spec.resolution,
            "n_blobs": scene.spec.n_blobs,
            "n_stripe_groups": scene.spec.n_stripe_groups,
            "stripes_per_group": scene.spec.stripes_per_group,
        },
    }
    return Dataset(views, heldout, meta, scene.cloud.copy())


def make_dataset(seed: int, num_views: int = 20, occlusion_level: str = "high", illumination_level: str = "strong",
                 resolution: int = 64, num_heldout: int = 4) -> Dataset:
    scene = generate_scene(seed, SceneSpec(resolution=resolution))
    return generate_views(scene, num_views, occlusion_level, illumination_level, seed, num_heldout, resolution)


# ---------------------------------------------------------------------------
# Directory I/O


def _to_png(path: Path, array: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def _from_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 255.0


def write_dataset(dataset: Dataset, directory, float_sidecars: bool = True) -> Path:
    root = Path(directory)
    for sub in ("views", "clean", "masks_true", "masks_prior", "heldout"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for v in dataset.views:
        name = f"{v.view_id:03d}"
        for sub, arr in (("views", v.image), ("clean", v.clean), ("masks_true", v.mask_true), ("masks_prior", v.mask_prior)):
            _to_png(root / sub / f"{name}.png", arr)
            if float_sidecars and sub in ("views", "clean"):
                np.save(root / sub / f"{name}.npy", arr)
        entries.append({
            "id": v.view_id,
            "file": f"{name}.png",
            "A": v.A.tolist(),
            "t": v.t.tolist(),
            "gain": v.gain.tolist(),
            "bias": v.bias.tolist(),
            "n_transients": v.n_transients,
        })
    held = []
    for v in dataset.heldout:
        name = f"{v.view_id:03d}"
        _to_png(root / "heldout" / f"{name}.png", v.clean)
        if float_sidecars:
            np.save(root / "heldout" / f"{name}.npy", v.clean)
        held.append({"id": v.view_id, "file": f"{name}.png", "A": v.A.tolist(), "t": v.t.tolist()})
    manifest = dict(dataset.meta, float_sidecars=float_sidecars, views=entries, heldout=held)
    (root / "meta.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if dataset.oracle is not None:
        save_checkpoint(root / "oracle.ckpt", Checkpoint(iteration=0, cloud=dataset.oracle))
    return root


def _read_image(root: Path, sub: str, name: str, view_id: int, prefer_float: bool) -> np.ndarray:
    # the PNG is canonical and must exist even when a float sidecar is read instead
    png = root / sub / f"{name}.png"
    if not png.exists():
        raise DatasetError(f"incomplete dataset: missing {sub}/{name}.png (view {view_id})")
    npy = root / sub / f"{name}.npy"
    if prefer_float and npy.exists():
        return np.load(npy)
    arr = _from_png(png)
    return arr[..., :3] if arr.ndim == 3 else arr


def read_dataset(directory, prefer_float: bool = True) -> Dataset:
    root = Path(directory)
    manifest_path = root / "meta.json"
    if not manifest_path.exists():
        raise DatasetError(f"incomplete dataset: {manifest_path} not found")
    meta = json.loads(manifest_path.read_text())
    if meta.get("version") != DATASET_VERSION:
        raise DatasetError(f"dataset schema version {meta.get('version')} != {DATASET_VERSION}")
    views = []
    for e in meta["views"]:
        name = Path(e["file"]).stem
        vid = e["id"]
        views.append(SynthView(
            vid,
            np.array(e["A"]),
            np.array(e["t"]),
            np.array(e["gain"]),
            np.array(e["bias"]),
            _read_image(root, "views", name, vid, prefer_float),
            _read_image(root, "clean", name, vid, prefer_float),
            _read_image(root, "masks_true", name, vid, False),
            _read_image(root, "masks_prior", name, vid, False),
            e.get("n_transients", 0),
        ))
    heldout = [
        HeldoutView(e["id"], np.array(e["A"]), np.array(e["t"]),
                    _read_image(root, "heldout", Path(e["file"]).stem, e["id"], prefer_float))
        for e in meta["heldout"]
    ]
    oracle = load_checkpoint(root / "oracle.ckpt").cloud if (root / "oracle.ckpt").exists() else None
    core_meta = {k: v for k, v in meta.items() if k not in ("views", "heldout", "float_sidecars")}
    return Dataset(views, heldout, core_meta, oracle)
