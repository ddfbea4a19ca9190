"""Synthetic RGB-D scenes whose labels are decided by depth alone.

Each scene is a slanted background plane with a few non-overlapping
axis-aligned boxes. A box either protrudes from the plane (class 1) or is
recessed into it (class 2); everything else is background (class 0). The
offset is drawn in units of the plane's per-pixel 3D spacing (depth / f),
so the task looks the same in both depth regimes. Colours are i.i.d.
uniform per pixel and channel, identical for every class.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kvfile, tensor
from .geometry import CameraIntrinsics, DepthField, read_camera, write_camera

IGNORE = 255
REGIMES = {"indoor": (0.5, 10.0), "outdoor": (2.0, 100.0)}
# background plane depth is drawn from this sub-range so boxes fit in bounds
_PLANE_RANGE = {"indoor": (1.5, 5.0), "outdoor": (12.0, 50.0)}
CLASS_NAMES = ("background", "protruding", "recessed")


@dataclass
class SceneConfig:
    height: int = 24
    width: int = 24
    n_scenes: int = 64
    test_fraction: float = 0.2
    seed: int = 0
    focal: float = 40.0
    regime: str = "indoor"
    noise_sigma: float = 0.0  # meters
    classes: int = 3
    min_objects: int = 2
    max_objects: int = 4
    min_size: int = 5
    max_size: int = 9
    min_offset: float = 1.5  # in units of plane depth / focal
    max_offset: float = 4.0
    max_slope: float = 0.3
    dropout: float = 0.0  # fraction of pixels with missing depth
    texture: float = 1.0  # RGB is 0.5 + texture * (U(0, 1) - 0.5), iid for every pixel

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {sorted(REGIMES)}, got {self.regime!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.classes not in (2, 3):
            raise ValueError("classes must be 2 (background/protruding) or 3 (+recessed)")
        if not 0 < self.min_offset <= self.max_offset:
            raise ValueError("need 0 < min_offset <= max_offset")
        if not 1 <= self.min_size <= self.max_size <= min(self.height, self.width):
            raise ValueError("object sizes must fit the image")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 0 <= self.texture <= 1:
            raise ValueError("texture must lie in [0, 1]")
        if not 0 <= self.dropout < 1 or not 0 <= self.test_fraction < 1:
            raise ValueError("dropout and test_fraction must lie in [0, 1)")

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0)

    @property
    def n_test(self) -> int:
        return int(round(self.n_scenes * self.test_fraction))

    @property
    def n_train(self) -> int:
        return self.n_scenes - self.n_test


@dataclass
class SceneSample:
    rgb: np.ndarray  # (1, 3, h, w)
    depth: DepthField  # (1, 1, h, w), rate 1
    labels: np.ndarray  # (h, w) int64, IGNORE where depth is missing
    boxes: list = field(default_factory=list)  # (y0, x0, y1, x1, class)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _place_boxes(rng, cfg: SceneConfig):
    boxes = []
    want = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(100 * max(want, 1)):
        if len(boxes) == want:
            break
        bh = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        bw = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        y0 = int(rng.integers(0, cfg.height - bh + 1))
        x0 = int(rng.integers(0, cfg.width - bw + 1))
        # keep a one-pixel gap so every box has its own border
        if all(y0 > b[2] or y0 + bh < b[0] or x0 > b[3] or x0 + bw < b[1] for b in boxes):
            boxes.append((y0, x0, y0 + bh, x0 + bw))
    return boxes


def make_scene(cfg: SceneConfig, index: int) -> SceneSample:
    rng = _sample_rng(cfg.seed, index)
    H, W = cfg.height, cfg.width
    f = cfg.focal
    lo, hi = REGIMES[cfg.regime]
    plo, phi = _PLANE_RANGE[cfg.regime]
    d0 = rng.uniform(plo, phi)
    gx, gy = rng.uniform(-cfg.max_slope, cfg.max_slope, size=2)
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    # a 3D plane has inverse depth affine in pixel coordinates
    inv = (1.0 + gx * (u - (W - 1) / 2.0) / f + gy * (v - (H - 1) / 2.0) / f) / d0
    plane = 1.0 / inv
    depth = plane.copy()
    labels = np.zeros((H, W), dtype=np.int64)

    boxes = []
    for (y0, x0, y1, x1) in _place_boxes(rng, cfg):
        cls = 1 if cfg.classes == 2 else int(rng.integers(1, 3))
        units = rng.uniform(cfg.min_offset, cfg.max_offset)
        local = plane[(y0 + y1) // 2, (x0 + x1) // 2]
        shift = units * local / f
        depth[y0:y1, x0:x1] = plane[y0:y1, x0:x1] + (-shift if cls == 1 else shift)
        labels[y0:y1, x0:x1] = cls
        boxes.append((y0, x0, y1, x1, cls))

    if cfg.noise_sigma > 0:
        depth = depth + rng.normal(0.0, cfg.noise_sigma, size=depth.shape)
    depth = np.clip(depth, lo, hi)
    rgb = 0.5 + cfg.texture * (rng.uniform(0.0, 1.0, size=(1, 3, H, W)) - 0.5)
    valid = np.ones((H, W), dtype=bool)
    if cfg.dropout > 0:
        valid = rng.random((H, W)) >= cfg.dropout
        labels[~valid] = IGNORE
        depth = np.where(valid, depth, 0.0)
    return SceneSample(rgb, DepthField(depth[None, None], valid[None, None], 1), labels, boxes)


def generate(cfg: SceneConfig, start: int = 0, stop: int | None = None):
    """Yield scenes ``start..stop``; scene i depends only on (seed, i)."""
    stop = cfg.n_scenes if stop is None else stop
    for i in range(start, stop):
        yield make_scene(cfg, i)


@dataclass
class SceneSet:
    """Scenes stacked along the batch axis."""

    rgb: np.ndarray  # (N, 3, h, w)
    depth: np.ndarray  # (N, 1, h, w), 0 where missing
    labels: np.ndarray  # (N, h, w) int64
    camera: CameraIntrinsics

    def __len__(self):
        return self.rgb.shape[0]

    def batch(self, idx):
        return self.rgb[idx], DepthField(self.depth[idx], None, 1), self.labels[idx]


def stack(samples, camera: CameraIntrinsics) -> SceneSet:
    samples = list(samples)
    return SceneSet(np.concatenate([s.rgb for s in samples]),
                    np.concatenate([s.depth.depth for s in samples]),
                    np.stack([s.labels for s in samples]), camera)


def split(cfg: SceneConfig) -> tuple[SceneSet, SceneSet]:
    """(train, test) with the last ``n_test`` scene indices held out."""
    cam = cfg.camera
    return (stack(generate(cfg, 0, cfg.n_train), cam),
            stack(generate(cfg, cfg.n_train, cfg.n_scenes), cam))


# ---------------------------------------------------------------- files

MANIFEST_HEADER = "# malleable25d dataset manifest v1"


def export_dataset(cfg: SceneConfig, directory) -> str:
    """Write every scene as ``.t4`` files plus ``manifest.txt``; returns the manifest path.

    Manifest lines: ``camera <file>``, ``config <file>`` and one
    ``sample <index> <split> <rgb> <depth> <labels>`` per scene, paths
    relative to the manifest. Depth is stored with 0 marking missing values.
    """
    for sub in ("rgb", "depth", "labels"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    write_camera(os.path.join(directory, "camera.toml"), cfg.camera, 1)
    kvfile.write_kv(os.path.join(directory, "scene_config.toml"), asdict(cfg))
    lines = [MANIFEST_HEADER, "camera camera.toml", "config scene_config.toml"]
    for i, s in enumerate(generate(cfg)):
        part = "train" if i < cfg.n_train else "test"
        names = [f"rgb/{i:05d}.t4", f"depth/{i:05d}.t4", f"labels/{i:05d}.t4"]
        tensor.save(os.path.join(directory, names[0]), s.rgb)
        tensor.save(os.path.join(directory, names[1]), s.depth.depth)
        tensor.save(os.path.join(directory, names[2]), s.labels[None, None].astype(np.float64), dtype="f32")
        lines.append(f"sample {i} {part} {' '.join(names)}")
    path = os.path.join(directory, "manifest.txt")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


@dataclass
class Manifest:
    root: str
    camera_file: str
    config_file: str | None
    samples: list  # (index, split, rgb, depth, labels) with absolute paths

    @property
    def camera(self) -> CameraIntrinsics:
        return read_camera(self.camera_file)[0]

    def scene_config(self) -> SceneConfig:
        return SceneConfig(**kvfile.read_kv(self.config_file))

    def load(self, part: str | None = None) -> SceneSet:
        rows = [r for r in self.samples if part is None or r[1] == part]
        if not rows:
            raise ValueError(f"manifest has no samples in split {part!r}")
        rgb, depth, labels = [], [], []
        for _, _, prgb, pdep, plab in rows:
            for p in (prgb, pdep, plab):
                if not os.path.exists(p):
                    raise FileNotFoundError(f"manifest entry missing: {p}")
            rgb.append(tensor.load(prgb))
            depth.append(tensor.load(pdep))
            labels.append(tensor.load(plab)[0, 0].astype(np.int64))
        return SceneSet(np.concatenate(rgb), np.concatenate(depth), np.stack(labels), self.camera)


def read_manifest(path) -> Manifest:
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    camera = config = None
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "camera" and len(parts) == 2:
                camera = os.path.join(root, parts[1])
            elif parts[0] == "config" and len(parts) == 2:
                config = os.path.join(root, parts[1])
            elif parts[0] == "sample" and len(parts) == 6:
                samples.append((int(parts[1]), parts[2], *(os.path.join(root, p) for p in parts[3:])))
            else:
                raise ValueError(f"{path}:{lineno}: malformed manifest line {line.strip()!r}")
    if camera is None:
        raise ValueError(f"{path}: no camera line")
    if not os.path.exists(camera):
        raise FileNotFoundError(f"manifest entry missing: {camera}")
    return Manifest(root, camera, config, samples)
