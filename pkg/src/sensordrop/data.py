"""Synthetic multi-view scenes: N cameras, four classes, blank and redundant views."""
from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = ("car", "bus", "person", "no-object")
NO_OBJECT = 3
N_CLASSES = 4

TRAIN, TEST = 0, 1


@dataclass(frozen=True)
class GeometryConfig:
    n_sensors: int = 6
    image_size: int = 32
    class_distribution: tuple = (0.25, 0.25, 0.25, 0.25)
    # probability that the object falls inside each camera's field of view
    placement_quality: tuple = (0.55, 0.6, 0.85, 0.35, 0.3, 0.7)
    background_amplitude: float = 0.1
    intensity_range: tuple = (0.6, 1.0)
    pixel_noise: float = 0.05
    # pixels of image-centre displacement per unit of world position
    spread: float = 6.0
    scale_range: tuple = (0.8, 1.2)

    def __post_init__(self):
        if len(self.placement_quality) != self.n_sensors:
            raise ValueError("placement_quality needs one entry per sensor")
        if len(self.class_distribution) != N_CLASSES:
            raise ValueError("class_distribution needs four entries")
        if abs(sum(self.class_distribution) - 1.0) > 1e-9:
            raise ValueError("class_distribution must sum to 1")


@dataclass(eq=False)
class Scene:
    label: int
    views: np.ndarray  # (N, H, W), float32-representable values in [0, 1]
    visibility: np.ndarray  # (N,) bool

    @property
    def n_sensors(self):
        return len(self.views)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.visibility, other.visibility)
            and self.views.shape == other.views.shape
            and self.views.tobytes() == other.views.tobytes()
        )


@dataclass(eq=False)
class DatasetSplit:
    train: list
    test: list
    seed: int
    geometry: GeometryConfig = field(default_factory=GeometryConfig)

    def arrays(self, which):
        """``(views (B, N, H, W), labels (B,))`` for ``"train"`` or ``"test"``."""
        scenes = self.train if which == "train" else self.test
        views = np.stack([s.views for s in scenes]).astype(np.float64)
        labels = np.array([s.label for s in scenes], dtype=np.int64)
        return views, labels

    def __eq__(self, other):
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return self.seed == other.seed and self.train == other.train and self.test == other.test


def _viewpoints(n_sensors):
    """Fixed per-camera rotation and zoom; camera i looks at the world from angle 2*pi*i/N."""
    out = []
    for i in range(n_sensors):
        a = 2.0 * np.pi * i / n_sensors
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        zoom = 0.85 + 0.3 * ((i * 7) % n_sensors) / max(n_sensors - 1, 1)
        out.append((rot, zoom))
    return out


def _render_object(label, size, cx, cy, scale, intensity, rng, noise):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - cx) / scale
    v = (yy - cy) / scale
    body = np.zeros((size, size), dtype=bool)
    dark = np.zeros((size, size), dtype=bool)
    if label == 0:  # car: wide low box on two wheels
        body |= (np.abs(u) <= 8) & (np.abs(v + 1) <= 3)
        for wx in (-5.0, 5.0):
            body |= (u - wx) ** 2 + (v - 3.5) ** 2 <= 2.2 ** 2
    elif label == 1:  # bus: large box with a row of windows
        body |= (np.abs(u) <= 10) & (np.abs(v) <= 6)
        for wx in (-7.0, -2.5, 2.5, 7.0):
            dark |= (np.abs(u - wx) <= 1.5) & (np.abs(v + 2.5) <= 1.5)
    elif label == 2:  # person: thin upright bar under a round head
        body |= (np.abs(u) <= 2) & (v >= -3) & (v <= 9)
        body |= u ** 2 + (v + 6.5) ** 2 <= 3 ** 2
    else:
        raise ValueError("no-object scenes have nothing to render")
    value = np.where(dark, 0.3 * intensity, intensity)
    value = value + rng.normal(0.0, noise, size=(size, size))
    return body, value


def generate_scene(rng, geometry=GeometryConfig(), label=None):
    """Draw one scene. ``label`` forces the class; otherwise it is drawn from the config."""
    n = geometry.n_sensors
    size = geometry.image_size
    if label is None:
        label = int(rng.choice(N_CLASSES, p=np.asarray(geometry.class_distribution)))
    views = rng.uniform(0.0, geometry.background_amplitude, size=(n, size, size))
    visibility = np.zeros(n, dtype=bool)
    if label != NO_OBJECT:
        quality = np.asarray(geometry.placement_quality)
        while not visibility.any():
            visibility = rng.random(n) < quality
        world = rng.uniform(-1.0, 1.0, size=2)
        base_scale = rng.uniform(*geometry.scale_range)
        for i, (rot, zoom) in enumerate(_viewpoints(n)):
            if not visibility[i]:
                continue
            offset = geometry.spread * (rot @ world) + rng.normal(0.0, 1.0, size=2)
            cx, cy = size / 2 + offset[0], size / 2 + offset[1]
            intensity = rng.uniform(*geometry.intensity_range)
            body, value = _render_object(label, size, cx, cy, base_scale * zoom,
                                         intensity, rng, geometry.pixel_noise)
            views[i] = np.where(body, value, views[i])
    views = np.clip(views, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return Scene(label=label, views=views, visibility=visibility)


def _stratified_labels(count, distribution, rng):
    weights = np.asarray(distribution, dtype=np.float64) * count
    base = np.floor(weights).astype(int)
    remainder = count - base.sum()
    order = np.argsort(-(weights - base), kind="stable")
    base[order[:remainder]] += 1
    labels = np.repeat(np.arange(N_CLASSES), base)
    return rng.permutation(labels)


def build_split(seed, sizes=(680, 171), geometry=GeometryConfig(), one_per_class=False):
    """Deterministic train/test split; every sample has its own generator keyed by
    ``(seed, split, index)`` so the two splits never share random streams."""
    n_train, n_test = sizes
    if n_train <= 0 or n_test <= 0:
        raise ValueError("split sizes must be positive")
    parts = []
    for which, count in ((TRAIN, n_train), (TEST, n_test)):
        label_rng = np.random.default_rng([seed, which, 2 ** 32 - 1])
        if one_per_class:
            labels = np.arange(count) % N_CLASSES
        else:
            labels = _stratified_labels(count, geometry.class_distribution, label_rng)
        scenes = [
            generate_scene(np.random.default_rng([seed, which, i]), geometry, int(labels[i]))
            for i in range(count)
        ]
        parts.append(scenes)
    return DatasetSplit(train=parts[0], test=parts[1], seed=seed, geometry=geometry)


def class_histogram(scenes):
    counts = Counter(s.label for s in scenes)
    return [counts.get(c, 0) for c in range(N_CLASSES)]


# ------------------------------------------------------------------ file I/O
#
# Little-endian layout, version 1:
#   magic "SDDS" | u16 version | u16 N | u16 H | u16 W | u32 n_train | u32 n_test | i64 seed
#   then n_train + n_test records:  u8 label | u32 visibility bitmask (bit i = sensor i)
#                                   | N*H*W float32 pixels, sensor-major, row-major

DATASET_MAGIC = b"SDDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHHHHIIq")
_RECORD_HEAD = struct.Struct("<BI")


class DatasetFormatError(ValueError):
    pass


def dump_split(split) -> bytes:
    first = (split.train or split.test)[0]
    n, h, w = first.views.shape
    out = bytearray(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w,
                                 len(split.train), len(split.test), split.seed))
    for scene in split.train + split.test:
        bits = sum(1 << i for i, v in enumerate(scene.visibility) if v)
        out += _RECORD_HEAD.pack(scene.label, bits)
        out += scene.views.astype("<f4").tobytes()
    return bytes(out)


def load_split_bytes(blob, expected_sensors=None, geometry=None):
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("truncated header")
    magic, version, n, h, w, n_train, n_test, seed = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    if expected_sensors is not None and n != expected_sensors:
        raise DatasetFormatError(f"file has {n} sensors, expected {expected_sensors}")
    payload = n * h * w * 4
    record = _RECORD_HEAD.size + payload
    total = _HEADER.size + (n_train + n_test) * record
    if len(blob) != total:
        raise DatasetFormatError(f"expected {total} bytes, file has {len(blob)}")
    scenes = []
    pos = _HEADER.size
    for _ in range(n_train + n_test):
        label, bits = _RECORD_HEAD.unpack_from(blob, pos)
        pos += _RECORD_HEAD.size
        if label >= N_CLASSES:
            raise DatasetFormatError(f"invalid label {label}")
        views = np.frombuffer(blob, dtype="<f4", count=n * h * w, offset=pos)
        pos += payload
        visibility = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        scenes.append(Scene(label=label, views=views.reshape(n, h, w).astype(np.float64),
                            visibility=visibility))
    if geometry is None:
        geometry = GeometryConfig() if n == 6 else None
    if geometry is None:
        geometry = GeometryConfig(n_sensors=n, placement_quality=(0.5,) * n)
    return DatasetSplit(train=scenes[:n_train], test=scenes[n_train:], seed=seed, geometry=geometry)


def save_split(split, path):
    Path(path).write_bytes(dump_split(split))


def load_split(path, expected_sensors=None):
    return load_split_bytes(Path(path).read_bytes(), expected_sensors=expected_sensors)


def describe(split):
    lines = [f"seed {split.seed}: {len(split.train)} train / {len(split.test)} test scenes"]
    for name, scenes in (("train", split.train), ("test", split.test)):
        hist = class_histogram(scenes)
        parts = ", ".join(f"{CLASS_NAMES[c]}={hist[c]}" for c in range(N_CLASSES))
        lines.append(f"  {name}: {parts}")
    return "\n".join(lines)
