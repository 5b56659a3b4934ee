"""Synthetic aligned multimodal gesture clips and their on-disk formats.

Each clip is a 3x3 bright square moving along one of eight class
trajectories. All modalities are rendered from the same per-frame positions,
so they are aligned in space and time by construction.

Tensor files::

    b"MTUT" | u32 version=1 | u32 ndim | u32 extents[ndim] | u32 dtype | payload

all little-endian, payload row-major. ``dtype`` 1 is float32 (datasets) and 2
is float64 (checkpoints). Manifests are JSON lines of
``{"id", "label", "modalities": {name: relative path}}``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .numerics import RngStream

__all__ = [
    "CLASS_NAMES",
    "ModalitySpec",
    "DatasetSpec",
    "TrajectoryParams",
    "ClipRecord",
    "TensorFormatError",
    "BadMagicError",
    "BadVersionError",
    "TruncatedError",
    "ExtentError",
    "trajectory",
    "render_clip",
    "corrupt",
    "random_trajectory",
    "generate_dataset",
    "write_tensor_file",
    "read_tensor_file",
    "load_manifest",
    "load_split",
    "batch_iter",
    "blob_centroids",
]

CLASS_NAMES = (
    "swipe_right", "swipe_left", "swipe_down", "swipe_up",
    "diagonal_down_right", "diagonal_up_right",
    "circle_cw", "circle_ccw",
)
STYLES = ("intensity", "depth", "flow")

MAGIC = b"MTUT"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
MAX_ELEMENTS = 1 << 40


# -- tensor container -------------------------------------------------------

class TensorFormatError(ValueError):
    """Malformed tensor file."""


class BadMagicError(TensorFormatError):
    pass


class BadVersionError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class ExtentError(TensorFormatError):
    pass


def encode_tensor(t: np.ndarray, dtype_code: int = 1) -> bytes:
    t = np.asarray(t)
    if t.ndim == 0:
        t = t.reshape(1)
    if dtype_code not in DTYPES:
        raise ValueError(f"unsupported dtype code {dtype_code}")
    header = MAGIC + struct.pack(f"<II{t.ndim}II", VERSION, t.ndim, *t.shape, dtype_code)
    return header + np.ascontiguousarray(t, dtype=DTYPES[dtype_code]).tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise TruncatedError(f"{source}: header truncated")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise BadVersionError(f"{source}: unsupported version {version}")
    off = 12 + 4 * ndim
    if len(buf) < off + 4:
        raise TruncatedError(f"{source}: header truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, 12)
    (code,) = struct.unpack_from("<I", buf, off)
    off += 4
    if ndim == 0 or any(d == 0 for d in dims):
        raise ExtentError(f"{source}: invalid extents {dims}")
    count = math.prod(dims)
    if count > MAX_ELEMENTS:
        raise ExtentError(f"{source}: extents {dims} overflow the element limit")
    if code not in DTYPES:
        raise TensorFormatError(f"{source}: unknown dtype code {code}")
    nbytes = count * DTYPES[code].itemsize
    if len(buf) - off < nbytes:
        raise TruncatedError(f"{source}: payload has {len(buf) - off} of {nbytes} bytes")
    if len(buf) - off > nbytes:
        raise TensorFormatError(f"{source}: {len(buf) - off - nbytes} trailing bytes")
    data = np.frombuffer(buf, dtype=DTYPES[code], count=count, offset=off)
    return data.astype(np.float64).reshape(dims)


def write_tensor_file(path, t: np.ndarray, dtype_code: int = 1) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_tensor(t, dtype_code))
    except OSError as exc:
        raise OSError(f"cannot write tensor file {path}: {exc}") from exc


def read_tensor_file(path) -> np.ndarray:
    """Load a tensor file into a float64 array."""
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))


# -- rendering --------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryParams:
    x0: float
    y0: float
    speed: float
    phase: float = 0.0
    radius: float = 3.0


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    style: str = "intensity"
    noise_sigma: float = 0.0
    dropout_prob: float = 0.0

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"unknown render style {self.style!r}")
        if self.noise_sigma < 0 or not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError(f"modality {self.name}: bad corruption parameters")


def _default_modalities():
    return [ModalitySpec("a", "intensity"), ModalitySpec("b", "depth", noise_sigma=0.5)]


@dataclass
class DatasetSpec:
    classes: int = 8
    train_count: int = 400
    test_count: int = 200
    extents: tuple[int, int, int] = (16, 16, 16)
    modalities: list[ModalitySpec] = field(default_factory=_default_modalities)
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m)
                           for m in self.modalities]
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.classes <= len(CLASS_NAMES):
            raise ValueError(f"classes must be in [2, {len(CLASS_NAMES)}], got {self.classes}")
        for name in ("train_count", "test_count"):
            n = getattr(self, name)
            if n <= 0 or n % self.classes:
                raise ValueError(f"{name}={n} must be positive and divisible by {self.classes}")
        if len(self.extents) != 3 or min(self.extents[:2]) < 5 or self.extents[2] < 2:
            raise ValueError(f"extents {self.extents} too small")
        names = [m.name for m in self.modalities]
        if not names or len(set(names)) != len(names):
            raise ValueError(f"modality names must be unique and non-empty: {names}")
        if not any(m.style == "intensity" for m in self.modalities) and \
                any(m.style == "flow" for m in self.modalities):
            raise ValueError("a flow modality needs an intensity modality to difference")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extents"] = list(self.extents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        mods = d.get("modalities")
        if mods is not None:
            known = {f.name for f in fields(ModalitySpec)}
            for m in mods:
                if isinstance(m, dict) and set(m) - known:
                    raise ValueError(f"unknown modality keys: {sorted(set(m) - known)}")
        return cls(**d)


def trajectory(class_idx: int, params: TrajectoryParams, extents) -> np.ndarray:
    """Integer blob centres ``(T, 2)`` as (x, y), clamped so the blob stays inside."""
    w, h, t = extents
    if not 0 <= class_idx < len(CLASS_NAMES):
        raise ValueError(f"class index {class_idx} out of range")
    frames = np.arange(t, dtype=np.float64)
    s = params.speed
    if class_idx < 6:
        dx, dy = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1)][class_idx]
        x = params.x0 + dx * s * frames
        y = params.y0 + dy * s * frames
    else:
        sign = 1.0 if class_idx == 6 else -1.0
        # image y points down, so increasing angle turns clockwise on screen
        theta = params.phase + sign * s * frames
        x = params.x0 + params.radius * np.cos(theta)
        y = params.y0 + params.radius * np.sin(theta)
    lo = 2
    x = np.clip(np.rint(x), lo, w - 1 - lo)
    y = np.clip(np.rint(y), lo, h - 1 - lo)
    return np.stack([x, y], axis=1).astype(np.int64)


def random_trajectory(class_idx: int, extents, rng: RngStream) -> TrajectoryParams:
    """Randomized start, speed and phase for one clip of the given class."""
    w, h, t = extents
    u = rng.uniform(4)
    span_x, span_y = w - 5, h - 5
    if class_idx < 6:
        # forward-moving axes start near the low edge, backward ones near the high edge
        dx, dy = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1)][class_idx]
        speed = (0.55 + 0.3 * u[2]) * min(span_x, span_y) / max(t - 1, 1)

        def start(d, span, uu):
            if d > 0:
                return 2 + 0.2 * span * uu
            if d < 0:
                return 2 + span - 0.2 * span * uu
            return 2 + span * uu

        return TrajectoryParams(start(dx, span_x, u[0]), start(dy, span_y, u[1]), speed)
    radius = 0.3 * min(span_x, span_y) * (0.8 + 0.2 * u[3])
    cx = 2 + span_x / 2 + (u[0] - 0.5) * 0.2 * span_x
    cy = 2 + span_y / 2 + (u[1] - 0.5) * 0.2 * span_y
    omega = 2 * math.pi / t * (0.8 + 0.4 * u[2])
    phase = 2 * math.pi * rng.next_uniform()
    return TrajectoryParams(cx, cy, omega, phase, radius)


def _box_blur(frames: np.ndarray) -> np.ndarray:
    # frames: (W, H, T); 3x3 spatial mean with zero padding
    p = np.pad(frames, ((1, 1), (1, 1), (0, 0)))
    w, h = frames.shape[:2]
    out = np.zeros_like(frames)
    for a in range(3):
        for b in range(3):
            out += p[a:a + w, b:b + h]
    return out / 9.0


def render_clip(class_idx: int, params: TrajectoryParams, extents,
                modalities: Sequence[ModalitySpec] = None) -> dict[str, np.ndarray]:
    """Render every modality of one clean clip as ``(W, H, T, 1)`` arrays."""
    if modalities is None:
        modalities = _default_modalities() + [ModalitySpec("c", "flow")]
    w, h, t = extents
    centres = trajectory(class_idx, params, extents)
    inten = np.zeros((w, h, t))
    for f, (x, y) in enumerate(centres):
        inten[x - 1:x + 2, y - 1:y + 2, f] = 1.0
    out = {}
    for m in modalities:
        if m.style == "intensity":
            v = inten
        elif m.style == "depth":
            v = 1.0 - _box_blur(inten)
        else:
            v = np.zeros_like(inten)
            v[:, :, 1:] = inten[:, :, 1:] - inten[:, :, :-1]
        out[m.name] = v[..., None].copy()
    return out


def blob_centroids(v: np.ndarray, style: str) -> np.ndarray:
    """Per-frame (x, y) centroid of the blob in a rendered modality."""
    mass = v[..., 0]
    if style == "depth":
        mass = 1.0 - mass
    elif style == "flow":
        mass = np.maximum(mass, 0.0)
    w, h, t = mass.shape
    xs = np.arange(w)[:, None]
    ys = np.arange(h)[None, :]
    out = np.full((t, 2), np.nan)
    for f in range(t):
        m = mass[:, :, f]
        total = m.sum()
        if total > 0:
            out[f] = [(m * xs).sum() / total, (m * ys).sum() / total]
    return out


def corrupt(clip: dict[str, np.ndarray], modality: str, noise_sigma: float,
            dropout_prob: float, rng: RngStream) -> dict[str, np.ndarray]:
    """Gaussian noise on one modality, then zero whole frames with probability p."""
    if modality not in clip:
        raise KeyError(f"unknown modality {modality!r}")
    if noise_sigma < 0 or not 0.0 <= dropout_prob <= 1.0:
        raise ValueError("noise_sigma must be >= 0 and dropout_prob in [0, 1]")
    out = dict(clip)
    v = clip[modality].copy()
    if noise_sigma > 0:
        v += rng.normal(v.shape, noise_sigma)
    if dropout_prob > 0:
        drop = rng.uniform(v.shape[2]) < dropout_prob
        v[:, :, drop, :] = 0.0
    out[modality] = v
    return out


# -- dataset on disk --------------------------------------------------------

@dataclass(frozen=True)
class ClipRecord:
    id: str
    label: int
    paths: dict[str, Path]


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(", ", ": "))


def generate_dataset(spec: DatasetSpec, out_dir) -> Path:
    """Write ``train.jsonl``, ``test.jsonl``, tensor files and ``dataset.json``."""
    spec.validate()
    out = Path(out_dir)
    root = RngStream(spec.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split_no, (split, count) in enumerate(
                [("train", spec.train_count), ("test", spec.test_count)]):
            rng = root.spawn(split_no + 1)
            (out / split).mkdir(exist_ok=True)
            lines = []
            for i in range(count):
                label = i % spec.classes
                clip_id = f"{split}-{i:05d}"
                params = random_trajectory(label, spec.extents, rng)
                clip = render_clip(label, params, spec.extents, spec.modalities)
                for m in spec.modalities:
                    clip = corrupt(clip, m.name, m.noise_sigma, m.dropout_prob, rng)
                rel = {}
                for m in spec.modalities:
                    rel[m.name] = f"{split}/{clip_id}_{m.name}.mtut"
                    write_tensor_file(out / rel[m.name], clip[m.name])
                lines.append(_dump_json({"id": clip_id, "label": label, "modalities": rel}))
            (out / f"{split}.jsonl").write_text("\n".join(lines) + "\n")
        (out / "dataset.json").write_text(_dump_json(spec.to_dict()) + "\n")
    except OSError as exc:
        raise OSError(f"dataset generation failed under {out}: {exc}") from exc
    return out


def load_manifest(path) -> list[ClipRecord]:
    """Parse a manifest; tensor paths resolve relative to the manifest's directory."""
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        paths = {k: path.parent / v for k, v in obj["modalities"].items()}
        for name, p in paths.items():
            if not p.is_file():
                raise FileNotFoundError(f"clip {obj['id']}: missing {name} tensor {p}")
        records.append(ClipRecord(obj["id"], int(obj["label"]), paths))
    return records


def load_split(path, modalities: Optional[Sequence[str]] = None):
    """Load a whole manifest into memory.

    Returns ``(arrays, labels, ids)`` with ``arrays[name]`` of shape
    ``(N, W, H, T, C)``.
    """
    records = load_manifest(path)
    if not records:
        raise ValueError(f"{path}: empty manifest")
    names = list(modalities) if modalities is not None else list(records[0].paths)
    arrays = {}
    for name in names:
        try:
            arrays[name] = np.stack([read_tensor_file(r.paths[name]) for r in records])
        except KeyError:
            raise KeyError(f"{path}: modality {name!r} not in manifest") from None
    labels = np.array([r.label for r in records], dtype=np.int64)
    return arrays, labels, [r.id for r in records]


def batch_iter(items: Sequence, batch_size: int, rng: Optional[RngStream] = None,
               shuffle: bool = False) -> Iterator[list]:
    """Yield consecutive batches; a seeded Fisher-Yates order when shuffling."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = list(range(len(items)))
    if shuffle:
        if rng is None:
            raise ValueError("shuffle needs an rng")
        order = rng.permutation(len(items))
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]
