"""Synthetic equirectangular sequences with objects that cross the seam.

Column 0 adjoins column ``W-1``: objects translate horizontally modulo the
frame width, so a moving object eventually splits across the left and right
edges. Continuous coordinates put pixel ``j`` on ``[j, j+1)``; an object
centred at ``x = W`` (equivalently 0) straddles the seam symmetrically.

On-disk layout::

    root/manifest.json
    root/<video>/frames/00001.ppm   (binary P6)
    root/<video>/masks/00001.pgm    (binary P5, one label per pixel)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "panoseg-dataset"
MANIFEST_VERSION = 1

PALETTES: dict[str, tuple[int, int, int]] = {
    "red": (215, 45, 40),
    "green": (45, 190, 70),
    "blue": (45, 85, 225),
    "yellow": (230, 205, 45),
    "magenta": (200, 50, 195),
    "cyan": (45, 195, 205),
    "orange": (240, 135, 30),
    "white": (235, 235, 235),
}
UNSEEN_PALETTES = ("orange", "white")
SEEN_PALETTES = tuple(p for p in PALETTES if p not in UNSEEN_PALETTES)
SHAPES = ("disk", "rect")


@dataclass(frozen=True)
class ObjectSpec:
    """One moving object. ``rx`` is the radius of a disk or the half-width of
    a rectangle; ``ry`` is the rectangle half-height (ignored for disks)."""

    shape: str
    cx: float
    cy: float
    rx: float
    ry: float
    vx: float
    color: tuple[int, int, int]
    category: str
    texture_seed: int = 0

    @property
    def width(self) -> float:
        return 2 * self.rx

    @property
    def height(self) -> float:
        return 2 * (self.rx if self.shape == "disk" else self.ry)


@dataclass(frozen=True)
class SynthConfig:
    height: int
    width: int
    frames: int
    objects: tuple[ObjectSpec, ...]
    noise: float = 3.0
    distortion: float = 0.0
    seed: int = 0
    fps: int = 6
    video_id: str = "video"
    m_max: int = 3

    def validate(self) -> None:
        if self.width % 2:
            raise ConfigError(f"frame width must be even, got {self.width}")
        if self.height < 1 or self.width < 2:
            raise ConfigError(f"invalid frame size {self.height}x{self.width}")
        if self.frames < 2:
            raise ConfigError("a sequence needs at least 2 frames")
        if len(self.objects) > self.m_max:
            raise ConfigError(f"{len(self.objects)} objects exceed m_max={self.m_max}")
        for obj in self.objects:
            if obj.shape not in SHAPES:
                raise ConfigError(f"unknown shape {obj.shape!r}")
            if obj.rx <= 0 or (obj.shape == "rect" and obj.ry <= 0):
                raise ConfigError("object extents must be positive")
            if obj.width > self.width or obj.height > self.height:
                raise ConfigError(
                    f"object {obj.category} ({obj.width:g}x{obj.height:g}) is larger than the frame "
                    f"({self.width}x{self.height})"
                )
        if self.noise < 0 or self.distortion < 0:
            raise ConfigError("noise and distortion must be non-negative")


@dataclass
class ObjectMeta:
    id: int
    category: str
    seen: bool = True


@dataclass
class VideoMeta:
    id: str
    frames: int
    height: int
    width: int
    fps: int = 6
    split: str = "train"
    objects: list[ObjectMeta] = field(default_factory=list)

    def frame_file(self, t: int) -> str:
        return f"{self.id}/frames/{t:05d}.ppm"

    def mask_file(self, t: int) -> str:
        return f"{self.id}/masks/{t:05d}.pgm"

    def to_json(self) -> dict:
        d = asdict(self)
        d["frame_files"] = [self.frame_file(t) for t in range(1, self.frames + 1)]
        d["mask_files"] = [self.mask_file(t) for t in range(1, self.frames + 1)]
        return d


@dataclass
class VideoSequence:
    meta: VideoMeta
    frames: np.ndarray  # (T, H, W, 3) uint8
    masks: np.ndarray  # (T, H, W) uint8


# ---------------------------------------------------------------- rendering


def _wrapped_dx(cols: np.ndarray, cx: float, width: int) -> np.ndarray:
    return np.mod(cols + 0.5 - cx + width / 2, width) - width / 2


def _stretch(rows: np.ndarray, height: int, distortion: float) -> np.ndarray:
    """Horizontal magnification of each row (1 at the equator)."""
    if distortion == 0:
        return np.ones_like(rows, dtype=float)
    lat = (rows + 0.5) / height * math.pi - math.pi / 2
    return np.minimum(1.0 + distortion * (1.0 / np.cos(lat) - 1.0), 8.0)


def object_offsets(obj: ObjectSpec, t: int, height: int, width: int, distortion: float = 0.0):
    """Object-local coordinates ``(dx, dy)`` of every pixel in frame ``t``
    (0-based), with the width wrap and latitude stretch applied."""
    rows = np.arange(height, dtype=float)[:, None]
    cols = np.arange(width, dtype=float)[None, :]
    cx = math.fmod(obj.cx + obj.vx * t, width)
    dx = _wrapped_dx(cols, cx, width) / _stretch(rows, height, distortion)
    dy = np.broadcast_to(rows + 0.5 - obj.cy, dx.shape)
    return dx, dy


def object_region(obj: ObjectSpec, t: int, height: int, width: int, distortion: float = 0.0) -> np.ndarray:
    dx, dy = object_offsets(obj, t, height, width, distortion)
    if obj.shape == "disk":
        return dx * dx + dy * dy <= obj.rx * obj.rx
    return (np.abs(dx) <= obj.rx) & (np.abs(dy) <= obj.ry)


def _texture(obj: ObjectSpec, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(obj.texture_seed)
    fx, fy = rng.uniform(0.3, 1.2, size=2)
    phase = rng.uniform(0, 2 * math.pi)
    shade = 0.8 + 0.2 * np.sin(fx * dx + fy * dy + phase)
    return shade[..., None] * np.asarray(obj.color, dtype=float)


def _background(height: int, width: int, seed: int) -> np.ndarray:
    # integer horizontal frequencies keep the background continuous across the seam
    rng = np.random.default_rng([seed, 0xB6])
    rows = (np.arange(height)[:, None] + 0.5) / height
    cols = (np.arange(width)[None, :] + 0.5) / width
    base = rng.uniform(70, 130, size=3)
    out = np.broadcast_to(base, (height, width, 3)).copy()
    for _ in range(3):
        k = rng.integers(1, 5)
        fy = rng.uniform(0.5, 3.0)
        amp = rng.uniform(8, 20, size=3)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        wave = np.sin(2 * math.pi * k * cols + phase[0]) * np.cos(2 * math.pi * fy * rows + phase[1])
        out += wave[..., None] * amp
    return out


def generate_sequence(cfg: SynthConfig) -> VideoSequence:
    """Render frames and exact label masks. Objects are painted in order, so
    later objects occlude earlier ones; label ``k`` marks ``cfg.objects[k-1]``.
    Sensor noise is drawn independently per frame from ``cfg.seed``."""
    cfg.validate()
    h, w, T = cfg.height, cfg.width, cfg.frames
    background = _background(h, w, cfg.seed)
    frames = np.empty((T, h, w, 3), dtype=np.uint8)
    masks = np.zeros((T, h, w), dtype=np.uint8)
    for t in range(T):
        img = background.copy()
        for label, obj in enumerate(cfg.objects, start=1):
            dx, dy = object_offsets(obj, t, h, w, cfg.distortion)
            if obj.shape == "disk":
                region = dx * dx + dy * dy <= obj.rx * obj.rx
            else:
                region = (np.abs(dx) <= obj.rx) & (np.abs(dy) <= obj.ry)
            img[region] = _texture(obj, dx, dy)[region]
            masks[t][region] = label
        if cfg.noise > 0:
            rng = np.random.default_rng([cfg.seed, t, 0x5E])
            img += rng.normal(0.0, cfg.noise, size=img.shape)
        frames[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    meta = VideoMeta(
        id=cfg.video_id,
        frames=T,
        height=h,
        width=w,
        fps=cfg.fps,
        objects=[
            ObjectMeta(i, obj.category, obj.category.split("-", 1)[-1] not in UNSEEN_PALETTES)
            for i, obj in enumerate(cfg.objects, start=1)
        ],
    )
    return VideoSequence(meta, frames, masks)


def random_config(
    rng: np.random.Generator,
    video_id: str,
    height: int,
    width: int,
    frames: int,
    n_objects: int,
    allow_unseen: bool = False,
    noise: float = 3.0,
    distortion: float = 0.0,
    seed: int = 0,
) -> SynthConfig:
    """Sample objects that each cross the seam somewhere in the middle of the
    clip. Speeds never exceed an object's width, so a crossing frame always
    shows the object split across both edges."""
    palettes = list(PALETTES) if allow_unseen else list(SEEN_PALETTES)
    lanes = rng.permutation(n_objects)
    objects = []
    for i in range(n_objects):
        shape = SHAPES[rng.integers(len(SHAPES))]
        if allow_unseen and rng.random() < 0.4:
            palette = UNSEEN_PALETTES[rng.integers(len(UNSEEN_PALETTES))]
        else:
            palette = palettes[rng.integers(len(palettes))]
            if palette in UNSEEN_PALETTES:
                palette = SEEN_PALETTES[rng.integers(len(SEEN_PALETTES))]
        scale = min(height, width) / 64
        if shape == "disk":
            rx = ry = float(rng.uniform(5.0, 9.0) * scale)
        else:
            rx = float(rng.uniform(4.0, 10.0) * scale)
            ry = float(rng.uniform(4.0, 8.0) * scale)
        lane_h = height / n_objects
        cy = float(np.clip((lanes[i] + 0.5) * lane_h + rng.uniform(-0.2, 0.2) * lane_h, ry, height - ry))
        speed = min(float(rng.uniform(1.5, 6.0) * width / 128), 2 * rx)
        vx = speed if rng.random() < 0.5 else -speed
        t_cross = rng.uniform(0.25, 0.75) * (frames - 1)
        cx = float(np.mod(-vx * t_cross, width))
        objects.append(
            ObjectSpec(
                shape=shape,
                cx=cx,
                cy=cy,
                rx=rx,
                ry=ry,
                vx=vx,
                color=PALETTES[palette],
                category=f"{shape}-{palette}",
                texture_seed=int(rng.integers(1 << 31)),
            )
        )
    return SynthConfig(
        height=height,
        width=width,
        frames=frames,
        objects=tuple(objects),
        noise=noise,
        distortion=distortion,
        seed=seed,
        video_id=video_id,
    )


def generate_dataset(
    videos: int,
    frames: int,
    height: int,
    width: int,
    objects: int = 2,
    seed: int = 0,
    val_videos: int | None = None,
    noise: float = 3.0,
    distortion: float = 0.0,
) -> list[VideoSequence]:
    """``videos`` sequences; the last ``val_videos`` (default ``videos // 3``)
    are tagged ``val`` and may contain categories never seen in training."""
    if videos < 1:
        raise ConfigError("need at least one video")
    if objects < 1:
        raise ConfigError("need at least one object per video")
    n_val = videos // 3 if val_videos is None else val_videos
    if not 0 <= n_val <= videos:
        raise ConfigError(f"val_videos must lie in [0, {videos}]")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(videos):
        split = "val" if i >= videos - n_val else "train"
        cfg = random_config(
            rng,
            f"vid{i:03d}",
            height,
            width,
            frames,
            objects,
            allow_unseen=split == "val",
            noise=noise,
            distortion=distortion,
            seed=int(rng.integers(1 << 31)),
        )
        seq = generate_sequence(cfg)
        seq.meta.split = split
        out.append(seq)
    return out


# ---------------------------------------------------------------- dataset I/O


def write_image(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8)).save(path, format="PPM")


def read_image(path: Path, rgb: bool) -> np.ndarray:
    try:
        with Image.open(path) as img:
            want = "RGB" if rgb else "L"
            if img.mode != want:
                raise FormatError(f"{path}: expected {want} image, found {img.mode}", path)
            return np.array(img, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise FormatError(f"missing file: {path}", path) from exc
    except OSError as exc:
        raise FormatError(f"unreadable image {path}: {exc}", path) from exc


def write_mask(path: Path, mask: np.ndarray) -> None:
    write_image(path, mask)


def read_mask(path: Path) -> np.ndarray:
    return read_image(path, rgb=False)


def write_manifest(root: Path, metas: Iterable[VideoMeta]) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "videos": [m.to_json() for m in metas],
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_dataset(root: str | Path, sequences: Iterable[VideoSequence]) -> None:
    root = Path(root)
    sequences = list(sequences)
    for seq in sequences:
        for t in range(seq.meta.frames):
            write_image(root / seq.meta.frame_file(t + 1), seq.frames[t])
            write_mask(root / seq.meta.mask_file(t + 1), seq.masks[t])
    write_manifest(root, [s.meta for s in sequences])


def read_manifest(path: str | Path) -> list[VideoMeta]:
    """Parse a manifest file (or the manifest inside a dataset directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"missing manifest: {path}", path) from exc
    except ValueError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}", path) from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a {MANIFEST_FORMAT} manifest", path)
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('version')!r}", path)
    metas = []
    try:
        for v in doc["videos"]:
            meta = VideoMeta(
                id=v["id"],
                frames=int(v["frames"]),
                height=int(v["height"]),
                width=int(v["width"]),
                fps=int(v.get("fps", 6)),
                split=v.get("split", "train"),
                objects=[ObjectMeta(int(o["id"]), o["category"], bool(o.get("seen", True))) for o in v["objects"]],
            )
            if meta.frames < 2:
                raise FormatError(f"{path}: video {meta.id} has fewer than 2 frames", path)
            expected = meta.to_json()
            for key in ("frame_files", "mask_files"):
                if key in v and v[key] != expected[key]:
                    raise FormatError(f"{path}: video {meta.id}: {key} do not follow the dataset layout", path)
            metas.append(meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed video entry: {exc!r}", path) from exc
    return metas


def load_video(root: str | Path, meta: VideoMeta, masks: str = "all") -> VideoSequence:
    """Load frames plus ``masks``: ``"all"``, ``"first"`` (frame 1 only, the
    rest zero) or ``"none"``."""
    root = Path(root)
    frames = np.stack([read_image(root / meta.frame_file(t), rgb=True) for t in range(1, meta.frames + 1)])
    if frames.shape[1:3] != (meta.height, meta.width):
        raise FormatError(f"{root / meta.frame_file(1)}: frame size {frames.shape[1:3]} disagrees with manifest")
    labels = np.zeros(frames.shape[:3], dtype=np.uint8)
    count = {"all": meta.frames, "first": 1, "none": 0}[masks]
    for t in range(1, count + 1):
        m = read_mask(root / meta.mask_file(t))
        if m.shape != frames.shape[1:3]:
            raise FormatError(f"{root / meta.mask_file(t)}: mask size {m.shape} disagrees with frames", root / meta.mask_file(t))
        labels[t - 1] = m
    return VideoSequence(meta, frames, labels)


def read_dataset(root: str | Path) -> list[VideoSequence]:
    root = Path(root)
    return [load_video(root, meta) for meta in read_manifest(root)]


def with_split(sequences: Iterable[VideoSequence], split: str) -> list[VideoSequence]:
    return [s for s in sequences if s.meta.split == split]


def shifted(cfg: SynthConfig, columns: float) -> SynthConfig:
    """The same scene with every object moved right by ``columns``."""
    return replace(cfg, objects=tuple(replace(o, cx=math.fmod(o.cx + columns, cfg.width)) for o in cfg.objects))
