"""Synthetic scene generation and the image/annotation file formats.

Scenes are filled geometric shapes (rectangles, ellipses, triangles) over a
smooth low-frequency background. All randomness comes from a counter-based
Philox stream keyed by (seed, scene_id), so any scene regenerates bitwise
identically regardless of generation order.

File formats:
  * binary PPM (P6, maxval 255), quantized round-to-nearest on write;
  * .rawimg: magic "RAPI" (images) or "RAPP" (signed perturbations),
    three little-endian uint32 (height, width, channels) then float64
    little-endian values in row-major order — lossless;
  * annotations: JSON mapping scene-id to a list of {"x","y","w","h"}
    center-size boxes, full float precision.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .rpn import Box, GroundTruth


class FormatError(ValueError):
    """Malformed image or annotation payload."""


class ConfigError(ValueError):
    """Invalid generation or experiment configuration."""


@dataclass(frozen=True)
class GeometryConfig:
    height: int = 64
    width: int = 64
    min_shapes: int = 1
    max_shapes: int = 5
    min_side: float = 12.0
    max_side: float = 40.0
    margin: float = 6.0
    max_overlap_iou: float = 0.25

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigError("image dimensions must be at least 8x8")
        if not (1 <= self.min_shapes <= self.max_shapes):
            raise ConfigError("need 1 <= min_shapes <= max_shapes")
        if not (0 < self.min_side <= self.max_side):
            raise ConfigError("need 0 < min_side <= max_side")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")
        if (self.width - 1 - self.margin < self.margin
                or self.height - 1 - self.margin < self.margin):
            raise ConfigError(
                f"margin {self.margin} leaves no room for shape centers in a "
                f"{self.width}x{self.height} image")


@dataclass
class Scene:
    image: np.ndarray          # (H, W, 3) float64 in [0, 255]
    truth: GroundTruth
    scene_id: int
    seed: int


def _scene_rng(seed: int, scene_id: int) -> np.random.Generator:
    key = np.array([seed, scene_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _smooth_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Bilinear upsample of a coarse random grid, per channel."""
    grid = rng.uniform(55.0, 135.0, size=(5, 5, 3))
    ys = np.linspace(0.0, 4.0, h)
    xs = np.linspace(0.0, 4.0, w)
    y0 = np.minimum(ys.astype(int), 3)
    x0 = np.minimum(xs.astype(int), 3)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    top = g00 * (1 - fx) + g01 * fx
    bot = g10 * (1 - fx) + g11 * fx
    return top * (1 - fy) + bot * fy


def _shape_mask(kind: int, cx, cy, w, h, xs, ys) -> np.ndarray:
    if kind == 0:       # rectangle
        return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
    if kind == 1:       # ellipse
        return ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0
    # upward triangle: apex at the top edge of the box
    top = cy - h / 2
    frac = (ys - top) / h
    inside_y = (frac >= 0.0) & (frac <= 1.0)
    return inside_y & (np.abs(xs - cx) <= frac * (w / 2))


def _tight_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return Box(x=(x0 + x1) / 2.0, y=(y0 + y1) / 2.0,
               w=float(x1 - x0 + 1), h=float(y1 - y0 + 1))


def generate_scene(seed: int, scene_id: int, geometry: GeometryConfig,
                   return_masks: bool = False):
    """Render one scene. With return_masks, also hand back per-shape masks."""
    geometry.validate()
    rng = _scene_rng(seed, scene_id)
    h, w = geometry.height, geometry.width
    image = _smooth_background(rng, h, w)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    n_shapes = int(rng.integers(geometry.min_shapes, geometry.max_shapes + 1))
    boxes: list[Box] = []
    masks: list[np.ndarray] = []
    from .metrics import iou as iou_pair
    for _ in range(n_shapes):
        for _attempt in range(40):
            kind = int(rng.integers(0, 3))
            cx = rng.uniform(geometry.margin, w - 1 - geometry.margin)
            cy = rng.uniform(geometry.margin, h - 1 - geometry.margin)
            sw = rng.uniform(geometry.min_side, geometry.max_side)
            sh = rng.uniform(geometry.min_side, geometry.max_side)
            mask = _shape_mask(kind, cx, cy, sw, sh, xs, ys)
            if mask.sum() < 9:
                continue
            box = _tight_box(mask)
            if any(iou_pair(box, b) > geometry.max_overlap_iou for b in boxes):
                continue
            bright = rng.integers(0, 2) == 1
            if bright:
                color = rng.uniform(180.0, 255.0, size=3)
            else:
                color = rng.uniform(0.0, 35.0, size=3)
            image[mask] = color
            boxes.append(box)
            masks.append(mask)
            break
    image = np.clip(image, 0.0, 255.0)
    scene = Scene(image=image, truth=GroundTruth(boxes=boxes),
                  scene_id=scene_id, seed=seed)
    if return_masks:
        return scene, masks
    return scene


def generate_dataset(seed: int, count: int,
                     geometry: GeometryConfig | None = None,
                     start_id: int = 0) -> list[Scene]:
    if count <= 0:
        raise ConfigError("count must be positive")
    geometry = geometry or GeometryConfig()
    geometry.validate()
    return [generate_scene(seed, start_id + i, geometry) for i in range(count)]


# ---------------------------------------------------------------------------
# PPM (P6)


def write_image(path, image: np.ndarray) -> None:
    """Binary PPM with round-to-nearest quantization."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"expected (H,W,3) image, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 255.0:
        raise FormatError("pixel values must lie in [0, 255]")
    h, w = arr.shape[:2]
    quantized = np.rint(arr).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {start}")
        return data[start:pos], start

    magic, off = token()
    if magic != b"P6":
        raise FormatError(f"{path}: bad magic {magic!r} at byte {off}")
    fields = []
    for _ in range(3):
        tok, off = token()
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(
                f"{path}: non-numeric header field {tok!r} at byte {off}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    expected = h * w * 3
    payload = data[pos:pos + expected]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: truncated payload at byte {pos + len(payload)} "
            f"(expected {expected} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float64)


# ---------------------------------------------------------------------------
# lossless raw images

RAW_IMAGE_MAGIC = b"RAPI"
RAW_PERTURBATION_MAGIC = b"RAPP"


def write_rawimg(path, array: np.ndarray, magic: bytes = RAW_IMAGE_MAGIC) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 3:
        raise FormatError(f"expected (H,W,C) array, got {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<III", h, w, c))
        f.write(arr.astype("<f8").tobytes())


def read_rawimg(path, magic: bytes = RAW_IMAGE_MAGIC) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r} at byte 0")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    h, w, c = struct.unpack("<III", data[4:16])
    expected = 16 + h * w * c * 8
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload length {len(data)} != expected {expected} "
            f"at byte {min(len(data), expected)}")
    return np.frombuffer(data, dtype="<f8", offset=16).reshape(h, w, c).copy()


# ---------------------------------------------------------------------------
# annotations


def write_annotations(path, truths: dict[int, GroundTruth]) -> None:
    payload = {
        str(scene_id): [{"x": b.x, "y": b.y, "w": b.w, "h": b.h}
                        for b in truth.boxes]
        for scene_id, truth in truths.items()
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def read_annotations(path) -> dict[int, GroundTruth]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    out: dict[int, GroundTruth] = {}
    for key, entries in payload.items():
        try:
            scene_id = int(key)
        except ValueError:
            raise FormatError(f"scene-id {key!r} is not an integer") from None
        boxes = []
        for entry in entries:
            for fieldname in ("x", "y", "w", "h"):
                if fieldname not in entry:
                    raise FormatError(
                        f"scene-id {key}: box missing field {fieldname!r}")
            if entry["w"] <= 0 or entry["h"] <= 0:
                raise FormatError(
                    f"scene-id {key}: non-positive box size "
                    f"w={entry['w']}, h={entry['h']}")
            boxes.append(Box(x=float(entry["x"]), y=float(entry["y"]),
                             w=float(entry["w"]), h=float(entry["h"])))
        out[scene_id] = GroundTruth(boxes=boxes)
    return out
