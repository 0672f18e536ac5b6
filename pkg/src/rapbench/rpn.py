"""Small trainable region proposal network over a dense anchor grid.

The victim family is a set of tiny convolutional backbones (descriptor =
depth, channel width, init seed) with two 1x1 heads: objectness logits
(A channels per feature cell) and raw box offsets (4A channels). Every model
reduces the input by a total stride of 8, so a 64x64 scene yields an 8x8
feature map and, with the default 2 scales x 2 ratios, 256 proposals.

Training follows the usual anchor-matching recipe: IoU > 0.7 to any ground
truth (or being the single best anchor for a ground truth) marks an anchor
positive, IoU < 0.3 negative, the rest ignored; per step a capped 1:1-ish
sample of anchors feeds a binary cross-entropy objectness loss and positives
feed a smooth-L1 offset regression, optimized by plain SGD.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tape, Tensor, backward, clamp, conv2d, leaf, masked_select
from .metrics import iou_matrix

logger = logging.getLogger(__name__)

TOTAL_STRIDE = 8


@dataclass(frozen=True)
class Box:
    """Center-size box in pixel coordinates."""
    x: float
    y: float
    w: float
    h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class GroundTruth:
    boxes: list


@dataclass(frozen=True)
class AnchorConfig:
    stride: int = TOTAL_STRIDE
    scales: tuple[float, ...] = (16.0, 32.0)
    ratios: tuple[float, ...] = (1.0, 2.0)

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ValueError("anchor scales and ratios must be non-empty")
        if min(self.scales) <= 0 or min(self.ratios) <= 0:
            raise ValueError("anchor scales and ratios must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


_ANCHOR_CACHE: dict[tuple, np.ndarray] = {}


def anchor_grid(config: AnchorConfig, feature_h: int, feature_w: int) -> np.ndarray:
    """(H*W*A, 4) anchors, row-major by cell, then scale, then ratio."""
    key = (config, feature_h, feature_w)
    hit = _ANCHOR_CACHE.get(key)
    if hit is not None:
        return hit
    if feature_h <= 0 or feature_w <= 0:
        raise ValueError("feature map dimensions must be positive")
    cy = (np.arange(feature_h) + 0.5) * config.stride
    cx = (np.arange(feature_w) + 0.5) * config.stride
    sizes = []
    for s in config.scales:
        for r in config.ratios:
            sizes.append((s / np.sqrt(r), s * np.sqrt(r)))
    sizes = np.array(sizes)                      # (A, 2) -> w, h
    a = len(sizes)
    out = np.zeros((feature_h, feature_w, a, 4))
    out[..., 0] = cx[None, :, None]
    out[..., 1] = cy[:, None, None]
    out[..., 2] = sizes[None, None, :, 0]
    out[..., 3] = sizes[None, None, :, 1]
    out = out.reshape(-1, 4)
    out.setflags(write=False)
    _ANCHOR_CACHE[key] = out
    return out


def generate_anchors(config: AnchorConfig, feature_h: int, feature_w: int) -> list[Box]:
    grid = anchor_grid(config, feature_h, feature_w)
    return [Box(*row) for row in grid]


# offsets with |dw|, |dh| above this are clamped before exp so attacked heads
# cannot overflow the decoded sizes
DECODE_EXP_CAP = 8.0


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Standard RPN decoding: center shifts scaled by anchor size, log sizes."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(anchors)
    out[:, 0] = anchors[:, 0] + offsets[:, 0] * anchors[:, 2]
    out[:, 1] = anchors[:, 1] + offsets[:, 1] * anchors[:, 3]
    out[:, 2] = anchors[:, 2] * np.exp(np.minimum(offsets[:, 2], DECODE_EXP_CAP))
    out[:, 3] = anchors[:, 3] * np.exp(np.minimum(offsets[:, 3], DECODE_EXP_CAP))
    return out


def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Inverse of decode_boxes (for offsets below the exp cap)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(anchors)
    out[:, 0] = (targets[:, 0] - anchors[:, 0]) / anchors[:, 2]
    out[:, 1] = (targets[:, 1] - anchors[:, 1]) / anchors[:, 3]
    out[:, 2] = np.log(targets[:, 2] / anchors[:, 2])
    out[:, 3] = np.log(targets[:, 3] / anchors[:, 3])
    return out


def decode_box(anchor: Box, offsets) -> Box:
    decoded = decode_boxes(anchor.as_array(), np.asarray(offsets, dtype=np.float64))
    return Box(*decoded[0])


def encode_box(anchor: Box, target: Box) -> tuple[float, float, float, float]:
    return tuple(encode_boxes(anchor.as_array(), target.as_array())[0])


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Descriptor:
    """Architecture identity: depth, channel width, parameter seed."""
    depth: int
    width: int
    seed: int

    @property
    def name(self) -> str:
        return f"d{self.depth}w{self.width}-s{self.seed}"

    @staticmethod
    def parse(name: str) -> "Descriptor":
        try:
            d, rest = name[1:].split("w")
            w, s = rest.split("-s")
            return Descriptor(depth=int(d), width=int(w), seed=int(s))
        except (ValueError, IndexError):
            raise ValueError(f"bad descriptor name {name!r}") from None


def _layer_plan(depth: int, width: int) -> list[dict]:
    """Backbone layout per depth; every variant has total stride 8."""
    if depth == 2:
        return [
            dict(name="conv0", k=5, stride=4, pad=2, cin=3, cout=width, pool=0),
            dict(name="conv1", k=3, stride=2, pad=1, cin=width, cout=width, pool=0),
        ]
    if depth == 3:
        return [
            dict(name="conv0", k=3, stride=2, pad=1, cin=3, cout=width, pool=0),
            dict(name="conv1", k=3, stride=2, pad=1, cin=width, cout=width, pool=0),
            dict(name="conv2", k=3, stride=2, pad=1, cin=width, cout=width, pool=0),
        ]
    if depth == 4:
        return [
            dict(name="conv0", k=3, stride=1, pad=1, cin=3, cout=width, pool=2),
            dict(name="conv1", k=3, stride=1, pad=1, cin=width, cout=width, pool=2),
            dict(name="conv2", k=3, stride=1, pad=1, cin=width, cout=width, pool=2),
            dict(name="conv3", k=3, stride=1, pad=1, cin=width, cout=width, pool=0),
        ]
    raise ValueError(f"unsupported depth {depth} (expected 2, 3 or 4)")


class RpnModel:
    """Backbone + objectness/offset heads; immutable once trained."""

    def __init__(self, descriptor: Descriptor, anchor_config: AnchorConfig,
                 params: dict[str, np.ndarray]):
        self.descriptor = descriptor
        self.anchor_config = anchor_config
        self.params = params

    @classmethod
    def initialize(cls, descriptor: Descriptor,
                   anchor_config: AnchorConfig | None = None) -> "RpnModel":
        anchor_config = anchor_config or AnchorConfig()
        rng = np.random.default_rng(descriptor.seed)
        params: dict[str, np.ndarray] = {}
        for layer in _layer_plan(descriptor.depth, descriptor.width):
            fan_in = layer["k"] * layer["k"] * layer["cin"]
            std = np.sqrt(2.0 / fan_in)
            params[layer["name"] + "_w"] = rng.normal(
                0.0, std, size=(layer["k"], layer["k"], layer["cin"], layer["cout"]))
            params[layer["name"] + "_b"] = np.zeros(layer["cout"])
        a = anchor_config.anchors_per_cell
        w = descriptor.width
        params["obj_w"] = rng.normal(0.0, np.sqrt(1.0 / w), size=(1, 1, w, a))
        params["obj_b"] = np.zeros(a)
        params["off_w"] = rng.normal(0.0, np.sqrt(1.0 / w), size=(1, 1, w, 4 * a))
        params["off_b"] = np.zeros(4 * a)
        return cls(descriptor, anchor_config, params)

    @classmethod
    def zeros(cls, descriptor: Descriptor,
              anchor_config: AnchorConfig | None = None) -> "RpnModel":
        model = cls.initialize(descriptor, anchor_config)
        for name in model.params:
            model.params[name] = np.zeros_like(model.params[name])
        return model

    def copy(self) -> "RpnModel":
        return RpnModel(self.descriptor, self.anchor_config,
                        {k: v.copy() for k, v in self.params.items()})

    @property
    def name(self) -> str:
        return self.descriptor.name


@dataclass(frozen=True)
class Proposal:
    score: float
    offsets: tuple[float, float, float, float]
    anchor: Box
    decoded: Box


class ProposalSet:
    """All proposals of one forward pass, kept vectorized.

    scores and offsets stay on the tape of the forward pass so losses built
    from them backpropagate to the image; anchors and decoded boxes are plain
    arrays (the positive-proposal indicator is a constant).
    """

    def __init__(self, scores: Tensor, offsets: Tensor, anchors: np.ndarray):
        self.scores = scores
        self.offsets = offsets
        self.anchors = anchors
        self._decoded = None

    @property
    def decoded(self) -> np.ndarray:
        if self._decoded is None:
            self._decoded = decode_boxes(self.anchors, self.offsets.values)
        return self._decoded

    def __len__(self) -> int:
        return len(self.anchors)

    def __getitem__(self, j: int) -> Proposal:
        return Proposal(
            score=float(self.scores.values[j]),
            offsets=tuple(self.offsets.values[j]),
            anchor=Box(*self.anchors[j]),
            decoded=Box(*self.decoded[j]),
        )


def forward(model: RpnModel, image, params: dict[str, Tensor] | None = None) -> ProposalSet:
    """Run the RPN on an (H,W,3) image in [0,255].

    `image` may be a Tensor leaf (to attack the image) and `params` a map of
    parameter-name to leaf tensors (to train); both default to constants.
    """
    img = image if isinstance(image, Tensor) else Tensor(image)
    if img.values.ndim != 3 or img.values.shape[2] != 3:
        raise ValueError(f"forward: expected (H,W,3) image, got {img.values.shape}")
    h, w = img.values.shape[:2]
    if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
        raise ValueError(
            f"forward: image dimensions ({h},{w}) not divisible by the total "
            f"stride {TOTAL_STRIDE}")
    if params is None:
        params = {name: Tensor(arr) for name, arr in model.params.items()}
    x = nm.add(nm.scale(img, 1.0 / 127.5), Tensor(-1.0))
    for layer in _layer_plan(model.descriptor.depth, model.descriptor.width):
        x = conv2d(x, params[layer["name"] + "_w"],
                   stride=layer["stride"], padding=layer["pad"])
        x = nm.add(x, params[layer["name"] + "_b"])
        x = nm.relu(x)
        if layer["pool"]:
            x = nm.max_pool2d(x, layer["pool"])
    fh, fw = x.values.shape[:2]
    a = model.anchor_config.anchors_per_cell
    obj = nm.add(conv2d(x, params["obj_w"]), params["obj_b"])
    off = nm.add(conv2d(x, params["off_w"]), params["off_b"])
    scores = nm.sigmoid(nm.reshape(obj, (fh * fw * a,)))
    offsets = nm.reshape(off, (fh * fw * a, 4))
    anchors = anchor_grid(model.anchor_config, fh, fw)
    return ProposalSet(scores, offsets, anchors)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.15
    epochs: int = 20
    seed: int = 0
    batch_anchors: int = 64
    max_positives: int = 32
    positive_iou: float = 0.7
    negative_iou: float = 0.3
    noise_sigma_max: float = 12.0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 <= self.negative_iou <= self.positive_iou <= 1:
            raise ValueError("need 0 <= negative_iou <= positive_iou <= 1")


def match_anchors(anchors: np.ndarray, gt: np.ndarray,
                  positive_iou: float, negative_iou: float):
    """Anchor labels: 1 positive, 0 negative, -1 ignored; plus matched gt index.

    Positives are anchors with IoU above the threshold to any ground truth,
    plus the single best anchor of each ground truth (ties to the lowest
    anchor index).
    """
    ious = iou_matrix(anchors, gt)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(anchors)), best_gt]
    labels = np.full(len(anchors), -1, dtype=np.int8)
    labels[best_iou < negative_iou] = 0
    labels[best_iou > positive_iou] = 1
    for j in range(gt.shape[0]):
        i = int(ious[:, j].argmax())
        labels[i] = 1
        best_gt[i] = j
    return labels, best_gt


def _bce_sum(scores_sel: Tensor, targets: np.ndarray) -> Tensor:
    s = clamp(scores_sel, 1e-12, 1.0 - 1e-12)
    t = Tensor(targets)
    pos_term = nm.multiply(t, nm.log(s))
    neg_term = nm.multiply(Tensor(1.0 - targets),
                           nm.log(nm.subtract(Tensor(np.ones_like(targets)), s)))
    return nm.scale(nm.reduce_sum(nm.add(pos_term, neg_term)), -1.0)


def _smooth_l1_sum(diff: Tensor) -> Tensor:
    # the quadratic branch only applies inside |d| < 1, so clamping there
    # first leaves values and gradients unchanged but cannot overflow
    quad = (np.abs(diff.values) < 1.0).astype(np.float64)
    absd = nm.add(nm.relu(diff), nm.relu(nm.scale(diff, -1.0)))
    near = nm.multiply(Tensor(quad),
                       nm.scale(nm.square(clamp(diff, -1.0, 1.0)), 0.5))
    far = nm.multiply(Tensor(1.0 - quad),
                      nm.subtract(absd, Tensor(np.full_like(quad, 0.5))))
    return nm.reduce_sum(nm.add(near, far))


def train_rpn(model: RpnModel, dataset, config: TrainingConfig):
    """Train a copy of the model; returns (trained model, per-epoch mean loss)."""
    config.validate()
    trained = model.copy()
    rng = np.random.default_rng(config.seed)

    prepared = []
    for scene in dataset:
        if not scene.truth.boxes:
            logger.warning("scene %s has no ground-truth boxes; skipped",
                           scene.scene_id)
            continue
        h, w = scene.image.shape[:2]
        fh, fw = h // TOTAL_STRIDE, w // TOTAL_STRIDE
        anchors = anchor_grid(trained.anchor_config, fh, fw)
        gt = np.array([b.as_array() for b in scene.truth.boxes])
        labels, matched = match_anchors(anchors, gt, config.positive_iou,
                                        config.negative_iou)
        targets = encode_boxes(anchors, gt[matched])
        prepared.append((scene.image, labels, matched, targets))
    if not prepared:
        raise ValueError("dataset has no scenes with ground truth")

    history: list[float] = []
    for _epoch in range(config.epochs):
        losses = []
        for image, labels, _matched, targets in prepared:
            sigma = rng.uniform(0.0, config.noise_sigma_max)
            noisy = np.clip(image + sigma * rng.standard_normal(image.shape),
                            0.0, 255.0)
            pos_idx = np.flatnonzero(labels == 1)
            neg_idx = np.flatnonzero(labels == 0)
            if len(pos_idx) > config.max_positives:
                pos_idx = rng.choice(pos_idx, config.max_positives, replace=False)
            n_neg = min(len(neg_idx), config.batch_anchors - len(pos_idx))
            neg_idx = rng.choice(neg_idx, n_neg, replace=False)
            sampled = np.sort(np.concatenate([pos_idx, neg_idx]))
            smask = np.zeros(len(labels), dtype=bool)
            smask[sampled] = True
            cls_targets = (labels[sampled] == 1).astype(np.float64)
            pos_sorted = np.sort(pos_idx)
            offmask = np.zeros((len(labels), 4), dtype=bool)
            offmask[pos_sorted] = True
            reg_targets = targets[pos_sorted].reshape(-1)

            with Tape():
                leaves = {name: leaf(arr) for name, arr in trained.params.items()}
                out = forward(trained, noisy, params=leaves)
                cls_loss = nm.scale(
                    _bce_sum(masked_select(out.scores, smask), cls_targets),
                    1.0 / max(1, len(sampled)))
                diff = nm.subtract(masked_select(out.offsets, offmask),
                                   Tensor(reg_targets))
                reg_loss = nm.scale(_smooth_l1_sum(diff), 1.0 / max(1, len(pos_sorted)))
                loss = nm.add(cls_loss, reg_loss)
                grads = backward(loss)
            for name, lf in leaves.items():
                trained.params[name] -= config.learning_rate * grads[lf].values
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return trained, history


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"RAPM"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: RpnModel) -> bytes:
    """Serialized checkpoint content; round-trips bitwise."""
    desc = {
        "depth": model.descriptor.depth,
        "width": model.descriptor.width,
        "seed": model.descriptor.seed,
        "stride": model.anchor_config.stride,
        "scales": list(model.anchor_config.scales),
        "ratios": list(model.anchor_config.ratios),
    }
    desc_bytes = json.dumps(desc, sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(desc_bytes))
    buf += desc_bytes
    buf += struct.pack("<I", len(model.params))
    for name, arr in model.params.items():
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f8").tobytes()
    return bytes(buf)


def save_checkpoint(model: RpnModel, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def load_checkpoint(path) -> RpnModel:
    from .scenes import FormatError

    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated {what} at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (dlen,) = struct.unpack("<I", take(4, "descriptor length"))
    desc = json.loads(take(dlen, "descriptor").decode("utf-8"))
    descriptor = Descriptor(depth=desc["depth"], width=desc["width"],
                            seed=desc["seed"])
    anchor_config = AnchorConfig(stride=desc["stride"],
                                 scales=tuple(desc["scales"]),
                                 ratios=tuple(desc["ratios"]))
    (nparams,) = struct.unpack("<I", take(4, "parameter count"))
    params: dict[str, np.ndarray] = {}
    for _ in range(nparams):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        count = int(np.prod(shape)) if ndim else 1
        raw = take(8 * count, f"values of {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes at byte {pos}")
    return RpnModel(descriptor, anchor_config, params)
