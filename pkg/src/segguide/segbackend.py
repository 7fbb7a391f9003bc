"""Frozen segmentation backends producing multi-class and binary maps.

The backend is consumed read-only: its parameters are never registered with
an optimizer and its checksum must be identical before and after any number
of training steps. Two implementations exist: a pretrained convolutional
model loaded from a weight file, and a deterministic stub whose logits are
computed analytically from input colors (used by tests and desk-scale runs,
so nothing here depends on a large pretrained asset).
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import Domain, ImageBatch, SegKind, SegmentationMap
from .errors import (
    BackendNotLoadedError,
    CacheCorruptError,
    EmptyForegroundSetError,
    MissingWeightsError,
    ResolutionMismatchError,
)

log = logging.getLogger(__name__)

CACHE_MAGIC = b"ASLSEG1"


def prototype_palette(class_count: int) -> np.ndarray:
    """Fixed anchor colors in [-1, 1], one per class; class 0 is background.

    The palette is shared by the stub backend (logit anchors) and by the
    synthetic scene generator (region fill colors), which is what makes the
    stub's argmax analytically predictable on synthetic scenes.
    """
    if class_count < 2:
        raise ValueError("need at least 2 classes (background + 1 foreground)")
    colors = np.zeros((class_count, 3), dtype=np.float64)
    colors[0] = (-0.55, -0.45, -0.35)  # muted background
    for k in range(1, class_count):
        ang = 2.0 * np.pi * (k - 1) / max(class_count - 1, 1)
        colors[k] = (
            0.72 * np.cos(ang),
            0.72 * np.sin(ang),
            0.55 if k % 2 else -0.15,
        )
    return np.clip(colors, -0.95, 0.95)


def checksum_tensors(tensors: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the raw bytes of the given tensors, in order."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class SegBackend:
    """Interface: frozen, differentiable per-pixel class scorer."""

    class_count: int
    foreground_ids: frozenset[int]
    soft_output: bool

    def parameters(self) -> list[torch.Tensor]:
        raise NotImplementedError

    def checksum(self) -> str:
        return checksum_tensors(self.parameters())

    def multiclass_logits(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _validate_foreground(self):
        fg = self.foreground_ids
        if not fg:
            raise EmptyForegroundSetError("foreground_ids must be non-empty")
        all_ids = set(range(self.class_count))
        if not fg < all_ids:
            raise ValueError(
                f"foreground_ids {sorted(fg)} must be a strict subset of 0..{self.class_count - 1}"
            )


class ColorPrototypeBackend(SegBackend):
    """Stub backend: logit of class k is keyed to distance from a fixed color.

    logits_k(p) = -sharpness * mean_c (p_c - proto_k_c)^2, softmaxed over k.
    Fully differentiable with respect to the input image; argmax equals the
    nearest prototype, so synthetic scenes painted with the palette have an
    analytically known segmentation. ``sharpness=0`` yields uniform scores.
    """

    def __init__(self, class_count: int = 6, foreground_ids: Iterable[int] | None = None,
                 sharpness: float = 8.0, soft_output: bool = True):
        self.class_count = int(class_count)
        if foreground_ids is None:
            foreground_ids = range(1, self.class_count)
        self.foreground_ids = frozenset(int(i) for i in foreground_ids)
        self.sharpness = float(sharpness)
        self.soft_output = soft_output
        proto = torch.from_numpy(prototype_palette(self.class_count))
        self.prototypes = proto.to(torch.float32).requires_grad_(False)
        self.forward_images = 0
        self._validate_foreground()

    def parameters(self) -> list[torch.Tensor]:
        return [self.prototypes]

    def multiclass_logits(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[1] != 3:
            raise ResolutionMismatchError(
                f"backend expects 3-channel input, got {images.shape[1]}"
            )
        self.forward_images += images.shape[0]
        proto = self.prototypes.to(images.dtype).view(1, self.class_count, 3, 1, 1)
        d2 = ((images.unsqueeze(1) - proto) ** 2).mean(dim=2)
        return -self.sharpness * d2


class _SegNet(nn.Module):
    """Small fully-convolutional scorer used by the pretrained backend."""

    def __init__(self, class_count: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 1, 1), nn.ReLU(True),
            nn.Conv2d(width, width, 3, 2, 1), nn.ReLU(True),
            nn.Conv2d(width, width, 3, 1, 1), nn.ReLU(True),
            nn.Conv2d(width, class_count, 1),
        )

    def forward(self, x):
        logits = self.net(x)
        return F.interpolate(logits, size=x.shape[2:], mode="bilinear", align_corners=False)


class PretrainedSegBackend(SegBackend):
    """Wraps a pretrained segmentation network loaded from a weight file.

    The weight file is a torch archive holding ``class_count``,
    ``foreground_ids``, ``width`` and ``state`` (the module state dict).
    """

    def __init__(self, weights_path: str | os.PathLike | None = None, soft_output: bool = True):
        self.soft_output = soft_output
        self._net: _SegNet | None = None
        self.forward_images = 0
        if weights_path is not None:
            self.load(weights_path)

    def load(self, weights_path: str | os.PathLike) -> "PretrainedSegBackend":
        path = Path(weights_path)
        if not path.is_file():
            raise MissingWeightsError(f"segmentation backend weights not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        self.class_count = int(blob["class_count"])
        self.foreground_ids = frozenset(int(i) for i in blob["foreground_ids"])
        net = _SegNet(self.class_count, width=int(blob.get("width", 32)))
        net.load_state_dict(blob["state"])
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self._net = net
        self._validate_foreground()
        return self

    def parameters(self) -> list[torch.Tensor]:
        if self._net is None:
            raise BackendNotLoadedError("segmentation backend used before load()")
        return [p.data for p in self._net.parameters()]

    def multiclass_logits(self, images: torch.Tensor) -> torch.Tensor:
        if self._net is None:
            raise BackendNotLoadedError("segmentation backend used before load()")
        if images.shape[2] % 2 != 0 or images.shape[3] % 2 != 0:
            raise ResolutionMismatchError(
                f"backend requires even spatial size, got {tuple(images.shape[2:])}"
            )
        self.forward_images += images.shape[0]
        return self._net(images.to(torch.float32))


def save_pretrained_backend(path: str | os.PathLike, net: _SegNet, class_count: int,
                            foreground_ids: Iterable[int], width: int = 32) -> None:
    torch.save(
        {
            "class_count": int(class_count),
            "foreground_ids": sorted(int(i) for i in foreground_ids),
            "width": int(width),
            "state": net.state_dict(),
        },
        path,
    )


def segment_multiclass(backend: SegBackend, batch: ImageBatch) -> SegmentationMap:
    """Per-pixel soft class scores for a COLOR batch; weights untouched.

    Gradients flow back to the input (and hence the generator) when the
    backend is in soft-output mode.
    """
    if batch.domain != Domain.COLOR:
        raise ValueError(f"backend scores COLOR batches, got {batch.domain}")
    data = batch.data
    if data.shape[1] == 1:
        data = data.repeat(1, 3, 1, 1)
    logits = backend.multiclass_logits(data)
    scores = torch.softmax(logits, dim=1)
    if not backend.soft_output:
        hard = torch.zeros_like(scores)
        scores = hard.scatter(1, scores.argmax(dim=1, keepdim=True), 1.0)
    return SegmentationMap(scores=scores, kind=SegKind.MULTICLASS, class_count=backend.class_count)


def collapse_to_binary(segmap: SegmentationMap, foreground_ids: Iterable[int]) -> SegmentationMap:
    """Group classes into (background, foreground) channels, preserving mass."""
    if segmap.kind != SegKind.MULTICLASS:
        raise ValueError("collapse_to_binary takes a MULTICLASS map")
    fg = sorted(int(i) for i in foreground_ids)
    if not fg:
        raise EmptyForegroundSetError("foreground set is empty")
    if min(fg) < 0 or max(fg) >= segmap.class_count:
        raise ValueError(f"foreground ids {fg} out of range 0..{segmap.class_count - 1}")
    idx = torch.as_tensor(fg, dtype=torch.long)
    fg_score = segmap.scores.index_select(1, idx).sum(dim=1, keepdim=True)
    bg_score = segmap.scores.sum(dim=1, keepdim=True) - fg_score
    scores = torch.cat([bg_score, fg_score], dim=1)
    return SegmentationMap(scores=scores, kind=SegKind.BINARY, class_count=2)


def multiclass_argmax_in_foreground(segmap: SegmentationMap, foreground_ids: Iterable[int]) -> torch.Tensor:
    """Boolean N,h,w mask: per-pixel argmax class belongs to the foreground set."""
    fg = set(int(i) for i in foreground_ids)
    labels = segmap.scores.argmax(dim=1)
    mask = torch.zeros_like(labels, dtype=torch.bool)
    for k in fg:
        mask |= labels == k
    return mask


# ---------------------------------------------------------------------------
# On-disk cache for real-image segmentation maps
# ---------------------------------------------------------------------------


def _encode_record(scores: np.ndarray) -> bytes:
    k, h, w = scores.shape
    header = CACHE_MAGIC + struct.pack("<III", k, h, w)
    return header + scores.astype("<f4").tobytes()


def _decode_record(raw: bytes) -> np.ndarray:
    if len(raw) < len(CACHE_MAGIC) + 12 or raw[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise CacheCorruptError("bad magic")
    k, h, w = struct.unpack_from("<III", raw, len(CACHE_MAGIC))
    body = raw[len(CACHE_MAGIC) + 12 :]
    expected = k * h * w * 4
    if len(body) != expected:
        raise CacheCorruptError(f"record length {len(body)} != expected {expected}")
    scores = np.frombuffer(body, dtype="<f4").reshape(k, h, w)
    if not np.isfinite(scores).all():
        raise CacheCorruptError("non-finite scores")
    if abs(float(scores.sum(axis=0).max()) - 1.0) > 1e-4 or abs(float(scores.sum(axis=0).min()) - 1.0) > 1e-4:
        raise CacheCorruptError("scores do not normalize")
    return scores.copy()


def image_key(image: torch.Tensor, backend_checksum: str) -> str:
    """Content hash of one C,H,W image tensor, salted with the backend identity."""
    h = hashlib.sha256()
    h.update(backend_checksum.encode())
    h.update(image.detach().cpu().contiguous().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


class SegmentationCache:
    """Persists real-image multiclass maps as ``segcache/<image_key>.segmap``.

    Binary maps are recomputed from the stored multiclass scores on load,
    never stored. Writes are atomic (temp file then rename), so concurrent
    readers of completed entries are safe.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root) / "segcache"
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.segmap"

    def lookup(self, key: str) -> np.ndarray | None:
        path = self._path(key)
        if not path.is_file():
            return None
        try:
            return _decode_record(path.read_bytes())
        except CacheCorruptError as exc:
            log.warning("segcache entry %s corrupt (%s); recomputing", path.name, exc)
            return None

    def store(self, key: str, scores: np.ndarray) -> None:
        path = self._path(key)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(_encode_record(scores))
        os.replace(tmp, path)


def segment_cached(
    backend: SegBackend,
    cache: SegmentationCache,
    batch: ImageBatch,
) -> tuple[SegmentationMap, SegmentationMap]:
    """Multiclass + binary maps for real images, computing each image once.

    Cache hits never touch the backend. Returned maps carry no gradient
    (real images are constants of the optimization).
    """
    backend_sum = backend.checksum()
    keys = [image_key(img, backend_sum) for img in batch.data]
    n = len(keys)
    per_image: list[np.ndarray | None] = [cache.lookup(k) for k in keys]
    missing = [i for i, rec in enumerate(per_image) if rec is None]
    if missing:
        self_misses = len(missing)
        cache.misses += self_misses
        sub = ImageBatch(
            data=batch.data[missing].detach(),
            domain=batch.domain,
            value_range=batch.value_range,
        )
        with torch.no_grad():
            computed = segment_multiclass(backend, sub)
        arr = computed.scores.cpu().numpy()
        for j, i in enumerate(missing):
            scores = arr[j]
            cache.store(keys[i], scores)
            per_image[i] = scores
    cache.hits += n - len(missing)
    stacked = np.stack([rec for rec in per_image])  # type: ignore[arg-type]
    scores = torch.from_numpy(stacked).to(torch.float32)
    multiclass = SegmentationMap(scores=scores, kind=SegKind.MULTICLASS, class_count=backend.class_count)
    binary = collapse_to_binary(multiclass, backend.foreground_ids)
    return multiclass, binary
