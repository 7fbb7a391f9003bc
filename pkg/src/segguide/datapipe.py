"""Dataset curation, edge extraction, and paired/unpaired batch sampling.

Directory convention: trainA/trainB/testA/testB, where A holds the source
domain (sketches or label renderings) and B the color photos. Paired data
matches files across A/B by identical stem. The synthetic shape-scene
generator paints regions with the segmentation stub's prototype palette and
emits exact ``<stem>.mask`` class-index images, giving tests a free
segmentation ground truth.
"""

from __future__ import annotations

import colorsys
import json
import queue
import shutil
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .core import DEFAULT_VALUE_RANGE, Domain, ImageBatch, Task
from .errors import (
    EmptyResultError,
    LayoutModeMismatchError,
    MissingWeightsError,
    UnknownCategoryError,
)
from .segbackend import prototype_palette


class Layout(Enum):
    PAIRED_AB = "paired_ab"
    UNPAIRED_AB = "unpaired_ab"


class EdgeMethod(Enum):
    PRETRAINED_HED = "pretrained_hed"
    XDOG = "xdog"
    GRADIENT_FALLBACK = "gradient_fallback"


SPLIT_DIRS = {"train_a": "trainA", "train_b": "trainB", "test_a": "testA", "test_b": "testB"}


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    name: str
    task: Task
    layout: Layout
    resolution: int
    source_dir: str = "."
    train_a: list[str] = field(default_factory=list)
    train_b: list[str] = field(default_factory=list)
    test_a: list[str] = field(default_factory=list)
    test_b: list[str] = field(default_factory=list)

    @property
    def train_size(self) -> int:
        return len(self.train_b)

    @property
    def test_size(self) -> int:
        return len(self.test_b)

    def files(self, split: str) -> list[str]:
        return getattr(self, split)

    def to_text(self) -> str:
        lines = [
            f"name = {self.name}",
            f"task = {self.task.value}",
            f"layout = {self.layout.value}",
            f"resolution = {self.resolution}",
            f"source_dir = {self.source_dir}",
        ]
        for split in ("train_a", "train_b", "test_a", "test_b"):
            lines.append(f"[{split}]")
            lines.extend(self.files(split))
        lines.append("")
        return "\n".join(lines)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        head: dict[str, str] = {}
        lists: dict[str, list[str]] = {k: [] for k in ("train_a", "train_b", "test_a", "test_b")}
        current: list[str] | None = None
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = lists[line[1:-1]]
            elif current is None:
                key, _, value = line.partition("=")
                head[key.strip()] = value.strip()
            else:
                current.append(line)
        return DatasetManifest(
            name=head["name"],
            task=Task(head["task"]),
            layout=Layout(head["layout"]),
            resolution=int(head["resolution"]),
            source_dir=head.get("source_dir", "."),
            **lists,
        )

    def verify(self, root: str | Path) -> None:
        """Check listed files exist and (for paired layout) stems align."""
        root = Path(root)
        for split in ("train_a", "train_b", "test_a", "test_b"):
            for rel in self.files(split):
                if not (root / rel).is_file():
                    raise FileNotFoundError(f"manifest lists missing file {rel}")
        if self.layout == Layout.PAIRED_AB:
            for a_list, b_list in ((self.train_a, self.train_b), (self.test_a, self.test_b)):
                if not a_list:
                    continue
                stems_a = [Path(p).stem for p in a_list]
                stems_b = [Path(p).stem for p in b_list]
                if stems_a != stems_b:
                    raise ValueError("paired layout requires identical source/target stems")


# ---------------------------------------------------------------------------
# Image IO in the [-1, 1] convention
# ---------------------------------------------------------------------------


def to_unit_range(array8: np.ndarray) -> np.ndarray:
    """Map uint8 [0, 255] onto [-1, 1] exactly at the extremes."""
    return array8.astype(np.float32) / 127.5 - 1.0


def to_uint8(array: np.ndarray) -> np.ndarray:
    return np.clip(np.round((array + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_image(path: str | Path, resolution: int, channels: int) -> torch.Tensor:
    img = Image.open(path)
    img = img.convert("L" if channels == 1 else "RGB")
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(img)
    if channels == 1:
        arr = arr[:, :, None]
    data = to_unit_range(arr)
    return torch.from_numpy(data.transpose(2, 0, 1).copy())


def save_image(path: str | Path, array: np.ndarray) -> None:
    """Save an H,W[,C] array in [-1, 1] as an 8-bit image file."""
    arr8 = to_uint8(array)
    if arr8.ndim == 3 and arr8.shape[2] == 1:
        arr8 = arr8[:, :, 0]
    Image.fromarray(arr8).save(path)


def load_mask(path: str | Path, resolution: int) -> np.ndarray:
    img = Image.open(path)
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.NEAREST)
    return np.asarray(img.convert("L")).astype(np.int64)


# ---------------------------------------------------------------------------
# Edge extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeExtractorSpec:
    method: EdgeMethod = EdgeMethod.GRADIENT_FALLBACK
    sigma: float = 1.0  # pre-smoothing (fallback) / narrow scale (xdog)
    k: float = 1.6  # xdog scale ratio
    p: float = 19.0  # xdog sharpening weight
    epsilon: float = 0.01
    phi: float = 10.0
    binarize: bool = False
    threshold: float = 0.2
    weights_path: str = ""


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _smooth(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    k = _gaussian_kernel1d(sigma)
    pad = len(k) // 2
    padded = np.pad(img, ((pad, pad), (0, 0)), mode="edge")
    img = np.apply_along_axis(lambda col: np.convolve(col, k, mode="valid"), 0, padded)
    padded = np.pad(img, ((0, 0), (pad, pad)), mode="edge")
    return np.apply_along_axis(lambda row: np.convolve(row, k, mode="valid"), 1, padded)


def _luminance(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def _gradient_fallback(rgb: np.ndarray, spec: EdgeExtractorSpec) -> np.ndarray:
    lum = _smooth(_luminance(rgb), spec.sigma)
    dx = np.zeros_like(lum)
    dy = np.zeros_like(lum)
    dx[:, :-1] = lum[:, 1:] - lum[:, :-1]
    dy[:-1, :] = lum[1:, :] - lum[:-1, :]
    mag = np.sqrt(dx * dx + dy * dy)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def _xdog(rgb: np.ndarray, spec: EdgeExtractorSpec) -> np.ndarray:
    lum = (_luminance(rgb) + 1.0) / 2.0
    narrow = _smooth(lum, spec.sigma)
    wide = _smooth(lum, spec.sigma * spec.k)
    d = (1.0 + spec.p) * narrow - spec.p * wide
    soft = np.where(d >= spec.epsilon, 1.0, 1.0 + np.tanh(spec.phi * (d - spec.epsilon)))
    return np.clip(1.0 - soft, 0.0, 1.0)  # edges bright, background dark


class PretrainedEdgeExtractor:
    """Edge network loaded from a weight file; absence is an explicit error."""

    def __init__(self, weights_path: str | Path):
        path = Path(weights_path) if weights_path else None
        if path is None or not path.is_file():
            raise MissingWeightsError(
                f"pretrained edge extractor weights not found: {weights_path!r}"
            )
        blob = torch.load(path, map_location="cpu", weights_only=True)
        from torch import nn

        width = int(blob.get("width", 16))
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 1, 1), nn.ReLU(True),
            nn.Conv2d(width, width, 3, 1, 1), nn.ReLU(True),
            nn.Conv2d(width, 1, 1), nn.Sigmoid(),
        )
        self.net.load_state_dict(blob["state"])
        self.net.eval()

    def __call__(self, rgb: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            t = torch.from_numpy(rgb.transpose(2, 0, 1)[None].astype(np.float32))
            out = self.net(t)[0, 0].numpy()
        return out.astype(np.float64)


def extract_edges(
    images: Sequence[np.ndarray],
    spec: EdgeExtractorSpec,
    resolution: int | None = None,
) -> list[np.ndarray]:
    """One edge map in [0, 1] per input H,W,3 image in [-1, 1].

    A pure per-image function: the result is independent of input order.
    """
    hed = PretrainedEdgeExtractor(spec.weights_path) if spec.method == EdgeMethod.PRETRAINED_HED else None
    out = []
    for rgb in images:
        if resolution is not None and rgb.shape[0] != resolution:
            img = Image.fromarray(to_uint8(rgb))
            rgb = to_unit_range(np.asarray(img.resize((resolution, resolution), Image.BILINEAR)))
        rgb = rgb.astype(np.float64)
        if spec.method == EdgeMethod.GRADIENT_FALLBACK:
            edge = _gradient_fallback(rgb, spec)
        elif spec.method == EdgeMethod.XDOG:
            edge = _xdog(rgb, spec)
        else:
            edge = hed(rgb)  # type: ignore[misc]
        if spec.binarize:
            edge = (edge >= spec.threshold).astype(np.float64)
        out.append(edge)
    return out


# ---------------------------------------------------------------------------
# Synthetic shape scenes with exact masks
# ---------------------------------------------------------------------------


def label_palette(class_count: int) -> np.ndarray:
    """Distinct rendering colors for label maps, in [-1, 1]; not the seg palette."""
    colors = np.zeros((class_count, 3))
    colors[0] = (-0.8, -0.8, -0.8)
    for k in range(1, class_count):
        r, g, b = colorsys.hsv_to_rgb((k - 1) / max(class_count - 1, 1), 1.0, 1.0)
        colors[k] = (2 * r - 1, 2 * g - 1, 2 * b - 1)
    return colors


def _paint_scene(rng: np.random.Generator, resolution: int, class_count: int,
                 noise: float) -> tuple[np.ndarray, np.ndarray]:
    palette = prototype_palette(class_count)
    mask = np.zeros((resolution, resolution), dtype=np.int64)
    img = np.tile(palette[0], (resolution, resolution, 1))
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    for _ in range(int(rng.integers(1, 4))):
        k = int(rng.integers(1, class_count))
        cy, cx = rng.uniform(0.2, 0.8, size=2) * resolution
        ry = rng.uniform(0.10, 0.28) * resolution
        rx = rng.uniform(0.10, 0.28) * resolution
        if rng.random() < 0.5:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        mask[region] = k
        img[region] = palette[k]
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, -1.0, 1.0), mask


def generate_shape_scenes(
    out_dir: str | Path,
    n_train: int = 256,
    n_test: int = 64,
    resolution: int = 64,
    class_count: int = 6,
    seed: int = 0,
    task: Task = Task.SKETCH2PHOTO,
    noise: float = 0.05,
    edge_spec: EdgeExtractorSpec | None = None,
) -> DatasetManifest:
    """Write a hermetic synthetic dataset (images, sources, masks, manifest)."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    edge_spec = edge_spec or EdgeExtractorSpec(sigma=1.0)
    labels = label_palette(class_count)
    manifest = DatasetManifest(
        name=f"shapes{resolution}", task=task, layout=Layout.PAIRED_AB, resolution=resolution
    )
    for split, count in (("train", n_train), ("test", n_test)):
        dir_a = out_dir / SPLIT_DIRS[f"{split}_a"]
        dir_b = out_dir / SPLIT_DIRS[f"{split}_b"]
        dir_a.mkdir(parents=True, exist_ok=True)
        dir_b.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            stem = f"scene_{i:04d}"
            img, mask = _paint_scene(rng, resolution, class_count, noise)
            save_image(dir_b / f"{stem}.png", img)
            Image.fromarray(mask.astype(np.uint8)).save(dir_b / f"{stem}.mask", format="PNG")
            if task == Task.SKETCH2PHOTO:
                edge = extract_edges([img], edge_spec)[0]
                save_image(dir_a / f"{stem}.png", edge * 2.0 - 1.0)
            else:
                save_image(dir_a / f"{stem}.png", labels[mask])
            manifest.files(f"{split}_a").append(f"{SPLIT_DIRS[f'{split}_a']}/{stem}.png")
            manifest.files(f"{split}_b").append(f"{SPLIT_DIRS[f'{split}_b']}/{stem}.png")
    manifest.save(out_dir / "manifest.txt")
    return manifest


# ---------------------------------------------------------------------------
# Category curation from an annotation store
# ---------------------------------------------------------------------------


def curate_by_category(
    annotation_store: str | Path | Mapping,
    category: str,
    out_dir: str | Path,
    *,
    images_root: str | Path | None = None,
    split_ratio: float = 0.9,
    seed: int = 0,
    task: Task = Task.SKETCH2PHOTO,
    resolution: int = 256,
) -> DatasetManifest:
    """Copy every image annotated with ``category`` into a fresh dataset dir.

    The train/test split is a seeded shuffle at ``split_ratio``; re-running
    with the same store and seed reproduces identical file lists.
    """
    if isinstance(annotation_store, (str, Path)):
        store_path = Path(annotation_store)
        store = json.loads(store_path.read_text())
        if images_root is None:
            images_root = store_path.parent
    else:
        store = dict(annotation_store)
        if images_root is None:
            raise ValueError("images_root is required when passing an in-memory store")
    images = store.get("images", [])
    vocabulary = set(store.get("categories", []))
    for entry in images:
        vocabulary.update(entry.get("categories", []))
    if category not in vocabulary:
        raise UnknownCategoryError(f"category {category!r} not present in annotation store")
    matched = sorted(e["file"] for e in images if category in e.get("categories", []))
    if not matched:
        raise EmptyResultError(f"no images annotated with {category!r}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(matched))
    n_train = int(round(split_ratio * len(matched)))
    train_files = sorted(matched[i] for i in order[:n_train])
    test_files = sorted(matched[i] for i in order[n_train:])

    out_dir = Path(out_dir)
    manifest = DatasetManifest(
        name=category, task=task, layout=Layout.PAIRED_AB, resolution=resolution
    )
    for split, files in (("train", train_files), ("test", test_files)):
        dir_b = out_dir / SPLIT_DIRS[f"{split}_b"]
        dir_b.mkdir(parents=True, exist_ok=True)
        for fname in files:
            src = Path(images_root) / fname
            dst = dir_b / Path(fname).name
            if not dst.is_file():
                shutil.copyfile(src, dst)
            manifest.files(f"{split}_b").append(f"{SPLIT_DIRS[f'{split}_b']}/{Path(fname).name}")
    manifest.save(out_dir / "manifest.txt")
    return manifest


def attach_sources(manifest: DatasetManifest, root: str | Path,
                   edge_spec: EdgeExtractorSpec | None = None) -> DatasetManifest:
    """Generate A-side sketches for every curated B-side photo and relist them."""
    root = Path(root)
    edge_spec = edge_spec or EdgeExtractorSpec()
    for split in ("train", "test"):
        dir_a = root / SPLIT_DIRS[f"{split}_a"]
        dir_a.mkdir(parents=True, exist_ok=True)
        a_list = manifest.files(f"{split}_a")
        a_list.clear()
        for rel in manifest.files(f"{split}_b"):
            img = Image.open(root / rel).convert("RGB")
            if img.size != (manifest.resolution, manifest.resolution):
                img = img.resize((manifest.resolution, manifest.resolution), Image.BILINEAR)
            rgb = to_unit_range(np.asarray(img))
            edge = extract_edges([rgb], edge_spec)[0]
            stem = Path(rel).stem
            save_image(dir_a / f"{stem}.png", edge * 2.0 - 1.0)
            a_list.append(f"{SPLIT_DIRS[f'{split}_a']}/{stem}.png")
    manifest.save(root / "manifest.txt")
    return manifest


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairingMeta:
    stems_a: tuple[str, ...]
    stems_b: tuple[str, ...]
    aligned: bool


class BatchLoader:
    """Epoch-wise batch sampler over a manifest.

    PAIRED mode yields aligned (x_i, y_i) pairs; UNPAIRED mode draws the two
    domains through independent per-epoch permutations. Decoded images are
    cached in memory (datasets here are desk-scale). With ``prefetch`` > 0 a
    producer thread prepares batches ahead; delivered order is identical to
    the synchronous order for a fixed RNG state.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        root: str | Path,
        mode: Layout,
        batch_size: int,
        resolution: int,
        rng: torch.Generator,
        split: str = "train",
        prefetch: int = 0,
    ):
        if mode == Layout.PAIRED_AB and manifest.layout != Layout.PAIRED_AB:
            raise LayoutModeMismatchError(
                f"manifest layout {manifest.layout.value} cannot serve paired sampling"
            )
        self.manifest = manifest
        self.root = Path(root)
        self.mode = mode
        self.batch_size = batch_size
        self.resolution = resolution
        self.rng = rng
        self.split = split
        self.prefetch = prefetch
        self.files_a = manifest.files(f"{split}_a")
        self.files_b = manifest.files(f"{split}_b")
        if not self.files_a or not self.files_b:
            raise EmptyResultError(f"manifest split {split!r} has no files")
        self.source_domain = Domain.SKETCH if manifest.task == Task.SKETCH2PHOTO else Domain.LABELMAP
        self.source_channels = 1 if manifest.task == Task.SKETCH2PHOTO else 3
        self._cache: dict[tuple[str, int], torch.Tensor] = {}

    def steps_per_epoch(self) -> int:
        n = max(len(self.files_a), len(self.files_b))
        return -(-n // self.batch_size)

    def _load(self, rel: str, channels: int) -> torch.Tensor:
        key = (rel, channels)
        hit = self._cache.get(key)
        if hit is None:
            hit = load_image(self.root / rel, self.resolution, channels)
            self._cache[key] = hit
        return hit

    def _epoch_indices(self) -> tuple[list[int], list[int]]:
        na, nb = len(self.files_a), len(self.files_b)
        n = max(na, nb)
        if self.mode == Layout.PAIRED_AB:
            perm = torch.randperm(nb, generator=self.rng).tolist()
            return perm, perm
        pa = torch.randperm(na, generator=self.rng).tolist()
        pb = torch.randperm(nb, generator=self.rng).tolist()
        idx_a = [pa[i % na] for i in range(n)]
        idx_b = [pb[i % nb] for i in range(n)]
        return idx_a, idx_b

    def _make_batch(self, ia: Sequence[int], ib: Sequence[int]):
        xs = torch.stack([self._load(self.files_a[i], self.source_channels) for i in ia])
        ys = torch.stack([self._load(self.files_b[i], 3) for i in ib])
        meta = PairingMeta(
            stems_a=tuple(Path(self.files_a[i]).stem for i in ia),
            stems_b=tuple(Path(self.files_b[i]).stem for i in ib),
            aligned=self.mode == Layout.PAIRED_AB,
        )
        x = ImageBatch(data=xs, domain=self.source_domain)
        y = ImageBatch(data=ys, domain=Domain.COLOR)
        return x, y, meta

    def batches(self) -> Iterator[tuple[ImageBatch, ImageBatch, PairingMeta]]:
        idx_a, idx_b = self._epoch_indices()
        chunks = [
            (idx_a[i : i + self.batch_size], idx_b[i : i + self.batch_size])
            for i in range(0, len(idx_a), self.batch_size)
        ]
        if self.prefetch <= 0:
            for ia, ib in chunks:
                yield self._make_batch(ia, ib)
            return

        q: queue.Queue = queue.Queue(maxsize=self.prefetch)

        def produce():
            for ia, ib in chunks:
                q.put(self._make_batch(ia, ib))
            q.put(None)

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        while True:
            item = q.get()
            if item is None:
                break
            yield item
        worker.join()
