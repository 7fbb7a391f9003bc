import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from segguide.core import Domain, ImageBatch, SegKind, SegmentationMap
from segguide.errors import EmptyForegroundSetError, MissingWeightsError
from segguide.segbackend import (
    CACHE_MAGIC,
    ColorPrototypeBackend,
    PretrainedSegBackend,
    SegmentationCache,
    collapse_to_binary,
    multiclass_argmax_in_foreground,
    prototype_palette,
    segment_cached,
    segment_multiclass,
)


def color_batch(data: torch.Tensor) -> ImageBatch:
    return ImageBatch(data=data, domain=Domain.COLOR)


def test_constant_logits_give_uniform_scores():
    # sharpness 0 zeroes every logit, so softmax is uniform 1/K at each pixel
    backend = ColorPrototypeBackend(class_count=5, sharpness=0.0)
    batch = color_batch(torch.zeros(2, 3, 8, 8))
    seg = segment_multiclass(backend, batch)
    assert torch.allclose(seg.scores, torch.full_like(seg.scores, 1 / 5), atol=1e-6)


def test_scores_sum_to_one_for_arbitrary_input():
    backend = ColorPrototypeBackend(class_count=7)
    batch = color_batch(torch.rand(3, 3, 16, 16) * 2 - 1)
    seg = segment_multiclass(backend, batch)
    total = seg.scores.sum(dim=1)
    assert float((total - 1).abs().max()) < 1e-5


def test_two_region_image_matches_generating_mask():
    # paint half the image with prototype 1 and half with prototype 3: the
    # stub's argmax must recover the generating mask on >= 99% of pixels
    backend = ColorPrototypeBackend(class_count=5)
    palette = prototype_palette(5)
    img = np.zeros((32, 32, 3))
    img[:, :16] = palette[1]
    img[:, 16:] = palette[3]
    rng = np.random.default_rng(0)
    img = np.clip(img + 0.03 * rng.standard_normal(img.shape), -1, 1)
    mask = np.zeros((32, 32), dtype=np.int64)
    mask[:, :16] = 1
    mask[:, 16:] = 3
    batch = color_batch(torch.from_numpy(img.transpose(2, 0, 1)[None]).float())
    seg = segment_multiclass(backend, batch)
    pred = seg.scores.argmax(dim=1)[0].numpy()
    assert (pred == mask).mean() >= 0.99


def test_gradients_flow_to_input_not_to_backend():
    backend = ColorPrototypeBackend(class_count=4)
    data = (torch.rand(1, 3, 8, 8) * 2 - 1).requires_grad_(True)
    seg = segment_multiclass(backend, color_batch(data))
    seg.scores.sum().backward()
    assert data.grad is not None and float(data.grad.abs().sum()) > 0
    assert all(not p.requires_grad for p in backend.parameters())


def test_backend_checksum_stable_across_calls():
    backend = ColorPrototypeBackend(class_count=6)
    before = backend.checksum()
    segment_multiclass(backend, color_batch(torch.rand(2, 3, 8, 8) * 2 - 1))
    assert backend.checksum() == before


def test_detached_copy_gives_identical_scores():
    backend = ColorPrototypeBackend(class_count=4)
    data = torch.rand(1, 3, 8, 8) * 2 - 1
    a = segment_multiclass(backend, color_batch(data.clone().requires_grad_(True)))
    b = segment_multiclass(backend, color_batch(data.detach().clone()))
    assert torch.equal(a.scores.detach(), b.scores)


# ---------------------------------------------------------------------------
# collapse_to_binary
# ---------------------------------------------------------------------------


def one_hot_map(labels: np.ndarray, class_count: int) -> SegmentationMap:
    scores = np.zeros((1, class_count, *labels.shape), dtype=np.float32)
    for k in range(class_count):
        scores[0, k][labels == k] = 1.0
    return SegmentationMap(scores=torch.from_numpy(scores), kind=SegKind.MULTICLASS,
                           class_count=class_count)


def test_collapse_one_hot_definition():
    labels = np.array([[1, 0]])  # person at (0,0), grass at (0,1)
    seg = one_hot_map(labels, class_count=3)
    binary = collapse_to_binary(seg, foreground_ids={1})
    assert binary.scores[0, 1, 0, 0] == 1.0  # FG one-hot where the person was
    assert binary.scores[0, 0, 0, 1] == 1.0  # BG one-hot where the grass was


def test_collapse_uniform_scores():
    k, f = 8, 3
    scores = torch.full((1, k, 4, 4), 1 / k)
    seg = SegmentationMap(scores=scores, kind=SegKind.MULTICLASS, class_count=k)
    binary = collapse_to_binary(seg, foreground_ids=set(range(1, f + 1)))
    assert torch.allclose(binary.scores[:, 1], torch.full((1, 4, 4), f / k), atol=1e-6)


def test_collapse_matches_bruteforce_summation():
    rng = np.random.default_rng(7)
    k, f_ids = 10, [0, 3, 5, 9]
    raw = rng.random((2, k, 5, 5))
    raw /= raw.sum(axis=1, keepdims=True)
    seg = SegmentationMap(scores=torch.from_numpy(raw.astype(np.float32)),
                          kind=SegKind.MULTICLASS, class_count=k)
    binary = collapse_to_binary(seg, foreground_ids=f_ids)
    # brute-force per-pixel channel summation
    for n in range(2):
        for i in range(5):
            for j in range(5):
                fg = sum(raw[n, c, i, j] for c in f_ids)
                assert abs(float(binary.scores[n, 1, i, j]) - fg) < 1e-6
                assert abs(float(binary.scores[n, 0, i, j]) - (raw[n, :, i, j].sum() - fg)) < 1e-6


def test_collapse_rejects_empty_foreground():
    seg = one_hot_map(np.zeros((2, 2), dtype=np.int64), class_count=3)
    with pytest.raises(EmptyForegroundSetError):
        collapse_to_binary(seg, foreground_ids=[])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_collapse_preserves_mass_on_random_soft_maps(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(3, 9))
    fg = sorted(rng.choice(np.arange(k), size=int(rng.integers(1, k - 1)), replace=False).tolist())
    raw = rng.random((1, k, 4, 4)) + 1e-3
    raw /= raw.sum(axis=1, keepdims=True)
    seg = SegmentationMap(scores=torch.from_numpy(raw.astype(np.float64)),
                          kind=SegKind.MULTICLASS, class_count=k)
    binary = collapse_to_binary(seg, foreground_ids=fg)
    # score preservation: FG + BG equals the multiclass mass per pixel
    total = binary.scores.sum(dim=1)
    assert float((total - seg.scores.sum(dim=1)).abs().max()) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_collapse_commutes_with_argmax_grouping_on_hard_maps(seed):
    # holds exactly for one-hot maps; soft maps can put the winning class in
    # FG while the pooled BG mass still dominates, so hard maps are the
    # meaningful scope for this property
    rng = np.random.default_rng(seed)
    k = int(rng.integers(3, 9))
    fg = sorted(rng.choice(np.arange(k), size=int(rng.integers(1, k - 1)), replace=False).tolist())
    labels = rng.integers(0, k, size=(6, 6))
    seg = one_hot_map(labels, class_count=k)
    binary = collapse_to_binary(seg, foreground_ids=fg)
    in_fg = multiclass_argmax_in_foreground(seg, fg)
    bin_argmax_fg = binary.scores.argmax(dim=1) == 1
    assert torch.equal(in_fg, bin_argmax_fg)


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------


def test_cache_hit_returns_identical_bytes(tmp_path):
    backend = ColorPrototypeBackend(class_count=4)
    cache = SegmentationCache(tmp_path)
    batch = color_batch(torch.rand(2, 3, 8, 8) * 2 - 1)
    mc1, bin1 = segment_cached(backend, cache, batch)
    assert cache.misses == 2 and cache.hits == 0
    mc2, bin2 = segment_cached(backend, cache, batch)
    assert cache.hits == 2
    assert torch.equal(mc1.scores, mc2.scores)
    assert torch.equal(bin1.scores, bin2.scores)


def test_cache_single_pixel_perturbation_misses(tmp_path):
    backend = ColorPrototypeBackend(class_count=4)
    cache = SegmentationCache(tmp_path)
    data = torch.rand(1, 3, 8, 8) * 2 - 1
    segment_cached(backend, cache, color_batch(data))
    perturbed = data.clone()
    perturbed[0, 0, 0, 0] = -perturbed[0, 0, 0, 0]
    segment_cached(backend, cache, color_batch(perturbed))
    assert cache.misses == 2


def test_cache_bounds_backend_forwards_across_epochs(tmp_path):
    backend = ColorPrototypeBackend(class_count=4)
    cache = SegmentationCache(tmp_path)
    images = torch.rand(64, 3, 8, 8) * 2 - 1
    for _epoch in range(2):
        for i in range(0, 64, 8):
            segment_cached(backend, cache, color_batch(images[i : i + 8]))
    assert backend.forward_images == 64  # one computation per distinct image


def test_cache_corrupt_entry_recomputed_with_warning(tmp_path, caplog):
    backend = ColorPrototypeBackend(class_count=4)
    cache = SegmentationCache(tmp_path)
    batch = color_batch(torch.rand(1, 3, 8, 8) * 2 - 1)
    segment_cached(backend, cache, batch)
    (entry,) = list(cache.root.glob("*.segmap"))
    entry.write_bytes(b"ASLSEG1" + b"\x00" * 5)  # truncated record
    with caplog.at_level("WARNING"):
        mc, _ = segment_cached(backend, cache, batch)
    assert "corrupt" in caplog.text
    assert cache.misses == 2  # recomputed
    fresh = mc.scores.sum(dim=1)
    assert float((fresh - 1).abs().max()) < 1e-5


def test_cache_record_layout_matches_declared_format(tmp_path):
    backend = ColorPrototypeBackend(class_count=3)
    cache = SegmentationCache(tmp_path)
    batch = color_batch(torch.rand(1, 3, 4, 4) * 2 - 1)
    mc, _ = segment_cached(backend, cache, batch)
    (entry,) = list(cache.root.glob("*.segmap"))
    raw = entry.read_bytes()
    assert raw[:7] == CACHE_MAGIC
    k, h, w = struct.unpack_from("<III", raw, 7)
    assert (k, h, w) == (3, 4, 4)
    scores = np.frombuffer(raw[19:], dtype="<f4").reshape(k, h, w)
    assert np.allclose(scores, mc.scores[0].numpy(), atol=1e-7)


def test_backend_rejects_non_strict_foreground_subset():
    with pytest.raises(ValueError):
        ColorPrototypeBackend(class_count=4, foreground_ids=[0, 1, 2, 3])
    with pytest.raises(EmptyForegroundSetError):
        ColorPrototypeBackend(class_count=4, foreground_ids=[])


def test_pretrained_backend_requires_weight_file(tmp_path):
    with pytest.raises(MissingWeightsError):
        PretrainedSegBackend(tmp_path / "absent.pt")


def test_pretrained_backend_roundtrip(tmp_path):
    from segguide.segbackend import _SegNet, save_pretrained_backend

    net = _SegNet(class_count=5, width=8)
    path = tmp_path / "backend.pt"
    save_pretrained_backend(path, net, class_count=5, foreground_ids=[1, 2], width=8)
    backend = PretrainedSegBackend(path)
    assert backend.class_count == 5
    assert backend.foreground_ids == frozenset({1, 2})
    seg = segment_multiclass(backend, color_batch(torch.rand(1, 3, 8, 8) * 2 - 1))
    total = seg.scores.sum(dim=1)
    assert float((total - 1).abs().max()) < 1e-5
