import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from segguide.core import GanMode, ObjectiveConfig, SegKind, SegmentationMap, Variant
from segguide.errors import KindMismatchError, MissingFragmentError, NonFiniteLossError
from segguide.objectives import (
    LossBreakdown,
    Side,
    cycle_forward,
    paired_baseline_loss,
    seg_adversarial_loss,
    total_objective,
    unpaired_baseline_loss,
)


class StubD(torch.nn.Module):
    """Discriminator stub emitting fixed or supplied logits."""

    def __init__(self, logits=None, probability=None):
        super().__init__()
        self.logits = logits
        self.probability = probability

    def forward(self, x):
        if self.logits is not None:
            return self.logits
        p = self.probability
        logit = math.log(p / (1 - p)) if 0 < p < 1 else (30.0 if p >= 1 else -30.0)
        return torch.full((x.shape[0], 1, 1, 1), logit, dtype=x.dtype)


def binary_map(n=1, h=4, w=4, seed=0) -> SegmentationMap:
    rng = np.random.default_rng(seed)
    fg = rng.random((n, 1, h, w))
    scores = np.concatenate([1 - fg, fg], axis=1).astype(np.float32)
    return SegmentationMap(scores=torch.from_numpy(scores), kind=SegKind.BINARY, class_count=2)


def test_seg_loss_half_probability_stub_is_two_ln_two():
    d = StubD(probability=0.5)
    loss = seg_adversarial_loss(d, binary_map(seed=1), binary_map(seed=2), Side.DISCRIMINATOR)
    assert abs(float(loss) - 2 * math.log(2)) < 1e-6


def test_seg_loss_saturated_stub_is_zero():
    real, fake = binary_map(seed=1), binary_map(seed=2)

    class PerfectD(torch.nn.Module):
        def forward(self, x):
            logit = 30.0 if torch.equal(x, real.scores) else -30.0
            return torch.full((1, 1, 1, 1), logit)

    loss = seg_adversarial_loss(PerfectD(), real, fake, Side.DISCRIMINATOR)
    assert float(loss) < 1e-8


def test_seg_loss_matches_bruteforce_patch_loop():
    rng = np.random.default_rng(3)
    real_logits = torch.from_numpy(rng.standard_normal((1, 1, 4, 4)).astype(np.float64))
    fake_logits = torch.from_numpy(rng.standard_normal((1, 1, 4, 4)).astype(np.float64))

    class TwoFaced(torch.nn.Module):
        def __init__(self, real_scores):
            super().__init__()
            self.real_scores = real_scores

        def forward(self, x):
            return real_logits if torch.equal(x, self.real_scores) else fake_logits

    real, fake = binary_map(seed=4), binary_map(seed=5)
    loss = seg_adversarial_loss(TwoFaced(real.scores), real, fake, Side.DISCRIMINATOR)

    # scalar loop over all 16 patch logits of each map
    def sigmoid(v):
        return 1 / (1 + math.exp(-v))

    acc_real = [-math.log(sigmoid(float(v))) for v in real_logits.flatten()]
    acc_fake = [-math.log(1 - sigmoid(float(v))) for v in fake_logits.flatten()]
    expected = sum(acc_real) / 16 + sum(acc_fake) / 16
    assert abs(float(loss.detach()) - expected) < 1e-9

    gen = seg_adversarial_loss(TwoFaced(real.scores), real, fake, Side.GENERATOR)
    expected_gen = sum(-math.log(sigmoid(float(v))) for v in fake_logits.flatten()) / 16
    assert abs(float(gen) - expected_gen) < 1e-9


def test_seg_loss_kind_mismatch():
    multi = SegmentationMap(scores=torch.full((1, 4, 2, 2), 0.25),
                            kind=SegKind.MULTICLASS, class_count=4)
    with pytest.raises(KindMismatchError):
        seg_adversarial_loss(StubD(probability=0.5), binary_map(), multi, Side.DISCRIMINATOR)


def test_seg_loss_nonfinite_aborts():
    d = StubD(logits=torch.tensor([[[[float("nan")]]]]))
    with pytest.raises(NonFiniteLossError):
        seg_adversarial_loss(d, binary_map(seed=1), binary_map(seed=2), Side.DISCRIMINATOR)


def test_seg_loss_discriminator_side_detaches_fake():
    source = torch.rand(1, 2, 4, 4, requires_grad=True)
    scores = torch.softmax(source, dim=1)
    fake = SegmentationMap(scores=scores, kind=SegKind.BINARY, class_count=2)

    class LinearD(torch.nn.Module):
        def forward(self, x):
            return x.sum(dim=1, keepdim=True)

    loss = seg_adversarial_loss(LinearD(), binary_map(), fake, Side.DISCRIMINATOR)
    assert not loss.requires_grad  # no path back to the generator
    gen_loss = seg_adversarial_loss(LinearD(), binary_map(), fake, Side.GENERATOR)
    assert gen_loss.requires_grad  # generator side keeps the graph


# ---------------------------------------------------------------------------
# paired baseline
# ---------------------------------------------------------------------------


class Identity(torch.nn.Module):
    def forward(self, x):
        return x


class Constant(torch.nn.Module):
    def __init__(self, value, channels=3):
        super().__init__()
        self.value = value
        self.channels = channels

    def forward(self, x):
        return torch.full((x.shape[0], self.channels, *x.shape[2:]), self.value,
                          dtype=x.dtype)


def test_paired_identity_generator_zero_reconstruction():
    x = torch.rand(2, 3, 8, 8)
    _, sub = paired_baseline_loss(Identity(), StubD(probability=0.5), x, x,
                                  Side.GENERATOR, lambda_l1=100.0)
    assert sub["l1"] == 0.0


def test_paired_constant_generator_exact_reconstruction():
    c, t = 0.3, -0.2
    x = torch.rand(1, 3, 4, 4)
    y = torch.full((1, 3, 4, 4), t)
    _, sub = paired_baseline_loss(Constant(c), StubD(probability=0.5), x, y, Side.GENERATOR)
    assert abs(sub["l1"] - abs(c - t)) < 1e-7


def test_paired_reconstruction_matches_scalar_loop():
    rng = np.random.default_rng(11)
    x = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float64))
    y = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float64))
    fake = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float64))

    class Fixed(torch.nn.Module):
        def forward(self, _):
            return fake

    _, sub = paired_baseline_loss(Fixed(), StubD(probability=0.5), x, y, Side.GENERATOR)
    acc = 0.0
    for n in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    acc += abs(float(fake[n, c, i, j]) - float(y[n, c, i, j]))
    assert abs(sub["l1"] - acc / (2 * 3 * 4 * 4)) < 1e-12


def test_paired_rejects_unaligned_batches():
    from segguide.errors import UnpairedDataInPairedModeError

    x = torch.rand(1, 3, 4, 4)
    with pytest.raises(UnpairedDataInPairedModeError):
        paired_baseline_loss(Identity(), StubD(probability=0.5), x, x,
                             Side.GENERATOR, aligned=False)


# ---------------------------------------------------------------------------
# unpaired baseline
# ---------------------------------------------------------------------------


class Shift(torch.nn.Module):
    def __init__(self, delta):
        super().__init__()
        self.delta = delta

    def forward(self, x):
        return x + self.delta


def test_unpaired_identity_generators_zero_cycles():
    x = torch.rand(1, 3, 8, 8)
    y = torch.rand(1, 3, 8, 8)
    _, sub = unpaired_baseline_loss(Identity(), Identity(), StubD(probability=0.5),
                                    StubD(probability=0.5), x, y, Side.GENERATOR)
    assert sub["cycle_x"] == 0.0 and sub["cycle_y"] == 0.0


def test_unpaired_inverse_shift_generators_zero_cycles():
    x = torch.rand(1, 3, 8, 8) * 0.5
    y = torch.rand(1, 3, 8, 8) * 0.5
    d = StubD(probability=0.5)
    _, sub_shift = unpaired_baseline_loss(Shift(0.1), Shift(-0.1), d, d, x, y, Side.GENERATOR)
    assert abs(sub_shift["cycle_x"]) < 1e-7 and abs(sub_shift["cycle_y"]) < 1e-7
    _, sub_id = unpaired_baseline_loss(Identity(), Identity(), d, d, x, y, Side.GENERATOR)
    assert abs(sub_shift["adv_g_fwd"] - sub_id["adv_g_fwd"]) < 1e-7  # stub D unchanged


def test_unpaired_total_matches_two_pass_recomputation():
    torch.manual_seed(0)
    rng = np.random.default_rng(5)
    x = torch.from_numpy(rng.uniform(-1, 1, (1, 3, 8, 8)).astype(np.float64))
    y = torch.from_numpy(rng.uniform(-1, 1, (1, 3, 8, 8)).astype(np.float64))
    g = torch.nn.Conv2d(3, 3, 3, padding=1).double()
    g_back = torch.nn.Conv2d(3, 3, 3, padding=1).double()
    d_color = torch.nn.Conv2d(3, 1, 3, padding=1).double()
    d_sketch = torch.nn.Conv2d(3, 1, 3, padding=1).double()
    lam = 10.0
    mode = GanMode.LEAST_SQUARES

    loss, _ = unpaired_baseline_loss(g, g_back, d_color, d_sketch, x, y,
                                     Side.GENERATOR, lambda_cycle=lam, mode=mode)

    # independent recomputation, direction by direction
    with torch.no_grad():
        fake_y = g(x)
        fake_x = g_back(y)
        term_fwd = float(((d_color(fake_y) - 1) ** 2).mean())
        term_bwd = float(((d_sketch(fake_x) - 1) ** 2).mean())
        cyc_x = float((g_back(fake_y) - x).abs().mean())
        cyc_y = float((g(fake_x) - y).abs().mean())
    expected = term_fwd + term_bwd + lam * (cyc_x + cyc_y)
    assert abs(float(loss.detach()) - expected) < 1e-9

    disc_loss, _ = unpaired_baseline_loss(g, g_back, d_color, d_sketch, x, y,
                                          Side.DISCRIMINATOR, lambda_cycle=lam, mode=mode)
    with torch.no_grad():
        expected_d = (
            float(((d_color(y) - 1) ** 2).mean()) + float((d_color(fake_y) ** 2).mean())
            + float(((d_sketch(x) - 1) ** 2).mean()) + float((d_sketch(fake_x) ** 2).mean())
        )
    assert abs(float(disc_loss.detach()) - expected_d) < 1e-9


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------


def test_total_linear_sum():
    cfg = ObjectiveConfig(variant=Variant.COMBINED, w_g=1, w_b=1, w_m=1)
    bd = total_objective(cfg, {"l_g": 1.0, "l_b": 2.0, "l_m": 3.0})
    assert bd.total == 6.0


def test_baseline_short_circuits_seg_fragments():
    cfg = ObjectiveConfig.for_variant(Variant.BASELINE)
    bd = total_objective(cfg, {"l_g": 2.5})
    assert bd.total == 2.5 and bd.l_b == 0.0 and bd.l_m == 0.0


def test_missing_fragment_with_nonzero_weight():
    cfg = ObjectiveConfig(variant=Variant.COMBINED, w_g=1, w_b=1, w_m=1)
    with pytest.raises(MissingFragmentError):
        total_objective(cfg, {"l_g": 1.0, "l_b": 2.0})


def test_combined_minus_binary_equals_wm_lm():
    rng = np.random.default_rng(21)
    for _ in range(50):
        l_g, l_b, l_m = rng.uniform(0, 5, size=3)
        w_m = float(rng.uniform(0.1, 3))
        combined = total_objective(
            ObjectiveConfig(variant=Variant.COMBINED, w_m=w_m),
            {"l_g": l_g, "l_b": l_b, "l_m": l_m},
        )
        binary = total_objective(
            ObjectiveConfig.for_variant(Variant.BINARY),
            {"l_g": l_g, "l_b": l_b},
        )
        assert abs((combined.total - binary.total) - w_m * l_m) < 1e-9


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0, 10), st.floats(0, 10), st.floats(0, 10),
    st.floats(0, 5), st.floats(0, 5), st.floats(0, 5),
)
def test_breakdown_total_identity(l_g, l_b, l_m, w_g, w_b, w_m):
    cfg = ObjectiveConfig(variant=Variant.COMBINED, w_g=w_g, w_b=w_b, w_m=w_m)
    bd = total_objective(cfg, {"l_g": l_g, "l_b": l_b, "l_m": l_m})
    assert abs(bd.total - (w_g * bd.l_g + w_b * bd.l_b + w_m * bd.l_m)) < 1e-6


def test_total_with_tensors_carries_gradient():
    cfg = ObjectiveConfig(variant=Variant.COMBINED)
    frag = torch.tensor(2.0, requires_grad=True)
    bd = total_objective(cfg, {"l_g": frag, "l_b": frag * 2, "l_m": frag * 3})
    assert bd.tensor is not None and bd.tensor.requires_grad
    bd.tensor.backward()
    assert frag.grad is not None


def test_discriminator_losses_non_negative_in_cross_entropy_mode():
    rng = np.random.default_rng(31)
    for seed in range(20):
        logits = torch.from_numpy(rng.standard_normal((1, 1, 3, 3)))
        d = StubD(logits=logits)
        loss = seg_adversarial_loss(d, binary_map(seed=seed), binary_map(seed=seed + 99),
                                    Side.DISCRIMINATOR, GanMode.CROSS_ENTROPY)
        assert float(loss) >= 0.0


def test_frozen_backend_receives_no_gradient():
    from segguide.core import Domain, ImageBatch
    from segguide.segbackend import ColorPrototypeBackend, collapse_to_binary, segment_multiclass

    backend = ColorPrototypeBackend(class_count=4)
    data = (torch.rand(1, 3, 8, 8) * 2 - 1).requires_grad_(True)
    seg = segment_multiclass(backend, ImageBatch(data=data, domain=Domain.COLOR))
    fake_bin = collapse_to_binary(seg, backend.foreground_ids)
    loss = seg_adversarial_loss(StubD(logits=fake_bin.scores.sum() * torch.ones(1, 1, 1, 1)),
                                binary_map(), fake_bin, Side.GENERATOR)
    loss.backward()
    for p in backend.parameters():
        assert p.grad is None  # excluded from the differentiation set
    assert data.grad is not None
