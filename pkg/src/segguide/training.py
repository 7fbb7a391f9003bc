"""The optimization loop: alternating discriminator/generator updates with
the composite objective and a frozen segmentation backend.

Per step: (1) forward the generator(s); (2) segment real and generated color
images per the active variant (real maps from the on-disk cache, fake maps
recomputed because they depend on the current generator); (3) update the
image discriminator(s), then the segmentation discriminators, each on its
own loss; (4) update the generator(s) on the weighted composite objective.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .core import (
    BaselineKind,
    Domain,
    FrameworkConfig,
    ImageBatch,
    SeedHandle,
    Task,
    seed_all,
    validate_config,
)
from .datapipe import BatchLoader, DatasetManifest, Layout, PairingMeta
from .errors import MissingGeneratorRoleError, NonFiniteLossError
from .networks import (
    CheckpointReader,
    DiscKind,
    DiscriminatorSpec,
    GenArch,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    save_checkpoint,
)
from .objectives import (
    LossBreakdown,
    Side,
    cycle_forward,
    paired_baseline_loss,
    scalar,
    seg_adversarial_loss,
    total_objective,
    unpaired_baseline_loss,
)
from .segbackend import (
    ColorPrototypeBackend,
    PretrainedSegBackend,
    SegBackend,
    SegmentationCache,
    collapse_to_binary,
    segment_cached,
    segment_multiclass,
)

GENERATOR_ROLES = ("G", "G_Y")
DISCRIMINATOR_ROLES = ("D", "D_X", "D_B", "D_M")


@dataclass
class TrainState:
    config: FrameworkConfig
    networks: dict[str, nn.Module]
    specs: dict[str, GeneratorSpec | DiscriminatorSpec]
    optimizers: dict[str, torch.optim.Optimizer]
    handle: SeedHandle
    backend: SegBackend | None
    cache: SegmentationCache | None
    epoch: int = 0
    global_step: int = 0
    loss_history: collections.deque = field(default_factory=lambda: collections.deque(maxlen=200))

    @property
    def objective(self):
        return self.config.objective

    @property
    def run(self):
        return self.config.run


def _source_channels(task: Task) -> int:
    return 1 if task == Task.SKETCH2PHOTO else 3


def role_specs(cfg: FrameworkConfig) -> dict[str, GeneratorSpec | DiscriminatorSpec]:
    """Network specs for every role the configured variant/baseline needs."""
    obj, net = cfg.objective, cfg.networks
    src_ch = _source_channels(cfg.run.task)
    gen = GeneratorSpec(
        arch=GenArch(net.gen_arch), in_channels=src_ch, out_channels=3,
        base_width=net.gen_base_width, depth=net.gen_depth,
    )
    specs: dict[str, GeneratorSpec | DiscriminatorSpec] = {"G": gen}
    disc_kw = dict(base_width=net.disc_base_width, n_layers=net.disc_layers,
                   patch_output=net.patch_output)
    if obj.baseline == BaselineKind.PAIRED:
        specs["D"] = DiscriminatorSpec(kind=DiscKind.IMAGE, in_channels=src_ch + 3, **disc_kw)
    else:
        specs["G_Y"] = GeneratorSpec(
            arch=GenArch(net.gen_arch), in_channels=3, out_channels=src_ch,
            base_width=net.gen_base_width, depth=net.gen_depth,
        )
        specs["D"] = DiscriminatorSpec(kind=DiscKind.IMAGE, in_channels=3, **disc_kw)
        specs["D_X"] = DiscriminatorSpec(kind=DiscKind.IMAGE, in_channels=src_ch, **disc_kw)
    if obj.active_binary():
        specs["D_B"] = DiscriminatorSpec(kind=DiscKind.SEG_BINARY, in_channels=2, **disc_kw)
    if obj.active_multiclass():
        specs["D_M"] = DiscriminatorSpec(
            kind=DiscKind.SEG_MULTICLASS, in_channels=net.seg_class_count, **disc_kw
        )
    return specs


def build_backend(cfg: FrameworkConfig) -> SegBackend:
    if cfg.data.segbackend == "stub":
        return ColorPrototypeBackend(
            class_count=cfg.networks.seg_class_count,
            foreground_ids=cfg.networks.foreground_ids(),
        )
    return PretrainedSegBackend(cfg.data.segbackend_weights)


def build_train_state(
    cfg: FrameworkConfig,
    handle: SeedHandle | None = None,
    cache_dir: str | Path | None = None,
) -> TrainState:
    validate_config(cfg.objective, cfg.run)
    handle = handle or seed_all(cfg.run.seed)
    specs = role_specs(cfg)
    networks: dict[str, nn.Module] = {}
    optimizers: dict[str, torch.optim.Optimizer] = {}
    for role in (*GENERATOR_ROLES, *DISCRIMINATOR_ROLES):
        spec = specs.get(role)
        if spec is None:
            continue
        gen_stream = handle.torch_generator(f"init/{role}")
        if isinstance(spec, GeneratorSpec):
            networks[role] = build_generator(spec, gen_stream)
        else:
            networks[role] = build_discriminator(spec, gen_stream)
        optimizers[role] = torch.optim.Adam(
            networks[role].parameters(),
            lr=cfg.run.learning_rate,
            betas=(cfg.run.beta1, cfg.run.beta2),
        )
    needs_backend = cfg.objective.active_binary() or cfg.objective.active_multiclass()
    backend = build_backend(cfg) if needs_backend else None
    cache = SegmentationCache(cache_dir) if (needs_backend and cache_dir is not None) else None
    return TrainState(
        config=cfg, networks=networks, specs=specs, optimizers=optimizers,
        handle=handle, backend=backend, cache=cache,
    )


def train_step(
    state: TrainState,
    x: ImageBatch,
    y: ImageBatch,
    meta: PairingMeta,
) -> tuple[LossBreakdown, LossBreakdown]:
    """One optimization step; mutates ``state`` and returns both breakdowns."""
    obj = state.objective
    mode = obj.resolved_gan_mode()
    nets = state.networks
    xt, yt = x.data, y.data

    # (1) generator forward
    unpaired = obj.baseline == BaselineKind.UNPAIRED
    if unpaired:
        fw = cycle_forward(nets["G"], nets["G_Y"], xt, yt)
        fake_y = fw.fake_y
    else:
        fw = None
        fake_y = nets["G"](xt)

    # (2) segmentation maps of real y (cached) and fake G(x) (fresh graph)
    want_b, want_m = obj.active_binary(), obj.active_multiclass()
    real_bin = real_mc = fake_bin = fake_mc = None
    if want_b or want_m:
        backend, cache = state.backend, state.cache
        assert backend is not None
        if cache is not None:
            real_mc, real_bin = segment_cached(backend, cache, y)
        else:
            with torch.no_grad():
                real_mc = segment_multiclass(backend, y)
            real_bin = collapse_to_binary(real_mc, backend.foreground_ids)
        fake_batch = ImageBatch(data=fake_y, domain=Domain.COLOR, value_range=y.value_range)
        fake_mc = segment_multiclass(backend, fake_batch)
        fake_bin = collapse_to_binary(fake_mc, backend.foreground_ids) if want_b else None

    # (3) discriminators, image first, then segmentation
    disc_frags: dict[str, torch.Tensor] = {}
    disc_sub: dict[str, float] = {}
    if unpaired:
        d_img_loss, sub = unpaired_baseline_loss(
            nets["G"], nets["G_Y"], nets["D"], nets["D_X"], xt, yt,
            Side.DISCRIMINATOR, lambda_cycle=obj.lambda_cycle, mode=mode, forward=fw,
        )
        state.optimizers["D"].zero_grad(set_to_none=True)
        state.optimizers["D_X"].zero_grad(set_to_none=True)
        d_img_loss.backward()
        state.optimizers["D"].step()
        state.optimizers["D_X"].step()
    else:
        d_img_loss, sub = paired_baseline_loss(
            nets["G"], nets["D"], xt, yt, Side.DISCRIMINATOR,
            lambda_l1=obj.lambda_l1, mode=mode, fake_y=fake_y, aligned=meta.aligned,
        )
        state.optimizers["D"].zero_grad(set_to_none=True)
        d_img_loss.backward()
        state.optimizers["D"].step()
    disc_frags["l_g"] = d_img_loss.detach()
    disc_sub.update(sub)

    if want_b:
        d_b_loss = seg_adversarial_loss(nets["D_B"], real_bin, fake_bin, Side.DISCRIMINATOR, mode)
        state.optimizers["D_B"].zero_grad(set_to_none=True)
        d_b_loss.backward()
        state.optimizers["D_B"].step()
        disc_frags["l_b"] = d_b_loss.detach()
        disc_sub["seg_d_binary"] = scalar(d_b_loss)
    if want_m:
        d_m_loss = seg_adversarial_loss(nets["D_M"], real_mc, fake_mc, Side.DISCRIMINATOR, mode)
        state.optimizers["D_M"].zero_grad(set_to_none=True)
        d_m_loss.backward()
        state.optimizers["D_M"].step()
        disc_frags["l_m"] = d_m_loss.detach()
        disc_sub["seg_d_multiclass"] = scalar(d_m_loss)
    disc_breakdown = total_objective(obj, disc_frags, Side.DISCRIMINATOR, disc_sub)

    # (4) generator update on the weighted composite
    gen_frags: dict[str, torch.Tensor] = {}
    gen_sub: dict[str, float] = {}
    if unpaired:
        g_loss, sub = unpaired_baseline_loss(
            nets["G"], nets["G_Y"], nets["D"], nets["D_X"], xt, yt,
            Side.GENERATOR, lambda_cycle=obj.lambda_cycle, mode=mode, forward=fw,
        )
    else:
        g_loss, sub = paired_baseline_loss(
            nets["G"], nets["D"], xt, yt, Side.GENERATOR,
            lambda_l1=obj.lambda_l1, mode=mode, fake_y=fake_y, aligned=meta.aligned,
        )
    gen_frags["l_g"] = g_loss
    gen_sub.update(sub)
    if want_b:
        l_b_gen = seg_adversarial_loss(nets["D_B"], real_bin, fake_bin, Side.GENERATOR, mode)
        gen_frags["l_b"] = l_b_gen
        gen_sub["seg_g_binary"] = scalar(l_b_gen)
    if want_m:
        l_m_gen = seg_adversarial_loss(nets["D_M"], real_mc, fake_mc, Side.GENERATOR, mode)
        gen_frags["l_m"] = l_m_gen
        gen_sub["seg_g_multiclass"] = scalar(l_m_gen)

    gen_breakdown = total_objective(obj, gen_frags, Side.GENERATOR, gen_sub)
    assert gen_breakdown.tensor is not None
    for role in GENERATOR_ROLES:
        if role in state.optimizers:
            state.optimizers[role].zero_grad(set_to_none=True)
    gen_breakdown.tensor.backward()
    for role in GENERATOR_ROLES:
        if role in state.optimizers:
            state.optimizers[role].step()

    state.global_step += 1
    state.loss_history.append((disc_breakdown.total, gen_breakdown.total))
    return disc_breakdown, gen_breakdown


# ---------------------------------------------------------------------------
# Loss trace
# ---------------------------------------------------------------------------

TRACE_HEADER = "epoch,step,side,l_g,l_b,l_m,total,sub_terms"


def trace_row(epoch: int, step: int, bd: LossBreakdown) -> str:
    subs = ";".join(f"{k}={bd.sub_terms[k]!r}" for k in sorted(bd.sub_terms))
    return (
        f"{epoch},{step},{bd.side.value},{bd.l_g!r},{bd.l_b!r},{bd.l_m!r},{bd.total!r},{subs}"
    )


@dataclass
class TrainResult:
    final_checkpoint: Path
    trace_path: Path
    state: TrainState


def _checkpoint(state: TrainState, path: Path) -> Path:
    return save_checkpoint(
        path,
        state.config,
        epoch=state.epoch,
        global_step=state.global_step,
        networks={role: (state.specs[role], net) for role, net in state.networks.items()},
        optimizers=state.optimizers,
        rng_states=state.handle.torch_states(),
    )


def _restore(state: TrainState, reader: CheckpointReader) -> None:
    for role in reader.roles():
        if role not in state.networks:
            raise MissingGeneratorRoleError(f"resume config lacks role {role!r}")
        state.networks[role].load_state_dict(reader.load_network(role).state_dict())
        if role in reader.header["optimizers"]:
            state.optimizers[role].load_state_dict(reader.load_optimizer_state(role))
    state.handle.restore_torch_states(reader.rng_states())
    state.epoch = reader.epoch
    state.global_step = reader.global_step


def _epoch_lr(run, epoch: int) -> float:
    if not run.lr_decay or run.epochs <= 1:
        return run.learning_rate
    half = run.epochs // 2
    if epoch < half:
        return run.learning_rate
    return run.learning_rate * (run.epochs - epoch) / max(run.epochs - half, 1)


def train(
    cfg: FrameworkConfig,
    manifest: DatasetManifest,
    data_root: str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
    epoch_hook=None,
) -> TrainResult:
    """Run the configured number of epochs; deterministic for a fixed seed.

    Checkpoints land in ``out_dir/checkpoints`` every ``checkpoint_every``
    epochs plus a ``final.ckpt``; the per-step loss trace is appended to
    ``out_dir/logs/loss_trace.csv``. ``epoch_hook(state, epoch)`` runs after
    each epoch (used by evaluation probes).
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    log_dir = out_dir / "logs"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_dir.mkdir(parents=True, exist_ok=True)

    cache_dir = Path(cfg.data.cache_dir) if cfg.data.cache_dir else out_dir
    state = build_train_state(cfg, cache_dir=cache_dir)
    if resume is not None:
        _restore(state, CheckpointReader(resume))

    mode = Layout.PAIRED_AB if cfg.objective.baseline == BaselineKind.PAIRED else Layout.UNPAIRED_AB
    loader = BatchLoader(
        manifest, data_root, mode, cfg.run.batch_size, cfg.run.resolution,
        rng=state.handle.torch_generator("data"),
    )

    trace_path = log_dir / "loss_trace.csv"
    if not trace_path.exists():
        trace_path.write_text(TRACE_HEADER + "\n")

    last_ckpt: Path | None = None
    frozen_before = state.backend.checksum() if state.backend is not None else None
    with open(trace_path, "a") as trace:
        for epoch in range(state.epoch, cfg.run.epochs):
            lr = _epoch_lr(cfg.run, epoch)
            for opt in state.optimizers.values():
                for group in opt.param_groups:
                    group["lr"] = lr
            for step_idx, (x, y, meta) in enumerate(loader.batches()):
                try:
                    disc_bd, gen_bd = train_step(state, x, y, meta)
                except NonFiniteLossError as exc:
                    raise NonFiniteLossError(str(exc), last_checkpoint=last_ckpt) from exc
                trace.write(trace_row(epoch, step_idx, disc_bd) + "\n")
                trace.write(trace_row(epoch, step_idx, gen_bd) + "\n")
            state.epoch = epoch + 1
            if cfg.run.checkpoint_every and state.epoch % cfg.run.checkpoint_every == 0:
                last_ckpt = _checkpoint(state, ckpt_dir / f"epoch_{state.epoch:04d}.ckpt")
            if epoch_hook is not None:
                epoch_hook(state, state.epoch)
    if frozen_before is not None:
        frozen_after = state.backend.checksum()
        if frozen_after != frozen_before:
            raise RuntimeError("segmentation backend parameters changed during training")
    final = _checkpoint(state, ckpt_dir / "final.ckpt")
    return TrainResult(final_checkpoint=final, trace_path=trace_path, state=state)


def colorize(
    checkpoint: str | Path | CheckpointReader,
    sketches: ImageBatch,
    role: str = "G",
    batch_size: int = 16,
) -> ImageBatch:
    """Pure generator inference: no discriminator, optimizer, or backend."""
    reader = checkpoint if isinstance(checkpoint, CheckpointReader) else CheckpointReader(checkpoint)
    spec = reader.spec(role)
    if not isinstance(spec, GeneratorSpec):
        raise MissingGeneratorRoleError(f"role {role!r} is not a generator")
    net = reader.load_network(role)
    net.eval()
    outs = []
    with torch.no_grad():
        data = sketches.data
        for i in range(0, data.shape[0], batch_size):
            outs.append(net(data[i : i + batch_size]))
    out = torch.cat(outs) if outs else torch.empty(0, spec.out_channels, 0, 0)
    domain = Domain.COLOR if spec.out_channels == 3 else Domain.SKETCH
    return ImageBatch(data=out, domain=domain, value_range=sketches.value_range)
