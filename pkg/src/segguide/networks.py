"""Generator/discriminator construction and the checkpoint archive format.

Builders take an explicit ``torch.Generator`` so parameter initialization is
a pure function of (spec, seed). All stochastic init uses normal(0, 0.02),
the convention of the baselines this framework wraps.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .core import FrameworkConfig, parse_config, serialize_config
from .errors import ChannelMismatchError, MissingGeneratorRoleError, UnsupportedArchError
from .segbackend import checksum_tensors


class GenArch(Enum):
    RESNET_BLOCKS = "resnet_blocks"
    UNET = "unet"


class DiscKind(Enum):
    IMAGE = "image"
    SEG_BINARY = "seg_binary"
    SEG_MULTICLASS = "seg_multiclass"


@dataclass(frozen=True)
class GeneratorSpec:
    arch: GenArch = GenArch.RESNET_BLOCKS
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 64
    depth: int = 6  # residual blocks (resnet) or down/up levels (unet)


@dataclass(frozen=True)
class DiscriminatorSpec:
    kind: DiscKind = DiscKind.IMAGE
    in_channels: int = 3
    base_width: int = 64
    n_layers: int = 3
    patch_output: bool = True


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        base = spec.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3), nn.Conv2d(spec.in_channels, base, 7),
            nn.InstanceNorm2d(base), nn.ReLU(True),
        ]
        ch = base
        for _ in range(2):  # two stride-2 stages: resolution must divide by 4
            layers += [nn.Conv2d(ch, ch * 2, 3, 2, 1), nn.InstanceNorm2d(ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [_ResBlock(ch) for _ in range(spec.depth)]
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, 2, 1, output_padding=1),
                nn.InstanceNorm2d(ch // 2), nn.ReLU(True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, spec.out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        self.in_channels = spec.in_channels

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ChannelMismatchError(f"generator expects {self.in_channels} channels, got {x.shape[1]}")
        return self.model(x)


class _UnetBlock(nn.Module):
    """One encoder/decoder level wrapping an inner block (pix2pix layout)."""

    def __init__(self, outer_ch: int, inner_ch: int, in_ch: int | None = None,
                 submodule: nn.Module | None = None, outermost: bool = False,
                 innermost: bool = False, out_ch: int | None = None):
        super().__init__()
        self.outermost = outermost
        in_ch = outer_ch if in_ch is None else in_ch
        down_conv = nn.Conv2d(in_ch, inner_ch, 4, 2, 1)
        if outermost:
            up = [nn.ReLU(True), nn.ConvTranspose2d(inner_ch * 2, out_ch or outer_ch, 4, 2, 1), nn.Tanh()]
            down = [down_conv]
        elif innermost:
            up = [nn.ReLU(True), nn.ConvTranspose2d(inner_ch, outer_ch, 4, 2, 1), nn.InstanceNorm2d(outer_ch)]
            down = [nn.LeakyReLU(0.2, True), down_conv]
        else:
            up = [nn.ReLU(True), nn.ConvTranspose2d(inner_ch * 2, outer_ch, 4, 2, 1), nn.InstanceNorm2d(outer_ch)]
            down = [nn.LeakyReLU(0.2, True), down_conv, nn.InstanceNorm2d(inner_ch)]
        mid = [] if submodule is None else [submodule]
        self.model = nn.Sequential(*down, *mid, *up)

    def forward(self, x):
        if self.outermost:
            return self.model(x)
        return torch.cat([x, self.model(x)], dim=1)


class UnetGenerator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        base = spec.base_width
        depth = spec.depth
        if depth < 2:
            raise UnsupportedArchError("unet depth must be >= 2")
        widths = [min(base * (2**i), base * 8) for i in range(depth)]
        block = _UnetBlock(widths[-1], widths[-1], innermost=True)
        for level in range(depth - 2, 0, -1):
            block = _UnetBlock(widths[level], widths[level + 1], submodule=block)
        self.model = _UnetBlock(widths[0], widths[1], in_ch=spec.in_channels,
                                submodule=block, outermost=True, out_ch=spec.out_channels)
        self.in_channels = spec.in_channels
        self.depth = depth

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ChannelMismatchError(f"generator expects {self.in_channels} channels, got {x.shape[1]}")
        if x.shape[2] % (2**self.depth) or x.shape[3] % (2**self.depth):
            raise ValueError(
                f"unet of depth {self.depth} needs spatial size divisible by {2**self.depth}"
            )
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """PatchGAN scorer emitting an N,1,h',w' map of pre-sigmoid logits."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        base = spec.base_width
        layers: list[nn.Module] = [nn.Conv2d(spec.in_channels, base, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        ch = base
        for i in range(1, spec.n_layers):
            nxt = min(base * (2**i), base * 8)
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2, True)]
            ch = nxt
        nxt = min(base * (2**spec.n_layers), base * 8)
        layers += [nn.Conv2d(ch, nxt, 4, 1, 1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(nxt, 1, 4, 1, 1)]
        self.model = nn.Sequential(*layers)
        self.in_channels = spec.in_channels
        self.patch_output = spec.patch_output

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ChannelMismatchError(
                f"discriminator expects {self.in_channels} channels, got {x.shape[1]}"
            )
        out = self.model(x)
        if not self.patch_output:
            out = out.mean(dim=(2, 3))
        return out


def build_generator(spec: GeneratorSpec, generator: torch.Generator) -> nn.Module:
    if spec.arch == GenArch.RESNET_BLOCKS:
        net = ResnetGenerator(spec)
    elif spec.arch == GenArch.UNET:
        net = UnetGenerator(spec)
    else:
        raise UnsupportedArchError(f"unknown generator arch {spec.arch!r}")
    init_weights(net, generator)
    return net


def build_discriminator(spec: DiscriminatorSpec, generator: torch.Generator) -> nn.Module:
    net = PatchDiscriminator(spec)
    init_weights(net, generator)
    return net


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_checksum(module: nn.Module) -> str:
    return checksum_tensors([p.data for p in module.parameters()])


# ---------------------------------------------------------------------------
# Checkpoint archive
#
# Layout: magic "SGCKPT01", u32 header length, JSON header, concatenated
# little-endian tensor payload. The writer is fully deterministic, so two
# checkpoints holding equal state are byte-identical.
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SGCKPT01"
_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64, "uint8": np.uint8}


def _spec_to_json(spec) -> dict:
    d = dataclasses.asdict(spec)
    for k, v in d.items():
        if isinstance(v, Enum):
            d[k] = v.value
    d["__spec__"] = type(spec).__name__
    return d


def _spec_from_json(d: Mapping) -> GeneratorSpec | DiscriminatorSpec:
    d = dict(d)
    name = d.pop("__spec__")
    if name == "GeneratorSpec":
        d["arch"] = GenArch(d["arch"])
        return GeneratorSpec(**d)
    if name == "DiscriminatorSpec":
        d["kind"] = DiscKind(d["kind"])
        return DiscriminatorSpec(**d)
    raise UnsupportedArchError(f"unknown spec kind {name!r}")


class _BlobWriter:
    def __init__(self):
        self.entries: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, name: str, array: np.ndarray) -> None:
        dtype = str(array.dtype)
        if dtype not in _DTYPES:
            array = array.astype(np.float32)
            dtype = "float32"
        raw = np.ascontiguousarray(array).tobytes()
        self.entries.append(
            {"name": name, "dtype": dtype, "shape": list(array.shape),
             "offset": self.offset, "nbytes": len(raw)}
        )
        self.chunks.append(raw)
        self.offset += len(raw)


def save_checkpoint(
    path: str | Path,
    config: FrameworkConfig,
    epoch: int,
    global_step: int,
    networks: Mapping[str, tuple[GeneratorSpec | DiscriminatorSpec, nn.Module]],
    optimizers: Mapping[str, torch.optim.Optimizer] | None = None,
    rng_states: Mapping[str, bytes] | None = None,
) -> Path:
    writer = _BlobWriter()
    net_index: dict[str, dict] = {}
    for role in sorted(networks):
        spec, module = networks[role]
        keys = []
        for key, tensor in module.state_dict().items():
            blob = f"net/{role}/{key}"
            writer.add(blob, tensor.detach().cpu().numpy())
            keys.append(key)
        net_index[role] = {"spec": _spec_to_json(spec), "keys": keys}

    opt_index: dict[str, dict] = {}
    for role in sorted(optimizers or {}):
        sd = optimizers[role].state_dict()
        groups = []
        for g in sd["param_groups"]:
            g = dict(g)
            g["params"] = list(g["params"])
            if "betas" in g:
                g["betas"] = list(g["betas"])
            groups.append(g)
        state_keys: dict[str, list[str]] = {}
        for pidx in sorted(sd["state"]):
            fields = []
            for fname in sorted(sd["state"][pidx]):
                val = sd["state"][pidx][fname]
                tensor = val if isinstance(val, torch.Tensor) else torch.tensor(float(val))
                writer.add(f"opt/{role}/{pidx}/{fname}", tensor.detach().cpu().numpy())
                fields.append(fname)
            state_keys[str(pidx)] = fields
        opt_index[role] = {"param_groups": groups, "state": state_keys}

    rng_index: list[str] = []
    for name in sorted(rng_states or {}):
        writer.add(f"rng/{name}", np.frombuffer(rng_states[name], dtype=np.uint8))
        rng_index.append(name)

    header = {
        "version": 1,
        "epoch": int(epoch),
        "global_step": int(global_step),
        "config": serialize_config(config),
        "networks": net_index,
        "optimizers": opt_index,
        "rng": rng_index,
        "entries": writer.entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in writer.chunks:
            fh.write(chunk)
    tmp.replace(path)
    return path


class CheckpointReader:
    """Lazy reader: loads only the roles that are asked for.

    The inference path (``colorize``) loads a single generator role and
    never materializes discriminators or optimizer state.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        raw = self.path.read_bytes()
        if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError(f"{self.path} is not a checkpoint archive")
        (hlen,) = struct.unpack_from("<I", raw, len(CKPT_MAGIC))
        start = len(CKPT_MAGIC) + 4
        self.header = json.loads(raw[start : start + hlen].decode())
        self._payload = raw[start + hlen :]
        self._entries = {e["name"]: e for e in self.header["entries"]}

    @property
    def epoch(self) -> int:
        return self.header["epoch"]

    @property
    def global_step(self) -> int:
        return self.header["global_step"]

    def config(self) -> FrameworkConfig:
        return parse_config(self.header["config"])

    def roles(self) -> list[str]:
        return sorted(self.header["networks"])

    def _array(self, name: str) -> np.ndarray:
        e = self._entries[name]
        raw = self._payload[e["offset"] : e["offset"] + e["nbytes"]]
        return np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()

    def spec(self, role: str) -> GeneratorSpec | DiscriminatorSpec:
        try:
            return _spec_from_json(self.header["networks"][role]["spec"])
        except KeyError:
            raise MissingGeneratorRoleError(f"checkpoint has no network role {role!r}") from None

    def load_network(self, role: str) -> nn.Module:
        spec = self.spec(role)
        if isinstance(spec, GeneratorSpec):
            net = build_generator(spec, torch.Generator().manual_seed(0))
        else:
            net = build_discriminator(spec, torch.Generator().manual_seed(0))
        state = {
            key: torch.from_numpy(self._array(f"net/{role}/{key}"))
            for key in self.header["networks"][role]["keys"]
        }
        net.load_state_dict(state)
        return net

    def load_optimizer_state(self, role: str) -> dict:
        idx = self.header["optimizers"][role]
        state = {}
        for pidx_s, fields in idx["state"].items():
            pidx = int(pidx_s)
            per = {}
            for fname in fields:
                arr = self._array(f"opt/{role}/{pidx}/{fname}")
                per[fname] = torch.from_numpy(arr)
            state[pidx] = per
        groups = []
        for g in idx["param_groups"]:
            g = dict(g)
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
            groups.append(g)
        return {"state": state, "param_groups": groups}

    def rng_states(self) -> dict[str, bytes]:
        return {name: self._array(f"rng/{name}").tobytes() for name in self.header["rng"]}
