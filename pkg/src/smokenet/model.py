"""Full network assembly, parameter enumeration and checkpoint files.

Channel layout for ``filters = (f1, ..., f6)`` and ``in_channels`` image
channels::

    stem          1x1 conv          in_channels -> f1
    encoder k     stage k           f_{k-1} -> f_k        (f_0 = f1), H/2^k
    skip k        TConv s2          f_{k+1} -> f_k        (k = 1..5)
    decoder k     TConv s2          f_k -> f_{k-1}        output at H/2^{k-1} (f_0 = f1)
    head          TConv s1 + sigmoid f1 -> 1              output at H
    aux k (2..6)  1x1 conv + sigmoid f_{k-2} -> 1, nearest upsample x2^{k-1}
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .blocks import (
    AuxHead,
    DecoderStage,
    MultiscaleStage,
    MultiscaleStageSpec,
    MultiviewStage,
    MultiviewStageSpec,
    PlainConvStage,
    SegmentationHead,
    SkipPathway,
    SpatialAttentionStage,
    parse_kernel,
)
from .layers import Conv2d, Module, ModuleList
from .tensor_core import Tensor

NUM_STAGES = 6
DOWNSAMPLE = 2**NUM_STAGES


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    filters: tuple[int, ...] = (4, 8, 16, 32, 64, 128)
    in_channels: int = 3
    selected_kernels: tuple[str, ...] = ("3x3", "3x3", "3x3")
    dilations: tuple[int, ...] = (2, 2, 2)
    decoder_depth: int = 6
    aux_head: bool = True
    precision: int = 32
    # ablation switches: "multiscale" | "plain", "multiview" | "spatial"
    conv_variant: str = "multiscale"
    attention_variant: str = "multiview"

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "selected_kernels", tuple(self.selected_kernels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        self.validate()

    def validate(self) -> None:
        f = self.filters
        if len(f) != NUM_STAGES:
            raise ConfigError(f"filters needs {NUM_STAGES} widths, got {len(f)}")
        bad = [w for w in f if w <= 0 or w % 4]
        if bad:
            raise ConfigError(f"filter widths must be positive multiples of 4, got {bad}")
        if any(b <= a for a, b in zip(f, f[1:])):
            raise ConfigError(f"filters must be strictly increasing, got {list(f)}")
        if len(self.selected_kernels) != 3 or len(self.dilations) != 3:
            raise ConfigError("selected_kernels and dilations need one entry per multiscale stage (3)")
        for k in self.selected_kernels:
            try:
                parse_kernel(k)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be positive")
        if self.decoder_depth not in (3, 6):
            raise ConfigError(f"decoder_depth must be 3 or 6, got {self.decoder_depth}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.conv_variant not in ("multiscale", "plain"):
            raise ConfigError(f"unknown conv_variant {self.conv_variant!r}")
        if self.attention_variant not in ("multiview", "spatial"):
            raise ConfigError(f"unknown attention_variant {self.attention_variant!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def encoder_block_kinds(self) -> tuple[str, ...]:
        return (self.conv_variant,) * 3 + (self.attention_variant,) * 3

    def channel_table(self) -> list[dict]:
        """Per-stage widths; stage k encoder maps in_ch -> out_ch at 1/2^k resolution."""
        f = self.filters
        rows = []
        for k in range(1, NUM_STAGES + 1):
            rows.append(
                {
                    "stage": k,
                    "encoder": self.encoder_block_kinds[k - 1],
                    "in_ch": f[max(k - 2, 0)],
                    "out_ch": f[k - 1],
                    "scale": 2**k,
                    "decoder_out_ch": f[max(k - 2, 0)],
                }
            )
        return rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["selected_kernels"] = list(self.selected_kernels)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelOutput:
    mask: Tensor
    aux_masks: list[tuple[int, Tensor]] = field(default_factory=list)


class SmokeNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.dtype
        f = config.filters
        self.stem = Conv2d(config.in_channels, f[0], 1, rng=rng, dtype=dt)

        stages = []
        for k, row in enumerate(config.channel_table()):
            cin, cout = row["in_ch"], row["out_ch"]
            if k < 3:
                if config.conv_variant == "multiscale":
                    spec = MultiscaleStageSpec(cin, cout, config.selected_kernels[k], config.dilations[k])
                    stages.append(MultiscaleStage(spec, rng=rng, dtype=dt))
                else:
                    stages.append(PlainConvStage(cin, cout, rng=rng, dtype=dt))
            elif config.attention_variant == "multiview":
                stages.append(MultiviewStage(MultiviewStageSpec(cin, cout), rng=rng, dtype=dt))
            else:
                stages.append(SpatialAttentionStage(cin, cout, rng=rng, dtype=dt))
        self.encoder = ModuleList(stages)

        # skip pathways are indexed by stage-1; the deepest has no Up
        first_skip = NUM_STAGES - config.decoder_depth
        self.skips = ModuleList(
            [
                SkipPathway(f[k], f[k + 1] if k + 1 < NUM_STAGES else None, rng=rng, dtype=dt)
                for k in range(first_skip, NUM_STAGES)
            ]
        )
        self.decoder = ModuleList(
            [DecoderStage(f[k], f[max(k - 1, 0)], rng=rng, dtype=dt) for k in range(NUM_STAGES)]
        )
        self.head = SegmentationHead(f[0], rng=rng, dtype=dt)
        self.aux = (
            ModuleList([AuxHead(f[k - 2], 2 ** (k - 1), rng=rng, dtype=dt) for k in range(2, NUM_STAGES + 1)])
            if config.aux_head
            else None
        )
        self.assign_paths()

    @property
    def dtype(self):
        return self.config.dtype

    def _skip_for(self, k: int):
        first_skip = NUM_STAGES - self.config.decoder_depth
        return self.skips[k - first_skip] if k >= first_skip else None

    def forward(self, x) -> ModelOutput:
        x = tc.as_tensor(x)
        if x.data.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim != 4:
            raise tc.DimensionError(f"expected an NCHW batch, got shape {x.shape}", axis="rank")
        if x.shape[1] != self.config.in_channels:
            raise tc.DimensionError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}", axis="C"
            )
        for ax, name in ((2, "H"), (3, "W")):
            if x.shape[ax] % DOWNSAMPLE:
                raise tc.DimensionError(
                    f"input {name}={x.shape[ax]} must be a multiple of {DOWNSAMPLE}", axis=name
                )

        feats = []
        h = self.stem(x)
        for stage in self.encoder:
            h = stage(h)
            feats.append(h)

        skips: list[Tensor | None] = [None] * NUM_STAGES
        lower = None
        for k in reversed(range(NUM_STAGES)):
            pathway = self._skip_for(k)
            if pathway is not None:
                lower = pathway(feats[k], lower)
                skips[k] = lower

        dec_out: list[Tensor] = [None] * NUM_STAGES
        below = None
        for k in reversed(range(NUM_STAGES)):
            below = self.decoder[k](skips[k], below)
            dec_out[k] = below

        mask = self.head(dec_out[0])
        aux = []
        if self.aux is not None:
            for i, head in enumerate(self.aux):
                stage = i + 2
                aux.append((stage, head(dec_out[stage - 1])))
        return ModelOutput(mask, aux)


def build(config: ModelConfig | None = None, seed: int = 0) -> SmokeNet:
    return SmokeNet(config or ModelConfig(), seed)


def forward(model: SmokeNet, batch, mode: str = "eval") -> ModelOutput:
    """Run ``model`` in ``mode``; eval mode records no graph and touches no state."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    if mode == "eval":
        with tc.no_grad():
            return model(batch)
    return model(batch)


def inference_parameters(model: Module) -> list[tuple[str, Tensor]]:
    """Learnable tensors used to produce the final mask (auxiliary heads excluded)."""
    return [(n, p) for n, p in model.named_parameters() if not n.startswith("aux.")]


def count_params(model: Module, include_aux: bool = False) -> int:
    params = model.named_parameters() if include_aux else inference_parameters(model)
    return sum(p.size for _, p in params)


# checkpoints ---------------------------------------------------------------------------
MAGIC = b"SMKCKPT1"
_LEN = struct.Struct("<Q")


def _state_entries(model: Module, optimizer=None) -> list[tuple[str, np.ndarray]]:
    entries = [("param." + n, p.data) for n, p in model.named_parameters()]
    entries += [("buffer." + n, b) for n, b in model.named_buffers()]
    if optimizer is not None:
        for name, (m1, m2) in optimizer.moments().items():
            entries.append(("optim.m." + name, m1))
            entries.append(("optim.v." + name, m2))
    return entries


def save_checkpoint(path, model: SmokeNet, optimizer=None, meta: dict | None = None) -> None:
    """Write parameters, norm buffers and optional optimizer moments.

    Layout: magic, u64 manifest length, JSON manifest, payload, u32 CRC of
    the payload. The manifest lists (name, shape, dtype, offset) for each
    serialized tensor; each tensor in the payload is a 4-int shape header
    followed by little-endian values.
    """
    entries = _state_entries(model, optimizer)
    payload = bytearray()
    manifest = []
    for name, arr in entries:
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"), "offset": len(payload)})
        payload += tc.tensor_to_bytes(arr)
    nbt = {name: s.num_batches_tracked for name, s in _named_norm_states(model)}
    header = {
        "config": model.config.to_dict(),
        "tensors": manifest,
        "num_batches_tracked": nbt,
        "optimizer_step": getattr(optimizer, "step_count", None),
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))
    tmp.replace(path)


def _named_norm_states(model: Module):
    return _walk(model, "")


def _walk(module: Module, prefix: str):
    for key, value in module._children():
        if isinstance(value, Module):
            yield from _walk(value, prefix + key + ".")
        elif isinstance(value, tc.NormState):
            yield prefix + key, value


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint file into (header, {name: array})."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + _LEN.size:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    if len(raw) < pos + hlen + 4:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        header = json.loads(raw[pos : pos + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    payload = raw[pos + hlen : -4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    arrays = {}
    for entry in header["tensors"]:
        try:
            arr, _ = tc.tensor_from_bytes(payload, entry["dtype"], entry["offset"])
        except ValueError as exc:
            raise CheckpointError(f"{path}: tensor {entry['name']}: {exc}") from exc
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return header, arrays


def load_checkpoint(path, model: SmokeNet | None = None, optimizer=None) -> tuple[SmokeNet, dict]:
    """Restore a model (built from the stored config if ``model`` is None).

    Returns the model and the header's ``meta`` dict.
    """
    header, arrays = read_checkpoint(path)
    if model is None:
        model = SmokeNet(ModelConfig.from_dict(header["config"]))
    for name, p in model.named_parameters():
        key = "param." + name
        if key not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[key].shape}, model expects {p.shape}")
        p.data = arrays[key].astype(p.dtype)
    for name, buf in model.named_buffers():
        key = "buffer." + name
        if key not in arrays:
            raise CheckpointError(f"{path}: missing buffer {name}")
        buf[...] = arrays[key]
    nbt = header.get("num_batches_tracked", {})
    for name, state in _named_norm_states(model):
        state.num_batches_tracked = int(nbt.get(name, 0))
    if optimizer is not None:
        moments = {}
        for name, _ in model.named_parameters():
            mk, vk = "optim.m." + name, "optim.v." + name
            if mk in arrays and vk in arrays:
                moments[name] = (arrays[mk], arrays[vk])
        optimizer.load_moments(moments, header.get("optimizer_step") or 0)
    return model, header.get("meta", {})
