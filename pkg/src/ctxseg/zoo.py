"""Architectures A-J (plus bidirectional G) and the checkpoint format.

Scale indices run from 0 (lowest magnification, widest field of view) to 3
(highest magnification). ``"hires"`` is the 512 x 512 full-resolution patch
covering the same field as scale 0, consumed only by H.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import ops
from .core.rng import Rng
from .core.tensor import Tensor, get_dtype
from .nn import ConvBlock, Dense, LstmCell, ParamRegistry, count_params, init_params

ARCH_IDS = ("A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "G_BIDIR")
SCALES = (0, 1, 2, 3)
HIRES = "hires"
N_CLASSES = 4
BASE_PLAN = (64, 128, 256, 512)
HIRES_PLAN = (64, 128, 256, 512, 512, 512, 512, 512)

SCALE_ORDERS = {
    "low_to_high": (0, 1, 2, 3),
    "high_to_low": (3, 2, 1, 0),
    # 5x -> 2.5x -> 20x -> 10x on a 2.5/5/10/20 pyramid
    "random_fixed": (1, 0, 3, 2),
    "bidirectional": (0, 1, 2, 3),
}


class InputError(ValueError):
    """A batch does not supply what the architecture consumes."""


class FormatError(ValueError):
    """A checkpoint file is corrupt, truncated, or of another version."""


@dataclass(frozen=True)
class ArchSpec:
    id: str
    scales: tuple = (0,)
    input_size: int = 64
    channel_plan: tuple = BASE_PLAN
    fusion: str = "none"  # none | early | concat | lstm | bilstm
    streams: str = "shared"  # shared | separate
    scale_order: str = "low_to_high"
    fc_units: int = 512
    hidden: int = 512
    dropout: float = 0.5
    n_classes: int = N_CLASSES
    width: float = 1.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["channel_plan"] = list(self.channel_plan)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ArchSpec":
        d = dict(d)
        d["scales"] = tuple(d["scales"])
        d["channel_plan"] = tuple(d["channel_plan"])
        return cls(**d)


def _scaled(n: int, width: float) -> int:
    return max(1, int(round(n * width)))


def arch_spec(
    arch_id: str,
    width: float = 1.0,
    scale_order: str | None = None,
    single_scale: Mapping[str, int] | None = None,
) -> ArchSpec:
    """Canonical spec for ``arch_id``.

    ``width`` scales every channel count and the FC/LSTM widths (1.0 is the
    published configuration). ``single_scale`` overrides which pyramid level
    A-D read; by default A reads the lowest magnification and D the highest.
    """
    if arch_id not in ARCH_IDS:
        raise ValueError(f"unknown architecture {arch_id!r}; expected one of {', '.join(ARCH_IDS)}")
    plan = tuple(_scaled(c, width) for c in BASE_PLAN)
    common = dict(
        channel_plan=plan, fc_units=_scaled(512, width), hidden=_scaled(512, width), width=width
    )
    mapping = {"A": 0, "B": 1, "C": 2, "D": 3}
    if single_scale:
        mapping.update(single_scale)
    if arch_id in mapping:
        spec = ArchSpec(arch_id, scales=(mapping[arch_id],), fusion="none", **common)
    elif arch_id == "E":
        spec = ArchSpec(arch_id, scales=SCALES, fusion="early", **common)
    elif arch_id == "F":
        spec = ArchSpec(arch_id, scales=SCALES, fusion="concat", streams="shared", **common)
    elif arch_id == "G":
        spec = ArchSpec(arch_id, scales=SCALES, fusion="lstm", streams="shared", **common)
    elif arch_id == "I":
        spec = ArchSpec(arch_id, scales=SCALES, fusion="concat", streams="separate", **common)
    elif arch_id == "J":
        spec = ArchSpec(arch_id, scales=SCALES, fusion="lstm", streams="separate", **common)
    elif arch_id == "G_BIDIR":
        spec = ArchSpec(
            arch_id, scales=SCALES, fusion="bilstm", streams="shared", scale_order="bidirectional", **common
        )
    else:  # H
        common["channel_plan"] = tuple(_scaled(c, width) for c in HIRES_PLAN)
        spec = ArchSpec(arch_id, scales=(HIRES,), input_size=512, fusion="none", **common)
    if scale_order is not None:
        if scale_order not in SCALE_ORDERS:
            raise ValueError(f"unknown scale order {scale_order!r}")
        if (scale_order == "bidirectional") != (spec.fusion == "bilstm"):
            raise ValueError("the bidirectional order is exclusive to G_BIDIR")
        spec = replace(spec, scale_order=scale_order)
    return spec


class Stream:
    """Conv blocks followed by FC1 (+ relu, dropout): one image -> one feature vector."""

    def __init__(self, registry: ParamRegistry, prefix: str, spec: ArchSpec, in_channels: int):
        self.blocks = []
        c = in_channels
        for k, out in enumerate(spec.channel_plan):
            self.blocks.append(ConvBlock(registry, f"{prefix}.block{k}", c, out))
            c = out
        side = spec.input_size >> len(spec.channel_plan)
        self.fc1 = Dense(registry, f"{prefix}.fc1", c * side * side, spec.fc_units)
        self.dropout = spec.dropout

    def __call__(self, x: Tensor, train: bool, rng) -> Tensor:
        for block in self.blocks:
            x = block(x, train)
        x = ops.relu(self.fc1(ops.flatten(x)))
        return ops.dropout(x, self.dropout, train, rng)


class Model:
    def __init__(self, spec: ArchSpec):
        self.spec = spec
        self.registry = reg = ParamRegistry()
        n_scales = len(spec.scales)
        if spec.fusion == "early":
            self.streams = [Stream(reg, "stream", spec, 3 * n_scales)]
        elif spec.streams == "separate" and n_scales > 1:
            self.streams = [Stream(reg, f"stream{k}", spec, 3) for k in range(n_scales)]
        else:
            self.streams = [Stream(reg, "stream", spec, 3)]
        self.lstms = []
        if spec.fusion in ("lstm", "bilstm"):
            self.lstms.append(LstmCell(reg, "lstm", spec.fc_units, spec.hidden))
            if spec.fusion == "bilstm":
                self.lstms.append(LstmCell(reg, "lstm_rev", spec.fc_units, spec.hidden))
            fused = spec.hidden * n_scales * len(self.lstms)
        elif spec.fusion == "concat":
            fused = spec.fc_units * n_scales
        else:
            fused = spec.fc_units
        self.fc2 = Dense(reg, "fc2", fused, spec.fc_units)
        self.classifier = Dense(reg, "classifier", spec.fc_units, spec.n_classes)
        self.meta: dict = {}

    @property
    def n_params(self) -> int:
        return count_params(self.registry)

    def scale_sequence(self) -> tuple:
        """Positions (into ``spec.scales``) in the order the LSTM visits them."""
        order = SCALE_ORDERS[self.spec.scale_order]
        return tuple(order[: len(self.spec.scales)])

    def _check_batch(self, batch: Mapping) -> int:
        n = None
        for s in self.spec.scales:
            if s not in batch:
                raise InputError(f"architecture {self.spec.id} needs scale {s!r}; batch has {sorted(map(str, batch))}")
            arr = batch[s]
            size = self.spec.input_size
            if arr.ndim != 4 or arr.shape[1:] != (3, size, size):
                raise InputError(
                    f"scale {s!r}: expected patches of shape (N, 3, {size}, {size}), got {arr.shape}"
                )
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise InputError(f"scale {s!r}: batch size {arr.shape[0]} differs from {n}")
        return n

    def features(self, batch: Mapping, train: bool, rng=None) -> list[Tensor]:
        """Per-scale stream features in ``spec.scales`` order (late-fusion models)."""
        n = self._check_batch(batch)
        xs = [np.asarray(batch[s], dtype=get_dtype()) for s in self.spec.scales]
        if len(self.streams) == 1:
            # one pass over all scales stacked along the batch axis
            stacked = ops.cast_input(np.concatenate(xs, axis=0))
            f = self.streams[0](stacked, train, rng)
            return [ops.slice_axis(f, k * n, (k + 1) * n, axis=0) for k in range(len(xs))]
        return [stream(ops.cast_input(x), train, rng) for stream, x in zip(self.streams, xs)]

    def forward(self, batch: Mapping, train: bool = False, rng=None) -> Tensor:
        spec = self.spec
        if spec.fusion in ("none", "early"):
            n = self._check_batch(batch)
            xs = [np.asarray(batch[s], dtype=get_dtype()) for s in spec.scales]
            x = ops.cast_input(np.concatenate(xs, axis=1) if len(xs) > 1 else xs[0])
            fused = self.streams[0](x, train, rng)
        else:
            feats = self.features(batch, train, rng)
            if spec.fusion == "concat":
                fused = ops.concat(feats, axis=1)
            else:
                seq = [feats[k] for k in self.scale_sequence()]
                states = self._run_lstm(self.lstms[0], seq)
                if spec.fusion == "bilstm":
                    states += self._run_lstm(self.lstms[1], seq[::-1])
                fused = ops.concat(states, axis=1)
        y = ops.relu(self.fc2(fused))
        y = ops.dropout(y, spec.dropout, train, rng)
        return self.classifier(y)

    __call__ = forward

    @staticmethod
    def _run_lstm(cell: LstmCell, seq: list[Tensor]) -> list[Tensor]:
        h, c = cell.zero_state(seq[0].shape[0])
        states = []
        for x in seq:
            h, c = cell.step(x, h, c)
            states.append(h)
        return states

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then running statistics, in registry order."""
        out = [(name, t.data) for name, t in self.registry]
        for name, st in self.registry.stats.items():
            out.append((f"{name}.running_mean", st.mean))
            out.append((f"{name}.running_var", st.var))
        return out

    def copy_state(self) -> dict:
        return {
            "params": {name: t.data.copy() for name, t in self.registry},
            "stats": {
                name: (st.mean.copy(), st.var.copy(), st.populated)
                for name, st in self.registry.stats.items()
            },
        }

    def load_state(self, state: Mapping) -> None:
        for name, t in self.registry:
            t.data[...] = state["params"][name]
        for name, st in self.registry.stats.items():
            mean, var, populated = state["stats"][name]
            st.mean[...] = mean
            st.var[...] = var
            st.populated = populated


def build(spec: ArchSpec | str, seed: int | None = 0) -> Model:
    """Instantiate ``spec``; with a seed, parameters come from its weights stream."""
    if isinstance(spec, str):
        spec = arch_spec(spec)
    if spec.id not in ARCH_IDS:
        raise ValueError(f"unknown architecture {spec.id!r}")
    model = Model(spec)
    if seed is not None:
        init_params(model.registry, Rng(seed).stream("weights"))
    return model


# --------------------------------------------------------------- checkpoint

MAGIC = b"CSEG"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _pack_str(s: str, width: str = "<H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(width, len(raw)) + raw


def _meta_block(model: Model, meta: Mapping | None) -> dict:
    return {
        "arch": model.spec.to_json(),
        "bn_populated": all(st.populated for st in model.registry.stats.values()),
        "train": dict(meta if meta is not None else model.meta),
    }


def checkpoint_bytes(model: Model, meta: Mapping | None = None) -> bytes:
    """Serialise ``model``.

    Layout (little-endian): magic ``CSEG``, u16 version, u16-prefixed arch
    id, u16-prefixed scale order, u32-prefixed JSON metadata (arch spec and
    training metadata), u32 tensor count, then per tensor: u16-prefixed
    name, u8 dtype code (0 = f32, 1 = f64), u8 rank, u32 extents, payload.
    Parameters are f32; batch-norm running statistics are f64.
    """
    meta_all = _meta_block(model, meta)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(_pack_str(model.spec.id))
    buf.write(_pack_str(model.spec.scale_order))
    buf.write(_pack_str(json.dumps(meta_all, sort_keys=True), "<I"))
    arrays = model.state_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        code = 1 if arr.dtype == np.float64 and name.endswith(("running_mean", "running_var")) else 0
        data = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
        buf.write(_pack_str(name))
        buf.write(struct.pack("<BB", code, data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    return buf.getvalue()


def expected_checkpoint_size(model: Model, meta: Mapping | None = None) -> int:
    """Byte length implied by the name table, computed without serialising payloads."""
    meta_all = _meta_block(model, meta)
    size = 4 + 2
    size += 2 + len(model.spec.id.encode()) + 2 + len(model.spec.scale_order.encode())
    size += 4 + len(json.dumps(meta_all, sort_keys=True).encode())
    size += 4
    for name, arr in model.state_arrays():
        itemsize = 8 if name.endswith(("running_mean", "running_var")) else 4
        size += 2 + len(name.encode()) + 2 + 4 * arr.ndim + itemsize * arr.size
    return size


def save(model: Model, path, meta: Mapping | None = None) -> int:
    data = checkpoint_bytes(model, meta)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<H") -> str:
        (n,) = self.unpack(width)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint string is not valid utf-8") from exc


def loads(data: bytes, expect_arch: str | None = None) -> Model:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {VERSION})")
    arch_id = r.string()
    order = r.string()
    try:
        meta = json.loads(r.string("<I"))
        spec = ArchSpec.from_json(meta["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint metadata unreadable: {exc}") from exc
    if spec.id != arch_id or spec.scale_order != order:
        raise FormatError("checkpoint header disagrees with its metadata block")
    if expect_arch is not None and arch_id != expect_arch:
        raise FormatError(f"checkpoint holds architecture {arch_id}, requested {expect_arch}")
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name = r.string()
        code, rank = r.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        dt = _DTYPE_CODES[code]
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
    if r.pos != len(data):
        raise FormatError(f"checkpoint has {len(data) - r.pos} trailing bytes")
    model = Model(spec)
    expected = [name for name, _ in model.state_arrays()]
    if sorted(expected) != sorted(arrays):
        raise FormatError("checkpoint tensor table does not match the architecture")
    for name, t in model.registry:
        if arrays[name].shape != t.shape:
            raise FormatError(f"tensor {name!r}: shape {arrays[name].shape} != {t.shape}")
        t.data[...] = arrays[name]
    for name, st in model.registry.stats.items():
        st.mean[...] = arrays[f"{name}.running_mean"]
        st.var[...] = arrays[f"{name}.running_var"]
        st.populated = bool(meta.get("bn_populated", True))
    model.meta = meta.get("train", {})
    return model


def load(path, expect_arch: str | None = None) -> Model:
    return loads(Path(path).read_bytes(), expect_arch)
