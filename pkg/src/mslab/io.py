"""On-disk formats: framed binary checkpoints, metrics CSV and IDX datasets.

Checkpoint layout (all integers little-endian)::

    b"MSGL" | u32 version | u32 block count
    block*: u8 kind | u32 name length | name (utf-8) | u32 rank | u64 dims[rank]
            | payload | u32 crc32(kind..payload)

``kind`` 1 holds a parameter, 2 an optimizer array, 3 the config echo. For
kinds 1 and 2 the payload is ``prod(dims)`` float64 values; for kind 3 the
rank is 1 and the payload is ``dims[0]`` bytes of utf-8 text.
"""

from __future__ import annotations

import csv
import math
import os
import struct
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import AdamState, ContractError, ParamSet

MAGIC = b"MSGL"
VERSION = 1
KIND_PARAM, KIND_OPTIM, KIND_CONFIG = 1, 2, 3


class CheckpointError(ValueError):
    pass


class IDXError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    config_text: str = ""

    def paramset(self, prefix: str, template: ParamSet) -> ParamSet:
        """Copy of ``template`` with values taken from blocks ``prefix + name``."""
        out = template.copy()
        for name, t in out.items():
            key = prefix + name
            if key not in self.params:
                raise CheckpointError(f"missing parameter block {key!r}")
            if self.params[key].shape != t.shape:
                raise CheckpointError(f"block {key!r} has shape {self.params[key].shape}, expected {t.shape}")
            t.data = self.params[key].copy()
        return out

    def adam_state(self, prefix: str) -> AdamState:
        hyper = self.optim.get(prefix + "hyper")
        if hyper is None:
            raise CheckpointError(f"missing optimizer block {prefix + 'hyper'!r}")
        state = AdamState(lr=float(hyper[0]), beta1=float(hyper[1]), beta2=float(hyper[2]),
                          eps=float(hyper[3]), step=int(hyper[4]))
        for key, arr in self.optim.items():
            if key.startswith(prefix + "m."):
                state.m[key[len(prefix) + 2:]] = arr.copy()
            elif key.startswith(prefix + "v."):
                state.v[key[len(prefix) + 2:]] = arr.copy()
        return state


def _block(kind: int, name: str, dims: tuple[int, ...], payload: bytes) -> bytes:
    raw_name = name.encode("utf-8")
    body = (struct.pack("<BI", kind, len(raw_name)) + raw_name + struct.pack("<I", len(dims))
            + struct.pack(f"<{len(dims)}Q", *dims) + payload)
    return body + struct.pack("<I", zlib.crc32(body))


def _array_block(kind: int, name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return _block(kind, name, tuple(int(d) for d in arr.shape), arr.tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blocks = [_array_block(KIND_PARAM, k, v) for k, v in ckpt.params.items()]
    blocks += [_array_block(KIND_OPTIM, k, v) for k, v in ckpt.optim.items()]
    text = ckpt.config_text.encode("utf-8")
    blocks.append(_block(KIND_CONFIG, "config", (len(text),), text))
    return MAGIC + struct.pack("<II", VERSION, len(blocks)) + b"".join(blocks)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    if len(data) < 12:
        raise CheckpointError("truncated header")
    version, n_blocks = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    ckpt = Checkpoint()
    pos = 12
    last = "<header>"
    for i in range(n_blocks):
        start = pos
        try:
            kind, name_len = struct.unpack_from("<BI", data, pos)
            pos += 5
            name = data[pos:pos + name_len].decode("utf-8")
            if len(data) < pos + name_len:
                raise struct.error
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            size = dims[0] if kind == KIND_CONFIG else 8 * math.prod(dims)
            if len(data) < pos + size + 4:
                raise struct.error
            payload = data[pos:pos + size]
            pos += size
            (crc,) = struct.unpack_from("<I", data, pos)
            pos += 4
        except (struct.error, UnicodeDecodeError):
            raise CheckpointError(f"truncated or malformed block {i} after last valid block {last!r}") from None
        if zlib.crc32(data[start:pos - 4]) != crc:
            raise CheckpointError(f"corrupt block {name!r} (checksum mismatch)")
        if kind == KIND_CONFIG:
            ckpt.config_text = payload.decode("utf-8")
        elif kind in (KIND_PARAM, KIND_OPTIM):
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
            (ckpt.params if kind == KIND_PARAM else ckpt.optim)[name] = arr
        else:
            raise CheckpointError(f"block {name!r} has unknown kind {kind}")
        last = name
    if pos != len(data):
        raise CheckpointError(f"trailing bytes after last block {last!r}")
    return ckpt


def build_checkpoint(params, adam_state=None, config_text: str = "", extra: dict | None = None) -> Checkpoint:
    """``params`` and ``adam_state`` are single objects or dicts keyed by network name."""
    if isinstance(params, ParamSet):
        params = {"": params}
    if isinstance(adam_state, AdamState):
        adam_state = {"": adam_state}
    ckpt = Checkpoint(config_text=config_text)
    for net, ps in params.items():
        pre = f"{net}." if net else ""
        for name, t in ps.items():
            ckpt.params[pre + name] = t.data.copy()
    for net, st in (adam_state or {}).items():
        pre = f"adam.{net}." if net else "adam."
        ckpt.optim[pre + "hyper"] = np.array([st.lr, st.beta1, st.beta2, st.eps, float(st.step)])
        for name in sorted(st.m):
            ckpt.optim[f"{pre}m.{name}"] = st.m[name].copy()
            ckpt.optim[f"{pre}v.{name}"] = st.v[name].copy()
    for name, value in (extra or {}).items():
        ckpt.optim[name] = np.atleast_1d(np.asarray(value, dtype=np.float64))
    return ckpt


def save_checkpoint(params, adam_state, config, path, extra: dict | None = None) -> str:
    from .config import TrainConfig, serialize_config
    text = serialize_config(config) if isinstance(config, TrainConfig) else (config or "")
    atomic_write(path, encode_checkpoint(build_checkpoint(params, adam_state, text, extra)))
    return os.fspath(path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    step: int
    d_gan_loss: float | None = None
    g_gan_loss: float | None = None
    ss_component: float | None = None
    g_ss_component: float | None = None
    modes_covered: int | None = None
    mode_kl: float | None = None
    wall_ms: float | None = None


METRICS_HEADER = [f.name for f in fields(MetricsRow)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def write_metrics(rows, path, append: bool = False) -> str:
    """Write rows under the fixed header. ``append`` extends an existing file."""
    rows = list(rows)
    steps = [r.step for r in rows]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ContractError("metrics rows must be strictly increasing in step")
    path = os.fspath(path)
    existing = b""
    if append and os.path.exists(path):
        prior = read_metrics(path)
        if prior and rows and rows[0].step <= prior[-1].step:
            raise ContractError("appended rows must follow the last recorded step")
        with open(path, "rb") as f:
            existing = f.read()
    lines = [] if existing else [",".join(METRICS_HEADER)]
    lines += [",".join(_fmt(getattr(r, h)) for h in METRICS_HEADER) for r in rows]
    body = "\n".join(lines) + "\n" if lines else ""
    atomic_write(path, existing + body.encode("ascii"))
    return path


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ContractError(f"unexpected metrics header {header}")
        out = []
        for rec in reader:
            vals = {}
            for h, raw in zip(header, rec):
                if raw == "":
                    vals[h] = None
                elif h in ("step", "modes_covered"):
                    vals[h] = int(raw)
                else:
                    vals[h] = float(raw)
            out.append(MetricsRow(**vals))
    return out


# ---------------------------------------------------------------------------
# IDX


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx(path, magic: int, rank: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 + 4 * rank:
        raise IDXError(f"{path}: truncated header")
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise IDXError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{rank}I", data, 4)
    start = 4 + 4 * rank
    need = math.prod(dims)
    if len(data) - start < need:
        raise IDXError(f"{path}: truncated payload ({len(data) - start} of {need} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] as ``N x rows x cols`` float64, labels as int64."""
    images = _read_idx(images_path, IDX_IMAGES, 3)
    labels = _read_idx(labels_path, IDX_LABELS, 1)
    if len(images) != len(labels):
        raise IDXError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    atomic_write(images_path, struct.pack(">IIII", IDX_IMAGES, *images.shape) + images.tobytes())
    atomic_write(labels_path, struct.pack(">II", IDX_LABELS, len(labels)) + labels.tobytes())
