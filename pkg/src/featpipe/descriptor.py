"""Patch descriptor: three conv blocks ending in a fixed-length vector.

Each block is conv -> tanh -> l2_pool; the first two blocks finish with
a subtractive normalization.  The final block pools down to a single
spatial cell, where subtracting a local mean would erase the signal, so
normalization is skipped there.  Entries land in [0, 1] because they
are root-mean-squares of tanh outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .grad import (
    ParamStore,
    ShapeError,
    Tensor,
    conv2d,
    l2_pool,
    subtractive_norm,
    tanh_act,
    vec_norm,
)

__all__ = [
    "DescriptorArch",
    "DescriptorParams",
    "init_descriptor",
    "describe",
    "descriptor_distance",
    "write_descriptors",
    "read_descriptors",
    "DESCRIPTOR_MAGIC",
]

DESCRIPTOR_MAGIC = b"LIFTDESC"


@dataclass(frozen=True)
class DescriptorArch:
    # (out_channels, kernel, pool) per block
    blocks: tuple[tuple[int, int, int], ...] = ((32, 7, 2), (64, 6, 3), (128, 5, 4))
    norm_radius: int = 2
    input_size: int = 64

    @property
    def dim(self) -> int:
        return self.blocks[-1][0]

    def spatial_trace(self) -> list[int]:
        sizes = [self.input_size]
        d = self.input_size
        for _, k, pool in self.blocks:
            d = d - k + 1
            sizes.append(d)
            d = (d - pool) // pool + 1
            sizes.append(d)
        return sizes

    @staticmethod
    def tiny() -> "DescriptorArch":
        return DescriptorArch(blocks=((8, 7, 2), (16, 6, 3), (32, 5, 4)))


@dataclass
class DescriptorParams:
    arch: DescriptorArch
    store: ParamStore = field(repr=False)


def init_descriptor(
    rng: np.random.Generator,
    arch: DescriptorArch = DescriptorArch(),
    store: ParamStore | None = None,
) -> DescriptorParams:
    if store is None:
        store = ParamStore()
    in_c = 1
    for i, (out_c, k, _) in enumerate(arch.blocks, start=1):
        std = 1.0 / np.sqrt(in_c * k * k)
        store.add(f"descriptor/conv{i}/w", rng.normal(size=(out_c, in_c, k, k)) * std)
        store.add(f"descriptor/conv{i}/b", np.zeros(out_c))
        in_c = out_c
    meta = []
    for blk in arch.blocks:
        meta.extend(blk)
    meta.extend([arch.norm_radius, arch.input_size])
    store.add("descriptor/meta", np.array(meta, dtype=np.float64), trainable=False)
    return DescriptorParams(arch=arch, store=store)


def descriptor_from_store(store: ParamStore) -> DescriptorParams:
    if "descriptor/meta" not in store:
        raise ShapeError("store holds no descriptor namespace")
    m = [int(v) for v in store["descriptor/meta"].data]
    blocks = tuple((m[3 * i], m[3 * i + 1], m[3 * i + 2]) for i in range(3))
    arch = DescriptorArch(blocks=blocks, norm_radius=m[9], input_size=m[10])
    return DescriptorParams(arch=arch, store=store)


def describe(patch, rho: DescriptorParams, frozen: bool = False) -> Tensor:
    """Descriptors (B, D) for rotation-normalized crops (B, 1, s, s)."""
    arch = rho.arch
    p = patch if isinstance(patch, Tensor) else Tensor(patch)
    if p.ndim == 2:
        p = p.reshape((1, 1) + p.shape)
    elif p.ndim == 3:
        p = p.reshape((1,) + p.shape)
    s = arch.input_size
    if p.ndim != 4 or p.shape[1] != 1 or p.shape[2] != s or p.shape[3] != s:
        raise ShapeError(f"descriptor expects (B, 1, {s}, {s}) input, got {p.shape}")
    store = rho.store
    x = p
    last = len(arch.blocks)
    for i, (_, _, pool) in enumerate(arch.blocks, start=1):
        w, b = store[f"descriptor/conv{i}/w"], store[f"descriptor/conv{i}/b"]
        if frozen:
            w, b = w.detach(), b.detach()
        x = l2_pool(tanh_act(conv2d(x, w, b)), pool)
        if i < last:
            x = subtractive_norm(x, radius=arch.norm_radius)
    if x.shape[2] != 1 or x.shape[3] != 1:
        raise ShapeError(
            f"descriptor head expected 1x1 maps, got {x.shape}; "
            "input size and architecture disagree"
        )
    return x.reshape((x.shape[0], arch.dim))


def descriptor_distance(a, b):
    """Euclidean distance between two descriptors.

    Accepts Tensors (stays on the tape) or plain arrays (returns float).
    """
    ta = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
    tb = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64))
    if ta.shape != tb.shape:
        raise ShapeError(f"descriptor length mismatch: {ta.shape} vs {tb.shape}")
    d = vec_norm(ta - tb)
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return d
    return float(d.data)


def write_descriptors(path, descriptors: np.ndarray) -> None:
    """Binary descriptor file: magic, u64 count, u32 dim, f32 LE rows."""
    arr = np.asarray(descriptors, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected (N, D) descriptors, got shape {arr.shape}")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<QI", n, d))
        fh.write(arr.astype("<f4").tobytes())


def read_descriptors(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != DESCRIPTOR_MAGIC:
        raise ShapeError(f"{path}: not a descriptor file (bad magic)")
    if len(blob) < 8 + 12:
        raise ShapeError(f"{path}: truncated descriptor header")
    n, d = struct.unpack_from("<QI", blob, 8)
    need = 8 + 12 + 4 * n * d
    if len(blob) != need:
        raise ShapeError(f"{path}: expected {need} bytes for {n}x{d}, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=20, count=n * d)
    return data.astype(np.float64).reshape(n, d)
