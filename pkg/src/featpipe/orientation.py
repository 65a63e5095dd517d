"""Orientation estimator: a small convnet regressing an angle.

The network maps an inner crop to a 2-vector (c, s); the angle is
atan2(s, c) in (-pi, pi].  The final layer starts near zero with bias
(1, 0) so an untrained network predicts angles close to zero instead of
arbitrary rotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grad import Op, ParamStore, ShapeError, Tensor, conv2d, l2_pool, tanh_act
from .geometry import PatchGeometry, crop, rot_crop

__all__ = [
    "OrientationArch",
    "OrientationParams",
    "init_orientation",
    "orientation_graph",
    "predict_orientation",
    "g_transform",
]

DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class OrientationArch:
    conv_channels: tuple[int, int, int] = (10, 20, 50)
    conv_sizes: tuple[int, int, int] = (5, 5, 3)
    pool: int = 2
    fc_width: int = 100
    input_size: int = 64

    def fc_spatial(self) -> int:
        d = self.input_size
        for k in self.conv_sizes:
            d = d - k + 1
            d = (d - self.pool) // self.pool + 1
        return d

    @staticmethod
    def tiny() -> "OrientationArch":
        return OrientationArch(conv_channels=(6, 12, 24), conv_sizes=(5, 5, 3), fc_width=32)


@dataclass
class OrientationParams:
    arch: OrientationArch
    store: ParamStore = field(repr=False)


def init_orientation(
    rng: np.random.Generator,
    arch: OrientationArch = OrientationArch(),
    store: ParamStore | None = None,
) -> OrientationParams:
    if store is None:
        store = ParamStore()
    in_c = 1
    for i, (out_c, k) in enumerate(zip(arch.conv_channels, arch.conv_sizes), start=1):
        std = 1.0 / np.sqrt(in_c * k * k)
        store.add(f"orientation/conv{i}/w", rng.normal(size=(out_c, in_c, k, k)) * std)
        store.add(f"orientation/conv{i}/b", np.zeros(out_c))
        in_c = out_c
    fs = arch.fc_spatial()
    std = 1.0 / np.sqrt(in_c * fs * fs)
    store.add("orientation/fc1/w", rng.normal(size=(arch.fc_width, in_c, fs, fs)) * std)
    store.add("orientation/fc1/b", np.zeros(arch.fc_width))
    # near-zero head with bias (1, 0): the initial angle is atan2(0, 1) = 0
    store.add("orientation/out/w", rng.normal(size=(2, arch.fc_width, 1, 1)) * 1e-3)
    store.add("orientation/out/b", np.array([1.0, 0.0]))
    store.add(
        "orientation/meta",
        np.array(
            list(arch.conv_channels)
            + list(arch.conv_sizes)
            + [arch.pool, arch.fc_width, arch.input_size],
            dtype=np.float64,
        ),
        trainable=False,
    )
    return OrientationParams(arch=arch, store=store)


def orientation_from_store(store: ParamStore) -> OrientationParams:
    if "orientation/meta" not in store:
        raise ShapeError("store holds no orientation namespace")
    m = [int(v) for v in store["orientation/meta"].data]
    arch = OrientationArch(
        conv_channels=tuple(m[0:3]),
        conv_sizes=tuple(m[3:6]),
        pool=m[6],
        fc_width=m[7],
        input_size=m[8],
    )
    return OrientationParams(arch=arch, store=store)


class Atan2Pair(Op):
    """atan2 over (B, 2) rows of (c, s); degenerate rows give 0."""

    @staticmethod
    def forward(node, cs):
        c = cs[:, 0]
        s = cs[:, 1]
        degenerate = (np.abs(c) < DEGENERATE_EPS) & (np.abs(s) < DEGENERATE_EPS)
        theta = np.arctan2(s, c)
        theta = np.where(theta <= -np.pi, np.pi, theta)
        theta = np.where(degenerate, 0.0, theta)
        node.saved = (c, s, degenerate)
        return theta

    @staticmethod
    def backward(node, grad):
        c, s, degenerate = node.saved
        r2 = c * c + s * s
        safe = np.where(degenerate, 1.0, r2)
        out = np.zeros(node.parents[0].data.shape)
        out[:, 0] = np.where(degenerate, 0.0, grad * (-s) / safe)
        out[:, 1] = np.where(degenerate, 0.0, grad * c / safe)
        return (out,)


def _check_input(p: Tensor, size: int, who: str) -> Tensor:
    if p.ndim == 2:
        p = p.reshape((1, 1) + p.shape)
    elif p.ndim == 3:
        p = p.reshape((1,) + p.shape)
    if p.ndim != 4 or p.shape[1] != 1 or p.shape[2] != size or p.shape[3] != size:
        raise ShapeError(f"{who} expects (B, 1, {size}, {size}) input, got {p.shape}")
    return p


def orientation_scores(patch, phi: OrientationParams, frozen: bool = False) -> Tensor:
    """Raw head output (B, 2) of (c, s) rows before the angle op."""
    arch = phi.arch
    p = patch if isinstance(patch, Tensor) else Tensor(patch)
    p = _check_input(p, arch.input_size, "orientation")
    store = phi.store
    x = p
    for i in range(1, 4):
        w, b = store[f"orientation/conv{i}/w"], store[f"orientation/conv{i}/b"]
        if frozen:
            w, b = w.detach(), b.detach()
        x = conv2d(x, w, b)
        x = tanh_act(x)
        x = l2_pool(x, arch.pool)
    w, b = store["orientation/fc1/w"], store["orientation/fc1/b"]
    if frozen:
        w, b = w.detach(), b.detach()
    x = tanh_act(conv2d(x, w, b))
    w, b = store["orientation/out/w"], store["orientation/out/b"]
    if frozen:
        w, b = w.detach(), b.detach()
    x = conv2d(x, w, b)
    return x.reshape((x.shape[0], 2))


def orientation_graph(patch, phi: OrientationParams, frozen: bool = False) -> Tensor:
    """Predicted angles (B,) with gradients through the whole net."""
    return Atan2Pair.apply(orientation_scores(patch, phi, frozen=frozen))


def predict_orientation(patch, phi: OrientationParams) -> tuple[float, bool]:
    """Angle of a single patch plus a flag for the degenerate (0, 0) case."""
    p = patch.detach() if isinstance(patch, Tensor) else Tensor(patch)
    p = _check_input(p, phi.arch.input_size, "orientation")
    cs = orientation_scores(p, phi, frozen=True).data
    theta = Atan2Pair.apply(Tensor(cs))
    degenerate = bool(
        (abs(cs[0, 0]) < DEGENERATE_EPS) and (abs(cs[0, 1]) < DEGENERATE_EPS)
    )
    return float(theta.data[0]), degenerate


def g_transform(
    patch,
    xy,
    phi: OrientationParams,
    geom: PatchGeometry = PatchGeometry(),
    frozen: bool = False,
) -> Tensor:
    """Rotation-normalized inner crop: Rot(P, x, g(Crop(P, x))).

    The predicted angle feeds the same rot_crop used everywhere else,
    so orientation conventions cannot diverge between training and
    inference.
    """
    inner = geom.inner
    p_small = crop(patch, xy, inner)
    theta = orientation_graph(p_small, phi, frozen=frozen)
    out = rot_crop(patch, xy, theta, inner)
    return out
