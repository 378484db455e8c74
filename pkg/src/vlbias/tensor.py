"""Dense numerical kernel: seeded init, normalization, softmax and hooked attention.

Arrays are plain ``numpy.float64`` ndarrays. Every function accepts optional
leading batch dimensions; the last two axes are (positions, features).

Patching convention used by the whole package: a head's output is taken
after attention-weighted value aggregation and any planted injection, and
before concatenation and the output projection.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

_SQRT3 = math.sqrt(3.0)
_INV_2_53 = 1.0 / float(1 << 53)


def seeded_init(seed: int, rows: int, cols: int, scale: float) -> np.ndarray:
    """Deterministic ``rows x cols`` matrix with entries uniform on [-sqrt(3), sqrt(3)) * scale.

    The generator is PCG64 seeded with ``seed``; each raw 64-bit draw is
    turned into ``u = (raw >> 11) * 2**-53`` and mapped to
    ``scale * sqrt(3) * (2u - 1)`` (zero mean, variance ``scale**2``).
    Draws fill the matrix in row-major order. Only exactly rounded IEEE
    operations are involved, so output is bit-identical across platforms.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"seeded_init needs positive dimensions, got {rows}x{cols}")
    if not scale > 0:
        raise ValueError(f"seeded_init needs scale > 0, got {scale}")
    bitgen = np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    raw = bitgen.random_raw(rows * cols)
    u = (raw >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return ((2.0 * u - 1.0) * (_SQRT3 * scale)).reshape(rows, cols)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm gain/bias must have length {x.shape[-1]}, got {gain.shape} and {bias.shape}"
        )
    if not eps > 0:
        raise ValueError("layer_norm eps must be positive")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax_rows requires finite input")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class HookMode(str, enum.Enum):
    RECORD = "record"
    SUBSTITUTE = "substitute"
    PASSTHROUGH = "passthrough"


@dataclass
class HeadHook:
    mode: HookMode = HookMode.PASSTHROUGH
    buffer: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.mode = HookMode(self.mode)
        if self.mode is HookMode.SUBSTITUTE and self.buffer is None:
            raise ValueError("a Substitute hook needs a buffer")


@dataclass(frozen=True)
class AttentionWeights:
    """Projection matrices of one multi-head attention sublayer.

    ``w_q``, ``w_k``, ``w_v`` map d -> d (heads are contiguous column blocks);
    ``w_o`` maps the concatenated head outputs back to d.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    n_heads: int

    def __post_init__(self) -> None:
        d = self.w_o.shape[1]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape[0] != d or m.shape[1] != d:
                raise ValueError(f"{name} must be {d}x{d}, got {m.shape}")
        if self.n_heads < 1 or d % self.n_heads:
            raise ValueError(f"model dim {d} not divisible by {self.n_heads} heads")

    @property
    def d_model(self) -> int:
        return self.w_o.shape[1]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, n_heads, d // n_heads), -2, -3)


def mha_forward(
    x_q: np.ndarray,
    x_kv: np.ndarray,
    weights: AttentionWeights,
    hooks: Optional[Mapping[int, HeadHook]] = None,
    inject: Optional[Mapping[int, np.ndarray]] = None,
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Multi-head attention with per-head injection and hooks.

    Queries come from ``x_q`` and keys/values from ``x_kv``. ``inject[h]`` is
    added to head ``h``'s output (broadcast over positions) before the hook
    for that head acts. Returns the projected output, *without* residual
    addition, and a dict of recorded head outputs keyed by head index.
    """
    hooks = hooks or {}
    inject = inject or {}
    H, dh = weights.n_heads, weights.d_head
    for h in list(hooks) + list(inject):
        if not 0 <= h < H:
            raise ValueError(f"head index {h} out of range for {H} heads")

    q = _split_heads(x_q @ weights.w_q, H)
    k = _split_heads(x_kv @ weights.w_k, H)
    v = _split_heads(x_kv @ weights.w_v, H)
    attn = softmax_rows(q @ np.swapaxes(k, -1, -2) / math.sqrt(dh))
    heads = attn @ v  # (..., H, n_q, dh)

    recorded: dict[int, np.ndarray] = {}
    if inject or hooks:
        heads = heads.copy()
    for h, vec in inject.items():
        heads[..., h, :, :] += vec
    for h, hook in hooks.items():
        if hook.mode is HookMode.RECORD:
            recorded[h] = heads[..., h, :, :].copy()
        elif hook.mode is HookMode.SUBSTITUTE:
            buf = np.asarray(hook.buffer, dtype=np.float64)
            if buf.shape != heads[..., h, :, :].shape:
                raise ValueError(
                    f"substitute buffer for head {h} has shape {buf.shape}, "
                    f"expected {heads[..., h, :, :].shape}"
                )
            heads[..., h, :, :] = buf

    concat = np.swapaxes(heads, -2, -3)
    concat = concat.reshape(*concat.shape[:-2], H * dh)
    return concat @ weights.w_o, recorded
