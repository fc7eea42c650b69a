"""Channel re-weighting units for residual blocks.

Five variants, selected by AttentionMode:

* ``se`` — squeeze-and-excitation on the residual branch alone.
* ``doublefc`` — separate FC embeddings of the squeezed residual and
  identity vectors, concatenated (residual first) into one excitation FC.
* ``pairview2x1`` — the two squeezed vectors stacked into a 2-row map and
  scanned by a bank of 2x1 kernels; kernel outputs are averaged, normalized,
  and encoded back down to C channels.
* ``pairview1x1`` — same map scanned by 1x1 kernels; the 2xC result is
  flattened so the encoder sees both rows.
* ``folded3x3`` — the 2-row map refolded into an n x m matrix with
  alternating residual/identity rows so 3x3 kernels can scan it.

All excitation outputs are strictly inside (0, 1) and multiply the residual
branch channel-wise before the shortcut addition.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Linear, Module


class AttentionMode(str, Enum):
    NONE = "none"
    SE = "se"
    DOUBLE_FC = "doublefc"
    PAIR_2X1 = "pairview2x1"
    PAIR_1X1 = "pairview1x1"
    FOLDED_3X3 = "folded3x3"


MODE_NAMES = tuple(m.value for m in AttentionMode)


def parse_mode(name):
    if isinstance(name, AttentionMode):
        return name
    if name is None:
        return AttentionMode.NONE
    try:
        return AttentionMode(str(name).lower())
    except ValueError:
        raise ConfigError(
            f"unknown attention mode {name!r}; expected one of {', '.join(MODE_NAMES)}"
        ) from None


@dataclass
class AttentionConfig:
    mode: AttentionMode = AttentionMode.NONE
    t: int = 16                # reduction ratio of the encoder bottleneck
    fold_n: int | None = None  # folded map rows (folded3x3 only)
    fold_m: int | None = None  # folded map cols (folded3x3 only)

    def __post_init__(self):
        self.mode = parse_mode(self.mode)
        if self.t < 1:
            raise ConfigError(f"reduction ratio must be positive, got {self.t}")


def reduced_width(c, t):
    """Encoder bottleneck width C/t, floored at 1 so tiny nets stay usable."""
    return max(1, c // t)


def kernel_count(c, t):
    """Number of pair-view kernels: block width / t, rounded, floored at 1."""
    return max(1, int(round(c / t)))


def largest_divisor_leq(c, cap):
    for d in range(min(cap, c), 0, -1):
        if c % d == 0:
            return d
    return 1


def resolve_fold_shape(c, fold_n=None, fold_m=None, prefer=("m", 16)):
    """Pick (n, m) with n*m = 2C and n even (row pairs cover channels in
    blocks of m). Explicitly inconsistent (n, m) is an error; a preferred
    m (or n) that does not fit C falls back to the largest divisor of C
    not exceeding it."""
    if fold_n is not None and fold_m is not None:
        if fold_n * fold_m != 2 * c or fold_n % 2 != 0:
            raise ConfigError(
                f"fold shape ({fold_n}, {fold_m}) invalid for {c} channels: "
                f"need n*m = {2 * c} with even n"
            )
        return fold_n, fold_m
    if fold_m is not None:
        m = largest_divisor_leq(c, fold_m)
        return 2 * c // m, m
    if fold_n is not None:
        if fold_n % 2 == 0 and (2 * c) % fold_n == 0 and c % ((2 * c) // fold_n) == 0:
            return fold_n, 2 * c // fold_n
        m = largest_divisor_leq(c, max(1, 2 * c // fold_n))
        return 2 * c // m, m
    kind, val = prefer
    if kind == "n":
        return resolve_fold_shape(c, fold_n=val)
    return resolve_fold_shape(c, fold_m=val)


# ---------------------------------------------------------------------------
# pair-view map construction
# ---------------------------------------------------------------------------

def stack_pair_view(u_hat, x_hat):
    """Arrange squeezed vectors as an (N, 2, C) map, residual row first."""
    return T.stack_rows(u_hat, x_hat)


def fold_map(v, n, m):
    """(N, 2, C) -> (N, n, m) with rows alternating residual/identity.

    Row 2i holds residual channels [i*m, (i+1)*m); row 2i+1 the matching
    identity channels. Pure reshape/transpose, hence exactly invertible.
    """
    batch, two, c = v.shape
    if two != 2:
        raise ShapeError("fold", f"expected a 2-row map, got {two} rows", axis=1)
    if n * m != 2 * c or n % 2 != 0:
        raise ConfigError(
            f"fold shape ({n}, {m}) invalid for {c} channels: need n*m = {2 * c} with even n"
        )
    half = n // 2
    a = T.reshape(v, (batch, 2, half, m))
    b = T.transpose(a, (0, 2, 1, 3))
    return T.reshape(b, (batch, n, m))


def unfold_map(v, n, m):
    """Inverse of fold_map: (N, n, m) -> (N, 2, C)."""
    batch = v.shape[0]
    if v.shape[1] != n or v.shape[2] != m:
        raise ShapeError("unfold", f"map shape {v.shape[1:]} != declared ({n}, {m})")
    half = n // 2
    a = T.reshape(v, (batch, half, 2, m))
    b = T.transpose(a, (0, 2, 1, 3))
    return T.reshape(b, (batch, 2, half * m))


def reweight_map(before, s, layout):
    """Simulated re-weighting of an inner map: residual entries scale by s,
    identity entries are untouched."""
    after = np.array(before, copy=True)
    if layout == "stacked":
        after[:, 0, :] = before[:, 0, :] * s
    elif layout == "folded":
        batch, n, m = before.shape
        after[:, 0::2, :] = before[:, 0::2, :] * s.reshape(batch, n // 2, m)
    else:
        raise ConfigError(f"unknown inner-map layout {layout!r}")
    return after


# ---------------------------------------------------------------------------
# excitation units
# ---------------------------------------------------------------------------

class _Recorder:
    """Mixin state for diagnostics capture; see diagnostics.capture_trace."""

    recording = False
    last_trace = None

    def _record(self, s, layout=None, before=None):
        if not self.recording:
            return
        trace = {
            "mode": self.mode.value,
            "s": np.array(s.data, copy=True),
            "layout": layout,
            "before": None,
            "after": None,
        }
        if before is not None:
            raw = np.array(before, copy=True)
            trace["before"] = raw
            trace["after"] = reweight_map(raw, trace["s"], layout)
        self.last_trace = trace


class SqueezeExcite(Module, _Recorder):
    """Baseline: s = sigmoid(expand(relu(reduce(u_hat))))."""

    mode = AttentionMode.SE

    def __init__(self, channels, t=16, rng=None, dtype=np.float32):
        super().__init__()
        self.channels = channels
        r = reduced_width(channels, t)
        self.reduce = self.child("reduce", Linear(channels, r, bias=False, rng=rng, dtype=dtype))
        self.expand = self.child("expand", Linear(r, channels, bias=False, rng=rng, dtype=dtype))

    def excite(self, u_hat, x_hat=None):
        s = T.sigmoid(self.expand(T.relu(self.reduce(u_hat))))
        self._record(s)
        return s


class CompetitiveDoubleFC(Module, _Recorder):
    """Residual and identity squeezes get separate embeddings; the excitation
    FC sees their concatenation, residual half first."""

    mode = AttentionMode.DOUBLE_FC

    def __init__(self, channels, t=16, rng=None, dtype=np.float32):
        super().__init__()
        self.channels = channels
        r = reduced_width(channels, t)
        self.reduce_res = self.child(
            "reduce_res", Linear(channels, r, bias=False, rng=rng, dtype=dtype))
        self.reduce_id = self.child(
            "reduce_id", Linear(channels, r, bias=False, rng=rng, dtype=dtype))
        # one weight of shape (C, 2r); block-multiplied so a zeroed branch
        # contributes an exact zero
        self.expand = self.child("expand", Linear(2 * r, channels, bias=False, rng=rng, dtype=dtype))

    def excite(self, u_hat, x_hat):
        h_res = T.relu(self.reduce_res(u_hat))
        h_id = T.relu(self.reduce_id(x_hat))
        s = T.sigmoid(T.dual_linear(h_res, h_id, self.expand.weight))
        self._record(s)
        return s


class _PairViewBase(Module, _Recorder):
    """Shared scan-average-normalize-encode pipeline over an inner map."""

    def __init__(self, channels, t, kh, kw, n_kernels, encoder_in, use_bn,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.n_kernels = n_kernels
        self.use_bn = use_bn
        if n_kernels < 1:
            raise ConfigError(f"kernel count must be positive, got {n_kernels}")
        rng = rng or np.random.default_rng()
        std = np.sqrt(2.0 / (kh * kw * n_kernels))
        self.kernels = self.param(
            "kernels",
            (rng.standard_normal((kh, kw, 1, n_kernels)) * std).astype(dtype),
            decay=True,
        )
        if use_bn:
            self.norm = self.child("norm", BatchNorm2d(1, dtype=dtype))
        r = reduced_width(channels, t)
        self.encode = self.child("encode", Linear(encoder_in, r, bias=False, rng=rng, dtype=dtype))
        self.expand = self.child("expand", Linear(r, channels, bias=False, rng=rng, dtype=dtype))
        self._pad = 1 if kh == 3 else 0

    def _scan(self, vmap):
        """Convolve the map with every kernel, average, optionally BN.

        vmap: (N, rows, cols); returns (N, rows', cols').
        """
        batch, rows, cols = vmap.shape
        x4 = T.reshape(vmap, (batch, rows, cols, 1))
        out = T.conv2d(x4, self.kernels, stride=1, padding=self._pad)
        avg = T.mean_over(out, (3,), keepdims=True)
        if self.use_bn:
            avg = self.norm(avg)
        return T.reshape(avg, avg.shape[:3])


class PairView2x1(_PairViewBase):
    """2x1 kernels collapse the two rows; encoder input stays length C."""

    mode = AttentionMode.PAIR_2X1

    def __init__(self, channels, t=16, n_kernels=None, use_bn=True, rng=None,
                 dtype=np.float32):
        if n_kernels is None:
            n_kernels = kernel_count(channels, t)
        super().__init__(channels, t, 2, 1, n_kernels, channels, use_bn, rng, dtype)

    def excite(self, u_hat, x_hat):
        vmap = stack_pair_view(u_hat, x_hat)
        scanned = self._scan(vmap)           # (N, 1, C)
        v_c = T.reshape(scanned, (vmap.shape[0], self.channels))
        s = T.sigmoid(self.expand(T.relu(self.encode(v_c))))
        self._record(s, layout="stacked", before=vmap.data)
        return s


class PairView1x1(_PairViewBase):
    """1x1 kernels keep both rows; the 2xC scan is flattened to length 2C."""

    mode = AttentionMode.PAIR_1X1

    def __init__(self, channels, t=16, n_kernels=None, use_bn=True, rng=None,
                 dtype=np.float32):
        if n_kernels is None:
            n_kernels = kernel_count(channels, t)
        super().__init__(channels, t, 1, 1, n_kernels, 2 * channels, use_bn, rng, dtype)

    def excite(self, u_hat, x_hat):
        vmap = stack_pair_view(u_hat, x_hat)
        scanned = self._scan(vmap)           # (N, 2, C)
        v_c = T.reshape(scanned, (vmap.shape[0], 2 * self.channels))
        s = T.sigmoid(self.expand(T.relu(self.encode(v_c))))
        self._record(s, layout="stacked", before=vmap.data)
        return s


class FoldedPairView3x3(_PairViewBase):
    """The stacked map refolded to n x m (alternating rows) and scanned with
    3x3 kernels under one-pixel padding, so the flattened length stays 2C."""

    mode = AttentionMode.FOLDED_3X3

    def __init__(self, channels, t=16, n_kernels=None, fold_n=None, fold_m=None,
                 use_bn=True, rng=None, dtype=np.float32, prefer=("m", 16)):
        if n_kernels is None:
            n_kernels = kernel_count(channels, t)
        super().__init__(channels, t, 3, 3, n_kernels, 2 * channels, use_bn, rng, dtype)
        self.fold_n, self.fold_m = resolve_fold_shape(channels, fold_n, fold_m, prefer)

    def excite(self, u_hat, x_hat):
        vmap = stack_pair_view(u_hat, x_hat)
        folded = fold_map(vmap, self.fold_n, self.fold_m)
        scanned = self._scan(folded)         # (N, n, m)
        v_c = T.reshape(scanned, (vmap.shape[0], 2 * self.channels))
        s = T.sigmoid(self.expand(T.relu(self.encode(v_c))))
        self._record(s, layout="folded", before=folded.data)
        return s


_UNIT_TYPES = {
    AttentionMode.SE: SqueezeExcite,
    AttentionMode.DOUBLE_FC: CompetitiveDoubleFC,
    AttentionMode.PAIR_2X1: PairView2x1,
    AttentionMode.PAIR_1X1: PairView1x1,
    AttentionMode.FOLDED_3X3: FoldedPairView3x3,
}


def make_attention_unit(channels, cfg, rng=None, dtype=np.float32, prefer_fold=("m", 16)):
    """Build the unit for one residual block; None for mode 'none'."""
    mode = parse_mode(cfg.mode)
    if mode is AttentionMode.NONE:
        return None
    if mode is AttentionMode.FOLDED_3X3:
        return FoldedPairView3x3(
            channels, cfg.t, fold_n=cfg.fold_n, fold_m=cfg.fold_m,
            rng=rng, dtype=dtype, prefer=prefer_fold,
        )
    return _UNIT_TYPES[mode](channels, cfg.t, rng=rng, dtype=dtype)


def attention_param_count(channels, cfg):
    """Trainable scalars of one unit, as pure arithmetic (no allocation)."""
    mode = parse_mode(cfg.mode)
    c = channels
    r = reduced_width(c, cfg.t)
    eps = kernel_count(c, cfg.t)
    if mode is AttentionMode.NONE:
        return 0
    if mode is AttentionMode.SE:
        return c * r + r * c
    if mode is AttentionMode.DOUBLE_FC:
        return 2 * c * r + 2 * r * c
    if mode is AttentionMode.PAIR_2X1:
        return 2 * eps + 2 + c * r + r * c
    if mode is AttentionMode.PAIR_1X1:
        return eps + 2 + 2 * c * r + r * c
    if mode is AttentionMode.FOLDED_3X3:
        return 9 * eps + 2 + 2 * c * r + r * c
    raise ConfigError(f"unknown attention mode {mode!r}")


def recalibrate_and_add(u_r, x_id, unit):
    """Block output: scale the residual map channel-wise by the excitation
    of (u_r, x_id) and add the shortcut. Mode 'none' is a plain addition."""
    if u_r.shape != x_id.shape:
        raise ShapeError(
            "recalibrate_and_add",
            f"residual {u_r.shape} and shortcut {x_id.shape} must match",
        )
    if unit is None:
        return T.add(u_r, x_id)
    u_hat = T.global_avg_pool(u_r)
    x_hat = T.global_avg_pool(x_id)
    s = unit.excite(u_hat, x_hat)
    return T.add(T.channel_scale(s, u_r), x_id)
