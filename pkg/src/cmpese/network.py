"""Pre-activation residual networks (plain and wide) with channel attention.

Families:

* ``preact-resnet`` — CIFAR-style stem (3x3 conv to 16 channels) and three
  stages. Basic blocks give depth 6u+2; bottleneck blocks give 9u+2 with
  stage outputs (64, 128, 256) and internal width out/4.
* ``wrn`` — depth 6u+4, stage widths (16k, 32k, 64k).

Every residual block squeezes its branch output and its (possibly
projected) shortcut, feeds both to the configured attention unit, scales
the branch by the excitation, then adds the shortcut.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    AttentionMode,
    attention_param_count,
    make_attention_unit,
    parse_mode,
    recalibrate_and_add,
)
from .errors import ConfigError, ShapeError
from .gradcheck import gradcheck
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor


@dataclass
class BlockSpec:
    kind: str                 # "basic" | "bottleneck"
    in_channels: int
    out_channels: int
    stride: int
    attention: AttentionConfig

    @property
    def shortcut(self):
        if self.in_channels != self.out_channels or self.stride != 1:
            return "projection"
        return "identity"


@dataclass
class NetworkSpec:
    family: str                       # "preact-resnet" | "wrn"
    depth: int
    widen_factor: int = 1
    num_classes: int = 10
    block: str = "auto"               # "basic" | "bottleneck" | "auto"
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    input_size: int = 32              # informational; the net is size-agnostic


def resolve_block_kind(spec):
    """Basic vs bottleneck for a given depth.

    Depths of the form 9u+2 and 6u+2 overlap (110 and 164 satisfy both);
    published configurations pin 164+ to bottleneck and 110 to basic, so
    auto prefers bottleneck only from depth 164 up.
    """
    if spec.family == "wrn":
        return "basic"
    if spec.block in ("basic", "bottleneck"):
        return spec.block
    if spec.block != "auto":
        raise ConfigError(f"unknown block kind {spec.block!r}")
    d = spec.depth - 2
    if d % 9 == 0 and spec.depth >= 164:
        return "bottleneck"
    if d % 6 == 0:
        return "basic"
    if d % 9 == 0:
        return "bottleneck"
    raise ConfigError(
        f"preact-resnet depth must be 6u+2 (basic) or 9u+2 (bottleneck); got {spec.depth}"
    )


def stage_plan(spec):
    """Expand a NetworkSpec into (stem_width, [BlockSpec...], final_width)."""
    att = spec.attention
    if spec.family == "wrn":
        if (spec.depth - 4) % 6 != 0 or spec.depth < 10:
            raise ConfigError(f"wrn depth must be 6u+4 with u >= 1; got {spec.depth}")
        u = (spec.depth - 4) // 6
        k = spec.widen_factor
        widths = (16 * k, 32 * k, 64 * k)
        kind = "basic"
    elif spec.family == "preact-resnet":
        kind = resolve_block_kind(spec)
        per = 6 if kind == "basic" else 9
        if (spec.depth - 2) % per != 0 or spec.depth <= 2:
            raise ConfigError(
                f"preact-resnet {kind} depth must be {per}u+2; got {spec.depth}"
            )
        u = (spec.depth - 2) // per
        widths = (16, 32, 64) if kind == "basic" else (64, 128, 256)
    else:
        raise ConfigError(f"unknown family {spec.family!r}; expected preact-resnet or wrn")

    stem = 16
    blocks = []
    cin = stem
    for stage, width in enumerate(widths):
        for b in range(u):
            stride = 2 if (stage > 0 and b == 0) else 1
            blocks.append(BlockSpec(kind, cin, width, stride, att))
            cin = width
    return stem, blocks, widths[-1]


class ResidualBlock(Module):
    """Pre-activation block: shared BN+ReLU feeds both the branch and the
    projection shortcut (when one is needed)."""

    def __init__(self, bspec, rng=None, dtype=np.float32, prefer_fold=("m", 16)):
        super().__init__()
        self.spec = bspec
        cin, cout, stride = bspec.in_channels, bspec.out_channels, bspec.stride
        self.bn1 = self.child("bn1", BatchNorm2d(cin, dtype=dtype))
        if bspec.kind == "basic":
            self.conv1 = self.child(
                "conv1", Conv2d(cin, cout, 3, stride=stride, padding=1, rng=rng, dtype=dtype))
            self.bn2 = self.child("bn2", BatchNorm2d(cout, dtype=dtype))
            self.conv2 = self.child(
                "conv2", Conv2d(cout, cout, 3, stride=1, padding=1, rng=rng, dtype=dtype))
        elif bspec.kind == "bottleneck":
            if cout % 4 != 0:
                raise ConfigError(f"bottleneck output width must be divisible by 4, got {cout}")
            w = cout // 4
            self.conv1 = self.child("conv1", Conv2d(cin, w, 1, rng=rng, dtype=dtype))
            self.bn2 = self.child("bn2", BatchNorm2d(w, dtype=dtype))
            self.conv2 = self.child(
                "conv2", Conv2d(w, w, 3, stride=stride, padding=1, rng=rng, dtype=dtype))
            self.bn3 = self.child("bn3", BatchNorm2d(w, dtype=dtype))
            self.conv3 = self.child("conv3", Conv2d(w, cout, 1, rng=rng, dtype=dtype))
        else:
            raise ConfigError(f"unknown block kind {bspec.kind!r}")
        self.proj = None
        if bspec.shortcut == "projection":
            self.proj = self.child(
                "proj", Conv2d(cin, cout, 1, stride=stride, rng=rng, dtype=dtype))
        self.attn = make_attention_unit(
            cout, bspec.attention, rng=rng, dtype=dtype, prefer_fold=prefer_fold)
        if self.attn is not None:
            self.child("attn", self.attn)

    def branch_and_shortcut(self, x):
        """Returns (residual branch output, shortcut tensor). The shortcut
        is the raw input for identity blocks, else the projected
        pre-activation — the tensor whose squeeze competes with the branch."""
        t = T.relu(self.bn1(x))
        x_id = x if self.proj is None else self.proj(t)
        h = self.conv1(t)
        h = self.conv2(T.relu(self.bn2(h)))
        if self.spec.kind == "bottleneck":
            h = self.conv3(T.relu(self.bn3(h)))
        return h, x_id

    def forward(self, x):
        u_r, x_id = self.branch_and_shortcut(x)
        return recalibrate_and_add(u_r, x_id, self.attn)

    __call__ = forward


class Network(Module):
    def __init__(self, spec, rng=None, dtype=np.float32):
        super().__init__()
        self.spec = spec
        rng = rng or np.random.default_rng()
        stem, plan, final_width = stage_plan(spec)
        prefer = ("n", 20) if spec.family == "wrn" else ("m", 16)
        self.stem = self.child("stem", Conv2d(3, stem, 3, padding=1, rng=rng, dtype=dtype))
        self.blocks = []
        for i, bspec in enumerate(plan):
            blk = ResidualBlock(bspec, rng=rng, dtype=dtype, prefer_fold=prefer)
            self.blocks.append(self.child(f"block{i}", blk))
        self.bn_final = self.child("bn_final", BatchNorm2d(final_width, dtype=dtype))
        self.fc = self.child(
            "fc", Linear(final_width, spec.num_classes, bias=True, rng=rng, dtype=dtype))

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != 3:
            raise ShapeError(
                "forward", f"expected (N, H, W, 3) input, got {tuple(x.shape)}")
        h = self.stem(x)
        for blk in self.blocks:
            h = blk(h)
        h = T.relu(self.bn_final(h))
        return self.fc(T.global_avg_pool(h))

    __call__ = forward

    def attention_units(self):
        return [blk.attn for blk in self.blocks]


def build(spec, rng=None, dtype=np.float32):
    return Network(spec, rng=rng, dtype=dtype)


def param_count(spec):
    """Exact trainable-scalar count from the stage plan alone (BN affine
    included, running statistics excluded). Fold shape never changes the
    count — the encoder input stays 2C. Cross-checked in tests against
    built models."""
    stem, plan, final_width = stage_plan(spec)
    total = 9 * 3 * stem
    for b in plan:
        cin, cout = b.in_channels, b.out_channels
        if b.kind == "basic":
            total += 2 * cin + 9 * cin * cout      # bn1, conv1
            total += 2 * cout + 9 * cout * cout    # bn2, conv2
        else:
            w = cout // 4
            total += 2 * cin + cin * w             # bn1, conv1 1x1
            total += 2 * w + 9 * w * w             # bn2, conv2 3x3
            total += 2 * w + w * cout              # bn3, conv3 1x1
        if b.shortcut == "projection":
            total += cin * cout
        total += attention_param_count(cout, b.attention)
    total += 2 * final_width
    total += final_width * spec.num_classes + spec.num_classes
    return total


# Reported sizes (millions of parameters) for the published configurations,
# used by the CLI to annotate param-count output. Keyed by
# (family, depth, widen_factor, mode).
REFERENCE_MPARAMS = {
    ("preact-resnet", 164, 1, "none"): 1.70,
    ("preact-resnet", 164, 1, "se"): 1.95,
    ("preact-resnet", 164, 1, "doublefc"): 2.12,
    ("preact-resnet", 164, 1, "pairview2x1"): 1.95,
    ("preact-resnet", 164, 1, "pairview1x1"): 2.04,
    ("preact-resnet", 164, 1, "folded3x3"): 1.99,
    ("wrn", 28, 10, "none"): 36.5,
    ("wrn", 28, 10, "se"): 36.8,
    ("wrn", 28, 10, "doublefc"): 37.04,
    ("wrn", 28, 10, "pairview1x1"): 36.92,
    ("wrn", 28, 10, "folded3x3"): 36.90,
    ("wrn", 16, 8, "none"): 11.1,
    ("preact-resnet", 110, 1, "pairview1x1"): 1.76,
}


def reference_mparams(spec):
    key = (spec.family, spec.depth, spec.widen_factor, parse_mode(spec.attention.mode).value)
    return REFERENCE_MPARAMS.get(key)


# ---------------------------------------------------------------------------
# NetworkSpec serialization
# ---------------------------------------------------------------------------

_SPEC_KEYS = {"family", "depth", "widen_factor", "num_classes", "block", "attention"}
_ATT_KEYS = {"mode", "t", "fold_n", "fold_m"}


def spec_to_dict(spec):
    att = {"mode": parse_mode(spec.attention.mode).value, "t": spec.attention.t}
    if spec.attention.fold_n is not None:
        att["fold_n"] = spec.attention.fold_n
    if spec.attention.fold_m is not None:
        att["fold_m"] = spec.attention.fold_m
    d = {
        "family": spec.family,
        "depth": spec.depth,
        "widen_factor": spec.widen_factor,
        "num_classes": spec.num_classes,
        "attention": att,
    }
    if spec.block != "auto":
        d["block"] = spec.block
    return d


def spec_from_dict(d):
    unknown = sorted(set(d) - _SPEC_KEYS)
    if unknown:
        raise ConfigError(f"unknown network keys: {', '.join(unknown)}")
    att_raw = d.get("attention", {})
    unknown = sorted(set(att_raw) - _ATT_KEYS)
    if unknown:
        raise ConfigError(f"unknown attention keys: {', '.join(unknown)}")
    if "family" not in d or "depth" not in d:
        raise ConfigError("network description requires family and depth")
    att = AttentionConfig(
        mode=parse_mode(att_raw.get("mode", "none")),
        t=int(att_raw.get("t", 16)),
        fold_n=att_raw.get("fold_n"),
        fold_m=att_raw.get("fold_m"),
    )
    return NetworkSpec(
        family=str(d["family"]),
        depth=int(d["depth"]),
        widen_factor=int(d.get("widen_factor", 1)),
        num_classes=int(d.get("num_classes", 10)),
        block=str(d.get("block", "auto")),
        attention=att,
    )


# ---------------------------------------------------------------------------
# block-level gradient check (also backs the CLI `gradcheck` subcommand)
# ---------------------------------------------------------------------------

def block_gradient_check(mode, channels=8, t=4, spatial=4, batch=2, seed=0,
                         rtol=1e-4, kind="basic", raise_on_fail=True):
    """Finite-difference check through one full residual block in float64.

    The scalar target is a fixed random weighting of the block output, so
    every output element contributes to every gradient.
    """
    mode = parse_mode(mode)
    rng = np.random.default_rng(seed)
    att = AttentionConfig(mode=mode, t=t)
    bspec = BlockSpec(kind, channels, channels, 1, att)
    blk = ResidualBlock(bspec, rng=rng, dtype=np.float64)
    blk.train()
    x = Tensor(rng.standard_normal((batch, spatial, spatial, channels)),
               requires_grad=True, name="input")
    probe = rng.standard_normal((batch, spatial, spatial, channels))

    params = {"input": x}
    params.update(dict(blk.named_parameters()))

    def fn(_):
        out = blk.forward(x)
        return T.sum_over(T.mul(out, Tensor(probe)), tuple(range(out.ndim)))

    return gradcheck(fn, params, rtol=rtol, raise_on_fail=raise_on_fail)
