"""Gated dual-branch low-rank adaptation at toy scale.

A frozen base matrix is augmented with two vector-scaled low-rank branches.
An input-derived gate selects the branch: single 3-channel images drive the
depth branch, concatenated 6-channel pairs drive the motion (pose/intrinsic)
branch.  Training runs in two phases: during warm-up only the low-rank
matrices A, B train (the scaling vectors are all-ones, so the active branch
is plain low-rank adaptation); afterwards A, B freeze and the vectors U, V
take over.

The toy backbone wires these layers into patch-token blocks with optional
convolutional neck blocks and minimal depth / pose / intrinsic heads, enough
to exercise the full algebra, gating, scheduling, and gradients end to end.

Parameters live in a flat name -> float64 ndarray dict.  Forward passes take
an optional ``bound`` mapping that overrides entries with tape variables, so
one code path serves plain evaluation and differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as dn

LN_EPS = 1e-5
HEAD_OUTPUT_SCALE = 0.01
# bias making softplus(0 + bias) = 0.5, so zero features give half-size focals
SOFTPLUS_HALF_BIAS = math.log(math.expm1(0.5))


class Phase(Enum):
    WARM_UP = "warm_up"
    VECTOR_TUNE = "vector_tune"


@dataclass
class TrainSchedule:
    """Phase switch counter: warm-up while step < warmup_steps."""

    warmup_steps: int = 5000
    step: int = 0

    @property
    def phase(self) -> Phase:
        return Phase.WARM_UP if self.step < self.warmup_steps else Phase.VECTOR_TUNE

    def advance(self) -> None:
        self.step += 1


@dataclass(frozen=True)
class GateState:
    """Branch selector derived from the input channel count."""

    depth_active: bool

    @property
    def g_depth(self) -> float:
        return 1.0 if self.depth_active else 0.0


def gate_from_input(channels: int) -> GateState:
    """3-channel input -> depth branch; 6-channel -> pose/intrinsic branch."""
    if channels == 3:
        return GateState(depth_active=True)
    if channels == 6:
        return GateState(depth_active=False)
    raise ValueError(f"gate is defined for 3- or 6-channel inputs, got {channels}")


BRANCHES = ("d", "m")
_LORA_MATRIX_SUFFIXES = tuple(f"{p}_{b}" for b in BRANCHES for p in ("A", "B"))
_LORA_VECTOR_SUFFIXES = tuple(f"{p}_{b}" for b in BRANCHES for p in ("U", "V"))


class GatedLoraLayer:
    """Frozen (d x k) base matrix plus two gated vector-scaled rank-r branches."""

    def __init__(self, d: int, k: int, rank: int, rng: np.random.Generator,
                 base: np.ndarray | None = None) -> None:
        if rank > min(d, k):
            raise ValueError(f"rank {rank} exceeds min(d, k) = {min(d, k)}")
        self.d, self.k, self.rank = d, k, rank
        if base is None:
            base = rng.normal(scale=1.0 / math.sqrt(k), size=(d, k))
        self.params: dict[str, np.ndarray] = {"w0": np.asarray(base, dtype=np.float64)}
        for b in BRANCHES:
            self.params[f"A_{b}"] = rng.normal(scale=0.02, size=(rank, k))
            self.params[f"B_{b}"] = np.zeros((d, rank))
            self.params[f"U_{b}"] = np.ones(rank)
            self.params[f"V_{b}"] = np.ones(d)

    def _branch(self, x, p, which: str):
        a = dn.matmul(p[f"A_{which}"], x)
        a = dn.mul(dn.reshape(p[f"U_{which}"], (self.rank, 1)), a)
        out = dn.matmul(p[f"B_{which}"], a)
        return dn.mul(dn.reshape(p[f"V_{which}"], (self.d, 1)), out)

    def lora_forward(self, x, bound: dict | None = None, branch: str = "d"):
        """Plain low-rank update of the active branch: W0 x + B A x."""
        p = _merged(self.params, bound)
        x = _as_columns(x, self.k)
        base = dn.matmul(p["w0"], x)
        return dn.add(base, dn.matmul(p[f"B_{branch}"], dn.matmul(p[f"A_{branch}"], x)))

    def gated_forward(self, gate: GateState, x, bound: dict | None = None):
        """Gated forward: W0 x + g * V_d ⊙ B_d (U_d ⊙ A_d x) + (1-g) * (m branch)."""
        p = _merged(self.params, bound)
        x = _as_columns(x, self.k)
        out = dn.matmul(p["w0"], x)
        out = dn.add(out, dn.mul(gate.g_depth, self._branch(x, p, "d")))
        return dn.add(out, dn.mul(1.0 - gate.g_depth, self._branch(x, p, "m")))

    def trainable_suffixes(self, phase: Phase) -> tuple[str, ...]:
        return _LORA_MATRIX_SUFFIXES if phase == Phase.WARM_UP else _LORA_VECTOR_SUFFIXES

    def trainable_parameter_count(self, phase: Phase) -> int:
        if phase == Phase.WARM_UP:
            return 2 * self.rank * (self.d + self.k)
        return 2 * (self.rank + self.d)


def _as_columns(x, k: int):
    vx = dn.value(x)
    if vx.ndim == 1:
        if vx.shape[0] != k:
            raise ValueError(f"input length {vx.shape[0]} does not match layer width {k}")
        return dn.reshape(x, (k, 1))
    if vx.ndim != 2 or vx.shape[0] != k:
        raise ValueError(f"input shape {vx.shape} does not match layer width {k}")
    return x


def _merged(params: dict, bound: dict | None) -> dict:
    if not bound:
        return params
    merged = dict(params)
    merged.update(bound)
    return merged


# ---------------------------------------------------------------------------
# convolutional neck


class ConvNeck:
    """Residual stack of three 3x3 convolutions, each preceded by LayerNorm."""

    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        self.channels = channels
        self.params: dict[str, np.ndarray] = {}
        for i in range(3):
            self.params[f"conv{i}"] = rng.normal(scale=0.02, size=(3, 3, channels, channels))
            self.params[f"ln{i}_gamma"] = np.ones(channels)
            self.params[f"ln{i}_beta"] = np.zeros(channels)

    def forward(self, tokens, h: int, w: int, bound: dict | None = None):
        """tokens are (C, h*w) columns in row-major grid order; shape-preserving."""
        c = self.channels
        n = h * w
        if dn.value(tokens).shape != (c, n):
            raise ValueError(
                f"conv neck expects a {c}x{n} token matrix for a {h}x{w} grid, "
                f"got {dn.value(tokens).shape}")
        p = _merged(self.params, bound)
        grid = dn.transpose(tokens)  # (N, C), rows in row-major grid order
        out = grid
        for i in range(3):
            out = _layer_norm(out, p[f"ln{i}_gamma"], p[f"ln{i}_beta"])
            out = _conv3x3(out, p[f"conv{i}"], h, w, c)
        return dn.transpose(dn.add(grid, out))


def _layer_norm(x, gamma, beta):
    """Normalize each row (token) over channels."""
    mu = dn.mean(x, axis=1, keepdims=True)
    xc = dn.sub(x, mu)
    var = dn.mean(dn.mul(xc, xc), axis=1, keepdims=True)
    xn = dn.div(xc, dn.sqrt(dn.add(var, LN_EPS)))
    return dn.add(dn.mul(xn, gamma), beta)


def _conv_indices(h: int, w: int, c: int) -> np.ndarray:
    """(h*w, 9*c) gather map into the zero-extended flat grid (sentinel last)."""
    sentinel = h * w * c
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cols = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            yy = ys + dy
            xx = xs + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            base = np.where(inside, (yy * w + xx) * c, sentinel)
            for ci in range(c):
                cols.append(np.where(inside, base + ci, sentinel).reshape(-1))
    return np.stack(cols, axis=1)


def _conv3x3(grid_nc, kernel, h: int, w: int, c: int):
    """Zero-padded 3x3 convolution of (h*w, C) rows; kernel is (3, 3, C, C)."""
    flat = dn.reshape(grid_nc, (-1,))
    ext = dn.concat([flat, np.zeros(1)])
    cols = dn.gather(ext, _conv_indices(h, w, c))          # (h*w, 9C)
    kmat = dn.reshape(kernel, (9 * c, c))
    return dn.matmul(cols, kmat)


# ---------------------------------------------------------------------------
# toy backbone with decoder heads


class ToyBackbone:
    """Patch tokens -> gated-LoRA MLP blocks (+ conv necks) -> decoder heads.

    Images are (H, W, 3) float arrays; tokens are kept as (C, N) columns.
    """

    def __init__(self, width: int = 32, height: int = 32, patch: int = 8,
                 channels: int = 16, n_blocks: int = 2, rank: int = 4,
                 conv_neck_after: tuple[int, ...] = (), seed: int = 0,
                 d_min: float = 20.0, d_max: float = 150.0) -> None:
        if width % patch or height % patch:
            raise ValueError(f"{width}x{height} image not divisible by patch {patch}")
        self.width, self.height, self.patch = width, height, patch
        self.channels = channels
        self.tokens_w = width // patch
        self.tokens_h = height // patch
        self.n_tokens = self.tokens_w * self.tokens_h
        self.rank = rank
        self.d_min, self.d_max = d_min, d_max
        self.conv_neck_after = tuple(conv_neck_after)
        rng = np.random.default_rng(seed)

        pvec = patch * patch * 3
        self.params: dict[str, np.ndarray] = {
            "embed_w": rng.normal(scale=0.05, size=(channels, pvec)),
            "embed_b": np.zeros(channels),
            "proj_pair_w": rng.normal(scale=0.05, size=(channels, 2 * channels)),
            "head_depth_w": np.zeros((patch * patch, channels)),
            "head_depth_b": np.zeros(patch * patch),
            "head_pose_w": np.zeros((6, channels)),
            "head_pose_b": np.zeros(6),
            "head_intr_w": np.zeros((4, channels)),
            "head_intr_b": np.zeros(4),
        }
        self.blocks: list[tuple[GatedLoraLayer, GatedLoraLayer]] = []
        for b in range(n_blocks):
            fc1 = GatedLoraLayer(channels, channels, rank, rng)
            fc2 = GatedLoraLayer(channels, channels, rank, rng)
            self.blocks.append((fc1, fc2))
            for suffix, layer in (("fc1", fc1), ("fc2", fc2)):
                for name, arr in layer.params.items():
                    self.params[f"blocks.{b}.{suffix}.{name}"] = arr
        self.necks: dict[int, ConvNeck] = {}
        for b in self.conv_neck_after:
            neck = ConvNeck(channels, rng)
            self.necks[b] = neck
            for name, arr in neck.params.items():
                self.params[f"necks.{b}.{name}"] = arr
        self._patch_idx = self._patchify_indices()
        self._unpatch_idx = self._unpatchify_indices()

    # -- parameter bookkeeping -------------------------------------------

    def lora_param_names(self, phase: Phase, branches: tuple[str, ...] = BRANCHES) -> list[str]:
        prefixes = ("A", "B") if phase == Phase.WARM_UP else ("U", "V")
        names = []
        for b in range(len(self.blocks)):
            for fc in ("fc1", "fc2"):
                for p in prefixes:
                    for br in branches:
                        names.append(f"blocks.{b}.{fc}.{p}_{br}")
        return names

    def head_param_names(self) -> list[str]:
        names = ["embed_w", "embed_b", "proj_pair_w",
                 "head_depth_w", "head_depth_b", "head_pose_w", "head_pose_b",
                 "head_intr_w", "head_intr_b"]
        for b in self.necks:
            for i in range(3):
                names += [f"necks.{b}.conv{i}", f"necks.{b}.ln{i}_gamma", f"necks.{b}.ln{i}_beta"]
        return names

    def trainable_names(self, phase: Phase, include_heads: bool = True) -> list[str]:
        names = self.lora_param_names(phase)
        if include_heads:
            names += self.head_param_names()
        return names

    # -- token plumbing ----------------------------------------------------

    def _patchify_indices(self) -> np.ndarray:
        p = self.patch
        idx = np.empty((p * p * 3, self.n_tokens), dtype=np.int64)
        for n in range(self.n_tokens):
            ty, tx = divmod(n, self.tokens_w)
            k = 0
            for dy in range(p):
                for dx in range(p):
                    for ch in range(3):
                        y, x = ty * p + dy, tx * p + dx
                        idx[k, n] = (y * self.width + x) * 3 + ch
                        k += 1
        return idx

    def _unpatchify_indices(self) -> np.ndarray:
        p = self.patch
        idx = np.empty(self.height * self.width, dtype=np.int64)
        for y in range(self.height):
            for x in range(self.width):
                n = (y // p) * self.tokens_w + (x // p)
                k = (y % p) * p + (x % p)
                idx[y * self.width + x] = k * self.n_tokens + n
        return idx

    def _embed(self, image_values, bound):
        p = _merged(self.params, bound)
        patches = dn.gather(image_values, self._patch_idx)       # (3p^2, N)
        tokens = dn.matmul(p["embed_w"], patches)
        return dn.add(tokens, dn.reshape(p["embed_b"], (self.channels, 1)))

    def _trunk(self, tokens, gate: GateState, bound):
        for b, (fc1, fc2) in enumerate(self.blocks):
            sub1 = _sub_bound(bound, f"blocks.{b}.fc1.")
            sub2 = _sub_bound(bound, f"blocks.{b}.fc2.")
            hidden = dn.sigmoid(fc1.gated_forward(gate, tokens, sub1))
            tokens = dn.add(tokens, fc2.gated_forward(gate, hidden, sub2))
            if b in self.necks:
                tokens = self.necks[b].forward(tokens, self.tokens_h, self.tokens_w,
                                               _sub_bound(bound, f"necks.{b}."))
        return tokens

    # -- forward passes -----------------------------------------------------

    def forward_depth(self, image_values, bound: dict | None = None):
        """3-channel input -> (H*W,) positive depths via the disparity decode."""
        gate = gate_from_input(3)
        tokens = self._trunk(self._embed(image_values, bound), gate, bound)
        p = _merged(self.params, bound)
        logits = dn.add(dn.matmul(p["head_depth_w"], tokens),
                        dn.reshape(p["head_depth_b"], (-1, 1)))
        sig = dn.sigmoid(dn.gather(logits, self._unpatch_idx))
        a = 1.0 / self.d_min - 1.0 / self.d_max
        disp = dn.add(dn.mul(a, sig), 1.0 / self.d_max)
        return dn.div(1.0, disp)

    def forward_pose_intrinsics(self, image_a, image_b, bound: dict | None = None):
        """6-channel (concatenated pair) input -> (rotation, translation,
        (fx, fy, cx, cy)) with the type invariants guaranteed by the decode."""
        gate = gate_from_input(6)
        tok_a = self._embed(image_a, bound)
        tok_b = self._embed(image_b, bound)
        p = _merged(self.params, bound)
        tokens = dn.matmul(p["proj_pair_w"], dn.concat([tok_a, tok_b], axis=0))
        tokens = self._trunk(tokens, gate, bound)
        pooled = dn.mean(tokens, axis=1)
        pose_raw = dn.mul(HEAD_OUTPUT_SCALE,
                          dn.add(dn.matmul(p["head_pose_w"], pooled), p["head_pose_b"]))
        rotation = dn.gather(pose_raw, np.arange(3))
        translation = dn.gather(pose_raw, np.arange(3, 6))
        intr_raw = dn.add(dn.matmul(p["head_intr_w"], pooled), p["head_intr_b"])

        # clamps keep the float outputs strictly inside the type invariants
        # even when softplus/sigmoid saturate
        def focal(idx, size):
            sp = dn.softplus(dn.add(dn.gather(intr_raw, idx), SOFTPLUS_HALF_BIAS))
            return dn.mul(float(size), dn.clamp(sp, 1e-8, None))

        def principal(idx, size):
            sig = dn.clamp(dn.sigmoid(dn.gather(intr_raw, idx)), 1e-12, 1.0 - 1e-12)
            return dn.mul(float(size), sig)

        fx = focal(0, self.width)
        fy = focal(1, self.height)
        cx = principal(2, self.width)
        cy = principal(3, self.height)
        return rotation, translation, (fx, fy, cx, cy)


def _sub_bound(bound: dict | None, prefix: str) -> dict | None:
    if not bound:
        return None
    out = {name[len(prefix):]: var for name, var in bound.items() if name.startswith(prefix)}
    return out or None


def bind_trainable(tape: dn.Tape, backbone: ToyBackbone, names) -> dict:
    """Wrap the named backbone parameters as trainable tape leaves."""
    return {name: tape.leaf(backbone.params[name], trainable=True) for name in names}


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, backbone: ToyBackbone, schedule: TrainSchedule) -> None:
    """Bit-exact dump of all parameters plus the schedule state."""
    arrays = {f"param:{k}": v for k, v in backbone.params.items()}
    arrays["schedule"] = np.array([schedule.warmup_steps, schedule.step], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, backbone: ToyBackbone) -> TrainSchedule:
    """Restore parameters in place; returns the stored schedule."""
    with np.load(Path(path)) as data:
        for key in data.files:
            if key.startswith("param:"):
                name = key[len("param:"):]
                if name not in backbone.params:
                    raise ValueError(f"checkpoint parameter {name!r} unknown to this backbone")
                np.copyto(backbone.params[name], data[key])
        warmup, step = (int(x) for x in data["schedule"])
    return TrainSchedule(warmup_steps=warmup, step=step)
