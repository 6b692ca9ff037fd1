"""Learned augmented residual combinations.

A residual block normally returns ``f(x_i) + x_i``. The variants here learn a
richer combination:

* RW: ``alpha * f(x_i) + beta * x_i`` with two learned scalars per block,
  optionally normalised (softmax over the pair, or a single sigmoid).
* LR: ``f(x_i) + A B x_i + x_i`` with ``A`` of shape ``D x r`` and ``B`` of
  shape ``r x D``; ``W = AB + I`` is never formed.
* PA: ``f(x_i) + x_i + sum_{j<=i} gamma_j A_h B_h x_j`` over the residual
  stream, with one low-rank map shared by all blocks and one ``gamma`` per
  source block. ``literal_mode`` switches to
  ``f(x_i) + sum_{j<=i} gamma_j (A_h B_h x_j + x_j)``.

Combined variants apply the RW scalars first, then add the LR term, then the
PA sum.

Activations are row-major batches (``b x D``), so ``A B x`` is evaluated as
``x @ B.T @ A.T``.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from laurel.tensor import (
    ShapeError,
    Tensor,
    add,
    matmul,
    mul,
    sigmoid,
    softmax_lastaxis,
    stack,
    take,
    transpose,
)

NORMALIZATIONS = ("softmax", "sigmoid", "none")


class Variant(enum.Enum):
    VANILLA = "vanilla"
    RW = "rw"
    LR = "lr"
    PA = "pa"
    RW_LR = "rw+lr"
    RW_LR_PA = "rw+lr+pa"

    @classmethod
    def parse(cls, name: "str | Variant") -> "Variant":
        if isinstance(name, Variant):
            return name
        key = name.strip().lower().replace(" ", "")
        for v in cls:
            if v.value == key:
                return v
        raise ValueError(f"unknown residual variant {name!r}; "
                         f"expected one of {[v.value for v in cls]}")

    @property
    def uses_rw(self) -> bool:
        return self in (Variant.RW, Variant.RW_LR, Variant.RW_LR_PA)

    @property
    def uses_lr(self) -> bool:
        return self in (Variant.LR, Variant.RW_LR, Variant.RW_LR_PA)

    @property
    def uses_pa(self) -> bool:
        return self in (Variant.PA, Variant.RW_LR_PA)

    @property
    def has_rank(self) -> bool:
        return self.uses_lr or self.uses_pa

    def label(self, rank: int | None = None) -> str:
        if self.has_rank and rank is not None:
            return f"{self.value}(r={rank})"
        return self.value


@dataclass
class RWParams:
    alpha_logit: Tensor
    beta_logit: Tensor
    normalization: str = "softmax"

    def weights(self) -> tuple[Tensor, Tensor]:
        """Effective ``(alpha, beta)`` as differentiable scalars."""
        if self.normalization == "softmax":
            w = softmax_lastaxis(stack([self.alpha_logit, self.beta_logit]))
            return take(w, 0), take(w, 1)
        if self.normalization == "sigmoid":
            # beta_logit is unused in this mode
            alpha = sigmoid(self.alpha_logit)
            return alpha, 1.0 - alpha
        if self.normalization == "none":
            return self.alpha_logit, self.beta_logit
        raise ValueError(f"unknown RW normalization {self.normalization!r}")

    def tensors(self) -> dict[str, Tensor]:
        return {"alpha_logit": self.alpha_logit, "beta_logit": self.beta_logit}


@dataclass
class LRParams:
    A: Tensor  # D x r
    B: Tensor  # r x D

    def __post_init__(self):
        _check_factors(self.A, self.B)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}


@dataclass
class PAParams:
    A_h: Tensor  # D x r, shared by all blocks
    B_h: Tensor  # r x D
    gamma: Tensor  # one weight per source block
    literal_mode: bool = False

    def __post_init__(self):
        _check_factors(self.A_h, self.B_h)
        if self.gamma.data.ndim != 1:
            raise ShapeError(f"gamma must be a vector, got shape {self.gamma.shape}")

    def tensors(self) -> dict[str, Tensor]:
        return {"A": self.A_h, "B": self.B_h, "gamma": self.gamma}


def _check_factors(A: Tensor, B: Tensor) -> None:
    if A.data.ndim != 2 or B.data.ndim != 2 or A.shape[::-1] != B.shape:
        raise ShapeError(f"low-rank factors must be D x r and r x D, got {A.shape} and {B.shape}")
    if A.shape[1] > A.shape[0]:
        raise ShapeError(f"rank {A.shape[1]} exceeds width {A.shape[0]}")


class ResidualStream:
    """History ``x_0, x_1, ..., x_i`` of residual outputs in one forward pass.

    The PA partial sums ``sum_{j<=i} gamma_j h(x_j)`` do not depend on the
    consuming block, so they are cached per :class:`PAParams` and extended one
    term at a time (ascending ``j``, the same order as an explicit loop).
    """

    def __init__(self, x0: Tensor | None = None):
        self._xs: list[Tensor] = []
        self._sums: list[Tensor] = []
        self._sums_owner: int | None = None
        if x0 is not None:
            self.append(x0)

    def append(self, x: Tensor) -> None:
        if self._xs and x.shape != self._xs[0].shape:
            raise ShapeError(f"stream entries must share a shape: {x.shape} vs {self._xs[0].shape}")
        self._xs.append(x)

    def __len__(self) -> int:
        return len(self._xs)

    def __getitem__(self, j: int) -> Tensor:
        return self._xs[j]

    @property
    def last(self) -> Tensor:
        return self._xs[-1]

    def pa_sum(self, i: int, p: PAParams) -> Tensor:
        if self._sums_owner != id(p):
            self._sums, self._sums_owner = [], id(p)
        while len(self._sums) <= i:
            j = len(self._sums)
            h = low_rank(self._xs[j], p.A_h, p.B_h)
            if p.literal_mode:
                h = add(h, self._xs[j])
            term = mul(h, take(p.gamma, j))
            self._sums.append(term if j == 0 else add(self._sums[-1], term))
        return self._sums[i]


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: f_out shape {a.shape} does not match residual shape {b.shape}")


def low_rank(x: Tensor, A: Tensor, B: Tensor) -> Tensor:
    """``A B x`` for each row of ``x``, as two rank-r products."""
    if x.shape[-1] != B.shape[1]:
        raise ShapeError(f"low-rank map expects width {B.shape[1]}, got {x.shape}")
    return matmul(matmul(x, transpose(B)), transpose(A))


def rw_combine(f_out: Tensor, x_i: Tensor, p: RWParams) -> Tensor:
    _same_shape(f_out, x_i, "rw_combine")
    alpha, beta = p.weights()
    return add(mul(f_out, alpha), mul(x_i, beta))


def lr_augment(x: Tensor, p: LRParams) -> Tensor:
    """``(AB + I) x`` without materialising the D x D matrix."""
    return add(x, low_rank(x, p.A, p.B))


def lr_combine(f_out: Tensor, x_i: Tensor, p: LRParams) -> Tensor:
    _same_shape(f_out, x_i, "lr_combine")
    return add(f_out, lr_augment(x_i, p))


def _pa_sum(stream: ResidualStream, p: PAParams, i: int) -> Tensor:
    if len(stream) < i + 1:
        raise IndexError(f"pa_combine: block {i} needs {i + 1} stream entries, have {len(stream)}")
    if i >= p.gamma.shape[0]:
        raise IndexError(f"pa_combine: block {i} out of range for {p.gamma.shape[0]} gamma weights")
    return stream.pa_sum(i, p)


def pa_combine(f_out: Tensor, stream: ResidualStream, p: PAParams, i: int) -> Tensor:
    total = _pa_sum(stream, p, i)
    _same_shape(f_out, stream[i], "pa_combine")
    if p.literal_mode:
        return add(f_out, total)
    return add(add(f_out, stream[i]), total)


# ---------------------------------------------------------------------------
# whole-model parameter bundle
# ---------------------------------------------------------------------------


@dataclass
class ResidualParams:
    """Every learned residual quantity of a model with ``N`` blocks."""

    variant: Variant
    rw: list[RWParams | None] = field(default_factory=list)
    lr: list[LRParams | None] = field(default_factory=list)
    pa: PAParams | None = None

    @property
    def num_blocks(self) -> int:
        return len(self.rw)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (rw, lr) in enumerate(zip(self.rw, self.lr)):
            if rw is not None:
                out.update({f"block{i}.rw.{k}": t for k, t in rw.tensors().items()})
            if lr is not None:
                out.update({f"block{i}.lr.{k}": t for k, t in lr.tensors().items()})
        if self.pa is not None:
            out.update({f"pa.{k}": t for k, t in self.pa.tensors().items()})
        return out


def apply_residual(variant: Variant, f_out: Tensor, stream: ResidualStream,
                   params: ResidualParams | None) -> Tensor:
    """Combine a block's nonlinear output with the residual stream.

    The block index is ``len(stream) - 1``; ``stream.last`` is its input.
    """
    variant = Variant.parse(variant)
    if variant is Variant.VANILLA:
        x_i = stream.last
        _same_shape(f_out, x_i, "apply_residual")
        return add(f_out, x_i)
    if params is None or params.variant is not variant:
        got = None if params is None else params.variant.value
        raise ValueError(f"apply_residual: params for {got!r} do not match variant {variant.value!r}")

    i = len(stream) - 1
    x_i = stream[i]
    if variant is Variant.LR:
        return lr_combine(f_out, x_i, params.lr[i])
    if variant is Variant.PA:
        return pa_combine(f_out, stream, params.pa, i)

    out = rw_combine(f_out, x_i, params.rw[i])
    if variant.uses_lr:
        out = add(out, low_rank(x_i, params.lr[i].A, params.lr[i].B))
    if variant.uses_pa:
        out = add(out, _pa_sum(stream, params.pa, i))
    return out


def param_count(variant: Variant | str, D: int, N: int, r: int | None = None) -> int:
    """Parameters added over a vanilla residual model of width D and N blocks."""
    variant = Variant.parse(variant)
    if D < 1 or N < 1:
        raise ValueError("param_count: D and N must be positive")
    if variant.has_rank:
        _check_rank(r, D)
    total = 0
    if variant.uses_rw:
        total += 2 * N
    if variant.uses_lr:
        total += 2 * r * D * N
    if variant.uses_pa:
        total += 2 * r * D + N
    return total


def _check_rank(r: int | None, D: int) -> None:
    if r is None or not 1 <= r <= D:
        raise ValueError(f"rank must satisfy 1 <= r <= D={D}, got {r}")


def init_params(variant: Variant | str, D: int, N: int, r: int | None = None, seed=0,
                normalization: str = "softmax", literal_mode: bool = False) -> ResidualParams:
    """Initialise residual parameters so the model starts as a plain residual net.

    RW logits start at 0 (alpha = beta = 0.5) under softmax or sigmoid
    normalisation and at 1 (alpha = beta = 1) with no normalisation. ``A`` and
    ``A_h`` are drawn from N(0, 1/D); ``B`` and ``B_h`` start at 0.

    ``gamma`` starts at 1 in the default PA form: with ``B_h = 0`` the PA term
    is already exactly zero, and a zero ``gamma`` as well would leave
    ``gamma``, ``A_h`` and ``B_h`` with identically zero gradients forever.
    Literal-mode PA starts from ``gamma = 0``.
    ``seed`` is anything accepted by :func:`numpy.random.default_rng`.
    """
    variant = Variant.parse(variant)
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown RW normalization {normalization!r}")
    if variant.has_rank:
        _check_rank(r, D)
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(D)

    out = ResidualParams(variant, rw=[None] * N, lr=[None] * N)
    for i in range(N):
        if variant.uses_rw:
            start = 1.0 if normalization == "none" else 0.0
            out.rw[i] = RWParams(Tensor(start, True), Tensor(start, True), normalization)
        if variant.uses_lr:
            A = Tensor(rng.normal(0.0, std, (D, r)), True)
            out.lr[i] = LRParams(A, Tensor(np.zeros((r, D)), True))
    if variant.uses_pa:
        if literal_mode:
            warnings.warn("literal-mode PA starts with gamma = 0 and does not reduce to a "
                          "plain residual connection at init", stacklevel=2)
        A_h = Tensor(rng.normal(0.0, std, (D, r)), True)
        gamma = np.zeros(N) if literal_mode else np.ones(N)
        out.pa = PAParams(A_h, Tensor(np.zeros((r, D)), True), Tensor(gamma, True), literal_mode)
    return out
