"""Local trainable model: affine embedding adapter, two-layer clustering head,
robust clustering loss, center-alignment loss, analytic gradients, Adam.

The adapter stands in for encoder fine-tuning: it is initialized to the
identity so a fresh model reproduces the frozen input embeddings exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import AllSamplesDiscardedError, DivergenceError, InvalidInputError
from .numerics import Rng, as_matrix

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"FSTM"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("identity", "tanh")


@dataclass
class ModelParams:
    """Adapter (optional) plus D -> H -> K head with ReLU in between."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    adapter_w: np.ndarray | None = None
    adapter_b: np.ndarray | None = None
    adapter_activation: str = "identity"

    def __post_init__(self):
        if self.adapter_activation not in _ACTIVATIONS:
            raise InvalidInputError(
                f"adapter_activation must be one of {_ACTIVATIONS}"
            )
        if (self.adapter_w is None) != (self.adapter_b is None):
            raise InvalidInputError("adapter weight and bias must both be set or unset")
        for name, value in self.named_params():
            if not np.all(np.isfinite(value)):
                raise InvalidInputError(f"parameter {name} contains non-finite values")

    @property
    def has_adapter(self) -> bool:
        return self.adapter_w is not None

    @property
    def dim_in(self) -> int:
        return self.w1.shape[0]

    @property
    def dim_out(self) -> int:
        return self.w2.shape[1]

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Trainable tensors in checkpoint order."""
        out = []
        if self.has_adapter:
            out += [("adapter_w", self.adapter_w), ("adapter_b", self.adapter_b)]
        out += [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            adapter_w=None if self.adapter_w is None else self.adapter_w.copy(),
            adapter_b=None if self.adapter_b is None else self.adapter_b.copy(),
            adapter_activation=self.adapter_activation,
        )


def init_model_params(
    d: int,
    k: int,
    rng: Rng,
    hidden: int | None = None,
    adapter: bool = True,
    adapter_activation: str = "identity",
) -> ModelParams:
    """He-initialized first layer, zero output layer, identity adapter.

    The zero output layer makes the initial scores exactly zero, so the first
    pseudo-label projection starts from uniform assignment probabilities
    instead of amplifying random-head structure.
    """
    h = d if hidden is None else hidden
    w1 = rng.gen.standard_normal((d, h)) * np.sqrt(2.0 / d)
    return ModelParams(
        w1=w1,
        b1=np.zeros(h),
        w2=np.zeros((h, k)),
        b2=np.zeros(k),
        adapter_w=np.eye(d) if adapter else None,
        adapter_b=np.zeros(d) if adapter else None,
        adapter_activation=adapter_activation,
    )


@dataclass
class OptimizerState:
    """Adam moments per parameter, with separate adapter/head learning rates."""

    adapter_lr: float = 5e-6
    head_lr: float = 5e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        return self.adapter_lr if name.startswith("adapter") else self.head_lr


@dataclass
class LossBreakdown:
    l_c: float
    l_a: float
    total: float
    lam: float
    skipped: bool = False


def _apply_adapter(params: ModelParams, x: np.ndarray) -> np.ndarray:
    if not params.has_adapter:
        return x
    z = x @ params.adapter_w + params.adapter_b
    if params.adapter_activation == "tanh":
        return np.tanh(z)
    return z


def _forward_parts(params: ModelParams, x: np.ndarray):
    e = _apply_adapter(params, x)
    z1 = e @ params.w1 + params.b1
    a1 = np.maximum(z1, 0.0)
    o = a1 @ params.w2 + params.b2
    return e, z1, a1, o


def forward(params: ModelParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Return representations e and cluster assignment scores o."""
    x = as_matrix(x, "x")
    if x.shape[1] != params.dim_in:
        raise InvalidInputError(
            f"input width {x.shape[1]} does not match model width {params.dim_in}"
        )
    e, _, _, o = _forward_parts(params, x)
    return e, o


def clustering_loss(q, o, w) -> float:
    """Weighted mean squared residual (1/sum w) * sum_i w_i ||q_i - o_i||^2."""
    q = as_matrix(q, "q")
    o = as_matrix(o, "o")
    if q.shape != o.shape:
        raise InvalidInputError(f"shape mismatch: q {q.shape}, o {o.shape}")
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != q.shape[0]:
        raise InvalidInputError(f"w has length {w.shape[0]}, expected {q.shape[0]}")
    w_sum = float(w.sum())
    if w_sum <= 0.0:
        raise AllSamplesDiscardedError("every sample weight is zero")
    resid = q - o
    return float(np.sum(w * np.sum(resid * resid, axis=1)) / w_sum)


def alignment_loss(c_local, c_global) -> float:
    """Squared Frobenius distance between local and global center matrices."""
    a = as_matrix(c_local, "c_local")
    b = as_matrix(c_global, "c_global")
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sum(diff * diff))


def _batch_centers(e: np.ndarray, q: np.ndarray, k: int):
    """Per-cluster means of e under argmax-q assignment (ties: lowest index)."""
    assign = np.argmax(q, axis=1)
    counts = np.bincount(assign, minlength=k)
    centers = np.zeros((k, e.shape[1]))
    np.add.at(centers, assign, e)
    nonzero = counts > 0
    centers[nonzero] /= counts[nonzero, None]
    return centers, counts, assign


def gradients(
    params: ModelParams, x, q, w, c_global, lam: float
) -> tuple[LossBreakdown, dict]:
    """Loss breakdown and analytic gradient of L = L_C + lam * L_A.

    The alignment term uses centers recomputed from this batch's current
    representations under the batch's fixed pseudo-assignments, so its
    gradient reaches the adapter; clusters empty in the batch are skipped.
    A batch whose weights are all zero reports NaN losses and no gradients.
    """
    x = as_matrix(x, "x")
    q = as_matrix(q, "q")
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    c_global = as_matrix(c_global, "c_global")
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    k = params.dim_out

    e, z1, a1, o = _forward_parts(params, x)
    w_sum = float(w.sum())
    if w_sum <= 0.0:
        skipped = LossBreakdown(
            l_c=float("nan"), l_a=float("nan"), total=float("nan"),
            lam=lam, skipped=True,
        )
        return skipped, {}

    resid = o - q
    l_c = float(np.sum(w * np.sum(resid * resid, axis=1)) / w_sum)
    centers, counts, assign = _batch_centers(e, q, k)
    occupied = counts > 0
    center_diff = centers[occupied] - c_global[occupied]
    l_a = float(np.sum(center_diff * center_diff))
    total = l_c + lam * l_a

    # head backprop
    d_o = (2.0 / w_sum) * w[:, None] * resid
    grads = {
        "w2": a1.T @ d_o,
        "b2": d_o.sum(axis=0),
    }
    d_a1 = d_o @ params.w2.T
    d_z1 = d_a1 * (z1 > 0.0)
    grads["w1"] = e.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    d_e = d_z1 @ params.w1.T

    if lam != 0.0:
        # d l_a / d e_i = 2 (C_{a_i} - global_{a_i}) / count_{a_i}
        full_diff = np.zeros_like(centers)
        full_diff[occupied] = center_diff
        d_e = d_e + lam * 2.0 * full_diff[assign] / counts[assign, None]

    if params.has_adapter:
        if params.adapter_activation == "tanh":
            d_z = d_e * (1.0 - e * e)
        else:
            d_z = d_e
        grads["adapter_w"] = x.T @ d_z
        grads["adapter_b"] = d_z.sum(axis=0)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}; step aborted")
    return LossBreakdown(l_c=l_c, l_a=l_a, total=total, lam=lam), grads


def backward_and_step(
    params: ModelParams,
    opt: OptimizerState,
    x,
    q,
    w,
    c_global,
    lam: float,
) -> LossBreakdown:
    """One Adam step on L = L_C + lam * L_A; returns the loss breakdown.

    A batch whose weights are all zero reports NaN losses and takes no step.
    """
    breakdown, grads = gradients(params, x, q, w, c_global, lam)
    if breakdown.skipped:
        return breakdown

    opt.step += 1
    t = opt.step
    tensors = dict(params.named_params())
    for name, g in grads.items():
        if name not in opt.m:
            opt.m[name] = np.zeros_like(g)
            opt.v[name] = np.zeros_like(g)
        opt.m[name] = ADAM_BETA1 * opt.m[name] + (1.0 - ADAM_BETA1) * g
        opt.v[name] = ADAM_BETA2 * opt.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = opt.m[name] / (1.0 - ADAM_BETA1 ** t)
        v_hat = opt.v[name] / (1.0 - ADAM_BETA2 ** t)
        tensors[name] -= opt.lr_for(name) * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return breakdown


def total_loss(params: ModelParams, x, q, w, c_global, lam: float) -> float:
    """Loss value only, matching backward_and_step exactly; used by tests."""
    x = as_matrix(x, "x")
    e, _, _, o = _forward_parts(params, x)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    l_c = clustering_loss(q, o, w)
    centers, counts, _ = _batch_centers(e, np.asarray(q, dtype=np.float64), params.dim_out)
    occupied = counts > 0
    c_global = as_matrix(c_global, "c_global")
    diff = centers[occupied] - c_global[occupied]
    return l_c + lam * float(np.sum(diff * diff))


def _write_tensor(f, arr: np.ndarray | None) -> None:
    if arr is None:
        f.write(struct.pack("<I", 0))
        return
    a = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(a.tobytes())


def _read_tensor(raw: bytes, offset: int) -> tuple[np.ndarray | None, int]:
    (ndim,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if ndim == 0:
        return None, offset
    shape = struct.unpack_from(f"<{ndim}I", raw, offset)
    offset += 4 * ndim
    count = int(np.prod(shape))
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
    return arr.astype(np.float64), offset + 8 * count


def save_model(params: ModelParams, path) -> None:
    """Checkpoint: magic, u32 version, u8 adapter flag, u8 activation code,
    2 pad bytes, then shape-prefixed f64 tensors in fixed order
    adapter.W, adapter.b, head.W1, head.b1, head.W2, head.b2
    (absent adapter tensors carry a zero dimension count)."""
    with open(Path(path), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IBB2x", CHECKPOINT_VERSION,
                            1 if params.has_adapter else 0,
                            _ACTIVATIONS.index(params.adapter_activation)))
        _write_tensor(f, params.adapter_w)
        _write_tensor(f, params.adapter_b)
        for arr in (params.w1, params.b1, params.w2, params.b2):
            _write_tensor(f, arr)


def load_model(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"bad checkpoint magic {raw[:4]!r}")
    version, has_adapter, act_code = struct.unpack_from("<IBB2x", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    offset = 4 + struct.calcsize("<IBB2x")
    adapter_w, offset = _read_tensor(raw, offset)
    adapter_b, offset = _read_tensor(raw, offset)
    w1, offset = _read_tensor(raw, offset)
    b1, offset = _read_tensor(raw, offset)
    w2, offset = _read_tensor(raw, offset)
    b2, offset = _read_tensor(raw, offset)
    if (adapter_w is not None) != bool(has_adapter):
        raise InvalidInputError("checkpoint adapter flag disagrees with payload")
    return ModelParams(
        w1=w1, b1=b1, w2=w2, b2=b2,
        adapter_w=adapter_w, adapter_b=adapter_b,
        adapter_activation=_ACTIVATIONS[act_code],
    )
