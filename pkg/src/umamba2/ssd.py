"""State-space duality (SSD) kernels and the Mamba2 mixing block.

The normative semantics is the scalar-decay linear recurrence

    S_0 = 0,   S_t = a_t * S_{t-1} + B_t (x) x_t,   y_t = C_t^T S_t

with state ``S_t`` of shape (N, P).  :func:`ssd_quadratic` evaluates the same
map as one masked matrix product and :func:`ssd_chunked` splits the sequence
into blocks of length ``Q``: quadratic inside each block, a sequential state
pass between blocks.  All three accept arbitrary leading (batch, head)
dimensions: ``x`` is (..., T, P), ``a`` is (..., T), ``B``/``C`` are (..., T, N).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Module, parameter, small_uniform
from .tensor import Tensor


@dataclass
class SsdInputs:
    """One SSD evaluation: values ``x``, decays ``a`` and projections ``b_in``/``c_out``."""

    x: Tensor
    a: Tensor
    b_in: Tensor
    c_out: Tensor

    def __post_init__(self) -> None:
        self.x, self.a = T.as_tensor(self.x), T.as_tensor(self.a)
        self.b_in, self.c_out = T.as_tensor(self.b_in), T.as_tensor(self.c_out)

    def validate(self, allow_zero_decay: bool = False) -> None:
        steps = self.x.shape[-2]
        if steps < 1 or self.x.shape[-1] < 1 or self.b_in.shape[-1] < 1:
            raise ValueError("SSD needs T >= 1, N >= 1 and P >= 1")
        if self.a.shape[-1] != steps or self.b_in.shape[-2] != steps or self.c_out.shape[-2] != steps:
            raise T.ShapeError(
                f"sequence length mismatch: x {self.x.shape}, a {self.a.shape}, "
                f"B {self.b_in.shape}, C {self.c_out.shape}")
        if self.b_in.shape[-1] != self.c_out.shape[-1]:
            raise T.ShapeError(f"state size mismatch: B {self.b_in.shape} vs C {self.c_out.shape}")
        for name in ("x", "a", "b_in", "c_out"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise FloatingPointError(f"non-finite values in SSD input {name!r}")
        a = self.a.data
        low_ok = np.all(a >= 0) if allow_zero_decay else np.all(a > 0)
        if not (low_ok and np.all(a <= 1)):
            raise ValueError("SSD decays must lie in (0, 1]")

    @classmethod
    def random(cls, rng: np.random.Generator, steps: int, state: int, head_dim: int,
               lead: Sequence[int] = (), decay_range=(0.5, 1.0)) -> "SsdInputs":
        lead = tuple(lead)
        return cls(
            x=rng.normal(size=lead + (steps, head_dim)),
            a=rng.uniform(*decay_range, size=lead + (steps,)),
            b_in=rng.normal(size=lead + (steps, state)),
            c_out=rng.normal(size=lead + (steps, state)),
        )


@dataclass(frozen=True)
class SsdConfig:
    state_dim: int = 16
    num_heads: int = 4
    expand: int = 2
    chunk_len: int = 32
    conv_width: int = 4
    gating: bool = True

    def __post_init__(self) -> None:
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")
        if min(self.state_dim, self.num_heads, self.expand) < 1 or self.conv_width < 0:
            raise ValueError(f"invalid SSD config {self}")

    def head_dim(self, d_model: int) -> int:
        inner = self.expand * d_model
        if inner % self.num_heads:
            raise ValueError(f"inner width {inner} not divisible into {self.num_heads} heads")
        return inner // self.num_heads


# ---------------------------------------------------------------------------
# the three evaluation forms
# ---------------------------------------------------------------------------

def ssd_recurrent(inputs: SsdInputs) -> Tensor:
    """Step-by-step evaluation of the recurrence; the ground truth."""
    inputs.validate(allow_zero_decay=True)
    x, a, b, c = inputs.x, inputs.a, inputs.b_in, inputs.c_out
    steps = x.shape[-2]
    state = None
    ys = []
    for t in range(steps):
        xt = x[..., t:t + 1, :]                      # (..., 1, P)
        bt = T.swapaxes(b[..., t:t + 1, :], -1, -2)  # (..., N, 1)
        update = T.matmul(bt, xt)                    # (..., N, P)
        at = T.expand_dims(a[..., t:t + 1], -1)      # (..., 1, 1)
        state = update if state is None else at * state + update
        ys.append(T.matmul(c[..., t:t + 1, :], state))
    return T.concat(ys, axis=-2)


def _log_decay_mask(log_a: Tensor) -> Tensor:
    steps = log_a.shape[-1]
    strict = np.tril(np.ones((steps, steps)), -1)
    lower = np.tril(np.ones((steps, steps)))
    rep = T.broadcast_to(T.expand_dims(log_a, -1), log_a.shape + (steps,)) * strict
    segsum = T.cumsum(rep, axis=-2)  # [t, s] = sum of log a_r for s < r <= t
    return T.exp(segsum) * lower


def decay_mask(a) -> Tensor:
    """Lower-triangular L with L[t, s] = prod_{r=s+1..t} a_r and unit diagonal."""
    a = T.as_tensor(a)
    if np.any(a.data <= 0) or np.any(a.data > 1) or not np.all(np.isfinite(a.data)):
        raise ValueError("decays must lie in (0, 1]")
    return _log_decay_mask(T.log(a))


def _quadratic(x: Tensor, log_a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    scores = T.matmul(c, T.swapaxes(b, -1, -2))
    return T.matmul(scores * _log_decay_mask(log_a), x)


def ssd_quadratic(inputs: SsdInputs) -> Tensor:
    """``Y = (L o C B^T) X`` -- the attention-like dual form."""
    inputs.validate()
    return _quadratic(inputs.x, T.log(inputs.a), inputs.b_in, inputs.c_out)


def chunked_scan(x: Tensor, log_a: Tensor, b: Tensor, c: Tensor, chunk_len: int) -> Tensor:
    """Blocked SSD evaluation on log-decays; see :func:`ssd_chunked`."""
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    steps = x.shape[-2]
    lead = np.broadcast_shapes(x.shape[:-2], log_a.shape[:-1], b.shape[:-2], c.shape[:-2])
    x = T.broadcast_to(x, lead + x.shape[-2:]) if x.shape[:-2] != lead else x
    log_a = T.broadcast_to(log_a, lead + (steps,)) if log_a.shape[:-1] != lead else log_a
    q = min(chunk_len, steps)
    n_chunks = -(-steps // q)
    extra = n_chunks * q - steps
    if extra:
        pad_seq = lambda t, nd: T.pad(t, [(0, 0)] * (t.ndim - nd) + [(0, extra)] + [(0, 0)] * (nd - 1))
        x, log_a, b, c = pad_seq(x, 2), pad_seq(log_a, 1), pad_seq(b, 2), pad_seq(c, 2)
    xc = T.reshape(x, x.shape[:-2] + (n_chunks, q, x.shape[-1]))
    la = T.reshape(log_a, log_a.shape[:-1] + (n_chunks, q))
    bc = T.reshape(b, b.shape[:-2] + (n_chunks, q, b.shape[-1]))
    cc = T.reshape(c, c.shape[:-2] + (n_chunks, q, c.shape[-1]))

    cum = T.cumsum(la, axis=-1)  # (..., nc, q)
    y_diag = _quadratic(xc, la, bc, cc)
    # state contributed by each chunk, measured at the chunk's last step
    to_end = T.exp(cum[..., -1:] - cum)
    chunk_states = T.matmul(T.swapaxes(bc * T.expand_dims(to_end, -1), -1, -2), xc)  # (..., nc, N, P)
    chunk_decay = T.exp(cum[..., -1])  # (..., nc)

    carried = []
    state = None
    for k in range(n_chunks):
        carried.append(state)
        local = chunk_states[..., k, :, :]
        if state is None:
            state = local
        else:
            state = T.expand_dims(T.expand_dims(chunk_decay[..., k], -1), -1) * state + local
    y_off = []
    from_start = T.exp(cum)
    for k in range(1, n_chunks):
        ck = cc[..., k, :, :] * T.expand_dims(from_start[..., k, :], -1)
        y_off.append(T.matmul(ck, carried[k]))
    if y_off:
        zeros = Tensor(np.zeros(y_diag.shape[:-3] + (1,) + y_diag.shape[-2:]))
        y_off = T.concat([zeros] + [T.expand_dims(y, -3) for y in y_off], axis=-3)
        y = y_diag + y_off
    else:
        y = y_diag
    y = T.reshape(y, y.shape[:-3] + (n_chunks * q, y.shape[-1]))
    return y[..., :steps, :] if extra else y


def ssd_chunked(inputs: SsdInputs, chunk_len: int) -> Tensor:
    """Chunk-parallel evaluation: quadratic within chunks of ``chunk_len``,
    carried state between chunks.  ``chunk_len`` need not divide T."""
    inputs.validate()
    return chunked_scan(inputs.x, T.log(inputs.a), inputs.b_in, inputs.c_out, chunk_len)


# ---------------------------------------------------------------------------
# Mamba2 block
# ---------------------------------------------------------------------------

def causal_depthwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (B, T, C), weight (C, W): out[t] = sum_k weight[:, k] * x[t - W + 1 + k]."""
    width = weight.shape[-1]
    steps = x.shape[1]
    xp = T.pad(x, [(0, 0), (width - 1, 0), (0, 0)])
    out = None
    for k in range(width):
        term = xp[:, k:k + steps, :] * weight[:, k]
        out = term if out is None else out + term
    return out + bias if bias is not None else out


class Mamba2(Module):
    """Mamba2 mixer over (B, T, d_model) sequences."""

    def __init__(self, d_model: int, cfg: SsdConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.d_model = d_model
        self.d_inner = cfg.expand * d_model
        self.head_dim = cfg.head_dim(d_model)
        n, h = cfg.state_dim, cfg.num_heads
        self.conv_channels = self.d_inner + 2 * n
        proj_out = 2 * self.d_inner + 2 * n + h
        self.in_proj = parameter(small_uniform(rng, (d_model, proj_out), d_model))
        if cfg.conv_width > 0:
            self.conv_weight = parameter(small_uniform(rng, (self.conv_channels, cfg.conv_width), cfg.conv_width))
            self.conv_bias = parameter(np.zeros(self.conv_channels))
        # dt bias so that softplus(dt_bias) spans [1e-3, 1e-1] (log-uniform)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=h))
        self.dt_bias = parameter(dt + np.log(-np.expm1(-dt)))
        # A_h = exp(a_log) log-uniform in [1, 16]
        self.a_log = parameter(rng.uniform(0.0, math.log(16.0), size=h))
        self.out_proj = parameter(small_uniform(rng, (self.d_inner, d_model), self.d_inner))

    def forward(self, u: Tensor) -> Tensor:
        return mamba2_block(u, self, self.cfg)


def mamba2_block(features: Tensor, params: Mamba2, cfg: SsdConfig) -> Tensor:
    """Project, short causal conv, SSD scan with input-dependent decays, gate, project back."""
    features = T.as_tensor(features)
    if features.ndim != 3 or features.shape[-1] != params.d_model:
        raise T.ShapeError(f"mamba2 block expects (B, T, {params.d_model}), got {features.shape}")
    bsz, steps, _ = features.shape
    di, n, h, p = params.d_inner, cfg.state_dim, cfg.num_heads, params.head_dim
    proj = T.matmul(features, params.in_proj)
    z = proj[..., :di]
    xbc = proj[..., di:di + params.conv_channels]
    dt = proj[..., di + params.conv_channels:]
    if cfg.conv_width > 0:
        xbc = causal_depthwise_conv(xbc, params.conv_weight, params.conv_bias)
    xbc = T.silu(xbc)
    x = xbc[..., :di]
    b = T.expand_dims(xbc[..., di:di + n], 1)        # (B, 1, T, N), shared by heads
    c = T.expand_dims(xbc[..., di + n:], 1)
    dt = T.softplus(dt + params.dt_bias)               # (B, T, H)
    dt = T.transpose(dt, (0, 2, 1))                    # (B, H, T)
    log_a = -dt * T.reshape(T.exp(params.a_log), (h, 1))
    x = T.transpose(T.reshape(x, (bsz, steps, h, p)), (0, 2, 1, 3))  # (B, H, T, P)
    x = x * T.expand_dims(dt, -1)
    y = chunked_scan(x, log_a, b, c, cfg.chunk_len)
    y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (bsz, steps, di))
    if cfg.gating:
        y = y * T.silu(z)
    return T.matmul(y, params.out_proj)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

FORMS = {
    "recurrent": lambda inp, q: ssd_recurrent(inp),
    "quadratic": lambda inp, q: ssd_quadratic(inp),
    "chunked": lambda inp, q: ssd_chunked(inp, q),
}


@dataclass
class BenchmarkResult:
    rows: list[dict] = field(default_factory=list)

    def seconds(self, form: str, steps: int) -> float:
        for row in self.rows:
            if row["form"] == form and row["T"] == steps:
                return row["seconds"]
        raise KeyError((form, steps))

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2)


def benchmark_ssd(lengths: Sequence[int], forms: Sequence[str] = ("quadratic", "chunked"),
                  state_dim: int = 8, head_dim: int = 8, chunk_len: int = 64, repeats: int = 3,
                  seed: int = 0, check: bool = True, heads: int = 1) -> BenchmarkResult:
    """Best-of-``repeats`` wall clock per form and sequence length (no-grad)."""
    unknown = set(forms) - set(FORMS)
    if unknown:
        raise ValueError(f"unknown SSD forms {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    result = BenchmarkResult()
    with T.no_grad():
        for steps in lengths:
            inp = SsdInputs.random(rng, steps, state_dim, head_dim, lead=(heads,), decay_range=(0.9, 1.0))
            if check and len(forms) > 1:
                outs = [FORMS[f](inp, chunk_len).data for f in forms]
                for f, o in zip(forms[1:], outs[1:]):
                    err = np.abs(o - outs[0]).max() / max(1.0, np.abs(outs[0]).max())
                    if err > 1e-8:
                        raise AssertionError(f"form {f} disagrees with {forms[0]} at T={steps}: {err:.2e}")
            for form in forms:
                best = math.inf
                for _ in range(repeats):
                    start = time.perf_counter()
                    FORMS[form](inp, chunk_len)
                    best = min(best, time.perf_counter() - start)
                result.rows.append({"form": form, "T": steps, "N": state_dim, "P": head_dim,
                                    "Q": chunk_len, "H": heads, "seconds": best})
    return result
