"""Differentiable numerical primitives on top of torch tensors.

All model math runs through these helpers so the contract (stable softmax,
additive attention masking with exact-zero blocked weights, NaN detection,
seeded fan-in initialization) lives in one place.  Tests run in float64;
training may use float32.
"""

from __future__ import annotations

import math

import torch

# Additive stand-in for -inf in attention logits.  Large enough that
# exp(logit - rowmax) underflows to exactly 0 for any finite logit, small
# enough to avoid (-inf) * 0 NaNs.
BLOCK32 = -1e9
BLOCK64 = -1e30


def block_value(dtype: torch.dtype) -> float:
    return BLOCK64 if dtype == torch.float64 else BLOCK32


def assert_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Raise FloatingPointError if x contains NaN or +/-inf."""
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product with an explicit inner-dimension check."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-stabilized softmax over the last axis."""
    return torch.softmax(x, dim=-1)


def masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Scaled dot-product attention with an additive mask.

    q, k, v: (..., L, d); mask: (L, L) with 0 for allowed and a large
    negative block value for forbidden pairs.  Blocked columns receive
    exactly zero weight.  A fully blocked row is a contract violation.
    """
    d = q.shape[-1]
    if (mask <= block_value(mask.dtype) / 2).all(dim=-1).any():
        raise ValueError("attention mask has a fully blocked row")
    logits = matmul(q, k.transpose(-2, -1)) / math.sqrt(d) + mask
    return matmul(softmax_rows(logits), v)


def backward(loss: torch.Tensor) -> None:
    """Backpropagate a scalar loss, populating .grad on leaf tensors."""
    if loss.dim() != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    assert_finite(loss, "loss")
    loss.backward()


def init_uniform_fanin_(weight: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """In-place Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    fan_in = weight.shape[-1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=gen)
    return weight


def finite_diff_grad(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite-difference gradient of scalar f at x (flattened loop)."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def grad_check(f, x: torch.Tensor, eps: float = 1e-5, rtol: float = 1e-4) -> float:
    """Compare autograd against central differences; returns the relative error.

    f must be a scalar-valued function of x.  Raises AssertionError when the
    relative error exceeds rtol.
    """
    x = x.detach().clone().requires_grad_(True)
    loss = f(x)
    backward(loss)
    ana = x.grad.detach().clone()
    num = finite_diff_grad(lambda t: f(t.detach()), x.detach().clone(), eps=eps)
    denom = max(ana.norm().item(), num.norm().item(), 1e-12)
    rel = (ana - num).norm().item() / denom
    if rel >= rtol:
        raise AssertionError(f"gradient check failed: relative error {rel:.3e} >= {rtol:.0e}")
    return rel
