"""Dense kernels used by the encoder and the retrieval head.

All kernels operate on ``torch`` tensors whose last two dimensions form the
matrix (leading dimensions are batch). The forward path runs in float32;
float64 inputs are accepted so gradient checks can run at higher precision.
Reductions accumulate in the input dtype except ``layer_norm``, whose
mean/variance are taken in float64 and cast back.

Random numbers come from numpy's PCG64 bit generator, which produces the same
stream for a given seed on every platform.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ContractError

def rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) for a 64-bit unsigned seed."""
    if not 0 <= seed < 2**64:
        raise ContractError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def gaussian(gen: np.random.Generator, shape: tuple[int, ...], std: float) -> torch.Tensor:
    # drawn in float64 and rounded so the stream does not depend on numpy's float32 path
    return torch.from_numpy((gen.standard_normal(shape) * std).astype(np.float32))


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    """Row softmax with max subtraction. Rows of all ``-inf`` are not allowed."""
    shifted = m - m.amax(dim=-1, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(m: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gamma.shape[-1] != m.shape[-1] or beta.shape[-1] != m.shape[-1]:
        raise ContractError("layer_norm affine parameters must match the feature width")
    mean = m.mean(dim=-1, keepdim=True, dtype=torch.float64).to(m.dtype)
    centered = m - mean
    var = (centered * centered).mean(dim=-1, keepdim=True, dtype=torch.float64).to(m.dtype)
    return centered / torch.sqrt(var + eps) * gamma + beta


def gelu(m: torch.Tensor) -> torch.Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    return torch.nn.functional.gelu(m, approximate="tanh")


def cosine_sim(u: torch.Tensor, v: torch.Tensor) -> float:
    nu = torch.linalg.vector_norm(u.double())
    nv = torch.linalg.vector_norm(v.double())
    if nu == 0 or nv == 0:
        raise ContractError("cosine similarity of a zero vector is undefined")
    c = float(torch.dot(u.double().flatten(), v.double().flatten()) / (nu * nv))
    return max(-1.0, min(1.0, c))


def normalize_rows(m: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return m / torch.linalg.vector_norm(m, dim=-1, keepdim=True).clamp_min(eps)
