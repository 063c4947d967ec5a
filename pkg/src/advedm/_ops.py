"""Small tensor helpers shared by the loss modules."""

import numpy as np
import torch

from advedm.errors import ZeroVectorError

# Rows whose norm product falls below this contribute zero similarity.
_TINY = 1e-300


def as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if like is not None and t.dtype != like.dtype:
        t = t.to(like.dtype)
    return t


def require_nonzero(*vectors, what="vector"):
    for v in vectors:
        if not bool(torch.all(torch.linalg.vector_norm(v, dim=-1) > 0)):
            raise ZeroVectorError(f"{what} has zero norm")


def cosine(a, b):
    """Cosine of two vectors; raises on a zero-norm input."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    require_nonzero(a, b)
    return torch.dot(a, b) / (torch.linalg.vector_norm(a) * torch.linalg.vector_norm(b))


def row_cosine(a, b):
    """Row-wise cosine of two n x d matrices.

    A row with zero norm on either side yields 0 instead of raising, so that
    attention-scaled rows with exactly zero weight drop out of a masked mean.
    """
    dots = (a * b).sum(dim=-1)
    norms = torch.linalg.vector_norm(a, dim=-1) * torch.linalg.vector_norm(b, dim=-1)
    safe = torch.where(norms > _TINY, norms, torch.ones_like(norms))
    return torch.where(norms > _TINY, dots / safe, torch.zeros_like(dots))


def masked_mean(values, select, weights=None):
    """Mean of ``values`` over the rows where ``select`` is true."""
    select = torch.as_tensor(select, dtype=torch.bool)
    v = values[select]
    if weights is None:
        return v.mean()
    w = weights[select]
    return (w * v).sum() / w.sum()
