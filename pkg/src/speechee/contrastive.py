"""Event-type supervised contrastive loss on pooled encoder states."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .encoder import length_mask


def pool(h: torch.Tensor, lengths: torch.Tensor | None = None, eps: float = 1e-12) -> torch.Tensor:
    """Mean over valid time steps, then L2-normalize.

    ``h`` is (T, d) or (B, T, d). A clip whose mean vector is zero has no
    direction and raises ``ValueError``.
    """
    single = h.dim() == 2
    if single:
        h = h[None]
    if lengths is None:
        mean = h.mean(dim=1)
    else:
        m = length_mask(lengths, h.shape[1])[..., None].to(h.dtype)
        mean = (h * m).sum(dim=1) / lengths[:, None].to(h.dtype)
    norm = mean.norm(dim=-1, keepdim=True)
    if (norm <= eps).any():
        raise ValueError("degenerate clip: pooled representation is the zero vector")
    x = mean / norm
    return x[0] if single else x


def label_matrix(labels, types=None) -> torch.Tensor:
    """Multi-hot (N, n_types) matrix from per-sample label sets."""
    if isinstance(labels, torch.Tensor):
        return labels.bool()
    types = sorted({t for ls in labels for t in ls}) if types is None else list(types)
    col = {t: i for i, t in enumerate(types)}
    out = torch.zeros(len(labels), max(len(types), 1), dtype=torch.bool)
    for i, ls in enumerate(labels):
        for t in ls:
            out[i, col[t]] = True
    return out


def positive_mask(labels) -> torch.Tensor:
    y = label_matrix(labels).to(torch.float64)
    pos = (y @ y.T) > 0
    pos.fill_diagonal_(False)
    return pos


def contrastive_loss(x: torch.Tensor, labels, tau: float = 0.1) -> torch.Tensor:
    """Sum over anchors of ``-log(mean_pos exp(s/tau) / sum_{k != i} exp(s/tau))``.

    Rows of ``x`` are expected to be unit-norm. A sample is an anchor when
    some other sample shares at least one event type with it; samples
    without positives contribute nothing.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    n = x.shape[0]
    pos = positive_mask(labels).to(x.device)
    if n < 2 or not pos.any():
        return x.sum() * 0.0
    logits = (x @ x.T) / tau
    eye = torch.eye(n, dtype=torch.bool, device=x.device)
    # finite fill keeps gradients of non-anchor rows at zero instead of NaN
    neg = torch.finfo(x.dtype).min / 4
    denom = torch.logsumexp(logits.masked_fill(eye, neg), dim=1)
    npos = pos.sum(dim=1)
    anchors = npos > 0
    num = torch.logsumexp(logits.masked_fill(~pos, neg), dim=1) - torch.log(
        npos.clamp(min=1).to(x.dtype)
    )
    return -(num - denom)[anchors].sum()
