from __future__ import annotations

import numpy as np
import torch

from ..core_data import Volume


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, Volume):
        x = x.voxels
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def patchnce_loss(queries, positives, negatives=None, temperature: float = 0.07, norm_tol: float = 1e-5):
    """Patch-wise InfoNCE: mean over queries of the cross-entropy picking the positive.

    queries, positives: (P, C) unit vectors, row i of each forming a positive
    pair. negatives: (P, N, C) unit vectors, or None to use the other P-1
    positives of the same image as negatives for each query.
    """
    q, k = _as_tensor(queries), _as_tensor(positives)
    if q.shape != k.shape or q.dim() != 2:
        raise ValueError(f"queries {tuple(q.shape)} and positives {tuple(k.shape)} must be matching (P, C)")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    feats = [q, k] if negatives is None else [q, k, _as_tensor(negatives)]
    for f in feats:
        norms = f.detach().norm(dim=-1)
        if torch.any((norms - 1).abs() > norm_tol):
            raise ValueError("patch features must be L2-normalised")
    l_pos = (q * k).sum(-1, keepdim=True)
    if negatives is None:
        if q.shape[0] < 2:
            raise ValueError("in-image negatives need at least two patches")
        sim = q @ k.t()
        p = q.shape[0]
        off = ~torch.eye(p, dtype=torch.bool, device=q.device)
        l_neg = sim[off].view(p, p - 1)
    else:
        n = feats[2]
        if n.dim() != 3 or n.shape[0] != q.shape[0] or n.shape[2] != q.shape[1] or n.shape[1] < 1:
            raise ValueError(f"negatives must be (P, N>=1, C), got {tuple(n.shape)}")
        l_neg = torch.einsum("pc,pnc->pn", q, n)
    logits = torch.cat([l_pos, l_neg], dim=1) / temperature
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def adversarial_loss(d_real, d_fake, role: str):
    """Least-squares GAN objective for the discriminator or the generator."""
    fake = _as_tensor(d_fake)
    if role == "generator":
        return torch.mean((fake - 1) ** 2)
    if role == "discriminator":
        real = _as_tensor(d_real)
        return 0.5 * (torch.mean((real - 1) ** 2) + torch.mean(fake ** 2))
    raise ValueError(f"role must be 'generator' or 'discriminator', got {role!r}")


def cycle_consistency_loss(x, x_reconstructed):
    a, b = _as_tensor(x), _as_tensor(x_reconstructed)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean(torch.abs(a - b))


def mae_loss(pred, reference):
    return cycle_consistency_loss(pred, reference)
