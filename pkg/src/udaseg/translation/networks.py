"""Generator, patch discriminator and CUT patch-projection head, in 2D or 3D."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

_CONV = {2: nn.Conv2d, 3: nn.Conv3d}
_NORM = {2: nn.InstanceNorm2d, 3: nn.InstanceNorm3d}

SIZE_MULTIPLE = 4  # two stride-2 stages


def _cna(dim, cin, cout, stride=1):
    return nn.Sequential(_CONV[dim](cin, cout, 3, stride=stride, padding=1),
                         _NORM[dim](cout, affine=True), nn.ReLU())


class ResBlock(nn.Module):
    def __init__(self, dim, ch):
        super().__init__()
        self.body = nn.Sequential(_CONV[dim](ch, ch, 3, padding=1), _NORM[dim](ch, affine=True), nn.ReLU(),
                                  _CONV[dim](ch, ch, 3, padding=1), _NORM[dim](ch, affine=True))

    def forward(self, x):
        return x + self.body(x)


class ResidualGenerator(nn.Module):
    """Three-level encoder-decoder with residual blocks at the bottleneck.

    The head emits intensities through a sigmoid. With `residual=True` it
    instead predicts an additive correction to the input; `identity=True`
    implies that mode and zeroes the head, so the network maps every input to
    itself until trained. The additive form tends to get stuck near the
    identity when the target contrast is inverted, hence the sigmoid default.
    """

    def __init__(self, dim=3, base_width=16, n_res=2, identity=False, residual=False, **_):
        super().__init__()
        w = base_width
        self.dim = dim
        self.residual = bool(residual or identity)
        self.stem = _cna(dim, 1, w)
        self.down1 = _cna(dim, w, 2 * w, stride=2)
        self.down2 = _cna(dim, 2 * w, 4 * w, stride=2)
        self.res = nn.Sequential(*[ResBlock(dim, 4 * w) for _ in range(n_res)])
        self.up1 = _cna(dim, 4 * w, 2 * w)
        self.up2 = _cna(dim, 2 * w, w)
        # the head also sees full-resolution stem features, so it can remap intensities voxelwise
        self.head = _CONV[dim](2 * w, 1, 3, padding=1)
        if identity:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def encode(self, x):
        """Feature maps of the two shallowest encoder levels (used for patch contrast)."""
        f1 = self.stem(x)
        f2 = self.down1(f1)
        return [f1, f2]

    def forward(self, x, return_feats=False):
        f1 = self.stem(x)
        f2 = self.down1(f1)
        h = self.res(self.down2(f2))
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.head(torch.cat([h, f1], dim=1))
        out = x + h if self.residual else torch.sigmoid(h)
        if return_feats:
            return out, [f1, f2]
        return out


class PatchDiscriminator(nn.Module):
    """Fully convolutional real/fake classifier over overlapping patches.

    Three feature layers (two strided) and a one-channel output conv; the
    third layer widens the receptive field enough to cover a VS-sized blob.
    """

    def __init__(self, dim=3, base_width=16, **_):
        super().__init__()
        w = base_width
        conv = _CONV[dim]
        self.net = nn.Sequential(
            conv(1, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            conv(w, 2 * w, 4, stride=2, padding=1), _NORM[dim](2 * w, affine=True), nn.LeakyReLU(0.2),
            conv(2 * w, 4 * w, 4, stride=1, padding=1), _NORM[dim](4 * w, affine=True), nn.LeakyReLU(0.2),
            conv(4 * w, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class PatchProjector(nn.Module):
    """Samples feature vectors at shared random locations and projects them to unit vectors."""

    def __init__(self, in_channels=(16, 32), out_dim=64):
        super().__init__()
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(c, out_dim), nn.ReLU(), nn.Linear(out_dim, out_dim)) for c in in_channels)

    def forward(self, feats, num_patches, patch_ids=None, generator=None):
        out, ids_out = [], []
        for i, (f, mlp) in enumerate(zip(feats, self.mlps)):
            flat = f.flatten(2)[0].t()  # (positions, channels)
            if patch_ids is None:
                n = min(num_patches, flat.shape[0])
                ids = torch.randperm(flat.shape[0], generator=generator)[:n]
            else:
                ids = patch_ids[i]
            z = mlp(flat[ids])
            out.append(F.normalize(z, dim=1))
            ids_out.append(ids)
        return out, ids_out


def generator_arch(dim: int, base_width: int = 16, n_res: int = 2, residual: bool = False) -> dict:
    return {"kind": "generator", "dim": dim, "base_width": base_width, "n_res": n_res, "residual": residual}


def discriminator_arch(dim: int, base_width: int = 16) -> dict:
    return {"kind": "discriminator", "dim": dim, "base_width": base_width}
