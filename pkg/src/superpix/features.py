"""Wavelet scattering features (order 0, 1 and 2) computed in the spatial domain.

Band-pass filters are isotropic-envelope Morlet wavelets; because both the
Gaussian envelope and the plane wave factor over the two image axes, every
kernel is applied as a sum of two separable passes, with reflect padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from superpix.errors import IndivisibleDims, ShapeMismatch
from superpix.imgio import FeatureTensor

XI0 = 3 * math.pi / 4
SIGMA0 = 0.8
TRUNCATE = 4.0


@dataclass(frozen=True)
class Separable:
    """Kernel k(y, x) = sum_i ky[i](y) * kx[i](x) (complex factors allowed)."""

    terms: tuple[tuple[np.ndarray, np.ndarray], ...]

    @property
    def radius(self) -> int:
        return max(len(ky) // 2 for ky, _ in self.terms)

    def dense(self) -> np.ndarray:
        r = self.radius
        out = np.zeros((2 * r + 1, 2 * r + 1), dtype=complex)
        for ky, kx in self.terms:
            oy, ox = r - len(ky) // 2, r - len(kx) // 2
            out[oy : oy + len(ky), ox : ox + len(kx)] += np.outer(ky, kx)
        return out


@dataclass(frozen=True)
class FilterBank:
    J: int
    L: int
    psi: tuple[Separable, ...]  # index j * L + l
    phi: Separable

    def psi_at(self, j: int, l: int) -> Separable:
        return self.psi[j * self.L + l]

    @property
    def map_count(self) -> int:
        return map_count(self.J, self.L)

    def paths(self) -> list[tuple]:
        """Scattering paths in output order: (), (j, l), (j1, l1, j2, l2)."""
        out: list[tuple] = [()]
        out += [(j, l) for j in range(self.J) for l in range(self.L)]
        out += [
            (j1, l1, j2, l2)
            for j1 in range(self.J)
            for l1 in range(self.L)
            for j2 in range(j1 + 1, self.J)
            for l2 in range(self.L)
        ]
        return out


def map_count(J: int, L: int) -> int:
    return 1 + J * L + L * L * J * (J - 1) // 2


def _support(sigma: float) -> np.ndarray:
    r = int(math.ceil(TRUNCATE * sigma))
    return np.arange(-r, r + 1, dtype=np.float64)


def _gauss_1d(sigma: float) -> np.ndarray:
    u = _support(sigma)
    g = np.exp(-(u**2) / (2 * sigma**2))
    return g / g.sum()


def morlet(sigma: float, xi: float, theta: float) -> Separable:
    """Zero-mean Morlet: gaussian * (exp(i xi . u) - K), K fixed on the truncated support."""
    u = _support(sigma)
    g = np.exp(-(u**2) / (2 * sigma**2))
    wx = g * np.exp(1j * xi * math.cos(theta) * u)
    wy = g * np.exp(1j * xi * math.sin(theta) * u)
    K = (wy.sum() * wx.sum()) / (g.sum() ** 2)
    norm = 1.0 / (2 * math.pi * sigma**2)
    return Separable(((norm * wy, wx), (-K * norm * g, g.astype(complex))))


def build_scattering_filters(J: int = 2, L: int = 8) -> FilterBank:
    """Morlet band-pass bank at scales 2^j, orientations pi*l/L, plus a Gaussian low-pass.

    The band-pass filters share one gain, chosen so their summed squared frequency
    response never exceeds 1; the transform is then non-expansive.
    """
    if J < 1 or L < 1:
        raise ValueError(f"J and L must be >= 1, got J={J}, L={L}")
    psi = []
    for j in range(J):
        for l in range(L):
            psi.append(morlet(SIGMA0 * 2**j, XI0 / 2**j, math.pi * l / L))
    scale = 1.0 / math.sqrt(littlewood_paley_max(psi))
    psi = [Separable(tuple((scale * ky, kx) for ky, kx in p.terms)) for p in psi]
    g = _gauss_1d(SIGMA0 * 2**J)
    phi = Separable(((g.astype(complex), g.astype(complex)),))
    return FilterBank(J, L, tuple(psi), phi)


def littlewood_paley_max(psi) -> float:
    """max over frequencies of sum_k |psi_k_hat|^2, sampled on a zero-padded grid."""
    n = 4 * (2 * max(p.radius for p in psi) + 1)
    acc = np.zeros((n, n))
    for p in psi:
        k = p.dense()
        acc += np.abs(np.fft.fft2(k, s=(n, n))) ** 2
    return float(acc.max())


def _sep_conv_real(x: np.ndarray, ky: np.ndarray, kx: np.ndarray) -> np.ndarray:
    tmp = ndimage.convolve1d(x, ky, axis=0, mode="reflect")
    return ndimage.convolve1d(tmp, kx, axis=1, mode="reflect")


def convolve(x: np.ndarray, k: Separable) -> np.ndarray:
    """Convolve a real or complex 2-D image with a separable kernel (reflect padding)."""
    x = x.astype(complex)
    out = np.zeros(x.shape, dtype=complex)
    for ky, kx in k.terms:
        tmp = ndimage.convolve1d(x, ky, axis=0, mode="reflect")
        out += ndimage.convolve1d(tmp, kx, axis=1, mode="reflect")
    return out


def _lowpass_pool(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    ky, kx = bank.phi.terms[0]
    y = _sep_conv_real(x, ky.real, kx.real)
    f = 2**bank.J
    h, w = y.shape
    return y.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def scattering_transform(channel: np.ndarray, bank: FilterBank) -> FeatureTensor:
    """Order 0/1/2 scattering of one channel; output (M, H / 2^J, W / 2^J)."""
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch("scattering_transform expects a single 2-D channel")
    f = 2**bank.J
    h, w = x.shape
    if h % f or w % f:
        raise IndivisibleDims(f"image {w}x{h} is not divisible by 2^J = {f}")

    out = np.empty((bank.map_count, h // f, w // f))
    out[0] = _lowpass_pool(x, bank)
    first = {}
    k = 1
    for j in range(bank.J):
        for l in range(bank.L):
            u1 = np.abs(convolve(x, bank.psi_at(j, l)))
            first[j, l] = u1
            out[k] = _lowpass_pool(u1, bank)
            k += 1
    for j1 in range(bank.J):
        for l1 in range(bank.L):
            for j2 in range(j1 + 1, bank.J):
                for l2 in range(bank.L):
                    u2 = np.abs(convolve(first[j1, l1], bank.psi_at(j2, l2)))
                    out[k] = _lowpass_pool(u2, bank)
                    k += 1
    return FeatureTensor(out.astype(np.float32))


def scatter_channels(data: np.ndarray, bank: FilterBank) -> list[FeatureTensor]:
    """Apply the transform to each plane of a (C, H, W) stack."""
    return [scattering_transform(plane, bank) for plane in np.asarray(data)]


def default_channel_mask(bank: FilterBank, disabled: Iterable[int] | None = None) -> list[bool]:
    """All maps selected, except indices listed in ``disabled``."""
    mask = [True] * bank.map_count
    for m in disabled or ():
        mask[m] = False
    return mask


def order_indices(bank: FilterBank, order: int) -> list[int]:
    return [i for i, p in enumerate(bank.paths()) if len(p) == 2 * order]


def parse_mask(spec: str | Sequence[int] | None, bank: FilterBank) -> list[bool]:
    """Mask from a config value listing the maps to drop.

    Tokens are comma separated: a map index, or ``order1`` / ``order2`` for a
    whole scattering order. An empty value keeps every map.
    """
    if spec is None or spec == "" or spec == []:
        return default_channel_mask(bank)
    if isinstance(spec, str):
        dropped: list[int] = []
        for tok in (s.strip() for s in spec.split(",")):
            if tok.startswith("order"):
                dropped += order_indices(bank, int(tok[len("order") :]))
            elif tok:
                dropped.append(int(tok))
    else:
        dropped = list(spec)
    for m in dropped:
        if not 0 <= m < bank.map_count:
            raise ValueError(f"mask index {m} out of range [0, {bank.map_count})")
    return default_channel_mask(bank, dropped)
