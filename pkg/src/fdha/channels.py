# Topology, path-loss and channel sampling, including the stochastic
# CSI-error split used by the robust design.
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig

# Users are never placed closer than this to the BS; avoids the path-loss
# singularity of the log-distance model at d -> 0.
MIN_BS_DISTANCE_M = 1.0

# Reference distances at which the two log-distance laws evaluate to their
# table constants. They calibrate the cell to its reference operating
# regime: a cell-edge user sits a few dB above noise per antenna (rate
# floors of 1 bps/Hz stay reachable everywhere in the disc), while
# co-channel gains between nearby users land tens of dB above noise, which
# is what makes the user-to-user interference a real bottleneck.
BS_USER_REF_M = 10.0
USER_USER_REF_M = 1000.0


@dataclass(frozen=True)
class Topology:
    """User drop: BS at the origin, positions in meters."""

    ul_positions: np.ndarray   # (L, 2)
    dl_positions: np.ndarray   # (K, 2)

    @property
    def d_bs_ul(self) -> np.ndarray:
        return np.linalg.norm(self.ul_positions, axis=1)

    @property
    def d_bs_dl(self) -> np.ndarray:
        return np.linalg.norm(self.dl_positions, axis=1)

    @property
    def d_ul_dl(self) -> np.ndarray:
        """(L, K) distances from each uplink to each downlink user."""
        diff = self.ul_positions[:, None, :] - self.dl_positions[None, :, :]
        return np.linalg.norm(diff, axis=2)


def _uniform_disc(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    # Uniform over the annulus [MIN_BS_DISTANCE_M, radius].
    r2_lo = MIN_BS_DISTANCE_M ** 2
    r = np.sqrt(r2_lo + (radius ** 2 - r2_lo) * rng.random(n))
    theta = 2.0 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def generate_topology(config: SystemConfig, rng: np.random.Generator) -> Topology:
    """Drop UL and DL users uniformly in the cell disc."""
    return Topology(
        ul_positions=_uniform_disc(config.num_ul, config.cell_radius_m, rng),
        dl_positions=_uniform_disc(config.num_dl, config.cell_radius_m, rng),
    )


def path_loss_db(kind: str, d):
    """Log-distance path loss in dB.

    kind 'bs_user':  103.8 + 20.9 log10(d)
    kind 'user_user': 145.4 + 37.5 log10(d)

    d is the distance expressed in the law's reference unit (see
    BS_USER_REF_M / USER_USER_REF_M); :func:`path_gain` handles meters.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    if kind == "bs_user":
        out = 103.8 + 20.9 * np.log10(d)
    elif kind == "user_user":
        out = 145.4 + 37.5 * np.log10(d)
    else:
        raise ValueError("kind must be 'bs_user' or 'user_user'")
    return out if out.ndim else float(out)


def path_gain(kind: str, d_meters):
    """Linear power gain 10^(-PL/10) for distances given in meters."""
    ref = BS_USER_REF_M if kind == "bs_user" else USER_USER_REF_M
    d = np.asarray(d_meters) / ref
    return 10.0 ** (-np.asarray(path_loss_db(kind, d)) / 10.0)


@dataclass(frozen=True)
class ChannelSet:
    """One realization of every channel in the cell.

    h_u[l] and h_d[k] are the stacked 2N-vectors over both half-arrays;
    g_si is the N x N self-interference channel between the half-arrays and
    g_bar its block anti-diagonal 2N x 2N lift; g[l, k] is the co-channel
    gain from uplink user l into downlink user k.
    """

    h_u: np.ndarray        # (L, 2N) complex
    h_d: np.ndarray        # (K, 2N) complex
    g_si: np.ndarray       # (N, N) complex
    g_bar: np.ndarray      # (2N, 2N) complex
    g: np.ndarray          # (L, K) complex
    sigma2_bs: float       # noise power at the BS (Watts)
    sigma2_dl: float       # noise power at each DL user (Watts)

    @property
    def num_ul(self) -> int:
        return self.h_u.shape[0]

    @property
    def num_dl(self) -> int:
        return self.h_d.shape[0]

    @property
    def num_antennas(self) -> int:
        return self.h_u.shape[1]


def build_g_bar(g_si: np.ndarray) -> np.ndarray:
    """Lift the N x N SI channel to the Hermitian block anti-diagonal
    [[0, G], [G^H, 0]] acting on the stacked array."""
    n = g_si.shape[0]
    g_bar = np.zeros((2 * n, 2 * n), dtype=complex)
    g_bar[:n, n:] = g_si
    g_bar[n:, :n] = g_si.conj().T
    return g_bar


def _cn_sample(shape, variance, rng: np.random.Generator) -> np.ndarray:
    """Circularly-symmetric complex Gaussian entries; `variance` broadcasts."""
    scale = np.sqrt(np.asarray(variance, dtype=float) / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def sample_channels(topology: Topology, config: SystemConfig,
                    rng: np.random.Generator) -> ChannelSet:
    """Draw one channel realization for the given drop.

    BS-user channels are CN(0, PL I); the SI channel has i.i.d. Rician
    entries with unit second moment (mean/scatter split by the K-factor);
    co-channel gains are CN(0, PL_lk).
    """
    two_n = config.num_antennas
    gain_ul = path_gain("bs_user", topology.d_bs_ul)
    gain_dl = path_gain("bs_user", topology.d_bs_dl)
    gain_cci = path_gain("user_user", topology.d_ul_dl)

    h_u = _cn_sample((config.num_ul, two_n), gain_ul[:, None], rng)
    h_d = _cn_sample((config.num_dl, two_n), gain_dl[:, None], rng)

    k_factor = 10.0 ** (config.rician_k_db / 10.0)
    los = np.sqrt(k_factor / (k_factor + 1.0))
    scatter = _cn_sample((config.half_array_size, config.half_array_size),
                         1.0 / (k_factor + 1.0), rng)
    g_si = los + scatter

    g = _cn_sample((config.num_ul, config.num_dl), gain_cci, rng)

    return ChannelSet(
        h_u=h_u,
        h_d=h_d,
        g_si=g_si,
        g_bar=build_g_bar(g_si),
        g=g,
        sigma2_bs=config.noise_w,
        sigma2_dl=config.noise_w,
    )


def csi_error_variance(delta: float, upsilon: float, snr_linear) -> np.ndarray:
    """Estimation-error variance model: delta * snr^(-upsilon)."""
    if delta < 0 or upsilon < 0:
        raise ValueError("delta and upsilon must be nonnegative")
    snr_linear = np.asarray(snr_linear, dtype=float)
    if np.any(snr_linear <= 0):
        raise ValueError("snr_linear must be positive")
    out = delta * snr_linear ** (-upsilon)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class RobustChannelSet:
    """Channel estimates plus the error variances the robust design treats
    as additional noise. `true` keeps the underlying realization so a design
    made on estimates can be evaluated on the channels it will actually see.
    The SI channel is shared with `true`: both ends live at the BS.
    """

    hat_h_u: np.ndarray    # (L, 2N)
    hat_h_d: np.ndarray    # (K, 2N)
    hat_g: np.ndarray      # (L, K)
    eps_u: np.ndarray      # (L,) per-entry error variance of h_u
    eps_d: np.ndarray      # (K,)
    eps_lk: np.ndarray     # (L, K)
    true: ChannelSet

    @property
    def g_si(self) -> np.ndarray:
        return self.true.g_si

    @property
    def g_bar(self) -> np.ndarray:
        return self.true.g_bar

    @property
    def sigma2_bs(self) -> float:
        return self.true.sigma2_bs

    @property
    def sigma2_dl(self) -> float:
        return self.true.sigma2_dl

    @property
    def num_ul(self) -> int:
        return self.hat_h_u.shape[0]

    @property
    def num_dl(self) -> int:
        return self.hat_h_d.shape[0]


def split_robust(channels: ChannelSet, eps_u, eps_d, eps_lk,
                 rng: np.random.Generator) -> RobustChannelSet:
    """Split true channels into estimate + independent CN(0, eps) error.

    Estimates are true - error, so the error is independent of the estimate
    by construction of the joint draw, and zero variances reproduce the true
    channels exactly.
    """
    L, two_n = channels.h_u.shape
    K = channels.h_d.shape[0]
    eps_u = np.broadcast_to(np.asarray(eps_u, dtype=float), (L,)).copy()
    eps_d = np.broadcast_to(np.asarray(eps_d, dtype=float), (K,)).copy()
    eps_lk = np.broadcast_to(np.asarray(eps_lk, dtype=float), (L, K)).copy()
    if np.any(eps_u < 0) or np.any(eps_d < 0) or np.any(eps_lk < 0):
        raise ValueError("error variances must be nonnegative")

    err_u = _cn_sample((L, two_n), eps_u[:, None], rng)
    err_d = _cn_sample((K, two_n), eps_d[:, None], rng)
    err_g = _cn_sample((L, K), eps_lk, rng)

    return RobustChannelSet(
        hat_h_u=channels.h_u - err_u,
        hat_h_d=channels.h_d - err_d,
        hat_g=channels.g - err_g,
        eps_u=eps_u,
        eps_d=eps_d,
        eps_lk=eps_lk,
        true=channels,
    )
