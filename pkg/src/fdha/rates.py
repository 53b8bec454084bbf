# Exact SINRs and block rates for a fixed design, perfect and imperfect CSI,
# plus the MMSE weight vectors and the user-assignment extraction.
#
# Conventions: phase index j is 0-based; uplink decoding is MMSE-SIC in
# ascending user order, so user l sees interference from users l+1..L only.
# Inactive users are encoded by zero power / zero beamformers.
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channels import ChannelSet, RobustChannelSet
from .modes import ModeMatrix, PhaseMasks, derive_masks


def as_masks(mode, n: int) -> PhaseMasks:
    return mode if isinstance(mode, PhaseMasks) else derive_masks(mode, n)


@dataclass
class DesignPoint:
    """One iterate of the continuous design: beamformers w[k, j] (2N complex),
    uplink amplitudes p[l, j] (transmit power is p**2), time variables mu and
    downlink SINR reciprocals theta[k, j]."""

    w: np.ndarray       # (K, 2, 2N) complex
    p: np.ndarray       # (L, 2) >= 0
    mu: np.ndarray      # (2,), mu_j > 1 and 1/mu_1 + 1/mu_2 <= 1
    theta: np.ndarray   # (K, 2) > 0

    @property
    def tau_bar(self) -> np.ndarray:
        """Phase durations (tau, 1 - tau) recovered from mu_2."""
        return np.array([1.0 - 1.0 / self.mu[1], 1.0 / self.mu[1]])

    @property
    def tau(self) -> float:
        return float(self.tau_bar[0])

    def copy(self) -> "DesignPoint":
        return DesignPoint(self.w.copy(), self.p.copy(), self.mu.copy(),
                           self.theta.copy())


def validate_point(point: DesignPoint, masks: PhaseMasks, atol: float = 1e-9):
    """Raise if the iterate violates the design-point invariants."""
    n = masks.n
    if np.any(point.mu <= 1.0):
        raise ValueError("mu entries must exceed 1")
    if 1.0 / point.mu[0] + 1.0 / point.mu[1] > 1.0 + atol:
        raise ValueError("1/mu_1 + 1/mu_2 must not exceed 1")
    if np.any(point.p < -atol):
        raise ValueError("uplink amplitudes must be nonnegative")
    if np.any(point.theta <= 0):
        raise ValueError("theta entries must be positive")
    for i, j in masks.forced_zero_dl_blocks:
        block = point.w[:, j, i * n:(i + 1) * n]
        if np.any(block != 0):
            raise ValueError("beamformer half (%d, %d) must be exactly zero" % (i, j))


# -- effective channels ------------------------------------------------------


def effective_ul(channels, masks: PhaseMasks, j: int) -> np.ndarray:
    """Receive-masked uplink channels for phase j, shape (L, 2N)."""
    h = channels.hat_h_u if isinstance(channels, RobustChannelSet) else channels.h_u
    return h * masks.lambda_bar[j][None, :]


def effective_dl(channels, masks: PhaseMasks, j: int) -> np.ndarray:
    """Transmit-masked downlink channels for phase j, shape (K, 2N)."""
    h = channels.hat_h_d if isinstance(channels, RobustChannelSet) else channels.h_d
    return h * masks.lambda_[j][None, :]


def effective_si(channels, masks: PhaseMasks, j: int) -> np.ndarray:
    """Transmit-masked SI channel Lambda_j @ G_bar, shape (2N, 2N)."""
    return masks.lambda_[j][:, None] * channels.g_bar


def _si_covariance(gt: np.ndarray, w_j: np.ndarray, rho2: float) -> np.ndarray:
    """rho^2 sum_k Gt^H w_k w_k^H Gt."""
    gw = w_j @ gt.conj()              # rows: w_k^H conj? -> use (Gt^H w_k) = (w_k^H Gt)^H
    # Gt^H w_k for each k: (2N,) vectors; stack as columns.
    v = gt.conj().T @ w_j.T           # (2N, K)
    return rho2 * (v @ v.conj().T)


def _ul_sinr_core(h_eff: np.ndarray, p_j: np.ndarray, base_cov: np.ndarray) -> np.ndarray:
    """SIC chain: gamma_l = p_l^2 h_l^H Psi_l^{-1} h_l with Psi_l the
    covariance of users l+1..L plus base_cov."""
    L = h_eff.shape[0]
    gamma = np.zeros(L)
    psi = base_cov.copy()
    for l in range(L - 1, -1, -1):
        h = h_eff[l]
        if p_j[l] > 0:
            sol = _solve_pd(psi, h)
            gamma[l] = float(p_j[l] ** 2 * np.real(h.conj() @ sol))
            psi = psi + (p_j[l] ** 2) * np.outer(h, h.conj())
    return gamma


def _solve_pd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a positive-definite system, with a diagonal jitter fallback for
    near-singular covariances at extreme budgets."""
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(a).real / a.shape[0]
        return np.linalg.solve(a + jitter * np.eye(a.shape[0]), b)


def ul_sinr(mode, j: int, w_j: np.ndarray, p_j: np.ndarray,
            channels: ChannelSet, rho2: float) -> np.ndarray:
    """Per-user uplink SINRs of phase j under the MMSE-SIC decoder."""
    masks = as_masks(mode, channels.num_antennas // 2)
    L = channels.num_ul
    if masks.beta[j]:
        return np.zeros(L)
    h_eff = effective_ul(channels, masks, j)
    gt = effective_si(channels, masks, j)
    cov = _si_covariance(gt, w_j, rho2) \
        + channels.sigma2_bs * np.eye(channels.num_antennas)
    return _ul_sinr_core(h_eff, p_j, cov)


def robust_ul_sinr(mode, j: int, w_j: np.ndarray, p_j: np.ndarray,
                   channels: RobustChannelSet, rho2: float) -> np.ndarray:
    """Uplink SINRs computed on estimates, with the CSI-error power floor."""
    masks = as_masks(mode, channels.true.num_antennas // 2)
    L = channels.num_ul
    if masks.beta[j]:
        return np.zeros(L)
    h_eff = effective_ul(channels, masks, j)
    gt = effective_si(channels.true, masks, j)
    floor = float(np.sum(p_j ** 2 * channels.eps_u))
    cov = _si_covariance(gt, w_j, rho2) \
        + floor * np.diag(masks.lambda_bar[j].astype(float)) \
        + channels.sigma2_bs * np.eye(channels.true.num_antennas)
    return _ul_sinr_core(h_eff, p_j, cov)


def dl_sinr(mode, j: int, w_j: np.ndarray, p_j: np.ndarray,
            channels: ChannelSet) -> np.ndarray:
    """Per-user downlink SINRs of phase j (multiuser + co-channel + noise)."""
    masks = as_masks(mode, channels.num_antennas // 2)
    K = channels.num_dl
    if masks.chi[j]:
        return np.zeros(K)
    h_eff = effective_dl(channels, masks, j)
    inner = h_eff.conj() @ w_j.T                   # (K, K): h_k^H w_k'
    sig = np.abs(np.diag(inner)) ** 2
    mui = np.sum(np.abs(inner) ** 2, axis=1) - np.abs(np.diag(inner)) ** 2
    cci = (p_j ** 2) @ (np.abs(channels.g) ** 2)   # (K,)
    return sig / (mui + cci + channels.sigma2_dl)


def robust_dl_sinr(mode, j: int, w_j: np.ndarray, p_j: np.ndarray,
                   channels: RobustChannelSet) -> np.ndarray:
    """Downlink SINRs on estimates with beam-leakage and CCI error floors."""
    masks = as_masks(mode, channels.true.num_antennas // 2)
    K = channels.num_dl
    if masks.chi[j]:
        return np.zeros(K)
    h_eff = effective_dl(channels, masks, j)
    inner = h_eff.conj() @ w_j.T
    sig = np.abs(np.diag(inner)) ** 2
    mui = np.sum(np.abs(inner) ** 2, axis=1) - np.abs(np.diag(inner)) ** 2
    cci = (p_j ** 2) @ (np.abs(channels.hat_g) ** 2)
    w_masked = w_j * masks.lambda_[j][None, :]
    beam_floor = float(np.sum(channels.eps_d * np.sum(np.abs(w_masked) ** 2, axis=1)))
    cci_floor = (p_j ** 2) @ channels.eps_lk       # (K,)
    return sig / (mui + cci + beam_floor + cci_floor + channels.sigma2_dl)


def mmse_weights(mode, j: int, w_j: np.ndarray, p_j: np.ndarray,
                 channels: RobustChannelSet, rho2: float) -> np.ndarray:
    """MSE-optimal receive weights u_l = p_l (p_l^2 h h^H + Psi_l)^{-1} h;
    verification oracle for the robust uplink SINRs."""
    masks = as_masks(mode, channels.true.num_antennas // 2)
    L = channels.num_ul
    two_n = channels.true.num_antennas
    h_eff = effective_ul(channels, masks, j)
    gt = effective_si(channels.true, masks, j)
    floor = float(np.sum(p_j ** 2 * channels.eps_u))
    cov = _si_covariance(gt, w_j, rho2) \
        + floor * np.diag(masks.lambda_bar[j].astype(float)) \
        + channels.sigma2_bs * np.eye(two_n)
    # Psi_l for each l, accumulated from the back of the SIC order.
    psi = [None] * L
    acc = cov
    for l in range(L - 1, -1, -1):
        psi[l] = acc
        acc = acc + (p_j[l] ** 2) * np.outer(h_eff[l], h_eff[l].conj())
    out = np.zeros((L, two_n), dtype=complex)
    for l in range(L):
        h = h_eff[l]
        full = psi[l] + (p_j[l] ** 2) * np.outer(h, h.conj())
        out[l] = p_j[l] * _solve_pd(full, h)
    return out


def sic_sum_rate_lndet(mode, j: int, w_j: np.ndarray, p_j: np.ndarray,
                       channels: ChannelSet, rho2: float) -> float:
    """Independent determinant-identity evaluation of the phase-j uplink sum
    rate: ln det(I + sum_l p_l^2 h_l h_l^H C^{-1})."""
    masks = as_masks(mode, channels.num_antennas // 2)
    if masks.beta[j]:
        return 0.0
    h_eff = effective_ul(channels, masks, j)
    gt = effective_si(channels, masks, j)
    cov = _si_covariance(gt, w_j, rho2) \
        + channels.sigma2_bs * np.eye(channels.num_antennas)
    sig = (h_eff.T * (p_j ** 2)) @ h_eff.conj()
    sign, logdet_full = np.linalg.slogdet(cov + sig)
    _, logdet_base = np.linalg.slogdet(cov)
    return float(logdet_full - logdet_base)


# -- block rates and reporting -------------------------------------------------


@dataclass
class RateReport:
    """Per-user block rates in nats/s/Hz plus the per-phase SINR tables and
    the extracted assignments."""

    ul_rates: np.ndarray        # (L,)
    dl_rates: np.ndarray        # (K,)
    sum_rate: float
    min_scaled_rate: float      # min over {R_l^u, R_k^d / eta}
    ul_sinr_table: np.ndarray   # (L, 2)
    dl_sinr_table: np.ndarray   # (K, 2)
    alpha_u: np.ndarray         # (L, 2) binary
    alpha_d: np.ndarray         # (K, 2)

    @property
    def ul_rates_bpshz(self) -> np.ndarray:
        return self.ul_rates / math.log(2.0)

    @property
    def dl_rates_bpshz(self) -> np.ndarray:
        return self.dl_rates / math.log(2.0)

    @property
    def sum_rate_bpshz(self) -> float:
        return self.sum_rate / math.log(2.0)

    @property
    def min_scaled_rate_bpshz(self) -> float:
        return self.min_scaled_rate / math.log(2.0)


def sinr_tables(mode, point: DesignPoint, channels,
                rho2: float) -> tuple[np.ndarray, np.ndarray]:
    """(L, 2) and (K, 2) per-phase SINR tables; robust formulas when given
    a RobustChannelSet."""
    robust = isinstance(channels, RobustChannelSet)
    L = channels.num_ul
    K = channels.num_dl
    gu = np.zeros((L, 2))
    gd = np.zeros((K, 2))
    for j in range(2):
        if robust:
            gu[:, j] = robust_ul_sinr(mode, j, point.w[:, j], point.p[:, j],
                                      channels, rho2)
            gd[:, j] = robust_dl_sinr(mode, j, point.w[:, j], point.p[:, j], channels)
        else:
            gu[:, j] = ul_sinr(mode, j, point.w[:, j], point.p[:, j], channels, rho2)
            gd[:, j] = dl_sinr(mode, j, point.w[:, j], point.p[:, j], channels)
    return gu, gd


def block_rates(mode, point: DesignPoint, channels, rho2: float,
                alpha_u=None, alpha_d=None, eta: float = 1.0) -> RateReport:
    """Whole-block rates R = sum_j alpha_j tau_bar_j ln(1 + gamma_j)."""
    gu, gd = sinr_tables(mode, point, channels, rho2)
    if alpha_u is None:
        alpha_u = np.ones_like(gu, dtype=int)
    if alpha_d is None:
        alpha_d = np.ones_like(gd, dtype=int)
    tau = point.tau_bar
    ul = (alpha_u * tau[None, :] * np.log1p(gu)).sum(axis=1)
    dl = (alpha_d * tau[None, :] * np.log1p(gd)).sum(axis=1)
    scaled = np.concatenate([ul, dl / eta]) if (len(ul) or len(dl)) else np.zeros(1)
    return RateReport(
        ul_rates=ul,
        dl_rates=dl,
        sum_rate=float(ul.sum() + dl.sum()),
        min_scaled_rate=float(scaled.min()),
        ul_sinr_table=gu,
        dl_sinr_table=gd,
        alpha_u=np.asarray(alpha_u, dtype=int),
        alpha_d=np.asarray(alpha_d, dtype=int),
    )


def assign_users(ul_sinr_table: np.ndarray, dl_sinr_table: np.ndarray,
                 gamma_eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Serve a (user, phase) pair iff its optimized SINR reaches gamma_eps."""
    if gamma_eps <= 0:
        raise ValueError("gamma_eps must be positive")
    return ((ul_sinr_table >= gamma_eps).astype(int),
            (dl_sinr_table >= gamma_eps).astype(int))
