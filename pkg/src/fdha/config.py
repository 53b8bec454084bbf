# Scenario configuration. All powers are stored in dB/dBm as given in the
# scenario tables; linear-unit views are exposed as properties so the rest of
# the code works in Watts only.
from __future__ import annotations

import math
from dataclasses import dataclass, replace


def dbm_to_watt(x_dbm: float) -> float:
    return 10.0 ** ((x_dbm - 30.0) / 10.0)


def watt_to_dbm(x_w: float) -> float:
    if x_w <= 0:
        raise ValueError("power must be positive to express in dBm")
    return 10.0 * math.log10(x_w) + 30.0


def db_to_linear(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def linear_to_db(x: float) -> float:
    if x <= 0:
        raise ValueError("value must be positive to express in dB")
    return 10.0 * math.log10(x)


@dataclass(frozen=True)
class SystemConfig:
    """Scalar scenario description of one full-duplex cell.

    Defaults follow the reference simulation table: a 100 m cell, 10 MHz
    bandwidth, -174 dBm/Hz noise PSD, 26/23 dBm BS/user budgets, 16 BS
    antennas (two half-arrays of 8) and 8 uplink + 8 downlink users.
    """

    half_array_size: int = 8          # N, antennas per half-array (BS has 2N)
    num_ul: int = 8                   # L
    num_dl: int = 8                   # K
    cell_radius_m: float = 100.0
    bandwidth_hz: float = 10e6
    noise_psd_dbm: float = -174.0     # per Hz
    p_bs_max_dbm: float = 26.0        # P_t^max, whole-block BS budget
    p_ul_max_dbm: float = 23.0        # P_l^max, per uplink user
    p_bs_phase_dbm: float | None = None   # P_t^inf, per-phase cap (default: budget)
    p_ul_phase_dbm: float | None = None   # P_l^inf
    rho2: float = 1e-3                # residual SI power ratio, linear in [0, 1]
    rician_k_db: float = 5.0          # SI channel Rician factor
    rate_threshold_bpshz: float = 1.0  # per-user QoS floor, both directions
    eta: float = 1.0                  # required DL/UL rate ratio (max-min)
    sca_tol: float = 1e-3             # epsilon, SCA stop threshold
    assign_threshold: float = 1e-3    # gamma_eps, SINR level that counts as served
    csi_delta: float = 0.0            # delta in eps = delta * snr^-upsilon
    csi_upsilon: float = 0.7
    rng_seed: int = 0

    def __post_init__(self):
        if self.half_array_size < 1 or self.num_ul < 1 or self.num_dl < 1:
            raise ValueError("half_array_size, num_ul and num_dl must be >= 1")
        if self.cell_radius_m <= 0:
            raise ValueError("cell_radius_m must be positive")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth_hz must be positive")
        if not 0.0 <= self.rho2 <= 1.0:
            raise ValueError("rho2 must lie in [0, 1]")
        if self.eta < 1.0:
            raise ValueError("eta must be >= 1")
        if self.sca_tol <= 0 or self.assign_threshold <= 0:
            raise ValueError("sca_tol and assign_threshold must be positive")
        if self.rate_threshold_bpshz < 0:
            raise ValueError("rate_threshold_bpshz must be nonnegative")
        if self.csi_delta < 0 or self.csi_upsilon < 0:
            raise ValueError("csi_delta and csi_upsilon must be nonnegative")

    # -- derived scalars (linear units) ------------------------------------

    @property
    def num_antennas(self) -> int:
        """2N, total BS antennas."""
        return 2 * self.half_array_size

    @property
    def p_bs_max_w(self) -> float:
        return dbm_to_watt(self.p_bs_max_dbm)

    @property
    def p_ul_max_w(self) -> float:
        return dbm_to_watt(self.p_ul_max_dbm)

    @property
    def p_bs_phase_w(self) -> float:
        dbm = self.p_bs_max_dbm if self.p_bs_phase_dbm is None else self.p_bs_phase_dbm
        return dbm_to_watt(dbm)

    @property
    def p_ul_phase_w(self) -> float:
        dbm = self.p_ul_max_dbm if self.p_ul_phase_dbm is None else self.p_ul_phase_dbm
        return dbm_to_watt(dbm)

    @property
    def noise_w(self) -> float:
        """Noise power over the full bandwidth: PSD + 10 log10(B), in Watts."""
        return dbm_to_watt(self.noise_psd_dbm + 10.0 * math.log10(self.bandwidth_hz))

    @property
    def rate_threshold_nats(self) -> float:
        return self.rate_threshold_bpshz * math.log(2.0)

    def with_updates(self, **kwargs) -> "SystemConfig":
        return replace(self, **kwargs)
