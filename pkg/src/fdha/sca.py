# Convex minorant construction and the inner-approximation loop for one
# fixed half-array mode.
#
# Every subproblem is assembled in a noise-normalized frame (channels divided
# by the noise standard deviation, noise power = 1) so the conic programs are
# well scaled; beamformers and uplink amplitudes stay in physical units.
# SINRs are invariant under this scaling.
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channels import ChannelSet, RobustChannelSet
from .config import SystemConfig
from .conic import ConicProgram, Row, const_row, row
from .modes import ModeMatrix, PhaseMasks, derive_masks
from .rates import DesignPoint, as_masks

# Conic encodings of the strict inequalities: mu_j > 1, theta > 0 and the
# trust region > 0 get these explicit margins.
MU_MARGIN = 1e-6
THETA_MARGIN = 1e-9
TRUST_MARGIN = 1e-9
# Expansion-point amplitudes below this are lifted before building the
# 2 z / (mu p) linear term, which is singular at p = 0.
P_ANCHOR_FLOOR = 1e-8

FEASIBILITY_MAX_ITERS = 50
SCA_MAX_ITERS = 200
# Residual acceptance for the embedded subproblem solves; the solver's
# practically achievable feasibility on these channel scales.
SCA_FEAS_GATE = 3e-5


# ----------------------------------------------------------------------------
# Scenario: mode- and channel-dependent effective quantities, normalized.
# ----------------------------------------------------------------------------


@dataclass
class Scenario:
    config: SystemConfig
    masks: PhaseMasks
    robust: bool
    active_ul: np.ndarray     # (L, 2) bool: user transmits in phase
    active_dl: np.ndarray     # (K, 2) bool
    htu: list                 # per phase: (L, 2N) effective UL channels
    htd: list                 # per phase: (K, 2N) effective DL channels
    gt: list                  # per phase: (2N, 2N) masked SI channel
    g_abs2: np.ndarray        # (L, K) co-channel power gains
    eps_u: np.ndarray         # (L,) normalized error variances (zeros if exact)
    eps_d: np.ndarray         # (K,)
    eps_lk: np.ndarray        # (L, K)
    rho: float

    @property
    def L(self) -> int:
        return self.active_ul.shape[0]

    @property
    def K(self) -> int:
        return self.active_dl.shape[0]

    @property
    def two_n(self) -> int:
        return self.htu[0].shape[1]

    def ul_users(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.active_ul[:, j])

    def dl_users(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.active_dl[:, j])


def make_scenario(mode, channels, config: SystemConfig,
                  active_ul=None, active_dl=None) -> Scenario:
    """Normalize channels and apply the mode masks and user-assignment
    activity patterns (defaults: every user active in every enabled phase)."""
    masks = as_masks(mode, config.half_array_size)
    robust = isinstance(channels, RobustChannelSet)
    base = channels.true if robust else channels
    L, K = base.h_u.shape[0], base.h_d.shape[0]

    s_bs = math.sqrt(base.sigma2_bs)
    s_dl = math.sqrt(base.sigma2_dl)
    h_u = (channels.hat_h_u if robust else base.h_u) / s_bs
    h_d = (channels.hat_h_d if robust else base.h_d) / s_dl
    g = (channels.hat_g if robust else base.g) / s_dl
    g_bar = base.g_bar / s_bs

    if active_ul is None:
        active_ul = np.ones((L, 2), dtype=bool)
    if active_dl is None:
        active_dl = np.ones((K, 2), dtype=bool)
    active_ul = np.asarray(active_ul, dtype=bool) \
        & np.array([not b for b in masks.beta])[None, :]
    active_dl = np.asarray(active_dl, dtype=bool) \
        & np.array([not c for c in masks.chi])[None, :]

    htu = [h_u * masks.lambda_bar[j][None, :] for j in range(2)]
    htd = [h_d * masks.lambda_[j][None, :] for j in range(2)]
    gt = [masks.lambda_[j][:, None] * g_bar for j in range(2)]

    if robust:
        eps_u = channels.eps_u / base.sigma2_bs
        eps_d = channels.eps_d / base.sigma2_dl
        eps_lk = channels.eps_lk / base.sigma2_dl
    else:
        eps_u = np.zeros(L)
        eps_d = np.zeros(K)
        eps_lk = np.zeros((L, K))

    return Scenario(
        config=config, masks=masks, robust=robust,
        active_ul=active_ul, active_dl=active_dl,
        htu=htu, htd=htd, gt=gt,
        g_abs2=np.abs(g) ** 2, eps_u=eps_u, eps_d=eps_d, eps_lk=eps_lk,
        rho=math.sqrt(config.rho2),
    )


def scenario_ul_sinr(scen: Scenario, j: int, w_j: np.ndarray,
                     p_j: np.ndarray) -> np.ndarray:
    """MMSE-SIC uplink SINRs in the scenario's normalized frame (identical in
    value to the physical-frame rate engine)."""
    L = scen.L
    gamma = np.zeros(L)
    if scen.masks.beta[j]:
        return gamma
    psi = _base_cov(scen, j, w_j, p_j)
    order = np.flatnonzero(scen.active_ul[:, j])[::-1]
    for l in order:
        h = scen.htu[j][l]
        if p_j[l] > 0:
            sol = np.linalg.solve(psi, h)
            gamma[l] = float(p_j[l] ** 2 * np.real(h.conj() @ sol))
            psi = psi + (p_j[l] ** 2) * np.outer(h, h.conj())
    return gamma


def scenario_dl_sinr(scen: Scenario, j: int, w_j: np.ndarray,
                     p_j: np.ndarray) -> np.ndarray:
    K = scen.K
    gamma = np.zeros(K)
    if scen.masks.chi[j]:
        return gamma
    inner = scen.htd[j].conj() @ w_j.T
    sig = np.abs(np.diag(inner)) ** 2
    act = scen.active_dl[:, j].astype(float)
    mui = np.sum(np.abs(inner * act[None, :]) ** 2, axis=1) - act * sig
    cci = (p_j ** 2) @ (scen.g_abs2 + scen.eps_lk)
    w_masked = w_j * scen.masks.lambda_[j][None, :]
    beam_floor = float(np.sum(scen.eps_d * np.sum(np.abs(w_masked) ** 2, axis=1)))
    return np.where(scen.active_dl[:, j], sig / (mui + cci + beam_floor + 1.0), 0.0)


def _base_cov(scen: Scenario, j: int, w_j: np.ndarray, p_j: np.ndarray) -> np.ndarray:
    two_n = scen.two_n
    v = scen.gt[j].conj().T @ w_j.T          # columns: Gt^H w_k
    cov = (scen.rho ** 2) * (v @ v.conj().T) + np.eye(two_n, dtype=complex)
    if scen.robust:
        floor = float(np.sum(p_j ** 2 * scen.eps_u * scen.active_ul[:, j]))
        cov = cov + floor * np.diag(scen.masks.lambda_bar[j].astype(float))
    return cov


# ----------------------------------------------------------------------------
# Minorant coefficients at an expansion point.
# ----------------------------------------------------------------------------


@dataclass
class UlMinorant:
    """Concave quadratic minorant of (1/mu_j) ln(1 + gamma_l) around the
    expansion point: -varpi*mu_j + zeta + p_lin*p_lj - phi(w, p)/mu_anchor,
    with phi(w, p) = sum_l' p_quad[l'] p_l'j^2 + sum_k |w_vec^H w_kj|^2 + const.
    """

    l: int
    j: int
    z: float
    varpi: float
    zeta: float
    p_lin: float
    u: np.ndarray          # rank-one factor of Psi_l^-1 - Psi_(l-1)^-1 (PSD)
    p_quad: np.ndarray     # (L,)
    w_vec: np.ndarray      # (2N,) complex
    const: float
    mu_anchor: float

    def value(self, scen: Scenario, w_j: np.ndarray, p_j: np.ndarray,
              mu_j: float) -> float:
        phi = float(self.p_quad @ (p_j ** 2)) + self.const
        if np.any(self.w_vec):
            phi += float(np.sum(np.abs(w_j.conj() @ self.w_vec) ** 2))
        return (-self.varpi * mu_j + self.zeta + self.p_lin * p_j[self.l]
                - phi / self.mu_anchor)


@dataclass
class DlMinorant:
    """Linear minorant of (1/mu_j) ln(1 + 1/theta_kj) around the expansion
    point: nu + xi*theta_kj + lam*mu_j; `trust` anchors the SINR
    linearization gamma_s(w) = 2*trust*Re{h^H w} - trust^2."""

    k: int
    j: int
    nu: float
    xi: float
    lam: float
    trust: float
    theta_anchor: float
    mu_anchor: float

    def value(self, theta_kj: float, mu_j: float) -> float:
        return self.nu + self.xi * theta_kj + self.lam * mu_j


@dataclass
class PowerLinearization:
    """First-order inner approximation of the quadratic-over-linear credits
    f_c^d(w, mu_2) and f_c^u(p_l, mu_2) in the whole-block power budgets."""

    w_anchor: list            # per phase: (K, 2N) complex
    p_anchor: np.ndarray      # (L, 2)
    mu2_anchor: float
    fc_d_value: float         # f_c^d at the anchor
    fc_u_value: np.ndarray    # (L,)

    def fc_d(self, w, mu2, chi) -> float:
        return (np.sum(np.abs(w[0]) ** 2) + chi[0] * np.sum(np.abs(w[1]) ** 2)) / mu2

    def fc_d_hat(self, w, mu2, chi) -> float:
        t = 2.0 * np.real(np.vdot(self.w_anchor[0], w[0])) / self.mu2_anchor
        t += 2.0 * chi[0] * np.real(np.vdot(self.w_anchor[1], w[1])) / self.mu2_anchor
        return t - self.fc_d_value / self.mu2_anchor * mu2

    def fc_u(self, l, p_l, mu2, beta) -> float:
        return (p_l[0] ** 2 + beta[0] * p_l[1] ** 2) / mu2

    def fc_u_hat(self, l, p_l, mu2, beta) -> float:
        t = 2.0 * self.p_anchor[l, 0] * p_l[0] / self.mu2_anchor
        t += 2.0 * beta[0] * self.p_anchor[l, 1] * p_l[1] / self.mu2_anchor
        return t - self.fc_u_value[l] / self.mu2_anchor * mu2


@dataclass
class MinorantCoeffs:
    """All expansion-point data one convex subproblem needs."""

    scenario: Scenario
    point: DesignPoint
    ul: dict                      # (l, j) -> UlMinorant
    dl: dict                      # (k, j) -> DlMinorant
    power: PowerLinearization


def _dl_coeff(theta: float, mu: float) -> tuple[float, float, float]:
    lg = math.log1p(1.0 / theta)
    nu = 2.0 * lg / mu + 1.0 / ((theta + 1.0) * mu)
    xi = -1.0 / (theta * (theta + 1.0) * mu)
    lam = -lg / mu ** 2
    return nu, xi, lam


def build_minorants(point: DesignPoint, mode, channels, config: SystemConfig,
                    active_ul=None, active_dl=None,
                    scenario: Scenario | None = None) -> MinorantCoeffs:
    """Expansion-point coefficients for Eqs.-style concave minorants of every
    active per-phase rate term, plus the power-budget linearizations.

    The minorants are tight at `point` and never exceed the true surrogate
    rates nearby (inner approximation); amplitudes on enabled phases must be
    positive (callers lift them to P_ANCHOR_FLOOR first).
    """
    scen = scenario if scenario is not None else make_scenario(
        mode, channels, config, active_ul, active_dl)
    ul: dict = {}
    dl: dict = {}

    for j in range(2):
        ul_users = scen.ul_users(j)
        if ul_users.size:
            if np.any(point.p[ul_users, j] <= 0):
                raise ValueError("expansion amplitudes on enabled phases must be "
                                 "positive; lift before building")
            mu_j = float(point.mu[j])
            psi = _base_cov(scen, j, point.w[:, j], point.p[:, j])
            lam_bar = scen.masks.lambda_bar[j].astype(float)
            # Walk the SIC chain backwards so psi is Psi_l when user l is hit.
            chain: dict[int, tuple[float, np.ndarray]] = {}
            for l in ul_users[::-1]:
                h = scen.htu[j][l]
                p_l = float(point.p[l, j])
                y = np.linalg.solve(psi, h)
                z = float(p_l ** 2 * np.real(h.conj() @ y))
                u = p_l * y / math.sqrt(1.0 + z)
                chain[l] = (z, u)
                psi = psi + (p_l ** 2) * np.outer(h, h.conj())
            for l in ul_users:
                z, u = chain[l]
                p_quad = np.zeros(scen.L)
                floor_coef = float(np.real(u.conj() @ (lam_bar * u)))
                for lp in ul_users:
                    if lp >= l:
                        p_quad[lp] += float(np.abs(scen.htu[j][lp].conj() @ u) ** 2)
                    if scen.robust:
                        p_quad[lp] += scen.eps_u[lp] * floor_coef
                w_vec = scen.rho * (scen.gt[j] @ u)
                # In exact arithmetic the constant is ||u||^2 and phi equals z
                # at the expansion point; defining it through that identity
                # keeps tightness exact under ill-conditioned covariances.
                parts = float(p_quad @ (point.p[:, j] ** 2))
                if np.any(w_vec):
                    parts += float(np.sum(np.abs(point.w[:, j].conj() @ w_vec) ** 2))
                ul[(l, j)] = UlMinorant(
                    l=l, j=j, z=z,
                    varpi=math.log1p(z) / mu_j ** 2,
                    zeta=(2.0 * math.log1p(z) - z) / mu_j,
                    p_lin=2.0 * z / (mu_j * float(point.p[l, j])),
                    u=u, p_quad=p_quad, w_vec=w_vec,
                    const=z - parts,
                    mu_anchor=mu_j,
                )

        for k in scen.dl_users(j):
            theta = float(point.theta[k, j])
            mu_j = float(point.mu[j])
            nu, xi, lam = _dl_coeff(theta, mu_j)
            trust = float(np.real(scen.htd[j][k].conj() @ point.w[k, j]))
            if trust <= 0:
                raise ValueError("trust-region anchor Re{h^H w} must be positive")
            dl[(k, j)] = DlMinorant(k=k, j=j, nu=nu, xi=xi, lam=lam,
                                    trust=trust, theta_anchor=theta, mu_anchor=mu_j)

    chi = scen.masks.chi
    beta = scen.masks.beta
    mu2 = float(point.mu[1])
    w_anchor = [point.w[:, j].copy() for j in range(2)]
    fc_d_value = (float(np.sum(np.abs(w_anchor[0]) ** 2))
                  + chi[0] * float(np.sum(np.abs(w_anchor[1]) ** 2))) / mu2
    fc_u_value = (point.p[:, 0] ** 2 + beta[0] * point.p[:, 1] ** 2) / mu2
    power = PowerLinearization(w_anchor=w_anchor, p_anchor=point.p.copy(),
                               mu2_anchor=mu2, fc_d_value=fc_d_value,
                               fc_u_value=fc_u_value)

    return MinorantCoeffs(scenario=scen, point=point.copy(), ul=ul, dl=dl,
                          power=power)


def ul_surrogate_rate(scen: Scenario, j: int, w_j, p_j, mu_j: float,
                      l: int) -> float:
    """(1/mu_j) ln(1 + gamma_l): the quantity the UL minorant bounds."""
    gamma = scenario_ul_sinr(scen, j, w_j, p_j)
    return math.log1p(gamma[l]) / mu_j


def dl_surrogate_rate(theta_kj: float, mu_j: float) -> float:
    """(1/mu_j) ln(1 + 1/theta): the quantity the DL minorant bounds."""
    return math.log1p(1.0 / theta_kj) / mu_j


# ----------------------------------------------------------------------------
# Variable map and program emission.
# ----------------------------------------------------------------------------


@dataclass
class VarMap:
    w: dict          # (k, j) -> (4N,) real indices, interleaved re/im
    p: dict          # (l, j) -> scalar index
    theta: dict      # (k, j) -> scalar index
    mu: np.ndarray   # (2,)
    t_phi: dict      # (l, j) -> epigraph variable over phi
    theta_scale: dict = field(default_factory=dict)  # anchor units per (k, j)
    t_scale: dict = field(default_factory=dict)      # anchor units per (l, j)
    extra: dict = field(default_factory=dict)        # named objective variables

    def theta_row(self, k, j) -> Row:
        return row([self.theta[(k, j)]], [self.theta_scale[(k, j)]])

    def t_row(self, l, j) -> Row:
        return row([self.t_phi[(l, j)]], [self.t_scale[(l, j)]])


def _cplx_rows(vec: np.ndarray, idx: np.ndarray) -> list[Row]:
    """Rows for Re{vec^H w} and Im{vec^H w} over interleaved coordinates."""
    vr, vi = np.real(vec), np.imag(vec)
    re = np.empty(2 * vec.size)
    re[0::2], re[1::2] = vr, vi
    im = np.empty(2 * vec.size)
    im[0::2], im[1::2] = -vi, vr
    return [row(idx, re), row(idx, im)]


def _norm_rows(idx: np.ndarray) -> list[Row]:
    return [row([i], [1.0]) for i in idx]


class _Emitter:
    """Shared constraint emission for the sum-rate, feasibility and max-min
    builds. Groups are tagged so the assembled program can be audited against
    the subproblem census."""

    def __init__(self, coeffs: MinorantCoeffs):
        self.c = coeffs
        self.s = coeffs.scenario
        self.cfg = coeffs.scenario.config
        self.prog = ConicProgram()
        self.vm = self._allocate()

    def _allocate(self) -> VarMap:
        # theta and the phi epigraphs are emitted in units of their
        # expansion-point values, keeping the solver's iterates near 1 even
        # when SINRs span many decades.
        prog, scen = self.prog, self.s
        n = self.cfg.half_array_size
        w, p, theta, t_phi = {}, {}, {}, {}
        theta_scale, t_scale = {}, {}
        for j in range(2):
            for k in scen.dl_users(j):
                w[(k, j)] = prog.add_complex_vars(2 * n)
        for j in range(2):
            for l in scen.ul_users(j):
                p[(l, j)] = prog.add_vars(1)[0]
        mu = prog.add_vars(2)
        for j in range(2):
            for k in scen.dl_users(j):
                theta[(k, j)] = prog.add_vars(1)[0]
                theta_scale[(k, j)] = self.c.dl[(k, j)].theta_anchor
        for j in range(2):
            for l in scen.ul_users(j):
                t_phi[(l, j)] = prog.add_vars(1, decision=False)[0]
                # Epigraphs cover the recentered quadratic, whose value at
                # accepted step sizes is on the scale of the rates.
                t_scale[(l, j)] = 1.0
        return VarMap(w=w, p=p, theta=theta, mu=mu, t_phi=t_phi,
                      theta_scale=theta_scale, t_scale=t_scale)

    # -- rate terms as affine expressions ---------------------------------

    def ul_term(self, l: int, j: int) -> Row:
        # The minorant's linear-in-p piece and the gradient of the quadratic
        # phi are combined analytically around the expansion point, and the
        # epigraph variable covers only the recentered (pure-quadratic) part.
        # At high SINR both raw pieces are enormous while their difference is
        # a few nats; doing the cancellation at build time keeps the program
        # coefficients at the scale of the objective itself.
        m = self.c.ul[(l, j)]
        scen = self.s
        pk = self.c.point.p[:, j]
        wk = self.c.point.w[:, j]
        mu_k = m.mu_anchor
        ts = self.vm.t_scale[(l, j)]
        idx = [self.vm.mu[j], self.vm.t_phi[(l, j)]]
        coef = [-m.varpi, -ts / mu_k]
        const = m.zeta - m.z / mu_k
        for lp in scen.ul_users(j):
            grad = 2.0 * m.p_quad[lp] * pk[lp]
            c_lp = (m.p_lin if lp == l else 0.0) - grad / mu_k
            idx.append(self.vm.p[(lp, j)])
            coef.append(c_lp)
            const += grad * pk[lp] / mu_k
        r = row(idx, coef, const)
        if np.any(m.w_vec):
            for k in scen.dl_users(j):
                c_k = complex(m.w_vec.conj() @ wk[k])    # s^H w_k at the anchor
                if c_k != 0:
                    v = 2.0 * c_k * m.w_vec
                    rr = _cplx_rows(v, self.vm.w[(k, j)])[0]
                    r = _row_cat(r, (rr[0], -rr[1] / mu_k,
                                     float(np.real(np.conj(c_k) * c_k))
                                     * 2.0 / mu_k))
        return r

    def dl_term(self, k: int, j: int) -> Row:
        m = self.c.dl[(k, j)]
        th = self.vm.theta_scale[(k, j)]
        return row([self.vm.theta[(k, j)], self.vm.mu[j]],
                   [m.xi * th, m.lam], m.nu)

    def ul_block(self, l: int) -> Row:
        r = const_row(0.0)
        for j in range(2):
            if (l, j) in self.c.ul:
                r = _row_cat(r, self.ul_term(l, j))
        return r

    def dl_block(self, k: int) -> Row:
        r = const_row(0.0)
        for j in range(2):
            if (k, j) in self.c.dl:
                r = _row_cat(r, self.dl_term(k, j))
        return r

    # -- constraint families ------------------------------------------------

    def emit_base(self):
        self._emit_nonneg_power()           # p >= 0
        self._emit_half_array_caps()        # per-half DL caps / pinned halves
        self._emit_phase_power_caps()       # p^2 <= P_inf
        self._emit_mu_constraints()         # mu > 1 and 1/mu1 + 1/mu2 <= 1
        self._emit_theta_positive()
        self._emit_dl_sinr_cones()
        self._emit_trust_region()
        self._emit_block_budgets()
        self._emit_phi_epigraphs()

    def _emit_nonneg_power(self):
        for (l, j), idx in self.vm.p.items():
            self.prog.new_group("p-nonneg")
            self.prog.add_linear_ge([idx], [1.0], 0.0)

    def _emit_half_array_caps(self):
        n = self.cfg.half_array_size
        cap = math.sqrt(self.cfg.p_bs_phase_w)
        for j in range(2):
            users = self.s.dl_users(j)
            if users.size == 0:
                continue
            for i in range(2):
                self.prog.new_group("half-array-cap")
                coords = np.concatenate([
                    self.vm.w[(k, j)][2 * i * n:2 * (i + 1) * n] for k in users])
                if self.s.masks.lambda_[j][i * n]:
                    self.prog.add_soc(const_row(cap), _norm_rows(coords))
                else:
                    # Receiving half: beamformer block pinned at zero.
                    for c in coords:
                        self.prog.add_linear_eq([c], [1.0], 0.0)

    def _emit_phase_power_caps(self):
        cap = math.sqrt(self.cfg.p_ul_phase_w)
        for (l, j), idx in self.vm.p.items():
            self.prog.new_group("p-phase-cap")
            self.prog.add_linear_le([idx], [1.0], cap)

    def _emit_mu_constraints(self):
        vm, prog = self.vm, self.prog
        for j in range(2):
            prog.new_group("mu-floor")
            prog.add_linear_ge([vm.mu[j]], [1.0], 1.0 + MU_MARGIN)
        prog.new_group("time-split")
        r = prog.add_vars(2, decision=False)
        for j in range(2):
            # r_j >= 1/mu_j  <=>  r_j * mu_j >= 1
            prog.add_rotated(row([r[j]], [1.0]), row([vm.mu[j]], [1.0]),
                             [const_row(1.0)])
        prog.add_linear_le(r, [1.0, 1.0], 1.0)
        vm.extra["inv_mu"] = r

    def _emit_theta_positive(self):
        for (k, j), idx in self.vm.theta.items():
            self.prog.new_group("theta-positive")
            self.prog.add_linear_ge([idx], [self.vm.theta_scale[(k, j)]],
                                    THETA_MARGIN)

    def _gamma_s_row(self, k: int, j: int) -> Row:
        m = self.c.dl[(k, j)]
        re_row = _cplx_rows(self.s.htd[j][k], self.vm.w[(k, j)])[0]
        return (re_row[0], 2.0 * m.trust * re_row[1], -m.trust ** 2)

    def _emit_dl_sinr_cones(self):
        scen, vm = self.s, self.vm
        for j in range(2):
            users = scen.dl_users(j)
            for k in users:
                self.prog.new_group("dl-sinr")
                rows: list[Row] = []
                for kp in users:
                    if kp != k:
                        rows += _cplx_rows(scen.htd[j][k], vm.w[(kp, j)])
                for l in scen.ul_users(j):
                    gain = math.sqrt(scen.g_abs2[l, k] + scen.eps_lk[l, k])
                    if gain > 0:
                        rows.append(row([vm.p[(l, j)]], [gain]))
                if scen.robust:
                    mask = np.flatnonzero(
                        np.repeat(scen.masks.lambda_[j], 2))
                    for kp in users:
                        e = math.sqrt(scen.eps_d[kp])
                        if e > 0:
                            coords = vm.w[(kp, j)][mask]
                            rows += [row([cc], [e]) for cc in coords]
                rows.append(const_row(1.0))    # normalized noise
                self.prog.add_rotated(vm.theta_row(k, j),
                                      self._gamma_s_row(k, j), rows)

    def _emit_trust_region(self):
        for j in range(2):
            for k in self.s.dl_users(j):
                self.prog.new_group("trust-region")
                g = self._gamma_s_row(k, j)
                self.prog.add_linear_ge(g[0], g[1], TRUST_MARGIN - g[2])

    def _emit_block_budgets(self):
        # Whole-block budgets, time-weighted. Whenever only one phase carries
        # the direction, the time-scale coefficient is exactly 1 and the
        # budget is a plain cap; with both phases active and the per-phase cap
        # not exceeding the block budget, the budget is a convex combination
        # bounded by that cap, hence implied. Only in the remaining case
        # (both phases active, per-phase cap above the block budget) does the
        # quadratic-over-linear credit linearization bind; emitting the
        # linearized form in the implied cases would spuriously pin the time
        # split whenever both phases run at their caps.
        scen, vm, prog, cfg = self.s, self.vm, self.prog, self.cfg
        chi, beta = scen.masks.chi, scen.masks.beta
        power = self.c.power
        mu2 = vm.mu[1]

        dl_phases = [j for j in range(2) if self.s.dl_users(j).size > 0]
        if dl_phases:
            prog.new_group("bs-budget")
            cap = math.sqrt(cfg.p_bs_max_w)
            if len(dl_phases) == 1 or cfg.p_bs_phase_w <= cfg.p_bs_max_w:
                for j in dl_phases:
                    coords = np.concatenate(
                        [vm.w[(k, j)] for k in self.s.dl_users(j)])
                    prog.add_soc(const_row(cap), _norm_rows(coords))
            else:
                self._emit_dl_budget_linearized(dl_phases)

        for l in range(scen.L):
            phases = [j for j in range(2) if (l, j) in vm.p]
            if not phases:
                continue
            prog.new_group("ul-budget")
            cap = math.sqrt(cfg.p_ul_max_w)
            if len(phases) == 1 or cfg.p_ul_phase_w <= cfg.p_ul_max_w:
                for j in phases:
                    prog.add_linear_le([vm.p[(l, j)]], [1.0], cap)
            else:
                self._emit_ul_budget_linearized(l, phases)

    def _emit_dl_budget_linearized(self, dl_phases):
        # ||w_1||^2 + chi_2 ||w_1||^2/mu_2 + chi_1 ||w_2||^2 + ||w_2||^2/mu_2
        #   <= P_t^max + fc_d_hat(w, mu_2)
        vm, prog, cfg = self.vm, self.prog, self.cfg
        chi = self.s.masks.chi
        power = self.c.power
        mu2 = vm.mu[1]
        lhs_idx, lhs_coef = [], []
        for j in dl_phases:
            coords = np.concatenate([vm.w[(k, j)] for k in self.s.dl_users(j)])
            direct = 1.0 if j == 0 else chi[0]
            overmu = chi[1] if j == 0 else 1.0
            if direct > 0:
                s_j = prog.add_vars(1, decision=False)[0]
                prog.add_rotated(row([s_j], [1.0]), const_row(1.0),
                                 _norm_rows(coords))
                lhs_idx.append(s_j)
                lhs_coef.append(direct)
            if overmu > 0:
                q_j = prog.add_vars(1, decision=False)[0]
                prog.add_rotated(row([q_j], [1.0]), row([mu2], [1.0]),
                                 _norm_rows(coords))
                lhs_idx.append(q_j)
                lhs_coef.append(overmu)
            factor = 1.0 if j == 0 else chi[0]
            if factor > 0:
                anchor = power.w_anchor[j]
                for k in self.s.dl_users(j):
                    rr = _cplx_rows(anchor[k], vm.w[(k, j)])[0]
                    lhs_idx.extend(rr[0])
                    lhs_coef.extend(-2.0 * factor / power.mu2_anchor * rr[1])
        lhs_idx.append(mu2)
        lhs_coef.append(power.fc_d_value / power.mu2_anchor)
        prog.add_linear_le(lhs_idx, lhs_coef, cfg.p_bs_max_w)

    def _emit_ul_budget_linearized(self, l, phases):
        # (1 + beta_2/mu_2) p_1^2 + (1/mu_2 + beta_1) p_2^2
        #   <= P_l^max + fc_u_hat(p, mu_2)
        vm, prog, cfg = self.vm, self.prog, self.cfg
        beta = self.s.masks.beta
        power = self.c.power
        mu2 = vm.mu[1]
        lhs_idx, lhs_coef = [], []
        for j in phases:
            direct = 1.0 if j == 0 else beta[0]
            overmu = beta[1] if j == 0 else 1.0
            if direct > 0:
                sp = prog.add_vars(1, decision=False)[0]
                prog.add_rotated(row([sp], [1.0]), const_row(1.0),
                                 [row([vm.p[(l, j)]], [1.0])])
                lhs_idx.append(sp)
                lhs_coef.append(direct)
            if overmu > 0:
                qp = prog.add_vars(1, decision=False)[0]
                prog.add_rotated(row([qp], [1.0]), row([mu2], [1.0]),
                                 [row([vm.p[(l, j)]], [1.0])])
                lhs_idx.append(qp)
                lhs_coef.append(overmu)
            factor = 1.0 if j == 0 else beta[0]
            if factor > 0:
                lhs_idx.append(vm.p[(l, j)])
                lhs_coef.append(-2.0 * factor * power.p_anchor[l, j]
                                / power.mu2_anchor)
        lhs_idx.append(mu2)
        lhs_coef.append(power.fc_u_value[l] / power.mu2_anchor)
        prog.add_linear_le(lhs_idx, lhs_coef, cfg.p_ul_max_w)

    def _emit_phi_epigraphs(self):
        # t >= quadratic part of phi recentered at the expansion point; the
        # anchor value and gradient live in ul_term.
        scen, vm, prog = self.s, self.vm, self.prog
        pk = self.c.point.p
        wk = self.c.point.w
        for (l, j), m in self.c.ul.items():
            prog.new_group("phi-epigraph", census=False)
            rows: list[Row] = []
            for lp in scen.ul_users(j):
                coef = math.sqrt(m.p_quad[lp])
                if coef > 0:
                    rows.append(row([vm.p[(lp, j)]], [coef],
                                    -coef * pk[lp, j]))
            if np.any(m.w_vec):
                for k in scen.dl_users(j):
                    re_row, im_row = _cplx_rows(m.w_vec, vm.w[(k, j)])
                    anchor = complex(m.w_vec.conj() @ wk[k, j])
                    rows.append((re_row[0], re_row[1], -anchor.real))
                    rows.append((im_row[0], im_row[1], -anchor.imag))
            if not rows:
                rows = [const_row(0.0)]
            prog.add_quadratic_epigraph(None, rows, vm.t_row(l, j))

    # -- objective helpers ----------------------------------------------------

    def add_row_objective(self, r: Row):
        if r[0].size:
            self.prog.add_objective_term(r[0], r[1])
        self.prog.objective_constant += r[2]


def _row_cat(a: Row, b: Row) -> Row:
    return (np.concatenate([a[0], b[0]]), np.concatenate([a[1], b[1]]), a[2] + b[2])


def build_sr_subproblem(coeffs: MinorantCoeffs, mode, config: SystemConfig
                        ) -> tuple[ConicProgram, VarMap]:
    """Convex sum-rate subproblem: maximize the summed minorants under the
    power, time and QoS constraint families."""
    em = _Emitter(coeffs)
    em.emit_base()
    qos = config.rate_threshold_nats
    for l in range(em.s.L):
        r = em.ul_block(l)
        if r[0].size:
            em.add_row_objective(r)
            em.prog.new_group("qos-ul")
            em.prog.add_linear_ge(r[0], r[1], qos - r[2])
    for k in range(em.s.K):
        r = em.dl_block(k)
        if r[0].size:
            em.add_row_objective(r)
            em.prog.new_group("qos-dl")
            em.prog.add_linear_ge(r[0], r[1], qos - r[2])
    return em.prog, em.vm


def build_feasibility_subproblem(coeffs: MinorantCoeffs, mode,
                                 config: SystemConfig
                                 ) -> tuple[ConicProgram, VarMap]:
    """QoS bootstrap: maximize the worst QoS slack; a positive optimum is a
    strictly feasible starting point for the sum-rate subproblem."""
    em = _Emitter(coeffs)
    em.emit_base()
    rho_var = em.prog.add_vars(1)[0]
    em.vm.extra["slack"] = rho_var
    em.prog.add_objective_term([rho_var], [1.0])
    qos = config.rate_threshold_nats
    for l in range(em.s.L):
        r = em.ul_block(l)
        if r[0].size:
            em.prog.new_group("qos-ul")
            em.prog.add_linear_ge(np.append(r[0], rho_var),
                                  np.append(r[1], -1.0), qos - r[2])
    for k in range(em.s.K):
        r = em.dl_block(k)
        if r[0].size:
            em.prog.new_group("qos-dl")
            em.prog.add_linear_ge(np.append(r[0], rho_var),
                                  np.append(r[1], -1.0), qos - r[2])
    return em.prog, em.vm


def build_maxmin_subproblem(coeffs: MinorantCoeffs, mode, config: SystemConfig,
                            eta: float) -> tuple[ConicProgram, VarMap]:
    """Max-min subproblem: maximize the common-rate slack, with downlink
    blocks required to reach eta times the slack."""
    em = _Emitter(coeffs)
    em.emit_base()
    phi_var = em.prog.add_vars(1)[0]
    em.vm.extra["phi"] = phi_var
    em.prog.add_objective_term([phi_var], [1.0])
    for l in range(em.s.L):
        r = em.ul_block(l)
        if r[0].size:
            em.prog.new_group("minrate-ul")
            em.prog.add_linear_ge(np.append(r[0], phi_var),
                                  np.append(r[1], -1.0), -r[2])
    for k in range(em.s.K):
        r = em.dl_block(k)
        if r[0].size:
            em.prog.new_group("minrate-dl")
            em.prog.add_linear_ge(np.append(r[0], phi_var),
                                  np.append(r[1], -eta), -r[2])
    return em.prog, em.vm


# ----------------------------------------------------------------------------
# Initial point and the SCA loop.
# ----------------------------------------------------------------------------


def initial_point(mode, channels, config: SystemConfig,
                  active_ul=None, active_dl=None,
                  scenario: Scenario | None = None) -> DesignPoint:
    """Equal-split starting iterate: half of every budget, masked matched
    filters with positive real inner products, mu = (2, 2)."""
    scen = scenario if scenario is not None else make_scenario(
        mode, channels, config, active_ul, active_dl)
    L, K, two_n = scen.L, scen.K, scen.two_n
    masks = scen.masks
    mu = np.array([2.0, 2.0])
    tau_bar = np.array([0.5, 0.5])

    p = np.zeros((L, 2))
    for l in range(L):
        phases = [j for j in range(2) if scen.active_ul[l, j]]
        if not phases:
            continue
        total_time = sum(tau_bar[j] + masks.beta[1 - j] * tau_bar[1 - j]
                         for j in phases)
        share = 0.5 * config.p_ul_max_w / total_time
        for j in phases:
            p[l, j] = math.sqrt(min(share, 0.5 * config.p_ul_phase_w))

    w = np.zeros((K, 2, two_n), dtype=complex)
    dl_phases = [j for j in range(2) if scen.dl_users(j).size > 0]
    if dl_phases:
        total_time = sum(tau_bar[j] + masks.chi[1 - j] * tau_bar[1 - j]
                         for j in dl_phases)
        per_phase = min(0.5 * config.p_bs_max_w / total_time,
                        0.5 * config.p_bs_phase_w)
        for j in dl_phases:
            users = scen.dl_users(j)
            share = per_phase / users.size
            for k in users:
                h = scen.htd[j][k]
                norm = np.linalg.norm(h)
                if norm > 0:
                    w[k, j] = math.sqrt(share) * h / norm

    theta = np.full((K, 2), 1e6)
    for j in range(2):
        gamma = scenario_dl_sinr(scen, j, w[:, j], p[:, j])
        for k in scen.dl_users(j):
            if gamma[k] > 0:
                theta[k, j] = 1.0 / gamma[k]
    return DesignPoint(w=w, p=p, mu=mu, theta=theta)


@dataclass
class ScaTrace:
    """Per-iteration record of one inner-approximation run."""

    mode_codes: tuple
    objectives: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    solver_stats: list = field(default_factory=list)   # (status, iters, wall_s)
    feasibility_objectives: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.objectives)


def _extract_point(x: np.ndarray, vm: VarMap, scen: Scenario) -> DesignPoint:
    L, K, two_n = scen.L, scen.K, scen.two_n
    n = scen.config.half_array_size
    w = np.zeros((K, 2, two_n), dtype=complex)
    for (k, j), idx in vm.w.items():
        vals = x[idx]
        w[k, j] = vals[0::2] + 1j * vals[1::2]
        for (i, jj) in scen.masks.forced_zero_dl_blocks:
            if jj == j:
                w[k, j, i * n:(i + 1) * n] = 0.0
    p = np.zeros((L, 2))
    for (l, j), idx in vm.p.items():
        p[l, j] = max(float(x[idx]), 0.0)
    mu = np.array([float(x[vm.mu[0]]), float(x[vm.mu[1]])])
    mu = np.maximum(mu, 1.0 + MU_MARGIN)
    # Keep the phase-1 surrogate time saturated at its bound 1 - 1/mu_2, the
    # convention under which tau is recovered from mu_2 alone.
    mu[0] = max(1.0 / (1.0 - 1.0 / mu[1]), 1.0 + MU_MARGIN)
    theta = np.full((K, 2), 1e6)
    for (k, j), idx in vm.theta.items():
        theta[k, j] = max(float(x[idx]) * vm.theta_scale[(k, j)], THETA_MARGIN)
    return DesignPoint(w=w, p=p, mu=mu, theta=theta)


def _lift_anchors(point: DesignPoint, scen: Scenario) -> DesignPoint:
    out = point.copy()
    for j in range(2):
        for l in scen.ul_users(j):
            if out.p[l, j] < P_ANCHOR_FLOOR:
                out.p[l, j] = P_ANCHOR_FLOOR
    return out


def _nu_bounds(scen: Scenario, point: DesignPoint) -> tuple[float, float]:
    """Feasible interval for nu = 1/mu_2 from the mu margins and the
    time-weighted block budgets at the point's fixed powers.

    With tau_bar = (1 - nu, nu), the budget weights are
    tau_0 = (1 - nu) + flag_1 * nu and tau_1 = nu + flag_0 * (1 - nu), using
    chi flags for the BS budget and beta flags for the per-user budgets.
    """
    cfg = scen.config
    masks = scen.masks
    lo = MU_MARGIN / (1.0 + MU_MARGIN)
    hi = 1.0 / (1.0 + MU_MARGIN)

    def clip(a: float, b: float, c: float):
        # a + b * nu <= c
        nonlocal lo, hi
        if b > 0:
            hi = min(hi, (c - a) / b)
        elif b < 0:
            lo = max(lo, (c - a) / b)
        elif a > c:
            lo, hi = 1.0, 0.0

    chi, beta = masks.chi, masks.beta
    s = [float(np.sum(np.abs(point.w[:, j]) ** 2)) for j in range(2)]
    clip(s[0] + s[1] * chi[0],
         s[0] * (chi[1] - 1) + s[1] * (1 - chi[0]),
         cfg.p_bs_max_w)
    for l in range(scen.L):
        p2 = [float(point.p[l, j] ** 2) for j in range(2)]
        clip(p2[0] + p2[1] * beta[0],
             p2[0] * (beta[1] - 1) + p2[1] * (1 - beta[0]),
             cfg.p_ul_max_w)
    return lo, hi


def _refresh_time_split(point: DesignPoint, scen: Scenario, kind: str,
                        eta: float, qos_nats: float) -> DesignPoint:
    """Exact one-dimensional update of the phase split at fixed beamformers
    and powers. Block rates and every constraint are affine in nu = 1/mu_2,
    so the best split is computable directly; re-anchoring there removes the
    step-size damping the time variable inherits from its linearized rate
    terms. The refreshed point is feasible and never worse, preserving the
    monotone-objective property. Reciprocal-SINR anchors are refreshed to
    the exact current values at the same time."""
    gu = np.column_stack([scenario_ul_sinr(scen, j, point.w[:, j], point.p[:, j])
                          for j in range(2)])
    gd = np.column_stack([scenario_dl_sinr(scen, j, point.w[:, j], point.p[:, j])
                          for j in range(2)])
    au = np.log1p(gu) * scen.active_ul
    ad = np.log1p(gd) * scen.active_dl

    lo, hi = _nu_bounds(scen, point)
    if lo > hi:
        return point

    def rates(nu: float):
        tau = np.array([1.0 - nu, nu])
        return au @ tau, ad @ tau

    users = [r for r in np.vstack([au, ad]) if np.any(r)]
    if kind in ("sr", "robust_sr"):
        if qos_nats > 0:
            for r in users:
                # (r0 - r1) handled by the same affine clip as in _nu_bounds
                a, b = r[0], r[1] - r[0]
                if b > 0:
                    lo = max(lo, (qos_nats - a) / b)
                elif b < 0:
                    hi = min(hi, (qos_nats - a) / b)
                elif a < qos_nats:
                    lo, hi = 1.0, 0.0
            if lo > hi:
                return point
        total = au.sum(axis=0) + ad.sum(axis=0)
        slope = total[1] - total[0]
        nu_star = hi if slope > 0 else lo
    else:
        # Piecewise-linear concave min of scaled rates: candidate optima are
        # the interval ends and the pairwise crossing points.
        lines = [(r[0], r[1] - r[0])
                 for r in list(au) + [r_ / eta for r_ in ad] if np.any(r)]
        cands = {lo, hi}
        for i in range(len(lines)):
            for jj in range(i + 1, len(lines)):
                a1, b1 = lines[i]
                a2, b2 = lines[jj]
                if b1 != b2:
                    x = (a2 - a1) / (b1 - b2)
                    if lo < x < hi:
                        cands.add(x)
        def minval(nu):
            ru, rd = rates(nu)
            vals = np.concatenate([ru[np.any(au, axis=1)],
                                   rd[np.any(ad, axis=1)] / eta])
            return vals.min() if vals.size else 0.0
        nu_star = max(sorted(cands), key=minval)

    current_nu = 1.0 / point.mu[1]

    def objective(nu):
        ru, rd = rates(nu)
        if kind in ("sr", "robust_sr"):
            return ru.sum() + rd.sum()
        vals = np.concatenate([ru[np.any(au, axis=1)],
                               rd[np.any(ad, axis=1)] / eta])
        return vals.min() if vals.size else 0.0

    if not (lo <= current_nu <= hi) or objective(nu_star) >= objective(current_nu):
        nu = float(np.clip(nu_star, lo, hi))
    else:
        nu = current_nu

    out = point.copy()
    out.mu = np.array([max(1.0 / (1.0 - nu), 1.0 + MU_MARGIN),
                       max(1.0 / nu, 1.0 + MU_MARGIN)])
    for j in range(2):
        for k in scen.dl_users(j):
            if gd[k, j] > 0:
                out.theta[k, j] = 1.0 / gd[k, j]
    return out


def _point_feasible(point: DesignPoint, scen: Scenario, qos_nats: float) -> bool:
    """Exact feasibility of an iterate: power budgets, caps, trust anchors
    and (when requested) the true-rate QoS floors."""
    cfg = scen.config
    masks = scen.masks
    tau = point.tau_bar
    tol = 1e-9
    if np.any(point.p < -tol):
        return False
    for j in range(2):
        for l in scen.ul_users(j):
            if point.p[l, j] ** 2 > cfg.p_ul_phase_w * (1 + 1e-9):
                return False
        users = scen.dl_users(j)
        if users.size:
            for i in range(2):
                blk = point.w[users, j][:, i * masks.n:(i + 1) * masks.n]
                cap = cfg.p_bs_phase_w * masks.lambda_[j][i * masks.n]
                if np.sum(np.abs(blk) ** 2) > cap + 1e-12:
                    return False
            for k in users:
                if np.real(scen.htd[j][k].conj() @ point.w[k, j]) <= 0:
                    return False
    s = [float(np.sum(np.abs(point.w[:, j]) ** 2)) for j in range(2)]
    t_d = [tau[j] + masks.chi[1 - j] * tau[1 - j] for j in range(2)]
    if t_d[0] * s[0] + t_d[1] * s[1] > cfg.p_bs_max_w * (1 + 1e-9):
        return False
    t_u = [tau[j] + masks.beta[1 - j] * tau[1 - j] for j in range(2)]
    for l in range(scen.L):
        tot = sum(t_u[j] * point.p[l, j] ** 2 for j in range(2))
        if tot > cfg.p_ul_max_w * (1 + 1e-9):
            return False
    if qos_nats > 0:
        ru, rd = _true_block_rates(point, scen)
        served_u = np.any(scen.active_ul, axis=1)
        served_d = np.any(scen.active_dl, axis=1)
        if np.any(ru[served_u] < qos_nats * (1 - 1e-9)):
            return False
        if np.any(rd[served_d] < qos_nats * (1 - 1e-9)):
            return False
    return True


def _true_block_rates(point: DesignPoint, scen: Scenario):
    tau = point.tau_bar
    gu = np.column_stack([scenario_ul_sinr(scen, j, point.w[:, j], point.p[:, j])
                          for j in range(2)])
    gd = np.column_stack([scenario_dl_sinr(scen, j, point.w[:, j], point.p[:, j])
                          for j in range(2)])
    ru = (np.log1p(gu) * scen.active_ul) @ tau
    rd = (np.log1p(gd) * scen.active_dl) @ tau
    return ru, rd


def _true_objective(point: DesignPoint, scen: Scenario, kind: str,
                    eta: float) -> float:
    ru, rd = _true_block_rates(point, scen)
    if kind in ("sr", "robust_sr"):
        return float(ru.sum() + rd.sum())
    vals = np.concatenate([ru[np.any(scen.active_ul, axis=1)],
                           rd[np.any(scen.active_dl, axis=1)] / eta])
    return float(vals.min()) if vals.size else 0.0


LINE_SEARCH_STEPS = (2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0)


def _project_caps(point: DesignPoint, scen: Scenario) -> DesignPoint:
    """Rescale amplitudes and beamformer halves back inside the power caps.
    Steps that ride along an active cap overshoot it proportionally to the
    extension; pulling the overshoot back keeps the useful component."""
    cfg = scen.config
    masks = scen.masks
    n = masks.n
    out = point.copy()
    cap_p = math.sqrt(cfg.p_ul_phase_w)
    np.clip(out.p, 0.0, cap_p, out=out.p)
    tau = out.tau_bar
    t_u = [tau[j] + masks.beta[1 - j] * tau[1 - j] for j in range(2)]
    for l in range(scen.L):
        tot = sum(t_u[j] * out.p[l, j] ** 2 for j in range(2))
        if tot > cfg.p_ul_max_w:
            out.p[l] *= math.sqrt(cfg.p_ul_max_w / tot)
    for j in range(2):
        users = scen.dl_users(j)
        if users.size == 0:
            continue
        for i in range(2):
            if masks.lambda_[j][i * n] == 0:
                continue
            used = float(np.sum(np.abs(out.w[users, j][:, i * n:(i + 1) * n]) ** 2))
            if used > cfg.p_bs_phase_w:
                out.w[users, j, i * n:(i + 1) * n] *= \
                    math.sqrt(cfg.p_bs_phase_w / used)
    s = [float(np.sum(np.abs(out.w[:, j]) ** 2)) for j in range(2)]
    t_d = [tau[j] + masks.chi[1 - j] * tau[1 - j] for j in range(2)]
    used = t_d[0] * s[0] + t_d[1] * s[1]
    if used > cfg.p_bs_max_w:
        out.w *= math.sqrt(cfg.p_bs_max_w / used)
    return out


def _extend_step(prev: DesignPoint, new: DesignPoint, scen: Scenario,
                 kind: str, eta: float, qos_nats: float) -> DesignPoint:
    """Geometric extension of the accepted subproblem step in (w, p).

    The concave-quadratic rate minorants are much more curved than the true
    rates at high SINR, so the subproblem's own step can be a tiny fraction
    of what the true objective supports in the same direction; extending the
    step while it keeps improving (and stays exactly feasible, after pulling
    cap overshoots back) removes that damping. The extension never accepts a
    point worse than the subproblem's own solution.
    """
    dw = new.w - prev.w
    dp = new.p - prev.p
    if np.max(np.abs(dw)) == 0 and np.max(np.abs(dp)) == 0:
        return new
    best, best_val = new, _true_objective(new, scen, kind, eta)
    # Separate rays matter: a coordinate oscillating at solver-noise level
    # reverses the joint direction every iteration and would mask genuine
    # progress in the others.
    for ray_w, ray_p in ((dw, dp), (None, dp), (dw, None)):
        ray_best_val = best_val
        for t in LINE_SEARCH_STEPS:
            cand = new.copy()
            if ray_w is not None:
                cand.w = prev.w + t * ray_w
            if ray_p is not None:
                cand.p = np.clip(prev.p + t * ray_p, 0.0, None)
            cand = _project_caps(cand, scen)
            if not _point_feasible(cand, scen, qos_nats):
                break
            val = _true_objective(cand, scen, kind, eta)
            if val <= ray_best_val:
                break
            ray_best_val = val
            if val > best_val:
                best, best_val = cand, val
    return best


# ----------------------------------------------------------------------------
# Half-duplex single-direction blocks: full 2N array, whole normalized block,
# no self- or co-channel interference. Reuses the minorant algebra with the
# time variable fixed at 1.
# ----------------------------------------------------------------------------


def _hd_channels(direction: str, channels):
    robust = isinstance(channels, RobustChannelSet)
    base = channels.true if robust else channels
    if direction == "ul":
        h = (channels.hat_h_u if robust else base.h_u) / math.sqrt(base.sigma2_bs)
        eps = (channels.eps_u / base.sigma2_bs if robust
               else np.zeros(h.shape[0]))
    else:
        h = (channels.hat_h_d if robust else base.h_d) / math.sqrt(base.sigma2_dl)
        eps = (channels.eps_d / base.sigma2_dl if robust
               else np.zeros(h.shape[0]))
    return h, eps


def _hd_ul_rates(h: np.ndarray, eps: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Full-block MMSE-SIC rates (nats) at unit noise with optional error
    floor, ascending decode order."""
    L, two_n = h.shape
    floor = float(np.sum(p ** 2 * eps))
    psi = (1.0 + floor) * np.eye(two_n, dtype=complex)
    rates = np.zeros(L)
    for l in range(L - 1, -1, -1):
        if p[l] > 0:
            y = np.linalg.solve(psi, h[l])
            z = float(p[l] ** 2 * np.real(h[l].conj() @ y))
            rates[l] = math.log1p(z)
            psi = psi + (p[l] ** 2) * np.outer(h[l], h[l].conj())
    return rates


def _hd_dl_rates(h: np.ndarray, eps: np.ndarray, w: np.ndarray) -> np.ndarray:
    inner = h.conj() @ w.T
    sig = np.abs(np.diag(inner)) ** 2
    mui = np.sum(np.abs(inner) ** 2, axis=1) - sig
    floor = float(np.sum(eps * np.sum(np.abs(w) ** 2, axis=1)))
    return np.log1p(sig / (mui + floor + 1.0))


def _hd_ul_build(h, eps, p_anchor, qos, cfg: SystemConfig, feasibility: bool):
    L, two_n = h.shape
    prog = ConicProgram()
    p_idx = prog.add_vars(L)
    t_idx = prog.add_vars(L, decision=False)
    cap = math.sqrt(min(cfg.p_ul_max_w, cfg.p_ul_phase_w))
    floor = float(np.sum(p_anchor ** 2 * eps))
    psi = (1.0 + floor) * np.eye(two_n, dtype=complex)
    chain = {}
    for l in range(L - 1, -1, -1):
        y = np.linalg.solve(psi, h[l])
        z = float(p_anchor[l] ** 2 * np.real(h[l].conj() @ y))
        chain[l] = (z, p_anchor[l] * y / math.sqrt(1.0 + z))
        psi = psi + (p_anchor[l] ** 2) * np.outer(h[l], h[l].conj())
    terms = []
    for l in range(L):
        z, u = chain[l]
        p_quad = np.zeros(L)
        floor_coef = float(np.real(u.conj() @ u))            # lambda_bar = I
        for lp in range(L):
            if lp >= l:
                p_quad[lp] += float(np.abs(h[lp].conj() @ u) ** 2)
            p_quad[lp] += eps[lp] * floor_coef
        # minorant at mu = 1: ln(1+z) - z + (2z/p^k) p - phi(p), with phi
        # recentered at the anchor where it equals z exactly.
        idx = [t_idx[l]]
        coef = [-1.0]
        const = math.log1p(z) - 2.0 * z
        p_lin = 2.0 * z / p_anchor[l]
        rows = []
        for lp in range(L):
            grad = 2.0 * p_quad[lp] * p_anchor[lp]
            idx.append(p_idx[lp])
            coef.append((p_lin if lp == l else 0.0) - grad)
            const += grad * p_anchor[lp]
            a = math.sqrt(p_quad[lp])
            if a > 0:
                rows.append(row([p_idx[lp]], [a], -a * p_anchor[lp]))
        prog.new_group("phi-epigraph", census=False)
        prog.add_quadratic_epigraph(None, rows if rows else [const_row(0.0)],
                                    row([t_idx[l]], [1.0]))
        terms.append(row(idx, coef, const))
    for l in range(L):
        prog.new_group("p-nonneg")
        prog.add_linear_ge([p_idx[l]], [1.0], 0.0)
        prog.new_group("p-cap")
        prog.add_linear_le([p_idx[l]], [1.0], cap)
    slack = None
    if feasibility:
        slack = prog.add_vars(1)[0]
        prog.add_objective_term([slack], [1.0])
    for l, r in enumerate(terms):
        if feasibility:
            prog.new_group("qos")
            prog.add_linear_ge(np.append(r[0], slack), np.append(r[1], -1.0),
                               qos - r[2])
        else:
            if r[0].size:
                prog.add_objective_term(r[0], r[1])
            prog.objective_constant += r[2]
            if qos > 0:
                prog.new_group("qos")
                prog.add_linear_ge(r[0], r[1], qos - r[2])
    return prog, p_idx, slack


def _hd_dl_build(h, eps, w_anchor, theta_anchor, qos, cfg: SystemConfig,
                 feasibility: bool):
    K, two_n = h.shape
    prog = ConicProgram()
    w_idx = [prog.add_complex_vars(two_n) for _ in range(K)]
    th_idx = prog.add_vars(K)
    terms = []
    for k in range(K):
        theta = theta_anchor[k]
        lg = math.log1p(1.0 / theta)
        nu = lg + 1.0 / (theta + 1.0)
        xi = -1.0 / (theta * (theta + 1.0))
        terms.append(row([th_idx[k]], [xi * theta], nu))
        trust = float(np.real(h[k].conj() @ w_anchor[k]))
        prog.new_group("theta-positive")
        prog.add_linear_ge([th_idx[k]], [theta], THETA_MARGIN)
        prog.new_group("dl-sinr")
        rows = []
        for kp in range(K):
            if kp != k:
                rows += _cplx_rows(h[k], w_idx[kp])
        for kp in range(K):
            e = math.sqrt(eps[kp])
            if e > 0:
                rows += [row([c], [e]) for c in w_idx[kp]]
        rows.append(const_row(1.0))
        g_re = _cplx_rows(h[k], w_idx[k])[0]
        gs = (g_re[0], 2.0 * trust * g_re[1], -trust ** 2)
        prog.add_rotated(row([th_idx[k]], [theta]), gs, rows)
        prog.new_group("trust-region")
        prog.add_linear_ge(gs[0], gs[1], TRUST_MARGIN - gs[2])
    cap = math.sqrt(cfg.p_bs_max_w)
    prog.new_group("bs-budget")
    prog.add_soc(const_row(cap), _norm_rows(np.concatenate(w_idx)))
    half_cap = math.sqrt(cfg.p_bs_phase_w)
    n = two_n // 2
    for i in range(2):
        prog.new_group("half-array-cap")
        coords = np.concatenate([w[2 * i * n:2 * (i + 1) * n] for w in w_idx])
        prog.add_soc(const_row(half_cap), _norm_rows(coords))
    slack = None
    if feasibility:
        slack = prog.add_vars(1)[0]
        prog.add_objective_term([slack], [1.0])
    for k, r in enumerate(terms):
        if feasibility:
            prog.new_group("qos")
            prog.add_linear_ge(np.append(r[0], slack), np.append(r[1], -1.0),
                               qos - r[2])
        else:
            prog.add_objective_term(r[0], r[1])
            prog.objective_constant += r[2]
            if qos > 0:
                prog.new_group("qos")
                prog.add_linear_ge(r[0], r[1], qos - r[2])
    return prog, (w_idx, th_idx), slack


def hd_block_loop(direction: str, channels, config: SystemConfig,
                  qos_nats: float) -> tuple[np.ndarray | None, str, int]:
    """Optimize one half-duplex block (full array, unit time). Returns the
    per-user block rates in nats, the stop status, and the iteration count."""
    h, eps = _hd_channels(direction, channels)
    n_users = h.shape[0]
    total = 0
    if direction == "ul":
        p = np.full(n_users, math.sqrt(0.5 * min(config.p_ul_max_w,
                                                 config.p_ul_phase_w)))
        state = p
    else:
        per = 0.5 * config.p_bs_max_w / n_users
        w = np.zeros((n_users, h.shape[1]), dtype=complex)
        for k in range(n_users):
            norm = np.linalg.norm(h[k])
            if norm > 0:
                w[k] = math.sqrt(per) * h[k] / norm
        state = w

    def rates_of(st):
        return (_hd_ul_rates(h, eps, st) if direction == "ul"
                else _hd_dl_rates(h, eps, st))

    def build(st, feasibility):
        if direction == "ul":
            anchors = np.maximum(st, P_ANCHOR_FLOOR)
            return _hd_ul_build(h, eps, anchors, qos_nats, config, feasibility)
        gam = np.exp(rates_of(st)) - 1.0
        theta = np.where(gam > 0, 1.0 / np.maximum(gam, 1e-12), 1e6)
        return _hd_dl_build(h, eps, st, theta, qos_nats, config, feasibility)

    def extract(x, handle):
        if direction == "ul":
            return np.clip(x[handle], 0.0, None)
        w_idx, _ = handle
        return np.stack([x[idx][0::2] + 1j * x[idx][1::2] for idx in w_idx])

    if qos_nats > 0:
        ok = False
        for _ in range(FEASIBILITY_MAX_ITERS):
            prog, handle, slack = build(state, True)
            res = prog.solve(feas_gate=SCA_FEAS_GATE)
            total += 1
            if res.status == "infeasible":
                break
            if not res.ok:
                return None, "solver-failure", total
            state = extract(res.x, handle)
            if float(res.x[slack]) > 0:
                ok = True
                break
        if not ok:
            return None, "infeasible", total
    prev = None
    for _ in range(SCA_MAX_ITERS):
        prog, handle, _ = build(state, False)
        res = prog.solve(feas_gate=SCA_FEAS_GATE)
        total += 1
        if not res.ok:
            if prev is not None:
                return rates_of(state), "solver-failure", total
            return None, ("infeasible" if res.status == "infeasible"
                          else "solver-failure"), total
        obj = res.objective
        if prev is not None and obj < prev - 1e-12:
            break
        state = extract(res.x, handle)
        if prev is not None and obj - prev < config.sca_tol:
            return rates_of(state), "converged", total
        prev = obj
    return rates_of(state), ("converged" if prev is not None else "cap-exit"), total


def sca_loop(objective_kind: str, mode, channels, config: SystemConfig,
             active_ul=None, active_dl=None, eta: float | None = None,
             keep_iterates: bool = True) -> tuple[DesignPoint | None, ScaTrace]:
    """Inner-approximation loop for one mode.

    objective_kind: 'sr', 'maxmin' or 'robust_sr' ('robust_sr' simply expects
    a RobustChannelSet; the builds adapt through the scenario). QoS-bearing
    kinds run the feasibility bootstrap first and may stop with
    stop_reason='infeasible'.
    """
    if objective_kind not in ("sr", "maxmin", "robust_sr"):
        raise ValueError("unknown objective kind %r" % objective_kind)
    if objective_kind == "robust_sr" and not isinstance(channels, RobustChannelSet):
        raise ValueError("robust_sr requires a RobustChannelSet")
    scen = make_scenario(mode, channels, config, active_ul, active_dl)
    mode_codes = mode.codes if isinstance(mode, ModeMatrix) else (-1, -1)
    trace = ScaTrace(mode_codes=mode_codes)
    eta = config.eta if eta is None else eta

    point = initial_point(mode, channels, config, scenario=scen)

    with_qos = objective_kind in ("sr", "robust_sr") \
        and config.rate_threshold_nats > 0
    if with_qos:
        feasible = False
        for _ in range(FEASIBILITY_MAX_ITERS):
            coeffs = build_minorants(_lift_anchors(point, scen), mode, channels,
                                     config, scenario=scen)
            prog, vm = build_feasibility_subproblem(coeffs, mode, config)
            res = prog.solve(feas_gate=SCA_FEAS_GATE)
            trace.solver_stats.append((res.status, res.iterations, res.wall_time_s))
            if res.status == "infeasible":
                break
            if not res.ok:
                trace.stop_reason = "solver-failure"
                return None, trace
            slack = float(res.x[vm.extra["slack"]])
            trace.feasibility_objectives.append(slack)
            point = _extract_point(res.x, vm, scen)
            if slack > 0:
                feasible = True
                break
        if not feasible:
            trace.stop_reason = "infeasible"
            return None, trace

    builder = {
        "sr": lambda c: build_sr_subproblem(c, mode, config),
        "robust_sr": lambda c: build_sr_subproblem(c, mode, config),
        "maxmin": lambda c: build_maxmin_subproblem(c, mode, config, eta),
    }[objective_kind]
    qos_nats = config.rate_threshold_nats if with_qos else 0.0

    prev_obj = None
    for _ in range(SCA_MAX_ITERS):
        coeffs = build_minorants(_lift_anchors(point, scen), mode, channels,
                                 config, scenario=scen)
        prog, vm = builder(coeffs)
        res = prog.solve(feas_gate=SCA_FEAS_GATE)
        trace.solver_stats.append((res.status, res.iterations, res.wall_time_s))
        if not res.ok:
            trace.stop_reason = ("infeasible" if res.status == "infeasible"
                                 else "solver-failure")
            if trace.objectives:
                # Keep the best iterate found rather than discarding the
                # whole mode on a late numerical hiccup.
                trace.stop_reason = "solver-failure"
                return point, trace
            return None, trace
        obj = (float(res.x[vm.extra["phi"]]) if objective_kind == "maxmin"
               else res.objective)
        if prev_obj is not None and obj < prev_obj - 1e-12:
            # A lower subproblem optimum certifies the solver's precision is
            # exhausted (exact solves cannot decrease); keep the last iterate.
            trace.stop_reason = "converged"
            return point, trace
        new_point = _extend_step(point, _extract_point(res.x, vm, scen), scen,
                                 objective_kind, eta, qos_nats)
        point = _refresh_time_split(new_point, scen, objective_kind, eta,
                                    qos_nats)
        trace.objectives.append(obj)
        if keep_iterates:
            trace.iterates.append(point.copy())
        if prev_obj is not None and obj - prev_obj < config.sca_tol:
            trace.stop_reason = "converged"
            return point, trace
        prev_obj = obj
    trace.stop_reason = "cap-exit"
    return point, trace
