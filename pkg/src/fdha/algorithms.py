# Top-level solvers: the eight-mode sum-rate sweep, its max-min and robust
# variants, the half-duplex baseline, and the small-scale brute-force oracle.
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .channels import ChannelSet, RobustChannelSet
from .config import SystemConfig
from .modes import ModeMatrix, enumerate_all_valid_modes, enumerate_modes
from .rates import DesignPoint, RateReport, assign_users, block_rates, sinr_tables
from .sca import hd_block_loop, sca_loop

# Objectives closer than this are ties, broken toward the lexicographically
# smallest mode-code pair for reproducible logs.
TIE_TOL = 1e-6


@dataclass
class ModeOutcome:
    status: str                 # converged | infeasible | cap-exit | solver-failure
    objective: float | None
    iterations: int


@dataclass
class Solution:
    kind: str                   # sr | maxmin | robust_sr | hd
    status: str                 # optimal | infeasible | cap-exit | failure
    mode_codes: tuple | None
    point: DesignPoint | None
    report: RateReport | None
    objective: float | None     # best converged surrogate objective
    per_mode: dict = field(default_factory=dict)   # codes -> ModeOutcome
    iterations: int = 0
    wall_time_s: float = 0.0

    @property
    def tau(self) -> float | None:
        return None if self.point is None else self.point.tau

    @property
    def feasible(self) -> bool:
        return self.status != "infeasible" and self.report is not None


_STATUS_RANK = {"converged": "optimal", "cap-exit": "cap-exit",
                "solver-failure": "failure"}


def _mode_sweep(kind: str, channels, config: SystemConfig,
                eta: float | None = None, modes=None,
                active_ul=None, active_dl=None) -> Solution:
    """Run the inner-approximation loop for every candidate mode and keep
    the best converged objective; failures are recorded but never abort."""
    t0 = time.perf_counter()
    modes = enumerate_modes() if modes is None else modes
    per_mode: dict = {}
    best = None     # (objective, codes, point, stop_reason)
    total_iters = 0
    for mode in modes:
        point, trace = sca_loop(kind, mode, channels, config,
                                active_ul=active_ul, active_dl=active_dl,
                                eta=eta, keep_iterates=False)
        obj = trace.objectives[-1] if trace.objectives else None
        total_iters += len(trace.solver_stats)
        per_mode[mode.codes] = ModeOutcome(trace.stop_reason, obj,
                                           trace.iterations)
        if point is None or obj is None:
            continue
        if best is None or obj > best[0] + TIE_TOL or \
                (obj > best[0] - TIE_TOL and mode.codes < best[1]):
            best = (obj, mode.codes, point, trace.stop_reason)

    if best is None:
        all_infeasible = all(o.status == "infeasible" for o in per_mode.values())
        return Solution(kind=kind, status="infeasible" if all_infeasible
                        else "failure", mode_codes=None, point=None,
                        report=None, objective=None, per_mode=per_mode,
                        iterations=total_iters,
                        wall_time_s=time.perf_counter() - t0)

    obj, codes, point, stop = best
    mode = ModeMatrix.from_codes(*codes)
    eta_val = config.eta if eta is None else eta
    gamma_u, gamma_d = sinr_tables(mode, point, channels, config.rho2)
    alpha_u, alpha_d = assign_users(gamma_u, gamma_d, config.assign_threshold)
    report = block_rates(mode, point, channels, config.rho2,
                         alpha_u=alpha_u, alpha_d=alpha_d, eta=eta_val)
    return Solution(kind=kind, status=_STATUS_RANK.get(stop, "failure"),
                    mode_codes=codes, point=point, report=report,
                    objective=obj, per_mode=per_mode, iterations=total_iters,
                    wall_time_s=time.perf_counter() - t0)


def solve_sr(channels, config: SystemConfig) -> Solution:
    """Sum-rate maximization: argmax over the 8 canonical modes."""
    return _mode_sweep("sr", channels, config)


def solve_maxmin(channels, config: SystemConfig, eta: float | None = None
                 ) -> Solution:
    """Max-min rate optimization with DL rates scaled by eta."""
    eta = config.eta if eta is None else eta
    if eta < 1.0:
        raise ValueError("eta must be >= 1")
    return _mode_sweep("maxmin", channels, config, eta=eta)


def solve_robust_sr(robust_channels: RobustChannelSet,
                    config: SystemConfig) -> Solution:
    """Worst-case sum-rate maximization on channel estimates."""
    return _mode_sweep("robust_sr", robust_channels, config)


def hd_baseline(channels, config: SystemConfig) -> Solution:
    """Half-duplex reference: independent UL-only and DL-only problems over
    full blocks with the whole array, reported as the average of the two.

    Each block must deliver twice the per-user rate floor so the long-run
    (two-block) rates meet the same QoS the full-duplex schemes face. Given
    a RobustChannelSet the block problems use the error-floor SINRs.
    """
    t0 = time.perf_counter()
    qos = 2.0 * config.rate_threshold_nats
    ul_rates, ul_status, it_u = hd_block_loop("ul", channels, config, qos)
    dl_rates, dl_status, it_d = hd_block_loop("dl", channels, config, qos)
    iters = it_u + it_d
    per_mode = {"hd-ul": ModeOutcome(ul_status, None, it_u),
                "hd-dl": ModeOutcome(dl_status, None, it_d)}
    if ul_rates is None or dl_rates is None:
        status = ("infeasible" if "infeasible" in (ul_status, dl_status)
                  else "failure")
        return Solution(kind="hd", status=status, mode_codes=None, point=None,
                        report=None, objective=None, per_mode=per_mode,
                        iterations=iters, wall_time_s=time.perf_counter() - t0)
    # Long-run rates: each direction occupies one of two blocks.
    ul = ul_rates / 2.0
    dl = dl_rates / 2.0
    eta = config.eta
    report = RateReport(
        ul_rates=ul,
        dl_rates=dl,
        sum_rate=float(ul.sum() + dl.sum()),
        min_scaled_rate=float(np.concatenate([ul, dl / eta]).min()),
        ul_sinr_table=np.column_stack([np.expm1(ul_rates), np.zeros_like(ul)]),
        dl_sinr_table=np.column_stack([np.zeros_like(dl), np.expm1(dl_rates)]),
        alpha_u=np.column_stack([np.ones(len(ul), dtype=int),
                                 np.zeros(len(ul), dtype=int)]),
        alpha_d=np.column_stack([np.zeros(len(dl), dtype=int),
                                 np.ones(len(dl), dtype=int)]),
    )
    status = "optimal" if (ul_status, dl_status) == ("converged", "converged") \
        else "cap-exit"
    return Solution(kind="hd", status=status, mode_codes=(0, 3), point=None,
                    report=report, objective=report.sum_rate,
                    per_mode=per_mode, iterations=iters,
                    wall_time_s=time.perf_counter() - t0)


def bfs_case_count(num_ul: int, num_dl: int) -> int:
    """Raw case count before validity filtering: 16 mode matrices times all
    per-user phase-assignment patterns."""
    return 16 * 4 ** num_ul * 4 ** num_dl


def bfs_oracle(channels, config: SystemConfig, modes=None,
               max_users: int = 2, max_half_array: int = 2) -> Solution:
    """Exhaustive sweep over all valid mode matrices and user-assignment
    patterns, each solved with the same continuous machinery. Exponential;
    guarded to tiny instances and meant as a test oracle.
    """
    L, K, N = config.num_ul, config.num_dl, config.half_array_size
    if L > max_users or K > max_users or N > max_half_array:
        raise ValueError("brute-force oracle limited to L, K <= %d and N <= %d"
                         % (max_users, max_half_array))
    t0 = time.perf_counter()
    modes = enumerate_all_valid_modes() if modes is None else modes
    qos = config.rate_threshold_nats
    per_case: dict = {}
    best = None
    total_iters = 0
    patterns_u = list(itertools.product([0, 1], repeat=2))
    for mode in modes:
        for alpha_u in itertools.product(patterns_u, repeat=L):
            au = np.array(alpha_u, dtype=bool)
            for alpha_d in itertools.product(patterns_u, repeat=K):
                ad = np.array(alpha_d, dtype=bool)
                if qos > 0:
                    # A user served in no phase can never meet its floor.
                    beta = [all(mode.column(j)) for j in range(2)]
                    chi = [not any(mode.column(j)) for j in range(2)]
                    ul_ok = [any(au[l, j] and not beta[j] for j in range(2))
                             for l in range(L)]
                    dl_ok = [any(ad[k, j] and not chi[j] for j in range(2))
                             for k in range(K)]
                    if not (all(ul_ok) and all(dl_ok)):
                        continue
                point, trace = sca_loop("sr", mode, channels, config,
                                        active_ul=au, active_dl=ad,
                                        keep_iterates=False)
                obj = trace.objectives[-1] if trace.objectives else None
                total_iters += len(trace.solver_stats)
                key = (mode.codes, tuple(au.ravel()), tuple(ad.ravel()))
                per_case[key] = ModeOutcome(trace.stop_reason, obj,
                                            trace.iterations)
                if point is None or obj is None:
                    continue
                if best is None or obj > best[0]:
                    best = (obj, mode, point, au, ad)
    if best is None:
        return Solution(kind="sr", status="infeasible", mode_codes=None,
                        point=None, report=None, objective=None,
                        per_mode=per_case, iterations=total_iters,
                        wall_time_s=time.perf_counter() - t0)
    obj, mode, point, au, ad = best
    report = block_rates(mode, point, channels, config.rho2,
                         alpha_u=au.astype(int), alpha_d=ad.astype(int),
                         eta=config.eta)
    return Solution(kind="sr", status="optimal", mode_codes=mode.codes,
                    point=point, report=report, objective=obj,
                    per_mode=per_case, iterations=total_iters,
                    wall_time_s=time.perf_counter() - t0)
