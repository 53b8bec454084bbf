# Half-array Tx/Rx mode matrices and the reduced search set.
#
# The BS splits its 2N antennas into two half-arrays; omega[i, j] = 1 puts
# half-array i into transmit (downlink) mode during phase j, 0 into receive
# (uplink) mode. Column j is encoded as a 2-bit number with half-array 1 as
# the most significant bit, and the symmetric search over both phase orders
# is collapsed to 8 canonical matrices.
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def f_omega(col) -> int:
    """Encode a binary 2-vector as b'z1z2 (half-array 1 is the MSB)."""
    z1, z2 = int(col[0]), int(col[1])
    if z1 not in (0, 1) or z2 not in (0, 1):
        raise ValueError("mode column entries must be binary")
    return 2 * z1 + z2


def f_omega_inv(code: int) -> np.ndarray:
    """Inverse of :func:`f_omega`."""
    if code not in (0, 1, 2, 3):
        raise ValueError("mode code must lie in {0, 1, 2, 3}")
    return np.array([code >> 1, code & 1], dtype=int)


@dataclass(frozen=True)
class ModeMatrix:
    """One 2x2 binary half-array mode assignment (rows = half-arrays,
    columns = phases)."""

    omega: tuple  # ((w11, w12), (w21, w22))

    def __post_init__(self):
        total = sum(sum(row) for row in self.omega)
        if not 1 <= total <= 3:
            raise ValueError("each direction must be active in at least one phase")

    @classmethod
    def from_codes(cls, hat1: int, hat2: int) -> "ModeMatrix":
        c1 = f_omega_inv(hat1)
        c2 = f_omega_inv(hat2)
        return cls(omega=((int(c1[0]), int(c2[0])), (int(c1[1]), int(c2[1]))))

    @property
    def codes(self) -> tuple[int, int]:
        """(omega_hat_1, omega_hat_2) phase codes."""
        col1 = (self.omega[0][0], self.omega[1][0])
        col2 = (self.omega[0][1], self.omega[1][1])
        return (f_omega(col1), f_omega(col2))

    def column(self, j: int) -> np.ndarray:
        """Binary mode column of phase j (j = 0 or 1)."""
        return np.array([self.omega[0][j], self.omega[1][j]], dtype=int)

    def __str__(self):
        return "mode(%d,%d)" % self.codes


def _in_reduced_set(hat1: int, hat2: int) -> bool:
    """Membership predicate of the symmetry-reduced code set: ascending
    pairs, plus the two equal mixed codes (pure-UL/pure-DL repeats are
    excluded because the other direction would never be served)."""
    return hat1 < hat2 or (hat1 == hat2 and hat1 not in (0, 3))


def enumerate_modes() -> list[ModeMatrix]:
    """The 8 canonical mode matrices, in lexicographic (hat1, hat2) order."""
    modes = []
    for hat1 in range(4):
        for hat2 in range(4):
            if _in_reduced_set(hat1, hat2):
                modes.append(ModeMatrix.from_codes(hat1, hat2))
    return modes


def enumerate_all_valid_modes() -> list[ModeMatrix]:
    """All 14 matrices with 1 <= sum(omega) <= 3, for brute-force sweeps."""
    modes = []
    for hat1 in range(4):
        for hat2 in range(4):
            total = bin(hat1).count("1") + bin(hat2).count("1")
            if 1 <= total <= 3:
                modes.append(ModeMatrix.from_codes(hat1, hat2))
    return modes


@dataclass(frozen=True)
class PhaseMasks:
    """Per-phase antenna masks and direction flags derived from a mode.

    lambda_[j] is the 0/1 transmit mask of length 2N (kron of the mode column
    with ones), lambda_bar[j] its complement (receive mask). beta[j] = 1 means
    phase j has no uplink (both half-arrays transmitting); chi[j] = 1 means no
    downlink. forced_zero_dl_blocks lists (half_array, phase) pairs whose
    beamformer halves are pinned to zero.
    """

    n: int
    lambda_: tuple          # two 0/1 arrays of length 2N
    lambda_bar: tuple
    beta: tuple             # (beta_1, beta_2)
    beta_bar: tuple
    chi: tuple
    forced_zero_dl_blocks: tuple   # ((i, j), ...)
    ul_disabled_phase: tuple       # phases j with beta_j = 1
    dl_disabled_phase: tuple       # phases j with chi_j = 1


def derive_masks(mode: ModeMatrix, n: int) -> PhaseMasks:
    """Build the transmit/receive masks and direction flags for one mode."""
    lam, lam_bar, beta, chi, zero_blocks = [], [], [], [], []
    for j in range(2):
        col = mode.column(j)
        lam_j = np.kron(col, np.ones(n, dtype=int))
        lam.append(lam_j)
        lam_bar.append(1 - lam_j)
        beta.append(int(col[0] & col[1]))
        chi.append(int(not (col[0] | col[1])))
        for i in range(2):
            if col[i] == 0:
                zero_blocks.append((i, j))
    return PhaseMasks(
        n=n,
        lambda_=tuple(lam),
        lambda_bar=tuple(lam_bar),
        beta=tuple(beta),
        beta_bar=tuple(1 - b for b in beta),
        chi=tuple(chi),
        forced_zero_dl_blocks=tuple(zero_blocks),
        ul_disabled_phase=tuple(j for j in range(2) if beta[j]),
        dl_disabled_phase=tuple(j for j in range(2) if chi[j]),
    )
