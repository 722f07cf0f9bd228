"""
Operators of the discrete adiabatic construction.

Index conventions (all stacks are numpy arrays):

* node-indexed stacks have length N + 1 and entry n belongs to s_n:
  ``U_exact``, ``U_kato``, ``U_dyn``, ``W``, ``V``, ``Z``;
* ``UW`` has length N and ``UW[n - 1]`` is the step operator U^W_n;
* ``R`` and ``R2`` have length N + 1; ``R[n]`` is meaningful for 1 <= n <= N
  and ``R2[n]`` for 1 <= n <= N - 1, the remaining slots hold zeros.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import defaults
from .errors import (
    ConsistencyFailure,
    EndpointFallback,
    GapViolation,
    LabelMismatch,
    LengthMismatch,
    RankChange,
)
from .matcore import dagger, expm_hermitian, frobenius, herm_eig, identity, op_norms
from .spectral import (
    TWO_PI,
    SpectralFrame,
    assert_gap,
    decompose_many,
    track_branches,
)

CHUNK = 4096  # points per batched eigensolve in the propagator


def _wrap(x):
    return x - TWO_PI * np.round(x / TWO_PI)


def block_norms(A: np.ndarray, kind: str = "op") -> np.ndarray:
    if kind == "op":
        return op_norms(A)
    if kind == "fro":
        return frobenius(A)
    raise ValueError(f"unknown norm {kind!r}")


# ---------------------------------------------------------------------------
# exact evolution


def evolve_exact(family, schedule, maps: np.ndarray | None = None) -> np.ndarray:
    """``U_0 = I``, ``U_n = U(s_n) U_{n-1}``."""
    if maps is None:
        maps = family.evaluate_many(schedule.nodes)
    d = maps.shape[-1]
    out = np.empty((schedule.N + 1, d, d), dtype=np.complex128)
    out[0] = identity(d)
    for n in range(1, schedule.N + 1):
        out[n] = maps[n] @ out[n - 1]
    return out


# ---------------------------------------------------------------------------
# Kato generator


# finite-difference stencils: offset (in units of h) -> weight (divided by h)
_CENTRAL = {-1.0: -0.5, 1.0: 0.5}
_CENTRAL_RICHARDSON = {-1.0: 1 / 6, -0.5: -4 / 3, 0.5: 4 / 3, 1.0: -1 / 6}
_FORWARD = {0.0: -1.5, 1.0: 2.0, 2.0: -0.5}
_BACKWARD = {0.0: 1.5, -1.0: -2.0, -2.0: 0.5}


def _uniform(decs, where: str):
    ranks = decs[0][2]
    for _, _, r in decs:
        if r != ranks:
            raise RankChange(f"branch structure changes {ranks} -> {r} {where}")
    return np.array([a for a, _, _ in decs]), np.array([p for _, p, _ in decs]), ranks


def _align(P_ref: np.ndarray, P: np.ndarray, margin: float = defaults.TRACKING_MARGIN) -> np.ndarray:
    """Permute branches of ``P`` (B, J, d, d) to best match ``P_ref``."""
    J = P.shape[1]
    if J == 1:
        return P
    O = np.einsum("bxij,byji->bxy", P_ref, P).real
    perm = np.argmax(O, axis=2)
    if not np.all(np.sort(perm, axis=1) == np.arange(J)):
        raise LabelMismatch("projector labels at s +- h do not pair up with those at s")
    best = np.take_along_axis(O, perm[..., None], axis=2)[..., 0]
    masked = O.copy()
    np.put_along_axis(masked, perm[..., None], -np.inf, axis=2)
    if np.any(best - masked.max(axis=2) < margin):
        raise LabelMismatch("ambiguous projector pairing inside the difference stencil")
    return np.take_along_axis(P, perm[:, :, None, None], axis=1)


def _stencil_for(family, s: float, h: float, richardson: bool) -> dict[float, float]:
    if family.contains(s - h) and family.contains(s + h):
        return _CENTRAL_RICHARDSON if richardson else _CENTRAL
    warnings.warn(f"one-sided projector derivative at s={s:.6g}", EndpointFallback, stacklevel=3)
    if family.contains(s + 2 * h):
        return _FORWARD
    if family.contains(s - 2 * h):
        return _BACKWARD
    raise ValueError(f"derivative step h={h} does not fit inside the family's domain")


def projector_derivatives(family, s, h: float, cluster_tol: float = defaults.CLUSTER_TOL,
                          richardson: bool = False):
    """Projectors and their finite-difference derivatives at points ``s``.

    Returns ``(P, D, ranks)`` with ``P, D`` of shape ``(B, J, d, d)``.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    stencils = [_stencil_for(family, x, h, richardson) for x in s]
    keys = [tuple(sorted(st)) for st in stencils]
    d = family.dim
    P_out = D_out = ranks = None
    for key in dict.fromkeys(keys):
        idx = np.array([i for i, k in enumerate(keys) if k == key])
        stencil = stencils[idx[0]]
        offsets = sorted(set(stencil) | {0.0})
        pts = np.concatenate([s[idx] + off * h for off in offsets])
        decs = decompose_many(family.evaluate_many(pts), cluster_tol)
        _, P_all, r = _uniform(decs, f"within h={h:g} of s={s[idx[0]]:.6g}")
        if ranks is not None and r != ranks:
            raise RankChange(f"branch structure changes {ranks} -> {r}")
        ranks = r
        P_all = P_all.reshape(len(offsets), len(idx), *P_all.shape[1:])
        center = P_all[offsets.index(0.0)]
        D = np.zeros_like(center)
        for off, w in stencil.items():
            D += w * _align(center, P_all[offsets.index(off)])
        D /= h
        if P_out is None:
            P_out = np.empty((len(s), *center.shape[1:]), dtype=np.complex128)
            D_out = np.empty_like(P_out)
        P_out[idx], D_out[idx] = center, D
    return P_out, D_out, ranks


def kato_from_derivatives(P: np.ndarray, D: np.ndarray) -> np.ndarray:
    """``H_K = (i/2) sum_j [D_j, P_j]`` for stacks ``(..., J, d, d)``."""
    comm = D @ P - P @ D
    return 0.5j * comm.sum(axis=-3)


def kato_hamiltonians(family, s, h: float, cluster_tol: float = defaults.CLUSTER_TOL,
                      richardson: bool = False) -> np.ndarray:
    P, D, _ = projector_derivatives(family, s, h, cluster_tol, richardson)
    return kato_from_derivatives(P, D)


def kato_hamiltonian(family, s: float, h: float, cluster_tol: float = defaults.CLUSTER_TOL,
                     richardson: bool = False) -> np.ndarray:
    """Kato's adiabatic generator at one parameter value.

    Central differences of the tracked projectors (Richardson-extrapolated on
    request); one-sided second-order stencils with an ``EndpointFallback``
    warning where ``s +- h`` leaves the family's domain.
    """
    return kato_hamiltonians(family, [s], h, cluster_tol, richardson)[0]


def kato_diagonal_blocks(family, s: float, h: float, cluster_tol: float = defaults.CLUSTER_TOL,
                         richardson: bool = False) -> dict[str, float]:
    """Diagonal-block diagnostics of the generator at ``s``.

    ``generator``: max_j ||P_j H_K P_j||; vanishes identically for the commutator
    form, so it sits at rounding level for any step.
    ``derivative``: max_j ||P_j D_j P_j|| of the difference quotient itself,
    which is O(h^2) for a central stencil.
    ``hermiticity``: ||H_K - H_K^dag||.
    """
    P, D, _ = projector_derivatives(family, [s], h, cluster_tol, richardson)
    H = kato_from_derivatives(P, D)[0]
    P, D = P[0], D[0]
    return {
        "generator": float(np.max(op_norms(P @ H[None] @ P))),
        "derivative": float(np.max(op_norms(P @ D @ P))),
        "hermiticity": float(op_norms(H - dagger(H))),
    }


# ---------------------------------------------------------------------------
# Kato propagator


def substep_midpoints(schedule, substeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoints and widths of ``substeps`` equal pieces of every schedule interval."""
    nodes = schedule.nodes
    width = np.diff(nodes) / substeps
    frac = (np.arange(substeps) + 0.5)[None, :]
    mids = nodes[:-1, None] + frac * width[:, None]
    return mids.reshape(-1), np.repeat(width, substeps)


def intertwining_projection(P_now: np.ndarray, P_start: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Closest unitary to ``sum_j P_j(s) U P_j(s')``; it intertwines exactly.

    The polar factor keeps the intertwining because ``X^dag X`` commutes with
    every ``P_j(s')``.
    """
    X = np.einsum("jab,bc,jcd->ad", P_now, U, P_start)
    w, V = herm_eig(dagger(X) @ X)
    return X @ ((V * (1.0 / np.sqrt(w))) @ dagger(V))


def kato_propagator(family, schedule, substeps: int = defaults.SUBSTEPS, h: float | None = None,
                    cluster_tol: float = defaults.CLUSTER_TOL, richardson: bool = False,
                    frames: list[SpectralFrame] | None = None,
                    enforce_intertwining: bool = False) -> np.ndarray:
    """``U_K(s_n, s')`` at every node as a midpoint-rule ordered exponential product.

    With ``enforce_intertwining`` each node value is replaced by its
    :func:`intertwining_projection` against the tracked ``frames``; the change
    is of the size of the integrator error.
    """
    if h is None:
        h = defaults.FD_STEP_REL * abs(schedule.length)
    d = family.dim
    N = schedule.N
    out = np.empty((N + 1, d, d), dtype=np.complex128)
    out[0] = identity(d)
    if N > 0:
        mids, width = substep_midpoints(schedule, substeps)
        steps = np.empty((len(mids), d, d), dtype=np.complex128)
        for a in range(0, len(mids), CHUNK):
            sl = slice(a, a + CHUNK)
            H = kato_hamiltonians(family, mids[sl], h, cluster_tol, richardson)
            steps[sl] = expm_hermitian(H, -1j * width[sl])
        steps = steps.reshape(N, substeps, d, d)
        interval = steps[:, 0]
        for k in range(1, substeps):
            interval = steps[:, k] @ interval
        for n in range(1, N + 1):
            out[n] = interval[n - 1] @ out[n - 1]
    if enforce_intertwining:
        if frames is None:
            frames = track_branches(family, schedule, cluster_tol)
        P0 = frames[0].projectors
        for n in range(1, N + 1):
            out[n] = intertwining_projection(frames[n].projectors, P0, out[n])
    return out


def intertwining_defect(frames: list[SpectralFrame], U_kato: np.ndarray) -> float:
    """max_{n, j} ||P_j(s_n) U_K(s_n, s') - U_K(s_n, s') P_j(s')||."""
    P = np.array([f.projectors for f in frames])  # (N+1, J, d, d)
    P0 = P[0]
    U = U_kato[:, None]
    return float(np.max(op_norms(P @ U - U @ P0[None])))


# ---------------------------------------------------------------------------
# dynamical phase, interaction picture, accumulants


def cumulative_phases(frames: list[SpectralFrame]) -> np.ndarray:
    """``Phi[n, j] = sum_{n'=1}^{n} theta_j(s_{n'})`` reduced mod 2pi, ``Phi[0] = 0``.

    Reducing every term and every partial sum keeps a global 2pi shift of any
    branch from leaking rounding error into the phases.
    """
    theta = _wrap(np.array([f.angles for f in frames]))
    phi = np.zeros_like(theta)
    for n in range(1, len(frames)):
        phi[n] = _wrap(phi[n - 1] + theta[n])
    return phi


def dynamical_phase(frames: list[SpectralFrame], schedule=None) -> np.ndarray:
    """``U_D,n = sum_j P_j(s') exp(i sum_{n'<=n} theta_j(s_{n'}))``, ``U_D,0 = I``."""
    if schedule is not None and len(frames) != schedule.N + 1:
        raise LengthMismatch("one frame per schedule node is required")
    phi = cumulative_phases(frames)
    P0 = frames[0].projectors
    out = np.einsum("nj,jab->nab", np.exp(1j * phi), P0)
    out[0] = identity(P0.shape[-1])
    return out


def interaction_picture(U_exact: np.ndarray, U_kato: np.ndarray, U_dyn: np.ndarray,
                        maps: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``W`` (length N + 1) and step operators ``UW`` (length N, ``UW[n-1] = U^W_n``).

    ``maps[n] = U(s_n)``; when omitted it is recovered as ``U_n U_{n-1}^dag``.
    Raises ``ConsistencyFailure`` if ``W_n = U^W_n W_{n-1}`` fails by more than 1e-6.
    """
    if not (len(U_exact) == len(U_kato) == len(U_dyn)):
        raise LengthMismatch("operator lists must share one schedule")
    if maps is None:
        maps = np.empty_like(U_exact)
        maps[0] = identity(U_exact.shape[-1])
        maps[1:] = U_exact[1:] @ dagger(U_exact[:-1])
    A = U_kato @ U_dyn
    W = dagger(A) @ U_exact
    UW = dagger(A[1:]) @ maps[1:] @ A[:-1]
    res = recursion_residual(W, UW)
    if res > defaults.CONSISTENCY_TOL:
        raise ConsistencyFailure(f"W recursion residual {res:.3e}")
    return W, UW


def recursion_residual(W: np.ndarray, UW: np.ndarray) -> float:
    """max_n ||W_n - U^W_n W_{n-1}||, including ||W_0 - I||."""
    r0 = float(op_norms(W[0] - identity(W.shape[-1])))
    if len(UW) == 0:
        return r0
    return max(r0, float(np.max(op_norms(W[1:] - UW @ W[:-1]))))


def accumulate_V(UW: np.ndarray) -> np.ndarray:
    """``V_0 = 0``, ``V_n = sum_{n'<=n} (U^W_{n'} - I)``."""
    UW = np.asarray(UW, dtype=np.complex128)
    d = UW.shape[-1]
    V = np.zeros((len(UW) + 1, d, d), dtype=np.complex128)
    V[1:] = np.cumsum(UW - identity(d), axis=0)
    return V


# ---------------------------------------------------------------------------
# oscillatory-sum bookkeeping


def abel_sum(f, g):
    """Both sides of the summation-by-parts identity.

    ``f`` holds f_0..f_n and ``g`` holds g_1..g_n (so ``g[i]`` is g_{i+1}).
    Entries may be scalars or square matrices; products are taken as f * g.

        lhs = sum_{m=1}^{n} (f_m - f_{m-1}) g_m
        rhs = f_n g_n - f_0 g_1 - sum_{m=1}^{n-1} f_m (g_{m+1} - g_m)
    """
    f = np.asarray(f)
    g = np.asarray(g)
    if len(f) < 2 or len(g) != len(f) - 1:
        raise LengthMismatch(f"need len(g) = len(f) - 1 >= 1, got {len(f)} and {len(g)}")
    mul = np.matmul if f.ndim > 1 else np.multiply
    lhs = mul(f[1:] - f[:-1], g).sum(axis=0)
    rhs = mul(f[-1], g[-1]) - mul(f[0], g[0]) - mul(f[1:-1], g[1:] - g[:-1]).sum(axis=0)
    return lhs, rhs


def phase_products(frames: list[SpectralFrame], j: int, k: int) -> np.ndarray:
    """``Z[n] = exp(-i sum_{n'<=n} (theta_j - theta_k)(s_{n'}))``, ``Z[0] = 1``."""
    phi = cumulative_phases(frames)
    return np.exp(-1j * (phi[:, j] - phi[:, k]))


def gap_factors(frames: list[SpectralFrame], j: int, k: int) -> np.ndarray:
    """``z_jk(s_n) - 1`` at every node."""
    theta = np.array([f.angles for f in frames])
    return np.exp(-1j * (theta[:, j] - theta[:, k])) - 1.0


def step_operators(frames: list[SpectralFrame], U_kato: np.ndarray) -> np.ndarray:
    """U^W_n rebuilt from the frames alone (U(s_n) = sum_j e^{i theta_j} P_j)."""
    maps = np.array([f.unitary() for f in frames])
    U_dyn = dynamical_phase(frames)
    A = U_kato @ U_dyn
    return dagger(A[1:]) @ maps[1:] @ A[:-1]


@dataclass
class ZR:
    Z: np.ndarray
    R: np.ndarray
    R2: np.ndarray
    zm1: np.ndarray  # z_jk(s_n) - 1
    factorization_residual: float


def zr_decomposition(frames: list[SpectralFrame], U_kato: np.ndarray, j: int, k: int,
                     UW: np.ndarray | None = None, gap_min: float = defaults.GAP_MIN) -> ZR:
    """Phase products Z, transition operators R and their second differences R2 for j != k.

    ``R[n] = U_K(s_n)^dag P_j(s_n) P_k(s_{n-1}) U_K(s_{n-1})`` and
    ``R2[n] = R[n+1] / (z(s_{n+1}) - 1) - R[n] / (z(s_n) - 1)``.
    Also checks ``P_j(s') (U^W_n - 1) P_k(s') = Z[n-1] R[n]``; the largest
    violation is returned as ``factorization_residual``.
    """
    if j == k:
        raise ValueError("j and k must differ")
    zm1 = gap_factors(frames, j, k)
    worst = np.min(np.abs(zm1))
    if worst < gap_min:
        raise GapViolation(f"|z_{j}{k} - 1| = {worst:.3e} < gap_min = {gap_min:g}")
    N = len(frames) - 1
    d = U_kato.shape[-1]
    Z = phase_products(frames, j, k)
    Pj = np.array([f.projectors[j] for f in frames])
    Pk = np.array([f.projectors[k] for f in frames])
    R = np.zeros((N + 1, d, d), dtype=np.complex128)
    R2 = np.zeros_like(R)
    if N == 0:
        return ZR(Z, R, R2, zm1, 0.0)
    R[1:] = dagger(U_kato[1:]) @ Pj[1:] @ Pk[:-1] @ U_kato[:-1]
    scaled = R / np.where(zm1 == 0, 1.0, zm1)[:, None, None]
    R2[1:N] = scaled[2:] - scaled[1:N]
    if UW is None:
        UW = step_operators(frames, U_kato)
    P0j, P0k = frames[0].projectors[j], frames[0].projectors[k]
    lhs = P0j @ (UW - identity(d)) @ P0k
    rhs = Z[:-1, None, None] * R[1:]
    return ZR(Z, R, R2, zm1, float(np.max(op_norms(lhs - rhs))))


def parts_transform(zr: ZR) -> np.ndarray:
    """Right-hand side of the summation-by-parts form of ``P_j V_n P_k``, n = 0..N.

        Z_n R_n / (z_n - 1) - R_1 / (z_1 - 1) - sum_{m=1}^{n-1} Z_m R2_m

    (entry 0 is zero). The minus sign on the sum is what summation by parts
    produces with ``f = Z`` and ``g_m = R_m / (z_m - 1)``.
    """
    Z, R, R2, zm1 = zr.Z, zr.R, zr.R2, zr.zm1
    N = len(Z) - 1
    out = np.zeros_like(R)
    if N == 0:
        return out
    g = R[1:] / zm1[1:, None, None]
    tail = np.zeros_like(R)
    tail[2:] = np.cumsum(Z[1:N, None, None] * R2[1:N], axis=0)
    out[1:] = Z[1:, None, None] * g - g[0][None] - tail[1:]
    return out


def voff_decomposition_check(frames: list[SpectralFrame], U_kato: np.ndarray, j: int, k: int,
                             V: np.ndarray | None = None, UW: np.ndarray | None = None,
                             gap_min: float = defaults.GAP_MIN) -> dict[str, float]:
    """Residuals of the oscillatory-sum identities for the block (j, k).

    ``direct``: ||P_j V_n P_k - sum_{m<=n} Z_{m-1} R_m|| (factorised sum);
    ``parts``: ||P_j V_n P_k - parts_transform(n)||; both maximised over n.
    """
    if UW is None:
        UW = step_operators(frames, U_kato)
    if V is None:
        V = accumulate_V(UW)
    zr = zr_decomposition(frames, U_kato, j, k, UW=UW, gap_min=gap_min)
    P0j, P0k = frames[0].projectors[j], frames[0].projectors[k]
    lhs = P0j @ V @ P0k
    direct = np.zeros_like(lhs)
    direct[1:] = np.cumsum(zr.Z[:-1, None, None] * zr.R[1:], axis=0)
    parts = parts_transform(zr)
    return {
        "direct": float(np.max(op_norms(lhs - direct))),
        "parts": float(np.max(op_norms(lhs - parts))),
        "factorization": zr.factorization_residual,
    }


# ---------------------------------------------------------------------------
# full pipeline


@dataclass(frozen=True)
class PipelineConfig:
    cluster_tol: float = defaults.CLUSTER_TOL
    gap_min: float = defaults.GAP_MIN
    fd_step: float = defaults.FD_STEP_REL  # relative to the path length
    substeps: int = defaults.SUBSTEPS
    richardson: bool = False
    assignment: str = "greedy"
    enforce_intertwining: bool = True
    norm: str = "op"


@dataclass
class EvolutionTrace:
    schedule: object
    frames: list[SpectralFrame]
    maps: np.ndarray
    U_exact: np.ndarray
    U_kato: np.ndarray
    U_dyn: np.ndarray
    W: np.ndarray
    UW: np.ndarray
    V: np.ndarray


# columns of the CSV report, in order
SERIES_FIELDS = ("offdiag_W", "diag_W", "offdiag_UW_max", "diag_UW_max",
                 "V_offdiag_max", "V_diag_max", "R2_max")


@dataclass
class DeviationSeries:
    N: int
    offdiag_W: float
    diag_W: float
    offdiag_UW_max: float
    diag_UW_max: float
    V_offdiag_max: float
    V_diag_max: float
    R2_max: float
    diagnostics: dict = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in SERIES_FIELDS}

    def to_dict(self) -> dict:
        return asdict(self)


def build_trace(family, schedule, config: PipelineConfig = PipelineConfig(),
                frames: list[SpectralFrame] | None = None) -> EvolutionTrace:
    if frames is None:
        frames = track_branches(family, schedule, config.cluster_tol, config.assignment)
        assert_gap(frames, config.gap_min)
    elif len(frames) != schedule.N + 1:
        raise LengthMismatch("one frame per schedule node is required")
    maps = family.evaluate_many(schedule.nodes)
    U_exact = evolve_exact(family, schedule, maps)
    U_kato = kato_propagator(family, schedule, config.substeps,
                             config.fd_step * abs(schedule.length), config.cluster_tol,
                             config.richardson, frames, config.enforce_intertwining)
    U_dyn = dynamical_phase(frames, schedule)
    W, UW = interaction_picture(U_exact, U_kato, U_dyn, maps)
    return EvolutionTrace(schedule, frames, maps, U_exact, U_kato, U_dyn, W, UW, accumulate_V(UW))


def _branch_basis(P0: np.ndarray, ranks) -> tuple[np.ndarray, list[slice]]:
    """Unitary E whose column blocks span the ranges of P_j(s')."""
    cols, slices, a = [], [], 0
    for P, r in zip(P0, ranks):
        _, vecs = herm_eig(P)
        cols.append(vecs[:, -r:])
        slices.append(slice(a, a + r))
        a += r
    return np.concatenate(cols, axis=1), slices


def _block_maxima(X: np.ndarray, E: np.ndarray, slices, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry maxima over off-diagonal and diagonal branch blocks of a stack X."""
    Y = dagger(E) @ X @ E
    off = np.zeros(len(X))
    diag = np.zeros(len(X))
    for a, sa in enumerate(slices):
        for b, sb in enumerate(slices):
            nb = block_norms(Y[:, sa, sb], kind)
            if a == b:
                diag = np.maximum(diag, nb)
            else:
                off = np.maximum(off, nb)
    return off, diag


def series_from_trace(trace: EvolutionTrace, config: PipelineConfig = PipelineConfig(),
                      per_node: bool = False):
    """Reduce a trace to a :class:`DeviationSeries` (and optionally per-node norms)."""
    frames, kind = trace.frames, config.norm
    N = trace.schedule.N
    d = trace.W.shape[-1]
    P0 = frames[0].projectors
    E, slices = _branch_basis(P0, frames[0].ranks)
    eye = identity(d)
    J = frames[0].n_branches

    W_off, W_diag = _block_maxima((trace.W[-1] - eye)[None], E, slices, kind)
    UW_off, UW_diag = _block_maxima(trace.UW - eye, E, slices, kind)
    V_off, V_diag = _block_maxima(trace.V, E, slices, kind)

    R2_node = np.zeros(N + 1)
    fact = parts = 0.0
    for j in range(J):
        for k in range(J):
            if j == k:
                continue
            chk = voff_decomposition_check(frames, trace.U_kato, j, k, trace.V, trace.UW,
                                           config.gap_min)
            fact = max(fact, chk["factorization"])
            parts = max(parts, chk["parts"])
            zr = zr_decomposition(frames, trace.U_kato, j, k, trace.UW, config.gap_min)
            if N >= 2:
                R2_node[1:N] = np.maximum(R2_node[1:N], block_norms(zr.R2[1:N], kind))

    # the theorem's own form: ||P_j(s'') U_N P_k(s')|| against the W-picture block
    PN = frames[-1].projectors
    eq3 = 0.0
    for j in range(J):
        for k in range(J):
            if j != k:
                a = float(block_norms((PN[j] @ trace.U_exact[-1] @ P0[k])[None], kind)[0])
                b = float(block_norms((P0[j] @ trace.W[-1] @ P0[k])[None], kind)[0])
                eq3 = max(eq3, abs(a - b))

    stacks = np.concatenate([trace.U_exact, trace.U_kato, trace.U_dyn, trace.W])
    unitarity = float(np.max(op_norms(dagger(stacks) @ stacks - eye)))
    diagnostics = {
        "recursion_residual": recursion_residual(trace.W, trace.UW),
        "factorization_residual": fact,
        "parts_residual": parts,
        "eq3_norm_residual": eq3,
        "intertwining_defect": intertwining_defect(frames, trace.U_kato),
        "unitarity_UN": float(op_norms(dagger(trace.U_exact[-1]) @ trace.U_exact[-1] - eye)),
        "max_unitarity_defect": unitarity,
    }
    series = DeviationSeries(
        N=N,
        offdiag_W=float(W_off[0]),
        diag_W=float(W_diag[0]),
        offdiag_UW_max=float(UW_off.max(initial=0.0)),
        diag_UW_max=float(UW_diag.max(initial=0.0)),
        V_offdiag_max=float(V_off.max(initial=0.0)),
        V_diag_max=float(V_diag.max(initial=0.0)),
        R2_max=float(R2_node.max(initial=0.0)),
        diagnostics=diagnostics,
    )
    if not per_node:
        return series
    pad = lambda x: np.concatenate([[0.0], x])  # noqa: E731
    W_off_n, W_diag_n = _block_maxima(trace.W - eye, E, slices, kind)
    nodes = {
        "offdiag_W": W_off_n, "diag_W": W_diag_n,
        "offdiag_UW": pad(UW_off), "diag_UW": pad(UW_diag),
        "V_offdiag": V_off, "V_diag": V_diag, "R2": R2_node,
    }
    return series, nodes


def deviation_series(family, schedule, config: PipelineConfig = PipelineConfig(),
                     frames: list[SpectralFrame] | None = None) -> DeviationSeries:
    """Run the whole construction for one schedule and measure every deviation.

    Raises ``GapViolation``/``RankChange`` when the spectral assumptions fail and
    ``ConsistencyFailure`` when the theorem's two equivalent forms disagree by
    more than the exact-algebra tolerance (only meaningful when the propagator
    intertwines exactly).
    """
    trace = build_trace(family, schedule, config, frames)
    series = series_from_trace(trace, config)
    diag = series.diagnostics
    if config.enforce_intertwining:
        bound = defaults.IDENTITY_TOL
    else:
        bound = max(defaults.IDENTITY_TOL, 10 * diag["intertwining_defect"])
    if diag["eq3_norm_residual"] > bound:
        raise ConsistencyFailure(
            f"|P_j(s'') U_N P_k(s')| and |P_j W_N P_k| differ by {diag['eq3_norm_residual']:.3e}")
    tol = 1e-10 * max(schedule.N, 1) * family.dim
    if diag["max_unitarity_defect"] > tol:
        raise ConsistencyFailure(f"stored operator unitarity defect {diag['max_unitarity_defect']:.3e}")
    return series


def write_trace_csv(trace: EvolutionTrace, path, config: PipelineConfig = PipelineConfig()) -> None:
    """Per-node deviation norms (schema in docs/formats.md)."""
    _, nodes = series_from_trace(trace, config, per_node=True)
    cols = list(nodes)
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "s_n", *cols])
        for n, s in enumerate(trace.schedule.nodes):
            w.writerow([n, f"{s:.17g}", *(f"{nodes[c][n]:.17g}" for c in cols)])


def shift_branch_angles(frames: list[SpectralFrame], turns: dict[int, int]) -> list[SpectralFrame]:
    """Copy of ``frames`` with branch j's angle moved by ``2 pi * turns[j]`` at every node."""
    out = []
    for f in frames:
        a = np.array(f.angles, dtype=float)
        for j, t in turns.items():
            a[j] += TWO_PI * t
        out.append(f.with_angles(a))
    return out
