"""
Spectral resolution of unitaries along a path.

A unitary U is diagonalised without a non-Hermitian eigensolver: first the
Hermitian part (U + U^dag)/2 (eigenvalues cos theta), then, inside each of its
near-degenerate eigenspaces, the anti-Hermitian part (U - U^dag)/2i
(eigenvalues sin theta). Pairs that remain unresolved are close on the unit
circle and get one more pass with the matrix rotated to the pair's mean phase,
where sin(theta - phi) separates them linearly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import defaults
from .errors import ClusterAmbiguity, GapViolation, LabelMismatch, RankChange, TrackingAmbiguity
from .matcore import dagger, herm_eig, identity

TWO_PI = 2.0 * math.pi


def _principal(theta):
    """Map angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    out = np.angle(np.exp(1j * theta))
    return np.where(out <= -math.pi, out + TWO_PI, out)


@dataclass(frozen=True, eq=False)
class SpectralFrame:
    """Eigenangles and spectral projectors of U(s), indexed by branch label."""

    s: float
    angles: np.ndarray  # (J,)
    projectors: np.ndarray  # (J, d, d)
    ranks: tuple[int, ...]
    margins: np.ndarray | None = None  # tracking margin per branch, None at the first node

    def __post_init__(self):
        for arr in (self.angles, self.projectors, self.margins):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_branches(self) -> int:
        return len(self.ranks)

    @property
    def dim(self) -> int:
        return self.projectors.shape[-1]

    def unitary(self) -> np.ndarray:
        """Reassemble ``sum_j e^{i theta_j} P_j``."""
        return np.einsum("j,jab->ab", np.exp(1j * self.angles), self.projectors)

    def with_angles(self, angles) -> "SpectralFrame":
        return replace(self, angles=np.array(angles, dtype=float))

    def defects(self, U: np.ndarray | None = None) -> dict[str, float]:
        """Operator-norm residuals of the frame invariants."""
        from .matcore import op_norms

        P = self.projectors
        J = len(P)
        out = {
            "resolution": float(op_norms(P.sum(axis=0) - identity(self.dim))),
            "idempotent": float(np.max(op_norms(P @ P - P))),
            "orthogonal": 0.0,
        }
        if J > 1:
            prods = np.einsum("jab,kbc->jkac", P, P)
            mask = ~np.eye(J, dtype=bool)
            out["orthogonal"] = float(np.max(op_norms(prods[mask])))
        if U is not None:
            res = U[None] @ P - np.exp(1j * self.angles)[:, None, None] * P
            out["eigen"] = float(np.max(op_norms(res)))
        return out


@dataclass(frozen=True)
class GapReport:
    min_gap: float
    location: tuple[float, int, int] | None  # (s, j, k) of the minimum
    gap_min: float
    passed: bool

    def raise_if_failed(self) -> None:
        if not self.passed:
            s, j, k = self.location
            raise GapViolation(
                f"|z_jk - 1| = {self.min_gap:.3e} < gap_min = {self.gap_min:g} "
                f"at s = {s:.6g} (branches {j}, {k})")

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        where = "" if self.location is None else (
            f" at s={self.location[0]:.6g} j={self.location[1]} k={self.location[2]}")
        return f"gap {verdict}: min |z_jk - 1| = {self.min_gap:.6g}{where} (gap_min {self.gap_min:g})"


# ---------------------------------------------------------------------------
# eigenvectors of a stack of unitaries


def _split_groups(values: np.ndarray, tol: float) -> list[tuple[int, int]]:
    """Contiguous runs of ascending ``values`` whose neighbours differ by <= tol."""
    bounds = [0] + [i + 1 for i in np.flatnonzero(np.diff(values) > tol)] + [len(values)]
    return list(zip(bounds[:-1], bounds[1:]))


def _rotated_split(U: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Diagonalise U on span(Q) when its eigenvalues there are close to each other."""
    M = dagger(Q) @ U @ Q
    phi = np.angle(np.trace(M))
    Mr = np.exp(-1j * phi) * M
    A = (Mr - dagger(Mr)) / 2j
    _, Y = herm_eig(A)
    return Q @ Y


def unitary_eigvecs(Us: np.ndarray, split_tol: float = defaults.SPLIT_TOL) -> np.ndarray:
    """Columns of the returned ``(B, d, d)`` stack are eigenvectors of each U."""
    Us = np.asarray(Us, dtype=np.complex128)
    H1 = 0.5 * (Us + dagger(Us))
    H2 = (Us - dagger(Us)) / 2j
    c, V = herm_eig(H1)
    V = V.copy()
    d = Us.shape[-1]
    if d == 1:
        return V
    split = np.diff(c, axis=1) > split_tol
    patterns, inverse = np.unique(split, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for p, pattern in enumerate(patterns):
        rows = np.flatnonzero(inverse == p)
        bounds = [0] + [i + 1 for i in np.flatnonzero(pattern)] + [d]
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b - a < 2:
                continue
            Qg = V[rows, :, a:b]
            A = dagger(Qg) @ H2[rows] @ Qg
            sv, Y = herm_eig(A)
            V[rows, :, a:b] = Qg @ Y
            stuck = np.flatnonzero(np.any(np.diff(sv, axis=1) <= split_tol, axis=1))
            for r in stuck:
                row = rows[r]
                for ga, gb in _split_groups(sv[r], split_tol):
                    if gb - ga > 1:
                        cols = slice(a + ga, a + gb)
                        V[row, :, cols] = _rotated_split(Us[row], V[row, :, cols])
    return V


def _cluster_circle(theta: np.ndarray, tol: float) -> list[np.ndarray]:
    """Single-linkage clusters of angles on the circle; raises on ambiguous spacing."""
    order = np.argsort(theta)
    t = theta[order]
    n = len(t)
    if n == 1:
        return [order]
    gaps = np.append(np.diff(t), t[0] + TWO_PI - t[-1])
    cuts = np.flatnonzero(gaps > tol)
    if cuts.size == 0:
        return [order]
    clusters = []
    # rotate so the list starts right after a cut
    start = (cuts[-1] + 1) % n
    current = []
    for step in range(n):
        i = (start + step) % n
        current.append(order[i])
        if gaps[i] > tol:
            clusters.append(np.array(current))
            current = []
    close = gaps[cuts]
    if np.any(close < 2 * tol):
        raise ClusterAmbiguity(
            f"eigenangle clusters separated by {np.min(close):.3e} < 2 * cluster_tol")
    return clusters


def decompose_many(Us, cluster_tol: float = defaults.CLUSTER_TOL,
                   split_tol: float = defaults.SPLIT_TOL):
    """Spectral resolution of a stack of unitaries.

    Returns a list of ``(angles, projectors, ranks)`` with branches in ascending
    principal angle.
    """
    Us = np.asarray(Us, dtype=np.complex128)
    if Us.ndim == 2:
        Us = Us[None]
    V = unitary_eigvecs(Us, split_tol)
    lam = np.einsum("bji,bjk,bki->bi", V.conj(), Us, V)
    theta = _principal(np.angle(lam))
    order = np.argsort(theta, axis=1)
    theta_sorted = np.take_along_axis(theta, order, axis=1)
    V_sorted = np.take_along_axis(V, order[:, None, :], axis=2)
    dyads = np.einsum("bai,bci->biac", V_sorted, V_sorted.conj())
    d = Us.shape[-1]
    if d > 1:
        gaps = np.concatenate(
            [np.diff(theta_sorted, axis=1), (theta_sorted[:, :1] + TWO_PI - theta_sorted[:, -1:])],
            axis=1)
        simple = np.all(gaps >= 2 * cluster_tol, axis=1)
    else:
        simple = np.ones(len(Us), dtype=bool)
    ones = (1,) * d
    out = []
    for b in range(len(Us)):
        if simple[b]:
            out.append((theta_sorted[b], dyads[b], ones))
            continue
        clusters = _cluster_circle(theta_sorted[b], cluster_tol)
        angs, projs, ranks = [], [], []
        for members in clusters:
            angs.append(float(_principal(np.angle(np.sum(np.exp(1j * theta_sorted[b, members]))))))
            projs.append(dyads[b, members].sum(axis=0))
            ranks.append(len(members))
        idx = np.argsort(angs)
        out.append((np.asarray(angs)[idx], np.asarray(projs)[idx], tuple(ranks[i] for i in idx)))
    return out


def spectral_decompose(U, cluster_tol: float = defaults.CLUSTER_TOL, s: float = float("nan")) -> SpectralFrame:
    """Spectral frame of one unitary, branches ordered by principal eigenangle."""
    angles, projs, ranks = decompose_many(np.asarray(U)[None], cluster_tol)[0]
    return SpectralFrame(float(s), np.array(angles, dtype=float), np.array(projs), tuple(ranks))


# ---------------------------------------------------------------------------
# tracking


def overlap_matrix(P_prev: np.ndarray, P_cur: np.ndarray) -> np.ndarray:
    """``O[a, b] = Re Tr(P_prev[a] P_cur[b])``."""
    return np.einsum("aij,bji->ab", P_prev, P_cur).real


def _greedy(O: np.ndarray) -> np.ndarray:
    J = O.shape[0]
    perm = -np.ones(J, dtype=int)
    work = O.copy()
    for _ in range(J):
        a, b = np.unravel_index(np.argmax(work), work.shape)
        perm[a] = b
        work[a, :] = -np.inf
        work[:, b] = -np.inf
    return perm


def assign_branches(O: np.ndarray, method: str = "greedy") -> np.ndarray:
    """Permutation ``perm`` with previous label a -> current index perm[a]."""
    if method == "greedy":
        return _greedy(O)
    if method == "hungarian":
        rows, cols = linear_sum_assignment(-O)
        perm = np.empty(len(rows), dtype=int)
        perm[rows] = cols
        return perm
    raise ValueError(f"unknown assignment method {method!r}")


def _margins(O: np.ndarray, perm: np.ndarray) -> np.ndarray:
    J = len(perm)
    best = O[np.arange(J), perm]
    if J == 1:
        return np.array([np.inf])
    masked = O.copy()
    masked[np.arange(J), perm] = -np.inf
    return best - masked.max(axis=1)


def match_frame(reference: SpectralFrame, angles, projs, ranks, *, method="greedy",
                margin=defaults.TRACKING_MARGIN, error=TrackingAmbiguity):
    """Relabel a raw decomposition to follow ``reference``; returns (angles, projs, ranks, margins)."""
    if len(ranks) != reference.n_branches:
        raise RankChange(
            f"branch count changes from {reference.n_branches} to {len(ranks)} near s={reference.s:.6g}")
    O = overlap_matrix(reference.projectors, projs)
    perm = assign_branches(O, method)
    new_ranks = tuple(ranks[i] for i in perm)
    if new_ranks != reference.ranks:
        raise RankChange(f"branch ranks change from {reference.ranks} to {new_ranks} "
                         f"near s={reference.s:.6g}")
    m = _margins(O, perm)
    if np.any(m < margin):
        raise error(f"overlap margin {np.min(m):.3f} < {margin} after s={reference.s:.6g}")
    return np.asarray(angles)[perm], np.asarray(projs)[perm], new_ranks, m


def track_branches(family, schedule, cluster_tol: float = defaults.CLUSTER_TOL,
                   method: str = "greedy") -> list[SpectralFrame]:
    """Consistently labelled frames at every schedule node, with unwrapped angles."""
    if getattr(family, "dim", None) is None:
        raise ValueError("family has no dimension")
    nodes = schedule.nodes
    raw = decompose_many(family.evaluate_many(nodes), cluster_tol)
    a0, p0, r0 = raw[0]
    frames = [SpectralFrame(float(nodes[0]), np.array(a0, dtype=float), np.array(p0), r0)]
    for n in range(1, len(nodes)):
        prev = frames[-1]
        angles, projs, ranks, m = match_frame(prev, *raw[n], method=method)
        # nearest 2pi window to the previous angle
        angles = angles + TWO_PI * np.round((prev.angles - angles) / TWO_PI)
        frames.append(SpectralFrame(float(nodes[n]), np.array(angles, dtype=float),
                                    np.array(projs), ranks, np.array(m, dtype=float)))
    return frames


def find_crossing(frames: list[SpectralFrame]) -> tuple[float, int, int] | None:
    """First place where a tracked difference theta_j - theta_k passes a multiple of 2pi
    between two neighbouring nodes, as (s, j, k) with s linearly interpolated.

    Node values alone can miss a crossing that falls between nodes; tracked,
    unwrapped angles cannot.
    """
    if len(frames) < 2 or frames[0].n_branches < 2:
        return None
    theta = np.array([f.angles for f in frames])
    s = np.array([f.s for f in frames])
    J = theta.shape[1]
    for n in range(1, len(frames)):
        for j in range(J):
            for k in range(j + 1, J):
                a = theta[n - 1, j] - theta[n - 1, k]
                b = theta[n, j] - theta[n, k]
                lo, hi = min(a, b), max(a, b)
                m = math.ceil(lo / TWO_PI)
                if TWO_PI * m <= hi and (a != b):
                    t = (TWO_PI * m - a) / (b - a)
                    return float(s[n - 1] + t * (s[n] - s[n - 1])), j, k
    return None


def gap_scan(frames: list[SpectralFrame], gap_min: float = defaults.GAP_MIN) -> GapReport:
    """Minimum of |z_jk(s_n) - 1| = 2|sin((theta_j - theta_k)/2)| over nodes and j != k."""
    best, where = math.inf, None
    for fr in frames:
        J = fr.n_branches
        if J < 2:
            continue
        diff = fr.angles[:, None] - fr.angles[None, :]
        z = np.abs(np.exp(-1j * diff) - 1.0)
        z[np.diag_indices(J)] = np.inf
        j, k = np.unravel_index(np.argmin(z), z.shape)
        if z[j, k] < best:
            best, where = float(z[j, k]), (fr.s, int(j), int(k))
    return GapReport(best, where, gap_min, best >= gap_min)


def assert_gap(frames: list[SpectralFrame], gap_min: float = defaults.GAP_MIN) -> GapReport:
    """:func:`gap_scan` plus :func:`find_crossing`; raises ``GapViolation`` on either."""
    report = gap_scan(frames, gap_min)
    report.raise_if_failed()
    crossing = find_crossing(frames)
    if crossing is not None:
        s, j, k = crossing
        raise GapViolation(f"eigenangles of branches {j} and {k} cross between nodes near s = {s:.6g}")
    return report


def stack_frames(frames: list[SpectralFrame]) -> tuple[np.ndarray, np.ndarray]:
    """``(angles (N+1, J), projectors (N+1, J, d, d))`` for equally labelled frames."""
    return (np.array([f.angles for f in frames]), np.array([f.projectors for f in frames]))


def write_frames_csv(frames: list[SpectralFrame], path) -> None:
    """Diagnostic dump: n, s_n, j, theta_j, rank_j, min_offdiag_overlap.

    ``min_offdiag_overlap`` is the tracking margin of branch j at node n: its
    overlap with its own predecessor minus its largest overlap with any other
    predecessor branch. It is empty at n = 0 and for single-branch frames.
    """
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "s_n", "j", "theta_j", "rank_j", "min_offdiag_overlap"])
        for n, fr in enumerate(frames):
            for j in range(fr.n_branches):
                m = "" if fr.margins is None or not np.isfinite(fr.margins[j]) else f"{fr.margins[j]:.17g}"
                w.writerow([n, f"{fr.s:.17g}", j, f"{fr.angles[j]:.17g}", fr.ranks[j], m])
