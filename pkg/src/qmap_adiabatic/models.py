"""
Smooth unitary families s -> U(s) and the step schedule {s_n}.

Families evaluate in batches (``evaluate_many``) because the Kato propagator
needs U(s) at tens of thousands of points per run.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from . import defaults
from .errors import (
    DegenerateAngles,
    DomainError,
    FormatError,
    NonUnitarySample,
    ReunitarizationWarning,
    SparseGrid,
)
from .matcore import dagger, herm_eig, identity, op_norms, pauli

# ---------------------------------------------------------------------------
# schedules


def _warp_identity(x):
    return x


def _warp_sine(x, a=0.5):
    return x - a * np.sin(2 * np.pi * x) / (2 * np.pi)


def _warp_smoothstep(x):
    return x * x * (3.0 - 2.0 * x)


# name -> (sigma, max sigma')
WARPS: dict[str, tuple[Callable, float]] = {
    "identity": (_warp_identity, 1.0),
    "sine": (_warp_sine, 1.5),
    "smoothstep": (_warp_smoothstep, 1.5),
}


@dataclass(frozen=True)
class PathSchedule:
    """Nodes ``s_n = s_start + warp(n/N) * (s_end - s_start)``, n = 0..N."""

    s_start: float
    s_end: float
    N: int
    warp: str = "identity"

    def __post_init__(self):
        if not isinstance(self.N, (int, np.integer)) or self.N < 0:
            raise ValueError(f"N must be a nonnegative integer, got {self.N!r}")
        if self.warp not in WARPS:
            raise ValueError(f"unknown warp {self.warp!r}; choose from {sorted(WARPS)}")
        if self.N > 0 and not self.s_end > self.s_start:
            raise ValueError("s_end must exceed s_start")

    @property
    def length(self) -> float:
        return self.s_end - self.s_start

    @cached_property
    def nodes(self) -> np.ndarray:
        sigma, _ = WARPS[self.warp]
        if self.N == 0:
            s = np.array([self.s_start], dtype=float)
        else:
            x = np.arange(self.N + 1) / self.N
            s = self.s_start + sigma(x) * self.length
            s[0], s[-1] = self.s_start, self.s_end
        s.setflags(write=False)
        return s

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def step_constant(self) -> float:
        """``c`` in ``max_n |s_n - s_{n-1}| <= c / N``."""
        return abs(self.length) * WARPS[self.warp][1]


# ---------------------------------------------------------------------------
# families


class MapFamily:
    """A parametrised unitary family. Subclasses implement ``_evaluate_many``.

    Instances are immutable after construction and picklable.
    """

    model_id: str = "abstract"
    dim: int
    smoothness_hint: float
    domain: tuple[float, float] | None = None  # None: defined for every real s
    default_path: tuple[float, float] = (0.0, 1.0)

    def params(self) -> dict:
        return {}

    def evaluate_many(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.domain is not None:
            lo, hi = self.domain
            slack = 1e-12 * max(1.0, hi - lo)
            if np.any(s < lo - slack) or np.any(s > hi + slack):
                raise DomainError(f"{self.model_id} is defined on [{lo}, {hi}]")
            s = np.clip(s, lo, hi)
        return self._evaluate_many(s)

    def evaluate(self, s: float) -> np.ndarray:
        return self.evaluate_many([s])[0]

    def __call__(self, s: float) -> np.ndarray:
        return self.evaluate(s)

    def contains(self, s: float) -> bool:
        if self.domain is None:
            return True
        return self.domain[0] <= s <= self.domain[1]

    def _evaluate_many(self, s: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


class RotatingProjector(MapFamily):
    model_id = "rotating_projector"
    dim = 2

    def __init__(self, omega: float = 1.0, theta_plus: float = 1.0, theta_minus: float = -0.5):
        if abs(math.remainder(theta_plus - theta_minus, 2 * math.pi)) < 1e-12:
            raise DegenerateAngles(
                f"theta_plus={theta_plus} and theta_minus={theta_minus} coincide mod 2pi"
            )
        self.omega = float(omega)
        self.theta_plus = float(theta_plus)
        self.theta_minus = float(theta_minus)
        # ||U'|| = |e^{i t+} - e^{i t-}| * |omega| / 2
        self.smoothness_hint = abs(omega) * abs(
            np.exp(1j * theta_plus) - np.exp(1j * theta_minus)) / 2

    def params(self):
        return {"omega": self.omega, "theta_plus": self.theta_plus,
                "theta_minus": self.theta_minus}

    def axis(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        ws = self.omega * s
        return np.stack([np.sin(ws), np.zeros_like(ws), np.cos(ws)], axis=-1)

    def projectors(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Analytic ``(P_plus(s), P_minus(s))``."""
        n = self.axis(s)
        sx, sy, sz = pauli()
        ns = n[..., 0, None, None] * sx + n[..., 1, None, None] * sy + n[..., 2, None, None] * sz
        eye = identity(2)
        return 0.5 * (eye + ns), 0.5 * (eye - ns)

    def kato_generator(self) -> np.ndarray:
        """Closed form ``H_K = (omega/2) sigma_y``."""
        return 0.5 * self.omega * pauli()[1]

    def _evaluate_many(self, s):
        pp, pm = self.projectors(s)
        return np.exp(1j * self.theta_plus) * pp + np.exp(1j * self.theta_minus) * pm


class Crossing(MapFamily):
    """``diag(e^{is}, e^{-is})``; its eigenangles cross at s = 0."""

    model_id = "crossing"
    dim = 2
    smoothness_hint = 1.0
    default_path = (-1.0, 1.0)

    def __init__(self, dim: int = 2):
        if dim != 2:
            raise ValueError("the crossing model is 2x2")

    def params(self):
        return {"dim": 2}

    def _evaluate_many(self, s):
        out = np.zeros((len(s), 2, 2), dtype=np.complex128)
        out[:, 0, 0] = np.exp(1j * s)
        out[:, 1, 1] = np.exp(-1j * s)
        return out


class Constant(MapFamily):
    model_id = "constant"
    smoothness_hint = 0.0

    def __init__(self, matrix):
        U = np.array(matrix, dtype=np.complex128)
        self.dim = U.shape[0]
        U.setflags(write=False)
        self.matrix = U

    def params(self):
        return {"dim": self.dim}

    def _evaluate_many(self, s):
        return np.broadcast_to(self.matrix, (len(s), self.dim, self.dim)).copy()


def random_hermitian(dim: int, rng: np.random.Generator) -> np.ndarray:
    """GUE sample normalised to unit operator norm."""
    A = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    H = 0.5 * (A + dagger(A))
    return H / np.max(np.abs(np.linalg.eigvalsh(H)))


class Kicked(MapFamily):
    """``U(s) = exp(-i k(s) K) exp(-i T)`` with seeded random Hermitian ``K``, ``T``.

    ``kick_strength`` is either a callable ``k(s)`` or ascending polynomial
    coefficients ``(c0, c1, ...)`` meaning ``k(s) = c0 + c1 s + ...``.
    """

    model_id = "kicked"

    def __init__(self, dim: int = 4, kick_strength: Sequence[float] | Callable = (0.0, 1.0),
                 seed: int = 7, free_scale: float = 1.0, hint_range=(0.0, 1.0)):
        if dim < 2:
            raise ValueError("kicked model needs dim >= 2")
        self.dim = int(dim)
        self.seed = int(seed)
        self.free_scale = float(free_scale)
        rng = np.random.default_rng(seed)
        self.free = free_scale * random_hermitian(dim, rng)
        self.kick = random_hermitian(dim, rng)
        if callable(kick_strength):
            self._coef = None
            self._k = kick_strength
        else:
            self._coef = tuple(float(c) for c in kick_strength)
            self._k = np.polynomial.Polynomial(self._coef)
        w, V = herm_eig(self.free)
        self._free_step = (V * np.exp(-1j * w)) @ dagger(V)
        self._kick_w, self._kick_V = herm_eig(self.kick)
        grid = np.linspace(*hint_range, 201)
        kvals = np.array([self._k(x) for x in grid], dtype=float)
        slope = np.max(np.abs(np.gradient(kvals, grid))) if len(grid) > 1 else 0.0
        # ||U'|| <= |k'| * ||K||, and ||K|| = 1
        self.smoothness_hint = float(slope) * 1.05

    def params(self):
        return {"dim": self.dim, "kick_strength": list(self._coef) if self._coef is not None
                else repr(self._k), "seed": self.seed, "free_scale": self.free_scale}

    def _evaluate_many(self, s):
        k = np.array([self._k(x) for x in s], dtype=float)
        ph = np.exp(-1j * k[:, None] * self._kick_w[None, :])
        kick = (self._kick_V[None] * ph[:, None, :]) @ dagger(self._kick_V)[None]
        return kick @ self._free_step


# ---------------------------------------------------------------------------
# sampled families


def _polar_batch(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    G = dagger(A) @ A
    w, V = herm_eig(G)
    if np.any(w[..., 0] <= 0):
        raise NonUnitarySample("interpolated matrix is singular")
    U = A @ ((V * (1.0 / np.sqrt(w))[..., None, :]) @ dagger(V))
    return U, op_norms(U - A)


class SampledFamily(MapFamily):
    """Entrywise cubic interpolation of tabulated unitaries, re-unitarised by polar projection."""

    model_id = "sampled"

    def __init__(self, s_values, matrices, source: str | None = None):
        s = np.asarray(s_values, dtype=float)
        U = np.asarray(matrices, dtype=np.complex128)
        if len(s) < 2:
            raise SparseGrid("at least two samples are needed to interpolate")
        if np.any(np.diff(s) <= 0):
            raise FormatError("sample s values must be strictly increasing")
        self.dim = U.shape[1]
        self.source = source
        self.samples_s = s
        self.samples = U
        defects = op_norms(dagger(U) @ U - identity(self.dim))
        bad = np.flatnonzero(defects > defaults.SAMPLE_UNITARY_TOL)
        if bad.size:
            i = int(bad[0])
            raise NonUnitarySample(
                f"sample {i} (s={s[i]}) has unitarity defect {defects[i]:.3e}")
        self.domain = (float(s[0]), float(s[-1]))
        self.default_path = self.domain
        self._spline = CubicSpline(s, U, axis=0)
        self.interpolation_error = self._estimate_error()
        if self.interpolation_error > defaults.INTERP_ERROR_MAX:
            raise SparseGrid(
                f"interpolation error estimate {self.interpolation_error:.3e} exceeds "
                f"{defaults.INTERP_ERROR_MAX:g}")
        steps = np.diff(s)
        self.smoothness_hint = float(np.max(op_norms(np.diff(U, axis=0)) / steps))
        mids = 0.5 * (s[1:] + s[:-1])
        _, shift = _polar_batch(self._spline(mids))
        self.reunitarization_shift = float(np.max(shift))
        self.warnings: tuple[str, ...] = ()
        if self.reunitarization_shift > defaults.REUNITARIZE_WARN:
            msg = (f"polar projection shifts interpolants by up to "
                   f"{self.reunitarization_shift:.3e}")
            self.warnings = (msg,)
            warnings.warn(msg, ReunitarizationWarning, stacklevel=2)

    def _estimate_error(self) -> float:
        s, U = self.samples_s, self.samples
        if len(s) < 5:
            # too few points to validate a cubic: use the raw sample-to-sample variation
            return float(np.max(op_norms(np.diff(U, axis=0))))
        coarse = CubicSpline(s[::2], U[::2], axis=0)
        err = op_norms(coarse(s[1::2]) - U[1::2])
        # halving the spacing divides the cubic error by 2^4
        return float(np.max(err)) / 16.0

    def params(self):
        return {"source": self.source, "count": len(self.samples_s), "dim": self.dim}

    def _evaluate_many(self, s):
        U, _ = _polar_batch(self._spline(s))
        return U


def _format_complex(z: complex) -> str:
    return f"{z.real:.17g}{z.imag:+.17g}j"


def write_sampled_family(path, s_values, matrices) -> None:
    """Write samples in the line-oriented format read by :func:`load_sampled_family`."""
    s_values = np.asarray(s_values, dtype=float)
    matrices = np.asarray(matrices, dtype=np.complex128)
    d = matrices.shape[1]
    lines = [f"dim={d} count={len(s_values)}"]
    for s, U in zip(s_values, matrices):
        lines.append(f"s={s:.17g}")
        for row in U:
            lines.append(" ".join(_format_complex(z) for z in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int]:
    fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
    try:
        dim, count = int(fields["dim"]), int(fields["count"])
    except (KeyError, ValueError):
        raise FormatError(f"bad header {line!r}; expected 'dim=<d> count=<m>'") from None
    if dim < 1 or count < 0 or len(fields) != len(line.split()):
        raise FormatError(f"bad header {line!r}")
    return dim, count


def load_sampled_family(path) -> SampledFamily:
    """Read a sampled family file (format in docs/formats.md)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise FormatError("empty file")
    dim, count = _parse_header(lines[0])
    expected = 1 + count * (dim + 1)
    if len(lines) != expected:
        raise FormatError(f"expected {expected} non-blank lines for dim={dim} count={count}, "
                          f"found {len(lines)}")
    s_values, mats = [], []
    pos = 1
    for b in range(count):
        head = lines[pos]
        if not head.startswith("s="):
            raise FormatError(f"block {b}: expected 's=<real>', got {head!r}")
        try:
            s_values.append(float(head[2:]))
        except ValueError:
            raise FormatError(f"block {b}: bad parameter value {head!r}") from None
        rows = []
        for r in range(dim):
            toks = lines[pos + 1 + r].split()
            if len(toks) != dim:
                raise FormatError(f"block {b} row {r}: expected {dim} entries")
            try:
                rows.append([complex(t) for t in toks])
            except ValueError:
                raise FormatError(f"block {b} row {r}: unparsable entry") from None
        mats.append(rows)
        pos += dim + 1
    mats = np.array(mats, dtype=np.complex128).reshape(count, dim, dim)
    if not np.all(np.isfinite(mats)):
        raise FormatError("non-finite matrix entries")
    if count >= 2 and np.any(np.diff(s_values) <= 0):
        raise FormatError("s values must be strictly increasing")
    return SampledFamily(s_values, mats, source=str(path))


# ---------------------------------------------------------------------------
# registry


def model_rotating_projector(omega: float = 1.0, theta_plus: float = 1.0,
                             theta_minus: float = -0.5) -> RotatingProjector:
    # theta_plus - theta_minus = pi is special: consecutive steps cancel and W_N = I for even N
    return RotatingProjector(omega, theta_plus, theta_minus)


def model_crossing(dim: int = 2) -> Crossing:
    return Crossing(dim)


def model_kicked(dim: int = 4, kick_strength=(0.0, 1.0), seed: int = 7,
                 free_scale: float = 1.0) -> Kicked:
    return Kicked(dim, kick_strength, seed, free_scale)


def model_constant(angles: Sequence[float] = (0.7, -1.1)) -> Constant:
    """Constant diagonal family with the given eigenangles."""
    return Constant(np.diag(np.exp(1j * np.asarray(angles, dtype=float))))


@dataclass(frozen=True)
class ModelEntry:
    factory: Callable[..., MapFamily]
    doc: str
    params: dict = field(default_factory=dict)  # name -> (default, description)


MODELS: dict[str, ModelEntry] = {
    "rotating_projector": ModelEntry(
        model_rotating_projector,
        "2x2, U = e^{i theta+} P+(s) + e^{i theta-} P-(s), P+- = (I +- n(s).sigma)/2, "
        "n(s) = (sin omega s, 0, cos omega s); constant eigenangles",
        {"omega": (1.0, "rotation rate of the projector axis"),
         "theta_plus": (1.0, "eigenangle on P+"),
         "theta_minus": (-0.5, "eigenangle on P-")},
    ),
    "crossing": ModelEntry(
        model_crossing,
        "2x2, U = diag(e^{is}, e^{-is}) on [-1, 1]; eigenangles cross at s = 0 (negative control)",
        {"dim": (2, "must be 2")},
    ),
    "kicked": ModelEntry(
        model_kicked,
        "U = exp(-i k(s) K) exp(-i T), K and T seeded GUE matrices of unit norm",
        {"dim": (4, "Hilbert-space dimension"),
         "kick_strength": ([0.0, 1.0], "polynomial coefficients of k(s), ascending"),
         "seed": (7, "RNG seed for K and T"),
         "free_scale": (1.0, "operator norm of T")},
    ),
    "constant": ModelEntry(
        model_constant,
        "U(s) = diag(e^{i a_j}) independent of s; adiabatic evolution is exact",
        {"angles": ([0.7, -1.1], "eigenangles a_j")},
    ),
}


def build_model(model_id: str, **params) -> MapFamily:
    """Construct a zoo model, or load ``sampled`` from ``params['path']``."""
    if model_id == "sampled":
        if set(params) != {"path"}:
            raise TypeError("the sampled model takes exactly one parameter: path")
        return load_sampled_family(params["path"])
    try:
        entry = MODELS[model_id]
    except KeyError:
        raise KeyError(f"unknown model {model_id!r}; known: {sorted(MODELS) + ['sampled']}") from None
    unknown = set(params) - set(entry.params)
    if unknown:
        raise TypeError(f"{model_id} does not take {sorted(unknown)}")
    return entry.factory(**params)
