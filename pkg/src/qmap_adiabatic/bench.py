"""
N-sweeps, log-log order fits and convergence reports.

A sweep runs the full construction for every N in ``N_list`` on one model,
fits ``log value = slope * log N + intercept`` for each deviation and compares
the slope with the expected order. Key reference: docs/config.md.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, defaults
from .adiabatic import SERIES_FIELDS, PipelineConfig, deviation_series
from .errors import (
    AdiabaticError,
    AtFloor,
    ConfigError,
    GapViolation,
    InsufficientPoints,
)
from .models import MODELS, WARPS, PathSchedule, build_model
from .spectral import find_crossing, gap_scan, track_branches

# expected order and rule per reported quantity; "window" means slope within
# -order +- width, "at_least" means slope <= -order + width
CLAIMS: dict[str, tuple[int, str]] = {
    "offdiag_W": (1, "window"),
    "diag_W": (1, "at_least"),
    "offdiag_UW_max": (1, "window"),
    "diag_UW_max": (2, "window"),
    "V_offdiag_max": (1, "window"),
    "V_diag_max": (1, "window"),
    "R2_max": (2, "window"),
}

PASSING = ("pass", "exact")

# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SweepConfig:
    model: str
    params: dict = field(default_factory=dict)
    s_start: float | None = None  # None: the model's default path
    s_end: float | None = None
    N_list: tuple[int, ...] = defaults.N_LIST
    warp: str = "identity"
    cluster_tol: float = defaults.CLUSTER_TOL
    gap_min: float = defaults.GAP_MIN
    fd_step: float = defaults.FD_STEP_REL
    substeps: int = defaults.SUBSTEPS
    richardson: bool = False
    assignment: str = "greedy"
    enforce_intertwining: bool = True
    norm: str = "op"
    value_floor: float = defaults.VALUE_FLOOR
    exact_ceiling: float = defaults.EXACT_CEILING
    window_order1: float = defaults.WINDOW_ORDER1
    window_order2: float = defaults.WINDOW_ORDER2
    seed: int | None = None
    workers: int = 1
    out: str | None = None
    format: str = "csv"

    def __post_init__(self):
        object.__setattr__(self, "N_list", tuple(int(n) for n in self.N_list))
        object.__setattr__(self, "params", dict(self.params))
        self.validate()

    def validate(self) -> None:
        if self.model != "sampled" and self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; known: {sorted(MODELS)} and 'sampled'")
        known = {"path"} if self.model == "sampled" else set(MODELS[self.model].params)
        unknown = set(self.params) - known
        if unknown:
            raise ConfigError(f"model {self.model} does not take {sorted(unknown)}")
        Ns = self.N_list
        if len(Ns) < 4:
            raise ConfigError("N_list needs at least 4 entries for a slope fit")
        if any(n < 2 for n in Ns):
            raise ConfigError("every N in N_list must be >= 2")
        if any(b <= a for a, b in zip(Ns, Ns[1:])):
            raise ConfigError("N_list must be strictly increasing")
        if (self.s_start is None) != (self.s_end is None):
            raise ConfigError("give both s_start and s_end, or neither")
        if self.s_start is not None and not self.s_end > self.s_start:
            raise ConfigError("s_end must exceed s_start")
        if self.warp not in WARPS:
            raise ConfigError(f"unknown warp {self.warp!r}; choose from {sorted(WARPS)}")
        for name in ("cluster_tol", "gap_min", "fd_step", "value_floor", "exact_ceiling",
                     "window_order1", "window_order2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.substeps < 1 or self.workers < 1:
            raise ConfigError("substeps and workers must be >= 1")
        if self.assignment not in ("greedy", "hungarian"):
            raise ConfigError("assignment is 'greedy' or 'hungarian'")
        if self.norm not in ("op", "fro"):
            raise ConfigError("norm is 'op' or 'fro'")
        if self.format not in ("csv", "json"):
            raise ConfigError("format is 'csv' or 'json'")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def model_params(self) -> dict:
        p = dict(self.params)
        if self.seed is not None and self.model in MODELS and "seed" in MODELS[self.model].params:
            p["seed"] = self.seed
        return p

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.cluster_tol, self.gap_min, self.fd_step, self.substeps,
                              self.richardson, self.assignment, self.enforce_intertwining,
                              self.norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["N_list"] = list(self.N_list)
        return d


_TOP_KEYS = {f.name for f in fields(SweepConfig)} - {"model", "params"}


def config_from_mapping(raw: dict, base_dir: Path | None = None) -> SweepConfig:
    """Build a config from flat keys: sweep keys plus the model's own parameters."""
    raw = dict(raw)
    if "model" not in raw:
        raise ConfigError("config needs a 'model' key")
    model = raw.pop("model")
    top = {k: raw.pop(k) for k in list(raw) if k in _TOP_KEYS}
    if model == "sampled" and "path" in raw and base_dir is not None:
        raw["path"] = str((base_dir / raw["path"]).resolve())
    try:
        return SweepConfig(model=model, params=raw, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> SweepConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_mapping(raw, path.parent)


def default_config_path() -> Path:
    return Path(__file__).parent / "data" / "default_sweep.toml"


# ---------------------------------------------------------------------------
# order fits


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    residual: float  # max |log value - fitted line|
    used: tuple[int, ...]
    excluded: tuple[int, ...]  # N values dropped as at-floor

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "residual": self.residual,
                "used": list(self.used), "excluded": list(self.excluded)}


def fit_order(points, value_floor: float = defaults.VALUE_FLOOR) -> FitResult:
    """Least-squares line through ``(log N, log value)``.

    Points with ``value <= 10 * value_floor`` are dropped first. Raises
    :class:`InsufficientPoints` with fewer than 4 usable points and
    :class:`AtFloor` when every point was dropped.
    """
    pts = [(int(n), float(v)) for n, v in points]
    if len(pts) < 4:
        raise InsufficientPoints(f"{len(pts)} points given, a fit needs 4")
    keep = [(n, v) for n, v in pts if v > 10 * value_floor]
    excluded = tuple(n for n, v in pts if not v > 10 * value_floor)
    if not keep:
        raise AtFloor(f"all {len(pts)} values are within 10x of the floor {value_floor:g}")
    if len(keep) < 4:
        raise InsufficientPoints(f"only {len(keep)} points above the floor")
    x = np.log([n for n, _ in keep])
    y = np.log([v for _, v in keep])
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.max(np.abs(y - (slope * x + intercept))))
    return FitResult(float(slope), float(intercept), residual,
                     tuple(n for n, _ in keep), excluded)


def verdict(name: str, values, fit: FitResult | None, config: SweepConfig) -> str:
    """``exact``, ``pass``, ``fail`` or ``insufficient`` for one quantity."""
    if max(values) <= config.exact_ceiling:
        return "exact"
    if fit is None:
        return "insufficient"
    order, rule = CLAIMS[name]
    width = config.window_order1 if order == 1 else config.window_order2
    if rule == "at_least":
        return "pass" if fit.slope <= -order + width else "fail"
    return "pass" if abs(fit.slope + order) <= width else "fail"


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class ConvergenceReport:
    rows: list[dict]  # N, the SERIES_FIELDS values, status, diagnostics
    fits: dict[str, dict]
    verdicts: dict[str, str]
    config: dict
    provenance: dict
    gap: dict | None = None

    @property
    def passed(self) -> bool:
        return (all(r["status"] == "ok" for r in self.rows) and bool(self.verdicts)
                and all(v in PASSING for v in self.verdicts.values()))

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"

    def series(self, name: str) -> list[tuple[int, float]]:
        return [(r["N"], r[name]) for r in self.rows if r["status"] == "ok"]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "fits": self.fits, "verdicts": self.verdicts,
                "config": self.config, "provenance": self.provenance, "gap": self.gap,
                "status": self.status}


def _resolve_path(config: SweepConfig, family) -> tuple[float, float]:
    if config.s_start is not None:
        return config.s_start, config.s_end
    if getattr(family, "domain", None) is not None:
        return family.domain
    return family.default_path


def _run_row(config: SweepConfig, N: int, family=None, frames=None) -> dict:
    row = {"N": N, **{k: None for k in SERIES_FIELDS}, "status": "ok", "diagnostics": {}}
    try:
        if family is None:
            family = build_model(config.model, **config.model_params())
        s0, s1 = _resolve_path(config, family)
        series = deviation_series(family, PathSchedule(s0, s1, N, config.warp),
                                  config.pipeline(), frames)
    except AdiabaticError as exc:
        row["status"] = exc.label
        row["error"] = str(exc)
        return row
    row.update(series.values())
    row["diagnostics"] = series.diagnostics
    return row


def _provenance(elapsed: float) -> dict:
    return {"package": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "elapsed_s": round(elapsed, 3)}


def run_sweep(config: SweepConfig) -> ConvergenceReport:
    """Run every N, fit orders and judge them.

    The gap assumption is checked at the finest N before any row runs; if it
    fails, every row is marked with the error label and no fit is attempted.
    """
    t0 = time.perf_counter()
    try:
        family = build_model(config.model, **config.model_params())
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot build model {config.model!r}: {exc}") from exc
    s0, s1 = _resolve_path(config, family)
    N_max = config.N_list[-1]

    gap_info, finest_frames = None, None
    try:
        finest_frames = track_branches(family, PathSchedule(s0, s1, N_max, config.warp),
                                       config.cluster_tol, config.assignment)
        gap = gap_scan(finest_frames, config.gap_min)
        gap_info = {"min_gap": gap.min_gap, "gap_min": gap.gap_min,
                    "location": list(gap.location) if gap.location else None,
                    "passed": gap.passed}
        gap.raise_if_failed()
        crossing = find_crossing(finest_frames)
        if crossing is not None:
            gap_info.update(min_gap=0.0, location=list(crossing), passed=False)
            raise GapViolation(f"eigenangles of branches {crossing[1]} and {crossing[2]} "
                               f"cross between nodes near s = {crossing[0]:.6g}")
    except AdiabaticError as exc:
        rows = [{"N": n, **{k: None for k in SERIES_FIELDS}, "status": exc.label,
                 "error": str(exc), "diagnostics": {}} for n in config.N_list]
        return ConvergenceReport(rows, {}, {}, config.to_dict(),
                                 _provenance(time.perf_counter() - t0), gap_info)

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_run_row, config, n) for n in config.N_list]
            rows = [f.result() for f in futures]
    else:
        rows = [_run_row(config, n, family, finest_frames if n == N_max else None)
                for n in config.N_list]

    fits: dict[str, dict] = {}
    verdicts: dict[str, str] = {}
    if all(r["status"] == "ok" for r in rows):
        for name in SERIES_FIELDS:
            pts = [(r["N"], r[name]) for r in rows]
            fit = None
            try:
                fit = fit_order(pts, config.value_floor)
                fits[name] = fit.to_dict()
            except (AtFloor, InsufficientPoints) as exc:
                fits[name] = {"error": exc.label, "message": str(exc)}
            verdicts[name] = verdict(name, [v for _, v in pts], fit, config)
    return ConvergenceReport(rows, fits, verdicts, config.to_dict(),
                             _provenance(time.perf_counter() - t0), gap_info)


# ---------------------------------------------------------------------------
# report files

CSV_HEADER = ("N", *SERIES_FIELDS, "status")


def _fmt(x) -> str:
    return "" if x is None else f"{x:.17g}"


def csv_rows(report: ConvergenceReport) -> str:
    """Header plus one line per N; deterministic for a fixed config."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.rows:
        w.writerow([r["N"], *(_fmt(r[k]) for k in SERIES_FIELDS), r["status"]])
    return buf.getvalue()


def format_csv(report: ConvergenceReport) -> str:
    lines = [csv_rows(report)]
    for name in SERIES_FIELDS:
        fit = report.fits.get(name)
        v = report.verdicts.get(name, "not_run")
        if fit is None:
            lines.append(f"# fit {name}: none verdict={v}\n")
        elif "error" in fit:
            lines.append(f"# fit {name}: {fit['error']} verdict={v}\n")
        else:
            lines.append(f"# fit {name}: slope={fit['slope']:.6f} intercept={fit['intercept']:.6f} "
                         f"residual={fit['residual']:.3e} verdict={v}\n")
    if report.gap is not None:
        lines.append(f"# min_gap={report.gap['min_gap']:.6g} gap_min={report.gap['gap_min']:g}\n")
    for r in report.rows:
        if r["status"] != "ok":
            lines.append(f"# row N={r['N']} {r['status']}: {r.get('error', '')}\n")
    lines.append(f"# status={report.status}\n")
    lines.append(f"# elapsed_s={report.provenance['elapsed_s']}\n")
    return "".join(lines)


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def format_json(report: ConvergenceReport) -> str:
    return json.dumps(_jsonable(report.to_dict()), indent=2) + "\n"


def write_report(report: ConvergenceReport, path, fmt: str = "csv") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = format_csv(report) if fmt == "csv" else format_json(report)
    path.write_text(text, encoding="utf-8")
    return path


def summary_table(report: ConvergenceReport) -> str:
    """Human-readable fit summary for the terminal."""
    out = [f"{'quantity':<16}{'slope':>10}{'expected':>10}  verdict"]
    for name in SERIES_FIELDS:
        fit = report.fits.get(name, {})
        slope = f"{fit['slope']:.4f}" if "slope" in fit else "-"
        order, rule = CLAIMS[name]
        exp = f"-{order}" if rule == "window" else f"<=-{order}"
        out.append(f"{name:<16}{slope:>10}{exp:>10}  {report.verdicts.get(name, 'not_run')}")
    bad = [r for r in report.rows if r["status"] != "ok"]
    for r in bad:
        out.append(f"N={r['N']}: {r['status']}")
    out.append(f"status: {report.status} ({report.provenance['elapsed_s']} s)")
    return "\n".join(out)


def with_overrides(config: SweepConfig, **kw) -> SweepConfig:
    """Copy of ``config`` with the non-None keyword values replaced."""
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(config, **kw) if kw else config
