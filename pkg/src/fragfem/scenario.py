"""Scenario files: a flat key-value format with [section] headers.

The grammar is documented in docs/scenario-format.md.  Lines are either
blank, full-line comments starting with '#', section headers, or
``key = value`` pairs; keys are scoped by the current section.  Unknown
keys are rejected by name so typos fail loudly instead of silently
running defaults.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .assembly import GainQuadrature
from .errors import ParseError, ValidationError
from .expressions import parse_expression
from .integrator import DEFAULT_TAU
from .mesh import DomainBox, GridSpec
from .model import (
    HALVING_DELTA,
    SMOOTH,
    DiracIC,
    FieldIC,
    FragmentationKernel,
    SelectionFn,
    TestCase,
    bundled_test_case,
)

MODES = ("run", "moments", "convergence", "validate")
MMS_POLICIES = ("auto", "on", "off")

_KNOWN_KEYS = {
    "": {"mode", "case", "degree", "tau", "mms", "workers"},
    "domain": {"lower", "upper"},
    "grid": {"cells", "grading"},
    "sweep": {"cells", "degrees"},
    "time": {"horizon", "report"},
    "kernel": {"kind", "beta", "gamma", "b0"},
    "ic": {"dirac", "field"},
    "moments": None,          # free-form m<digits> keys
    "quadrature": {"outer", "inner", "cap"},
    "output": {"csv", "json"},
}

_KEY_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_MOMENT_KEY_RE = re.compile(r"m(\d{2,3})$")


@dataclass
class Scenario:
    """A fully validated experiment description."""

    mode: str
    dim: int
    domain: DomainBox
    gamma: SelectionFn
    kernel: FragmentationKernel
    ic: object
    degree: int = 1
    tau: float = DEFAULT_TAU
    horizon: float = 1.0
    horizon_explicit: bool = False
    report_times: tuple = ()
    mms: str = "auto"
    case: Optional[TestCase] = None
    grid: Optional[GridSpec] = None
    sweep_cells: Optional[tuple] = None
    sweep_degrees: Optional[tuple] = None
    moments: dict = field(default_factory=dict)
    quad: Optional[GainQuadrature] = None
    workers: Optional[int] = None
    csv_path: Optional[str] = None
    json_path: Optional[str] = None
    echo: dict = field(default_factory=dict)

    @property
    def case_id(self):
        return self.case.case_id if self.case is not None else None


def _tokenize(text, name):
    """Yield (line_no, section, key, value, key_column) tuples."""
    section = ""
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indent = len(line) - len(line.lstrip())
        if stripped.startswith("["):
            if not stripped.endswith("]") or len(stripped) < 3:
                raise ParseError(f"{name}: malformed section header",
                                 line=ln, column=indent + 1)
            section = stripped[1:-1].strip()
            if section not in _KNOWN_KEYS:
                raise ValidationError(
                    f"{name}: unknown section [{section}] (line {ln})")
            continue
        eq = line.find("=")
        if eq < 0:
            raise ParseError(f"{name}: expected 'key = value'",
                             line=ln, column=indent + 1)
        key = line[:eq].strip()
        if not _KEY_RE.fullmatch(key):
            raise ParseError(f"{name}: invalid key {key!r}",
                             line=ln, column=indent + 1)
        value = line[eq + 1:].strip()
        if not value:
            raise ParseError(f"{name}: empty value for key {key!r}",
                             line=ln, column=eq + 2)
        yield ln, section, key, value, indent + 1


def _check_known(section, key, name, ln):
    known = _KNOWN_KEYS[section]
    if known is None:
        if not _MOMENT_KEY_RE.fullmatch(key):
            raise ValidationError(
                f"{name}: unknown key '{key}' in [moments] (line {ln}); "
                "moment keys look like m00 or m111")
        return
    if key not in known:
        where = f"[{section}]" if section else "top level"
        raise ValidationError(
            f"{name}: unknown key '{key}' at {where} (line {ln})")


def _floats(value, key):
    try:
        return tuple(float(tok) for tok in value.replace(",", " ").split())
    except ValueError:
        raise ValidationError(f"key '{key}': expected numbers, got {value!r}")


def _ints(value, key):
    out = []
    for f in _floats(value, key):
        if f != int(f):
            raise ValidationError(f"key '{key}': expected integers")
        out.append(int(f))
    return tuple(out)


def _cells(value, key):
    # "20x20", "20 20" and a bare "20" (replicated per axis) all work
    toks = value.lower().replace("x", " ").split()
    return _ints(" ".join(toks), key)


def _expr(value, key):
    try:
        return parse_expression(value)
    except ParseError as exc:
        raise ParseError(f"key '{key}': {exc}") from exc


def parse_scenario_text(text, name="<scenario>") -> Scenario:
    pairs = {}
    for ln, section, key, value, col in _tokenize(text, name):
        _check_known(section, key, name, ln)
        full = f"{section}.{key}" if section else key
        if full in pairs:
            raise ValidationError(
                f"{name}: duplicate key '{full}' (line {ln})")
        pairs[full] = value
    return _resolve(pairs, name)


def parse_scenario(path) -> Scenario:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ValidationError(f"cannot read scenario file: {exc}") from exc
    return parse_scenario_text(text, name=str(path))


def _resolve(pairs, name) -> Scenario:
    def take(key, default=None):
        return pairs.pop(key, default)

    mode = take("mode", "run")
    if mode not in MODES:
        raise ValidationError(
            f"key 'mode': expected one of {MODES}, got {mode!r}")
    mms = take("mms", "auto")
    mms = {"force_on": "on", "force_off": "off"}.get(mms, mms)
    if mms not in MMS_POLICIES:
        raise ValidationError(
            f"key 'mms': expected one of {MMS_POLICIES}, got {mms!r}")

    case = None
    case_key = take("case")
    if case_key is not None:
        case = bundled_test_case(case_key)

    # domain: explicit section wins, else the bundled case's box
    if "domain.lower" in pairs or "domain.upper" in pairs:
        low = _floats(take("domain.lower", ""), "domain.lower")
        up = _floats(take("domain.upper", ""), "domain.upper")
        if not low or not up:
            raise ValidationError(
                "keys 'domain.lower' and 'domain.upper' must both be given")
        domain = DomainBox(low, up)
    elif case is not None:
        domain = case.domain
    else:
        raise ValidationError(
            "scenario needs either 'case' or a [domain] section")
    dim = domain.dim

    # kernel/selection: explicit expressions override the bundled case
    kind = take("kernel.kind", None)
    beta_src = take("kernel.beta", None)
    gamma_src = take("kernel.gamma", None)
    b0 = take("kernel.b0", None)
    if gamma_src is not None:
        a0 = float(b0) if b0 is not None else None
        gamma = SelectionFn(_expr(gamma_src, "kernel.gamma"), dim, a0=a0)
    elif case is not None:
        gamma = case.gamma
    else:
        raise ValidationError("scenario needs 'kernel.gamma' or 'case'")
    if kind == "halving":
        kernel = FragmentationKernel(HALVING_DELTA, dim)
    elif beta_src is not None:
        kernel = FragmentationKernel(SMOOTH, dim,
                                     _expr(beta_src, "kernel.beta"))
    elif case is not None:
        kernel = case.beta
    else:
        raise ValidationError(
            "scenario needs 'kernel.beta', kernel.kind = halving, or 'case'")
    if kind is not None and kind not in ("smooth", "halving"):
        raise ValidationError(
            f"key 'kernel.kind': expected smooth or halving, got {kind!r}")

    ic_dirac = take("ic.dirac", None)
    ic_field = take("ic.field", None)
    if ic_dirac is not None and ic_field is not None:
        raise ValidationError("give only one of 'ic.dirac' and 'ic.field'")
    if ic_dirac is not None:
        pt = _floats(ic_dirac, "ic.dirac")
        if len(pt) != dim:
            raise ValidationError(
                f"key 'ic.dirac': {len(pt)} coordinates for a {dim}d domain")
        ic = DiracIC(pt)
    elif ic_field is not None:
        ic = FieldIC(_expr(ic_field, "ic.field"), dim)
    elif case is not None:
        ic = case.ic
    else:
        raise ValidationError("scenario needs an [ic] section or 'case'")

    degree = int(take("degree", 1))
    if degree not in (1, 2, 3):
        raise ValidationError(f"key 'degree': expected 1, 2 or 3, got {degree}")
    tau = float(take("tau", DEFAULT_TAU))
    if tau <= 0.0:
        raise ValidationError("key 'tau': must be positive")

    horizon = take("time.horizon", None)
    horizon_explicit = horizon is not None
    if horizon is not None:
        horizon = float(horizon)
    elif case is not None:
        horizon = case.horizon
    else:
        horizon = 1.0
    if horizon <= 0.0:
        raise ValidationError("key 'time.horizon': must be positive")

    report = take("time.report", None)
    if report is not None:
        report_times = _floats(report, "time.report")
        for t in report_times:
            if not (0.0 <= t <= horizon + 1e-12):
                raise ValidationError(
                    f"key 'time.report': t = {t:g} outside [0, {horizon:g}]")
            k = round(t / tau)
            if abs(t - k * tau) > 1e-8 * max(1.0, horizon):
                raise ValidationError(
                    f"key 'time.report': t = {t:g} is not a multiple of "
                    f"tau = {tau:g}")
    else:
        report_times = ()

    grid = None
    if "grid.cells" in pairs:
        cells = _cells(take("grid.cells"), "grid.cells")
        if len(cells) == 1:
            cells = cells * dim
        if len(cells) != dim:
            raise ValidationError(
                f"key 'grid.cells': {len(cells)} counts for a {dim}d domain")
        grid = GridSpec(cells, take("grid.grading", "uniform"))
    elif "grid.grading" in pairs:
        raise ValidationError("key 'grid.grading': needs grid.cells")

    sweep_cells = None
    if "sweep.cells" in pairs:
        sweep_cells = _ints(take("sweep.cells"), "sweep.cells")
        if len(sweep_cells) < 2:
            raise ValidationError("key 'sweep.cells': need at least two grids")
        if any(b <= a for a, b in zip(sweep_cells, sweep_cells[1:])):
            raise ValidationError(
                "key 'sweep.cells': counts must strictly increase")
    sweep_degrees = None
    if "sweep.degrees" in pairs:
        sweep_degrees = _ints(take("sweep.degrees"), "sweep.degrees")
        if any(d not in (1, 2, 3) for d in sweep_degrees):
            raise ValidationError("key 'sweep.degrees': degrees are 1, 2 or 3")

    moments = dict(case.exact_moments) if case is not None else {}
    for full in [k for k in pairs if k.startswith("moments.")]:
        key = full.split(".", 1)[1]
        digits = _MOMENT_KEY_RE.fullmatch(key).group(1)
        if len(digits) != dim:
            raise ValidationError(
                f"key '{full}': order has {len(digits)} indices for a "
                f"{dim}d problem")
        order = tuple(int(c) for c in digits)
        expr = _expr(pairs.pop(full), full)
        extra = expr.free_identifiers() - {"t"}
        if extra:
            raise ValidationError(
                f"key '{full}': moment expressions may only use t, found "
                f"{sorted(extra)}")
        moments[order] = _time_function(expr)

    quad = None
    if any(k.startswith("quadrature.") for k in pairs):
        cap = take("quadrature.cap", None)
        if cap is not None:
            cap = None if cap.lower() == "none" else float(cap)
        outer = take("quadrature.outer", None)
        quad = GainQuadrature(
            outer_exactness=int(outer) if outer is not None else None,
            inner_exactness=int(take("quadrature.inner", 5)),
            panel_ratio_cap=cap)

    workers = take("workers", None)
    if workers is not None:
        workers = int(workers)
        if workers < 1:
            raise ValidationError("key 'workers': must be >= 1")

    csv_path = take("output.csv", None)
    json_path = take("output.json", None)

    if pairs:
        raise ValidationError(
            f"{name}: unused keys {sorted(pairs)}")   # pragma: no cover

    echo = {"mode": mode, "case": case.case_id if case else None,
            "degree": degree, "tau": tau, "horizon": horizon,
            "mms": mms, "dim": dim,
            "grading": grid.grading if grid else None,
            "cells": grid.cells if grid else None,
            "sweep_cells": sweep_cells, "sweep_degrees": sweep_degrees}

    return Scenario(mode=mode, dim=dim, domain=domain, gamma=gamma,
                    kernel=kernel, ic=ic, degree=degree, tau=tau,
                    horizon=horizon, horizon_explicit=horizon_explicit,
                    report_times=tuple(report_times),
                    mms=mms, case=case, grid=grid, sweep_cells=sweep_cells,
                    sweep_degrees=sweep_degrees, moments=moments, quad=quad,
                    workers=workers, csv_path=csv_path, json_path=json_path,
                    echo=echo)


def _time_function(expr):
    def fn(t):
        return float(expr.evaluate({"t": float(t)}))
    return fn
