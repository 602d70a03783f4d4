"""File formats, the bundled published dataset and run configuration.

Coupling-table CSV format (matrix form)::

    # units: Hz
    # projection: averaged
    spin,C1,C2,...
    C1,-,61.90(8),...

Cells are ``-`` (not measured), ``<1`` (weak, upper bound in Hz),
``value(unc)`` in concise uncertainty notation, optionally followed by
``*`` for couplings resolved in only one m_s projection.

The structured format is JSON::

    {"units": "Hz", "projection": "averaged", "spins": [...],
     "entries": [{"a": "C1", "b": "C2", "frequency_hz": 61.9, "sigma_hz": 0.08,
                  "weak_upper_bound": false, "single_projection_only": false}, ...]}
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal
import hashlib
import io
import json
import math
import os
from pathlib import Path
import re
from typing import Iterable

import numpy as np

from .constants import OMEGA0_KHZ
from .model import (CouplingEntry, CouplingTable, Projection, SpinRecord, Structure,
                    hyperfine_from_frequencies, is_nitrogen, residuals_and_xi)


class LoadError(ValueError):
    pass


DATA_DIR_ENV = "SPINCLUSTER_DATA_DIR"
WORKERS_ENV = "SPINCLUSTER_WORKERS"

_UNC = re.compile(r"^\s*([+-]?\s*\d*\.?\d*)\((\d+)\)\s*$")


def parse_uncertain(token: str) -> tuple[float, float]:
    """Parse concise uncertainty notation: '61.90(9)' -> (61.90, 0.09)."""
    value, sigma, _ = _parse_with_resolution(token)
    return value, sigma


def _parse_with_resolution(token: str) -> tuple[float, float, float]:
    token = token.strip().replace(" ", "")
    m = _UNC.match(token)
    text, unc = (m.group(1), m.group(2)) if m else (token, None)
    try:
        dec = Decimal(text)
    except ArithmeticError:
        raise LoadError(f"cannot parse value {token!r}") from None
    if not dec.is_finite():
        raise LoadError(f"cannot parse value {token!r}")
    exponent = dec.as_tuple().exponent
    resolution = float(Decimal(1).scaleb(exponent))
    sigma = float(Decimal(unc).scaleb(exponent)) if unc is not None else 0.0
    return float(dec), sigma, resolution


def format_uncertain(value: float, sigma: float) -> str:
    if sigma <= 0:
        return repr(float(value))
    # enough decimals for every printed digit of both numbers
    digits = max(0, -Decimal(repr(float(value))).as_tuple().exponent,
                 -Decimal(repr(float(sigma))).as_tuple().exponent)
    unc = round(sigma * 10 ** digits)
    return f"{value:.{digits}f}({unc})"


def parse_cell(token: str, projection: Projection) -> CouplingEntry | None:
    t = token.strip()
    if t in ("", "-"):
        return None
    single = t.endswith("*")
    t = t.rstrip("*").strip()
    if t.startswith("<"):
        bound = float(t[1:])
        return CouplingEntry(bound, 0.0, projection, weak_upper_bound=True, single_projection_only=single)
    value, sigma, res = _parse_with_resolution(t)
    return CouplingEntry(value, sigma, projection, single_projection_only=single, resolution_hz=res)


def _split_header(lines: list[str]) -> tuple[dict, list[str]]:
    meta, body = {}, []
    for line in lines:
        s = line.strip()
        if s.startswith("#"):
            if ":" in s:
                k, v = s[1:].split(":", 1)
                meta[k.strip().lower()] = v.strip()
        elif s:
            body.append(line)
    return meta, body


def _coupling_table_from_csv(text: str) -> CouplingTable:
    meta, body = _split_header(text.splitlines())
    units = meta.get("units", "Hz")
    if units.lower() != "hz":
        raise LoadError(f"coupling tables must be in Hz, got {units!r}")
    projection = Projection(meta.get("projection", "averaged"))
    if not body:
        return CouplingTable([], projection=projection)
    rows = list(csv.reader(body))
    header = [h.strip() for h in rows[0][1:]]
    table = CouplingTable(list(header), projection=projection)
    seen: dict[tuple[str, str], CouplingEntry] = {}
    conflicts = []
    for row in rows[1:]:
        a = row[0].strip()
        if a not in header:
            raise LoadError(f"unknown spin label {a!r}")
        if len(row) - 1 != len(header):
            raise LoadError(f"row {a} has {len(row) - 1} cells, expected {len(header)}")
        for b, cell in zip(header, row[1:]):
            e = parse_cell(cell, projection)
            if e is None:
                continue
            if a == b:
                raise LoadError(f"diagonal entry for {a}")
            key = (a, b) if a < b else (b, a)
            if key in seen and seen[key] != e:
                conflicts.append(f"{a}-{b}")
                continue
            seen[key] = e
    if conflicts:
        raise LoadError("asymmetric cells with conflicting values: " + ", ".join(sorted(set(conflicts))))
    for (a, b), e in seen.items():
        table.set(a, b, e)
    return table


def _coupling_table_from_json(text: str) -> CouplingTable:
    doc = json.loads(text)
    if doc.get("units", "Hz").lower() != "hz":
        raise LoadError("coupling tables must be in Hz")
    projection = Projection(doc.get("projection", "averaged"))
    table = CouplingTable(list(doc.get("spins", [])), projection=projection)
    for item in doc.get("entries", []):
        a, b = item["a"], item["b"]
        for s in (a, b):
            if s not in table.spins:
                raise LoadError(f"unknown spin label {s!r}")
        e = CouplingEntry(float(item["frequency_hz"]), float(item.get("sigma_hz", 0.0)),
                          Projection(item.get("ms_projection", projection.value)),
                          bool(item.get("weak_upper_bound", False)),
                          bool(item.get("single_projection_only", False)))
        old = table.get(a, b)
        if old is not None and old != e:
            raise LoadError(f"conflicting entries for {a}-{b}")
        table.set(a, b, e)
    return table


def load_coupling_table(path, format: str | None = None) -> CouplingTable:
    p = Path(path)
    text = p.read_text()
    fmt = format or ("structured" if p.suffix.lower() == ".json" else "csv")
    if fmt == "csv":
        return _coupling_table_from_csv(text)
    if fmt in ("structured", "json"):
        return _coupling_table_from_json(text)
    raise LoadError(f"unknown table format {fmt!r}")


def dump_coupling_table(table: CouplingTable, path, format: str = "csv") -> None:
    p = Path(path)
    if format in ("structured", "json"):
        doc = {"units": "Hz", "projection": table.projection.value, "spins": table.spins,
               "entries": [{"a": a, "b": b, "frequency_hz": e.frequency_hz, "sigma_hz": e.sigma_hz,
                            "ms_projection": e.ms_projection.value,
                            "weak_upper_bound": e.weak_upper_bound,
                            "single_projection_only": e.single_projection_only}
                           for a, b, e in table]}
        p.write_text(json.dumps(doc, indent=1))
        return
    buf = io.StringIO()
    buf.write(f"# units: Hz\n# projection: {table.projection.value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["spin"] + table.spins)
    for a in table.spins:
        row = [a]
        for b in table.spins:
            e = table.get(a, b)
            if e is None:
                row.append("-")
            elif e.weak_upper_bound:
                row.append(f"<{e.frequency_hz:g}" + ("*" if e.single_projection_only else ""))
            else:
                row.append(format_uncertain(e.frequency_hz, e.sigma_hz)
                           + ("*" if e.single_projection_only else ""))
        w.writerow(row)
    p.write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# structures


def structure_to_dict(s: Structure) -> dict:
    return {
        "ids": list(s.ids),
        "coordinates": s.coordinates.tolist(),
        "gauge": s.gauge,
        "uncertainties": None if s.uncertainties is None else
        [[None if np.isnan(v) else v for v in row] for row in s.uncertainties.tolist()],
        "xi": s.xi,
        "units": "angstrom",
    }


def structure_from_dict(doc: dict) -> Structure:
    unc = doc.get("uncertainties")
    if unc is not None:
        unc = np.array([[np.nan if v is None else v for v in row] for row in unc], dtype=float)
    return Structure(list(doc["ids"]), np.array(doc["coordinates"], dtype=float),
                     dict(doc.get("gauge") or {}), unc, doc.get("xi"))


def export_structure(structure: Structure, path, format: str | None = None) -> None:
    """Write a structure as JSON (full metadata) or XYZ (element, x, y, z, label)."""
    p = Path(path)
    fmt = format or ("xyz" if p.suffix.lower() == ".xyz" else "json")
    p.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        p.write_text(json.dumps(structure_to_dict(structure), indent=1))
    elif fmt == "xyz":
        lines = [str(len(structure)),
                 json.dumps({"gauge": structure.gauge, "xi": structure.xi, "units": "angstrom"})]
        for sid, (x, y, z) in zip(structure.ids, structure.coordinates):
            el = "N" if is_nitrogen(sid) else "C"
            lines.append(f"{el} {float(x)!r} {float(y)!r} {float(z)!r} {sid}")
        p.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown structure format {fmt!r}")


def import_structure(path, format: str | None = None) -> Structure:
    p = Path(path)
    fmt = format or ("xyz" if p.suffix.lower() == ".xyz" else "json")
    if fmt == "json":
        return structure_from_dict(json.loads(p.read_text()))
    lines = p.read_text().splitlines()
    n = int(lines[0])
    try:
        meta = json.loads(lines[1])
    except json.JSONDecodeError:
        meta = {}
    ids, xyz = [], []
    for k, line in enumerate(lines[2:2 + n]):
        parts = line.split()
        xyz.append([float(v) for v in parts[1:4]])
        ids.append(parts[4] if len(parts) > 4 else f"{parts[0]}{k + 1}")
    return Structure(ids, np.array(xyz), meta.get("gauge") or {}, None, meta.get("xi"))


def verify_structure_xi(structure: Structure, table: CouplingTable, rtol: float = 1e-9) -> bool:
    """True when the stored xi matches a recomputation against ``table``."""
    if structure.xi is None:
        return False
    xi = residuals_and_xi(structure, table).xi
    return math.isclose(xi, structure.xi, rel_tol=rtol, abs_tol=1e-12)


# ---------------------------------------------------------------------------
# bundled dataset


def data_dir() -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else Path(__file__).with_name("data")


BUNDLED_FILES = ("spins.csv", "couplings_minus1.csv", "couplings_plus1.csv",
                 "couplings_averaged.csv", "structures.csv")


def checksums(directory: Path | None = None) -> dict[str, str]:
    d = directory or data_dir()
    return {name: hashlib.sha256((d / name).read_bytes()).hexdigest() for name in BUNDLED_FILES}


def load_spin_records(path) -> list[SpinRecord]:
    meta, body = _split_header(Path(path).read_text().splitlines())
    out = []
    for row in csv.DictReader(body):
        wm, _ = parse_uncertain(row["omega_minus1"])
        wp, _ = parse_uncertain(row["omega_plus1"])
        w0 = parse_uncertain(row["omega_0"])[0] if row.get("omega_0") else OMEGA0_KHZ
        est = hyperfine_from_frequencies(wm, wp, w0)
        # published estimates are kept when present; they may use per-spin omega_0
        a_par = parse_uncertain(row["A_par"])[0] if row.get("A_par") else est.A_par
        a_perp = parse_uncertain(row["A_perp"])[0] if row.get("A_perp") else est.A_perp
        out.append(SpinRecord(row["spin"], wm, wp, w0, a_par, a_perp, est.imaginary))
    return out


def load_structures(path) -> dict[str, Structure]:
    """Reference structures keyed by column group (diamond, diamond_fit, cubic, cubic_fit)."""
    meta, body = _split_header(Path(path).read_text().splitlines())
    rows = list(csv.DictReader(body))
    groups = sorted({k.rsplit("_", 1)[0] for k in rows[0] if k != "spin"},
                    key=lambda g: ("diamond", "diamond_fit", "cubic", "cubic_fit").index(g)
                    if g in ("diamond", "diamond_fit", "cubic", "cubic_fit") else 99)
    out = {}
    for g in groups:
        ids, xyz, unc = [], [], []
        for row in rows:
            cells = [row[f"{g}_{a}"] for a in "xyz"]
            if not all(c.strip() for c in cells):
                continue
            parsed = [parse_uncertain(c) for c in cells]
            ids.append(row["spin"])
            xyz.append([v for v, _ in parsed])
            unc.append([s for _, s in parsed])
        u = np.array(unc)
        out[g] = Structure(ids, np.array(xyz), {"source": g}, u if np.any(u > 0) else None)
    return out


@dataclass
class Dataset:
    spins: list[SpinRecord]
    tables: dict[str, CouplingTable]
    structures: dict[str, Structure]
    provenance: dict = field(default_factory=dict)

    @property
    def averaged(self) -> CouplingTable:
        return self.tables["averaged"]

    def carbon_table(self, projection: str = "averaged") -> CouplingTable:
        t = self.tables[projection]
        return t.subset([s for s in t.spins if not is_nitrogen(s)])

    def record(self, spin_id: str) -> SpinRecord:
        for r in self.spins:
            if r.id == spin_id:
                return r
        raise KeyError(spin_id)


def check_averaged_consistency(minus1: CouplingTable, plus1: CouplingTable,
                               averaged: CouplingTable, include_sigma: bool = False) -> list[str]:
    """Pairs where the averaged value differs from the mean of the +-1 values.

    The allowed slack is the printed rounding of the three numbers, plus the
    stated uncertainties when ``include_sigma`` is set.
    """
    bad = []
    for a, b, e in averaged:
        em, ep = minus1.get(a, b), plus1.get(a, b)
        if em is None or ep is None or e.weak_upper_bound or em.weak_upper_bound or ep.weak_upper_bound:
            continue
        mean = 0.5 * (em.frequency_hz + ep.frequency_hz)
        tol = 0.5 * (_rounding(em) + _rounding(ep)) + _rounding(e) + 1e-9
        if include_sigma:
            tol += 0.5 * math.hypot(em.sigma_hz, ep.sigma_hz) + e.sigma_hz
        if abs(mean - e.frequency_hz) > tol:
            bad.append(f"{a}-{b}")
    return bad


def _rounding(e: CouplingEntry) -> float:
    # half a unit of the last printed digit
    if e.resolution_hz > 0:
        return 0.5 * e.resolution_hz
    if e.sigma_hz > 0:
        return 0.5 * 10.0 ** math.floor(math.log10(e.sigma_hz))
    return 0.005


def single_projection_flags(minus1: CouplingTable, plus1: CouplingTable,
                            averaged: CouplingTable) -> set[tuple[str, str]]:
    """Pairs whose averaged value lacks a numeric value in both projections."""
    out = set()
    for a, b, e in averaged:
        if e.weak_upper_bound:
            continue
        em, ep = minus1.get(a, b), plus1.get(a, b)
        ok = em is not None and ep is not None and not em.weak_upper_bound and not ep.weak_upper_bound
        if not ok:
            out.add((a, b))
    return out


def load_dataset(directory=None, validate: bool = True) -> Dataset:
    d = Path(directory) if directory else data_dir()
    spins = load_spin_records(d / "spins.csv")
    tables = {
        "minus1": load_coupling_table(d / "couplings_minus1.csv"),
        "plus1": load_coupling_table(d / "couplings_plus1.csv"),
        "averaged": load_coupling_table(d / "couplings_averaged.csv"),
    }
    structures = load_structures(d / "structures.csv")
    if validate:
        bad = check_averaged_consistency(tables["minus1"], tables["plus1"], tables["averaged"],
                                         include_sigma=True)
        if bad:
            raise LoadError("averaged table inconsistent with +-1 tables: " + ", ".join(bad))
        flagged = {(a, b) for a, b, e in tables["averaged"] if e.single_projection_only}
        derived = single_projection_flags(tables["minus1"], tables["plus1"], tables["averaged"])
        if flagged != derived:
            raise LoadError("single-projection markers disagree with the +-1 tables")
    rounding_only = check_averaged_consistency(tables["minus1"], tables["plus1"], tables["averaged"])
    return Dataset(spins, tables, structures, {"checksums": checksums(d), "directory": str(d),
                                               "averaging_beyond_rounding": rounding_only})


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    mode: str = "diamond"
    N_L: int = 11
    a0: float = 3.5668
    tolerance: float = 1.1
    tolerance_single: float = 3.0
    x_cutoff: int = 5000
    n_tilde: float = 2e-8
    spin_order: list[str] | None = None
    order_strategy: str = "greedy"
    origin_spin: str | None = None
    plane_spin: str | None = None
    pre_rotation_deg: float | None = None
    Bz: float = 403.0
    Bperp_max: float = 1.0
    seed: int = 0
    workers: int = 1
    timeout_s: float | None = None

    def __post_init__(self):
        if self.mode not in ("diamond", "cubic"):
            raise ValueError("mode must be 'diamond' or 'cubic'")
        if not (self.tolerance > 0 and self.tolerance_single > 0):
            raise ValueError("tolerances must be positive")
        if self.x_cutoff < 1:
            raise ValueError("x_cutoff must be >= 1")
        if self.N_L < 1:
            raise ValueError("N_L must be >= 1")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        """Flat ``key = value`` file (an optional [run] section header is accepted)."""
        text = Path(path).read_text()
        if not re.search(r"^\s*\[", text, re.M):
            text = "[run]\n" + text
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keys are case sensitive (N_L, Bz)
        cp.read_string(text)
        sect = cp[cp.sections()[0]]
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in sect.items():
            if k not in types:
                raise LoadError(f"unknown config key {k!r}")
            kw[k] = _coerce(k, v, cls)
        cfg = cls(**kw)
        return cfg.with_env()

    def with_env(self) -> "RunConfig":
        w = os.environ.get(WORKERS_ENV)
        if w:
            self.workers = int(w)
        return self

    def to_solver_params(self, **overrides):
        from .lattice import SolverParams

        kw = {k: getattr(self, k) for k in ("mode", "N_L", "a0", "tolerance", "tolerance_single", "x_cutoff",
                                            "n_tilde", "spin_order", "order_strategy", "origin_spin",
                                            "workers", "timeout_s")}
        kw.update(overrides)
        return SolverParams(**kw)

    def gauge(self):
        from .refine import GaugeSpec

        return GaugeSpec(self.origin_spin, self.plane_spin, self.pre_rotation_deg)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if v is None:
                continue
            if isinstance(v, list):
                v = ",".join(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, value: str, cls) -> object:
    default = {f.name: f.default for f in fields(cls)}[key]
    v = value.strip()
    if key == "spin_order":
        return [s.strip() for s in v.split(",") if s.strip()]
    if key in ("origin_spin", "plane_spin", "mode", "order_strategy"):
        return v
    if key in ("pre_rotation_deg", "timeout_s"):
        return float(v)
    if isinstance(default, bool):
        return v.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    return v
