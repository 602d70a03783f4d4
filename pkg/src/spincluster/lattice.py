"""Sequential lattice-constrained structure search.

Spins are placed one at a time. Each new spin is positioned relative to the
already placed spin it couples to most strongly (the anchor), using a lookup
of lattice displacement vectors sorted by their predicted coupling. Every
candidate must then reproduce all measured couplings to the placed spins
within tolerance. Surviving configurations are ranked by their partial sum
of squares and the best ``x_cutoff`` are kept.

Two lattices are supported: the diamond lattice with [111] along z, and a
cubic grid generated afresh for every anchor coupling.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
import math
import os
from pathlib import Path
import time

import numpy as np

from . import crystal
from .constants import DEFAULT, PhysicalConstants
from .model import (CouplingEntry, CouplingTable, Structure, WEAK_VALUE_HZ,
                    coupling_frequencies, is_nitrogen)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# candidates per vectorized block
_BLOCK = 1_500_000


class ExhaustedError(RuntimeError):
    """No configuration survived the placement of ``spin``."""

    def __init__(self, spin: str, partner: str | None, min_violation_hz: float | None, partial=None):
        self.spin = spin
        self.partner = partner
        self.min_violation_hz = min_violation_hz
        self.partial = partial
        msg = f"no configuration survives placing {spin}"
        if partner is not None:
            msg += f"; tightest violated coupling {spin}-{partner} (best |df| = {min_violation_hz:.3f} Hz)"
        super().__init__(msg)


class SolveTimeout(RuntimeError):
    def __init__(self, partial: "SolveResult"):
        self.partial = partial
        super().__init__(f"timed out after placing {len(partial.configs.placed)} spins")


# ---------------------------------------------------------------------------
# lattices and lookups


@dataclass
class DiamondLattice:
    N_L: int
    a0: float
    ints: np.ndarray  # (n, 3) crystal coordinates in a0/4 units
    sites: np.ndarray  # (n, 3) lab coordinates, angstrom

    basis = crystal.PRIMITIVE
    second_basis_offset = crystal.BASIS_OFFSET

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def volume_nm3(self) -> float:
        return (2 * self.N_L) ** 3 * self.a0 ** 3 / 4.0 * 1e-3


def generate_diamond_lattice(N_L: int = 11, a0: float = DEFAULT.a0) -> DiamondLattice:
    """2(2N_L+1)^3 sites: the FCC parallelepiped spanned by the primitive vectors plus its
    (1,1,1)a0/4 partner, centred on an atom at the origin."""
    if N_L < 1:
        raise ValueError("N_L must be >= 1")
    r = np.arange(-N_L, N_L + 1)
    ijk = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    a_sites = ijk @ crystal.PRIMITIVE
    ints = np.concatenate([a_sites, a_sites + crystal.BASIS_OFFSET])
    return DiamondLattice(N_L, a0, ints, crystal.to_lab(ints, a0))


@dataclass
class CouplingLookup:
    """Displacement vectors sorted by their predicted coupling |C|/4pi (Hz)."""

    couplings: np.ndarray  # ascending
    vectors: np.ndarray  # (K, 3) angstrom
    ints: np.ndarray | None  # (K, 3) crystal coordinates (diamond only)
    alpha: float

    @classmethod
    def from_vectors(cls, vectors: np.ndarray, alpha: float, ints: np.ndarray | None = None):
        v = np.asarray(vectors, dtype=float)
        nz = np.einsum("ij,ij->i", v, v) > 0
        v = v[nz]
        ints = None if ints is None else np.asarray(ints)[nz]
        f = coupling_frequencies(v, alpha)
        order = np.argsort(f, kind="stable")
        return cls(f[order], v[order], None if ints is None else ints[order], alpha)

    def __len__(self) -> int:
        return len(self.couplings)

    def query(self, f: float, tol: float) -> np.ndarray:
        """Indices with |f - predicted| < tol (strict)."""
        lo = np.searchsorted(self.couplings, f - tol, side="right")
        hi = np.searchsorted(self.couplings, f + tol, side="left")
        return np.arange(lo, hi)


def diamond_lookup(lattice: DiamondLattice, gamma_i: float | None = None, gamma_j: float | None = None,
                   constants: PhysicalConstants = DEFAULT) -> CouplingLookup:
    gi = constants.gamma_c if gamma_i is None else gamma_i
    gj = constants.gamma_c if gamma_j is None else gamma_j
    return CouplingLookup.from_vectors(lattice.sites, constants.alpha(gi, gj), lattice.ints)


def candidate_vectors(coupling: CouplingEntry | float, lookup: CouplingLookup, tol: float,
                      weak_value: float = WEAK_VALUE_HZ):
    """Lookup vectors whose predicted coupling is within ``tol`` of the measured one.

    Returns (lab vectors, integer vectors or None). An empty result is a dead branch.
    """
    f = coupling.value(weak_value) if isinstance(coupling, CouplingEntry) else float(coupling)
    idx = lookup.query(f, tol)
    return lookup.vectors[idx], (None if lookup.ints is None else lookup.ints[idx])


@dataclass(frozen=True)
class CubicLatticeSpec:
    coupling_hz: float
    dr_max: float  # angstrom
    L: float  # angstrom
    N_L: int
    spacing: float  # angstrom
    n_tilde: float

    @property
    def n_sites(self) -> int:
        return (2 * self.N_L + 1) ** 3

    def vectors(self) -> np.ndarray:
        r = np.arange(-self.N_L, self.N_L + 1) * self.spacing
        return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def cubic_lattice_for_coupling(coupling_hz: float, constants: PhysicalConstants = DEFAULT,
                               n_tilde: float = 2e-8, gamma_i: float | None = None,
                               gamma_j: float | None = None) -> CubicLatticeSpec:
    """Cube just large enough to contain every separation compatible with ``coupling_hz``.

    The largest separation is reached along z, where |C| = 2 alpha / r^3.
    """
    if not coupling_hz > 0:
        raise ValueError("coupling must be positive")
    gi = constants.gamma_c if gamma_i is None else gamma_i
    gj = constants.gamma_c if gamma_j is None else gamma_j
    C = 4.0 * math.pi * coupling_hz
    dr_max_m = (2.0 * constants.alpha(gi, gj) / C) ** (1.0 / 3.0)
    N_L = max(1, int(round(n_tilde / dr_max_m)))
    dr = dr_max_m * 1e10
    L = 2.0 * dr
    return CubicLatticeSpec(coupling_hz, dr, L, N_L, L / (2 * N_L), n_tilde)


def cubic_lookup(spec: CubicLatticeSpec, alpha: float) -> CouplingLookup:
    return CouplingLookup.from_vectors(spec.vectors(), alpha)


# ---------------------------------------------------------------------------
# symmetry reduction


def _orbit_canonical(points: np.ndarray, ops: list[np.ndarray], decimals: int = 9) -> np.ndarray:
    """Mask selecting points that are the lexicographic minimum of their orbit."""
    p = np.round(points, decimals)
    keep = np.ones(len(p), dtype=bool)
    for op in ops:
        q = np.round(points @ op.T, decimals)
        # q < p lexicographically (x, then y, then z)
        less = (q[:, 0] < p[:, 0]) | ((q[:, 0] == p[:, 0]) & (
            (q[:, 1] < p[:, 1]) | ((q[:, 1] == p[:, 1]) & (q[:, 2] < p[:, 2]))))
        keep &= ~less
    return keep


_CUBIC_SECOND_OPS = [np.diag([-1.0, 1.0, 1.0]), np.diag([1.0, 1.0, -1.0]), np.diag([-1.0, 1.0, -1.0])]


def reduce_symmetry(candidates: np.ndarray, mode: str = "diamond", step: int = 1,
                    a0: float = DEFAULT.a0, eps: float = 1e-9) -> np.ndarray:
    """Mask of candidate positions to keep (positions relative to the first spin).

    diamond, step 1: one representative per C3v orbit (lexicographic minimum).
    cubic, step 1: y = 0, then one representative under x -> -x and z -> -z.
    cubic, step 2: y >= 0.
    Any other step keeps everything.
    """
    c = np.asarray(candidates, dtype=float).reshape(-1, 3)
    if mode == "diamond":
        if step != 1:
            return np.ones(len(c), dtype=bool)
        return _orbit_canonical(c, crystal.point_group_ops(a0))
    if mode == "cubic":
        if step == 1:
            on_plane = np.abs(c[:, 1]) < eps
            return on_plane & _orbit_canonical(c, _CUBIC_SECOND_OPS)
        if step == 2:
            return c[:, 1] > -eps
        return np.ones(len(c), dtype=bool)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# configurations


@dataclass
class CandidateConfiguration:
    placed: list[str]
    coordinates: np.ndarray  # (m, 3) angstrom
    xi_partial: float

    def as_structure(self, gauge: dict | None = None) -> Structure:
        return Structure(list(self.placed), self.coordinates.copy(), dict(gauge or {}), None, self.xi_partial)


@dataclass
class ConfigSet:
    """All retained configurations as arrays (ranked by xi)."""

    placed: list[str]
    pos: np.ndarray  # (n, m, 3) float angstrom
    xi: np.ndarray  # (n,)
    ints: np.ndarray | None = None  # (n, m, 3) crystal coordinates in diamond mode

    def __len__(self) -> int:
        return len(self.xi)

    def configuration(self, k: int) -> CandidateConfiguration:
        return CandidateConfiguration(list(self.placed), self.pos[k].copy(), float(self.xi[k]))

    def configurations(self) -> list[CandidateConfiguration]:
        return [self.configuration(k) for k in range(len(self))]

    @classmethod
    def from_configurations(cls, configs: list[CandidateConfiguration], a0: float | None = None):
        placed = list(configs[0].placed)
        pos = np.stack([c.coordinates for c in configs])
        xi = np.array([c.xi_partial for c in configs])
        ints = None
        if a0 is not None:
            ints, d = crystal.snap(pos.reshape(-1, 3), a0)
            if np.max(d) > 1e-6:
                raise ValueError("configurations are not on the diamond lattice")
            ints = ints.reshape(pos.shape)
        return cls(placed, pos, xi, ints)


@dataclass
class Tolerances:
    T: float = 1.1
    T_single: float = 3.0

    def for_entry(self, e: CouplingEntry) -> float:
        return self.T_single if e.single_projection_only else self.T


@dataclass
class StepRecord:
    spin: str
    anchor: str | None
    anchor_hz: float | None
    lookup_vectors: int
    candidates: int
    survivors: int
    kept: int
    dead_parents: int
    seconds: float


# ---------------------------------------------------------------------------
# the placement step


def _constraints(new_spin: str, placed: list[str], table: CouplingTable, tols: Tolerances,
                 weak_value: float):
    """(placed index, measured value, tolerance, partner id) sorted strongest first."""
    out = []
    for k, s in enumerate(placed):
        e = table.get(new_spin, s)
        if e is not None:
            out.append((k, e.value(weak_value), tols.for_entry(e), s, e.weak_upper_bound))
    # strongest, non-weak constraints prune best
    out.sort(key=lambda c: (c[4], -c[1], c[0]))
    return [c[:4] for c in out]


def choose_anchor(new_spin: str, placed: list[str], table: CouplingTable) -> tuple[str, CouplingEntry]:
    best = None
    for s in placed:
        e = table.get(new_spin, s)
        if e is None or e.weak_upper_bound:
            continue
        if best is None or e.frequency_hz > best[1].frequency_hz:
            best = (s, e)
    if best is None:
        for s in placed:
            e = table.get(new_spin, s)
            if e is not None:
                return s, e
        raise ValueError(f"{new_spin} has no measured coupling to any placed spin")
    return best


def _expand_block(args):
    """Candidates for a block of parent configurations. Pure function (runs in workers)."""
    (parent_idx, anchor_pos, anchor_int, vec, vec_int, others_pos, others_int,
     cons, xi_parent, alpha, keep, mode, min_sep, y_nonneg) = args
    n = len(parent_idx)
    K = len(vec)
    if mode == "diamond":
        sign = np.where(crystal.sublattice(anchor_int) == 0, 1, -1)
        cand_int = (anchor_int[:, None, :] + sign[:, None, None] * vec_int[None, :, :]).reshape(-1, 3)
        cand = (anchor_pos[:, None, :] + sign[:, None, None] * vec[None, :, :]).reshape(-1, 3)
    else:
        cand_int = None
        cand = (anchor_pos[:, None, :] + vec[None, :, :]).reshape(-1, 3)
    parent = np.repeat(np.arange(n), K)
    if y_nonneg:
        # the first spin is the origin of every configuration
        ok = reduce_symmetry(cand, "cubic", 2)
        cand, parent = cand[ok], parent[ok]
    xi_new = np.zeros(len(cand))
    best_viol = {}
    for k, fval, tol, pid in cons:
        if len(cand) == 0:
            break
        d = cand - others_pos[parent, k]
        r = fval - coupling_frequencies(d, alpha)
        ok = np.abs(r) < tol
        if not ok.any():
            best_viol[pid] = float(np.min(np.abs(r)))
        cand, parent, xi_new, r = cand[ok], parent[ok], xi_new[ok], r[ok]
        if cand_int is not None:
            cand_int = cand_int[ok]
        xi_new += r * r
    # no two spins on the same site
    if len(cand):
        m = others_pos.shape[1]
        free = np.ones(len(cand), dtype=bool)
        for k in range(m):
            if cand_int is not None:
                free &= np.any(cand_int != others_int[parent, k], axis=1)
            else:
                dd = cand - others_pos[parent, k]
                free &= np.einsum("ij,ij->i", dd, dd) > min_sep * min_sep
        cand, parent, xi_new = cand[free], parent[free], xi_new[free]
        if cand_int is not None:
            cand_int = cand_int[free]
    alive = np.zeros(n, dtype=bool)
    alive[parent] = True
    survivors = len(cand)
    xi_tot = xi_parent[parent] + xi_new
    gparent = parent_idx[parent]
    if survivors > keep:
        sel = _rank(xi_tot, gparent, cand)[:keep]
        cand, gparent, xi_tot = cand[sel], gparent[sel], xi_tot[sel]
        if cand_int is not None:
            cand_int = cand_int[sel]
    return cand, cand_int, gparent, xi_tot, survivors, int(n - alive.sum()), best_viol


def _rank(xi: np.ndarray, parent: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Total order: xi, then parent rank, then new coordinates."""
    return np.lexsort((cand[:, 2], cand[:, 1], cand[:, 0], parent, xi))


def place_next_spin(configs: ConfigSet, new_spin: str, table: CouplingTable, lookup: CouplingLookup,
                    tolerances: Tolerances = Tolerances(), cutoff: int = 5000, *, mode: str = "diamond",
                    step: int | None = None, a0: float = DEFAULT.a0, weak_value: float = WEAK_VALUE_HZ,
                    workers: int = 1, min_separation: float = 1e-6,
                    anchor: tuple[str, CouplingEntry] | None = None) -> tuple[ConfigSet, StepRecord]:
    """Extend every configuration by ``new_spin``; return the ranked, truncated set."""
    t0 = time.perf_counter()
    placed = configs.placed
    a_id, a_entry = anchor or choose_anchor(new_spin, placed, table)
    a_k = placed.index(a_id)
    vec, vec_int = candidate_vectors(a_entry, lookup, tolerances.for_entry(a_entry), weak_value)
    step = len(placed) if step is None else step
    if step == 1:
        # first spin sits at the origin in every configuration
        keep = reduce_symmetry(vec, mode, 1, a0)
        vec, vec_int = vec[keep], (None if vec_int is None else vec_int[keep])
    cons = _constraints(new_spin, placed, table, tolerances, weak_value)
    n = len(configs)
    K = max(1, len(vec))
    per_block = max(1, _BLOCK // K)
    blocks = []
    for s in range(0, n, per_block):
        e = min(n, s + per_block)
        blocks.append((np.arange(s, e), configs.pos[s:e, a_k], None if configs.ints is None else configs.ints[s:e, a_k],
                       vec, vec_int, configs.pos[s:e], None if configs.ints is None else configs.ints[s:e],
                       cons, configs.xi[s:e], lookup.alpha, cutoff, mode, min_separation,
                       mode == "cubic" and step == 2))
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_expand_block, blocks))
    else:
        results = [_expand_block(b) for b in blocks]

    cand = np.concatenate([r[0] for r in results]) if results else np.zeros((0, 3))
    cand_int = None if configs.ints is None else np.concatenate([r[1] for r in results])
    parent = np.concatenate([r[2] for r in results]).astype(np.int64)
    xi = np.concatenate([r[3] for r in results])
    survivors = sum(r[4] for r in results)
    dead = sum(r[5] for r in results)

    if len(cand) == 0:
        viol = {}
        for r in results:
            for pid, v in r[6].items():
                viol[pid] = min(v, viol.get(pid, np.inf))
        if viol:
            pid = min(viol, key=lambda p: (viol[p], p))
            raise ExhaustedError(new_spin, pid, viol[pid])
        if len(vec) == 0 and len(lookup):
            # the anchor coupling itself matches no lattice vector
            f = a_entry.value(weak_value)
            k = np.searchsorted(lookup.couplings, f)
            near = lookup.couplings[max(0, k - 1):k + 1]
            raise ExhaustedError(new_spin, a_id, float(np.min(np.abs(near - f))))
        raise ExhaustedError(new_spin, None, None)

    order = _rank(xi, parent, cand)[:cutoff]
    cand, parent, xi = cand[order], parent[order], xi[order]
    pos = np.concatenate([configs.pos[parent], cand[:, None, :]], axis=1)
    ints = None
    if cand_int is not None:
        ints = np.concatenate([configs.ints[parent], cand_int[order][:, None, :]], axis=1)
    out = ConfigSet(placed + [new_spin], pos, xi, ints)
    rec = StepRecord(new_spin, a_id, a_entry.value(weak_value), len(vec), n * len(vec), survivors,
                     len(out), dead, time.perf_counter() - t0)
    return out, rec


# ---------------------------------------------------------------------------
# full solve


@dataclass
class SolverParams:
    mode: str = "diamond"
    N_L: int = 11
    a0: float = DEFAULT.a0
    tolerance: float = 1.1
    tolerance_single: float = 3.0
    x_cutoff: int = 5000
    n_tilde: float = 2e-8
    spin_order: list[str] | None = None
    order_strategy: str = "greedy"  # or "table" (table order) when spin_order is not given
    origin_spin: str | None = None
    weak_value: float = WEAK_VALUE_HZ
    workers: int = 1
    timeout_s: float | None = None
    min_separation: float = 1e-6
    checkpoint: str | None = None

    def __post_init__(self):
        if self.mode not in ("diamond", "cubic"):
            raise ValueError("mode must be 'diamond' or 'cubic'")
        if not (self.tolerance > 0 and self.tolerance_single > 0):
            raise ValueError("tolerances must be positive")
        if self.x_cutoff < 1:
            raise ValueError("x_cutoff must be >= 1")
        if self.order_strategy not in ("greedy", "table"):
            raise ValueError("order_strategy must be 'greedy' or 'table'")

    def fingerprint(self) -> dict:
        d = asdict(self)
        for k in ("workers", "timeout_s", "checkpoint"):
            d.pop(k)
        return d


@dataclass
class SolveResult:
    structures: list[Structure]  # ranked, best first
    configs: ConfigSet
    steps: list[StepRecord]
    order: list[str]
    predicted_unmeasured: dict[tuple[str, str], float] = field(default_factory=dict)
    complete: bool = True

    @property
    def best(self) -> Structure:
        return self.structures[0]

    def unique_spins(self, tol: float = 1e-6) -> list[str]:
        """Spins that sit at the same position in every retained configuration."""
        spread = np.max(np.ptp(self.configs.pos, axis=0), axis=1)
        return [s for s, v in zip(self.configs.placed, spread) if v <= tol]


def greedy_order(table: CouplingTable, first: str | None = None) -> list[str]:
    """Next spin = the unplaced one with the strongest coupling into the placed set."""
    spins = list(table.spins)
    first = first or spins[0]
    order = [first]
    left = [s for s in spins if s != first]
    while left:
        best, best_f = None, -1.0
        for s in left:
            fs = [e.frequency_hz for p in order if (e := table.get(s, p)) is not None and not e.weak_upper_bound]
            f = max(fs) if fs else -1.0
            if f > best_f:
                best, best_f = s, f
        if best is None or best_f < 0:
            weak = [s for s in left if any(table.get(s, p) is not None for p in order)]
            if not weak:
                raise ValueError("coupling graph is disconnected: " + ", ".join(left))
            best = weak[0]
        order.append(best)
        left.remove(best)
    return order


def _table_digest(table: CouplingTable) -> str:
    h = hashlib.sha256()
    for a, b, e in table:
        h.update(f"{a},{b},{e.frequency_hz!r},{e.sigma_hz!r},{e.weak_upper_bound},{e.single_projection_only};".encode())
    return h.hexdigest()


def save_checkpoint(path, configs: ConfigSet, steps: list[StepRecord], order: list[str],
                    params: SolverParams, table: CouplingTable) -> None:
    """Versioned npz: arrays for the configuration set plus a JSON header."""
    header = {"version": CHECKPOINT_VERSION, "placed": configs.placed, "order": order,
              "params": params.fingerprint(), "table": _table_digest(table),
              "steps": [asdict(s) for s in steps]}
    arrays = {"pos": configs.pos, "xi": configs.xi, "header": np.array(json.dumps(header))}
    if configs.ints is not None:
        arrays["ints"] = configs.ints
    tmp = Path(str(path) + ".tmp.npz")
    np.savez_compressed(tmp, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ConfigSet, list[StepRecord], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        ints = z["ints"] if "ints" in z.files else None
        cs = ConfigSet(list(header["placed"]), z["pos"], z["xi"], ints)
    return cs, [StepRecord(**s) for s in header["steps"]], header


def _to_structures(cs: ConfigSet, table: CouplingTable, gauge: dict) -> list[Structure]:
    ids = [s for s in table.spins if s in cs.placed]
    rows = [cs.placed.index(s) for s in ids]
    return [Structure(ids, cs.pos[k][rows].copy(), dict(gauge), None, float(cs.xi[k])) for k in range(len(cs))]


def _predict_unmeasured(best: Structure, table: CouplingTable, constants: PhysicalConstants):
    out = {}
    alpha = constants.alpha(constants.gamma_c, constants.gamma_c)
    for i, a in enumerate(best.ids):
        for b in best.ids[i + 1:]:
            if table.get(a, b) is None:
                d = best.position(b) - best.position(a)
                out[(a, b)] = float(coupling_frequencies(d, alpha))
    return out


def solve(table: CouplingTable, mode: str = "diamond", params: SolverParams | None = None,
          constants: PhysicalConstants = DEFAULT, resume: str | None = None,
          progress=None) -> SolveResult:
    """Build structures spin by spin. Returns ranked structures, best first.

    Nitrogen entries are ignored here; see :func:`spincluster.refine.position_sensor`.
    """
    p = params or SolverParams(mode=mode)
    if params is not None and mode != p.mode:
        p = SolverParams(**{**asdict(p), "mode": mode})
    carbons = [s for s in table.spins if not is_nitrogen(s)]
    table = table.subset(carbons)
    if p.spin_order:
        order = list(p.spin_order)
        if sorted(order) != sorted(carbons):
            raise ValueError("spin_order must list every carbon spin exactly once")
    elif p.order_strategy == "table":
        first = p.origin_spin or carbons[0]
        order = [first] + [s for s in carbons if s != first]
    else:
        order = greedy_order(table, p.origin_spin)
    tols = Tolerances(p.tolerance, p.tolerance_single)
    alpha = constants.alpha(constants.gamma_c, constants.gamma_c)
    gauge = {"origin_spin": order[0], "mode": p.mode}

    if resume:
        cs, steps, header = load_checkpoint(resume)
        if header["table"] != _table_digest(table) or header["params"] != p.fingerprint():
            raise ValueError("checkpoint was written for a different table or parameters")
        if header["order"] != order:
            raise ValueError("checkpoint spin order differs")
    else:
        ints = np.zeros((1, 1, 3), dtype=np.int64) if p.mode == "diamond" else None
        cs = ConfigSet([order[0]], np.zeros((1, 1, 3)), np.zeros(1), ints)
        steps = [StepRecord(order[0], None, None, 0, 1, 1, 1, 0, 0.0)]

    lookup = None
    if p.mode == "diamond":
        lookup = diamond_lookup(generate_diamond_lattice(p.N_L, p.a0), constants=constants)

    t_start = time.perf_counter()
    for spin in order[len(cs.placed):]:
        if p.timeout_s is not None and time.perf_counter() - t_start > p.timeout_s:
            partial = SolveResult(_to_structures(cs, table, gauge), cs, steps, order, complete=False)
            raise SolveTimeout(partial)
        a = choose_anchor(spin, cs.placed, table)
        if p.mode == "cubic":
            spec = cubic_lattice_for_coupling(a[1].value(p.weak_value), constants, p.n_tilde)
            lookup = cubic_lookup(spec, alpha)
        try:
            cs, rec = place_next_spin(cs, spin, table, lookup, tols, p.x_cutoff, mode=p.mode, a0=p.a0,
                                      weak_value=p.weak_value, workers=p.workers,
                                      min_separation=p.min_separation, anchor=a)
        except ExhaustedError as exc:
            exc.partial = SolveResult(_to_structures(cs, table, gauge), cs, steps, order, complete=False)
            raise
        steps.append(rec)
        log.info("placed %s: anchor %s, %d survivors, kept %d (%.1fs)", spin, rec.anchor,
                 rec.survivors, rec.kept, rec.seconds)
        if progress:
            progress(rec)
        if p.checkpoint:
            save_checkpoint(p.checkpoint, cs, steps, order, p, table)

    structures = _to_structures(cs, table, gauge)
    return SolveResult(structures, cs, steps, order, _predict_unmeasured(structures[0], table, constants))
