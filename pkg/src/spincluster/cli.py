"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 infeasible or exhausted search, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import crystal
from .constants import DEFAULT
from .io import (LoadError, RunConfig, export_structure, import_structure, load_coupling_table, load_dataset,
                 structure_to_dict)
from .model import Structure, residuals_and_xi

log = logging.getLogger("spincluster")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 2, 3, 4


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig().with_env()
    for key in ("mode", "x_cutoff", "tolerance", "tolerance_single", "N_L", "order_strategy", "workers",
                "timeout_s", "Bz", "Bperp_max", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    cfg.__post_init__()
    return cfg


def _table(args, dataset=None):
    if getattr(args, "table", None):
        return load_coupling_table(args.table)
    ds = dataset or load_dataset()
    return ds.tables[getattr(args, "projection", "averaged") or "averaged"]


def snapped(structure: Structure, a0: float = DEFAULT.a0) -> Structure:
    """Published coordinates moved onto the nearest diamond sites (first spin at the origin)."""
    ints, _ = crystal.snap(structure.coordinates - structure.coordinates[0], a0)
    return Structure(list(structure.ids), crystal.to_lab(ints, a0))


def _structure(spec: str | None, dataset=None, default: str = "bundled:diamond_lattice") -> Structure:
    """A structure file, or ``bundled:<name>`` for diamond, diamond_fit, cubic, cubic_fit, diamond_lattice."""
    spec = spec or default
    if spec.startswith("bundled:"):
        name = spec.split(":", 1)[1]
        ds = dataset or load_dataset()
        if name == "diamond_lattice":
            s = snapped(ds.structures["diamond"])
        elif name in ds.structures:
            s = ds.structures[name]
        else:
            raise InputError(f"unknown bundled structure {name!r}")
        return s
    p = Path(spec)
    if not p.exists():
        raise InputError(f"no such file: {spec}")
    return import_structure(p)


def _carbons(s: Structure) -> Structure:
    return s.subset([i for i in s.ids if not i.upper().startswith("N")])


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def _write_matrix(path: Path, ids, M) -> None:
    _write_csv(path, ["spin", *ids], [[a, *(_fmt(v) for v in row)] for a, row in zip(ids, M)])


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_reconstruct(args) -> int:
    from .lattice import ExhaustedError, SolveTimeout, solve

    cfg = _config(args)
    table = _table(args)
    if args.spins:
        table = table.subset([s.strip() for s in args.spins.split(",")])
    params = cfg.to_solver_params(checkpoint=args.checkpoint)
    out = Path(args.out)

    def progress(st):
        log.info("%s anchor=%s (%.2f Hz) survivors=%d kept=%d", st.spin, st.anchor, st.anchor_hz,
                 st.survivors, st.kept)

    try:
        res = solve(table, cfg.mode, params, resume=args.checkpoint if args.resume else None, progress=progress)
    except ExhaustedError as exc:
        print(f"search exhausted: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolveTimeout as exc:
        print(f"time limit reached: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    out.mkdir(parents=True, exist_ok=True)
    top = res.structures[: args.keep]
    _write_json(out / "structures.json", {"mode": cfg.mode, "order": res.order,
                                          "structures": [structure_to_dict(s) for s in top]})
    export_structure(res.best, out / "best.xyz")
    export_structure(res.best, out / "best.json")
    _write_csv(out / "steps.csv", ["spin", "anchor", "anchor_hz", "lookup_vectors", "candidates", "survivors",
                                   "kept", "dead_parents"],
               [[s.spin, s.anchor or "", _fmt(s.anchor_hz or float("nan")), s.lookup_vectors, s.candidates,
                 s.survivors, s.kept, s.dead_parents] for s in res.steps])
    _write_csv(out / "unmeasured.csv", ["a", "b", "predicted_hz"],
               [[a, b, _fmt(f)] for (a, b), f in sorted(res.predicted_unmeasured.items())])
    print(f"best xi = {res.best.xi:.6f} Hz^2 over {len(res.structures)} structures; "
          f"{len(res.unique_spins())} spins unique")
    return EXIT_OK


def cmd_refine(args) -> int:
    from .refine import refine

    cfg = _config(args)
    ds = load_dataset()
    table = _table(args, ds)
    init = _carbons(_structure(args.structure, ds))
    res = refine(init, table.subset([i for i in table.spins if i in set(init.ids)]), cfg.gauge())
    out = Path(args.out)
    export_structure(res.structure, out / "refined.json")
    export_structure(res.in_input_frame(), out / "refined_input_frame.json")
    _write_csv(out / "delta_r.csv", ["spin", "delta_r"], [[s, _fmt(d)] for s, d in zip(res.structure.ids,
                                                                                       res.delta_r)])
    print(f"xi {res.initial_xi:.4f} -> {res.final_xi:.4f} Hz^2, mean dr {res.mean_delta_r:.4f} A, "
          f"max sigma {np.nanmax(res.free_uncertainties):.3f} A")
    if res.rank_deficient:
        print(f"rank-deficient directions: {res.rank_deficient}", file=sys.stderr)
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_corrections(args) -> int:
    from .corrections import Target, correction_matrix

    cfg = _config(args)
    ds = load_dataset()
    s = _carbons(_structure(args.structure, ds))
    records = {r.id: r for r in ds.spins}
    if args.zero_aperp:
        from dataclasses import replace
        records = {k: replace(r, A_perp=0.0) for k, r in records.items()}
    missing = [i for i in s.ids if i not in records]
    if missing:
        raise InputError(f"no hyperfine record for {missing}")
    out = Path(args.out)
    targets = list(Target) if args.target == "all" else [Target(args.target)]
    summary = {}
    for tg in targets:
        m = correction_matrix(s, records, cfg.Bz, cfg.Bperp_max, tg, n_angle=args.n_angle,
                              n_field=args.n_field, polish=not args.no_polish)
        _write_matrix(out / f"corrections_{tg.value}.csv", m.ids, m.bound)
        _write_matrix(out / f"corrections_{tg.value}_phi_mean.csv", m.ids, m.phi_mean)
        summary[tg.value] = m.summary()
        print(f"{tg.value}: max {summary[tg.value]['max']:.4f} Hz, "
              f"angle-averaged mean {summary[tg.value]['mean_phi_average']:.4f} Hz")
    _write_json(out / "corrections_summary.json", summary)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .signal import MultiResonanceSpec, SignalModel, frequency_comb, psd, synthesize_trace, write_spectrum, \
        write_trace

    f = [float(x) for x in args.couplings.split(",")]
    p = [float(x) for x in args.p.split(",")] if args.p else None
    t = np.arange(0.0, args.duration, args.dt)
    spec = MultiResonanceSpec(f, p, t)
    model = SignalModel(a=args.a, A=args.A, B=args.B, T2=args.T2, n=args.n, f=f[0], phi=args.phi)
    s = synthesize_trace(spec, model, args.noise, np.random.default_rng(args.seed), failure_branches=p is not None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(out / "trace.csv", t, s)
    write_spectrum(out / "psd.csv", psd(t, s, args.zero_fill))
    _write_csv(out / "comb.csv", ["frequency_hz", "weight"],
               [[_fmt(nu), f"{w:.9f}"] for nu, w in frequency_comb(f, p is not None, p)])
    print(f"wrote {len(t)} samples to {out}")
    return EXIT_OK


def cmd_sensor(args) -> int:
    from .lattice import Tolerances
    from .refine import position_sensor

    cfg = _config(args)
    ds = load_dataset()
    table = _table(args, ds)
    s = _carbons(_structure(args.structure, ds))
    res = position_sensor(table, s, tolerances=Tolerances(cfg.tolerance, cfg.tolerance_single),
                          nitrogen_id=args.nitrogen)
    doc = {"nitrogen": res.nitrogen.tolist(), "vacancy": res.vacancy.tolist(), "xi": res.xi,
           "unique": res.unique, "anchor": res.anchor,
           "alternatives": [{"site": a.tolist(), "xi": x} for a, x in res.alternatives],
           "refined": None if res.refined is None else res.refined.tolist(),
           "refined_sigma": None if res.refined_sigma is None else res.refined_sigma.tolist()}
    _write_json(Path(args.out) / "sensor.json", doc)
    print("N at (" + ", ".join(f"{v:.3f}" for v in res.nitrogen) + f") A, xi {res.xi:.4f}, unique {res.unique}")
    return EXIT_OK if res.unique else EXIT_INFEASIBLE


def cmd_validate(args) -> int:
    ds = load_dataset()
    s = _structure(args.structure, ds)
    table = _table(args, ds)
    table = table.subset([i for i in table.spins if i in set(s.ids)])
    r = residuals_and_xi(s, table)
    out = Path(args.out)
    _write_matrix(out / "residuals.csv", r.ids, r.matrix)
    _write_matrix(out / "predicted.csv", r.ids, r.predicted)
    max_abs = float(np.nanmax(np.abs(r.matrix))) if len(table) else 0.0
    _write_json(out / "validate.json", {"xi": r.xi, "pairs": len(table), "max_abs_residual": max_abs,
                                        "stored_xi": s.xi})
    print(f"xi = {r.xi:.6f} Hz^2 over {len(table)} pairs, max |df| = {max_abs:.4f} Hz")
    if s.xi is not None and not np.isclose(s.xi, r.xi, rtol=1e-9):
        print(f"stored xi {s.xi} differs from recomputed {r.xi}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_report(args) -> int:
    ds = load_dataset()
    out = Path(args.out)
    rows = [[r.id, _fmt(r.omega_minus1), _fmt(r.omega_plus1), _fmt(r.A_par), _fmt(r.A_perp), int(r.imaginary_perp)]
            for r in ds.spins]
    _write_csv(out / "spins.csv", ["spin", "omega_minus1_khz", "omega_plus1_khz", "A_par_khz", "A_perp_khz",
                                   "imaginary"], rows)
    table = ds.averaged
    _write_csv(out / "couplings.csv", ["a", "b", "frequency_hz", "sigma_hz", "weak", "single_projection"],
               [[a, b, _fmt(e.frequency_hz), _fmt(e.sigma_hz), int(e.weak_upper_bound),
                 int(e.single_projection_only)] for a, b, e in table])
    lines = [f"spins: {len(ds.spins)}", f"measured pairs (averaged): {len(table)}",
             f"carbon-carbon pairs: {len(ds.carbon_table())}"]
    for k, v in sorted(ds.provenance.items()):
        lines.append(f"{k}: {v}")
    if args.structure:
        s = _structure(args.structure, ds)
        r = residuals_and_xi(s, table.subset([i for i in table.spins if i in set(s.ids)]))
        lines.append(f"structure {args.structure}: {len(s)} spins, xi {r.xi:.4f} Hz^2")
        _write_csv(out / "structure.csv", ["spin", "x", "y", "z"],
                   [[i, *(_fmt(v) for v in p)] for i, p in zip(s.ids, s.coordinates)])
    text = "\n".join(lines) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spincluster", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, table=True, structure=False):
        p.add_argument("--config", help="flat key = value run configuration")
        p.add_argument("--out", default=".", help="output directory")
        if table:
            p.add_argument("--table", help="coupling table (csv or json); default: bundled averaged table")
        if structure:
            p.add_argument("--structure", help="structure file or bundled:<name>")

    p = sub.add_parser("reconstruct", help="sequential lattice search")
    common(p)
    p.add_argument("--mode", choices=("diamond", "cubic"))
    p.add_argument("--x-cutoff", dest="x_cutoff", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--tolerance-single", dest="tolerance_single", type=float)
    p.add_argument("--N-L", dest="N_L", type=int)
    p.add_argument("--order-strategy", dest="order_strategy", choices=("greedy", "table"))
    p.add_argument("--workers", type=int)
    p.add_argument("--timeout", dest="timeout_s", type=float)
    p.add_argument("--spins", help="comma-separated subset of spins")
    p.add_argument("--keep", type=int, default=10, help="number of ranked structures to write")
    p.add_argument("--checkpoint")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("refine", help="least-squares refinement off the lattice")
    common(p, structure=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("corrections", help="pairwise maximal electron-mediated corrections")
    common(p, table=False, structure=True)
    p.add_argument("--target", default="all", choices=("all", "ms_minus1", "ms_plus1", "averaged"))
    p.add_argument("--Bz", type=float)
    p.add_argument("--Bperp-max", dest="Bperp_max", type=float)
    p.add_argument("--n-angle", type=int, default=24)
    p.add_argument("--n-field", type=int, default=5)
    p.add_argument("--no-polish", action="store_true")
    p.add_argument("--zero-aperp", action="store_true", help="set every A_perp to zero")
    p.set_defaults(func=cmd_corrections)

    p = sub.add_parser("simulate", help="synthesize a multi-resonance trace and its PSD")
    p.add_argument("--out", default=".")
    p.add_argument("--couplings", required=True, help="comma-separated Hz")
    p.add_argument("--p", help="comma-separated inversion probabilities")
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--T2", type=float, default=float("inf"))
    p.add_argument("--n", type=float, default=2.0)
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--A", type=float, default=1.0)
    p.add_argument("--B", type=float, default=0.0)
    p.add_argument("--phi", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-fill", type=int, default=4)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sensor-position", help="place the nitrogen from its couplings")
    common(p, structure=True)
    p.add_argument("--nitrogen", default="N")
    p.set_defaults(func=cmd_sensor)

    p = sub.add_parser("validate", help="recompute residuals and xi for a structure")
    common(p, structure=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="plain-text summary and columnar data")
    p.add_argument("--out", default=".")
    p.add_argument("--structure")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InputError, LoadError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
