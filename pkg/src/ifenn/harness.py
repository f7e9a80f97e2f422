"""Experiment harness: single runs, sweeps, studies, and reports.

Every run writes a ``manifest.json`` that pins the full configuration, a
configuration hash, the code version, the data provenance, and every
deterministic metric. Wall-clock quantities (per-block training seconds
and derived rates) are deliberately kept out of the manifest and written
to a separate ``timing.json``, so that repeating a run with the same
configuration and seed reproduces the manifest byte for byte.

Output paths: each operation takes an output directory. A relative path
is resolved against the environment variable ``IFENN_OUT_ROOT`` when it
is set, else against the working directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .defaults import (
    ADAM_EPOCHS,
    ADAM_LR,
    LBFGS_MAX_ITERS,
    LOAD_SCHEDULE,
    NEWTON_MAX_ITERS,
    NEWTON_TOL,
    SEEDS_PER_CELL,
    SNAPSHOT_LF,
    U_PEAK,
    benchmark_case,
    benchmark_mesh,
)
from .integrated import NetworkPredictor, field_table, ifenn_solve
from .metrics import (
    l2rse_report,
    max_strain_report,
    slope_fit,
    trivial_detector,
)
from .net import Network, NetworkShape, Scaling, xavier_init
from .nonlocal_ref import Snapshot, make_snapshot, staggered_nonlocal_solve
from .optim import AdamConfig, LbfgsConfig, adam_run, lbfgs_run
from .pinn import CollocationSet, loss, loss_gradient

OUT_ROOT_ENV = "IFENN_OUT_ROOT"
MANIFEST_SCHEMA = 1


class HarnessError(RuntimeError):
    """Configuration or orchestration failure."""


def resolve_out(path):
    """Resolve an output path against the configured output root."""
    path = os.fspath(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def canonical_json(obj):
    """Canonical compact encoding used for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path, obj):
    """Deterministic pretty JSON: sorted keys, fixed layout, no clock."""
    text = json.dumps(obj, sort_keys=True, indent=1)
    with open(path, "w") as fh:
        fh.write(text + "\n")


@dataclass(frozen=True)
class RunConfig:
    """One training case: shape, schedule, seed, and data binding.

    The identity of a run is (layers, width, epochs, lr, seed,
    lbfgs_max_iters, snapshot basename); the output directory and the
    directory part of the snapshot path do not enter the hash, so moving
    artifacts around does not change run identity.
    """

    layers: int
    width: int
    epochs: int
    lr: float
    seed: int
    snapshot: str
    lbfgs_max_iters: int = LBFGS_MAX_ITERS
    out_dir: str = "."

    def __post_init__(self):
        if self.layers < 1 or self.width < 1:
            raise HarnessError("layers and width must be at least 1")
        if self.epochs < 0:
            raise HarnessError("epochs must be non-negative")
        if not self.lr > 0.0:
            raise HarnessError("lr must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise HarnessError("seed must lie in [0, 2^64)")
        if self.lbfgs_max_iters < 0:
            raise HarnessError("lbfgs_max_iters must be non-negative")

    def identity(self):
        return {
            "layers": int(self.layers),
            "width": int(self.width),
            "epochs": int(self.epochs),
            "lr": float(self.lr),
            "seed": int(self.seed),
            "lbfgs_max_iters": int(self.lbfgs_max_iters),
            "snapshot": os.path.basename(self.snapshot),
        }

    @property
    def config_hash(self):
        return hashlib.sha256(canonical_json(self.identity()).encode()).hexdigest()


class _Stage:
    """Tracks the active stage so failures land in the manifest."""

    def __init__(self, out_dir, kind, config=None):
        self.out_dir = out_dir
        self.kind = kind
        self.config = config
        self.current = "setup"

    def set(self, name):
        self.current = name

    def fail(self, exc):
        payload = {
            "schema_version": MANIFEST_SCHEMA,
            "stage": self.kind,
            "status": f"failed:{self.current}",
            "error": f"{type(exc).__name__}: {exc}",
            "code_version": __version__,
        }
        if self.config is not None:
            payload["config"] = self.config
        try:
            os.makedirs(self.out_dir, exist_ok=True)
            write_json(os.path.join(self.out_dir, "manifest.json"), payload)
        except OSError:
            pass


def _snapshot_provenance(snap, path):
    prov = {
        "file": os.path.basename(path),
        "content_hash": snap.content_hash(),
        "n_interior": snap.n_interior,
        "n_boundary": snap.n_boundary,
    }
    for key in ("lf", "mesh_id", "mesh_meta", "material"):
        if key in snap.manifest:
            prov[key] = snap.manifest[key]
    return prov


def _snapshot_manifest_path(csv_path):
    base, _ = os.path.splitext(csv_path)
    cand = base + ".manifest.json"
    return cand if os.path.exists(cand) else None


def _load_snapshot(path):
    if not os.path.exists(path):
        raise HarnessError(f"missing snapshot: {path}")
    return Snapshot.from_csv(path, _snapshot_manifest_path(path))


def _eval_metrics(net, cset):
    """Deterministic evaluation block for a network on a collocation set."""
    pred = net.predict(cset.interior)
    true = cset.eps_bar_true
    value, excluded = l2rse_report(pred, true)
    flag, evidence = trivial_detector(pred, cset.interior[:, 3])
    msr = max_strain_report(pred, true)
    return {
        "l2rse": value,
        "l2rse_normalized": value / cset.m_c,
        "l2rse_excluded_rows": excluded,
        "trivial_flag": bool(flag),
        "trivial_spread": evidence["spread_ratio"],
        "trivial_mean_shift": evidence["mean_shift"],
        "max_strain": msr.to_dict(),
    }


def train_run(cfg):
    """Train one network per the config; returns the manifest dict.

    Writes ``checkpoint.json``, ``manifest.json`` and ``timing.json`` into
    the config's output directory.
    """
    out_dir = resolve_out(cfg.out_dir)
    tracker = _Stage(out_dir, "train", cfg.identity())
    try:
        return _train_run_inner(cfg, out_dir, tracker)
    except Exception as exc:
        tracker.fail(exc)
        raise


def _train_run_inner(cfg, out_dir, tracker):
    tracker.set("load-data")
    snap = _load_snapshot(cfg.snapshot)
    cset = CollocationSet.from_snapshot(snap)
    shape = NetworkShape(layers=cfg.layers, width=cfg.width)
    all_x = np.concatenate([cset.interior[:, 0], cset.boundary[:, 0]])
    all_y = np.concatenate([cset.interior[:, 1], cset.boundary[:, 1]])
    all_eq = np.concatenate([cset.interior[:, 3], cset.boundary[:, 3]])
    scaling = Scaling.for_domain(all_x, all_y, all_eq)
    theta0 = xavier_init(shape, np.random.default_rng(cfg.seed))

    def value_and_grad(theta):
        bd, grad = loss_gradient(theta, shape, scaling, cset)
        return bd.J, grad

    tracker.set("train-adam")
    adam_res = adam_run(theta0, value_and_grad,
                        AdamConfig(lr=cfg.lr, epochs=cfg.epochs))
    j_adam = loss(adam_res.theta, shape, scaling, cset)

    tracker.set("train-lbfgs")
    lb = lbfgs_run(adam_res.theta, value_and_grad,
                   LbfgsConfig(max_iters=cfg.lbfgs_max_iters))
    j_lbfgs = loss(lb.theta, shape, scaling, cset)

    tracker.set("evaluate")
    net_adam = Network(shape=shape, theta=adam_res.theta, scaling=scaling,
                       seed=cfg.seed, config_hash=cfg.config_hash)
    net = Network(shape=shape, theta=lb.theta, scaling=scaling,
                  seed=cfg.seed, config_hash=cfg.config_hash)
    eval_adam = _eval_metrics(net_adam, cset)
    eval_lbfgs = _eval_metrics(net, cset)
    samples = list(adam_res.delta_theta_samples)
    s_dtheta = slope_fit(samples) if len(samples) >= 3 else None

    metrics = {
        "m_c": cset.m_c,
        "m_b": cset.m_b,
        "param_count": shape.param_count,
        "aspect_ratio": shape.aspect_ratio,
        "j_adam_end": {"total": j_adam.J, "pde": j_adam.J_pde, "bc": j_adam.J_bc},
        "j_lbfgs_end": {"total": j_lbfgs.J, "pde": j_lbfgs.J_pde, "bc": j_lbfgs.J_bc},
        "eval_adam_end": eval_adam,
        "eval_lbfgs_end": eval_lbfgs,
        "delta_theta_samples": samples,
        "s_dtheta": s_dtheta,
        "iter_lbfgs": lb.n_iters,
        "lbfgs_stop_reason": lb.reason,
    }

    tracker.set("write")
    os.makedirs(out_dir, exist_ok=True)
    net.save(os.path.join(out_dir, "checkpoint.json"))
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "stage": "train",
        "status": "ok",
        "code_version": __version__,
        "config": cfg.identity(),
        "config_hash": cfg.config_hash,
        "seed": int(cfg.seed),
        "snapshot": _snapshot_provenance(snap, cfg.snapshot),
        "metrics": metrics,
        "files": {"checkpoint": "checkpoint.json", "timing": "timing.json"},
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    write_json(os.path.join(out_dir, "timing.json"), {
        "adam_rt100_mean_seconds": adam_res.rt100_mean,
        "adam_block_seconds": list(adam_res.block_seconds),
        "adam_total_seconds": adam_res.total_seconds,
    })
    return manifest


def eval_run(checkpoint, snapshot, out_dir):
    """Evaluate a stored checkpoint against a snapshot; returns manifest."""
    out_dir = resolve_out(out_dir)
    tracker = _Stage(out_dir, "eval")
    try:
        tracker.set("load")
        net = Network.load(checkpoint)
        snap = _load_snapshot(snapshot)
        cset = CollocationSet.from_snapshot(snap)
        tracker.set("evaluate")
        block = _eval_metrics(net, cset)
        j = loss(net.theta, net.shape, net.scaling, cset)
        tracker.set("write")
        os.makedirs(out_dir, exist_ok=True)
        manifest = {
            "schema_version": MANIFEST_SCHEMA,
            "stage": "eval",
            "status": "ok",
            "code_version": __version__,
            "config": {
                "checkpoint": os.path.basename(checkpoint),
                "snapshot": os.path.basename(snapshot),
            },
            "checkpoint_config_hash": net.config_hash,
            "snapshot": _snapshot_provenance(snap, snapshot),
            "metrics": {
                "m_c": cset.m_c,
                "m_b": cset.m_b,
                "j": {"total": j.J, "pde": j.J_pde, "bc": j.J_bc},
                "eval": block,
            },
        }
        write_json(os.path.join(out_dir, "manifest.json"), manifest)
        return manifest
    except Exception as exc:
        tracker.fail(exc)
        raise


def data_gen(n, out_dir, u_peak=U_PEAK, lf=SNAPSHOT_LF, schedule=None,
             material=None):
    """Generate the benchmark snapshot at mesh density ``n``.

    Runs the staggered reference solver over the load schedule up to
    ``lf`` and freezes the converged step there. Writes ``snapshot.csv``
    and ``snapshot.manifest.json``; returns the snapshot.
    """
    out_dir = resolve_out(out_dir)
    tracker = _Stage(out_dir, "data-gen",
                     {"n": int(n), "u_peak": float(u_peak), "lf": float(lf)})
    try:
        tracker.set("solve")
        mesh, mat, bcs = benchmark_case(n, u_peak=u_peak, material=material)
        if schedule is None:
            schedule = [p for p in LOAD_SCHEDULE if p < lf] + [lf]
        records = staggered_nonlocal_solve(mesh, mat, bcs, schedule)
        snap = make_snapshot(mesh, mat, records, lf,
                             extra_manifest={"u_peak": float(u_peak),
                                             "schedule": [float(p) for p in schedule]})
        tracker.set("write")
        os.makedirs(out_dir, exist_ok=True)
        snap.save(os.path.join(out_dir, "snapshot.csv"),
                  os.path.join(out_dir, "snapshot.manifest.json"))
        return snap
    except Exception as exc:
        tracker.fail(exc)
        raise


def mesh_gen(n, out_path):
    """Write the benchmark mesh at density ``n`` to a JSON file."""
    out_path = resolve_out(out_path)
    mesh = benchmark_mesh(n)
    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    mesh.save(out_path)
    return mesh


def ifenn_run(checkpoint, n, out_dir, lf=SNAPSHOT_LF, u_peak=U_PEAK,
              reference=False, tol=NEWTON_TOL, max_iters=NEWTON_MAX_ITERS,
              material=None):
    """Run the embedded Newton solve on the benchmark case at density ``n``.

    Writes the per-Gauss-point field table and a manifest with the
    iteration count and residual histories. With ``reference=True`` the
    staggered solver is also run and the damage-field L2 distance
    reported.
    """
    out_dir = resolve_out(out_dir)
    tracker = _Stage(out_dir, "ifenn", {
        "checkpoint": os.path.basename(checkpoint), "n": int(n),
        "lf": float(lf), "u_peak": float(u_peak), "tol": tol,
        "max_iters": int(max_iters), "reference": bool(reference),
    })
    try:
        tracker.set("load")
        net = Network.load(checkpoint)
        mesh, mat, bcs = benchmark_case(n, u_peak=u_peak, material=material)
        tracker.set("solve")
        state = ifenn_solve(mesh, mat, NetworkPredictor(net), bcs.scaled(lf),
                            tol=tol, max_iters=max_iters)
        metrics = {
            "iter_ifenn": state.iterations,
            "res_history": list(state.res_history),
            "step_history": list(state.step_history),
            "d_max": float(np.max(state.d)),
            "eps_bar_max": float(np.max(state.eps_bar)),
        }
        if reference:
            tracker.set("reference")
            schedule = [p for p in LOAD_SCHEDULE if p < lf] + [lf]
            records = staggered_nonlocal_solve(mesh, mat, bcs, schedule)
            d_ref = records[-1].d
            den = float(np.linalg.norm(d_ref))
            diff = float(np.linalg.norm(state.d - d_ref))
            metrics["reference"] = {
                "d_max": float(np.max(d_ref)),
                "damage_l2_diff": diff / den if den > 0.0 else diff,
                "staggered_passes": [r.passes for r in records],
            }
        tracker.set("write")
        os.makedirs(out_dir, exist_ok=True)
        table = field_table(mesh, state)
        with open(os.path.join(out_dir, "field.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("x", "y", "eps_eq", "eps_bar", "d"))
            for row in table:
                w.writerow([format(v, ".17g") for v in row])
        manifest = {
            "schema_version": MANIFEST_SCHEMA,
            "stage": "ifenn",
            "status": "ok",
            "code_version": __version__,
            "config": tracker.config,
            "checkpoint_config_hash": net.config_hash,
            "mesh_id": mesh.mesh_id,
            "metrics": metrics,
            "files": {"field": "field.csv"},
        }
        write_json(os.path.join(out_dir, "manifest.json"), manifest)
        return manifest
    except Exception as exc:
        tracker.fail(exc)
        raise


STUDIES = ("convergence", "hps", "cross-mesh")


@dataclass
class SweepSpec:
    """Grid of training cells plus study-specific validation.

    ``snapshots`` maps mesh density to a snapshot CSV path; every mesh in
    ``meshes`` must have one. ``grid`` lists (epochs, lr) pairs. Seeds run
    0..seeds-1 per cell.
    """

    study: str
    shapes: list
    meshes: list
    grid: list
    seeds: int = SEEDS_PER_CELL
    parallelism: int = 1
    snapshots: dict = field(default_factory=dict)
    lbfgs_max_iters: int = LBFGS_MAX_ITERS

    def __post_init__(self):
        if self.study not in STUDIES:
            raise HarnessError(f"unknown study {self.study!r}; one of {STUDIES}")
        self.shapes = [(int(a), int(b)) for a, b in self.shapes]
        self.meshes = [int(m) for m in self.meshes]
        self.grid = [(int(ep), float(lr)) for ep, lr in self.grid]
        if not self.shapes or not self.meshes or not self.grid:
            raise HarnessError("shapes, meshes and grid must be non-empty")
        if self.seeds < 1:
            raise HarnessError("seeds must be at least 1")
        if self.parallelism < 1:
            raise HarnessError("parallelism must be at least 1")
        if self.study == "convergence":
            bad = [s for s in self.shapes if s[0] != s[1]]
            if bad:
                raise HarnessError(
                    f"convergence study requires square shapes, got {bad}")
        if self.study == "hps":
            totals = {a * b for a, b in self.shapes}
            if len(totals) != 1:
                raise HarnessError(
                    "hps study requires a constant total neuron count, "
                    f"got {sorted(totals)}")
        if self.study == "cross-mesh" and len(self.shapes) != 1:
            raise HarnessError("cross-mesh study uses exactly one shape")

    def validate_snapshots(self):
        for m in self.meshes:
            path = self.snapshots.get(m)
            if path is None:
                raise HarnessError(f"no snapshot configured for mesh {m}")
            if not os.path.exists(path):
                raise HarnessError(f"missing snapshot for mesh {m}: {path}")

    def to_dict(self):
        return {
            "study": self.study,
            "shapes": [list(s) for s in self.shapes],
            "meshes": list(self.meshes),
            "grid": [[ep, lr] for ep, lr in self.grid],
            "seeds": self.seeds,
            "parallelism": self.parallelism,
            "snapshots": {str(k): os.path.basename(v)
                          for k, v in sorted(self.snapshots.items())},
            "lbfgs_max_iters": self.lbfgs_max_iters,
        }

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise HarnessError(f"unreadable sweep config {path}: {err}") from err
        base = os.path.dirname(os.path.abspath(path))
        snaps = {
            int(k): v if os.path.isabs(v) else os.path.join(base, v)
            for k, v in data.get("snapshots", {}).items()
        }
        try:
            return cls(
                study=data["study"],
                shapes=data["shapes"],
                meshes=data["meshes"],
                grid=data["grid"],
                seeds=int(data.get("seeds", SEEDS_PER_CELL)),
                parallelism=int(data.get("parallelism", 1)),
                snapshots=snaps,
                lbfgs_max_iters=int(data.get("lbfgs_max_iters", LBFGS_MAX_ITERS)),
            )
        except KeyError as err:
            raise HarnessError(f"sweep config {path} is missing {err}") from err


def _cell_name(layers, width, mesh, epochs, lr, seed):
    return f"L{layers}w{width}-m{mesh}-ep{epochs}-lr{lr!r}-s{seed}"


def sweep_cells(spec, out_dir):
    """Expand a sweep spec into (mesh, RunConfig) cells, canonical order."""
    cells = []
    for layers, width in spec.shapes:
        for mesh in spec.meshes:
            for epochs, lr in spec.grid:
                for seed in range(spec.seeds):
                    cells.append((mesh, RunConfig(
                        layers=layers, width=width, epochs=epochs, lr=lr,
                        seed=seed, snapshot=spec.snapshots[mesh],
                        lbfgs_max_iters=spec.lbfgs_max_iters,
                        out_dir=os.path.join(
                            out_dir, "runs",
                            _cell_name(layers, width, mesh, epochs, lr, seed)),
                    )))
    return cells


def _run_cell(mesh, cfg):
    manifest = train_run(cfg)
    return _row_from_manifest(mesh, manifest)


def _run_cell_packed(args):
    mesh, cfg_kwargs = args
    return _run_cell(mesh, RunConfig(**cfg_kwargs))


RUN_ROW_COLUMNS = (
    "layers", "width", "mesh", "epochs", "lr", "seed", "config_hash",
    "m_c", "m_b", "param_count", "aspect_ratio",
    "j_adam", "j_pde_adam", "j_bc_adam",
    "j_lbfgs", "j_pde_lbfgs", "j_bc_lbfgs",
    "l2rse_adam", "l2rse_lbfgs", "l2rse_norm_lbfgs", "l2rse_excluded",
    "s_dtheta", "iter_lbfgs", "lbfgs_stop_reason",
    "trivial_flag", "trivial_spread", "trivial_mean_shift",
    "max_strain_rel_error",
)


def _row_from_manifest(mesh, manifest):
    cfg = manifest["config"]
    m = manifest["metrics"]
    ea, el = m["eval_adam_end"], m["eval_lbfgs_end"]
    return {
        "layers": cfg["layers"], "width": cfg["width"], "mesh": mesh,
        "epochs": cfg["epochs"], "lr": cfg["lr"], "seed": cfg["seed"],
        "config_hash": manifest["config_hash"],
        "m_c": m["m_c"], "m_b": m["m_b"],
        "param_count": m["param_count"], "aspect_ratio": m["aspect_ratio"],
        "j_adam": m["j_adam_end"]["total"],
        "j_pde_adam": m["j_adam_end"]["pde"],
        "j_bc_adam": m["j_adam_end"]["bc"],
        "j_lbfgs": m["j_lbfgs_end"]["total"],
        "j_pde_lbfgs": m["j_lbfgs_end"]["pde"],
        "j_bc_lbfgs": m["j_lbfgs_end"]["bc"],
        "l2rse_adam": ea["l2rse"],
        "l2rse_lbfgs": el["l2rse"],
        "l2rse_norm_lbfgs": el["l2rse_normalized"],
        "l2rse_excluded": el["l2rse_excluded_rows"],
        "s_dtheta": m["s_dtheta"],
        "iter_lbfgs": m["iter_lbfgs"],
        "lbfgs_stop_reason": m["lbfgs_stop_reason"],
        "trivial_flag": el["trivial_flag"],
        "trivial_spread": el["trivial_spread"],
        "trivial_mean_shift": el["trivial_mean_shift"],
        "max_strain_rel_error": el["max_strain"]["rel_error"],
    }


def _format_cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(path, columns, rows):
    """CSV with a fixed column order and shortest-roundtrip floats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_format_cell(row.get(c)) for c in columns])


def _cell_key(row):
    return (row["layers"], row["width"], row["mesh"], row["epochs"],
            row["lr"], row["seed"])


def _group_key(row):
    return (row["layers"], row["width"], row["mesh"], row["epochs"], row["lr"])


AGG_STATS = ("j_adam", "j_lbfgs", "l2rse_adam", "l2rse_lbfgs",
             "l2rse_norm_lbfgs", "s_dtheta", "iter_lbfgs",
             "max_strain_rel_error")

AGG_COLUMNS = (
    ("layers", "width", "mesh", "epochs", "lr", "seeds")
    + tuple(f"{name}_{stat}" for name in AGG_STATS
            for stat in ("mean", "min", "max"))
    + ("trivial_rate",)
)


def aggregate_rows(rows):
    """Group per-seed rows into mean/min/max rows, canonical order."""
    groups = {}
    for row in sorted(rows, key=_cell_key):
        groups.setdefault(_group_key(row), []).append(row)
    out = []
    for key in sorted(groups):
        members = groups[key]
        agg = dict(zip(("layers", "width", "mesh", "epochs", "lr"), key))
        agg["seeds"] = len(members)
        for name in AGG_STATS:
            vals = [r[name] for r in members if r[name] is not None]
            if vals:
                agg[f"{name}_mean"] = sum(vals) / len(vals)
                agg[f"{name}_min"] = min(vals)
                agg[f"{name}_max"] = max(vals)
            else:
                agg[f"{name}_mean"] = agg[f"{name}_min"] = agg[f"{name}_max"] = None
        agg["trivial_rate"] = (
            sum(1 for r in members if r["trivial_flag"]) / len(members))
        out.append(agg)
    return out


def _plot_csv(path, x_name, x_values, series):
    """Plot-data CSV: one x column plus named series columns."""
    columns = (x_name,) + tuple(series)
    rows = []
    for i, x in enumerate(x_values):
        row = {x_name: x}
        for name, values in series.items():
            row[name] = values[i]
        rows.append(row)
    write_rows_csv(path, columns, rows)


def _emit_convergence_plots(out_dir, agg):
    """Four plot-data families: J and L2RSE against size and samples."""
    by_lr = {}
    for row in agg:
        by_lr.setdefault(row["lr"], []).append(row)
    for metric, label in (("j", "j"), ("l2rse", "l2rse")):
        for axis in ("size", "samples"):
            series = {}
            x_vals = None
            for lr in sorted(by_lr):
                rows = by_lr[lr]
                if axis == "size":
                    keys = sorted({(r["layers"], r["width"]) for r in rows})
                    if len(keys) < 2:
                        continue
                    sel = {k: [r for r in rows if (r["layers"], r["width"]) == k]
                           for k in keys}
                    xs = [k[0] * k[1] for k in keys]
                else:
                    keys = sorted({r["mesh"] for r in rows})
                    if len(keys) < 2:
                        continue
                    sel = {k: [r for r in rows if r["mesh"] == k] for k in keys}
                    xs = list(keys)
                for stage in ("adam", "lbfgs"):
                    col = f"{metric}_{stage}_mean"
                    vals = []
                    for k in keys:
                        sub = sel[k]
                        vals.append(sum(r[col] for r in sub) / len(sub))
                    series[f"{stage}_lr{lr!r}"] = vals
                x_vals = xs
            if x_vals is not None and series:
                name = f"plot_{label}_vs_{axis}.csv"
                x_name = "total_neurons" if axis == "size" else "mesh"
                _plot_csv(os.path.join(out_dir, name), x_name, x_vals, series)


def _emit_hps_plots(out_dir, agg):
    rows = sorted(agg, key=lambda r: (r["width"] / r["layers"], r["lr"]))
    by_lr = {}
    for row in rows:
        by_lr.setdefault(row["lr"], []).append(row)
    for lr, members in sorted(by_lr.items()):
        xs = [r["width"] / r["layers"] for r in members]
        series = {
            "j_adam_mean": [r["j_adam_mean"] for r in members],
            "j_lbfgs_mean": [r["j_lbfgs_mean"] for r in members],
            "l2rse_lbfgs_mean": [r["l2rse_lbfgs_mean"] for r in members],
            "iter_lbfgs_mean": [r["iter_lbfgs_mean"] for r in members],
            "trivial_rate": [r["trivial_rate"] for r in members],
        }
        _plot_csv(os.path.join(out_dir, f"plot_hps_lr{lr!r}.csv"),
                  "aspect_ratio", xs, series)


def run_sweep(spec, out_dir):
    """Execute every cell of a sweep; returns (per-run rows, aggregate).

    Cells run serially or on a process pool per ``spec.parallelism``; the
    results are identical either way because each cell is internally
    deterministic and aggregation sorts rows canonically.
    """
    out_dir = resolve_out(out_dir)
    spec.validate_snapshots()
    cells = sweep_cells(spec, out_dir)
    os.makedirs(out_dir, exist_ok=True)
    if spec.parallelism > 1:
        packed = [(mesh, {
            "layers": c.layers, "width": c.width, "epochs": c.epochs,
            "lr": c.lr, "seed": c.seed, "snapshot": c.snapshot,
            "lbfgs_max_iters": c.lbfgs_max_iters, "out_dir": c.out_dir,
        }) for mesh, c in cells]
        with ProcessPoolExecutor(max_workers=spec.parallelism) as pool:
            rows = list(pool.map(_run_cell_packed, packed))
    else:
        rows = [_run_cell(mesh, cfg) for mesh, cfg in cells]
    rows.sort(key=_cell_key)
    agg = aggregate_rows(rows)
    write_rows_csv(os.path.join(out_dir, "runs.csv"), RUN_ROW_COLUMNS, rows)
    write_rows_csv(os.path.join(out_dir, "aggregate.csv"), AGG_COLUMNS, agg)
    if spec.study == "convergence":
        _emit_convergence_plots(out_dir, agg)
    elif spec.study == "hps":
        _emit_hps_plots(out_dir, agg)
    write_json(os.path.join(out_dir, "sweep.json"), {
        "schema_version": MANIFEST_SCHEMA,
        "stage": "sweep",
        "status": "ok",
        "code_version": __version__,
        "spec": spec.to_dict(),
        "cells": len(cells),
        "config_hashes": [c.config_hash for _, c in cells],
    })
    return rows, agg


def run_convergence_study(spec, out_dir):
    """Size and sample convergence sweep; see :func:`run_sweep`."""
    if spec.study != "convergence":
        raise HarnessError("spec.study must be 'convergence'")
    return run_sweep(spec, out_dir)


def run_hps_study(spec, out_dir):
    """Fixed-total-neurons architecture sweep; see :func:`run_sweep`."""
    if spec.study != "hps":
        raise HarnessError("spec.study must be 'hps'")
    return run_sweep(spec, out_dir)


CROSS_MESH_COLUMNS = (
    "train_mesh", "test_mesh", "l2rse", "l2rse_normalized",
    "iter_ifenn", "d_max", "damage_l2_diff",
)


def run_cross_mesh_study(spec, out_dir, lf=SNAPSHOT_LF, u_peak=U_PEAK):
    """Train on the first mesh, evaluate and embed on every mesh.

    The first entry of ``spec.meshes`` is the training mesh; every mesh
    (including the training one, as the baseline row) gets an eval run
    and an embedded Newton run against the staggered reference.
    """
    if spec.study != "cross-mesh":
        raise HarnessError("spec.study must be 'cross-mesh'")
    out_dir = resolve_out(out_dir)
    spec.validate_snapshots()
    train_mesh = spec.meshes[0]
    layers, width = spec.shapes[0]
    epochs, lr = spec.grid[0]
    os.makedirs(out_dir, exist_ok=True)
    cfg = RunConfig(
        layers=layers, width=width, epochs=epochs, lr=lr, seed=0,
        snapshot=spec.snapshots[train_mesh],
        lbfgs_max_iters=spec.lbfgs_max_iters,
        out_dir=os.path.join(out_dir, f"train-m{train_mesh}"),
    )
    train_run(cfg)
    checkpoint = os.path.join(resolve_out(cfg.out_dir), "checkpoint.json")
    rows = []
    for mesh in spec.meshes:
        ev = eval_run(checkpoint, spec.snapshots[mesh],
                      os.path.join(out_dir, f"eval-m{mesh}"))
        fr = ifenn_run(checkpoint, mesh,
                       os.path.join(out_dir, f"ifenn-m{mesh}"),
                       lf=lf, u_peak=u_peak, reference=True)
        rows.append({
            "train_mesh": train_mesh,
            "test_mesh": mesh,
            "l2rse": ev["metrics"]["eval"]["l2rse"],
            "l2rse_normalized": ev["metrics"]["eval"]["l2rse_normalized"],
            "iter_ifenn": fr["metrics"]["iter_ifenn"],
            "d_max": fr["metrics"]["d_max"],
            "damage_l2_diff": fr["metrics"]["reference"]["damage_l2_diff"],
        })
    write_rows_csv(os.path.join(out_dir, "cross_mesh.csv"),
                   CROSS_MESH_COLUMNS, rows)
    return rows


def collect_run_rows(runs_dir):
    """Recursively read train-run manifests under a directory into rows.

    The mesh column is recovered from the snapshot provenance when
    present.
    """
    rows = []
    for dirpath, _, filenames in sorted(os.walk(runs_dir)):
        if "manifest.json" not in filenames:
            continue
        path = os.path.join(dirpath, "manifest.json")
        try:
            with open(path) as fh:
                manifest = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise HarnessError(f"unreadable manifest {path}: {err}") from err
        if manifest.get("stage") != "train" or manifest.get("status") != "ok":
            continue
        mesh = None
        meta = manifest.get("snapshot", {}).get("mesh_meta")
        if meta:
            mesh = meta.get("nx")
        rows.append(_row_from_manifest(mesh, manifest))
    if not rows:
        raise HarnessError(f"no successful train manifests under {runs_dir}")
    return rows


def report(runs_dir, out_csv):
    """Aggregate all train manifests under a directory into a summary CSV."""
    rows = collect_run_rows(runs_dir)
    agg = aggregate_rows(rows)
    out_csv = resolve_out(out_csv)
    parent = os.path.dirname(out_csv)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_rows_csv(out_csv, AGG_COLUMNS, agg)
    return agg
