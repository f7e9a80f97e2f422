"""Run orchestration: configs, manifests, sweeps, and reports."""

import dataclasses
import json
import os

import numpy as np
import pytest

from ifenn.geometry import Mesh
from ifenn.net import CheckpointError, Network, NetworkShape, Scaling
from ifenn.harness import (
    AGG_COLUMNS,
    HarnessError,
    OUT_ROOT_ENV,
    RUN_ROW_COLUMNS,
    RunConfig,
    SweepSpec,
    aggregate_rows,
    canonical_json,
    collect_run_rows,
    data_gen,
    eval_run,
    ifenn_run,
    mesh_gen,
    report,
    resolve_out,
    run_sweep,
    sweep_cells,
    train_run,
    write_json,
    write_rows_csv,
)


@pytest.fixture(scope="module")
def snapshot_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("snap")
    data_gen(4, str(out))
    return str(out / "snapshot.csv")


def tiny_config(snapshot_csv, out_dir, **overrides):
    kwargs = dict(layers=1, width=2, epochs=5, lr=1e-3, seed=0,
                  snapshot=snapshot_csv, lbfgs_max_iters=4,
                  out_dir=str(out_dir))
    kwargs.update(overrides)
    return RunConfig(**kwargs)


@pytest.fixture(scope="module")
def trained(snapshot_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = tiny_config(snapshot_csv, out)
    manifest = train_run(cfg)
    return cfg, manifest, out


def zero_checkpoint(path):
    """Checkpoint whose prediction is identically zero, so no damage."""
    shape = NetworkShape(1, 2)
    net = Network(shape=shape, theta=np.zeros(shape.param_count),
                  scaling=Scaling(shift=np.zeros(4), scale=np.ones(4)))
    net.save(str(path))
    return str(path)


class TestPaths:
    def test_resolve_out_joins_relative_under_root(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path))
        assert resolve_out("runs/a") == os.path.join(str(tmp_path), "runs/a")

    def test_resolve_out_leaves_absolute_alone(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path))
        assert resolve_out("/x/y") == "/x/y"

    def test_resolve_out_without_root(self, monkeypatch):
        monkeypatch.delenv(OUT_ROOT_ENV, raising=False)
        assert resolve_out("runs/a") == "runs/a"

    def test_canonical_json_sorted_and_compact(self):
        assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'

    def test_write_json_layout(self, tmp_path):
        path = tmp_path / "x.json"
        write_json(str(path), {"b": 1, "a": 2})
        text = path.read_text()
        assert text.endswith("\n")
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": 2, "b": 1}


class TestRunConfig:
    @pytest.mark.parametrize("overrides", [
        {"layers": 0},
        {"width": 0},
        {"epochs": -1},
        {"lr": 0.0},
        {"lr": -1e-3},
        {"seed": -1},
        {"lbfgs_max_iters": -1},
    ])
    def test_invalid_fields_rejected(self, overrides):
        kwargs = dict(layers=1, width=2, epochs=5, lr=1e-3, seed=0,
                      snapshot="snap.csv")
        kwargs.update(overrides)
        with pytest.raises(HarnessError):
            RunConfig(**kwargs)

    def test_identity_ignores_locations(self):
        a = RunConfig(layers=2, width=3, epochs=7, lr=1e-4, seed=5,
                      snapshot="/data/v1/snapshot.csv", out_dir="/runs/a")
        b = RunConfig(layers=2, width=3, epochs=7, lr=1e-4, seed=5,
                      snapshot="elsewhere/snapshot.csv", out_dir=".")
        assert a.identity() == b.identity()
        assert a.config_hash == b.config_hash

    @pytest.mark.parametrize("overrides", [
        {"seed": 6}, {"lr": 2e-4}, {"lbfgs_max_iters": 9},
        {"snapshot": "/data/v1/other.csv"},
    ])
    def test_hash_tracks_identity_fields(self, overrides):
        base = dict(layers=2, width=3, epochs=7, lr=1e-4, seed=5,
                    snapshot="/data/v1/snapshot.csv")
        changed = dict(base)
        changed.update(overrides)
        assert RunConfig(**base).config_hash != RunConfig(**changed).config_hash

    def test_config_is_frozen(self):
        cfg = RunConfig(layers=1, width=1, epochs=1, lr=1e-3, seed=0,
                        snapshot="snap.csv")
        with pytest.raises(dataclasses.FrozenInstanceError):
            cfg.seed = 1


class TestTrainRun:
    def test_artifacts_written(self, trained):
        _, _, out = trained
        for name in ("checkpoint.json", "manifest.json", "timing.json"):
            assert (out / name).exists()

    def test_manifest_identity(self, trained):
        cfg, manifest, _ = trained
        assert manifest["stage"] == "train"
        assert manifest["status"] == "ok"
        assert manifest["config_hash"] == cfg.config_hash
        assert manifest["config"] == cfg.identity()
        assert manifest["config"]["snapshot"] == "snapshot.csv"

    def test_metrics_block(self, trained):
        _, manifest, _ = trained
        m = manifest["metrics"]
        assert m["m_c"] > 0 and m["m_b"] > 0
        assert m["param_count"] == NetworkShape(1, 2).param_count
        for block in ("j_adam_end", "j_lbfgs_end"):
            j = m[block]
            assert j["total"] == j["pde"] + j["bc"]
        ev = m["eval_lbfgs_end"]
        assert ev["l2rse_normalized"] == ev["l2rse"] / m["m_c"]
        assert isinstance(ev["trivial_flag"], bool)
        assert "s_dtheta" in m

    def test_checkpoint_reloads_and_predicts(self, trained, snapshot_csv):
        cfg, _, out = trained
        net = Network.load(str(out / "checkpoint.json"))
        assert net.config_hash == cfg.config_hash
        pts = np.array([[0.5, 0.5, 0.0, 1e-4]])
        assert np.isfinite(net.predict(pts)).all()

    def test_reruns_are_bit_identical(self, trained, snapshot_csv, tmp_path):
        cfg, _, out = trained
        again = tiny_config(snapshot_csv, tmp_path / "again")
        train_run(again)
        for name in ("manifest.json", "checkpoint.json"):
            assert (tmp_path / "again" / name).read_bytes() == \
                (out / name).read_bytes()

    def test_failure_writes_stage_manifest(self, tmp_path):
        cfg = tiny_config(str(tmp_path / "nope.csv"), tmp_path / "run")
        with pytest.raises(HarnessError, match="missing snapshot"):
            train_run(cfg)
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["status"] == "failed:load-data"
        assert manifest["error"].startswith("HarnessError:")
        assert manifest["config"] == cfg.identity()


class TestEvalRun:
    def test_matches_training_eval(self, trained, snapshot_csv, tmp_path):
        cfg, manifest, out = trained
        ev_manifest = eval_run(str(out / "checkpoint.json"), snapshot_csv,
                               str(tmp_path / "ev"))
        ev = ev_manifest["metrics"]["eval"]
        assert ev == manifest["metrics"]["eval_lbfgs_end"]
        assert ev_manifest["checkpoint_config_hash"] == cfg.config_hash

    def test_missing_checkpoint_fails_with_manifest(self, snapshot_csv,
                                                    tmp_path):
        with pytest.raises(CheckpointError):
            eval_run(str(tmp_path / "nope.json"), snapshot_csv,
                     str(tmp_path / "ev"))
        manifest = json.loads((tmp_path / "ev" / "manifest.json").read_text())
        assert manifest["status"].startswith("failed:")
        assert manifest["error"].startswith("CheckpointError:")


class TestDataGen:
    def test_artifacts_and_provenance(self, snapshot_csv):
        out = os.path.dirname(snapshot_csv)
        assert os.path.exists(snapshot_csv)
        manifest = json.loads(
            open(os.path.join(out, "snapshot.manifest.json")).read())
        assert manifest["mesh_meta"]["nx"] == 4
        assert manifest["lf"] == pytest.approx(0.82)
        assert manifest["schedule"][-1] == manifest["lf"]
        assert "material" in manifest

    def test_regeneration_is_bit_identical(self, snapshot_csv, tmp_path):
        data_gen(4, str(tmp_path))
        assert (tmp_path / "snapshot.csv").read_bytes() == \
            open(snapshot_csv, "rb").read()


class TestMeshGen:
    def test_writes_loadable_mesh(self, tmp_path):
        path = tmp_path / "nested" / "mesh.json"
        mesh = mesh_gen(4, str(path))
        loaded = Mesh.load(str(path))
        assert loaded.meta["nx"] == 4
        assert loaded.n_elements == mesh.n_elements


class TestIfennRun:
    def test_elastic_solve_manifest(self, tmp_path):
        ckpt = zero_checkpoint(tmp_path / "zero.json")
        manifest = ifenn_run(ckpt, 4, str(tmp_path / "run"), lf=0.2,
                             reference=True)
        m = manifest["metrics"]
        assert m["d_max"] == 0.0
        assert m["iter_ifenn"] >= 1
        assert len(m["res_history"]) == m["iter_ifenn"] + 1
        ref = m["reference"]
        assert ref["damage_l2_diff"] == 0.0
        assert all(p >= 1 for p in ref["staggered_passes"])
        field = (tmp_path / "run" / "field.csv").read_text().splitlines()
        assert field[0].split(",") == ["x", "y", "eps_eq", "eps_bar", "d"]
        assert len(field) > 1

    def test_missing_checkpoint_fails_with_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            ifenn_run(str(tmp_path / "nope.json"), 4, str(tmp_path / "run"))
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["status"].startswith("failed:")


def valid_spec(**overrides):
    kwargs = dict(study="convergence", shapes=[(2, 2)], meshes=[4],
                  grid=[(5, 1e-3)], seeds=2, lbfgs_max_iters=4)
    kwargs.update(overrides)
    return SweepSpec(**kwargs)


class TestSweepSpec:
    @pytest.mark.parametrize("overrides", [
        {"study": "mystery"},
        {"shapes": []},
        {"meshes": []},
        {"grid": []},
        {"seeds": 0},
        {"parallelism": 0},
        {"shapes": [(2, 3)]},
        {"study": "hps", "shapes": [(2, 30), (3, 10)]},
        {"study": "cross-mesh", "shapes": [(2, 2), (3, 3)]},
    ])
    def test_invalid_specs_rejected(self, overrides):
        with pytest.raises(HarnessError):
            valid_spec(**overrides)

    def test_snapshot_validation(self, tmp_path, snapshot_csv):
        spec = valid_spec()
        with pytest.raises(HarnessError, match="no snapshot configured"):
            spec.validate_snapshots()
        spec.snapshots = {4: str(tmp_path / "nope.csv")}
        with pytest.raises(HarnessError, match="missing snapshot"):
            spec.validate_snapshots()
        spec.snapshots = {4: snapshot_csv}
        spec.validate_snapshots()

    def test_from_json_resolves_relative_snapshots(self, tmp_path,
                                                   snapshot_csv):
        os.symlink(os.path.dirname(snapshot_csv), tmp_path / "data")
        cfg = {"study": "convergence", "shapes": [[2, 2]], "meshes": [4],
               "grid": [[5, 1e-3]], "seeds": 1,
               "snapshots": {"4": "data/snapshot.csv"}}
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(cfg))
        spec = SweepSpec.from_json(str(path))
        assert spec.snapshots == {4: str(tmp_path / "data" / "snapshot.csv")}
        spec.validate_snapshots()

    def test_from_json_missing_key(self, tmp_path):
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps({"study": "convergence"}))
        with pytest.raises(HarnessError, match="missing"):
            SweepSpec.from_json(str(path))

    def test_from_json_unreadable(self, tmp_path):
        path = tmp_path / "sweep.json"
        path.write_text("{nope")
        with pytest.raises(HarnessError, match="unreadable"):
            SweepSpec.from_json(str(path))
        with pytest.raises(HarnessError, match="unreadable"):
            SweepSpec.from_json(str(tmp_path / "absent.json"))

    def test_sweep_cells_canonical_order(self, snapshot_csv):
        spec = valid_spec(grid=[(5, 1e-3), (5, 1e-4)], seeds=2,
                          snapshots={4: snapshot_csv})
        cells = sweep_cells(spec, "/out")
        assert len(cells) == 4
        names = [os.path.basename(cfg.out_dir) for _, cfg in cells]
        assert names == ["L2w2-m4-ep5-lr0.001-s0", "L2w2-m4-ep5-lr0.001-s1",
                         "L2w2-m4-ep5-lr0.0001-s0", "L2w2-m4-ep5-lr0.0001-s1"]
        assert all(mesh == 4 for mesh, _ in cells)
        hashes = {cfg.config_hash for _, cfg in cells}
        assert len(hashes) == 4


@pytest.fixture(scope="module")
def serial_sweep(snapshot_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweepA")
    spec = valid_spec(snapshots={4: snapshot_csv})
    rows, agg = run_sweep(spec, str(out))
    return out, rows, agg


class TestSweepExecution:
    def test_outputs_written(self, serial_sweep):
        out, rows, agg = serial_sweep
        assert len(rows) == 2 and len(agg) == 1
        for name in ("runs.csv", "aggregate.csv", "sweep.json"):
            assert (out / name).exists()
        header = (out / "runs.csv").read_text().splitlines()[0]
        assert header == ",".join(RUN_ROW_COLUMNS)

    def test_aggregate_arithmetic(self, serial_sweep):
        _, rows, agg = serial_sweep
        cell = agg[0]
        assert cell["seeds"] == 2
        vals = [r["j_lbfgs"] for r in rows]
        assert cell["j_lbfgs_mean"] == sum(vals) / 2
        assert cell["j_lbfgs_min"] == min(vals)
        assert cell["j_lbfgs_max"] == max(vals)

    def test_parallel_results_identical(self, serial_sweep, snapshot_csv,
                                        tmp_path):
        out, _, _ = serial_sweep
        spec = valid_spec(snapshots={4: snapshot_csv}, parallelism=2)
        run_sweep(spec, str(tmp_path))
        for name in ("runs.csv", "aggregate.csv"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()
        cell = "runs/L2w2-m4-ep5-lr0.001-s0/manifest.json"
        assert (tmp_path / cell).read_bytes() == (out / cell).read_bytes()

    def test_report_rebuilds_aggregate(self, serial_sweep, tmp_path):
        out, _, _ = serial_sweep
        report(str(out), str(tmp_path / "agg.csv"))
        assert (tmp_path / "agg.csv").read_bytes() == \
            (out / "aggregate.csv").read_bytes()

    def test_collect_requires_manifests(self, tmp_path):
        with pytest.raises(HarnessError, match="no successful train"):
            collect_run_rows(str(tmp_path))


def synthetic_row(seed, j, trivial):
    row = {"layers": 2, "width": 2, "mesh": 4, "epochs": 5, "lr": 1e-3,
           "seed": seed, "trivial_flag": trivial}
    for name in ("j_adam", "j_lbfgs", "l2rse_adam", "l2rse_lbfgs",
                 "l2rse_norm_lbfgs", "iter_lbfgs", "max_strain_rel_error"):
        row[name] = j
    row["s_dtheta"] = None if seed == 0 else j
    return row


class TestAggregation:
    def test_exact_group_statistics(self):
        rows = [synthetic_row(0, 2.0, True), synthetic_row(1, 4.0, False)]
        agg = aggregate_rows(rows)
        assert len(agg) == 1
        cell = agg[0]
        assert cell["j_lbfgs_mean"] == 3.0
        assert cell["j_lbfgs_min"] == 2.0
        assert cell["j_lbfgs_max"] == 4.0
        assert cell["trivial_rate"] == 0.5
        assert cell["s_dtheta_mean"] == 4.0

    def test_all_none_stat_stays_none(self):
        rows = [synthetic_row(0, 1.0, False)]
        cell = aggregate_rows(rows)[0]
        assert cell["s_dtheta_mean"] is None

    def test_csv_formatting(self, tmp_path):
        path = tmp_path / "t.csv"
        write_rows_csv(str(path), ("a", "b", "c", "d"),
                       [{"a": True, "b": False, "c": 0.1, "d": None}])
        assert path.read_text() == "a,b,c,d\n1,0,0.1,\n"
