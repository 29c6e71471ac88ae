import json
import numpy as np
import pytest

from voxelmesh.backbone import TOY, WeightStore
from voxelmesh.camera import load_rig, load_views, read_pfm, read_png, decode_normals
from voxelmesh.cli import build_parser, main
from voxelmesh.config import PipelineConfig, config_from_dict, load_config
from voxelmesh.fixtures import fixture_grid, textured_shape, write_fixture
from voxelmesh.meshing import mesh_stats
from voxelmesh.meshio import load_mesh
from voxelmesh.pipeline import StageError, reconstruct
from voxelmesh.volume import load_volume, mesh_to_sdf


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


@pytest.fixture(scope="module")
def pipeline_runs(sphere_fixture, tmp_path_factory):
    """One enhanced and one --skip-enhance CLI run on the sphere fixture."""
    out = tmp_path_factory.mktemp("recon")
    common = ["reconstruct", sphere_fixture.root, "--occupancy-from-gt-sdf", "--seed", 0]
    assert main([str(a) for a in common + ["--out", out / "full.obj"]]) == 0
    assert main([str(a) for a in common + ["--skip-enhance", "--out", out / "skip.obj"]]) == 0
    assert main([str(a) for a in common + ["--out", out / "again.obj"]]) == 0
    return out


# --------------------------------------------------------------------------
# fixtures


class TestFixtures:
    def test_files_reload(self, sphere_fixture):
        root = sphere_fixture.root
        for kind in ("rgb", "normal", "mask"):
            assert len(list(root.glob(f"{kind}_*.png"))) == 6
        assert len(load_rig(root / "rig.json")) == 6
        views = load_views(root)
        assert len(views) == 6 and views[0].rgb.shape == (64, 64, 3)
        assert load_mesh(sphere_fixture.mesh).n_faces > 0
        assert load_volume(sphere_fixture.sdf).values.shape == (32, 32, 32)

    def test_png_normals_unit_within_one_degree(self, sphere_fixture):
        root = sphere_fixture.root
        for i in range(6):
            mask = read_png(root / f"mask_{i:03d}.png") > 0.5
            png = decode_normals(read_png(root / f"normal_{i:03d}.png"), mask)[mask]
            exact = read_pfm(root / f"normal_{i:03d}.pfm")[mask]
            np.testing.assert_allclose(np.linalg.norm(png, axis=1), 1.0, atol=1e-9)
            cos = np.clip(np.sum(png * exact, axis=1) / np.linalg.norm(exact, axis=1), -1, 1)
            assert np.degrees(np.arccos(cos)).max() <= 1.0

    def test_pfm_normals_unit(self, sphere_fixture):
        views = load_views(sphere_fixture.root)
        for v in views:
            n = v.normal[v.mask]
            assert np.abs(np.linalg.norm(n, axis=1) - 1).max() <= 1e-5

    def test_sdf_matches_mesh(self, sphere_fixture):
        stored = load_volume(sphere_fixture.sdf)
        fresh = mesh_to_sdf(load_mesh(sphere_fixture.mesh), fixture_grid(32))
        assert np.abs(np.asarray(stored.values, float) - fresh.values).max() <= 1e-4

    def test_cli_byte_determinism(self, tmp_path):
        for d in ("a", "b"):
            assert run(["fixtures", "--shape", "cube", "--views", 2, "--size", 16,
                        "--sdf-resolution", 8, "--out", tmp_path / d]) == (0, None)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n

    def test_unknown_shape(self, tmp_path):
        with pytest.raises(ValueError):
            write_fixture(tmp_path, "blob")

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, out = run(["fixtures", "--out", blocker / "sub", "--views", 1, "--size", 8,
                         "--sdf-resolution", 4], capsys)
        assert code == 3
        assert str(blocker) in out.err


# --------------------------------------------------------------------------
# pipeline


class TestPipeline:
    def test_liveness_manifold(self, sphere_fixture):
        views = load_views(sphere_fixture.root)
        rec = reconstruct(views, PipelineConfig(), gt_sdf=load_volume(sphere_fixture.sdf), occupancy_from_gt=True)
        assert rec.mesh.n_faces > 0
        s = mesh_stats(rec.mesh)
        assert s.open_edges == 0 and s.nonmanifold_edges == 0 and s.nonmanifold_vertices == 0
        assert rec.mesh.colors is not None and rec.mesh.normals is not None
        assert rec.provenance["occupancy_source"] == "ground_truth_sdf"

    def test_seeded_occupancy_runs_or_names_stage(self, sphere_fixture):
        views = load_views(sphere_fixture.root)
        try:
            rec = reconstruct(views, PipelineConfig(skip_enhance=True))
        except StageError as exc:
            assert exc.stage in {"occupancy", "extract"}
        else:
            assert rec.mesh.n_faces > 0

    def test_timings_cover_wall_time(self, sphere_fixture):
        views = load_views(sphere_fixture.root)
        rec = reconstruct(views, PipelineConfig(), gt_sdf=load_volume(sphere_fixture.sdf), occupancy_from_gt=True)
        assert abs(sum(rec.timings.values()) - rec.wall_time) <= 0.05 * rec.wall_time

    def test_skip_enhance_identity_in_memory(self, sphere_fixture):
        views = load_views(sphere_fixture.root)
        gt = load_volume(sphere_fixture.sdf)
        full = reconstruct(views, PipelineConfig(), gt_sdf=gt, occupancy_from_gt=True)
        skip = reconstruct(views, PipelineConfig(skip_enhance=True), gt_sdf=gt, occupancy_from_gt=True)
        np.testing.assert_array_equal(skip.mesh.vertices, full.pre_enhance.vertices)
        np.testing.assert_array_equal(skip.mesh.faces, full.pre_enhance.faces)
        assert not np.array_equal(full.mesh.vertices, full.pre_enhance.vertices)

    def test_stage_error_names_stage(self, sphere_fixture):
        views = load_views(sphere_fixture.root)
        with pytest.raises(StageError, match="occupancy"):
            reconstruct(views, PipelineConfig(), occupancy_from_gt=True)

    def test_loss_volume_terms_with_gt(self, sphere_fixture):
        views = load_views(sphere_fixture.root)
        rec = reconstruct(views, PipelineConfig(), gt_sdf=load_volume(sphere_fixture.sdf), occupancy_from_gt=True)
        assert rec.loss.total > 0 and rec.provenance["volume_terms_supervised"]

    def test_cli_skip_enhance_matches_checkpoint(self, pipeline_runs):
        assert (pipeline_runs / "skip.obj").read_bytes() == (pipeline_runs / "full.pre_enhance.obj").read_bytes()
        assert not (pipeline_runs / "skip.pre_enhance.obj").exists()

    def test_cli_outputs(self, pipeline_runs):
        prov = json.loads((pipeline_runs / "full.provenance.json").read_text())
        assert prov["config_hash"] == TOY.config_hash().hex()
        assert prov["seed"] == 0
        assert set(prov["stage_timings"]) >= {"encode", "voxelformer", "sparsevoxelformer", "extract", "enhance"}
        loss = json.loads((pipeline_runs / "full.loss.json").read_text())
        assert "total" in loss
        assert load_mesh(pipeline_runs / "full.obj").n_faces > 0

    def test_cli_rerun_byte_identical(self, pipeline_runs):
        assert (pipeline_runs / "full.obj").read_bytes() == (pipeline_runs / "again.obj").read_bytes()
        assert (pipeline_runs / "full.loss.json").read_bytes() == (pipeline_runs / "again.loss.json").read_bytes()


# --------------------------------------------------------------------------
# thin wrappers


class TestCommands:
    def test_extract_then_eval(self, sphere_fixture, tmp_path):
        assert run(["extract", sphere_fixture.sdf, "--out", tmp_path / "x.obj"]) == (0, None)
        assert run(["eval", tmp_path / "x.obj", sphere_fixture.mesh, "--no-images", "--points", 20000,
                    "--out", tmp_path / "r.json"]) == (0, None)
        report = json.loads((tmp_path / "r.json").read_text())
        gt = load_mesh(sphere_fixture.mesh)
        # the evaluation frame rescales the ground truth to unit extent
        voxel = float(np.max(fixture_grid(32).voxel_size)) / np.ptp(gt.vertices, axis=0).max()
        assert report["chamfer"] < voxel
        assert report["psnr_color"] is None

    def test_eval_self(self, sphere_fixture, tmp_path):
        assert run(["eval", sphere_fixture.mesh, sphere_fixture.mesh, "--no-images", "--points", 20000,
                    "--out", tmp_path / "r.json"]) == (0, None)
        assert json.loads((tmp_path / "r.json").read_text())["fscore"] == 1.0

    def test_eval_manifest(self, sphere_fixture, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps([[str(sphere_fixture.mesh), str(sphere_fixture.mesh)]]))
        assert run(["eval", "--manifest", tmp_path / "m.json", "--no-images", "--points", 2000,
                    "--out", tmp_path / "r.csv"]) == (0, None)
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert len(lines) == 2 and "fscore" in lines[0]

    def test_sdf_matches_fixture(self, sphere_fixture, tmp_path):
        assert run(["sdf", sphere_fixture.mesh, "--resolution", 32, "--out", tmp_path / "s.vxm"]) == (0, None)
        a = np.asarray(load_volume(tmp_path / "s.vxm").values, float)
        b = np.asarray(load_volume(sphere_fixture.sdf).values, float)
        assert np.abs(a - b).max() <= 1e-4

    def test_enhance_with_report(self, sphere_fixture, tmp_path):
        assert run(["enhance", sphere_fixture.mesh, "--iterations", 5, "--report", tmp_path / "r.json",
                    "--out", tmp_path / "e.obj"]) == (0, None)
        assert load_mesh(tmp_path / "e.obj").n_vertices == load_mesh(sphere_fixture.mesh).n_vertices
        assert "after" in json.loads((tmp_path / "r.json").read_text())

    def test_render(self, sphere_fixture, tmp_path):
        assert run(["render", sphere_fixture.mesh, "--views", 2, "--size", 16, "--out", tmp_path]) == (0, None)
        assert len(load_views(tmp_path)) == 2

    @pytest.mark.parametrize("argv", [
        ["extract", "{missing}", "--out", "{tmp}/x.obj"],
        ["eval", "{missing}", "{missing}", "--no-images"],
        ["sdf", "{missing}", "--out", "{tmp}/s.vxm"],
        ["enhance", "{missing}", "--out", "{tmp}/e.obj"],
        ["render", "{missing}", "--out", "{tmp}"],
        ["reconstruct", "{missing}", "--out", "{tmp}/r.obj"],
        ["weights", "--config", "{missing}", "--out", "{tmp}/w.mfw"],
    ])
    def test_missing_input(self, argv, tmp_path, capsys):
        missing = tmp_path / "nope" / "gone.obj"
        code, out = run([a.format(missing=missing, tmp=tmp_path) for a in argv], capsys)
        assert code == 3
        lines = out.err.strip().splitlines()
        assert len(lines) == 1 and str(missing) in lines[0]

    def test_usage_error(self, capsys):
        code, _ = run(["eval"], capsys)
        assert code == 2
        assert main(["no-such-command"]) == 2

    def test_help_lists_every_flag(self, capsys):
        parser = build_parser()
        sub = next(a for a in parser._actions if a.dest == "command")
        for name, p in sub.choices.items():
            with pytest.raises(SystemExit):
                p.parse_args(["--help"])
            text = capsys.readouterr().out
            for action in p._actions:
                for opt in action.option_strings:
                    assert opt in text, (name, opt)
            for flag in ("--seed", "--config"):
                assert flag in text
            assert any("--out" in a.option_strings for a in p._actions), name

    def test_main_help_exit_zero(self, capsys):
        assert main(["--help"]) == 0


# --------------------------------------------------------------------------
# configuration


class TestConfigFiles:
    def test_defaults_are_toy(self):
        assert PipelineConfig().arch == TOY
        assert PipelineConfig().resolved_coarse == 16 and PipelineConfig().resolved_factor == 2

    def test_toml_and_json_agree(self, tmp_path):
        (tmp_path / "c.toml").write_text('# comment\nseed = 4\n[enhance]\niterations = 7\n')
        (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "enhance": {"iterations": 7}}))
        assert load_config(tmp_path / "c.toml") == load_config(tmp_path / "c.json")
        assert load_config(tmp_path / "c.toml").enhance.iterations == 7

    def test_roundtrip(self):
        cfg = PipelineConfig(seed=3, skip_enhance=True)
        assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    @pytest.mark.parametrize("data", [{"bogus": 1}, {"enhance": {"gamma": 1.0}}, {"loss_weights": {"x": 2}}])
    def test_unknown_keys(self, data):
        with pytest.raises(ValueError, match="unknown"):
            config_from_dict(data)

    def test_unknown_key_cli(self, tmp_path, capsys):
        (tmp_path / "c.toml").write_text("colour = 1\n")
        code, out = run(["weights", "--config", tmp_path / "c.toml", "--out", tmp_path / "w.mfw"], capsys)
        assert code == 3 and "colour" in out.err

    def test_flag_overrides_config(self, tmp_path):
        (tmp_path / "c.toml").write_text("seed = 5\n")
        assert run(["weights", "--config", tmp_path / "c.toml", "--out", tmp_path / "a.mfw"]) == (0, None)
        assert run(["weights", "--config", tmp_path / "c.toml", "--seed", 7, "--out", tmp_path / "b.mfw"]) == (0, None)
        assert run(["weights", "--out", tmp_path / "c.mfw"]) == (0, None)
        assert (tmp_path / "a.mfw").read_bytes() == WeightStore.initialize(TOY, 5).to_bytes()
        assert (tmp_path / "b.mfw").read_bytes() == WeightStore.initialize(TOY, 7).to_bytes()
        assert (tmp_path / "c.mfw").read_bytes() == WeightStore.initialize(TOY, 0).to_bytes()

    def test_enhance_flag_overrides_config(self, sphere_fixture, tmp_path):
        (tmp_path / "c.toml").write_text("[enhance]\nbeta = 0.0\n")
        assert run(["enhance", sphere_fixture.mesh, "--config", tmp_path / "c.toml",
                    "--out", tmp_path / "a.obj"]) == (0, None)
        assert run(["enhance", sphere_fixture.mesh, "--config", tmp_path / "c.toml", "--beta", 1.0,
                    "--out", tmp_path / "b.obj"]) == (0, None)
        src = load_mesh(sphere_fixture.mesh).vertices
        np.testing.assert_allclose(load_mesh(tmp_path / "a.obj").vertices, src, atol=1e-6)
        assert not np.allclose(load_mesh(tmp_path / "b.obj").vertices, src, atol=1e-6)

    def test_bad_values(self):
        with pytest.raises(ValueError):
            PipelineConfig(occupancy_threshold=1.5)
        with pytest.raises(ValueError):
            PipelineConfig(preset="huge")
