import json
import struct

import numpy as np
import pytest

import stub_models
from pemb_export import (
    DimMismatch,
    ExportManifest,
    ModelLoadError,
    export_embeddings,
    resolve_model,
)
from pemb_export.cli import main as cli_main

# the primary toolkit is only touched through the file format it defines
from pemb import read_pemb


@pytest.fixture(autouse=True)
def clear_call_log():
    stub_models.CALL_LOG.clear()


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def caption_file(tmp_path, lines):
    p = tmp_path / "captions.txt"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(p)


class TestCaptionExport:
    def test_round_trip_through_primary_reader(self, tmp_path):
        lines = ["a dog on grass", "violoncelle en été", "空 と 海", ""]
        manifest = ExportManifest(
            model="stub_models:gaussian_text_model",
            output=str(tmp_path / "caps.pemb"),
            modality="textual",
            caption_file=caption_file(tmp_path, lines),
        )
        report = export_embeddings(manifest)
        assert report.count == 4
        assert report.has_log_var is True

        back = read_pemb(manifest.output)
        assert back.ids == ("line000001", "line000002", "line000003", "line000004")
        assert back.modality.value == "textual"
        assert back.has_log_var
        want_mu, want_lv = stub_models.gaussian_text_model(lines)
        np.testing.assert_array_equal(back.mu, f32(want_mu))
        np.testing.assert_array_equal(back.log_var, f32(want_lv))

    def test_batches_are_sequential_and_ordered(self, tmp_path):
        lines = [f"caption number {i}" for i in range(8)]
        manifest = ExportManifest(
            model="stub_models:gaussian_text_model",
            output=str(tmp_path / "caps.pemb"),
            modality="textual",
            batch_size=3,
            caption_file=caption_file(tmp_path, lines),
        )
        export_embeddings(manifest)
        assert stub_models.CALL_LOG == [3, 3, 2]
        back = read_pemb(manifest.output)
        want_mu, _ = stub_models.gaussian_text_model(lines)
        np.testing.assert_array_equal(back.mu, f32(want_mu))

    def test_empty_caption_file_with_declared_dim(self, tmp_path):
        p = tmp_path / "none.txt"
        p.write_text("", encoding="utf-8")
        manifest = ExportManifest(
            model="stub_models:gaussian_text_model",
            output=str(tmp_path / "empty.pemb"),
            caption_file=str(p),
            dim=stub_models.DIM,
        )
        report = export_embeddings(manifest)
        assert report.count == 0
        back = read_pemb(manifest.output)
        assert len(back) == 0
        assert back.mu.shape == (0, stub_models.DIM)

    def test_empty_without_dim_fails(self, tmp_path):
        p = tmp_path / "none.txt"
        p.write_text("", encoding="utf-8")
        manifest = ExportManifest(
            model="stub_models:gaussian_text_model",
            output=str(tmp_path / "empty.pemb"),
            caption_file=str(p),
        )
        with pytest.raises(ValueError):
            export_embeddings(manifest)


class TestImageExport:
    def test_mean_only_flag_bit_clear(self, tmp_path):
        paths = [f"/data/photos/img_{i:03d}.jpg" for i in range(5)]
        manifest = ExportManifest(
            model="stub_models:mean_only_image_model",
            output=str(tmp_path / "imgs.pemb"),
            modality="visual",
            images=paths,
        )
        report = export_embeddings(manifest)
        assert report.has_log_var is False

        raw = open(manifest.output, "rb").read()
        version, flags, count, dim = struct.unpack_from("<IIQI", raw, 4)
        assert flags & 0x1 == 0          # no log-var block
        assert (flags >> 1) & 0x3 == 1   # visual
        assert count == 5

        back = read_pemb(manifest.output)
        assert not back.has_log_var
        assert back.ids == tuple(f"img_{i:03d}.jpg" for i in range(5))
        want_mu, _ = stub_models.mean_only_image_model(paths)
        np.testing.assert_array_equal(back.mu, f32(want_mu))

    def test_sigma_model_flag_bits(self, tmp_path):
        manifest = ExportManifest(
            model="stub_models:gaussian_text_model",
            output=str(tmp_path / "t.pemb"),
            modality="textual",
            caption_file=caption_file(tmp_path, ["one", "two"]),
        )
        export_embeddings(manifest)
        raw = open(manifest.output, "rb").read()
        _, flags, _, _ = struct.unpack_from("<IIQI", raw, 4)
        assert flags & 0x1 == 1
        assert (flags >> 1) & 0x3 == 2   # textual

    def test_duplicate_basenames_rejected(self, tmp_path):
        manifest_kwargs = dict(
            model="stub_models:mean_only_image_model",
            output=str(tmp_path / "dup.pemb"),
            images=["/a/x.jpg", "/b/x.jpg"],
        )
        with pytest.raises(ValueError):
            export_embeddings(ExportManifest(**manifest_kwargs))


class TestModelResolution:
    def test_resolves_callable(self):
        fn = resolve_model("stub_models:gaussian_text_model")
        assert callable(fn)

    @pytest.mark.parametrize("spec", [
        "no_such_module_xyz:fn",
        "stub_models:no_such_attr",
        "stub_models:not_callable",
        "malformed",
        ":fn",
        "stub_models:",
    ])
    def test_bad_specs(self, spec):
        with pytest.raises(ModelLoadError):
            resolve_model(spec)

    def test_garbage_return_reported(self, tmp_path):
        manifest = ExportManifest(
            model="stub_models:returns_garbage",
            output=str(tmp_path / "g.pemb"),
            caption_file=caption_file(tmp_path, ["x"]),
        )
        with pytest.raises(ModelLoadError):
            export_embeddings(manifest)


class TestDimChecks:
    def test_declared_dim_mismatch(self, tmp_path):
        manifest = ExportManifest(
            model="stub_models:gaussian_text_model",
            output=str(tmp_path / "d.pemb"),
            caption_file=caption_file(tmp_path, ["x"]),
            dim=stub_models.DIM + 1,
        )
        with pytest.raises(DimMismatch):
            export_embeddings(manifest)

    def test_dim_drift_between_batches(self, tmp_path):
        manifest = ExportManifest(
            model="stub_models:third_batch_grows",
            output=str(tmp_path / "d.pemb"),
            batch_size=2,
            caption_file=caption_file(tmp_path, [f"c{i}" for i in range(6)]),
        )
        with pytest.raises(DimMismatch):
            export_embeddings(manifest)

    def test_log_var_drift_between_batches(self, tmp_path):
        manifest = ExportManifest(
            model="stub_models:forgets_log_var",
            output=str(tmp_path / "d.pemb"),
            batch_size=2,
            caption_file=caption_file(tmp_path, [f"c{i}" for i in range(4)]),
        )
        with pytest.raises(DimMismatch):
            export_embeddings(manifest)

    def test_wrong_row_count(self, tmp_path):
        manifest = ExportManifest(
            model="stub_models:wrong_row_count",
            output=str(tmp_path / "d.pemb"),
            caption_file=caption_file(tmp_path, ["x", "y"]),
        )
        with pytest.raises(DimMismatch):
            export_embeddings(manifest)

    def test_non_finite_rejected(self, tmp_path):
        manifest = ExportManifest(
            model="stub_models:emits_nan",
            output=str(tmp_path / "d.pemb"),
            caption_file=caption_file(tmp_path, ["x"]),
        )
        with pytest.raises(ValueError):
            export_embeddings(manifest)


class TestManifestValidation:
    def test_needs_exactly_one_input_source(self, tmp_path):
        with pytest.raises(ValueError):
            ExportManifest(model="m:f", output="o.pemb")
        with pytest.raises(ValueError):
            ExportManifest(
                model="m:f", output="o.pemb",
                images=["a.jpg"], caption_file="c.txt",
            )

    def test_bad_modality(self):
        with pytest.raises(ValueError):
            ExportManifest(model="m:f", output="o", modality="audio", images=["a"])

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            ExportManifest(model="m:f", output="o", batch_size=0, images=["a"])


class TestCli:
    def test_manifest_file_end_to_end(self, tmp_path, capsys):
        manifest = {
            "model": "stub_models:gaussian_text_model",
            "output": str(tmp_path / "out.pemb"),
            "modality": "textual",
            "caption_file": caption_file(tmp_path, ["hello", "world"]),
        }
        mpath = tmp_path / "job.json"
        mpath.write_text(json.dumps(manifest))
        assert cli_main([str(mpath)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["count"] == 2
        assert report["has_log_var"] is True
        assert read_pemb(manifest["output"]).ids == ("line000001", "line000002")

    def test_unknown_key_rejected(self, tmp_path, capsys):
        mpath = tmp_path / "job.json"
        mpath.write_text(json.dumps({"model": "m:f", "output": "o", "bogus": 1}))
        assert cli_main([str(mpath)]) == 2

    def test_model_error_exit_code(self, tmp_path, capsys):
        manifest = {
            "model": "no_such_module_xyz:fn",
            "output": str(tmp_path / "o.pemb"),
            "caption_file": caption_file(tmp_path, ["x"]),
        }
        mpath = tmp_path / "job.json"
        mpath.write_text(json.dumps(manifest))
        assert cli_main([str(mpath)]) == 2
