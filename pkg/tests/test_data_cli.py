import hashlib
import json

import numpy as np
import pytest
import torch
from PIL import Image

from rstego import cli, core, data, networks, training

from conftest import make_corpus, write_png_corpus


@pytest.fixture()
def png_corpus(tmp_path):
    images = make_corpus(10, 32, seed=40)
    write_png_corpus(tmp_path / "corpus", images)
    return tmp_path / "corpus"


@pytest.fixture()
def tiny_checkpoint(tmp_path):
    spec = networks.NetworkSpec(depth=2, base_channels=8)
    bundle = networks.build_bundle(n=1, seed=41, spec=spec, disc_base_channels=16)
    path = str(tmp_path / "tiny.pt")
    networks.save_checkpoint(path, bundle, step=0, extra={"image_side": 32})
    return path


class TestSplitCounts:
    def test_ten_images_standard_fractions(self):
        assert data.split_counts(10, (0.8, 0.1, 0.1)) == (8, 1, 1)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            data.split_counts(10, (0.5, 0.2, 0.2))

    def test_all_items_assigned(self):
        for total in (1, 3, 7, 23):
            counts = data.split_counts(total, (0.7, 0.2, 0.1))
            assert sum(counts) == total


class TestIngest:
    def test_empty_directory_errors(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ValueError, match="no images found"):
            data.ingest(tmp_path / "empty", side=32)

    def test_split_deterministic_under_seed(self, png_corpus):
        a = data.ingest(png_corpus, side=32, seed=5)
        b = data.ingest(png_corpus, side=32, seed=5)
        assert a.entries == b.entries
        c = data.ingest(png_corpus, side=32, seed=6)
        assert a.entries != c.entries

    def test_counts(self, png_corpus):
        manifest = data.ingest(png_corpus, side=32, fractions=(0.8, 0.1, 0.1), seed=0)
        assert len(manifest.paths("train")) == 8
        assert len(manifest.paths("val")) == 1
        assert len(manifest.paths("test")) == 1

    def test_undecodable_files_skipped(self, png_corpus):
        (png_corpus / "broken.png").write_bytes(b"not an image")
        manifest = data.ingest(png_corpus, side=32, seed=0)
        assert all("broken" not in rel for rel, _ in manifest.entries)

    def test_manifest_round_trip(self, png_corpus, tmp_path):
        manifest = data.ingest(png_corpus, side=32, seed=0)
        path = tmp_path / "manifest.json"
        manifest.save(path)
        restored = data.DatasetManifest.load(path).validate()
        assert restored.entries == manifest.entries
        assert restored.side == 32

    def test_duplicate_entry_rejected(self, png_corpus):
        manifest = data.ingest(png_corpus, side=32, seed=0)
        rel = manifest.entries[0][0]
        manifest.entries.append((rel, "test"))
        with pytest.raises(ValueError, match="listed in both"):
            manifest.validate()

    def test_missing_file_rejected(self, png_corpus):
        manifest = data.ingest(png_corpus, side=32, seed=0)
        manifest.entries.append(("ghost.png", "test"))
        with pytest.raises(ValueError, match="missing file"):
            manifest.validate()


class TestArrayDataset:
    def test_groups_are_disjoint(self):
        dataset = data.ArrayDataset(make_corpus(12, 32, seed=42))
        rng = torch.Generator().manual_seed(0)
        cover, secrets = dataset.sample_batch(rng, batch_size=3, n=2)
        assert cover.shape == (3, 3, 32, 32)
        assert len(secrets) == 2
        for b in range(3):
            group = [cover[b]] + [s[b] for s in secrets]
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    assert not torch.equal(group[i], group[j])

    def test_too_small_pool_rejected(self):
        dataset = data.ArrayDataset(make_corpus(3, 32, seed=43))
        with pytest.raises(ValueError):
            dataset.sample_batch(torch.Generator(), batch_size=2, n=1)


def _sha256(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestCli:
    def test_ingest_command(self, png_corpus, tmp_path, capsys):
        out = tmp_path / "m.json"
        code = cli.main(["ingest", "--src", str(png_corpus), "--out", str(out),
                         "--side", "32", "--seed", "1"])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["train"] == 8

    def test_ingest_bad_fractions_exit_2(self, png_corpus, tmp_path):
        code = cli.main(["ingest", "--src", str(png_corpus), "--out",
                         str(tmp_path / "m.json"), "--fractions", "0.5,0.5"])
        assert code == 2

    def test_attack_scale_factor_one_bit_identical(self, png_corpus, tmp_path, capsys):
        src = sorted(png_corpus.glob("*.png"))[0]
        out = tmp_path / "attacked.png"
        before = _sha256(src)
        code = cli.main(["attack", "--input", str(src), "--op", "scale",
                         "--factor", "1.0", "--out", str(out), "--seed", "0"])
        assert code == 0
        assert _sha256(src) == before  # inputs never mutated
        assert np.array_equal(np.asarray(Image.open(src)), np.asarray(Image.open(out)))

    def test_attack_real_jpeg_reports_psnr(self, png_corpus, tmp_path, capsys):
        src = sorted(png_corpus.glob("*.png"))[0]
        out = tmp_path / "attacked.jpg"
        code = cli.main(["attack", "--input", str(src), "--op", "real-jpeg",
                         "--qf", "70", "--out", str(out), "--seed", "0"])
        assert code == 0
        assert "psnr vs input" in capsys.readouterr().err
        assert out.exists()
        reloaded = core.load_image(out, 32)
        original = core.load_image(src, 32)
        assert core.psnr(original, reloaded) > 20.0

    def test_attack_unknown_op_exit_2_lists_ops(self, png_corpus, tmp_path, capsys):
        src = sorted(png_corpus.glob("*.png"))[0]
        code = cli.main(["attack", "--input", str(src), "--op", "sharpen",
                         "--out", str(tmp_path / "x.png")])
        assert code == 2
        assert "jpeg-mask" in capsys.readouterr().err

    def test_attack_without_seed_prints_seed(self, png_corpus, tmp_path, capsys):
        src = sorted(png_corpus.glob("*.png"))[0]
        code = cli.main(["attack", "--input", str(src), "--op", "noise",
                         "--out", str(tmp_path / "n.png")])
        assert code == 0
        assert "seed:" in capsys.readouterr().err

    def test_train_missing_config_exit_2(self, tmp_path, capsys):
        code = cli.main(["train", "--manifest", str(tmp_path / "m.json")])
        assert code == 2
        assert "config" in capsys.readouterr().err

    def test_train_nonexistent_config_exit_2(self, tmp_path):
        code = cli.main(["train", "--manifest", str(tmp_path / "m.json"),
                         "--config", str(tmp_path / "ghost.cfg")])
        assert code == 2

    def test_train_single_step_and_resume(self, png_corpus, tmp_path, capsys):
        manifest_path = tmp_path / "m.json"
        data.ingest(png_corpus, side=32, fractions=(0.8, 0.1, 0.1), seed=0).save(manifest_path)
        config = training.TrainConfig(
            batch_size=2, image_side=32, depth=2, base_channels=8,
            disc_base_channels=16, steps=1, seed=3,
            checkpoint_interval=0, eval_interval=0)
        config_path = tmp_path / "train.cfg"
        config_path.write_text(config.to_kv_text())
        out_dir = tmp_path / "run"
        code = cli.main(["train", "--config", str(config_path), "--manifest",
                         str(manifest_path), "--out-dir", str(out_dir)])
        assert code == 0
        records = [json.loads(line) for line in
                   (out_dir / "metrics.jsonl").read_text().splitlines()]
        assert len(records) == 1
        final = out_dir / "final.pt"
        assert final.exists()
        capsys.readouterr()

        resume_dir = tmp_path / "resumed"
        code = cli.main(["train", "--resume", str(final), "--manifest",
                         str(manifest_path), "--steps", "2",
                         "--out-dir", str(resume_dir)])
        assert code == 0
        resumed = [json.loads(line) for line in
                   (resume_dir / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in resumed] == [1]

    def test_embed_extract_round_trip(self, png_corpus, tmp_path, tiny_checkpoint, capsys):
        images = sorted(png_corpus.glob("*.png"))
        out_dir = tmp_path / "embed"
        code = cli.main(["embed", "--checkpoint", tiny_checkpoint,
                         "--cover", str(images[0]), str(images[1]),
                         "--out-dir", str(out_dir)])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert (out_dir / "marked.png").exists()
        assert (out_dir / "residual.png").exists()
        assert (out_dir / "residual_raw.npy").exists()
        assert payload["psnr_marked_vs_cover"] > 15.0

        extract_dir = tmp_path / "extract"
        code = cli.main(["extract", "--checkpoint", tiny_checkpoint,
                         "--image", str(out_dir / "marked.png"),
                         "--out-dir", str(extract_dir)])
        assert code == 0
        assert (extract_dir / "secret_1.png").exists()
        assert (extract_dir / "recovered_cover.png").exists()
        assert (extract_dir / "extracted_residual.png").exists()

    def test_embed_wrong_secret_count_exit_2(self, png_corpus, tmp_path,
                                             tiny_checkpoint, capsys):
        images = sorted(png_corpus.glob("*.png"))
        code = cli.main(["embed", "--checkpoint", tiny_checkpoint,
                         "--cover", str(images[0]), str(images[1]), str(images[2]),
                         "--out-dir", str(tmp_path / "e")])
        assert code == 2
        assert "n=1" in capsys.readouterr().err

    def test_extract_n3_produces_three_secrets(self, png_corpus, tmp_path, capsys):
        spec = networks.NetworkSpec(depth=2, base_channels=8)
        bundle = networks.build_bundle(n=3, seed=44, spec=spec, disc_base_channels=16)
        ckpt = str(tmp_path / "n3.pt")
        networks.save_checkpoint(ckpt, bundle, step=0, extra={"image_side": 32})
        src = sorted(png_corpus.glob("*.png"))[0]
        out_dir = tmp_path / "x3"
        code = cli.main(["extract", "--checkpoint", ckpt, "--image", str(src),
                         "--out-dir", str(out_dir)])
        assert code == 0
        assert {p.name for p in out_dir.glob("secret_*.png")} == \
            {"secret_1.png", "secret_2.png", "secret_3.png"}

    def test_extract_deterministic(self, png_corpus, tmp_path, tiny_checkpoint, capsys):
        src = sorted(png_corpus.glob("*.png"))[0]
        digests = []
        for tag in ("a", "b"):
            out_dir = tmp_path / tag
            assert cli.main(["extract", "--checkpoint", tiny_checkpoint,
                             "--image", str(src), "--out-dir", str(out_dir)]) == 0
            digests.append(_sha256(out_dir / "secret_1.png"))
        assert digests[0] == digests[1]

    def test_eval_command(self, png_corpus, tmp_path, tiny_checkpoint, capsys):
        manifest_path = tmp_path / "m.json"
        data.ingest(png_corpus, side=32, fractions=(0.4, 0.3, 0.3), seed=0).save(manifest_path)
        out_dir = tmp_path / "eval"
        code = cli.main(["eval", "--checkpoint", tiny_checkpoint,
                         "--manifest", str(manifest_path),
                         "--attacks", "none/real-jpeg:90", "--count", "1",
                         "--seed", "0", "--out-dir", str(out_dir)])
        assert code == 0
        battery = json.loads((out_dir / "battery.json").read_text())
        assert battery["provenance"] == "real"
        assert {row["attack"] for row in battery["rows"]} == {"none", "real-jpeg"}
        text = (out_dir / "battery.txt").read_text()
        assert "embedding (marked)" in text

    def test_eval_count_zero_exit_2(self, tmp_path, tiny_checkpoint):
        code = cli.main(["eval", "--checkpoint", tiny_checkpoint,
                         "--manifest", str(tmp_path / "m.json"), "--count", "0"])
        assert code == 2

    def test_gradcheck_command(self, capsys):
        code = cli.main(["gradcheck", "--op", "blur", "--trials", "20", "--seed", "0"])
        assert code == 0
        out = capsys.readouterr().out
        assert "blur" in out and "pass" in out

    def test_usage_error_exit_2(self):
        assert cli.main(["no-such-command"]) == 2
