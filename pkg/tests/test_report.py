import json

from resadapt.report import (file_digest, plot_budget, plot_curves, plot_regimes, read_csv,
                             write_csv, write_manifest)

ROWS = [(0, "train", 1.5, 0.4), (0, "val", 1.6, 0.35), (1, "train", 0.7, 0.8), (1, "val", 0.9, 0.7)]


def test_csv_round_trip(tmp_path):
    path = write_csv(tmp_path / "run.csv", ROWS)
    assert path.read_text().splitlines()[0] == "epoch,split,loss,accuracy"
    assert read_csv(path) == ROWS


def test_manifest_records_digests(tmp_path):
    (tmp_path / "in.bin").write_bytes(b"abc")
    write_manifest(tmp_path, "demo", {"seed": 3}, {"data": tmp_path / "in.bin"}, [tmp_path / "x.csv"])
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["config"] == {"seed": 3} and m["outputs"] == ["x.csv"]
    assert m["inputs"]["data"]["sha256"] == file_digest(tmp_path / "in.bin")


def test_directory_digest_tracks_contents(tmp_path):
    (tmp_path / "a").write_bytes(b"1")
    before = file_digest(tmp_path)
    (tmp_path / "a").write_bytes(b"2")
    assert file_digest(tmp_path) != before


def test_figures_are_png(tmp_path):
    paths = [plot_curves(ROWS, tmp_path / "c.png", "t"),
             plot_regimes({"head_only": {"a": 0.5}, "adapters_only": {"a": 0.9}}, tmp_path / "r.png"),
             plot_budget({"universal": 100, "domains": {"d": {"adapters": 10, "head": 5}}}, tmp_path / "b.png")]
    for p in paths:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
