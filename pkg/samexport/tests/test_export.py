import json

import numpy as np
import pytest
from PIL import Image

from samexport.cli import main
from samexport.export import ExportError, ExportJob, export_masks, segment_builtin

# the exporter's only contract with the stitcher is the manifest format;
# validate it through the stitcher's own loader
from meshstitch.masks import filter_small_masks, load_mask_manifest


def _sample_images(tmp_path):
    """Three simple scenes with clearly separated objects."""
    paths = []
    # 1: dark square on light background
    a = np.full((80, 100, 3), 220, dtype=np.uint8)
    a[20:60, 30:70] = 40
    # 2: two rectangles of different shades
    b = np.full((90, 90, 3), 200, dtype=np.uint8)
    b[10:40, 10:80] = 90
    b[55:85, 20:60] = 20
    # 3: gradient background with a bright disk
    xs, ys = np.meshgrid(np.arange(120), np.arange(80))
    c = np.stack([(xs * 255 / 119).astype(np.uint8)] * 3, axis=-1)
    disk = (xs - 60) ** 2 + (ys - 40) ** 2 < 20 ** 2
    c[disk] = 255
    for i, arr in enumerate((a, b, c)):
        p = tmp_path / f"scene_{i}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


def test_manifest_validates_against_core_loader(tmp_path):
    for i, img in enumerate(_sample_images(tmp_path)):
        out = tmp_path / f"out_{i}"
        manifest = export_masks(ExportJob(image=str(img), out_dir=str(out),
                                          backend="builtin"))
        ms = load_mask_manifest(manifest)
        assert len(ms) >= 1
        # sorted by descending area
        assert ms.areas == sorted(ms.areas, reverse=True)


def test_core_filtering_removes_nothing_more(tmp_path):
    fraction = 0.005
    for i, img in enumerate(_sample_images(tmp_path)):
        out = tmp_path / f"out_{i}"
        manifest = export_masks(ExportJob(image=str(img), out_dir=str(out),
                                          backend="builtin",
                                          min_area_fraction=fraction))
        ms = load_mask_manifest(manifest)
        refiltered = filter_small_masks(ms, fraction)
        assert len(refiltered) == len(ms)
        assert refiltered.areas == ms.areas


def test_min_area_fraction_one_empties_manifest(tmp_path):
    img = _sample_images(tmp_path)[0]
    out = tmp_path / "out"
    manifest = export_masks(ExportJob(image=str(img), out_dir=str(out),
                                      backend="builtin",
                                      min_area_fraction=1.0))
    doc = json.loads(manifest.read_text())
    assert doc["masks"] == []
    assert len(load_mask_manifest(manifest)) == 0


def test_deterministic_bytes(tmp_path):
    img = _sample_images(tmp_path)[1]
    blobs = []
    for run in range(2):
        out = tmp_path / f"run_{run}"
        manifest = export_masks(ExportJob(image=str(img), out_dir=str(out),
                                          backend="builtin"))
        files = {manifest.name: manifest.read_bytes()}
        for p in sorted(out.glob("mask_*.png")):
            files[p.name] = p.read_bytes()
        blobs.append(files)
    assert blobs[0] == blobs[1]


def test_builtin_covers_flat_image():
    flat = np.full((30, 40, 3), 128, dtype=np.uint8)
    segs = segment_builtin(flat)
    assert len(segs) == 1
    assert segs[0].all()


def test_missing_image_errors(tmp_path):
    with pytest.raises(ExportError, match="not found"):
        export_masks(ExportJob(image=str(tmp_path / "nope.png"),
                               out_dir=str(tmp_path / "o"), backend="builtin"))


def test_bad_backend_rejected(tmp_path):
    with pytest.raises(ExportError):
        export_masks(ExportJob(image="x.png", out_dir=str(tmp_path),
                               backend="magic"))


def test_sam_backend_without_dependency(tmp_path):
    img = _sample_images(tmp_path)[0]
    job = ExportJob(image=str(img), out_dir=str(tmp_path / "o"),
                    backend="sam", checkpoint=str(tmp_path / "w.pth"))
    with pytest.raises(ExportError):
        export_masks(job)


def test_cli_roundtrip(tmp_path, capsys):
    img = _sample_images(tmp_path)[0]
    out = tmp_path / "cli_out"
    code = main([str(img), "--out", str(out), "--backend", "builtin"])
    assert code == 0
    manifest = out / "manifest.json"
    assert manifest.exists()
    assert str(manifest) in capsys.readouterr().out
    ms = load_mask_manifest(manifest)
    assert len(ms) >= 1


def test_cli_error_exit(tmp_path, capsys):
    code = main([str(tmp_path / "missing.png"), "--out", str(tmp_path / "o"),
                 "--backend", "builtin"])
    assert code == 1
    assert "samexport:" in capsys.readouterr().err
