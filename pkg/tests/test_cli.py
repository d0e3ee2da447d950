import json
import subprocess
import sys

import numpy as np
import pytest

from recistseg.cli import main
from recistseg.volume_io import read_lesion_list, read_mask, read_volume


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ph")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"dims": [56, 56, 20], "size_mm": [8, 11]}))
    assert main(["phantom", "--n", "4", "--seed", "3", "--config", str(cfg), "--out", str(root / "ph")]) == 0
    return root / "ph"


def files_under(path):
    return {p for p in path.rglob("*")}


def test_no_arguments_prints_usage(capsys):
    code, out, err = run(capsys)
    assert code == 1 and "usage" in err.lower()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "recistseg"], capture_output=True, text=True)
    assert r.returncode == 1 and "usage" in r.stderr.lower() and r.stdout == ""


def test_usage_errors(capsys):
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "trimap", "--volume", "x")[0] == 1  # missing --out
    assert run(capsys, "segment2d", "--conn", "6", "--out", "x")[0] == 1


def test_bad_header_is_data_error(capsys, data, tmp_path):
    head = json.loads((data / "L000.vol.json").read_text())
    head["dims"] = [d + 1 for d in head["dims"]]
    bad = tmp_path / "bad.vol.json"
    bad.write_text(json.dumps(head))
    (tmp_path / "L000.raw").write_bytes((data / "L000.raw").read_bytes())
    code, out, err = run(capsys, "enhance", "--volume", str(bad), "--out", str(tmp_path / "e.vol.json"))
    assert code == 2 and "size mismatch" in err and out == ""


def test_missing_file_is_data_error(capsys, tmp_path):
    code, _, err = run(capsys, "enhance", "--volume", str(tmp_path / "none.vol.json"), "--out", str(tmp_path / "o"))
    assert code == 2 and err.startswith("error:")


def test_phantom_outputs(data):
    recs = read_lesion_list(data / "lesions.json")
    assert len(recs) == 4 and (data / "annotations.recist.json").exists()
    les = recs[0].load()
    assert les.mask is not None and les.mask.data.shape == les.volume.data.shape


def lesion_args(data, i=0):
    return ["--volume", str(data / f"L00{i}.vol.json"), "--annotations", str(data / "annotations.recist.json"),
            "--index", str(i), "--mask", str(data / f"L00{i}.mask.vol.json")]


def test_trimap_and_segment2d(capsys, data, tmp_path):
    before = files_under(data)
    code, out, _ = run(capsys, "trimap", *lesion_args(data), "--out", str(tmp_path / "t.vol.json"))
    assert code == 0
    raster = read_volume(tmp_path / "t.vol.json").data
    assert set(np.unique(raster)) <= {0, 1, 2, 3, 255}
    assert json.loads(out)["counts"]
    code, out, _ = run(capsys, "segment2d", *lesion_args(data, 1), "--out", str(tmp_path / "s.vol.json"))
    rep = json.loads(out)
    assert code == 0 and rep["dice_slice"] >= 0.85
    e = [h["total"] for h in rep["energy"]]
    assert all(b <= a + 1e-6 * abs(a) for a, b in zip(e, e[1:]))
    assert read_mask(tmp_path / "s.vol.json").data.sum() == rep["foreground_px"]
    assert files_under(data) == before


def test_segment3d_train_and_model_trimap(capsys, data, tmp_path):
    lst = str(data / "lesions.json")
    code, out, _ = run(capsys, "segment3d", "--lesions", lst, "--method", "grabcut-3de", "--out", str(tmp_path / "g"))
    assert code == 0 and all(r["dice"] > 0.6 for r in json.loads(out)["lesions"])
    code, out, _ = run(capsys, "train-appearance", "--lesions", lst, "--epochs", "5", "--out", str(tmp_path / "m.json"))
    assert code == 0
    code, out, _ = run(capsys, "segment3d", "--lesions", lst, "--model", str(tmp_path / "m.json"),
                       "--out", str(tmp_path / "sp"))
    assert code == 0 and (tmp_path / "sp" / "L003.mask.vol.json").exists()
    assert not (tmp_path / "sp" / "harvest.csv").exists()
    code, _, _ = run(capsys, "segment3d", "--lesions", lst, "--k", "1", "--epochs", "3", "--out", str(tmp_path / "tr"))
    assert code == 0 and (tmp_path / "tr" / "harvest.csv").exists() and (tmp_path / "tr" / "model.json").exists()
    code, _, _ = run(capsys, "trimap", *lesion_args(data, 2), "--model", str(tmp_path / "m.json"),
                     "--out", str(tmp_path / "mt.vol.json"))
    assert code == 0


def test_estimate_recist(capsys, data, tmp_path):
    ann = str(data / "annotations.recist.json")
    code, out, _ = run(capsys, "estimate-recist", "--annotations", ann, "--spacing", "1", "1", "2",
                       "--offsets", "3", "--out", str(tmp_path / "r.json"))
    doc = json.loads((tmp_path / "r.json").read_text())
    assert code == 0 and [r["tau"] for r in doc["offsets"]] == [-3, -2, -1, 0, 1, 2, 3]
    lens = [r["long_mm"] for r in doc["offsets"]]
    assert lens[3] == max(lens)
    assert run(capsys, "estimate-recist", "--annotations", ann, "--out", str(tmp_path / "x.json"))[0] == 1
    assert run(capsys, "estimate-recist", "--annotations", ann, "--index", "9", "--spacing", "1", "1", "1",
               "--out", str(tmp_path / "x.json"))[0] == 2


def test_evaluate(capsys, data, tmp_path):
    gt = [str(data / f"L00{i}.mask.vol.json") for i in range(2)]
    code, out, _ = run(capsys, "evaluate", "--pred", *gt, "--gt", *gt, "--out", str(tmp_path / "ev"))
    agg = json.loads(out)
    assert code == 0 and agg["dice"]["mean"] == 1.0 and agg["avd_mm"]["mean"] == 0.0
    assert len((tmp_path / "ev" / "evaluation.csv").read_text().splitlines()) == 3
    assert run(capsys, "evaluate", "--pred", gt[0], "--gt", *gt, "--out", str(tmp_path / "e2"))[0] == 1
    code, _, err = run(capsys, "evaluate", "--pred", gt[0], "--gt", str(data / "L000.vol.json"),
                       "--out", str(tmp_path / "e3"))
    assert code == 2


def test_degrade_and_enhance(capsys, data, tmp_path):
    vol = str(data / "L000.vol.json")
    code, _, _ = run(capsys, "degrade", "--image", vol, "--mode", "denoise", "--n", "2", "--noise-sigma", "10",
                     "--out", str(tmp_path / "d"))
    assert code == 0
    x = read_volume(tmp_path / "d" / "pair001_input.vol.json").data
    assert x.shape == (1, 32, 32) and x.dtype == np.float32
    assert (tmp_path / "d" / "pairs.csv").read_text().count("\n") == 3
    # 56 px slices cannot hold a 128 px crop
    code, _, err = run(capsys, "degrade", "--image", vol, "--mode", "enhance", "--out", str(tmp_path / "d2"))
    assert code == 2 and "smaller" in err
    code, _, _ = run(capsys, "enhance", "--volume", vol, "--out", str(tmp_path / "e.vol.json"))
    e = read_volume(tmp_path / "e.vol.json")
    assert code == 0 and e.channels == 3 and e.dims == (56, 56, 20)


def test_split(capsys, data, tmp_path):
    code, out, _ = run(capsys, "split", "--lesions", str(data / "lesions.json"), "--k", "2",
                       "--out", str(tmp_path / "f.json"))
    recs = json.loads((tmp_path / "f.json").read_text())
    assert code == 0 and sorted({r["fold"] for r in recs}) == [0, 1]
    assert json.loads(out)["fold_sizes"] == [2, 2]
    assert run(capsys, "split", "--lesions", str(data / "lesions.json"), "--k", "5",
               "--out", str(tmp_path / "g.json"))[0] == 2


def test_experiment_seed_and_isolation(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"phantom": {"dims": [56, 56, 20], "size_mm": [8, 11]}, "seed": 4}))
    before = files_under(tmp_path)
    code, out, _ = run(capsys, "experiment", "trimap-modes", "--config", str(cfg), "--n", "2", "--out", "a")
    assert code == 0 and json.loads(out)["seed"] == 4
    code, out, _ = run(capsys, "experiment", "trimap-modes", "--config", str(cfg), "--n", "2", "--seed", "7",
                       "--out", "b")
    assert json.loads(out)["seed"] == 7
    new = files_under(tmp_path) - before
    assert all(p.relative_to(tmp_path).parts[0] in ("a", "b") for p in new)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert run(capsys, "experiment", "offset", "--config", str(bad), "--out", "c")[0] == 1
