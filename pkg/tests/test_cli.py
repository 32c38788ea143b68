import hashlib
import json
import textwrap

import pytest

from rorkit.cli import main

ARCH = """\
groups = 1,1,1,1
widths = 4,8,8,16
input = 3,8,8
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--classes", "4", "--per-class", "8", "--size", "8",
                 "--out", str(root), "--name", "d"]) == 0
    return root / "d" / "manifest.csv"


def train_cfg(path, manifest, lr=0.05):
    path.write_text(f"[arch]\n{ARCH}\n" + textwrap.dedent(f"""\
        [stage:gender]
        manifest = {manifest}
        task = gender
        head = 2
        lr = {lr}
        decay_epochs =
        max_epochs = 1
        batch_size = 8

        [stage:age]
        manifest = {manifest}
        folds = 2
        head = 4
        init = from
        lr = 0.001
        decay_epochs =
        max_epochs = 1
        batch_size = 8
        """))
    return path


def test_synth_writes_manifest_and_run_manifest(data):
    rm = json.loads((data.parent.parent / "run_manifest.json").read_text())
    assert rm["command"] == "synth" and rm["status"] == "ok"
    assert "d/manifest.csv" in rm["artifacts"]
    assert data.read_text().startswith("image_path,age_group,gender,subject_id")


def test_inspect(tmp_path, capsys):
    spec = tmp_path / "a.cfg"
    spec.write_text("preset = basic-82\n")
    assert main(["inspect", str(spec), "--out", str(tmp_path / "o")]) == 0
    cap = capsys.readouterr()
    assert "depth 74" in cap.out and "82" in cap.err
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["depth"] == 74 and report["census"]["total"]["A"] == 3
    assert (tmp_path / "o" / "graph.dot").read_text().startswith("digraph")
    rm = json.loads((tmp_path / "o" / "run_manifest.json").read_text())
    assert set(rm["artifacts"]) == {"graph.json", "graph.dot", "report.json"}
    assert list(rm["inputs"].values()) == [sha(spec)]


def test_train_eval_and_determinism(tmp_path, data, capsys):
    before = sha(data)
    cfg = train_cfg(tmp_path / "run.cfg", data)
    outs = [tmp_path / "o1", tmp_path / "o2"]
    for out in outs:
        assert main(["--seed", "3", "train", str(cfg), "--out", str(out)]) == 0
    m1, m2 = (json.loads((o / "metrics.json").read_text()) for o in outs)
    assert m1 == m2
    h = m1["handoffs"][0]
    assert h["stage"] == "age" and h["body_before"] == h["body_after"]
    assert m1["stages"][0]["body_checksum"] == h["body_before"]
    assert m1["stages"][0]["train"]["one_off"] is None
    r1, r2 = (json.loads((o / "run_manifest.json").read_text()) for o in outs)
    assert r1["artifacts"] == r2["artifacts"]
    assert r1["seeds"]["stage:age"] == 3
    assert sha(data) == before
    assert (outs[0] / "logs" / "gender.csv").exists()

    ck = outs[0] / "checkpoints" / "age" / "last"
    assert main(["eval", str(ck), "--manifest", str(data), "--out", str(tmp_path / "e")]) == 0
    ev = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert 0 <= ev["exact"] <= 1 and ev["n"] == len(data.read_text().splitlines()) - 1
    assert main(["eval", str(ck), "--manifest", str(data), "--folds", "2",
                 "--out", str(tmp_path / "f")]) == 0
    ef = json.loads((tmp_path / "f" / "metrics.json").read_text())
    assert len(ef["folds"]) == 2 and "±" in ef["exact"]["formatted"]
    assert main(["eval", str(ck), str(ck), "--manifest", str(data), "--out", str(tmp_path / "g")]) == 1

    assert main(["plot", str(outs[0] / "logs" / "age.csv"), str(outs[1] / "logs" / "age.csv"),
                 "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "curves.svg").exists()


def test_train_divergence_exits_2(tmp_path, data, capsys):
    cfg = train_cfg(tmp_path / "run.cfg", data, lr=1e12)
    with pytest.warns(RuntimeWarning):
        code = main(["train", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "diverged" in capsys.readouterr().err
    rm = json.loads((tmp_path / "o" / "run_manifest.json").read_text())
    assert rm["status"] == "failed"
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["stages"][0]["status"] == "diverged"


def test_curve(tmp_path, data, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"[arch]\n{ARCH}\n[curve]\nmanifest = {data}\nfolds = 2\nlr = 0.05\n"
                   "decay_epochs =\nmax_epochs = 1\nbatch_size = 8\n")
    assert main(["curve", str(cfg), "--out", str(tmp_path / "o")]) == 0
    w = json.loads((tmp_path / "o" / "weights.json").read_text())
    assert len(w["weights"]) == 4 and len(w["points"]) == 3 and not w["partial"]
    assert (tmp_path / "o" / "curve.csv").read_text().startswith("k,accuracy")
    assert (tmp_path / "o" / "curve.svg").exists()


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["inspect"],
    ["inspect", "/nonexistent/spec.cfg"],
    ["eval", "/nonexistent", "--manifest", "/nonexistent.csv"],
    ["synth", "--overlap", "x:y"],
    ["--threads", "0", "synth"],
])
def test_usage_errors_exit_1(tmp_path, argv):
    try:
        code = main(argv + ["--out", str(tmp_path / "o")])
    except SystemExit as e:  # argparse rejects before any command runs
        code = e.code
    assert code == 1


def test_bad_arch_names_field(tmp_path, capsys):
    spec = tmp_path / "a.cfg"
    spec.write_text("groups = 1,0,1,1\n")
    assert main(["inspect", str(spec), "--out", str(tmp_path / "o")]) == 1
    assert "arch.groups" in capsys.readouterr().err


def test_label_mismatch_exits_1(tmp_path, data):
    cfg = tmp_path / "r.cfg"
    cfg.write_text(f"[arch]\n{ARCH}\n[stage:a]\nmanifest = {data}\nhead = 2\nmax_epochs = 1\n"
                   "decay_epochs =\n")
    assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == 1
