import hashlib
import subprocess
import sys
import time

import numpy as np
import pytest

from hvcp import autodiff as ad
from hvcp import cli, shapes
from hvcp.encoder import write_xyz
from hvcp.gradcheck import MICRO
from hvcp.meshing import load_obj
from hvcp.metrics import read_report
from hvcp.model import Model
from hvcp.train import read_log, save_checkpoint

MANIFEST = "seed=5\nweights=sphere:0.5,box:0.5\ntrain=4\nval=1\ntest=2\npartial_mode=bottom\ndense_points=8192\n"


def micro_config(**changes):
    # a 100-iteration micro model is still blurry, so extract at a lower iso level
    cfg = MICRO.replace(iterations=100, warmup=50, lr=1e-2, queries=1024, checkpoint_every=50, extract_side=24,
                        iso=0.35, samples=3, completion_points=512, iou_samples=20000, nc_samples=2000)
    return cfg.replace(**changes)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "manifest.txt").write_text(MANIFEST)
    assert cli.main(["make-data", "--manifest", str(root / "manifest.txt"), "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def run(data):
    micro_config().save(data / "micro.txt")
    code = cli.main(["train", "--config", str(data / "micro.txt"), "--data", str(data / "data"),
                     "--out", str(data / "run")])
    assert code == 0
    return data / "run"


@pytest.fixture(scope="module")
def partial_file(data):
    item = shapes.load_split(data / "data", "test")[0]
    write_xyz(item.partial, data / "partial.xyz")
    write_xyz(item.complete, data / "complete.xyz")
    return data / "partial.xyz"


# make-data


def test_make_data_counts(data, capsys):
    for split, n in (("train", 4), ("val", 1), ("test", 2)):
        assert len(list((data / "data" / split).glob("*.hvsd"))) == n


def test_make_data_deterministic(data, tmp_path):
    assert cli.main(["make-data", "--manifest", str(data / "manifest.txt"), "--out", str(tmp_path / "again")]) == 0
    for f in sorted((data / "data").rglob("*.hvsd")):
        rel = f.relative_to(data / "data")
        assert f.read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_make_data_bad_weights(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("weights=sphere:0.3,box:0.3\n")
    assert cli.main(["make-data", "--manifest", str(tmp_path / "m.txt"), "--out", str(tmp_path / "d")]) == 2
    assert "sum to 1" in capsys.readouterr().err


def test_make_data_missing_manifest(tmp_path):
    assert cli.main(["make-data", "--manifest", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "d")]) == 3


# train


def test_train_logs_every_iteration(run):
    rows = read_log(run / "log.csv")
    assert len(rows) == 100 and rows[-1]["iter"] == 100
    assert (run / "checkpoint.hvcp").exists()


def test_resume_is_exact(data, run, tmp_path):
    short = micro_config(iterations=60)
    short.save(tmp_path / "short.txt")
    assert cli.main(["train", "--config", str(tmp_path / "short.txt"), "--data", str(data / "data"),
                     "--out", str(tmp_path / "r")]) == 0
    # extend the stored run to the full length and continue
    from hvcp.train import load_checkpoint
    ck = load_checkpoint(tmp_path / "r" / "checkpoint.hvcp")
    save_checkpoint(ck.params, micro_config(), tmp_path / "r" / "checkpoint.hvcp", iteration=ck.iteration)
    assert cli.main(["train", "--resume", "--data", str(data / "data"), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "log.csv").read_bytes() == (run / "log.csv").read_bytes()


def test_resume_without_checkpoint(data, tmp_path):
    assert cli.main(["train", "--resume", "--data", str(data / "data"), "--out", str(tmp_path / "none")]) == 3


@pytest.mark.parametrize("variant", ["global", "hierarchical", "local", "global-factors"])
def test_variants_train(data, tmp_path, variant):
    micro_config(variant=variant, iterations=5, warmup=5, checkpoint_every=5).save(tmp_path / "c.txt")
    assert cli.main(["train", "--config", str(tmp_path / "c.txt"), "--data", str(data / "data"),
                     "--out", str(tmp_path / variant)]) == 0
    assert len(read_log(tmp_path / variant / "log.csv")) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_non_finite_exit(data, tmp_path):
    model = Model.create(micro_config())
    name = next(n for n in model.params.params if n.startswith("dec.out"))
    model.params.set(name, np.full(model.params[name].shape, np.inf))
    (tmp_path / "r").mkdir()
    save_checkpoint(model.params, model.config, tmp_path / "r" / "checkpoint.hvcp", iteration=3)
    assert cli.main(["train", "--resume", "--data", str(data / "data"), "--out", str(tmp_path / "r")]) == 4


def test_train_bad_config(data, tmp_path):
    (tmp_path / "c.txt").write_text("not_a_key=1\n")
    assert cli.main(["train", "--config", str(tmp_path / "c.txt"), "--data", str(data / "data"),
                     "--out", str(tmp_path / "x")]) == 2


# complete


def complete(run, partial, out, seed=0, k=3):
    return cli.main(["complete", "--checkpoint", str(run / "checkpoint.hvcp"), "--input", str(partial),
                     "--samples", str(k), "--seed", str(seed), "--out-dir", str(out)])


@pytest.fixture(scope="module")
def completions(run, partial_file, tmp_path_factory):
    root = tmp_path_factory.mktemp("complete")
    for name, seed in (("a", 0), ("b", 0), ("c", 100)):
        assert complete(run, partial_file, root / name, seed) == 0
    return root


def test_complete_writes_k_meshes(completions):
    files = sorted(p.name for p in (completions / "a").glob("*.obj"))
    assert files == ["sample_000.obj", "sample_001.obj", "sample_002.obj"]
    lines = (completions / "a" / "uhd.csv").read_text().splitlines()
    assert lines[0] == "sample,seed,uhd" and len(lines) == 4
    assert [ln.split(",")[1] for ln in lines[1:]] == ["0", "1", "2"]
    assert all(float(ln.split(",")[2]) >= 0 for ln in lines[1:])
    assert not load_obj(completions / "a" / "sample_000.obj").is_empty


def test_complete_ten_samples(run, partial_file, tmp_path):
    assert complete(run, partial_file, tmp_path, seed=3, k=10) == 0
    assert len(list(tmp_path.glob("sample_*.obj"))) == 10


def test_complete_same_seed_identical(completions):
    for f in sorted((completions / "a").iterdir()):
        assert f.read_bytes() == (completions / "b" / f.name).read_bytes()


def test_complete_different_seeds_differ(completions):
    a = {digest(p) for p in (completions / "a").glob("*.obj")}
    c = {digest(p) for p in (completions / "c").glob("*.obj")}
    assert len(a) == 3 and a.isdisjoint(c)


def test_complete_missing_input(run, tmp_path):
    assert complete(run, tmp_path / "missing.xyz", tmp_path / "o") == 3


def test_complete_empty_extraction(run, partial_file, tmp_path, monkeypatch):
    monkeypatch.setattr(Model, "grid", lambda self, comp, side=None: np.zeros((8, 8, 8)))
    assert complete(run, partial_file, tmp_path / "o") == 5


# reconstruct


def test_reconstruct_deterministic(run, data, partial_file, tmp_path):
    args = ["reconstruct", "--checkpoint", str(run / "checkpoint.hvcp"), "--input", str(data / "complete.xyz")]
    assert cli.main(args + ["--out", str(tmp_path / "a.obj")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.obj")]) == 0
    assert (tmp_path / "a.obj").read_bytes() == (tmp_path / "b.obj").read_bytes()


def test_reconstruct_without_posterior(run, data, partial_file, tmp_path, capsys):
    from hvcp.train import load_checkpoint
    ck = load_checkpoint(run / "checkpoint.hvcp")
    save_checkpoint(ck.params, ck.config, tmp_path / "prior.hvcp", include_posterior=False)
    code = cli.main(["reconstruct", "--checkpoint", str(tmp_path / "prior.hvcp"), "--input",
                     str(data / "complete.xyz"), "--out", str(tmp_path / "x.obj")])
    assert code == 6
    assert "posterior" in capsys.readouterr().err


def test_bad_checkpoint(partial_file, tmp_path):
    (tmp_path / "bad.hvcp").write_bytes(b"nonsense")
    code = cli.main(["reconstruct", "--checkpoint", str(tmp_path / "bad.hvcp"), "--input", str(partial_file),
                     "--out", str(tmp_path / "x.obj")])
    assert code == 3


# eval


def evaluate(run, data, out, mode="bottom", seed=0):
    return cli.main(["eval", "--checkpoint", str(run / "checkpoint.hvcp"), "--data", str(data / "data"),
                     "--mode", mode, "--samples", "3", "--seed", str(seed), "--out", str(out)])


def test_eval_report(run, data, tmp_path):
    assert evaluate(run, data, tmp_path / "a.csv") == 0
    rows = read_report(tmp_path / "a.csv")
    assert len(rows) == 2 + 1 and rows[-1]["item"] == "mean"
    assert all(float(r["tmd"]) >= 0 and float(r["uhd"]) >= 0 for r in rows)
    assert evaluate(run, data, tmp_path / "b.csv") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_eval_octant_mode_differs(run, data, tmp_path):
    assert evaluate(run, data, tmp_path / "b.csv", "bottom") == 0
    assert evaluate(run, data, tmp_path / "o.csv", "octant") == 0
    assert (tmp_path / "b.csv").read_bytes() != (tmp_path / "o.csv").read_bytes()


def test_eval_split_directory(run, data, tmp_path):
    code = cli.main(["eval", "--checkpoint", str(run / "checkpoint.hvcp"), "--data", str(data / "data" / "val"),
                     "--samples", "2", "--out", str(tmp_path / "v.csv")])
    assert code == 0 and len(read_report(tmp_path / "v.csv")) == 2


def test_eval_autoencoding_columns(run, tmp_path):
    m = shapes.DatasetManifest(seed=2, weights={"sphere": 1.0}, train=1, val=1, test=1, partial_mode="full",
                               partial_points=1500)
    shapes.make_dataset(m, tmp_path / "ae")
    code = cli.main(["eval", "--checkpoint", str(run / "checkpoint.hvcp"), "--data", str(tmp_path / "ae"),
                     "--samples", "2", "--out", str(tmp_path / "r.csv")])
    assert code == 0
    row = read_report(tmp_path / "r.csv")[0]
    for col in ("iou", "normal_consistency", "f_score"):
        assert 0.0 <= float(row[col]) <= 1.0
    assert float(row["chamfer_l1"]) >= 0.0


# gradcheck


def test_gradcheck_passes_quickly(capsys):
    t0 = time.perf_counter()
    assert cli.main(["gradcheck", "--scale", "micro"]) == 0
    assert time.perf_counter() - t0 < 60
    out = capsys.readouterr().out
    for comp in ("encoder", "cpfield", "hvae", "decoder", "elbo"):
        assert comp in out


def test_gradcheck_detects_corrupt_backward(monkeypatch, capsys):
    make = ad._make

    def corrupt(kind, data, inputs, backward):
        if kind == "exp":
            return make(kind, data, inputs, lambda g: tuple(1.5 * x for x in backward(g)))
        return make(kind, data, inputs, backward)

    monkeypatch.setattr(ad, "_make", corrupt)
    assert cli.main(["gradcheck", "--scale", "micro"]) == 7
    err = capsys.readouterr().err
    assert "hvae" in err and "elbo" in err


# help and entry point


@pytest.mark.parametrize("sub", [[], ["train"], ["complete"], ["eval"], ["gradcheck"]])
def test_help_lists_exit_codes(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(sub + ["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for code in range(2, 8):
        assert f"  {code}  " in out
    assert "HVCP_THREADS" in out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hvcp.cli", "--help"], capture_output=True, text=True,
                          env={"HVCP_THREADS": "1", "PATH": ""})
    assert proc.returncode == 0 and "exit codes" in proc.stdout
