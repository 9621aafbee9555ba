import json
import struct

import numpy as np
import pytest

from msdistill import fmat
from msdistill import similarity as sim
from msdistill.cli import run
from msdistill.config import PipelineConfig

TINY = {
    "schema_version": 1,
    "seed": 1,
    "targets": {"count": 2, "n_clusters": 4, "n_classes": 2},
    "sources": {"overlaps": [0, 0.5, 1.0], "epochs": 5, "n_train": 200},
    "data": {"n_total": 150, "n_test": 200},
    "training": {"epochs": 3},
}
SCHEMES = "nearest,equal,weighted:p=12,inverse,random"


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def tiny_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(["pipeline", "--config", str(tiny_config), "--schemes", SCHEMES, "--out", str(out)]) == 0
    return out


def bundle(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


REPORTS = [
    "fig1_scheme_comparison.csv",
    "fig3_scores_vs_accuracy.csv",
    "results.csv",
    "table2_correlations.csv",
    "table3_topk_relative_accuracy.csv",
    "table8_mean_relative_accuracy.csv",
    "manifest.json",
]


def test_pipeline_emits_reports(tiny_run):
    for name in REPORTS:
        assert (tiny_run / "report" / name).exists(), name


def test_five_rows_per_task(tiny_run):
    lines = (tiny_run / "report" / "results.csv").read_text().splitlines()[1:]
    per_task = {}
    for line in lines:
        per_task.setdefault(line.split(",")[0], []).append(line.split(",")[1])
    assert per_task == {t: ["nearest", "equal", "power:12", "inverse", "random_simplex"] for t in ("t0", "t1")}


def test_every_stage_has_manifest(tiny_run):
    cfg_hash = None
    for d in ("gen", "sources", "scores", "weights", "distill", "report"):
        m = json.loads((tiny_run / d / "manifest.json").read_text())
        assert m["seed"] == 1
        cfg_hash = cfg_hash or m["config_hash"]
        assert m["config_hash"] == cfg_hash
        for rel, digest in m["outputs"].items():
            assert fmat.file_digest(tiny_run / d / rel) == digest


def test_rerun_is_byte_identical(tiny_run, tiny_config, tmp_path):
    assert run(["pipeline", "--config", str(tiny_config), "--schemes", SCHEMES, "--out", str(tmp_path)]) == 0
    assert bundle(tmp_path) == bundle(tiny_run)


def test_stagewise_equals_pipeline(tiny_run, tiny_config, tmp_path):
    for stage in ("gen", "train-sources", "score", "weigh", "distill", "eval"):
        assert run([stage, "--config", str(tiny_config), "--schemes", SCHEMES, "--out", str(tmp_path)]) == 0
    assert bundle(tmp_path) == bundle(tiny_run)


def test_stage_rerun_identical(tiny_run, tiny_config, tmp_path):
    import shutil

    shutil.copytree(tiny_run, tmp_path / "r")
    before = bundle(tmp_path / "r")
    assert run(["weigh", "--config", str(tiny_config), "--schemes", SCHEMES, "--out", str(tmp_path / "r")]) == 0
    assert bundle(tmp_path / "r") == before


def test_missing_prerequisite(tmp_path, capsys):
    assert run(["score", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "[score]" in err and "stage 'gen'" in err and "msdistill gen" in err


def test_missing_distill_names_weigh(tiny_run, tmp_path, capsys):
    import shutil

    shutil.copytree(tiny_run, tmp_path / "r")
    shutil.rmtree(tmp_path / "r" / "weights")
    assert run(["distill", "--out", str(tmp_path / "r")]) == 1
    assert "stage 'weigh'" in capsys.readouterr().err


def test_bad_config(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"nope": 1}')
    assert run(["gen", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "[gen] config error" in capsys.readouterr().err


def test_flags_override_config(tiny_config):
    from msdistill.cli import build_parser, resolve_config

    args = build_parser().parse_args(
        ["weigh", "--config", str(tiny_config), "--seed", "9", "--metric", "rsa", "--repr", "pseudo", "--scheme", "softmax",
         "--temp", "0.5", "--lambda", "0.6", "--labeled-fraction", "0.3", "--p", "4"]
    )
    cfg = resolve_config(args)
    assert (cfg.seed, cfg.metric, cfg.representation, cfg.schemes) == (9, "rsa", "pseudo", ["softmax"])
    assert (cfg.temperature, cfg.lam, cfg.data.labeled_fraction, cfg.p) == (0.5, 0.6, 0.3, 4.0)
    assert cfg.data.n_total == 150


def write_raw_fmat(path, m):
    m = np.asarray(m, dtype=np.float32)
    path.write_bytes(b"FMAT" + struct.pack("<II", *m.shape) + m.astype("<f4").tobytes())


def test_score_external_features(tmp_path, rng):
    labels = np.array([0, 0, 1, 1, 2, 2, 0, 1])
    (tmp_path / "y.csv").write_text("index,label\n" + "".join(f"{i},{y}\n" for i, y in enumerate(labels)))
    mats = {"alpha": rng.standard_normal((8, 4)), "beta": rng.standard_normal((8, 2)) + np.eye(3)[labels][:, :2]}
    for name, m in mats.items():
        write_raw_fmat(tmp_path / f"{name}.fmat", m)
    out = tmp_path / "out"
    code = run(["score", "--features", str(tmp_path / "alpha.fmat"), str(tmp_path / "beta.fmat"),
                "--labels", str(tmp_path / "y.csv"), "--metric", "parc", "--out", str(out)])
    assert code == 0
    scores = sim.scores_from_csv((out / "scores.csv").read_text())
    assert [s.source_id for s in scores] == ["alpha", "beta"]
    probe = sim.ProbeSet.from_labels(None, labels)
    for s in scores:
        m32 = mats[s.source_id].astype(np.float32).astype(np.float64)
        expected = sim.parc(sim.SourceRepresentation("feature", m32), probe, source_id=s.source_id)
        assert s.value == expected.value
    assert json.loads((out / "manifest.json").read_text())["stage"] == "score"


def test_score_external_row_mismatch(tmp_path, capsys):
    (tmp_path / "y.csv").write_text("index,label\n0,0\n1,1\n2,0\n")
    write_raw_fmat(tmp_path / "a.fmat", np.ones((2, 2)))
    assert run(["score", "--features", str(tmp_path / "a.fmat"), "--labels", str(tmp_path / "y.csv"),
                "--out", str(tmp_path / "o")]) == 1
    assert "[score]" in capsys.readouterr().err


def test_weigh_external_p0_equal(tmp_path):
    scores = [sim.SimilarityScore(f"s{i}", "parc", "feature", v) for i, v in enumerate([0.1, 0.7, 0.3])]
    (tmp_path / "scores.csv").write_text(sim.scores_to_csv(scores))
    out = tmp_path / "w"
    assert run(["weigh", "--scores", str(tmp_path / "scores.csv"), "--scheme", "power", "--p", "0", "--out", str(out)]) == 0
    lines = (out / "weights.csv").read_text().splitlines()
    assert lines[0] == "source_id,alpha,scheme,param"
    assert [float(l.split(",")[1]) for l in lines[1:]] == [1 / 3] * 3


def test_default_config_is_valid():
    assert PipelineConfig().schemes == ["nearest", "equal", "weighted:p=12", "inverse", "random"]
