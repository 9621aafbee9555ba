"""Experiment stages over a run directory.

Each stage reads its inputs from disk, writes its outputs under its own
subdirectory and finishes with a ``manifest.json`` recording the config
hash, seed and SHA-256 digests of its inputs and outputs. A stage refuses
to run when a prerequisite stage has no manifest.

Layout::

    gen/       universe.json, tasks.json, data/<target>/*.fmat|*.csv
    sources/   sources.csv, <source id>/header.json + *.fmat
    scores/    <target>/<metric>_<representation>.csv
    weights/   <target>/<scheme label>.csv
    distill/   results.csv, <target>/<run>/history.csv + model/
    report/    fig1_*.csv, fig3_*.csv, table2_*.csv, table3_*.csv, table8_*.csv
"""
from __future__ import annotations

import csv
import io
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import fmat
from . import similarity as sim
from . import taskgen as tg
from . import weighting as wt
from .distill import DistillConfig, cache_pseudo_labels, train_baseline_supervised, train_target
from .evaluate import test_accuracy
from .model import TrainHyper
from .seeds import derive_seed

logger = logging.getLogger(__name__)

STAGES = ("gen", "train-sources", "score", "weigh", "distill", "eval")
STAGE_DIRS = {
    "gen": "gen",
    "train-sources": "sources",
    "score": "scores",
    "weigh": "weights",
    "distill": "distill",
    "eval": "report",
}
PREREQUISITES = {
    "gen": (),
    "train-sources": ("gen",),
    "score": ("gen", "train-sources"),
    "weigh": ("score",),
    "distill": ("gen", "train-sources", "weigh"),
    "eval": ("gen", "score", "distill"),
}
RANDOM_SELECTION = "random_selection_expected"
SUPERVISED = "supervised"


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(rows, header):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _read_csv(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


def _f(x):
    return repr(float(x))


def scheme_file(label):
    return label.replace(":", "_p")


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def stage_dir(self, stage):
        return self.root / STAGE_DIRS[stage]

    def require(self, stage):
        for pre in PREREQUISITES[stage]:
            if not (self.stage_dir(pre) / "manifest.json").exists():
                raise StageError(
                    stage,
                    f"missing prerequisite: stage '{pre}' has no completed output in {self.stage_dir(pre)}; "
                    f"run `msdistill {pre} --out {self.root}` first",
                )

    def fresh(self, stage):
        d = self.stage_dir(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    def finish(self, stage, cfg):
        inputs = {
            f"{STAGE_DIRS[pre]}/manifest.json": fmat.file_digest(self.stage_dir(pre) / "manifest.json")
            for pre in PREREQUISITES[stage]
        }
        write_manifest(self.stage_dir(stage), stage, cfg, inputs)

    def tasks(self):
        return json.loads((self.stage_dir("gen") / "tasks.json").read_text())

    def universe(self):
        return tg.Universe.from_dict(json.loads((self.stage_dir("gen") / "universe.json").read_text()))


def write_manifest(d, stage, cfg, inputs):
    """Record config, seed and digests of ``inputs`` and every file under ``d``."""
    d = Path(d)
    outputs = {
        p.relative_to(d).as_posix(): fmat.file_digest(p)
        for p in sorted(d.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    config = cfg.to_dict()
    config.pop("output_dir")
    manifest = {
        "stage": stage,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "config": config,
        "inputs": dict(sorted(inputs.items())),
        "outputs": outputs,
    }
    (d / "manifest.json").write_text(_json(manifest))


def _target_ids(tasks):
    return [t["id"] for t in tasks["targets"]]


def _target_entry(tasks, tid):
    return next(t for t in tasks["targets"] if t["id"] == tid)


# ---------------------------------------------------------------- gen


def _make_targets(cfg, universe):
    tc = cfg.targets
    if tc.specs is not None:
        return [tg.TaskSpec(tuple(tuple(cell) for cell in spec)) for spec in tc.specs]
    return [
        tg.make_target_task(universe, tc.n_clusters, tc.n_classes, seed=derive_seed(cfg.seed, "target", j))
        for j in range(tc.count)
    ]


def _make_sources(cfg, universe, target, j):
    sc = cfg.sources
    if sc.specs is not None:
        return [(None, tg.TaskSpec(tuple(tuple(cell) for cell in spec))) for spec in sc.specs]
    return [
        (o, tg.make_source_task(universe, target, o, seed=derive_seed(cfg.seed, "source-task", j, i), partition=sc.partition))
        for i, o in enumerate(sc.overlaps)
    ]


def _write_split(d, split):
    d.mkdir(parents=True)
    fmat.write_fmat(d / "labeled_x.fmat", split.labeled_x)
    fmat.write_labels(d / "labeled_y.csv", np.argmax(split.labeled_y, axis=1))
    if split.unlabeled_x is not None:
        fmat.write_fmat(d / "unlabeled_x.fmat", split.unlabeled_x)
    fmat.write_fmat(d / "probe_x.fmat", split.probe.inputs)
    fmat.write_labels(d / "probe_y.csv", split.probe.labels)
    fmat.write_fmat(d / "test_x.fmat", split.test_x)
    fmat.write_labels(d / "test_y.csv", np.argmax(split.test_y, axis=1))


def load_split(run, tid):
    d = run.stage_dir("gen") / "data" / tid
    n_classes = _target_entry(run.tasks(), tid)["n_classes"]
    unl = d / "unlabeled_x.fmat"
    probe_x = fmat.read_fmat(d / "probe_x.fmat")
    return tg.DataSplit(
        labeled_x=fmat.read_fmat(d / "labeled_x.fmat"),
        labeled_y=fmat.one_hot(fmat.read_labels(d / "labeled_y.csv"), n_classes),
        unlabeled_x=fmat.read_fmat(unl) if unl.exists() else None,
        probe=sim.ProbeSet.from_labels(probe_x, fmat.read_labels(d / "probe_y.csv"), n_classes),
        probe_index=np.arange(probe_x.shape[0]),
        test_x=fmat.read_fmat(d / "test_x.fmat"),
        test_y=fmat.one_hot(fmat.read_labels(d / "test_y.csv"), n_classes),
    )


def stage_gen(cfg, run):
    d = run.fresh("gen")
    uc = cfg.universe
    universe = tg.build_universe(derive_seed(cfg.seed, "universe"), uc.num_clusters, uc.dim, uc.sigma)
    (d / "universe.json").write_text(_json(universe.to_dict()))
    entries = []
    for j, target in enumerate(_make_targets(cfg, universe)):
        tid = f"t{j}"
        sources, excluded = [], []
        for i, (requested, spec) in enumerate(_make_sources(cfg, universe, target, j)):
            entry = {
                "id": f"{tid}s{i}",
                "task": spec.to_dict(),
                "requested_overlap": requested,
                "overlap": tg.ground_truth_overlap(spec, target),
            }
            if spec == target:
                logger.warning("source %s is identical to target %s; excluded", entry["id"], tid)
                excluded.append(entry)
            else:
                sources.append(entry)
        split = tg.sample_split(
            universe,
            target,
            cfg.data.n_total,
            cfg.data.labeled_fraction,
            probe_size=cfg.data.probe_size,
            seed=derive_seed(cfg.seed, "split", j),
            n_test=cfg.data.n_test,
        )
        _write_split(d / "data" / tid, split)
        entries.append(
            {"id": tid, "task": target.to_dict(), "n_classes": target.n_classes, "sources": sources, "excluded": excluded}
        )
    (d / "tasks.json").write_text(_json({"targets": entries}))
    run.finish("gen", cfg)


# ---------------------------------------------------------------- train-sources


@dataclass
class LoadedSource:
    id: str
    model: object


def stage_train_sources(cfg, run):
    run.require("train-sources")
    universe, tasks = run.universe(), run.tasks()
    d = run.fresh("train-sources")
    sc = cfg.sources
    hyper = TrainHyper(sc.learning_rate, sc.weight_decay, sc.batch_size, sc.epochs, seed=0)
    rows = []
    for j, t in enumerate(tasks["targets"]):
        entries = t["sources"]
        specs = [tg.TaskSpec.from_dict(e["task"]) for e in entries]
        handles = tg.train_source_models(
            universe,
            specs,
            hyper,
            seed=derive_seed(cfg.seed, "sources", j),
            hidden_dims=[tuple(h) for h in sc.hidden_dims],
            n_train=sc.n_train,
            accuracy_floor=sc.accuracy_floor,
        )
        trained = {int(h.id.removeprefix("src")): h for h in handles}
        for i, e in enumerate(entries):
            h = trained.get(i)
            if h is None:
                rows.append([t["id"], e["id"], "", "", "excluded_low_accuracy"])
                continue
            fmat.save_checkpoint(d / e["id"], h.model)
            rows.append([t["id"], e["id"], "x".join(map(str, h.hidden_dims)), _f(h.test_accuracy), "ok"])
    (d / "sources.csv").write_text(_csv(rows, ["target", "source_id", "hidden_dims", "test_acc", "status"]))
    run.finish("train-sources", cfg)


def load_sources(run, tid):
    rows = _read_csv(run.stage_dir("train-sources") / "sources.csv")
    return [
        LoadedSource(r["source_id"], fmat.load_checkpoint(run.stage_dir("train-sources") / r["source_id"]))
        for r in rows
        if r["target"] == tid and r["status"] == "ok"
    ]


# ---------------------------------------------------------------- score


def stage_score(cfg, run):
    run.require("score")
    tasks = run.tasks()
    d = run.fresh("score")
    for tid in _target_ids(tasks):
        split = load_split(run, tid)
        sources = load_sources(run, tid)
        (d / tid).mkdir()
        for metric in sim.METRICS:
            for rep in sim.REPRESENTATIONS:
                scores = sim.score_all_sources(sources, split.probe, metric, rep)
                (d / tid / f"{metric}_{rep}.csv").write_text(sim.scores_to_csv(scores))
    run.finish("score", cfg)


def score_external(feature_paths, labels_path, metric, representation):
    """Score FMAT matrices (one per source, rows aligned with the label CSV)."""
    labels = fmat.read_labels(labels_path)
    probe = sim.ProbeSet.from_labels(None, labels)
    reps = {}
    for path in feature_paths:
        m = fmat.read_fmat(path)
        if m.shape[0] != labels.shape[0]:
            raise ValueError(f"{path}: {m.shape[0]} rows but {labels.shape[0]} labels")
        reps[Path(path).stem] = sim.SourceRepresentation(representation, m)
    if len(reps) != len(feature_paths):
        raise ValueError("feature files must have distinct names")
    return sim.score_representations(reps, probe, metric)


# ---------------------------------------------------------------- weigh


def resolve_scheme(text, cfg):
    name, param = wt.parse_scheme(text)
    if param is None and name == "power":
        param = cfg.p
    elif param is None and name == "softmax":
        param = cfg.temperature
    return name, param


def weigh_scores(scores, scheme, param, seed, top_k=None):
    """Weights over every source; sources whose scoring failed get weight 0."""
    ok = [s for s in scores if s.error is None]
    if not ok:
        raise ValueError("no source could be scored")
    w = wt.weigh(ok, scheme, param, seed=seed, top_k=top_k)
    full = w.as_dict()
    alphas = np.array([full.get(s.source_id, 0.0) for s in scores])
    return wt.SourceWeights(alphas, w.scheme, w.param, tuple(s.source_id for s in scores))


def stage_weigh(cfg, run):
    run.require("weigh")
    score_dir = run.stage_dir("score")
    d = run.fresh("weigh")
    for tdir in sorted(p for p in score_dir.iterdir() if p.is_dir()):
        scores = sim.scores_from_csv((tdir / f"{cfg.metric}_{cfg.representation}.csv").read_text())
        (d / tdir.name).mkdir()
        labels = []
        for text in cfg.schemes:
            name, param = resolve_scheme(text, cfg)
            w = weigh_scores(scores, name, param, derive_seed(cfg.seed, "weights", tdir.name, name), cfg.top_k)
            if w.label() in labels:
                continue
            labels.append(w.label())
            (d / tdir.name / f"{scheme_file(w.label())}.csv").write_text(wt.weights_to_csv(w))
        (d / tdir.name / "schemes.csv").write_text(_csv([[lab] for lab in labels], ["scheme"]))
    run.finish("weigh", cfg)


# ---------------------------------------------------------------- distill


def _distill_config(cfg, weights, hyper, lam=None):
    tc = cfg.training
    return DistillConfig(
        lam=cfg.lam if lam is None else lam,
        weights=weights,
        hyper=hyper,
        batch_ratio=tuple(tc.batch_ratio),
        hidden_dims=tuple(tc.hidden_dims),
        activation=tc.activation,
    )


def stage_distill(cfg, run):
    run.require("distill")
    tasks = run.tasks()
    d = run.fresh("distill")
    tc = cfg.training
    rows = []
    for tid in _target_ids(tasks):
        split = load_split(run, tid)
        sources = load_sources(run, tid)
        ids = tuple(s.id for s in sources)
        cache = cache_pseudo_labels(sources, split.unlabeled_x) if split.unlabeled_x is not None and sources else None
        # every run on this target shares init and batch order
        hyper = TrainHyper(tc.learning_rate, tc.weight_decay, tc.batch_size, tc.epochs, seed=derive_seed(cfg.seed, "target-init", tid))
        test = (split.test_x, split.test_y)

        runs = []
        wdir = run.stage_dir("weigh") / tid
        for r in _read_csv(wdir / "schemes.csv"):
            w = wt.weights_from_csv((wdir / f"{scheme_file(r['scheme'])}.csv").read_text())
            runs.append(("scheme", r["scheme"], _distill_config(cfg, w, hyper)))
        if cfg.single_source:
            for i, sid in enumerate(ids):
                w = wt.SourceWeights(np.eye(len(ids))[i], "single", source_ids=ids)
                runs.append(("single", sid, _distill_config(cfg, w, hyper)))

        for kind, name, dcfg in runs:
            model, history = train_target(split, cache, dcfg, eval_set=test)
            _save_run(d / tid / kind / scheme_file(name), model, history)
            rows.append([tid, kind, name, _f(test_accuracy(model, test))])
        if cfg.supervised_baseline:
            model, history = train_baseline_supervised(split, _distill_config(cfg, None, hyper, lam=1.0), eval_set=test)
            _save_run(d / tid / SUPERVISED, model, history)
            rows.append([tid, SUPERVISED, SUPERVISED, _f(test_accuracy(model, test))])
    (d / "results.csv").write_text(_csv(rows, ["target", "kind", "name", "test_acc"]))
    run.finish("distill", cfg)


def _save_run(d, model, history):
    d.mkdir(parents=True)
    (d / "history.csv").write_text(history.to_csv())
    fmat.save_checkpoint(d / "model", model)


# ---------------------------------------------------------------- eval


def stage_eval(cfg, run):
    run.require("eval")
    tasks = run.tasks()
    results = _read_csv(run.stage_dir("distill") / "results.csv")
    d = run.fresh("eval")
    tids = _target_ids(tasks)

    def accs(kind):
        out = {}
        for r in results:
            if r["kind"] == kind:
                out.setdefault(r["target"], {})[r["name"]] = float(r["test_acc"])
        return out

    scheme_acc, single_acc, sup_acc = accs("scheme"), accs("single"), accs(SUPERVISED)

    # per-task scheme results
    rows = [[r["target"], r["name"], r["test_acc"]] for r in results if r["kind"] == "scheme"]
    (d / "results.csv").write_text(_csv(rows, ["target", "scheme", "test_acc"]))

    # scheme comparison across targets
    table = {}
    for tid in tids:
        for name, a in scheme_acc.get(tid, {}).items():
            table.setdefault(name, []).append(a)
        if single_acc.get(tid):
            table.setdefault(RANDOM_SELECTION, []).append(float(np.mean(list(single_acc[tid].values()))))
        if tid in sup_acc:
            table.setdefault(SUPERVISED, []).append(sup_acc[tid][SUPERVISED])
    comparison = ev.scheme_comparison(table)
    (d / "fig1_scheme_comparison.csv").write_text(ev.scheme_comparison_csv(comparison, tids))

    if single_acc:
        _eval_single_source(run, tasks, tids, single_acc, d)
    run.finish("eval", cfg)


def _load_scores(run, tid):
    out = {}
    for metric in sim.METRICS:
        for rep in sim.REPRESENTATIONS:
            scores = sim.scores_from_csv((run.stage_dir("score") / tid / f"{metric}_{rep}.csv").read_text())
            out[(metric, rep)] = {s.source_id: s.value for s in scores}
    return out


def _eval_single_source(run, tasks, tids, single_acc, d):
    keys = [(m, r) for m in sim.METRICS for r in sim.REPRESENTATIONS]
    fig3, corr, topk, mra = [], [], [], []
    corr_by_key = {k: [] for k in keys}
    mra_by_key = {k: [] for k in keys}
    random_mra = []
    for tid in tids:
        accs = single_acc.get(tid, {})
        ids = list(accs)
        if not ids:
            continue
        overlap = {s["id"]: s["overlap"] for s in _target_entry(tasks, tid)["sources"]}
        scores = _load_scores(run, tid)
        acc_vec = [accs[s] for s in ids]
        for sid in ids:
            fig3.append([tid, sid, _f(overlap[sid]), _f(accs[sid]), *[_f(scores[k][sid]) for k in keys]])
        cells = ev.correlation_report({k: [scores[k][s] for s in ids] for k in keys}, acc_vec)
        for c in cells:
            corr.append([c.metric, c.representation, tid, _f(c.spearman), _f(c.pearson), _f(c.kendall), str(c.degenerate).lower()])
            corr_by_key[(c.metric, c.representation)].append(c)
        if len(ids) < 2:
            continue
        for k in keys:
            r = ev.RankingEval([scores[k][s] for s in ids], acc_vec)
            for kk in range(1, len(ids) + 1):
                topk.append([k[0], k[1], tid, kk, _f(ev.topk_relative_accuracy(r, kk))])
            vals = (ev.mean_relative_accuracy(r, include_full=True), ev.mean_relative_accuracy(r, include_full=False))
            mra.append([k[0], k[1], tid, _f(vals[0]), _f(vals[1])])
            mra_by_key[k].append(vals)
        rnd = (
            ev.expected_random_mean_relative_accuracy(acc_vec, include_full=True),
            ev.expected_random_mean_relative_accuracy(acc_vec, include_full=False),
        )
        mra.append(["random_selection", "", tid, _f(rnd[0]), _f(rnd[1])])
        random_mra.append(rnd)

    for k in keys:
        cells = corr_by_key[k]
        if cells:
            corr.append([k[0], k[1], "mean", *[_f(np.mean([getattr(c, a) for c in cells])) for a in ("spearman", "pearson", "kendall")],
                         str(any(c.degenerate for c in cells)).lower()])
        if mra_by_key[k]:
            m = np.mean(mra_by_key[k], axis=0)
            mra.append([k[0], k[1], "mean", _f(m[0]), _f(m[1])])
    if random_mra:
        m = np.mean(random_mra, axis=0)
        mra.append(["random_selection", "", "mean", _f(m[0]), _f(m[1])])

    score_cols = [f"{m}_{r}" for m, r in keys]
    (d / "fig3_scores_vs_accuracy.csv").write_text(_csv(fig3, ["target", "source_id", "overlap", "single_source_acc", *score_cols]))
    (d / "table2_correlations.csv").write_text(
        _csv(corr, ["metric", "representation", "target", "spearman", "pearson", "kendall", "degenerate"])
    )
    (d / "table3_topk_relative_accuracy.csv").write_text(_csv(topk, ["metric", "representation", "target", "k", "relative_accuracy"]))
    (d / "table8_mean_relative_accuracy.csv").write_text(
        _csv(mra, ["metric", "representation", "target", "mean_rel_acc_k_le_S", "mean_rel_acc_k_lt_S"])
    )


# ---------------------------------------------------------------- driver

STAGE_FUNCS = {
    "gen": stage_gen,
    "train-sources": stage_train_sources,
    "score": stage_score,
    "weigh": stage_weigh,
    "distill": stage_distill,
    "eval": stage_eval,
}


def run_stage(stage, cfg, root):
    run = RunDir(root)
    try:
        STAGE_FUNCS[stage](cfg, run)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    return run.stage_dir(stage)


def run_pipeline(cfg, root):
    """Run every stage in order; returns the report directory."""
    for stage in STAGES:
        logger.info("stage %s", stage)
        run_stage(stage, cfg, root)
    return RunDir(root).stage_dir("eval")
