"""Experiment stages: generate -> preprocess -> train -> embed -> cluster -> evaluate -> report.

Every stage reads only artifacts written by earlier stages under the output
directory and stamps its outputs with the config digest, so stages can be
re-run in isolation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (MissingArtifactError, file_digest, read_csv, read_json, save_npz, write_csv,
                        write_json)
from .cluster import cluster_length_stats, embedding_rows, kmeans, median_length_spread, pca_fit
from .cohort import default_cohort_config, derive_seed, generate_cohort, inject_index_events, read_jsonl, write_jsonl
from .metrics import KnnErrorConfig, SurrogateConfig, adjusted_rand_index, knn_error, surrogate_precision
from .model import AGRUModel, ModelConfig, model_data, train
from .preprocess import (HF_CRITERIA, STROKE_CRITERIA, Preprocessor, WindowGrid, load_bundle,
                         preprocess_cohort, save_bundle)

log = logging.getLogger(__name__)

STAGES = ("generate", "preprocess", "train", "embed", "cluster", "evaluate", "report")
WIDER = "wider"
CRITERIA = {"hf": HF_CRITERIA, "stroke": STROKE_CRITERIA, "none": None}


def stage_seed(cfg, label):
    return derive_seed(cfg.seed, label) % (2 ** 63)


@dataclass
class Run:
    """Paths and bookkeeping for one output directory."""
    cfg: object
    out: Path
    records: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out)
        self.digest = self.cfg.digest()

    @property
    def header(self):
        return [f"config_digest={self.digest}"]

    def path(self, *parts):
        return self.out.joinpath(*parts)

    def need(self, stage, path, producer):
        if not Path(path).exists():
            raise MissingArtifactError(stage, path, producer)
        return Path(path)

    def cohorts(self):
        return [WIDER] + list(self.cfg.preprocess.modes)

    def record(self, stage, inputs, outputs, seconds):
        self.records[stage] = {
            "inputs": {str(Path(p).relative_to(self.out)): file_digest(p) for p in sorted(inputs)},
            "outputs": {str(Path(p).relative_to(self.out)): file_digest(p) for p in sorted(outputs)},
            "seconds": round(seconds, 3),
        }


# ---------------------------------------------------------------------------
# stages

def stage_generate(run):
    c = run.cfg.cohort
    out = run.path("cohort", "cohort.jsonl")
    if c.source == "jsonl":
        cohort = read_jsonl(c.path)
        inputs = [Path(c.path)]
    else:
        ccfg = default_cohort_config(n_patients=c.n_patients, n_phenotypes=c.n_phenotypes, n_binary=c.n_binary,
                                     n_labs=c.n_labs, rho=c.rho, i_max=run.cfg.preprocess.i_max,
                                     seed=stage_seed(run.cfg, "generate"), base_rate=c.base_rate,
                                     signature_rate=c.signature_rate, lab_shift=c.lab_shift,
                                     index_event_fraction=c.index_event_fraction)
        ccfg.window_days = run.cfg.preprocess.window_days
        cohort = inject_index_events(generate_cohort(ccfg), ccfg)
        inputs = []
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(cohort, out, header={"config_digest": run.digest})
    return inputs, [out]


def stage_preprocess(run):
    p = run.cfg.preprocess
    src = run.need("preprocess", run.path("cohort", "cohort.jsonl"), "generate")
    cohort = read_jsonl(src)
    pre = Preprocessor.fit(cohort, WindowGrid(p.window_days, p.i_max), min_frequency=p.min_frequency)
    wider, subs, index_days = preprocess_cohort(cohort, pre, CRITERIA[p.criteria], modes=tuple(p.modes))
    d = run.path("preprocess")
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"config_digest": run.digest, **pre.to_manifest()}
    write_json(d / "preprocessor.json", manifest)
    phen = {r.patient_id: r.true_phenotype for r in cohort}
    outputs = [d / "preprocessor.json"]
    for name in run.cohorts():
        bundle = wider if name == WIDER else subs.get(name)
        if bundle is None:
            raise ValueError(f"trajectory mode {name}: no patient has a qualifying index event")
        labels = np.array([-1 if phen[i] is None else phen[i] for i in bundle.patient_ids])
        save_bundle(d / f"{name}.npz", bundle, {"config_digest": run.digest, "cohort": name},
                    extra={"true_phenotype": labels})
        outputs += [d / f"{name}.npz", d / f"{name}.json"]
    write_json(d / "index_days.json", {"config_digest": run.digest, "index_days": index_days})
    outputs.append(d / "index_days.json")
    return [src], outputs


def model_config(run, entry):
    t = run.cfg.training
    return ModelConfig(kind=entry.model, alpha=entry.alpha, beta=entry.beta, seed=stage_seed(run.cfg, "train"),
                       gap_scale=1.0 / run.cfg.preprocess.i_max, **t.model_dump())


def stage_train(run):
    src = run.need("train", run.path("preprocess", f"{WIDER}.npz"), "preprocess")
    man = run.need("train", run.path("preprocess", "preprocessor.json"), "preprocess")
    wider, _ = load_bundle(src)
    pre = Preprocessor.from_manifest(read_json(man))
    outputs = []
    for entry in run.cfg.models:
        mc = model_config(run, entry)
        d = run.path("train", entry.label)
        d.mkdir(parents=True, exist_ok=True)
        log.info("training %s", entry.label)
        model, tlog = train(model_data(wider, mc), mc, pre.vocab.binary_columns)
        model.save(d / "checkpoint.npz", extra_meta={"config_digest": run.digest, "label": entry.label,
                                                    "best_epoch": tlog.best_epoch})
        tlog.write_csv(d / "train_log.csv", run.header + [f"best_epoch={tlog.best_epoch}"])
        outputs += [d / "checkpoint.npz", d / "train_log.csv"]
    return [src, man], outputs


def stage_embed(run):
    inputs, outputs = [], []
    for entry in run.cfg.models:
        ckpt = run.need("embed", run.path("train", entry.label, "checkpoint.npz"), "train")
        model = AGRUModel.load(ckpt)
        inputs.append(ckpt)
        for name in run.cohorts():
            src = run.need("embed", run.path("preprocess", f"{name}.npz"), "preprocess")
            bundle, _ = load_bundle(src)
            with np.load(src) as f:
                phen = f["true_phenotype"].copy()
            max_len = model.seq_len if model.config.kind == "tlstm" else None
            Z = model.embed(model_data(bundle, model.config, max_len=max_len))
            out = run.path("embed", entry.label, f"{name}.npz")
            out.parent.mkdir(parents=True, exist_ok=True)
            save_npz(out, Z=Z, patient_ids=np.array(bundle.patient_ids), presence=bundle.presence,
                     lengths=bundle.lengths, true_phenotype=phen,
                     header=np.frombuffer(run.header[0].encode(), dtype=np.uint8))
            inputs.append(src)
            outputs.append(out)
    return sorted(set(inputs)), outputs


def _load_embedding(run, stage, label, name):
    src = run.need(stage, run.path("embed", label, f"{name}.npz"), "embed")
    with np.load(src) as f:
        data = {k: f[k].copy() for k in f.files}
    data["patient_ids"] = [str(p) for p in data["patient_ids"]]
    return src, data


def stage_cluster(run):
    c = run.cfg.cluster
    inputs, outputs = [], []
    for entry in run.cfg.models:
        for name in run.cohorts():
            src, e = _load_embedding(run, "cluster", entry.label, name)
            pca = pca_fit(e["Z"], c.d_out)
            reduced = pca.transform(e["Z"])
            assign = kmeans(reduced, c.k, restarts=c.restarts, seed=stage_seed(run.cfg, "cluster"))
            d = run.path("cluster", entry.label)
            d.mkdir(parents=True, exist_ok=True)
            rows = embedding_rows(e["patient_ids"], reduced, assign.labels, e["lengths"])
            write_csv(d / f"{name}_embedding.csv", rows, run.header)
            write_csv(d / f"{name}_length_stats.csv", cluster_length_stats(assign.labels, e["lengths"]), run.header)
            inputs.append(src)
            outputs += [d / f"{name}_embedding.csv", d / f"{name}_length_stats.csv"]
    return inputs, outputs


METRIC_FIELDS = ("metric", "cohort", "mode", "model", "alpha", "beta", "mean", "std", "config_digest")


def stage_evaluate(run):
    m = run.cfg.metrics
    knn_cfg = KnnErrorConfig(m.knn.n_samples, m.knn.k, m.knn.repeats, seed=stage_seed(run.cfg, "evaluate:knn"))
    sur_cfg = SurrogateConfig(m.surrogate.n_trees, m.surrogate.max_depth, m.surrogate.train_fraction,
                              m.surrogate.seeds, seed=stage_seed(run.cfg, "evaluate:surrogate"))
    inputs, outputs = [], []
    for entry in run.cfg.models:
        rows = []
        for name in run.cohorts():
            src, e = _load_embedding(run, "evaluate", entry.label, name)
            csv_path = run.need("evaluate", run.path("cluster", entry.label, f"{name}_embedding.csv"), "cluster")
            crow, _ = read_csv(csv_path)
            labels = np.array([int(r["cluster"]) for r in crow])
            inputs += [src, csv_path]
            cohort_name = "wider" if name == WIDER else run.cfg.preprocess.criteria
            mode = "ALL" if name == WIDER else name
            base = {"cohort": cohort_name, "mode": mode, "model": entry.label, "alpha": float(entry.alpha),
                    "beta": float(entry.beta), "config_digest": run.digest}
            n = len(e["Z"])
            if n >= knn_cfg.k + 1:
                mean, std = knn_error(e["Z"], e["lengths"], knn_cfg)
                rows.append({"metric": "knn_error", **base, "mean": mean, "std": std})
            if len(np.unique(labels)) >= 2:
                mean, std, _ = surrogate_precision(e["presence"], labels, sur_cfg)
                rows.append({"metric": "surrogate_ap", **base, "mean": mean, "std": std})
            phen = e["true_phenotype"]
            if np.all(phen >= 0):
                rows.append({"metric": "ari", **base, "mean": adjusted_rand_index(labels, phen), "std": 0.0})
            rows.append({"metric": "median_length_spread", **base,
                         "mean": median_length_spread(labels, e["lengths"]), "std": 0.0})
        out = run.path("evaluate", f"{entry.label}.csv")
        write_csv(out, rows, run.header, fieldnames=METRIC_FIELDS)
        write_json(out.with_suffix(".json"), {"config_digest": run.digest, "model": entry.label,
                                              "average_precision": "macro one-vs-rest area under the "
                                                                   "precision-recall curve",
                                              "rows": rows})
        outputs += [out, out.with_suffix(".json")]
    return sorted(set(inputs)), outputs


def stage_report(run):
    inputs, table = [], {}
    for entry in run.cfg.models:
        src = run.need("report", run.path("evaluate", f"{entry.label}.csv"), "evaluate")
        inputs.append(src)
        rows, _ = read_csv(src)
        for r in rows:
            key = WIDER if r["cohort"] == "wider" else r["mode"]
            table[(r["metric"], entry.label, key)] = (float(r["mean"]), float(r["std"]))
    d = run.path("report")
    outputs = []
    cohort_cols = [WIDER] + list(run.cfg.preprocess.modes)
    for metric in ("surrogate_ap", "knn_error", "ari", "median_length_spread"):
        rows = []
        for entry in run.cfg.models:
            row = {"model": entry.label, "alpha": float(entry.alpha)}
            for col in cohort_cols:
                mean, std = table.get((metric, entry.label, col), (float("nan"), float("nan")))
                row[f"{col}_mean"] = mean
                row[f"{col}_std"] = std
                row[col] = f"{mean:.2f}±{std:.2f}"
            rows.append(row)
        write_csv(d / f"{metric}_table.csv", rows, run.header)
        outputs.append(d / f"{metric}_table.csv")
    for entry in run.cfg.models:
        for name in run.cohorts():
            src = run.need("report", run.path("cluster", entry.label, f"{name}_embedding.csv"), "cluster")
            rows, _ = read_csv(src)
            plot = [{"patient_id": r["patient_id"], "pc1": r["pc1"], "pc2": r["pc2"], "cluster": r["cluster"],
                     "trajectory_length": r["trajectory_length"]} for r in rows]
            out = d / "plots" / f"{entry.label}_{name}.csv"
            write_csv(out, plot, run.header)
            inputs.append(src)
            outputs.append(out)
    return inputs, outputs


STAGE_FUNCS = {"generate": stage_generate, "preprocess": stage_preprocess, "train": stage_train,
               "embed": stage_embed, "cluster": stage_cluster, "evaluate": stage_evaluate, "report": stage_report}


def run_stages(cfg, stages, out=None):
    """Run ``stages`` in order and merge their records into ``run_manifest.json``."""
    run = Run(cfg, Path(out or cfg.output_dir))
    run.out.mkdir(parents=True, exist_ok=True)
    manifest_path = run.path("run_manifest.json")
    if manifest_path.exists():
        old = read_json(manifest_path)
        if old.get("config_digest") == run.digest:
            run.records.update(old.get("stages", {}))
    for stage in stages:
        t0 = time.perf_counter()
        log.info("stage %s", stage)
        inputs, outputs = STAGE_FUNCS[stage](run)
        run.record(stage, inputs, outputs, time.perf_counter() - t0)
    write_json(manifest_path, {"config_digest": run.digest, "code_version": __version__,
                               "config": cfg.model_dump(), "stages": run.records})
    return run
