"""Hold-out experiments end to end: config, per-cell runs, records and reports.

An experiment trains one classifier per (held-out class, trial) cell, scores
the test set with every configured scorer and stores average precision and
test accuracy. Each finished cell is written to ``<out>/cells/`` as JSON
before the next one starts, so an interrupted run resumes where it stopped.

Layout of an output directory::

    config.json                      snapshot of the validated config
    cells/split{k}_trial{t}.json     one finished cell
    models/split{k}_trial{t}.semm    trained classifier (when a model scorer is used)
    scores/split{k}_trial{t}_{scorer}.csv
    record.json, record.csv          the assembled record
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .metrics import aggregate_trials, average_precision, fmt17, write_scores_csv
from .model import Arch, build_model, load_checkpoint, save_checkpoint
from .rng import Rng
from .scorers import (OdinConfig, edge_scorer, fit_pixel_gmm, gmm_scorer, msp_scorer,
                      odin_scorer, score_test_set)
from .splits import HoldOutSplit, make_holdout_splits
from .training import TrainConfig, train

SCHEMA_VERSION = 1
MODEL_SCORERS = ("msp", "odin")
BASELINE_SCORERS = ("gmm", "edge")
DATASET_FORMATS = ("synth_shapes", "cifar", "idx", "raw")


class ConfigError(ValueError):
    pass


def _strict(cls, raw, where: str):
    """Build dataclass ``cls`` from a dict, rejecting keys it does not declare."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class DatasetConfig:
    format: str = "synth_shapes"
    # synth_shapes
    classes: list[str] = field(default_factory=lambda: list(D.SHAPE_KINDS))
    n_train_per_class: int = 200
    n_test_per_class: int = 50
    image_size: int = 16
    max_angle: float = 30.0
    # file formats: cifar takes lists of batch files, idx takes [images, labels]
    # pairs, raw takes one SEMT file per side
    train_paths: list[str] = field(default_factory=list)
    test_paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.format not in DATASET_FORMATS:
            raise ValueError(f"unknown dataset format {self.format!r}; expected one of {DATASET_FORMATS}")
        if self.format != "synth_shapes" and not (self.train_paths and self.test_paths):
            raise ValueError(f"format {self.format!r} needs train_paths and test_paths")
        if self.format == "idx" and (len(self.train_paths) != 2 or len(self.test_paths) != 2):
            raise ValueError("idx format needs [images, labels] paths for train and test")
        if self.format == "raw" and (len(self.train_paths) != 1 or len(self.test_paths) != 1):
            raise ValueError("raw format takes exactly one file for train and one for test")


@dataclass
class ScorerSpec:
    name: str
    temperature: float = 1000.0
    epsilon: float = 5e-5
    polarity: str = "high_is_anomalous"
    max_pixels: int | None = 200_000

    def __post_init__(self):
        if self.name not in MODEL_SCORERS + BASELINE_SCORERS:
            raise ValueError(f"unknown scorer {self.name!r}; expected one of {MODEL_SCORERS + BASELINE_SCORERS}")
        if self.polarity not in ("low_is_anomalous", "high_is_anomalous"):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        OdinConfig(self.temperature, self.epsilon)

    @property
    def label(self) -> str:
        return self.name


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    scorers: list[ScorerSpec] = field(default_factory=lambda: [ScorerSpec("msp")])
    trials_per_split: int = 3
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if self.trials_per_split < 1:
            raise ConfigError("trials_per_split must be >= 1")
        if not self.scorers:
            raise ConfigError("at least one scorer is required")
        labels = [s.label for s in self.scorers]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate scorer in {labels}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        self.arch()  # validates the model block

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - top)
        if unknown:
            raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
        kw = dict(raw)
        if "dataset" in kw:
            kw["dataset"] = _strict(DatasetConfig, kw["dataset"], "dataset")
        if "train" in kw:
            t = dict(kw["train"]) if isinstance(kw["train"], dict) else kw["train"]
            if isinstance(t, dict) and "seed" in t:
                raise ConfigError("train: seed is set at the top level")
            kw["train"] = _strict(TrainConfig, t, "train")
        if "scorers" in kw:
            if not isinstance(kw["scorers"], list):
                raise ConfigError("scorers: expected a list")
            kw["scorers"] = [_strict(ScorerSpec, {"name": s} if isinstance(s, str) else s, f"scorers[{i}]")
                             for i, s in enumerate(kw["scorers"])]
        if "model" in kw and not isinstance(kw["model"], dict):
            raise ConfigError("model: expected an object")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(raw)

    def arch(self) -> Arch:
        banned = {"n_classes", "aux_task"} & set(self.model)
        if banned:
            raise ConfigError(f"model: {', '.join(sorted(banned))} are set by the protocol and train block")
        return _strict(Arch, self.model, "model")

    def to_dict(self) -> dict:
        """Everything that affects results; the output directory is left out."""
        d = asdict(self)
        d["train"].pop("seed")
        d.pop("output_dir")
        return d

    def fingerprint(self) -> str:
        d = self.to_dict()
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def needs_model(self) -> bool:
        return any(s.name in MODEL_SCORERS for s in self.scorers)


# ---------------------------------------------------------------------------
# data


def load_datasets(cfg: DatasetConfig, rng: Rng) -> tuple[D.LabeledDataset, D.LabeledDataset]:
    if cfg.format == "synth_shapes":
        make = lambda n, name: D.synth_shapes(n, cfg.classes, cfg.image_size, rng.child(name), cfg.max_angle)
        return make(cfg.n_train_per_class, "train"), make(cfg.n_test_per_class, "test")
    if cfg.format == "cifar":
        return (D.concat([D.load_cifar_binary(p) for p in cfg.train_paths]),
                D.concat([D.load_cifar_binary(p) for p in cfg.test_paths]))
    if cfg.format == "idx":
        train_ds, test_ds = D.load_idx(*cfg.train_paths), D.load_idx(*cfg.test_paths)
        names = train_ds.class_names if train_ds.n_classes >= test_ds.n_classes else test_ds.class_names
        return (D.LabeledDataset(train_ds.images, train_ds.labels, list(names)),
                D.LabeledDataset(test_ds.images, test_ds.labels, list(names)))
    return D.load_raw_tensor(cfg.train_paths[0]), D.load_raw_tensor(cfg.test_paths[0])


def build_splits(cfg: ExperimentConfig) -> list[HoldOutSplit]:
    train_ds, test_ds = load_datasets(cfg.dataset, Rng(cfg.seed).child("data"))
    return make_holdout_splits(train_ds, test_ds, cfg.trials_per_split)


# ---------------------------------------------------------------------------
# cells


def cell_name(split: int, trial: int) -> str:
    return f"split{split}_trial{trial}"


def cell_rng(seed: int, split: int, trial: int) -> Rng:
    return Rng(seed).child("cell").child(split).child(trial)


def train_cell(cfg: ExperimentConfig, split: HoldOutSplit, trial: int):
    rng = cell_rng(cfg.seed, split.held_out_class, trial)
    model = build_model(cfg.arch(), n_classes=split.train.n_classes, aux_task=cfg.train.aux_task,
                        rng=rng.child("model"))
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    return train(model, split, tcfg, rng.child("train"))


def test_accuracy(model, split: HoldOutSplit) -> float:
    """Accuracy on the test examples of the known classes."""
    known = ~split.is_anomaly
    return float((model.predict(split.test_images[known]) == split.test_labels[known]).mean())


def score_cell(cfg: ExperimentConfig, split: HoldOutSplit, trial: int, model, out: Path | None) -> dict:
    """Scorer label -> AP for one cell; writes score CSVs when ``out`` is given."""
    k = split.held_out_class
    rng = cell_rng(cfg.seed, k, trial)
    aps = {}
    for spec in cfg.scorers:
        if spec.name == "msp":
            scorer = msp_scorer(model)
        elif spec.name == "odin":
            scorer = odin_scorer(model, OdinConfig(spec.temperature, spec.epsilon))
        elif spec.name == "gmm":
            scorer = gmm_scorer(fit_pixel_gmm(split.train.images, rng=rng.child("gmm"),
                                              max_pixels=spec.max_pixels))
        else:
            scorer = edge_scorer(spec.polarity)
        scored = score_test_set(scorer, split)
        if out is not None:
            write_scores_csv(scored, out / "scores" / f"{cell_name(k, trial)}_{spec.label}.csv")
        aps[spec.label] = average_precision(scored).average_precision
    return aps


def run_cell(cfg: ExperimentConfig, split: HoldOutSplit, trial: int, out: Path | None) -> dict:
    """Train (if needed), score and evaluate one cell; returns its JSON-able result."""
    k = split.held_out_class
    result = {"split": k, "held_out": split.held_out_name, "trial": trial, "skew": split.skew,
              "status": "ok", "error": None, "test_accuracy": None, "ap": {}}
    model = None
    if cfg.needs_model:
        model, _ = train_cell(cfg, split, trial)
        result["test_accuracy"] = test_accuracy(model, split)
        if out is not None:
            save_checkpoint(model, out / "models" / f"{cell_name(k, trial)}.semm")
    result["ap"] = score_cell(cfg, split, trial, model, out)
    return result


def train_stage(cfg: ExperimentConfig, resume: bool = False, log=None) -> list[str]:
    """Train and checkpoint every cell's classifier; returns the cells trained."""
    out = Path(cfg.output_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    done = []
    for sp in build_splits(cfg):
        for trial in range(cfg.trials_per_split):
            name = cell_name(sp.held_out_class, trial)
            path = out / "models" / f"{name}.semm"
            if resume and path.exists():
                continue
            model, tlog = train_cell(cfg, sp, trial)
            save_checkpoint(model, path)
            _write(out / "models" / f"{name}.log.json", json.dumps(tlog.to_dict(), indent=2) + "\n")
            done.append(name)
            if log:
                log(f"{name}: train accuracy {tlog.epochs[-1].train_accuracy:.4f}" if tlog.epochs else name)
    return done


def score_stage(cfg: ExperimentConfig, log=None) -> dict[str, dict]:
    """Score every cell with checkpoints from :func:`train_stage`; returns AP per cell."""
    out = Path(cfg.output_dir)
    (out / "scores").mkdir(parents=True, exist_ok=True)
    results = {}
    for sp in build_splits(cfg):
        for trial in range(cfg.trials_per_split):
            name = cell_name(sp.held_out_class, trial)
            model = None
            if cfg.needs_model:
                path = out / "models" / f"{name}.semm"
                if not path.exists():
                    raise FileNotFoundError(f"no checkpoint {path}; run the train stage first")
                model = load_checkpoint(path)
            results[name] = score_cell(cfg, sp, trial, model, out)
            if log:
                log(f"{name}: " + " ".join(f"{k}={v:.4f}" for k, v in results[name].items()))
    return results


# ---------------------------------------------------------------------------
# records


@dataclass
class ExperimentRecord:
    config: dict
    fingerprint: str
    cells: list[dict]
    splits: list[dict]
    average: dict
    # cells computed by the call that produced this record; not persisted
    computed: list[str] = field(default_factory=list, compare=False)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "config": self.config, "fingerprint": self.fingerprint,
                "cells": self.cells, "splits": self.splits, "average": self.average}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema_version {d.get('schema_version')!r}")
        return cls(d["config"], d["fingerprint"], d["cells"], d["splits"], d["average"])

    @classmethod
    def load(cls, path) -> "ExperimentRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def scorer_labels(self) -> list[str]:
        return [s["name"] for s in self.config["scorers"]]

    def to_csv(self) -> str:
        """One row per (split, trial, scorer) cell; floats at 17 significant digits."""
        rows = ["split,held_out,trial,scorer,status,ap,test_accuracy,skew"]
        for c in self.cells:
            acc = "" if c["test_accuracy"] is None else fmt17(c["test_accuracy"])
            for label in self.scorer_labels:
                ap = c["ap"].get(label)
                rows.append(",".join([str(c["split"]), c["held_out"], str(c["trial"]), label, c["status"],
                                      "" if ap is None else fmt17(ap), acc, fmt17(c["skew"])]))
        return "\n".join(rows) + "\n"


def _agg(values: list[float]) -> dict | None:
    if not values:
        return None
    a = aggregate_trials(values)
    return {"mean": a.mean, "std": a.std, "n_trials": a.n_trials}


def _grand_average(cells: list[dict], label: str, n_splits: int, n_trials: int) -> dict | None:
    """Unweighted mean of the per-split means, with the spread of the per-trial averages.

    The per-trial average over splits has the same mean, so its sample
    standard deviation gives the ``±`` of the Average row. Undefined unless
    every cell finished.
    """
    ap = np.full((n_splits, n_trials), np.nan)
    for c in cells:
        if c["status"] == "ok":
            ap[c["split"], c["trial"]] = c["ap"][label]
    if np.isnan(ap).any():
        return None
    agg = _agg(ap.mean(axis=0).tolist())
    agg["mean"] = float(ap.mean(axis=1).mean())
    return agg


def assemble_record(cfg: ExperimentConfig, splits: list[HoldOutSplit], cells: list[dict]) -> ExperimentRecord:
    labels = [s.label for s in cfg.scorers]
    by_split = []
    for sp in splits:
        mine = [c for c in cells if c["split"] == sp.held_out_class and c["status"] == "ok"]
        accs = [c["test_accuracy"] for c in mine if c["test_accuracy"] is not None]
        by_split.append({
            "split": sp.held_out_class,
            "held_out": sp.held_out_name,
            "skew": sp.skew,
            "ap": {label: _agg([c["ap"][label] for c in mine]) for label in labels},
            "test_accuracy": _agg(accs),
        })
    average = {label: _grand_average(cells, label, len(splits), cfg.trials_per_split)
               for label in labels}
    accs = [s["test_accuracy"]["mean"] for s in by_split if s["test_accuracy"] is not None]
    average["test_accuracy"] = float(np.mean(accs)) if accs and len(accs) == len(by_split) else None
    average["skew"] = float(np.mean([s["skew"] for s in by_split]))
    cells = sorted(cells, key=lambda c: (c["split"], c["trial"]))
    return ExperimentRecord(cfg.to_dict(), cfg.fingerprint(), cells, by_split, average)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def run_experiment(cfg: ExperimentConfig, resume: bool = False, log=None) -> ExperimentRecord:
    """Run every (split, trial) cell and persist the record.

    With ``resume``, cells already finished in the output directory are
    reused, and only missing or failed cells run. A failing cell is recorded
    with its error and the remaining cells still run.
    """
    out = Path(cfg.output_dir)
    fp = cfg.fingerprint()
    snapshot = out / "config.json"
    if resume and snapshot.exists():
        old = json.loads(snapshot.read_text()).get("fingerprint")
        if old != fp:
            raise ConfigError(f"{out} holds results for a different config (fingerprint {old}, now {fp})")
    for sub in ("cells", "models", "scores"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    _write(snapshot, json.dumps({"fingerprint": fp, "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")

    splits = build_splits(cfg)
    cells, computed = [], []
    for sp in splits:
        for trial in range(cfg.trials_per_split):
            name = cell_name(sp.held_out_class, trial)
            path = out / "cells" / f"{name}.json"
            if resume and path.exists():
                cached = json.loads(path.read_text())
                if cached["status"] == "ok":
                    cells.append(cached)
                    if log:
                        log(f"{name}: cached")
                    continue
            try:
                result = run_cell(cfg, sp, trial, out)
            except Exception as exc:  # recorded per cell, the run goes on
                result = {"split": sp.held_out_class, "held_out": sp.held_out_name, "trial": trial,
                          "skew": sp.skew, "status": "error",
                          "error": f"{type(exc).__name__}: {exc}".splitlines()[0],
                          "test_accuracy": None, "ap": {}}
                if log:
                    log(f"{name}: error\n{traceback.format_exc()}")
            _write(path, json.dumps(result, indent=2, sort_keys=True) + "\n")
            computed.append(name)
            cells.append(result)
            if log and result["status"] == "ok":
                aps = " ".join(f"{k}={v:.4f}" for k, v in result["ap"].items())
                log(f"{name}: {aps}")
    record = assemble_record(cfg, splits, cells)
    record.computed = computed
    _write(out / "record.json", record.to_json())
    _write(out / "record.csv", record.to_csv())
    return record


# ---------------------------------------------------------------------------
# reports

MISSING = "—"


def fmt_cell(agg: dict | None) -> str:
    if agg is None:
        return MISSING
    return f"{100 * agg['mean']:.2f} ± {100 * agg['std']:.2f}"


def fmt_pct(x: float | None) -> str:
    return MISSING if x is None else f"{100 * x:.2f}"


def _has_baselines(record: ExperimentRecord) -> bool:
    return any(label in BASELINE_SCORERS for label in record.scorer_labels)


def _markdown(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def emit_report(record: ExperimentRecord, fmt: str = "markdown") -> str:
    """Per-split ``mean ± std`` AP table in percent, with an Average row.

    The csv format instead lists the raw aggregates at full precision.
    """
    return emit_comparison([("", record)], fmt)


def emit_comparison(blocks: list[tuple[str, ExperimentRecord]], fmt: str = "markdown") -> str:
    """Side-by-side blocks over the same splits, e.g. classification-only vs rotation-augmented."""
    if fmt not in ("markdown", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    first = blocks[0][1]
    show_skew = any(_has_baselines(r) for _, r in blocks)
    if fmt == "csv":
        lines = ["block,split,held_out,skew,scorer,mean,std,n_trials"]
        for title, rec in blocks:
            for s in rec.splits:
                for label in rec.scorer_labels:
                    a = s["ap"][label]
                    vals = ["", "", ""] if a is None else [fmt17(a["mean"]), fmt17(a["std"]), str(a["n_trials"])]
                    lines.append(",".join([title, str(s["split"]), s["held_out"], fmt17(s["skew"]), label] + vals))
            for label in rec.scorer_labels:
                a = rec.average.get(label)
                vals = ["", "", ""] if a is None else [fmt17(a["mean"]), fmt17(a["std"]), str(a["n_trials"])]
                lines.append(",".join([title, "average", "", fmt17(rec.average["skew"]), label] + vals))
        return "\n".join(lines) + "\n"

    header = ["Held-out"] + (["Skew"] if show_skew else [])
    for title, rec in blocks:
        header += [f"{title} {label}".strip() for label in rec.scorer_labels]
    rows = []
    for i, s in enumerate(first.splits):
        row = [s["held_out"]] + ([fmt_pct(s["skew"])] if show_skew else [])
        for _, rec in blocks:
            match = next((x for x in rec.splits if x["split"] == s["split"]), None)
            row += [fmt_cell(None if match is None else match["ap"][label]) for label in rec.scorer_labels]
        rows.append(row)
    avg = ["Average"] + ([fmt_pct(first.average["skew"])] if show_skew else [])
    for _, rec in blocks:
        avg += [fmt_cell(rec.average.get(label)) for label in rec.scorer_labels]
    rows.append(avg)
    return _markdown(header, rows)
