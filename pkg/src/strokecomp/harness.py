"""Run configuration and end-to-end experiment orchestration.

Every experiment is a sequence of named stages (data, split, preprocess, fit,
evaluate). A failure inside a stage is re-raised as :class:`StageError`
carrying the stage name, so the CLI can say where a run broke.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace, asdict
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .baselines import BaselineConfig, RFConfig, SVMConfig, feature_matrix, fit_baseline
from .metrics import MetricsReport, evaluate, mean_report, render_report
from .model import (History, ModelConfig, TrainConfig, TrainingError, Variant, load_model, predict,
                    save_model, tiny_gradient_check, train)
from .preprocess import PreprocessConfig, PreprocessError, preprocess_dataset, preprocess_sequences
from .skeleton import Dataset, DatasetError, load_dataset, stratified_split
from .synthgen import GenConfig, generate, write_generated

log = logging.getLogger(__name__)

BASELINES = {"svm": "SVM", "knn": "KNN", "rf": "RF"}
DEEP = "gcn-lstm-att"
COMPARE_ORDER = ("svm", "knn", "rf", DEEP)
ABLATION_ORDER = (Variant.GCN_ONLY, Variant.GCN_LSTM, Variant.GCN_LSTM_ATT)
GRADIENT_TOLERANCE = 1e-4


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

    def __reduce__(self):
        # survive the trip back from a worker process
        return StageError, (self.stage, self.cause)


@contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    seed: int = 0
    out: str = "runs"
    data: str | None = None
    split_fraction: float = 0.8
    split_by: str = "sequence"
    n_seeds: int = 3
    models: tuple[str, ...] = COMPARE_ORDER

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split_fraction must lie strictly between 0 and 1")
        if self.split_by not in ("sequence", "subject"):
            raise ConfigError(f"split_by must be 'sequence' or 'subject', got {self.split_by!r}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        models = tuple(m.lower() for m in self.models)
        unknown = [m for m in models if m not in COMPARE_ORDER]
        if unknown or not models:
            raise ConfigError(f"models must be a non-empty subset of {', '.join(COMPARE_ORDER)}; got {unknown}")
        # keep the table order regardless of how the list was written
        object.__setattr__(self, "models", tuple(m for m in COMPARE_ORDER if m in models))

    def replicate_seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.n_seeds)]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("seed", "out", "data", "split_fraction", "split_by", "n_seeds")}
        d["models"] = list(self.models)
        d["gen"] = self.gen.to_dict()
        d["preprocess"] = asdict(self.preprocess)
        d["model"] = self.model.to_dict()
        d["train"] = asdict(self.train)
        d["baselines"] = asdict(self.baselines)
        return d


_SECTIONS = {"gen": GenConfig, "preprocess": PreprocessConfig, "model": ModelConfig,
             "train": TrainConfig, "baselines": BaselineConfig}
_SCALARS = {"seed", "out", "data", "split_fraction", "split_by", "n_seeds", "models"}


def _check_keys(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")


def config_from_dict(d: dict) -> RunConfig:
    """Build a RunConfig from nested tables; missing keys take their defaults.

    ``gen.seed`` defaults to the global seed, so one number pins the whole run.
    """
    d = dict(d)
    unknown = sorted(set(d) - set(_SECTIONS) - _SCALARS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    top = {k: d[k] for k in _SCALARS if k in d}
    if isinstance(top.get("models"), str):
        top["models"] = tuple(m.strip() for m in top["models"].split(",") if m.strip())
    seed = int(top.get("seed", 0))
    parts = {}
    try:
        for name, cls in _SECTIONS.items():
            sec = dict(d.get(name, {}))
            if not isinstance(sec, dict):
                raise ConfigError(f"[{name}] must be a table")
            if cls is BaselineConfig:
                _check_keys(cls, sec, name)
                for sub, subcls in (("svm", SVMConfig), ("rf", RFConfig)):
                    _check_keys(subcls, sec.get(sub, {}), f"{name}.{sub}")
                    sec.setdefault(sub, {}).setdefault("seed", seed)
                parts[name] = BaselineConfig.from_dict(sec)
                continue
            _check_keys(cls, sec, name)
            if name in ("gen", "train"):
                sec.setdefault("seed", seed)
            parts[name] = cls(**sec)
        return RunConfig(**parts, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a TOML run file (or nothing, for all defaults) and apply overrides.

    Override keys are dotted, e.g. ``{"seed": 7, "train.epochs": 5}``.
    """
    raw: dict = {}
    if path is not None:
        p = Path(path)
        try:
            raw = tomllib.loads(p.read_text())
        except OSError as exc:
            raise ConfigError(f"{p}: cannot read config ({exc.strerror or exc})") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *head, last = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    return config_from_dict(raw)


# -- data -------------------------------------------------------------------

def load_or_generate(cfg: RunConfig) -> Dataset:
    with stage("data"):
        if cfg.data:
            return load_dataset(cfg.data)
        return generate(cfg.gen)


def split(ds: Dataset, cfg: RunConfig, seed: int) -> Dataset:
    with stage("split"):
        return stratified_split(ds, cfg.split_fraction, seed=seed, by=cfg.split_by)


def tensor_hash(ds: Dataset) -> str:
    """SHA-256 over the preprocessed coordinates, labels and split indices."""
    h = hashlib.sha256()
    for idx in (ds.train_idx, ds.test_idx):
        h.update(np.ascontiguousarray(idx, dtype="<i8").tobytes())
        for i in idx:
            s = ds.sequences[i]
            h.update(np.ascontiguousarray(s.coords, dtype="<f8").tobytes())
            h.update(bytes([int(s.label)]))
    return h.hexdigest()


def _train_cfg(cfg: RunConfig, seed: int) -> TrainConfig:
    return replace(cfg.train, seed=seed)


def _fit_deep(pds: Dataset, mcfg: ModelConfig, tcfg: TrainConfig):
    try:
        return train(pds, mcfg, tcfg)
    except TrainingError as exc:
        raise NumericError(str(exc)) from exc


def _test_report(pds: Dataset, model) -> MetricsReport:
    y_true = [s.label for s in pds.subset("test")]
    return evaluate(y_true, predict(pds, model, subset="test"))


# -- experiments ------------------------------------------------------------

@dataclass
class Experiment:
    """Outcome of compare/ablate/train: rows in table order plus per-seed detail."""
    rows: dict[str, MetricsReport]
    per_seed: dict[str, list[MetricsReport]]
    histories: list[tuple[str, int, History]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def render(self):
        extra = dict(self.extra)
        extra["per_seed"] = {name: [r.to_dict() for r in reps] for name, reps in self.per_seed.items()}
        return render_report(self.rows, extra)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("model", "seed", "epoch", "train_loss", "train_accuracy", "test_accuracy"))
        for name, seed, hist in self.histories:
            for e in hist.epochs:
                w.writerow((name, seed, e["epoch"], repr(e["train_loss"]), repr(e["train_accuracy"]),
                            "" if e["test_accuracy"] is None else repr(e["test_accuracy"])))
        return buf.getvalue()


def _map_seeds(fn, cfg: RunConfig, ds: Dataset | None, jobs: int):
    """fn(cfg, ds, seed) for every replicate seed, in seed order.

    With jobs > 1 the seeds run in worker processes; each worker trains
    single-threaded, so the results do not depend on the worker count.
    """
    seeds = cfg.replicate_seeds()
    if jobs <= 1 or len(seeds) == 1:
        ds = ds if ds is not None else load_or_generate(cfg)
        return [fn(cfg, ds, seed) for seed in seeds]
    from concurrent.futures import ProcessPoolExecutor
    # workers rebuild the dataset themselves unless one was handed in
    with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
        return list(pool.map(fn, [cfg] * len(seeds), [ds] * len(seeds), seeds))


def _compare_seed(cfg: RunConfig, ds: Dataset | None, seed: int):
    ds = ds if ds is not None else load_or_generate(cfg)
    names = {**BASELINES, DEEP: Variant.GCN_LSTM_ATT.display_name}
    sds = split(ds, cfg, seed)
    with stage("preprocess"):
        pds, _ = preprocess_dataset(sds, cfg.preprocess)
    if any(m in BASELINES for m in cfg.models):
        with stage("features"):
            Xtr, ytr = feature_matrix(pds.subset("train"))
            Xte, yte = feature_matrix(pds.subset("test"))
    bcfg = cfg.baselines.with_seed(seed)
    reports, histories = {}, []
    for m in cfg.models:
        with stage(f"fit {names[m]} (seed {seed})"):
            if m == DEEP:
                mcfg = replace(cfg.model, variant=Variant.GCN_LSTM_ATT)
                model, hist = _fit_deep(pds, mcfg, _train_cfg(cfg, seed))
                histories.append((names[m], seed, hist))
                rep = _test_report(pds, model)
            else:
                clf = fit_baseline(m, Xtr, ytr, bcfg)
                rep = evaluate(yte, clf.predict(Xte))
        log.info("%s seed %d accuracy %.4f", names[m], seed, rep.accuracy)
        reports[names[m]] = rep
    return reports, histories


def run_compare(cfg: RunConfig, ds: Dataset | None = None, jobs: int = 1) -> Experiment:
    """Baselines and the full model on the same split and preprocessing, per seed."""
    per_seed: dict[str, list[MetricsReport]] = {}
    histories = []
    for reports, hist in _map_seeds(_compare_seed, cfg, ds, jobs):
        for name, rep in reports.items():
            per_seed.setdefault(name, []).append(rep)
        histories += hist
    rows = {name: mean_report(reps) for name, reps in per_seed.items()}
    return Experiment(rows, per_seed, histories, {"seeds": cfg.replicate_seeds()})


def _ablate_seed(cfg: RunConfig, ds: Dataset | None, seed: int):
    ds = ds if ds is not None else load_or_generate(cfg)
    sds = split(ds, cfg, seed)
    with stage("preprocess"):
        pds, _ = preprocess_dataset(sds, cfg.preprocess)
    reference = tensor_hash(pds)
    test_idx = pds.test_idx.copy()
    log.info("seed %d: preprocessed tensors sha256 %s", seed, reference)
    reports, histories = {}, []
    for variant in ABLATION_ORDER:
        name = variant.display_name
        with stage(f"fit {name} (seed {seed})"):
            digest = tensor_hash(pds)
            if digest != reference or not np.array_equal(pds.test_idx, test_idx):
                raise AssertionError(f"{name} would see different inputs than the first variant")
            model, hist = _fit_deep(pds, replace(cfg.model, variant=variant), _train_cfg(cfg, seed))
            rep = _test_report(pds, model)
        log.info("%s seed %d accuracy %.4f", name, seed, rep.accuracy)
        reports[name] = rep
        histories.append((name, seed, hist))
    return reports, histories, {"seed": seed, "sha256": reference, "n_test": int(len(test_idx))}


def run_ablate(cfg: RunConfig, ds: Dataset | None = None, jobs: int = 1) -> Experiment:
    """The three variants trained on one shared split and preprocessed tensor set per seed."""
    per_seed = {v.display_name: [] for v in ABLATION_ORDER}
    histories, hashes = [], []
    for reports, hist, digest in _map_seeds(_ablate_seed, cfg, ds, jobs):
        for name, rep in reports.items():
            per_seed[name].append(rep)
        histories += hist
        hashes.append(digest)
    rows = {name: mean_report(reps) for name, reps in per_seed.items()}
    return Experiment(rows, per_seed, histories, {"seeds": cfg.replicate_seeds(), "inputs": hashes})


def run_train(cfg: RunConfig, ds: Dataset | None = None):
    """Train the configured variant on the first seed's split; returns (model, experiment, split dataset)."""
    ds = ds if ds is not None else load_or_generate(cfg)
    sds = split(ds, cfg, cfg.seed)
    with stage("preprocess"):
        pds, _ = preprocess_dataset(sds, cfg.preprocess)
    name = cfg.model.variant.display_name
    with stage(f"fit {name}"):
        model, hist = _fit_deep(pds, cfg.model, _train_cfg(cfg, cfg.seed))
    with stage("evaluate"):
        rep = _test_report(pds, model)
    return model, Experiment({name: rep}, {name: [rep]}, [(name, cfg.seed, hist)]), sds


def run_evaluate(cfg: RunConfig, model_dir, ds: Dataset | None = None, subset: str = "test") -> Experiment:
    """Score a saved model. Raw data is cleaned, resampled and Z-scored with the
    model's stored statistics; data already marked preprocessed is used as is."""
    with stage("load model"):
        model = load_model(model_dir)
    ds = ds if ds is not None else load_or_generate(cfg)
    with stage("split"):
        if subset == "all":
            seqs = ds.subset("all")
        else:
            seqs = stratified_split(ds, cfg.split_fraction, seed=cfg.seed, by=cfg.split_by).subset(subset)
    with stage("preprocess"):
        if seqs and all(s.preprocessed for s in seqs):
            tl = model.target_length
            bad = [s.key() for s in seqs if len(s) != tl]
            if bad:
                raise PreprocessError(f"{len(bad)} sequence(s) do not have the model's target_length {tl} "
                                      f"(e.g. {bad[0]} has {len(seqs[0])})")
            pseqs = seqs
        else:
            if model.stats is None:
                raise PreprocessError("model carries no channel statistics; cannot preprocess raw data")
            pseqs = preprocess_sequences(seqs, cfg.preprocess, model.stats)
    with stage("evaluate"):
        rep = evaluate([s.label for s in pseqs], predict(pseqs, model))
    name = model.config.variant.display_name
    return Experiment({name: rep}, {name: [rep]})


def run_gradient_check(cfg: RunConfig) -> dict[str, float]:
    with stage("gradient check"):
        return {v.display_name: tiny_gradient_check(v, seed=cfg.seed) for v in ABLATION_ORDER}


def run_preprocess(cfg: RunConfig, ds: Dataset | None = None) -> Dataset:
    ds = ds if ds is not None else load_or_generate(cfg)
    sds = split(ds, cfg, cfg.seed)
    with stage("preprocess"):
        return preprocess_dataset(sds, cfg.preprocess)[0]


# -- outputs ----------------------------------------------------------------

def write_report(exp: Experiment, out: Path) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    rendered = exp.render()
    paths = {"text": out / "report.txt", "csv": out / "report.csv", "json": out / "report.json"}
    for fmt, p in paths.items():
        p.write_text(rendered.get(fmt))
    if exp.histories:
        paths["history"] = out / "history.csv"
        paths["history"].write_text(exp.history_csv())
    return paths


def write_split(ds: Dataset, path: Path) -> Path:
    path.write_text(json.dumps({"train": ds.train_idx.tolist(), "test": ds.test_idx.tolist()}))
    return path


def write_config(cfg: RunConfig, path: Path) -> Path:
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


__all__ = [
    "RunConfig", "ConfigError", "NumericError", "StageError", "Experiment", "load_config",
    "config_from_dict", "load_or_generate", "run_compare", "run_ablate", "run_train", "run_evaluate",
    "run_gradient_check", "run_preprocess", "write_report", "write_split", "write_config",
    "tensor_hash", "GRADIENT_TOLERANCE", "write_generated", "DatasetError",
]
