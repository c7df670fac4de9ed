"""Run orchestration: data preparation, the four pipelines, grid search,
dataset-fraction scaling and pairwise benchmark matrices."""

from __future__ import annotations

import functools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from qksttn import baseline, data, training, ttn
from qksttn.encoding import EXACT, init_encoding
from qksttn.errors import ConfigError, QksTtnError
from qksttn.expcli import store
from qksttn.expcli.config import RunConfig, dump_config
from qksttn.expcli.fit import PowerLawFit, fit_power_law
from qksttn.expcli.plots import band_stats

log = logging.getLogger(__name__)

STREAMS = ("data", "encoding", "ttn", "shots", "search", "folds", "train")


class StageError(QksTtnError):
    """A module error re-raised with the pipeline stage that failed."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def streams(seed: int, realization: int) -> dict:
    """Independent generators for one realization; the index perturbs the seed."""
    children = np.random.SeedSequence([int(seed), int(realization)]).spawn(len(STREAMS))
    out = {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}
    out["train_seed"] = int(children[-1].generate_state(1)[0])
    return out


# ---------------------------------------------------------------- data


@dataclass
class Split:
    train: data.Dataset
    test: data.Dataset
    labels: tuple  # original label of each class index


@functools.lru_cache(maxsize=4)
def _load(name: str, split: str, directory: str) -> data.Dataset:
    return data.load_split(name, split, directory)


def _limit(ds: data.Dataset, n: int | None, rng) -> data.Dataset:
    if n is None or n >= len(ds):
        return ds
    alloc = data._stratified_counts(ds.y, n)
    keep = np.sort(np.concatenate([rng.choice(np.flatnonzero(ds.y == c), size=k, replace=False)
                                   for c, k in alloc.items()]))
    return ds.subset(keep, {"op": "limit", "n": int(n)})


def prepare_data(task, data_dir, rng: np.random.Generator) -> Split:
    directory = str(data.resolve_data_dir(data_dir))
    parts = []
    for split in ("train", "test"):
        ds = _load(task.dataset, split, directory)
        if task.multiclass:
            ds = data.filter_classes(ds, task.labels)
        else:
            ds = data.filter_pair(ds, *task.labels)
        if task.apply_deskew:
            ds = data.deskew_dataset(ds)
        parts.append(ds)
    train, test = parts
    if task.fraction < 1:
        train = data.subsample(train, task.fraction, rng)
    train = _limit(train, task.train_limit, rng)
    test = _limit(test, task.test_limit, rng)
    return Split(train, test, tuple(task.labels))


# ---------------------------------------------------------------- fitted predictors


@dataclass
class FeaturePredictor:
    """Kitchen-sink features followed by a linear classifier (or an OvO vote of them)."""
    enc: object
    shots: object
    rng: np.random.Generator
    classifier: object

    def predict(self, X) -> np.ndarray:
        return self.classifier.predict(baseline.qks_features(self.enc, X, self.shots, self.rng))


@dataclass
class TTNPredictor:
    model: ttn.TTNModel
    enc: object

    def predict_proba(self, X) -> np.ndarray:
        return training.predict_proba(self.model, self.enc, X)

    def predict(self, X) -> np.ndarray:
        return training.predict(self.model, self.enc, X)


@dataclass
class PairPredictor:
    """Maps a binary predictor's 0/1 output onto two class indices."""
    inner: object
    pair: tuple

    def predict(self, X) -> np.ndarray:
        return np.where(np.asarray(self.inner.predict(X)) == 1, self.pair[1], self.pair[0])


def _pair_subset(ds: data.Dataset, i: int, j: int) -> data.Dataset:
    return data.filter_pair(ds, i, j)


def _choose_C(cfg: RunConfig, F, y, rng, multiclass: bool) -> float:
    if cfg.C is not None:
        return float(cfg.C)
    fit = (lambda a, b, C: baseline.ovo_train(a, b, C=C)) if multiclass else None
    best, _ = baseline.select_C(F, y, rng, fit=fit, **cfg.c_search)
    return best


def fit_svm(cfg: RunConfig, train: data.Dataset, s: dict):
    enc = _stage("encoding", init_encoding, cfg.E, train.X.shape[1], cfg.r or train.X.shape[1],
                 cfg.sigma, s["encoding"])
    F = _stage("features", baseline.qks_features, enc, train.X, cfg.shots, s["shots"])
    multiclass = np.unique(train.y).size > 2
    C = _stage("select_C", _choose_C, cfg, F, train.y, s["search"], multiclass)
    if multiclass:
        clf = _stage("train_linear", baseline.ovo_train, F, train.y, C=C, workers=cfg.workers)
    else:
        clf = _stage("train_linear", baseline.train_linear, F, train.y, C)
    info = {"sigma": enc.sigma, "C": C, "enc": enc, "history": [],
            "linear": None if multiclass else clf}
    return FeaturePredictor(enc, cfg.shots, s["shots"], clf), info


def fit_ttn(cfg: RunConfig, train: data.Dataset, s: dict, callback=None):
    k = int(np.unique(train.y).size)
    if k > 2 and cfg.multiclass != "direct":
        raise ConfigError("fit_ttn handles binary tasks or direct multi-class readout")
    enc = _stage("encoding", init_encoding, cfg.E, train.X.shape[1], cfg.r or train.X.shape[1],
                 cfg.sigma, s["encoding"])
    readout = ttn.direct_readout(cfg.chi, k) if k > 2 else ttn.ReadoutSpec()
    topo = _stage("topology", ttn.build_topology, cfg.E, cfg.chi)
    model = _stage("init_ttn", ttn.init_ttn, topo, cfg.tied, s["ttn"], readout)
    tc = replace(cfg.train, seed=s["train_seed"],
                 feature_optimization=cfg.pipeline != "qks-ttn")
    if tc.optimizer == "cg-sweeps":
        (model, enc), history = _stage("train_sweeps", training.train_sweeps, model, enc,
                                       train.pair, tc)
        if callback:
            for entry in history:
                callback(entry)
    else:
        (model, enc), history = _stage("train_global", training.train_global, model, enc,
                                       train.pair, tc, callback=callback)
    info = {"sigma": cfg.sigma, "enc": enc, "model": model, "history": history}
    return TTNPredictor(model, enc), info


def fit(cfg: RunConfig, train: data.Dataset, s_factory, callback=None):
    """Fit the configured pipeline; ``s_factory()`` returns fresh seeded streams."""
    k = int(np.unique(train.y).size)
    if cfg.pipeline == "qks-svm":
        return fit_svm(cfg, train, s_factory())
    if k == 2 or cfg.multiclass == "direct":
        return fit_ttn(cfg, train, s_factory(), callback)
    # one-vs-one over binary tensor-network models, every pair with the same seeds
    members, infos = {}, {}
    for i, j in combinations(range(k), 2):
        pred, info = fit_ttn(cfg, _pair_subset(train, i, j), s_factory())
        members[(i, j)] = PairPredictor(pred, (i, j))
        infos[(i, j)] = info
    info = {"sigma": cfg.sigma, "history": [], "pairs": infos}
    return baseline.OvOEnsemble(tuple(range(k)), members), info


# ---------------------------------------------------------------- run


def _execute(cfg: RunConfig, realization: int, data_dir, out: Path | None):
    t0 = time.perf_counter()
    split = _stage("load_data", prepare_data, cfg.task, data_dir, streams(cfg.seed, realization)["data"])
    tag = f"realization-{realization:03d}"
    callback = None
    if out is not None:
        metrics_path = out / "metrics" / f"{tag}.jsonl"
        callback = functools.partial(store.append_metrics, metrics_path)
    predictor, info = fit(cfg, split.train, lambda: streams(cfg.seed, realization), callback)
    metrics = {"sigma": float(info["sigma"]), "n_train": len(split.train), "n_test": len(split.test)}
    if "C" in info:
        metrics["C"] = info["C"]
    train_error = _stage("evaluate", baseline.evaluate, predictor, *split.train.pair)
    test_error = _stage("evaluate", baseline.evaluate, predictor, *split.test.pair)
    if cfg.pipeline == "ablate":
        s = streams(cfg.seed, realization)
        enc = info["enc"]
        F = baseline.qks_features(enc, split.train.X, EXACT)
        C = _stage("select_C", _choose_C, cfg, F, split.train.y, s["search"], False)
        metrics["ablated_test_error"] = _stage(
            "ablate_tn", baseline.ablate_tn, enc, split.train.pair, split.test.pair, C)
        metrics["ablation_C"] = C
        metrics["coherent_test_error"] = test_error
    record = store.ExperimentRecord(
        config=cfg.to_dict(), realization=realization, seed=[cfg.seed, realization],
        history=info["history"], train_error=train_error, test_error=test_error,
        metrics=metrics, wall_clock=time.perf_counter() - t0,
        digests={"code": store.code_digest(), "train": split.train.digest(),
                 "test": split.test.digest(),
                 "sources": split.train.provenance.get("sources", {})},
    )
    if out is not None:
        if "enc" in info:
            store.save_model(out / "models" / f"{tag}.npz", info["enc"], info.get("model"),
                             info.get("linear"), extra={"realization": realization})
        store.write_record(record, out / "records" / f"{tag}.json")
    return record, predictor, split


def parse_shard(shard: str | None) -> tuple[int, int] | None:
    if shard is None:
        return None
    try:
        i, n = (int(v) for v in shard.split("/"))
    except ValueError as exc:
        raise ConfigError(f"--shard must look like i/n, got {shard!r}") from exc
    if n < 1 or not 0 <= i < n:
        raise ConfigError(f"--shard {shard}: need 0 <= i < n")
    return i, n


def _pool_map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def run(cfg: RunConfig, data_dir=None, out=None, shard=None) -> list:
    """Execute every realization (or this shard's share) and return their records."""
    cfg.validate()
    part = parse_shard(shard)
    indices = [r for r in range(cfg.realizations) if part is None or r % part[1] == part[0]]
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
    return _pool_map(lambda r: _execute(cfg, r, data_dir, out)[0], indices, cfg.workers)


def replay(record: store.ExperimentRecord, data_dir=None) -> store.ExperimentRecord:
    """Re-run one recorded realization from its stored config and seed."""
    cfg = RunConfig.from_dict(record.config).validate()
    return _execute(cfg, record.realization, data_dir, None)[0]


# ---------------------------------------------------------------- grid search


def grid_search(cfg: RunConfig, data_dir=None, out=None) -> tuple[list, dict]:
    """k-fold CV error for every (sigma, E) cell; rows follow grid order."""
    cfg.validate()
    sigmas = list(cfg.grid.get("sigma", [cfg.sigma]))
    Es = list(cfg.grid.get("E", [cfg.E]))
    if not sigmas or not Es:
        raise ConfigError("grid must have at least one cell")
    s0 = streams(cfg.seed, 0)
    split = _stage("load_data", prepare_data, cfg.task, data_dir, s0["data"])
    folds = data.cv_folds_indices(split.train.y, cfg.folds, s0["folds"])
    cells = [(float(sg), int(E)) for sg in sigmas for E in Es]

    def score(cell):
        sigma, E = cell
        cc = cfg.replace(sigma=sigma, E=E, realizations=1, workers=1)
        errs = []
        for tr, va in folds:
            pred, _ = fit(cc, split.train.subset(tr), lambda: streams(cfg.seed, 0))
            errs.append(baseline.evaluate(pred, *split.train.subset(va).pair))
        return errs

    fold_errors = _pool_map(score, cells, cfg.workers)
    rows = []
    for (sigma, E), errs in zip(cells, fold_errors):
        rows.append([sigma, E, float(np.mean(errs)), float(np.std(errs))] + [float(e) for e in errs])
    best_row = min(rows, key=lambda r: r[2])  # first minimum in grid order
    best = {"sigma": best_row[0], "E": best_row[1], "mean_cv_error": best_row[2]}
    if out is not None:
        header = ["sigma", "E", "mean_cv_error", "std_cv_error"] + [f"fold_{i}" for i in range(cfg.folds)]
        store.write_csv(Path(out) / "grid.csv", header, rows)
    return rows, best


# ---------------------------------------------------------------- scaling study


def scaling_study(cfg: RunConfig, fractions, data_dir=None, out=None, runner=None) -> dict:
    """Noise-floor test error of the kitchen-sink baseline per training fraction,
    fitted to ``y = a f^b``.

    The noise floor is the error at the largest configured E. ``runner(cfg)``
    returns records and defaults to ``run``; tests substitute synthetic runs.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) < 2:
        raise ConfigError("scaling study needs at least two fractions")
    E = max(cfg.grid.get("E", [cfg.E]))
    runner = runner or (lambda c, sub: run(c, data_dir, sub))
    errors, rows = [], []
    for f in fractions:
        cf = cfg.replace(pipeline="qks-svm", E=E, task={"fraction": f}, grid={})
        sub = Path(out) / f"fraction-{f:g}" if out is not None else None
        recs = runner(cf, sub)
        errs = [r.test_error for r in recs]
        errors.append(errs)
        med, lo, hi = band_stats(errs)
        rows.append([f, med, lo, hi, len(errs)])
    medians = [r[1] for r in rows]
    fitted: PowerLawFit = fit_power_law(fractions, medians)
    result = {"fractions": fractions, "errors": errors, "median": medians, "E": E,
              "a": fitted.a, "b": fitted.b, "sigma_a": fitted.sigma_a, "sigma_b": fitted.sigma_b}
    if out is not None:
        store.write_csv(Path(out) / "scaling.csv",
                        ["fraction", "median_test_error", "p16", "p84", "realizations"], rows)
        Path(out, "scaling_fit.json").write_text(
            json.dumps(store._jsonable(result), indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------- benchmark matrix


def benchmark_matrix(cfg: RunConfig, data_dir=None, out=None) -> dict:
    """Pairwise test errors (lower triangle) and the aggregate multi-class error.

    ``matrix[i-1, j]`` holds the error between labels[i] and labels[j] for
    j < i; the remaining cells are NaN.
    """
    cfg.validate()
    labels = cfg.task.labels
    k = len(labels)
    matrix = np.full((k - 1, k - 1), np.nan)
    deskew = cfg.task.apply_deskew
    if cfg.multiclass == "direct" and k > 2:
        record, predictor, split = _execute(cfg, 0, data_dir, None)
        probs = predictor.predict_proba(split.test.X)
        for i, j in combinations(range(k), 2):
            sel = np.isin(split.test.y, (i, j))
            pick = np.where(probs[sel, j] > probs[sel, i], j, i)
            matrix[j - 1, i] = float(np.mean(pick != split.test.y[sel]))
        multi = record.test_error
    else:
        members = {}
        for i, j in combinations(range(k), 2):
            pc = cfg.replace(task={"labels": [labels[i], labels[j]], "deskew": deskew})
            record, predictor, _ = _execute(pc, 0, data_dir, None)
            matrix[j - 1, i] = record.test_error
            members[(i, j)] = PairPredictor(predictor, (i, j))
        if k > 2:
            split = prepare_data(cfg.task, data_dir, streams(cfg.seed, 0)["data"])
            ensemble = baseline.OvOEnsemble(tuple(range(k)), members)
            multi = baseline.evaluate(ensemble, *split.test.pair)
        else:
            multi = float(matrix[0, 0])
    result = {"kind": "benchmark", "labels": list(labels), "row_labels": list(labels[1:]),
              "col_labels": list(labels[:-1]), "matrix": matrix.tolist(),
              "multiclass_error": multi, "mode": cfg.multiclass, "config": cfg.to_dict()}
    if out is not None:
        rows = [[labels[i + 1]] + [("" if np.isnan(v) else float(v)) for v in matrix[i]]
                for i in range(k - 1)]
        store.write_csv(Path(out) / "benchmark.csv", ["label"] + list(labels[:-1]), rows)
        Path(out, "benchmark.json").write_text(
            json.dumps(store._jsonable(result), indent=2, sort_keys=True) + "\n")
    return result
