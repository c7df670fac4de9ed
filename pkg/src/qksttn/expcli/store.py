"""Persistence: experiment records (JSON), metric streams (JSON lines), CSV tables
and the binary model container."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from qksttn import ttn
from qksttn.encoding import EncodingParams
from qksttn.errors import ConfigError, IngestionError

MODEL_FORMAT = "qksttn-model"
MODEL_VERSION = 1
F8 = np.dtype("<f8")


@dataclass
class ExperimentRecord:
    config: dict
    realization: int
    seed: list
    history: list = field(default_factory=list)
    train_error: float | None = None
    test_error: float | None = None
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    digests: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentRecord":
        return cls(**raw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and obj != obj:
        return None  # NaN is not valid JSON
    return obj


def write_record(record: ExperimentRecord, path) -> Path:
    """Records are append-only: an existing file is never overwritten."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "x") as fh:
        json.dump(_jsonable(record.to_dict()), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_record(path) -> ExperimentRecord:
    return ExperimentRecord.from_dict(json.loads(Path(path).read_text()))


def append_metrics(path, entry: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(_jsonable(entry), sort_keys=True) + "\n")


def read_metrics(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_csv(path, header: list, rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def read_csv(path) -> tuple[list, list]:
    """Header and rows, with numeric cells parsed back to int or float."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[_parse_cell(c) for c in row] for row in reader]
    return header, rows


def _parse_cell(cell: str):
    for kind in (int, float):
        try:
            return kind(cell)
        except ValueError:
            pass
    return cell


def code_digest() -> str:
    """SHA-256 over the package sources, in sorted path order."""
    root = Path(__file__).resolve().parent.parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def save_model(path, enc: EncodingParams, model: ttn.TTNModel | None = None,
               linear=None, extra: dict | None = None) -> Path:
    """Self-describing container: a zip of ``.npy`` arrays plus a JSON header.

    Real arrays are stored little-endian IEEE-754 double, masks as bytes.
    """
    meta = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "E": enc.E, "p": enc.p,
            "sigma": enc.sigma, "extra": _jsonable(extra or {})}
    arrays = {"omega": enc.omega.astype(F8), "beta": enc.beta.astype(F8),
              "mask": enc.mask.astype(np.uint8)}
    if model is not None:
        meta.update(chi=model.chi, leaves=model.topology.leaves, tied=bool(model.tied),
                    readout={"mode": model.readout.mode, "qubit": model.readout.qubit,
                             "outcome_map": model.readout.outcome_map})
        arrays["ttn_params"] = model.params.astype(F8)
    if linear is not None:
        meta["linear"] = {"C": linear.C, "classes": list(linear.classes)}
        arrays["linear_weights"] = np.asarray(linear.weights).astype(F8)
        arrays["linear_bias"] = np.array([linear.bias], dtype=F8)
    arrays["header"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_model(path) -> dict:
    """Inverse of ``save_model``: dict with ``enc`` and, when stored, ``model``/``linear``."""
    from qksttn.baseline import LinearModel

    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise IngestionError(f"{path}: not a model container ({exc})") from exc
    with data:
        if "header" not in data.files:
            raise IngestionError(f"{path}: missing header")
        meta = json.loads(bytes(data["header"]).decode())
        if meta.get("format") != MODEL_FORMAT:
            raise IngestionError(f"{path}: unknown format {meta.get('format')!r}")
        if meta.get("version") != MODEL_VERSION:
            raise ConfigError(f"{path}: unsupported model version {meta.get('version')}")
        enc = EncodingParams(data["omega"], data["beta"], data["mask"].astype(bool), meta["sigma"])
        out = {"meta": meta, "enc": enc}
        if "ttn_params" in data.files:
            ro = meta["readout"]
            readout = ttn.ReadoutSpec(ro["mode"], ro["qubit"],
                                      tuple(ro["outcome_map"]) if ro["outcome_map"] else None)
            topo = ttn.TreeTopology(meta["chi"], meta["leaves"])
            out["model"] = ttn.TTNModel(topo, data["ttn_params"], meta["tied"], readout)
        if "linear_weights" in data.files:
            lin = meta["linear"]
            out["linear"] = LinearModel(data["linear_weights"], float(data["linear_bias"][0]),
                                        lin["C"], tuple(lin["classes"]))
    return out
