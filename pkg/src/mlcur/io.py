"""JSON-lines datasets and JSON model files.

Floats are written with Python's shortest round-tripping repr, so reading a
file back reproduces every array bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .baselines import SoftmaxGate, StandardMoE
from .mixture import ContextComponent, CurriculumMoE, GatingPrior, LinearGaussianExpert
from .promp import BasisConfig, Trajectory, project_trajectory
from .reacher import ReacherWorld

SCHEMA_VERSION = 1
MODEL_KINDS = ("ml-cur", "em-moe", "knn")


class FormatError(ValueError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def check_version(doc, path):
    v = doc.get("schema_version")
    if v != SCHEMA_VERSION:
        raise FormatError(f"{path}: schema_version {v!r} is not supported (this build reads {SCHEMA_VERSION})")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Contexts with either primitive weights or raw joint trajectories."""

    contexts: np.ndarray
    omegas: Optional[np.ndarray] = None
    trajectories: Optional[List[Trajectory]] = None
    modes: Optional[List[str]] = None
    basis: Optional[BasisConfig] = None
    world: Optional[ReacherWorld] = None

    def __post_init__(self):
        self.contexts = np.atleast_2d(np.asarray(self.contexts, dtype=float))
        if (self.omegas is None) == (self.trajectories is None):
            raise FormatError("a dataset holds either weights or trajectories")
        n = self.contexts.shape[0]
        if self.omegas is not None:
            self.omegas = np.atleast_2d(np.asarray(self.omegas, dtype=float))
            if self.omegas.shape[0] != n:
                raise FormatError("contexts and weights disagree in count")
            if self.basis is None:
                raise FormatError("weight datasets need their basis")
        elif len(self.trajectories) != n:
            raise FormatError("contexts and trajectories disagree in count")
        if self.modes is not None and len(self.modes) != n:
            raise FormatError("contexts and mode labels disagree in count")

    def __len__(self):
        return self.contexts.shape[0]

    @property
    def is_raw(self):
        return self.trajectories is not None

    def encoded(self, basis: BasisConfig = None):
        """(C, W) with trajectories projected onto ``basis`` if needed."""
        if not self.is_raw:
            if basis is not None and basis != self.basis:
                raise FormatError("dataset is stored in a different basis")
            return self.contexts, self.omegas
        basis = basis or self.basis or BasisConfig()
        W = np.array([project_trajectory(t, basis) for t in self.trajectories])
        return self.contexts, W


def write_dataset(path, ds: Dataset):
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": "dataset",
        "n_records": len(ds),
        "d_c": int(ds.contexts.shape[1]),
        "raw": ds.is_raw,
        "d_omega": None if ds.is_raw else int(ds.omegas.shape[1]),
        "basis": ds.basis.to_dict() if ds.basis is not None else None,
        "world": ds.world.to_dict() if ds.world is not None else None,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(_dumps(header) + "\n")
        for i in range(len(ds)):
            rec = {"context": ds.contexts[i].tolist()}
            if ds.is_raw:
                rec["times"] = ds.trajectories[i].times.tolist()
                rec["states"] = ds.trajectories[i].states.tolist()
            else:
                rec["omega"] = ds.omegas[i].tolist()
            if ds.modes is not None:
                rec["mode"] = ds.modes[i]
            fh.write(_dumps(rec) + "\n")
    os.replace(tmp, path)


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    check_version(header, path)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path}: not a dataset file")
    if header.get("n_records") not in (None, len(records)):
        raise FormatError(f"{path}: header announces {header['n_records']} records, found {len(records)}")
    if not records:
        raise FormatError(f"{path}: no records")
    for i, r in enumerate(records, start=1):
        if len(r.get("context", ())) != header["d_c"]:
            raise FormatError(f"{path}: record {i} has a context of dimension "
                              f"{len(r.get('context', ()))}, header says {header['d_c']}")
        if not header["raw"] and len(r.get("omega", ())) != header["d_omega"]:
            raise FormatError(f"{path}: record {i} has a weight vector of dimension "
                              f"{len(r.get('omega', ()))}, header says {header['d_omega']}")
    C = np.array([r["context"] for r in records], dtype=float)
    basis = BasisConfig.from_dict(header["basis"]) if header.get("basis") else None
    world = ReacherWorld.from_dict(header["world"]) if header.get("world") else None
    modes = [r["mode"] for r in records] if all("mode" in r for r in records) else None
    if header["raw"]:
        trajs = [Trajectory(np.array(r["states"], dtype=float), np.array(r["times"], dtype=float)) for r in records]
        return Dataset(C, trajectories=trajs, modes=modes, basis=basis, world=world)
    W = np.array([r["omega"] for r in records], dtype=float)
    return Dataset(C, omegas=W, modes=modes, basis=basis, world=world)


# ---------------------------------------------------------------------------
# models


def _expert_dict(e: LinearGaussianExpert):
    return {"A": e.A.tolist(), "b": e.b.tolist(), "Sigma": e.Sigma.tolist()}


def _expert_from(d):
    return LinearGaussianExpert(np.array(d["A"]), np.array(d["b"]), np.array(d["Sigma"]))


def model_to_dict(model, kind, *, basis=None, world=None, config=None, extra=None):
    if kind not in MODEL_KINDS:
        raise FormatError(f"unknown model kind {kind!r}")
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "basis": basis.to_dict() if basis is not None else None,
        "world": world.to_dict() if world is not None else None,
        "config": config or {},
    }
    if kind == "ml-cur":
        doc["K"] = model.n_components
        doc["experts"] = [_expert_dict(e) for e in model.experts]
        doc["contexts"] = [{"mu": c.mu.tolist(), "Sigma_c": c.Sigma_c.tolist()} for c in model.contexts]
        doc["log_lambda"] = model.gating.log_lambda.tolist()
    elif kind == "em-moe":
        doc["K"] = model.n_components
        doc["experts"] = [_expert_dict(e) for e in model.experts]
        doc["gate"] = {"coef": model.gate.coef.tolist(), "intercept": model.gate.intercept.tolist()}
    else:
        doc["K"] = int(model["k"])
        doc["dataset"] = model["dataset"]
        doc["dataset_sha256"] = model["dataset_sha256"]
    if extra:
        doc.update(extra)
    return doc


def model_from_dict(doc, path="<model>"):
    check_version(doc, path)
    kind = doc.get("kind")
    if kind == "ml-cur":
        model = CurriculumMoE(
            [_expert_from(e) for e in doc["experts"]],
            [ContextComponent(np.array(c["mu"]), np.array(c["Sigma_c"])) for c in doc["contexts"]],
            GatingPrior(np.array(doc["log_lambda"])),
        )
    elif kind == "em-moe":
        model = StandardMoE(
            [_expert_from(e) for e in doc["experts"]],
            SoftmaxGate(np.array(doc["gate"]["coef"]), np.array(doc["gate"]["intercept"])),
        )
    elif kind == "knn":
        model = {"k": doc["K"], "dataset": doc["dataset"], "dataset_sha256": doc["dataset_sha256"]}
    else:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    return model


def write_json(path, doc):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, allow_nan=False, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def write_model(path, model, kind, **meta):
    write_json(path, model_to_dict(model, kind, **meta))


def read_model(path):
    """Return ``(model, document)``; the document carries basis, world and config."""
    doc = read_json(path)
    return model_from_dict(doc, path), doc
