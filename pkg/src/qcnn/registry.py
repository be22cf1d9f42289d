"""Append-only JSON-lines results registry.

One line per run. Appends take an exclusive file lock so concurrent sweep
workers interleave whole records only; records are immutable once written
with a terminal status. run_id hashes the full configuration, seed, and
code version, which makes re-running a finished sweep a no-op.
"""

import fcntl
import hashlib
import json
import os
import subprocess
from dataclasses import dataclass, field
from typing import List, Optional

from . import __version__
from .data import CIFAR10_MEAN, CIFAR10_STD, MNIST_MEAN, MNIST_STD

SCHEMA_VERSION = 1

TERMINAL_STATUSES = ("completed", "dnc", "diverged")


def code_version():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"qcnn-{__version__}"


def data_normalization(dataset):
    if dataset == "mnist":
        return {"mean": list(MNIST_MEAN), "std": list(MNIST_STD)}
    if dataset == "cifar10":
        return {"mean": list(CIFAR10_MEAN), "std": list(CIFAR10_STD)}
    return None


def compute_run_id(dataset, model, quant_dict, train_dict, version):
    payload = json.dumps(
        {"dataset": dataset, "model": model, "quant": quant_dict,
         "train": train_dict, "code": version},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class RunRecord:
    run_id: str
    dataset: str
    model: str
    method: str
    weight_bits: int
    act_bits: int
    quantize_first_layer: bool
    quantize_last_layer: bool
    train_config: dict
    code_version: str
    status: str
    history: List[dict] = field(default_factory=list)
    best_top1: float = 0.0
    best_top5: float = 0.0
    data_norm: Optional[dict] = None
    schema: int = SCHEMA_VERSION

    def to_dict(self):
        return {
            "schema": self.schema,
            "run_id": self.run_id,
            "dataset": self.dataset,
            "model": self.model,
            "method": self.method,
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "quantize_first_layer": self.quantize_first_layer,
            "quantize_last_layer": self.quantize_last_layer,
            "train_config": self.train_config,
            "code_version": self.code_version,
            "status": self.status,
            "history": self.history,
            "best_top1": self.best_top1,
            "best_top5": self.best_top5,
            "data_norm": self.data_norm,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in (
            "run_id", "dataset", "model", "method", "weight_bits", "act_bits",
            "quantize_first_layer", "quantize_last_layer", "train_config",
            "code_version", "status", "history", "best_top1", "best_top5",
        )}, data_norm=d.get("data_norm"), schema=d.get("schema", SCHEMA_VERSION))

    @classmethod
    def from_result(cls, dataset, model_spec, config, result):
        quant = model_spec.quant
        quantized = quant is not None and not quant.is_full_precision
        train_dict = config.to_dict(quantized=quantized)
        quant_dict = quant.to_dict() if quant else None
        version = code_version()
        return cls(
            run_id=compute_run_id(dataset, model_spec.architecture, quant_dict,
                                  train_dict, version),
            dataset=dataset,
            model=model_spec.architecture,
            method=quant.method.value if quant else "none",
            weight_bits=quant.weight_bits if quant else 32,
            act_bits=quant.act_bits if quant else 32,
            quantize_first_layer=bool(quant.quantize_first_layer) if quant else False,
            quantize_last_layer=bool(quant.quantize_last_layer) if quant else False,
            train_config=train_dict,
            code_version=version,
            status=result.status,
            history=[m.to_dict() for m in result.history],
            best_top1=result.best_top1,
            best_top5=result.best_top5,
            data_norm=data_normalization(dataset),
        )


class Registry:
    def __init__(self, path):
        self.path = path

    def append(self, record):
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        line = json.dumps(record.to_dict(), sort_keys=True) + "\n"
        with open(self.path, "a") as f:
            fcntl.flock(f.fileno(), fcntl.LOCK_EX)
            try:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())
            finally:
                fcntl.flock(f.fileno(), fcntl.LOCK_UN)

    def load(self):
        """All whole records; trailing partial lines are ignored."""
        if not os.path.exists(self.path):
            return []
        records = []
        with open(self.path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(RunRecord.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError):
                    continue
        return records

    def completed_ids(self):
        return {r.run_id for r in self.load() if r.status in TERMINAL_STATUSES}

    def find(self, **filters):
        out = []
        for r in self.load():
            if all(getattr(r, k) == v for k, v in filters.items()):
                out.append(r)
        return out
