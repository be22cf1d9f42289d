"""Sweep orchestration over the weight/activation bit-width grid.

A sweep spec lists methods and (W,A) pairs; illegal combinations are
skipped with a logged reason (they are the dash cells of the result
tables). Completed run ids are skipped on re-execution, so sweeps are
resumable and idempotent.
"""

import json
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .data import load_dataset
from .errors import ConfigurationError
from .models import ModelSpec
from .quantizers import QuantConfig, QuantMethod
from .registry import Registry, RunRecord, code_version, compute_run_id
from .train import TrainConfig, run_training

# the nine table columns, in the tables' fixed order
PAPER_PAIRS = [(32, 32), (8, 8), (4, 4), (2, 32), (1, 32), (2, 2), (2, 1), (1, 2), (1, 1)]


@dataclass
class SweepSpec:
    dataset: str
    model: str
    methods: List[str]
    pairs: List[Tuple[int, int]] = field(default_factory=lambda: list(PAPER_PAIRS))
    policies: Optional[List[Tuple[bool, bool]]] = None  # None: method defaults
    repetitions: int = 1
    seed_base: int = 0
    train: dict = field(default_factory=dict)  # TrainConfig overrides

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(
            dataset=d["dataset"],
            model=d["model"],
            methods=list(d["methods"]),
            pairs=[tuple(p) for p in d.get("pairs", PAPER_PAIRS)],
            policies=[tuple(p) for p in d["policies"]] if d.get("policies") else None,
            repetitions=d.get("repetitions", 1),
            seed_base=d.get("seed_base", 0),
            train=d.get("train", {}),
        )


@dataclass
class RunTask:
    run_id: str
    dataset: str
    model_spec_dict: dict
    config_dict: dict


def _task_for(spec, method, w, a, policy, seed):
    quant = QuantConfig(
        method, w, a,
        quantize_first_layer=None if policy is None else policy[0],
        quantize_last_layer=None if policy is None else policy[1],
    )
    model_spec = ModelSpec(spec.model, quant=quant)
    cfg = TrainConfig.from_dict({**TrainConfig().to_dict(), **spec.train, "seed": seed})
    quantized = not quant.is_full_precision
    run_id = compute_run_id(spec.dataset, spec.model, quant.to_dict(),
                            cfg.to_dict(quantized=quantized), code_version())
    return RunTask(run_id, spec.dataset, model_spec.to_dict(), cfg.to_dict())


def plan_sweep(spec):
    """(tasks, skipped) where skipped lists (method, W, A, reason)."""
    tasks = []
    skipped = []
    policies = spec.policies or [None]
    for name in spec.methods:
        method = QuantMethod.parse(name)
        for w, a in spec.pairs:
            for policy in policies:
                for rep in range(spec.repetitions):
                    seed = spec.seed_base + rep
                    try:
                        tasks.append(_task_for(spec, method, w, a, policy, seed))
                    except ConfigurationError as e:
                        skipped.append((method.value, w, a, str(e)))
                        break  # every policy/rep of an illegal triple skips
    return tasks, skipped


def execute_task(task, data_dir, registry_path, log=None):
    """Train one task and append its record; returns the RunRecord."""
    registry = Registry(registry_path)
    train_ds, test_ds = load_dataset(task.dataset, data_dir)
    model_spec = ModelSpec.from_dict(task.model_spec_dict)
    config = TrainConfig.from_dict(task.config_dict)
    _, result = run_training(model_spec, train_ds, test_ds, config, log=log)
    record = RunRecord.from_result(task.dataset, model_spec, config, result)
    assert record.run_id == task.run_id, "run_id must be stable across plan/execute"
    registry.append(record)
    return record


def _execute_task_entry(args):
    task, data_dir, registry_path = args
    record = execute_task(task, data_dir, registry_path)
    return task.run_id, record.status, record.best_top1


def run_sweep(spec, data_dir, registry_path, jobs=1, log=print):
    """Execute every legal, not-yet-completed run in the sweep.

    Returns (executed, skipped_illegal, skipped_done). Exit is clean as
    long as every run reaches a terminal status; per-run failures are
    recorded, not raised.
    """
    tasks, skipped = plan_sweep(spec)
    if log:
        for method, w, a, reason in skipped:
            log(f"skip {method} W{w}A{a}: {reason}")
    registry = Registry(registry_path)
    done = registry.completed_ids()
    todo = [t for t in tasks if t.run_id not in done]
    skipped_done = len(tasks) - len(todo)
    if log and skipped_done:
        log(f"{skipped_done} run(s) already completed; skipping")

    results = []
    if jobs > 1 and len(todo) > 1:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=jobs) as pool:
            args = [(t, data_dir, registry_path) for t in todo]
            for run_id, status, top1 in pool.imap_unordered(_execute_task_entry, args):
                results.append((run_id, status, top1))
                if log:
                    log(f"run {run_id}: {status} top1={top1:.2f}%")
    else:
        for t in todo:
            record = execute_task(t, data_dir, registry_path, log=None)
            results.append((t.run_id, record.status, record.best_top1))
            if log:
                log(f"run {t.run_id}: {record.status} top1={record.best_top1:.2f}%")
    return results, skipped, skipped_done
