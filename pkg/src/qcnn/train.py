"""The training cycle: quantize on forward, straight-through on backward,
full-precision optimizer updates on the shadow weights.

Also houses top-k evaluation, the two-phase hyperparameter search, and
QCF1 checkpoint files.
"""

import math
import pickle
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import ops
from .data import BatchIterator
from .errors import ContractError, FormatError, SearchFailedError
from .models import ModelSpec, build_model, init_parameters
from .optim import make_optimizer, make_schedule
from .tensor import Tensor, get_graph, no_grad

CHECKPOINT_MAGIC = b"QCF1"
CHECKPOINT_VERSION = 1

STATUS_COMPLETED = "completed"
STATUS_DNC = "dnc"
STATUS_DIVERGED = "diverged"

DEFAULT_SEARCH_GRID = {"optimizer": ["sgd_momentum", "adam"], "lr": [0.1, 0.01, 0.001]}
SHORT_EPOCHS = {"mnist": 30, "cifar10": 20}
# desk-scale full-run defaults; the flags in the CLI expose the long runs
DEFAULT_EPOCHS = {"mnist": 30, "cifar10": 60}
PAPER_EPOCHS = {"mnist": 100, "cifar10": 200}


@dataclass
class TrainConfig:
    optimizer: str = "sgd_momentum"
    initial_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: Optional[float] = None  # None: 1e-4 for FP baselines, 0 quantized
    epochs: int = 30
    batch_size: int = 128
    lr_schedule: str = "step"
    seed: int = 0
    dnc_patience: int = 5
    augment: bool = True
    eval_batch_size: int = 512

    def resolved_weight_decay(self, quantized):
        if self.weight_decay is not None:
            return self.weight_decay
        return 0.0 if quantized else 1e-4

    def to_dict(self, quantized=None):
        d = {
            "optimizer": self.optimizer,
            "initial_lr": self.initial_lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_schedule": self.lr_schedule,
            "seed": self.seed,
            "dnc_patience": self.dnc_patience,
            "augment": self.augment,
        }
        if quantized is not None:
            d["weight_decay"] = self.resolved_weight_decay(quantized)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in (
            "optimizer", "initial_lr", "momentum", "weight_decay", "epochs",
            "batch_size", "lr_schedule", "seed", "dnc_patience", "augment",
        ) if k in d}
        return cls(**known)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_top1: float
    test_top5: float
    lr: float
    wall_seconds: float

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "test_top1": self.test_top1,
            "test_top5": self.test_top5,
            "lr": self.lr,
            "wall_seconds": self.wall_seconds,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in (
            "epoch", "train_loss", "test_top1", "test_top5", "lr", "wall_seconds")})


@dataclass
class TrainResult:
    best: Optional[EpochMetrics]
    history: List[EpochMetrics]
    status: str
    best_state: Optional[dict] = None
    optimizer_state: Optional[dict] = None

    @property
    def best_top1(self):
        return self.best.test_top1 if self.best else 0.0

    @property
    def best_top5(self):
        return self.best.test_top5 if self.best else 0.0


def snapshot_state(model):
    return {name: arr.copy() for name, arr in model.state_arrays().items()}


def restore_state(model, state):
    for name, arr in model.state_arrays().items():
        arr[...] = state[name]


def evaluate_topk(model, dataset, k, batch_size=512):
    """Percentage of samples whose label is among the k largest logits.

    Ties break toward the lower class index (stable sort on the negated
    logits).
    """
    if k > model_num_classes(model):
        raise ContractError(f"k={k} exceeds the number of classes")
    correct = 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            logits = model.forward(Tensor(images), training=False).data
            topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
            correct += int((topk == labels[:, None]).any(axis=1).sum())
    return 100.0 * correct / len(dataset)


def model_num_classes(model):
    return model.quant_layers()[-1].weight.shape[0]


def _evaluate_top1_top5(model, dataset, batch_size):
    c1 = c5 = 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            logits = model.forward(Tensor(images), training=False).data
            order = np.argsort(-logits, axis=1, kind="stable")
            c1 += int((order[:, :1] == labels[:, None]).any(axis=1).sum())
            c5 += int((order[:, :5] == labels[:, None]).any(axis=1).sum())
    n = len(dataset)
    return 100.0 * c1 / n, 100.0 * c5 / n


def train(model, train_ds, test_ds, config, log=None):
    """Run the full training cycle and return the best-epoch metrics.

    Divergence (non-finite loss) aborts immediately; a run whose accuracy
    never exceeds twice random guessing within dnc_patience epochs is
    flagged DNC and stopped.
    """
    quantized = model.quant is not None and not model.quant.is_full_precision
    wd = config.resolved_weight_decay(quantized)
    params = model.param_tensors()
    opt = make_optimizer(config.optimizer, params, config.initial_lr,
                         momentum=config.momentum, weight_decay=wd)
    schedule = make_schedule(config.lr_schedule, config.initial_lr, config.epochs)
    iterator = BatchIterator(train_ds, config.batch_size, seed=config.seed,
                             augment_train=config.augment)
    clip_tensors = model.clip_tensors()
    graph = get_graph()
    num_classes = model_num_classes(model)
    dnc_threshold = 2.0 * 100.0 / num_classes

    history = []
    best = None
    best_state = None
    for epoch in range(config.epochs):
        opt.lr = schedule(epoch)
        t0 = time.perf_counter()
        total_loss = 0.0
        batches = 0
        for images, labels in iterator.epoch(epoch):
            graph.clear()
            model.zero_grad()
            logits = model.forward(Tensor(images), training=True)
            loss = ops.softmax_cross_entropy(logits, labels)
            lv = loss.item()
            if not math.isfinite(lv):
                graph.clear()
                return TrainResult(best, history, STATUS_DIVERGED, best_state,
                                   opt.state_dict())
            loss.backward()
            opt.step()
            for t in clip_tensors:
                np.clip(t.data, -1.0, 1.0, out=t.data)
            total_loss += lv
            batches += 1
        graph.clear()
        top1, top5 = _evaluate_top1_top5(model, test_ds, config.eval_batch_size)
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=total_loss / max(batches, 1),
            test_top1=top1,
            test_top5=top5,
            lr=opt.lr,
            wall_seconds=time.perf_counter() - t0,
        )
        history.append(metrics)
        if best is None or metrics.test_top1 > best.test_top1:
            best = metrics
            best_state = snapshot_state(model)
        if log:
            log(f"epoch {epoch:3d}  loss {metrics.train_loss:.4f}  "
                f"top1 {top1:5.2f}%  top5 {top5:5.2f}%  lr {opt.lr:g}  "
                f"{metrics.wall_seconds:.1f}s")
        if epoch + 1 >= config.dnc_patience and best.test_top1 <= dnc_threshold:
            return TrainResult(best, history, STATUS_DNC, best_state, opt.state_dict())
    return TrainResult(best, history, STATUS_COMPLETED, best_state, opt.state_dict())


def run_training(model_spec, train_ds, test_ds, config, log=None):
    """Build, initialize, and train a model; returns (model, TrainResult).

    The model is left holding its best-epoch state.
    """
    model = build_model(model_spec)
    init_parameters(model, config.seed)
    result = train(model, train_ds, test_ds, config, log=log)
    if result.best_state is not None:
        restore_state(model, result.best_state)
    return model, result


def hyperparameter_search(model_spec, train_ds, test_ds, grid=None,
                          short_epochs=None, base_config=None, log=None):
    """Short-run grid search over optimizer x initial learning rate.

    Every grid point trains for short_epochs; the point with the highest
    test top-1 wins, ties preferring the lower learning rate. Raises
    SearchFailedError when no point converges.
    """
    grid = grid or DEFAULT_SEARCH_GRID
    base = base_config or TrainConfig()
    if short_epochs is None:
        short_epochs = SHORT_EPOCHS.get(train_ds.name, 20)
    outcomes = []
    for optimizer in grid["optimizer"]:
        for lr in grid["lr"]:
            cfg = TrainConfig.from_dict({**base.to_dict(), "optimizer": optimizer,
                                         "initial_lr": lr, "epochs": short_epochs})
            _, result = run_training(model_spec, train_ds, test_ds, cfg, log=log)
            outcomes.append((optimizer, lr, result.status, result.best_top1))
            if log:
                log(f"search {optimizer} lr={lr:g}: {result.status} "
                    f"top1={result.best_top1:.2f}%")
    usable = [o for o in outcomes if o[2] == STATUS_COMPLETED]
    if not usable:
        lines = "; ".join(f"{o}/{lr}: {st} ({t1:.1f}%)" for o, lr, st, t1 in outcomes)
        raise SearchFailedError(f"every grid point failed to converge: {lines}")
    best = max(usable, key=lambda o: (o[3], -o[1]))
    chosen = TrainConfig.from_dict({**base.to_dict(), "optimizer": best[0],
                                    "initial_lr": best[1]})
    return chosen


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model_spec, config, model, optimizer_state=None,
                    history=None, status=STATUS_COMPLETED):
    payload = {
        "model_spec": model_spec.to_dict(),
        "config": config.to_dict(),
        "state": snapshot_state(model),
        "optimizer": optimizer_state,
        "rng": {"seed": config.seed, "epochs_done": len(history or [])},
        "history": [m.to_dict() for m in (history or [])],
        "status": status,
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([CHECKPOINT_VERSION]))
        f.write(pickle.dumps(payload, protocol=4))


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        version = f.read(1)[0]
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        return pickle.loads(f.read())


def model_from_checkpoint(path):
    payload = load_checkpoint(path)
    spec = ModelSpec.from_dict(payload["model_spec"])
    model = build_model(spec)
    restore_state(model, payload["state"])
    return model, spec, payload
