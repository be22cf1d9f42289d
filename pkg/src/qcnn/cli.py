"""Command-line front end.

Exit codes: 0 success (a DNC result is a result, not a failure), 2 usage
or configuration errors, 3 missing dataset files.
"""

import argparse
import os
import sys

from .binary import evaluate_binary_topk, export_binary_model, save_binary_model
from .data import load_dataset
from .errors import ConfigurationError, DataNotFoundError, SearchFailedError
from .export import export_plots, export_table
from .models import ModelSpec
from .quantizers import QuantConfig, QuantMethod
from .registry import Registry, RunRecord
from .sweep import SweepSpec, run_sweep
from .train import (
    DEFAULT_EPOCHS,
    PAPER_EPOCHS,
    TrainConfig,
    evaluate_topk,
    hyperparameter_search,
    model_from_checkpoint,
    run_training,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NO_DATA = 3


def _bool_flag(value):
    v = value.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


def _default_data_dir():
    return os.environ.get("QCNN_DATA_DIR", os.path.join(os.getcwd(), "data"))


def _default_registry():
    return os.environ.get("QCNN_REGISTRY",
                          os.path.join(os.getcwd(), "results", "registry.jsonl"))


def build_parser():
    p = argparse.ArgumentParser(prog="qcnn",
                                description="quantization-aware CNN training and evaluation")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--dataset", choices=("mnist", "cifar10"), required=True)
    t.add_argument("--model", default=None, help="lenet5 or resnetN (default per dataset)")
    t.add_argument("--method", default=None,
                   help="qnn | dorefa | xnornet | twn | ttq (omit for plain training)")
    t.add_argument("--wbits", type=int, default=32)
    t.add_argument("--abits", type=int, default=32)
    t.add_argument("--quantize-first", type=_bool_flag, default=None,
                   metavar="{true,false}")
    t.add_argument("--quantize-last", type=_bool_flag, default=None,
                   metavar="{true,false}")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--paper-epochs", action="store_true",
                   help="use the long schedules (100 MNIST / 200 CIFAR-10)")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--optimizer", choices=("sgd_momentum", "adam"), default=None)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--weight-decay", type=float, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data-dir", default=None)
    t.add_argument("--registry", default=None)
    t.add_argument("--checkpoint-out", default=None, help="write a QCF1 checkpoint here")
    t.add_argument("--quiet", action="store_true")

    s = sub.add_parser("sweep", help="run every legal configuration in a sweep spec")
    s.add_argument("spec", help="JSON sweep specification file")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--data-dir", default=None)
    s.add_argument("--registry", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its dataset's test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", choices=("mnist", "cifar10"), required=True)
    e.add_argument("--data-dir", default=None)

    et = sub.add_parser("export-table", help="render the results table")
    et.add_argument("--dataset", required=True)
    et.add_argument("--model", required=True)
    et.add_argument("--registry", default=None)
    et.add_argument("--out", default=None, help="prefix for .txt/.csv outputs")

    ep = sub.add_parser("export-plots", help="accuracy curves and the W x A grid")
    ep.add_argument("--dataset", required=True)
    ep.add_argument("--model", required=True)
    ep.add_argument("--registry", default=None)
    ep.add_argument("--out", default="plots")

    eb = sub.add_parser("export-binary", help="pack a 1-bit-weight checkpoint into QBM1")
    eb.add_argument("--checkpoint", required=True)
    eb.add_argument("--out", required=True)
    eb.add_argument("--dataset", default=None,
                    help="also report packed-model test accuracy on this dataset")
    eb.add_argument("--data-dir", default=None)
    return p


def _cmd_train(args):
    model_name = args.model or ("lenet5" if args.dataset == "mnist" else "resnet20")
    quant = None
    if args.method is not None:
        quant = QuantConfig(
            QuantMethod.parse(args.method), args.wbits, args.abits,
            quantize_first_layer=args.quantize_first,
            quantize_last_layer=args.quantize_last,
        )
    spec = ModelSpec(model_name, quant=quant)

    data_dir = args.data_dir or _default_data_dir()
    try:
        train_ds, test_ds = load_dataset(args.dataset, data_dir)
    except DataNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_DATA

    epochs = args.epochs
    if epochs is None:
        epochs = PAPER_EPOCHS[args.dataset] if args.paper_epochs else DEFAULT_EPOCHS[args.dataset]
    base = TrainConfig(epochs=epochs, batch_size=args.batch_size, seed=args.seed,
                       weight_decay=args.weight_decay)
    log = None if args.quiet else print

    if args.lr is not None and args.optimizer is not None:
        config = TrainConfig.from_dict({**base.to_dict(), "optimizer": args.optimizer,
                                        "initial_lr": args.lr})
    else:
        grid = {"optimizer": ["sgd_momentum", "adam"], "lr": [0.1, 0.01, 0.001]}
        if args.optimizer is not None:
            grid["optimizer"] = [args.optimizer]
        if args.lr is not None:
            grid["lr"] = [args.lr]
        if log:
            log("hyperparameter search (short runs)...")
        config = hyperparameter_search(spec, train_ds, test_ds, grid=grid,
                                       base_config=base, log=log)
        config = TrainConfig.from_dict({**config.to_dict(), "epochs": epochs})

    model, result = run_training(spec, train_ds, test_ds, config, log=log)
    registry = Registry(args.registry or _default_registry())
    record = RunRecord.from_result(args.dataset, spec, config, result)
    registry.append(record)

    print(f"run {record.run_id} [{record.status}] method={record.method} "
          f"W{record.weight_bits}A{record.act_bits} "
          f"best top1={record.best_top1:.2f}% top5={record.best_top5:.2f}%")
    if args.checkpoint_out:
        save_checkpoint(args.checkpoint_out, spec, config, model,
                        optimizer_state=result.optimizer_state,
                        history=result.history, status=result.status)
        print(f"checkpoint written to {args.checkpoint_out}")
    return EXIT_OK


def _cmd_sweep(args):
    spec = SweepSpec.from_file(args.spec)
    data_dir = args.data_dir or _default_data_dir()
    registry = args.registry or _default_registry()
    try:
        run_sweep(spec, data_dir, registry, jobs=args.jobs)
    except DataNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_DATA
    return EXIT_OK


def _cmd_eval(args):
    data_dir = args.data_dir or _default_data_dir()
    try:
        _, test_ds = load_dataset(args.dataset, data_dir)
    except DataNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_DATA
    model, _, payload = model_from_checkpoint(args.checkpoint)
    top1 = evaluate_topk(model, test_ds, 1)
    top5 = evaluate_topk(model, test_ds, 5)
    print(f"top1={top1:.2f}% top5={top5:.2f}%")
    return EXIT_OK


def _cmd_export_table(args):
    registry = Registry(args.registry or _default_registry())
    text = export_table(registry.load(), args.dataset, args.model, out_prefix=args.out)
    print(text, end="")
    return EXIT_OK


def _cmd_export_plots(args):
    registry = Registry(args.registry or _default_registry())
    written = export_plots(registry.load(), args.dataset, args.model, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def _cmd_export_binary(args):
    model, spec, _ = model_from_checkpoint(args.checkpoint)
    bm = export_binary_model(model)
    save_binary_model(bm, args.out)
    packed_bits, float_bits = bm.packed_payload_bits()
    print(f"binary model written to {args.out} "
          f"(packed payload {packed_bits // 8} bytes, {float_bits // 8} bytes in float)")
    if args.dataset:
        data_dir = args.data_dir or _default_data_dir()
        try:
            _, test_ds = load_dataset(args.dataset, data_dir)
        except DataNotFoundError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_NO_DATA
        print(f"packed-model top1={evaluate_binary_topk(bm, test_ds, 1):.2f}%")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "eval": _cmd_eval,
    "export-table": _cmd_export_table,
    "export-plots": _cmd_export_plots,
    "export-binary": _cmd_export_binary,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, SearchFailedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
