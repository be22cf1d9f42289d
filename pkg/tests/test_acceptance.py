"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL
line. Criteria 1-4 train LeNet-5 on the real MNIST files and skip with
retrieval instructions when the files are absent (dataset download is out
of band). Completed runs are cached in an acceptance registry keyed by the
full config hash, so re-running the suite does no duplicate training.
Criterion 5 is the extended CIFAR-10 reproduction and is opt-in via
QCNN_RUN_EXTENDED=1.
"""

import os
from contextlib import contextmanager

import numpy as np
import pytest

import qcnn
from qcnn import binary, ops
from qcnn.layers import QuantConv2d
from qcnn.models import ModelSpec
from qcnn.quantizers import (
    QuantConfig,
    QuantMethod,
    TernaryScales,
    dorefa_activation_quantize,
    dorefa_weight_quantize,
    linear_quantize,
    sign_binarize,
    ttq_scale_gradients,
    ttq_ternarize,
    twn_ternarize,
    xnor_weight_quantize,
)
from qcnn.registry import Registry, RunRecord, code_version, compute_run_id
from qcnn.tensor import Tensor, get_graph, no_grad
from qcnn.train import TrainConfig, run_training

from oracles import (
    avgpool_loops,
    conv2d_loops,
    finite_difference,
    grad_close,
    linear_loops,
    maxpool_loops,
    well_separated,
)

_REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
ACCEPT_REGISTRY = os.environ.get(
    "QCNN_ACCEPT_REGISTRY",
    os.path.join(_REPO_ROOT, "results", "acceptance-registry.jsonl"),
)


@contextmanager
def criterion(n, desc):
    try:
        yield
    except Exception:
        print(f"ACCEPTANCE {n} FAIL: {desc}")
        raise
    print(f"ACCEPTANCE {n} PASS: {desc}")


def _cached_run(dataset_name, train_ds, test_ds, model, quant, config):
    """Train once per (config, seed, code version); reuse completed runs."""
    spec = ModelSpec(model, quant=quant)
    quantized = quant is not None and not quant.is_full_precision
    run_id = compute_run_id(dataset_name, model,
                            quant.to_dict() if quant else None,
                            config.to_dict(quantized=quantized), code_version())
    registry = Registry(ACCEPT_REGISTRY)
    for r in registry.load():
        if r.run_id == run_id and r.status in ("completed", "dnc", "diverged"):
            return r
    _, result = run_training(spec, train_ds, test_ds, config)
    record = RunRecord.from_result(dataset_name, spec, config, result)
    registry.append(record)
    return record


def _mnist_cfg(epochs, seed=0):
    return TrainConfig(optimizer="adam", initial_lr=1e-3, epochs=epochs,
                       batch_size=128, lr_schedule="step", seed=seed, augment=False)


def _mnist_run(data, method, w, a, epochs, seed=0):
    train_ds, test_ds = data
    quant = None if method is None else QuantConfig(QuantMethod.parse(method), w, a)
    return _cached_run("mnist", train_ds, test_ds, "lenet5", quant,
                       _mnist_cfg(epochs, seed))


# ---------------------------------------------------------------------------
# 1-4: MNIST / LeNet-5 accuracy reproduction (real data required)
# ---------------------------------------------------------------------------


def test_criterion_1_mnist_fp_baseline(mnist_or_skip):
    with criterion(1, "MNIST FP32 LeNet-5 baseline top1 >= 99.0% within 30 epochs"):
        rec = _mnist_run(mnist_or_skip, None, 32, 32, epochs=15)
        assert rec.status == "completed"
        assert rec.best_top1 >= 99.0, f"baseline top1 {rec.best_top1:.2f}%"


def test_criterion_2_dorefa_w1a32(mnist_or_skip):
    with criterion(2, "DoReFa W1A32 top1 >= 98.8% and within 0.7% of own baseline"):
        fp = _mnist_run(mnist_or_skip, None, 32, 32, epochs=15)
        rec = _mnist_run(mnist_or_skip, "dorefa", 1, 32, epochs=20)
        assert rec.status == "completed"
        assert rec.best_top1 >= 98.8, f"W1A32 top1 {rec.best_top1:.2f}%"
        assert rec.best_top1 >= fp.best_top1 - 0.7, (
            f"gap {fp.best_top1 - rec.best_top1:.2f}% exceeds 0.7%"
        )


def test_criterion_3_binarized_accuracy(mnist_or_skip):
    with criterion(3, "QNN W1A1 top1 >= 97.5%; DoReFa W1A2 top1 >= 98.5%"):
        qnn = _mnist_run(mnist_or_skip, "qnn", 1, 1, epochs=30)
        assert qnn.status == "completed"
        assert qnn.best_top1 >= 97.5, f"QNN W1A1 top1 {qnn.best_top1:.2f}%"
        dorefa = _mnist_run(mnist_or_skip, "dorefa", 1, 2, epochs=25)
        assert dorefa.status == "completed"
        assert dorefa.best_top1 >= 98.5, f"DoReFa W1A2 top1 {dorefa.best_top1:.2f}%"


def test_criterion_4_activation_bits_ordering(mnist_or_skip):
    with criterion(4, "per method: top1(WxA1) <= top1(WxA2) + 0.3% for W in {1,2}"):
        for method in ("qnn", "dorefa"):
            runs = {}
            for w, a in ((1, 1), (1, 2), (2, 1), (2, 2)):
                epochs = 30 if method == "qnn" and (w, a) == (1, 1) else 25
                runs[(w, a)] = _mnist_run(mnist_or_skip, method, w, a, epochs=epochs)
            for w in (1, 2):
                lo = runs[(w, 1)].best_top1
                hi = runs[(w, 2)].best_top1
                assert lo <= hi + 0.3, (
                    f"{method}: W{w}A1 {lo:.2f}% vs W{w}A2 {hi:.2f}% (+0.3% margin)"
                )


# ---------------------------------------------------------------------------
# 5: extended CIFAR-10 reproduction (not CI-gated)
# ---------------------------------------------------------------------------


@pytest.mark.skipif(
    not os.environ.get("QCNN_RUN_EXTENDED"),
    reason="extended hours-scale CIFAR-10 reproduction; set QCNN_RUN_EXTENDED=1",
)
def test_criterion_5_cifar_resnet20(cifar10_or_skip):
    with criterion(5, "CIFAR-10 ResNet-20 FP >= 88% at 60 epochs; DoReFa W1A32 within 2.5%"):
        train_ds, test_ds = cifar10_or_skip
        cfg = TrainConfig(optimizer="sgd_momentum", initial_lr=0.1, epochs=60,
                          batch_size=128, lr_schedule="step", seed=0, augment=True)
        fp = _cached_run("cifar10", train_ds, test_ds, "resnet20", None, cfg)
        assert fp.status == "completed"
        assert fp.best_top1 >= 88.0, f"FP top1 {fp.best_top1:.2f}%"
        qcfg = TrainConfig(optimizer="adam", initial_lr=1e-3, epochs=60,
                           batch_size=128, lr_schedule="step", seed=0, augment=True)
        quant = QuantConfig(QuantMethod.DOREFA, 1, 32)
        rec = _cached_run("cifar10", train_ds, test_ds, "resnet20", quant, qcfg)
        assert rec.status == "completed"
        assert rec.best_top1 >= fp.best_top1 - 2.5, (
            f"gap {fp.best_top1 - rec.best_top1:.2f}% exceeds 2.5%"
        )


# ---------------------------------------------------------------------------
# 6: quantizer property suite (seconds-scale, data-free)
# ---------------------------------------------------------------------------


def test_criterion_6_quantizer_properties():
    rng = np.random.default_rng(606)
    with criterion(6, "scale optimality, value sets, idempotence, ternary regions, "
                      "ttq gradients"):
        # optimal binary scale: brute force over 1000 random small filters
        grid = np.arange(0.0, 2.0001, 0.01)
        for _ in range(1000):
            n = int(rng.integers(2, 8))
            w = rng.uniform(-1, 1, (1, n)).astype(np.float32)
            b, alpha = xnor_weight_quantize(w)
            losses = [float(np.linalg.norm(w - a * b)) for a in grid]
            best = grid[int(np.argmin(losses))]
            assert abs(alpha[0] - best) <= 0.01 + 1e-6

        # value-set cardinality
        x = rng.normal(size=(4, 400)).astype(np.float32)
        assert len(np.unique(sign_binarize(x))) <= 2
        wt, _ = twn_ternarize(x)
        assert len(np.unique(wt)) <= 3
        assert len(np.unique(ttq_ternarize(x, TernaryScales(0.5, 0.7), 0.05))) <= 3
        for bits in (2, 3, 4, 8):
            assert len(np.unique(linear_quantize(x, bits))) <= 2**bits
            assert len(np.unique(dorefa_activation_quantize(x, bits))) <= 2**bits
            assert len(np.unique(dorefa_weight_quantize(x, bits))) <= 2**bits

        # idempotence on each quantizer's own output (the multi-bit tanh
        # weight map renormalizes and is excluded by construction)
        s = sign_binarize(x)
        assert np.array_equal(sign_binarize(s), s)
        for bits in (2, 4, 8):
            q1 = linear_quantize(x, bits)
            assert np.allclose(linear_quantize(q1, bits), q1, atol=1e-7)
            a1 = dorefa_activation_quantize(x, bits)
            assert np.allclose(dorefa_activation_quantize(a1, bits), a1, atol=1e-7)
        d1 = dorefa_weight_quantize(x, 1)
        assert np.allclose(dorefa_weight_quantize(d1, 1), d1, atol=1e-7)
        from qcnn.quantizers import twn_effective_weight

        t1 = twn_effective_weight(x)
        assert np.allclose(twn_effective_weight(t1), t1, atol=1e-6)

        # ternary region correctness against randomized thresholds
        for _ in range(200):
            w = rng.normal(size=(3, 11)).astype(np.float32)
            wt, scales = twn_ternarize(w)
            for c in range(3):
                d = scales.delta[c]
                assert np.all(wt[c][w[c] > d] == 1.0)
                assert np.all(wt[c][w[c] < -d] == -1.0)
                assert np.all(wt[c][np.abs(w[c]) <= d] == 0.0)

        # learned-scale gradients against central finite differences
        for _ in range(20):
            w = rng.normal(size=128).astype(np.float32)
            up = rng.normal(size=128).astype(np.float32)
            p0, n0 = 0.9, 0.6
            delta = 0.05 * float(np.abs(w).max())
            d_pos, d_neg, _ = ttq_scale_gradients(up, w, delta, TernaryScales(p0, n0))

            def loss(p, n):
                out = ttq_ternarize(w, TernaryScales(p, n), 0.05)
                return float((out * up).sum(dtype=np.float64))

            h = 1e-3
            fd_p = (loss(p0 + h, n0) - loss(p0 - h, n0)) / (2 * h)
            fd_n = (loss(p0, n0 + h) - loss(p0, n0 - h)) / (2 * h)
            assert abs(d_pos - fd_p) <= 1e-2 * max(1.0, abs(fd_p))
            assert abs(d_neg - fd_n) <= 1e-2 * max(1.0, abs(fd_n))


# ---------------------------------------------------------------------------
# 7: autodiff suite (data-free)
# ---------------------------------------------------------------------------


def test_criterion_7_autodiff_against_oracles():
    rng = np.random.default_rng(707)
    with criterion(7, "gradients match finite differences (1e-2 rel, 100 cases); "
                      "forwards match loop oracles (1e-5)"):
        # forward oracles
        for _ in range(10):
            x = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
            w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
            b = rng.normal(size=3).astype(np.float32)
            got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
            assert np.allclose(got.data, conv2d_loops(x, w, b, 1, 1), atol=1e-5)
            xf = rng.normal(size=(4, 10)).astype(np.float32)
            wf = rng.normal(size=(3, 10)).astype(np.float32)
            assert np.allclose(ops.linear(Tensor(xf), Tensor(wf)).data,
                               linear_loops(xf, wf), atol=1e-5)
            xp = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
            assert np.allclose(ops.pool2d(Tensor(xp), "max", 2, 2).data,
                               maxpool_loops(xp, 2, 2), atol=1e-5)
            assert np.allclose(ops.pool2d(Tensor(xp), "avg", 2, 2).data,
                               avgpool_loops(xp, 2, 2), atol=1e-5)

        # gradient oracles: 100 random cases across the op set
        cases = 0
        graph = get_graph()
        while cases < 100:
            graph.clear()
            kind = ("conv", "linear", "maxpool", "avgpool", "relu", "hardtanh",
                    "batchnorm", "xent", "ste")[cases % 9]
            if kind == "conv":
                x = Tensor(rng.uniform(-1, 1, (2, 2, 5, 5)).astype(np.float32), True)
                w = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)).astype(np.float32), True)
                r = rng.normal(size=(2, 2, 5, 5)).astype(np.float32)
                make = lambda: ops.tsum(ops.mul(ops.conv2d(x, w, None, 1, 1), Tensor(r)))
                params = [x, w]
            elif kind == "linear":
                x = Tensor(rng.uniform(-1, 1, (3, 4)).astype(np.float32), True)
                w = Tensor(rng.uniform(-1, 1, (2, 4)).astype(np.float32), True)
                r = rng.normal(size=(3, 2)).astype(np.float32)
                make = lambda: ops.tsum(ops.mul(ops.linear(x, w), Tensor(r)))
                params = [x, w]
            elif kind in ("maxpool", "avgpool"):
                # well-separated values: +-h must not flip any window argmax
                x = Tensor(well_separated(rng, (2, 2, 4, 4)), True)
                r = rng.normal(size=(2, 2, 2, 2)).astype(np.float32)
                op = "max" if kind == "maxpool" else "avg"
                make = lambda: ops.tsum(ops.mul(ops.pool2d(x, op, 2, 2), Tensor(r)))
                params = [x]
            elif kind in ("relu", "hardtanh"):
                v = rng.uniform(-2, 2, (3, 4)).astype(np.float32)
                v[np.abs(np.abs(v) - 1.0) < 0.05] = 0.5
                v[np.abs(v) < 0.05] = 0.5
                x = Tensor(v, True)
                r = rng.normal(size=(3, 4)).astype(np.float32)
                make = lambda: ops.tsum(ops.mul(ops.nonlinearity(x, kind), Tensor(r)))
                params = [x]
            elif kind == "batchnorm":
                x = Tensor(rng.uniform(-1, 1, (4, 3, 2, 2)).astype(np.float32), True)
                g = Tensor(rng.uniform(0.5, 1.5, 3).astype(np.float32), True)
                bt = Tensor(rng.uniform(-0.5, 0.5, 3).astype(np.float32), True)
                r = rng.normal(size=(4, 3, 2, 2)).astype(np.float32)

                def make():
                    rm, rv = np.zeros(3, np.float64), np.ones(3, np.float64)
                    return ops.tsum(ops.mul(
                        ops.batchnorm(x, g, bt, rm, rv, 1e-5, 0.1, True), Tensor(r)))

                params = [x, g, bt]
            elif kind == "xent":
                x = Tensor(rng.uniform(-1, 1, (4, 5)).astype(np.float32), True)
                labels = rng.integers(0, 5, 4)
                make = lambda: ops.softmax_cross_entropy(x, labels)
                params = [x]
            else:  # ste: gradient equals the window indicator
                v = rng.uniform(-2, 2, 32).astype(np.float32)
                v[np.abs(np.abs(v) - 1.0) < 0.05] = 0.5
                x = Tensor(v, True)
                r = rng.normal(size=32).astype(np.float32)
                make = lambda: ops.tsum(ops.mul(
                    ops.ste_identity(x, sign_binarize, -1.0, 1.0), Tensor(r)))
                loss = make()
                loss.backward()
                expected = np.where((x.data >= -1) & (x.data <= 1), r, 0.0)
                assert np.allclose(x.grad, expected, atol=1e-6)
                cases += 1
                continue

            loss = make()
            loss.backward()
            for p in params:
                analytic = p.grad.copy()

                def f():
                    with no_grad():
                        return make().item()

                fd = finite_difference(f, p.data)
                assert grad_close(analytic, fd), f"{kind} gradient mismatch"
                p.zero_grad()
            cases += 1


# ---------------------------------------------------------------------------
# 8: bit-packed equivalence (data-free; trains on the offline digit corpus)
# ---------------------------------------------------------------------------


def test_criterion_8_bitpacked_equivalence(digits28):
    rng = np.random.default_rng(808)
    with criterion(8, "xnor dot exact on 10000 vectors; exported model top1 within "
                      "0.05%; packed payload exactly 1/32"):
        for _ in range(10000):
            n = int(rng.integers(1, 201))
            a = np.where(rng.random(n) < 0.5, -1.0, 1.0).astype(np.float32)
            b = np.where(rng.random(n) < 0.5, -1.0, 1.0).astype(np.float32)
            expect = int(np.dot(a.astype(np.float64), b.astype(np.float64)))
            assert binary.xnor_popcount_dot(binary.pack(a), binary.pack(b)) == expect

        # train a small W1A1 model, export, compare test accuracy
        train_ds, test_ds = digits28
        spec = ModelSpec("lenet5", quant=QuantConfig(QuantMethod.XNORNET, 1, 1))
        cfg = TrainConfig(optimizer="adam", initial_lr=1e-3, epochs=8,
                          batch_size=64, lr_schedule="constant", seed=0, augment=False)
        model, result = run_training(spec, train_ds, test_ds, cfg)
        assert result.status == "completed"
        from qcnn.train import evaluate_topk

        float_top1 = evaluate_topk(model, test_ds, 1)
        bm = binary.export_binary_model(model)  # default export folds BN+sign
        packed_top1 = binary.evaluate_binary_topk(bm, test_ds, 1)
        assert abs(packed_top1 - float_top1) <= 0.05, (
            f"packed {packed_top1:.2f}% vs float {float_top1:.2f}%"
        )
        # the unfolded export must agree exactly, logit for logit
        bm_exact = binary.export_binary_model(model, fold_bn=False)
        with no_grad():
            ref = model.forward(Tensor(test_ds.images[:64]), training=False).data
        assert np.array_equal(bm_exact.forward(test_ds.images[:64]), ref)

        packed_bits, float_bits = bm.packed_payload_bits()
        quantized_layers = [l for l in model.quant_layers() if l.weight_quant_active]
        assert packed_bits == sum(l.weight.size for l in quantized_layers)
        assert packed_bits * 32 == float_bits


# ---------------------------------------------------------------------------
# 9: first/last-layer study harness
# ---------------------------------------------------------------------------


def _tiny_smoke_data(request):
    """MNIST tiny subset when available, else the offline digit corpus."""
    try:
        from qcnn.data import load_mnist

        data_dir = os.environ.get("QCNN_DATA_DIR", os.path.join(os.getcwd(), "data"))
        train_ds, test_ds = load_mnist(data_dir)
        label = "mnist"
    except Exception:
        train_ds, test_ds = request.getfixturevalue("digits28")
        label = "offline digit corpus (MNIST files not present)"
    return train_ds.subset(200, seed=0), test_ds.subset(100, seed=0), label


def test_criterion_9_first_last_layer_study(request, rng):
    with criterion(9, "all four first/last policy arms build and train; exempt "
                      "layers are bit-identical to full precision"):
        train_sub, test_sub, label = _tiny_smoke_data(request)
        print(f"  (smoke data: {label})")
        arms = [(False, False), (True, False), (False, True), (True, True)]
        for method in ("qnn", "dorefa"):
            for first, last in arms:
                quant = QuantConfig(QuantMethod.parse(method), 2, 2,
                                    quantize_first_layer=first,
                                    quantize_last_layer=last)
                spec = ModelSpec("lenet5", quant=quant)
                cfg = TrainConfig(optimizer="adam", initial_lr=1e-3, epochs=2,
                                  batch_size=50, lr_schedule="constant",
                                  seed=1, augment=False)
                _, result = run_training(spec, train_sub, test_sub, cfg)
                assert result.status == "completed"
                losses = [m.train_loss for m in result.history]
                assert losses[-1] < losses[0]

        # exemption identity: an exempt first layer computes exactly the
        # full-precision forward
        cfg_exempt = QuantConfig(QuantMethod.QNN, 1, 1, quantize_first_layer=False)
        conv = QuantConv2d(1, 6, 5, quant=cfg_exempt, position="first")
        conv.weight.data[...] = rng.normal(0, 0.3, conv.weight.shape).astype(np.float32)
        conv.bias.data[...] = rng.normal(0, 0.1, 6).astype(np.float32)
        plain = QuantConv2d(1, 6, 5, quant=None)
        plain.weight.data[...] = conv.weight.data
        plain.bias.data[...] = conv.bias.data
        x = Tensor(rng.normal(size=(4, 1, 28, 28)).astype(np.float32))
        assert np.array_equal(conv(x).data, plain(x).data)
