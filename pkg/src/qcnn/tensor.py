"""Dense float32 tensor with a tape-recorded reverse-mode gradient.

The tape (Graph) is thread-local: each training run owns the graph of its
thread. Forward ops append nodes in execution order; backward walks the
node list in reverse, so inputs always precede their consumers.
"""

import threading

import numpy as np

from .errors import ContractError


class Tensor:
    """N-dimensional float32 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "_grad", "_produced")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._produced = False  # set when an op creates this tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def grad(self):
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        if self._grad is not None:
            self._grad.fill(0.0)

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flags})"


class Node:
    """One recorded operation: inputs, output, and its gradient closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-ordered operation tape."""

    __slots__ = ("nodes", "recording")

    def __init__(self):
        self.nodes = []
        self.recording = True

    def clear(self):
        self.nodes.clear()


_local = threading.local()


def get_graph():
    g = getattr(_local, "graph", None)
    if g is None:
        g = Graph()
        _local.graph = g
    return g


class no_grad:
    """Context manager that suspends tape recording on this thread."""

    def __enter__(self):
        g = get_graph()
        self._prev = g.recording
        g.recording = False
        return self

    def __exit__(self, *exc):
        get_graph().recording = self._prev
        return False


def record(op, inputs, out_data, backward_fn):
    """Create the op's output tensor, taping it when gradients are needed."""
    out = Tensor(out_data)
    g = get_graph()
    needs = g.recording and any(t.requires_grad for t in inputs)
    if needs:
        out.requires_grad = True
        out._produced = True
        g.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss):
    """Accumulate d(loss)/d(tensor) into every reachable leaf's grad buffer.

    Repeated calls without zero_grad() keep accumulating. An empty tape is
    a no-op.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    g = get_graph()
    if not g.nodes:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(g.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        gins = node.backward_fn(gout)
        for t, gi in zip(node.inputs, gins):
            if gi is None or not t.requires_grad:
                continue
            if t._produced:
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
            else:
                if t._grad is None:
                    t._grad = np.zeros_like(t.data)
                t._grad += gi
