"""Dense tensors with a minimal reverse-mode gradient tape.

Values are numpy arrays (float32 for training, float64 for oracle-grade
checks).  A Tape records a DAG of primitive ops in topological order;
backward() walks it once and accumulates vector-Jacobian products into
every node, so tests can inspect gradients at intermediate nodes as well
as at parameter leaves.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


def _shape_err(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes " + " vs ".join(str(s) for s in shapes))


class Node:
    """One tape entry: a value plus VJP closures toward its parents."""

    __slots__ = ("tape", "idx", "value", "parents", "vjps", "is_param", "name")

    def __init__(self, tape, idx, value, parents=(), vjps=(), is_param=False, name=None):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.is_param = is_param
        self.name = name

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.relu_signs: list[np.ndarray] = []  # per relu op, sign of its input
        self.relu_margins: list[float] = []  # per relu op, min |input|
        self._grads: list | None = None

    # -- node construction -------------------------------------------------

    def _record(self, value, parents=(), vjps=(), is_param=False, name=None):
        node = Node(self, len(self.nodes), np.asarray(value, dtype=self.dtype),
                    tuple(parents), tuple(vjps), is_param, name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        if any(n.is_param and n.name == name for n in self.nodes):
            raise ValueError(f"duplicate parameter name {name!r}")
        return self._record(value, is_param=True, name=name)

    def constant(self, value) -> Node:
        return self._record(value)

    # -- primitives ----------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise _shape_err("add", a.shape, b.shape)
        return self._record(a.value + b.value, (a, b), (lambda g: g, lambda g: g))

    def mul(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise _shape_err("mul", a.shape, b.shape)
        return self._record(a.value * b.value,
                            (a, b), (lambda g: g * b.value, lambda g: g * a.value))

    def affine(self, a: Node, mul=1.0, add=0.0) -> Node:
        mul = self.dtype.type(mul)
        return self._record(a.value * mul + self.dtype.type(add), (a,), (lambda g: g * mul,))

    def scale(self, a: Node, c) -> Node:
        return self.affine(a, mul=c)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise _shape_err("matmul", a.shape, b.shape)
        return self._record(a.value @ b.value, (a, b),
                            (lambda g: g @ b.value.T, lambda g: a.value.T @ g))

    def matvec(self, a: Node, x: Node) -> Node:
        if a.value.ndim != 2 or x.value.ndim != 1 or a.shape[1] != x.shape[0]:
            raise _shape_err("matvec", a.shape, x.shape)
        return self._record(a.value @ x.value, (a, x),
                            (lambda g: np.outer(g, x.value), lambda g: a.value.T @ g))

    def dot(self, x: Node, y: Node) -> Node:
        if x.value.ndim != 1 or x.shape != y.shape:
            raise _shape_err("dot", x.shape, y.shape)
        return self._record(x.value @ y.value, (x, y),
                            (lambda g: g * y.value, lambda g: g * x.value))

    def dot_rows(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or a.shape != b.shape:
            raise _shape_err("dot_rows", a.shape, b.shape)
        return self._record((a.value * b.value).sum(axis=1), (a, b),
                            (lambda g: g[:, None] * b.value, lambda g: g[:, None] * a.value))

    def concat(self, parts: list[Node]) -> Node:
        """Concatenate along axis 0; 0-d inputs are promoted to length-1."""
        vals = [p.value.reshape(1) if p.value.ndim == 0 else p.value for p in parts]
        nd = vals[0].ndim
        if any(v.ndim != nd for v in vals):
            raise _shape_err("concat", *[p.shape for p in parts])
        sizes = [v.shape[0] for v in vals]
        offs = np.cumsum([0] + sizes)

        def make_vjp(i):
            scalar = parts[i].value.ndim == 0
            lo, hi = offs[i], offs[i + 1]
            return lambda g: g[lo:hi].reshape(()) if scalar else g[lo:hi]

        return self._record(np.concatenate(vals, axis=0), tuple(parts),
                            tuple(make_vjp(i) for i in range(len(parts))))

    def reshape(self, a: Node, shape) -> Node:
        old = a.shape
        return self._record(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))

    def relu(self, a: Node) -> Node:
        self.relu_signs.append(np.sign(a.value))
        self.relu_margins.append(float(np.abs(a.value).min()) if a.value.size else np.inf)
        mask = a.value > 0
        return self._record(a.value * mask, (a,), (lambda g: g * mask,))

    def sigmoid(self, a: Node) -> Node:
        s = _sigmoid(a.value)
        return self._record(s, (a,), (lambda g: g * s * (1 - s),))

    def tanh(self, a: Node) -> Node:
        t = np.tanh(a.value)
        return self._record(t, (a,), (lambda g: g * (1 - t * t),))

    def conv2d(self, x: Node, w: Node, b: Node) -> Node:
        """Valid 2-d convolution, stride 1, one input channel, bias per filter.

        x: (H, W); w: (F, kh, kw); b: (F,) -> (F, H-kh+1, W-kw+1).
        """
        if x.value.ndim != 2 or w.value.ndim != 3 or b.value.ndim != 1 \
                or w.shape[0] != b.shape[0]:
            raise _shape_err("conv2d", x.shape, w.shape, b.shape)
        kh, kw = w.shape[1], w.shape[2]
        if x.shape[0] < kh or x.shape[1] < kw:
            raise _shape_err("conv2d", x.shape, w.shape)
        windows = np.lib.stride_tricks.sliding_window_view(x.value, (kh, kw))
        out = np.einsum("ijkl,fkl->fij", windows, w.value) + b.value[:, None, None]

        def vjp_x(g):
            pad = ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1))
            gp = np.pad(g, pad)
            gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
            return np.einsum("fijkl,fkl->ij", gwin, w.value[:, ::-1, ::-1])

        def vjp_w(g):
            return np.einsum("ijkl,fij->fkl", windows, g)

        return self._record(out, (x, w, b),
                            (vjp_x, vjp_w, lambda g: g.sum(axis=(1, 2))))

    def embedding_lookup(self, table: Node, ids) -> Node:
        """Gather rows of a 2-d node; backward scatter-adds into the table."""
        ids = np.asarray(ids, dtype=np.int64)
        if table.value.ndim != 2 or ids.ndim != 1:
            raise _shape_err("embedding_lookup", table.shape, ids.shape)

        def vjp(g):
            gt = np.zeros_like(table.value)
            np.add.at(gt, ids, g)
            return gt

        return self._record(table.value[ids], (table,), (vjp,))

    def gather(self, x: Node, idxs) -> Node:
        idxs = np.asarray(idxs, dtype=np.int64)
        if x.value.ndim != 1:
            raise _shape_err("gather", x.shape)

        def vjp(g):
            gx = np.zeros_like(x.value)
            np.add.at(gx, idxs, g)
            return gx

        return self._record(x.value[idxs], (x,), (vjp,))

    def logsumexp(self, x: Node) -> Node:
        """Stable log-sum-exp of a vector, via max subtraction."""
        if x.value.ndim != 1:
            raise _shape_err("logsumexp", x.shape)
        m = x.value.max()
        e = np.exp(x.value - m)
        s = e.sum()
        soft = e / s
        return self._record(m + np.log(s), (x,), (lambda g: g * soft,))

    def softmax_rows(self, x: Node) -> Node:
        if x.value.ndim != 2:
            raise _shape_err("softmax_rows", x.shape)
        z = x.value - x.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)

        def vjp(g):
            return s * (g - (g * s).sum(axis=1, keepdims=True))

        return self._record(s, (x,), (vjp,))

    def softmax_cross_rows(self, logits: Node, targets) -> Node:
        """Per-row softmax cross-entropy against integer target columns."""
        targets = np.asarray(targets, dtype=np.int64)
        if logits.value.ndim != 2 or targets.shape != (logits.shape[0],):
            raise _shape_err("softmax_cross_rows", logits.shape, targets.shape)
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(logits.shape[0])
        out = lse - z[rows, targets]
        soft = np.exp(z - lse[:, None])

        def vjp(g):
            gl = soft * g[:, None]
            gl[rows, targets] -= g
            return gl

        return self._record(out, (logits,), (vjp,))

    def sum(self, x: Node) -> Node:
        return self._record(x.value.sum(), (x,), (lambda g: g * np.ones_like(x.value),))

    def mean(self, x: Node) -> Node:
        n = x.value.size
        return self._record(x.value.mean(), (x,),
                            (lambda g: (g / n) * np.ones_like(x.value),))

    def bce_with_logits(self, logits: Node, targets) -> Node:
        """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
        y = np.asarray(targets, dtype=self.dtype)
        if logits.value.ndim != 1 or y.shape != logits.value.shape:
            raise _shape_err("bce_with_logits", logits.shape, y.shape)
        z = logits.value
        per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        n = z.size

        def vjp(g):
            return g * (_sigmoid(z) - y) / n

        return self._record(per.mean(), (logits,), (vjp,))

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Accumulate gradients of a scalar loss into every reachable node.

        Returns a map of parameter name -> gradient; parameters with no
        path to the loss get a zero gradient of their own shape.
        """
        if loss.value.ndim != 0:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.idx] = np.ones((), dtype=self.dtype)
        for node in reversed(self.nodes[: loss.idx + 1]):
            g = grads[node.idx]
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if grads[parent.idx] is None:
                    grads[parent.idx] = np.array(contrib, dtype=self.dtype, copy=True)
                else:
                    grads[parent.idx] += contrib
        self._grads = grads
        out = {}
        for node in self.nodes:
            if node.is_param:
                g = grads[node.idx]
                out[node.name] = np.zeros_like(node.value) if g is None else g
        return out

    def grad(self, node: Node) -> np.ndarray:
        """Gradient accumulated at any node by the last backward()."""
        if self._grads is None:
            raise RuntimeError("grad() before backward()")
        g = self._grads[node.idx]
        return np.zeros_like(node.value) if g is None else g


class BoundParams:
    """Lazily binds a {name: array} store as parameter nodes of one tape.

    Indexing returns the tape node for a stored array, creating it on
    first use so each parameter appears exactly once per tape.
    """

    def __init__(self, tape: Tape, store: dict[str, np.ndarray]):
        self.tape = tape
        self.store = store
        self._nodes: dict[str, Node] = {}

    def __getitem__(self, name: str) -> Node:
        if name not in self._nodes:
            self._nodes[name] = self.tape.param(name, self.store[name])
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self.store


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Stable elementwise sigmoid on a plain array (no tape)."""
    return _sigmoid(np.asarray(x))


# -- finite differences ------------------------------------------------------


def finite_diff_check(f, params: dict[str, np.ndarray], eps: float = 1e-3,
                      n_samples: int | None = None, rng=None) -> float:
    """Max relative error between tape gradients and central differences.

    f maps a {name: array} dict to (tape, loss_node); it is re-invoked for
    each perturbed evaluation.  Coordinates whose +/-eps evaluations land
    on different sides of a relu kink (the recorded input signs differ)
    are excluded: the subgradient there is a policy choice, not an error.
    Errors are measured as |g_fd - g_tape| / max(1, |g_fd|, |g_tape|).
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    tape, loss = f(params)
    tape_grads = tape.backward(loss)

    coords = [(name, i) for name, v in params.items() for i in range(v.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in picks]

    def eval_at(name, i, delta):
        bumped = {k: v.copy() for k, v in params.items()}
        bumped[name].flat[i] += delta
        t, l = f(bumped)
        return float(l.value), t.relu_signs

    worst = 0.0
    for name, i in coords:
        fp, signs_p = eval_at(name, i, +eps)
        fm, signs_m = eval_at(name, i, -eps)
        if any(not np.array_equal(a, b) for a, b in zip(signs_p, signs_m)):
            continue  # crossed a kink
        g_fd = (fp - fm) / (2 * eps)
        # parameters never bound to the tape are disconnected: grad 0
        g_tape = float(tape_grads[name].flat[i]) if name in tape_grads else 0.0
        err = abs(g_fd - g_tape) / max(1.0, abs(g_fd), abs(g_tape))
        worst = max(worst, err)
    return worst


# -- tensor checkpoint codec ---------------------------------------------------
#
# Each record: little-endian uint32 rank, uint32 dims..., then the raw
# float32 payload.  A separate JSON manifest stores name -> byte offset.


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> dict[str, dict]:
    """Write named float32 tensors in name order; returns {name: {offset, shape}}.

    Name-sorted layout keeps the byte stream independent of dict
    insertion order, so equal tensor sets give equal files.
    """
    index = {}
    with open(path, "wb") as fh:
        for name in sorted(tensors):
            arr = tensors[name]
            arr = np.ascontiguousarray(arr, dtype="<f4")
            index[name] = {"offset": fh.tell(), "shape": list(arr.shape)}
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return index


def read_tensors(path: str | Path, index: dict[str, dict]) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as fh:
        for name, entry in index.items():
            fh.seek(entry["offset"])
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            if list(dims) != list(entry["shape"]):
                raise ValueError(f"tensor {name!r}: header {dims} != manifest {entry['shape']}")
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4")
            out[name] = data.reshape(dims).astype(np.float32)
    return out


def write_tensor_manifest(path: str | Path, index: dict, extra: dict | None = None) -> None:
    doc = {"tensors": index}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
