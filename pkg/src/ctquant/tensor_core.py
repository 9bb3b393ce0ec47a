"""Minimal dense 2D tensor library with reverse-mode differentiation.

Values are float64 numpy arrays of shape (rows, cols). Each primitive
records itself on a Tape; Tape.backward replays the records in reverse and
accumulates gradients. Small and deterministic by design: the fusion
network needs nothing larger.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFinite, NotScalarLoss, ShapeMismatch


class Tensor2:
    """A tape-tracked matrix. Leaf tensors (parameters) carry requires_grad."""

    __slots__ = ("value", "grad", "tape", "requires_grad", "name")

    def __init__(self, value, tape=None, requires_grad=False, name=""):
        self.value = np.atleast_2d(np.asarray(value, dtype=np.float64))
        if not np.all(np.isfinite(self.value)):
            raise NonFinite(f"non-finite values in tensor {name!r}")
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor2({self.value.shape}, name={self.name!r})"


class Tape:
    """Ordered record of primitive applications for reverse traversal."""

    def __init__(self):
        self.records = []   # (inputs, output, backward_fn)

    def record(self, inputs, output, backward_fn):
        self.records.append((inputs, output, backward_fn))

    def backward(self, loss: Tensor2):
        """Populate .grad on every tensor reachable from `loss`."""
        if loss.value.shape != (1, 1):
            raise NotScalarLoss(f"loss has shape {loss.value.shape}")
        for inputs, output, _ in self.records:
            for t in inputs:
                t.grad = np.zeros_like(t.value)
            output.grad = np.zeros_like(output.value)
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.value)
        loss.grad = np.ones((1, 1))
        for inputs, output, backward_fn in reversed(self.records):
            if output.grad is None or not output.grad.any():
                if output is not loss:
                    continue
            backward_fn(output.grad)

    def _out(self, value, inputs, backward_fn):
        out = Tensor2(value, tape=self)
        self.record(inputs, out, backward_fn)
        return out

    # --- primitives ---------------------------------------------------------

    def matmul(self, a: Tensor2, b: Tensor2) -> Tensor2:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

        def backward(g):
            a.grad += g @ b.value.T
            b.grad += a.value.T @ g
        return self._out(a.value @ b.value, (a, b), backward)

    def add(self, a: Tensor2, b: Tensor2) -> Tensor2:
        if a.shape != b.shape and b.shape[0] != 1:
            raise ShapeMismatch(f"add {a.shape} + {b.shape}")

        def backward(g):
            a.grad += g
            if b.shape == a.shape:
                b.grad += g
            else:
                b.grad += g.sum(axis=0, keepdims=True)
        return self._out(a.value + b.value, (a, b), backward)

    def sub(self, a: Tensor2, b: Tensor2) -> Tensor2:
        if a.shape != b.shape:
            raise ShapeMismatch(f"sub {a.shape} - {b.shape}")

        def backward(g):
            a.grad += g
            b.grad -= g
        return self._out(a.value - b.value, (a, b), backward)

    def mul(self, a: Tensor2, b: Tensor2) -> Tensor2:
        if a.shape != b.shape and not (b.shape[0] == 1
                                       and b.shape[1] == a.shape[1]):
            raise ShapeMismatch(f"mul {a.shape} * {b.shape}")

        def backward(g):
            a.grad += g * b.value
            if b.shape == a.shape:
                b.grad += g * a.value
            else:
                b.grad += (g * a.value).sum(axis=0, keepdims=True)
        return self._out(a.value * b.value, (a, b), backward)

    def scale(self, a: Tensor2, k: float) -> Tensor2:
        def backward(g):
            a.grad += g * k
        return self._out(a.value * k, (a,), backward)

    def transpose(self, a: Tensor2) -> Tensor2:
        def backward(g):
            a.grad += g.T
        return self._out(a.value.T, (a,), backward)

    def concat(self, parts, axis=1) -> Tensor2:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if axis == 1:
                    p.grad += g[:, lo:hi]
                else:
                    p.grad += g[lo:hi, :]
        return self._out(np.concatenate([p.value for p in parts], axis=axis),
                         tuple(parts), backward)

    def split(self, a: Tensor2, sizes, axis=1):
        offsets = np.cumsum([0] + list(sizes))
        outs = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            piece = (a.value[:, lo:hi] if axis == 1 else a.value[lo:hi, :])

            def backward(g, lo=lo, hi=hi):
                if axis == 1:
                    a.grad[:, lo:hi] += g
                else:
                    a.grad[lo:hi, :] += g
            outs.append(self._out(piece, (a,), backward))
        return outs

    def reshape(self, a: Tensor2, rows, cols) -> Tensor2:
        def backward(g):
            a.grad += g.reshape(a.shape)
        return self._out(a.value.reshape(rows, cols), (a,), backward)

    def elu(self, a: Tensor2, alpha=1.0) -> Tensor2:
        pos = a.value > 0
        y = np.where(pos, a.value, alpha * (np.exp(np.minimum(a.value, 0.0)) - 1))

        def backward(g):
            a.grad += g * np.where(pos, 1.0, y + alpha)
        return self._out(y, (a,), backward)

    def sigmoid(self, a: Tensor2) -> Tensor2:
        y = 1.0 / (1.0 + np.exp(-a.value))

        def backward(g):
            a.grad += g * y * (1 - y)
        return self._out(y, (a,), backward)

    def softplus(self, a: Tensor2) -> Tensor2:
        # log(1 + exp(x)), stable for large |x|
        y = np.logaddexp(0.0, a.value)

        def backward(g):
            a.grad += g / (1.0 + np.exp(-a.value))
        return self._out(y, (a,), backward)

    def log(self, a: Tensor2) -> Tensor2:
        def backward(g):
            a.grad += g / a.value
        return self._out(np.log(a.value), (a,), backward)

    def softmax(self, a: Tensor2) -> Tensor2:
        """Row-wise softmax."""
        shifted = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            dot = (g * y).sum(axis=1, keepdims=True)
            a.grad += y * (g - dot)
        return self._out(y, (a,), backward)

    def layer_norm(self, a: Tensor2, eps=1e-6) -> Tensor2:
        """Row-wise normalization to zero mean, unit variance (no affine)."""
        mu = a.value.mean(axis=1, keepdims=True)
        var = a.value.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (a.value - mu) * inv

        def backward(g):
            n = a.shape[1]
            gm = g.mean(axis=1, keepdims=True)
            gx = (g * xhat).mean(axis=1, keepdims=True)
            a.grad += inv * (g - gm - xhat * gx)
        return self._out(xhat, (a,), backward)

    def glu(self, a: Tensor2) -> Tensor2:
        """Split-gate linear unit: [h; z] -> h * sigmoid(z), split on columns."""
        cols = a.shape[1]
        if cols % 2:
            raise ShapeMismatch(f"glu needs an even column count, got {cols}")
        half = cols // 2
        h = a.value[:, :half]
        z = a.value[:, half:]
        sz = 1.0 / (1.0 + np.exp(-z))

        def backward(g):
            a.grad[:, :half] += g * sz
            a.grad[:, half:] += g * h * sz * (1 - sz)
        return self._out(h * sz, (a,), backward)

    def dropout(self, a: Tensor2, p: float, rng: np.random.Generator) -> Tensor2:
        """Inverted dropout with a mask drawn from `rng`; identity if p == 0."""
        if p <= 0:
            return a
        mask = (rng.random(a.shape) >= p) / (1.0 - p)

        def backward(g):
            a.grad += g * mask
        return self._out(a.value * mask, (a,), backward)

    def gather_rows(self, parts, r: int) -> Tensor2:
        """Stack row `r` of each (B, L) tensor into an (len(parts), L) matrix.

        Bridges the batched per-feature stage to per-record attention without
        materializing B*len(parts) slice tensors.
        """
        value = np.stack([p.value[r] for p in parts], axis=0)

        def backward(g):
            for i, p in enumerate(parts):
                p.grad[r] += g[i]
        return self._out(value, tuple(parts), backward)

    def sum(self, a: Tensor2) -> Tensor2:
        def backward(g):
            a.grad += np.full(a.shape, g[0, 0])
        return self._out(a.value.sum(keepdims=True).reshape(1, 1), (a,), backward)

    def mean(self, a: Tensor2) -> Tensor2:
        n = a.value.size

        def backward(g):
            a.grad += np.full(a.shape, g[0, 0] / n)
        return self._out(a.value.mean(keepdims=True).reshape(1, 1), (a,), backward)
