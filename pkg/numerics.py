"""
CTRForge Numerics
Dense float64 matrix helpers, learnable parameters with Adam state,
a reverse-mode gradient tape, the StepLR schedule, and a central
finite-difference gradient checker.

A Matrix is a 2-D float64 numpy array. Batched model tensors are
3-D arrays of shape (batch, fields, width); every tape op documents
the shapes it accepts.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    GRADCHECK_H,
    GRADCHECK_REL_FLOOR,
    GRADCHECK_TOL,
    LN_EPS,
    LOGIT_CLAMP,
)
from errors import NumericError, ShapeError, TrainingError, UsageError

logger = logging.getLogger(__name__)

DTYPE = np.float64


# =============================================================================
# MATRIX HELPERS
# =============================================================================

def check_finite(array, what):
    """
    Raise if an array holds NaN or Inf.

    Args:
        array: Array to inspect
        what: Label used in the error message

    Returns:
        The array, unchanged
    """
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{what} produced a non-finite value")
    return array


def as_matrix(values):
    """
    Convert to a 2-D float64 matrix.

    Raises:
        ShapeError: If the input is not two-dimensional or has an empty axis
    """
    matrix = np.asarray(values, dtype=DTYPE)
    if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {matrix.shape}")
    return matrix


def zeros(rows, cols):
    return np.zeros((rows, cols), dtype=DTYPE)


def matmul(a, b):
    """
    Matrix product with shape and overflow checks.

    Args:
        a: Matrix of shape (n, k)
        b: Matrix of shape (k, m)

    Returns:
        Matrix of shape (n, m)

    Raises:
        ShapeError: When a.cols != b.rows
        NumericError: When the product overflows
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        product = a @ b
    return check_finite(product, "matmul")


def sigmoid(logits):
    """Logistic function on logits clamped to [-LOGIT_CLAMP, LOGIT_CLAMP]."""
    clamped = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-clamped))


# =============================================================================
# TAPE VALUES AND PARAMETERS
# =============================================================================

class Node:
    """A value produced on a tape together with its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def accumulate(self, gradient):
        if self.grad is None:
            self.grad = np.array(gradient, dtype=DTYPE)
        else:
            self.grad += gradient


class Parameter(Node):
    """
    A learnable matrix with its gradient accumulator and Adam moments.
    value, grad, m and v always share one shape.
    """

    __slots__ = ("name", "m", "v", "step_count", "trainable")

    def __init__(self, name, value, trainable=True):
        super().__init__(as_matrix(value).copy())
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step_count = 0
        self.trainable = trainable

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        rows, cols = self.value.shape
        return f"Parameter({self.name!r}, {rows}x{cols}, step={self.step_count})"


def zero_grads(params):
    for param in params:
        param.zero_grad()


# =============================================================================
# GRADIENT TAPE
# =============================================================================

class GradTape:
    """
    Ordered log of differentiable operations.
    Each op appends (name, output node, backward closure); `backward`
    replays the log in reverse. A tape built with record=False computes
    the same forward values without keeping anything, for inference.
    """

    def __init__(self, record=True):
        self.record = record
        self._ops = []

    def __len__(self):
        return len(self._ops)

    @property
    def op_names(self):
        return [name for name, _, _ in self._ops]

    def _push(self, name, out, backward):
        check_finite(out.value, name)
        if self.record:
            self._ops.append((name, out, backward))
        return out

    def backward(self, loss, seed=1.0):
        """
        Propagate d(loss)/d(node) to every node reached by the recorded ops.

        Args:
            loss: Scalar Node produced by the last ops on this tape
            seed: Upstream gradient of the loss

        Returns:
            list: Names of the ops replayed, in replay order

        Raises:
            UsageError: If nothing was recorded or the loss is not scalar
        """
        if not self._ops:
            raise UsageError("backward called without a recorded forward pass")
        if loss.value.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.value.shape}")

        loss.grad = np.full_like(loss.value, seed)
        replayed = []
        for name, out, backward in reversed(self._ops):
            replayed.append(name)
            if out.grad is None:
                continue
            backward(out.grad)
        return replayed

    # -- elementwise and structural ops ------------------------------------

    def constant(self, value):
        return Node(np.asarray(value, dtype=DTYPE))

    def add(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: {a.shape} vs {b.shape}")
        out = Node(a.value + b.value)

        def backward(g):
            a.accumulate(g)
            b.accumulate(g)

        return self._push("add", out, backward)

    def add_n(self, nodes):
        total = nodes[0]
        for node in nodes[1:]:
            total = self.add(total, node)
        return total

    def mul(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: {a.shape} vs {b.shape}")
        out = Node(a.value * b.value)

        def backward(g):
            a.accumulate(g * b.value)
            b.accumulate(g * a.value)

        return self._push("mul", out, backward)

    def scale(self, a, factor):
        out = Node(a.value * factor)

        def backward(g):
            a.accumulate(g * factor)

        return self._push("scale", out, backward)

    def sum_all(self, a):
        """Sum of every element as a (1, 1) node."""
        out = Node(np.array([[a.value.sum()]], dtype=DTYPE))

        def backward(g):
            a.accumulate(np.full(a.shape, g.item(), dtype=DTYPE))

        return self._push("sum_all", out, backward)

    def reduce_sum(self, a, axis):
        out = Node(a.value.sum(axis=axis))

        def backward(g):
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

        return self._push("reduce_sum", out, backward)

    def reshape(self, a, shape):
        out = Node(a.value.reshape(shape))

        def backward(g):
            a.accumulate(g.reshape(a.shape))

        return self._push("reshape", out, backward)

    def stack(self, nodes, axis=1):
        out = Node(np.stack([node.value for node in nodes], axis=axis))

        def backward(g):
            for i, node in enumerate(nodes):
                node.accumulate(np.take(g, i, axis=axis))

        return self._push("stack", out, backward)

    def concat(self, nodes, axis=-1):
        out = Node(np.concatenate([node.value for node in nodes], axis=axis))
        bounds = np.cumsum([node.shape[axis] for node in nodes])[:-1]

        def backward(g):
            for node, piece in zip(nodes, np.split(g, bounds, axis=axis)):
                node.accumulate(piece)

        return self._push("concat", out, backward)

    def relu(self, a):
        mask = a.value > 0
        out = Node(np.where(mask, a.value, 0.0))

        def backward(g):
            a.accumulate(g * mask)

        return self._push("relu", out, backward)

    # -- parameterised ops -------------------------------------------------

    def gather(self, table, indices):
        """
        Row lookup: out[b] = table[indices[b]].

        Args:
            table: Node of shape (rows, width)
            indices: Integer array of shape (batch,)
        """
        out = Node(table.value[indices])

        def backward(g):
            np.add.at(table.ensure_grad(), indices, g)

        return self._push("gather", out, backward)

    def scale_rows(self, vector, values):
        """
        Outer scaling: out[b] = values[b] * vector[0].

        Args:
            vector: Node of shape (1, width)
            values: Float array of shape (batch,)
        """
        column = values.reshape(-1, 1)
        out = Node(column * vector.value)

        def backward(g):
            vector.accumulate((column * g).sum(axis=0, keepdims=True))

        return self._push("scale_rows", out, backward)

    def matmul(self, x, w):
        """
        Right-multiply by a weight matrix over the last axis.

        Args:
            x: Node of shape (..., in)
            w: Node of shape (in, out)
        """
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"matmul: {x.shape} by {w.shape}")
        out = Node(x.value @ w.value)

        def backward(g):
            w.accumulate(x.value.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1]))
            x.accumulate(g @ w.value.T)

        return self._push("matmul", out, backward)

    def bias_add(self, x, bias):
        """x + bias broadcast over every leading axis; bias has shape (1, width)."""
        if x.shape[-1] != bias.shape[-1]:
            raise ShapeError(f"bias_add: {x.shape} with {bias.shape}")
        out = Node(x.value + bias.value.reshape(-1))

        def backward(g):
            x.accumulate(g)
            bias.accumulate(g.reshape(-1, bias.shape[-1]).sum(axis=0, keepdims=True))

        return self._push("bias_add", out, backward)

    def fm_interaction(self, x):
        """
        Pairwise factorised interactions of the rows of x, via
        0.5 * sum_d[(sum_i x_id)^2 - sum_i x_id^2].

        Args:
            x: Node of shape (batch, fields, width)

        Returns:
            Node of shape (batch, 1)
        """
        total = x.value.sum(axis=1)
        out = Node(0.5 * (total ** 2 - (x.value ** 2).sum(axis=1)).sum(axis=1, keepdims=True))

        def backward(g):
            x.accumulate(g[:, :, None] * (total[:, None, :] - x.value))

        return self._push("fm_interaction", out, backward)

    def cin_layer(self, prev, x0, weight):
        """
        One compressed-interaction layer:
        out[b,h,d] = sum_ij W[h, i*N + j] * prev[b,i,d] * x0[b,j,d].

        Args:
            prev: Node (batch, H_prev, width)
            x0: Node (batch, N, width)
            weight: Node (H_out, H_prev * N); row h is the flattened W^{k,h}
        """
        h_out = weight.shape[0]
        h_prev = prev.shape[1]
        n = x0.shape[1]
        if weight.shape[1] != h_prev * n or prev.shape[2] != x0.shape[2]:
            raise ShapeError(
                f"cin_layer: prev {prev.shape}, x0 {x0.shape}, weight {weight.shape}"
            )
        w3 = weight.value.reshape(h_out, h_prev, n)
        out = Node(np.einsum("kij,bid,bjd->bkd", w3, prev.value, x0.value, optimize=True))

        def backward(g):
            grad_w = np.einsum("bkd,bid,bjd->kij", g, prev.value, x0.value, optimize=True)
            weight.accumulate(grad_w.reshape(h_out, h_prev * n))
            prev.accumulate(np.einsum("bkd,kij,bjd->bid", g, w3, x0.value, optimize=True))
            x0.accumulate(np.einsum("bkd,kij,bid->bjd", g, w3, prev.value, optimize=True))

        return self._push("cin_layer", out, backward)

    def attention(self, q, k, v):
        """
        Scaled dot-product attention softmax(q k^T / sqrt(d_k)) v per example.

        Args:
            q, k, v: Nodes of shape (batch, fields, d_k)

        Returns:
            tuple: (output Node (batch, fields, d_k), weights array (batch, fields, fields))
        """
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = (q.value @ np.swapaxes(k.value, 1, 2)) * scale
        scores = scores - scores.max(axis=-1, keepdims=True)
        exps = np.exp(scores)
        weights = exps / exps.sum(axis=-1, keepdims=True)
        out = Node(weights @ v.value)

        def backward(g):
            v.accumulate(np.swapaxes(weights, 1, 2) @ g)
            grad_weights = g @ np.swapaxes(v.value, 1, 2)
            grad_scores = weights * (grad_weights - (grad_weights * weights).sum(axis=-1, keepdims=True))
            q.accumulate((grad_scores @ k.value) * scale)
            k.accumulate((np.swapaxes(grad_scores, 1, 2) @ q.value) * scale)

        return self._push("attention", out, backward), weights

    def layer_norm(self, x, gain, bias, eps=LN_EPS):
        """
        Row-wise layer normalisation over the last axis with learned affine.

        Args:
            x: Node (..., width)
            gain, bias: Nodes (1, width)
        """
        xhat, inv = normalize_rows(x.value, eps)
        out = Node(xhat * gain.value.reshape(-1) + bias.value.reshape(-1))
        width = x.shape[-1]

        def backward(g):
            gain.accumulate((g * xhat).reshape(-1, width).sum(axis=0, keepdims=True))
            bias.accumulate(g.reshape(-1, width).sum(axis=0, keepdims=True))
            grad_xhat = g * gain.value.reshape(-1)
            x.accumulate(inv * (
                grad_xhat
                - grad_xhat.mean(axis=-1, keepdims=True)
                - xhat * (grad_xhat * xhat).mean(axis=-1, keepdims=True)
            ))

        return self._push("layer_norm", out, backward)

    def bce_with_logits(self, logits, labels):
        """
        Mean binary cross-entropy of sigmoid(clamped logits) against labels,
        in log-sigmoid form: softplus(z) - y * z. The logs never see a
        probability of 0 or 1, so a confidently wrong example keeps its full
        gradient sigmoid(z) - y. The gradient is zero only where the logit
        clamp is active. Reported Logloss still clamps probabilities to
        [PROB_EPS, 1 - PROB_EPS] (see metrics.logloss).

        Args:
            logits: Node of shape (batch, 1)
            labels: Array of shape (batch,) with values in {0, 1}

        Returns:
            Node of shape (1, 1)
        """
        z = logits.value
        y = np.asarray(labels, dtype=DTYPE).reshape(z.shape)
        clamped = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
        losses = np.logaddexp(0.0, clamped) - y * clamped
        out = Node(np.array([[losses.mean()]], dtype=DTYPE))
        live = np.abs(z) <= LOGIT_CLAMP
        prob = sigmoid(z)

        def backward(g):
            logits.accumulate(g.item() * live * (prob - y) / z.shape[0])

        return self._push("bce_with_logits", out, backward)


def normalize_rows(x, eps=LN_EPS):
    """
    Standardise over the last axis with population variance.

    Returns:
        tuple: (normalised array, 1/sqrt(var + eps) with keepdims)
    """
    centered = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    return centered * inv, inv


# =============================================================================
# OPTIMISATION
# =============================================================================

def adam_step(param, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """
    One bias-corrected Adam update, in place. The gradient is left untouched.

    Args:
        param: Parameter with a populated grad
        lr: Learning rate (> 0)
        beta1, beta2, eps: Adam constants

    Returns:
        Parameter: The same parameter, updated

    Raises:
        UsageError: For a non-positive learning rate
        TrainingError: For a non-finite gradient
    """
    if lr <= 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    step = param.step_count + 1
    if not np.all(np.isfinite(param.grad)):
        raise TrainingError(f"non-finite gradient in parameter '{param.name}' at step {step}")

    param.step_count = step
    param.m *= beta1
    param.m += (1.0 - beta1) * param.grad
    param.v *= beta2
    param.v += (1.0 - beta2) * param.grad ** 2
    m_hat = param.m / (1.0 - beta1 ** step)
    v_hat = param.v / (1.0 - beta2 ** step)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class Adam:
    """Adam over a parameter list; frozen parameters are skipped."""

    def __init__(self, params, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, lr):
        for param in self.params:
            if param.trainable:
                adam_step(param, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        zero_grads(self.params)


def steplr(lr0, epoch, step_size, gamma):
    """Learning rate after `epoch` epochs: lr0 * gamma^(epoch // step_size)."""
    return lr0 * gamma ** (epoch // step_size)


# =============================================================================
# GRADIENT CHECK
# =============================================================================

@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error of analytic vs numeric gradients."""

    tol: float
    per_parameter: dict = field(default_factory=dict)

    @property
    def max_rel_error(self):
        return max(self.per_parameter.values(), default=0.0)

    @property
    def worst_parameter(self):
        if not self.per_parameter:
            return None
        return max(self.per_parameter, key=self.per_parameter.get)

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def relative_error(analytic, numeric, floor=GRADCHECK_REL_FLOOR):
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)


def grad_check(loss_fn, params, h=GRADCHECK_H, tol=GRADCHECK_TOL, corrupt=False):
    """
    Compare tape gradients against central finite differences.

    Args:
        loss_fn: Callable taking a GradTape and returning a scalar loss Node
        params: Parameters to check (every scalar entry is perturbed)
        h: Finite-difference step
        tol: Pass threshold on the maximum relative error
        corrupt: Negate the first non-zero analytic gradient (harness self-test)

    Returns:
        GradCheckReport: Failure is a report outcome, not an exception
    """
    zero_grads(params)
    tape = GradTape()
    tape.backward(loss_fn(tape))
    analytic = {param.name: param.grad.copy() for param in params}

    if corrupt:
        for param in params:
            if np.any(np.abs(analytic[param.name]) > GRADCHECK_REL_FLOOR):
                analytic[param.name] = -analytic[param.name]
                break

    def evaluate():
        return loss_fn(GradTape(record=False)).value.item()

    report = GradCheckReport(tol=tol)
    for param in params:
        flat = param.value.reshape(-1)
        expected = analytic[param.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            loss_plus = evaluate()
            flat[i] = original - h
            loss_minus = evaluate()
            flat[i] = original
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            worst = max(worst, relative_error(expected[i], numeric))
        report.per_parameter[param.name] = worst
        logger.debug("grad check %s: max rel err %.3e", param.name, worst)

    zero_grads(params)
    return report
