"""
CTRForge Model
The improved xDeepFM network: shared field embeddings feeding an FM head,
a compressed interaction network, and a multi-head attention block
(residual + layer norm) in front of a DNN, fused by one sigmoid unit.
Ablation switches recover plain xDeepFM and DeepFM.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from config import FIRST_ORDER_HEADS, FUSION_WEIGHTS, INIT_STD, LN_EPS, ModelConfig
from config import GRADCHECK_H, GRADCHECK_INIT_STD, GRADCHECK_TOL, SEED, TINY_BATCH
from data import Batch
from errors import CheckpointError, ConfigError, EmbeddingLookupError, ShapeError
from numerics import GradTape, Node, Parameter, grad_check, normalize_rows, sigmoid
from utils import (
    read_exact,
    read_int64s,
    read_uint32,
    read_with_size,
    write_int64s,
    write_uint32,
    write_with_size,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CTRCKPT1"


# =============================================================================
# PARAMETERS
# =============================================================================

class ModelParams:
    """
    All learnable tensors of one model, keyed by name.

    Naming: embed.cat.<f>, embed.dense.<f>, fm.w0, fm.w.cat.<f>,
    fm.w.dense.<f>, cin.<k> (row h is the flattened W^{k,h} of shape
    (H_{k-1}, N)), attn.<i>.query|key|value, attn.out, ln.gain, ln.bias,
    dnn.<l>.weight, dnn.<l>.bias, fusion.w_fm|w_cin|w_dnn|bias.
    """

    def __init__(self, config, params):
        self.config = config
        self._params = dict(params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    @property
    def names(self):
        return list(self._params)

    def parameters(self):
        return list(self._params.values())

    def zero_grads(self):
        for param in self._params.values():
            param.zero_grad()

    def census(self):
        """Count tensors per group (the name prefix before the first dot)."""
        counts = {}
        for name in self._params:
            group = name.split(".", 1)[0]
            counts[group] = counts.get(group, 0) + 1
        return counts

    def state(self):
        return {name: param.value.copy() for name, param in self._params.items()}

    def load_state(self, state):
        """Copy values in place; names and shapes must match exactly."""
        if set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise CheckpointError(f"tensor names differ: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            param = self._params[name]
            if param.value.shape != value.shape:
                raise CheckpointError(
                    f"tensor {name}: expected {param.value.shape}, got {value.shape}"
                )
            param.value[...] = value

    def clone(self):
        """Independent copy of the values (optimizer state starts fresh)."""
        return ModelParams(self.config, {
            name: Parameter(name, param.value, trainable=param.trainable)
            for name, param in self._params.items()
        })


def init_params(config, init_std=INIT_STD, zero_fusion=True):
    """
    Create seeded parameters for a config.
    Embeddings, CIN filters, attention projections and DNN weights are
    drawn from Normal(0, init_std^2); biases, w0, first-order weights and
    (when zero_fusion) the fusion weights start at zero; layer-norm gain is 1.

    Args:
        config: ModelConfig
        init_std: Standard deviation of the normal initialisation
        zero_fusion: Start the fusion unit at zero so every prediction is 0.5

    Returns:
        ModelParams
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dim = config.embed_dim
    n = config.num_fields
    frozen = {f"fusion.{name}" for name in config.frozen}
    params = {}

    def add(name, value):
        params[name] = Parameter(name, value, trainable=name not in frozen)

    def normal(rows, cols):
        return rng.normal(0.0, init_std, size=(rows, cols))

    for f, size in enumerate(config.cat_vocab_sizes):
        add(f"embed.cat.{f}", normal(size + 1, dim))
    for f in range(config.num_dense_fields):
        add(f"embed.dense.{f}", normal(1, dim))

    add("fm.w0", np.zeros((1, 1)))
    for f, size in enumerate(config.cat_vocab_sizes):
        add(f"fm.w.cat.{f}", np.zeros((size + 1, 1)))
    for f in range(config.num_dense_fields):
        add(f"fm.w.dense.{f}", np.zeros((1, 1)))

    prev = n
    for k, size in enumerate(config.cin_layer_sizes):
        add(f"cin.{k}", normal(size, prev * n))
        prev = size

    for i in range(config.num_heads):
        add(f"attn.{i}.query", normal(dim, config.head_dim))
        add(f"attn.{i}.key", normal(dim, config.head_dim))
        add(f"attn.{i}.value", normal(dim, config.head_dim))
    add("attn.out", normal(config.num_heads * config.head_dim, dim))
    add("ln.gain", np.ones((1, dim)))
    add("ln.bias", np.zeros((1, dim)))

    width = n * dim
    for l, size in enumerate(config.dnn_layer_sizes):
        add(f"dnn.{l}.weight", normal(width, size))
        add(f"dnn.{l}.bias", np.zeros((1, size)))
        width = size

    fusion = (lambda rows: np.zeros((rows, 1))) if zero_fusion else (lambda rows: normal(rows, 1))
    add("fusion.w_fm", fusion(1))
    add("fusion.w_cin", fusion(sum(config.cin_layer_sizes)))
    add("fusion.w_dnn", fusion(config.dnn_layer_sizes[-1]))
    add("fusion.bias", np.zeros((1, 1)))

    for name in frozen:
        params[name].value.fill(0.0)
    return ModelParams(config, params)


# =============================================================================
# GRAPH CONSTRUCTION
# =============================================================================

@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass (tape nodes)."""

    x0: Node
    y_fm: Node
    cin_layers: list
    pooled: Node
    attention: Node | None
    attention_weights: list
    dnn_activations: list
    logit: Node
    heads: list = field(default_factory=list)

    @property
    def probabilities(self):
        return sigmoid(self.logit.value[:, 0])


def _check_batch(batch, config):
    if batch.cat_idx.shape[1] != config.num_cat_fields:
        raise ShapeError(f"batch has {batch.cat_idx.shape[1]} categorical fields, "
                         f"model expects {config.num_cat_fields}")
    if batch.dense_val.shape[1] != config.num_dense_fields:
        raise ShapeError(f"batch has {batch.dense_val.shape[1]} dense fields, "
                         f"model expects {config.num_dense_fields}")
    for f, size in enumerate(config.cat_vocab_sizes):
        column = batch.cat_idx[:, f]
        bad = (column < 0) | (column > size)
        if bad.any():
            raise EmbeddingLookupError(f, int(column[bad][0]), size + 1)


def _embed(tape, batch, params):
    config = params.config
    rows = [tape.gather(params[f"embed.cat.{f}"], batch.cat_idx[:, f])
            for f in range(config.num_cat_fields)]
    rows += [tape.scale_rows(params[f"embed.dense.{f}"], batch.dense_val[:, f])
             for f in range(config.num_dense_fields)]
    return tape.stack(rows, axis=1)


def _first_order(tape, batch, params):
    config = params.config
    terms = [tape.gather(params[f"fm.w.cat.{f}"], batch.cat_idx[:, f])
             for f in range(config.num_cat_fields)]
    terms += [tape.scale_rows(params[f"fm.w.dense.{f}"], batch.dense_val[:, f])
              for f in range(config.num_dense_fields)]
    return tape.bias_add(tape.add_n(terms), params["fm.w0"])


def _cin(tape, x0, params):
    layers = []
    prev = x0
    for k in range(len(params.config.cin_layer_sizes)):
        prev = tape.cin_layer(prev, x0, params[f"cin.{k}"])
        layers.append(prev)
    return layers


def _pool(tape, layers):
    return tape.concat([tape.reduce_sum(layer, axis=2) for layer in layers], axis=1)


def _attention(tape, x0, params):
    heads, weights = [], []
    for i in range(params.config.num_heads):
        q = tape.matmul(x0, params[f"attn.{i}.query"])
        k = tape.matmul(x0, params[f"attn.{i}.key"])
        v = tape.matmul(x0, params[f"attn.{i}.value"])
        head, head_weights = tape.attention(q, k, v)
        heads.append(head)
        weights.append(head_weights)
    projected = tape.matmul(tape.concat(heads, axis=-1), params["attn.out"])
    normed = tape.layer_norm(tape.add(projected, x0), params["ln.gain"], params["ln.bias"])
    return normed, weights, heads


def _dnn(tape, x, params):
    activations = []
    for l in range(len(params.config.dnn_layer_sizes)):
        x = tape.relu(tape.bias_add(tape.matmul(x, params[f"dnn.{l}.weight"]),
                                    params[f"dnn.{l}.bias"]))
        activations.append(x)
    return x, activations


def _fuse(tape, y_fm, pooled, x_dnn, params):
    terms = [
        tape.matmul(y_fm, params["fusion.w_fm"]),
        tape.matmul(pooled, params["fusion.w_cin"]),
        tape.matmul(x_dnn, params["fusion.w_dnn"]),
    ]
    return tape.bias_add(tape.add_n(terms), params["fusion.bias"])


def build_graph(tape, batch, params):
    """
    Run the full network on a batch, recording on `tape`.

    Returns:
        ForwardTrace: logit node of shape (batch, 1) plus intermediates
    """
    config = params.config
    _check_batch(batch, config)

    x0 = _embed(tape, batch, params)
    y_fm = _first_order(tape, batch, params)
    if config.first_order_head == "FM":
        y_fm = tape.add(y_fm, tape.fm_interaction(x0))

    layers = _cin(tape, x0, params)
    pooled = _pool(tape, layers)

    attention, weights, heads = None, [], []
    deep_input = x0
    if config.use_attention:
        attention, weights, heads = _attention(tape, x0, params)
        deep_input = attention
    flat = tape.reshape(deep_input, (batch.size, config.num_fields * config.embed_dim))
    x_dnn, activations = _dnn(tape, flat, params)

    logit = _fuse(tape, y_fm, pooled, x_dnn, params)
    return ForwardTrace(x0, y_fm, layers, pooled, attention, weights, activations, logit, heads)


def loss_and_trace(tape, batch, params):
    """Mean Logloss node over the batch plus its ForwardTrace."""
    trace = build_graph(tape, batch, params)
    return tape.bce_with_logits(trace.logit, batch.labels), trace


def forward(batch, params):
    """
    Predict click probabilities.

    Returns:
        tuple: (probabilities array (batch,), ForwardTrace)
    """
    trace = build_graph(GradTape(record=False), batch, params)
    return trace.probabilities, trace


# =============================================================================
# BRANCH-LEVEL OPERATIONS
# =============================================================================

def _as_batched(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def embed(batch, params):
    """Embedding matrix X0 of shape (batch, N, D)."""
    _check_batch(batch, params.config)
    return _embed(GradTape(record=False), batch, params).value


def fm_forward(batch, params):
    """FM output w0 + sum w_i x_i + pairwise latent interactions, shape (batch,)."""
    _check_batch(batch, params.config)
    tape = GradTape(record=False)
    y = tape.add(_first_order(tape, batch, params), tape.fm_interaction(_embed(tape, batch, params)))
    return y.value[:, 0]


def lr_forward(batch, params):
    """First-order (LR) head w0 + sum w_i x_i, shape (batch,)."""
    _check_batch(batch, params.config)
    return _first_order(GradTape(record=False), batch, params).value[:, 0]


def fm_naive(batch, params):
    """Literal double-loop FM; the reference for fm_forward."""
    config = params.config
    out = np.zeros(batch.size)
    for b in range(batch.size):
        total = params["fm.w0"].value[0, 0]
        latents, values = [], []
        for f in range(config.num_cat_fields):
            index = batch.cat_idx[b, f]
            latents.append(params[f"embed.cat.{f}"].value[index])
            values.append(1.0)
            total += params[f"fm.w.cat.{f}"].value[index, 0]
        for f in range(config.num_dense_fields):
            x = batch.dense_val[b, f]
            latents.append(params[f"embed.dense.{f}"].value[0])
            values.append(x)
            total += params[f"fm.w.dense.{f}"].value[0, 0] * x
        for i in range(len(latents)):
            for j in range(i + 1, len(latents)):
                total += float(np.dot(latents[i], latents[j])) * values[i] * values[j]
        out[b] = total
    return out


def cin_forward(x0, params):
    """
    CIN hidden layers for X0 of shape (N, D) or (batch, N, D).

    Returns:
        list: X^k arrays with the same leading layout as the input
    """
    x0, single = _as_batched(x0)
    if x0.shape[1] != params.config.num_fields:
        raise ShapeError(f"X0 has {x0.shape[1]} rows, model has {params.config.num_fields} fields")
    tape = GradTape(record=False)
    layers = [layer.value for layer in _cin(tape, tape.constant(x0), params)]
    return [layer[0] for layer in layers] if single else layers


def cin_pool(layers):
    """Sum-pool each layer over the embedding axis and concatenate."""
    return np.concatenate([np.asarray(layer).sum(axis=-1) for layer in layers], axis=-1)


@dataclass
class AttentionDetails:
    weights: list   # per head (batch, N, N)
    heads: list     # per head pre-projection outputs (batch, N, d_k)
    values: list    # per head projected values V W_i^V (batch, N, d_k)


def mha_forward(x0, params, return_details=False):
    """
    Multi-head self-attention with residual and layer norm, Q = K = V = X0.

    Args:
        x0: (N, D) or (batch, N, D)
        params: ModelParams
        return_details: Also return per-head weights, outputs and values

    Returns:
        Array like x0, or (array, AttentionDetails)
    """
    x0, single = _as_batched(x0)
    tape = GradTape(record=False)
    out, weights, heads = _attention(tape, tape.constant(x0), params)
    result = out.value[0] if single else out.value
    if not return_details:
        return result
    values = [x0 @ params[f"attn.{i}.value"].value for i in range(params.config.num_heads)]
    return result, AttentionDetails(weights, [h.value for h in heads], values)


def layer_norm(row, gain, bias, eps=LN_EPS):
    """(row - mean) / sqrt(var + eps) * gain + bias with population variance."""
    normalized, _ = normalize_rows(np.asarray(row, dtype=np.float64), eps)
    return normalized * np.asarray(gain).reshape(-1) + np.asarray(bias).reshape(-1)


def dnn_forward(x, params):
    """ReLU MLP over a flattened (N*D,) vector or a (batch, N*D) matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    tape = GradTape(record=False)
    out, _ = _dnn(tape, tape.constant(x[None] if single else x), params)
    return out.value[0] if single else out.value


def fuse_predict(y_fm, pooled, x_dnn, params):
    """
    sigmoid(w_fm * y_fm + w_cin . p+ + w_dnn . x_dnn + b) per example.

    Args:
        y_fm: (batch,) FM outputs
        pooled: (batch, sum H_k)
        x_dnn: (batch, last DNN width)
    """
    tape = GradTape(record=False)
    y_fm = tape.constant(np.asarray(y_fm, dtype=np.float64).reshape(-1, 1))
    pooled = tape.constant(np.atleast_2d(pooled))
    x_dnn = tape.constant(np.atleast_2d(x_dnn))
    return sigmoid(_fuse(tape, y_fm, pooled, x_dnn, params).value[:, 0])


# =============================================================================
# GRADIENT CHECK
# =============================================================================

def random_batch(config, size=TINY_BATCH, seed=SEED):
    """Random in-range batch for a config with alternating labels."""
    rng = np.random.default_rng(seed)
    cat_idx = np.zeros((size, config.num_cat_fields), dtype=np.int64)
    for f, vocab_size in enumerate(config.cat_vocab_sizes):
        cat_idx[:, f] = rng.integers(0, vocab_size + 1, size=size)
    dense = rng.uniform(0.0, np.log1p(100.0), size=(size, config.num_dense_fields))
    labels = np.arange(size, dtype=np.float64) % 2
    return Batch(cat_idx, dense, labels)


def check_gradients(config, batch, h=GRADCHECK_H, tol=GRADCHECK_TOL, corrupt=False,
                    init_std=GRADCHECK_INIT_STD, zero_fusion=False):
    """
    Finite-difference check of every parameter of a freshly initialised model.

    Args:
        config: ModelConfig (keep it tiny: every scalar is perturbed twice)
        batch: Batch to evaluate the loss on
        h, tol: Step and pass threshold
        corrupt: Negate one analytic gradient to prove the harness can fail
        init_std: Initialisation scale
        zero_fusion: Keep the fusion unit at zero

    Returns:
        GradCheckReport
    """
    params = init_params(config, init_std=init_std, zero_fusion=zero_fusion)

    def loss_fn(tape):
        loss, _ = loss_and_trace(tape, batch, params)
        return loss

    report = grad_check(loss_fn, params.parameters(), h=h, tol=tol, corrupt=corrupt)
    logger.info("gradient check: max rel err %.3e (%s)", report.max_rel_error,
                report.worst_parameter)
    return report


# =============================================================================
# CHECKPOINTS
# =============================================================================

def config_to_ints(config):
    frozen_mask = sum(1 << i for i, name in enumerate(FUSION_WEIGHTS) if name in config.frozen)
    return [
        config.embed_dim,
        config.num_heads,
        config.num_dense_fields,
        len(config.cat_vocab_sizes), *config.cat_vocab_sizes,
        len(config.cin_layer_sizes), *config.cin_layer_sizes,
        len(config.dnn_layer_sizes), *config.dnn_layer_sizes,
        int(config.use_attention),
        FIRST_ORDER_HEADS.index(config.first_order_head),
        frozen_mask,
        config.seed,
    ]


def config_from_ints(values):
    """Inverse of config_to_ints."""
    values = list(values)

    def take(count=1):
        if len(values) < count:
            raise CheckpointError("config block is truncated")
        taken = values[:count]
        del values[:count]
        return taken

    def sizes():
        count = take()[0]
        if count < 0:
            raise CheckpointError("config block has a negative length")
        return tuple(take(count))

    embed_dim, num_heads, num_dense = take(3)
    cat_vocab_sizes = sizes()
    cin = sizes()
    dnn = sizes()
    use_attention, head_code, frozen_mask, seed = take(4)
    if values or head_code not in range(len(FIRST_ORDER_HEADS)):
        raise CheckpointError("config block is malformed")
    config = ModelConfig(
        cat_vocab_sizes=cat_vocab_sizes,
        num_dense_fields=num_dense,
        embed_dim=embed_dim,
        num_heads=num_heads,
        cin_layer_sizes=cin,
        dnn_layer_sizes=dnn,
        use_attention=bool(use_attention),
        first_order_head=FIRST_ORDER_HEADS[head_code],
        frozen=tuple(name for i, name in enumerate(FUSION_WEIGHTS) if frozen_mask >> i & 1),
        seed=seed,
    )
    try:
        return config.validate()
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc


def save_checkpoint(path, params):
    """
    Write `CTRCKPT1`, the integer config block, then every tensor as
    (name, rows, cols, little-endian float64 data).
    """
    with open(path, "wb") as stream:
        stream.write(CHECKPOINT_MAGIC)
        write_int64s(stream, config_to_ints(params.config))
        write_uint32(stream, len(params))
        for name in params.names:
            value = params[name].value
            write_with_size(stream, name.encode("utf-8"))
            write_uint32(stream, value.shape[0])
            write_uint32(stream, value.shape[1])
            stream.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    logger.debug("saved checkpoint %s", path)


def load_checkpoint(path):
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: On bad magic, truncation, or tensor mismatch
    """
    try:
        stream = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with stream:
        magic = stream.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a {CHECKPOINT_MAGIC.decode()} checkpoint")
        config = config_from_ints(read_int64s(stream))
        state = {}
        for _ in range(read_uint32(stream)):
            try:
                name = read_with_size(stream).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CheckpointError(f"{path}: corrupt tensor name") from exc
            rows, cols = read_uint32(stream), read_uint32(stream)
            data = read_exact(stream, 8 * rows * cols)
            state[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(rows, cols)
        if stream.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")

    params = init_params(config)
    params.load_state(state)
    return params
