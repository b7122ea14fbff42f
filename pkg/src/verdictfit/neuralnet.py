"""Fully-connected network with ADAM, inverted dropout and patience-based
early stopping, trained two ways:

* supervised: 10-150-150-150-4, labels are the ground-truth parameters
  scaled to [0, 1] by their biophysical ranges;
* self-supervised: M-10-10-10-5 (M = number of volumes), the five raw
  outputs are clamped to the parameter ranges and pushed through the
  signal model, and the loss is the reconstruction MSE against the noisy
  input signals.  No labels are used; training and inference run on the
  same dataset.

Everything is plain numpy; gradients through the signal model come from
its analytic Jacobian.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import forward_model as fm
from .protocol import AcquisitionProtocol
from .simulate import SyntheticDataset

S0_CLAMP_RANGE = (0.5, 1.5)

SUPERVISED_HIDDEN = (150, 150, 150)
SELFSUP_HIDDEN_LAYERS = 3

_MASK64 = (1 << 64) - 1


def _stream(seed: int, stream_id: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, stream_id & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class MlpModel:
    """Weights and biases of a fully-connected network.

    weights[i] has shape (layer_sizes[i], layer_sizes[i+1]); hidden layers
    apply the named activation, the output layer is linear.
    """

    layer_sizes: tuple[int, ...]
    weights: list
    biases: list
    activation: str = "relu"
    seed: int = 0

    def copy_weights(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]

    def set_weights(self, weights, biases):
        self.weights = [w.copy() for w in weights]
        self.biases = [b.copy() for b in biases]


_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: a > 0.0),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
}


def init_mlp(layer_sizes, seed: int = 0, activation: str = "relu") -> MlpModel:
    """Scaled-uniform fan-in initialisation: W ~ U(+-1/sqrt(fan_in)),
    biases zero.  Deterministic in the seed."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"bad layer sizes {sizes}")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unsupported activation {activation!r}")
    rng = _stream(seed, 0)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layer_sizes=sizes, weights=weights, biases=biases,
                    activation=activation, seed=seed)


def mlp_forward(model: MlpModel, x, mode: str = "inference",
                dropout_p: float = 0.0, rng: np.random.Generator | None = None):
    """Forward pass.  Inference mode is deterministic; train mode applies
    inverted dropout (mask / (1-p)) after each hidden activation so the
    inference output equals the mask expectation layer by layer."""
    if mode not in ("inference", "train"):
        raise ValueError(f"unknown mode {mode!r}")
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"input width {a.shape[1]} != model input {model.layer_sizes[0]}"
        )
    use_dropout = mode == "train" and dropout_p > 0.0
    if use_dropout and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    act_fn = _ACTIVATIONS[model.activation][0]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = a @ w + b
        if i != last:
            a = act_fn(a)
            if use_dropout:
                mask = rng.random(a.shape) >= dropout_p
                a = a * mask / (1.0 - dropout_p)
    return a[0] if single else a


def _forward_cached(model, x, dropout_p, rng):
    """Train-mode forward keeping the per-layer tensors for backprop.

    Returns (output, layer_inputs, hidden_acts, masks): layer_inputs[i]
    feeds weights[i]; hidden_acts[i] is the pre-dropout activation of
    hidden layer i.
    """
    act_fn = _ACTIVATIONS[model.activation][0]
    a = x
    layer_inputs = [a]
    hidden_acts = []
    masks = []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        if i != last:
            a = act_fn(z)
            hidden_acts.append(a)
            if dropout_p > 0.0:
                mask = rng.random(a.shape) >= dropout_p
                a = a * mask / (1.0 - dropout_p)
                masks.append(mask)
            else:
                masks.append(None)
            layer_inputs.append(a)
        else:
            a = z
    return a, layer_inputs, hidden_acts, masks


def _backward(model, cache, dout, dropout_p):
    """Gradients of the loss wrt every weight and bias, given d(loss)/d(output)."""
    layer_inputs, hidden_acts, masks = cache
    act_deriv = _ACTIVATIONS[model.activation][1]
    w_grads = [None] * len(model.weights)
    b_grads = [None] * len(model.biases)
    delta = dout
    for i in range(len(model.weights) - 1, -1, -1):
        w_grads[i] = layer_inputs[i].T @ delta
        b_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.weights[i].T
            if masks[i - 1] is not None:
                delta = delta * masks[i - 1] / (1.0 - dropout_p)
            delta = delta * act_deriv(None, hidden_acts[i - 1])
    return w_grads, b_grads


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 100
    max_epochs: int = 1000
    patience: int = 10
    dropout_p: float = 0.0
    validation_fraction: float = 0.2
    seed: int = 0
    # Hidden nonlinearity for the network built by the trainer.
    activation: str = "relu"
    # Supervised only: train against range-normalised labels (raw radius
    # values would otherwise dominate the joint loss).
    scale_labels: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def supervised_config(**overrides) -> TrainConfig:
    """Defaults for the supervised regressor: ADAM at 1e-3, minibatch 100,
    up to 1000 epochs, patience 10, no dropout."""
    base = dict(learning_rate=1e-3, batch_size=100, max_epochs=1000,
                patience=10, dropout_p=0.0, validation_fraction=0.2, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def selfsupervised_config(**overrides) -> TrainConfig:
    """Defaults for the self-supervised fitter: ADAM at 1e-4, minibatch
    128, patience 10, no dropout.

    Dropout defaults to 0: at p = 0.5 the 10-unit layers collapse to a
    heavily smoothed map whose reconstruction loss plateaus ~4x above the
    noise floor and every recovery metric degrades, so the regulariser is
    exposed but off.
    """
    base = dict(learning_rate=1e-4, batch_size=128, max_epochs=300,
                patience=10, dropout_p=0.0, validation_fraction=0.2, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class AdamState:
    m_w: list
    v_w: list
    m_b: list
    v_b: list
    t: int = 0


def init_adam_state(model: MlpModel) -> AdamState:
    return AdamState(
        m_w=[np.zeros_like(w) for w in model.weights],
        v_w=[np.zeros_like(w) for w in model.weights],
        m_b=[np.zeros_like(b) for b in model.biases],
        v_b=[np.zeros_like(b) for b in model.biases],
    )


def adam_step(model: MlpModel, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected ADAM update, in place.  Non-finite gradients
    abort training with a diagnostic."""
    w_grads, b_grads = grads
    for g in (*w_grads, *b_grads):
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient encountered; training aborted")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    lr, eps = config.learning_rate, config.epsilon
    for params, gs, ms, vs in (
        (model.weights, w_grads, state.m_w, state.v_w),
        (model.biases, b_grads, state.m_b, state.v_b),
    ):
        for p, g, m, v in zip(params, gs, ms, vs):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return model, state


# ---------------------------------------------------------------------------
# Output clamping
# ---------------------------------------------------------------------------

CLAMP_LOWS = np.array([fm.F_IC_RANGE[0], fm.F_EES_RANGE[0], fm.RADIUS_RANGE[0],
                       fm.D_EES_RANGE[0], S0_CLAMP_RANGE[0]])
CLAMP_HIGHS = np.array([fm.F_IC_RANGE[1], fm.F_EES_RANGE[1], fm.RADIUS_RANGE[1],
                        fm.D_EES_RANGE[1], S0_CLAMP_RANGE[1]])
CLAMP_SPANS = CLAMP_HIGHS - CLAMP_LOWS
CLAMP_MIDPOINTS = 0.5 * (CLAMP_LOWS + CLAMP_HIGHS)


def head_to_params(net_out):
    """Affine output head of the self-supervised network: the network
    works in range-normalised units (0..1 spans the parameter box), which
    keeps all weights O(1); this maps its outputs to physical units."""
    return CLAMP_LOWS + CLAMP_SPANS * np.asarray(net_out, dtype=float)


def clamp_params(raw):
    """Map raw network outputs onto the feasible parameter box.

    Each coordinate is clipped to its range; if the clipped fractions sum
    above 1 the pair is rescaled by 1/(f_ic + f_ees) (then re-clipped to
    the lower bounds, which the box-first ordering makes a no-op).
    Idempotent.  Accepts a 5-vector or an (N, 5) batch.
    """
    arr = np.asarray(raw, dtype=float)
    single = arr.ndim == 1
    clamped, _ = _clamp_with_info(np.atleast_2d(arr))
    return clamped[0] if single else clamped


def _clamp_with_info(raw):
    boxed = np.clip(raw, CLAMP_LOWS, CLAMP_HIGHS)
    in_box = (raw > CLAMP_LOWS) & (raw < CLAMP_HIGHS)
    pair_sum = boxed[:, 0] + boxed[:, 1]
    rescale = pair_sum > 1.0
    out = boxed.copy()
    if np.any(rescale):
        out[rescale, 0] = boxed[rescale, 0] / pair_sum[rescale]
        out[rescale, 1] = boxed[rescale, 1] / pair_sum[rescale]
        out[:, :2] = np.maximum(out[:, :2], CLAMP_LOWS[:2])
    info = {"in_box": in_box, "rescale": rescale, "boxed": boxed, "pair_sum": pair_sum}
    return out, info


def _clamp_vjp(info, g):
    """Backpropagate through the clamp: identity inside the box, zero
    outside; the rescale branch uses its exact Jacobian."""
    gb = g.copy()
    rescale = info["rescale"]
    if np.any(rescale):
        c0 = info["boxed"][rescale, 0]
        c1 = info["boxed"][rescale, 1]
        s2 = info["pair_sum"][rescale] ** 2
        g0 = g[rescale, 0]
        g1 = g[rescale, 1]
        gb[rescale, 0] = c1 * (g0 - g1) / s2
        gb[rescale, 1] = c0 * (g1 - g0) / s2
    return gb * info["in_box"]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainTrace:
    """Per-epoch losses; best_epoch indexes the minimum monitored loss."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""


def _split_indices(n, validation_fraction, rng):
    perm = rng.permutation(n)
    n_val = int(round(n * validation_fraction)) if validation_fraction > 0 else 0
    if validation_fraction > 0:
        n_val = max(1, min(n - 1, n_val))
    return perm[n_val:], perm[:n_val]


_LABEL_LOWS = CLAMP_LOWS[:4]
_LABEL_SPANS = CLAMP_HIGHS[:4] - CLAMP_LOWS[:4]


def scale_labels(params4: np.ndarray) -> np.ndarray:
    """Parameters -> [0, 1] by their biophysical ranges."""
    return (params4 - _LABEL_LOWS) / _LABEL_SPANS


def unscale_labels(scaled4: np.ndarray) -> np.ndarray:
    return scaled4 * _LABEL_SPANS + _LABEL_LOWS


def _run_training(model, x, evaluate_val, batch_step, config, rng):
    """Shared epoch loop: minibatch updates, per-epoch validation, best
    weight snapshotting and patience-based stopping."""
    n = x.shape[0]
    batch = min(config.batch_size, n)
    trace = TrainTrace()
    best = np.inf
    best_weights = model.copy_weights()
    bad_epochs = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            total += batch_step(idx) * idx.size
        train_loss = total / n
        val_loss = evaluate_val()
        monitored = train_loss if val_loss is None else val_loss
        trace.train_loss.append(train_loss)
        trace.val_loss.append(monitored)
        if monitored < best:
            best = monitored
            best_weights = model.copy_weights()
            trace.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
        if bad_epochs >= config.patience:
            trace.stop_reason = "patience"
            break
    else:
        trace.stop_reason = "max_epochs"
    model.set_weights(*best_weights)
    return trace


def train_supervised(dataset: SyntheticDataset, config: TrainConfig | None = None):
    """Fit the 4-output regressor on noisy signals against scaled
    ground-truth labels.  Returns (model, trace) with the weights from the
    epoch of minimum validation loss."""
    if config is None:
        config = supervised_config()
    if len(dataset) < 2:
        raise ValueError("dataset too small to split")
    x = dataset.noisy
    y = dataset.params[:, :4]
    if config.scale_labels:
        y = scale_labels(y)
    sizes = (x.shape[1], *SUPERVISED_HIDDEN, 4)
    model = init_mlp(sizes, seed=config.seed, activation=config.activation)
    state = init_adam_state(model)
    rng = _stream(config.seed, 1)
    train_idx, val_idx = _split_indices(len(dataset), config.validation_fraction, rng)
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]

    def batch_step(idx):
        xb, yb = x_train[idx], y_train[idx]
        out, *cache = _forward_cached(model, xb, config.dropout_p, rng)
        err = out - yb
        loss = float(np.mean(err * err))
        dout = 2.0 * err / err.size
        grads = _backward(model, cache, dout, config.dropout_p)
        adam_step(model, grads, state, config)
        return loss

    def evaluate_val():
        if x_val.shape[0] == 0:
            return None
        pred = mlp_forward(model, x_val)
        return float(np.mean((pred - y_val) ** 2))

    trace = _run_training(model, x_train, evaluate_val, batch_step, config, rng)
    return model, trace


def predict_supervised(model: MlpModel, signals, scaled_labels: bool = True) -> np.ndarray:
    """Forward pass (un-scaling the outputs when the model was trained on
    normalised labels), then clamp; s0 is fixed at 1.  Returns (N, 5)."""
    if model.layer_sizes[-1] != 4:
        raise ValueError("supervised model must have 4 outputs")
    x = np.atleast_2d(np.asarray(signals, dtype=float))
    out = mlp_forward(model, x)
    params4 = unscale_labels(out) if scaled_labels else out
    raw = np.column_stack([params4, np.ones(x.shape[0])])
    return clamp_params(raw)


def predict_selfsupervised(model: MlpModel, signals) -> np.ndarray:
    """Inference-mode parameters from a trained self-supervised model."""
    if model.layer_sizes[-1] != 5:
        raise ValueError("self-supervised model must have 5 outputs")
    x = np.atleast_2d(np.asarray(signals, dtype=float))
    return clamp_params(head_to_params(mlp_forward(model, x)))


def train_selfsupervised(
    signals,
    protocol: AcquisitionProtocol,
    config: TrainConfig | None = None,
    constants: fm.ModelConstants = fm.ModelConstants(),
):
    """Self-supervised fit: minimise the MSE between the noisy input
    signals and signals reconstructed from the network's clamped outputs
    through the forward model.  Gradients flow through the clamp
    (pass-through inside bounds, exact Jacobian on the fraction rescale,
    zero outside) and the analytic signal Jacobian.

    Returns (model, params, trace): per-voxel parameters for the whole
    input table, computed with the best-epoch weights in inference mode.
    """
    if config is None:
        config = selfsupervised_config()
    x = np.asarray(signals, dtype=float)
    if x.ndim != 2 or x.shape[1] != len(protocol):
        raise ValueError("signals must be (n_voxels, len(protocol))")
    if x.shape[0] < min(config.batch_size, 2):
        raise ValueError("need at least a batch of voxels")
    m = len(protocol)
    sizes = (m, *([m] * SELFSUP_HIDDEN_LAYERS), 5)
    model = init_mlp(sizes, seed=config.seed, activation=config.activation)
    # Start every output at its clamp-range midpoint (0.5 in normalised
    # head units) so all five parameters are in-range and receive
    # gradient from the first step.
    model.biases[-1] = np.full(5, 0.5)
    state = init_adam_state(model)
    rng = _stream(config.seed, 1)
    roots = fm.default_root_table()
    train_idx, val_idx = _split_indices(x.shape[0], config.validation_fraction, rng)
    x_train, x_val = x[train_idx], x[val_idx]

    def reconstruct(batch_x):
        raw = head_to_params(mlp_forward(model, batch_x))
        params, _ = _clamp_with_info(raw)
        return fm.signal_total(params, protocol, constants, roots, validate=False)

    def batch_step(idx):
        xb = x_train[idx]
        out, *cache = _forward_cached(model, xb, config.dropout_p, rng)
        params, clamp_info = _clamp_with_info(head_to_params(out))
        pred, jac = fm.signal_and_jacobian(params, protocol, constants, roots)
        err = pred - xb
        loss = float(np.mean(err * err))
        dpred = 2.0 * err / err.size
        dparams = np.einsum("nm,nmp->np", dpred, jac)
        dout = _clamp_vjp(clamp_info, dparams) * CLAMP_SPANS
        grads = _backward(model, cache, dout, config.dropout_p)
        adam_step(model, grads, state, config)
        return loss

    def evaluate_val():
        if x_val.shape[0] == 0:
            return None
        pred = reconstruct(x_val)
        return float(np.mean((pred - x_val) ** 2))

    trace = _run_training(model, x_train, evaluate_val, batch_step, config, rng)
    params = predict_selfsupervised(model, x)
    return model, params, trace


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

MODEL_FORMAT_VERSION = 1


def save_model(model: MlpModel, path, kind: str, extra: dict | None = None) -> None:
    """JSON model file: architecture header plus a base64 little-endian
    float64 blob of all weights then biases, layer by layer."""
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (*model.weights, *model.biases)
    )
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": kind,
        "layer_sizes": list(model.layer_sizes),
        "activation": model.activation,
        "seed": model.seed,
        "label_lows": list(_LABEL_LOWS),
        "label_highs": list(_LABEL_LOWS + _LABEL_SPANS),
        "weights_b64": base64.b64encode(blob).decode("ascii"),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_model(path):
    """Inverse of save_model; returns (MlpModel, metadata dict)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format in {path}")
    sizes = tuple(doc["layer_sizes"])
    flat = np.frombuffer(base64.b64decode(doc["weights_b64"]), dtype="<f8")
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
    for fan_out in sizes[1:]:
        biases.append(flat[pos : pos + fan_out].copy())
        pos += fan_out
    if pos != flat.size:
        raise ValueError(f"weight blob size mismatch in {path}")
    model = MlpModel(layer_sizes=sizes, weights=weights, biases=biases,
                     activation=doc["activation"], seed=doc["seed"])
    return model, doc
