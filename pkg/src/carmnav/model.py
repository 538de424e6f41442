"""Probabilistic displacement regressor with MC-dropout uncertainty.

The network encodes the observation vector, concatenates an affine
embedding of the current pose, and emits a diagonal 3D Gaussian per
landmark: 14 x 3 x 2 = 84 output neurons (mean and log-variance per
axis).  Epistemic uncertainty comes from the spread of means across
stochastic dropout passes; aleatoric uncertainty is the predicted
variance itself; their sum is the total used for conformal scaling.
"""

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import nn
from .anatomy import N_LANDMARKS, SKELETON_EDGES
from .losses import nll_loss, skeleton_pose_loss, total_loss
from .utils import named_rng
from .validation import NumericError, as_float_array

# Log-variance clamp. Keeps the NLL away from variance collapse and
# bounds predicted variances to [e^-10, e^3].
LOGVAR_MIN = -10.0
LOGVAR_MAX = 3.0

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GaussianPrediction:
    """Per-landmark displacement Gaussians; arrays are (..., 14, 3)."""

    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class McdEstimate:
    """Aggregate of T stochastic passes; arrays are (..., 14, 3) except
    ``scalar_total`` which averages the per-axis totals to (..., 14)."""

    mean: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray
    total: np.ndarray
    scalar_total: np.ndarray


def aggregate_mcd(mean_stack, variance_stack):
    """Combine per-pass Gaussians (leading axis = pass index).

    The epistemic term is the population variance of the means across
    passes (exactly zero for a single pass); the aleatoric term is the
    mean of the predicted variances; the total is their sum.
    """
    mean_stack = np.asarray(mean_stack, dtype=np.float64)
    variance_stack = np.asarray(variance_stack, dtype=np.float64)
    mean = mean_stack.mean(axis=0)
    epistemic = np.mean((mean_stack - mean) ** 2, axis=0)
    aleatoric = variance_stack.mean(axis=0)
    total = epistemic + aleatoric
    return McdEstimate(
        mean=mean,
        epistemic=epistemic,
        aleatoric=aleatoric,
        total=total,
        scalar_total=total.mean(axis=-1),
    )


class _Network:
    """Parameter container wiring encoder, pose embedding, and head."""

    def __init__(self, encoder, pose_embed, head, obs_dim, hidden_width, pose_embed_dim):
        self.encoder = encoder
        self.pose_embed = pose_embed
        self.head = head
        self.obs_dim = obs_dim
        self.hidden_width = hidden_width
        self.pose_embed_dim = pose_embed_dim

    @classmethod
    def create(cls, obs_dim, hidden_width, pose_embed_dim, rng):
        encoder = nn.init_layers([obs_dim, hidden_width, hidden_width], rng)
        pose_embed = nn.init_layers([3, pose_embed_dim], rng)
        head = nn.init_layers(
            [hidden_width + pose_embed_dim, hidden_width, hidden_width, N_LANDMARKS * 6], rng
        )
        return cls(encoder, pose_embed, head, obs_dim, hidden_width, pose_embed_dim)

    def mask_widths(self):
        # Dropout sits after every activated layer: both encoder layers
        # and both head hidden layers.
        return [self.hidden_width] * 4

    def forward(self, pose, obs, masks=None):
        enc_masks = masks[:2] if masks is not None else None
        head_masks = masks[2:] if masks is not None else None
        f, enc_trace = nn.mlp_forward(self.encoder, obs, enc_masks, activate_final=True)
        e, emb_trace = nn.mlp_forward(self.pose_embed, pose)
        joint = np.concatenate([f, e], axis=1)
        out, head_trace = nn.mlp_forward(self.head, joint, head_masks)
        return out, (enc_trace, emb_trace, head_trace)

    def backward(self, traces, grad_out):
        enc_trace, emb_trace, head_trace = traces
        head_grads, grad_joint = nn.mlp_backward(head_trace, grad_out)
        enc_grads, _ = nn.mlp_backward(enc_trace, grad_joint[:, : self.hidden_width])
        emb_grads, _ = nn.mlp_backward(emb_trace, grad_joint[:, self.hidden_width:])
        flat = []
        for dW, db in enc_grads + emb_grads + head_grads:
            flat.extend([dW, db])
        return flat

    def param_arrays(self):
        flat = []
        for layer in self.encoder + self.pose_embed + self.head:
            flat.extend([layer.weights, layer.biases])
        return flat


def _split_gaussian(out):
    """(n, 84) head output -> means and clamped variances, plus the
    in-range mask needed to backpropagate through the clamp."""
    shaped = out.reshape(-1, N_LANDMARKS, 3, 2)
    mean = shaped[..., 0]
    raw_logvar = shaped[..., 1]
    logvar = np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)
    in_range = (raw_logvar > LOGVAR_MIN) & (raw_logvar < LOGVAR_MAX)
    return mean, np.exp(logvar), in_range


def _pack_grad(grad_mean, grad_raw_logvar):
    n = grad_mean.shape[0]
    grad = np.empty((n, N_LANDMARKS, 3, 2))
    grad[..., 0] = grad_mean
    grad[..., 1] = grad_raw_logvar
    return grad.reshape(n, N_LANDMARKS * 6)


def training_step_gradients(net, pose, obs, targets, masks, beta, skeleton_weight, edges):
    """Loss value and parameter gradients for one (masked) batch.

    One masked forward provides the means for both the Gaussian loss and
    the skeleton term; predicted landmark positions are pose + mean.
    """
    out, traces = net.forward(pose, obs, masks)
    mean, variance, in_range = _split_gaussian(out)
    nll, grad_mean, grad_logvar = nll_loss(mean, variance, targets, beta)
    skeleton = 0.0
    if skeleton_weight != 0.0:
        pred_positions = pose[:, None, :] + mean
        true_positions = pose[:, None, :] + targets
        skeleton, grad_skel = skeleton_pose_loss(pred_positions, true_positions, edges)
        grad_mean = grad_mean + skeleton_weight * grad_skel
    loss = total_loss(nll, skeleton, skeleton_weight)
    grad_out = _pack_grad(grad_mean, grad_logvar * in_range)
    return loss, net.backward(traces, grad_out)


class DisplacementRegressor(BaseEstimator):
    """Gaussian displacement regressor with MC-dropout uncertainty.

    Features are rows of [pose (3), observation (D)]; targets are the 42
    displacement components (14 landmarks x 3 axes, landmark-major).
    Training minimizes the Gaussian negative log-likelihood plus a
    weighted skeleton edge-length penalty, with AdamW and fresh dropout
    masks per batch. Fully deterministic in ``seed``.
    """

    def __init__(self, hidden_width=128, pose_embed_dim=16, epochs=50, batch_size=128,
                 learning_rate=1e-3, weight_decay=1e-2, dropout=0.3, beta=1.0,
                 skeleton_weight=1.0, skeleton_edges=None, mcd_passes=20, seed=0):
        self.hidden_width = hidden_width
        self.pose_embed_dim = pose_embed_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.beta = beta
        self.skeleton_weight = skeleton_weight
        self.skeleton_edges = skeleton_edges
        self.mcd_passes = mcd_passes
        self.seed = seed

    # -- construction ---------------------------------------------------

    def _edges(self):
        return SKELETON_EDGES if self.skeleton_edges is None else tuple(self.skeleton_edges)

    def _check_config(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.beta < 0 or self.skeleton_weight < 0:
            raise ValueError("beta and skeleton_weight must be nonnegative")

    def initialize(self, n_features):
        """Build the untrained network for a given feature width."""
        self._check_config()
        obs_dim = int(n_features) - 3
        if obs_dim < N_LANDMARKS:
            raise ValueError(f"expected >= {3 + N_LANDMARKS} features, got {n_features}")
        rng = named_rng(self.seed, "init")
        self.net_ = _Network.create(obs_dim, self.hidden_width, self.pose_embed_dim, rng)
        self.n_features_in_ = int(n_features)
        self.obs_dim_ = obs_dim
        self.loss_curve_ = []
        self._optimizer = nn.AdamW(lr=self.learning_rate, weight_decay=self.weight_decay)
        self._epochs_done = 0
        return self

    def _require_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(
                "this DisplacementRegressor is not fitted; call fit or initialize first"
            )

    def _validate_X(self, X, for_training=False):
        X = as_float_array(X, "X", ndim=2)
        if for_training:
            if X.shape[1] < 3 + N_LANDMARKS:
                raise ValueError(f"X must have >= {3 + N_LANDMARKS} columns (pose + observation)")
        else:
            self._require_fitted()
            if X.shape[1] != self.n_features_in_:
                raise ValueError(
                    f"X has {X.shape[1]} features; model was fitted with {self.n_features_in_}"
                )
        return X

    @staticmethod
    def _validate_y(y, n):
        y = as_float_array(y, "y")
        if y.ndim == 2 and y.shape == (n, N_LANDMARKS * 3):
            y = y.reshape(n, N_LANDMARKS, 3)
        if y.shape != (n, N_LANDMARKS, 3):
            raise ValueError(f"y must be (n, {N_LANDMARKS * 3}) or (n, {N_LANDMARKS}, 3)")
        return y

    # -- training ---------------------------------------------------------

    def _run_epoch(self, X, y, epoch_index):
        n = X.shape[0]
        shuffle_rng = named_rng(self.seed, "shuffle", epoch_index)
        dropout_rng = named_rng(self.seed, "dropout", epoch_index)
        order = shuffle_rng.permutation(n)
        widths = self.net_.mask_widths()
        epoch_loss = 0.0
        for start in range(0, n, self.batch_size):
            batch = order[start:start + self.batch_size]
            masks = (nn.draw_dropout_masks(widths, self.dropout, dropout_rng)
                     if self.dropout > 0 else None)
            loss, grads = training_step_gradients(
                self.net_, X[batch, :3], X[batch, 3:], y[batch], masks,
                self.beta, self.skeleton_weight, self._edges(),
            )
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch_index}, batch {start // self.batch_size}"
                )
            self._optimizer.step(self.net_.param_arrays(), grads)
            epoch_loss += loss * len(batch)
        return epoch_loss / n

    def fit(self, X, y):
        X = self._validate_X(X, for_training=True)
        if X.shape[0] == 0:
            raise ValueError("training set is empty")
        y = self._validate_y(y, X.shape[0])
        self.initialize(X.shape[1])
        for epoch in range(self.epochs):
            self.loss_curve_.append(self._run_epoch(X, y, epoch))
            self._epochs_done += 1
        return self

    def partial_fit(self, X, y):
        """Run one additional epoch, keeping optimizer state."""
        X = self._validate_X(X, for_training=True)
        y = self._validate_y(y, X.shape[0])
        if not hasattr(self, "net_"):
            self.initialize(X.shape[1])
        self.loss_curve_.append(self._run_epoch(X, y, self._epochs_done))
        self._epochs_done += 1
        return self

    # -- inference ----------------------------------------------------------

    def predict_gaussian(self, X, masks=None):
        """Per-landmark Gaussians; deterministic when no masks are given."""
        X = self._validate_X(X)
        out, _ = self.net_.forward(X[:, :3], X[:, 3:], masks)
        mean, variance, _ = _split_gaussian(out)
        return GaussianPrediction(mean=mean, variance=variance)

    def predict(self, X):
        """Mean displacements, (n, 14, 3)."""
        return self.predict_gaussian(X).mean

    def predict_mcd(self, X, T=None, rng=None):
        """MC-dropout aggregate over T stochastic passes.

        Masks are drawn per sample and per pass. With dropout disabled
        the single deterministic pass is returned with exactly zero
        epistemic variance.
        """
        X = self._validate_X(X)
        T = self.mcd_passes if T is None else int(T)
        if T < 1:
            raise ValueError("T must be >= 1")
        if self.dropout == 0.0:
            pred = self.predict_gaussian(X)
            zeros = np.zeros_like(pred.mean)
            total = zeros + pred.variance
            return McdEstimate(mean=pred.mean, epistemic=zeros, aleatoric=pred.variance,
                               total=total, scalar_total=total.mean(axis=-1))
        rng = rng if isinstance(rng, np.random.Generator) else named_rng(
            self.seed if rng is None else rng, "mcd")
        widths = self.net_.mask_widths()
        means, variances = [], []
        for _ in range(T):
            masks = nn.draw_dropout_masks(widths, self.dropout, rng, n_rows=X.shape[0])
            pred = self.predict_gaussian(X, masks=masks)
            means.append(pred.mean)
            variances.append(pred.variance)
        return aggregate_mcd(np.stack(means), np.stack(variances))


# --- checkpointing -----------------------------------------------------------

def save_checkpoint(model, path):
    model._require_fitted()
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": {
            "obs_dim": model.obs_dim_,
            "hidden_width": model.hidden_width,
            "pose_embed_dim": model.pose_embed_dim,
            "dropout": model.dropout,
            "mcd_passes": model.mcd_passes,
        },
        "params": {
            "encoder": nn.params_to_json(model.net_.encoder),
            "pose_embed": nn.params_to_json(model.net_.pose_embed),
            "head": nn.params_to_json(model.net_.head),
        },
        "seed": model.seed,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {doc.get('format_version')}")
    arch = doc["architecture"]
    model = DisplacementRegressor(
        hidden_width=arch["hidden_width"],
        pose_embed_dim=arch["pose_embed_dim"],
        dropout=arch["dropout"],
        mcd_passes=arch["mcd_passes"],
        seed=doc.get("seed", 0),
    )
    model.initialize(arch["obs_dim"] + 3)
    model.net_.encoder = nn.params_from_json(doc["params"]["encoder"])
    model.net_.pose_embed = nn.params_from_json(doc["params"]["pose_embed"])
    model.net_.head = nn.params_from_json(doc["params"]["head"])
    return model
