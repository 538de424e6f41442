"""Training objectives with analytic gradients.

The heteroscedastic Gaussian loss treats each landmark axis as an
independent Gaussian: per axis 0.5 * (beta * log(var) + residual^2 / var),
summed over the three axes and averaged over landmarks and batch (the
likelihood's additive constant is dropped).  The skeleton term penalizes
the absolute mismatch of every skeletal edge length between predicted
and true landmark graphs, summed over edges and averaged over the batch.
"""

import numpy as np

from .validation import as_float_array


def nll_loss(mean, variance, targets, beta=1.0):
    """Gaussian negative log-likelihood.

    Arrays share the shape (..., 3); the leading dimensions (batch,
    landmarks) are averaged, the axis dimension is summed. Returns
    (loss, grad w.r.t. mean, grad w.r.t. log-variance) since the model
    head parameterizes the variance on a log scale.
    """
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if mean.shape != variance.shape or mean.shape != targets.shape:
        raise ValueError("mean, variance, and targets must share a shape")
    if np.any(variance <= 0.0):
        raise ValueError("variances must be strictly positive")

    residual = targets - mean
    per_axis = 0.5 * (beta * np.log(variance) + residual**2 / variance)
    n_outer = max(1, int(np.prod(mean.shape[:-1])))
    loss = float(per_axis.sum(axis=-1).reshape(-1).sum() / n_outer)

    grad_mean = (mean - targets) / variance / n_outer
    grad_logvar = 0.5 * (beta - residual**2 / variance) / n_outer
    return loss, grad_mean, grad_logvar


def _edge_arrays(edges):
    idx = np.asarray([(a - 1, b - 1) for a, b in edges], dtype=np.intp)
    return idx[:, 0], idx[:, 1]


def skeleton_pose_loss(predicted_positions, true_positions, edges):
    """Absolute edge-length mismatch between predicted and true graphs.

    Positions have shape (..., m, 3); the loss sums |d(pred_i, pred_j) -
    d(true_i, true_j)| over edges and averages over any batch dimension.
    A coincident predicted edge (zero length) sits at the distance kink
    and contributes a zero subgradient by convention. Returns
    (loss, grad w.r.t. predicted_positions).
    """
    pred = as_float_array(predicted_positions, "predicted_positions")
    true = as_float_array(true_positions, "true_positions")
    if pred.shape != true.shape:
        raise ValueError("predicted and true positions must share a shape")
    squeeze = pred.ndim == 2
    if squeeze:
        pred = pred[None]
        true = true[None]

    i_idx, j_idx = _edge_arrays(edges)
    diff_pred = pred[:, i_idx] - pred[:, j_idx]          # (n, E, 3)
    diff_true = true[:, i_idx] - true[:, j_idx]
    len_pred = np.linalg.norm(diff_pred, axis=2)
    len_true = np.linalg.norm(diff_true, axis=2)
    gap = len_pred - len_true
    n = pred.shape[0]
    loss = float(np.abs(gap).sum(axis=1).sum() / n)

    # d|gap|/d pred_i = sign(gap) * unit(pred_i - pred_j); zero at kinks.
    sign = np.sign(gap)
    safe_len = np.where(len_pred == 0.0, 1.0, len_pred)
    unit = np.where(len_pred[:, :, None] == 0.0, 0.0, diff_pred / safe_len[:, :, None])
    edge_grad = sign[:, :, None] * unit / n
    grad = np.zeros_like(pred)
    np.add.at(grad, (slice(None), i_idx), edge_grad)
    np.add.at(grad, (slice(None), j_idx), -edge_grad)

    return loss, (grad[0] if squeeze else grad)


def total_loss(nll, skeleton, lam):
    """Weighted sum of the two objectives."""
    return float(nll) + float(lam) * float(skeleton)
