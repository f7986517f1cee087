"""Disentanglement scoring and model inspection.

The MCC metric fits, for every (ground-truth dim i, learned dim j) pair, a
one-hidden-layer perceptron regressing i from j, and scores the held-out
non-linear R^2; a representation is disentangled when each ground-truth dim
is predicted almost perfectly by exactly one learned dim. The fitting
protocol (hidden width 32, 5000 sampled points, single fixed 90/10 split,
200 full-batch adaptive-moment epochs, shared fixed init) is pinned so
scores are comparable across models; sharing one init across pairs also
makes the score exactly invariant to column permutations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, adam_init, adam_step
from .data import TrajectoryDataset
from .graphs import AdjacencyMatrix
from .models import ModelState, decode_step, encode, wrap_leaves
from .training import reconstruction_loss

__all__ = [
    "MccReport",
    "mcc_score",
    "posterior_means",
    "extract_learned_graph",
    "entanglement_export",
    "intervene_rollout",
    "quartile_summary",
]


@dataclass
class MccReport:
    r2: np.ndarray          # (n_true, n_learned), clamped to [0, 1]
    mcc: float
    assignment: tuple[int, ...]  # argmax learned dim per ground-truth dim

    def to_json(self) -> str:
        return json.dumps(
            {"mcc": self.mcc, "assignment": list(self.assignment), "r2": self.r2.tolist()}
        )


def _standardize(train: np.ndarray, full: np.ndarray):
    mu = train.mean()
    sd = train.std()
    if sd < 1e-12:
        return None  # constant column, R^2 defined as 0
    return (full - mu) / sd


def _fit_r2_batch(x_cols: np.ndarray, y_col: np.ndarray, split: int, cfg) -> np.ndarray:
    """Held-out R^2 of `y ~ mlp(x_j)` for every column j of x_cols at once.

    x_cols: (rows, J); y_col: (rows,). First `split` rows train, rest test.
    Every pair shares the same initial weights, so the result for column j
    depends only on that column's data.
    """
    hidden, epochs, lr, seed = cfg
    rows, n_j = x_cols.shape
    xs, ys = [], []
    keep = []
    for j in range(n_j):
        x = _standardize(x_cols[:split, j], x_cols[:, j])
        if x is None:
            continue
        keep.append(j)
        xs.append(x)
    y = _standardize(y_col[:split], y_col)
    out = np.zeros(n_j)
    if y is None or not keep:
        return out
    x_all = np.stack(xs)[:, :, None]  # (P, rows, 1)
    p = x_all.shape[0]

    # random-feature style init: slopes/biases spread over the standardized
    # range so 200 epochs suffice even for steep inverse maps
    rng = np.random.default_rng(seed)
    w1_single = rng.uniform(-3.0, 3.0, size=(1, 1, hidden))
    b1_single = rng.uniform(-3.0, 3.0, size=(1, 1, hidden))
    w2_single = rng.uniform(-1, 1, size=(1, hidden, 1)) * np.sqrt(6.0 / (hidden + 1))
    params = {
        "w1": np.repeat(w1_single, p, axis=0),
        "b1": np.repeat(b1_single, p, axis=0),
        "w2": np.repeat(w2_single, p, axis=0),
        "b2": np.zeros((p, 1, 1)),
    }
    opt = adam_init(params, lr=lr)
    x_train = x_all[:, :split]
    y_train = np.broadcast_to(y[None, :split, None], (p, split, 1)).copy()
    for _ in range(epochs):
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        h = ad.tanh(ad.broadcast_add(ad.matmul(tape.constant(x_train), leaves["w1"]), leaves["b1"]))
        pred = ad.broadcast_add(ad.matmul(h, leaves["w2"]), leaves["b2"])
        loss = ad.tmean(ad.square(ad.sub(pred, tape.constant(y_train))))
        grads = tape.backward(loss)
        adam_step(opt, params, {k: grads[leaves[k]] for k in params})

    x_test = x_all[:, split:]
    h = np.tanh(x_test @ params["w1"] + params["b1"])
    pred = (h @ params["w2"] + params["b2"])[:, :, 0]
    y_test = y[split:]
    ss_res = ((pred - y_test[None, :]) ** 2).sum(axis=1)
    ss_tot = ((y_test - y_test.mean()) ** 2).sum()
    r2 = 1.0 - ss_res / max(ss_tot, 1e-12)
    out[keep] = np.clip(r2, 0.0, 1.0)
    return out


def mcc_score(
    ground_truth: np.ndarray,
    learned: np.ndarray,
    sample_limit: int = 5000,
    hidden: int = 32,
    epochs: int = 200,
    lr: float = 0.1,
    seed: int = 0,
) -> MccReport:
    """Mean over ground-truth dims of the best held-out nonlinear R^2."""
    gt = np.asarray(ground_truth, dtype=float)
    le = np.asarray(learned, dtype=float)
    if gt.ndim != 2 or le.ndim != 2 or gt.shape[0] != le.shape[0]:
        raise ValueError("ground truth and learned latents must be (N, dims) with equal N")
    n_rows = gt.shape[0]
    if n_rows < 500:
        raise ValueError("mcc needs at least 500 samples")
    if not (np.isfinite(gt).all() and np.isfinite(le).all()):
        raise ValueError("non-finite latents")
    rng = np.random.default_rng(seed)
    if n_rows > sample_limit:
        keep = rng.choice(n_rows, size=sample_limit, replace=False)
        gt, le = gt[keep], le[keep]
        n_rows = sample_limit
    order = rng.permutation(n_rows)
    gt, le = gt[order], le[order]
    split = int(round(0.9 * n_rows))

    n_true = gt.shape[1]
    fit_cfg = (hidden, epochs, lr, seed + 1)
    r2 = np.stack([_fit_r2_batch(le, gt[:, i], split, fit_cfg) for i in range(n_true)])
    assignment = tuple(int(j) for j in r2.argmax(axis=1))
    return MccReport(r2=r2, mcc=float(r2.max(axis=1).mean()), assignment=assignment)


# ---------------------------------------------------------------------------
# model inspection


def posterior_means(model: ModelState, states: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Encoder posterior means for a stack of trajectories (N, T+1, d)."""
    outs = []
    for lo in range(0, states.shape[0], chunk):
        tape = Tape()
        leaves = wrap_leaves(tape, model)
        mean, _ = encode(tape, leaves, model, states[lo : lo + chunk])
        outs.append(mean.data)
    return np.concatenate(outs, axis=0)


def extract_learned_graph(
    model: ModelState,
    dataset: TrajectoryDataset,
    max_rows: int = 256,
    threshold: float = 0.5,
):
    """Boolean parameter-influence graph of a trained decoder.

    Masked-attention decoders: eval-mode path counts averaged over validation
    (x_t, posterior-mean) pairs, state-token x parameter-token block. Gated
    decoders: gate probabilities. Returns (AdjacencyMatrix, pre-threshold
    real matrix).
    """
    kind = model.decoder.kind
    layout = model.layout
    if kind == "vcd":
        probs = 1.0 / (1.0 + np.exp(-model.params["vcd_gamma"]))
        block = probs[:, layout.state_tokens :]
        return AdjacencyMatrix(block > threshold), block
    if kind != "spartan":
        raise ValueError(f"decoder kind {kind!r} has no extractable graph")

    rows = dataset.val_indices
    if len(rows) == 0:
        rows = dataset.train_indices
    rows = rows[:max_rows]
    total = np.zeros((layout.tokens, layout.tokens))
    count = 0
    for lo in range(0, len(rows), 32):
        sel = rows[lo : lo + 32]
        tape = Tape()
        leaves = wrap_leaves(tape, model)
        _, aux = reconstruction_loss(
            tape, leaves, model, dataset.states[sel], mode="eval"
        )
        total += aux.info.paths.data.sum(axis=0)
        count += aux.info.paths.data.shape[0]
    mean_paths = total / max(count, 1)
    block = mean_paths[: layout.state_tokens, layout.state_tokens :]
    return AdjacencyMatrix(block > threshold), block


def entanglement_export(ground_truth: np.ndarray, learned: np.ndarray, path) -> None:
    """Long-format CSV of every (gt dim, learned dim) marginal pair."""
    gt = np.asarray(ground_truth, dtype=float)
    le = np.asarray(learned, dtype=float)
    if gt.shape[0] != le.shape[0]:
        raise ValueError("row counts differ")
    with open(path, "w") as fh:
        fh.write("sample,gt_dim,gt_value,learned_dim,learned_value\n")
        for s in range(gt.shape[0]):
            for i in range(gt.shape[1]):
                for j in range(le.shape[1]):
                    fh.write(f"{s},{i},{gt[s, i]:.12g},{j},{le[s, j]:.12g}\n")


def intervene_rollout(
    model: ModelState,
    x0: np.ndarray,
    theta_base: np.ndarray,
    dim: int,
    values,
) -> list[np.ndarray]:
    """Autoregressive eval-mode rollouts with one latent dimension swept."""
    if not 0 <= dim < model.layout.n_params:
        raise ValueError(f"latent dim {dim} out of range")
    outs = []
    for v in values:
        theta = np.asarray(theta_base, dtype=float).copy()
        theta[dim] = v
        states = np.empty((model.horizon + 1, model.layout.state_dim))
        states[0] = x0
        x = np.asarray(x0, dtype=float)[None, :]
        for t in range(model.horizon):
            tape = Tape()
            leaves = wrap_leaves(tape, model)
            pred, _ = decode_step(
                tape, leaves, model, tape.constant(x), tape.constant(theta[None, :]), mode="eval"
            )
            x = pred.data
            states[t + 1] = x[0]
        outs.append(states)
    return outs


def quartile_summary(values) -> dict:
    arr = np.asarray(sorted(float(v) for v in values))
    if arr.size == 0:
        raise ValueError("no values to summarise")
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {
        "min": float(arr[0]),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(arr[-1]),
        "count": int(arr.size),
    }
