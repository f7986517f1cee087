"""Conditional-VAE losses and the dual-constrained sparsification loop.

Training is two-phase: a pretraining phase minimises reconstruction + scaled
KL + logit regularisation; after the switch, the sparsity penalty (path
counts for masked attention, gate L1 for global gates) is minimised subject
to the non-causal losses staying under a target, enforced via a softplus
Lagrange multiplier with alternating ascent steps.

The constraint fed to both the phase-2 objective and the multiplier update is
normalised by the target, which makes the dual step size scale-free; this is
a reparameterisation of the multiplier, not a change of the constrained
problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape, Tensor, adam_init, adam_step
from .data import TrajectoryDataset
from .models import (
    DecodeInfo,
    DecoderConfig,
    ModelState,
    decode_step,
    default_encoder_config,
    encode,
    init_model,
    reparameterize,
    save_checkpoint,
    load_checkpoint,
    wrap_leaves,
)

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "TrainResult",
    "TrainingDiverged",
    "reconstruction_loss",
    "kl_loss",
    "logit_loss",
    "path_loss",
    "gate_l1",
    "dual_value",
    "dual_step",
    "train_run",
    "write_history_csv",
]


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the last finite model and partial history."""

    def __init__(self, message, last_model=None, history=None):
        super().__init__(message)
        self.last_model = last_model
        self.history = history or []


@dataclass
class TrainConfig:
    env: str
    decoder: str = "spartan"
    seed: int = 0
    batch_size: int = 16
    epochs: int = 30
    pretrain_epochs: int = 10
    steps_per_epoch: int = 0          # 0 -> ceil(train rows / batch)
    lr_model: float = 3e-3
    lr_dual: float = 1e-2
    beta_kl: float = 1e-6
    lambda_logit: float = 1e-4
    target_loss: float = 0.0          # 0 -> target_margin x phase-1 val loss
    target_margin: float = 1.2
    time_samples: int = 12            # teacher-forcing pairs per trajectory per step
    dual_init: float = -2.0           # raw softplus variable at the switch
    enc_hidden: tuple[int, ...] = (128, 128)
    pool_window: int = 0
    dec_layers: int = 2
    dec_width: int = 32
    dec_key_dim: int = 16
    dec_ffn: int = 64
    dec_hidden: tuple[int, ...] = (64,)
    token_mode: str = ""              # "" -> environment default
    gate_temperature: float = 1.0
    eval_threshold: float = 0.5
    val_rows: int = 64
    val_time_samples: int = 16
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_hidden"] = list(self.enc_hidden)
        d["dec_hidden"] = list(self.dec_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("enc_hidden", "dec_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LossBreakdown:
    epoch: int
    rec: float
    kl: float
    logit: float
    path: float
    dual: float
    total: float

    def as_csv_row(self) -> str:
        return f"{self.epoch},{self.rec:.10g},{self.kl:.10g},{self.logit:.10g},{self.path:.10g},{self.dual:.10g}"


@dataclass
class TrainResult:
    model: ModelState
    history: list[LossBreakdown]
    target_loss: float
    switch_epoch: int
    config: TrainConfig


@dataclass
class RecAux:
    mean: Tensor
    logvar: Tensor
    theta: Tensor
    info: DecodeInfo


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(
    tape: Tape,
    leaves: dict[str, Tensor],
    model: ModelState,
    states: np.ndarray,
    mode: str = "train",
    mask_rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    time_indices: np.ndarray | None = None,
) -> tuple[Tensor, RecAux]:
    """Teacher-forced next-state MSE with theta sampled from the posterior.

    ``time_indices`` selects which (x_t -> x_{t+1}) pairs enter the average;
    None means every step of the horizon.
    """
    states = np.asarray(states, dtype=float)
    b, steps, d = states.shape
    mean, logvar = encode(tape, leaves, model, states)
    if noise is None:
        noise = np.zeros(mean.shape)
    theta = reparameterize(mean, logvar, noise)

    if time_indices is None:
        time_indices = np.arange(steps - 1)
    t_idx = np.asarray(time_indices, dtype=int)
    k = len(t_idx)
    xs = tape.constant(states[:, t_idx, :].reshape(b * k, d))
    targets = tape.constant(states[:, t_idx + 1, :].reshape(b * k, d))

    n = model.layout.n_params
    theta_rep = ad.reshape(
        ad.expand(ad.reshape(theta, (b, 1, n)), (b, k, n)), (b * k, n)
    )
    pred, info = decode_step(
        tape, leaves, model, xs, theta_rep, mode=mode, rng=mask_rng
    )
    rec = ad.tmean(ad.square(ad.sub(pred, targets)))
    return rec, RecAux(mean=mean, logvar=logvar, theta=theta, info=info)


def kl_loss(mean: Tensor, logvar: Tensor) -> Tensor:
    """KL(q || N(0, I)) per sample, batch-averaged; zero iff posterior is the prior."""
    tape = mean.tape
    ones = tape.constant(np.ones(mean.shape))
    inner = ad.sub(ad.add(ad.texp(logvar), ad.square(mean)), ad.add(ones, logvar))
    return ad.scale(ad.tmean(ad.tsum(inner, axis=-1)), 0.5)


def logit_loss(raw_logits: list[Tensor], lam: float) -> Tensor | float:
    """Symmetric exp penalty on attention logits, averaged over layers/tokens.

    Returns plain 0.0 when there is nothing to regularise (no attention or
    lam == 0) so ablation runs never evaluate exp on runaway logits.
    """
    if not raw_logits or lam == 0.0:
        return 0.0
    acc = None
    for raw in raw_logits:
        term = ad.tmean(ad.add(ad.texp(raw), ad.texp(ad.scale(raw, -1.0))))
        acc = term if acc is None else ad.add(acc, term)
    return ad.scale(acc, lam / len(raw_logits))


def path_loss(info: DecodeInfo) -> Tensor | float:
    """Mean over decoded steps of the entrywise path-count sum (>= token count)."""
    if info.paths is None:
        return 0.0
    per_seq = ad.tsum(ad.tsum(info.paths, axis=-1), axis=-1)
    return ad.tmean(per_seq)


def gate_l1(leaves: dict[str, Tensor], model: ModelState) -> Tensor | float:
    """Global-gate decoders: L1 of the gate probabilities replaces path counts."""
    if "vcd_gamma" not in leaves:
        return 0.0
    return ad.tsum(ad.sigmoid(leaves["vcd_gamma"]))


def sparsity_loss(leaves, model: ModelState, info: DecodeInfo) -> Tensor | float:
    if model.decoder.kind == "spartan":
        return path_loss(info)
    if model.decoder.kind == "vcd":
        return gate_l1(leaves, model)
    return 0.0


def dual_value(raw: float) -> float:
    """softplus keeps the multiplier strictly positive."""
    return math.log1p(math.exp(-abs(raw))) + max(raw, 0.0)


def dual_step(raw: float, constraint: float, rate: float) -> float:
    """Ascent on the unconstrained dual variable: raw += rate * constraint."""
    if rate <= 0:
        raise ValueError("dual rate must be positive")
    return raw + rate * constraint


# ---------------------------------------------------------------------------
# training loop


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def _rng_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "shuffle", "time", "mask", "noise")
    return {
        name: np.random.default_rng(np.random.SeedSequence([seed, i]))
        for i, name in enumerate(names)
    }


def _save_rng(streams) -> dict:
    return {name: g.bit_generator.state for name, g in streams.items()}


def _load_rng(states: dict) -> dict[str, np.random.Generator]:
    out = {}
    for name, st in states.items():
        g = np.random.default_rng(0)
        g.bit_generator.state = st
        out[name] = g
    return out


def build_model_for(cfg: TrainConfig, dataset: TrajectoryDataset, rng) -> ModelState:
    spec = dataset.spec
    token_mode = cfg.token_mode or spec.token_mode
    dec = DecoderConfig(
        kind=cfg.decoder,
        token_mode=token_mode,
        layers=cfg.dec_layers,
        width=cfg.dec_width,
        key_dim=cfg.dec_key_dim,
        ffn_width=cfg.dec_ffn,
        hidden=tuple(cfg.dec_hidden),
        gate_temperature=cfg.gate_temperature,
        eval_threshold=cfg.eval_threshold,
    )
    enc = default_encoder_config(spec, hidden=cfg.enc_hidden, pool_window=cfg.pool_window)
    return init_model(spec, dec, rng, encoder=enc)


def evaluate_breakdown(
    model: ModelState,
    dataset: TrajectoryDataset,
    cfg: TrainConfig,
    epoch: int,
    dual_raw: float,
    target_loss: float,
    phase2: bool,
) -> LossBreakdown:
    """Deterministic validation losses: posterior mean, thresholded masks."""
    rows = dataset.val_indices[: cfg.val_rows]
    if len(rows) == 0:
        rows = dataset.train_indices[: cfg.val_rows]
    steps = dataset.spec.horizon
    k = min(cfg.val_time_samples, steps)
    t_idx = np.unique(np.linspace(0, steps - 1, num=k).round().astype(int))
    tape = Tape()
    leaves = wrap_leaves(tape, model)
    rec, aux = reconstruction_loss(
        tape, leaves, model, dataset.states[rows], mode="eval", time_indices=t_idx
    )
    klv = kl_loss(aux.mean, aux.logvar)
    lg = logit_loss(aux.info.raw_logits, cfg.lambda_logit)
    sp = sparsity_loss(leaves, model, aux.info)
    lam = dual_value(dual_raw)
    core = _value(rec) + cfg.beta_kl * _value(klv) + _value(lg)
    if phase2:
        total = _value(sp) + lam * (core / max(target_loss, 1e-300) - 1.0)
    else:
        total = core
    return LossBreakdown(
        epoch=epoch,
        rec=_value(rec),
        kl=_value(klv),
        logit=_value(lg),
        path=_value(sp),
        dual=lam,
        total=total,
    )


def train_run(
    cfg: TrainConfig,
    dataset: TrajectoryDataset,
    checkpoint_dir=None,
    resume_from=None,
    log=None,
) -> TrainResult:
    """Two-phase constrained training; see module docstring.

    Raises TrainingDiverged (with the last finite model attached) if any loss
    goes non-finite.
    """
    if cfg.env != dataset.spec.env:
        raise ValueError(f"config env {cfg.env!r} != dataset env {dataset.spec.env!r}")

    history: list[LossBreakdown] = []
    target_loss = cfg.target_loss
    start_epoch = 0
    if resume_from is not None:
        model, extra = load_checkpoint(resume_from)
        moments_m = {}
        moments_v = {}
        for name in list(model.params):
            if name.startswith("adam_m::"):
                moments_m[name[8:]] = model.params.pop(name)
            elif name.startswith("adam_v::"):
                moments_v[name[8:]] = model.params.pop(name)
        opt = adam_init(model.params, cfg.lr_model)
        opt.step = extra["optimizer"]["step"]
        opt.m.update(moments_m)
        opt.v.update(moments_v)
        streams = _load_rng(extra["rng"])
        dual_raw = model.dual_raw
        target_loss = extra["target_loss"]
        start_epoch = extra["epoch"] + 1
        history = [LossBreakdown(**h) for h in extra["history"]]
    else:
        streams = _rng_streams(cfg.seed)
        model = build_model_for(cfg, dataset, streams["init"])
        model.dual_raw = cfg.dual_init
        opt = adam_init(model.params, cfg.lr_model)
        dual_raw = cfg.dual_init

    train_rows = dataset.train_indices
    steps_per_epoch = cfg.steps_per_epoch or -(-len(train_rows) // cfg.batch_size)
    horizon = dataset.spec.horizon
    last_good = model.copy()

    for epoch in range(start_epoch, cfg.epochs):
        phase2 = epoch >= cfg.pretrain_epochs
        if phase2 and target_loss == 0.0:
            probe = evaluate_breakdown(model, dataset, cfg, epoch, dual_raw, 1.0, False)
            target_loss = cfg.target_margin * max(
                probe.rec + cfg.beta_kl * probe.kl + probe.logit, 1e-12
            )
        order = streams["shuffle"].permutation(train_rows)
        try:
            for it in range(steps_per_epoch):
                lo = (it * cfg.batch_size) % len(order)
                rows = order[lo : lo + cfg.batch_size]
                if len(rows) < cfg.batch_size:
                    rows = np.concatenate([rows, order[: cfg.batch_size - len(rows)]])
                k = min(cfg.time_samples, horizon)
                t_idx = np.sort(streams["time"].choice(horizon, size=k, replace=False))

                tape = Tape()
                leaves = wrap_leaves(tape, model)
                noise = streams["noise"].standard_normal((len(rows), model.layout.n_params))
                rec, aux = reconstruction_loss(
                    tape,
                    leaves,
                    model,
                    dataset.states[rows],
                    mode="train",
                    mask_rng=streams["mask"],
                    noise=noise,
                    time_indices=t_idx,
                )
                klv = kl_loss(aux.mean, aux.logvar)
                lg = logit_loss(aux.info.raw_logits, cfg.lambda_logit)
                core = ad.add(rec, ad.scale(klv, cfg.beta_kl))
                if isinstance(lg, Tensor):
                    core = ad.add(core, lg)
                if phase2:
                    sp = sparsity_loss(leaves, model, aux.info)
                    lam = dual_value(dual_raw)
                    # constraint normalised by the target: scale-free dual dynamics
                    c_norm = ad.scale(core, 1.0 / target_loss)
                    penalty = ad.scale(c_norm, lam)
                    objective = ad.add(sp, penalty) if isinstance(sp, Tensor) else penalty
                else:
                    objective = core
                grads = tape.backward(objective)
                adam_step(opt, model.params, {n: grads[leaves[n]] for n in model.params})
                if phase2:
                    c_value = _value(core) / target_loss - 1.0
                    dual_raw = dual_step(dual_raw, c_value, cfg.lr_dual)
                    model.dual_raw = dual_raw
        except NumericError as exc:
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}: {exc}", last_model=last_good, history=history
            ) from exc

        breakdown = evaluate_breakdown(
            model, dataset, cfg, epoch, dual_raw, target_loss or 1.0, phase2
        )
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(
                f"non-finite validation loss at epoch {epoch}", last_model=last_good, history=history
            )
        history.append(breakdown)
        last_good = model.copy()
        if log:
            log(breakdown)
        if checkpoint_dir is not None:
            due = cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0
            if due or epoch == cfg.epochs - 1:
                _write_checkpoint(
                    checkpoint_dir, model, opt, streams, epoch, target_loss, history, cfg
                )

    return TrainResult(
        model=model,
        history=history,
        target_loss=target_loss,
        switch_epoch=cfg.pretrain_epochs,
        config=cfg,
    )


def _write_checkpoint(directory, model, opt, streams, epoch, target_loss, history, cfg):
    import os

    os.makedirs(directory, exist_ok=True)
    extra = {
        "epoch": epoch,
        "target_loss": target_loss,
        "optimizer": {"step": opt.step},
        "rng": _save_rng(streams),
        "history": [asdict(h) for h in history],
        "config": cfg.to_dict(),
    }
    snapshot = model.copy()  # optimiser moments ride along as extra tensors
    for name in model.params:
        snapshot.params[f"adam_m::{name}"] = opt.m[name]
        snapshot.params[f"adam_v::{name}"] = opt.v[name]
    save_checkpoint(os.path.join(directory, f"epoch{epoch:04d}.ckpt"), snapshot, extra)
    save_checkpoint(os.path.join(directory, "final.ckpt"), snapshot, extra)


def write_history_csv(history: list[LossBreakdown], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,rec,kl,logit,path,dual\n")
        for row in history:
            fh.write(row.as_csv_row() + "\n")
