"""Encoder and decoder families over the autodiff engine.

One encoder (MLP over the flattened, optionally time-pooled trajectory) and
four decoders that differ only in how they constrain the parameter→state
information flow:

- ``mlp``: unconstrained perceptron on concat(x_t, theta_hat)
- ``transformer``: token attention, no masking
- ``vcd``: perceptron branches gated by a learned global boolean graph
- ``spartan``: token attention masked by per-input sampled boolean graphs

All decoders predict the absolute next state. Token sequences are
``[state tokens..., parameter tokens...]``; each slot has its own learned
affine embedding and, for state slots, its own output projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .envs import SystemSpec

__all__ = [
    "EncoderConfig",
    "DecoderConfig",
    "TokenLayout",
    "ModelState",
    "DecodeInfo",
    "ModelError",
    "default_encoder_config",
    "init_model",
    "pool_trajectories",
    "encode",
    "reparameterize",
    "decode_step",
    "masked_attention",
    "path_counts",
    "vcd_gates",
    "save_checkpoint",
    "load_checkpoint",
]

DECODER_KINDS = ("mlp", "transformer", "vcd", "spartan")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    latent_dim: int
    hidden: tuple[int, ...] = (128, 128)
    pool_window: int = 0  # 0 = plain flatten; >0 = mean over time windows

    def __post_init__(self):
        if self.latent_dim < 1 or any(h < 1 for h in self.hidden):
            raise ModelError("encoder dimensions must be positive")


@dataclass(frozen=True)
class DecoderConfig:
    kind: str
    token_mode: str = "per-dim"
    layers: int = 2
    width: int = 32
    key_dim: int = 16
    ffn_width: int = 64
    hidden: tuple[int, ...] = (64,)  # mlp / vcd branch widths
    gate_temperature: float = 1.0
    eval_threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in DECODER_KINDS:
            raise ModelError(f"unknown decoder kind {self.kind!r}")
        if self.layers < 1 or self.key_dim < 1 or self.width < 1:
            raise ModelError("decoder dimensions must be positive")


@dataclass(frozen=True)
class TokenLayout:
    mode: str
    num_objects: int
    state_dim: int
    n_params: int

    @property
    def slot_size(self) -> int:
        return 4 if self.mode == "per-object" else 1

    @property
    def state_tokens(self) -> int:
        return self.num_objects if self.mode == "per-object" else self.state_dim

    @property
    def tokens(self) -> int:
        return self.state_tokens + self.n_params


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    encoder: EncoderConfig
    decoder: DecoderConfig
    layout: TokenLayout
    horizon: int
    dual_raw: float = -2.0  # unconstrained dual variable, multiplier = softplus

    def copy(self) -> "ModelState":
        return ModelState(
            params={k: v.copy() for k, v in self.params.items()},
            encoder=self.encoder,
            decoder=self.decoder,
            layout=self.layout,
            horizon=self.horizon,
            dual_raw=self.dual_raw,
        )


@dataclass
class DecodeInfo:
    raw_logits: list[Tensor] = field(default_factory=list)  # one (N,m,m) per layer
    masks: list[Tensor] = field(default_factory=list)
    paths: Tensor | None = None          # (N,m,m) path counts, spartan only
    gates: Tensor | None = None          # (blocks, blocks) vcd gates


def default_encoder_config(
    spec: SystemSpec, hidden=(128, 128), pool_window: int = 0
) -> EncoderConfig:
    steps = spec.horizon + 1
    if pool_window > 0:
        steps = -(-steps // pool_window)  # ceil
    return EncoderConfig(
        input_dim=steps * spec.state_dim,
        latent_dim=spec.param_dim,
        hidden=tuple(hidden),
        pool_window=pool_window,
    )


def _glorot(rng, fan_in, fan_out, shape=None):
    shape = shape if shape is not None else (fan_in, fan_out)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_model(
    spec: SystemSpec,
    decoder: DecoderConfig,
    rng: np.random.Generator,
    encoder: EncoderConfig | None = None,
) -> ModelState:
    if encoder is None:
        encoder = default_encoder_config(spec)
    if encoder.latent_dim != spec.param_dim:
        raise ModelError("latent dimension must equal the system's parameter count")
    layout = TokenLayout(
        mode=decoder.token_mode,
        num_objects=spec.num_objects,
        state_dim=spec.state_dim,
        n_params=spec.param_dim,
    )
    p: dict[str, np.ndarray] = {}
    d, n = spec.state_dim, spec.param_dim

    sizes = [encoder.input_dim, *encoder.hidden]
    for i in range(len(encoder.hidden)):
        p[f"enc_w{i}"] = _glorot(rng, sizes[i], sizes[i + 1])
        p[f"enc_b{i}"] = np.zeros(sizes[i + 1])
    p["enc_mean_w"] = _glorot(rng, sizes[-1], n)
    p["enc_mean_b"] = np.zeros(n)
    p["enc_logvar_w"] = _glorot(rng, sizes[-1], n)
    p["enc_logvar_b"] = np.full(n, -4.0)  # start near-deterministic

    kind = decoder.kind
    if kind == "mlp":
        widths = [d + n, *decoder.hidden]
        for i in range(len(decoder.hidden)):
            p[f"dec_w{i}"] = _glorot(rng, widths[i], widths[i + 1])
            p[f"dec_b{i}"] = np.zeros(widths[i + 1])
        p["dec_out_w"] = _glorot(rng, widths[-1], d)
        p["dec_out_b"] = np.zeros(d)
    elif kind == "vcd":
        blocks_in = layout.state_tokens + n
        h = decoder.hidden[0]
        p["vcd_gamma"] = np.full((layout.state_tokens, blocks_in), 1.0)
        for b in range(layout.state_tokens):
            p[f"vcd{b}_w0"] = _glorot(rng, d + n, h)
            p[f"vcd{b}_b0"] = np.zeros(h)
            p[f"vcd{b}_w1"] = _glorot(rng, h, layout.slot_size)
            p[f"vcd{b}_b1"] = np.zeros(layout.slot_size)
    else:  # transformer / spartan share weights and code path
        w, dk, f = decoder.width, decoder.key_dim, decoder.ffn_width
        s = layout.slot_size
        if layout.mode == "per-object":
            p["emb_state_w"] = np.stack([_glorot(rng, s, w) for _ in range(layout.state_tokens)])
        else:
            p["emb_state_w"] = _glorot(rng, 1, w, shape=(layout.state_tokens, w))
        p["emb_state_b"] = 0.1 * rng.standard_normal((layout.state_tokens, w))
        p["emb_param_w"] = _glorot(rng, 1, w, shape=(n, w))
        p["emb_param_b"] = 0.1 * rng.standard_normal((n, w))
        for l in range(decoder.layers):
            p[f"att{l}_wq"] = _glorot(rng, w, dk)
            p[f"att{l}_wk"] = _glorot(rng, w, dk)
            p[f"att{l}_wv"] = _glorot(rng, w, w)
            p[f"ffn{l}_w1"] = _glorot(rng, w, f)
            p[f"ffn{l}_b1"] = np.zeros(f)
            p[f"ffn{l}_w2"] = _glorot(rng, f, w)
            p[f"ffn{l}_b2"] = np.zeros(w)
        if layout.mode == "per-object":
            p["out_w"] = np.stack([_glorot(rng, w, s) for _ in range(layout.state_tokens)])
            p["out_b"] = np.zeros((layout.state_tokens, s))
        else:
            p["out_w"] = _glorot(rng, w, 1, shape=(layout.state_tokens, w))
            p["out_b"] = np.zeros(layout.state_tokens)
    return ModelState(
        params=p,
        encoder=encoder,
        decoder=decoder,
        layout=layout,
        horizon=spec.horizon,
        dual_raw=-2.0,
    )


def wrap_leaves(tape: Tape, model: ModelState) -> dict[str, Tensor]:
    return {name: tape.leaf(arr) for name, arr in model.params.items()}


# ---------------------------------------------------------------------------
# encoder


def pool_trajectories(cfg: EncoderConfig, trajs: np.ndarray) -> np.ndarray:
    """Flatten (B, T+1, d) for the encoder, mean-pooling time windows if set."""
    b, steps, d = trajs.shape
    if cfg.pool_window > 0:
        w = cfg.pool_window
        pad = (-steps) % w
        if pad:
            trajs = np.concatenate([trajs, np.repeat(trajs[:, -1:], pad, axis=1)], axis=1)
        trajs = trajs.reshape(b, -1, w, d).mean(axis=2)
    flat = trajs.reshape(b, -1)
    if flat.shape[1] != cfg.input_dim:
        raise ModelError(f"encoder expects {cfg.input_dim} features, got {flat.shape[1]}")
    return flat


def encode(tape: Tape, leaves: dict[str, Tensor], model: ModelState, trajs: np.ndarray):
    """Gaussian posterior (mean, log-variance) over the latent parameters."""
    h = tape.constant(pool_trajectories(model.encoder, np.asarray(trajs, dtype=float)))
    for i in range(len(model.encoder.hidden)):
        h = ad.tanh(ad.broadcast_add(ad.matmul(h, leaves[f"enc_w{i}"]), leaves[f"enc_b{i}"]))
    mean = ad.broadcast_add(ad.matmul(h, leaves["enc_mean_w"]), leaves["enc_mean_b"])
    logvar = ad.broadcast_add(ad.matmul(h, leaves["enc_logvar_w"]), leaves["enc_logvar_b"])
    return mean, logvar


def reparameterize(mean: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """theta_hat = mean + exp(logvar / 2) * noise."""
    if mean.shape != logvar.shape or mean.shape != np.asarray(noise).shape:
        raise ad.ShapeError("reparameterize: mean/logvar/noise shapes differ")
    std = ad.texp(ad.scale(logvar, 0.5))
    return ad.add(mean, ad.mul(std, mean.tape.constant(noise)))


# ---------------------------------------------------------------------------
# attention decoders


def masked_attention(
    tape: Tape,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    tokens: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    eval_threshold: float = 0.5,
    forced_mask: np.ndarray | None = None,
):
    """One attention layer restricted to a sampled boolean token graph.

    Raw logits q_i.k_j parameterise both the Bernoulli edge sampler and
    (scaled by 1/sqrt(d_k)) the softmax. The sampled mask enters the softmax
    as a constant; its straight-through gradient is only consumed by the
    path-count penalty. A fully masked row falls back to its residual.

    Returns (next tokens, mask, raw logits).
    """
    q = ad.matmul(tokens, wq)
    k = ad.matmul(tokens, wk)
    v = ad.matmul(tokens, wv)
    raw = ad.matmul(q, ad.swap_last_axes(k))  # (N, m, m)

    if forced_mask is not None:
        mask = tape.constant(np.broadcast_to(forced_mask, raw.shape).copy())
    elif mode == "train":
        if rng is None:
            raise ModelError("train-mode attention requires an rng")
        mask = ad.bernoulli_st(raw, rng, temperature)
    elif mode == "eval":
        mask = ad.threshold_st(raw, eval_threshold, temperature)
    elif mode == "ones":
        mask = tape.constant(np.ones_like(raw.data))
    else:
        raise ModelError(f"unknown attention mode {mode!r}")

    hard = ad.stop_gradient(mask)
    scores = ad.masked_fill(ad.scale(raw, 1.0 / np.sqrt(wq.shape[1])), hard)
    attn = ad.mul(ad.softmax_rows(scores), hard)  # zero rows with no kept keys
    return ad.add(tokens, ad.matmul(attn, v)), mask, raw


def path_counts(masks: list[Tensor]) -> Tensor:
    """Product over layers of (mask + I): token-to-token route counts."""
    if not masks:
        raise ModelError("path_counts needs at least one mask")
    m = masks[0].shape[-1]
    tape = masks[0].tape
    eye = tape.constant(np.eye(m))
    acc = ad.broadcast_add(masks[0], eye)
    for a in masks[1:]:
        if a.shape != masks[0].shape:
            raise ad.ShapeError("path_counts: mask shapes differ")
        acc = ad.matmul(acc, ad.broadcast_add(a, eye))
    return acc


def vcd_gates(
    tape: Tape,
    gamma: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
    eval_threshold: float = 0.5,
    forced_gates: np.ndarray | None = None,
) -> Tensor:
    """Global boolean gate matrix over (output blocks x input blocks)."""
    if forced_gates is not None:
        return tape.constant(np.asarray(forced_gates, dtype=float))
    if mode == "train":
        if rng is None:
            raise ModelError("train-mode gates require an rng")
        return ad.bernoulli_st(gamma, rng, temperature)
    if mode == "eval":
        return ad.threshold_st(gamma, eval_threshold, temperature)
    if mode == "ones":
        return tape.constant(np.ones_like(gamma.data))
    raise ModelError(f"unknown gate mode {mode!r}")


def _embed_tokens(leaves, layout: TokenLayout, x: Tensor, theta: Tensor) -> Tensor:
    n_rows = x.shape[0]
    if layout.mode == "per-object":
        parts = []
        for o in range(layout.state_tokens):
            obj = ad.slice_axis(x, -1, 4 * o, 4 * o + 4)  # (N, 4)
            w_o = ad.slice_axis(leaves["emb_state_w"], 0, o, o + 1)
            tok = ad.matmul(obj, ad.reshape(w_o, w_o.shape[1:]))
            parts.append(ad.reshape(tok, (n_rows, 1, tok.shape[-1])))
        state_tok = ad.concat(parts, axis=1)
    else:
        xs = ad.reshape(x, (n_rows, layout.state_tokens, 1))
        state_tok = ad.broadcast_mul(ad.expand(xs, (n_rows, layout.state_tokens, leaves["emb_state_w"].shape[-1])), leaves["emb_state_w"])
    state_tok = ad.broadcast_add(state_tok, leaves["emb_state_b"])

    th = ad.reshape(theta, (n_rows, layout.n_params, 1))
    width = leaves["emb_param_w"].shape[-1]
    param_tok = ad.broadcast_mul(ad.expand(th, (n_rows, layout.n_params, width)), leaves["emb_param_w"])
    param_tok = ad.broadcast_add(param_tok, leaves["emb_param_b"])
    return ad.concat([state_tok, param_tok], axis=1)


def _project_state_tokens(leaves, layout: TokenLayout, tokens: Tensor) -> Tensor:
    n_rows = tokens.shape[0]
    state_hidden = ad.slice_axis(tokens, 1, 0, layout.state_tokens)
    if layout.mode == "per-object":
        parts = []
        for o in range(layout.state_tokens):
            h_o = ad.slice_axis(state_hidden, 1, o, o + 1)
            h_o = ad.reshape(h_o, (n_rows, h_o.shape[-1]))
            w_o = ad.slice_axis(leaves["out_w"], 0, o, o + 1)
            b_o = ad.slice_axis(leaves["out_b"], 0, o, o + 1)
            parts.append(ad.broadcast_add(ad.matmul(h_o, ad.reshape(w_o, w_o.shape[1:])), ad.reshape(b_o, b_o.shape[1:])))
        return ad.concat(parts, axis=-1)
    scaled = ad.broadcast_mul(state_hidden, leaves["out_w"])
    return ad.broadcast_add(ad.tsum(scaled, axis=-1), leaves["out_b"])


def _decode_attention(
    tape, leaves, model: ModelState, x, theta, mode, rng, forced_masks
) -> tuple[Tensor, DecodeInfo]:
    cfg = model.decoder
    layout = model.layout
    tokens = _embed_tokens(leaves, layout, x, theta)
    info = DecodeInfo()
    mask_mode = "ones" if cfg.kind == "transformer" else mode
    for l in range(cfg.layers):
        forced = None if forced_masks is None else forced_masks[l]
        tokens, mask, raw = masked_attention(
            tape,
            leaves[f"att{l}_wq"],
            leaves[f"att{l}_wk"],
            leaves[f"att{l}_wv"],
            tokens,
            mask_mode,
            rng=rng,
            temperature=cfg.gate_temperature,
            eval_threshold=cfg.eval_threshold,
            forced_mask=forced,
        )
        hid = ad.tanh(ad.broadcast_add(ad.matmul(tokens, leaves[f"ffn{l}_w1"]), leaves[f"ffn{l}_b1"]))
        tokens = ad.add(tokens, ad.broadcast_add(ad.matmul(hid, leaves[f"ffn{l}_w2"]), leaves[f"ffn{l}_b2"]))
        info.masks.append(mask)
        info.raw_logits.append(raw)
    if cfg.kind == "spartan":
        info.paths = path_counts(info.masks)
    return _project_state_tokens(leaves, layout, tokens), info


def _decode_mlp(tape, leaves, model, x, theta):
    h = ad.concat([x, theta], axis=-1)
    n_hidden = len(model.decoder.hidden)
    for i in range(n_hidden):
        h = ad.tanh(ad.broadcast_add(ad.matmul(h, leaves[f"dec_w{i}"]), leaves[f"dec_b{i}"]))
    return ad.broadcast_add(ad.matmul(h, leaves["dec_out_w"]), leaves["dec_out_b"]), DecodeInfo()


def _vcd_block_expansion(layout: TokenLayout) -> np.ndarray:
    """(input blocks) -> (d + n) indicator matrix repeating block gates."""
    d, n = layout.state_dim, layout.n_params
    blocks_in = layout.state_tokens + n
    e = np.zeros((blocks_in, d + n))
    for b in range(layout.state_tokens):
        s = layout.slot_size
        e[b, b * s : (b + 1) * s] = 1.0
    for j in range(n):
        e[layout.state_tokens + j, d + j] = 1.0
    return e


def _decode_vcd(tape, leaves, model, x, theta, mode, rng, forced_gates):
    layout = model.layout
    gates = vcd_gates(
        tape,
        leaves["vcd_gamma"],
        mode,
        rng=rng,
        temperature=model.decoder.gate_temperature,
        eval_threshold=model.decoder.eval_threshold,
        forced_gates=forced_gates,
    )
    info = DecodeInfo(gates=gates)
    expansion = tape.constant(_vcd_block_expansion(layout))
    gate_rows = ad.matmul(ad.stop_gradient(gates), expansion)  # (blocks_out, d+n)
    inp = ad.concat([x, theta], axis=-1)
    parts = []
    for b in range(layout.state_tokens):
        row = ad.slice_axis(gate_rows, 0, b, b + 1)
        masked = ad.broadcast_mul(inp, ad.reshape(row, (row.shape[-1],)))
        h = ad.tanh(ad.broadcast_add(ad.matmul(masked, leaves[f"vcd{b}_w0"]), leaves[f"vcd{b}_b0"]))
        parts.append(ad.broadcast_add(ad.matmul(h, leaves[f"vcd{b}_w1"]), leaves[f"vcd{b}_b1"]))
    return ad.concat(parts, axis=-1), info


def decode_step(
    tape: Tape,
    leaves: dict[str, Tensor],
    model: ModelState,
    x: Tensor,
    theta: Tensor,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    forced_masks=None,
    forced_gates=None,
) -> tuple[Tensor, DecodeInfo]:
    """Predict x_{t+1} from (x_t, theta_hat); batch-first tensors."""
    if x.shape[-1] != model.layout.state_dim:
        raise ModelError(f"state width {x.shape[-1]} != {model.layout.state_dim}")
    if theta.shape[-1] != model.layout.n_params:
        raise ModelError(f"latent width {theta.shape[-1]} != {model.layout.n_params}")
    kind = model.decoder.kind
    if kind == "mlp":
        return _decode_mlp(tape, leaves, model, x, theta)
    if kind == "vcd":
        return _decode_vcd(tape, leaves, model, x, theta, mode, rng, forced_gates)
    return _decode_attention(tape, leaves, model, x, theta, mode, rng, forced_masks)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ModelState, extra: dict | None = None) -> None:
    names = sorted(model.params)
    offsets = {}
    off = 0
    for name in names:
        offsets[name] = off
        off += model.params[name].size
    manifest = {
        "format": "paramid-ckpt",
        "version": 1,
        "dtype": "float64",
        "tensors": [
            {"name": n, "shape": list(model.params[n].shape), "offset": offsets[n]}
            for n in names
        ],
        "model": {
            "encoder": asdict(model.encoder),
            "decoder": asdict(model.decoder),
            "layout": asdict(model.layout),
            "horizon": model.horizon,
            "dual_raw": model.dual_raw,
        },
        "extra": extra or {},
    }
    blob = np.concatenate([model.params[n].reshape(-1) for n in names]) if names else np.empty(0)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8") + b"\n")
        fh.write(blob.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelState, dict]:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    if manifest.get("format") != "paramid-ckpt" or manifest.get("version") != 1:
        raise ModelError("unrecognised checkpoint file")
    params = {}
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = blob[t["offset"] : t["offset"] + size].astype(np.float64)
        params[t["name"]] = arr.reshape(t["shape"]).copy()
    m = manifest["model"]
    enc = EncoderConfig(
        input_dim=m["encoder"]["input_dim"],
        latent_dim=m["encoder"]["latent_dim"],
        hidden=tuple(m["encoder"]["hidden"]),
        pool_window=m["encoder"]["pool_window"],
    )
    dcfg = dict(m["decoder"])
    dcfg["hidden"] = tuple(dcfg["hidden"])
    dec = DecoderConfig(**dcfg)
    layout = TokenLayout(**m["layout"])
    model = ModelState(
        params=params,
        encoder=enc,
        decoder=dec,
        layout=layout,
        horizon=m["horizon"],
        dual_raw=m["dual_raw"],
    )
    return model, manifest.get("extra", {})
