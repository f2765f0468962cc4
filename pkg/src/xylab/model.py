"""Pre-LN transformer encoder-decoder written as plain functions over a
parameter dict, plus label-smoothed loss, RAdam with an inverse-sqrt schedule
and a small binary checkpoint container.

Parameters live in an ordered ``dict[str, Tensor]``; their shapes depend only
on :class:`ModelConfig`. Dropout draws from a generator seeded by
``(seed, step)`` so any training step can be replayed without carrying RNG
state around.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tagging import PAD, TaggedExample

Params = dict[str, torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    d_ff: int = 512
    n_heads: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 2
    max_positions: int = 64
    dropout: float = 0.1
    label_smoothing: float = 0.1
    tie_embeddings: bool = True
    # Optional factored embedding: surface token id i in [group_base, group_base + n_groups * group_width)
    # also receives a learned per-language vector, row (i - group_base) // group_width.
    n_lang_groups: int = 0
    group_base: int = 0
    group_width: int = 0
    enc_no_residual: int = -1  # encoder layer whose self-attention skips the residual; -1 = none

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not -1 <= self.enc_no_residual < self.n_enc_layers:
            raise ValueError(f"enc_no_residual={self.enc_no_residual} outside [-1, {self.n_enc_layers})")
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")
        if self.vocab_size < 5:
            raise ValueError(f"vocab_size too small: {self.vocab_size}")


# -- parameters -------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    def attn(prefix):
        shapes[f"{prefix}.wq"] = (d, d)
        shapes[f"{prefix}.bq"] = (d,)
        shapes[f"{prefix}.wkv"] = (d, 2 * d)
        shapes[f"{prefix}.bkv"] = (2 * d,)
        shapes[f"{prefix}.wo"] = (d, d)
        shapes[f"{prefix}.bo"] = (d,)

    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        ln(f"{p}.ln1"); attn(f"{p}.self"); ln(f"{p}.ln2"); ffn(f"{p}.ffn")
    ln("enc.ln")
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        ln(f"{p}.ln1"); attn(f"{p}.self"); ln(f"{p}.ln2"); attn(f"{p}.cross")
        ln(f"{p}.ln3"); ffn(f"{p}.ffn")
    ln("dec.ln")
    if not cfg.tie_embeddings:
        shapes["out"] = (d, v)
    if cfg.n_lang_groups:
        shapes["lang_embed"] = (cfg.n_lang_groups, d)
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=torch.float32) -> Params:
    g = torch.Generator().manual_seed(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("embed", "lang_embed"):
            t = torch.randn(shape, generator=g, dtype=torch.float64) * cfg.d_model ** -0.5
        elif leaf == "g":
            t = torch.ones(shape, dtype=torch.float64)
        elif len(shape) == 1:
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            t = (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1) * bound
        params[name] = t.to(dtype)
    return params


def n_parameters(params: Params) -> int:
    return sum(t.numel() for t in params.values())


# -- batching ---------------------------------------------------------------

@dataclass
class Batch:
    enc: torch.Tensor  # (B, S)
    dec: torch.Tensor  # (B, T)
    tgt: torch.Tensor  # (B, T)

    def __len__(self):
        return self.enc.shape[0]


def _pad(rows: Sequence[Sequence[int]], width: int | None = None) -> torch.Tensor:
    width = width or max(len(r) for r in rows)
    out = torch.full((len(rows), width), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, :len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def collate(examples: Sequence[TaggedExample], enc_width: int | None = None,
            dec_width: int | None = None) -> Batch:
    return Batch(
        _pad([e.encoder_ids for e in examples], enc_width),
        _pad([e.decoder_input_ids for e in examples], dec_width),
        _pad([e.target_ids for e in examples], dec_width),
    )


# -- forward ----------------------------------------------------------------

_POS_CACHE: dict = {}


def sinusoids(n: int, d: int, dtype) -> torch.Tensor:
    key = (n, d, dtype)
    if key not in _POS_CACHE:
        pos = torch.arange(n, dtype=torch.float64)[:, None]
        div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
        pe = torch.zeros(n, d, dtype=torch.float64)
        pe[:, 0::2] = torch.sin(pos * div)
        pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
        _POS_CACHE[key] = pe.to(dtype)
    return _POS_CACHE[key]


def _dropout(x, p, gen):
    if gen is None or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def _ln(x, params, prefix):
    return F.layer_norm(x, x.shape[-1:], params[f"{prefix}.g"], params[f"{prefix}.b"], 1e-5)


def _attention(xq, xkv, params, prefix, n_heads, key_mask, causal, p_drop, gen):
    B, T, d = xq.shape
    S = xkv.shape[1]
    dh = d // n_heads
    q = (xq @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]).view(B, T, n_heads, dh).transpose(1, 2)
    kv = xkv @ params[f"{prefix}.wkv"] + params[f"{prefix}.bkv"]
    k, v = kv.view(B, S, 2, n_heads, dh).permute(2, 0, 3, 1, 4)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
    blocked = ~key_mask[:, None, None, :]  # (B,1,1,S)
    if causal:
        blocked = blocked | torch.ones(T, S, dtype=torch.bool).triu(1)
    scores = scores.masked_fill(blocked, float("-inf"))
    w = _dropout(torch.softmax(scores, dim=-1), p_drop, gen)
    ctx = (w @ v).transpose(1, 2).reshape(B, T, d)
    return ctx @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


def _ffn(x, params, prefix, p_drop, gen):
    h = torch.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return _dropout(h, p_drop, gen) @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _group_index(cfg: ModelConfig) -> torch.Tensor:
    key = ("groups", cfg.vocab_size, cfg.n_lang_groups, cfg.group_base, cfg.group_width)
    if key not in _POS_CACHE:
        ids = torch.arange(cfg.vocab_size)
        g = (ids - cfg.group_base) // max(cfg.group_width, 1)
        valid = (ids >= cfg.group_base) & (g < cfg.n_lang_groups)
        _POS_CACHE[key] = torch.where(valid, g, torch.full_like(g, cfg.n_lang_groups))
    return _POS_CACHE[key]


def embedding_table(params: Params, cfg: ModelConfig) -> torch.Tensor:
    """Token embeddings, with the per-language component added when configured."""
    emb = params["embed"]
    if not cfg.n_lang_groups:
        return emb
    lang = torch.cat([params["lang_embed"], torch.zeros_like(params["lang_embed"][:1])])
    return emb + lang[_group_index(cfg)]


def _embed(ids, params, cfg, p_drop, gen):
    if ids.numel() and (int(ids.max()) >= cfg.vocab_size or int(ids.min()) < 0):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    if ids.shape[1] > cfg.max_positions:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_positions={cfg.max_positions}")
    emb = embedding_table(params, cfg)
    x = F.embedding(ids, emb) * math.sqrt(cfg.d_model) + sinusoids(ids.shape[1], cfg.d_model, emb.dtype)
    return _dropout(x, p_drop, gen)


def encode(params: Params, cfg: ModelConfig, enc_ids: torch.Tensor, gen=None) -> torch.Tensor:
    p = cfg.dropout if gen is not None else 0.0
    mask = enc_ids != PAD
    x = _embed(enc_ids, params, cfg, p, gen)
    for i in range(cfg.n_enc_layers):
        pre = f"enc.{i}"
        y = _ln(x, params, f"{pre}.ln1")
        a = _dropout(_attention(y, y, params, f"{pre}.self", cfg.n_heads, mask, False, p, gen), p, gen)
        x = a if i == cfg.enc_no_residual else x + a
        y = _ln(x, params, f"{pre}.ln2")
        x = x + _dropout(_ffn(y, params, f"{pre}.ffn", p, gen), p, gen)
    return _ln(x, params, "enc.ln")


def decode(params: Params, cfg: ModelConfig, memory: torch.Tensor, enc_mask: torch.Tensor,
           dec_ids: torch.Tensor, gen=None) -> torch.Tensor:
    """Decoder logits ``(B, T, V)`` for teacher-forced ``dec_ids``."""
    p = cfg.dropout if gen is not None else 0.0
    self_mask = torch.ones_like(dec_ids, dtype=torch.bool)  # causality alone guards PAD queries
    x = _embed(dec_ids, params, cfg, p, gen)
    for i in range(cfg.n_dec_layers):
        pre = f"dec.{i}"
        y = _ln(x, params, f"{pre}.ln1")
        x = x + _dropout(_attention(y, y, params, f"{pre}.self", cfg.n_heads, self_mask, True, p, gen), p, gen)
        y = _ln(x, params, f"{pre}.ln2")
        x = x + _dropout(_attention(y, memory, params, f"{pre}.cross", cfg.n_heads, enc_mask, False, p, gen), p, gen)
        y = _ln(x, params, f"{pre}.ln3")
        x = x + _dropout(_ffn(y, params, f"{pre}.ffn", p, gen), p, gen)
    x = _ln(x, params, "dec.ln")
    out = embedding_table(params, cfg).t() if cfg.tie_embeddings else params["out"]
    return x @ out


def forward(params: Params, cfg: ModelConfig, batch: Batch, gen=None) -> torch.Tensor:
    memory = encode(params, cfg, batch.enc, gen)
    return decode(params, cfg, memory, batch.enc != PAD, batch.dec, gen)


def dropout_generator(seed: int, step: int) -> torch.Generator:
    mixed = int.from_bytes(hashlib.blake2b(f"{seed}:{step}".encode(), digest_size=8).digest(), "little")
    return torch.Generator().manual_seed(mixed)


# -- loss -------------------------------------------------------------------

def loss_and_grad(logits: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
                  eps: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean label-smoothed NLL over unmasked positions and its gradient w.r.t. logits.

    The smoothed target puts ``1 - eps`` on the reference token and spreads
    ``eps`` uniformly over all ``V`` classes.
    """
    n = int(mask.sum())
    if n == 0:
        raise ValueError("batch has no non-pad target positions")
    V = logits.shape[-1]
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    smooth = -logp.mean(dim=-1)
    per_tok = (1.0 - eps) * nll + eps * smooth
    m = mask.to(logits.dtype)
    loss = (per_tok * m).sum() / n
    q = torch.full_like(logits, eps / V)
    q.scatter_add_(-1, target.unsqueeze(-1), torch.full_like(logits[..., :1], 1.0 - eps))
    grad = (logp.exp() - q) * m.unsqueeze(-1) / n
    return loss, grad


class _SmoothedCE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, target, mask, eps):
        loss, grad = loss_and_grad(logits.detach(), target, mask, eps)
        ctx.save_for_backward(grad)
        return loss

    @staticmethod
    def backward(ctx, g):
        (grad,) = ctx.saved_tensors
        return grad * g, None, None, None


def smoothed_ce(logits, target, mask, eps):
    return _SmoothedCE.apply(logits, target, mask, eps)


def batch_loss(params: Params, cfg: ModelConfig, batch: Batch, gen=None,
               eps: float | None = None) -> torch.Tensor:
    eps = cfg.label_smoothing if eps is None else eps
    logits = forward(params, cfg, batch, gen)
    return smoothed_ce(logits, batch.tgt, batch.tgt != PAD, eps)


def backward(params: Params, cfg: ModelConfig, batch: Batch, gen=None, eps: float | None = None,
             scale: float = 1.0) -> tuple[float, Params]:
    """Loss value and exact gradients (via autograd) for every parameter."""
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    loss = batch_loss(leaves, cfg, batch, gen, eps) * scale
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    out: Params = {}
    for k, g in zip(names, grads):
        g = torch.zeros_like(params[k]) if g is None else g
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        out[k] = g
    return float(loss.detach()), out


# -- optimizer --------------------------------------------------------------

def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    if step <= 0:
        return 0.0
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimizerState:
    peak_lr: float = 3e-3
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    exp_avg: Params = field(default_factory=dict)
    exp_avg_sq: Params = field(default_factory=dict)

    def fresh(self) -> "OptimizerState":
        return OptimizerState(self.peak_lr, self.warmup, self.beta1, self.beta2, self.eps)

    @property
    def lr(self) -> float:
        """Learning rate the next update will use."""
        return inverse_sqrt_lr(self.step + 1, self.peak_lr, self.warmup)


def optimizer_step(params: Params, grads: Params, state: OptimizerState) -> tuple[Params, OptimizerState]:
    """One RAdam update. Raises before touching ``params`` if any update is non-finite."""
    t = state.step + 1
    lr = inverse_sqrt_lr(t, state.peak_lr, state.warmup)
    b1, b2 = state.beta1, state.beta2
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
    rect = None
    if rho_t > 5.0:
        rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = state.exp_avg.get(k)
        v = state.exp_avg_sq.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        if rect is None:
            upd = lr * m_hat
        else:
            denom = (v / (1 - b2 ** t)).sqrt() + state.eps
            upd = lr * rect * m_hat / denom
        if not torch.isfinite(upd).all():
            raise FloatingPointError(f"non-finite update for parameter {k!r}")
        new_m[k], new_v[k], new_p[k] = m, v, p - upd
    new_state = dataclasses.replace(state, step=t, exp_avg=new_m, exp_avg_sq=new_v)
    return new_p, new_state


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"XYLABCKP"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    optimizer: OptimizerState
    step: int = 0
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    def clone(self) -> "Checkpoint":
        opt = dataclasses.replace(
            self.optimizer,
            exp_avg={k: v.clone() for k, v in self.optimizer.exp_avg.items()},
            exp_avg_sq={k: v.clone() for k, v in self.optimizer.exp_avg_sq.items()},
        )
        return Checkpoint(self.config, {k: v.clone() for k, v in self.params.items()}, opt,
                          self.step, self.seed, json.loads(json.dumps(self.provenance)))


def probe_batch(cfg: ModelConfig, n: int = 2, length: int = 6) -> Batch:
    rng = np.random.default_rng(12345)
    length = min(length, cfg.max_positions)
    enc = torch.from_numpy(rng.integers(1, cfg.vocab_size, size=(n, length))).long()
    dec = torch.from_numpy(rng.integers(1, cfg.vocab_size, size=(n, length))).long()
    return Batch(enc, dec, dec.clone())


def probe_digest(params: Params, cfg: ModelConfig) -> str:
    with torch.no_grad():
        logits = forward(params, cfg, probe_batch(cfg))
    return hashlib.sha256(logits.to(torch.float32).numpy().tobytes()).hexdigest()


def params_digest(params: Params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors: list[tuple[str, torch.Tensor]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"exp_avg/{k}", v) for k, v in ckpt.optimizer.exp_avg.items()]
    tensors += [(f"exp_avg_sq/{k}", v) for k, v in ckpt.optimizer.exp_avg_sq.items()]
    index, blobs, offset = [], [], 0
    for name, t in tensors:
        raw = t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    opt = ckpt.optimizer
    header = {
        "version": CKPT_VERSION,
        "config": dataclasses.asdict(ckpt.config),
        "step": ckpt.step,
        "seed": ckpt.seed,
        "provenance": ckpt.provenance,
        "optimizer": {"peak_lr": opt.peak_lr, "warmup": opt.warmup, "beta1": opt.beta1,
                      "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        "tensors": index,
        "data_bytes": offset,
        "probe_digest": probe_digest(ckpt.params, ckpt.config),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < 20 or data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated header)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if len(data) < 20 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[20:20 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    body = data[20 + hlen:]
    if len(body) != header["data_bytes"]:
        raise CheckpointError(f"{path}: truncated tensor data ({len(body)} of {header['data_bytes']} bytes)")
    cfg = ModelConfig(**header["config"])
    if expected_config is not None and cfg != expected_config:
        diff = [f.name for f in dataclasses.fields(cfg)
                if getattr(cfg, f.name) != getattr(expected_config, f.name)]
        raise CheckpointError(f"{path}: model config mismatch in field(s): {', '.join(diff)}")
    groups: dict[str, Params] = {"param": {}, "exp_avg": {}, "exp_avg_sq": {}}
    for ent in header["tensors"]:
        kind, name = ent["name"].split("/", 1)
        raw = body[ent["offset"]:ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(ent["shape"])
        groups[kind][name] = torch.from_numpy(arr.astype(np.float32))
    o = header["optimizer"]
    opt = OptimizerState(o["peak_lr"], o["warmup"], o["beta1"], o["beta2"], o["eps"], o["step"],
                         groups["exp_avg"], groups["exp_avg_sq"])
    ckpt = Checkpoint(cfg, groups["param"], opt, header["step"], header["seed"], header["provenance"])
    if probe_digest(ckpt.params, cfg) != header["probe_digest"]:
        warnings.warn(f"{path}: probe-batch digest mismatch; outputs differ from save time")
    return ckpt


def reset_nonparameter_state(ckpt: Checkpoint, seed: int | None = None) -> Checkpoint:
    """Keep parameters bit-exactly; restart optimizer moments, schedule and RNG stream."""
    out = ckpt.clone()
    out.optimizer = ckpt.optimizer.fresh()
    out.step = 0
    out.seed = ckpt.seed if seed is None else seed
    return out
