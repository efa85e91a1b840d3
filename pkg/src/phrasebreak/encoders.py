"""Pretrainable token encoders.

Encoders are stacked bidirectional LSTMs over token plus learned position
embeddings; the mixed-phoneme variant adds a sup-phoneme embedding
elementwise. Pretraining objectives are masked-token prediction over the
token vocabulary (and the sup vocabulary for the mixed variant) and
phoneme-to-grapheme prediction of the owning word's surface at every real
position. Objectives are weighted equally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DataError, ShapeError
from .rng import derive, stream
from .tokenization import MASK, PAD, TokenizedExample

KINDS = ("subword", "phoneme", "phoneme_mp", "phoneme_pl")

OBJECTIVES_OF_KIND = {
    "subword": ("mlm",),
    "phoneme": ("mlm",),
    "phoneme_mp": ("mlm", "sup_mlm"),
    "phoneme_pl": ("mlm", "p2g"),
}


@dataclass
class EncoderConfig:
    kind: str
    vocab_size: int
    embed_dim: int = 64
    num_layers: int = 2
    d_enc: int = 64
    max_len: int = 512
    sup_vocab_size: int = 0
    grapheme_vocab_size: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.d_enc % 2:
            raise ConfigError(f"d_enc must be even, got {self.d_enc}")
        if min(self.vocab_size, self.embed_dim, self.num_layers,
               self.d_enc, self.max_len) < 1:
            raise ConfigError(f"non-positive encoder dimension in {self}")
        if self.kind == "phoneme_mp" and self.sup_vocab_size < 1:
            raise ConfigError("phoneme_mp needs sup_vocab_size")
        if self.kind == "phoneme_pl" and self.grapheme_vocab_size < 1:
            raise ConfigError("phoneme_pl needs grapheme_vocab_size")


class Encoder:
    """Embedding sum into a BiLSTM stack; output width d_enc."""

    def __init__(self, config: EncoderConfig, store: nn.ParameterStore,
                 seed: int, dtype=np.float32):
        self.config = config
        self.tok = nn.Embedding(store, "enc/tok", config.vocab_size,
                                config.embed_dim,
                                derive(seed, "init", "enc/tok"), dtype)
        self.pos = nn.Embedding(store, "enc/pos", config.max_len,
                                config.embed_dim,
                                derive(seed, "init", "enc/pos"), dtype)
        self.sup = None
        if config.kind == "phoneme_mp":
            self.sup = nn.Embedding(store, "enc/sup", config.sup_vocab_size,
                                    config.embed_dim,
                                    derive(seed, "init", "enc/sup"), dtype)
        self.layers = []
        d_in = config.embed_dim
        for i in range(config.num_layers):
            self.layers.append(nn.BiLSTM(store, f"enc/l{i}", d_in,
                                         config.d_enc // 2,
                                         derive(seed, "init", f"enc/l{i}"),
                                         dtype))
            d_in = config.d_enc

    def forward(self, token_ids: np.ndarray, sup_ids: np.ndarray | None = None,
                mask: np.ndarray | None = None) -> np.ndarray:
        token_ids = np.asarray(token_ids)
        if token_ids.ndim == 1:
            token_ids = token_ids[None]
            sup_ids = None if sup_ids is None else np.asarray(sup_ids)[None]
            mask = None if mask is None else np.asarray(mask)[None]
            squeeze = True
        else:
            squeeze = False
        B, T = token_ids.shape
        if T > self.config.max_len:
            raise ShapeError(
                f"sequence length {T} exceeds max_len {self.config.max_len}")
        h = self.tok.forward(token_ids)
        h = h + self.pos.forward(np.broadcast_to(np.arange(T), (B, T)))
        if self.sup is not None:
            if sup_ids is None:
                raise ShapeError("phoneme_mp encoder needs sup_ids")
            h = h + self.sup.forward(sup_ids)
        for layer in self.layers:
            h = layer.forward(h, mask)
        return h[0] if squeeze else h

    def backward(self, dh: np.ndarray) -> None:
        if dh.ndim == 2:
            dh = dh[None]
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        self.tok.backward(dh)
        self.pos.backward(dh)
        if self.sup is not None:
            self.sup.backward(dh)


# ---------------------------------------------------------------------------
# corruption and losses


def mask_tokens(token_ids: np.ndarray, rate: float, seed: int,
                vocab_size: int):
    """BERT-style corruption: select positions at `rate`; of those, 80% turn
    into MASK, 10% into a random non-special id, 10% stay put. Returns
    (corrupted ids, selected positions as a bool array)."""
    if not 0.0 < rate <= 1.0:
        raise ShapeError(f"mask rate out of range: {rate}")
    if vocab_size <= 4:
        # only specials, nothing to draw replacements from
        raise ShapeError(f"vocab too small to corrupt: {vocab_size}")
    token_ids = np.asarray(token_ids)
    rng = stream(seed, "mask")
    select = rng.random(token_ids.shape) < rate
    roll = rng.random(token_ids.shape)
    randoms = rng.integers(4, vocab_size, size=token_ids.shape)
    corrupted = token_ids.copy()
    corrupted[select & (roll < 0.8)] = MASK
    pick = select & (roll >= 0.8) & (roll < 0.9)
    corrupted[pick] = randoms[pick]
    return corrupted, select


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray,
                          select: np.ndarray):
    """Mean cross entropy over selected rows of [N, V] logits.

    Returns (loss, dlogits); gradient rows outside the selection are zero,
    and an empty selection yields loss 0 with zero gradient.
    """
    logits = np.asarray(logits)
    select = np.asarray(select).astype(bool)
    count = int(select.sum())
    dlogits = np.zeros_like(logits)
    if count == 0:
        return 0.0, dlogits
    rows = logits[select].astype(np.float64)
    tgt = np.asarray(targets)[select]
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -float(log_probs[np.arange(count), tgt].mean())
    grad = np.exp(log_probs)
    grad[np.arange(count), tgt] -= 1.0
    dlogits[select] = (grad / count).astype(logits.dtype)
    return loss, dlogits


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    values: dict[str, np.ndarray]
    config: EncoderConfig
    loss_log: dict[str, list[float]] = field(default_factory=dict)


class _PretrainNet:
    def __init__(self, config: EncoderConfig, seed: int):
        self.store = nn.ParameterStore()
        self.encoder = Encoder(config, self.store, seed)
        self.heads: dict[str, nn.Linear] = {}
        objectives = OBJECTIVES_OF_KIND[config.kind]
        self.heads["mlm"] = nn.Linear(self.store, "head/mlm", config.d_enc,
                                      config.vocab_size,
                                      derive(seed, "init", "head/mlm"))
        if "sup_mlm" in objectives:
            self.heads["sup_mlm"] = nn.Linear(
                self.store, "head/sup", config.d_enc, config.sup_vocab_size,
                derive(seed, "init", "head/sup"))
        if "p2g" in objectives:
            self.heads["p2g"] = nn.Linear(
                self.store, "head/p2g", config.d_enc,
                config.grapheme_vocab_size, derive(seed, "init", "head/p2g"))

    def batch_losses(self, batch, corrupt_seed: int, backward: bool):
        """Equal-weight objective losses on one list of examples."""
        config = self.encoder.config
        objectives = OBJECTIVES_OF_KIND[config.kind]
        T = max(len(ex.token_ids) for ex in batch)
        B = len(batch)
        tokens = np.full((B, T), PAD, dtype=np.int64)
        sups = np.full((B, T), PAD, dtype=np.int64) if "sup_mlm" in objectives else None
        graphemes = np.full((B, T), PAD, dtype=np.int64) if "p2g" in objectives else None
        valid = np.zeros((B, T), dtype=np.float32)
        mlm_targets = np.full((B, T), PAD, dtype=np.int64)
        mlm_select = np.zeros((B, T), dtype=bool)
        sup_targets = np.full((B, T), PAD, dtype=np.int64)
        for bi, ex in enumerate(batch):
            L = len(ex.token_ids)
            corrupted, select = mask_tokens(
                ex.token_ids, 0.15, derive(corrupt_seed, bi), config.vocab_size)
            tokens[bi, :L] = corrupted
            valid[bi, :L] = 1.0
            mlm_targets[bi, :L] = ex.token_ids
            mlm_select[bi, :L] = select
            if sups is not None:
                if ex.sup_ids is None:
                    raise DataError("phoneme_mp pretraining needs sup_ids")
                sup_in = ex.sup_ids.copy()
                sup_in[select] = MASK
                sups[bi, :L] = sup_in
                sup_targets[bi, :L] = ex.sup_ids
            if graphemes is not None:
                if ex.grapheme_targets is None:
                    raise DataError("phoneme_pl pretraining needs grapheme targets")
                graphemes[bi, :L] = ex.grapheme_targets

        h = self.encoder.forward(tokens, sups, valid)
        flat = h.reshape(B * T, -1)
        losses = {}
        dh = np.zeros_like(flat)
        logits = self.heads["mlm"].forward(flat)
        loss, dlogits = softmax_cross_entropy(
            logits, mlm_targets.reshape(-1), mlm_select.reshape(-1))
        losses["mlm"] = loss
        if backward:
            dh += self.heads["mlm"].backward(dlogits)
        if "sup_mlm" in objectives:
            logits = self.heads["sup_mlm"].forward(flat)
            loss, dlogits = softmax_cross_entropy(
                logits, sup_targets.reshape(-1), mlm_select.reshape(-1))
            losses["sup_mlm"] = loss
            if backward:
                dh += self.heads["sup_mlm"].backward(dlogits)
        if "p2g" in objectives:
            logits = self.heads["p2g"].forward(flat)
            loss, dlogits = softmax_cross_entropy(
                logits, graphemes.reshape(-1), valid.reshape(-1) > 0)
            losses["p2g"] = loss
            if backward:
                dh += self.heads["p2g"].backward(dlogits)
        if backward:
            self.encoder.backward(dh.reshape(B, T, -1))
        return losses


def pretrain(config: EncoderConfig, examples: list[TokenizedExample],
             steps: int, seed: int, peak_lr: float = 1e-3,
             batch_size: int = 32) -> PretrainResult:
    """Train encoder plus objective heads; returns values and per-step losses."""
    if not examples:
        raise DataError("no pretraining examples")
    if steps < 1:
        raise ShapeError(f"steps must be >= 1, got {steps}")
    net = _PretrainNet(config, seed)
    log: dict[str, list[float]] = {name: []
                                   for name in OBJECTIVES_OF_KIND[config.kind]}
    log["total"] = []
    order: list[int] = []
    epoch = 0
    for step in range(1, steps + 1):
        while len(order) < batch_size:
            perm = stream(seed, "pretrain-order", epoch).permutation(len(examples))
            order.extend(perm.tolist())
            epoch += 1
        batch = [examples[i] for i in order[:batch_size]]
        del order[:batch_size]
        net.store.zero_grads()
        losses = net.batch_losses(batch, derive(seed, "corrupt", step), True)
        total = sum(losses.values())
        if not np.isfinite(total):
            raise DataError(f"non-finite pretraining loss at step {step}")
        for name, value in losses.items():
            log[name].append(value)
        log["total"].append(total)
        nn.adamw_step(net.store, nn.warmup_linear_lr(step, steps, peak_lr), step)
    return PretrainResult(net.store.values(), config, log)


def objective_losses(config: EncoderConfig, values: dict[str, np.ndarray],
                     examples: list[TokenizedExample], seed: int,
                     batch_size: int = 32) -> dict[str, float]:
    """Mean objective losses under fixed corruption; no parameter updates."""
    net = _PretrainNet(config, seed)
    net.store.load(values)
    sums: dict[str, float] = {}
    batches = 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        losses = net.batch_losses(batch, derive(seed, "probe", start), False)
        for name, value in losses.items():
            sums[name] = sums.get(name, 0.0) + value
        batches += 1
    return {name: total / batches for name, total in sums.items()}
