"""Speaker-conditioned phrase break model and its two-stage trainer.

Forward path: encoder, optional speaker injection (a GELU-activated linear
projection of the speaker embedding added to every position), then three
dropout / BiLSTM / layer-norm rounds thinned to a sigmoid head:

    enc -> [+speaker] -> drop -> BiLSTM -> LN -> drop -> BiLSTM -> LN
        -> drop -> linear(d_enc, 1) -> sigmoid

Decoder BiLSTMs use d_enc/2 units per direction so widths stay d_enc.

Training freezes the encoder for stage one, unfreezes it for stage two at a
much lower peak rate with gradient clipping on encoder parameters only.
The retained checkpoint is the one with the best validation F0.5, earlier
step winning ties, and the decision threshold is swept on validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .encoders import Encoder, EncoderConfig
from .errors import ConfigError, DataError, ShapeError
from .evalstats import EvalReport, evaluate, sweep_threshold
from .rng import derive, stream
from .tokenization import PAD, TokenizedExample

SPEAKER_MODES = ("none", "frozen", "trainable")


@dataclass
class PhrasingConfig:
    encoder: EncoderConfig
    speaker_mode: str = "none"
    num_speakers: int = 0
    speaker_dim: int = 192
    dropout: float = 0.5

    def __post_init__(self):
        if self.speaker_mode not in SPEAKER_MODES:
            raise ConfigError(f"unknown speaker mode {self.speaker_mode!r}")
        if self.speaker_mode != "none":
            if self.num_speakers < 1:
                raise ConfigError("speaker conditioning needs num_speakers >= 1")
            if self.speaker_dim < 1:
                raise ConfigError("speaker_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout out of range: {self.dropout}")


@dataclass
class Batch:
    token_ids: np.ndarray          # [B, T]
    valid: np.ndarray              # [B, T] float, 1 = real token
    labels: np.ndarray             # [B, T] float
    label_mask: np.ndarray         # [B, T] float, word-final and valid
    speaker_rows: np.ndarray       # [B]
    sup_ids: np.ndarray | None = None


def collate(items: list[tuple[TokenizedExample, int]]) -> Batch:
    """Right-pad examples to a common length; speaker values are embedding
    table rows, already mapped by the caller."""
    if not items:
        raise DataError("empty batch")
    T = max(len(ex.token_ids) for ex, _ in items)
    B = len(items)
    tokens = np.full((B, T), PAD, dtype=np.int64)
    valid = np.zeros((B, T), dtype=np.float32)
    labels = np.zeros((B, T), dtype=np.float32)
    final = np.zeros((B, T), dtype=np.float32)
    rows = np.zeros(B, dtype=np.int64)
    has_sup = items[0][0].sup_ids is not None
    sups = np.full((B, T), PAD, dtype=np.int64) if has_sup else None
    for bi, (ex, row) in enumerate(items):
        L = len(ex.token_ids)
        tokens[bi, :L] = ex.token_ids
        valid[bi, :L] = 1.0
        labels[bi, :L] = ex.labels
        final[bi, :L] = ex.word_final_mask
        rows[bi] = row
        if has_sup:
            if ex.sup_ids is None:
                raise DataError("mixed sup_ids presence in one batch")
            sups[bi, :L] = ex.sup_ids
    return Batch(tokens, valid, labels, final * valid, rows, sups)


class PhrasingModel:
    def __init__(self, config: PhrasingConfig, seed: int, dtype=np.float32):
        self.config = config
        self.store = nn.ParameterStore()
        self.encoder = Encoder(config.encoder, self.store, seed, dtype)
        d_enc = config.encoder.d_enc
        self.spk_proj = None
        if config.speaker_mode != "none":
            self.store.add(
                "spk/table",
                nn.xavier_init((config.num_speakers, config.speaker_dim),
                               derive(seed, "init", "spk/table")).astype(dtype),
                trainable=config.speaker_mode == "trainable",
            )
            self.spk_proj = nn.Linear(self.store, "spk/proj",
                                      config.speaker_dim, d_enc,
                                      derive(seed, "init", "spk/proj"), dtype)
            self.spk_act = nn.Activation("gelu")
        half = d_enc // 2
        self.drop0 = nn.Dropout(config.dropout)
        self.dec0 = nn.BiLSTM(self.store, "dec/l0", d_enc, half,
                              derive(seed, "init", "dec/l0"), dtype)
        self.ln0 = nn.LayerNorm(self.store, "dec/ln0", d_enc, dtype=dtype)
        self.drop1 = nn.Dropout(config.dropout)
        self.dec1 = nn.BiLSTM(self.store, "dec/l1", d_enc, half,
                              derive(seed, "init", "dec/l1"), dtype)
        self.ln1 = nn.LayerNorm(self.store, "dec/ln1", d_enc, dtype=dtype)
        self.drop2 = nn.Dropout(config.dropout)
        self.head = nn.Linear(self.store, "dec/out", d_enc, 1,
                              derive(seed, "init", "dec/out"), dtype)
        self.out_act = nn.Activation("sigmoid")
        self._cache = None

    def inject_speaker(self, h: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """h_t + gelu(W e + b), the same shift at every position."""
        e = self.store["spk/table"].value[rows]
        a = self.spk_act.forward(self.spk_proj.forward(e))
        self._spk_rows = rows
        return h + a[:, None, :]

    def forward(self, batch: Batch, training: bool = False,
                drop_seed: int = 0) -> np.ndarray:
        h = self.encoder.forward(batch.token_ids, batch.sup_ids, batch.valid)
        if self.config.speaker_mode != "none":
            h = self.inject_speaker(h, batch.speaker_rows)
        h = self.drop0.forward(h, training, derive(drop_seed, 0))
        h = self.dec0.forward(h, batch.valid)
        h = self.ln0.forward(h)
        h = self.drop1.forward(h, training, derive(drop_seed, 1))
        h = self.dec1.forward(h, batch.valid)
        h = self.ln1.forward(h)
        h = self.drop2.forward(h, training, derive(drop_seed, 2))
        logits = self.head.forward(h)[..., 0]
        return self.out_act.forward(logits)

    def backward(self, dprobs: np.ndarray) -> None:
        dlogits = self.out_act.backward(dprobs)
        dh = self.head.backward(dlogits[..., None])
        dh = self.drop2.backward(dh)
        dh = self.ln1.backward(dh)
        dh = self.dec1.backward(dh)
        dh = self.drop1.backward(dh)
        dh = self.ln0.backward(dh)
        dh = self.dec0.backward(dh)
        dh = self.drop0.backward(dh)
        if self.config.speaker_mode != "none":
            da = dh.sum(axis=1)
            de = self.spk_proj.backward(self.spk_act.backward(da))
            np.add.at(self.store["spk/table"].grad, self._spk_rows, de)
        self.encoder.backward(dh)

    def set_speaker_table(self, table: np.ndarray) -> None:
        """Overwrite embedding rows, e.g. with oracle vectors before training."""
        param = self.store["spk/table"]
        if param.value.shape != table.shape:
            raise ShapeError(
                f"speaker table shape {table.shape} != {param.value.shape}")
        param.value[...] = table

    def replace_speaker_table(self, table: np.ndarray) -> None:
        """Swap in a table of a different row count (unseen-speaker attach)."""
        if self.config.speaker_mode == "none":
            raise ConfigError("model has no speaker path")
        if table.ndim != 2 or table.shape[1] != self.config.speaker_dim:
            raise ShapeError(f"bad speaker table shape {table.shape}")
        self.store.replace("spk/table", table.astype(np.float32))


# ---------------------------------------------------------------------------
# training


@dataclass
class StageConfig:
    epochs: int
    peak_lr: float
    clip_norm: float | None = None


@dataclass
class TrainResult:
    values: dict[str, np.ndarray]
    config: PhrasingConfig
    threshold: float
    f_half: float
    best_step: int
    history: list[dict] = field(default_factory=list)


def _bucket_batches(n_items, lengths, batch_size, rng):
    """Shuffle, sort by length for tight padding, chunk, shuffle chunks."""
    order = rng.permutation(n_items)
    order = sorted(order, key=lambda i: lengths[i])
    chunks = [order[i:i + batch_size] for i in range(0, n_items, batch_size)]
    chunk_order = rng.permutation(len(chunks))
    return [chunks[i] for i in chunk_order]


def _collect_probs(model: PhrasingModel, data, batch_size: int):
    """Concatenated (probs, labels, mask) over a split, evaluation mode."""
    probs, labels, masks = [], [], []
    for start in range(0, len(data), batch_size):
        batch = collate(data[start:start + batch_size])
        p = model.forward(batch, training=False)
        keep = batch.valid > 0
        probs.append(p[keep])
        labels.append(batch.labels[keep])
        masks.append(batch.label_mask[keep])
    return (np.concatenate(probs), np.concatenate(labels),
            np.concatenate(masks))


def validate(model: PhrasingModel, data, batch_size: int = 64,
             grid_step: float = 0.01) -> EvalReport:
    probs, labels, masks = _collect_probs(model, data, batch_size)
    return sweep_threshold(probs, labels, masks, grid_step)


def evaluate_at(model: PhrasingModel, data, threshold: float,
                batch_size: int = 64) -> EvalReport:
    """Score a split at a fixed decision threshold (no sweep)."""
    probs, labels, masks = _collect_probs(model, data, batch_size)
    return evaluate(probs, labels, masks, threshold)


def train_two_stage(config: PhrasingConfig,
                    train_data: list[tuple[TokenizedExample, int]],
                    val_data: list[tuple[TokenizedExample, int]],
                    *, seed: int,
                    stage1: StageConfig = StageConfig(10, 5e-4),
                    stage2: StageConfig = StageConfig(10, 5e-6, clip_norm=1.0),
                    batch_size: int = 32, eval_every: int = 1000,
                    grid_step: float = 0.01,
                    encoder_values: dict[str, np.ndarray] | None = None,
                    speaker_table: np.ndarray | None = None,
                    log=None) -> TrainResult:
    """Two-stage training with periodic validation sweeps.

    Stage one trains everything but the encoder; stage two unfreezes it
    and clips encoder gradients. Optimizer moments restart per stage. The
    result carries the best-validation parameter snapshot and threshold;
    with validation never improving past zero, the final snapshot is kept.
    """
    if not train_data:
        raise DataError("no training utterances")
    if not val_data:
        raise DataError("no validation utterances")
    if batch_size < 1 or eval_every < 1:
        raise ConfigError(
            f"bad batch_size={batch_size} or eval_every={eval_every}")

    model = PhrasingModel(config, seed)
    if encoder_values is not None:
        model.store.load({k: v for k, v in encoder_values.items()
                          if k.startswith("enc/")})
    if speaker_table is not None:
        model.set_speaker_table(np.asarray(speaker_table, dtype=np.float32))

    lengths = [len(ex.token_ids) for ex, _ in train_data]
    history: list[dict] = []
    best: tuple[dict, EvalReport, int] | None = None
    global_step = 0

    def run_validation():
        nonlocal best
        report = validate(model, val_data, max(batch_size, 64), grid_step)
        history.append({"step": global_step, "threshold": report.threshold,
                        "f_half": report.f_half, "precision": report.precision,
                        "recall": report.recall})
        if log:
            log(f"step {global_step}: val F0.5 {report.f_half:.4f} "
                f"@ {report.threshold:.2f}")
        if best is None or report.f_half > best[1].f_half:
            best = (model.store.values(), report, global_step)

    for stage_idx, stage in enumerate((stage1, stage2)):
        if stage.epochs < 1:
            continue
        model.store.set_trainable("enc/", stage_idx == 1)
        if config.speaker_mode == "frozen":
            model.store.set_trainable("spk/table", False)
        model.store.reset_optimizer()
        steps_per_epoch = -(-len(train_data) // batch_size)
        total_steps = stage.epochs * steps_per_epoch
        stage_step = 0
        for epoch in range(stage.epochs):
            rng = stream(seed, "order", stage_idx, epoch)
            for chunk in _bucket_batches(len(train_data), lengths,
                                         batch_size, rng):
                batch = collate([train_data[i] for i in chunk])
                global_step += 1
                stage_step += 1
                probs = model.forward(batch, training=True,
                                      drop_seed=derive(seed, "drop", global_step))
                loss, dp = nn.masked_bce(probs, batch.labels, batch.label_mask)
                if not np.isfinite(loss):
                    raise DataError(f"non-finite loss at step {global_step}")
                model.store.zero_grads()
                model.backward(dp)
                if stage.clip_norm is not None:
                    nn.clip_global_norm(model.store, "enc/", stage.clip_norm)
                lr = nn.warmup_linear_lr(stage_step, total_steps, stage.peak_lr)
                nn.adamw_step(model.store, lr, stage_step)
                if global_step % eval_every == 0:
                    run_validation()
        run_validation()

    if best is None:
        raise DataError("training ran no steps")
    values, report, step = best
    return TrainResult(values, config, report.threshold, report.f_half,
                       step, history)


# ---------------------------------------------------------------------------
# inference


def predict_rps(model: PhrasingModel, example: TokenizedExample,
                words, speaker_row: int, threshold: float) -> list[bool]:
    """Break marks per word boundary (length len(words) - 1).

    Candidates are word-final tokens whose boundary lacks punctuation; the
    last word closes the utterance and is never marked. At threshold 1.0
    nothing can exceed a sigmoid output, so no marks appear.
    """
    batch = collate([(example, speaker_row)])
    probs = model.forward(batch, training=False)[0]
    finals = np.flatnonzero(example.word_final_mask)
    marks = []
    for i in range(len(words) - 1):
        eligible = words[i].trailing_punct is None
        marks.append(bool(eligible and probs[finals[i]] > threshold))
    return marks
