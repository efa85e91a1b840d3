"""Speaker embedding lifecycle: tables, few-shot averages, the adapter.

A speaker's embedding is the average of its utterance-level embeddings.
For speakers unseen during training there are two attach routes: frozen
models accept raw averages directly, while trainable-embedding models need
the adapter, a small MLP trained to map raw averages onto the embeddings
the phrasing model actually learned for its seen speakers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ContractError, DataError, ParseError, ShapeError
from .model import PhrasingModel
from .rng import derive, stream

PROVENANCES = ("oracle_psvm", "external", "trained", "adapted")


@dataclass
class EmbeddingTable:
    dim: int
    entries: dict[int, np.ndarray]
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        for spk, vec in self.entries.items():
            if np.shape(vec) != (self.dim,):
                raise ShapeError(
                    f"speaker {spk}: embedding shape {np.shape(vec)}, "
                    f"table dim {self.dim}")


def average_embeddings(vectors) -> np.ndarray:
    """Plain mean of utterance embeddings, e = (1/N) sum e_n."""
    vectors = list(vectors)
    if not vectors:
        raise DataError("cannot average zero embeddings")
    dim = np.shape(vectors[0])
    if any(np.shape(v) != dim for v in vectors):
        raise ShapeError("embeddings disagree in shape")
    return np.mean(np.stack(vectors), axis=0)


def few_shot_embed(vectors, size: int, seed: int) -> np.ndarray:
    """Average of `size` utterance embeddings sampled without replacement.

    Asking for at least as many as exist short-circuits to the full average
    (bit-identical to average_embeddings, no sampling involved).
    """
    vectors = list(vectors)
    if size < 1:
        raise ShapeError(f"sample size must be >= 1, got {size}")
    if size >= len(vectors):
        return average_embeddings(vectors)
    idx = stream(seed, "fewshot").choice(len(vectors), size=size, replace=False)
    return average_embeddings([vectors[i] for i in sorted(idx.tolist())])


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DataError("cosine similarity undefined for a zero vector")
    return float(u @ v / (nu * nv))


# ---------------------------------------------------------------------------
# adapter: raw speaker average -> trained embedding space


@dataclass
class AdapterParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        d_in, hidden = self.W1.shape
        if self.W2.shape != (hidden, d_in) or self.b1.shape != (hidden,) \
                or self.b2.shape != (d_in,):
            raise ShapeError("adapter parameter shapes disagree")

    @property
    def dim(self) -> int:
        return self.W1.shape[0]


def init_adapter(dim: int, seed: int, hidden: int = 1024) -> AdapterParams:
    """Xavier weights, zero biases."""
    return AdapterParams(
        W1=nn.xavier_init((dim, hidden), derive(seed, "adapter", "W1")).astype(np.float32),
        b1=np.zeros(hidden, dtype=np.float32),
        W2=nn.xavier_init((hidden, dim), derive(seed, "adapter", "W2")).astype(np.float32),
        b2=np.zeros(dim, dtype=np.float32),
    )


def apply_adapter(adapter: AdapterParams, e: np.ndarray) -> np.ndarray:
    """f(e) = W2 relu(W1 e + b1) + b2, applied over the trailing axis."""
    e = np.asarray(e)
    if e.shape[-1] != adapter.dim:
        raise ShapeError(f"embedding dim {e.shape[-1]} != adapter {adapter.dim}")
    h = np.maximum(e @ adapter.W1 + adapter.b1, 0.0)
    return h @ adapter.W2 + adapter.b2


def train_adapter(pairs, steps: int = 20000, lr: float = 1e-5,
                  batch_size: int = 32, seed: int = 0, hidden: int = 1024):
    """Fit the adapter to (raw, target) embedding pairs by MSE.

    Constant learning rate, AdamW, mini-batches resampled per step.
    Returns (AdapterParams, per-step losses).
    """
    pairs = [(np.asarray(a, dtype=np.float32), np.asarray(b, dtype=np.float32))
             for a, b in pairs]
    if not pairs:
        raise DataError("no adapter training pairs")
    dim = pairs[0][0].shape[0]
    for a, b in pairs:
        if a.shape != (dim,) or b.shape != (dim,):
            raise ShapeError("adapter pairs disagree in dimension")
    if steps < 1:
        raise ShapeError(f"steps must be >= 1, got {steps}")

    store = nn.ParameterStore()
    l1 = nn.Linear(store, "ad/l1", dim, hidden, derive(seed, "adapter", "W1"))
    act = nn.Activation("relu")
    l2 = nn.Linear(store, "ad/l2", hidden, dim, derive(seed, "adapter", "W2"))

    sources = np.stack([a for a, _ in pairs])
    targets = np.stack([b for _, b in pairs])
    rng = stream(seed, "adapter-batches")
    losses = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(pairs), size=min(batch_size, len(pairs)))
        x = sources[idx]
        y = targets[idx]
        out = l2.forward(act.forward(l1.forward(x)))
        diff = out - y
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise DataError(f"non-finite adapter loss at step {step}")
        losses.append(loss)
        store.zero_grads()
        dout = (2.0 / diff.size) * diff
        l1.backward(act.backward(l2.backward(dout)))
        nn.adamw_step(store, lr, step)
    adapter = AdapterParams(store["ad/l1/W"].value.copy(),
                            store["ad/l1/b"].value.copy(),
                            store["ad/l2/W"].value.copy(),
                            store["ad/l2/b"].value.copy())
    return adapter, losses


# ---------------------------------------------------------------------------
# attach


def attach_unseen(model: PhrasingModel, table: EmbeddingTable) -> dict[int, int]:
    """Install unseen-speaker embeddings for inference.

    Frozen-mode models take raw or oracle embeddings as-is; trainable-mode
    models only accept adapter-mapped tables, since their training moved
    the embedding space away from the raw one. Returns the speaker -> row
    mapping for the new table.
    """
    mode = model.config.speaker_mode
    if mode == "none":
        raise ContractError("baseline model cannot attach speaker embeddings")
    if table.dim != model.config.speaker_dim:
        raise ShapeError(
            f"table dim {table.dim} != model speaker_dim "
            f"{model.config.speaker_dim}")
    if not table.entries:
        raise DataError("empty embedding table")
    if mode == "trainable" and table.provenance != "adapted":
        raise ContractError(
            "trainable-mode attach needs adapter-mapped embeddings, got "
            f"provenance {table.provenance!r}")
    speakers = sorted(table.entries)
    matrix = np.stack([table.entries[s] for s in speakers]).astype(np.float32)
    model.replace_speaker_table(matrix)
    return {spk: row for row, spk in enumerate(speakers)}


# ---------------------------------------------------------------------------
# TSV interchange


def write_embedding_tsv(path, rows) -> None:
    """rows: iterable of (speaker_id, vector). repr-round-trip floats."""
    with open(path, "w", encoding="utf-8") as fh:
        for spk, vec in rows:
            fields = [str(int(spk))] + [repr(float(x)) for x in np.asarray(vec)]
            fh.write("\t".join(fields) + "\n")


def read_embedding_tsv(path, per_utterance: bool = False):
    """Speaker embeddings from TSV.

    Per-speaker mode maps id -> vector and rejects duplicate ids;
    per-utterance mode maps id -> list of vectors in file order.
    """
    singles: dict[int, np.ndarray] = {}
    multi: dict[int, list[np.ndarray]] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError("expected speaker_id<TAB>components",
                                 line=lineno)
            try:
                spk = int(parts[0])
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from exc
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ParseError(
                    f"dimension {vec.size} != {dim} seen earlier", line=lineno)
            if per_utterance:
                multi.setdefault(spk, []).append(vec)
            else:
                if spk in singles:
                    raise ParseError(f"duplicate speaker {spk}", line=lineno)
                singles[spk] = vec
    return multi if per_utterance else singles
