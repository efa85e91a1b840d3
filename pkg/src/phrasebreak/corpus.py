"""Corpus data model: utterances, pause labeling, normalization, splits.

An utterance is a list of words with per-boundary pause durations. Boundary
i sits between word i and word i+1, so there are len(words) - 1 boundaries.
A breath pause is any pause strictly longer than the detection threshold at
a boundary that carries no punctuation.

The canonical on-disk form is JSON lines; see to_json_record. Alignment
output (per-word start/end times) is a separate ingestion surface parsed by
parse_alignment_jsonl.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .errors import DataError, ParseError
from .rng import stream

RP_THRESHOLD_MS = 50.0


@dataclass
class Word:
    surface: str
    phonemes: list[str]
    trailing_punct: str | None = None

    def __post_init__(self):
        if not self.surface:
            raise DataError("word surface must be non-empty")


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: int
    words: list[Word]
    boundary_pause_ms: list[float]
    rp_label: list[bool]
    total_duration_s: float

    def __post_init__(self):
        n = len(self.words)
        if n == 0:
            raise DataError(f"utterance {self.utterance_id}: no words")
        if len(self.boundary_pause_ms) != n - 1 or len(self.rp_label) != n - 1:
            raise DataError(
                f"utterance {self.utterance_id}: {n} words need {n - 1} "
                f"boundary entries, got {len(self.boundary_pause_ms)} pauses "
                f"and {len(self.rp_label)} labels"
            )
        if any(ms < 0 for ms in self.boundary_pause_ms):
            raise DataError(f"utterance {self.utterance_id}: negative pause")


@dataclass
class CorpusSplit:
    name: str
    utterances: list[Utterance]


SPLIT_NAMES = ("training", "validation_seen", "test_seen",
               "validation_unseen", "test_unseen")


# ---------------------------------------------------------------------------
# canonical JSONL


def to_json_record(utt: Utterance) -> dict:
    return {
        "id": utt.utterance_id,
        "speaker": utt.speaker_id,
        "words": [
            {"w": w.surface, "p": list(w.phonemes), "punct": w.trailing_punct}
            for w in utt.words
        ],
        "pause_ms": [round(ms, 6) for ms in utt.boundary_pause_ms],
        "rp": [int(r) for r in utt.rp_label],
        "dur_s": round(utt.total_duration_s, 6),
    }


def from_json_record(obj: dict) -> Utterance:
    try:
        words = [Word(w["w"], list(w["p"]), w.get("punct"))
                 for w in obj["words"]]
        return Utterance(
            utterance_id=str(obj["id"]),
            speaker_id=int(obj["speaker"]),
            words=words,
            boundary_pause_ms=[float(x) for x in obj["pause_ms"]],
            rp_label=[bool(x) for x in obj["rp"]],
            total_duration_s=float(obj["dur_s"]),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"bad corpus record: {exc}") from exc


def write_jsonl(path, utterances) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            fh.write(json.dumps(to_json_record(utt), sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), line=lineno) from exc
            out.append(from_json_record(obj))
    return out


def is_alignment_record(obj: dict) -> bool:
    words = obj.get("words")
    return bool(words) and "start" in words[0]


# ---------------------------------------------------------------------------
# alignment ingestion


def parse_alignment_jsonl(lines) -> list[Utterance]:
    """Utterances from alignment records carrying per-word start/end seconds.

    Boundary pauses are start[i+1] - end[i], clamped to zero when the
    alignment overlaps slightly. A word whose end precedes its start, or a
    word starting before its predecessor, is a data error. Breath-pause
    labels are left all-false; run label_rps after normalization.
    """
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        utt_id = str(obj.get("id", f"line{lineno}"))
        try:
            records = obj["words"]
            words = [Word(w["w"], list(w.get("p", [])), w.get("punct"))
                     for w in records]
            starts = [float(w["start"]) for w in records]
            ends = [float(w["end"]) for w in records]
        except (KeyError, TypeError) as exc:
            raise DataError(f"utterance {utt_id}: bad alignment record: {exc}")
        for i, (s, e) in enumerate(zip(starts, ends)):
            if e < s:
                raise DataError(
                    f"utterance {utt_id}: word {i} has end {e} before start {s}"
                )
            if i and starts[i] < starts[i - 1]:
                raise DataError(f"utterance {utt_id}: non-monotone word times")
        pauses = [max(0.0, (starts[i + 1] - ends[i]) * 1000.0)
                  for i in range(len(words) - 1)]
        duration = ends[-1] - starts[0]
        if duration <= 0:
            raise DataError(f"utterance {utt_id}: non-positive span")
        out.append(Utterance(utt_id, int(obj["speaker"]), words, pauses,
                             [False] * (len(words) - 1), duration))
    return out


# ---------------------------------------------------------------------------
# normalization and labeling


def normalize_punctuation(utt: Utterance) -> Utterance:
    """Collapse runs of trailing punctuation to their first symbol and drop
    punctuation on the final word, which closes the utterance rather than
    any word boundary."""
    words = []
    last = len(utt.words) - 1
    for i, w in enumerate(utt.words):
        punct = w.trailing_punct
        if punct:
            punct = punct[0]
        if i == last:
            punct = None
        words.append(replace(w, trailing_punct=punct))
    return replace(utt, words=words)


def label_rps(utt: Utterance, threshold_ms: float = RP_THRESHOLD_MS) -> Utterance:
    """Mark boundaries with pause strictly above threshold and no punctuation."""
    labels = [
        utt.words[i].trailing_punct is None and ms > threshold_ms
        for i, ms in enumerate(utt.boundary_pause_ms)
    ]
    return replace(utt, rp_label=labels)


def check_labels(utt: Utterance, threshold_ms: float = RP_THRESHOLD_MS) -> None:
    """Raise if stored labels disagree with the pause/punctuation evidence."""
    expect = label_rps(utt, threshold_ms).rp_label
    if expect != utt.rp_label:
        raise DataError(f"utterance {utt.utterance_id}: inconsistent rp labels")


# ---------------------------------------------------------------------------
# splits


def split_corpus(seen, unseen=(), *, seed: int, ratio=(8, 1, 1),
                 unseen_holdout_per_speaker: int = 50,
                 unseen_speakers=None) -> dict[str, CorpusSplit]:
    """Five-way split keyed by SPLIT_NAMES.

    The seen pool shuffles under the seed and splits at the utterance level
    by the ratio (validation and test sizes floor, training takes the rest).
    Each unseen speaker contributes up to unseen_holdout_per_speaker sampled
    utterances to validation_unseen and the remainder to test_unseen.
    """
    if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise DataError(f"bad split ratio: {ratio}")
    seen = list(seen)
    unseen = list(unseen)
    rng = stream(seed, "split")
    order = rng.permutation(len(seen))
    shuffled = [seen[i] for i in order]
    total = sum(ratio)
    n_val = len(seen) * ratio[1] // total
    n_test = len(seen) * ratio[2] // total
    n_train = len(seen) - n_val - n_test
    splits = {
        "training": CorpusSplit("training", shuffled[:n_train]),
        "validation_seen": CorpusSplit(
            "validation_seen", shuffled[n_train:n_train + n_val]),
        "test_seen": CorpusSplit("test_seen", shuffled[n_train + n_val:]),
    }

    by_speaker: dict[int, list[Utterance]] = {}
    for utt in unseen:
        by_speaker.setdefault(utt.speaker_id, []).append(utt)
    if unseen_speakers is not None:
        for spk in unseen_speakers:
            if not by_speaker.get(spk):
                raise DataError(f"unseen speaker {spk} has no utterances")
    val_u, test_u = [], []
    for spk in sorted(by_speaker):
        utts = by_speaker[spk]
        n_hold = min(unseen_holdout_per_speaker, len(utts))
        picked = sorted(rng.choice(len(utts), size=n_hold, replace=False).tolist())
        picked_set = set(picked)
        val_u.extend(utts[i] for i in picked)
        test_u.extend(u for i, u in enumerate(utts) if i not in picked_set)
    splits["validation_unseen"] = CorpusSplit("validation_unseen", val_u)
    splits["test_unseen"] = CorpusSplit("test_unseen", test_u)
    return splits
