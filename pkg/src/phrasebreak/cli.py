"""Command-line surface tying the pipeline together.

Subcommands cover the full loop: synthetic corpus generation (synth),
ingestion and splitting (prepare), encoder pretraining (pretrain),
two-stage model training (train), fixed-threshold scoring (eval),
embedding-adapter fitting (adapt), the few-shot attachment experiment
(fewshot), plain-text inference (predict), and the corpus statistics
reports (stats).

Every run that owns an output directory writes a manifest.json there:
the exact argv, the global seed, a digest of the resolved configuration,
and sha256 checksums of input and output files. With a fixed seed the
primary artifacts (checkpoints, reports, tables) are byte identical
across reruns; the manifest's wall-clock fields are not.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_tensors, write_tensors
from .corpus import (SPLIT_NAMES, Utterance, Word, check_labels,
                     is_alignment_record, label_rps, normalize_punctuation,
                     parse_alignment_jsonl, read_jsonl, split_corpus,
                     write_jsonl)
from .encoders import EncoderConfig, pretrain
from .errors import ConfigError, ContractError, DataError, ParseError
from .evalstats import (build_characteristic_tables, chi_squared,
                        expected_counts, kmeans, ks_statistic, rp_stats,
                        wasserstein1)
from .model import (PhrasingConfig, PhrasingModel, StageConfig, evaluate_at,
                    predict_rps, train_two_stage, validate)
from .rng import derive
from .speaker import (AdapterParams, EmbeddingTable, apply_adapter,
                      attach_unseen, few_shot_embed, read_embedding_tsv,
                      train_adapter, write_embedding_tsv)
from .synthgen import gen_corpus, gen_speakers, oracle_embeddings, pseudo_g2p
from .textgrid import PUNCT_CHARS, parse_textgrid, textgrid_to_utterance
from .tokenization import (MergeTable, PhonemeTokenizer, SubwordTokenizer,
                           Vocab, derive_supphonemes, make_labels,
                           read_lexicon, read_merges, read_vocab,
                           train_sup_bpe, write_lexicon, write_merges,
                           write_vocab)

CONFIG_DEFAULTS = {
    "model.kind": "phoneme",
    "model.embed_dim": "64",
    "model.num_layers": "2",
    "model.d_enc": "64",
    "model.max_len": "512",
    "model.speaker_mode": "none",
    "model.speaker_dim": "32",
    "model.dropout": "0.5",
    "tokenizer.merges": "200",
    "tokenizer.sup_merges": "200",
    "train.stage1_epochs": "10",
    "train.stage1_peak_lr": "5e-4",
    "train.stage2_epochs": "10",
    "train.stage2_peak_lr": "5e-6",
    "train.clip_norm": "1.0",
    "train.batch_size": "32",
    "train.eval_every": "1000",
    "train.grid_step": "0.01",
    "data.embeddings": "",
    "pretrain.checkpoint": "",
}


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(path, sets) -> dict[str, str]:
    """Defaults, then the config file, then --set pairs. Later wins."""
    cfg = dict(CONFIG_DEFAULTS)
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}")
        for section in parser.sections():
            for key, value in parser.items(section):
                full = f"{section}.{key}"
                if full not in cfg:
                    raise ConfigError(f"{path}: unknown setting {full}")
                cfg[full] = value
    for pair in sets:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set wants section.key=value, got {pair!r}")
        if key not in cfg:
            raise ConfigError(f"--set: unknown setting {key}")
        cfg[key] = value
    return cfg


def config_digest(cfg: dict[str, str]) -> str:
    text = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# manifest and small file helpers


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, argv, seed, digest, inputs, t0) -> None:
    outputs = {str(p.relative_to(out_dir)): _sha256(p)
               for p in sorted(out_dir.rglob("*"))
               if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "argv": list(argv),
        "seed": seed,
        "config_digest": digest,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": outputs,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t0)),
        "elapsed_s": round(time.time() - t0, 3),
    }
    _write_json(out_dir / "manifest.json", manifest)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_kv(path, pairs: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(pairs):
            fh.write(f"{key}={pairs[key]}\n")


def _read_kv(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition("=")
                out[key] = value
    return out


def _out_dir(arg) -> Path:
    out = Path(arg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_split(corpus_dir: Path, name: str) -> list[Utterance]:
    path = corpus_dir / f"{name}.jsonl"
    if not path.exists():
        raise DataError(f"missing split file {path}")
    return read_jsonl(path)


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------------------
# tokenizer bundle: everything needed to turn words into model inputs


@dataclass
class TokenBundle:
    kind: str
    lexicon: dict[str, list[str]]
    subword: SubwordTokenizer | None = None
    phoneme: PhonemeTokenizer | None = None
    sup_table: MergeTable | None = None
    sup_vocab: Vocab | None = None

    @property
    def vocab(self):
        return self.subword.vocab if self.kind == "subword" else self.phoneme.vocab


def _corpus_lexicon(utterances) -> dict[str, list[str]]:
    lex: dict[str, list[str]] = {}
    for utt in utterances:
        for w in utt.words:
            lex.setdefault(w.surface, list(w.phonemes))
    return lex


def train_token_bundle(kind, utterances, merges, sup_merges) -> TokenBundle:
    lex = _corpus_lexicon(utterances)
    if kind == "subword":
        return TokenBundle(kind, lex,
                           subword=SubwordTokenizer.train(utterances, merges))
    tok = PhonemeTokenizer.train(utterances,
                                 with_graphemes=(kind == "phoneme_pl"))
    bundle = TokenBundle(kind, lex, phoneme=tok)
    if kind == "phoneme_mp":
        bundle.sup_table, bundle.sup_vocab = train_sup_bpe(utterances,
                                                           sup_merges)
    return bundle


def save_token_bundle(out: Path, bundle: TokenBundle) -> None:
    write_lexicon(out / "lexicon.txt", bundle.lexicon)
    write_vocab(out / "vocab.txt", bundle.vocab)
    if bundle.kind == "subword":
        write_merges(out / "merges.txt", bundle.subword.merge_table)
        return
    if bundle.phoneme.grapheme_vocab is not None:
        write_vocab(out / "grapheme_vocab.txt", bundle.phoneme.grapheme_vocab)
    if bundle.kind == "phoneme_mp":
        write_vocab(out / "sup_vocab.txt", bundle.sup_vocab)
        write_merges(out / "sup_merges.txt", bundle.sup_table)


def load_token_bundle(src: Path, kind: str) -> TokenBundle:
    lex = read_lexicon(src / "lexicon.txt")
    if kind == "subword":
        return TokenBundle(kind, lex, subword=SubwordTokenizer(
            read_merges(src / "merges.txt"), read_vocab(src / "vocab.txt")))
    grapheme_path = src / "grapheme_vocab.txt"
    tok = PhonemeTokenizer(
        read_vocab(src / "vocab.txt"),
        read_vocab(grapheme_path) if grapheme_path.exists() else None)
    bundle = TokenBundle(kind, lex, phoneme=tok)
    if kind == "phoneme_mp":
        bundle.sup_table = read_merges(src / "sup_merges.txt")
        bundle.sup_vocab = read_vocab(src / "sup_vocab.txt")
    return bundle


def encode_words(bundle: TokenBundle, words):
    if bundle.kind == "subword":
        return bundle.subword.tokenize(words)
    example = bundle.phoneme.tokenize(words)
    if bundle.kind == "phoneme_mp":
        example = derive_supphonemes(example, bundle.phoneme.vocab,
                                     bundle.sup_table, bundle.sup_vocab)
    return example


def encode_corpus(bundle: TokenBundle, utterances, row_of=None):
    """(example, speaker row) pairs ready for collate()."""
    data = []
    for utt in utterances:
        example = make_labels(encode_words(bundle, utt.words), utt.rp_label)
        if row_of is None:
            row = 0
        elif utt.speaker_id in row_of:
            row = row_of[utt.speaker_id]
        else:
            raise DataError(
                f"speaker {utt.speaker_id} has no row in the speaker table")
        data.append((example, row))
    return data


def _encoder_config(bundle, embed_dim, num_layers, d_enc, max_len):
    sup = len(bundle.sup_vocab) if bundle.sup_vocab is not None else 0
    gra = 0
    if bundle.phoneme is not None and bundle.phoneme.grapheme_vocab is not None:
        gra = len(bundle.phoneme.grapheme_vocab)
    return EncoderConfig(kind=bundle.kind, vocab_size=len(bundle.vocab),
                         embed_dim=embed_dim, num_layers=num_layers,
                         d_enc=d_enc, max_len=max_len, sup_vocab_size=sup,
                         grapheme_vocab_size=gra)


def _encoder_config_from_meta(meta: dict[str, str]) -> EncoderConfig:
    return EncoderConfig(kind=meta["kind"], vocab_size=int(meta["vocab_size"]),
                         embed_dim=int(meta["embed_dim"]),
                         num_layers=int(meta["num_layers"]),
                         d_enc=int(meta["d_enc"]), max_len=int(meta["max_len"]),
                         sup_vocab_size=int(meta["sup_vocab_size"]),
                         grapheme_vocab_size=int(meta["grapheme_vocab_size"]))


# ---------------------------------------------------------------------------
# checkpoint directory layout


def _save_checkpoint(out: Path, result, bundle, speakers, digest) -> None:
    write_tensors(out / "model.pbrk", result.values)
    enc = result.config.encoder
    meta = {
        "kind": enc.kind, "vocab_size": enc.vocab_size,
        "embed_dim": enc.embed_dim, "num_layers": enc.num_layers,
        "d_enc": enc.d_enc, "max_len": enc.max_len,
        "sup_vocab_size": enc.sup_vocab_size,
        "grapheme_vocab_size": enc.grapheme_vocab_size,
        "speaker_mode": result.config.speaker_mode,
        "num_speakers": result.config.num_speakers,
        "speaker_dim": result.config.speaker_dim,
        "dropout": repr(result.config.dropout),
        "threshold": repr(result.threshold),
        "f_half": repr(result.f_half),
        "best_step": result.best_step,
        "config_digest": digest,
    }
    _write_kv(out / "meta.txt", meta)
    save_token_bundle(out, bundle)
    with open(out / "speakers.txt", "w", encoding="utf-8") as fh:
        for spk in speakers:
            fh.write(f"{spk}\n")
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _load_checkpoint(src: Path):
    meta_path = src / "meta.txt"
    if not meta_path.exists():
        raise DataError(f"{src} is not a checkpoint directory (no meta.txt)")
    meta = _read_kv(meta_path)
    bundle = load_token_bundle(src, meta["kind"])
    config = PhrasingConfig(_encoder_config_from_meta(meta),
                            speaker_mode=meta["speaker_mode"],
                            num_speakers=int(meta["num_speakers"]),
                            speaker_dim=int(meta["speaker_dim"]),
                            dropout=float(meta["dropout"]))
    model = PhrasingModel(config, seed=0)
    model.store.load(read_tensors(src / "model.pbrk"))
    speakers = []
    speakers_path = src / "speakers.txt"
    if speakers_path.exists():
        speakers = [int(line) for line in
                    speakers_path.read_text(encoding="utf-8").split()]
    return model, bundle, speakers, meta


def _load_adapter(src: Path) -> AdapterParams:
    values = read_tensors(src / "adapter.pbrk")
    return AdapterParams(values["ad/W1"], values["ad/b1"],
                         values["ad/W2"], values["ad/b2"])


def _report_dict(report, split: str) -> dict:
    return {"split": split, "threshold": report.threshold,
            "tp": report.tp, "fp": report.fp, "fn": report.fn,
            "precision": report.precision, "recall": report.recall,
            "f_half": report.f_half}


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args, argv):
    t0 = time.time()
    out = _out_dir(args.out)
    styles = gen_speakers(args.speakers, args.features, seed=args.seed)
    utterances = gen_corpus(styles, args.utts, seed=args.seed)
    write_jsonl(out / "corpus.jsonl", utterances)
    means, per_utt = oracle_embeddings(styles, args.utts, dim=args.embed_dim,
                                       noise_std=args.noise_std,
                                       seed=args.seed)
    write_embedding_tsv(out / "speakers.tsv", sorted(means.items()))
    rows = [(spk, vec) for spk in sorted(per_utt) for vec in per_utt[spk]]
    write_embedding_tsv(out / "utterances.tsv", rows)
    _write_manifest(out, argv, args.seed, "", [], t0)
    print(f"wrote {len(utterances)} utterances for {len(styles)} speakers "
          f"to {out}")


def _speaker_from_stem(stem: str) -> int:
    head = stem.split("_")[0]
    digits = "".join(ch for ch in head if ch.isdigit())
    if not digits:
        raise DataError(
            f"cannot read a speaker id from file name {stem!r}; "
            "expected names like spk003_utt0001.TextGrid")
    return int(digits)


def _read_input_corpus(path: Path, fmt: str) -> list[Utterance]:
    if fmt == "textgrid":
        if not path.is_dir():
            raise DataError(f"textgrid input wants a directory, got {path}")
        utterances = []
        for grid in sorted(path.glob("*.TextGrid")):
            doc = parse_textgrid(grid.read_text(encoding="utf-8"))
            utterances.append(textgrid_to_utterance(
                doc, grid.stem, _speaker_from_stem(grid.stem)))
        if not utterances:
            raise DataError(f"no .TextGrid files under {path}")
        return utterances
    # one JSONL family, two record shapes: canonical corpus records and
    # word-alignment records; sniff the first non-empty line
    first = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    first = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(str(exc), line=lineno)
                break
    if first is None:
        raise DataError(f"{path} is empty")
    if is_alignment_record(first):
        with open(path, encoding="utf-8") as fh:
            return parse_alignment_jsonl(fh)
    return read_jsonl(path)


def _filter_fewshot_pool(tsv: Path, utterances, splits, out_path) -> None:
    """Per-utterance vectors restricted to the validation_unseen sample.

    TSV rows of one speaker are taken in the same order as that speaker's
    utterances in the input corpus, so the k-th row is the k-th utterance.
    """
    pool = read_embedding_tsv(tsv, per_utterance=True)
    position = {}
    counts: dict[int, int] = {}
    for utt in utterances:
        position[utt.utterance_id] = counts.get(utt.speaker_id, 0)
        counts[utt.speaker_id] = position[utt.utterance_id] + 1
    rows = []
    for utt in splits["validation_unseen"].utterances:
        vectors = pool.get(utt.speaker_id)
        if vectors is None:
            raise DataError(f"no embedding rows for speaker "
                            f"{utt.speaker_id} in {tsv}")
        if len(vectors) != counts[utt.speaker_id]:
            raise DataError(
                f"speaker {utt.speaker_id}: {len(vectors)} embedding rows "
                f"for {counts[utt.speaker_id]} utterances")
        rows.append((utt.speaker_id, vectors[position[utt.utterance_id]]))
    write_embedding_tsv(out_path, rows)


def _cmd_prepare(args, argv):
    t0 = time.time()
    out = _out_dir(args.out)
    src = Path(args.input)
    utterances = _read_input_corpus(src, args.format)
    utterances = [label_rps(normalize_punctuation(u), args.rp_threshold_ms)
                  for u in utterances]
    for utt in utterances:
        check_labels(utt, args.rp_threshold_ms)
    unseen_ids = set(_parse_int_list(args.unseen)) if args.unseen else set()
    seen = [u for u in utterances if u.speaker_id not in unseen_ids]
    unseen = [u for u in utterances if u.speaker_id in unseen_ids]
    ratio = _parse_int_list(args.ratio)
    splits = split_corpus(seen, unseen, seed=args.seed, ratio=tuple(ratio),
                          unseen_holdout_per_speaker=args.holdout,
                          unseen_speakers=sorted(unseen_ids))
    for name in SPLIT_NAMES:
        write_jsonl(out / f"{name}.jsonl", splits[name].utterances)
    inputs = [src]
    if args.utt_embeddings:
        _filter_fewshot_pool(Path(args.utt_embeddings), utterances, splits,
                             out / "fewshot_pool.tsv")
        inputs.append(Path(args.utt_embeddings))
    _write_manifest(out, argv, args.seed, "", inputs, t0)
    print(", ".join(f"{name} {len(splits[name].utterances)}"
                    for name in SPLIT_NAMES))


def _cmd_pretrain(args, argv):
    t0 = time.time()
    out = _out_dir(args.out)
    corpus_dir = Path(args.corpus)
    train_utts = _read_split(corpus_dir, "training")
    bundle = train_token_bundle(args.kind, train_utts, args.merges,
                                args.sup_merges)
    examples = [encode_words(bundle, utt.words) for utt in train_utts]
    config = _encoder_config(bundle, args.embed_dim, args.num_layers,
                             args.d_enc, args.max_len)
    result = pretrain(config, examples, steps=args.steps, seed=args.seed,
                      peak_lr=args.peak_lr, batch_size=args.batch_size)
    write_tensors(out / "encoder.pbrk", result.values)
    meta = {
        "kind": config.kind, "vocab_size": config.vocab_size,
        "embed_dim": config.embed_dim, "num_layers": config.num_layers,
        "d_enc": config.d_enc, "max_len": config.max_len,
        "sup_vocab_size": config.sup_vocab_size,
        "grapheme_vocab_size": config.grapheme_vocab_size,
        "steps": args.steps, "peak_lr": repr(args.peak_lr),
        "batch_size": args.batch_size, "seed": args.seed,
    }
    _write_kv(out / "meta.txt", meta)
    save_token_bundle(out, bundle)
    log = result.loss_log
    with open(out / "losses.jsonl", "w", encoding="utf-8") as fh:
        for i in range(len(log["total"])):
            entry = {"step": i + 1}
            entry.update({name: log[name][i] for name in sorted(log)})
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    _write_manifest(out, argv, args.seed, "",
                    [corpus_dir / "training.jsonl"], t0)
    print(f"pretrained {config.kind} encoder, {args.steps} steps, "
          f"loss {log['total'][0]:.4f} -> {log['total'][-1]:.4f}")


def _cmd_train(args, argv):
    t0 = time.time()
    cfg = resolve_config(args.config, args.set or [])
    # dedicated flags win over config values
    if args.kind:
        cfg["model.kind"] = args.kind
    if args.speaker_mode:
        cfg["model.speaker_mode"] = args.speaker_mode
    if args.embeddings:
        cfg["data.embeddings"] = args.embeddings
    if args.pretrained:
        cfg["pretrain.checkpoint"] = args.pretrained
    digest = config_digest(cfg)
    out = _out_dir(args.out)
    corpus_dir = Path(args.corpus)
    train_utts = _read_split(corpus_dir, "training")
    val_utts = _read_split(corpus_dir, "validation_seen")
    inputs = [corpus_dir / "training.jsonl",
              corpus_dir / "validation_seen.jsonl"]

    encoder_values = None
    if cfg["pretrain.checkpoint"]:
        pre = Path(cfg["pretrain.checkpoint"])
        pre_meta = _read_kv(pre / "meta.txt")
        if pre_meta["kind"] != cfg["model.kind"]:
            raise ConfigError(
                f"model.kind {cfg['model.kind']} does not match the "
                f"pretrained encoder kind {pre_meta['kind']}")
        # the stored weights fix the encoder architecture
        bundle = load_token_bundle(pre, pre_meta["kind"])
        enc_config = _encoder_config_from_meta(pre_meta)
        encoder_values = read_tensors(pre / "encoder.pbrk")
        inputs += [pre / "meta.txt", pre / "encoder.pbrk"]
    else:
        bundle = train_token_bundle(cfg["model.kind"], train_utts,
                                    int(cfg["tokenizer.merges"]),
                                    int(cfg["tokenizer.sup_merges"]))
        enc_config = _encoder_config(bundle, int(cfg["model.embed_dim"]),
                                     int(cfg["model.num_layers"]),
                                     int(cfg["model.d_enc"]),
                                     int(cfg["model.max_len"]))

    speakers = sorted({u.speaker_id for u in train_utts})
    mode = cfg["model.speaker_mode"]
    row_of = {spk: i for i, spk in enumerate(speakers)} if mode != "none" \
        else None
    speaker_table = None
    speaker_dim = int(cfg["model.speaker_dim"])
    if mode == "frozen":
        if not cfg["data.embeddings"]:
            raise ConfigError(
                "frozen speaker mode needs data.embeddings "
                "(per-speaker TSV), e.g. --embeddings speakers.tsv")
        entries = read_embedding_tsv(cfg["data.embeddings"])
        missing = [s for s in speakers if s not in entries]
        if missing:
            raise DataError(f"embeddings missing for speakers {missing}")
        speaker_table = np.stack([entries[s] for s in speakers])
        speaker_dim = speaker_table.shape[1]
        inputs.append(Path(cfg["data.embeddings"]))
    config = PhrasingConfig(enc_config, speaker_mode=mode,
                            num_speakers=len(speakers) if mode != "none"
                            else 0,
                            speaker_dim=speaker_dim,
                            dropout=float(cfg["model.dropout"]))
    train_data = encode_corpus(bundle, train_utts, row_of)
    val_data = encode_corpus(bundle, val_utts, row_of)
    clip = float(cfg["train.clip_norm"])
    result = train_two_stage(
        config, train_data, val_data, seed=args.seed,
        stage1=StageConfig(int(cfg["train.stage1_epochs"]),
                           float(cfg["train.stage1_peak_lr"])),
        stage2=StageConfig(int(cfg["train.stage2_epochs"]),
                           float(cfg["train.stage2_peak_lr"]),
                           clip_norm=clip if clip > 0 else None),
        batch_size=int(cfg["train.batch_size"]),
        eval_every=int(cfg["train.eval_every"]),
        grid_step=float(cfg["train.grid_step"]),
        encoder_values=encoder_values, speaker_table=speaker_table,
        log=print if args.verbose else None)
    _save_checkpoint(out, result, bundle,
                     speakers if mode != "none" else [], digest)
    _write_kv(out / "config.txt", cfg)
    _write_json(out / "report.json",
                {"split": "validation_seen", "threshold": result.threshold,
                 "f_half": result.f_half, "best_step": result.best_step})
    _write_manifest(out, argv, args.seed, digest, inputs, t0)
    print(f"best validation F0.5 {result.f_half:.4f} at threshold "
          f"{result.threshold:.2f} (step {result.best_step})")


def _cmd_eval(args, argv):
    t0 = time.time()
    out = _out_dir(args.out)
    ckpt = Path(args.ckpt)
    model, bundle, speakers, meta = _load_checkpoint(ckpt)
    corpus_dir = Path(args.corpus)
    utterances = _read_split(corpus_dir, args.split)
    row_of = None
    if meta["speaker_mode"] != "none":
        row_of = {spk: i for i, spk in enumerate(speakers)}
    data = encode_corpus(bundle, utterances, row_of)
    if args.sweep:
        report = validate(model, data, grid_step=args.grid_step)
    else:
        report = evaluate_at(model, data, float(meta["threshold"]))
    _write_json(out / "report.json", _report_dict(report, args.split))
    _write_manifest(out, argv, args.seed, meta.get("config_digest", ""),
                    [ckpt / "model.pbrk", corpus_dir / f"{args.split}.jsonl"],
                    t0)
    print(f"{args.split}: P {report.precision:.4f} R {report.recall:.4f} "
          f"F0.5 {report.f_half:.4f} @ {report.threshold:.2f}")


def _cmd_adapt(args, argv):
    t0 = time.time()
    out = _out_dir(args.out)
    ckpt = Path(args.ckpt)
    meta = _read_kv(ckpt / "meta.txt")
    if meta["speaker_mode"] != "trainable":
        raise ContractError(
            "the adapter maps external embeddings onto a trained speaker "
            f"table; checkpoint mode is {meta['speaker_mode']}")
    table = read_tensors(ckpt / "model.pbrk")["spk/table"]
    speakers = [int(line) for line in
                (ckpt / "speakers.txt").read_text(encoding="utf-8").split()]
    sources = read_embedding_tsv(args.embeddings)
    missing = [s for s in speakers if s not in sources]
    if missing:
        raise DataError(f"source embeddings missing for speakers {missing}")
    pairs = [(sources[spk], table[row]) for row, spk in enumerate(speakers)]
    adapter, losses = train_adapter(pairs, steps=args.steps, lr=args.lr,
                                    batch_size=args.batch_size,
                                    seed=args.seed, hidden=args.hidden)
    write_tensors(out / "adapter.pbrk",
                  {"ad/W1": adapter.W1, "ad/b1": adapter.b1,
                   "ad/W2": adapter.W2, "ad/b2": adapter.b2})
    _write_kv(out / "meta.txt",
              {"dim": adapter.dim, "hidden": args.hidden,
               "steps": args.steps, "lr": repr(args.lr), "seed": args.seed,
               "final_mse": repr(losses[-1])})
    with open(out / "losses.jsonl", "w", encoding="utf-8") as fh:
        for i, loss in enumerate(losses, 1):
            fh.write(json.dumps({"step": i, "mse": loss}) + "\n")
    _write_manifest(out, argv, args.seed, meta.get("config_digest", ""),
                    [ckpt / "model.pbrk", Path(args.embeddings)], t0)
    print(f"adapter mse {losses[0]:.6f} -> {losses[-1]:.6f} "
          f"over {args.steps} steps")


def _cmd_fewshot(args, argv):
    t0 = time.time()
    out = _out_dir(args.out)
    ckpt = Path(args.ckpt)
    model, bundle, _, meta = _load_checkpoint(ckpt)
    if meta["speaker_mode"] != args.mode:
        raise ContractError(
            f"checkpoint speaker mode {meta['speaker_mode']} does not "
            f"match experiment mode {args.mode}")
    adapter = None
    if args.mode == "trainable":
        if not args.adapter:
            raise ContractError(
                "trainable-mode attachment maps embeddings through the "
                "adapter; pass --adapter")
        adapter = _load_adapter(Path(args.adapter))
    pool = read_embedding_tsv(args.embeddings, per_utterance=True)
    corpus_dir = Path(args.corpus)
    test_utts = _read_split(corpus_dir, "test_unseen")
    unseen = sorted({u.speaker_id for u in test_utts})
    if not unseen:
        raise DataError("test_unseen split is empty")
    missing = [s for s in unseen if s not in pool]
    if missing:
        raise DataError(f"pool embeddings missing for speakers {missing}")
    sizes = _parse_int_list(args.sizes)
    threshold = float(meta["threshold"])
    per_size = {}
    for size in sizes:
        runs = []
        for rep in range(args.seeds):
            entries = {}
            for spk in unseen:
                vec = few_shot_embed(pool[spk], size,
                                     seed=derive(args.seed, "fewshot",
                                                 rep, size, spk))
                if adapter is not None:
                    vec = apply_adapter(adapter, vec)
                entries[spk] = vec
            table = EmbeddingTable(
                entries[unseen[0]].size, entries,
                "adapted" if adapter is not None else "external")
            rows = attach_unseen(model, table)
            data = encode_corpus(bundle, test_utts, rows)
            report = evaluate_at(model, data, threshold)
            runs.append(report.f_half)
        per_size[size] = {"runs": runs, "mean_f_half": float(np.mean(runs))}
    _write_json(out / "results.json",
                {"mode": args.mode, "threshold": threshold,
                 "seeds": args.seeds, "sizes": sizes,
                 "per_size": {str(s): per_size[s] for s in sizes}})
    lines = ["size  mean_F0.5  runs"]
    for size in sizes:
        runs = " ".join(f"{x:.4f}" for x in per_size[size]["runs"])
        lines.append(f"{size:>4}  {per_size[size]['mean_f_half']:>9.4f}  "
                     f"{runs}")
    (out / "results.txt").write_text("\n".join(lines) + "\n",
                                     encoding="utf-8")
    _write_manifest(out, argv, args.seed, meta.get("config_digest", ""),
                    [ckpt / "model.pbrk", Path(args.embeddings),
                     corpus_dir / "test_unseen.jsonl"], t0)
    print("\n".join(lines))


def _words_from_text(line: str, lexicon) -> list[Word]:
    words = []
    for token in line.split():
        token = token.lstrip(PUNCT_CHARS)
        core = token.rstrip(PUNCT_CHARS)
        trailing = token[len(core):]
        if not core:
            continue
        surface = core.lower()
        phonemes = lexicon.get(surface) or pseudo_g2p(surface)
        words.append(Word(surface, list(phonemes),
                          trailing[0] if trailing else None))
    return words


def _cmd_predict(args, argv):
    t0 = time.time()
    model, bundle, speakers, meta = _load_checkpoint(Path(args.ckpt))
    threshold = float(meta["threshold"])
    row = 0
    if meta["speaker_mode"] != "none":
        if args.speaker is None:
            raise ContractError(
                "this checkpoint is speaker conditioned; pass --speaker")
        row_of = {spk: i for i, spk in enumerate(speakers)}
        if args.speaker not in row_of:
            raise DataError(f"speaker {args.speaker} is not in the "
                            f"checkpoint table; known: {speakers}")
        row = row_of[args.speaker]
    text = Path(args.text).read_text(encoding="utf-8")
    records = []
    rendered_lines = []
    for line in text.splitlines():
        words = _words_from_text(line, bundle.lexicon)
        if not words:
            continue
        example = encode_words(bundle, words)
        marks = predict_rps(model, example, words, row, threshold)
        pieces = []
        for i, word in enumerate(words):
            pieces.append(word.surface + (word.trailing_punct or ""))
            if i < len(marks) and marks[i]:
                pieces.append("|")
        rendered_lines.append(" ".join(pieces))
        records.append({"text": line,
                        "words": [w.surface for w in words],
                        "breaks": [bool(b) for b in marks]})
    print("\n".join(rendered_lines))
    if args.out:
        out = _out_dir(args.out)
        with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        _write_manifest(out, argv, 0, meta.get("config_digest", ""),
                        [Path(args.ckpt) / "model.pbrk", Path(args.text)], t0)


def _read_annotations(path: Path) -> dict[int, list[str]]:
    """CSV rows speaker_id,prompt1|prompt2|... (prompts may hold commas)."""
    out: dict[int, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            head, sep, rest = line.partition(",")
            try:
                spk = int(head)
            except ValueError as exc:
                raise ParseError(f"bad speaker id {head!r}", line=lineno) \
                    from exc
            if spk in out:
                raise ParseError(f"duplicate speaker {spk}", line=lineno)
            out[spk] = [p.strip() for p in rest.split("|")
                        if p.strip()] if sep else []
    return out


def _cmd_stats(args, argv):
    t0 = time.time()
    out = _out_dir(args.out)
    corpus_dir = Path(args.corpus)
    if args.splits:
        names = [n.strip() for n in args.splits.split(",") if n.strip()]
    else:
        names = [n for n in SPLIT_NAMES
                 if (corpus_dir / f"{n}.jsonl").exists()]
    if not names:
        raise DataError(f"no split files under {corpus_dir}")
    inputs = []
    splits = {}
    for name in names:
        splits[name] = _read_split(corpus_dir, name)
        inputs.append(corpus_dir / f"{name}.jsonl")

    lines = []
    durations = {}
    for name in names:
        utts = splits[name]
        stats = rp_stats(utts)
        with open(out / f"{name}.csv", "w", encoding="utf-8") as fh:
            fh.write("speaker_id,f_rp_hz,mean_t_rp_s\n")
            for spk in sorted(stats):
                f_rp, mean_t = stats[spk]
                mean_field = repr(mean_t) if mean_t is not None else ""
                fh.write(f"{spk},{repr(f_rp)},{mean_field}\n")
        samples = [pause / 1000.0 for utt in utts
                   for pause, rp in zip(utt.boundary_pause_ms, utt.rp_label)
                   if rp]
        durations[name] = samples
        f_values = np.array([v[0] for v in stats.values()])
        line = (f"{name:<17} utts {len(utts):>6}  RPs {len(samples):>6}  "
                f"f_RP {f_values.mean():.4f} ± {f_values.std():.4f} Hz")
        if samples:
            arr = np.array(samples)
            line += f"  T_RP {arr.mean():.3f} ± {arr.std():.3f} s"
        lines.append(line)
    lines.append("")
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if durations[a] and durations[b]:
                w1 = wasserstein1(durations[a], durations[b])
                ks = ks_statistic(durations[a], durations[b])
                lines.append(f"{a} vs {b}: W1 {w1:.4f} s  KS {ks:.4f}")
            else:
                lines.append(f"{a} vs {b}: skipped, a side has no RPs")
    (out / "summary.txt").write_text("\n".join(lines) + "\n",
                                     encoding="utf-8")

    if args.annotations and not args.embeddings:
        raise ConfigError("--annotations needs --embeddings for the "
                          "cluster assignments")
    if args.embeddings:
        entries = read_embedding_tsv(args.embeddings)
        speaker_ids = sorted(entries)
        points = np.stack([entries[s] for s in speaker_ids])
        assignments, _ = kmeans(points, args.clusters, seed=args.seed)
        with open(out / "clusters.tsv", "w", encoding="utf-8") as fh:
            for spk, cluster in zip(speaker_ids, assignments):
                fh.write(f"{spk}\t{int(cluster)}\n")
        inputs.append(Path(args.embeddings))
        if args.annotations:
            annotations = _read_annotations(Path(args.annotations))
            assign_of = {spk: int(c)
                         for spk, c in zip(speaker_ids, assignments)}
            tables, notices = build_characteristic_tables(assign_of,
                                                          annotations)
            report = []
            for name in sorted(tables):
                table, row_labels, col_labels = tables[name]
                stat, p_value, v = chi_squared(table)
                report.append(f"{name}: chi2 {stat:.4f}  p {p_value:.4f}  "
                              f"V {v:.4f}")
                if (expected_counts(table) < 5).any():
                    report.append("  note: some expected counts are below 5")
                width = max(len(c) for c in col_labels) + 2
                header = " " * 12 + "".join(f"{c:>{width}}"
                                            for c in col_labels)
                report.append(header)
                for label, row in zip(row_labels, table):
                    cells = "".join(f"{int(x):>{width}}" for x in row)
                    report.append(f"  {label:<10}{cells}")
                report.append("")
            for notice in notices:
                report.append(f"note: {notice}")
            (out / "characteristics.txt").write_text(
                "\n".join(report).rstrip("\n") + "\n", encoding="utf-8")
            inputs.append(Path(args.annotations))
    _write_manifest(out, argv, args.seed, "", inputs, t0)
    print("\n".join(lines))


# ---------------------------------------------------------------------------
# argument parsing


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits; we want exit code 1
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phrasebreak",
                     description="speaker-conditioned phrase break pipeline")
    sub = parser.add_subparsers(dest="cmd", metavar="subcommand")

    p = sub.add_parser("synth", help="generate a synthetic corpus plus "
                       "oracle speaker embeddings")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True,
                   help="utterances per speaker")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", type=int, default=8,
                   help="boundary feature dimensionality")
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.set_defaults(run=_cmd_synth)

    p = sub.add_parser("prepare", help="normalize, label pauses, and split")
    p.add_argument("--in", dest="input", required=True,
                   help="corpus JSONL (canonical or word-alignment records) "
                   "or a directory of .TextGrid files")
    p.add_argument("--format", choices=("jsonl", "textgrid"),
                   default="jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--rp-threshold-ms", type=float, default=50.0)
    p.add_argument("--ratio", default="8,1,1",
                   help="train,val,test ratio for seen speakers")
    p.add_argument("--unseen", default="",
                   help="comma-separated speaker ids held out entirely")
    p.add_argument("--holdout", type=int, default=50,
                   help="per-unseen-speaker embedding sample cap")
    p.add_argument("--utt-embeddings", default="",
                   help="per-utterance TSV to filter into fewshot_pool.tsv")
    p.set_defaults(run=_cmd_prepare)

    p = sub.add_parser("pretrain", help="pretrain a toy text encoder")
    p.add_argument("--corpus", required=True, help="prepared corpus dir")
    p.add_argument("--kind", required=True,
                   choices=("subword", "phoneme", "phoneme_mp", "phoneme_pl"))
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--peak-lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--num-layers", type=int, default=2)
    p.add_argument("--d-enc", type=int, default=64)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--merges", type=int, default=200)
    p.add_argument("--sup-merges", type=int, default=200)
    p.set_defaults(run=_cmd_pretrain)

    p = sub.add_parser("train", help="two-stage phrasing model training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default="",
                   help="INI-style config; flags win over file values")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config setting")
    p.add_argument("--kind", default="",
                   choices=("", "subword", "phoneme", "phoneme_mp",
                            "phoneme_pl"))
    p.add_argument("--speaker-mode", default="",
                   choices=("", "none", "frozen", "trainable"))
    p.add_argument("--embeddings", default="",
                   help="per-speaker TSV for frozen mode")
    p.add_argument("--pretrained", default="",
                   help="pretrain checkpoint dir to warm-start the encoder")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(run=_cmd_train)

    p = sub.add_parser("eval", help="score a split with a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test_seen")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", action="store_true",
                   help="re-sweep the threshold instead of using the "
                   "stored one")
    p.add_argument("--grid-step", type=float, default=0.01)
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser("adapt", help="fit the embedding adapter against a "
                       "trained speaker table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--embeddings", required=True,
                   help="per-speaker source TSV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--hidden", type=int, default=1024)
    p.set_defaults(run=_cmd_adapt)

    p = sub.add_parser("fewshot", help="few-shot unseen-speaker attachment "
                       "over a grid of sample sizes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True,
                   help="per-utterance pool TSV (see prepare "
                   "--utt-embeddings)")
    p.add_argument("--mode", required=True, choices=("frozen", "trainable"))
    p.add_argument("--adapter", default="",
                   help="adapter dir, required in trainable mode")
    p.add_argument("--sizes", default="1,5,10,20,30,40,50")
    p.add_argument("--seeds", type=int, default=3,
                   help="number of sampling repetitions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_fewshot)

    p = sub.add_parser("predict", help="mark phrase breaks in plain text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True, help="UTF-8 text, one "
                   "utterance per line")
    p.add_argument("--speaker", type=int, default=None)
    p.add_argument("--out", default="",
                   help="optional output dir for predictions.jsonl")
    p.set_defaults(run=_cmd_predict)

    p = sub.add_parser("stats", help="per-speaker pause statistics and "
                       "split comparisons")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default="",
                   help="comma-separated split names (default: all present)")
    p.add_argument("--embeddings", default="",
                   help="per-speaker TSV to cluster")
    p.add_argument("--clusters", type=int, default=2)
    p.add_argument("--annotations", default="",
                   help="CSV speaker_id,prompt1|prompt2|...")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=_cmd_stats)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else 0
    if args.cmd is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        args.run(args, argv)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
