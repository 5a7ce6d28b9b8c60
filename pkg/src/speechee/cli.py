"""Command-line entry point: ``speechee <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .schema import EventSchema

log = logging.getLogger("speechee")


def _corpus(path):
    from .corpus import load_corpus

    return load_corpus(path)


def _schema(path, corpus_dir=None) -> EventSchema:
    from .corpus import default_schema

    if path:
        return EventSchema.load(path)
    if corpus_dir is not None:
        cand = Path(corpus_dir)
        cand = (cand if cand.is_dir() else cand.parent) / "schema.json"
        if cand.exists():
            return EventSchema.load(cand)
    return default_schema()


def _read_transcripts(path) -> dict[str, tuple[str, ...]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                words = obj["transcript"]
                out[str(obj["id"])] = tuple(words.split() if isinstance(words, str) else words)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed transcript on line {lineno}: {exc}") from exc
    return out


def _overrides(extra: list[str]) -> dict[str, str]:
    """Turn leftover ``--key value`` / ``--key=value`` pairs into config overrides."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise SystemExit(f"unexpected argument {tok!r}")
        if "=" in tok:
            k, v = tok[2:].split("=", 1)
            i += 1
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            k, v = tok[2:], extra[i + 1]
            i += 2
        else:
            k, v = tok[2:], "true"
            i += 1
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synthesize(args, extra):
    from .corpus import build_corpus, save_corpus

    schema = _schema(args.schema)
    sizes = [int(x) for x in args.sizes.split(",")]
    corpus = build_corpus(schema, sizes=sizes, homophone_rate=args.homophone_rate, seed=args.seed)
    path = save_corpus(corpus, args.out)
    schema.save(Path(args.out) / "schema.json")
    print(f"wrote {len(corpus)} clips to {path}")


def cmd_dict_build(args, extra):
    from .decoder import build_entity_dictionary

    corpus = _corpus(args.corpus)
    d = build_entity_dictionary(ex.gold for ex in corpus if ex.split == "train")
    d.save(args.out)
    print(f"wrote {len(d) - 1} entries to {args.out}")


def cmd_train(args, extra):
    from .decoder import EntityDictionary
    from .harness.config import TOY, load_config
    from .harness.pipeline import source_vocab
    from .harness.train import train

    overrides = _overrides(extra)
    for flag in ("no_cl", "no_su", "no_ed"):
        if getattr(args, flag):
            overrides[flag] = "true"
    cfg = load_config(args.config, overrides, base=TOY if args.toy else None)
    corpus = _corpus(args.corpus)
    schema = _schema(args.schema, args.corpus)
    dictionary = EntityDictionary.load(args.dict) if args.dict else None
    transcripts = _read_transcripts(args.transcripts) if args.transcripts else None
    kwargs = {}
    if args.source == "text":
        kwargs = {"source": "text", "source_vocab": source_vocab(), "transcripts": transcripts}
    ckpt = train(corpus, schema, cfg, dictionary=dictionary, progress=True, **kwargs)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out)
    print(json.dumps({"best_epoch": ckpt.best_epoch, "best_dev_avg": round(ckpt.best_dev, 4)}))


def cmd_eval(args, extra):
    from .harness.train import Checkpoint, evaluate_items, items_for
    from .metrics import report_to_json
    from .schema import write_jsonl

    ckpt = Checkpoint.load(args.ckpt)
    corpus = _corpus(args.corpus)
    examples = [ex for ex in corpus if ex.split == args.split]
    if not examples:
        raise SystemExit(f"split {args.split!r} is empty")
    transcripts = _read_transcripts(args.transcripts) if args.transcripts else None
    report, preds = evaluate_items(ckpt.model, items_for(ckpt.model, examples, transcripts), not args.unconstrained)
    if args.pred:
        write_jsonl(args.pred, {k: v[1] for k, v in preds.items()})
    _emit(report_to_json(report), args.out)


def cmd_score(args, extra):
    from .metrics import report_to_json, score
    from .schema import read_jsonl

    preds, golds = read_jsonl(args.pred), read_jsonl(args.gold)
    single = None
    if args.schema:
        single = len(EventSchema.load(args.schema).event_types) == 1
    _emit(report_to_json(score(preds, golds, single_type=single)), args.out)


def cmd_pipeline(args, extra):
    from .harness.pipeline import pipeline_run
    from .metrics import report_to_json

    corpus = _corpus(args.corpus)
    report = pipeline_run(corpus, args.text_model, args.error_rate, seed=args.seed, split=args.split)
    _emit(report_to_json(report), args.out)


def cmd_report_plot(args, extra):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .harness.train import Checkpoint

    history = [e for e in Checkpoint.load(args.ckpt).log if e.get("epoch", 0) > 0]
    if not history:
        raise SystemExit("checkpoint has no training log")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    epochs = [e["epoch"] for e in history]
    written = []
    for name, prefix in (("loss", "loss_"), ("dev_f1", "dev_")):
        keys = sorted({k for e in history for k in e if k.startswith(prefix)})
        if not keys:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for k in keys:
            ax.plot(epochs, [e.get(k, float("nan")) for e in history], label=k[len(prefix):])
        ax.set_xlabel("epoch")
        ax.set_ylabel(name.replace("_", " "))
        ax.legend()
        fig.tight_layout()
        path = out / f"{name}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(str(path))
    print("\n".join(written))


def _emit(text: bytes, out) -> None:
    if out:
        Path(out).write_bytes(text + b"\n")
    sys.stdout.write(text.decode("ascii") + "\n")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechee", description="Speech-to-event-record extraction toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="generate a synthetic corpus")
    s.add_argument("--schema", help="schema JSON (default: built-in toy schema)")
    s.add_argument("--out", required=True)
    s.add_argument("--sizes", default="800,100,100")
    s.add_argument("--homophone-rate", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synthesize)

    s = sub.add_parser("dict-build", help="build the entity dictionary from the train split")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dict_build)

    s = sub.add_parser("train", help="train a model; extra --key value pairs override the config")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--config", help="flat key = value config file")
    s.add_argument("--toy", action="store_true", help="start from the desk-scale preset")
    s.add_argument("--schema")
    s.add_argument("--dict", help="entity dictionary file (default: built from train)")
    s.add_argument("--source", choices=("speech", "text"), default="speech")
    s.add_argument("--transcripts", help="JSONL of {id, transcript} for the text source")
    s.add_argument("--no-cl", dest="no_cl", action="store_true")
    s.add_argument("--no-su", "--no-shrink", dest="no_su", action="store_true")
    s.add_argument("--no-ed", dest="no_ed", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="decode a split and score it")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--unconstrained", action="store_true")
    s.add_argument("--transcripts", help="JSONL of {id, transcript} fed to a text-source model")
    s.add_argument("--pred", help="write predictions as JSONL")
    s.add_argument("--out", help="write the report JSON here")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("score", help="score prediction JSONL against gold JSONL")
    s.add_argument("--pred", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--schema", help="schema JSON; a single-type schema drops TC from Avg")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("pipeline", help="simulated ASR followed by a text-source model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--text-model", required=True)
    s.add_argument("--error-rate", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="test")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("report-plot", help="plot training curves stored in a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help="output directory for PNG files")
    s.set_defaults(fn=cmd_report_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command != "train":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args, extra)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
