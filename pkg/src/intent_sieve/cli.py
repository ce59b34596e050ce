import argparse
import asyncio
import functools
import io
import json
import logging
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from fnmatch import fnmatch
from importlib import metadata
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .cascade import (
    BatchResult,
    Cascade,
    FallbackPolicy,
    Utterance,
    route_batch,
    route_batch_parallel,
    utterances,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .color import AnsiCodes, colored, colored_score
from .corpus import (
    SplitSpec,
    fleiss_kappa,
    load_ratings,
    load_speech_manifest,
    load_text_corpus,
    load_transcripts,
    majority_vote,
    split,
    without_intonation_dependent,
)
from .dsp import FeatureConfig, featurize_parallel, write_feature
from .errors import IntentSieveError, InvalidConfig, InvalidInput
from .evaluation import (
    ComparisonRow,
    confusion,
    format_comparison,
    metrics,
    timed_inference,
)
from .labels import IntentLabel6, IntentLabel7, label_names, parse_label
from .layers import RngSeed
from .models import BASELINE_KINDS, LabelSpace, ModelConfig, ModelKind, build_model
from .textenc import CharIndex, TextEncoder, load_char_vectors
from .train import TrainConfig, speech_dataset, text_dataset, train_model

logger = logging.getLogger(__name__)

# set correct encoding for piping stdout/stderr
if isinstance(sys.stdout, io.TextIOWrapper):
    sys.stdout.reconfigure(encoding="utf-8")
if isinstance(sys.stderr, io.TextIOWrapper):
    sys.stderr.reconfigure(encoding="utf-8")

COMMANDS = ("featurize", "train", "route", "eval", "compare", "kappa")
STAGES = ("fci", "3a", *(f"baseline:{k.value}" for k in BASELINE_KINDS))
COMPARE_MODELS = ("only-speech", "only-text", "only-text-large", "3a", "cascade", "cascade-large")


@dataclass(frozen=True)
class CliArgs:
    command: str
    inputs: List[Path] = field(default_factory=list)
    seed: Optional[int] = None
    config: Optional[Path] = None
    out: Optional[Path] = None
    verbose: bool = False
    workers: int = 1
    # feature and model overrides
    apply_log: Optional[bool] = None
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    mlp_hidden: Optional[int] = None
    # data and checkpoints
    stage: Optional[str] = None
    corpus: Optional[Path] = None
    manifest: Optional[Path] = None
    vectors: Optional[Path] = None
    fci: Optional[Path] = None
    three_a: Optional[Path] = None
    only_speech: Optional[Path] = None
    only_text: Optional[Path] = None
    only_text_large: Optional[Path] = None
    fci_large: Optional[Path] = None
    # routing
    fallback: Optional[str] = None
    margin: Optional[float] = None
    always_audio: bool = False
    # compare / kappa
    models: List[str] = field(default_factory=list)
    counts: bool = False


def existing_path(value: str) -> Path:
    path = Path(value)
    if not path.exists():
        raise argparse.ArgumentTypeError(f"Path does not exist: {path!s}")
    return path


def parse_args(argv: Optional[Sequence[str]] = None) -> CliArgs:
    def list_choices(it) -> str:
        items = list(map(str, it))
        last = " or ".join(items[-2:])
        return ", ".join((*items[:-2], last))

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed of all randomness.")
    common.add_argument(
        "--config",
        type=existing_path,
        default=None,
        help="JSON file with `features`, `model`, `train` objects, `seed` and `fallback`.",
    )
    common.add_argument("--out", type=Path, default=None, help="Output file or directory.")
    common.add_argument("-v", "--verbose", action="store_true", help="Log progress details.")
    common.add_argument(
        "--workers", type=int, default=1, help="Worker threads for featurize, route and compare."
    )
    common.add_argument("-h", "--help", action="help", help="Show this message and exit.")

    parser = argparse.ArgumentParser(
        "intent-sieve",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        description="Identify speech intentions with a text sieve and audio-aided disambiguation.",
        add_help=False,
    )
    parser.add_argument(
        "-V",
        "--version",
        action="version",
        version=metadata.version("intent-sieve"),
        help="Show the version and exit.",
    )
    parser.add_argument("-h", "--help", action="help", help="Show this message and exit.")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add_command(name: str, description: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(
            name,
            parents=[common],
            help=description,
            description=description,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
            add_help=False,
        )

    featurize = add_command("featurize", "Extract acoustic feature files from WAV files.")
    featurize.add_argument("inputs", nargs="+", type=existing_path, help="16-bit PCM WAV files.")
    featurize.add_argument(
        "--apply-log",
        action="store_true",
        default=None,
        help="Log-compress the mel magnitudes.",
    )

    train = add_command("train", "Train a model and write its checkpoint.")
    train.add_argument(
        "stage",
        choices=STAGES,
        metavar="stage",
        help=f"Model to train: {list_choices(STAGES)}.",
    )
    train.add_argument(
        "--corpus",
        type=existing_path,
        help="Text corpus (label<TAB>text); six-way text stages skip its IU rows.",
    )
    train.add_argument("--manifest", type=existing_path, help="Speech manifest (JSON lines).")
    train.add_argument("--vectors", type=existing_path, help="Pretrained character vectors.")
    train.add_argument("--epochs", type=int, help="Training epochs.")
    train.add_argument("--batch-size", type=int, help="Mini-batch size.")
    train.add_argument("--mlp-hidden", type=int, choices=(64, 128), help="MLP hidden nodes.")
    train.add_argument("--apply-log", action="store_true", default=None)

    route = add_command("route", "Route utterances through the sieve and the audio stage.")
    route.add_argument("manifest", type=existing_path, help="JSON lines with text and audio.")
    route.add_argument("--fci", type=existing_path, required=True, help="Sieve checkpoint.")
    route.add_argument(
        "--three-a", type=existing_path, required=True, help="Disambiguator checkpoint."
    )
    route.add_argument("--vectors", type=existing_path, help="Override the vectors file.")
    route.add_argument(
        "--fallback",
        choices=[p.value for p in FallbackPolicy],
        help="Handling of intonation-dependent utterances without audio.",
    )
    route.add_argument(
        "--margin", type=float, help="Also send low-margin sieve decisions to audio."
    )
    route.add_argument(
        "--always-audio", action="store_true", help="Skip the sieve, run the disambiguator."
    )

    evaluate = add_command("eval", "Score predictions against gold labels.")
    evaluate.add_argument("inputs", nargs=1, type=existing_path, help="Predictions (JSON lines).")
    gold = evaluate.add_mutually_exclusive_group(required=True)
    gold.add_argument("--manifest", type=existing_path, help="Six-way gold labels.")
    gold.add_argument("--corpus", type=existing_path, help="Seven-way gold labels.")

    compare = add_command("compare", "Compare accuracy, F1 and time of the model family.")
    compare.add_argument(
        "models",
        nargs="*",
        help=(
            "Include only models matching any of the given patterns "
            f"({list_choices(COMPARE_MODELS)}).\n"
            "Wildcards (*, ?) are allowed.\n"
            "Patterns can be inverted with a prepended !, e.g. !only-*."
        ),
    )
    compare.add_argument("--manifest", type=existing_path, required=True, help="Gold manifest.")
    compare.add_argument("--fci", type=existing_path, required=True, help="Sieve checkpoint.")
    compare.add_argument(
        "--three-a", type=existing_path, required=True, help="Disambiguator checkpoint."
    )
    compare.add_argument("--only-speech", type=existing_path, help="Only-speech checkpoint.")
    compare.add_argument("--only-text", type=existing_path, help="Six-way only-text checkpoint.")
    compare.add_argument(
        "--only-text-large",
        type=existing_path,
        help="Six-way only-text checkpoint trained on a larger text corpus.",
    )
    compare.add_argument(
        "--fci-large", type=existing_path, help="Sieve trained on a larger text corpus."
    )
    compare.add_argument("--vectors", type=existing_path, help="Override the vectors file.")

    kappa = add_command("kappa", "Fleiss' kappa of annotations.")
    kappa.add_argument("inputs", nargs=1, type=existing_path, help="Ratings file.")
    kappa.add_argument(
        "--counts", action="store_true", help="Rows are category counts, not annotator labels."
    )

    args = parser.parse_args(argv)
    values = {f.name: getattr(args, f.name) for f in fields(CliArgs) if hasattr(args, f.name)}
    return CliArgs(**{k: v for k, v in values.items() if v is not None})


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = FeatureConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    seed: int = 0
    fallback: FallbackPolicy = FallbackPolicy.ERROR


_SECTIONS = {"features": FeatureConfig, "model": ModelConfig, "train": TrainConfig}


def _section(cls, data: Dict[str, Any], overrides: Dict[str, Any]):
    if not isinstance(data, dict):
        raise InvalidConfig(f"Config section for {cls.__name__} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InvalidConfig(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
    values = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**values)
    except TypeError as e:
        raise InvalidConfig(f"Invalid {cls.__name__}: {e}") from None


def load_config(path: Path) -> Dict[str, Any]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidConfig(f"Invalid config file {path!s}: {e}") from None
    if not isinstance(data, dict):
        raise InvalidConfig(f"Config file {path!s} must hold a JSON object")
    unknown = set(data) - {*_SECTIONS, "seed", "fallback"}
    if unknown:
        raise InvalidConfig(f"Unknown config keys: {sorted(unknown)}")
    return data


def resolve_config(args: CliArgs) -> RunConfig:
    """Merge flags over the config file over the defaults."""
    data = load_config(args.config) if args.config else {}
    fallback = args.fallback or data.get("fallback", FallbackPolicy.ERROR.value)
    try:
        policy = FallbackPolicy(fallback)
    except ValueError:
        raise InvalidConfig(f"Unknown fallback policy '{fallback}'") from None
    return RunConfig(
        features=_section(FeatureConfig, data.get("features", {}), {"apply_log": args.apply_log}),
        model=_section(ModelConfig, data.get("model", {}), {"mlp_hidden": args.mlp_hidden}),
        train=_section(
            TrainConfig,
            data.get("train", {}),
            {"epochs": args.epochs, "batch_size": args.batch_size},
        ),
        seed=args.seed if args.seed is not None else int(data.get("seed", 0)),
        fallback=policy,
    )


@dataclass(frozen=True)
class Progressbar:
    desc: str = ""
    size: int = 20
    keep: bool = False
    file: TextIO = field(default_factory=lambda: sys.stderr)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    def update(self, done: int, total: int):
        assert 0 <= done <= total
        nbar = int(self.size * done / total) if total > 0 else 0
        perc = int(100 * done / total) if total > 0 else 0
        desc_spacing = " " if self.desc else ""
        self.file.write(
            f"{self.desc + desc_spacing}"
            f"[{'=' * nbar}{'-' * (self.size - nbar)}] "
            f"{done}/{total} {perc}%\r"
        )
        self.file.flush()

    def close(self):
        self.file.write("\n" if self.keep else "\r")
        self.file.flush()


def print_error(message: str):
    print(colored(message, AnsiCodes.FG_RED), file=sys.stderr)


def write_json(path: Path, data: Any):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def matches_any(value: str, *patterns: str) -> bool:
    """True if any pattern matches; `*`, `?` wildcards, `!` inverts a pattern."""
    if not patterns:
        return True

    def is_match(pattern: str) -> bool:
        should_match = not pattern.startswith("!")
        return fnmatch(value, pattern.lstrip("!")) == should_match

    return any(is_match(pattern) for pattern in patterns)


# ---------------------------------------------------------------------------------------------
# text encoders stored with checkpoints


def encoder_metadata(encoder: TextEncoder, vectors: Optional[Path]) -> Dict[str, Any]:
    return {
        "max_chars": encoder.max_chars,
        "char_index": list(encoder.index.tokens) if encoder.index is not None else None,
        "vectors": None if encoder.index is not None or vectors is None else str(vectors),
    }


def encoder_from_metadata(
    meta: Optional[Dict[str, Any]], vectors: Optional[Path] = None
) -> Optional[TextEncoder]:
    if not meta:
        return None
    if meta.get("char_index") is not None:
        return TextEncoder(
            max_chars=meta["max_chars"], index=CharIndex(tokens=tuple(meta["char_index"]))
        )
    path = vectors or (Path(meta["vectors"]) if meta.get("vectors") else None)
    if path is None:
        raise InvalidInput("Checkpoint uses pretrained vectors, pass them with --vectors")
    return TextEncoder(max_chars=meta["max_chars"], vocab=load_char_vectors(path))


@dataclass(frozen=True)
class Stage:
    checkpoint: Checkpoint
    encoder: Optional[TextEncoder]
    features: Optional[FeatureConfig]


def load_stage(path: Path, vectors: Optional[Path] = None) -> Stage:
    checkpoint = load_checkpoint(path)
    meta = checkpoint.metadata
    features = FeatureConfig(**meta["features"]) if meta.get("features") else None
    return Stage(checkpoint, encoder_from_metadata(meta.get("text"), vectors), features)


def build_cascade(
    fci: Stage,
    second: Stage,
    cfg: RunConfig,
    margin: Optional[float] = None,
) -> Cascade:
    if fci.encoder is None:
        raise InvalidInput("Sieve checkpoint has no text encoder")
    return Cascade(
        fci=fci.checkpoint.model,
        three_a=second.checkpoint.model,
        fci_encoder=fci.encoder,
        three_a_encoder=second.encoder,
        feature_config=second.features or cfg.features,
        policy=cfg.fallback,
        margin=margin,
    )


# ---------------------------------------------------------------------------------------------
# commands


async def cmd_featurize(args: CliArgs, cfg: RunConfig) -> int:
    paths = args.inputs
    stems = Counter(path.stem for path in paths)
    clashes = sorted(stem for stem, n in stems.items() if n > 1)
    if clashes:
        raise InvalidInput(f"Inputs share a file name: {', '.join(clashes)}")
    out = args.out or Path("features")
    out.mkdir(parents=True, exist_ok=True)
    failed: List[Tuple[Path, InvalidInput]] = []
    done = 0
    with ThreadPoolExecutor(max_workers=args.workers) as executor, Progressbar(
        desc="Featurizing", keep=True
    ) as pbar:
        pbar.update(done, len(paths))
        async for i, outcome in featurize_parallel(paths, cfg.features, executor=executor):
            if isinstance(outcome, InvalidInput):
                failed.append((paths[i], outcome))
            else:
                write_feature(out / f"{paths[i].stem}.isf", outcome.matrix)
            done += 1
            pbar.update(done, len(paths))

    print(f"Featurized {len(paths) - len(failed)}/{len(paths)} files into {out.as_posix()}")
    for path, error in sorted(failed, key=lambda f: str(f[0])):
        print_error(f"{path.as_posix()}: {error}")
    return 1 if failed else 0


def _stage_kind(stage: str) -> ModelKind:
    return ModelKind(stage.split(":", 1)[-1])


def _text_encoder(
    texts: Sequence[str], model_cfg: ModelConfig, vectors: Optional[Path]
) -> Tuple[TextEncoder, ModelConfig]:
    if vectors is not None:
        vocab = load_char_vectors(vectors)
        if len(vocab):
            encoder = TextEncoder(max_chars=model_cfg.text_len, vocab=vocab)
            return encoder, replace(model_cfg, text_dim=vocab.dim, vocab_size=0)
        logger.warning("%s holds no vectors, training a character embedding instead", vectors)
    index = CharIndex.build(texts)
    encoder = TextEncoder(max_chars=model_cfg.text_len, index=index)
    return encoder, replace(model_cfg, vocab_size=len(index))


async def cmd_train(args: CliArgs, cfg: RunConfig) -> int:
    assert args.stage is not None
    kind = _stage_kind(args.stage)
    seed = RngSeed(cfg.seed)
    spec = SplitSpec(train_ratio=cfg.train.train_ratio, seed=seed)
    model_cfg = cfg.model
    encoder: Optional[TextEncoder] = None

    if kind.label_space is LabelSpace.SEVEN:
        if args.corpus is None:
            raise InvalidInput(f"Training '{kind}' needs a text corpus (--corpus)")
        train_ex, val_ex = split(load_text_corpus(args.corpus), spec)
        encoder, model_cfg = _text_encoder([e.text for e in train_ex], model_cfg, args.vectors)
        train_set, val_set = text_dataset(train_ex, encoder), text_dataset(val_ex, encoder)
    elif not kind.uses_audio and args.corpus is not None:
        # six-way text baselines can learn from a text corpus without its IU rows
        examples = without_intonation_dependent(load_text_corpus(args.corpus))
        train_ex, val_ex = split(examples, spec)
        encoder, model_cfg = _text_encoder([e.text for e in train_ex], model_cfg, args.vectors)
        train_set = text_dataset(train_ex, encoder, six_way=True)
        val_set = text_dataset(val_ex, encoder, six_way=True)
    else:
        if args.manifest is None:
            raise InvalidInput(f"Training '{kind}' needs a speech manifest (--manifest)")
        speech_train, speech_val = split(
            load_speech_manifest(args.manifest), spec, key=lambda e: int(e.target6)
        )
        if kind.uses_text:
            texts = [e.text for e in speech_train]
            encoder, model_cfg = _text_encoder(texts, model_cfg, args.vectors)
        features = cfg.features if kind.uses_audio else None
        if features is not None:
            frames, bins = features.feature_shape
            model_cfg = replace(model_cfg, audio_frames=frames, audio_bins=bins)
        train_set = speech_dataset(speech_train, encoder, features)
        val_set = speech_dataset(speech_val, encoder, features)

    model = build_model(kind, model_cfg, seed)
    for line in model.describe():
        logger.info(line)
    with Progressbar(desc=f"Training {kind}", keep=True) as pbar:
        result = train_model(model, train_set, val_set, cfg.train, seed, pbar.update)

    out = args.out or Path(f"{kind}.isv")
    out.parent.mkdir(parents=True, exist_ok=True)
    history = [asdict(log) for log in result.history]
    save_checkpoint(
        out,
        model,
        {
            "text": encoder_metadata(encoder, args.vectors) if encoder is not None else None,
            "features": asdict(cfg.features) if kind.uses_audio else None,
            "seed": cfg.seed,
            "history": history,
        },
    )
    log_path = out.with_suffix(".log.jsonl")
    log_path.write_text("".join(json.dumps(h) + "\n" for h in history), encoding="utf-8")

    last = result.history[-1]
    summary = (
        f"Trained {kind} for {last.epoch} epochs: "
        f"train accuracy {colored_score(last.train_accuracy)}"
    )
    if last.val_accuracy is not None and last.val_macro_f1 is not None:
        summary += (
            f", validation accuracy {colored_score(last.val_accuracy)}"
            f", F1 {colored_score(last.val_macro_f1)}"
        )
    print(summary)
    print("Checkpoint written to", colored(out.as_posix(), AnsiCodes.BOLD))
    return 0


async def _route(
    cascade: Cascade, items: Sequence[Utterance], args: CliArgs, *, always_audio: bool
) -> BatchResult:
    with Progressbar(desc="Routing", keep=True) as pbar:
        if args.workers > 1:
            return await route_batch_parallel(
                cascade,
                items,
                always_audio=always_audio,
                max_workers=args.workers,
                progress_callback=pbar.update,
            )
        return route_batch(
            cascade, items, always_audio=always_audio, progress_callback=pbar.update
        )


async def cmd_route(args: CliArgs, cfg: RunConfig) -> int:
    assert args.manifest is not None and args.fci is not None and args.three_a is not None
    cascade = build_cascade(
        load_stage(args.fci, args.vectors), load_stage(args.three_a, args.vectors), cfg, args.margin
    )
    items = [Utterance(text, audio) for text, audio in load_transcripts(args.manifest)]
    result = await _route(cascade, items, args, always_audio=args.always_audio)

    out = args.out or Path("predictions.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    errors = dict(result.errors)
    with open(out, mode="w", encoding="utf-8", newline="\n") as file:
        for i, prediction in enumerate(result.predictions):
            row = prediction.to_dict() if prediction is not None else {"error": str(errors[i])}
            file.write(json.dumps(row) + "\n")
    report = result.report.to_dict()
    write_json(out.with_suffix(".cost.json"), report)
    print(json.dumps(report))
    for i, error in result.errors:
        print_error(f"Line {i + 1}: {error}")
    return 1 if result.errors else 0


def load_predictions(path: Path, enum) -> List[int]:
    labels = []
    with open(path, mode="r", encoding="utf-8") as file:
        for lineno, line in enumerate(file, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInput(f"{path.as_posix()}:{lineno}: invalid JSON: {e.msg}") from None
            if not isinstance(row, dict):
                raise InvalidInput(f"{path.as_posix()}:{lineno}: expected a JSON object")
            if "label" not in row:
                raise InvalidInput(f"{path.as_posix()}:{lineno}: no label ({row.get('error')})")
            labels.append(int(parse_label(row["label"], enum)))
    return labels


async def cmd_eval(args: CliArgs, cfg: RunConfig) -> int:
    if args.manifest is not None:
        enum: Any = IntentLabel6
        gold = [int(e.target6) for e in load_speech_manifest(args.manifest)]
    else:
        assert args.corpus is not None
        enum = IntentLabel7
        gold = [int(e.label) for e in load_text_corpus(args.corpus)]
    preds = load_predictions(args.inputs[0], enum)
    cm = confusion(preds, gold, len(enum), label_names(enum))
    report = metrics(cm)
    print(cm.format_table())
    print()
    print(report.format_table())
    print(f"Accuracy {colored_score(report.accuracy)}, macro F1 {colored_score(report.macro_f1)}")
    if args.out:
        write_json(args.out, {"confusion": cm.to_dict(), "metrics": report.to_dict()})
    return 0


class _LabelRunner:
    """Batch runner for `timed_inference`, counting audio-aided routes per call."""

    def __init__(self, cascade: Cascade, *, always_audio: bool):
        self.cascade = cascade
        self.always_audio = always_audio
        self.audio_per_call: List[int] = []

    def __call__(self, items: Sequence[Utterance]) -> List[int]:
        result = route_batch(self.cascade, items, always_audio=self.always_audio)
        if result.errors:
            index, error = result.errors[0]
            raise InvalidInput(f"Utterance {index + 1} failed: {error}")
        self.audio_per_call.append(result.report.n_audio_aided)
        return [int(p.label) for p in result.predictions if p is not None]


def _single_stage_cascade(
    fci: Stage, path: Path, vectors: Optional[Path], cfg: RunConfig
) -> Cascade:
    # always routed multimodally, the sieve never runs
    return build_cascade(fci, load_stage(path, vectors), cfg)


async def cmd_compare(args: CliArgs, cfg: RunConfig) -> int:
    assert args.manifest is not None and args.fci is not None and args.three_a is not None
    examples = load_speech_manifest(args.manifest)
    items = utterances(examples)
    gold = [int(e.target6) for e in examples]

    fci = load_stage(args.fci, args.vectors)
    three_a = load_stage(args.three_a, args.vectors)
    candidates: List[Tuple[str, Callable[[], Cascade], bool]] = []
    single_stage = {
        "only-speech": args.only_speech,
        "only-text": args.only_text,
        "only-text-large": args.only_text_large,
    }
    for name, path in single_stage.items():
        if path is not None:
            make = functools.partial(_single_stage_cascade, fci, path, args.vectors, cfg)
            candidates.append((name, make, True))
    candidates.append(("3a", lambda: build_cascade(fci, three_a, cfg), True))
    candidates.append(("cascade", lambda: build_cascade(fci, three_a, cfg), False))
    if args.fci_large:
        path_large = args.fci_large
        candidates.append(
            (
                "cascade-large",
                lambda: build_cascade(load_stage(path_large, args.vectors), three_a, cfg),
                False,
            )
        )

    rows = []
    names = label_names(IntentLabel6)
    for name, make_cascade, always_audio in candidates:
        if not matches_any(name, *args.models):
            continue
        runner = _LabelRunner(make_cascade(), always_audio=always_audio)
        run = timed_inference(
            runner, items, gold, n_classes=len(names), label_names=names, workers=args.workers
        )
        assert run.report is not None
        # the first call is the warm-up
        n_audio = sum(runner.audio_per_call[1:])
        rows.append(
            ComparisonRow(
                name=name,
                accuracy=run.report.accuracy,
                macro_f1=run.report.macro_f1,
                wall_ns=run.wall_ns,
                n_audio=n_audio,
            )
        )
        logger.info("%s: %s", name, run.report.format_table())

    if not rows:
        print("No models selected")
        return 0
    print(format_comparison(rows))
    if args.out:
        write_json(args.out, [row.to_dict() for row in rows])
    return 0


async def cmd_kappa(args: CliArgs, cfg: RunConfig) -> int:
    counts = load_ratings(args.inputs[0], counts=args.counts)
    kappa = fleiss_kappa(counts)
    n_items, n_categories = counts.shape
    n_annotators = int(counts[0].sum())
    unresolved = sum(
        majority_vote(np.repeat(np.arange(n_categories), row).tolist()) is None for row in counts
    )
    print(
        f"Fleiss' kappa {colored_score(kappa)} "
        f"({n_items} items, {n_annotators} annotators, {unresolved} unresolved majority votes)"
    )
    if args.out:
        write_json(
            args.out,
            {
                "kappa": kappa,
                "n_items": n_items,
                "n_annotators": n_annotators,
                "unresolved": unresolved,
            },
        )
    return 0


COMMAND_FUNCTIONS: Dict[str, Callable[[CliArgs, RunConfig], Awaitable[int]]] = {
    "featurize": cmd_featurize,
    "train": cmd_train,
    "route": cmd_route,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "kappa": cmd_kappa,
}


def main_wrapper(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            return asyncio.run(func(*args, **kwargs))
        except KeyboardInterrupt:
            return 130

    return wrapper


@main_wrapper
async def main(argv: Optional[Sequence[str]] = None) -> int:
    if argv is None:
        argv = sys.argv[1:]

    args = parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return await COMMAND_FUNCTIONS[args.command](args, cfg)
    except IntentSieveError as e:
        print_error(f"Error: {e}")
        return 1
