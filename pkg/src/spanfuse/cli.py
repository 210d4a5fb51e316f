"""Operator entry point: one binary, one subcommand per workflow stage.

Stages communicate through plain files under the run's output directory, so
any stage can be rerun in isolation or swapped for external tooling:

    extract      -> extractions.json
    merge-labels -> mapping.json
    fuse         -> fusion.jsonl
    synthesize   -> syntheses.json
    annotate     -> synthetic.jsonl
    train        -> model-<confighash>-ep<N>.ckpt, trace.json
    evaluate     -> report.json
    sample       -> kshot-k<k>.jsonl or subset-<n>.jsonl
    make-toy     -> bundled dataset (train/test JSONL plus replay fixtures)

Every command validates the full run configuration before doing anything and
writes the resolved copy to runconfig.json next to its outputs. All output
files are written deterministically, so rerunning a stage with unchanged
inputs overwrites byte-identically.

Exit codes: 0 success, 2 configuration problem, 3 missing or unreadable
file, 4 stage execution failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import CheckpointError
from .corpus import (
    TOKENIZER_MODES,
    AnnotatedSample,
    CorpusError,
    LabelVocabulary,
    load_jsonl,
    save_jsonl,
)
from .encoder import EncoderConfig, build_vocab
from .label_merge import EntityTypePair, HashEmbedder, MergeError, MergePolicy
from .span_model import HeadConfig, SpanModel
from .toy import write_toy_dataset
from .train_eval import (
    TrainConfig,
    TrainingError,
    evaluate,
    sample_kshot,
    sample_nested_subsets,
    train,
)
from .workflow import (
    API_KEY_ENV,
    TEMPLATES,
    ExtractionResult,
    FixtureStore,
    HttpTransport,
    LlmClient,
    PipelineStats,
    SynthesisResult,
    WorkflowError,
    annotate_synthetic,
    build_fusion_set,
    run_extraction,
    run_label_merge,
    run_pos,
    synthesize_explanations,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PIPELINE = 4


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass(frozen=True)
class LlmSettings:
    """Client wiring: replay reads fixtures, live posts to an endpoint."""

    mode: str = "replay"
    fixture_dir: str | None = None
    endpoint: str | None = None
    model: str | None = None
    max_concurrency: int = 4
    retry_budget: int = 3
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("live", "replay"):
            raise ConfigError(f"llm.mode must be 'live' or 'replay', got {self.mode!r}")
        if self.max_concurrency < 1:
            raise ConfigError("llm.max_concurrency must be at least 1")
        if self.retry_budget < 0:
            raise ConfigError("llm.retry_budget must be non-negative")


def _build(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{name} section must be an object")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; validated up front, serialized next to outputs."""

    out_dir: str
    train_path: str | None = None
    test_path: str | None = None
    synthetic_path: str | None = None
    checkpoint_path: str | None = None
    tokenizer: str = "char"
    seed: int = 0
    threshold: float = 0.5
    target_labels: tuple[str, ...] | None = None
    extension_labels: tuple[str, ...] | None = None
    llm: LlmSettings = field(default_factory=LlmSettings)
    merge: MergePolicy = field(default_factory=MergePolicy)
    embed_dim: int = 32
    encoder: dict = field(default_factory=dict)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if not self.out_dir:
            raise ConfigError("out_dir must be set")
        if self.tokenizer not in TOKENIZER_MODES:
            raise ConfigError(f"tokenizer must be one of {TOKENIZER_MODES}, got {self.tokenizer!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        # Surface encoder typos now rather than at train time. vocab_size is
        # resolved from the training data, so validate with a placeholder.
        if "vocab_size" in self.encoder:
            raise ConfigError("encoder.vocab_size is resolved from the training data; remove it")
        _build("encoder", EncoderConfig, {"vocab_size": 2, **self.encoder})

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(data)
        if "llm" in kwargs:
            kwargs["llm"] = _build("llm", LlmSettings, kwargs["llm"])
        if "merge" in kwargs:
            try:
                kwargs["merge"] = _build("merge", MergePolicy, kwargs["merge"])
            except MergeError as exc:
                raise ConfigError(f"merge: {exc}") from exc
        if "head" in kwargs:
            kwargs["head"] = _build("head", HeadConfig, kwargs["head"])
        if "train" in kwargs:
            train_data = kwargs["train"]
            if not isinstance(train_data, dict):
                raise ConfigError("train section must be an object")
            try:
                kwargs["train"] = TrainConfig.from_dict(train_data)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"train: {exc}") from exc
        for key in ("target_labels", "extension_labels"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "train_path": self.train_path,
            "test_path": self.test_path,
            "synthetic_path": self.synthetic_path,
            "checkpoint_path": self.checkpoint_path,
            "tokenizer": self.tokenizer,
            "seed": self.seed,
            "threshold": self.threshold,
            "target_labels": list(self.target_labels) if self.target_labels else None,
            "extension_labels": list(self.extension_labels) if self.extension_labels else None,
            "llm": dataclasses.asdict(self.llm),
            "merge": {"epsilon": self.merge.epsilon, "top_p": self.merge.top_p},
            "embed_dim": self.embed_dim,
            "encoder": dict(self.encoder),
            "head": dataclasses.asdict(self.head),
            "train": self.train.to_dict(),
        }


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_json(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"missing stage artifact: {path} (run the upstream stage first)")
    return json.loads(path.read_text(encoding="utf-8"))


def _out(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "runconfig.json", config.to_dict())
    return out


def _load_corpus(path: str | None, what: str, config: RunConfig) -> list[AnnotatedSample]:
    if not path:
        raise ConfigError(f"{what} is not set")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return load_jsonl(path, tokenizer=config.tokenizer)


def build_client(config: RunConfig) -> LlmClient:
    settings = config.llm
    if settings.mode == "replay":
        if not settings.fixture_dir:
            raise ConfigError("replay mode requires llm.fixture_dir")
        store_dir = Path(settings.fixture_dir)
        if not store_dir.is_dir():
            raise FileNotFoundError(f"fixture directory not found: {store_dir}")
        return LlmClient(
            mode="replay",
            fixtures=FixtureStore(store_dir),
            max_concurrency=settings.max_concurrency,
        )
    if not (settings.endpoint and settings.model):
        raise ConfigError("live mode requires llm.endpoint and llm.model")
    if not os.environ.get(API_KEY_ENV):
        raise ConfigError(f"live mode needs the {API_KEY_ENV} environment variable")
    transport = HttpTransport(
        endpoint=settings.endpoint, model=settings.model, temperature=settings.temperature
    )
    return LlmClient(
        mode="live",
        transport=transport,
        max_concurrency=settings.max_concurrency,
        retry_budget=settings.retry_budget,
    )


def _results_to_json(results) -> list[dict]:
    return [
        {"sample_id": r.sample_id, "kind": r.kind, "items": [list(item) for item in r.items]}
        for r in results
    ]


def _results_from_json(raw, kind: str) -> list[ExtractionResult]:
    return [
        ExtractionResult(
            sample_id=entry["sample_id"],
            kind=kind,
            items=tuple((surface, label) for surface, label in entry["items"]),
        )
        for entry in raw[kind]
    ]


def cmd_extract(config: RunConfig, args) -> int:
    out = _out(config)
    samples = _load_corpus(config.train_path, "train_path", config)
    client = build_client(config)
    stats = PipelineStats()
    ent = run_extraction(samples, TEMPLATES["ent"], client, stats)
    seg = run_extraction(samples, TEMPLATES["seg"], client, stats)
    pos = run_pos(samples, seg, client, TEMPLATES["pos"], stats)
    payload = {
        "ent": _results_to_json(ent),
        "seg": _results_to_json(seg),
        "pos": _results_to_json(pos),
        "stats": stats.to_dict(),
    }
    _write_json(out / "extractions.json", payload)
    for kind, results in (("ent", ent), ("seg", seg), ("pos", pos)):
        print(f"{kind}: {sum(len(r.items) for r in results)} items")
    print(f"samples: {len(samples)}  parse failures: {stats.parse_failures}")
    return EXIT_OK


def cmd_merge_labels(config: RunConfig, args) -> int:
    out = _out(config)
    raw = _read_json(out / "extractions.json")
    pairs = [
        EntityTypePair(surface, label)
        for entry in raw["ent"]
        for surface, label in entry["items"]
    ]
    client = build_client(config)
    stats = PipelineStats()
    embedder = HashEmbedder(dim=config.embed_dim)
    merge = run_label_merge(pairs, client, embedder, policy=config.merge, stats=stats)
    payload = {
        "mapping": merge.mapping,
        "synonym_groups": merge.synonym_groups,
        "stats": stats.to_dict(),
    }
    _write_json(out / "mapping.json", payload)
    raw_labels = sorted({p.raw_label for p in pairs})
    standards = sorted(set(merge.mapping.values()))
    print(f"{len(raw_labels)} raw labels -> {len(standards)} standard labels")
    if stats.unknown_merge_labels:
        print(f"unknown labels in merge response: {stats.unknown_merge_labels}")
    return EXIT_OK


def cmd_fuse(config: RunConfig, args) -> int:
    out = _out(config)
    samples = _load_corpus(config.train_path, "train_path", config)
    raw = _read_json(out / "extractions.json")
    mapping = _read_json(out / "mapping.json")["mapping"]
    stats = PipelineStats()
    fusion = build_fusion_set(
        samples,
        _results_from_json(raw, "ent"),
        _results_from_json(raw, "seg"),
        _results_from_json(raw, "pos"),
        mapping,
        stats,
    )
    save_jsonl(fusion, out / "fusion.jsonl")
    print(f"wrote {len(fusion)} fusion samples  grounding misses: {stats.grounding_misses}")
    return EXIT_OK


def cmd_synthesize(config: RunConfig, args) -> int:
    out = _out(config)
    samples = _load_corpus(config.train_path, "train_path", config)
    client = build_client(config)
    stats = PipelineStats()
    syntheses = synthesize_explanations(samples, client, stats=stats)
    payload = {
        "syntheses": [
            {"sample_id": s.sample_id, "origin": s.origin, "text": s.text} for s in syntheses
        ],
        "stats": stats.to_dict(),
    }
    _write_json(out / "syntheses.json", payload)
    print(f"wrote {len(syntheses)} syntheses  dropped: {stats.dropped_generations}")
    return EXIT_OK


def _load_model(config: RunConfig, args) -> SpanModel:
    path = getattr(args, "checkpoint", None) or config.checkpoint_path
    if not path:
        raise ConfigError("no checkpoint configured: set checkpoint_path or pass --checkpoint")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return SpanModel.load(path)


def cmd_annotate(config: RunConfig, args) -> int:
    out = _out(config)
    model = _load_model(config, args)
    raw = _read_json(out / "syntheses.json")
    syntheses = [
        SynthesisResult(sample_id=e["sample_id"], text=e["text"], origin=e["origin"])
        for e in raw["syntheses"]
    ]
    mapping = _read_json(out / "mapping.json")["mapping"]
    client = build_client(config)
    stats = PipelineStats()
    synthetic = annotate_synthetic(
        syntheses, model, client, mapping, stats=stats, threshold=config.threshold
    )
    save_jsonl(synthetic, out / "synthetic.jsonl")
    print(f"wrote {len(synthetic)} synthetic samples  skipped: {stats.skipped_synthetic}")
    return EXIT_OK


def _resolve_vocab(
    config: RunConfig, fusion: list[AnnotatedSample], synthetic: list[AnnotatedSample]
) -> LabelVocabulary:
    if config.target_labels is not None:
        targets = config.target_labels
    else:
        targets = tuple(sorted({s.label for sample in fusion for s in sample.target_spans}))
    if config.extension_labels is not None:
        extensions = config.extension_labels
    else:
        seen = {
            s.label
            for sample in (*fusion, *synthetic)
            for s in sample.extension_spans
            if s.label not in targets
        }
        extensions = tuple(sorted(seen))
    if not targets:
        raise ConfigError("no target labels: set target_labels or provide annotated data")
    return LabelVocabulary(targets, extensions)


def cmd_train(config: RunConfig, args) -> int:
    import torch

    out = _out(config)
    fusion_path = out / "fusion.jsonl"
    if fusion_path.is_file():
        fusion = load_jsonl(fusion_path, tokenizer=config.tokenizer)
    else:
        fusion = _load_corpus(config.train_path, "train_path", config)
    synthetic_path = out / "synthetic.jsonl"
    if synthetic_path.is_file():
        synthetic = load_jsonl(synthetic_path, tokenizer=config.tokenizer)
    elif config.synthetic_path:
        synthetic = _load_corpus(config.synthetic_path, "synthetic_path", config)
    else:
        synthetic = []
    vocab = _resolve_vocab(config, fusion, synthetic)
    token_vocab = build_vocab(s.sequence.tokens for s in (*fusion, *synthetic))
    torch.manual_seed(config.train.seed)
    encoder_config = _build(
        "encoder",
        EncoderConfig,
        {"vocab_size": len(token_vocab), **config.encoder},
    )
    model = SpanModel(encoder_config, config.head, vocab, token_vocab, tokenizer=config.tokenizer)
    result = train(model, fusion, synthetic, config=config.train, checkpoint_dir=out)
    trace = {
        "loss_trace": result.loss_trace,
        "alpha": list(result.alpha),
        "checkpoint": Path(result.checkpoint_path).name,
    }
    _write_json(out / "trace.json", trace)
    print(
        f"trained {config.train.epochs} epochs  final loss: {result.loss_trace[-1]:.4f}  "
        f"checkpoint: {result.checkpoint_path}"
    )
    return EXIT_OK


def cmd_evaluate(config: RunConfig, args) -> int:
    out = _out(config)
    model = _load_model(config, args)
    samples = _load_corpus(config.test_path, "test_path", config)
    report = evaluate(model, samples, threshold=config.threshold)
    _write_json(out / "report.json", report.to_dict())
    print(
        f"precision: {report.precision:.4f}  recall: {report.recall:.4f}  f1: {report.f1:.4f}  "
        f"(gold {report.gold}, predicted {report.predicted}, matched {report.matched})"
    )
    return EXIT_OK


def cmd_sample(config: RunConfig, args) -> int:
    if (args.k is None) == (args.sizes is None):
        raise ConfigError("pass exactly one of --k or --sizes")
    out = _out(config)
    corpus = _load_corpus(config.train_path, "train_path", config)
    if args.k is not None:
        result = sample_kshot(corpus, args.k, seed=config.seed)
        save_jsonl(result.samples, out / f"kshot-k{args.k}.jsonl")
        print(f"wrote {len(result.samples)} samples for k={args.k}")
        for label in sorted(result.counts):
            print(f"  {label}: {result.counts[label]}")
        if result.unmet:
            print(f"unmet labels: {', '.join(sorted(result.unmet))}")
        return EXIT_OK
    try:
        sizes = tuple(int(part) for part in args.sizes.split(","))
    except ValueError as exc:
        raise ConfigError(f"--sizes must be comma-separated integers: {exc}") from exc
    try:
        subsets = sample_nested_subsets(corpus, sizes, seed=config.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for size, subset in zip(sizes, subsets):
        save_jsonl(subset, out / f"subset-{size}.jsonl")
        print(f"wrote subset-{size}.jsonl ({len(subset)} samples)")
    return EXIT_OK


def cmd_make_toy(config: RunConfig | None, args) -> int:
    out_dir = args.out or (config.out_dir if config else None)
    if not out_dir:
        raise ConfigError("make-toy needs --out (or a config with out_dir)")
    seed = args.seed if args.seed is not None else (config.seed if config else 0)
    corpus = write_toy_dataset(out_dir, n_train=args.n_train, n_test=args.n_test, seed=seed)
    fixtures = len(list((Path(out_dir) / "fixtures").iterdir()))
    print(
        f"wrote {len(corpus.train)} train / {len(corpus.test)} test samples and "
        f"{fixtures} fixtures under {out_dir}"
    )
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract,
    "merge-labels": cmd_merge_labels,
    "fuse": cmd_fuse,
    "synthesize": cmd_synthesize,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sample": cmd_sample,
    "make-toy": cmd_make_toy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spanfuse",
        description="Span-based sequence labeling with LLM knowledge enhancement.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to the run configuration JSON")
    common.add_argument("--mode", choices=["live", "replay"], help="override llm.mode")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("extract", "run ent/seg/pos extraction over the training corpus"),
        ("merge-labels", "standardize extracted labels via clustering plus synonym groups"),
        ("fuse", "attach grounded extension spans to the training corpus"),
        ("synthesize", "generate enriched explanation texts"),
        ("train", "train the span model on fusion plus synthetic data"),
    ):
        sub.add_parser(name, parents=[common], help=help_text)
    annotate = sub.add_parser(
        "annotate", parents=[common], help="label synthesized texts with a frozen model"
    )
    annotate.add_argument("--checkpoint", help="model checkpoint to annotate with")
    ev = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test corpus")
    ev.add_argument("--checkpoint", help="model checkpoint to evaluate")
    sample = sub.add_parser(
        "sample", parents=[common], help="draw k-shot or nested subsets from the training corpus"
    )
    sample.add_argument("--k", type=int, help="k-shot sampling budget per label")
    sample.add_argument("--sizes", help="comma-separated nested subset sizes")
    toy = sub.add_parser("make-toy", parents=[common], help="materialize the bundled toy dataset")
    toy.add_argument("--n-train", type=int, default=30, help="training sentences to generate")
    toy.add_argument("--n-test", type=int, default=10, help="test sentences to generate")
    return parser


def resolve_config(args) -> RunConfig | None:
    """Load the config file and fold in CLI overrides."""
    if not args.config:
        if args.command == "make-toy":
            return None
        raise ConfigError("--config is required")
    config = RunConfig.from_file(args.config)
    updates: dict = {}
    if args.mode:
        updates["llm"] = dataclasses.replace(config.llm, mode=args.mode)
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["train"] = dataclasses.replace(config.train, seed=args.seed)
    if args.out:
        updates["out_dir"] = args.out
    return dataclasses.replace(config, **updates) if updates else config


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (WorkflowError, TrainingError, MergeError, CorpusError, CheckpointError) as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
