"""Command-line entry point: ``jointrank <command> --out DIR [--key value ...]``.

Commands form a batch DAG: gen-data -> warm-start -> augment -> train -> eval,
plus the self-contained ``ablate`` and ``sweep-negatives`` experiments.
Every command writes ``run_manifest.json`` next to its outputs; ``jointrank
replay MANIFEST --out DIR`` re-runs a recorded command from that file alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from . import pipeline
from .augmentation import check_instances, read_instances, write_instances
from .config import ExperimentConfig, config_from_flat, known_keys, parse_config
from .corpus import DATASET_FILES, Dataset, _atomic_write, generate_synthetic, load_dataset, save_dataset
from .errors import JointRankError, UsageError, ValidationError
from .evaluation import pipeline_eval, write_metrics
from .models import CrossEncoderParams, DualEncoderParams, load_checkpoint, save_checkpoint
from .trainer import Models, evaluate_models, init_models, train, warm_start

DATA_ENV = "JOINTRANK_DATA"
MANIFEST = "run_manifest.json"
RETRIEVER_CKPT = "retriever.ckpt"
RERANKER_CKPT = "reranker.ckpt"
INSTANCES = "instances.tsv"

log = logging.getLogger("jointrank")


# --------------------------------------------------------------------------
# manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    options: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    checksums: dict[str, dict[str, str]] = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "options": self.options,
            "outputs": self.outputs,
            "checksums": self.checksums,
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST
        _atomic_write(path, self.to_json())
        return path

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"missing manifest: {p}")
        try:
            body = json.loads(p.read_text(encoding="utf-8"))
            return cls(**body)
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"malformed manifest {p}: {exc}") from None


def _input_files(inputs: dict[str, str]) -> dict[str, str]:
    """Checksums of every input file, keyed by '<input name>/<file name>'."""
    sums = {}
    for name, raw in sorted(inputs.items()):
        p = Path(raw)
        files = sorted(f for f in p.iterdir() if f.is_file() and f.name != MANIFEST) if p.is_dir() else [p]
        for f in files:
            sums[f"{name}/{f.name}"] = sha256_file(f)
    return sums


def finish(command: str, cfg: ExperimentConfig, out_dir: Path, inputs: dict[str, str],
           options: dict[str, str], outputs: Sequence[Path]) -> RunManifest:
    names = sorted(Path(p).name for p in outputs)
    manifest = RunManifest(
        command=command,
        config=cfg.flat(),
        seed=cfg.seed,
        inputs=dict(sorted(inputs.items())),
        options=dict(sorted(options.items())),
        outputs=names,
        checksums={"inputs": _input_files(inputs), "outputs": {n: sha256_file(out_dir / n) for n in names}},
    )
    manifest.write(out_dir)
    return manifest


# --------------------------------------------------------------------------
# artifact loading


def _require_dir(path: Path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory not found: {p}")
    return p


def _data(args) -> tuple[Dataset, Path]:
    raw = args.data or os.environ.get(DATA_ENV)
    if not raw:
        raise UsageError(f"no data directory: pass --data or set {DATA_ENV}")
    d = _require_dir(Path(raw), "data")
    for name in DATASET_FILES.values():
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing dataset file: {d / name}")
    return load_dataset(d), d


def _models(args, data: Dataset) -> tuple[Models, Path]:
    if not args.models:
        raise UsageError("--models is required")
    d = _require_dir(Path(args.models), "models")
    paths = [d / RETRIEVER_CKPT, d / RERANKER_CKPT]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"missing checkpoint: {p}")
    retriever, reranker = (load_checkpoint(p) for p in paths)
    if not isinstance(retriever, DualEncoderParams) or not isinstance(reranker, CrossEncoderParams):
        raise ValidationError(f"checkpoints in {d} have the wrong model kinds")
    for m in (retriever, reranker):
        if m.vocab_size != data.corpus.vocab_size:
            raise ValidationError(f"checkpoint vocab {m.vocab_size} does not match corpus vocab {data.corpus.vocab_size}")
    return Models(retriever, reranker), d


def _save_models(out: Path, models: Models) -> list[Path]:
    paths = [out / RETRIEVER_CKPT, out / RERANKER_CKPT]
    save_checkpoint(paths[0], models.retriever)
    save_checkpoint(paths[1], models.reranker)
    return paths


def _tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    def cell(v: Any) -> str:
        return repr(float(v)) if isinstance(v, float) else str(v)

    lines = ["\t".join(header) + "\n"] + ["\t".join(cell(v) for v in r) + "\n" for r in rows]
    _atomic_write(path, "".join(lines))
    return path


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> tuple[dict, list[Path]]:
    data = generate_synthetic(cfg.generator, cfg.seed)
    return {}, save_dataset(out, data, cfg.generator, cfg.seed)


def cmd_warm_start(args, cfg: ExperimentConfig, out: Path):
    data, ddir = _data(args)
    init = init_models(data.corpus.vocab_size, cfg.train)
    warm = warm_start(data.corpus, data.train_queries, data.qrels, cfg.train, init)
    outputs = _save_models(out, warm)

    def dev(m: Models) -> dict[str, float]:
        return evaluate_models(m, data.corpus, data.dev_queries, data.qrels, cfg.train.eval_depth)

    outputs.append(out / "metrics.tsv")
    write_metrics(outputs[-1], {"init": dev(init), "warm_start": dev(warm)})
    return {"data": str(ddir)}, outputs


def cmd_augment(args, cfg: ExperimentConfig, out: Path):
    data, ddir = _data(args)
    models, mdir = _models(args, data)
    result = pipeline.augment(data, models, cfg.train, cfg.augment)
    path = out / INSTANCES
    write_instances(path, result.instances)
    counts = _tsv(out / "augment_counts.tsv", ["kind", "count"], sorted(result.counts.items()))
    return {"data": str(ddir), "models": str(mdir)}, [path, counts]


def cmd_train(args, cfg: ExperimentConfig, out: Path):
    data, ddir = _data(args)
    start, mdir = _models(args, data)
    if not args.instances:
        raise UsageError("--instances is required")
    ipath = Path(args.instances)
    if not ipath.is_file():
        raise FileNotFoundError(f"missing instances file: {ipath}")
    instances = read_instances(ipath)
    check_instances(instances, data.corpus, {q.id: q for q in data.train_queries})
    res = train(data.corpus, data.train_queries, instances, cfg.train, start, data.dev_queries, data.qrels)
    outputs = _save_models(out, res.models) + res.log.write(out)
    return {"data": str(ddir), "models": str(mdir), "instances": str(ipath)}, outputs


def cmd_eval(args, cfg: ExperimentConfig, out: Path):
    data, ddir = _data(args)
    models, mdir = _models(args, data)
    queries = data.queries(args.split)
    pipeline_eval(models.retriever, models.reranker, data.corpus, queries, data.qrels,
                  k_retrieve=cfg.train.eval_depth, k_report=cfg.train.eval_depth, out_dir=out)
    names = ("run.retriever.tsv", "run.reranked.tsv", "metrics.tsv")
    return {"data": str(ddir), "models": str(mdir)}, [out / n for n in names]


def cmd_ablate(args, cfg: ExperimentConfig, out: Path):
    data, ddir = _data(args)
    prep = pipeline.prepare(data, cfg.train, cfg.augment)
    rows = pipeline.ablation(prep)
    header = ["variant", *pipeline.METRIC_COLUMNS, "initial_mean_kl", "final_mean_kl"]
    body = [[r.variant, *(r.metrics[c] for c in pipeline.METRIC_COLUMNS), r.initial_kl, r.final_kl] for r in rows]
    path = _tsv(out / "ablation.tsv", header, body)
    warm = _tsv(out / "reference.tsv", ["checkpoint", *pipeline.METRIC_COLUMNS],
                [[name, *(prep.dev_metrics(m)[c] for c in pipeline.METRIC_COLUMNS)]
                 for name, m in (("init", prep.init), ("warm_start", prep.warm))])
    return {"data": str(ddir)}, [path, warm]


def cmd_sweep(args, cfg: ExperimentConfig, out: Path):
    data, ddir = _data(args)
    rows = pipeline.sweep_negatives(data, cfg.train, cfg.augment, cfg.sweep_n_neg)
    path = _tsv(out / "sweep_negatives.tsv", ["n_neg", "instances", "retriever_MRR@10", "reranked_MRR@10"],
                [[r.n_neg, r.instances, r.metrics["retriever_MRR@10"], r.metrics["reranked_MRR@10"]] for r in rows])
    return {"data": str(ddir)}, [path]


COMMANDS: dict[str, tuple[Callable, str]] = {
    "gen-data": (cmd_gen_data, "generate a synthetic topical dataset"),
    "warm-start": (cmd_warm_start, "pre-train both scorers on random-negative lists"),
    "augment": (cmd_augment, "build undenoised and denoised training instances"),
    "train": (cmd_train, "joint training in the configured mode"),
    "eval": (cmd_eval, "retrieve, rerank and score a query split"),
    "ablate": (cmd_ablate, "dynamic / static / pointwise / no-denoised comparison"),
    "sweep-negatives": (cmd_sweep, "train at each n_neg in sweep_n_neg"),
}
REPLAY = "replay"
INPUT_ARGS = ("data", "models", "instances")
OPTION_ARGS = ("split",)


# --------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        # config keys travel as unknown flags; prefix matching would hand --mode to --models
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message: str):  # route argparse failures through the one-line error path
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointrank", description=__doc__.splitlines()[0],
                epilog="config keys (set in --config file or as --key value): " + ", ".join(known_keys()))
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    r = sub.add_parser(REPLAY, help="re-run the command recorded in a run manifest",
                       description="re-run the command recorded in a run manifest")
    r.add_argument("manifest", help="path to a run_manifest.json")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--verbose", action="store_true")
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--config", help="'key = value' config file")
        s.add_argument("--verbose", action="store_true")
        if name != "gen-data":
            s.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
        if name in ("augment", "train", "eval"):
            s.add_argument("--models", help="directory holding retriever.ckpt and reranker.ckpt")
        if name == "train":
            s.add_argument("--instances", help="instance file written by augment")
        if name == "eval":
            s.add_argument("--split", default="dev", choices=("train", "dev"))
    return p


def parse_overrides(tokens: Sequence[str]) -> dict[str, str]:
    """``--key value`` or ``--key=value`` pairs; dashes in keys read as underscores."""
    out: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if not eq:
            if i + 1 >= len(tokens):
                raise UsageError(f"config key {key!r} is missing a value")
            value = tokens[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def _from_manifest(args) -> tuple[argparse.Namespace, ExperimentConfig]:
    """Rebuild the arguments and resolved config of a recorded run."""
    m = RunManifest.read(Path(args.manifest))
    if m.command not in COMMANDS:
        raise ValidationError(f"manifest records unknown command {m.command!r}")
    recorded = m.checksums.get("inputs", {})
    current = _input_files({k: v for k, v in m.inputs.items() if k in INPUT_ARGS})
    for name in sorted(set(recorded) | set(current)):
        if name.startswith("config/"):
            continue
        if recorded.get(name) != current.get(name):
            raise ValidationError(f"input {name} differs from the manifest checksum")
    ns = argparse.Namespace(command=m.command, out=args.out, config=None, verbose=args.verbose)
    for name in INPUT_ARGS:
        setattr(ns, name, m.inputs.get(name))
    for name in OPTION_ARGS:
        setattr(ns, name, m.options.get(name))
    return ns, config_from_flat(m.config)


def run(argv: Sequence[str]) -> RunManifest:
    args, rest = build_parser().parse_known_args(list(argv))
    if args.command == REPLAY:
        if rest:
            raise UsageError("replay takes no config overrides")
        args, cfg = _from_manifest(args)
    else:
        cfg = parse_config(Path(args.config) if args.config else None, parse_overrides(rest))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler, _ = COMMANDS[args.command]
    inputs, outputs = handler(args, cfg, out)
    if args.config:
        inputs = {**inputs, "config": str(args.config)}
    options = {k: str(getattr(args, k)) for k in OPTION_ARGS if getattr(args, k, None) is not None}
    return finish(args.command, cfg, out, inputs, options, outputs)


def error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": " ".join(str(message).split())}, sort_keys=True)


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        run(argv)
    except UsageError as exc:
        print(error_line("usage", exc), file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(error_line("missing_artifact", exc), file=sys.stderr)
        return 3
    except JointRankError as exc:
        print(error_line(type(exc).__name__, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
