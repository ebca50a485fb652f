"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 bad input (unparseable IR,
missing or inconsistent files, configuration that does not fit a
checkpoint). Every subcommand writes ``run_config.json`` into its output
directory and nothing outside it.
"""

from __future__ import annotations

import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import click

from . import __version__
from .augment import OPT_ENV, OptError, apply_recipe, find_opt, make_plan, plan_seed, verify_ll
from .env import env_lines, format_env_file
from .ir import analyze
from .parser import parse_file
from .pce import compute_pce, format_pce
from .text import BpeVocab, SampleError, instruction_texts, read_dataset, sample_from_function, train_bpe, write_dataset

log = logging.getLogger("irsem")

INPUT_ERROR = 2
RUNTIME_ERROR = 1


class InputError(Exception):
    pass


def _fail(msg: str, code: int) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _echo_config(out: Path, command: str, params: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    clean = {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()}
    clean = {k: (list(map(str, v)) if isinstance(v, tuple) else v) for k, v in clean.items()}
    with open(out / "run_config.json", "w", encoding="utf-8") as f:
        json.dump({"command": command, "version": __version__, "params": clean}, f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_or_fail(path: Path, strict: bool):
    try:
        result = parse_file(path, strict=strict)
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    if result.errors:
        raise InputError("\n".join(f"{path}:{d}" for d in result.errors))
    return result.functions


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Static analysis, tokenization and training for LLVM IR functions."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s: %(message)s")


# ---------------------------------------------------------------- analyze

def _analyze_one(args) -> list[tuple[str, str, str]]:
    path, strict, calls = args
    out = []
    for fn in _parse_or_fail(Path(path), strict):
        cfg, _, loops = analyze(fn)
        out.append((fn.name, format_env_file(env_lines(fn, cfg, loops, calls)), format_pce(compute_pce(fn, cfg))))
    return out


def _map(func, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(func, items))
    return [func(x) for x in items]


@main.command("analyze")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--strict", is_flag=True, help="Reject instructions outside the supported subset.")
@click.option("--no-calls", is_flag=True, help="Omit call constraints.")
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(1))
def analyze_cmd(inputs, out, strict, no_calls, jobs):
    """Write constraint (.env) and PCE (.pce) files for every function."""
    _echo_config(out, "analyze", dict(inputs=inputs, strict=strict, no_calls=no_calls, jobs=jobs))
    try:
        results = _map(_analyze_one, [(str(p), strict, not no_calls) for p in inputs], jobs)
    except InputError as exc:
        _fail(str(exc), INPUT_ERROR)
    for path, fns in zip(inputs, results):
        for name, env_text, pce_text in fns:
            (out / f"{path.stem}.{name}.env").write_text(env_text, encoding="utf-8")
            (out / f"{path.stem}.{name}.pce").write_text(pce_text, encoding="utf-8")
            log.info("%s: %s", path, name)


# ---------------------------------------------------------------- augment

@main.command("augment")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--opt", "opt_path", default=None, help=f"opt binary (default: ${OPT_ENV}, then PATH).")
@click.option("--verify/--no-verify", default=True, show_default=True)
def augment_cmd(inputs, out, seed, opt_path, verify):
    """Draw the 19 pass recipes per program and materialize them when opt exists."""
    _echo_config(out, "augment", dict(inputs=inputs, seed=seed, opt=opt_path, verify=verify))
    opt = find_opt(opt_path)
    if opt is None:
        click.echo("warning: no opt binary found; writing recipes only", err=True)
    for path in inputs:
        content = path.read_bytes()
        plan = make_plan(plan_seed(seed, content))
        (out / f"{path.stem}.recipes").write_text(plan.to_text(), encoding="utf-8")
        if opt is None:
            continue
        for k, recipe in enumerate(plan.recipes):
            target = out / f"{path.stem}.v{k:02d}.ll"
            try:
                apply_recipe(path, recipe, target, opt=opt)
            except OptError as exc:
                _fail(f"{path} recipe {k}: {exc}", RUNTIME_ERROR)
            if verify and not verify_ll(target, opt):
                _fail(f"{target}: output does not verify", RUNTIME_ERROR)


# ---------------------------------------------------------------- tokenize

def _load_functions(paths, strict):
    out = []
    for p in paths:
        for fn in _parse_or_fail(p, strict):
            out.append((p, fn))
    return out


@main.command("tokenize")
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--vocab", "vocab_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Reuse a vocabulary instead of training one.")
@click.option("--vocab-size", default=1000, show_default=True, type=click.IntRange(8))
@click.option("--K", "K", default=4, show_default=True, type=click.IntRange(1))
@click.option("--b-ir", default=32, show_default=True, type=click.IntRange(1))
@click.option("--b-env", default=16, show_default=True, type=click.IntRange(1))
@click.option("--max-instructions", default=256, show_default=True, type=click.IntRange(1))
@click.option("--function-id", type=click.Choice(["name", "file"]), default="name", show_default=True,
              help="'name': variants of a function share its name; 'file': file stem plus name.")
@click.option("--variant-id", type=click.Choice(["stem", "suffix"]), default="stem", show_default=True,
              help="'stem': the file stem; 'suffix': the part of the stem after its last dot (foo.O2 -> O2).")
@click.option("--labels", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="TSV of 'path<TAB>label' for a classification dataset.")
@click.option("--max-functions", default=4, show_default=True, type=click.IntRange(1),
              help="Functions kept per labeled file.")
@click.option("--strict", is_flag=True)
def tokenize_cmd(inputs, out, vocab_path, vocab_size, K, b_ir, b_env, max_instructions, function_id,
                 variant_id, labels, max_functions, strict):
    """Train or reuse a BPE vocabulary and write training samples (JSONL)."""
    from .train import LabeledFile

    _echo_config(out, "tokenize", dict(inputs=inputs, vocab=vocab_path, vocab_size=vocab_size, K=K, b_ir=b_ir,
                                       b_env=b_env, max_instructions=max_instructions, function_id=function_id,
                                       variant_id=variant_id, labels=labels, max_functions=max_functions, strict=strict))
    try:
        fns = _load_functions(inputs, strict)
        if vocab_path:
            vocab = BpeVocab.load(vocab_path)
        else:
            lines = []
            for _, fn in fns:
                cfg, _, loops = analyze(fn)
                lines += instruction_texts(fn) + env_lines(fn, cfg, loops)
            vocab = train_bpe(lines, vocab_size)
    except (InputError, ValueError) as exc:
        _fail(str(exc), INPUT_ERROR)
    vocab.save(out / "vocab.txt")

    def sample(path, fn):
        fid = fn.name if function_id == "name" else f"{path.stem}:{fn.name}"
        vid = path.stem.rsplit(".", 1)[-1] if variant_id == "suffix" else path.stem
        return sample_from_function(fn, vocab, K, b_ir, b_env, fid, vid,
                                    max_instructions=max_instructions, truncate=True)

    try:
        samples = [sample(p, fn) for p, fn in fns]
    except SampleError as exc:
        _fail(str(exc), INPUT_ERROR)
    n = write_dataset(out / "dataset.jsonl", samples)
    click.echo(f"{n} samples, vocabulary of {len(vocab)} tokens")

    if labels:
        table = {}
        for lineno, line in enumerate(labels.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].strip().lstrip("-").isdigit():
                _fail(f"{labels}:{lineno}: expected 'path<TAB>integer label'", INPUT_ERROR)
            table[Path(parts[0]).resolve()] = int(parts[1])
        by_file: dict[Path, list] = {}
        for (p, _), s in zip(fns, samples):
            by_file.setdefault(p, []).append(s)
        with open(out / "classify.jsonl", "w", encoding="utf-8") as f:
            for p in inputs:
                if p.resolve() not in table:
                    _fail(f"{p}: no label", INPUT_ERROR)
                funcs = by_file.get(p, [])[:max_functions]
                if funcs:
                    f.write(LabeledFile(p.stem, table[p.resolve()], funcs).to_json() + "\n")


# ---------------------------------------------------------------- training

MODEL_FLAGS = ("d", "heads", "pre_layers", "inst_layers", "post_layers", "max_instructions", "moco_dim",
               "dropout", "dtype")
TRAIN_FLAGS = ("steps", "batch_size", "lr", "warmup", "weight_decay", "seed", "mask_rate", "lam", "mu",
               "queue_size", "momentum", "temperature")


def _model_options(f):
    opts = [
        click.option("--d", type=int, help="Hidden width."),
        click.option("--heads", type=int),
        click.option("--pre-layers", type=int),
        click.option("--inst-layers", type=int),
        click.option("--post-layers", type=int),
        click.option("--max-instructions", type=int),
        click.option("--moco-dim", type=int),
        click.option("--dropout", type=float),
        click.option("--dtype", type=click.Choice(["float64", "float32"])),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _train_options(f):
    opts = [
        click.option("--steps", type=int),
        click.option("--batch-size", type=int),
        click.option("--lr", type=float),
        click.option("--warmup", type=int),
        click.option("--weight-decay", type=float),
        click.option("--seed", type=int),
        click.option("--mask-rate", type=float),
        click.option("--lam", type=float, help="MLM loss coefficient."),
        click.option("--mu", type=float, help="Contrastive loss coefficient."),
        click.option("--queue-size", type=int),
        click.option("--momentum", type=float),
        click.option("--temperature", type=float),
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="JSON with 'model' and 'train' sections; its values take precedence over flags."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _settings(kw: dict, config_path: Path | None) -> tuple[dict, dict]:
    """Defaults, then flags, then the config file."""
    model = {k: kw[k] for k in MODEL_FLAGS if kw.get(k) is not None}
    train = {k: kw[k] for k in TRAIN_FLAGS if kw.get(k) is not None}
    if config_path:
        try:
            cfg = json.loads(config_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{config_path}: {exc}") from exc
        if not isinstance(cfg, dict) or set(cfg) - {"model", "train"}:
            raise InputError(f"{config_path}: expected an object with 'model' and/or 'train'")
        model.update(cfg.get("model", {}))
        train.update(cfg.get("train", {}))
    return model, train


def _train_config(train: dict, **defaults):
    from .train import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    unknown = set(train) - known
    if unknown:
        raise InputError(f"unknown training settings: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(train)
    return TrainConfig(**merged)


def _model_config(model: dict, vocab_size: int, sample):
    from .model import ModelConfig

    known = {f.name for f in fields(ModelConfig)}
    unknown = set(model) - known
    if unknown:
        raise InputError(f"unknown model settings: {sorted(unknown)}")
    base = dict(K=sample.K, B_ir=sample.B_ir, B_env=sample.B_env)
    base.update(model)
    try:
        return ModelConfig(vocab_size, **base)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def _read_samples(path: Path):
    try:
        samples = read_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    if not samples:
        raise InputError(f"{path}: empty dataset")
    return samples


def _run_training(trainer, out: Path, steps: int, append: bool = False) -> None:
    from .train import run

    with open(out / "train_log.jsonl", "a" if append else "w", encoding="utf-8") as f:
        try:
            records = run(trainer, steps, f)
        except FloatingPointError as exc:
            _fail(str(exc), RUNTIME_ERROR)
    trainer.save(out / "checkpoint.safetensors")
    if records:
        click.echo(json.dumps(records[-1]))


def _load_pretrained(path: Path):
    from .checkpoint import CheckpointError, load_checkpoint
    from .train import load_model

    try:
        tensors, _, mc, _ = load_checkpoint(path)
        return load_model(tensors, mc)
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc


def _check_fits(model, samples) -> None:
    cfg = model.cfg
    for s in samples:
        if (s.K, s.B_ir, s.B_env) != (cfg.K, cfg.B_ir, cfg.B_env):
            raise InputError(f"sample {s.function_id}/{s.variant_id} was packed with K={s.K}, "
                             f"B_ir={s.B_ir}, B_env={s.B_env}; the model expects "
                             f"K={cfg.K}, B_ir={cfg.B_ir}, B_env={cfg.B_env}")
        for row in s.ir_tokens + s.env_tokens:
            if any(t >= cfg.vocab_size for t in row):
                raise InputError(f"sample {s.function_id}: token id outside the model vocabulary")


@main.command("pretrain")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--stop-after", type=click.IntRange(0), help="Checkpoint after this many steps of the schedule.")
@_model_options
@_train_options
def pretrain_cmd(dataset, vocab_path, out, resume_path, stop_after, config_path, **kw):
    """Masked instruction modelling plus momentum contrast."""
    from .model import PretrainModel
    from .train import Pretrainer, resume

    try:
        model_over, train_over = _settings(kw, config_path)
        samples = _read_samples(dataset)
        vocab = BpeVocab.load(vocab_path)
        if resume_path:
            trainer = resume(resume_path, samples)
            if trainer.kind != "pretrain":
                raise InputError(f"{resume_path} is a {trainer.kind} checkpoint")
        else:
            tc = _train_config(train_over)
            mc = _model_config(model_over, len(vocab), samples[0])
            model = PretrainModel(mc, seed=tc.seed)
            trainer = Pretrainer(model, samples, tc)
        _check_fits(trainer.model, samples)
    except (InputError, ValueError) as exc:
        _fail(str(exc), INPUT_ERROR)
    _echo_config(out, "pretrain", dict(dataset=dataset, vocab=vocab_path, resume=resume_path,
                                       model=trainer.model.cfg.to_dict(), train=trainer.tc.to_dict()))
    left = max(0, trainer.tc.steps - trainer.step)
    _run_training(trainer, out, left if stop_after is None else min(left, stop_after), append=resume_path is not None)


@main.command("finetune-diff")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@_train_options
def finetune_diff_cmd(dataset, checkpoint, out, config_path, **kw):
    """Fine-tune on same-function triplets with the batch diffing loss."""
    from .train import DiffTrainer

    try:
        _, train_over = _settings(kw, config_path)
        samples = _read_samples(dataset)
        model = _load_pretrained(checkpoint)
        _check_fits(model, samples)
        tc = _train_config(train_over, lr=2e-4, weight_decay=0.2, batch_size=4, steps=100, warmup=10)
        trainer = DiffTrainer(model, samples, tc)
    except (InputError, ValueError) as exc:
        _fail(str(exc), INPUT_ERROR)
    _echo_config(out, "finetune-diff", dict(dataset=dataset, checkpoint=checkpoint, train=tc.to_dict()))
    _run_training(trainer, out, tc.steps)


@main.command("finetune-classify")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--num-classes", default=104, show_default=True, type=click.IntRange(2))
@_train_options
def finetune_classify_cmd(dataset, checkpoint, out, num_classes, config_path, **kw):
    """Fine-tune a file classifier over summed [CLS] vectors."""
    from .train import ClassifyTrainer, LabeledFile

    try:
        _, train_over = _settings(kw, config_path)
        try:
            files = [LabeledFile.from_json(l) for l in dataset.read_text(encoding="utf-8").splitlines() if l.strip()]
        except (ValueError, KeyError) as exc:
            raise InputError(f"{dataset}: {exc}") from exc
        bad = [f.file_id for f in files if not 0 <= f.label < num_classes]
        if bad:
            raise InputError(f"labels outside [0, {num_classes}) for {bad[:5]}")
        model = _load_pretrained(checkpoint)
        _check_fits(model, [s for f in files for s in f.functions])
        tc = _train_config(train_over, lr=5e-5, weight_decay=0.01, batch_size=8, steps=100, warmup=10)
        trainer = ClassifyTrainer(model, files, tc, num_classes)
    except (InputError, ValueError) as exc:
        _fail(str(exc), INPUT_ERROR)
    _echo_config(out, "finetune-classify", dict(dataset=dataset, checkpoint=checkpoint, num_classes=num_classes,
                                                train=tc.to_dict()))
    _run_training(trainer, out, tc.steps)


# ---------------------------------------------------------------- eval

@main.command("eval")
@click.argument("metric", type=click.Choice(["recall1", "map"]))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--features", "features_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Feature file: id<TAB>label<TAB>vector.")
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Samples to encode with --checkpoint instead of a feature file.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--query-group", help="recall1: id prefix (before '/') of the query set.")
@click.option("--target-group", help="recall1: id prefix of the target set.")
@click.option("--verbose", "detail", is_flag=True, help="Include per-query results.")
def eval_cmd(metric, out, features_path, dataset, checkpoint, query_group, target_group, detail):
    """Recall@1 between two groups, or MAP@R over labels, on cosine similarity."""
    from .metrics import (
        cosine_matrix, label_mapping, map_at_r_from_similarity, read_features,
        recall_at_1_from_similarity, write_features,
    )

    _echo_config(out, "eval", dict(metric=metric, features=features_path, dataset=dataset, checkpoint=checkpoint,
                                   query_group=query_group, target_group=target_group, verbose=detail))
    try:
        if (features_path is None) == (dataset is None):
            raise InputError("give exactly one of --features or --dataset")
        if dataset is not None:
            if checkpoint is None:
                raise InputError("--dataset needs --checkpoint")
            from .train import encode_features

            samples = _read_samples(dataset)
            model = _load_pretrained(checkpoint)
            _check_fits(model, samples)
            vecs = encode_features(model, samples).numpy()
            features_path = out / "features.tsv"
            write_features(features_path, [f"{s.variant_id}/{s.function_id}" for s in samples],
                           [s.function_id for s in samples], vecs)
        feats = read_features(features_path)
        if metric == "recall1":
            if not query_group or not target_group:
                raise InputError("recall1 needs --query-group and --target-group")
            a, b = feats.subset(query_group), feats.subset(target_group)
            mapping = label_mapping(a, b)
            rep = recall_at_1_from_similarity(cosine_matrix(a.vectors, b.vectors), mapping)
            report = {"metric": "recall@1", "value": rep.value, "pairs": len(mapping), "candidates": len(b.ids)}
            if detail:
                report["queries"] = [{"query": a.ids[i], "predicted": b.ids[j], "truth": b.ids[mapping[i]]}
                                     for i, j in sorted(rep.predicted.items())]
        else:
            rep = map_at_r_from_similarity(cosine_matrix(feats.vectors, feats.vectors), feats.labels)
            report = {"metric": "map@r", "value": rep.value, "queries": len(rep.precision),
                      "skipped_singletons": len(rep.skipped)}
            if detail:
                report["per_query"] = {feats.ids[i]: p for i, p in sorted(rep.precision.items())}
    except (InputError, ValueError) as exc:
        _fail(str(exc), INPUT_ERROR)
    text = json.dumps(report, indent=2, sort_keys=True)
    (out / "report.json").write_text(text + "\n", encoding="utf-8")
    click.echo(text)


if __name__ == "__main__":
    main()
