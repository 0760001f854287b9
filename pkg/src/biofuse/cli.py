"""Command-line surface: gen, preprocess, train, enroll, verify, evaluate.

Every run is driven by one JSON config file; flags override config values.
Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .corpus import Modality, SynthConfig, generate_synthetic, read_corpus, write_corpus
from .errors import BiofuseError, ConfigError, IdentityError, ValidationError
from .fusion import FusionRule
from .metrics import ExperimentConfig, run_experiment
from .preprocess import (
    NanPolicy,
    Standardizer,
    apply_standardizer,
    build_dataset,
    fit_standardizer,
    load_dataset,
    pair_samples,
    save_dataset,
)
from .tnn import (
    ArchKind,
    EmbeddingModel,
    TrainConfig,
    fusion_arch,
    load_model,
    save_model,
    single_modality_arch,
    train,
)
from .verify import (
    Scenario,
    Template,
    TemplateStore,
    Threshold,
    load_templates,
    save_templates,
    verify_claim,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


@dataclass
class RunConfig:
    paths: dict
    synth: SynthConfig | None
    nan_policy: NanPolicy
    train: TrainConfig
    eval: ExperimentConfig


_SECTIONS = ("paths", "synth", "nan_policy", "train", "eval")


def _section(cfg: dict, name: str, cls, context: str):
    raw = cfg.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{context}: section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys in {name!r}: {sorted(unknown)}")
    return raw


def load_config(path) -> RunConfig:
    """Parse and schema-validate the run config before any work starts."""
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    unknown = set(cfg) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"config {path}: unknown sections {sorted(unknown)}")
    ctx = f"config {path}"

    paths = cfg.get("paths", {})
    if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
        raise ConfigError(f"{ctx}: 'paths' must map names to strings")
    values = list(paths.values())
    if len(set(values)) != len(values):
        raise ConfigError(f"{ctx}: referenced paths must be pairwise distinct")

    synth_raw = _section(cfg, "synth", SynthConfig, ctx)
    nan_raw = _section(cfg, "nan_policy", NanPolicy, ctx)
    train_raw = _section(cfg, "train", TrainConfig, ctx)

    eval_raw = dict(cfg.get("eval", {}))
    allowed = {"scenario", "modality", "fusion", "fusion_eye", "folds", "seed",
               "raw_fusion", "deterministic"}
    unknown = set(eval_raw) - allowed
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys in 'eval': {sorted(unknown)}")

    try:
        synth = SynthConfig(**synth_raw) if synth_raw else None
        nan_policy = NanPolicy(**nan_raw)
        train_cfg = TrainConfig(**train_raw)
        eval_cfg = ExperimentConfig(
            scenario=Scenario(eval_raw.get("scenario", "s2")),
            modality=eval_raw.get("modality", "brain"),
            fusion=_parse_fusion(eval_raw.get("fusion", "none")),
            fusion_eye=eval_raw.get("fusion_eye", "eye-pupil"),
            folds=int(eval_raw.get("folds", 6)),
            seed=int(eval_raw.get("seed", 0)),
            raw_fusion=bool(eval_raw.get("raw_fusion", False)),
            deterministic=bool(eval_raw.get("deterministic", True)),
            nan_policy=nan_policy,
            train=train_cfg,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{ctx}: {e}") from None
    return RunConfig(
        paths=paths, synth=synth, nan_policy=nan_policy, train=train_cfg, eval=eval_cfg
    )


def _parse_fusion(token: str) -> FusionRule | None:
    if token in (None, "none", ""):
        return None
    try:
        return FusionRule(token)
    except ValueError:
        raise ConfigError(f"unknown fusion rule {token!r}") from None


def _open_config(args) -> RunConfig:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    run = load_config(path)
    eval_updates = {}
    if getattr(args, "scenario", None):
        eval_updates["scenario"] = Scenario(args.scenario)
    # --modality on preprocess selects a dataset, not the evaluation config
    if args.command in ("train", "evaluate") and getattr(args, "modality", None):
        eval_updates["modality"] = args.modality
    if getattr(args, "fusion", None):
        eval_updates["fusion"] = _parse_fusion(args.fusion)
    if getattr(args, "seed", None) is not None:
        eval_updates["seed"] = args.seed
        run = replace_run(run, train=replace(run.train, seed=args.seed))
        if run.synth is not None:
            run = replace_run(run, synth=replace(run.synth, seed=args.seed))
    if getattr(args, "deterministic", False):
        eval_updates["deterministic"] = True
    if eval_updates:
        run = replace_run(
            run, eval=replace(run.eval, train=run.train, **eval_updates)
        )
    return run


def replace_run(run: RunConfig, **kw) -> RunConfig:
    return RunConfig(
        paths=kw.get("paths", run.paths),
        synth=kw.get("synth", run.synth),
        nan_policy=kw.get("nan_policy", run.nan_policy),
        train=kw.get("train", run.train),
        eval=kw.get("eval", run.eval),
    )


def _path_from(args, attr: str, run: RunConfig, key: str, what: str) -> Path:
    override = getattr(args, attr, None)
    if override:
        return Path(override)
    if key in run.paths:
        return Path(run.paths[key])
    raise ConfigError(f"no {what} path: pass --{attr.replace('_', '-')} or set paths.{key}")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    run = _open_config(args)
    if run.synth is None:
        raise ConfigError("config has no 'synth' section; nothing to generate")
    out = _path_from(args, "out", run, "corpus", "corpus output")
    recordings = generate_synthetic(run.synth)
    write_corpus(recordings, out)
    n_events = sum(len(r.events) for r in recordings)
    print(f"gen: wrote {out} ({len(recordings)} subjects, {n_events} events)")
    return 0


def cmd_preprocess(args) -> int:
    run = _open_config(args)
    corpus_path = _path_from(args, "corpus", run, "corpus", "corpus input")
    out = _path_from(args, "out", run, "dataset", "dataset output")
    modality_name = args.modality or (
        run.eval.modality if run.eval.modality in ("brain", "eye", "eye-pupil") else None
    )
    if modality_name is None:
        raise ConfigError("preprocess needs a concrete --modality (brain, eye, eye-pupil)")
    modality = Modality(modality_name)
    recordings = read_corpus(corpus_path)
    samples, report = build_dataset(recordings, modality, run.nan_policy)
    save_dataset(samples, out, modality=modality)
    if args.report:
        Path(args.report).write_text(report.to_text(), encoding="utf-8")
    print(
        f"preprocess: wrote {out} ({len(samples)} samples, modality={modality.value}, "
        f"rejected={report.total('rejected')}, skipped={report.total('skipped')})"
    )
    return 0


def _load_datasets(paths: list[str]):
    loaded = [load_dataset(p) for p in paths]
    by_modality = {modality: samples for samples, modality in loaded}
    if len(by_modality) != len(loaded):
        raise ValidationError("datasets must cover distinct modalities")
    return by_modality


def _std_provenance(stds) -> dict:
    return {
        modality.value: {"mean": std.mean.tolist(), "std": std.std.tolist(), "scope": std.scope}
        for modality, std in stds.items()
    }


def _stds_from_provenance(model: EmbeddingModel) -> dict:
    raw = model.provenance.get("standardizers")
    if not raw:
        raise ValidationError("model provenance carries no standardizers; retrain via the CLI")
    out = {}
    for name, entry in raw.items():
        modality = Modality(name)
        out[modality] = Standardizer(
            modality=modality,
            mean=np.asarray(entry["mean"], dtype=np.float64),
            std=np.asarray(entry["std"], dtype=np.float64),
            scope=entry.get("scope", ""),
        )
    return out


def _prepare_model_inputs(by_modality, model: EmbeddingModel):
    """Standardize raw samples with the model's stored transforms and pair if needed."""
    stds = _stds_from_provenance(model)
    standardized = {}
    for modality, samples in by_modality.items():
        if modality not in stds:
            raise ValidationError(f"model has no standardizer for modality {modality.value}")
        standardized[modality] = [apply_standardizer(stds[modality], s) for s in samples]
    if model.arch.n_branches == 1:
        (samples,) = standardized.values()
        return samples
    return pair_samples(
        standardized[Modality.BRAIN],
        standardized[model.arch.modalities[1]],
    )


def cmd_train(args) -> int:
    run = _open_config(args)
    dataset_paths = args.dataset or ([run.paths["dataset"]] if "dataset" in run.paths else [])
    if not dataset_paths:
        raise ConfigError("train needs --dataset (repeatable) or paths.dataset")
    out = _path_from(args, "out", run, "model", "model output")
    by_modality = _load_datasets(dataset_paths)

    stds = {}
    standardized = {}
    for modality, samples in by_modality.items():
        std = fit_standardizer(samples, scope="cli-train")
        stds[modality] = std
        standardized[modality] = [apply_standardizer(std, s) for s in samples]

    if len(by_modality) == 1:
        (modality,) = by_modality
        arch = single_modality_arch(modality)
        train_samples = standardized[modality]
    else:
        if set(by_modality) - {Modality.BRAIN, Modality.EYE, Modality.EYE_PUPIL}:
            raise ValidationError("fusion training needs brain plus one eye dataset")
        if Modality.BRAIN not in by_modality or len(by_modality) != 2:
            raise ValidationError("fusion training needs exactly brain + eye datasets")
        if run.eval.modality not in ("fusion-a", "fusion-b"):
            raise ConfigError(
                "two datasets given: set eval.modality (or --modality) to fusion-a/fusion-b"
            )
        eye_m = next(m for m in by_modality if m is not Modality.BRAIN)
        arch = fusion_arch(ArchKind(run.eval.modality), eye_m)
        train_samples = pair_samples(standardized[Modality.BRAIN], standardized[eye_m])

    model, history = train(
        train_samples,
        arch,
        run.train,
        provenance={"standardizers": _std_provenance(stds), "fold_id": "cli-train"},
    )
    save_model(model, out)
    final = history[-1] if history else float("nan")
    print(
        f"train: wrote {out} (arch={arch.tag}, {model.n_weights} weights, "
        f"final epoch loss={final:.4f})"
    )
    return 0


def cmd_enroll(args) -> int:
    run = _open_config(args)
    model = load_model(_path_from(args, "model", run, "model", "model input"))
    dataset_paths = args.dataset or ([run.paths["dataset"]] if "dataset" in run.paths else [])
    if not dataset_paths:
        raise ConfigError("enroll needs --dataset (repeatable) or paths.dataset")
    out = _path_from(args, "out", run, "templates", "template store output")
    samples = _prepare_model_inputs(_load_datasets(dataset_paths), model)
    wanted = set(args.subjects.split(",")) if args.subjects else None
    store = TemplateStore()
    for sample in samples:
        if wanted is not None and sample.subject_id not in wanted:
            continue
        store.enroll(
            Template(
                identity=sample.subject_id,
                vector=model.embed(sample),
                round_id=sample.round_id,
                tag=model.arch.tag,
            )
        )
    if len(store) == 0:
        raise ValidationError("no samples matched the enrollment filter")
    save_templates(store, out)
    print(f"enroll: wrote {out} ({len(store)} templates, {len(store.identities())} identities)")
    return 0


def cmd_verify(args) -> int:
    run = _open_config(args)
    model = load_model(_path_from(args, "model", run, "model", "model input"))
    store = load_templates(_path_from(args, "templates", run, "templates", "template store"))
    sample_paths = args.sample
    samples = _prepare_model_inputs(_load_datasets(sample_paths), model)
    if not samples:
        raise ValidationError("sample dataset is empty")
    sample = samples[args.index]
    threshold = Threshold.fixed(args.threshold)
    scenario = Scenario(args.scenario) if args.scenario else Scenario.S2
    decision = verify_claim(model, store, args.claim, sample, threshold, scenario)
    verdict = "ACCEPT" if decision.accept else "REJECT"
    print(
        f"{verdict} claim={args.claim} score={decision.score:.6f} "
        f"threshold={decision.threshold:.6f} scenario={decision.scenario.value} "
        f"matched_round={decision.matched_round_id}"
    )
    return 0


def cmd_evaluate(args) -> int:
    run = _open_config(args)
    corpus_path = _path_from(args, "corpus", run, "corpus", "corpus input")
    report_path = _path_from(args, "out", run, "report", "report output")
    recordings = read_corpus(corpus_path)
    report = run_experiment(recordings, run.eval)
    Path(report_path).write_text(report.to_json(), encoding="utf-8")
    rows_path = Path(report_path).with_suffix(".csv")
    with open(rows_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["config", "metric", "value"])
        writer.writerows(report.to_rows())
    print(
        f"evaluate: wrote {report_path} and {rows_path} "
        f"(scenario={run.eval.scenario.value}, modality={run.eval.modality}, "
        f"fusion={run.eval.fusion.value if run.eval.fusion else 'none'}, "
        f"pooled EER={report.pooled['eer']:.4f})"
    )
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="biofuse", description="Eye+brain verification testbed")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, help="override all seeds")
        p.add_argument("--deterministic", action="store_true", help="force deterministic mode")

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", help="corpus output path (default: paths.corpus)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("preprocess", help="extract samples from a corpus")
    common(p)
    p.add_argument("--corpus", help="corpus input (default: paths.corpus)")
    p.add_argument("--out", help="dataset output (default: paths.dataset)")
    p.add_argument("--modality", choices=["brain", "eye", "eye-pupil"])
    p.add_argument("--report", help="write the preprocess report here")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train an embedding model")
    common(p)
    p.add_argument("--dataset", action="append", help="dataset path (repeat for fusion)")
    p.add_argument("--out", help="model output (default: paths.model)")
    p.add_argument("--modality", choices=["brain", "eye", "eye-pupil", "fusion-a", "fusion-b"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enroll", help="build a template store from a dataset")
    common(p)
    p.add_argument("--model", help="model path (default: paths.model)")
    p.add_argument("--dataset", action="append", help="dataset path (repeat for fusion)")
    p.add_argument("--out", help="template store output (default: paths.templates)")
    p.add_argument("--subjects", help="comma-separated identities to enroll (default: all)")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("verify", help="verify one sample against a claimed identity")
    common(p)
    p.add_argument("--model", help="model path (default: paths.model)")
    p.add_argument("--templates", help="template store (default: paths.templates)")
    p.add_argument("--claim", required=True, help="claimed identity")
    p.add_argument("--sample", action="append", required=True,
                   help="dataset holding the verification sample (repeat for fusion)")
    p.add_argument("--index", type=int, default=0, help="sample index in the dataset")
    p.add_argument("--threshold", type=float, required=True, help="acceptance threshold")
    p.add_argument("--scenario", choices=["s1", "s2", "s3"])
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("evaluate", help="run the full cross-validated evaluation")
    common(p)
    p.add_argument("--corpus", help="corpus input (default: paths.corpus)")
    p.add_argument("--out", help="report output (default: paths.report)")
    p.add_argument("--modality", choices=["brain", "eye", "eye-pupil", "fusion-a", "fusion-b"])
    p.add_argument("--fusion", choices=["none", "max", "min", "mean", "product"])
    p.add_argument("--scenario", choices=["s1", "s2", "s3"])
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"biofuse: error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, ValidationError, IdentityError) as e:
        print(f"biofuse: error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"biofuse: error: file not found: {e.filename}", file=sys.stderr)
        return 1
    except BiofuseError as e:
        print(f"biofuse: runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
