"""Pipeline orchestration: synth -> ingest -> train -> recommend -> explain
-> evaluate, plus a hinge-weight sweep.

Configuration is a flat key=value file; every key has a --key override and
flags win over the file (with a logged notice). Artifacts embed a hash of
the configuration that produced them, and stages refuse inputs whose hash
does not match the current run.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from datetime import datetime, timezone

import numpy as np

from . import corpus as cp
from . import metrics as mx
from . import synth as sy
from .counterfactual import (CfHyper, explain, read_explanations,
                             write_explanations)
from .recsys import RankedList, RecommenderModel, TrainHyper, recommend_top_k, train_model

log = logging.getLogger("aspectcf")

EXIT_OK = 0
EXIT_NOT_APPLICABLE = 1
EXIT_INPUT_ERROR = 2
EXIT_CONFIG_ERROR = 3
EXIT_INTERNAL_ERROR = 4

RANKINGS_MAGIC = "aspectcf-rankings"


class ConfigError(ValueError):
    """Bad configuration file or flag values."""


class ArtifactMismatchError(ValueError):
    """An input artifact was produced under a different configuration."""


class NotApplicable(Exception):
    """The requested evaluation has nothing to evaluate."""


@dataclass
class RunConfig:
    """Resolved run configuration; defaults follow the reference setup."""

    data: str = ""
    output: str = "out"
    model: str = ""                 # defaults to <output>/model.json
    scale: int = 5
    k: int = 5
    lr: float = 0.01
    epochs: int = 50
    batch: int = 256
    negatives: int = 2
    hidden: str = "512,256"
    lam: float = 100.0
    gamma: float = 1.0
    alpha: float = 0.2
    tau: float = 1e-4
    step: float = 0.01
    max_iter: int = 1000
    tol: float = 1e-6
    variants: str = "multi,single"
    seed: int = 0
    threads: int = 1
    lambda_grid: str = "1,10,100,1000"
    random_baseline: bool = True

    # keys that identify the data/model lineage
    _CORE_KEYS = ("data", "scale", "k", "lr", "epochs", "batch", "negatives",
                  "hidden", "seed")
    # keys that never affect results
    _UNHASHED = ("output", "model", "threads")

    def model_path(self) -> str:
        return self.model or os.path.join(self.output, "model.json")

    def hidden_dims(self) -> tuple[int, int]:
        try:
            a, b = (int(x) for x in self.hidden.split(","))
            return a, b
        except ValueError:
            raise ConfigError(f"hidden must be two integers, got {self.hidden!r}")

    def variant_list(self) -> list[str]:
        from .counterfactual import VARIANTS
        out = [v.strip() for v in self.variants.split(",") if v.strip()]
        for v in out:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r} (choose from {VARIANTS})")
        if not out:
            raise ConfigError("no variants selected")
        return out

    def lambda_values(self) -> list[float]:
        try:
            return [float(x) for x in self.lambda_grid.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"bad lambda_grid {self.lambda_grid!r}")

    def train_hyper(self) -> TrainHyper:
        return TrainHyper(learning_rate=self.lr, epochs=self.epochs,
                          batch_size=self.batch, negatives=self.negatives,
                          hidden=self.hidden_dims(), seed=self.seed)

    def cf_hyper(self) -> CfHyper:
        return CfHyper(lam=self.lam, gamma=self.gamma, alpha=self.alpha,
                       tau=self.tau, step=self.step, max_iter=self.max_iter,
                       tol=self.tol)

    def _hash(self, keys) -> str:
        blob = "\n".join(f"{k}={getattr(self, k)!r}" for k in sorted(keys))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def core_hash(self) -> str:
        return self._hash(self._CORE_KEYS)

    def full_hash(self) -> str:
        keys = [f.name for f in fields(self) if f.name not in self._UNHASHED]
        return self._hash(keys)


_FILE_KEYS = {
    "data": str, "output": str, "model": str, "scale": int, "k": int,
    "lr": float, "epochs": int, "batch": int, "negatives": int,
    "hidden": str, "lambda": float, "gamma": float, "alpha": float,
    "tau": float, "step": float, "max_iter": int, "tol": float,
    "variants": str, "seed": int, "threads": int, "lambda_grid": str,
    "random_baseline": bool,
}
_KEY_TO_ATTR = {key: ("lam" if key == "lambda" else key) for key in _FILE_KEYS}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def read_config_file(path: str) -> dict:
    """Parse flat key=value lines into typed values keyed by attribute."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, raw = line.split("=", 1)
            key, raw = key.strip(), raw.strip()
            if key not in _FILE_KEYS:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            typ = _FILE_KEYS[key]
            try:
                value = _parse_bool(raw) if typ is bool else typ(raw)
            except ValueError:
                raise ConfigError(
                    f"{path}:{line_no}: bad value {raw!r} for {key}") from None
            out[_KEY_TO_ATTR[key]] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Built-in defaults, overlaid by the config file, overlaid by flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key, attr in _KEY_TO_ATTR.items():
        flag_value = getattr(args, attr, None)
        if flag_value is None:
            continue
        if attr in values and values[attr] != flag_value:
            log.info("flag --%s=%s overrides config file value %s",
                     key, flag_value, values[attr])
        values[attr] = flag_value
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _write_manifest(config: RunConfig, command: str, started: str,
                    inputs: list[str], outputs: list[str]) -> None:
    os.makedirs(config.output, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config.full_hash(),
        "core_hash": config.core_hash(),
        "seed": config.seed,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "inputs": inputs,
        "outputs": outputs,
        "config": {f.name: getattr(config, f.name) for f in fields(config)},
    }
    path = os.path.join(config.output, f"manifest_{command}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _require(path: str, role: str) -> str:
    if not path:
        raise ConfigError(f"no {role} path configured")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {role} file: {path}")
    return path


def _load_pipeline_inputs(config: RunConfig):
    path = _require(config.data, "data")
    corpus = cp.ingest(path, rating_scale=config.scale)
    split = cp.holdout_split(corpus)
    matrices = cp.build_matrices(corpus, split)
    return corpus, split, matrices


# -- subcommands ---------------------------------------------------------------

def cmd_synth(config: RunConfig, args: argparse.Namespace) -> int:
    started = _now()
    spec = sy.SynthSpec(
        seed=config.seed, n_users=args.users, n_items=args.items,
        n_aspects=args.aspects, aspects_per_user=args.aspects_per_user,
        aspects_per_item=args.aspects_per_item, density=args.density,
        noise=args.noise, rating_scale=config.scale)
    corpus, truth = sy.generate(spec)
    os.makedirs(config.output, exist_ok=True)
    data_path = config.data or os.path.join(config.output, "data.tsv")
    truth_path = os.path.join(config.output, "truth.tsv")
    cp.write_interactions(corpus, data_path)
    sy.write_truth(corpus, truth, truth_path)
    log.info("wrote %d interactions for %d users to %s",
             len(corpus.records), corpus.m, data_path)
    _write_manifest(config, "synth", started, [], [data_path, truth_path])
    return EXIT_OK


def cmd_ingest(config: RunConfig, args: argparse.Namespace) -> int:
    started = _now()
    corpus, split, matrices = _load_pipeline_inputs(config)
    maps_dir = os.path.join(config.output, "maps")
    cp.write_index_maps(corpus, maps_dir)
    stats = {
        "users": corpus.m, "items": corpus.n, "aspects": corpus.r,
        "records": len(corpus.records),
        "evaluable_users": sum(split.evaluable),
        "train_pairs": int(matrices.B.nnz),
        "config_hash": config.full_hash(),
    }
    stats_path = os.path.join(config.output, "corpus_stats.json")
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("ingested %s: %d users, %d items, %d aspects, %d records",
             config.data, corpus.m, corpus.n, corpus.r, len(corpus.records))
    _write_manifest(config, "ingest", started, [config.data],
                    [stats_path, maps_dir])
    return EXIT_OK


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    started = _now()
    corpus, split, matrices = _load_pipeline_inputs(config)
    model = train_model(matrices, config.train_hyper())
    os.makedirs(config.output, exist_ok=True)
    model_path = config.model_path()
    model.save(model_path, config_hash=config.core_hash())
    trace_path = os.path.join(config.output, "loss_trace.csv")
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss\n")
        for epoch, loss in enumerate(model.loss_trace, start=1):
            fh.write(f"{epoch},{loss!r}\n")
    log.info("trained %d epochs, final loss %.6f, saved to %s",
             config.epochs, model.loss_trace[-1], model_path)
    _write_manifest(config, "train", started, [config.data],
                    [model_path, trace_path])
    return EXIT_OK


def _load_model(config: RunConfig) -> RecommenderModel:
    path = _require(config.model_path(), "model checkpoint")
    model = RecommenderModel.load(path)
    if model.config_hash and model.config_hash != config.core_hash():
        raise ArtifactMismatchError(
            f"{path} was trained under config {model.config_hash}, current "
            f"core config is {config.core_hash()}")
    return model


def _rankings_path(config: RunConfig) -> str:
    return os.path.join(config.output, "rankings.jsonl")


def write_rankings(ranked_lists, corpus, path, config_hash, k) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": RANKINGS_MAGIC,
                             "config_hash": config_hash, "k": k}) + "\n")
        for ranked in ranked_lists:
            fh.write(json.dumps({
                "user_id": corpus.user_ids[ranked.user],
                "items": [corpus.item_ids[int(j)] for j in ranked.items],
                "scores": [float(s) for s in ranked.scores],
                "boundary": ranked.boundary_score}) + "\n")


def read_rankings(path, corpus):
    user_index = {ident: i for i, ident in enumerate(corpus.user_ids)}
    item_index = {ident: i for i, ident in enumerate(corpus.item_ids)}
    ranked_lists = []
    with open(path, encoding="utf-8") as fh:
        meta = json.loads(fh.readline())
        if meta.get("meta") != RANKINGS_MAGIC:
            raise ValueError(f"{path}: not a rankings file")
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ranked_lists.append(RankedList(
                user=user_index[rec["user_id"]],
                items=np.array([item_index[i] for i in rec["items"]]),
                scores=np.array(rec["scores"]),
                k=meta["k"],
                boundary_score=rec["boundary"]))
    return meta, ranked_lists


def cmd_recommend(config: RunConfig, args: argparse.Namespace) -> int:
    started = _now()
    corpus, split, matrices = _load_pipeline_inputs(config)
    model = _load_model(config)
    ranked_lists = []
    skipped = 0
    for user in range(corpus.m):
        if matrices.n - len(matrices.train_items(user)) < config.k + 1:
            skipped += 1
            continue
        ranked_lists.append(recommend_top_k(model, matrices, user, config.k))
    if skipped:
        log.info("skipped %d users with fewer than k+1 candidates", skipped)
    path = _rankings_path(config)
    write_rankings(ranked_lists, corpus, path, config.core_hash(), config.k)
    log.info("wrote top-%d lists for %d users to %s",
             config.k, len(ranked_lists), path)
    _write_manifest(config, "recommend", started,
                    [config.data, config.model_path()], [path])
    return EXIT_OK


def generate_explanations(config: RunConfig, corpus, matrices, model,
                          ranked_lists) -> list:
    """All (user, top-K item, variant) explanation attempts, in a fixed
    deterministic order regardless of worker count."""
    variants = config.variant_list()
    hyper = config.cf_hyper()
    tasks = [(ranked, int(item), variant)
             for ranked in ranked_lists
             for item in ranked.items
             for variant in variants]

    def run(task):
        ranked, item, variant = task
        return explain(ranked.user, item, model, matrices, ranked, hyper,
                       variant)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(run, tasks))
    return [run(task) for task in tasks]


def _explanations_path(config: RunConfig) -> str:
    return os.path.join(config.output, "explanations.jsonl")


def cmd_explain(config: RunConfig, args: argparse.Namespace) -> int:
    started = _now()
    corpus, split, matrices = _load_pipeline_inputs(config)
    model = _load_model(config)
    rankings_file = _require(_rankings_path(config), "rankings")
    meta, ranked_lists = read_rankings(rankings_file, corpus)
    if meta.get("config_hash") != config.core_hash():
        raise ArtifactMismatchError(
            f"{rankings_file} was produced under config "
            f"{meta.get('config_hash')}, current core config is "
            f"{config.core_hash()}")
    explanations = generate_explanations(config, corpus, matrices, model,
                                         ranked_lists)
    path = _explanations_path(config)
    write_explanations(explanations, corpus, path,
                       config_hash=config.full_hash())
    n_valid = sum(e.valid for e in explanations)
    log.info("explained %d pairs (%d valid) across variants %s -> %s",
             len(explanations), n_valid, config.variants, path)
    _write_manifest(config, "explain", started,
                    [config.data, config.model_path(), rankings_file], [path])
    return EXIT_OK


def _evaluate(config: RunConfig, explanations, corpus, split, matrices,
              model, ranked_lists, out_dir: str):
    """Shared by evaluate and sweep; returns the report."""
    truth = mx.ground_truth(corpus, split)
    batch = list(explanations)
    if config.random_baseline:
        rng_seed = config.seed + 1
        for variant in sorted({e.variant for e in batch}):
            sizes = {(e.user, e.item): len(e.aspects)
                     for e in batch
                     if e.variant == variant and e.valid and e.aspects}
            if not sizes:
                continue
            randoms = mx.random_explanations(ranked_lists, sizes, corpus.r,
                                             seed=rng_seed)
            for e in randoms:
                e.variant = f"random-{variant}"
            batch.extend(randoms)
    report = mx.build_report(batch, truth, model, matrices, config.k,
                             config_hash=config.full_hash())

    os.makedirs(out_dir, exist_ok=True)
    mx.write_report(report, os.path.join(out_dir, "report.json"))
    mx.write_pair_csv(batch, truth, corpus, os.path.join(out_dir, "pairs.csv"))
    mx.write_profile_csv(report, os.path.join(out_dir, "profile.csv"))
    return report


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> int:
    started = _now()
    corpus, split, matrices = _load_pipeline_inputs(config)
    model = _load_model(config)
    rankings_file = _require(_rankings_path(config), "rankings")
    _, ranked_lists = read_rankings(rankings_file, corpus)
    expl_file = _require(_explanations_path(config), "explanations")
    meta, explanations = read_explanations(expl_file, corpus, tau=config.tau)
    if meta.get("config_hash") not in (None, config.full_hash()):
        raise ArtifactMismatchError(
            f"{expl_file} was produced under config {meta.get('config_hash')}, "
            f"current config is {config.full_hash()}")
    if not explanations:
        report = mx.EvalReport(variants={}, k=config.k,
                               config_hash=config.full_hash())
        os.makedirs(config.output, exist_ok=True)
        mx.write_report(report, os.path.join(config.output, "report.json"))
        _write_manifest(config, "evaluate", started, [expl_file],
                        [os.path.join(config.output, "report.json")])
        raise NotApplicable("explanation file is empty; report marked "
                            "not-applicable")
    report = _evaluate(config, explanations, corpus, split, matrices, model,
                       ranked_lists, config.output)
    for name, vr in report.variants.items():
        log.info("%s: fidelity %.4f, F1 %s, F_NS %s", name, vr.fidelity,
                 f"{vr.user.f1:.4f}" if vr.user.applicable else "n/a",
                 f"{vr.f_ns:.4f}" if vr.f_ns is not None else "n/a")
    _write_manifest(config, "evaluate", started,
                    [config.data, config.model_path(), expl_file],
                    [os.path.join(config.output, name)
                     for name in ("report.json", "pairs.csv", "profile.csv")])
    return EXIT_OK


def cmd_sweep(config: RunConfig, args: argparse.Namespace) -> int:
    started = _now()
    corpus, split, matrices = _load_pipeline_inputs(config)
    model = _load_model(config)
    rankings_file = _require(_rankings_path(config), "rankings")
    meta, ranked_lists = read_rankings(rankings_file, corpus)
    if meta.get("config_hash") != config.core_hash():
        raise ArtifactMismatchError(
            f"{rankings_file} config hash does not match the current run")

    sweep_dir = os.path.join(config.output, "sweep")
    os.makedirs(sweep_dir, exist_ok=True)
    summary_path = os.path.join(sweep_dir, "summary.csv")
    rows = []
    for lam in config.lambda_values():
        sub = replace(config, lam=lam,
                      output=os.path.join(sweep_dir, f"lambda_{lam:g}"))
        os.makedirs(sub.output, exist_ok=True)
        explanations = generate_explanations(sub, corpus, matrices, model,
                                             ranked_lists)
        write_explanations(explanations, corpus,
                           os.path.join(sub.output, "explanations.jsonl"),
                           config_hash=sub.full_hash())
        report = _evaluate(sub, explanations, corpus, split, matrices, model,
                           ranked_lists, sub.output)
        for variant in sub.variant_list():
            vr = report.variants.get(variant)
            if vr is None:
                continue
            valid = [e for e in explanations
                     if e.variant == variant and e.valid]
            rows.append({
                "lambda": lam,
                "variant": variant,
                "fidelity": vr.fidelity,
                "mean_complexity": (float(np.mean([e.complexity for e in valid]))
                                    if valid else 0.0),
                "mean_strength": (float(np.mean([e.strength for e in valid]))
                                  if valid else 0.0),
                "f1": vr.user.f1 if vr.user.applicable else "",
                "f_ns": vr.f_ns if vr.f_ns is not None else "",
            })
        log.info("lambda=%g done", lam)

    import csv as _csv
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=["lambda", "variant",
                                                 "fidelity", "mean_complexity",
                                                 "mean_strength", "f1", "f_ns"])
        writer.writeheader()
        writer.writerows(rows)
    log.info("sweep summary -> %s", summary_path)
    _write_manifest(config, "sweep", started,
                    [config.data, config.model_path(), rankings_file],
                    [summary_path])
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aspectcf",
        description="Counterfactual aspect explanations for top-K recommenders")
    parser.add_argument("--config", help="flat key=value configuration file")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    for key, typ in _FILE_KEYS.items():
        attr = _KEY_TO_ATTR[key]
        if typ is bool:
            common.add_argument(f"--{key}", dest=attr, default=None,
                                type=_parse_bool, metavar="BOOL")
        else:
            common.add_argument(f"--{key}", dest=attr, default=None, type=typ)

    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", parents=[common],
                             help="generate a planted synthetic corpus")
    p_synth.add_argument("--users", type=int, default=100)
    p_synth.add_argument("--items", type=int, default=500)
    p_synth.add_argument("--aspects", type=int, default=20)
    p_synth.add_argument("--aspects-per-user", type=int, default=4)
    p_synth.add_argument("--aspects-per-item", type=int, default=3)
    p_synth.add_argument("--density", type=float, default=0.02)
    p_synth.add_argument("--noise", type=float, default=0.0)
    p_synth.set_defaults(func=cmd_synth)

    for name, func, help_text in (
            ("ingest", cmd_ingest, "parse the data file and persist index maps"),
            ("train", cmd_train, "train the scoring network"),
            ("recommend", cmd_recommend, "write per-user top-K lists"),
            ("explain", cmd_explain, "generate counterfactual explanations"),
            ("evaluate", cmd_evaluate, "score an explanation file"),
            ("sweep", cmd_sweep, "explain+evaluate across the lambda grid")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        return args.func(config, args)
    except NotApplicable as exc:
        log.warning("%s", exc)
        return EXIT_NOT_APPLICABLE
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG_ERROR
    except (cp.CorpusFormatError, FileNotFoundError, ArtifactMismatchError,
            sy.InfeasibleSpecError, ValueError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT_ERROR
    except Exception as exc:  # pragma: no cover - defensive
        log.error("internal error: %s", exc, exc_info=True)
        return EXIT_INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
