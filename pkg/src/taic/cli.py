"""Command-line interface: ``taic {simulate,evaluate,select} CONFIG.toml``.

The config is a TOML file; ``--seed``, ``--out`` and ``--replications``
override it. Outputs are CSV (17 significant digits), JSON and a
``manifest.json`` recording seed, version, warnings and numerical repairs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .criteria import CRITERIA, CriterionReport, criterion_report, select
from .data import (
    ByFile,
    ByTime,
    Coordinates,
    FixedEffectSpec,
    LongSchema,
    NoRandomEffects,
    RandomSplit,
    SpatialSchema,
    SubjectEffects,
    build_design,
    load_long_csv,
    load_spatial_csv,
    partition,
    subject_covariance,
)
from .model import Gpr, Lmm, ResidualMode, SquaredExponential, WeightedLmm, realize
from .simulate import SimulationConfig, run_experiment

log = logging.getLogger("taic")

OUT_ENV = "TAIC_OUTPUT_DIR"
WORKFLOWS = ("simulate", "evaluate", "select")
SCALES = ("per_observation", "2n")


class ConfigError(ValueError):
    pass


@dataclass
class ModelDecl:
    name: str
    fixed: FixedEffectSpec
    random: object
    covariance: dict


@dataclass
class RunConfig:
    workflow: str
    out: Path
    seed: int = 0
    r_mode: ResidualMode = ResidualMode.RESIDUAL
    scale: str = "per_observation"
    criteria: tuple = tuple(CRITERIA)
    # evaluate / select
    data: dict = field(default_factory=dict)
    split: object = None
    models: list = field(default_factory=list)
    # simulate
    subjects: tuple = (10, 20, 30)
    sigma2: tuple = (15.0, 20.0, 25.0)
    replications: int = 200
    n_jobs: int = 1
    redraw_covariates: bool = True
    bernoulli_per_subject: bool = False
    base_dir: Path = Path(".")
    source: Optional[str] = None


def _split_from(d: dict, base: Path):
    kind = d.get("type")
    if kind == "by_time":
        return ByTime(frozenset(d["holdout"]))
    if kind == "random":
        if "fraction" not in d:
            raise ConfigError("random split needs an explicit 'fraction'")
        return RandomSplit(float(d["fraction"]), int(d.get("seed", 0)))
    if kind == "by_file":
        return ByFile(str(base / d["training"]), str(base / d["prediction"]))
    raise ConfigError(f"unknown split type {kind!r}; use by_time, random or by_file")


def _random_from(d: Optional[dict], cov_type: str):
    if d is None:
        if cov_type in ("lmm", "weighted_lmm"):
            return SubjectEffects(intercept=True)
        return Coordinates()
    kind = d.get("type")
    if kind == "subject":
        return SubjectEffects(bool(d.get("intercept", True)), tuple(d.get("slopes", ())))
    if kind == "coordinates":
        cols = d.get("columns")
        return Coordinates(None if cols is None else tuple(cols), bool(d.get("standardize", False)))
    if kind == "none":
        return NoRandomEffects()
    raise ConfigError(f"unknown random-effect type {kind!r}; use subject, coordinates or none")


def load_config(path, workflow: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Parse a TOML run config; raises :class:`ConfigError` on invalid content."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    raw.update(overrides)
    wf = raw.get("workflow", workflow)
    if workflow is not None and wf != workflow:
        raise ConfigError(f"config declares workflow {wf!r} but {workflow!r} was requested")
    if wf not in WORKFLOWS:
        raise ConfigError(f"unknown workflow {wf!r}")
    base = path.parent
    if "out" in overrides:
        out = Path(overrides["out"])
    elif raw.get("out"):
        out = base / raw["out"]
    else:
        out = Path(os.environ.get(OUT_ENV) or "taic-output")
    criteria = tuple(raw.get("criteria", CRITERIA))
    bad = [c for c in criteria if c not in CRITERIA]
    if bad:
        raise ConfigError(f"unknown criteria {bad}; known: {list(CRITERIA)}")
    scale = raw.get("scale", "per_observation")
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}")
    try:
        r_mode = ResidualMode(raw.get("r_mode", "residual"))
    except ValueError:
        raise ConfigError(f"unknown r_mode {raw.get('r_mode')!r}") from None
    cfg = RunConfig(
        workflow=wf,
        out=out,
        seed=int(raw.get("seed", 0)),
        r_mode=r_mode,
        scale=scale,
        criteria=criteria,
        base_dir=base,
        source=str(path),
    )
    if wf == "simulate":
        cfg.subjects = tuple(int(s) for s in np.atleast_1d(raw.get("subjects", cfg.subjects)))
        cfg.sigma2 = tuple(float(s) for s in np.atleast_1d(raw.get("sigma2", cfg.sigma2)))
        cfg.replications = int(raw.get("replications", cfg.replications))
        cfg.n_jobs = int(raw.get("n_jobs", 1))
        cfg.redraw_covariates = bool(raw.get("redraw_covariates", True))
        cfg.bernoulli_per_subject = bool(raw.get("bernoulli_per_subject", False))
        if cfg.replications < 1:
            raise ConfigError("replications must be >= 1")
        return cfg

    data = raw.get("data")
    if not isinstance(data, dict) or "path" not in data:
        raise ConfigError("[data] section with a 'path' is required")
    cfg.data = data
    if "split" not in raw:
        raise ConfigError("[split] section is required")
    cfg.split = _split_from(raw["split"], base)
    models = raw.get("models", [])
    if not models:
        raise ConfigError("at least one [[models]] entry is required")
    for i, m in enumerate(models):
        cov = m.get("covariance")
        if not isinstance(cov, dict) or "type" not in cov:
            raise ConfigError(f"model {i}: [models.covariance] with a 'type' is required")
        cfg.models.append(
            ModelDecl(
                name=str(m.get("name", f"model{i + 1}")),
                fixed=FixedEffectSpec(tuple(m.get("terms", ())), bool(m.get("intercept", True))),
                random=_random_from(m.get("random"), cov["type"]),
                covariance=cov,
            )
        )
    if len({m.name for m in cfg.models}) != len(cfg.models):
        raise ConfigError("model names must be unique")
    return cfg


# -- helpers -----------------------------------------------------------------------


def _fmt(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(cfg: RunConfig, artifacts, warn, extra=None) -> dict:
    m = {
        "workflow": cfg.workflow,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.source,
        "r_mode": cfg.r_mode.value,
        "scale": cfg.scale,
        "artifacts": sorted(artifacts),
        "warnings": warn,
    }
    m.update(extra or {})
    return m


def _load_table(cfg: RunConfig):
    d = cfg.data
    kind = d.get("kind", "long")
    path = cfg.base_dir / d["path"]
    covs = tuple(d.get("covariates", ()))
    cats = tuple(d.get("categorical", ()))
    log_resp = bool(d.get("log_response", False))
    if kind == "long":
        schema = LongSchema(d.get("id", "id"), d.get("time", "time"), d["response"], covs, cats, log_resp)
        return load_long_csv(path, schema)
    if kind == "spatial":
        schema = SpatialSchema(tuple(d["coords"]), d["response"], covs, cats, log_resp)
        return load_spatial_csv(path, schema)
    raise ConfigError(f"unknown data kind {kind!r}; use long or spatial")


def _spec_for(decl: ModelDecl, design, table, split):
    cov = decl.covariance
    kind = cov["type"]
    sigma2 = float(cov["sigma2"])
    if kind in ("lmm", "weighted_lmm"):
        if isinstance(decl.random, SubjectEffects):
            block = np.atleast_2d(np.asarray(cov["G"], dtype=float))
            k = decl.random.block_size
            if block.shape != (k, k):
                raise ConfigError(f"model {decl.name}: G must be {k}x{k} per subject")
            G = subject_covariance(block, design.q // k)
        elif isinstance(decl.random, NoRandomEffects):
            G = np.zeros((0, 0))
        else:
            G = np.atleast_2d(np.asarray(cov["G"], dtype=float))
        if kind == "lmm":
            return Lmm(G, sigma2)
        col = cov["weights"]
        train, pred = partition(table, split)
        src = train if isinstance(split, ByFile) else table
        w = [src.value(r, col) for r in train.rows]
        w_star = [src.value(r, col) for r in pred.rows]
        return WeightedLmm(G, sigma2, np.array(w, dtype=float), np.array(w_star, dtype=float))
    if kind == "gpr":
        kernel = SquaredExponential(float(cov["sigma_f2"]), tuple(cov["length_scales"]))
        return Gpr(kernel, sigma2)
    raise ConfigError(f"model {decl.name}: unknown covariance type {kind!r}")


def _evaluate_models(cfg: RunConfig):
    table = _load_table(cfg)
    names, reports, jitter = [], [], []
    for decl in cfg.models:
        design = build_design(table, cfg.split, decl.fixed, decl.random)
        spec = _spec_for(decl, design, table, cfg.split)
        bundle = realize(spec, design, cfg.r_mode)
        rep = criterion_report(design, bundle)
        if bundle.jitter > 0:
            jitter.append({"model": decl.name, "jitter": bundle.jitter, "by_matrix": bundle.jitter_by_matrix})
        if cfg.scale == "2n":
            rep = rep.scaled(2 * design.n)
        names.append(decl.name)
        reports.append(rep)
    label = getattr(table.schema, "response_label", None)
    return names, reports, jitter, label


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ----------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    artifacts, warn, jitter_events = [], [], []
    failed = 0
    setups = {}
    for S in cfg.subjects:
        for s2 in cfg.sigma2:
            seed = int(np.random.SeedSequence([cfg.seed, S, int(round(s2 * 1000))]).generate_state(1)[0])
            sim_cfg = SimulationConfig(
                subjects=S,
                sigma2=s2,
                replications=cfg.replications,
                seed=seed,
                redraw_covariates=cfg.redraw_covariates,
                bernoulli_per_subject=cfg.bernoulli_per_subject,
                r_mode=cfg.r_mode,
            )
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                summary = run_experiment(sim_cfg, n_jobs=cfg.n_jobs)
            warn += [str(w.message) for w in caught]
            scale = 2 * len(sim_cfg.train_times) * S if cfg.scale == "2n" else 1.0
            d = out / sim_cfg.label
            d.mkdir(exist_ok=True)
            summary.to_csv(d / "replications.csv", scale=scale)
            payload = summary.summary_dict(scale=scale)
            _write_json(d / "summary.json", payload)
            artifacts += [f"{sim_cfg.label}/replications.csv", f"{sim_cfg.label}/summary.json"]
            setups[sim_cfg.label] = {
                "risk_of_selected": payload["risk_of_selected"],
                "agreement_rate": payload["agreement_rate"],
                "replications": payload["replications"],
            }
            failed += len(summary.failures)
            jitter_events += [{"setup": sim_cfg.label, "replication": r, "jitter": j} for r, j in summary.jitter_events]
            if summary.jitter_events:
                warn.append(f"{sim_cfg.label}: jitter applied in {len(summary.jitter_events)} replications")
            log.info("%s done (%d replications)", sim_cfg.label, summary.replications)
    _write_json(out / "summary.json", setups)
    artifacts.append("summary.json")
    _write_json(
        out / "manifest.json",
        _manifest(cfg, artifacts, warn, {"failed_replications": failed, "jitter_events": jitter_events,
                                         "replications": cfg.replications}),
    )
    return 0


EVAL_COLUMNS = ("tai", "cai", "mai", "loss_opt_t")


def _write_eval_csv(path: Path, names, reports) -> bool:
    has_truth = all(r.holdout_neg_loglik is not None for r in reports)
    cols = list(EVAL_COLUMNS) + (["holdout_neg_loglik"] if has_truth else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", *cols])
        for nm, r in zip(names, reports):
            w.writerow([nm, *(_fmt(getattr(r, c)) for c in cols)])
    return has_truth


def _jitter_warnings(jitter) -> list:
    return [f"model {j['model']}: covariance repaired with jitter {j['jitter']:.3g}" for j in jitter]


def cmd_evaluate(cfg: RunConfig) -> int:
    names, reports, jitter, label = _evaluate_models(cfg)
    out = _prepare_out(cfg)
    has_truth = _write_eval_csv(out / "evaluate.csv", names, reports)
    _write_json(
        out / "evaluate.json",
        {
            "response": label,
            "ground_truth": has_truth,
            "models": [{"name": nm, **r.as_dict()} for nm, r in zip(names, reports)],
        },
    )
    _write_json(
        out / "manifest.json",
        _manifest(cfg, ["evaluate.csv", "evaluate.json"], _jitter_warnings(jitter), {"jitter_events": jitter}),
    )
    return 0


def cmd_select(cfg: RunConfig) -> int:
    names, reports, jitter, label = _evaluate_models(cfg)
    result = select(names, reports, cfg.criteria)
    out = _prepare_out(cfg)
    for crit in cfg.criteria:
        tie = f"  (tie: {', '.join(result.ties[crit])})" if crit in result.ties else ""
        print(f"{crit}: {result.chosen[crit]}{tie}")
    payload = result.as_dict()
    payload["response"] = label
    payload["tie"] = {c: c in result.ties for c in cfg.criteria}
    _write_json(out / "selection.json", payload)
    _write_json(
        out / "manifest.json",
        _manifest(cfg, ["selection.json"], _jitter_warnings(jitter), {"jitter_events": jitter}),
    )
    return 0


COMMANDS = {"simulate": cmd_simulate, "evaluate": cmd_evaluate, "select": cmd_select}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="taic", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in WORKFLOWS:
        p = sub.add_parser(name)
        p.add_argument("config", help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--replications", type=int)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(
            args.config,
            args.command,
            {"seed": args.seed, "out": args.out, "replications": args.replications},
        )
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        msg = f"missing config key {exc.args[0]!r}" if isinstance(exc, KeyError) else exc
        print(f"taic {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
