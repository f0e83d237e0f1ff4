"""
Experiment orchestration behind the CLI: builds worlds, models and
pipelines from a config dict and returns JSON-ready reports.

Reports are deterministic functions of their echoed config, so re-running a
report's ``config`` reproduces it byte for byte.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import ABSTAIN, __version__
from .adapt import AdaptConfig, finetune_classifier, personalize, run_adaptation, synthesize_reference_set, write_curve
from .attack import AttackConfig, empirical_eval, summarize
from .classifier import BayesClassifier, NeuralClassifier, train_classifier
from .config import float_list, int_list, provenance
from .data import (Dataset, GmmWorld, load_csv_dataset, make_gmm_world, normalize, sample_dataset,
                   write_world)
from .denoiser import (ADAPT, EMPTY, AnalyticDenoiser, Conditioning, IdentityDenoiser, NeuralDenoiser,
                       denoise_one_step, pretrain_denoiser)
from .errors import ConfigError
from .schedule import build_schedule, effective_sigma
from .smoothing import DenoisedClassifier, SmoothingConfig, certify_many


# ---------------------------------------------------------------- metrics

def certified_accuracy(records, epsilon: float) -> float:
    """Fraction of records certified correct with radius strictly above ``epsilon``."""
    if not records:
        return 0.0
    return sum(r["outcome"] == r["label"] and r["radius"] > epsilon for r in records) / len(records)


def average_certified_radius(records) -> float:
    if not records:
        return 0.0
    return math.fsum(r["radius"] if r["outcome"] == r["label"] else 0.0 for r in records) / len(records)


def certify_aggregates(records, epsilons) -> dict:
    n = len(records)
    return {
        "n": n,
        "acr": average_certified_radius(records),
        "certified_accuracy": {repr(float(e)): certified_accuracy(records, e) for e in epsilons},
        "clean_accuracy": sum(r["outcome"] == r["label"] for r in records) / n if n else 0.0,
        "abstain_rate": sum(r["outcome"] == ABSTAIN for r in records) / n if n else 0.0,
    }


# ---------------------------------------------------------------- builders

def smoothing_config(cfg) -> SmoothingConfig:
    return SmoothingConfig(cfg["smoothing.sigma"], cfg["smoothing.n0"], cfg["smoothing.n"],
                           cfg["smoothing.alpha"], cfg["smoothing.batch"], cfg["smoothing.n_predict"])


def build_world(cfg) -> GmmWorld | None:
    if cfg["data.source"] == "gmm":
        return make_gmm_world(cfg["data.K"], cfg["data.d"], cfg["data.gamma"], cfg["data.world_seed"])
    if cfg["data.source"] == "csv":
        return None
    raise ConfigError(f"unknown data.source {cfg['data.source']!r}")


def _balanced(world: GmmWorld, total: int, split: str, seed: int) -> Dataset:
    per_class = max(1, math.ceil(total / world.K))
    ds = sample_dataset(world, per_class, seed, split)
    return Dataset(ds.X[:total], ds.y[:total], split)


def build_eval_set(cfg, world) -> Dataset:
    if world is not None:
        return _balanced(world, cfg["data.n_eval"], "eval", cfg["data.world_seed"])
    return load_csv_dataset(_existing(cfg["data.csv"], "data.csv"))


def build_train_set(cfg, world) -> Dataset:
    if world is not None:
        return _balanced(world, cfg["data.n_train"], "train", cfg["data.world_seed"])
    return load_csv_dataset(_existing(cfg["data.csv_train"], "data.csv_train"), "train")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not path or not p.is_file():
        raise ConfigError(f"{what} file {path!r} not found")
    return p


def build_classifier(cfg, world):
    kind = cfg["classifier.kind"]
    if kind == "bayes":
        if world is None:
            raise ConfigError("the Bayes classifier needs a gmm world")
        return BayesClassifier(world)
    if kind == "neural":
        if cfg["classifier.checkpoint"]:
            return NeuralClassifier.load(_existing(cfg["classifier.checkpoint"], "classifier checkpoint"))
        train = build_train_set(cfg, world)
        K = world.K if world is not None else train.num_classes
        return train_classifier(train, K, hidden=tuple(int_list(cfg["classifier.hidden"])),
                                steps=cfg["classifier.steps"], lr=cfg["classifier.lr"],
                                seed=cfg["classifier.seed"])
    raise ConfigError(f"unknown classifier.kind {kind!r}")


def build_denoiser(cfg, world, schedule):
    kind = cfg["denoiser.kind"]
    if kind == "identity":
        return IdentityDenoiser(schedule)
    if kind == "analytic":
        if world is None:
            raise ConfigError("the analytic denoiser needs a gmm world")
        return AnalyticDenoiser(world.in_model_space(), schedule)
    if kind == "neural":
        den = NeuralDenoiser.load(_existing(cfg["denoiser.checkpoint"], "denoiser checkpoint"))
        if den.schedule.T != schedule.T or den.schedule.kind != schedule.kind:
            raise ConfigError("denoiser checkpoint was trained with a different schedule")
        return den
    raise ConfigError(f"unknown denoiser.kind {kind!r}")


def build_schedule_from(cfg):
    return build_schedule(cfg["schedule.kind"], cfg["schedule.T"])


def _cond(cfg) -> Conditioning:
    try:
        return Conditioning.parse(cfg["denoiser.cond"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _report(command, cfg, records, aggregates, **extra) -> dict:
    report = {
        "command": command,
        "version": __version__,
        "seed": cfg["run.seed"],
        "config": provenance(cfg),
        "aggregates": aggregates,
        "records": records,
    }
    report.update(extra)
    return report


def certificate_records(certs, labels, scfg: SmoothingConfig, seed: int) -> list[dict]:
    return [
        {"index": i, "label": int(y), "outcome": int(c.outcome), "pA_lower": float(c.pA_lower),
         "radius": float(c.radius), "n0": scfg.n0, "n": scfg.n, "alpha": scfg.alpha,
         "sigma": scfg.sigma, "seed": seed}
        for i, (c, y) in enumerate(zip(certs, labels))
    ]


def certify_pipeline(pipeline, data: Dataset, scfg: SmoothingConfig, seed: int, workers: int = 1) -> list[dict]:
    certs = certify_many(pipeline, data.X, scfg, seed, pipeline.num_classes, workers)
    return certificate_records(certs, data.y, scfg, seed)


# ---------------------------------------------------------------- commands

def run_certify(cfg) -> dict:
    schedule = build_schedule_from(cfg)
    world = build_world(cfg)
    data = build_eval_set(cfg, world)
    scfg = smoothing_config(cfg)
    pipeline = DenoisedClassifier(build_denoiser(cfg, world, schedule), build_classifier(cfg, world),
                                  scfg.sigma, schedule, cfg["denoiser.k"], _cond(cfg))
    records = certify_pipeline(pipeline, data, scfg, cfg["run.seed"], cfg["runtime.workers"])
    return _report("certify", cfg, records, certify_aggregates(records, float_list(cfg["report.epsilons"])))


def run_attack(cfg) -> dict:
    schedule = build_schedule_from(cfg)
    world = build_world(cfg)
    data = build_eval_set(cfg, world)
    scfg = smoothing_config(cfg)
    pipeline = DenoisedClassifier(build_denoiser(cfg, world, schedule), build_classifier(cfg, world),
                                  scfg.sigma, schedule, cfg["denoiser.k"], _cond(cfg))
    radii = None
    if cfg["attack.certify"]:
        cert = certify_pipeline(pipeline, data, scfg, cfg["run.seed"], cfg["runtime.workers"])
        radii = [r["radius"] if r["outcome"] == r["label"] else 0.0 for r in cert]
    records, aggregates = [], {}
    for eps in float_list(cfg["attack.epsilons"]):
        atk = AttackConfig(eps, cfg["attack.steps"], cfg["attack.m_test"], cfg["run.seed"])
        recs, summary = empirical_eval(pipeline, data.X, data.y, scfg, atk, cfg["runtime.workers"])
        if radii is not None:
            for r in recs:
                r.certified_radius = radii[r.index]
            summary["certified_accuracy"] = sum(rad > eps for rad in radii) / len(radii)
        aggregates[repr(float(eps))] = summary
        records += [r.to_json() for r in recs]
    return _report("attack", cfg, records, aggregates)


def run_ablate_k(cfg) -> dict:
    grid = float_list(cfg["ablate.k_grid"])
    if not grid:
        raise ConfigError("ablate.k_grid is empty")
    schedule = build_schedule_from(cfg)
    world = build_world(cfg)
    data = build_eval_set(cfg, world)
    scfg = smoothing_config(cfg)
    denoiser = build_denoiser(cfg, world, schedule)
    classifier = build_classifier(cfg, world)
    epsilons = float_list(cfg["report.epsilons"])
    rows, records = [], []
    for k in grid:
        pipeline = DenoisedClassifier(denoiser, classifier, scfg.sigma, schedule, k, _cond(cfg))
        recs = certify_pipeline(pipeline, data, scfg, cfg["run.seed"], cfg["runtime.workers"])
        agg = certify_aggregates(recs, epsilons)
        rows.append({"k": k, **agg})
        records += [{**r, "k": k} for r in recs]
    return _report("ablate-k", cfg, records, {"rows": rows})


def adaptation_config(cfg) -> AdaptConfig:
    return AdaptConfig(lam=cfg["adapt.lambda"], steps=cfg["adapt.steps"],
                       classifier_steps=cfg["adapt.classifier_steps"], lr_denoiser=cfg["adapt.lr_denoiser"],
                       lr_classifier=cfg["adapt.lr_classifier"], momentum=cfg["adapt.momentum"],
                       batch=cfg["adapt.batch"], mode=cfg["adapt.mode"], k=cfg["denoiser.k"],
                       seed=cfg["run.seed"])


def run_adapt(cfg, checkpoint_dir=None) -> dict:
    """
    Before/after certification around self-adaptation.

    Rows: ``zero-shot`` (empty prompt, original models), then for staged mode
    ``adapt-denoiser`` (personalized denoiser, original classifier) and
    ``adapt-both``; joint mode reports ``adapt-both`` only.
    """
    if cfg["denoiser.kind"] != "neural":
        raise ConfigError("adaptation needs denoiser.kind = neural")
    schedule = build_schedule_from(cfg)
    world = build_world(cfg)
    if world is None:
        raise ConfigError("reference-set synthesis needs a gmm world as the class-conditional generator")
    data = build_eval_set(cfg, world)
    scfg = smoothing_config(cfg)
    den = build_denoiser(cfg, world, schedule)
    clf = build_classifier(cfg, world)
    if not isinstance(clf, NeuralClassifier):
        raise ConfigError("adaptation needs classifier.kind = neural")
    acfg = adaptation_config(cfg)
    refset = synthesize_reference_set(world, range(world.K), cfg["adapt.shots"], cfg["run.seed"])
    epsilons = float_list(cfg["report.epsilons"])
    seed, workers, k = cfg["run.seed"], cfg["runtime.workers"], cfg["denoiser.k"]

    def evaluate(d, c, cond):
        return certify_pipeline(DenoisedClassifier(d, c, scfg.sigma, schedule, k, cond), data, scfg, seed, workers)

    stages = [("zero-shot", evaluate(den, clf, EMPTY))]
    curve: list = []
    if acfg.mode == "staged":
        den_star = personalize(den, clf, refset, acfg, curve)
        stages.append(("adapt-denoiser", evaluate(den_star, clf, ADAPT)))
        clf_star = finetune_classifier(den_star, clf, refset, acfg, curve)
    else:
        result = run_adaptation(den, clf, refset, acfg)
        den_star, clf_star, curve = result.denoiser, result.classifier, result.curve
    stages.append(("adapt-both", evaluate(den_star, clf_star, ADAPT)))

    if checkpoint_dir:
        out = Path(checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        den_star.save(out / "denoiser_adapted.bin")
        clf_star.save(out / "classifier_adapted.bin")
        write_curve(curve, out / "adapt_curve.csv")

    rows, records = [], []
    base_acr = None
    for name, recs in stages:
        agg = certify_aggregates(recs, epsilons)
        base_acr = agg["acr"] if base_acr is None else base_acr
        rows.append({"stage": name, "delta_acr": agg["acr"] - base_acr, **agg})
        records += [{**r, "stage": name} for r in recs]
    return _report("adapt", cfg, records, {"rows": rows})


def pretrain_data(cfg, world) -> np.ndarray:
    n, d = cfg["pretrain.n_train"], cfg["data.d"] if world is None else world.d
    if cfg["pretrain.data"] == "world":
        if world is None:
            raise ConfigError("pretrain.data = world needs a gmm world")
        return normalize(_balanced(world, n, "train", cfg["data.world_seed"] + 7919).X)
    if cfg["pretrain.data"] == "uniform":
        rng = np.random.default_rng(np.random.SeedSequence([cfg["run.seed"], 0x0F1]))
        return rng.uniform(-1.0, 1.0, size=(n, d))
    raise ConfigError(f"unknown pretrain.data {cfg['pretrain.data']!r}")


def denoising_mse(denoiser, world: GmmWorld, schedule, sigma: float, k: float, n: int = 1000, seed: int = 0) -> float:
    """Mean squared error per coordinate of one-step denoising at input-space level ``sigma``."""
    data = _balanced(world, n, "eval", seed)
    x = normalize(data.X)
    s = effective_sigma(sigma)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3E5]))
    x_hat = x + s * rng.standard_normal(x.shape)
    return float(((denoise_one_step(denoiser, x_hat, s, schedule, k) - x) ** 2).mean())


def run_pretrain_denoiser(cfg) -> dict:
    out = cfg["denoiser.checkpoint"]
    if not out:
        raise ConfigError("pretrain-denoiser writes to denoiser.checkpoint, which is empty")
    schedule = build_schedule_from(cfg)
    world = build_world(cfg)
    train_x = pretrain_data(cfg, world)
    K = world.K if world is not None else cfg["data.K"]
    den = pretrain_denoiser(train_x, K, schedule, steps=cfg["pretrain.steps"], lr=cfg["pretrain.lr"],
                            batch=cfg["pretrain.batch"], hidden=tuple(int_list(cfg["pretrain.hidden"])),
                            seed=cfg["run.seed"], k=cfg["denoiser.k"], blur_window=cfg["pretrain.blur"])
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    den.save(out)
    rows = []
    if world is not None:
        wm = world.in_model_space()
        for sigma in (0.25, 0.5):
            row = {"sigma": sigma}
            for name, d in (("neural", den), ("identity", IdentityDenoiser(schedule)),
                            ("analytic", AnalyticDenoiser(wm, schedule))):
                row[name] = denoising_mse(d, world, schedule, sigma, cfg["denoiser.k"],
                                          seed=cfg["data.world_seed"] + 1)
            rows.append(row)
        write_world(world, Path(out).with_name(Path(out).name + ".world"))
    return _report("pretrain-denoiser", cfg, [], {"mse": rows}, checkpoint=str(out))


# ---------------------------------------------------------------- recompute

def recompute(report: dict) -> dict:
    """Rebuild a report's aggregates from its per-example records."""
    command, records, cfg = report["command"], report["records"], report["config"]
    epsilons = float_list(cfg["report.epsilons"])
    if command == "certify":
        return certify_aggregates(records, epsilons)
    if command == "ablate-k":
        rows = []
        for k in float_list(cfg["ablate.k_grid"]):
            recs = [r for r in records if r["k"] == k]
            rows.append({"k": k, **certify_aggregates(recs, epsilons)})
        return {"rows": rows}
    if command == "adapt":
        rows, base = [], None
        for stage in dict.fromkeys(r["stage"] for r in records):
            agg = certify_aggregates([r for r in records if r["stage"] == stage], epsilons)
            base = agg["acr"] if base is None else base
            rows.append({"stage": stage, "delta_acr": agg["acr"] - base, **agg})
        return {"rows": rows}
    if command == "attack":
        from .attack import EvalRecord
        out = {}
        for eps in float_list(cfg["attack.epsilons"]):
            recs = [EvalRecord(**r) for r in records if r["epsilon"] == eps]
            summary = summarize(recs)
            if recs and recs[0].certified_radius is not None:
                summary["certified_accuracy"] = sum(r.certified_radius > eps for r in recs) / len(recs)
            out[repr(float(eps))] = summary
        return out
    if command == "pretrain-denoiser":
        return report["aggregates"]
    raise ValueError(f"unknown report command {command!r}")


def dumps(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"
