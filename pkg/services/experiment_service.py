"""
services/experiment_service.py - Runs a declared experiment and writes its artifacts

One unit of work is one seed: it builds the population, trains or constructs
every defense, fits every attacker against it and scores all attackers on a
common set of held-out beacons. Seeds run in worker processes when
settings.WORKERS > 1; the report is assembled afterwards in the parent.

Artifacts under <output_dir>/<run_id>/:
    results.json        full report (config, hash, per-seed and aggregated values)
    roc_<cell>.csv      fpr,tpr of the cell's decisions pooled over seeds
    history_<cell>.csv  per-epoch training history of a trained defense or attacker
"""

import json
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from sqlalchemy.orm import Session

from config import settings
from models.experiment_run import CellResult, ExperimentRun
from models.mechanism import ReleaseMechanism
from models.population import MembershipPrior, Population
from schemas.experiment import AttackerSpec, DefenseSpec, ExperimentConfig, TRAINED_DEFENSES
from services.bayes import verify_theorem1_ordering
from services.evaluation import aggregate_seeds, config_hash, heterogeneous_kappa, matched_utility_dp, roc_auc
from services.learn import NeuralAttacker, TrainConfig, train_attacker_against, train_bne, train_lrt_defense
from services.lrt import (
    AdaptiveThresholdAttacker,
    FixedThresholdAttacker,
    calibrate_adaptive_offset,
    calibrate_threshold,
    default_adaptive_n,
    expected_beacon_size,
)
from services.mechanisms import (
    expected_utility_loss,
    gaussian_mechanism_theorem2,
    laplace_mechanism,
    sample_releases,
    zero_noise_mechanism,
)
from services.population import (
    AafDistribution,
    generate_population,
    load_population,
    sensitivity,
    synthesize_reference,
)
from utils.exceptions import EvaluationError, LabError
from utils.io import write_json
from utils.rng import as_generator, stream_seed

logger = logging.getLogger(__name__)

# stream labels for stream_seed(seed, label, ...)
_POPULATION, _KAPPA, _DEFENSE, _ATTACKER, _HOLDOUT, _UTILITY, _ORDERING = range(7)


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def attacker_label(spec: AttackerSpec) -> str:
    if spec.gamma == 0.5 and spec.sigma == "q":
        return spec.kind
    return f"{spec.kind}-g{spec.gamma:g}-{spec.sigma}"


def cell_name(defense: str, attacker: str) -> str:
    return f"{defense}__{attacker}"


# ── per-seed work ──────────────────────────────────────────────

def _population(config: ExperimentConfig, seed: int) -> Population:
    spec = config.population
    if spec.path:
        return load_population(spec.path)
    aaf = AafDistribution(**spec.aaf.model_dump())
    return generate_population(spec.num_individuals, spec.num_snvs, aaf, stream_seed(seed, _POPULATION))


def _train_config(config: ExperimentConfig, kappa, seed: int, gamma: float = 0.5) -> TrainConfig:
    t = config.training
    kappa = kappa.tolist() if np.ndim(kappa) and not np.all(kappa == kappa[0]) else float(np.ravel(kappa)[0])
    return TrainConfig(
        defender_lr=t.defender_lr,
        attacker_lr=t.attacker_lr,
        weight_decay=t.weight_decay,
        lr_decay=t.lr_decay,
        batch_size=t.batch_size,
        epochs=t.epochs,
        batches_per_epoch=t.batches_per_epoch,
        kappa=kappa,
        gamma=gamma,
        kappa_on_privacy=t.kappa_on_privacy,
        q_aux=t.q_aux,
        batch_norm=t.batch_norm,
        seed=seed,
        alpha=config.evaluation.alpha,
        calibration_samples=config.evaluation.calibration_samples,
        defender_hidden=t.defender_hidden,
        attacker_hidden=t.attacker_hidden,
    )


def _kappa_vector(spec: DefenseSpec, config: ExperimentConfig, population: Population, seed: int) -> np.ndarray:
    if spec.kappa == "heterogeneous":
        ev = config.evaluation
        return heterogeneous_kappa(
            population.num_snvs, ev.heterogeneous_fraction, ev.heterogeneous_kappa, stream_seed(seed, _KAPPA)
        )
    return np.full(population.num_snvs, float(spec.kappa or 0.0))


def _bne_sigma(config: ExperimentConfig) -> AttackerSpec:
    return next((a for a in config.attackers if a.kind == "bayes"), AttackerSpec(kind="bayes"))


@dataclass
class _Defense:
    mechanism: ReleaseMechanism
    kappa: np.ndarray
    attacker: Any = None  # BNE attacker network trained alongside a Bayesian defense
    match: Optional[dict] = None


def _build_defense(
    spec: DefenseSpec,
    index: int,
    config: ExperimentConfig,
    population: Population,
    priors: Dict[str, MembershipPrior],
    built: Dict[str, _Defense],
    seed: int,
    output_dir: Optional[Path],
) -> _Defense:
    q = priors["q"]
    rng_seed = stream_seed(seed, _DEFENSE, index)
    clip = True if spec.clip is None else spec.clip

    if spec.kind == "matched_dp":
        target = built[spec.match]
        match, mechanism = matched_utility_dp(
            target.mechanism, population, q, target.kappa, config.evaluation.utility_samples, rng_seed, clip=clip
        )
        if mechanism is None:
            raise EvaluationError("utility matching failed", {"defense": spec.name, "match": match.to_dict()})
        return _Defense(mechanism, target.kappa, match=match.to_dict())

    kappa = _kappa_vector(spec, config, population, seed)
    if spec.kind == "zero":
        return _Defense(zero_noise_mechanism(clip=spec.clip or False), kappa)
    if spec.kind == "laplace":
        sens = sensitivity(population.num_snvs, spec.k_min or expected_beacon_size(q))
        return _Defense(laplace_mechanism(spec.epsilon, sens, clip=clip), kappa)
    if spec.kind == "gaussian":
        mechanism = gaussian_mechanism_theorem2(spec.m_hat, population.num_snvs, spec.k_min)
        return _Defense(mechanism.with_clip(spec.clip or False), kappa)

    bayes = _bne_sigma(config)
    train = _train_config(config, kappa, rng_seed, bayes.gamma)
    if spec.kind == "bayes":
        result = train_bne(population, q, priors[bayes.sigma], train, rng_seed)
    else:
        result = train_lrt_defense(population, q, train, spec.kind.replace("_lrt", ""), rng_seed=rng_seed)
    if output_dir is not None:
        result.history.write_csv(output_dir / f"history_{_slug(spec.name)}_seed{seed}.csv")
    return _Defense(result.generator.as_mechanism(clip, label=spec.name), kappa, attacker=result.attacker)


def _build_attacker(
    spec: AttackerSpec,
    defense_spec: DefenseSpec,
    defense: _Defense,
    config: ExperimentConfig,
    population: Population,
    priors: Dict[str, MembershipPrior],
    seed: int,
    index: int,
    output_dir: Optional[Path],
):
    q = priors["q"]
    rng = as_generator(stream_seed(seed, _ATTACKER, index))
    beacon_size = expected_beacon_size(q)
    ev = config.evaluation

    if spec.kind == "bayes":
        bne = _bne_sigma(config)
        if defense.attacker is not None and (spec.gamma, spec.sigma) == (bne.gamma, bne.sigma):
            return NeuralAttacker(defense.attacker)
        against = "defender" if defense_spec.kind in TRAINED_DEFENSES else "dp"
        result = train_attacker_against(
            defense.mechanism, population, priors[spec.sigma],
            _train_config(config, defense.kappa, seed, spec.gamma), against, q, rng,
        )
        if output_dir is not None:
            label = cell_name(defense_spec.name, attacker_label(spec))
            result.history.write_csv(output_dir / f"history_{_slug(label)}_seed{seed}.csv")
        return NeuralAttacker(result.attacker)

    if spec.kind == "fixed_lrt":
        cal = calibrate_threshold(population, defense.mechanism, q, ev.alpha, ev.calibration_samples, rng, beacon_size)
        return FixedThresholdAttacker(population, cal.threshold, beacon_size)

    reference = synthesize_reference(population, population.num_individuals, rng)
    attacker = AdaptiveThresholdAttacker(population, reference, default_adaptive_n(reference.num_individuals), beacon_size)
    attacker.offset = calibrate_adaptive_offset(attacker, defense.mechanism, q, ev.alpha, ev.calibration_samples, rng).threshold
    return attacker


def _ordering_seed(config: ExperimentConfig, population: Population, priors, seed: int) -> Dict[str, Any]:
    spec = config.ordering
    out: Dict[str, Any] = {}
    for d_index, defense in enumerate(config.expanded_defenses()):
        mechanism = gaussian_mechanism_theorem2(defense.m_hat, population.num_snvs, defense.k_min).with_clip(False)
        for s_index, sigma in enumerate(spec.sigmas):
            report = verify_theorem1_ordering(
                mechanism,
                population,
                priors["q"],
                priors[sigma],
                alpha=spec.alpha,
                n_samples=spec.mc_samples,
                rng_seed=stream_seed(seed, _ORDERING, d_index, s_index),
                calibration_samples=spec.calibration_samples,
                n_se=spec.n_se,
            )
            out[f"{defense.name}__sigma-{sigma}"] = {**report.to_dict(), "holds": report.holds}
    return out


def run_seed(payload: Dict[str, Any], seed: int, output_dir: Optional[str] = None) -> Dict[str, Any]:
    """Everything one seed contributes to the report; picklable for worker processes."""
    config = ExperimentConfig.model_validate(payload)
    out = Path(output_dir) if output_dir else None
    population = _population(config, seed)
    k = population.num_individuals
    priors = {"q": MembershipPrior.bernoulli(k, config.population.beacon_rate), "uniform": MembershipPrior.uniform(k)}
    q = priors["q"]
    logger.info(f"🚀 Seed {seed}: K={k} m={population.num_snvs}")

    result: Dict[str, Any] = {"seed": seed, "defenses": {}, "cells": {}}
    if config.ordering is not None:
        result["ordering"] = _ordering_seed(config, population, priors, seed)

    built: Dict[str, _Defense] = {}
    for d_index, d_spec in enumerate(config.expanded_defenses()):
        defense = _build_defense(d_spec, d_index, config, population, priors, built, seed, out)
        built[d_spec.name] = defense

        utility = expected_utility_loss(
            defense.mechanism, population, q, np.ones(population.num_snvs),
            config.evaluation.utility_samples, stream_seed(seed, _UTILITY, d_index),
        )
        weighted = expected_utility_loss(
            defense.mechanism, population, q, defense.kappa,
            config.evaluation.utility_samples, stream_seed(seed, _UTILITY, d_index),
        )
        result["defenses"][d_spec.name] = {
            "kind": d_spec.kind,
            "mechanism": defense.mechanism.to_dict(),
            "utility_loss": utility.to_dict(),
            "weighted_utility_loss": weighted.to_dict(),
            "match": defense.match,
        }

        if not config.attackers:
            continue
        eval_rng = as_generator(stream_seed(seed, _HOLDOUT, d_index))
        holdout = q.sample(eval_rng, config.evaluation.eval_beacons)
        releases, _, _ = sample_releases(defense.mechanism, population, holdout, eval_rng)
        for a_index, a_spec in enumerate(config.attackers):
            attacker = _build_attacker(
                a_spec, d_spec, defense, config, population, priors, seed, d_index * 100 + a_index, out
            )
            decision = attacker.decide(releases)
            roc = roc_auc(decision.confidences, holdout)
            result["cells"][cell_name(d_spec.name, attacker_label(a_spec))] = {
                "defense": d_spec.name,
                "attacker": attacker_label(a_spec),
                "auc": roc.auc,
                "tpr": float(np.mean(decision.claims[holdout])),
                "fpr": float(np.mean(decision.claims[~holdout])),
                "confidences": decision.confidences.ravel().tolist(),
                "labels": holdout.ravel().astype(int).tolist(),
            }
            logger.info(f"🎯 Seed {seed} {d_spec.name} vs {attacker_label(a_spec)}: AUC={roc.auc:.4f}")
    return result


# ── report ─────────────────────────────────────────────────────

@dataclass
class ExperimentReport:
    run_id: str
    config: Dict[str, Any]
    config_hash: str
    seeds: List[int]
    cells: Dict[str, dict] = field(default_factory=dict)
    defenses: Dict[str, dict] = field(default_factory=dict)
    ordering: Dict[str, dict] = field(default_factory=dict)
    output_dir: Optional[str] = None

    def mean_aucs(self) -> Dict[str, float]:
        return {name: cell["auc"]["mean"] for name, cell in self.cells.items()}

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "scenario": self.config.get("scenario"),
            "config": self.config,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "cells": self.cells,
            "defenses": self.defenses,
            "ordering": self.ordering,
            "output_dir": self.output_dir,
        }


def _assemble(run_id: str, payload: dict, digest: str, seeds: List[int], per_seed: List[dict], out: Optional[Path]):
    report = ExperimentReport(run_id, payload, digest, seeds, output_dir=str(out) if out else None)

    for name in per_seed[0]["defenses"]:
        rows = [r["defenses"][name] for r in per_seed]
        report.defenses[name] = {
            "kind": rows[0]["kind"],
            "mechanism": rows[0]["mechanism"],
            "utility_loss": aggregate_seeds([r["utility_loss"]["value"] for r in rows]).to_dict(),
            "weighted_utility_loss": aggregate_seeds([r["weighted_utility_loss"]["value"] for r in rows]).to_dict(),
            "matches": [r["match"] for r in rows if r["match"]],
        }

    for name in per_seed[0]["cells"]:
        rows = [r["cells"][name] for r in per_seed]
        pooled = roc_auc(
            np.concatenate([r["confidences"] for r in rows]),
            np.concatenate([r["labels"] for r in rows]),
        )
        if out is not None:
            pooled.write_csv(out / f"roc_{_slug(name)}.csv")
        report.cells[name] = {
            "defense": rows[0]["defense"],
            "attacker": rows[0]["attacker"],
            "auc": aggregate_seeds([r["auc"] for r in rows]).to_dict(),
            "pooled_auc": pooled.auc,
            "tpr": aggregate_seeds([r["tpr"] for r in rows]).to_dict(),
            "fpr": aggregate_seeds([r["fpr"] for r in rows]).to_dict(),
        }

    for name in per_seed[0].get("ordering", {}):
        rows = [r["ordering"][name] for r in per_seed]
        report.ordering[name] = {
            "holds_per_seed": [row["holds"] for row in rows],
            "violations": sum(not row["holds"] for row in rows),
            "per_seed": rows,
        }
    return report


def _registry_row(db: Session, run_id: str, config: ExperimentConfig, digest: str, out: Optional[Path]) -> ExperimentRun:
    row = db.query(ExperimentRun).filter(ExperimentRun.run_id == run_id).first()
    if row is None:
        row = ExperimentRun(
            run_id=run_id,
            scenario=config.scenario,
            config_hash=digest,
            seeds=json.dumps(config.seeds),
            output_dir=str(out) if out else None,
        )
        db.add(row)
    row.status = "running"
    db.commit()
    return row


def new_run_id(config: ExperimentConfig) -> str:
    digest = config_hash(config.model_dump(mode="json"))
    return f"{_slug(config.name)}-{datetime.utcnow().strftime('%Y%m%dT%H%M%S%f')}-{digest[:8]}"


def run_experiment(
    config: ExperimentConfig,
    output_dir: Optional[str] = None,
    db: Optional[Session] = None,
    workers: Optional[int] = None,
    run_id: Optional[str] = None,
) -> ExperimentReport:
    payload = config.model_dump(mode="json")
    digest = config_hash(payload)
    run_id = run_id or new_run_id(config)
    out = Path(output_dir or settings.OUTPUT_DIR) / run_id
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or settings.WORKERS
    row = _registry_row(db, run_id, config, digest, out) if db is not None else None

    logger.info(f"🚀 Run {run_id}: {len(config.seeds)} seeds, {len(config.expanded_defenses())} defenses, "
                f"{len(config.attackers)} attackers (workers={workers})")
    try:
        jobs = [(payload, seed, str(out)) for seed in config.seeds]
        if workers > 1 and len(jobs) > 1:
            with Pool(processes=min(workers, len(jobs))) as pool:
                per_seed = pool.starmap(run_seed, jobs)
        else:
            per_seed = [run_seed(*job) for job in jobs]

        report = _assemble(run_id, payload, digest, list(config.seeds), per_seed, out)
        write_json(out / "results.json", report.to_dict())
        logger.info(f"💾 Wrote {out / 'results.json'}")
    except Exception as e:
        logger.error(f"❌ Run {run_id} failed: {e}", exc_info=True)
        if row is not None:
            row.status = "failed"
            row.error = str(e)
            row.finished_at = datetime.utcnow()
            db.commit()
        raise

    if row is not None:
        row.status = "finished"
        row.mean_auc_json = json.dumps(report.mean_aucs())
        row.finished_at = datetime.utcnow()
        for name, cell in report.cells.items():
            row.cells.append(CellResult(
                cell=name,
                attacker=cell["attacker"],
                defense=cell["defense"],
                auc_mean=cell["auc"]["mean"],
                auc_std=None if np.isnan(cell["auc"]["std"]) else cell["auc"]["std"],
                utility_loss=report.defenses[cell["defense"]]["utility_loss"]["mean"],
            ))
        if not report.cells:
            for name, defense in report.defenses.items():
                row.cells.append(CellResult(cell=name, defense=name, utility_loss=defense["utility_loss"]["mean"]))
        db.commit()
    logger.info(f"✅ Run {run_id} finished")
    return report


def load_report(path) -> dict:
    """results.json of a finished run (a run directory or the file itself)."""
    path = Path(path)
    if path.is_dir():
        path = path / "results.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise LabError(f"cannot read report: {e}", {"path": str(path)})


def report_lines(results: dict) -> List[str]:
    """Plain-text summary: one line per cell (AUC mean ± std) and per defense (utility)."""
    lines = [f"run {results['run_id']} (scenario={results.get('scenario')}, seeds={results['seeds']})"]
    for name, cell in results.get("cells", {}).items():
        auc = cell["auc"]
        lines.append(f"  {name:50s} AUC {auc['mean']:.4f} ± {auc['std']:.4f}  pooled {cell['pooled_auc']:.4f}")
    for name, defense in results.get("defenses", {}).items():
        u = defense["utility_loss"]
        lines.append(f"  {name:50s} E|δ| {u['mean']:.4f} ± {u['std']:.4f}")
    for name, check in results.get("ordering", {}).items():
        lines.append(f"  {name:50s} ordering violations {check['violations']}/{len(check['holds_per_seed'])}")
    return lines
