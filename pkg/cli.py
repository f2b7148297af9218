"""
cli.py - Command line for the beacon game lab

    python cli.py generate --num-individuals 200 --num-snvs 500 --seed 0 --out pop.txt
    python cli.py train --population pop.txt --game bne --kappa 1.5 --out ckpt/
    python cli.py attack --population pop.txt --defense laplace --epsilon 600
    python cli.py run --scenario bayes-kappa0 --seeds 0 1 2 --out runs/
    python cli.py analyze tradeoff --mu 1 --alpha 0.05
    python cli.py report runs/<run_id>
    python cli.py serve --port 8000

Exit status 2 on any LabError (bad input, failed calibration, divergence).
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from config import settings
from utils.exceptions import LabError
from utils.io import to_json
from utils.logging_setup import configure_logging

logger = logging.getLogger("cli")


def _print(payload) -> None:
    print(to_json(payload))


# ── generate ───────────────────────────────────────────────────

def cmd_generate(args) -> int:
    from services.population import AafDistribution, generate_population, save_population

    aaf = AafDistribution(kind=args.aaf_kind, a=args.aaf_a, b=args.aaf_b, low=args.aaf_low, high=args.aaf_high)
    population = generate_population(args.num_individuals, args.num_snvs, aaf, args.seed)
    save_population(population, args.out)
    return 0


# ── train ──────────────────────────────────────────────────────

def cmd_train(args) -> int:
    from models.population import MembershipPrior
    from services.learn import TrainConfig, save_checkpoint, train_bne, train_lrt_defense
    from services.population import load_population

    population = load_population(args.population)
    k = population.num_individuals
    q = MembershipPrior.bernoulli(k, args.beacon_rate)
    sigma = q if args.sigma == "q" else MembershipPrior.uniform(k)
    config = TrainConfig(
        kappa=args.kappa,
        gamma=args.gamma,
        epochs=args.epochs,
        batch_size=args.batch_size,
        batches_per_epoch=args.batches_per_epoch,
        defender_lr=args.defender_lr,
        attacker_lr=args.attacker_lr,
        seed=args.seed,
    )
    if args.game == "bne":
        result = train_bne(population, q, sigma, config)
    else:
        result = train_lrt_defense(population, q, config, args.game.replace("-lrt", ""))
    out = save_checkpoint(args.out, result, config)
    result.history.write_csv(Path(out) / "history.csv")
    _print({"checkpoint": str(out), "final": result.history.final, "info": result.info})
    return 0


# ── attack ─────────────────────────────────────────────────────

def _defense_from_args(args, population, q):
    from services.learn import load_checkpoint
    from services.lrt import expected_beacon_size
    from services.mechanisms import gaussian_mechanism_theorem2, laplace_mechanism, zero_noise_mechanism
    from services.population import sensitivity

    if args.defense == "zero":
        return zero_noise_mechanism(clip=args.clip), None
    if args.defense == "laplace":
        sens = sensitivity(population.num_snvs, args.k_min or expected_beacon_size(q))
        return laplace_mechanism(args.epsilon, sens, clip=args.clip), None
    if args.defense == "gaussian":
        return gaussian_mechanism_theorem2(args.m_hat, population.num_snvs, args.k_min or expected_beacon_size(q)), None
    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.generator is None:
        raise LabError("checkpoint has no generator", {"checkpoint": args.checkpoint})
    return checkpoint.generator.as_mechanism(clip=True), checkpoint.attacker


def cmd_attack(args) -> int:
    from models.population import MembershipPrior
    from services.evaluation import roc_auc
    from services.learn import NeuralAttacker, TrainConfig, train_attacker_against
    from services.lrt import (
        AdaptiveThresholdAttacker,
        FixedThresholdAttacker,
        calibrate_adaptive_offset,
        calibrate_threshold,
        default_adaptive_n,
        expected_beacon_size,
    )
    from services.mechanisms import sample_releases
    from services.population import load_population, synthesize_reference
    from utils.rng import spawn

    population = load_population(args.population)
    q = MembershipPrior.bernoulli(population.num_individuals, args.beacon_rate)
    mechanism, trained_attacker = _defense_from_args(args, population, q)
    beacon_size = expected_beacon_size(q)
    fit_rng, eval_rng = spawn(args.seed, 2)

    holdout = q.sample(eval_rng, args.beacons)
    releases, _, _ = sample_releases(mechanism, population, holdout, eval_rng)
    results = {}
    for kind in args.attackers:
        extra = {}
        if kind == "bayes":
            model = trained_attacker
            if model is None:
                config = TrainConfig(epochs=args.epochs, gamma=args.gamma, seed=args.seed)
                model = train_attacker_against(mechanism, population, q, config, "dp", q, fit_rng).attacker
            attacker = NeuralAttacker(model)
        elif kind == "fixed-lrt":
            cal = calibrate_threshold(population, mechanism, q, args.alpha, args.calibration_samples, fit_rng, beacon_size)
            attacker = FixedThresholdAttacker(population, cal.threshold, beacon_size)
            extra = {"threshold": cal.threshold}
        else:
            reference = synthesize_reference(population, population.num_individuals, fit_rng)
            attacker = AdaptiveThresholdAttacker(
                population, reference, default_adaptive_n(reference.num_individuals), beacon_size
            )
            cal = calibrate_adaptive_offset(attacker, mechanism, q, args.alpha, args.calibration_samples, fit_rng)
            attacker.offset = cal.threshold
            extra = {"offset": cal.threshold}
        decision = attacker.decide(releases)
        results[kind] = {
            "auc": roc_auc(decision.confidences, holdout).auc,
            "tpr": float(np.mean(decision.claims[holdout])),
            "fpr": float(np.mean(decision.claims[~holdout])),
            **extra,
        }
    _print({"defense": mechanism.to_dict(), "attackers": results})
    return 0


# ── run / report ───────────────────────────────────────────────

def cmd_run(args) -> int:
    from schemas.experiment import load_experiment_config, scenario_config
    from services.experiment_service import report_lines, run_experiment

    overrides = {"seeds": args.seeds} if args.seeds else {}
    if args.config:
        config = load_experiment_config(args.config, overrides)
    elif args.scenario:
        config = scenario_config(args.scenario, overrides)
    else:
        raise LabError("either --config or --scenario is required")

    db = None
    if args.registry:
        from database import SessionLocal, init_db

        init_db()
        db = SessionLocal()
    try:
        report = run_experiment(config, output_dir=args.out, db=db, workers=args.workers)
    finally:
        if db is not None:
            db.close()
    print("\n".join(report_lines(report.to_dict())))
    return 0


def cmd_report(args) -> int:
    from services.experiment_service import load_report, report_lines

    results = load_report(args.run)
    if args.json:
        _print(results)
    else:
        print("\n".join(report_lines(results)))
    return 0


# ── analyze ────────────────────────────────────────────────────

def cmd_analyze(args) -> int:
    from services import analysis

    if args.analysis == "tradeoff":
        _print({"mu": args.mu, "alpha": args.alpha, "beta": analysis.gaussian_tradeoff(args.mu, args.alpha)})
    elif args.analysis == "curve":
        points = analysis.tradeoff_curve(args.mu, args.points)
        if args.out:
            analysis.write_tradeoff_csv(points, args.out)
        else:
            _print([{"alpha": p.alpha, "beta": p.beta} for p in points])
    elif args.analysis == "gdp-to-dp":
        _print({"mu": args.mu, "epsilon": args.epsilon, "delta": analysis.gdp_to_dp(args.mu, args.epsilon)})
    elif args.analysis == "dp-to-gdp":
        _print({"epsilon": args.epsilon, "delta": args.delta, "mu": analysis.dp_to_gdp(args.epsilon, args.delta)})
    elif args.analysis == "lemma1":
        _print({
            "F": analysis.lemma1_F(args.alpha, args.beta, args.m_hat),
            "F_composed": analysis.lemma1_F_composed(args.alpha, args.beta, args.m_hat),
        })
    elif args.analysis == "lemma1-table":
        _print(analysis.tabulate_lemma1(args.alpha, args.ms, args.m_hat_value, args.samples, args.seed))
    return 0


# ── serve ──────────────────────────────────────────────────────

def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("app:app", host=args.host, port=args.port, reload=settings.DEBUG, log_level=settings.LOG_LEVEL.lower())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beacon-lab", description="Bayesian membership-inference games on genomic beacons")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a population file")
    p.add_argument("--num-individuals", type=int, default=200)
    p.add_argument("--num-snvs", type=int, default=500)
    p.add_argument("--aaf-kind", choices=["beta", "uniform", "point"], default="beta")
    p.add_argument("--aaf-a", type=float, default=0.5)
    p.add_argument("--aaf-b", type=float, default=2.0)
    p.add_argument("--aaf-low", type=float, default=0.01)
    p.add_argument("--aaf-high", type=float, default=0.99)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a defender generator")
    p.add_argument("--population", required=True)
    p.add_argument("--game", choices=["bne", "fixed-lrt", "adaptive-lrt"], default="bne")
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--sigma", choices=["q", "uniform"], default="q")
    p.add_argument("--beacon-rate", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--batches-per-epoch", type=int, default=20)
    p.add_argument("--defender-lr", type=float, default=1e-3)
    p.add_argument("--attacker-lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="score attackers against one defense")
    p.add_argument("--population", required=True)
    p.add_argument("--defense", choices=["zero", "laplace", "gaussian", "checkpoint"], default="laplace")
    p.add_argument("--epsilon", type=float, default=600.0)
    p.add_argument("--m-hat", type=float, default=1.0)
    p.add_argument("--k-min", type=int, default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--clip", action="store_true")
    p.add_argument("--attackers", nargs="+", choices=["bayes", "fixed-lrt", "adaptive-lrt"],
                   default=["bayes", "fixed-lrt", "adaptive-lrt"])
    p.add_argument("--beacon-rate", type=float, default=0.5)
    p.add_argument("--beacons", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--calibration-samples", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("run", help="run an experiment config or named scenario")
    p.add_argument("--config")
    p.add_argument("--scenario")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", default=settings.OUTPUT_DIR)
    p.add_argument("--workers", type=int, default=settings.WORKERS)
    p.add_argument("--registry", action="store_true", help="record the run in the database")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="closed-form trade-off calculators")
    asub = p.add_subparsers(dest="analysis", required=True)
    a = asub.add_parser("tradeoff")
    a.add_argument("--mu", type=float, required=True)
    a.add_argument("--alpha", type=float, required=True)
    a = asub.add_parser("curve")
    a.add_argument("--mu", type=float, required=True)
    a.add_argument("--points", type=int, default=101)
    a.add_argument("--out")
    a = asub.add_parser("gdp-to-dp")
    a.add_argument("--mu", type=float, required=True)
    a.add_argument("--epsilon", type=float, required=True)
    a = asub.add_parser("dp-to-gdp")
    a.add_argument("--epsilon", type=float, required=True)
    a.add_argument("--delta", type=float, required=True)
    a = asub.add_parser("lemma1")
    a.add_argument("--alpha", type=float, required=True)
    a.add_argument("--beta", type=float, required=True)
    a.add_argument("--m-hat", type=float, nargs="+", required=True)
    a = asub.add_parser("lemma1-table")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--ms", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    a.add_argument("--m-hat-value", type=float, default=1.0)
    a.add_argument("--samples", type=int, default=100000)
    a.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="summarize a finished run")
    p.add_argument("run", help="run directory or results.json")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="start the HTTP API")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except LabError as e:
        logger.error(f"❌ {type(e).__name__}: {e.message}")
        print(f"error: {e.message}", file=sys.stderr)
        if e.details:
            print(to_json(e.details), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
