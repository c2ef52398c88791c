"""Command-line surface: forward, identify, evaluate and reproduce-paper."""
import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import orjson
import structlog

from app.api.schemas import ExperimentConfig, PIPELINE_NAMES
from app.core.config import Settings, settings as default_settings
from app.core.exceptions import EXIT_ACCEPTANCE, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, ConfigurationError, GameError
from app.core.logging import configure_logging
from app.models.trajectory import Trajectory
from app.repositories.base import dumps
from app.repositories.results import ResultsRepository
from app.repositories.trajectory import TrajectoryRepository
from app.services.evaluation import feature_matching_report, nmae
from app.services.experiment import ExperimentService, reference_tables
from app.services.forward import ForwardSolverService
from app.services.game import build_demonstration_set
from app.services.identification import IdentificationService, estimate_feedback_gains
from app.services.likelihood import CostScope
from app.systems.closed_loop import closed_loop_dynamics, laws_from_gains, project_trajectory

logger = structlog.get_logger(__name__)


def _common() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="JSON experiment configuration")
    parent.add_argument("--out", type=Path, help="Output directory")
    parent.add_argument("--seed", type=int, help="Master seed")
    parent.add_argument("--snr", help="Comma-separated SNR levels in dB, 'inf' for noiseless")
    parent.add_argument("--d-variant", choices=["plain", "trapezoid"], help="Control-to-state map variant")
    parent.add_argument(
        "--mle-scale",
        choices=["profile", "fixed"],
        help="Estimate the overall cost scale (profile) or take it from the fixed weights",
    )
    parent.add_argument(
        "--fix-weight",
        action="append",
        dest="fixed",
        metavar="SPEC",
        help="Hold a weight fixed, e.g. player=1,index=5,value=2.0 (repeatable)",
    )
    parent.add_argument("--log-level", help="Override the log level")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idg", description="Inverse dynamic games via maximum-entropy IRL")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    forward = sub.add_parser("forward", parents=[common], help="Solve a game for given cost weights")
    forward.add_argument("--system", help="Registered system name")
    forward.add_argument("--concept", help="cg, ol-nash or fb-nash")
    forward.add_argument("--finite-horizon", action="store_true", help="Time-varying feedback gains instead of stationary")
    forward.add_argument("--check-nash", action="store_true", help="Certify the equilibrium by unilateral deviation")

    identify = sub.add_parser("identify", parents=[common], help="Estimate cost weights from demonstrations")
    identify.add_argument("demonstrations", nargs="+", type=Path, help="Trajectory CSV files")
    identify.add_argument("--system", help="Registered system name")
    identify.add_argument("--concept", help="cg, ol-nash or fb-nash")
    identify.add_argument("--player", type=int, action="append", help="1-based player to identify (default: all)")
    identify.add_argument(
        "--allow-nonconverged", action="store_true", default=None, help="Exit 0 even if the optimizer did not converge"
    )

    evaluate = sub.add_parser("evaluate", parents=[common], help="Compare trajectories and check feature matching")
    evaluate.add_argument("estimated", type=Path, help="Estimated trajectory CSV")
    evaluate.add_argument("reference", type=Path, help="Reference trajectory CSV")
    evaluate.add_argument("--system", help="Registered system name")
    evaluate.add_argument("--result", type=Path, help="Identification JSON for a feature-matching report")
    evaluate.add_argument("--samples", type=int, default=2_000, help="Monte-Carlo samples for feature matching")

    reproduce = sub.add_parser("reproduce-paper", parents=[common], help="Run every pipeline across the SNR grid")
    reproduce.add_argument("--only", help=f"Comma-separated subset of {','.join(PIPELINE_NAMES)}")
    reproduce.add_argument("--seeds", type=int, help="Noise realizations per cell")
    reproduce.add_argument("--workers", type=int, help="Concurrent cells")
    reproduce.add_argument("--feature-samples", type=int, help="Samples for the feature-matching check (0 disables)")
    reproduce.add_argument(
        "--allow-nonconverged", action="store_true", default=None, help="Score cells whose identification did not converge"
    )
    return parser


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, Any] = {
        "out": args.out,
        "seed": args.seed,
        "snr": args.snr,
        "d_variant": args.d_variant,
        "mle_scale": args.mle_scale,
        "fixed": args.fixed,
        "system": getattr(args, "system", None),
        "concept": getattr(args, "concept", None),
        "allow_nonconverged": getattr(args, "allow_nonconverged", None),
        "pipelines": getattr(args, "only", None),
        "seeds": getattr(args, "seeds", None),
        "workers": getattr(args, "workers", None),
        "feature_samples": getattr(args, "feature_samples", None),
    }
    return ExperimentConfig.load(args.config, overrides)


def _emit(payload: Any) -> None:
    sys.stdout.write(dumps(payload).decode() + "\n")


def cmd_forward(args: argparse.Namespace, base: Settings) -> int:
    experiment = _experiment(args)
    if args.system is None and args.config is None:
        raise ConfigurationError("forward needs --system or a --config naming one")
    config = experiment.resolved_settings(base)
    system = experiment.build_system(config)
    service = ForwardSolverService(config)
    traj, report, gains = service.solve(system, experiment.concept, stationary=not args.finite_horizon)
    results = ResultsRepository(experiment.out, config.dt)
    csv_path = results.trajectories.save(experiment.out / f"trajectory_{experiment.concept}.csv", traj)
    payload: Dict[str, Any] = {
        "concept": experiment.concept,
        "system": system.game.name,
        "report": report.model_dump(mode="python"),
        "trajectory": str(csv_path),
        "config": experiment.echo(),
    }
    if gains is not None:
        payload["gains"] = list(gains.gains)
    if args.check_nash and experiment.concept == "fb-nash":
        # certified under the time-varying gains whichever gains were written
        _, _, check = service.check_feedback_nash(system)
        payload["nash_check"] = {**check.model_dump(mode="python"), "is_nash": check.is_nash, "gains": "finite-horizon"}
    elif args.check_nash and experiment.concept == "ol-nash":
        check = service.check_nash(traj, system.game, system.theta, "open-loop")
        payload["nash_check"] = {**check.model_dump(mode="python"), "is_nash": check.is_nash}
    results.write_json(f"solver_report_{experiment.concept}.json", payload)
    _emit({"trajectory": str(csv_path), "converged": report.converged, "iterations": report.iterations})
    if not report.converged:
        logger.error("Forward solver did not converge", residual=report.residual)
        return EXIT_NUMERICAL
    return EXIT_OK


def _load_demonstrations(paths: Sequence[Path], dt: float) -> List[Trajectory]:
    repo = TrajectoryRepository(dt)
    return [repo.load(p) for p in paths]


def cmd_identify(args: argparse.Namespace, base: Settings) -> int:
    experiment = _experiment(args)
    config = experiment.resolved_settings(base)
    system = experiment.build_system(config)
    demos = _load_demonstrations(args.demonstrations, config.dt)
    game = system.game.with_horizon(demos[0].horizon)
    fixed = experiment.fixed_weights(system)
    service = IdentificationService(config)
    results = ResultsRepository(experiment.out, config.dt)
    players = [p - 1 for p in args.player] if args.player else list(range(game.player_count))
    for p in players:
        if not 0 <= p < game.player_count:
            raise ConfigurationError(f"Player {p + 1} does not exist")

    outcomes = []
    if experiment.concept == "cg":
        outcomes.append(("identification_cg.json", service.identify_cooperative(demos, game, fixed)))
    elif experiment.concept == "ol-nash":
        for p in players:
            outcomes.append((f"identification_ol-nash_player{p + 1}.json", service.identify_open_loop(demos, game, p, fixed)))
    else:
        gains = estimate_feedback_gains(demos)
        for p in players:
            outcomes.append(
                (f"identification_fb-nash_player{p + 1}.json", service.identify_feedback(demos, game, p, gains, fixed))
            )

    converged = True
    for name, result in outcomes:
        results.write_identification(name, result, experiment.echo())
        converged = converged and result.converged
        _emit(
            {
                "scope": result.scope,
                "players": [p + 1 for p in result.players],
                "theta": list(result.theta),
                "converged": result.converged,
            }
        )
    if not converged and not experiment.allow_nonconverged:
        logger.error("Identification did not converge; pass --allow-nonconverged to accept")
        return EXIT_NUMERICAL
    return EXIT_OK


def _feature_matching(
    path: Path, reference: Trajectory, experiment: ExperimentConfig, config: Settings, samples: int
) -> Dict[str, Any]:
    doc = orjson.loads(path.read_bytes())
    system = experiment.build_system(config)
    game = system.game.with_horizon(reference.horizon)
    scope_tag = doc.get("scope")
    players = [p - 1 for p in doc["players"]]
    # the density is sampled at the estimated cost scale
    rationality = (doc.get("trace") or {}).get("rationality") or 1.0
    theta = [rationality * np.asarray(t, dtype=float) for t in doc["theta"]]
    fixed = {(fw["player"] - 1, fw["index"] - 1) for fw in doc.get("fixed", [])}
    out: Dict[str, Any] = {}
    if scope_tag == "CG":
        scope = CostScope.joint(game)
        free = [ref not in fixed for ref in scope.features]
        demos = build_demonstration_set([reference], game)
        report = feature_matching_report(np.concatenate(theta), demos, game, scope, samples, experiment.seed, config.d_variant, free)
        out["joint"] = report.model_dump(mode="python")
        return out
    gains = estimate_feedback_gains([reference]) if scope_tag == "FB-Nash" else None
    for p, t in zip(players, theta):
        if gains is not None:
            sub_game = closed_loop_dynamics(game, laws_from_gains(gains, exclude=p), p)
            demos = build_demonstration_set([project_trajectory(reference, p)], sub_game)
            scope = CostScope.player(sub_game, 0)
        else:
            sub_game = game
            demos = build_demonstration_set([reference], game)
            scope = CostScope.player(game, p)
        free = [(p, a) not in fixed for _, a in scope.features]
        report = feature_matching_report(t, demos, sub_game, scope, samples, experiment.seed, config.d_variant, free)
        out[f"player{p + 1}"] = report.model_dump(mode="python")
    return out


def cmd_evaluate(args: argparse.Namespace, base: Settings) -> int:
    experiment = _experiment(args)
    config = experiment.resolved_settings(base)
    repo = TrajectoryRepository(config.dt)
    estimated, reference = repo.load(args.estimated), repo.load(args.reference)
    report = nmae(estimated, reference)
    payload: Dict[str, Any] = {"nmae": report.model_dump(mode="python"), "config": experiment.echo()}
    if args.result is not None:
        payload["feature_matching"] = _feature_matching(args.result, reference, experiment, config, args.samples)
    ResultsRepository(experiment.out, config.dt).write_json("evaluation.json", payload)
    _emit({"e_x": report.e_x, "e_u": report.e_u})
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace, base: Settings) -> int:
    experiment = _experiment(args)
    service = ExperimentService(experiment, base)
    bundle = service.run()
    summary = ResultsRepository(experiment.out, service.config.dt).write_bundle(bundle, reference_tables())
    _emit(
        {
            "summary": str(summary),
            "passed": bundle.passed,
            "checks": {c.name: c.passed for c in bundle.checks},
        }
    )
    return EXIT_OK if bundle.passed else EXIT_ACCEPTANCE


COMMANDS = {
    "forward": cmd_forward,
    "identify": cmd_identify,
    "evaluate": cmd_evaluate,
    "reproduce-paper": cmd_reproduce,
}


def main(argv: Optional[Sequence[str]] = None, base: Optional[Settings] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    base = base or default_settings
    if args.log_level:
        base = base.model_copy(update={"log_level": args.log_level.upper()})
    configure_logging(base)
    try:
        return COMMANDS[args.command](args, base)
    except GameError as e:
        logger.error("Command failed", command=args.command, **e.to_dict())
        sys.stderr.write(f"error: {e.detail}\n")
        return e.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as e:
        logger.error("Numerical failure", command=args.command, error=str(e))
        sys.stderr.write(f"error: {e}\n")
        return EXIT_NUMERICAL
