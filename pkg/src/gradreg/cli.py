"""Command-line front end.

Subcommands: variance-surface export, Monte Carlo validation of the
adaptive-LR variance, monotonicity scans, training runs from a JSON
config, and gradient cross-checks.  Every run prints its resolved
configuration first, and all randomness is controlled by explicit seeds.

Exit codes: 0 success, 1 usage/config error, 2 numeric or assertion failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .numerics import RngState, finite_diff_grad, l2_norm
from .objectives import MlpClassifier, QuadraticObjective, random_spd_matrix, synth_dataset
from .optim import ConfigError, load_train_setup, train, write_trace
from .regularizer import PenalizedObjective, gr_gradient
from .theory import (
    TheoryParams,
    exact_var_constant_sigma,
    mc_var_psi,
    monotonicity_scan,
    var_psi_closed,
    var_surface,
    write_surface_csv,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit with code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _print_config(name: str, flags: dict) -> None:
    print(f"config[{name}]: " + json.dumps(flags, sort_keys=True, default=str))


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# theory-surface


def cmd_theory_surface(args) -> int:
    if args.gamma_min <= 0 or args.gamma_max < args.gamma_min:
        return _fail("gamma range must satisfy 0 < min <= max", EXIT_USAGE)
    if args.t_min < 1 or args.t_max < args.t_min:
        return _fail("t range must satisfy 1 <= min <= max", EXIT_USAGE)
    if args.gamma_steps < 1 or args.t_steps < 1:
        return _fail("grid step counts must be >= 1", EXIT_USAGE)
    if args.sigma1 <= 0:
        return _fail("sigma1 must be positive", EXIT_USAGE)
    gammas = np.linspace(args.gamma_min, args.gamma_max, args.gamma_steps)
    ts = np.linspace(args.t_min, args.t_max, args.t_steps)
    matrix = var_surface(gammas, ts, args.sigma1)
    try:
        write_surface_csv(gammas, ts, matrix, args.out)
    except OSError as exc:
        return _fail(f"cannot write {args.out}: {exc}", EXIT_NUMERIC)
    print(f"surface: {matrix.shape[0]} x {matrix.shape[1]} cells -> {args.out}")
    print(f"min cell {matrix.min():.17g}")
    print(f"max cell {matrix.max():.17g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# theory-mc


def cmd_theory_mc(args) -> int:
    if args.gamma < 0:
        return _fail("gamma must be >= 0", EXIT_USAGE)
    if args.t < 1:
        return _fail("t must be >= 1", EXIT_USAGE)
    if args.sigma1 <= 0:
        return _fail("sigma1 must be positive", EXIT_USAGE)
    if args.n < 2:
        return _fail("n must be >= 2", EXIT_USAGE)
    if not 0.0 < args.beta2 < 1.0:
        return _fail("beta2 must lie in (0, 1)", EXIT_USAGE)
    if args.gamma == 0 and args.t <= 2:
        return _fail("the gamma = 0 reference needs t > 2", EXIT_USAGE)
    params = TheoryParams(args.gamma, args.t, args.sigma1)
    est = mc_var_psi(params, args.n, args.seed, args.mode, args.beta2)
    if args.gamma == 0:
        # no closed form at gamma = 0; compare to the exact constant-variance value
        reference = exact_var_constant_sigma(args.t, args.sigma1)
        reference_kind = "constant_sigma_exact"
    else:
        reference = var_psi_closed(params)
        reference_kind = "closed_form"
    gap = abs(est.variance_hat - reference) / reference
    print(f"mc variance   {est.variance_hat:.17g}")
    print(f"reference     {reference:.17g} ({reference_kind})")
    print(f"relative gap  {gap:.6g}")
    print(f"std error     {est.std_error:.6g}   (n={est.n_samples}, resampled={est.n_resampled})")
    print(
        json.dumps(
            {
                "mc_variance": est.variance_hat,
                "closed_form": reference,
                "relative_gap": gap,
                "std_error": est.std_error,
                "reference": reference_kind,
                "mode": est.mode,
                "seed": est.seed,
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# theory-mono


def cmd_theory_mono(args) -> int:
    if args.gamma_min <= 0 or args.gamma_max < args.gamma_min:
        return _fail("gamma range must satisfy 0 < min <= max", EXIT_USAGE)
    if args.gamma_steps < 2:
        return _fail("need at least 2 grid points", EXIT_USAGE)
    if args.sigma1 <= 0:
        return _fail("sigma1 must be positive", EXIT_USAGE)
    gammas = np.linspace(args.gamma_min, args.gamma_max, args.gamma_steps)
    worst = EXIT_OK
    for t in args.t:
        report = monotonicity_scan(t, gammas, args.sigma1)
        status = "ok" if report.ok else "VIOLATION"
        print(
            f"t={t}: checked {report.pairs_checked} pairs, "
            f"{report.increases} increasing, {len(report.flat_pairs)} flat, "
            f"{len(report.violations)} violations [{status}]"
        )
        for g_lo, g_hi, v_lo, v_hi in report.violations:
            print(f"  decrease between gamma={g_lo:.6g} and gamma={g_hi:.6g}: {v_lo} -> {v_hi}")
        if not report.ok:
            worst = EXIT_NUMERIC
    return worst


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except OSError as exc:
        return _fail(f"cannot read config: {exc}", EXIT_USAGE)
    except json.JSONDecodeError as exc:
        return _fail(f"config is not valid JSON: {exc}", EXIT_USAGE)
    print("config[train.file]: " + json.dumps(doc, sort_keys=True))
    try:
        obj, dataset, cfg = load_train_setup(doc)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USAGE)
    result = train(cfg, obj, dataset)
    try:
        write_trace(result.records, args.out)
    except OSError as exc:
        return _fail(f"cannot write trace: {exc}", EXIT_NUMERIC)
    warmup = cfg.schedule.warmup_steps
    warmup_norms = [r.grad_norm for r in result.records if r.step <= warmup]
    evals = [r.eval_error for r in result.records if r.eval_error is not None]
    print(f"steps: {len(result.records)} -> {args.out}")
    if result.records:
        print(f"final loss: {result.records[-1].loss:.17g}")
    if evals:
        print(f"final eval_error: {evals[-1]:.17g}")
    if warmup_norms:
        print(f"mean grad_norm over warmup window: {float(np.mean(warmup_norms)):.17g}")
    if result.diverged:
        return _fail("training diverged (non-finite loss); trace ends with a diagnostic record", EXIT_NUMERIC)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _parse_r_list(text: str) -> list[float]:
    values = [float(part) for part in text.split(",") if part.strip()]
    if not values or any(r <= 0 for r in values):
        raise ValueError("r-list must be positive numbers")
    return values


def cmd_gradcheck(args) -> int:
    if args.h <= 0:
        return _fail("h must be positive", EXIT_USAGE)
    if args.lam < 0:
        return _fail("lam must be >= 0", EXIT_USAGE)
    try:
        r_values = _parse_r_list(args.r_list)
    except ValueError as exc:
        return _fail(str(exc), EXIT_USAGE)

    if args.model == "quadratic":
        rng = RngState(args.seed)
        worst = 0.0
        for trial in range(10):
            quad = QuadraticObjective(random_spd_matrix(6, rng.child(trial + 10)))
            theta = rng.child(trial + 100).standard_normals(6)
            for r in r_values:
                mixed = gr_gradient(quad, theta, None, args.lam, r)
                exact = quad.gr_exact_grad(theta, args.lam)
                worst = max(worst, l2_norm(mixed - exact) / l2_norm(exact))
        print(f"quadratic: max relative error {worst:.3e} over {10 * len(r_values)} cases")
        if worst >= 1e-12:
            return _fail("two-point gradient does not match the closed form", EXIT_NUMERIC)
        return EXIT_OK

    # mlp: the two-point gradient should approach the true penalized-loss
    # gradient as the perturbation radius shrinks
    dataset = synth_dataset("blobs", 64, 3, args.seed)
    mlp = MlpClassifier((dataset.num_features, 12, dataset.num_classes))
    theta = mlp.init_params(RngState(args.seed, 7))
    reference = finite_diff_grad(PenalizedObjective(mlp, args.lam), theta, dataset, args.h)
    ref_norm = l2_norm(reference)
    errors = []
    print("r          relative_error")
    for r in r_values:
        err = l2_norm(gr_gradient(mlp, theta, dataset, args.lam, r) - reference) / ref_norm
        errors.append(err)
        print(f"{r:<10.6g} {err:.6e}")
    if any(b >= a for a, b in zip(errors, errors[1:])):
        return _fail("approximation error is not strictly decreasing in r", EXIT_NUMERIC)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="gradreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("theory-surface", help="export the variance surface as CSV")
    p.add_argument("--gamma-min", type=float, default=0.01)
    p.add_argument("--gamma-max", type=float, default=1.0)
    p.add_argument("--gamma-steps", type=int, default=50)
    p.add_argument("--t-min", type=float, default=2)
    p.add_argument("--t-max", type=float, default=200)
    p.add_argument("--t-steps", type=int, default=50)
    p.add_argument("--sigma1", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_theory_surface)

    p = sub.add_parser("theory-mc", help="Monte Carlo check of the variance formula")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--sigma1", type=float, default=1.0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True, help="explicit seed (no hidden nondeterminism)")
    p.add_argument("--mode", choices=("sqrt_approx", "adam_exact"), default="sqrt_approx")
    p.add_argument("--beta2", type=float, default=0.999)
    p.set_defaults(func=cmd_theory_mc)

    p = sub.add_parser("theory-mono", help="scan variance monotonicity in gamma")
    p.add_argument("--t", type=int, action="append", required=True, help="repeatable step count")
    p.add_argument("--gamma-min", type=float, default=0.05)
    p.add_argument("--gamma-max", type=float, default=3.0)
    p.add_argument("--gamma-steps", type=int, default=40)
    p.add_argument("--sigma1", type=float, default=1.0)
    p.set_defaults(func=cmd_theory_mono)

    p = sub.add_parser("train", help="run the training loop from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="JSONL trace output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="cross-check the regularized gradient")
    p.add_argument("--model", choices=("quadratic", "mlp"), required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--r-list", default="0.4,0.2,0.1,0.05")
    p.add_argument("--lam", type=float, default=0.1)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    _print_config(args.command, flags)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
