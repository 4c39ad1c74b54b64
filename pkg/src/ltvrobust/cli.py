"""Command-line front end: problem files in, certified bounds / curves /
worst-case signals out.

Commands: ``nominal`` (RDE-bisected gain of a nominal system), ``robust``
(combined DLMI/RDE bound, optionally over several horizons), ``worstcase``
(near worst-case disturbance construction), and ``bench`` (the packaged
benchmark studies).  Exit codes: 0 success, 2 malformed input, 3 numerical or
certificate failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .benchmarks import (
    build_uncertain_robot,
    finite_horizon_lqr,
    linearize_along_trajectory,
    lti_benchmark,
    reference_trajectory,
    sample_delta_validate,
    worst_delta_candidate,
)
from .iqc import iqc_from_json
from .iteration import (
    IterationConfig,
    gain_vs_horizon,
    horizon_table_to_csv,
    robust_gain_iterate,
)
from .ltv import partitioned_from_json, system_from_json
from .riccati import (
    BracketError,
    GainKind,
    bisect_gain,
    gramian_l2e_oracle,
    lifted_l2_gain_oracle,
    rde_to_csv,
)
from .worst_case import (
    NoConjugatePointError,
    WorstCaseVerificationError,
    worst_case_disturbance,
    worst_case_to_csv,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


class InputError(Exception):
    pass


_PROBLEM_KEYS = {
    "system", "partitioned_system", "iqc", "performance", "horizon", "horizons",
    "gamma_target", "beta", "config", "output",
}
_CONFIG_KEYS = {
    "tol", "max_iter", "dlmi_points", "spline_points", "bisect_tol", "seed",
    "ode_rtol", "ode_atol", "solver",
}


def _load_problem(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise InputError(f"problem file not found: {path}")
    except json.JSONDecodeError as exc:
        raise InputError(f"problem file is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise InputError("problem file must contain a JSON object")
    unknown = set(doc) - _PROBLEM_KEYS
    if unknown:
        raise InputError(f"unknown problem keys: {sorted(unknown)}")
    cfg = doc.get("config", {})
    unknown_cfg = set(cfg) - _CONFIG_KEYS
    if unknown_cfg:
        raise InputError(f"unknown config keys: {sorted(unknown_cfg)}")
    return doc


def _maybe_from_path(obj, what):
    if isinstance(obj, dict) and set(obj) == {"path"}:
        try:
            with open(obj["path"]) as f:
                return json.load(f)
        except FileNotFoundError:
            raise InputError(f"{what} file not found: {obj['path']}")
        except json.JSONDecodeError as exc:
            raise InputError(f"{what} file is not valid JSON: {exc}")
    return obj


def _parse_system(doc, key="system"):
    if key not in doc:
        raise InputError(f"problem file needs a '{key}' entry")
    try:
        obj = _maybe_from_path(doc[key], key)
        if key == "system":
            return system_from_json(obj)
        return partitioned_from_json(obj)
    except (ValueError, TypeError, KeyError) as exc:
        raise InputError(f"malformed {key}: {exc}")


def _parse_kind(doc, args):
    name = args.perf or doc.get("performance", "l2")
    try:
        return GainKind(name)
    except ValueError:
        raise InputError(f"unknown performance kind {name!r} (use 'l2' or 'l2e')")


def _parse_config(doc, args):
    cfg = dict(doc.get("config", {}))
    if args.tol is not None:
        cfg["tol"] = args.tol
    if args.max_iter is not None:
        cfg["max_iter"] = args.max_iter
    if args.dlmi_points is not None:
        cfg["dlmi_points"] = args.dlmi_points
    if args.spline_points is not None:
        cfg["spline_points"] = args.spline_points
    if getattr(args, "bisect_tol", None) is not None:
        cfg["bisect_tol"] = args.bisect_tol
    try:
        return IterationConfig(
            tol=float(cfg.get("tol", 5e-3)),
            n_iter=int(cfg.get("max_iter", 10)),
            dlmi_points=int(cfg.get("dlmi_points", 20)),
            spline_points=int(cfg.get("spline_points", 10)),
            bisect_rel_tol=float(cfg.get("bisect_tol", 1e-3)),
            ode_rtol=float(cfg.get("ode_rtol", 1e-5)),
            ode_atol=float(cfg.get("ode_atol", 1e-8)),
            solver=str(cfg.get("solver", "clarabel")),
        )
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad config: {exc}")


def _write_json(path, payload):
    if path:
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)


def cmd_nominal(args):
    doc = _load_problem(args.problem)
    sys_ = _parse_system(doc)
    kind = _parse_kind(doc, args)
    if doc.get("horizon") is not None:
        sys_ = sys_.restrict(float(doc["horizon"]))
    rel_tol = float(doc.get("config", {}).get("bisect_tol", args.bisect_tol or 1e-3))
    try:
        bound = bisect_gain(sys_, kind, rel_tol=rel_tol)
    except (BracketError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"gamma = {bound.gamma:.6g}")
    payload = {
        "kind": kind.value, "gamma": bound.gamma, "lower": bound.lower,
        "upper": bound.upper, "iterations": bound.iterations,
    }
    if args.oracle:
        if args.oracle == "gramian":
            oracle = gramian_l2e_oracle(sys_)
        else:
            oracle = lifted_l2_gain_oracle(sys_, args.oracle_steps)
        payload["oracle"] = {"name": args.oracle, "value": oracle}
        print(f"oracle ({args.oracle}) = {oracle:.6g}")
    out = doc.get("output", {})
    _write_json(args.out or out.get("json"), payload)
    csv_path = out.get("csv")
    if csv_path:
        rde_to_csv(bound.certificate, csv_path)
    return EXIT_OK


def cmd_robust(args):
    doc = _load_problem(args.problem)
    plant = _parse_system(doc, "partitioned_system")
    kind = _parse_kind(doc, args)
    config = _parse_config(doc, args)
    if "iqc" not in doc:
        raise InputError("problem file needs an 'iqc' entry")
    try:
        iqc = iqc_from_json(doc["iqc"], grid=plant.grid)
    except ValueError as exc:
        raise InputError(f"malformed iqc: {exc}")

    horizons = args.horizons or doc.get("horizons")
    out = doc.get("output", {})
    beta = args.beta if args.beta is not None else doc.get("beta")

    if horizons:
        horizons = [float(h) for h in horizons]
        table = gain_vs_horizon(plant, iqc, kind, horizons, config, jobs=args.jobs)
        for T, res in table:
            tag = f"{res.gamma:.6g}" if res.certified else "inf (no certificate)"
            print(f"T = {T:g}: gamma = {tag}")
        csv_path = args.out_csv or out.get("csv")
        if csv_path:
            horizon_table_to_csv(table, csv_path)
        payload = {
            "kind": kind.value,
            "results": [
                {"T": T, "gamma": (res.gamma if res.certified else None),
                 "log": res.log.to_jsonable()}
                for T, res in table
            ],
        }
        _write_json(args.out or out.get("json"), payload)
        if not all(res.certified for _, res in table):
            print("at least one horizon produced no certificate", file=sys.stderr)
            return EXIT_NUMERICAL
        return EXIT_OK

    if doc.get("horizon") is not None:
        plant = plant.restrict(float(doc["horizon"]))
    res = robust_gain_iterate(plant, iqc, kind, config)
    if not res.certified:
        print(f"no certificate found ({res.log.termination})", file=sys.stderr)
        _write_json(args.out or out.get("json"),
                    {"kind": kind.value, "gamma": None, "log": res.log.to_jsonable()})
        return EXIT_NUMERICAL
    print(f"gamma = {res.gamma:.6g}")
    payload = {"kind": kind.value, "gamma": res.gamma, "log": res.log.to_jsonable()}
    if beta is not None and kind is GainKind.L2_TO_EUCLIDEAN:
        payload["reach_radius"] = float(beta) * res.gamma
        print(f"reachable-set radius at ||d|| <= {float(beta):g}: "
              f"{payload['reach_radius']:.6g}")
    _write_json(args.out or out.get("json"), payload)
    return EXIT_OK


def cmd_worstcase(args):
    doc = _load_problem(args.problem)
    sys_ = _parse_system(doc)
    kind = _parse_kind(doc, args)
    if doc.get("horizon") is not None:
        sys_ = sys_.restrict(float(doc["horizon"]))
    target = doc.get("gamma_target")
    if args.gamma_target is not None:
        target = args.gamma_target
    if target is None:
        bound = bisect_gain(sys_, kind, rel_tol=1e-4)
        target = 0.999 * bound.gamma
        print(f"gamma_target defaulted to 0.999 * bisected gain = {target:.6g}")
    try:
        wc = worst_case_disturbance(sys_, kind, float(target))
    except NoConjugatePointError as exc:
        print(f"no conjugate point: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except WorstCaseVerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"achieved ratio = {wc.achieved_ratio:.6g} "
          f"(target {wc.gamma_target:.6g}, activation time {wc.t0:.6g})")
    out = doc.get("output", {})
    csv_path = args.out_csv or out.get("csv")
    if csv_path:
        worst_case_to_csv(wc, csv_path)
    _write_json(args.out or out.get("json"), {
        "kind": kind.value, "gamma_target": wc.gamma_target,
        "achieved_ratio": wc.achieved_ratio, "t0": wc.t0,
        "cost_value": wc.cost_value,
    })
    return EXIT_OK


def _bench_lti(config, horizons, jobs):
    from .iqc import unit_norm_lti_iqc

    plant = lti_benchmark(max(horizons))
    iqc = unit_norm_lti_iqc(1, 10.0)
    t0 = time.perf_counter()
    table = gain_vs_horizon(plant, iqc, GainKind.INDUCED_L2, horizons, config,
                            jobs=jobs)
    elapsed = time.perf_counter() - t0
    gammas = [res.gamma for _, res in table]
    iters = [len(res.log.records) for _, res in table]
    checks = {
        "final_gamma_near_1.49": bool(abs(gammas[-1] - 1.49) <= 0.05 * 1.49),
        "curve_nondecreasing": bool(all(b >= a * (1 - 0.01)
                                        for a, b in zip(gammas, gammas[1:]))),
        "iterations_at_most_5": bool(max(iters) <= 5),
        "all_converged": bool(all(res.log.termination == "converged"
                                  for _, res in table)),
    }
    return {
        "horizons": horizons, "gammas": gammas, "iterations": iters,
        "elapsed_seconds": elapsed, "checks": checks,
    }


def _bench_robot(config, n_samples, seed, beta, jobs=1):
    params_traj = reference_trajectory()
    A, B = linearize_along_trajectory(params_traj)
    K = finite_horizon_lqr(A, B, np.diag([100.0, 10.0, 100.0, 10.0]),
                           np.diag([0.1, 0.1]), F=np.diag([1.0, 0.1, 1.0, 0.1]))
    from .iqc import unit_norm_lti_iqc

    iqc = unit_norm_lti_iqc(1, 10.0)
    closed = build_uncertain_robot(A, B, K)
    open_loop = build_uncertain_robot(A, B, None)
    t0 = time.perf_counter()
    res_cl = robust_gain_iterate(closed, iqc, GainKind.L2_TO_EUCLIDEAN, config)
    res_ol = robust_gain_iterate(open_loop, iqc, GainKind.L2_TO_EUCLIDEAN, config)
    report = sample_delta_validate(closed, res_cl.gamma, GainKind.L2_TO_EUCLIDEAN,
                                   n_samples=n_samples, seed=seed,
                                   include_deltas=[worst_delta_candidate()],
                                   jobs=jobs)
    elapsed = time.perf_counter() - t0
    checks = {
        "closed_loop_certified": bool(res_cl.certified),
        "open_loop_certified": bool(res_ol.certified),
        "separation_at_least_10x": bool(res_ol.gamma >= 10.0 * res_cl.gamma),
        "all_samples_below_bound": bool(report.all_below_bound),
        "bound_not_vacuous": bool(report.max_gain >= 0.5 * res_cl.gamma),
    }
    return {
        "gamma_closed": res_cl.gamma, "gamma_open": res_ol.gamma,
        "reach_radius_closed": beta * res_cl.gamma,
        "max_sampled_gain": report.max_gain,
        "n_samples": len(report.samples),
        "elapsed_seconds": elapsed, "checks": checks,
        "validation": report.to_jsonable(),
    }


def cmd_bench(args):
    config = IterationConfig()
    horizons = [1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0, 100.0]
    n_samples = 100
    if args.quick:
        config = IterationConfig(dlmi_points=10, spline_points=6)
        horizons = [1.0, 5.0, 20.0]
        n_samples = 5
    summary = {}
    if args.study in ("lti", "all"):
        summary["lti"] = _bench_lti(config, horizons, args.jobs)
    if args.study in ("robot", "all"):
        summary["robot"] = _bench_robot(config, n_samples, args.seed, beta=5.0,
                                        jobs=args.jobs)
    ok = True
    for study, data in summary.items():
        for name, passed in data["checks"].items():
            print(f"[{study}] {name}: {'pass' if passed else 'FAIL'}")
            ok = ok and passed
    _write_json(args.out, summary)
    return EXIT_OK if ok else EXIT_NUMERICAL


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ltvrobust",
        description="Certified finite-horizon gain bounds for uncertain LTV systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_nom = sub.add_parser("nominal", help="RDE-bisected gain of a nominal system")
    p_nom.add_argument("problem", help="problem JSON file")
    p_nom.add_argument("--perf", choices=["l2", "l2e"], default=None)
    p_nom.add_argument("--bisect-tol", type=float, default=None)
    p_nom.add_argument("--oracle", choices=["gramian", "lifted"], default=None,
                       help="also print an independent oracle value")
    p_nom.add_argument("--oracle-steps", type=int, default=2000)
    p_nom.add_argument("--out", default=None, help="result JSON path")
    p_nom.set_defaults(fn=cmd_nominal)

    p_rob = sub.add_parser("robust", help="combined DLMI/RDE robust gain bound")
    p_rob.add_argument("problem")
    p_rob.add_argument("--perf", choices=["l2", "l2e"], default=None)
    p_rob.add_argument("--horizons", type=lambda s: [float(x) for x in s.split(",")],
                       default=None, help="comma-separated horizon sweep")
    p_rob.add_argument("--tol", type=float, default=None)
    p_rob.add_argument("--max-iter", type=int, default=None)
    p_rob.add_argument("--dlmi-points", type=int, default=None)
    p_rob.add_argument("--spline-points", type=int, default=None)
    p_rob.add_argument("--bisect-tol", type=float, default=None)
    p_rob.add_argument("--beta", type=float, default=None,
                       help="report the reach-set radius gamma*beta (l2e only)")
    p_rob.add_argument("--jobs", type=int, default=1)
    p_rob.add_argument("--out", default=None)
    p_rob.add_argument("--out-csv", default=None)
    p_rob.set_defaults(fn=cmd_robust)

    p_wc = sub.add_parser("worstcase", help="construct a near worst-case disturbance")
    p_wc.add_argument("problem")
    p_wc.add_argument("--perf", choices=["l2", "l2e"], default=None)
    p_wc.add_argument("--gamma-target", type=float, default=None)
    p_wc.add_argument("--out", default=None)
    p_wc.add_argument("--out-csv", default=None)
    p_wc.set_defaults(fn=cmd_worstcase)

    p_bench = sub.add_parser("bench", help="run the packaged benchmark studies")
    p_bench.add_argument("--study", choices=["lti", "robot", "all"], default="all")
    p_bench.add_argument("--quick", action="store_true",
                         help="reduced grids and sample counts for CI")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--jobs", type=int, default=1)
    p_bench.add_argument("--out", default=None)
    p_bench.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BracketError,) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
