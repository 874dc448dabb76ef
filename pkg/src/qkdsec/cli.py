"""Command-line front end.

    qkdkeyrate keyrate  --config cfg [--distance D] [--out path]
    qkdkeyrate sweep    --config cfg [--out csv] [--seed S] [--threads N]
    qkdkeyrate validate --config cfg [--seed S]
    qkdkeyrate certify  --config cfg --out dir [--distance D]

Exit codes: 0 success, 2 zero key (so sweep scripts can detect the
key-rate cliff without parsing), 1 error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import channelsim as cs
from . import corrbound as cb
from . import finitekey as fk
from . import optimsweep as osw
from . import protocolkit as pk
from . import sdpcore
from . import validate as val
from .runconfig import ConfigError, Evaluator, RunConfig, default_params, \
    load_config, parameter_space

CSV_BASE = ["distance_km", "key_rate", "l_key", "e_ph_upper", "M_W_upper",
            "p_Z", "alpha", "gamma_W"]
CSV_DECOY = ["intensity_0", "intensity_1", "p_int_0", "p_int_1"]


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.17e}"
    return str(x)


def _result_row(distance, res, params, runtime_ms, kind, error=""):
    row = [distance, res.rate, res.l_key, res.e_ph_upper, res.m_w_upper,
           params.get("p_z", math.nan), params.get("alpha", math.nan),
           params.get("gamma_w", math.nan)]
    if kind == "decoy":
        row += [params.get("intensity_0", math.nan), params.get("intensity_1", math.nan),
                params.get("p_int_0", math.nan), params.get("p_int_1", math.nan)]
    row += [runtime_ms]
    return ",".join(_fmt(x) for x in row) + ("," + error if error else "")


def csv_header(kind: str) -> str:
    cols = list(CSV_BASE)
    if kind == "decoy":
        cols += CSV_DECOY
    cols += ["runtime_ms"]
    return ",".join(cols)


def _record(res: fk.KeyRateResult) -> dict:
    return {"protocol": res.protocol, "l_key": res.l_key, "rate": res.rate,
            "e_ph_upper": res.e_ph_upper, "m_w_upper": res.m_w_upper,
            "m_ph_upper": res.m_ph_upper, "m_key1_lower": res.m_key1_lower,
            "lambda_ec": res.lambda_ec, "n_pulses": res.n_pulses,
            "params": res.params,
            "diagnostics": {k: v for k, v in res.diagnostics.items()
                            if isinstance(v, (int, float, str))}}


def cmd_keyrate(config: RunConfig, distance: float | None, out: str | None,
                seed: int) -> int:
    ev = Evaluator(config)
    d = config["channel.distance_km"] if distance is None else distance
    params = default_params(config)
    if config["optimize.enabled"]:
        space = parameter_space(config)
        start = {k: v for k, v in params.items() if k in space.names}
        cfg = osw.OptimizeConfig(max_evals=config["optimize.max_evals"], seed=seed)
        opt = osw.optimize_point(lambda p: ev(d, {**params, **p}).rate,
                                 space, start, cfg)
        params = {**params, **opt.best_params}
    res = ev(d, params)
    record = _record(res)
    record["distance_km"] = d
    text = json.dumps(record, indent=2, default=float)
    print(text)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0 if res.rate > 0 else 2


def _sweep_chunk(args):
    cfg_values, distances, seed = args
    config = RunConfig(dict(cfg_values))
    ev = Evaluator(config)
    params = default_params(config)
    space = parameter_space(config) if config["optimize.enabled"] else None
    rows, records = [], []
    current = dict(params)
    for d in distances:
        t0 = time.time()
        error = ""
        try:
            if space is not None:
                start = {k: v for k, v in current.items() if k in space.names}
                cfg = osw.OptimizeConfig(max_evals=config["optimize.max_evals"],
                                         seed=seed)
                opt = osw.optimize_point(lambda p: ev(d, {**current, **p}).rate,
                                         space, start, cfg)
                point = {**current, **opt.best_params}
            else:
                point = dict(current)
            res = ev(d, point)
            if res.rate > 0:
                current = point
        except Exception as exc:   # emit the row, keep sweeping
            res = fk.KeyRateResult(protocol=config.kind, l_key=0.0, rate=0.0,
                                   e_ph_upper=0.5, m_w_upper=math.nan,
                                   lambda_ec=math.nan,
                                   n_pulses=config["run.n_pulses"],
                                   params=dict(current), budget=ev.budget())
            point = dict(current)
            error = type(exc).__name__
        rows.append(_result_row(d, res, point, (time.time() - t0) * 1e3,
                                config.kind, error))
        records.append((d, res.rate))
    return rows, records


def cmd_sweep(config: RunConfig, out: str | None, seed: int, threads: int) -> int:
    distances = list(config["sweep.distances"])
    header = csv_header(config.kind)
    if not distances:
        lines = [header]
    else:
        if threads <= 1:
            rows, _ = _sweep_chunk((config.values, distances, seed))
        else:
            chunks = np.array_split(np.array(distances), threads)
            args = [(config.values, list(chunk), seed) for chunk in chunks if len(chunk)]
            rows = []
            with ProcessPoolExecutor(max_workers=threads) as pool:
                for part_rows, _ in pool.map(_sweep_chunk, args):
                    rows.extend(part_rows)
        lines = [header] + rows
    text = "\n".join(lines) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_validate(config: RunConfig, seed: int) -> int:
    report = val.run_validation(config, seed=seed)
    for line in report.lines:
        print(line)
    return 0 if report.ok else 1


def cmd_certify(config: RunConfig, out_dir: str, distance: float | None) -> int:
    ev = Evaluator(config)
    d = config["channel.distance_km"] if distance is None else distance
    params = default_params(config)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for target, problem, cert in _certifiable_problems(config, ev, d, params):
        path = os.path.join(out_dir, f"{config.kind}_{target}.cert")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(sdpcore.export_certificate(cert, problem))
        rec = sdpcore.load_certificate(open(path, encoding="utf-8").read())
        ineq, _ = sdpcore.reverify_certificate(rec, problem)
        print(f"{path}: margin {ineq:.3e}")
        if ineq < -sdpcore.FEAS_TOL:
            return 1
        written.append(path)
    cfg_path = os.path.join(out_dir, "run.cfg")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        fh.write(config.dumps())
    print(f"wrote {len(written)} certificates + {cfg_path}")
    return 0


def _certifiable_problems(config, ev, distance, params):
    channel = ev.channel(distance)
    gamma = params.get("gamma_w", config["run.gamma_w"])
    if config.kind == "bb84":
        model = pk.bb84_model(delta_theta=config["protocol.delta_theta"],
                              epsilon=config["protocol.epsilon"],
                              corr_length=config["protocol.corr_length"],
                              p_z=params["p_z"])
        table = cs.bb84_expected_stats(channel, model)
        q = cs.q_values(model, table, pk.coefficient_sets(model))
        problem = sdpcore.build_dual(model, gamma_w=gamma, q_guesses=q)
        yield "phase", problem, sdpcore.solve_dual(problem)
    elif config.kind == "mdi":
        model = pk.mdi_model(mu=params["mu"], epsilon=config["protocol.epsilon"],
                             corr_length=config["protocol.corr_length"],
                             p_z=params["p_z"], p_key_given_z=params["p_key_given_z"])
        table = cs.mdi_expected_stats(channel, model)
        q = cs.q_values(model, table, pk.coefficient_sets(model))
        problem = sdpcore.build_dual(model, gamma_w=gamma, q_guesses=q)
        yield "phase", problem, sdpcore.solve_dual(problem)
    else:
        from .runconfig import _decoy_pieces
        model, _ = _decoy_pieces(config, params)
        table = cs.decoy_expected_stats(channel, model)
        for target in ("phase", "detection"):
            csets = pk.coefficient_sets(model, target)
            q = cs.q_values(model, table, csets)
            problem = sdpcore.build_dual(model, target=target, gamma_w=gamma,
                                         q_guesses=q)
            yield target, problem, sdpcore.solve_dual(problem)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qkdkeyrate",
                                     description="finite-key QKD security bounds")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("keyrate", "sweep", "validate", "certify"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        if name in ("keyrate", "certify"):
            p.add_argument("--distance", type=float, default=None)
        if name in ("keyrate", "sweep", "certify"):
            p.add_argument("--out", default=None)
        if name == "sweep":
            p.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
    except (OSError, ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    seed = config["run.seed"] if args.seed is None else args.seed
    try:
        if args.command == "keyrate":
            return cmd_keyrate(config, args.distance, args.out, seed)
        if args.command == "sweep":
            return cmd_sweep(config, args.out, seed, args.threads)
        if args.command == "validate":
            return cmd_validate(config, seed)
        if args.command == "certify":
            out_dir = args.out or "certificates"
            return cmd_certify(config, out_dir, args.distance)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # surface, don't trace-dump, for scriptability
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
