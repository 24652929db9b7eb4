"""Command-line driver: run experiments, derive level tables, compare ablation arms."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import danuq, datagen, federation, nncore, reporting, weightstd
from .config import RunConfig, load_config
from .errors import FedwsqError, NumericalError, TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def evaluate(
    spec: nncore.ModelSpec,
    params: list[nncore.ParamBlock],
    test: datagen.Dataset,
    ws_cfg: weightstd.WsConfig,
) -> float:
    """Argmax-of-logits accuracy in [0, 1]; ties break toward the lower class index."""
    if len(test) == 0:
        raise ValueError("empty test set")
    logits = nncore.model_forward(spec, params, test.features, ws_cfg)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == test.labels))


def build_data(cfg: RunConfig) -> tuple[datagen.Dataset, datagen.Dataset, datagen.Partition]:
    dim = cfg.layer_sizes[0]
    combined = datagen.synth_classification(
        cfg.num_classes, dim, cfg.samples_per_class + cfg.test_per_class, cfg.spread, cfg.seed
    )
    train, test = datagen.split_holdout(combined, cfg.test_per_class)
    if cfg.iid:
        part = datagen.iid_partition(len(train), cfg.num_clients, cfg.seed)
    else:
        part = datagen.dirichlet_partition(train.labels, cfg.num_clients, cfg.alpha, cfg.seed)
    return train, test, part


def run_experiment(cfg: RunConfig, csv_path: str | None = None):
    """Execute all rounds; returns (reports, final state, partition hash, totals)."""
    train, test, part = build_data(cfg)
    pool = federation.ClientPool.from_partition(train, part)
    spec = federation.model_spec_from_config(cfg)
    ws_cfg = weightstd.WsConfig(rho=cfg.rho)
    alloc = federation.alloc_from_config(cfg)
    state = federation.init_global_state(cfg)

    out = open(csv_path, "w", encoding="utf-8", newline="") if csv_path else None
    if out:
        out.write(reporting.csv_header())
    reports: list[reporting.RoundReport] = []
    ema: float | None = None
    last_raw: float | None = None
    totals = {"uplink_bytes": 0, "weight_payload_bytes": 0}
    try:
        for t in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            state, info = federation.run_round(state, pool, alloc, cfg)
            if t == 1 or t % cfg.eval_every == 0:
                last_raw = evaluate(spec, state.params, test, ws_cfg)
            raw = last_raw if last_raw is not None else 0.0
            ema = reporting.ema_update(ema, raw, cfg.ema_smoothing)
            ms = int((time.perf_counter() - t0) * 1000) if cfg.record_timing else 0
            rep = reporting.RoundReport(
                round=t,
                train_loss=info.train_loss,
                test_acc_raw=raw,
                test_acc_ema=ema,
                uplink_bytes=info.uplink_bytes,
                bits_hist=info.bits_hist,
                wallclock_ms=ms,
            )
            totals["uplink_bytes"] += info.uplink_bytes
            totals["weight_payload_bytes"] += info.weight_payload_bytes
            reports.append(rep)
            if out:
                out.write(reporting.csv_row(rep))
    finally:
        if out:
            out.close()
    return reports, state, reporting.partition_hash(part.client_shards), totals


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.validate()
    except (FedwsqError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    started = time.perf_counter()
    try:
        reports, state, phash, totals = run_experiment(cfg, csv_path)
    except (TrainingError, NumericalError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    elapsed = time.perf_counter() - started
    lines = [
        f"rounds = {len(reports)}",
        f"partition = {phash}",
        f"final_train_loss = {reports[-1].train_loss if reports else float('nan')}",
        f"final_acc_raw = {reports[-1].test_acc_raw if reports else float('nan')}",
        f"final_acc_ema = {reports[-1].test_acc_ema if reports else float('nan')}",
        f"total_uplink_bytes = {totals['uplink_bytes']}",
        f"total_weight_payload_bytes = {totals['weight_payload_bytes']}",
        f"elapsed_seconds = {elapsed:.3f}",
        "",
        "effective config:",
        cfg.serialize().rstrip(),
    ]
    reporting.write_summary(os.path.join(args.out, "summary.txt"), lines)
    reporting.render_metrics_figure(reports, os.path.join(args.out, "metrics.png"))
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_levels(args) -> int:
    if args.bits not in danuq.SUPPORTED_BITS:
        print(f"unsupported bits: {args.bits}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    table = danuq.optimize_levels(args.bits, pin_zero=args.pin_zero)
    err = danuq.expected_error(table)
    ref = danuq.REFERENCE_TABLES[args.bits]
    dev = max(abs(a - b) for a, b in zip(table.levels, ref))
    path = os.path.join(args.out, f"levels_{args.bits}bit.txt")
    lines = [f"bits = {args.bits}", f"zero_pinned = {table.zero_pinned}"]
    lines += [f"q_{r} = {q:.6f}" for r, q in enumerate(table.levels)]
    lines += [
        f"expected_error = {err:.8f}",
        f"reference = {' '.join(f'{q:.3f}' for q in ref)}",
        f"max_deviation_vs_reference = {dev:.6f}",
    ]
    reporting.write_summary(path, lines)
    reporting.render_levels_figure(
        table.levels, ref, os.path.join(args.out, f"levels_{args.bits}bit.png")
    )
    print(f"{args.bits}-bit levels: {[round(q, 4) for q in table.levels]}")
    print(f"expected error: {err:.6f}")
    print(f"max deviation vs reference table: {dev:.6f}")
    return EXIT_OK


COMPARE_ARMS = ("ws_danuq", "ws_uq", "nows_danuq", "nows_uq", "fp32")


def _arm_config(cfg: RunConfig, arm: str) -> RunConfig:
    import dataclasses

    if arm == "fp32":
        return dataclasses.replace(cfg, quantizer="none")
    ws = arm.startswith("ws_")
    quant = "danuq" if arm.endswith("danuq") else "uniform"
    return dataclasses.replace(cfg, ws_enabled=ws, quantizer=quant)


def cmd_compare(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.validate()
    except (FedwsqError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    rows = []
    curves = {}
    try:
        for arm in COMPARE_ARMS:
            arm_cfg = _arm_config(cfg, arm)
            csv_path = os.path.join(args.out, f"{arm}_metrics.csv")
            reports, _, phash, totals = run_experiment(arm_cfg, csv_path)
            curves[arm] = reports
            last = reports[-1] if reports else None
            rows.append(
                (
                    arm,
                    phash,
                    repr(last.train_loss) if last else "nan",
                    repr(last.test_acc_raw) if last else "nan",
                    repr(last.test_acc_ema) if last else "nan",
                    str(totals["uplink_bytes"]),
                    str(totals["weight_payload_bytes"]),
                )
            )
    except (TrainingError, NumericalError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    cmp_path = os.path.join(args.out, "compare.csv")
    with open(cmp_path, "w", encoding="utf-8", newline="") as f:
        f.write(
            "arm,partition_hash,final_train_loss,final_acc_raw,final_acc_ema,"
            "total_uplink_bytes,total_weight_payload_bytes\n"
        )
        for row in rows:
            f.write(",".join(row) + "\n")
    reporting.render_compare_figure(curves, os.path.join(args.out, "compare.png"))
    print(f"wrote {cmp_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedwsq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federated experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=".")
    run.set_defaults(func=cmd_run)

    lv = sub.add_parser("levels", help="derive an optimal quantization level table")
    lv.add_argument("--bits", type=int, required=True)
    lv.add_argument("--pin-zero", type=lambda s: s.lower() in ("true", "1"), default=True)
    lv.add_argument("--out", default=".")
    lv.set_defaults(func=cmd_levels)

    cp = sub.add_parser("compare", help="run the WS x quantizer ablation grid")
    cp.add_argument("--config", required=True)
    cp.add_argument("--seed", type=int, default=None)
    cp.add_argument("--out", default=".")
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
