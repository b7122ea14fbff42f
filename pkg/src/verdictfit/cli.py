"""Command-line surface: simulate, fit (nlls / supervised / ssverdict),
train-supervised, evaluate, sweep-snr, and protocol show.

Every command writes its outputs plus one manifest sidecar; partial
outputs are removed on failure and the exit code is nonzero.  The
--threads flag (or VERDICT_THREADS) caps BLAS threading before numpy is
loaded; results are identical for any thread count.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path


def _set_threads(argv):
    value = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif a.startswith("--threads="):
            value = a.split("=", 1)[1]
    if value is None:
        value = os.environ.get("VERDICT_THREADS")
    if value:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(value))
    return value


class _OutputTracker:
    """Collects files written by a command so failures clean them up."""

    def __init__(self):
        self.paths = []

    def add(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def cleanup(self):
        for p in self.paths:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass


def _parser():
    parser = argparse.ArgumentParser(
        prog="verdictfit",
        description="Simulate, fit and evaluate the three-compartment "
        "prostate diffusion model.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (results are unaffected)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset CSV")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--snr", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--protocol", default=None, help="protocol CSV (default: built-in)")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-unphysical-fvasc", action="store_true",
                   help="skip the f_ic + f_ees <= 1 rejection step")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit per-voxel parameters")
    p.add_argument("method", choices=["nlls", "supervised", "ssverdict"])
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", default=None, help="pretrained model JSON (supervised)")
    p.add_argument("--train-data", default=None,
                   help="dataset CSV to train the supervised model on")
    p.add_argument("--save-model", default=None, help="write the trained model JSON")
    p.add_argument("--trace", default=None,
                   help="training trace CSV (default: <out>.trace.csv for trained fits)")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--multistart", choices=["none", "d_slices", "rd_slices"],
                   default=None, help="NLLS restart strategy")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train-supervised", help="train the supervised regressor")
    p.add_argument("--train-data", required=True)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--protocol", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.set_defaults(func=cmd_train_supervised)

    p = sub.add_parser("evaluate", help="score estimates against ground truth")
    p.add_argument("--truth", required=True, help="dataset CSV with truth columns")
    p.add_argument("--est", action="append", required=True, metavar="NAME=PATH",
                   help="estimates CSV per method (repeatable)")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--variance-of-truth", action="store_true",
                   help="report the printed-form (ground truth) variance")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-snr", help="per-SNR fit-error distributions")
    p.add_argument("--levels", default="10,25,50,75,100")
    p.add_argument("--n-per-level", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--methods", default="nlls,supervised,ssverdict")
    p.add_argument("--train-n", type=int, default=100000,
                   help="size of the SNR-50 supervised training set")
    p.add_argument("--protocol", default=None)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_sweep_snr)

    p = sub.add_parser("protocol", help="protocol utilities")
    p.add_argument("action", choices=["show"])
    p.add_argument("--protocol", default=None)
    p.set_defaults(func=cmd_protocol)
    return parser


def _load_protocol_arg(path):
    from .protocol import default_protocol, load_protocol

    return load_protocol(path) if path else default_protocol()


def cmd_simulate(args, argv, tracker):
    from . import datafiles, simulate
    from .protocol import save_protocol

    if args.n < 1:
        raise SystemExit(_usage_error("--n must be >= 1"))
    if not args.snr > 0:
        raise SystemExit(_usage_error("--snr must be > 0"))
    protocol = _load_protocol_arg(args.protocol)
    t0 = time.perf_counter()
    dataset = simulate.generate_dataset(
        args.n, args.snr, protocol=protocol, seed=args.seed,
        allow_unphysical=args.allow_unphysical_fvasc,
    )
    t_gen = time.perf_counter() - t0
    out = tracker.add(args.out)
    datafiles.save_dataset_csv(dataset, out)
    protocol_file = tracker.add(str(out) + ".protocol.csv")
    save_protocol(protocol, protocol_file)
    tracker.add(datafiles.write_manifest(
        out, "simulate", argv,
        config={"n": args.n, "snr": args.snr,
                "allow_unphysical_fvasc": args.allow_unphysical_fvasc},
        seeds={"master": args.seed},
        inputs=[args.protocol] if args.protocol else [],
        outputs=[out, protocol_file],
        runtime_s={"generate": t_gen},
        extra={"dataset": datafiles.dataset_sidecar(dataset, protocol_file)},
    ))
    print(f"wrote {out} ({args.n} voxels, snr {args.snr})")


def _train_config(kind, args, seed):
    from . import neuralnet as nn

    factory = nn.supervised_config if kind == "supervised" else nn.selfsupervised_config
    overrides = {"seed": seed}
    for name in ("max_epochs", "batch_size", "patience"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return factory(**overrides)


def cmd_fit(args, argv, tracker):
    import dataclasses

    import numpy as np

    from . import datafiles, neuralnet as nn, nlls

    protocol = datafiles.protocol_for_input(args.in_path, args.protocol)
    ids, signals, _ = datafiles.load_signals(args.in_path)
    if signals.shape[1] != len(protocol):
        raise SystemExit(_usage_error(
            f"{args.in_path} has {signals.shape[1]} signal columns but the "
            f"protocol has {len(protocol)}"))
    out = tracker.add(args.out)
    inputs = [args.in_path]
    runtime = {}
    config_snapshot = {}
    extra_outputs = []

    t0 = time.perf_counter()
    if args.method == "nlls":
        config = nlls.NllsConfig() if args.multistart is None else nlls.NllsConfig(
            multistart=args.multistart)
        results = nlls.fit_volume(signals, protocol, config)
        params = np.array([r.params for r in results])
        extras = {
            "residual": np.array([r.residual_norm for r in results]),
            "iterations": np.array([r.iterations for r in results]),
            "converged": np.array([int(r.converged) for r in results]),
        }
        datafiles.save_estimates_csv(out, ids, params, extras)
        config_snapshot = {
            f.name: getattr(config, f.name)
            for f in dataclasses.fields(config)
            if f.name not in ("bounds",)
        }
    elif args.method == "supervised":
        if args.model:
            model, meta = nn.load_model(args.model)
            if meta.get("kind") != "supervised":
                raise SystemExit(_usage_error(f"{args.model} is not a supervised model"))
            inputs.append(args.model)
            scaled = bool(meta.get("labels_scaled", True))
            config_snapshot = {"model": str(args.model)}
        elif args.train_data:
            train_protocol = datafiles.protocol_for_input(args.train_data, args.protocol)
            train_ds = datafiles.load_dataset_csv(args.train_data, train_protocol)
            config = _train_config("supervised", args, args.seed)
            model, trace = nn.train_supervised(train_ds, config)
            scaled = config.scale_labels
            inputs.append(args.train_data)
            config_snapshot = dataclasses.asdict(config)
            trace_path = tracker.add(args.trace or str(out) + ".trace.csv")
            datafiles.save_trace_csv(trace_path, trace)
            extra_outputs.append(trace_path)
            if args.save_model:
                model_path = tracker.add(args.save_model)
                nn.save_model(model, model_path, kind="supervised",
                              extra={"labels_scaled": scaled})
                extra_outputs.append(model_path)
        else:
            raise SystemExit(_usage_error(
                "fit supervised needs --model or --train-data"))
        params = nn.predict_supervised(model, signals, scaled_labels=scaled)
        datafiles.save_estimates_csv(out, ids, params)
    else:  # ssverdict: trains and predicts on the input dataset itself
        config = _train_config("ssverdict", args, args.seed)
        model, params, trace = nn.train_selfsupervised(signals, protocol, config)
        datafiles.save_estimates_csv(out, ids, params)
        config_snapshot = dataclasses.asdict(config)
        trace_path = tracker.add(args.trace or str(out) + ".trace.csv")
        datafiles.save_trace_csv(trace_path, trace)
        extra_outputs.append(trace_path)
        if args.save_model:
            model_path = tracker.add(args.save_model)
            nn.save_model(model, model_path, kind="ssverdict")
            extra_outputs.append(model_path)
    runtime["fit"] = time.perf_counter() - t0

    tracker.add(datafiles.write_manifest(
        out, f"fit {args.method}", argv,
        config=config_snapshot,
        seeds={"master": args.seed},
        inputs=inputs,
        outputs=[out, *extra_outputs],
        runtime_s=runtime,
    ))
    print(f"wrote {out} ({len(ids)} voxels, {args.method}, {runtime['fit']:.1f}s)")


def cmd_train_supervised(args, argv, tracker):
    import dataclasses

    from . import datafiles, neuralnet as nn

    protocol = datafiles.protocol_for_input(args.train_data, args.protocol)
    train_ds = datafiles.load_dataset_csv(args.train_data, protocol)
    config = _train_config("supervised", args, args.seed)
    t0 = time.perf_counter()
    model, trace = nn.train_supervised(train_ds, config)
    runtime = {"train": time.perf_counter() - t0}
    out = tracker.add(args.out)
    nn.save_model(model, out, kind="supervised",
                  extra={"labels_scaled": config.scale_labels})
    trace_path = tracker.add(args.trace or str(out) + ".trace.csv")
    datafiles.save_trace_csv(trace_path, trace)
    tracker.add(datafiles.write_manifest(
        out, "train-supervised", argv,
        config=dataclasses.asdict(config),
        seeds={"master": args.seed},
        inputs=[args.train_data],
        outputs=[out, trace_path],
        runtime_s=runtime,
    ))
    print(f"wrote {out} (best epoch {trace.best_epoch}, {trace.stop_reason})")


def cmd_evaluate(args, argv, tracker):
    import json

    from . import datafiles, metrics

    truth_ids, truth = datafiles.load_estimates_csv(args.truth)
    estimates = {}
    for spec_arg in args.est:
        if "=" not in spec_arg:
            raise SystemExit(_usage_error(f"--est needs NAME=PATH, got {spec_arg!r}"))
        name, path = spec_arg.split("=", 1)
        if not Path(path).exists():
            raise SystemExit(_usage_error(f"estimates file not found: {path}"))
        ids, params = datafiles.load_estimates_csv(path)
        if ids.shape != truth_ids.shape or (ids != truth_ids).any():
            raise SystemExit(_usage_error(f"voxel ids in {path} do not match truth"))
        estimates[name] = params

    report = metrics.method_report(
        truth, estimates, dataset_manifest=datafiles.read_manifest(args.truth),
        variance_of_truth=args.variance_of_truth,
    )
    prefix = args.out_prefix
    report_path = tracker.add(f"{prefix}.report.json")
    report_path.write_text(json.dumps(report.to_json_dict(), indent=1, sort_keys=True) + "\n")
    table_path = tracker.add(f"{prefix}.table.txt")
    table_path.write_text(report.format_table())
    scatter_paths = []
    for name, params in estimates.items():
        for k, param in enumerate(metrics.REPORT_PARAMS):
            path = tracker.add(f"{prefix}.scatter.{name}.{param}.csv")
            datafiles._write_rows(
                path, ["truth", "estimate"],
                ([repr(float(t)), repr(float(e))] for t, e in zip(truth[:, k], params[:, k])),
            )
            scatter_paths.append(path)
    tracker.add(datafiles.write_manifest(
        f"{prefix}.report.json", "evaluate", argv,
        config={"variance_of_truth": args.variance_of_truth},
        seeds={},
        inputs=[args.truth] + [s.split("=", 1)[1] for s in args.est],
        outputs=[report_path, table_path, *scatter_paths],
        runtime_s={},
    ))
    print(report.format_table())
    print(f"wrote {report_path}")


def cmd_sweep_snr(args, argv, tracker):
    import json

    import numpy as np

    from . import datafiles, metrics, neuralnet as nn, nlls, simulate

    levels = [float(v) for v in args.levels.split(",") if v]
    if not levels or any(not v > 0 for v in levels):
        raise SystemExit(_usage_error("--levels must be positive numbers"))
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = set(methods) - {"nlls", "supervised", "ssverdict"}
    if bad:
        raise SystemExit(_usage_error(f"unknown methods: {sorted(bad)}"))
    protocol = _load_protocol_arg(args.protocol)
    runtime = {}

    sup_model = None
    if "supervised" in methods:
        # The regressor is trained once, on a reference SNR-50 set, and
        # applied across every level.
        t0 = time.perf_counter()
        train_ds = simulate.generate_dataset(
            args.train_n, 50.0, protocol=protocol,
            seed=simulate.derive_seed(args.seed, 900001),
        )
        sup_config = nn.supervised_config(seed=simulate.derive_seed(args.seed, 900002))
        sup_model, _ = nn.train_supervised(train_ds, sup_config)
        runtime["train_supervised"] = time.perf_counter() - t0

    diff_rows = []
    summary_rows = []
    rank_summary = {}
    for li, level in enumerate(levels):
        ds = simulate.generate_dataset(
            args.n_per_level, level, protocol=protocol,
            seed=simulate.derive_seed(args.seed, li),
        )
        level_est = {}
        for method in methods:
            t0 = time.perf_counter()
            if method == "nlls":
                results = nlls.fit_volume(ds.noisy, protocol)
                est = np.array([r.params for r in results])
            elif method == "supervised":
                est = nn.predict_supervised(sup_model, ds.noisy)
            else:
                config = _ss_config_for(
                    args.n_per_level, simulate.derive_seed(args.seed, 1000 + li))
                _, est, _ = nn.train_selfsupervised(ds.noisy, protocol, config)
            runtime[f"{method}@snr{level:g}"] = time.perf_counter() - t0
            level_est[method] = est

        for k, param in enumerate(metrics.REPORT_PARAMS):
            medians = {}
            for method, est in level_est.items():
                diff = est[:, k] - ds.params[:, k]
                for d in diff:
                    diff_rows.append([f"{level:g}", method, param, repr(float(d))])
                q1, q2, q3 = np.percentile(diff, [25, 50, 75])
                medians[method] = q2
                summary_rows.append(
                    [f"{level:g}", method, param,
                     repr(float(q1)), repr(float(q2)), repr(float(q3))]
                )
            closest = min(medians, key=lambda m: abs(medians[m]))
            rank_summary[f"snr{level:g}.{param}"] = {
                "closest_to_zero": closest,
                "medians": {m: float(v) for m, v in medians.items()},
            }

    prefix = args.out_prefix
    diffs_path = tracker.add(f"{prefix}.diffs.csv")
    datafiles._write_rows(diffs_path, ["snr", "method", "param", "diff"], diff_rows)
    summary_path = tracker.add(f"{prefix}.quartiles.csv")
    datafiles._write_rows(
        summary_path, ["snr", "method", "param", "q1", "median", "q3"], summary_rows
    )
    ranks_path = tracker.add(f"{prefix}.ranks.json")
    ranks_path.write_text(json.dumps(rank_summary, indent=1, sort_keys=True) + "\n")
    tracker.add(datafiles.write_manifest(
        f"{prefix}.diffs.csv", "sweep-snr", argv,
        config={"levels": levels, "n_per_level": args.n_per_level,
                "methods": methods, "train_n": args.train_n},
        seeds={"master": args.seed},
        inputs=[args.protocol] if args.protocol else [],
        outputs=[diffs_path, summary_path, ranks_path],
        runtime_s=runtime,
    ))
    print(f"wrote {diffs_path}, {summary_path}, {ranks_path}")


def _ss_config_for(n: int, seed: int):
    """Sweep configuration for the self-supervised fitter at dataset size
    n: the batch size shrinks on small sets and the epoch cap targets a
    fixed ~1.2e5 update budget, which is where the fitter converges at
    its 1e-4 learning rate."""
    from . import neuralnet as nn

    batch = int(min(128, max(16, n // 32)))
    updates_per_epoch = max(1, math.ceil(0.8 * n / batch))
    epochs = int(min(6000, max(300, math.ceil(120_000 / updates_per_epoch))))
    return nn.selfsupervised_config(seed=seed, batch_size=batch, max_epochs=epochs)


def cmd_protocol(args, argv, tracker):
    from . import forward_model as fm
    from .protocol import PhysicalConstants, gradient_strength

    protocol = _load_protocol_arg(args.protocol)
    constants = PhysicalConstants()
    print("idx  b(s/mm2)  delta(ms)  Delta(ms)  te(ms)  is_b0  G(mT/m)")
    for i, s in enumerate(protocol.settings):
        g_mt_per_m = gradient_strength(s, constants) * 1e9
        print(f"{i:3d}  {s.b:8.0f}  {s.delta:9.1f}  {s.Delta:9.1f}  {s.te:6.1f}  "
              f"{int(s.is_b0):5d}  {g_mt_per_m:7.2f}")
    roots = fm.default_root_table()
    print(f"\nsphere root table: {roots.m_count} roots, "
          f"max residual {abs(roots.residuals()).max():.2e}")


def _usage_error(message: str) -> int:
    print(f"verdictfit: {message}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_threads(argv)
    parser = _parser()
    args = parser.parse_args(argv)
    tracker = _OutputTracker()
    try:
        args.func(args, argv, tracker)
    except SystemExit:
        tracker.cleanup()
        raise
    except (ValueError, OSError) as exc:
        tracker.cleanup()
        print(f"verdictfit: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
