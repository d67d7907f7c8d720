"""Command-line front end.

Subcommands: train, eval, predict, ablate, sweep-ts, energy.  Configuration
comes from flags plus an optional key=value config file; flags override the
file, unknown keys are rejected, and the resolved configuration is echoed
into the output directory for reproducibility.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import SeriesDataset, load_csv, make_windows, synth_generate
from .energy import OpCounter, estimate_energy, write_report_csv, write_report_text
from .errors import ContractError
from .model import ABLATIONS, ForecastModel, ModelConfig, evaluate, train

_CONFIG_TYPES = {name: type(getattr(ModelConfig(), name)) for name in asdict(ModelConfig())}

_FLAG_ALIASES = {
    "nodes": "n_nodes",
    "input_len": "t_in",
    "horizon": "horizon",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = ModelConfig()
    p.add_argument("--config", type=str, default=None,
                   help="key=value config file; flags override it")
    p.add_argument("--data", type=str, default="synthetic",
                   help="dataset CSV path, or 'synthetic'")
    p.add_argument("--synth-steps", type=int, default=2000,
                   help="length of the synthetic series")
    p.add_argument("--out", type=str, default="runs/latest", help="output directory")
    p.add_argument("--nodes", type=int, default=defaults.n_nodes, help="node count (synthetic)")
    p.add_argument("--input-len", type=int, default=defaults.t_in, help="input window length T")
    p.add_argument("--horizon", type=int, default=defaults.horizon, help="forecast horizon L")
    p.add_argument("--emb-dim", type=int, default=defaults.emb_dim, help="node embedding width")
    p.add_argument("--k1", type=int, default=defaults.k1, help="local sample budget")
    p.add_argument("--k2", type=int, default=defaults.k2, help="semi-global sample budget")
    p.add_argument("--d1", type=int, default=defaults.d1, help="hop-1 width")
    p.add_argument("--d2", type=int, default=defaults.d2, help="hop-2 width")
    p.add_argument("--h-dim", type=int, default=defaults.h_dim, help="LSTM hidden width")
    p.add_argument("--d-k", type=int, default=defaults.d_k, help="attention key width")
    p.add_argument("--ts", type=int, default=defaults.ts, help="SNN sub-steps per series step")
    p.add_argument("--beta", type=float, default=defaults.beta, help="membrane decay")
    p.add_argument("--u-th", type=float, default=defaults.u_th, help="firing threshold")
    p.add_argument("--u-reset", type=float, default=defaults.u_reset, help="reset potential")
    p.add_argument("--alpha", type=float, default=defaults.alpha, help="surrogate sharpness")
    p.add_argument("--lam", type=float, default=defaults.lam, help="self-loop weight")
    p.add_argument("--lr", type=float, default=defaults.lr, help="learning rate")
    p.add_argument("--epochs", type=int, default=defaults.epochs, help="training epochs")
    p.add_argument("--seed", type=int, default=defaults.seed, help="RNG seed")
    p.add_argument("--ablation", type=str, default=defaults.ablation, choices=ABLATIONS,
                   help="architecture variant")
    p.add_argument("--batch-size", type=int, default=defaults.batch_size, help="batch size")
    p.add_argument("--stride", type=int, default=defaults.stride, help="window stride")
    p.add_argument("--max-batches", type=int, default=defaults.max_batches,
                   help="cap on train batches per epoch (0 = all)")


def _read_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _FLAG_ALIASES.get(key, key)
        if key not in _CONFIG_TYPES:
            raise ContractError(f"{path}:{lineno}: unknown config key '{key}'")
        caster = _CONFIG_TYPES[key]
        if caster is bool:
            values[key] = val.lower() in ("1", "true", "yes")
        elif caster is str:
            values[key] = val
        else:
            values[key] = caster(val)
    return values


def _build_config(args: argparse.Namespace) -> ModelConfig:
    cfg = ModelConfig()
    if args.config:
        cfg = replace(cfg, **_read_config_file(args.config))
    overrides = {}
    mapping = {
        "n_nodes": "nodes", "t_in": "input_len", "horizon": "horizon",
        "emb_dim": "emb_dim", "k1": "k1", "k2": "k2", "d1": "d1", "d2": "d2",
        "h_dim": "h_dim", "d_k": "d_k", "ts": "ts", "beta": "beta",
        "u_th": "u_th", "u_reset": "u_reset", "alpha": "alpha", "lam": "lam",
        "lr": "lr", "epochs": "epochs", "seed": "seed", "ablation": "ablation",
        "batch_size": "batch_size", "stride": "stride", "max_batches": "max_batches",
    }
    parser_defaults = vars(_default_args())
    for field, flag in mapping.items():
        value = getattr(args, flag)
        if args.config and value == parser_defaults.get(flag) and field in _read_config_file(args.config):
            continue  # keep the file value unless the flag was changed
        overrides[field] = value
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _default_args() -> argparse.Namespace:
    p = argparse.ArgumentParser()
    _add_config_flags(p)
    return p.parse_args([])


def _load_dataset(args: argparse.Namespace, cfg: ModelConfig) -> SeriesDataset:
    if args.data == "synthetic":
        return synth_generate(cfg.n_nodes, args.synth_steps, cfg.seed)
    ds = load_csv(args.data)
    return ds


def _echo_config(cfg: ModelConfig, outdir: Path, extra: dict | None = None) -> None:
    lines = [f"{k} = {v}" for k, v in asdict(cfg).items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    (outdir / "run_config.txt").write_text("\n".join(lines) + "\n")


def _write_metrics_csv(path: Path, report) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "r2", "rse"])
        for e in report.epochs:
            writer.writerow([e.epoch, f"{e.loss:.8f}", f"{e.r2:.6f}", f"{e.rse:.6f}"])


def _train_once(dataset: SeriesDataset, cfg: ModelConfig, quiet: bool = False):
    if dataset.sample_rate_s < 3600:
        cfg = replace(cfg, minute_covariate=True)
    cfg = replace(cfg, n_nodes=dataset.n_nodes)
    model = ForecastModel(cfg)
    log = None if quiet else (lambda e: print(
        f"  epoch {e.epoch}: loss={e.loss:.5f} val_r2={e.r2:.4f} val_rse={e.rse:.4f}"))
    report, windows = train(model, dataset, cfg, log_fn=log)
    return model, report, windows


# -- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _build_config(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(args, cfg)
    model, report, _ = _train_once(dataset, cfg)
    ckpt.save_model(outdir / "checkpoint.stag", model)
    _write_metrics_csv(outdir / "metrics.csv", report)
    _echo_config(model.config, outdir, {"data": args.data})
    summary = (f"test_r2 = {report.test_r2:.6f}\n"
               f"test_rse = {report.test_rse:.6f}\n")
    (outdir / "summary.txt").write_text(summary)
    print(f"test R2 {report.test_r2:.4f}  RSE {report.test_rse:.4f}")
    print(f"wrote {outdir / 'checkpoint.stag'}")
    return 0


def cmd_eval(args) -> int:
    model = ckpt.load_model(args.checkpoint)
    cfg = model.config
    dataset = _load_dataset(args, cfg)
    windows = make_windows(dataset, cfg.t_in, cfg.horizon, stride=cfg.stride)
    r2, rse = evaluate(model, windows, windows.test_starts, cfg.batch_size)
    print(f"R2 {r2:.6f}")
    print(f"RSE {rse:.6f}")
    return 0


def cmd_predict(args) -> int:
    model = ckpt.load_model(args.checkpoint)
    cfg = model.config
    dataset = _load_dataset(args, cfg)
    windows = make_windows(dataset, cfg.t_in, cfg.horizon, stride=cfg.stride)
    start = windows.test_starts[-1] if windows.test_starts else 0
    batch = windows.batch([start])
    forecast = model.predict(batch)  # (L, N)
    out = Path(args.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + list(dataset.node_names))
        for step in range(cfg.horizon):
            iso = str(np.datetime_as_string(batch.target_times[0][step], unit="s")) + "+00:00"
            writer.writerow([iso] + [f"{v:.6f}" for v in forecast[step]])
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = {}
    for ablation in ABLATIONS:
        r2s, rses = [], []
        for seed in seeds:
            run_cfg = replace(cfg, ablation=ablation, seed=seed)
            dataset = _load_dataset(args, run_cfg)
            _, report, _ = _train_once(dataset, run_cfg, quiet=True)
            r2s.append(report.test_r2)
            rses.append(report.test_rse)
        rows[ablation] = (statistics.median(r2s), statistics.median(rses))
        print(f"{ablation}: R2 {rows[ablation][0]:.4f}  RSE {rows[ablation][1]:.4f}")
    best = max(rows, key=lambda k: rows[k][0])
    with open(outdir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "r2", "rse", "best"])
        for ablation, (r2, rse) in rows.items():
            writer.writerow([ablation, f"{r2:.6f}", f"{rse:.6f}",
                             "*" if ablation == best else ""])
    _echo_config(cfg, outdir, {"seeds": args.seeds})
    print(f"best variant: {best}")
    return 0


def cmd_sweep_ts(args) -> int:
    cfg = _build_config(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    ts_values = [int(s) for s in args.ts_values.split(",")]
    rows = []
    for ts in ts_values:
        run_cfg = replace(cfg, ts=ts)
        dataset = _load_dataset(args, run_cfg)
        _, report, _ = _train_once(dataset, run_cfg, quiet=True)
        rows.append((ts, report.test_r2, report.test_rse))
        print(f"Ts={ts}: R2 {report.test_r2:.4f}  RSE {report.test_rse:.4f}")
    r2s = [r for (_, r, _) in rows]
    stability = max(r2s) - min(r2s)
    with open(outdir / "sweep_ts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ts", "r2", "rse"])
        for ts, r2, rse in rows:
            writer.writerow([ts, f"{r2:.6f}", f"{rse:.6f}"])
        writer.writerow(["stability_max_minus_min_r2", f"{stability:.6f}", ""])
    _echo_config(cfg, outdir)
    print(f"R2 stability (max - min): {stability:.4f}")
    return 0


def cmd_energy(args) -> int:
    model = ckpt.load_model(args.checkpoint)
    cfg = model.config
    dataset = _load_dataset(args, cfg)
    windows = make_windows(dataset, cfg.t_in, cfg.horizon, stride=cfg.stride)
    starts = (windows.test_starts or windows.train_starts)[: args.batch]
    batch = windows.batch(starts)
    counter = OpCounter()
    counter.counts.param_count = model.param_count()
    counter.counts.batch_elements = batch.batch_size
    from . import autograd as ag
    with counter, ag.no_grad():
        model.forward(batch, counter=counter)
    report = estimate_energy(counter.counts, e_mac=args.e_mac, e_ac=args.e_ac)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_report_text(report, outdir / "energy.txt")
    write_report_csv(report, outdir / "energy.csv")
    print(f"Model            Param (M)  Ops (G)   Energy (mJ)  Energy Reduction")
    print(f"spiking          {report.param_millions:9.3f}  {report.ops_g:8.4f}  "
          f"{report.total_mj:11.6f}  {report.reduction_pct:6.2f}%")
    print(f"dense twin       {report.param_millions:9.3f}  {report.twin_ops_g:8.4f}  "
          f"{report.twin_total_mj:11.6f}       /")
    print(f"wrote {outdir / 'energy.txt'} and {outdir / 'energy.csv'}")
    return 0


# -- entry point ------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="spikestag",
        description="Adaptive-graph spiking forecaster: training, evaluation and energy tooling",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write a checkpoint",
                             formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_config_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split",
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p_eval.add_argument("checkpoint", type=str)
    _add_config_flags(p_eval)
    p_eval.set_defaults(fn=cmd_eval)

    p_pred = sub.add_parser("predict", help="write a forecast CSV from a checkpoint",
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p_pred.add_argument("checkpoint", type=str)
    p_pred.add_argument("out_file", type=str)
    _add_config_flags(p_pred)
    p_pred.set_defaults(fn=cmd_predict)

    p_abl = sub.add_parser("ablate", help="train W1-W4 and compare",
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_config_flags(p_abl)
    p_abl.add_argument("--seeds", type=str, default="1,2,3", help="comma-separated seeds")
    p_abl.set_defaults(fn=cmd_ablate)

    p_sweep = sub.add_parser("sweep-ts", help="train across Ts values and compare",
                             formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--ts-values", type=str, default="4,8,12,16",
                         help="comma-separated Ts values")
    p_sweep.set_defaults(fn=cmd_sweep_ts)

    p_en = sub.add_parser("energy", help="count ops and estimate energy for a checkpoint",
                          formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p_en.add_argument("checkpoint", type=str)
    _add_config_flags(p_en)
    p_en.add_argument("--batch", type=int, default=8, help="windows in the counted batch")
    p_en.add_argument("--e-mac", type=float, default=4.6, help="pJ per multiply-accumulate")
    p_en.add_argument("--e-ac", type=float, default=0.9, help="pJ per accumulate")
    p_en.set_defaults(fn=cmd_energy)

    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
