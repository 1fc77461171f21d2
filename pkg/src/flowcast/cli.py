"""Command line: ``flowcast {simulate,train,forecast,evaluate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, SyntheticConfig, conservation_audit, split_dataset, \
    synthetic_advection_dataset, write_frame
from .forecast import Forecaster, lead_frames, persistence
from .metrics import ACC_FORMULA, Region, acc, crps_gaussian, crps_point, lat_rmse, parse_region
from .network import ModelConfig
from .training import TrainConfig, fit, load_checkpoint

log = logging.getLogger("flowcast")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise CliError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - {"data", "model", "train", "split", "dataset", "leads_hours", "regions"}
    if unknown:
        raise CliError(f"{path}: unknown config sections {sorted(unknown)}")
    cfg["_base"] = str(p.parent)
    return cfg


def _dataset_path(args, cfg: dict) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    if "dataset" in cfg:
        return Path(cfg["_base"]) / cfg["dataset"]
    raise CliError("no dataset given (use --data or a 'dataset' entry in the config)")


def _splits(manifest: DatasetManifest, cfg: dict):
    split = dict(cfg.get("split", {"rule": "block"}))
    rule = split.pop("rule", "block")
    if "fractions" in split:
        split["fractions"] = tuple(split["fractions"])
    return split_dataset(manifest, rule, **split)


def _leads(args, cfg: dict) -> list[float]:
    if args.leads:
        try:
            hours = [float(x) for x in args.leads.split(",") if x.strip()]
        except ValueError:
            raise CliError(f"bad --leads {args.leads!r}") from None
    else:
        hours = cfg.get("leads_hours", [6, 12, 18, 24, 36])
    if not hours:
        raise CliError("no leads given")
    return hours


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    data = dict(cfg.get("data", {}))
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        scfg = SyntheticConfig.from_dict(data)
    except TypeError as exc:
        raise CliError(f"bad data config: {exc}") from None
    out = Path(args.out)
    manifest = synthetic_advection_dataset(scfg, out)
    audit = conservation_audit(manifest.stack())
    ints = audit["integrals"]
    print(f"wrote {len(manifest)} frames to {out / 'manifest.json'}")
    print("conservation audit (raw grid sums I_k,t):")
    print(f"{'quantity':<12}{'frames':>8}{'I_first':>22}{'I_last':>22}{'max_rel_drift':>16}")
    for k, name in enumerate(manifest.quantities):
        print(f"{name:<12}{len(manifest):>8}{ints[0, k]:>22.15g}{ints[-1, k]:>22.15g}"
              f"{audit['max_rel_drift'][k]:>16.3e}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest = DatasetManifest.load(_dataset_path(args, cfg) / "manifest.json")
    train, val, _ = _splits(manifest, cfg)
    model_cfg = dict(cfg.get("model", {}))
    model_cfg.setdefault("K", manifest.K)
    model_cfg.setdefault("pad_mode", manifest.grid.pad_mode)
    train_cfg = dict(cfg.get("train", {}))
    if args.seed is not None:
        train_cfg["seed"] = args.seed
    try:
        mcfg, tcfg = ModelConfig.from_dict(model_cfg), TrainConfig.from_dict(train_cfg)
    except TypeError as exc:
        raise CliError(f"bad model/train config: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = fit(train, val, mcfg, tcfg, out / "train_log.csv", out / "checkpoint.json")
    print(f"trained {tcfg.epochs} epochs; best epoch {res.best_epoch}; "
          f"{res.params.count()} parameters; checkpoint {out / 'checkpoint.json'}")
    return 0


def _eval_setup(args):
    cfg = load_config(args.config)
    manifest = DatasetManifest.load(_dataset_path(args, cfg) / "manifest.json")
    _, _, test = _splits(manifest, cfg)
    params, stats, tcfg = load_checkpoint(args.checkpoint)
    leads_h = _leads(args, cfg)
    leads_d = [h / 24.0 for h in leads_h]
    try:
        n_leads = lead_frames(leads_d, manifest.dt_days)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    fc = Forecaster(params, stats, tcfg, manifest)
    raw = test.stack()
    starts = list(range(2, len(raw) - max(n_leads)))
    if not starts:
        raise CliError("test split too short for the requested leads")
    regions = [parse_region(r) for r in (args.region or [])]
    regions += [Region(**r) for r in cfg.get("regions", [])]
    return cfg, manifest, test, fc, raw, starts, leads_h, leads_d, n_leads, regions


def _run_forecasts(fc, raw, test, starts, leads_d):
    return [fc.run(raw, test.times, s, leads_d) for s in starts]


def cmd_forecast(args) -> int:
    _, manifest, test, fc, raw, starts, leads_h, leads_d, n_leads, _ = _eval_setup(args)
    out = Path(args.out)
    fcs = _run_forecasts(fc, raw, test, starts, leads_d)
    for f in fcs:
        for h, d in zip(leads_h, leads_d):
            j = f.leads.index(d)
            stem = out / "forecasts" / f"start{f.start_index:04d}_lead{int(round(h)):03d}h"
            write_frame(stem.with_suffix(".mean.frame"), f.mean[j], f.t0 + d, manifest.quantities)
            write_frame(stem.with_suffix(".sigma.frame"), f.sigma[j], f.t0 + d, manifest.quantities)
    first = fcs[0]
    for h, d in zip(leads_h, leads_d):
        j = first.leads.index(d)
        for k, name in enumerate(manifest.quantities):
            stem = out / "render" / f"{name}_lead{int(round(h)):03d}h"
            render(first.mean[j, k], stem.with_suffix(".mean"))
            render(first.sigma[j, k], stem.with_suffix(".sigma"))
    print(f"wrote {len(fcs)} forecasts x {len(leads_h)} leads to {out / 'forecasts'}")
    return 0


def cmd_evaluate(args) -> int:
    _, manifest, test, fc, raw, starts, leads_h, leads_d, n_leads, regions = _eval_setup(args)
    fcs = _run_forecasts(fc, raw, test, starts, leads_d)
    grid = manifest.grid
    masks = [("global", None)] + [(r.name, r.mask(grid)) for r in regions]
    rows = []
    for h, d, n in zip(leads_h, leads_d, n_leads):
        truth = np.stack([raw[s + n] for s in starts])
        mean = np.stack([f.mean[f.leads.index(d)] for f in fcs])
        sigma = np.stack([f.sigma[f.leads.index(d)] for f in fcs])
        pers = np.stack([persistence(raw, s, [n])[0] for s in starts])
        for region, mask in masks:
            for label, pred, sig in (("model", mean, sigma), ("persistence", pers, None)):
                r = lat_rmse(truth, pred, grid, mask)
                a = _safe_acc(truth, pred, grid, mask)
                c = crps_point(truth, pred, grid, mask) if sig is None else \
                    crps_gaussian(truth, pred, sig, grid, mask)
                for k, name in enumerate(manifest.quantities):
                    rows.append({"forecast": label, "quantity": name, "lead_hours": h,
                                 "rmse": r[k], "acc": a[k], "crps": c[k], "region": region})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(ACC_FORMULA)
    print(f"{'forecast':<12}{'quantity':<10}{'lead_h':>7}{'rmse':>12}{'acc':>9}{'crps':>12}  region")
    for row in rows:
        print(f"{row['forecast']:<12}{row['quantity']:<10}{row['lead_hours']:>7g}{row['rmse']:>12.5g}"
              f"{row['acc']:>9.4f}{row['crps']:>12.5g}  {row['region']}")
    print(f"wrote {path}")
    return 0


def _safe_acc(truth, pred, grid, mask) -> np.ndarray:
    """ACC, or NaN with a warning where it is undefined so the other scores still get reported."""
    try:
        return acc(truth, pred, grid, mask)
    except ValueError as exc:
        print(f"warning: {exc}; acc written as nan", file=sys.stderr)
        return np.full(truth.shape[1], np.nan)


# ---------------------------------------------------------------------------
# renderings


def render(field: np.ndarray, stem: Path) -> None:
    """Write ``stem.pgm`` (8-bit greyscale, min-max scaled, north up) and ``stem.csv``."""
    stem.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(field, dtype=float)[::-1]
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape, dtype=np.uint8) if hi <= lo else \
        np.round(255.0 * (img - lo) / (hi - lo)).astype(np.uint8)
    h, w = scaled.shape
    with open(str(stem) + ".pgm", "wb") as fh:
        fh.write(f"P5\n# min {lo!r} max {hi!r}\n{w} {h}\n255\n".encode())
        fh.write(scaled.tobytes())
    np.savetxt(str(stem) + ".csv", np.asarray(field, dtype=float), delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowcast", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config (sections data/model/train/split)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", help="dataset directory containing manifest.json")

    s = sub.add_parser("simulate", help="generate a synthetic advection dataset")
    common(s, data=False)
    s.set_defaults(func=cmd_simulate)
    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.set_defaults(func=cmd_train)
    for name, func in (("forecast", cmd_forecast), ("evaluate", cmd_evaluate)):
        e = sub.add_parser(name, help=f"{name} on the test split")
        common(e)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--leads", help="comma-separated lead times in hours, e.g. 6,12,18,24,36")
        e.add_argument("--region", action="append", metavar="name:lat0,lat1,lon0,lon1",
                       help="extra evaluation region (repeatable)")
        e.set_defaults(func=func)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
