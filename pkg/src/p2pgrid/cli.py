"""Command-line front end.

Exit codes: 0 success, 2 usage, 3 data (config, dataset or model files),
4 solver (market, D-OPF or power flow), 5 training.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_SOLVER = 4
EXIT_TRAINING = 5

log = logging.getLogger("p2pgrid")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _load_config(args):
    from .config import load_config

    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out_dir(args, kind: str, cfg, **inputs) -> Path:
    """Explicit ``--out`` or runs/<kind>-s<seed>-<config hash>.

    The directory gets a byte copy of the config and a ``run.json`` naming
    the subcommand, seed and content hashes of its inputs. Paths and worker
    counts are left out so the outputs stay byte-identical across machines.
    """
    from .config import default_config_path

    out = Path(args.out) if args.out else Path("runs") / f"{kind}-s{cfg.seed}-{cfg.fingerprint()[:8]}"
    out.mkdir(parents=True, exist_ok=True)
    src = Path(args.config) if getattr(args, "config", None) else default_config_path()
    (out / "config.toml").write_bytes(src.read_bytes())
    _write(out / "run.json", _json({"command": args.command, "seed": cfg.seed,
                                    "config_fingerprint": cfg.fingerprint(), **inputs}))
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .scenario import FEATURES, ScenarioError, generate_dataset, pearson_matrix

    cfg = _load_config(args)
    out = _out_dir(args, "data", cfg, n=args.n)
    t0 = time.perf_counter()
    last = [0]

    def progress(k, n):
        if k * 10 // n > last[0]:
            last[0] = k * 10 // n
            log.info("scenarios %d/%d", k, n)

    ds = generate_dataset(cfg, args.n, seed=cfg.seed, workers=args.workers, progress=progress)
    ds.save(out / "dataset")
    try:
        rho = pearson_matrix(ds)
        rows = [",".join(["", *FEATURES])]
        rows += [",".join([name, *(f"{v:.6f}" for v in row)]) for name, row in zip(FEATURES, rho)]
        (out / "pearson.csv").write_text("\n".join(rows) + "\n")
    except ScenarioError as exc:
        log.warning("no correlation matrix: %s", exc)
    m = ds.manifest
    log.info("kept %d of %d scenarios (%d infeasible) in %.1f s", m["n_kept"], m["n_requested"],
             m["n_dropped"], time.perf_counter() - t0)
    print(out / "dataset")
    return EXIT_OK


def _metrics_line(scores) -> str:
    return f"MAE (MW) {scores.mae / 1000:.4e}  RMSE (MW) {scores.rmse / 1000:.4e}  R2 {scores.r2:.4f}"


def cmd_train(args) -> int:
    from dataclasses import replace

    from . import surrogate
    from .scenario import Dataset, split

    cfg = _load_config(args)
    ds = Dataset.load(args.data)
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    out = _out_dir(args, "model", cfg, epochs=tcfg.epochs, train_seed=tcfg.seed,
                  dataset_manifest_sha256=_sha256(Path(args.data) / "manifest.json"))
    tr, te = split(len(ds), 0.8, tcfg.seed)
    t0 = time.perf_counter()

    def progress(rec):
        log.info("epoch %d train %.4e val %.4e |g| %.3e", rec.epoch, rec.train_loss,
                 rec.val_loss, rec.grad_norm)

    model, hist = surrogate.train(ds.X[tr], ds.y[tr], tcfg, cfg.model_shape, progress=progress)
    secs = time.perf_counter() - t0
    scores = surrogate.evaluate(model, ds.X[te], ds.y[te])
    surrogate.save(model, out / "model.bin")
    surrogate.save_history(hist, out / "history.csv")
    _write(out / "metrics.json", _json({
        "test": scores.as_dict(), "best_epoch": hist.best_epoch, "epochs_run": len(hist.records),
        "stopped_early": hist.stopped_early, "n_train": int(len(tr)), "n_test": int(len(te)),
        "dataset_seed": ds.manifest.get("seed"), "train_seed": tcfg.seed,
        "dataset_columns": ds.manifest.get("columns", {}),
    }))
    log.info("training took %.1f s", secs)
    print(_metrics_line(scores))
    return EXIT_OK


def cmd_eval_model(args) -> int:
    from . import surrogate
    from .scenario import Dataset, split

    cfg = _load_config(args)
    model = surrogate.load(args.model, expect=cfg.model_shape)
    ds = Dataset.load(args.data)
    idx = np.arange(len(ds)) if args.all else split(len(ds), 0.8, cfg.train.seed if args.seed is None else args.seed)[1]
    scores = surrogate.evaluate(model, ds.X[idx], ds.y[idx])
    print(_metrics_line(scores))
    return EXIT_OK


def cmd_run_case(args) -> int:
    from . import harness, surrogate
    from .market import convergence_log
    from .metrics import payoff_table_csv, voltage_violation

    if args.case == 3 and not args.model:
        raise UsageError("run-case 3 needs --model pointing at a trained surrogate file (see `train`)")
    cfg = _load_config(args)
    model = surrogate.load(args.model, expect=cfg.model_shape) if args.case == 3 else None
    out = _out_dir(args, f"case{args.case}", cfg, case=args.case,
                  model_sha256=_sha256(args.model) if model is not None else None)
    res = harness.run_case(cfg, args.case, model=model)
    _write(out / "result.json", res.to_json())
    _write(out / "convergence.csv", convergence_log(res.logs))
    _write(out / "payoff.csv", payoff_table_csv([res]))
    _write(out / "timing.json", _json({"wall_time_s": res.wall_time}))
    dev, nviol = voltage_violation(res.voltages)
    print(f"case {args.case}: traded {res.traded_total():.3f} kWh, payoff {res.payoff_total():.3f} Rs, "
          f"max voltage excursion {dev:.3f}% ({nviol} h), D-OPF {int(res.dopf_clearing.sum())} clearing / "
          f"{int(res.dopf_audit.sum())} audit, {res.wall_time:.2f} s")
    print(out)
    return EXIT_OK


def _load_result(path: Path):
    from .metrics import CaseResult

    path = Path(path)
    if path.is_dir():
        path = path / "result.json"
    try:
        d = json.loads(path.read_text())
        timing = path.parent / "timing.json"
        wall = json.loads(timing.read_text())["wall_time_s"] if timing.exists() else 0.0
    except (OSError, ValueError, KeyError) as exc:
        raise FileNotFoundError(f"cannot read case result {path}: {exc}") from exc
    return CaseResult.from_dict(d, wall_time=wall)


def cmd_compare(args) -> int:
    from .harness import compare
    from .metrics import payoff_table_csv

    results = [_load_result(p) for p in args.results]
    comp = compare(results)
    text = comp.table()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "comparison.txt", text + "\n")
        _write(out / "comparison.json", _json({"rows": {str(k): v for k, v in comp.rows.items()},
                                               "reductions": comp.reductions}))
        _write(out / "payoff_table.csv", payoff_table_csv(results))
    return EXIT_OK


def cmd_export_network(args) -> int:
    from .config import load_config
    from .network import load_network

    net = load_network(args.network) if args.network else load_config(args.config).network
    text = _json(net.summary())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="p2pgrid", description="Grid-aware P2P trading among microgrids.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="study config (TOML); defaults to the bundled one")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: runs/<kind>-s<seed>-<hash>)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the surrogate training set")
    g.add_argument("--n", type=_positive_int, required=True, help="number of scenarios")
    g.add_argument("--workers", type=_positive_int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train the DSO surrogate")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--epochs", type=_positive_int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-model", parents=[common], help="score a model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--all", action="store_true", help="score every record, not just the test split")
    e.set_defaults(func=cmd_eval_model)

    r = sub.add_parser("run-case", parents=[common], help="run case 1, 2 or 3 over the horizon")
    r.add_argument("case", type=int, choices=(1, 2, 3))
    r.add_argument("--model", help="trained surrogate (required for case 3)")
    r.set_defaults(func=cmd_run_case)

    c = sub.add_parser("compare", parents=[common], help="tabulate case results")
    c.add_argument("results", nargs="+", help="run-case output directories or result.json files")
    c.set_defaults(func=cmd_compare)

    x = sub.add_parser("export-network", parents=[common], help="dump the feeder as JSON")
    x.add_argument("--network", help="case file (default: the config's network)")
    x.set_defaults(func=cmd_export_network)
    return p


def _exit_code(exc: BaseException) -> int:
    from .config import ConfigError
    from .dopf import DopfError
    from .harness import HarnessError
    from .market import MarketError
    from .microgrid import LocalSolveError, MicrogridError
    from .network import CaseFileError, TopologyError
    from .powerflow import PowerFlowDiverged
    from .scenario import PipelineError, ScenarioError
    from .surrogate import ModelFormatError, SurrogateError

    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (ConfigError, CaseFileError, TopologyError, ModelFormatError, MicrogridError,
                        FileNotFoundError, OSError)):
        return EXIT_DATA
    if isinstance(exc, PipelineError):
        return EXIT_SOLVER
    if isinstance(exc, ScenarioError):
        return EXIT_DATA
    if isinstance(exc, SurrogateError):
        return EXIT_TRAINING
    if isinstance(exc, HarnessError) and exc.__cause__ is not None:
        code = _exit_code(exc.__cause__)
        return EXIT_SOLVER if code == 1 else code
    if isinstance(exc, (DopfError, MarketError, HarnessError, LocalSolveError, PowerFlowDiverged)):
        return EXIT_SOLVER
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"p2pgrid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # mapped to an exit class
        code = _exit_code(exc)
        if code == 1:
            raise
        print(f"p2pgrid: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
