"""Command-line entry point.

    snlds generate --seed 0 --out ball.dat [--config run.ini] [--set data.n=100]
    snlds train    --seed 0 --out runs/ball [--config run.ini] [--resume ckpt.bin]
    snlds evaluate --checkpoint runs/ball/final.bin --data ball_eval.dat --out report.csv
    snlds segment  --checkpoint runs/ball/final.bin --data ball_eval.dat --index 3
    snlds report   --metrics runs/ball/metrics.csv --out curve.csv

Exit codes: 0 success, 1 numeric failure, 2 configuration or usage error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from snlds import checkpoint, data, evaluation
from snlds.config import RunConfig, load_run_config
from snlds.errors import ConfigurationError, DivergenceError, NumericError, SnldsError, UsageError
from snlds.gumbel import GumbelSwitchingModel
from snlds.training import SwitchingModel, fit, log_relative_nll, save_training_checkpoint

log = logging.getLogger("snlds")

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

STANDARDIZER_FILE = "standardizer.json"

REPORT_FIELDS = ("dataset", "model", "seed", "f1_frame", "f1_switch_tol0", "f1_switch_tol5",
                 "alignment_mode")


# -- helpers -------------------------------------------------------------------

def _run_config(args) -> tuple[RunConfig, str | None]:
    text = None
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} does not exist")
        text = path.read_text()
    return load_run_config(text, args.set or ()), text


def build_model(rc: RunConfig):
    cls = GumbelSwitchingModel if rc["model"]["inference"] == "gumbel" else SwitchingModel
    return cls(rc.model_config())


def load_params(path, model):
    """Model parameters from a training checkpoint (optimizer state is ignored)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    prefix = "['params']"
    records = [(name[len(prefix):], value) for name, value in checkpoint.load_records(path)
               if name.startswith(prefix)]
    if not records:
        raise ConfigurationError(f"{path} holds no model parameters")
    return checkpoint.unflatten_like(model.init(jax.random.PRNGKey(0)), records)


def _load_dataset(path) -> list[data.Trajectory]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"dataset {path} does not exist")
    return data.load_dataset(path)


def _generate(rc: RunConfig, seed: int, n: int) -> list[data.Trajectory]:
    d = rc["data"]
    return data.generate(d["generator"], seed, T=d["T"], n=n, **rc.generator_params())


def _training_data(rc: RunConfig, seed: int):
    d = rc["data"]
    train_set = _load_dataset(d["path"]) if d["path"] else _generate(rc, seed, d["n"])
    if d["eval_path"]:
        eval_set = _load_dataset(d["eval_path"])
    elif d["eval_n"] > 0 and not d["path"]:
        eval_set = _generate(rc, seed + d["eval_seed_offset"], d["eval_n"])
    else:
        eval_set = []
    return train_set, eval_set


def _write_configs(out: Path, rc: RunConfig, original: str | None, seed: int) -> None:
    if original is not None:
        (out / "config.ini").write_text(original)
    (out / "config.resolved.ini").write_text(f"# seed = {seed}\n" + rc.to_ini())


def _posteriors(model, params, x, tau) -> np.ndarray:
    return np.asarray(jax.jit(model.posterior_marginals)(params, jnp.asarray(x), tau))


def _standardizer_for(checkpoint_path, D: int) -> data.Standardizer:
    """Training-set statistics saved beside a checkpoint; identity if absent."""
    path = Path(checkpoint_path).parent / STANDARDIZER_FILE
    if not path.is_file():
        return data.Standardizer.identity(D)
    return data.Standardizer.from_dict(json.loads(path.read_text()))


# -- commands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    rc, _ = _run_config(args)
    d = rc["data"]
    trajectories = _generate(rc, args.seed, d["n"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_dataset(out, trajectories)
    meta = {"generator": d["generator"], "generator_version": data.GENERATOR_VERSION,
            "seed": args.seed, "n": d["n"], "T": d["T"], "parameters": rc.generator_params()}
    Path(str(out) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if args.csv:
        data.export_csv(args.csv, trajectories)
    print(f"wrote {len(trajectories)} trajectories to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc, original = _run_config(args)
    cfg = rc.train_config(args.seed)
    model = build_model(rc)
    train_set, eval_set = _training_data(rc, args.seed)
    if not train_set:
        raise ConfigurationError("training dataset is empty")
    x, _ = data.stack(train_set)
    if x.shape[-1] != rc["model"]["D"]:
        raise ConfigurationError(f"data has D={x.shape[-1]}, model.D={rc['model']['D']}")
    standardizer = (data.Standardizer.fit(x) if rc["data"]["standardize"]
                    else data.Standardizer.identity(x.shape[-1]))
    x = standardizer(x)
    eval_x = eval_labels = None
    if eval_set:
        eval_x, eval_labels = data.stack(eval_set)
        eval_x = standardizer(eval_x)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_configs(out, rc, original, args.seed)
    (out / STANDARDIZER_FILE).write_text(json.dumps(standardizer.to_dict(), indent=2) + "\n")

    def progress(row):
        print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in row.items()), flush=True)

    try:
        result = fit(model, x, cfg, eval_x=eval_x, eval_labels=eval_labels, out_dir=out,
                     resume_from=args.resume, progress=None if args.quiet else progress)
    except DivergenceError as exc:
        print(f"training diverged at step {exc.step}; last good state in "
              f"{out / 'ckpt_last_good.bin'}", file=sys.stderr)
        return EXIT_DIVERGED
    save_training_checkpoint(out / "final.bin", result.params, result.opt_state, result.step)
    print(f"finished at step {result.step}; checkpoint {out / 'final.bin'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rc, _ = _run_config(args)
    model = build_model(rc)
    params = load_params(args.checkpoint, model)
    trajectories = _load_dataset(args.data)
    x, labels = data.stack(trajectories)
    if labels is None:
        raise UsageError("evaluation needs a labelled dataset")
    x = _standardizer_for(args.checkpoint, x.shape[-1])(x)
    e = rc["eval"]
    gamma1 = _posteriors(model, params, x, e["tau"])
    preds = [evaluation.decode(g) for g in gamma1]
    tolerances = tuple(sorted(set(e["tolerances"]) | {0, 5}))
    scores = evaluation.evaluate_dataset(preds, list(labels), mode=e["align_mode"],
                                         tolerances=tolerances, n_pred=model.config.K)
    row = {"dataset": args.dataset_name or Path(args.data).stem,
           "model": args.model_name or rc["model"]["inference"],
           "seed": args.seed if args.seed is not None else "",
           "f1_frame": scores["f1_frame"],
           "f1_switch_tol0": scores["f1_switch"][0],
           "f1_switch_tol5": scores["f1_switch"][5],
           "alignment_mode": e["align_mode"]}
    if args.out:
        path = Path(args.out)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            if new:
                writer.writeheader()
            writer.writerow(row)
    if args.gamma_csv:
        with open(args.gamma_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sequence", "t", "k", "gamma"])
            for i, g in enumerate(gamma1):
                for t, k in np.ndindex(g.shape):
                    writer.writerow([i, t, k, repr(float(g[t, k]))])
    print(", ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_segment(args) -> int:
    rc, _ = _run_config(args)
    model = build_model(rc)
    params = load_params(args.checkpoint, model)
    trajectories = _load_dataset(args.data)
    if not 0 <= args.index < len(trajectories):
        raise UsageError(f"index {args.index} outside dataset of {len(trajectories)} sequences")
    traj = trajectories[args.index]
    x = _standardizer_for(args.checkpoint, traj.x.shape[-1])(traj.x[None])
    gamma1 = _posteriors(model, params, x, rc["eval"]["tau"])[0]
    result = evaluation.segment(gamma1, traj.s_true, rc["eval"]["align_mode"],
                                rc["eval"]["tolerances"])
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "label", *[f"gamma_{k}" for k in range(gamma1.shape[1])]])
            for t, (label, g) in enumerate(zip(result.s_hat, gamma1)):
                writer.writerow([t, int(label), *[repr(float(v)) for v in g]])
    print(" ".join(str(int(s)) for s in result.s_hat))
    if traj.s_true is not None:
        print(f"f1_frame={result.f1_frame:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.metrics)
    if not path.is_file():
        raise ConfigurationError(f"metrics file {path} does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "nll" not in rows[0]:
        raise UsageError(f"{path} has no nll column")
    transformed = log_relative_nll([float(r["nll"]) for r in rows])
    fields = ["step", "nll", "log_rel_nll", "f1_frame"]
    target = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(target)
        writer.writerow(fields)
        for r, value in zip(rows, transformed):
            writer.writerow([r["step"], r["nll"], repr(float(value)), r.get("f1_frame", "")])
    finally:
        if args.out:
            target.close()
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snlds", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        return p

    p = with_config(sub.add_parser("generate", help="write a synthetic dataset"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="dataset file")
    p.add_argument("--csv", help="also export the trajectories as CSV")
    p.set_defaults(func=cmd_generate)

    p = with_config(sub.add_parser("train", help="fit a model"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--quiet", action="store_true", help="no per-log-step output")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("evaluate", help="score a checkpoint on labelled data"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report CSV (appended)")
    p.add_argument("--gamma-csv", help="dump posterior marginals as (sequence, t, k, gamma)")
    p.add_argument("--seed", type=int, help="seed recorded in the report")
    p.add_argument("--dataset-name")
    p.add_argument("--model-name")
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("segment", help="decode one sequence"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", help="CSV of labels and marginals")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("report", help="log-relative NLL curve from a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SnldsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
