"""``forecast`` command line.

Every command writes CSV plus a JSON summary into ``--out``. Errors print one
line to stderr and exit with status 1 (2 for bad arguments).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .experiments import (
    LOW_CUTOFF,
    head_count_sweep,
    load_experiment_config,
    run_ablation,
    run_bias_sampling_experiment,
    run_collapse_sim,
    write_outputs,
)
from .metrics import read_report, write_report
from .model import TrainedModel, evaluate, load_config, train
from .series_data import (
    DatasetConfig,
    Panel,
    categorize_array,
    gen_mixed_magnitude_dataset,
    read_dataset_csv,
    write_dataset_csv,
)

log = logging.getLogger("sparsecast")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_data(args):
    d = load_experiment_config(args.config)[0] if args.config else DatasetConfig()
    records = gen_mixed_magnitude_dataset(d, args.seed)
    out = Path(args.out)
    write_dataset_csv(records, out)
    panel = Panel.from_records(records)
    ref = d.reference_t
    cats = categorize_array(panel.trailing_agg(d.window)[:, ref])
    counts = Counter(c.value for c in cats)
    _write_json(
        out / "dataset.json",
        {"seed": args.seed, "n_series": len(records), "n_periods": d.n_periods, "reference_t": ref, "categories_at_reference": dict(sorted(counts.items())), "config": d.to_dict()},
    )


def cmd_train(args):
    cfg = load_config(args.config, seed=args.seed)
    panel = Panel.from_records(read_dataset_csv(args.data))
    meta = Path(args.data) / "dataset.json"
    if meta.exists():
        # keep the training window clear of the generated backtest periods
        cfg.train.backtest_periods = int(json.loads(meta.read_text(encoding="utf-8"))["config"]["backtest_periods"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = train(panel, cfg, progress=lambda e, loss: log.info("epoch %d loss %.6f", e, loss))
    model.save(out / "model.json")
    rows = [{"epoch": i, "loss": v} for i, v in enumerate(model.log)]
    write_outputs(rows, {"seed": cfg.train.seed, "epochs": len(model.log), "final_loss": model.log[-1] if model.log else None, "config": cfg.to_dict()}, out, "training")


def cmd_eval(args):
    model = TrainedModel.load(args.model)
    panel = Panel.from_records(read_dataset_csv(args.data))
    baseline = read_report(args.baseline) if args.baseline else None
    ev = evaluate(model, panel, baseline=baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(ev.rows, out / "report.csv", out / "report.json")


def cmd_sim_collapse(args):
    res = run_collapse_sim(args.sparsity, args.seed)
    summary = {"seed": args.seed, **res.summary()}
    write_outputs(res.rows(), summary, args.out, "collapse")


def cmd_ablate(args):
    dataset, base = load_experiment_config(args.config)
    res = run_ablation(args.variants.split(","), dataset, args.seeds, base, jobs=args.jobs)
    write_outputs(res.rows, res.summary, args.out, "ablation")


def cmd_sweep_heads(args):
    dataset, base = load_experiment_config(args.config)
    rows, summary = head_count_sweep(args.g, dataset, args.seeds, base, jobs=args.jobs)
    write_outputs(rows, summary, args.out, "sweep_heads")


def cmd_bias_sampling(args):
    dataset, base = load_experiment_config(args.config)
    rows, summary = run_bias_sampling_experiment(dataset, args.seeds, base, cutoffs=args.cutoffs, jobs=args.jobs)
    write_outputs(rows, summary, args.out, "bias_sampling")


def build_parser():
    p = argparse.ArgumentParser(prog="forecast", description="Sparse-demand quantile forecasting experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic mixed-magnitude dataset")
    g.add_argument("--config", help="TOML/JSON with a [dataset] table")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", required=True, help="model config (TOML/JSON)")
    t.add_argument("--data", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="backtest a checkpoint and report by category")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--baseline", help="report CSV/JSON to compute deltas against")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sim", help="simulations")
    ssub = s.add_subparsers(dest="simulation", required=True)
    c = ssub.add_parser("collapse", help="convolutional interval collapse under sparsity")
    c.add_argument("--sparsity", type=_floats, default=[0.0, 0.5, 0.9])
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_sim_collapse)

    def experiment(name, help_text, func):
        a = sub.add_parser(name, help=help_text)
        a.add_argument("--config", help="TOML/JSON with [dataset] and [model] tables")
        a.add_argument("--seeds", type=_ints, required=True)
        a.add_argument("--jobs", type=int, default=1, help="worker processes")
        a.add_argument("--out", required=True)
        a.set_defaults(func=func)
        return a

    a = experiment("ablate", "train variant grid and compare with the baseline", cmd_ablate)
    a.add_argument("--variants", default="v9,v11,v13,v17,v19")
    w = experiment("sweep-heads", "WQL by category across head counts", cmd_sweep_heads)
    w.add_argument("--g", type=_ints, default=[1, 2, 4, 6])
    b = experiment("bias-sampling", "over/under-bias under two sampling cutoffs", cmd_bias_sampling)
    b.add_argument("--cutoffs", type=_floats, default=[0.8, LOW_CUTOFF])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "seeds", None) == []:
        parser.error("--seeds must list at least one seed")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - the CLI reports any failure as an exit code
        if args.verbose:
            log.exception("failed")
        print(f"forecast {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
