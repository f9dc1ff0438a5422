"""Train the desk-scale reference model and write results/reference/.

    python3 scripts/reference_run.py [--out results/reference] [--modules]

Writes the checkpoint, loss trace, per-sample test metrics (with the
mean-predictor baseline row), the guidance and step-count sweeps, a
comparison grid and a summary. ``--modules`` also trains the no-attention
arm and writes modules_sweep.csv.
"""

import argparse
import json
import logging
from pathlib import Path

from radioflow import reference as R, render
from radioflow.metrics import CSV_HEADER, evaluate, mean_predictor_report
from radioflow.sample import SampleConfig, batch_sample
from radioflow.train import train


def modules_sweep(result: R.ReferenceResult, out: Path, cfg: R.ReferenceConfig = R.REFERENCE) -> None:
    from dataclasses import replace

    no_sa = train(result.train_set, replace(cfg.model, use_spatial_attention=False), cfg.train).state
    arms = [("w/o EMA", False, result.state), ("w/o SA", True, no_sa), ("w/ EMA + SA", True, result.state)]
    lines = [",".join(["arm", "ema", "sa"] + CSV_HEADER[1:])]
    for arm, ema, state in arms:
        sc = SampleConfig(cfg.sample.steps, cfg.sample.guidance, ema, cfg.sample.seed)
        agg = evaluate(state, result.test_set, sc).aggregate()
        sa = int(state.config.use_spatial_attention)
        lines.append(",".join([arm, str(int(ema)), str(sa)] + [repr(agg[k]) for k in CSV_HEADER[1:]]))
    (out / "modules_sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "results" / "reference")
    ap.add_argument("--modules", action="store_true", help="also run the attention/EMA module ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = R.REFERENCE
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    result = R.run(cfg, out_dir=out)
    (out / "reference_config.json").write_text(json.dumps(cfg.to_json(), indent=2) + "\n", encoding="utf-8")
    render.write_png(out / "loss.png", render.line_plot(result.losses))

    te = result.test_set
    report = evaluate(result.state, te, cfg.sample)
    baseline = mean_predictor_report(result.train_set.targets, te.targets).aggregate()
    report.to_csv(out / "metrics.csv", extra_rows={"mean_predictor": baseline})
    rows = min(4, len(te))
    preds = batch_sample(result.state, list(te.conditions[:rows]), cfg.sample).maps
    render.write_png(out / "grid.png", render.comparison_grid(te.conditions[:rows], preds, te.targets[:rows]))

    tables = R.sweeps(result, cfg)
    R.write_table(out / "cfg_sweep.csv", "w", tables["cfg"])
    R.write_table(out / "steps_sweep.csv", "steps", tables["steps"])
    summary = R.summarize(result, cfg)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))
    if args.modules:
        modules_sweep(result, out, cfg)


if __name__ == "__main__":
    main()
