"""Command-line entry point: gen-data, train, eval, sample, ablate.

Every option can come from a JSON config file (``--config``); flags given on
the command line win. The fully resolved configuration is written to
``run_manifest.json`` in the output directory, and that manifest can be fed
back through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path


from . import render
from .metrics import CSV_HEADER, EvalReport, evaluate, mean_predictor_report
from .model import CheckpointError, ConfigurationError, ModelConfig, load_checkpoint
from .sample import SampleConfig, SamplingError, batch_sample
from .scene import (
    Dataset,
    DatasetError,
    SceneError,
    SceneGenParams,
    build_dataset,
    load_dataset,
    load_radiomapseer,
    save_dataset,
    write_sample,
)
from .train import TrainConfig, TrainingError, train

logger = logging.getLogger("radioflow")

MANIFEST = "run_manifest.json"
CFG_SWEEP = [0.0] + [1.0 + 0.5 * i for i in range(11)]  # 0, 1.0, 1.5, ..., 6.0
STEPS_SWEEP = [1, 5, 10, 20, 50]
EVAL_BATCH = 16
MODULE_ARMS = [("w/o EMA", False, True), ("w/o SA", True, False), ("w/ EMA + SA", True, True)]


class CommandError(Exception):
    """Refusal with a short machine-readable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


COMMON = {"seed": 0, "out": None, "force": False}

DEFAULTS = {
    "gen-data": {
        "mode": "srm",
        "train": 128,
        "test": 32,
        "size": 32,
        "buildings": 6,
        "building_min": 4,
        "building_max": 8,
        "vehicles_min": 0,
        "vehicles_max": 8,
        "radiomapseer": None,
        "tx_per_map": 80,
    },
    "train": {
        "data": None,
        "mode": None,
        "variant": "lite",
        "base_channels": None,
        "depth": None,
        "sa": "on",
        "ema": "on",
        "epochs": 10,
        "batch_size": 8,
        "lr": 2e-3,
        "warmup": 100,
        "ema_decay": 0.999,
        "p_uncond": 0.1,
        "weight_decay": 0.0,
        "grad_clip": 1.0,
        "val_interval": 0,
        "save_interval": 0,
    },
    "eval": {"checkpoint": None, "data": None, "steps": 1, "w": 1.5, "ema": "on", "rows": 8, "batch_size": 16},
    "sample": {"checkpoint": None, "data": None, "n": 50, "steps": 1, "w": 1.5, "ema": "on", "png": False},
    "ablate": {
        "sweep": "cfg",
        "checkpoint": None,
        "data": None,
        "steps": 1,
        "w": 1.5,
        "ema": "on",
    },
}
# the modules sweep retrains, so ablate also accepts every training option
DEFAULTS["ablate"].update({k: v for k, v in DEFAULTS["train"].items() if k not in ("data", "mode", "sa", "ema")})


# -- argument parsing --------------------------------------------------------


def _on_off(v: str) -> str:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radioflow", description="Flow-matching radio map generation")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", default=None, help="JSON config or a previous run manifest")
        p.add_argument("--out", default=S, help="output directory")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--force", action="store_true", default=S, help="overwrite a non-empty output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    def training(p):
        p.add_argument("--variant", choices=["lite", "full"], default=S)
        p.add_argument("--base-channels", dest="base_channels", type=int, default=S)
        p.add_argument("--depth", type=int, default=S)
        p.add_argument("--epochs", type=int, default=S)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
        p.add_argument("--lr", type=float, default=S)
        p.add_argument("--warmup", type=int, default=S)
        p.add_argument("--ema-decay", dest="ema_decay", type=float, default=S)
        p.add_argument("--p-uncond", dest="p_uncond", type=float, default=S)
        p.add_argument("--weight-decay", dest="weight_decay", type=float, default=S)
        p.add_argument("--grad-clip", dest="grad_clip", type=float, default=S, help="0 disables clipping")
        p.add_argument("--val-interval", dest="val_interval", type=int, default=S)
        p.add_argument("--save-interval", dest="save_interval", type=int, default=S)

    def sampling(p):
        p.add_argument("--steps", type=int, default=S)
        p.add_argument("--w", type=float, default=S, help="guidance scale")
        p.add_argument("--ema", type=_on_off, default=S)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset or import RadioMapSeer")
    common(g)
    g.add_argument("--mode", choices=["srm", "drm"], default=S)
    g.add_argument("--train", type=int, default=S, help="train scenes (maps when importing)")
    g.add_argument("--test", type=int, default=S, help="test scenes (maps when importing)")
    g.add_argument("--size", type=int, default=S)
    g.add_argument("--buildings", type=int, default=S)
    g.add_argument("--building-min", dest="building_min", type=int, default=S)
    g.add_argument("--building-max", dest="building_max", type=int, default=S)
    g.add_argument("--vehicles-min", dest="vehicles_min", type=int, default=S)
    g.add_argument("--vehicles-max", dest="vehicles_max", type=int, default=S)
    g.add_argument("--radiomapseer", default=S, help="import from a RadioMapSeer root instead of generating")
    g.add_argument("--tx-per-map", dest="tx_per_map", type=int, default=S)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", default=S, help="dataset directory with train/ and test/")
    t.add_argument("--mode", choices=["srm", "drm"], default=S, help="expected dataset mode (inferred if omitted)")
    t.add_argument("--sa", type=_on_off, default=S, help="spatial attention")
    t.add_argument("--ema", type=_on_off, default=S)
    training(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(e)
    e.add_argument("--checkpoint", default=S)
    e.add_argument("--data", default=S)
    e.add_argument("--rows", type=int, default=S, help="rows in the comparison grid")
    e.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    sampling(e)

    s = sub.add_parser("sample", help="generate maps and time per-sample latency")
    common(s)
    s.add_argument("--checkpoint", default=S)
    s.add_argument("--data", default=S)
    s.add_argument("--n", type=int, default=S, help="number of test scenes")
    s.add_argument("--png", action="store_true", default=S)
    sampling(s)

    a = sub.add_parser("ablate", help="cfg / steps / modules sweeps")
    common(a)
    a.add_argument("--sweep", choices=["cfg", "steps", "modules"], default=S)
    a.add_argument("--checkpoint", default=S)
    a.add_argument("--data", default=S)
    sampling(a)
    training(a)
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {**COMMON, **DEFAULTS[command]}
    if ns.config:
        try:
            loaded = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CommandError("bad-config", f"cannot read config {ns.config}: {exc}") from exc
        if isinstance(loaded, dict) and "config" in loaded and "command" in loaded:
            if loaded["command"] != command:
                raise CommandError("bad-config", f"manifest is for '{loaded['command']}', not '{command}'")
            loaded = loaded["config"]
        if not isinstance(loaded, dict):
            raise CommandError("bad-config", "config must be a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise CommandError("bad-config", f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    cfg.update(explicit)
    if not cfg["out"]:
        raise CommandError("missing-option", "--out is required")
    return cfg


def prepare_out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()):
        if not cfg["force"]:
            raise CommandError("out-exists", f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, **extra) -> None:
    doc = {"command": command, "config": cfg, **extra}
    (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise CommandError("missing-option", f"--{k.replace('_', '-')} is required")


def _load_split(data: str, split: str) -> Dataset:
    root = Path(data)
    d = root / split if (root / split).is_dir() else root
    if not (d / "manifest.json").exists():
        raise CommandError("missing-data", f"no dataset manifest under {d}")
    return load_dataset(d)


def _model_config(cfg: dict, cond_channels: int, sa: bool) -> ModelConfig:
    kw = {"cond_channels": cond_channels, "use_spatial_attention": sa}
    if cfg.get("base_channels"):
        kw["base_channels"] = int(cfg["base_channels"])
    if cfg.get("depth"):
        kw["depth"] = int(cfg["depth"])
    factory = ModelConfig.lite if cfg["variant"] == "lite" else ModelConfig.full
    return factory(**kw)


def _train_config(cfg: dict, use_ema: bool) -> TrainConfig:
    return TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        warmup_steps=int(cfg["warmup"]),
        ema_decay=float(cfg["ema_decay"]),
        use_ema=use_ema,
        p_uncond=float(cfg["p_uncond"]),
        weight_decay=float(cfg["weight_decay"]),
        grad_clip=float(cfg["grad_clip"]) or None,
        seed=int(cfg["seed"]),
        val_interval=int(cfg["val_interval"]),
        save_interval=int(cfg["save_interval"]),
    )


def _sample_config(cfg: dict, **over) -> SampleConfig:
    kw = {"steps": int(cfg["steps"]), "guidance": float(cfg["w"]), "use_ema": cfg["ema"] == "on", "seed": int(cfg["seed"])}
    kw.update(over)
    return SampleConfig(**kw)


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    out = prepare_out(cfg)
    if cfg["radiomapseer"]:
        n_tr, n_te = int(cfg["train"]), int(cfg["test"])
        kw = {"tx_per_map": int(cfg["tx_per_map"]), "mode": cfg["mode"]}
        tr = load_radiomapseer(cfg["radiomapseer"], maps=list(range(n_tr)), **kw)
        te = load_radiomapseer(cfg["radiomapseer"], maps=list(range(n_tr, n_tr + n_te)), **kw)
        te.split = "test"
    else:
        params = SceneGenParams(
            size=int(cfg["size"]),
            n_buildings=int(cfg["buildings"]),
            building_min=int(cfg["building_min"]),
            building_max=int(cfg["building_max"]),
            vehicles_min=int(cfg["vehicles_min"]),
            vehicles_max=int(cfg["vehicles_max"]),
        )
        tr, te = build_dataset(params, int(cfg["train"]), int(cfg["test"]), cfg["mode"], seed=int(cfg["seed"]))
    save_dataset(tr, out / "train")
    save_dataset(te, out / "test")
    write_manifest(out, "gen-data", cfg, counts={"train": len(tr), "test": len(te)})
    print(f"wrote {len(tr)} train and {len(te)} test samples ({cfg['mode']}) to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data")
    tr = _load_split(cfg["data"], "train")
    te = _load_split(cfg["data"], "test") if (Path(cfg["data"]) / "test").is_dir() else None
    if cfg["mode"] and cfg["mode"] != tr.mode:
        want = 2 if cfg["mode"] == "srm" else 3
        raise CommandError(
            "mode-mismatch",
            f"model configured for {cfg['mode']} ({want} condition channels) but dataset is {tr.mode} "
            f"({tr.cond_channels} channels)",
        )
    mcfg = _model_config(cfg, tr.cond_channels, cfg["sa"] == "on")
    tcfg = _train_config(cfg, cfg["ema"] == "on")
    out = prepare_out(cfg)
    try:
        res = train(tr, mcfg, tcfg, out_dir=out, val_dataset=te)
    except ValueError as exc:
        if "condition channels" in str(exc):
            raise CommandError("mode-mismatch", str(exc)) from exc
        raise
    render.write_png(out / "loss.png", render.line_plot(res.log.losses))
    write_manifest(out, "train", cfg, model=asdict(mcfg), train=asdict(tcfg), steps=len(res.log.steps))
    print(f"trained {len(res.log.steps)} steps; final loss {res.log.losses[-1]:.5f}; checkpoint {res.checkpoint}")
    return 0


def _load_state(cfg: dict):
    _require(cfg, "checkpoint")
    try:
        return load_checkpoint(Path(cfg["checkpoint"]))[0]
    except FileNotFoundError as exc:
        raise CommandError("missing-checkpoint", f"checkpoint not found: {cfg['checkpoint']}") from exc


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "data")
    state = _load_state(cfg)
    te = _load_split(cfg["data"], "test")
    scfg = _sample_config(cfg)
    out = prepare_out(cfg)
    report = evaluate(state, te, scfg, batch_size=int(cfg["batch_size"]))
    extra = {}
    if (Path(cfg["data"]) / "train").is_dir():
        tr = _load_split(cfg["data"], "train")
        extra["mean_predictor"] = mean_predictor_report(tr.targets, te.targets).aggregate()
    report.to_csv(out / "metrics.csv", extra_rows=extra)
    _write_grid(out / "grid.png", state, te, scfg, int(cfg["rows"]))
    write_manifest(out, "eval", cfg, sample=asdict(scfg))
    agg = report.aggregate()
    print("aggregate " + " ".join(f"{k}={agg[k]:.6g}" for k in CSV_HEADER[1:]))
    if extra:
        print(f"mean-predictor nmse={extra['mean_predictor']['nmse']:.6g}")
    return 0


def _write_grid(path: Path, state, ds: Dataset, scfg: SampleConfig, rows: int) -> None:
    rows = max(1, min(rows, len(ds)))
    sub = ds.subset(range(rows))
    preds = batch_sample(state, list(sub.conditions), scfg).maps
    render.write_png(path, render.comparison_grid(sub.conditions, preds, sub.targets))


def cmd_sample(cfg: dict) -> int:
    _require(cfg, "data")
    state = _load_state(cfg)
    te = _load_split(cfg["data"], "test")
    n = min(int(cfg["n"]), len(te))
    scfg = _sample_config(cfg)
    out = prepare_out(cfg)
    res = batch_sample(state, list(te.conditions[:n]), scfg)
    for i in range(n):
        write_sample(out / f"pred_{i:05d}.rflw", te.conditions[i], res.maps[i])
        if cfg["png"]:
            render.write_png(out / f"pred_{i:05d}.png", render.to_gray_u8(res.maps[i]))
    stats = res.latency_stats()
    (out / "latency.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "sample", cfg, sample=asdict(scfg))
    print(f"latency {stats['mean_s']:.4f} +/- {stats['std_s']:.4f} s over {stats['count']} samples")
    return 0


def _sweep_row(value, report: EvalReport) -> list:
    agg = report.aggregate()
    return [value] + [repr(agg[k]) for k in CSV_HEADER[1:]]


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_ablate(cfg: dict) -> int:
    _require(cfg, "data")
    te = _load_split(cfg["data"], "test")
    sweep = cfg["sweep"]
    bs = EVAL_BATCH
    if sweep in ("cfg", "steps"):
        state = _load_state(cfg)
        out = prepare_out(cfg)
        rows = []
        if sweep == "cfg":
            for w in CFG_SWEEP:
                rows.append(_sweep_row(w, evaluate(state, te, _sample_config(cfg, guidance=w), bs)))
            _write_table(out / "cfg_sweep.csv", ["w"] + CSV_HEADER[1:], rows)
        else:
            for n in STEPS_SWEEP:
                rows.append(_sweep_row(n, evaluate(state, te, _sample_config(cfg, steps=n), bs)))
            _write_table(out / "steps_sweep.csv", ["steps"] + CSV_HEADER[1:], rows)
    else:
        tr = _load_split(cfg["data"], "train")
        out = prepare_out(cfg)
        rows = []
        trained = {}
        for arm, ema, sa in MODULE_ARMS:
            # theta does not depend on whether the EMA shadow is tracked, so the
            # "w/o EMA" arm reuses the raw weights of the run with the same SA flag
            if sa not in trained:
                mcfg = _model_config(cfg, tr.cond_channels, sa)
                trained[sa] = train(tr, mcfg, _train_config(cfg, True), out_dir=out / f"sa_{'on' if sa else 'off'}").state
            report = evaluate(trained[sa], te, _sample_config(cfg, use_ema=ema), bs)
            rows.append([arm, int(ema), int(sa)] + _sweep_row(arm, report)[1:])
        _write_table(out / "modules_sweep.csv", ["arm", "ema", "sa"] + CSV_HEADER[1:], rows)
    write_manifest(out, "ablate", cfg)
    for r in rows:
        print(",".join(str(v) for v in r))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "ablate": cmd_ablate}

ERROR_CODES = [
    (CommandError, None),
    (ConfigurationError, "config"),
    (CheckpointError, "checkpoint"),
    (DatasetError, "dataset"),
    (SceneError, "scene"),
    (TrainingError, "training"),
    (SamplingError, "sampling"),
    (ValueError, "invalid-value"),
]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except tuple(t for t, _ in ERROR_CODES) as exc:
        code = getattr(exc, "code", None) or next(c for t, c in ERROR_CODES if isinstance(exc, t))
        print(f"radioflow: error: code={code} command={ns.command} message={json.dumps(str(exc))}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
