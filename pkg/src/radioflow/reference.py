"""Desk-scale reference experiment: synthetic SRM 32x32, 128 train / 32 test, Lite.

Shared by ``scripts/reference_run.py`` (which writes the committed results)
and the acceptance suite (which re-runs or reloads it).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cli import CFG_SWEEP, STEPS_SWEEP
from .metrics import CSV_HEADER, EvalReport, evaluate, mean_predictor_report
from .model import ModelConfig, ModelState, load_checkpoint
from .sample import SampleConfig
from .scene import Dataset, SceneGenParams, build_dataset
from .train import TrainConfig, train


@dataclass(frozen=True)
class ReferenceConfig:
    scene: SceneGenParams = SceneGenParams(size=32, n_buildings=6, building_min=4, building_max=8)
    n_train: int = 128
    n_test: int = 32
    mode: str = "srm"
    data_seed: int = 0
    model: ModelConfig = ModelConfig.lite()
    train: TrainConfig = TrainConfig(epochs=300, batch_size=8, lr=2e-3, warmup_steps=100, seed=0)
    sample: SampleConfig = SampleConfig(steps=1, guidance=1.5, use_ema=True, seed=0)

    def to_json(self) -> dict:
        return {
            "scene": asdict(self.scene),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "mode": self.mode,
            "data_seed": self.data_seed,
            "model": asdict(self.model),
            "train": asdict(self.train),
            "sample": asdict(self.sample),
        }


REFERENCE = ReferenceConfig()


@dataclass
class ReferenceResult:
    state: ModelState
    losses: list[float]
    train_set: Dataset
    test_set: Dataset
    seconds: float = 0.0
    tables: dict[str, list[dict]] = field(default_factory=dict)


def datasets(cfg: ReferenceConfig = REFERENCE) -> tuple[Dataset, Dataset]:
    return build_dataset(cfg.scene, cfg.n_train, cfg.n_test, cfg.mode, seed=cfg.data_seed)


def run(cfg: ReferenceConfig = REFERENCE, out_dir: Path | None = None) -> ReferenceResult:
    tr, te = datasets(cfg)
    t0 = time.perf_counter()
    res = train(tr, cfg.model, cfg.train, out_dir=out_dir)
    return ReferenceResult(res.state, res.log.losses, tr, te, time.perf_counter() - t0)


def load(directory: Path, cfg: ReferenceConfig = REFERENCE) -> ReferenceResult:
    """Reload a committed run; refuses one whose recorded config differs from ``cfg``."""
    directory = Path(directory)
    recorded = json.loads((directory / "reference_config.json").read_text(encoding="utf-8"))
    if recorded != json.loads(json.dumps(cfg.to_json())):
        raise ValueError(f"{directory} was produced by a different reference configuration")
    state, _ = load_checkpoint(directory / "checkpoint.rfck")
    losses = [float(line.split(",")[1]) for line in (directory / "train_log.csv").read_text().splitlines()[1:]]
    summary = json.loads((directory / "summary.json").read_text(encoding="utf-8"))
    tr, te = datasets(cfg)
    return ReferenceResult(state, losses, tr, te, summary.get("train_seconds", 0.0))


def _row(report: EvalReport) -> dict:
    return report.aggregate()


def sweeps(result: ReferenceResult, cfg: ReferenceConfig = REFERENCE) -> dict[str, list[dict]]:
    """Guidance and step-count sweeps of the trained reference model."""
    base = cfg.sample
    te = result.test_set
    cfg_rows = []
    for w in CFG_SWEEP:
        sc = SampleConfig(steps=base.steps, guidance=w, use_ema=base.use_ema, seed=base.seed)
        cfg_rows.append({"w": w, **_row(evaluate(result.state, te, sc))})
    steps_rows = []
    for n in STEPS_SWEEP:
        sc = SampleConfig(steps=n, guidance=base.guidance, use_ema=base.use_ema, seed=base.seed)
        steps_rows.append({"steps": n, **_row(evaluate(result.state, te, sc))})
    return {"cfg": cfg_rows, "steps": steps_rows}


def write_table(path: Path, key: str, rows: list[dict]) -> None:
    lines = [",".join([key] + CSV_HEADER[1:])]
    lines += [",".join([str(r[key])] + [repr(float(r[k])) for k in CSV_HEADER[1:]]) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def baseline_nmse(result: ReferenceResult) -> float:
    return mean_predictor_report(result.train_set.targets, result.test_set.targets).aggregate()["nmse"]


def summarize(result: ReferenceResult, cfg: ReferenceConfig = REFERENCE) -> dict:
    report = evaluate(result.state, result.test_set, cfg.sample)
    first = float(np.mean(result.losses[: max(1, len(result.losses) // cfg.train.epochs)]))
    per_epoch = max(1, len(result.losses) // cfg.train.epochs)
    last = float(np.mean(result.losses[-per_epoch:]))
    return {
        "test": report.aggregate(),
        "mean_predictor_nmse": baseline_nmse(result),
        "first_epoch_loss": first,
        "last_epoch_loss": last,
        "train_seconds": result.seconds,
        "steps": len(result.losses),
    }
