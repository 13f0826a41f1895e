"""Multi-arm, multi-seed experiment harness with on-disk caching."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from threadpoolctl import threadpool_limits

from .config import RunConfig, parse_config_text
from .train import read_metrics, train

ARMS: dict[str, dict] = {
    "baseline": {"variant": "baseline"},
    "avg": {"variant": "sam", "strategy": "avg", "reweight": False},
    "max": {"variant": "sam", "strategy": "max", "reweight": False},
    "sp1": {"variant": "sam", "strategy": "sp1", "reweight": False},
    "spm": {"variant": "sam", "strategy": "spm", "reweight": False},
    "spm_rw": {"variant": "sam", "strategy": "spm", "reweight": True},
    "sam_smca": {"variant": "sam_smca", "strategy": "spm", "reweight": True},
}
DEFAULT_ARMS = ("baseline", "avg", "max", "sp1", "spm", "spm_rw")
RESULTS_HEADER = "arm,seed,final_train_loss,final_val_ap50,wall_ms"


@dataclass
class ArmResult:
    arm: str
    seed: int
    final_train_loss: float
    final_val_ap50: float
    wall_ms: float
    run_dir: str

    def to_csv(self) -> str:
        return (f"{self.arm},{self.seed},{self.final_train_loss:.9g},"
                f"{self.final_val_ap50:.9g},{self.wall_ms:.9g}")


def arm_config(base: RunConfig, arm: str, seed: int, out_root: str) -> RunConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}")
    return base.replace(seed=seed, out=os.path.join(out_root, arm, f"seed{seed}"), **ARMS[arm])


def is_complete(run: RunConfig) -> bool:
    """A cached run counts only if its config matches and it reached the final step.

    The stored output path is ignored so a results tree can be moved.
    """
    try:
        with open(os.path.join(run.out, "config.txt"), encoding="utf-8") as f:
            stored = RunConfig(**parse_config_text(f.read()))
        if stored.replace(out=run.out) != run:
            return False
        rows = read_metrics(os.path.join(run.out, "metrics.csv"))
    except (OSError, ValueError):
        return False
    return bool(rows) and rows[-1].step == run.steps and os.path.exists(os.path.join(run.out, "model.ckpt"))


def _run_one(run: RunConfig) -> str:
    with threadpool_limits(1):
        train(run)
    return run.out


def _summarize(arm: str, run: RunConfig) -> ArmResult:
    rows = read_metrics(os.path.join(run.out, "metrics.csv"))
    last = rows[-1]
    return ArmResult(arm, run.seed, last.train_loss, last.val_ap50, last.wall_ms, run.out)


def run_ablation(base: RunConfig, out_root: str, arms=DEFAULT_ARMS, seeds=(0, 1, 2), jobs: int = 1,
                 force: bool = False, log=print) -> list[ArmResult]:
    """Train every (arm, seed) pair not already cached and write ``results.csv``."""
    plan = [(arm, arm_config(base, arm, seed, out_root)) for seed in seeds for arm in arms]
    todo = [run for _, run in plan if force or not is_complete(run)]
    if log:
        log(f"{len(plan) - len(todo)} cached runs, {len(todo)} to train")
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for done in pool.map(_run_one, todo):
                if log:
                    log(f"finished {done}")
    else:
        for run in todo:
            _run_one(run)
            if log:
                log(f"finished {run.out}")
    results = [_summarize(arm, run) for arm, run in plan]
    os.makedirs(out_root, exist_ok=True)
    with open(os.path.join(out_root, "results.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write(RESULTS_HEADER + "\n")
        for r in results:
            f.write(r.to_csv() + "\n")
    return results
