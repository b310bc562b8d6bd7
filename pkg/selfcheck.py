"""
In-process invariant suite behind the `selfcheck` subcommand.

Each check is seeded and sized to finish in seconds; results are written as
selfcheck.csv with columns check,passed,detail.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Tuple

import numpy as np

from config import FlowModelConfig, PathConfig, RigConfig, ScenarioConfig, TrainingConfig
from errors import EgoFlowError
from flow_dynamics import SceneFlowModel
from metrics import ClipLog, Command, TrajectoryFrame, TrajectoryLog, fcp_per_clip
from rig_geometry import EgoPose, PanoramicRig, SizePower, SteeringCircle, TurnDirection, adjust_sizes, build_layout, fit_steering_circle
from synth_harness import generate_sequence
from tensor_core import ParamInitializer, Tensor, finite_diff_grad, gru_cell, kl_diag_gaussian
from training import FlowTrainer, partition_sequence

logger = logging.getLogger(__name__)

SELFCHECK_CSV_NAME = "selfcheck.csv"


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_circle_fit(rng: np.random.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(200):
        xc, yc = rng.uniform(-50, 50, size=2)
        r = rng.uniform(1, 100)
        angles = rng.uniform(0, 2 * math.pi) + np.cumsum(rng.uniform(0.3, 1.5, size=3))
        p2, p1, p0 = [EgoPose(x=xc + r * math.cos(a), y=yc + r * math.sin(a), t=i) for i, a in enumerate(angles)]
        circle = fit_steering_circle(p2, p1, p0)
        if circle.is_straight:
            return False, "random circle reported as straight"
        scale = max(abs(xc), abs(yc), r)
        worst = max(worst, abs(circle.center_x - xc) / scale, abs(circle.center_y - yc) / scale, abs(circle.radius - r) / r)
    collinear = fit_steering_circle(EgoPose(x=0, y=0, t=0), EgoPose(x=1, y=0, t=1), EgoPose(x=2, y=0, t=2))
    return worst < 1e-9 and collinear.is_straight, f"max relative error {worst:.2e}"


def check_partition_sizes(rng: np.random.Generator) -> Tuple[bool, str]:
    turning_right = SteeringCircle(0.0, -10.0, 10.0, TurnDirection.RIGHT)
    p_left, p_right = adjust_sizes(8, turning_right, 2.0, SizePower.QUADRATIC)
    exact = abs(p_left - 9.68) < 1e-12 and abs(p_right - 6.48) < 1e-12
    outer = [adjust_sizes(8, SteeringCircle(0.0, -r, r, TurnDirection.RIGHT), 2.0)[0] for r in (5, 10, 50, 500)]
    monotone = all(a > b > 8 for a, b in zip(outer, outer[1:]))
    straight = adjust_sizes(8, SteeringCircle.straight(), 2.0) == (8.0, 8.0)
    return exact and monotone and straight, f"sizes=({p_left:.12f}, {p_right:.12f})"


def check_tiling(rng: np.random.Generator) -> Tuple[bool, str]:
    rig = PanoramicRig.from_config(RigConfig())
    for _ in range(500):
        level = int(rng.integers(0, 3))
        base = rig.base_size(level)
        s = rng.uniform(0, rig.perimeter)
        p_left, p_right = rng.uniform(1.0, 2.0, size=2) * base
        layout = build_layout(rig, s, p_left, p_right, level)
        bounds = np.asarray(layout.ring_boundaries)
        if np.any(np.diff(bounds) <= 0) or bounds[-1] - bounds[0] != rig.perimeter:
            return False, f"bad tiling at s={s:.3f} sizes=({p_left:.3f}, {p_right:.3f}) level={level}"
        covered = np.concatenate([np.arange(a, b) % rig.perimeter for a, b in zip(bounds[:-1], bounds[1:])])
        if not np.array_equal(np.sort(covered), np.arange(rig.perimeter)):
            return False, f"ring not covered exactly once at s={s:.3f}"
    return True, "500 layouts tile the ring"


def check_gradients(rng: np.random.Generator) -> Tuple[bool, str]:
    init = ParamInitializer(0)
    init.gru("gru", 4)
    params = init.build()
    report = finite_diff_grad(lambda x, h: gru_cell(x, h, params).sum(), [rng.normal(size=4), rng.normal(size=4)])
    return report.max_relative_error < 1e-4, f"GRU max relative error {report.max_relative_error:.2e}"


def monte_carlo_kl(mu_p: float, sigma_p: float, mu_q: float, sigma_q: float, rng: np.random.Generator, size: int = 100_000) -> float:
    """Sample mean of log p - log q under p, minus the zero-mean term linear in the draw."""
    z = rng.standard_normal(size)
    x = mu_p + sigma_p * z
    log_ratio = -0.5 * z**2 - math.log(sigma_p) + 0.5 * ((x - mu_q) / sigma_q) ** 2 + math.log(sigma_q)
    linear = (mu_p - mu_q) * sigma_p / sigma_q**2 * z
    return float(np.mean(log_ratio - linear))


def check_kl(rng: np.random.Generator) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        mu_p, mu_q = rng.normal(size=2)
        sigma_q = rng.uniform(0.5, 1.5)
        sigma_p = sigma_q * rng.uniform(0.8, 1.25)
        closed = kl_diag_gaussian(Tensor([mu_p]), Tensor([sigma_p]), Tensor([mu_q]), Tensor([sigma_q])).item()
        worst = max(worst, abs(closed - monte_carlo_kl(mu_p, sigma_p, mu_q, sigma_q, rng)))
    return worst < 1e-2, f"max Monte-Carlo gap {worst:.2e}"


def check_fcp(rng: np.random.Generator) -> Tuple[bool, str]:
    for _ in range(1000):
        count = int(rng.integers(1, 12))
        errors = rng.uniform(0, 1.2, size=count)
        frames = [TrajectoryFrame(pred_3s=(float(e), 0.0), gt_3s=(0.0, 0.0), lateral_3s=0.0) for e in errors]
        log = TrajectoryLog(clips=[ClipLog(command=Command.GO_STRAIGHT, frames=frames)])
        correct = np.nonzero(errors < 0.5)[0]
        brute = int(correct[0]) if correct.size else count
        if fcp_per_clip(log, 0.5)[0] != brute:
            return False, f"mismatch on errors {errors.tolist()}"
    return True, "1000 random clips match the first-correct-frame scan"


def check_determinism(rng: np.random.Generator) -> Tuple[bool, str]:
    scenario = ScenarioConfig(path=PathConfig(type="arc"), horizon=3, rig=RigConfig(num_cameras=4, width=16, height=2, channels=4, levels=[4]))
    a, b = generate_sequence(scenario), generate_sequence(scenario)
    same = all(np.array_equal(x.f_img, y.f_img) for x, y in zip(a.frames, b.frames)) and a.log == b.log
    return same, "two generations with one seed are identical"


def check_training_signal(rng: np.random.Generator) -> Tuple[bool, str]:
    rig_config = RigConfig(num_cameras=4, width=16, height=2, channels=4, levels=[4])
    scenario = ScenarioConfig(path=PathConfig(type="straight", speed=2.0), horizon=3, rig=rig_config)
    rig = PanoramicRig.from_config(rig_config)
    sequence = generate_sequence(scenario)
    units = partition_sequence(sequence, rig, 0, scenario.ego_width)
    model = SceneFlowModel(rig, FlowModelConfig(), horizon=scenario.horizon)
    result = FlowTrainer(model, TrainingConfig(steps=2000, log_every=500)).train(model.init_params(42), units)
    return result.final_loss <= 0.5 * result.initial_loss, f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}"


CHECKS: List[Tuple[str, Callable[[np.random.Generator], Tuple[bool, str]]]] = [
    ("circle_fit", check_circle_fit),
    ("partition_sizes", check_partition_sizes),
    ("layout_tiling", check_tiling),
    ("gradients", check_gradients),
    ("kl_closed_form", check_kl),
    ("fcp_oracle", check_fcp),
    ("determinism", check_determinism),
    ("training_signal", check_training_signal),
]


def run_selfcheck(seed: int) -> List[CheckResult]:
    results = []
    for name, check in CHECKS:
        try:
            passed, detail = check(np.random.default_rng(seed))
        except EgoFlowError as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        logger.info(f"Check {name}: {'passed' if passed else 'FAILED'} ({detail})")
        results.append(CheckResult(name, bool(passed), detail))
    return results


def write_selfcheck_csv(results: List[CheckResult], path: Path) -> Path:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["check", "passed", "detail"])
        for result in results:
            writer.writerow([result.name, str(result.passed).lower(), result.detail])
    return path
