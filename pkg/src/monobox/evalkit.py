"""Detection AP and orientation AOS with difficulty stratification.

Matching follows the devkit protocol: detections in descending score each
claim the unmatched difficulty-valid ground truth of highest 2D IoU above
the threshold (ties to the lowest index).  Ground truths of other classes,
DontCare regions, and boxes outside the difficulty window are "ignored":
detections overlapping them count as neither true nor false positives.

AP interpolates max precision over a recall grid (40-point by default,
11-point legacy available); AOS replaces each true positive's unit credit
with (1 + cos(alpha_gt - alpha_det)) / 2, so AOS <= AP always.

bench_inference times the head forward plus orientation decode in float32
on a fixed batch, single-threaded.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import net
from .kitti_io import DONT_CARE, ObjectLabel, parse_label_file
from .multibin import BinLayout, BinPrediction, decode

TP, FP, IGNORED = "tp", "fp", "ignored"


@dataclass(frozen=True)
class DifficultySpec:
    name: str
    min_height: float  # pixels
    max_occlusion: int
    max_truncation: float

    def admits(self, label: ObjectLabel) -> bool:
        return (label.bbox_height >= self.min_height
                and label.occlusion <= self.max_occlusion
                and label.truncation <= self.max_truncation)


DIFFICULTIES = (
    DifficultySpec("easy", 40.0, 0, 0.15),
    DifficultySpec("moderate", 25.0, 1, 0.30),
    DifficultySpec("hard", 25.0, 2, 0.50),
)


def iou_2d(a, b) -> float:
    """Intersection over union of two (left, top, right, bottom) boxes."""
    left = max(a[0], b[0])
    top = max(a[1], b[1])
    right = min(a[2], b[2])
    bottom = min(a[3], b[3])
    if right <= left or bottom <= top:
        return 0.0
    inter = (right - left) * (bottom - top)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one detection list against one ground-truth list.

    Arrays are aligned with detections in descending-score processing order.
    """

    det_order: np.ndarray  # original detection indices
    outcomes: tuple  # "tp" | "fp" | "ignored" per processed detection
    matched_gt: np.ndarray  # gt index for TPs, -1 otherwise
    similarities: np.ndarray  # (1 + cos d_alpha) / 2 for TPs, 0 otherwise
    n_valid_gt: int

    @property
    def n_tp(self) -> int:
        return sum(1 for o in self.outcomes if o == TP)


def match_detections(gt, det, iou_threshold: float, difficulty: DifficultySpec,
                     class_name: str) -> MatchResult:
    """Greedy score-ordered assignment of detections to ground truths."""
    for i, d in enumerate(det):
        if d.score is None:
            raise ValueError(f"detection {i} has no score")
    candidates = [i for i, d in enumerate(det) if d.class_name == class_name]
    candidates.sort(key=lambda i: (-det[i].score, i))

    valid = [g.class_name == class_name and difficulty.admits(g) for g in gt]
    n_valid = sum(valid)
    taken = [False] * len(gt)
    outcomes = []
    matched = []
    sims = []
    for i in candidates:
        best_iou = 0.0
        best_j = -1
        for j, g in enumerate(gt):
            if not valid[j] or taken[j]:
                continue
            iou = iou_2d(det[i].bbox, g.bbox)
            if iou >= iou_threshold and iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            outcomes.append(TP)
            matched.append(best_j)
            sims.append((1.0 + np.cos(gt[best_j].alpha - det[i].alpha)) / 2.0)
            continue
        absorbed = any(not valid[j] and iou_2d(det[i].bbox, g.bbox) >= iou_threshold
                       for j, g in enumerate(gt))
        outcomes.append(IGNORED if absorbed else FP)
        matched.append(-1)
        sims.append(0.0)
    return MatchResult(det_order=np.array(candidates, dtype=int),
                       outcomes=tuple(outcomes),
                       matched_gt=np.array(matched, dtype=int),
                       similarities=np.array(sims, dtype=float),
                       n_valid_gt=n_valid)


def recall_grid(points: int) -> np.ndarray:
    """40-point grid {1/40..1}; the 11-point legacy grid includes recall 0."""
    if points == 40:
        return np.arange(1, 41) / 40.0
    if points == 11:
        return np.arange(0, 11) / 10.0
    raise ValueError(f"unsupported interpolation: {points} points (use 40 or 11)")


def _interpolated(matches: MatchResult, n_valid_gt: int, points: int,
                  tp_credit) -> float:
    if n_valid_gt < 1:
        raise ValueError("no valid ground truth to evaluate against")
    recalls = []
    ratios = []
    cum_credit = 0.0
    cum_tp = 0
    cum_fp = 0
    for k, outcome in enumerate(matches.outcomes):
        if outcome == IGNORED:
            continue
        if outcome == TP:
            cum_tp += 1
            cum_credit += tp_credit(k)
        else:
            cum_fp += 1
        recalls.append(cum_tp / n_valid_gt)
        ratios.append(cum_credit / (cum_tp + cum_fp))
    recalls = np.array(recalls)
    ratios = np.array(ratios)
    total = 0.0
    for r in recall_grid(points):
        at_least = ratios[recalls >= r - 1e-12]
        total += at_least.max() if at_least.size else 0.0
    return 100.0 * total / points


def average_precision(matches: MatchResult, n_valid_gt: int, points: int = 40) -> float:
    """Interpolated AP in percent: mean over the grid of max precision
    at recall >= r."""
    return _interpolated(matches, n_valid_gt, points, lambda k: 1.0)


def average_orientation_similarity(matches: MatchResult, n_valid_gt: int,
                                   points: int = 40) -> float:
    """AP-style score where a true positive earns (1 + cos d_alpha) / 2."""
    return _interpolated(matches, n_valid_gt, points,
                         lambda k: matches.similarities[k])


@dataclass(frozen=True)
class DifficultyResult:
    spec: DifficultySpec
    ap: float
    aos: float
    n_valid_gt: int
    matches: MatchResult


@dataclass(frozen=True)
class EvalReport:
    class_name: str
    iou_threshold: float
    points: int
    results: tuple  # DifficultyResult per difficulty, in order


def default_iou_threshold(class_name: str) -> float:
    return 0.7 if class_name == "Car" else 0.5


def evaluate(gt, det, class_name: str, difficulties=DIFFICULTIES,
             iou_threshold: float | None = None, points: int = 40) -> EvalReport:
    """Match and score per difficulty.  gt and det are ObjectLabel lists."""
    if iou_threshold is None:
        iou_threshold = default_iou_threshold(class_name)
    results = []
    for spec in difficulties:
        matches = match_detections(gt, det, iou_threshold, spec, class_name)
        ap = average_precision(matches, matches.n_valid_gt, points)
        aos = average_orientation_similarity(matches, matches.n_valid_gt, points)
        results.append(DifficultyResult(spec=spec, ap=ap, aos=aos,
                                        n_valid_gt=matches.n_valid_gt,
                                        matches=matches))
    return EvalReport(class_name=class_name, iou_threshold=iou_threshold,
                      points=points, results=tuple(results))


def evaluate_files(gt_path, det_path, class_name: str, **kwargs) -> EvalReport:
    with open(gt_path, encoding="utf-8") as f:
        gt = parse_label_file(f.read())
    with open(det_path, encoding="utf-8") as f:
        det = parse_label_file(f.read())
    return evaluate(gt, det, class_name, **kwargs)


_COL = 12


def format_report_table(report: EvalReport) -> str:
    """Fixed-width table, one row per benchmark, one column per difficulty."""
    names = [r.spec.name.capitalize() for r in report.results]
    lines = [f"interpolation: {report.points}-point, "
             f"IoU >= {report.iou_threshold:g}"]
    header = f"{'Benchmark':<24}" + "".join(f"{n:>{_COL}}" for n in names)
    lines.append(header)
    for kind, attr in (("Detection", "ap"), ("Orientation", "aos")):
        row = f"{report.class_name} ({kind})"
        values = "".join(f"{getattr(r, attr):>{_COL}.2f}" for r in report.results)
        lines.append(f"{row:<24}" + values)
    return "\n".join(lines) + "\n"


def parse_report_table(text: str) -> dict:
    """Read the numbers back out of a format_report_table rendering.

    Returns {"<Class> (Detection)": {"Easy": float, ...}, ...}.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3:
        raise ValueError("report table too short")
    header = lines[1]
    columns = header[24:].split()
    out = {}
    for line in lines[2:]:
        row_name = line[:24].strip()
        values = line[24:].split()
        if len(values) != len(columns):
            raise ValueError(f"row {row_name!r} has {len(values)} values "
                             f"for {len(columns)} columns")
        out[row_name] = {c: float(v) for c, v in zip(columns, values)}
    return out


def report_key_values(report: EvalReport) -> dict:
    """Machine-readable form of a report, one key=value pair per figure."""
    out = {"class_name": report.class_name,
           "iou_threshold": repr(float(report.iou_threshold)),
           "interpolation_points": str(report.points)}
    for r in report.results:
        out[f"{r.spec.name}.ap"] = f"{r.ap:.6f}"
        out[f"{r.spec.name}.aos"] = f"{r.aos:.6f}"
        out[f"{r.spec.name}.n_gt"] = str(r.n_valid_gt)
    return out


@dataclass(frozen=True)
class BenchResult:
    batch_size: int
    feature_dim: int
    times: tuple  # seconds per timed batch
    mean: float
    p50: float
    p95: float

    @property
    def per_object_mean(self) -> float:
        return self.mean / self.batch_size


def bench_inference(params: net.HeadParams, features, layout: BinLayout,
                    repetitions: int = 50, warmup: int = 3) -> BenchResult:
    """Wall-clock forward + decode on a fixed batch, float32, single pass
    per repetition."""
    x = np.ascontiguousarray(features, dtype=np.float32)
    p32 = net.params_astype(params, np.float32)
    repetitions = max(int(repetitions), 1)

    def run():
        pred, _ = net.forward(p32, x)
        for i in range(pred.scores.shape[0]):
            decode(BinPrediction(scores=pred.scores[i],
                                 residual_sc=pred.residual_sc[i]), layout)

    for _ in range(max(warmup, 0)):
        run()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        run()
        times.append(time.perf_counter() - start)
    arr = np.array(times)
    return BenchResult(batch_size=x.shape[0], feature_dim=x.shape[1],
                       times=tuple(times), mean=float(arr.mean()),
                       p50=float(np.percentile(arr, 50)),
                       p95=float(np.percentile(arr, 95)))
