"""Two-phase training: density fitting on source label maps, then segmenter
adaptation, plus evaluation and the CSV emission contracts.

Reproducibility rules, enforced here: every run draws all of its randomness
from one generator seeded by OptimConfig.seed; batches for both domains are
drawn every step in the same order regardless of mode (so a bimal run with
lambda_t = 0 is bit-identical to source_only); per-sample work inside an
evaluation pass is order-merged, so the optional thread pool (BIMAL_THREADS)
never changes results.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import FlowModel
from .losses import (
    LabelMap,
    LossWeights,
    ProbMap,
    TauConfig,
    bimal_loss,
    entropy_loss,
    supervised_ce,
)
from .numerics import Graph, NumericalError, Param, Tensor, backward, conv2d
from .scenegen import NUM_CLASSES, SceneDataset, labels_to_flow_input
from .uds import uds_estimate
from . import tenio

__all__ = [
    "OptimConfig",
    "SegNet",
    "MetricsRecord",
    "sgd_step",
    "train_flow",
    "FlowTrainResult",
    "train_segmenter",
    "SegTrainResult",
    "evaluate",
    "miou_from_counts",
    "CURVE_HEADER",
    "metrics_header",
    "write_curve_csv",
    "append_metrics_csv",
    "strip_wall_ms",
    "save_seg_checkpoint",
    "load_seg_checkpoint",
    "SEG_MODES",
]

SEG_MODES = ("source_only", "bimal", "entmin")


def worker_count() -> int:
    """Worker cap from BIMAL_THREADS (default 1, floor 1)."""
    try:
        n = int(os.environ.get("BIMAL_THREADS", "1"))
    except ValueError:
        return 1
    return max(1, n)


def _map_indexed(fn, n: int) -> list:
    """Order-preserving map over range(n); threads never change the merge."""
    workers = worker_count()
    if workers == 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(n)))


@dataclass
class OptimConfig:
    """SGD with momentum and decoupled-ish weight decay (decay joins the
    gradient before the momentum update)."""

    learning_rate: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


def sgd_step(params: list[Param], cfg: OptimConfig, velocity: dict) -> None:
    """v <- momentum*v + grad + wd*value; value <- value - lr*v; grads zeroed.

    Raises NumericalError (naming the parameter) on any non-finite gradient,
    leaving all values untouched so the caller can restore a checkpoint.
    """
    for p in params:
        if not np.isfinite(p.grad.data).all():
            raise NumericalError(f"non-finite gradient in {p.name}")
    for p in params:
        g = p.grad.data + cfg.weight_decay * p.value.data
        v = velocity.get(p)
        v = g if v is None else cfg.momentum * v + g
        velocity[p] = v
        p.assign(p.value.data - cfg.learning_rate * v)
        p.zero_grad()


class SegNet:
    """Small fully convolutional segmenter: 3x3 convs with tanh between,
    widths in->16->32->32->C, log-softmax head."""

    def __init__(
        self,
        in_channels: int = 3,
        num_classes: int = NUM_CLASSES,
        widths: tuple[int, ...] = (16, 32, 32),
        seed: int = 0,
    ) -> None:
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.convs: list[tuple[Param, Param]] = []
        prev = in_channels
        for i, w in enumerate([*self.widths, num_classes]):
            k = rng.normal(0.0, (9 * prev) ** -0.5, size=(3, 3, prev, w))
            self.convs.append(
                (Param(k, f"seg.conv{i}_kernel"), Param(np.zeros(w), f"seg.conv{i}_bias"))
            )
            prev = w

    def params(self) -> list[Param]:
        return [p for pair in self.convs for p in pair]

    def logits(self, image: Tensor) -> Tensor:
        x = image
        last = len(self.convs) - 1
        for i, (k, b) in enumerate(self.convs):
            x = conv2d(x, k.value, b.value)
            if i != last:
                x = x.tanh()
        return x

    def predict(self, image: Tensor) -> ProbMap:
        return ProbMap.from_logits(self.logits(image))


# -- snapshots ---------------------------------------------------------------


def _snapshot(params: list[Param]) -> list[np.ndarray]:
    return [p.value.data.copy() for p in params]


def _restore(params: list[Param], snap: list[np.ndarray]) -> None:
    for p, data in zip(params, snap):
        p.assign(data)


# -- metrics -----------------------------------------------------------------


@dataclass
class MetricsRecord:
    """One evaluation row; per_class_iou holds NaN for classes absent from
    both prediction and ground truth (they are skipped by the mean)."""

    step: int
    per_class_iou: tuple[float, ...]
    miou: float
    mean_entropy: float
    flow_nll_mean: float
    uds_ub: float
    wall_ms: float


def miou_from_counts(inter: np.ndarray, union: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU and its mean over classes with nonzero union."""
    iou = np.full(inter.shape, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    return iou, float(iou[present].mean()) if present.any() else float("nan")


def evaluate(
    seg: SegNet,
    flow: FlowModel | None,
    dataset: SceneDataset,
    tau_cfg: TauConfig | None = None,
    lambda_tau: float = 1.0,
    step: int = 0,
) -> MetricsRecord:
    """Dataset-level metrics: IoU from accumulated integer counts (so the
    reduction is exact), per-pixel-normalized entropy, and, when a flow is
    given, the flow NLL mean and the shift score."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    t0 = time.perf_counter()
    c = seg.num_classes
    h, w = dataset.images.shape[1:3]

    def one(i: int) -> tuple[np.ndarray, np.ndarray, float]:
        pred = seg.predict(Tensor(dataset.images[i]))
        hat = pred.argmax_labels()
        gt = dataset.labels[i]
        inter = np.zeros(c, dtype=np.int64)
        union = np.zeros(c, dtype=np.int64)
        for k in range(c):
            pk = hat == k
            gk = gt == k
            inter[k] = np.logical_and(pk, gk).sum()
            union[k] = np.logical_or(pk, gk).sum()
        ent = float(entropy_loss(pred)) / (h * w)
        return inter, union, ent

    results = _map_indexed(one, len(dataset))
    inter = np.zeros(c, dtype=np.int64)
    union = np.zeros(c, dtype=np.int64)
    ent_acc = 0.0
    for ri, ru, re in results:
        inter += ri
        union += ru
        ent_acc += re
    iou, miou = miou_from_counts(inter, union)

    if flow is not None:
        est = uds_estimate(flow, seg, dataset.images, tau_cfg, lambda_tau)
        nll_mean, uds_ub = est.mean_nll, est.value
    else:
        nll_mean, uds_ub = float("nan"), float("nan")

    wall_ms = (time.perf_counter() - t0) * 1000.0
    return MetricsRecord(
        step=step,
        per_class_iou=tuple(iou.tolist()),
        miou=miou,
        mean_entropy=ent_acc / len(dataset),
        flow_nll_mean=nll_mean,
        uds_ub=uds_ub,
        wall_ms=wall_ms,
    )


# -- flow training ------------------------------------------------------------


@dataclass
class FlowTrainResult:
    """Per-step batch NLLs, periodic held-slice NLLs, and the kept model."""

    curve: list[tuple[int, float]] = field(default_factory=list)
    eval_points: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_nll: float = float("inf")
    aborted: bool = False


def _flow_eval_seed(base_seed: int, i: int) -> int:
    # fixed dequantization noise for the held slice, distinct from the
    # training stream
    return (base_seed * 1000003 + 7919 * i + 13) % (2**31)


def train_flow(
    model: FlowModel,
    dataset: SceneDataset,
    cfg: OptimConfig,
    smooth_eps: float = 0.05,
    noise_amp: float = 0.01,
    eval_every: int = 100,
    eval_samples: int = 32,
) -> FlowTrainResult:
    """Fit the flow to dequantized source label maps by SGD on the mean NLL.

    ActNorms are initialized on the first drawn batch if the model is fresh.
    A non-finite loss or gradient aborts the run; in every case the model
    ends at the parameters that scored best on the fixed held slice.
    """
    n = len(dataset)
    if n < 1:
        raise ValueError("train_flow: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = model.params()

    if not model.actnorms_initialized:
        k = min(n, max(2, cfg.batch_size))
        idx = rng.integers(0, n, size=k)
        seeds = rng.integers(0, 2**31, size=k)
        batch = np.stack(
            [
                labels_to_flow_input(
                    dataset.label_map(int(i)), smooth_eps, noise_amp, int(s)
                ).data
                for i, s in zip(idx, seeds)
            ]
        )
        model.initialize_actnorms(batch)

    n_eval = min(eval_samples, n)
    eval_inputs = [
        labels_to_flow_input(
            dataset.label_map(i), smooth_eps, noise_amp, _flow_eval_seed(cfg.seed, i)
        )
        for i in range(n_eval)
    ]

    def eval_nll() -> float:
        vals = _map_indexed(lambda i: float(model.nll(eval_inputs[i])), n_eval)
        acc = 0.0
        for v in vals:
            acc += v
        return acc / n_eval

    result = FlowTrainResult()
    first = eval_nll()
    result.eval_points.append((0, first))
    result.curve.append((0, first))
    result.best_step, result.best_nll = 0, first
    best_snap = _snapshot(params)
    velocity: dict = {}
    # the optimizer sees the per-dimension NLL so the step size stays
    # meaningful across input sizes; the curve reports the full NLL
    dim = float(model.height * model.width * model.in_channels)

    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        seeds = rng.integers(0, 2**31, size=cfg.batch_size)
        with Graph():
            loss = None
            for i, s in zip(idx, seeds):
                x = labels_to_flow_input(
                    dataset.label_map(int(i)), smooth_eps, noise_amp, int(s)
                )
                term = model.nll(x)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / cfg.batch_size)
            lv = float(loss)
            if not np.isfinite(lv):
                result.aborted = True
                break
            backward(loss * (1.0 / dim))
        try:
            sgd_step(params, cfg, velocity)
        except NumericalError:
            result.aborted = True
            break
        result.curve.append((step, lv))
        if step % eval_every == 0 or step == cfg.max_steps:
            e = eval_nll()
            result.eval_points.append((step, e))
            if e < result.best_nll:
                result.best_step, result.best_nll = step, e
                best_snap = _snapshot(params)

    _restore(params, best_snap)
    return result


# -- segmenter training --------------------------------------------------------


@dataclass
class SegTrainResult:
    curve: list[tuple[int, float]] = field(default_factory=list)
    eval_points: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_val_miou: float = float("-inf")
    aborted: bool = False


def train_segmenter(
    seg: SegNet,
    flow: FlowModel | None,
    source: SceneDataset,
    target: SceneDataset,
    mode: str,
    cfg: OptimConfig,
    weights: LossWeights | None = None,
    tau_cfg: TauConfig | None = None,
    eval_every: int = 100,
    val_frac: float = 0.2,
    warmup_frac: float = 0.1,
    keep: str = "best",
) -> SegTrainResult:
    """Adapt ``seg`` with supervised source batches plus a mode-dependent
    unsupervised target term.

    Modes: ``source_only`` (target term off), ``bimal`` (flow NLL of the
    target predictions plus weighted smoothness; requires a flow, whose
    parameters stay frozen), ``entmin`` (normalized entropy instead of the
    likelihood term). The target weight is zero for the first
    ``warmup_frac`` of steps. With ``keep="best"`` the returned parameters
    are the ones with the best source-validation mIoU (validation = last
    ``val_frac`` of the source set); ``keep="last"`` returns the final
    step's parameters, which makes runs with different target terms
    directly comparable. A diverged run always falls back to the best
    recorded snapshot.
    """
    if mode not in SEG_MODES:
        raise ValueError(f"mode must be one of {SEG_MODES}, got {mode!r}")
    if mode == "bimal" and flow is None:
        raise ValueError("bimal mode requires a trained flow")
    if keep not in ("best", "last"):
        raise ValueError(f'keep must be "best" or "last", got {keep!r}')
    weights = weights if weights is not None else LossWeights()
    tau_cfg = tau_cfg if tau_cfg is not None else TauConfig()
    n_src, n_tgt = len(source), len(target)
    if n_src < 2 or n_tgt < 1:
        raise ValueError("need at least 2 source and 1 target samples")
    n_val = max(1, int(round(n_src * val_frac)))
    n_train = n_src - n_val
    if n_train < 1:
        raise ValueError("validation split leaves no training samples")
    val_set = source.subset(n_train, n_src)

    rng = np.random.default_rng(cfg.seed)
    params = seg.params()
    flow_params = flow.params() if flow is not None else []
    warmup_steps = int(round(cfg.max_steps * warmup_frac))
    velocity: dict = {}

    result = SegTrainResult()
    rec = evaluate(seg, None, val_set)
    result.eval_points.append((0, rec.miou))
    result.best_step, result.best_val_miou = 0, rec.miou
    best_snap = _snapshot(params)
    # both terms are stepped on per pixel per sample, which is the scale the
    # default learning rate is calibrated for; their relative weight is
    # untouched, so lambda_t = 0 still reduces exactly to source_only
    h, w = source.images.shape[1:3]
    norm = 1.0 / (cfg.batch_size * h * w)

    for step in range(1, cfg.max_steps + 1):
        src_idx = rng.integers(0, n_train, size=cfg.batch_size)
        tgt_idx = rng.integers(0, n_tgt, size=cfg.batch_size)
        lam = 0.0 if (mode == "source_only" or step <= warmup_steps) else weights.lambda_t
        with Graph():
            ce = None
            for i in src_idx:
                pred = seg.predict(Tensor(source.images[i]))
                term = supervised_ce(pred, source.label_map(int(i)))
                ce = term if ce is None else ce + term
            loss = ce * norm
            if lam > 0.0:
                tgt = None
                for j in tgt_idx:
                    img = Tensor(target.images[j])
                    pred = seg.predict(img)
                    if mode == "bimal":
                        term = bimal_loss(flow, pred, img, tau_cfg, weights.lambda_tau)
                    else:
                        term = entropy_loss(pred)
                    tgt = term if tgt is None else tgt + term
                loss = loss + lam * (tgt * norm)
            lv = float(loss)
            if not np.isfinite(lv):
                result.aborted = True
                break
            backward(loss)
        for p in flow_params:  # frozen: discard any accumulated flow grads
            p.zero_grad()
        try:
            sgd_step(params, cfg, velocity)
        except NumericalError:
            result.aborted = True
            break
        result.curve.append((step, lv))
        if step % eval_every == 0 or step == cfg.max_steps:
            rec = evaluate(seg, None, val_set, step=step)
            result.eval_points.append((step, rec.miou))
            if rec.miou > result.best_val_miou:
                result.best_step, result.best_val_miou = step, rec.miou
                best_snap = _snapshot(params)

    if keep == "best" or result.aborted:
        _restore(params, best_snap)
    return result


# -- CSV contracts -------------------------------------------------------------


CURVE_HEADER = "step,loss"


def metrics_header(num_classes: int = NUM_CLASSES) -> str:
    ious = ",".join(f"iou_{k}" for k in range(num_classes))
    return f"step,miou,{ious},mean_entropy,flow_nll_mean,uds_ub,wall_ms"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_curve_csv(path, rows: list[tuple[int, float]], config_hash: str = "") -> None:
    path = Path(path)
    lines = [f"# config={config_hash}", CURVE_HEADER]
    lines += [f"{step},{_fmt(loss)}" for step, loss in rows]
    path.write_text("\n".join(lines) + "\n")


def append_metrics_csv(path, record: MetricsRecord, config_hash: str = "") -> None:
    """Append one row, creating the file with its header if needed."""
    path = Path(path)
    row = ",".join(
        [str(record.step), _fmt(record.miou)]
        + [_fmt(v) for v in record.per_class_iou]
        + [_fmt(record.mean_entropy), _fmt(record.flow_nll_mean),
           _fmt(record.uds_ub), _fmt(record.wall_ms)]
    )
    if not path.exists():
        path.write_text(f"# config={config_hash}\n{metrics_header()}\n{row}\n")
    else:
        with path.open("a") as fh:
            fh.write(row + "\n")


def strip_wall_ms(csv_text: str) -> str:
    """Drop the wall_ms column: the canonical form for bit-identity checks."""
    out = []
    for line in csv_text.splitlines():
        if line.startswith("#"):
            out.append(line)
            continue
        cells = line.split(",")
        out.append(",".join(cells[:-1]))
    return "\n".join(out) + "\n"


# -- segmenter checkpoints -------------------------------------------------------


def save_seg_checkpoint(seg: SegNet, out_dir, config_hash: str = "") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    for i, (k, b) in enumerate(seg.convs):
        for suffix, param in (("kernel", k), ("bias", b)):
            name = f"conv{i}.{suffix}.ten"
            tenio.write_tensor(out_dir / name, param.value.data.astype(np.float32))
            files[name] = tenio.sha256_file(out_dir / name)
    manifest = {
        "kind": "seg_checkpoint",
        "in_channels": seg.in_channels,
        "num_classes": seg.num_classes,
        "widths": list(seg.widths),
        "config_hash": config_hash,
        "files": files,
    }
    tenio.write_manifest(out_dir / "manifest.json", manifest)
    return out_dir


def load_seg_checkpoint(ckpt_dir) -> SegNet:
    ckpt_dir = Path(ckpt_dir)
    manifest = tenio.read_manifest(ckpt_dir / "manifest.json")
    if manifest.get("kind") != "seg_checkpoint":
        raise tenio.DataIntegrityError(f"{ckpt_dir}: not a segmenter checkpoint")
    seg = SegNet(
        in_channels=manifest["in_channels"],
        num_classes=manifest["num_classes"],
        widths=tuple(manifest["widths"]),
    )
    for i, (k, b) in enumerate(seg.convs):
        for suffix, param in (("kernel", k), ("bias", b)):
            name = f"conv{i}.{suffix}.ten"
            path = ckpt_dir / name
            want = manifest["files"].get(name)
            got = tenio.sha256_file(path) if path.exists() else None
            if want is None or got != want:
                raise tenio.DataIntegrityError(f"{ckpt_dir}: {name} missing or hash mismatch")
            param.assign(tenio.read_tensor(path).astype(np.float64))
    return seg
