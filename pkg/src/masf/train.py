"""Loss, optimiser, schedule, checkpoints and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from masf.errors import ConfigError, DataError, NumericalError
from masf.metrics import EvalReport, evaluate
from masf.network import MasfYolo, ModelConfig, _frozen, count_params, estimate_gflops
from masf.postproc import LOG_CAP, bounded_size, postprocess, sigmoid
from masf.tensor import Tensor, serialize
from masf.tensor.core import make_result

log = logging.getLogger(__name__)

LAMBDA_BOX = 5.0
LAMBDA_CLS = 1.0
FOCAL_GAMMA = 2.0
REFERENCE_SIZE = 640
# longest-side brackets in pixels at the reference resolution
BRACKETS = (("P2", 0.0, 16.0), ("P3", 16.0, 64.0), ("P4", 64.0, 160.0), ("P5", 160.0, math.inf))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.937
    epochs: int = 30
    batch_size: int = 8
    image_size: int = 128
    lr_final_fraction: float = 0.01
    seed: int = 0
    nesterov: bool = False
    weight_decay: float = 0.0
    warmup_epochs: float = 0.0
    eval_conf: float = 0.001
    eval_iou: float = 0.5
    max_det: int = 300
    pre_nms_topk: int = 1000
    eval_every: int = 1  # the final epoch is always evaluated

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, epochs and eval_every must be >= 1")
        if not 0 < self.lr_final_fraction <= 1:
            raise ConfigError("lr_final_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train-config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read train config {path}: {exc}") from None


# --------------------------------------------------------------------------- schedule / optimiser


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if total_steps < 1 or step < 0:
        raise ConfigError(f"need 0 <= step and total_steps >= 1, got {step}/{total_steps}")
    lr_f = cfg.lr0 * cfg.lr_final_fraction
    if step >= total_steps:
        return lr_f
    return lr_f + 0.5 * (cfg.lr0 - lr_f) * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float,
             nesterov: bool = False, weight_decay: float = 0.0) -> list[str]:
    """In-place SGD with classic momentum: ``v = m v + g; p -= lr v``.

    If any gradient is non-finite nothing is updated and the offending names are returned.
    """
    bad = [n for n, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        log.warning("skipping step: non-finite gradient in %s", ", ".join(bad))
        return bad
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        data = getattr(p, "data", p)
        if weight_decay:
            g = g + weight_decay * data
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        data -= lr * (g + momentum * v if nesterov else v)
    return []


# --------------------------------------------------------------------------- assignment / loss


def level_for(longest: float, levels, image_size: int) -> str:
    """Bracketed level for a box side, falling back to the nearest level present."""
    scale = image_size / REFERENCE_SIZE
    order = [b[0] for b in BRACKETS]
    for lv, lo, hi in BRACKETS:
        if lo * scale <= longest < hi * scale:
            break
    if lv in levels:
        return lv
    k = order.index(lv)
    return min(levels, key=lambda x: (abs(order.index(x) - k), order.index(x)))


def _cascade(level: str, levels) -> list[str]:
    """``level`` first, then the remaining levels by distance, finer before coarser."""
    order = [b[0] for b in BRACKETS]
    k = order.index(level)
    return sorted(levels, key=lambda x: (abs(order.index(x) - k), order.index(x)))


def build_targets(gts_batch, config: ModelConfig, stats: dict | None = None) -> dict:
    """Per level arrays ``n, i, j, cls, boxes`` of assigned positives.

    A GT goes to the cell containing its centre on its bracketed level. Each cell
    holds one GT, since its box regressors are shared across classes; when the
    cell is taken the GT moves to the nearest level whose centre cell is free,
    finer first. GTs under 1 px or with every candidate taken are skipped.
    """
    strides = config.strides
    acc = {lv: ([], [], [], [], []) for lv in config.levels}
    taken = set()
    skipped = collisions = moved = 0
    for n, gts in enumerate(gts_batch):
        for g in gts:
            longest = max(g.x2 - g.x1, g.y2 - g.y1)
            if longest < 1.0:
                skipped += 1
                continue
            first = level_for(longest, config.levels, config.image_size)
            for lv in _cascade(first, config.levels):
                s = strides[lv]
                side = config.image_size // s
                i = min(max(int((g.y1 + g.y2) / 2 // s), 0), side - 1)
                j = min(max(int((g.x1 + g.x2) / 2 // s), 0), side - 1)
                if (lv, n, i, j) not in taken:
                    break
            else:
                collisions += 1
                continue
            moved += lv != first
            taken.add((lv, n, i, j))
            for lst, v in zip(acc[lv], (n, i, j, g.class_id, g.box)):
                lst.append(v)
    if stats is not None:
        for k, v in (("skipped_gts", skipped), ("collisions", collisions), ("reassigned", moved)):
            stats[k] = stats.get(k, 0) + v
    out = {}
    for lv, (n, i, j, c, b) in acc.items():
        out[lv] = (np.array(n, int), np.array(i, int), np.array(j, int), np.array(c, int),
                   np.array(b, np.float64).reshape(-1, 4))
    return out


def _class_terms(z, y, at_pos):
    """Per-logit class loss and its gradient.

    Logits of assigned cells take plain BCE against their one-hot target. Every
    other logit is a negative whose BCE is scaled by ``p**FOCAL_GAMMA`` so easy
    background fades while confident false positives stay costly.
    """
    p = sigmoid(z)
    bce = np.logaddexp(0.0, z) - y * z
    dbce = p - y
    mod = np.where(at_pos, 1.0, p**FOCAL_GAMMA)
    dmod = np.where(at_pos, 0.0, FOCAL_GAMMA * p**FOCAL_GAMMA * (1 - p))
    return mod * bce, mod * dbce + dmod * bce


def _diou_and_grad(p, g):
    """Distance-IoU ``IoU - rho^2 / c^2`` of matching rows and its gradient wrt ``p``.

    ``rho`` is the centre distance and ``c`` the diagonal of the enclosing box;
    the penalty keeps a gradient alive when the boxes do not overlap.
    """
    ix1, iy1 = np.maximum(p[:, 0], g[:, 0]), np.maximum(p[:, 1], g[:, 1])
    ix2, iy2 = np.minimum(p[:, 2], g[:, 2]), np.minimum(p[:, 3], g[:, 3])
    iw, ih = ix2 - ix1, iy2 - iy1
    overlap = (iw > 0) & (ih > 0)
    iw, ih = np.where(overlap, iw, 0.0), np.where(overlap, ih, 0.0)
    inter = iw * ih
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    union = pw * ph + (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1]) - inter
    iou = inter / union
    d_inter = (union + inter) / union**2
    d_area = -inter / union**2
    gi = np.zeros_like(p)
    gi[:, 0] = -ih * (p[:, 0] > g[:, 0])
    gi[:, 2] = ih * (p[:, 2] < g[:, 2])
    gi[:, 1] = -iw * (p[:, 1] > g[:, 1])
    gi[:, 3] = iw * (p[:, 3] < g[:, 3])
    ga = np.stack([-ph, -pw, ph, pw], axis=1)
    d_iou = d_inter[:, None] * gi + d_area[:, None] * ga

    dx = (p[:, 0] + p[:, 2] - g[:, 0] - g[:, 2]) / 2
    dy = (p[:, 1] + p[:, 3] - g[:, 1] - g[:, 3]) / 2
    rho2 = dx**2 + dy**2
    cw = np.maximum(p[:, 2], g[:, 2]) - np.minimum(p[:, 0], g[:, 0])
    ch = np.maximum(p[:, 3], g[:, 3]) - np.minimum(p[:, 1], g[:, 1])
    c2 = cw**2 + ch**2
    d_rho2 = np.stack([dx, dy, dx, dy], axis=1)
    d_c2 = 2 * np.stack([-cw * (p[:, 0] < g[:, 0]), -ch * (p[:, 1] < g[:, 1]),
                         cw * (p[:, 2] > g[:, 2]), ch * (p[:, 3] > g[:, 3])], axis=1)
    d_pen = d_rho2 / c2[:, None] - (rho2 / c2**2)[:, None] * d_c2
    return iou - rho2 / c2, d_iou - d_pen, iou


def loss_and_grads(raw: dict, targets: dict, config: ModelConfig) -> tuple[dict, dict]:
    """Loss components and d(loss)/d(raw) for every level, in float64.

    Box: ``5 * mean(1 - DIoU)`` over assigned cells. Class: the summed terms of
    ``_class_terms`` divided by the number of assigned cells (at least one).
    """
    strides = config.strides
    n_pos = sum(t[0].size for t in targets.values())
    norm = 1.0 / max(n_pos, 1)
    box_terms, iou_terms, grads = [], [], {}
    cls_sum = 0.0
    for lv, arr in raw.items():
        z = np.asarray(arr, dtype=np.float64)
        g = np.zeros_like(z)
        n, i, j, c, gt_boxes = targets[lv]
        y = np.zeros_like(z[:, 4:])
        y[n, c, i, j] = 1.0
        at_pos = np.zeros(y.shape, dtype=bool)
        at_pos[n, :, i, j] = True  # every class logit of an assigned cell
        terms, d_terms = _class_terms(z[:, 4:], y, at_pos)
        cls_sum += terms.sum()
        g[:, 4:] = LAMBDA_CLS * norm * d_terms
        if n.size:
            s = strides[lv]
            t = z[n, :4, i, j]
            sx, sy = sigmoid(t[:, 0]), sigmoid(t[:, 1])
            bw, bh = bounded_size(t[:, 2]) * s, bounded_size(t[:, 3]) * s
            cx, cy = (j + sx) * s, (i + sy) * s
            pred = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
            diou, d_diou, iou = _diou_and_grad(pred, gt_boxes)
            box_terms.append(1.0 - diou)
            iou_terms.append(iou)
            d = -LAMBDA_BOX / n_pos * d_diou  # d loss / d pred corners
            d_cx, d_cy = d[:, 0] + d[:, 2], d[:, 1] + d[:, 3]
            d_w, d_h = (d[:, 2] - d[:, 0]) / 2, (d[:, 3] - d[:, 1]) / 2
            g[n, 0, i, j] += d_cx * s * sx * (1 - sx)
            g[n, 1, i, j] += d_cy * s * sy * (1 - sy)
            g[n, 2, i, j] += d_w * bw * sigmoid(LOG_CAP - t[:, 2])
            g[n, 3, i, j] += d_h * bh * sigmoid(LOG_CAP - t[:, 3])
        grads[lv] = g
    box = LAMBDA_BOX * float(np.concatenate(box_terms).mean()) if box_terms else 0.0
    cls = LAMBDA_CLS * norm * float(cls_sum)
    mean_iou = float(np.concatenate(iou_terms).mean()) if iou_terms else 0.0
    return {"loss": box + cls, "box": box, "cls": cls, "n_pos": n_pos, "mean_iou": mean_iou}, grads


def assign_and_loss(raw: dict, gts_batch, config: ModelConfig,
                    stats: dict | None = None) -> tuple[Tensor, dict]:
    """Scalar loss tensor wired to every head output, plus its components."""
    levels = list(raw)
    targets = build_targets(gts_batch, config, stats)
    parts, grads = loss_and_grads({lv: raw[lv].data for lv in levels}, targets, config)
    dtype = raw[levels[0]].dtype
    out = np.full((1, 1, 1, 1), parts["loss"], dtype=dtype)

    def backward(g):
        scale = float(np.asarray(g).reshape(-1)[0])
        return tuple((grads[lv] * scale).astype(raw[lv].dtype) for lv in levels)

    return make_result(out, tuple(raw[lv] for lv in levels), backward), parts


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: MasfYolo, extra: dict | None = None) -> Path:
    """``<path>.bin`` holds the tensors back to back; ``<path>.json`` indexes them."""
    path = Path(path)
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    index, offset = {}, 0
    with open(bin_path, "wb") as fh:
        for name, arr in sorted(model.state_dict().items()):
            blob = serialize.encode(np.asarray(arr))
            fh.write(blob)
            index[name] = {"offset": offset, "nbytes": len(blob)}
            offset += len(blob)
    meta = {"model_config": model.config.to_dict(), "tensors": index, "binary": bin_path.name}
    meta.update(extra or {})
    json_path.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return json_path


def load_checkpoint(path) -> tuple[MasfYolo, dict]:
    path = Path(path)
    json_path = path.with_suffix(".json")
    if not json_path.is_file():
        raise DataError(f"checkpoint not found: {json_path}")
    meta = json.loads(json_path.read_text())
    buf = (json_path.parent / meta["binary"]).read_bytes()
    state = {name: serialize.decode(buf, rec["offset"])[0].data
             for name, rec in meta["tensors"].items()}
    model = MasfYolo(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(state)
    return model, meta


# --------------------------------------------------------------------------- evaluation


def batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for k in range(0, n, batch_size):
        yield order[k:k + batch_size]


def predict(model: MasfYolo, dataset, cfg: TrainConfig, indices=None) -> dict:
    """``{image_id: [Detection]}`` for the chosen dataset items."""
    mcfg = model.config
    indices = range(len(dataset)) if indices is None else indices
    preds, stats = {}, {}
    dtype = model.stem.conv.weight.dtype
    with _frozen(model):
        for idx in batches(len(indices), cfg.batch_size, np.asarray(list(indices))):
            items = [dataset[int(k)] for k in idx]
            images = Tensor(np.stack([it[0] for it in items]).astype(dtype))
            raw = model(images)
            dets = postprocess({lv: t.data for lv, t in raw.items()}, mcfg, cfg.eval_conf,
                               cfg.eval_iou, cfg.pre_nms_topk, cfg.max_det, stats)
            for it, d in zip(items, dets):
                preds[it[2]] = d
    return preds


def evaluate_model(model: MasfYolo, dataset, cfg: TrainConfig, method: str = "all_points",
                   indices=None) -> tuple[EvalReport, dict]:
    indices = range(len(dataset)) if indices is None else indices
    preds = predict(model, dataset, cfg, indices)
    gts = {dataset[int(k)][2]: dataset[int(k)][1] for k in indices}
    report = evaluate(preds, gts, method)
    report.params_m = count_params(model) / 1e6
    report.gflops = estimate_gflops(model)
    return report, preds


# --------------------------------------------------------------------------- training loop


def _batch(dataset, idx, dtype):
    items = [dataset[int(k)] for k in idx]
    return Tensor(np.stack([it[0] for it in items]).astype(dtype)), [it[1] for it in items]


def run_training(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: dict,
                 out_dir=None, eval_split: str = "val", log_fn=None) -> dict:
    """Train and evaluate each epoch; returns the per-epoch records.

    ``dataset`` maps split names to indexable datasets; ``train`` is required.
    The JSON Lines log ``metrics.jsonl`` and the ``best``/``last`` checkpoints go
    into ``out_dir`` when given.
    """
    train = dataset.get("train")
    if train is None or len(train) == 0:
        raise DataError("training split is missing or empty")
    if model_cfg.image_size != train_cfg.image_size:
        raise ConfigError(
            f"image_size differs: model {model_cfg.image_size} vs train {train_cfg.image_size}")
    held_out = dataset.get(eval_split) or train
    model = MasfYolo(model_cfg, seed=train_cfg.seed)
    params = dict(model.named_parameters())
    dtype = model.stem.conv.weight.dtype
    velocity: dict = {}
    steps_per_epoch = math.ceil(len(train) / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    warmup = int(train_cfg.warmup_epochs * steps_per_epoch)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text("")
    records, best, step, nan_run = [], -1.0, 0, 0
    stats: dict = {}
    for epoch in range(train_cfg.epochs):
        model.train()
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train))
        sums = {"loss": 0.0, "box": 0.0, "cls": 0.0}
        skipped = 0
        t0 = time.perf_counter()
        for idx in batches(len(train), train_cfg.batch_size, order):
            lr = cosine_lr(step, total_steps, train_cfg)
            if step < warmup:
                lr *= (step + 1) / warmup
            images, gts = _batch(train, idx, dtype)
            model.zero_grad()
            loss, parts = assign_and_loss(model(images), gts, model_cfg, stats)
            if not math.isfinite(parts["loss"]):
                nan_run += 1
                skipped += 1
                if nan_run >= 3:
                    _dump_diagnostics(out_dir, epoch, step, parts, stats)
                    raise NumericalError(f"loss non-finite for 3 consecutive steps (epoch {epoch}, step {step})")
                step += 1
                continue
            nan_run = 0
            loss.backward()
            grads = {n: p.grad for n, p in params.items()}
            if sgd_step(params, grads, velocity, lr, train_cfg.momentum,
                        train_cfg.nesterov, train_cfg.weight_decay):
                skipped += 1
            for k in sums:
                sums[k] += parts[k] * len(idx)
            step += 1
        last_epoch = epoch + 1 == train_cfg.epochs
        report = None
        if last_epoch or (epoch + 1) % train_cfg.eval_every == 0:
            report, _ = evaluate_model(model, held_out, train_cfg)
        rec = {"epoch": epoch, **{k: float(v / len(train)) for k, v in sums.items()},
               "lr": float(cosine_lr(step, total_steps, train_cfg)),
               "map50": None if report is None else float(report.map50),
               "map5095": None if report is None else float(report.map5095),
               "skipped_steps": skipped}
        records.append(rec)
        if log_fn is not None:
            log_fn(rec, time.perf_counter() - t0)
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            extra = {"epoch": epoch, "map50": rec["map50"], "map5095": rec["map5095"],
                     "train_config": train_cfg.to_dict()}
            save_checkpoint(out_dir / "last", model, extra)
            if report is not None and report.map50 > best:
                best = report.map50
                save_checkpoint(out_dir / "best", model, extra)
    return {"records": records, "model": model, "stats": stats}


def _dump_diagnostics(out_dir, epoch, step, parts, stats):
    if out_dir is None:
        return
    payload = {"epoch": epoch, "step": step, "last_loss": {k: repr(v) for k, v in parts.items()},
               "stats": stats}
    (Path(out_dir) / "diagnostics.json").write_text(json.dumps(payload, indent=1))
