"""Training loop, batched inference, evaluation and the distance ablation."""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import save_checkpoint
from .distances import METRICS, distance
from .errors import DivergenceError
from .metrics import Confusion, accumulate, finalize, format_table, trend_confusions
from .network import TrendNet
from .optim import Adam, step_lr
from .supervision import total_loss
from .synthdata import augment, derive_seed, stack_batch
from .tensor import Tensor, get_tape, no_grad
from .trend import background_probability, decode_change, decode_trend, disagreement_rate

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "l_gcd", "l_tcd", "l_bg", "total", "val_change_F")


def worker_count():
    try:
        return max(1, int(os.environ.get("TRENDMATCH_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class TrainResult:
    model: TrendNet
    optimizer: Adam
    history: list = field(default_factory=list)
    best_val_f: float = None
    best_epoch: int = None
    epoch: int = 0


def _epoch_batches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch, 0]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _prepare(indexed_pairs, config, epoch, n_total):
    if not config.augment:
        return [p for _, p in indexed_pairs]
    q = 2 ** (config.net.depth - 1)
    out = []
    for i, p in indexed_pairs:
        s = derive_seed(config.seed, epoch * n_total + int(i))
        crop = config.crop_size if config.crop_size and config.crop_size <= min(p.shape) else None
        out.append(augment(p, s, crop, q))
    return out


def train_step(model, optimizer, t1, t2, y, config):
    """One forward/backward/update; returns the :class:`LossReport`."""
    fi, fc = model.forward(Tensor(t1), Tensor(t2), training=True)
    report = total_loss(fc, fi, y, config.loss_weights, config.tau, config.gcd_metric, config.bg_index)
    if not math.isfinite(report.total):
        get_tape().clear()
        raise DivergenceError(f"non-finite loss {report.as_dict()}")
    report.loss.backward()
    optimizer.step()
    report.loss = None
    return report


def train(config, train_pairs, val_pairs=None, out_dir=None, model=None, optimizer=None,
          start_epoch=0, log=None, max_steps=None):
    """Train for ``config.epochs`` epochs (counted from zero, so resuming at
    ``start_epoch`` continues both the epoch counter and the lr schedule).

    ``train_pairs`` only need images and change labels.  When ``out_dir`` is
    given, ``train_log.csv``, ``final.tcdw`` and (with validation data)
    ``best.tcdw`` are written there.
    """
    log = log or (lambda msg: logger.info(msg))
    model = model or TrendNet(config.net, seed=config.seed)
    optimizer = optimizer or Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.eps)
    result = TrainResult(model, optimizer, epoch=start_epoch)
    csv_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "train_log.csv")
        fresh = start_epoch == 0 or not os.path.exists(path)
        csv_fh = open(path, "w" if fresh else "a", newline="")
        writer = csv.writer(csv_fh)
        if fresh:
            writer.writerow(LOG_FIELDS)
    steps = 0
    try:
        for epoch in range(start_epoch, config.epochs):
            optimizer.lr = step_lr(config.lr, epoch, config.lr_step_epochs, config.lr_gamma)
            sums = np.zeros(4)
            weight = 0
            for idx in _epoch_batches(len(train_pairs), config.batch_size, config.seed, epoch):
                batch = _prepare([(i, train_pairs[i]) for i in idx], config, epoch, len(train_pairs))
                t1, t2, y = stack_batch(batch)
                rep = train_step(model, optimizer, t1, t2, y, config)
                sums += len(idx) * np.array([rep.l_gcd, rep.l_tcd, rep.l_bg, rep.total])
                weight += len(idx)
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    break
            means = sums / max(weight, 1)
            val_f = None
            if val_pairs and ((epoch + 1) % config.val_every == 0 or epoch + 1 == config.epochs):
                val_f = evaluate_change(model, val_pairs, config).F
                if result.best_val_f is None or val_f > result.best_val_f:
                    result.best_val_f, result.best_epoch = val_f, epoch
                    if out_dir is not None:
                        save_checkpoint(os.path.join(out_dir, "best.tcdw"), model, optimizer,
                                        rng_state={"seed": config.seed, "next_epoch": epoch + 1}, epoch=epoch + 1)
            row = {"epoch": epoch, "lr": optimizer.lr, "l_gcd": means[0], "l_tcd": means[1],
                   "l_bg": means[2], "total": means[3], "val_change_F": val_f}
            result.history.append(row)
            result.epoch = epoch + 1
            vtxt = "" if val_f is None else f" val_F={val_f:.4f}"
            log(f"epoch {epoch:4d} lr={optimizer.lr:.1e} l_gcd={means[0]:.4f} l_tcd={means[1]:.4f} "
                f"l_bg={means[2]:.4f} total={means[3]:.4f}{vtxt}")
            if csv_fh is not None:
                writer.writerow([row[k] if row[k] is not None else "" for k in LOG_FIELDS])
                csv_fh.flush()
            if max_steps is not None and steps >= max_steps:
                break
    finally:
        if csv_fh is not None:
            csv_fh.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final.tcdw"), model, optimizer,
                        rng_state={"seed": config.seed, "next_epoch": result.epoch}, epoch=result.epoch)
    return result


@dataclass
class Prediction:
    change: np.ndarray  # [H, W] uint8 from the common-feature distance map
    trend: np.ndarray  # [H, W] uint8 codes
    distance: np.ndarray  # [H, W] float
    bg1: np.ndarray  # [H, W] background-channel probability of stream 1
    bg2: np.ndarray


def predict(model, pairs, tau=0.1, threshold=0.5, gcd_metric="softmatch", bg_index=2, batch_size=8):
    """Run inference and decode change/trend maps for every pair."""
    out = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        t1, t2, _ = stack_batch(chunk)
        with no_grad():
            fi, fc = model.forward(Tensor(t1), Tensor(t2), training=False)
            dm = distance(fc[0], fc[1], gcd_metric, tau)
        change = decode_change(dm, threshold)
        trend = decode_trend(fi, bg_index)
        b1 = background_probability(fi[0], tau, bg_index)
        b2 = background_probability(fi[1], tau, bg_index)
        d = dm.values.data[:, 0]
        for k in range(len(chunk)):
            out.append(Prediction(change[k], trend[k], d[k], b1[k], b2[k]))
    return out


def evaluate_change(model, pairs, config):
    conf = Confusion()
    for pred, pair in zip(predict(model, pairs, config.tau, config.threshold, config.gcd_metric, config.bg_index), pairs):
        accumulate(conf, pred.change, pair.change_label)
    return finalize(conf, "change_gcd")


@dataclass
class EvalReport:
    rows: dict  # tag -> MetricRow
    disagreement_rate: float
    n_samples: int
    has_trend: bool

    def metrics(self):
        return {tag: row.as_percent() for tag, row in self.rows.items()}

    def to_json_dict(self):
        return {
            "metrics": self.metrics(),
            "disagreement_rate": round(100.0 * self.disagreement_rate, 2),
            "n_samples": self.n_samples,
            "degenerate": {tag: list(row.degenerate) for tag, row in self.rows.items() if row.degenerate},
        }

    def to_text(self):
        text = format_table(list(self.rows.values()), title=f"evaluation over {self.n_samples} pairs")
        return text + f"\nGCD vs trend disagreement: {100.0 * self.disagreement_rate:.2f}%"


def _eval_chunk(model, chunk, config, with_trend):
    confs = {tag: Confusion() for tag in ("C", "A", "D", "T")} if with_trend else None
    gcd = Confusion()
    dis_sum = 0.0
    for pred, pair in zip(predict(model, chunk, config.tau, config.threshold, config.gcd_metric, config.bg_index), chunk):
        accumulate(gcd, pred.change, pair.change_label)
        if with_trend:
            trend_confusions(pred.trend, pair.trend_label, confs)
        dis_sum += disagreement_rate(pred.change, pred.trend) * pred.change.size
    return confs, gcd, dis_sum


def evaluate(model, pairs, config, predictions=None):
    """Per-trend rows C/A/D/T (when trend labels exist) plus the GCD change row.

    ``predictions`` overrides the model output (a list of
    :class:`Prediction`), which lets callers score arbitrary maps.
    """
    with_trend = bool(pairs) and all(p.trend_label is not None for p in pairs)
    if not with_trend:
        logger.warning("trend labels missing; only the change row is evaluated")
    if predictions is not None:
        confs = {tag: Confusion() for tag in ("C", "A", "D", "T")} if with_trend else None
        gcd = Confusion()
        dis_sum = 0.0
        for pred, pair in zip(predictions, pairs):
            accumulate(gcd, pred.change, pair.change_label)
            if with_trend:
                trend_confusions(pred.trend, pair.trend_label, confs)
            dis_sum += disagreement_rate(pred.change, pred.trend) * pred.change.size
        parts = [(confs, gcd, dis_sum)]
    else:
        n_workers = worker_count()
        chunk = 8
        chunks = [pairs[i:i + chunk] for i in range(0, len(pairs), chunk)]
        if n_workers > 1:
            with ThreadPoolExecutor(n_workers) as pool:
                parts = list(pool.map(lambda c: _eval_chunk(model, c, config, with_trend), chunks))
        else:
            parts = [_eval_chunk(model, c, config, with_trend) for c in chunks]
    gcd_total = Confusion()
    trend_total = {tag: Confusion() for tag in ("C", "A", "D", "T")}
    dis = 0.0
    for confs, gcd, d in parts:
        gcd_total = gcd_total + gcd
        dis += d
        if with_trend:
            for tag in trend_total:
                trend_total[tag] = trend_total[tag] + confs[tag]
    rows = {}
    if with_trend:
        for tag, conf in trend_total.items():
            rows[tag] = finalize(conf, tag)
    rows["change_gcd"] = finalize(gcd_total, "change_gcd")
    n_pix = sum(p.change_label.size for p in pairs)
    return EvalReport(rows, dis / n_pix if n_pix else 0.0, len(pairs), with_trend)


@dataclass
class AblationReport:
    rows: dict  # metric name -> MetricRow (GCD change row)

    def table(self):
        return {m: row.as_percent() for m, row in self.rows.items()}

    def to_text(self):
        ordered = [replace(row, tag=m) for m, row in self.rows.items()]
        return format_table(ordered, title="GCD-branch distance ablation")


def ablate(config, train_pairs, test_pairs, log=None, metrics=METRICS):
    """Train one model per GCD distance with identical seeds and data."""
    rows = {}
    for metric in metrics:
        cfg = replace(config, gcd_metric=metric)
        (log or logger.info)(f"ablation: training with {metric} distance")
        res = train(cfg, train_pairs, log=log)
        rows[metric] = evaluate(res.model, test_pairs, cfg).rows["change_gcd"]
    return AblationReport(rows)
