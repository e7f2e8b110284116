"""Mini-batch training, sequence-labeling metrics, and variant comparison.

Training uses adaptive moment estimation with decoupled weight decay,
deterministic shuffling, and early stopping on validation loss; the
parameters returned are those of the best validation epoch. Evaluation
reports macro-F1 over keep/drop, exact match, token accuracy, a 2x2
keep/drop confusion matrix, and the same metrics stratified by query
length. The experiment runner trains each model variant across seeds and
aggregates means, deviations, and percent improvement over the left-
tower-only baseline.
"""

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, TagtrimError
from .model import (
    ModelConfig,
    batch_loss,
    clone_config,
    forward_batch,
    init_params,
    prepare_batch,
)
from .numerics import GradientTape
from .querydata import DROP_LABEL, KEEP_LABEL, build_vocab

# graph_mode / fusion pairs selectable in comparisons, keyed by row name
VARIANTS = {
    "none": ("none", "gated"),
    "static-mean": ("static", "mean"),
    "static-gated": ("static", "gated"),
    "dynamic-gated": ("dynamic", "gated"),
}

METRIC_NAMES = ("f1", "exact_match", "token_acc")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters and schedule.

    ``patience`` is the number of consecutive epochs without a validation
    loss improvement tolerated before stopping early. A zero learning
    rate is accepted (it makes a useful no-op baseline); negative rates
    are not.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 8
    batch_size: int = 64
    seed: int = 0
    patience: int = 3

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must not be negative")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must not be negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 0:
            raise ValueError("patience must not be negative")


class Adam:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, tensors, cfg):
        self.tensors = list(tensors)
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def step(self, grads):
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - c.beta1 ** t
        bias2 = 1.0 - c.beta2 ** t
        for i, (tensor, g) in enumerate(zip(self.tensors, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            update = (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2)
                                            + c.adam_eps)
            if c.weight_decay:
                update = update + c.weight_decay * tensor.data
            tensor.data = tensor.data - c.learning_rate * update


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_token_acc: float


@dataclass
class TrainResult:
    """Best-epoch parameters plus everything needed to reuse them."""

    params: object
    vocab: object
    log: list
    best_epoch: int
    initial_val_loss: float


def _iter_batches(records, vocab, cfg, graph, order=None, batch_size=64):
    order = range(len(records)) if order is None else order
    chunk = []
    for idx in order:
        chunk.append(records[idx])
        if len(chunk) == batch_size:
            yield prepare_batch(chunk, vocab, cfg, graph)
            chunk = []
    if chunk:
        yield prepare_batch(chunk, vocab, cfg, graph)


def train(model_cfg, train_cfg, train_records, val_records, graph=None,
          vocab=None):
    """Fit a model; returns a TrainResult with best-validation parameters.

    The vocabulary is built from the training records unless supplied.
    Static graph mode requires ``graph``. Shuffling, initialization, and
    dropout all derive from ``train_cfg.seed``, so identical inputs give
    identical logs. A non-finite training loss aborts with a NumericError
    naming the epoch and batch.
    """
    if not train_records:
        raise ValueError("train needs at least one training record")
    if not val_records:
        raise ValueError("train needs at least one validation record")
    if model_cfg.graph_mode == "static" and graph is None:
        raise ValueError("static graph mode requires a tag graph")
    if vocab is None:
        vocab = build_vocab(train_records)

    params = init_params(model_cfg, vocab.n_tokens, vocab.n_tags,
                         seed=train_cfg.seed)
    names = list(params)
    sources = [params[n] for n in names]
    optimizer = Adam(sources, train_cfg)
    shuffle_rng = np.random.default_rng(train_cfg.seed)
    dropout_rng = (np.random.default_rng(train_cfg.seed + 1)
                   if model_cfg.dropout > 0 else None)

    def val_stats():
        loss_sum = 0.0
        correct = 0
        counted = 0
        n = 0
        for batch in _iter_batches(val_records, vocab, model_cfg, graph,
                                   batch_size=train_cfg.batch_size):
            out = forward_batch(batch, params, model_cfg)
            b = batch.token_ids.shape[0]
            loss_sum += float(batch_loss(out["p"], batch).data) * b
            n += b
            pred = np.argmax(out["p"].data, axis=-1) + 1
            scored = batch.labels >= KEEP_LABEL
            correct += int(np.sum((pred == batch.labels) & scored))
            counted += int(np.sum(scored))
        return loss_sum / n, correct / counted

    initial_val_loss, _ = val_stats()
    best_val = np.inf
    best_snapshot = params.snapshot()
    best_epoch = 0
    bad_epochs = 0
    log = []

    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_records))
        loss_sum = 0.0
        seen = 0
        for b_idx, batch in enumerate(
            _iter_batches(train_records, vocab, model_cfg, graph,
                          order=order, batch_size=train_cfg.batch_size)
        ):
            try:
                with GradientTape() as tape:
                    out = forward_batch(batch, params, model_cfg,
                                        train_rng=dropout_rng)
                    loss = batch_loss(out["p"], batch)
                if not np.isfinite(loss.data):
                    raise NumericError("loss is not finite")
                grads = tape.gradients(loss, sources)
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch}, batch {b_idx}: "
                    f"{exc}"
                ) from exc
            optimizer.step(grads)
            b = batch.token_ids.shape[0]
            loss_sum += float(loss.data) * b
            seen += b
        val_loss, val_acc = val_stats()
        log.append(EpochStats(epoch, loss_sum / seen, val_loss, val_acc))
        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = params.snapshot()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > train_cfg.patience:
                break

    params.restore(best_snapshot)
    return TrainResult(
        params=params, vocab=vocab, log=log, best_epoch=best_epoch,
        initial_val_loss=initial_val_loss,
    )


def epoch_log_csv(log):
    """The per-epoch log as a CSV string (epoch,train_loss,...)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss", "val_token_acc"])
    for row in log:
        writer.writerow(
            [row.epoch, repr(row.train_loss), repr(row.val_loss),
             repr(row.val_token_acc)]
        )
    return buf.getvalue()


def predict_labels(params, records, model_cfg, vocab, graph=None,
                   batch_size=64):
    """Predicted label sequence (ints, token positions only) per record."""
    preds = []
    for batch in _iter_batches(records, vocab, model_cfg, graph,
                               batch_size=batch_size):
        pred = np.argmax(forward_batch(batch, params, model_cfg)["p"].data,
                         axis=-1) + 1
        for row, length in zip(pred, batch.lengths):
            preds.append([int(x) for x in row[1 : length + 1]])
    return preds


@dataclass(frozen=True)
class MetricsReport:
    """Corpus metrics over keep/drop positions.

    ``confusion`` counts true-vs-predicted pairs within {keep, drop}
    (rows true, columns predicted, order keep then drop); predictions of
    the special class at a token position fall outside the matrix but
    still count as errors in every rate. ``per_length`` maps the source
    word count to the same three metrics plus a record count.
    """

    f1: float
    exact_match: float
    token_acc: float
    f1_keep: float
    f1_drop: float
    per_length: dict
    confusion: tuple
    n_records: int
    n_tokens: int

    def to_dict(self):
        return {
            "f1": self.f1,
            "exact_match": self.exact_match,
            "token_acc": self.token_acc,
            "f1_keep": self.f1_keep,
            "f1_drop": self.f1_drop,
            "per_length": {
                str(k): dict(v) for k, v in sorted(self.per_length.items())
            },
            "confusion": [list(row) for row in self.confusion],
            "n_records": self.n_records,
            "n_tokens": self.n_tokens,
        }


def _f1_from_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _score_pairs(pairs):
    """Metrics over (true sequence, predicted sequence) pairs."""
    tp = {KEEP_LABEL: 0, DROP_LABEL: 0}
    fp = {KEEP_LABEL: 0, DROP_LABEL: 0}
    fn = {KEEP_LABEL: 0, DROP_LABEL: 0}
    confusion = np.zeros((2, 2), dtype=np.int64)
    correct = 0
    total = 0
    exact = 0
    for truth, pred in pairs:
        all_ok = True
        for t, p in zip(truth, pred):
            total += 1
            if t == p:
                correct += 1
                tp[t] += 1
            else:
                all_ok = False
                fn[t] += 1
                if p in fp:
                    fp[p] += 1
            if p in (KEEP_LABEL, DROP_LABEL):
                confusion[t - KEEP_LABEL, p - KEEP_LABEL] += 1
        exact += all_ok
    f1_keep = _f1_from_counts(tp[KEEP_LABEL], fp[KEEP_LABEL], fn[KEEP_LABEL])
    f1_drop = _f1_from_counts(tp[DROP_LABEL], fp[DROP_LABEL], fn[DROP_LABEL])
    n = len(pairs)
    return {
        "f1": (f1_keep + f1_drop) / 2.0,
        "exact_match": exact / n,
        "token_acc": correct / total,
        "f1_keep": f1_keep,
        "f1_drop": f1_drop,
        "confusion": tuple(tuple(int(x) for x in row) for row in confusion),
        "n_records": n,
        "n_tokens": total,
    }


def label_metrics(true_seqs, pred_seqs):
    """MetricsReport from per-record label sequences (token positions)."""
    if not true_seqs:
        raise ValueError("label_metrics needs at least one record")
    if len(true_seqs) != len(pred_seqs):
        raise ValueError("true and predicted record counts differ")
    pairs = []
    for truth, pred in zip(true_seqs, pred_seqs):
        if len(truth) != len(pred):
            raise ValueError("a record's true and predicted lengths differ")
        pairs.append((list(truth), list(pred)))
    overall = _score_pairs(pairs)
    per_length = {}
    by_len = {}
    for pair in pairs:
        by_len.setdefault(len(pair[0]), []).append(pair)
    for length, subset in sorted(by_len.items()):
        sub = _score_pairs(subset)
        per_length[length] = {
            "f1": sub["f1"],
            "exact_match": sub["exact_match"],
            "token_acc": sub["token_acc"],
            "n": sub["n_records"],
        }
    return MetricsReport(per_length=per_length, **overall)


def evaluate(params, records, model_cfg, vocab, graph=None, batch_size=64):
    """Predict every record and score against its stored labels."""
    if not records:
        raise ValueError("evaluate needs at least one record")
    preds = predict_labels(params, records, model_cfg, vocab, graph,
                           batch_size)
    return label_metrics([list(r.labels) for r in records], preds)


def per_length_csv(report):
    """Length-stratified metrics as CSV (one row per observed length)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["length", "n", "f1", "exact_match", "token_acc"])
    for length, row in sorted(report.per_length.items()):
        writer.writerow(
            [length, row["n"], repr(row["f1"]), repr(row["exact_match"]),
             repr(row["token_acc"])]
        )
    return buf.getvalue()


def percent_improvement(value, baseline):
    """100 * (value - baseline) / baseline."""
    if baseline == 0:
        return float("nan")
    return 100.0 * (value - baseline) / baseline


@dataclass(frozen=True)
class ExperimentRow:
    variant: str
    seed: int
    f1: float
    exact_match: float
    token_acc: float


@dataclass
class ExperimentResult:
    """Per-run metrics plus per-variant aggregates.

    ``summary`` maps variant -> metric -> (mean, deviation); failures
    hold (variant, seed, message) for cells whose training aborted.
    """

    rows: list
    summary: dict
    baseline: str = "none"
    failures: list = field(default_factory=list)

    def improvement(self, variant, metric):
        """Percent improvement of a variant's mean over the baseline mean;
        None for the baseline itself or when the baseline is absent."""
        if variant == self.baseline or self.baseline not in self.summary:
            return None
        base = self.summary[self.baseline][metric][0]
        return percent_improvement(self.summary[variant][metric][0], base)

    def runs_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant", "seed", "f1", "exact_match",
                         "token_acc"])
        for row in self.rows:
            writer.writerow(
                [row.variant, row.seed, repr(row.f1),
                 repr(row.exact_match), repr(row.token_acc)]
            )
        return buf.getvalue()

    def summary_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["variant"]
        for m in METRIC_NAMES:
            header += [f"{m}_mean", f"{m}_dev", f"{m}_imp"]
        writer.writerow(header)
        for variant, stats in self.summary.items():
            row = [variant]
            for m in METRIC_NAMES:
                mean, dev = stats[m]
                imp = self.improvement(variant, m)
                row += [repr(mean), repr(dev),
                        "-" if imp is None else repr(imp)]
            writer.writerow(row)
        return buf.getvalue()

    def table(self):
        """Human-readable comparison table, baseline marked "(-)"."""
        lines = [
            f"{'variant':<14}" + "".join(f"{m:>26}" for m in METRIC_NAMES)
        ]
        for variant, stats in self.summary.items():
            cells = []
            for m in METRIC_NAMES:
                mean, dev = stats[m]
                imp = self.improvement(variant, m)
                marker = "(-)" if imp is None else f"({imp:+.1f}%)"
                cells.append(f"{mean:.4f} ± {dev:.4f} {marker:>9}")
            lines.append(f"{variant:<14}" + "".join(f"{c:>26}" for c in cells))
        for variant, seed, message in self.failures:
            lines.append(f"{variant:<14}  seed {seed} failed: {message}")
        return "\n".join(lines) + "\n"


def run_experiment(variants, model_cfg, train_cfg, train_records,
                   val_records, test_records, graph=None, seeds=(0, 1, 2)):
    """Train every variant x seed and aggregate test metrics.

    All runs share one vocabulary (from the training records) and the
    supplied mined graph. A run that raises a package error is recorded
    under ``failures`` and excluded from that variant's aggregate; other
    cells proceed.
    """
    for name in variants:
        if name not in VARIANTS:
            raise ValueError(
                f"unknown variant {name!r}; choose from "
                f"{sorted(VARIANTS)}"
            )
    if not seeds:
        raise ValueError("run_experiment needs at least one seed")
    if graph is None and any(VARIANTS[v][0] == "static" for v in variants):
        raise ValueError("static variants require a mined tag graph")
    vocab = build_vocab(train_records)
    rows = []
    failures = []
    for name in variants:
        graph_mode, fusion = VARIANTS[name]
        cfg = clone_config(model_cfg, graph_mode=graph_mode, fusion=fusion)
        run_graph = graph if graph_mode == "static" else None
        for seed in seeds:
            tc = replace(train_cfg, seed=seed)
            try:
                result = train(cfg, tc, train_records, val_records,
                               graph=run_graph, vocab=vocab)
                report = evaluate(result.params, test_records, cfg, vocab,
                                  graph=run_graph,
                                  batch_size=train_cfg.batch_size)
            except TagtrimError as exc:
                failures.append((name, seed, str(exc)))
                continue
            rows.append(ExperimentRow(
                variant=name, seed=seed, f1=report.f1,
                exact_match=report.exact_match, token_acc=report.token_acc,
            ))
    summary = {}
    for name in variants:
        scored = [r for r in rows if r.variant == name]
        if not scored:
            continue
        summary[name] = {
            m: (
                float(np.mean([getattr(r, m) for r in scored])),
                float(np.std([getattr(r, m) for r in scored])),
            )
            for m in METRIC_NAMES
        }
    return ExperimentResult(rows=rows, summary=summary, failures=failures)
