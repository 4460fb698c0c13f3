"""Robustness (mean ||r|| / ||x||) and accuracy reports."""

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from advcritic import attack as atk

ATTACKS = ("deepfool", "ours")
# C = p_pred(x) is capped so the attack target stays inside (0, 1)
MAX_CONFIDENCE = 1.0 - 1e-6

RECORD_FIELDS = (
    "index",
    "label",
    "target",
    "r_norm",
    "x_norm",
    "success",
    "iterations",
    "confidence",
)


class ReportMismatchError(ValueError):
    pass


def test_error(model, dataset, batch_size=500):
    """Percentage of misclassified examples (no noise, no attack)."""
    wrong = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        wrong += int(np.sum(model.predict(dataset.images[sl]) != dataset.labels[sl]))
    return 100.0 * wrong / max(len(dataset), 1)


def params_hash(params):
    h = hashlib.sha256(params.tag.encode())
    for name, node in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(node.value, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class RobustnessReport:
    model: str
    attack: str
    rho: float
    test_error: float
    n_attacked: int
    n_failed: int
    n_misclassified: int
    n_zero_input: int
    records: list = field(default_factory=list)
    fingerprint: dict = field(default_factory=dict)

    @property
    def failure_rate(self):
        return self.n_failed / self.n_attacked if self.n_attacked else 0.0

    def summary(self):
        d = asdict(self)
        d.pop("records")
        d["failure_rate"] = self.failure_rate
        return d

    def to_json(self):
        d = self.summary()
        d["records"] = self.records
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d.pop("failure_rate", None)
        return cls(**d)

    def records_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for rec in self.records:
            w.writerow([_fmt(rec[f]) for f in RECORD_FIELDS])
        return buf.getvalue()

    def ratio_histogram_csv(self, bins=20):
        ratios = [r["r_norm"] / r["x_norm"] for r in self.records if r["success"]]
        counts, edges = np.histogram(ratios, bins=bins) if ratios else (np.zeros(0), [0.0])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("bin_lo", "bin_hi", "count"))
        for i, c in enumerate(counts):
            w.writerow((repr(float(edges[i])), repr(float(edges[i + 1])), int(c)))
        return buf.getvalue()

    def save(self, stem):
        with open(f"{stem}.json", "w") as fh:
            fh.write(self.to_json())
        with open(f"{stem}.csv", "w") as fh:
            fh.write(self.records_csv())
        with open(f"{stem}_hist.csv", "w") as fh:
            fh.write(self.ratio_histogram_csv())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return int(v)
    return v


def parse_records_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        out.append(
            {
                "index": int(row["index"]),
                "label": int(row["label"]),
                "target": int(row["target"]),
                "r_norm": float(row["r_norm"]),
                "x_norm": float(row["x_norm"]),
                "success": bool(int(row["success"])),
                "iterations": int(row["iterations"]),
                "confidence": float(row["confidence"]),
            }
        )
    return out


def rho_from_records(records):
    """Mean ||r||/||x|| over successful attacks (0 when there are none)."""
    ratios = [r["r_norm"] / r["x_norm"] for r in records if r["success"]]
    return float(np.mean(ratios)) if ratios else 0.0


def run_attack(model, x, labels, attack, cfg=None):
    """Attack a batch of correctly classified inputs; returns an AttackResult."""
    if attack == "deepfool":
        cfg = cfg or atk.EVAL_ATTACK
        return atk.deepfool(
            x, model, max_iter=cfg.max_iter, overshoot=0.02, clip=cfg.clip, bounds=cfg.bounds
        )
    if attack == "ours":
        cfg = cfg or atk.EVAL_ATTACK
        probs = model.predict_probs(x)
        conf = np.minimum(probs[np.arange(len(x)), labels], MAX_CONFIDENCE)
        targets = atk.closest_boundary_targets(model, x, labels)
        return atk.high_confidence_attack(x, targets, cfg, model, confidence=conf)
    raise ValueError(f"unknown attack {attack!r}")


def robustness(model, dataset, attack, cfg=None, name="model", batch_size=100,
               fingerprint=None):
    """Attack every correctly classified example and aggregate mean ||r||/||x||.

    Misclassified inputs and all-zero inputs are skipped and counted; failed
    attacks are excluded from the mean and counted as failures.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    records = []
    n_wrong = n_zero = 0
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        x = dataset.images[idx]
        y = dataset.labels[idx]
        x_norm = np.sqrt(np.sum(x.reshape(len(x), -1) ** 2, axis=1))
        pred = model.predict(x)
        keep = (pred == y) & (x_norm > 0)
        n_wrong += int(np.sum(pred != y))
        n_zero += int(np.sum((pred == y) & (x_norm == 0)))
        if not keep.any():
            continue
        res = run_attack(model, x[keep], y[keep], attack, cfg)
        r_norm = np.sqrt(np.sum(res.r.reshape(len(res.r), -1) ** 2, axis=1))
        for j, i in enumerate(idx[keep]):
            records.append(
                {
                    "index": int(i),
                    "label": int(dataset.labels[i]),
                    "target": int(res.target[j]),
                    "r_norm": float(r_norm[j]),
                    "x_norm": float(x_norm[keep][j]),
                    "success": bool(res.success[j]),
                    "iterations": int(res.iterations[j]),
                    "confidence": float(res.confidence[j]),
                }
            )
    fp = {"dataset": dataset.fingerprint, "checkpoint": params_hash(model.params)}
    fp.update(fingerprint or {})
    return RobustnessReport(
        model=name,
        attack=attack,
        rho=rho_from_records(records),
        test_error=test_error(model, dataset),
        n_attacked=len(records),
        n_failed=sum(not r["success"] for r in records),
        n_misclassified=n_wrong,
        n_zero_input=n_zero,
        records=records,
        fingerprint=fp,
    )


def compare(reports):
    """Table-1-style comparison: one row per model, test error then rho per attack.

    Returns (text, csv_text). Reports must share a dataset fingerprint.
    """
    if not reports:
        raise ValueError("need at least one report")
    datasets = {r.fingerprint.get("dataset") for r in reports}
    if len(datasets) != 1:
        raise ReportMismatchError(f"reports come from different datasets: {sorted(datasets)}")
    attacks = sorted({r.attack for r in reports})
    models = sorted({r.model for r in reports})
    cell = {(r.model, r.attack): r for r in reports}
    header = ["model", "test_error_%"] + [f"rho_{a}" for a in attacks]
    rows = []
    for m in models:
        errs = [cell[(m, a)].test_error for a in attacks if (m, a) in cell]
        row = [m, errs[0]]
        row += [cell[(m, a)].rho if (m, a) in cell else None for a in attacks]
        rows.append(row)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    widths = [max(len(header[i]), 10) for i in range(len(header))]
    lines = [" | ".join(h.ljust(wd) for h, wd in zip(header, widths))]
    lines.append("-+-".join("-" * wd for wd in widths))
    for row in rows:
        cells = [row[0], f"{row[1]:.2f}"] + ["-" if v is None else f"{v:.3f}" for v in row[2:]]
        lines.append(" | ".join(c.ljust(wd) for c, wd in zip(cells, widths)))
    return "\n".join(lines) + "\n", buf.getvalue()
