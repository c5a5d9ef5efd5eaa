"""Differential-diagnosis metrics and error reports for procedure refinement.

A failed dialogue (question cap exhausted) is scored as a negative
prediction here, in the metrics layer, so traces keep their true "failure"
outcome for the error report. F1 is reported as NA (None) when precision
and recall are both zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

OUTCOMES = ("confirm", "exclude", "failure")


@dataclass
class DifferentialMetrics:
    success_rate: float
    accuracy: float
    precision: float
    recall: float
    f1: float | None  # None renders as NA
    tp: int
    fp: int
    tn: int
    fn: int
    n_failures: int

    def as_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "n_failures": self.n_failures,
        }


def differential_metrics(results: list[str], labels: list[bool]) -> DifferentialMetrics:
    """Confusion metrics over outcomes: confirm predicts positive, exclude
    and failure predict negative."""
    if len(results) != len(labels):
        raise ValueError("results and labels must align")
    if not results:
        raise ValueError("no results to score")
    for outcome in results:
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
    tp = fp = tn = fn = failures = 0
    for outcome, label in zip(results, labels):
        predicted_positive = outcome == "confirm"
        if outcome == "failure":
            failures += 1
        if predicted_positive and label:
            tp += 1
        elif predicted_positive and not label:
            fp += 1
        elif not predicted_positive and label:
            fn += 1
        else:
            tn += 1
    n = len(results)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else None
    return DifferentialMetrics(
        success_rate=(n - failures) / n,
        accuracy=(tp + tn) / n,
        precision=precision,
        recall=recall,
        f1=f1,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        n_failures=failures,
    )


@dataclass
class ErrorCase:
    record_id: str
    outcome: str
    label: bool
    kind: str  # "false_positive" | "false_negative"
    last_node: str | None
    last_answer: bool | None


@dataclass
class ErrorReport:
    cases: list[ErrorCase] = field(default_factory=list)
    by_edge: dict[tuple[str, str], int] = field(default_factory=dict)
    by_node: dict[str, int] = field(default_factory=dict)
    top_false_negative_node: str | None = None
    top_false_positive_node: str | None = None

    @property
    def n_false_negative(self) -> int:
        return sum(1 for c in self.cases if c.kind == "false_negative")

    @property
    def n_false_positive(self) -> int:
        return sum(1 for c in self.cases if c.kind == "false_positive")

    def render(self) -> str:
        if not self.cases:
            return "no errors\n"
        lines = [
            f"{len(self.cases)} misdiagnosed case(s): "
            f"{self.n_false_negative} false negative, {self.n_false_positive} false positive",
        ]
        if self.top_false_negative_node:
            lines.append(f"most common exit among false negatives: {self.top_false_negative_node}")
        if self.top_false_positive_node:
            lines.append(f"most common exit among false positives: {self.top_false_positive_node}")
        lines.append("errors per terminal edge:")
        for (node, branch), count in sorted(
            self.by_edge.items(), key=lambda kv: (-kv[1], kv[0])
        ):
            lines.append(f"  {node} --{branch}--> : {count}")
        lines.append("cases:")
        for case in self.cases:
            lines.append(
                f"  {case.record_id}: {case.kind} (outcome {case.outcome}, "
                f"exited at {case.last_node})"
            )
        return "\n".join(lines) + "\n"


def build_error_report(results, labels, traces, record_ids=None) -> ErrorReport:
    """Group misdiagnoses by the (node, branch) that produced them.

    results/labels follow differential_metrics conventions; traces are the
    aligned RunTraces whose last entry is the step that exited (or the step
    at which the cap fired).
    """
    n = len(results)
    if not (len(labels) == len(traces) == n):
        raise ValueError("results, labels, and traces must align")
    ids = record_ids if record_ids is not None else [f"case{i}" for i in range(n)]
    report = ErrorReport()
    fn_nodes: dict[str, int] = {}
    fp_nodes: dict[str, int] = {}
    for rec_id, outcome, label, trace in zip(ids, results, labels, traces):
        predicted_positive = outcome == "confirm"
        if predicted_positive == bool(label):
            continue
        kind = "false_negative" if label else "false_positive"
        last_node, last_answer = (None, None)
        if trace.entries:
            last_node, last_answer = trace.entries[-1]
        report.cases.append(
            ErrorCase(
                record_id=rec_id,
                outcome=outcome,
                label=bool(label),
                kind=kind,
                last_node=last_node,
                last_answer=last_answer,
            )
        )
        if last_node is not None:
            branch = "yes" if last_answer else "no"
            report.by_edge[(last_node, branch)] = report.by_edge.get((last_node, branch), 0) + 1
            report.by_node[last_node] = report.by_node.get(last_node, 0) + 1
            bucket = fn_nodes if kind == "false_negative" else fp_nodes
            bucket[last_node] = bucket.get(last_node, 0) + 1
    if fn_nodes:
        report.top_false_negative_node = min(fn_nodes, key=lambda k: (-fn_nodes[k], k))
    if fp_nodes:
        report.top_false_positive_node = min(fp_nodes, key=lambda k: (-fp_nodes[k], k))
    return report


def render_metrics_table(metrics: DifferentialMetrics) -> str:
    """Plain-text table over all metric fields; NA convention for F1."""
    rows = [
        ("success_rate", f"{metrics.success_rate:.4f}"),
        ("accuracy", f"{metrics.accuracy:.4f}"),
        ("precision", f"{metrics.precision:.4f}"),
        ("recall", f"{metrics.recall:.4f}"),
        ("f1", "NA" if metrics.f1 is None else f"{metrics.f1:.4f}"),
        ("tp", str(metrics.tp)),
        ("fp", str(metrics.fp)),
        ("tn", str(metrics.tn)),
        ("fn", str(metrics.fn)),
        ("n_failures", str(metrics.n_failures)),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows) + "\n"
