"""Interactive recognition workflow: routing, human voting, cost accounting.

Each item's prediction confidence routes it to one of three paths: accept it
outright, have one human verify it, or collect two blind human labels. The
same per-item state machine (`ItemFlow`) drives both simulated oracles and
the HTTP annotation service; `run` executes a whole dataset against an
oracle and tallies the counters behind the efficiency/accuracy metrics.

Modes: ROBOTIC uses both thresholds; ASSISTIVE ignores the upper one, so no
item skips human review and every final label is human-confirmed or
human-produced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import canonical_label
from .index import ManifoldIndex, Prediction

ROBOTIC = "ROBOTIC"
ASSISTIVE = "ASSISTIVE"
MODES = (ROBOTIC, ASSISTIVE)

AUTO_ACCEPT = "AUTO_ACCEPT"
VERIFY_ONE = "VERIFY_ONE"
TWO_HUMAN = "TWO_HUMAN"

VERIFY = "verify"
BLIND = "blind_label"


class OracleError(RuntimeError):
    """Raised by an oracle that cannot currently produce a label."""


@dataclass(frozen=True)
class Thresholds:
    theta1: float
    theta2: float

    def __post_init__(self):
        if not (0.0 <= self.theta1 <= self.theta2 <= 1.0):
            raise ValueError(
                f"need 0 <= theta1 <= theta2 <= 1, got ({self.theta1}, {self.theta2})"
            )


def route(confidence: float, thresholds: Thresholds, mode: str) -> str:
    """Map a prediction confidence to its handling path."""
    if mode == ROBOTIC:
        if confidence > thresholds.theta2:
            return AUTO_ACCEPT
        if confidence > thresholds.theta1:
            return VERIFY_ONE
        return TWO_HUMAN
    if mode == ASSISTIVE:
        return VERIFY_ONE if confidence > thresholds.theta1 else TWO_HUMAN
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class AuditRecord:
    item_id: str
    route: str
    model_label: str
    confidence: float
    human_labels: List[Tuple[str, str]]  # (annotator id, label)
    final_label: str
    human_estimates: int
    dictionary_updated: bool

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "item": self.item_id,
            "route": self.route,
            "model_label": self.model_label,
            "confidence": self.confidence,
            "human_labels": [[a, l] for a, l in self.human_labels],
            "final": self.final_label,
            "estimates": self.human_estimates,
            "dict_updated": self.dictionary_updated,
        }


@dataclass
class PendingTask:
    """What the item needs next from a human."""

    kind: str  # verify | blind_label
    proposed_label: Optional[str]  # set only for verify
    excluded_annotators: frozenset


class ItemFlow:
    """State machine for one item's pass through the routing algorithm.

    VERIFY_ONE: one human checks the model label; on disagreement a second
    (blind) label decides. Two agreeing humans override the model and feed
    the dictionary, otherwise the model label stands. TWO_HUMAN: two blind
    labels; on disagreement a third breaks the tie (majority label; the
    dictionary is updated either way).
    """

    def __init__(self, item_id: str, feat: np.ndarray, prediction: Prediction,
                 thresholds: Thresholds, mode: str):
        self.item_id = item_id
        self.feat = feat
        self.prediction = prediction
        self.model_label = canonical_label(prediction.label)
        self.route = route(prediction.confidence, thresholds, mode)
        self.human_labels: List[Tuple[str, str]] = []
        self.final_label: Optional[str] = None
        self.dictionary_update = False
        self._stage = {"AUTO_ACCEPT": "done", "VERIFY_ONE": "verify",
                       "TWO_HUMAN": "blind1"}[self.route]
        if self.route == AUTO_ACCEPT:
            self.final_label = self.model_label

    @property
    def done(self) -> bool:
        return self._stage == "done"

    def pending(self) -> Optional[PendingTask]:
        if self.done:
            return None
        kind = VERIFY if self._stage == "verify" else BLIND
        proposed = self.model_label if kind == VERIFY else None
        excluded = frozenset(a for a, _ in self.human_labels)
        return PendingTask(kind=kind, proposed_label=proposed,
                           excluded_annotators=excluded)

    def submit(self, annotator_id: str, label: str) -> None:
        if self.done:
            raise ValueError(f"item {self.item_id} already finalized")
        label = canonical_label(label)
        self.human_labels.append((annotator_id, label))
        if self._stage == "verify":
            if label == self.model_label:
                self._finish(self.model_label, update=False)
            else:
                self._stage = "second"
        elif self._stage == "second":
            first = self.human_labels[0][1]
            if label == first:
                self._finish(label, update=True)
            else:
                self._finish(self.model_label, update=False)
        elif self._stage == "blind1":
            self._stage = "blind2"
        elif self._stage == "blind2":
            first = self.human_labels[0][1]
            if label == first:
                self._finish(label, update=True)
            else:
                self._stage = "tiebreak"
        elif self._stage == "tiebreak":
            # first two disagreed, so the third matches at most one of them:
            # the majority label, when one exists, is always the third label
            self._finish(label, update=True)
        else:  # pragma: no cover
            raise AssertionError(self._stage)

    def _finish(self, final: str, update: bool) -> None:
        self.final_label = final
        self.dictionary_update = update
        self._stage = "done"

    @property
    def disagreed(self) -> bool:
        """Whether any human/model or human/human disagreement occurred."""
        if self.route == VERIFY_ONE:
            return bool(self.human_labels) and self.human_labels[0][1] != self.model_label
        if self.route == TWO_HUMAN:
            return len(self.human_labels) >= 2 and \
                self.human_labels[0][1] != self.human_labels[1][1]
        return False

    def record(self) -> AuditRecord:
        if not self.done:
            raise ValueError(f"item {self.item_id} not finalized")
        return AuditRecord(
            item_id=self.item_id,
            route=self.route,
            model_label=self.model_label,
            confidence=self.prediction.confidence,
            human_labels=list(self.human_labels),
            final_label=self.final_label,
            human_estimates=len(self.human_labels),
            dictionary_updated=self.dictionary_update,
        )


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

class SimulatedOracle:
    """Ground-truth-backed oracle with a flat per-annotator error rate.

    The answer for (item, annotator index) depends only on those plus the
    seed, never on call order, so replays are identical.
    """

    def __init__(self, truth: Dict[str, str], error_rate: float = 0.0,
                 seed: int = 0, label_pool: Optional[Sequence[str]] = None):
        if not (0.0 <= error_rate < 1.0):
            raise ValueError("error rate must be in [0, 1)")
        self.truth = {k: canonical_label(v) for k, v in truth.items()}
        self.error_rate = error_rate
        self.seed = seed
        pool = label_pool if label_pool is not None else sorted(set(self.truth.values()))
        self.label_pool = [canonical_label(l) for l in pool]

    def __call__(self, item_id: str, annotator_index: int) -> str:
        if item_id not in self.truth:
            raise OracleError(f"no ground truth for item {item_id!r}")
        truth = self.truth[item_id]
        if self.error_rate == 0.0:
            return truth
        import hashlib
        digest = hashlib.sha256(
            f"{self.seed}:{item_id}:{annotator_index}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        if rng.random() >= self.error_rate:
            return truth
        wrong = [l for l in self.label_pool if l != truth]
        if not wrong:
            return truth
        return wrong[int(rng.integers(len(wrong)))]


# ---------------------------------------------------------------------------
# counters and metrics
# ---------------------------------------------------------------------------

@dataclass
class WorkflowCounters:
    """Raw tallies; a/b split wrong/correct, 1=human-verified, 2=auto."""

    a1: int = 0
    b1: int = 0
    a2: int = 0
    b2: int = 0
    t: int = 0
    fn_num: int = 0  # wrong finals that are the model's own prediction
    human_estimates: int = 0
    disagreements: int = 0
    dict_updates: int = 0

    def add(self, record: AuditRecord, truth_label: str, disagreed: bool) -> None:
        truth = canonical_label(truth_label)
        correct = record.final_label == truth
        self.t += 1
        if record.route == AUTO_ACCEPT:
            self.b2 += correct
            self.a2 += not correct
        elif record.route == VERIFY_ONE:
            self.b1 += correct
            self.a1 += not correct
        if record.route in (AUTO_ACCEPT, VERIFY_ONE):
            if not correct and record.final_label == record.model_label:
                self.fn_num += 1
        self.human_estimates += record.human_estimates
        self.disagreements += disagreed
        self.dict_updates += record.dictionary_updated

    def check(self) -> None:
        assert self.a2 + self.b2 <= self.t
        assert self.a1 + self.b1 <= self.t
        assert (self.a1 + self.b1) + (self.a2 + self.b2) <= self.t


def metrics(counters: WorkflowCounters) -> Dict[str, Optional[float]]:
    """Derived metrics; a metric with a zero denominator is None.

    efficiency counts saved human estimates against the two-per-item
    baseline: verified items save one of two, auto-accepted items save both.
    """
    c = counters
    model_routed = c.a1 + c.b1 + c.a2 + c.b2
    out: Dict[str, Optional[float]] = {}
    out["efficiency"] = ((c.a1 + c.b1) / 2 + c.a2 + c.b2) / c.t if c.t else 0.0
    out["ac"] = (c.b1 + c.b2) / model_routed if model_routed else None
    out["hcac"] = c.b2 / (c.a2 + c.b2) if (c.a2 + c.b2) else None
    out["hvac"] = c.b1 / (c.a1 + c.b1) if (c.a1 + c.b1) else None
    out["fn"] = c.fn_num / model_routed if model_routed else None
    out["hcfn"] = c.a2 / c.t if c.t else None
    return out


def metrics_snapshot(counters: WorkflowCounters) -> dict:
    """Full JSON-ready snapshot: metrics plus the raw counters."""
    c = counters
    return {
        "schema": 1,
        "counters": {"a1": c.a1, "b1": c.b1, "a2": c.a2, "b2": c.b2, "t": c.t,
                     "fn_num": c.fn_num},
        "metrics": metrics(c),
        "human_estimates": c.human_estimates,
        "dict_updates": c.dict_updates,
        "disagreement_rate": c.disagreements / c.t if c.t else 0.0,
    }


# ---------------------------------------------------------------------------
# batch run against an oracle
# ---------------------------------------------------------------------------

@dataclass
class WorkItem:
    """An item ready for prediction: id, feat vector, ground truth."""

    id: str
    feat: np.ndarray
    truth: str


@dataclass
class RunResult:
    counters: WorkflowCounters
    records: List[AuditRecord]
    parked: List[str] = field(default_factory=list)


def process_item(flow: ItemFlow, oracle: Callable[[str, int], str],
                 index: ManifoldIndex, update_dictionary: bool = True
                 ) -> AuditRecord:
    """Drive one item's flow to completion with an oracle."""
    annotator = 0
    while not flow.done:
        label = oracle(flow.item_id, annotator)
        flow.submit(f"sim-{annotator}", label)
        annotator += 1
    if flow.dictionary_update and update_dictionary:
        index.insert(flow.item_id, flow.feat, flow.final_label)
    record = flow.record()
    record.dictionary_updated = flow.dictionary_update and update_dictionary
    return record


def run(items: Sequence[WorkItem], index: ManifoldIndex,
        oracle: Callable[[str, int], str], thresholds: Thresholds, mode: str,
        k: int = 5, update_dictionary: bool = True) -> RunResult:
    """Stream items in order; dictionary updates affect later predictions."""
    counters = WorkflowCounters()
    records: List[AuditRecord] = []
    parked: List[str] = []
    for item in items:
        k_eff = min(k, len(index))
        prediction = index.knn_predict(item.feat, k_eff)
        flow = ItemFlow(item.id, item.feat, prediction, thresholds, mode)
        try:
            record = process_item(flow, oracle, index, update_dictionary)
        except OracleError:
            parked.append(item.id)
            continue
        records.append(record)
        counters.add(record, item.truth, flow.disagreed)
    counters.check()
    return RunResult(counters=counters, records=records, parked=parked)


def write_audit_jsonl(path, records: Sequence[AuditRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# threshold grid search
# ---------------------------------------------------------------------------

@dataclass
class GridSearchResult:
    thresholds: Thresholds
    feasible: bool
    efficiency: float
    hcfn: float


def grid_values(start: float = 0.5, stop: float = 1.0, step: float = 0.01
                ) -> List[float]:
    if step <= 0:
        raise ValueError("grid step must be positive")
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


def grid_search(scored: Sequence[Tuple[float, bool]], *,
                target_hcfn: float = 0.005, mode: str = ROBOTIC,
                start: float = 0.5, stop: float = 1.0, step: float = 0.01
                ) -> GridSearchResult:
    """Pick (theta1, theta2) maximizing efficiency subject to HCFN <= target.

    `scored` holds per-item (confidence, model prediction correct) from a
    labeled validation run. Items routed to humans are assumed resolved
    correctly (ground truth is available on a validation set), so HCFN comes
    entirely from wrong auto-accepts. Ties prefer the larger theta2, then the
    larger theta1. With no feasible pair, returns the pair minimizing HCFN
    and flags infeasibility.
    """
    if not scored:
        raise ValueError("need at least one scored item")
    conf = np.array([c for c, _ in scored], dtype=np.float64)
    correct = np.array([ok for _, ok in scored], dtype=bool)
    t = len(scored)
    conf_sorted = np.sort(conf)
    wrong_sorted = np.sort(conf[~correct])
    correct_sorted = np.sort(conf[correct])

    def above(sorted_arr: np.ndarray, theta: float) -> int:
        return len(sorted_arr) - int(np.searchsorted(sorted_arr, theta, side="right"))

    grid = grid_values(start, stop, step)
    best: Optional[Tuple] = None       # (efficiency, theta2, theta1)
    best_any: Optional[Tuple] = None   # (-hcfn, efficiency, theta2, theta1)
    for i, t1 in enumerate(grid):
        for t2 in grid[i:]:
            if mode == ROBOTIC:
                n_auto = above(conf_sorted, t2)
                a2 = above(wrong_sorted, t2)
                b2 = above(correct_sorted, t2)
                b1 = above(conf_sorted, t1) - n_auto
            else:
                a2 = b2 = 0
                b1 = above(conf_sorted, t1)
            efficiency = (b1 / 2 + a2 + b2) / t
            hcfn = a2 / t
            key = (efficiency, t2, t1)
            if hcfn <= target_hcfn and (best is None or key > best):
                best = key
            key_any = (-hcfn, efficiency, t2, t1)
            if best_any is None or key_any > best_any:
                best_any = key_any
    if best is not None:
        eff, t2, t1 = best
        return GridSearchResult(Thresholds(t1, t2), True, eff, _hcfn_at(
            wrong_sorted, t2, t, mode))
    neg_hcfn, eff, t2, t1 = best_any
    return GridSearchResult(Thresholds(t1, t2), False, eff, -neg_hcfn)


def _hcfn_at(wrong_sorted: np.ndarray, theta2: float, t: int, mode: str) -> float:
    if mode != ROBOTIC:
        return 0.0
    a2 = len(wrong_sorted) - int(np.searchsorted(wrong_sorted, theta2, side="right"))
    return a2 / t
