"""HTTP/JSON facade over the workflow engine for live annotators.

Items are admitted in dataset order at startup: confident predictions
finalize immediately, everything else becomes a queue of single-purpose
tasks (verify or blind label). Annotators lease tasks over /api/v1; leases
expire after a TTL, and no annotator ever sees two tasks for the same item.
Blind tasks never carry any label. All engine state is guarded by one lock.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel

from .data import ImageSample
from .index import ManifoldIndex
from .workflow import (
    AUTO_ACCEPT,
    AuditRecord,
    ItemFlow,
    Thresholds,
    WorkflowCounters,
    WorkItem,
    metrics_snapshot,
)


@dataclass
class Task:
    task_id: str
    item_id: str
    kind: str
    proposed_label: Optional[str]
    created: int
    leased_to: Optional[str] = None
    lease_expires: float = 0.0
    completed: bool = False


class AnnotationService:
    """Single-owner engine state behind the HTTP handlers."""

    def __init__(self, samples: Sequence[ImageSample], items: Sequence[WorkItem],
                 index: ManifoldIndex, thresholds: Thresholds, mode: str,
                 k: int = 5, lease_ttl: float = 600.0,
                 update_dictionary: bool = True, audit_path=None,
                 clock=time.monotonic):
        self._lock = threading.Lock()
        self._clock = clock
        self.lease_ttl = lease_ttl
        self.update_dictionary = update_dictionary
        self.audit_path = Path(audit_path) if audit_path else None
        self.samples = {s.id: s for s in samples}
        self.truth = {item.id: item.truth for item in items}
        self.index = index
        self.counters = WorkflowCounters()
        self.records: List[AuditRecord] = []
        self.flows: Dict[str, ItemFlow] = {}
        self.tasks: Dict[str, Task] = {}
        self._task_order: List[str] = []
        self._task_seq = 0
        if self.audit_path:
            self.audit_path.write_text("", encoding="utf-8")
        for item in items:
            k_eff = min(k, len(index))
            prediction = index.knn_predict(item.feat, k_eff)
            flow = ItemFlow(item.id, item.feat, prediction, thresholds, mode)
            self.flows[item.id] = flow
            if flow.done:  # AUTO_ACCEPT finalizes without human input
                self._finalize(flow)
            else:
                self._enqueue_next(flow)

    # -- internals (caller holds the lock or is __init__) -------------------

    def _enqueue_next(self, flow: ItemFlow) -> None:
        pending = flow.pending()
        task = Task(
            task_id=f"task-{self._task_seq:06d}",
            item_id=flow.item_id,
            kind=pending.kind,
            proposed_label=pending.proposed_label,
            created=self._task_seq,
        )
        self._task_seq += 1
        self.tasks[task.task_id] = task
        self._task_order.append(task.task_id)

    def _finalize(self, flow: ItemFlow) -> None:
        updated = flow.dictionary_update and self.update_dictionary
        if updated:
            self.index.insert(flow.item_id, flow.feat, flow.final_label)
        record = flow.record()
        record.dictionary_updated = updated
        self.records.append(record)
        self.counters.add(record, self.truth[flow.item_id], flow.disagreed)
        if self.audit_path:
            with open(self.audit_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    def _excluded(self, item_id: str) -> frozenset:
        return frozenset(a for a, _ in self.flows[item_id].human_labels)

    # -- handler entry points ------------------------------------------------

    def next_task(self, annotator: str) -> Optional[dict]:
        now = self._clock()
        with self._lock:
            for task_id in self._task_order:
                task = self.tasks[task_id]
                if task.completed:
                    continue
                if task.leased_to is not None and task.lease_expires > now:
                    continue
                if annotator in self._excluded(task.item_id):
                    continue
                task.leased_to = annotator
                task.lease_expires = now + self.lease_ttl
                out = {
                    "task_id": task.task_id,
                    "item_id": task.item_id,
                    "image_url": f"/api/v1/images/{task.item_id}",
                    "kind": task.kind,
                    "annotator": annotator,
                }
                if task.kind == "verify":
                    out["proposed_label"] = task.proposed_label
                return out
        return None

    def submit_label(self, task_id: str, label: str) -> dict:
        now = self._clock()
        with self._lock:
            task = self.tasks.get(task_id)
            if task is None:
                raise KeyError(task_id)
            if task.completed or task.leased_to is None or task.lease_expires <= now:
                raise PermissionError(task_id)
            task.completed = True
            flow = self.flows[task.item_id]
            flow.submit(task.leased_to, label)
            if flow.done:
                self._finalize(flow)
                return {"status": "finalized", "final": flow.final_label}
            self._enqueue_next(flow)
            return {"status": "pending"}

    def queue_depth(self) -> int:
        with self._lock:
            return sum(1 for t in self.tasks.values() if not t.completed)

    def metrics(self) -> dict:
        with self._lock:
            snapshot = metrics_snapshot(self.counters)
        snapshot["queue_depth"] = self.queue_depth()
        return snapshot

    def image_pgm(self, item_id: str) -> Optional[bytes]:
        sample = self.samples.get(item_id)
        if sample is None:
            return None
        img = np.round(sample.pixels[0] * 255).astype(np.uint8)
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


class LabelSubmission(BaseModel):
    label: str


def create_app(service: AnnotationService, static_dir=None) -> FastAPI:
    app = FastAPI(title="simtext annotation service")
    # the console may be served from a different origin during development
    from fastapi.middleware.cors import CORSMiddleware

    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    @app.get("/api/v1/tasks/next")
    def tasks_next(annotator: str = Query("")):
        if not annotator.strip():
            raise HTTPException(status_code=400, detail="annotator id required")
        task = service.next_task(annotator.strip())
        if task is None:
            return Response(status_code=204)
        return task

    @app.post("/api/v1/tasks/{task_id}/label")
    def submit(task_id: str, body: LabelSubmission):
        try:
            return service.submit_label(task_id, body.label)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown task")
        except PermissionError:
            raise HTTPException(status_code=409, detail="lease expired or task done")

    @app.get("/api/v1/metrics")
    def get_metrics():
        return service.metrics()

    @app.get("/api/v1/images/{item_id}")
    def get_image(item_id: str):
        body = service.image_pgm(item_id)
        if body is None:
            raise HTTPException(status_code=404, detail="unknown item")
        return Response(content=body, media_type="image/x-portable-graymap")

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")

    return app
