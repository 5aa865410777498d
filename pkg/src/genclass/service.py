"""Annotation service for realness-test and labelling studies.

Studies are stored one directory each: study.json (the immutable spec)
plus events.jsonl, an append-only log of judgments and lifecycle events.
All state is reconstructed by replaying the log, so a crash between a
durable append and the acknowledgement leaves the record stored exactly
once.  Truth labels are only ever exposed through the report endpoint,
and only after a study is closed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse

from .data import CONFIDENCE_LEVELS
from .evaluation import (
    confidence_confusion_matrix,
    majority_vote,
    mirror_confusion,
    turing_metrics,
)

SCHEMA_VERSION = 1


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass(frozen=True)
class StudyItem:
    item_id: str
    image_path: str
    truth_is_real: bool
    intended_class: str | None = None


@dataclass
class Study:
    study_id: str
    mode: str  # "turing" | "labelling"
    classes: list[str]
    items: dict[str, StudyItem]
    item_order: list[str]
    rater_seniority: dict[str, float] = field(default_factory=dict)
    closed: bool = False
    # (rater_id, item_id) -> stored judgment payload
    judgments: dict[tuple[str, str], dict] = field(default_factory=dict)


def _session_token(study_id: str, rater_id: str) -> str:
    return hashlib.sha256(f"{study_id}\x00{rater_id}".encode()).hexdigest()[:32]


def _rater_permutation(study: Study, rater_id: str) -> list[str]:
    seed_bytes = hashlib.sha256(f"{study.study_id}\x00{rater_id}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(seed_bytes[:8], "little"))
    order = list(study.item_order)
    rng.shuffle(order)
    return order


def _judgment_key(payload: dict) -> dict:
    """Payload with volatile fields removed, for idempotency comparison."""
    return {k: v for k, v in payload.items() if k != "timestamp"}


class StudyStore:
    """Event-sourced study storage rooted at a directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.studies: dict[str, Study] = {}
        self._tokens: dict[str, tuple[str, str]] = {}
        for study_dir in sorted(self.root.iterdir()):
            if (study_dir / "study.json").exists():
                self._load_study(study_dir)

    # -- persistence ------------------------------------------------------

    def _study_dir(self, study_id: str) -> Path:
        return self.root / study_id

    def _load_study(self, study_dir: Path) -> None:
        spec = json.loads((study_dir / "study.json").read_text())
        study = self._study_from_spec(spec)
        events_path = study_dir / "events.jsonl"
        if events_path.exists():
            with open(events_path) as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    self._apply_event(study, json.loads(line))
        self.studies[study.study_id] = study

    def _append_event(self, study: Study, event: dict) -> None:
        path = self._study_dir(study.study_id) / "events.jsonl"
        with open(path, "a") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())

    def _apply_event(self, study: Study, event: dict) -> None:
        if event["type"] == "judgment":
            record = event["record"]
            study.judgments[(record["rater_id"], record["item_id"])] = record
            token = _session_token(study.study_id, record["rater_id"])
            self._tokens[token] = (study.study_id, record["rater_id"])
        elif event["type"] == "closed":
            study.closed = True

    # -- study lifecycle ----------------------------------------------------

    def _study_from_spec(self, spec: dict) -> Study:
        mode = spec.get("mode")
        if mode not in ("turing", "labelling"):
            raise ServiceError(422, "bad_mode", f"unknown study mode {mode!r}")
        items = {}
        order = []
        for raw in spec.get("items", []):
            item = StudyItem(
                item_id=raw["item_id"],
                image_path=raw["image_path"],
                truth_is_real=bool(raw["truth_is_real"]),
                intended_class=raw.get("intended_class"),
            )
            if item.item_id in items:
                raise ServiceError(
                    422, "duplicate_item", f"duplicate item id {item.item_id!r}"
                )
            items[item.item_id] = item
            order.append(item.item_id)
        if not items:
            raise ServiceError(422, "empty_pool", "study has no items")
        if mode == "turing":
            n_real = sum(1 for it in items.values() if it.truth_is_real)
            if 2 * n_real != len(items):
                raise ServiceError(
                    422,
                    "unbalanced_pool",
                    f"turing pools must be 50/50 real/synthetic "
                    f"({n_real} real of {len(items)})",
                )
        return Study(
            study_id=spec["study_id"],
            mode=mode,
            classes=list(spec.get("classes", [])),
            items=items,
            item_order=order,
            rater_seniority=dict(spec.get("rater_seniority", {})),
        )

    def create_study(self, spec: dict) -> Study:
        study_id = spec.get("study_id")
        if not study_id:
            raise ServiceError(422, "missing_id", "study_id is required")
        if study_id in self.studies:
            raise ServiceError(409, "exists", f"study {study_id!r} already exists")
        study = self._study_from_spec(spec)
        study_dir = self._study_dir(study_id)
        study_dir.mkdir(parents=True, exist_ok=True)
        (study_dir / "study.json").write_text(json.dumps(spec, sort_keys=True) + "\n")
        self.studies[study_id] = study
        return study

    def get_study(self, study_id: str) -> Study:
        try:
            return self.studies[study_id]
        except KeyError:
            raise ServiceError(404, "unknown_study", f"no study {study_id!r}")

    def close_study(self, study_id: str) -> None:
        study = self.get_study(study_id)
        if not study.closed:
            self._append_event(study, {"type": "closed"})
            study.closed = True

    # -- sessions -----------------------------------------------------------

    def create_session(self, study_id: str, rater_id: str) -> dict:
        study = self.get_study(study_id)
        if not rater_id:
            raise ServiceError(422, "missing_rater", "rater_id is required")
        token = _session_token(study_id, rater_id)
        self._tokens[token] = (study_id, rater_id)
        answered = self._answered_count(study, rater_id)
        return {
            "token": token,
            "study_id": study_id,
            "mode": study.mode,
            "total": len(study.item_order),
            "answered": answered,
        }

    def _session(self, token: str) -> tuple[Study, str]:
        try:
            study_id, rater_id = self._tokens[token]
        except KeyError:
            raise ServiceError(404, "unknown_session", "no such session token")
        return self.get_study(study_id), rater_id

    def _answered_count(self, study: Study, rater_id: str) -> int:
        order = _rater_permutation(study, rater_id)
        for i, item_id in enumerate(order):
            if (rater_id, item_id) not in study.judgments:
                return i
        return len(order)

    def next_item(self, token: str) -> dict:
        study, rater_id = self._session(token)
        order = _rater_permutation(study, rater_id)
        answered = self._answered_count(study, rater_id)
        if answered >= len(order):
            return {
                "done": True,
                "mode": study.mode,
                "progress": {"answered": answered, "total": len(order)},
            }
        item_id = order[answered]
        return {
            "done": False,
            "item_id": item_id,
            "image_url": f"/items/{item_id}/image",
            "mode": study.mode,
            "classes": study.classes,
            "progress": {"answered": answered, "total": len(order)},
        }

    # -- judgments ------------------------------------------------------------

    def _validate_record(self, study: Study, rater_id: str, payload: dict) -> dict:
        item_id = payload.get("item_id")
        if item_id not in study.items:
            raise ServiceError(422, "unknown_item", f"no item {item_id!r}")
        guessed_class = payload.get("guessed_class")
        if guessed_class is not None and study.classes and guessed_class not in study.classes:
            raise ServiceError(
                422, "unknown_class", f"class {guessed_class!r} not in study classes"
            )
        confidence = payload.get("confidence")
        if confidence is not None and confidence not in CONFIDENCE_LEVELS:
            raise ServiceError(
                422, "unknown_confidence", f"confidence {confidence!r} invalid"
            )
        if study.mode == "turing":
            if payload.get("guessed_real") is None:
                raise ServiceError(
                    422, "missing_field", "turing mode requires guessed_real"
                )
            if guessed_class is None:
                raise ServiceError(
                    422, "missing_field", "turing mode requires guessed_class"
                )
        else:
            if guessed_class is None:
                raise ServiceError(
                    422, "missing_field", "labelling mode requires guessed_class"
                )
            if confidence is None:
                raise ServiceError(
                    422, "missing_field", "labelling mode requires a confidence level"
                )
        record = {
            "study_id": study.study_id,
            "rater_id": rater_id,
            "item_id": item_id,
            "guessed_real": payload.get("guessed_real"),
            "guessed_class": guessed_class,
            "confidence": confidence,
            "timestamp": payload.get("timestamp"),
        }
        return record

    def submit_judgment(self, token: str, payload: dict) -> dict:
        study, rater_id = self._session(token)
        if study.closed:
            raise ServiceError(409, "closed", "study is closed")
        record = self._validate_record(study, rater_id, payload)
        item_id = record["item_id"]

        existing = study.judgments.get((rater_id, item_id))
        if existing is not None:
            if _judgment_key(existing) == _judgment_key(record):
                return self._progress_ack(study, rater_id, duplicate=True)
            raise ServiceError(
                409, "conflict", f"item {item_id!r} already answered differently"
            )

        order = _rater_permutation(study, rater_id)
        answered = self._answered_count(study, rater_id)
        if answered >= len(order) or order[answered] != item_id:
            raise ServiceError(
                409,
                "out_of_order",
                f"item {item_id!r} is not the session's current item",
            )

        # Durable append precedes both the in-memory update and the ack.
        self._append_event(study, {"type": "judgment", "record": record})
        study.judgments[(rater_id, item_id)] = record
        return self._progress_ack(study, rater_id, duplicate=False)

    def _progress_ack(self, study: Study, rater_id: str, duplicate: bool) -> dict:
        answered = self._answered_count(study, rater_id)
        return {
            "ok": True,
            "duplicate": duplicate,
            "progress": {"answered": answered, "total": len(study.item_order)},
        }

    # -- reports ---------------------------------------------------------------

    def report(self, study_id: str) -> dict:
        study = self.get_study(study_id)
        if not study.closed:
            raise ServiceError(
                409, "not_closed", "close the study before requesting its report"
            )
        if not study.judgments:
            raise ServiceError(409, "no_records", "study has no judgments")
        if study.mode == "turing":
            judgments = []
            for (rater_id, item_id), record in study.judgments.items():
                item = study.items[item_id]
                judgments.append(
                    {
                        "item_id": item_id,
                        "rater_id": rater_id,
                        "truth_is_real": item.truth_is_real,
                        "guessed_real": record["guessed_real"],
                        "intended_class": item.intended_class,
                        "guessed_class": record["guessed_class"],
                    }
                )
            return {"mode": "turing", "report": turing_metrics(judgments).to_dict()}

        by_item: dict[str, list[dict]] = {}
        for (rater_id, item_id), record in study.judgments.items():
            by_item.setdefault(item_id, []).append(record)
        votes = {}
        pairs = []
        for item_id, records in by_item.items():
            records = sorted(records, key=lambda r: r["rater_id"])
            labels = [r["guessed_class"] for r in records]
            seniority = [
                study.rater_seniority.get(r["rater_id"], 0.0) for r in records
            ]
            votes[item_id] = majority_vote(labels, seniority)
            for i in range(len(records)):
                for j in range(i + 1, len(records)):
                    pairs.append((records[i]["confidence"], records[j]["confidence"]))
        matrix = confidence_confusion_matrix(pairs)
        return {
            "mode": "labelling",
            "majority_votes": votes,
            "confidence_matrix": matrix.tolist(),
            "confidence_matrix_mirrored": mirror_confusion(matrix).tolist(),
            "n_pairwise": int(matrix.sum()),
        }

    def find_item(self, item_id: str) -> tuple[Study, StudyItem]:
        for study in self.studies.values():
            if item_id in study.items:
                return study, study.items[item_id]
        raise ServiceError(404, "unknown_item", f"no item {item_id!r}")


# ---------------------------------------------------------------------------
# HTTP wiring
# ---------------------------------------------------------------------------


def create_app(studies_dir: str | Path) -> FastAPI:
    store = StudyStore(studies_dir)
    app = FastAPI(title="genclass annotation service")
    app.state.store = store

    def versioned(payload: dict, status: int = 200) -> JSONResponse:
        return JSONResponse({"schema_version": SCHEMA_VERSION, **payload}, status_code=status)

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(
            {
                "schema_version": SCHEMA_VERSION,
                "error": {"code": exc.code, "message": exc.message},
            },
            status_code=exc.status,
        )

    @app.post("/studies")
    async def create_study(request: Request):
        spec = await request.json()
        study = store.create_study(spec)
        return versioned({"study_id": study.study_id}, status=201)

    @app.post("/studies/{study_id}/sessions")
    async def create_session(study_id: str, request: Request):
        body = await request.json()
        session = store.create_session(study_id, body.get("rater_id", ""))
        return versioned(session)

    @app.get("/sessions/{token}/next")
    async def next_item(token: str):
        return versioned(store.next_item(token))

    @app.post("/sessions/{token}/judgments")
    async def submit(token: str, request: Request):
        payload = await request.json()
        return versioned(store.submit_judgment(token, payload))

    @app.post("/studies/{study_id}/close")
    async def close_study(study_id: str):
        store.close_study(study_id)
        return versioned({"study_id": study_id, "closed": True})

    @app.get("/studies/{study_id}/report")
    async def report(study_id: str):
        return versioned(store.report(study_id))

    @app.get("/items/{item_id}/image")
    async def image(item_id: str):
        _, item = store.find_item(item_id)
        path = Path(item.image_path)
        if not path.exists():
            raise ServiceError(404, "missing_image", f"image file for {item_id!r} missing")
        return FileResponse(path)

    return app
