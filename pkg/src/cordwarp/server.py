"""HTTP service for blinded ranking collection.

Serves the rendered case panels under neutral labels, accepts full
rankings per (rater, case), and persists them durably to rankings.csv
with overwrite-on-resubmit semantics. The label-to-method map lives only
in a server-side JSON and is resolved when writing the CSV; it never
appears in any client-visible payload.
"""

from __future__ import annotations

import csv
import json
import os
import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

__all__ = ["create_app", "RankingStore"]

RANKINGS_HEADER = ["rater", "subject", "method", "rank"]


class RankingStore:
    """Durable rankings.csv keyed by (rater, subject); writes are atomic."""

    def __init__(self, path: str):
        self.path = Path(path)
        self._lock = threading.Lock()

    def load(self) -> dict[tuple[str, str], list[tuple[str, int]]]:
        out: dict[tuple[str, str], list[tuple[str, int]]] = {}
        if not self.path.is_file():
            return out
        with open(self.path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["rater"], row["subject"])
                out.setdefault(key, []).append((row["method"], int(row["rank"])))
        return out

    def upsert(self, rater: str, subject: str,
               method_ranks: list[tuple[str, int]]) -> None:
        with self._lock:
            table = self.load()
            table[(rater, subject)] = list(method_ranks)
            tmp = self.path.with_suffix(".tmp")
            with open(tmp, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(RANKINGS_HEADER)
                for (r, s), pairs in sorted(table.items()):
                    for method, rank in sorted(pairs, key=lambda p: p[1]):
                        writer.writerow([r, s, method, rank])
            os.replace(tmp, self.path)

    def completed(self, rater: str, subject: str) -> bool:
        return (rater, subject) in self.load()

    def export_text(self) -> str:
        if not self.path.is_file():
            return ",".join(RANKINGS_HEADER) + "\n"
        return self.path.read_text()


class RankingPost(BaseModel):
    rater: str
    case_id: str
    ranking: list[str]


def create_app(rating_dir: str, frontend_dir: str | None = None) -> FastAPI:
    rating = Path(rating_dir)
    session_path = rating / "session.json"
    hidden_path = rating / "hidden_map.json"
    if not session_path.is_file():
        raise FileNotFoundError(f"no session at {session_path}; render montages first")
    session = json.loads(session_path.read_text())
    hidden = json.loads(hidden_path.read_text()) if hidden_path.is_file() else {}
    store = RankingStore(str(rating / "rankings.csv"))
    app = FastAPI(title="rating service")

    def case_or_404(case_id: str) -> dict:
        case = session.get("cases", {}).get(case_id)
        if case is None:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id!r}")
        return case

    @app.get("/api/session")
    def get_session():
        cases = []
        for case_id in sorted(session.get("cases", {})):
            status = {r: store.completed(r, case_id)
                      for r in session.get("raters", [])}
            cases.append({"id": case_id, "status": status})
        return {"cases": cases, "raters": session.get("raters", [])}

    @app.get("/api/case/{case_id}")
    def get_case(case_id: str):
        case = case_or_404(case_id)
        return {
            "case_id": case_id,
            "panels": [{"label": p["label"],
                        "image_url": f"/api/image/{case_id}/{p['image']}"}
                       for p in case["panels"]],
            "reference_url": f"/api/image/{case_id}/{case['reference']}",
        }

    @app.get("/api/case/{case_id}/status")
    def get_status(case_id: str, rater: str):
        case_or_404(case_id)
        done = store.completed(rater, case_id)
        return {"case_id": case_id, "rater": rater,
                "status": "completed" if done else "pending"}

    @app.get("/api/image/{case_id}/{name}")
    def get_image(case_id: str, name: str):
        case = case_or_404(case_id)
        allowed = {p["image"] for p in case["panels"]}
        allowed.add(case["reference"])
        allowed.add("montage.png")
        if name not in allowed:
            raise HTTPException(status_code=404, detail="unknown image")
        return FileResponse(rating / "cases" / case_id / name,
                            media_type="image/png")

    @app.post("/api/ranking")
    def post_ranking(body: RankingPost):
        if not body.rater.strip():
            return JSONResponse(status_code=400,
                                content={"error": "rater name required"})
        case = session.get("cases", {}).get(body.case_id)
        if case is None:
            return JSONResponse(status_code=400,
                                content={"error": f"unknown case {body.case_id!r}"})
        labels = [p["label"] for p in case["panels"]]
        if sorted(body.ranking) != sorted(labels):
            return JSONResponse(status_code=400,
                                content={"error": "not a permutation"})
        label_to_method = hidden.get(body.case_id, {})
        method_ranks = [(label_to_method.get(label, label), rank)
                        for rank, label in enumerate(body.ranking, start=1)]
        store.upsert(body.rater, body.case_id, method_ranks)
        return {"accepted": True}

    @app.get("/api/export.csv")
    def export():
        return PlainTextResponse(store.export_text(), media_type="text/csv")

    if frontend_dir and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True),
                  name="frontend")
    return app
