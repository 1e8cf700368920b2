"""Blinded reader study: item corpus, HTTP API, agreement statistics.

Raters see one patch at a time and answer two questions (rim / non-rim,
real / synthetic). The server never exposes the hidden source field; the
mapping lives in a server-side file and responses append to a JSONL log
so report generation can never mutate history.
"""

from __future__ import annotations

import json
import secrets
import time
import zlib
from dataclasses import dataclass, asdict
from io import BytesIO
from pathlib import Path

import numpy as np
import pydantic
from PIL import Image

from . import gan as gan_mod
from .corpus import Manifest, load_patches, read_patch, write_patch

WINDOW = (-1.0, 1.0)  # fixed display window over susceptibility units


def cohens_kappa(ratings_a: list[bool] | np.ndarray,
                 ratings_b: list[bool] | np.ndarray) -> float | None:
    """Chance-corrected agreement; None when chance agreement is total."""
    a = np.asarray(ratings_a, dtype=bool)
    b = np.asarray(ratings_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"rating lengths differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("ratings must be non-empty")
    p_o = float(np.mean(a == b))
    p_yes_a, p_yes_b = float(np.mean(a)), float(np.mean(b))
    p_e = p_yes_a * p_yes_b + (1 - p_yes_a) * (1 - p_yes_b)
    if p_e == 1.0:
        return None
    return (p_o - p_e) / (1 - p_e)


@dataclass
class ReaderResponse:
    session_id: str
    item_id: str
    rim_judgment: bool
    real_judgment: bool
    rater_id: str
    timestamp: float


def build_study(manifest: Manifest, corpus_root: str | Path,
                checkpoint: gan_mod.Checkpoint, out_dir: str | Path,
                n_real: int = 55, n_synthetic: int = 55,
                seed: int = 0) -> Path:
    """Assemble a balanced blinded item set: real rim patches from the
    corpus and fresh synthetic rims from the checkpoint, under opaque
    shuffled ids. Writes items.json (server-side, holds the hidden
    source) and the patch files."""
    out_dir = Path(out_dir)
    (out_dir / "items").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    real_recs = manifest.select(label="rim")
    if len(real_recs) < n_real:
        raise ValueError(f"corpus has {len(real_recs)} rims, need {n_real}")
    chosen = [real_recs[i]
              for i in rng.choice(len(real_recs), n_real, replace=False)]
    real_patches = load_patches(manifest, corpus_root, chosen)

    label = "rim" if checkpoint.config.conditional else None
    synth = gan_mod.sample(checkpoint, n_synthetic, seed=seed, label=label)

    entries = ([(p, "real") for p in real_patches]
               + [(p, "synthetic") for p in synth.patches])
    order = rng.permutation(len(entries))
    items = {}
    for slot, idx in enumerate(order):
        patch, source = entries[idx]
        item_id = f"item-{slot:04d}"
        rel = f"items/{item_id}.qpat"
        write_patch(patch.astype(np.float32), out_dir / rel)
        items[item_id] = {"file": rel, "source": source}
    (out_dir / "items.json").write_text(json.dumps(items, indent=1,
                                                   sort_keys=True) + "\n")
    return out_dir


def render_item_png(patch: np.ndarray) -> bytes:
    """8-bit grayscale render of channel 0 at the fixed window."""
    img = np.asarray(patch, np.float32)
    if img.ndim == 3:
        img = img[0]
    lo, hi = WINDOW
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    buf = BytesIO()
    Image.fromarray((scaled * 255).astype(np.uint8), mode="L").save(buf, "PNG")
    return buf.getvalue()


class StudyStore:
    """File-backed study state: static items plus an append-only log."""

    def __init__(self, study_dir: str | Path):
        self.study_dir = Path(study_dir)
        self.items: dict[str, dict] = json.loads(
            (self.study_dir / "items.json").read_text())
        self.log_path = self.study_dir / "responses.jsonl"

    def item_ids(self) -> list[str]:
        return sorted(self.items)

    def session_order(self, session_id: str) -> list[str]:
        ids = self.item_ids()
        rng = np.random.default_rng(zlib.crc32(session_id.encode()))
        return [ids[i] for i in rng.permutation(len(ids))]

    def load_patch(self, item_id: str) -> np.ndarray:
        return read_patch(self.study_dir / self.items[item_id]["file"])

    def responses(self) -> list[ReaderResponse]:
        if not self.log_path.exists():
            return []
        out = []
        for line in self.log_path.read_text().splitlines():
            if line.strip():
                out.append(ReaderResponse(**json.loads(line)))
        return out

    def append_response(self, response: ReaderResponse) -> None:
        with self.log_path.open("a") as fh:
            fh.write(json.dumps(asdict(response), sort_keys=True) + "\n")


def study_report(store: StudyStore) -> dict:
    """Table-1-style fractions per hidden source plus pairwise kappas."""
    responses = store.responses()
    by_source: dict[str, list[ReaderResponse]] = {"real": [], "synthetic": []}
    for resp in responses:
        source = store.items[resp.item_id]["source"]
        by_source[source].append(resp)

    rows = {}
    for source, name in (("real", "real_rims"), ("synthetic", "synthetic_rims")):
        group = by_source[source]
        rows[name] = {
            "n_responses": len(group),
            "rim_lesion_fraction": (
                float(np.mean([r.rim_judgment for r in group]))
                if group else None),
            "real_image_fraction": (
                float(np.mean([r.real_judgment for r in group]))
                if group else None),
        }

    by_rater: dict[str, dict[str, ReaderResponse]] = {}
    for resp in responses:
        by_rater.setdefault(resp.rater_id, {})[resp.item_id] = resp
    kappas = {}
    raters = sorted(by_rater)
    for i, ra in enumerate(raters):
        for rb in raters[i + 1:]:
            common = sorted(set(by_rater[ra]) & set(by_rater[rb]))
            if not common:
                continue
            kappas[f"{ra}|{rb}"] = {
                "n_items": len(common),
                "rim_kappa": cohens_kappa(
                    [by_rater[ra][i].rim_judgment for i in common],
                    [by_rater[rb][i].rim_judgment for i in common]),
                "real_kappa": cohens_kappa(
                    [by_rater[ra][i].real_judgment for i in common],
                    [by_rater[rb][i].real_judgment for i in common]),
            }
    return {
        "rows": rows,
        "kappa": kappas,
        "published_reference": {
            "note": ("published expert grading, shown for layout context "
                     "only (table layout; the source text swaps 0.29/0.31 "
                     "between the two experiments)"),
            "real_rims": {"rim_lesion_fraction": 0.31,
                          "real_image_fraction": 0.55},
            "synthetic_rims": {"rim_lesion_fraction": 0.4,
                               "real_image_fraction": 0.29},
            "reader_kappa": 0.73,
        },
    }


class ResponseBody(pydantic.BaseModel):
    """POST /api/response payload. Defined at module scope so FastAPI can
    resolve the (stringified, via future annotations) type hint."""

    session_id: str
    item_id: str
    rim_judgment: bool
    real_judgment: bool
    rater_id: str


def create_app(study_dir: str | Path):
    """FastAPI app serving the blinded study endpoints."""
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import Response

    store = StudyStore(study_dir)
    app = FastAPI(title="blinded reader study")
    app.state.store = store

    @app.get("/api/session")
    def new_session():
        session_id = secrets.token_hex(8)
        return {"session_id": session_id,
                "items": store.session_order(session_id)}

    @app.get("/api/session/{session_id}")
    def resume_session(session_id: str):
        answered = sorted(r.item_id for r in store.responses()
                          if r.session_id == session_id)
        return {"session_id": session_id,
                "items": store.session_order(session_id),
                "answered": answered}

    @app.get("/api/item/{item_id}/image")
    def item_image(item_id: str):
        if item_id not in store.items:
            raise HTTPException(status_code=404,
                                detail=f"unknown item {item_id}")
        png = render_item_png(store.load_patch(item_id))
        return Response(content=png, media_type="image/png")

    @app.post("/api/response", status_code=201)
    def post_response(body: ResponseBody):
        if body.item_id not in store.items:
            raise HTTPException(status_code=404,
                                detail=f"unknown item {body.item_id}")
        for prior in store.responses():
            if (prior.session_id == body.session_id
                    and prior.item_id == body.item_id):
                raise HTTPException(
                    status_code=409,
                    detail=f"duplicate response for {body.item_id}")
        store.append_response(ReaderResponse(
            session_id=body.session_id, item_id=body.item_id,
            rim_judgment=body.rim_judgment, real_judgment=body.real_judgment,
            rater_id=body.rater_id, timestamp=time.time()))
        return {"status": "recorded"}

    @app.get("/api/report")
    def report():
        return study_report(store)

    return app
