"""Dataset construction pipeline: pair enumeration, oracle filtering,
annotation with inversion-based validation, collection-level splitting,
and manifest persistence.

Oracles are pluggable. The mocks here run on ground-truth scene specs and
are deterministic functions of their inputs plus a seed, so every
pipeline run (including under the thread pool) is byte-reproducible.
HTTP-backed oracles for real model endpoints live in `oracles_http`.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import make_rng
from .synthdata import (Collection, InstructionParseError, SceneSpec,
                        describe_delta, parse_instruction, parse_scene_caption,
                        render, scene_caption, GRID, ROTS, SCALES)

log = logging.getLogger(__name__)

AXIS_CHOICES = {"pos": GRID * GRID, "scale": len(SCALES),
                "rot": len(ROTS), "flip": 2}


class OracleError(RuntimeError):
    """An oracle failed to produce a usable answer."""


@dataclass(frozen=True)
class ImageRef:
    """Handle to one corpus image: ids for manifests, spec for mocks,
    pixels on demand for model-backed oracles."""
    collection_id: int
    index: int
    spec: SceneSpec

    def render(self, size: tuple[int, int] = (32, 32)):
        return render(self.spec, size)


@dataclass(frozen=True)
class Pair:
    ref: ImageRef
    target: ImageRef

    @property
    def collection_id(self) -> int:
        return self.ref.collection_id


@dataclass(frozen=True)
class ValidationConfig:
    tau: float = 0.45
    max_attempts: int = 5

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class Attempt:
    attempt: int
    text: str
    score: float | None
    error: str | None = None


@dataclass
class TripletRecord:
    collection_id: int
    ref_index: int
    target_index: int
    modification_text: str
    validation: list[Attempt]
    accepted: bool
    final_score: float

    def to_dict(self) -> dict:
        return {
            "collection_id": self.collection_id,
            "ref_index": self.ref_index,
            "target_index": self.target_index,
            "modification_text": self.modification_text,
            "validation": [{"attempt": a.attempt, "text": a.text,
                            "score": a.score, "error": a.error}
                           for a in self.validation],
            "accepted": self.accepted,
            "final_score": self.final_score,
        }

    @staticmethod
    def from_dict(d: dict) -> "TripletRecord":
        return TripletRecord(
            collection_id=d["collection_id"],
            ref_index=d["ref_index"],
            target_index=d["target_index"],
            modification_text=d["modification_text"],
            validation=[Attempt(a["attempt"], a["text"], a["score"], a.get("error"))
                        for a in d["validation"]],
            accepted=d["accepted"],
            final_score=d["final_score"],
        )


@dataclass(frozen=True)
class DropEntry:
    collection_id: int
    ref_index: int
    target_index: int
    reason: str


# -- mock oracles ---------------------------------------------------------------

class GrammarFilterOracle:
    """Keep pairs with a nonempty edit delta and matching backgrounds."""

    def judge(self, pair: Pair) -> tuple[bool, str]:
        if pair.ref.spec.bg_id != pair.target.spec.bg_id:
            return False, "scene-drift"
        if pair.ref.spec == pair.target.spec:
            return False, "near-duplicate"
        return True, "ok"


class GrammarAnnotateOracle:
    """Describes the true delta; optionally corrupts axes per attempt.

    Each pose axis is independently mis-stated with probability
    corrupt_prob (a wrong-but-grammatical value, or a dropped clause when
    the wrong value coincides with the reference state). Draws are keyed
    by (seed, pair ids, attempt), so annotations are reproducible and
    independent of execution order.
    """

    def __init__(self, corrupt_prob: float = 0.0, seed: int = 0):
        self.corrupt_prob = corrupt_prob
        self.seed = seed

    def annotate(self, pair: Pair, feedback: list[Attempt]) -> str:
        tgt = pair.target.spec
        if self.corrupt_prob <= 0.0:
            return describe_delta(pair.ref.spec, tgt)
        attempt = len(feedback)
        rng = make_rng(self.seed, 0xA0, pair.collection_id,
                       pair.ref.index, pair.target.index, attempt)
        claimed = tgt
        if rng.random() < self.corrupt_prob:
            options = [s for s in SCALES if s != tgt.scale]
            claimed = replace(claimed, scale=options[int(rng.integers(len(options)))])
        if rng.random() < self.corrupt_prob:
            options = [r for r in ROTS if r != tgt.rot]
            claimed = replace(claimed, rot=options[int(rng.integers(len(options)))])
        if rng.random() < self.corrupt_prob:
            while True:
                cand = (int(rng.integers(GRID)), int(rng.integers(GRID)))
                if cand != tgt.pos:
                    break
            claimed = replace(claimed, pos=cand)
        if rng.random() < self.corrupt_prob:
            claimed = replace(claimed, flip=not tgt.flip)
        return describe_delta(pair.ref.spec, claimed)


class GrammarInvertOracle:
    """Predict the target caption by applying the parsed instruction to the
    reference's known state and re-describing the scene."""

    def invert_caption(self, ref: ImageRef, text: str) -> str:
        try:
            delta = parse_instruction(text)
        except InstructionParseError as exc:
            raise OracleError(f"instruction outside grammar: {exc}") from exc
        return scene_caption(delta.apply(ref.spec))


class AttributeBagEmbed:
    """Unit-norm bag-of-attribute vectors over the four pose axes.

    Image side reads the ground-truth spec; text side parses a scene
    caption. cos(correct caption, image) = 1.0 exactly; each wrong axis
    removes 1/4.
    """

    dim = GRID * GRID + len(SCALES) + len(ROTS) + 2

    def _bag(self, pos, scale, rot, flip) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        v[pos[1] * GRID + pos[0]] = 1.0
        off = GRID * GRID
        v[off + SCALES.index(scale)] = 1.0
        off += len(SCALES)
        v[off + ROTS.index(rot)] = 1.0
        off += len(ROTS)
        v[off + int(flip)] = 1.0
        return v / np.linalg.norm(v)

    def embed_image(self, image: ImageRef) -> np.ndarray:
        s = image.spec
        return self._bag(s.pos, s.scale, s.rot, s.flip)

    def embed_text(self, text: str) -> np.ndarray:
        if not text.strip():
            raise OracleError("empty input")
        try:
            axes = parse_scene_caption(text)
        except InstructionParseError as exc:
            raise OracleError(f"caption outside grammar: {exc}") from exc
        return self._bag(axes["pos"], axes["scale"], axes["rot"], axes["flip"])


@dataclass
class OracleSet:
    filter: object
    annotate: object
    invert: object
    embed: object


def mock_oracles(corrupt_prob: float = 0.0, seed: int = 0) -> OracleSet:
    return OracleSet(filter=GrammarFilterOracle(),
                     annotate=GrammarAnnotateOracle(corrupt_prob, seed),
                     invert=GrammarInvertOracle(),
                     embed=AttributeBagEmbed())


# -- scripted oracles (protocol tests) --------------------------------------------

class ScriptedAnnotateOracle:
    def annotate(self, pair: Pair, feedback: list[Attempt]) -> str:
        return f"attempt {len(feedback)}"


class ScriptedInvertOracle:
    def invert_caption(self, ref: ImageRef, text: str) -> str:
        return text


class ScriptedEmbed:
    """Drives validate_annotation to a scripted score sequence: the k-th
    annotation attempt scores exactly scores[k]."""

    def __init__(self, scores: list[float]):
        self.scores = list(scores)

    def embed_image(self, image) -> np.ndarray:
        return np.array([1.0, 0.0], dtype=np.float64)

    def embed_text(self, text: str) -> np.ndarray:
        k = int(text.split()[-1])
        s = self.scores[k] if k < len(self.scores) else self.scores[-1]
        return np.array([s, float(np.sqrt(max(0.0, 1.0 - s * s)))], dtype=np.float64)


def scripted_oracles(scores: list[float]) -> OracleSet:
    return OracleSet(filter=GrammarFilterOracle(),
                     annotate=ScriptedAnnotateOracle(),
                     invert=ScriptedInvertOracle(),
                     embed=ScriptedEmbed(scores))


# -- pipeline operations ------------------------------------------------------------

def enumerate_pairs(collection: Collection) -> list[Pair]:
    """All ordered pairs (i, j), i != j, in lexicographic order."""
    refs = [ImageRef(collection.collection_id, i, spec)
            for i, spec in enumerate(collection.specs)]
    return [Pair(refs[i], refs[j])
            for i in range(len(refs)) for j in range(len(refs)) if i != j]


def filter_pairs(pairs: list[Pair], oracle) -> tuple[list[Pair], list[DropEntry]]:
    kept, dropped = [], []
    for pair in pairs:
        try:
            keep, reason = oracle.judge(pair)
        except Exception as exc:  # oracle failure: exclude, log
            keep, reason = False, f"oracle_error: {exc}"
        if keep:
            kept.append(pair)
        else:
            dropped.append(DropEntry(pair.collection_id, pair.ref.index,
                                     pair.target.index, reason))
    return kept, dropped


def validate_annotation(ref: ImageRef, text: str, target: ImageRef,
                        invert, embed) -> float:
    """Score one candidate text: predict the target caption from
    (reference, text), then cosine against the target's embedding."""
    caption = invert.invert_caption(ref, text)
    a = np.asarray(embed.embed_image(target), dtype=np.float64)
    b = np.asarray(embed.embed_text(caption), dtype=np.float64)
    return float(np.dot(a, b))


def annotate_with_validation(pair: Pair, config: ValidationConfig,
                             oracles: OracleSet) -> TripletRecord:
    """Annotate-validate-retry loop: accept strictly above tau, feed failed
    (text, score) attempts back to the annotator, give up after
    max_attempts. Every attempt is recorded."""
    attempts: list[Attempt] = []
    for k in range(1, config.max_attempts + 1):
        try:
            text = oracles.annotate.annotate(pair, attempts)
        except Exception as exc:
            attempts.append(Attempt(k, "", None, f"annotate failed: {exc}"))
            continue
        try:
            score = validate_annotation(pair.ref, text, pair.target,
                                        oracles.invert, oracles.embed)
        except OracleError as exc:
            attempts.append(Attempt(k, text, None, str(exc)))
            continue
        attempts.append(Attempt(k, text, score, None))
        if score > config.tau:
            return TripletRecord(pair.collection_id, pair.ref.index,
                                 pair.target.index, text, attempts,
                                 accepted=True, final_score=score)
    last = attempts[-1]
    return TripletRecord(pair.collection_id, pair.ref.index, pair.target.index,
                         last.text, attempts, accepted=False,
                         final_score=last.score if last.score is not None else -1.0)


@dataclass
class PipelineResult:
    records: list[TripletRecord]
    drop_log: list[DropEntry]

    @property
    def accepted(self) -> list[TripletRecord]:
        return [r for r in self.records if r.accepted]

    @property
    def rejected(self) -> list[TripletRecord]:
        return [r for r in self.records if not r.accepted]


def run_pipeline(collections: list[Collection], config: ValidationConfig,
                 oracles: OracleSet, workers: int = 4) -> PipelineResult:
    """Filter and annotate every within-collection pair. Pair processing is
    concurrent under a bounded pool; records come back in deterministic
    enumeration order regardless of completion order."""
    all_pairs: list[Pair] = []
    drop_log: list[DropEntry] = []
    for col in collections:
        kept, dropped = filter_pairs(enumerate_pairs(col), oracles.filter)
        all_pairs.extend(kept)
        drop_log.extend(dropped)
    if workers <= 1:
        records = [annotate_with_validation(p, config, oracles) for p in all_pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(
                lambda p: annotate_with_validation(p, config, oracles), all_pairs))
    return PipelineResult(records=records, drop_log=drop_log)


def split_dataset(records: list[TripletRecord], seed: int,
                  train_frac: float = 0.9) -> tuple[list[TripletRecord], list[TripletRecord]]:
    """Collection-level split. Train keeps every accepted triplet of its
    collections; test keeps exactly one seeded-random accepted triplet per
    test collection (collections with none are excluded with a warning)."""
    by_col: dict[int, list[TripletRecord]] = {}
    for rec in records:
        by_col.setdefault(rec.collection_id, []).append(rec)
    col_ids = sorted(by_col)
    rng = make_rng(seed, 0x59)
    order = [col_ids[i] for i in rng.permutation(len(col_ids))]
    n_train = int(round(len(order) * train_frac))
    train_cols, test_cols = set(order[:n_train]), set(order[n_train:])

    train = [r for cid in sorted(train_cols) for r in by_col[cid] if r.accepted]
    test = []
    for cid in sorted(test_cols):
        accepted = [r for r in by_col[cid] if r.accepted]
        if not accepted:
            log.warning("test collection %d has no accepted triplets; excluded", cid)
            continue
        test.append(accepted[int(rng.integers(len(accepted)))])
    return train, test


# -- manifest persistence --------------------------------------------------------------

def write_manifest(records: list[TripletRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def read_manifest(path) -> list[TripletRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(TripletRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return records


def write_drop_log(entries: list[DropEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"collection_id": e.collection_id,
                                 "ref_index": e.ref_index,
                                 "target_index": e.target_index,
                                 "reason": e.reason}) + "\n")
