"""Readers and writers for the toolkit's on-disk formats.

* predictions / preference pairs / DPO batches / corpus reports: JSON Lines
* embeddings: ``EMB1`` binary container plus a one-id-per-line companion file
* certificates and reports: single JSON documents
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

import numpy as np

from .dpo import DpoBatchItem
from .errors import (
    BadMagic,
    DimOverflow,
    DuplicateId,
    EmbeddingFormatError,
    Malformed,
    NonFinite,
    RuleKitError,
    TruncatedFile,
)
from .preference import PredictionRecord, PreferencePair
from .retrieval import EmbeddingMatrix

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
U32_MAX = 2**32 - 1
# keep a single file addressable on 32-bit size_t platforms
MAX_ELEMENTS = (2**31 - 1) // 4


# ---------------------------------------------------------------------------
# JSON Lines


def iter_jsonl(path) -> Iterator[tuple[int, Any]]:
    """Yield ``(line_number, object)`` for every non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise Malformed(lineno, f"invalid JSON: {exc.msg}") from None


def dump_jsonl(rows: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def dump_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _require(obj: dict, key: str, kind: type, line: int, optional: bool = False):
    if key not in obj:
        if optional:
            return None
        raise Malformed(line, f"missing field {key!r}")
    value = obj[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise Malformed(line, f"{key} must be a {kind.__name__}")
    return value


def _check_keys(obj: Any, allowed: set[str], line: int) -> None:
    if not isinstance(obj, dict):
        raise Malformed(line, "each line must be a JSON object")
    extra = sorted(set(obj) - allowed)
    if extra:
        raise Malformed(line, f"unexpected field(s): {', '.join(extra)}")


def _parse_unique(path, parse_one: Callable[[dict, int], Any]) -> list:
    out, seen = [], set()
    for line, obj in iter_jsonl(path):
        item = parse_one(obj, line)
        if item.id in seen:
            raise DuplicateId(item.id, line)
        seen.add(item.id)
        out.append(item)
    return out


# ---------------------------------------------------------------------------
# predictions

_PREDICTION_KEYS = {"id", "question", "ground_truth", "base_answer", "rag_answers", "context"}


def prediction_from_obj(obj: dict, line: int = 0) -> PredictionRecord:
    _check_keys(obj, _PREDICTION_KEYS, line)
    rid = _require(obj, "id", str, line)
    question = _require(obj, "question", str, line)
    truth = _require(obj, "ground_truth", str, line)
    if truth not in ("yes", "no"):
        raise Malformed(line, "ground_truth must be yes|no")
    base = _require(obj, "base_answer", str, line)
    raw_answers = _require(obj, "rag_answers", dict, line)
    answers = {}
    for key, text in raw_answers.items():
        if not (key.isascii() and key.isdigit()) or int(key) < 1:
            raise Malformed(line, f"rag_answers key {key!r} is not a positive integer")
        if not isinstance(text, str):
            raise Malformed(line, f"rag_answers[{key}] must be a str")
        if int(key) in answers:
            raise Malformed(line, f"rag_answers key {key!r} repeats k={int(key)}")
        answers[int(key)] = text
    context = _require(obj, "context", list, line, optional=True) or []
    if not all(isinstance(c, str) for c in context):
        raise Malformed(line, "context must be a list of strings")
    return PredictionRecord(rid, question, truth, base, answers, tuple(context))


def prediction_to_obj(rec: PredictionRecord) -> dict:
    obj = {
        "id": rec.id,
        "question": rec.question,
        "ground_truth": rec.ground_truth,
        "base_answer": rec.base_answer,
        "rag_answers": {str(k): v for k, v in rec.rag_answers.items()},
    }
    if rec.context:
        obj["context"] = list(rec.context)
    return obj


def parse_predictions(path) -> list[PredictionRecord]:
    """Strictly validated prediction records; errors carry the 1-based line number."""
    return _parse_unique(path, prediction_from_obj)


def write_predictions(records: Iterable[PredictionRecord], path) -> None:
    dump_jsonl((prediction_to_obj(r) for r in records), path)


# ---------------------------------------------------------------------------
# preference pairs

_PAIR_KEYS = {"id", "question", "context", "preferred", "dispreferred"}


def _pair_from_obj(obj: dict, line: int) -> PreferencePair:
    _check_keys(obj, _PAIR_KEYS, line)
    context = _require(obj, "context", list, line)
    if not all(isinstance(c, str) for c in context):
        raise Malformed(line, "context must be a list of strings")
    return PreferencePair(
        _require(obj, "id", str, line),
        _require(obj, "question", str, line),
        tuple(context),
        _require(obj, "preferred", str, line),
        _require(obj, "dispreferred", str, line),
    )


def write_preferences(pairs: Iterable[PreferencePair], path) -> None:
    dump_jsonl((p.to_dict() for p in pairs), path)


def read_preferences(path) -> list[PreferencePair]:
    return _parse_unique(path, _pair_from_obj)


# ---------------------------------------------------------------------------
# DPO batches

_DPO_KEYS = {"id", "lp_pol_w", "lp_ref_w", "lp_pol_l", "lp_ref_l"}


def _dpo_from_obj(obj: dict, line: int) -> DpoBatchItem:
    _check_keys(obj, _DPO_KEYS, line)
    rid = _require(obj, "id", str, line)
    values = [float(_require(obj, k, float, line)) for k in ("lp_pol_w", "lp_ref_w", "lp_pol_l", "lp_ref_l")]
    try:
        return DpoBatchItem(*values, id=rid)
    except NonFinite as exc:
        raise Malformed(line, str(exc)) from None


def read_dpo_batch(path) -> list[DpoBatchItem]:
    return _parse_unique(path, _dpo_from_obj)


def dpo_item_to_obj(item: DpoBatchItem) -> dict:
    return {
        "id": item.id,
        "lp_pol_w": item.logp_policy_preferred,
        "lp_ref_w": item.logp_ref_preferred,
        "lp_pol_l": item.logp_policy_dispreferred,
        "lp_ref_l": item.logp_ref_dispreferred,
    }


# ---------------------------------------------------------------------------
# corpus reports


def read_corpus(path) -> dict[str, str]:
    """``id -> report`` from a ``{"id", "report"}`` JSON Lines file, in file order."""
    reports: dict[str, str] = {}
    for line, obj in iter_jsonl(path):
        _check_keys(obj, {"id", "report"}, line)
        rid = _require(obj, "id", str, line)
        if rid in reports:
            raise DuplicateId(rid, line)
        reports[rid] = _require(obj, "report", str, line)
    return reports


# ---------------------------------------------------------------------------
# EMB1 embeddings


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    """Write little-endian float32 rows behind an ``EMB1`` header.

    Values are stored as float32; float32 input round-trips bit-exactly.
    """
    data = np.asarray(matrix.data if isinstance(matrix, EmbeddingMatrix) else matrix)
    n, p = data.shape
    if n > U32_MAX or p > U32_MAX or n * p > MAX_ELEMENTS:
        raise DimOverflow(f"{n}x{p} does not fit an EMB1 file")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, p))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_embeddings(path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: header is {len(raw)} bytes, need {_HEADER.size}")
    _, n, p = _HEADER.unpack_from(raw)
    if n == 0 or p == 0:
        raise EmbeddingFormatError(f"{path}: empty matrix {n}x{p}")
    if n * p > MAX_ELEMENTS:
        raise DimOverflow(f"{path}: header claims {n}x{p} values")
    expected = _HEADER.size + 4 * n * p
    if len(raw) < expected:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, header implies {expected}")
    if len(raw) > expected:
        raise EmbeddingFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=n * p, offset=_HEADER.size).reshape(n, p)
    return EmbeddingMatrix(data.astype(np.float32))


def ids_path_for(emb_path) -> Path:
    return Path(os.fspath(emb_path) + ".ids")


def write_ids(ids: Iterable[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in ids:
            if "\n" in i or "\r" in i:
                raise RuleKitError(f"id {i!r} contains a line break")
            fh.write(f"{i}\n")


def read_ids(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        ids = [line.rstrip("\r\n") for line in fh]
    seen = set()
    for lineno, i in enumerate(ids, start=1):
        if not i:
            raise Malformed(lineno, "empty id")
        if i in seen:
            raise DuplicateId(i, lineno)
        seen.add(i)
    return ids
