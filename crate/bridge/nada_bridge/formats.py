"""NADA1 binary records and the JSON-lines streams consumed by the `nada` CLI."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

MAGIC = b"NADA"
VERSION = 1
KIND_STACK = 1
KIND_EMBEDDINGS = 2

QUERY_KINDS = ("choice", "score", "yesno")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpan:
    label: str
    tokens: tuple[int, ...]


@dataclass
class StackRecord:
    """Cross-attention maps of one image.

    `blocks[j][k]` holds the head-averaged maps of timestep j, block k with
    shape `(T, H_k, W_k)`.
    """

    image_id: str
    blocks: list[list[np.ndarray]]
    spans: list[LabelSpan] = field(default_factory=list)

    @property
    def timesteps(self) -> int:
        return len(self.blocks)

    @property
    def grid_dims(self) -> list[tuple[int, int]]:
        return [tuple(int(d) for d in m.shape[1:]) for m in self.blocks[0]]

    @property
    def tokens(self) -> int:
        return int(self.blocks[0][0].shape[0])

    def validate(self) -> None:
        if not self.blocks or not self.blocks[0]:
            raise FormatError("a stack needs at least one timestep and one block")
        dims = self.grid_dims
        for j, row in enumerate(self.blocks):
            if len(row) != len(dims):
                raise FormatError(f"timestep {j} has {len(row)} blocks, expected {len(dims)}")
            for k, m in enumerate(row):
                if m.ndim != 3 or m.shape[0] != self.tokens or tuple(m.shape[1:]) != dims[k]:
                    raise FormatError(f"map ({j}, {k}) has shape {m.shape}")
                if not np.all(np.isfinite(m)) or np.any(m < 0):
                    raise FormatError(f"map ({j}, {k}) has negative or non-finite values")
        seen = set()
        for span in self.spans:
            if not span.tokens:
                raise FormatError(f"span for {span.label!r} is empty")
            if max(span.tokens) >= self.tokens or min(span.tokens) < 0:
                raise FormatError(f"span for {span.label!r} leaves the prompt")
            if span.label in seen:
                raise FormatError(f"duplicate span label {span.label!r}")
            seen.add(span.label)


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError("string longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def _preamble(kind: int) -> bytes:
    return MAGIC + struct.pack("<HH", VERSION, kind)


def encode_stack(stack: StackRecord) -> bytes:
    stack.validate()
    out = io.BytesIO()
    out.write(_preamble(KIND_STACK))
    out.write(_string(stack.image_id))
    out.write(struct.pack("<III", stack.timesteps, len(stack.grid_dims), stack.tokens))
    for h, w in stack.grid_dims:
        out.write(struct.pack("<II", h, w))
    out.write(struct.pack("<I", len(stack.spans)))
    for span in stack.spans:
        out.write(_string(span.label))
        out.write(struct.pack(f"<I{len(span.tokens)}I", len(span.tokens), *span.tokens))
    for row in stack.blocks:
        for m in row:
            out.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
    return out.getvalue()


def encode_embeddings(ids: Sequence[str], matrix: np.ndarray) -> bytes:
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids) or not ids or matrix.shape[1] == 0:
        raise FormatError(f"matrix of shape {matrix.shape} does not match {len(ids)} ids")
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate ids")
    if not np.all(np.isfinite(matrix)):
        raise FormatError("non-finite embedding value")
    head = _preamble(KIND_EMBEDDINGS) + struct.pack("<II", *matrix.shape)
    return head + b"".join(_string(i) for i in ids) + np.ascontiguousarray(matrix).tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("record is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def preamble(self, kind: int) -> None:
        if self.take(4) != MAGIC:
            raise FormatError("bad magic")
        version, found = struct.unpack("<HH", self.take(4))
        if version != VERSION or found != kind:
            raise FormatError(f"expected version {VERSION} kind {kind}, got {version} {found}")


def decode_stack(data: bytes) -> StackRecord:
    r = _Reader(data)
    r.preamble(KIND_STACK)
    image_id = r.string()
    j_count, k_count, tokens = r.u32(), r.u32(), r.u32()
    dims = [(r.u32(), r.u32()) for _ in range(k_count)]
    spans = []
    for _ in range(r.u32()):
        label = r.string()
        spans.append(LabelSpan(label, tuple(r.u32() for _ in range(r.u32()))))
    blocks = [[r.f32(tokens * h * w).reshape(tokens, h, w) for h, w in dims] for _ in range(j_count)]
    stack = StackRecord(image_id, blocks, spans)
    stack.validate()
    return stack


def decode_embeddings(data: bytes) -> tuple[list[str], np.ndarray]:
    r = _Reader(data)
    r.preamble(KIND_EMBEDDINGS)
    n, dim = r.u32(), r.u32()
    ids = [r.string() for _ in range(n)]
    return ids, r.f32(n * dim).reshape(n, dim)


def write_bytes(path: Path | str, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def write_jsonl(sink: BinaryIO | io.TextIOBase, records: Iterable[dict]) -> int:
    count = 0
    for rec in records:
        line = json.dumps(rec, ensure_ascii=False) + "\n"
        sink.write(line.encode("utf-8") if isinstance(sink, (io.BufferedIOBase, io.RawIOBase)) else line)
        count += 1
    return count


def transcript_record(image_id: str, kind: str, response: str, label: str | None = None) -> dict:
    if kind not in QUERY_KINDS:
        raise FormatError(f"unknown transcript kind {kind!r}")
    rec = {"image_id": image_id, "kind": kind, "response": response}
    if label is not None:
        rec["label"] = label
    return rec


def caption_record(image_id: str, label: str, caption: str, token_start: int | None) -> dict:
    rec = {"image_id": image_id, "label": label, "caption": caption}
    if token_start is not None:
        rec["token_start"] = token_start
    return rec
