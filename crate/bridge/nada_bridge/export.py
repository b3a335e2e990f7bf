"""Model-facing export routines.

Models are reached through small protocols so that any diffusion pipeline,
image encoder or vision-language model can be plugged in. Nothing here parses
model answers; transcripts are stored verbatim.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np

from .formats import (
    LabelSpan,
    StackRecord,
    caption_record,
    encode_embeddings,
    encode_stack,
    transcript_record,
)

log = logging.getLogger(__name__)

DEFAULT_MODEL = "stabilityai/stable-diffusion-2-base"


class SpanError(ValueError):
    """A label does not occur in the tokenized prompt."""


@dataclass
class InversionJob:
    image_path: str
    prompt: str
    inversion_steps: int = 500
    reconstruction_steps: int = 50
    model: str = DEFAULT_MODEL
    guidance_scale: float = 7.5
    null_text_iterations: int = 10
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.inversion_steps <= 0 or self.reconstruction_steps <= 0:
            raise ValueError("step counts must be positive")
        if self.null_text_iterations <= 0:
            raise ValueError("null-text iterations must be positive")

    def sidecar(self) -> dict:
        """Settings to store next to the exported stack."""
        return asdict(self)


class Tokenizer(Protocol):
    def encode(self, text: str) -> list[int]:
        """Token ids of `text` as fed to the text encoder, including special tokens."""

    def encode_words(self, text: str) -> list[int]:
        """Token ids of `text` without special tokens."""


class DiffusionBackend(Protocol):
    def reconstruct_attention(self, job: InversionJob) -> list[list[np.ndarray]]:
        """Invert the image, reconstruct it, and return per-timestep, per-block
        cross-attention with shape `(heads, T, H, W)` each."""


class Encoder(Protocol):
    def embed_images(self, paths: Sequence[str]) -> np.ndarray: ...

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...


class VisionLanguageModel(Protocol):
    def answer(self, image_path: str, question: str) -> str: ...


def find_span(tokenizer: Tokenizer, prompt: str, label: str) -> tuple[int, ...]:
    """Positions of the label's tokens in the encoded prompt (first occurrence)."""
    ids = tokenizer.encode(prompt)
    needle = tokenizer.encode_words(label)
    if not needle:
        raise SpanError(f"label {label!r} tokenizes to nothing")
    for start in range(len(ids) - len(needle) + 1):
        if ids[start : start + len(needle)] == needle:
            return tuple(range(start, start + len(needle)))
    raise SpanError(f"label {label!r} not found in prompt {prompt!r}")


def average_heads(maps: list[list[np.ndarray]]) -> list[list[np.ndarray]]:
    out = []
    for row in maps:
        out.append([np.asarray(m, dtype=np.float64).mean(axis=0).astype(np.float32) for m in row])
    return out


def export_attention_stack(
    image_id: str,
    job: InversionJob,
    labels: Sequence[str],
    backend: DiffusionBackend,
    tokenizer: Tokenizer,
) -> bytes:
    job.validate()
    # spans are resolved first so a bad prompt never costs a model run
    spans = [LabelSpan(label, find_span(tokenizer, job.prompt, label)) for label in labels]
    maps = backend.reconstruct_attention(job)
    if len(maps) != job.reconstruction_steps:
        raise RuntimeError(f"backend returned {len(maps)} timesteps, expected {job.reconstruction_steps}")
    stack = StackRecord(image_id, average_heads(maps), spans)
    return encode_stack(stack)


def unit_rows(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero embedding")
    return (matrix / norms).astype(np.float32)


def export_image_embeddings(ids: Sequence[str], paths: Sequence[str], encoder: Encoder) -> bytes:
    return encode_embeddings(list(ids), unit_rows(encoder.embed_images(paths)))


def export_text_embeddings(labels: Sequence[str], encoder: Encoder, template: str = "A painting of {}") -> bytes:
    return encode_embeddings(list(labels), unit_rows(encoder.embed_texts([template.format(l) for l in labels])))


@dataclass
class Query:
    """One query as emitted by `nada queries`."""

    kind: str
    text: str
    label: str | None = None

    @property
    def transcript_kind(self) -> str:
        if self.kind.startswith("choice"):
            return "choice"
        if self.kind in ("yesno", "yes-no"):
            return "yesno"
        if self.kind == "score":
            return "score"
        raise ValueError(f"query kind {self.kind!r} has no transcript form")

    @classmethod
    def from_record(cls, rec: dict) -> "Query":
        return cls(kind=rec["kind"], text=rec["text"], label=rec.get("label"))


def run_vlm(
    queries: Sequence[Query],
    images: Iterable[tuple[str, str]],
    model: VisionLanguageModel,
    failures: list[dict] | None = None,
) -> Iterator[dict]:
    """Ask every query about every `(image_id, path)`. Failures are logged,
    collected into `failures` and skipped."""
    for image_id, path in images:
        for q in queries:
            try:
                response = model.answer(path, q.text)
            except Exception as e:  # noqa: BLE001 - any model failure is per-image
                log.warning("model failed on %s: %s", image_id, e)
                if failures is not None:
                    failures.append({"image_id": image_id, "label": q.label, "error": str(e)})
                continue
            yield transcript_record(image_id, q.transcript_kind, response, q.label)


def caption_images(
    queries: Sequence[Query],
    images: Iterable[tuple[str, str]],
    model: VisionLanguageModel,
    tokenizer: Tokenizer,
    failures: list[dict] | None = None,
) -> Iterator[dict]:
    """Captions with the label's first token index in the caption, if present."""
    for image_id, path in images:
        for q in queries:
            if q.label is None:
                raise ValueError("caption queries must be per class")
            try:
                caption = model.answer(path, q.text)
            except Exception as e:  # noqa: BLE001
                log.warning("model failed on %s: %s", image_id, e)
                if failures is not None:
                    failures.append({"image_id": image_id, "label": q.label, "error": str(e)})
                continue
            try:
                start = find_span(tokenizer, caption, q.label)[0]
            except SpanError:
                start = None
            yield caption_record(image_id, q.label, caption, start)
