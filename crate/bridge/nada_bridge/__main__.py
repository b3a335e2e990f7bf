"""Batch entry point: `python -m nada_bridge <command> --backend module:factory ...`.

The factory is called with no arguments and must return an object that
implements the protocols needed by the command (see `export.py`).
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import sys
from pathlib import Path

from .export import (
    InversionJob,
    Query,
    caption_images,
    export_attention_stack,
    export_image_embeddings,
    export_text_embeddings,
    run_vlm,
)
from .formats import write_bytes, write_jsonl

log = logging.getLogger("nada_bridge")


def load_backend(spec: str):
    module, _, name = spec.partition(":")
    if not name:
        raise SystemExit(f"--backend must look like module:factory, got {spec!r}")
    return getattr(importlib.import_module(module), name)()


def manifest_images(path: Path, image_root: Path) -> tuple[dict, list[tuple[str, str]]]:
    manifest = json.loads(path.read_text())
    return manifest, [(img["id"], str(image_root / img.get("file", img["id"] + ".jpg"))) for img in manifest["images"]]


def read_queries(path: Path) -> list[Query]:
    return [Query.from_record(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="nada_bridge")
    p.add_argument("--backend", required=True)
    p.add_argument("--manifest", "-m", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True, help="directory holding the image files")
    sub = p.add_subparsers(dest="command", required=True)

    st = sub.add_parser("stacks", help="export cross-attention stacks")
    st.add_argument("--prompts", type=Path, required=True, help="`nada prompts` output")
    st.add_argument("--out", type=Path, required=True)
    st.add_argument("--inversion-steps", type=int, default=500)
    st.add_argument("--reconstruction-steps", type=int, default=50)
    st.add_argument("--guidance-scale", type=float, default=7.5)
    st.add_argument("--null-text-iterations", type=int, default=10)
    st.add_argument("--seed", type=int, default=0)

    em = sub.add_parser("embeddings", help="export image and class text embeddings")
    em.add_argument("--out", type=Path, required=True)
    em.add_argument("--text-out", type=Path)

    vl = sub.add_parser("transcripts", help="ask `nada queries` output about every image")
    vl.add_argument("--queries", type=Path, required=True)
    vl.add_argument("--out", type=Path, required=True)

    cp = sub.add_parser("captions", help="caption every image once per class")
    cp.add_argument("--queries", type=Path, required=True)
    cp.add_argument("--out", type=Path, required=True)

    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    backend = load_backend(a.backend)
    manifest, images = manifest_images(a.manifest, a.images)
    paths = dict(images)

    if a.command == "stacks":
        prompts: dict[str, tuple[str, list[str]]] = {}
        for line in a.prompts.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            text, labels = prompts.setdefault(rec["image_id"], (rec["prompt"]["text"], []))
            if rec["prompt"]["text"] != text:
                raise SystemExit(f"image {rec['image_id']} has several prompts; export one stack per prompt")
            labels.append(rec["prompt"]["rendered_label"])
        for image_id, (text, labels) in prompts.items():
            job = InversionJob(
                image_path=paths[image_id],
                prompt=text,
                inversion_steps=a.inversion_steps,
                reconstruction_steps=a.reconstruction_steps,
                guidance_scale=a.guidance_scale,
                null_text_iterations=a.null_text_iterations,
                seed=a.seed,
            )
            data = export_attention_stack(image_id, job, labels, backend, backend.tokenizer)
            write_bytes(a.out / f"{image_id}.nada", data)
            (a.out / f"{image_id}.json").write_text(json.dumps(job.sidecar(), indent=2))
            log.info("wrote stack for %s", image_id)
    elif a.command == "embeddings":
        ids = [i for i, _ in images]
        write_bytes(a.out, export_image_embeddings(ids, [paths[i] for i in ids], backend))
        if a.text_out:
            write_bytes(a.text_out, export_text_embeddings(manifest["classes"], backend))
    else:
        queries = read_queries(a.queries)
        failures: list[dict] = []
        a.out.parent.mkdir(parents=True, exist_ok=True)
        with a.out.open("w", encoding="utf-8") as f:
            if a.command == "transcripts":
                n = write_jsonl(f, run_vlm(queries, images, backend, failures))
            else:
                n = write_jsonl(f, caption_images(queries, images, backend, backend.tokenizer, failures))
        log.info("wrote %d records, %d failures", n, len(failures))
        if failures:
            a.out.with_suffix(".failures.jsonl").write_text("".join(json.dumps(x) + "\n" for x in failures))
    return 0


if __name__ == "__main__":
    sys.exit(main())
