from .export import (
    InversionJob,
    Query,
    SpanError,
    average_heads,
    caption_images,
    export_attention_stack,
    export_image_embeddings,
    export_text_embeddings,
    find_span,
    run_vlm,
    unit_rows,
)
from .formats import (
    FormatError,
    LabelSpan,
    StackRecord,
    decode_embeddings,
    decode_stack,
    encode_embeddings,
    encode_stack,
)

__all__ = [
    "FormatError",
    "InversionJob",
    "LabelSpan",
    "Query",
    "SpanError",
    "StackRecord",
    "average_heads",
    "caption_images",
    "decode_embeddings",
    "decode_stack",
    "encode_embeddings",
    "encode_stack",
    "export_attention_stack",
    "export_image_embeddings",
    "export_text_embeddings",
    "find_span",
    "run_vlm",
    "unit_rows",
]
