"""Document chunking, embedding, cosine retrieval, and grounded QA prompts.

Long documents are split into fixed-stride character windows, embedded into
unit vectors, and retrieved by exact cosine scan.  Retrieved chunks are
assembled into an engineered prompt (persona, context, task, output
constraints, question) before querying the model, so every answer carries the
source spans it was grounded on.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import IntegrityError, InvalidInput, MigrationRequired
from .gateway import ChatMessage, ChatProvider, ChatRequest

DEFAULT_CHUNK_SIZE = 1000
DEFAULT_OVERLAP = 200
DEFAULT_DIM = 512
DEFAULT_NGRAM = 3

INDEX_FORMAT = "gridllm-doc-index"
INDEX_VERSION = 1

GENERAL_QUESTIONS = (
    "Please summarize this file.",
    "What is the structure of this file?",
    "Please give me several key words strongly related to the content in this file.",
)

TECHNICAL_QUESTIONS = (
    "What is the Synchronization in this file?",
    "What is the phase-lock loop Synchronization in this file?",
    "Please summarize the main content of Synchronization part in this file.",
    "Please give an example in real-world application of the synchronization"
    " mentioned in this file.",
    "Please tell me, in Reliability Standards in this file, which standard is"
    " the most useful one?",
)


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Chunk:
    text: str
    start: int  # character offset in the source document
    end: int


def chunk(text: str, size: int = DEFAULT_CHUNK_SIZE,
          overlap: int = DEFAULT_OVERLAP) -> list[Chunk]:
    """Fixed-stride windows of `size` chars overlapping by `overlap` chars."""
    if size <= 0:
        raise InvalidInput(f"chunk size must be positive, got {size}")
    if not 0 <= overlap < size:
        raise InvalidInput(f"need 0 <= overlap < size, got overlap {overlap}")
    stride = size - overlap
    chunks = []
    for start in range(0, len(text), stride):
        end = min(start + size, len(text))
        chunks.append(Chunk(text=text[start:end], start=start, end=end))
    return chunks


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

class HashingEmbedder:
    """Deterministic offline embedder: signed feature hashing of char n-grams."""

    def __init__(self, dim: int = DEFAULT_DIM, ngram: int = DEFAULT_NGRAM,
                 seed: int = 0):
        if dim < 1 or ngram < 1:
            raise InvalidInput("dim and ngram must be positive")
        self.dim = dim
        self.ngram = ngram
        self.seed = seed
        self._key = f"gridllm-embed-{seed}".encode("utf-8")

    @property
    def embedder_id(self) -> str:
        return f"hash-{self.ngram}gram-{self.dim}d-seed{self.seed}"

    @classmethod
    def from_id(cls, embedder_id: str) -> "HashingEmbedder":
        match = re.fullmatch(r"hash-(\d+)gram-(\d+)d-seed(\d+)", embedder_id)
        if match is None:
            raise InvalidInput(f"not an offline embedder id: {embedder_id!r}")
        return cls(dim=int(match.group(2)), ngram=int(match.group(1)),
                   seed=int(match.group(3)))

    def _grams(self, text: str) -> list[str]:
        n = self.ngram
        if len(text) < n:
            return [text] if text else []
        return [text[i:i + n] for i in range(len(text) - n + 1)]

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """One unit vector per text (the all-empty text embeds to zeros)."""
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            vec = out[row]
            for gram in self._grams(text):
                h = hashlib.blake2b(gram.encode("utf-8"), key=self._key,
                                    digest_size=8).digest()
                value = int.from_bytes(h, "big")
                sign = 1.0 if value & 1 else -1.0
                vec[(value >> 1) % self.dim] += sign
            norm = np.linalg.norm(vec)
            if norm > 0:
                vec /= norm
        return out


# ---------------------------------------------------------------------------
# Index
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DocumentIndex:
    doc_id: str
    chunks: tuple[Chunk, ...]
    vectors: np.ndarray          # (n_chunks, dim), rows L2-normalized
    embedder_id: str
    dim: int
    embedder: Optional[HashingEmbedder] = None

    @property
    def n_chunks(self) -> int:
        return len(self.chunks)


def build_index(doc_id: str, text: str,
                embedder: Optional[HashingEmbedder] = None,
                size: int = DEFAULT_CHUNK_SIZE,
                overlap: int = DEFAULT_OVERLAP) -> DocumentIndex:
    embedder = embedder or HashingEmbedder()
    chunks = tuple(chunk(text, size, overlap))
    vectors = embedder.embed([c.text for c in chunks])
    vectors.flags.writeable = False
    return DocumentIndex(
        doc_id=doc_id, chunks=chunks, vectors=vectors,
        embedder_id=embedder.embedder_id, dim=embedder.dim, embedder=embedder,
    )


def save_index(index: DocumentIndex, path: Union[str, Path]) -> None:
    """Self-describing JSON container; vectors stored bit-exactly (base64 f64)."""
    payload = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "doc_id": index.doc_id,
        "embedder_id": index.embedder_id,
        "dim": index.dim,
        "chunk_count": index.n_chunks,
        "chunks": [{"text": c.text, "start": c.start, "end": c.end}
                   for c in index.chunks],
        "vectors": base64.b64encode(
            np.ascontiguousarray(index.vectors, dtype="<f8").tobytes()
        ).decode("ascii"),
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_index(path: Union[str, Path]) -> DocumentIndex:
    raw = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"corrupt index file {path}: {exc}",
                             offset=exc.pos) from exc
    if payload.get("format") != INDEX_FORMAT:
        raise IntegrityError(f"{path} is not a document index", offset=0)
    if payload.get("version") != INDEX_VERSION:
        raise MigrationRequired(
            f"index version {payload.get('version')} unsupported",
            found=payload.get("version"), expected=INDEX_VERSION,
        )
    chunks = tuple(Chunk(text=c["text"], start=c["start"], end=c["end"])
                   for c in payload["chunks"])
    data = base64.b64decode(payload["vectors"])
    expected = payload["chunk_count"] * payload["dim"] * 8
    if len(data) != expected:
        raise IntegrityError(
            f"vector payload has {len(data)} bytes, expected {expected}",
            offset=len(data),
        )
    vectors = np.frombuffer(data, dtype="<f8").reshape(
        payload["chunk_count"], payload["dim"]).copy()
    vectors.flags.writeable = False
    embedder = None
    try:
        embedder = HashingEmbedder.from_id(payload["embedder_id"])
    except InvalidInput:
        pass  # foreign embedder: retrieval needs an explicit embedder
    return DocumentIndex(
        doc_id=payload["doc_id"], chunks=chunks, vectors=vectors,
        embedder_id=payload["embedder_id"], dim=payload["dim"],
        embedder=embedder,
    )


def retrieve(index: DocumentIndex, query: str, k: int,
             embedder: Optional[HashingEmbedder] = None
             ) -> list[tuple[Chunk, float]]:
    """Exact top-k chunks by cosine, descending, ties by chunk order."""
    if k <= 0:
        raise InvalidInput(f"k must be positive, got {k}")
    if index.n_chunks == 0:
        raise InvalidInput("index is empty")
    embedder = embedder or index.embedder
    if embedder is None:
        raise InvalidInput(
            f"index was built with {index.embedder_id!r}; pass that embedder"
        )
    q = embedder.embed([query])[0]
    scores = index.vectors @ q  # rows are unit vectors, so this is cosine
    k = min(k, index.n_chunks)
    order = np.lexsort((np.arange(index.n_chunks), -scores))[:k]
    return [(index.chunks[int(i)], float(scores[int(i)])) for i in order]


# ---------------------------------------------------------------------------
# Engineered prompts, answering, summarization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptConfig:
    """The customizable parts of the engineered prompt."""

    persona: str = ("You are a power systems engineer answering questions"
                    " about a technical document.")
    task: str = ("Answer the question using the document excerpts above.")
    output_constraints: str = (
        "Ground every statement in the excerpts. If they do not contain the"
        " answer, reply exactly: I don't know."
    )
    summary_task: str = "Write a concise summary of the excerpt."
    combine_task: str = ("Combine the partial summaries above into one"
                         " coherent summary of the whole document.")


@dataclass(frozen=True)
class QAPrompt:
    persona: str
    context: tuple[tuple[Chunk, float], ...]  # sorted by descending score
    task: str
    output_constraints: str
    question: str

    def __post_init__(self) -> None:
        scores = [score for _, score in self.context]
        if scores != sorted(scores, reverse=True):
            raise InvalidInput("context chunks must be sorted by descending score")

    def render(self) -> tuple[ChatMessage, ...]:
        blocks = []
        if self.context:
            blocks.append("Document excerpts (most relevant first):")
            for rank, (chunk_, score) in enumerate(self.context, start=1):
                blocks.append(
                    f"[{rank}] (chars {chunk_.start}-{chunk_.end},"
                    f" score {score:.4f})\n{chunk_.text}"
                )
        blocks.append(self.task)
        blocks.append(self.output_constraints)
        blocks.append(f"Question: {self.question}")
        return (
            ChatMessage.text("system", self.persona),
            ChatMessage.text("user", "\n\n".join(blocks)),
        )


@dataclass(frozen=True)
class Answer:
    text: str
    citations: tuple[tuple[Chunk, float], ...]
    prompt: QAPrompt


def answer(index: DocumentIndex, question: str, k: int, model: ChatProvider,
           *, use_rag: bool = True, config: Optional[PromptConfig] = None,
           temperature: float = 0.0) -> Answer:
    """Build the engineered prompt, query the model, return answer + spans."""
    config = config or PromptConfig()
    context: tuple[tuple[Chunk, float], ...] = ()
    if use_rag:
        context = tuple(retrieve(index, question, k))
    prompt = QAPrompt(
        persona=config.persona, context=context, task=config.task,
        output_constraints=config.output_constraints, question=question,
    )
    request = ChatRequest(messages=prompt.render(), temperature=temperature)
    response = model.chat(request)
    return Answer(text=response.message.text_content, citations=context,
                  prompt=prompt)


def summarize(index: DocumentIndex, model: ChatProvider,
              *, config: Optional[PromptConfig] = None,
              temperature: float = 0.0) -> str:
    """Map-reduce summary: one call per chunk in order, then a combining call."""
    if index.n_chunks == 0:
        raise InvalidInput("index is empty")
    config = config or PromptConfig()

    def ask(text: str) -> str:
        request = ChatRequest(messages=(
            ChatMessage.text("system", config.persona),
            ChatMessage.text("user", text),
        ), temperature=temperature)
        return model.chat(request).message.text_content

    if index.n_chunks == 1:
        only = index.chunks[0]
        return ask(f"Excerpt (chars {only.start}-{only.end}):\n{only.text}"
                   f"\n\n{config.summary_task}")
    partials = []
    for chunk_ in index.chunks:
        partials.append(ask(
            f"Excerpt (chars {chunk_.start}-{chunk_.end}):\n{chunk_.text}"
            f"\n\n{config.summary_task}"
        ))
    combined_input = "\n\n".join(
        f"Partial summary {i + 1}:\n{p}" for i, p in enumerate(partials)
    )
    return ask(f"{combined_input}\n\n{config.combine_task}")
