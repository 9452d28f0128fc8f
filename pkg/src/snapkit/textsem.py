"""Text-prompt encoding, mask/vocabulary matching, open-vocabulary queries,
and panoptic assembly.

Text embeddings come from a pluggable provider. The default provider is a
deterministic seeded-hash embedding: dependency-free, byte-identical for
byte-identical strings, and near-orthogonal for distinct strings, which is
all the matching math needs at desk scale. A real text encoder can be
attached in-process or through the newline-delimited-JSON subprocess adapter.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

DEFAULT_TEMPLATE = "a photo of a {class_name}"
DEFAULT_TEMPERATURE = 0.07


class VocabularyError(ValueError):
    pass


@runtime_checkable
class EmbeddingProvider(Protocol):
    dimension: int
    deterministic: bool

    def embed(self, texts: "list[str]") -> np.ndarray:
        """(len(texts), dimension) array of text embeddings."""
        ...


class HashEmbeddingProvider:
    """Deterministic unit vectors derived from a seeded hash of the string."""

    def __init__(self, dimension: int = 32, seed: int = 0):
        self.dimension = dimension
        self.deterministic = True
        self.seed = seed

    def embed(self, texts: "list[str]") -> np.ndarray:
        out = np.zeros((len(texts), self.dimension))
        for i, text in enumerate(texts):
            digest = hashlib.blake2b(
                text.encode("utf-8"), digest_size=8, key=str(self.seed).encode()
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            v = rng.standard_normal(self.dimension)
            out[i] = v / np.linalg.norm(v)
        return out


class JsonLineProviderAdapter:
    """Out-of-process provider speaking newline-delimited JSON.

    The child process receives ``{"texts": [...]}`` lines on stdin and must
    answer each with one ``{"embeddings": [[...], ...]}`` line on stdout.
    """

    def __init__(self, command: "list[str]", dimension: int, deterministic: bool = True):
        self.dimension = dimension
        self.deterministic = deterministic
        self._proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True
        )

    def embed(self, texts: "list[str]") -> np.ndarray:
        assert self._proc.stdin and self._proc.stdout
        self._proc.stdin.write(json.dumps({"texts": list(texts)}) + "\n")
        self._proc.stdin.flush()
        reply = json.loads(self._proc.stdout.readline())
        arr = np.asarray(reply["embeddings"], dtype=np.float64)
        if arr.shape != (len(texts), self.dimension):
            raise VocabularyError(
                f"provider returned shape {arr.shape}, expected {(len(texts), self.dimension)}"
            )
        return arr

    def close(self):
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class TextVocabulary:
    class_names: "list[str]"
    embeddings: np.ndarray  # (C, D) rows L2-normalized
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise VocabularyError("class names must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise VocabularyError("vocabulary embeddings must be L2-normalized")


def build_vocabulary(provider: EmbeddingProvider, class_names: "list[str]",
                     template: str = DEFAULT_TEMPLATE) -> TextVocabulary:
    """Embed each class name wrapped in the sentence template."""
    if "{class_name}" not in template:
        raise VocabularyError("template must contain a {class_name} slot")
    texts = [template.format(class_name=name) for name in class_names]
    emb = np.asarray(provider.embed(texts), dtype=np.float64)
    if emb.shape != (len(class_names), provider.dimension):
        raise VocabularyError(
            f"provider dimension mismatch: got {emb.shape}, "
            f"expected ({len(class_names)}, {provider.dimension})"
        )
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    return TextVocabulary(class_names=list(class_names), embeddings=emb, template=template)


def classify_masks(clip_embeddings, vocab: TextVocabulary,
                   temperature: float = DEFAULT_TEMPERATURE
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Match mask embeddings to the vocabulary by cosine similarity.

    Returns (class_ids, probabilities); probabilities are the softmax of
    cosine / temperature, argmax ties go to the lower class index.
    """
    emb = np.asarray(clip_embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-4:
        raise VocabularyError("mask embeddings must be L2-normalized")
    logits = emb @ vocab.embeddings.T / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs.argmax(axis=1), probs


def open_vocab_query(result, query: str, provider: EmbeddingProvider,
                     tau_sim: float = 0.0) -> "list[tuple[int, float]]":
    """Rank a result's masks against a free-form text query.

    Returns (mask index, cosine similarity) pairs with similarity >= tau_sim,
    best first; ties keep the lower mask index first.
    """
    embeddings = np.asarray(result.clip_embeddings, dtype=np.float64)
    if embeddings.shape[0] == 0:
        return []
    q = np.asarray(provider.embed([query])[0], dtype=np.float64)
    q = q / np.linalg.norm(q)
    sims = embeddings @ q
    order = np.lexsort((np.arange(sims.size), -sims))
    return [(int(i), float(sims[i])) for i in order if sims[i] >= tau_sim]


def assemble_panoptic(result, class_ids, n_points: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Flatten overlapping masks into per-point (instance, class) labels.

    Every point goes to the highest-scoring mask containing it (ties to the
    lower mask index); uncovered points get -1 / -1.
    """
    class_ids = np.asarray(class_ids)
    point_instance = np.full(n_points, -1, dtype=np.int64)
    point_class = np.full(n_points, -1, dtype=np.int64)
    scores = np.asarray(result.scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    for mask_idx in order:
        mask = np.asarray(result.masks[mask_idx]).astype(bool)
        claim = mask & (point_instance == -1)
        point_instance[claim] = mask_idx
        point_class[claim] = class_ids[mask_idx]
    return point_instance, point_class
