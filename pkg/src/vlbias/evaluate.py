"""Dataset-level scoring: fixed chunking, optional worker threads, ordered reduction."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from .metrics import APResult, average_precision
from .model import ToyVLM
from .scenes import LabeledSample

# Chunk boundaries never depend on the thread count, so every sample sees
# the same batched arithmetic for any --threads value.
CHUNK_SIZE = 256

ChunkFn = Callable[[Sequence[LabeledSample]], tuple[np.ndarray, tuple[str, ...]]]


def plan_chunks(model: ToyVLM, samples: Sequence[LabeledSample], chunk_size: int = CHUNK_SIZE) -> list[list[int]]:
    """Group sample indices by prompt layout (first-seen order), then cut fixed-size chunks."""
    groups: dict = {}
    for i, s in enumerate(samples):
        key = (len(s.text.tokens), model.prompt_categories(s.text))
        groups.setdefault(key, []).append(i)
    return [idx[j : j + chunk_size] for idx in groups.values() for j in range(0, len(idx), chunk_size)]


def plain_chunk(model: ToyVLM) -> ChunkFn:
    def run(chunk: Sequence[LabeledSample]):
        batch = model.stack([s.scene for s in chunk], [s.text for s in chunk])
        det = model.run_batch(batch).detection
        return det.image_scores, det.categories

    return run


def dataset_scores(
    model: ToyVLM,
    samples: Sequence[LabeledSample],
    chunk_fn: ChunkFn | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Image-level scores (samples x model categories); categories missing from a prompt score 0."""
    chunk_fn = chunk_fn or plain_chunk(model)
    cats = model.config.categories
    out = np.zeros((len(samples), len(cats)))
    if not samples:
        return out
    chunks = plan_chunks(model, samples)

    def work(idx):
        return idx, *chunk_fn([samples[i] for i in idx])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    for idx, probs, names in results:
        cols = [cats.index(c) for c in names]
        out[np.ix_(idx, cols)] = probs
    return out


def truth_matrix(samples: Sequence[LabeledSample], categories: Sequence[str]) -> np.ndarray:
    idx = {c: j for j, c in enumerate(categories)}
    t = np.zeros((len(samples), len(categories)), dtype=bool)
    for i, s in enumerate(samples):
        for c in s.truth:
            if c in idx:
                t[i, idx[c]] = True
    return t


def toy_average_precision(
    model: ToyVLM,
    samples: Sequence[LabeledSample],
    threads: int = 1,
    chunk_fn: ChunkFn | None = None,
) -> APResult:
    if not samples:
        raise ValueError("toy_average_precision needs a nonempty dataset")
    cats = model.config.categories
    scores = dataset_scores(model, samples, chunk_fn, threads)
    return average_precision(scores, truth_matrix(samples, cats), cats)
