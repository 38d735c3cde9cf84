"""Synthetic byte corpora aligned with the planted task centroids.

A "family" ``f`` draws most of its bytes from the home set of centroid
``f % N`` (bytes ``v`` with ``v % N == f % N``) and the rest uniformly, so a
planted model routes family ``f`` text preferentially to the matching expert.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

IN_FAMILY_PROB = 0.85


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def family_tokens(
    rng: np.random.Generator,
    family: int,
    length: int,
    num_centroids: int = 8,
    vocab_size: int = 256,
    in_family_prob: float = IN_FAMILY_PROB,
) -> np.ndarray:
    home = np.arange(family % num_centroids, vocab_size, num_centroids)
    from_home = rng.random(length) < in_family_prob
    out = rng.integers(0, vocab_size, size=length)
    out[from_home] = rng.choice(home, size=int(from_home.sum()))
    return out.astype(np.int64)


def family_sequences(family: int, n_seqs: int, seq_len: int, seed: int, num_centroids: int = 8, vocab_size: int = 256):
    rng = _rng(seed, 1, family)
    return [family_tokens(rng, family, seq_len, num_centroids, vocab_size) for _ in range(n_seqs)]


def mixture_sequences(n_seqs: int, seq_len: int, seed: int, families: int = 8, num_centroids: int = 8, vocab_size: int = 256):
    """General-purpose text stand-in: one family per sequence, families balanced then shuffled."""
    rng = _rng(seed, 2)
    fams = rng.permutation(np.arange(n_seqs) % families)
    return [family_tokens(rng, int(f), seq_len, num_centroids, vocab_size) for f in fams]


def random_sequences(n_seqs: int, seq_len: int, seed: int, vocab_size: int = 256):
    rng = _rng(seed, 3)
    return [rng.integers(0, vocab_size, size=seq_len).astype(np.int64) for _ in range(n_seqs)]


def dataset_name(family: int, doc: int) -> str:
    return f"family{family:02d}_doc{doc:02d}"


def corpus_datasets(
    families: int,
    docs_per_family: int,
    doc_len: int,
    seed: int,
    num_centroids: int = 8,
    vocab_size: int = 256,
) -> dict[str, np.ndarray]:
    """In-memory version of ``gen_corpus``: dataset name -> token array."""
    for name, val in (("families", families), ("docs_per_family", docs_per_family), ("doc_len", doc_len)):
        if val < 1:
            raise ValueError(f"{name} must be >= 1, got {val}")
    return {
        dataset_name(f, d): family_tokens(_rng(seed, 0, f, d), f, doc_len, num_centroids, vocab_size)
        for f in range(families)
        for d in range(docs_per_family)
    }


def gen_corpus(
    out_dir,
    families: int,
    docs_per_family: int,
    doc_len: int,
    seed: int,
    num_centroids: int = 8,
    vocab_size: int = 256,
) -> list[Path]:
    """Write one byte file per (family, doc) dataset; returns the paths."""
    if vocab_size > 256:
        raise ValueError("byte corpora need vocab_size <= 256")
    data = corpus_datasets(families, docs_per_family, doc_len, seed, num_centroids, vocab_size)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    paths = []
    for name, toks in data.items():
        path = out / f"{name}.bin"
        try:
            path.write_bytes(toks.astype(np.uint8).tobytes())
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        paths.append(path)
    return paths


def split_sequences(tokens: np.ndarray, seq_len: int) -> list[np.ndarray]:
    return [tokens[i : i + seq_len] for i in range(0, tokens.size, seq_len)]


def read_dataset(path, seq_len: int) -> list[np.ndarray]:
    """Split a byte file into sequences of at most ``seq_len`` tokens."""
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)
    if data.size == 0:
        raise ValueError(f"empty dataset file {path}")
    return split_sequences(data, seq_len)


def load_corpus(path, seq_len: int) -> dict[str, list[np.ndarray]]:
    """Datasets keyed by file stem, from a single ``.bin`` file or a directory."""
    p = Path(path)
    files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
    if not files:
        raise FileNotFoundError(f"no .bin datasets under {p}")
    return {f.stem: read_dataset(f, seq_len) for f in files}
