"""Shared plumbing: named RNG substreams, canonical JSON, file hashing."""

import hashlib
import json

import numpy as np


def named_rng(seed, *labels):
    """Derive an independent Generator from a root seed and a label path.

    Every source of randomness in the pipeline flows from one root seed
    through a named substream, so individual stages can be re-run in
    isolation and still reproduce.  Labels may be strings, ints, or tuples;
    they are hashed with SHA-256 so the derivation is stable across runs
    and platforms.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:8], "big"))
    return np.random.default_rng(np.random.SeedSequence(words))


def named_seed(seed, *labels):
    """64-bit integer seed derived the same way as :func:`named_rng`."""
    material = repr((int(seed), labels)).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")


def canonical_json(obj):
    """Serialize to JSON with a stable key order and no whitespace drift."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def json_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()
