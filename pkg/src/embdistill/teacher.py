"""Frozen contextual token-embedding teacher and its on-disk target store.

A deterministic stand-in for a pretrained embedder: every token gets a
seeded pseudo-random base vector, and the contextual embedding of position
i mixes the base vectors of (previous, current, next) tokens through a
frozen affine map followed by tanh and unit normalization.  The context
mixing matters: it makes the regression targets carry neighbor information,
which is the channel the auxiliary losses exploit.

Targets are precomputed once per corpus into a JSON-lines store with a
manifest (seed, dimensionality, vocabulary hash, content checksum), so
training never touches teacher weights.
"""

import hashlib
import json
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import PRNG_NAME, stream

STORE_VERSION = "1"


@dataclass(frozen=True)
class TeacherConfig:
    """Immutable teacher description; all weights derive from the seed.

    ``class_size``/``class_mix`` give the embedding space word-class
    geometry: words in the same contiguous id block share an anchor
    direction mixed into their base vectors.  This is the stand-in for the
    linguistic structure (word classes, part-of-speech-like groupings) a
    pretrained embedder carries; class_mix = 0 keeps plain per-token
    vectors.
    """

    emb_dim: int = 32
    seed: int = 0
    vocab_names: tuple[str, ...] = ()
    bos_id: int = 1
    eos_id: int = 2
    class_size: int = 1
    class_mix: float = 0.0

    def __post_init__(self):
        if self.emb_dim < 1:
            raise ValueError("emb_dim must be positive")
        if not self.vocab_names:
            raise ValueError("teacher needs the vocabulary name list (index = token id)")
        if self.class_size < 1:
            raise ValueError("class_size must be >= 1")
        if not 0.0 <= self.class_mix < 1.0:
            raise ValueError("class_mix must lie in [0, 1)")

    @property
    def n_tokens(self) -> int:
        return len(self.vocab_names)

    @property
    def first_word_id(self) -> int:
        return self.eos_id + 1

    def vocab_hash(self) -> str:
        canon = json.dumps(list(self.vocab_names)).encode()
        return hashlib.sha256(canon).hexdigest()


def base_embedding(cfg: TeacherConfig, token_id: int) -> np.ndarray:
    """Seeded unit vector for one token; pure function of (seed, token id).

    Word tokens of the same class blend a shared anchor with the token's
    own direction when class_mix > 0; sentinels always stand alone.
    """
    if not 1 <= token_id < cfg.n_tokens:
        raise ValueError(f"unknown token id {token_id} (vocabulary has ids 1..{cfg.n_tokens - 1})")
    vec = stream(cfg.seed, "teacher-base", token_id).standard_normal(cfg.emb_dim)
    vec /= np.linalg.norm(vec)
    if cfg.class_mix > 0.0 and token_id >= cfg.first_word_id:
        cls = (token_id - cfg.first_word_id) // cfg.class_size
        anchor = stream(cfg.seed, "teacher-class", cls).standard_normal(cfg.emb_dim)
        anchor /= np.linalg.norm(anchor)
        vec = cfg.class_mix * anchor + (1.0 - cfg.class_mix) * vec
        vec /= np.linalg.norm(vec)
    return vec


@lru_cache(maxsize=None)
def _base_table(cfg: TeacherConfig) -> np.ndarray:
    table = np.zeros((cfg.n_tokens, cfg.emb_dim))
    for tid in range(1, cfg.n_tokens):
        table[tid] = base_embedding(cfg, tid)
    return table


@lru_cache(maxsize=None)
def _context_mixer(cfg: TeacherConfig) -> np.ndarray:
    scale = 1.0 / np.sqrt(3 * cfg.emb_dim)
    return stream(cfg.seed, "teacher-mixer").uniform(
        -scale, scale, size=(cfg.emb_dim, 3 * cfg.emb_dim)
    ) * 3.0


def contextual_embed(cfg: TeacherConfig, tokens) -> np.ndarray:
    """Target embedding sequence: one unit-norm row per input token.

    Position i embeds tanh(W . [base(prev), base(cur), base(next)]) with
    sentinel padding at the boundaries, so identical tokens in different
    contexts receive different targets.
    """
    tokens = [int(t) for t in tokens]
    n = len(tokens)
    if n == 0:
        return np.zeros((0, cfg.emb_dim))
    base = _base_table(cfg)
    for t in tokens:
        if not 1 <= t < cfg.n_tokens:
            raise ValueError(f"unknown token id {t}")
    padded = [cfg.bos_id] + tokens + [cfg.eos_id]
    rows = np.concatenate(
        [base[padded[:-2]], base[padded[1:-1]], base[padded[2:]]], axis=1
    )
    mixed = np.tanh(rows @ _context_mixer(cfg).T)
    norms = np.linalg.norm(mixed, axis=1, keepdims=True)
    return mixed / norms


# ---------------------------------------------------------------------------
# target store


def _store_paths(store_dir):
    return (
        os.path.join(store_dir, "targets.jsonl"),
        os.path.join(store_dir, "targets_manifest.json"),
    )


def cache_targets(cfg: TeacherConfig, utterances, store_dir) -> str:
    """Precompute and write the embedding targets for a corpus.

    One JSON line per utterance: {"id": ..., "emb": [[...], ...]}.  The
    manifest records the seed, dimensionality, vocabulary hash, and a
    sha256 checksum of the data file.  Duplicate ids are rejected.
    """
    os.makedirs(store_dir, exist_ok=True)
    data_path, manifest_path = _store_paths(store_dir)
    seen = set()
    with open(data_path, "w") as fh:
        for utt in utterances:
            if utt.id in seen:
                raise ValueError(f"duplicate utterance id {utt.id!r} in target store")
            seen.add(utt.id)
            emb = contextual_embed(cfg, utt.tokens)
            fh.write(json.dumps({"id": utt.id, "emb": emb.tolist()}) + "\n")
    with open(data_path, "rb") as fh:
        checksum = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "version": STORE_VERSION,
        "seed": cfg.seed,
        "emb_dim": cfg.emb_dim,
        "count": len(seen),
        "vocab_hash": cfg.vocab_hash(),
        "checksum": checksum,
        "context_window": "prev-cur-next",
        "prng": PRNG_NAME,
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return data_path


class TargetStore:
    """Read-only map from utterance id to its embedding-target matrix."""

    def __init__(self, targets: dict[str, np.ndarray], manifest: dict):
        self._targets = targets
        self.manifest = manifest
        self.emb_dim = manifest["emb_dim"]

    def __len__(self):
        return len(self._targets)

    def __contains__(self, utt_id):
        return utt_id in self._targets

    def get(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._targets:
            raise KeyError(f"no embedding targets stored for utterance {utt_id!r}")
        return self._targets[utt_id]


def load_targets(store_dir) -> TargetStore:
    """Load a target store, verifying the manifest checksum."""
    data_path, manifest_path = _store_paths(store_dir)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != STORE_VERSION:
        raise ValueError(f"target store version {manifest.get('version')!r} unsupported")
    with open(data_path, "rb") as fh:
        blob = fh.read()
    checksum = hashlib.sha256(blob).hexdigest()
    if checksum != manifest["checksum"]:
        raise ValueError("target store checksum mismatch: file was modified or truncated")
    targets = {}
    for line in blob.decode().splitlines():
        rec = json.loads(line)
        if rec["id"] in targets:
            raise ValueError(f"duplicate utterance id {rec['id']!r} in target store")
        emb = np.array(rec["emb"], dtype=np.float64).reshape(-1, manifest["emb_dim"])
        emb.flags.writeable = False  # frozen teacher outputs stay frozen
        targets[rec["id"]] = emb
    return TargetStore(targets, manifest)
