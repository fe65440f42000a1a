"""Deterministic synthetic corpus of paired (features, tokens) utterances.

Transcripts are sampled from a seeded bigram chain over a small word
vocabulary and wrapped in BOS/EOS sentinels; features render each word as a
seeded template vector repeated for a random duration plus Gaussian noise.
The bigram structure is the point: contextual teacher embeddings then carry
next/previous-word information that pure acoustics do not.

Token id layout: 0 = blank (never appears in transcripts), 1 = BOS,
2 = EOS, 3.. = words.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .rng import PRNG_NAME, stream

BLANK_ID = 0
BOS_ID = 1
EOS_ID = 2
FIRST_WORD_ID = 3

# Successor weights for each word's bigram row; concentrated so the chain has
# strong, learnable structure and empirical rows converge quickly.
_SUCCESSOR_WEIGHTS = (0.8, 0.2)


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 16          # word tokens, excluding sentinels and blank
    min_len: int = 3              # transcript word counts (sentinels excluded)
    max_len: int = 12
    min_duration: int = 1         # frames per word
    max_duration: int = 3
    feature_dim: int = 8
    noise_std: float = 0.3
    confusability: float = 0.0    # > 0 pairs up words with nearly identical templates
    words_per_class: int = 1      # > 1 factors the bigram through word classes
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("need at least two word tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("invalid utterance length range")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValueError("invalid duration range")
        if self.noise_std < 0 or self.confusability < 0:
            raise ValueError("noise_std and confusability must be nonnegative")
        if self.words_per_class < 1 or self.vocab_size % self.words_per_class:
            raise ValueError("words_per_class must divide vocab_size")

    @property
    def n_symbols(self) -> int:
        """Output symbol count K: blank + BOS + EOS + words."""
        return FIRST_WORD_ID + self.vocab_size

    def vocab_names(self) -> tuple[str, ...]:
        return ("<blank>", "<bos>", "<eos>") + tuple(
            f"w{i:02d}" for i in range(self.vocab_size)
        )


@dataclass(frozen=True)
class Utterance:
    id: str
    tokens: tuple[int, ...]       # with sentinels: (BOS, w.., EOS)
    features: np.ndarray          # T x F, T >= word count

    def word_count(self) -> int:
        return sum(1 for t in self.tokens if t >= FIRST_WORD_ID)


def bigram_matrix(cfg: CorpusConfig) -> np.ndarray:
    """Row-stochastic word transitions, shape (V, V).

    Transitions run between word classes (contiguous id blocks of
    ``words_per_class``; single-word classes by default): each class
    concentrates on a few successor classes via seeded circulant offsets on
    a seeded relabeling, and the successor word is uniform within its
    class.  The matrix is doubly stochastic by construction, so its
    stationary distribution is uniform; sentence-initial words are drawn
    from that stationary distribution, which keeps every row evenly
    covered in sampled corpora.
    """
    rng = stream(cfg.seed, "bigram")
    wpc = cfg.words_per_class
    n_classes = cfg.vocab_size // wpc
    n_succ = min(len(_SUCCESSOR_WEIGHTS), n_classes - 1)
    weights = np.array(_SUCCESSOR_WEIGHTS[:n_succ])
    weights = weights / weights.sum()
    offsets = 1 + rng.choice(n_classes - 1, size=n_succ, replace=False)
    perm = rng.permutation(n_classes)
    inv = np.empty(n_classes, dtype=np.int64)
    inv[perm] = np.arange(n_classes)
    class_rows = np.zeros((n_classes, n_classes))
    for i in range(n_classes):
        class_rows[i, perm[(inv[i] + offsets) % n_classes]] = weights
    spread = np.kron(class_rows, np.full((wpc, wpc), 1.0 / wpc))
    return spread


def word_class(cfg: CorpusConfig, word: int) -> int:
    return word // cfg.words_per_class


def word_templates(cfg: CorpusConfig) -> np.ndarray:
    """Seeded per-word feature templates, shape (V, F).

    With confusability > 0, every word of an odd-indexed class shares a
    template (up to a perturbation of that norm) with the same-slot word
    of the preceding class, so those pairs can only be told apart reliably
    from context once the feature noise is comparable.  With single-word
    classes this pairs consecutive words.
    """
    rng = stream(cfg.seed, "templates")
    templates = rng.standard_normal((cfg.vocab_size, cfg.feature_dim))
    if cfg.confusability > 0:
        wpc = cfg.words_per_class
        for w in range(cfg.vocab_size):
            if word_class(cfg, w) % 2 == 1:
                delta = rng.standard_normal(cfg.feature_dim)
                delta *= cfg.confusability / np.linalg.norm(delta)
                templates[w] = templates[w - wpc] + delta
    return templates


def sample_transcript(cfg: CorpusConfig, rng: np.random.Generator, transitions: np.ndarray) -> tuple[int, ...]:
    """First word from the (uniform) stationary distribution, then the chain."""
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    words = [int(rng.integers(cfg.vocab_size))]
    for _ in range(length - 1):
        words.append(int(rng.choice(cfg.vocab_size, p=transitions[words[-1]])))
    return (BOS_ID,) + tuple(w + FIRST_WORD_ID for w in words) + (EOS_ID,)


def render_features(cfg: CorpusConfig, tokens, rng: np.random.Generator | None = None) -> np.ndarray:
    """Render a transcript to frames: template per word, repeated 1..3 times, plus noise.

    Sentinels emit no frames.  With a dedicated rng omitted, the stream is
    derived from the config seed and the token sequence, so rendering is a
    pure function of (config, tokens).
    """
    if rng is None:
        rng = stream(cfg.seed, "render", *tokens)
    templates = word_templates(cfg)
    frames = []
    for tok in tokens:
        if tok < FIRST_WORD_ID:
            continue
        duration = int(rng.integers(cfg.min_duration, cfg.max_duration + 1))
        base = templates[tok - FIRST_WORD_ID]
        for _ in range(duration):
            frames.append(base + cfg.noise_std * rng.standard_normal(cfg.feature_dim))
    if not frames:
        raise ValueError("transcript has no word tokens; nothing to render")
    return np.array(frames)


def gen_corpus(cfg: CorpusConfig, count: int):
    """Generate ``count`` utterances plus a manifest; byte-deterministic in (cfg, count)."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    transitions = bigram_matrix(cfg)
    utterances = []
    for i in range(count):
        rng = stream(cfg.seed, "utt", i)
        tokens = sample_transcript(cfg, rng, transitions)
        features = render_features(cfg, tokens, rng)
        utterances.append(Utterance(id=f"utt-{i:06d}", tokens=tokens, features=features))
    manifest = {
        "config": asdict(cfg),
        "count": count,
        "prng": PRNG_NAME,
        "n_symbols": cfg.n_symbols,
        "vocab_names": list(cfg.vocab_names()),
    }
    return utterances, manifest


def split(corpus: list[Utterance], fractions, seed: int):
    """Deterministic disjoint partition by shuffled position.

    Fractions must sum to 1; each part's size differs from the exact
    proportion by less than 1.
    """
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be nonnegative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, expected 1")
    order = stream(seed, "split").permutation(len(corpus))
    bounds = [0]
    acc = 0.0
    for f in fractions:
        acc += f
        bounds.append(int(round(acc * len(corpus))))
    bounds[-1] = len(corpus)
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        parts.append([corpus[i] for i in sorted(order[lo:hi])])
    return parts


# ---------------------------------------------------------------------------
# disk format


def save_corpus(path_dir, utterances, manifest, splits: dict[str, list[str]] | None = None):
    os.makedirs(path_dir, exist_ok=True)
    with open(os.path.join(path_dir, "corpus.jsonl"), "w") as fh:
        for utt in utterances:
            fh.write(
                json.dumps(
                    {
                        "id": utt.id,
                        "tokens": list(utt.tokens),
                        "features": utt.features.tolist(),
                    }
                )
                + "\n"
            )
    with open(os.path.join(path_dir, "corpus_manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    if splits is not None:
        with open(os.path.join(path_dir, "splits.json"), "w") as fh:
            json.dump(splits, fh, sort_keys=True, indent=1)
            fh.write("\n")


def load_corpus(path_dir):
    """Returns (utterances, manifest, splits or None)."""
    with open(os.path.join(path_dir, "corpus_manifest.json")) as fh:
        manifest = json.load(fh)
    utterances = []
    with open(os.path.join(path_dir, "corpus.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            utterances.append(
                Utterance(
                    id=rec["id"],
                    tokens=tuple(rec["tokens"]),
                    features=np.array(rec["features"], dtype=np.float64),
                )
            )
    splits = None
    splits_path = os.path.join(path_dir, "splits.json")
    if os.path.exists(splits_path):
        with open(splits_path) as fh:
            splits = json.load(fh)
    return utterances, manifest, splits
