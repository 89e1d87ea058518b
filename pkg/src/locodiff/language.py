"""Language-conditioned goals: a deterministic hashed bag-of-words text
featurizer, an external-embedding import path, a projection MLP trained with
the gait-alignment loss, and a templated instruction generator."""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass

import numpy as np

from .adam import AdamState, adam_step
from .autodiff import Tensor
from .nets import collect_grads, mlp_forward, mlp_init, zero_grads
from .quadsim import GAITS, Goal

EMBED_DIM = 384
HASH_SEED = 0x10c0d1ff

# >= 6 synonyms per gait; the last entries double as anchor words inside the
# held-out test-only phrasings below.
GAIT_SYNONYMS = {
    "trot": ["trot", "jog", "lope", "amble", "canter", "strut"],
    "bound": ["bound", "gallop", "surge", "lunge", "vault", "bolt"],
    "pace": ["pace", "shuffle", "sidle", "glide", "stride", "saunter"],
    "pronk": ["pronk", "hop", "spring", "bounce", "leap", "skip"],
}
# test-only phrasings; each contains one anchor synonym from the table above
HELDOUT_PHRASES = {
    "trot": ["jog like a fox", "strut like a show pony"],
    "bound": ["gallop like a greyhound", "bolt like a hare"],
    "pace": ["shuffle like a camel", "glide like a skater"],
    "pronk": ["skip like a deer", "spring like a gazelle"],
}
SPEED_WORDS = {
    "still": 0.0, "stationary": 0.0,
    "slowly": 0.25, "gently": 0.25,
    "steadily": 0.5, "briskly": 0.5,
    "quickly": 0.75, "swiftly": 0.75,
    "fast": 1.0, "flat-out": 1.0,
}
DIRECTION_WORDS = {
    "forward": (1, 0, 0), "ahead": (1, 0, 0),
    "backward": (-1, 0, 0), "back": (-1, 0, 0),
    "leftward": (0, 1, 0), "rightward": (0, -1, 0),
    "clockwise": (0, 0, -1), "counterclockwise": (0, 0, 1),
}
POLITENESS = ["", "please", "now", "kindly"]
VERBS = ["go", "move", "start to", "begin to"]

VY_MAX, WZ_MAX = 0.6, 0.5


def _tokenize(text):
    return [t for t in re.split(r"[^a-z0-9]+", text.lower()) if t]


def _token_vector(token, seed):
    h = hashlib.blake2b(token.encode("utf-8"),
                        key=struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF),
                        digest_size=8).digest()
    key = int.from_bytes(h, "little")
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.standard_normal(EMBED_DIM).astype(np.float32)


def featurize(text, seed=HASH_SEED):
    """Deterministic 384-dim embedding: hashed token vectors, mean-pooled,
    L2-normalized. Empty-after-tokenization input returns the zero vector
    (flagged by its zero norm rather than unit norm)."""
    if not text:
        raise ValueError("empty instruction text")
    tokens = _tokenize(text)
    if not tokens:
        return np.zeros(EMBED_DIM, np.float32)
    vecs = np.stack([_token_vector(t, seed) for t in tokens])
    pooled = vecs.mean(axis=0)
    return (pooled / np.linalg.norm(pooled)).astype(np.float32)


class Embedder:
    """featurize() with an optional imported lookup table taking precedence."""

    def __init__(self, table=None, seed=HASH_SEED):
        self.table = table or {}
        self.seed = seed
        self.fallbacks = 0

    def __call__(self, text):
        if text in self.table:
            return self.table[text]
        if self.table:
            self.fallbacks += 1
        return featurize(text, self.seed)


def import_embeddings(path):
    """Read (u32 text length, UTF-8 text, 384 f32-LE) records into a dict."""
    with open(path, "rb") as f:
        blob = f.read()
    table = {}
    off = 0
    n = len(blob)
    while off < n:
        if off + 4 > n:
            raise ValueError(f"truncated length field at offset {off}")
        (tl,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + tl + 4 * EMBED_DIM > n:
            raise ValueError(f"truncated record at offset {off}")
        try:
            text = blob[off:off + tl].decode("utf-8")
        except UnicodeDecodeError as e:
            raise ValueError(f"malformed text at offset {off}: {e}") from e
        off += tl
        table[text] = np.frombuffer(blob[off:off + 4 * EMBED_DIM],
                                    dtype="<f4").copy()
        off += 4 * EMBED_DIM
    return table


def write_embeddings(table, path):
    with open(path, "wb") as f:
        for text, vec in table.items():
            tb = text.encode("utf-8")
            f.write(struct.pack("<I", len(tb)))
            f.write(tb)
            f.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# instruction generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstructionPair:
    text: str
    goal: Goal
    split: str  # train | val | test


def _compose_goal(gait, speed_word, dir_word):
    mag = SPEED_WORDS.get(speed_word, 0.5) if speed_word else 0.5
    ax = DIRECTION_WORDS.get(dir_word, (1, 0, 0)) if dir_word else (1, 0, 0)
    if mag == 0.0:
        return Goal.structured(0.0, 0.0, 0.0, gait)
    return Goal.structured(ax[0] * mag, ax[1] * min(mag, VY_MAX),
                           ax[2] * min(mag, WZ_MAX), gait)


def _split_by_hash(texts, ratios=(8, 1, 1)):
    """Deterministic exact 8:1:1 split: rank by text hash, cut at the exact
    boundaries."""
    n = len(texts)
    keys = [int.from_bytes(hashlib.blake2b(t.encode(), digest_size=8).digest(),
                           "little") for t in texts]
    order = sorted(range(n), key=lambda i: (keys[i], texts[i]))
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    tags = [""] * n
    for rank, i in enumerate(order):
        if rank < n_train:
            tags[i] = "train"
        elif rank < n_train + n_val:
            tags[i] = "val"
        else:
            tags[i] = "test"
    return tags


def gen_instructions(n=1000, seed=0):
    """Generate n distinct templated instructions with structured goals and a
    deterministic hash-rank 8:1:1 split."""
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0xadd))
    seen = set()
    texts, goals = [], []
    while len(texts) < n:
        gait = GAITS[rng.integers(len(GAITS))]
        syn = GAIT_SYNONYMS[gait][rng.integers(len(GAIT_SYNONYMS[gait]))]
        pol = POLITENESS[rng.integers(len(POLITENESS))]
        verb = VERBS[rng.integers(len(VERBS))]
        dir_word = ""
        if rng.random() < 0.7:
            dws = list(DIRECTION_WORDS)
            dir_word = dws[rng.integers(len(dws))]
        speed_word = ""
        if rng.random() < 0.8:
            sws = list(SPEED_WORDS)
            speed_word = sws[rng.integers(len(sws))]
        words = [pol, verb, dir_word, speed_word, syn]
        text = " ".join(w for w in words if w)
        if text in seen:
            continue
        seen.add(text)
        texts.append(text)
        goals.append(_compose_goal(gait, speed_word, dir_word))
    tags = _split_by_hash(texts)
    return [InstructionPair(t, g, s) for t, g, s in zip(texts, goals, tags)]


def heldout_pairs():
    """Test-only phrasings with unseen surface forms but one anchor synonym."""
    out = []
    for gait, phrases in HELDOUT_PHRASES.items():
        for ph in phrases:
            out.append(InstructionPair(ph, Goal.structured(0.5, 0.0, 0.0, gait),
                                       "test"))
    return out


# ---------------------------------------------------------------------------
# projection training
# ---------------------------------------------------------------------------

def train_projection(pairs, embedder=None, seed=0, steps=3000, lr=3e-4,
                     batch=64, patience=5, eval_every=100):
    """Train the 384->64->4 projection on L = mean||MLP(e(l)) - y_onehot||^2.

    Early-stops on validation loss; never touches the test split (asserted).
    Returns (params, history dict)."""
    embedder = embedder or Embedder()
    train = [p for p in pairs if p.split == "train"]
    val = [p for p in pairs if p.split == "val"]
    if not train:
        raise ValueError("empty training split")
    assert all(p.split != "test" for p in train + val), \
        "test split leaked into projection training"
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0x1a6))
    X = np.stack([embedder(p.text) for p in train])
    Y = np.stack([p.goal.gait for p in train]).astype(np.float32)
    Xv = np.stack([embedder(p.text) for p in val]) if val else None
    Yv = np.stack([p.goal.gait for p in val]).astype(np.float32) if val else None
    params = mlp_init(rng, [EMBED_DIM, 64, len(GAITS)])
    opt = AdamState.for_params(params)
    history = {"train": [], "val": []}
    best_val, best_params, bad = np.inf, None, 0
    initial = None
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(train), size=min(batch, len(train)))
        out = mlp_forward(params, X[idx])
        loss = (out - Tensor(Y[idx])).square().mean()
        if initial is None:
            initial = max(float(loss.data), 1e-8)
        if float(loss.data) > 10.0 * initial:
            raise RuntimeError(
                f"projection training diverged at step {step}: "
                f"loss {float(loss.data):.4f} vs initial {initial:.4f}")
        zero_grads(params)
        loss.backward()
        adam_step(params, collect_grads(params), opt, lr)
        history["train"].append(float(loss.data))
        if step % eval_every == 0 and Xv is not None:
            vout = mlp_forward(params, Xv)
            vloss = float(((vout.data - Yv) ** 2).mean())
            history["val"].append((step, vloss))
            if vloss < best_val - 1e-6:
                best_val, bad = vloss, 0
                best_params = {k: t.data.copy() for k, t in params.items()}
            else:
                bad += 1
                if bad >= patience:
                    break
    if best_params is not None:
        for k, t in params.items():
            t.data = best_params[k]
    return params, history


def project(params, embedding):
    """Raw 4-dim gait logits for one embedding or a batch."""
    emb = np.asarray(embedding, np.float32)
    single = emb.ndim == 1
    out = mlp_forward(params, emb[None] if single else emb).data
    return out[0] if single else out


def gait_accuracy(params, pairs, embedder=None):
    """Fraction of pairs whose argmax logit matches the goal gait."""
    embedder = embedder or Embedder()
    if not pairs:
        return float("nan")
    X = np.stack([embedder(p.text) for p in pairs])
    pred = project(params, X).argmax(axis=1)
    truth = np.array([p.goal.gait_index for p in pairs])
    return float((pred == truth).mean())


def parse_velocity(text):
    """Template slot parser: (vx, vy, wz, parsed_flag)."""
    tokens = _tokenize(text)
    speed = next((t for t in tokens if t in SPEED_WORDS), None)
    direction = next((t for t in tokens if t in DIRECTION_WORDS), None)
    if "flat" in tokens and "out" in tokens:
        speed = "flat-out"
    if speed is None and direction is None:
        return 0.0, 0.0, 0.0, False
    mag = SPEED_WORDS[speed] if speed else 0.5
    ax = DIRECTION_WORDS[direction] if direction else (1, 0, 0)
    if mag == 0.0:
        return 0.0, 0.0, 0.0, True
    return ax[0] * mag, ax[1] * min(mag, VY_MAX), ax[2] * min(mag, WZ_MAX), True


def encode_goal(text, params, embedder=None):
    """Full 7-dim Goal from free text: gait slots from the projection, body
    velocities from the template parser (defaults (0,0,0) when unparsable)."""
    embedder = embedder or Embedder()
    logits = project(params, embedder(text))
    vx, vy, wz, _ = parse_velocity(text)
    gait = int(np.argmax(logits))
    return Goal.structured(vx, vy, wz, gait)


def export_instructions(pairs, path):
    """JSON-lines export: text, goal vector, split."""
    with open(path, "w") as f:
        for p in pairs:
            f.write(json.dumps({"text": p.text,
                                "goal": [float(x) for x in p.goal.vector()],
                                "split": p.split}) + "\n")
