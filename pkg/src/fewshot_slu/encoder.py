"""Static-embedding utterance encoder with an optional windowed tanh context layer.

Gradients are computed by hand from a small forward tape; there is no autodiff
dependency. All tensors are float64.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MEAN_POOL = "mean-pool"
WINDOWED = "windowed-affine"
CONTEXT_PARAMS = ("context.W", "context.b")
HEAD_PARAMS = ("ic.W", "ic.b", "sl.W", "sl.b")
OOV_SALT = b"fewshot-slu/oov/v1"


class EncoderError(ValueError):
    pass


class EmbeddingProvider:
    """Frozen token -> vector table.

    Out-of-vocabulary tokens map either to zeros or to a fixed pseudo-random
    vector seeded by a salted hash of the token text.
    """

    def __init__(self, vocab: Sequence[str], matrix: np.ndarray, oov_policy: str = "hashed"):
        if oov_policy not in ("zero", "hashed"):
            raise EncoderError(f"unknown OOV policy {oov_policy!r}")
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(vocab):
            raise EncoderError("embedding matrix must be (len(vocab), dim)")
        matrix.setflags(write=False)
        self.vocab = tuple(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.matrix = matrix
        self.dim = matrix.shape[1]
        self.oov_policy = oov_policy
        self._oov_cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.vocab)

    def _oov(self, token: str) -> np.ndarray:
        vec = self._oov_cache.get(token)
        if vec is None:
            if self.oov_policy == "zero":
                vec = np.zeros(self.dim)
            else:
                digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=OOV_SALT)
                rng = np.random.default_rng(int.from_bytes(digest.digest(), "little"))
                vec = rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=self.dim)
            vec.setflags(write=False)
            self._oov_cache[token] = vec
        return vec

    def lookup(self, token: str) -> np.ndarray:
        i = self.index.get(token)
        return self.matrix[i] if i is not None else self._oov(token)

    def lookup_many(self, tokens: Iterable[str]) -> np.ndarray:
        rows = [self.lookup(t) for t in tokens]
        return np.stack(rows) if rows else np.zeros((0, self.dim))

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.vocab).encode("utf-8"))
        h.update(self.matrix.astype("<f8").tobytes())
        h.update(self.oov_policy.encode())
        return h.hexdigest()


def load_embeddings(path: str | Path, oov_policy: str = "hashed") -> EmbeddingProvider:
    """Read a whitespace-separated text table: ``token v1 v2 ... vD`` per line."""
    vocab: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    dim = None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise EncoderError(f"{path}:{lineno}: no vector values")
            elif len(values) != dim:
                raise EncoderError(f"{path}:{lineno}: expected {dim} values, found {len(values)}")
            try:
                vec = [float(v) for v in values]
            except ValueError:
                raise EncoderError(f"{path}:{lineno}: unparsable float") from None
            if token in seen:
                log.warning("%s:%d: duplicate token %r ignored", path, lineno, token)
                continue
            seen.add(token)
            vocab.append(token)
            rows.append(vec)
    if dim is None:
        raise EncoderError(f"{path}: empty embedding file")
    return EmbeddingProvider(vocab, np.array(rows, dtype=np.float64), oov_policy)


def save_embeddings(provider: EmbeddingProvider, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for tok, vec in zip(provider.vocab, provider.matrix):
            fh.write(tok + " " + " ".join(repr(float(x)) for x in vec) + "\n")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    output_dim: int
    context: str = WINDOWED
    window: int = 3

    def __post_init__(self):
        if self.context not in (MEAN_POOL, WINDOWED):
            raise EncoderError(f"unknown context layer {self.context!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise EncoderError("encoder dimensions must be >= 1")
        if self.context == MEAN_POOL and self.output_dim != self.input_dim:
            raise EncoderError("mean-pool output width must equal the embedding width")
        if self.context == WINDOWED and (self.window < 1 or self.window % 2 == 0):
            raise EncoderError(f"window must be a positive odd number, got {self.window}")

    @classmethod
    def mean_pool(cls, dim: int) -> EncoderConfig:
        return cls(dim, dim, MEAN_POOL, 1)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ParamSet:
    """Trainable tensors plus the frozen embedding table they sit on.

    Label tuples name the columns of the IC and SL heads, when present.
    """

    config: EncoderConfig
    provider: EmbeddingProvider
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    intent_labels: tuple[str, ...] = ()
    slot_labels: tuple[str, ...] = ()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self, group: Iterable[str] | None = None) -> list[str]:
        if group is None:
            return list(self.tensors)
        group = set(group)
        return [n for n in self.tensors if n in group]

    def with_tensors(self, updates: Mapping[str, np.ndarray], **labels) -> ParamSet:
        tensors = dict(self.tensors)
        tensors.update(updates)
        return ParamSet(
            self.config,
            self.provider,
            tensors,
            labels.get("intent_labels", self.intent_labels),
            labels.get("slot_labels", self.slot_labels),
        )

    def without(self, names: Iterable[str]) -> ParamSet:
        drop = set(names)
        return ParamSet(
            self.config,
            self.provider,
            {k: v for k, v in self.tensors.items() if k not in drop},
            (),
            (),
        )


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def init_params(
    seed: int | np.random.Generator,
    config: EncoderConfig,
    provider: EmbeddingProvider,
    intent_labels: Sequence[str] = (),
    slot_labels: Sequence[str] = (),
) -> ParamSet:
    """Fresh parameters: Glorot-uniform weights, zero biases.

    Heads are only created when label lists are given.
    """
    if provider.dim != config.input_dim:
        raise EncoderError(f"embedding dim {provider.dim} != encoder input {config.input_dim}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    if config.context == WINDOWED:
        fan_in = config.window * config.input_dim
        tensors["context.W"] = glorot(rng, fan_in, config.output_dim)
        tensors["context.b"] = np.zeros(config.output_dim)
    params = ParamSet(config, provider, tensors)
    if intent_labels or slot_labels:
        params = init_heads(params, rng, intent_labels, slot_labels)
    return params


def init_heads(
    params: ParamSet,
    rng: np.random.Generator,
    intent_labels: Sequence[str],
    slot_labels: Sequence[str],
) -> ParamSet:
    d = params.config.output_dim
    heads = {
        "ic.W": glorot(rng, d, len(intent_labels)),
        "ic.b": np.zeros(len(intent_labels)),
        "sl.W": glorot(rng, d, len(slot_labels)),
        "sl.b": np.zeros(len(slot_labels)),
    }
    return params.with_tensors(
        heads, intent_labels=tuple(intent_labels), slot_labels=tuple(slot_labels)
    )


@dataclass
class EncoderOutput:
    utterance_vec: np.ndarray
    token_vecs: np.ndarray


@dataclass
class BatchEncoding:
    """Encodings of several utterances; token rows are concatenated in order."""

    utterance_vecs: np.ndarray  # (U, D')
    token_vecs: np.ndarray  # (N, D')
    starts: np.ndarray  # (U,) first token row of each utterance
    lengths: np.ndarray  # (U,)

    def __len__(self) -> int:
        return len(self.lengths)

    def output(self, i: int) -> EncoderOutput:
        s = self.starts[i]
        return EncoderOutput(self.utterance_vecs[i], self.token_vecs[s : s + self.lengths[i]])


@dataclass
class Tape:
    context: str
    inputs: np.ndarray  # (N, w*D) windowed inputs, or raw embeddings for mean-pool
    hidden: np.ndarray  # (N, D')
    segment: np.ndarray  # (N,) utterance index of each token row
    lengths: np.ndarray


def encode_batch(params: ParamSet, token_seqs: Sequence[Sequence[str]]) -> tuple[BatchEncoding, Tape]:
    if not token_seqs or any(len(t) == 0 for t in token_seqs):
        raise EncoderError("cannot encode an empty token sequence")
    cfg = params.config
    lengths = np.array([len(t) for t in token_seqs])
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    segment = np.repeat(np.arange(len(lengths)), lengths)
    pos = np.arange(segment.size) - starts[segment]
    emb = params.provider.lookup_many(t for seq in token_seqs for t in seq)

    if cfg.context == MEAN_POOL:
        inputs = emb
        hidden = emb
    else:
        n = emb.shape[0]
        padded = np.vstack([emb, np.zeros((1, emb.shape[1]))])
        half = cfg.window // 2
        cols = []
        for off in range(-half, half + 1):
            idx = np.arange(n) + off
            valid = (pos + off >= 0) & (pos + off < lengths[segment])
            cols.append(padded[np.where(valid, idx, n)])
        inputs = np.hstack(cols)
        hidden = np.tanh(inputs @ params["context.W"] + params["context.b"])

    utt = np.add.reduceat(hidden, starts, axis=0) / lengths[:, None]
    enc = BatchEncoding(utt, hidden, starts, lengths)
    return enc, Tape(cfg.context, inputs, hidden, segment, lengths)


def encode(params: ParamSet, tokens: Sequence[str]) -> tuple[EncoderOutput, Tape]:
    enc, tape = encode_batch(params, [tokens])
    return enc.output(0), tape


def backprop_batch(tape: Tape, d_utterance: np.ndarray, d_tokens: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse pass: gradient of <d_utterance, U> + <d_tokens, H> w.r.t. the context layer."""
    if d_utterance.shape != (len(tape.lengths), tape.hidden.shape[1]):
        raise EncoderError(f"utterance adjoint shape {d_utterance.shape} mismatches encoding")
    if d_tokens.shape != tape.hidden.shape:
        raise EncoderError(f"token adjoint shape {d_tokens.shape} mismatches encoding")
    if tape.context == MEAN_POOL:
        return {}
    d_hidden = d_tokens + (d_utterance / tape.lengths[:, None])[tape.segment]
    d_pre = d_hidden * (1.0 - tape.hidden**2)
    return {"context.W": tape.inputs.T @ d_pre, "context.b": d_pre.sum(axis=0)}


def backprop(tape: Tape, adjoint: EncoderOutput) -> dict[str, np.ndarray]:
    return backprop_batch(
        tape, np.atleast_2d(adjoint.utterance_vec), np.asarray(adjoint.token_vecs)
    )


def add_grads(a: dict[str, np.ndarray], b: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + v if k in out else v
    return out


def _check_grad(params: ParamSet, grad: Mapping[str, np.ndarray]) -> None:
    for name, g in grad.items():
        if name not in params.tensors:
            raise EncoderError(f"gradient for unknown tensor {name!r}")
        if g.shape != params[name].shape:
            raise EncoderError(f"gradient shape {g.shape} != tensor {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise EncoderError(f"non-finite gradient for {name}")


def sgd_step(params: ParamSet, grad: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    _check_grad(params, grad)
    return params.with_tensors({k: params[k] - lr * g for k, g in grad.items()})


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    state: AdamState, params: ParamSet, grad: Mapping[str, np.ndarray], lr: float
) -> tuple[AdamState, ParamSet]:
    _check_grad(params, grad)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v, updates = dict(state.m), dict(state.v), {}
    for name, g in grad.items():
        m[name] = b1 * m.get(name, 0.0) + (1 - b1) * g
        v[name] = b2 * v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**t)
        v_hat = v[name] / (1 - b2**t)
        updates[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(t, m, v, b1, b2, state.eps)
    return new_state, params.with_tensors(updates)
