"""Prototypical networks, first-order MAML and fine-tuning for joint IC/SL.

All three learners share the encoder in :mod:`fewshot_slu.encoder` and the
joint loss: per query utterance, intent NLL plus token-averaged slot NLL,
averaged over the query set.

Slot classes are BIO-stripped slot types plus ``"O"``; predicted class runs
are expanded back to BIO tags (first token of a run gets ``B``).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .corpus import OTHER, OTHER_TAG, Dataset, SlotTag, Utterance, begin, inside, slot_inventory
from .encoder import (
    CONTEXT_PARAMS,
    HEAD_PARAMS,
    AdamState,
    EmbeddingProvider,
    EncoderConfig,
    EncoderOutput,
    ParamSet,
    adam_step,
    backprop_batch,
    encode_batch,
    init_heads,
    init_params,
    sgd_step,
)
from .episode import Episode, EpisodeSeed, Stream, sample_episode
from .metrics import EpisodeMetrics, aggregate, score_episode

log = logging.getLogger(__name__)

LEARNERS = ("proto", "fomaml", "finetune")
LR_PRETRAIN = {"proto": 0.001, "fomaml": 0.003, "finetune": 0.001}
LR_ADAPT = {"proto": 0.001, "fomaml": 0.01, "finetune": 0.001}
INIT_KEY = 0x5EED


class LearnerError(RuntimeError):
    pass


def slot_class(tag: SlotTag) -> str:
    return OTHER if tag.is_other else tag.slot_type


def expand_bio(classes: Sequence[str]) -> tuple[SlotTag, ...]:
    out = []
    prev = OTHER
    for c in classes:
        if c == OTHER:
            out.append(OTHER_TAG)
        else:
            out.append(inside(c) if c == prev else begin(c))
        prev = c
    return tuple(out)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _neg_sqdist(x: np.ndarray, protos: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - protos[None, :, :]
    return -np.einsum("ijk,ijk->ij", diff, diff)


def _mean_matrix(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """(n_classes, len(labels)) matrix whose row k averages the members of class k."""
    m = np.zeros((n_classes, len(labels)))
    m[labels, np.arange(len(labels))] = 1.0
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise LearnerError("a prototype class has no support examples")
    return m / counts


@dataclass(frozen=True)
class Prototypes:
    intents: tuple[str, ...]
    intent_protos: np.ndarray  # (n, D')
    slot_classes: tuple[str, ...]
    slot_protos: np.ndarray  # (m, D')

    def intent_map(self) -> dict[str, np.ndarray]:
        return dict(zip(self.intents, self.intent_protos))

    def slot_map(self) -> dict[str, np.ndarray]:
        return dict(zip(self.slot_classes, self.slot_protos))


def support_slot_classes(utterances: Sequence[Utterance]) -> tuple[str, ...]:
    present = {slot_class(t) for u in utterances for t in u.slots}
    head = (OTHER,) if OTHER in present else ()
    return head + tuple(sorted(present - {OTHER}))


def compute_prototypes(
    encoded_support: Mapping[str, Sequence[EncoderOutput]],
    support_tags: Mapping[str, Sequence[Sequence[SlotTag]]],
) -> Prototypes:
    """Intent centroids of utterance vectors and slot-class centroids of token vectors."""
    intents = tuple(encoded_support)
    intent_rows, token_rows, token_classes = [], [], []
    for intent in intents:
        outs = encoded_support[intent]
        if not outs:
            raise LearnerError(f"intent {intent!r} has an empty support set")
        intent_rows.append(np.mean([o.utterance_vec for o in outs], axis=0))
        for out, tags in zip(outs, support_tags[intent]):
            if len(tags) != len(out.token_vecs):
                raise LearnerError("support tags do not match encoded tokens")
            token_rows.extend(out.token_vecs)
            token_classes.extend(slot_class(t) for t in tags)
    present = set(token_classes)
    classes = ((OTHER,) if OTHER in present else ()) + tuple(sorted(present - {OTHER}))
    idx = {c: i for i, c in enumerate(classes)}
    labels = np.array([idx[c] for c in token_classes])
    slot_protos = _mean_matrix(labels, len(classes)) @ np.array(token_rows)
    return Prototypes(intents, np.array(intent_rows), classes, slot_protos)


@dataclass(frozen=True)
class PredictionDist:
    intent_probs: np.ndarray  # (n,)
    slot_probs: np.ndarray  # (T, m)


def proto_predict(encoded_query: EncoderOutput, protos: Prototypes) -> PredictionDist:
    """Softmax over negative squared Euclidean distances to the prototypes."""
    u = np.atleast_2d(encoded_query.utterance_vec)
    tokens = np.atleast_2d(encoded_query.token_vecs)
    if u.shape[1] != protos.intent_protos.shape[1] or (
        len(protos.slot_classes) and tokens.shape[1] != protos.slot_protos.shape[1]
    ):
        raise LearnerError("query and prototype dimensions differ")
    ic = np.exp(_log_softmax(_neg_sqdist(u, protos.intent_protos)))[0]
    sl = np.exp(_log_softmax(_neg_sqdist(tokens, protos.slot_protos)))
    return PredictionDist(ic, sl)


# --- joint loss -----------------------------------------------------------


def _nll_grad(logits: np.ndarray, gold: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted NLL of ``gold`` under softmax(logits) and its logit gradient.

    Rows with ``gold < 0`` are ignored.
    """
    logp = _log_softmax(logits)
    keep = gold >= 0
    w = np.where(keep, weights, 0.0)
    g_idx = np.where(keep, gold, 0)
    rows = np.arange(len(gold))
    loss = -float(np.sum(w * logp[rows, g_idx]))
    grad = np.exp(logp)
    grad[rows, g_idx] -= 1.0
    return loss, grad * w[:, None]


def _token_weights(utts: Sequence[Utterance], gold: np.ndarray) -> np.ndarray:
    """1 / (n_utterances * scored tokens of the utterance) for each token row."""
    lengths = np.array([len(u.tokens) for u in utts])
    seg = np.repeat(np.arange(len(utts)), lengths)
    valid = np.bincount(seg, weights=(gold >= 0).astype(float), minlength=len(utts))
    per_utt = np.divide(1.0, len(utts) * valid, out=np.zeros(len(utts)), where=valid > 0)
    return per_utt[seg]


def _proto_terms(x: np.ndarray, protos: np.ndarray, g: np.ndarray):
    """Adjoints of x and protos given the gradient g of negative squared distances."""
    rs = g.sum(axis=1, keepdims=True)
    cs = g.sum(axis=0)[:, None]
    d_x = -2.0 * (x * rs - g @ protos)
    d_p = 2.0 * (g.T @ x - cs * protos)
    return d_x, d_p


def _proto_loss(params: ParamSet, episode: Episode) -> tuple[float, dict[str, np.ndarray]]:
    support = episode.support_utterances()
    query = episode.query_utterances()
    ns, nq = len(support), len(query)
    enc, tape = encode_batch(params, [u.tokens for u in support + query])
    n_sup_tok = int(enc.lengths[:ns].sum())
    U_s, U_q = enc.utterance_vecs[:ns], enc.utterance_vecs[ns:]
    T_s, T_q = enc.token_vecs[:n_sup_tok], enc.token_vecs[n_sup_tok:]

    intent_idx = {l: i for i, l in enumerate(episode.intents)}
    y_s = np.array([intent_idx[u.intent] for u in support])
    y_q = np.array([intent_idx[u.intent] for u in query])
    A = _mean_matrix(y_s, len(episode.intents))
    C = A @ U_s

    classes = support_slot_classes(support)
    cls_idx = {c: i for i, c in enumerate(classes)}
    b_s = np.array([cls_idx[slot_class(t)] for u in support for t in u.slots])
    g_q = np.array([cls_idx.get(slot_class(t), -1) for u in query for t in u.slots])
    B = _mean_matrix(b_s, len(classes))
    P = B @ T_s

    loss_ic, G_ic = _nll_grad(_neg_sqdist(U_q, C), y_q, np.full(nq, 1.0 / nq))
    loss_sl, G_sl = _nll_grad(_neg_sqdist(T_q, P), g_q, _token_weights(query, g_q))

    dU_q, dC = _proto_terms(U_q, C, G_ic)
    dT_q, dP = _proto_terms(T_q, P, G_sl)
    dU = np.vstack([A.T @ dC, dU_q])
    dT = np.vstack([B.T @ dP, dT_q])
    return loss_ic + loss_sl, backprop_batch(tape, dU, dT)


def _head_columns(labels: Sequence[str], wanted: Sequence[str], what: str) -> np.ndarray:
    pos = {l: i for i, l in enumerate(labels)}
    missing = [w for w in wanted if w not in pos]
    if missing:
        raise LearnerError(f"{what} head has no column for {missing}")
    return np.array([pos[w] for w in wanted])


def _head_loss(
    params: ParamSet,
    utts: Sequence[Utterance],
    intents: Sequence[str],
    slot_classes: Sequence[str],
) -> tuple[float, dict[str, np.ndarray]]:
    """Joint NLL of the parametric heads, softmax restricted to the given labels."""
    n = len(utts)
    ic_cols = _head_columns(params.intent_labels, intents, "intent")
    sl_cols = _head_columns(params.slot_labels, slot_classes, "slot")
    enc, tape = encode_batch(params, [u.tokens for u in utts])
    W_ic, b_ic = params["ic.W"][:, ic_cols], params["ic.b"][ic_cols]
    W_sl, b_sl = params["sl.W"][:, sl_cols], params["sl.b"][sl_cols]

    intent_idx = {l: i for i, l in enumerate(intents)}
    cls_idx = {c: i for i, c in enumerate(slot_classes)}
    y = np.array([intent_idx[u.intent] for u in utts])
    g = np.array([cls_idx.get(slot_class(t), -1) for u in utts for t in u.slots])

    U, T = enc.utterance_vecs, enc.token_vecs
    loss_ic, G_ic = _nll_grad(U @ W_ic + b_ic, y, np.full(n, 1.0 / n))
    loss_sl, G_sl = _nll_grad(T @ W_sl + b_sl, g, _token_weights(utts, g))

    grads = backprop_batch(tape, G_ic @ W_ic.T, G_sl @ W_sl.T)
    for name, cols, X, G in (("ic", ic_cols, U, G_ic), ("sl", sl_cols, T, G_sl)):
        dW = np.zeros_like(params[f"{name}.W"])
        db = np.zeros_like(params[f"{name}.b"])
        dW[:, cols] = X.T @ G
        db[cols] = G.sum(axis=0)
        grads[f"{name}.W"], grads[f"{name}.b"] = dW, db
    return loss_ic + loss_sl, grads


def episode_slot_classes(episode: Episode) -> tuple[str, ...]:
    return (OTHER,) + tuple(sorted(episode.support_slot_inventory))


def joint_loss(
    params: ParamSet, episode: Episode, learner: str = "proto", split: str = "query"
) -> tuple[float, dict[str, np.ndarray]]:
    """Joint IC+SL loss of ``episode`` and its exact gradient.

    ``proto`` scores the query set against support prototypes. The parametric
    learners score ``split`` ("query" or "support") with their heads.
    """
    if learner == "proto":
        loss, grads = _proto_loss(params, episode)
    elif learner in ("fomaml", "finetune"):
        utts = episode.query_utterances() if split == "query" else episode.support_utterances()
        loss, grads = _head_loss(params, utts, episode.intents, episode_slot_classes(episode))
    else:
        raise LearnerError(f"unknown learner {learner!r}")
    if not math.isfinite(loss):
        raise LearnerError(f"non-finite loss {loss} (diverging parameters?)")
    return loss, grads


def _only(grads: Mapping[str, np.ndarray], names: Sequence[str]) -> dict[str, np.ndarray]:
    return {k: grads[k] for k in names if k in grads}


# --- prediction and evaluation ---------------------------------------------


def _score(episode: Episode, pred_intents, pred_classes_per_utt) -> EpisodeMetrics:
    query = episode.query_utterances()
    return score_episode(
        pred_intents,
        [u.intent for u in query],
        [expand_bio(c) for c in pred_classes_per_utt],
        [u.slots for u in query],
        episode.seed,
    )


def _split_rows(rows: Sequence, lengths: np.ndarray) -> list:
    out, start = [], 0
    for n in lengths:
        out.append(rows[start : start + n])
        start += n
    return out


def proto_evaluate(params: ParamSet, episode: Episode) -> EpisodeMetrics:
    support = episode.support_utterances()
    query = episode.query_utterances()
    enc_s, _ = encode_batch(params, [u.tokens for u in support])
    enc_q, _ = encode_batch(params, [u.tokens for u in query])
    encoded = {l: [] for l in episode.intents}
    tags = {l: [] for l in episode.intents}
    for i, u in enumerate(support):
        encoded[u.intent].append(enc_s.output(i))
        tags[u.intent].append(u.slots)
    protos = compute_prototypes(encoded, tags)
    ic = _neg_sqdist(enc_q.utterance_vecs, protos.intent_protos).argmax(axis=1)
    sl = _neg_sqdist(enc_q.token_vecs, protos.slot_protos).argmax(axis=1)
    pred_intents = [protos.intents[i] for i in ic]
    pred_classes = [[protos.slot_classes[k] for k in row] for row in _split_rows(sl, enc_q.lengths)]
    return _score(episode, pred_intents, pred_classes)


def heads_evaluate(params: ParamSet, episode: Episode) -> EpisodeMetrics:
    intents = episode.intents
    classes = episode_slot_classes(episode)
    ic_cols = _head_columns(params.intent_labels, intents, "intent")
    sl_cols = _head_columns(params.slot_labels, classes, "slot")
    enc, _ = encode_batch(params, [u.tokens for u in episode.query_utterances()])
    ic = (enc.utterance_vecs @ params["ic.W"][:, ic_cols] + params["ic.b"][ic_cols]).argmax(axis=1)
    sl = (enc.token_vecs @ params["sl.W"][:, sl_cols] + params["sl.b"][sl_cols]).argmax(axis=1)
    pred_intents = [intents[i] for i in ic]
    pred_classes = [[classes[k] for k in row] for row in _split_rows(sl, enc.lengths)]
    return _score(episode, pred_intents, pred_classes)


def inner_adapt(
    params: ParamSet,
    episode: Episode,
    steps: int,
    lr: float,
    trainable: Sequence[str] | None = None,
    optimizer: str = "sgd",
) -> ParamSet:
    """``steps`` full-batch updates on the support-set head loss.

    The embedding table is never touched; only ``trainable`` tensors move.
    """
    if steps < 0:
        raise LearnerError("steps must be >= 0")
    names = list(trainable) if trainable is not None else params.names()
    state = AdamState()
    for _ in range(steps):
        _, grads = joint_loss(params, episode, "fomaml", split="support")
        grads = _only(grads, names)
        if optimizer == "sgd":
            params = sgd_step(params, grads, lr)
        else:
            state, params = adam_step(state, params, grads, lr)
    return params


def fresh_heads(params: ParamSet, episode: Episode) -> ParamSet:
    """Drop pretraining heads and initialise new ones sized to the episode."""
    base = params.without(HEAD_PARAMS)
    rng = episode.seed.rng(Stream.HEADS)
    return init_heads(base, rng, episode.intents, episode_slot_classes(episode))


def adapt_and_evaluate(
    params: ParamSet,
    episode: Episode,
    learner: str,
    adapt_steps: int = 10,
    lr: float | None = None,
) -> EpisodeMetrics:
    """Adapt to the support set, then score argmax predictions on the query set.

    Proto has nothing to adapt and ignores ``adapt_steps``. Finetune adapts the
    fresh heads only; foMAML adapts heads and context layer. Both use Adam.
    """
    if learner == "proto":
        return proto_evaluate(params, episode)
    if learner not in LEARNERS:
        raise LearnerError(f"unknown learner {learner!r}")
    lr = LR_ADAPT[learner] if lr is None else lr
    adapted = fresh_heads(params, episode)
    trainable = HEAD_PARAMS if learner == "finetune" else CONTEXT_PARAMS + HEAD_PARAMS
    adapted = inner_adapt(adapted, episode, adapt_steps, lr, trainable, optimizer="adam")
    return heads_evaluate(adapted, episode)


# --- pretraining ------------------------------------------------------------


@dataclass
class TrainConfig:
    learner: str = "proto"
    epochs: int = 30
    episodes_per_epoch: int = 100
    batch_size: int = 512
    lr_pretrain: float | None = None
    lr_adapt: float | None = None
    inner_steps: int = 8
    adapt_steps: int = 10
    k_s: int = 10
    k_q: int = 10
    val_episodes: int = 10
    outer_optimizer: str = "adam"

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise LearnerError(f"unknown learner {self.learner!r}")
        if self.lr_pretrain is None:
            self.lr_pretrain = LR_PRETRAIN[self.learner]
        if self.lr_adapt is None:
            self.lr_adapt = LR_ADAPT[self.learner]
        for name in ("epochs", "inner_steps", "adapt_steps", "val_episodes"):
            if getattr(self, name) < 0:
                raise LearnerError(f"{name} must be >= 0")
        for name in ("episodes_per_epoch", "batch_size", "k_s", "k_q"):
            if getattr(self, name) < 1:
                raise LearnerError(f"{name} must be >= 1")
        if self.lr_pretrain <= 0 or self.lr_adapt <= 0:
            raise LearnerError("learning rates must be > 0")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise LearnerError(f"unknown optimizer {self.outer_optimizer!r}")


@dataclass
class TrainState:
    """Everything needed to continue training after ``epoch`` completed epochs."""

    params: ParamSet
    opt: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    log: list[dict] = field(default_factory=list)


def init_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(INIT_KEY,)))
    )


def initial_state(
    learner: str, data: Dataset, seed: int, encoder_config: EncoderConfig, provider: EmbeddingProvider
) -> TrainState:
    rng = init_rng(seed)
    if learner == "proto":
        return TrainState(init_params(rng, encoder_config, provider))
    intents = data.intents
    slots = [OTHER] + sorted(slot_inventory(data))
    return TrainState(init_params(rng, encoder_config, provider, intents, slots))


def validate_params(
    params: ParamSet, learner: str, validation: Dataset, config: TrainConfig, seed: int
) -> tuple[float, float | None]:
    runs = [
        adapt_and_evaluate(
            params,
            sample_episode(EpisodeSeed(seed, i), validation, "validation", config.k_s, config.k_q),
            learner,
            config.adapt_steps,
            config.lr_adapt,
        )
        for i in range(config.val_episodes)
    ]
    ic = aggregate([[m.ic_accuracy for m in runs]]).mean
    f1 = aggregate([[m.sl_f1 for m in runs]]).mean
    return ic, (None if math.isnan(f1) else f1)


StepHook = Callable[[int, ParamSet], None]
EpochHook = Callable[[TrainState], None]


def _train(
    learner: str,
    step_fn: Callable[[TrainState, int, int], tuple[float, int]],
    n_steps: Callable[[int], int],
    config: TrainConfig,
    state: TrainState,
    seed: int,
    validation: Dataset | None,
    on_epoch: EpochHook | None,
) -> TrainState:
    while state.epoch < config.epochs:
        epoch = state.epoch
        total, weight = 0.0, 0
        for i in range(n_steps(epoch)):
            loss_i, w = step_fn(state, epoch, i)
            total += loss_i * w
            weight += w
        row = {"epoch": epoch + 1, "loss": total / max(weight, 1)}
        if validation is not None and config.val_episodes:
            row["val_ic_acc"], row["val_sl_f1"] = validate_params(
                state.params, learner, validation, config, seed
            )
        else:
            row["val_ic_acc"] = row["val_sl_f1"] = None
        state.log.append(row)
        state.epoch = epoch + 1
        log.info("%s epoch %d loss %.4f", learner, state.epoch, row["loss"])
        if on_epoch is not None:
            on_epoch(state)
    return state


def _apply(state: TrainState, grads: dict, lr: float, optimizer: str = "adam") -> None:
    if not grads:
        return
    if optimizer == "sgd":
        state.params = sgd_step(state.params, grads, lr)
    else:
        state.opt, state.params = adam_step(state.opt, state.params, grads, lr)


def proto_pretrain(
    data: Dataset,
    config: TrainConfig,
    seed: int,
    state: TrainState,
    validation: Dataset | None = None,
    on_epoch: EpochHook | None = None,
    on_step: StepHook | None = None,
) -> TrainState:
    """Episodic training of the encoder on the prototype loss, one Adam step per episode."""
    E = config.episodes_per_epoch

    def step(st: TrainState, epoch: int, i: int):
        ep = sample_episode(EpisodeSeed(seed, epoch * E + i), data, "pretrain", config.k_s, config.k_q)
        loss, grads = joint_loss(st.params, ep, "proto")
        _apply(st, _only(grads, CONTEXT_PARAMS), config.lr_pretrain)
        if on_step:
            on_step(epoch * E + i, st.params)
        return loss, 1

    return _train("proto", step, lambda e: E, config, state, seed, validation, on_epoch)


def fomaml_pretrain(
    data: Dataset,
    config: TrainConfig,
    seed: int,
    state: TrainState,
    validation: Dataset | None = None,
    on_epoch: EpochHook | None = None,
    on_step: StepHook | None = None,
) -> TrainState:
    """First-order MAML: adapt a copy on the support set, then step the
    original parameters with the query gradient taken at the adapted copy."""
    E = config.episodes_per_epoch

    def step(st: TrainState, epoch: int, i: int):
        ep = sample_episode(EpisodeSeed(seed, epoch * E + i), data, "pretrain", config.k_s, config.k_q)
        adapted = inner_adapt(st.params, ep, config.inner_steps, config.lr_adapt)
        loss, grads = joint_loss(adapted, ep, "fomaml", split="query")
        _apply(st, grads, config.lr_pretrain, config.outer_optimizer)
        if on_step:
            on_step(epoch * E + i, st.params)
        return loss, 1

    return _train("fomaml", step, lambda e: E, config, state, seed, validation, on_epoch)


def finetune_pretrain(
    data: Dataset,
    config: TrainConfig,
    seed: int,
    state: TrainState,
    validation: Dataset | None = None,
    on_epoch: EpochHook | None = None,
    on_step: StepHook | None = None,
) -> TrainState:
    """Minibatch supervised training over all pretraining utterances."""
    utts = list(data)
    if not utts:
        raise LearnerError("finetune pretraining needs data")
    intents = state.params.intent_labels
    classes = state.params.slot_labels
    bs = config.batch_size
    n_batches = math.ceil(len(utts) / bs)
    order: dict[int, np.ndarray] = {}

    def step(st: TrainState, epoch: int, i: int):
        if epoch not in order:
            order.clear()
            order[epoch] = EpisodeSeed(seed, epoch).rng(Stream.SHUFFLE).permutation(len(utts))
        batch = [utts[j] for j in order[epoch][i * bs : (i + 1) * bs]]
        loss, grads = _head_loss(st.params, batch, intents, classes)
        if not math.isfinite(loss):
            raise LearnerError(f"non-finite loss {loss}")
        _apply(st, grads, config.lr_pretrain)
        if on_step:
            on_step(epoch * n_batches + i, st.params)
        return loss, len(batch)

    return _train("finetune", step, lambda e: n_batches, config, state, seed, validation, on_epoch)


PRETRAINERS = {"proto": proto_pretrain, "fomaml": fomaml_pretrain, "finetune": finetune_pretrain}


def pretrain(
    data: Dataset,
    config: TrainConfig,
    seed: int,
    encoder_config: EncoderConfig,
    provider: EmbeddingProvider,
    validation: Dataset | None = None,
    resume: TrainState | None = None,
    on_epoch: EpochHook | None = None,
    on_step: StepHook | None = None,
) -> TrainState:
    state = resume or initial_state(config.learner, data, seed, encoder_config, provider)
    return PRETRAINERS[config.learner](
        data, config, seed, state, validation, on_epoch=on_epoch, on_step=on_step
    )
