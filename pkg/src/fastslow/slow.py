"""The Slow scorer: bidirectional captioning log-likelihood h(x, y).

Two independent pre-norm transformer decoders, one reading the caption
forwards and one reading it with content tokens reversed, each cross-attend
to the flattened visual feature map. h(x, y) is the sum of both sequence
log-likelihoods. EOS is scored and BOS is only conditioning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, PAD, Dataset
from .encoders import EncoderConfig, FeatureMap, ImageEncoderParams, encode_image
from .nn import ParamSet, glorot, linear
from .training import StepResult, TrainConfig, TrainLog, run

MASK_VALUE = -1e9


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 22
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 18
    d_visual: int = 64
    share_embeddings: bool = False
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


class DecoderParams(ParamSet):
    """theta_fwd under ``fwd.*`` and theta_bwd under ``bwd.*``; disjoint unless embeddings are shared."""

    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        for direction in ("fwd", "bwd"):
            self._build(direction, rng)

    def _build(self, p: str, rng) -> None:
        c = self.config
        dm, dv, V, ff = c.d_model, c.d_visual, c.vocab_size, c.ffn_mult * c.d_model
        if p == "bwd" and c.share_embeddings:
            self.params["bwd.tok"] = self.params["fwd.tok"]
        else:
            self.add(f"{p}.tok", glorot(rng, (V, dm), V, dm))
        self.add(f"{p}.pos", glorot(rng, (c.max_len, dm), c.max_len, dm))
        for layer in range(c.n_layers):
            q = f"{p}.L{layer}."
            for ln in ("ln1", "ln2", "ln3"):
                self.add(q + ln + "_g", np.ones(dm))
                self.add(q + ln + "_b", np.zeros(dm))
            for name in ("sa_q", "sa_k", "sa_v", "sa_o", "ca_q", "ca_o"):
                self.add(q + name, glorot(rng, (dm, dm), dm, dm))
            self.add(q + "ca_k", glorot(rng, (dv, dm), dv, dm))
            self.add(q + "ca_v", glorot(rng, (dv, dm), dv, dm))
            self.add(q + "ff1", glorot(rng, (dm, ff), dm, ff))
            self.add(q + "ff1_b", np.zeros(ff))
            self.add(q + "ff2", glorot(rng, (ff, dm), ff, dm))
            self.add(q + "ff2_b", np.zeros(dm))
        self.add(f"{p}.lnf_g", np.ones(dm))
        self.add(f"{p}.lnf_b", np.zeros(dm))
        self.add(f"{p}.out", glorot(rng, (dm, V), dm, V))
        self.add(f"{p}.out_b", np.zeros(V))

    def parameters(self) -> list[Tensor]:
        seen, out = set(), []
        for t in self.params.values():
            if id(t) not in seen:
                seen.add(id(t))
                out.append(t)
        return out


# ---------------------------------------------------------------- attention

def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, dm = x.shape
    return ad.transpose(ad.reshape(x, (B, T, n_heads, dm // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, hd = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, H * hd))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              record: list | None = None) -> Tensor:
    """Scaled dot-product attention over (B, heads, T, hd) queries."""
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = ad.masked_fill(scores, mask, MASK_VALUE)
    weights = ad.softmax(scores, axis=-1)
    if record is not None:
        record.append((scores.data.copy(), weights.data.copy()))
    return ad.matmul(weights, v)


@dataclass
class CrossMemory:
    """Per-layer cross-attention keys and values, each (B, heads, P, hd)."""
    layers: list[tuple[Tensor, Tensor]]

    def take(self, rows: np.ndarray) -> "CrossMemory":
        return CrossMemory([(Tensor(k.data[rows]), Tensor(v.data[rows])) for k, v in self.layers])


def cross_memory(visual: Tensor, params: DecoderParams, direction: str) -> CrossMemory:
    c = params.config
    out = []
    for layer in range(c.n_layers):
        q = f"{direction}.L{layer}."
        k = _split_heads(ad.matmul(visual, params[q + "ca_k"]), c.n_heads)
        v = _split_heads(ad.matmul(visual, params[q + "ca_v"]), c.n_heads)
        out.append((k, v))
    return CrossMemory(out)


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def decoder_logits(memory: CrossMemory | Tensor, tokens: np.ndarray, params: DecoderParams,
                   direction: str = "fwd", record: list | None = None) -> Tensor:
    """Next-token logits (B, T, V); row l conditions on tokens[:, :l+1] and the image."""
    c = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    B, T = tokens.shape
    if T > c.max_len:
        raise SequenceTooLong(f"sequence of {T} tokens exceeds max_len {c.max_len}")
    if tokens.min() < 0 or tokens.max() >= c.vocab_size:
        raise ValueError(f"token id outside vocabulary of size {c.vocab_size}")
    if isinstance(memory, Tensor):
        memory = cross_memory(memory, params, direction)
    p = direction + "."
    x = ad.add(ad.embedding(params[p + "tok"], tokens),
               ad.embedding(params[p + "pos"], np.arange(T)))
    causal = _causal_mask(T)
    for layer, (mk, mv) in enumerate(memory.layers):
        q = f"{p}L{layer}."
        h = ad.layer_norm(x, params[q + "ln1_g"], params[q + "ln1_b"])
        sa = attention(_split_heads(ad.matmul(h, params[q + "sa_q"]), c.n_heads),
                       _split_heads(ad.matmul(h, params[q + "sa_k"]), c.n_heads),
                       _split_heads(ad.matmul(h, params[q + "sa_v"]), c.n_heads), causal)
        x = ad.add(x, ad.matmul(_merge_heads(sa), params[q + "sa_o"]))
        h = ad.layer_norm(x, params[q + "ln2_g"], params[q + "ln2_b"])
        ca = attention(_split_heads(ad.matmul(h, params[q + "ca_q"]), c.n_heads), mk, mv,
                       record=record)
        x = ad.add(x, ad.matmul(_merge_heads(ca), params[q + "ca_o"]))
        h = ad.layer_norm(x, params[q + "ln3_g"], params[q + "ln3_b"])
        ff = linear(ad.gelu(linear(h, params[q + "ff1"], params[q + "ff1_b"])),
                    params[q + "ff2"], params[q + "ff2_b"])
        x = ad.add(x, ff)
    x = ad.layer_norm(x, params[p + "lnf_g"], params[p + "lnf_b"])
    return linear(x, params[p + "out"], params[p + "out_b"])


# ---------------------------------------------------------------- caption scores

def reverse_caption(tokens: Sequence[int]) -> tuple[int, ...]:
    """BOS stays first and EOS last; content tokens are reversed."""
    toks = tuple(tokens)
    if len(toks) < 2 or toks[0] != BOS or toks[-1] != EOS:
        raise ValueError("caption must start with BOS and end with EOS")
    return (BOS, *toks[-2:0:-1], EOS)


def pad_batch(captions: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(c) for c in captions)
    out = np.full((len(captions), width), PAD, dtype=np.int64)
    for i, c in enumerate(captions):
        if len(c) < 2 or c[0] != BOS or c[-1] != EOS:
            raise ValueError(f"caption {i} must start with BOS and end with EOS")
        out[i, :len(c)] = c
    return out


def caption_score_fwd(memory: CrossMemory | Tensor, captions: Sequence[Sequence[int]],
                      params: DecoderParams, direction: str = "fwd") -> Tensor:
    """Sum of log p(token | prefix, image) over content tokens and EOS; shape (B,)."""
    toks = pad_batch(captions)
    inputs, targets = toks[:, :-1], toks[:, 1:]
    if targets.max() >= params.config.vocab_size:
        raise ValueError(f"token id outside vocabulary of size {params.config.vocab_size}")
    logp = ad.log_softmax(decoder_logits(memory, inputs, params, direction), axis=-1)
    picked = ad.gather_last(logp, targets)
    return ad.sum(ad.mul(picked, (targets != PAD).astype(np.float64)), axis=1)


def caption_score(visual: Tensor | tuple[CrossMemory, CrossMemory],
                  captions: Sequence[Sequence[int]], params: DecoderParams) -> Tensor:
    """h(x, y) = h_fwd(x, y) + h_fwd under theta_bwd of the reversed caption."""
    if isinstance(visual, Tensor):
        mem_f, mem_b = cross_memory(visual, params, "fwd"), cross_memory(visual, params, "bwd")
    else:
        mem_f, mem_b = visual
    h_fwd = caption_score_fwd(mem_f, captions, params, "fwd")
    h_bwd = caption_score_fwd(mem_b, [reverse_caption(c) for c in captions], params, "bwd")
    return ad.add(h_fwd, h_bwd)


# ---------------------------------------------------------------- the full model

@dataclass(frozen=True)
class SlowConfig:
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig = DecoderConfig()


class SlowModel:
    def __init__(self, config: SlowConfig, rng: np.random.Generator):
        if config.decoder.d_visual != config.encoder.d:
            raise ValueError("decoder d_visual must equal encoder width d")
        self.config = config
        self.encoder = ImageEncoderParams(config.encoder, rng)
        self.decoder = DecoderParams(config.decoder, rng)

    @classmethod
    def init(cls, config: SlowConfig, seed: int) -> "SlowModel":
        return cls(config, np.random.default_rng(seed))

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.encoder.state_dict("enc."), **self.decoder.state_dict("dec.")}

    def load_state_dict(self, arrays) -> None:
        self.encoder.load_state_dict(arrays, "enc.")
        self.decoder.load_state_dict(arrays, "dec.")

    def features(self, renders) -> FeatureMap:
        return encode_image(renders, self.encoder)

    def visual(self, renders) -> Tensor:
        return self.features(renders).flatten()

    def memories(self, visual: Tensor) -> tuple[CrossMemory, CrossMemory]:
        return cross_memory(visual, self.decoder, "fwd"), cross_memory(visual, self.decoder, "bwd")

    def score(self, visual: Tensor, captions: Sequence[Sequence[int]]) -> Tensor:
        return caption_score(visual, captions, self.decoder)

    def score_one_caption(self, visual: Tensor, caption: Sequence[int]) -> np.ndarray:
        """h(x_j, y) for every row j of ``visual`` and one caption; tape-free."""
        return self.score(visual, [tuple(caption)] * visual.shape[0]).data.copy()


def ca_loss(model: SlowModel, renders, captions: Sequence[Sequence[int]]) -> Tensor:
    """L_CA = -sum_i h(x_i, y_i)."""
    return ad.neg(ad.sum(model.score(model.visual(renders), captions)))


def sample_batch(rng: np.random.Generator, dataset: Dataset, scene_ids: Sequence[int],
                 batch_size: int) -> tuple[np.ndarray, list]:
    """Distinct scenes, one randomly chosen caption each."""
    b = min(batch_size, len(scene_ids))
    picked = np.sort(rng.choice(np.asarray(scene_ids), size=b, replace=False))
    caps = []
    for sid in picked:
        options = dataset.captions_of(int(sid))
        caps.append(options[int(rng.integers(len(options)))])
    return picked, caps


def train_slow(dataset: Dataset, model_config: SlowConfig, config: TrainConfig,
               init_seed: int | None = None) -> tuple[SlowModel, TrainLog]:
    """Minimise L_CA over train pairs with Adam and warm-up + cosine decay."""
    model = SlowModel.init(model_config, config.seed if init_seed is None else init_seed)
    train_ids = dataset.split_ids("train")

    def sample(rng):
        ids, caps = sample_batch(rng, dataset, train_ids, config.batch_size)
        return ids.tolist(), (ids, caps)

    def loss(batch):
        ids, caps = batch
        total = ca_loss(model, dataset.renders(ids), [c.tokens for c in caps])
        return StepResult(ad.scale(total, 1.0 / len(ids)))

    history = run(model.parameters(), sample, loss, config)
    return model, history


# ---------------------------------------------------------------- attention maps

@dataclass
class AttentionRecord:
    """Cross-attention per decoder direction and layer.

    ``scores[d][l]`` and ``weights[d][l]`` are (heads, T, P) arrays; ``flagged[d][l]``
    holds, per token position, the head with the highest mean pre-softmax score.
    """
    scores: dict[str, list[np.ndarray]] = field(default_factory=dict)
    weights: dict[str, list[np.ndarray]] = field(default_factory=dict)
    flagged: dict[str, list[np.ndarray]] = field(default_factory=dict)
    tokens: dict[str, tuple[int, ...]] = field(default_factory=dict)
    resolution: int = 0


def attention_maps(model: SlowModel, render: np.ndarray, caption: Sequence[int]) -> AttentionRecord:
    fm = model.features(render[None] if render.ndim == 3 else render[:1])
    visual = fm.flatten()
    out = AttentionRecord(resolution=fm.resolution)
    for direction, toks in (("fwd", tuple(caption)), ("bwd", reverse_caption(caption))):
        rec: list = []
        decoder_logits(visual, np.asarray(toks[:-1])[None], model.decoder, direction, record=rec)
        out.tokens[direction] = toks
        out.scores[direction] = [s[0] for s, _ in rec]
        out.weights[direction] = [w[0] for _, w in rec]
        out.flagged[direction] = [s[0].mean(axis=-1).argmax(axis=0) for s, _ in rec]
    return out
