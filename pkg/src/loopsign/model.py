"""Part-wise skeleton encoder, fusion, shared-weight transformer and loop variants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig, RunConfig
from .data import KEYPOINTS, PARTS, Batch
from .errors import ConfigError, DataError, ShapeError
from .losses import AlignmentHead
from .nn import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    attention_bias,
    param,
    sinusoid,
)
from .tensor import Tensor

NEG = -1e9


# ---------------------------------------------------------------------------
# skeleton graphs
# ---------------------------------------------------------------------------

def _hand_edges() -> list[tuple[int, int]]:
    edges = []
    for finger in range(5):
        base = 1 + 4 * finger
        edges.append((0, base))
        edges += [(base + j, base + j + 1) for j in range(3)]
    return edges


def _chain(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


EDGES = {
    "body": _chain(KEYPOINTS["body"]),
    "face": _chain(KEYPOINTS["face"]),
    "left": _hand_edges(),
    "right": _hand_edges(),
}


def normalized_adjacency(part: str) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` for one body part."""
    if part not in EDGES:
        raise ConfigError(f"no adjacency defined for part {part!r}")
    n = KEYPOINTS[part]
    a = np.eye(n)
    for i, j in EDGES[part]:
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


class PartEncoder(Module):
    """One spatial graph convolution, one temporal convolution, keypoint pooling."""

    def __init__(self, rng: np.random.Generator, part: str, d_gcn: int, kernel: int):
        self._adj = normalized_adjacency(part)
        self._kernel = kernel
        self.spatial_w = Linear(rng, 3, d_gcn)
        bound = np.sqrt(6.0 / (2 * kernel * d_gcn))
        self.temporal_w = param(rng.uniform(-bound, bound, size=(kernel, d_gcn, d_gcn)))
        self.temporal_b = param(np.zeros(d_gcn))

    def spatial(self, x: Tensor) -> Tensor:
        adj = T.Tensor(self._adj, dtype=x.dtype)
        return T.gelu(T.matmul(adj, T.matmul(x, self.spatial_w.weight)) + self.spatial_w.bias)

    def __call__(self, x: Tensor, frame_mask: np.ndarray) -> Tensor:
        b, frames = x.shape[:2]
        keep = T.Tensor(frame_mask[:, :, None, None], dtype=x.dtype)
        h = self.spatial(x * keep) * keep
        pad = self._kernel // 2
        if pad:
            zeros = T.Tensor(np.zeros((b, pad) + h.shape[2:]), dtype=x.dtype)
            h = T.concat([zeros, h, zeros], axis=1)
        # all kernel taps in one product: (B, T, N, k*d) @ (k*d, d)
        taps = T.concat([h[:, j : j + frames] for j in range(self._kernel)], axis=-1)
        weight = T.reshape(self.temporal_w, (-1, self.temporal_w.shape[-1]))
        out = T.gelu(T.matmul(taps, weight) + self.temporal_b) * keep
        return T.mean(out, axis=2)


class Fusion(Module):
    def __init__(self, rng: np.random.Generator, d_gcn: int, d_model: int):
        self.proj = Linear(rng, len(PARTS) * d_gcn, d_model)

    def __call__(self, feats: list[Tensor]) -> Tensor:
        frames = {f.shape[:2] for f in feats}
        if len(frames) != 1:
            raise ShapeError(f"part features disagree on (batch, frames): {sorted(frames)}")
        return self.proj(T.concat(feats, axis=-1))


# ---------------------------------------------------------------------------
# transformer blocks
# ---------------------------------------------------------------------------

class EncoderLayer(Module):
    def __init__(self, rng, d_model: int, heads: int, d_ff: int):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, heads)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor, bias) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, bias)
        return x + self.ff(self.norm2(x))


class DecoderLayer(Module):
    def __init__(self, rng, d_model: int, heads: int, d_ff: int):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(rng, d_model, heads)
        self.norm2 = LayerNorm(d_model)
        self.cross = MultiHeadAttention(rng, d_model, heads)
        self.norm3 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor, memory: Tensor, self_bias, cross_bias) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, self_bias)
        x = x + self.cross(self.norm2(x), memory, cross_bias)
        return x + self.ff(self.norm3(x))


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig, layers: int):
        self.layers = [EncoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff) for _ in range(layers)]
        self.norm = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, bias) -> Tensor:
        for layer in self.layers:
            x = layer(x, bias)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, rng, cfg: ModelConfig, layers: int):
        self.layers = [DecoderLayer(rng, cfg.d_model, cfg.heads, cfg.d_ff) for _ in range(layers)]
        self.norm = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, memory: Tensor, self_bias, cross_bias) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory, self_bias, cross_bias)
        return self.norm(x)


# ---------------------------------------------------------------------------
# loop state
# ---------------------------------------------------------------------------

@dataclass
class LoopState:
    """Cross-modal states of one forward pass.

    ``snapshots[k]`` holds ``H_s2t`` after refinement ``k + 1``; the
    initial state is never included. ``final`` is the state the LM head reads
    (the last snapshot, or the plain pass when ``loops == 0``).
    """

    sign: Tensor
    final: Tensor
    snapshots: list[Tensor] = field(default_factory=list)
    iteration: int = 0
    encoder_calls: int = 0
    decoder_calls: int = 0


def _key_bias(mask: np.ndarray, dtype) -> np.ndarray:
    return np.where(mask, 0.0, NEG).astype(dtype)


class SignModel(Module):
    """Everything trainable: skeleton front end, transformer, LM and alignment heads."""

    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        cfg.validate()
        self._cfg = cfg
        m, lp = cfg.model, cfg.loop
        self.parts = [PartEncoder(rng, p, m.d_gcn, m.temporal_kernel) for p in PARTS]
        self.fusion = Fusion(rng, m.d_gcn, m.d_model)
        self.encoder = Encoder(rng, m, lp.enc_layers)
        self.decoder = Decoder(rng, m, lp.dec_layers)
        self.token_embedding = param(rng.normal(scale=m.d_model**-0.5, size=(vocab_size, m.d_model)))
        self.lm_norm = LayerNorm(m.d_model)
        self.lm_out = None if m.tie_embeddings else Linear(rng, m.d_model, vocab_size)
        self.injector = None
        if lp.variant == "encoder-decoder":
            if lp.injection == "attention":
                self.inject_norm = LayerNorm(m.d_model)
                self.injector = MultiHeadAttention(rng, m.d_model, m.heads)
            elif lp.injection == "add" and lp.add_length_align:
                self.injector = Linear(rng, m.d_model, m.d_model)
        self.align = AlignmentHead(rng, m.d_model, cfg.align)
        self._vocab_size = vocab_size

    @property
    def config(self) -> RunConfig:
        return self._cfg

    # -- front end ----------------------------------------------------------
    def encode_parts(self, batch: Batch) -> list[Tensor]:
        out = []
        for p, enc in zip(PARTS, self.parts):
            out.append(enc(T.Tensor(batch.parts[p]), batch.frame_mask))
        return out

    def sign_features(self, batch: Batch) -> Tensor:
        s = self.fusion(self.encode_parts(batch))
        return s + T.Tensor(sinusoid(s.shape[1], s.shape[2]), dtype=s.dtype)

    def embed_text(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if np.any(tokens < 0) or np.any(tokens >= self._vocab_size):
            raise DataError(f"token id outside vocabulary of size {self._vocab_size}")
        e = T.take(self.token_embedding, tokens) * float(np.sqrt(self._cfg.model.d_model))
        return e + T.Tensor(sinusoid(tokens.shape[1], e.shape[2]), dtype=e.dtype)

    def lm_head(self, h: Tensor) -> Tensor:
        h = self.lm_norm(h)
        if self.lm_out is None:
            return T.matmul(h, T.transpose(self.token_embedding, (1, 0)))
        return self.lm_out(h)

    # -- looping ------------------------------------------------------------
    def forward(self, batch: Batch, tokens: np.ndarray | None = None, rng=None, train: bool = False) -> LoopState:
        sign = self.sign_features(batch)
        tokens = batch.tokens_in if tokens is None else tokens
        text = self.embed_text(tokens)
        text_mask = batch.text_mask if tokens is batch.tokens_in else np.ones(tokens.shape, bool)
        return self.loop(sign, batch.frame_mask, text, text_mask, rng=rng, train=train)

    def loop(self, sign: Tensor, frame_mask: np.ndarray, text: Tensor, text_mask: np.ndarray, rng=None, train=False) -> LoopState:
        variant = self._cfg.loop.variant
        if variant == "encoder-decoder":
            return self._loop_encdec(sign, frame_mask, text, text_mask, rng, train)
        if variant == "encoder":
            return self._loop_enc(sign, frame_mask, text, text_mask, rng, train)
        return self._loop_dec(sign, frame_mask, text, text_mask, rng, train)

    def _extra(self, x: Tensor, rng, train: bool) -> Tensor:
        mode = self._cfg.loop.extra_feature
        if mode == "noise" and train:
            if rng is None:
                raise ConfigError("noise injection needs a random generator")
            return x + T.Tensor(rng.normal(scale=self._cfg.loop.noise_std, size=x.shape), dtype=x.dtype)
        if mode == "temporal":
            return x + T.Tensor(0.1 * sinusoid(x.shape[1], x.shape[2])[::-1].copy(), dtype=x.dtype)
        return x

    def _plain_biases(self, frame_mask, text_len, dtype):
        enc = _key_bias(frame_mask, dtype)[:, None, None, :]
        causal = attention_bias(None, causal_len=text_len, dtype=dtype)
        return enc, causal, enc

    def _loop_encdec(self, sign, frame_mask, text, text_mask, rng, train) -> LoopState:
        lp = self._cfg.loop
        dtype = sign.dtype
        enc_bias, self_bias, cross_bias = self._plain_biases(frame_mask, text.shape[1], dtype)
        state = LoopState(sign=sign, final=None)
        h = self.decoder(text, self.encoder(sign, enc_bias), self_bias, cross_bias)
        state.encoder_calls, state.decoder_calls = 1, 1
        for i in range(1, lp.loops + 1):
            s_i = self._extra(sign, rng, train)
            memory, e_bias, c_bias = self._inject(s_i, h, frame_mask, text_mask, dtype)
            h = self.decoder(text, self.encoder(memory, e_bias), self_bias, c_bias)
            state.encoder_calls += 1
            state.decoder_calls += 1
            state.snapshots.append(h)
            state.iteration = i
        state.final = h
        return state

    def _inject(self, sign, h, frame_mask, text_mask, dtype):
        """Combine the sign sequence with the previous cross-modal state."""
        lp = self._cfg.loop
        b, tf, _ = sign.shape
        tt = h.shape[1]
        frame_bias = _key_bias(frame_mask, dtype)
        if lp.injection == "concat":
            memory = T.concat([sign, h], axis=1)
            # Frames attend to frames; state position t attends to frames and
            # states <= t. This keeps decoding prefix-causal under teacher forcing.
            n = tf + tt
            enc = np.zeros((b, 1, n, n), dtype=dtype)
            enc[:, 0, :tf, :tf] += frame_bias[:, None, :]
            enc[:, 0, :tf, tf:] = NEG
            enc[:, 0, tf:, :tf] += frame_bias[:, None, :]
            enc[:, 0, tf:, tf:] += np.triu(np.full((tt, tt), NEG, dtype=dtype), k=1)
            cross = enc[:, :, tf:, :].copy()
            return memory, enc, cross
        bias = frame_bias[:, None, None, :]
        if lp.injection == "add":
            if tf == tt:
                return sign + h, bias, bias
            if not lp.add_length_align:
                raise ConfigError(
                    f"add injection needs equal lengths (frames={tf}, text={tt}); "
                    "enable loop.add_length_align to project the state onto the frame axis"
                )
            # only the first state position is independent of later tokens
            summary = self.injector(h[:, 0:1, :])
            return sign + summary, bias, bias
        # attention: frames attend over themselves plus the first state position
        keys = T.concat([sign, h[:, 0:1, :]], axis=1)
        key_bias = np.concatenate([frame_bias, np.zeros((b, 1), dtype=dtype)], axis=1)[:, None, None, :]
        mixed = self.injector(self.inject_norm(sign), self.inject_norm(keys), key_bias)
        return sign + mixed, bias, bias

    def _loop_enc(self, sign, frame_mask, text, text_mask, rng, train) -> LoopState:
        lp = self._cfg.loop
        enc_bias, self_bias, cross_bias = self._plain_biases(frame_mask, text.shape[1], sign.dtype)
        state = LoopState(sign=sign, final=None)
        hs = self.encoder(sign, enc_bias)
        state.encoder_calls = 1
        frozen = self.decoder.detached() if lp.loops > 1 else None
        for i in range(1, lp.loops + 1):
            hs = self.encoder(hs + self._extra(sign, rng, train), enc_bias)
            state.encoder_calls += 1
            state.iteration = i
            if i < lp.loops:
                # intermediate decode: gradients reach the encoder, never the decoder weights
                state.snapshots.append(frozen(text, hs, self_bias, cross_bias))
                state.decoder_calls += 1
        final = self.decoder(text, hs, self_bias, cross_bias)
        state.decoder_calls += 1
        if lp.loops >= 1:
            state.snapshots.append(final)
        state.final = final
        return state

    def _loop_dec(self, sign, frame_mask, text, text_mask, rng, train) -> LoopState:
        lp = self._cfg.loop
        enc_bias, self_bias, cross_bias = self._plain_biases(frame_mask, text.shape[1], sign.dtype)
        state = LoopState(sign=sign, final=None)
        hs = self.encoder(sign, enc_bias)
        state.encoder_calls = 1
        h = self.decoder(text, hs, self_bias, cross_bias)
        state.decoder_calls = 1
        for i in range(1, lp.loops + 1):
            h = self.decoder(self._extra(h, rng, train), hs, self_bias, cross_bias)
            state.decoder_calls += 1
            state.snapshots.append(h)
            state.iteration = i
        state.final = h
        return state

    # -- inference ----------------------------------------------------------
    def greedy_decode(self, batch: Batch, max_len: int) -> np.ndarray:
        """Autoregressive decoding from ``<bos>``; returns (B, max_len) token ids."""
        from .data import Vocabulary

        b = batch.size
        with T.no_grad():
            sign = self.sign_features(batch)
            prefix = np.full((b, 1), Vocabulary.bos_id, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            out = np.full((b, max_len), Vocabulary.pad_id, dtype=np.int64)
            for step in range(max_len):
                text = self.embed_text(prefix)
                state = self.loop(sign, batch.frame_mask, text, np.ones(prefix.shape, bool))
                logits = self.lm_head(state.final[:, -1:, :]).data[:, 0]
                nxt = np.where(done, Vocabulary.pad_id, logits.argmax(-1))
                out[:, step] = nxt
                done |= nxt == Vocabulary.eos_id
                if done.all():
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        return out
