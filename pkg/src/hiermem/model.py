"""Decoder-only transformer over the autograd engine.

The forward pass accepts a mix of token ids and raw embedding rows (memory
and retrieval embeddings are fed back in as soft tokens), an arbitrary
attention mask, and explicit position indices. It returns the last hidden
states and the head-averaged last-layer attention matrix, which drives
retrieval.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, ShapeError


class WindowOverflow(RuntimeError):
    """Forward input longer than max_positions; caller must compress first."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_positions: int = 512
    ffn_mult: int = 4
    mix_window: int = 3
    mem_id: int = 1
    ret_id: int = 2
    call_retrieval_id: int = 3
    pad_id: int = 0
    eos_id: int = 5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        specials = [self.pad_id, self.mem_id, self.ret_id, self.call_retrieval_id]
        if len(set(specials)) != len(specials):
            raise ValueError(f"special token ids must be distinct, got {specials}")
        if max(specials) >= self.vocab_size:
            raise ValueError("special token id outside vocabulary")
        if self.mix_window < 0:
            raise ValueError("mix_window must be non-negative")


class AttentionMask:
    """Boolean allow-matrix (query x key), materialized lazily.

    Large structural masks (segmented compression masks) are described by a
    builder closure and only expanded to a dense matrix when a real forward
    needs them.
    """

    def __init__(self, allow: np.ndarray | None = None, *,
                 builder: Callable[[], np.ndarray] | None = None,
                 size: int | None = None):
        if (allow is None) == (builder is None):
            raise ValueError("provide exactly one of allow or builder")
        if allow is not None:
            allow = np.asarray(allow, dtype=bool)
            self._allow: np.ndarray | None = allow
            self.size = allow.shape[0]
            self._validate(allow)
        else:
            self._allow = None
            self._builder = builder
            if size is None:
                raise ValueError("size required with a builder")
            self.size = size

    @staticmethod
    def _validate(allow: np.ndarray) -> None:
        if allow.ndim != 2 or allow.shape[0] != allow.shape[1]:
            raise ShapeError(f"attention mask must be square, got {allow.shape}")
        if not np.all(np.diagonal(allow)):
            raise ValueError("attention mask diagonal must be all true")

    @property
    def allow(self) -> np.ndarray:
        if self._allow is None:
            dense = np.asarray(self._builder(), dtype=bool)
            self._validate(dense)
            if dense.shape[0] != self.size:
                raise ShapeError(f"mask builder produced {dense.shape}, expected {self.size}")
            self._allow = dense
        return self._allow


def causal_mask(n: int) -> AttentionMask:
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


@dataclass
class ForwardOutput:
    hidden: Tensor                      # n x d last hidden states
    last_layer_attention: np.ndarray    # n x n, head-averaged, detached
    logits: Tensor | None = None        # n x vocab when requested


def _init_weight(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


# Relative weight of the component shared between wq and wk at init; sized so
# the induced content-similarity logit (x C C^T y / sqrt(d_head)) starts O(1)
# for layer-normed inputs.
_QK_SHARED_SCALE = 0.3


class TransformerModel:
    """Pre-norm decoder-only transformer with tied input/output embeddings."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        # Scale discipline: token identity must dominate the residual stream
        # at init or the model memorizes sequences instead of learning to
        # match on content. Embeddings are unit-scale; matrices that read a
        # normalized stream (wq/wk/wv/w1) use 1/sqrt(d) so attention logits
        # start O(1); matrices that WRITE back into the residual stream
        # (wo/w2/mix) get an extra 1/sqrt(d) so their initial output is small
        # relative to the embeddings.
        s = c.d_model ** -0.5
        p: dict[str, Tensor] = {
            "tok_emb": _init_weight(rng, (c.vocab_size, c.d_model), 1.0),
            "pos_emb": _init_weight(rng, (c.max_positions, c.d_model), 1.0),
            "ln_f_g": Tensor(np.ones(c.d_model), requires_grad=True),
            "ln_f_b": Tensor(np.zeros(c.d_model), requires_grad=True),
        }
        for w in range(1, c.mix_window + 1):
            p[f"mix{w}"] = _init_weight(rng, (c.d_model, c.d_model), s * s)
        for i in range(c.n_layers):
            p[f"l{i}.ln1_g"] = Tensor(np.ones(c.d_model), requires_grad=True)
            p[f"l{i}.ln1_b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
            # wq and wk share a low-magnitude common component, so q.k
            # contains a content-similarity term (x C C^T y ~ x.y) from the
            # first forward. Pure independent random projections give
            # attention no reason to prefer matching content, and the
            # matching circuits then take far longer to emerge.
            shared = rng.normal(0.0, _QK_SHARED_SCALE * c.d_model ** -0.5,
                                size=(c.d_model, c.d_model))
            p[f"l{i}.wq"] = Tensor(rng.normal(0.0, s, (c.d_model, c.d_model)) + shared,
                                   requires_grad=True)
            p[f"l{i}.wk"] = Tensor(rng.normal(0.0, s, (c.d_model, c.d_model)) + shared,
                                   requires_grad=True)
            p[f"l{i}.wv"] = _init_weight(rng, (c.d_model, c.d_model), s)
            p[f"l{i}.wo"] = _init_weight(rng, (c.d_model, c.d_model), s * s)
            p[f"l{i}.ln2_g"] = Tensor(np.ones(c.d_model), requires_grad=True)
            p[f"l{i}.ln2_b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
            p[f"l{i}.w1"] = _init_weight(rng, (c.d_model, c.ffn_mult * c.d_model), s)
            p[f"l{i}.b1"] = Tensor(np.zeros(c.ffn_mult * c.d_model), requires_grad=True)
            p[f"l{i}.w2"] = _init_weight(rng, (c.ffn_mult * c.d_model, c.d_model), s * s)
            p[f"l{i}.b2"] = Tensor(np.zeros(c.d_model), requires_grad=True)
        self.params = p
        self.forward_count = 0

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grads(self) -> None:
        ag.zero_grads(self.parameters())

    def token_embedding(self, token_id: int) -> Tensor:
        return ag.embedding(self.params["tok_emb"], [token_id])

    def embed_tokens(self, tokens: Sequence[int]) -> Tensor:
        return ag.embedding(self.params["tok_emb"], list(tokens))

    def reset_forward_count(self) -> None:
        self.forward_count = 0

    # -- forward ------------------------------------------------------------

    def _assemble_input(self, items) -> Tensor:
        """Build the n x d input matrix from token ids and/or embedding rows."""
        if isinstance(items, Tensor):
            return items
        parts: list[Tensor] = []
        run: list[int] = []  # consecutive token ids, embedded in one lookup
        for it in items:
            if isinstance(it, Tensor):
                if run:
                    parts.append(self.embed_tokens(run))
                    run = []
                parts.append(_as_row(it) if it.data.ndim == 1 else it)
            else:
                run.append(int(it))
        if run:
            parts.append(self.embed_tokens(run))
        if len(parts) == 1:
            return parts[0]
        return ag.concat_rows(parts)

    def forward(self, items, mask: AttentionMask | None = None,
                positions: Sequence[int] | None = None,
                need_logits: bool = False) -> ForwardOutput:
        c = self.config
        x = self._assemble_input(items)
        n = x.data.shape[0]
        if n > c.max_positions:
            raise WindowOverflow(f"input length {n} exceeds max_positions {c.max_positions}")
        if x.data.shape[1] != c.d_model:
            raise ShapeError(f"input width {x.data.shape[1]} != d_model {c.d_model}")
        if mask is None:
            mask = causal_mask(n)
        if mask.size != n:
            raise ShapeError(f"mask size {mask.size} != input length {n}")
        if positions is None:
            positions = list(range(n))
        if len(positions) != n:
            raise ShapeError(f"{len(positions)} positions for {n} inputs")
        if max(positions) >= c.max_positions:
            raise WindowOverflow(f"position {max(positions)} exceeds max_positions")

        self.forward_count += 1
        allow = mask.allow
        p = self.params
        h = ag.add(x, ag.embedding(p["pos_emb"], list(positions)))
        # Local mixing: each row adds a linear transform of its w-th
        # predecessor row, but only where that predecessor is both visible
        # under the mask and positionally adjacent (position delta exactly w).
        # This folds short token n-grams (task+key pairs) into one embedding,
        # which single attention hops can then match on; without it the
        # conjunction of two adjacent tokens needs slow-to-form composed
        # attention circuits.
        pos_arr = np.asarray(positions)
        for w in range(1, min(c.mix_window, n - 1) + 1):
            gate = np.zeros((n, 1))
            adjacent = (pos_arr[w:] - pos_arr[:-w]) == w
            gate[w:, 0] = allow[np.arange(w, n), np.arange(n - w)] & adjacent
            if not gate.any():
                continue
            shifted = ag.concat_rows([
                Tensor(np.zeros((w, c.d_model))),
                ag.slice_rows(h, 0, n - w),
            ])
            h = ag.add(h, ag.mul(ag.matmul(shifted, p[f"mix{w}"]), Tensor(gate)))
        dh = c.d_model // c.n_heads
        inv_sqrt = 1.0 / np.sqrt(dh)
        last_attn: np.ndarray | None = None

        for i in range(c.n_layers):
            xn = ag.layer_norm(h, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            q = ag.matmul(xn, p[f"l{i}.wq"])
            k = ag.matmul(xn, p[f"l{i}.wk"])
            v = ag.matmul(xn, p[f"l{i}.wv"])
            head_outs = []
            head_attns = []
            for hd in range(c.n_heads):
                lo, hi = hd * dh, (hd + 1) * dh
                qh = ag.slice_cols(q, lo, hi)
                kh = ag.slice_cols(k, lo, hi)
                vh = ag.slice_cols(v, lo, hi)
                scores = ag.scale(ag.matmul(qh, ag.transpose(kh)), inv_sqrt)
                att = ag.masked_softmax(scores, allow)
                head_attns.append(att.data)
                head_outs.append(ag.matmul(att, vh))
            if i == c.n_layers - 1:
                last_attn = np.mean(head_attns, axis=0)
            attn_out = ag.matmul(ag.concat_cols(head_outs), p[f"l{i}.wo"])
            h = ag.add(h, attn_out)
            hn = ag.layer_norm(h, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            ff = ag.matmul(ag.gelu(ag.add(ag.matmul(hn, p[f"l{i}.w1"]), p[f"l{i}.b1"])),
                           p[f"l{i}.w2"])
            h = ag.add(h, ag.add(ff, p[f"l{i}.b2"]))

        h = ag.layer_norm(h, p["ln_f_g"], p["ln_f_b"])
        logits = ag.matmul(h, ag.transpose(p["tok_emb"])) if need_logits else None
        return ForwardOutput(hidden=h, last_layer_attention=last_attn, logits=logits)

    # -- generation ----------------------------------------------------------

    def generate(self, context: Sequence[int], max_new: int,
                 prefix_embeddings: Tensor | None = None,
                 stop_at_eos: bool = True) -> list[int]:
        """Greedy decoding; soft prefix embeddings occupy positions before the context."""
        out: list[int] = []
        tokens = list(context)
        n_prefix = 0 if prefix_embeddings is None else prefix_embeddings.data.shape[0]
        with ag.no_grad():
            for _ in range(max_new):
                items: list = []
                if prefix_embeddings is not None:
                    items.append(prefix_embeddings)
                items.extend(tokens)
                n = n_prefix + len(tokens)
                fo = self.forward(items, causal_mask(n))
                logits = ag.matmul(ag.slice_rows(fo.hidden, n - 1, n),
                                   ag.transpose(self.params["tok_emb"]))
                nxt = int(np.argmax(logits.data[0]))
                out.append(nxt)
                tokens.append(nxt)
                if stop_at_eos and nxt == self.config.eos_id:
                    break
        return out

    # -- checkpoint persistence ----------------------------------------------

    MAGIC = b"HMEM"
    VERSION = 1

    def save(self, path: str) -> None:
        cfg = self.config
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<I", self.VERSION))
            cfg_ints = [cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads,
                        cfg.max_positions, cfg.ffn_mult, cfg.mix_window,
                        cfg.mem_id, cfg.ret_id,
                        cfg.call_retrieval_id, cfg.pad_id, cfg.eos_id]
            f.write(struct.pack(f"<{len(cfg_ints)}I", *cfg_ints))
            f.write(struct.pack("<I", len(self.params)))
            for name in sorted(self.params):
                t = self.params[name]
                nb = name.encode()
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", t.data.ndim))
                f.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
                f.write(t.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "TransformerModel":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != cls.MAGIC:
                raise ValueError(f"bad checkpoint magic {magic!r}")
            (version,) = struct.unpack("<I", f.read(4))
            if version != cls.VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            ints = struct.unpack("<12I", f.read(48))
            cfg = ModelConfig(vocab_size=ints[0], d_model=ints[1], n_layers=ints[2],
                              n_heads=ints[3], max_positions=ints[4], ffn_mult=ints[5],
                              mix_window=ints[6],
                              mem_id=ints[7], ret_id=ints[8], call_retrieval_id=ints[9],
                              pad_id=ints[10], eos_id=ints[11])
            model = cls(cfg, seed=0)
            (count,) = struct.unpack("<I", f.read(4))
            for _ in range(count):
                (nlen,) = struct.unpack("<I", f.read(4))
                name = f.read(nlen).decode()
                (ndim,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
                n_elem = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(f.read(8 * n_elem), dtype="<f8").reshape(shape)
                if name not in model.params:
                    raise ValueError(f"unknown weight {name!r} in checkpoint")
                model.params[name] = Tensor(data.copy(), requires_grad=True)
        return model


def checkpoint_fingerprint(path: str) -> bytes:
    """sha256 of the checkpoint file bytes; ties databases to the weights."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.digest()


def _as_row(t: Tensor) -> Tensor:
    """View a 1-D embedding as a 1 x d matrix, preserving gradient flow."""
    if t.data.ndim == 2:
        return t
    out = Tensor(t.data.reshape(1, -1))

    def bw(g):
        if t.requires_grad:
            t.accumulate_grad(g.reshape(t.data.shape))

    return ag._record(out, (t,), bw)


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
