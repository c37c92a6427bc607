"""Synthetic ICL benchmark, end-to-end training, and the cost model.

The task is a key-value lookup dressed as few-shot ICL: each sample carries
six example chunks (task, key, SEP, value); two share the target's task id
and one of those binds the target key to the right value, while the four
irrelevant examples bind the same key to conflicting values under other
task ids. Answering requires finding the example that matches both the task
and the key, which is exactly what compression + retrieval must learn.

Training differentiates through the whole pipeline: hierarchies are rebuilt
inside the graph every step so the autoregressive loss reaches the
compression and retrieval forwards by full backpropagation through time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .compressor import build_hierarchy, hierarchy_depth
from .memstore import HierDatabase
from .model import ModelConfig, TransformerModel, causal_mask
from .retriever import (RetrievalConfig, RetrievalState, encode_retrieval,
                        soft_prefix, sparse_retrieve)

PAD, MEM, RET, CALL_RETRIEVAL, SEP, EOS = 0, 1, 2, 3, 4, 5
N_SPECIALS = 6


class DatasetError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, last_good: dict[str, np.ndarray]):
        super().__init__(f"non-finite loss at step {step}; aborting with last good weights")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class VocabSpec:
    n_tasks: int = 32
    n_keys: int = 12
    n_values: int = 8

    def __post_init__(self):
        if self.n_tasks < 3:
            raise DatasetError("need at least 3 task families")
        if self.n_keys < 2 or self.n_values < 2:
            raise DatasetError("vocab too small to guarantee conflicting bindings")

    @property
    def vocab_size(self) -> int:
        return N_SPECIALS + self.n_tasks + self.n_keys + self.n_values

    def task_token(self, i: int) -> int:
        return N_SPECIALS + i

    def key_token(self, i: int) -> int:
        return N_SPECIALS + self.n_tasks + i

    def value_token(self, i: int) -> int:
        return N_SPECIALS + self.n_tasks + self.n_keys + i

    @property
    def train_families(self) -> list[int]:
        return list(range(self.n_tasks - 1))

    @property
    def test_family(self) -> int:
        return self.n_tasks - 1


@dataclass
class IclExample:
    task_id: int
    question: list[int]   # token ids
    answer: list[int]
    relevant: bool

    def chunk_tokens(self) -> list[int]:
        return self.question + [SEP] + self.answer


@dataclass
class IclSample:
    examples: list[IclExample]
    target_task: int
    target_question: list[int]
    target_answer: list[int]

    def relevant_positions(self) -> list[int]:
        return [i for i, ex in enumerate(self.examples) if ex.relevant]


def _make_sample(rng: np.random.Generator, vs: VocabSpec, family: int) -> IclSample:
    key = int(rng.integers(vs.n_keys))
    value = int(rng.integers(vs.n_values))
    other_keys = [k for k in range(vs.n_keys) if k != key]
    key2 = int(rng.choice(other_keys))
    value2 = int(rng.integers(vs.n_values))
    t = vs.task_token(family)
    examples = [
        IclExample(family, [t, vs.key_token(key)], [vs.value_token(value)], True),
        IclExample(family, [t, vs.key_token(key2)], [vs.value_token(value2)], True),
    ]
    other_families = [f for f in range(vs.n_tasks) if f != family]
    other_values = [v for v in range(vs.n_values) if v != value]
    for _ in range(4):
        f = int(rng.choice(other_families))
        v = int(rng.choice(other_values))
        examples.append(IclExample(
            f, [vs.task_token(f), vs.key_token(key)], [vs.value_token(v)], False))
    rng.shuffle(examples)
    return IclSample(examples=examples, target_task=family,
                     target_question=[t, vs.key_token(key)],
                     target_answer=[vs.value_token(value)])


def gen_icl_dataset(seed: int, n_train: int, n_test: int,
                    vocab_spec: VocabSpec) -> tuple[list[IclSample], list[IclSample], dict]:
    """Deterministic synthetic dataset; test targets come only from a task
    family never used as a training target."""
    rng = np.random.default_rng(seed)
    train = [_make_sample(rng, vocab_spec,
                          int(rng.choice(vocab_spec.train_families)))
             for _ in range(n_train)]
    test = [_make_sample(rng, vocab_spec, vocab_spec.test_family)
            for _ in range(n_test)]
    lens = [sum(len(ex.chunk_tokens()) for ex in s.examples)
            + len(s.target_question) + len(s.target_answer) + 1
            for s in train + test] or [0]
    stats = {
        "n_train": n_train,
        "n_test": n_test,
        "mean_token_length": float(np.mean(lens)),
        "answer_vocab": vocab_spec.n_values,
        "train_families": vocab_spec.train_families,
        "test_family": vocab_spec.test_family,
    }
    return train, test, stats


def save_dataset(samples: Sequence[IclSample], path: str) -> None:
    """Line-delimited records: 6 example rows plus one target row per sample."""
    with open(path, "w") as f:
        for i, s in enumerate(samples):
            for ex in s.examples:
                f.write(json.dumps({
                    "sample": i, "task_id": ex.task_id, "question": ex.question,
                    "answer": ex.answer,
                    "role": "relevant" if ex.relevant else "irrelevant"}) + "\n")
            f.write(json.dumps({
                "sample": i, "task_id": s.target_task, "question": s.target_question,
                "answer": s.target_answer, "role": "target"}) + "\n")


def load_dataset(path: str) -> list[IclSample]:
    groups: dict[int, list[dict]] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            groups.setdefault(rec["sample"], []).append(rec)
    samples = []
    for idx in sorted(groups):
        examples, target = [], None
        for rec in groups[idx]:
            if rec["role"] == "target":
                target = rec
            else:
                examples.append(IclExample(rec["task_id"], rec["question"],
                                           rec["answer"], rec["role"] == "relevant"))
        if target is None or len(examples) != 6:
            raise DatasetError(f"malformed sample {idx} in {path}")
        samples.append(IclSample(examples=examples, target_task=target["task_id"],
                                 target_question=target["question"],
                                 target_answer=target["answer"]))
    return samples


# ---------------------------------------------------------------------------
# training configuration and cost model


@dataclass
class TrainConfig:
    seed: int = 0
    k: int = 2
    top_c: int = 2
    num_ret_tokens: int = 1
    lr: float = 3e-3
    lr_min: float = 1e-4
    batch_size: int = 8
    epochs: int = 128
    pipeline_epochs: int = 4
    checkpointing: bool = False
    aux_full_context: bool = True
    answer_weight: float = 1.0
    freeze_task_embeddings: bool = True
    task_noise: float = 1.0
    noise_ramp: tuple[float, float] = (0.3, 0.7)
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 128
    eval_samples: int = 50
    eval_every: int = 0
    vocab: VocabSpec = field(default_factory=VocabSpec)

    def __post_init__(self):
        for name in ("k", "top_c", "num_ret_tokens", "batch_size", "d_model",
                     "n_layers", "n_heads", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.noise_ramp[0] <= self.noise_ramp[1] <= 1.0):
            raise ValueError("noise_ramp must be 0 <= start <= end <= 1")

    def retrieval_config(self) -> RetrievalConfig:
        return RetrievalConfig(num_ret_tokens=self.num_ret_tokens, top_c=self.top_c)


def make_model(vs: VocabSpec, cfg: TrainConfig) -> TransformerModel:
    mc = ModelConfig(vocab_size=vs.vocab_size, d_model=cfg.d_model,
                     n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                     max_positions=cfg.max_positions,
                     mem_id=MEM, ret_id=RET, call_retrieval_id=CALL_RETRIEVAL,
                     pad_id=PAD, eos_id=EOS)
    return TransformerModel(mc, seed=cfg.seed)


def count_forwards(n: int, k: int) -> int:
    """Forward passes to compress one n-token chunk and run one retrieval
    token through encoding plus a full descent: 2L + 2."""
    return 2 * hierarchy_depth(n, k) + 2


def activation_estimate(t: int, n: int, d: int) -> int:
    """Retained-activation scale for T forwards of length n at width d."""
    if t < 1 or n < 1 or d < 1:
        raise ValueError("activation_estimate needs positive arguments")
    return t * n * n + t * n * d


# ---------------------------------------------------------------------------
# pipeline


def _answer_loss(model: TransformerModel, items: list, question_len: int,
                 answer: list[int], prefix_rows: int = 0) -> Tensor:
    """Autoregressive NLL over the answer tokens only.

    ``items`` must end with [question..., SEP, answer...]; positions of the
    answer tokens are predicted from the hidden states one step earlier.
    """
    n = prefix_rows + question_len + 1 + len(answer)
    out = model.forward(items, causal_mask(n))
    first = prefix_rows + question_len  # hidden row of SEP predicts answer[0]
    pred_rows = ag.slice_rows(out.hidden, first, first + len(answer))
    logits = ag.matmul(pred_rows, ag.transpose(model.params["tok_emb"]))
    return ag.cross_entropy_from_logits(logits, answer)


def build_sample_db(sample: IclSample, model: TransformerModel, k: int,
                    checkpoint: bool = False) -> HierDatabase:
    """One chunk per ICL example; chunk id equals example position."""
    db = HierDatabase(factor=k, d_model=model.config.d_model)
    for ex in sample.examples:
        db.put_chunk(build_hierarchy(ex.chunk_tokens(), k, model, checkpoint=checkpoint))
    return db


def pipeline_forward(sample: IclSample, model: TransformerModel,
                     cfg: TrainConfig) -> tuple[Tensor, list[RetrievalState]]:
    """compress -> retrieve -> predict, all inside one graph."""
    db = build_sample_db(sample, model, cfg.k, checkpoint=cfg.checkpointing)
    states = encode_retrieval(sample.target_question, cfg.num_ret_tokens, model)
    rcfg = cfg.retrieval_config()
    finals = [sparse_retrieve(db, st, rcfg, model) for st in states]
    prefix = soft_prefix(finals)
    items: list = [prefix] + sample.target_question + [SEP] + sample.target_answer
    loss = _answer_loss(model, items, len(sample.target_question),
                        sample.target_answer, prefix_rows=prefix.data.shape[0])
    return loss, finals


def full_context_loss(sample: IclSample, model: TransformerModel) -> Tensor:
    """Next-token NLL over the whole concatenated sequence.

    Dense supervision (every position, not just the final answer) is what
    makes the key->value copying circuit trainable from scratch: each
    in-context example is itself a lookup exercise.
    """
    dense, _ = full_context_losses(sample, model)
    return dense


def full_context_losses(sample: IclSample, model: TransformerModel) -> tuple[Tensor, Tensor]:
    """(dense LM loss, answer-token loss) from one forward pass.

    The dense term keeps every position supervised; the answer term
    re-weights the one position the benchmark actually scores, which is
    otherwise a 1/len(seq) sliver of the gradient.
    """
    ctx: list[int] = []
    for ex in sample.examples:
        ctx.extend(ex.chunk_tokens())
    seq: list[int] = ctx + sample.target_question + [SEP] + sample.target_answer
    out = model.forward(seq, causal_mask(len(seq)))
    pred_rows = ag.slice_rows(out.hidden, 0, len(seq) - 1)
    logits = ag.matmul(pred_rows, ag.transpose(model.params["tok_emb"]))
    dense = ag.cross_entropy_from_logits(logits, seq[1:])
    n_ans = len(sample.target_answer)
    ans_rows = ag.slice_rows(logits, len(seq) - 1 - n_ans, len(seq) - 1)
    ans = ag.cross_entropy_from_logits(ans_rows, sample.target_answer)
    return dense, ans


def top_level_match(sample: IclSample, finals: Sequence[RetrievalState]) -> bool:
    """True when every relevant chunk is in the top-C set at the top level
    (union over retrieval tokens)."""
    selected: set[int] = set()
    for st in finals:
        if st.trace:
            selected.update(r.chunk_id for r in st.trace[0].selected)
    return set(sample.relevant_positions()) <= selected


def instrument_forward_count(chunk: Sequence[int], query: Sequence[int],
                             k: int, model: TransformerModel) -> int:
    """Actual forwards for: build one hierarchy, encode one retrieval token,
    and descend to the bottom. Must equal count_forwards(len(chunk), k)."""
    model.reset_forward_count()
    with ag.no_grad():
        db = HierDatabase(factor=k, d_model=model.config.d_model)
        db.put_chunk(build_hierarchy(list(chunk), k, model))
        state = encode_retrieval(list(query), 1, model)[0]
        sparse_retrieve(db, state, RetrievalConfig(top_c=1), model)
    return model.forward_count


# ---------------------------------------------------------------------------
# optimizer and training loop


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        """Apply accumulated grads; returns the global gradient norm."""
        self.t += 1
        sq = 0.0
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            sq += float((g * g).sum())
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return math.sqrt(sq)


@dataclass
class EvalReport:
    accuracy: float
    zero_shot_accuracy: float
    full_context_accuracy: float
    match_rate: float
    ordering_held: bool
    random_match_baseline: float
    n_samples: int
    per_sample: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def _generate_answer(model: TransformerModel, context: list[int],
                     n_answer: int, prefix: Tensor | None = None) -> list[int]:
    return model.generate(context, n_answer, prefix_embeddings=prefix,
                          stop_at_eos=False)


def evaluate(model: TransformerModel, samples: Sequence[IclSample],
             cfg: TrainConfig, keep_traces: bool = False,
             modes: tuple[str, ...] = ("zero_shot", "full_context", "cr")) -> EvalReport:
    """Three-way bracketing: zero-shot, full-context, compressor-retriever."""
    zs_hits = fc_hits = cr_hits = matches = 0
    per_sample: list[dict] = []
    rcfg = cfg.retrieval_config()
    for si, s in enumerate(samples):
        q = s.target_question + [SEP]
        ans = s.target_answer
        rec: dict = {"sample": si}
        if "zero_shot" in modes:
            zs = _generate_answer(model, q, len(ans))
            zs_hits += zs == ans
            rec["zero_shot"] = zs
        if "full_context" in modes:
            ctx: list[int] = []
            for ex in s.examples:
                ctx.extend(ex.chunk_tokens())
            fc = _generate_answer(model, ctx + q, len(ans))
            fc_hits += fc == ans
            rec["full_context"] = fc
        if "cr" in modes:
            with ag.no_grad():
                db = build_sample_db(s, model, cfg.k)
                states = encode_retrieval(s.target_question, cfg.num_ret_tokens, model)
                finals = [sparse_retrieve(db, st, rcfg, model) for st in states]
                prefix = soft_prefix(finals)
            cr = _generate_answer(model, q, len(ans), prefix=prefix)
            cr_hits += cr == ans
            matches += top_level_match(s, finals)
            rec["cr"] = cr
            rec["selected_top_level"] = sorted(
                {r.chunk_id for st in finals for r in (st.trace[0].selected if st.trace else [])})
            rec["relevant"] = s.relevant_positions()
            if keep_traces:
                from .retriever import format_trace
                rec["trace"] = [format_trace(st) for st in finals]
        rec["answer"] = ans
        per_sample.append(rec)
    n = max(len(samples), 1)
    zs_acc, fc_acc, cr_acc = zs_hits / n, fc_hits / n, cr_hits / n
    # choosing 2 of 6 chunks uniformly: 1 / C(6,2)
    return EvalReport(
        accuracy=cr_acc, zero_shot_accuracy=zs_acc, full_context_accuracy=fc_acc,
        match_rate=matches / n, ordering_held=zs_acc <= cr_acc <= fc_acc,
        random_match_baseline=1.0 / 15.0, n_samples=len(samples),
        per_sample=per_sample)


def train(model: TransformerModel, train_set: Sequence[IclSample],
          test_set: Sequence[IclSample], cfg: TrainConfig,
          log_path: str | None = None,
          progress: bool = False) -> dict:
    """Full-BPTT training loop; deterministic given seed and single thread.

    Returns a history dict with per-step loss/grad-norm and per-epoch
    held-out accuracy and match rate. The epochs=0 case returns immediately
    with the initial weights untouched.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    history: dict = {"steps": [], "epochs": []}
    log_f = open(log_path, "w") if log_path else None
    last_good = {k: v.data.copy() for k, v in model.params.items()}
    step = 0

    tok_emb = model.params["tok_emb"]
    task_ids = np.array([cfg.vocab.task_token(f) for f in range(cfg.vocab.n_tasks)])
    pristine_task = tok_emb.data[task_ids].copy()
    noise_scale = float(pristine_task.std()) if pristine_task.size else 0.0
    updates_per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))
    total_updates = max(1, cfg.epochs * updates_per_epoch)
    r0, r1 = cfg.noise_ramp

    def schedules(update_idx: int) -> tuple[float, float]:
        """(learning rate, task-embedding noise sigma) at this update."""
        frac = min(update_idx / total_updates, 1.0)
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac)) + cfg.lr_min
        ramp = 1.0 if r1 <= r0 else min(max((frac - r0) / (r1 - r0), 0.0), 1.0)
        sigma = cfg.task_noise * noise_scale * ramp
        return lr, sigma

    def apply_noise(sigma: float) -> None:
        if cfg.freeze_task_embeddings and sigma > 0.0:
            tok_emb.data[task_ids] = pristine_task + rng.normal(
                0.0, sigma, size=pristine_task.shape)

    def restore_task_rows() -> None:
        if cfg.freeze_task_embeddings:
            tok_emb.data[task_ids] = pristine_task

    try:
        for epoch in range(cfg.epochs):
            # The retrieval pipeline costs ~2L+2 forwards per chunk, so it
            # joins the objective only for the final epochs, once the
            # full-context circuit exists for it to distill against.
            use_pipeline = epoch >= cfg.epochs - cfg.pipeline_epochs
            order = rng.permutation(len(train_set))
            model.zero_grads()
            accum = 0
            opt.lr, sigma = schedules(step // cfg.batch_size)
            apply_noise(sigma)
            for idx in order:
                sample = train_set[int(idx)]
                loss: Tensor | None = None
                if cfg.aux_full_context:
                    dense, ans = full_context_losses(sample, model)
                    loss = ag.add(dense, ag.scale(ans, cfg.answer_weight))
                if use_pipeline or not cfg.aux_full_context:
                    pipe, _ = pipeline_forward(sample, model, cfg)
                    loss = pipe if loss is None else ag.add(loss, pipe)
                if not np.isfinite(loss.data):
                    restore_task_rows()
                    raise DivergenceError(step, last_good)
                ag.backward(loss)
                accum += 1
                step += 1
                if accum == cfg.batch_size:
                    for p in model.parameters():
                        if p.grad is not None:
                            p.grad /= accum
                    if cfg.freeze_task_embeddings and tok_emb.grad is not None:
                        tok_emb.grad[task_ids] = 0.0
                    gnorm = opt.step()
                    model.zero_grads()
                    accum = 0
                    rec = {"step": step, "loss": float(loss.data), "grad_norm": gnorm}
                    history["steps"].append(rec)
                    if log_f:
                        log_f.write(json.dumps(rec) + "\n")
                    if progress and len(history["steps"]) % 200 == 0:
                        print(f"  step {step}: loss {float(loss.data):.4f} "
                              f"grad_norm {gnorm:.4f} lr {opt.lr:.2e} sigma {sigma:.3f}")
                    opt.lr, sigma = schedules(step // cfg.batch_size)
                    apply_noise(sigma)
            if accum:
                for p in model.parameters():
                    if p.grad is not None:
                        p.grad /= accum
                if cfg.freeze_task_embeddings and tok_emb.grad is not None:
                    tok_emb.grad[task_ids] = 0.0
                opt.step()
                model.zero_grads()
            restore_task_rows()
            do_eval = (epoch == cfg.epochs - 1 or
                       (cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0))
            if do_eval:
                eval_subset = list(test_set)[:cfg.eval_samples]
                rep = evaluate(model, eval_subset, cfg, modes=("cr",))
                erec = {"epoch": epoch, "accuracy": rep.accuracy,
                        "match_rate": rep.match_rate}
                history["epochs"].append(erec)
                if log_f:
                    log_f.write(json.dumps(erec) + "\n")
                if progress:
                    print(f"epoch {epoch}: held-out cr accuracy {rep.accuracy:.3f} "
                          f"match rate {rep.match_rate:.3f}")
            last_good = {k: v.data.copy() for k, v in model.params.items()}
    finally:
        restore_task_rows()
        if log_f:
            log_f.close()
    return history
