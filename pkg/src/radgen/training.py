"""Maximum-likelihood training with Adam, grouped learning rates,
per-epoch decay, and versioned checkpointing.

Two parameter groups carry distinct learning rates: the visual
extractor (1e-4 default) and everything else (5e-4 default), both
decayed by 0.8 per epoch. Checkpoints are binary containers of named
float64 tensors plus a JSON metadata record (epoch, optimizer step,
RNG state, vocabulary, resolved config); save -> load -> forward is
bit-identical, and resuming from epoch k reproduces the unbroken run
because the shuffle RNG state is part of the checkpoint.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from radgen import tensor as T
from radgen.corpus import PAD_ID, Corpus, Vocabulary, corpus_digest, images_array, tokenize
from radgen.dictionary import AnatomicalDictionary
from radgen.metrics import evaluate_suite
from radgen.model import ReportModel
from radgen.tensor import Tensor, zero_grads


def nll_loss(logits: Tensor, targets: np.ndarray, pad_id: int = PAD_ID,
             label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood over non-pad target positions."""
    targets = np.asarray(targets, dtype=np.int64)
    B, t, V = logits.shape
    if targets.shape != (B, t):
        raise ValueError(f"targets shape {targets.shape} vs logits {logits.shape}")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("all-pad batch has no targets to score")
    q = np.zeros((B, t, V))
    b_idx, t_idx = np.nonzero(keep)
    q[b_idx, t_idx, targets[b_idx, t_idx]] = 1.0
    if label_smoothing > 0.0:
        q = q * (1.0 - label_smoothing)
        q[b_idx, t_idx, :] += label_smoothing / V
    picked = (T.log_softmax_rows(logits) * q).sum()
    return picked * (-1.0 / count)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    tensors = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad**2).sum()) for p in tensors)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in tensors:
            p.grad = p.grad * scale
    return total


class Adam:
    """Textbook Adam with bias correction and per-group learning rates."""

    def __init__(self, groups: dict[str, dict[str, Tensor]], lr0: dict[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.groups = groups
        self.lr0 = dict(lr0)
        self.lr = dict(lr0)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}
        for params in groups.values():
            for name, p in params.items():
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def set_epoch(self, epoch: int, decay: float, warmup_epochs: int = 0) -> None:
        """lr_group(epoch) = lr0_group * decay**epoch, optional warmup ramp."""
        scale = decay**epoch
        if warmup_epochs > 0 and epoch < warmup_epochs:
            scale *= (epoch + 1) / warmup_epochs
        self.lr = {g: lr * scale for g, lr in self.lr0.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for group, params in self.groups.items():
            lr = self.lr[group]
            for name, p in params.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                if not np.all(np.isfinite(g)):
                    raise RuntimeError(f"non-finite gradient in parameter {name}")
                self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
                self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
                m_hat = self.m[name] / bc1
                v_hat = self.v[name] / bc2
                update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
                if self.weight_decay:
                    update = update + lr * self.weight_decay * p.data
                p.data = p.data - update

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            self.m[name] = tensors[f"optim.m.{name}"].copy()
            self.v[name] = tensors[f"optim.v.{name}"].copy()
        self.t = t


# checkpoint container -------------------------------------------------------

CKPT_MAGIC = b"RGCK"
CKPT_VERSION = 1
_TAG_F64 = 0
_TAG_BYTES = 1


@dataclass
class Checkpoint:
    version: int
    config_digest: str
    tensors: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(path, config_digest: str, tensors: dict[str, np.ndarray],
                    meta: dict) -> None:
    """Header (magic, version, config digest), then named tensor records:
    name length, name, dtype tag, rank, dims, raw little-endian values."""
    records = list(tensors.items())
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        digest = config_digest.encode("ascii")
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<I", len(records) + 1))
        for name, arr in records:
            _write_record(fh, name, _TAG_F64, np.asarray(arr, dtype=np.float64))
        _write_record(fh, "__meta__", _TAG_BYTES, meta_blob)


def _write_record(fh, name: str, tag: int, payload) -> None:
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<I", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", tag))
    if tag == _TAG_F64:
        dims = payload.shape
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())
    else:
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (dlen,) = struct.unpack("<I", fh.read(4))
        digest = fh.read(dlen).decode("ascii")
        (n_records,) = struct.unpack("<I", fh.read(4))
        tensors, meta = {}, {}
        for _ in range(n_records):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (tag,) = struct.unpack("<B", fh.read(1))
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            if tag == _TAG_F64:
                count = int(np.prod(dims)) if dims else 1
                data = np.frombuffer(fh.read(8 * count), dtype="<f8")
                tensors[name] = data.reshape(dims).astype(np.float64)
            elif tag == _TAG_BYTES:
                blob = fh.read(dims[0])
                if name == "__meta__":
                    meta = json.loads(blob.decode("utf-8"))
                else:
                    tensors[name] = blob
            else:
                raise ValueError(f"{path}: unknown record tag {tag}")
    return Checkpoint(version=version, config_digest=digest, tensors=tensors, meta=meta)


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


# training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: ReportModel
    vocab: Vocabulary
    history: list[dict] = field(default_factory=list)
    best_path: Path | None = None
    last_path: Path | None = None
    best_val: float = float("inf")


def pad_batch(vocab: Vocabulary, samples) -> tuple[np.ndarray, np.ndarray]:
    """BOS..EOS-framed id matrix split into decoder inputs and targets."""
    encoded = [vocab.encode_report(s.report) for s in samples]
    width = max(len(ids) for ids in encoded)
    mat = np.full((len(encoded), width), PAD_ID, dtype=np.int64)
    for i, ids in enumerate(encoded):
        mat[i, : len(ids)] = ids
    return mat[:, :-1], mat[:, 1:]


def batch_loss(model: ReportModel, samples, label_smoothing: float = 0.0) -> tuple[Tensor, int]:
    inp, tgt = pad_batch(model.vocab, samples)
    logits = model.forward(Tensor(images_array(samples)), inp)
    return nll_loss(logits, tgt, PAD_ID, label_smoothing), int((tgt != PAD_ID).sum())


def evaluate_split(model: ReportModel, samples, decode: str = "greedy",
                   beam: int | None = None) -> dict[str, float]:
    """NLG metric suite for decoded candidates against the references."""
    if decode == "greedy":
        cands = model.generate_greedy(samples)
    else:
        cands = model.generate(samples, beam=beam)
    refs = [tokenize(s.report) for s in samples]
    return evaluate_suite(cands, refs)


def validation_loss(model: ReportModel, samples, batch_size: int,
                    label_smoothing: float) -> float:
    total, tokens = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(samples), batch_size):
            batch = samples[lo : lo + batch_size]
            loss, n = batch_loss(model, batch, label_smoothing)
            total += float(loss.data) * n
            tokens += n
    return total / tokens


def build_vocab_for(corpus: Corpus, cfg, dictionary: AnatomicalDictionary) -> Vocabulary:
    train = corpus.split("train")
    if not train:
        raise ValueError("corpus has no training split")
    return Vocabulary.build(
        (s.report for s in train),
        min_freq=cfg["data.min_freq"],
        force_include=dictionary.entities,
    )


def train_model(cfg, corpus: Corpus, out_dir=None, resume_from=None,
                epochs: int | None = None, log=None) -> TrainResult:
    """Epoch loop: seeded shuffle, teacher-forced NLL, backward, clipped
    Adam step; end-of-epoch validation loss plus greedy-decode metrics;
    best-on-validation and latest checkpoints retained."""
    dict_file = cfg["model.dictionary_file"]
    dictionary = (
        AnatomicalDictionary.from_file(dict_file) if dict_file
        else AnatomicalDictionary.default()
    )
    epochs = cfg["training.epochs"] if epochs is None else epochs
    label_smoothing = cfg["training.label_smoothing"]
    batch_size = cfg["training.batch_size"]
    corp_digest = corpus_digest(corpus)

    start_epoch = 0
    best_val = float("inf")
    history: list[dict] = []
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.config_digest != cfg.digest():
            raise ValueError(
                "checkpoint/config digest mismatch: the checkpoint was written "
                f"with a different resolved configuration ({ck.config_digest[:12]} "
                f"vs {cfg.digest()[:12]})"
            )
        vocab = Vocabulary.from_full_tokens(ck.meta["vocab"])
        rng = restore_rng(ck.meta["rng_state"])
        model = ReportModel(cfg, vocab, np.random.default_rng(cfg["training.seed"]),
                            dictionary)
        params = model.named_parameters()
        for name, p in params.items():
            p.data = ck.tensors[name].copy()
        opt = _make_optimizer(cfg, model)
        opt.load_state_tensors(ck.tensors, ck.meta["optimizer_step"])
        start_epoch = ck.meta["epoch"] + 1
        best_val = ck.meta.get("best_val", float("inf"))
    else:
        rng = np.random.default_rng(cfg["training.seed"])
        vocab = build_vocab_for(corpus, cfg, dictionary)
        model = ReportModel(cfg, vocab, rng, dictionary)
        params = model.named_parameters()
        opt = _make_optimizer(cfg, model)

    train_samples = corpus.split("train")
    val_samples = corpus.split("val")
    if not train_samples:
        raise ValueError("corpus has no training split")

    out_dir = Path(out_dir) if out_dir is not None else None
    best_path = last_path = None
    history_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        best_path = out_dir / "best.ckpt"
        last_path = out_dir / "last.ckpt"
        history_path = out_dir / "history.jsonl"
        if start_epoch == 0 and history_path.exists():
            history_path.unlink()

    result = TrainResult(model=model, vocab=vocab, best_val=best_val,
                         best_path=best_path, last_path=last_path)

    metrics_every = cfg["training.metrics_every"]
    for epoch in range(start_epoch, epochs):
        opt.set_epoch(epoch, cfg["training.lr_decay"], cfg["training.warmup_epochs"])
        order = rng.permutation(len(train_samples))
        total_loss, total_tokens = 0.0, 0
        for bi, lo in enumerate(range(0, len(order), batch_size)):
            batch = [train_samples[i] for i in order[lo : lo + batch_size]]
            zero_grads(params.values())
            loss, n_tokens = batch_loss(model, batch, label_smoothing)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch {bi}"
                )
            loss.backward()
            clip_global_norm(params.values(), cfg["training.grad_clip"])
            opt.step()
            total_loss += float(loss.data) * n_tokens
            total_tokens += n_tokens

        entry = {
            "epoch": epoch,
            "train_loss": total_loss / total_tokens,
            "lr_visual": opt.lr["visual"],
            "lr_rest": opt.lr["rest"],
        }
        if val_samples:
            entry["val_loss"] = validation_loss(
                model, val_samples, batch_size, label_smoothing
            )
            if metrics_every > 0 and (epoch + 1) % metrics_every == 0:
                entry.update(evaluate_split(model, val_samples, decode="greedy"))
        history.append(entry)
        if log is not None:
            log(json.dumps(entry))
        if history_path is not None:
            with open(history_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")

        if out_dir is not None:
            meta = _checkpoint_meta(cfg, vocab, rng, opt, epoch, result.best_val,
                                    corp_digest)
            tensors = {n: p.data for n, p in params.items()}
            tensors.update(opt.state_tensors())
            save_checkpoint(last_path, cfg.digest(), tensors, meta)
            val = entry.get("val_loss", entry["train_loss"])
            if val < result.best_val:
                result.best_val = val
                meta = _checkpoint_meta(cfg, vocab, rng, opt, epoch,
                                        result.best_val, corp_digest)
                save_checkpoint(best_path, cfg.digest(), tensors, meta)
        else:
            val = entry.get("val_loss", entry["train_loss"])
            result.best_val = min(result.best_val, val)

    result.history = history
    return result


def _make_optimizer(cfg, model: ReportModel) -> Adam:
    groups = model.parameter_groups()
    return Adam(
        groups,
        lr0={"visual": cfg["training.lr_visual"], "rest": cfg["training.lr_rest"]},
        beta1=cfg["training.adam_beta1"],
        beta2=cfg["training.adam_beta2"],
        eps=cfg["training.adam_eps"],
        weight_decay=cfg["training.weight_decay"],
    )


def _checkpoint_meta(cfg, vocab, rng, opt, epoch, best_val, corp_digest) -> dict:
    return {
        "epoch": epoch,
        "optimizer_step": opt.t,
        "rng_state": rng_state(rng),
        "vocab": vocab.tokens,
        "config_text": cfg.resolved_text(),
        "best_val": best_val,
        "corpus_digest": corp_digest,
    }


def load_model_from_checkpoint(path, cfg=None) -> tuple[ReportModel, Checkpoint]:
    """Rebuild a model from a checkpoint; when ``cfg`` is given its digest
    must match the checkpoint's or loading refuses."""
    from radgen.config import parse_config_text

    ck = load_checkpoint(path)
    stored_cfg = parse_config_text(ck.meta["config_text"])
    if cfg is not None and cfg.digest() != ck.config_digest:
        raise ValueError(
            "checkpoint/config digest mismatch: refusing to load "
            f"({cfg.digest()[:12]} vs {ck.config_digest[:12]})"
        )
    cfg = cfg or stored_cfg
    vocab = Vocabulary.from_full_tokens(ck.meta["vocab"])
    model = ReportModel(cfg, vocab, np.random.default_rng(0))
    for name, p in model.named_parameters().items():
        p.data = ck.tensors[name].copy()
    return model, ck
