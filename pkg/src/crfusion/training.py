"""Two-stage fine-tuning: adapter-only, then adapter plus query text encoder.

Stage 1 trains only the fusion adapter against frozen encoders. Stage 2
additionally unfreezes the surrogate query text encoder while the caption
pathway stays frozen for the whole run. Frozen token sequences are encoded
once and cached; parameters outside the stage's trainable set are audited
for bit-identity after every stage.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .blocks import TokenSequence
from .encoders import EmbeddingDump, MultimodalQuery, surrogate_encode_text
from .errors import DataError, UsageError
from .losses import BatchEmbeddings, LossConfig, dual_target_loss
from .model import Model

CHECKPOINT_MAGIC = b"CRCKPT01"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class TrainingTriplet:
    """One supervised example: query, target video id, target caption ids."""

    query: MultimodalQuery
    target_video_id: str
    target_caption_ids: list[int]


@dataclass(frozen=True)
class StagePlan:
    stage_id: int
    trainable_param_names: frozenset[str]
    learning_rate: float
    epochs: int
    batch_size: int
    seed: int


def stage_plan(stage_id: int, model: Model, learning_rate: float, epochs: int,
               batch_size: int, seed: int) -> StagePlan:
    """Build a stage plan with the trainable set the protocol prescribes."""
    if stage_id == 1:
        names = model.fusion_param_names()
    elif stage_id == 2:
        names = model.fusion_param_names() + model.text_query_param_names()
    else:
        raise UsageError(f"stage_id must be 1 or 2, got {stage_id}")
    if batch_size < 2:
        raise UsageError("contrastive training needs batch_size >= 2")
    return StagePlan(stage_id, frozenset(names), learning_rate, epochs,
                     batch_size, seed)


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip: float = 1.0


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_gradients(store: ad.ParamStore, names, max_norm: float) -> float:
    """Scale trainable gradients so their global norm is at most max_norm."""
    params = [store[n] for n in names]
    total = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                        for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= p.grad.dtype.type(scale)
    return total


def adamw_step(store: ad.ParamStore, plan: StagePlan, state: AdamWState,
               cfg: OptimizerConfig) -> None:
    """Decoupled-weight-decay adaptive update on exactly the trainable set.

    Parameters outside `plan.trainable_param_names` are left bit-unchanged.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in store.names():
        if name not in plan.trainable_param_names:
            continue
        p = store[name]
        if p.grad is None or p.grad.shape != p.value.shape:
            raise UsageError(f"missing gradient for trainable parameter {name!r}")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
            state.m[name] = m
            state.v[name] = v
        else:
            v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.value -= p.value.dtype.type(plan.learning_rate) * (
            update + cfg.weight_decay * p.value)


@dataclass
class TrainState:
    rng: np.random.Generator
    opt: AdamWState = field(default_factory=AdamWState)
    stage_id: int = 0
    epoch: int = 0
    config_hash: str = ""


@dataclass
class StageReport:
    stage_id: int
    epoch_losses: list[float]
    checkpoint_path: str | None


class _FrozenEncodeCache:
    """Memoizes frozen text encodes; valid while the backing params are frozen."""

    def __init__(self, params):
        self.params = params
        self._seqs: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def sequence(self, ids) -> TokenSequence:
        key = tuple(int(i) for i in ids)
        hit = self._seqs.get(key)
        if hit is None:
            seq = surrogate_encode_text(key, self.params)
            hit = (seq.tokens.value, seq.mask)
            self._seqs[key] = hit
        return TokenSequence(ad.constant(hit[0]), hit[1].copy())

    def pooled(self, ids) -> np.ndarray:
        return self.sequence(ids).tokens.value[0]


def _target_video_row(visual: EmbeddingDump, triplet: TrainingTriplet,
                      index: int) -> np.ndarray:
    try:
        tokens, _ = visual.arrays(triplet.target_video_id)
    except DataError:
        raise DataError(
            f"triplet {index}: target video id {triplet.target_video_id!r} "
            f"not in the visual provider") from None
    return tokens[0]


def run_stage(plan: StagePlan, data: list[TrainingTriplet], model: Model,
              visual: EmbeddingDump, loss_cfg: LossConfig,
              opt_cfg: OptimizerConfig, state: TrainState,
              out_dir: str | Path | None = None, use_caption: bool = True,
              start_epoch: int = 0) -> StageReport:
    """Run one stage of epoch-shuffled contrastive training.

    Deterministic given the plan seed and data; a checkpoint is written after
    every epoch and at stage end when `out_dir` is set.
    """
    if not data:
        raise DataError("training data is empty")
    model.store.set_trainable(plan.trainable_param_names)
    state.stage_id = plan.stage_id
    if start_epoch == 0:
        state.rng = np.random.default_rng(plan.seed)
        state.opt = AdamWState()
        state.epoch = 0

    text_trainable = any(n.startswith("text_query.")
                         for n in plan.trainable_param_names)
    caption_cache = _FrozenEncodeCache(model.caption)
    text_cache = None if text_trainable else _FrozenEncodeCache(model.text_query)

    epoch_losses: list[float] = []
    ckpt_path = None
    for epoch in range(start_epoch, plan.epochs):
        order = state.rng.permutation(len(data))
        step_losses: list[float] = []
        for lo in range(0, len(order), plan.batch_size):
            chunk = order[lo:lo + plan.batch_size]
            if chunk.size < 2:
                continue  # contrastive loss undefined below B=2
            model.store.zero_grads()
            query_rows = []
            video_rows = []
            caption_rows = []
            for idx in chunk:
                triplet = data[idx]
                q = triplet.query
                if text_trainable:
                    emb_t = surrogate_encode_text(q.q_t, model.text_query)
                else:
                    emb_t = text_cache.sequence(q.q_t)
                emb_c = caption_cache.sequence(q.q_c) if use_caption else None
                from .fusion import fuse  # local import avoids a cycle at module load
                fused = fuse(emb_t, q.q_v, emb_c, model.fusion,
                             use_caption=use_caption)
                query_rows.append(fused.emb_mm)
                video_rows.append(_target_video_row(visual, triplet, int(idx)))
                caption_rows.append(caption_cache.pooled(triplet.target_caption_ids))
            batch = BatchEmbeddings(
                queries=ad.concat_rows(query_rows),
                video_targets=ad.constant(np.stack(video_rows)),
                caption_targets=ad.constant(np.stack(caption_rows)),
            )
            loss = dual_target_loss(batch, loss_cfg)
            ad.backward(loss)
            clip_gradients(model.store, plan.trainable_param_names,
                           opt_cfg.grad_clip)
            adamw_step(model.store, plan, state.opt, opt_cfg)
            step_losses.append(float(loss.value[0, 0]))
        epoch_losses.append(float(np.mean(step_losses)) if step_losses else float("nan"))
        state.epoch = epoch + 1
        if out_dir is not None:
            ckpt_path = str(Path(out_dir) /
                            f"stage{plan.stage_id}_epoch{epoch + 1:03d}.ckpt")
            save_checkpoint(ckpt_path, model, state)
    if out_dir is not None:
        ckpt_path = str(Path(out_dir) / f"stage{plan.stage_id}_final.ckpt")
        save_checkpoint(ckpt_path, model, state)
    return StageReport(plan.stage_id, epoch_losses, ckpt_path)


def _frozen_snapshot(model: Model, trainable_names) -> dict[str, bytes]:
    return {p.name: p.value.tobytes() for p in model.store
            if p.name not in trainable_names}


def _audit_frozen(model: Model, snapshot: dict[str, bytes], stage_id: int) -> None:
    for name, blob in snapshot.items():
        if model.store[name].value.tobytes() != blob:
            raise UsageError(
                f"freezing contract violated in stage {stage_id}: {name!r} changed")


def run_two_stage(model: Model, data: list[TrainingTriplet],
                  visual: EmbeddingDump, stage1: StagePlan, stage2: StagePlan,
                  loss_cfg: LossConfig, opt_cfg: OptimizerConfig,
                  state: TrainState, out_dir: str | Path | None = None,
                  use_caption: bool = True,
                  resume_from: tuple[int, int] | None = None) -> list[StageReport]:
    """Stage 1 then stage 2, auditing the freezing contract after each stage.

    `resume_from` is (stage_id, completed_epochs) from a loaded checkpoint.
    """
    if stage2.epochs > 0 and stage2.learning_rate >= stage1.learning_rate:
        warnings.warn("stage-2 learning rate is not lower than stage 1",
                      stacklevel=2)
    reports = []
    start_stage, start_epoch = resume_from if resume_from else (1, 0)
    if start_stage == 1:
        snapshot = _frozen_snapshot(model, stage1.trainable_param_names)
        reports.append(run_stage(stage1, data, model, visual, loss_cfg, opt_cfg,
                                 state, out_dir, use_caption,
                                 start_epoch=start_epoch))
        _audit_frozen(model, snapshot, 1)
        start_epoch = 0
    snapshot = _frozen_snapshot(model, stage2.trainable_param_names)
    reports.append(run_stage(stage2, data, model, visual, loss_cfg, opt_cfg,
                             state, out_dir, use_caption,
                             start_epoch=start_epoch))
    _audit_frozen(model, snapshot, 2)
    return reports


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _write_array(f, arr: np.ndarray) -> None:
    code = arr.dtype.itemsize
    if code not in _DTYPE_CODES:
        raise UsageError(f"unsupported checkpoint dtype {arr.dtype}")
    f.write(struct.pack("<BII", code, arr.shape[0], arr.shape[1]))
    f.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C"))


def _read_array(f) -> np.ndarray:
    code, rows, cols = struct.unpack("<BII", _read_exact(f, 9))
    dtype = _DTYPE_CODES[code]
    data = _read_exact(f, rows * cols * dtype.itemsize)
    return np.frombuffer(data, dtype=dtype).reshape(rows, cols).copy()


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataError("truncated checkpoint")
    return data


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


def save_checkpoint(path: str | Path, model: Model, state: TrainState) -> None:
    """Versioned little-endian snapshot: params, moments, PRNG, counters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIIQ", CHECKPOINT_VERSION, state.stage_id,
                            state.epoch, state.opt.step))
        _write_str(f, state.config_hash)
        f.write(struct.pack("<I", len(model.store)))
        for p in model.store:
            _write_str(f, p.name)
            f.write(struct.pack("<B", 1 if p.trainable else 0))
            _write_array(f, p.value)
        f.write(struct.pack("<I", len(state.opt.m)))
        for name in state.opt.m:
            _write_str(f, name)
            _write_array(f, state.opt.m[name])
            _write_array(f, state.opt.v[name])
        _write_str(f, json.dumps(state.rng.bit_generator.state, sort_keys=True))


def load_checkpoint(path: str | Path, model: Model) -> TrainState:
    """Restore parameter values and training state into an assembled model."""
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        version, stage_id, epoch, opt_step = struct.unpack(
            "<IIIQ", _read_exact(f, 20))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        config_hash = _read_str(f)
        (n_params,) = struct.unpack("<I", _read_exact(f, 4))
        seen = []
        for _ in range(n_params):
            name = _read_str(f)
            (trainable,) = struct.unpack("<B", _read_exact(f, 1))
            value = _read_array(f)
            if name not in model.store:
                raise DataError(f"checkpoint parameter {name!r} not in model")
            p = model.store[name]
            if p.value.shape != value.shape:
                raise DataError(
                    f"checkpoint parameter {name!r} has shape {value.shape}, "
                    f"model expects {p.value.shape}")
            p.value[...] = value
            p.trainable = bool(trainable)
            seen.append(name)
        if seen != model.store.names():
            raise DataError("checkpoint parameter set does not match model")
        opt = AdamWState(step=opt_step)
        (n_moments,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(n_moments):
            name = _read_str(f)
            opt.m[name] = _read_array(f)
            opt.v[name] = _read_array(f)
        rng_state = json.loads(_read_str(f))
        if f.read(1):
            raise DataError("trailing bytes after checkpoint payload")
    rng = np.random.default_rng(0)
    rng.bit_generator.state = rng_state
    return TrainState(rng=rng, opt=opt, stage_id=stage_id, epoch=epoch,
                      config_hash=config_hash)
