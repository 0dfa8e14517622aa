"""Loss benchmarking at desk scale: batching, timing, tracked peak memory.

Two batching modes mirror the usual transducer-loss benchmarks:

* ``fixed``: consecutive groups of ``batch_size`` utterances in input order.
* ``dynamic``: utterances sorted by frame count, then greedily packed while
  the unpadded frame total stays within ``max_frames``.

Inputs are synthesized deterministically from the seed; only the loss
computation is timed and memory-tracked.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import memory
from .core import ConfigError, DomainError, TargetSequence, as_f64, log_softmax
from .lattice import OccupationGrads, forward_backward
from .oracle import dense_lattice, dense_unpruned_loss_from_logits
from .pruned_loss import JoinerParams, pruned_rnnt_loss, toy_joiner_dense
from .pruning import PruningBounds, adjust_bounds, locally_optimal_bounds
from .trivial_joiner import EmbeddingInputs, JoinerLogits, project_embeddings, trivial_lattice_logprobs

log = logging.getLogger(__name__)

IMPLEMENTATIONS = ("pruned", "dense")


class Utterance(NamedTuple):
    t: int
    u: int


def validate_shapes(spec: Sequence[Utterance]) -> list[Utterance]:
    out = []
    for i, (t, u) in enumerate(spec):
        if t < 1 or u < 0:
            raise DomainError(f"utterance {i} has invalid shape T={t}, U={u}")
        out.append(Utterance(int(t), int(u)))
    return out


def load_shapes(path) -> list[Utterance]:
    with open(path) as f:
        raw = json.load(f)
    return validate_shapes([Utterance(item["t"], item["u"]) for item in raw])


def save_shapes(path, spec: Sequence[Utterance]) -> None:
    with open(path, "w") as f:
        json.dump([{"t": s.t, "u": s.u} for s in spec], f)


def gen_shapes(
    count: int,
    seed: int = 0,
    min_frames: int = 200,
    max_frames: int = 3000,
    frames_per_token: float = 30.0,
) -> list[Utterance]:
    """Log-normal frame counts clipped to ``[min_frames, max_frames]``, ``U ~ T / 30``."""
    rng = np.random.default_rng(seed)
    mid = np.sqrt(min_frames * max_frames)
    ts = np.clip(rng.lognormal(np.log(mid), 0.6, count), min_frames, max_frames).astype(int)
    us = np.maximum(1, np.rint(ts / frames_per_token * rng.uniform(0.8, 1.2, count))).astype(int)
    return [Utterance(int(t), int(u)) for t, u in zip(ts, us)]


@dataclass(frozen=True)
class BenchConfig:
    mode: str = "fixed"
    batch_size: int = 30
    max_frames: int = 10_000
    vocab: int = 500
    s_range: int = 5
    impl: str = "pruned"
    reps: int = 2
    seed: int = 0
    threads: int = 1
    embed_dim: int = 32
    hidden_dim: int = 32

    def __post_init__(self):
        if self.mode not in ("fixed", "dynamic"):
            raise ConfigError(f"mode must be 'fixed' or 'dynamic', got {self.mode!r}")
        if self.impl not in IMPLEMENTATIONS:
            raise ConfigError(f"impl must be one of {IMPLEMENTATIONS}, got {self.impl!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_frames < 1:
            raise ConfigError("max_frames must be >= 1")
        if self.vocab < 2 or self.s_range < 1 or self.reps < 1 or self.threads < 1:
            raise ConfigError("vocab >= 2, s_range >= 1, reps >= 1 and threads >= 1 are required")


@dataclass
class Batch:
    index: int
    members: list[int]  # positions in the shape spec
    shapes: list[Utterance]

    @property
    def padded_t(self) -> int:
        return max(s.t for s in self.shapes)

    @property
    def padded_u(self) -> int:
        return max(s.u for s in self.shapes)

    @property
    def frames(self) -> int:
        return sum(s.t for s in self.shapes)

    @property
    def padded_frames(self) -> int:
        return self.padded_t * len(self.shapes)


def make_batches(spec: Sequence[Utterance], cfg: BenchConfig) -> list[Batch]:
    spec = validate_shapes(spec)
    if not spec:
        raise DomainError("shape spec is empty")
    groups: list[list[int]] = []
    if cfg.mode == "fixed":
        for start in range(0, len(spec), cfg.batch_size):
            groups.append(list(range(start, min(start + cfg.batch_size, len(spec)))))
    else:
        for i, s in enumerate(spec):
            if s.t > cfg.max_frames:
                raise DomainError(
                    f"utterance {i} has T={s.t} frames, more than max_frames={cfg.max_frames}"
                )
        order = sorted(range(len(spec)), key=lambda i: spec[i].t)
        cur, frames = [], 0
        for i in order:
            if cur and frames + spec[i].t > cfg.max_frames:
                groups.append(cur)
                cur, frames = [], 0
            cur.append(i)
            frames += spec[i].t
        groups.append(cur)
    return [Batch(k, g, [spec[i] for i in g]) for k, g in enumerate(groups)]


@dataclass
class Instance:
    """One synthetic utterance: embeddings plus the shared model weights."""

    target: TargetSequence
    encoder_embed: np.ndarray
    decoder_embed: np.ndarray
    model: "SyntheticModel"


@dataclass
class SyntheticModel:
    encoder_proj: np.ndarray
    decoder_proj: np.ndarray
    joiner: JoinerParams

    @classmethod
    def build(cls, cfg: BenchConfig) -> "SyntheticModel":
        rng = np.random.default_rng([cfg.seed, 0])
        E = D = cfg.embed_dim
        return cls(
            encoder_proj=rng.normal(0, 1 / np.sqrt(E), (E, cfg.vocab)),
            decoder_proj=rng.normal(0, 1 / np.sqrt(D), (D, cfg.vocab)),
            joiner=JoinerParams.random(E, D, cfg.hidden_dim, cfg.vocab, rng),
        )


def synth_instance(utt: Utterance, key: int, cfg: BenchConfig, model: SyntheticModel) -> Instance:
    rng = np.random.default_rng([cfg.seed, 1, key])
    return Instance(
        target=TargetSequence(rng.integers(1, cfg.vocab, utt.u), cfg.vocab),
        encoder_embed=rng.normal(size=(utt.t, cfg.embed_dim)),
        decoder_embed=rng.normal(size=(utt.u + 1, cfg.embed_dim)),
        model=model,
    )


def feasible(utt: Utterance, s_range: int) -> bool:
    return utt.u == 0 or utt.u <= utt.t * (s_range - 1)


@dataclass
class ItemResult:
    loss: float
    outputs: tuple = field(repr=False)  # gradients held until the batch is done
    recursion_peak: int = 0


def run_pruned(inst: Instance, s_range: int) -> ItemResult:
    logits = project_embeddings(
        EmbeddingInputs(
            inst.encoder_embed, inst.decoder_embed, inst.model.encoder_proj, inst.model.decoder_proj
        )
    )
    res = pruned_rnnt_loss(
        logits, inst.encoder_embed, inst.decoder_embed, inst.model.joiner, inst.target, s_range
    )
    r = res.result
    return ItemResult(
        loss=r.loss,
        outputs=(r.grad_l_enc, r.grad_l_dec, r.grad_pruned_logits),
        recursion_peak=res.phases["recursion"].peak_delta,
    )


def run_dense(inst: Instance) -> ItemResult:
    with memory.TRACKER.phase("dense") as ph:
        logits = toy_joiner_dense(inst.encoder_embed, inst.decoder_embed, inst.model.joiner)
        out = dense_unpruned_loss_from_logits(logits, inst.target)
    return ItemResult(loss=out.loss, outputs=(out.grad,), recursion_peak=ph.peak_delta)


@dataclass
class BatchRecord:
    index: int
    size: int
    frames: int
    padded_frames: int
    max_t: int
    max_u: int
    skipped: int
    times_ms: list[float] = field(default_factory=list)
    peak_bytes: int = 0
    recursion_peak_bytes: int = 0
    loss_sum: float = 0.0

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.times_ms)) if self.times_ms else 0.0


@dataclass
class BenchReport:
    config: dict
    batch_count: int
    average_time_per_batch_ms: float
    peak_tracked_bytes: int
    recursion_peak_bytes: int
    skipped_utterances: int
    warmup_excluded: bool
    notes: list[str]
    batches: list[BatchRecord]

    def to_dict(self) -> dict:
        d = asdict(self)
        for rec, b in zip(d["batches"], self.batches):
            rec["mean_ms"] = b.mean_ms
        return d


def _run_batch(batch: Batch, cfg: BenchConfig, model: SyntheticModel, pool) -> tuple[float, int, int, float, int]:
    items = [
        synth_instance(utt, key, cfg, model)
        for key, utt in zip(batch.members, batch.shapes)
        if cfg.impl == "dense" or feasible(utt, cfg.s_range)
    ]
    skipped = len(batch.shapes) - len(items)
    if cfg.impl == "pruned":
        fn = lambda inst: run_pruned(inst, cfg.s_range)  # noqa: E731
    else:
        fn = run_dense
    with memory.TRACKER.phase(f"batch{batch.index}") as ph:
        start = time.perf_counter()
        results = list(pool.map(fn, items)) if pool else [fn(inst) for inst in items]
        elapsed = (time.perf_counter() - start) * 1e3
    loss_sum = float(sum(r.loss for r in results))
    rec_peak = max((r.recursion_peak for r in results), default=0)
    return elapsed, ph.peak_delta, rec_peak, loss_sum, skipped


def run_benchmark(cfg: BenchConfig, spec: Sequence[Utterance], out=None) -> BenchReport:
    """Time every batch ``cfg.reps`` times; the first repetition is warm-up.

    With ``reps == 1`` nothing can be excluded and the report says so.
    Loss values (``loss_sum`` per batch) depend only on the seed.
    """
    batches = make_batches(spec, cfg)
    model = SyntheticModel.build(cfg)
    records = [
        BatchRecord(b.index, len(b.shapes), b.frames, b.padded_frames, b.padded_t, b.padded_u, 0)
        for b in batches
    ]
    notes = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for rep in range(cfg.reps):
            for b, rec in zip(batches, records):
                elapsed, peak, rec_peak, loss_sum, skipped = _run_batch(b, cfg, model, pool)
                log.debug("rep %d batch %d: %.1f ms, %d bytes", rep, b.index, elapsed, peak)
                rec.times_ms.append(elapsed)
                rec.peak_bytes = max(rec.peak_bytes, peak)
                rec.recursion_peak_bytes = max(rec.recursion_peak_bytes, rec_peak)
                rec.loss_sum = loss_sum
                rec.skipped = skipped
    finally:
        if pool:
            pool.shutdown()

    warmup_excluded = cfg.reps > 1
    if not warmup_excluded:
        notes.append("no warm-up exclusion: reps == 1, the only repetition is averaged")
    first = 1 if warmup_excluded else 0
    timed = [t for rec in records for t in rec.times_ms[first:]]
    skipped = sum(rec.skipped for rec in records)
    if skipped:
        notes.append(f"{skipped} utterances skipped: U > T * (S - 1) leaves no path in any band")
    report = BenchReport(
        config=asdict(cfg),
        batch_count=len(batches),
        average_time_per_batch_ms=float(np.mean(timed)),
        peak_tracked_bytes=max(rec.peak_bytes for rec in records),
        recursion_peak_bytes=max(rec.recursion_peak_bytes for rec in records),
        skipped_utterances=skipped,
        warmup_excluded=warmup_excluded,
        notes=notes,
        batches=records,
    )
    if out is not None:
        Path(out).write_text(json.dumps(report.to_dict(), indent=2))
    return report


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "BenchReport",
    "type": "object",
    "required": [
        "config",
        "batch_count",
        "average_time_per_batch_ms",
        "peak_tracked_bytes",
        "recursion_peak_bytes",
        "skipped_utterances",
        "warmup_excluded",
        "notes",
        "batches",
    ],
    "properties": {
        "config": {
            "type": "object",
            "required": ["mode", "batch_size", "max_frames", "vocab", "s_range", "impl", "reps", "seed", "threads"],
        },
        "batch_count": {"type": "integer", "minimum": 1},
        "average_time_per_batch_ms": {"type": "number", "minimum": 0},
        "peak_tracked_bytes": {"type": "integer", "minimum": 0},
        "recursion_peak_bytes": {"type": "integer", "minimum": 0},
        "skipped_utterances": {"type": "integer", "minimum": 0},
        "warmup_excluded": {"type": "boolean"},
        "notes": {"type": "array", "items": {"type": "string"}},
        "batches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "index", "size", "frames", "padded_frames", "max_t", "max_u",
                    "skipped", "times_ms", "mean_ms", "peak_bytes", "recursion_peak_bytes", "loss_sum",
                ],
                "properties": {
                    "times_ms": {"type": "array", "items": {"type": "number"}},
                    "loss_sum": {"type": "number"},
                },
            },
        },
    },
}


@dataclass
class OccupancyDump:
    occupancy: np.ndarray  # (U+1, T): rows are u, columns are t
    raw_bounds: np.ndarray
    bounds: PruningBounds | None
    paths: list[Path]


def occupancy_from_logits(logits: np.ndarray | JoinerLogits, target: TargetSequence) -> OccupationGrads:
    """Occupation counts from dense ``(T, U+1, V)`` logits or trivial-joiner logits."""
    if isinstance(logits, JoinerLogits):
        lattice = trivial_lattice_logprobs(logits, target)
    else:
        lattice = dense_lattice(log_softmax(as_f64(logits, "logits"), axis=2), target)
    return forward_backward(lattice)[1]


def dump_occupancy(logits, target: TargetSequence, prefix, s_range: int = 4) -> OccupancyDump:
    """Write ``PREFIX_occupancy.csv`` (node gradient ``y' + blank'``, rows u, columns t)
    plus ``PREFIX_bounds.csv`` / ``PREFIX_bounds.json`` with the chosen ``p_t``.
    """
    occ = occupancy_from_logits(logits, target)
    node = occ.node_occupancy().T
    raw = locally_optimal_bounds(occ, s_range)
    try:
        bounds = adjust_bounds(raw, s_range, target.U)
    except DomainError as exc:
        log.warning("no feasible bounds: %s", exc)
        bounds = None

    prefix = str(prefix)
    occ_path = Path(prefix + "_occupancy.csv")
    with open(occ_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["u"] + list(range(node.shape[1])))
        for u, row in enumerate(node):
            w.writerow([u] + [repr(float(v)) for v in row])
    bounds_path = Path(prefix + "_bounds.csv")
    with open(bounds_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "raw", "p"])
        for t, r in enumerate(raw):
            w.writerow([t, int(r), "" if bounds is None else bounds.p[t]])
    paths = [occ_path, bounds_path]
    if bounds is not None:
        json_path = Path(prefix + "_bounds.json")
        json_path.write_text(bounds.to_json())
        paths.append(json_path)
    return OccupancyDump(occupancy=node, raw_bounds=raw, bounds=bounds, paths=paths)
