"""Datasets, two-stage training, evaluation and reporting."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .avp import (
    PatternTable,
    ScoreConfig,
    VulnClass,
    default_tables,
    matched_chains,
    score_nodes,
    tables_from_mapping,
)
from .cfg import Cfg, build_cfg
from .disasm import ContractBytecode, HexFormatError, disassemble
from .distill import (
    LossConfig,
    init_neurons,
    msl_loss,
    msl_loss_grad,
    nd_backward,
    nd_forward,
    pre_loss,
)
from .embed import (
    EmbeddingMatrix,
    SkipGramConfig,
    Vocab,
    build_vocab,
    embed_blocks,
    standardize_embedding,
    train_skipgram,
)
from .student import (
    Params,
    StudentConfig,
    gfeor_backward,
    gfeor_forward,
    gfeor_shapes,
    init_gfeor,
    init_iseor,
    iseor_backward,
    iseor_forward,
    iseor_shapes,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    noise_loss,
    noise_loss_grad,
    save_checkpoint,
    sigmoid,
)
from .synth import SampleRecord

log = logging.getLogger(__name__)


class DataError(Exception):
    """Input data is missing or malformed."""


# -- dataset I/O -------------------------------------------------------------


def read_teacher_file(path: str | Path) -> dict[str, np.ndarray]:
    """Parse ``# dim=<D>`` followed by ``id, f1, ..., fD`` lines."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{path}: missing '# dim=<D>' header line")
    header = dict(
        part.strip().split("=", 1) for part in lines[0].lstrip("#").split(",") if "=" in part
    )
    try:
        dim = int(header["dim"])
    except (KeyError, ValueError):
        raise DataError(f"{path}: header must declare dim=<D>") from None
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        cid, *vals = [v.strip() for v in line.split(",")]
        if len(vals) != dim:
            raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
        try:
            vec = np.array([float(v) for v in vals])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}:{lineno}: non-finite feature value")
        out[cid] = vec
    return out


def write_teacher_file(path: str | Path, features: Mapping[str, np.ndarray]) -> None:
    dims = {len(v) for v in features.values()}
    if len(dims) > 1:
        raise ValueError("teacher features have inconsistent dimensions")
    dim = dims.pop() if dims else 0
    with open(path, "w") as fh:
        fh.write(f"# dim={dim}\n")
        for cid, vec in features.items():
            fh.write(cid + ", " + ", ".join(repr(float(x)) for x in vec) + "\n")


def load_dataset(
    bytecode_dir: str | Path,
    labels_csv: str | Path,
    teacher_file: str | Path | None = None,
    vuln_class: VulnClass | str | None = None,
) -> list[SampleRecord]:
    """Join ``<bytecode_dir>/<id>.hex`` files with label rows and teacher rows."""
    bytecode_dir = Path(bytecode_dir)
    want = VulnClass.parse(vuln_class) if vuln_class is not None else None
    with open(labels_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        missing_cols = {"id", "vuln_class", "label"} - set(reader.fieldnames or ())
        if missing_cols:
            raise DataError(f"{labels_csv}: missing columns {sorted(missing_cols)}")
        rows = list(reader)

    teachers = read_teacher_file(teacher_file) if teacher_file else {}
    records, missing = [], []
    for row in rows:
        cls = VulnClass.parse(row["vuln_class"])
        if want is not None and cls is not want:
            continue
        cid = row["id"].strip()
        path = bytecode_dir / f"{cid}.hex"
        if not path.exists():
            missing.append(cid)
            continue
        try:
            code = ContractBytecode.from_file(path, cid)
        except HexFormatError as exc:
            raise DataError(str(exc)) from None
        label = int(row["label"])
        if label not in (0, 1):
            raise DataError(f"{labels_csv}: label for {cid} must be 0 or 1")
        records.append(SampleRecord(cid, code, label, cls, teachers.get(cid)))
    if missing:
        raise DataError("no bytecode file for labelled ids: " + ", ".join(missing))
    unmatched = set(teachers) - {r.id for r in records}
    if unmatched:
        log.warning("dropping %d teacher rows with no labelled contract", len(unmatched))
    return records


def write_dataset(records: Sequence[SampleRecord], out_dir: str | Path) -> None:
    """Lay out ``bytecode/*.hex``, ``labels.csv`` and ``teacher.txt``."""
    out_dir = Path(out_dir)
    (out_dir / "bytecode").mkdir(parents=True, exist_ok=True)
    for r in records:
        (out_dir / "bytecode" / f"{r.id}.hex").write_text(r.bytecode.raw.hex() + "\n")
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "vuln_class", "label"])
        for r in records:
            w.writerow([r.id, r.vuln_class.value, r.label])
    teachers = {r.id: r.teacher for r in records if r.teacher is not None}
    if teachers:
        write_teacher_file(out_dir / "teacher.txt", teachers)


def split_dataset(
    records: Sequence[SampleRecord], val_frac: float = 0.2, seed: int = 0
) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Stratified shuffled split into (train, validation)."""
    rng = np.random.default_rng([seed, 11])
    train, val = [], []
    for label in (0, 1):
        group = [r for r in records if r.label == label]
        order = rng.permutation(len(group))
        n_val = int(round(val_frac * len(group)))
        val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    return train, val


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    vuln_class: VulnClass = VulnClass.REENTRANCY
    stage_a_epochs: int = 20
    stage_a_lr: float = 0.2
    stage_b_epochs: int = 30
    stage_b_lr: float = 0.2
    batch_size: int = 8
    seed: int = 42
    threshold: float = 0.5
    neurons: int = 3
    activation: str = "tanh"
    skip_stage_a: bool = False
    distill: bool = True
    joint_stage_b: bool = False
    finetune_embeddings: bool = False
    standardize_inputs: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    # the opcode corpus is small, so embeddings get more passes than the module default
    skipgram: SkipGramConfig = field(default_factory=lambda: SkipGramConfig(epochs=20))

    def __post_init__(self):
        object.__setattr__(self, "vuln_class", VulnClass.parse(self.vuln_class))
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.stage_a_epochs < 0 or self.stage_b_epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.score.feature_dim != self.student.feature_dim:
            raise ValueError("score feature_dim must equal the student feature_dim")
        if self.skipgram.dim != self.student.embed_dim:
            raise ValueError("skip-gram dim must equal the student embed_dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vuln_class"] = self.vuln_class.value
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> TrainConfig:
        data = dict(data)
        nested = {"loss": LossConfig, "score": ScoreConfig, "student": StudentConfig,
                  "skipgram": SkipGramConfig}  # fmt: skip
        for key, typ in nested.items():
            if key in data and isinstance(data[key], Mapping):
                data[key] = typ(**data[key])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def variant(cls, name: str, **overrides) -> TrainConfig:
        """Named ablation settings: idt-wo, idt-pd, idt-cd, sct-wo, n1..n4."""
        base = cls(**overrides)
        key = name.lower()
        if key == "idt-wo":
            return replace(base, skip_stage_a=True)
        if key == "idt-pd":
            return replace(base, score=replace(base.score, xi=0.8, nu=0.2))
        if key == "idt-cd":
            return replace(base, score=replace(base.score, xi=1.0, nu=0.0))
        if key == "sct-wo":
            return replace(base, loss=LossConfig(alpha=0.0, beta=base.loss.beta))
        if key in ("n1", "n2", "n3", "n4"):
            return replace(base, neurons=int(key[1]))
        raise ValueError(f"unknown variant {name!r}")


# -- model ----------------------------------------------------------------------


@dataclass
class Model:
    config: TrainConfig
    table: PatternTable
    embedding: EmbeddingMatrix
    iseor: Params
    gfeor: Params
    neurons: Params = field(default_factory=dict)
    teacher_dim: int = 0

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"embed.vectors": self.embedding.vectors}
        out.update(self.iseor)
        out.update(self.gfeor)
        out.update(self.neurons)
        return out

    def save(self, path: str | Path) -> None:
        meta = {
            "version": __version__,
            "train": self.config.to_dict(),
            "table": self.table.to_dict(),
            "vocab": list(self.embedding.vocab.tokens),
            "vocab_counts": list(self.embedding.vocab.counts),
            "teacher_dim": self.teacher_dim,
        }
        save_checkpoint(path, meta, self.tensors())

    @classmethod
    def load(cls, path: str | Path) -> Model:
        meta, tensors = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["train"])
        table = tables_from_mapping({cfg.vuln_class.value: meta["table"]})[cfg.vuln_class]
        vocab = Vocab(tuple(meta["vocab"]), tuple(meta["vocab_counts"]))
        expected = {"embed.vectors": (len(vocab), cfg.student.embed_dim)}
        expected.update(iseor_shapes(cfg.student))
        expected.update(gfeor_shapes(cfg.student))
        teacher_dim = int(meta.get("teacher_dim", 0))
        if teacher_dim:
            g = cfg.student.graph_dim
            expected["nd.W"] = (cfg.neurons, g, teacher_dim)
            expected["nd.b"] = (cfg.neurons, g)
        for name, shape in expected.items():
            if name not in tensors:
                raise ValueError(f"{path}: checkpoint lacks tensor {name}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise ValueError(
                    f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}"
                )
        extra = set(tensors) - set(expected)
        if extra:
            raise ValueError(f"{path}: unexpected tensors {sorted(extra)}")
        pick = lambda names: {k: tensors[k] for k in names}  # noqa: E731
        return cls(
            cfg,
            table,
            EmbeddingMatrix(vocab, tensors["embed.vectors"]),
            pick(iseor_shapes(cfg.student)),
            pick(gfeor_shapes(cfg.student)),
            pick(["nd.W", "nd.b"]) if teacher_dim else {},
            teacher_dim,
        )


@dataclass
class _Prepared:
    record: SampleRecord
    cfg: Cfg
    x: np.ndarray  # block embeddings
    h_p: np.ndarray  # score features
    tokens: list[np.ndarray] = field(default_factory=list)


@dataclass
class TrainLog:
    stage_a: list[float] = field(default_factory=list)
    stage_b: list[float] = field(default_factory=list)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _sgd(params: Params, grads: Params, lr: float) -> None:
    for k, g in grads.items():
        params[k] -= lr * g


def _accumulate(total: Params, grads: Params, scale: float = 1.0) -> None:
    for k, g in grads.items():
        if k in total:
            total[k] += scale * g
        else:
            total[k] = scale * np.array(g, dtype=np.float64)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _prepare(records: Sequence[SampleRecord], table: PatternTable, cfg: TrainConfig):
    prepared, empty = [], []
    for r in records:
        g = build_cfg(r.bytecode)
        if g.n == 0:
            empty.append(r.id)
            continue
        scores = score_nodes(g, table, cfg.score)
        prepared.append(_Prepared(r, g, np.empty(0), scores.features))
    if empty:
        raise DataError("contracts with empty bytecode cannot be trained on: " + ", ".join(empty))
    return prepared


def _embed_all(prepared: list[_Prepared], emb: EmbeddingMatrix) -> None:
    for p in prepared:
        p.x = embed_blocks(p.cfg, emb)
        p.tokens = [emb.vocab.encode(b.instructions) for b in p.cfg.blocks]


def _embedding_grad(p: _Prepared, dx: np.ndarray, shape) -> np.ndarray:
    grad = np.zeros(shape)
    for row, ids in zip(dx, p.tokens):
        np.add.at(grad, ids, row / len(ids))
    return grad


def train(
    dataset: Sequence[SampleRecord],
    config: TrainConfig = TrainConfig(),
    table: PatternTable | None = None,
) -> tuple[Model, TrainLog]:
    """Fit embeddings, then Stage A (noise loss), then Stage B (multi-knowledge loss)."""
    if not dataset:
        raise DataError("cannot train on an empty dataset")
    if len({r.label for r in dataset}) < 2:
        raise DataError("training data must contain both positive and negative samples")
    table = table or default_tables()[config.vuln_class]
    prepared = _prepare(dataset, table, config)

    corpus = [disassemble(p.record.bytecode) for p in prepared]
    vocab = build_vocab(corpus)
    sg = replace(config.skipgram, seed=config.seed)
    emb = train_skipgram(corpus, vocab, sg)
    if config.standardize_inputs:
        emb = standardize_embedding(emb, [p.cfg for p in prepared])
    _embed_all(prepared, emb)

    scfg = config.student
    iseor = init_iseor(scfg, _rng(config.seed, 1))
    gfeor = init_gfeor(scfg, _rng(config.seed, 2))
    teacher_dims = {len(p.record.teacher) for p in prepared if p.record.teacher is not None}
    if len(teacher_dims) > 1:
        raise DataError("teacher features have inconsistent dimensions")
    teacher_dim = teacher_dims.pop() if (teacher_dims and config.distill) else 0
    neurons = (
        init_neurons(config.neurons, teacher_dim, scfg.graph_dim, _rng(config.seed, 3))
        if teacher_dim
        else {}
    )
    model = Model(config, table, emb, iseor, gfeor, neurons, teacher_dim)
    history = TrainLog()

    # Stage A
    shuffle = _rng(config.seed, 4)
    if not config.skip_stage_a:
        for _ in range(config.stage_a_epochs):
            total = 0.0
            for batch in _batches(len(prepared), config.batch_size, shuffle):
                grads: Params = {}
                emb_grad = None
                for idx in batch:
                    p = prepared[idx]
                    x = embed_blocks(p.cfg, emb) if config.finetune_embeddings else p.x
                    h_s, cache = iseor_forward(x, iseor)
                    total += noise_loss(p.h_p, h_s)
                    g, dx = iseor_backward(noise_loss_grad(p.h_p, h_s), cache, iseor)
                    _accumulate(grads, g, 1.0 / len(batch))
                    if config.finetune_embeddings:
                        eg = _embedding_grad(p, dx, emb.vectors.shape)
                        emb_grad = eg if emb_grad is None else emb_grad + eg
                _sgd(iseor, grads, config.stage_a_lr)
                if emb_grad is not None:
                    emb.vectors -= config.stage_a_lr * emb_grad / len(batch)
            history.stage_a.append(total / len(prepared))
        if config.finetune_embeddings:
            _embed_all(prepared, emb)

    # Stage B
    frozen = None if config.joint_stage_b else [iseor_forward(p.x, iseor) for p in prepared]
    alpha, beta = config.loss.alpha, config.loss.beta
    for _ in range(config.stage_b_epochs):
        total = 0.0
        for batch in _batches(len(prepared), config.batch_size, shuffle):
            grads = {}
            for idx in batch:
                p = prepared[idx]
                h_s, s_cache = frozen[idx] if frozen is not None else iseor_forward(p.x, iseor)
                h_g, g_cache = gfeor_forward(h_s, p.cfg.edges, gfeor, scfg.slope)
                logit, m_cache = mlp_forward(h_g, gfeor)
                y = float(sigmoid(logit))
                target = p.record.label
                loss = beta * pre_loss(y, target)
                g_mlp, d_hg = mlp_backward(beta * (y - target), m_cache, gfeor)
                if neurons and p.record.teacher is not None:
                    h_t, nd_cache = nd_forward(p.record.teacher, neurons, config.activation)
                    loss += alpha * msl_loss(h_t, h_g)
                    d_t, d_s = msl_loss_grad(h_t, h_g)
                    d_hg = d_hg + alpha * d_s
                    g_nd, _ = nd_backward(alpha * d_t, nd_cache, neurons)
                    _accumulate(grads, g_nd, 1.0 / len(batch))
                g_gat, d_hs = gfeor_backward(d_hg, g_cache, gfeor)
                _accumulate(grads, g_mlp, 1.0 / len(batch))
                _accumulate(grads, g_gat, 1.0 / len(batch))
                if frozen is None:
                    g_seq, _ = iseor_backward(np.ascontiguousarray(d_hs), s_cache, iseor)
                    _accumulate(grads, g_seq, 1.0 / len(batch))
                total += loss
            for name, g in grads.items():
                target_params = neurons if name.startswith("nd.") else (
                    gfeor if name in gfeor else iseor
                )
                target_params[name] -= config.stage_b_lr * g
        history.stage_b.append(total / len(prepared))
    return model, history


# -- inference -------------------------------------------------------------------


@dataclass
class Forward:
    cfg: Cfg
    h_s: np.ndarray
    h_g: np.ndarray
    y: float


def forward(model: Model, code: ContractBytecode | bytes) -> Forward:
    g = build_cfg(code)
    if g.n == 0:
        raise DataError("empty bytecode: no control-flow graph to classify")
    x = embed_blocks(g, model.embedding)
    h_s, _ = iseor_forward(x, model.iseor)
    h_g, _ = gfeor_forward(h_s, g.edges, model.gfeor, model.config.student.slope)
    logit, _ = mlp_forward(h_g, model.gfeor)
    return Forward(g, h_s, h_g, float(sigmoid(logit)))


def predict_contract(model: Model, code: ContractBytecode | bytes) -> dict:
    f = forward(model, code)
    chains = matched_chains(f.cfg, model.table, model.config.score.l)
    return {
        "y": f.y,
        "label": int(f.y >= model.config.threshold),
        "matched_chains": chains,
    }


@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    recall: float
    precision: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> Metrics:
        total = tp + fp + tn + fn
        if total == 0:
            raise DataError("cannot compute metrics on an empty dataset")
        p_undef, r_undef = tp + fp == 0, tp + fn == 0
        precision = 0.0 if p_undef else tp / (tp + fp)
        recall = 0.0 if r_undef else tp / (tp + fn)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(tp, fp, tn, fn, (tp + tn) / total, recall, precision, f1, p_undef, r_undef)

    @classmethod
    def from_predictions(cls, y_true: Iterable[int], y_pred: Iterable[int]) -> Metrics:
        tp = fp = tn = fn = 0
        for t, p in zip(y_true, y_pred):
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
        return cls.from_counts(tp, fp, tn, fn)


def evaluate(model: Model, dataset: Sequence[SampleRecord], threshold: float | None = None) -> Metrics:
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    tau = model.config.threshold if threshold is None else threshold
    preds = [int(forward(model, r.bytecode).y >= tau) for r in dataset]
    return Metrics.from_predictions([r.label for r in dataset], preds)


def dump_features(model: Model, dataset: Sequence[SampleRecord], out: str | Path) -> None:
    """JSON lines: one ``node`` row per CFG node, then one ``graph`` row per contract."""
    with open(out, "w") as fh:
        for r in dataset:
            f = forward(model, r.bytecode)
            scores = score_nodes(f.cfg, model.table, model.config.score)
            for i, row in enumerate(f.h_s):
                fh.write(json.dumps({
                    "kind": "node", "id": r.id, "index": i, "score": float(scores.scores[i]),
                    "matched": bool(scores.matched[i]), "h_s": [float(v) for v in row],
                }) + "\n")  # fmt: skip
            fh.write(json.dumps({
                "kind": "graph", "id": r.id, "label": r.label, "y": f.y,
                "h_g": [float(v) for v in f.h_g],
            }) + "\n")  # fmt: skip


REPORT_COLUMNS = ["class", "Acc", "Re", "Pre", "F1"]


def export_report(
    metrics: Mapping[VulnClass | str, Metrics], run_config: TrainConfig | Mapping, out: str | Path
) -> dict:
    cfg = run_config.to_dict() if isinstance(run_config, TrainConfig) else dict(run_config)
    rows = []
    for cls, m in metrics.items():
        name = cls.value if isinstance(cls, VulnClass) else str(cls)
        rows.append([name, m.accuracy, m.recall, m.precision, m.f1])
    report = {
        "tool": "evmhunt",
        "version": __version__,
        "seed": cfg.get("seed"),
        "config": cfg,
        "columns": REPORT_COLUMNS,
        "rows": rows,
        "confusion": {
            (c.value if isinstance(c, VulnClass) else str(c)): {
                "tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn
            }
            for c, m in metrics.items()
        },
    }
    Path(out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def parse_report(path: str | Path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("columns") != REPORT_COLUMNS:
        raise ValueError(f"{path}: unexpected report columns")
    for row in report["rows"]:
        if len(row) != len(REPORT_COLUMNS) or not all(
            isinstance(v, float) and math.isfinite(v) for v in row[1:]
        ):
            raise ValueError(f"{path}: malformed row {row!r}")
    return report
