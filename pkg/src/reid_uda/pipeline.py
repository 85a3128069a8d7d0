"""Two-stage training: supervised source pre-training, then target fine-tuning.

Fine-tuning runs a mean-teacher loop. Every epoch the teacher (global
stream) and the fused student/teacher features (top and bottom streams) are
clustered into pseudo-labels. The student then trains on identity-balanced
batches of those labels, and the teacher follows it by an exponential moving
average after every step.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .clustering import ClusterConfig, cluster
from .deskmodel import (
    Checkpoint,
    DeskBackbone,
    ModelConfig,
    OptimizerState,
    adam_step,
    config_metadata,
    flip_vector,
)
from .errors import ClusteringError, ConfigError, DataError, LabelError
from .evaluation import EvalReport, evaluate
from .featureset import DatasetSplit, SynthConfig, cameras, identities, load_featset, stack_features, synth_generate
from .fusion import batchnorm_inference, bmfn, bmfn_vjp, ensemble_fusion, ensemble_fusion_vjp, gap, inference_feature, split_map, update_running_stats
from .losses import ClassifierHead, LossConfig, hard_triplet_loss, id_loss, softmax_triplet_loss
from .parallel import ordered_map
from .rng import Rng
from .teacher import EmaConfig, ema_update

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

_CHUNK = 256


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a pre-train / fine-tune run.

    ``source`` and ``target`` are FEATSET paths; when both are empty the
    default synthetic domain pair (``synth``) is used instead.
    """

    source: str = ""
    target: str = ""
    checkpoint_dir: str = ""
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ema: EmaConfig = field(default_factory=lambda: EmaConfig(eta=0.99))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    k_global: int = 64
    k_top: int = 48
    k_bottom: int = 48
    seeding: str = "greedy"
    use_secab: bool = True
    local_features: str = "pooled"
    cluster_max_iter: int = 100
    cluster_batch_size: int = 512
    cluster_early_stop: int = 50
    pretrain_epochs: int = 10
    pretrain_iterations: int = 50
    epochs: int = 10
    iterations_per_epoch: int = 50
    identities_per_batch: int = 8
    instances_per_identity: int = 4
    batch_size: int = 32
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-3
    weight_decay: float = 5e-4
    head_scale: float = 30.0
    bn_momentum: float = 0.1
    filter_same_camera: bool = True
    eval_every_epoch: bool = True

    def __post_init__(self):
        counts = ("k_global", "k_top", "k_bottom", "identities_per_batch", "instances_per_identity",
                  "batch_size", "cluster_max_iter", "cluster_batch_size", "cluster_early_stop")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("pretrain_epochs", "pretrain_iterations", "epochs", "iterations_per_epoch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.identities_per_batch * self.instances_per_identity != self.batch_size:
            raise ConfigError("identities_per_batch * instances_per_identity must equal batch_size")
        if self.identities_per_batch < 2 or self.instances_per_identity < 2:
            raise ConfigError("batches need at least 2 identities with 2 instances each")
        if self.local_features not in ("fused", "pooled"):
            raise ConfigError(f"local_features must be 'fused' or 'pooled', got {self.local_features!r}")
        if self.seeding not in ("greedy", "random"):
            raise ConfigError(f"seeding must be 'greedy' or 'random', got {self.seeding!r}")
        if bool(self.source) != bool(self.target):
            raise ConfigError("give both source and target paths, or neither")
        for name in ("source", "target"):
            path = getattr(self, name)
            if path and not Path(path).is_file():
                raise ConfigError(f"{name} path {path!r} does not exist")
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rates must be > 0 and weight decay >= 0")

    def cluster_config(self, k: int) -> ClusterConfig:
        return ClusterConfig(
            k=k,
            max_iter=self.cluster_max_iter,
            batch_size=self.cluster_batch_size,
            early_stop_batches=self.cluster_early_stop,
            seed=self.seed,
            init=self.seeding,
        )

    def to_dict(self) -> dict:
        return asdict(self)


_NESTED = {"model": ModelConfig, "synth": SynthConfig, "loss": LossConfig, "ema": EmaConfig, "augment": AugmentConfig}


def _build(cls, table: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(data: dict, base_dir: Path | None = None) -> PipelineConfig:
    data = dict(data)
    top = dict(data.pop("pipeline", {}))
    for key, value in data.items():
        if key not in _NESTED:
            if isinstance(value, dict):
                raise ConfigError(f"unknown table [{key}]")
            top[key] = value
    for name, cls in _NESTED.items():
        if name in data:
            if not isinstance(data[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            top[name] = _build(cls, data[name], name)
    if base_dir is not None:
        for key in ("source", "target", "checkpoint_dir"):
            if top.get(key) and not Path(top[key]).is_absolute():
                top[key] = str(base_dir / top[key])
    return _build(PipelineConfig, top, "pipeline")


def load_config(path) -> PipelineConfig:
    """Read a TOML config. Top-level keys (or a ``[pipeline]`` table) set
    :class:`PipelineConfig` fields; ``[model]``, ``[synth]``, ``[loss]``,
    ``[ema]`` and ``[augment]`` tables set the nested configs."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, path.parent)


def load_domains(cfg: PipelineConfig) -> tuple[DatasetSplit, DatasetSplit]:
    if cfg.source:
        source, target = load_featset(cfg.source), load_featset(cfg.target)
        source.validate()
        target.validate()
        return source, target
    return synth_generate(replace(cfg.synth, seed=cfg.seed))


# -- run log -----------------------------------------------------------------


@dataclass
class RunLog:
    """One record per completed epoch. Records are only ever appended."""

    stage: str
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records = self.records + [dict(record)]

    def losses(self) -> list[dict]:
        return [r["losses"] for r in self.records]

    def to_dict(self, with_times: bool = True) -> dict:
        recs = self.records if with_times else [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]
        return {"stage": self.stage, "records": recs}


# -- helpers -----------------------------------------------------------------


def _feature_matrix(records, d_in: int) -> np.ndarray:
    X = stack_features(records).astype(np.float64)
    if X.ndim != 2 or X.shape[1] != d_in:
        raise DataError(f"features of shape {X.shape[1:]} do not match model input {d_in}")
    return X


def _maps(model: DeskBackbone, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Feature maps of ``X`` and of its flipped copy, computed chunk-wise."""
    def run(start):
        xb = X[start : start + _CHUNK]
        return model.forward(xb).map, model.forward(flip_vector(xb)).map

    parts = ordered_map(run, range(0, len(X), _CHUNK))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _live(*maps) -> np.ndarray:
    """Rows whose feature maps are not entirely zero (a fully dead ReLU layer)."""
    return np.logical_and.reduce([m.reshape(len(m), -1).any(axis=1) for m in maps])


def embed(model: DeskBackbone, records) -> np.ndarray:
    """Retrieval descriptors of ``records`` under ``model``.

    A sample whose map and flipped map are both all zero gets a zero descriptor.
    """
    m, mf = _maps(model, _feature_matrix(records, model.config.d_in))
    ok = _live(m) | _live(mf)
    out = np.zeros((len(m), 3 * model.config.channels))
    if ok.all():
        return inference_feature(m, mf)
    mf_ok = np.where(_live(mf)[:, None, None, None], mf, m)
    m_ok = np.where(_live(m)[:, None, None, None], m, mf)
    out[ok] = inference_feature(m_ok[ok], mf_ok[ok])
    return out


def bmfn_rows(f: np.ndarray, f_flip: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise BMFN that tolerates degenerate rows.

    Returns ``(features, ok)``; rows where the mean of both views is zero are
    left at zero and flagged ``False``.
    """
    ok = np.linalg.norm(f + f_flip, axis=1) > 0
    out = np.zeros_like(f, dtype=np.float64)
    if ok.any():
        out[ok] = bmfn(f[ok], f_flip[ok])
    return out, ok


def bmfn_rows_vjp(f, f_flip, ok, dout) -> tuple[np.ndarray, np.ndarray]:
    d1 = np.zeros_like(f, dtype=np.float64)
    d2 = np.zeros_like(f, dtype=np.float64)
    if ok.any():
        d1[ok], d2[ok] = bmfn_vjp(f[ok], f_flip[ok], dout[ok])
    return d1, d2


def evaluate_split(model: DeskBackbone, split: DatasetSplit, filter_same_camera: bool = True) -> EvalReport:
    if not split.query or not split.gallery:
        raise DataError("split has no query/gallery records")
    for r in list(split.query) + list(split.gallery):
        if r.identity is None:
            raise LabelError(f"record {r.id}: evaluation records need identities")
    return evaluate(
        embed(model, split.query), identities(split.query), cameras(split.query),
        embed(model, split.gallery), identities(split.gallery), cameras(split.gallery),
        filter_same_camera=filter_same_camera,
    )


def sample_pk(labels: np.ndarray, p: int, k: int, rng: Rng) -> np.ndarray:
    """``p`` distinct labels with ``k`` instances each (with replacement when short)."""
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ClusteringError("need at least two distinct labels to form a batch")
    chosen = uniq[rng.sample_without_replacement(len(uniq), min(p, len(uniq)))]
    out = []
    for j, lab in enumerate(chosen):
        members = np.flatnonzero(labels == lab)
        sub = rng.derive(j)
        if len(members) >= k:
            out.append(members[sub.sample_without_replacement(len(members), k)])
        else:
            out.append(members[sub.integers(len(members), size=k)])
    return np.concatenate(out)


def _eligible(labels: np.ndarray) -> np.ndarray:
    """Rows whose label occurs at least twice in the batch."""
    _, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return np.flatnonzero(counts[inv] >= 2)


def _masked_softmax_triplet(f: np.ndarray, labels: np.ndarray, ok: np.ndarray | None = None):
    """Softmax triplet over anchors that have a positive in the batch.

    Rows with ``ok`` False are ignored. Returns ``(loss, grad, used)``; the
    term is skipped (zero) when fewer than two labels survive.
    """
    keep = np.arange(len(f)) if ok is None else np.flatnonzero(ok)
    rows = keep[_eligible(labels[keep])]
    grad = np.zeros_like(f)
    if len(rows) == 0 or len(np.unique(labels[rows])) < 2:
        return 0.0, grad, 0
    loss, g = softmax_triplet_loss(f[rows], labels[rows])
    grad[rows] = g
    return loss, grad, len(rows)


def _optimizer(cfg: PipelineConfig, lr: float) -> OptimizerState:
    return OptimizerState(lr=lr, weight_decay=cfg.weight_decay)


# -- source pre-training -------------------------------------------------------


def pretrain_source(cfg: PipelineConfig, source: DatasetSplit | None = None) -> tuple[Checkpoint, RunLog]:
    """Supervised training on the labelled source split (identity + triplet loss)."""
    if source is None:
        source, _ = load_domains(cfg)
    train = list(source.train)
    if not train:
        raise DataError("source split has no training records")
    if any(r.identity is None for r in train):
        raise LabelError("source training records must all carry identities")
    raw_ids = identities(train)
    classes, y = np.unique(raw_ids, return_inverse=True)
    if len(classes) < 2:
        raise DataError("source split needs at least two identities")
    X = _feature_matrix(train, cfg.model.d_in)
    mcfg = replace(cfg.model, classes=len(classes), target_classes=0)

    root = Rng(cfg.seed).derive("pretrain")
    model = DeskBackbone.create(mcfg, root.derive("init"))
    opt = _optimizer(cfg, cfg.lr_pretrain)
    names = model.trainable_names("head")
    log = RunLog("pretrain")
    p, k = cfg.identities_per_batch, cfg.instances_per_identity

    for epoch in range(cfg.pretrain_epochs):
        t0 = time.perf_counter()
        ep_rng = root.derive("epoch", epoch)
        sums = np.zeros(3)
        for it in range(cfg.pretrain_iterations):
            it_rng = ep_rng.derive(it)
            idx = sample_pk(y, p, k, it_rng.derive("batch"))
            xb = X[idx]
            flip = it_rng.derive("flip").uniform(size=len(idx)) < 0.5
            xb = np.where(flip[:, None], flip_vector(xb), xb)
            acts = model.forward(xb)
            l_id, head_g, d_id = id_loss(model.head, acts.global_vec, y[idx])
            l_tri, d_tri = hard_triplet_loss(acts.global_vec, y[idx], cfg.loss.margin)
            grads = model.backward(
                acts,
                d_global=d_id + cfg.loss.kappa * d_tri,
                extra={"head.weight": head_g.weight, "head.bias": head_g.bias},
            )
            adam_step(model.params, grads, opt, names)
            model.touch()
            sums += (l_id, l_tri, l_id + cfg.loss.kappa * l_tri)
        n = max(cfg.pretrain_iterations, 1)
        log.append({
            "epoch": epoch,
            "losses": {"id": sums[0] / n, "triplet": sums[1] / n, "total": sums[2] / n},
            "wall_time": time.perf_counter() - t0,
        })

    meta = config_metadata(mcfg) | {"stage": "pretrain", "seed": cfg.seed, "classes": classes.tolist()}
    return Checkpoint({"model": model.params}, meta), log


# -- target fine-tuning ----------------------------------------------------------


@dataclass
class StreamFeatures:
    global_feat: np.ndarray
    top: np.ndarray
    bottom: np.ndarray


def stream_features(student: DeskBackbone, teacher: DeskBackbone, X: np.ndarray, use_secab: bool = True,
                    bn_momentum: float | None = None) -> StreamFeatures:
    """Clustering inputs for the three pseudo-label streams.

    Global: BMFN of the teacher's pooled global features for ``X`` and its flip.
    Top/bottom: BMFN of the fused features built from the student's map halves
    and the teacher's global map. When ``bn_momentum`` is given the student's
    fusion batch-norm statistics are first updated from the whole set.
    """
    s_map, s_map_f = _maps(student, X)
    t_map, t_map_f = _maps(teacher, X)
    fp = student.fusion

    def pre_bn(sm, tm):
        top, bottom = split_map(sm)
        out = ensemble_fusion(fp, top, bottom, tm, use_secab=use_secab)
        return gap(out.tau_top_map), gap(out.tau_bot_map)

    pt, pb = pre_bn(s_map, t_map)
    pt_f, pb_f = pre_bn(s_map_f, t_map_f)
    if bn_momentum is not None:
        for name, a, b in (("bn_top", pt, pt_f), ("bn_bottom", pb, pb_f)):
            bn = update_running_stats(getattr(fp, name), np.concatenate([a, b]), bn_momentum)
            for key in ("running_mean", "running_var"):
                student.params[f"fusion.{name}.{key}"] = getattr(bn, key)
        student.touch()
        fp = student.fusion
    return StreamFeatures(
        global_feat=bmfn_rows(gap(t_map), gap(t_map_f))[0],
        top=bmfn_rows(batchnorm_inference(fp.bn_top, pt), batchnorm_inference(fp.bn_top, pt_f))[0],
        bottom=bmfn_rows(batchnorm_inference(fp.bn_bottom, pb), batchnorm_inference(fp.bn_bottom, pb_f))[0],
    )


def _cluster_streams(cfg: PipelineConfig, feats: StreamFeatures, rng: Rng):
    labels, inertia = {}, {}
    for stream, X, k in (("global", feats.global_feat, cfg.k_global),
                         ("top", feats.top, cfg.k_top),
                         ("bottom", feats.bottom, cfg.k_bottom)):
        if k > len(X):
            raise ClusteringError(f"{stream}: k={k} exceeds the {len(X)} target samples")
        model, pl = cluster(X, cfg.cluster_config(k), rng.derive(stream), stream)
        if len(np.unique(pl.labels)) < 2:
            raise ClusteringError(f"{stream} stream collapsed to fewer than two clusters")
        labels[stream] = pl.labels
        inertia[stream] = model.inertia
    return labels, inertia


def _head_from_centroids(feats: np.ndarray, labels: np.ndarray, k: int, scale: float) -> np.ndarray:
    """Rows are the unit-normalised cluster means times ``scale`` (zero for empty clusters)."""
    w = np.zeros((k, feats.shape[1]))
    np.add.at(w, labels, feats)
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    return np.where(norms > 0, w / np.where(norms > 0, norms, 1.0), 0.0) * scale


class _LocalStreams:
    """Top/bottom training features for one batch and their backward pass.

    ``pooled``: BMFN of the student's pooled map halves.
    ``fused``: BMFN of the student's fused features, i.e. the student's map
    halves fused with the teacher's global map; gradients then also reach the
    fusion parameters (the teacher map is a constant).
    """

    def __init__(self, cfg, student, teacher, xb, a, af):
        self.cfg, self.student, self.a, self.af = cfg, student, a, af
        if cfg.local_features == "pooled":
            self.top, self.ok_top = bmfn_rows(a.top_vec, af.top_vec)
            self.bottom, self.ok_bottom = bmfn_rows(a.bottom_vec, af.bottom_vec)
            return
        self.fp = student.fusion
        self.tau = teacher.forward(xb).map
        self.tau_f = teacher.forward(flip_vector(xb)).map
        self.halves = split_map(a.map), split_map(af.map)
        o = ensemble_fusion(self.fp, *self.halves[0], self.tau, use_secab=cfg.use_secab)
        of = ensemble_fusion(self.fp, *self.halves[1], self.tau_f, use_secab=cfg.use_secab)
        self.raw = (o.theta_top, of.theta_top, o.theta_bottom, of.theta_bottom)
        self.top, self.ok_top = bmfn_rows(o.theta_top, of.theta_top)
        self.bottom, self.ok_bottom = bmfn_rows(o.theta_bottom, of.theta_bottom)

    def backward(self, d_top, d_bottom, d_global, d_global_f, extra):
        student, a, af = self.student, self.a, self.af
        if self.cfg.local_features == "pooled":
            dt, dt_f = bmfn_rows_vjp(a.top_vec, af.top_vec, self.ok_top, d_top)
            db, db_f = bmfn_rows_vjp(a.bottom_vec, af.bottom_vec, self.ok_bottom, d_bottom)
            grads = student.backward(a, d_global, dt, db, extra=extra)
            grads_f = student.backward(af, d_global_f, dt_f, db_f)
        else:
            tt, tt_f, tb, tb_f = self.raw
            dt, dt_f = bmfn_rows_vjp(tt, tt_f, self.ok_top, d_top)
            db, db_f = bmfn_rows_vjp(tb, tb_f, self.ok_bottom, d_bottom)
            extra = dict(extra)
            maps = []
            for (zt, zb), tau, d1, d2 in ((self.halves[0], self.tau, dt, db), (self.halves[1], self.tau_f, dt_f, db_f)):
                fgrad, dzt, dzb, _ = ensemble_fusion_vjp(self.fp, zt, zb, tau, d1, d2, use_secab=self.cfg.use_secab)
                for name, g in fgrad.arrays().items():
                    key = f"fusion.{name}"
                    extra[key] = extra.get(key, 0.0) + g
                maps.append(np.concatenate([dzt, dzb], axis=-2))
            grads = student.backward(a, d_global, d_map=maps[0], extra=extra)
            grads_f = student.backward(af, d_global_f, d_map=maps[1])
        for name in grads:
            grads[name] = grads[name] + grads_f[name]
        return grads


def finetune_target(cfg: PipelineConfig, pretrained: Checkpoint, target: DatasetSplit | None = None,
                    ) -> tuple[Checkpoint, RunLog]:
    """Mean-teacher adaptation on the unlabelled target training split."""
    if target is None:
        _, target = load_domains(cfg)
    train = list(target.train)
    if not train:
        raise DataError("target split has no training records")
    base = pretrained.model("model")
    if base.config.d_in != cfg.model.d_in or replace(base.config, classes=cfg.model.classes) != cfg.model:
        raise ConfigError("checkpoint architecture does not match the configured model")
    X = _feature_matrix(train, cfg.model.d_in)

    root = Rng(cfg.seed).derive("finetune")
    student = base.with_target_head(cfg.k_global, root.derive("target_head"))
    teacher = DeskBackbone(student.config, student.params.copy())
    opt = _optimizer(cfg, cfg.lr_finetune)
    names = student.trainable_names("target_head")
    if cfg.local_features == "fused":
        names += [f"fusion.{n}" for n in student.fusion.arrays() if not n.endswith(("running_mean", "running_var"))]
    lc = cfg.loss
    p, k = cfg.identities_per_batch, cfg.instances_per_identity
    log = RunLog("finetune")

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        ep_rng = root.derive("epoch", epoch)
        feats = stream_features(student, teacher, X, cfg.use_secab, cfg.bn_momentum)
        labels, inertia = _cluster_streams(cfg, feats, ep_rng.derive("cluster"))
        y_g, y_t, y_b = labels["global"], labels["top"], labels["bottom"]

        student.replace_head(_head_from_centroids(feats.global_feat, y_g, cfg.k_global, cfg.head_scale),
                             np.zeros(cfg.k_global), head="target_head")
        for name in ("target_head.weight", "target_head.bias"):
            opt.reset(name)

        sums = np.zeros(5)
        for it in range(cfg.iterations_per_epoch):
            idx = sample_pk(y_g, p, k, ep_rng.derive("batch", it))
            xb = X[idx]
            a = student.forward(xb)
            af = student.forward(flip_vector(xb))
            local = _LocalStreams(cfg, student, teacher, xb, a, af)
            fg, ok_g = bmfn_rows(a.global_vec, af.global_vec)

            rows = np.flatnonzero(ok_g)
            d_id = np.zeros_like(fg)
            if len(rows):
                l_id, head_g, d_id[rows] = id_loss(student.target_head, fg[rows], y_g[idx][rows])
            else:
                head = student.target_head
                l_id, head_g = 0.0, ClassifierHead(np.zeros_like(head.weight), np.zeros_like(head.bias))
            l_tg, d_tg, _ = _masked_softmax_triplet(fg, y_g[idx], ok_g)
            l_tt, d_tt, _ = _masked_softmax_triplet(local.top, y_t[idx], local.ok_top)
            l_tb, d_tb, _ = _masked_softmax_triplet(local.bottom, y_b[idx], local.ok_bottom)
            total = lc.alpha * l_id + lc.beta * l_tg + lc.gamma * l_tt + lc.delta * l_tb

            dg, dg_f = bmfn_rows_vjp(a.global_vec, af.global_vec, ok_g, lc.alpha * d_id + lc.beta * d_tg)
            head_extra = {"target_head.weight": lc.alpha * head_g.weight, "target_head.bias": lc.alpha * head_g.bias}
            grads = local.backward(lc.gamma * d_tt, lc.delta * d_tb, dg, dg_f, head_extra)
            adam_step(student.params, grads, opt, names)
            student.touch()
            ema_update(teacher.params, student.params, cfg.ema.eta)
            teacher.touch()
            sums += (l_id, l_tg, l_tt, l_tb, total)

        n = max(cfg.iterations_per_epoch, 1)
        record = {
            "epoch": epoch,
            "losses": dict(zip(("id", "triplet_global", "triplet_top", "triplet_bottom", "total"), (sums / n).tolist())),
            "inertia": inertia,
            "clusters": {s: int(len(np.unique(v))) for s, v in labels.items()},
        }
        if cfg.eval_every_epoch and target.query and target.gallery:
            record["eval"] = evaluate_split(teacher, target, cfg.filter_same_camera).to_dict()
        record["wall_time"] = time.perf_counter() - t0
        log.append(record)

    meta = config_metadata(student.config) | {"stage": "finetune", "seed": cfg.seed}
    return Checkpoint({"student": student.params, "teacher": teacher.params}, meta), log


def direct_transfer_eval(pretrained: Checkpoint, target: DatasetSplit, filter_same_camera: bool = True) -> EvalReport:
    """Evaluate the source-trained network on the target test split without adaptation."""
    return evaluate_split(pretrained.model("model"), target, filter_same_camera)


# -- desk-scale benchmark --------------------------------------------------------

ABLATIONS = {
    "full": {},
    "random_seeding": {"seeding": "random"},
    "secab_off": {"use_secab": False},
}
SWEEP_FACTORS = (0.5, 1.5)


def _cell_row(seed: int, cell: str, rep: EvalReport, inertia: dict | None, cfg: PipelineConfig) -> dict:
    row = {
        "seed": seed,
        "cell": cell,
        "k_global": cfg.k_global,
        "k_top": cfg.k_top,
        "k_bottom": cfg.k_bottom,
        "seeding": cfg.seeding,
        "use_secab": cfg.use_secab,
        "map_standard": rep.map_standard,
        "map_paper": rep.map_paper,
        "rank1": rep.rank_at[1],
        "rank5": rep.rank_at[5],
        "rank10": rep.rank_at[10],
    }
    for s in ("global", "top", "bottom"):
        row[f"inertia_{s}"] = None if inertia is None else inertia[s]
    return row


def run_seed(seed: int, base: PipelineConfig | None = None, cells=("full", "random_seeding", "secab_off"),
             sweep: bool = False, timings: dict | None = None) -> list[dict]:
    """All benchmark cells for one seed; pre-training is shared by every cell."""
    base = replace(base or PipelineConfig(eval_every_epoch=False), seed=seed)
    source, target = load_domains(base)
    clock = time.perf_counter()
    ckpt, _ = pretrain_source(base, source)
    rows = [_cell_row(seed, "direct_transfer", direct_transfer_eval(ckpt, target, base.filter_same_camera), None, base)]
    if timings is not None:
        timings[f"{seed}/pretrain+direct_transfer"] = time.perf_counter() - clock

    variants = [(c, replace(base, **ABLATIONS[c])) for c in cells]
    if sweep:
        for f in SWEEP_FACTORS:
            kc = replace(base, k_global=max(2, round(base.k_global * f)), k_top=max(2, round(base.k_top * f)),
                         k_bottom=max(2, round(base.k_bottom * f)))
            variants.append((f"k_sweep_x{f:g}", kc))
    for name, cfg in variants:
        clock = time.perf_counter()
        ft, log = finetune_target(cfg, ckpt, target)
        rep = evaluate_split(ft.model("teacher"), target, cfg.filter_same_camera)
        rows.append(_cell_row(seed, name, rep, log.records[-1]["inertia"] if log.records else None, cfg))
        if timings is not None:
            timings[f"{seed}/{name}"] = time.perf_counter() - clock
    return rows


def summarize(rows: list[dict]) -> dict:
    """Paired comparisons across seeds, with pass/fail flags."""
    by = {}
    for r in rows:
        by.setdefault(r["cell"], {})[r["seed"]] = r
    out: dict = {}
    full, direct = by.get("full", {}), by.get("direct_transfer", {})
    seeds = sorted(set(full) & set(direct))
    if seeds:
        gains = [full[s]["map_standard"] - direct[s]["map_standard"] for s in seeds]
        out["adaptation_gain"] = {
            "seeds": len(seeds),
            "median_gain": float(np.median(gains)),
            "pass": bool(np.median(gains) >= 0.10),
        }

    def paired(other: str, key: str):
        both = sorted(set(full) & set(by.get(other, {})))
        if not both:
            return None
        wins = [full[s]["map_standard"] >= by[other][s]["map_standard"] for s in both]
        return {"pairs": len(both), "fraction": float(np.mean(wins)), "pass": bool(np.mean(wins) >= 0.6), "key": key}

    for other, key in (("random_seeding", "greedy_vs_random"), ("secab_off", "secab_on_vs_off")):
        res = paired(other, key)
        if res is not None:
            out[res.pop("key")] = res
    rnd = by.get("random_seeding", {})
    both = sorted(set(full) & set(rnd))
    if both:
        g = float(np.mean([sum(full[s][f"inertia_{t}"] for t in ("global", "top", "bottom")) for s in both]))
        r = float(np.mean([sum(rnd[s][f"inertia_{t}"] for t in ("global", "top", "bottom")) for s in both]))
        out["inertia_greedy_vs_random"] = {"greedy_mean": g, "random_mean": r, "pass": bool(g <= r)}
    return out


def synth_bench(seed: int = 0, n_seeds: int = 1, base: PipelineConfig | None = None, sweep: bool = True,
                out_dir=None, timings: dict | None = None) -> dict:
    """Desk benchmark over seeds ``seed .. seed + n_seeds - 1``.

    The cluster-count sweep runs on the first seed only. The report holds no
    wall-clock data, so it is byte-identical across reruns; timings go to the
    optional ``timings`` dict (and ``timings.json`` when writing files).
    """
    base = base or PipelineConfig(eval_every_epoch=False)
    timings = {} if timings is None else timings
    rows = []
    for i in range(n_seeds):
        rows += run_seed(seed + i, base, sweep=sweep and i == 0, timings=timings)
    cfg_dict = replace(base, seed=seed).to_dict()
    report = {"config": cfg_dict, "seeds": list(range(seed, seed + n_seeds)), "rows": rows,
              "summary": summarize(rows)}
    if out_dir is not None:
        write_report(report, out_dir)
        Path(out_dir, "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_json(report), encoding="utf-8")
    (out / "report.csv").write_text(report_csv(report["rows"]), encoding="utf-8")
