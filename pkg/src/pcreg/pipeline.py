"""End-to-end iterative registration, training and evaluation."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .alignment import CorrespondenceSet, icp, kabsch_objective, weighted_kabsch
from .autodiff import Tape, Tensor
from .credibility import CredibilityHead, correspondence_weights
from .data import PairSample
from .errors import DegenerateError, ParameterError, TrainingError
from .features import FeatureExtractor, SignificanceHead, top_k_indices
from .geometry import (
    ErrorReport,
    PointCloud,
    RigidTransform,
    aggregate_errors,
    compose,
    invert,
    transform_errors,
)
from .losses import (
    KEYPOINT_TARGETS,
    LossReport,
    credibility_loss,
    ground_truth_labels,
    keypoint_loss,
    matching_loss,
    sample_balanced,
    total_loss,
    weighted_total,
)
from .matching import (
    FUSION_MODES,
    MatchingHead,
    coord_pair_tensor,
    feature_pair_tensor,
    fuse,
    fuse_scores,
    hard_assign,
    response_ratio,
)
from .nn import Adam, Module, PointNorm, load_checkpoint, lr_schedule, save_checkpoint

log = logging.getLogger(__name__)

ALGORITHMS = ("mfgnet", "icp", "identity")


@dataclass(frozen=True)
class ModelConfig:
    keypoints: int = 128
    k_neighbors: int = 20
    n_iterations: int = 4
    threshold: float = 0.05
    feature_dim: int = 64
    extractor_hidden: tuple[int, ...] = (64, 64)
    significance_hidden: tuple[int, ...] = (128, 64)
    feature_head_hidden: tuple[int, ...] = (128, 64)
    coord_head_hidden: tuple[int, ...] = (64, 32)
    credibility_lift: int = 64
    credibility_hidden: tuple[int, ...] = (128, 64)
    fusion: str = "pre_softmax"
    keypoint_target: str = "literal"
    refresh_features: bool = True

    def __post_init__(self):
        if min(self.keypoints, self.k_neighbors, self.feature_dim) < 1 or self.threshold <= 0:
            raise ParameterError("model hyperparameters must be positive")
        if self.n_iterations < 0:
            raise ParameterError("n_iterations must be >= 0")
        if self.fusion not in FUSION_MODES:
            raise ParameterError(f"fusion must be one of {FUSION_MODES}")
        if self.keypoint_target not in KEYPOINT_TARGETS:
            raise ParameterError(f"keypoint_target must be one of {KEYPOINT_TARGETS}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


class ModelBundle(Module):
    """Extractor, significance MLP, two matching heads and the credibility head."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        c = config
        self.config = c
        self.extractor = FeatureExtractor([3, *c.extractor_hidden, c.feature_dim], c.k_neighbors, rng)
        self.significance = SignificanceHead([c.feature_dim, *c.significance_hidden, 1], rng)
        self.feature_head = MatchingHead([c.feature_dim + 1, *c.feature_head_hidden, 1], rng)
        self.coord_head = MatchingHead([7, *c.coord_head_hidden, 1], rng)
        self.credibility = CredibilityHead(
            c.credibility_lift, [c.credibility_lift, *c.credibility_hidden, 1], rng
        )

    def with_config(self, **changes) -> "ModelBundle":
        """Same parameters under modified hyperparameters (must not change widths)."""
        clone = ModelBundle.__new__(ModelBundle)
        clone.__dict__.update(self.__dict__)
        clone.config = ModelConfig.from_dict({**self.config.to_dict(), **changes})
        return clone


# replayable discrete choices ------------------------------------------------------


class Trace:
    """Log of the non-differentiable decisions taken during one forward pass.

    Neighbour graphs, keypoint indices, sampled label indices and the pose
    updates are all piecewise-constant in the parameters.  Replaying a trace
    holds them fixed, which is exactly the function the analytic gradient
    differentiates.
    """

    def __init__(self):
        self.items: list = []
        self.replaying = False
        self._pos = 0

    def choose(self, compute: Callable):
        if self.replaying:
            value = self.items[self._pos]
            self._pos += 1
            return value
        value = compute()
        self.items.append(value)
        return value

    def replay(self) -> "Trace":
        t = Trace()
        t.items = self.items
        t.replaying = True
        return t


def _extract(model: ModelBundle, points: np.ndarray, trace: Trace) -> Tensor:
    if trace.replaying:
        feats, _ = model.extractor(points, trace.choose(lambda: None))
        return feats
    feats, graphs = model.extractor(points)
    trace.items.append(graphs)
    return feats


@dataclass(frozen=True)
class IterationRecord:
    step: RigidTransform
    response_ratio: float
    mean_credibility: float
    objective: float
    skipped: bool


@dataclass
class RegistrationResult:
    transform: RigidTransform
    iterations: list[IterationRecord]
    converged: bool
    losses: LossReport | None = None

    @property
    def per_iteration_transforms(self) -> list[RigidTransform]:
        return [r.step for r in self.iterations]


@dataclass
class ForwardOutput:
    result: RegistrationResult
    loss: object
    components: list
    trace: Trace


def _solve_step(M: np.ndarray, c: np.ndarray, P_S: np.ndarray, P_T: np.ndarray):
    j = hard_assign(M)
    corr = CorrespondenceSet(P_S, P_T[j], correspondence_weights(c))
    try:
        T = weighted_kabsch(corr)
        skipped = False
    except DegenerateError as exc:
        log.warning("skipping degenerate alignment step: %s", exc)
        T = RigidTransform.identity()
        skipped = True
    return T, skipped, kabsch_objective(T, corr)


def forward(
    model: ModelBundle,
    source: np.ndarray,
    target: np.ndarray,
    gt: RigidTransform | None = None,
    rng: np.random.Generator | None = None,
    trace: Trace | None = None,
    n_iterations: int | None = None,
    on_iteration: Callable | None = None,
    samples: tuple[int, int] = (64, 64),
) -> ForwardOutput:
    """Run the iterative pipeline; with ``gt`` also build the training loss.

    ``rng`` enables balanced positive/negative sampling for the credibility
    loss (training); without it the loss covers every keypoint.
    """
    cfg = model.config
    n_iter = cfg.n_iterations if n_iterations is None else n_iterations
    trace = Trace() if trace is None else trace
    src = np.asarray(getattr(source, "points", source), dtype=np.float64)
    tgt = np.asarray(getattr(target, "points", target), dtype=np.float64)
    K = cfg.keypoints
    if min(len(src), len(tgt)) < K or min(len(src), len(tgt)) <= cfg.k_neighbors:
        raise ParameterError(
            f"clouds of {len(src)}/{len(tgt)} points are too small for K={K}, k={cfg.k_neighbors}"
        )

    F_T = _extract(model, tgt, trace)
    s_T = model.significance(F_T)
    idx_T = trace.choose(lambda: top_k_indices(s_T.data, K))
    f_T = ad.gather_rows(F_T, idx_T)
    P_T = tgt[idx_T]

    F_S = _extract(model, src, trace)
    s_S = model.significance(F_S)
    idx_S = trace.choose(lambda: top_k_indices(s_S.data, K))
    s_kp = ad.gather_rows(s_S, idx_S)

    pose = RigidTransform.identity()
    records, components = [], []
    for n in range(1, n_iter + 1):
        posed = pose.apply(src)
        if n > 1 and cfg.refresh_features:
            F_S = _extract(model, posed, trace)
        f_S = ad.gather_rows(F_S, idx_S)
        P_S = posed[idx_S]
        fpt = feature_pair_tensor(f_S, f_T)
        cpt = coord_pair_tensor(P_S, P_T)
        if cfg.fusion == "pre_softmax":
            M_f = model.feature_head(fpt)
            M_c = model.coord_head(cpt)
            M = fuse(M_f, M_c)
        else:
            S_f = model.feature_head.scores(fpt)
            S_c = model.coord_head.scores(cpt)
            M_f, M_c = ad.softmax_rows(S_f), ad.softmax_rows(S_c)
            M = fuse_scores(S_f, S_c)
        c = model.credibility(M_f, M_c)

        if gt is not None:
            labels = ground_truth_labels(P_S, P_T, compose(gt, invert(pose)), cfg.threshold)
            kp = keypoint_loss(s_kp, M, cfg.keypoint_target) if n == 1 else None
            l_match = matching_loss(M, labels)
            # always logged, so a trace replays the same choices with or without rng
            pos, neg = trace.choose(
                lambda: sample_balanced(labels, rng, *samples) if rng is not None else (None, None)
            )
            l_cred = credibility_loss(c, labels, pos, neg)
            components.append((kp, l_match, l_cred))

        step, skipped, objective = trace.choose(lambda: _solve_step(M.data, c.data, P_S, P_T))
        pose = compose(step, pose)
        records.append(
            IterationRecord(
                step=step,
                response_ratio=response_ratio(M_f, M_c),
                mean_credibility=float(np.mean(c.data)),
                objective=objective,
                skipped=skipped,
            )
        )
        if on_iteration is not None:
            on_iteration(n, M_f.data, M_c.data, M.data, c.data)

    loss = weighted_total(components) if components else None
    result = RegistrationResult(
        transform=pose,
        iterations=records,
        converged=not any(r.skipped for r in records),
        losses=total_loss(components) if components else None,
    )
    return ForwardOutput(result, loss, components, trace)


def register(
    model: ModelBundle,
    source: PointCloud,
    target: PointCloud,
    n_iterations: int | None = None,
    on_iteration: Callable | None = None,
) -> RegistrationResult:
    """Estimate the transform mapping ``source`` onto ``target`` (eval mode, no tape)."""
    was_training = model.training
    model.eval()
    try:
        return forward(model, source, target, n_iterations=n_iterations, on_iteration=on_iteration).result
    finally:
        model.train(was_training)


# training -------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_drop_fraction: float = 0.8
    lr_drop_factor: float = 10.0
    seed: int = 0
    pos_samples: int = 64
    neg_samples: int = 64
    accumulate: int = 1
    shuffle: bool = True


@dataclass
class StepRecord:
    epoch: int
    step: int
    keypoint: float
    matching: float
    credibility: float
    total: float


@dataclass
class TrainResult:
    model: ModelBundle
    history: list[StepRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for r in self.history:
            out.setdefault(r.epoch, []).append(r.total)
        return [float(np.mean(out[e])) for e in sorted(out)]


LOSS_CSV_HEADER = ["epoch", "step", "L_keypoint", "L_matching", "L_credibility", "L_total"]


def save_model(path, model: ModelBundle, optimizer: Adam | None = None, meta: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state_dict())
    info = {"model_config": model.config.to_dict(), **(meta or {})}
    save_checkpoint(path, tensors, info)


def load_model(path) -> tuple[ModelBundle, dict, dict]:
    """Return ``(model, metadata, optimiser state)`` from a checkpoint."""
    tensors, meta = load_checkpoint(path)
    model = ModelBundle(ModelConfig.from_dict(meta.get("model_config", {})))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam/")})
    opt_state = {k: v for k, v in tensors.items() if k.startswith("adam/")}
    return model, meta, opt_state


def _as_samples(dataset) -> list[PairSample]:
    if hasattr(dataset, "samples"):
        return dataset.samples()
    return list(dataset)


def train(
    model: ModelBundle,
    dataset,
    config: TrainConfig = TrainConfig(),
    out_dir=None,
    optimizer_state: dict | None = None,
    start_epoch: int = 0,
    progress: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """Batch-size-1 Adam training on the summed per-iteration losses.

    With ``out_dir`` set, a checkpoint is written after every epoch
    (``epoch_XXX.ckpt`` plus ``last.ckpt``) and the loss history goes to
    ``losses.csv``.
    """
    samples = _as_samples(dataset)
    if not samples:
        raise ParameterError("training needs a non-empty dataset")
    params = dict(model.named_parameters())
    opt = Adam(
        params,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "losses.csv"
        append = start_epoch > 0 and csv_path.exists()
        fh = open(csv_path, "a" if append else "w", newline="")
        writer = csv.writer(fh)
        if not append:
            writer.writerow(LOSS_CSV_HEADER)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, start_epoch]))
    model.train()
    good_state = {k: v.copy() for k, v in model.state_dict().items()}
    last_ckpt = None
    if out is not None and start_epoch == 0:
        last_ckpt = out / "epoch_000.ckpt"
        save_model(last_ckpt, model, opt, {"epoch": 0})
        result.checkpoints.append(last_ckpt)
    try:
        for epoch in range(start_epoch, config.epochs):
            opt.lr = lr_schedule(
                epoch, config.lr, config.epochs, config.lr_drop_fraction, config.lr_drop_factor
            )
            order = rng.permutation(len(samples)) if config.shuffle else np.arange(len(samples))
            for step, i in enumerate(order):
                sample = samples[i]
                with Tape() as tape:
                    fo = forward(
                        model,
                        sample.source,
                        sample.target,
                        gt=sample.gt,
                        rng=rng,
                        samples=(config.pos_samples, config.neg_samples),
                    )
                rep = fo.result.losses
                if fo.loss is None or not np.isfinite(rep.total):
                    model.load_state_dict(good_state)
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch + 1}, step {step}; "
                        f"restored last good checkpoint {last_ckpt}"
                    )
                if isinstance(fo.loss, Tensor) and fo.loss.requires_grad:
                    tape.backward(fo.loss)
                else:
                    tape.free()
                if (step + 1) % config.accumulate == 0 or step == len(order) - 1:
                    if config.accumulate > 1:
                        for p in params.values():
                            if p.grad is not None:
                                p.grad = p.grad / config.accumulate
                    opt.step()
                    model.zero_grad()
                rec = StepRecord(
                    epoch + 1, step, rep.keypoint, rep.matching_sum, rep.credibility_sum, rep.total
                )
                result.history.append(rec)
                if writer is not None:
                    writer.writerow(
                        [rec.epoch, rec.step]
                        + [f"{v:.17g}" for v in (rec.keypoint, rec.matching, rec.credibility, rec.total)]
                    )
                if progress is not None:
                    progress(rec)
            good_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out is not None:
                last_ckpt = out / f"epoch_{epoch + 1:03d}.ckpt"
                meta = {"epoch": epoch + 1, "train_config": asdict(config)}
                save_model(last_ckpt, model, opt, meta)
                save_model(out / "last.ckpt", model, opt, meta)
                result.checkpoints.append(last_ckpt)
            log.info("epoch %d mean loss %.6f", epoch + 1, result.epoch_means()[-1])
    finally:
        if writer is not None:
            fh.close()
    model.eval()
    return result


def recalibrate_norms(model: ModelBundle, dataset, n_iterations: int | None = None) -> ModelBundle:
    """Re-estimate every running mean/variance as an equal-weight average over ``dataset``.

    Parameters are untouched.  Exponential running averages collected during
    training trail the parameters; one pass with frozen parameters gives eval
    mode statistics that match the final weights.
    """
    samples = _as_samples(dataset)
    if not samples:
        raise ParameterError("recalibration needs a non-empty dataset")
    norms = [m for m in model.modules() if isinstance(m, PointNorm)]
    saved = [n.momentum for n in norms]
    for n in norms:
        n.reset_stats()
        n.momentum = None
    model.train()
    try:
        for s in samples:
            forward(model, s.source, s.target, n_iterations=n_iterations)
    finally:
        for n, mom in zip(norms, saved):
            n.momentum = mom
        model.eval()
    return model


# evaluation -------------------------------------------------------------------------


@dataclass(frozen=True)
class PairOutcome:
    transform: RigidTransform
    rot_err: np.ndarray
    trans_err: np.ndarray
    record: RegistrationResult | None = None


def run_algorithm(
    algorithm: str,
    sample: PairSample,
    model: ModelBundle | None = None,
    n_iterations: int | None = None,
    icp_max_iter: int = 2000,
    icp_tol: float = 1e-8,
    on_iteration: Callable | None = None,
) -> PairOutcome:
    record = None
    if algorithm == "mfgnet":
        if model is None:
            raise ParameterError("algorithm 'mfgnet' needs a model")
        record = register(model, sample.source, sample.target, n_iterations, on_iteration)
        T = record.transform
    elif algorithm == "icp":
        T = icp(sample.source, sample.target, None, icp_max_iter, icp_tol).transform
    elif algorithm == "identity":
        T = RigidTransform.identity()
    else:
        raise ParameterError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    rot, trans = transform_errors(T, sample.gt)
    return PairOutcome(T, rot, trans, record)


_WORKER: dict = {}


def _worker_init(state, config_dict):
    model = ModelBundle(ModelConfig.from_dict(config_dict)) if config_dict is not None else None
    if model is not None:
        model.load_state_dict(state)
        model.eval()
    _WORKER["model"] = model


def _worker_run(args):
    algorithm, sample, n_iterations, icp_max_iter, icp_tol = args
    out = run_algorithm(algorithm, sample, _WORKER["model"], n_iterations, icp_max_iter, icp_tol)
    return out.rot_err, out.trans_err


def evaluate_pairs(
    model: ModelBundle | None,
    dataset,
    algorithm: str = "mfgnet",
    n_iterations: int | None = None,
    icp_max_iter: int = 2000,
    icp_tol: float = 1e-8,
    workers: int = 1,
    dump: Callable | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-pair ``(rotation error, translation error)`` in dataset order."""
    samples = _as_samples(dataset)
    if workers > 1 and dump is None:
        state = model.state_dict() if model is not None else None
        cfg = model.config.to_dict() if model is not None else None
        jobs = [(algorithm, s, n_iterations, icp_max_iter, icp_tol) for s in samples]
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(state, cfg)) as ex:
            return list(ex.map(_worker_run, jobs))
    errs = []
    for i, s in enumerate(samples):
        hook = None if dump is None else (lambda n, *m, _i=i: dump(_i, n, *m))
        out = run_algorithm(algorithm, s, model, n_iterations, icp_max_iter, icp_tol, hook)
        errs.append((out.rot_err, out.trans_err))
    return errs


def evaluate(model: ModelBundle | None, dataset, algorithm: str = "mfgnet", **kwargs) -> ErrorReport:
    return aggregate_errors(evaluate_pairs(model, dataset, algorithm, **kwargs))


def iteration_sweep(
    model: ModelBundle, dataset, iterations: Sequence[int] = (2, 3, 4, 5, 6), **kwargs
) -> list[tuple[int, ErrorReport]]:
    """One error report per iteration count, for the iteration-count ablation."""
    samples = _as_samples(dataset)
    return [(n, evaluate(model, samples, "mfgnet", n_iterations=n, **kwargs)) for n in iterations]
