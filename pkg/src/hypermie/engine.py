"""Training, calibration-stacked inference, and GZSL evaluation.

One model instance is a flat parameter store (Lorentz encoder weights, heads,
attention, projections, VAE encoder, decoder). The combined training
objective sums six terms: KL regularization and contrastive alignment from
the bottleneck, the prototype ranking loss, the conditional-VAE loss, and the
synthesis-driven unseen cross-entropy and score-alignment losses, the last
two weighted by eta and zeta.

Inference scores a sample feature against every category prototype and
subtracts a calibration factor gamma from seen-category scores before the
argmax; gamma is selected per epoch on the validation split by harmonic-mean
accuracy, and the best-epoch checkpoint is retained.

Training mutates one model instance and must stay on a single thread;
evaluation reads an immutable checkpoint and may fan out across samples.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import softmax as np_softmax

from . import bottleneck as bn
from . import cvae
from . import fusion as fu
from . import numerics as nm
from .data import Bundle, GzslSplit
from .errors import NumericsError, ValidationError
from .fusion import PrototypeSet, Task
from .lorentz import lorentz_linear_layer

LOSS_TERMS = ("regularization", "contrastive", "ranking", "vae", "unseen_ce", "alignment")


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    latent_dim: int = 768
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 14
    eta: float = 5.0
    zeta: float = 1.0
    gamma_grid_size: int = 21
    gamma_grid: Optional[list] = None
    k_synthetic: int = 1
    ib_beta: float = 1.0
    curvature: float = -1.0
    seed: int = 0
    task: Optional[str] = None
    optimizer: str = "adam"
    exclude_true_in_rank: bool = False
    train_unseen_source: str = "unseen"

    def validate(self) -> "TrainConfig":
        if self.latent_dim < 1:
            raise ValidationError("latent_dim must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.eta < 0 or self.zeta < 0 or self.ib_beta < 0:
            raise ValidationError("eta, zeta, and ib_beta must be non-negative")
        if self.k_synthetic < 1:
            raise ValidationError("k_synthetic must be >= 1")
        if not self.curvature < 0:
            raise ValidationError("curvature must be negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.train_unseen_source not in ("unseen", "validation"):
            raise ValidationError("train_unseen_source must be 'unseen' or 'validation'")
        if self.gamma_grid is not None and len(self.gamma_grid) == 0:
            raise ValidationError("gamma_grid must be non-empty when given")
        if self.gamma_grid_size < 1:
            raise ValidationError("gamma_grid_size must be >= 1")
        return self

    def hash(self) -> str:
        """Digest of everything that shapes the trained model and its updates.

        `epochs` is excluded: it is a stopping condition, so a checkpoint can
        resume under a config that only extends the run.
        """
        payload = {k: v for k, v in asdict(self).items() if k != "epochs"}
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]

    @classmethod
    def from_jsonable(cls, payload: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload).validate()


def init_params(d: int, task: Task, cfg: TrainConfig, rng: nm.SeededRng) -> nm.ParamStore:
    """Fresh trainable weights; matrices are scaled-normal, biases zero."""
    h = cfg.latent_dim
    e_width = task.entity_width_multiplier * d
    feat_width = e_width + h

    params = nm.ParamStore()

    def matrix(name, rows, cols):
        params.add(name, rng.standard_normal((rows, cols)) / np.sqrt(cols))

    def bias(name, size):
        params.add(name, np.zeros(size))

    matrix("encoder.lorentz_mu", h, d)
    matrix("encoder.lorentz_sigma", h, d)
    matrix("encoder.head_mu.w", h, h)
    bias("encoder.head_mu.b", h)
    matrix("encoder.head_sigma.w", h, h)
    bias("encoder.head_sigma.b", h)
    params.add("attention.w", rng.standard_normal(h + e_width) / np.sqrt(h + e_width))
    params.add("attention.b", np.zeros(()))
    matrix("project.feature.w", h, feat_width)
    bias("project.feature.b", h)
    matrix("project.prototype.w", h, d)
    bias("project.prototype.b", h)
    matrix("vae.lorentz_mu", h, feat_width)
    matrix("vae.lorentz_sigma", h, feat_width)
    matrix("decoder.hidden.w", h, d + h)
    bias("decoder.hidden.b", h)
    matrix("decoder.out.w", feat_width, h)
    bias("decoder.out.b", feat_width)
    return params


class ModelWeights:
    """Typed view over a name->array (or name->Parameter) mapping."""

    def __init__(self, m):
        self.enc_mu = m["encoder.lorentz_mu"]
        self.enc_sigma = m["encoder.lorentz_sigma"]
        self.head_mu = nm.Affine(m["encoder.head_mu.w"], m["encoder.head_mu.b"])
        self.head_sigma = nm.Affine(m["encoder.head_sigma.w"], m["encoder.head_sigma.b"])
        self.attn_w = m["attention.w"]
        self.attn_b = m["attention.b"]
        self.proj_feat = nm.Affine(m["project.feature.w"], m["project.feature.b"])
        self.proj_proto = nm.Affine(m["project.prototype.w"], m["project.prototype.b"])
        self.vae_mu = m["vae.lorentz_mu"]
        self.vae_sigma = m["vae.lorentz_sigma"]
        self.decoder = cvae.DecoderParams(
            nm.Affine(m["decoder.hidden.w"], m["decoder.hidden.b"]),
            nm.Affine(m["decoder.out.w"], m["decoder.out.b"]),
        )


@dataclass
class BatchNoise:
    """Frozen standard-normal draws for one training batch.

    Drawing happens before the loss graph is built, so a loss closure over a
    BatchNoise is deterministic (the finite-difference oracle's precondition).
    """

    eps_tokens: np.ndarray
    eps_patches: np.ndarray
    eps_vae: np.ndarray
    eps_synth: Optional[np.ndarray]

    @classmethod
    def draw(cls, rng: nm.SeededRng, samples, h: int, k: int, n_unseen: int, synth: bool):
        n_tok = sum(s.token_matrix.shape[0] for s in samples)
        n_patch = sum(s.patch_matrix.shape[0] for s in samples)
        return cls(
            eps_tokens=rng.standard_normal((n_tok, h)),
            eps_patches=rng.standard_normal((n_patch, h)),
            eps_vae=rng.standard_normal((len(samples), h)),
            eps_synth=rng.standard_normal((n_unseen * k, h)) if synth else None,
        )

    @classmethod
    def zeros(cls, samples, h: int):
        n_tok = sum(s.token_matrix.shape[0] for s in samples)
        n_patch = sum(s.patch_matrix.shape[0] for s in samples)
        return cls(
            eps_tokens=np.zeros((n_tok, h)),
            eps_patches=np.zeros((n_patch, h)),
            eps_vae=np.zeros((len(samples), h)),
            eps_synth=None,
        )


def batch_loss_terms(
    samples,
    weights: ModelWeights,
    protos_seen: PrototypeSet,
    seen_labels,
    protos_unseen: PrototypeSet,
    cfg: TrainConfig,
    task: Task,
    noise: BatchNoise,
    needed=None,
) -> dict:
    """The six loss terms for one batch (per-sample terms batch-averaged).

    Modality rows from the whole batch are encoded in single passes (the
    encoders are row-wise maps), then sliced per sample for pooling,
    attention, and the per-sample loss terms. `needed` restricts which terms
    are computed (the rest come back as 0.0); a term's value is identical
    either way since the terms share no state.
    """
    n = len(samples)
    if n == 0:
        raise ValidationError("empty batch")
    needed = set(LOSS_TERMS) if needed is None else set(needed)
    terms = {name: 0.0 for name in LOSS_TERMS}
    c = cfg.curvature
    h = cfg.latent_dim

    want_features = bool(needed & {"ranking", "vae"})
    want_encode = want_features or bool(needed & {"regularization", "contrastive"})
    if want_encode:
        tokens_all = np.vstack([s.tokens64() for s in samples])
        patches_all = np.vstack([s.patches64() for s in samples])
        g_tok = bn.encode_modality(
            tokens_all, weights.enc_mu, weights.enc_sigma, weights.head_mu, weights.head_sigma,
            noise.eps_tokens, c,
        )
        g_pat = bn.encode_modality(
            patches_all, weights.enc_mu, weights.enc_sigma, weights.head_mu, weights.head_sigma,
            noise.eps_patches, c,
        )
        if want_features:
            attn_head = weights.attn_w[:h]
            base_tok = nm.matmul(g_tok.z, attn_head)
            base_pat = nm.matmul(g_pat.z, attn_head)

        regs, pooled_tok, pooled_pat, features = [], [], [], []
        t_off = p_off = 0
        for s in samples:
            t_rows = slice(t_off, t_off + s.token_matrix.shape[0])
            p_rows = slice(p_off, p_off + s.patch_matrix.shape[0])
            if "regularization" in needed:
                kl_t = bn.gaussian_kl(g_tok.mu[t_rows], g_tok.sigma[t_rows])
                kl_p = bn.gaussian_kl(g_pat.mu[p_rows], g_pat.sigma[p_rows])
                regs.append(nm.mul(nm.add(kl_t, kl_p), 0.5))
            if "contrastive" in needed:
                pooled_tok.append(bn.pooled_latent(g_tok.z[t_rows]))
                pooled_pat.append(bn.pooled_latent(g_pat.z[p_rows]))
            if want_features:
                entity = fu.entity_representation(s, task)
                scores = nm.concat([base_tok[t_rows], base_pat[p_rows]], axis=0)
                attn = nm.softmax(scores, axis=0)
                fused = nm.concat([g_tok.z[t_rows], g_pat.z[p_rows]], axis=0)
                features.append(fu.sample_feature(nm.matmul(attn, fused), entity))
            t_off, p_off = t_rows.stop, p_rows.stop

        if "regularization" in needed:
            terms["regularization"] = nm.div(_sum_terms(regs), float(n))
        if "contrastive" in needed:
            terms["contrastive"] = bn.contrastive_loss(
                nm.stack_rows(pooled_tok), nm.stack_rows(pooled_pat)
            )
        if want_features:
            feats = nm.stack_rows(features)
        if "ranking" in needed:
            seen_scores = fu.similarity_scores(
                feats, protos_seen, weights.proj_feat, weights.proj_proto
            )
            terms["ranking"] = _batched_ranking(
                seen_scores, np.asarray(seen_labels), cfg.exclude_true_in_rank
            )
        if "vae" in needed:
            latent = cvae.encode_vae(feats, weights.vae_mu, weights.vae_sigma, noise.eps_vae, c)
            conditions = np.stack([cvae.conditional_prototype(s, task) for s in samples])
            recon = cvae.decode(conditions, latent.z, weights.decoder)
            diff = nm.add(feats, nm.mul(recon, -1.0))
            terms["vae"] = nm.add(
                bn.gaussian_kl(latent.mu, latent.sigma),
                nm.div(nm.sum_(nm.mul(diff, diff)), float(n)),
            )

    if needed & {"unseen_ce", "alignment"} and noise.eps_synth is not None:
        batch = cvae.synthesize_unseen(
            protos_unseen, cfg.k_synthetic, noise.eps_synth, weights.decoder
        )
        unseen_scores = fu.similarity_scores(
            batch.features, protos_unseen, weights.proj_feat, weights.proj_proto
        )
        if "unseen_ce" in needed:
            terms["unseen_ce"] = cvae.unseen_ce_loss(unseen_scores, batch.labels)
        if "alignment" in needed:
            terms["alignment"] = cvae.alignment_loss(
                unseen_scores, None if cfg.k_synthetic == 1 else batch.labels
            )
    return terms


def _sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    return total


def _batched_ranking(scores, labels, exclude_true: bool):
    n = nm.value_of(scores).shape[0]
    true_scores = scores[np.arange(n), labels]
    margins = nm.clip_min(
        nm.add(nm.add(scores, nm.mul(nm.reshape(true_scores, (n, 1)), -1.0)), 1.0), 0.0
    )
    total = nm.sum_(margins)
    if exclude_true:
        total = nm.add(total, -float(n))  # each true-label term is exactly 1
    return nm.div(total, float(n))


def overall_loss(
    samples,
    params,
    protos_seen: PrototypeSet,
    seen_labels,
    protos_unseen: PrototypeSet,
    cfg: TrainConfig,
    task: Task,
    noise: BatchNoise,
):
    """Weighted sum of the six loss terms plus the per-term breakdown."""
    weights = ModelWeights(params)
    terms = batch_loss_terms(
        samples, weights, protos_seen, seen_labels, protos_unseen, cfg, task, noise
    )
    total = nm.add(
        nm.add(
            nm.add(nm.mul(terms["regularization"], cfg.ib_beta), terms["contrastive"]),
            nm.add(terms["ranking"], terms["vae"]),
        ),
        nm.add(nm.mul(terms["unseen_ce"], cfg.eta), nm.mul(terms["alignment"], cfg.zeta)),
    )
    breakdown = {name: float(nm.value_of(terms[name])) for name in LOSS_TERMS}
    breakdown["total"] = float(nm.value_of(total))
    return total, breakdown


# -- inference -------------------------------------------------------------------


def _numpy_weights(weights: ModelWeights) -> ModelWeights:
    out = ModelWeights.__new__(ModelWeights)
    for name in ("enc_mu", "enc_sigma", "attn_w", "attn_b", "vae_mu", "vae_sigma"):
        setattr(out, name, nm.value_of(getattr(weights, name)))
    for name in ("head_mu", "head_sigma", "proj_feat", "proj_proto"):
        head = getattr(weights, name)
        setattr(out, name, nm.Affine(nm.value_of(head.w), nm.value_of(head.b)))
    dec = weights.decoder
    out.decoder = cvae.DecoderParams(
        nm.Affine(nm.value_of(dec.hidden.w), nm.value_of(dec.hidden.b)),
        nm.Affine(nm.value_of(dec.out.w), nm.value_of(dec.out.b)),
    )
    return out


def compute_features(samples, weights: ModelWeights, cfg: TrainConfig, task: Task) -> np.ndarray:
    """Deterministic sample features: latents at their posterior means (eps = 0)."""
    if len(samples) == 0:
        raise ValidationError("no samples to featurize")
    w = _numpy_weights(weights)
    c = cfg.curvature
    h = cfg.latent_dim
    d = samples[0].token_matrix.shape[1]
    tokens_all = np.vstack([s.tokens64() for s in samples])
    patches_all = np.vstack([s.patches64() for s in samples])
    mu_tok = nm.affine(lorentz_linear_layer(tokens_all, w.enc_mu, c), w.head_mu)
    mu_pat = nm.affine(lorentz_linear_layer(patches_all, w.enc_mu, c), w.head_mu)
    attn_head = w.attn_w[:h]
    base_tok = mu_tok @ attn_head
    base_pat = mu_pat @ attn_head
    feats = np.empty((len(samples), h + task.entity_width_multiplier * d))
    t_off = p_off = 0
    for i, s in enumerate(samples):
        t_end = t_off + s.token_matrix.shape[0]
        p_end = p_off + s.patch_matrix.shape[0]
        scores = np.concatenate([base_tok[t_off:t_end], base_pat[p_off:p_end]])
        attn = np_softmax(scores)
        fused = np.concatenate([mu_tok[t_off:t_end], mu_pat[p_off:p_end]], axis=0)
        entity = fu.entity_representation(s, task)
        feats[i] = np.concatenate([attn @ fused, entity])
        t_off, p_off = t_end, p_end
    return feats


def score_features(feats: np.ndarray, prototypes: PrototypeSet, weights: ModelWeights) -> np.ndarray:
    w = _numpy_weights(weights)
    return fu.similarity_scores(feats, prototypes, w.proj_feat, w.proj_proto)


def calibrated_argmax(scores: np.ndarray, seen_mask: np.ndarray, gamma: float) -> np.ndarray:
    """Row-wise argmax of scores - gamma on seen columns; ties go to the lowest index."""
    if gamma < 0:
        raise ValidationError("calibration factor gamma must be >= 0")
    return np.argmax(scores - gamma * seen_mask, axis=-1)


def calibrated_predict(
    feature,
    protos_seen: PrototypeSet,
    protos_unseen: PrototypeSet,
    weights: ModelWeights,
    gamma: float,
) -> int:
    """Predicted category index in the seen-then-unseen prototype ordering."""
    if len(protos_seen) + len(protos_unseen) == 0:
        raise ValidationError("cannot predict against an empty prototype set")
    all_protos = PrototypeSet(
        protos_seen.names + protos_unseen.names,
        np.concatenate([protos_seen.vectors, protos_unseen.vectors], axis=0),
    )
    scores = score_features(np.atleast_2d(feature), all_protos, weights)
    seen_mask = np.arange(len(all_protos)) < len(protos_seen)
    return int(calibrated_argmax(scores, seen_mask, gamma)[0])


def build_gamma_grid(scores: np.ndarray, size: int) -> list:
    """Evenly spaced calibration factors from 0 to the 99th percentile of
    per-sample score ranges."""
    if scores.size == 0:
        return [0.0]
    ranges = scores.max(axis=1) - scores.min(axis=1)
    hi = float(np.percentile(ranges, 99))
    if hi <= 0:
        return [0.0]
    return [float(g) for g in np.linspace(0.0, hi, size)]


def harmonic_mean(a: Optional[float], b: Optional[float]) -> float:
    if a is None or b is None or a == 0.0 or b == 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


def weighted_f1(y_true: np.ndarray, y_pred: np.ndarray, classes) -> Optional[float]:
    """Support-weighted mean of per-class F1 over the classes present in y_true."""
    if len(y_true) == 0:
        return None
    total = 0.0
    for c in classes:
        support = int(np.sum(y_true == c))
        if support == 0:
            continue
        tp = int(np.sum((y_true == c) & (y_pred == c)))
        fp = int(np.sum((y_true != c) & (y_pred == c)))
        fn = support - tp
        f1 = 0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
        total += support * f1
    return total / len(y_true)


@dataclass
class GroupMetrics:
    accuracy: Optional[float]
    f1: Optional[float]
    count: int

    def to_jsonable(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.f1, "count": self.count}


@dataclass
class EvalReport:
    """Per-group accuracy/weighted-F1 with harmonic-mean overall aggregates."""

    seen: GroupMetrics
    unseen: GroupMetrics
    overall_accuracy: float
    overall_f1: float
    gamma: float
    per_class: dict

    def to_jsonable(self) -> dict:
        return {
            "seen": self.seen.to_jsonable(),
            "unseen": self.unseen.to_jsonable(),
            "overall": {"accuracy": self.overall_accuracy, "f1": self.overall_f1},
            "gamma": self.gamma,
            "per_class": self.per_class,
        }


def _group_metrics(y_true, y_pred, group_rows, classes) -> GroupMetrics:
    if not np.any(group_rows):
        return GroupMetrics(accuracy=None, f1=None, count=0)
    t, p = y_true[group_rows], y_pred[group_rows]
    return GroupMetrics(
        accuracy=float(np.mean(t == p)),
        f1=weighted_f1(t, p, classes),
        count=int(group_rows.sum()),
    )


def _build_report(y_true, y_pred, row_is_seen, names, n_seen, gamma) -> EvalReport:
    seen = _group_metrics(y_true, y_pred, row_is_seen, range(n_seen))
    unseen = _group_metrics(y_true, y_pred, ~row_is_seen, range(n_seen, len(names)))
    per_class = {}
    for idx, name in enumerate(names):
        support = int(np.sum(y_true == idx))
        per_class[name] = {
            "support": support,
            "correct": int(np.sum((y_true == idx) & (y_pred == idx))),
            "predicted": int(np.sum(y_pred == idx)),
        }
    return EvalReport(
        seen=seen,
        unseen=unseen,
        overall_accuracy=harmonic_mean(seen.accuracy, unseen.accuracy),
        overall_f1=harmonic_mean(seen.f1, unseen.f1),
        gamma=float(gamma),
        per_class=per_class,
    )


def select_gamma(scores, y_true, row_is_seen, seen_mask, grid):
    """Grid-search gamma by harmonic mean of seen/unseen accuracy.

    Ties break toward the smallest gamma. Also verifies the calibration
    monotonicity invariant: the number of rows predicted as seen categories
    never increases along the ascending grid.
    """
    if len(grid) == 0:
        raise ValidationError("gamma grid is empty")
    if not np.any(row_is_seen) or not np.any(~row_is_seen):
        raise ValidationError(
            "gamma selection requires both seen and unseen instances in the validation set"
        )
    grid = sorted(float(g) for g in grid)
    best_gamma, best_hm = grid[0], -1.0
    sweep = []
    prev_seen_count = None
    for gamma in grid:
        pred = calibrated_argmax(scores, seen_mask, gamma)
        seen_count = int(np.sum(seen_mask[pred]))
        if prev_seen_count is not None and seen_count > prev_seen_count:
            raise NumericsError(
                f"calibration monotonicity violated at gamma={gamma}: "
                f"{seen_count} > {prev_seen_count} seen predictions"
            )
        prev_seen_count = seen_count
        acc_seen = float(np.mean(pred[row_is_seen] == y_true[row_is_seen]))
        acc_unseen = float(np.mean(pred[~row_is_seen] == y_true[~row_is_seen]))
        hm = harmonic_mean(acc_seen, acc_unseen)
        sweep.append(
            {
                "gamma": gamma,
                "seen_accuracy": acc_seen,
                "unseen_accuracy": acc_unseen,
                "harmonic": hm,
                "predicted_seen": seen_count,
            }
        )
        if hm > best_hm:
            best_hm, best_gamma = hm, gamma
    return best_gamma, sweep


def _subset_samples(bundle: Bundle, ids) -> list:
    by_id = bundle.by_id()
    return [by_id[sid] for sid in ids]


def _label_space(bundle: Bundle, seen_names, other_names):
    """Category space seen-then-other; returns (PrototypeSet, bundle-label -> index)."""
    names = list(seen_names) + list(other_names)
    indices = [bundle.prototypes.index(n) for n in names]
    protos = bundle.prototypes.subset(indices)
    remap = {bundle.prototypes.index(n): i for i, n in enumerate(names)}
    return protos, remap


def _evaluate_rows(bundle, split, weights, cfg, task, ids, other_names, gamma=None, grid=None):
    """Shared scoring path for validation and test evaluation.

    When both seen and unseen instances are present, the full gamma-grid sweep
    runs (which enforces the calibration monotonicity invariant); a given
    `gamma` overrides the selected one for the reported predictions.
    """
    samples = _subset_samples(bundle, ids)
    protos, remap = _label_space(bundle, split.seen_categories, other_names)
    n_seen = len(split.seen_categories)
    feats = compute_features(samples, weights, cfg, task)
    scores = score_features(feats, protos, weights)
    y_true = np.array([remap[s.label] for s in samples], dtype=np.int64)
    row_is_seen = y_true < n_seen
    seen_mask = np.arange(len(protos)) < n_seen
    sweep = []
    if np.any(row_is_seen) and np.any(~row_is_seen):
        grid_used = grid if grid is not None else build_gamma_grid(scores, cfg.gamma_grid_size)
        selected, sweep = select_gamma(scores, y_true, row_is_seen, seen_mask, grid_used)
        if gamma is None:
            gamma = selected
    elif gamma is None:
        raise ValidationError(
            "gamma selection requires both seen and unseen instances in the evaluated split"
        )
    y_pred = calibrated_argmax(scores, seen_mask, gamma)
    report = _build_report(y_true, y_pred, row_is_seen, protos.names, n_seen, gamma)
    return report, sweep, feats


def _as_weights(params_like) -> ModelWeights:
    if isinstance(params_like, ModelWeights):
        return params_like
    if isinstance(params_like, Checkpoint):
        return ModelWeights(params_like.params)
    return ModelWeights(params_like)


def evaluate(bundle: Bundle, split: GzslSplit, params, cfg: TrainConfig, gamma: float) -> EvalReport:
    """Test-split evaluation at a fixed calibration factor."""
    report, _, _ = _evaluate_rows(
        bundle, split, _as_weights(params), cfg, bundle.task,
        split.test_ids, split.unseen_categories, gamma=gamma,
    )
    return report


def test_sweep(bundle: Bundle, split: GzslSplit, params, cfg: TrainConfig, grid=None):
    """Full gamma sweep on the test split (used by the monotonicity check)."""
    report, sweep, _ = _evaluate_rows(
        bundle, split, _as_weights(params), cfg, bundle.task,
        split.test_ids, split.unseen_categories, gamma=None, grid=grid,
    )
    return report, sweep


def export_test_features(bundle: Bundle, split: GzslSplit, params, cfg: TrainConfig) -> tuple:
    """Sample features of the test split plus their category names, for export."""
    samples = _subset_samples(bundle, split.test_ids)
    feats = compute_features(samples, _as_weights(params), cfg, bundle.task)
    labels = [bundle.prototypes.names[s.label] for s in samples]
    return feats, labels


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume training bit-exactly or to evaluate."""

    params: dict
    optimizer: nm.OptimizerState
    epoch: int
    config_hash: str
    rng_state: dict
    gamma: Optional[float] = None
    val_report: Optional[dict] = None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {f"p__{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"m__{k}": v for k, v in ckpt.optimizer.m.items()})
    arrays.update({f"v__{k}": v for k, v in ckpt.optimizer.v.items()})
    meta = {
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "gamma": ckpt.gamma,
        "val_report": ckpt.val_report,
        "param_names": sorted(ckpt.params),
        "optimizer": {
            "learning_rate": ckpt.optimizer.learning_rate,
            "beta1": ckpt.optimizer.beta1,
            "beta2": ckpt.optimizer.beta2,
            "eps": ckpt.optimizer.eps,
            "mode": ckpt.optimizer.mode,
            "step_count": ckpt.optimizer.step_count,
        },
    }
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode("utf-8"))
        params = {k[3:]: blob[k].copy() for k in blob.files if k.startswith("p__")}
        m = {k[3:]: blob[k].copy() for k in blob.files if k.startswith("m__")}
        v = {k[3:]: blob[k].copy() for k in blob.files if k.startswith("v__")}
    if sorted(params) != meta["param_names"]:
        raise ValidationError("checkpoint parameter names do not match its manifest")
    opt_meta = meta["optimizer"]
    optimizer = nm.OptimizerState(
        learning_rate=opt_meta["learning_rate"],
        beta1=opt_meta["beta1"],
        beta2=opt_meta["beta2"],
        eps=opt_meta["eps"],
        mode=opt_meta["mode"],
        step_count=opt_meta["step_count"],
        m=m,
        v=v,
    )
    return Checkpoint(
        params=params,
        optimizer=optimizer,
        epoch=meta["epoch"],
        config_hash=meta["config_hash"],
        rng_state=meta["rng_state"],
        gamma=meta["gamma"],
        val_report=meta["val_report"],
    )


# -- training loop -----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: dict
    val_report: dict
    gamma: float


@dataclass
class TrainResult:
    history: list
    best: Checkpoint
    last: Checkpoint
    best_epoch: int


def train(
    bundle: Bundle,
    split: GzslSplit,
    cfg: TrainConfig,
    resume_from: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Mini-batch training with per-epoch validation and gamma selection.

    The checkpoint with the best harmonic-mean validation accuracy is
    retained; `resume_from` continues a run bit-exactly from a saved epoch
    boundary (the checkpoint carries the RNG state).
    """
    cfg.validate()
    task = bundle.task
    if cfg.task is not None and cfg.task != task.value:
        raise ValidationError(f"config task {cfg.task!r} != bundle task {task.value!r}")
    split.validate(bundle)

    protos_seen, seen_remap = _label_space(bundle, split.seen_categories, [])
    unseen_source = (
        split.unseen_categories if cfg.train_unseen_source == "unseen" else split.val_categories
    )
    protos_unseen_train = bundle.prototypes.subset(
        [bundle.prototypes.index(n) for n in unseen_source]
    )
    synth_on = (cfg.eta > 0 or cfg.zeta > 0) and len(protos_unseen_train) > 0

    rng = nm.SeededRng(cfg.seed)
    if resume_from is not None:
        if resume_from.config_hash != cfg.hash():
            raise ValidationError("checkpoint was trained under a different config")
        if resume_from.epoch >= cfg.epochs:
            raise ValidationError(
                f"checkpoint already covers epoch {resume_from.epoch} of {cfg.epochs}"
            )
        params = nm.ParamStore()
        for name in sorted(resume_from.params):
            params.add(name, resume_from.params[name].copy())
        opt = resume_from.optimizer
        rng.set_state(resume_from.rng_state)
        start_epoch = resume_from.epoch
    else:
        params = init_params(bundle.d, task, cfg, rng)
        opt = nm.OptimizerState(learning_rate=cfg.learning_rate, mode=cfg.optimizer)
        start_epoch = 0

    train_samples = _subset_samples(bundle, split.train_ids)
    if not train_samples:
        raise ValidationError("empty training split")
    seen_labels_all = np.array([seen_remap[s.label] for s in train_samples], dtype=np.int64)

    history: list = []
    best: Optional[Checkpoint] = None
    best_hm = -1.0
    best_epoch = -1
    last: Optional[Checkpoint] = None

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        perm = rng.permutation(len(train_samples))
        term_sums = {name: 0.0 for name in (*LOSS_TERMS, "total")}
        n_batches = 0
        for lo in range(0, len(perm), cfg.batch_size):
            batch_idx = perm[lo : lo + cfg.batch_size]
            batch = [train_samples[i] for i in batch_idx]
            labels = seen_labels_all[batch_idx]
            noise = BatchNoise.draw(
                rng, batch, cfg.latent_dim, cfg.k_synthetic, len(protos_unseen_train), synth_on
            )
            holder = {}

            def loss_fn(p, batch=batch, labels=labels, noise=noise, holder=holder):
                total, breakdown = overall_loss(
                    batch, p, protos_seen, labels, protos_unseen_train, cfg, task, noise
                )
                holder["breakdown"] = breakdown
                return total

            try:
                _, grads = nm.evaluate_with_gradients(loss_fn, params)
            except NumericsError as exc:
                raise NumericsError(
                    f"training diverged at epoch {epoch}, batch {n_batches}: {exc}"
                ) from exc
            nm.optimizer_step(opt, params, grads)
            for name, value in holder["breakdown"].items():
                term_sums[name] += value
            n_batches += 1
        loss_means = {name: term_sums[name] / n_batches for name in term_sums}

        val_report, gamma = _validate_epoch(bundle, split, params, cfg, task)
        record = EpochRecord(
            epoch=epoch, loss=loss_means, val_report=val_report.to_jsonable(), gamma=gamma
        )
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)

        ckpt = Checkpoint(
            params=params.copy_values(),
            optimizer=_copy_opt(opt),
            epoch=epoch,
            config_hash=cfg.hash(),
            rng_state=rng.get_state(),
            gamma=gamma,
            val_report=val_report.to_jsonable(),
        )
        last = ckpt
        hm = val_report.overall_accuracy
        if hm > best_hm:
            best_hm, best, best_epoch = hm, ckpt, epoch

    assert best is not None and last is not None
    return TrainResult(history=history, best=best, last=last, best_epoch=best_epoch)


def _copy_opt(opt: nm.OptimizerState) -> nm.OptimizerState:
    return nm.OptimizerState(
        learning_rate=opt.learning_rate,
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps=opt.eps,
        mode=opt.mode,
        step_count=opt.step_count,
        m={k: v.copy() for k, v in opt.m.items()},
        v={k: v.copy() for k, v in opt.v.items()},
    )


def _validate_epoch(bundle, split, params, cfg, task):
    weights = ModelWeights(params)
    report, _, _ = _evaluate_rows(
        bundle, split, weights, cfg, task, split.val_ids, split.val_categories,
        gamma=None, grid=cfg.gamma_grid,
    )
    return report, report.gamma


# -- gradient checking ------------------------------------------------------------


def _combine_terms(terms: dict, cfg: TrainConfig):
    return nm.add(
        nm.add(
            nm.add(nm.mul(terms["regularization"], cfg.ib_beta), terms["contrastive"]),
            nm.add(terms["ranking"], terms["vae"]),
        ),
        nm.add(nm.mul(terms["unseen_ce"], cfg.eta), nm.mul(terms["alignment"], cfg.zeta)),
    )


def gradcheck_report(
    seed: int = 0,
    task: Task = Task.MET,
    tolerance: float = 1e-4,
    fd_step: float = 1e-5,
    corrupt: Optional[str] = None,
) -> dict:
    """Compare reverse-mode gradients of every loss term (and the combined
    objective) against central differences on a small random instance.

    Finite differences are swept over the parameters each term's graph
    references; unreferenced parameters cannot perturb the value bitwise, so
    their central differences are identically zero and match the zero reverse
    gradients trivially. Coordinates whose reverse AND difference estimates
    both sit below the oracle's rounding floor (~eps*|loss|/(2h)) are
    analytically-constant directions (score shifts that cancel in softmax or
    margins); the oracle cannot resolve them, and they are certified as zero
    instead of compared by ratio.

    `corrupt` names a parameter whose reverse gradient is deliberately
    perturbed, as a self-test that the check detects wrong gradients.
    """
    from .data import GeneratorSpec, generate_synthetic_corpus

    d, h, batch_size, n_seen, n_unseen = 8, 8, 4, 3, 2
    spec = GeneratorSpec(
        task=task,
        categories=n_seen + n_unseen,
        d=d,
        samples_per_category=2,
        token_range=(3, 5),
        patch_range=(2, 4),
        prototype_scale=1.5,
        within_spread=0.5,
        coupling=0.7,
        seed=seed,
    )
    bundle = generate_synthetic_corpus(spec)
    cfg = TrainConfig(latent_dim=h, eta=5.0, zeta=1.0, seed=seed).validate()
    rng = nm.SeededRng(seed + 1)
    params = init_params(d, task, cfg, rng)
    protos_seen = bundle.prototypes.subset(range(n_seen))
    protos_unseen = bundle.prototypes.subset(range(n_seen, n_seen + n_unseen))
    seen_samples = [s for s in bundle.samples if s.label < n_seen]
    batch = seen_samples[:batch_size]
    labels = np.array([s.label for s in batch], dtype=np.int64)
    noise = BatchNoise.draw(rng, batch, h, cfg.k_synthetic, n_unseen, synth=True)

    def term_value(mapping, name):
        weights = ModelWeights(mapping)
        needed = LOSS_TERMS if name == "overall" else (name,)
        terms = batch_loss_terms(
            batch, weights, protos_seen, labels, protos_unseen, cfg, task, noise,
            needed=needed,
        )
        return _combine_terms(terms, cfg) if name == "overall" else terms[name]

    report: dict = {"tolerance": tolerance, "losses": {}, "passed": True}
    for name in (*LOSS_TERMS, "overall"):
        loss, grads = nm.evaluate_with_gradients(
            lambda p, name=name: term_value(p, name), params
        )
        referenced = [k for k, p in params.items() if p.grad is not None]
        if corrupt is not None and corrupt in params:
            grads[corrupt] = grads[corrupt] + 1e-2
            if corrupt not in referenced:
                referenced.append(corrupt)
        probe = nm.ParamStore()
        for k in referenced:
            probe[k] = params[k]  # shared Parameter objects: probes mutate in place
        fd = nm.finite_difference_gradient(
            lambda p, name=name: float(nm.value_of(term_value(params.values_map(), name))),
            probe,
            h=fd_step,
        )
        noise_floor = 8.0 * np.finfo(np.float64).eps * max(abs(loss), 1.0) / (2.0 * fd_step)
        worst, worst_param = 0.0, ""
        for pname in referenced:
            a, b = grads[pname], fd[pname]
            resolvable = np.maximum(np.abs(a), np.abs(b)) >= noise_floor
            rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
            rel = np.where(resolvable, rel, 0.0)
            peak = float(rel.max()) if rel.size else 0.0
            if peak > worst:
                worst, worst_param = peak, pname
        ok = worst < tolerance
        report["losses"][name] = {
            "value": loss,
            "max_rel_error": worst,
            "worst_param": worst_param,
            "checked_params": len(referenced),
            "passed": ok,
        }
        report["passed"] = report["passed"] and ok
    return report
