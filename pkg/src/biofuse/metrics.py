"""Evaluation harness: trial generation, EER/FRR metrics, subject-disjoint CV.

Scores are similarities (higher = more alike); a trial is accepted when its
score is >= the threshold.  FAR sweeps therefore fall and FRR sweeps rise as
the threshold increases, and the EER sits where they cross (linearly
interpolated between bracketing candidate thresholds).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Modality, Recording
from .errors import EvalError, ValidationError
from .fusion import (
    FusionRule,
    ScoreNormalizer,
    combine_raw,
    fit_normalizer_arrays,
    fuse_arrays,
)
from .preprocess import (
    NanPolicy,
    PairedSample,
    apply_standardizer,
    build_dataset,
    fit_standardizer,
    pair_samples,
)
from .tnn import (
    ArchKind,
    EmbeddingModel,
    TrainConfig,
    fusion_arch,
    single_modality_arch,
    train,
)
from .verify import Scenario

FAR_TARGETS = (0.01, 0.001, 0.0)

_MAX_ROUND_BITS = 64  # enrollment rounds are tracked in a uint64 bitmask


# ---------------------------------------------------------------------------
# Threshold sweeps


def _sweep(genuine: np.ndarray, impostor: np.ndarray):
    """FAR/FRR at every distinct score plus one sentinel above the maximum."""
    g = np.sort(genuine)
    i = np.sort(impostor)
    thr = np.unique(np.concatenate([g, i]))
    thr = np.append(thr, np.nextafter(thr[-1], np.inf))
    far = (i.size - np.searchsorted(i, thr, side="left")) / i.size
    frr = np.searchsorted(g, thr, side="left") / g.size
    return thr, far, frr


def eer_from_scores(genuine, impostor) -> tuple[float, float]:
    """EER and its threshold.

    Perfectly separated score sets return EER 0 at the midpoint of the gap;
    otherwise the FAR/FRR crossing is found over the candidate sweep, with
    linear interpolation between bracketing thresholds.  Exact-zero plateaus
    resolve to the largest candidate threshold (the lower-FAR side).
    """
    g = np.asarray(list(genuine), dtype=np.float64)
    i = np.asarray(list(impostor), dtype=np.float64)
    if g.size == 0 or i.size == 0:
        raise EvalError("EER needs non-empty genuine and impostor score lists")
    if g.min() > i.max():
        return 0.0, float((g.min() + i.max()) / 2.0)
    thr, far, frr = _sweep(g, i)
    d = far - frr
    k = int(np.argmax(d <= 0.0))  # exists: d ends at -1
    if d[k] == 0.0:
        j = k
        while j + 1 < d.size and d[j + 1] == 0.0:
            j += 1
        return float(far[j]), float(thr[j])
    t = d[k - 1] / (d[k - 1] - d[k])
    eer = far[k - 1] + t * (far[k] - far[k - 1])
    theta = thr[k - 1] + t * (thr[k] - thr[k - 1])
    return float(eer), float(theta)


def frr_at_far_scores(genuine, impostor, far_target: float) -> tuple[float, float]:
    """FRR at the smallest threshold whose FAR is <= far_target.

    For far_target 0 the threshold lands strictly above the maximum impostor
    score.
    """
    if not 0.0 <= far_target <= 1.0:
        raise ValidationError("far_target must be in [0, 1]")
    g = np.asarray(list(genuine), dtype=np.float64)
    i = np.asarray(list(impostor), dtype=np.float64)
    if g.size == 0 or i.size == 0:
        raise EvalError("FRR@FAR needs non-empty genuine and impostor score lists")
    thr, far, frr = _sweep(g, i)
    k = int(np.argmax(far <= far_target))  # far is non-increasing; far[-1] == 0
    return float(frr[k]), float(thr[k])


# ---------------------------------------------------------------------------
# Fold planning


@dataclass(frozen=True)
class FoldPlan:
    """Subject-disjoint split: per fold a (train, test) subject partition."""

    k: int
    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]


def plan_folds(subjects, k: int = 6, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, contiguous partition into k test groups; deterministic."""
    subjects = sorted(subjects)
    if len(set(subjects)) != len(subjects):
        raise ValidationError("subject list contains duplicates")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > len(subjects):
        raise ValidationError(f"k={k} exceeds the {len(subjects)} available subjects")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    shuffled = [subjects[j] for j in order]
    folds = []
    for chunk in np.array_split(np.arange(len(subjects)), k):
        test = tuple(sorted(shuffled[j] for j in chunk))
        train = tuple(s for s in subjects if s not in set(test))
        folds.append((train, test))
    return FoldPlan(k=k, folds=tuple(folds))


# ---------------------------------------------------------------------------
# Trial sets


@dataclass
class TrialBlock:
    """Array-backed trials: one score plus metadata per row."""

    scores: np.ndarray          # float64
    claimed: np.ndarray         # object, claimed identity
    ver_subject: np.ndarray     # object, subject who supplied the verification sample
    ver_round: np.ndarray       # int64
    enr_round_mask: np.ndarray  # uint64 bitmask of enrollment rounds used

    @property
    def n(self) -> int:
        return int(self.scores.size)

    @staticmethod
    def concat(blocks: list["TrialBlock"]) -> "TrialBlock":
        return TrialBlock(
            scores=np.concatenate([b.scores for b in blocks]),
            claimed=np.concatenate([b.claimed for b in blocks]),
            ver_subject=np.concatenate([b.ver_subject for b in blocks]),
            ver_round=np.concatenate([b.ver_round for b in blocks]),
            enr_round_mask=np.concatenate([b.enr_round_mask for b in blocks]),
        )


@dataclass
class TrialSet:
    scenario: Scenario
    genuine: TrialBlock
    impostor: TrialBlock
    excluded_subjects: tuple[str, ...] = ()

    def claimed_identities(self) -> list[str]:
        ids = set(self.genuine.claimed.tolist()) | set(self.impostor.claimed.tolist())
        return sorted(ids)

    def scores_for_identity(self, identity: str) -> tuple[np.ndarray, np.ndarray]:
        g = self.genuine.scores[self.genuine.claimed == identity]
        i = self.impostor.scores[self.impostor.claimed == identity]
        return g, i

    def round_exclusion_violations(self) -> int:
        """Genuine trials whose enrollment rounds include the verification round."""
        mask = self.genuine.enr_round_mask
        shift = self.genuine.ver_round.astype(np.uint64)
        return int((((mask >> shift) & np.uint64(1)) != 0).sum())

    @staticmethod
    def concat(sets: list["TrialSet"]) -> "TrialSet":
        if not sets:
            raise EvalError("cannot pool zero trial sets")
        scenario = sets[0].scenario
        if any(ts.scenario is not scenario for ts in sets):
            raise ValidationError("pooled trial sets must share one scenario")
        excluded = tuple(sorted({s for ts in sets for s in ts.excluded_subjects}))
        return TrialSet(
            scenario=scenario,
            genuine=TrialBlock.concat([ts.genuine for ts in sets]),
            impostor=TrialBlock.concat([ts.impostor for ts in sets]),
            excluded_subjects=excluded,
        )


@dataclass
class _Structure:
    """Sample-index layout of all trials; shared across modalities of a pair set."""

    scenario: Scenario
    g_ver: np.ndarray
    g_claimed: np.ndarray
    g_enr_idx: np.ndarray | None
    g_enr_mask: np.ndarray
    i_ver: np.ndarray
    i_claimed: np.ndarray
    i_enr_idx: np.ndarray | None
    i_enr_mask: np.ndarray
    excluded: tuple[str, ...]


def _round_bit(rounds: np.ndarray) -> np.ndarray:
    return np.left_shift(np.uint64(1), rounds.astype(np.uint64))


def _build_structure(labels: np.ndarray, rounds: np.ndarray, scenario: Scenario) -> _Structure:
    subjects = sorted(set(labels.tolist()))
    idx_by_subject = {s: np.flatnonzero(labels == s) for s in subjects}
    rounds_by_subject = {s: np.unique(rounds[idx_by_subject[s]]) for s in subjects}
    eligible = [s for s in subjects if rounds_by_subject[s].size >= 2]
    excluded = tuple(s for s in subjects if rounds_by_subject[s].size < 2)
    if len(eligible) < 2:
        raise EvalError("trial building needs at least two subjects with two rounds each")
    mask_by_subject = {
        s: np.uint64(sum(1 << int(r) for r in rounds_by_subject[s])) for s in eligible
    }

    if scenario is Scenario.S1:
        g_enr_parts, g_ver_parts = [], []
        for s in eligible:
            idx = idx_by_subject[s]
            r = rounds[idx]
            a, b = np.triu_indices(idx.size, k=1)
            keep = r[a] != r[b]
            g_enr_parts.append(idx[a[keep]])
            g_ver_parts.append(idx[b[keep]])
        g_enr = np.concatenate(g_enr_parts)
        g_ver = np.concatenate(g_ver_parts)
        i_enr_parts, i_ver_parts, i_claimed_parts = [], [], []
        for s in eligible:
            enr_idx = idx_by_subject[s]
            for t in eligible:
                if t == s:
                    continue
                ver_idx = idx_by_subject[t]
                ee, vv = np.meshgrid(enr_idx, ver_idx, indexing="ij")
                ee, vv = ee.ravel(), vv.ravel()
                keep = rounds[ee] != rounds[vv]
                ee, vv = ee[keep], vv[keep]
                i_enr_parts.append(ee)
                i_ver_parts.append(vv)
                i_claimed_parts.append(np.full(ee.size, s, dtype=object))
        i_enr = np.concatenate(i_enr_parts)
        i_ver = np.concatenate(i_ver_parts)
        return _Structure(
            scenario=scenario,
            g_ver=g_ver,
            g_claimed=labels[g_ver],
            g_enr_idx=g_enr,
            g_enr_mask=_round_bit(rounds[g_enr]),
            i_ver=i_ver,
            i_claimed=np.concatenate(i_claimed_parts),
            i_enr_idx=i_enr,
            i_enr_mask=_round_bit(rounds[i_enr]),
            excluded=excluded,
        )

    # S2/S3: enrollment = all of the claimed subject's samples from other rounds.
    g_ver_parts, i_ver_parts, i_claimed_parts = [], [], []
    g_mask_parts, i_mask_parts = [], []
    for s in eligible:
        idx = idx_by_subject[s]
        g_ver_parts.append(idx)
        g_mask_parts.append(mask_by_subject[s] & ~_round_bit(rounds[idx]))
        others = np.concatenate([idx_by_subject[t] for t in eligible if t != s])
        i_ver_parts.append(others)
        i_claimed_parts.append(np.full(others.size, s, dtype=object))
        i_mask_parts.append(mask_by_subject[s] & ~_round_bit(rounds[others]))
    g_ver = np.concatenate(g_ver_parts)
    return _Structure(
        scenario=scenario,
        g_ver=g_ver,
        g_claimed=labels[g_ver],
        g_enr_idx=None,
        g_enr_mask=np.concatenate(g_mask_parts),
        i_ver=np.concatenate(i_ver_parts),
        i_claimed=np.concatenate(i_claimed_parts),
        i_enr_idx=None,
        i_enr_mask=np.concatenate(i_mask_parts),
        excluded=excluded,
    )


def _pairwise_d2(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    sq = (e * e).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    return np.maximum(d2, 0.0)


def _best_scores(
    d2: np.ndarray,
    labels: np.ndarray,
    rounds: np.ndarray,
    claimed: np.ndarray,
    ver: np.ndarray,
) -> np.ndarray:
    """Best-match similarity against the claimed subject's cross-round samples."""
    out = np.empty(ver.size, dtype=np.float64)
    for s in sorted(set(claimed.tolist())):
        sel = np.flatnonzero(claimed == s)
        enr_idx = np.flatnonzero(labels == s)
        ver_idx = ver[sel].astype(np.intp)
        sim = -np.sqrt(d2[np.ix_(enr_idx, ver_idx)])
        same_round = rounds[enr_idx][:, None] == rounds[ver_idx][None, :]
        sim[same_round] = -np.inf
        out[sel] = sim.max(axis=0)
    return out


def _structure_scores(structure: _Structure, embeddings: np.ndarray, labels, rounds):
    d2 = _pairwise_d2(embeddings)
    if structure.scenario is Scenario.S1:
        g = -np.sqrt(d2[structure.g_enr_idx, structure.g_ver])
        i = -np.sqrt(d2[structure.i_enr_idx, structure.i_ver])
        return g, i
    g = _best_scores(d2, labels, rounds, structure.g_claimed, structure.g_ver)
    i = _best_scores(d2, labels, rounds, structure.i_claimed, structure.i_ver)
    return g, i


def _blocks_from(structure: _Structure, labels, rounds, g_scores, i_scores) -> TrialSet:
    return TrialSet(
        scenario=structure.scenario,
        genuine=TrialBlock(
            scores=np.asarray(g_scores, dtype=np.float64),
            claimed=structure.g_claimed,
            ver_subject=labels[structure.g_ver],
            ver_round=rounds[structure.g_ver],
            enr_round_mask=structure.g_enr_mask,
        ),
        impostor=TrialBlock(
            scores=np.asarray(i_scores, dtype=np.float64),
            claimed=structure.i_claimed,
            ver_subject=labels[structure.i_ver],
            ver_round=rounds[structure.i_ver],
            enr_round_mask=structure.i_enr_mask,
        ),
        excluded_subjects=structure.excluded,
    )


def _sample_metadata(samples) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([s.subject_id for s in samples], dtype=object)
    rounds = np.array([s.round_id for s in samples], dtype=np.int64)
    if rounds.max() >= _MAX_ROUND_BITS:
        raise EvalError(f"round ids must stay below {_MAX_ROUND_BITS}")
    return labels, rounds


def build_trials(
    samples,
    models,
    scenario: Scenario,
    *,
    fusion_rule: FusionRule | None = None,
    normalizer: ScoreNormalizer | None = None,
    raw_fusion: bool = False,
) -> TrialSet:
    """Score all genuine and zero-effort impostor trials for a test set.

    S1 scores every cross-round (enrollment, verification) pair once; S2/S3
    score each verification sample against the best match among the claimed
    subject's samples from other rounds.  Impostor trials present every other
    subject's verification samples against each claimed identity under the
    same rule.  Subjects with fewer than two rounds are excluded entirely and
    listed in the result.

    With fusion_rule set, `samples` must be PairedSample and `models` the
    (brain, eye) model pair; per-modality scores are normalized (unless
    raw_fusion) and combined.
    """
    if not samples:
        raise EvalError("no samples to build trials from")
    paired = isinstance(samples[0], PairedSample)
    labels, rounds = _sample_metadata(samples)
    structure = _build_structure(labels, rounds, scenario)

    if fusion_rule is None:
        if not isinstance(models, EmbeddingModel):
            raise ValidationError("single-model trial building takes one EmbeddingModel")
        emb = models.embed_batch(samples)
        g, i = _structure_scores(structure, emb, labels, rounds)
        return _blocks_from(structure, labels, rounds, g, i)

    if not paired:
        raise ValidationError("score fusion needs paired brain/eye samples")
    try:
        model_brain, model_eye = models
    except (TypeError, ValueError):
        raise ValidationError("score fusion takes a (brain_model, eye_model) pair") from None
    emb_b = model_brain.embed_batch([p.brain for p in samples])
    emb_e = model_eye.embed_batch([p.eye for p in samples])
    gb, ib = _structure_scores(structure, emb_b, labels, rounds)
    ge, ie = _structure_scores(structure, emb_e, labels, rounds)
    if raw_fusion:
        g = combine_raw(ge, gb, fusion_rule)
        i = combine_raw(ie, ib, fusion_rule)
    else:
        if normalizer is None:
            raise ValidationError("normalized score fusion needs a fitted ScoreNormalizer")
        ge_n, gb_n = normalizer.normalize_arrays(ge, gb)
        ie_n, ib_n = normalizer.normalize_arrays(ie, ib)
        g = fuse_arrays(ge_n, gb_n, fusion_rule)
        i = fuse_arrays(ie_n, ib_n, fusion_rule)
    return _blocks_from(structure, labels, rounds, g, i)


def fusion_calibration_normalizer(
    pairs, model_brain: EmbeddingModel, model_eye: EmbeddingModel, scenario: Scenario
) -> ScoreNormalizer:
    """Fit the per-modality min-max normalizer on calibration (training) pairs."""
    if not pairs:
        raise EvalError("normalizer calibration needs paired samples")
    labels, rounds = _sample_metadata(pairs)
    structure = _build_structure(labels, rounds, scenario)
    emb_b = model_brain.embed_batch([p.brain for p in pairs])
    emb_e = model_eye.embed_batch([p.eye for p in pairs])
    gb, ib = _structure_scores(structure, emb_b, labels, rounds)
    ge, ie = _structure_scores(structure, emb_e, labels, rounds)
    return fit_normalizer_arrays(
        np.concatenate([ge, ie]), np.concatenate([gb, ib])
    )


# ---------------------------------------------------------------------------
# Metrics over trial sets


def compute_eer(trials: TrialSet) -> tuple[float, float]:
    return eer_from_scores(trials.genuine.scores, trials.impostor.scores)


def frr_at_far(trials: TrialSet, far_target: float) -> tuple[float, float]:
    return frr_at_far_scores(trials.genuine.scores, trials.impostor.scores, far_target)


@dataclass
class PerSubjectEer:
    by_subject: dict
    thresholds: dict
    mean: float
    variance: float
    skipped: tuple[str, ...] = ()


def per_subject_eer(trials: TrialSet) -> PerSubjectEer:
    """EER per claimed identity plus the mean/variance across subjects."""
    by_subject: dict[str, float] = {}
    thresholds: dict[str, float] = {}
    skipped = []
    for identity in trials.claimed_identities():
        g, i = trials.scores_for_identity(identity)
        if g.size == 0 or i.size == 0:
            warnings.warn(
                f"subject {identity!r} lacks genuine or impostor trials; excluded",
                stacklevel=2,
            )
            skipped.append(identity)
            continue
        eer, theta = eer_from_scores(g, i)
        by_subject[identity] = eer
        thresholds[identity] = theta
    if not by_subject:
        raise EvalError("no subject has both genuine and impostor trials")
    values = np.asarray(list(by_subject.values()))
    return PerSubjectEer(
        by_subject=by_subject,
        thresholds=thresholds,
        mean=float(values.mean()),
        variance=float(values.var()),
        skipped=tuple(skipped),
    )


# ---------------------------------------------------------------------------
# Full experiment


@dataclass(frozen=True)
class ExperimentConfig:
    """One evaluation run: scenario, modality/fusion choice, folds, seeds.

    With a score-fusion rule set, `modality` names the eye side and brain is
    the implicit partner; feature-fusion archs take their eye branch from
    `fusion_eye`.
    """

    scenario: Scenario = Scenario.S2
    modality: str = "brain"
    fusion: FusionRule | None = None
    fusion_eye: str = "eye-pupil"
    folds: int = 6
    seed: int = 0
    raw_fusion: bool = False
    deterministic: bool = True
    nan_policy: NanPolicy = NanPolicy()
    train: TrainConfig = TrainConfig()

    def __post_init__(self) -> None:
        known = {"brain", "eye", "eye-pupil", "fusion-a", "fusion-b"}
        if self.modality not in known:
            raise ValidationError(f"modality must be one of {sorted(known)}")
        if self.fusion_eye not in ("eye", "eye-pupil"):
            raise ValidationError("fusion_eye must be 'eye' or 'eye-pupil'")
        if self.fusion is not None and self.modality not in ("eye", "eye-pupil"):
            raise ValidationError(
                "score fusion pairs brain with an eye modality; "
                "set modality to 'eye' or 'eye-pupil'"
            )
        if self.folds < 2:
            raise ValidationError("cross-validation needs at least two folds")


@dataclass
class FoldResult:
    fold: int
    train_subjects: tuple
    test_subjects: tuple
    n_genuine: int
    n_impostor: int
    eer: float
    eer_threshold: float | None
    frr_at_far: dict
    per_subject_eer: dict
    per_subject_mean: float
    per_subject_variance: float
    per_user_thresholds: dict | None
    s3_pooled_far: float | None
    s3_pooled_frr: float | None
    excluded_subjects: tuple
    models: list
    round_exclusion_violations: int
    train_test_overlap: int
    foreign_trial_subjects: int

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "train_subjects": list(self.train_subjects),
            "test_subjects": list(self.test_subjects),
            "n_genuine": self.n_genuine,
            "n_impostor": self.n_impostor,
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "frr_at_far": dict(self.frr_at_far),
            "per_subject_eer": dict(self.per_subject_eer),
            "per_subject_mean": self.per_subject_mean,
            "per_subject_variance": self.per_subject_variance,
            "per_user_thresholds": self.per_user_thresholds,
            "s3_pooled_far": self.s3_pooled_far,
            "s3_pooled_frr": self.s3_pooled_frr,
            "excluded_subjects": list(self.excluded_subjects),
            "models": self.models,
            "audits": {
                "round_exclusion_violations": self.round_exclusion_violations,
                "train_test_overlap": self.train_test_overlap,
                "foreign_trial_subjects": self.foreign_trial_subjects,
            },
        }


@dataclass
class EvalReport:
    provenance: dict
    folds: list
    pooled: dict

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "folds": [f.to_dict() for f in self.folds],
            "pooled": self.pooled,
        }

    def to_json(self) -> str:
        import json

        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_tag(self) -> str:
        p = self.provenance
        return (
            f"modality={p['modality']},fusion={p['fusion']},"
            f"scenario={p['scenario']},seed={p['seed']}"
        )

    def to_rows(self) -> list[tuple[str, str, str]]:
        """Flatten fold and pooled metrics into (config, metric, value) rows."""
        tag = self.config_tag()
        rows: list[tuple[str, str, str]] = []

        def walk(prefix: str, value) -> None:
            if isinstance(value, dict):
                for key in sorted(value):
                    walk(f"{prefix}.{key}", value[key])
            elif isinstance(value, (list, tuple)):
                rows.append((tag, prefix, ";".join(str(v) for v in value)))
            else:
                rows.append((tag, prefix, repr(value) if isinstance(value, float) else str(value)))

        for f in self.folds:
            d = f.to_dict()
            for key in sorted(d):
                if key in ("train_subjects", "test_subjects", "models"):
                    continue
                walk(f"fold{f.fold}.{key}", d[key])
        walk("pooled", self.pooled)
        return rows


def _far_key(target: float) -> str:
    return repr(float(target))


def _tailored_rates(trials: TrialSet, thresholds: dict) -> tuple[float, float]:
    """Pooled FAR/FRR when every claimed identity uses its own threshold."""
    g_thr = np.array([thresholds[c] for c in trials.genuine.claimed])
    i_thr = np.array([thresholds[c] for c in trials.impostor.claimed])
    frr = float((trials.genuine.scores < g_thr).mean())
    far = float((trials.impostor.scores >= i_thr).mean())
    return far, frr


def _scenario_metrics(trials: TrialSet, scenario: Scenario) -> dict:
    """EER / threshold / FRR@FAR under the scenario's reporting convention.

    S1/S2 pool all scores under one threshold sweep; S3 averages per-subject
    metrics (each subject operating at its own threshold).
    """
    if trials.genuine.n == 0 or trials.impostor.n == 0:
        raise EvalError("trial set has an empty genuine or impostor side")
    pse = per_subject_eer(trials)
    out: dict = {
        "per_subject": pse,
        "n_genuine": trials.genuine.n,
        "n_impostor": trials.impostor.n,
    }
    if scenario is Scenario.S3:
        frr_map = {}
        for target in FAR_TARGETS:
            per_subj = []
            for identity in pse.by_subject:
                g, i = trials.scores_for_identity(identity)
                frr, _ = frr_at_far_scores(g, i, target)
                per_subj.append(frr)
            frr_map[_far_key(target)] = float(np.mean(per_subj))
        far_pooled, frr_pooled = _tailored_rates(trials, pse.thresholds)
        out.update(
            eer=pse.mean,
            eer_threshold=None,
            frr_at_far=frr_map,
            per_user_thresholds={k: float(v) for k, v in pse.thresholds.items()},
            s3_pooled_far=far_pooled,
            s3_pooled_frr=frr_pooled,
        )
    else:
        eer, theta = compute_eer(trials)
        frr_map = {
            _far_key(t): frr_at_far(trials, t)[0] for t in FAR_TARGETS
        }
        out.update(
            eer=eer,
            eer_threshold=theta,
            frr_at_far=frr_map,
            per_user_thresholds=None,
            s3_pooled_far=None,
            s3_pooled_frr=None,
        )
    for key in ("eer",):
        if not 0.0 <= out[key] <= 1.0:
            raise EvalError(f"{key} out of [0, 1]")
    if any(not 0.0 <= v <= 1.0 for v in out["frr_at_far"].values()):
        raise EvalError("FRR out of [0, 1]")
    return out


def _resolve_modalities(config: ExperimentConfig) -> tuple[str, list[Modality]]:
    if config.fusion is not None:
        return "score", [Modality.BRAIN, Modality(config.modality)]
    if config.modality in ("fusion-a", "fusion-b"):
        return "feature", [Modality.BRAIN, Modality(config.fusion_eye)]
    return "single", [Modality(config.modality)]


def run_experiment(recordings: list[Recording], config: ExperimentConfig) -> EvalReport:
    """Full per-fold pipeline: preprocess, train, score trials, report.

    Standardizers are fitted on each fold's training subjects only; models
    train per fold with seed = train.seed + 1000*fold (+1 for the eye model
    in score fusion); deterministic given the config.
    """
    subjects = sorted({r.subject_id for r in recordings})
    plan = plan_folds(subjects, config.folds, config.seed)
    mode, modalities = _resolve_modalities(config)

    datasets = {}
    prep_totals = {}
    for m in modalities:
        samples, report = build_dataset(recordings, m, config.nan_policy)
        datasets[m] = samples
        prep_totals[m.value] = {
            "extracted": report.total("extracted"),
            "rejected": report.total("rejected"),
            "skipped": report.total("skipped"),
        }

    fold_results: list[FoldResult] = []
    fold_trialsets: list[TrialSet] = []
    for fi, (train_subjects, test_subjects) in enumerate(plan.folds):
        scope = f"fold{fi}"
        train_set, test_set = set(train_subjects), set(test_subjects)
        tr, te = {}, {}
        for m in modalities:
            tr_raw = [s for s in datasets[m] if s.subject_id in train_set]
            te_raw = [s for s in datasets[m] if s.subject_id in test_set]
            if not tr_raw or not te_raw:
                raise EvalError(f"{scope}: modality {m.value} has an empty split")
            std = fit_standardizer(tr_raw, scope=scope)
            tr[m] = [apply_standardizer(std, s) for s in tr_raw]
            te[m] = [apply_standardizer(std, s) for s in te_raw]
            if any(s.standardized_by != scope for s in tr[m] + te[m]):
                raise EvalError(f"{scope}: standardizer provenance mismatch")

        base_seed = config.train.seed + 1000 * fi
        fold_cfg = replace(config.train, seed=base_seed)
        model_provs: list[dict] = []
        if mode == "single":
            m = modalities[0]
            model, history = train(
                tr[m], single_modality_arch(m), fold_cfg, provenance={"fold_id": scope}
            )
            trials = build_trials(te[m], model, config.scenario)
            model_provs.append(_model_summary(model, history))
        elif mode == "feature":
            kind = ArchKind(config.modality)
            eye_m = modalities[1]
            pairs_tr = pair_samples(tr[Modality.BRAIN], tr[eye_m])
            pairs_te = pair_samples(te[Modality.BRAIN], te[eye_m])
            model, history = train(
                pairs_tr, fusion_arch(kind, eye_m), fold_cfg, provenance={"fold_id": scope}
            )
            trials = build_trials(pairs_te, model, config.scenario)
            model_provs.append(_model_summary(model, history))
        else:
            eye_m = modalities[1]
            model_b, hist_b = train(
                tr[Modality.BRAIN],
                single_modality_arch(Modality.BRAIN),
                fold_cfg,
                provenance={"fold_id": scope},
            )
            model_e, hist_e = train(
                tr[eye_m],
                single_modality_arch(eye_m),
                replace(fold_cfg, seed=base_seed + 1),
                provenance={"fold_id": scope},
            )
            pairs_te = pair_samples(te[Modality.BRAIN], te[eye_m])
            normalizer = None
            if not config.raw_fusion:
                pairs_tr = pair_samples(tr[Modality.BRAIN], tr[eye_m])
                normalizer = fusion_calibration_normalizer(
                    pairs_tr, model_b, model_e, config.scenario
                )
            trials = build_trials(
                pairs_te,
                (model_b, model_e),
                config.scenario,
                fusion_rule=config.fusion,
                normalizer=normalizer,
                raw_fusion=config.raw_fusion,
            )
            model_provs.extend([_model_summary(model_b, hist_b), _model_summary(model_e, hist_e)])

        metrics = _scenario_metrics(trials, config.scenario)
        pse: PerSubjectEer = metrics["per_subject"]
        trial_subjects = set(trials.genuine.claimed.tolist()) | set(
            trials.genuine.ver_subject.tolist()
        ) | set(trials.impostor.claimed.tolist()) | set(trials.impostor.ver_subject.tolist())
        fold_results.append(
            FoldResult(
                fold=fi,
                train_subjects=train_subjects,
                test_subjects=test_subjects,
                n_genuine=metrics["n_genuine"],
                n_impostor=metrics["n_impostor"],
                eer=metrics["eer"],
                eer_threshold=metrics["eer_threshold"],
                frr_at_far=metrics["frr_at_far"],
                per_subject_eer={k: float(v) for k, v in pse.by_subject.items()},
                per_subject_mean=pse.mean,
                per_subject_variance=pse.variance,
                per_user_thresholds=metrics["per_user_thresholds"],
                s3_pooled_far=metrics["s3_pooled_far"],
                s3_pooled_frr=metrics["s3_pooled_frr"],
                excluded_subjects=trials.excluded_subjects,
                models=model_provs,
                round_exclusion_violations=trials.round_exclusion_violations(),
                train_test_overlap=len(train_set & test_set),
                foreign_trial_subjects=len(trial_subjects - test_set),
            )
        )
        fold_trialsets.append(trials)

    pooled_trials = TrialSet.concat(fold_trialsets)
    pooled_metrics = _scenario_metrics(pooled_trials, config.scenario)
    pooled_pse: PerSubjectEer = pooled_metrics["per_subject"]
    pooled = {
        "eer": pooled_metrics["eer"],
        "eer_threshold": pooled_metrics["eer_threshold"],
        "eer_mean_of_folds": float(np.mean([f.eer for f in fold_results])),
        "frr_at_far": pooled_metrics["frr_at_far"],
        "n_genuine": pooled_metrics["n_genuine"],
        "n_impostor": pooled_metrics["n_impostor"],
        "per_subject_eer": {k: float(v) for k, v in pooled_pse.by_subject.items()},
        "per_subject_mean": pooled_pse.mean,
        "per_subject_variance": pooled_pse.variance,
        "s3_pooled_far": pooled_metrics["s3_pooled_far"],
        "s3_pooled_frr": pooled_metrics["s3_pooled_frr"],
    }
    if config.scenario is not Scenario.S3:
        # Both pooling conventions: all scores pooled, and the fold-mean EER.
        pooled["eer_pooled_scores"] = pooled_metrics["eer"]

    provenance = {
        "scenario": config.scenario.value,
        "modality": config.modality,
        "fusion": None if config.fusion is None else config.fusion.value,
        "fusion_eye": config.fusion_eye,
        "raw_fusion": config.raw_fusion,
        "folds": config.folds,
        "seed": config.seed,
        "deterministic": config.deterministic,
        "nan_policy": {"max_nan_fraction": config.nan_policy.max_nan_fraction},
        "train": {
            "margin": config.train.margin,
            "batch_size": config.train.batch_size,
            "epochs": config.train.epochs,
            "learning_rate": config.train.learning_rate,
            "optimizer": config.train.optimizer,
            "seed": config.train.seed,
            "deterministic": config.train.deterministic,
            "samples_per_subject": config.train.samples_per_subject,
        },
        "corpus": {"n_subjects": len(subjects), "subjects": subjects},
        "preprocess": prep_totals,
        "models_per_fold": len(fold_results[0].models),
        "model_arches": [m["arch"] for m in fold_results[0].models],
    }
    return EvalReport(provenance=provenance, folds=fold_results, pooled=pooled)


def _model_summary(model: EmbeddingModel, history: list[float]) -> dict:
    return {
        "arch": model.arch.tag,
        "seed": model.provenance.get("seed"),
        "fold_id": model.provenance.get("fold_id"),
        "n_weights": int(model.n_weights),
        "first_epoch_loss": float(history[0]) if history else None,
        "final_epoch_loss": float(history[-1]) if history else None,
    }
