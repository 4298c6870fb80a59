"""Localization simulation against a multi-session map.

A localization run walks a sortie's poses, builds the candidate set within
sensor range, selects a subset under the active policy, and simulates which
selected landmarks are actually matched.  Detection draws are keyed by
(sortie observation seed, iteration, landmark id) so that every policy
evaluated on the same sortie sees the same outcome for the same landmark:
observation ratios between policies then measure selection quality alone.

Translation error is a proxy, not an integrated estimator: the per-iteration
error is |N(0, sigma)| with sigma shrinking in the number of observed
landmarks, and a fixed failure magnitude when too few are observed.  The
calibration makes a condition-matched full-selection run land around 0.05 m
RMS and a condition-mismatched one fail well above the 0.10 m update
threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from atlas.mapcore import (
    MultiSessionMap,
    NewLandmark,
    SessionKind,
    UNBOUNDED_CAP,
)
from atlas.ranking import (
    RankingKind,
    RollingSelectionStats,
    SelectionPolicy,
    WindowRecord,
    selection_order,
    selection_size,
)
from atlas.rng import normal_pair_stream, uniform01
from atlas.summarize import (
    DEFAULT_OBS_WEIGHT,
    DEFAULT_SLACK_PENALTY,
    EXACT_SIZE_LIMIT,
    build_problem,
    apply_summarization,
    solve,
)
from atlas.worldgen import (
    KernelRegistry,
    ObservabilityKernel,
    SortieDataset,
    detection_probabilities,
)

DEFAULT_THRESHOLD_M = 0.10

# Per-vertex coverage floor handed to the summarizer.  A pose observing
# fewer than PoseErrorParams.min_landmarks (4) fails outright and kernel
# peaks run as low as 0.35, so a vertex thinned to the floor needs its
# expected observation count to clear the failure threshold by at least
# one binomial standard deviation: the smallest n with
# 0.35*n - sqrt(n*0.35*0.65) >= 4 is 18.
COVERAGE_FLOOR_PER_VERTEX = 18


@dataclass(frozen=True)
class PoseErrorParams:
    """Calibration of the translation-error proxy."""

    sigma0: float = 0.15  # error scale that shrinks with sqrt(n)
    floor: float = 0.035  # error floor no amount of landmarks removes
    min_landmarks: int = 4  # below this the solve is declared failed
    failure_error_m: float = 1.0  # error assigned to a failed iteration


def pose_error_sigma(n_observed: int, params: PoseErrorParams) -> float:
    return params.floor + params.sigma0 / math.sqrt(n_observed)


def pose_error_proxy(
    n_observed: int,
    params: PoseErrorParams,
    rng: np.random.Generator | None = None,
    z: float | None = None,
) -> float:
    """Translation error for one iteration given how many landmarks matched.

    With fewer than min_landmarks the iteration fails at the fixed failure
    magnitude; otherwise the error is |z| * sigma(n) where z is standard
    normal, drawn from rng unless an explicit z is supplied.
    """
    if n_observed < params.min_landmarks:
        return params.failure_error_m
    if z is None:
        if rng is None:
            raise ValueError("need either rng or z")
        z = float(rng.standard_normal())
    return abs(z) * pose_error_sigma(n_observed, params)


def simulate_observation(
    kernel: ObservabilityKernel, condition: float, rng: np.random.Generator
) -> bool:
    """One Bernoulli detection attempt under the given condition."""
    return bool(rng.random() < kernel.p_detect(condition))


@dataclass(frozen=True)
class LocalizeConfig:
    proxy: PoseErrorParams = PoseErrorParams()
    # First iteration selects everything to warm the rolling window up.
    bootstrap_full_first: bool = True


@dataclass
class IterationRecord:
    candidates: np.ndarray  # ids, ascending
    selected: np.ndarray  # ids, rank order
    observed: np.ndarray  # ids, ascending
    error_m: float


@dataclass
class LocalizationRun:
    policy: SelectionPolicy
    label: str
    condition: float
    dataset_fingerprint: tuple
    iterations: list[IterationRecord]
    observed_counts: np.ndarray
    errors_m: np.ndarray
    tallies_by_pose: dict[int, dict[int, int]]  # landmark -> pose index -> count
    n_failures: int

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def rms_translation_m(self) -> float:
        return float(np.sqrt(np.mean(self.errors_m**2))) if len(self.errors_m) else 0.0

    @property
    def total_selected(self) -> int:
        return int(sum(len(it.selected) for it in self.iterations))

    @property
    def total_observed(self) -> int:
        return int(self.observed_counts.sum())


def _kernel_arrays(
    ids: np.ndarray, kernels: Mapping[int, ObservabilityKernel]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    centers = np.zeros(len(ids))
    widths = np.ones(len(ids))
    peaks = np.zeros(len(ids))  # unknown kernel -> never matches
    for row, lid in enumerate(ids.tolist()):
        k = kernels.get(lid)
        if k is not None:
            centers[row] = k.center
            widths[row] = k.width
            peaks[row] = k.peak
    return centers, widths, peaks


def localize_dataset(
    m: MultiSessionMap,
    dataset: SortieDataset,
    policy: SelectionPolicy,
    kernels: Mapping[int, ObservabilityKernel],
    cfg: LocalizeConfig | None = None,
) -> LocalizationRun:
    """Run the full selection/observation/error loop over one sortie."""
    cfg = cfg or LocalizeConfig()
    index = m.index
    ids, pos = m.landmark_array()
    n_lm = len(ids)
    poses = dataset.poses
    # Candidate mask for all iterations at once: planar query lifted to z=0.
    if n_lm:
        dx = poses[:, 0:1] - pos[None, :, 0]
        dy = poses[:, 1:2] - pos[None, :, 1]
        d2 = dx * dx + dy * dy + pos[None, :, 2] ** 2
        within = d2 <= dataset.sensor_range * dataset.sensor_range
        centers, widths, peaks = _kernel_arrays(ids, kernels)
        p_det = detection_probabilities(centers, widths, peaks, dataset.condition)
        class_of_row = np.fromiter(
            (index.class_of[int(i)] for i in ids), dtype=np.int64, count=n_lm
        )
    else:
        within = np.zeros((len(poses), 0), dtype=bool)
        p_det = np.empty(0)
        class_of_row = np.empty(0, dtype=np.int64)

    stats = RollingSelectionStats(policy.window_len)
    use_scores = policy.ranking in (RankingKind.CLASS_RATIO, RankingKind.SESSION_WEIGHT)
    iterations: list[IterationRecord] = []
    observed_counts = np.zeros(len(poses), dtype=np.int64)
    errors = np.zeros(len(poses))
    tallies: dict[int, dict[int, int]] = {}
    n_failures = 0

    for k in range(len(poses)):
        cand_rows = np.flatnonzero(within[k])
        ids_c = ids[cand_rows]
        if use_scores and len(cand_rows):
            cids = class_of_row[cand_rows]
            uniq, inv = np.unique(cids, return_inverse=True)
            if policy.ranking is RankingKind.CLASS_RATIO:
                vals = np.fromiter(
                    (stats.class_ratio(int(c)) for c in uniq), dtype=np.float64, count=len(uniq)
                )
            else:
                vals = np.fromiter(
                    (
                        max((stats.session_weight(s) for s in index.class_key(int(c))), default=0.0)
                        for c in uniq
                    ),
                    dtype=np.float64,
                    count=len(uniq),
                )
            scores = vals[inv]
        else:
            scores = np.zeros(len(cand_rows))

        if k == 0 and cfg.bootstrap_full_first:
            sel_rows = cand_rows  # warm-up: select the whole candidate set
        else:
            ksel = selection_size(policy.selection_ratio, len(cand_rows), policy.max_selected)
            order = selection_order(policy, ids_c, scores, salt=k)
            sel_rows = cand_rows[order[:ksel]]
        sel_ids = ids[sel_rows]

        if len(sel_rows):
            u = uniform01(dataset.observation_seed, k, sel_ids)
            obs_mask = u < p_det[sel_rows]
            obs_rows = sel_rows[obs_mask]
        else:
            obs_rows = sel_rows
        obs_ids = np.sort(ids[obs_rows])
        n_obs = len(obs_rows)
        observed_counts[k] = n_obs
        if n_obs < cfg.proxy.min_landmarks:
            errors[k] = cfg.proxy.failure_error_m
            n_failures += 1
        else:
            z = normal_pair_stream(dataset.error_seed, k)
            errors[k] = pose_error_proxy(n_obs, cfg.proxy, z=z)

        # Rolling-window update with tallies resolved against this map's index.
        sel_cids, sel_cnt = np.unique(class_of_row[sel_rows], return_counts=True)
        obs_cids, obs_cnt = np.unique(class_of_row[obs_rows], return_counts=True)
        class_sel = dict(zip(sel_cids.tolist(), sel_cnt.tolist()))
        class_obs = dict(zip(obs_cids.tolist(), obs_cnt.tolist()))
        sess_sel: dict[int, int] = {}
        sess_obs: dict[int, int] = {}
        for cid, c in class_sel.items():
            for s in index.class_key(cid):
                sess_sel[s] = sess_sel.get(s, 0) + c
        for cid, c in class_obs.items():
            for s in index.class_key(cid):
                sess_obs[s] = sess_obs.get(s, 0) + c
        stats.push_record(
            WindowRecord(
                selected=tuple(np.sort(sel_ids).tolist()),
                observed=tuple(obs_ids.tolist()),
                class_selected=class_sel,
                class_observed=class_obs,
                session_selected=sess_sel,
                session_observed=sess_obs,
            )
        )
        for lid in obs_ids.tolist():
            tallies.setdefault(int(lid), {})[k] = tallies.get(int(lid), {}).get(k, 0) + 1
        iterations.append(IterationRecord(ids_c, sel_ids, obs_ids, float(errors[k])))

    return LocalizationRun(
        policy=policy,
        label=dataset.label,
        condition=dataset.condition,
        dataset_fingerprint=dataset.fingerprint(),
        iterations=iterations,
        observed_counts=observed_counts,
        errors_m=errors,
        tallies_by_pose=tallies,
        n_failures=n_failures,
    )


@dataclass
class ObservationRatio:
    """Per-sortie observation ratio of a run against the full-selection reference."""

    per_iteration: np.ndarray  # nan where the reference observed nothing
    mean_of_ratios: float  # nan when no iteration was valid
    ratio_of_totals: float
    skipped: tuple[int, ...]

    @property
    def n_valid(self) -> int:
        return int(np.sum(~np.isnan(self.per_iteration)))


def observation_ratio(run: LocalizationRun, reference: LocalizationRun) -> ObservationRatio:
    """Observed-landmark ratio per iteration, run vs reference.

    The reference must be the unranked full-selection policy on the same
    dataset (same observation seed), which makes each ratio at most 1.
    Iterations where the reference observed nothing are skipped and listed;
    with no valid iteration at all the aggregates are nan, because a sortie
    where even full selection matches nothing says nothing about policies.
    """
    if reference.policy.ranking is not RankingKind.ALL or reference.policy.selection_ratio != 1.0:
        raise ValueError("reference run must use the unranked full-selection policy")
    if run.dataset_fingerprint != reference.dataset_fingerprint:
        raise ValueError("runs localized different datasets")
    ref = reference.observed_counts.astype(np.float64)
    got = run.observed_counts.astype(np.float64)
    per = np.full(len(ref), np.nan)
    valid = ref >= 1
    per[valid] = got[valid] / ref[valid]
    skipped = tuple(int(k) for k in np.flatnonzero(~valid))
    mean = float(np.nanmean(per)) if valid.any() else float("nan")
    totals = float(got.sum() / ref.sum()) if ref.sum() > 0 else float("nan")
    return ObservationRatio(per, mean, totals, skipped)


def decide_update(run: LocalizationRun, threshold_m: float = DEFAULT_THRESHOLD_M) -> SessionKind:
    """Rich when localization was too poor, observation otherwise (ties stay light)."""
    return SessionKind.RICH if run.rms_translation_m > threshold_m else SessionKind.OBSERVATION


@dataclass
class PipelineConfig:
    """Everything process_sortie needs besides the map and the dataset."""

    kernels: KernelRegistry = field(default_factory=dict)
    threshold_m: float = DEFAULT_THRESHOLD_M
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    min_per_vertex: int = COVERAGE_FLOOR_PER_VERTEX
    slack_penalty: float = DEFAULT_SLACK_PENALTY
    obs_weight: float = DEFAULT_OBS_WEIGHT
    exact_limit: int = EXACT_SIZE_LIMIT
    use_observation_sessions: bool = True


@dataclass
class SortieReport:
    label: str
    condition: float
    session_kind: SessionKind
    session_id: int | None
    rms_m: float
    n_landmarks_before: int
    n_landmarks_after: int
    n_rich_sessions: int
    n_observation_sessions: int
    summarized: bool
    objective: float | None
    n_proposals: int


def _nearest_vertices(m: MultiSessionMap, poses: np.ndarray, pose_indices: list[int]) -> dict[int, int]:
    vids, vxy = m.vertex_array()
    out: dict[int, int] = {}
    for k in pose_indices:
        d2 = np.sum((vxy - poses[k, :2]) ** 2, axis=1)
        out[k] = int(vids[int(np.argmin(d2))])
    return out


def process_sortie(
    m: MultiSessionMap,
    dataset: SortieDataset,
    policy: SelectionPolicy,
    cfg: PipelineConfig,
    run: LocalizationRun | None = None,
) -> tuple[MultiSessionMap, SortieReport]:
    """Localize, decide rich vs observation, ingest, and re-summarize.

    Returns a new map; the input map is never mutated, so a failure at any
    point leaves the caller's state untouched.  A pre-computed run for this
    (map, dataset, policy) may be passed to avoid localizing twice.
    """
    if run is None:
        run = localize_dataset(m, dataset, policy, cfg.kernels, cfg.localize)
    kind = decide_update(run, cfg.threshold_m)
    n_before = len(m.landmarks)
    work = m.copy()
    summarized = False
    objective = None
    session_id: int | None = None

    if kind is SessionKind.RICH:
        proposals = dataset.proposals
        new_landmarks = [NewLandmark(p.position, p.observations) for p in proposals]
        session_id = work.add_rich_session(
            dataset.poses, new_landmarks, run.tallies_by_pose, label=dataset.label
        )
        for lid, prop in zip(work.landmarks_created_by(session_id), proposals):
            cfg.kernels[lid] = prop.kernel
        if work.landmark_cap != UNBOUNDED_CAP and len(work.landmarks) > work.landmark_cap:
            problem = build_problem(
                work,
                keep_count=work.landmark_cap,
                min_per_vertex=cfg.min_per_vertex,
                slack_penalty=cfg.slack_penalty,
                obs_weight=cfg.obs_weight,
            )
            solution = solve(problem, exact_limit=cfg.exact_limit)
            work = apply_summarization(work, solution)
            summarized = True
            objective = solution.objective
    elif cfg.use_observation_sessions:
        pose_indices = sorted({k for per in run.tallies_by_pose.values() for k in per})
        nearest = _nearest_vertices(work, dataset.poses, pose_indices) if pose_indices else {}
        observed: dict[int, dict[int, int]] = {}
        for lid, per_pose in run.tallies_by_pose.items():
            per_vertex: dict[int, int] = {}
            for k, c in per_pose.items():
                vid = nearest[k]
                per_vertex[vid] = per_vertex.get(vid, 0) + c
            observed[lid] = per_vertex
        session_id = work.add_observation_session(observed, label=dataset.label)

    report = SortieReport(
        label=dataset.label,
        condition=dataset.condition,
        session_kind=kind,
        session_id=session_id,
        rms_m=run.rms_translation_m,
        n_landmarks_before=n_before,
        n_landmarks_after=len(work.landmarks),
        n_rich_sessions=work.n_rich_sessions,
        n_observation_sessions=work.n_observation_sessions,
        summarized=summarized,
        objective=objective,
        n_proposals=len(dataset.proposals),
    )
    return work, report
