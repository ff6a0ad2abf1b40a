"""Statistical machinery: path grouping, PCA selection, delay prediction.

Paths whose delays correlate strongly are grouped together; principal
component analysis of each group's covariance decides how many
representative paths are worth measuring, and the conditional Gaussian
update predicts every unmeasured delay from the measured ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .timing import SETUP, DelayModel

VARIANCE_CAPTURE = 0.95  # eigenvalue mass retained per group
RIDGE_SCALE = 1e-8       # diagonal regularization for tested-block inversion

START_THRESHOLD = 0.95
THRESHOLD_STEP = 0.05


class PredictionError(RuntimeError):
    """Tested-path covariance block singular beyond ridge repair."""


@dataclass
class PathGroup:
    group_index: int
    members: list[str]
    threshold_at_extraction: float


@dataclass
class PcaResult:
    components: np.ndarray   # loadings of the retained PCs, one column each
    eigenvalues: np.ndarray  # all eigenvalues, sorted descending
    pc_count: int


@dataclass
class PredictedDelay:
    edge_id: str
    posterior_mean: float
    posterior_std: float

    @property
    def lower(self) -> float:
        return self.posterior_mean - 3.0 * self.posterior_std

    @property
    def upper(self) -> float:
        return self.posterior_mean + 3.0 * self.posterior_std


def _setup_indices(model: DelayModel, ids: list[str]) -> np.ndarray:
    return np.array([model.index_of(e, SETUP) for e in ids], dtype=int)


def _correlation(cov: np.ndarray) -> np.ndarray:
    sig = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    denom = np.outer(sig, sig)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(denom > 0, cov / denom, 0.0)
    np.fill_diagonal(rho, 1.0)
    return rho


def extract_paths(remaining: Iterable[str], model: DelayModel,
                  corr_th: float, group_index: int = 0) -> PathGroup:
    """Greedily grow one high-correlation group out of the remaining paths.

    Seeds with the highest-correlation pair at or above the threshold, then
    keeps adding the path with the strongest correlation to any current
    member.  If no pair qualifies, the single largest-variance path is
    returned so the caller always makes progress.
    """
    ids = sorted(remaining)
    if not ids:
        raise ValueError("no paths left to extract")
    idx = _setup_indices(model, ids)
    cov = model.covariance[np.ix_(idx, idx)]
    n = len(ids)
    if n == 1:
        return PathGroup(group_index, ids, corr_th)

    rho = _correlation(cov)
    np.fill_diagonal(rho, -np.inf)
    best_flat = int(np.argmax(rho))
    bi, bj = divmod(best_flat, n)
    if rho[bi, bj] < corr_th:
        variances = np.diag(cov)
        return PathGroup(group_index, [ids[int(np.argmax(variances))]], corr_th)

    a, b = sorted((bi, bj))
    in_group = np.zeros(n, dtype=bool)
    in_group[[a, b]] = True
    members = [ids[a], ids[b]]
    while True:
        outside = ~in_group
        if not outside.any():
            break
        best_link = np.where(outside, rho[:, in_group].max(axis=1), -np.inf)
        cand = int(np.argmax(best_link))
        if best_link[cand] < corr_th:
            break
        in_group[cand] = True
        members.append(ids[cand])
    return PathGroup(group_index, members, corr_th)


def run_pca(model: DelayModel, members: list[str],
            variance_capture: float = VARIANCE_CAPTURE) -> PcaResult:
    """Eigendecompose the group covariance; retain the PC mass target."""
    idx = _setup_indices(model, members)
    cov = model.covariance[np.ix_(idx, idx)]
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    total = float(vals.sum())
    if total <= 0.0:
        return PcaResult(vecs[:, :1], vals, 1)
    mass = np.cumsum(vals) / total
    pc_count = int(np.searchsorted(mass, variance_capture - 1e-12) + 1)
    pc_count = min(pc_count, len(members))
    return PcaResult(vecs[:, :pc_count], vals, pc_count)


def select_paths(group: PathGroup, model: DelayModel,
                 variance_capture: float = VARIANCE_CAPTURE) -> list[str]:
    """Pick one representative path per retained principal component.

    The j-th pick is the not-yet-selected member with the largest absolute
    loading on the j-th PC; equal loadings break toward the lower edge id.
    """
    if not group.members:
        raise ValueError("empty path group")
    pca = run_pca(model, group.members, variance_capture)
    chosen: list[str] = []
    taken = set()
    for j in range(pca.pc_count):
        loading = np.abs(pca.components[:, j])
        best_id = None
        best_val = -np.inf
        for i, eid in enumerate(group.members):
            if eid in taken:
                continue
            v = float(loading[i])
            if v > best_val or (v == best_val and (best_id is None or eid < best_id)):
                best_val = v
                best_id = eid
        taken.add(best_id)
        chosen.append(best_id)
    return chosen


def plan_test_set(all_required: Iterable[str], model: DelayModel,
                  start_threshold: float = START_THRESHOLD,
                  threshold_step: float = THRESHOLD_STEP,
                  variance_capture: float = VARIANCE_CAPTURE,
                  ) -> tuple[list[PathGroup], list[str]]:
    """Group all required paths and choose the set worth measuring.

    The correlation threshold starts high and relaxes by a fixed step per
    extracted group (floored at zero so the loop always terminates); the
    groups partition the input and the tested set is the union of each
    group's PCA-sized selection.
    """
    remaining = sorted(set(all_required))
    if not remaining:
        raise ValueError("no required paths")
    groups: list[PathGroup] = []
    tested: list[str] = []
    i = 1
    left = set(remaining)
    while left:
        th = max(0.0, start_threshold - threshold_step * (i - 1))
        group = extract_paths(sorted(left), model, th, group_index=i)
        groups.append(group)
        tested.extend(select_paths(group, model, variance_capture))
        left.difference_update(group.members)
        i += 1
    return groups, sorted(tested)


class DelayPredictor:
    """Groupwise conditional Gaussian prediction with precomputed gains.

    The posterior standard deviations depend only on the covariance, never
    on the measured values, so everything except the mean shift is shared
    across chips and computed once.
    """

    def __init__(self, model: DelayModel, groups: list[PathGroup],
                 tested: Iterable[str], ridge_scale: float = RIDGE_SCALE):
        self.model = model
        tested_set = set(tested)
        self._groups: list[dict] = []
        for group in groups:
            tested_ids = [e for e in group.members if e in tested_set]
            untested_ids = [e for e in group.members if e not in tested_set]
            if not untested_ids:
                continue
            if not tested_ids:
                raise PredictionError(
                    f"group {group.group_index} has untested paths but no "
                    f"measured ones")
            t_idx = _setup_indices(model, tested_ids)
            u_idx = _setup_indices(model, untested_ids)
            cov_tt = model.covariance[np.ix_(t_idx, t_idx)]
            cov_ut = model.covariance[np.ix_(u_idx, t_idx)]
            ridge = ridge_scale * float(np.trace(cov_tt)) / len(t_idx)
            reg = cov_tt + ridge * np.eye(len(t_idx))
            try:
                gain = np.linalg.solve(reg, cov_ut.T).T
            except np.linalg.LinAlgError as exc:
                raise PredictionError(
                    f"tested covariance of group {group.group_index} is "
                    f"singular beyond ridge repair") from exc
            prior_var = np.diag(model.covariance)[u_idx]
            post_var = np.clip(prior_var - np.sum(gain * cov_ut, axis=1),
                               0.0, None)
            self._groups.append({
                "tested_ids": tested_ids,
                "untested_ids": untested_ids,
                "mu_t": model.means[t_idx],
                "mu_u": model.means[u_idx],
                "gain": gain,
                "post_std": np.sqrt(post_var),
            })

    def posterior_stds(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for g in self._groups:
            for eid, s in zip(g["untested_ids"], g["post_std"]):
                out[eid] = float(s)
        return out

    def predict(self, measured_upper: Mapping[str, float]) -> list[PredictedDelay]:
        out: list[PredictedDelay] = []
        for g in self._groups:
            d_t = np.array([measured_upper[eid] for eid in g["tested_ids"]])
            mu_post = g["mu_u"] + g["gain"] @ (d_t - g["mu_t"])
            for eid, m, s in zip(g["untested_ids"], mu_post, g["post_std"]):
                out.append(PredictedDelay(eid, float(m), float(s)))
        out.sort(key=lambda p: p.edge_id)
        return out


def predict_delays(model: DelayModel, groups: list[PathGroup],
                   measured_upper: Mapping[str, float]) -> list[PredictedDelay]:
    """Predict every untested required path from its group's measurements.

    ``measured_upper`` maps each tested edge to the final upper bound of its
    measured delay; using upper bounds keeps the estimates conservative.
    """
    tested = [e for g in groups for e in g.members if e in measured_upper]
    return DelayPredictor(model, groups, tested).predict(measured_upper)


def conditional_stds(model: DelayModel, groups: list[PathGroup],
                     tested: Iterable[str]) -> dict[str, float]:
    """Posterior std of each untested path; needs no measured values."""
    return DelayPredictor(model, groups, tested).posterior_stds()
