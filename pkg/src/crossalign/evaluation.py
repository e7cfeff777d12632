"""Discriminative retrieval tasks and AUC scoring.

An encoding instance asks: given the image shown on presentation (s, t), rank
K candidate response vectors so the recorded trial (s, t) beats trials of
other stimuli. A decoding instance is the mirror image: given response
(s, t), rank K candidate images. One instance exists per test-split
(stimulus, trial) presentation; distractors are drawn uniformly without
replacement from other test items only, from a per-instance seeded stream, so
task lists are deterministic and identical across methods.

AUC for one instance is the probability, with 0.5 credit for ties, that the
true candidate outscores a random distractor:

    (#{d < true} + 0.5 * #{d == true}) / #distractors

Report-level AUCs are unweighted means over instances; the reported average
is the arithmetic mean of the encoding and decoding AUCs.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from crossalign import alignment
from crossalign import tensor as T
from crossalign.baselines import (
    DirectDecoderParams,
    DirectEncoderParams,
    direct_decode_predict,
    direct_encode_predict,
)
from crossalign.dataio import DatasetContainer
from crossalign.encoders import VnaParams, spike_encode, visual_encode
from crossalign.synthdata import ForwardModel
from crossalign.tensor import Tensor

_MODE_FLAGS = {"encoding": 0, "decoding": 1}
_CHUNK = 128


@dataclass(frozen=True)
class TaskInstance:
    """One retrieval question. Ids: images are stimulus ints, responses are
    (stimulus, trial) pairs."""

    mode: str
    query_id: object
    true_id: object
    distractor_ids: tuple
    seed_info: tuple  # (seed, mode flag, stimulus, trial)

    @property
    def label(self) -> str:
        seed, _, s, t = self.seed_info
        return f"{self.mode}/stim{s}/trial{t}/seed{seed}"

    @property
    def k(self) -> int:
        return len(self.distractor_ids) + 1


def build_tasks(dataset: DatasetContainer, mode: str, k: int, seed: int) -> list[TaskInstance]:
    """One instance per test (stimulus, trial) presentation.

    Effective K is min(K, available candidates); a clamp emits a warning.
    """
    if mode not in _MODE_FLAGS:
        raise ValueError(f"unknown task mode {mode!r}")
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")
    test_ids = list(dataset.test_ids)
    if not test_ids:
        raise ValueError("test split is empty")
    trials = dataset.trials
    flag = _MODE_FLAGS[mode]

    available = (len(test_ids) - 1) * trials + 1 if mode == "encoding" else len(test_ids)
    k_eff = min(k, available)
    if k_eff < k:
        warnings.warn(
            f"K={k} clamped to {k_eff}: only {available} candidates in the test split",
            stacklevel=2,
        )
    if k_eff < 2:
        raise ValueError(f"test split supports only {available} candidate(s); need >= 2")

    instances = []
    for s in test_ids:
        others = [o for o in test_ids if o != s]
        for t in range(trials):
            rng = np.random.default_rng(np.random.SeedSequence([seed, flag, s, t]))
            if mode == "encoding":
                pool = len(others) * trials
                chosen = rng.choice(pool, size=k_eff - 1, replace=False)
                distractors = tuple((others[int(i) // trials], int(i) % trials) for i in chosen)
                inst = TaskInstance(
                    mode=mode, query_id=s, true_id=(s, t),
                    distractor_ids=distractors, seed_info=(seed, flag, s, t),
                )
            else:
                chosen = rng.choice(len(others), size=k_eff - 1, replace=False)
                distractors = tuple(others[int(i)] for i in chosen)
                inst = TaskInstance(
                    mode=mode, query_id=(s, t), true_id=s,
                    distractor_ids=distractors, seed_info=(seed, flag, s, t),
                )
            instances.append(inst)
    return instances


def auc_single(true_score: float, distractor_scores: Sequence[float]) -> float:
    """Pairwise win rate of the true candidate, ties worth half."""
    d = np.asarray(distractor_scores, dtype=np.float64)
    if d.size == 0:
        raise ValueError("need at least one distractor score")
    wins = float(np.count_nonzero(true_score > d))
    ties = float(np.count_nonzero(true_score == d))
    return (wins + 0.5 * ties) / d.size


@dataclass
class EvalReport:
    method: str
    dataset_id: str
    k_requested: int
    k_effective: dict
    seed: int
    encoding_auc: Optional[float]
    decoding_auc: Optional[float]
    average_auc: Optional[float]
    per_instance: dict  # mode -> list of {stim, trial, auc}

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "dataset_id": self.dataset_id,
            "k_requested": self.k_requested,
            "k_effective": self.k_effective,
            "seed": self.seed,
            "encoding_auc": self.encoding_auc,
            "decoding_auc": self.decoding_auc,
            "average_auc": self.average_auc,
            "per_instance": self.per_instance,
        }

    def csv_rows(self) -> list[dict]:
        """Flat rows: dataset, method, mode, K, seed, auc (fixed column order)."""
        rows = []
        pairs = [("encoding", self.encoding_auc), ("decoding", self.decoding_auc),
                 ("average", self.average_auc)]
        for mode, auc in pairs:
            if auc is None:
                continue
            rows.append({
                "dataset": self.dataset_id,
                "method": self.method,
                "mode": mode,
                "K": self.k_effective.get(mode, self.k_requested),
                "seed": self.seed,
                "auc": auc,
            })
        return rows


CSV_COLUMNS = ("dataset", "method", "mode", "K", "seed", "auc")


def evaluate(
    scorer: Callable[[TaskInstance], Sequence[float]],
    tasks: Sequence[TaskInstance],
    dataset: DatasetContainer,
    method: str = "unknown",
    k_requested: int = 0,
    seed: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Score every instance and aggregate per-mode mean AUCs.

    The scorer returns one score per candidate, true candidate first, higher
    better. Any scorer exception aborts the run naming the instance. With
    workers > 1 instances are scored concurrently; the reduction is ordered,
    so the report is identical to sequential execution.
    """
    if not tasks:
        raise ValueError("no task instances to evaluate")

    def score_one(inst: TaskInstance) -> float:
        try:
            scores = scorer(inst)
        except Exception as e:
            raise RuntimeError(f"scorer failed on instance {inst.label}: {e}") from e
        if len(scores) != inst.k:
            raise RuntimeError(
                f"scorer returned {len(scores)} scores for instance {inst.label}; expected {inst.k}"
            )
        return auc_single(scores[0], scores[1:])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            aucs = list(pool.map(score_one, tasks))
    else:
        aucs = [score_one(inst) for inst in tasks]

    per_instance: dict = {}
    k_effective: dict = {}
    sums: dict = {}
    for inst, auc in zip(tasks, aucs):
        _, _, s, t = inst.seed_info
        per_instance.setdefault(inst.mode, []).append({"stim": s, "trial": t, "auc": auc})
        k_effective[inst.mode] = inst.k
        sums.setdefault(inst.mode, []).append(auc)

    enc = float(np.mean(sums["encoding"])) if "encoding" in sums else None
    dec = float(np.mean(sums["decoding"])) if "decoding" in sums else None
    present = [v for v in (enc, dec) if v is not None]
    avg = float(np.mean(present)) if present else None
    return EvalReport(
        method=method, dataset_id=dataset.dataset_id,
        k_requested=k_requested, k_effective=k_effective, seed=seed,
        encoding_auc=enc, decoding_auc=dec, average_auc=avg,
        per_instance=per_instance,
    )


# -- scorer factories ----------------------------------------------------------


def _batched_forward(fn, arr: np.ndarray, dtype) -> np.ndarray:
    outs = []
    with T.no_grad():
        for i in range(0, arr.shape[0], _CHUNK):
            outs.append(fn(Tensor(arr[i : i + _CHUNK].astype(dtype))).data)
    return np.concatenate(outs, axis=0).astype(np.float64)


def _unit_rows(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1)
    degenerate = int(np.count_nonzero(norms < alignment.NORM_FLOOR))
    if degenerate:
        alignment._count_degenerate(degenerate)
    safe = np.where(norms < alignment.NORM_FLOOR, 1.0, norms)
    out = emb / safe[:, None]
    out[norms < alignment.NORM_FLOOR] = 0.0
    return out


class _TestIndex:
    """Row lookups for test-split images and (stimulus, trial) responses."""

    def __init__(self, dataset: DatasetContainer):
        self.test_ids = list(dataset.test_ids)
        self.trials = dataset.trials
        self.stim_row = {s: i for i, s in enumerate(self.test_ids)}

    def image_row(self, s: int) -> int:
        return self.stim_row[s]

    def response_row(self, sid) -> int:
        s, t = sid
        return self.stim_row[s] * self.trials + t


def make_vna_scorer(params: VnaParams, dataset: DatasetContainer) -> Callable:
    """Cosine scorer with all test-split embeddings precomputed (eval mode)."""
    index = _TestIndex(dataset)
    dtype = params.visual.proj_weight.dtype
    images = np.asarray(dataset.images, dtype=np.float64)[index.test_ids]
    resp_z = dataset.zscored_responses()[index.test_ids].reshape(-1, dataset.neurons)

    img_emb = _batched_forward(lambda x: visual_encode(params.visual, x, "eval"), images, dtype)
    spk_emb = _batched_forward(lambda x: spike_encode(params.spike, x, "eval"), resp_z, dtype)
    img_unit = _unit_rows(img_emb)
    spk_unit = _unit_rows(spk_emb)

    def scorer(inst: TaskInstance) -> np.ndarray:
        if inst.mode == "encoding":
            q = img_unit[index.image_row(inst.query_id)]
            rows = [index.response_row(inst.true_id)]
            rows += [index.response_row(d) for d in inst.distractor_ids]
            cands = spk_unit[rows]
        else:
            q = spk_unit[index.response_row(inst.query_id)]
            rows = [index.image_row(inst.true_id)]
            rows += [index.image_row(d) for d in inst.distractor_ids]
            cands = img_unit[rows]
        return np.clip(cands @ q, -1.0, 1.0)

    return scorer


def make_direct_encode_scorer(params: DirectEncoderParams, dataset: DatasetContainer) -> Callable:
    """Negated distances in (z-scored) response space against predicted rates."""
    index = _TestIndex(dataset)
    dtype = params.tower.proj_weight.dtype
    images = np.asarray(dataset.images, dtype=np.float64)[index.test_ids]
    resp_z = dataset.zscored_responses()[index.test_ids].reshape(-1, dataset.neurons)
    preds = _batched_forward(lambda x: direct_encode_predict(params, x, "eval"), images, dtype)

    def scorer(inst: TaskInstance) -> np.ndarray:
        if inst.mode == "encoding":
            q = preds[index.image_row(inst.query_id)]
            rows = [index.response_row(inst.true_id)]
            rows += [index.response_row(d) for d in inst.distractor_ids]
            cands = resp_z[rows]
        else:
            q = resp_z[index.response_row(inst.query_id)]
            rows = [index.image_row(inst.true_id)]
            rows += [index.image_row(d) for d in inst.distractor_ids]
            cands = preds[rows]
        return -np.linalg.norm(cands - q[None, :], axis=1)

    return scorer


def make_direct_decode_scorer(params: DirectDecoderParams, dataset: DatasetContainer) -> Callable:
    """Negated pixel-space distances against decoded images."""
    index = _TestIndex(dataset)
    dtype = params.hidden_weight.dtype
    images = np.asarray(dataset.images, dtype=np.float64)[index.test_ids]
    flat_images = images.reshape(len(index.test_ids), -1)
    resp_z = dataset.zscored_responses()[index.test_ids].reshape(-1, dataset.neurons)
    decoded = _batched_forward(lambda x: direct_decode_predict(params, x, "eval"), resp_z, dtype)
    decoded = decoded.reshape(decoded.shape[0], -1)

    def scorer(inst: TaskInstance) -> np.ndarray:
        if inst.mode == "encoding":
            q = flat_images[index.image_row(inst.query_id)]
            rows = [index.response_row(inst.true_id)]
            rows += [index.response_row(d) for d in inst.distractor_ids]
            cands = decoded[rows]
        else:
            q = decoded[index.response_row(inst.query_id)]
            rows = [index.image_row(inst.true_id)]
            rows += [index.image_row(d) for d in inst.distractor_ids]
            cands = flat_images[rows]
        return -np.linalg.norm(cands - q[None, :], axis=1)

    return scorer


def make_oracle_scorer(model: ForwardModel, dataset: DatasetContainer) -> Callable:
    """Ground-truth scorer: distance between clean model rates and raw trials.

    On noiseless data the true candidate sits at distance zero, so AUC is 1
    unless two stimuli collide in rate space.
    """
    index = _TestIndex(dataset)
    images = np.asarray(dataset.images, dtype=np.float64)[index.test_ids]
    clean = model.clean_rates(images)
    neuron_ids = dataset.manifest.get("neuron_ids")
    if neuron_ids is not None:
        clean = clean[:, list(neuron_ids)]
    if clean.shape[1] != dataset.neurons:
        raise ValueError(
            f"forward model rates have {clean.shape[1]} neurons, dataset has {dataset.neurons}"
        )
    resp_raw = np.asarray(dataset.responses, dtype=np.float64)[index.test_ids]
    resp_raw = resp_raw.reshape(-1, dataset.neurons)

    def scorer(inst: TaskInstance) -> np.ndarray:
        if inst.mode == "encoding":
            q = clean[index.image_row(inst.query_id)]
            rows = [index.response_row(inst.true_id)]
            rows += [index.response_row(d) for d in inst.distractor_ids]
            cands = resp_raw[rows]
        else:
            q = resp_raw[index.response_row(inst.query_id)]
            rows = [index.image_row(inst.true_id)]
            rows += [index.image_row(d) for d in inst.distractor_ids]
            cands = clean[rows]
        return -np.linalg.norm(cands - q[None, :], axis=1)

    return scorer
