"""Multi-agent patch annotation: step-wise reasoning, label aggregation,
label-conditioned description, judge scoring, and human-agreement analysis.

Mock agents ground every statement in oracle measurements of the synthetic
data, so the judge rubric has objective answers; real LVLM behavior is
reachable only through the remote HTTP endpoint.
"""

from __future__ import annotations

import base64
import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from . import io as tio
from . import numcore as nc
from .errors import AgentError, ContractError, ShapeError
from .numcore import Rng
from .synthdata import (DENSITY_WORDS, TEXTURE_WORDS, count_components,
                        density_class, segment_oracle, split_patches)

FEATURE_WIDTH = 8  # [count, mean, texture-var, density one-hot x3, texture one-hot x2]
N_LABELS = 3

#: measurement tolerances used by the judge rubric: blob count (exact),
#: mean intensity, texture variance
MEASUREMENT_TOLERANCES = (0.5, 0.02, 1e-4)

#: gradient-energy threshold separating fine from coarse background texture
_TEXTURE_THRESHOLD = 0.0072

#: judge rubric weights: measurement grounding, label-description
#: consistency, count coverage
RUBRIC_WEIGHTS = (0.6, 0.2, 0.2)


@dataclass
class ReasoningChain:
    """Ordered diagnostic statements with their numeric feature vectors."""

    patch_id: int
    steps: list  # of (statement: str, features: np.ndarray[FEATURE_WIDTH])

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ContractError("reasoning chain needs at least one step")

    @property
    def m(self):
        return len(self.steps)


@dataclass
class LabelDistribution:
    probs: np.ndarray
    label: int


@dataclass
class AggregatorParams:
    """Frozen seeded projection from mean step-features to class logits."""

    seed: int = 0
    projection: np.ndarray = None

    def __post_init__(self):
        if self.projection is None:
            self.projection = Rng(self.seed).split("aggregator").normal(
                (FEATURE_WIDTH, N_LABELS))


@dataclass
class PatchRecord:
    patch_id: int
    chain: ReasoningChain
    dist: LabelDistribution
    description: str
    judge_score: float
    human_score: float | None = None

    def __post_init__(self):
        if not self.description:
            raise ContractError("description must be non-empty")
        if not 0.0 <= self.judge_score <= 1.0:
            raise ContractError(f"judge score {self.judge_score} outside [0,1]")


@dataclass
class AgentEndpoint:
    kind: str = "mock"  # or "remote"
    url: str = ""
    timeout_ms: int = 5000
    max_retries: int = 2


MOCK = AgentEndpoint(kind="mock")


# -- oracle measurements ------------------------------------------------------

def measure_patch(patch):
    """(blob count, mean intensity, texture variance) of an image patch."""
    patch = np.asarray(patch, dtype=np.float64)
    seg = segment_oracle(patch)[0]
    count = count_components(seg)
    mean_int = float(patch.mean())
    gray = patch.mean(axis=0)
    filtered = ndimage.median_filter(gray, size=3)
    # texture is a background property: exclude blob pixels (dilated so their
    # edges do not leak into the gradient statistics)
    bg = ~ndimage.binary_dilation(seg > 0.5, iterations=3)
    dx = np.abs(np.diff(filtered, axis=1))
    dy = np.abs(np.diff(filtered, axis=0))
    wx = bg[:, 1:] & bg[:, :-1]
    wy = bg[1:, :] & bg[:-1, :]
    n_pairs = wx.sum() + wy.sum()
    tex_var = float((dx[wx].sum() + dy[wy].sum()) / n_pairs) \
        if n_pairs else 0.0
    return count, mean_int, tex_var


def texture_class(tex_var):
    return 0 if tex_var >= _TEXTURE_THRESHOLD else 1  # 0 fine, 1 coarse


# -- agents -------------------------------------------------------------------

def run_step_agent(patch, endpoint=MOCK, patch_id=0):
    """Produce the per-patch reasoning chain."""
    if np.asarray(patch).size == 0:
        raise ContractError("empty patch")
    if endpoint.kind == "remote":
        return _remote_chain(patch, endpoint, patch_id)
    count, mean_int, tex_var = measure_patch(patch)
    tex = texture_class(tex_var)
    steps = []
    f1 = np.zeros(FEATURE_WIDTH)
    f1[0] = count
    f1[3 + density_class(count)] = 1.0
    text1 = ("no nuclei detected" if count == 0
             else f"{count} nuclei detected")
    steps.append((text1, f1))
    f2 = np.zeros(FEATURE_WIDTH)
    f2[1] = mean_int
    steps.append((f"mean intensity {mean_int:.3f}", f2))
    f3 = np.zeros(FEATURE_WIDTH)
    f3[2] = tex_var
    f3[6 + tex] = 1.0
    steps.append((f"{TEXTURE_WORDS[tex]} texture with gradient energy "
                  f"{tex_var:.4f}", f3))
    return ReasoningChain(patch_id=patch_id, steps=steps)


def aggregate_reasoning(chain, params):
    """Mean-pool step features, project to class logits, softmax + argmax."""
    feats = np.stack([np.asarray(f, dtype=np.float64)
                      for _, f in chain.steps])
    if feats.shape[1] != params.projection.shape[0]:
        raise ShapeError(
            f"feature width {feats.shape[1]} does not match aggregator "
            f"{params.projection.shape}")
    logits = feats.mean(axis=0) @ params.projection
    probs = nc.softmax(nc.Tensor(logits)).data
    return LabelDistribution(probs=probs, label=int(np.argmax(probs)))


def describe_patch(patch, label, chain, endpoint=MOCK):
    """Deterministic template keyed by (label, texture class, count)."""
    if not 0 <= label < N_LABELS:
        raise ContractError(f"label {label} outside [0, {N_LABELS})")
    if endpoint.kind == "remote":
        return _remote_text(patch, endpoint, label=label, chain=chain)
    count = int(round(chain.steps[0][1][0]))
    tex = 0 if chain.steps[-1][1][6] == 1.0 else 1
    return (f"{DENSITY_WORDS[label]} cluster of {count} nuclei "
            f"on {TEXTURE_WORDS[tex]} stroma")


def judge(patch, chain, label, description, endpoint=MOCK):
    """Rubric score in [0, 1]: grounding 0.6, label 0.2, coverage 0.2."""
    if endpoint.kind == "remote":
        score = _remote_score(patch, endpoint, label=label, chain=chain,
                              description=description)
        return min(1.0, max(0.0, score))
    oracle = measure_patch(patch)
    stated = (chain.steps[0][1][0], chain.steps[1][1][1],
              chain.steps[2][1][2])
    agree = sum(abs(s - o) <= tol for s, o, tol
                in zip(stated, oracle, MEASUREMENT_TOLERANCES))
    grounding = RUBRIC_WEIGHTS[0] * agree / 3.0
    words = description.split()
    label_ok = RUBRIC_WEIGHTS[1] if DENSITY_WORDS[label] in words else 0.0
    coverage = RUBRIC_WEIGHTS[2] if str(oracle[0]) in words else 0.0
    return min(1.0, max(0.0, grounding + label_ok + coverage))


# -- remote endpoint ----------------------------------------------------------

def _remote_request(patch, endpoint, role, context, prompt):
    import requests
    body = {
        "role": role,
        "patch": base64.b64encode(
            tio.tensors_to_bytes({"patch": np.asarray(patch)})).decode(),
        "context": context,
        "prompt": prompt,
    }
    last = None
    for _ in range(endpoint.max_retries + 1):
        try:
            resp = requests.post(endpoint.url, json=body,
                                 timeout=endpoint.timeout_ms / 1000.0)
        except requests.RequestException as exc:
            last = exc
            continue
        if resp.status_code // 100 != 2:
            raise AgentError(
                f"agent returned HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise AgentError(f"malformed agent response: {exc}") from exc
    raise AgentError(f"agent unreachable after retries: {last}")


def _remote_chain(patch, endpoint, patch_id):
    data = _remote_request(patch, endpoint, "step", {}, "describe findings")
    steps = data.get("steps")
    if not isinstance(steps, list) or not steps:
        raise AgentError("remote step agent returned no steps",
                         patch_id=patch_id)
    parsed = []
    for item in steps:
        try:
            statement, features = item
            feats = np.asarray(features, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise AgentError(f"unparseable step {item!r}",
                             patch_id=patch_id) from exc
        if feats.shape != (FEATURE_WIDTH,):
            raise AgentError(f"step features must have width {FEATURE_WIDTH}",
                             patch_id=patch_id)
        parsed.append((str(statement), feats))
    return ReasoningChain(patch_id=patch_id, steps=parsed)


def _remote_text(patch, endpoint, label, chain):
    data = _remote_request(
        patch, endpoint, "describe",
        {"label": label, "steps": [s for s, _ in chain.steps]},
        "describe the patch")
    text = data.get("text")
    if not isinstance(text, str) or not text:
        raise AgentError("remote describe agent returned no text")
    return text


def _remote_score(patch, endpoint, label, chain, description):
    data = _remote_request(
        patch, endpoint, "judge",
        {"label": label, "steps": [s for s, _ in chain.steps],
         "description": description},
        "rate the annotation quality")
    score = data.get("score")
    if not isinstance(score, (int, float)):
        raise AgentError("remote judge returned no numeric score")
    return float(score)


# -- pipeline -----------------------------------------------------------------

def run_pipeline(image, patch_geometry, endpoints=None, policy="abort-on-error",
                 aggregator=None, max_workers=4, log=None):
    """Annotate every patch of an image; records ordered by patch index."""
    if policy not in ("abort-on-error", "skip-and-log"):
        raise ContractError(f"unknown policy {policy!r}")
    endpoints = endpoints or {}
    step_ep = endpoints.get("step", MOCK)
    desc_ep = endpoints.get("describe", MOCK)
    judge_ep = endpoints.get("judge", MOCK)
    aggregator = aggregator or AggregatorParams()
    patches = split_patches(image, *patch_geometry)

    def annotate_one(idx_patch):
        idx, patch = idx_patch
        chain = run_step_agent(patch, step_ep, patch_id=idx)
        dist = aggregate_reasoning(chain, aggregator)
        description = describe_patch(patch, dist.label, chain, desc_ep)
        score = judge(patch, chain, dist.label, description, judge_ep)
        return PatchRecord(patch_id=idx, chain=chain, dist=dist,
                           description=description, judge_score=score)

    records = []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = list(pool.map(lambda x: _guard(annotate_one, x, policy, log),
                                enumerate(patches)))
    records = [r for r in futures if r is not None]
    records.sort(key=lambda r: r.patch_id)
    return records


def _guard(fn, arg, policy, log):
    try:
        return fn(arg)
    except AgentError as exc:
        if policy == "abort-on-error":
            raise
        if log is not None:
            log(f"patch {arg[0]}: skipped ({exc})")
        return None


def agreement(records):
    """Spearman rank correlation and mean absolute difference of judge vs
    human scores over records carrying a human score."""
    scored = [r for r in records if r.human_score is not None]
    if len(scored) < 3:
        raise ContractError(
            f"agreement needs >= 3 human-scored records, got {len(scored)}")
    q = np.array([r.judge_score for r in scored])
    h = np.array([r.human_score for r in scored])
    rho = _spearman(q, h)
    return rho, float(np.mean(np.abs(q - h)))


def _spearman(q, h):
    """Spearman rho with average-rank ties.

    Ranks are doubled (so ties at .5 become integers) and centered with
    integer arithmetic; all sums below are then exact in float64, which makes
    perfectly reversed rankings come out as exactly -1.0 rather than within
    rounding of it.
    """
    n = len(q)
    a = 2.0 * n * stats.rankdata(q) - 2.0 * stats.rankdata(q).sum()
    b = 2.0 * n * stats.rankdata(h) - 2.0 * stats.rankdata(h).sum()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0  # rank correlation is undefined for constant scores
    return float((a * b).sum() / denom)


# -- serialization ------------------------------------------------------------

def record_to_json(record):
    obj = {
        "patch_id": record.patch_id,
        "steps": [[s, list(map(float, f))] for s, f in record.chain.steps],
        "probs": list(map(float, record.dist.probs)),
        "label": record.dist.label,
        "description": record.description,
        "judge_score": record.judge_score,
        "human_score": record.human_score,
    }
    return json.dumps(obj, ensure_ascii=False)


def record_from_json(line):
    obj = json.loads(line)
    chain = ReasoningChain(
        patch_id=obj["patch_id"],
        steps=[(s, np.asarray(f, dtype=np.float64)) for s, f in obj["steps"]])
    dist = LabelDistribution(
        probs=np.asarray(obj["probs"], dtype=np.float64),
        label=int(obj["label"]))
    return PatchRecord(patch_id=obj["patch_id"], chain=chain, dist=dist,
                       description=obj["description"],
                       judge_score=obj["judge_score"],
                       human_score=obj["human_score"])


def save_records(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(record_to_json(r) + "\n")


def load_records(path):
    with open(path, encoding="utf-8") as fh:
        return [record_from_json(line) for line in fh if line.strip()]


def import_human_scores(records, csv_path):
    """Attach human scores from a patch_id,score CSV; returns updated count."""
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["patch_id", "score"]:
            raise ContractError(
                f"human-score CSV needs header patch_id,score, "
                f"got {reader.fieldnames}")
        scores = {int(row["patch_id"]): float(row["score"])
                  for row in reader}
    n = 0
    for r in records:
        if r.patch_id in scores:
            r.human_score = scores[r.patch_id]
            n += 1
    return n
