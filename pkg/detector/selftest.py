"""
Invariant suite run by `selftest`: EMA convergence law, grouping and AP
oracles, identity augmentation, gradient checks and loss additivity.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from backend.analysis.basic_statistics import EmaScalarPair, ImageBuffer, ScalarStats, batch_stats
from backend.analysis.gradcheck import check_blocks, check_gradient
from backend.analysis.metrics import average_precision, match_detections
from backend.data.augmentation import AugGains, NoiseSeed, augment_batch
from backend.embedding.context import ContextState, context_loss, update_context_ref
from backend.embedding.stabilizer import (
    EmbeddingGroup,
    StabilizerState,
    batch_stack_loss,
    cluster_loss,
    group_embeddings,
    update_cluster_means,
    update_global_mean,
    update_stacks,
)
from data_gen.scenes import SceneSpec, generate_scene
from detector.contracts import Annotation, Detection
from detector.models import ModelParams, TrainConfig
from detector.objective import DetectorStates, advance_states, prepare_batch, total_loss

logger = logging.getLogger(__name__)

EMA_STEPS = 200
EMA_TOLERANCE = 1e-12
LOSS_GRAD_TOLERANCE = 1e-4
TOTAL_GRAD_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


# EMA law


def _ema_trajectories(rho: float, start: float, target: float, dim: int = 3) -> dict:
    """Every EMA quantity driven by a constant observation; returns name -> iterates"""
    start_vec, target_vec = np.full(dim, start), np.full(dim, target)
    group = EmbeddingGroup(group_id=0, members=np.array([0]), key=(0, 0))

    pair = EmaScalarPair(start, start, rho, True)
    stab = StabilizerState(
        rho=rho,
        cluster_means={(0, 0): start_vec.copy()},
        stacks={(0, 0): start_vec.copy()},
        global_mean=start_vec.copy(),
    )
    ctx = ContextState(ref=start_vec.copy(), rho=rho, initialized=True)
    traces = {name: [] for name in ("mu_ref", "sigma_ref", "mu_j", "mu_global", "e_stack", "context_ref")}
    observation = target_vec[None, :]
    for _ in range(EMA_STEPS):
        pair = pair.update(ScalarStats(target, target))
        stab = update_cluster_means([group], observation, stab)
        stab = update_global_mean(observation, stab)
        stab = update_stacks([group], observation, stab)
        ctx = update_context_ref([target_vec], ctx)
        traces["mu_ref"].append(pair.mu_ref)
        traces["sigma_ref"].append(pair.sigma_ref)
        traces["mu_j"].append(stab.cluster_means[(0, 0)][0])
        traces["mu_global"].append(stab.global_mean[0])
        traces["e_stack"].append(stab.stacks[(0, 0)][0])
        traces["context_ref"].append(ctx.ref[0])
    return traces


def check_ema_law(rho: float = 0.05, start: float = 0.0, target: float = 1.0) -> List[CheckResult]:
    """
    |x_t - b| must equal (1 - rho)^t |x_0 - b|.

    Errors are measured against the initial gap, the scale at which each
    step's rounding happens.
    """
    results = []
    gap = abs(start - target)
    expected = gap * (1.0 - rho) ** np.arange(1, EMA_STEPS + 1)
    for name, trace in _ema_trajectories(rho, start, target).items():
        error = float(np.max(np.abs(np.abs(np.asarray(trace) - target) - expected)) / gap)
        results.append(CheckResult(f"ema_law[{name}]", error <= EMA_TOLERANCE, f"max error {error:.2e}"))
    return results


# Grouping oracle


def brute_force_groups(centers: np.ndarray, delta: float) -> List[frozenset]:
    """Connected components of the strict < delta graph by repeated merging"""
    n = len(centers)
    label = list(range(n))
    for i, j in itertools.combinations(range(n), 2):
        if np.linalg.norm(centers[i] - centers[j]) < delta and label[i] != label[j]:
            old, new = label[j], label[i]
            label = [new if value == old else value for value in label]
    return sorted(
        (frozenset(i for i in range(n) if label[i] == value) for value in set(label)), key=min
    )


def check_grouping_oracle(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        n = int(rng.integers(0, 13))
        delta = float(rng.uniform(20.0, 100.0))
        centers = rng.uniform(0.0, 200.0, (n, 2))
        if n > 1 and rng.random() < 0.2:
            centers[1] = centers[0]
        got = [frozenset(g.members.tolist()) for g in group_embeddings(centers, delta)]
        if got != brute_force_groups(centers, delta):
            return CheckResult("grouping_oracle", False, f"trial {trial} differs")
    return CheckResult("grouping_oracle", True, f"{trials} instances")


# AP oracle


def brute_force_ap(preds: Sequence[Detection], gts: Sequence[Annotation], tol: float) -> float:
    """
    Precision at every achieved recall level, each level weighted by its recall step
    and taken as the best precision at that recall or beyond.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    result = match_detections(preds, gts, tol)
    hits = {p for p, _, _ in result.pairs}
    points = []
    tp = 0
    for rank, index in enumerate(order, start=1):
        tp += index in hits
        points.append((tp / len(gts), tp / rank))
    ap, previous = 0.0, 0.0
    for recall in sorted({r for r, _ in points}):
        if recall == 0.0:
            continue
        best = max(p for r, p in points if r >= recall)
        ap += (recall - previous) * best
        previous = recall
    return ap


def random_detection_instance(rng: np.random.Generator, max_preds: int = 6):
    n_gt = int(rng.integers(1, 6))
    n_pred = int(rng.integers(0, max_preds + 1))
    gts = [Annotation.from_center(*rng.uniform(0, 40, 2), 3.0, i) for i in range(n_gt)]
    preds = []
    for _ in range(n_pred):
        if rng.random() < 0.6:
            cx, cy = np.asarray(gts[int(rng.integers(n_gt))].center) + rng.normal(0, 2.0, 2)
        else:
            cx, cy = rng.uniform(0, 40, 2)
        anchor = Annotation.from_center(float(cx), float(cy), 3.0)
        preds.append(Detection(float(cx), float(cy), anchor.box, float(rng.choice([0.3, 0.5, 0.7, rng.random()]))))
    return preds, gts


def check_ap_oracle(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        preds, gts = random_detection_instance(rng)
        got, want = average_precision(preds, gts, 6.0), brute_force_ap(preds, gts, 6.0)
        if abs(got - want) > 1e-12:
            return CheckResult("ap_oracle", False, f"trial {trial}: {got} != {want}")
    return CheckResult("ap_oracle", True, f"{trials} instances")


# Identity augmentation


def check_identity_augmentation(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, (16, 24))
    # two copies: the mean of two equal floats is exact
    images = [ImageBuffer.from_array(base.copy()) for _ in range(2)]
    observed = batch_stats(images)
    state = EmaScalarPair(observed.mean, observed.std, 0.05, True)
    augmented, _ = augment_batch(images, state, AugGains(), NoiseSeed(seed))
    identical = all(np.array_equal(a.data, b.data) for a, b in zip(augmented, images))
    return CheckResult("identity_augmentation", identical)


# Gradient checks


def _random_groups(rng: np.random.Generator, n: int) -> List[EmbeddingGroup]:
    labels = rng.integers(0, max(1, n // 2), n)
    groups = []
    for gid, value in enumerate(np.unique(labels)):
        members = np.flatnonzero(labels == value)
        groups.append(EmbeddingGroup(group_id=gid, members=members, key=(int(value), 0)))
    return groups


def _stabilizer_instance(rng: np.random.Generator):
    n, dim = int(rng.integers(2, 9)), int(rng.integers(1, 5))
    vectors = rng.normal(size=(n, dim))
    groups = _random_groups(rng, n)
    state = StabilizerState(
        rho=0.05,
        lam=float(rng.uniform(0.5, 2.0)),
        cluster_means={g.key: rng.normal(size=dim) for g in groups},
        stacks={g.key: rng.normal(size=dim) for g in groups},
        global_mean=rng.normal(size=dim),
    )
    return groups, vectors, state


def _loss_check(
    name: str, instances: int, seed: int, build: Callable[[np.random.Generator], Tuple[Callable, np.ndarray, np.ndarray]]
) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        f, x, analytic = build(rng)
        worst = max(worst, check_gradient(f, x, analytic))
    return CheckResult(name, worst < LOSS_GRAD_TOLERANCE, f"max relative error {worst:.2e}")


def _cluster_case(rng):
    groups, vectors, state = _stabilizer_instance(rng)
    _, grad = cluster_loss(groups, vectors, state)
    return (lambda v: cluster_loss(groups, v, state)[0]), vectors, grad


def _stack_case(rng):
    groups, vectors, state = _stabilizer_instance(rng)
    _, grad = batch_stack_loss(groups, vectors, state)
    return (lambda v: batch_stack_loss(groups, v, state)[0]), vectors, grad


def _context_case(rng):
    n, dim = int(rng.integers(1, 6)), int(rng.integers(1, 9))
    state = ContextState(ref=rng.normal(size=dim), initialized=True)
    embeddings = rng.normal(size=(n, dim))
    _, grad = context_loss(embeddings, state)
    return (lambda e: context_loss(e, state)[0]), embeddings, grad


def tiny_training_instance(rng: np.random.Generator, config: TrainConfig):
    """One 64x64 scene with up to 10 objects, prepared and with seeded states"""
    spec = SceneSpec(
        width=64,
        height=64,
        n_objects=int(rng.integers(1, 11)),
        min_separation=6.0,
        texture_amplitude=0.05,
        noise_std=0.02,
        distractors=2,
        seed=int(rng.integers(0, 2**31)),
    )
    image, annotations = generate_scene(spec)
    params = ModelParams.initialize(config, rng)
    states = DetectorStates.fresh(config)
    batch = prepare_batch([image], [annotations], params, states, config)
    states = advance_states(batch, params, states, config)
    return batch, params, states


def check_total_loss_gradients(instances: int = 50, seed: int = 0) -> CheckResult:
    config = TrainConfig(use_aa=False, use_es=True, use_cr=True, embedding_dim=4, init_scale=0.5, delta=20.0)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        batch, params, states = tiny_training_instance(rng, config)
        _, grads = total_loss(batch, params, states, config)

        def objective(blocks):
            return total_loss(batch, ModelParams(**blocks), states, config)[0].total

        errors = check_blocks(objective, params.blocks(), grads)
        worst = max(worst, max(errors.values()))
    return CheckResult("gradcheck[total_loss]", worst < TOTAL_GRAD_TOLERANCE, f"max relative error {worst:.2e}")


def check_loss_additivity(instances: int = 10, seed: int = 0) -> CheckResult:
    config = TrainConfig(use_es=True, use_cr=True, embedding_dim=4, init_scale=0.5)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        batch, params, states = tiny_training_instance(rng, config)
        b, _ = total_loss(batch, params, states, config)
        summed = (b.cls + b.bbox + b.obj) + (
            config.lambda1 * b.cluster + config.lambda2 * b.stack + config.lambda3 * b.context
        )
        worst = max(worst, abs(b.total - summed))
    return CheckResult("loss_additivity", worst <= 1e-12, f"max deviation {worst:.2e}")


def run_selftest(instances: int = 50, trials: int = 1000, seed: int = 0) -> List[CheckResult]:
    """
    Run every check

    Args:
        instances (int): Random instances per gradient check
        trials (int): Random instances for the grouping and AP oracles
        seed (int): Seed of all random instances

    Returns:
        List[CheckResult]: one result per check, in a fixed order
    """
    results = check_ema_law()
    results.append(check_grouping_oracle(trials, seed))
    results.append(check_ap_oracle(trials, seed))
    results.append(check_identity_augmentation(seed))
    results.append(_loss_check("gradcheck[cluster_loss]", instances, seed, _cluster_case))
    results.append(_loss_check("gradcheck[stack_loss]", instances, seed, _stack_case))
    results.append(_loss_check("gradcheck[context_loss]", instances, seed, _context_case))
    results.append(check_total_loss_gradients(instances, seed))
    results.append(check_loss_additivity(seed=seed))
    for result in results:
        logger.debug(f"{result.name}: {'pass' if result.passed else 'FAIL'} {result.detail}")
    return results
