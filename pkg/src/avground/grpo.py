"""GRPO objective with group-relative advantages, and a toy policy to verify it.

The toy policy is a softmax over a handful of canned answers. It has exact
log-probabilities and gradients, which makes it a convenient place to check
the objective against finite differences and to watch the reward plumbing
drive learning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from avground.grammar import WORKED_EXAMPLE, TaskKind
from avground.records import GroundTruthRecord
from avground.rewards import RewardConfig, score_sample


class GroupTooSmall(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    beta: float = 0.04
    group_size: int = 6
    advantage_epsilon: float = 1e-8
    lr: float = 0.1
    max_grad_norm: float | None = 1.0

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.advantage_epsilon < 0:
            raise ValueError("advantage_epsilon must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass(frozen=True)
class GroupSample:
    """Rewards and sequence log-probabilities of one group of responses."""

    rewards: np.ndarray
    logp_old: np.ndarray
    logp_new: np.ndarray
    logp_ref: np.ndarray
    actions: np.ndarray | None = None

    def __post_init__(self):
        arrays = {}
        for name in ("rewards", "logp_old", "logp_new", "logp_ref"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one-dimensional")
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        sizes = {len(a) for a in arrays.values()}
        if len(sizes) != 1:
            raise ValueError("group arrays have different lengths")
        if sizes.pop() < 2:
            raise GroupTooSmall("a group needs at least 2 responses")
        for name in ("logp_old", "logp_new", "logp_ref"):
            if not np.all(np.isfinite(arrays[name])):
                raise ValueError(f"{name} contains non-finite values")
        if self.actions is not None:
            object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self.rewards)


def group_advantages(rewards, advantage_epsilon: float = 1e-8) -> np.ndarray:
    """Z-score rewards within the group (population std); identical rewards give zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise GroupTooSmall("a group needs at least 2 rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    std = r.std()
    if std == 0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + advantage_epsilon)


def clipped_term(ratio, advantage, epsilon: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(ratio * advantage, np.clip(ratio, 1 - epsilon, 1 + epsilon) * advantage)
    return float(out) if out.ndim == 0 else out


def kl_penalty(logp_new, logp_ref):
    """Per-sample KL estimate exp(d) - d - 1 with d = logp_ref - logp_new."""
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_new, dtype=np.float64)
    out = np.maximum(np.expm1(d) - d, 0.0)
    return float(out) if out.ndim == 0 else out


def grpo_objective(group: GroupSample, config: GrpoConfig, advantages=None) -> float:
    """Group mean of the clipped surrogate minus the scaled KL penalty.

    ``advantages`` overrides the group-relative ones computed from rewards.
    """
    adv = group_advantages(group.rewards, config.advantage_epsilon) if advantages is None else np.asarray(advantages)
    ratio = np.exp(group.logp_new - group.logp_old)
    terms = clipped_term(ratio, adv, config.epsilon) - config.beta * kl_penalty(group.logp_new, group.logp_ref)
    return float(np.mean(terms))


def objective_grad_logp(group: GroupSample, config: GrpoConfig, advantages=None) -> np.ndarray:
    """Gradient of :func:`grpo_objective` with respect to each ``logp_new``."""
    adv = group_advantages(group.rewards, config.advantage_epsilon) if advantages is None else np.asarray(advantages)
    ratio = np.exp(group.logp_new - group.logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - config.epsilon, 1 + config.epsilon) * adv
    # the clipped branch is flat in ratio whenever it is the smaller one
    d_surrogate = np.where(unclipped <= clipped, adv, 0.0) * ratio
    d_kl = 1.0 - np.exp(group.logp_ref - group.logp_new)
    return (d_surrogate - config.beta * d_kl) / group.size


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class ToyPolicy:
    """Softmax policy over a finite alphabet of answers."""

    logits: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def n_actions(self) -> int:
        return len(self.logits)

    def log_probs(self, logits=None) -> np.ndarray:
        z = self.logits if logits is None else np.asarray(logits, dtype=np.float64)
        return _log_softmax(z / self.temperature)

    def probs(self, logits=None) -> np.ndarray:
        return np.exp(self.log_probs(logits))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(self.n_actions, size=n, p=self.probs())


def policy_objective(policy: ToyPolicy, group: GroupSample, config: GrpoConfig, logits=None) -> float:
    """Objective with ``logp_new`` recomputed from the policy at ``logits``."""
    logp = policy.log_probs(logits)[group.actions]
    moved = GroupSample(group.rewards, group.logp_old, logp, group.logp_ref, group.actions)
    return grpo_objective(moved, config)


def policy_gradient(policy: ToyPolicy, group: GroupSample, config: GrpoConfig, logits=None) -> np.ndarray:
    """Analytic gradient of :func:`policy_objective` with respect to the logits."""
    if group.actions is None:
        raise ValueError("group has no actions")
    logp_all = policy.log_probs(logits)
    moved = GroupSample(group.rewards, group.logp_old, logp_all[group.actions], group.logp_ref, group.actions)
    d_logp = objective_grad_logp(moved, config)
    probs = np.exp(logp_all)
    # d log pi(a) / d z = (onehot(a) - pi) / T
    onehot = np.zeros((group.size, policy.n_actions))
    onehot[np.arange(group.size), group.actions] = 1.0
    return (d_logp @ (onehot - probs)) / policy.temperature


def finite_diff_check(policy: ToyPolicy, group: GroupSample, config: GrpoConfig, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error is |a - n| / max(|a|, |n|, 1e-6) per coordinate, so coordinates
    whose true gradient is essentially zero are compared in absolute terms.
    """
    analytic = policy_gradient(policy, group, config)
    numeric = np.zeros_like(policy.logits)
    for k in range(policy.n_actions):
        plus, minus = policy.logits.copy(), policy.logits.copy()
        plus[k] += h
        minus[k] -= h
        numeric[k] = (policy_objective(policy, group, config, plus) - policy_objective(policy, group, config, minus)) / (2 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


def random_instance(seed: int, n_actions: int = 5, group_size: int = 6) -> tuple[ToyPolicy, GroupSample, GrpoConfig]:
    """Random (policy, group, config) whose ratios stay clear of the clip kinks."""
    rng = np.random.default_rng(seed)
    while True:
        policy = ToyPolicy(rng.normal(size=n_actions), temperature=float(rng.uniform(0.5, 2.0)))
        config = GrpoConfig(epsilon=0.2, beta=float(rng.uniform(0.0, 0.5)), group_size=group_size)
        old_logits = policy.logits + rng.normal(scale=0.3, size=n_actions)
        ref_logits = rng.normal(size=n_actions)
        old = policy.log_probs(old_logits)
        actions = rng.choice(n_actions, size=group_size, p=np.exp(old))
        new = policy.log_probs()[actions]
        ratio = np.exp(new - old[actions])
        if np.min(np.abs(ratio[:, None] - [1 - config.epsilon, 1 + config.epsilon])) < 1e-3:
            continue
        group = GroupSample(
            rewards=rng.uniform(0, 4, size=group_size),
            logp_old=old[actions],
            logp_new=new,
            logp_ref=policy.log_probs(ref_logits)[actions],
            actions=actions,
        )
        return policy, group, config


@dataclass(frozen=True)
class BanditEnv:
    """Fixed reward per answer symbol."""

    rewards: np.ndarray
    answers: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))

    @property
    def n_actions(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_answers(cls, answers, gt: GroundTruthRecord, config: RewardConfig) -> "BanditEnv":
        rewards = [score_sample(text, gt, config).total for text in answers]
        return cls(np.array(rewards), tuple(answers))


DEMO_GOLD = GroundTruthRecord.from_dict(
    {
        "qa_id": "demo:0:ST:0",
        "task": "spatio-temporal",
        "question": "When is the moment dog, cat make sound and are visible, and where are they?",
        "objects": [{"name": "dog", "label": "visible&audible"}, {"name": "cat", "label": "visible&audible"}],
        "interval": [10.0, 20.5],
        "tracks": {
            "dog": {"10.0": [100, 200, 300, 400], "11.0": [109, 280, 320, 432], "12.0": [100, 200, 300, 400]},
            "cat": {"12.5": [50, 60, 150, 160], "13.5": [55, 62, 140, 150]},
        },
    }
)

DEMO_ANSWERS = (
    WORKED_EXAMPLE,
    # well formed, but wrong objects and a disjoint interval
    "<answer>\n<when>[30.0,40.0]</when>\n<object>car</object>\n<where>\n30.0: [0,0,10,10]\n</where>\n</answer>\n",
    WORKED_EXAMPLE.replace("</answer>", ""),
    "the dog barks from ten to twenty seconds",
)


def demo_env() -> BanditEnv:
    """Four canned answers to one question; only the first earns the full 4.0."""
    return BanditEnv.from_answers(DEMO_ANSWERS, DEMO_GOLD, RewardConfig(fallback="jaccard"))


@dataclass
class TrainingTrace:
    records: list[dict] = field(default_factory=list)
    expected_rewards: list[float] = field(default_factory=list)
    logits: np.ndarray | None = None


def train_toy(
    env: BanditEnv,
    policy: ToyPolicy,
    config: GrpoConfig,
    steps: int,
    seed: int,
) -> TrainingTrace:
    """Run single-update GRPO iterations on a bandit environment.

    Each step samples a group from the current policy, which also serves as
    the old policy, so ratios start at 1. The reference policy is the initial
    one. ``policy`` is not modified; final logits are in the trace.
    """
    if policy.n_actions != env.n_actions:
        raise ValueError("policy and environment disagree on the number of actions")
    rng = np.random.default_rng(seed)
    logits = policy.logits.copy()
    ref = policy.log_probs()
    trace = TrainingTrace()
    trace.expected_rewards.append(float(policy.probs() @ env.rewards))
    for step in range(steps):
        logp = policy.log_probs(logits)
        actions = rng.choice(env.n_actions, size=config.group_size, p=np.exp(logp))
        rewards = env.rewards[actions]
        group = GroupSample(rewards, logp[actions], logp[actions], ref[actions], actions)
        grad = policy_gradient(policy, group, config, logits)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"non-finite gradient at step {step}")
        norm = float(np.linalg.norm(grad))
        if config.max_grad_norm is not None and norm > config.max_grad_norm:
            grad = grad * (config.max_grad_norm / norm)
        trace.records.append(
            {
                "step": step,
                "mean_reward": float(rewards.mean()),
                "objective": grpo_objective(group, config),
                "kl": float(np.mean(kl_penalty(group.logp_new, group.logp_ref))),
            }
        )
        logits = logits + config.lr * grad
        trace.expected_rewards.append(float(policy.probs(logits) @ env.rewards))
    trace.logits = logits
    return trace
