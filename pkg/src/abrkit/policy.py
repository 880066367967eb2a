"""Dual-clip PPO pieces: observations, blended rewards, entropy control and the update."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tinynet
from .data import VideoManifest
from .errors import EmptyTrajectory, InvalidClipConfig
from .qoe import MAX_BITRATE, DnnScorer, LinWeights, all_window_features, qoe_lin_step
from .sim import BITS_PER_BYTE, MEGA, PlayerView, SimConfig, SimState, StepOutcome, \
    session_from_outcomes
from .tinynet import AdamConfig, MlpModel, MlpSpec

# ---------------------------------------------------------------------------
# Observations


@dataclass(frozen=True)
class ObsConfig:
    history: int = 8
    lookahead: int = 1
    throughput_scale: float = MAX_BITRATE

    def __post_init__(self) -> None:
        if self.history < 1 or self.lookahead < 1:
            raise ValueError("history and lookahead must be >= 1")

    def dim(self, n_levels: int) -> int:
        return 3 + 2 * self.history + 2 * self.lookahead * n_levels


def history_arrays(history: Sequence[StepOutcome], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw (throughput Mbps, download seconds) of the last ``n`` chunks, oldest first, zero-padded in front."""
    thr = np.zeros(n)
    dt = np.zeros(n)
    recent = history[-n:]
    if recent:
        thr[n - len(recent):] = [o.throughput for o in recent]
        dt[n - len(recent):] = [o.download_time for o in recent]
    return thr, dt


def build_observation(manifest: VideoManifest, sim_cfg: SimConfig, state: SimState,
                      history: Sequence[StepOutcome], cfg: ObsConfig = ObsConfig()) -> np.ndarray:
    """[buffer, last vmaf, throughputs, download times, next sizes, next vmaf, fraction left]."""
    thr, dt = history_arrays(history, cfg.history)
    nominal_top = manifest.ladder[-1] * manifest.chunk_duration * MEGA / BITS_PER_BYTE
    sizes = np.zeros((cfg.lookahead, manifest.n_levels))
    vmaf = np.zeros((cfg.lookahead, manifest.n_levels))
    ahead = manifest.sizes[state.chunk_index:state.chunk_index + cfg.lookahead]
    sizes[:len(ahead)] = ahead / nominal_top
    vmaf[:len(ahead)] = manifest.vmaf[state.chunk_index:state.chunk_index + cfg.lookahead] / 100.0
    last_vmaf = history[-1].chunk_vmaf / 100.0 if history else 0.0
    return np.concatenate([
        [state.buffer / sim_cfg.buffer_cap, last_vmaf],
        thr / cfg.throughput_scale,
        dt / manifest.chunk_duration,
        sizes.ravel(),
        vmaf.ravel(),
        [(manifest.n_chunks - state.chunk_index) / manifest.n_chunks],
    ])


def observe(view: PlayerView, cfg: ObsConfig = ObsConfig()) -> np.ndarray:
    return build_observation(view.manifest, view.cfg, view.state, view.history, cfg)


# ---------------------------------------------------------------------------
# Entropy, omega, lambda


def entropies(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def policy_entropy(probs: np.ndarray) -> float:
    return float(entropies(np.asarray(probs)[None, :])[0])


def omega(trajectory: Sequence[np.ndarray] | np.ndarray) -> float:
    """Mean entropy over the trajectory, normalized by the uniform distribution's."""
    p = np.asarray(trajectory, dtype=np.float64)
    if p.size == 0:
        raise EmptyTrajectory("omega needs at least one step")
    if p.ndim == 1:
        p = p[None, :]
    w = float(np.mean(entropies(p)) / math.log(p.shape[1]))
    return min(max(w, 0.0), 1.0)


def update_lambda(lam: float, mean_entropy: float, h_target: float, learning_rate: float) -> float:
    return max(0.0, lam + learning_rate * (h_target - mean_entropy))


# ---------------------------------------------------------------------------
# Rewards


@dataclass
class RunningNorm:
    """Bias-corrected exponential moving mean and second moment."""

    momentum: float = 0.999
    std_floor: float = 1e-3
    m1: float = 0.0
    m2: float = 0.0
    count: int = 0

    def update(self, values: np.ndarray) -> None:
        x = np.asarray(values, dtype=np.float64).ravel()
        n = len(x)
        if n == 0:
            return
        b = self.momentum
        decay = b ** np.arange(n - 1, -1, -1)
        self.m1 = b ** n * self.m1 + (1 - b) * float(decay @ x)
        self.m2 = b ** n * self.m2 + (1 - b) * float(decay @ (x * x))
        self.count += n

    @property
    def mean(self) -> float:
        if self.count == 0:
            return 0.0
        return self.m1 / (1 - self.momentum ** self.count)

    @property
    def std(self) -> float:
        if self.count == 0:
            return 1.0
        var = self.m2 / (1 - self.momentum ** self.count) - self.mean ** 2
        return max(math.sqrt(max(var, 0.0)), self.std_floor)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return asdict(self)


def blended_reward(lin_z, dnn_z, w: float):
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {w}")
    return w * np.asarray(lin_z) + (1.0 - w) * np.asarray(dnn_z)


def step_terms(outcomes: Sequence[StepOutcome], w_lin: LinWeights, scorer: DnnScorer | None
               ) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-chunk linear terms and learned-model scores of each trailing window."""
    lin = np.array([qoe_lin_step(o.chunk_vmaf, o.rebuffer, o.vmaf_change, w_lin) for o in outcomes])
    if scorer is None:
        return lin, np.zeros_like(lin)
    feats = all_window_features(session_from_outcomes("rollout", outcomes), scorer.cfg)
    return lin, scorer.model(feats)[:, 0]


# ---------------------------------------------------------------------------
# Surrogate objective


def check_clip(epsilon: float, c: float) -> None:
    if not (0 < epsilon < 1) or c <= 1 + epsilon:
        raise InvalidClipConfig(f"need 0 < epsilon < 1 and c > 1 + epsilon, got {epsilon}, {c}")


def dual_clip_terms(ratio, adv, epsilon: float = 0.2, c: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-step dual-clip objective and its derivative w.r.t. the ratio."""
    check_clip(epsilon, c)
    r = np.asarray(ratio, dtype=np.float64)
    a = np.asarray(adv, dtype=np.float64)
    plain = r * a
    clipped = np.clip(r, 1 - epsilon, 1 + epsilon) * a
    ppo = np.minimum(plain, clipped)
    grad = np.where(plain <= clipped, a, 0.0)
    floor = (a < 0) & (c * a > ppo)
    return np.where(floor, c * a, ppo), np.where(floor, 0.0, grad)


def dual_clip_loss(ratio, adv, epsilon: float = 0.2, c: float = 3.0):
    value = dual_clip_terms(ratio, adv, epsilon, c)[0]
    return float(value) if value.ndim == 0 else value


def advantage(rewards, values, next_values, done, gamma_prime: float) -> np.ndarray:
    """One-step TD error; the bootstrap is dropped on terminal steps."""
    nv = np.where(np.asarray(done, dtype=bool), 0.0, np.asarray(next_values, dtype=np.float64))
    return np.asarray(rewards, dtype=np.float64) + gamma_prime * nv - np.asarray(values, dtype=np.float64)


# ---------------------------------------------------------------------------
# Update


@dataclass(frozen=True)
class PpoConfig:
    epsilon: float = 0.2
    c: float = 3.0
    gamma_prime: float = 0.99
    lambda_init: float | None = None  # None means log|A|
    h_target: float = 0.1
    n_policy: int = 5
    learning_rate: float = 1e-4
    critic_learning_rate: float | None = None  # None means learning_rate
    lambda_lr: float = 1e-4
    agents: int = 16
    hidden: tuple[int, ...] = (128, 128)
    head_scale: float = 0.01  # shrinks the actor's output layer so training starts near uniform

    def __post_init__(self) -> None:
        check_clip(self.epsilon, self.c)
        if not 0 < self.gamma_prime <= 1:
            raise ValueError("gamma_prime must lie in (0, 1]")
        if self.head_scale <= 0:
            raise ValueError("head_scale must be > 0")
        if self.n_policy < 1 or self.agents < 1:
            raise ValueError("n_policy and agents must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def initial_lambda(self, n_actions: int) -> float:
        return math.log(n_actions) if self.lambda_init is None else float(self.lambda_init)

    @property
    def actor_adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate)

    @property
    def critic_adam(self) -> AdamConfig:
        return AdamConfig(self.critic_learning_rate or self.learning_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def make_networks(obs_dim: int, n_actions: int, cfg: PpoConfig, seed: int
                  ) -> tuple[MlpModel, MlpModel]:
    actor = tinynet.init(MlpSpec(obs_dim, cfg.hidden, n_actions, "softmax"), seed)
    actor.weights[-1] *= cfg.head_scale
    critic = tinynet.init(MlpSpec(obs_dim, cfg.hidden, 1, "linear"), seed + 1)
    return actor, critic


@dataclass
class Batch:
    """Transitions stacked column-wise; ``probs`` are behavior-time action probabilities."""

    obs: np.ndarray
    actions: np.ndarray
    probs: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.actions)
        if n == 0:
            raise EmptyTrajectory("empty batch")
        if not all(len(a) == n for a in (self.obs, self.probs, self.rewards, self.next_obs, self.done)):
            raise ValueError("batch columns have different lengths")
        if np.any(self.probs <= 0) or np.any(self.probs > 1):
            raise ValueError("behavior probabilities must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class PpoStats:
    actor_objective: float
    critic_loss: float
    entropy: float
    mean_advantage: float
    clip_fraction: float


def actor_grads(actor: MlpModel, obs: np.ndarray, actions: np.ndarray, old_probs: np.ndarray,
                adv: np.ndarray, lam: float, epsilon: float, c: float
                ) -> tuple[tinynet.Grads, float, float, float]:
    """Gradient of -(mean dual-clip objective + lam * mean entropy)."""
    probs, cache = tinynet.forward(actor, obs)
    n = len(actions)
    rows = np.arange(n)
    ratio = probs[rows, actions] / old_probs
    obj, d_ratio = dual_clip_terms(ratio, adv, epsilon, c)
    ent = entropies(probs)
    g = (lam / n) * (np.log(np.maximum(probs, 1e-300)) + 1.0)
    g[rows, actions] -= d_ratio / old_probs / n
    clip_frac = float(np.mean(np.abs(ratio - 1) > epsilon))
    return tinynet.backward(actor, cache, g), float(obj.mean()), float(ent.mean()), clip_frac


def ppo_update(batch: Batch, actor: MlpModel, critic: MlpModel, cfg: PpoConfig, lam: float
               ) -> PpoStats:
    """``n_policy`` full-batch passes on actor and critic, in place.

    Advantages and critic targets are computed once from the critic as it
    stood before the update.
    """
    v = critic(batch.obs)[:, 0]
    v_next = critic(batch.next_obs)[:, 0]
    adv = advantage(batch.rewards, v, v_next, batch.done, cfg.gamma_prime)
    target = batch.rewards + cfg.gamma_prime * np.where(batch.done, 0.0, v_next)
    n = len(batch)
    obj = ent = clip_frac = closs = 0.0
    for _ in range(cfg.n_policy):
        grads, obj, ent, clip_frac = actor_grads(actor, batch.obs, batch.actions, batch.probs, adv,
                                                 lam, cfg.epsilon, cfg.c)
        tinynet.adam_step(actor, grads, cfg.actor_adam)
        pred, cache = tinynet.forward(critic, batch.obs)
        err = pred[:, 0] - target
        closs = float(np.mean(err ** 2))
        tinynet.adam_step(critic, tinynet.backward(critic, cache, (2.0 / n) * err[:, None]),
                          cfg.critic_adam)
    return PpoStats(obj, closs, ent, float(adv.mean()), clip_frac)


# ---------------------------------------------------------------------------
# Acting


class ActorPolicy:
    """Bitrate selector backed by an actor network; greedy unless given an rng."""

    name = "ppo"

    def __init__(self, actor: MlpModel, obs_cfg: ObsConfig = ObsConfig(),
                 rng: np.random.Generator | None = None) -> None:
        self.actor = actor
        self.obs_cfg = obs_cfg
        self.rng = rng
        self.trace: list[tuple[np.ndarray, int, np.ndarray]] = []

    def reset(self) -> None:
        self.trace = []

    def __call__(self, view: PlayerView) -> int:
        obs = observe(view, self.obs_cfg)
        probs = self.actor(obs)
        if self.rng is None:
            action = int(np.argmax(probs))
        else:
            action = int(self.rng.choice(len(probs), p=probs / probs.sum()))
            # float rounding can leave a sampled action with probability exactly 0
            if probs[action] <= 0:
                action = int(np.argmax(probs))
        self.trace.append((obs, action, probs))
        return action
