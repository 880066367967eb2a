"""Rank-based QoE models trained from per-user orderings of opinion scores.

Two scorers share the same pairwise objective: a 3x128 MLP over the trailing
window of per-chunk features, and a 4-weight linear model over session
aggregates whose weights read directly as the linear QoE coefficients.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tinynet
from .data import RatingDataset, SessionRecord
from .errors import EmptyTestSet, InsufficientSessions, SchemaError, UnknownSession
from .tinynet import AdamConfig, MlpModel, MlpSpec

log = logging.getLogger(__name__)

WINDOW = 7
MAX_BITRATE = 4.3
REBUFFER_CLIP = 10.0
TIE_TOLERANCE = 0.05

ScoreFn = Callable[[SessionRecord], float]


def rel_label(y_i: float, y_j: float) -> int:
    if y_i > y_j:
        return 1
    if y_i < y_j:
        return -1
    return 0


@dataclass(frozen=True)
class LinWeights:
    """Coefficients of the linear QoE: quality, rebuffer, upward and downward switch terms."""

    alpha_v: float
    beta_v: float
    gamma_v: float
    delta_v: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(x) for x in self.as_tuple()):
            raise ValueError(f"non-finite weights {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha_v, self.beta_v, self.gamma_v, self.delta_v)

    def __add__(self, other: "LinWeights") -> "LinWeights":
        return LinWeights(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def ratios(self) -> tuple[float, float, float]:
        a = self.alpha_v
        return (self.beta_v / a, self.gamma_v / a, self.delta_v / a)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LinWeights":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(float(d["alpha_v"]), float(d["beta_v"]), float(d["gamma_v"]),
                       float(d["delta_v"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: expected alpha_v/beta_v/gamma_v/delta_v: {exc!r}") from exc


# Values reported for the published experimental setup, stored verbatim.
REFERENCE_WEIGHTS = LinWeights(0.535, -0.215, 0.13, 1.37)


def aggregate_features(vmaf: np.ndarray, rebuffer: np.ndarray) -> np.ndarray:
    """(sum q, sum T, sum of upward quality steps, sum of downward quality steps)."""
    dq = np.diff(vmaf)
    return np.array([vmaf.sum(), rebuffer.sum(), np.maximum(dq, 0).sum(), np.maximum(-dq, 0).sum()])


def qoe_lin(session: SessionRecord, w: LinWeights) -> float:
    q, t, up, down = aggregate_features(session.vmaf, session.rebuffer)
    return float(w.alpha_v * q - w.beta_v * t - w.gamma_v * up - w.delta_v * down)


def qoe_lin_step(vmaf: float, rebuffer: float, vmaf_change: float, w: LinWeights) -> float:
    """One chunk's contribution to ``qoe_lin``; ``vmaf_change`` is 0 for the first chunk."""
    return (w.alpha_v * vmaf - w.beta_v * rebuffer
            - w.gamma_v * max(vmaf_change, 0.0) - w.delta_v * max(-vmaf_change, 0.0))


# ---------------------------------------------------------------------------
# Window features


@dataclass(frozen=True)
class FeatureConfig:
    window: int = WINDOW
    max_bitrate: float = MAX_BITRATE
    rebuffer_clip: float = REBUFFER_CLIP

    @property
    def dim(self) -> int:
        return 3 * self.window


def window_features(vmaf: np.ndarray, bitrate: np.ndarray, rebuffer: np.ndarray, end_chunk: int,
                    cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Normalized trailing window ending at ``end_chunk``: [vmaf lanes | bitrate lanes | rebuffer lanes].

    Positions before the first chunk repeat the first chunk's quality and
    bitrate with zero rebuffering.
    """
    k = cfg.window
    lo = end_chunk - k + 1
    idx = np.arange(lo, end_chunk + 1)
    pad = idx < 0
    idx = np.maximum(idx, 0)
    v = vmaf[idx] / 100.0
    b = np.minimum(bitrate[idx] / cfg.max_bitrate, 1.0)
    r = np.minimum(rebuffer[idx], cfg.rebuffer_clip) / cfg.rebuffer_clip
    r = np.where(pad, 0.0, r)
    return np.concatenate([v, b, r])


def extract_features(session: SessionRecord, end_chunk: int,
                     cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    if not 0 <= end_chunk < len(session):
        raise IndexError(f"end_chunk {end_chunk} outside session of length {len(session)}")
    return window_features(session.vmaf, session.bitrate, session.rebuffer, end_chunk, cfg)


def all_window_features(session: SessionRecord, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Features for every end chunk, shape (T, 3k)."""
    return np.stack([extract_features(session, t, cfg) for t in range(len(session))])


class DnnScorer:
    """Session scorer backed by a trained MLP; a session's score is its final window."""

    def __init__(self, model: MlpModel, cfg: FeatureConfig | None = None) -> None:
        self.model = model
        self.cfg = cfg or FeatureConfig(**model.meta.get("features", {}))

    def __call__(self, session: SessionRecord) -> float:
        return float(self.model(extract_features(session, len(session) - 1, self.cfg))[0])

    def score_window(self, features: np.ndarray) -> float:
        return float(self.model(features)[0])

    def score_many(self, sessions: Sequence[SessionRecord]) -> np.ndarray:
        x = np.stack([extract_features(s, len(s) - 1, self.cfg) for s in sessions])
        return self.model(x)[:, 0]


class LinScorer:
    def __init__(self, w: LinWeights) -> None:
        self.w = w

    def __call__(self, session: SessionRecord) -> float:
        return qoe_lin(session, self.w)


# ---------------------------------------------------------------------------
# Pairwise objective


def pair_loss(r_i: float, r_j: float, a: int) -> tuple[float, float, float]:
    """Logistic loss on the score gap for ordered pairs, squared gap for ties."""
    d = r_i - r_j
    if a == 0:
        return d * d, 2.0 * d, -2.0 * d
    z = a * d
    # -log sigmoid(z) = softplus(-z), computed stably
    loss = max(-z, 0.0) + math.log1p(math.exp(-abs(z)))
    g = -a / (1.0 + math.exp(z)) if z > -700 else -a
    return loss, g, -g


def pair_loss_batch(r_i: np.ndarray, r_j: np.ndarray, a: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ``pair_loss``; returns per-pair (loss, dL/dr_i, dL/dr_j)."""
    d = r_i - r_j
    z = a * d
    tie = a == 0
    logistic = np.logaddexp(0.0, -z)
    # d/dd of softplus(-a d) = -a * sigmoid(-a d)
    grad_log = -a * np.exp(-np.logaddexp(0.0, z))
    loss = np.where(tie, d * d, logistic)
    g = np.where(tie, 2.0 * d, grad_log)
    return loss, g, -g


# ---------------------------------------------------------------------------
# Pair sampling


@dataclass(frozen=True)
class PairSample:
    session_i: SessionRecord
    session_j: SessionRecord
    label: int
    user_id: str
    query_id: str


class PairSampler:
    """Vectorized sampler over (query, user, session pair) triples.

    A query is drawn uniformly, then a user uniformly among those who rated
    at least two of its sessions, then an ordered pair of distinct sessions
    uniformly among that user's rated ones.
    """

    def __init__(self, d: RatingDataset) -> None:
        self.dataset = d
        self.session_ids = sorted(d.sessions)
        index = {s: i for i, s in enumerate(self.session_ids)}
        by_user = d.user_scores()
        users = sorted(by_user)
        q_start, q_count, g_start, g_size = [], [], [], []
        flat_sess, flat_score, g_user, g_query = [], [], [], []
        self.query_ids: list[str] = []
        for q in sorted(d.queries):
            members = d.queries[q]
            n_groups = 0
            first = len(g_start)
            for u in users:
                rated = [(index[s], by_user[u][s]) for s in members if s in by_user[u]]
                if len(rated) < 2:
                    continue
                g_start.append(len(flat_sess))
                g_size.append(len(rated))
                for si, sc in rated:
                    flat_sess.append(si)
                    flat_score.append(sc)
                g_user.append(u)
                g_query.append(q)
                n_groups += 1
            if n_groups:
                self.query_ids.append(q)
                q_start.append(first)
                q_count.append(n_groups)
        if not q_start:
            raise InsufficientSessions("no user rated two sessions of the same query")
        self._q_start = np.array(q_start)
        self._q_count = np.array(q_count)
        self._g_start = np.array(g_start)
        self._g_size = np.array(g_size)
        self._flat_sess = np.array(flat_sess)
        self._flat_score = np.array(flat_score, dtype=np.float64)
        self._g_user = g_user
        self._g_query = g_query

    def sample_indices(self, k: int, rng: np.random.Generator
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(session index i, session index j, label, group id), each shape (k,)."""
        if k < 1:
            raise ValueError("batch size must be >= 1")
        q = rng.integers(len(self._q_start), size=k)
        g = self._q_start[q] + (rng.random(k) * self._q_count[q]).astype(np.int64)
        n = self._g_size[g]
        i = (rng.random(k) * n).astype(np.int64)
        j = (rng.random(k) * (n - 1)).astype(np.int64)
        j += j >= i
        pi, pj = self._g_start[g] + i, self._g_start[g] + j
        labels = np.sign(self._flat_score[pi] - self._flat_score[pj]).astype(np.int64)
        return self._flat_sess[pi], self._flat_sess[pj], labels, g

    def sample(self, k: int, rng: np.random.Generator) -> list[PairSample]:
        si, sj, lab, g = self.sample_indices(k, rng)
        sess = self.dataset.sessions
        ids = self.session_ids
        return [PairSample(sess[ids[a]], sess[ids[b]], int(c), self._g_user[h], self._g_query[h])
                for a, b, c, h in zip(si.tolist(), sj.tolist(), lab.tolist(), g.tolist())]


def sample_batch(d: RatingDataset, k: int, rng: np.random.Generator) -> list[PairSample]:
    return PairSampler(d).sample(k, rng)


def enumerate_pairs(d: RatingDataset) -> list[PairSample]:
    """Every unordered same-query, same-user pair, in deterministic order."""
    by_user = d.user_scores()
    out = []
    for q in sorted(d.queries):
        members = d.queries[q]
        for u in sorted(by_user):
            rated = [s for s in members if s in by_user[u]]
            for x in range(len(rated)):
                for y in range(x + 1, len(rated)):
                    si, sj = rated[x], rated[y]
                    out.append(PairSample(d.sessions[si], d.sessions[sj],
                                          rel_label(by_user[u][si], by_user[u][sj]), u, q))
    return out


# ---------------------------------------------------------------------------
# Identity Rate


def identity_rate_from_scores(r_i: np.ndarray, r_j: np.ndarray, labels: np.ndarray,
                              tie_tolerance: float = TIE_TOLERANCE) -> float:
    if labels.size == 0:
        raise EmptyTestSet("no test pairs")
    d = r_i - r_j
    ordered = (labels != 0) & (labels * d > 0)
    denom = np.maximum(np.maximum(np.abs(r_i), np.abs(r_j)), 1e-6)
    tied = (labels == 0) & (np.abs(d) / denom < tie_tolerance)
    return 100.0 * float(np.count_nonzero(ordered | tied)) / labels.size


def identity_rate(score_fn: ScoreFn, pairs: Sequence[PairSample],
                  tie_tolerance: float = TIE_TOLERANCE) -> float:
    """Percentage of pairs whose score ordering agrees with the rater's."""
    if not pairs:
        raise EmptyTestSet("no test pairs")
    cache: dict[str, float] = {}
    batch = getattr(score_fn, "score_many", None)
    if batch is not None:
        unique = {}
        for p in pairs:
            unique.setdefault(p.session_i.session_id, p.session_i)
            unique.setdefault(p.session_j.session_id, p.session_j)
        ids = list(unique)
        cache = dict(zip(ids, batch([unique[s] for s in ids]).tolist()))

    def score(s: SessionRecord) -> float:
        if s.session_id not in cache:
            cache[s.session_id] = float(score_fn(s))
        return cache[s.session_id]

    r_i = np.array([score(p.session_i) for p in pairs])
    r_j = np.array([score(p.session_j) for p in pairs])
    labels = np.array([p.label for p in pairs])
    return identity_rate_from_scores(r_i, r_j, labels, tie_tolerance)


class MosLookup:
    """Mean opinion score per known session; unknown sessions raise ``UnknownSession``."""

    def __init__(self, mos: dict[str, float]) -> None:
        self.mos = mos

    def __call__(self, session: SessionRecord) -> float:
        try:
            return self.mos[session.session_id]
        except KeyError:
            raise UnknownSession(session.session_id) from None


def session_mos(d: RatingDataset) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for (_, sid), score in sorted(d.scores.items()):
        acc.setdefault(sid, []).append(score)
    return {sid: float(np.mean(v)) for sid, v in acc.items()}


def mos_baseline(d_train: RatingDataset) -> MosLookup:
    return MosLookup(session_mos(d_train))


# ---------------------------------------------------------------------------
# Training


@dataclass
class CurvePoint:
    model: str
    epoch: int
    loss: float
    identity_rate: float | None


@dataclass
class TrainResult:
    curve: list[CurvePoint] = field(default_factory=list)


def _eval_arrays(pairs: Sequence[PairSample] | None, index: dict[str, int]):
    if not pairs:
        return None
    return (np.array([index[p.session_i.session_id] for p in pairs]),
            np.array([index[p.session_j.session_id] for p in pairs]),
            np.array([p.label for p in pairs]))


def default_dnn_spec(cfg: FeatureConfig = FeatureConfig(), width: int = 128) -> MlpSpec:
    return MlpSpec(cfg.dim, (width, width, width), 1, "linear")


def train_qoe_dnn(d_train: RatingDataset, spec: MlpSpec | None = None, epochs: int = 1000,
                  k: int = 8192, adam: AdamConfig = AdamConfig(), seed: int = 0,
                  eval_pairs: Sequence[PairSample] | None = None, eval_interval: int = 100,
                  features: FeatureConfig = FeatureConfig(), name: str = "qoe_dnn",
                  ) -> tuple[MlpModel, list[CurvePoint]]:
    """One sampled batch of ``k`` pairs per epoch, one Adam step per batch."""
    spec = spec or default_dnn_spec(features)
    if spec.input_dim != features.dim or spec.output_dim != 1:
        raise ValueError(f"spec {spec} does not fit {features.dim}-d window features")
    rng = np.random.default_rng(seed)
    model = tinynet.init(spec, seed)
    model.meta = {"kind": "qoe_dnn", "features": asdict(features)}
    sampler = PairSampler(d_train)
    feats = np.stack([extract_features(d_train.sessions[s], len(d_train.sessions[s]) - 1, features)
                      for s in sampler.session_ids])
    eval_feats, eval_idx = _eval_setup(eval_pairs, features)
    curve: list[CurvePoint] = []
    for epoch in range(1, epochs + 1):
        si, sj, lab, _ = sampler.sample_indices(k, rng)
        x = np.concatenate([feats[si], feats[sj]])
        out, cache = tinynet.forward(model, x)
        r = out[:, 0]
        loss, gi, gj = pair_loss_batch(r[:k], r[k:], lab)
        grads = tinynet.backward(model, cache, (np.concatenate([gi, gj]) / k)[:, None])
        tinynet.adam_step(model, grads, adam)
        if not model.all_finite():
            raise FloatingPointError(f"{name}: non-finite parameters at epoch {epoch}")
        if epoch % eval_interval == 0 or epoch == epochs:
            ir = None
            if eval_idx is not None:
                scores = model(eval_feats)[:, 0]
                ir = identity_rate_from_scores(scores[eval_idx[0]], scores[eval_idx[1]], eval_idx[2])
            curve.append(CurvePoint(name, epoch, float(loss.mean()), ir))
            log.info("%s epoch %d loss %.5f identity %s", name, epoch, loss.mean(), ir)
    return model, curve


def _eval_setup(pairs: Sequence[PairSample] | None, features: FeatureConfig | None):
    if not pairs:
        return None, None
    sessions: dict[str, SessionRecord] = {}
    for p in pairs:
        sessions.setdefault(p.session_i.session_id, p.session_i)
        sessions.setdefault(p.session_j.session_id, p.session_j)
    ids = sorted(sessions)
    index = {s: i for i, s in enumerate(ids)}
    if features is None:
        feats = np.stack([aggregate_features(sessions[s].vmaf, sessions[s].rebuffer) for s in ids])
    else:
        feats = np.stack([extract_features(sessions[s], len(sessions[s]) - 1, features) for s in ids])
    return feats, _eval_arrays(pairs, index)


def train_qoe_lin(d_train: RatingDataset, epochs: int = 2000, k: int = 8192,
                  learning_rate: float = 0.5, seed: int = 0,
                  eval_pairs: Sequence[PairSample] | None = None, eval_interval: int = 100,
                  ) -> tuple[LinWeights, list[CurvePoint]]:
    """Fit the 4-neuron surrogate by plain gradient descent on sampled pair batches.

    Aggregates are divided by their training-set standard deviation so one
    step size suits all four inputs; the scale is folded back into the
    returned coefficients.
    """
    rng = np.random.default_rng(seed)
    sampler = PairSampler(d_train)
    raw = np.stack([aggregate_features(d_train.sessions[s].vmaf, d_train.sessions[s].rebuffer)
                    for s in sampler.session_ids])
    scale = raw.std(axis=0)
    scale[scale < 1e-12] = 1.0
    feats = raw / scale
    model = tinynet.init(MlpSpec(4, (), 1, "linear"), seed)
    eval_raw, eval_idx = _eval_setup(eval_pairs, None)
    curve: list[CurvePoint] = []

    def weights() -> LinWeights:
        u = model.weights[0][:, 0] / scale
        return LinWeights(float(u[0]), float(-u[1]), float(-u[2]), float(-u[3]))

    for epoch in range(1, epochs + 1):
        si, sj, lab, _ = sampler.sample_indices(k, rng)
        x = np.concatenate([feats[si], feats[sj]])
        out, cache = tinynet.forward(model, x)
        r = out[:, 0]
        loss, gi, gj = pair_loss_batch(r[:k], r[k:], lab)
        grads = tinynet.backward(model, cache, (np.concatenate([gi, gj]) / k)[:, None])
        tinynet.sgd_step(model, grads, learning_rate)
        if not model.all_finite():
            raise FloatingPointError(f"qoe_lin: non-finite parameters at epoch {epoch}")
        if epoch % eval_interval == 0 or epoch == epochs:
            ir = None
            if eval_idx is not None:
                w = np.array(weights().as_tuple()) * np.array([1, -1, -1, -1])
                scores = eval_raw @ w
                ir = identity_rate_from_scores(scores[eval_idx[0]], scores[eval_idx[1]], eval_idx[2])
            curve.append(CurvePoint("qoe_lin", epoch, float(loss.mean()), ir))
    return weights(), curve


def train_qoe_mos(d_train: RatingDataset, spec: MlpSpec | None = None, epochs: int = 1000,
                  k: int = 256, adam: AdamConfig = AdamConfig(), seed: int = 0,
                  eval_pairs: Sequence[PairSample] | None = None, eval_interval: int = 100,
                  features: FeatureConfig = FeatureConfig(),
                  ) -> tuple[MlpModel, list[CurvePoint]]:
    """Control model: same network regressed (squared error) onto per-session MOS / 100."""
    spec = spec or default_dnn_spec(features)
    rng = np.random.default_rng(seed)
    model = tinynet.init(spec, seed)
    model.meta = {"kind": "qoe_mos", "features": asdict(features)}
    mos = session_mos(d_train)
    ids = sorted(mos)
    if not ids:
        raise InsufficientSessions("no rated sessions")
    feats = np.stack([extract_features(d_train.sessions[s], len(d_train.sessions[s]) - 1, features)
                      for s in ids])
    target = np.array([mos[s] for s in ids]) / 100.0
    eval_feats, eval_idx = _eval_setup(eval_pairs, features)
    curve: list[CurvePoint] = []
    for epoch in range(1, epochs + 1):
        b = rng.integers(len(ids), size=k)
        out, cache = tinynet.forward(model, feats[b])
        err = out[:, 0] - target[b]
        grads = tinynet.backward(model, cache, (2.0 * err / k)[:, None])
        tinynet.adam_step(model, grads, adam)
        if epoch % eval_interval == 0 or epoch == epochs:
            ir = None
            if eval_idx is not None:
                scores = model(eval_feats)[:, 0]
                ir = identity_rate_from_scores(scores[eval_idx[0]], scores[eval_idx[1]], eval_idx[2])
            curve.append(CurvePoint("qoe_mos", epoch, float((err ** 2).mean()), ir))
    return model, curve


def permute_scores(d: RatingDataset, seed: int) -> RatingDataset:
    """Shuffle each user's scores across the sessions that user rated."""
    rng = np.random.default_rng(seed)
    scores = {}
    for user, rated in sorted(d.user_scores().items()):
        sids = sorted(rated)
        vals = np.array([rated[s] for s in sids])[rng.permutation(len(sids))]
        for s, v in zip(sids, vals.tolist()):
            scores[(user, s)] = v
    return RatingDataset(d.queries, d.sessions, scores)


def shuffled_control(d_train: RatingDataset, eval_pairs: Sequence[PairSample], replicates: int = 32,
                     epochs: int = 200, k: int = 1024, adam: AdamConfig = AdamConfig(1e-3),
                     seed: int = 0, features: FeatureConfig = FeatureConfig()) -> list[float]:
    """Held-out identity rates of rank models fitted to independently shuffled scores.

    One replicate's rate is dominated by how a random function happens to
    line up with the true ordering, so chance level is estimated by the
    mean over replicates.
    """
    rates = []
    for r in range(replicates):
        shuffled = permute_scores(d_train, seed * 100_003 + r)
        _, curve = train_qoe_dnn(shuffled, epochs=epochs, k=k, adam=adam, seed=seed * 100_003 + r,
                                 eval_pairs=eval_pairs, eval_interval=epochs, features=features,
                                 name="shuffled")
        rates.append(float(curve[-1].identity_rate))
    return rates
