"""Policy training loop: trace selection, blended-reward rollouts, PPO updates, checkpoints."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tinynet
from .data import NetworkTrace, VideoManifest
from .errors import EmptyPool, SchemaError
from .evaluation import evaluate, fmt
from .policy import (ActorPolicy, Batch, ObsConfig, PpoConfig, PpoStats, RunningNorm,
                     blended_reward, build_observation, entropies, make_networks, omega,
                     ppo_update, step_terms, update_lambda)
from .qoe import DnnScorer, LinWeights
from .selector import BanditConfig, DiscountedUcb
from .sim import SimConfig, rollout

RUN_LOG_COLUMNS = ("epoch", "trace_id", "mean_entropy", "omega", "lambda", "mean_reward",
                   "eval_qoe_lin", "eval_qoe_dnn")
SELECTION_COLUMNS = ("epoch", "trace_id", "value", "mean", "bonus")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    seed: int = 0
    ppo: PpoConfig = field(default_factory=PpoConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    obs: ObsConfig = field(default_factory=ObsConfig)
    use_selector: bool = True
    fixed_omega: float | None = None  # ablations: 1 = linear reward only, 0 = learned only
    validation_interval: int = 300
    checkpoint_interval: int = 100
    norm_momentum: float = 0.999

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.fixed_omega is not None and not 0.0 <= self.fixed_omega <= 1.0:
            raise ValueError("fixed_omega must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ppo"] = self.ppo.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        ppo = dict(d.pop("ppo", {}))
        if "hidden" in ppo:
            ppo["hidden"] = tuple(ppo["hidden"])
        return cls(ppo=PpoConfig(**ppo), bandit=BanditConfig(**d.pop("bandit", {})),
                   sim=SimConfig(**d.pop("sim", {})), obs=ObsConfig(**d.pop("obs", {})), **d)


DESK_LAMBDA_LR = 1e-2
DESK_LEARNING_RATE = 1e-3
DESK_CRITIC_LEARNING_RATE = 3e-3


def desk_config(**overrides) -> TrainConfig:
    """Small-budget preset: 2 agents, faster learning rates and entropy-weight controller."""
    ppo = PpoConfig(agents=2, learning_rate=DESK_LEARNING_RATE, lambda_lr=DESK_LAMBDA_LR,
                    critic_learning_rate=DESK_CRITIC_LEARNING_RATE)
    base = TrainConfig(ppo=ppo)
    return replace(base, **overrides)


@dataclass
class EpochRecord:
    epoch: int
    trace_id: str
    mean_entropy: float
    omega: float
    lam: float
    mean_reward: float
    eval_qoe_lin: float | None = None
    eval_qoe_dnn: float | None = None
    stats: PpoStats | None = None

    def csv_row(self) -> list[str]:
        vals = [self.epoch, self.trace_id, self.mean_entropy, self.omega, self.lam, self.mean_reward,
                self.eval_qoe_lin, self.eval_qoe_dnn]
        return ["" if v is None else fmt(v) for v in vals]


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class Trainer:
    """Owns the learner state; rollout agents run one after another on snapshots of it."""

    def __init__(self, cfg: TrainConfig, traces: Sequence[NetworkTrace],
                 manifests: Sequence[VideoManifest], w_lin: LinWeights,
                 qoe_model: tinynet.MlpModel | None, val_traces: Sequence[NetworkTrace] = (),
                 out_dir: str | Path | None = None) -> None:
        if not traces:
            raise EmptyPool("no training traces")
        if not manifests:
            raise EmptyPool("no training manifests")
        levels = {m.n_levels for m in manifests}
        if len(levels) != 1:
            raise ValueError("all manifests must share one ladder size")
        self.cfg = cfg
        self.traces = {t.id: t for t in traces}
        if len(self.traces) != len(traces):
            raise ValueError("duplicate trace ids in the training pool")
        self.trace_ids = sorted(self.traces)
        self.manifests = list(manifests)
        self.w_lin = w_lin
        self.scorer = DnnScorer(qoe_model) if qoe_model is not None else None
        self.val_traces = list(val_traces)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.n_actions = levels.pop()
        obs_dim = cfg.obs.dim(self.n_actions)
        self.actor, self.critic = make_networks(obs_dim, self.n_actions, cfg.ppo, cfg.seed)
        self.lam = cfg.ppo.initial_lambda(self.n_actions)
        self.omega = 1.0 if cfg.fixed_omega is None else cfg.fixed_omega
        self.norm_lin = RunningNorm(cfg.norm_momentum)
        self.norm_dnn = RunningNorm(cfg.norm_momentum)
        self.selector = DiscountedUcb(self.trace_ids, cfg.bandit)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.log: list[EpochRecord] = []
        self.selection_log: list[tuple[int, str, float, float, float]] = []

    # -- one epoch ---------------------------------------------------------------

    def choose_trace(self) -> str:
        t = self.epoch + 1
        if self.cfg.use_selector:
            v = self.selector.select(t)
            self.selection_log.append((t, v.trace_id, v.value, v.mean, v.bonus))
            return v.trace_id
        tid = self.trace_ids[int(self.rng.integers(len(self.trace_ids)))]
        self.selection_log.append((t, tid, float("nan"), float("nan"), float("nan")))
        return tid

    def collect(self, trace: NetworkTrace, manifest: VideoManifest):
        obs, nxt, actions, probs, done, lin, dnn = [], [], [], [], [], [], []
        for _ in range(self.cfg.ppo.agents):
            start = float(self.rng.uniform(0.0, trace.span))
            agent = ActorPolicy(self.actor, self.cfg.obs, self.rng)
            r = rollout(agent, manifest, trace, self.cfg.sim, start_offset=start)
            o = np.stack([x[0] for x in agent.trace])
            final = build_observation(manifest, self.cfg.sim, r.final_state, r.outcomes, self.cfg.obs)
            obs.append(o)
            nxt.append(np.vstack([o[1:], final[None, :]]))
            actions.append([x[1] for x in agent.trace])
            probs.append(np.stack([x[2] for x in agent.trace]))
            done.append([out.done for out in r.outcomes])
            a, b = step_terms(r.outcomes, self.w_lin, self.scorer)
            lin.append(a)
            dnn.append(b)
        return (np.vstack(obs), np.vstack(nxt), np.concatenate(actions).astype(np.int64),
                np.vstack(probs), np.concatenate(done).astype(bool), np.concatenate(lin),
                np.concatenate(dnn))

    def run_epoch(self) -> EpochRecord:
        tid = self.choose_trace()
        manifest = self.manifests[int(self.rng.integers(len(self.manifests)))]
        obs, nxt, actions, dists, done, lin, dnn = self.collect(self.traces[tid], manifest)
        self.norm_lin.update(lin)
        self.norm_dnn.update(dnn)
        dnn_z = self.norm_dnn(dnn) if self.scorer is not None else np.zeros_like(lin)
        rewards = blended_reward(self.norm_lin(lin), dnn_z, self.omega)
        behavior = dists[np.arange(len(actions)), actions]
        batch = Batch(obs, actions, behavior, rewards, nxt, done)
        stats = ppo_update(batch, self.actor, self.critic, self.cfg.ppo, self.lam)
        mean_h = float(entropies(dists).mean())
        self.lam = update_lambda(self.lam, mean_h, self.cfg.ppo.h_target, self.cfg.ppo.lambda_lr)
        w = omega(dists)
        if self.cfg.use_selector:
            self.selector.record(tid, w, self.epoch + 1)
        if self.cfg.fixed_omega is None:
            self.omega = w
        self.epoch += 1
        rec = EpochRecord(self.epoch, tid, mean_h, w, self.lam, float(rewards.mean()), stats=stats)
        if self.val_traces and self.cfg.validation_interval > 0 \
                and self.epoch % self.cfg.validation_interval == 0:
            rec.eval_qoe_lin, rec.eval_qoe_dnn = self.validate()
        self.log.append(rec)
        return rec

    def validate(self) -> tuple[float, float]:
        rows = evaluate("ppo", self.greedy_policy, self.val_traces, self.manifests[0],
                        self.cfg.sim, self.w_lin, self.scorer)
        dnn = float(np.mean([r.qoe_dnn for r in rows])) if self.scorer is not None else float("nan")
        return float(np.mean([r.qoe_lin for r in rows])), dnn

    def greedy_policy(self) -> ActorPolicy:
        return ActorPolicy(self.actor, self.cfg.obs)

    def train(self, epochs: int | None = None) -> list[EpochRecord]:
        end = self.cfg.epochs if epochs is None else self.epoch + epochs
        while self.epoch < end:
            self.run_epoch()
            if self.out_dir is not None and self.cfg.checkpoint_interval > 0 \
                    and self.epoch % self.cfg.checkpoint_interval == 0:
                self.save(self.out_dir)
        if self.out_dir is not None:
            self.save(self.out_dir)
        return self.log

    # -- persistence ---------------------------------------------------------------

    def run_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_LOG_COLUMNS)
        for rec in self.log:
            w.writerow(rec.csv_row())
        return buf.getvalue()

    def selection_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SELECTION_COLUMNS)
        for row in self.selection_log:
            w.writerow([fmt(x) for x in row])
        return buf.getvalue()

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lambda": self.lam,
            "omega": self.omega,
            "norm_lin": self.norm_lin.to_dict(),
            "norm_dnn": self.norm_dnn.to_dict(),
            "selector": self.selector.to_dict(),
            "rng": self.rng.bit_generator.state,
            "config": self.cfg.to_dict(),
            "trace_ids": self.trace_ids,
        }

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        ckpt = out / "checkpoint"
        ckpt.mkdir(parents=True, exist_ok=True)
        _write_atomic(ckpt / "actor.json", json.dumps(tinynet.to_dict(self.actor), sort_keys=True))
        _write_atomic(ckpt / "critic.json", json.dumps(tinynet.to_dict(self.critic), sort_keys=True))
        _write_atomic(out / "run_log.csv", self.run_log_csv())
        _write_atomic(out / "selection_log.csv", self.selection_csv())
        # written last: a state file always refers to complete weights and logs
        _write_atomic(ckpt / "state.json", json.dumps(self.state_dict(), sort_keys=True, indent=1))

    def restore(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        ckpt = out / "checkpoint"
        try:
            st = json.loads((ckpt / "state.json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read checkpoint state in {ckpt}: {exc}") from exc
        if st["trace_ids"] != self.trace_ids:
            raise SchemaError("checkpoint was trained on a different trace pool")
        self.actor = tinynet.load(ckpt / "actor.json", self.actor.spec)
        self.critic = tinynet.load(ckpt / "critic.json", self.critic.spec)
        self.epoch = int(st["epoch"])
        self.lam = float(st["lambda"])
        self.omega = float(st["omega"])
        self.norm_lin = RunningNorm(**st["norm_lin"])
        self.norm_dnn = RunningNorm(**st["norm_dnn"])
        self.selector = DiscountedUcb.from_dict(st["selector"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = st["rng"]
        self.log = [_record_from_row(r) for r in _read_rows(out / "run_log.csv", RUN_LOG_COLUMNS)
                    if int(r["epoch"]) <= self.epoch]
        self.selection_log = [
            (int(r["epoch"]), r["trace_id"], float(r["value"]), float(r["mean"]), float(r["bonus"]))
            for r in _read_rows(out / "selection_log.csv", SELECTION_COLUMNS)
            if int(r["epoch"]) <= self.epoch
        ]


def _read_rows(path: Path, columns: Sequence[str]) -> list[dict]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != tuple(columns):
        raise SchemaError(f"{path}: unexpected columns {reader.fieldnames}")
    return list(reader)


def _opt(s: str) -> float | None:
    return None if s == "" else float(s)


def _record_from_row(r: dict) -> EpochRecord:
    return EpochRecord(int(r["epoch"]), r["trace_id"], float(r["mean_entropy"]), float(r["omega"]),
                       float(r["lambda"]), float(r["mean_reward"]), _opt(r["eval_qoe_lin"]),
                       _opt(r["eval_qoe_dnn"]))


def train_abr(traces: Sequence[NetworkTrace], manifests: Sequence[VideoManifest],
              w_lin: LinWeights, qoe_model: tinynet.MlpModel | None, cfg: TrainConfig,
              val_traces: Sequence[NetworkTrace] = (), out_dir: str | Path | None = None,
              resume: bool = False) -> Trainer:
    trainer = Trainer(cfg, traces, manifests, w_lin, qoe_model, val_traces, out_dir)
    if resume:
        if out_dir is None:
            raise ValueError("resume needs an output directory")
        trainer.restore(out_dir)
    trainer.train()
    return trainer
