"""Command-line entry points.

Every command accepts ``--config FILE``: a JSON object whose keys are the
command's option names (dashes or underscores). Values from the file win
over flags. ``ABRKIT_OUTPUT_ROOT`` re-roots relative output directories.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import baselines, data, evaluation, qoe, report, synthetic, tinynet
from .errors import AbrkitError
from .policy import ActorPolicy, ObsConfig, PpoConfig
from .selector import BanditConfig
from .sim import SimConfig, dump_outcomes_jsonl, rollout
from .tinynet import AdamConfig
from .train import TrainConfig, Trainer, desk_config

log = logging.getLogger("abrkit")

OUTPUT_ROOT_ENV = "ABRKIT_OUTPUT_ROOT"


def out_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def write(directory: Path, name: str, text: str) -> None:
    (directory / name).write_text(text, encoding="utf-8")


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# ---------------------------------------------------------------------------
# synth / ingest


def cmd_synth(a: argparse.Namespace) -> int:
    out = out_path(a.out)
    syn = synthetic.synth_ratings(a.seed, n_queries=a.queries, sessions_per_query=a.sessions,
                                  n_users=a.users)
    data.save_ratings(syn.dataset, out / "ratings")
    data.save_manifest(synthetic.synth_manifest(a.seed, n_chunks=a.chunks), out / "manifest.json")
    for name, n, seed in (("train", a.train_traces, a.seed + 1), ("val", a.val_traces, a.seed + 2),
                          ("test", a.test_traces, a.seed + 3)):
        d = out / "traces" / name
        d.mkdir(parents=True, exist_ok=True)
        for tr in synthetic.synth_trace_pool(n, seed, prefix=name):
            data.save_trace(tr, d / f"{tr.id}.txt")
    d = out / "traces" / "cliff"
    d.mkdir(parents=True, exist_ok=True)
    for i in range(a.cliff_traces):
        tr = synthetic.cliff_trace(f"cliff_{i:03d}", high_s=40 + 10 * i)
        data.save_trace(tr, d / f"{tr.id}.txt")
    print(f"wrote synthetic world to {out}")
    return 0


def cmd_ingest(a: argparse.Namespace) -> int:
    out = out_path(a.out)
    if a.kind == "traces":
        src = Path(a.src)
        files = sorted(p for p in src.iterdir() if p.is_file() and not p.name.startswith("."))
        for p in files:
            if a.format == "mahimahi":
                tr = data.trace_from_packet_log(p.read_text(encoding="utf-8").splitlines(), p.stem)
            else:
                tr = data.load_trace(p)
            data.save_trace(tr, out / f"{tr.id}.txt")
        print(f"traces: {len(files)}")
    elif a.kind == "ratings":
        ds = data.load_ratings(a.src)
        data.save_ratings(ds, out)
        c = ds.counts()
        print(" ".join(f"{k}: {v}" for k, v in c.items()))
    else:
        m = data.load_manifest(a.src)
        data.save_manifest(m, out / "manifest.json")
        print(f"chunks: {m.n_chunks} levels: {m.n_levels}")
    return 0


# ---------------------------------------------------------------------------
# QoE models


def identity_table(tr: data.RatingDataset, te: data.RatingDataset, dnn: tinynet.MlpModel,
                   w: qoe.LinWeights, mos_model: tinynet.MlpModel | None) -> list[dict]:
    pairs = qoe.enumerate_pairs(te)
    rows = [
        {"model": "qoe_lin", "identity_rate": qoe.identity_rate(qoe.LinScorer(w), pairs)},
        {"model": "qoe_dnn", "identity_rate": qoe.identity_rate(qoe.DnnScorer(dnn), pairs)},
        {"model": "mos_opt", "identity_rate": qoe.identity_rate(qoe.mos_baseline(te), pairs)},
    ]
    if mos_model is not None:
        rows.append({"model": "mos_regression",
                     "identity_rate": qoe.identity_rate(qoe.DnnScorer(mos_model), pairs)})
    for r in rows:
        r["pairs"] = len(pairs)
    return rows


def cmd_train_qoe(a: argparse.Namespace) -> int:
    ds = data.load_ratings(a.ratings)
    out = out_path(a.out)
    tr, te = data.split_dataset(ds, a.train_fraction, a.seed)
    pairs = qoe.enumerate_pairs(te)
    adam = AdamConfig(a.learning_rate)
    spec = qoe.default_dnn_spec(width=a.width)
    dnn, curve = qoe.train_qoe_dnn(tr, spec, a.epochs, a.batch_size, adam, a.seed, pairs,
                                   a.eval_interval)
    w, lin_curve = qoe.train_qoe_lin(tr, a.lin_epochs, a.batch_size, a.lin_learning_rate, a.seed,
                                     pairs, a.eval_interval)
    mos_model = None
    if a.mos_control:
        mos_model, mos_curve = qoe.train_qoe_mos(tr, spec, a.epochs, a.batch_size, adam, a.seed,
                                                 pairs, a.eval_interval)
        curve += mos_curve
    curve += lin_curve
    tinynet.save(dnn, out / "qoe_dnn.json")
    w.save(out / "qoe_lin.json")
    if mos_model is not None:
        tinynet.save(mos_model, out / "qoe_mos.json")
    write(out, "curves.csv", evaluation.to_csv(
        [{"model": c.model, "epoch": c.epoch, "loss": c.loss, "identity_rate": c.identity_rate}
         for c in curve], ["model", "epoch", "loss", "identity_rate"]))
    table = identity_table(tr, te, dnn, w, mos_model)
    write(out, "identity_rates.csv", evaluation.to_csv(table, ["model", "identity_rate", "pairs"]))
    for r in table:
        print(f"{r['model']:<16} {r['identity_rate']:.2f}")
    return 0


def cmd_eval_qoe(a: argparse.Namespace) -> int:
    ds = data.load_ratings(a.ratings)
    tr, te = data.split_dataset(ds, a.train_fraction, a.seed)
    models = Path(a.models)
    dnn = tinynet.load(models / "qoe_dnn.json")
    w = qoe.LinWeights.load(models / "qoe_lin.json")
    mos_path = models / "qoe_mos.json"
    mos_model = tinynet.load(mos_path) if mos_path.exists() else None
    table = identity_table(tr, te, dnn, w, mos_model)
    text = evaluation.to_csv(table, ["model", "identity_rate", "pairs"])
    if a.out:
        write(out_path(a.out), "identity_rates.csv", text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Policy training and evaluation


def load_manifests(paths: Sequence[str]) -> list[data.VideoManifest]:
    return [data.load_manifest(p) for p in paths]


def train_config(a: argparse.Namespace, file_cfg: dict) -> TrainConfig:
    ppo = PpoConfig(agents=a.agents, learning_rate=a.learning_rate,
                    critic_learning_rate=a.critic_learning_rate, lambda_lr=a.lambda_lr,
                    n_policy=a.n_policy, h_target=a.h_target)
    cfg = TrainConfig(epochs=a.epochs, seed=a.seed, ppo=ppo, use_selector=not a.no_selector,
                      fixed_omega=a.fixed_omega, validation_interval=a.validation_interval,
                      checkpoint_interval=a.checkpoint_interval)
    for key, cls in (("ppo", PpoConfig), ("bandit", BanditConfig), ("sim", SimConfig),
                     ("obs", ObsConfig)):
        if key in file_cfg:
            sub = dict(file_cfg[key])
            if "hidden" in sub:
                sub["hidden"] = tuple(sub["hidden"])
            cfg = replace(cfg, **{key: replace(getattr(cfg, key), **sub)})
    return cfg


def cmd_train_abr(a: argparse.Namespace, file_cfg: dict) -> int:
    traces = data.load_trace_dir(a.traces)
    val = data.load_trace_dir(a.val_traces) if a.val_traces else []
    manifests = load_manifests(a.manifest)
    models = Path(a.qoe)
    w = qoe.LinWeights.load(models / "qoe_lin.json")
    dnn = tinynet.load(models / "qoe_dnn.json")
    cfg = train_config(a, file_cfg)
    out = out_path(a.out)
    trainer = Trainer(cfg, traces, manifests, w, dnn, val, out)
    if a.resume:
        trainer.restore(out)
        print(f"resuming at epoch {trainer.epoch}")
    write(out, "config.json", dump_json(cfg.to_dict()))
    trainer.train()
    last = trainer.log[-1] if trainer.log else None
    if last is not None:
        print(f"epoch {last.epoch} omega {last.omega:.4f} entropy {last.mean_entropy:.4f}")
    return 0


def make_abr(name: str, a: argparse.Namespace):
    if name == "rate":
        return baselines.RateBased
    if name == "bba":
        cfg = baselines.BbaConfig(a.reservoir, a.cushion)
        return lambda: baselines.BufferBased(cfg)
    if name == "mpc":
        w = qoe.LinWeights.load(Path(a.qoe) / "qoe_lin.json")
        cfg = baselines.MpcConfig(w, horizon=a.horizon)
        return lambda: baselines.RobustMpc(cfg)
    if name == "ppo":
        if not a.checkpoint:
            raise AbrkitError("--abr ppo needs --checkpoint")
        actor = tinynet.load(Path(a.checkpoint) / "actor.json")
        return lambda: ActorPolicy(actor)
    raise AbrkitError(f"unknown abr {name!r}")


def cmd_eval_abr(a: argparse.Namespace) -> int:
    traces = data.load_trace_dir(a.traces)
    manifest = data.load_manifest(a.manifest)
    models = Path(a.qoe)
    w = qoe.LinWeights.load(models / "qoe_lin.json")
    scorer = qoe.DnnScorer(tinynet.load(models / "qoe_dnn.json"))
    sim_cfg = SimConfig()
    out = out_path(a.out)
    rows: list[evaluation.SessionRow] = []
    steps: list[str] = []
    failed: list[str] = []
    for name in a.abr:
        factory = make_abr(name, a)
        for tr in traces:
            try:
                r = rollout(factory(), manifest, tr, sim_cfg)
            except AbrkitError as exc:
                failed.append(f"{name} {tr.id}: {exc}")
                continue
            rows.append(evaluation.session_row(name, r, manifest, sim_cfg, w, scorer))
            steps.append(dump_outcomes_jsonl(r.outcomes, abr=name, trace_id=tr.id))
    write(out, "sessions.csv", evaluation.to_csv(rows) if rows else
          ",".join(evaluation.session_columns()) + "\n")
    agg = evaluation.aggregate(rows)
    cols = ["abr", "n"] + [c for m in evaluation.METRICS for c in (m, m + "_ci95")]
    write(out, "aggregate.csv", evaluation.to_csv(agg, cols))
    for metric in ("qoe_lin", "qoe_dnn"):
        write(out, f"cdf_{metric}.csv", evaluation.to_csv(evaluation.cdf_rows(rows, metric),
                                                         ["abr", "value", "cdf"]))
    write(out, "steps.jsonl", "".join(steps))
    write(out, "meta.json", dump_json({"schema_version": evaluation.SCHEMA_VERSION,
                                       "partial": bool(failed), "failures": failed}))
    for r in agg:
        print(f"{r['abr']:<6} qoe_lin {r['qoe_lin']:.2f} +/- {r['qoe_lin_ci95']:.2f} "
              f"vmaf {r['mean_vmaf']:.2f} stall {r['stall_ratio']:.2f}%")
    for f in failed:
        print(f"failed: {f}", file=sys.stderr)
    return 1 if failed else 0


def _named(paths: Sequence[str]) -> dict[str, Path]:
    """``name=path`` or bare ``path`` (named after its parent directory)."""
    out = {}
    for p in paths:
        name, _, path = p.rpartition("=")
        path_obj = Path(path)
        out[name or path_obj.parent.name] = path_obj
    return out


def cmd_report(a: argparse.Namespace) -> int:
    bundle = report.build_report(_named(a.run_log), _named(a.selection_log),
                                 [Path(p) for p in a.sessions])
    out = out_path(a.out)
    for name, text in sorted(bundle.items()):
        write(out, name, text)
    write(out, "manifest.json", dump_json({"report_version": report.REPORT_VERSION,
                                           "files": sorted(bundle)}))
    print(f"wrote {len(bundle)} files to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abrkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        c = sub.add_parser(name, help=help)
        c.add_argument("--config", help="JSON file whose values override flags")
        c.add_argument("--seed", type=int, default=0)
        return c

    c = command("synth", "write a synthetic world: ratings, manifest and trace sets")
    c.add_argument("--out", required=True)
    c.add_argument("--queries", type=int, default=12)
    c.add_argument("--sessions", type=int, default=50)
    c.add_argument("--users", type=int, default=16)
    c.add_argument("--chunks", type=int, default=48)
    c.add_argument("--train-traces", type=int, default=10)
    c.add_argument("--val-traces", type=int, default=5)
    c.add_argument("--test-traces", type=int, default=20)
    c.add_argument("--cliff-traces", type=int, default=5)

    c = command("ingest", "validate external data and write it in canonical form")
    c.add_argument("kind", choices=["traces", "ratings", "manifest"])
    c.add_argument("--src", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--format", choices=["cooked", "mahimahi"], default="cooked",
                   help="trace input format")

    c = command("train-qoe", "train the rank-based models and report identity rates")
    c.add_argument("--ratings", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--train-fraction", type=float, default=0.8)
    c.add_argument("--epochs", type=int, default=1500)
    c.add_argument("--lin-epochs", type=int, default=2000)
    c.add_argument("--batch-size", type=int, default=1024)
    c.add_argument("--learning-rate", type=float, default=1e-3)
    c.add_argument("--lin-learning-rate", type=float, default=0.5)
    c.add_argument("--width", type=int, default=128)
    c.add_argument("--eval-interval", type=int, default=100)
    c.add_argument("--mos-control", action="store_true",
                   help="also fit the MOS-regression control model")

    c = command("eval-qoe", "identity rates of saved models on the held-out split")
    c.add_argument("--ratings", required=True)
    c.add_argument("--models", required=True)
    c.add_argument("--train-fraction", type=float, default=0.8)
    c.add_argument("--out")

    c = command("train-abr", "train the bitrate policy")
    c.add_argument("--traces", required=True)
    c.add_argument("--val-traces")
    c.add_argument("--manifest", required=True, action="append")
    c.add_argument("--qoe", required=True, help="directory holding qoe_lin.json and qoe_dnn.json")
    c.add_argument("--out", required=True)
    c.add_argument("--epochs", type=int, default=2000)
    c.add_argument("--agents", type=int, default=16)
    c.add_argument("--learning-rate", type=float, default=1e-4)
    c.add_argument("--critic-learning-rate", type=float)
    c.add_argument("--lambda-lr", type=float, default=1e-4)
    c.add_argument("--n-policy", type=int, default=5)
    c.add_argument("--h-target", type=float, default=0.1)
    c.add_argument("--validation-interval", type=int, default=300)
    c.add_argument("--checkpoint-interval", type=int, default=100)
    c.add_argument("--no-selector", action="store_true", help="pick training traces uniformly")
    c.add_argument("--fixed-omega", type=float, help="freeze the reward blend (ablation)")
    c.add_argument("--desk", action="store_true",
                   help="small-budget preset: 2 agents, actor lr 1e-3, critic lr 3e-3, lambda lr 1e-2")
    c.add_argument("--resume", action="store_true")

    c = command("eval-abr", "roll out bitrate selectors over a trace set")
    c.add_argument("--abr", action="append", required=True, choices=["rate", "bba", "mpc", "ppo"])
    c.add_argument("--traces", required=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--qoe", required=True)
    c.add_argument("--checkpoint")
    c.add_argument("--out", required=True)
    c.add_argument("--horizon", type=int, default=5)
    c.add_argument("--reservoir", type=float, default=5.0)
    c.add_argument("--cushion", type=float, default=30.0)

    c = command("report", "plot-ready CSVs from run logs and evaluation outputs")
    c.add_argument("--run-log", action="append", default=[], help="[name=]run_log.csv")
    c.add_argument("--selection-log", action="append", default=[], help="[name=]selection_log.csv")
    c.add_argument("--sessions", action="append", default=[], help="sessions.csv from eval-abr")
    c.add_argument("--out", required=True)
    return p


def apply_config(a: argparse.Namespace) -> dict:
    if not getattr(a, "config", None):
        return {}
    try:
        cfg = json.loads(Path(a.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise AbrkitError(f"cannot read config {a.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise AbrkitError("config file must hold a JSON object")
    nested = {}
    for key, value in cfg.items():
        if isinstance(value, dict):
            nested[key] = value
            continue
        dest = key.replace("-", "_")
        if not hasattr(a, dest):
            raise AbrkitError(f"config key {key!r} is not an option of {a.command}")
        setattr(a, dest, value)
    return nested


def main(argv: Sequence[str] | None = None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        nested = apply_config(a)
        if a.command == "train-abr" and a.desk:
            desk = desk_config().ppo
            a.agents = desk.agents
            a.learning_rate = desk.learning_rate
            a.critic_learning_rate = desk.critic_learning_rate
            a.lambda_lr = desk.lambda_lr
        handlers = {
            "synth": cmd_synth, "ingest": cmd_ingest, "train-qoe": cmd_train_qoe,
            "eval-qoe": cmd_eval_qoe, "eval-abr": cmd_eval_abr, "report": cmd_report,
        }
        if a.command == "train-abr":
            return cmd_train_abr(a, nested)
        return handlers[a.command](a)
    except (AbrkitError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
