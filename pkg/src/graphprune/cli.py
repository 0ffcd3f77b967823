"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 module error, 4 oracle
protocol error.  Every config-driven run writes ``manifest.json`` into its
output directory; passing that manifest back as ``--config`` replays the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, analysis, config as cfgmod, esbase, evalnet, formats, gaepre, ppo, zoo
from .env import EnvConfig, PerformanceGuaranteed, ResourceConstrained, calibrate, episode_json, episode_record
from .errors import ConfigError, GraphPruneError, OracleProtocolError
from .gat import GatEncoder
from .netmodel import EDGE_DIM, PruningMask, apply_mask, flops

log = logging.getLogger("graphprune")

TAG_GAE = 5
TAG_ES = 6


# ---------------------------------------------------------------- helpers


def _out_dir(cfg) -> Path:
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config_hash": cfgmod.config_hash(cfg),
        "seed": cfg["seed"],
        "versions": {
            "graphprune": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "config": cfg,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (out / "config.toml").write_text(cfgmod.dumps(cfg))


def load_data(path) -> tuple[evalnet.Dataset, evalnet.Dataset]:
    images, labels, k = formats.load_dataset_arrays(path)
    return evalnet.make_splits(images, labels, k)


def build_oracle(cfg, net, val):
    if cfg["oracle.kind"] == "external":
        if not cfg["oracle.cmd"]:
            raise ConfigError("oracle.cmd", "required when oracle.kind = external")
        return evalnet.ExternalOracle(
            cfg["oracle.cmd"], cfg["oracle.timeout"], cfg["oracle.concurrency_safe"], n_units=net.indexing.C
        )
    return evalnet.BuiltinOracle(net, val, subset=cfg["oracle.subset"], calibration=cfg["env.calibration_batch"])


def env_config(cfg, baseline_acc: float | None = None) -> EnvConfig:
    if cfg["env.mode"] == "resource":
        mode = ResourceConstrained(cfg["env.flops_target"])
    else:
        target = cfg["env.acc_target"]
        if target <= 0.0:
            if baseline_acc is None:
                raise ConfigError("env.acc_target", "needs a baseline accuracy to derive from env.acc_drop")
            target = baseline_acc - cfg["env.acc_drop"]
        mode = PerformanceGuaranteed(target)
    return EnvConfig(mode, cfg["env.n_groups"], cfg["env.ema_beta"], cfg["seed"], cfg["env.calibration_batch"])


def ppo_config(cfg) -> ppo.PpoConfig:
    keys = [f for f in ppo.PpoConfig.__dataclass_fields__ if f != "gamma"]
    return ppo.PpoConfig(gamma=cfgmod.derived_gamma(cfg), **{k: cfg[f"ppo.{k}"] for k in keys})


def make_encoder(cfg, d_node: int, seed: int) -> GatEncoder:
    return GatEncoder(d_node, EDGE_DIM, ppo.stream(seed, ppo.TAG_INIT),
                      hidden=cfg["ppo.hidden"], d_emb=cfg["ppo.d_emb"], rounds=cfg["ppo.rounds"])


def save_checkpoint(path: Path, tensors: dict, meta: dict) -> None:
    formats.save_tensors(path, tensors)
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_meta(path) -> dict:
    meta_path = Path(str(path) + ".meta.json")
    try:
        return json.loads(meta_path.read_text())
    except OSError as exc:
        raise GraphPruneError(f"missing checkpoint metadata {meta_path}") from exc


def load_encoder(path) -> GatEncoder:
    meta = load_meta(path)
    cfg = cfgmod.validate(meta["config"])
    enc = make_encoder(cfg, meta["d_node"], cfg["seed"])
    tensors = formats.load_tensors(path)
    prefix = "encoder." if any(k.startswith("encoder.") for k in tensors) else ""
    state = {k[len(prefix):]: torch.tensor(v) for k, v in tensors.items() if k.startswith(prefix)}
    enc.load_state_dict(state)
    return enc


def _mode_summary(mode) -> dict:
    if isinstance(mode, ResourceConstrained):
        return {"mode": mode.name, "flops_target": mode.flops_target}
    return {"mode": mode.name, "acc_target": mode.acc_target}


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    images, labels = evalnet.synth_arrays(args.seed, args.n_per_class, args.resolution)
    formats.save_dataset(args.out, images, labels, evalnet.NUM_CLASSES)
    print(json.dumps({"out": str(args.out), "samples": int(len(labels)), "seed": args.seed}))
    return 0


def cmd_train_baseline(args, cfg) -> int:
    out = _out_dir(cfg)
    train, val = load_data(cfg["data.path"])
    res = train.images.shape[-1]
    if cfg["net.arch"] == "toy_cnn":
        net = zoo.toy_cnn(cfg["seed"], resolution=res, num_classes=train.num_classes)
    else:
        net = zoo.chain_net(cfg["seed"], num_classes=train.num_classes, resolution=res)
    net, history = evalnet.train_baseline(
        net, train, cfg["baseline.epochs"], lr=cfg["baseline.lr"],
        batch_size=cfg["baseline.batch_size"], seed=cfg["seed"], val=val,
    )
    formats.save_network(out / "net.json", net)
    with open(out / "baseline_history.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    report = evalnet.accuracy(net, None, val)
    write_manifest(out, "train-baseline", cfg)
    print(json.dumps({"net": str(out / "net.json"), "val_top1": report.top1}))
    return 0


def _setup(cfg):
    net = formats.load_network(cfg["net.path"])
    _, val = load_data(cfg["data.path"])
    oracle = build_oracle(cfg, net, val)
    calibration = calibrate(oracle)
    return net, val, oracle, calibration


def cmd_pretrain_gae(args, cfg) -> int:
    out = _out_dir(cfg)
    net, _, oracle, calibration = _setup(cfg)
    ec = env_config(cfg, calibration.baseline_acc)
    corpus = gaepre.collect_random_episodes(net, ec, oracle, cfg["gae.episodes"], ppo.stream(cfg["seed"], TAG_GAE), calibration)
    d_node = corpus[0].node_features.shape[1]
    encoder = make_encoder(cfg, d_node, cfg["seed"])
    heads = gaepre.DecoderHeads(cfg["ppo.hidden"], d_node, EDGE_DIM, ppo.stream(cfg["seed"], TAG_GAE, 1))
    pc = gaepre.PretrainConfig(cfg["gae.episodes"], cfg["gae.lr"], cfg["gae.batch_graphs"], cfg["gae.epochs"], cfg["seed"])
    curve = gaepre.pretrain(encoder, heads, corpus, pc)
    gaepre.write_curve(out / "gae_loss.csv", curve)
    tensors = {k: v.detach().numpy() for k, v in encoder.state_dict().items()}
    save_checkpoint(out / "encoder.gsccw", tensors, {"kind": "encoder", "d_node": d_node, "config": cfg})
    write_manifest(out, "pretrain-gae", cfg)
    print(json.dumps({"encoder": str(out / "encoder.gsccw"), "initial": curve[0]["L_recon"], "final": curve[-1]["L_recon"]}))
    return 0


def cmd_train_agent(args, cfg) -> int:
    out = _out_dir(cfg)
    net, _, oracle, calibration = _setup(cfg)
    ec = env_config(cfg, calibration.baseline_acc)
    encoder = load_encoder(args.warm_start) if args.warm_start else None
    timing = cfg["log.timing"]
    episodes_fh = open(out / "episodes.jsonl", "w")
    updates_fh = open(out / "updates.jsonl", "w")
    traj_fh = open(out / "trajectory.csv", "w", newline="")
    traj = csv.writer(traj_fh)
    traj.writerow(["episode", "acc", "flops_ratio"])

    def on_episode(i, res):
        episodes_fh.write(episode_json(episode_record(i, ec.mode, res, timing)) + "\n")
        traj.writerow([i, repr(res.acc_ep), repr(res.flops_ratio)])

    def on_update(rec):
        keep = ("update", "mean_reward", "clip_fraction", "entropy", "value_loss")
        updates_fh.write(json.dumps({k: rec[k] for k in keep}) + "\n")

    try:
        result = ppo.train_agent(
            net, oracle, ec, ppo_config(cfg), cfg["train.episodes"], seed=cfg["seed"],
            encoder=encoder, workers=cfg["train.workers"], on_episode=on_episode, on_update=on_update,
        )
    finally:
        episodes_fh.close()
        updates_fh.close()
        traj_fh.close()
    policy = result.policy
    meta = {
        "kind": "policy",
        "config": cfg,
        "d_node": policy.encoder.d_node,
        "group_size": policy.group_size,
        "n_groups": policy.n_groups,
        "baseline_acc": calibration.baseline_acc,
        "edge_l1": calibration.edge_l1,
        "env": _mode_summary(ec.mode),
        "first_feasible": result.first_feasible,
    }
    save_checkpoint(out / "policy.gsccw", ppo.policy_tensors(policy), meta)
    write_manifest(out, "train-agent", cfg, {"warm_start": str(args.warm_start) if args.warm_start else None})
    print(json.dumps({"policy": str(out / "policy.gsccw"), "episodes": len(result.results), "first_feasible": result.first_feasible}))
    return 0


def load_policy(path) -> tuple[ppo.PolicyNet, dict]:
    meta = load_meta(path)
    cfg = cfgmod.validate(meta["config"])
    encoder = make_encoder(cfg, meta["d_node"], cfg["seed"])
    policy = ppo.init_policy(meta["d_node"], meta["group_size"], meta["n_groups"], ppo_config(cfg), cfg["seed"], encoder)
    ppo.load_policy_tensors(policy, formats.load_tensors(path))
    return policy, meta


def cmd_prune(args) -> int:
    policy, meta = load_policy(args.policy)
    cfg = cfgmod.validate(meta["config"])
    net = formats.load_network(args.net)
    _, val = load_data(args.data or cfg["data.path"])
    oracle = build_oracle(cfg, net, val)
    calibration = calibrate(oracle)
    ec = env_config(cfg, calibration.baseline_acc)
    mask, m = ppo.export_mask(policy, net, oracle, ec, samples=cfg["train.export_samples"], seed=cfg["seed"], calibration=calibration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.save_mask(out / "mask.gsccm", mask)
    pruned = apply_mask(net, mask)
    formats.save_network(out / "pruned.json", pruned)
    summary = analysis.write_report(out, net, mask)
    summary["val_top1"] = evalnet.accuracy(net, mask, val).top1
    summary["subset_top1"] = m.acc_ep
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps({k: summary[k] for k in ("flops_ratio", "val_top1", "pruned")}))
    return 0


def cmd_es_baseline(args, cfg) -> int:
    out = _out_dir(cfg)
    net, val, oracle, _ = _setup(cfg)
    s_target = cfg["es.S_target"] if cfg["es.S_target"] > 0 else cfg["env.flops_target"]
    ec = esbase.EsConfig(s_target, cfg["es.generations"], cfg["es.population"] or None,
                         cfg["es.sigma0"], cfg["es.init_mean"], cfg["es.reward_semantics"])
    result = esbase.run_es(net, oracle, ec, ppo.stream(cfg["seed"], TAG_ES))
    esbase.write_generations(out / "generations.csv", result.history)
    chosen = result.best_feasible[0] if result.best_feasible else result.best_mask
    formats.save_mask(out / "best_mask.gsccm", chosen)
    rows = [_method_row("cma-es", net, chosen, val)]
    if args.compare:
        rows.append(_method_row("agent", net, formats.load_mask(args.compare), val))
    comparison = {"S_target": s_target, "reward_semantics": ec.reward_semantics, "methods": rows,
                  "feasible_found": result.best_feasible is not None}
    (out / "comparison.json").write_text(json.dumps(comparison, indent=1) + "\n")
    write_manifest(out, "es-baseline", cfg)
    print(json.dumps(comparison))
    return 0


def _method_row(name, net, mask, val) -> dict:
    return {"method": name, "flops_ratio": flops(net, mask) / flops(net),
            "val_top1": evalnet.accuracy(net, mask, val).top1, "pruned_units": int(mask.bits.sum())}


def cmd_analyze(args) -> int:
    net = formats.load_network(args.net)
    a, b = formats.load_mask(args.mask_a), formats.load_mask(args.mask_b)
    summary = analysis.write_report(args.out, net, a, b)
    print(json.dumps({k: summary[k] for k in ("jaccard", "cosine", "hamming", "flops_ratio", "flops_ratio_b")}))
    return 0


def cmd_eval(args) -> int:
    net = formats.load_network(args.net)
    train, val = load_data(args.data)
    data = {"val": val, "train": train}[args.split]
    mask = formats.load_mask(args.mask) if args.mask else None
    report = evalnet.accuracy(net, mask, data)
    print(json.dumps({"top1": report.top1, "n_samples": report.n_samples, "split": args.split}))
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic shape dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--n-per-class", type=int, default=200)
    g.add_argument("--resolution", type=int, default=16)

    for name, help_ in [("train-baseline", "train the target network"),
                        ("pretrain-gae", "pre-train the graph encoder"),
                        ("train-agent", "train the pruning agent"),
                        ("es-baseline", "run the CMA-ES mask search")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, required=True)
        if name == "train-agent":
            s.add_argument("--warm-start", type=Path)
        if name == "es-baseline":
            s.add_argument("--compare", type=Path, help="agent mask to include in the comparison")

    s = sub.add_parser("prune", help="export a mask from a trained policy")
    s.add_argument("--policy", type=Path, required=True)
    s.add_argument("--net", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--data", type=Path)

    s = sub.add_parser("analyze", help="compare two masks")
    s.add_argument("--mask-a", type=Path, required=True)
    s.add_argument("--mask-b", type=Path, required=True)
    s.add_argument("--net", type=Path, required=True)
    s.add_argument("--out", type=Path, default=Path("analysis"))

    s = sub.add_parser("eval", help="accuracy of a (masked) network")
    s.add_argument("--net", type=Path, required=True)
    s.add_argument("--mask", type=Path)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--split", choices=("val", "train"), default="val")
    return p


CONFIG_COMMANDS = {
    "train-baseline": cmd_train_baseline,
    "pretrain-gae": cmd_pretrain_gae,
    "train-agent": cmd_train_agent,
    "es-baseline": cmd_es_baseline,
}
PLAIN_COMMANDS = {"gen-data": cmd_gen_data, "prune": cmd_prune, "analyze": cmd_analyze, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command in CONFIG_COMMANDS:
            cfg = cfgmod.load(args.config)
            return CONFIG_COMMANDS[args.command](args, cfg)
        return PLAIN_COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OracleProtocolError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return 4
    except (GraphPruneError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
