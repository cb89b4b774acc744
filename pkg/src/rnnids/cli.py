"""Command-line pipeline: ``rnnids <subcommand> [--config FILE] [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error or
missing input, 3 internal error. Outputs are written only after a
subcommand has finished computing, together with a manifest that records
the config digest, seed, library versions and a checksum of every output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
import traceback
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from pydantic import ValidationError

from . import __version__
from .attacks import CWConfig, PGDConfig, evaluate_attack, mean_linf, cw_attack_many
from .classifier import TrainConfig, evaluate, history_csv, load_model, model_to_bytes, train
from .config import RunConfig, load_config
from .flowdata import DataError, Dataset, assemble_flows, dataset_to_bytes, load_dataset, parse_packet_csv, split_dataset
from .robustness import ARSSchedule, compute_ars
from .synth import SynthConfig, synth_generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
EXPLAIN_METHODS = ("weights", "perturb", "dropout", "shared", "mi", "pdp", "seqpdp", "confidence", "profile")
DEFEND_MODES = ("reduce-both", "reduce-forward", "advtrain")


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise MissingInput(f"{what} not found: {path}")
    return path


class Run:
    """One invocation: resolved config plus the outputs collected so far."""

    def __init__(self, command: str, cfg: RunConfig, tag: Optional[str] = None):
        self.command = command
        self.cfg = cfg
        self.tag = tag
        self.outputs: dict = {}

    def add(self, name: str, data) -> None:
        self.outputs[name] = data.encode() if isinstance(data, str) else bytes(data)

    def split(self, which: str) -> Dataset:
        path = _require(self.cfg.output_dir / f"{which}.json", f"{which} split (run `train` first)")
        return load_dataset(path)[0]

    def model(self, path: Optional[Path] = None):
        return load_model(_require(path or self.cfg.model_path, "model file (run `train` first)"))

    def commit(self) -> list:
        out = self.cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, data in self.outputs.items():
            target = out / name
            tmp = target.with_name(target.name + ".tmp")
            tmp.write_bytes(data)
            tmp.replace(target)
            written.append(target)
        manifest = {
            "command": self.command,
            "tag": self.tag,
            "config_sha256": self.cfg.digest(),
            "config": self.cfg.model_dump(mode="json"),
            "seed": self.cfg.seed,
            "versions": _versions(),
            "outputs": {n: hashlib.sha256(d).hexdigest() for n, d in sorted(self.outputs.items())},
        }
        name = f"manifest_{self.command}" + (f"_{self.tag}" if self.tag else "") + ".json"
        (out / name).write_bytes(_json_bytes(manifest))
        return written


def _versions() -> dict:
    import pydantic
    import scipy

    return {
        "rnnids": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.__version__,
    }


def _train_config(cfg: RunConfig, feature_dropout: bool) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        epochs=t.epochs,
        batch_size=t.batch_size,
        lr=t.lr,
        seed=cfg.seed,
        layers=cfg.architecture.layers,
        hidden=cfg.architecture.hidden,
        feature_dropout=feature_dropout or t.feature_dropout,
    )


def _cw_config(cfg: RunConfig, kappa: Optional[float] = None) -> CWConfig:
    a = cfg.attack
    return CWConfig(kappa=kappa if kappa is not None else a.kappa, delta=a.delta, base_lr=a.base_lr,
                    base_iterations=a.base_iterations, max_iterations=a.max_iterations)


def _attack_flows(test: Dataset) -> list:
    flows = [f for f in test.flows if f.label == 1]
    if not flows:
        raise DataError("the test split contains no attack flows")
    return flows


# --- subcommands -------------------------------------------------------------------------


def cmd_synth(run: Run, args) -> None:
    s = run.cfg.synth
    ds = synth_generate(SynthConfig(counts=dict(s.counts), min_len=s.min_len, max_len=s.max_len), run.cfg.seed)
    run.add("dataset.json", dataset_to_bytes(ds))


def cmd_ingest(run: Run, args) -> None:
    src = args.csv or run.cfg.paths.csv
    if not src:
        raise UsageError("ingest needs a packet CSV (--csv or paths.csv)")
    flows = assemble_flows(parse_packet_csv(_require(Path(src), "packet CSV")))
    run.add("dataset.json", dataset_to_bytes(Dataset(flows)))


def cmd_train(run: Run, args) -> None:
    ds, _ = load_dataset(_require(run.cfg.dataset_path, "dataset (run `synth` or `ingest` first)"))
    tr, te = split_dataset(ds, run.cfg.seed)
    tcfg = _train_config(run.cfg, args.feature_dropout)
    model = train(tr, tcfg)
    run.add("train.json", dataset_to_bytes(tr, model.stats))
    run.add("test.json", dataset_to_bytes(te, model.stats))
    name = "model_dropout.bin" if tcfg.feature_dropout else "model.bin"
    run.add(name, model_to_bytes(model))
    run.add(name.replace(".bin", "_history.csv"), history_csv(model))


def cmd_eval(run: Run, args) -> None:
    model = run.model()
    report = evaluate(model, run.split("test"))
    run.add("metrics.json", report.to_json())
    run.add("metrics.csv", report.to_csv())


def _matched_epsilon(run: Run, model, flows) -> float:
    if run.cfg.attack.epsilon is not None:
        return run.cfg.attack.epsilon
    return mean_linf(cw_attack_many(model, flows, _cw_config(run.cfg)))


def cmd_attack(run: Run, args) -> None:
    model = run.model()
    flows = _attack_flows(run.split("test"))
    method = args.method
    if method == "cw":
        config = _cw_config(run.cfg)
    else:
        config = PGDConfig(epsilon=_matched_epsilon(run, model, flows), iterations=run.cfg.attack.pgd_iterations,
                           delta=run.cfg.attack.delta)
    ev = evaluate_attack(model, flows, method, config)
    run.add(f"attack_{method}.csv", ev.to_csv())
    run.add(f"attack_{method}.json", ev.to_json())


def cmd_ars(run: Run, args) -> None:
    model = run.model()
    flows = _attack_flows(run.split("test"))
    if run.cfg.ars.max_samples:
        flows = flows[: run.cfg.ars.max_samples]
    a = run.cfg.ars
    report = compute_ars(model, flows, ARSSchedule(a.kappa0, a.growth, a.max_rounds, _cw_config(run.cfg)))
    run.add("ars.json", report.to_json())
    run.add("ars_rounds.csv", report.rounds_csv())


def cmd_explain(run: Run, args) -> None:
    from . import explain as X

    e = run.cfg.explain
    test = run.split("test")
    cond = e.condition
    method = args.method
    if method in ("dropout", "shared"):
        path = Path(run.cfg.paths.model) if run.cfg.paths.model else run.cfg.output_dir / "model_dropout.bin"
        model = run.model(path)
    elif method != "profile":
        model = run.model()
    if method == "weights":
        out = X.importance_weights(model)
    elif method == "perturb":
        out = X.importance_perturbation(model, test, run.cfg.seed)
    elif method == "dropout":
        out = X.importance_dropout(model, test)
    elif method == "mi":
        out = X.sensitivity_mutual_information(model, test, e.bins)
    elif method == "pdp":
        out = X.conditional_pdp(model, test, cond, e.feature, points=e.grid_points)
    elif method == "seqpdp":
        out = X.sequential_pdp(model, test, cond, e.seq_feature, e.step, points=e.grid_points)
    elif method == "confidence":
        out = X.confidence_per_step(model, test, cond)
    elif method == "profile":
        out = X.feature_sequence_profile(test, cond, e.seq_feature)
    else:  # shared
        rows = X.shared_info_table(model, test)
        run.add("explain_shared.csv", X.shared_info_csv(rows))
        run.add("explain_shared.json", _json_bytes([
            {"feature_i": r.feature_i, "feature_j": r.feature_j, "score": r.score, "undefined": r.undefined,
             "base": r.base, "acc_without_i": r.acc_without_i, "acc_without_j": r.acc_without_j,
             "acc_without_both": r.acc_without_both}
            for r in rows
        ]))
        return
    run.add(f"explain_{method}.csv", out.to_csv())
    run.add(f"explain_{method}.json", out.to_json())


def cmd_defend(run: Run, args) -> None:
    from .defenses import AdvTrainConfig, adversarial_training, train_reduced

    tr, te = run.split("train"), run.split("test")
    tcfg = _train_config(run.cfg, False)
    mode = args.mode
    if mode == "advtrain":
        d = run.cfg.defense
        a = run.cfg.ars
        adv = AdvTrainConfig(
            train=tcfg, cycles=d.cycles, cadence=d.cadence, iterations=d.iterations,
            cw=_cw_config(run.cfg, d.kappa),
            ars=ARSSchedule(a.kappa0, a.growth, d.ars_max_rounds, _cw_config(run.cfg)),
            held_out=d.held_out,
        )
        result = adversarial_training(tr, adv, run.cfg.seed, evaluation=te)
        run.add("model_advtrain.bin", model_to_bytes(result.model))
        run.add("advtrain_trajectory.csv", result.trajectory_csv())
        run.add("advtrain.json", _json_bytes({
            "augmented_size": result.augmented_size,
            "held_out_ids": result.held_out_ids,
            "baseline_ars": _num(result.trajectory[0].ars),
            "final_ars": _num(result.trajectory[-1].ars),
            "baseline_accuracy": result.trajectory[0].clean_accuracy,
            "final_accuracy": result.trajectory[-1].clean_accuracy,
        }))
        return
    reduction = "both_directions" if mode == "reduce-both" else "attacker_direction_only"
    model = train_reduced(tr, reduction, tcfg)
    flows = _attack_flows(te)
    cw = evaluate_attack(model, flows, "cw", _cw_config(run.cfg))
    eps = run.cfg.attack.epsilon if run.cfg.attack.epsilon is not None else mean_linf(cw.results)
    pgd_cfg = PGDConfig(epsilon=eps, iterations=run.cfg.attack.pgd_iterations, delta=run.cfg.attack.delta)
    summary = {
        "mode": reduction,
        "metrics": evaluate(model, te).to_dict(),
        "epsilon": eps,
        "attacks": {m: evaluate_attack(model, flows, m, pgd_cfg).overall for m in ("pgd", "fgsm")},
    }
    summary["attacks"]["cw"] = cw.overall
    run.add(f"model_{mode}.bin", model_to_bytes(model))
    run.add(f"defend_{mode}.json", _json_bytes(summary))


def _num(v: float):
    return v if math.isfinite(v) else "inf"


def cmd_export_plot(run: Run, args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = _require(Path(args.input), "CSV to plot")
    rows = list(csv.DictReader(io.StringIO(src.read_text())))
    if not rows:
        raise DataError(f"{src} has no data rows")
    cols = set(rows[0])

    def col(name):
        return np.array([float(r[name]) if r[name] not in ("", "inf") else math.inf for r in rows])

    fig, ax = plt.subplots(figsize=(6, 4))
    if {"value", "mean", "min", "max"} <= cols:
        x = col("value")
        ax.fill_between(x, col("min"), col("max"), alpha=0.2)
        ax.plot(x, col("mean"))
        ax.set_xlabel(rows[0]["feature"])
        ax.set_ylabel("mean attack confidence")
    elif {"step", "mean", "std"} <= cols:
        x, m, s = col("step"), col("mean"), col("std")
        ax.fill_between(x, m - s, m + s, alpha=0.2)
        ax.plot(x, m, marker="o")
        ax.set_xlabel("step")
        ax.set_ylabel(rows[0]["feature"])
    elif {"feature", "score"} <= cols:
        ax.bar([r["feature"] for r in rows], col("score"))
        ax.tick_params(axis="x", rotation=60)
        ax.set_ylabel(rows[0].get("method", "score"))
    elif {"cycle", "ars"} <= cols:
        ax.plot(col("cycle"), col("ars"), marker="o")
        ax.set_xlabel("cycle")
        ax.set_ylabel("ARS")
    elif {"round", "candidate_ars"} <= cols:
        ax.plot(col("kappa"), col("adversarial"), marker="o")
        ax.set_xscale("log")
        ax.set_xlabel("kappa")
        ax.set_ylabel("adversarial samples")
    elif {"epoch", "loss"} <= cols:
        ax.plot(col("epoch"), col("loss"))
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
    else:
        plt.close(fig)
        raise DataError(f"do not know how to plot columns {sorted(cols)}")
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    run.add(args.output or src.with_suffix(".png").name, buf.getvalue())


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "ars": cmd_ars,
    "explain": cmd_explain,
    "defend": cmd_defend,
    "export-plot": cmd_export_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides `seed`")
    common.add_argument("--output-dir", help="overrides `paths.output_dir`")
    common.add_argument("--dataset", help="overrides `paths.dataset`")
    common.add_argument("--model", help="overrides `paths.model`")
    common.add_argument("--threads", type=int, help="cap BLAS threads")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. training.epochs=5 (repeatable)")

    parser = _Parser(prog="rnnids", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rnnids {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p = sub.add_parser("ingest", parents=[common], help="packet CSV -> dataset cache")
    p.add_argument("--csv", help="packet CSV path (overrides `paths.csv`)")
    p = sub.add_parser("train", parents=[common], help="split the dataset and train a model")
    p.add_argument("--feature-dropout", action="store_true", help="train with feature dropout")
    sub.add_parser("eval", parents=[common], help="packet and flow metrics on the test split")
    p = sub.add_parser("attack", parents=[common], help="attack the test attack flows")
    p.add_argument("--method", choices=("cw", "pgd", "fgsm"), default="cw")
    sub.add_parser("ars", parents=[common], help="adversarial robustness score")
    p = sub.add_parser("explain", parents=[common], help="importance, sensitivity and PDP analyses")
    p.add_argument("--method", choices=EXPLAIN_METHODS, required=True)
    p = sub.add_parser("defend", parents=[common], help="feature reduction or adversarial training")
    p.add_argument("--mode", choices=DEFEND_MODES, required=True)
    p = sub.add_parser("export-plot", parents=[common], help="render a result CSV to PNG")
    p.add_argument("--input", required=True, help="CSV written by another subcommand")
    p.add_argument("--output", help="PNG file name inside the output dir")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    if args.seed is not None:
        out["seed"] = args.seed
    for flag, key in (("output_dir", "paths.output_dir"), ("dataset", "paths.dataset"), ("model", "paths.model")):
        if getattr(args, flag) is not None:
            out[key] = getattr(args, flag)
    return out


def _format_validation(err: ValidationError) -> str:
    lines = ["invalid configuration:"]
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        tag = getattr(args, "method", None) or getattr(args, "mode", None)
        if getattr(args, "feature_dropout", False):
            tag = "dropout"
        run = Run(args.command, cfg, tag)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=max(1, args.threads)):
                COMMANDS[args.command](run, args)
        else:
            COMMANDS[args.command](run, args)
        for path in run.commit():
            print(path)
        return EXIT_OK
    except ValidationError as err:
        print(_format_validation(err), file=sys.stderr)
        return EXIT_USAGE
    except (MissingInput, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError, KeyError, yaml.YAMLError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
