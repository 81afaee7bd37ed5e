"""Command-line pipeline: train, decompose, analyse and export.

Every artifact is an envelope file whose header embeds the run manifest that
produced it. Manifests inside artifacts carry no wall time so that reruns are
byte-identical; timings go to ``manifest.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, envelope
from .aggregate import class_average, contribution_matrices, foev, is_degenerate, mean_hoyer, pos_neg_correlation
from .autodiff import forward
from .contrib import ALGORITHMS, DEFAULT_STEPS, batch_contributions
from .inputmap import MAP_ALGORITHMS, contribution_map, render_mask, save_map, write_pgm
from .modes import class_correlations, class_masks, max_class_corr_stats
from .perturb import DEFAULT_FRACTIONS, sweep
from .sae import SAEConfig, load_sae, loadings_for, r_squared, save_sae, train_sae
from .targets import TARGET_KINDS, TargetSpec, surprisal_from_outputs
from .zoo import (
    DatasetSpec,
    TrainConfig,
    accuracy,
    build_retina_model,
    build_toy_cnn,
    generate_dataset,
    load_dataset,
    load_model,
    model_blocks,
    model_header,
    predict,
    save_dataset,
    train,
)

log = logging.getLogger(__name__)

# exit codes by error category
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CORRUPT = 4
EXIT_LOCKED = 5
EXIT_FAILED = 6


class CLIError(Exception):
    category = "failed"
    code = EXIT_FAILED


class ConfigError(CLIError):
    category = "config"
    code = EXIT_USAGE


class MissingArtifactError(CLIError):
    category = "missing-artifact"
    code = EXIT_MISSING


class LockedError(CLIError):
    category = "locked"
    code = EXIT_LOCKED


DEFAULTS = {
    "train-toy": {
        "dataset": "synthetic-shapes-classification",
        "n_samples": 2048,
        "n_test": 800,
        "n_classes": 8,
        "n_cells": 8,
        "data_seed": 1,
        "test_seed": 3,
        "channels": [8, 16, 24],
        "epochs": 20,
        "lr": 3e-3,
        "batch_size": 64,
        "seed": 0,
    },
    "contrib": {"tap": "res_out", "algorithm": "hidden_ig", "target": "top1_logit", "steps": DEFAULT_STEPS, "limit": None},
    "stats": {},
    "sae": {
        "block": "pos",
        "expansion": 3,
        "threshold": 0.9,
        "epochs": 300,
        "lr": 5e-5,
        "batch_size": 128,
        "l1_dictionary": 5e-5,
        "l1_loadings": 0.0,
        "seed": 0,
    },
    "correlate": {"threshold": 0.2},
    "perturb": {"kind": "ablate", "classes": None, "fractions": list(DEFAULT_FRACTIONS), "seed": 0, "top_modes": 1},
    "inputmap": {"index": 0, "tap": "res_out", "channels": None, "mode": None, "fraction": 0.1, "algorithm": "hig-decomp", "steps": DEFAULT_STEPS, "target": "top1_logit", "softmax_first": True},
    "report": {},
}


# ---------------------------------------------------------------------------
# plumbing

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list = field(default_factory=list)  # [{"path", "sha256"}]
    outputs: list = field(default_factory=list)
    version: str = __version__

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(envelope.canonical_json(self.config)).hexdigest()

    def embedded(self) -> dict:
        """The manifest stored inside artifacts (no timing, relative paths)."""
        d = asdict(self)
        d["config_hash"] = self.config_hash
        return d


class Run:
    """One command invocation: output directory, lockfiles and the manifest."""

    def __init__(self, command: str, config: dict, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, config, config.get("seed"))
        self.started = time.perf_counter()

    def rel(self, path) -> str:
        return os.path.relpath(Path(path).resolve(), self.out.resolve())

    def use(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise MissingArtifactError(f"artifact not found: {path}")
        self.manifest.inputs.append({"path": self.rel(path), "sha256": sha256_file(path)})
        return path

    def path(self, name: str) -> Path:
        p = self.out / name
        self.manifest.outputs.append(name)
        return p

    @contextmanager
    def locked(self, path):
        lock = Path(str(path) + ".lock")
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedError(f"{path} is being written by another command ({lock} exists)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield path
        finally:
            lock.unlink(missing_ok=True)

    def write_envelope(self, name: str, header: dict, blocks) -> Path:
        path = self.path(name)
        header = dict(header, manifest=self.manifest.embedded())
        with self.locked(path):
            envelope.write(path, header, blocks)
        return path

    def write_csv(self, name: str, schema: str, columns: list, rows) -> Path:
        path = self.path(name)
        with self.locked(path):
            tmp = Path(str(path) + ".tmp")
            with open(tmp, "w", newline="") as fh:
                fh.write(f"#schema {schema} v1\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(columns)
                for row in rows:
                    w.writerow([_fmt(v) for v in row])
            os.replace(tmp, path)
        return path

    def finish(self) -> None:
        record = self.manifest.embedded()
        record["wall_time_s"] = time.perf_counter() - self.started
        path = self.out / "manifest.json"
        runs = []
        if path.is_file():
            try:
                runs = json.loads(path.read_text())["runs"]
            except (ValueError, KeyError):
                runs = []
        runs.append(record)
        path.write_text(json.dumps({"runs": runs}, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def read_csv(path):
    """Rows of a CSV written by this tool, as dicts; returns (schema, rows)."""
    with open(path, newline="") as fh:
        schema = fh.readline().strip()
        return schema, list(csv.DictReader(fh))


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise MissingArtifactError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return cfg


def effective_config(command: str, file_cfg: dict, flags: dict) -> dict:
    """Defaults, then the command's section of the config file, then flags."""
    cfg = dict(DEFAULTS[command])
    section = file_cfg.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {command!r} must be an object")
    unknown = set(section) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {sorted(unknown)}")
    cfg.update(section)
    cfg.update({k: v for k, v in flags.items() if v is not None and k in cfg})
    return cfg


def parse_target(text: str, model=None, inputs=None) -> TargetSpec:
    """``kind`` or ``kind:param``; surprisal statistics come from the model's outputs."""
    kind, _, arg = text.partition(":")
    if kind not in TARGET_KINDS:
        raise ConfigError(f"unknown target {kind!r}")
    if kind == "topk_logit_sum":
        return TargetSpec(kind, k=int(arg or 5))
    if kind == "single_output":
        return TargetSpec(kind, index=int(arg or 0))
    if kind == "surprisal":
        if model is None:
            raise ConfigError("surprisal target needs a model and dataset")
        return surprisal_from_outputs(predict(model, inputs))
    return TargetSpec(kind)


def _artifact_header(path, expected: str):
    header, blocks = envelope.read(path)
    if header.get("artifact") != expected:
        raise envelope.EnvelopeError(f"{path} holds a {header.get('artifact')!r}, expected {expected!r}")
    return header, blocks


# ---------------------------------------------------------------------------
# commands

def cmd_train_toy(run: Run, cfg: dict, args) -> None:
    classification = cfg["dataset"] == "synthetic-shapes-classification"
    common = {"n_classes": cfg["n_classes"], "n_cells": cfg["n_cells"]}
    if not classification:
        common["input_shape"] = (8, 12, 12)
    train_set = generate_dataset(DatasetSpec(cfg["dataset"], cfg["n_samples"], seed=cfg["data_seed"], **common))
    test_set = generate_dataset(DatasetSpec(cfg["dataset"], cfg["n_test"], seed=cfg["test_seed"], **common))
    if classification:
        model = build_toy_cnn(cfg["n_classes"], len(cfg["channels"]), cfg["channels"], seed=cfg["seed"])
    else:
        model = build_retina_model(cfg["n_cells"], seed=cfg["seed"])
    tc = TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"])
    model, history = train(model, train_set, tc)
    run.write_envelope("model.cdec", model_header(model), model_blocks(model))
    for name, ds in (("dataset.cdec", train_set), ("testset.cdec", test_set)):
        with run.locked(run.path(name)) as p:
            save_dataset(ds, p, meta={"manifest": run.manifest.embedded()})
    rows = [(i, loss) for i, loss in enumerate(history)]
    run.write_csv("train_history.csv", "train_history", ["epoch", "loss"], rows)
    if classification:
        log.info("train accuracy %.3f, test accuracy %.3f", accuracy(model, train_set), accuracy(model, test_set))


def _load_model(run: Run, path):
    return load_model(run.use(path))


def _load_dataset(run: Run, path):
    return load_dataset(run.use(path))


def cmd_contrib(run: Run, cfg: dict, args) -> None:
    model = _load_model(run, args.model)
    ds = _load_dataset(run, args.dataset)
    if cfg["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg['algorithm']!r}")
    if cfg["tap"] not in model.taps:
        raise ConfigError(f"unknown tap {cfg['tap']!r}; model taps are {sorted(model.taps)}")
    inputs = ds.inputs if cfg["limit"] is None else ds.inputs[: cfg["limit"]]
    target = parse_target(cfg["target"], model, ds.inputs)
    cts = batch_contributions(model, inputs, cfg["tap"], target, cfg["algorithm"], cfg["steps"])
    net, pos, neg = contribution_matrices(cts)
    acts = _channel_activations(model, inputs, cfg["tap"])
    header = {
        "artifact": "contribution_matrix",
        "tap": cfg["tap"],
        "algorithm": cfg["algorithm"],
        "target": target.describe(),
        "steps": cfg["steps"] if cfg["algorithm"] == "hidden_ig" else None,
        "sign_modes": ["net", "positive", "negative"],
        "rows": "inputs in dataset order",
    }
    blocks = [("net", net), ("pos", pos), ("neg", neg), ("activations", acts), ("labels", ds.labels[: len(inputs)])]
    run.write_envelope(_stem(args.name, f"contrib_{cfg['tap']}_{cfg['algorithm']}") + ".cdec", header, blocks)


def _channel_activations(model, inputs, tap, batch=256):
    idx = model.tap_index(tap) + 1
    out = []
    for i in range(0, len(inputs), batch):
        h = forward(model, inputs[i:i + batch]).values[idx]
        out.append(h.reshape(h.shape[0], h.shape[1], -1).sum(axis=2))
    return np.concatenate(out)


def cmd_stats(run: Run, cfg: dict, args) -> None:
    rows, spectra = [], []
    for path in args.matrix:
        header, b = _artifact_header(run.use(path), "contribution_matrix")
        labels = b["labels"].astype(int)
        pn = pos_neg_correlation(b["pos"], b["neg"])
        avg, _ = class_average(b["net"], labels)
        spec = foev(avg) if len(avg) >= 2 else None
        n95 = spec.n_components_95 if spec is not None and not is_degenerate(spec) else ""
        rows.append((
            header["tap"], header["algorithm"],
            _num(mean_hoyer(b["net"])), _num(mean_hoyer(b["activations"])),
            _num(pn), n95,
        ))
        if spec is not None and not is_degenerate(spec):
            spectra += [(header["tap"], i + 1, f) for i, f in enumerate(spec.fractions)]
    run.write_csv("stats.csv", "layer_stats", ["tap", "algorithm", "hoyer_contrib", "hoyer_act", "pos_neg_r", "n_components_95"], rows)
    run.write_csv("foev.csv", "foev_spectrum", ["tap", "component", "fraction"], spectra)


def _stem(name, default: str) -> str:
    return name[: -len(".cdec")] if name and name.endswith(".cdec") else (name or default)


def _num(x):
    return "" if is_degenerate(x) else float(x)


def cmd_sae(run: Run, cfg: dict, args) -> None:
    header, b = _artifact_header(run.use(args.matrix), "contribution_matrix")
    if cfg["block"] not in b:
        raise ConfigError(f"matrix has no block {cfg['block']!r}")
    data = b[cfg["block"]]
    sc = SAEConfig(
        expansion=cfg["expansion"], threshold=cfg["threshold"], epochs=cfg["epochs"], lr=cfg["lr"],
        batch_size=cfg["batch_size"], l1_dictionary=cfg["l1_dictionary"], l1_loadings=cfg["l1_loadings"], seed=cfg["seed"],
    )
    sae = train_sae(data, sc)
    stem = _stem(args.name, f"sae_{header['tap']}_{cfg['block']}")
    path = run.path(f"{stem}.cdec")
    with run.locked(path):
        save_sae(sae, path, meta={"manifest": run.manifest.embedded(), "source": {k: header[k] for k in ("tap", "algorithm")}})
    z = loadings_for(data, sae).values
    r2 = r_squared(data, sae)
    run.write_envelope(f"{stem}_loadings.cdec", {"artifact": "loadings", "tap": header["tap"], "block": cfg["block"], "r2": _num(r2)},
                       [("loadings", z), ("labels", b["labels"])])
    run.write_csv(f"{stem}_log.csv", "sae_log", ["epoch", "loss", "r2"], [(e["epoch"], e["loss"], e.get("r2", "") or "") for e in sae.log])


def cmd_correlate(run: Run, cfg: dict, args) -> None:
    header, b = _artifact_header(run.use(args.loadings), "loadings")
    labels = b["labels"].astype(int)
    ccm = class_correlations(b["loadings"], class_masks(labels))
    stats = max_class_corr_stats(ccm, threshold=cfg["threshold"])
    stem = _stem(args.name, "ccm")
    run.write_envelope(f"{stem}.cdec", {"artifact": "class_correlation", "tap": header["tap"], "mask_id": ccm.mask_id},
                       [("values", ccm.values), ("degenerate_modes", ccm.degenerate_modes.astype(np.float64)),
                        ("degenerate_classes", ccm.degenerate_classes.astype(np.float64))])
    valid = np.flatnonzero(~ccm.degenerate_modes)
    rows = [(int(m), float(r)) for m, r in zip(valid, stats.per_mode_max)]
    run.write_csv(f"{stem}_max_class_corr.csv", "max_class_corr", ["mode", "max_r"], rows)


def _load_ccm(run: Run, path):
    from .modes import ClassCorrelationMatrix
    header, b = _artifact_header(run.use(path), "class_correlation")
    return ClassCorrelationMatrix(b["values"], b["degenerate_modes"].astype(bool), b["degenerate_classes"].astype(bool), header["mask_id"])


def cmd_perturb(run: Run, cfg: dict, args) -> None:
    model = _load_model(run, args.model)
    ds = _load_dataset(run, args.dataset)
    sae = load_sae(run.use(args.sae))
    ccm = _load_ccm(run, args.ccm)
    tap = args.tap or "res_out"
    classes = cfg["classes"] if cfg["classes"] is not None else list(range(ccm.values.shape[1]))
    rows, summary = [], []
    for trial, cls in enumerate(classes):
        rep = sweep(model, tap, sae, ccm, ds, int(cls), cfg["fractions"], cfg["kind"], seed=cfg["seed"] + trial, top_modes=cfg["top_modes"])
        for f, t, o in zip(rep.fractions, rep.target_ratios, rep.off_target_ratios):
            rows.append((trial, cls, rep.off_target_class, f, t, o))
        summary.append((trial, cls, rep.off_target_class, rep.auc_target, rep.auc_off_target, rep.specificity))
    stem = _stem(args.name, f"perturb_{cfg['kind']}")
    run.write_csv(f"{stem}.csv", "perturbation_curve", ["trial", "target", "off_target", "fraction", "target_ratio", "off_target_ratio"], rows)
    run.write_csv(f"{stem}_summary.csv", "perturbation_summary", ["trial", "target", "off_target", "auc_target", "auc_off_target", "specificity"], summary)


def cmd_inputmap(run: Run, cfg: dict, args) -> None:
    from .perturb import top_channels
    model = _load_model(run, args.model)
    ds = _load_dataset(run, args.dataset)
    if cfg["algorithm"] not in MAP_ALGORITHMS:
        raise ConfigError(f"unknown map algorithm {cfg['algorithm']!r}")
    if not 0 <= cfg["index"] < len(ds):
        raise ConfigError(f"input index {cfg['index']} out of range")
    if cfg["channels"] is not None:
        channels = [int(c) for c in cfg["channels"]]
    elif cfg["mode"] is not None:
        if not args.sae:
            raise ConfigError("--mode needs --sae")
        sae = load_sae(run.use(args.sae))
        channels = [int(c) for c in top_channels(sae.dictionary[:, cfg["mode"]], cfg["fraction"])]
    else:
        channels = list(range(model.tap_shape(cfg["tap"])[0]))
    target = TargetSpec(cfg["target"], softmax_first=cfg["softmax_first"]) if cfg["target"] in ("top1_logit", "contrastive") else parse_target(cfg["target"], model, ds.inputs)
    x = ds.inputs[cfg["index"]]
    cmap = contribution_map(model, x, cfg["tap"], channels, target, cfg["algorithm"], cfg["steps"])
    stem = _stem(args.name, f"map_{cfg['index']}_{cfg['algorithm']}")
    path = run.path(f"{stem}.cdec")
    with run.locked(path):
        save_map(cmap, path, meta={"manifest": run.manifest.embedded(), "index": cfg["index"]})
    rendered = render_mask(cmap, x)
    with run.locked(run.path(f"{stem}_map.pgm")) as p:
        write_pgm(p, np.maximum(cmap.values, 0.0).mean(axis=0))
    with run.locked(run.path(f"{stem}_mask.pgm")) as p:
        write_pgm(p, rendered.mask)
    with run.locked(run.path(f"{stem}_masked.pgm")) as p:
        write_pgm(p, rendered.image.mean(axis=0))


def cmd_report(run: Run, cfg: dict, args) -> None:
    """Collect plot-ready tables from every artifact in a run directory."""
    src = Path(args.run_dir)
    if not src.is_dir():
        raise MissingArtifactError(f"run directory not found: {src}")
    sparsity, maxcorr, index = [], [], []
    for path in sorted(src.glob("*.cdec")):
        header, b = envelope.read(path)
        kind = header.get("artifact")
        index.append((path.name, kind, sha256_file(path)))
        if kind == "contribution_matrix":
            sparsity.append((header["tap"], header["algorithm"], _num(mean_hoyer(b["net"])), _num(mean_hoyer(b["activations"]))))
        elif kind == "class_correlation":
            from .modes import ClassCorrelationMatrix
            ccm = ClassCorrelationMatrix(b["values"], b["degenerate_modes"].astype(bool), b["degenerate_classes"].astype(bool))
            st = max_class_corr_stats(ccm)
            maxcorr.append((path.name, header["tap"], st.mean, st.n_above))
    curves = []
    for path in sorted(src.glob("*_summary.csv")):
        schema, rows = read_csv(path)
        if schema != "#schema perturbation_summary v1":
            continue
        curves += [(path.name, r["target"], r["auc_target"], r["auc_off_target"], r["specificity"]) for r in rows]
    run.write_csv("report_sparsity.csv", "layer_sparsity", ["tap", "algorithm", "hoyer_contrib", "hoyer_act"], sparsity)
    run.write_csv("report_class_corr.csv", "class_corr_summary", ["artifact", "tap", "mean_max_r", "n_above_0.2"], maxcorr)
    run.write_csv("report_perturbation.csv", "perturbation_auc", ["source", "target", "auc_target", "auc_off_target", "specificity"], curves)
    run.write_csv("report_index.csv", "artifact_index", ["file", "artifact", "sha256"], index)


COMMANDS = {
    "train-toy": cmd_train_toy,
    "contrib": cmd_contrib,
    "stats": cmd_stats,
    "sae": cmd_sae,
    "correlate": cmd_correlate,
    "perturb": cmd_perturb,
    "inputmap": cmd_inputmap,
    "report": cmd_report,
}


def _json_list(text):
    try:
        v = json.loads(text)
    except json.JSONDecodeError:
        raise argparse.ArgumentTypeError(f"not a JSON list: {text}") from None
    if not isinstance(v, list):
        raise argparse.ArgumentTypeError(f"not a JSON list: {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codec", description="Contribution decomposition pipeline for small networks.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config; the section named after the command applies")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--name", help="stem for the output file names")
        return sp

    sp = add("train-toy", "generate data and train the toy classifier or retina regressor")
    sp.add_argument("--dataset", choices=["synthetic-shapes-classification", "synthetic-stimulus-regression"])
    for flag, typ in (("n-samples", int), ("n-test", int), ("n-classes", int), ("n-cells", int), ("epochs", int),
                      ("lr", float), ("batch-size", int), ("seed", int), ("data-seed", int)):
        sp.add_argument(f"--{flag}", type=typ)
    sp.add_argument("--channels", type=_json_list, help="e.g. [8,16,24]")

    sp = add("contrib", "channel contribution matrices for a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--tap")
    sp.add_argument("--algorithm", choices=ALGORITHMS)
    sp.add_argument("--target", help="top1_logit, topk_logit_sum:K, entropy, contrastive, single_output:I, surprisal")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--limit", type=int, help="use only the first N inputs")

    sp = add("stats", "sparsity, sign-correlation and spectrum tables")
    sp.add_argument("--matrix", nargs="+", required=True)

    sp = add("sae", "fit the thresholded autoencoder to a contribution matrix")
    sp.add_argument("--matrix", required=True)
    sp.add_argument("--block", choices=["pos", "net", "neg", "activations"])
    for flag, typ in (("expansion", int), ("threshold", float), ("epochs", int), ("lr", float), ("batch-size", int),
                      ("l1-dictionary", float), ("l1-loadings", float), ("seed", int)):
        sp.add_argument(f"--{flag}", type=typ)

    sp = add("correlate", "mode by class correlation matrix")
    sp.add_argument("--loadings", required=True)
    sp.add_argument("--threshold", type=float)

    sp = add("perturb", "mode-guided ablation or preservation sweeps")
    for flag in ("model", "dataset", "sae", "ccm"):
        sp.add_argument(f"--{flag}", required=True)
    sp.add_argument("--tap")
    sp.add_argument("--kind", choices=["ablate", "preserve"])
    sp.add_argument("--classes", type=_json_list)
    sp.add_argument("--fractions", type=_json_list)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--top-modes", type=int, help="rank channels by the union of this many best modes")

    sp = add("inputmap", "input-space map and rendered mask for one input")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--sae")
    sp.add_argument("--index", type=int)
    sp.add_argument("--tap")
    sp.add_argument("--channels", type=_json_list)
    sp.add_argument("--mode", type=int)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--algorithm", choices=MAP_ALGORITHMS)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--target")

    sp = add("report", "plot-data bundle from a run directory")
    sp.add_argument("--run-dir", required=True)
    return p


def _error(category: str, message: str, code: int) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = {k.replace("-", "_"): v for k, v in vars(args).items()}
        cfg = effective_config(args.command, load_config(args.config), flags)
        run = Run(args.command, cfg, args.out)
        COMMANDS[args.command](run, cfg, args)
        run.finish()
    except CLIError as exc:
        return _error(exc.category, str(exc), exc.code)
    except FileNotFoundError as exc:
        return _error("missing-artifact", str(exc), EXIT_MISSING)
    except envelope.EnvelopeError as exc:
        return _error("corrupt-artifact", str(exc), EXIT_CORRUPT)
    except (ValueError, IndexError, KeyError, RuntimeError) as exc:
        return _error("failed", f"{args.command}: {exc}", EXIT_FAILED)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
