"""``ship`` command-line driver.

Every subcommand reads one JSON run config (``--config``) with optional
``--set block.key=value`` overrides and validates all of it before touching
the filesystem.  Exit status: 0 success, 2 usage or config error, 1 runtime
failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .core import PromptConfig, ShipGenerator, TrainConfig, TrainingError
from .datastore import (DataError, LabeledFeatureSet, few_shot_indices, load_manifest, read_feature_store,
                        split_base_new, write_feature_store)
from .encoders import PromptTemplate, encoder_from_config
from .finetuners import HeadTrainConfig, UnscorableClassError
from .interpret import interpret_instance, load_wordlist
from .protocols import (HEAD_KINDS, PROTOCOLS, EvalReport, ProtocolConfig, ToyWorldConfig, _make_head,
                        build_toy_world, markdown_table, run_base_to_new, run_cross_dataset, run_generalized_setting,
                        run_gzsl, train_generator_on)

log = logging.getLogger("ship")

METHODS = {"zero": "zero_shot", "coop": "prompt_tuner", "adapter": "adapter", "tip": "cache"}
ABLATE_LENGTHS = (1, 2, 4, 8)
ABLATE_FORMS = ((True, False), (True, True), (False, False), (False, True))  # (use_global, sequential)


class ConfigError(ValueError):
    """Bad run config or command line; maps to exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# --------------------------------------------------------------------------
# run config


def default_config() -> dict:
    pcfg = ProtocolConfig()
    world = asdict(ToyWorldConfig())
    for k in ("d", "d_tok", "encoder_seed"):
        world.pop(k)
    return {
        "encoder": {"kind": "toy", "seed": 0, "d": 32, "d_tok": 32},
        "world": world,
        "prompt": asdict(pcfg.prompt),
        "generator": asdict(pcfg.generator),
        "head": asdict(pcfg.head),
        "protocol": {"kind": "b2n", "head": "prompt_tuner", "ship": True, "shots": 16, "seeds": [1, 2, 3, 4, 5],
                     "template": pcfg.template, "generator_kind": pcfg.generator_kind,
                     "xd_synth_per_class": pcfg.xd_synth_per_class},
        "paths": {"manifest": None, "targets": []},
    }


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be an object")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _parse_set(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    if not all(parts):
        raise ConfigError(f"bad --set key {key!r}")
    tree = value
    for p in reversed(parts):
        tree = {p: tree}
    return tree


def load_config(path, sets=()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, raw)
    for item in sets:
        cfg = _merge(cfg, _parse_set(item))
    validate_config(cfg)
    return cfg


def _build(cls, block, name):
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} block: {exc}") from None


def validate_config(cfg: dict) -> None:
    enc = cfg["encoder"]
    if enc.get("kind", "toy") != "toy":
        raise ConfigError("only the toy encoder can be configured from a file")
    for k in ("seed", "d", "d_tok"):
        if not isinstance(enc[k], int) or isinstance(enc[k], bool):
            raise ConfigError(f"encoder.{k} must be an integer")
    if enc["d"] < 2 or enc["d_tok"] < 2:
        raise ConfigError("encoder.d and encoder.d_tok must be >= 2")
    toy_world_config(cfg)
    protocol_config(cfg)
    p = cfg["protocol"]
    if p["kind"] not in PROTOCOLS:
        raise ConfigError(f"protocol.kind must be one of {PROTOCOLS}")
    if p["head"] not in HEAD_KINDS:
        raise ConfigError(f"protocol.head must be one of {HEAD_KINDS}")
    if p["generator_kind"] not in ("text_encoder", "scratch_mlp"):
        raise ConfigError("protocol.generator_kind must be text_encoder or scratch_mlp")
    try:
        PromptTemplate(p["template"])
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"protocol.template: {exc}") from None
    if not isinstance(p["xd_synth_per_class"], int) or p["xd_synth_per_class"] < 0:
        raise ConfigError("protocol.xd_synth_per_class must be a non-negative integer")
    if not isinstance(p["ship"], bool):
        raise ConfigError("protocol.ship must be true or false")
    if not isinstance(p["shots"], int) or p["shots"] < 1:
        raise ConfigError("protocol.shots must be a positive integer")
    seeds = p["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("protocol.seeds must be a nonempty list of non-negative integers")
    if not isinstance(cfg["paths"]["targets"], list):
        raise ConfigError("paths.targets must be a list")


def toy_world_config(cfg: dict) -> ToyWorldConfig:
    e = cfg["encoder"]
    return _build(ToyWorldConfig, {**cfg["world"], "d": e["d"], "d_tok": e["d_tok"], "encoder_seed": e["seed"]},
                  "world")


def protocol_config(cfg: dict) -> ProtocolConfig:
    p = cfg["protocol"]
    return ProtocolConfig(template=p["template"], prompt=_build(PromptConfig, cfg["prompt"], "prompt"),
                          generator=_build(TrainConfig, cfg["generator"], "generator"),
                          head=_build(HeadTrainConfig, cfg["head"], "head"),
                          generator_kind=p["generator_kind"], xd_synth_per_class=p["xd_synth_per_class"])


def _require_file(path, what):
    if path is None:
        raise ConfigError(f"{what} path is required")
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


def _encoder(cfg):
    return encoder_from_config(cfg["encoder"])


# --------------------------------------------------------------------------
# output helpers


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def write_report(report: EvalReport, out_dir: Path, stem: str = "report", plot: bool = False) -> None:
    _write_text(out_dir / f"{stem}.json", report.to_json())
    _write_text(out_dir / f"{stem}.md", report.to_markdown())
    if plot:
        plot_bars([(report.fingerprint.get("head_kind", report.protocol), report)], out_dir / f"{stem}.svg")


def plot_bars(rows, path: Path) -> None:
    """Grouped bars of every accuracy column plus H, one group per row."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ship"
    keys = list(rows[0][1].accuracies)
    cols = keys + (["H"] if rows[0][1].harmonic_mean is not None else [])
    width = 0.8 / len(cols)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.5 * len(rows)), 3.0))
    x = np.arange(len(rows))
    for j, col in enumerate(cols):
        vals = [r.harmonic_mean if col == "H" else r.accuracies[col] for _, r in rows]
        ax.bar(x + j * width, vals, width, label=col)
    ax.set_xticks(x + width * (len(cols) - 1) / 2, [name for name, _ in rows])
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# subcommands


def _few_shot_base(manifest, cfg):
    p = cfg["protocol"]
    classes = manifest.seen_classes if manifest.unseen_classes else split_base_new(manifest.vocabulary).base
    return manifest.rows(few_shot_indices(manifest, classes, p["shots"], p["seeds"][0]))


def cmd_toyworld(args, cfg):
    out = Path(args.out)
    manifest, _ = build_toy_world(toy_world_config(cfg), out)
    print(json.dumps({"manifest": str(out / "manifest.json"), "classes": len(manifest.vocabulary)}))


def cmd_train_gen(args, cfg):
    path = _require_file(args.manifest, "manifest")
    pcfg = protocol_config(cfg)
    manifest = load_manifest(path)
    enc = _encoder(cfg)
    train = _few_shot_base(manifest, cfg)
    gen = train_generator_on(enc, train, pcfg, cfg["protocol"]["seeds"][0])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    gen.save(args.out)
    final = gen.history_[-1].total if gen.history_ else None
    print(json.dumps({"generator": args.out, "items": len(train), "final_loss": final}))


def cmd_synth(args, cfg):
    _require_file(args.gen, "generator checkpoint")
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if not classes:
        raise ConfigError("--classes needs at least one class name")
    if args.per_class < 0:
        raise ConfigError("--per-class must be non-negative")
    gen = ShipGenerator.load(args.gen)
    synth = gen.sample(classes, args.per_class, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_feature_store(synth, args.out)
    print(json.dumps({"store": args.out, "rows": len(synth)}))


def cmd_finetune(args, cfg):
    path = _require_file(args.base, "manifest")
    synth_path = _require_file(args.synth, "synthetic feature store") if args.synth else None
    pcfg = protocol_config(cfg)
    kind = METHODS[args.method]
    manifest = load_manifest(path)
    enc = _encoder(cfg)
    train = _few_shot_base(manifest, cfg)
    synth = read_feature_store(synth_path) if synth_path else LabeledFeatureSet.empty(enc.d)
    if synth.dim != enc.d:
        raise DataError(f"dimension mismatch: synthetic store has {synth.dim}, encoder {enc.d}")
    classes = sorted(set(train.labels) | set(synth.labels))
    pcfg = replace(pcfg, head=replace(pcfg.head, synth_per_class=0))
    head = _make_head(kind, enc, pcfg, None, cfg["protocol"]["seeds"][0])
    if kind == "cache":
        head.fit(train.features, train.labels, classes, synth=synth if len(synth) else None)
    else:
        data = train.concat(synth)
        head.fit(data.features, data.labels, classes)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    head.save(args.out)
    print(json.dumps({"head": args.out, "kind": kind, "classes": len(classes)}))


def _run_protocol(cfg, kind, manifest, enc, targets=()):
    p = cfg["protocol"]
    pcfg = protocol_config(cfg)
    seeds = tuple(p["seeds"])
    if kind == "b2n":
        return run_base_to_new(manifest, enc, p["head"], p["shots"], seeds, p["ship"], pcfg)
    if kind == "gzs-setting":
        return run_generalized_setting(manifest, enc, p["head"], p["shots"], seeds, p["ship"], pcfg)
    if kind == "gzsl":
        return run_gzsl(manifest, enc, p["head"], seeds, p["ship"], pcfg)
    return run_cross_dataset(manifest, list(targets), enc, p["shots"], seeds, pcfg)


def cmd_eval(args, cfg):
    kind = args.protocol or cfg["protocol"]["kind"]
    cfg["protocol"]["kind"] = kind
    path = _require_file(cfg["paths"]["manifest"], "paths.manifest")
    tpaths = [_require_file(t, "target manifest") for t in cfg["paths"]["targets"]]
    if kind == "xd" and not tpaths:
        raise ConfigError("protocol xd needs at least one entry in paths.targets")
    manifest = load_manifest(path)
    targets = [load_manifest(t) for t in tpaths]
    out = Path(args.out)
    result = _run_protocol(cfg, kind, manifest, _encoder(cfg), targets)
    if isinstance(result, dict):
        for name, rep in result.items():
            write_report(rep, out, f"report-{name}", args.plot)
        summary = {name: rep.accuracies for name, rep in result.items()}
    else:
        write_report(result, out, "report", args.plot)
        summary = {**result.accuracies, "harmonic_mean": result.harmonic_mean}
    print(json.dumps(summary, sort_keys=True))


def cmd_interpret(args, cfg):
    _require_file(args.gen, "generator checkpoint")
    _require_file(args.feature_store, "feature store")
    _require_file(args.wordlist, "wordlist")
    words = load_wordlist(args.wordlist)
    gen = ShipGenerator.load(args.gen)
    store = read_feature_store(args.feature_store)
    if not 0 <= args.row < len(store):
        raise ConfigError(f"--row {args.row} outside [0, {len(store)})")
    interp = interpret_instance(gen, gen.encoder, store.features[args.row], words)
    text = interp.to_json() + "\n"
    if args.out:
        _write_text(Path(args.out), text)
    sys.stdout.write(text)


def cmd_ablate(args, cfg):
    path = _require_file(cfg["paths"]["manifest"], "paths.manifest")
    manifest = load_manifest(path)
    enc = _encoder(cfg)
    kind = cfg["protocol"]["kind"]
    if kind == "xd":
        raise ConfigError("ablate runs a single-dataset protocol (b2n, gzs-setting or gzsl)")
    out = Path(args.out)
    sections = {}
    rows = []
    for L in ABLATE_LENGTHS:
        c = copy.deepcopy(cfg)
        c["prompt"]["L"] = L
        rows.append((f"L={L}", _run_protocol(c, kind, manifest, enc)))
    sections["length"] = rows
    rows = []
    for use_global, seq in ABLATE_FORMS:
        c = copy.deepcopy(cfg)
        c["prompt"].update(use_global=use_global, sequential_bias=seq)
        name = f"global={'yes' if use_global else 'no'} sequential={'yes' if seq else 'no'}"
        rows.append((name, _run_protocol(c, kind, manifest, enc)))
    sections["form"] = rows
    md = []
    for title, rows in sections.items():
        md.append(f"## prompt {title}\n\n" + markdown_table(rows))
        if args.plot:
            plot_bars(rows, out / f"ablate-{title}.svg")
    _write_text(out / "ablate.md", "\n".join(md))
    payload = {title: [{"name": n, **r.to_dict()} for n, r in rows] for title, rows in sections.items()}
    _write_text(out / "ablate.json", json.dumps(payload, sort_keys=True, indent=2) + "\n")
    sys.stdout.write("\n".join(md))


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ship", description="Synthesize features for label-only classes and fine-tune heads.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    def add(name, func, help_, config=True, config_required=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", required=config_required, help="JSON run config")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config entry, e.g. protocol.shots=8")
        p.set_defaults(func=func)
        return p

    p = add("toyworld", cmd_toyworld, "write a synthetic toy dataset")
    p.add_argument("--out", required=True, help="output directory")
    p = add("train-gen", cmd_train_gen, "train a feature generator on few-shot base data")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="generator checkpoint path")
    p = add("synth", cmd_synth, "sample synthetic features from a trained generator", config=False)
    p.add_argument("--gen", required=True)
    p.add_argument("--classes", required=True, help="comma-separated class names")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="feature store path")
    p = add("finetune", cmd_finetune, "fit a classification head on real plus synthetic features")
    p.add_argument("--method", required=True, choices=sorted(METHODS))
    p.add_argument("--base", required=True, help="manifest with the labeled base data")
    p.add_argument("--synth", help="synthetic feature store")
    p.add_argument("--out", required=True, help="head checkpoint path")
    p = add("eval", cmd_eval, "run an evaluation protocol and write reports")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--plot", action="store_true", help="also write an SVG bar chart")
    p = add("interpret", cmd_interpret, "nearest words for one item's prompts", config=False)
    p.add_argument("--gen", required=True)
    p.add_argument("--feature-store", required=True)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--wordlist", required=True)
    p.add_argument("--out", help="also write the JSON here")
    p = add("ablate", cmd_ablate, "sweep prompt length and prompt form")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--plot", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.set) if hasattr(args, "config") else None
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"ship: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (DataError, TrainingError, UnscorableClassError, ValueError, OSError) as exc:
        print(f"ship: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
