"""``potrojan`` command line: train, insert, attack-eval, report.

Every flag can also come from a TOML config (``--config``): top-level keys
apply to all subcommands, a table named after the subcommand applies to
that one only.  Flags given on the command line win.
Exit codes: 0 success, 1 runtime or convergence failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    CellResult,
    PoolOverlapError,
    SweepHost,
    SweepPlan,
    accident_layer_rate,
    averaged_distance,
    best_insertion_layer,
    check_disjoint,
    emit_report,
    invariance_violations,
    read_report,
    run_sweep,
    triggering_rate,
)
from .nn import CLASSIFICATION, CROSS_ENTROPY, MAE, REGRESSION, TrainConfig, forward, init_network, train
from .payload import (
    NORMALIZED,
    REVERSE_PRESETS,
    ClassificationGoal,
    ConvergenceError,
    PayloadError,
    RegressionGoal,
    ReverseConfig,
    dominance_payload,
    payload_with_access,
    payload_without_access,
)
from .serialization import ModelFormatError, load_model, read_dataset, read_vectors, save_model
from .trojan import (
    DEFAULT_SIGMA,
    InsertionError,
    TrojanedNetwork,
    TrojanSpec,
    as_plain_network,
    design_multi_neuron,
    design_single_neuron,
    insert,
)
from .zoo import (
    TOY_CLASSIFICATION_TRAINING,
    TOY_REGRESSION_TRAINING,
    SyntheticModelSpec,
    build_synthetic,
    parse_bits,
    train_toy,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("potrojan")

PRESETS = ("paper-toy", "desk-sweep")

DESK_HOSTS = (
    {"layer_widths": [8, 16, 16, 8], "name": "mlp-a"},
    {"layer_widths": [10, 24, 16, 12, 6], "name": "mlp-b"},
)
DESK_INIT_SCALE = 2.0
# desk hosts have narrow activation sums; 1e-4 would expect about one
# accidental window hit per sweep
DESK_SIGMA = 1e-6
SWEEP_TAU = 1e-3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------


def _numbers(text):
    try:
        return np.array([float(v) for v in str(text).replace(";", ",").split(",") if v.strip()])
    except ValueError as exc:
        raise UsageError(f"not a comma-separated list of numbers: {text!r}") from exc


def _vector_arg(text):
    """``1111`` (bit string) or ``0.1,0.2,...``."""
    text = str(text).strip()
    if text and set(text) <= {"0", "1"} and "," not in text:
        return parse_bits(text)
    return _numbers(text)


def _load_trigger(args):
    if args.trigger_file:
        vectors = read_vectors(args.trigger_file)
        return vectors[args.trigger_index]
    if args.trigger:
        return _vector_arg(args.trigger)
    raise UsageError("give --trigger or --trigger-file")


def _reverse_config(args, tau_default=None):
    base = REVERSE_PRESETS[args.reverse_preset]
    step = args.step or base.step
    if step == base.step:
        shrink = base.shrink
    else:
        shrink = 0.5 if step == NORMALIZED else 1.0
    return ReverseConfig(
        alpha=args.alpha if args.alpha is not None else base.alpha,
        tau=args.tau if args.tau is not None else tau_default or base.tau,
        max_iters=args.max_iters if args.max_iters is not None else base.max_iters,
        step=step,
        shrink=shrink,
    )


def _add_reverse_flags(p):
    p.add_argument("--vstar", type=float, help="target value / target-label confidence V*")
    p.add_argument("--target-label", type=int, help="target label for reverse payloads")
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--step", choices=("normalized", "raw"))
    p.add_argument("--reverse-preset", choices=sorted(REVERSE_PRESETS), default="desk")


def build_parser():
    parser = argparse.ArgumentParser(prog="potrojan", description="Insert and evaluate neuron-level trojans in dense networks.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a toy model or a model on a CSV dataset")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--toy", choices=(REGRESSION, CLASSIFICATION))
    src.add_argument("--dataset", help="CSV with x0..xd,target or x0..xd,label")
    p.add_argument("--widths", help="layer widths for --dataset, e.g. 4,5,1")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threshold", type=float, help="mean-loss stopping threshold")
    p.add_argument("-o", "--out", help="output model file")

    p = sub.add_parser("insert", help="design a trojan and write the trojaned model")
    p.add_argument("--model")
    p.add_argument("--layer", type=int)
    p.add_argument("--kind", choices=("single", "multi"), default="single")
    p.add_argument("--trigger", help="trigger input: bit string like 1111 or comma-separated numbers")
    p.add_argument("--trigger-file", help="CSV of vectors; row --trigger-index is used")
    p.add_argument("--trigger-index", type=int, default=0)
    p.add_argument("--trigger-weights", help="comma-separated trigger synapse weights (default all 1)")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument(
        "--payload",
        help="instance:PATH | reverse | dominance:LABEL | explicit:V1,V2,...",
    )
    p.add_argument("--magnitude", type=float, help="dominance magnitude (default: derived from --reference-file)")
    p.add_argument("--reference-file", help="inputs used to derive the dominance magnitude")
    _add_reverse_flags(p)
    p.add_argument("--trace-csv", help="write the reverse-engineering loss trace here")
    p.add_argument("--materialize", action="store_true", help="write an enlarged plain network (single-neuron only)")
    p.add_argument("-o", "--out")

    p = sub.add_parser("attack-eval", help="measure triggering, accident rates and distances")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--model", action="append", help="trojaned model file (repeatable)")
    p.add_argument("--trigger-file")
    p.add_argument("--pool-file", help="non-trigger inputs")
    p.add_argument("--probe-clean", action="store_true", default=None)
    p.add_argument("--sigma", type=float, help=f"multi-neuron window (default {DEFAULT_SIGMA}, desk-sweep {DESK_SIGMA})")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--n-nontrigger", type=int, default=1000)
    p.add_argument("--n-trigger", type=int, default=5)
    _add_reverse_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--report-dir", "--out", dest="report_dir")

    p = sub.add_parser("report", help="summarise a report written by attack-eval")
    p.add_argument("path", help="report directory or summary.json")
    return parser


def _load_config(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad config {path}: {exc}") from exc


def parse_args(argv=None):
    parser = build_parser()
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    pre, _ = probe.parse_known_args(argv)
    args = parser.parse_args(argv)
    extra = {}
    if pre.config:
        try:
            config = _load_config(pre.config)
        except UsageError as exc:
            parser.error(str(exc))
        merged = {k: v for k, v in config.items() if not isinstance(v, dict)}
        merged.update(config.get(args.command, {}))
        defaults = {}
        for key, value in merged.items():
            dest = key.replace("-", "_")
            if hasattr(args, dest):
                defaults[dest] = value
            else:
                extra[dest] = value
        # config values become defaults, so explicit flags still win
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        subparsers.choices[args.command].set_defaults(**defaults)
        args = parser.parse_args(argv)
    args.config_extra = extra
    return parser, args


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args, parser):
    if not args.out:
        parser.error("train: an output path (-o/--out) is required")
    if args.seed is None:
        parser.error("train: --seed is required")
    if args.toy:
        base = TOY_REGRESSION_TRAINING if args.toy == REGRESSION else TOY_CLASSIFICATION_TRAINING
        cfg = TrainConfig(
            learning_rate=args.lr or base.learning_rate,
            max_epochs=args.epochs if args.epochs is not None else base.max_epochs,
            loss_threshold=args.threshold if args.threshold is not None else base.loss_threshold,
            lr_decay=base.lr_decay,
        )
        result, data = train_toy(args.toy, seed=args.seed, config=cfg)
        x, targets, mode = data.inputs, data.targets, data.mode
    elif args.dataset:
        if not args.widths:
            parser.error("train: --widths is required with --dataset")
        x, y, mode = read_dataset(args.dataset)
        widths = [int(w) for w in _numbers(args.widths)]
        if widths[0] != x.shape[1]:
            raise UsageError(f"first width {widths[0]} does not match {x.shape[1]} input columns")
        if mode == CLASSIFICATION:
            if y.max() >= widths[-1]:
                raise UsageError(f"label {y.max()} does not fit {widths[-1]} outputs")
            targets = np.eye(widths[-1])[y]
        else:
            targets = y[:, None]
        net = init_network(widths, output_head=mode, seed=args.seed)
        cfg = TrainConfig(
            learning_rate=args.lr or 0.1,
            max_epochs=args.epochs if args.epochs is not None else 20000,
            loss_threshold=args.threshold if args.threshold is not None else 0.01,
        )
        result = train(net, x, targets, MAE if mode == REGRESSION else CROSS_ENTROPY, cfg)
    else:
        parser.error("train: give --toy or --dataset")

    print(f"epochs: {result.epochs}")
    print(f"final loss: {result.loss:.6g}")
    out, _ = forward(result.network, x)
    if mode == CLASSIFICATION:
        correct = int(np.sum(np.argmax(out, axis=1) == np.argmax(targets, axis=1)))
        print(f"accuracy: {correct}/{len(x)}")
    else:
        print(f"max abs error: {float(np.max(np.abs(out - targets))):.6g}")
    if not result.converged:
        print(f"error: training did not reach loss {cfg.loss_threshold} (final {result.loss:.6g})", file=sys.stderr)
        return 1
    save_model(result.network, args.out)
    print(f"wrote {args.out}")
    return 0


def _goal(net, args):
    if net.output_head == CLASSIFICATION:
        if args.target_label is None:
            raise UsageError("reverse payload on a classifier needs --target-label")
        return ClassificationGoal(args.target_label, args.vstar if args.vstar is not None else 0.99)
    if args.vstar is None:
        raise UsageError("reverse payload on a regressor needs --vstar")
    return RegressionGoal(args.vstar)


def _payload(net, n, trigger, args, design):
    spec = args.payload
    if not spec:
        raise UsageError("--payload is required")
    mode, _, arg = spec.partition(":")
    if mode == "explicit":
        return _numbers(arg)
    if mode == "instance":
        if not arg:
            raise UsageError("instance payload needs a path: instance:PATH")
        target = read_vectors(arg)[0]
        return payload_with_access(net, n, trigger, target, trigger=design)
    if mode == "dominance":
        try:
            label = int(arg)
        except ValueError:
            raise UsageError("dominance payload needs a label: dominance:LABEL") from None
        ref = read_vectors(args.reference_file) if args.reference_file else None
        if args.magnitude is None and ref is None:
            raise UsageError("dominance payload needs --magnitude or --reference-file")
        return dominance_payload(net, n, label, args.magnitude, ref)
    if mode == "reverse":
        return payload_without_access(net, n, trigger, _goal(net, args), _reverse_config(args), args.trace_csv)
    raise UsageError(f"unknown payload source {spec!r}")


def _fmt(values):
    return "[" + ", ".join(f"{v:.9g}" for v in np.ravel(values)) + "]"


def cmd_insert(args, parser):
    for flag in ("model", "layer", "out"):
        if getattr(args, flag) is None:
            parser.error(f"insert: --{flag} is required")
    model = load_model(args.model)
    host = model.host if isinstance(model, TrojanedNetwork) else model
    trigger = _load_trigger(args)
    weights = _numbers(args.trigger_weights) if args.trigger_weights else None
    if args.kind == "single":
        design = design_single_neuron(host, args.layer, trigger, weights, args.epsilon)
    else:
        design = design_multi_neuron(host, args.layer, trigger, weights, args.sigma)
    xi = _payload(host, args.layer, trigger, args, design)
    spec = TrojanSpec(design, xi, f"{args.kind}@{args.layer}")
    trojaned = insert(model, spec)

    for name, value in design.thresholds().items():
        print(f"{name} = {value!r}")
    print(f"xi = {_fmt(xi)}")
    clean = forward(host, trigger)[0]
    dirty = trojaned(trigger)
    print(f"fires on trigger: {bool(design.fires(forward(host, trigger)[1].activations[args.layer - 1]))}")
    if host.output_head == CLASSIFICATION:
        label = args.target_label if args.target_label is not None else int(np.argmax(dirty))
        print(f"clean label: {int(np.argmax(clean))}  trojaned label: {int(np.argmax(dirty))}")
        print(f"confidence of label {label}: {dirty[label]:.9g}")
    else:
        print(f"clean output: {_fmt(clean)}  trojaned output: {_fmt(dirty)}")
    if args.materialize:
        save_model(as_plain_network(trojaned), args.out)
    else:
        save_model(trojaned, args.out)
    print(f"wrote {args.out}")
    return 0


def _desk_hosts(args, seed):
    specs = args.config_extra.get("hosts") or DESK_HOSTS
    hosts = []
    for i, raw in enumerate(specs):
        raw = dict(raw)
        raw.setdefault("seed", seed + i)
        raw.setdefault("init_scale", DESK_INIT_SCALE)
        raw.setdefault("n_trigger", args.n_trigger)
        raw.setdefault("n_nontrigger", args.n_nontrigger)
        spec = SyntheticModelSpec(**raw)
        built = build_synthetic(spec)
        hosts.append(SweepHost(built.name, built.network, built.trigger_pool, built.nontrigger_pool))
    return hosts


def _toy_hosts(seed):
    hosts = []
    reg, data = train_toy(REGRESSION, seed=seed)
    cls, cdata = train_toy(CLASSIFICATION, seed=seed)
    for res in (reg, cls):
        if not res.converged:
            raise RuntimeError(f"toy training did not converge (loss {res.loss:.6g})")
    trig, pool = data.inputs[15:], data.inputs[:15]
    hosts.append(SweepHost("toy-regression", reg.network, trig, pool, payload=[-1.0]))
    hosts.append(
        SweepHost(
            "toy-classification", cls.network, trig, pool, payload="dominance", target_labels=[0]
        )
    )
    return hosts


def _model_cells(args, probe_clean):
    if not args.trigger_file or not args.pool_file:
        raise UsageError("--model needs --trigger-file and --pool-file")
    triggers = read_vectors(args.trigger_file)
    pool = read_vectors(args.pool_file)
    check_disjoint(triggers, pool)
    cells = []
    for path in args.model:
        model = load_model(path)
        if not isinstance(model, TrojanedNetwork):
            raise UsageError(f"{path} carries no trojans")
        host = model.host
        _, pool_snap = forward(host, pool)
        violations = invariance_violations(host, model, pool) if probe_clean else []
        for spec in model.trojans:
            n, trig_design = spec.layer, spec.trigger
            for t_idx, trig in enumerate(triggers):
                out, snap = model.forward(trig)
                a_prev = snap.activations[n - 1] * trig_design.weights
                pool_prev = pool_snap.activations[n - 1] * trig_design.weights
                if host.output_head == CLASSIFICATION:
                    label = args.target_label if args.target_label is not None else int(np.argmax(out))
                    conf = float(out[label])
                else:
                    label, conf = None, float(out[0])
                cells.append(
                    CellResult(
                        Path(path).stem, n, trig_design.kind, t_idx,
                        bool(trig_design.fires(snap.activations[n - 1])),
                        int(np.sum(trig_design.fires(pool_snap.activations[n - 1]))),
                        len(pool), averaged_distance(a_prev, pool_prev),
                        (not violations) if probe_clean else None, conf, label, None, violations,
                    )
                )
    return cells


def cmd_attack_eval(args, parser):
    if not args.report_dir:
        parser.error("attack-eval: --report-dir is required")
    if not args.preset and not args.model:
        parser.error("attack-eval: give --preset or --model")
    seed = args.seed
    if args.preset and seed is None:
        parser.error("attack-eval: --seed is required for presets")
    probe = bool(args.probe_clean) if args.probe_clean is not None else bool(args.preset)
    if args.sigma is None:
        args.sigma = DESK_SIGMA if args.preset == "desk-sweep" else DEFAULT_SIGMA
    config = {
        "preset": args.preset,
        "seed": seed,
        "sigma": args.sigma,
        "epsilon": args.epsilon,
        "probe_clean": probe,
        "n_trigger": args.n_trigger,
        "n_nontrigger": args.n_nontrigger,
        "hosts": args.config_extra.get("hosts"),
        "models": [Path(m).name for m in args.model or []],
    }
    if args.preset:
        # sweeps default to V* = 0.99 with tolerance 1e-3
        cfg = _reverse_config(args, tau_default=SWEEP_TAU)
        config["reverse"] = vars(cfg)
        hosts = _toy_hosts(seed) if args.preset == "paper-toy" else _desk_hosts(args, seed)
        plan = SweepPlan(
            hosts,
            confidence=args.vstar if args.vstar is not None else 0.99,
            reverse=cfg,
            sigma=args.sigma,
            epsilon=args.epsilon,
            probe_clean=probe,
            seed=seed,
        )
        cells = run_sweep(plan)
    else:
        cells = _model_cells(args, probe)
    paths = emit_report(cells, args.report_dir, seed=seed, config=config)
    _print_summary(cells)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _print_summary(cells):
    trig = triggering_rate(cells)
    acc = accident_layer_rate(cells)
    print(f"{'host':<22}{'kind':<8}{'trigger':>8}{'triggering':>12}{'accident':>10}")
    for key in sorted(trig):
        host, kind, t = key
        print(f"{host:<22}{kind:<8}{t:>8}{str(trig[key]):>12}{str(acc[key]):>10}")
    for host in sorted({c.host for c in cells}):
        best = best_insertion_layer(cells, host)
        print(f"{host}: largest mean D at layer {best}")
    bad = [c for c in cells if c.clean_invariant is False]
    if bad:
        print(f"clean-invariance violations in {len(bad)} cells")


def cmd_report(args, parser):
    path = Path(args.path)
    if path.is_dir():
        path = path / "summary.json"
    try:
        meta, cells = read_report(path)
    except (KeyError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: not a report: {exc}") from exc
    print(f"seed: {meta.get('seed')}  config: {meta.get('config_hash', '')[:12]}  engine: {meta.get('engine_version')}")
    _print_summary(cells)
    return 0


COMMANDS = {"train": cmd_train, "insert": cmd_insert, "attack-eval": cmd_attack_eval, "report": cmd_report}


def main(argv=None):
    parser, args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, parser)
    except UsageError as exc:
        parser.error(str(exc))
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        ValueError,
        OSError,
        RuntimeError,
        ArithmeticError,
        ModelFormatError,
        PayloadError,
        InsertionError,
        PoolOverlapError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
