"""Command-line entry point: ``hypseek {train,screen,rank,geomcheck,synth}``.

Exit codes: 0 success, 1 configuration or usage error, 2 data or
checkpoint error, 3 numeric abort or failed self-check.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._binio import CorruptFileError, atomic_write
from .checks import run_geomcheck, small_angle_errors
from .config import SCHEMA, ConfigError, build_train_config, parse_config_file, resolve
from .data import (CliffPairSpec, DataError, generate_cliff_pairs, generate_synthetic,
                   load_assays, load_features, split_assays, write_assays, write_features)
from .losses import NonFiniteLossError, TERM_NAMES
from .metrics import REPORT_COLUMNS, LabeledRanking, MetricError, pearson, screening_row, spearman
from .model import EmbeddingRangeError, load_checkpoint, save_checkpoint
from .retrieval import build_index, score_all, screen_assay, write_ranked
from .trainer import NonFiniteGradientError, load_train_state, save_train_state, train

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_DATA", "EXIT_NUMERIC"]

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("hypseek")


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_inputs(assay_path, feature_path):
    if assay_path is None or feature_path is None:
        raise _Fail(EXIT_CONFIG, "both an assay file and a feature file are required")
    for p in (assay_path, feature_path):
        if not Path(p).is_file():
            raise _Fail(EXIT_DATA, f"input file not found: {p}")
    try:
        return load_assays(assay_path), load_features(feature_path)
    except (DataError, CorruptFileError, UnicodeDecodeError) as exc:
        raise _Fail(EXIT_DATA, str(exc)) from None


def _load_model(path):
    if not Path(path).is_file():
        raise _Fail(EXIT_DATA, f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (CorruptFileError, ValueError) as exc:
        raise _Fail(EXIT_DATA, f"bad checkpoint: {exc}") from None


def _fmt_cell(x) -> str:
    return "undefined" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    flags = {k.name: getattr(args, k.name) for k in SCHEMA}
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        values = resolve(file_values, flags)
        config = build_train_config(values)
    except ConfigError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from None
    assays, store = _load_inputs(values["assays"], values["features"])

    handler = logging.FileHandler(values["run_log"], mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("hypseek")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        state = None
        if args.resume:
            try:
                state = load_train_state(args.resume)
            except (OSError, ValueError, KeyError) as exc:
                raise _Fail(EXIT_DATA, f"cannot resume from {args.resume}: {exc}") from None
        log.info("training on %d assays, seed %d", len(assays), config.seed)
        result = train(assays, store, config, log_path=values["loss_log"], state=state)
    except (DataError, KeyError) as exc:
        raise _Fail(EXIT_DATA, str(exc)) from None
    except NonFiniteLossError as exc:
        raise _Fail(EXIT_NUMERIC, f"numeric abort: non-finite {exc.term}") from None
    except (NonFiniteGradientError, FloatingPointError, EmbeddingRangeError) as exc:
        raise _Fail(EXIT_NUMERIC, f"numeric abort: {exc}") from None
    finally:
        root.removeHandler(handler)
        handler.close()

    save_checkpoint(values["checkpoint"], result.params)
    if args.save_state:
        save_train_state(args.save_state, result.state)
    last = result.epoch_log[-1] if result.epoch_log else None
    print(f"checkpoint {values['checkpoint']} sha256={_sha256(values['checkpoint'])}")
    if last is not None:
        print(f"epoch {last['epoch']} mean total {last['total']:.6f}")
        for name in TERM_NAMES:
            print(f"  {name:<9} {last[name]:.6f}")
    if result.clip_events:
        print(f"gradient clipped {result.clip_events} times (see {values['run_log']})")
    return EXIT_OK


# --------------------------------------------------------------------------
# screen


def _group_by_target(assays):
    groups = {}
    for a in assays:
        groups.setdefault(a.target_id, []).append(a)
    return groups


def cmd_screen(args) -> int:
    params = _load_model(args.checkpoint)
    assays, store = _load_inputs(args.assays, args.features)
    digest = _sha256(args.checkpoint)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    report = []
    try:
        for target, group in sorted(_group_by_target(assays).items()):
            merged = {}
            for a in group:
                for lig in a.ligands:
                    merged.setdefault(lig.ligand_id, lig)
            ligs = list(merged.values())
            if not ligs:
                print(f"target {target}: no ligands, skipped")
                continue
            index = build_index([l.ligand_id for l in ligs], store, params,
                                [l.feature_id for l in ligs])
            pocket_id = group[0].pocket_feature_ids[0]
            result = score_all(store.row(pocket_id), index, params)
            write_ranked(out / f"{target}.tsv", target, digest, result)
            if any(l.active is not None for l in ligs):
                by_id = {l.ligand_id: l for l in ligs}
                ranked = [by_id[i] for i in result.ids]
                data = LabeledRanking(
                    result.scores, [bool(l.active) for l in ranked],
                    [np.nan if l.affinity is None else l.affinity for l in ranked], result.ids)
                report.append({"target": target, **screening_row(data)})
    except (DataError, KeyError) as exc:
        raise _Fail(EXIT_DATA, str(exc)) from None
    except EmbeddingRangeError as exc:
        raise _Fail(EXIT_NUMERIC, str(exc)) from None
    if report:
        lines = ["\t".join(REPORT_COLUMNS)]
        for row in report:
            cells = [_fmt_cell(row[c]) for c in REPORT_COLUMNS[1:]]
            lines.append("\t".join([row["target"]] + cells))
        atomic_write(out / "report.tsv", ("\n".join(lines) + "\n").encode("utf-8"))
        print(f"wrote {len(report)} report rows to {out / 'report.tsv'}")
    print(f"wrote ranked lists for {len(_group_by_target(assays))} targets to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# rank


def _correlation(fn, x, y):
    try:
        return fn(x, y)
    except MetricError:
        return float("nan")


def cmd_rank(args) -> int:
    params = _load_model(args.checkpoint)
    assays, store = _load_inputs(args.assays, args.features)
    rows, skipped = [], []
    try:
        for a in assays:
            labelled = [l for l in a.ligands if l.affinity is not None]
            if len(labelled) < 2:
                skipped.append(a.assay_id)
                print(f"warning: assay {a.assay_id} has {len(labelled)} affinity-labelled "
                      "ligand(s); skipped")
                continue
            index = build_index([l.ligand_id for l in a.ligands], store, params,
                                [l.feature_id for l in a.ligands])
            data = screen_assay(a, index, params, store)
            known = np.isfinite(data.affinities)
            x, y = data.scores[known], data.affinities[known]
            rows.append((a.assay_id, _correlation(pearson, x, y), _correlation(spearman, x, y)))
    except (DataError, KeyError) as exc:
        raise _Fail(EXIT_DATA, str(exc)) from None
    except EmbeddingRangeError as exc:
        raise _Fail(EXIT_NUMERIC, str(exc)) from None

    lines = ["assay\tPearson\tSpearman"]
    lines += [f"{aid}\t{_fmt_cell(p)}\t{_fmt_cell(s)}" for aid, p, s in rows]
    pe = [p for _, p, _ in rows if not math.isnan(p)]
    sp = [s for _, _, s in rows if not math.isnan(s)]
    lines.append(f"mean\t{_fmt_cell(float(np.mean(pe)) if pe else None)}"
                 f"\t{_fmt_cell(float(np.mean(sp)) if sp else None)}")
    for aid in skipped:
        lines.append(f"# skipped {aid}: fewer than 2 affinity-labelled ligands")
    text = "\n".join(lines) + "\n"
    if args.output:
        atomic_write(args.output, text.encode("utf-8"))
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# geomcheck


def _parse_thetas(text):
    try:
        thetas = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise _Fail(EXIT_CONFIG, f"--theta expects comma-separated numbers, got {text!r}") from None
    if not thetas or any(not 0 < t < math.pi for t in thetas):
        raise _Fail(EXIT_CONFIG, "--theta values must lie in (0, pi)")
    return thetas


def cmd_geomcheck(args) -> int:
    thetas = _parse_thetas(args.theta) if args.theta else None
    if thetas:
        rows = small_angle_errors(sorted(thetas, reverse=True))
        print("theta\tratio d/|v1-v2|\trelative error of sinh(r)*theta")
        for theta, ratio, err in rows:
            print(f"{theta:g}\t{ratio:.9f}\t{err:.6e}")
        for (t1, _, e1), (t2, _, e2) in zip(rows, rows[1:]):
            print(f"error quotient {t2:g}/{t1:g} = {e2 / e1:.6f} "
                  f"(quadratic decay predicts {(t2 / t1) ** 2:g})")
    results = run_geomcheck(thetas, seed=args.seed, corrupt_gradient=args.corrupt_gradient)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


# --------------------------------------------------------------------------
# synth


def _parse_fractions(text):
    try:
        fr = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise _Fail(EXIT_CONFIG, f"--split expects three comma-separated fractions") from None
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise _Fail(EXIT_CONFIG, "--split needs three non-negative fractions summing to 1")
    return fr


def cmd_synth(args) -> int:
    if args.targets < 1 or args.ligands < 1 or args.dim < 1 or args.noise < 0:
        raise _Fail(EXIT_CONFIG, "--targets, --ligands and --dim must be >= 1, --noise >= 0")
    fractions = _parse_fractions(args.split) if args.split else None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    try:
        if args.cliffs is not None:
            spec = CliffPairSpec(args.epsilon, args.gap, args.cliffs, 1.0, args.targets,
                                 args.ligands, args.dim, args.noise)
            assays, store, manifest = generate_cliff_pairs(spec, args.seed)
            text = "".join(json.dumps(m, separators=(",", ":")) + "\n" for m in manifest)
            atomic_write(out / "pairs.jsonl", text.encode("utf-8"))
            written.append(out / "pairs.jsonl")
        else:
            assays, store = generate_synthetic(args.targets, args.ligands, args.dim,
                                               args.noise, args.seed)
    except ValueError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from None
    write_assays(out / "assays.jsonl", assays)
    write_features(out / "features.bin", store)
    written += [out / "assays.jsonl", out / "features.bin"]
    if fractions:
        try:
            parts = split_assays(assays, fractions, args.seed)
        except ValueError as exc:
            raise _Fail(EXIT_CONFIG, str(exc)) from None
        for name, part in zip(("train", "val", "test"), parts):
            write_assays(out / f"{name}.jsonl", part)
            written.append(out / f"{name}.jsonl")
    for p in sorted(written):
        print(f"{_sha256(p)}  {p.name}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_schema_flags(parser):
    groups = {}
    for key in SCHEMA:
        if key.group not in groups:
            groups[key.group] = parser.add_argument_group(f"{key.group} keys")
        default = "quartiles of the training set" if key.name == "thresholds" else key.default
        groups[key.group].add_argument(
            f"--{key.name.replace('_', '-')}", dest=key.name, default=None, metavar="V",
            help=f"{key.help} (default: {default})")


def _positive_int(text) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hypseek", description="Hyperbolic pocket-ligand embedding toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the projection heads",
                       description="Train on an assay file. Every key below may also be set "
                                   "as 'key = value' in the --config file; flags win.")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--resume", metavar="STATE", help="resume from a saved training state")
    p.add_argument("--save-state", metavar="STATE", help="write the final training state here")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("screen", help="rank each target's ligands and write a report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--assays", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--threads", type=_positive_int, default=1,
                   help="worker count (accepted; scoring is single-threaded)")
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("rank", help="per-assay Pearson/Spearman of scores against affinities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--assays", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--output", help="also write the table to this file")
    p.add_argument("--threads", type=_positive_int, default=1,
                   help="worker count (accepted; scoring is single-threaded)")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("geomcheck", help="run the geometry and gradient self-checks")
    p.add_argument("--theta", help="comma-separated angles for the small-angle check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_geomcheck)

    p = sub.add_parser("synth", help="write a synthetic assay + feature fixture")
    p.add_argument("--targets", type=int, default=20)
    p.add_argument("--ligands", type=int, default=50, help="ligands per assay")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--cliffs", type=int, help="number of activity-cliff pairs to add")
    p.add_argument("--epsilon", type=float, default=0.01, help="feature distance within a pair")
    p.add_argument("--gap", type=float, default=3.0, help="affinity gap within a pair")
    p.add_argument("--split", help="train,val,test fractions for a target-disjoint split")
    p.add_argument("--output", default=".", help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"hypseek {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
