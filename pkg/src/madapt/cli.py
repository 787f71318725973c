"""Command-line entry point.

    madapt gen-data  --config run.json
    madapt pretrain  --config run.json
    madapt dedicated --config run.json --all-subsets
    madapt adapt     --config run.json --all-subsets [--kind all]
    madapt eval      --config run.json --arms pretrained,duplication,dedicated,adapted --subset 0
    madapt cossim    --config run.json --subset 0
    madapt params    --config run.json --kind scale_shift --subset 0
    madapt report    --config run.json

Artifacts default to locations under the config's ``workdir``; ``--out``
redirects the command's output. Exit status is 0 on success, 2 for usage
errors (bad flags, unreadable config, missing inputs) and 1 for runtime
failures. ``MADAPT_SEED`` sets the seed when neither ``--seed`` nor the
config does.
"""

import argparse
import os
import sys
from pathlib import Path

from .adapters import ALL_KINDS, AdapterKind, count_learnable, total_model_parameters
from .errors import MadaptError, ValidationError
from .evaluation import EvalArm, cosine_similarity_analysis, evaluate_arm
from .io import (
    RunConfig,
    load_bank,
    load_dataset,
    load_theta,
    save_bank,
    save_dataset,
    save_theta,
)
from .model import ModalitySubset
from .report import (
    COSSIM_COLUMNS,
    PARAM_COLUMNS,
    RESULT_COLUMNS,
    emit_report,
    format_table,
    load_rows,
    sort_results,
)
from .synth import generate
from .training import adapt, pretrain, train_dedicated

COMMANDS = ("gen-data", "pretrain", "dedicated", "adapt", "eval", "cossim", "params", "report")


class UsageError(MadaptError):
    pass


class MissingInput(UsageError):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="madapt", description="Missing-modality adapter toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--seed", type=int, help="override the run seed")
        s.add_argument("--subset", help="available modalities, comma separated (e.g. 0,2)")
        s.add_argument("--kind", help="adapter kind, comma list, or 'all'")
        s.add_argument("--out", help="output path (file or prefix; directory with --all-subsets)")
        s.add_argument("--data", help="dataset container to read")
        s.add_argument("--theta", help="pretrained checkpoint to read")
        s.add_argument("--banks", help="directory holding <kind>/S<mask>.mmad banks")
        s.add_argument("--dedicated-dir", help="directory holding S<mask>.mmad dedicated models")
        if name in ("dedicated", "adapt", "eval", "cossim", "params"):
            s.add_argument("--all-subsets", action="store_true",
                           help="iterate every proper non-empty subset")
        if name == "eval":
            s.add_argument("--arms", help="comma list of arms")
        if name == "report":
            s.add_argument("--inputs", nargs="+", help="eval JSON files to merge")
    return p


class Context:
    def __init__(self, args):
        env = os.environ.get("MADAPT_SEED")
        env_seed = None
        if env is not None:
            try:
                env_seed = int(env)
            except ValueError:
                raise UsageError(f"MADAPT_SEED must be an integer, got {env!r}") from None
        try:
            self.cfg = RunConfig.load(args.config, env_seed)
        except FileNotFoundError as exc:
            raise MissingInput(str(exc)) from None
        except (ValidationError, TypeError) as exc:
            raise UsageError(f"invalid config: {exc}") from None
        if args.seed is not None:
            self.cfg.seed = args.seed
        self.args = args
        self.work = Path(self.cfg.workdir)
        self.spec = self.cfg.model_spec()
        self.M = self.spec.num_modalities

    # locations
    def data_path(self):
        return Path(self.args.data) if self.args.data else self.work / "dataset.mmad"

    def theta_path(self):
        return Path(self.args.theta) if self.args.theta else self.work / "theta.mmad"

    def banks_dir(self):
        return Path(self.args.banks) if self.args.banks else self.work / "banks"

    def dedicated_dir(self):
        d = getattr(self.args, "dedicated_dir", None)
        return Path(d) if d else self.work / "dedicated"

    def reports_dir(self):
        return self.work / "reports"

    # inputs
    def _need(self, path, what):
        if not Path(path).is_file():
            raise MissingInput(f"missing {what}: {path}")
        return path

    def dataset(self):
        return load_dataset(self._need(self.data_path(), "dataset (run gen-data first)"))

    def theta(self):
        return load_theta(self._need(self.theta_path(), "pretrained checkpoint (run pretrain first)"))

    def bank(self, kind, subset):
        path = self.banks_dir() / kind.value / f"S{subset.mask}.mmad"
        return load_bank(self._need(path, f"{kind.value} bank for subset {subset.label()}"))

    def dedicated(self, subset):
        path = self.dedicated_dir() / f"S{subset.mask}.mmad"
        return load_theta(self._need(path, f"dedicated model for subset {subset.label()}"))

    # flags
    def subsets(self, default_all=False):
        all_flag = getattr(self.args, "all_subsets", False)
        if all_flag and self.args.subset:
            raise UsageError("--subset and --all-subsets are mutually exclusive")
        if all_flag:
            from .adapters import enumerate_subsets

            return enumerate_subsets(self.M)
        if self.args.subset:
            try:
                idx = [int(v) for v in self.args.subset.split(",") if v.strip()]
            except ValueError:
                raise UsageError(f"--subset must be comma-separated integers, got {self.args.subset!r}") from None
            try:
                s = ModalitySubset.of(idx, self.M)
            except ValidationError as exc:
                raise UsageError(str(exc)) from None
            if s.is_empty:
                raise UsageError("--subset must name at least one modality")
            return [s]
        if default_all:
            return self.cfg.subset_list()
        raise UsageError("give --subset or --all-subsets")

    def kinds(self):
        raw = self.args.kind or self.cfg.kind
        if raw.strip().lower() == "all":
            return list(ALL_KINDS)
        try:
            return [AdapterKind.parse(k) for k in raw.split(",") if k.strip()]
        except ValidationError as exc:
            raise UsageError(str(exc)) from None

    def out(self, default):
        return Path(self.args.out) if self.args.out else default


def _cmd_gen_data(ctx):
    ds = generate(ctx.cfg.task_config())
    path = save_dataset(ds, ctx.out(ctx.data_path()))
    print(f"wrote {path} checksum={ds.checksum()}")


def _print_log(log):
    for line in log.lines():
        print(line)


def _cmd_pretrain(ctx):
    ds = ctx.dataset()
    theta, log = pretrain(ctx.spec, ds.train, ctx.cfg.train_config("pretrain"))
    _print_log(log)
    path = save_theta(theta.freeze(), ctx.out(ctx.theta_path()))
    print(f"wrote {path}")


def _single_out(ctx, subsets, kinds=(None,)):
    """True when --out names one file rather than a directory."""
    return bool(ctx.args.out) and len(subsets) == 1 and len(kinds) == 1 and not ctx.args.all_subsets


def _cmd_dedicated(ctx):
    ds = ctx.dataset()
    subsets = ctx.subsets()
    single = _single_out(ctx, subsets)
    base = Path(ctx.args.out) if ctx.args.out else ctx.dedicated_dir()
    for s in subsets:
        theta, log = train_dedicated(ctx.spec, s, ds.train, ctx.cfg.train_config("pretrain"))
        _print_log(log)
        path = base if single else base / f"S{s.mask}.mmad"
        print(f"wrote {save_theta(theta.freeze(), path)}")


def _cmd_adapt(ctx):
    ds = ctx.dataset()
    theta = ctx.theta()
    subsets = ctx.subsets()
    kinds = ctx.kinds()
    single = _single_out(ctx, subsets, kinds)
    base = Path(ctx.args.out) if ctx.args.out else ctx.banks_dir()
    cfg = ctx.cfg.train_config("adapt_train")
    for kind in kinds:
        for s in subsets:
            bank, log = adapt(theta, s, kind, ds.train, cfg, rank=ctx.cfg.lora_rank)
            first, last = log.window_means()
            print(f"{kind.value} subset={s.label()} loss {first:.4f} -> {last:.4f}")
            path = base if single else base / kind.value / f"S{s.mask}.mmad"
            print(f"wrote {save_bank(bank, path)}")


def _eval_rows(ctx, ds, theta, subsets, arms, kinds):
    total = total_model_parameters(ctx.spec)
    rows = []
    for s in subsets:
        for arm in arms:
            base = {"subset": s.label(), "subset_mask": s.mask, "arm": arm.value}
            if arm is EvalArm.ADAPTED:
                for kind in kinds:
                    bank = ctx.bank(kind, s)
                    m = evaluate_arm(arm, s, ds.test, theta, bank=bank)
                    count, ratio = count_learnable(ctx.spec, s, kind, bank.rank)
                    rows.append({**base, "kind": kind.value, **m.as_row(), "learnable": count, "ratio": ratio})
                continue
            dedicated = ctx.dedicated(s) if arm is EvalArm.DEDICATED else None
            m = evaluate_arm(arm, s, ds.test, theta, dedicated=dedicated,
                             source=ctx.cfg.duplication_source)
            learnable, ratio = (total, 1.0) if arm is EvalArm.DEDICATED else (0, 0.0)
            rows.append({**base, "kind": "none", **m.as_row(), "learnable": learnable, "ratio": ratio})
    return sort_results(rows)


def _cmd_eval(ctx):
    arms_raw = ctx.args.arms.split(",") if ctx.args.arms else ctx.cfg.arms
    try:
        arms = [EvalArm.parse(a) for a in arms_raw if a.strip()]
    except MadaptError as exc:
        raise UsageError(str(exc)) from None
    subsets = ctx.subsets(default_all=True)
    kinds = ctx.kinds()
    ds = ctx.dataset()
    theta = ctx.theta()
    rows = _eval_rows(ctx, ds, theta, subsets, arms, kinds)
    print(format_table(rows, RESULT_COLUMNS))
    csv_path, _ = emit_report(rows, ctx.out(ctx.reports_dir() / "eval"))
    print(f"wrote {csv_path}")


def _cmd_cossim(ctx):
    subsets = ctx.subsets(default_all=True)
    kinds = ctx.kinds()
    ds = ctx.dataset()
    theta = ctx.theta()
    rows = []
    for kind in kinds:
        for s in subsets:
            rep = cosine_similarity_analysis(theta, ctx.bank(kind, s), s, ds.test)
            for r in rep.rows():
                rows.append({"subset": s.label(), "subset_mask": s.mask, "kind": kind.value, **r})
    print(format_table(rows, COSSIM_COLUMNS))
    csv_path, _ = emit_report(rows, ctx.out(ctx.reports_dir() / "cossim"), COSSIM_COLUMNS)
    print(f"wrote {csv_path}")


def _cmd_params(ctx):
    subsets = ctx.subsets(default_all=True)
    total = total_model_parameters(ctx.spec)
    rows = []
    for kind in ctx.kinds():
        for s in subsets:
            count, ratio = count_learnable(ctx.spec, s, kind, ctx.cfg.lora_rank)
            rows.append({"subset": s.label(), "subset_mask": s.mask, "kind": kind.value,
                         "learnable": count, "total": total, "ratio": ratio})
    for r in rows:
        print(f"kind={r['kind']} subset={r['subset']} count={r['learnable']} "
              f"total={r['total']} ratio={r['ratio']!r} percent={100 * r['ratio']:.4f}")
    if ctx.args.out:
        emit_report(rows, ctx.args.out, PARAM_COLUMNS)


def _cmd_report(ctx):
    inputs = ctx.args.inputs or [ctx.reports_dir() / "eval.json"]
    rows = []
    for path in inputs:
        if not Path(path).is_file():
            raise MissingInput(f"missing eval results: {path}")
        columns, part = load_rows(path)
        if columns != RESULT_COLUMNS:
            raise UsageError(f"{path} is not an eval result file")
        rows.extend(part)
    unique = {(r["subset_mask"], r["arm"], r["kind"]): r for r in rows}
    rows = sort_results(unique.values())
    print(format_table(rows, RESULT_COLUMNS))
    csv_path, _ = emit_report(rows, ctx.out(ctx.reports_dir() / "report"))
    print(f"wrote {csv_path}")


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "dedicated": _cmd_dedicated,
    "adapt": _cmd_adapt,
    "eval": _cmd_eval,
    "cossim": _cmd_cossim,
    "params": _cmd_params,
    "report": _cmd_report,
}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        ctx = Context(args)
        _HANDLERS[args.command](ctx)
    except UsageError as exc:
        print(f"madapt {args.command}: {exc}", file=sys.stderr)
        return 2
    except (MadaptError, OSError, KeyError) as exc:
        print(f"madapt {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


run_command = main


if __name__ == "__main__":
    sys.exit(main())
