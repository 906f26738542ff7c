"""Command-line interface.

Errors print a single line starting with ``EBPERR:`` to stderr.  Exit codes:
0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import metrics as M
from . import ndgrad as ng
from . import oracles as O
from . import trainer as T

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
# schedule-only settings; echoed in run reports but not stored in checkpoints
RUN_KEYS = ("iters", "checkpoint_every", "log_every")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config handling --------------------------------------------------------
def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines into a dict of raw strings."""
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{i}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _coerce(field, raw):
    default = field.default
    if isinstance(raw, str):
        raw = raw.strip()
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{field.name}: not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if isinstance(raw, (list, tuple)):
            return tuple(int(v) for v in raw)
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return str(raw)


def make_config(raw, overrides=None):
    fields = {f.name: f for f in dataclasses.fields(T.TrainConfig)}
    merged = dict(raw)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    kw = {}
    for key, val in merged.items():
        if key not in fields:
            raise DataError(f"unknown config key {key!r}")
        try:
            kw[key] = _coerce(fields[key], val)
        except ValueError as exc:
            raise DataError(f"bad value for {key}: {exc}") from exc
    try:
        return T.TrainConfig(**kw)
    except ValueError as exc:
        raise DataError(f"invalid config: {exc}") from exc


def _seed(args):
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("EBP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"EBP_SEED must be an integer, got {env!r}") from None
    return None


def _load_config(args):
    raw = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            raw = parse_config_text(fh.read(), args.config)
    over = {"seed": _seed(args)}
    for key in ("iters", "batch_size", "lr", "steps", "checkpoint_every"):
        over[key] = getattr(args, key, None)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip().replace("-", "_")] = v
    return make_config(raw, over)


def _save(path, state):
    """Checkpoint with the run-schedule keys reset, so the file only
    depends on model state."""
    cfg = state.config
    state.config = cfg.replace(**{k: getattr(T.TrainConfig, k) for k in RUN_KEYS})
    try:
        T.save_state(path, state)
    finally:
        state.config = cfg


def _load(path, **run):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    state = T.load_state(path)
    state.config = state.config.replace(**{k: v for k, v in run.items() if v is not None})
    return state


def _grid(spec):
    try:
        lo, hi, n = spec.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError:
        raise UsageError(f"grid must look like lo:hi:count, got {spec!r}") from None


def _read_pairs(path):
    """Read ``t,x`` pairs from a CSV with a header naming both columns."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"t", "x"} <= set(rows[0]):
        raise DataError(f"{path}: expected columns 't' and 'x'")
    try:
        t = np.array([float(r["t"]) for r in rows]).reshape(-1, 1)
        x = np.array([float(r["x"]) for r in rows]).reshape(-1, 1)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return t, x


# -- subcommands ------------------------------------------------------------
def cmd_init(args):
    cfg = _load_config(args)
    state = T.build_state(cfg, args.x_dim, args.kind, args.t_dim)
    _save(args.out, state)
    print(f"wrote {args.out}")


def cmd_gen_data(args):
    seed = _seed(args) or 0
    if args.what == "two-sine":
        t, x, mode = D.gen_two_sine(args.count, seed, noise_var=args.noise_var,
                                    noise_std=args.noise_std)
        D.write_two_sine_csv(args.out, t, x, mode)
        print(f"wrote {args.count} pairs to {args.out}")
    else:
        kinds = args.kinds.split(",")
        clouds, labels = D.shape_dataset(kinds, args.count, args.n, seed, args.scale)
        D.write_point_sets(args.out, clouds)
        print(f"wrote {len(clouds)} clouds ({','.join(sorted(set(labels)))}) to {args.out}")


def _write_run_report(out_dir, state):
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(state.config.to_dict(), fh, indent=1, sort_keys=True)


def cmd_train(args):
    cfg = _load_config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.kind == "unconditional":
        dataset = D.read_point_sets(args.data)
        x_dim, t_dim = dataset[0].shape[1], 1
        if len({c.shape for c in dataset}) == 1:
            dataset = np.stack(dataset)
    else:
        t, x, _ = D.read_two_sine_csv(args.data)
        k = args.task_size
        if len(t) < k:
            raise DataError(f"need at least {k} rows for one task")
        dataset = [(t[i:i + k, None], x[i:i + k, None]) for i in range(0, len(t) - k + 1, k)]
        x_dim, t_dim = 1, 1
    if args.resume:
        state = _load(args.resume, **{k: getattr(cfg, k) for k in RUN_KEYS})
        if state.kind != args.kind:
            raise DataError(f"checkpoint holds a {state.kind} model")
    else:
        state = T.build_state(cfg, x_dim, args.kind, t_dim)
    _write_run_report(args.out_dir, state)
    start = state.step

    def on_ckpt(st):
        _save(os.path.join(args.out_dir, f"step_{st.step:07d}.ebp"), st)

    try:
        T.train(dataset, state=state, on_checkpoint=on_ckpt)
    except T.TrainingDiverged as exc:
        T.write_history(os.path.join(args.out_dir, "loss.csv"), state.history, start)
        raise NumericalError(str(exc)) from exc
    T.write_history(os.path.join(args.out_dir, "loss.csv"), state.history, start)
    final = os.path.join(args.out_dir, "final.ebp")
    _save(final, state)
    print(f"trained {state.step - start} steps; wrote {final}")


def cmd_sample(args):
    state = _load(args.ckpt)
    if state.kind != "unconditional":
        raise DataError("sample needs an unconditional checkpoint")
    rng = np.random.default_rng(_seed(args) or 0)
    model, sampler = state.model, state.sampler
    sampler.first_order = True
    theta = ng.Tensor(rng.standard_normal((args.count, model.theta_dim)))
    out = sampler(lambda x: model.element_energy(x, theta), theta, args.n, rng, steps=args.steps)
    clouds = out.x.data
    if not np.all(np.isfinite(clouds)):
        raise NumericalError("sampler produced non-finite points")
    D.write_point_sets(args.out_dir, clouds, prefix="sample")
    print(f"wrote {len(clouds)} samples to {args.out_dir}")


def cmd_denoise(args):
    state = _load(args.ckpt)
    clean = D.read_point_set(args.input)
    seed = _seed(args) or 0
    noisy, mask = D.perturb(clean, args.r, args.s, seed)
    out = T.denoise(noisy, mask, state.model, args.steps, args.eta, args.noise_std,
                    args.clip, np.random.default_rng(seed))
    os.makedirs(args.out_dir, exist_ok=True)
    D.write_point_set(os.path.join(args.out_dir, "perturbed.pts"), noisy)
    D.write_point_set(os.path.join(args.out_dir, "denoised.pts"), out)
    np.savetxt(os.path.join(args.out_dir, "mask.txt"), mask.astype(int), fmt="%d")
    before, after = M.chamfer(noisy, clean), M.chamfer(out, clean)
    print("masked,cd_perturbed,cd_denoised")
    print(f"{int(mask.sum())},{before!r},{after!r}")


def cmd_eval_gen(args):
    gen, ref = D.read_point_sets(args.gen_dir), D.read_point_sets(args.ref_dir)
    rows = [("jsd", M.jsd_marginal(gen, ref, args.grid))]
    dists = ("cd", "emd") if args.distance == "both" else (args.distance,)
    for d in dists:
        mmd, cov = M.mmd_cov(gen, ref, d, args.squared, args.threads)
        rows += [(f"mmd_{d}", mmd), (f"cov_{d}", cov)]
    scale = {"jsd": 1e2, "mmd_cd": 1e3, "mmd_emd": 1e2, "cov_cd": 1e2, "cov_emd": 1e2}
    lines = ["metric,value"] + [f"{k},{v!r}" for k, v in rows]
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print()
    label = {"jsd": "JSD (x1e2)", "mmd_cd": "MMD-CD (x1e3)", "mmd_emd": "MMD-EMD (x1e2)",
             "cov_cd": "COV-CD (%)", "cov_emd": "COV-EMD (%)"}
    for k, v in rows:
        print(f"{label[k]:<16}{v * scale[k]:>12.4f}")


def cmd_heatmap(args):
    state = _load(args.ckpt)
    if state.kind != "conditional":
        raise DataError("heatmap needs a conditional checkpoint")
    ct, cx = _read_pairs(args.context) if args.context else (None, None)
    tg, xg = _grid(args.t_grid), _grid(args.x_grid)
    h = T.predictive_heatmap(tg, xg, ct, cx, state.model, args.samples, _seed(args) or 0)
    out = sys.stdout if args.out is None else open(args.out, "w", newline="")
    try:
        w = csv.writer(out)
        w.writerow(["t\\x"] + [repr(float(v)) for v in xg])
        for t, row in zip(tg, h):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    finally:
        if args.out is not None:
            out.close()


def cmd_oracle_check(args):
    seed = _seed(args) or 0
    rng = np.random.default_rng(seed)
    t = rng.uniform(-1.0, 1.0, (args.n, args.t_dim))
    kernel = O.KernelSpec(args.features, noise=args.noise, seed=seed)
    ok = True
    print("check,value,threshold,result")

    def report(name, value, thr, cond):
        nonlocal ok
        ok &= bool(cond)
        print(f"{name},{value:.6g},{thr},{'PASS' if cond else 'FAIL'}")

    if args.which == "gp":
        r = O.gp_latent_mc_check(t, kernel, args.samples, seed)
        report("gp_cov_gap", r.gap, 0.05, r.gap <= 0.05)
    else:
        r = O.tp_latent_mc_check(t, O.TPSpec(args.nu, args.gamma, kernel), args.samples, seed)
        report("tp_cov_gap", r.gap, 0.05, r.gap <= 0.05)
        if args.nu > 4:
            report("tp_excess_kurtosis_rel_err", r.kurtosis_rel_err, 0.2,
                   r.kurtosis_rel_err <= 0.2)
        g = O.tp_latent_mc_check(t, O.TPSpec(1e6, args.gamma, kernel), args.samples, seed)
        report("tp_gaussian_limit_gap", g.gap, 0.05, g.gap <= 0.05)
    if not ok:
        raise NumericalError(f"oracle-check {args.which} failed")


# -- argument parsing -------------------------------------------------------
def build_parser():
    p = _Parser(prog="ebp", description="Energy-based processes for sets and functions.")
    p.add_argument("--threads", type=int, default=1, help="worker pool cap")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=False):
        sp.add_argument("--seed", type=int, default=None, help="falls back to $EBP_SEED")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE")
            sp.add_argument("--iters", type=int)
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--steps", type=int, help="dynamics layers")
            sp.add_argument("--checkpoint-every", type=int)

    sp = sub.add_parser("init", help="write an initialization checkpoint")
    sp.add_argument("kind", choices=("unconditional", "conditional"))
    sp.add_argument("--x-dim", type=int, default=3)
    sp.add_argument("--t-dim", type=int, default=1)
    sp.add_argument("--out", required=True)
    common(sp, config=True)
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("gen-data", help="generate synthetic datasets")
    sp.add_argument("what", choices=("two-sine", "shape"))
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--out", required=True, help="CSV file (two-sine) or directory (shape)")
    sp.add_argument("--noise-var", type=float, default=0.1)
    sp.add_argument("--noise-std", type=float, default=None)
    sp.add_argument("--kinds", default="sphere")
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--scale", type=float, default=1.0)
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("kind", choices=("unconditional", "conditional"))
    sp.add_argument("--data", required=True, help="point-set directory or two-sine CSV")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--task-size", type=int, default=32, help="pairs per conditional task")
    common(sp, config=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="draw point sets from a trained model")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--out-dir", required=True)
    common(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("denoise", help="perturb a cloud and denoise it")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--r", type=float, default=0.25)
    sp.add_argument("--s", type=float, default=0.05)
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--eta", type=float, default=0.1)
    sp.add_argument("--noise-std", type=float, default=T.DENOISE_NOISE)
    sp.add_argument("--clip", type=float, default=T.DENOISE_CLIP)
    sp.add_argument("--out-dir", required=True)
    common(sp)
    sp.set_defaults(func=cmd_denoise)

    sp = sub.add_parser("eval-gen", help="JSD/MMD/COV between two directories of clouds")
    sp.add_argument("--gen-dir", required=True)
    sp.add_argument("--ref-dir", required=True)
    sp.add_argument("--grid", type=int, default=28)
    sp.add_argument("--distance", choices=("cd", "emd", "both"), default="both")
    sp.add_argument("--squared", action="store_true", help="squared distances in CD")
    sp.add_argument("--out", help="also write the CSV report here")
    sp.set_defaults(func=cmd_eval_gen)

    sp = sub.add_parser("heatmap", help="normalized predictive density matrix")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--context", help="CSV with t,x columns; omitted means prior")
    sp.add_argument("--t-grid", default="0:1:51")
    sp.add_argument("--x-grid", default="-2:2:81")
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_heatmap)

    sp = sub.add_parser("oracle-check", help="latent-construction Monte Carlo checks")
    sp.add_argument("which", choices=("gp", "tp"))
    sp.add_argument("--samples", type=int, default=None)
    sp.add_argument("--nu", type=float, default=8.0)
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--n", type=int, default=3)
    sp.add_argument("--t-dim", type=int, default=2)
    sp.add_argument("--features", choices=("linear", "rff", "zero"), default="linear")
    sp.add_argument("--noise", type=float, default=1.0)
    common(sp)
    sp.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        if getattr(args, "which", None) and args.samples is None:
            args.samples = 100_000 if args.which == "gp" else 1_000_000
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        code, msg = EXIT_USAGE, f"usage: {exc}"
    except (DataError, D.PointSetFormatError, ckpt.CheckpointError, FileNotFoundError,
            IsADirectoryError, KeyError) as exc:
        code, msg = EXIT_DATA, f"data: {exc}"
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical: {exc}"
    except ValueError as exc:
        code, msg = EXIT_DATA, f"data: {exc}"
    print(f"EBPERR: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
