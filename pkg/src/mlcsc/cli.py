"""Command-line harness: ``mlcsc <command> [flags]``.

Commands: sample, recover, train, mterm, bounds, coherence, project,
pursue.  Every command reads/writes the package's binary model and
signal containers plus schema-first CSV; plotting is out of scope (the
CSVs are the interface).  A TOML config file can pre-set any flag
(top-level keys, optionally overridden inside a table named after the
command); explicit flags always win.  Stochastic commands require a
seed, and a rerun with the same inputs reproduces output files byte for
byte apart from the leading timestamp comment.
"""

import argparse
import math
import os
import sys
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import analysis, experiments, io, learning
from .errors import MLCSCError
from .model import membership, ml_csc_project, ml_csc_pursuit, sample
from .pursuit import PursuitConfig
from .vectors import DenseVec, Geometry

_STOCHASTIC = ("sample", "recover", "train")

# real defaults live here, not in argparse: parsed flags left at None
# fall through to the config file and then to this table, so an
# explicit flag always beats the file
_DEFAULTS = {
    "sample": {"count": 100, "nnz": 5, "sigma": 0.0, "threads": None},
    "recover": {"kmin": 2, "kmax": 10, "trials": 100, "sigma": 0.02,
                "threads": None},
    "train": {"epochs": 20, "batch_size": 100, "eta": 1.0, "momentum": 0.9,
              "iota": 1e-3, "inner_iters": 1, "lambda_l1": None,
              "target_nnz": 15.0, "fista_iters": 60, "arch": None,
              "zetas": None, "init": None, "center": False, "limit": None,
              "threads": None},
    "mterm": {"ks": "5,10,15,25", "iters": 100, "limit": None,
              "center": False, "threads": None},
    "bounds": {"e0": 1.0, "eps0": None, "gamma_min": 1.0, "nnz_patch": 1,
               "lambdas": None, "threads": None},
    "coherence": {"threads": None},
    "project": {"threads": None},
    "pursue": {"coder": "omp", "k": None, "lambda_l1": None,
               "threads": None},
}


def _timestamp_comment():
    return time.strftime("generated %Y-%m-%dT%H:%M:%S", time.gmtime())


def _require_file(path, what):
    if path is None:
        raise MLCSCError(f"missing required {what} path")
    if not os.path.isfile(path):
        raise MLCSCError(f"{what} file not found: {path}")
    return path


def _load_dataset(path, center=False):
    """Signal matrix (count, size) from either container: the native
    f64 matrix, or an IDX image tensor scaled to [0, 1] and flattened.
    ``center`` subtracts the mean image."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == io.SIGNAL_MAGIC:
        data = io.load_signals(path)
    else:
        images = io.read_idx_images(path)
        data = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if center and data.shape[0]:
        data = data - data.mean(axis=0)
    return data


def _parse_int_list(text):
    return [int(tok) for tok in text.split(",") if tok.strip() != ""]


def _parse_zetas(text):
    """Comma list of per-layer policies: '0.03' or 'frac:0.03' keep a
    fraction, 'mag:0.5' thresholds by magnitude, 'count:3' keeps per
    filter, 'none' skips the layer."""
    policies = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok in ("", "none"):
            policies.append(None)
        elif tok.startswith("mag:"):
            policies.append(learning.ZetaPolicy("magnitude", float(tok[4:])))
        elif tok.startswith("count:"):
            policies.append(learning.ZetaPolicy("count", int(tok[6:])))
        elif tok.startswith("frac:"):
            policies.append(learning.ZetaPolicy("fraction", float(tok[5:])))
        else:
            policies.append(learning.ZetaPolicy("fraction", float(tok)))
    return tuple(policies)


def _parse_arch(text):
    """Architecture string '8x7s2,32x5s1' -> ((filters, n, stride), ...)."""
    specs = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        m_part, rest = tok.split("x", 1)
        if "s" in rest:
            n_part, s_part = rest.split("s", 1)
        else:
            n_part, s_part = rest, "1"
        specs.append((int(m_part), int(n_part), int(s_part)))
    return tuple(specs)


def _sqrt_or_blank(value):
    if value is None:
        return None
    return math.sqrt(value) if value >= 0 else None


# ----------------------------------------------------------------------
# commands


def cmd_sample(opt):
    model = io.load_model(_require_file(opt.model, "model"))
    os.makedirs(opt.out, exist_ok=True)
    rng = np.random.default_rng(opt.seed)
    signals = np.empty((opt.count, model.signal_geom.size))
    stacks = []
    ok = 0
    for s in range(opt.count):
        y, stack = sample(model, rng, nnz=opt.nnz, noise_sigma=opt.sigma)
        signals[s] = y.data
        stacks.append(stack)
        ok += membership(model, stack).ok
    io.save_signals(os.path.join(opt.out, "signals.bin"), signals)
    io.write_stacks_csv(
        os.path.join(opt.out, "stacks.csv"), stacks, [_timestamp_comment()]
    )
    print(f"sampled {opt.count} signals; {ok}/{opt.count} stacks pass membership")
    print(f"wrote {opt.out}/signals.bin and {opt.out}/stacks.csv")


def cmd_recover(opt):
    model = io.load_model(_require_file(opt.model, "model"))
    ks = list(range(opt.kmin, opt.kmax + 1))
    rows, mu = experiments.recovery_experiment(
        model, ks, opt.trials, opt.sigma, opt.seed,
        threads=opt.threads or 1,
    )
    io.write_csv(
        opt.out,
        ("method", "k", "layer", "mean_intersection", "mean_l2_rel_err",
         "trials", "certified", "cert_support_ok", "cert_bound_ok"),
        [(r.method, r.k, r.layer, r.mean_intersection, r.mean_l2_rel_err,
          r.trials, r.certified, r.cert_support_ok, r.cert_bound_ok)
         for r in rows],
        [_timestamp_comment(), f"mu_effective_last {mu!r}",
         f"sigma {opt.sigma!r} seed {opt.seed}"],
    )
    print(f"wrote {opt.out} ({len(rows)} rows, mu(D^(L)) = {mu:.4f})")


def cmd_train(opt):
    data = _load_dataset(_require_file(opt.data, "dataset"), center=opt.center)
    if opt.limit is not None:
        data = data[: opt.limit]
    zetas = _parse_zetas(opt.zetas) if opt.zetas else ()
    rng = np.random.default_rng(opt.seed)
    if opt.init is not None:
        model = io.load_model(_require_file(opt.init, "initial model"))
    else:
        if opt.arch is None:
            raise MLCSCError("train needs --arch (or --init with a checkpoint)")
        specs = _parse_arch(opt.arch)
        geom = Geometry(data.shape[1], 1)
        lambdas = []
        spatial = geom.spatial_len
        for m, _, s in specs:
            spatial //= s
            lambdas.append(spatial * m)
        model = learning.random_model(
            rng, geom, specs, lambdas,
            policies=zetas if zetas else None,
        )
    config = learning.LearnConfig(
        epochs=opt.epochs, batch_size=opt.batch_size, eta=opt.eta,
        momentum=opt.momentum, T=opt.inner_iters, iota=opt.iota,
        lambda_l1=opt.lambda_l1, target_nnz=opt.target_nnz, zetas=zetas,
        fista_iters=opt.fista_iters, seed=opt.seed,
    )
    model, trace = learning.train(data, model, config)
    os.makedirs(opt.out, exist_ok=True)
    io.save_model(model, os.path.join(opt.out, "model.mlcsc"))
    io.write_csv(
        os.path.join(opt.out, "trace.csv"),
        ("epoch", "loss", "data_term", "mean_residual", "mean_code_nnz",
         "layer", "kernel_sparsity"),
        trace.rows(),
        [_timestamp_comment(), f"lambda_l1 {trace.lambda_used!r}"],
    )
    with open(os.path.join(opt.out, "train_config.txt"), "w") as f:
        for name in sorted(learning.LearnConfig.__dataclass_fields__):
            f.write(f"{name} = {getattr(config, name)!r}\n")
        f.write(f"lambda_used = {trace.lambda_used!r}\n")
    print(f"trained {config.epochs} epochs on {data.shape[0]} samples")
    if trace.records:
        first, last = trace.records[0], trace.records[-1]
        print(f"loss {first.loss:.6g} -> {last.loss:.6g}; "
              f"mean residual {first.mean_residual:.6g} -> {last.mean_residual:.6g}")
    print(f"wrote {opt.out}/model.mlcsc, {opt.out}/trace.csv, "
          f"{opt.out}/train_config.txt")


def cmd_mterm(opt):
    model = io.load_model(_require_file(opt.model, "model"))
    data = _load_dataset(_require_file(opt.data, "dataset"), center=opt.center)
    if opt.limit is not None:
        data = data[: opt.limit]
    ks = _parse_int_list(opt.ks)
    points = experiments.mterm_curve(model, data, ks, iters=opt.iters)
    errs = [p.mean_rel_err for p in points]
    monotone = all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    io.write_csv(
        opt.out,
        ("k", "mean_rel_err"),
        [(p.k, p.mean_rel_err) for p in points],
        [_timestamp_comment(), f"samples {data.shape[0]}",
         f"non_increasing {monotone}"],
    )
    print(f"wrote {opt.out}; non-increasing curve: {monotone}")


def cmd_bounds(opt):
    model = io.load_model(_require_file(opt.model, "model"))
    lambdas = _parse_int_list(opt.lambdas) if opt.lambdas else None
    eps0 = opt.e0 if opt.eps0 is None else opt.eps0
    reports = [
        analysis.bound_thm4(model, lambdas, opt.e0),
        analysis.bound_thm4_alt(model, lambdas, opt.e0),
        analysis.bound_thm6(model, lambdas, eps0, opt.nnz_patch),
        analysis.bound_thm7(model, lambdas, opt.e0, opt.gamma_min, eps0=eps0),
        analysis.bound_dcp_layered(model, lambdas, opt.e0),
    ]
    rows = []
    comments = [_timestamp_comment(),
                f"E0 {opt.e0!r} eps0 {eps0!r} gamma_min {opt.gamma_min!r} "
                f"nnz_patch {opt.nnz_patch}"]
    for rep in reports:
        for lb in rep.per_layer:
            rows.append((rep.name, lb.layer, lb.value,
                         _sqrt_or_blank(lb.value), lb.hypothesis_ok, rep.units))
        for key, val in rep.extras.items():
            if isinstance(val, (tuple, list)):
                val = ",".join("" if v is None else str(v) for v in val)
            elif val is None:
                val = "n/a"
            comments.append(f"{rep.name} {key} {val}")
    io.write_csv(
        opt.out,
        ("bound", "layer", "value", "sqrt_value", "hypothesis_ok", "units"),
        rows, comments,
    )
    print(f"wrote {opt.out} ({len(rows)} bound rows)")


def cmd_coherence(opt):
    model = io.load_model(_require_file(opt.model, "model"))
    rep = analysis.coherence_report(model)
    rows = [
        (i + 1, rep.layer_mu[i], rep.layer_threshold[i],
         rep.effective_mu[i], rep.effective_threshold[i])
        for i in range(model.depth)
    ]
    io.write_csv(
        opt.out,
        ("layer", "mu_layer", "threshold_layer", "mu_effective",
         "threshold_effective"),
        rows, [_timestamp_comment()],
    )
    print(f"wrote {opt.out}")
    for row in rows:
        print("layer {}: mu={:.6f} (edge {:.3f}), mu_eff={:.6f} (edge {:.3f})"
              .format(row[0], row[1], row[2], row[3], row[4]))


def cmd_project(opt):
    model = io.load_model(_require_file(opt.model, "model"))
    data = io.load_signals(_require_file(opt.signals, "signals"))
    rows = []
    members = 0
    for s in range(data.shape[0]):
        y = DenseVec(model.signal_geom, data[s])
        out = ml_csc_project(y, model)
        members += out.membership.ok
        for step in out.trace:
            rows.append((s, step.k, int(step.accepted), step.residual_norm,
                         step.support_size, step.violated_layer,
                         int(out.membership.ok), out.residual_norm))
    io.write_csv(
        opt.out,
        ("signal", "k", "accepted", "residual_norm", "support_size",
         "violated_layer", "final_member", "final_residual"),
        rows, [_timestamp_comment()],
    )
    print(f"wrote {opt.out}; {members}/{data.shape[0]} projections in the model")


def cmd_pursue(opt):
    model = io.load_model(_require_file(opt.model, "model"))
    data = io.load_signals(_require_file(opt.signals, "signals"))
    config = PursuitConfig(k=opt.k, lambda_l1=opt.lambda_l1)
    rows = []
    for s in range(data.shape[0]):
        y = DenseVec(model.signal_geom, data[s])
        out = ml_csc_pursuit(y, model, coder=opt.coder, config=config)
        for i, gamma in enumerate(out.stack.gammas, start=1):
            rows.append((s, i, gamma.nnz, out.result.residual_norm,
                         int(out.membership.ok), out.result.stop_reason))
    io.write_csv(
        opt.out,
        ("signal", "layer", "nnz", "residual_norm", "member", "stop_reason"),
        rows, [_timestamp_comment(), f"coder {opt.coder}"],
    )
    print(f"wrote {opt.out} ({data.shape[0]} signals, coder {opt.coder})")


# ----------------------------------------------------------------------
# argument plumbing


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mlcsc",
        description="Multi-layer convolutional sparse coding toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True, out_required=True):
        if model:
            p.add_argument("--model", help="model container path")
        p.add_argument("--out", required=out_required, help="output path")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--threads", type=int, help="worker pool size")
        p.add_argument("--config", help="TOML config file (flags win)")

    p = sub.add_parser("sample", help="draw in-model signals")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--nnz", type=int)
    p.add_argument("--sigma", type=float)

    p = sub.add_parser("recover", help="recovery method comparison sweep")
    common(p)
    p.add_argument("--kmin", type=int)
    p.add_argument("--kmax", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--sigma", type=float)

    p = sub.add_parser("train", help="dictionary learning")
    common(p, model=False)
    p.add_argument("--data", help="dataset (signal matrix or IDX images)")
    p.add_argument("--center", action="store_const", const=True,
                   help="subtract the mean image")
    p.add_argument("--init", help="initial model checkpoint")
    p.add_argument("--arch", help="architecture, e.g. 8x7s2,32x5s1,128x7s1")
    p.add_argument("--zetas", help="per-layer kernel sparsity, e.g. 0.03,0.01")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--eta", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--iota", type=float)
    p.add_argument("--inner-iters", type=int, dest="inner_iters")
    p.add_argument("--lambda-l1", type=float, dest="lambda_l1")
    p.add_argument("--target-nnz", type=float, dest="target_nnz")
    p.add_argument("--fista-iters", type=int, dest="fista_iters")
    p.add_argument("--limit", type=int, help="cap the sample count")

    p = sub.add_parser("mterm", help="error vs retained-coefficient budget")
    common(p)
    p.add_argument("--data", help="dataset (signal matrix or IDX images)")
    p.add_argument("--center", action="store_const", const=True)
    p.add_argument("--ks", help="comma list of budgets")
    p.add_argument("--iters", type=int)
    p.add_argument("--limit", type=int)

    p = sub.add_parser("bounds", help="tabulate the stability bounds")
    common(p)
    p.add_argument("--e0", type=float)
    p.add_argument("--eps0", type=float)
    p.add_argument("--gamma-min", type=float, dest="gamma_min")
    p.add_argument("--nnz-patch", type=int, dest="nnz_patch")
    p.add_argument("--lambdas", help="comma list overriding the model caps")

    p = sub.add_parser("coherence", help="per-layer and effective coherence")
    common(p)

    p = sub.add_parser("project", help="project signals onto the model set")
    common(p)
    p.add_argument("--signals", help="signal matrix path")

    p = sub.add_parser("pursue", help="effective-dictionary pursuit")
    common(p)
    p.add_argument("--signals", help="signal matrix path")
    p.add_argument("--coder", choices=("omp", "sp", "fista", "iht"))
    p.add_argument("--k", type=int)
    p.add_argument("--lambda-l1", type=float, dest="lambda_l1")

    return parser


def _merge_config(opt):
    """Fill still-None options from the TOML file, then from defaults."""
    table = {}
    if opt.config:
        with open(_require_file(opt.config, "config"), "rb") as f:
            loaded = tomllib.load(f)
        table = dict(loaded)
        table.update(loaded.get(opt.command, {})
                     if isinstance(loaded.get(opt.command), dict) else {})
    for key, value in table.items():
        if isinstance(value, dict):
            continue
        if hasattr(opt, key) and getattr(opt, key) is None:
            setattr(opt, key, value)
    for key, value in _DEFAULTS.get(opt.command, {}).items():
        if getattr(opt, key, None) is None:
            setattr(opt, key, value)
    return opt


def main(argv=None):
    parser = _build_parser()
    opt = parser.parse_args(argv)
    handler = {
        "sample": cmd_sample,
        "recover": cmd_recover,
        "train": cmd_train,
        "mterm": cmd_mterm,
        "bounds": cmd_bounds,
        "coherence": cmd_coherence,
        "project": cmd_project,
        "pursue": cmd_pursue,
    }[opt.command]
    try:
        opt = _merge_config(opt)
        if opt.command in _STOCHASTIC and opt.seed is None:
            parser.error(f"--seed is required for '{opt.command}'")
        handler(opt)
    except MLCSCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
