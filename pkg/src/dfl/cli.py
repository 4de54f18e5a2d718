"""Command-line entry point: ``dfl run | sweep-rho | cov-sign | validate-theory | serve-tp``.

Every experiment key can come from a flat YAML file (``--config``) and be
overridden by the flag of the same name. Precedence: flag > file > default.
"""

import argparse
import logging
import os
import signal
import sys
import threading
from dataclasses import MISSING, fields

import yaml

from dfl import harness
from dfl.protocol import ENV_ADDR, PolicyDefaults, TPService

log = logging.getLogger("dfl")

DEFAULT_GRID = "0.0005,0.001,0.002,0.004,0.008,0.016,0.05"

# flag types for fields whose default is None
_NONE_TYPES = {"schema": str, "gamma": float}


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_config_flags(parser):
    group = parser.add_argument_group("experiment (overrides --config)")
    for f in fields(harness.ExperimentConfig):
        default = f.default if f.default is not MISSING else None
        kind = _NONE_TYPES.get(f.name) or type(default)
        if kind is bool:
            kind = _bool
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=kind,
                           default=None, metavar=kind.__name__.upper().lstrip("_"),
                           help=f"default: {default}")
    group.add_argument("--tp-addr", dest="cfg_tp", default=None,
                       help=f"third party: in-process, memory, host:port, or remote "
                            f"(address from {ENV_ADDR})")
    parser.add_argument("--config", help="flat YAML file of experiment keys")
    parser.add_argument("--out-dir", default=".", help="where CSVs and the manifest go")


def resolve_config(args):
    """Defaults, then the config file, then explicit flags."""
    cfg = harness.ExperimentConfig()
    if args.config:
        cfg = harness.load_config(args.config, cfg)
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return harness.config_from_mapping(flags, cfg) if flags else cfg


def _write(out_dir, name, text):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _manifest(args, cfg):
    inputs = [args.config] if args.config else []
    _write(args.out_dir, "run-manifest.txt", harness.manifest_text(cfg, args.command, inputs))


def cmd_run(args):
    cfg = resolve_config(args)
    res = harness.run(cfg)
    path = _write(args.out_dir, "results.csv", res.to_csv())
    _manifest(args, cfg)
    summ = res.summary
    print(f"{len(res.succeeded)}/{cfg.trials} trials ok; "
          f"SP {summ['sp'][0]:.4f}  err {summ['classifier_error'][0]:.4f}  -> {path}")
    return 0


def cmd_sweep(args):
    cfg = resolve_config(args)
    grid = [float(x) for x in args.grid.split(",") if x.strip()]
    if not grid:
        raise ValueError("empty rho grid")
    sweep = harness.sweep_rho(cfg, grid)
    path = _write(args.out_dir, "sweep_rho.csv", sweep.to_csv())
    _manifest(args, cfg)
    print(f"{len(grid)} grid points -> {path}")
    return 0


def cmd_cov_sign(args):
    cfg = resolve_config(args)
    res = harness.cov_sign_diagnostic(cfg, args.trials_override)
    path = _write(args.out_dir, "cov_sign.csv", res.to_csv())
    _manifest(args, cfg)
    print(f"fraction of positive cov(f(x), s): {res.fraction_positive:.3f} -> {path}")
    return 0


def _parse_params(pairs):
    """``name.key=value`` pairs into {name: {key: value}}; values parsed as YAML."""
    params = {}
    for pair in pairs:
        lhs, sep, rhs = pair.partition("=")
        name, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise ValueError(f"expected validator.key=value, got {pair!r}")
        val = yaml.safe_load(rhs)
        params.setdefault(name, {})[key] = tuple(val) if isinstance(val, list) else val
    return params


def cmd_validate(args):
    reports, passed = harness.validate_theory(args.which, _parse_params(args.set), args.out_dir)
    for rep in reports:
        print(rep.to_text(), end="")
    print("all required validators passed" if passed else "VALIDATION FAILED")
    return 0 if passed else 1


def cmd_serve(args):
    cfg = resolve_config(args)
    bind = args.bind or os.environ.get(ENV_ADDR) or "127.0.0.1:0"
    ds = harness.load_dataset(cfg)
    defaults = PolicyDefaults(rho=cfg.rho, sigma2=cfg.sigma2)
    stop = threading.Event()
    with TPService(ds.sensitive, bind, defaults, seed=cfg.seed) as svc:
        host, port = svc.address
        print(f"third party listening on {host}:{port} (n={ds.n})", flush=True)
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
        while not stop.is_set():
            if args.max_sessions and svc.sessions_served >= args.max_sessions:
                break
            stop.wait(0.1)
        served = svc.sessions_served
    print(f"served {served} sessions", flush=True)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="dfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="multi-trial experiment, one CSV row per trial")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-rho", help="one run per threshold on paired seeds")
    _add_config_flags(p)
    p.add_argument("--grid", default=DEFAULT_GRID, help="comma-separated rho values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cov-sign", help="signed cov(f(x), s) per trial")
    _add_config_flags(p)
    p.add_argument("--n-trials", dest="trials_override", type=int, default=None)
    p.set_defaults(func=cmd_cov_sign)

    p = sub.add_parser("validate-theory", help="Monte Carlo checks of the bounds")
    p.add_argument("which", nargs="?", default="all",
                   choices=["all", *harness.VALIDATORS])
    p.add_argument("--set", action="append", default=[], metavar="NAME.KEY=VALUE",
                   help="validator keyword override, e.g. lemma2.trials=200")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("serve-tp", help="run the third-party service for a dataset")
    _add_config_flags(p)
    p.add_argument("--bind", default=None, help=f"host:port (default {ENV_ADDR} or an ephemeral port)")
    p.add_argument("--max-sessions", type=int, default=0, help="exit after this many sessions")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"dfl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
