"""Command-line front end.

Configuration is an INI file (``configparser`` dialect, ``key = value``
under ``[section]`` headers).  Recognised sections and keys::

    [problem]     d, s, lower, upper, rhs
    [ansatz]      kind, depth, width
    [quadrature]  h, n_points, skip, batch_count, chunk_rows
    [training]    epochs, lr, lr_decay, lr_decay_every, seeds, init_range,
                  divergence_factor
    [output]      dir, record_every, eval_every, test_points
    [sweep]       widths, depths, s, kinds      (only read by ``sweep``)

Lists are comma separated.  ``lower``/``upper`` default to -1/1 in every
coordinate.  Unknown sections or keys are rejected so typos do not pass
silently.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import math
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .ansatz import KINDS, ProblemSpec, as_flat, from_flat, read_checkpoint, trace_eval, write_checkpoint
from .core_ad import FnnShape, NonFiniteError, ShapeError
from .domain import Hypercube, halton_points, uniform_test_points
from .quadrature import DEFAULT_CHUNK_ROWS, sinc_integrate, sinc_scheme
from .reference import ModelProblem, convergence_order, solution_error
from .training import QuadConfig, TrainConfig, train

log = logging.getLogger("fracritz")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _words(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _join(values) -> str:
    return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in values)


@dataclass
class RunConfig:
    d: int = 2
    s: float = 0.5
    lower: tuple = ()
    upper: tuple = ()
    rhs: str = "sine"
    kind: str = "special"
    depth: int = 2
    width: int = 50
    h: float = 1.0 / 3.0
    n_points: int = 10_000
    skip: int = 0
    batch_count: int = 1
    chunk_rows: int = DEFAULT_CHUNK_ROWS
    epochs: int = 5000
    lr: float = TrainConfig.lr
    lr_decay: float = TrainConfig.lr_decay
    lr_decay_every: int = TrainConfig.lr_decay_every
    seeds: tuple = (0,)
    init_range: str = "standard"
    divergence_factor: float = TrainConfig.divergence_factor
    out_dir: str = "runs"
    record_every: int = 1
    eval_every: int = 100
    test_points: int = 10_000
    sweep_widths: tuple = ()
    sweep_depths: tuple = ()
    sweep_s: tuple = ()
    sweep_kinds: tuple = ()

    _SCHEMA = {
        "problem": {"d": ("d", int), "s": ("s", float), "lower": ("lower", _floats),
                    "upper": ("upper", _floats), "rhs": ("rhs", str)},
        "ansatz": {"kind": ("kind", str), "depth": ("depth", int), "width": ("width", int)},
        "quadrature": {"h": ("h", float), "n_points": ("n_points", int), "skip": ("skip", int),
                       "batch_count": ("batch_count", int), "chunk_rows": ("chunk_rows", int)},
        "training": {"epochs": ("epochs", int), "lr": ("lr", float), "lr_decay": ("lr_decay", float),
                     "lr_decay_every": ("lr_decay_every", int), "seeds": ("seeds", _ints),
                     "init_range": ("init_range", str),
                     "divergence_factor": ("divergence_factor", float)},
        "output": {"dir": ("out_dir", str), "record_every": ("record_every", int),
                   "eval_every": ("eval_every", int), "test_points": ("test_points", int)},
        "sweep": {"widths": ("sweep_widths", _ints), "depths": ("sweep_depths", _ints),
                  "s": ("sweep_s", _floats), "kinds": ("sweep_kinds", _words)},
    }

    def __post_init__(self):
        if not self.lower:
            self.lower = (-1.0,) * self.d
        if not self.upper:
            self.upper = (1.0,) * self.d
        for name in ("lower", "upper", "seeds", "sweep_widths", "sweep_depths", "sweep_s", "sweep_kinds"):
            setattr(self, name, tuple(getattr(self, name)))

    # -- parsing ------------------------------------------------------------
    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        values = {}
        for section in cp.sections():
            if section not in cls._SCHEMA:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, raw in cp.items(section):
                if key not in cls._SCHEMA[section]:
                    raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
                attr, conv = cls._SCHEMA[section][key]
                try:
                    values[attr] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}: [{section}] {key} = {raw!r}: {exc}") from exc
        cfg = cls(**values)
        cfg.validate(source)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text, str(path))

    def validate(self, source: str = "<config>") -> None:
        def bad(section, key, why):
            raise ConfigError(f"{source}: [{section}] {key}: {why}")

        if self.d < 1:
            bad("problem", "d", "must be >= 1")
        if not 0.0 < self.s < 1.0:
            bad("problem", "s", "must lie in (0, 1)")
        if len(self.lower) != self.d or len(self.upper) != self.d:
            bad("problem", "lower/upper", f"need {self.d} entries")
        if any(b <= a for a, b in zip(self.lower, self.upper)):
            bad("problem", "lower/upper", "need lower < upper in every coordinate")
        if self.rhs != "sine":
            bad("problem", "rhs", f"unknown right-hand side {self.rhs!r}")
        if self.kind not in KINDS:
            bad("ansatz", "kind", f"must be one of {', '.join(KINDS)}")
        if self.depth < 1 or self.width < 1:
            bad("ansatz", "depth/width", "must be >= 1")
        if not self.h > 0:
            bad("quadrature", "h", "must be > 0")
        if self.n_points < 1 or self.skip < 0 or self.chunk_rows < 1:
            bad("quadrature", "n_points/skip/chunk_rows", "out of range")
        if not 1 <= self.batch_count <= self.n_points:
            bad("quadrature", "batch_count", "must be in [1, n_points]")
        if not self.seeds:
            bad("training", "seeds", "empty list")
        if self.test_points < 1:
            bad("output", "test_points", "must be >= 1")
        if any(not 0.0 < v < 1.0 for v in self.sweep_s):
            bad("sweep", "s", "values must lie in (0, 1)")
        if any(k not in KINDS for k in self.sweep_kinds):
            bad("sweep", "kinds", f"must be among {', '.join(KINDS)}")
        try:
            self.train_config(self.seeds[0])
        except ValueError as exc:
            raise ConfigError(f"{source}: [training]/[output]: {exc}") from exc

    # -- serialization ------------------------------------------------------
    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in self._SCHEMA.items():
            entries = {}
            for key, (attr, _) in keys.items():
                value = getattr(self, attr)
                if isinstance(value, tuple):
                    if section == "sweep" and not value:
                        continue
                    entries[key] = _join(value)
                else:
                    entries[key] = repr(value) if isinstance(value, float) else str(value)
            if entries:
                cp[section] = entries
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    # -- derived objects ----------------------------------------------------
    def problem(self) -> ProblemSpec:
        return ProblemSpec(self.s, Hypercube(self.lower, self.upper), self.rhs)

    def shape(self) -> FnnShape:
        return FnnShape(self.depth, self.width, self.d + 1)

    def quad_config(self) -> QuadConfig:
        return QuadConfig(self.h, self.n_points, self.skip, self.chunk_rows)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_count=self.batch_count, lr=self.lr,
                           lr_decay=self.lr_decay, lr_decay_every=self.lr_decay_every, seed=seed,
                           record_every=self.record_every, eval_every=self.eval_every,
                           init_range=self.init_range, divergence_factor=self.divergence_factor)

    def model_problem(self) -> ModelProblem | None:
        mp = ModelProblem(self.d, self.s)
        return mp if self.rhs == "sine" and Hypercube(self.lower, self.upper) == mp.domain else None


# ---------------------------------------------------------------------------
# artifacts


def write_table(path: Path, header: list[str], rows, config_hash: str) -> None:
    """CSV with a config-hash comment line followed by a header row."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])


def history_rows(report) -> list:
    losses = dict(report.loss_history)
    errors = dict(report.error_history)
    return [(e, losses.get(e), errors.get(e)) for e in sorted(set(losses) | set(errors))]


def run_one(cfg: RunConfig, seed: int, out: Path) -> dict:
    spec = cfg.problem()
    mp = cfg.model_problem()
    test = uniform_test_points(spec.domain, cfg.test_points, seed) if mp is not None else None
    report = train(spec, cfg.kind, cfg.shape(), cfg.quad_config(), cfg.train_config(seed),
                   test_points=test, mp=mp)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out / "checkpoint.bin", report.params)
    info = report.to_dict()
    info.update(seed=seed, config_hash=cfg.config_hash, test_seed=seed)
    (out / "report.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    write_table(out / "history.csv", ["epoch", "loss", "error"], history_rows(report), cfg.config_hash)
    return {"seed": seed, "final_error": report.final_error, "seconds": report.seconds}


def _seeds(cfg: RunConfig, override: int | None) -> tuple:
    return (override,) if override is not None else cfg.seeds


def cmd_solve(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out_dir or cfg.out_dir)
    seeds = _seeds(cfg, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    for seed in seeds:
        target = out if len(seeds) == 1 else out / f"seed_{seed}"
        res = run_one(cfg, seed, target)
        print(f"seed {seed}: final e_l2 = {res['final_error']:.6e} ({res['seconds']:.1f} s) -> {target}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    params = read_checkpoint(args.checkpoint)
    kind, shape, _ = as_flat(params)
    if shape != cfg.shape() or kind != cfg.kind:
        raise ConfigError(f"checkpoint holds a {kind} net of {shape}, config expects "
                          f"{cfg.kind} of {cfg.shape()}")
    mp = cfg.model_problem()
    if mp is None:
        raise ConfigError("eval needs the model problem (rhs = sine on the cube (-1,1)^d)")
    spec = cfg.problem()
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    pts = uniform_test_points(spec.domain, cfg.test_points, seed)
    trace = trace_eval(params, spec, pts)
    err = solution_error(lambda x: trace, mp, pts)
    print(f"e_l2 = {err!r}")
    if args.points_out:
        exact = mp.exact_trace(pts)
        header = [f"x{i + 1}" for i in range(cfg.d)] + ["approx", "exact"]
        write_table(Path(args.points_out), header,
                    [(*map(float, p), float(a), float(e)) for p, a, e in zip(pts, trace, exact)],
                    cfg.config_hash)
    return EXIT_OK


def _sweep_settings(cfg: RunConfig) -> list[RunConfig]:
    depths = cfg.sweep_depths or (cfg.depth,)
    widths = cfg.sweep_widths or (cfg.width,)
    svals = cfg.sweep_s or (cfg.s,)
    kinds = cfg.sweep_kinds or (cfg.kind,)
    if not (cfg.sweep_depths or cfg.sweep_widths or cfg.sweep_s or cfg.sweep_kinds):
        raise ConfigError("empty sweep: set at least one of widths, depths, s, kinds in [sweep]")
    return [replace(cfg, kind=k, s=s, depth=L, width=M)
            for k in kinds for s in svals for L in depths for M in widths]


def _sweep_row(job):
    cfg, seed, out = job
    try:
        return run_one(cfg, seed, out)
    except (FloatingPointError, ValueError) as exc:
        return {"seed": seed, "final_error": float("nan"), "seconds": 0.0, "status": f"failed: {exc}"}


def cmd_sweep(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out_dir or cfg.out_dir)
    seeds = _seeds(cfg, args.seed)
    settings = _sweep_settings(cfg)
    jobs = []
    for c in settings:
        tag = f"{c.kind}_s{c.s}_L{c.depth}_M{c.width}"
        jobs.extend((c, seed, out / tag / f"seed_{seed}") for seed in seeds)
    if args.parallel and args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_sweep_row, jobs))
    else:
        results = [_sweep_row(j) for j in jobs]

    rows, k = [], 0
    for c in settings:
        chunk = results[k:k + len(seeds)]
        k += len(seeds)
        errs = [r["final_error"] for r in chunk]
        good = [e for e in errs if math.isfinite(e)]
        failures = [r["status"] for r in chunk if "status" in r]
        rows.append({"kind": c.kind, "s": c.s, "depth": c.depth, "width": c.width,
                     "median_error": statistics.median(good) if good else float("nan"),
                     "errors": errs, "seconds": sum(r["seconds"] for r in chunk),
                     "status": "; ".join(failures) if failures else "ok"})
    # orders along the width axis within each (kind, s, depth) group
    for row in rows:
        row["order"] = None
    groups = {}
    for row in rows:
        groups.setdefault((row["kind"], row["s"], row["depth"]), []).append(row)
    for group in groups.values():
        group.sort(key=lambda r: r["width"])
        for prev, cur in zip(group, group[1:]):
            e0, e1 = prev["median_error"], cur["median_error"]
            if e0 > 0 and e1 > 0 and math.isfinite(e0) and math.isfinite(e1):
                cur["order"] = convergence_order([e0, e1], [prev["width"], cur["width"]])[0]

    out.mkdir(parents=True, exist_ok=True)
    header = ["kind", "s", "depth", "width", "median_error", "order", "seconds", "status"] + \
             [f"error_seed_{s}" for s in seeds]
    write_table(out / "sweep.csv", header,
                [[r["kind"], r["s"], r["depth"], r["width"], r["median_error"], r["order"],
                  r["seconds"], r["status"], *r["errors"]] for r in rows], cfg.config_hash)
    for r in rows:
        order = "" if r["order"] is None else f"{r['order']:+.2f}"
        print(f"{r['kind']:8s} s={r['s']:<5g} L={r['depth']} M={r['width']:<4d} "
              f"e={r['median_error']:.4e} {order:>6s} {r['status']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# self tests


def quadrature_selftest(h: float = 1.0 / 3.0, tol: float = 1e-5) -> list[tuple]:
    """Sinc rule on e^{-2 eta y} y^alpha against Gamma(alpha+1) / (2 eta)^(alpha+1)."""
    rows = []
    for s in (0.25, 0.5, 0.75):
        scheme = sinc_scheme(s, h)
        alpha = 1.0 - 2.0 * s
        for eta in (0.5, 1.0, 2.0):
            exact = math.gamma(alpha + 1.0) / (2.0 * eta) ** (alpha + 1.0)
            value = sinc_integrate(lambda y, eta=eta: np.exp(-2.0 * eta * y), scheme)
            rel = abs(value - exact) / exact
            rows.append((s, eta, value, exact, rel, rel < tol))
    return rows


@dataclass
class ComponentCheck:
    index: int
    tape: float
    fd: float
    rel: float
    pattern_changed: bool  # a ReLU switches between theta - step and theta + step
    fine_rel: float        # deviation against central differences at the fine step


def gradient_selftest(n_points: int = 64, width: int = 8, depth: int = 2, step: float = 1e-4,
                      seed: int = 0, s: float = 0.5, fine_step: float = 1e-7) -> list[ComponentCheck]:
    """Compare the tape gradient of the discrete loss with central differences.

    Uses a freshly initialized special ansatz on (-1, 1), ``n_points`` Halton
    points and the default sinc rule.  Only components whose difference
    quotient exceeds 1e-8 in magnitude are reported.  For each the record
    also says whether any ReLU changes state inside ``[theta - step, theta + step]``
    (the loss jumps there, so a difference quotient across it is meaningless)
    and gives the deviation at ``fine_step``.
    """
    from .quadrature import activation_pattern, assemble_loss, loss_and_grad
    from .training import init_params

    spec = ProblemSpec(s, Hypercube.cube(1))
    kind, shape, flat = as_flat(init_params(FnnShape(depth, width, 2), seed))
    sample = halton_points(spec.domain, n_points)
    scheme = sinc_scheme(s, 1.0 / 3.0)
    _, grad = loss_and_grad(None, spec, sample, scheme, flat=flat, kind=kind, shape=shape)

    def loss(f):
        return assemble_loss(from_flat(kind, shape, f), spec, sample, scheme)

    def quotient(i, h):
        e = np.zeros_like(flat)
        e[i] = h
        return (loss(flat + e) - loss(flat - e)) / (2 * h)

    def pattern(f):
        return activation_pattern(kind, shape, f, sample, scheme)

    out = []
    for i in range(flat.size):
        fd = quotient(i, step)
        if abs(fd) <= 1e-8:
            continue
        e = np.zeros_like(flat)
        e[i] = step
        changed = not np.array_equal(pattern(flat - e), pattern(flat + e))
        fine = quotient(i, fine_step)
        out.append(ComponentCheck(i, float(grad[i]), fd, abs(grad[i] - fd) / abs(fd), changed,
                                  abs(grad[i] - fine) / max(abs(fine), 1e-300)))
    return out


def cmd_quadrature_selftest(args) -> int:
    rows = quadrature_selftest()
    for s, eta, value, exact, rel, ok in rows:
        print(f"s={s:<5g} eta={eta:<4g} sinc={value:.12f} exact={exact:.12f} rel={rel:.2e} "
              f"{'ok' if ok else 'FAIL'}")
    return EXIT_OK if all(r[-1] for r in rows) else EXIT_NUMERIC


def cmd_gradient_selftest(args) -> int:
    seed = args.seed if args.seed is not None else 0
    checks = gradient_selftest(seed=seed, step=args.step)
    bad = [c for c in checks if c.rel >= 1e-5]
    worst = max((c.rel for c in checks), default=0.0)
    print(f"{len(checks)} components, max relative deviation {worst:.3e} at step {args.step:g}; "
          f"{len(bad)} above 1e-5")
    for c in bad:
        print(f"  theta[{c.index}]: tape {c.tape:+.10e} fd {c.fd:+.10e} rel {c.rel:.2e} "
              f"relu switch inside step: {'yes' if c.pattern_changed else 'no'}; "
              f"rel at fine step {c.fine_rel:.2e}")
    return EXIT_OK if not bad else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fracritz",
                                     description="Deep Ritz solver for the spectral fractional Laplacian")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seeds")
        p.add_argument("--out-dir", default=None, help="artifact directory (overrides [output] dir)")

    p = sub.add_parser("solve", help="train and write checkpoint, report and history")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="relative l2 error of a checkpoint on a seeded test set")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--points-out", default=None, help="write (x, approx, exact) rows as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a grid of settings and tabulate final errors")
    common(p)
    p.add_argument("--parallel", type=int, default=1, help="worker processes (rows only)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("quadrature-selftest", help="sinc rule against Gamma-function identities")
    common(p, config_required=False)
    p.set_defaults(func=cmd_quadrature_selftest)

    p = sub.add_parser("gradient-selftest", help="tape gradient against central differences")
    common(p, config_required=False)
    p.add_argument("--step", type=float, default=1e-4, help="central-difference step")
    p.set_defaults(func=cmd_gradient_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
