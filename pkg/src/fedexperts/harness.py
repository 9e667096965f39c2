"""Experiment configuration, multi-trial runs, CSV/JSON output and the CLI."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import tempfile
from typing import Optional, Sequence

import numpy as np

from fedexperts import adversaries
from fedexperts.core import RandomSource, Transcript
from fedexperts.fed_ope_stoch import StochConfig, run_fed_stoch
from fedexperts.fed_svt import SvtConfig, run_fed_svt

logger = logging.getLogger("fedexperts")

CSV_HEADER = ["algorithm", "variant", "m", "d", "T", "seed", "t", "regret", "comm_scalars"]
ALGORITHMS = ("fed-stoch", "fed-svt")
STOCH_ADVERSARIES = ("linear", "xent")
SVT_ADVERSARIES = ("realizable", "lowerbound", "ratings")
VARIANTS = ("pure", "approx", "central")

PRESETS = {
    "fed-stoch": dict(m=10, d=100, T=2 ** 14, eps=10.0, delta=0.0, variant="pure",
                      schedule="corollary32", adversary="linear"),
    "fed-svt": dict(m=10, d=100, T=512, N=50, eps=10.0, delta=0.0, rho=0.05,
                    variant="pure", adversary="realizable"),
}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class ExperimentError(RuntimeError):
    """A trial failed while running (CLI exit code 1)."""


@dataclasses.dataclass
class ExperimentConfig:
    algorithm: str = "fed-stoch"
    adversary: str = "linear"
    m: int = 10
    d: int = 100
    T: int = 2 ** 14
    N: int = 1
    eps: float = 10.0
    delta: float = 0.0
    rho: float = 0.05
    variant: str = "pure"
    schedule: str = "corollary32"
    L_star: Optional[float] = None
    gamma: float = 1e-2
    ratings_path: Optional[str] = None
    trials: int = 1
    seed: int = 0
    baseline: bool = False
    out: Optional[str] = None
    summary_json: Optional[str] = None

    @classmethod
    def preset(cls, algorithm: str, **overrides) -> "ExperimentConfig":
        if algorithm not in PRESETS:
            raise ConfigError(f"unknown algorithm {algorithm!r}")
        fields = dict(PRESETS[algorithm], algorithm=algorithm)
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**fields)

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.algorithm in ALGORITHMS, f"algorithm must be one of {ALGORITHMS}")
        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}")
        for name in ("m", "d", "T", "N", "trials"):
            v = getattr(self, name)
            need(isinstance(v, (int, np.integer)) and v >= 1, f"{name} must be a positive integer")
        need(self.d >= 2, "d must be at least 2")
        need(self.eps > 0, "eps must be positive")
        need(0 <= self.delta < 1, "delta must lie in [0, 1)")
        if self.algorithm == "fed-stoch":
            need(self.adversary in STOCH_ADVERSARIES,
                 f"fed-stoch adversary must be one of {STOCH_ADVERSARIES}")
            need(self.schedule in ("theorem31", "corollary32"),
                 "schedule must be theorem31 or corollary32")
            if self.variant == "approx":
                need(0 < self.delta <= 1.0 / self.T,
                     f"approx variant needs 0 < delta <= 1/T = {1.0 / self.T:.3g}")
            need(0 < self.gamma < 1, "gamma must lie in (0, 1)")
        else:
            need(self.adversary in SVT_ADVERSARIES,
                 f"fed-svt adversary must be one of {SVT_ADVERSARIES}")
            need(self.variant != "central", "fed-svt has no central variant")
            if self.variant == "approx":
                need(0 < self.delta < 1, "approx variant needs 0 < delta < 1")
            need(0 < self.rho < 0.5, "rho must lie in (0, 1/2)")
            need(self.L_star is None or self.L_star >= 0, "L_star must be nonnegative")
            if self.adversary == "ratings":
                need(self.ratings_path, "ratings adversary needs --ratings-path")
                need(os.path.isfile(self.ratings_path),
                     f"ratings file {self.ratings_path!r} not found")
            if self.adversary == "lowerbound":
                k = adversaries.lowerbound_switch_length(self.d, self.m, self.eps)
                need(k <= self.T, f"lower-bound switch length {k} exceeds T={self.T}")
        for path in (self.out, self.summary_json):
            if path:
                parent = os.path.dirname(os.path.abspath(path))
                need(os.path.isdir(parent), f"output directory {parent!r} does not exist")
        return self

    @property
    def effective_delta(self) -> float:
        return self.delta if self.variant == "approx" else 0.0

    @property
    def stoch_mode(self) -> str:
        if self.variant == "pure":
            return self.schedule
        return "approx" if self.variant == "approx" else "central"


def build_stream(config: ExperimentConfig, rng: RandomSource, m: Optional[int] = None):
    """Loss stream for one trial; client ``i``'s draws do not depend on ``m``."""
    m = config.m if m is None else m
    kind = config.adversary
    if kind == "linear":
        return adversaries.gen_stochastic_linear(m, config.T, config.d, rng)
    if kind == "xent":
        return adversaries.gen_stochastic_crossentropy(m, config.T, config.d, rng, config.gamma)
    if kind == "realizable":
        return adversaries.gen_oblivious_realizable(m, config.T, config.d, rng)
    if kind == "lowerbound":
        j = int(rng.stream("adversary", "target").integers(config.d)) + 1
        return adversaries.gen_lowerbound_sequence(config.d, m, config.T, config.eps, j)
    stream = adversaries.ingest_ratings_csv(config.ratings_path, m)
    if stream.d != config.d:
        raise ConfigError(f"ratings file has {stream.d} experts, config says d={config.d}")
    if stream.T < config.T:
        raise ConfigError(f"ratings file has {stream.T} rows, config says T={config.T}")
    return stream.restrict(m, config.T)


def _run_arm(config: ExperimentConfig, rng: RandomSource, seed: int, m: int, N: int,
             label: Optional[str]) -> Transcript:
    stream = build_stream(config, rng, m)
    if config.algorithm == "fed-stoch":
        cfg = StochConfig(m=m, d=config.d, T=config.T, mode=config.stoch_mode,
                          epsilon=config.eps, delta=config.effective_delta,
                          schedule=config.schedule)
        tr = run_fed_stoch(cfg, stream, rng, seed=seed)
    else:
        L_star = config.L_star if config.L_star is not None else (stream.L_star or 0.0)
        cfg = SvtConfig(m=m, d=config.d, T=config.T, N=N, epsilon=config.eps,
                        delta=config.effective_delta, rho=config.rho, L_star=L_star)
        tr = run_fed_svt(cfg, stream, rng, seed=seed)
    if label:
        tr.variant = label
    return tr


def run_trial(config: ExperimentConfig, seed: int) -> list[Transcript]:
    """Runs the federated arm (and the ``single`` baseline if requested) for one seed."""
    rng = RandomSource(seed)
    arms = [_run_arm(config, rng, seed, config.m, config.N, None)]
    if config.baseline:
        arms.append(_run_arm(config, rng, seed, 1, 1, "single"))
    return arms


@dataclasses.dataclass
class ExperimentResult:
    config: ExperimentConfig
    transcripts: list[Transcript]
    summary: dict


def summarize(transcripts: Sequence[Transcript]) -> dict:
    finals = np.array([tr.final_regret for tr in transcripts])
    comm = [tr.comm.total for tr in transcripts]
    out = {
        "final_regret_mean": float(finals.mean()),
        "final_regret_std": float(finals.std()),
        "total_comm_scalars": int(comm[0]) if len(set(comm)) == 1 else float(np.mean(comm)),
    }
    if transcripts and transcripts[0].algorithm == "fed-svt":
        counts = [len(tr.switches) for tr in transcripts]
        out["switches"] = float(np.mean(counts))
        out["switches_max"] = int(max(counts))
        out["kappa"] = int(transcripts[0].info["kappa"])
    return out


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Validates ``config`` and runs ``trials`` seeds ``seed, seed+1, ...``."""
    config.validate()
    transcripts = []
    for trial in range(config.trials):
        seed = config.seed + trial
        logger.info("trial %d/%d (seed %d)", trial + 1, config.trials, seed)
        try:
            transcripts.extend(run_trial(config, seed))
        except ConfigError:
            raise
        except Exception as e:
            raise ExperimentError(f"trial with seed {seed} failed: {e}") from e
    main = [tr for tr in transcripts if tr.variant != "single"]
    summary = summarize(main)
    single = [tr for tr in transcripts if tr.variant == "single"]
    if single:
        summary["single"] = summarize(single)
    return ExperimentResult(config, transcripts, summary)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def csv_text(transcripts: Sequence[Transcript]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for tr in transcripts:
        comm = tr.comm.cumulative_by_round(tr.T)
        for t in range(tr.T):
            writer.writerow([tr.algorithm, tr.variant, tr.m, tr.d, tr.T, tr.seed, t + 1,
                             _fmt(tr.regret[t]), int(comm[t])])
    return buf.getvalue()


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".fedexperts-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        # mkstemp creates 0600 files; give the output the usual umask-derived mode
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_csv(transcripts: Sequence[Transcript], path: str) -> None:
    """Writes one row per (trial, round); rows are seed-major, round-minor."""
    if not transcripts:
        raise ValueError("no transcripts to write")
    _atomic_write(path, csv_text(transcripts))


def emit_summary(summary: dict, path: str) -> None:
    _atomic_write(path, json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

_FLAG_FIELDS = ("m", "d", "T", "N", "eps", "delta", "rho", "variant", "schedule", "L_star",
                "gamma", "adversary", "ratings_path", "trials", "seed", "out", "summary_json",
                "baseline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedexperts",
        description="Differentially private federated prediction from experts.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("stoch", "Fed-DP-OPE-Stoch on a stochastic adversary"),
                            ("svt", "Fed-SVT on an oblivious adversary")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with default values for the flags below")
        p.add_argument("--m", type=int)
        p.add_argument("--d", type=int)
        p.add_argument("--T", type=int)
        p.add_argument("--N", type=int, help="communication interval (svt)")
        p.add_argument("--eps", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--rho", type=float, help="failure probability (svt)")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--schedule", choices=("theorem31", "corollary32"),
                       help="batch/tree recipe for pure and central stoch runs")
        p.add_argument("--L-star", dest="L_star", type=float)
        p.add_argument("--gamma", type=float, help="cross-entropy smoothing (xent adversary)")
        p.add_argument("--adversary", choices=STOCH_ADVERSARIES + SVT_ADVERSARIES)
        p.add_argument("--ratings-path", dest="ratings_path")
        p.add_argument("--trials", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--baseline", action="store_true", default=None,
                       help="also run the single-client arm, labeled 'single'")
        p.add_argument("--out", help="CSV output path")
        p.add_argument("--summary-json", dest="summary_json")
    return parser


def _load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path!r}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path!r} must hold a JSON object")
    values = {}
    for key, value in raw.items():
        field = key.lstrip("-").replace("-", "_")
        if field not in _FLAG_FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[field] = value
    return values


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    algorithm = "fed-stoch" if args.command == "stoch" else "fed-svt"
    values = _load_config_file(args.config) if args.config else {}
    values.update({f: getattr(args, f) for f in _FLAG_FIELDS if getattr(args, f) is not None})
    try:
        return ExperimentConfig.preset(algorithm, **values).validate()
    except TypeError as e:
        raise ConfigError(str(e)) from e


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        result = run_experiment(config)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        if config.out:
            emit_csv(result.transcripts, config.out)
        else:
            sys.stdout.write(csv_text(result.transcripts))
        if config.summary_json:
            emit_summary(result.summary, config.summary_json)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(result.summary, sort_keys=True), file=sys.stderr)
    return 0
