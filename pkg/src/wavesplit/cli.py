"""Command-line entry point: ``wavesplit <subcommand> [flags]``.

Failures print one line ``wavesplit-error: <ErrorType>: <message>`` to
stderr and exit with status 1; flag errors print usage and exit with 2.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import io as wio
from .acoustics import (
    ARRAY_RADIUS,
    SPEED_OF_SOUND,
    MicArray,
    PointSource,
    Wavenumber,
    add_noise,
    fibonacci_sphere,
    load_mic_array,
    save_mic_array,
    synthesize,
    tdesign_64,
)
from .evaluation import METHODS, ExperimentConfig, field_map, run_sweep, write_field_csv
from .models import Network
from .pipeline import baseline_decompose, decompose
from .sparse import sparse_decompose
from .training import (
    DESK_BASELINE,
    DESK_SFS,
    DESK_SFS_FROZEN,
    DESK_SSL,
    SfsDataset,
    SslDataset,
    load_train_config,
    train_baseline,
    train_sfs,
    train_sfs_frozen_ssl,
    train_ssl,
    write_curves,
)

CI_ENV = "WAVESPLIT_CI"
RANDOMIZED = ("gen-data", "simulate", "train", "eval")
DESK_PRESETS = {"ssl": DESK_SSL, "sfs": DESK_SFS, "baseline": DESK_BASELINE, "sfs-frozen": DESK_SFS_FROZEN}


class CliError(Exception):
    """A user-facing failure reported on one line."""


# argument parsing ---------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def parse_frequencies(text: str) -> list[float]:
    """``"100:900:100"`` (inclusive start:stop:step) or a comma list ``"300,500"``."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"range must be start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if not step > 0 or stop < start:
            raise argparse.ArgumentTypeError(f"empty frequency range {text!r}")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        freqs = [start + i * step for i in range(n)]
    else:
        freqs = [float(p) for p in text.split(",") if p.strip()]
    if not freqs or any(not f > 0 for f in freqs):
        raise argparse.ArgumentTypeError(f"frequencies must be positive, got {text!r}")
    return freqs


def _float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="wavesplit", description="Point-source sound field decomposition.",
                                     formatter_class=fmt)
    parser.add_argument("--threads", type=_positive_int, default=1, help="BLAS/OpenMP thread cap")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        return p

    def add_mics(p):
        p.add_argument("--mics", type=Path, default=None,
                       help="microphone file (x y z per line); bundled 64-point t-design if omitted")

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None, help="master seed (0 if omitted; required when WAVESPLIT_CI=1)")

    def add_c(p):
        p.add_argument("--speed-of-sound", type=_positive_float, default=SPEED_OF_SOUND, help="speed of sound, m/s")

    p = command("gen-mics", "Write a microphone coordinate file.")
    p.add_argument("--m", type=_positive_int, default=64, help="number of microphones")
    p.add_argument("--radius", type=_positive_float, default=ARRAY_RADIUS, help="array radius in meters")
    p.add_argument("--fibonacci", action="store_true", help="golden-angle spiral instead of the bundled t-design")
    p.add_argument("--out", type=Path, required=True, help="output mic file")

    p = command("gen-data", "Generate a position dataset.")
    p.add_argument("--kind", choices=("ssl", "sfs"), required=True, help="single positions or position pairs")
    p.add_argument("--freq", type=_positive_float, default=500.0, help="frequency in Hz")
    p.add_argument("--count", type=_positive_int, default=None,
                   help="rows (ssl: 10000, sfs: 50000 pairs if omitted); 90%% go to training")
    p.add_argument("--ssl-data", type=Path, default=None,
                   help="sfs only: draw pairs from this SSL dataset's splits (else a fresh 10000-point pool)")
    p.add_argument("--train-fraction", type=float, default=0.9, help="share of rows in the training split")
    add_seed(p)
    p.add_argument("--out", type=Path, required=True, help="output dataset file")

    p = command("simulate", "Synthesize noisy mic pressures for a source list.")
    p.add_argument("--sources", type=Path, required=True, help="CSV index,x,y,z,amp_re,amp_im")
    p.add_argument("--freq", type=_positive_float, default=500.0, help="frequency in Hz")
    p.add_argument("--snr", type=float, default=math.inf, help="SNR in dB (inf: no noise)")
    add_mics(p)
    add_c(p)
    add_seed(p)
    p.add_argument("--out", type=Path, required=True, help="CSV mic_index,re,im")

    p = command("train", "Train a network on a dataset.")
    p.add_argument("--model", choices=tuple(DESK_PRESETS), required=True, help="network and objective to train")
    p.add_argument("--data", type=Path, required=True, help="dataset file from gen-data")
    p.add_argument("--config", type=Path, default=None, help="key=value training config (desk preset if omitted)")
    p.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")
    p.add_argument("--ssl-weights", type=Path, default=None, help="pre-trained localizer for sfs-frozen")
    p.add_argument("--select", choices=("best", "final"), default="best",
                   help="save the best-validation or the final-epoch weights")
    p.add_argument("--verbose", action="store_true", help="log every epoch to stderr")
    add_mics(p)
    add_seed(p)
    p.add_argument("--out", type=Path, required=True, help="output weight file")
    p.add_argument("--curves", type=Path, default=None, help="loss curve CSV epoch,train_loss,val_loss")

    p = command("eval", "Run a randomized evaluation sweep.")
    p.add_argument("--method", choices=METHODS, required=True, help="decomposition method")
    p.add_argument("--sources", type=int, choices=(1, 2), default=1, help="sources per trial")
    p.add_argument("--freqs", type=parse_frequencies, default=[500.0], help="start:stop:step or comma list, Hz")
    p.add_argument("--snr", type=_float_list, default=[40.0], help="comma list, dB")
    p.add_argument("--trials", type=_positive_int, default=100, help="trials per (frequency, SNR) condition")
    p.add_argument("--weights", type=Path, action="append", default=[],
                   help="weight file (repeatable); kind and frequency are read from the file")
    p.add_argument("--data", type=Path, default=None, help="dataset whose validation split supplies the positions")
    p.add_argument("--pitch", type=_positive_float, default=0.2, help="sparse grid pitch, m")
    p.add_argument("--sdr-pitch", type=_positive_float, default=0.1, help="SDR integration pitch, m")
    p.add_argument("--sdr-literal", action="store_true", help="report distortion over signal")
    add_mics(p)
    add_c(p)
    add_seed(p)
    p.add_argument("--out", type=Path, required=True, help="per-trial metrics CSV")
    p.add_argument("--aggregate-out", type=Path, default=None, help="per-condition means CSV")

    p = command("decompose", "Decompose recorded pressures into point sources.")
    p.add_argument("--input", type=Path, required=True, help="CSV mic_index,re,im")
    p.add_argument("--s", type=int, choices=(1, 2), default=2, help="source count")
    p.add_argument("--method", choices=("proposed", "baseline", "sparse"), default="proposed", help="decomposition method")
    p.add_argument("--weights-sfs", type=Path, default=None, help="separator weights (needed for --s 2)")
    p.add_argument("--weights-ssl", type=Path, default=None, help="localizer weights")
    p.add_argument("--weights-baseline", type=Path, default=None, help="two-position baseline weights")
    p.add_argument("--freq", type=_positive_float, default=None,
                   help="Hz; taken from the weight files when omitted")
    p.add_argument("--pitch", type=_positive_float, default=0.2, help="sparse grid pitch, m")
    add_mics(p)
    add_c(p)
    p.add_argument("--out", type=Path, required=True, help="CSV index,x,y,z,amp_re,amp_im")

    p = command("field", "Evaluate the field of a source list on a plane.")
    p.add_argument("--sources", type=Path, required=True, help="CSV index,x,y,z,amp_re,amp_im")
    p.add_argument("--plane", default="z=0", help="axis-aligned plane, e.g. z=0")
    p.add_argument("--extent", type=_positive_float, default=1.0, help="half-width of the square, m")
    p.add_argument("--pitch", type=_positive_float, default=0.02, help="lattice pitch, m")
    p.add_argument("--freq", type=_positive_float, default=500.0, help="frequency in Hz")
    add_c(p)
    p.add_argument("--out", type=Path, required=True, help="CSV x,y,z,re,im")
    return parser


# file helpers -------------------------------------------------------------

def _mics(path: Path | None) -> MicArray:
    return tdesign_64() if path is None else load_mic_array(path)


def _rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    return rows


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def read_pressures(path: Path, M: int | None = None) -> np.ndarray:
    rows = _rows(path)
    if any(len(r) != 3 for r in rows):
        raise CliError(f"{path}: expected mic_index,re,im rows")
    idx = [int(r[0]) for r in rows]
    if sorted(idx) != list(range(len(idx))):
        raise CliError(f"{path}: mic indices must be 0..{len(idx) - 1} without gaps")
    if M is not None and len(idx) != M:
        raise CliError(f"{path}: {len(idx)} pressures for {M} microphones")
    p = np.zeros(len(idx), dtype=np.complex128)
    for i, r in zip(idx, rows):
        p[i] = complex(float(r[1]), float(r[2]))
    if not np.all(np.isfinite(p)):
        raise CliError(f"{path}: non-finite pressure")
    return p


def write_pressures(path: Path, p: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mic_index", "re", "im"])
        for i, v in enumerate(p):
            w.writerow([i, repr(float(v.real)), repr(float(v.imag))])


def read_sources(path: Path) -> list[PointSource]:
    rows = _rows(path)
    if any(len(r) != 6 for r in rows):
        raise CliError(f"{path}: expected index,x,y,z,amp_re,amp_im rows")
    rows.sort(key=lambda r: int(r[0]))
    return [PointSource([float(v) for v in r[1:4]], complex(float(r[4]), float(r[5]))) for r in rows]


def write_sources(path: Path, sources: Sequence[PointSource]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "x", "y", "z", "amp_re", "amp_im"])
        for i, s in enumerate(sources):
            a = complex(s.amplitude)
            w.writerow([i, *(repr(float(v)) for v in s.position), repr(a.real), repr(a.imag)])


def _weights(path: Path | None, kind: str, M: int) -> Network | None:
    if path is None:
        return None
    net = wio.load_weights(path)
    if net.kind != kind:
        raise CliError(f"{path}: holds {net.kind} weights, expected {kind}")
    if net.M != M:
        raise CliError(f"{path}: trained for {net.M} microphones, array has {M}")
    return net


def _model_key(net: Network) -> str:
    if net.kind == "sfs" and net.descriptor.get("objective") == "position":
        return "sfs-lbase"
    return net.kind


# subcommands --------------------------------------------------------------

def cmd_gen_mics(args) -> str:
    if args.fibonacci:
        mics = fibonacci_sphere(args.m, args.radius)
    elif args.m == 64:
        mics = tdesign_64(args.radius)
    else:
        raise CliError(f"no bundled t-design with {args.m} points; pass --fibonacci")
    save_mic_array(args.out, mics)
    return f"wrote {mics.M} microphones to {args.out}"


def cmd_gen_data(args) -> str:
    if not 0 < args.train_fraction < 1:
        raise CliError("--train-fraction must lie in (0, 1)")
    if args.kind == "ssl":
        if args.ssl_data is not None:
            raise CliError("--ssl-data only applies to --kind sfs")
        ds = SslDataset.generate(args.count or 10_000, args.freq, args.seed, args.train_fraction)
    else:
        if args.ssl_data is not None:
            pool = wio.load_dataset(args.ssl_data)
            if not isinstance(pool, SslDataset):
                raise CliError(f"{args.ssl_data}: not an SSL dataset")
            if abs(pool.frequency - args.freq) > 1e-9:
                raise CliError(f"{args.ssl_data}: dataset is for {pool.frequency:g} Hz, not {args.freq:g} Hz")
        else:
            pool = SslDataset.generate(10_000, args.freq, args.seed)
        count = args.count or 50_000
        n_train = int(round(args.train_fraction * count))
        ds = SfsDataset.from_ssl(pool, n_train, count - n_train, args.seed)
    wio.save_dataset(args.out, ds)
    return f"wrote {len(ds)} {args.kind} rows ({ds.n_train} train) to {args.out}"


def cmd_simulate(args) -> str:
    mics = _mics(args.mics)
    k = Wavenumber(args.freq, args.speed_of_sound)
    p = synthesize(read_sources(args.sources), mics, k)
    p = add_noise(p, args.snr, np.random.default_rng(args.seed))
    write_pressures(args.out, p)
    return f"wrote {len(p)} pressures to {args.out}"


def cmd_train(args) -> str:
    mics = _mics(args.mics)
    cfg = load_train_config(args.config) if args.config is not None else DESK_PRESETS[args.model]
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.explicit_seed:
        overrides["seed"] = args.seed
    if overrides:
        cfg = replace(cfg, **overrides)
    ds = wio.load_dataset(args.data)
    want = SslDataset if args.model == "ssl" else SfsDataset
    if not isinstance(ds, want):
        raise CliError(f"{args.data}: model {args.model} needs a {'ssl' if want is SslDataset else 'sfs'} dataset")
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    if args.model == "ssl":
        result = train_ssl(ds, mics, cfg, log=log)
    elif args.model == "sfs":
        result = train_sfs(ds, mics, cfg, log=log)
    elif args.model == "baseline":
        result = train_baseline(ds, mics, cfg, log=log)
    else:
        if args.ssl_weights is None:
            raise CliError("sfs-frozen needs --ssl-weights")
        ssl = _weights(args.ssl_weights, "ssl", mics.M)
        result = train_sfs_frozen_ssl(ds, mics, ssl, cfg, log=log)
    net = result.best_network() if args.select == "best" else result.network
    wio.save_weights(args.out, net)
    if args.curves is not None:
        write_curves(args.curves, result)
    last = f" train_loss={result.train_loss[-1]!r} val_loss={result.val_loss[-1]!r}" if result.train_loss else ""
    return f"model={args.model} epochs={cfg.epochs} best_epoch={result.best_epoch}{last} out={args.out}"


def cmd_eval(args) -> str:
    mics = _mics(args.mics)
    models: dict[str, dict[float, Network]] = {}
    for path in args.weights:
        net = wio.load_weights(path)
        if net.M != mics.M:
            raise CliError(f"{path}: trained for {net.M} microphones, array has {mics.M}")
        if "frequency" not in net.descriptor:
            raise CliError(f"{path}: weight file does not record its frequency")
        models.setdefault(_model_key(net), {})[float(net.descriptor["frequency"])] = net
    positions = None
    if args.data is not None:
        ds = wio.load_dataset(args.data)
        if args.sources == 1 and isinstance(ds, SslDataset):
            positions = ds.positions[ds.val_indices]
        elif args.sources == 2 and isinstance(ds, SfsDataset):
            positions = ds.pairs[ds.val_indices]
        else:
            raise CliError(f"{args.data}: dataset kind does not match --sources {args.sources}")
        if len(positions) == 0:
            raise CliError(f"{args.data}: empty validation split")
    cfg = ExperimentConfig(frequencies=args.freqs, snrs=args.snr, S=args.sources, trials=args.trials,
                           method=args.method, seed=args.seed, sdr_pitch=args.sdr_pitch, sparse_pitch=args.pitch,
                           speed_of_sound=args.speed_of_sound, positions=positions, sdr_literal=args.sdr_literal)
    rows, aggs = run_sweep(cfg, models, mics, args.out, args.aggregate_out)
    return f"wrote {len(rows)} rows and {len(aggs)} aggregates to {args.out}"


def _frequency(args, nets: Sequence[Network | None]) -> float:
    if args.freq is not None:
        return args.freq
    freqs = {float(n.descriptor["frequency"]) for n in nets if n is not None and "frequency" in n.descriptor}
    if len(freqs) != 1:
        raise CliError("cannot infer the frequency from the weight files; pass --freq")
    return freqs.pop()


def cmd_decompose(args) -> str:
    mics = _mics(args.mics)
    p = read_pressures(args.input, mics.M)
    if args.method == "sparse":
        if args.freq is None:
            raise CliError("--method sparse needs --freq")
        k = Wavenumber(args.freq, args.speed_of_sound)
        dec = sparse_decompose(p, args.pitch, args.s, mics, k)
    elif args.method == "baseline":
        base = _weights(args.weights_baseline, "baseline", mics.M)
        if base is None:
            raise CliError("--method baseline needs --weights-baseline")
        if args.s != 2:
            raise CliError("the baseline network decomposes two sources")
        dec = baseline_decompose(p, base, mics, Wavenumber(_frequency(args, [base]), args.speed_of_sound))
    else:
        ssl = _weights(args.weights_ssl, "ssl", mics.M)
        if ssl is None:
            raise CliError("--method proposed needs --weights-ssl")
        sfs = _weights(args.weights_sfs, "sfs", mics.M)
        if args.s == 2 and sfs is None:
            raise CliError("--s 2 needs --weights-sfs")
        k = Wavenumber(_frequency(args, [ssl, sfs]), args.speed_of_sound)
        dec = decompose(p, args.s, sfs if args.s == 2 else None, ssl, mics, k)
    write_sources(args.out, dec.sources)
    flags = f" flags={','.join(dec.flags)}" if dec.flags else ""
    return f"wrote {len(dec.sources)} sources to {args.out}{flags}"


def cmd_field(args) -> str:
    sources = read_sources(args.sources)
    pts, vals = field_map(sources, args.plane, args.extent, args.pitch, Wavenumber(args.freq, args.speed_of_sound))
    write_field_csv(args.out, pts, vals)
    return f"wrote {len(pts)} points to {args.out}"


COMMANDS = {
    "gen-mics": cmd_gen_mics,
    "gen-data": cmd_gen_data,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "decompose": cmd_decompose,
    "field": cmd_field,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "seed"):
        args.explicit_seed = args.seed is not None
        if not args.explicit_seed:
            if args.command in RANDOMIZED and os.environ.get(CI_ENV) == "1":
                parser.error(f"{args.command} needs an explicit --seed when {CI_ENV}=1")
            args.seed = 0
    try:
        with threadpool_limits(args.threads):
            message = COMMANDS[args.command](args)
    except (CliError, OSError, ValueError, LookupError, RuntimeError) as exc:
        text = " ".join(str(exc).split()) or type(exc).__name__
        print(f"wavesplit-error: {type(exc).__name__}: {text}", file=sys.stderr)
        return 1
    print(message)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
