"""Command-line entry points: ``eml {synth,plaintext,cv,dealer,alice,bob,bench}``.

Exit codes: 0 success, 2 configuration error, 3 protocol abort (a MAC or
correlation check failed, or the peer aborted), 4 I/O failure.

Environment: ``EML_BIND`` is the default listen/connect address
(``host:port``), ``EML_SEED`` the default seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as benchmod
from .datasets import featurize, synthetic_qm9
from .errors import (
    AgreementMismatch,
    ConnectionFailure,
    CorrelationCheckFailed,
    DimensionMismatch,
    EMLError,
    LengthMismatch,
    MacCheckFailed,
    ParseError,
    PreprocessingExhausted,
    ProtocolAbort,
    RangeError,
    SingularKernel,
)
from .field import Field, FixedPointParams, prime_for
from .krr import (
    cross_validate,
    fit_learning_curve,
    learning_curve,
    load_model,
    mae,
    predict_plaintext,
    save_model,
    train,
)
from .molrep import (
    DEFAULT_N_MAX,
    format_xyz,
    load_vector_matrix,
    read_properties,
    read_xyz,
    truncate_vectors,
    write_properties,
)
from .mpc import ExpConfig
from .preprocessing.dealer import INSECURE_BANNER, Dealer, LazyDealer
from .preprocessing.ot import OTProvider
from .preprocessing.store import MemoryStore, load_store, save_store
from .protocol import AliceSession, BobSession, session_id, session_plan, session_terms
from .sharing import Party
from .transport import MSG_CONTROL, TrafficMeter, connect, handshake, listen

log = logging.getLogger("eml")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4

ABORT_ERRORS = (MacCheckFailed, CorrelationCheckFailed, ProtocolAbort)
CONFIG_ERRORS = (AgreementMismatch, DimensionMismatch, LengthMismatch, RangeError, SingularKernel,
                 ParseError, ValueError)
IO_ERRORS = (ConnectionFailure, PreprocessingExhausted, OSError)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ABORT_ERRORS):
        return EXIT_ABORT
    if isinstance(exc, IO_ERRORS):
        return EXIT_IO
    if isinstance(exc, CONFIG_ERRORS):
        return EXIT_CONFIG
    return 1


def _env_seed():
    v = os.environ.get("EML_SEED")
    return int(v) if v not in (None, "") else None


def _ints(text: str) -> list:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list:
    return [float(t) for t in text.split(",") if t.strip()]


# -- data --------------------------------------------------------------------------------

def _add_data_args(p: argparse.ArgumentParser, labels: bool = True):
    g = p.add_argument_group("data")
    g.add_argument("--xyz", help="concatenated XYZ file (property in comment token 1 unless --props)")
    if labels:
        g.add_argument("--props", help="CSV with id,value[,unit] keyed by the comment's first token")
    g.add_argument("--vectors", help="precomputed representation file (.emlv or CSV)")
    g.add_argument("--synthetic", type=int, metavar="COUNT",
                   help="generate COUNT synthetic molecules instead of reading files")
    g.add_argument("--rep", default="CM", choices=("CM", "long"), help="representation (default CM)")
    g.add_argument("--n-max", type=int, default=DEFAULT_N_MAX, help="atom slots (default 26)")
    g.add_argument("--L", type=int, dest="trunc_L", help="truncate vectors to this length")


def _load_xy(args, seed: int = 0):
    """Representation matrix and labels (labels may be None)."""
    y = None
    if getattr(args, "vectors", None):
        X, _ = load_vector_matrix(args.vectors)
        if getattr(args, "labels", None):
            y = np.loadtxt(args.labels, delimiter=",", ndmin=1)
    elif args.xyz:
        props = getattr(args, "props", None)
        mols = read_xyz(args.xyz, property_from_comment=None if props else 1)
        if props:
            table = read_properties(props)
            y = np.array([table[m.name] for m in mols])
        else:
            y = np.array([m.property for m in mols])
        X = featurize(mols, args.rep, args.n_max)
    elif args.synthetic:
        syn = synthetic_qm9(args.synthetic, seed=seed, n_max=args.n_max)
        X, y = featurize(syn.molecules, args.rep, args.n_max), syn.energies
    else:
        raise ValueError("no input data: pass --xyz, --vectors or --synthetic")
    if args.trunc_L:
        X = truncate_vectors(X, args.trunc_L)
    return X, y


# -- synth / plaintext / cv ---------------------------------------------------------------

def cmd_synth(args) -> int:
    syn = synthetic_qm9(args.count, seed=args.seed or 0, n_max=args.n_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "molecules.xyz", "w") as fh:
        for m in syn.molecules:
            fh.write(format_xyz(m))
    write_properties(out / "properties.csv", [m.name for m in syn.molecules], syn.energies, syn.unit)
    print(f"wrote {len(syn)} molecules to {out}")
    return EXIT_OK


def cmd_plaintext(args) -> int:
    X, y = _load_xy(args, args.seed or 0)
    if y is None:
        raise ValueError("plaintext training needs labels")
    n_test = args.n_test
    Xtr, ytr, Xte, yte = X[n_test:], y[n_test:], X[:n_test], y[:n_test]
    if args.learning_curve:
        Ns = _ints(args.learning_curve)
        rows = learning_curve(Xtr, ytr, Xte, yte, Ns, args.sigma, args.lam, center=True)
        fit = fit_learning_curve([r[0] for r in rows], [r[1] for r in rows])
        lines = ["N,mae"] + [f"{n},{m!r}" for n, m in rows]
        if args.csv:
            Path(args.csv).write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
        print(f"# fit: log10 MAE = {fit.I:.4f} - {fit.S:.4f} log10 N (R^2 {fit.r2:.4f})")
        return EXIT_OK
    N = args.N or len(ytr)
    model = train(Xtr[:N], ytr[:N], args.sigma, args.lam, center=True)
    preds = predict_plaintext(model, Xte)
    for i, (p, t) in enumerate(zip(preds, yte)):
        print(f"{i}\t{p:.6f}\t{t:.6f}")
    print(f"# N={model.N} L={model.L} MAE={mae(preds, yte):.6f}")
    if args.save_model:
        save_model(model, args.save_model)
        Path(args.save_model + ".queries.npy").parent.mkdir(parents=True, exist_ok=True)
        np.save(args.save_model + ".queries.npy", Xte)
        np.savetxt(args.save_model + ".labels.csv", yte, delimiter=",")
        print(f"# model written to {args.save_model}")
    return EXIT_OK


def cmd_cv(args) -> int:
    X, y = _load_xy(args, args.seed or 0)
    if y is None:
        raise ValueError("cross-validation needs labels")
    N = args.N or len(y)
    res = cross_validate(X[:N], y[:N], _floats(args.sigmas), _floats(args.lams), folds=args.folds,
                         seed=args.seed or 0, center=True)
    print("sigma,lambda,mae")
    for s, l, m in res.table:
        print(f"{s!r},{l!r},{m!r}")
    print(f"# best sigma={res.sigma:g} lambda={res.lam:g} MAE={res.mae:.6f}")
    return EXIT_OK


# -- dealer ---------------------------------------------------------------------------------

def cmd_dealer(args) -> int:
    print(INSECURE_BANNER, file=sys.stderr)
    params = FixedPointParams.from_precision(args.P)
    field = Field(prime_for(params))
    plan = session_plan(args.N, args.L, args.queries, params)
    sa, sb = Dealer(field, args.seed).stores(plan)
    save_store(sa, args.out_a)
    save_store(sb, args.out_b)
    print(f"dealt {args.queries} queries for N={args.N} L={args.L} P={args.P}: "
          f"{args.out_a}, {args.out_b}")
    return EXIT_OK


# -- parties -----------------------------------------------------------------------------------

def _add_party_args(p: argparse.ArgumentParser):
    p.add_argument("--P", type=int, default=42, help="fixed-point precision (default 42)")
    p.add_argument("--addr", default=os.environ.get("EML_BIND"),
                   help="host:port (default $EML_BIND or 127.0.0.1:14000)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preproc-file", help="this party's preprocessing file from `eml dealer`")
    src.add_argument("--ot", action="store_true", help="generate preprocessing by OT before the queries")
    src.add_argument("--insecure-seed", type=int,
                     help="both parties derive dealer material from a shared seed (testing only)")
    p.add_argument("--timeout", type=float, default=None, help="seconds to wait for the peer")


def _make_store(role: str, args, field: Field, params: FixedPointParams):
    if args.preproc_file:
        store = load_store(args.preproc_file)
        if store.field.p != field.p:
            raise AgreementMismatch("p", field.p, store.field.p)
        return store
    if args.insecure_seed is not None:
        print(INSECURE_BANNER, file=sys.stderr)
        return LazyDealer(field, args.insecure_seed, params.s).stores[role]
    if args.ot:
        return MemoryStore(role, field)
    raise ValueError("no preprocessing source: pass --preproc-file, --ot or --insecure-seed")


def _ot_fill(role: str, ch, store, params: FixedPointParams, plan: dict):
    OTProvider(role, store.field, ch, params).fill(store, plan)


def cmd_alice(args) -> int:
    """Serve encrypted predictions. Prints session and traffic stats only."""
    model = load_model(args.model)
    params = FixedPointParams.from_precision(args.P)
    cfg = ExpConfig()
    field = Field(prime_for(params))
    store = _make_store("A", args, field, params)
    ch = listen(args.addr, timeout=args.timeout)
    ch.meter = TrafficMeter()
    try:
        terms = session_terms(field.p, params, model.L, model.sigma, cfg)
        handshake(ch, "A", terms)
        if args.ot:
            with ch.meter.phase("preprocessing"):
                ch.send_frame(MSG_CONTROL, json.dumps({"N": model.N}).encode())
                q = int(json.loads(ch.recv_expect(MSG_CONTROL).decode())["queries"])
            _ot_fill("A", ch, store, params, session_plan(model.N, model.L, q, params, cfg))
        party = Party("A", field, params, ch, store, session_id(terms))
        alice = AliceSession(party, cfg)
        t0 = time.perf_counter()
        alice.load_model(model)
        served = alice.serve()
        elapsed = time.perf_counter() - t0
        stats = ch.meter.snapshot().as_dict()
        print(json.dumps({"served": served, "N": model.N, "L": model.L, "P": args.P,
                          "seconds": round(elapsed, 3), "traffic": stats}))
    finally:
        ch.close()
    return EXIT_OK


def cmd_bob(args) -> int:
    """Submit queries; prints one prediction per line and the MAE if labels are given."""
    params = FixedPointParams.from_precision(args.P)
    cfg = ExpConfig()
    if args.queries.endswith(".npy"):
        XQ = np.load(args.queries)
        y = np.loadtxt(args.labels, delimiter=",", ndmin=1) if args.labels else None
    else:
        ns = argparse.Namespace(xyz=args.queries, props=None, vectors=None, synthetic=None,
                                rep=args.rep, n_max=args.n_max, trunc_L=args.trunc_L)
        if args.queries.endswith((".emlv", ".csv")):
            ns.xyz, ns.vectors = None, args.queries
        XQ, y = _load_xy(ns)
        if args.labels:
            y = np.loadtxt(args.labels, delimiter=",", ndmin=1)
        elif not args.with_labels:
            y = None
    XQ = np.atleast_2d(XQ)
    if args.trunc_L and XQ.shape[1] != args.trunc_L:
        XQ = XQ[:, :args.trunc_L]
    field = Field(prime_for(params))
    store = _make_store("B", args, field, params)
    ch = connect(args.addr)
    ch.meter = TrafficMeter()
    try:
        L = XQ.shape[1]
        terms = session_terms(field.p, params, L, args.sigma, cfg)
        handshake(ch, "B", terms)
        if args.ot:
            with ch.meter.phase("preprocessing"):
                N = int(json.loads(ch.recv_expect(MSG_CONTROL).decode())["N"])
                ch.send_frame(MSG_CONTROL, json.dumps({"queries": len(XQ)}).encode())
            _ot_fill("B", ch, store, params, session_plan(N, L, len(XQ), params, cfg))
        party = Party("B", field, params, ch, store, session_id(terms))
        bob = BobSession(party, args.sigma, L, cfg)
        bob.receive_model()
        preds, times, nbytes = bob.predict(XQ)
        bob.close()
    finally:
        ch.close()
    print("index\tprediction\tseconds\tbytes")
    for i, (p, t, b) in enumerate(zip(preds, times, nbytes)):
        print(f"{i}\t{p:.6f}\t{t:.3f}\t{b}")
    if y is not None and len(y) == len(preds):
        print(f"# MAE={mae(preds, y):.6f}")
    return EXIT_OK


# -- bench ----------------------------------------------------------------------------------

def cmd_bench(args) -> int:
    if args.mode == "encrypted":
        print(INSECURE_BANNER, file=sys.stderr)
    seed = args.seed or 0
    data = benchmod.load_dataset(args.rep, synthetic=args.synthetic if not args.xyz else None,
                                 xyz=args.xyz, props=args.props, n_test=args.queries, seed=seed,
                                 n_max=args.n_max)
    spec = benchmod.BenchSpec(args.axis, _ints(args.grid), N=args.N, L=args.trunc_L, P=args.P,
                              repetitions=args.reps, queries=args.queries, sigma=args.sigma,
                              lam=args.lam, seed=seed, mode=args.mode,
                              link_mbps=args.link_mbps)
    rows = []
    try:
        for row in benchmod.run_bench(spec, data, args.csv):
            rows.append(row)
            print(f"{row.axis}={row.value} rep={row.rep} mae={row.mae:.4f} delta={row.delta:.3e} "
                  f"bytes={row.bytes:.0f} t={row.t:.3f}", flush=True)
    finally:
        fits = benchmod.summarize(rows)
        if args.json:
            benchmod.write_json(rows, args.json, fits)
    for key in ("bytes_fit", "t_fit", "r_bytes_t", "t_quadratic"):
        if key in fits:
            print(f"# {key}: {fits[key]}")
    if args.plot and rows:
        benchmod.plot_rows(rows, args.plot)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eml", description="Encrypted kernel ridge regression predictions")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)
    seed_default = _env_seed()

    p = sub.add_parser("synth", help="write synthetic molecules and labels")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--n-max", type=int, default=DEFAULT_N_MAX)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("plaintext", help="train and predict in the clear (the oracle)")
    _add_data_args(p)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--lam", type=float, default=0.0)
    p.add_argument("--N", type=int, help="training-set size (default: all but the test set)")
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--save-model", help="write the trained model here (plus test queries)")
    p.add_argument("--learning-curve", metavar="N1,N2,...", help="print MAE for each N and fit")
    p.add_argument("--csv", help="learning-curve CSV output")
    p.set_defaults(fn=cmd_plaintext)

    p = sub.add_parser("cv", help="five-fold grid search over sigma and lambda")
    _add_data_args(p)
    p.add_argument("--sigmas", default=",".join(str(s) for s in benchmod.DEFAULT_SIGMAS))
    p.add_argument("--lams", default=",".join(str(s) for s in benchmod.DEFAULT_LAMS))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--N", type=int)
    p.add_argument("--seed", type=int, default=seed_default)
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("dealer", help="INSECURE trusted-dealer preprocessing files for one session")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--P", type=int, default=42)
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out-a", default="alice.emlp")
    p.add_argument("--out-b", default="bob.emlp")
    p.set_defaults(fn=cmd_dealer)

    p = sub.add_parser("alice", help="model owner: serve encrypted predictions")
    p.add_argument("--model", required=True, help="model file from `eml plaintext --save-model`")
    _add_party_args(p)
    p.set_defaults(fn=cmd_alice)

    p = sub.add_parser("bob", help="querier: submit queries and print predictions")
    p.add_argument("--queries", required=True, help=".npy matrix, XYZ file or vector file")
    p.add_argument("--labels", help="CSV of true values for an MAE line")
    p.add_argument("--with-labels", action="store_true", help="read labels from XYZ comment token 1")
    p.add_argument("--sigma", type=float, required=True, help="public kernel width")
    p.add_argument("--rep", default="CM", choices=("CM", "long"))
    p.add_argument("--n-max", type=int, default=DEFAULT_N_MAX)
    p.add_argument("--L", type=int, dest="trunc_L")
    _add_party_args(p)
    p.set_defaults(fn=cmd_bob)

    p = sub.add_parser("bench", help="N, L or P sweep in dealer mode; CSV/JSON rows")
    _add_data_args(p)
    p.add_argument("--axis", choices=benchmod.AXES, required=True)
    p.add_argument("--grid", required=True, help="comma-separated, strictly increasing")
    p.add_argument("--N", type=int, default=64)
    p.add_argument("--P", type=int, default=42)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--sigma", type=float, help="default: cross-validated")
    p.add_argument("--lam", type=float, help="default: cross-validated")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--mode", choices=benchmod.MODES, default="encrypted")
    p.add_argument("--link-mbps", type=float, help="emulate a link of this rate (default: raw loopback)")
    p.add_argument("--csv", help="row output (flushed per row)")
    p.add_argument("--json", help="rows plus fits")
    p.add_argument("--plot", help="PNG with bytes, time and deviation curves (needs matplotlib)")
    p.set_defaults(fn=cmd_bench)
    return ap


def _alice_error(exc: BaseException) -> str:
    """Alice never echoes protocol-phase details; they could carry peer-derived data."""
    if isinstance(exc, (AgreementMismatch, PreprocessingExhausted, FileNotFoundError, ParseError)):
        return f"{type(exc).__name__}: {exc}"
    return f"{type(exc).__name__}: session aborted"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (EMLError, OSError, ValueError) as exc:
        msg = _alice_error(exc) if args.command == "alice" else f"{type(exc).__name__}: {exc}"
        print(f"eml {args.command}: {msg}", file=sys.stderr)
        return exit_code(exc)
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
