import json

import numpy as np
import pytest

from eml.emulate import emulate_predict
from eml.errors import DimensionMismatch, MacCheckFailed, PreprocessingExhausted, RangeError, SplitMismatch
from eml.field import Field, FixedPointParams, prime_for
from eml.krr import predict_plaintext, train
from eml.mpc import ExpConfig
from eml.preprocessing.dealer import Dealer
from eml.protocol import (
    AliceSession,
    cost_model,
    encode_model,
    encode_query,
    query_plan,
    run_local,
    session_id,
    session_plan,
    session_terms,
)
from eml.runtime import local_parties

FP15 = FixedPointParams.from_precision(15)
FP42 = FixedPointParams.from_precision(42)


@pytest.fixture(scope="module")
def small_model(syn_small):
    X, y = syn_small
    return train(X[:12], y[:12], 400.0, 1e-6, unit="kcal/mol", center=True), X[100:103], y[100:103]


def test_single_point_interpolation_at_p42():
    X = np.array([[0.3, -1.2, 2.0]])
    m = train(X, [4.25], sigma=2.0, lam=0.0)
    rep = run_local(m, X, FP42, seed=1)
    assert abs(rep.predictions[0] - 4.25) <= 1e-6


@pytest.mark.parametrize("params", [FP15, FP42], ids=["P15", "P42"])
def test_protocol_matches_emulator_bit_for_bit(small_model, params):
    m, XQ, yq = small_model
    rep = run_local(m, XQ, params, seed=3, y_true=yq)
    assert np.array_equal(rep.predictions, emulate_predict(m, XQ, params))
    assert np.allclose(rep.plaintext, predict_plaintext(m, XQ))
    assert rep.mae is not None and rep.delta == pytest.approx(
        np.mean(np.abs(rep.predictions - rep.plaintext)))


def test_cost_model_matches_meter_exactly(small_model):
    m, XQ, _ = small_model
    rep = run_local(m, XQ, FP15, seed=4)
    cm = cost_model(m.N, m.L, FP15)
    assert rep.query_bytes == [cm.bytes_per_query] * len(XQ)
    assert rep.setup_bytes == cm.setup_bytes
    assert cm.element_bytes == Field(prime_for(FP15)).nbytes


def test_cost_model_with_chunked_frames(small_model):
    m, XQ, _ = small_model
    A, B = local_parties(FP15, seed=5, max_frame=1000)
    rep = run_local(m, XQ[:1], FP15, parties=(A, B))
    assert rep.query_bytes[0] == cost_model(m.N, m.L, FP15, max_frame=1000).bytes_per_query


def test_session_plan_is_exactly_enough(small_model):
    m, XQ, _ = small_model
    field = Field(prime_for(FP15))
    plan = session_plan(m.N, m.L, len(XQ), FP15)
    sa, sb = Dealer(field, seed=6).stores(plan)
    rep = run_local(m, XQ, FP15, stores=(sa, sb))
    assert np.array_equal(rep.predictions, emulate_predict(m, XQ, FP15))
    assert sa.inventory() == {} and sb.inventory() == {}
    assert sa.consumed == {k: v for k, v in plan.items() if v}


def test_short_preprocessing_is_reported(small_model):
    m, XQ, _ = small_model
    field = Field(prime_for(FP15))
    sa, sb = Dealer(field, seed=7).stores(session_plan(m.N, m.L, 1, FP15))
    with pytest.raises(PreprocessingExhausted):
        run_local(m, XQ[:2], FP15, stores=(sa, sb))


def test_same_seed_same_traffic_and_predictions(small_model):
    m, XQ, _ = small_model
    r1 = run_local(m, XQ, FP15, seed=8)
    r2 = run_local(m, XQ, FP15, seed=8)
    assert r1.query_bytes == r2.query_bytes
    assert np.array_equal(r1.predictions, r2.predictions)
    assert r1.traffic.as_dict()["online"]["bytes_sent"] == r2.traffic.as_dict()["online"]["bytes_sent"]


def test_online_bytes_double_with_N(syn_small):
    X, y = syn_small
    q = X[110:111]
    b = {}
    for N in (16, 32):
        m = train(X[:N], y[:N], 400.0, 1e-6, center=True)
        b[N] = run_local(m, q, FP15, seed=9).query_bytes[0]
    assert b[32] / b[16] == pytest.approx(2.0, rel=0.01)


def test_query_plan_scales_linearly():
    p1 = query_plan(10, 20, FP15)
    p2 = query_plan(20, 20, FP15)
    assert all(p2[k] >= p1[k] for k in p1)


def test_out_of_range_inputs(small_model):
    m, XQ, _ = small_model
    with pytest.raises(RangeError):
        encode_query(XQ * 1e6, m.sigma, FP15)
    big = train(m.X, m.alpha * 0 + 1e9, m.sigma, 1e-6)
    with pytest.raises(RangeError):
        encode_model(big, FixedPointParams.from_precision(10))
    with pytest.raises(DimensionMismatch):
        run_local(m, XQ[:, :5], FP15, seed=1)


def test_tampering_aborts_without_reveal(small_model):
    m, XQ, _ = small_model
    with pytest.raises(MacCheckFailed):
        run_local(m, XQ[:1], FP15, seed=10, tamper={"target": "open", "delta": 1, "index": 50})


def test_alice_rejects_a_second_split(small_model, syn_small):
    m, _, _ = small_model
    X, y = syn_small
    other = train(X[20:32], y[20:32], 400.0, 1e-6)
    A, _ = local_parties(FP15, seed=11)
    alice = AliceSession(A)
    alice.split_id = m.split_id
    with pytest.raises(SplitMismatch):
        alice.load_model(other)


def test_session_terms_bind_the_configuration():
    t1 = session_terms(prime_for(FP15), FP15, 351, 640.0, ExpConfig())
    t2 = session_terms(prime_for(FP15), FP15, 351, 640.0, ExpConfig(d=9))
    assert session_id(t1) != session_id(t2)
    assert json.loads(json.dumps(t1)) == t1


def test_report_serialization(small_model, tmp_path):
    m, XQ, yq = small_model
    rep = run_local(m, XQ, FP15, seed=12, y_true=yq)
    blob = json.loads(rep.to_json(tmp_path / "r.json"))
    assert blob["N"] == m.N and len(blob["predictions"]) == len(XQ)
    assert json.loads((tmp_path / "r.json").read_text()) == blob
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("index,prediction") and len(lines) == len(XQ) + 1
    assert rep.time_per_query > 0 and rep.bytes_per_query > 0
