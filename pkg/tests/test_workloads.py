import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from limitless.workloads import (
    CounterState,
    FactorsState,
    MatrixState,
    UnknownWorkload,
    WorkloadError,
    counter_run,
    factors_run,
    get_workload,
    matrix_run,
    register,
    registered,
    unregister,
)
from limitless.workloads import kernels
from limitless.workloads import _kernels_py
from limitless.workloads.matrix import checksum, operands, product_rows

from oracles import M64, int32_operands, is_prime, matrix_checksum, naive_product, splitmix64, trial_division

try:
    from limitless.workloads import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on the build
    _compiled = None

BACKENDS = [pytest.param(_kernels_py, id="python"),
            pytest.param(_compiled, id="compiled",
                         marks=pytest.mark.skipif(_compiled is None, reason="extension not built"))]


def test_registry():
    assert registered() == ["counter", "factors", "matrix"]
    with pytest.raises(UnknownWorkload) as info:
        get_workload("nope")
    assert info.value.name == "nope"

    class Dummy(type(get_workload("counter"))):
        name = "dummy"

    register(Dummy())
    try:
        assert "dummy" in registered()
    finally:
        unregister("dummy")
    assert "dummy" not in registered()


# counter --------------------------------------------------------------------


def test_counter_zero():
    posts = []
    assert counter_run(0, partial_sink=posts.append) == 0
    assert posts == []


def test_counter_seventy_posts_every_tenth():
    posts, units = [], []
    assert counter_run(70, partial_sink=posts.append, step_hook=units.append) == 70
    assert posts == [{"count": c} for c in range(10, 71, 10)]
    assert units == [1] * 70


def test_counter_resumed_at_fifty_does_not_repost():
    posts = []
    assert counter_run(70, CounterState(70, 50, 50), partial_sink=posts.append) == 70
    assert posts == [{"count": 60}, {"count": 70}]


def test_counter_negative():
    with pytest.raises(WorkloadError):
        counter_run(-1)
    with pytest.raises(WorkloadError):
        get_workload("counter").initial_state(["-3"])


def test_counter_default_limit():
    assert get_workload("counter").initial_state([]) == {"limit": 70, "count": 0, "last_posted": 0}


# factors ----------------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(1, []), (2, [2]), (12, [2, 2, 3]), (97, [97]), (360, [2, 2, 2, 3, 3, 5])])
def test_factors_small(n, expected):
    assert factors_run(n) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10**7), st.integers(1, 50))
def test_factors_match_oracle_for_any_block(n, block):
    got = factors_run(n, block=block)
    assert got == trial_division(n)
    assert all(is_prime(p) for p in got)


def test_factors_resume_from_partial_state():
    st_ = FactorsState(n=360, n_remaining=45, divisor=3, factors_found=[2, 2, 2])
    assert factors_run(360, st_) == [2, 2, 2, 3, 3, 5]


def test_factors_units_per_block():
    units = []
    factors_run(97, step_hook=units.append, block=1)
    # probes 2,3,5,7,9 then 11*11 > 97 extracts the prime remainder
    assert len(units) == 6


def test_factors_invalid():
    with pytest.raises(WorkloadError):
        factors_run(0)
    w = get_workload("factors")
    with pytest.raises(WorkloadError):
        w.initial_state([])
    with pytest.raises(WorkloadError):
        w.initial_state(["10", "0"])


def test_factors_block_from_env(monkeypatch):
    w = get_workload("factors")
    assert w.initial_state(["10"], simulated=True)["block"] == 1
    assert w.initial_state(["10"])["block"] == 1_000_000
    monkeypatch.setenv("LF_FACTORS_BLOCK", "17")
    assert w.initial_state(["10"])["block"] == 17
    assert w.initial_state(["10", "5"])["block"] == 5


def test_factors_beyond_64_bits():
    assert factors_run(2**70 * 3, block=100) == [2] * 70 + [3]


# matrix -------------------------------------------------------------------------


def test_splitmix_frozen_values():
    # reference splitmix64 outputs for seed 0, low 32 bits as signed ints
    assert list(kernels.splitmix_int32(0, 3)) == [0x7B1DCDAF, 0xA1B965F4 - 2**32, -0x7FF6BAB1]
    gen = splitmix64(0)
    assert [next(gen) for _ in range(2)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4]


def test_operands_match_oracle():
    a, b = operands(3, 9)
    oa, ob = int32_operands(3, 9)
    assert list(a) == [x for row in oa for x in row]
    assert list(b) == [x for row in ob for x in row]


def test_identity_product_checksum():
    eye = [1 if i == j else 0 for i in range(4) for j in range(4)]
    rows = product_rows(eye, eye, 4)
    assert rows == [[1 if i == j else 0 for j in range(4)] for i in range(4)]
    assert checksum(rows) == 4


def test_negative_products_wrap_mod_2_64():
    rows = product_rows([-1], [5], 1)
    assert rows == [[M64 - 5]]


@pytest.mark.parametrize("size,seed", [(1, 0), (3, 42), (7, 1), (16, 2**33)])
def test_matrix_matches_naive_oracle(size, seed):
    got = matrix_run(size, seed)
    assert got == {"rows": size, "cols": size, "checksum": matrix_checksum(size, seed)}


def test_matrix_rows_match_direct_product():
    a, b = int32_operands(5, 3)
    want = [[v % M64 for v in row] for row in naive_product(a, b)]
    fa, fb = operands(5, 3)
    assert product_rows(fa, fb, 5) == want


def test_matrix_resume():
    full = matrix_run(6, 4)
    w = get_workload("matrix")
    state = w.initial_state(["6", "4"])
    for _ in range(3):
        w.step(state, lambda p: None)
    resumed = matrix_run(6, 4, MatrixState(**json.loads(json.dumps(state))))
    assert resumed == full


def test_matrix_invalid():
    with pytest.raises(WorkloadError):
        matrix_run(0, 0)
    with pytest.raises(WorkloadError):
        get_workload("matrix").initial_state([])


# kernels: compiled vs fallback ---------------------------------------------------


def test_backend_name():
    assert kernels.BACKEND in ("compiled", "python")


@pytest.mark.parametrize("impl", BACKENDS)
@settings(max_examples=150, deadline=None)
@given(n=st.integers(1, 2**63), d=st.integers(2, 1000), probes=st.integers(1, 500))
def test_factor_block_matches_reference(impl, n, d, probes):
    d = 2 if d == 2 else d | 1
    assert impl.factor_block(n, d, probes) == _kernels_py.factor_block(n, d, probes)
    n2, d2, found, used = impl.factor_block(n, d, probes)
    assert used <= probes


@pytest.mark.parametrize("impl", BACKENDS)
def test_factor_block_huge_n(impl):
    n = 2**80 + 1
    assert impl.factor_block(n, 2, 1000) == _kernels_py.factor_block(n, 2, 1000)


@pytest.mark.parametrize("impl", BACKENDS)
@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), count=st.integers(0, 64))
def test_splitmix_matches_reference(impl, seed, count):
    assert list(impl.splitmix_int32(seed, count)) == list(_kernels_py.splitmix_int32(seed, count))


@pytest.mark.parametrize("impl", BACKENDS)
@settings(max_examples=50, deadline=None)
@given(size=st.integers(1, 12), seed=st.integers(0, 1000), data=st.data())
def test_matmul_row_matches_reference(impl, size, seed, data):
    a, b = operands(size, seed)
    row = data.draw(st.integers(0, size - 1))
    assert impl.matmul_row(a, b, size, row) == _kernels_py.matmul_row(a, b, size, row)
