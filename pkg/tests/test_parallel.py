import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from randgreen.ensemble import FiniteMixture
from randgreen.measure import generic_starts, run_chains
from randgreen.parallel import map_blocks
from randgreen.proj import RationalMap

MIX = FiniteMixture.uniform([RationalMap.quadratic(0), RationalMap.quadratic(-1)])


@settings(max_examples=20)
@given(st.integers(0, 200), st.integers(1, 50))
def test_blocks_cover_range_in_order(n, block):
    parts = map_blocks(lambda a, b: list(range(a, b)), n, block)
    assert sum(parts, []) == list(range(n))


def chains_block(a, b):
    ids = np.arange(a, b)
    return run_chains(MIX, generic_starts(5, b)[a:b], 20, 5, ids)


def test_worker_count_does_not_change_results():
    one = np.concatenate(map_blocks(chains_block, 100, block=16, workers=1))
    two = np.concatenate(map_blocks(chains_block, 100, block=16, workers=3))
    np.testing.assert_array_equal(one, two)


def test_chain_ids_fix_the_randomness():
    X0 = generic_starts(1, 10)
    full = run_chains(MIX, X0, 15, 2, np.arange(10))
    part = run_chains(MIX, X0[4:7], 15, 2, np.arange(4, 7))
    np.testing.assert_array_equal(full[4:7], part)
