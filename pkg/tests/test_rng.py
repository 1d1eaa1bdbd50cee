from hypothesis import given
from hypothesis import strategies as st

from pmelab.rng import Stream, splitmix64, xoshiro_from_state


def test_xoshiro256starstar_reference_vector():
    bg = xoshiro_from_state([1, 2, 3, 4])
    assert [int(x) for x in bg.random_raw(4)] == [11520, 0, 1509978240, 1215971899390074240]


def test_splitmix64_reference_vector():
    assert splitmix64(1234567, 5) == [6457827717110365317, 3203168211198807973,
                                      9817491932198370423, 4593380528125082431,
                                      16408922859458223821]


@given(st.integers(0, 2**63), st.text(max_size=12))
def test_streams_reproducible(seed, name):
    assert Stream(seed, name).raw(3) == Stream(seed, name).raw(3)


def test_named_splits_differ():
    root = Stream(7)
    a, b = root.split("a"), root.split("b")
    assert a.raw(4) != b.raw(4)
    assert root.split("a").split("x").raw(2) == Stream(7, "a/x").raw(2)
    assert Stream(7, "a").raw(2) != Stream(8, "a").raw(2)
