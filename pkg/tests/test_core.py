import numpy as np
import pytest

from fedforget.core import GAMMA, MASK64, Rng, check_shape, derive, derive_path, mix64, shuffle, uniform
from fedforget.errors import ShapeMismatch


def reference_splitmix(seed, n):
    """Sequential SplitMix64 written straight from the published algorithm."""
    state, out = seed, []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


@pytest.mark.parametrize("seed", [0, 1, 42, 1234567, MASK64])
def test_vectorised_stream_matches_sequential_reference(seed):
    got = Rng(seed).next_u64(257).tolist()
    assert got == reference_splitmix(seed, 257)


def test_stream_is_pinned():
    # frozen from reference_splitmix; a change here breaks every recorded run
    assert reference_splitmix(1234567, 3) == [6457827717110365317, 3203168211198807973, 9817491932198370423]
    assert Rng(1234567).next_u64(3).tolist() == [6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_draws_in_blocks_equal_one_long_draw():
    a = Rng(9)
    joined = np.concatenate([a.next_u64(5), a.next_u64(0), a.next_u64(11)])
    assert np.array_equal(joined, Rng(9).next_u64(16))


def test_derive_is_deterministic_and_leaves_parent_alone():
    parent = Rng(42)
    before = parent.state
    c1, c2 = derive(parent, 0), derive(parent, 0)
    assert parent.state == before
    assert np.array_equal(c1.uniform(1000), c2.uniform(1000))


def test_derive_indices_give_different_streams():
    a = derive(Rng(42), 0).uniform(1000)
    b = derive(Rng(42), 1).uniform(1000)
    assert np.any(a != b)


def test_derive_is_order_sensitive():
    s = Rng(7)
    a = derive(derive(s, 1), 2).uniform(1000)
    b = derive(derive(s, 2), 1).uniform(1000)
    assert np.any(a != b)
    assert derive_path(s, 1, 2).path == (1, 2)


def test_uniform_empty_and_range():
    assert uniform(Rng(1), 0).shape == (0,)
    u = uniform(Rng(1), 100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert 0.49 <= u.mean() <= 0.51


def test_uniform_same_seed_same_vector():
    assert np.array_equal(uniform(Rng(5), 100), uniform(Rng(5), 100))


def test_uniform_advances_state_by_n_draws():
    r = Rng(3)
    r.uniform(10)
    assert r.state == (3 + 10 * GAMMA) & MASK64


def test_normal_moments():
    z = Rng(2).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    assert Rng(2).normal((3, 5), 2.0).shape == (3, 5)


def test_shuffle_trivial_cases():
    assert shuffle(Rng(0), 0).tolist() == []
    assert shuffle(Rng(0), 1).tolist() == [0]
    assert np.array_equal(shuffle(Rng(4), 50), shuffle(Rng(4), 50))
    assert sorted(shuffle(Rng(4), 50).tolist()) == list(range(50))


def test_shuffle_is_uniform_on_three_elements():
    root = Rng(2024)
    counts = {}
    trials = 60_000
    for i in range(trials):
        key = tuple(derive(root, i).permutation(3).tolist())
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / trials - 1 / 6) <= 0.01


def test_mix64_known_zero():
    assert mix64(0) == 0


def test_check_shape():
    check_shape("x", np.zeros((2, 3)), (2, None))
    with pytest.raises(ShapeMismatch):
        check_shape("x", np.zeros((2, 3)), (3, 2))
