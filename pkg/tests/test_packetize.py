import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsvid import packetize as pk
from dsvid.codec import CodedTensor
from dsvid.frames import InvalidInputError


def _tensor(n, seed=0):
    """Flat test tensor with dims (1, 1, n)."""
    rng = np.random.default_rng(seed)
    sym = rng.integers(-100, 101, n).astype(np.int32)
    return CodedTensor("I", (1, 1, n), sym, 4.0, 0)


def _bruteforce_assignment(pmap):
    """Independent element -> (packet, slot) table from the definition:
    q = (i * p) mod N, packet = q mod k, slot = q div k."""
    table = {}
    for i in range(pmap.num_elements):
        q = (i * pmap.prime) % pmap.num_elements
        table[i] = (q % pmap.num_packets, q // pmap.num_packets)
    return table


class TestMakeMap:
    def test_prime_coprime_and_inverse(self):
        for n, k, seed in ((7, 3, 0), (100, 8, 5), (3072, 16, 99)):
            pmap = pk.make_map(n, k, seed)
            assert (pmap.prime * pmap.prime_inverse) % n == 1
            assert pmap.num_elements == n and pmap.num_packets == k

    def test_k_greater_than_n_rejected(self):
        with pytest.raises(InvalidInputError):
            pk.make_map(4, 5, 0)

    def test_deterministic(self):
        assert pk.make_map(1000, 8, 42) == pk.make_map(1000, 8, 42)

    @given(st.integers(1, 3000), st.integers(1, 24), st.integers(0, 2 ** 31))
    @settings(max_examples=60, deadline=None)
    def test_permutation_is_bijection(self, n, k, seed):
        k = min(k, n)
        pmap = pk.make_map(n, k, seed)
        i = np.arange(n, dtype=np.int64)
        sigma = (i * pmap.prime) % n
        assert len(np.unique(sigma)) == n
        # inverse recovers every index
        assert np.array_equal((sigma * pmap.prime_inverse) % n, i)


class TestPacketize:
    def test_single_packet_holds_everything(self):
        pmap = pk.make_map(6, 1, 3)
        lists = pk.packetize(_tensor(6), pmap)
        assert len(lists) == 1
        assert sorted(lists[0].element_values.tolist()) == \
            sorted(_tensor(6).symbols.tolist())

    def test_small_map_matches_bruteforce_table(self):
        pmap = pk.make_map(7, 3, 0)
        table = _bruteforce_assignment(pmap)
        tensor = _tensor(7)
        lists = pk.packetize(tensor, pmap)
        for i, (j, s) in table.items():
            assert lists[j].element_values[s] == tensor.symbols[i]

    def test_even_split(self):
        pmap = pk.make_map(8, 4, 0)
        lists = pk.packetize(_tensor(8), pmap)
        assert [l.element_count for l in lists] == [2, 2, 2, 2]

    def test_uneven_split_sizes(self):
        pmap = pk.make_map(10, 4, 0)
        sizes = sorted(l.element_count for l in pk.packetize(_tensor(10), pmap))
        assert sizes == [2, 2, 3, 3]

    def test_size_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            pk.packetize(_tensor(10), pk.make_map(11, 4, 0))

    @given(st.integers(1, 2000), st.integers(1, 24), st.integers(0, 10 ** 6))
    @settings(max_examples=60, deadline=None)
    def test_partition_and_balance(self, n, k, seed):
        k = min(k, n)
        pmap = pk.make_map(n, k, seed)
        sizes = [pmap.packet_size(j) for j in range(k)]
        assert sum(sizes) == n
        assert max(sizes) - min(sizes) <= 1
        all_idx = np.concatenate(
            [pk._origin_indices(pmap, j) for j in range(k)])
        assert len(np.unique(all_idx)) == n


class TestDepacketize:
    def test_lossless_round_trip(self):
        tensor = _tensor(3072, seed=2)
        pmap = pk.make_map(3072, 16, 7)
        lists = pk.packetize(tensor, pmap)
        back = pk.depacketize({l.packet_index: l for l in lists}, pmap,
                              tensor.dims)
        assert np.array_equal(back.symbols, tensor.symbols)

    def test_total_loss_gives_zero_tensor(self):
        pmap = pk.make_map(100, 8, 0)
        back = pk.depacketize({}, pmap, (1, 1, 100))
        assert not back.symbols.any()

    def test_dropped_packets_zero_exactly_their_positions(self):
        tensor = _tensor(500, seed=3)
        # all symbols nonzero so zeros are unambiguous
        tensor = CodedTensor("I", tensor.dims,
                             np.where(tensor.symbols == 0, 1,
                                      tensor.symbols).astype(np.int32),
                             4.0, 0)
        pmap = pk.make_map(500, 16, 1)
        table = _bruteforce_assignment(pmap)
        lists = pk.packetize(tensor, pmap)
        dropped = {3, 7}
        received = {l.packet_index: l for l in lists
                    if l.packet_index not in dropped}
        back = pk.depacketize(received, pmap, tensor.dims)
        lost_positions = {i for i, (j, _) in table.items() if j in dropped}
        for i in range(500):
            if i in lost_positions:
                assert back.symbols[i] == 0
            else:
                assert back.symbols[i] == tensor.symbols[i]

    def test_duplicate_packet_rejected(self):
        tensor = _tensor(40)
        pmap = pk.make_map(40, 4, 0)
        lists = pk.packetize(tensor, pmap)
        bad = {0: lists[0], 1: pk.ElementList(0, lists[0].element_values)}
        with pytest.raises(InvalidInputError):
            pk.depacketize(bad, pmap, tensor.dims)

    def test_wrong_element_count_rejected(self):
        tensor = _tensor(40)
        pmap = pk.make_map(40, 4, 0)
        lists = pk.packetize(tensor, pmap)
        bad = {0: pk.ElementList(0, lists[0].element_values[:-1])}
        with pytest.raises(InvalidInputError):
            pk.depacketize(bad, pmap, tensor.dims)
