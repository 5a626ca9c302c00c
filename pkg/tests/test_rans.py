"""Entropy coder unit tests.

The transition oracle values are worked out by hand from the update rule
state' = (state // f) << precision | (state % f) + cdf[s], starting from the
fresh state 2**32.
"""

import math

import numpy as np
import pytest

from drr.errors import DataCorruptionError, ExhaustedStreamError, InvalidInputError
from drr.rans import (
    RANS_L,
    AnsCoder,
    entropy_from_freqs,
    entropy_from_sample,
    pmf_quantize,
)


class TestPmfQuantize:
    def test_uniform_pair_splits_evenly(self):
        pmf = pmf_quantize([0.5, 0.5], precision=12)
        assert pmf.freqs.tolist() == [2048, 2048]
        assert pmf.cdf.tolist() == [0, 2048, 4096]

    def test_point_mass_keeps_minimum_frequency(self):
        pmf = pmf_quantize([1.0, 0.0], precision=12)
        assert pmf.freqs.tolist() == [4095, 1]

    def test_ties_go_to_lowest_symbol(self):
        # 3 equal probabilities at precision 4: 16/3 = 5.33..., so two
        # symbols get 5 and one gets 6; the extra unit lands on symbol 0.
        pmf = pmf_quantize([1.0, 1.0, 1.0], precision=4)
        assert pmf.freqs.tolist() == [6, 5, 5]

    def test_rejects_oversized_alphabet(self):
        with pytest.raises(InvalidInputError):
            pmf_quantize(np.ones(17), precision=4)

    def test_rejects_bad_mass(self):
        with pytest.raises(InvalidInputError):
            pmf_quantize([0.0, 0.0])
        with pytest.raises(InvalidInputError):
            pmf_quantize([0.3, -0.1])

    def test_fuzz_invariants(self):
        rng = np.random.default_rng(42)
        for _ in range(500):
            n = int(rng.integers(1, 200))
            precision = int(rng.integers(8, 17))
            probs = rng.random(n) ** 3  # skewed, with near-zero entries
            pmf = pmf_quantize(probs, precision=precision)
            assert pmf.freqs.min() >= 1
            assert pmf.freqs.sum() == 1 << precision
            assert np.all(np.diff(pmf.cdf) >= 1)
            assert pmf.cdf[0] == 0 and pmf.cdf[-1] == 1 << precision

    def test_dyadic_probs_sum_to_one_exactly(self):
        pmf = pmf_quantize(np.random.default_rng(0).random(37))
        assert pmf.probs().sum() == 1.0


class TestEntropy:
    def test_uniform_512_is_nine_bits(self):
        assert entropy_from_freqs(np.ones(512)) == pytest.approx(9.0, abs=1e-12)

    def test_sample_entropy_close_to_source(self):
        rng = np.random.default_rng(7)
        pmf = pmf_quantize(rng.random(32))
        sample = rng.choice(32, size=100_000, p=pmf.probs())
        h = entropy_from_sample(sample, alphabet_size=32)
        assert abs(h - entropy_from_freqs(pmf.freqs)) < 0.05


class TestCoderTransitions:
    def test_single_push_matches_hand_computed_state(self):
        # f=2048, c=0, precision 12, from state 2**32:
        # (2**32 // 2048) << 12 == 2**33, remainder and cdf both 0.
        coder = AnsCoder()
        coder.push(0, pmf_quantize([0.5, 0.5]))
        assert coder.state == 2**33
        assert len(coder.stack) == 0

    def test_two_pushes_match_hand_computed_state(self):
        # push 1: 2**21 * 4096 + 0 + 2048 = 2**33 + 2048
        # push 0: ((2**33 + 2048) // 2048) << 12 = (2**22 + 1) * 4096
        coder = AnsCoder()
        pmf = pmf_quantize([0.5, 0.5])
        coder.push(1, pmf)
        assert coder.state == 2**33 + 2048
        coder.push(0, pmf)
        assert coder.state == 2**34 + 4096

    def test_renormalization_emits_low_bytes(self):
        coder = AnsCoder()
        pmf = pmf_quantize([0.5, 0.5])
        # Each push adds ~1 bit; from 2**32 the state hits the 2**39 ceiling
        # after 7 pushes, so the 8th must spill a byte.
        for _ in range(8):
            coder.push(0, pmf)
        assert len(coder.stack) == 1
        assert RANS_L <= coder.state < RANS_L << 8

    def test_state_stays_in_normalized_interval(self):
        rng = np.random.default_rng(3)
        coder = AnsCoder()
        pmf = pmf_quantize(rng.random(11), precision=9)
        for s in rng.integers(0, 11, size=2000):
            coder.push(int(s), pmf)
            assert RANS_L <= coder.state < RANS_L << 8


class TestRoundTrip:
    def test_push_pop_restores_coder_exactly(self):
        coder = AnsCoder.with_random_bits(256, seed=0)
        before = coder.serialize()
        ideal_before = coder.ideal_bits
        pmf = pmf_quantize([0.2, 0.5, 0.3])
        coder.push(2, pmf)
        assert coder.pop(pmf) == 2
        assert coder.serialize() == before
        assert coder.ideal_bits == ideal_before

    def test_lifo_order(self):
        pmf = pmf_quantize([0.1, 0.6, 0.3])
        coder = AnsCoder()
        for s in [0, 1, 2, 1]:
            coder.push(s, pmf)
        assert [coder.pop(pmf) for _ in range(4)] == [1, 2, 1, 0]

    def test_fuzz_sequences_with_mixed_pmfs(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            n_sym = int(rng.integers(2, 40))
            pmf = pmf_quantize(rng.random(n_sym) + 1e-3, precision=int(rng.integers(8, 15)))
            seq = rng.integers(0, n_sym, size=int(rng.integers(1, 60))).tolist()
            coder = AnsCoder()
            start = coder.serialize()
            for s in seq:
                coder.push(s, pmf)
            out = [coder.pop(pmf) for _ in seq]
            assert out == seq[::-1]
            assert coder.serialize() == start

    def test_pop_from_random_bits_is_decodable_and_invertible(self):
        pmf = pmf_quantize([0.25, 0.25, 0.25, 0.25])
        coder = AnsCoder.with_random_bits(64, seed=5)
        before = coder.serialize()
        s = coder.pop(pmf)
        assert 0 <= s < 4
        coder.push(s, pmf)
        assert coder.serialize() == before

    def test_point_mass_pop_consumes_almost_nothing(self):
        pmf = pmf_quantize([1.0, 0.0], precision=12)
        coder = AnsCoder.with_random_bits(64, seed=1)
        start = coder.ideal_bits
        s = coder.pop(pmf)  # overwhelmingly symbol 0 at freq 4095
        assert s == 0
        assert abs((start - coder.ideal_bits) - pmf.cost_bits(0)) < 1e-12
        assert pmf.cost_bits(0) < 0.001

    def test_exhausted_stack_raises(self):
        coder = AnsCoder()  # minimum state, empty stack
        with pytest.raises(ExhaustedStreamError):
            coder.pop(pmf_quantize([0.5, 0.5]))


class TestRate:
    def test_compression_close_to_entropy(self):
        rng = np.random.default_rng(21)
        n = 20_000
        pmf = pmf_quantize(rng.random(16) + 0.05)
        symbols = rng.choice(16, size=n, p=pmf.probs())
        coder = AnsCoder()
        for s in symbols:
            coder.push(int(s), pmf)
        bits_per_symbol = coder.bit_length / n
        h = entropy_from_freqs(pmf.freqs)
        assert bits_per_symbol <= h + 0.1 + 64 / n


class TestSerialization:
    def test_round_trip_identity(self):
        rng = np.random.default_rng(13)
        pmf = pmf_quantize(rng.random(9))
        coder = AnsCoder.with_random_bits(128, seed=2)
        for s in rng.integers(0, 9, size=100):
            coder.push(int(s), pmf)
        blob = coder.serialize()
        back = AnsCoder.deserialize(blob)
        assert back == coder
        assert back.serialize() == blob

    def test_bad_magic_rejected(self):
        blob = bytearray(AnsCoder().serialize())
        blob[0] ^= 0xFF
        with pytest.raises(DataCorruptionError):
            AnsCoder.deserialize(bytes(blob))

    def test_truncation_rejected(self):
        blob = AnsCoder.with_random_bits(64, seed=0).serialize()
        with pytest.raises(DataCorruptionError):
            AnsCoder.deserialize(blob[:-1])


class TestCostAccounting:
    def test_cost_bits_matches_negative_log2(self):
        pmf = pmf_quantize([0.7, 0.2, 0.1], precision=10)
        for s in range(3):
            expected = -math.log2(pmf.freqs[s] / 1024)
            assert pmf.cost_bits(s) == pytest.approx(expected, abs=1e-12)

    def test_ideal_bits_tracks_pushes(self):
        pmf = pmf_quantize([0.9, 0.1])
        coder = AnsCoder()
        total = 0.0
        for s in [0, 1, 0, 0]:
            coder.push(s, pmf)
            total += pmf.cost_bits(s)
        assert coder.ideal_bits == pytest.approx(total, abs=1e-12)
