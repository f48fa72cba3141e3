import logging
import time

import numpy as np
import pytest
import torch

from textmotion.config import DecodeSchedule, MmtConfig
from textmotion.errors import ContractError, ShapeError
from textmotion.inference import (DecodeTrace, complete, completion_spans, decode_tokens, masked_after,
                                  temperature_at, trim_at_end)
from textmotion.mmt import TextMotionModel

CFG = MmtConfig(n_codes=12, n_layers=2, first_half=1, n_heads=2, head_dim=8, max_positions=64,
                text_vocab=128, text_layers=1, text_heads=2)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = TextMotionModel(CFG).eval()
    # sharpen the random model so confidences are well separated
    with torch.no_grad():
        m.mmt.head.weight.mul_(8.0)
    return m


@pytest.fixture(scope="module")
def text(model):
    with torch.no_grad():
        return model.text_encoder.encode_text("a person walks in a circle")


class TestSchedule:
    @pytest.mark.parametrize("kind", ["cosine", "linear"])
    def test_non_increasing_and_ends_at_zero(self, kind):
        for T in (1, 3, 10, 15):
            s = DecodeSchedule(iterations=T, schedule=kind)
            for n in (1, 7, 48):
                ks = [masked_after(t, n, s) for t in range(T + 1)]
                assert ks[0] == n and ks[-1] == 0
                assert all(a >= b for a, b in zip(ks, ks[1:]))

    def test_cosine_values(self):
        s = DecodeSchedule(iterations=10)
        assert masked_after(5, 48, s) == int(np.ceil(48 * np.cos(np.pi / 4)))

    def test_single_iteration_decodes_everything(self):
        assert masked_after(1, 30, DecodeSchedule(iterations=1)) == 0

    def test_temperature_anneal(self):
        s = DecodeSchedule(iterations=4, temperature=2.0)
        assert [temperature_at(t, s) for t in range(5)] == [2.0, 1.5, 1.0, 0.5, 0.0]

    def test_bad_schedule(self):
        with pytest.raises(ContractError):
            DecodeSchedule(iterations=0).validate()


def greedy_oracle(model, text, n):
    """Re-run the model and commit the single most confident masked slot each round."""
    seq = np.full(n, model.cfg.mask_id, dtype=np.int64)
    tb = None if text is None else (text.token_embeddings[None], torch.ones(1, text.token_count, dtype=torch.bool),
                                    text.global_feature[None])
    while (seq == model.cfg.mask_id).any():
        with torch.no_grad():
            p = torch.softmax(model(torch.from_numpy(seq)[None], None, tb)[0], -1).double().numpy()
        best, best_conf = None, -1.0
        for i in np.flatnonzero(seq == model.cfg.mask_id):
            c = p[i].max()
            if c > best_conf:
                best, best_conf = i, c
        seq[best] = int(p[best].argmax())
    return seq


class TestDecode:
    def test_greedy_oracle_equivalence(self, model, text):
        rng = np.random.default_rng(0)
        for r in range(50):
            n = int(rng.integers(1, 9))
            s = DecodeSchedule(iterations=n, temperature=0.0, schedule="linear", seed=r)
            got = decode_tokens(model, text if r % 2 else None, np.zeros(n, dtype=np.int64),
                                np.zeros(n, dtype=bool), s)
            np.testing.assert_array_equal(got, greedy_oracle(model, text if r % 2 else None, n))

    def test_one_shot(self, model, text):
        trace = DecodeTrace()
        out = decode_tokens(model, text, np.zeros(10, dtype=np.int64), np.zeros(10, dtype=bool),
                            DecodeSchedule(iterations=1), trace)
        assert len(trace.committed_per_step) == 1 and len(trace.committed_per_step[0]) == 10
        assert bool((out <= CFG.n_codes).all())

    def test_deterministic(self, model, text):
        s = DecodeSchedule(seed=7)
        a = decode_tokens(model, text, np.zeros(20, dtype=np.int64), np.zeros(20, dtype=bool), s)
        b = decode_tokens(model, text, np.zeros(20, dtype=np.int64), np.zeros(20, dtype=bool), s)
        assert a.tobytes() == b.tobytes()

    def test_monotone_commitment(self, model, text):
        trace = DecodeTrace()
        s = DecodeSchedule(iterations=10, seed=3)
        out = decode_tokens(model, text, np.zeros(30, dtype=np.int64), np.zeros(30, dtype=bool), s, trace)
        seen = np.concatenate(trace.committed_per_step)
        assert len(seen) == len(set(seen.tolist())) == 30
        for prev, nxt in zip(trace.snapshots, trace.snapshots[1:] + [out]):
            done = prev != CFG.mask_id
            np.testing.assert_array_equal(prev[done], nxt[done])
        counts = [len(c) for c in trace.committed_per_step]
        expected = [masked_after(t - 1, 30, s) - masked_after(t, 30, s) for t in range(1, 11)]
        assert counts == [c for c in expected if c > 0]

    def test_empty_sequence(self, model):
        with pytest.raises(ShapeError):
            decode_tokens(model, None, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool), DecodeSchedule())

    def test_latency_linear_in_iterations(self, model, text):
        its = [1, 5, 10, 15]
        times = []
        for T in its:
            runs = []
            for _ in range(5):
                t0 = time.perf_counter()
                decode_tokens(model, text, np.zeros(40, dtype=np.int64), np.zeros(40, dtype=bool),
                              DecodeSchedule(iterations=T))
                runs.append(time.perf_counter() - t0)
            times.append(np.median(runs))
        r = np.corrcoef(its, times)[0, 1]
        assert r ** 2 > 0.95


class TestComplete:
    @pytest.mark.parametrize("mode", ["prefix", "suffix", "infix"])
    def test_observed_spans_bit_exact(self, model, text, mode):
        rng = np.random.default_rng(1)
        for case in range(34):
            n = int(rng.integers(4, 48))
            tokens = rng.integers(0, CFG.n_codes, n)
            obs, gen = completion_spans(n, mode)
            out = complete(model, text, tokens, obs, gen, DecodeSchedule(seed=case))
            for a, b in obs:
                assert out[a:b].tobytes() == tokens[a:b].tobytes()
            assert not (out == CFG.mask_id).any()

    def test_table_splits(self):
        assert completion_spans(48, "prefix") == ([(0, 24)], [(24, 48)])
        assert completion_spans(48, "suffix") == ([(24, 48)], [(0, 24)])
        assert completion_spans(48, "infix") == ([(0, 12), (36, 48)], [(12, 36)])

    def test_nothing_hidden_returns_input(self, model, text):
        tokens = np.arange(10) % CFG.n_codes
        obs, gen = completion_spans(10, "infix", hidden_fraction=0.0)
        np.testing.assert_array_equal(complete(model, text, tokens, obs, gen, DecodeSchedule()), tokens)

    def test_overlap_rejected(self, model):
        with pytest.raises(ContractError):
            complete(model, None, np.zeros(8, dtype=np.int64), [(0, 5)], [(4, 8)], DecodeSchedule())

    def test_uncovered_rejected(self, model):
        with pytest.raises(ContractError):
            complete(model, None, np.zeros(8, dtype=np.int64), [(0, 3)], [(4, 8)], DecodeSchedule())

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            completion_spans(8, "middle")


class TestTrim:
    def test_cases(self, caplog):
        end = CFG.end_id
        assert trim_at_end([5, 9, end, 7], end).tolist() == [5, 9]
        assert trim_at_end([5, 9, 7], end).tolist() == [5, 9, 7]
        with caplog.at_level(logging.WARNING):
            assert trim_at_end([end, 1], end).tolist() == []
        assert "position 0" in caplog.text
