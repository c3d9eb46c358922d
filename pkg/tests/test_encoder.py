import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from trisim.encoder import (BlockSelection, FormatError, SynthEncoder, TokenSequence, load_block_stack,
                            pad_to, select_blocks, synth_encode, synonyms, write_block_stack)


@pytest.fixture(scope="module")
def enc():
    return SynthEncoder(vocab=20, H=4, D=6, seed=3)


class TestPadTo:
    def test_pad(self):
        s = pad_to([5, 6, 7], 5)
        assert s.tokens == (5, 6, 7, 0, 0)
        assert s.mask == (True, True, True, False, False)
        assert s.length == 3

    def test_truncate(self):
        s = pad_to(list(range(1, 8)), 5)
        assert s.tokens == (1, 2, 3, 4, 5)
        assert all(s.mask)

    def test_exact(self):
        s = pad_to([4, 4, 4, 4, 4], 5)
        assert s.tokens == (4,) * 5 and all(s.mask)

    def test_bad_length(self):
        with pytest.raises(ValueError):
            pad_to([1], 0)


class TestSynthEncoder:
    def test_shape_and_dtype(self, enc):
        out = enc.encode([1, 2, 3], L=5)
        assert out.shape == (4, 5, 6) and out.dtype == np.float32

    def test_pad_rows_zero_in_every_block(self, enc):
        out = enc.encode([1, 2, 3], L=6)
        assert not out[:, 3:].any()
        assert out[0, :3].any()

    def test_deterministic(self, enc):
        again = SynthEncoder(vocab=20, H=4, D=6, seed=3)
        assert_array_equal(enc.encode([3, 9, 4], 5), again.encode([3, 9, 4], 5))
        assert_array_equal(enc.encode([3, 9, 4], 5), enc.encode([3, 9, 4], 5))

    def test_single_token_hand_composition(self, enc):
        out = enc.encode([7], L=3).astype(np.float64)
        e = enc.embedding[7]
        block1 = np.maximum(enc.mix_w[0] @ e + enc.mix_b[0], 0.0)
        np.testing.assert_allclose(out[0, 0], e, rtol=1e-6)
        np.testing.assert_allclose(out[1, 0], block1, rtol=1e-5, atol=1e-5)

    def test_token_out_of_range(self, enc):
        with pytest.raises(ValueError):
            enc.encode([20], L=3)

    def test_synonyms_share_centre(self):
        enc = SynthEncoder(vocab=50, H=1, D=32, seed=0)
        e = enc.embedding
        cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)
        assert synonyms(3, 50) == [3, 4]
        assert cos(e[3], e[4]) > cos(e[3], e[5]) + 0.3

    def test_synth_encode_list(self, enc):
        blocks = synth_encode(TokenSequence((1, 2)), enc, 4)
        assert len(blocks) == 4 and blocks[0].shape == (4, 6)


class TestSelectBlocks:
    def test_half_strategies_h12(self):
        assert BlockSelection("top_half").indices(12) == list(range(6, 12))
        assert BlockSelection("bottom_half").indices(12) == list(range(6))
        assert BlockSelection("spaced_half").indices(12) == [0, 2, 4, 6, 8, 10]

    def test_all_identity(self):
        stack = np.random.default_rng(0).standard_normal((5, 3, 2))
        assert select_blocks(stack, "all") is stack

    def test_order_preserved(self):
        stack = np.arange(4)[:, None, None] * np.ones((4, 2, 2))
        assert_array_equal(select_blocks(stack, [1, 3])[:, 0, 0], [1, 3])

    def test_odd_h_rounds_up(self):
        assert BlockSelection("top_half").indices(5) == [2, 3, 4]

    @pytest.mark.parametrize("bad", [(0, 12), (), (3, 1), (-1,)])
    def test_explicit_errors(self, bad):
        with pytest.raises(ValueError):
            BlockSelection(bad).indices(12)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            BlockSelection("middle").indices(4)


class TestEmbeddingFile:
    def test_round_trip_bit_exact(self, tmp_path):
        stack = np.random.default_rng(1).standard_normal((3, 4, 5)).astype(np.float32)
        stack[0, 0, 0] = -0.0
        stack[1, 1, 1] = np.float32(1e-45)  # subnormal
        write_block_stack(tmp_path / "a.tsb", stack)
        back = load_block_stack(tmp_path / "a.tsb")
        assert back.tobytes() == stack.tobytes()

    def test_hand_written_fixture(self, tmp_path):
        raw = bytes.fromhex("54534231" "01000000" "01000000" "02000000" "0000803f" "00000040")
        (tmp_path / "fix.tsb").write_bytes(raw)
        out = load_block_stack(tmp_path / "fix.tsb")
        assert out.shape == (1, 1, 2)
        assert_array_equal(out, [[[1.0, 2.0]]])
        write_block_stack(tmp_path / "again.tsb", out)
        assert (tmp_path / "again.tsb").read_bytes() == raw

    def test_large_boundary(self, tmp_path):
        header = struct.pack("<4sIII", b"TSB1", 12, 32, 768)
        n = 12 * 32 * 768
        (tmp_path / "ok.tsb").write_bytes(header + bytes(4 * n))
        assert load_block_stack(tmp_path / "ok.tsb").shape == (12, 32, 768)
        (tmp_path / "short.tsb").write_bytes(header + bytes(4 * (n - 1)))
        with pytest.raises(FormatError, match="truncated payload") as info:
            load_block_stack(tmp_path / "short.tsb")
        assert info.value.offset == 16 + 4 * (n - 1)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.tsb").write_bytes(struct.pack("<4sIII", b"TSB2", 1, 1, 1) + bytes(4))
        with pytest.raises(FormatError, match="magic") as info:
            load_block_stack(tmp_path / "m.tsb")
        assert info.value.offset == 0

    def test_truncated_header(self, tmp_path):
        (tmp_path / "h.tsb").write_bytes(b"TSB1\x01\x00")
        with pytest.raises(FormatError, match="header"):
            load_block_stack(tmp_path / "h.tsb")

    def test_overflow(self, tmp_path):
        (tmp_path / "o.tsb").write_bytes(struct.pack("<4sIII", b"TSB1", 2**31, 2**31, 2))
        with pytest.raises(FormatError, match="overflow"):
            load_block_stack(tmp_path / "o.tsb")

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "t.tsb").write_bytes(struct.pack("<4sIII", b"TSB1", 1, 1, 1) + bytes(8))
        with pytest.raises(FormatError, match="trailing"):
            load_block_stack(tmp_path / "t.tsb")
